use crate::error::{Error, Result};
use crate::nn::layers::{init_linear, linear};
use crate::nn::params::{Binding, ParamStore};
use crate::rng::{normal_vec, Rng};
use crate::tensor::{Graph, Scalar, Tensor, Var};

pub const EPS_PREFIX: &str = "eps";
pub const TABLE_PATH: &str = "embed/table";
pub const TIME_EMBED_DIM: usize = 32;

/// Noise predictor `ε(x_t, c, t)`.
///
/// Implementations receive a batch of noisy images `[B, D]`, their
/// timesteps, and a condition that is either `[B, d]` or a single `[1, d]`
/// row shared by the batch. They must return a `[B, D]` prediction.
pub trait Denoiser<F: Scalar> {
    fn image_dim(&self) -> usize;
    fn cond_dim(&self) -> usize;
    fn timesteps(&self) -> usize;

    /// Binds this model's parameters into `g`.
    fn bind(&self, g: &mut Graph<F>) -> Binding;

    /// Binds every parameter as a constant, for callers that never update
    /// the denoiser.
    fn bind_frozen(&self, g: &mut Graph<F>) -> Binding {
        self.bind(g)
    }

    fn denoise(
        &self,
        g: &mut Graph<F>,
        bound: &Binding,
        x_t: Var,
        t: &[usize],
        cond: Var,
    ) -> Result<Var>;
}

/// Fixed sinusoidal embedding of `t`: `dim/2` angular frequencies spaced
/// geometrically between `1` and `1/T`, sines then cosines.
pub fn time_embedding(t: usize, dim: usize, timesteps: usize) -> Vec<f64> {
    let half = dim / 2;
    let span = (timesteps.max(2) as f64).ln();
    let mut out = vec![0.0; dim];
    for k in 0..half {
        let frac = if half > 1 { k as f64 / (half - 1) as f64 } else { 0.0 };
        let omega = (-span * frac).exp();
        let phase = t as f64 * omega;
        out[k] = phase.sin();
        out[half + k] = phase.cos();
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpsNetConfig {
    pub image_dim: usize,
    pub cond_dim: usize,
    pub hidden: Vec<usize>,
    pub timesteps: usize,
}

impl EpsNetConfig {
    pub fn mlp(image_dim: usize, cond_dim: usize, timesteps: usize) -> Self {
        EpsNetConfig {
            image_dim,
            cond_dim,
            hidden: vec![512, 512],
            timesteps,
        }
    }
}

/// MLP denoiser over `[x_t ∥ temb(t) ∥ c]`. Every later hidden layer also
/// receives a learned projection of `[temb(t) ∥ c]`.
#[derive(Debug, Clone, PartialEq)]
pub struct EpsilonNet<F> {
    pub config: EpsNetConfig,
    pub store: ParamStore<F>,
}

fn fc(i: usize) -> String {
    format!("{EPS_PREFIX}/fc{i}")
}

fn emb(i: usize) -> String {
    format!("{EPS_PREFIX}/emb{i}")
}

impl<F: Scalar> EpsilonNet<F> {
    pub fn new(config: EpsNetConfig, rng: &mut Rng) -> Result<Self> {
        let mut store = ParamStore::new();
        let mut fan_in = config.image_dim + TIME_EMBED_DIM + config.cond_dim;
        for (i, &w) in config.hidden.iter().enumerate() {
            init_linear(&mut store, &fc(i), fan_in, w, rng)?;
            if i > 0 {
                init_linear(&mut store, &emb(i), TIME_EMBED_DIM + config.cond_dim, w, rng)?;
            }
            fan_in = w;
        }
        let last = fc(config.hidden.len());
        init_linear(&mut store, &last, fan_in, config.image_dim, rng)?;
        // small output layer so the untrained net starts near ε̂ = 0
        for v in store.tensor_mut(&format!("{last}/weight"))?.data_mut() {
            *v *= F::of(0.1);
        }
        Ok(EpsilonNet { config, store })
    }

    pub fn from_store(config: EpsNetConfig, store: ParamStore<F>) -> Result<Self> {
        for i in 0..=config.hidden.len() {
            store.tensor(&format!("{}/weight", fc(i)))?;
        }
        Ok(EpsilonNet { config, store })
    }
}

impl<F: Scalar> Denoiser<F> for EpsilonNet<F> {
    fn image_dim(&self) -> usize {
        self.config.image_dim
    }

    fn cond_dim(&self) -> usize {
        self.config.cond_dim
    }

    fn timesteps(&self) -> usize {
        self.config.timesteps
    }

    fn bind(&self, g: &mut Graph<F>) -> Binding {
        self.store.bind(g)
    }

    fn bind_frozen(&self, g: &mut Graph<F>) -> Binding {
        self.store.bind_constants(g)
    }

    fn denoise(
        &self,
        g: &mut Graph<F>,
        bound: &Binding,
        x_t: Var,
        t: &[usize],
        cond: Var,
    ) -> Result<Var> {
        let d = self.config.image_dim;
        let shape = g.shape(x_t).to_vec();
        if shape.len() != 2 || shape[1] != d || shape[0] != t.len() {
            return Err(Error::shape(
                "epsnet",
                format!("x_t {shape:?} with {} timesteps, image dim {d}", t.len()),
            ));
        }
        let batch = shape[0];
        if let Some(&bad) = t.iter().find(|&&s| s == 0 || s > self.config.timesteps) {
            return Err(Error::contract(format!(
                "timestep {bad} outside [1, {}]",
                self.config.timesteps
            )));
        }
        let cshape = g.shape(cond).to_vec();
        if cshape.len() != 2 || cshape[1] != self.config.cond_dim {
            return Err(Error::shape(
                "epsnet",
                format!("condition {cshape:?}, expected [_, {}]", self.config.cond_dim),
            ));
        }
        let cond = if cshape[0] == batch {
            cond
        } else {
            g.broadcast_to(cond, &[batch, self.config.cond_dim])?
        };
        let temb: Vec<F> = t
            .iter()
            .flat_map(|&s| time_embedding(s, TIME_EMBED_DIM, self.config.timesteps))
            .map(F::of)
            .collect();
        let temb = g.constant(vec![batch, TIME_EMBED_DIM], temb)?;
        let e = g.concat(&[temb, cond], 1)?;
        let mut h = g.concat(&[x_t, e], 1)?;
        for i in 0..self.config.hidden.len() {
            h = linear(g, bound, &fc(i), h)?;
            if i > 0 {
                let p = linear(g, bound, &emb(i), e)?;
                h = g.add(h, p)?;
            }
            h = g.relu(h);
        }
        linear(g, bound, &fc(self.config.hidden.len()), h)
    }
}

/// Learned class embeddings `ℓ_j`, one row per class.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassEmbeddingTable<F> {
    pub store: ParamStore<F>,
}

impl<F: Scalar> ClassEmbeddingTable<F> {
    pub fn new(classes: usize, dim: usize, rng: &mut Rng) -> Result<Self> {
        let rows = normal_vec::<F>(rng, classes * dim);
        Self::from_rows(classes, dim, rows)
    }

    pub fn from_rows(classes: usize, dim: usize, rows: Vec<F>) -> Result<Self> {
        let mut store = ParamStore::new();
        store.insert(TABLE_PATH, Tensor::new(vec![classes, dim], rows)?)?;
        Ok(ClassEmbeddingTable { store })
    }

    pub fn from_store(store: ParamStore<F>) -> Result<Self> {
        let shape = store.tensor(TABLE_PATH)?.shape();
        if shape.len() != 2 {
            return Err(Error::shape("embedding", format!("table shape {shape:?}")));
        }
        Ok(ClassEmbeddingTable { store })
    }

    pub fn tensor(&self) -> &Tensor<F> {
        self.store.tensor(TABLE_PATH).expect("table entry present")
    }

    pub fn classes(&self) -> usize {
        self.tensor().shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.tensor().shape()[1]
    }

    pub fn row(&self, j: usize) -> &[F] {
        let d = self.dim();
        &self.tensor().data()[j * d..(j + 1) * d]
    }

    pub fn bind(&self, g: &mut Graph<F>) -> (Binding, Var) {
        let b = self.store.bind(g);
        let v = b.get(TABLE_PATH).expect("table bound");
        (b, v)
    }
}
