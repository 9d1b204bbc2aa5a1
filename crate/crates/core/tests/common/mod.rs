#![allow(dead_code)]

use dtta_core::diffusion::{NoisePair, NoiseSchedule};
use dtta_core::nn::{
    Binding, ClassEmbeddingTable, Classifier, ClassifierConfig, Denoiser, EpsNetConfig, EpsilonNet,
};
use dtta_core::rng::{normal_vec, seeded};
use dtta_core::tensor::{Graph, Scalar, Var};
use dtta_core::tta::Models;
use dtta_core::Result;

/// A small classifier/denoiser/table triple over `side × side` images.
pub fn tiny_models<F: Scalar>(side: usize, classes: usize, seed: u64) -> Models<F> {
    let dim = side * side;
    let mut rng = seeded(seed);
    let classifier = Classifier::new(
        ClassifierConfig {
            input_dim: dim,
            hidden: vec![16],
            classes,
            layer_norm: true,
        },
        &mut rng,
    )
    .unwrap();
    let epsnet = EpsilonNet::new(
        EpsNetConfig {
            image_dim: dim,
            cond_dim: 4,
            hidden: vec![24, 24],
            timesteps: 50,
        },
        &mut rng,
    )
    .unwrap();
    let table = ClassEmbeddingTable::new(classes, 4, &mut rng).unwrap();
    Models { classifier, epsnet, table }
}

pub fn image<F: Scalar>(dim: usize, seed: u64) -> Vec<F> {
    normal_vec::<f64>(&mut seeded(seed), dim)
        .into_iter()
        .map(|v| F::of((0.5 + 0.2 * v).clamp(0.0, 1.0)))
        .collect()
}

/// Returns zeros: the loss is then the mean square of the noise.
pub struct ZeroDenoiser {
    pub dim: usize,
    pub cond_dim: usize,
    pub timesteps: usize,
}

impl<F: Scalar> Denoiser<F> for ZeroDenoiser {
    fn image_dim(&self) -> usize {
        self.dim
    }
    fn cond_dim(&self) -> usize {
        self.cond_dim
    }
    fn timesteps(&self) -> usize {
        self.timesteps
    }
    fn bind(&self, _: &mut Graph<F>) -> Binding {
        Binding::default()
    }
    fn denoise(&self, g: &mut Graph<F>, _: &Binding, x_t: Var, _: &[usize], _: Var) -> Result<Var> {
        let shape = g.shape(x_t).to_vec();
        g.constant(shape.clone(), vec![F::zero(); shape.iter().product()])
    }
}

/// Replays the noise of a known pair list, in order.
pub struct PairOracle<F> {
    pub pairs: Vec<NoisePair<F>>,
    pub cond_dim: usize,
    pub timesteps: usize,
}

impl<F: Scalar> Denoiser<F> for PairOracle<F> {
    fn image_dim(&self) -> usize {
        self.pairs[0].eps.len()
    }
    fn cond_dim(&self) -> usize {
        self.cond_dim
    }
    fn timesteps(&self) -> usize {
        self.timesteps
    }
    fn bind(&self, _: &mut Graph<F>) -> Binding {
        Binding::default()
    }
    fn denoise(&self, g: &mut Graph<F>, _: &Binding, x_t: Var, t: &[usize], _: Var) -> Result<Var> {
        let shape = g.shape(x_t).to_vec();
        assert_eq!(t.len(), self.pairs.len());
        let eps = self.pairs.iter().flat_map(|p| p.eps.iter().copied()).collect();
        g.constant(shape, eps)
    }
}

/// Recovers the true noise from `x_t` for a known clean image (in model
/// space), then adds `λ·(1 − c_j)` to every element. With an identity
/// embedding table `c_j = y_j`, so the loss `λ²(1 − y_j)²` falls strictly
/// as `y_j` grows.
pub struct BiasedOracle {
    pub x: Vec<f64>,
    pub schedule: NoiseSchedule,
    pub class: usize,
    pub classes: usize,
    pub lambda: f64,
}

impl<F: Scalar> Denoiser<F> for BiasedOracle {
    fn image_dim(&self) -> usize {
        self.x.len()
    }
    fn cond_dim(&self) -> usize {
        self.classes
    }
    fn timesteps(&self) -> usize {
        self.schedule.steps()
    }
    fn bind(&self, _: &mut Graph<F>) -> Binding {
        Binding::default()
    }
    fn denoise(&self, g: &mut Graph<F>, _: &Binding, x_t: Var, t: &[usize], cond: Var) -> Result<Var> {
        let d = self.x.len();
        let xt = g.value(x_t).to_vec();
        let mut eps = Vec::with_capacity(xt.len());
        for (row, &s) in t.iter().enumerate() {
            let ab = self.schedule.alpha_bar(s);
            for k in 0..d {
                let v = (xt[row * d + k].as_f64() - ab.sqrt() * self.x[k]) / (1.0 - ab).sqrt();
                eps.push(F::of(v));
            }
        }
        let eps = g.constant(vec![t.len(), d], eps)?;
        let mut pick = vec![F::zero(); self.classes];
        pick[self.class] = F::one();
        let pick = g.constant(vec![self.classes, 1], pick)?;
        let cj = g.matmul(cond, pick)?;
        let miss = g.neg(cj);
        let miss = g.add_scalar(miss, F::one());
        let miss = g.mul_scalar(miss, F::of(self.lambda));
        let miss = g.broadcast_to(miss, &[t.len(), d])?;
        g.add(eps, miss)
    }
}
