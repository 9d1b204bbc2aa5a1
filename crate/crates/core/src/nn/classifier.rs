use crate::error::{Error, Result};
use crate::nn::layers::{init_adapter, init_layer_norm, init_linear, layer_norm, linear};
use crate::nn::params::{Binding, ParamStore};
use crate::rng::Rng;
use crate::tensor::{Graph, Scalar, Var};

pub const CLASSIFIER_PREFIX: &str = "classifier";

#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierConfig {
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    pub classes: usize,
    /// Inserts a layer-normalisation block (with affine scale/shift) after
    /// every hidden linear layer.
    pub layer_norm: bool,
}

impl ClassifierConfig {
    pub fn mlp(input_dim: usize, classes: usize) -> Self {
        ClassifierConfig {
            input_dim,
            hidden: vec![128, 128],
            classes,
            layer_norm: true,
        }
    }

    pub fn num_linear(&self) -> usize {
        self.hidden.len() + 1
    }
}

/// MLP classifier `f_θ`: flattened image in, `L` logits out.
#[derive(Debug, Clone, PartialEq)]
pub struct Classifier<F> {
    pub config: ClassifierConfig,
    pub store: ParamStore<F>,
}

fn fc(i: usize) -> String {
    format!("{CLASSIFIER_PREFIX}/fc{i}")
}

fn ln(i: usize) -> String {
    format!("{CLASSIFIER_PREFIX}/ln{i}")
}

impl<F: Scalar> Classifier<F> {
    pub fn new(config: ClassifierConfig, rng: &mut Rng) -> Result<Self> {
        let mut store = ParamStore::new();
        let mut fan_in = config.input_dim;
        for (i, &width) in config.hidden.iter().enumerate() {
            init_linear(&mut store, &fc(i), fan_in, width, rng)?;
            if config.layer_norm {
                init_layer_norm(&mut store, &ln(i), width)?;
            }
            fan_in = width;
        }
        init_linear(&mut store, &fc(config.hidden.len()), fan_in, config.classes, rng)?;
        Ok(Classifier { config, store })
    }

    /// Wraps an existing store (e.g. a loaded checkpoint).
    pub fn from_store(config: ClassifierConfig, store: ParamStore<F>) -> Result<Self> {
        for i in 0..config.num_linear() {
            store.tensor(&format!("{}/weight", fc(i)))?;
        }
        Ok(Classifier { config, store })
    }

    /// Adds rank-`rank` adapters to every linear layer.
    pub fn add_adapters(&mut self, rank: usize, rng: &mut Rng) -> Result<()> {
        for i in 0..self.config.num_linear() {
            init_adapter(&mut self.store, &fc(i), rank, rng)?;
        }
        Ok(())
    }

    pub fn linear_prefixes(&self) -> Vec<String> {
        (0..self.config.num_linear()).map(fc).collect()
    }

    pub fn last_layer_prefix(&self) -> String {
        fc(self.config.hidden.len())
    }

    pub fn classes(&self) -> usize {
        self.config.classes
    }

    pub fn logits(&self, g: &mut Graph<F>, bound: &Binding, x: Var) -> Result<Var> {
        let shape = g.shape(x);
        if shape.len() != 2 || shape[1] != self.config.input_dim {
            return Err(Error::shape(
                "classifier",
                format!("expected [n, {}], got {:?}", self.config.input_dim, shape),
            ));
        }
        let mut h = x;
        for i in 0..self.config.hidden.len() {
            h = linear(g, bound, &fc(i), h)?;
            if self.config.layer_norm {
                h = layer_norm(g, bound, &ln(i), h)?;
            }
            h = g.relu(h);
        }
        linear(g, bound, &fc(self.config.hidden.len()), h)
    }

    /// Class distribution `y = softmax(f_θ(x))`, one row per input.
    pub fn forward(&self, g: &mut Graph<F>, bound: &Binding, x: Var) -> Result<Var> {
        let z = self.logits(g, bound, x)?;
        Ok(g.softmax(z))
    }

    /// Probabilities for `n` flattened images, outside of any training graph.
    pub fn predict(&self, images: &[F]) -> Result<Vec<F>> {
        let d = self.config.input_dim;
        if d == 0 || !images.len().is_multiple_of(d) {
            return Err(Error::shape(
                "classifier",
                format!("{} values is not a whole number of {d}-dim images", images.len()),
            ));
        }
        let mut g = Graph::new();
        let mut frozen = self.store.clone();
        frozen.freeze_all(true);
        let bound = frozen.bind(&mut g);
        let x = g.constant(vec![images.len() / d, d], images.to_vec())?;
        let y = self.forward(&mut g, &bound, x)?;
        Ok(g.value(y).to_vec())
    }
}

pub fn argmax<F: PartialOrd + Copy>(row: &[F]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}
