//! Building blocks shared by the classifier and the denoiser.

use crate::error::Result;
use crate::nn::params::{Binding, ParamStore};
use crate::rng::{normal_vec, Rng};
use crate::tensor::{Graph, Scalar, Tensor, Var};

const NORM_EPS: f64 = 1e-5;

/// He-normal weight `[out, in]` and zero bias under `prefix`.
pub fn init_linear<F: Scalar>(
    store: &mut ParamStore<F>,
    prefix: &str,
    fan_in: usize,
    fan_out: usize,
    rng: &mut Rng,
) -> Result<()> {
    let std = (2.0 / fan_in.max(1) as f64).sqrt();
    let w: Vec<F> = normal_vec::<f64>(rng, fan_in * fan_out)
        .into_iter()
        .map(|v| F::of(v * std))
        .collect();
    store.insert(format!("{prefix}/weight"), Tensor::new(vec![fan_out, fan_in], w)?)?;
    store.insert(format!("{prefix}/bias"), Tensor::zeros(vec![fan_out]))?;
    Ok(())
}

/// Low-rank adapter factors `A: out×r` (zeros) and `B: r×in` (small normal),
/// so `A·B = 0` at initialisation.
pub fn init_adapter<F: Scalar>(
    store: &mut ParamStore<F>,
    prefix: &str,
    rank: usize,
    rng: &mut Rng,
) -> Result<()> {
    let shape = store.tensor(&format!("{prefix}/weight"))?.shape().to_vec();
    let (fan_out, fan_in) = (shape[0], shape[1]);
    let std = 1.0 / (fan_in.max(1) as f64).sqrt();
    let b: Vec<F> = normal_vec::<f64>(rng, rank * fan_in)
        .into_iter()
        .map(|v| F::of(v * std))
        .collect();
    store.insert(format!("{prefix}/lora_a"), Tensor::zeros(vec![fan_out, rank]))?;
    store.insert(format!("{prefix}/lora_b"), Tensor::new(vec![rank, fan_in], b)?)?;
    Ok(())
}

pub fn init_layer_norm<F: Scalar>(store: &mut ParamStore<F>, prefix: &str, dim: usize) -> Result<()> {
    store.insert(
        format!("{prefix}/scale"),
        Tensor::new(vec![dim], vec![F::one(); dim])?,
    )?;
    store.insert(format!("{prefix}/shift"), Tensor::zeros(vec![dim]))?;
    Ok(())
}

/// `x · (W + A·B)ᵀ + b`; the adapter term is present only if bound.
pub fn linear<F: Scalar>(g: &mut Graph<F>, bound: &Binding, prefix: &str, x: Var) -> Result<Var> {
    let mut w = bound.get(&format!("{prefix}/weight"))?;
    if let (Some(a), Some(b)) = (
        bound.try_get(&format!("{prefix}/lora_a")),
        bound.try_get(&format!("{prefix}/lora_b")),
    ) {
        let delta = g.matmul(a, b)?;
        w = g.add(w, delta)?;
    }
    let bias = bound.get(&format!("{prefix}/bias"))?;
    let y = g.matmul_t(x, w)?;
    g.add(y, bias)
}

/// Zero-mean, unit-variance rows over the last axis.
pub fn normalize<F: Scalar>(g: &mut Graph<F>, x: Var) -> Result<Var> {
    let axis = g.shape(x).len() - 1;
    let mu = g.mean_axis(x, axis, true)?;
    let centered = g.sub(x, mu)?;
    let sq = g.square(centered);
    let var = g.mean_axis(sq, axis, true)?;
    let var = g.add_scalar(var, F::of(NORM_EPS));
    let std = g.sqrt(var)?;
    g.div(centered, std)
}

/// Normalises the last axis, then applies the learned scale and shift.
pub fn layer_norm<F: Scalar>(g: &mut Graph<F>, bound: &Binding, prefix: &str, x: Var) -> Result<Var> {
    let normed = normalize(g, x)?;
    let scale = bound.get(&format!("{prefix}/scale"))?;
    let shift = bound.get(&format!("{prefix}/shift"))?;
    let y = g.mul(normed, scale)?;
    g.add(y, shift)
}
