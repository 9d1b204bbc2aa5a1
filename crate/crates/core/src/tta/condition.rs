//! Turning discriminative outputs into diffusion conditions.

use crate::error::{Error, Result};
use crate::tensor::{Graph, Scalar, Var};

/// A diffusion condition built from a task output, held as a graph node so
/// gradients flow back to the discriminative model.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Condition {
    /// `c = Σ_j y_j ℓ_j`, shape `[n, d]`.
    ClassMix(Var),
    /// Per-pixel mixture map, shape `[h·w, d]` in row-major pixel order.
    PixelMix { var: Var, width: usize, height: usize },
    /// Depth map used directly, shape `[h, w]`.
    Depth { var: Var, width: usize, height: usize },
}

impl Condition {
    pub fn var(self) -> Var {
        match self {
            Condition::ClassMix(v) => v,
            Condition::PixelMix { var, .. } | Condition::Depth { var, .. } => var,
        }
    }
}

fn tolerance<F: Scalar>(classes: usize) -> f64 {
    1e-6 + 8.0 * classes as f64 * F::epsilon().as_f64()
}

/// Index of the first row of `y` that is not a probability distribution.
fn first_bad_row<F: Scalar>(y: &[F], classes: usize) -> Option<(usize, f64)> {
    let tol = tolerance::<F>(classes);
    y.chunks(classes).enumerate().find_map(|(i, row)| {
        let total: f64 = row.iter().map(|v| v.as_f64()).sum();
        let negative = row.iter().any(|&v| v < F::zero());
        (negative || (total - 1.0).abs() > tol || !total.is_finite()).then_some((i, total))
    })
}

fn mixture<F: Scalar>(g: &mut Graph<F>, y: Var, table: Var) -> Result<Var> {
    let (ys, ts) = (g.shape(y).to_vec(), g.shape(table).to_vec());
    if ys.len() != 2 || ts.len() != 2 || ys[1] != ts[0] {
        return Err(Error::shape(
            "condition",
            format!("distribution {ys:?} does not match embedding table {ts:?}"),
        ));
    }
    g.matmul(y, table)
}

/// Classification condition `c = yᵀ·table` for each row of `y: [n, L]`.
pub fn build_condition_classification<F: Scalar>(
    g: &mut Graph<F>,
    y: Var,
    table: Var,
) -> Result<Condition> {
    let c = mixture(g, y, table)?;
    let classes = g.shape(y)[1];
    if let Some((row, total)) = first_bad_row(g.value(y), classes) {
        return Err(Error::contract(format!(
            "row {row} of y is not a distribution (sum {total})"
        )));
    }
    Ok(Condition::ClassMix(c))
}

/// Per-pixel condition for `y: [h·w, L]`, pixels in row-major order.
pub fn build_condition_pixel<F: Scalar>(
    g: &mut Graph<F>,
    y: Var,
    table: Var,
    width: usize,
    height: usize,
) -> Result<Condition> {
    let shape = g.shape(y).to_vec();
    if shape.len() != 2 || shape[0] != width * height {
        return Err(Error::shape(
            "pixel condition",
            format!("{shape:?} for a {width}x{height} image"),
        ));
    }
    let c = mixture(g, y, table)?;
    if let Some((p, total)) = first_bad_row(g.value(y), shape[1]) {
        return Err(Error::contract(format!(
            "pixel (row {}, col {}) is not a distribution (sum {total})",
            p / width,
            p % width
        )));
    }
    Ok(Condition::PixelMix { var: c, width, height })
}

/// Depth condition `c = y`; every depth must be strictly positive.
pub fn build_condition_depth<F: Scalar>(g: &mut Graph<F>, y: Var) -> Result<Condition> {
    let shape = g.shape(y).to_vec();
    if shape.len() != 2 {
        return Err(Error::shape("depth condition", format!("{shape:?} is not a map")));
    }
    if let Some(i) = g.value(y).iter().position(|&v| v.is_nan() || v <= F::zero()) {
        return Err(Error::contract(format!(
            "depth at (row {}, col {}) is {}, must be positive",
            i / shape[1],
            i % shape[1],
            g.value(y)[i]
        )));
    }
    Ok(Condition::Depth {
        var: y,
        width: shape[1],
        height: shape[0],
    })
}
