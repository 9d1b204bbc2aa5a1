use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::nn::params::{FreezeMask, ParamKind, ParamStore};
use crate::tensor::Scalar;

/// Which part of the discriminative model is adapted.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ParamSubset {
    All,
    NormLayers,
    LastLayer,
    /// Freezes the network; adaptation acts on a free per-example logit vector.
    LogitsOnly,
    AdaptersOnly,
}

impl ParamSubset {
    pub const ALL: [ParamSubset; 5] = [
        ParamSubset::All,
        ParamSubset::NormLayers,
        ParamSubset::LastLayer,
        ParamSubset::LogitsOnly,
        ParamSubset::AdaptersOnly,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ParamSubset::All => "all",
            ParamSubset::NormLayers => "norm_layers",
            ParamSubset::LastLayer => "last_layer",
            ParamSubset::LogitsOnly => "logits_only",
            ParamSubset::AdaptersOnly => "adapters_only",
        }
    }
}

impl fmt::Display for ParamSubset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ParamSubset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ParamSubset::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| Error::UnsupportedSubset {
                subset: s.to_string(),
                reason: "unknown subset name".into(),
            })
    }
}

/// Layer index of a `…/fc{i}/…` path.
fn linear_index(path: &str) -> Option<usize> {
    path.split('/')
        .find_map(|seg| seg.strip_prefix("fc").and_then(|i| i.parse().ok()))
}

/// Computes the freeze mask for `subset` over `store`.
pub fn select_subset<F: Scalar>(store: &ParamStore<F>, subset: ParamSubset) -> Result<FreezeMask> {
    let unsupported = |reason: &str| Error::UnsupportedSubset {
        subset: subset.name().into(),
        reason: reason.into(),
    };
    let mask: FreezeMask = match subset {
        ParamSubset::All => store.paths().map(|p| (p.to_string(), false)).collect(),
        ParamSubset::LogitsOnly => store.paths().map(|p| (p.to_string(), true)).collect(),
        ParamSubset::NormLayers => {
            if !store.iter().any(|(_, p)| p.kind.is_norm()) {
                return Err(unsupported("model has no normalisation layers"));
            }
            store
                .iter()
                .map(|(path, p)| (path.to_string(), !p.kind.is_norm()))
                .collect()
        }
        ParamSubset::AdaptersOnly => {
            if !store.iter().any(|(_, p)| p.kind.is_adapter()) {
                return Err(unsupported("model has no low-rank adapters"));
            }
            store
                .iter()
                .map(|(path, p)| (path.to_string(), !p.kind.is_adapter()))
                .collect()
        }
        ParamSubset::LastLayer => {
            let last = store
                .iter()
                .filter(|(_, p)| p.kind == ParamKind::Weight)
                .filter_map(|(path, _)| linear_index(path))
                .max()
                .ok_or_else(|| unsupported("model has no linear layers"))?;
            store
                .iter()
                .map(|(path, p)| {
                    let open = linear_index(path) == Some(last)
                        && matches!(p.kind, ParamKind::Weight | ParamKind::Bias);
                    (path.to_string(), !open)
                })
                .collect()
        }
    };
    Ok(mask)
}
