use std::collections::BTreeMap;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::{Gradients, Graph, Scalar, Tensor, Var};

/// Role of a parameter, derived from the last segment of its path.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    Weight,
    Bias,
    NormScale,
    NormShift,
    AdapterA,
    AdapterB,
    Embedding,
    Logits,
}

impl ParamKind {
    pub fn from_path(path: &str) -> Option<Self> {
        Some(match path.rsplit('/').next()? {
            "weight" => ParamKind::Weight,
            "bias" => ParamKind::Bias,
            "scale" => ParamKind::NormScale,
            "shift" => ParamKind::NormShift,
            "lora_a" => ParamKind::AdapterA,
            "lora_b" => ParamKind::AdapterB,
            "table" => ParamKind::Embedding,
            "logits" => ParamKind::Logits,
            _ => return None,
        })
    }

    pub fn is_norm(self) -> bool {
        matches!(self, ParamKind::NormScale | ParamKind::NormShift)
    }

    pub fn is_adapter(self) -> bool {
        matches!(self, ParamKind::AdapterA | ParamKind::AdapterB)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param<F> {
    pub tensor: Tensor<F>,
    pub kind: ParamKind,
    pub frozen: bool,
}

/// Named, path-addressed parameters with a freeze mask.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore<F> {
    entries: BTreeMap<String, Param<F>>,
}

/// Path-to-node map produced by [`ParamStore::bind`] for one graph.
#[derive(Debug, Clone, Default)]
pub struct Binding {
    vars: BTreeMap<String, Var>,
}

impl Binding {
    pub fn get(&self, path: &str) -> Result<Var> {
        self.vars
            .get(path)
            .copied()
            .ok_or_else(|| Error::contract(format!("parameter {path} is not bound")))
    }

    pub fn try_get(&self, path: &str) -> Option<Var> {
        self.vars.get(path).copied()
    }

    pub fn extend(&mut self, other: Binding) {
        self.vars.extend(other.vars);
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(p, v)| (p.as_str(), *v))
    }
}

/// Which entries are frozen (`true`) after a subset selection.
pub type FreezeMask = BTreeMap<String, bool>;

impl<F: Scalar> ParamStore<F> {
    pub fn new() -> Self {
        ParamStore {
            entries: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, path: impl Into<String>, tensor: Tensor<F>) -> Result<()> {
        let path = path.into();
        let kind = ParamKind::from_path(&path)
            .ok_or_else(|| Error::contract(format!("unrecognised parameter path {path}")))?;
        if self.entries.contains_key(&path) {
            return Err(Error::contract(format!("duplicate parameter path {path}")));
        }
        self.entries.insert(
            path,
            Param {
                tensor: tensor.with_requires_grad(true),
                kind,
                frozen: false,
            },
        );
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.values().map(|p| p.tensor.numel()).sum()
    }

    pub fn contains(&self, path: &str) -> bool {
        self.entries.contains_key(path)
    }

    pub fn get(&self, path: &str) -> Option<&Param<F>> {
        self.entries.get(path)
    }

    pub fn tensor(&self, path: &str) -> Result<&Tensor<F>> {
        self.entries
            .get(path)
            .map(|p| &p.tensor)
            .ok_or_else(|| Error::contract(format!("no parameter {path}")))
    }

    pub fn tensor_mut(&mut self, path: &str) -> Result<&mut Tensor<F>> {
        self.entries
            .get_mut(path)
            .map(|p| &mut p.tensor)
            .ok_or_else(|| Error::contract(format!("no parameter {path}")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param<F>)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Param<F>)> {
        self.entries.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn paths(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn set_frozen(&mut self, path: &str, frozen: bool) -> Result<()> {
        self.entries
            .get_mut(path)
            .map(|p| p.frozen = frozen)
            .ok_or_else(|| Error::contract(format!("no parameter {path}")))
    }

    pub fn freeze_all(&mut self, frozen: bool) {
        self.entries.values_mut().for_each(|p| p.frozen = frozen);
    }

    pub fn frozen_count(&self) -> usize {
        self.entries.values().filter(|p| p.frozen).count()
    }

    pub fn freeze_mask(&self) -> FreezeMask {
        self.entries
            .iter()
            .map(|(k, p)| (k.clone(), p.frozen))
            .collect()
    }

    pub fn apply_mask(&mut self, mask: &FreezeMask) -> Result<()> {
        for (path, &frozen) in mask {
            self.set_frozen(path, frozen)?;
        }
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        self.entries.values_mut().for_each(|p| p.tensor.zero_grad());
    }

    pub fn clear_grads(&mut self) {
        self.entries.values_mut().for_each(|p| p.tensor.clear_grad());
    }

    /// Copies every entry into `g`. Frozen entries become constants.
    pub fn bind(&self, g: &mut Graph<F>) -> Binding {
        self.bind_with(g, |p| p.frozen)
    }

    /// Copies every entry into `g` as a constant.
    pub fn bind_constants(&self, g: &mut Graph<F>) -> Binding {
        self.bind_with(g, |_| true)
    }

    fn bind_with(&self, g: &mut Graph<F>, constant: impl Fn(&Param<F>) -> bool) -> Binding {
        let vars = self
            .entries
            .iter()
            .map(|(path, p)| {
                let v = if constant(p) {
                    g.constant(p.tensor.shape().to_vec(), p.tensor.data().to_vec())
                        .expect("stored tensor is well-formed")
                } else {
                    g.leaf(&p.tensor)
                };
                (path.clone(), v)
            })
            .collect();
        Binding { vars }
    }

    /// Adds the gradients of every unfrozen, bound entry into its accumulator.
    pub fn accumulate(&mut self, binding: &Binding, grads: &Gradients<F>) -> Result<()> {
        for (path, p) in self.entries.iter_mut() {
            if p.frozen {
                continue;
            }
            if let Some(g) = binding.try_get(path).and_then(|v| grads.get(v)) {
                p.tensor.accumulate_grad(g)?;
            }
        }
        Ok(())
    }

    /// SHA-256 over the paths and raw bytes of the entries selected by `keep`.
    pub fn digest_where(&self, mut keep: impl FnMut(&str, &Param<F>) -> bool) -> String {
        let mut h = Sha256::new();
        let mut buf = Vec::new();
        for (path, p) in &self.entries {
            if !keep(path, p) {
                continue;
            }
            h.update((path.len() as u64).to_le_bytes());
            h.update(path.as_bytes());
            buf.clear();
            p.tensor.data().iter().for_each(|v| v.write_le(&mut buf));
            h.update(&buf);
        }
        h.finalize()
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }

    pub fn digest(&self) -> String {
        self.digest_where(|_, _| true)
    }

    pub fn frozen_digest(&self) -> String {
        self.digest_where(|_, p| p.frozen)
    }
}
