use indexmap::IndexMap;
use rand::Rng;

use super::{Shape, Tensor};
use crate::error::{Error, Result};

/// Role of a parameter tensor, used by the cost accounting to separate
/// bias-free weights from biases, normalization affines and position tables.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ParamKind {
    Weight,
    Bias,
    Norm,
    RelPos,
}

impl ParamKind {
    /// Classified from the last path segment.
    pub fn of_path(path: &str) -> ParamKind {
        let leaf = path.rsplit('.').next().unwrap_or(path);
        match leaf {
            "bias" => ParamKind::Bias,
            "gamma" | "beta" => ParamKind::Norm,
            "relpos" => ParamKind::RelPos,
            _ => ParamKind::Weight,
        }
    }
}

/// Named parameter registry with unique dotted paths and insertion-order
/// iteration.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: IndexMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, path: impl Into<String>, tensor: Tensor) -> Result<()> {
        let path = path.into();
        if self.params.contains_key(&path) {
            return Err(Error::Contract(format!(
                "duplicate parameter path `{path}`"
            )));
        }
        self.params.insert(path, tensor);
        Ok(())
    }

    /// Weight drawn from U(-1/sqrt(fan_in), 1/sqrt(fan_in)).
    pub fn init_fan_in(
        &mut self,
        path: impl Into<String>,
        shape: Shape,
        fan_in: usize,
        rng: &mut impl Rng,
    ) -> Result<()> {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        self.insert(path, Tensor::uniform(shape, bound, rng))
    }

    pub fn get(&self, path: &str) -> Option<&Tensor> {
        self.params.get(path)
    }

    pub fn get_mut(&mut self, path: &str) -> Option<&mut Tensor> {
        self.params.get_mut(path)
    }

    pub fn expect(&self, path: &str) -> Result<&Tensor> {
        self.params
            .get(path)
            .ok_or_else(|| Error::Contract(format!("missing parameter `{path}`")))
    }

    pub fn expect_mut(&mut self, path: &str) -> Result<&mut Tensor> {
        self.params
            .get_mut(path)
            .ok_or_else(|| Error::Contract(format!("missing parameter `{path}`")))
    }

    pub fn contains(&self, path: &str) -> bool {
        self.params.contains_key(path)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.params.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn paths(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn total_numel(&self) -> usize {
        self.params.values().map(Tensor::numel).sum()
    }

    /// Sum of element counts for parameters under `prefix` (whole path
    /// segments only) with a kind accepted by `filter`.
    pub fn count_under(&self, prefix: &str, filter: impl Fn(ParamKind) -> bool) -> usize {
        self.iter()
            .filter(|(p, _)| path_is_under(p, prefix))
            .filter(|(p, _)| filter(ParamKind::of_path(p)))
            .map(|(_, t)| t.numel())
            .sum()
    }

    pub fn zero_grads(&mut self) {
        for t in self.params.values_mut() {
            t.clear_grad();
        }
    }
}

/// True when `path` equals `prefix` or continues it at a `.` boundary.
pub fn path_is_under(path: &str, prefix: &str) -> bool {
    prefix.is_empty()
        || path == prefix
        || (path.starts_with(prefix) && path.as_bytes().get(prefix.len()) == Some(&b'.'))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn duplicate_paths_rejected() {
        let mut s = ParamStore::new();
        s.insert("a.weight", Tensor::zeros([1, 1, 1, 1])).unwrap();
        assert!(s.insert("a.weight", Tensor::zeros([1, 1, 1, 1])).is_err());
    }

    #[test]
    fn kinds_from_leaf_segment() {
        assert_eq!(
            ParamKind::of_path("stage3.block0.fusion.gate1.bias"),
            ParamKind::Bias
        );
        assert_eq!(
            ParamKind::of_path("stage3.block0.branch0.ln.gamma"),
            ParamKind::Norm
        );
        assert_eq!(
            ParamKind::of_path("stage3.block0.branch0.attn.relpos"),
            ParamKind::RelPos
        );
        assert_eq!(ParamKind::of_path("head.fc.weight"), ParamKind::Weight);
    }

    #[test]
    fn prefix_matches_whole_segments() {
        assert!(path_is_under("stage3.block1.x", "stage3.block1"));
        assert!(!path_is_under("stage3.block10.x", "stage3.block1"));
        assert!(path_is_under("anything", ""));
    }
}
