//! Per-branch feed-forward layers.

use rand::Rng;

use crate::error::{Error, Result};
use crate::layers::Conv;
use crate::tensor::{Activation, Graph, ParamStore, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FfnKind {
    /// Pointwise reduce to d/4, depthwise 3x3, pointwise restore.
    Light,
    /// Two pointwise layers with hidden width 4d.
    Standard,
}

impl FfnKind {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "lffn" => Some(FfnKind::Light),
            "ffn" => Some(FfnKind::Standard),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            FfnKind::Light => "lffn",
            FfnKind::Standard => "ffn",
        }
    }
}

pub const FFN_EXPANSION: usize = 4;

#[derive(Clone, Debug)]
pub struct FeedForward {
    pub path: String,
    pub kind: FfnKind,
    pub d: usize,
    pub layers: Vec<Conv>,
}

impl FeedForward {
    pub fn new(path: impl Into<String>, kind: FfnKind, d: usize) -> Result<Self> {
        let path = path.into();
        let layers = match kind {
            FfnKind::Light => {
                if !d.is_multiple_of(4) {
                    return Err(Error::config(
                        "ladder.ffn",
                        format!("{path}: light FFN needs width divisible by 4, got {d}"),
                    ));
                }
                let r = d / 4;
                vec![
                    Conv::pointwise(format!("{path}.reduce"), d, r, true),
                    Conv::depthwise(format!("{path}.dw"), r, 1, true),
                    Conv::pointwise(format!("{path}.restore"), r, d, true),
                ]
            }
            FfnKind::Standard => vec![
                Conv::pointwise(format!("{path}.fc1"), d, FFN_EXPANSION * d, true),
                Conv::pointwise(format!("{path}.fc2"), FFN_EXPANSION * d, d, true),
            ],
        };
        Ok(FeedForward {
            path,
            kind,
            d,
            layers,
        })
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut impl Rng) -> Result<()> {
        self.layers.iter().try_for_each(|l| l.init(store, rng))
    }

    /// GELU after every layer but the last.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let mut h = x;
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(g, store, h)?;
            if i < last {
                h = g.act(h, Activation::Gelu);
            }
        }
        Ok(h)
    }

    pub fn weight_count(&self) -> usize {
        self.layers.iter().map(Conv::weight_count).sum()
    }
}
