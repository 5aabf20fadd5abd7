//! Fusion of branch outputs back into one `d1`-channel map.

use rand::Rng;

use crate::error::{Error, Result};
use crate::layers::Linear;
use crate::tensor::{Activation, Graph, ParamStore, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FusionKind {
    /// Per-pixel, per-channel sigmoid weights from two FC layers, then a fusion FC.
    Pafm,
    /// Fusion FC only.
    Fc,
    /// Adaptive weights only; no fusion FC.
    Aw,
    /// Plain channel concatenation.
    Concat,
    /// Channel-only squeeze-and-excitation gate, then a fusion FC.
    Se,
}

impl FusionKind {
    pub const ALL: [FusionKind; 5] = [
        FusionKind::Pafm,
        FusionKind::Fc,
        FusionKind::Aw,
        FusionKind::Concat,
        FusionKind::Se,
    ];

    pub fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "pafm" => FusionKind::Pafm,
            "fc" => FusionKind::Fc,
            "aw" => FusionKind::Aw,
            "concat" => FusionKind::Concat,
            "se" => FusionKind::Se,
            _ => return None,
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            FusionKind::Pafm => "pafm",
            FusionKind::Fc => "fc",
            FusionKind::Aw => "aw",
            FusionKind::Concat => "concat",
            FusionKind::Se => "se",
        }
    }
}

/// Hidden width of the SE gate relative to `d1`.
pub const SE_FUSION_REDUCTION: usize = 4;

#[derive(Clone, Debug)]
pub struct Fusion {
    pub path: String,
    pub kind: FusionKind,
    pub d1: usize,
    pub gate1: Option<Linear>,
    pub gate2: Option<Linear>,
    pub fuse: Option<Linear>,
}

impl Fusion {
    pub fn new(path: impl Into<String>, kind: FusionKind, d1: usize) -> Result<Self> {
        let path = path.into();
        let hidden = match kind {
            FusionKind::Pafm | FusionKind::Aw => {
                if d1 < 2 || !d1.is_multiple_of(2) {
                    return Err(Error::config(
                        "ladder.fusion",
                        format!("{path}: pixel-adaptive weights need an even width, got {d1}"),
                    ));
                }
                Some(d1 / 2)
            }
            FusionKind::Se => Some((d1 / SE_FUSION_REDUCTION).max(1)),
            FusionKind::Fc | FusionKind::Concat => None,
        };
        let gate1 = hidden.map(|hd| Linear::new(format!("{path}.gate1"), d1, hd, true));
        let gate2 = hidden.map(|hd| Linear::new(format!("{path}.gate2"), hd, d1, true));
        let fuse = matches!(kind, FusionKind::Pafm | FusionKind::Fc | FusionKind::Se)
            .then(|| Linear::new(format!("{path}.fuse"), d1, d1, true));
        Ok(Fusion {
            path,
            kind,
            d1,
            gate1,
            gate2,
            fuse,
        })
    }

    pub fn linears(&self) -> Vec<&Linear> {
        [&self.gate1, &self.gate2, &self.fuse]
            .into_iter()
            .flatten()
            .collect()
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut impl Rng) -> Result<()> {
        self.linears()
            .into_iter()
            .try_for_each(|l| l.init(store, rng))
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, branches: &[Var]) -> Result<Var> {
        let Some(first) = branches.first() else {
            return Err(Error::Contract(format!(
                "{}: no branch outputs to fuse",
                self.path
            )));
        };
        let [n, _, h, w] = first.shape();
        if let Some(bad) = branches.iter().find(|b| {
            let s = b.shape();
            s[0] != n || s[2] != h || s[3] != w || s[1] != first.shape()[1]
        }) {
            return Err(Error::Contract(format!(
                "{}: branch output {:?} inconsistent with {:?}",
                self.path,
                bad.shape(),
                first.shape()
            )));
        }
        let cat = g.concat_channels(branches)?;
        if cat.shape()[1] != self.d1 {
            return Err(Error::Contract(format!(
                "{}: branches concatenate to {} channels, expected {}",
                self.path,
                cat.shape()[1],
                self.d1
            )));
        }
        let gated = match self.kind {
            FusionKind::Pafm | FusionKind::Aw => {
                let wts = self.weights(g, store, cat)?;
                g.mul(cat, wts)?
            }
            FusionKind::Se => {
                let pooled = g.gap(cat);
                let wts = self.weights(g, store, pooled)?;
                g.scale_channels(cat, wts)?
            }
            FusionKind::Fc | FusionKind::Concat => cat,
        };
        match &self.fuse {
            Some(f) => f.forward(g, store, gated),
            None => Ok(gated),
        }
    }

    fn weights(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let (g1, g2) = (
            self.gate1.as_ref().expect("gate"),
            self.gate2.as_ref().expect("gate"),
        );
        let hid = g1.forward(g, store, x)?;
        let hid = g.act(hid, Activation::Relu);
        let logits = g2.forward(g, store, hid)?;
        Ok(g.act(logits, Activation::Sigmoid))
    }

    /// Forces the gate to output exactly one (zero weight, saturating bias).
    pub fn force_unit_gate(&self, store: &mut ParamStore) -> Result<()> {
        match &self.gate2 {
            Some(g2) => g2.set_constant(store, 100.0),
            None => Ok(()),
        }
    }
}
