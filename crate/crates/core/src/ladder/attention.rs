//! Per-branch window attention: plain W-MHSA for the first branch and the
//! progressive-shift variant that takes the previous branch's output as its
//! value.

use std::sync::Arc;

use rand::Rng;

use super::window::{self, ShiftSpec};
use crate::error::{Error, Result};
use crate::layers::Linear;
use crate::tensor::{AttentionSpec, Graph, ParamStore, Tensor, Var};

/// Initial bound of the relative position bias table.
pub const RELPOS_INIT: f64 = 0.02;

#[derive(Clone, Debug)]
pub struct BranchAttention {
    /// Path of the attention scope, e.g. `stage3.block0.branch1.attn`.
    pub path: String,
    pub d: usize,
    pub heads: usize,
    pub window: usize,
    pub shift: ShiftSpec,
    pub mask_wrapped: bool,
    /// Projects its own value. Off for branches fed by the previous output.
    pub own_value: bool,
    pub q: Linear,
    pub k: Linear,
    pub v: Option<Linear>,
    pub o: Linear,
}

impl BranchAttention {
    pub fn new(
        path: impl Into<String>,
        d: usize,
        heads: usize,
        window: usize,
        shift: ShiftSpec,
        mask_wrapped: bool,
        own_value: bool,
    ) -> Result<Self> {
        let path = path.into();
        if heads == 0 || !d.is_multiple_of(heads) {
            return Err(Error::config(
                "ladder.heads",
                format!("{path}: branch width {d} not divisible by {heads} heads"),
            ));
        }
        shift.check(window)?;
        let lin = |name: &str, bias: bool| Linear::new(format!("{path}.{name}"), d, d, bias);
        // A delivered branch keeps its output projection bias-free so a zero
        // delivered value leaves the residual untouched.
        Ok(BranchAttention {
            q: lin("q", true),
            k: lin("k", true),
            v: own_value.then(|| lin("v", true)),
            o: lin("o", own_value),
            path,
            d,
            heads,
            window,
            shift,
            mask_wrapped,
            own_value,
        })
    }

    pub fn relpos_path(&self) -> String {
        format!("{}.relpos", self.path)
    }

    pub fn head_dim(&self) -> usize {
        self.d / self.heads
    }

    pub fn scale(&self) -> f64 {
        1.0 / (self.head_dim() as f64).sqrt()
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut impl Rng) -> Result<()> {
        self.q.init(store, rng)?;
        self.k.init(store, rng)?;
        if let Some(v) = &self.v {
            v.init(store, rng)?;
        }
        self.o.init(store, rng)?;
        let span = 2 * self.window - 1;
        store.insert(
            self.relpos_path(),
            Tensor::uniform([1, self.heads, span, span], RELPOS_INIT, rng),
        )
    }

    /// Projections that appear in the bias-free weight count.
    pub fn linears(&self) -> Vec<&Linear> {
        let mut out = vec![&self.q, &self.k];
        out.extend(self.v.as_ref());
        out.push(&self.o);
        out
    }

    pub fn spec(&self, h: usize, w: usize) -> Result<AttentionSpec> {
        let m = self.window;
        let regions = if self.mask_wrapped && !self.shift.is_zero() {
            Some(Arc::new(window::region_ids(h, w, m, self.shift)?))
        } else {
            None
        };
        Ok(AttentionSpec {
            heads: self.heads,
            window: m,
            scale: self.scale(),
            rel_index: Arc::new(window::relative_position_index(m)),
            regions,
            windows_per_image: (h / m) * (w / m),
        })
    }

    /// `x + O(unshift(attn(shift(Qx), shift(Kx), shift(V))))` where `V` is
    /// either the own projection of `x` or the delivered tensor.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x: Var,
        delivered: Option<Var>,
    ) -> Result<Var> {
        let [_, c, h, w] = x.shape();
        if c != self.d {
            return Err(Error::dim(
                "branch_attention",
                format!(
                    "{}: input channels (axis 1) = {c}, expected {}",
                    self.path, self.d
                ),
            ));
        }
        let value = match (&self.v, delivered) {
            (Some(v), _) => v.forward(g, store, x)?,
            (None, Some(prev)) => {
                if prev.shape() != x.shape() {
                    return Err(Error::Contract(format!(
                        "{}: delivered value {:?} does not match branch input {:?}",
                        self.path,
                        prev.shape(),
                        x.shape()
                    )));
                }
                prev
            }
            (None, None) => {
                return Err(Error::Contract(format!(
                    "{}: delivered branch called without a value",
                    self.path
                )));
            }
        };
        let spec = self.spec(h, w)?;
        let q = self.q.forward(g, store, x)?;
        let k = self.k.forward(g, store, x)?;
        let m = self.window;
        let mut parts = Vec::with_capacity(3);
        for t in [q, k, value] {
            let s = window::g_shift(g, t, self.shift)?;
            parts.push(window::g_partition(g, s, m)?);
        }
        let table = g.param(store, &self.relpos_path())?;
        let attn = g.with_scope(&self.path, |g| {
            g.window_attention(parts[0], parts[1], parts[2], Some(table), &spec)
        })?;
        let merged = window::g_merge(g, attn, m, h, w)?;
        let unshifted = window::g_shift(g, merged, self.shift.inverse())?;
        let projected = self.o.forward(g, store, unshifted)?;
        g.add(x, projected)
    }
}
