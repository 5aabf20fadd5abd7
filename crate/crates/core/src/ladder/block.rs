//! The ladder self-attention block: channel split, a chain of branches where
//! each one attends over its own slice with the previous branch's output as
//! value, per-branch norm + feed-forward, and fusion.

use rand::Rng;

use super::attention::BranchAttention;
use super::ffn::{FeedForward, FfnKind};
use super::fusion::{Fusion, FusionKind};
use super::window::{default_shifts, ShiftSpec};
use crate::error::{Error, Result};
use crate::layers::LayerNorm;
use crate::tensor::{Graph, ParamStore, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct LadderBlockConfig {
    pub d1: usize,
    pub branches: usize,
    pub window: usize,
    pub heads: usize,
    /// One entry per branch; entry 0 is `(0, 0)`.
    pub shifts: Vec<ShiftSpec>,
    /// When false every branch runs unshifted (the schedule is kept).
    pub shift: bool,
    pub mask_wrapped: bool,
    /// Branch `t > 0` takes `O_{t-1}` as its value instead of projecting one.
    pub delivery: bool,
    pub fusion: FusionKind,
    pub ffn: FfnKind,
    /// `O_t = Ô_t + FFN(LN(Ô_t))` when true, `FFN(LN(Ô_t))` otherwise.
    pub ffn_residual: bool,
}

impl LadderBlockConfig {
    /// Three branches, window 7, default shift schedule, everything on.
    pub fn base(d1: usize, heads: usize) -> Self {
        Self::with_geometry(d1, 3, 7, heads).expect("base schedule exists")
    }

    pub fn with_geometry(d1: usize, branches: usize, window: usize, heads: usize) -> Result<Self> {
        Ok(LadderBlockConfig {
            d1,
            branches,
            window,
            heads,
            shifts: default_shifts(branches, window)?,
            shift: true,
            mask_wrapped: true,
            delivery: true,
            fusion: FusionKind::Pafm,
            ffn: FfnKind::Light,
            ffn_residual: true,
        })
    }

    pub fn d2(&self) -> usize {
        self.d1 / self.branches.max(1)
    }

    pub fn effective_shift(&self, t: usize) -> ShiftSpec {
        if self.shift {
            self.shifts[t]
        } else {
            ShiftSpec::ZERO
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.branches == 0 {
            return Err(Error::config(
                "ladder.branches",
                "at least one branch required",
            ));
        }
        if !self.d1.is_multiple_of(self.branches) {
            return Err(Error::config(
                "ladder.branches",
                format!(
                    "{} channels not divisible by {} branches",
                    self.d1, self.branches
                ),
            ));
        }
        if self.heads == 0 || !self.d2().is_multiple_of(self.heads) {
            return Err(Error::config(
                "ladder.heads",
                format!(
                    "branch width {} not divisible by {} heads",
                    self.d2(),
                    self.heads
                ),
            ));
        }
        if self.ffn == FfnKind::Light && !self.d2().is_multiple_of(4) {
            return Err(Error::config(
                "ladder.ffn",
                format!(
                    "light ffn needs branch width divisible by 4, got {}",
                    self.d2()
                ),
            ));
        }
        if matches!(self.fusion, FusionKind::Pafm | FusionKind::Aw) && !self.d1.is_multiple_of(2) {
            return Err(Error::config(
                "ladder.fusion",
                format!("pixel-adaptive weights need an even width, got {}", self.d1),
            ));
        }
        if self.window == 0 {
            return Err(Error::config("ladder.window", "window must be positive"));
        }
        if self.shifts.len() != self.branches {
            return Err(Error::config(
                "ladder.shifts",
                format!(
                    "{} shifts for {} branches",
                    self.shifts.len(),
                    self.branches
                ),
            ));
        }
        if !self.shifts[0].is_zero() {
            return Err(Error::config(
                "ladder.shifts",
                "first branch must be unshifted",
            ));
        }
        for (i, s) in self.shifts.iter().enumerate() {
            s.check(self.window)?;
            if self.shifts[..i].contains(s) {
                return Err(Error::config(
                    "ladder.shifts",
                    format!("shift {s} repeated"),
                ));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct Branch {
    pub attn: BranchAttention,
    pub norm: LayerNorm,
    pub ffn: FeedForward,
}

#[derive(Clone, Debug)]
pub struct LadderBlock {
    pub path: String,
    pub cfg: LadderBlockConfig,
    pub branches: Vec<Branch>,
    pub fusion: Fusion,
}

/// Intermediate results of one block evaluation.
pub struct BlockTrace {
    /// `O_t` per branch.
    pub branch_outputs: Vec<Var>,
    pub output: Var,
}

impl LadderBlock {
    pub fn new(path: impl Into<String>, cfg: LadderBlockConfig) -> Result<Self> {
        let path = path.into();
        cfg.validate()?;
        let d2 = cfg.d2();
        let mut branches = Vec::with_capacity(cfg.branches);
        for t in 0..cfg.branches {
            let bp = format!("{path}.branch{t}");
            let own_value = t == 0 || !cfg.delivery;
            branches.push(Branch {
                attn: BranchAttention::new(
                    format!("{bp}.attn"),
                    d2,
                    cfg.heads,
                    cfg.window,
                    cfg.effective_shift(t),
                    cfg.mask_wrapped,
                    own_value,
                )?,
                norm: LayerNorm::new(format!("{bp}.norm"), d2),
                ffn: FeedForward::new(format!("{bp}.ffn"), cfg.ffn, d2)?,
            });
        }
        let fusion = Fusion::new(format!("{path}.fusion"), cfg.fusion, cfg.d1)?;
        Ok(LadderBlock {
            path,
            cfg,
            branches,
            fusion,
        })
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut impl Rng) -> Result<()> {
        for b in &self.branches {
            b.attn.init(store, rng)?;
            b.norm.init(store)?;
            b.ffn.init(store, rng)?;
        }
        self.fusion.init(store, rng)
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        Ok(self.trace(g, store, x)?.output)
    }

    pub fn trace(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<BlockTrace> {
        let [_, c, h, w] = x.shape();
        if c != self.cfg.d1 {
            return Err(Error::dim(
                "ladder_block",
                format!(
                    "{}: input channels (axis 1) = {c}, expected {}",
                    self.path, self.cfg.d1
                ),
            ));
        }
        let m = self.cfg.window;
        if h % m != 0 || w % m != 0 {
            return Err(Error::config(
                "ladder.window",
                format!("{}: spatial {h}x{w} not divisible by window {m}", self.path),
            ));
        }
        let inputs = g.split_channels(x, self.cfg.branches)?;
        let mut outputs: Vec<Var> = Vec::with_capacity(inputs.len());
        for (t, (branch, input)) in self.branches.iter().zip(inputs).enumerate() {
            let delivered = if t > 0 && self.cfg.delivery {
                outputs.last().copied()
            } else {
                None
            };
            let o_hat = branch.attn.forward(g, store, input, delivered)?;
            let normed = branch.norm.forward(g, store, o_hat)?;
            let ff = branch.ffn.forward(g, store, normed)?;
            let o = if self.cfg.ffn_residual {
                g.add(o_hat, ff)?
            } else {
                ff
            };
            outputs.push(o);
        }
        let output = self.fusion.forward(g, store, &outputs)?;
        Ok(BlockTrace {
            branch_outputs: outputs,
            output,
        })
    }
}
