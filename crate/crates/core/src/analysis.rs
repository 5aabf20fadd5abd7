//! Influence maps (which input pixels reach a given output pixel) and the
//! structural ablation runner.

use std::fmt::Write as _;
use std::ops::Range;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::accounting::{reconcile_at, CostReport, CountOptions, Totals};
use crate::error::{Error, Result};
use crate::ladder::{FfnKind, FusionKind, LadderBlock};
use crate::model::{Model, ModelConfig, StageKind};
use crate::tensor::{Graph, Tensor, Var};

/// Magnitudes at or below this count as no influence.
pub const INFLUENCE_THRESHOLD: f64 = 1e-9;
pub const PERTURBATION_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Method {
    Gradient,
    Perturbation,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Gradient => "gradient",
            Method::Perturbation => "perturbation",
        }
    }
}

/// An output location and the channels read there. `inputs` restricts which
/// input channels are probed; `None` means all of them.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Target {
    pub y: usize,
    pub x: usize,
    pub channels: Option<Range<usize>>,
    pub inputs: Option<Range<usize>>,
}

impl Target {
    pub fn at(y: usize, x: usize) -> Self {
        Target {
            y,
            x,
            channels: None,
            inputs: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct InfluenceMap {
    pub target: Target,
    pub method: Method,
    pub h: usize,
    pub w: usize,
    /// Row-major `h * w`, all entries `>= 0`.
    pub grid: Vec<f64>,
}

impl InfluenceMap {
    pub fn at(&self, y: usize, x: usize) -> f64 {
        self.grid[y * self.w + x]
    }

    pub fn support(&self) -> Vec<bool> {
        self.grid.iter().map(|&v| v > INFLUENCE_THRESHOLD).collect()
    }

    pub fn support_size(&self) -> usize {
        self.support().iter().filter(|&&s| s).count()
    }

    /// Support pixels outside the `m x m` window holding the target.
    pub fn outside_window(&self, m: usize) -> usize {
        let (wy, wx) = (self.target.y / m, self.target.x / m);
        self.support()
            .iter()
            .enumerate()
            .filter(|&(i, &s)| s && ((i / self.w) / m != wy || (i % self.w) / m != wx))
            .count()
    }

    pub fn confined_to_window(&self, m: usize) -> bool {
        self.outside_window(m) == 0
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for row in self.grid.chunks(self.w) {
            let cells: Vec<String> = row.iter().map(|v| format!("{v:.3e}")).collect();
            let _ = writeln!(s, "{}", cells.join(" "));
        }
        s
    }

    /// Plain graymap scaled to the largest entry; any support pixel is at
    /// least 1 so it stays visible.
    pub fn to_pgm(&self) -> String {
        let max = self.grid.iter().cloned().fold(0.0, f64::max);
        let mut s = format!(
            "P2\n# influence target=({},{}) method={}\n{} {}\n255\n",
            self.target.y,
            self.target.x,
            self.method.name(),
            self.w,
            self.h
        );
        for row in self.grid.chunks(self.w) {
            let cells: Vec<String> = row
                .iter()
                .map(|&v| {
                    if v <= INFLUENCE_THRESHOLD || max == 0.0 {
                        0
                    } else {
                        ((v / max * 255.0).round() as u32).clamp(1, 255)
                    }
                })
                .map(|p| p.to_string())
                .collect();
            let _ = writeln!(s, "{}", cells.join(" "));
        }
        s
    }
}

/// Parses a P2 image back into rows of gray values.
pub fn parse_pgm(text: &str) -> Result<(usize, usize, Vec<u32>)> {
    let mut tokens = text
        .lines()
        .map(|l| l.split('#').next().unwrap_or(""))
        .flat_map(str::split_whitespace);
    if tokens.next() != Some("P2") {
        return Err(Error::Format("not a P2 graymap".into()));
    }
    let mut num = |what: &str| -> Result<u32> {
        tokens
            .next()
            .and_then(|t| t.parse().ok())
            .ok_or_else(|| Error::Format(format!("P2: bad or missing {what}")))
    };
    let w = num("width")? as usize;
    let h = num("height")? as usize;
    let max = num("maxval")?;
    let mut px = Vec::with_capacity(w * h);
    for _ in 0..w * h {
        let v = num("pixel")?;
        if v > max {
            return Err(Error::Format(format!("P2: pixel {v} above maxval {max}")));
        }
        px.push(v);
    }
    Ok((h, w, px))
}

/// A network fragment recorded on a graph from a single input.
pub trait Subject: Sync {
    fn record(&self, g: &mut Graph, x: Var) -> Result<Var>;
}

impl<F> Subject for F
where
    F: Fn(&mut Graph, Var) -> Result<Var> + Sync,
{
    fn record(&self, g: &mut Graph, x: Var) -> Result<Var> {
        self(g, x)
    }
}

/// Output `t` of a block's branch chain (`O_t`), or the fused output.
pub struct BlockProbe<'a> {
    pub block: &'a LadderBlock,
    pub store: &'a crate::tensor::ParamStore,
    pub branch: Option<usize>,
}

impl Subject for BlockProbe<'_> {
    fn record(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let tr = self.block.trace(g, self.store, x)?;
        match self.branch {
            None => Ok(tr.output),
            Some(t) => tr.branch_outputs.get(t).copied().ok_or_else(|| {
                Error::Argument(format!(
                    "branch {t} out of range for {} branches",
                    tr.branch_outputs.len()
                ))
            }),
        }
    }
}

/// The model up to the end of its last stage (the feature map before pooling).
pub struct FeatureProbe<'a>(pub &'a Model);

impl Subject for FeatureProbe<'_> {
    fn record(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let m = self.0;
        let mut h = m.stem.forward(g, &m.params, x)?;
        for (_, u) in m.units() {
            h = u.forward(g, &m.params, h)?;
        }
        Ok(h)
    }
}

fn forward(subject: &dyn Subject, input: &Tensor) -> Result<Tensor> {
    let mut g = Graph::inference();
    let x = g.input(input.clone());
    let out = subject.record(&mut g, x)?;
    Ok(g.value(out).clone())
}

fn check_target(t: &Target, out: [usize; 4], input: [usize; 4]) -> Result<()> {
    let [_, c, h, w] = out;
    if t.y >= h || t.x >= w {
        return Err(Error::Argument(format!(
            "target ({}, {}) outside the {h}x{w} output",
            t.y, t.x
        )));
    }
    let bad = |r: &Range<usize>, n: usize| r.is_empty() || r.end > n;
    if let Some(r) = &t.channels {
        if bad(r, c) {
            return Err(Error::Argument(format!(
                "target channels {r:?} outside 0..{c}"
            )));
        }
    }
    if let Some(r) = &t.inputs {
        if bad(r, input[1]) {
            return Err(Error::Argument(format!(
                "input channels {r:?} outside 0..{}",
                input[1]
            )));
        }
    }
    Ok(())
}

/// Fixed random weights over the target channels, so that the probed scalar
/// is a generic combination rather than a sum that could cancel.
fn readout(t: &Target, channels: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = t.channels.clone().unwrap_or(0..channels);
    (0..channels)
        .map(|c| {
            let v = rng.gen_range(0.5..1.5) * if rng.gen() { 1.0 } else { -1.0 };
            if r.contains(&c) {
                v
            } else {
                0.0
            }
        })
        .collect()
}

/// Up to this many probed input channels are perturbed one at a time;
/// wider inputs share one fixed random direction.
pub const PER_CHANNEL_LIMIT: usize = 8;

fn directions(t: &Target, channels: usize, seed: u64) -> Vec<Vec<f64>> {
    let r = t.inputs.clone().unwrap_or(0..channels);
    if r.len() <= PER_CHANNEL_LIMIT {
        return r
            .map(|c| {
                (0..channels)
                    .map(|k| if k == c { 1.0 } else { 0.0 })
                    .collect()
            })
            .collect();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    vec![(0..channels)
        .map(|c| {
            let v = rng.gen_range(0.5..1.5) * if rng.gen() { 1.0 } else { -1.0 };
            if r.contains(&c) {
                v
            } else {
                0.0
            }
        })
        .collect()]
}

fn probed(out: &Tensor, t: &Target, weights: &[f64]) -> f64 {
    weights
        .iter()
        .enumerate()
        .map(|(c, w)| w * out.at(0, c, t.y, t.x))
        .sum()
}

/// Influence of every input pixel on `target`. `input` must hold one image.
pub fn influence_map(
    subject: &dyn Subject,
    input: &Tensor,
    target: &Target,
    method: Method,
    seed: u64,
) -> Result<InfluenceMap> {
    match method {
        Method::Gradient => gradient_map(subject, input, target, seed),
        Method::Perturbation => {
            Ok(
                perturbation_maps(subject, input, std::slice::from_ref(target), seed)?
                    .pop()
                    .expect("one target"),
            )
        }
    }
}

fn single_image(input: &Tensor) -> Result<()> {
    if input.shape()[0] != 1 {
        return Err(Error::Argument(format!(
            "influence maps take one image, got batch {}",
            input.shape()[0]
        )));
    }
    Ok(())
}

/// Backpropagates the target readout and sums `|d/d input|` over the probed
/// input channels.
pub fn gradient_map(
    subject: &dyn Subject,
    input: &Tensor,
    target: &Target,
    seed: u64,
) -> Result<InfluenceMap> {
    single_image(input)?;
    let mut g = Graph::new();
    let x = g.input(input.clone());
    let out = subject.record(&mut g, x)?;
    check_target(target, out.shape(), input.shape())?;
    gradient_from_graph(&mut g, x, out, input.shape(), target, seed)
}

/// One gradient map per target, reusing a single recorded forward pass.
pub fn gradient_maps(
    subject: &dyn Subject,
    input: &Tensor,
    targets: &[Target],
    seed: u64,
) -> Result<Vec<InfluenceMap>> {
    single_image(input)?;
    let mut g = Graph::new();
    let x = g.input(input.clone());
    let out = subject.record(&mut g, x)?;
    targets
        .iter()
        .map(|t| {
            check_target(t, out.shape(), input.shape())?;
            gradient_from_graph(&mut g, x, out, input.shape(), t, seed)
        })
        .collect()
}

fn gradient_from_graph(
    g: &mut Graph,
    x: Var,
    out: Var,
    in_shape: [usize; 4],
    target: &Target,
    seed: u64,
) -> Result<InfluenceMap> {
    let [_, c, h, w] = out.shape();
    let weights = readout(target, c, seed);
    let mut cot = vec![0.0; c * h * w];
    for (ch, wt) in weights.iter().enumerate() {
        cot[(ch * h + target.y) * w + target.x] = *wt;
    }
    g.backward_with_seed(out, cot)?;
    let [_, ci, hi, wi] = in_shape;
    let grad = g
        .grad(x)
        .map(<[f64]>::to_vec)
        .unwrap_or(vec![0.0; ci * hi * wi]);
    let chans = target.inputs.clone().unwrap_or(0..ci);
    let mut grid = vec![0.0; hi * wi];
    for ch in chans {
        for (p, cell) in grid.iter_mut().enumerate() {
            *cell += grad[ch * hi * wi + p].abs();
        }
    }
    Ok(InfluenceMap {
        target: target.clone(),
        method: Method::Gradient,
        h: hi,
        w: wi,
        grid,
    })
}

/// Central differences at each input pixel, per channel or along a fixed
/// random channel direction (see [`PER_CHANNEL_LIMIT`]). One sweep serves
/// every target; pixels run in parallel.
pub fn perturbation_maps(
    subject: &dyn Subject,
    input: &Tensor,
    targets: &[Target],
    seed: u64,
) -> Result<Vec<InfluenceMap>> {
    single_image(input)?;
    let base = forward(subject, input)?;
    for t in targets {
        check_target(t, base.shape(), input.shape())?;
    }
    let [_, ci, hi, wi] = input.shape();
    let c_out = base.shape()[1];
    let readouts: Vec<Vec<f64>> = targets.iter().map(|t| readout(t, c_out, seed)).collect();
    let dirs: Vec<Vec<Vec<f64>>> = targets.iter().map(|t| directions(t, ci, seed)).collect();
    // targets probing the same directions share the perturbed forwards
    let mut groups: Vec<(Vec<Vec<f64>>, Vec<usize>)> = Vec::new();
    for (i, d) in dirs.into_iter().enumerate() {
        match groups.iter_mut().find(|(g, _)| *g == d) {
            Some((_, members)) => members.push(i),
            None => groups.push((d, vec![i])),
        }
    }
    let mut maps: Vec<InfluenceMap> = targets
        .iter()
        .map(|t| InfluenceMap {
            target: t.clone(),
            method: Method::Perturbation,
            h: hi,
            w: wi,
            grid: vec![0.0; hi * wi],
        })
        .collect();
    for (dirs, members) in &groups {
        let cells: Vec<Vec<f64>> = (0..hi * wi)
            .into_par_iter()
            .map(|p| -> Result<Vec<f64>> {
                let mut acc = vec![0.0; members.len()];
                for dir in dirs {
                    let shifted = |sign: f64| {
                        let mut t = input.clone();
                        let d = t.data_mut();
                        for (ch, v) in dir.iter().enumerate() {
                            d[ch * hi * wi + p] += sign * PERTURBATION_EPS * v;
                        }
                        forward(subject, &t)
                    };
                    let (plus, minus) = (shifted(1.0)?, shifted(-1.0)?);
                    for (a, &i) in acc.iter_mut().zip(members) {
                        let (t, r) = (&targets[i], &readouts[i]);
                        *a += ((probed(&plus, t, r) - probed(&minus, t, r))
                            / (2.0 * PERTURBATION_EPS))
                            .abs();
                    }
                }
                Ok(acc)
            })
            .collect::<Result<_>>()?;
        for (p, vals) in cells.into_iter().enumerate() {
            for (&i, v) in members.iter().zip(vals) {
                maps[i].grid[p] = v;
            }
        }
    }
    Ok(maps)
}

/// Every output pixel of an `h x w` map.
pub fn all_targets(h: usize, w: usize) -> Vec<Target> {
    (0..h)
        .flat_map(|y| (0..w).map(move |x| Target::at(y, x)))
        .collect()
}

/// Pixels where exactly one of the two maps has support.
pub fn support_mismatch(a: &InfluenceMap, b: &InfluenceMap) -> usize {
    a.support()
        .iter()
        .zip(b.support())
        .filter(|(x, y)| **x != *y)
        .count()
}

// --- ablations ------------------------------------------------------------------

/// Structural toggles applied on top of a base config; `None` keeps the base value.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct AblationSpec {
    pub branches: Option<usize>,
    pub shift: Option<bool>,
    pub delivery: Option<bool>,
    pub fusion: Option<FusionKind>,
    pub ffn: Option<FfnKind>,
    pub mask: Option<bool>,
}

pub const ABLATION_BRANCHES: [usize; 5] = [1, 2, 3, 4, 6];

impl AblationSpec {
    /// Parses `key=value` toggles separated by commas, e.g.
    /// `branches=6,shift=off,fd=off,fusion=concat,ffn=ffn,mask=on`.
    pub fn parse(s: &str) -> Result<Self> {
        let mut spec = AblationSpec::default();
        for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            let (k, v) = part
                .split_once('=')
                .ok_or_else(|| Error::Argument(format!("toggle {part:?} is not key=value")))?;
            let (k, v) = (k.trim(), v.trim());
            let flag = || {
                crate::model::config::parse_bool(v)
                    .ok_or_else(|| Error::Argument(format!("{k}: expected on/off, got {v:?}")))
            };
            let dup = || Error::Argument(format!("toggle {k} given twice"));
            match k {
                "branches" | "b" => {
                    let b = v
                        .parse::<usize>()
                        .ok()
                        .filter(|b| ABLATION_BRANCHES.contains(b))
                        .ok_or_else(|| {
                            Error::Argument(format!(
                                "branches: expected one of 1,2,3,4,6, got {v:?}"
                            ))
                        })?;
                    if spec.branches.replace(b).is_some() {
                        return Err(dup());
                    }
                }
                "shift" => {
                    if spec.shift.replace(flag()?).is_some() {
                        return Err(dup());
                    }
                }
                "fd" | "delivery" => {
                    if spec.delivery.replace(flag()?).is_some() {
                        return Err(dup());
                    }
                }
                "mask" => {
                    if spec.mask.replace(flag()?).is_some() {
                        return Err(dup());
                    }
                }
                "fusion" => {
                    let f = FusionKind::parse(v).ok_or_else(|| {
                        Error::Argument(format!("fusion: expected pafm|fc|aw|concat|se, got {v:?}"))
                    })?;
                    if spec.fusion.replace(f).is_some() {
                        return Err(dup());
                    }
                }
                "ffn" => {
                    let f = FfnKind::parse(v).ok_or_else(|| {
                        Error::Argument(format!("ffn: expected lffn|ffn, got {v:?}"))
                    })?;
                    if spec.ffn.replace(f).is_some() {
                        return Err(dup());
                    }
                }
                _ => {
                    return Err(Error::Argument(format!(
                        "unknown toggle {k:?} (branches, shift, fd, fusion, ffn, mask)"
                    )))
                }
            }
        }
        Ok(spec)
    }

    /// Canonical toggle string; `base` when nothing is set.
    pub fn label(&self) -> String {
        let onoff = |b: bool| if b { "on" } else { "off" };
        let mut parts = Vec::new();
        if let Some(b) = self.branches {
            parts.push(format!("branches={b}"));
        }
        if let Some(s) = self.shift {
            parts.push(format!("shift={}", onoff(s)));
        }
        if let Some(d) = self.delivery {
            parts.push(format!("fd={}", onoff(d)));
        }
        if let Some(f) = self.fusion {
            parts.push(format!("fusion={}", f.name()));
        }
        if let Some(f) = self.ffn {
            parts.push(format!("ffn={}", f.name()));
        }
        if let Some(m) = self.mask {
            parts.push(format!("mask={}", onoff(m)));
        }
        if parts.is_empty() {
            "base".into()
        } else {
            parts.join(",")
        }
    }

    /// The variant config plus a note for every degeneration rule applied.
    pub fn apply(&self, base: &ModelConfig) -> Result<(ModelConfig, Vec<String>)> {
        let mut cfg = base.clone();
        let mut notes = Vec::new();
        let l = &mut cfg.ladder;
        if let Some(b) = self.branches {
            if b != l.branches {
                if l.shifts.take().is_some() {
                    notes.push(format!(
                        "explicit shift list dropped; default schedule for {b} branches"
                    ));
                }
                l.branches = b;
            }
        }
        if let Some(s) = self.shift {
            l.shift = s;
        }
        if let Some(d) = self.delivery {
            l.delivery = d;
        }
        if let Some(f) = self.fusion {
            l.fusion = f;
        }
        if let Some(f) = self.ffn {
            l.ffn = f;
        }
        if let Some(m) = self.mask {
            l.mask_wrapped = m;
        }
        if l.branches == 1 {
            if self.shift.is_some() || self.delivery.is_some() {
                notes.push(
                    "branches=1: a single unshifted branch with its own value; shift and fd have no effect"
                        .into(),
                );
            }
        } else if !l.shift && self.mask.is_some() {
            notes.push("shift=off: no wrapped tokens, mask has no effect".into());
        }
        let branches = cfg.ladder.branches;
        for (i, st) in cfg.stages.iter_mut().enumerate() {
            if st.kind != StageKind::Ladder || st.channels % branches != 0 {
                continue;
            }
            let d2 = st.channels / branches;
            if st.heads > 0 && !d2.is_multiple_of(st.heads) {
                let h = (1..=st.heads)
                    .rev()
                    .find(|h| d2.is_multiple_of(*h))
                    .unwrap_or(1);
                notes.push(format!(
                    "stage{}: {} heads do not divide branch width {d2}; using {h}",
                    i + 1,
                    st.heads
                ));
                st.heads = h;
            }
        }
        cfg.validate()?;
        Ok((cfg, notes))
    }
}

#[derive(Clone, Debug)]
pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

#[derive(Clone, Debug)]
pub struct AblationResult {
    pub spec: AblationSpec,
    pub config: ModelConfig,
    pub notes: Vec<String>,
    pub report: CostReport,
    pub base: Totals,
    pub checks: Vec<Check>,
}

impl AblationResult {
    pub fn totals(&self) -> Totals {
        self.report.totals()
    }

    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    /// One comparison record against the base config.
    pub fn to_record(&self) -> String {
        let t = self.totals();
        let pct = |a: u64, b: u64| {
            if b == 0 {
                0.0
            } else {
                (a as f64 / b as f64 - 1.0) * 100.0
            }
        };
        format!(
            "variant={} params={} base_params={} params_delta_pct={:.2} macs={} base_macs={} macs_delta_pct={:.2} checks={}",
            self.spec.label(),
            t.params,
            self.base.params,
            pct(t.params, self.base.params),
            t.macs,
            self.base.macs,
            pct(t.macs, self.base.macs),
            if self.passed() { "pass" } else { "fail" }
        )
    }
}

fn reconcile_cfg(cfg: &ModelConfig) -> Result<(Model, CostReport)> {
    let m = Model::build(cfg.clone())?;
    let r = reconcile_at(
        &m,
        [1, cfg.input_channels, cfg.resolution, cfg.resolution],
        CountOptions::ALL,
    )?;
    Ok((m, r))
}

/// Builds the variant, counts it against the base, and runs a small
/// invariant suite on its first ladder block.
pub fn run_ablation(spec: &AblationSpec, base_cfg: &ModelConfig) -> Result<AblationResult> {
    Ok(run_ablations(std::slice::from_ref(spec), base_cfg)?
        .pop()
        .expect("one spec"))
}

/// As [`run_ablation`] for several variants, counting the base once.
pub fn run_ablations(
    specs: &[AblationSpec],
    base_cfg: &ModelConfig,
) -> Result<Vec<AblationResult>> {
    let (_, base_report) = reconcile_cfg(base_cfg)?;
    let base = base_report.totals();
    specs.iter().map(|s| variant(s, base_cfg, base)).collect()
}

fn variant(spec: &AblationSpec, base_cfg: &ModelConfig, base: Totals) -> Result<AblationResult> {
    let (cfg, notes) = spec.apply(base_cfg)?;
    let (model, report) = reconcile_cfg(&cfg)?;
    let mut checks = Vec::new();

    let bad: Vec<&str> = report
        .rows
        .iter()
        .filter(|r| r.path.ends_with(".attn") && r.param_delta() != Some(0))
        .map(|r| r.path.as_str())
        .collect();
    checks.push(Check {
        name: "attn-reconcile",
        passed: bad.is_empty(),
        detail: if bad.is_empty() {
            "attention parameters match the branch formula".into()
        } else {
            format!("mismatch at {}", bad.join(" "))
        },
    });

    if let Some(blk) = model.ladder_blocks().next() {
        let m = blk.cfg.window;
        let side = 2 * m;
        let x = Tensor::uniform(
            [1, blk.cfg.d1, side, side],
            1.0,
            &mut ChaCha8Rng::seed_from_u64(cfg.seed),
        );
        let mut g = Graph::inference();
        let xv = g.input(x.clone());
        let y = blk.forward(&mut g, &model.params, xv)?;
        let out = g.value(y);
        checks.push(Check {
            name: "block-shape",
            passed: out.shape() == x.shape() && out.is_finite(),
            detail: format!("{:?} -> {:?}", x.shape(), out.shape()),
        });
        let again = {
            let mut g = Graph::inference();
            let xv = g.input(x);
            let y = blk.forward(&mut g, &model.params, xv)?;
            g.value(y).clone()
        };
        checks.push(Check {
            name: "deterministic",
            passed: again == *out,
            detail: "repeated block forward".into(),
        });
    }

    Ok(AblationResult {
        spec: spec.clone(),
        config: cfg,
        notes,
        report,
        base,
        checks,
    })
}
