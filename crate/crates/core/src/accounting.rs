//! Parameter and multiply-accumulate accounting.
//!
//! Measured counts come from the parameter store and the graph cost log;
//! analytic counts evaluate the closed-form attention and feed-forward
//! expressions exactly as published, so disagreements show up as deltas.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::blocks::{Mbv2Block, Mbv2Config};
use crate::error::{Error, Result};
use crate::ladder::{FfnKind, LadderBlock};
use crate::model::{Model, ModelConfig, Unit};
use crate::tensor::{params_path_is_under, CostRecord, Graph, ParamKind, ParamStore, Tensor};

pub const CONVENTION: &str = "1 MAC = 1 FLOP; conv = k*k*c_in/groups*c_out*h_out*w_out; \
fc = tokens*c_in*c_out; attention = QK^T + AV per window and head; \
bias, norm, softmax, activation, pooling and elementwise ops not counted";

/// Published per-section parameter budgets.
pub const REFERENCE_SECTIONS: [(&str, f64); 6] = [
    ("stem", 0.018e6),
    ("stage1", 0.125e6),
    ("stage2", 0.817e6),
    ("stage3", 3.879e6),
    ("stage4", 3.808e6),
    ("head", 0.576e6),
];
pub const REFERENCE_TOTAL_PARAMS: f64 = 9.223e6;
/// Multiply-accumulates at 224 x 224.
pub const REFERENCE_MACS: f64 = 1.9e9;
/// Stage-4 section minus its downsample conv, split over three blocks.
pub const REFERENCE_STAGE4_BLOCK: f64 = (3.808e6 - 0.664e6) / 3.0;

// --- analytic -------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Formula {
    /// Plain window attention: 4d^2 params.
    WMhsa,
    /// Ladder attention with feature delivery over `branches` channel groups.
    PswMhsa,
    /// Pointwise feed-forward counted as a single d x d map.
    Ffn,
    /// Bottlenecked feed-forward: reduce, 3x3 depthwise, restore.
    Lffn,
}

impl Formula {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "w_mhsa" => Some(Formula::WMhsa),
            "psw_mhsa" => Some(Formula::PswMhsa),
            "ffn" => Some(Formula::Ffn),
            "lffn" => Some(Formula::Lffn),
            _ => None,
        }
    }
}

/// `d` is the block width for the attention formulas and the per-branch
/// width for the feed-forward ones.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Dims {
    pub d: u64,
    pub branches: u64,
    pub h: u64,
    pub w: u64,
    pub window: u64,
}

impl Dims {
    pub fn new(d: u64, branches: u64, h: u64, w: u64, window: u64) -> Self {
        Dims {
            d,
            branches,
            h,
            w,
            window,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Cost {
    pub params: u64,
    pub macs: u64,
}

fn exact(num: u64, den: u64, what: &str) -> Result<u64> {
    if !num.is_multiple_of(den) {
        return Err(Error::Argument(format!(
            "{what} = {num}/{den} is not an integer"
        )));
    }
    Ok(num / den)
}

fn check(dims: Dims) -> Result<()> {
    let Dims {
        d,
        branches,
        h,
        w,
        window,
    } = dims;
    if d == 0 || branches == 0 || h == 0 || w == 0 || window == 0 {
        return Err(Error::Argument(format!(
            "dimensions must be positive: {dims:?}"
        )));
    }
    Ok(())
}

pub fn analytic_params(f: Formula, dims: Dims) -> Result<u64> {
    check(dims)?;
    let (d, b) = (dims.d, dims.branches);
    Ok(match f {
        Formula::WMhsa => 4 * d * d,
        Formula::PswMhsa => exact(3 * d * d, b, "3d^2/B")? + exact(d * d, b * b, "d^2/B^2")?,
        Formula::Ffn => d * d,
        Formula::Lffn => exact(d * d, 2, "d^2/2")? + exact(9 * d, 4, "9d/4")?,
    })
}

pub fn analytic_macs(f: Formula, dims: Dims) -> Result<u64> {
    check(dims)?;
    let Dims {
        d,
        branches: b,
        h,
        w,
        window: m,
    } = dims;
    let hw = h * w;
    Ok(match f {
        Formula::WMhsa => 4 * hw * d * d + 2 * m * m * hw * d,
        Formula::PswMhsa => {
            exact(3 * hw * d * d, b, "3hwd^2/B")?
                + exact(hw * d * d, b * b, "hwd^2/B^2")?
                + 2 * m * m * hw * d
        }
        Formula::Ffn => hw * d * d,
        Formula::Lffn => exact(hw * d * d, 2, "hwd^2/2")? + exact(9 * hw * d, 16, "9hwd/16")?,
    })
}

/// Both counts; fails if either expression is not an integer at `dims`.
pub fn analytic(f: Formula, dims: Dims) -> Result<Cost> {
    Ok(Cost {
        params: analytic_params(f, dims)?,
        macs: analytic_macs(f, dims)?,
    })
}

/// Direct count of the bottlenecked feed-forward depthwise term: a 3x3
/// depthwise conv at d/4 channels over h x w.
pub fn lffn_depthwise_macs(h: u64, w: u64, d: u64) -> u64 {
    9 * h * w * (d / 4)
}

// --- report types -------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CountOptions {
    /// Biases and normalization affines.
    pub include_bias: bool,
    pub include_relpos: bool,
}

impl CountOptions {
    pub const WEIGHTS: CountOptions = CountOptions {
        include_bias: false,
        include_relpos: false,
    };
    pub const ALL: CountOptions = CountOptions {
        include_bias: true,
        include_relpos: true,
    };

    fn admits(self, kind: ParamKind) -> bool {
        match kind {
            ParamKind::Weight => true,
            ParamKind::Bias | ParamKind::Norm => self.include_bias,
            ParamKind::RelPos => self.include_relpos,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Row {
    pub path: String,
    pub measured_params: u64,
    pub measured_macs: u64,
    pub analytic_params: Option<u64>,
    pub analytic_macs: Option<u64>,
    pub note: Option<String>,
}

impl Row {
    fn new(path: impl Into<String>) -> Self {
        Row {
            path: path.into(),
            measured_params: 0,
            measured_macs: 0,
            analytic_params: None,
            analytic_macs: None,
            note: None,
        }
    }

    pub fn param_delta(&self) -> Option<i64> {
        self.analytic_params
            .map(|a| self.measured_params as i64 - a as i64)
    }

    pub fn mac_delta(&self) -> Option<i64> {
        self.analytic_macs
            .map(|a| self.measured_macs as i64 - a as i64)
    }

    /// First path segment: `stem`, `stageN` or `head`.
    pub fn section(&self) -> &str {
        self.path.split('.').next().unwrap_or(&self.path)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Totals {
    pub params: u64,
    pub macs: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CostReport {
    pub rows: Vec<Row>,
    pub convention: String,
    /// Free-form findings: configuration deviations, calibration, flagged
    /// formula mismatches.
    pub notes: Vec<String>,
}

impl CostReport {
    pub fn empty() -> Self {
        CostReport {
            rows: Vec::new(),
            convention: CONVENTION.to_string(),
            notes: Vec::new(),
        }
    }

    pub fn totals(&self) -> Totals {
        self.rows.iter().fold(Totals::default(), |t, r| Totals {
            params: t.params + r.measured_params,
            macs: t.macs + r.measured_macs,
        })
    }

    pub fn row(&self, path: &str) -> Option<&Row> {
        self.rows.iter().find(|r| r.path == path)
    }

    /// Measured parameters per section, in first-seen order.
    pub fn sections(&self) -> Vec<(String, u64)> {
        let mut out: Vec<(String, u64)> = Vec::new();
        for r in &self.rows {
            match out.iter_mut().find(|(s, _)| s == r.section()) {
                Some((_, n)) => *n += r.measured_params,
                None => out.push((r.section().to_string(), r.measured_params)),
            }
        }
        out
    }

    /// One `key=value` record per row, fixed field order; `-` marks a
    /// missing analytic value. A trailing `note=` appears only on flagged rows.
    pub fn to_records(&self) -> String {
        let opt = |v: Option<u64>| v.map_or_else(|| "-".to_string(), |v| v.to_string());
        let mut s = format!("# convention: {}\n", self.convention);
        for r in &self.rows {
            let _ = write!(
                s,
                "path={} measured_params={} analytic_params={} measured_macs={} analytic_macs={}",
                r.path,
                r.measured_params,
                opt(r.analytic_params),
                r.measured_macs,
                opt(r.analytic_macs)
            );
            if let Some(n) = &r.note {
                let _ = write!(s, " note={}", n.replace(' ', "_"));
            }
            s.push('\n');
        }
        let t = self.totals();
        let _ = writeln!(
            s,
            "path=total measured_params={} analytic_params=- measured_macs={} analytic_macs=-",
            t.params, t.macs
        );
        s
    }

    pub fn to_text(&self) -> String {
        let opt = |v: Option<u64>| v.map_or_else(|| "-".to_string(), |v| v.to_string());
        let delta = |v: Option<i64>| v.map_or_else(|| "-".to_string(), |v| format!("{v:+}"));
        let width = self
            .rows
            .iter()
            .map(|r| r.path.len())
            .max()
            .unwrap_or(4)
            .max(5);
        let mut s = format!("# {}\n", self.convention);
        let _ = writeln!(
            s,
            "{:<width$} {:>10} {:>10} {:>8} {:>13} {:>13} {:>11}",
            "path", "params", "analytic", "delta", "macs", "analytic", "delta"
        );
        for r in &self.rows {
            let _ = write!(
                s,
                "{:<width$} {:>10} {:>10} {:>8} {:>13} {:>13} {:>11}",
                r.path,
                r.measured_params,
                opt(r.analytic_params),
                delta(r.param_delta()),
                r.measured_macs,
                opt(r.analytic_macs),
                delta(r.mac_delta())
            );
            if let Some(n) = &r.note {
                let _ = write!(s, "  ! {n}");
            }
            s.push('\n');
        }
        let t = self.totals();
        let _ = writeln!(
            s,
            "{:<width$} {:>10} {:>10} {:>8} {:>13}",
            "total", t.params, "", "", t.macs
        );
        for n in &self.notes {
            let _ = writeln!(s, "note: {n}");
        }
        s
    }
}

// --- traversal ------------------------------------------------------------------

struct Group {
    path: String,
    /// `(prefix, kinds)` pairs whose parameters belong to this row.
    params: Vec<(String, &'static [ParamKind])>,
    /// Cost-log scopes charged to this row.
    scopes: Vec<String>,
}

const W: &[ParamKind] = &[ParamKind::Weight];
const B: &[ParamKind] = &[ParamKind::Bias];
const N: &[ParamKind] = &[ParamKind::Norm];
const R: &[ParamKind] = &[ParamKind::RelPos];
const ANY: &[ParamKind] = &[
    ParamKind::Weight,
    ParamKind::Bias,
    ParamKind::Norm,
    ParamKind::RelPos,
];

fn ladder_groups(b: &LadderBlock, opts: CountOptions) -> Vec<Group> {
    let per_branch = |suffix: &str, kinds: &'static [ParamKind], charge: bool| {
        let prefixes: Vec<String> = (0..b.branches.len())
            .map(|t| format!("{}.branch{t}.{suffix}", b.path))
            .collect();
        Group {
            path: String::new(),
            params: prefixes.iter().map(|p| (p.clone(), kinds)).collect(),
            scopes: if charge { prefixes } else { Vec::new() },
        }
    };
    let named = |mut g: Group, path: String| {
        g.path = path;
        g
    };
    let p = &b.path;
    let mut out = vec![named(per_branch("attn", W, true), format!("{p}.attn"))];
    if opts.include_bias {
        out.push(named(
            per_branch("attn", B, false),
            format!("{p}.attn.bias"),
        ));
    }
    if opts.include_relpos {
        out.push(named(
            per_branch("attn", R, false),
            format!("{p}.attn.relpos"),
        ));
    }
    if opts.include_bias {
        out.push(named(per_branch("norm", N, false), format!("{p}.norm")));
    }
    out.push(named(per_branch("ffn", W, true), format!("{p}.ffn")));
    if opts.include_bias {
        out.push(named(per_branch("ffn", B, false), format!("{p}.ffn.bias")));
    }
    let fusion = format!("{p}.fusion");
    out.push(Group {
        path: fusion.clone(),
        params: vec![(fusion.clone(), W)],
        scopes: vec![fusion.clone()],
    });
    if opts.include_bias {
        out.push(Group {
            path: format!("{fusion}.bias"),
            params: vec![(fusion, B)],
            scopes: Vec::new(),
        });
    }
    out
}

fn groups(model: &Model, opts: CountOptions) -> Vec<Group> {
    let whole = |path: &str| Group {
        path: path.to_string(),
        params: vec![(path.to_string(), ANY)],
        scopes: vec![path.to_string()],
    };
    let mut out = vec![whole(&model.stem.path)];
    for (_, u) in model.units() {
        match u {
            Unit::Ladder(b) => out.extend(ladder_groups(b, opts)),
            other => out.push(whole(other.path())),
        }
    }
    out.push(whole("head"));
    out
}

fn count_group(store: &ParamStore, g: &Group, opts: CountOptions) -> u64 {
    store
        .iter()
        .filter(|(p, _)| {
            let kind = ParamKind::of_path(p);
            opts.admits(kind)
                && g.params
                    .iter()
                    .any(|(pre, kinds)| kinds.contains(&kind) && params_path_is_under(p, pre))
        })
        .map(|(_, t)| t.numel() as u64)
        .sum()
}

/// Exact parameter counts per row. Ladder blocks are broken into attention,
/// feed-forward and fusion rows summed over branches; biases, normalization
/// affines and position tables get their own rows when included.
pub fn count_params(model: &Model, opts: CountOptions) -> Vec<Row> {
    groups(model, opts)
        .iter()
        .map(|g| Row {
            measured_params: count_group(&model.params, g, opts),
            ..Row::new(g.path.clone())
        })
        .collect()
}

/// Cost log of one inference forward plus the input shape of every ladder block.
pub struct MacTrace {
    pub records: Vec<CostRecord>,
    pub ladder_inputs: BTreeMap<String, [usize; 4]>,
}

pub fn trace_macs(model: &Model, input_shape: [usize; 4]) -> Result<MacTrace> {
    let mut g = Graph::inference().with_cost_tracking();
    let x = g.input(Tensor::zeros(input_shape));
    let mut h = model.stem.forward(&mut g, &model.params, x)?;
    g.retain(&[h]);
    let mut ladder_inputs = BTreeMap::new();
    for (_, u) in model.units() {
        if let Unit::Ladder(b) = u {
            ladder_inputs.insert(b.path.clone(), h.shape());
        }
        h = u.forward(&mut g, &model.params, h)?;
        g.retain(&[h]);
    }
    let pooled = g.gap(h);
    model.head.forward(&mut g, &model.params, pooled)?;
    Ok(MacTrace {
        records: g.take_costs(),
        ladder_inputs,
    })
}

/// MACs per row for one forward at `input_shape` (batch included). Cost-log
/// entries outside every row land in an `unscoped` row.
pub fn count_macs(model: &Model, input_shape: [usize; 4]) -> Result<Vec<Row>> {
    let trace = trace_macs(model, input_shape)?;
    Ok(macs_from(model, &trace.records, CountOptions::WEIGHTS))
}

fn macs_from(model: &Model, records: &[CostRecord], opts: CountOptions) -> Vec<Row> {
    let gs = groups(model, opts);
    let mut rows: Vec<Row> = gs.iter().map(|g| Row::new(g.path.clone())).collect();
    let mut unscoped = 0;
    for rec in records {
        match gs
            .iter()
            .position(|g| g.scopes.iter().any(|s| params_path_is_under(&rec.scope, s)))
        {
            Some(i) => rows[i].measured_macs += rec.macs,
            None => unscoped += rec.macs,
        }
    }
    if unscoped > 0 {
        rows.push(Row {
            measured_macs: unscoped,
            ..Row::new("unscoped")
        });
    }
    rows
}

// --- reconciliation ---------------------------------------------------------------

struct Analytic {
    params: Result<u64>,
    macs: Result<u64>,
}

/// Closed forms for the attention and feed-forward rows of `b` on `h x w`.
fn ladder_analytic(b: &LadderBlock, h: usize, w: usize) -> [Analytic; 2] {
    let c = &b.cfg;
    let nb = c.branches as u64;
    let (h, w, m) = (h as u64, w as u64, c.window as u64);
    let times = |r: Result<u64>| r.map(|v| v * nb);
    let attn = if c.delivery || nb == 1 {
        let dims = Dims::new(c.d1 as u64, nb, h, w, m);
        Analytic {
            params: analytic_params(Formula::PswMhsa, dims),
            macs: analytic_macs(Formula::PswMhsa, dims),
        }
    } else {
        let dims = Dims::new(c.d2() as u64, 1, h, w, m);
        Analytic {
            params: times(analytic_params(Formula::WMhsa, dims)),
            macs: times(analytic_macs(Formula::WMhsa, dims)),
        }
    };
    let f = match c.ffn {
        FfnKind::Light => Formula::Lffn,
        FfnKind::Standard => Formula::Ffn,
    };
    let dims = Dims::new(c.d2() as u64, 1, h, w, m);
    let ffn = Analytic {
        params: times(analytic_params(f, dims)),
        macs: times(analytic_macs(f, dims)),
    };
    [attn, ffn]
}

/// Fills the attention and feed-forward rows of `b` from the closed forms.
fn annotate(rows: &mut [Row], b: &LadderBlock, h: usize, w: usize, batch: u64) {
    for (suffix, a) in ["attn", "ffn"].into_iter().zip(ladder_analytic(b, h, w)) {
        let path = format!("{}.{suffix}", b.path);
        let row = rows
            .iter_mut()
            .find(|r| r.path == path)
            .expect("ladder row");
        let mut notes = Vec::new();
        match a.params {
            Ok(v) => row.analytic_params = Some(v),
            Err(e) => notes.push(format!("params: {e}")),
        }
        match a.macs {
            Ok(v) => row.analytic_macs = Some(v * batch),
            Err(e) => notes.push(format!("macs: {e}")),
        }
        if suffix == "ffn" {
            notes.extend(ffn_flag(b, h, w, row.measured_params, row.analytic_params));
        }
        if !notes.is_empty() {
            row.note = Some(notes.join("; "));
        }
    }
}

/// Measured and analytic counts for `model` at `input_shape`.
pub fn reconcile_at(
    model: &Model,
    input_shape: [usize; 4],
    opts: CountOptions,
) -> Result<CostReport> {
    let trace = trace_macs(model, input_shape)?;
    let mut rows = count_params(model, opts);
    for (r, m) in rows.iter_mut().zip(macs_from(model, &trace.records, opts)) {
        r.measured_macs = m.measured_macs;
    }
    if let Some(extra) = macs_from(model, &trace.records, opts)
        .into_iter()
        .find(|r| r.path == "unscoped")
    {
        rows.push(extra);
    }
    let mut notes = model.cfg.deviations();
    for b in model.ladder_blocks() {
        let [_, _, h, w] = trace.ladder_inputs[&b.path];
        annotate(&mut rows, b, h, w, input_shape[0] as u64);
    }
    if let Some(c) = calibrate_mbv2(&model.cfg) {
        notes.push(c.summary());
    }
    Ok(CostReport {
        rows,
        convention: CONVENTION.to_string(),
        notes,
    })
}

fn ffn_flag(
    b: &LadderBlock,
    h: usize,
    w: usize,
    measured_params: u64,
    analytic_params: Option<u64>,
) -> Option<String> {
    let nb = b.cfg.branches as u64;
    let d = b.cfg.d2() as u64;
    match b.cfg.ffn {
        FfnKind::Light => Some(format!(
            "depthwise term per branch: formula 9hwd/16 = {}, direct count 9hwd/4 = {}",
            9.0 * (h * w) as f64 * d as f64 / 16.0,
            lffn_depthwise_macs(h as u64, w as u64, d)
        )),
        FfnKind::Standard if Some(measured_params) != analytic_params => Some(format!(
            "formula counts one d x d map; the {}x expansion measures {} per branch",
            crate::ladder::ffn::FFN_EXPANSION,
            measured_params / nb
        )),
        FfnKind::Standard => None,
    }
}

/// Reconciliation of a single ladder block on an `h x w` map, batch 1.
pub fn reconcile_block(
    block: &LadderBlock,
    store: &ParamStore,
    h: usize,
    w: usize,
    opts: CountOptions,
) -> Result<CostReport> {
    let gs = ladder_groups(block, opts);
    let mut g = Graph::inference().with_cost_tracking();
    let x = g.input(Tensor::zeros([1, block.cfg.d1, h, w]));
    block.forward(&mut g, store, x)?;
    let records = g.take_costs();
    let mut rows: Vec<Row> = gs
        .iter()
        .map(|gr| Row {
            measured_params: count_group(store, gr, opts),
            measured_macs: records
                .iter()
                .filter(|r| gr.scopes.iter().any(|s| params_path_is_under(&r.scope, s)))
                .map(|r| r.macs)
                .sum(),
            ..Row::new(gr.path.clone())
        })
        .collect();
    annotate(&mut rows, block, h, w, 1);
    Ok(CostReport {
        rows,
        convention: CONVENTION.to_string(),
        notes: Vec::new(),
    })
}

/// [`reconcile_at`] at the configured resolution with batch 1, all
/// parameter kinds counted.
pub fn reconcile(model: &Model) -> Result<CostReport> {
    let c = &model.cfg;
    reconcile_at(
        model,
        [1, c.input_channels, c.resolution, c.resolution],
        CountOptions::ALL,
    )
}

/// Sum of weight-only rows of one ladder block.
pub fn ladder_block_weights(report: &CostReport, block: &str) -> u64 {
    ["attn", "ffn", "fusion"]
        .iter()
        .filter_map(|s| report.row(&format!("{block}.{s}")))
        .map(|r| r.measured_params)
        .sum()
}

/// Section table with the published budgets alongside.
pub fn section_table(report: &CostReport) -> String {
    let mut s = format!(
        "{:<8} {:>10} {:>10} {:>8}\n",
        "section", "measured", "reference", "delta%"
    );
    for (name, n) in report.sections() {
        match REFERENCE_SECTIONS.iter().find(|(k, _)| *k == name) {
            Some((_, r)) => {
                let _ = writeln!(
                    s,
                    "{name:<8} {n:>10} {r:>10.0} {:>+8.1}",
                    (n as f64 - r) / r * 100.0
                );
            }
            None => {
                let _ = writeln!(s, "{name:<8} {n:>10} {:>10} {:>8}", "-", "-");
            }
        }
    }
    let t = report.totals();
    let _ = writeln!(
        s,
        "{:<8} {:>10} {:>10.0} {:>+8.1}",
        "total",
        t.params,
        REFERENCE_TOTAL_PARAMS,
        (t.params as f64 - REFERENCE_TOTAL_PARAMS) / REFERENCE_TOTAL_PARAMS * 100.0
    );
    s
}

// --- MBV2 width calibration ----------------------------------------------------------

#[derive(Clone, Debug, PartialEq)]
pub struct CalibrationPoint {
    pub expansion: f64,
    pub se_reduction: usize,
    pub stage1: u64,
    pub stage2: u64,
    /// Sum of relative errors against the stage-1 and stage-2 budgets.
    pub error: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Calibration {
    pub configured: CalibrationPoint,
    pub best: CalibrationPoint,
    pub grid: Vec<CalibrationPoint>,
}

impl Calibration {
    pub fn summary(&self) -> String {
        let p = |c: &CalibrationPoint| {
            format!(
                "expansion={} se_reduction={} stage1={} stage2={} error={:.3}",
                c.expansion, c.se_reduction, c.stage1, c.stage2, c.error
            )
        };
        format!(
            "mbv2 calibration: configured {} | best on grid {}",
            p(&self.configured),
            p(&self.best)
        )
    }
}

pub const CALIBRATION_EXPANSIONS: [f64; 5] = [2.0, 3.0, 4.0, 5.0, 6.0];
pub const CALIBRATION_SE_REDUCTIONS: [usize; 4] = [2, 4, 8, 16];

fn mbv2_params(cfg: Mbv2Config) -> Result<u64> {
    let b = Mbv2Block::new("b", cfg)?;
    let mut store = ParamStore::new();
    b.init(
        &mut store,
        &mut <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0),
    )?;
    Ok(store.total_numel() as u64)
}

fn conv_stage_params(cfg: &ModelConfig, expansion: f64, se_reduction: usize) -> Result<Vec<u64>> {
    let mut c = cfg.stem_channels;
    let mut out = Vec::new();
    for st in cfg.stages.iter().take(2) {
        let block = |cin, cout, stride| {
            let mut m = Mbv2Config::new(cin, cout, stride);
            m.expansion_ratio = expansion;
            m.se_reduction = se_reduction;
            mbv2_params(m)
        };
        let mut n = 0;
        if st.downsample == crate::model::DownsampleKind::Mbv2 {
            n += block(c, st.channels, 2)?;
        }
        n += st.depth as u64 * block(st.channels, st.channels, 1)?;
        c = st.channels;
        if let Some(e) = st.exit_channels {
            n += block(c, e, 2)?;
            c = e;
        }
        out.push(n);
    }
    Ok(out)
}

/// Sweeps MBV2 expansion ratio and SE reduction against the stage-1 and
/// stage-2 budgets. Only defined for the base stage plan.
pub fn calibrate_mbv2(cfg: &ModelConfig) -> Option<Calibration> {
    let base = ModelConfig::base();
    if cfg.stem_channels != base.stem_channels || cfg.stages[..2] != base.stages[..2] {
        return None;
    }
    let point = |e: f64, r: usize| -> Option<CalibrationPoint> {
        let s = conv_stage_params(cfg, e, r).ok()?;
        let err = (s[0] as f64 - REFERENCE_SECTIONS[1].1).abs() / REFERENCE_SECTIONS[1].1
            + (s[1] as f64 - REFERENCE_SECTIONS[2].1).abs() / REFERENCE_SECTIONS[2].1;
        Some(CalibrationPoint {
            expansion: e,
            se_reduction: r,
            stage1: s[0],
            stage2: s[1],
            error: err,
        })
    };
    let grid: Vec<CalibrationPoint> = CALIBRATION_EXPANSIONS
        .iter()
        .flat_map(|&e| CALIBRATION_SE_REDUCTIONS.iter().map(move |&r| (e, r)))
        .filter_map(|(e, r)| point(e, r))
        .collect();
    let best = grid
        .iter()
        .min_by(|a, b| a.error.total_cmp(&b.error))?
        .clone();
    Some(Calibration {
        configured: point(cfg.mbv2_expansion, cfg.mbv2_se_reduction)?,
        best,
        grid,
    })
}
