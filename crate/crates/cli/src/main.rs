//! `pslt`: build, inspect, verify and train the ladder self-attention network.
//!
//! Exit codes: 0 success, 1 verification failure, 2 usage or config error.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use pslt::accounting::{
    count_params, reconcile, section_table, CostReport, CountOptions, REFERENCE_MACS,
    REFERENCE_SECTIONS, REFERENCE_TOTAL_PARAMS,
};
use pslt::analysis::{
    gradient_map, perturbation_maps, run_ablations, support_mismatch, AblationSpec, BlockProbe,
    InfluenceMap, Target,
};
use pslt::data::{generate, SyntheticSpec};
use pslt::ladder::{FfnKind, LadderBlock};
use pslt::model::train::{argmax, param_gradcheck, train_toy, TrainOptions};
use pslt::model::{io, Model, ModelConfig, StageKind};
use pslt::selftest::{self, Fault, SelftestOptions};
use pslt::{ParamStore, Tensor};

#[derive(Parser)]
#[command(name = "pslt", version, about = "Ladder self-attention network lab")]
struct Cli {
    /// `base`, `mini`, or a path to a config file.
    #[arg(long, global = true, default_value = "base")]
    config: String,
    /// Config override, repeatable (e.g. `--set ladder.branches=6`).
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Replaces the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Text,
    Records,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum OnOff {
    On,
    Off,
}

impl OnOff {
    fn get(self) -> bool {
        self == OnOff::On
    }
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum MapMethod {
    Gradient,
    Perturbation,
    Both,
}

#[derive(Subcommand)]
enum Cmd {
    /// Stage table with parameter counts.
    Describe,
    /// Parameter report: measured against the closed forms and published budgets.
    Params {
        #[arg(long, value_enum, default_value = "text")]
        format: Format,
    },
    /// Multiply-accumulate report at the configured resolution.
    Flops {
        #[arg(long, value_enum, default_value = "text")]
        format: Format,
    },
    /// One forward pass on a P6 image or a seeded random input.
    Forward {
        #[arg(long, conflicts_with = "image", required_unless_present = "image")]
        random: bool,
        #[arg(long)]
        image: Option<PathBuf>,
        /// Load parameters from a model file instead of building from the config.
        #[arg(long)]
        model: Option<PathBuf>,
        /// Write the model file after the pass.
        #[arg(long)]
        save: Option<PathBuf>,
    },
    /// Backward gradients of the loss against central differences.
    Gradcheck {
        #[arg(long, default_value_t = 24)]
        count: usize,
        #[arg(long, default_value_t = 1e-5)]
        eps: f64,
        #[arg(long, default_value_t = 1e-3)]
        tol: f64,
    },
    /// Influence map of one output pixel of a single ladder block.
    Rfield {
        #[arg(long, value_enum)]
        shift: Option<OnOff>,
        #[arg(long, value_enum)]
        fd: Option<OnOff>,
        #[arg(long, value_enum)]
        mask: Option<OnOff>,
        /// `lffn` or `ffn`.
        #[arg(long)]
        ffn: Option<String>,
        /// Output pixel as `y,x`; defaults to the centre of the first window.
        #[arg(long)]
        target: Option<String>,
        /// Spatial size of the probe input; defaults to two windows.
        #[arg(long)]
        size: Option<usize>,
        #[arg(long, value_enum, default_value = "both")]
        method: MapMethod,
        /// Write the map as a P2 graymap.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Print the raw grid.
        #[arg(long)]
        grid: bool,
    },
    /// Structural variants against the config, e.g. `ablate branches=2 branches=6`.
    Ablate {
        #[arg(required = true, value_name = "TOGGLES")]
        variants: Vec<String>,
    },
    /// Train on a synthetic two-class task.
    TrainToy {
        #[arg(long, default_value_t = 500)]
        steps: usize,
        #[arg(long, default_value_t = 16)]
        batch: usize,
        #[arg(long, default_value_t = 32)]
        per_class: usize,
        #[arg(long)]
        lr: Option<f64>,
        /// Fit a single sample instead of the full set.
        #[arg(long)]
        overfit: bool,
        #[arg(long)]
        save: Option<PathBuf>,
    },
    /// Run the built-in invariant suite.
    Selftest {
        #[arg(long, hide = true)]
        inject_fault: Option<String>,
    },
}

enum Fail {
    Usage(String),
    Verify(String),
}

impl From<pslt::Error> for Fail {
    fn from(e: pslt::Error) -> Self {
        use pslt::Error as E;
        match e {
            E::Config { .. } | E::Argument(_) | E::Format(_) | E::Io(_) => {
                Fail::Usage(e.to_string())
            }
            E::Dimension { .. } => Fail::Usage(e.to_string()),
            _ => Fail::Verify(e.to_string()),
        }
    }
}

type Run = Result<(), Fail>;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Fail::Usage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
        Err(Fail::Verify(m)) => {
            eprintln!("verification failed: {m}");
            ExitCode::from(1)
        }
    }
}

fn threads() -> Run {
    let Ok(v) = std::env::var("PSLT_THREADS") else {
        return Ok(());
    };
    let n: usize = v.parse().ok().filter(|n| *n > 0).ok_or_else(|| {
        Fail::Usage(format!(
            "PSLT_THREADS must be a positive integer, got {v:?}"
        ))
    })?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Fail::Usage(format!("thread pool: {e}")))
}

fn load_config(cli: &Cli) -> Result<(ModelConfig, String), Fail> {
    let (mut cfg, source) = match ModelConfig::preset(&cli.config) {
        Some(c) => (c, "builtin".to_string()),
        None => {
            let p = Path::new(&cli.config);
            if !p.is_file() {
                return Err(Fail::Usage(format!("config not found: {}", cli.config)));
            }
            let c = ModelConfig::load(p).map_err(|e| Fail::Usage(e.to_string()))?;
            (c, p.display().to_string())
        }
    };
    for o in &cli.overrides {
        let (k, v) = o
            .split_once('=')
            .ok_or_else(|| Fail::Usage(format!("override {o:?} is not KEY=VALUE")))?;
        cfg.set(k.trim(), v.trim())
            .map_err(|e| Fail::Usage(e.to_string()))?;
    }
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    cfg.validate().map_err(|e| Fail::Usage(e.to_string()))?;
    Ok((cfg, source))
}

fn onoff(b: bool) -> &'static str {
    if b {
        "on"
    } else {
        "off"
    }
}

fn header(cfg: &ModelConfig, source: &str, overrides: &[String]) {
    let l = &cfg.ladder;
    println!(
        "config={} source={} seed={} resolution={} branches={} window={} shift={} fd={} mask={} fusion={} ffn={}",
        cfg.name,
        source,
        cfg.seed,
        cfg.resolution,
        l.branches,
        l.window,
        onoff(l.shift),
        onoff(l.delivery),
        onoff(l.mask_wrapped),
        l.fusion.name(),
        l.ffn.name()
    );
    for o in overrides {
        println!("override={o}");
    }
    for d in cfg.deviations() {
        println!("deviation={d:?}");
    }
}

fn run(cli: Cli) -> Run {
    threads()?;
    let (cfg, source) = load_config(&cli)?;
    header(&cfg, &source, &cli.overrides);
    match cli.cmd {
        Cmd::Describe => describe(&cfg),
        Cmd::Params { format } => params(&cfg, format),
        Cmd::Flops { format } => flops(&cfg, format),
        Cmd::Forward {
            random,
            image,
            model,
            save,
        } => forward(
            &cfg,
            random,
            image.as_deref(),
            model.as_deref(),
            save.as_deref(),
        ),
        Cmd::Gradcheck { count, eps, tol } => gradcheck(&cfg, count, eps, tol),
        Cmd::Rfield {
            shift,
            fd,
            mask,
            ffn,
            target,
            size,
            method,
            out,
            grid,
        } => rfield(
            &cfg,
            RfieldArgs {
                shift,
                fd,
                mask,
                ffn,
                target,
                size,
                method,
                out,
                grid,
            },
        ),
        Cmd::Ablate { variants } => ablate(&cfg, &variants),
        Cmd::TrainToy {
            steps,
            batch,
            per_class,
            lr,
            overfit,
            save,
        } => train(&cfg, steps, batch, per_class, lr, overfit, save.as_deref()),
        Cmd::Selftest { inject_fault } => selftest_cmd(inject_fault.as_deref()),
    }
}

// --- describe / params / flops ------------------------------------------------------

fn is_base_plan(cfg: &ModelConfig) -> bool {
    let b = ModelConfig::base();
    cfg.stem_channels == b.stem_channels
        && cfg.stages == b.stages
        && cfg.classes == b.classes
        && cfg.resolution == b.resolution
}

fn millions(n: f64) -> String {
    format!("{:.3}M", n / 1e6)
}

fn describe(cfg: &ModelConfig) -> Run {
    let model = Model::build(cfg.clone())?;
    let rows = count_params(&model, CountOptions::ALL);
    let mut by_section: BTreeMap<String, u64> = BTreeMap::new();
    for r in &rows {
        *by_section.entry(r.section().to_string()).or_default() += r.measured_params;
    }
    let published = is_base_plan(cfg);
    let n_in = [1, cfg.input_channels, cfg.resolution, cfg.resolution];
    let shapes = model.section_shapes(n_in)?;
    println!(
        "{:<7} {:<14} {:<58} {:>5} {:>6} {:>10} {:>10}",
        "stage", "input", "block", "out", "stride", "params", "published"
    );
    let mut prev = n_in;
    for (name, shape) in &shapes {
        let block = match name.as_str() {
            "stem" => "3x3 conv x3".to_string(),
            "head" => format!("global pool + fc {}", cfg.classes),
            _ => {
                let st = model
                    .stages
                    .iter()
                    .find(|s| &s.name == name)
                    .expect("stage");
                let mut groups: Vec<(String, usize)> = Vec::new();
                for u in &st.units {
                    let l = u.label();
                    match groups.last_mut() {
                        Some((g, n)) if *g == l => *n += 1,
                        _ => groups.push((l, 1)),
                    }
                }
                groups
                    .iter()
                    .map(|(l, n)| {
                        if *n > 1 {
                            format!("{l} x{n}")
                        } else {
                            l.clone()
                        }
                    })
                    .collect::<Vec<_>>()
                    .join(" + ")
            }
        };
        let stride = if name == "head" {
            "-".to_string()
        } else {
            (prev[2] / shape[2].max(1)).to_string()
        };
        let n = by_section.get(name.as_str()).copied().unwrap_or(0);
        let reference = REFERENCE_SECTIONS
            .iter()
            .find(|(k, _)| k == name)
            .filter(|_| published)
            .map_or("-".to_string(), |(_, r)| millions(*r));
        println!(
            "{:<7} {:<14} {:<58} {:>5} {:>6} {:>10} {:>10}",
            name,
            format!("{}x{}^2", prev[1], prev[2]),
            block,
            shape[1],
            stride,
            millions(n as f64),
            reference
        );
        prev = *shape;
    }
    let total: u64 = rows.iter().map(|r| r.measured_params).sum();
    if published {
        println!(
            "total measured={} published={} (≈ 9.2M) delta_pct={:+.1}",
            millions(total as f64),
            millions(REFERENCE_TOTAL_PARAMS),
            (total as f64 / REFERENCE_TOTAL_PARAMS - 1.0) * 100.0
        );
    } else {
        println!("total measured={}", millions(total as f64));
    }
    println!(
        "total_params={total} traversal_params={}",
        model.params.total_numel()
    );
    Ok(())
}

fn report(cfg: &ModelConfig) -> Result<CostReport, Fail> {
    let model = Model::build(cfg.clone())?;
    Ok(reconcile(&model)?)
}

fn params(cfg: &ModelConfig, format: Format) -> Run {
    let r = report(cfg)?;
    match format {
        Format::Records => print!("{}", r.to_records()),
        Format::Text => {
            print!("{}", r.to_text());
            if is_base_plan(cfg) {
                print!("{}", section_table(&r));
            }
            let t = r.totals();
            println!("total_params={}", t.params);
        }
    }
    Ok(())
}

fn flops(cfg: &ModelConfig, format: Format) -> Run {
    let r = report(cfg)?;
    if let Format::Records = format {
        print!("{}", r.to_records());
        return Ok(());
    }
    let mut by_section: Vec<(String, u64)> = Vec::new();
    for row in &r.rows {
        match by_section.last_mut() {
            Some((s, n)) if s == row.section() => *n += row.measured_macs,
            _ => by_section.push((row.section().to_string(), row.measured_macs)),
        }
    }
    println!("# {}", pslt::accounting::CONVENTION);
    for (s, n) in &by_section {
        println!("{s:<8} {n:>14}");
    }
    let t = r.totals();
    if is_base_plan(cfg) {
        println!(
            "total_macs={} reference_macs={:.0} delta_pct={:+.1}",
            t.macs,
            REFERENCE_MACS,
            (t.macs as f64 / REFERENCE_MACS - 1.0) * 100.0
        );
    } else {
        println!("total_macs={}", t.macs);
    }
    Ok(())
}

// --- forward / gradcheck ------------------------------------------------------------

fn random_input(cfg: &ModelConfig, batch: usize) -> Tensor {
    Tensor::uniform(
        [batch, cfg.input_channels, cfg.resolution, cfg.resolution],
        1.0,
        &mut ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x1f0e7),
    )
}

fn forward(
    cfg: &ModelConfig,
    random: bool,
    image: Option<&Path>,
    model_path: Option<&Path>,
    save: Option<&Path>,
) -> Run {
    let model = match model_path {
        Some(p) => io::load(p)?,
        None => Model::build(cfg.clone())?,
    };
    let mc = &model.cfg;
    let x = if random {
        random_input(mc, 1)
    } else {
        let path = image.expect("clap requires an input");
        let t = pslt::image::read_ppm(path)?;
        let [_, c, h, w] = t.shape();
        if c != mc.input_channels || h != mc.resolution || w != mc.resolution {
            return Err(Fail::Usage(format!(
                "{}: image is {w}x{h} with {c} channels, config expects {r}x{r} with {}",
                path.display(),
                mc.input_channels,
                r = mc.resolution
            )));
        }
        t
    };
    let logits = model.forward(&x)?;
    let [n, k, _, _] = logits.shape();
    let row = &logits.data()[..k];
    let top = argmax(row);
    println!(
        "logits_shape={n}x{k} argmax={top} logit_max={:.6}",
        row[top]
    );
    if let Some(p) = save {
        io::save(&model, p)?;
        println!("saved={}", p.display());
    }
    Ok(())
}

fn gradcheck(cfg: &ModelConfig, count: usize, eps: f64, tol: f64) -> Run {
    let mut model = Model::build(cfg.clone())?;
    let x = random_input(cfg, 2);
    let labels = [0, 1 % cfg.classes];
    let (worst, checked) = param_gradcheck(&mut model, &x, &labels, count, eps, cfg.seed)?;
    let pass = checked > 0 && worst < tol;
    println!(
        "gradcheck sampled={count} checked={checked} skipped_kinks={} max_rel_error={worst:.3e} tol={tol:e} result={}",
        count - checked,
        if pass { "pass" } else { "fail" }
    );
    if pass {
        Ok(())
    } else if checked == 0 {
        Err(Fail::Verify("no entries checked".into()))
    } else {
        Err(Fail::Verify(format!(
            "relative error {worst:.3e} >= {tol:e}"
        )))
    }
}

// --- rfield -------------------------------------------------------------------------

struct RfieldArgs {
    shift: Option<OnOff>,
    fd: Option<OnOff>,
    mask: Option<OnOff>,
    ffn: Option<String>,
    target: Option<String>,
    size: Option<usize>,
    method: MapMethod,
    out: Option<PathBuf>,
    grid: bool,
}

fn parse_target(s: &str) -> Result<(usize, usize), Fail> {
    s.split_once(',')
        .and_then(|(y, x)| Some((y.trim().parse().ok()?, x.trim().parse().ok()?)))
        .ok_or_else(|| Fail::Usage(format!("target {s:?} is not y,x")))
}

fn support_picture(m: &InfluenceMap) -> String {
    let sup = m.support();
    let mut s = String::new();
    for y in 0..m.h {
        for x in 0..m.w {
            s.push(if (y, x) == (m.target.y, m.target.x) {
                'T'
            } else if sup[y * m.w + x] {
                '#'
            } else {
                '.'
            });
        }
        s.push('\n');
    }
    s
}

fn map_record(m: &InfluenceMap, window: usize, label: &str) {
    println!(
        "{label}method={} support={} outside_window={} confined={}",
        m.method.name(),
        m.support_size(),
        m.outside_window(window),
        if m.confined_to_window(window) {
            "yes"
        } else {
            "no"
        }
    );
}

fn rfield(cfg: &ModelConfig, a: RfieldArgs) -> Run {
    let stage = cfg
        .stages
        .iter()
        .position(|s| s.kind == StageKind::Ladder)
        .ok_or_else(|| Fail::Usage("config has no ladder stage".into()))?;
    let mut bc = cfg.ladder_block(stage)?;
    if let Some(s) = a.shift {
        bc.shift = s.get();
    }
    if let Some(f) = a.fd {
        bc.delivery = f.get();
    }
    if let Some(m) = a.mask {
        bc.mask_wrapped = m.get();
    }
    if let Some(f) = &a.ffn {
        bc.ffn = FfnKind::parse(f)
            .ok_or_else(|| Fail::Usage(format!("ffn must be lffn or ffn, got {f:?}")))?;
    }
    let m = bc.window;
    let size = a.size.unwrap_or(2 * m);
    let (ty, tx) = match &a.target {
        Some(t) => parse_target(t)?,
        None => (m / 2, m / 2),
    };
    let target = Target::at(ty, tx);
    let build = |bc: pslt::ladder::LadderBlockConfig| -> Result<(LadderBlock, ParamStore), Fail> {
        let b = LadderBlock::new(format!("stage{}.block0", stage + 1), bc)?;
        let mut store = ParamStore::new();
        b.init(&mut store, &mut ChaCha8Rng::seed_from_u64(cfg.seed))?;
        Ok((b, store))
    };
    let (blk, store) = build(bc.clone())?;
    let x = Tensor::uniform(
        [1, bc.d1, size, size],
        1.0,
        &mut ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xf1e1d),
    );
    println!(
        "rfield_block d1={} branches={} window={m} size={size} shift={} fd={} mask={} ffn={} target={ty},{tx}",
        bc.d1,
        bc.branches,
        onoff(bc.shift),
        onoff(bc.delivery),
        onoff(bc.mask_wrapped),
        bc.ffn.name()
    );
    let probe = BlockProbe {
        block: &blk,
        store: &store,
        branch: None,
    };
    let grad = match a.method {
        MapMethod::Perturbation => None,
        _ => Some(gradient_map(&probe, &x, &target, cfg.seed)?),
    };
    let pert = match a.method {
        MapMethod::Gradient => None,
        _ => {
            Some(perturbation_maps(&probe, &x, std::slice::from_ref(&target), cfg.seed)?.remove(0))
        }
    };
    for mp in grad.iter().chain(&pert) {
        map_record(mp, m, "");
    }
    if let (Some(g), Some(p)) = (&grad, &pert) {
        let mis = support_mismatch(g, p);
        println!(
            "methods_agree={} support_mismatch={mis}",
            if mis == 0 { "yes" } else { "no" }
        );
    }
    if bc.shift && bc.branches > 1 {
        let mut alt = bc.clone();
        alt.mask_wrapped = !bc.mask_wrapped;
        let (b2, s2) = build(alt)?;
        let p2 = BlockProbe {
            block: &b2,
            store: &s2,
            branch: None,
        };
        let gm = gradient_map(&p2, &x, &target, cfg.seed)?;
        map_record(&gm, m, &format!("alt_mask={} ", onoff(!bc.mask_wrapped)));
    }
    let shown = pert.as_ref().or(grad.as_ref()).expect("one method ran");
    print!("{}", support_picture(shown));
    if a.grid {
        print!("{}", shown.to_text());
    }
    if let Some(p) = &a.out {
        std::fs::write(p, shown.to_pgm()).map_err(pslt::Error::from)?;
        println!("wrote={}", p.display());
    }
    Ok(())
}

// --- ablate / train / selftest ------------------------------------------------------

fn ablate(cfg: &ModelConfig, variants: &[String]) -> Run {
    let specs = variants
        .iter()
        .map(|v| AblationSpec::parse(v))
        .collect::<pslt::Result<Vec<_>>>()?;
    let results = run_ablations(&specs, cfg)?;
    let mut failed = Vec::new();
    for r in &results {
        let t = r.totals();
        println!(
            "# {:<28} params {:>10} ({:+.1}%)  macs {:>12}",
            r.spec.label(),
            millions(t.params as f64),
            (t.params as f64 / r.base.params as f64 - 1.0) * 100.0,
            t.macs
        );
        println!("{}", r.to_record());
        for n in &r.notes {
            println!("note={n:?}");
        }
        for c in r.checks.iter().filter(|c| !c.passed) {
            println!("check_failed={} detail={:?}", c.name, c.detail);
            failed.push(format!("{}: {}", r.spec.label(), c.name));
        }
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Fail::Verify(failed.join(", ")))
    }
}

fn train(
    cfg: &ModelConfig,
    steps: usize,
    batch: usize,
    per_class: usize,
    lr: Option<f64>,
    overfit: bool,
    save: Option<&Path>,
) -> Run {
    let mut model = Model::build(cfg.clone())?;
    let spec = SyntheticSpec {
        classes: cfg.classes,
        channels: cfg.input_channels,
        ..SyntheticSpec::two_class(
            cfg.resolution,
            if overfit { 1 } else { per_class },
            cfg.seed,
        )
    };
    let mut data = generate(&spec)?;
    if overfit {
        data.truncate(1);
    }
    let opts = TrainOptions {
        steps,
        batch: if overfit { 1 } else { batch },
        lr,
    };
    let r = train_toy(&mut model, &data, &opts)?;
    let every = (steps / 10).max(1);
    for (i, l) in r.losses.iter().enumerate() {
        if i % every == 0 || i + 1 == r.losses.len() {
            println!("step={i} loss={l:.4e}");
        }
    }
    let below = r.losses.iter().position(|l| *l < 0.01);
    println!(
        "samples={} steps={} final_loss={:.4e} train_accuracy={:.4} first_step_below_0.01={}",
        data.len(),
        r.losses.len(),
        r.losses.last().copied().unwrap_or(f64::NAN),
        r.train_accuracy,
        below.map_or("none".to_string(), |s| s.to_string())
    );
    if let Some(p) = save {
        io::save(&model, p)?;
        println!("saved={}", p.display());
    }
    Ok(())
}

fn selftest_cmd(fault: Option<&str>) -> Run {
    let fault = match fault {
        None => None,
        Some(f) => {
            Some(Fault::parse(f).ok_or_else(|| Fail::Usage(format!("unknown fault {f:?}")))?)
        }
    };
    let r = selftest::run(SelftestOptions { fault });
    print!("{}", r.to_records());
    match r.first_failure() {
        None => Ok(()),
        Some(f) => Err(Fail::Verify(format!(
            "{} ({}): {}",
            f.suite,
            f.check,
            f.error.as_deref().unwrap_or("")
        ))),
    }
}
