//! Acceptance suite. Prints one PASS or FAIL line per criterion.
//!
//! Criterion 5 fails on the default block: the light feed-forward's 3x3
//! depthwise conv runs on the merged map and reads one pixel across window
//! edges. It is listed in `KNOWN_FAILURES` so the rest of the workspace still
//! runs; the binary exits nonzero on any other failure, or if criterion 5
//! starts passing.

use std::sync::Arc;
use std::time::{Duration, Instant};

use pslt::accounting::{ladder_block_weights, reconcile, reconcile_block, CountOptions};
use pslt::analysis::{
    all_targets, gradient_maps, perturbation_maps, run_ablations, support_mismatch, AblationSpec,
    BlockProbe, InfluenceMap, Target,
};
use pslt::data::{generate, SyntheticSpec};
use pslt::ladder::window::{
    cyclic_shift, inverse_shift, region_ids, relative_position_index, window_merge,
    window_partition,
};
use pslt::ladder::{BranchAttention, FfnKind, LadderBlock, LadderBlockConfig, ShiftSpec};
use pslt::model::train::{accuracy, param_gradcheck, train_toy, TrainOptions};
use pslt::model::{io, Model, ModelConfig};
use pslt::selftest::{self, Fault, SelftestOptions};
use pslt::tensor::gradcheck::check_gradients;
use pslt::tensor::kernels::{AttnArgs, AttnGeom};
use pslt::tensor::{Activation, AttentionSpec};
use pslt::{Graph, ParamStore, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const KNOWN_FAILURES: &[usize] = &[5];

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn e(err: pslt::Error) -> String {
    err.to_string()
}

fn random(shape: [usize; 4], seed: u64) -> Tensor {
    Tensor::uniform(shape, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
}

fn block(cfg: LadderBlockConfig, seed: u64) -> Result<(LadderBlock, ParamStore), String> {
    let b = LadderBlock::new("blk", cfg).map_err(e)?;
    let mut store = ParamStore::new();
    b.init(&mut store, &mut ChaCha8Rng::seed_from_u64(seed))
        .map_err(e)?;
    Ok((b, store))
}

fn within_budget(start: Instant, budget: Duration) -> Result<(), String> {
    let took = start.elapsed();
    ensure(took < budget, || {
        format!(
            "took {:.1}s, budget {}s",
            took.as_secs_f64(),
            budget.as_secs()
        )
    })
}

fn pct(measured: f64, reference: f64) -> f64 {
    (measured / reference - 1.0) * 100.0
}

// --- 1 ------------------------------------------------------------------------------

fn psw_params(d1: u64, b: u64) -> u64 {
    assert!((3 * d1 * d1).is_multiple_of(b) && (d1 * d1).is_multiple_of(b * b));
    3 * d1 * d1 / b + d1 * d1 / (b * b)
}

fn psw_macs(d1: u64, b: u64, hw: u64, m: u64) -> u64 {
    3 * hw * d1 * d1 / b + hw * d1 * d1 / (b * b) + 2 * m * m * hw * d1
}

fn lffn_params(d2: u64) -> u64 {
    d2 * d2 / 2 + 9 * d2 / 4
}

fn formulas() -> Outcome {
    let start = Instant::now();
    let mut n = 0;
    for d1 in [288u64, 576] {
        let heads = if d1 == 288 { 4 } else { 8 };
        for b in [1u64, 2, 3, 4, 6] {
            let cfg =
                LadderBlockConfig::with_geometry(d1 as usize, b as usize, 7, heads).map_err(e)?;
            let (blk, store) = block(cfg, d1 ^ b)?;
            let hw = if d1 == 288 { 14 } else { 7 };
            let rep = reconcile_block(&blk, &store, hw, hw, CountOptions::WEIGHTS).map_err(e)?;
            let attn = rep.row("blk.attn").ok_or("no attention row")?;
            ensure(attn.measured_params == psw_params(d1, b), || {
                format!(
                    "attention params d1={d1} B={b}: measured {}, formula {}",
                    attn.measured_params,
                    psw_params(d1, b)
                )
            })?;
            let want = psw_macs(d1, b, (hw * hw) as u64, 7);
            ensure(attn.measured_macs == want, || {
                format!(
                    "attention MACs d1={d1} B={b} at {hw}x{hw}: measured {}, formula {want}",
                    attn.measured_macs
                )
            })?;
            n += 2;
        }
    }
    for d2 in [96u64, 192] {
        let cfg = LadderBlockConfig::with_geometry(3 * d2 as usize, 3, 7, 4).map_err(e)?;
        let (blk, store) = block(cfg, d2)?;
        let rep = reconcile_block(&blk, &store, 7, 7, CountOptions::WEIGHTS).map_err(e)?;
        let ffn = rep.row("blk.ffn").ok_or("no ffn row")?.measured_params;
        ensure(ffn == 3 * lffn_params(d2), || {
            format!(
                "ffn params d2={d2}: measured {ffn}, formula 3 x {}",
                lffn_params(d2)
            )
        })?;
        n += 1;
    }
    within_budget(start, Duration::from_secs(10))?;
    Ok(format!("{n} exact matches"))
}

// --- 2 ------------------------------------------------------------------------------

fn budget() -> Outcome {
    let start = Instant::now();
    let model = Model::build(ModelConfig::base()).map_err(e)?;
    let rep = reconcile(&model).map_err(e)?;
    let t = rep.totals();
    let stage4: Vec<u64> = model
        .ladder_blocks()
        .filter(|b| b.path.starts_with("stage4."))
        .map(|b| ladder_block_weights(&rep, &b.path))
        .collect();
    ensure(!stage4.is_empty(), || "no stage4 ladder blocks".into())?;
    let per_block = stage4.iter().sum::<u64>() as f64 / stage4.len() as f64;
    let block_ref = (3.808e6 - 0.664e6) / 3.0;
    let (dp, dm, db) = (
        pct(t.params as f64, 9.223e6),
        pct(t.macs as f64, 1.9e9),
        pct(per_block, block_ref),
    );
    let detail = format!(
        "params {} ({dp:+.2}% vs 9.223M), MACs {} ({dm:+.2}% vs 1.9G), stage4 block {per_block:.0} ({db:+.2}% vs {block_ref:.0})",
        t.params, t.macs
    );
    ensure(
        dp.abs() <= 20.0 && dm.abs() <= 20.0 && db.abs() <= 10.0,
        || detail.clone(),
    )?;
    within_budget(start, Duration::from_secs(30))?;
    Ok(detail)
}

// --- 3 ------------------------------------------------------------------------------

const EPS: f64 = 1e-5;

fn rel_index(m: usize) -> Vec<usize> {
    let mut idx = Vec::new();
    for i in 0..m * m {
        for j in 0..m * m {
            let (yi, xi, yj, xj) = (i / m, i % m, j / m, j % m);
            idx.push((yi + m - 1 - yj) * (2 * m - 1) + (xi + m - 1 - xj));
        }
    }
    idx
}

fn gradients() -> Outcome {
    let start = Instant::now();
    let mut worst: (f64, String) = (0.0, String::new());
    let mut count = 0;
    let mut op = |name: &str,
                  inputs: Vec<Tensor>,
                  build: &dyn Fn(&mut Graph, &[Var]) -> pslt::Result<Var>|
     -> Result<(), String> {
        let err = check_gradients(&inputs, EPS, build).map_err(e)?;
        count += 1;
        if err > worst.0 {
            worst = (err, name.to_string());
        }
        ensure(err < 1e-4, || format!("{name}: relative error {err:e}"))
    };
    let a = random([2, 3, 4, 4], 1);
    let b = random([2, 3, 4, 4], 2);
    for (stride, pad, groups) in [(1, 1, 1), (2, 1, 1), (1, 1, 4), (2, 0, 2)] {
        op(
            &format!("conv2d s{stride} p{pad} g{groups}"),
            vec![
                random([2, 4, 7, 7], 3),
                random([4, 4 / groups, 3, 3], 4),
                random([1, 4, 1, 1], 5),
            ],
            &|g, v| g.conv2d(v[0], v[1], Some(v[2]), stride, pad, groups),
        )?;
    }
    op(
        "linear",
        vec![
            random([2, 6, 3, 3], 6),
            random([5, 6, 1, 1], 7),
            random([1, 5, 1, 1], 8),
        ],
        &|g, v| g.linear(v[0], v[1], Some(v[2])),
    )?;
    op("add", vec![a.clone(), b.clone()], &|g, v| g.add(v[0], v[1]))?;
    op("mul", vec![a.clone(), b.clone()], &|g, v| g.mul(v[0], v[1]))?;
    op("scale", vec![a.clone()], &|g, v| Ok(g.scale(v[0], 0.7)))?;
    op(
        "scale_channels",
        vec![a.clone(), random([2, 3, 1, 1], 9)],
        &|g, v| g.scale_channels(v[0], v[1]),
    )?;
    for kind in [Activation::Relu, Activation::Gelu, Activation::Sigmoid] {
        op(&format!("{kind:?}"), vec![a.clone()], &|g, v| {
            Ok(g.act(v[0], kind))
        })?;
    }
    op("softmax", vec![a.clone()], &|g, v| g.softmax_lastdim(v[0]))?;
    let gamma = random([1, 3, 1, 1], 10);
    let beta = random([1, 3, 1, 1], 11);
    op(
        "layernorm",
        vec![a.clone(), gamma.clone(), beta.clone()],
        &|g, v| g.layernorm(v[0], v[1], v[2]),
    )?;
    op("batchnorm", vec![a.clone(), gamma, beta], &|g, v| {
        g.batchnorm_infer(v[0], &[0.1, -0.2, 0.3], &[0.5, 1.5, 0.9], v[1], v[2])
    })?;
    op("gap", vec![a.clone()], &|g, v| Ok(g.gap(v[0])))?;
    op("concat", vec![a.clone(), b.clone()], &|g, v| {
        g.concat_channels(&[v[1], v[0]])
    })?;
    op("slice", vec![a.clone()], &|g, v| {
        g.slice_channels(v[0], 1, 2)
    })?;
    op("split", vec![random([1, 6, 3, 3], 12)], &|g, v| {
        let parts = g.split_channels(v[0], 3)?;
        g.mul(parts[0], parts[2])
    })?;
    let idx = Arc::new((0..40).map(|i| (i * 13) % 96).collect::<Vec<_>>());
    op("gather", vec![a.clone()], &|g, v| {
        g.gather(v[0], [1, 1, 5, 8], idx.clone())
    })?;
    op("sum", vec![a.clone()], &|g, v| Ok(g.sum(v[0])))?;
    op("cross_entropy", vec![random([3, 4, 1, 1], 13)], &|g, v| {
        g.cross_entropy(v[0], &[2, 0, 3])
    })?;
    let m = 3;
    let regions: Vec<u32> = (0..2 * m * m)
        .map(|t| ((t % (m * m)) % 2) as u32 + (t / (m * m)) as u32)
        .collect();
    for masked in [false, true] {
        let spec = AttentionSpec {
            heads: 2,
            window: m,
            scale: 0.5,
            rel_index: Arc::new(rel_index(m)),
            regions: masked.then(|| Arc::new(regions.clone())),
            windows_per_image: 2,
        };
        op(
            &format!("window_attention masked={masked}"),
            vec![
                random([4, 4, m, m], 14),
                random([4, 4, m, m], 15),
                random([4, 6, m, m], 16),
                random([1, 2, 2 * m - 1, 2 * m - 1], 17),
            ],
            &|g, v| g.window_attention(v[0], v[1], v[2], Some(v[3]), &spec),
        )?;
    }
    let mut model = Model::build(ModelConfig::miniature()).map_err(e)?;
    let x = random([2, 3, 32, 32], 18);
    let (model_err, checked) = param_gradcheck(&mut model, &x, &[0, 1], 32, EPS, 19).map_err(e)?;
    ensure(checked >= 16, || {
        format!("miniature model: only {checked} of 32 entries off ReLU kinks")
    })?;
    ensure(model_err < 1e-3, || {
        format!("miniature model: relative error {model_err:e}")
    })?;
    within_budget(start, Duration::from_secs(120))?;
    Ok(format!(
        "{count} op checks, worst {:.1e} ({}); model {checked} entries, worst {model_err:.1e}",
        worst.0, worst.1
    ))
}

// --- 4 ------------------------------------------------------------------------------

fn identities() -> Outcome {
    let mut n = 0;
    for (shape, m) in [([2, 5, 14, 14], 7), ([1, 3, 8, 12], 4), ([1, 2, 7, 7], 7)] {
        let x = random(shape, 20 + m as u64);
        let back =
            window_merge(&window_partition(&x, m).map_err(e)?, m, shape[2], shape[3]).map_err(e)?;
        ensure(back == x, || {
            format!("window merge/partition {shape:?} M={m}")
        })?;
        for s in [
            ShiftSpec::diag(3),
            ShiftSpec::diag(-3),
            ShiftSpec { dy: 1, dx: -2 },
            ShiftSpec { dy: 0, dx: 5 },
        ] {
            ensure(inverse_shift(&cyclic_shift(&x, s), s) == x, || {
                format!("cyclic shift {s} on {shape:?}")
            })?;
        }
        n += 5;
    }
    for parts in [1, 2, 3, 6] {
        let x = random([2, 12, 3, 3], parts as u64);
        let mut g = Graph::inference();
        let v = g.input(x.clone());
        let split = g.split_channels(v, parts).map_err(e)?;
        let back = g.concat_channels(&split).map_err(e)?;
        ensure(*g.value(back) == x, || format!("split/concat into {parts}"))?;
        n += 1;
    }

    let (m, heads, dk, h) = (7, 2, 4, 14);
    let windows = (h / m) * (h / m);
    let q = Tensor::uniform(
        [windows, heads * dk, m, m],
        30.0,
        &mut ChaCha8Rng::seed_from_u64(31),
    );
    let k = Tensor::uniform(
        [windows, heads * dk, m, m],
        30.0,
        &mut ChaCha8Rng::seed_from_u64(32),
    );
    let table = random([1, heads, 2 * m - 1, 2 * m - 1], 33);
    let rel = relative_position_index(m);
    let regions = region_ids(h, h, m, ShiftSpec::diag(3)).map_err(e)?;
    let mut worst: f64 = 0.0;
    for masked in [false, true] {
        let args = AttnArgs {
            geom: AttnGeom {
                windows,
                heads,
                tokens: m * m,
                dk,
                dv: dk,
            },
            scale: 0.5,
            table: Some(table.data()),
            rel_index: &rel,
            regions: masked.then_some(&regions[..]),
            windows_per_image: windows,
        };
        let t = m * m;
        let mut p = vec![0.0; t * t];
        for win in 0..windows {
            for head in 0..heads {
                args.probs(q.data(), k.data(), win, head, &mut p);
                for row in p.chunks(t) {
                    worst = worst.max((row.iter().sum::<f64>() - 1.0).abs());
                }
            }
        }
    }
    ensure(worst < 1e-9, || {
        format!("attention row sum off by {worst:e}")
    })?;
    n += 1;

    for shift in [ShiftSpec::ZERO, ShiftSpec::diag(3)] {
        let b = BranchAttention::new("br", 8, 2, 7, shift, true, false).map_err(e)?;
        let mut store = ParamStore::new();
        b.init(&mut store, &mut ChaCha8Rng::seed_from_u64(34))
            .map_err(e)?;
        let x = random([1, 8, 14, 14], 35);
        let mut g = Graph::inference();
        let xi = g.input(x.clone());
        let zero = g.input(Tensor::zeros(x.shape()));
        let o = b.forward(&mut g, &store, xi, Some(zero)).map_err(e)?;
        ensure(*g.value(o) == x, || {
            format!("zero previous output with shift {shift} changes the input")
        })?;
        n += 1;
    }
    Ok(format!(
        "{n} identities exact; worst attention row error {worst:.1e}"
    ))
}

// --- 5 ------------------------------------------------------------------------------

fn escaping(maps: &[InfluenceMap], m: usize) -> usize {
    maps.iter().filter(|p| !p.confined_to_window(m)).count()
}

fn maps_for(
    cfg: LadderBlockConfig,
    x: &Tensor,
    targets: &[Target],
) -> Result<(Vec<InfluenceMap>, Vec<InfluenceMap>), String> {
    let (b, s) = block(cfg, 50)?;
    let p = BlockProbe {
        block: &b,
        store: &s,
        branch: None,
    };
    Ok((
        perturbation_maps(&p, x, targets, 51).map_err(e)?,
        gradient_maps(&p, x, targets, 51).map_err(e)?,
    ))
}

fn receptive_field() -> Outcome {
    let start = Instant::now();
    let x = random([1, 288, 14, 14], 52);
    let targets = all_targets(14, 14);
    let base = LadderBlockConfig::base(288, 4);
    let mut off = base.clone();
    off.shift = false;
    off.delivery = false;

    let (p_off, g_off) = maps_for(off.clone(), &x, &targets)?;
    let (p_on, g_on) = maps_for(base, &x, &targets)?;
    let mismatch: usize = p_off
        .iter()
        .zip(&g_off)
        .chain(p_on.iter().zip(&g_on))
        .map(|(p, g)| support_mismatch(p, g))
        .sum();
    let leaks = escaping(&p_off, 7);
    let on_escape = escaping(&p_on, 7);
    let took = start.elapsed().as_secs_f64();

    // Supplementary: window centres, and the same block with a pointwise ffn.
    let centres: Vec<&InfluenceMap> = p_off
        .iter()
        .filter(|p| p.target.y % 7 == 3 && p.target.x % 7 == 3)
        .collect();
    let centres_ok = centres
        .iter()
        .all(|p| p.confined_to_window(7) && p.support_size() == 49);
    let mut pointwise = off;
    pointwise.ffn = FfnKind::Standard;
    let (b, s) = block(pointwise, 50)?;
    let pp = perturbation_maps(
        &BlockProbe {
            block: &b,
            store: &s,
            branch: None,
        },
        &x,
        &targets,
        51,
    )
    .map_err(e)?;
    let pointwise_leaks = escaping(&pp, 7);
    let worst = p_off
        .iter()
        .max_by_key(|p| p.outside_window(7))
        .expect("196 maps");
    let detail = format!(
        "shift-off/fd-off: {leaks}/196 maps leave their window (worst target ({},{}) with {} pixels outside); \
         shift-on/fd-on: {on_escape}/196 escape; method support mismatch {mismatch}; {took:.1}s. \
         Supplementary: window centres confined with support 49: {}; pointwise ffn: {pointwise_leaks}/196 leave",
        worst.target.y,
        worst.target.x,
        worst.outside_window(7),
        if centres_ok { "yes" } else { "no" },
    );
    ensure(
        leaks == 0 && on_escape > 0 && mismatch == 0 && took < 60.0,
        || detail.clone(),
    )?;
    Ok(detail)
}

// --- 6 ------------------------------------------------------------------------------

fn ablations() -> Outcome {
    let base = ModelConfig::base();
    let specs: Vec<AblationSpec> = [
        "branches=2",
        "branches=3",
        "branches=4",
        "branches=6",
        "ffn=ffn",
        "fusion=concat",
    ]
    .iter()
    .map(|s| AblationSpec::parse(s).map_err(e))
    .collect::<Result<_, _>>()?;
    let r = run_ablations(&specs, &base).map_err(e)?;
    let p: Vec<u64> = r.iter().map(|a| a.totals().params).collect();
    let sweep = format!(
        "B=2,3,4,6: {:.2}M > {:.2}M > {:.2}M > {:.2}M (published 11.0 > 9.2 > 8.4 > 7.5); ffn {:.2}M vs lffn {:.2}M; concat {:.2}M vs pafm {:.2}M",
        p[0] as f64 / 1e6,
        p[1] as f64 / 1e6,
        p[2] as f64 / 1e6,
        p[3] as f64 / 1e6,
        p[4] as f64 / 1e6,
        r[4].base.params as f64 / 1e6,
        p[5] as f64 / 1e6,
        r[5].base.params as f64 / 1e6,
    );
    ensure(p[..4].windows(2).all(|w| w[0] > w[1]), || sweep.clone())?;
    ensure(p[4] > r[4].base.params, || sweep.clone())?;
    ensure(p[5] < r[5].base.params, || sweep.clone())?;
    for a in &r {
        ensure(a.passed(), || format!("{}: checks failed", a.spec.label()))?;
    }
    Ok(sweep)
}

// --- 7 ------------------------------------------------------------------------------

fn learnability() -> Outcome {
    let start = Instant::now();
    let data = generate(&SyntheticSpec::two_class(32, 32, 1)).map_err(e)?;
    let mut model = Model::build(ModelConfig::miniature()).map_err(e)?;
    let r = train_toy(
        &mut model,
        &data,
        &TrainOptions {
            steps: 500,
            batch: 16,
            lr: None,
        },
    )
    .map_err(e)?;
    let acc = accuracy(&model, &data).map_err(e)?;
    ensure(acc >= 0.95, || {
        format!("training accuracy {acc:.3} after 500 steps")
    })?;

    let one = generate(&SyntheticSpec::two_class(32, 1, 2)).map_err(e)?;
    let mut single = Model::build(ModelConfig::miniature()).map_err(e)?;
    let o = train_toy(
        &mut single,
        &one[1..2],
        &TrainOptions {
            steps: 300,
            batch: 1,
            lr: None,
        },
    )
    .map_err(e)?;
    let below = o.losses.iter().position(|l| *l < 0.01);
    ensure(below.is_some(), || {
        format!(
            "single sample loss {:.3e} after 300 steps",
            o.losses.last().copied().unwrap_or(f64::NAN)
        )
    })?;
    within_budget(start, Duration::from_secs(300))?;
    Ok(format!(
        "accuracy {acc:.3} after {} steps (final loss {:.2e}); single sample below 0.01 at step {}",
        r.losses.len(),
        r.losses.last().copied().unwrap_or(f64::NAN),
        below.unwrap_or(0)
    ))
}

// --- 8 ------------------------------------------------------------------------------

fn determinism() -> Outcome {
    let cfg = ModelConfig::miniature();
    let a = Model::build(cfg.clone()).map_err(e)?;
    let b = Model::build(cfg).map_err(e)?;
    let same_params = a.params.len() == b.params.len()
        && a.params
            .iter()
            .zip(b.params.iter())
            .all(|((pa, ta), (pb, tb))| {
                pa == pb
                    && ta
                        .data()
                        .iter()
                        .zip(tb.data())
                        .all(|(x, y)| x.to_bits() == y.to_bits())
            });
    ensure(same_params, || "seeded builds differ".into())?;
    let x = random([2, 3, 32, 32], 60);
    let la = a.forward(&x).map_err(e)?;
    let lb = b.forward(&x).map_err(e)?;
    let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    ensure(bits(&la) == bits(&lb), || {
        "logits differ between builds".into()
    })?;

    let dir = tempfile::tempdir().map_err(|err| err.to_string())?;
    let path = dir.path().join("mini.pslt");
    io::save(&a, &path).map_err(e)?;
    let loaded = io::load(&path).map_err(e)?;
    ensure(bits(&loaded.forward(&x).map_err(e)?) == bits(&la), || {
        "loaded model gives different logits".into()
    })?;

    let clean = selftest::run(SelftestOptions::default());
    ensure(clean.passed(), || {
        format!(
            "selftest failed: {:?}",
            clean.first_failure().map(|f| f.suite)
        )
    })?;
    let faulty = selftest::run(SelftestOptions {
        fault: Some(Fault::Eq2Constant),
    });
    let named = faulty.first_failure().map(|f| f.suite);
    ensure(!faulty.passed() && named == Some("eq2-reconcile"), || {
        format!("injected fault reported as {named:?}")
    })?;
    Ok("bit-identical params and logits; save/load exact; selftest passes clean and names eq2-reconcile under fault".into())
}

type Criterion = (&'static str, fn() -> Outcome);

fn main() {
    let criteria: [Criterion; 8] = [
        ("formula reconciliation", formulas),
        ("model budget", budget),
        ("gradient correctness", gradients),
        ("structural identities", identities),
        ("receptive field", receptive_field),
        ("ablation directionality", ablations),
        ("learnability", learnability),
        ("determinism and persistence", determinism),
    ];
    let mut unexpected = Vec::new();
    let mut passed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let n = i + 1;
        let start = Instant::now();
        let outcome = f();
        let secs = start.elapsed().as_secs_f64();
        let known = KNOWN_FAILURES.contains(&n);
        match &outcome {
            Ok(detail) => println!("PASS criterion {n} ({name}) [{secs:.1}s]: {detail}"),
            Err(detail) => println!(
                "FAIL criterion {n} ({name}) [{secs:.1}s]: {detail}{}",
                if known { " (known)" } else { "" }
            ),
        }
        passed += usize::from(outcome.is_ok());
        if outcome.is_ok() == known {
            unexpected.push(n);
        }
    }
    println!(
        "acceptance: {passed} of 8 criteria passed; known failures {KNOWN_FAILURES:?}; unexpected outcomes {unexpected:?}"
    );
    if !unexpected.is_empty() {
        std::process::exit(1);
    }
}
