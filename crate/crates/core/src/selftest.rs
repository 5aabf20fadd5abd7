//! Built-in invariant suite: roundtrips, attention identities, gradients,
//! closed-form reconciliation, receptive-field support and determinism.

use std::fmt::Write as _;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::accounting::{
    analytic_macs, analytic_params, reconcile_block, CountOptions, Dims, Formula,
};
use crate::analysis::{perturbation_maps, BlockProbe, Target};
use crate::ladder::window::{
    cyclic_shift, inverse_shift, region_ids, relative_position_index, window_merge,
    window_partition,
};
use crate::ladder::{BranchAttention, LadderBlock, LadderBlockConfig, ShiftSpec};
use crate::model::{io, train, Model, ModelConfig};
use crate::tensor::gradcheck::check_gradients;
use crate::tensor::kernels::{AttnArgs, AttnGeom};
use crate::tensor::{Activation, AttentionSpec, Graph, ParamStore, Tensor};

/// Deliberate corruptions used to prove that a failing check is reported.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Fault {
    /// Expect 4d1²/B instead of 3d1²/B for the shared projections.
    Eq2Constant,
}

impl Fault {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "eq2" | "eq2-reconcile" => Some(Fault::Eq2Constant),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, Default)]
pub struct SelftestOptions {
    pub fault: Option<Fault>,
}

#[derive(Clone, Debug)]
pub struct Outcome {
    pub suite: &'static str,
    pub check: String,
    pub error: Option<String>,
}

#[derive(Clone, Debug, Default)]
pub struct SelftestReport {
    pub outcomes: Vec<Outcome>,
}

impl SelftestReport {
    pub fn passed(&self) -> bool {
        self.outcomes.iter().all(|o| o.error.is_none())
    }

    pub fn first_failure(&self) -> Option<&Outcome> {
        self.outcomes.iter().find(|o| o.error.is_some())
    }

    /// `(suite, passed, total)` in run order.
    pub fn suites(&self) -> Vec<(&'static str, usize, usize)> {
        let mut out: Vec<(&'static str, usize, usize)> = Vec::new();
        for o in &self.outcomes {
            if out.last().map(|s| s.0) != Some(o.suite) {
                out.push((o.suite, 0, 0));
            }
            let s = out.last_mut().expect("pushed");
            s.2 += 1;
            s.1 += o.error.is_none() as usize;
        }
        out
    }

    pub fn to_records(&self) -> String {
        let mut s = String::new();
        for (suite, passed, total) in self.suites() {
            let _ = writeln!(s, "suite={suite} passed={passed} total={total}");
        }
        match self.first_failure() {
            None => {
                let _ = writeln!(s, "selftest=pass");
            }
            Some(f) => {
                let _ = writeln!(
                    s,
                    "selftest=fail first_failure={} check={} detail={:?}",
                    f.suite,
                    f.check,
                    f.error.as_deref().unwrap_or("")
                );
            }
        }
        s
    }
}

type Check = std::result::Result<(), String>;

struct Runner {
    report: SelftestReport,
}

impl Runner {
    fn check(&mut self, suite: &'static str, name: impl Into<String>, f: impl FnOnce() -> Check) {
        let error = f().err();
        self.report.outcomes.push(Outcome {
            suite,
            check: name.into(),
            error,
        });
    }
}

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Check {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn err(e: crate::Error) -> String {
    e.to_string()
}

fn random(shape: [usize; 4], seed: u64) -> Tensor {
    Tensor::uniform(shape, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
}

fn block(cfg: LadderBlockConfig, seed: u64) -> crate::Result<(LadderBlock, ParamStore)> {
    let b = LadderBlock::new("blk", cfg)?;
    let mut store = ParamStore::new();
    b.init(&mut store, &mut ChaCha8Rng::seed_from_u64(seed))?;
    Ok((b, store))
}

pub fn run(opts: SelftestOptions) -> SelftestReport {
    let mut r = Runner {
        report: SelftestReport::default(),
    };
    roundtrips(&mut r);
    attention(&mut r);
    gradients(&mut r);
    reconciliation(&mut r, opts);
    rfield(&mut r);
    determinism(&mut r);
    r.report
}

fn roundtrips(r: &mut Runner) {
    let x = random([2, 5, 14, 14], 1);
    r.check("roundtrip", "window-partition", || {
        let back = window_merge(&window_partition(&x, 7).map_err(err)?, 7, 14, 14).map_err(err)?;
        ensure(back == x, || "merge(partition(x)) != x".into())
    });
    r.check("roundtrip", "cyclic-shift", || {
        for s in [
            ShiftSpec::diag(3),
            ShiftSpec::diag(-3),
            ShiftSpec { dy: 1, dx: 5 },
        ] {
            ensure(inverse_shift(&cyclic_shift(&x, s), s) == x, || {
                format!("inverse_shift(cyclic_shift(x, {s})) != x")
            })?;
        }
        Ok(())
    });
    r.check("roundtrip", "split-concat", || {
        let y = random([1, 6, 5, 5], 2);
        let mut g = Graph::inference();
        let v = g.input(y.clone());
        let parts = g.split_channels(v, 3).map_err(err)?;
        let back = g.concat_channels(&parts).map_err(err)?;
        ensure(*g.value(back) == y, || "concat(split(x)) != x".into())
    });
    r.check("roundtrip", "model-file", || {
        let m = Model::build(ModelConfig::miniature()).map_err(err)?;
        let loaded = io::from_bytes(&io::to_bytes(&m)).map_err(err)?;
        let x = random([1, 3, 32, 32], 3);
        ensure(
            m.forward(&x).map_err(err)? == loaded.forward(&x).map_err(err)?,
            || "loaded model gives different logits".into(),
        )
    });
}

fn attention(r: &mut Runner) {
    r.check("attention", "rows-sum-to-one", || {
        let (m, heads, d, h) = (7, 2, 4, 14);
        let windows = (h / m) * (h / m);
        let q = Tensor::uniform(
            [windows, heads * d, m, m],
            20.0,
            &mut ChaCha8Rng::seed_from_u64(4),
        );
        let k = Tensor::uniform(
            [windows, heads * d, m, m],
            20.0,
            &mut ChaCha8Rng::seed_from_u64(5),
        );
        let table = random([1, heads, 2 * m - 1, 2 * m - 1], 6);
        let rel = relative_position_index(m);
        let regions = region_ids(h, h, m, ShiftSpec::diag(3)).map_err(err)?;
        for masked in [false, true] {
            let args = AttnArgs {
                geom: AttnGeom {
                    windows,
                    heads,
                    tokens: m * m,
                    dk: d,
                    dv: d,
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
                        let s: f64 = row.iter().sum();
                        ensure((s - 1.0).abs() < 1e-9, || {
                            format!("row sums to {s} (masked={masked})")
                        })?;
                    }
                }
            }
        }
        Ok(())
    });
    r.check("attention", "zero-previous-output", || {
        let b =
            BranchAttention::new("br", 6, 2, 7, ShiftSpec::diag(3), true, false).map_err(err)?;
        let mut store = ParamStore::new();
        b.init(&mut store, &mut ChaCha8Rng::seed_from_u64(7))
            .map_err(err)?;
        let x = random([1, 6, 14, 14], 8);
        let mut g = Graph::inference();
        let xi = g.input(x.clone());
        let z = g.input(Tensor::zeros(x.shape()));
        let o = b.forward(&mut g, &store, xi, Some(z)).map_err(err)?;
        ensure(*g.value(o) == x, || {
            "branch output differs from its input".into()
        })
    });
}

const OP_TOL: f64 = 1e-4;
const MODEL_TOL: f64 = 1e-3;
const EPS: f64 = 1e-5;

fn gradients(r: &mut Runner) {
    let mut op =
        |name: &str,
         inputs: Vec<Tensor>,
         build: &dyn Fn(&mut Graph, &[crate::Var]) -> crate::Result<crate::Var>| {
            r.check("gradients", name, || {
                let e = check_gradients(&inputs, EPS, build).map_err(err)?;
                ensure(e < OP_TOL, || format!("relative error {e:e}"))
            });
        };
    op(
        "conv2d",
        vec![
            random([2, 4, 6, 6], 10),
            random([4, 4, 3, 3], 11),
            random([1, 4, 1, 1], 12),
        ],
        &|g, v| g.conv2d(v[0], v[1], Some(v[2]), 2, 1, 1),
    );
    op(
        "depthwise-conv2d",
        vec![random([1, 4, 6, 6], 13), random([4, 1, 3, 3], 14)],
        &|g, v| g.conv2d(v[0], v[1], None, 1, 1, 4),
    );
    op(
        "linear",
        vec![
            random([2, 6, 3, 3], 15),
            random([5, 6, 1, 1], 16),
            random([1, 5, 1, 1], 17),
        ],
        &|g, v| g.linear(v[0], v[1], Some(v[2])),
    );
    op("gelu", vec![random([1, 3, 4, 4], 18)], &|g, v| {
        Ok(g.act(v[0], Activation::Gelu))
    });
    op("sigmoid", vec![random([1, 3, 4, 4], 19)], &|g, v| {
        Ok(g.act(v[0], Activation::Sigmoid))
    });
    op("softmax", vec![random([1, 3, 4, 4], 20)], &|g, v| {
        g.softmax_lastdim(v[0])
    });
    op(
        "layernorm",
        vec![
            random([1, 6, 4, 4], 21),
            random([1, 6, 1, 1], 22),
            random([1, 6, 1, 1], 23),
        ],
        &|g, v| g.layernorm(v[0], v[1], v[2]),
    );
    op("cross-entropy", vec![random([3, 4, 1, 1], 24)], &|g, v| {
        g.cross_entropy(v[0], &[1, 0, 3])
    });
    let m = 3;
    let spec = AttentionSpec {
        heads: 2,
        window: m,
        scale: 0.5,
        rel_index: Arc::new(relative_position_index(m)),
        regions: None,
        windows_per_image: 2,
    };
    op(
        "window-attention",
        vec![
            random([2, 4, m, m], 25),
            random([2, 4, m, m], 26),
            random([2, 6, m, m], 27),
            random([1, 2, 2 * m - 1, 2 * m - 1], 28),
        ],
        &|g, v| g.window_attention(v[0], v[1], v[2], Some(v[3]), &spec),
    );
    r.check("gradients", "miniature-model", || {
        let mut model = Model::build(ModelConfig::miniature()).map_err(err)?;
        let x = random([2, 3, 32, 32], 29);
        let (worst, n) =
            train::param_gradcheck(&mut model, &x, &[0, 1], 24, EPS, 30).map_err(err)?;
        ensure(n >= 12, || format!("only {n} entries off ReLU kinks"))?;
        ensure(worst < MODEL_TOL, || format!("relative error {worst:e}"))
    });
}

fn reconciliation(r: &mut Runner, opts: SelftestOptions) {
    for d1 in [288u64, 576] {
        for b in [1u64, 2, 3, 4, 6] {
            r.check("eq2-reconcile", format!("d1={d1} B={b}"), || {
                let heads = if d1 == 288 { 4 } else { 8 };
                let cfg = LadderBlockConfig::with_geometry(d1 as usize, b as usize, 7, heads)
                    .map_err(err)?;
                let (blk, store) = block(cfg, d1 + b).map_err(err)?;
                let rep =
                    reconcile_block(&blk, &store, 7, 7, CountOptions::WEIGHTS).map_err(err)?;
                let measured = rep
                    .row("blk.attn")
                    .ok_or("no attention row")?
                    .measured_params;
                let mut expected =
                    analytic_params(Formula::PswMhsa, Dims::new(d1, b, 7, 7, 7)).map_err(err)?;
                if opts.fault == Some(Fault::Eq2Constant) {
                    expected += d1 * d1 / b;
                }
                ensure(measured == expected, || {
                    format!("measured {measured}, formula {expected}")
                })
            });
        }
    }
    for (d1, heads, hw) in [(288u64, 4, 14u64), (576, 8, 7)] {
        for b in [1u64, 3, 6] {
            r.check("eq3-reconcile", format!("d1={d1} B={b} hw={hw}"), || {
                let cfg = LadderBlockConfig::with_geometry(d1 as usize, b as usize, 7, heads)
                    .map_err(err)?;
                let (blk, store) = block(cfg, 1).map_err(err)?;
                let rep = reconcile_block(
                    &blk,
                    &store,
                    hw as usize,
                    hw as usize,
                    CountOptions::WEIGHTS,
                )
                .map_err(err)?;
                let measured = rep.row("blk.attn").ok_or("no attention row")?.measured_macs;
                let expected =
                    analytic_macs(Formula::PswMhsa, Dims::new(d1, b, hw, hw, 7)).map_err(err)?;
                ensure(measured == expected, || {
                    format!("measured {measured}, formula {expected}")
                })
            });
        }
    }
    for d2 in [96u64, 192] {
        r.check("eq4-reconcile", format!("d2={d2}"), || {
            let cfg = LadderBlockConfig::with_geometry(3 * d2 as usize, 3, 7, 4).map_err(err)?;
            let (blk, store) = block(cfg, 2).map_err(err)?;
            let rep = reconcile_block(&blk, &store, 7, 7, CountOptions::WEIGHTS).map_err(err)?;
            let measured = rep.row("blk.ffn").ok_or("no ffn row")?.measured_params;
            let expected =
                3 * analytic_params(Formula::Lffn, Dims::new(d2, 1, 7, 7, 7)).map_err(err)?;
            ensure(measured == expected, || {
                format!("measured {measured}, formula {expected}")
            })
        });
    }
}

fn rfield(r: &mut Runner) {
    let x = random([1, 24, 14, 14], 40);
    r.check("rfield", "window-center-confined", || {
        let mut c = LadderBlockConfig::with_geometry(24, 3, 7, 2).map_err(err)?;
        c.shift = false;
        c.delivery = false;
        let (b, s) = block(c, 41).map_err(err)?;
        let p = BlockProbe {
            block: &b,
            store: &s,
            branch: None,
        };
        let maps =
            perturbation_maps(&p, &x, &[Target::at(3, 3), Target::at(10, 10)], 0).map_err(err)?;
        for m in &maps {
            ensure(m.confined_to_window(7) && m.support_size() == 49, || {
                format!(
                    "target {:?}: {} pixels, {} outside",
                    (m.target.y, m.target.x),
                    m.support_size(),
                    m.outside_window(7)
                )
            })?;
        }
        Ok(())
    });
    r.check("rfield", "shift-and-delivery-escape", || {
        let c = LadderBlockConfig::with_geometry(24, 3, 7, 2).map_err(err)?;
        let (b, s) = block(c, 41).map_err(err)?;
        let p = BlockProbe {
            block: &b,
            store: &s,
            branch: None,
        };
        let m = perturbation_maps(&p, &x, &[Target::at(3, 3)], 0).map_err(err)?;
        ensure(m[0].outside_window(7) > 0, || {
            "support stays inside one window".into()
        })
    });
}

fn determinism(r: &mut Runner) {
    r.check("determinism", "seeded-build", || {
        let a = Model::build(ModelConfig::miniature()).map_err(err)?;
        let b = Model::build(ModelConfig::miniature()).map_err(err)?;
        ensure(io::to_bytes(&a) == io::to_bytes(&b), || {
            "parameters differ".into()
        })?;
        let x = random([1, 3, 32, 32], 50);
        ensure(
            a.forward(&x).map_err(err)? == b.forward(&x).map_err(err)?,
            || "logits differ".into(),
        )
    });
}
