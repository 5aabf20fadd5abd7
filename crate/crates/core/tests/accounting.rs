use proptest::prelude::*;
use pslt::accounting::{
    analytic, calibrate_mbv2, count_macs, count_params, ladder_block_weights, reconcile,
    reconcile_at, reconcile_block, section_table, CostReport, CountOptions, Dims, Formula, Row,
    REFERENCE_MACS, REFERENCE_STAGE4_BLOCK, REFERENCE_TOTAL_PARAMS,
};
use pslt::ladder::{FfnKind, LadderBlock, LadderBlockConfig};
use pslt::model::{Model, ModelConfig};
use pslt::{Graph, ParamStore, Tensor};
use rand::SeedableRng;

fn block(
    d1: usize,
    b: usize,
    heads: usize,
    tweak: impl FnOnce(&mut LadderBlockConfig),
) -> (LadderBlock, ParamStore) {
    let mut cfg = LadderBlockConfig::with_geometry(d1, b, 7, heads).unwrap();
    tweak(&mut cfg);
    let blk = LadderBlock::new("blk", cfg).unwrap();
    let mut store = ParamStore::new();
    blk.init(&mut store, &mut rand_chacha::ChaCha8Rng::seed_from_u64(1))
        .unwrap();
    (blk, store)
}

fn row<'a>(r: &'a CostReport, path: &str) -> &'a Row {
    r.row(path).unwrap_or_else(|| panic!("no row {path}"))
}

// --- closed forms -----------------------------------------------------------------

#[test]
fn closed_form_values() {
    let psw = analytic(Formula::PswMhsa, Dims::new(288, 3, 14, 14, 7)).unwrap();
    assert_eq!(psw.params, 92_160);
    for d in [96, 288, 576] {
        let one = analytic(Formula::PswMhsa, Dims::new(d, 1, 14, 14, 7)).unwrap();
        let w = analytic(Formula::WMhsa, Dims::new(d, 1, 14, 14, 7)).unwrap();
        assert_eq!(one, w);
        assert_eq!(w.params, 4 * d * d);
    }
    assert_eq!(
        analytic(Formula::Lffn, Dims::new(192, 1, 7, 7, 7))
            .unwrap()
            .params,
        18_432 + 432
    );
    assert_eq!(
        analytic(Formula::Lffn, Dims::new(96, 1, 14, 14, 7))
            .unwrap()
            .params,
        4_608 + 216
    );
    assert_eq!(
        analytic(Formula::Ffn, Dims::new(192, 1, 7, 7, 7)).unwrap(),
        pslt::accounting::Cost {
            params: 36_864,
            macs: 49 * 36_864
        }
    );
    assert_eq!(Formula::parse("lffn"), Some(Formula::Lffn));
    assert_eq!(Formula::parse("mhsa"), None);
}

#[test]
fn closed_form_rejects_bad_dims() {
    assert!(analytic(Formula::WMhsa, Dims::new(0, 1, 7, 7, 7)).is_err());
    assert!(analytic(Formula::PswMhsa, Dims::new(100, 3, 7, 7, 7)).is_err());
}

// --- measured vs closed form -----------------------------------------------------------

#[test]
fn attention_and_lffn_counts_match_exactly() {
    for d1 in [96, 288, 576] {
        for b in [1, 2, 3, 4, 6] {
            let (blk, store) = block(d1, b, 4, |_| {});
            let r = reconcile_block(&blk, &store, 7, 7, CountOptions::WEIGHTS).unwrap();
            let a = row(&r, "blk.attn");
            assert_eq!(a.param_delta(), Some(0), "attn d1={d1} B={b}");
            let f = row(&r, "blk.ffn");
            assert_eq!(f.param_delta(), Some(0), "lffn d1={d1} B={b}");
        }
    }
}

#[test]
fn attention_macs_match_exactly() {
    for (d1, heads) in [(288, 4), (576, 8)] {
        for hw in [7, 14] {
            for b in [1, 2, 3, 4, 6] {
                let (blk, store) = block(d1, b, heads, |_| {});
                let r = reconcile_block(&blk, &store, hw, hw, CountOptions::WEIGHTS).unwrap();
                assert_eq!(
                    row(&r, "blk.attn").mac_delta(),
                    Some(0),
                    "d1={d1} hw={hw} B={b}"
                );
            }
        }
    }
}

#[test]
fn lffn_macs_flag_the_depthwise_term() {
    let (blk, store) = block(288, 3, 4, |_| {});
    let r = reconcile_block(&blk, &store, 14, 14, CountOptions::WEIGHTS).unwrap();
    let f = row(&r, "blk.ffn");
    // per branch, direct 9hwd/4 minus the formula's 9hwd/16
    let per_branch = 9 * 196 * 96 / 4 - 9 * 196 * 96 / 16;
    assert_eq!(f.mac_delta(), Some(3 * per_branch));
    assert!(f.note.as_deref().unwrap().contains("9hwd/16"));
}

#[test]
fn delivery_off_reconciles_as_independent_branches() {
    let (blk, store) = block(288, 3, 4, |c| c.delivery = false);
    let r = reconcile_block(&blk, &store, 14, 14, CountOptions::WEIGHTS).unwrap();
    let a = row(&r, "blk.attn");
    assert_eq!(a.analytic_params, Some(3 * 4 * 96 * 96));
    assert_eq!((a.param_delta(), a.mac_delta()), (Some(0), Some(0)));
}

#[test]
fn standard_ffn_flagged_against_single_map_formula() {
    let (blk, store) = block(288, 3, 4, |c| c.ffn = FfnKind::Standard);
    let r = reconcile_block(&blk, &store, 14, 14, CountOptions::WEIGHTS).unwrap();
    let f = row(&r, "blk.ffn");
    assert_eq!(f.measured_params, 3 * 8 * 96 * 96);
    assert_eq!(f.analytic_params, Some(3 * 96 * 96));
    assert!(f.note.is_some());
}

// --- whole model ---------------------------------------------------------------------

#[test]
fn base_model_direct_counts() {
    let m = Model::build(ModelConfig::base()).unwrap();
    let rows = count_params(&m, CountOptions::WEIGHTS);
    let get = |p: &str| rows.iter().find(|r| r.path == p).unwrap().measured_params;
    assert_eq!(get("head"), 576_000);
    assert_eq!(get("stage4.down"), 2 * 2 * 288 * 576);
    assert_eq!(get("stage4.block0.attn"), 368_640);
    let all = count_params(&m, CountOptions::ALL);
    assert_eq!(
        all.iter().map(|r| r.measured_params).sum::<u64>(),
        m.params.total_numel() as u64
    );
}

#[test]
fn base_reconciliation_against_published_budget() {
    let m = Model::build(ModelConfig::base()).unwrap();
    let r = reconcile(&m).unwrap();
    for row in r.rows.iter().filter(|r| r.path.ends_with(".attn")) {
        assert_eq!(
            (row.param_delta(), row.mac_delta()),
            (Some(0), Some(0)),
            "{}",
            row.path
        );
    }
    let t = r.totals();
    let p = t.params as f64 / REFERENCE_TOTAL_PARAMS;
    let f = t.macs as f64 / REFERENCE_MACS;
    assert!((0.8..=1.2).contains(&p), "params ratio {p}");
    assert!((0.8..=1.2).contains(&f), "macs ratio {f}");
    assert!(r.rows.iter().all(|r| r.path != "unscoped"));
    let weights = reconcile_at(&m, [1, 3, 224, 224], CountOptions::WEIGHTS).unwrap();
    let blk = ladder_block_weights(&weights, "stage4.block1") as f64;
    assert!(
        (blk / REFERENCE_STAGE4_BLOCK - 1.0).abs() <= 0.10,
        "stage-4 block {blk}"
    );
    let table = section_table(&r);
    assert!(
        table.contains("stage3") && table.contains("9223000"),
        "{table}"
    );
    assert!(r.notes.iter().any(|n| n.starts_with("mbv2 calibration")));
}

#[test]
fn pointwise_conv_macs() {
    let mut g = Graph::inference().with_cost_tracking();
    let x = g.input(Tensor::zeros([1, 288, 14, 14]));
    let w = g.input(Tensor::zeros([288, 288, 1, 1]));
    g.conv2d(x, w, None, 1, 0, 1).unwrap();
    assert_eq!(g.costs()[0].macs, 16_257_024);
}

#[test]
fn miniature_traversal_equals_declared_tensors() {
    let m = Model::build(ModelConfig::miniature()).unwrap();
    let rows = count_params(&m, CountOptions::ALL);
    let declared: u64 = m
        .params
        .iter()
        .map(|(_, t)| t.shape().iter().product::<usize>() as u64)
        .sum();
    assert_eq!(
        rows.iter().map(|r| r.measured_params).sum::<u64>(),
        declared
    );
    // three 3x3 convs to 6 channels plus three batchnorm affines
    let stem = 3 * 3 * 3 * 6 + 2 * 3 * 3 * 6 * 6 + 3 * 2 * 6;
    assert_eq!(rows[0].measured_params, stem);
    let macs = count_macs(&m, [1, 3, 32, 32]).unwrap();
    assert!(macs.iter().all(|r| r.path != "unscoped"));
    let doubled = count_macs(&m, [2, 3, 32, 32]).unwrap();
    for (a, b) in macs.iter().zip(&doubled) {
        assert_eq!(2 * a.measured_macs, b.measured_macs, "{}", a.path);
    }
}

#[test]
fn calibration_only_for_base_plan() {
    let c = calibrate_mbv2(&ModelConfig::base()).unwrap();
    assert!(c.best.error <= c.configured.error);
    assert_eq!(c.grid.len(), 20);
    assert!(calibrate_mbv2(&ModelConfig::miniature()).is_none());
}

#[test]
fn empty_report() {
    let r = CostReport::empty();
    assert_eq!((r.totals().params, r.totals().macs), (0, 0));
    let rec = r.to_records();
    assert_eq!(
        rec.lines()
            .filter(|l| !l.starts_with('#'))
            .collect::<Vec<_>>(),
        vec!["path=total measured_params=0 analytic_params=- measured_macs=0 analytic_macs=-"]
    );
}

#[test]
fn records_match_golden() {
    let m = Model::build(ModelConfig::miniature()).unwrap();
    let got = reconcile(&m).unwrap().to_records();
    let path =
        std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden/mini_cost.records");
    if std::env::var_os("PSLT_BLESS").is_some() {
        std::fs::write(&path, &got).unwrap();
    }
    let want = std::fs::read_to_string(&path).unwrap();
    assert_eq!(got, want, "rerun with PSLT_BLESS=1 to regenerate");
}

#[test]
fn text_report_is_aligned() {
    let m = Model::build(ModelConfig::miniature()).unwrap();
    let text = reconcile(&m).unwrap().to_text();
    let lines: Vec<&str> = text
        .lines()
        .skip(1)
        .take_while(|l| !l.starts_with("total"))
        .collect();
    let col = lines[0].find("params").unwrap() + "params".len();
    for l in &lines[1..] {
        assert!(l.as_bytes()[col - 1].is_ascii_digit(), "{l}");
    }
}

proptest! {
    #[test]
    fn totals_ignore_row_order(seed in any::<u64>()) {
        use rand::seq::SliceRandom;
        let m = Model::build(ModelConfig::miniature()).unwrap();
        let r = reconcile(&m).unwrap();
        let mut shuffled = r.clone();
        shuffled.rows.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
        prop_assert_eq!(r.totals(), shuffled.totals());
    }
}
