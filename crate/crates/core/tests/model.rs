use pslt::data::{generate, SyntheticSpec};
use pslt::model::config::parse_pairs;
use pslt::model::io::{from_bytes, load, save, to_bytes};
use pslt::model::train::{param_gradcheck, train_toy, TrainOptions};
use pslt::model::{DownsampleKind, Model, ModelConfig, Unit};
use pslt::{Error, Graph, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn random(shape: [usize; 4], seed: u64) -> Tensor {
    Tensor::uniform(shape, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
}

fn mini() -> Model {
    Model::build(ModelConfig::miniature()).unwrap()
}

// --- configuration ---------------------------------------------------------------

#[test]
fn config_text_roundtrip() {
    for cfg in [ModelConfig::base(), ModelConfig::miniature()] {
        assert_eq!(ModelConfig::parse(&cfg.to_text()).unwrap(), cfg);
    }
    let mut c = ModelConfig::base();
    c.ladder.shifts = Some(vec![
        pslt::ladder::ShiftSpec::ZERO,
        pslt::ladder::ShiftSpec::new(2, -1),
        pslt::ladder::ShiftSpec::new(-3, 3),
    ]);
    c.ladder.fusion = pslt::ladder::FusionKind::Se;
    c.mbv2_expansion = 3.5;
    assert_eq!(ModelConfig::parse(&c.to_text()).unwrap(), c);
}

#[test]
fn preset_with_overrides() {
    let cfg = ModelConfig::parse(
        "preset = mini\n# comment\nseed = 7\nladder.delivery = off  # trailing\n",
    )
    .unwrap();
    assert_eq!(cfg.seed, 7);
    assert!(!cfg.ladder.delivery);
    assert_eq!(cfg.resolution, 32);
}

#[test]
fn config_errors_name_the_key() {
    let key_of = |text: &str| match ModelConfig::parse(text) {
        Err(Error::Config { path, .. }) => path,
        other => panic!("expected config error for {text:?}, got {other:?}"),
    };
    assert_eq!(key_of("stage9.depth = 1"), "stage9.depth");
    assert_eq!(key_of("bogus = 1"), "bogus");
    assert_eq!(key_of("stage2.channels = 100"), "stage2.channels");
    assert_eq!(key_of("ladder.fusion = sum"), "ladder.fusion");
    assert_eq!(key_of("seed = 1\nseed = 2"), "seed");
    assert_eq!(key_of("input.resolution = 160"), "stage3.window");
    assert!(key_of("ladder.branches = 5").starts_with("stage3"));
    assert_eq!(key_of("just a line"), "line 1");
}

#[test]
fn parse_pairs_keeps_order() {
    let p = parse_pairs("b = 1\na = x y\n").unwrap();
    assert_eq!(p.keys().collect::<Vec<_>>(), vec!["b", "a"]);
    assert_eq!(p["a"], "x y");
}

#[test]
fn repo_config_files_parse() {
    let dir = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let base = ModelConfig::load(&dir.join("base.cfg")).unwrap();
    assert_eq!(base, ModelConfig::base());
    let mini = ModelConfig::load(&dir.join("mini.cfg")).unwrap();
    assert_eq!(mini, ModelConfig::miniature());
}

// --- build and forward ---------------------------------------------------------------

#[test]
fn base_plan_block_counts() {
    let m = Model::build(ModelConfig::base()).unwrap();
    assert_eq!(m.stem.convs.len(), 3);
    let counts: Vec<usize> = m.stages.iter().map(|s| s.units.len()).collect();
    assert_eq!(counts, vec![3, 4, 10, 4]);
    assert!(matches!(m.stages[3].units[0], Unit::Down(_)));
    assert!(
        matches!(&m.stages[1].units[3], Unit::Mbv2(b) if b.cfg.c_out == 288 && b.cfg.stride == 2)
    );
    assert_eq!(m.ladder_blocks().count(), 13);
    assert_eq!(m.params.expect("head.fc.weight").unwrap().numel(), 576_000);
    assert_eq!(m.params.count_under("head", |_| true), 577_000);
    assert_eq!(m.cfg.stages[3].downsample, DownsampleKind::Conv2x2);
}

#[test]
fn base_forward_shapes_follow_the_plan() {
    let m = Model::build(ModelConfig::base()).unwrap();
    let x = random([2, 3, 224, 224], 1);
    let mut g = Graph::inference();
    let xv = g.input(x);
    let mut seen = Vec::new();
    let out = m
        .forward_graph_with(&mut g, &m.params, xv, |_, name, v| {
            seen.push((name.to_string(), v.shape()))
        })
        .unwrap();
    assert_eq!(out.shape(), [2, 1000, 1, 1]);
    let want = vec![
        ("stem", [2, 36, 112, 112]),
        ("stage1", [2, 72, 56, 56]),
        ("stage2", [2, 288, 14, 14]),
        ("stage3", [2, 288, 14, 14]),
        ("stage4", [2, 576, 7, 7]),
        ("head", [2, 1000, 1, 1]),
    ];
    let want: Vec<(String, [usize; 4])> =
        want.into_iter().map(|(a, b)| (a.to_string(), b)).collect();
    assert_eq!(seen, want);
    assert_eq!(m.section_shapes([2, 3, 224, 224]).unwrap(), want);
    // stage-2 blocks run at 28x28 with 144 channels before the exit block
    assert_eq!(
        ModelConfig::base().stage_resolutions(),
        vec![56, 28, 14, 7, 7]
    );
}

#[test]
fn miniature_runs_at_64() {
    let mut cfg = ModelConfig::miniature();
    cfg.resolution = 64;
    let m = Model::build(cfg).unwrap();
    let y = m.forward(&random([1, 3, 64, 64], 2)).unwrap();
    assert_eq!(y.shape(), [1, 2, 1, 1]);
    assert!(y.is_finite());
}

#[test]
fn forward_rejects_window_incompatible_input() {
    let m = mini();
    assert!(matches!(
        m.forward(&random([1, 3, 24, 24], 3)),
        Err(Error::Config { .. })
    ));
}

#[test]
fn determinism() {
    let a = mini();
    let b = mini();
    assert!(a
        .params
        .iter()
        .zip(b.params.iter())
        .all(|((p, x), (q, y))| p == q && x == y));
    let x = random([3, 3, 32, 32], 4);
    assert_eq!(a.forward(&x).unwrap(), b.forward(&x).unwrap());
    let mut other = ModelConfig::miniature();
    other.seed = 1;
    assert_ne!(
        Model::build(other).unwrap().forward(&x).unwrap(),
        a.forward(&x).unwrap()
    );
}

#[test]
fn batch_rows_are_independent() {
    let m = mini();
    let x = random([3, 3, 32, 32], 5);
    let y = m.forward(&x).unwrap();
    let per = 3 * 32 * 32;
    let mut swapped = x.data().to_vec();
    swapped.rotate_left(per);
    let ys = m
        .forward(&Tensor::new(x.shape(), swapped).unwrap())
        .unwrap();
    let k = 2;
    for i in 0..3 {
        let j = (i + 1) % 3;
        assert_eq!(
            &ys.data()[i * k..(i + 1) * k],
            &y.data()[j * k..(j + 1) * k]
        );
    }
}

#[test]
fn end_to_end_parameter_gradients() {
    let mut m = mini();
    let x = random([2, 3, 32, 32], 6);
    let (err, n) = param_gradcheck(&mut m, &x, &[0, 1], 60, 1e-5, 7).unwrap();
    assert!(n >= 45, "only {n} of 60 entries away from kinks");
    assert!(err < 1e-3, "worst relative error {err}");
}

// --- persistence -------------------------------------------------------------------------

#[test]
fn save_load_roundtrip_base() {
    let m = Model::build(ModelConfig::base()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("base.pslt");
    save(&m, &path).unwrap();
    let back = load(&path).unwrap();
    assert_eq!(back.cfg, m.cfg);
    assert!(m
        .params
        .iter()
        .zip(back.params.iter())
        .all(|((p, x), (q, y))| p == q
            && x.shape() == y.shape()
            && x.data()
                .iter()
                .zip(y.data())
                .all(|(a, b)| a.to_bits() == b.to_bits())));
}

#[test]
fn forward_identical_after_roundtrip() {
    let mut m = mini();
    // move away from the seeded initialization so the file really carries the values
    for (_, t) in m.params.iter_mut() {
        for v in t.data_mut() {
            *v *= 1.25;
        }
    }
    let back = from_bytes(&to_bytes(&m)).unwrap();
    let x = random([2, 3, 32, 32], 8);
    assert_eq!(back.forward(&x).unwrap(), m.forward(&x).unwrap());
}

#[test]
fn corrupted_files_fail_with_distinct_errors() {
    let bytes = to_bytes(&mini());
    let mut bad_magic = bytes.clone();
    bad_magic[0] = b'X';
    assert!(matches!(from_bytes(&bad_magic), Err(Error::Format(_))));

    let mut bad_version = bytes.clone();
    bad_version[4] = 9;
    assert!(matches!(
        from_bytes(&bad_version),
        Err(Error::Version {
            found: 9,
            expected: 1
        })
    ));

    for cut in [3, 10, bytes.len() / 2, bytes.len() - 1] {
        assert!(
            matches!(from_bytes(&bytes[..cut]), Err(Error::Truncated(_))),
            "cut at {cut}"
        );
    }

    let mut flipped = bytes.clone();
    let n = flipped.len();
    flipped[n - 20] ^= 0x40;
    assert!(matches!(from_bytes(&flipped), Err(Error::Checksum { .. })));
}

// --- training -------------------------------------------------------------------------------

#[test]
fn zero_learning_rate_gives_flat_curve() {
    let mut m = mini();
    let data = generate(&SyntheticSpec::two_class(32, 4, 1)).unwrap();
    let r = train_toy(
        &mut m,
        &data,
        &TrainOptions {
            steps: 5,
            batch: 8,
            lr: Some(0.0),
        },
    )
    .unwrap();
    assert_eq!(r.losses.len(), 5);
    assert!(r.losses.iter().all(|l| *l == r.losses[0]));
}

#[test]
fn single_sample_overfits() {
    let mut m = mini();
    let data = generate(&SyntheticSpec::two_class(32, 1, 2)).unwrap();
    let one = vec![data[1].clone()];
    let r = train_toy(
        &mut m,
        &one,
        &TrainOptions {
            steps: 300,
            batch: 1,
            lr: None,
        },
    )
    .unwrap();
    let first_below = r.losses.iter().position(|l| *l < 0.01);
    assert!(first_below.is_some(), "final loss {:?}", r.losses.last());
}

#[test]
fn non_finite_loss_aborts_with_snapshot() {
    let mut m = mini();
    m.params.expect_mut("head.fc.bias").unwrap().data_mut()[0] = f64::NAN;
    let data = generate(&SyntheticSpec::two_class(32, 2, 3)).unwrap();
    match train_toy(
        &mut m,
        &data,
        &TrainOptions {
            steps: 3,
            batch: 4,
            lr: None,
        },
    ) {
        Err(Error::NonFinite { step, snapshot }) => {
            assert_eq!(step, 0);
            assert!(snapshot.contains("loss=NaN"), "{snapshot}");
        }
        other => panic!("expected non-finite abort, got {other:?}"),
    }
}

#[test]
fn learns_two_class_blobs() {
    let mut m = mini();
    let data = generate(&SyntheticSpec::two_class(32, 32, 4)).unwrap();
    let r = train_toy(
        &mut m,
        &data,
        &TrainOptions {
            steps: 100,
            batch: 16,
            lr: None,
        },
    )
    .unwrap();
    assert!(r.train_accuracy >= 0.95, "accuracy {}", r.train_accuracy);
}
