//! Desk-scale cross-entropy training with Adam.

use std::collections::HashMap;

use super::Model;
use crate::data::{shuffled_indices, stack, Sample};
use crate::error::{Error, Result};
use crate::tensor::Graph;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainOptions {
    pub steps: usize,
    pub batch: usize,
    /// Overrides `cfg.train.lr` when set.
    pub lr: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainReport {
    /// Mean batch loss before each update.
    pub losses: Vec<f64>,
    /// Accuracy on the training set after the last step.
    pub train_accuracy: f64,
}

struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: i32,
    m: HashMap<String, Vec<f64>>,
    v: HashMap<String, Vec<f64>>,
}

impl Adam {
    fn step(&mut self, model: &mut Model, grads: &[(String, Vec<f64>)]) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t);
        let bc2 = 1.0 - self.beta2.powi(self.t);
        for (path, g) in grads {
            let m = self
                .m
                .entry(path.clone())
                .or_insert_with(|| vec![0.0; g.len()]);
            let v = self
                .v
                .entry(path.clone())
                .or_insert_with(|| vec![0.0; g.len()]);
            let p = model
                .params
                .get_mut(path)
                .expect("gradient for known parameter")
                .data_mut();
            for i in 0..g.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                p[i] -= self.lr * (m[i] / bc1) / ((v[i] / bc2).sqrt() + self.eps);
            }
        }
    }
}

/// Trains in place and returns the per-step loss curve.
///
/// With `batch >= data.len()` every step sees the full set in order, so the
/// curve is flat when `lr = 0`. Smaller batches walk seeded permutations.
pub fn train_toy(model: &mut Model, data: &[Sample], opts: &TrainOptions) -> Result<TrainReport> {
    if data.is_empty() {
        return Err(Error::Argument("empty training set".into()));
    }
    if opts.batch == 0 {
        return Err(Error::Argument("batch must be positive".into()));
    }
    let t = &model.cfg.train;
    let mut adam = Adam {
        lr: opts.lr.unwrap_or(t.lr),
        beta1: t.beta1,
        beta2: t.beta2,
        eps: t.eps,
        t: 0,
        m: HashMap::new(),
        v: HashMap::new(),
    };
    let full = opts.batch >= data.len();
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut cursor = data.len();
    let mut epoch = 0u64;
    let mut losses = Vec::with_capacity(opts.steps);
    for step in 0..opts.steps {
        let batch: Vec<&Sample> = if full {
            data.iter().collect()
        } else {
            if cursor + opts.batch > order.len() {
                order = shuffled_indices(
                    data.len(),
                    model.cfg.seed ^ epoch.wrapping_mul(0x9e37_79b9_7f4a_7c15),
                );
                epoch += 1;
                cursor = 0;
            }
            let b = order[cursor..cursor + opts.batch]
                .iter()
                .map(|&i| &data[i])
                .collect();
            cursor += opts.batch;
            b
        };
        let (x, labels) = stack(&batch)?;
        let mut g = Graph::new();
        let xv = g.input(x);
        let logits = model.forward_graph(&mut g, &model.params, xv)?;
        let loss = g.cross_entropy(logits, &labels)?;
        let value = g.value(loss).data()[0];
        if !value.is_finite() {
            let max_param = model
                .params
                .iter()
                .flat_map(|(_, t)| t.data().iter())
                .fold(0.0f64, |a, v| a.max(v.abs()));
            return Err(Error::NonFinite {
                step,
                snapshot: format!(
                    "loss={value} previous={:?} max|param|={max_param:.3e} batch={}",
                    losses.last(),
                    batch.len()
                ),
            });
        }
        losses.push(value);
        g.backward(loss)?;
        let grads = g.param_grads();
        adam.step(model, &grads);
    }
    let train_accuracy = accuracy(model, data)?;
    Ok(TrainReport {
        losses,
        train_accuracy,
    })
}

/// Fraction of samples whose argmax logit equals the label.
pub fn accuracy(model: &Model, data: &[Sample]) -> Result<f64> {
    let mut correct = 0usize;
    for chunk in data.chunks(64) {
        let refs: Vec<&Sample> = chunk.iter().collect();
        let (x, labels) = stack(&refs)?;
        let logits = model.forward(&x)?;
        let k = model.classes();
        for (row, label) in logits.data().chunks(k).zip(labels) {
            if argmax(row) == label {
                correct += 1;
            }
        }
    }
    Ok(correct as f64 / data.len() as f64)
}

pub fn argmax(row: &[f64]) -> usize {
    row.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &v)| {
            if v > bv {
                (i, v)
            } else {
                (bi, bv)
            }
        })
        .0
}

/// Mean cross-entropy of `model` on one batch, parameters read from `model.params`.
pub fn batch_loss(model: &Model, x: &crate::Tensor, labels: &[usize]) -> Result<f64> {
    let mut g = Graph::inference();
    let xv = g.input(x.clone());
    let logits = model.forward_graph(&mut g, &model.params, xv)?;
    let loss = g.cross_entropy(logits, labels)?;
    Ok(g.value(loss).data()[0])
}

/// Compares backward gradients of the batch loss against central
/// differences on `count` randomly chosen scalar parameters. Entries whose
/// differences at `eps` and `eps / 10` disagree sit on a ReLU kink and are
/// skipped. Returns the worst relative error and the number of entries checked.
pub fn param_gradcheck(
    model: &mut Model,
    x: &crate::Tensor,
    labels: &[usize],
    count: usize,
    eps: f64,
    seed: u64,
) -> Result<(f64, usize)> {
    use crate::tensor::gradcheck::rel_error;
    use rand::{Rng, SeedableRng};

    let mut g = Graph::new();
    let xv = g.input(x.clone());
    let logits = model.forward_graph(&mut g, &model.params, xv)?;
    let loss = g.cross_entropy(logits, labels)?;
    g.backward(loss)?;
    let grads: HashMap<String, Vec<f64>> = g.param_grads().into_iter().collect();

    let paths: Vec<String> = model.params.paths().map(str::to_string).collect();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let central = |model: &mut Model, path: &str, i: usize, h: f64| -> Result<f64> {
        let orig = model.params.expect(path)?.data()[i];
        model.params.expect_mut(path)?.data_mut()[i] = orig + h;
        let up = batch_loss(model, x, labels);
        model.params.expect_mut(path)?.data_mut()[i] = orig - h;
        let down = batch_loss(model, x, labels);
        model.params.expect_mut(path)?.data_mut()[i] = orig;
        Ok((up? - down?) / (2.0 * h))
    };
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    for _ in 0..count {
        let path = &paths[rng.gen_range(0..paths.len())];
        let i = rng.gen_range(0..model.params.expect(path)?.numel());
        let coarse = central(model, path, i, eps)?;
        let fine = central(model, path, i, eps / 10.0)?;
        if rel_error(coarse, fine) > 1e-4 {
            continue;
        }
        checked += 1;
        worst = worst.max(rel_error(grads[path][i], coarse));
    }
    Ok((worst, checked))
}
