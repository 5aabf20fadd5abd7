//! Central-difference gradient oracle.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{numel, Graph, Tensor, Var};
use crate::error::Result;

/// Denominator floor for [`rel_error`]; keeps exact-zero gradients from
/// turning rounding noise into huge relative errors.
pub const REL_ERROR_FLOOR: f64 = 1e-6;

/// Central-difference estimate of `df/dx`, one element at a time.
pub fn finite_diff_grad(f: impl Fn(&Tensor) -> f64, x: &Tensor, eps: f64) -> Tensor {
    assert!(eps > 0.0, "eps must be positive");
    let mut probe = x.clone();
    let mut grad = Tensor::zeros(x.shape());
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let up = f(&probe);
        probe.data_mut()[i] = orig - eps;
        let down = f(&probe);
        probe.data_mut()[i] = orig;
        grad.data_mut()[i] = (up - down) / (2.0 * eps);
    }
    grad
}

/// `|a - b| / max(|a|, |b|, REL_ERROR_FLOOR)`.
pub fn rel_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(REL_ERROR_FLOOR)
}

/// Largest [`rel_error`] over paired elements.
pub fn max_rel_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, b)| rel_error(*a, *b))
        .fold(0.0, f64::max)
}

/// Checks reverse-mode gradients of a graph-built function against central
/// differences, for every element of every input.
///
/// The output is reduced to a scalar by a fixed random projection scaled by
/// `1/sqrt(numel)`. Returns the worst relative error across all inputs.
pub fn check_gradients(
    inputs: &[Tensor],
    eps: f64,
    build: impl Fn(&mut Graph, &[Var]) -> Result<Var>,
) -> Result<f64> {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
    let out = build(&mut g, &vars)?;
    let shape = out.shape();
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    let proj = Tensor::uniform(shape, 1.0 / (numel(&shape) as f64).sqrt(), &mut rng);
    let p = g.input(proj.clone());
    let weighted = g.mul(out, p)?;
    let loss = g.sum(weighted);
    g.backward(loss)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .map(|v| {
            g.grad(*v)
                .map(<[f64]>::to_vec)
                .unwrap_or_else(|| vec![0.0; numel(&v.shape())])
        })
        .collect();

    let eval = |which: usize, t: &Tensor| -> f64 {
        let mut g = Graph::inference();
        let vars: Vec<Var> = inputs
            .iter()
            .enumerate()
            .map(|(i, orig)| g.input(if i == which { t.clone() } else { orig.clone() }))
            .collect();
        let out = build(&mut g, &vars).expect("function evaluated once already");
        g.value(out)
            .data()
            .iter()
            .zip(proj.data())
            .map(|(a, b)| a * b)
            .sum()
    };

    let mut worst: f64 = 0.0;
    for (i, x) in inputs.iter().enumerate() {
        let numeric = finite_diff_grad(|t| eval(i, t), x, eps);
        worst = worst.max(max_rel_error(&analytic[i], numeric.data()));
    }
    Ok(worst)
}
