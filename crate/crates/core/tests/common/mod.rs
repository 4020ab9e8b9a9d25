#![allow(dead_code)]

pub mod op_cases;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use uniseg::{Graph, Tensor, Var};

pub const FD_STEP: f64 = 1e-5;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut r = rng(seed);
    Tensor::from_fn(shape, |_| r.random_range(-1.0..1.0))
}

/// Random values with `|v| >= margin`, for inputs fed straight into a kink.
pub fn random_away_from_zero(shape: &[usize], seed: u64, margin: f64) -> Tensor<f64> {
    let mut r = rng(seed);
    Tensor::from_fn(shape, |_| {
        let mag = r.random_range(margin..1.0);
        if r.random_bool(0.5) {
            mag
        } else {
            -mag
        }
    })
}

/// Element-wise relative error with a floor on the denominator so that
/// gradients that are zero on both sides count as exact.
pub fn rel_err(a: f64, n: f64) -> f64 {
    let den = a.abs().max(n.abs()).max(1e-8);
    (a - n).abs() / den
}

/// Evaluates `build` on fresh leaves and returns the scalar loss.
pub fn eval_loss<F>(build: &F, inputs: &[Tensor<f64>]) -> f64
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Var,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.variable(t.clone())).collect();
    let loss = build(&mut g, &vars);
    g.value(loss).data()[0]
}

/// Central finite-difference gradient of the loss w.r.t. every input element.
pub fn numeric_grads<F>(build: &F, inputs: &[Tensor<f64>], h: f64) -> Vec<Vec<f64>>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Var,
{
    let mut out = Vec::new();
    for i in 0..inputs.len() {
        let mut grad = vec![0.0; inputs[i].len()];
        for j in 0..inputs[i].len() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[j] += h;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[j] -= h;
            grad[j] = (eval_loss(build, &plus) - eval_loss(build, &minus)) / (2.0 * h);
        }
        out.push(grad);
    }
    out
}

pub fn analytic_grads<F>(build: &F, inputs: &[Tensor<f64>]) -> Vec<Vec<f64>>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Var,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.variable(t.clone())).collect();
    let loss = build(&mut g, &vars);
    let grads = g.backward(loss).unwrap();
    vars.iter()
        .zip(inputs)
        .map(|(&v, t)| grads.wrt(v).map(|s| s.to_vec()).unwrap_or_else(|| vec![0.0; t.len()]))
        .collect()
}

/// Maximum element-wise relative error between backward and central
/// differences over all inputs.
pub fn max_grad_error<F>(build: F, inputs: &[Tensor<f64>]) -> f64
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Var,
{
    let a = analytic_grads(&build, inputs);
    let n = numeric_grads(&build, inputs, FD_STEP);
    a.iter()
        .flatten()
        .zip(n.iter().flatten())
        .map(|(&x, &y)| rel_err(x, y))
        .fold(0.0, f64::max)
}

/// Projects an op output onto fixed random weights so every output element
/// contributes a distinct gradient.
pub fn project(g: &mut Graph<f64>, out: Var, seed: u64) -> Var {
    let r = random(g.value(out).shape(), seed);
    let rv = g.input(r);
    let m = g.mul(out, rv).unwrap();
    g.sum(m)
}
