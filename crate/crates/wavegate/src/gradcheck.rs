//! Finite-difference gradient oracle.
//!
//! Independent of the backward pass by construction: it only ever calls the
//! forward builder, perturbing one leaf element at a time with central
//! differences. Always run at f64.

use crate::tensor::{Graph, Tensor, Var};

/// Default step and relative tolerance for the oracle.
pub const FD_STEP: f64 = 1e-5;
pub const FD_RTOL: f64 = 1e-4;

/// Builds a scalar loss from leaves already inserted in the graph.
pub type LossBuilder<'a> = &'a dyn Fn(&mut Graph<f64>, &[Var]) -> Var;

fn eval(build: LossBuilder, inputs: &[Tensor<f64>]) -> f64 {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone(), true)).collect();
    let root = build(&mut g, &vars);
    g.value(root).item()
}

/// Central-difference gradients of the loss w.r.t. every input element.
pub fn finite_diff_grads(
    build: LossBuilder,
    inputs: &[Tensor<f64>],
    h: f64,
) -> Vec<Tensor<f64>> {
    let mut grads = Vec::with_capacity(inputs.len());
    for (which, input) in inputs.iter().enumerate() {
        let mut g = Tensor::zeros(input.shape.clone());
        for i in 0..input.numel() {
            let mut plus = inputs.to_vec();
            plus[which].data[i] += h;
            let mut minus = inputs.to_vec();
            minus[which].data[i] -= h;
            g.data[i] = (eval(build, &plus) - eval(build, &minus)) / (2.0 * h);
        }
        grads.push(g);
    }
    grads
}

/// Analytic gradients from one backward pass, in input order.
pub fn analytic_grads(build: LossBuilder, inputs: &[Tensor<f64>]) -> Vec<Tensor<f64>> {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone(), true)).collect();
    let root = build(&mut g, &vars);
    g.backward(root).expect("backward failed in gradcheck");
    vars.iter()
        .zip(inputs)
        .map(|(&v, t)| g.grad(v).unwrap_or_else(|| Tensor::zeros(t.shape.clone())))
        .collect()
}

/// Largest relative discrepancy between analytic and finite-difference
/// gradients over all inputs and elements.
pub fn max_rel_error(build: LossBuilder, inputs: &[Tensor<f64>], h: f64) -> f64 {
    let ana = analytic_grads(build, inputs);
    let fd = finite_diff_grads(build, inputs, h);
    let mut worst: f64 = 0.0;
    for (a, f) in ana.iter().zip(&fd) {
        for (&x, &y) in a.data.iter().zip(&f.data) {
            let denom = x.abs().max(y.abs()).max(1e-3);
            worst = worst.max((x - y).abs() / denom);
        }
    }
    worst
}

/// Panics if the analytic gradients disagree with central differences.
pub fn assert_grads_close(build: LossBuilder, inputs: &[Tensor<f64>], h: f64, rtol: f64) {
    let err = max_rel_error(build, inputs, h);
    assert!(
        err <= rtol,
        "gradient check failed: max relative error {err:.3e} > {rtol:.1e}"
    );
}
