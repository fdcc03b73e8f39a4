//! Central finite differences and the randomized gradient-check suite used by
//! the `gradcheck` subcommand.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autograd::Graph;
use crate::error::{Error, Result};
use crate::nn::Model;
use crate::tensor::Tensor;

/// `(f(x + h·e_i) − f(x − h·e_i)) / 2h` for every coordinate `i`.
pub fn finite_difference_gradient(mut f: impl FnMut(&Tensor) -> f64, x: &Tensor, h: f64) -> Result<Tensor> {
    if !(h > 0.0) {
        return Err(Error::input(format!("finite-difference step must be positive, got {h}")));
    }
    let mut probe = x.clone();
    let mut grad = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = probe.values()[i];
        probe.values_mut()[i] = orig + h;
        let plus = f(&probe);
        probe.values_mut()[i] = orig - h;
        let minus = f(&probe);
        probe.values_mut()[i] = orig;
        grad.push((plus - minus) / (2.0 * h));
    }
    Tensor::new(x.shape().to_vec(), grad)
}

/// Largest `|a − b| / max(|a|, |b|, floor)` over paired entries.
pub fn max_relative_error(a: &[f64], b: &[f64], floor: f64) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(floor))
        .fold(0.0, f64::max)
}

/// Denominator floor for relative errors: gradients smaller than this are
/// compared absolutely.
pub const RELATIVE_FLOOR: f64 = 1e-2;

#[derive(Clone, Debug, Serialize)]
pub struct GradCheckCase {
    pub kind: &'static str,
    pub seed: u64,
    pub num_params: usize,
    pub max_rel_error_params: f64,
    pub max_rel_error_input: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct GradCheckReport {
    pub step: f64,
    pub tolerance: f64,
    pub cases: Vec<GradCheckCase>,
    pub max_rel_error: f64,
    pub passed: bool,
}

/// Cross-entropy of `model` on `(x, labels)` as a plain function of its flat
/// parameter vector, for finite differencing.
fn loss_at(model: &Model, x: &Tensor, labels: &[usize]) -> f64 {
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let out = model.forward(&mut g, xv, false).expect("shapes validated");
    let l = g.cross_entropy(out.logits, labels).expect("labels validated");
    g.value(l).values()[0]
}

fn set_flat(model: &mut Model, flat: &[f64]) {
    let mut off = 0;
    for p in model.params_mut() {
        let n = p.len();
        p.values_mut().copy_from_slice(&flat[off..off + n]);
        off += n;
    }
}

fn flat_params(model: &Model) -> Tensor {
    Tensor::from_vec(model.params().flat_map(|p| p.values().iter().copied()).collect())
}

/// Compares backward() against central differences for one model instance,
/// on both parameters and input.
pub fn check_model(model: &Model, x: &Tensor, labels: &[usize], h: f64) -> Result<(f64, f64)> {
    let mut g = Graph::new();
    let xv = g.leaf(x.clone().with_requires_grad(true));
    let out = model.forward(&mut g, xv, true)?;
    let loss = g.cross_entropy(out.logits, labels)?;
    g.backward(loss)?;
    let analytic_params: Vec<f64> = out
        .params
        .iter()
        .flat_map(|&v| g.grad(v).expect("tracked").to_vec())
        .collect();
    let analytic_input = g.grad(xv).expect("tracked").to_vec();

    let mut probe = model.clone();
    let fd_params = finite_difference_gradient(
        |flat| {
            set_flat(&mut probe, flat.values());
            loss_at(&probe, x, labels)
        },
        &flat_params(model),
        h,
    )?;
    let fd_input = finite_difference_gradient(|xi| loss_at(model, xi, labels), x, h)?;
    Ok((
        max_relative_error(&analytic_params, fd_params.values(), RELATIVE_FLOOR),
        max_relative_error(&analytic_input, fd_input.values(), RELATIVE_FLOOR),
    ))
}

/// Draws a random small MLP or CNN with inputs kept clear of ReLU kinks by
/// more than `100·h`.
fn random_instance(kind: &str, seed: u64, h: f64) -> Result<(Model, Tensor, Vec<usize>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let classes = rng.random_range(2..=4);
    let batch = rng.random_range(1..=3);
    for attempt in 0u64..64 {
        let model_seed = seed.wrapping_mul(31).wrapping_add(attempt);
        let (model, shape) = if kind == "mlp" {
            let d = rng.random_range(3..=8);
            let hidden = [rng.random_range(4..=16), rng.random_range(4..=12)];
            (Model::mlp(&[d], &hidden, classes, model_seed)?, vec![d])
        } else {
            let c = rng.random_range(1..=2);
            let side = rng.random_range(3..=5);
            let channels = [rng.random_range(2..=4), rng.random_range(2..=4)];
            (Model::cnn(&[c, side, side], &channels, classes, model_seed)?, vec![c, side, side])
        };
        let n: usize = batch * shape.iter().product::<usize>();
        let x = Tensor::new(
            [vec![batch], shape].concat(),
            (0..n).map(|_| rng.random_range(0.0..1.0)).collect(),
        )?;
        let labels: Vec<usize> = (0..batch).map(|_| rng.random_range(0..classes)).collect();
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        model.forward(&mut g, xv, false)?;
        // parameter perturbations move pre-activations by at most h·|input|
        if g.min_relu_input_magnitude() > 100.0 * h {
            return Ok((model, x, labels));
        }
    }
    Err(Error::input(format!("no kink-free {kind} instance found for seed {seed}")))
}

/// Runs `trials` MLP and `trials` CNN instances starting at `seed`.
pub fn run_suite(trials: usize, seed: u64, h: f64, tolerance: f64) -> Result<GradCheckReport> {
    let mut cases = Vec::new();
    for kind in ["mlp", "cnn"] {
        for t in 0..trials as u64 {
            let case_seed = seed.wrapping_add(t).wrapping_add(if kind == "cnn" { 1 << 32 } else { 0 });
            let (model, x, labels) = random_instance(kind, case_seed, h)?;
            let (p, i) = check_model(&model, &x, &labels, h)?;
            cases.push(GradCheckCase {
                kind,
                seed: case_seed,
                num_params: model.num_params(),
                max_rel_error_params: p,
                max_rel_error_input: i,
            });
        }
    }
    let max_rel_error = cases
        .iter()
        .map(|c| c.max_rel_error_params.max(c.max_rel_error_input))
        .fold(0.0, f64::max);
    Ok(GradCheckReport {
        step: h,
        tolerance,
        passed: max_rel_error < tolerance,
        cases,
        max_rel_error,
    })
}
