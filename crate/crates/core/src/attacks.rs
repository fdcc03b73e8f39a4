//! L∞ sign-gradient attacks against a single member or the averaged ensemble.
//!
//! Every attack keeps its iterate inside `B_ε(x) ∩ [0,1]^d`. The ensemble
//! objective is the negative log of the averaged member softmax at the true
//! label; CW replaces it with the clipped logit margin, using log-averaged
//! probabilities as the ensemble's scores.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::ensemble::{ensemble_predict, model_predict};
use crate::error::{Error, Result};
use crate::nn::Model;
use crate::tensor::{sign, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttackKind {
    Fgsm,
    Pgd,
    Mim,
    Cw,
}

impl AttackKind {
    pub fn name(self) -> &'static str {
        match self {
            AttackKind::Fgsm => "fgsm",
            AttackKind::Pgd => "pgd",
            AttackKind::Mim => "mim",
            AttackKind::Cw => "cw",
        }
    }
}

impl FromStr for AttackKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fgsm" => Ok(AttackKind::Fgsm),
            "pgd" => Ok(AttackKind::Pgd),
            "mim" => Ok(AttackKind::Mim),
            "cw" => Ok(AttackKind::Cw),
            other => Err(Error::config(format!("unknown attack `{other}` (fgsm, pgd, mim, cw)"))),
        }
    }
}

impl fmt::Display for AttackKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttackTarget {
    Ensemble,
    Member(usize),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackSpec {
    pub kind: AttackKind,
    pub epsilon: f64,
    pub alpha: f64,
    pub steps: usize,
    pub random_start: bool,
    pub mim_decay: f64,
    pub cw_kappa: f64,
    pub target: AttackTarget,
}

/// L∞ radius used for evaluation and training, on the [0,1] pixel scale.
pub const EVAL_EPSILON: f64 = 0.031;
pub const EVAL_STEP: f64 = 0.007;
pub const EVAL_STEPS: usize = 20;

impl AttackSpec {
    pub fn new(kind: AttackKind, epsilon: f64, alpha: f64, steps: usize) -> Self {
        Self {
            kind,
            epsilon,
            alpha,
            steps,
            random_start: matches!(kind, AttackKind::Pgd | AttackKind::Cw) && epsilon > 0.0,
            mim_decay: 1.0,
            cw_kappa: 0.0,
            target: AttackTarget::Ensemble,
        }
        .normalized()
    }

    pub fn fgsm(epsilon: f64) -> Self {
        Self::new(AttackKind::Fgsm, epsilon, epsilon, 1)
    }

    /// The 20-step evaluation attacks (ε = 0.031, step 0.007).
    pub fn evaluation(kind: AttackKind) -> Self {
        match kind {
            AttackKind::Fgsm => Self::fgsm(EVAL_EPSILON),
            _ => Self::new(kind, EVAL_EPSILON, EVAL_STEP, EVAL_STEPS),
        }
    }

    /// PGD-10, ε = 0.031, α = 0.0078, random start.
    pub fn training_default() -> Self {
        Self::new(AttackKind::Pgd, EVAL_EPSILON, 0.0078, 10)
    }

    pub fn with_target(mut self, target: AttackTarget) -> Self {
        self.target = target;
        self
    }

    pub fn with_random_start(mut self, on: bool) -> Self {
        self.random_start = on;
        self.normalized()
    }

    /// FGSM is a single full-radius step without random start.
    pub fn normalized(mut self) -> Self {
        if self.kind == AttackKind::Fgsm {
            self.steps = 1;
            self.alpha = self.epsilon;
            self.random_start = false;
        }
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon >= 0.0 && self.epsilon.is_finite()) {
            return Err(Error::config(format!("attack epsilon must be finite and >= 0, got {}", self.epsilon)));
        }
        if self.steps == 0 {
            return Err(Error::config("attack steps must be at least 1"));
        }
        if self.kind != AttackKind::Fgsm && !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(Error::config(format!("attack step size must be positive, got {}", self.alpha)));
        }
        if !(self.mim_decay >= 0.0 && self.mim_decay.is_finite()) {
            return Err(Error::config(format!("mim decay must be >= 0, got {}", self.mim_decay)));
        }
        if !(self.cw_kappa >= 0.0 && self.cw_kappa.is_finite()) {
            return Err(Error::config(format!("cw kappa must be >= 0, got {}", self.cw_kappa)));
        }
        Ok(())
    }
}

/// Adversarial inputs together with the spec that produced them.
#[derive(Clone, Debug)]
pub struct AdvBatch {
    pub x_adv: Tensor,
    pub generator: AttackSpec,
}

#[derive(Clone, Copy, Debug)]
enum Objective {
    CrossEntropy,
    Margin { kappa: f64 },
}

fn check_target(members: &[Model], target: AttackTarget) -> Result<()> {
    match target {
        AttackTarget::Ensemble if members.is_empty() => Err(Error::input("attack against an empty ensemble")),
        AttackTarget::Member(m) if m >= members.len() => Err(Error::input(format!(
            "attack target member {m} out of range for {} members",
            members.len()
        ))),
        _ => Ok(()),
    }
}

/// Per-row class scores whose margin CW works on, and the loss that PGD-style
/// attacks ascend.
fn objective_value(g: &mut Graph, members: &[Model], target: AttackTarget, x: Var, y: &[usize], obj: Objective) -> Result<Var> {
    match target {
        AttackTarget::Member(m) => {
            let logits = members[m].forward(g, x, false)?.logits;
            match obj {
                Objective::CrossEntropy => g.cross_entropy(logits, y),
                Objective::Margin { kappa } => neg_clipped_margin(g, logits, y, kappa),
            }
        }
        AttackTarget::Ensemble => {
            let mut avg: Option<Var> = None;
            for model in members {
                let logits = model.forward(g, x, false)?.logits;
                let p = g.softmax(logits)?;
                avg = Some(match avg {
                    None => p,
                    Some(acc) => g.add(acc, p)?,
                });
            }
            let sum = avg.expect("non-empty members");
            let avg = g.scale(sum, 1.0 / members.len() as f64);
            match obj {
                Objective::CrossEntropy => {
                    let py = g.pick(avg, y)?;
                    let logp = g.log(py);
                    let mean = g.mean(logp, None)?;
                    Ok(g.scale(mean, -1.0))
                }
                Objective::Margin { kappa } => {
                    let scores = g.log(avg);
                    neg_clipped_margin(g, scores, y, kappa)
                }
            }
        }
    }
}

/// `−Σ max(s_y − max_{j≠y} s_j, −κ)`; ascending it pushes the true class down.
fn neg_clipped_margin(g: &mut Graph, scores: Var, y: &[usize], kappa: f64) -> Result<Var> {
    let m = g.margin(scores, y)?;
    let clipped = g.clamp_min(m, -kappa);
    let total = g.sum(clipped, None)?;
    Ok(g.scale(total, -1.0))
}

fn objective_grad(members: &[Model], target: AttackTarget, x: &Tensor, y: &[usize], obj: Objective) -> Result<Tensor> {
    check_target(members, target)?;
    let mut g = Graph::new();
    let xv = g.leaf(x.clone().with_requires_grad(true));
    let loss = objective_value(&mut g, members, target, xv, y, obj)?;
    g.backward(loss)?;
    let grad = g.take_grad(xv).unwrap_or_else(|| vec![0.0; x.len()]);
    Tensor::new(x.shape().to_vec(), grad)
}

/// Value of the attack objective at `x` (cross-entropy or ensemble NLL).
pub fn attack_loss(members: &[Model], target: AttackTarget, x: &Tensor, y: &[usize]) -> Result<f64> {
    check_target(members, target)?;
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let loss = objective_value(&mut g, members, target, xv, y, Objective::CrossEntropy)?;
    g.value(loss).item()
}

/// `∇_x` of the cross-entropy (single member) or of the ensemble NLL.
/// Parameters are inserted as constants and receive no gradient.
pub fn loss_grad_wrt_input(members: &[Model], target: AttackTarget, x: &Tensor, y: &[usize]) -> Result<Tensor> {
    objective_grad(members, target, x, y, Objective::CrossEntropy)
}

fn project(v: f64, clean: f64, eps: f64) -> f64 {
    v.clamp(clean - eps, clean + eps).clamp(0.0, 1.0)
}

/// One full-radius signed step: `clip_[0,1](x + ε·sign(∇))`.
pub fn fgsm(members: &[Model], x: &Tensor, y: &[usize], spec: &AttackSpec) -> Result<AdvBatch> {
    spec.validate()?;
    let spec = spec.clone().normalized();
    let grad = loss_grad_wrt_input(members, spec.target, x, y)?;
    let values = x
        .values()
        .iter()
        .zip(grad.values())
        .map(|(&xi, &gi)| (xi + spec.epsilon * sign(gi)).clamp(0.0, 1.0))
        .collect();
    Ok(AdvBatch {
        x_adv: Tensor::new(x.shape().to_vec(), values)?,
        generator: spec,
    })
}

fn random_start(x: &Tensor, eps: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let mut out = x.clone();
    for (v, &c) in out.values_mut().iter_mut().zip(x.values()) {
        *v = project(c + rng.random_range(-eps..=eps), c, eps);
    }
    out
}

/// Shared iteration for PGD, MIM and CW.
fn iterate(members: &[Model], x: &Tensor, y: &[usize], spec: &AttackSpec, seed: u64, obj: Objective, momentum: Option<f64>) -> Result<AdvBatch> {
    spec.validate()?;
    check_target(members, spec.target)?;
    let eps = spec.epsilon;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x_adv = if spec.random_start && eps > 0.0 {
        random_start(x, eps, &mut rng)
    } else {
        x.clone()
    };
    let width = x.row_width().max(1);
    let mut accum = vec![0.0; x.len()];
    for _ in 0..spec.steps {
        let grad = objective_grad(members, spec.target, &x_adv, y, obj)?;
        let direction: &[f64] = match momentum {
            None => grad.values(),
            Some(decay) => {
                for (acc_row, g_row) in accum.chunks_exact_mut(width).zip(grad.values().chunks_exact(width)) {
                    let l1: f64 = g_row.iter().map(|v| v.abs()).sum();
                    for (a, &gv) in acc_row.iter_mut().zip(g_row) {
                        let normalized = if l1 > 0.0 { gv / l1 } else { 0.0 };
                        *a = decay * *a + normalized;
                    }
                }
                &accum
            }
        };
        for ((v, &c), &d) in x_adv.values_mut().iter_mut().zip(x.values()).zip(direction) {
            *v = project(*v + spec.alpha * sign(d), c, eps);
        }
    }
    Ok(AdvBatch {
        x_adv,
        generator: spec.clone(),
    })
}

/// Projected sign-gradient ascent on the cross-entropy / ensemble NLL.
pub fn pgd(members: &[Model], x: &Tensor, y: &[usize], spec: &AttackSpec, seed: u64) -> Result<AdvBatch> {
    iterate(members, x, y, spec, seed, Objective::CrossEntropy, None)
}

/// Momentum iterative method: `g ← decay·g + ∇/‖∇‖₁` per sample, step `α·sign(g)`.
pub fn mim(members: &[Model], x: &Tensor, y: &[usize], spec: &AttackSpec, seed: u64) -> Result<AdvBatch> {
    iterate(members, x, y, spec, seed, Objective::CrossEntropy, Some(spec.mim_decay))
}

/// L∞ PGD on the margin `max(z_y − max_{j≠y} z_j, −κ)`, driving it down.
pub fn cw_attack(members: &[Model], x: &Tensor, y: &[usize], spec: &AttackSpec, seed: u64) -> Result<AdvBatch> {
    let k = members.first().map(Model::num_classes).unwrap_or(0);
    if k < 2 {
        return Err(Error::input("cw attack needs at least two classes"));
    }
    iterate(members, x, y, spec, seed, Objective::Margin { kappa: spec.cw_kappa }, None)
}

pub fn run_attack(members: &[Model], x: &Tensor, y: &[usize], spec: &AttackSpec, seed: u64) -> Result<AdvBatch> {
    match spec.kind {
        AttackKind::Fgsm => fgsm(members, x, y, spec),
        AttackKind::Pgd => pgd(members, x, y, spec, seed),
        AttackKind::Mim => mim(members, x, y, spec, seed),
        AttackKind::Cw => cw_attack(members, x, y, spec, seed),
    }
}

/// Predictions of the evaluated target (a member or the averaged ensemble).
pub fn target_predict(members: &[Model], target: AttackTarget, x: &Tensor) -> Result<Vec<usize>> {
    check_target(members, target)?;
    match target {
        AttackTarget::Ensemble => ensemble_predict(members, x),
        AttackTarget::Member(m) => model_predict(&members[m], x),
    }
}

/// Fraction of samples whose prediction under `target` differs from `y`.
pub fn attack_success_rate(members: &[Model], target: AttackTarget, adv: &AdvBatch, y: &[usize]) -> Result<f64> {
    let pred = target_predict(members, target, &adv.x_adv)?;
    if pred.is_empty() {
        return Ok(0.0);
    }
    Ok(pred.iter().zip(y).filter(|(p, t)| p != t).count() as f64 / pred.len() as f64)
}

/// `‖a − b‖∞`.
pub fn linf_distance(a: &Tensor, b: &Tensor) -> f64 {
    a.max_abs_diff(b)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{finite_difference_gradient, max_relative_error};
    use crate::nn::Layer;
    use crate::tensor::softmax_rows;
    use proptest::prelude::{any, prop_assert, proptest, ProptestConfig};

    fn linear(weight: Vec<f64>, bias: Vec<f64>, d: usize, k: usize) -> Model {
        Model::from_layers(
            vec![
                Layer::Flatten,
                Layer::Dense {
                    weight: Tensor::new(vec![d, k], weight).unwrap(),
                    bias: Tensor::from_vec(bias),
                },
            ],
            vec![d],
            k,
        )
        .unwrap()
    }

    fn sample_batch(seed: u64, n: usize, d: usize) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::new(vec![n, d], (0..n * d).map(|_| rng.random_range(0.2..0.8)).collect()).unwrap()
    }

    #[test]
    fn linear_gradient_closed_form() {
        // logits = x·W (W is d×k), so ∇_x CE = W·(p − onehot) / N
        let (d, k) = (3, 2);
        let w = vec![0.5, -1.0, 2.0, 0.3, -0.7, 1.1];
        let m = linear(w.clone(), vec![0.0; k], d, k);
        let x = sample_batch(1, 2, d);
        let y = [1, 0];
        let grad = loss_grad_wrt_input(&[m.clone()], AttackTarget::Member(0), &x, &y).unwrap();
        let logits = m.logits(&x).unwrap();
        let p = softmax_rows(logits.values(), k);
        for n in 0..2 {
            for i in 0..d {
                let mut expect = 0.0;
                for c in 0..k {
                    let onehot = if c == y[n] { 1.0 } else { 0.0 };
                    expect += w[i * k + c] * (p[n * k + c] - onehot);
                }
                assert!((grad.values()[n * d + i] - expect / 2.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn identical_members_match_single_model() {
        let m = Model::mlp(&[4], &[6], 3, 7).unwrap();
        let x = sample_batch(2, 5, 4);
        let y = [0, 1, 2, 1, 0];
        let single = loss_grad_wrt_input(&[m.clone()], AttackTarget::Member(0), &x, &y).unwrap();
        let ens = loss_grad_wrt_input(&[m.clone(), m.clone(), m], AttackTarget::Ensemble, &x, &y).unwrap();
        assert!(max_relative_error(single.values(), ens.values(), 1e-12) < 1e-9);
    }

    #[test]
    fn input_gradient_matches_finite_differences() {
        let members: Vec<Model> = (0..3).map(|s| Model::mlp(&[5], &[7], 3, 20 + s).unwrap()).collect();
        let x = sample_batch(3, 4, 5);
        let y = [2, 0, 1, 1];
        for target in [AttackTarget::Ensemble, AttackTarget::Member(1)] {
            let grad = loss_grad_wrt_input(&members, target, &x, &y).unwrap();
            let fd = finite_difference_gradient(|t| attack_loss(&members, target, t, &y).unwrap(), &x, 1e-5).unwrap();
            assert!(max_relative_error(grad.values(), fd.values(), 1e-2) < 1e-4);
        }
    }

    #[test]
    fn zero_budget_is_identity() {
        let members: Vec<Model> = (0..2).map(|s| Model::mlp(&[4], &[5], 3, s).unwrap()).collect();
        let x = sample_batch(4, 3, 4);
        let y = [0, 1, 2];
        for kind in [AttackKind::Fgsm, AttackKind::Pgd, AttackKind::Mim, AttackKind::Cw] {
            let spec = AttackSpec::new(kind, 0.0, 0.01, 7).with_random_start(true);
            let adv = run_attack(&members, &x, &y, &spec, 1).unwrap();
            assert_eq!(adv.x_adv.values(), x.values(), "{kind}");
        }
    }

    #[test]
    fn fgsm_positive_gradient_direction() {
        // logits = [0, Σx]: for label 0 the loss grows with every coordinate
        let m = linear(vec![0.0, 1.0, 0.0, 1.0], vec![0.0, 0.0], 2, 2);
        let x = Tensor::new(vec![1, 2], vec![0.5, 0.99]).unwrap();
        let adv = fgsm(&[m], &x, &[0], &AttackSpec::fgsm(0.05)).unwrap();
        assert_eq!(adv.x_adv.values(), &[0.55, 1.0]);
    }

    #[test]
    fn fgsm_equals_single_step_pgd() {
        let members: Vec<Model> = (0..3).map(|s| Model::mlp(&[6], &[5], 4, s).unwrap()).collect();
        let x = sample_batch(5, 8, 6);
        let y = [0, 1, 2, 3, 0, 1, 2, 3];
        let f = fgsm(&members, &x, &y, &AttackSpec::fgsm(0.03)).unwrap();
        let mut spec = AttackSpec::new(AttackKind::Pgd, 0.03, 0.03, 1);
        spec.random_start = false;
        let p = pgd(&members, &x, &y, &spec, 9).unwrap();
        let bits = |t: &Tensor| t.values().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&f.x_adv), bits(&p.x_adv));
    }

    #[test]
    fn pgd_displacement_is_min_of_steps_and_budget() {
        // one input, logits [0, x]: label 0 ascent always increases x
        let m = linear(vec![0.0, 1.0], vec![0.0, 0.0], 1, 2);
        let x = Tensor::new(vec![1, 1], vec![0.4]).unwrap();
        for k in 1..=6 {
            let mut spec = AttackSpec::new(AttackKind::Pgd, 0.031, 0.007, k);
            spec.random_start = false;
            let adv = pgd(&[m.clone()], &x, &[0], &spec, 0).unwrap();
            let disp = adv.x_adv.values()[0] - 0.4;
            assert!((disp - (k as f64 * 0.007).min(0.031)).abs() < 1e-12, "k={k} disp={disp}");
        }
    }

    #[test]
    fn mim_decay_zero_matches_pgd() {
        let members: Vec<Model> = (0..3).map(|s| Model::mlp(&[6], &[5], 4, 40 + s).unwrap()).collect();
        let x = sample_batch(6, 5, 6);
        let y = [3, 1, 0, 2, 2];
        let mut spec = AttackSpec::new(AttackKind::Mim, 0.05, 0.01, 8);
        spec.mim_decay = 0.0;
        let a = mim(&members, &x, &y, &spec, 3).unwrap();
        spec.kind = AttackKind::Pgd;
        spec.random_start = false;
        let b = pgd(&members, &x, &y, &spec, 3).unwrap();
        assert_eq!(a.x_adv.values(), b.x_adv.values());
    }

    #[test]
    fn mim_two_step_trace() {
        // logits = [0, 2x0 − x1]; label 0 ⇒ ∇_x CE = p1·(2, −1)
        let m = linear(vec![0.0, 2.0, 0.0, -1.0], vec![0.0, 0.0], 2, 2);
        let x = Tensor::new(vec![1, 2], vec![0.5, 0.5]).unwrap();
        let mut spec = AttackSpec::new(AttackKind::Mim, 0.1, 0.03, 2);
        spec.mim_decay = 1.0;
        let adv = mim(&[m], &x, &[0], &spec, 0).unwrap();
        // normalized gradient is (2/3, −1/3) at every step; accumulator keeps
        // its sign, so both coordinates move 2α in their sign direction
        assert!((adv.x_adv.values()[0] - 0.56).abs() < 1e-12);
        assert!((adv.x_adv.values()[1] - 0.44).abs() < 1e-12);
    }

    #[test]
    fn cw_linear_boundary_crossing() {
        // two classes, logits z = x·W; margin = Δw·x with Δw = w0 − w1
        let (d, k) = (4, 2);
        let w = vec![1.0, -0.5, 0.2, 0.4, -0.3, 0.3, 0.6, 0.1];
        let m = linear(w.clone(), vec![0.0; k], d, k);
        let x = Tensor::new(vec![1, d], vec![0.5, 0.45, 0.55, 0.5]).unwrap();
        let dw: Vec<f64> = (0..d).map(|i| w[i * k] - w[i * k + 1]).collect();
        let margin: f64 = dw.iter().zip(x.values()).map(|(a, b)| a * b).sum();
        assert!(margin > 0.0);
        let l1: f64 = dw.iter().map(|v| v.abs()).sum();
        let threshold = margin / l1;
        for eps in [0.5 * threshold, 0.9 * threshold, 1.1 * threshold, 2.0 * threshold] {
            let mut spec = AttackSpec::new(AttackKind::Cw, eps, eps / 4.0, 12);
            spec.random_start = false;
            let adv = cw_attack(&[m.clone()], &x, &[0], &spec, 0).unwrap();
            let crossed = model_predict(&m, &adv.x_adv).unwrap()[0] != 0;
            assert_eq!(crossed, eps > threshold, "eps {eps} threshold {threshold}");
        }
        let single = linear(vec![1.0], vec![0.0], 1, 1);
        assert!(cw_attack(&[single], &Tensor::zeros(&[1, 1]), &[0], &AttackSpec::evaluation(AttackKind::Cw), 0).is_err());
    }

    #[test]
    fn success_rate_cases() {
        let m = linear(vec![1.0, 0.0, 0.0, 1.0], vec![0.0, 0.0], 2, 2);
        let x = Tensor::new(vec![2, 2], vec![0.9, 0.1, 0.1, 0.9]).unwrap();
        let clean = AdvBatch { x_adv: x.clone(), generator: AttackSpec::fgsm(0.0) };
        let members = [m.clone(), m];
        assert_eq!(attack_success_rate(&members, AttackTarget::Ensemble, &clean, &[0, 1]).unwrap(), 0.0);
        assert_eq!(attack_success_rate(&members, AttackTarget::Ensemble, &clean, &[1, 0]).unwrap(), 1.0);
    }

    #[test]
    fn attacks_leave_parameters_untouched() {
        let members: Vec<Model> = (0..3).map(|s| Model::mlp(&[6], &[5], 4, s).unwrap()).collect();
        let before: Vec<u64> = members.iter().map(Model::checksum).collect();
        let x = sample_batch(7, 4, 6);
        for kind in [AttackKind::Fgsm, AttackKind::Pgd, AttackKind::Mim, AttackKind::Cw] {
            run_attack(&members, &x, &[0, 1, 2, 3], &AttackSpec::evaluation(kind), 5).unwrap();
        }
        let after: Vec<u64> = members.iter().map(Model::checksum).collect();
        assert_eq!(before, after);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn ball_and_box_invariant(
            kind in 0usize..4,
            eps in 0.0f64..0.1,
            alpha in 0.001f64..0.05,
            steps in 1usize..6,
            seed in any::<u64>(),
            target in 0usize..3,
        ) {
            let members: Vec<Model> = (0..2).map(|s| Model::mlp(&[5], &[4], 3, s).unwrap()).collect();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = Tensor::new(vec![3, 5], (0..15).map(|_| rng.random_range(0.0..=1.0)).collect()).unwrap();
            let kind = [AttackKind::Fgsm, AttackKind::Pgd, AttackKind::Mim, AttackKind::Cw][kind];
            let target = if target == 2 { AttackTarget::Ensemble } else { AttackTarget::Member(target) };
            let spec = AttackSpec::new(kind, eps, alpha, steps).with_target(target);
            let adv = run_attack(&members, &x, &[0, 1, 2], &spec, seed).unwrap();
            prop_assert!(linf_distance(&adv.x_adv, &x) <= eps + 1e-12);
            prop_assert!(adv.x_adv.values().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }
}
