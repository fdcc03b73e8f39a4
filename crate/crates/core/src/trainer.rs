//! Collaborative ensemble adversarial training.
//!
//! Each member minimises
//! `L_ce(x̃) + λ·mean(e^{λ·D_nat}·L_nat) + μ·mean(e^{μ·D_adv}·L_adv)`,
//! where `D` is the spread of its peers' true-class confidences, snapshotted
//! before any member of the batch is updated.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::attacks::{run_attack, AttackSpec, AttackTarget};
use crate::autograd::{Graph, Var};
use crate::data::{batches, BatchPlan, Dataset};
use crate::ensemble::{correctness, ensemble_predict, mix64, model_predict, model_probs, Ensemble, FilterPartition, FilterSubset};
use crate::error::{Error, Result};
use crate::nn::Model;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Ceat,
    VanillaEat,
    HardFilter(FilterSubset),
}

impl FromStr for Variant {
    type Err = Error;

    /// `ceat`, `vanilla_eat`, or `hard_filter:<F12|F34|F3|F4|all|none>`.
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ceat" => Ok(Variant::Ceat),
            "vanilla_eat" | "vanilla" => Ok(Variant::VanillaEat),
            other => match other.strip_prefix("hard_filter:") {
                Some(subset) => Ok(Variant::HardFilter(subset.parse()?)),
                None => Err(Error::config(format!(
                    "unknown variant `{other}` (ceat, vanilla_eat, hard_filter:<subset>)"
                ))),
            },
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Variant::Ceat => f.write_str("ceat"),
            Variant::VanillaEat => f.write_str("vanilla_eat"),
            Variant::HardFilter(s) => write!(f, "hard_filter:{s}"),
        }
    }
}

/// Which loss components a CEAT run switches on.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LossTerms {
    /// Scale the distance terms by `e^D`; otherwise every weight is 1.
    pub disparity: bool,
    pub adv: bool,
    pub nat: bool,
}

impl LossTerms {
    pub const FULL: LossTerms = LossTerms { disparity: true, adv: true, nat: true };
    pub const NONE: LossTerms = LossTerms { disparity: false, adv: false, nat: false };
}

impl Default for LossTerms {
    fn default() -> Self {
        Self::FULL
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CeatConfig {
    pub lambda: f64,
    pub mu: f64,
    pub train_attack: AttackSpec,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub variant: Variant,
    pub terms: LossTerms,
}

impl CeatConfig {
    pub fn new(lambda: f64, mu: f64) -> Self {
        Self {
            lambda,
            mu,
            train_attack: AttackSpec::training_default(),
            epochs: 20,
            batch_size: 64,
            seed: 0,
            variant: Variant::Ceat,
            terms: LossTerms::FULL,
        }
    }

    pub fn vanilla() -> Self {
        Self {
            variant: Variant::VanillaEat,
            ..Self::new(0.0, 0.0)
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("lambda", self.lambda), ("mu", self.mu)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::config(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be at least 1"));
        }
        self.train_attack.validate()
    }

    fn validate_for(&self, members: usize) -> Result<()> {
        self.validate()?;
        if members < 2 {
            return Err(Error::config(format!("an ensemble needs at least 2 members, got {members}")));
        }
        if matches!(self.variant, Variant::HardFilter(_)) && members != 3 {
            return Err(Error::config(format!(
                "hard_filter needs exactly 3 members (one learner, two peers), got {members}"
            )));
        }
        Ok(())
    }

    /// Coefficients and switches actually applied by the loss.
    fn plan(&self) -> LossPlan {
        match self.variant {
            Variant::VanillaEat => LossPlan { lambda: 0.0, mu: 0.0, terms: LossTerms::NONE, mask: None },
            Variant::Ceat => LossPlan { lambda: self.lambda, mu: self.mu, terms: self.terms, mask: None },
            Variant::HardFilter(subset) => LossPlan {
                lambda: 0.0,
                mu: 1.0,
                terms: LossTerms { disparity: false, adv: true, nat: true },
                mask: Some(subset),
            },
        }
    }
}

#[derive(Clone, Copy, Debug)]
struct LossPlan {
    lambda: f64,
    mu: f64,
    terms: LossTerms,
    mask: Option<FilterSubset>,
}

/// Scalar loss values for one member on one batch, plus the per-sample
/// weights that produced them.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LossBreakdown {
    pub l_ce: f64,
    pub l_nat_d: f64,
    pub l_adv_d: f64,
    pub l_total: f64,
    pub weights_adv: Vec<f64>,
    pub weights_nat: Vec<f64>,
}

/// Softmax probability of the true label, per sample.
pub fn true_class_confidence(model: &Model, x: &Tensor, y: &[usize]) -> Result<Vec<f64>> {
    let probs = model_probs(model, x)?;
    let k = model.num_classes();
    if y.len() != probs.rows() {
        return Err(Error::input(format!("{} labels for {} samples", y.len(), probs.rows())));
    }
    y.iter()
        .enumerate()
        .map(|(i, &c)| {
            if c >= k {
                Err(Error::input(format!("label {c} out of range for {k} classes")))
            } else {
                Ok(probs.values()[i * k + c])
            }
        })
        .collect()
}

/// Largest pairwise gap among the peers' confidences, per sample. One peer
/// gives zero everywhere.
pub fn peer_disparity(h_peers: &[Vec<f64>]) -> Result<Vec<f64>> {
    let first = h_peers.first().ok_or_else(|| Error::input("disparity needs at least one peer"))?;
    let n = first.len();
    if h_peers.iter().any(|h| h.len() != n) {
        return Err(Error::input("peer confidence vectors differ in length"));
    }
    if let Some(bad) = h_peers.iter().flatten().find(|h| !(0.0..=1.0).contains(*h)) {
        return Err(Error::input(format!("confidence {bad} outside [0, 1]")));
    }
    Ok((0..n)
        .map(|i| {
            let (lo, hi) = h_peers
                .iter()
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), h| (lo.min(h[i]), hi.max(h[i])));
            hi - lo
        })
        .collect())
}

/// `exp(amplifier · D)` per sample; with two peers `D = |h_b − h_c|`.
pub fn disparity_weight(h_peers: &[Vec<f64>], amplifier: f64) -> Result<Vec<f64>> {
    if !(amplifier >= 0.0 && amplifier.is_finite()) {
        return Err(Error::input(format!("amplifier must be finite and >= 0, got {amplifier}")));
    }
    Ok(peer_disparity(h_peers)?.into_iter().map(|d| (amplifier * d).exp()).collect())
}

fn squared_distance_rows(a: &Tensor, b: &[f64], k: usize) -> Vec<f64> {
    a.values()
        .chunks_exact(k)
        .zip(b.chunks_exact(k))
        .map(|(p, q)| p.iter().zip(q).map(|(u, v)| (u - v).powi(2)).sum())
        .collect()
}

/// `‖softmax(f(x̃)) − softmax(f(x))‖²` per sample.
pub fn loss_adv(model: &Model, x_tilde: &Tensor, x: &Tensor) -> Result<Vec<f64>> {
    if x_tilde.shape() != x.shape() {
        return Err(Error::dim(format!("adversarial batch {:?} vs clean batch {:?}", x_tilde.shape(), x.shape())));
    }
    let p = model_probs(model, x_tilde)?;
    let q = model_probs(model, x)?;
    Ok(squared_distance_rows(&p, q.values(), model.num_classes()))
}

/// `‖softmax(f(x)) − onehot(y)‖²` per sample.
pub fn loss_nat(model: &Model, x: &Tensor, y: &[usize]) -> Result<Vec<f64>> {
    let k = model.num_classes();
    let onehot = one_hot(y, k)?;
    let p = model_probs(model, x)?;
    if p.rows() != y.len() {
        return Err(Error::input(format!("{} labels for {} samples", y.len(), p.rows())));
    }
    Ok(squared_distance_rows(&p, onehot.values(), k))
}

fn one_hot(y: &[usize], k: usize) -> Result<Tensor> {
    let mut v = vec![0.0; y.len() * k];
    for (i, &c) in y.iter().enumerate() {
        if c >= k {
            return Err(Error::input(format!("label {c} out of range for {k} classes")));
        }
        v[i * k + c] = 1.0;
    }
    Tensor::new(vec![y.len(), k], v)
}

/// Every member's view of one batch, taken before any update.
#[derive(Clone, Debug)]
struct Snapshot {
    h_adv: Vec<Vec<f64>>,
    h_nat: Vec<Vec<f64>>,
    correct_adv: Vec<Vec<bool>>,
}

impl Snapshot {
    fn take(members: &[Model], x: &Tensor, x_tilde: &Tensor, y: &[usize]) -> Result<Self> {
        let mut s = Snapshot { h_adv: Vec::new(), h_nat: Vec::new(), correct_adv: Vec::new() };
        for model in members {
            s.h_adv.push(true_class_confidence(model, x_tilde, y)?);
            s.h_nat.push(true_class_confidence(model, x, y)?);
            s.correct_adv.push(correctness(&model_predict(model, x_tilde)?, y));
        }
        Ok(s)
    }

    fn peers(m: usize, count: usize) -> Vec<usize> {
        (0..count).filter(|&p| p != m).collect()
    }

    fn peer_rows(rows: &[Vec<f64>], m: usize) -> Vec<Vec<f64>> {
        Self::peers(m, rows.len()).into_iter().map(|p| rows[p].clone()).collect()
    }

    /// F1–F4 over the first two peers of `m`; `None` with a single peer.
    fn partition(&self, m: usize) -> Option<FilterPartition> {
        let peers = Self::peers(m, self.correct_adv.len());
        if peers.len() < 2 {
            return None;
        }
        Some(FilterPartition::from_correctness(&self.correct_adv[peers[0]], &self.correct_adv[peers[1]]))
    }

    /// `(weights_nat, weights_adv)` for member `m`.
    fn weights(&self, m: usize, plan: &LossPlan) -> Result<(Vec<f64>, Vec<f64>)> {
        let n = self.h_adv[m].len();
        if let Some(subset) = plan.mask {
            let partition = self.partition(m).ok_or_else(|| Error::config("hard_filter needs two peers"))?;
            return Ok((vec![1.0; n], partition.mask(subset)));
        }
        if !plan.terms.disparity {
            return Ok((vec![1.0; n], vec![1.0; n]));
        }
        Ok((
            disparity_weight(&Self::peer_rows(&self.h_nat, m), plan.lambda)?,
            disparity_weight(&Self::peer_rows(&self.h_adv, m), plan.mu)?,
        ))
    }
}

struct BuiltLoss {
    total: Var,
    l_ce: Var,
    l_nat_d: Option<Var>,
    l_adv_d: Option<Var>,
    params: Vec<Var>,
}

/// Weighted mean of a per-sample squared distance between two probability
/// matrices.
fn weighted_distance(g: &mut Graph, p: Var, q: Var, weights: &[f64]) -> Result<Var> {
    let diff = g.sub(p, q)?;
    let sq = g.square(diff);
    let per_sample = g.sum(sq, Some(1))?;
    let w = g.constant(Tensor::from_vec(weights.to_vec()));
    let weighted = g.mul(w, per_sample)?;
    g.mean(weighted, None)
}

#[allow(clippy::too_many_arguments)]
fn build_loss(
    g: &mut Graph,
    model: &Model,
    x: &Tensor,
    x_tilde: &Tensor,
    y: &[usize],
    weights_nat: &[f64],
    weights_adv: &[f64],
    plan: &LossPlan,
    track: bool,
) -> Result<BuiltLoss> {
    let xt = g.constant(x_tilde.clone());
    let fwd = model.forward(g, xt, track)?;
    let l_ce = g.cross_entropy(fwd.logits, y)?;
    let mut total = l_ce;
    let (mut l_nat_d, mut l_adv_d) = (None, None);
    if plan.terms.adv || plan.terms.nat {
        let xc = g.constant(x.clone());
        let logits_nat = model.forward_with(g, xc, &fwd.params)?;
        let p_nat = g.softmax(logits_nat)?;
        if plan.terms.nat {
            let onehot = g.constant(one_hot(y, model.num_classes())?);
            let term = weighted_distance(g, p_nat, onehot, weights_nat)?;
            let scaled = g.scale(term, plan.lambda);
            total = g.add(total, scaled)?;
            l_nat_d = Some(term);
        }
        if plan.terms.adv {
            let p_adv = g.softmax(fwd.logits)?;
            let term = weighted_distance(g, p_adv, p_nat, weights_adv)?;
            let scaled = g.scale(term, plan.mu);
            total = g.add(total, scaled)?;
            l_adv_d = Some(term);
        }
    }
    Ok(BuiltLoss { total, l_ce, l_nat_d, l_adv_d, params: fwd.params })
}

fn breakdown(g: &Graph, built: &BuiltLoss, weights_nat: Vec<f64>, weights_adv: Vec<f64>) -> LossBreakdown {
    let scalar = |v: Option<Var>| v.map(|v| g.value(v).values()[0]).unwrap_or(0.0);
    LossBreakdown {
        l_ce: scalar(Some(built.l_ce)),
        l_nat_d: scalar(built.l_nat_d),
        l_adv_d: scalar(built.l_adv_d),
        l_total: scalar(Some(built.total)),
        weights_adv,
        weights_nat,
    }
}

/// Loss of member `m` on a batch, with peer confidences taken from the other
/// members as they are now.
pub fn loss_total(members: &[Model], m: usize, x: &Tensor, x_tilde: &Tensor, y: &[usize], cfg: &CeatConfig) -> Result<LossBreakdown> {
    cfg.validate_for(members.len())?;
    if m >= members.len() {
        return Err(Error::input(format!("member {m} out of range for {} members", members.len())));
    }
    if x.shape() != x_tilde.shape() {
        return Err(Error::dim(format!("adversarial batch {:?} vs clean batch {:?}", x_tilde.shape(), x.shape())));
    }
    let plan = cfg.plan();
    let snapshot = Snapshot::take(members, x, x_tilde, y)?;
    let (wn, wa) = snapshot.weights(m, &plan)?;
    let mut g = Graph::new();
    let built = build_loss(&mut g, &members[m], x, x_tilde, y, &wn, &wa, &plan, false)?;
    Ok(breakdown(&g, &built, wn, wa))
}

/// Seed of the training attack's random start for one batch.
pub fn batch_seed(seed: u64, epoch: usize, batch: usize) -> u64 {
    mix64(seed ^ mix64(((epoch as u64) << 32) ^ batch as u64))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BatchLoss {
    pub batch: usize,
    pub member: usize,
    pub size: usize,
    pub l_ce: f64,
    pub l_nat_d: f64,
    pub l_adv_d: f64,
    pub l_total: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct MemberLosses {
    pub l_ce: f64,
    pub l_nat_d: f64,
    pub l_adv_d: f64,
    pub l_total: f64,
}

/// Per-epoch summary; serialises to one JSON-lines record (batch detail is
/// kept in memory only).
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpochSummary {
    pub epoch: usize,
    pub variant: String,
    pub lambda: f64,
    pub mu: f64,
    pub learning_rate: f64,
    /// Sample-weighted means over the epoch's batches.
    pub members: Vec<MemberLosses>,
    pub e_d_mean: f64,
    pub e_d_max: f64,
    /// `|F1..F4| / N` over the epoch, pooled across members.
    pub partition: [f64; 4],
    /// Ensemble accuracy on the training batches' adversarial inputs, before
    /// each batch's updates.
    pub adv_train_acc: f64,
    #[serde(skip)]
    pub batches: Vec<BatchLoss>,
}

impl EpochSummary {
    pub fn to_json_line(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn mean_l_ce(&self) -> f64 {
        self.members.iter().map(|m| m.l_ce).sum::<f64>() / self.members.len().max(1) as f64
    }
}

/// Cross-entropy beyond this means the logits have blown up; the loss itself
/// stays finite because it is computed through log-sum-exp.
pub const DIVERGENCE_LIMIT: f64 = 1e6;

fn numeric(epoch: usize, batch: usize, member: usize, detail: impl Into<String>) -> Error {
    Error::Numeric { epoch, batch, member, detail: detail.into() }
}

/// One pass over `ds`: per batch, craft x̃ against the ensemble, snapshot
/// every member's confidences, then update members in index order.
pub fn train_epoch(ens: &mut Ensemble, ds: &Dataset, cfg: &CeatConfig, epoch: usize) -> Result<EpochSummary> {
    cfg.validate_for(ens.len())?;
    if ds.sample_shape() != ens.input_shape() {
        return Err(Error::dim(format!(
            "dataset samples {:?} do not match ensemble input {:?}",
            ds.sample_shape(),
            ens.input_shape()
        )));
    }
    if ds.num_classes() != ens.num_classes() {
        return Err(Error::dim(format!(
            "dataset has {} classes, ensemble {}",
            ds.num_classes(),
            ens.num_classes()
        )));
    }
    let plan = cfg.plan();
    ens.set_epoch(epoch);
    let plan_batches = batches(ds, &BatchPlan { batch_size: cfg.batch_size, seed: cfg.seed, epoch })?;
    let m_count = ens.len();
    let attack = cfg.train_attack.clone().with_target(AttackTarget::Ensemble);

    let mut records = Vec::new();
    let mut sums = vec![MemberLosses::default(); m_count];
    let (mut ed_sum, mut ed_max, mut ed_count) = (0.0, 0.0f64, 0usize);
    let mut part_counts = [0usize; 4];
    let mut adv_correct = 0usize;
    for (b, batch) in plan_batches.iter().enumerate() {
        let x = &batch.inputs;
        let y = &batch.labels;
        let x_adv = run_attack(ens.members(), x, y, &attack, batch_seed(cfg.seed, epoch, b))?.x_adv;
        let snapshot = Snapshot::take(ens.members(), x, &x_adv, y)?;
        adv_correct += correctness(&ensemble_predict(ens.members(), &x_adv)?, y).iter().filter(|c| **c).count();
        for m in 0..m_count {
            let (wn, wa) = snapshot.weights(m, &plan)?;
            if let Some(p) = snapshot.partition(m) {
                for (c, set) in part_counts.iter_mut().zip([&p.f1, &p.f2, &p.f3, &p.f4]) {
                    *c += set.len();
                }
            }
            let (model, opt) = ens.member_mut(m);
            let mut g = Graph::new();
            let built = build_loss(&mut g, model, x, &x_adv, y, &wn, &wa, &plan, true)?;
            let bd = breakdown(&g, &built, wn, wa);
            if !bd.l_total.is_finite() {
                return Err(numeric(epoch, b, m, format!("non-finite loss {}", bd.l_total)));
            }
            if bd.l_ce > DIVERGENCE_LIMIT {
                return Err(numeric(epoch, b, m, format!("cross-entropy {:e} exceeds divergence limit", bd.l_ce)));
            }
            g.backward(built.total)?;
            model.absorb_grads(&mut g, &built.params)?;
            opt.step(model)?;
            if !model.params().all(Tensor::all_finite) {
                return Err(numeric(epoch, b, m, "non-finite parameters after update"));
            }

            if plan.terms.adv {
                ed_sum += bd.weights_adv.iter().sum::<f64>();
                ed_max = bd.weights_adv.iter().copied().fold(ed_max, f64::max);
                ed_count += bd.weights_adv.len();
            }
            let n = y.len() as f64;
            let s = &mut sums[m];
            s.l_ce += bd.l_ce * n;
            s.l_nat_d += bd.l_nat_d * n;
            s.l_adv_d += bd.l_adv_d * n;
            s.l_total += bd.l_total * n;
            records.push(BatchLoss {
                batch: b,
                member: m,
                size: y.len(),
                l_ce: bd.l_ce,
                l_nat_d: bd.l_nat_d,
                l_adv_d: bd.l_adv_d,
                l_total: bd.l_total,
            });
        }
    }
    let n = ds.len().max(1) as f64;
    for s in &mut sums {
        s.l_ce /= n;
        s.l_nat_d /= n;
        s.l_adv_d /= n;
        s.l_total /= n;
    }
    let part_total = part_counts.iter().sum::<usize>().max(1) as f64;
    Ok(EpochSummary {
        epoch,
        variant: cfg.variant.to_string(),
        lambda: cfg.lambda,
        mu: cfg.mu,
        learning_rate: ens.optimizers()[0].lr_at_epoch(epoch),
        members: sums,
        e_d_mean: if ed_count > 0 { ed_sum / ed_count as f64 } else { 1.0 },
        e_d_max: if ed_count > 0 { ed_max } else { 1.0 },
        partition: part_counts.map(|c| c as f64 / part_total),
        adv_train_acc: adv_correct as f64 / n,
        batches: records,
    })
}

/// The hard-filter probe: `L_ce` on every sample plus unweighted `L_adv` on
/// the chosen partition cells of the two peers.
pub fn train_hard_filter_epoch(ens: &mut Ensemble, ds: &Dataset, cfg: &CeatConfig, epoch: usize) -> Result<EpochSummary> {
    if !matches!(cfg.variant, Variant::HardFilter(_)) {
        return Err(Error::config(format!("variant `{}` is not a hard_filter variant", cfg.variant)));
    }
    train_epoch(ens, ds, cfg, epoch)
}

/// Runs `cfg.epochs` epochs, calling `on_epoch` after each.
pub fn train(ens: &mut Ensemble, ds: &Dataset, cfg: &CeatConfig, mut on_epoch: impl FnMut(&EpochSummary) -> Result<()>) -> Result<Vec<EpochSummary>> {
    let mut out = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let summary = train_epoch(ens, ds, cfg, epoch)?;
        on_epoch(&summary)?;
        out.push(summary);
    }
    Ok(out)
}
