//! Averaged-softmax ensembles, per-peer sample partitions and 0-1 risk
//! diagnostics.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::nn::{Arch, Model, SgdState};
use crate::tensor::{self, Tensor};

#[derive(Clone, Debug)]
pub struct Ensemble {
    members: Vec<Model>,
    optimizers: Vec<SgdState>,
}

impl Ensemble {
    pub fn new(members: Vec<Model>, optimizers: Vec<SgdState>) -> Result<Self> {
        if members.len() < 2 {
            return Err(Error::config(format!("an ensemble needs at least 2 members, got {}", members.len())));
        }
        if optimizers.len() != members.len() {
            return Err(Error::config("one optimizer per member is required"));
        }
        let first = &members[0];
        if members
            .iter()
            .any(|m| m.input_shape() != first.input_shape() || m.num_classes() != first.num_classes())
        {
            return Err(Error::dim("ensemble members disagree on input shape or class count"));
        }
        Ok(Self { members, optimizers })
    }

    /// `m` freshly initialized members, each with its own SGD state.
    /// Member `i` is seeded from `(seed, i)`.
    pub fn init(
        arch: Arch,
        m: usize,
        input_shape: &[usize],
        num_classes: usize,
        seed: u64,
        sgd: &SgdSettings,
    ) -> Result<Self> {
        let members = (0..m)
            .map(|i| Model::init(arch, input_shape, num_classes, member_seed(seed, i)))
            .collect::<Result<Vec<_>>>()?;
        Self::with_fresh_optimizers(members, sgd)
    }

    pub fn with_fresh_optimizers(members: Vec<Model>, sgd: &SgdSettings) -> Result<Self> {
        let optimizers = members
            .iter()
            .map(|m| SgdState::new(m, sgd.learning_rate, sgd.momentum, sgd.schedule.clone())?.with_clip_norm(sgd.clip_norm))
            .collect::<Result<Vec<_>>>()?;
        Self::new(members, optimizers)
    }

    pub fn members(&self) -> &[Model] {
        &self.members
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.members[0].num_classes()
    }

    pub fn input_shape(&self) -> &[usize] {
        self.members[0].input_shape()
    }

    /// Mutable access to member `i` and its optimizer, and nothing else.
    pub fn member_mut(&mut self, i: usize) -> (&mut Model, &mut SgdState) {
        (&mut self.members[i], &mut self.optimizers[i])
    }

    pub fn set_epoch(&mut self, epoch: usize) {
        for opt in &mut self.optimizers {
            opt.set_epoch(epoch);
        }
    }

    pub fn optimizers(&self) -> &[SgdState] {
        &self.optimizers
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SgdSettings {
    pub learning_rate: f64,
    pub momentum: f64,
    pub schedule: Vec<(usize, f64)>,
    pub clip_norm: Option<f64>,
}

/// Seed for member `i` of an ensemble seeded with `seed` (SplitMix64 mix).
pub fn member_seed(seed: u64, i: usize) -> u64 {
    mix64(seed ^ (i as u64 + 1).wrapping_mul(0x9e37_79b9_7f4a_7c15))
}

pub(crate) fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Softmax probabilities of one model, `[N×K]`.
pub fn model_probs(model: &Model, x: &Tensor) -> Result<Tensor> {
    let logits = model.logits(x)?;
    let k = model.num_classes();
    Tensor::new(logits.shape().to_vec(), tensor::softmax_rows(logits.values(), k))
}

/// Arithmetic mean of the members' softmax outputs.
pub fn ensemble_probs(members: &[Model], x: &Tensor) -> Result<Tensor> {
    let first = members.first().ok_or_else(|| Error::input("empty member list"))?;
    let mut acc = model_probs(first, x)?;
    for m in &members[1..] {
        let p = model_probs(m, x)?;
        for (a, b) in acc.values_mut().iter_mut().zip(p.values()) {
            *a += b;
        }
    }
    let inv = members.len() as f64;
    for a in acc.values_mut() {
        *a /= inv;
    }
    Ok(acc)
}

/// Row-wise argmax, ties to the lowest class index.
pub fn argmax_rows(probs: &Tensor) -> Vec<usize> {
    let k = probs.row_width().max(1);
    probs.values().chunks_exact(k).map(tensor::argmax).collect()
}

pub fn ensemble_predict(members: &[Model], x: &Tensor) -> Result<Vec<usize>> {
    Ok(argmax_rows(&ensemble_probs(members, x)?))
}

pub fn model_predict(model: &Model, x: &Tensor) -> Result<Vec<usize>> {
    Ok(argmax_rows(&model.logits(x)?))
}

/// Indices a model classifies correctly (`S⁺`) and incorrectly (`S⁻`).
pub fn split_correct(model: &Model, x: &Tensor, y: &[usize]) -> Result<(Vec<usize>, Vec<usize>)> {
    let pred = model_predict(model, x)?;
    Ok(split_by_predictions(&pred, y))
}

pub fn split_by_predictions(pred: &[usize], y: &[usize]) -> (Vec<usize>, Vec<usize>) {
    (0..y.len()).partition(|&i| pred[i] == y[i])
}

/// Four-way split of a batch by the correctness of two peers `(i, j)`.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct FilterPartition {
    /// peer i correct, peer j wrong
    pub f1: Vec<usize>,
    /// peer i wrong, peer j correct
    pub f2: Vec<usize>,
    /// both correct
    pub f3: Vec<usize>,
    /// both wrong
    pub f4: Vec<usize>,
}

impl FilterPartition {
    /// Partition from the peers' correctness flags.
    pub fn from_correctness(i_correct: &[bool], j_correct: &[bool]) -> Self {
        let mut p = FilterPartition::default();
        for (idx, (&a, &b)) in i_correct.iter().zip(j_correct).enumerate() {
            match (a, b) {
                (true, false) => p.f1.push(idx),
                (false, true) => p.f2.push(idx),
                (true, true) => p.f3.push(idx),
                (false, false) => p.f4.push(idx),
            }
        }
        p
    }

    pub fn len(&self) -> usize {
        self.f1.len() + self.f2.len() + self.f3.len() + self.f4.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// `[|F1|, |F2|, |F3|, |F4|] / N`.
    pub fn fractions(&self) -> [f64; 4] {
        let n = self.len().max(1) as f64;
        [self.f1.len(), self.f2.len(), self.f3.len(), self.f4.len()].map(|c| c as f64 / n)
    }

    /// 0/1 mask over the batch marking membership in the selected sets.
    pub fn mask(&self, subset: FilterSubset) -> Vec<f64> {
        let mut mask = vec![0.0; self.len()];
        let sets: &[&Vec<usize>] = match subset {
            FilterSubset::F12 => &[&self.f1, &self.f2],
            FilterSubset::F34 => &[&self.f3, &self.f4],
            FilterSubset::F3 => &[&self.f3],
            FilterSubset::F4 => &[&self.f4],
            FilterSubset::All => &[&self.f1, &self.f2, &self.f3, &self.f4],
            FilterSubset::Empty => &[],
        };
        for set in sets {
            for &i in set.iter() {
                mask[i] = 1.0;
            }
        }
        mask
    }
}

/// Sample sets the hard-filter trainer applies the distance loss to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, serde::Deserialize)]
pub enum FilterSubset {
    F12,
    F34,
    F3,
    F4,
    All,
    Empty,
}

impl std::str::FromStr for FilterSubset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "F12" => Ok(Self::F12),
            "F34" => Ok(Self::F34),
            "F3" => Ok(Self::F3),
            "F4" => Ok(Self::F4),
            "ALL" => Ok(Self::All),
            "EMPTY" | "NONE" => Ok(Self::Empty),
            other => Err(Error::config(format!("unknown filter subset `{other}` (F12, F34, F3, F4, all, none)"))),
        }
    }
}

impl std::fmt::Display for FilterSubset {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::F12 => "F12",
            Self::F34 => "F34",
            Self::F3 => "F3",
            Self::F4 => "F4",
            Self::All => "all",
            Self::Empty => "none",
        })
    }
}

pub fn filter_partition(peer_i: &Model, peer_j: &Model, x_tilde: &Tensor, y: &[usize]) -> Result<FilterPartition> {
    let ci = correctness(&model_predict(peer_i, x_tilde)?, y);
    let cj = correctness(&model_predict(peer_j, x_tilde)?, y);
    Ok(FilterPartition::from_correctness(&ci, &cj))
}

pub fn correctness(pred: &[usize], y: &[usize]) -> Vec<bool> {
    pred.iter().zip(y).map(|(p, t)| p == t).collect()
}

/// The two members other than `m` in a three-member ensemble.
pub fn peer_pair(m: usize) -> (usize, usize) {
    match m {
        0 => (1, 2),
        1 => (0, 2),
        _ => (0, 1),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MemberRisk {
    /// Fraction of samples this member misclassifies.
    pub risk: f64,
    /// `|F1 ∪ F2| / N` for this member's peer pair.
    pub boundary_mass: f64,
    /// `|F3 ∪ F4| / N`.
    pub interior_mass: f64,
    /// Misclassified-by-this-member fraction restricted to `F1 ∪ F2`.
    pub boundary_risk: f64,
    /// Misclassified-by-this-member fraction restricted to `F3 ∪ F4`.
    pub interior_risk: f64,
    /// `boundary_risk + interior_risk`.
    pub combined_risk: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RiskReport {
    pub members: Vec<MemberRisk>,
    /// Error rate of the averaged-softmax prediction.
    pub ensemble_risk: f64,
    /// Error rate when more than half of the members are wrong.
    pub majority_wrong_rate: f64,
}

/// 0-1 risk diagnostics on (already perturbed) inputs. The boundary/interior
/// split is only defined for three members; other sizes report member risks
/// with the split fields set to zero.
pub fn adversarial_risk(members: &[Model], x_tilde: &Tensor, y: &[usize]) -> Result<RiskReport> {
    let preds = members
        .iter()
        .map(|m| model_predict(m, x_tilde))
        .collect::<Result<Vec<_>>>()?;
    let ens = ensemble_predict(members, x_tilde)?;
    Ok(risk_from_predictions(&preds, &ens, y))
}

pub fn risk_from_predictions(preds: &[Vec<usize>], ensemble_pred: &[usize], y: &[usize]) -> RiskReport {
    let n = y.len().max(1) as f64;
    let correct: Vec<Vec<bool>> = preds.iter().map(|p| correctness(p, y)).collect();
    let m = preds.len();
    let members = (0..m)
        .map(|a| {
            let wrong: Vec<bool> = correct[a].iter().map(|c| !c).collect();
            let risk = wrong.iter().filter(|&&w| w).count() as f64 / n;
            if m != 3 {
                return MemberRisk {
                    risk,
                    boundary_mass: 0.0,
                    interior_mass: 0.0,
                    boundary_risk: 0.0,
                    interior_risk: 0.0,
                    combined_risk: risk,
                };
            }
            let (i, j) = peer_pair(a);
            let part = FilterPartition::from_correctness(&correct[i], &correct[j]);
            let count_wrong = |sets: [&Vec<usize>; 2]| sets.iter().flat_map(|s| s.iter()).filter(|&&k| wrong[k]).count();
            let boundary_risk = count_wrong([&part.f1, &part.f2]) as f64 / n;
            let interior_risk = count_wrong([&part.f3, &part.f4]) as f64 / n;
            MemberRisk {
                risk,
                boundary_mass: (part.f1.len() + part.f2.len()) as f64 / n,
                interior_mass: (part.f3.len() + part.f4.len()) as f64 / n,
                boundary_risk,
                interior_risk,
                combined_risk: boundary_risk + interior_risk,
            }
        })
        .collect();
    let ensemble_risk = correctness(ensemble_pred, y).iter().filter(|c| !**c).count() as f64 / n;
    let majority_wrong = (0..y.len())
        .filter(|&k| 2 * correct.iter().filter(|c| !c[k]).count() > m)
        .count() as f64
        / n;
    RiskReport {
        members,
        ensemble_risk,
        majority_wrong_rate: majority_wrong,
    }
}
