//! Per-sample teacher aggregation: correctness weights, weighted and uniform
//! soft-label ensembles, and the pairwise-KL disagreement score.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{cross_entropy_with_eps, kl_divergence_with_eps, ProbVector, EPS_LOG};

/// Added to teacher losses before inversion.
pub const EPS_W: f64 = 1e-8;

/// How per-teacher task losses turn into ensemble weights.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightMode {
    /// `w_i ∝ 1 / (L_i + ε_w)`: lower loss, more weight.
    #[default]
    InverseLoss,
    /// `w_i ∝ L_i`, the loss-proportional formula taken literally.
    LiteralEq1,
}

impl std::str::FromStr for WeightMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "inverse_loss" => Ok(WeightMode::InverseLoss),
            "literal_eq1" => Ok(WeightMode::LiteralEq1),
            other => Err(Error::Config(format!("unknown weight_mode `{other}`"))),
        }
    }
}

/// Soft labels of `N >= 2` teachers on one sample, optionally with their task
/// losses on that sample's label.
#[derive(Debug, Clone, PartialEq)]
pub struct TeacherPredictionSet {
    predictions: Vec<ProbVector>,
    task_losses: Option<Vec<f64>>,
}

impl TeacherPredictionSet {
    pub fn new(predictions: Vec<ProbVector>) -> Result<Self> {
        if predictions.len() < 2 {
            return Err(Error::TooFewTeachers(predictions.len()));
        }
        let c = predictions[0].len();
        if let Some(p) = predictions.iter().find(|p| p.len() != c) {
            return Err(Error::ClassCountMismatch {
                expected: c,
                found: p.len(),
            });
        }
        Ok(Self {
            predictions,
            task_losses: None,
        })
    }

    /// Attaches explicit task losses.
    pub fn with_task_losses(mut self, losses: Vec<f64>) -> Result<Self> {
        if losses.len() != self.predictions.len() {
            return Err(Error::DimensionMismatch {
                context: "teacher task losses",
                expected: self.predictions.len(),
                found: losses.len(),
            });
        }
        if let Some(&l) = losses.iter().find(|l| !(l.is_finite() && **l >= 0.0)) {
            return Err(Error::NegativeLoss(l));
        }
        self.task_losses = Some(losses);
        Ok(self)
    }

    /// Computes task losses against `label` and attaches them.
    pub fn labeled(predictions: Vec<ProbVector>, label: usize) -> Result<Self> {
        let set = Self::new(predictions)?;
        let losses = teacher_task_losses(&set.predictions, label)?;
        set.with_task_losses(losses)
    }

    pub fn predictions(&self) -> &[ProbVector] {
        &self.predictions
    }

    pub fn task_losses(&self) -> Option<&[f64]> {
        self.task_losses.as_deref()
    }

    pub fn num_teachers(&self) -> usize {
        self.predictions.len()
    }

    pub fn num_classes(&self) -> usize {
        self.predictions[0].len()
    }
}

/// Per-teacher weights summing to 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct EnsembleWeights(Vec<f64>);

impl EnsembleWeights {
    pub fn uniform(n: usize) -> Self {
        Self(vec![1.0 / n as f64; n])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Cross-entropy of `one_hot(label)` against each teacher: `-ln ŷ_i[label]`.
pub fn teacher_task_losses(preds: &[ProbVector], label: usize) -> Result<Vec<f64>> {
    teacher_task_losses_with_eps(preds, label, EPS_LOG)
}

pub fn teacher_task_losses_with_eps(preds: &[ProbVector], label: usize, eps: f64) -> Result<Vec<f64>> {
    preds
        .iter()
        .map(|p| {
            let target = ProbVector::one_hot(label, p.len())?;
            cross_entropy_with_eps(target.as_slice(), p.as_slice(), eps)
        })
        .collect()
}

pub fn correctness_weights(losses: &[f64], mode: WeightMode) -> Result<EnsembleWeights> {
    correctness_weights_with_eps(losses, mode, EPS_W)
}

pub fn correctness_weights_with_eps(
    losses: &[f64],
    mode: WeightMode,
    eps_w: f64,
) -> Result<EnsembleWeights> {
    if losses.len() < 2 {
        return Err(Error::TooFewTeachers(losses.len()));
    }
    if let Some(&l) = losses.iter().find(|l| !(l.is_finite() && **l >= 0.0)) {
        return Err(Error::NegativeLoss(l));
    }
    let n = losses.len();
    if losses.iter().all(|&l| l == 0.0) {
        return Ok(EnsembleWeights::uniform(n));
    }
    let raw: Vec<f64> = match mode {
        WeightMode::InverseLoss => losses.iter().map(|l| 1.0 / (l + eps_w)).collect(),
        WeightMode::LiteralEq1 => losses.to_vec(),
    };
    let total: f64 = raw.iter().sum();
    Ok(EnsembleWeights(raw.into_iter().map(|r| r / total).collect()))
}

/// `Σ_i w_i · ŷ_i`.
pub fn weighted_ensemble(preds: &TeacherPredictionSet, weights: &EnsembleWeights) -> Result<ProbVector> {
    if weights.len() != preds.num_teachers() {
        return Err(Error::DimensionMismatch {
            context: "ensemble weights",
            expected: preds.num_teachers(),
            found: weights.len(),
        });
    }
    let mut out = vec![0.0; preds.num_classes()];
    for (p, &w) in preds.predictions.iter().zip(weights.as_slice()) {
        for (o, &v) in out.iter_mut().zip(p.as_slice()) {
            *o += w * v;
        }
    }
    Ok(ProbVector::from_trusted(out))
}

/// Elementwise mean of the teachers' soft labels.
pub fn uniform_ensemble(preds: &TeacherPredictionSet) -> ProbVector {
    let n = preds.num_teachers() as f64;
    let mut out = vec![0.0; preds.num_classes()];
    for p in &preds.predictions {
        for (o, &v) in out.iter_mut().zip(p.as_slice()) {
            *o += v;
        }
    }
    out.iter_mut().for_each(|o| *o /= n);
    ProbVector::from_trusted(out)
}

/// Mean KL divergence over ordered teacher pairs: `Σ_{i≠j} KL(ŷ_i ‖ ŷ_j) / (N(N−1))`.
pub fn disagreement(preds: &TeacherPredictionSet) -> f64 {
    disagreement_with_eps(preds, EPS_LOG)
}

pub fn disagreement_with_eps(preds: &TeacherPredictionSet, eps: f64) -> f64 {
    let n = preds.num_teachers();
    let mut total = 0.0;
    for (i, p) in preds.predictions.iter().enumerate() {
        for (j, q) in preds.predictions.iter().enumerate() {
            if i != j {
                // Lengths were validated at construction.
                total += kl_divergence_with_eps(p.as_slice(), q.as_slice(), eps)
                    .expect("congruent predictions");
            }
        }
    }
    total / (n * (n - 1)) as f64
}
