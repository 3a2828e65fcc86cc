//! Per-sample distillation objectives and their gradients with respect to
//! student logits.
//!
//! Labeled samples use a correctness-weighted teacher ensemble as the soft
//! target and scale the distillation term by `1 / (1 + mean teacher loss)`
//! before adding the student's own task loss:
//!
//! ```text
//! L = L_d / (1 + Σ_i L^t_i / N) + L_s
//! ```
//!
//! Unlabeled samples distill from the plain teacher average and scale the
//! term by the teachers' pairwise-KL disagreement:
//!
//! ```text
//! L = (1 + λ·L_p) · L_d
//! ```
//!
//! Teacher outputs and both per-sample scale factors are constants; only the
//! student receives gradients.

use serde::{Deserialize, Serialize};

use crate::ensemble::{
    correctness_weights_with_eps, disagreement_with_eps, uniform_ensemble, weighted_ensemble,
    TeacherPredictionSet, WeightMode, EPS_W,
};
use crate::error::{Error, Result};
use crate::numerics::{cross_entropy_with_eps, ProbVector, EPS_LOG};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CombinePolicy {
    /// One optimizer step per (labeled batch, unlabeled batch) pair on the sum of their means.
    #[default]
    Sum,
    /// Alternate optimizer steps between labeled and unlabeled batches.
    Interleave,
}

impl std::str::FromStr for CombinePolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sum" => Ok(CombinePolicy::Sum),
            "interleave" => Ok(CombinePolicy::Interleave),
            other => Err(Error::Config(format!("unknown combine_policy `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DistillConfig {
    pub lambda: f64,
    pub weight_mode: WeightMode,
    pub enable_teacher_weighting: bool,
    pub enable_labeled_loss_weighting: bool,
    pub enable_disagreement_weighting: bool,
    pub combine_policy: CombinePolicy,
    pub eps_log: f64,
    pub eps_w: f64,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            lambda: 10.0,
            weight_mode: WeightMode::InverseLoss,
            enable_teacher_weighting: true,
            enable_labeled_loss_weighting: true,
            enable_disagreement_weighting: true,
            combine_policy: CombinePolicy::Sum,
            eps_log: EPS_LOG,
            eps_w: EPS_W,
        }
    }
}

impl DistillConfig {
    /// All weighting switched off: plain averaged-soft-label distillation.
    pub fn baseline() -> Self {
        Self {
            enable_teacher_weighting: false,
            enable_labeled_loss_weighting: false,
            enable_disagreement_weighting: false,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::Config(format!("lambda must be >= 0, got {}", self.lambda)));
        }
        if !(self.eps_log > 0.0 && self.eps_log < 1.0) {
            return Err(Error::Config(format!("eps_log must be in (0, 1), got {}", self.eps_log)));
        }
        if !(self.eps_w > 0.0 && self.eps_w.is_finite()) {
            return Err(Error::Config(format!("eps_w must be positive, got {}", self.eps_w)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SampleKind {
    Labeled,
    Unlabeled,
}

/// Every term of one sample's objective, plus the weights and target that
/// produced it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub kind: SampleKind,
    pub label: Option<usize>,
    /// `L^t_i`.
    pub teacher_losses: Option<Vec<f64>>,
    /// Per-teacher ensemble weights used to build `target`.
    pub ensemble_weights: Vec<f64>,
    /// Soft label the student is distilled towards.
    pub target: Vec<f64>,
    /// `L^s`.
    pub student_task_loss: Option<f64>,
    /// `L^d`.
    pub distill_loss: f64,
    /// `L^p`.
    pub disagreement: Option<f64>,
    /// `1 / (1 + mean L^t)` on labeled samples (1 when that weighting is off).
    pub labeled_weight: Option<f64>,
    /// `1 + λ·L^p` on unlabeled samples (1 when that weighting is off).
    pub disagreement_weight: Option<f64>,
    pub total: f64,
}

impl LossBreakdown {
    /// Factor applied to `distill_loss` in `total`.
    pub fn distill_weight(&self) -> f64 {
        match self.kind {
            SampleKind::Labeled => self.labeled_weight.unwrap_or(1.0),
            SampleKind::Unlabeled => self.disagreement_weight.unwrap_or(1.0),
        }
    }

    /// `total` recomputed from the stored components.
    pub fn reconstruct_total(&self) -> f64 {
        self.distill_weight() * self.distill_loss + self.student_task_loss.unwrap_or(0.0)
    }
}

/// `L^d = -Σ_c ŷ^t[c] · ln ŷ^s[c]`.
pub fn distill_loss(teacher_ensemble: &ProbVector, student_pred: &ProbVector) -> Result<f64> {
    cross_entropy_with_eps(teacher_ensemble.as_slice(), student_pred.as_slice(), EPS_LOG)
}

pub fn labeled_sample_loss(
    preds: &TeacherPredictionSet,
    student_pred: &ProbVector,
    label: usize,
    cfg: &DistillConfig,
) -> Result<LossBreakdown> {
    let losses = preds.task_losses().ok_or(Error::LabelsRequired)?;
    let n = preds.num_teachers();
    if student_pred.len() != preds.num_classes() {
        return Err(Error::ClassCountMismatch {
            expected: preds.num_classes(),
            found: student_pred.len(),
        });
    }
    let one_hot = ProbVector::one_hot(label, preds.num_classes())?;

    let (target, weights) = if cfg.enable_teacher_weighting {
        let w = correctness_weights_with_eps(losses, cfg.weight_mode, cfg.eps_w)?;
        (weighted_ensemble(preds, &w)?, w.as_slice().to_vec())
    } else {
        (uniform_ensemble(preds), vec![1.0 / n as f64; n])
    };
    let ld = cross_entropy_with_eps(target.as_slice(), student_pred.as_slice(), cfg.eps_log)?;
    let ls = cross_entropy_with_eps(one_hot.as_slice(), student_pred.as_slice(), cfg.eps_log)?;
    let labeled_weight = if cfg.enable_labeled_loss_weighting {
        1.0 / (1.0 + losses.iter().sum::<f64>() / n as f64)
    } else {
        1.0
    };
    Ok(LossBreakdown {
        kind: SampleKind::Labeled,
        label: Some(label),
        teacher_losses: Some(losses.to_vec()),
        ensemble_weights: weights,
        target: target.into_inner(),
        student_task_loss: Some(ls),
        distill_loss: ld,
        disagreement: None,
        labeled_weight: Some(labeled_weight),
        disagreement_weight: None,
        total: labeled_weight * ld + ls,
    })
}

pub fn unlabeled_sample_loss(
    preds: &TeacherPredictionSet,
    student_pred: &ProbVector,
    cfg: &DistillConfig,
) -> Result<LossBreakdown> {
    let n = preds.num_teachers();
    if student_pred.len() != preds.num_classes() {
        return Err(Error::ClassCountMismatch {
            expected: preds.num_classes(),
            found: student_pred.len(),
        });
    }
    let target = uniform_ensemble(preds);
    let ld = cross_entropy_with_eps(target.as_slice(), student_pred.as_slice(), cfg.eps_log)?;
    let lp = disagreement_with_eps(preds, cfg.eps_log);
    let weight = if cfg.enable_disagreement_weighting {
        1.0 + cfg.lambda * lp
    } else {
        1.0
    };
    Ok(LossBreakdown {
        kind: SampleKind::Unlabeled,
        label: None,
        teacher_losses: None,
        ensemble_weights: vec![1.0 / n as f64; n],
        target: target.into_inner(),
        student_task_loss: None,
        distill_loss: ld,
        disagreement: Some(lp),
        labeled_weight: None,
        disagreement_weight: Some(weight),
        total: weight * ld,
    })
}

/// `∂L/∂z` for the student's logits `z`, where `student_pred = softmax(z)`.
///
/// Each cross-entropy term against a normalized target `t` contributes
/// `p − t`, so this is `w_d·(p − target) + (p − one_hot(y))` with the second
/// term present only on labeled samples.
pub fn student_logit_gradient(breakdown: &LossBreakdown, student_pred: &ProbVector) -> Result<Vec<f64>> {
    let p = student_pred.as_slice();
    if p.len() != breakdown.target.len() {
        return Err(Error::ClassCountMismatch {
            expected: breakdown.target.len(),
            found: p.len(),
        });
    }
    let w = breakdown.distill_weight();
    let mut grad: Vec<f64> = p.iter().zip(&breakdown.target).map(|(p, t)| w * (p - t)).collect();
    if let Some(label) = breakdown.label {
        for (c, g) in grad.iter_mut().enumerate() {
            let y = if c == label { 1.0 } else { 0.0 };
            *g += p[c] - y;
        }
    }
    Ok(grad)
}

fn mean_total(batch: &[LossBreakdown]) -> f64 {
    batch.iter().map(|b| b.total).sum::<f64>() / batch.len() as f64
}

/// Sum of the mean labeled total and the mean unlabeled total; an empty side
/// contributes nothing. Under [`CombinePolicy::Interleave`] the two halves are
/// optimized in separate steps, and this value is what gets logged.
pub fn combined_batch_loss(
    labeled: &[LossBreakdown],
    unlabeled: &[LossBreakdown],
    _cfg: &DistillConfig,
) -> Result<f64> {
    match (labeled.is_empty(), unlabeled.is_empty()) {
        (true, true) => Err(Error::EmptyBatches),
        (false, true) => Ok(mean_total(labeled)),
        (true, false) => Ok(mean_total(unlabeled)),
        (false, false) => Ok(mean_total(labeled) + mean_total(unlabeled)),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::softmax_slice;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn pv(v: &[f64]) -> ProbVector {
        ProbVector::new(v.to_vec()).unwrap()
    }

    #[test]
    fn distill_loss_examples() {
        let h = distill_loss(&pv(&[0.5, 0.5]), &pv(&[0.5, 0.5])).unwrap();
        assert!((h - std::f64::consts::LN_2).abs() < 1e-9);
        assert!(distill_loss(&pv(&[1.0, 0.0]), &pv(&[1.0, 0.0])).unwrap() <= 1e-10);
        let h = distill_loss(&pv(&[0.7, 0.3]), &pv(&[0.4, 0.6])).unwrap();
        assert!((h - 0.794_651_199_441_705_7).abs() < 1e-6);
        assert!(distill_loss(&pv(&[0.5, 0.5]), &pv(&[0.2, 0.3, 0.5])).is_err());
    }

    #[test]
    fn labeled_breakdown_matches_reference() {
        // Reference values from a 40-digit mpmath evaluation.
        let preds = TeacherPredictionSet::labeled(vec![pv(&[0.9, 0.1]), pv(&[0.6, 0.4])], 0).unwrap();
        let b = labeled_sample_loss(&preds, &pv(&[0.7, 0.3]), 0, &DistillConfig::default()).unwrap();
        let close = |a: f64, e: f64| assert!((a - e).abs() < 1e-4, "{a} vs {e}");
        let tl = b.teacher_losses.as_ref().unwrap();
        close(tl[0], 0.105_360_515_657_826_3);
        close(tl[1], 0.510_825_623_765_990_7);
        close(b.ensemble_weights[0], 0.829_011_859_408_937_8);
        close(b.ensemble_weights[1], 0.170_988_140_591_062_2);
        close(b.target[0], 0.848_703_557_822_681_3);
        close(b.target[1], 0.151_296_442_177_318_7);
        close(b.distill_loss, 0.484_868_095_679_770_8);
        close(b.labeled_weight.unwrap(), 0.764_471_598_508_076_9);
        close(b.student_task_loss.unwrap(), 0.356_674_943_938_732_4);
        close(b.total, 0.727_342_832_108_614);
        assert!((b.total - b.reconstruct_total()).abs() < 1e-12);
    }

    #[test]
    fn labeled_weight_limits() {
        let cfg = DistillConfig::default();
        let perfect = TeacherPredictionSet::labeled(vec![pv(&[1.0, 0.0]), pv(&[1.0, 0.0])], 0).unwrap();
        let b = labeled_sample_loss(&perfect, &pv(&[0.6, 0.4]), 0, &cfg).unwrap();
        assert!((b.labeled_weight.unwrap() - 1.0).abs() < 1e-6);
        assert!((b.total - (b.distill_loss + b.student_task_loss.unwrap())).abs() < 1e-6);

        let unit = TeacherPredictionSet::new(vec![pv(&[0.5, 0.5]), pv(&[0.5, 0.5])])
            .unwrap()
            .with_task_losses(vec![0.5, 1.5])
            .unwrap();
        let b = labeled_sample_loss(&unit, &pv(&[0.6, 0.4]), 0, &cfg).unwrap();
        assert_eq!(b.labeled_weight, Some(0.5));
    }

    #[test]
    fn labeled_loss_requires_task_losses() {
        let preds = TeacherPredictionSet::new(vec![pv(&[0.5, 0.5]), pv(&[0.4, 0.6])]).unwrap();
        let err = labeled_sample_loss(&preds, &pv(&[0.5, 0.5]), 0, &DistillConfig::default()).unwrap_err();
        assert!(matches!(err, Error::LabelsRequired));
        assert!(err.to_string().contains("labels required"));
    }

    #[test]
    fn unlabeled_examples() {
        let same = TeacherPredictionSet::new(vec![pv(&[0.3, 0.7]); 3]).unwrap();
        let cfg = DistillConfig { lambda: 50.0, ..DistillConfig::default() };
        let b = unlabeled_sample_loss(&same, &pv(&[0.5, 0.5]), &cfg).unwrap();
        assert!(b.disagreement.unwrap() <= 1e-12);
        assert!((b.total - b.distill_loss).abs() < 1e-10);

        let split = TeacherPredictionSet::new(vec![pv(&[0.8, 0.2]), pv(&[0.2, 0.8])]).unwrap();
        let zero = DistillConfig { lambda: 0.0, ..DistillConfig::default() };
        let b = unlabeled_sample_loss(&split, &pv(&[0.3, 0.7]), &zero).unwrap();
        assert_eq!(b.total, b.distill_loss);

        let b = unlabeled_sample_loss(&split, &pv(&[0.5, 0.5]), &DistillConfig::default()).unwrap();
        assert_eq!(b.target, vec![0.5, 0.5]);
        assert!((b.distill_loss - std::f64::consts::LN_2).abs() < 1e-6);
        assert!((b.disagreement.unwrap() - 0.831_776_616_671_934_4).abs() < 1e-6);
        assert!((b.total - 6.458_583_347_578_362).abs() < 1e-4);
        assert!((b.total - b.reconstruct_total()).abs() < 1e-12);
    }

    #[test]
    fn disagreement_flag_off_gives_plain_distillation() {
        let split = TeacherPredictionSet::new(vec![pv(&[0.8, 0.2]), pv(&[0.2, 0.8])]).unwrap();
        let cfg = DistillConfig { enable_disagreement_weighting: false, ..DistillConfig::default() };
        let b = unlabeled_sample_loss(&split, &pv(&[0.4, 0.6]), &cfg).unwrap();
        assert_eq!(b.total, b.distill_loss);
    }

    #[test]
    fn gradient_identities() {
        // Student already at target, weight 1, no label term.
        let preds = TeacherPredictionSet::new(vec![pv(&[0.3, 0.7]), pv(&[0.5, 0.5])]).unwrap();
        let student = uniform_ensemble(&preds);
        let b = unlabeled_sample_loss(&preds, &student, &DistillConfig::baseline()).unwrap();
        let g = student_logit_gradient(&b, &student).unwrap();
        assert!(g.iter().map(|v| v * v).sum::<f64>().sqrt() <= 1e-9);

        let cfg = DistillConfig::default();
        let s = pv(&[0.1, 0.9]);
        let b = unlabeled_sample_loss(&preds, &s, &cfg).unwrap();
        let g = student_logit_gradient(&b, &s).unwrap();
        let w = 1.0 + cfg.lambda * b.disagreement.unwrap();
        for c in 0..2 {
            assert_eq!(g[c], w * (s.as_slice()[c] - b.target[c]));
        }
    }

    #[test]
    fn composite_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let h = 1e-5;
        for trial in 0..40 {
            let n = rng.random_range(2..=5);
            let c = rng.random_range(2..=4);
            let preds: Vec<ProbVector> = (0..n)
                .map(|_| softmax_slice(&(0..c).map(|_| rng.random_range(-2.0..2.0)).collect::<Vec<_>>()).unwrap())
                .collect();
            let z: Vec<f64> = (0..c).map(|_| rng.random_range(-2.0..2.0)).collect();
            let label = rng.random_range(0..c);
            let cfg = DistillConfig {
                lambda: rng.random_range(0.0..20.0),
                weight_mode: if trial % 2 == 0 { WeightMode::InverseLoss } else { WeightMode::LiteralEq1 },
                ..DistillConfig::default()
            };
            let labeled = TeacherPredictionSet::labeled(preds.clone(), label).unwrap();
            let unlabeled = TeacherPredictionSet::new(preds).unwrap();
            let objective = |zz: &[f64], lab: bool| -> f64 {
                let p = softmax_slice(zz).unwrap();
                if lab {
                    labeled_sample_loss(&labeled, &p, label, &cfg).unwrap().total
                } else {
                    unlabeled_sample_loss(&unlabeled, &p, &cfg).unwrap().total
                }
            };
            for lab in [true, false] {
                let p = softmax_slice(&z).unwrap();
                let b = if lab {
                    labeled_sample_loss(&labeled, &p, label, &cfg).unwrap()
                } else {
                    unlabeled_sample_loss(&unlabeled, &p, &cfg).unwrap()
                };
                let g = student_logit_gradient(&b, &p).unwrap();
                for k in 0..c {
                    let mut zp = z.clone();
                    zp[k] += h;
                    let mut zm = z.clone();
                    zm[k] -= h;
                    let fd = (objective(&zp, lab) - objective(&zm, lab)) / (2.0 * h);
                    let rel = (g[k] - fd).abs() / g[k].abs().max(fd.abs()).max(1e-8);
                    assert!(rel < 1e-4, "trial {trial} lab {lab} k {k}: {} vs {fd}", g[k]);
                }
            }
        }
    }

    #[test]
    fn combined_loss_examples() {
        let cfg = DistillConfig::default();
        let mk = |total: f64| LossBreakdown {
            kind: SampleKind::Unlabeled,
            label: None,
            teacher_losses: None,
            ensemble_weights: vec![0.5, 0.5],
            target: vec![0.5, 0.5],
            student_task_loss: None,
            distill_loss: total,
            disagreement: Some(0.0),
            labeled_weight: None,
            disagreement_weight: Some(1.0),
            total,
        };
        assert!((combined_batch_loss(&[mk(0.4)], &[mk(0.6)], &cfg).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(combined_batch_loss(&[mk(0.2), mk(0.4)], &[], &cfg).unwrap(), 0.30000000000000004);
        assert_eq!(combined_batch_loss(&[], &[mk(0.6)], &cfg).unwrap(), 0.6);
        assert!(matches!(combined_batch_loss(&[], &[], &cfg), Err(Error::EmptyBatches)));
    }

    #[test]
    fn lambda_affinity() {
        let preds = TeacherPredictionSet::new(vec![pv(&[0.7, 0.2, 0.1]), pv(&[0.1, 0.6, 0.3]), pv(&[0.3, 0.3, 0.4])]).unwrap();
        let s = pv(&[0.2, 0.5, 0.3]);
        let at = |lambda: f64| {
            unlabeled_sample_loss(&preds, &s, &DistillConfig { lambda, ..DistillConfig::default() }).unwrap()
        };
        let base = at(0.0);
        let slope = base.disagreement.unwrap() * base.distill_loss;
        assert!(slope >= 0.0);
        for lambda in [0.0, 5.0, 10.0, 20.0] {
            assert!((at(lambda).total - (base.distill_loss + lambda * slope)).abs() < 1e-10);
        }
    }

    #[test]
    fn all_flags_off_reduces_to_baselines() {
        let preds = vec![pv(&[0.7, 0.3]), pv(&[0.2, 0.8]), pv(&[0.5, 0.5])];
        let labeled = TeacherPredictionSet::labeled(preds.clone(), 1).unwrap();
        let s = pv(&[0.35, 0.65]);
        let off = DistillConfig::baseline();
        let b = labeled_sample_loss(&labeled, &s, 1, &off).unwrap();
        let avg = uniform_ensemble(&labeled);
        let kd = distill_loss(&avg, &s).unwrap();
        let ls = crate::numerics::cross_entropy(&ProbVector::one_hot(1, 2).unwrap(), &s).unwrap();
        assert_eq!(b.total, kd + ls);
        let u = unlabeled_sample_loss(&TeacherPredictionSet::new(preds).unwrap(), &s, &off).unwrap();
        assert_eq!(u.total, kd);
    }

    #[test]
    fn each_flag_changes_only_its_term() {
        let preds = TeacherPredictionSet::labeled(vec![pv(&[0.9, 0.1]), pv(&[0.3, 0.7])], 0).unwrap();
        let s = pv(&[0.6, 0.4]);
        let full = DistillConfig::default();
        let a = labeled_sample_loss(&preds, &s, 0, &full).unwrap();

        let no_tw = labeled_sample_loss(&preds, &s, 0, &DistillConfig { enable_teacher_weighting: false, ..full }).unwrap();
        assert_ne!(no_tw.target, a.target);
        assert_eq!(no_tw.labeled_weight, a.labeled_weight);
        assert_eq!(no_tw.student_task_loss, a.student_task_loss);

        let no_lw = labeled_sample_loss(&preds, &s, 0, &DistillConfig { enable_labeled_loss_weighting: false, ..full }).unwrap();
        assert_eq!(no_lw.target, a.target);
        assert_eq!(no_lw.distill_loss, a.distill_loss);
        assert_eq!(no_lw.labeled_weight, Some(1.0));

        let no_dw = labeled_sample_loss(&preds, &s, 0, &DistillConfig { enable_disagreement_weighting: false, ..full }).unwrap();
        assert_eq!(no_dw, a);
    }

    #[test]
    fn config_validation() {
        assert!(DistillConfig { lambda: -1.0, ..DistillConfig::default() }.validate().is_err());
        assert!(DistillConfig::default().validate().is_ok());
    }
}
