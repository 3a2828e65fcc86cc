//! Probability and divergence primitives.
//!
//! Everything here works in `f64`. Probabilities are clamped to
//! `[EPS_LOG, 1]` before any logarithm, so one-hot or saturated predictions
//! never produce `-inf`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Lower clamp applied to probabilities before taking a log.
pub const EPS_LOG: f64 = 1e-12;

/// Tolerance on `Σ p = 1` accepted by [`ProbVector::new`].
pub const SUM_TOLERANCE: f64 = 1e-9;

/// A length-`C` probability distribution over classes (`C >= 2`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ProbVector(Vec<f64>);

impl ProbVector {
    /// Validates that `values` is a distribution over at least two classes.
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.len() < 2 {
            return Err(Error::InvalidProbabilities(format!(
                "need at least 2 classes, got {}",
                values.len()
            )));
        }
        if let Some(v) = values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::InvalidProbabilities(format!(
                "element {v} outside [0, 1]"
            )));
        }
        let sum: f64 = values.iter().sum();
        if (sum - 1.0).abs() > SUM_TOLERANCE {
            return Err(Error::InvalidProbabilities(format!("sums to {sum}")));
        }
        Ok(Self(values))
    }

    /// Uniform distribution over `num_classes` classes.
    pub fn uniform(num_classes: usize) -> Result<Self> {
        Self::new(vec![1.0 / num_classes as f64; num_classes])
    }

    /// One-hot distribution at `label`.
    pub fn one_hot(label: usize, num_classes: usize) -> Result<Self> {
        if label >= num_classes {
            return Err(Error::InvalidLabel { label, num_classes });
        }
        let mut v = vec![0.0; num_classes];
        v[label] = 1.0;
        Self::new(v)
    }

    /// For values already known to be a distribution (convex combinations of
    /// distributions, softmax outputs).
    pub(crate) fn from_trusted(values: Vec<f64>) -> Self {
        debug_assert!(values.len() >= 2);
        Self(values)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Index of the largest probability; ties go to the lowest index.
    pub fn argmax(&self) -> usize {
        argmax(&self.0)
    }
}

impl AsRef<[f64]> for ProbVector {
    fn as_ref(&self) -> &[f64] {
        &self.0
    }
}

/// Unnormalized class scores produced by a model.
#[derive(Debug, Clone, PartialEq)]
pub struct LogitVector(Vec<f64>);

impl LogitVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if let Some(v) = values.iter().find(|v| !v.is_finite()) {
            return Err(Error::InvalidLogits(format!("non-finite value {v}")));
        }
        Ok(Self(values))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

pub(crate) fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Max-subtracted softmax.
pub fn softmax(logits: &LogitVector) -> Result<ProbVector> {
    softmax_slice(logits.as_slice())
}

/// [`softmax`] over a raw slice, validating finiteness first.
pub fn softmax_slice(logits: &[f64]) -> Result<ProbVector> {
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidLogits("non-finite input".into()));
    }
    if logits.len() < 2 {
        return Err(Error::InvalidLogits(format!(
            "need at least 2 classes, got {}",
            logits.len()
        )));
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    Ok(ProbVector::from_trusted(
        exps.into_iter().map(|e| e / sum).collect(),
    ))
}

#[inline]
fn clamp_prob(p: f64, eps: f64) -> f64 {
    p.clamp(eps, 1.0)
}

fn check_len(a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::ClassCountMismatch {
            expected: a.len(),
            found: b.len(),
        });
    }
    Ok(())
}

/// `-Σ target[i] · ln(pred[i])` with `pred` clamped to `[EPS_LOG, 1]`.
pub fn cross_entropy(target: &ProbVector, pred: &ProbVector) -> Result<f64> {
    cross_entropy_with_eps(target.as_slice(), pred.as_slice(), EPS_LOG)
}

pub fn cross_entropy_with_eps(target: &[f64], pred: &[f64], eps: f64) -> Result<f64> {
    check_len(target, pred)?;
    let ce: f64 = target
        .iter()
        .zip(pred)
        .map(|(&t, &p)| -t * clamp_prob(p, eps).ln())
        .sum();
    Ok(ce.max(0.0))
}

/// `KL(p ‖ q) = Σ p[i] · ln(p[i] / q[i])`, both arguments clamped to `[EPS_LOG, 1]`.
pub fn kl_divergence(p: &ProbVector, q: &ProbVector) -> Result<f64> {
    kl_divergence_with_eps(p.as_slice(), q.as_slice(), EPS_LOG)
}

pub fn kl_divergence_with_eps(p: &[f64], q: &[f64], eps: f64) -> Result<f64> {
    check_len(p, q)?;
    let kl: f64 = p
        .iter()
        .zip(q)
        .map(|(&pi, &qi)| {
            let pi = clamp_prob(pi, eps);
            let qi = clamp_prob(qi, eps);
            pi * (pi / qi).ln()
        })
        .sum();
    // Clamping leaves the inputs unnormalized by at most C·eps, which can push
    // the sum a hair below zero.
    Ok(kl.max(0.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn pv(v: &[f64]) -> ProbVector {
        ProbVector::new(v.to_vec()).unwrap()
    }

    fn logits(v: &[f64]) -> LogitVector {
        LogitVector::new(v.to_vec()).unwrap()
    }

    #[test]
    fn softmax_examples() {
        let s = softmax(&logits(&[0.0, 0.0, 0.0])).unwrap();
        for &p in s.as_slice() {
            assert!((p - 1.0 / 3.0).abs() < 1e-15);
        }

        let s = softmax(&logits(&[1000.0, 0.0])).unwrap();
        assert!((s.as_slice()[0] - 1.0).abs() < 1e-12);
        assert!(s.as_slice()[1] < 1e-12);
        assert!((s.as_slice().iter().sum::<f64>() - 1.0).abs() < 1e-9);

        // mpmath, 40 digits
        let s = softmax(&logits(&[1.0, 2.0, 3.0])).unwrap();
        let expected = [0.090_030_573_170_380_46, 0.244_728_471_054_797_65, 0.665_240_955_774_821_9];
        for (a, b) in s.as_slice().iter().zip(expected) {
            assert!((a - b).abs() < 1e-7);
        }
    }

    #[test]
    fn softmax_rejects_non_finite() {
        assert!(matches!(
            softmax_slice(&[f64::NAN, 0.0]),
            Err(Error::InvalidLogits(_))
        ));
        assert!(LogitVector::new(vec![f64::INFINITY, 0.0]).is_err());
    }

    #[test]
    fn cross_entropy_examples() {
        assert!(cross_entropy(&pv(&[1.0, 0.0]), &pv(&[1.0, 0.0])).unwrap() <= 1e-10);
        let h = cross_entropy(&pv(&[0.5, 0.5]), &pv(&[0.5, 0.5])).unwrap();
        assert!((h - std::f64::consts::LN_2).abs() < 1e-7);
        // -0.7 ln 0.4 - 0.3 ln 0.6 (mpmath)
        let h = cross_entropy(&pv(&[0.7, 0.3]), &pv(&[0.4, 0.6])).unwrap();
        assert!((h - 0.794_651_199_441_705_7).abs() < 1e-6);
    }

    #[test]
    fn kl_examples() {
        assert!(kl_divergence(&pv(&[0.3, 0.7]), &pv(&[0.3, 0.7])).unwrap() < 1e-12);
        let kl = kl_divergence(&pv(&[1.0, 0.0]), &pv(&[0.5, 0.5])).unwrap();
        assert!((kl - std::f64::consts::LN_2).abs() < 1e-6);
        let kl = kl_divergence(&pv(&[0.8, 0.2]), &pv(&[0.2, 0.8])).unwrap();
        assert!((kl - 0.831_776_616_671_934_4).abs() < 1e-6);
    }

    #[test]
    fn length_mismatch_is_reported() {
        let err = cross_entropy(&pv(&[0.5, 0.5]), &pv(&[0.2, 0.3, 0.5])).unwrap_err();
        assert!(err.to_string().contains("class-count mismatch"));
        let err = kl_divergence(&pv(&[0.5, 0.5]), &pv(&[0.2, 0.3, 0.5])).unwrap_err();
        assert!(err.to_string().contains("class-count mismatch"));
    }

    #[test]
    fn prob_vector_validation() {
        assert!(ProbVector::new(vec![1.0]).is_err());
        assert!(ProbVector::new(vec![0.6, 0.6]).is_err());
        assert!(ProbVector::new(vec![1.1, -0.1]).is_err());
        assert!(ProbVector::one_hot(3, 3).is_err());
    }

    fn distribution(max_c: usize) -> impl Strategy<Value = Vec<f64>> {
        (2..=max_c)
            .prop_flat_map(|c| prop::collection::vec(0.0f64..1.0, c))
            .prop_filter("non-degenerate", |v| v.iter().sum::<f64>() > 1e-3)
            .prop_map(|v| {
                let s: f64 = v.iter().sum();
                v.into_iter().map(|x| x / s).collect()
            })
    }

    proptest! {
        #[test]
        fn softmax_is_a_distribution(z in prop::collection::vec(-1e4f64..1e4, 2..6)) {
            let s = softmax_slice(&z).unwrap();
            prop_assert!(ProbVector::new(s.clone().into_inner()).is_ok());
            prop_assert_eq!(s.argmax(), argmax(&z));
        }

        #[test]
        fn softmax_shift_invariant(z in prop::collection::vec(-50.0f64..50.0, 2..6), c in -100.0f64..100.0) {
            let a = softmax_slice(&z).unwrap();
            let shifted: Vec<f64> = z.iter().map(|v| v + c).collect();
            let b = softmax_slice(&shifted).unwrap();
            for (x, y) in a.as_slice().iter().zip(b.as_slice()) {
                prop_assert!((x - y).abs() < 1e-12);
            }
        }

        #[test]
        fn kl_nonnegative_and_zero_on_self(p in distribution(5), q in distribution(5)) {
            let p = ProbVector::new(p).unwrap();
            prop_assert!(kl_divergence(&p, &p).unwrap() <= 1e-12);
            if q.len() == p.len() {
                let q = ProbVector::new(q).unwrap();
                prop_assert!(kl_divergence(&p, &q).unwrap() >= 0.0);
            }
        }

        #[test]
        fn gibbs_inequality(p in distribution(4), q in distribution(4)) {
            prop_assume!(p.len() == q.len());
            let p = ProbVector::new(p).unwrap();
            let q = ProbVector::new(q).unwrap();
            let cross = cross_entropy(&p, &q).unwrap();
            let entropy = cross_entropy(&p, &p).unwrap();
            prop_assert!(cross >= entropy - 1e-9);
        }
    }
}
