//! First-order optimizers over [`MlpParameters`].
//!
//! Updates are computed in full before being written back, so a step that
//! would produce a non-finite parameter fails with [`Error::Diverged`] and
//! leaves the parameters (and optimizer state) untouched.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{GradientSet, MlpParameters};

pub const DEFAULT_BETA1: f64 = 0.9;
pub const DEFAULT_BETA2: f64 = 0.999;
pub const DEFAULT_EPS_ADAM: f64 = 1e-8;

fn check(params: &MlpParameters, grads: &GradientSet) -> Result<()> {
    if grads.weights.len() != params.layers().len()
        || params.layers().iter().enumerate().any(|(i, l)| {
            grads.weights[i].len() != l.weights.len() || grads.biases[i].len() != l.biases.len()
        })
    {
        return Err(Error::DimensionMismatch {
            context: "optimizer gradient",
            expected: params.num_parameters(),
            found: grads.iter().count(),
        });
    }
    if !grads.is_finite() {
        return Err(Error::Diverged("non-finite gradient".into()));
    }
    Ok(())
}

fn commit(params: &mut MlpParameters, updated: Vec<f64>) -> Result<()> {
    if updated.iter().any(|v| !v.is_finite()) {
        return Err(Error::Diverged("update produced non-finite parameter".into()));
    }
    params.iter_mut().zip(updated).for_each(|(p, u)| *p = u);
    Ok(())
}

/// `θ ← θ − lr·g`.
pub fn sgd_step(params: &mut MlpParameters, grads: &GradientSet, lr: f64) -> Result<()> {
    check(params, grads)?;
    let updated: Vec<f64> = params.iter().zip(grads.iter()).map(|(p, g)| p - lr * g).collect();
    commit(params, updated)
}

/// Moment accumulators and step counter for bias-corrected Adam.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(params: &MlpParameters) -> Self {
        Self::with_hyperparameters(params, DEFAULT_BETA1, DEFAULT_BETA2, DEFAULT_EPS_ADAM)
    }

    pub fn with_hyperparameters(params: &MlpParameters, beta1: f64, beta2: f64, eps: f64) -> Self {
        let n = params.num_parameters();
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
            beta1,
            beta2,
            eps,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    pub fn first_moment(&self) -> &[f64] {
        &self.m
    }

    pub fn second_moment(&self) -> &[f64] {
        &self.v
    }
}

pub fn adam_step(
    params: &mut MlpParameters,
    grads: &GradientSet,
    state: &mut AdamState,
    lr: f64,
) -> Result<()> {
    check(params, grads)?;
    if state.m.len() != params.num_parameters() {
        return Err(Error::DimensionMismatch {
            context: "adam state",
            expected: params.num_parameters(),
            found: state.m.len(),
        });
    }
    let t = state.t + 1;
    let bc1 = 1.0 - state.beta1.powi(t as i32);
    let bc2 = 1.0 - state.beta2.powi(t as i32);
    let n = state.m.len();
    let mut m = Vec::with_capacity(n);
    let mut v = Vec::with_capacity(n);
    let mut updated = Vec::with_capacity(n);
    for (((p, g), &m0), &v0) in params.iter().zip(grads.iter()).zip(&state.m).zip(&state.v) {
        let m1 = state.beta1 * m0 + (1.0 - state.beta1) * g;
        let v1 = state.beta2 * v0 + (1.0 - state.beta2) * g * g;
        let m_hat = m1 / bc1;
        let v_hat = v1 / bc2;
        updated.push(p - lr * m_hat / (v_hat.sqrt() + state.eps));
        m.push(m1);
        v.push(v1);
    }
    commit(params, updated)?;
    state.m = m;
    state.v = v;
    state.t = t;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

/// A configured optimizer bound to one model.
#[derive(Debug, Clone)]
pub enum Optimizer {
    Sgd { lr: f64 },
    Adam { lr: f64, state: AdamState },
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, params: &MlpParameters, lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        match kind {
            OptimizerKind::Sgd => Optimizer::Sgd { lr },
            OptimizerKind::Adam => Optimizer::Adam {
                lr,
                state: AdamState::with_hyperparameters(params, beta1, beta2, eps),
            },
        }
    }

    pub fn step(&mut self, params: &mut MlpParameters, grads: &GradientSet) -> Result<()> {
        match self {
            Optimizer::Sgd { lr } => sgd_step(params, grads, *lr),
            Optimizer::Adam { lr, state } => adam_step(params, grads, state, *lr),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Activation, DenseLayer};
    use proptest::prelude::*;

    /// A 1→2 linear layer; tests drive only its first weight.
    fn scalar(theta: f64) -> MlpParameters {
        let layer = DenseLayer {
            in_dim: 1,
            out_dim: 2,
            weights: vec![theta, 0.0],
            biases: vec![0.0, 0.0],
        };
        MlpParameters::from_layers(Activation::Relu, vec![layer]).unwrap()
    }

    fn grad(g: f64) -> GradientSet {
        let mut gs = GradientSet::zeros_like(&scalar(0.0));
        gs.weights[0][0] = g;
        gs
    }

    fn first(p: &MlpParameters) -> f64 {
        p.layers()[0].weights[0]
    }

    #[test]
    fn sgd_examples() {
        let mut p = scalar(1.0);
        sgd_step(&mut p, &grad(0.0), 0.1).unwrap();
        assert_eq!(first(&p), 1.0);

        let mut p = scalar(1.0);
        sgd_step(&mut p, &grad(0.5), 0.1).unwrap();
        assert!((first(&p) - 0.95).abs() < 1e-15);

        let mut two = scalar(1.0);
        let g = grad(0.37);
        sgd_step(&mut two, &g, 0.01).unwrap();
        sgd_step(&mut two, &g, 0.01).unwrap();
        let mut one = scalar(1.0);
        sgd_step(&mut one, &g, 0.02).unwrap();
        assert!((first(&two) - first(&one)).abs() < 1e-12);
    }

    #[test]
    fn non_finite_gradient_is_rejected() {
        let mut p = scalar(1.0);
        let before = p.clone();
        let err = sgd_step(&mut p, &grad(f64::NAN), 0.1).unwrap_err();
        assert!(err.to_string().contains("diverged"));
        assert_eq!(p, before);

        let mut state = AdamState::new(&p);
        assert!(adam_step(&mut p, &grad(f64::INFINITY), &mut state, 0.1).is_err());
        assert_eq!(state.step_count(), 0);
        assert_eq!(p, before);
    }

    #[test]
    fn overflowing_update_is_rejected() {
        let mut p = scalar(f64::MAX);
        assert!(matches!(
            sgd_step(&mut p, &grad(-1.0), f64::MAX),
            Err(Error::Diverged(_))
        ));
        assert_eq!(first(&p), f64::MAX);
    }

    #[test]
    fn adam_zero_gradient_leaves_parameters() {
        let mut p = scalar(0.3);
        let mut state = AdamState::new(&p);
        adam_step(&mut p, &grad(0.0), &mut state, 1e-3).unwrap();
        assert_eq!(first(&p), 0.3);
        assert_eq!(state.step_count(), 1);
    }

    #[test]
    fn adam_three_steps_match_scalar_recurrence() {
        let (lr, g, b1, b2, eps) = (0.01, 0.25, 0.9f64, 0.999f64, 1e-8);
        let mut p = scalar(1.0);
        let mut state = AdamState::new(&p);
        let gs = grad(g);
        for _ in 0..3 {
            adam_step(&mut p, &gs, &mut state, lr).unwrap();
        }
        let (mut theta, mut m, mut v) = (1.0f64, 0.0f64, 0.0f64);
        for t in 1..=3 {
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let mh = m / (1.0 - b1.powi(t));
            let vh = v / (1.0 - b2.powi(t));
            theta -= lr * mh / (vh.sqrt() + eps);
        }
        assert!((first(&p) - theta).abs() < 1e-10);
        assert_eq!(state.step_count(), 3);
    }

    proptest! {
        // The first bias-corrected step has |Δθ| = lr·|g|/(|g| + ε); for |g| ≥ 1e-2
        // that is lr within 1e-6 relative.
        #[test]
        fn adam_first_step_moves_by_lr(g in prop_oneof![1e-2f64..1e2, -1e2f64..-1e-2], lr in 1e-4f64..1e-1) {
            let mut p = scalar(0.0);
            let mut state = AdamState::new(&p);
            adam_step(&mut p, &grad(g), &mut state, lr).unwrap();
            let delta = -first(&p);
            prop_assert!((delta - lr * g.signum()).abs() <= 1e-6 * lr);
        }
    }
}
