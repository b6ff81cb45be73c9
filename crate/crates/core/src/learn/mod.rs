//! End-to-end learning: an optimisation layer that solves the relaxed estimation
//! problem with learnable measurement weights, dense post-processing layers, the hybrid
//! Huber loss, Adam, and fully connected baselines that map measurements straight to
//! states.

mod adam;
mod mlp;
mod model;
mod train;

pub use adam::AdamState;
pub use mlp::{Dense, Mlp, MlpTape, Normalizer};
pub use model::{solve_layer, Grads, LearnableParams, ModelKind, Pass, Physics, SampleOutput};
pub use train::{
    evaluate, gradient_check, toy_check_sample, toy_measurement_set, train, EpochRecord,
    Evaluation, GradCheckReport, GroupCheck, TrainedModel,
};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::conic::ConicError;
use crate::rse::RseError;

#[derive(Debug, Error)]
pub enum LearnError {
    #[error(transparent)]
    Rse(#[from] RseError),
    #[error(transparent)]
    Conic(#[from] ConicError),
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error("invalid input: {0}")]
    Invalid(String),
    #[error(
        "epoch {epoch}: skipped {skipped} of {total} samples (limit 20%); first failures: {reasons:?}"
    )]
    TooManySkipped {
        epoch: usize,
        skipped: usize,
        total: usize,
        reasons: Vec<String>,
    },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Largest fraction of an epoch's samples that may be skipped before training aborts.
pub const MAX_SKIP_FRACTION: f64 = 0.2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub alpha: f64,
    pub zeta: f64,
    pub batch: usize,
    pub epochs: usize,
    pub rho: f64,
    pub delta: f64,
    pub eps_p: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    /// Desk-scale defaults: 30 epochs with batches of 8.
    fn default() -> Self {
        Self {
            alpha: 1e-3,
            zeta: 5e-4,
            batch: 8,
            epochs: 30,
            rho: 1.0,
            delta: 1e-5,
            eps_p: 1e-5,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// Batch 32, 300 epochs.
    pub fn full_scale() -> Self {
        Self {
            batch: 32,
            epochs: 300,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), LearnError> {
        let bad = |m: String| Err(LearnError::Config(m));
        if !(self.alpha > 0.0) {
            return bad(format!("alpha must be positive, got {}", self.alpha));
        }
        if !(self.zeta >= 0.0) {
            return bad(format!("zeta must be non-negative, got {}", self.zeta));
        }
        if self.batch == 0 {
            return bad("batch must be at least 1".into());
        }
        if !(self.rho >= 0.0) {
            return bad(format!("rho must be non-negative, got {}", self.rho));
        }
        if !(self.delta > 0.0) {
            return bad(format!("delta must be positive, got {}", self.delta));
        }
        if !(self.eps_p > 0.0) {
            return bad(format!("eps_p must be positive, got {}", self.eps_p));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return bad(format!("{name} must lie in [0, 1), got {b}"));
            }
        }
        if !(self.adam_eps > 0.0) {
            return bad(format!("adam_eps must be positive, got {}", self.adam_eps));
        }
        Ok(())
    }
}

/// `ln(1 + eˣ)` without overflow.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Solves `softplus(x) = y` for `y > 0`.
pub fn inverse_softplus(y: f64) -> f64 {
    y + (-(-y).exp_m1()).ln()
}

/// `ŵ = softplus(w) + ε_p`, elementwise.
pub fn positive_weight(w_raw: &[f64], eps_p: f64) -> Vec<f64> {
    w_raw.iter().map(|&w| softplus(w) + eps_p).collect()
}

/// Raw weight whose positive weight is exactly `target` (requires `target > eps_p`).
pub fn raw_weight_for(target: f64, eps_p: f64) -> f64 {
    inverse_softplus(target - eps_p)
}

/// Unweighted Huber value of one residual.
pub fn huber(eps: f64, delta: f64) -> f64 {
    let a = eps.abs();
    if a <= delta {
        0.5 * eps * eps
    } else {
        delta * (a - 0.5 * delta)
    }
}

/// Derivative of [`huber`] with respect to the residual.
pub fn huber_grad(eps: f64, delta: f64) -> f64 {
    if eps.abs() <= delta {
        eps
    } else {
        delta * eps.signum()
    }
}

/// `Σ ŵ_m huber(ε_m)`.
pub fn huber_loss(eps: &[f64], w_hat: &[f64], delta: f64) -> f64 {
    eps.iter()
        .zip(w_hat)
        .map(|(&e, &w)| w * huber(e, delta))
        .sum()
}

/// `|δ Σ ŵ|ε| − L_huber|`: the Huber tails have slope `ŵδ`, so this is the WLAV term the
/// loss approaches as `δ → 0`.
pub fn huber_wlav_gap(eps: &[f64], w_hat: &[f64], delta: f64) -> f64 {
    let wlav: f64 = eps.iter().zip(w_hat).map(|(e, w)| w * e.abs()).sum();
    (delta * wlav - huber_loss(eps, w_hat, delta)).abs()
}

/// Bound on [`huber_wlav_gap`] for `δ ≤ 1`: `ŵδ/2` on linear-branch entries and `ŵδ²/2`
/// on quadratic-branch entries.
pub fn huber_gap_bound(eps: &[f64], w_hat: &[f64], delta: f64) -> f64 {
    eps.iter()
        .zip(w_hat)
        .map(|(&e, &w)| {
            if e.abs() > delta {
                w * delta / 2.0
            } else {
                w * delta * delta / 2.0
            }
        })
        .sum()
}

/// Mean squared error.
pub fn mse(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / a.len().max(1) as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    #[serde(rename = "L_acc")]
    pub l_acc: f64,
    #[serde(rename = "L_huber")]
    pub l_huber: f64,
    #[serde(rename = "L_reg")]
    pub l_reg: f64,
    #[serde(rename = "L_hybrid")]
    pub l_hybrid: f64,
}

impl LossBreakdown {
    pub fn new(l_acc: f64, l_huber: f64, l_reg: f64, rho: f64) -> Self {
        Self {
            l_acc,
            l_huber,
            l_reg,
            l_hybrid: l_acc + rho * (l_huber + l_reg),
        }
    }

    /// Component-wise mean; the hybrid value is averaged too, so the composition
    /// identity carries over for a fixed `rho`.
    pub fn mean<'a>(items: impl IntoIterator<Item = &'a LossBreakdown>) -> Self {
        let mut acc = Self::default();
        let mut n = 0usize;
        for l in items {
            acc.l_acc += l.l_acc;
            acc.l_huber += l.l_huber;
            acc.l_reg += l.l_reg;
            acc.l_hybrid += l.l_hybrid;
            n += 1;
        }
        if n > 0 {
            let k = n as f64;
            acc.l_acc /= k;
            acc.l_huber /= k;
            acc.l_reg /= k;
            acc.l_hybrid /= k;
        }
        acc
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    #[test]
    fn softplus_values() {
        assert_abs_diff_eq!(
            positive_weight(&[0.0], 1e-5)[0],
            0.693_157_180_56,
            epsilon = 1e-10
        );
        assert_abs_diff_eq!(positive_weight(&[-40.0], 1e-5)[0], 1e-5, epsilon = 1e-15);
        assert_abs_diff_eq!(
            positive_weight(&[40.0], 1e-5)[0],
            40.0 + 1e-5,
            epsilon = 1e-12
        );
        assert!(softplus(1000.0).is_finite() && softplus(-1000.0) >= 0.0);
        assert_abs_diff_eq!(
            positive_weight(&[raw_weight_for(1.0, 1e-5)], 1e-5)[0],
            1.0,
            epsilon = 1e-14
        );
    }

    #[test]
    fn huber_branches() {
        let d = 0.1;
        assert_eq!(huber(0.0, d), 0.0);
        assert_abs_diff_eq!(huber(d, d), d * d / 2.0, epsilon = 1e-15);
        assert_abs_diff_eq!(huber(d * (1.0 + 1e-12), d), d * d / 2.0, epsilon = 1e-12);
        assert_abs_diff_eq!(huber(2.0 * d, d), 1.5 * d * d, epsilon = 1e-15);
        assert_abs_diff_eq!(huber(-2.0 * d, d), 1.5 * d * d, epsilon = 1e-15);
    }

    #[test]
    fn composition_and_rho_zero() {
        let l = LossBreakdown::new(0.3, 0.2, 0.1, 0.0);
        assert_eq!(l.l_hybrid, l.l_acc);
        let l = LossBreakdown::new(0.3, 0.2, 0.1, 2.0);
        assert_eq!(l.l_hybrid, 0.3 + 2.0 * (0.2 + 0.1));
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        assert!(TrainConfig {
            alpha: 0.0,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(TrainConfig {
            batch: 0,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(TrainConfig {
            delta: -1.0,
            ..Default::default()
        }
        .validate()
        .is_err());
        let p = TrainConfig::full_scale();
        assert_eq!((p.batch, p.epochs, p.alpha, p.zeta), (32, 300, 1e-3, 5e-4));
    }

    proptest! {
        #[test]
        fn softplus_is_positive_and_monotone(a in -50.0f64..50.0, b in -50.0f64..50.0) {
            let (wa, wb) = (positive_weight(&[a], 1e-5)[0], positive_weight(&[b], 1e-5)[0]);
            prop_assert!(wa >= 1e-5 && wb >= 1e-5);
            if a < b { prop_assert!(wa <= wb); }
        }

        #[test]
        fn huber_grad_matches_difference(e in -1.0f64..1.0, d in 1e-3f64..0.5) {
            prop_assume!((e.abs() - d).abs() > 1e-4);
            let h = 1e-7;
            let fd = (huber(e + h, d) - huber(e - h, d)) / (2.0 * h);
            prop_assert!((fd - huber_grad(e, d)).abs() < 1e-6);
        }
    }
}
