use serde::{Deserialize, Serialize};

use super::TrainConfig;

/// Adam moments for a list of parameter tensors, with decoupled weight decay.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub step: u64,
}

impl AdamState {
    pub fn new(shapes: &[usize]) -> Self {
        Self {
            m: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            v: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            step: 0,
        }
    }

    /// One bias-corrected step: `θ ← θ − α (m̂/(√v̂ + ε) + ζ θ)`.
    pub fn update(&mut self, params: &mut [&mut [f64]], grads: &[&[f64]], cfg: &TrainConfig) {
        assert_eq!(
            params.len(),
            self.m.len(),
            "parameter tensors do not match the state"
        );
        assert_eq!(
            grads.len(),
            self.m.len(),
            "gradient tensors do not match the state"
        );
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - cfg.beta1.powi(t);
        let c2 = 1.0 - cfg.beta2.powi(t);
        for (k, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            assert_eq!(p.len(), g.len());
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            for i in 0..p.len() {
                m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
                v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
                let mh = m[i] / c1;
                let vh = v[i] / c2;
                p[i] -= cfg.alpha * (mh / (vh.sqrt() + cfg.adam_eps) + cfg.zeta * p[i]);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    /// Scalar Adam written out directly.
    fn oracle(theta0: f64, grads: &[f64], cfg: &TrainConfig) -> f64 {
        let (mut th, mut m, mut v) = (theta0, 0.0, 0.0);
        for (t, g) in grads.iter().enumerate() {
            let t = (t + 1) as i32;
            m = 0.9 * m + 0.1 * g;
            v = 0.999 * v + 0.001 * g * g;
            let mh = m / (1.0 - 0.9f64.powi(t));
            let vh = v / (1.0 - 0.999f64.powi(t));
            th -= cfg.alpha * (mh / (vh.sqrt() + cfg.adam_eps) + cfg.zeta * th);
        }
        th
    }

    #[test]
    fn matches_scalar_oracle() {
        let cfg = TrainConfig::default();
        let grads = [0.3, -1.2, 0.05, 2.0];
        let mut st = AdamState::new(&[1]);
        let mut p = vec![0.7];
        for g in grads {
            st.update(&mut [&mut p[..]], &[&[g][..]], &cfg);
        }
        assert_abs_diff_eq!(p[0], oracle(0.7, &grads, &cfg), epsilon = 1e-15);
    }

    #[test]
    fn first_step_is_sign_like() {
        let cfg = TrainConfig {
            zeta: 0.0,
            ..TrainConfig::default()
        };
        let mut st = AdamState::new(&[2]);
        let mut p = vec![0.0, 0.0];
        st.update(&mut [&mut p[..]], &[&[4.0, -0.01][..]], &cfg);
        assert_abs_diff_eq!(p[0], -cfg.alpha, epsilon = 1e-9);
        assert_abs_diff_eq!(p[1], cfg.alpha, epsilon = 1e-6);
    }

    #[test]
    fn zero_gradient_without_decay_is_fixed_point() {
        let cfg = TrainConfig {
            zeta: 0.0,
            ..TrainConfig::default()
        };
        let mut st = AdamState::new(&[3]);
        let mut p = vec![1.0, -2.0, 0.5];
        st.update(&mut [&mut p[..]], &[&[0.0; 3][..]], &cfg);
        assert_eq!(p, vec![1.0, -2.0, 0.5]);
    }

    #[test]
    fn decay_alone_shrinks_by_alpha_zeta() {
        let cfg = TrainConfig::default();
        let mut st = AdamState::new(&[1]);
        let mut p = vec![2.0];
        st.update(&mut [&mut p[..]], &[&[0.0][..]], &cfg);
        assert_abs_diff_eq!(p[0], 2.0 - cfg.alpha * cfg.zeta * 2.0, epsilon = 1e-15);
    }
}
