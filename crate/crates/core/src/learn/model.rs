//! Per-sample forward and backward passes for the optimisation-layer model and the
//! fully connected baselines.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::mlp::{Dense, Mlp, Normalizer};
use super::{
    huber, huber_grad, huber_loss, mse, positive_weight, sigmoid, LearnError, LossBreakdown,
    TrainConfig,
};
use crate::conic::{ConicSolver, SolveStatus};
use crate::conic_diff::{DiffError, OmegaSystem, SolutionJacobianSeed};
use crate::grid::AdmittanceModel;
use crate::powerflow::{MeasurementMeta, StateVector};
use crate::rse::{build_relaxed, RelaxedProblem, RseError, DEFAULT_RHO_R};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    /// Optimisation layer followed by dense post-processing layers, hybrid loss.
    OptLayer,
    /// Dense network on raw measurements, hybrid loss.
    FcnnHybrid,
    /// Dense network on raw measurements, MSE only.
    FcnnMse,
}

impl ModelKind {
    pub const ALL: [ModelKind; 3] = [
        ModelKind::OptLayer,
        ModelKind::FcnnHybrid,
        ModelKind::FcnnMse,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ModelKind::OptLayer => "opt_layer",
            ModelKind::FcnnHybrid => "fcnn_hybrid",
            ModelKind::FcnnMse => "fcnn_mse",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.name() == s)
    }
}

/// Grid data shared by every sample: the relaxed-problem template and the linear map
/// from stored `X` entries to measurement values.
#[derive(Debug, Clone)]
pub struct Physics {
    pub grid: AdmittanceModel,
    pub template: RelaxedProblem,
    /// Measurement rows restricted to the `X` columns (`m × p`).
    a_x: DMatrix<f64>,
    loss_c: Vec<f64>,
}

impl Physics {
    pub fn new(grid: &AdmittanceModel, meta: &[MeasurementMeta]) -> Result<Self, LearnError> {
        let m = meta.len();
        let template = build_relaxed(grid, meta, &vec![0.0; m], &vec![1.0; m], DEFAULT_RHO_R)?;
        let p = template.map.p;
        let mut a_x = DMatrix::zeros(m, p);
        for (r, c, v) in template.prog.a.triplets() {
            if r < m && c < p {
                a_x[(r, c)] += v;
            }
        }
        let loss_c = template.loss_coefficients();
        Ok(Self {
            grid: grid.clone(),
            template,
            a_x,
            loss_c,
        })
    }

    pub fn n_meas(&self) -> usize {
        self.template.n_meas()
    }

    pub fn n_buses(&self) -> usize {
        self.grid.n_buses
    }

    /// Length of the stacked `X` vector fed to the post-processing layers.
    pub fn x_dim(&self) -> usize {
        self.template.map.p
    }

    pub fn loss_coefficients(&self) -> &[f64] {
        &self.loss_c
    }

    /// Right-hand side of the measurement rows (magnitudes squared).
    pub fn rhs(&self, z: &[f64]) -> Vec<f64> {
        let mut rp = self.template.clone();
        rp.set_measurements(z);
        rp.prog.b[..self.n_meas()].to_vec()
    }

    /// Stored entries of `X = v v*` for a stacked `(V, θ)` vector.
    pub fn state_x(&self, y: &[f64]) -> Vec<f64> {
        let n = self.n_buses();
        self.template.map.from_state(&StateVector {
            v: y[..n].to_vec(),
            theta: y[n..2 * n].to_vec(),
        })
    }

    /// `∂x/∂(V, θ)` of [`state_x`](Self::state_x), `p × 2n`.
    pub fn state_x_jacobian(&self, y: &[f64]) -> DMatrix<f64> {
        let n = self.n_buses();
        let map = &self.template.map;
        let (v, th) = (&y[..n], &y[n..2 * n]);
        let mut j = DMatrix::zeros(map.p, 2 * n);
        for i in 0..n {
            j[(map.diag_index[i], i)] = 2.0 * v[i];
        }
        for &(a, b) in &map.pairs {
            let k = map.offdiag_index[&(a, b)];
            let (c, s) = ((th[a] - th[b]).cos(), (th[a] - th[b]).sin());
            let vv = v[a] * v[b];
            j[(k, a)] = v[b] * c;
            j[(k, b)] = v[a] * c;
            j[(k, n + a)] = -vv * s;
            j[(k, n + b)] = vv * s;
            j[(k + 1, a)] = v[b] * s;
            j[(k + 1, b)] = v[a] * s;
            j[(k + 1, n + a)] = vv * c;
            j[(k + 1, n + b)] = -vv * c;
        }
        j
    }

    /// Residuals of the measurement rows at `x`: `ε = rhs(z) − A_X x`.
    pub fn residuals_at(&self, z: &[f64], x: &[f64]) -> Vec<f64> {
        let ax = &self.a_x * DVector::from_column_slice(x);
        self.rhs(z)
            .iter()
            .zip(ax.iter())
            .map(|(b, a)| b - a)
            .collect()
    }

    pub fn power_loss(&self, x: &[f64]) -> f64 {
        self.loss_c.iter().zip(x).map(|(c, v)| c * v).sum()
    }
}

/// Everything that training updates.
#[derive(Debug, Clone, PartialEq)]
pub struct LearnableParams {
    /// Raw measurement weights (empty for the baselines).
    pub w_raw: Vec<f64>,
    pub post: Mlp,
}

impl LearnableParams {
    pub fn shapes(&self) -> Vec<usize> {
        let mut s = vec![self.w_raw.len()];
        for l in &self.post.layers {
            s.push(l.weights.len());
            s.push(l.bias.len());
        }
        s
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut t: Vec<&mut [f64]> = vec![&mut self.w_raw[..]];
        for l in &mut self.post.layers {
            t.push(&mut l.weights[..]);
            t.push(&mut l.bias[..]);
        }
        t
    }

    pub fn n_params(&self) -> usize {
        self.shapes().iter().sum()
    }
}

/// Gradient with the same layout as [`LearnableParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct Grads {
    pub w_raw: Vec<f64>,
    pub layers: Vec<Dense>,
}

impl Grads {
    pub fn zeros_like(p: &LearnableParams) -> Self {
        Self {
            w_raw: vec![0.0; p.w_raw.len()],
            layers: p
                .post
                .layers
                .iter()
                .map(|l| Dense::zeros(l.rows, l.cols))
                .collect(),
        }
    }

    pub fn add_scaled(&mut self, other: &Grads, k: f64) {
        for (a, b) in self.w_raw.iter_mut().zip(&other.w_raw) {
            *a += k * b;
        }
        for (la, lb) in self.layers.iter_mut().zip(&other.layers) {
            for (a, b) in la.weights.iter_mut().zip(&lb.weights) {
                *a += k * b;
            }
            for (a, b) in la.bias.iter_mut().zip(&lb.bias) {
                *a += k * b;
            }
        }
    }

    pub fn tensors(&self) -> Vec<&[f64]> {
        let mut t: Vec<&[f64]> = vec![&self.w_raw[..]];
        for l in &self.layers {
            t.push(&l.weights[..]);
            t.push(&l.bias[..]);
        }
        t
    }
}

#[derive(Debug, Clone)]
pub struct SampleOutput {
    /// Stacked `(V̂, θ̂)`.
    pub prediction: Vec<f64>,
    pub loss: LossBreakdown,
    pub grads: Option<Grads>,
    /// Set when the layer derivative fell back to least squares.
    pub degenerate: bool,
}

/// Inputs to one forward pass.
pub struct Pass<'a> {
    pub kind: ModelKind,
    pub params: &'a LearnableParams,
    pub norm: &'a Normalizer,
    pub phys: &'a Physics,
    pub cfg: &'a TrainConfig,
    /// Newton-polish each layer solution before differentiating it.
    pub polish: bool,
}

/// Solves the layer for `z` with the current weights and returns the program and solution.
///
/// With `polish`, the interior-point solution is refined by Newton steps on the embedding
/// residual; its derivative then matches finite differences of the exact solution map
/// instead of the interior-point iterate.
pub fn solve_layer(
    phys: &Physics,
    w_raw: &[f64],
    eps_p: f64,
    z: &[f64],
    solver: &mut ConicSolver,
    polish: bool,
) -> Result<(RelaxedProblem, crate::conic::ConicSolution, Vec<f64>), LearnError> {
    let w_hat = positive_weight(w_raw, eps_p);
    assert!(
        w_hat.iter().all(|&w| w >= eps_p),
        "layer weight below eps_p"
    );
    let mut rp = phys.template.clone();
    rp.set_measurements(z);
    rp.set_weights(&w_hat)?;
    let sol = solver.solve(&rp.prog)?;
    if sol.status != SolveStatus::Optimal {
        return Err(RseError::NotOptimal(sol.status).into());
    }
    let sol = if polish {
        crate::conic_diff::polish(&rp.prog, &sol)
    } else {
        sol
    };
    Ok((rp, sol, w_hat))
}

impl Pass<'_> {
    /// Forward pass with optional gradients. `metric_weights` replaces the Huber weights
    /// of the reported loss (gradients always use the model's own weights).
    pub fn run(
        &self,
        z: &[f64],
        target: &[f64],
        solver: &mut ConicSolver,
        want_grad: bool,
        metric_weights: Option<&[f64]>,
    ) -> Result<SampleOutput, LearnError> {
        if z.len() != self.phys.n_meas() || target.len() != 2 * self.phys.n_buses() {
            return Err(LearnError::Invalid(format!(
                "sample has {} measurements and {} targets, model expects {} and {}",
                z.len(),
                target.len(),
                self.phys.n_meas(),
                2 * self.phys.n_buses()
            )));
        }
        match self.kind {
            ModelKind::OptLayer => self.run_layer(z, target, solver, want_grad, metric_weights),
            _ => self.run_fcnn(z, target, want_grad, metric_weights),
        }
    }

    fn output_grad(&self, pred: &[f64], target: &[f64]) -> Vec<f64> {
        let k = 2.0 / pred.len() as f64;
        pred.iter().zip(target).map(|(a, b)| k * (a - b)).collect()
    }

    /// Pulls `∂L/∂ŷ` through the output de-normalisation and the layers.
    fn backprop(&self, tape: &super::MlpTape, d_pred: &[f64]) -> (Vec<Dense>, Vec<f64>) {
        let d_out: Vec<f64> = d_pred
            .iter()
            .zip(&self.norm.out_scale)
            .map(|(g, s)| g * s)
            .collect();
        let (layers, d_in) = self.params.post.backward(tape, &d_out);
        let d_in = d_in
            .iter()
            .zip(&self.norm.in_scale)
            .map(|(g, s)| g / s)
            .collect();
        (layers, d_in)
    }

    fn run_layer(
        &self,
        z: &[f64],
        target: &[f64],
        solver: &mut ConicSolver,
        want_grad: bool,
        metric_weights: Option<&[f64]>,
    ) -> Result<SampleOutput, LearnError> {
        let cfg = self.cfg;
        let (rp, sol, w_hat) = solve_layer(
            self.phys,
            &self.params.w_raw,
            cfg.eps_p,
            z,
            solver,
            self.polish,
        )?;
        let x_in = rp.x_part(&sol.x).to_vec();
        let eps = rp.residuals(&sol.x);
        let tape = self.params.post.forward(&self.norm.input(&x_in));
        let pred = self.norm.output(&tape.output);
        let hw = metric_weights.unwrap_or(&w_hat);
        let loss = LossBreakdown::new(
            mse(&pred, target),
            huber_loss(&eps, hw, cfg.delta),
            self.phys.power_loss(&x_in),
            cfg.rho,
        );
        if !want_grad {
            return Ok(SampleOutput {
                prediction: pred,
                loss,
                grads: None,
                degenerate: false,
            });
        }

        let (layers, d_x) = self.backprop(&tape, &self.output_grad(&pred, target));
        let p = rp.prog.n_vars();
        let d = rp.prog.n_rows();
        let mut seed = SolutionJacobianSeed::zeros(p, d);
        for (k, g) in d_x.iter().enumerate() {
            seed.dl_dx[k] = g + cfg.rho * self.phys.loss_c[k];
        }
        for (m, &slot) in rp.residual_slots.iter().enumerate() {
            seed.dl_dx[slot] += cfg.rho * w_hat[m] * huber_grad(eps[m], cfg.delta);
        }
        let sys = OmegaSystem::new(&rp.prog, &sol).map_err(diff_error)?;
        let (grad, degenerate) = match sys.adjoint_derivative(&seed) {
            Ok(g) => (g, false),
            Err(DiffError::DegenerateAdjoint {
                fallback,
                condition,
            }) => {
                log::debug!(
                    "degenerate layer solution (condition {condition:.2e}); least-squares gradient"
                );
                (*fallback, true)
            }
            Err(e) => return Err(diff_error(e)),
        };
        let w_raw: Vec<f64> = (0..rp.n_meas())
            .map(|m| {
                let g_hat =
                    cfg.rho * huber(eps[m], cfg.delta) + rp.rho_r * grad.dc[rp.weight_slots[m]];
                g_hat * sigmoid(self.params.w_raw[m])
            })
            .collect();
        Ok(SampleOutput {
            prediction: pred,
            loss,
            grads: Some(Grads { w_raw, layers }),
            degenerate,
        })
    }

    fn run_fcnn(
        &self,
        z: &[f64],
        target: &[f64],
        want_grad: bool,
        metric_weights: Option<&[f64]>,
    ) -> Result<SampleOutput, LearnError> {
        let cfg = self.cfg;
        let tape = self.params.post.forward(&self.norm.input(z));
        let pred = self.norm.output(&tape.output);
        let x = self.phys.state_x(&pred);
        let eps = self.phys.residuals_at(z, &x);
        let unit = vec![1.0; eps.len()];
        let hw = metric_weights.unwrap_or(&unit);
        let loss = LossBreakdown::new(
            mse(&pred, target),
            huber_loss(&eps, hw, cfg.delta),
            self.phys.power_loss(&x),
            cfg.rho,
        );
        if !want_grad {
            return Ok(SampleOutput {
                prediction: pred,
                loss,
                grads: None,
                degenerate: false,
            });
        }
        let mut d_pred = self.output_grad(&pred, target);
        if self.kind == ModelKind::FcnnHybrid {
            // ∂/∂x of ρ(Σ ŵ h(ε) + cᵀx) with ε = rhs − A_X x
            let gh =
                DVector::from_iterator(eps.len(), eps.iter().map(|&e| huber_grad(e, cfg.delta)));
            let mut dx = -(self.a_x_t() * gh);
            for (k, c) in self.phys.loss_c.iter().enumerate() {
                dx[k] += c;
            }
            dx *= cfg.rho;
            let dy = self.phys.state_x_jacobian(&pred).tr_mul(&dx);
            for (a, b) in d_pred.iter_mut().zip(dy.iter()) {
                *a += b;
            }
        }
        let (layers, _) = self.backprop(&tape, &d_pred);
        Ok(SampleOutput {
            prediction: pred,
            loss,
            grads: Some(Grads {
                w_raw: Vec::new(),
                layers,
            }),
            degenerate: false,
        })
    }

    fn a_x_t(&self) -> DMatrix<f64> {
        self.phys.a_x.transpose()
    }
}

fn diff_error(e: DiffError) -> LearnError {
    LearnError::Invalid(format!("layer derivative: {e}"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cases;
    use crate::grid::parse_case;
    use crate::powerflow::{
        eval_measurements, full_measurement_set, solve_power_flow, InjectionSpec,
    };
    use approx::assert_abs_diff_eq;

    fn toy() -> (Physics, StateVector, Vec<f64>) {
        let case = parse_case(cases::CASE3_TOY).unwrap();
        let grid = AdmittanceModel::from_case(&case).unwrap();
        let st = solve_power_flow(&grid, &InjectionSpec::from_case(&case)).unwrap();
        let meta = full_measurement_set(&grid, 1e-3);
        let z = eval_measurements(&grid, &st, &meta).unwrap();
        (Physics::new(&grid, &meta).unwrap(), st, z)
    }

    #[test]
    fn state_residuals_vanish_at_truth() {
        let (phys, st, z) = toy();
        let y = st.stacked();
        let eps = phys.residuals_at(&z, &phys.state_x(&y));
        assert!(eps.iter().all(|e| e.abs() < 1e-12), "{eps:?}");
    }

    #[test]
    fn state_jacobian_matches_differences() {
        let (phys, st, _) = toy();
        let y = st.stacked();
        let j = phys.state_x_jacobian(&y);
        let h = 1e-7;
        for c in 0..y.len() {
            let mut yp = y.clone();
            yp[c] += h;
            let mut ym = y.clone();
            ym[c] -= h;
            let (xp, xm) = (phys.state_x(&yp), phys.state_x(&ym));
            for r in 0..xp.len() {
                assert_abs_diff_eq!((xp[r] - xm[r]) / (2.0 * h), j[(r, c)], epsilon = 1e-7);
            }
        }
    }

    #[test]
    fn kind_names_roundtrip() {
        for k in ModelKind::ALL {
            assert_eq!(ModelKind::parse(k.name()), Some(k));
            assert_eq!(
                serde_json::to_string(&k).unwrap(),
                format!("\"{}\"", k.name())
            );
        }
    }
}
