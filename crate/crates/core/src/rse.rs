//! Robust state estimation: the relaxed WLAV cone program, direct estimators and
//! exactness diagnostics.
//!
//! The decision vector of the relaxed problem is laid out as
//! `[X_ii for every bus | (Re X_ij, Im X_ij) for every stored pair | ε | u]`, where `ε` are
//! the measurement residuals and `u` their absolute-value epigraph variables. Rows are the
//! measurement equalities (zero cone), `u ± ε ≥ 0` (nonnegative cone) and one 4-dimensional
//! second-order cone per stored pair encoding `|X_ij|² ≤ X_ii X_jj`.

use std::collections::{HashMap, VecDeque};

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::conic::{ConeSpec, ConicError, ConicProgram, ConicSolution, ConicSolver, SolveStatus};
use crate::grid::AdmittanceModel;
use crate::powerflow::{
    eval_measurements, measurement_jacobian, resolve, Location, MeasurementKind, MeasurementMeta,
    PowerFlowError, Resolved, StateVector,
};
use crate::sparse::CscMatrix;

#[derive(Debug, Error)]
pub enum RseError {
    #[error(transparent)]
    Measurement(#[from] PowerFlowError),
    #[error(transparent)]
    Conic(#[from] ConicError),
    #[error("solver finished with status {0:?}")]
    NotOptimal(SolveStatus),
    #[error("invalid input: {0}")]
    Invalid(String),
    #[error("recovery failed: {0}")]
    Recovery(String),
    #[error("WLS did not converge after {iterations} iterations (step norms {trace:?})")]
    WlsDiverged { iterations: usize, trace: Vec<f64> },
}

/// Positions of the entries of `X` inside the decision vector.
#[derive(Debug, Clone, PartialEq)]
pub struct SparsityMap {
    n: usize,
    /// Position of `X_ii`.
    pub diag_index: Vec<usize>,
    /// Stored off-diagonal pairs, `i < j`.
    pub pairs: Vec<(usize, usize)>,
    /// Pair → position of `Re X_ij`; `Im X_ij` follows it.
    pub offdiag_index: HashMap<(usize, usize), usize>,
    /// Length of the `X` part of the decision vector.
    pub p: usize,
}

impl SparsityMap {
    /// One slot pair for every `i ≠ j` with a structurally nonzero `Y_ij`.
    pub fn from_model(model: &AdmittanceModel) -> Self {
        let mut pairs = Vec::new();
        for (i, row) in model.rows.iter().enumerate() {
            for &(j, _) in row {
                if j > i {
                    pairs.push((i, j));
                }
            }
        }
        Self::with_pairs(model.n_buses, pairs)
    }

    /// Every off-diagonal pair, regardless of the network.
    pub fn dense(n: usize) -> Self {
        let pairs = (0..n)
            .flat_map(|i| (i + 1..n).map(move |j| (i, j)))
            .collect();
        Self::with_pairs(n, pairs)
    }

    fn with_pairs(n: usize, pairs: Vec<(usize, usize)>) -> Self {
        let diag_index = (0..n).collect();
        let offdiag_index = pairs
            .iter()
            .enumerate()
            .map(|(k, &pr)| (pr, n + 2 * k))
            .collect();
        Self {
            n,
            diag_index,
            p: n + 2 * pairs.len(),
            pairs,
            offdiag_index,
        }
    }

    pub fn n_buses(&self) -> usize {
        self.n
    }

    /// Position of `Re X_ij` and the sign to apply to the imaginary slot (`X_ji = conj X_ij`).
    pub fn slot(&self, i: usize, j: usize) -> Option<(usize, f64)> {
        if i < j {
            self.offdiag_index.get(&(i, j)).map(|&k| (k, 1.0))
        } else {
            self.offdiag_index.get(&(j, i)).map(|&k| (k, -1.0))
        }
    }

    /// `X_ij` read from `x`; unstored entries are zero.
    pub fn entry(&self, x: &[f64], i: usize, j: usize) -> Complex64 {
        if i == j {
            return Complex64::new(x[self.diag_index[i]], 0.0);
        }
        match self.slot(i, j) {
            Some((k, s)) => Complex64::new(x[k], s * x[k + 1]),
            None => Complex64::default(),
        }
    }

    /// Hermitian matrix with the stored entries and zeros elsewhere.
    pub fn assemble(&self, x: &[f64]) -> DMatrix<Complex64> {
        let mut m = DMatrix::zeros(self.n, self.n);
        for i in 0..self.n {
            m[(i, i)] = self.entry(x, i, i);
        }
        for &(i, j) in &self.pairs {
            let e = self.entry(x, i, j);
            m[(i, j)] = e;
            m[(j, i)] = e.conj();
        }
        m
    }

    /// Stored entries of `X = v v*`.
    pub fn from_state(&self, state: &StateVector) -> Vec<f64> {
        let v = state.phasors();
        let mut x = vec![0.0; self.p];
        for i in 0..self.n {
            x[self.diag_index[i]] = v[i].norm_sqr();
        }
        for &(i, j) in &self.pairs {
            let e = v[i] * v[j].conj();
            let k = self.offdiag_index[&(i, j)];
            x[k] = e.re;
            x[k + 1] = e.im;
        }
        x
    }
}

/// `(position, coefficient)` list of one measurement's linear form in `X`.
fn measurement_row(
    model: &AdmittanceModel,
    map: &SparsityMap,
    r: Resolved,
) -> Result<Vec<(usize, f64)>, RseError> {
    let mut row = Vec::new();
    let missing = |i, j| RseError::Invalid(format!("no variable slot for pair ({i}, {j})"));
    // Adds a·Re X_ij + b·Im X_ij.
    let push = |row: &mut Vec<(usize, f64)>, i: usize, j: usize, a: f64, b: f64| {
        if i == j {
            row.push((map.diag_index[i], a));
            return Ok(());
        }
        let (k, s) = map.slot(i, j).ok_or_else(|| missing(i, j))?;
        row.push((k, a));
        row.push((k + 1, s * b));
        Ok::<(), RseError>(())
    };
    match r {
        Resolved::Vmag(i) => row.push((map.diag_index[i], 1.0)),
        Resolved::Flow {
            active,
            at: i,
            other: j,
            branch,
            from_side,
        } => {
            let e = model.branch_params[branch].end(from_side);
            if active {
                row.push((map.diag_index[i], e.g_hat));
                push(&mut row, i, j, -e.g, -e.b)?;
            } else {
                row.push((map.diag_index[i], -e.b_hat));
                push(&mut row, i, j, e.b, -e.g)?;
            }
        }
        Resolved::Inj { active, bus: i } => {
            for &(j, y) in &model.rows[i] {
                if active {
                    push(&mut row, i, j, y.re, y.im)?;
                } else if i == j {
                    push(&mut row, i, j, -y.im, 0.0)?;
                } else {
                    push(&mut row, i, j, -y.im, y.re)?;
                }
            }
        }
    }
    Ok(row)
}

/// Coefficients of `Re(Σ_ij Y_ij* X_ij)` over the stored entries.
fn loss_coefficients(model: &AdmittanceModel, map: &SparsityMap) -> Vec<f64> {
    let mut c = vec![0.0; map.p];
    for i in 0..map.n {
        c[map.diag_index[i]] = model.y(i, i).re;
    }
    for &(i, j) in &map.pairs {
        let (yij, yji) = (model.y(i, j), model.y(j, i));
        let k = map.offdiag_index[&(i, j)];
        c[k] = yij.re + yji.re;
        c[k + 1] = yij.im - yji.im;
    }
    c
}

/// The relaxed WLAV problem for one measurement vector.
#[derive(Debug, Clone)]
pub struct RelaxedProblem {
    pub prog: ConicProgram,
    pub map: SparsityMap,
    /// Equality row of each measurement.
    pub meas_rows: Vec<usize>,
    /// Position in `c` of each measurement's WLAV coefficient (its `u_m`).
    pub weight_slots: Vec<usize>,
    /// Position of `ε_m` in the decision vector.
    pub residual_slots: Vec<usize>,
    pub rho_r: f64,
    pub meta: Vec<MeasurementMeta>,
}

pub const DEFAULT_RHO_R: f64 = 1.0;

/// Builds the relaxed problem over the network's own sparsity pattern.
pub fn build_relaxed(
    model: &AdmittanceModel,
    meta: &[MeasurementMeta],
    z: &[f64],
    weights: &[f64],
    rho_r: f64,
) -> Result<RelaxedProblem, RseError> {
    build_relaxed_with(
        model,
        SparsityMap::from_model(model),
        meta,
        z,
        weights,
        rho_r,
    )
}

/// As [`build_relaxed`] with an explicit variable layout.
pub fn build_relaxed_with(
    model: &AdmittanceModel,
    map: SparsityMap,
    meta: &[MeasurementMeta],
    z: &[f64],
    weights: &[f64],
    rho_r: f64,
) -> Result<RelaxedProblem, RseError> {
    let m = meta.len();
    if z.len() != m || weights.len() != m {
        return Err(RseError::Invalid(format!(
            "{} measurements, {} values, {} weights",
            m,
            z.len(),
            weights.len()
        )));
    }
    if let Some(w) = weights.iter().find(|w| !(**w > 0.0) || !w.is_finite()) {
        return Err(RseError::Invalid(format!(
            "weights must be positive, got {w}"
        )));
    }
    if !(rho_r > 0.0) {
        return Err(RseError::Invalid(format!(
            "rho_r must be positive, got {rho_r}"
        )));
    }
    if map.n != model.n_buses {
        return Err(RseError::Invalid(
            "sparsity map does not match the network".into(),
        ));
    }
    let px = map.p;
    let eps0 = px;
    let u0 = px + m;
    let n_vars = px + 2 * m;
    let mut trip = Vec::new();
    let b = vec![0.0; m + 2 * m + 4 * map.pairs.len()];

    for (k, mm) in meta.iter().enumerate() {
        let r = resolve(model, mm)?;
        for (col, v) in measurement_row(model, &map, r)? {
            trip.push((k, col, v));
        }
        trip.push((k, eps0 + k, 1.0));
    }
    for k in 0..m {
        // u − ε ≥ 0 and u + ε ≥ 0
        trip.push((m + 2 * k, eps0 + k, 1.0));
        trip.push((m + 2 * k, u0 + k, -1.0));
        trip.push((m + 2 * k + 1, eps0 + k, -1.0));
        trip.push((m + 2 * k + 1, u0 + k, -1.0));
    }
    let soc0 = 3 * m;
    for (q, &(i, j)) in map.pairs.iter().enumerate() {
        let r = soc0 + 4 * q;
        let (di, dj) = (map.diag_index[i], map.diag_index[j]);
        let k = map.offdiag_index[&(i, j)];
        trip.push((r, di, -1.0));
        trip.push((r, dj, -1.0));
        trip.push((r + 1, k, -2.0));
        trip.push((r + 2, k + 1, -2.0));
        trip.push((r + 3, di, -1.0));
        trip.push((r + 3, dj, 1.0));
    }
    let a = CscMatrix::from_triplets(b.len(), n_vars, &trip);
    let mut c = loss_coefficients(model, &map);
    c.resize(n_vars, 0.0);
    for k in 0..m {
        c[u0 + k] = rho_r * weights[k];
    }
    let cones = ConeSpec::new(m, 2 * m, vec![4; map.pairs.len()])?;
    let mut rp = RelaxedProblem {
        prog: ConicProgram::new(a, b, c, cones)?,
        map,
        meas_rows: (0..m).collect(),
        weight_slots: (u0..u0 + m).collect(),
        residual_slots: (eps0..eps0 + m).collect(),
        rho_r,
        meta: meta.to_vec(),
    };
    rp.set_measurements(z);
    Ok(rp)
}

impl RelaxedProblem {
    pub fn n_meas(&self) -> usize {
        self.meas_rows.len()
    }

    /// Replaces the measurement values; magnitudes enter squared.
    pub fn set_measurements(&mut self, z: &[f64]) {
        for (k, (&row, mm)) in self.meas_rows.iter().zip(&self.meta).enumerate() {
            self.prog.b[row] = if mm.kind == MeasurementKind::Vmag {
                z[k] * z[k]
            } else {
                z[k]
            };
        }
    }

    /// Replaces the per-measurement WLAV weights.
    pub fn set_weights(&mut self, w: &[f64]) -> Result<(), RseError> {
        if let Some(bad) = w.iter().find(|v| !(**v > 0.0)) {
            return Err(RseError::Invalid(format!(
                "weights must be positive, got {bad}"
            )));
        }
        for (&slot, &wm) in self.weight_slots.iter().zip(w) {
            self.prog.c[slot] = self.rho_r * wm;
        }
        Ok(())
    }

    /// The `X` part of a decision vector.
    pub fn x_part<'a>(&self, x: &'a [f64]) -> &'a [f64] {
        &x[..self.map.p]
    }

    pub fn residuals(&self, x: &[f64]) -> Vec<f64> {
        self.residual_slots.iter().map(|&k| x[k]).collect()
    }

    /// Coefficients of the power-loss term over the `X` part.
    pub fn loss_coefficients(&self) -> Vec<f64> {
        self.prog.c[..self.map.p].to_vec()
    }
}

/// `Re(Σ_ij Y_ij* X_ij)` over the stored entries of `x`.
pub fn power_loss(model: &AdmittanceModel, map: &SparsityMap, x: &[f64]) -> f64 {
    loss_coefficients(model, map)
        .iter()
        .zip(x)
        .map(|(c, v)| c * v)
        .sum()
}

/// `Σ |z_m − h_m| / σ_m`.
pub fn wlav_objective(z: &[f64], h: &[f64], sigma: &[f64]) -> Result<f64, RseError> {
    if z.len() != h.len() || z.len() != sigma.len() {
        return Err(RseError::Invalid("vectors are not aligned".into()));
    }
    if let Some(s) = sigma.iter().find(|s| !(**s > 0.0)) {
        return Err(RseError::Invalid(format!(
            "sigma must be positive, got {s}"
        )));
    }
    Ok(z.iter()
        .zip(h)
        .zip(sigma)
        .map(|((z, h), s)| (z - h).abs() / s)
        .sum())
}

/// Solution of the relaxed problem split into its blocks.
#[derive(Debug, Clone)]
pub struct RseSolution {
    pub x: Vec<f64>,
    pub eps: Vec<f64>,
    pub objective: f64,
    pub conic: ConicSolution,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RecoveredState {
    pub state: StateVector,
    pub lambda1: f64,
    pub lambda2: f64,
    pub exactness_ratio: f64,
}

/// Solves the relaxed problem and recovers the voltage state.
pub fn estimate_wlav(
    rp: &RelaxedProblem,
    solver: &mut ConicSolver,
    slack: usize,
) -> Result<(RseSolution, RecoveredState), RseError> {
    let sol = solver.solve(&rp.prog)?;
    if sol.status != SolveStatus::Optimal {
        return Err(RseError::NotOptimal(sol.status));
    }
    let x = rp.x_part(&sol.x).to_vec();
    let rec = recover(&rp.map, &x, slack)?;
    Ok((
        RseSolution {
            eps: rp.residuals(&sol.x),
            objective: sol.objective(&rp.prog),
            x,
            conic: sol,
        },
        rec,
    ))
}

/// Fills unstored entries of `X` with a rank-one completion grown along a spanning
/// tree of the stored pairs: magnitudes from `√X_ii`, angle differences from `arg X_ij`.
pub fn complete(map: &SparsityMap, x: &[f64], root: usize) -> DMatrix<Complex64> {
    let n = map.n;
    let mut adj = vec![Vec::new(); n];
    for &(i, j) in &map.pairs {
        adj[i].push(j);
        adj[j].push(i);
    }
    let mut angle = vec![f64::NAN; n];
    let order = std::iter::once(root).chain((0..n).filter(|&i| i != root));
    for start in order {
        if !angle[start].is_nan() {
            continue;
        }
        angle[start] = 0.0;
        let mut queue = VecDeque::from([start]);
        while let Some(i) = queue.pop_front() {
            for &j in &adj[i] {
                if angle[j].is_nan() {
                    angle[j] = angle[i] - map.entry(x, i, j).arg();
                    queue.push_back(j);
                }
            }
        }
    }
    let v: Vec<Complex64> = (0..n)
        .map(|i| Complex64::from_polar(x[map.diag_index[i]].max(0.0).sqrt(), angle[i]))
        .collect();
    let mut m = map.assemble(x);
    for i in 0..n {
        for j in 0..n {
            if i != j && map.slot(i, j).is_none() {
                m[(i, j)] = v[i] * v[j].conj();
            }
        }
    }
    m
}

/// Dominant-eigenpair recovery `V = √λ₁ u₁`, rotated so bus `slack` has angle zero.
pub fn recover(map: &SparsityMap, x: &[f64], slack: usize) -> Result<RecoveredState, RseError> {
    let m = complete(map, x, slack);
    if m.iter().any(|v| !v.re.is_finite() || !v.im.is_finite()) {
        return Err(RseError::Recovery("non-finite entries".into()));
    }
    let eig = nalgebra::SymmetricEigen::new(m);
    let mut idx: Vec<usize> = (0..map.n).collect();
    idx.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let lambda1 = eig.eigenvalues[idx[0]];
    let lambda2 = if map.n > 1 {
        eig.eigenvalues[idx[1]]
    } else {
        0.0
    };
    if !(lambda1 > 0.0) {
        return Err(RseError::Recovery(format!(
            "leading eigenvalue {lambda1} is not positive"
        )));
    }
    let u = eig.eigenvectors.column(idx[0]);
    let rot = u[slack].conj() / u[slack].norm();
    let v: Vec<Complex64> = u.iter().map(|c| c * rot * lambda1.sqrt()).collect();
    let mut state = StateVector::from_phasors(&v);
    state.theta[slack] = 0.0;
    Ok(RecoveredState {
        state,
        lambda1,
        lambda2,
        exactness_ratio: lambda2 / lambda1,
    })
}

/// Default weights `1/σ_m`.
pub fn inverse_sigma(sigma: &[f64]) -> Vec<f64> {
    sigma.iter().map(|s| 1.0 / s).collect()
}

fn check_sigma(sigma: &[f64], m: usize) -> Result<(), RseError> {
    if sigma.len() != m {
        return Err(RseError::Invalid("sigma vector length mismatch".into()));
    }
    if let Some(s) = sigma.iter().find(|s| !(**s > 0.0)) {
        return Err(RseError::Invalid(format!(
            "sigma must be positive, got {s}"
        )));
    }
    Ok(())
}

/// Direct WLAV estimate with `1/σ` weights and `ρ_r = 1`.
pub fn estimate_wlav_direct(
    model: &AdmittanceModel,
    meta: &[MeasurementMeta],
    z: &[f64],
    sigma: &[f64],
    solver: &mut ConicSolver,
) -> Result<(RseSolution, RecoveredState), RseError> {
    check_sigma(sigma, meta.len())?;
    let rp = build_relaxed(model, meta, z, &inverse_sigma(sigma), DEFAULT_RHO_R)?;
    estimate_wlav(&rp, solver, model.slack)
}

const WLS_MAX_ITER: usize = 50;
const WLS_GRAD_TOL: f64 = 1e-8;
const WLS_STEP_TOL: f64 = 1e-12;

/// Gauss-Newton on `Σ ((z_m − h_m)/σ_m)²` with the slack angle held at zero.
///
/// Stops when the gradient norm, relative to `1 + J`, drops below 1e-8 or when a step
/// changes no state entry by more than 1e-12.
pub fn estimate_wls(
    model: &AdmittanceModel,
    meta: &[MeasurementMeta],
    z: &[f64],
    sigma: &[f64],
    init: Option<&StateVector>,
) -> Result<StateVector, RseError> {
    let n = model.n_buses;
    if z.len() != meta.len() {
        return Err(RseError::Invalid(
            "measurement vector length mismatch".into(),
        ));
    }
    check_sigma(sigma, meta.len())?;
    let slack = model.slack;
    let mut state = init.cloned().unwrap_or_else(|| StateVector::flat(n));
    state.theta[slack] = 0.0;
    let w: Vec<f64> = sigma.iter().map(|s| 1.0 / (s * s)).collect();
    // Free columns: all magnitudes, every angle but the slack's.
    let cols: Vec<usize> = (0..2 * n).filter(|&c| c != n + slack).collect();
    let mut trace = Vec::new();
    for _ in 0..WLS_MAX_ITER {
        let h = eval_measurements(model, &state, meta)?;
        let full = measurement_jacobian(model, &state, meta)?;
        let jac = full.select_columns(&cols);
        let r = DVector::from_iterator(meta.len(), z.iter().zip(&h).map(|(a, b)| a - b));
        let wr = DVector::from_iterator(meta.len(), r.iter().zip(&w).map(|(a, b)| a * b));
        let objective: f64 = r.iter().zip(&w).map(|(a, b)| a * a * b).sum();
        let grad = jac.transpose() * &wr;
        if grad.norm() < WLS_GRAD_TOL * (1.0 + objective) {
            return Ok(state);
        }
        let mut wj = jac.clone();
        for (i, mut row) in wj.row_iter_mut().enumerate() {
            row *= w[i];
        }
        let gain = jac.transpose() * wj;
        let dx = gain
            .cholesky()
            .map(|c| c.solve(&grad))
            .ok_or_else(|| RseError::Invalid("gain matrix is singular (unobservable)".into()))?;
        for (k, &c) in cols.iter().enumerate() {
            if c < n {
                state.v[c] += dx[k];
            } else {
                state.theta[c - n] += dx[k];
            }
        }
        let step = dx.amax();
        trace.push(step);
        if !step.is_finite() {
            break;
        }
        if step < WLS_STEP_TOL {
            return Ok(state);
        }
    }
    Err(RseError::WlsDiverged {
        iterations: trace.len(),
        trace,
    })
}

/// Sufficient conditions for an exact relaxation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExactnessReport {
    /// Every bus has a magnitude meter.
    pub vmag_coverage: bool,
    /// Branches carrying an active-flow meter connect all buses.
    pub spanning_tree: bool,
    /// Every branch angle difference lies strictly inside (−90°, 90°).
    pub angles_within_90: bool,
}

impl ExactnessReport {
    pub fn all(&self) -> bool {
        self.vmag_coverage && self.spanning_tree && self.angles_within_90
    }
}

fn find(parent: &mut [usize], mut i: usize) -> usize {
    while parent[i] != i {
        parent[i] = parent[parent[i]];
        i = parent[i];
    }
    i
}

pub fn check_exactness(
    model: &AdmittanceModel,
    meta: &[MeasurementMeta],
    state: &StateVector,
) -> ExactnessReport {
    let n = model.n_buses;
    let mut has_v = vec![false; n];
    let mut parent: Vec<usize> = (0..n).collect();
    let mut components = n;
    for m in meta {
        match (m.kind, m.loc) {
            (MeasurementKind::Vmag, Location::Bus(i)) if i < n => has_v[i] = true,
            (MeasurementKind::Pflow, Location::Branch { from, to })
                if model.find_branch_end(from, to).is_some() =>
            {
                let (a, b) = (find(&mut parent, from), find(&mut parent, to));
                if a != b {
                    parent[a] = b;
                    components -= 1;
                }
            }
            _ => {}
        }
    }
    let right = std::f64::consts::FRAC_PI_2;
    let angles_within_90 = model.endpoints.iter().all(|&(f, t)| {
        let d = (state.theta[f] - state.theta[t] + std::f64::consts::PI)
            .rem_euclid(2.0 * std::f64::consts::PI)
            - std::f64::consts::PI;
        d.abs() < right
    });
    ExactnessReport {
        vmag_coverage: has_v.iter().all(|&b| b),
        spanning_tree: components == 1,
        angles_within_90,
    }
}

/// Exported estimation result.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimateReport {
    #[serde(rename = "V")]
    pub v: Vec<f64>,
    pub theta: Vec<f64>,
    pub lambda_ratio: f64,
    pub objective: f64,
    pub residual_l1: f64,
    pub power_loss: f64,
}

impl EstimateReport {
    pub fn new(
        model: &AdmittanceModel,
        rp: &RelaxedProblem,
        sol: &RseSolution,
        rec: &RecoveredState,
    ) -> Self {
        Self {
            v: rec.state.v.clone(),
            theta: rec.state.theta.clone(),
            lambda_ratio: rec.exactness_ratio,
            objective: sol.objective,
            residual_l1: sol.eps.iter().map(|e| e.abs()).sum(),
            power_loss: power_loss(model, &rp.map, &sol.x),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}
