//! Ground-truth states and measurements.
//!
//! Newton-Raphson AC power flow produces the true operating point; the nonlinear
//! measurement functions (bus voltage magnitudes, branch-end flows, bus injections)
//! are evaluated on it, and Gaussian noise with a configurable outlier fraction
//! is added to build a [`Dataset`].

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grid::{AdmittanceModel, BusType, GridCase};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PowerFlowError {
    #[error("power flow did not converge after {iterations} iterations (mismatch {mismatch:.3e})")]
    NoConvergence { iterations: usize, mismatch: f64 },
    #[error("singular power flow jacobian")]
    Singular,
    #[error("unknown measurement location {0}")]
    UnknownLocation(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("sample {sample}: {reason}")]
    Generation { sample: usize, reason: String },
}

/// Bus voltage magnitudes (per-unit) and angles (radians).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateVector {
    #[serde(rename = "V")]
    pub v: Vec<f64>,
    pub theta: Vec<f64>,
}

impl StateVector {
    pub fn flat(n: usize) -> Self {
        Self {
            v: vec![1.0; n],
            theta: vec![0.0; n],
        }
    }

    pub fn len(&self) -> usize {
        self.v.len()
    }

    pub fn is_empty(&self) -> bool {
        self.v.is_empty()
    }

    pub fn phasors(&self) -> Vec<Complex64> {
        self.v
            .iter()
            .zip(&self.theta)
            .map(|(&m, &a)| Complex64::from_polar(m, a))
            .collect()
    }

    pub fn from_phasors(v: &[Complex64]) -> Self {
        Self {
            v: v.iter().map(|c| c.norm()).collect(),
            theta: v.iter().map(|c| c.arg()).collect(),
        }
    }

    /// Concatenated `(V, θ)`.
    pub fn stacked(&self) -> Vec<f64> {
        self.v.iter().chain(&self.theta).copied().collect()
    }

    pub fn from_stacked(x: &[f64]) -> Self {
        let n = x.len() / 2;
        Self {
            v: x[..n].to_vec(),
            theta: x[n..].to_vec(),
        }
    }

    /// Root mean square errors of magnitude and angle against a reference.
    pub fn rmse(&self, truth: &StateVector) -> (f64, f64) {
        let n = self.v.len() as f64;
        let ev = self
            .v
            .iter()
            .zip(&truth.v)
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>();
        let et = self
            .theta
            .iter()
            .zip(&truth.theta)
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>();
        ((ev / n).sqrt(), (et / n).sqrt())
    }
}

/// Specified per-bus quantities for a power flow run.
#[derive(Debug, Clone, PartialEq)]
pub struct InjectionSpec {
    pub p: Vec<f64>,
    pub q: Vec<f64>,
    pub v_set: Vec<f64>,
    pub bus_types: Vec<BusType>,
}

impl InjectionSpec {
    pub fn from_case(case: &GridCase) -> Self {
        let (p, q) = case.net_injections();
        Self {
            p,
            q,
            v_set: case.voltage_setpoints(),
            bus_types: case.bus_types(),
        }
    }
}

const PF_MAX_ITER: usize = 50;
const PF_TOL: f64 = 1e-11;

/// Solves the AC power flow by Newton-Raphson in polar coordinates.
///
/// Slack and PV buses hold their voltage setpoint; PQ buses start at 1 p.u. and every
/// angle starts at 0. Converged when the largest P/Q mismatch is below 1e-11 p.u.
pub fn solve_power_flow(
    model: &AdmittanceModel,
    spec: &InjectionSpec,
) -> Result<StateVector, PowerFlowError> {
    let n = model.n_buses;
    let slack = spec
        .bus_types
        .iter()
        .position(|t| *t == BusType::Slack)
        .ok_or_else(|| PowerFlowError::InvalidConfig("no slack bus".into()))?;
    let mut state = StateVector::flat(n);
    for i in 0..n {
        if spec.bus_types[i] != BusType::PQ {
            state.v[i] = spec.v_set[i];
        }
    }
    let ang: Vec<usize> = (0..n).filter(|&i| i != slack).collect();
    let mag: Vec<usize> = (0..n)
        .filter(|&i| spec.bus_types[i] == BusType::PQ)
        .collect();
    let dim = ang.len() + mag.len();

    let mut mismatch = f64::INFINITY;
    for iter in 0..=PF_MAX_ITER {
        let v = state.phasors();
        let s = model.complex_injections(&v);
        let mut f = DVector::zeros(dim);
        for (r, &i) in ang.iter().enumerate() {
            f[r] = s[i].re - spec.p[i];
        }
        for (r, &i) in mag.iter().enumerate() {
            f[ang.len() + r] = s[i].im - spec.q[i];
        }
        mismatch = f.amax();
        if !mismatch.is_finite() {
            break;
        }
        if mismatch < PF_TOL {
            let a0 = state.theta[slack];
            state.theta.iter_mut().for_each(|t| *t -= a0);
            return Ok(state);
        }
        if iter == PF_MAX_ITER {
            break;
        }
        let (ds_dva, ds_dvm) = injection_sensitivities(model, &v);
        let mut jac = DMatrix::zeros(dim, dim);
        for (r, &i) in ang.iter().enumerate() {
            for (c, &j) in ang.iter().enumerate() {
                jac[(r, c)] = ds_dva[i][j].re;
            }
            for (c, &j) in mag.iter().enumerate() {
                jac[(r, ang.len() + c)] = ds_dvm[i][j].re;
            }
        }
        for (r, &i) in mag.iter().enumerate() {
            for (c, &j) in ang.iter().enumerate() {
                jac[(ang.len() + r, c)] = ds_dva[i][j].im;
            }
            for (c, &j) in mag.iter().enumerate() {
                jac[(ang.len() + r, ang.len() + c)] = ds_dvm[i][j].im;
            }
        }
        let dx = jac.lu().solve(&(-f)).ok_or(PowerFlowError::Singular)?;
        for (r, &i) in ang.iter().enumerate() {
            state.theta[i] += dx[r];
        }
        for (r, &i) in mag.iter().enumerate() {
            state.v[i] += dx[ang.len() + r];
        }
        if state.v.iter().any(|&m| !(m > 0.0)) {
            break;
        }
    }
    Err(PowerFlowError::NoConvergence {
        iterations: PF_MAX_ITER,
        mismatch,
    })
}

/// Dense `∂S/∂θ` and `∂S/∂|V|` of the complex injections.
fn injection_sensitivities(
    model: &AdmittanceModel,
    v: &[Complex64],
) -> (Vec<Vec<Complex64>>, Vec<Vec<Complex64>>) {
    let n = model.n_buses;
    let j = Complex64::new(0.0, 1.0);
    let current: Vec<Complex64> = model
        .rows
        .iter()
        .map(|row| row.iter().map(|&(k, y)| y * v[k]).sum())
        .collect();
    let unit: Vec<Complex64> = v.iter().map(|c| c / c.norm()).collect();
    let mut dva = vec![vec![Complex64::default(); n]; n];
    let mut dvm = vec![vec![Complex64::default(); n]; n];
    for i in 0..n {
        for &(k, y) in &model.rows[i] {
            // -j V_i conj(Y_ik V_k) and V_i conj(Y_ik e^{jθ_k})
            dva[i][k] -= j * v[i] * (y * v[k]).conj();
            dvm[i][k] += v[i] * (y * unit[k]).conj();
        }
        dva[i][i] += j * v[i] * current[i].conj();
        dvm[i][i] += current[i].conj() * unit[i];
    }
    (dva, dvm)
}

// --- Measurements -----------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum MeasurementKind {
    Vmag,
    Pflow,
    Qflow,
    Pinj,
    Qinj,
}

/// Where a meter sits: a bus, or the `from` end of a branch towards `to`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(into = "Vec<usize>", try_from = "Vec<usize>")]
pub enum Location {
    Bus(usize),
    Branch { from: usize, to: usize },
}

impl From<Location> for Vec<usize> {
    fn from(l: Location) -> Self {
        match l {
            Location::Bus(i) => vec![i],
            Location::Branch { from, to } => vec![from, to],
        }
    }
}

impl TryFrom<Vec<usize>> for Location {
    type Error = String;
    fn try_from(v: Vec<usize>) -> Result<Self, Self::Error> {
        match v.as_slice() {
            [i] => Ok(Location::Bus(*i)),
            [f, t] => Ok(Location::Branch { from: *f, to: *t }),
            _ => Err(format!(
                "location must have 1 or 2 entries, got {}",
                v.len()
            )),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeasurementMeta {
    pub kind: MeasurementKind,
    pub loc: Location,
    /// Standard deviation of the noise actually applied to this entry.
    pub sigma: f64,
    #[serde(rename = "outlier")]
    pub is_outlier: bool,
}

/// The complete meter set: every bus magnitude, P and Q at both ends of every branch,
/// and P and Q injection at every bus, in that order.
pub fn full_measurement_set(model: &AdmittanceModel, sigma: f64) -> Vec<MeasurementMeta> {
    let mut meta = Vec::new();
    let mk = |kind, loc| MeasurementMeta {
        kind,
        loc,
        sigma,
        is_outlier: false,
    };
    for i in 0..model.n_buses {
        meta.push(mk(MeasurementKind::Vmag, Location::Bus(i)));
    }
    for kind in [MeasurementKind::Pflow, MeasurementKind::Qflow] {
        for &(f, t) in &model.endpoints {
            meta.push(mk(kind, Location::Branch { from: f, to: t }));
            meta.push(mk(kind, Location::Branch { from: t, to: f }));
        }
    }
    for kind in [MeasurementKind::Pinj, MeasurementKind::Qinj] {
        for i in 0..model.n_buses {
            meta.push(mk(kind, Location::Bus(i)));
        }
    }
    meta
}

/// Resolved form of a measurement against a model, so evaluation does no lookups.
#[derive(Debug, Clone, Copy)]
pub(crate) enum Resolved {
    Vmag(usize),
    Flow {
        active: bool,
        at: usize,
        other: usize,
        branch: usize,
        from_side: bool,
    },
    Inj {
        active: bool,
        bus: usize,
    },
}

pub(crate) fn resolve(
    model: &AdmittanceModel,
    meta: &MeasurementMeta,
) -> Result<Resolved, PowerFlowError> {
    let n = model.n_buses;
    let bad = || PowerFlowError::UnknownLocation(format!("{:?} at {:?}", meta.kind, meta.loc));
    match (meta.kind, meta.loc) {
        (MeasurementKind::Vmag, Location::Bus(i)) if i < n => Ok(Resolved::Vmag(i)),
        (MeasurementKind::Pinj | MeasurementKind::Qinj, Location::Bus(i)) if i < n => {
            Ok(Resolved::Inj {
                active: meta.kind == MeasurementKind::Pinj,
                bus: i,
            })
        }
        (MeasurementKind::Pflow | MeasurementKind::Qflow, Location::Branch { from, to }) => {
            let (branch, from_side) = model.find_branch_end(from, to).ok_or_else(bad)?;
            Ok(Resolved::Flow {
                active: meta.kind == MeasurementKind::Pflow,
                at: from,
                other: to,
                branch,
                from_side,
            })
        }
        _ => Err(bad()),
    }
}

fn eval_resolved(model: &AdmittanceModel, state: &StateVector, r: Resolved) -> f64 {
    let (v, th) = (&state.v, &state.theta);
    match r {
        Resolved::Vmag(i) => v[i],
        Resolved::Flow {
            active,
            at: i,
            other: j,
            branch,
            from_side,
        } => {
            let e = model.branch_params[branch].end(from_side);
            let (s, c) = (th[i] - th[j]).sin_cos();
            let vv = v[i] * v[j];
            if active {
                v[i] * v[i] * e.g_hat - vv * (e.g * c + e.b * s)
            } else {
                -v[i] * v[i] * e.b_hat + vv * (e.b * c - e.g * s)
            }
        }
        Resolved::Inj { active, bus: i } => {
            let mut acc = 0.0;
            for &(j, y) in &model.rows[i] {
                let (s, c) = (th[i] - th[j]).sin_cos();
                acc += v[j]
                    * if active {
                        y.re * c + y.im * s
                    } else {
                        y.re * s - y.im * c
                    };
            }
            v[i] * acc
        }
    }
}

/// Evaluates the nonlinear measurement functions `h(state)`.
pub fn eval_measurements(
    model: &AdmittanceModel,
    state: &StateVector,
    meta: &[MeasurementMeta],
) -> Result<Vec<f64>, PowerFlowError> {
    meta.iter()
        .map(|m| resolve(model, m).map(|r| eval_resolved(model, state, r)))
        .collect()
}

/// Jacobian of `h` with respect to `(V_0..V_{n-1}, θ_0..θ_{n-1})`.
pub fn measurement_jacobian(
    model: &AdmittanceModel,
    state: &StateVector,
    meta: &[MeasurementMeta],
) -> Result<DMatrix<f64>, PowerFlowError> {
    let n = model.n_buses;
    let (v, th) = (&state.v, &state.theta);
    let mut jac = DMatrix::zeros(meta.len(), 2 * n);
    for (row, m) in meta.iter().enumerate() {
        match resolve(model, m)? {
            Resolved::Vmag(i) => jac[(row, i)] = 1.0,
            Resolved::Flow {
                active,
                at: i,
                other: j,
                branch,
                from_side,
            } => {
                let e = model.branch_params[branch].end(from_side);
                let (s, c) = (th[i] - th[j]).sin_cos();
                let vv = v[i] * v[j];
                if active {
                    let k = e.g * c + e.b * s;
                    jac[(row, i)] = 2.0 * v[i] * e.g_hat - v[j] * k;
                    jac[(row, j)] = -v[i] * k;
                    let dth = vv * (e.g * s - e.b * c);
                    jac[(row, n + i)] = dth;
                    jac[(row, n + j)] = -dth;
                } else {
                    let k = e.b * c - e.g * s;
                    jac[(row, i)] = -2.0 * v[i] * e.b_hat + v[j] * k;
                    jac[(row, j)] = v[i] * k;
                    let dth = -vv * (e.b * s + e.g * c);
                    jac[(row, n + i)] = dth;
                    jac[(row, n + j)] = -dth;
                }
            }
            Resolved::Inj { active, bus: i } => {
                for &(j, y) in &model.rows[i] {
                    let (g, b) = (y.re, y.im);
                    if j == i {
                        jac[(row, i)] += 2.0 * v[i] * if active { g } else { -b };
                        continue;
                    }
                    let (s, c) = (th[i] - th[j]).sin_cos();
                    let (val, dval) = if active {
                        (g * c + b * s, -g * s + b * c)
                    } else {
                        (g * s - b * c, g * c + b * s)
                    };
                    jac[(row, i)] += v[j] * val;
                    jac[(row, j)] += v[i] * val;
                    jac[(row, n + i)] += v[i] * v[j] * dval;
                    jac[(row, n + j)] -= v[i] * v[j] * dval;
                }
            }
        }
    }
    Ok(jac)
}

// --- Datasets ---------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeasurementSample {
    #[serde(flatten)]
    pub true_state: StateVector,
    pub z: Vec<f64>,
    pub z_clean: Vec<f64>,
    pub meta: Vec<MeasurementMeta>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
    /// Set when either side of the partition came out empty.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub degenerate: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub case_id: String,
    pub seed: u64,
    /// Nominal noise standard deviation (what an estimator is told).
    pub sigma: f64,
    pub eta: f64,
    pub k: f64,
    pub samples: Vec<MeasurementSample>,
    pub split: Split,
}

impl Dataset {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("dataset serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }

    pub fn train(&self) -> impl Iterator<Item = &MeasurementSample> {
        self.split.train.iter().map(move |&i| &self.samples[i])
    }

    pub fn test(&self) -> impl Iterator<Item = &MeasurementSample> {
        self.split.test.iter().map(move |&i| &self.samples[i])
    }

    /// Per-measurement σ an estimator is told: the nominal value for every entry.
    pub fn nominal_sigma(&self, sample: &MeasurementSample) -> Vec<f64> {
        vec![self.sigma; sample.z.len()]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetConfig {
    pub case_id: String,
    pub n_samples: usize,
    /// Bounds of the independent uniform factors applied to every bus's Pd and Qd.
    pub load_scale: (f64, f64),
    pub sigma: f64,
    pub eta: f64,
    pub k: f64,
    pub seed: u64,
    pub train_ratio: f64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            case_id: "case9".into(),
            n_samples: 500,
            load_scale: (0.9, 1.1),
            sigma: 1e-3,
            eta: 0.0,
            k: 1.0,
            seed: 0,
            train_ratio: 0.8,
        }
    }
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<(), PowerFlowError> {
        let bad = |m: String| Err(PowerFlowError::InvalidConfig(m));
        if !(0.0..=1.0).contains(&self.eta) {
            return bad(format!("eta must lie in [0, 1], got {}", self.eta));
        }
        if !(self.k >= 1.0) {
            return bad(format!("k must be at least 1, got {}", self.k));
        }
        if !(self.sigma > 0.0) {
            return bad(format!("sigma must be positive, got {}", self.sigma));
        }
        if self.n_samples == 0 {
            return bad("n_samples must be positive".into());
        }
        let (lo, hi) = self.load_scale;
        if !(lo > 0.0 && hi >= lo) {
            return bad(format!("bad load scale range ({lo}, {hi})"));
        }
        if !(self.train_ratio > 0.0 && self.train_ratio < 1.0) {
            return bad(format!(
                "train ratio must lie in (0, 1), got {}",
                self.train_ratio
            ));
        }
        Ok(())
    }
}

/// Attempts per sample before generation gives up on a perturbed scenario.
pub const MAX_SCENARIO_RETRIES: usize = 10;

/// Generates `n_samples` scenarios: perturbed loads, power flow, full meter set,
/// Gaussian noise, and `round(eta · M)` outlier entries per sample whose noise standard
/// deviation is multiplied by `k`. Each sample draws from its own ChaCha stream, so the
/// result does not depend on thread scheduling.
pub fn generate_dataset(case: &GridCase, cfg: &DatasetConfig) -> Result<Dataset, PowerFlowError> {
    cfg.validate()?;
    let model = AdmittanceModel::from_case(case)
        .map_err(|e| PowerFlowError::InvalidConfig(e.to_string()))?;
    let base_meta = full_measurement_set(&model, cfg.sigma);
    let samples: Result<Vec<_>, _> = (0..cfg.n_samples)
        .into_par_iter()
        .map(|i| generate_sample(case, &model, &base_meta, cfg, i))
        .collect();
    let ds = Dataset {
        case_id: cfg.case_id.clone(),
        seed: cfg.seed,
        sigma: cfg.sigma,
        eta: cfg.eta,
        k: cfg.k,
        samples: samples?,
        split: Split::default(),
    };
    Ok(split_dataset(ds, cfg.train_ratio, cfg.seed))
}

fn generate_sample(
    case: &GridCase,
    model: &AdmittanceModel,
    base_meta: &[MeasurementMeta],
    cfg: &DatasetConfig,
    index: usize,
) -> Result<MeasurementSample, PowerFlowError> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(index as u64 + 1);
    let (lo, hi) = cfg.load_scale;
    let mut last_err = String::new();
    for _ in 0..MAX_SCENARIO_RETRIES {
        let mut spec = InjectionSpec::from_case(case);
        for (i, bus) in case.buses.iter().enumerate() {
            let fp: f64 = rng.random_range(lo..=hi);
            let fq: f64 = rng.random_range(lo..=hi);
            spec.p[i] += bus.pd - fp * bus.pd;
            spec.q[i] += bus.qd - fq * bus.qd;
        }
        let state = match solve_power_flow(model, &spec) {
            Ok(s) => s,
            Err(e) => {
                last_err = e.to_string();
                continue;
            }
        };
        let z_clean = eval_measurements(model, &state, base_meta)?;
        let m = z_clean.len();
        let mut meta = base_meta.to_vec();
        let n_out = (cfg.eta * m as f64).round() as usize;
        if n_out > 0 {
            let mut idx: Vec<usize> = (0..m).collect();
            idx.shuffle(&mut rng);
            for &o in &idx[..n_out.min(m)] {
                meta[o].is_outlier = true;
                meta[o].sigma = cfg.sigma * cfg.k;
            }
        }
        let unit = Normal::new(0.0, 1.0).expect("unit normal");
        let z = z_clean
            .iter()
            .zip(&meta)
            .map(|(&h, mm)| h + mm.sigma * unit.sample(&mut rng))
            .collect();
        return Ok(MeasurementSample {
            true_state: state,
            z,
            z_clean,
            meta,
        });
    }
    Err(PowerFlowError::Generation {
        sample: index,
        reason: last_err,
    })
}

/// Shuffles the sample indices under `seed` and assigns the first `round(ratio · n)` to
/// training. The `degenerate` flag is raised when either side is empty.
pub fn split_dataset(mut ds: Dataset, ratio: f64, seed: u64) -> Dataset {
    let n = ds.samples.len();
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    idx.shuffle(&mut rng);
    let n_train = ((ratio * n as f64).round() as usize).min(n);
    let (train, test) = idx.split_at(n_train);
    ds.split = Split {
        train: train.to_vec(),
        test: test.to_vec(),
        degenerate: train.is_empty() || test.is_empty(),
    };
    ds
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cases;
    use crate::grid::{parse_case, BranchRecord, BusRecord};
    use approx::assert_abs_diff_eq;

    fn ieee9() -> (GridCase, AdmittanceModel) {
        let case = parse_case(cases::CASE9).unwrap();
        let model = AdmittanceModel::from_case(&case).unwrap();
        (case, model)
    }

    fn bus(id: usize, t: BusType) -> BusRecord {
        BusRecord {
            id,
            bus_type: t,
            pd: 0.0,
            qd: 0.0,
            gs: 0.0,
            bs: 0.0,
            base_kv: 1.0,
            vm: 1.0,
        }
    }

    #[test]
    fn unloaded_network_stays_flat() {
        let case = GridCase {
            name: "flat".into(),
            base_mva: 100.0,
            buses: vec![
                bus(1, BusType::Slack),
                bus(2, BusType::PQ),
                bus(3, BusType::PQ),
            ],
            branches: vec![
                BranchRecord::line(0, 1, 0.01, 0.1, 0.0),
                BranchRecord::line(1, 2, 0.02, 0.2, 0.0),
            ],
            gens: vec![],
        };
        let model = AdmittanceModel::from_case(&case).unwrap();
        let st = solve_power_flow(&model, &InjectionSpec::from_case(&case)).unwrap();
        for i in 0..3 {
            assert_abs_diff_eq!(st.v[i], 1.0, epsilon = 1e-14);
            assert_abs_diff_eq!(st.theta[i], 0.0, epsilon = 1e-14);
        }
    }

    #[test]
    fn converged_injections_match_spec() {
        let (case, model) = ieee9();
        let spec = InjectionSpec::from_case(&case);
        let st = solve_power_flow(&model, &spec).unwrap();
        assert_eq!(st.theta[case.slack()], 0.0);
        let meta = full_measurement_set(&model, 1e-3);
        let h = eval_measurements(&model, &st, &meta).unwrap();
        for (m, val) in meta.iter().zip(&h) {
            if let (MeasurementKind::Pinj, Location::Bus(i)) = (m.kind, m.loc) {
                if i != case.slack() {
                    assert!((val - spec.p[i]).abs() < 1e-8);
                }
            }
            if let (MeasurementKind::Qinj, Location::Bus(i)) = (m.kind, m.loc) {
                if case.buses[i].bus_type == BusType::PQ {
                    assert!((val - spec.q[i]).abs() < 1e-8);
                }
            }
            if let (MeasurementKind::Vmag, Location::Bus(i)) = (m.kind, m.loc) {
                if case.buses[i].bus_type != BusType::PQ {
                    assert_abs_diff_eq!(*val, spec.v_set[i], epsilon = 1e-12);
                }
            }
        }
    }

    #[test]
    fn heavy_loading_fails() {
        let (case, model) = ieee9();
        let mut spec = InjectionSpec::from_case(&case);
        for (i, b) in case.buses.iter().enumerate() {
            spec.p[i] -= 49.0 * b.pd;
            spec.q[i] -= 49.0 * b.qd;
        }
        assert!(matches!(
            solve_power_flow(&model, &spec),
            Err(PowerFlowError::NoConvergence { .. })
        ));
    }

    #[test]
    fn flat_state_has_no_flow() {
        let case = GridCase {
            name: "two".into(),
            base_mva: 100.0,
            buses: vec![bus(1, BusType::Slack), bus(2, BusType::PQ)],
            branches: vec![BranchRecord::line(0, 1, 0.05, 0.1, 0.0)],
            gens: vec![],
        };
        let model = AdmittanceModel::from_case(&case).unwrap();
        let meta = full_measurement_set(&model, 1e-3);
        let h = eval_measurements(&model, &StateVector::flat(2), &meta).unwrap();
        for (m, v) in meta.iter().zip(h) {
            if matches!(m.kind, MeasurementKind::Pflow | MeasurementKind::Qflow) {
                assert_abs_diff_eq!(v, 0.0, epsilon = 1e-15);
            }
        }
    }

    #[test]
    fn two_bus_active_flow() {
        let case = GridCase {
            name: "two".into(),
            base_mva: 100.0,
            buses: vec![bus(1, BusType::Slack), bus(2, BusType::PQ)],
            branches: vec![BranchRecord::line(0, 1, 0.0, 0.1, 0.0)],
            gens: vec![],
        };
        let model = AdmittanceModel::from_case(&case).unwrap();
        let st = StateVector {
            v: vec![1.0, 1.0],
            theta: vec![0.0, -0.1],
        };
        let meta = [MeasurementMeta {
            kind: MeasurementKind::Pflow,
            loc: Location::Branch { from: 0, to: 1 },
            sigma: 1e-3,
            is_outlier: false,
        }];
        let p = eval_measurements(&model, &st, &meta).unwrap()[0];
        assert_abs_diff_eq!(p, 10.0 * 0.1f64.sin(), epsilon = 1e-12);
        assert_abs_diff_eq!(p, 0.99833, epsilon = 1e-5);
    }

    #[test]
    fn unknown_location_is_an_error() {
        let (_, model) = ieee9();
        let meta = [MeasurementMeta {
            kind: MeasurementKind::Pflow,
            loc: Location::Branch { from: 0, to: 8 },
            sigma: 1e-3,
            is_outlier: false,
        }];
        assert!(matches!(
            eval_measurements(&model, &StateVector::flat(9), &meta),
            Err(PowerFlowError::UnknownLocation(_))
        ));
    }

    #[test]
    fn jacobian_matches_finite_differences() {
        let case = parse_case(cases::CASE14).unwrap();
        let model = AdmittanceModel::from_case(&case).unwrap();
        let st = solve_power_flow(&model, &InjectionSpec::from_case(&case)).unwrap();
        let meta = full_measurement_set(&model, 1e-3);
        let jac = measurement_jacobian(&model, &st, &meta).unwrap();
        let n = st.len();
        let h = 1e-6;
        for col in 0..2 * n {
            let mut x = st.stacked();
            x[col] += h;
            let up = eval_measurements(&model, &StateVector::from_stacked(&x), &meta).unwrap();
            x[col] -= 2.0 * h;
            let dn = eval_measurements(&model, &StateVector::from_stacked(&x), &meta).unwrap();
            for row in 0..meta.len() {
                let fd = (up[row] - dn[row]) / (2.0 * h);
                assert!(
                    (fd - jac[(row, col)]).abs() < 1e-6,
                    "row {row} col {col}: {fd} vs {}",
                    jac[(row, col)]
                );
            }
        }
    }

    #[test]
    fn outlier_counts_and_sigma() {
        let case = parse_case(cases::CASE9).unwrap();
        let cfg = DatasetConfig {
            n_samples: 20,
            eta: 0.30,
            k: 50.0,
            seed: 3,
            ..DatasetConfig::default()
        };
        let ds = generate_dataset(&case, &cfg).unwrap();
        for s in &ds.samples {
            let out: Vec<_> = s.meta.iter().filter(|m| m.is_outlier).collect();
            assert_eq!(out.len(), 19);
            assert!(out.iter().all(|m| (m.sigma - 0.05).abs() < 1e-15));
        }
        let clean = generate_dataset(
            &case,
            &DatasetConfig {
                n_samples: 5,
                ..cfg.clone()
            }
            .clone_with_eta(0.0),
        )
        .unwrap();
        assert!(clean
            .samples
            .iter()
            .all(|s| s.meta.iter().all(|m| !m.is_outlier)));
    }

    impl DatasetConfig {
        fn clone_with_eta(&self, eta: f64) -> Self {
            Self {
                eta,
                ..self.clone()
            }
        }
    }

    #[test]
    fn config_validation() {
        let bad = DatasetConfig {
            eta: 1.2,
            ..DatasetConfig::default()
        };
        assert!(matches!(
            bad.validate(),
            Err(PowerFlowError::InvalidConfig(_))
        ));
        assert!(DatasetConfig {
            k: 0.5,
            ..DatasetConfig::default()
        }
        .validate()
        .is_err());
        assert!(DatasetConfig {
            sigma: 0.0,
            ..DatasetConfig::default()
        }
        .validate()
        .is_err());
    }

    #[test]
    fn split_sizes_and_determinism() {
        let case = parse_case(cases::CASE9).unwrap();
        let cfg = DatasetConfig {
            n_samples: 10,
            seed: 11,
            ..DatasetConfig::default()
        };
        let ds = generate_dataset(&case, &cfg).unwrap();
        assert_eq!(ds.split.train.len(), 8);
        assert_eq!(ds.split.test.len(), 2);
        let again = split_dataset(ds.clone(), 0.8, 11);
        assert_eq!(again.split, ds.split);

        let mut one = ds.clone();
        one.samples.truncate(1);
        let one = split_dataset(one, 0.8, 1);
        assert_eq!((one.split.train.len(), one.split.test.len()), (1, 0));
        assert!(one.split.degenerate);
    }
}
