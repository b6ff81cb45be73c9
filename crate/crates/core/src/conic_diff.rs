//! Derivatives of the cone program solution map `(A, b, c) ↦ (x, y, s)`.
//!
//! The solution of the homogeneous embedding is parametrised by `z = (u, v, w)`:
//! `x = u`, `y = Π_{K*}(v)`, `s = Π_{K*}(v) − v`, `τ = max(w, 0)`, `κ = max(−w, 0)`.
//! With `Ω` the data matrix
//!
//! ```text
//! Ω = [  0   Aᵀ  0  c  0 ]
//!     [ −A   0   I  b  0 ]
//!     [ −cᵀ −bᵀ  0  0  1 ]
//! ```
//!
//! the embedding reads `F = Ω S h(z) = 0` with `S = diag(I, I, −I, 1, −1)`, which equals
//! `((Q − I)Π + I) z` for the skew matrix `Q` of `(A, b, c)`. Its Jacobian
//! `M = (Q − I) DΠ(z) + I` is singular along `z` itself (the embedding is homogeneous);
//! `π = Π(z)` spans the left null space, so the gauge-fixed `M + π e_wᵀ` is solved
//! instead. The extra freedom only rescales `(x, y, s, τ)` jointly, which the final
//! division by `τ` removes.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

use crate::conic::{project, project_jacobian, ConeSpec, ConicProgram, ConicSolution, SolveStatus};
use crate::sparse::{dot, CscMatrix};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DiffError {
    #[error("solution is not optimal ({0:?})")]
    NotOptimal(SolveStatus),
    #[error("no finite solution to recover (tau = {0})")]
    NoFiniteSolution(f64),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("degenerate solution (condition estimate {condition:.3e}); least-squares forward result attached")]
    DegenerateForward {
        condition: f64,
        fallback: Box<SolutionDerivative>,
    },
    #[error("degenerate solution (condition estimate {condition:.3e}); least-squares adjoint result attached")]
    DegenerateAdjoint {
        condition: f64,
        fallback: Box<ProgramGradient>,
    },
}

/// Point of the embedding `h = (x, y, s, τ, κ)`.
#[derive(Debug, Clone, PartialEq)]
pub struct HsdePoint {
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    pub s: Vec<f64>,
    pub tau: f64,
    pub kappa: f64,
}

impl HsdePoint {
    pub fn from_solution(sol: &ConicSolution) -> Self {
        Self {
            x: sol.x.clone(),
            y: sol.y.clone(),
            s: sol.s.clone(),
            tau: sol.tau,
            kappa: sol.kappa,
        }
    }

    pub fn stacked(&self) -> Vec<f64> {
        let mut h = Vec::with_capacity(self.x.len() + 2 * self.y.len() + 2);
        h.extend_from_slice(&self.x);
        h.extend_from_slice(&self.y);
        h.extend_from_slice(&self.s);
        h.push(self.tau);
        h.push(self.kappa);
        h
    }
}

/// Directional derivative of the τ-scaled solution.
#[derive(Debug, Clone, PartialEq)]
pub struct SolutionDerivative {
    pub dx: Vec<f64>,
    pub dy: Vec<f64>,
    pub ds: Vec<f64>,
}

/// Gradient of a scalar loss with respect to the τ-scaled solution.
#[derive(Debug, Clone, PartialEq)]
pub struct SolutionJacobianSeed {
    pub dl_dx: Vec<f64>,
    pub dl_dy: Vec<f64>,
    pub dl_ds: Vec<f64>,
}

impl SolutionJacobianSeed {
    pub fn zeros(p: usize, d: usize) -> Self {
        Self {
            dl_dx: vec![0.0; p],
            dl_dy: vec![0.0; d],
            dl_ds: vec![0.0; d],
        }
    }
}

/// Loss gradient with respect to the program data. `da` has exactly the pattern of `A`.
#[derive(Debug, Clone, PartialEq)]
pub struct ProgramGradient {
    pub da: CscMatrix,
    pub db: Vec<f64>,
    pub dc: Vec<f64>,
}

/// `Ω` laid out as `[0 Aᵀ 0 c 0; −A 0 I b 0; −cᵀ −bᵀ 0 0 1]`, of size
/// `(p + d + 1) × (p + 2d + 2)`.
pub fn build_omega(prog: &ConicProgram) -> DMatrix<f64> {
    let p = prog.n_vars();
    let d = prog.n_rows();
    let mut om = DMatrix::zeros(p + d + 1, p + 2 * d + 2);
    for (r, c, v) in prog.a.triplets() {
        om[(c, p + r)] = v;
        om[(p + r, c)] = -v;
    }
    for j in 0..p {
        om[(j, p + 2 * d)] = prog.c[j];
        om[(p + d, j)] = -prog.c[j];
    }
    for i in 0..d {
        om[(p + i, p + d + i)] = 1.0;
        om[(p + i, p + 2 * d)] = prog.b[i];
        om[(p + d, p + i)] = -prog.b[i];
    }
    om[(p + d, p + 2 * d + 1)] = 1.0;
    om
}

/// `(x/τ, y/τ, s/τ)`.
pub fn phi_map(h: &HsdePoint) -> Result<(Vec<f64>, Vec<f64>, Vec<f64>), DiffError> {
    if !(h.tau > 0.0) || !h.tau.is_finite() {
        return Err(DiffError::NoFiniteSolution(h.tau));
    }
    let t = h.tau;
    let sc = |v: &[f64]| v.iter().map(|a| a / t).collect::<Vec<_>>();
    Ok((sc(&h.x), sc(&h.y), sc(&h.s)))
}

/// Jacobian of [`phi_map`], `(p + 2d) × (p + 2d + 2)`: `I/τ` on the diagonal, the
/// `τ` column holds `−(x, y, s)/τ²`, and the `κ` column is zero.
pub fn d_phi(h: &HsdePoint) -> Result<DMatrix<f64>, DiffError> {
    if !(h.tau > 0.0) || !h.tau.is_finite() {
        return Err(DiffError::NoFiniteSolution(h.tau));
    }
    let n = h.x.len() + 2 * h.y.len();
    let t = h.tau;
    let mut j = DMatrix::zeros(n, n + 2);
    for (i, v) in h.x.iter().chain(&h.y).chain(&h.s).enumerate() {
        j[(i, i)] = 1.0 / t;
        j[(i, n)] = -v / (t * t);
    }
    Ok(j)
}

/// Everything needed to differentiate at one optimal solution. Immutable once built;
/// forward and adjoint calls share the factorization.
#[derive(Debug, Clone)]
pub struct OmegaSystem {
    pub omega: DMatrix<f64>,
    pub h_star: HsdePoint,
    /// `∂F/∂z = (Q − I) DΠ(z) + I` at the solution.
    pub df_dh: DMatrix<f64>,
    cones: ConeSpec,
    a_pattern: CscMatrix,
    dpi_v: DMatrix<f64>,
    w: f64,
    gauged: DMatrix<f64>,
    solver: LinearSolver,
}

#[derive(Debug, Clone)]
enum LinearSolver {
    Lu {
        lu: nalgebra::LU<f64, nalgebra::Dyn, nalgebra::Dyn>,
        lu_t: nalgebra::LU<f64, nalgebra::Dyn, nalgebra::Dyn>,
    },
    LeastSquares(nalgebra::SVD<f64, nalgebra::Dyn, nalgebra::Dyn>),
}

/// Pivot ratio beyond which the gauge-fixed Jacobian is treated as singular.
const DEGENERATE_CONDITION: f64 = 1e13;

impl OmegaSystem {
    pub fn new(prog: &ConicProgram, sol: &ConicSolution) -> Result<Self, DiffError> {
        if sol.status != SolveStatus::Optimal {
            return Err(DiffError::NotOptimal(sol.status));
        }
        let p = prog.n_vars();
        let d = prog.n_rows();
        if sol.x.len() != p || sol.y.len() != d || sol.s.len() != d {
            return Err(DiffError::Dimension(
                "solution does not match program".into(),
            ));
        }
        let h = HsdePoint::from_solution(sol);
        let (x, y, s) = phi_map(&h)?;
        let h_star = HsdePoint {
            x,
            y,
            s,
            tau: 1.0,
            kappa: h.kappa / h.tau,
        };
        let v: Vec<f64> = h_star.y.iter().zip(&h_star.s).map(|(a, b)| a - b).collect();
        let w = h_star.tau - h_star.kappa;
        let dpi_v = project_jacobian(&v, &prog.cones, true);
        let df_dh = residual_jacobian(prog, &dpi_v, w);

        let n = p + d + 1;
        let mut gauged = df_dh.clone();
        for i in 0..p {
            gauged[(i, n - 1)] += h_star.x[i];
        }
        for i in 0..d {
            gauged[(p + i, n - 1)] += h_star.y[i];
        }
        gauged[(n - 1, n - 1)] += h_star.tau;

        let lu = gauged.clone().lu();
        let diag = lu.u().diagonal();
        let (mut lo, mut hi) = (f64::INFINITY, 0.0f64);
        for v in diag.iter() {
            lo = lo.min(v.abs());
            hi = hi.max(v.abs());
        }
        let ratio = if lo > 0.0 { hi / lo } else { f64::INFINITY };
        let solver = if ratio.is_finite() && ratio < DEGENERATE_CONDITION {
            LinearSolver::Lu {
                lu,
                lu_t: gauged.transpose().lu(),
            }
        } else {
            LinearSolver::LeastSquares(gauged.clone().svd(true, true))
        };
        Ok(Self {
            omega: build_omega(prog),
            h_star,
            df_dh,
            cones: prog.cones.clone(),
            a_pattern: prog.a.clone(),
            dpi_v,
            w,
            gauged,
            solver,
        })
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.h_star.x.len(), self.h_star.y.len())
    }

    /// Condition estimate of the gauge-fixed Jacobian (`None` when well conditioned).
    pub fn degenerate_condition(&self) -> Option<f64> {
        match &self.solver {
            LinearSolver::Lu { .. } => None,
            LinearSolver::LeastSquares(svd) => {
                let sv = &svd.singular_values;
                let hi = sv.max();
                let lo = sv.min();
                Some(if lo > 0.0 { hi / lo } else { f64::INFINITY })
            }
        }
    }

    /// 2-norm condition number of the gauge-fixed Jacobian.
    pub fn condition_number(&self) -> f64 {
        let sv = self.gauged.singular_values();
        let lo = sv.min();
        if lo > 0.0 {
            sv.max() / lo
        } else {
            f64::INFINITY
        }
    }

    /// `‖Ω S h*‖`, the embedding residual at the stored point.
    pub fn residual(&self) -> f64 {
        let mut h = DVector::from_vec(self.h_star.stacked());
        let (p, d) = self.dims();
        for i in 0..d {
            h[p + d + i] = -h[p + d + i];
        }
        h[p + 2 * d + 1] = -h[p + 2 * d + 1];
        (&self.omega * h).norm()
    }

    fn solve(&self, rhs: &DVector<f64>, transpose: bool) -> DVector<f64> {
        match &self.solver {
            LinearSolver::Lu { lu, lu_t } => {
                let f = if transpose { lu_t } else { lu };
                f.solve(rhs).expect("nonsingular by construction")
            }
            LinearSolver::LeastSquares(svd) => {
                let eps = 1e-12 * svd.singular_values.max();
                if transpose {
                    // (U Σ Vᵀ)ᵀ = V Σ Uᵀ
                    let t = SvdT(svd);
                    t.solve(rhs, eps)
                } else {
                    svd.solve(rhs, eps).expect("svd has both factors")
                }
            }
        }
    }

    /// Forward mode: derivative of `(x, y, s)` along `(dA, db, dc)`. `dA` may have any
    /// pattern.
    pub fn forward_derivative(
        &self,
        da: &CscMatrix,
        db: &[f64],
        dc: &[f64],
    ) -> Result<SolutionDerivative, DiffError> {
        let (p, d) = self.dims();
        if da.nrows != d || da.ncols != p || db.len() != d || dc.len() != p {
            return Err(DiffError::Dimension(
                "perturbation does not match program".into(),
            ));
        }
        let h = &self.h_star;
        // dQ π with π = (x, y, τ)
        let mut rhs = DVector::zeros(p + d + 1);
        let daty = da.mul_t(&h.y);
        let dax = da.mul(&h.x);
        for j in 0..p {
            rhs[j] = daty[j] + dc[j] * h.tau;
        }
        for i in 0..d {
            rhs[p + i] = -dax[i] + db[i] * h.tau;
        }
        rhs[p + d] = -dot(dc, &h.x) - dot(db, &h.y);
        let dz = -self.solve(&rhs, false);

        let du = dz.rows(0, p);
        let dv = dz.rows(p, d);
        let dw = dz[p + d];
        let dy_h = &self.dpi_v * dv;
        let dtau = if self.w >= 0.0 { dw } else { 0.0 };
        let out = SolutionDerivative {
            dx: (0..p).map(|i| du[i] - h.x[i] * dtau).collect(),
            dy: (0..d).map(|i| dy_h[i] - h.y[i] * dtau).collect(),
            ds: (0..d).map(|i| dy_h[i] - dv[i] - h.s[i] * dtau).collect(),
        };
        match self.degenerate_condition() {
            None => Ok(out),
            Some(condition) => Err(DiffError::DegenerateForward {
                condition,
                fallback: Box::new(out),
            }),
        }
    }

    /// Reverse mode: pulls a seed on `(x, y, s)` back to `(A, b, c)`.
    pub fn adjoint_derivative(
        &self,
        seed: &SolutionJacobianSeed,
    ) -> Result<ProgramGradient, DiffError> {
        let (p, d) = self.dims();
        if seed.dl_dx.len() != p || seed.dl_dy.len() != d || seed.dl_ds.len() != d {
            return Err(DiffError::Dimension("seed does not match program".into()));
        }
        let h = &self.h_star;
        let g_tau = -(dot(&seed.dl_dx, &h.x) + dot(&seed.dl_dy, &h.y) + dot(&seed.dl_ds, &h.s));
        let mut gz = DVector::zeros(p + d + 1);
        for i in 0..p {
            gz[i] = seed.dl_dx[i];
        }
        let sum = DVector::from_iterator(d, (0..d).map(|i| seed.dl_dy[i] + seed.dl_ds[i]));
        let pv = self.dpi_v.tr_mul(&sum);
        for i in 0..d {
            gz[p + i] = pv[i] - seed.dl_ds[i];
        }
        gz[p + d] = if self.w >= 0.0 { g_tau } else { 0.0 };
        let r = -self.solve(&gz, true);

        let (r1, r2, r3) = (r.rows(0, p), r.rows(p, d), r[p + d]);
        let vals: Vec<f64> = self
            .a_pattern
            .triplets()
            .map(|(i, j, _)| h.y[i] * r1[j] - r2[i] * h.x[j])
            .collect();
        let out = ProgramGradient {
            da: self.a_pattern.with_values(vals),
            db: (0..d).map(|i| h.tau * r2[i] - r3 * h.y[i]).collect(),
            dc: (0..p).map(|j| h.tau * r1[j] - r3 * h.x[j]).collect(),
        };
        match self.degenerate_condition() {
            None => Ok(out),
            Some(condition) => Err(DiffError::DegenerateAdjoint {
                condition,
                fallback: Box::new(out),
            }),
        }
    }

    pub fn cones(&self) -> &ConeSpec {
        &self.cones
    }
}

struct SvdT<'a>(&'a nalgebra::SVD<f64, nalgebra::Dyn, nalgebra::Dyn>);

impl SvdT<'_> {
    fn solve(&self, b: &DVector<f64>, eps: f64) -> DVector<f64> {
        let u = self.0.u.as_ref().expect("u computed");
        let vt = self.0.v_t.as_ref().expect("v_t computed");
        // x = U Σ⁺ Vᵀ b
        let mut t = vt * b;
        for (i, s) in self.0.singular_values.iter().enumerate() {
            t[i] = if *s > eps { t[i] / s } else { 0.0 };
        }
        u * t
    }
}

/// `(Q − I) P + I` with `P = blkdiag(I_p, DΠ_{K*}(v), [w ≥ 0])`.
fn residual_jacobian(prog: &ConicProgram, dpi_v: &DMatrix<f64>, w: f64) -> DMatrix<f64> {
    let p = prog.n_vars();
    let d = prog.n_rows();
    let n = p + d + 1;
    let mut pm = DMatrix::zeros(n, n);
    for i in 0..p {
        pm[(i, i)] = 1.0;
    }
    pm.view_mut((p, p), (d, d)).copy_from(dpi_v);
    pm[(n - 1, n - 1)] = if w >= 0.0 { 1.0 } else { 0.0 };
    let q = skew_q(prog);
    let mut m = &q * &pm - &pm;
    for i in 0..n {
        m[(i, i)] += 1.0;
    }
    m
}

/// `Q = [0 Aᵀ c; −A 0 b; −cᵀ −bᵀ 0]`.
pub fn skew_q(prog: &ConicProgram) -> DMatrix<f64> {
    let p = prog.n_vars();
    let d = prog.n_rows();
    let mut q = DMatrix::zeros(p + d + 1, p + d + 1);
    for (r, c, v) in prog.a.triplets() {
        q[(c, p + r)] += v;
        q[(p + r, c)] -= v;
    }
    for j in 0..p {
        q[(j, p + d)] = prog.c[j];
        q[(p + d, j)] = -prog.c[j];
    }
    for i in 0..d {
        q[(p + i, p + d)] = prog.b[i];
        q[(p + d, p + i)] = -prog.b[i];
    }
    q
}

/// A few Newton steps on the embedding residual from an interior-point solution, so
/// that finite-difference oracles see solutions accurate to near machine precision.
/// Returns the input unchanged if the residual does not improve.
pub fn polish(prog: &ConicProgram, sol: &ConicSolution) -> ConicSolution {
    if sol.status != SolveStatus::Optimal {
        return sol.clone();
    }
    let p = prog.n_vars();
    let d = prog.n_rows();
    let q = skew_q(prog);
    let embed_residual = |z: &DVector<f64>| -> DVector<f64> {
        let v: Vec<f64> = z.rows(p, d).iter().copied().collect();
        let pv = project(&v, &prog.cones, true);
        let mut pz = z.clone();
        for i in 0..d {
            pz[p + i] = pv[i];
        }
        pz[p + d] = z[p + d].max(0.0);
        &q * &pz - &pz + z
    };
    let mut z = DVector::zeros(p + d + 1);
    for i in 0..p {
        z[i] = sol.x[i] / sol.tau;
    }
    for i in 0..d {
        z[p + i] = (sol.y[i] - sol.s[i]) / sol.tau;
    }
    z[p + d] = 1.0;
    let mut res = embed_residual(&z);
    let start = res.norm();
    for _ in 0..5 {
        let v: Vec<f64> = z.rows(p, d).iter().copied().collect();
        let dpi = project_jacobian(&v, &prog.cones, true);
        let mut m = residual_jacobian(prog, &dpi, 1.0);
        // keep w = 1 by swapping its column for the null-space gauge
        let pv = project(&v, &prog.cones, true);
        for i in 0..p {
            m[(i, p + d)] = z[i];
        }
        for i in 0..d {
            m[(p + i, p + d)] = pv[i];
        }
        m[(p + d, p + d)] = 1.0;
        let Some(step) = m.lu().solve(&res) else {
            break;
        };
        let mut cand = z.clone();
        for i in 0..p + d {
            cand[i] -= step[i];
        }
        let r = embed_residual(&cand);
        if !(r.norm() < res.norm()) {
            break;
        }
        z = cand;
        res = r;
        if res.norm() < 1e-15 {
            break;
        }
    }
    if !(res.norm() < start) {
        return sol.clone();
    }
    let v: Vec<f64> = z.rows(p, d).iter().copied().collect();
    let y = project(&v, &prog.cones, true);
    let s: Vec<f64> = y.iter().zip(&v).map(|(a, b)| a - b).collect();
    ConicSolution {
        x: z.rows(0, p).iter().copied().collect(),
        y,
        s,
        tau: 1.0,
        kappa: 0.0,
        ..sol.clone()
    }
}

/// Random programs with a planted, strictly complementary optimum, for gradient checks.
pub mod random {
    use super::*;

    /// Draws a cone layout with total dimension `d ≤ max_dim`, a generic `v` giving
    /// `y = Π_{K*}(v)` and `s = y − v`, a dense Gaussian `A` and a primal point `x`; then
    /// sets `b = Ax + s`, `c = −Aᵀy`, so `(x, y, s)` is optimal. The number of variables
    /// equals the number of active constraint directions, which makes the planted
    /// solution unique and strictly complementary for almost every draw.
    pub fn planted_program<R: Rng>(rng: &mut R, max_dim: usize) -> (ConicProgram, Vec<f64>) {
        let gauss = |rng: &mut R| -> f64 { StandardNormal.sample(rng) };
        loop {
            let d = rng.random_range(3..=max_dim);
            let mut left = d;
            let zero = rng.random_range(0..=left.min(2));
            left -= zero;
            let mut socs = Vec::new();
            while left >= 3 && rng.random_bool(0.5) {
                let q = rng.random_range(2..=left.min(4));
                socs.push(q);
                left -= q;
            }
            let cones = ConeSpec {
                zero_dim: zero,
                nonneg_dim: left,
                soc_dims: socs,
            };
            // Keep every coordinate at least 0.1 away from a kink of the projection.
            let v: Vec<f64> = loop {
                let cand: Vec<f64> = (0..d).map(|_| gauss(rng)).collect();
                if away_from_kinks(&cand, &cones, 0.1) {
                    break cand;
                }
            };
            let p = active_directions(&v, &cones);
            if p == 0 {
                continue;
            }
            let mut trip = Vec::new();
            for i in 0..d {
                for j in 0..p {
                    trip.push((i, j, gauss(rng)));
                }
            }
            let a = CscMatrix::from_triplets(d, p, &trip);
            let x: Vec<f64> = (0..p).map(|_| gauss(rng)).collect();
            let y = project(&v, &cones, true);
            let s: Vec<f64> = y.iter().zip(&v).map(|(a, b)| a - b).collect();
            let mut b = a.mul(&x);
            for i in 0..d {
                b[i] += s[i];
            }
            let c: Vec<f64> = a.mul_t(&y).iter().map(|v| -v).collect();
            let prog = ConicProgram::new(a, b, c, cones).expect("dense A uses every column");
            let sol = ConicSolution {
                x: x.clone(),
                y: y.clone(),
                s: s.clone(),
                tau: 1.0,
                kappa: 0.0,
                status: SolveStatus::Optimal,
                residuals: Default::default(),
                iterations: 0,
            };
            // Nearly singular active blocks make derivatives huge and hard to check.
            match OmegaSystem::new(&prog, &sol) {
                Ok(sys) if sys.condition_number() < MAX_CONDITION => {}
                _ => continue,
            }
            let mut planted = x;
            planted.extend(y);
            planted.extend(s);
            return (prog, planted);
        }
    }

    /// Rows pinned by complementarity: zero rows, nonnegative rows with `s = 0`, whole
    /// SOC blocks with `s = 0`, and one direction per SOC block where both sides sit on
    /// the boundary.
    const MAX_CONDITION: f64 = 1e4;

    fn active_directions(v: &[f64], cones: &ConeSpec) -> usize {
        let z = cones.zero_dim;
        let mut k = z + v[z..z + cones.nonneg_dim]
            .iter()
            .filter(|x| **x > 0.0)
            .count();
        for (off, q) in cones.soc_blocks() {
            let t = v[off];
            let r = v[off + 1..off + q]
                .iter()
                .map(|u| u * u)
                .sum::<f64>()
                .sqrt();
            if r <= t {
                k += q;
            } else if r > -t {
                k += 1;
            }
        }
        k
    }

    fn away_from_kinks(v: &[f64], cones: &ConeSpec, margin: f64) -> bool {
        let z = cones.zero_dim;
        if v[z..z + cones.nonneg_dim].iter().any(|x| x.abs() < margin) {
            return false;
        }
        cones.soc_blocks().into_iter().all(|(off, q)| {
            let t = v[off];
            let r = v[off + 1..off + q]
                .iter()
                .map(|u| u * u)
                .sum::<f64>()
                .sqrt();
            (r - t).abs() > margin && (r + t).abs() > margin && r > margin
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::conic::{solve, ConicSolver, SolverSettings};
    use approx::assert_abs_diff_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn scalar_lp(b: f64) -> ConicProgram {
        // min x s.t. x ≥ b: s = −b + x ≥ 0 → A = [−1], b' = [−b]
        ConicProgram::new(
            CscMatrix::from_triplets(1, 1, &[(0, 0, -1.0)]),
            vec![-b],
            vec![1.0],
            ConeSpec::new(0, 1, vec![]).unwrap(),
        )
        .unwrap()
    }

    fn min_t(u: [f64; 2]) -> ConicProgram {
        ConicProgram::new(
            CscMatrix::from_triplets(3, 1, &[(0, 0, -1.0)]),
            vec![0.0, u[0], u[1]],
            vec![1.0],
            ConeSpec::new(0, 0, vec![3]).unwrap(),
        )
        .unwrap()
    }

    #[test]
    fn omega_layout() {
        let prog = ConicProgram::new(
            CscMatrix::from_triplets(1, 1, &[(0, 0, 2.0)]),
            vec![3.0],
            vec![4.0],
            ConeSpec::new(0, 1, vec![]).unwrap(),
        )
        .unwrap();
        let om = build_omega(&prog);
        let want = DMatrix::from_row_slice(
            3,
            5,
            &[
                0., 2., 0., 4., 0., -2., 0., 1., 3., 0., -4., -3., 0., 0., 1.,
            ],
        );
        assert_eq!(om, want);
    }

    #[test]
    fn omega_of_zero_data() {
        let prog = ConicProgram {
            a: CscMatrix::zeros(2, 3),
            b: vec![0.0; 2],
            c: vec![0.0; 3],
            cones: ConeSpec::new(0, 2, vec![]).unwrap(),
        };
        let om = build_omega(&prog);
        assert_eq!(om.shape(), (3 + 2 + 1, 3 + 4 + 2));
        assert_eq!(om.iter().filter(|v| **v != 0.0).count(), 3);
        assert_eq!(om[(3, 5)], 1.0);
        assert_eq!(om[(4, 6)], 1.0);
        assert_eq!(om[(5, 8)], 1.0);
    }

    #[test]
    fn phi_examples() {
        let h = HsdePoint {
            x: vec![4.0],
            y: vec![2.0],
            s: vec![0.0],
            tau: 2.0,
            kappa: 0.0,
        };
        let (x, _, _) = phi_map(&h).unwrap();
        assert_eq!(x, vec![2.0]);
        let j = d_phi(&h).unwrap();
        assert_abs_diff_eq!(j[(0, 3)], -1.0);
        assert!(j.column(4).iter().all(|v| *v == 0.0));
        let h1 = HsdePoint {
            tau: 1.0,
            ..h.clone()
        };
        let j1 = d_phi(&h1).unwrap();
        assert_eq!(j1[(0, 0)], 1.0);
        assert_eq!(j1[(0, 3)], -4.0);
        assert_eq!(j1[(1, 3)], -2.0);
        let bad = HsdePoint { tau: 0.0, ..h };
        assert!(matches!(phi_map(&bad), Err(DiffError::NoFiniteSolution(_))));
    }

    #[test]
    fn scalar_lp_sensitivity() {
        let prog = scalar_lp(1.0);
        let sol = solve(&prog, 1e-10, 100).unwrap();
        let sys = OmegaSystem::new(&prog, &sol).unwrap();
        assert!(sys.residual() < 1e-8);
        // db of the original constraint x ≥ b is −db' in compact form
        let fwd = sys
            .forward_derivative(&CscMatrix::zeros(1, 1), &[-1.0], &[0.0])
            .unwrap();
        assert_abs_diff_eq!(fwd.dx[0], 1.0, epsilon = 1e-8);
        let zero = sys
            .forward_derivative(&CscMatrix::zeros(1, 1), &[0.0], &[0.0])
            .unwrap();
        assert!(zero
            .dx
            .iter()
            .chain(&zero.dy)
            .chain(&zero.ds)
            .all(|v| *v == 0.0));
        let seed = SolutionJacobianSeed {
            dl_dx: vec![1.0],
            dl_dy: vec![0.0],
            dl_ds: vec![0.0],
        };
        let g = sys.adjoint_derivative(&seed).unwrap();
        assert_abs_diff_eq!(-g.db[0], 1.0, epsilon = 1e-8);
        let g0 = sys
            .adjoint_derivative(&SolutionJacobianSeed::zeros(1, 1))
            .unwrap();
        assert!(g0
            .db
            .iter()
            .chain(&g0.dc)
            .chain(&g0.da.values)
            .all(|v| *v == 0.0));
    }

    #[test]
    fn soc_forward_matches_finite_difference() {
        let prog = min_t([3.0, 4.0]);
        let sol = polish(&prog, &solve(&prog, 1e-10, 100).unwrap());
        let sys = OmegaSystem::new(&prog, &sol).unwrap();
        let db = [0.0, 0.6, 0.8];
        let fwd = sys
            .forward_derivative(&CscMatrix::zeros(3, 1), &db, &[0.0])
            .unwrap();
        let h = 1e-6;
        let t = |e: f64| {
            let pr = min_t([3.0 + e * 0.6, 4.0 + e * 0.8]);
            polish(&pr, &solve(&pr, 1e-10, 100).unwrap()).x[0]
        };
        let fd = (t(h) - t(-h)) / (2.0 * h);
        assert!(
            (fwd.dx[0] - fd).abs() <= 1e-5 * fd.abs(),
            "{} vs {fd}",
            fwd.dx[0]
        );
        assert_abs_diff_eq!(fwd.dx[0], 1.0, epsilon = 1e-6);
    }

    #[test]
    fn polish_reaches_machine_precision() {
        let prog = min_t([3.0, 4.0]);
        let sol = solve(&prog, 1e-6, 100).unwrap();
        let pol = polish(&prog, &sol);
        assert!((pol.x[0] - 5.0).abs() < 1e-13);
    }

    #[test]
    fn adjoint_identity_on_random_programs() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut solver = ConicSolver::new(SolverSettings::default());
        for _ in 0..20 {
            let (prog, _) = random::planted_program(&mut rng, 10);
            let sol = solver.solve(&prog).unwrap();
            let sys = OmegaSystem::new(&prog, &polish(&prog, &sol)).unwrap();
            let (p, d) = sys.dims();
            let g = |rng: &mut ChaCha8Rng, n| -> Vec<f64> {
                (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
            };
            let da = prog.a.with_values(g(&mut rng, prog.a.nnz()));
            let db = g(&mut rng, d);
            let dc = g(&mut rng, p);
            let seed = SolutionJacobianSeed {
                dl_dx: g(&mut rng, p),
                dl_dy: g(&mut rng, d),
                dl_ds: g(&mut rng, d),
            };
            let f = sys.forward_derivative(&da, &db, &dc).unwrap();
            let a = sys.adjoint_derivative(&seed).unwrap();
            let lhs = dot(&seed.dl_dx, &f.dx) + dot(&seed.dl_dy, &f.dy) + dot(&seed.dl_ds, &f.ds);
            let rhs = dot(&a.da.values, &da.values) + dot(&a.db, &db) + dot(&a.dc, &dc);
            assert!(
                (lhs - rhs).abs() < 1e-10 * (1.0 + lhs.abs()),
                "{lhs} vs {rhs}"
            );
        }
    }

    #[test]
    fn rejects_non_optimal() {
        let prog = scalar_lp(1.0);
        let mut sol = solve(&prog, 1e-8, 100).unwrap();
        sol.status = SolveStatus::MaxIter;
        assert!(matches!(
            OmegaSystem::new(&prog, &sol),
            Err(DiffError::NotOptimal(_))
        ));
    }
}
