//! Cone programs in the compact form
//!
//! ```text
//! minimize cᵀx  subject to  Ax + s = b,  s ∈ K
//! ```
//!
//! with `K` a product of a zero cone, a nonnegative orthant and second-order cones, and
//! the dual `maximize −bᵀy  subject to  Aᵀy + c = 0,  y ∈ K*`.
//!
//! [`ConicSolver`] runs a primal-dual interior-point method on the homogeneous
//! self-dual embedding, so the returned `(x, y, s, τ, κ)` either certify optimality
//! (`τ > 0`) or infeasibility (`τ = 0`).

pub mod cones;
mod ipm;
pub mod ldl;

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::sparse::{dot, norm2, CscMatrix};

pub use cones::{in_cone, project, project_jacobian, ConeSpec};
pub use ipm::ConicSolver;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConicError {
    #[error("malformed program: {0}")]
    Malformed(String),
    #[error("factorization failed: {0}")]
    Factorization(String),
    #[error("not a solution (tau = {0})")]
    NotASolution(f64),
    #[error("cannot parse program dump: {0}")]
    Parse(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConicProgram {
    pub a: CscMatrix,
    pub b: Vec<f64>,
    pub c: Vec<f64>,
    pub cones: ConeSpec,
}

impl ConicProgram {
    pub fn new(
        a: CscMatrix,
        b: Vec<f64>,
        c: Vec<f64>,
        cones: ConeSpec,
    ) -> Result<Self, ConicError> {
        let p = Self { a, b, c, cones };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<(), ConicError> {
        self.cones.validate()?;
        let d = self.cones.dim();
        if self.a.nrows != d || self.b.len() != d {
            return Err(ConicError::Malformed(format!(
                "cone dimension {d}, A has {} rows, b has {}",
                self.a.nrows,
                self.b.len()
            )));
        }
        if self.a.ncols != self.c.len() {
            return Err(ConicError::Malformed(format!(
                "A has {} columns, c has {}",
                self.a.ncols,
                self.c.len()
            )));
        }
        if let Some(j) = (0..self.a.ncols).find(|&j| self.a.colptr[j] == self.a.colptr[j + 1]) {
            return Err(ConicError::Malformed(format!(
                "variable {j} appears in no constraint"
            )));
        }
        Ok(())
    }

    pub fn n_vars(&self) -> usize {
        self.a.ncols
    }

    pub fn n_rows(&self) -> usize {
        self.a.nrows
    }

    /// Plain-text sparse triplet dump:
    ///
    /// ```text
    /// conic-program v1
    /// dims <rows> <cols> <nnz>
    /// cones <zero> <nonneg> <k> <q_1> ... <q_k>
    /// A
    /// <row> <col> <value>        (nnz lines, 0-based)
    /// b
    /// <value>                    (rows lines)
    /// c
    /// <value>                    (cols lines)
    /// ```
    ///
    /// Values are written with 17 significant digits so the dump reloads bit-exactly.
    pub fn to_triplet_text(&self) -> String {
        let mut out = String::new();
        let cones = &self.cones;
        writeln!(out, "conic-program v1").unwrap();
        writeln!(
            out,
            "dims {} {} {}",
            self.n_rows(),
            self.n_vars(),
            self.a.nnz()
        )
        .unwrap();
        write!(
            out,
            "cones {} {} {}",
            cones.zero_dim,
            cones.nonneg_dim,
            cones.soc_dims.len()
        )
        .unwrap();
        for q in &cones.soc_dims {
            write!(out, " {q}").unwrap();
        }
        writeln!(out).unwrap();
        writeln!(out, "A").unwrap();
        for (r, c, v) in self.a.triplets() {
            writeln!(out, "{r} {c} {v:.16e}").unwrap();
        }
        writeln!(out, "b").unwrap();
        for v in &self.b {
            writeln!(out, "{v:.16e}").unwrap();
        }
        writeln!(out, "c").unwrap();
        for v in &self.c {
            writeln!(out, "{v:.16e}").unwrap();
        }
        out
    }

    pub fn from_triplet_text(text: &str) -> Result<Self, ConicError> {
        let err = |m: &str| ConicError::Parse(m.to_string());
        let mut lines = text.lines().map(str::trim).filter(|l| !l.is_empty());
        if lines.next() != Some("conic-program v1") {
            return Err(err("missing header"));
        }
        let nums = |l: Option<&str>, tag: &str| -> Result<Vec<usize>, ConicError> {
            let l = l.ok_or_else(|| err(tag))?;
            let mut it = l.split_whitespace();
            if it.next() != Some(tag) {
                return Err(err(tag));
            }
            it.map(|t| t.parse().map_err(|_| err(tag))).collect()
        };
        let dims = nums(lines.next(), "dims")?;
        let cone_line = nums(lines.next(), "cones")?;
        if dims.len() != 3 || cone_line.len() < 3 || cone_line.len() != 3 + cone_line[2] {
            return Err(err("bad dims or cones line"));
        }
        let (rows, cols, nnz) = (dims[0], dims[1], dims[2]);
        let cones = ConeSpec::new(cone_line[0], cone_line[1], cone_line[3..].to_vec())?;
        let float = |t: &str| t.parse::<f64>().map_err(|_| err("bad number"));
        if lines.next() != Some("A") {
            return Err(err("A"));
        }
        let mut trip = Vec::with_capacity(nnz);
        for _ in 0..nnz {
            let l = lines.next().ok_or_else(|| err("truncated A"))?;
            let f: Vec<&str> = l.split_whitespace().collect();
            if f.len() != 3 {
                return Err(err("bad triplet"));
            }
            let r: usize = f[0].parse().map_err(|_| err("bad row"))?;
            let c: usize = f[1].parse().map_err(|_| err("bad col"))?;
            if r >= rows || c >= cols {
                return Err(err("triplet out of range"));
            }
            trip.push((r, c, float(f[2])?));
        }
        let mut vec_block = |tag: &str, len: usize| -> Result<Vec<f64>, ConicError> {
            if lines.next() != Some(tag) {
                return Err(err(tag));
            }
            (0..len)
                .map(|_| float(lines.next().ok_or_else(|| err("truncated vector"))?))
                .collect()
        };
        let b = vec_block("b", rows)?;
        let c = vec_block("c", cols)?;
        Self::new(CscMatrix::from_triplets(rows, cols, &trip), b, c, cones)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolveStatus {
    Optimal,
    PrimalInfeasible,
    DualInfeasible,
    MaxIter,
}

/// Normalised residuals: `‖Ax+s−b‖/(1+‖b‖)`, `‖Aᵀy+c‖/(1+‖c‖)` and
/// `|cᵀx+bᵀy|/(1+|cᵀx|+|bᵀy|)`, all at the τ-scaled point.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Residuals {
    pub primal: f64,
    pub dual: f64,
    pub gap: f64,
}

impl Residuals {
    pub fn max(&self) -> f64 {
        self.primal.max(self.dual).max(self.gap)
    }
}

/// Solver output. When `status` is optimal, `x`, `y`, `s` are already divided by the
/// embedding's `τ`, so `tau = 1` and `kappa` holds `κ/τ`. Infeasibility certificates
/// come back with `tau = 0`: a primal certificate in `y` (`bᵀy = −1`), a dual one in
/// `x` and `s` (`cᵀx = −1`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConicSolution {
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    pub s: Vec<f64>,
    pub tau: f64,
    pub kappa: f64,
    pub status: SolveStatus,
    pub residuals: Residuals,
    pub iterations: usize,
}

impl ConicSolution {
    pub fn is_optimal(&self) -> bool {
        self.status == SolveStatus::Optimal
    }

    pub fn objective(&self, prog: &ConicProgram) -> f64 {
        dot(&prog.c, &self.x) / self.tau
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolverSettings {
    /// Target for every normalised residual.
    pub tol: f64,
    pub max_iter: usize,
    /// Static regularization on the primal and equality blocks of the KKT matrix.
    pub static_reg: f64,
    /// Pivots below `dyn_reg_eps` (with the expected sign) are replaced by `dyn_reg_delta`.
    pub dyn_reg_eps: f64,
    pub dyn_reg_delta: f64,
    pub refine_steps: usize,
    /// Fraction of the distance to the cone boundary taken per step.
    pub step_fraction: f64,
}

impl Default for SolverSettings {
    fn default() -> Self {
        Self {
            tol: 1e-8,
            max_iter: 100,
            static_reg: 1e-9,
            dyn_reg_eps: 1e-13,
            dyn_reg_delta: 1e-7,
            refine_steps: 10,
            step_fraction: 0.99,
        }
    }
}

/// One-shot solve with default settings apart from `tol` and `max_iter`.
pub fn solve(prog: &ConicProgram, tol: f64, max_iter: usize) -> Result<ConicSolution, ConicError> {
    ConicSolver::new(SolverSettings {
        tol,
        max_iter,
        ..SolverSettings::default()
    })
    .solve(prog)
}

/// Unnormalised `(‖Ax+s−b‖, ‖Aᵀy+c‖, |cᵀx+bᵀy|)` at the τ-scaled point.
pub fn kkt_residuals(
    prog: &ConicProgram,
    sol: &ConicSolution,
) -> Result<(f64, f64, f64), ConicError> {
    if !(sol.tau > 0.0) || !sol.tau.is_finite() {
        return Err(ConicError::NotASolution(sol.tau));
    }
    let t = sol.tau;
    let x: Vec<f64> = sol.x.iter().map(|v| v / t).collect();
    let y: Vec<f64> = sol.y.iter().map(|v| v / t).collect();
    let mut rp: Vec<f64> = sol.s.iter().zip(&prog.b).map(|(s, b)| s / t - b).collect();
    prog.a.gemv(1.0, &x, &mut rp);
    let mut rd = prog.c.clone();
    prog.a.gemv_t(1.0, &y, &mut rd);
    let gap = (dot(&prog.c, &x) + dot(&prog.b, &y)).abs();
    Ok((norm2(&rp), norm2(&rd), gap))
}

/// Normalised residuals of a candidate point (see [`Residuals`]).
pub fn scaled_residuals(prog: &ConicProgram, sol: &ConicSolution) -> Result<Residuals, ConicError> {
    let (p, d, _) = kkt_residuals(prog, sol)?;
    let t = sol.tau;
    let cx = dot(&prog.c, &sol.x) / t;
    let by = dot(&prog.b, &sol.y) / t;
    Ok(Residuals {
        primal: p / (1.0 + norm2(&prog.b)),
        dual: d / (1.0 + norm2(&prog.c)),
        gap: (cx + by).abs() / (1.0 + cx.abs() + by.abs()),
    })
}
