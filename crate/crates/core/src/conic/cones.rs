//! Cone bookkeeping: projections, their derivatives, and the Jordan-algebra pieces the
//! interior-point method needs (Nesterov-Todd scaling, products, step lengths).

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::ConicError;

/// Product cone `{0}^zero_dim × R_+^nonneg_dim × SOC(q_1) × ... × SOC(q_k)`, in that
/// row order.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub struct ConeSpec {
    pub zero_dim: usize,
    pub nonneg_dim: usize,
    pub soc_dims: Vec<usize>,
}

impl ConeSpec {
    pub fn new(
        zero_dim: usize,
        nonneg_dim: usize,
        soc_dims: Vec<usize>,
    ) -> Result<Self, ConicError> {
        let c = Self {
            zero_dim,
            nonneg_dim,
            soc_dims,
        };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<(), ConicError> {
        if let Some(q) = self.soc_dims.iter().find(|&&q| q < 2) {
            return Err(ConicError::Malformed(format!(
                "second-order cone of size {q} (< 2)"
            )));
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.zero_dim + self.nonneg_dim + self.soc_dims.iter().sum::<usize>()
    }

    /// Rows of the nonnegative and second-order blocks.
    pub fn conic_dim(&self) -> usize {
        self.dim() - self.zero_dim
    }

    /// Barrier degree: one per nonnegative row, one per second-order block.
    pub fn degree(&self) -> usize {
        self.nonneg_dim + self.soc_dims.len()
    }

    /// `(offset, size)` of every second-order block within the full row space.
    pub fn soc_blocks(&self) -> Vec<(usize, usize)> {
        let mut off = self.zero_dim + self.nonneg_dim;
        self.soc_dims
            .iter()
            .map(|&q| {
                let b = (off, q);
                off += q;
                b
            })
            .collect()
    }
}

pub fn soc_project(v: &[f64], out: &mut [f64]) {
    let t = v[0];
    let r = v[1..].iter().map(|u| u * u).sum::<f64>().sqrt();
    if r <= t {
        out.copy_from_slice(v);
    } else if r <= -t {
        out.iter_mut().for_each(|o| *o = 0.0);
    } else {
        let a = 0.5 * (t + r);
        out[0] = a;
        for (o, u) in out[1..].iter_mut().zip(&v[1..]) {
            *o = a * u / r;
        }
    }
}

/// Euclidean projection onto the cone (`dual = false`) or its dual (`dual = true`).
/// Only the zero block differs: it projects to 0, its dual (the free cone) is the identity.
pub fn project(v: &[f64], cones: &ConeSpec, dual: bool) -> Vec<f64> {
    let mut out = vec![0.0; v.len()];
    let z = cones.zero_dim;
    if dual {
        out[..z].copy_from_slice(&v[..z]);
    }
    for i in z..z + cones.nonneg_dim {
        out[i] = v[i].max(0.0);
    }
    for (off, q) in cones.soc_blocks() {
        soc_project(&v[off..off + q], &mut out[off..off + q]);
    }
    out
}

/// Jacobian of [`project`] at `v`. At a kink the one-sided derivative of the interior
/// branch is used: a nonnegative entry at exactly 0 gets 1, an SOC point on the
/// boundary `‖u‖ = t` gets the identity.
pub fn project_jacobian(v: &[f64], cones: &ConeSpec, dual: bool) -> DMatrix<f64> {
    let d = v.len();
    let mut jac = DMatrix::zeros(d, d);
    let z = cones.zero_dim;
    if dual {
        for i in 0..z {
            jac[(i, i)] = 1.0;
        }
    }
    for i in z..z + cones.nonneg_dim {
        jac[(i, i)] = if v[i] >= 0.0 { 1.0 } else { 0.0 };
    }
    for (off, q) in cones.soc_blocks() {
        let blk = soc_project_jacobian(&v[off..off + q]);
        jac.view_mut((off, off), (q, q)).copy_from(&blk);
    }
    jac
}

pub fn soc_project_jacobian(v: &[f64]) -> DMatrix<f64> {
    let q = v.len();
    let t = v[0];
    let r = v[1..].iter().map(|u| u * u).sum::<f64>().sqrt();
    if r <= t {
        return DMatrix::identity(q, q);
    }
    if r <= -t {
        return DMatrix::zeros(q, q);
    }
    let mut m = DMatrix::zeros(q, q);
    m[(0, 0)] = 0.5;
    let ratio = t / r;
    for i in 1..q {
        let ui = v[i] / r;
        m[(0, i)] = 0.5 * ui;
        m[(i, 0)] = 0.5 * ui;
        for j in 1..q {
            let uj = v[j] / r;
            m[(i, j)] = -0.5 * ratio * ui * uj;
        }
        m[(i, i)] += 0.5 * (1.0 + ratio);
    }
    m
}

/// Membership test with absolute slack `tol`.
pub fn in_cone(v: &[f64], cones: &ConeSpec, dual: bool, tol: f64) -> bool {
    let z = cones.zero_dim;
    if !dual && v[..z].iter().any(|x| x.abs() > tol) {
        return false;
    }
    if v[z..z + cones.nonneg_dim].iter().any(|&x| x < -tol) {
        return false;
    }
    cones.soc_blocks().into_iter().all(|(off, q)| {
        let b = &v[off..off + q];
        b[1..].iter().map(|u| u * u).sum::<f64>().sqrt() <= b[0] + tol
    })
}

// --- Interior-point helpers. These act on the conic rows only (zero block removed). ---

/// Smallest Jordan eigenvalue over all blocks.
pub(crate) fn min_eig(v: &[f64], nonneg: usize, socs: &[(usize, usize)]) -> f64 {
    let mut m = f64::INFINITY;
    for &x in &v[..nonneg] {
        m = m.min(x);
    }
    for &(off, q) in socs {
        let b = &v[off..off + q];
        m = m.min(b[0] - norm(&b[1..]));
    }
    m
}

/// Adds `a · e` with `e` the identity element.
pub(crate) fn add_identity(v: &mut [f64], a: f64, nonneg: usize, socs: &[(usize, usize)]) {
    for x in &mut v[..nonneg] {
        *x += a;
    }
    for &(off, _) in socs {
        v[off] += a;
    }
}

pub(crate) fn identity_element(n: usize, nonneg: usize, socs: &[(usize, usize)]) -> Vec<f64> {
    let mut e = vec![0.0; n];
    add_identity(&mut e, 1.0, nonneg, socs);
    e
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// `t² − ‖u‖²`, factored to limit cancellation near the boundary.
fn soc_det(b: &[f64]) -> f64 {
    let r = norm(&b[1..]);
    (b[0] - r) * (b[0] + r)
}

/// Jordan product `u ∘ v`.
pub(crate) fn jordan_product(
    u: &[f64],
    v: &[f64],
    out: &mut [f64],
    nonneg: usize,
    socs: &[(usize, usize)],
) {
    for i in 0..nonneg {
        out[i] = u[i] * v[i];
    }
    for &(off, q) in socs {
        let (a, b) = (&u[off..off + q], &v[off..off + q]);
        out[off] = a.iter().zip(b).map(|(x, y)| x * y).sum();
        for i in 1..q {
            out[off + i] = a[0] * b[i] + b[0] * a[i];
        }
    }
}

/// Solves `u ∘ x = v` for `x` (`u` in the interior).
pub(crate) fn jordan_div(
    u: &[f64],
    v: &[f64],
    out: &mut [f64],
    nonneg: usize,
    socs: &[(usize, usize)],
) {
    for i in 0..nonneg {
        out[i] = v[i] / u[i];
    }
    for &(off, q) in socs {
        let (a, b) = (&u[off..off + q], &v[off..off + q]);
        let rho = soc_det(a);
        let nu: f64 = a[1..].iter().zip(&b[1..]).map(|(x, y)| x * y).sum();
        let x0 = (a[0] * b[0] - nu) / rho;
        out[off] = x0;
        for i in 1..q {
            out[off + i] = (b[i] - x0 * a[i]) / a[0];
        }
    }
}

/// Largest `α ∈ [0, α_max]` keeping `v + α dv` in the cone.
pub(crate) fn max_step(
    v: &[f64],
    dv: &[f64],
    nonneg: usize,
    socs: &[(usize, usize)],
    alpha_max: f64,
) -> f64 {
    let mut alpha = alpha_max;
    for i in 0..nonneg {
        if dv[i] < 0.0 {
            alpha = alpha.min(-v[i] / dv[i]);
        }
    }
    for &(off, q) in socs {
        alpha = alpha.min(soc_max_step(&v[off..off + q], &dv[off..off + q]));
    }
    alpha.max(0.0)
}

fn soc_max_step(s: &[f64], d: &[f64]) -> f64 {
    // f(α) = (s0 + α d0)² − ‖s1 + α d1‖² = a α² + 2 b α + c, with c > 0.
    let a = d[0] * d[0] - d[1..].iter().map(|x| x * x).sum::<f64>();
    let b = s[0] * d[0] - s[1..].iter().zip(&d[1..]).map(|(x, y)| x * y).sum::<f64>();
    let c = soc_det(s).max(0.0);
    let mut best = f64::INFINITY;
    if a.abs() < 1e-300 {
        if b < 0.0 {
            best = -c / (2.0 * b);
        }
    } else {
        let disc = b * b - a * c;
        if disc >= 0.0 {
            let q = -(b + b.signum() * disc.sqrt());
            for r in [q / a, if q != 0.0 { c / q } else { f64::INFINITY }] {
                if r > 0.0 && r < best {
                    best = r;
                }
            }
        }
    }
    if d[0] < 0.0 {
        best = best.min(-s[0] / d[0]);
    }
    best
}

/// Nesterov-Todd scaling point for one iterate pair `(s, z)`, both strictly interior.
///
/// `W` is symmetric with `W z = W⁻¹ s = λ`. Nonnegative rows store `w = sqrt(s/z)`;
/// each SOC block stores `η` and the normalised scaling vector `w̄`.
#[derive(Debug, Clone)]
pub(crate) struct NtScaling {
    nonneg: usize,
    socs: Vec<(usize, usize)>,
    pub(crate) w_lin: Vec<f64>,
    eta: Vec<f64>,
    wbar: Vec<Vec<f64>>,
    pub(crate) lambda: Vec<f64>,
}

impl NtScaling {
    pub(crate) fn new(nonneg: usize, socs: &[(usize, usize)]) -> Self {
        Self {
            nonneg,
            socs: socs.to_vec(),
            w_lin: vec![1.0; nonneg],
            eta: vec![1.0; socs.len()],
            wbar: socs
                .iter()
                .map(|&(_, q)| {
                    let mut w = vec![0.0; q];
                    w[0] = 1.0;
                    w
                })
                .collect(),
            lambda: Vec::new(),
        }
    }

    /// Recomputes the scaling. Returns `false` if either point left the cone interior.
    pub(crate) fn update(&mut self, s: &[f64], z: &[f64]) -> bool {
        for i in 0..self.nonneg {
            if !(s[i] > 0.0 && z[i] > 0.0) {
                return false;
            }
            self.w_lin[i] = (s[i] / z[i]).sqrt();
        }
        for (k, &(off, q)) in self.socs.iter().enumerate() {
            let (sb, zb) = (&s[off..off + q], &z[off..off + q]);
            let (ds, dz) = (soc_det(sb), soc_det(zb));
            if !(ds > 0.0 && dz > 0.0 && sb[0] > 0.0 && zb[0] > 0.0) {
                return false;
            }
            let (ns, nz) = (ds.sqrt(), dz.sqrt());
            let sn: Vec<f64> = sb.iter().map(|x| x / ns).collect();
            let zn: Vec<f64> = zb.iter().map(|x| x / nz).collect();
            let dot: f64 = sn.iter().zip(&zn).map(|(a, b)| a * b).sum();
            let gamma = ((1.0 + dot) / 2.0).sqrt();
            let w = &mut self.wbar[k];
            w[0] = (sn[0] + zn[0]) / (2.0 * gamma);
            for i in 1..q {
                w[i] = (sn[i] - zn[i]) / (2.0 * gamma);
            }
            // Renormalise so that w0² − ‖w1‖² = 1 holds to machine precision.
            let w1 = norm(&w[1..]);
            w[0] = (1.0 + w1 * w1).sqrt();
            self.eta[k] = (ds / dz).sqrt().sqrt();
        }
        let mut lambda = vec![0.0; z.len()];
        self.apply_w(z, &mut lambda);
        self.lambda = lambda;
        true
    }

    /// `out = W v`.
    pub(crate) fn apply_w(&self, v: &[f64], out: &mut [f64]) {
        self.apply(v, out, false);
    }

    /// `out = W⁻¹ v`.
    pub(crate) fn apply_w_inv(&self, v: &[f64], out: &mut [f64]) {
        self.apply(v, out, true);
    }

    fn apply(&self, v: &[f64], out: &mut [f64], inverse: bool) {
        for i in 0..self.nonneg {
            out[i] = if inverse {
                v[i] / self.w_lin[i]
            } else {
                v[i] * self.w_lin[i]
            };
        }
        for (k, &(off, q)) in self.socs.iter().enumerate() {
            let w = &self.wbar[k];
            let (sgn, scale) = if inverse {
                (-1.0, 1.0 / self.eta[k])
            } else {
                (1.0, self.eta[k])
            };
            let b = &v[off..off + q];
            let w1b: f64 = w[1..].iter().zip(&b[1..]).map(|(x, y)| x * y).sum();
            // W = η [w0, w1ᵀ; w1, I + w1 w1ᵀ/(1+w0)], inverse flips the sign of w1.
            out[off] = scale * (w[0] * b[0] + sgn * w1b);
            let coef = sgn * b[0] + w1b / (1.0 + w[0]);
            for i in 1..q {
                out[off + i] = scale * (b[i] + coef * w[i]);
            }
        }
    }

    /// Dense `W⁻¹` block of SOC number `k`.
    pub(crate) fn soc_w_inv(&self, k: usize) -> DMatrix<f64> {
        let w = &self.wbar[k];
        let q = w.len();
        let inv_eta = 1.0 / self.eta[k];
        let mut m = DMatrix::zeros(q, q);
        m[(0, 0)] = w[0];
        for i in 1..q {
            m[(0, i)] = -w[i];
            m[(i, 0)] = -w[i];
            for j in 1..q {
                m[(i, j)] = w[i] * w[j] / (1.0 + w[0]) + if i == j { 1.0 } else { 0.0 };
            }
        }
        m * inv_eta
    }

    /// Dense `WᵀW` block of SOC number `k`.
    #[cfg(test)]
    pub(crate) fn soc_w2(&self, k: usize) -> DMatrix<f64> {
        let q = self.wbar[k].len();
        let mut w = DMatrix::zeros(q, q);
        let mut col = vec![0.0; q];
        let mut e = vec![0.0; q];
        for j in 0..q {
            e.iter_mut().for_each(|x| *x = 0.0);
            e[j] = 1.0;
            self.apply_block(k, &e, &mut col);
            for i in 0..q {
                w[(i, j)] = col[i];
            }
        }
        &w * &w
    }

    #[cfg(test)]
    fn apply_block(&self, k: usize, v: &[f64], out: &mut [f64]) {
        let w = &self.wbar[k];
        let q = w.len();
        let w1b: f64 = w[1..].iter().zip(&v[1..]).map(|(x, y)| x * y).sum();
        out[0] = self.eta[k] * (w[0] * v[0] + w1b);
        let coef = v[0] + w1b / (1.0 + w[0]);
        for i in 1..q {
            out[i] = self.eta[k] * (v[i] + coef * w[i]);
        }
    }
}
