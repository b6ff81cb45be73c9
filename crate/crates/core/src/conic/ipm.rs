//! Mehrotra predictor-corrector on the homogeneous self-dual embedding with
//! Nesterov-Todd scaling.
//!
//! Each iteration solves systems with the quasi-definite KKT matrix
//!
//! ```text
//! [ δI   Aᵀ        ]
//! [ A   -blkdiag(δI, W²) ]
//! ```
//!
//! (zero-cone rows get `-δ`, conic rows the NT block `W²`), factored in a `W⁻¹`-scaled
//! form and reused for the predictor, the corrector and the `τ` direction.

use super::cones::{self, NtScaling};
use super::ldl::{LdlFactor, LdlSymbolic};
use super::{ConicError, ConicProgram, ConicSolution, Residuals, SolveStatus, SolverSettings};
use crate::sparse::{dot, norm2, norm_inf};

/// Iterations without a new best residual before giving up.
const STALL_ITERS: usize = 10;

#[derive(Debug, Clone, Copy)]
enum Slot {
    XReg,
    /// Entry `k` of `A` on a zero-cone row.
    A(usize),
    EqReg,
    ConeDiag,
    /// Entry of `W⁻¹ A` on a conic row, see [`ScaledEntry`].
    Scaled(usize),
}

/// `(W⁻¹ A)[row, col] = Σ W⁻¹[row, b] · A.values[k]` over `terms = [(b, k)]`, with `row`
/// and `b` counted from the first conic row.
#[derive(Debug, Clone)]
struct ScaledEntry {
    row: usize,
    terms: Vec<(usize, usize)>,
}

/// KKT pattern and its symbolic factorization for one `(A pattern, cones)` pair.
///
/// Conic rows are scaled by `W⁻¹`, so the factored matrix is
///
/// ```text
/// [ δI     A_zᵀ   (W⁻¹A_c)ᵀ ]
/// [ A_z    -δI     0        ]
/// [ W⁻¹A_c  0     -I        ]
/// ```
///
/// whose conic pivots stay well conditioned however ill-conditioned `W` becomes.
#[derive(Debug, Clone)]
struct KktStructure {
    key: (Vec<usize>, Vec<usize>, super::ConeSpec),
    slots: Vec<Slot>,
    scaled: Vec<ScaledEntry>,
    signs: Vec<f64>,
    sym: LdlSymbolic,
}

impl KktStructure {
    fn build(prog: &ConicProgram) -> Result<Self, ConicError> {
        let p = prog.n_vars();
        let d = prog.n_rows();
        let z = prog.cones.zero_dim;
        let l = prog.cones.nonneg_dim;
        let m = d - z;
        let n = p + d;
        // Conic rows of A, row-major: (col, k).
        let mut rows: Vec<Vec<(usize, usize)>> = vec![Vec::new(); m];
        let mut entries: Vec<(usize, usize, Slot)> = Vec::new();
        for i in 0..p {
            entries.push((i, i, Slot::XReg));
        }
        for (k, (r, c, _)) in prog.a.triplets().enumerate() {
            if r < z {
                entries.push((c, p + r, Slot::A(k)));
            } else {
                rows[r - z].push((c, k));
            }
        }
        for r in 0..z {
            entries.push((p + r, p + r, Slot::EqReg));
        }
        for i in 0..m {
            entries.push((p + z + i, p + z + i, Slot::ConeDiag));
        }
        let mut scaled = Vec::new();
        let mut push_row =
            |entries: &mut Vec<(usize, usize, Slot)>, row: usize, block: &[usize]| {
                let mut by_col: std::collections::BTreeMap<usize, Vec<(usize, usize)>> =
                    Default::default();
                for &b in block {
                    for &(c, k) in &rows[b] {
                        by_col.entry(c).or_default().push((b, k));
                    }
                }
                for (c, terms) in by_col {
                    entries.push((c, p + z + row, Slot::Scaled(scaled.len())));
                    scaled.push(ScaledEntry { row, terms });
                }
            };
        for i in 0..l {
            push_row(&mut entries, i, &[i]);
        }
        for (off, q) in prog.cones.soc_blocks() {
            let block: Vec<usize> = (off - z..off - z + q).collect();
            for &i in &block {
                push_row(&mut entries, i, &block);
            }
        }
        entries.sort_by_key(|&(r, c, _)| (c, r));
        let mut colptr = vec![0; n + 1];
        let mut rowind = Vec::with_capacity(entries.len());
        let mut slots = Vec::with_capacity(entries.len());
        for &(r, c, s) in &entries {
            colptr[c + 1] += 1;
            rowind.push(r);
            slots.push(s);
        }
        for j in 0..n {
            colptr[j + 1] += colptr[j];
        }
        // Cone rows first, then variables, then equality rows: no elimination divides by
        // the tiny static regularization before the conic contributions are in.
        let group: Vec<u8> = (0..n)
            .map(|i| match i {
                _ if i < p => 1,
                _ => 0,
            })
            .collect();
        let sym = LdlSymbolic::analyse_grouped(n, &colptr, &rowind, Some(&group))?;
        let signs = (0..n).map(|i| if i < p { 1.0 } else { -1.0 }).collect();
        Ok(Self {
            key: Self::key_of(prog),
            slots,
            scaled,
            signs,
            sym,
        })
    }

    fn key_of(prog: &ConicProgram) -> (Vec<usize>, Vec<usize>, super::ConeSpec) {
        (
            prog.a.colptr.clone(),
            prog.a.rowind.clone(),
            prog.cones.clone(),
        )
    }

    fn values(&self, prog: &ConicProgram, w: &NtScaling, delta: f64) -> Vec<f64> {
        let z = prog.cones.zero_dim;
        let l = prog.cones.nonneg_dim;
        let blocks = prog.cones.soc_blocks();
        let winv: Vec<_> = (0..blocks.len()).map(|k| w.soc_w_inv(k)).collect();
        // Block number and offset of every conic row.
        let mut owner = vec![(usize::MAX, 0); prog.n_rows() - z];
        for (k, &(off, q)) in blocks.iter().enumerate() {
            for i in 0..q {
                owner[off - z + i] = (k, off - z);
            }
        }
        let scaled_value = |e: &ScaledEntry| -> f64 {
            if e.row < l {
                let (_, k) = e.terms[0];
                return prog.a.values[k] / w.w_lin[e.row];
            }
            let (blk, off) = owner[e.row];
            e.terms
                .iter()
                .map(|&(b, k)| winv[blk][(e.row - off, b - off)] * prog.a.values[k])
                .sum()
        };
        self.slots
            .iter()
            .map(|s| match *s {
                Slot::XReg => delta,
                Slot::A(k) => prog.a.values[k],
                Slot::EqReg => -delta,
                Slot::ConeDiag => -1.0,
                Slot::Scaled(i) => scaled_value(&self.scaled[i]),
            })
            .collect()
    }
}

/// Interior-point solver. Keeps the symbolic KKT analysis between calls, so repeated
/// solves with the same constraint pattern (new `b`, `c` or values of `A`) skip it.
#[derive(Debug, Clone, Default)]
pub struct ConicSolver {
    pub settings: SolverSettings,
    cache: Option<KktStructure>,
}

struct Kkt<'a> {
    prog: &'a ConicProgram,
    st: &'a KktStructure,
    factor: LdlFactor,
    refine_steps: usize,
}

impl Kkt<'_> {
    /// Applies the unregularized KKT matrix.
    fn apply(&self, w: &NtScaling, v: &[f64], out: &mut [f64]) {
        let p = self.prog.n_vars();
        let z = self.prog.cones.zero_dim;
        let (vx, vy) = v.split_at(p);
        let (ox, oy) = out.split_at_mut(p);
        ox.iter_mut().for_each(|o| *o = 0.0);
        self.prog.a.gemv_t(1.0, vy, ox);
        oy.iter_mut().for_each(|o| *o = 0.0);
        self.prog.a.gemv(1.0, vx, oy);
        let m = vy.len() - z;
        let mut t1 = vec![0.0; m];
        let mut t2 = vec![0.0; m];
        w.apply_w(&vy[z..], &mut t1);
        w.apply_w(&t1, &mut t2);
        for i in 0..m {
            oy[z + i] -= t2[i];
        }
    }

    /// One solve with the factored scaled system, mapped back to the original variables.
    fn solve_scaled(&mut self, w: &NtScaling, v: &mut [f64]) {
        let off = self.prog.n_vars() + self.prog.cones.zero_dim;
        let mut t = vec![0.0; v.len() - off];
        w.apply_w_inv(&v[off..], &mut t);
        v[off..].copy_from_slice(&t);
        self.factor.solve_in_place(&self.st.sym, v);
        w.apply_w_inv(&v[off..], &mut t);
        v[off..].copy_from_slice(&t);
    }

    fn solve(&mut self, w: &NtScaling, rhs: &[f64]) -> Vec<f64> {
        let n = rhs.len();
        let mut sol = rhs.to_vec();
        self.solve_scaled(w, &mut sol);
        let scale = 1.0 + norm_inf(rhs);
        let mut kx = vec![0.0; n];
        let mut best = f64::INFINITY;
        for _ in 0..self.refine_steps {
            self.apply(w, &sol, &mut kx);
            let mut res: Vec<f64> = rhs.iter().zip(&kx).map(|(r, k)| r - k).collect();
            let err = norm_inf(&res);
            if err <= 1e-15 * scale || err >= best * 0.9 {
                break;
            }
            best = err;
            self.solve_scaled(w, &mut res);
            for (s, r) in sol.iter_mut().zip(&res) {
                *s += r;
            }
        }
        sol
    }
}

struct Iterate {
    x: Vec<f64>,
    y: Vec<f64>,
    s: Vec<f64>,
    tau: f64,
    kappa: f64,
}

impl ConicSolver {
    pub fn new(settings: SolverSettings) -> Self {
        Self {
            settings,
            cache: None,
        }
    }

    fn structure(&mut self, prog: &ConicProgram) -> Result<KktStructure, ConicError> {
        let key = KktStructure::key_of(prog);
        match &self.cache {
            Some(st) if st.key == key => Ok(st.clone()),
            _ => {
                let st = KktStructure::build(prog)?;
                self.cache = Some(st.clone());
                Ok(st)
            }
        }
    }

    fn factor<'a>(
        &self,
        prog: &'a ConicProgram,
        st: &'a KktStructure,
        w: &NtScaling,
    ) -> Result<Kkt<'a>, ConicError> {
        let vals = st.values(prog, w, self.settings.static_reg);
        let factor = LdlFactor::factor(
            &st.sym,
            &vals,
            &st.signs,
            self.settings.dyn_reg_eps,
            self.settings.dyn_reg_delta,
        )?;
        Ok(Kkt {
            prog,
            st,
            factor,
            refine_steps: self.settings.refine_steps,
        })
    }

    pub fn solve(&mut self, prog: &ConicProgram) -> Result<ConicSolution, ConicError> {
        prog.validate()?;
        let st = self.structure(prog)?;
        let set = self.settings.clone();
        let p = prog.n_vars();
        let d = prog.n_rows();
        let z = prog.cones.zero_dim;
        let m = d - z;
        let nonneg = prog.cones.nonneg_dim;
        let socs: Vec<(usize, usize)> = prog
            .cones
            .soc_blocks()
            .into_iter()
            .map(|(o, q)| (o - z, q))
            .collect();
        let degree = prog.cones.degree() as f64;
        let (b, c) = (&prog.b, &prog.c);
        let bnorm = norm2(b);
        let cnorm = norm2(c);

        // Initial point from two least-squares style solves with W = I.
        let mut w = NtScaling::new(nonneg, &socs);
        let mut kkt = self.factor(prog, &st, &w)?;
        let mut rhs = vec![0.0; p + d];
        rhs[p..].copy_from_slice(b);
        let primal0 = kkt.solve(&w, &rhs);
        rhs[..p].iter_mut().zip(c).for_each(|(r, cv)| *r = -cv);
        rhs[p..].iter_mut().for_each(|r| *r = 0.0);
        let dual0 = kkt.solve(&w, &rhs);

        let shift = |v: &mut [f64]| {
            let e = cones::min_eig(v, nonneg, &socs);
            if !(e > 0.0) {
                cones::add_identity(v, 1.0 - e, nonneg, &socs);
            }
        };
        let mut s0: Vec<f64> = primal0[p + z..].iter().map(|v| -v).collect();
        shift(&mut s0);
        let mut y0: Vec<f64> = dual0[p..].to_vec();
        shift(&mut y0[z..]);
        let mut it = Iterate {
            x: primal0[..p].to_vec(),
            y: y0,
            s: {
                let mut s = vec![0.0; d];
                s[z..].copy_from_slice(&s0);
                s
            },
            tau: 1.0,
            kappa: 1.0,
        };

        let e = cones::identity_element(m, nonneg, &socs);
        let mut best: Option<(f64, ConicSolution)> = None;
        let mut best_iter = 0;
        let mut iter = 0;
        loop {
            // Residuals of the embedding.
            let mut r1 = c.iter().map(|cv| cv * it.tau).collect::<Vec<_>>();
            prog.a.gemv_t(1.0, &it.y, &mut r1);
            let mut ax = vec![0.0; d];
            prog.a.gemv(1.0, &it.x, &mut ax);
            let r2: Vec<f64> = (0..d).map(|i| ax[i] + it.s[i] - b[i] * it.tau).collect();
            let cx = dot(c, &it.x);
            let by = dot(b, &it.y);
            let r3 = it.kappa + cx + by;
            let sy = dot(&it.s[z..], &it.y[z..]);
            let mu = (sy + it.kappa * it.tau) / (degree + 1.0);

            let res = Residuals {
                primal: norm2(&r2) / it.tau / (1.0 + bnorm),
                dual: norm2(&r1) / it.tau / (1.0 + cnorm),
                gap: (cx + by).abs() / (it.tau + cx.abs() + by.abs()),
            };
            log::debug!(
                "ipm {iter:3} pres {:.2e} dres {:.2e} gap {:.2e} mu {:.2e} tau {:.2e} kappa {:.2e}",
                res.primal,
                res.dual,
                res.gap,
                mu,
                it.tau,
                it.kappa
            );
            if res.primal < set.tol && res.dual < set.tol && res.gap < set.tol {
                return Ok(optimal(&it, res, iter));
            }
            let scaled = optimal(&it, res, iter);
            if best.as_ref().is_none_or(|(m, _)| res.max() < *m) {
                best = Some((res.max(), scaled));
                best_iter = iter;
            }
            // Infeasibility certificates.
            if it.tau < it.kappa {
                let aty = {
                    let mut v = vec![0.0; p];
                    prog.a.gemv_t(1.0, &it.y, &mut v);
                    norm2(&v)
                };
                if by < 0.0 && aty / -by < set.tol {
                    return Ok(primal_infeasible(&it, by, iter));
                }
                let axs = norm2(&ax.iter().zip(&it.s).map(|(a, s)| a + s).collect::<Vec<_>>());
                if cx < 0.0 && axs / -cx < set.tol {
                    return Ok(dual_infeasible(&it, cx, iter));
                }
            }
            if iter >= set.max_iter {
                break;
            }
            if iter - best_iter >= STALL_ITERS {
                log::debug!("ipm: no progress for {STALL_ITERS} iterations");
                break;
            }
            iter += 1;

            if !w.update(&it.s[z..], &it.y[z..]) {
                log::debug!("ipm: scaling update failed");
                break;
            }
            kkt = match self.factor(prog, &st, &w) {
                Ok(k) => k,
                Err(e) => {
                    log::debug!("ipm: {e}");
                    break;
                }
            };
            let lambda = w.lambda.clone();

            let mut rhs1 = vec![0.0; p + d];
            rhs1[..p].iter_mut().zip(c).for_each(|(r, cv)| *r = -cv);
            rhs1[p..].copy_from_slice(b);
            let sol1 = kkt.solve(&w, &rhs1);
            let denom_base = dot(c, &sol1[..p]) + dot(b, &sol1[p..]);

            // Direction for a given complementarity target.
            let direction = |kkt: &mut Kkt, sigma: f64, ds_target: &[f64], dk_target: f64| {
                let mut ld = vec![0.0; m];
                cones::jordan_div(&lambda, ds_target, &mut ld, nonneg, &socs);
                let mut wld = vec![0.0; m];
                w.apply_w(&ld, &mut wld);
                let mut rhs2 = vec![0.0; p + d];
                for i in 0..p {
                    rhs2[i] = -(1.0 - sigma) * r1[i];
                }
                for i in 0..d {
                    rhs2[p + i] = -(1.0 - sigma) * r2[i];
                }
                for i in 0..m {
                    rhs2[p + z + i] -= wld[i];
                }
                let sol2 = kkt.solve(&w, &rhs2);
                let num = (1.0 - sigma) * r3
                    + dot(c, &sol2[..p])
                    + dot(b, &sol2[p..])
                    + dk_target / it.tau;
                let dtau = num / (it.kappa / it.tau - denom_base);
                let dx: Vec<f64> = (0..p).map(|i| sol2[i] + dtau * sol1[i]).collect();
                let dy: Vec<f64> = (0..d).map(|i| sol2[p + i] + dtau * sol1[p + i]).collect();
                // ds = W(λ \ d_s) − W² dy on conic rows
                let mut t1 = vec![0.0; m];
                let mut t2 = vec![0.0; m];
                w.apply_w(&dy[z..], &mut t1);
                w.apply_w(&t1, &mut t2);
                let mut ds = vec![0.0; d];
                for i in 0..m {
                    ds[z + i] = wld[i] - t2[i];
                }
                let dkappa = (dk_target - it.kappa * dtau) / it.tau;
                (dx, dy, ds, dtau, dkappa)
            };
            let step_len = |dy: &[f64], ds: &[f64], dtau: f64, dkappa: f64| {
                let mut a = cones::max_step(&it.s[z..], &ds[z..], nonneg, &socs, 1.0);
                a = a.min(cones::max_step(&it.y[z..], &dy[z..], nonneg, &socs, 1.0));
                if dtau < 0.0 {
                    a = a.min(-it.tau / dtau);
                }
                if dkappa < 0.0 {
                    a = a.min(-it.kappa / dkappa);
                }
                a
            };

            // Predictor.
            let mut ll = vec![0.0; m];
            cones::jordan_product(&lambda, &lambda, &mut ll, nonneg, &socs);
            let ds_aff: Vec<f64> = ll.iter().map(|v| -v).collect();
            let dk_aff = -it.kappa * it.tau;
            let (_, dy_a, ds_a, dtau_a, dkappa_a) = direction(&mut kkt, 0.0, &ds_aff, dk_aff);
            let alpha_a = step_len(&dy_a, &ds_a, dtau_a, dkappa_a);
            let sigma = (1.0 - alpha_a).powi(3).clamp(1e-4, 1.0);

            // Corrector.
            let mut wi_ds = vec![0.0; m];
            w.apply_w_inv(&ds_a[z..], &mut wi_ds);
            let mut w_dy = vec![0.0; m];
            w.apply_w(&dy_a[z..], &mut w_dy);
            let mut corr = vec![0.0; m];
            cones::jordan_product(&wi_ds, &w_dy, &mut corr, nonneg, &socs);
            let ds_tgt: Vec<f64> = (0..m)
                .map(|i| -ll[i] - corr[i] + sigma * mu * e[i])
                .collect();
            let dk_tgt = -it.kappa * it.tau - dkappa_a * dtau_a + sigma * mu;
            let (dx, dy, ds, dtau, dkappa) = direction(&mut kkt, sigma, &ds_tgt, dk_tgt);
            let alpha = (set.step_fraction * step_len(&dy, &ds, dtau, dkappa)).min(1.0);
            if !(alpha > 1e-12) || dx.iter().any(|v| !v.is_finite()) {
                log::debug!(
                    "ipm: step {alpha:.2e} (affine {alpha_a:.2e}, reg {})",
                    kkt.factor.regularized
                );
                break;
            }
            for i in 0..p {
                it.x[i] += alpha * dx[i];
            }
            for i in 0..d {
                it.y[i] += alpha * dy[i];
                it.s[i] += alpha * ds[i];
            }
            it.tau += alpha * dtau;
            it.kappa += alpha * dkappa;
        }
        let (_, mut sol) = best.expect("at least one iterate evaluated");
        sol.status = SolveStatus::MaxIter;
        Ok(sol)
    }
}

fn optimal(it: &Iterate, residuals: Residuals, iterations: usize) -> ConicSolution {
    let t = it.tau;
    ConicSolution {
        x: it.x.iter().map(|v| v / t).collect(),
        y: it.y.iter().map(|v| v / t).collect(),
        s: it.s.iter().map(|v| v / t).collect(),
        tau: 1.0,
        kappa: it.kappa / t,
        status: SolveStatus::Optimal,
        residuals,
        iterations,
    }
}

fn primal_infeasible(it: &Iterate, by: f64, iterations: usize) -> ConicSolution {
    ConicSolution {
        x: vec![0.0; it.x.len()],
        y: it.y.iter().map(|v| v / -by).collect(),
        s: vec![0.0; it.s.len()],
        tau: 0.0,
        kappa: 1.0,
        status: SolveStatus::PrimalInfeasible,
        residuals: Residuals::default(),
        iterations,
    }
}

fn dual_infeasible(it: &Iterate, cx: f64, iterations: usize) -> ConicSolution {
    ConicSolution {
        x: it.x.iter().map(|v| v / -cx).collect(),
        y: vec![0.0; it.y.len()],
        s: it.s.iter().map(|v| v / -cx).collect(),
        tau: 0.0,
        kappa: 1.0,
        status: SolveStatus::DualInfeasible,
        residuals: Residuals::default(),
        iterations,
    }
}
