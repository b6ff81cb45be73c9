//! Sparse LDLᵀ for symmetric quasi-definite matrices.
//!
//! Fill-reducing ordering comes from AMD; the symbolic phase (elimination tree, column
//! counts, value scatter map) depends only on the pattern and is reused across numeric
//! refactorizations. The numeric phase is an up-looking factorization with dynamic
//! regularization of pivots that come out with the wrong sign.

use super::ConicError;

const NONE: usize = usize::MAX;

/// Symbolic analysis of an upper-triangular pattern.
#[derive(Debug, Clone)]
pub struct LdlSymbolic {
    n: usize,
    /// `perm[new] = old`
    perm: Vec<usize>,
    /// Permuted upper triangle.
    colptr: Vec<usize>,
    rowind: Vec<usize>,
    /// Position of original value `k` in the permuted storage.
    value_map: Vec<usize>,
    etree: Vec<usize>,
    lp: Vec<usize>,
}

impl LdlSymbolic {
    /// `colptr`/`rowind` describe the upper triangle (diagonal included) in CSC form.
    pub fn analyse(n: usize, colptr: &[usize], rowind: &[usize]) -> Result<Self, ConicError> {
        Self::analyse_grouped(n, colptr, rowind, None)
    }

    /// Like [`analyse`](Self::analyse), but when `group` is given every index of a lower
    /// group is eliminated before any index of a higher one; AMD decides the order inside
    /// each group.
    pub fn analyse_grouped(
        n: usize,
        colptr: &[usize],
        rowind: &[usize],
        group: Option<&[u8]>,
    ) -> Result<Self, ConicError> {
        let mut perm: Vec<usize> = if n == 0 {
            Vec::new()
        } else {
            let (p, _, _) = amd::order(n, colptr, rowind, &amd::Control::default())
                .map_err(|s| ConicError::Factorization(format!("ordering failed: {s:?}")))?;
            p
        };
        if let Some(g) = group {
            perm.sort_by_key(|&i| g[i]);
        }
        let mut pinv = vec![0; n];
        for (new, &old) in perm.iter().enumerate() {
            pinv[old] = new;
        }

        // Scatter original entries into the permuted upper triangle.
        let nnz = colptr[n];
        let mut entries: Vec<(usize, usize, usize)> = Vec::with_capacity(nnz);
        for j in 0..n {
            for k in colptr[j]..colptr[j + 1] {
                let i = rowind[k];
                if i > j {
                    return Err(ConicError::Factorization(
                        "pattern is not upper triangular".into(),
                    ));
                }
                let (a, b) = (pinv[i], pinv[j]);
                entries.push((a.min(b), a.max(b), k));
            }
        }
        entries.sort_unstable_by_key(|&(r, c, _)| (c, r));
        let mut pcolptr = vec![0; n + 1];
        let mut prowind = Vec::with_capacity(nnz);
        let mut value_map = vec![0; nnz];
        for (pos, &(r, c, k)) in entries.iter().enumerate() {
            pcolptr[c + 1] += 1;
            prowind.push(r);
            value_map[k] = pos;
        }
        for j in 0..n {
            pcolptr[j + 1] += pcolptr[j];
        }

        let mut etree = vec![NONE; n];
        let mut lnz = vec![0usize; n];
        let mut work = vec![NONE; n];
        for j in 0..n {
            work[j] = j;
            for &r in &prowind[pcolptr[j]..pcolptr[j + 1]] {
                let mut i = r;
                while work[i] != j {
                    if etree[i] == NONE {
                        etree[i] = j;
                    }
                    lnz[i] += 1;
                    work[i] = j;
                    i = etree[i];
                }
            }
        }
        let mut lp = vec![0; n + 1];
        for i in 0..n {
            lp[i + 1] = lp[i] + lnz[i];
        }
        Ok(Self {
            n,
            perm,
            colptr: pcolptr,
            rowind: prowind,
            value_map,
            etree,
            lp,
        })
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn nnz_l(&self) -> usize {
        self.lp[self.n]
    }
}

/// Numeric factor `P K Pᵀ = L D Lᵀ`.
#[derive(Debug, Clone)]
pub struct LdlFactor {
    li: Vec<usize>,
    lx: Vec<f64>,
    d: Vec<f64>,
    dinv: Vec<f64>,
    /// Number of pivots replaced by dynamic regularization.
    pub regularized: usize,
    work: Vec<f64>,
}

impl LdlFactor {
    /// Factors the matrix whose upper-triangle values are `values` (in the order of the
    /// pattern given to [`LdlSymbolic::analyse`]). `signs[i]` is the expected sign of
    /// pivot `i` in original numbering; pivots with `sign · d < eps` are set to
    /// `sign · delta`.
    pub fn factor(
        sym: &LdlSymbolic,
        values: &[f64],
        signs: &[f64],
        eps: f64,
        delta: f64,
    ) -> Result<Self, ConicError> {
        let n = sym.n;
        let mut ax = vec![0.0; values.len()];
        for (k, &v) in values.iter().enumerate() {
            ax[sym.value_map[k]] = v;
        }
        let psign: Vec<f64> = sym.perm.iter().map(|&o| signs[o]).collect();
        let nnz_l = sym.nnz_l();
        let mut li = vec![0usize; nnz_l];
        let mut lx = vec![0.0; nnz_l];
        let mut d = vec![0.0; n];
        let mut dinv = vec![0.0; n];
        let mut next = sym.lp[..n].to_vec();
        let mut y_vals = vec![0.0; n];
        let mut marked = vec![false; n];
        let mut y_idx = vec![0usize; n];
        let mut elim = vec![0usize; n];
        let mut regularized = 0;

        for k in 0..n {
            let mut nnz_y = 0;
            d[k] = 0.0;
            for p in sym.colptr[k]..sym.colptr[k + 1] {
                let b = sym.rowind[p];
                if b == k {
                    d[k] = ax[p];
                    continue;
                }
                y_vals[b] = ax[p];
                if !marked[b] {
                    marked[b] = true;
                    elim[0] = b;
                    let mut ne = 1;
                    let mut nx = sym.etree[b];
                    while nx != NONE && nx < k {
                        if marked[nx] {
                            break;
                        }
                        marked[nx] = true;
                        elim[ne] = nx;
                        ne += 1;
                        nx = sym.etree[nx];
                    }
                    while ne > 0 {
                        ne -= 1;
                        y_idx[nnz_y] = elim[ne];
                        nnz_y += 1;
                    }
                }
            }
            for t in (0..nnz_y).rev() {
                let c = y_idx[t];
                let tmp = next[c];
                let yc = y_vals[c];
                for j in sym.lp[c]..tmp {
                    y_vals[li[j]] -= lx[j] * yc;
                }
                li[tmp] = k;
                let l = yc * dinv[c];
                lx[tmp] = l;
                d[k] -= yc * l;
                next[c] += 1;
                y_vals[c] = 0.0;
                marked[c] = false;
            }
            if !(psign[k] * d[k] > eps) {
                if !d[k].is_finite() {
                    return Err(ConicError::Factorization(format!(
                        "non-finite pivot at position {} (original index {})",
                        k, sym.perm[k]
                    )));
                }
                d[k] = psign[k] * delta;
                regularized += 1;
            }
            dinv[k] = 1.0 / d[k];
        }
        Ok(Self {
            li,
            lx,
            d,
            dinv,
            regularized,
            work: vec![0.0; n],
        })
    }

    /// Solves `K x = b` in place (original ordering).
    pub fn solve_in_place(&mut self, sym: &LdlSymbolic, b: &mut [f64]) {
        let n = sym.n;
        let x = &mut self.work;
        for i in 0..n {
            x[i] = b[sym.perm[i]];
        }
        for i in 0..n {
            let xi = x[i];
            for j in sym.lp[i]..sym.lp[i + 1] {
                x[self.li[j]] -= self.lx[j] * xi;
            }
        }
        for i in 0..n {
            x[i] *= self.dinv[i];
        }
        for i in (0..n).rev() {
            let mut acc = x[i];
            for j in sym.lp[i]..sym.lp[i + 1] {
                acc -= self.lx[j] * x[self.li[j]];
            }
            x[i] = acc;
        }
        for i in 0..n {
            b[sym.perm[i]] = x[i];
        }
    }

    pub fn diagonal(&self) -> &[f64] {
        &self.d
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn upper(dense: &[Vec<f64>]) -> (Vec<usize>, Vec<usize>, Vec<f64>) {
        let n = dense.len();
        let (mut cp, mut ri, mut vx) = (vec![0], vec![], vec![]);
        for j in 0..n {
            for i in 0..=j {
                if dense[i][j] != 0.0 || i == j {
                    ri.push(i);
                    vx.push(dense[i][j]);
                }
            }
            cp.push(ri.len());
        }
        (cp, ri, vx)
    }

    #[test]
    fn solves_quasi_definite_system() {
        let k = vec![
            vec![4.0, 1.0, 0.0, 2.0, 0.0],
            vec![1.0, 3.0, 0.0, 0.0, 1.0],
            vec![0.0, 0.0, 2.0, 1.0, 1.0],
            vec![2.0, 0.0, 1.0, -1.0, 0.0],
            vec![0.0, 1.0, 1.0, 0.0, -2.0],
        ];
        let (cp, ri, vx) = upper(&k);
        let sym = LdlSymbolic::analyse(5, &cp, &ri).unwrap();
        let signs = [1.0, 1.0, 1.0, -1.0, -1.0];
        let mut f = LdlFactor::factor(&sym, &vx, &signs, 1e-14, 1e-8).unwrap();
        assert_eq!(f.regularized, 0);
        let x_true = [1.0, -2.0, 0.5, 3.0, -1.0];
        let mut b: Vec<f64> = (0..5)
            .map(|i| (0..5).map(|j| k[i][j] * x_true[j]).sum())
            .collect();
        f.solve_in_place(&sym, &mut b);
        for i in 0..5 {
            assert_abs_diff_eq!(b[i], x_true[i], epsilon = 1e-12);
        }
    }

    #[test]
    fn wrong_sign_pivot_is_regularized() {
        let k = vec![vec![0.0, 1.0], vec![1.0, 0.0]];
        let (cp, ri, vx) = upper(&k);
        let sym = LdlSymbolic::analyse(2, &cp, &ri).unwrap();
        let f = LdlFactor::factor(&sym, &vx, &[1.0, -1.0], 1e-14, 1e-7).unwrap();
        assert!(f.regularized >= 1);
    }

    #[test]
    fn rejects_lower_entries() {
        assert!(LdlSymbolic::analyse(2, &[0, 2, 3], &[0, 1, 1]).is_err());
    }
}
