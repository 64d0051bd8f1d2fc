//! Keypoint-space reduction of the deformation energy.
//!
//! For a deformation operator `L` and keypoint rows `I`, minimizing
//! `‖L Z‖_F` over the free rows of `Z` leaves `‖G W‖_F` with `W = Z_I` and
//! `G = Q^{1/2}`, where `Q` is the Schur complement of `L²` onto `I`. One side
//! of the matching objective for a fixed assignment then reads
//!
//! ```text
//! ψ(T) = min_W  a‖W − T‖_F + b‖G W‖_F
//! ```
//!
//! whose minimizers lie on the path `W(μ) = (I + μQ)⁻¹ T`, so the exact
//! solve is a one-dimensional search in the eigenbasis of `Q`. Any `Z = G V`
//! with `‖V‖ ≤ b` and `‖Z‖ ≤ a` certifies `ψ(T) ≥ ⟨Z, T⟩`.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};
use crate::operators::DeformationOperator;

const KERNEL_TOL: f64 = 1e-9;
const EIGEN_FLOOR: f64 = 1e-12;

/// `Q = V diag(q) Vᵀ`, eigenvalues ascending.
#[derive(Debug, Clone)]
pub struct ReducedQuadratic {
    pub eigvecs: DMatrix<f64>,
    pub eigvals: Vec<f64>,
}

impl ReducedQuadratic {
    fn from_matrix(q: DMatrix<f64>, kernel: &DMatrix<f64>) -> Self {
        let m = q.nrows();
        let mut q = (&q + q.transpose()) * 0.5;
        if kernel.ncols() > 0 {
            let proj = DMatrix::identity(m, m) - kernel * kernel.transpose();
            q = &proj * q * &proj;
            q = (&q + q.transpose()) * 0.5;
        }
        let eig = SymmetricEigen::new(q);
        let qmax = eig.eigenvalues.iter().fold(0.0f64, |a, &b| a.max(b));
        let mut order: Vec<usize> = (0..m).collect();
        order.sort_by(|&x, &y| eig.eigenvalues[x].total_cmp(&eig.eigenvalues[y]));
        let eigvals = order
            .iter()
            .map(|&k| {
                let v = eig.eigenvalues[k];
                if v <= EIGEN_FLOOR * qmax {
                    0.0
                } else {
                    v
                }
            })
            .collect();
        let eigvecs = DMatrix::from_fn(m, m, |i, j| eig.eigenvectors[(i, order[j])]);
        ReducedQuadratic { eigvecs, eigvals }
    }

    pub fn dim(&self) -> usize {
        self.eigvals.len()
    }

    pub fn dense(&self) -> DMatrix<f64> {
        self.spectral_map(|q| q)
    }

    /// `G = Q^{1/2}`.
    pub fn sqrt(&self) -> DMatrix<f64> {
        self.spectral_map(f64::sqrt)
    }

    /// Pseudo-inverse of `G`.
    pub fn sqrt_pinv(&self) -> DMatrix<f64> {
        self.spectral_map(|q| if q > 0.0 { 1.0 / q.sqrt() } else { 0.0 })
    }

    pub fn spectral_map(&self, f: impl Fn(f64) -> f64) -> DMatrix<f64> {
        let d = DVector::from_iterator(self.dim(), self.eigvals.iter().map(|&q| f(q)));
        let scaled = DMatrix::from_fn(self.dim(), self.dim(), |i, j| self.eigvecs[(i, j)] * d[j]);
        scaled * self.eigvecs.transpose()
    }

    /// `‖G W‖_F`.
    pub fn energy(&self, w: &DMatrix<f64>) -> f64 {
        let c = self.eigvecs.tr_mul(w);
        let mut s = 0.0;
        for (k, q) in self.eigvals.iter().enumerate() {
            s += q * c.row(k).norm_squared();
        }
        s.sqrt()
    }
}

/// Reduction of one shape's deformation energy onto its keypoints.
#[derive(Debug, Clone)]
pub struct SideModel {
    pub num_vertices: usize,
    pub keypoints: Vec<usize>,
    free: Vec<usize>,
    /// Free-vertex rows of the minimal-energy extension, `|F| × n`.
    extension: DMatrix<f64>,
    /// Orthonormal basis of the kernel of `Q`.
    pub kernel: DMatrix<f64>,
    pub quadratic: ReducedQuadratic,
}

/// Orthonormal basis of the column space of `m` and a basis of its null space.
fn orthonormal_range(m: &DMatrix<f64>) -> (DMatrix<f64>, DMatrix<f64>) {
    let r = m.ncols();
    if r == 0 {
        return (DMatrix::zeros(m.nrows(), 0), DMatrix::zeros(0, 0));
    }
    let eig = SymmetricEigen::new(m.tr_mul(m));
    let lmax = eig.eigenvalues.max();
    let (mut range, mut null) = (Vec::new(), Vec::new());
    for k in 0..r {
        let l = eig.eigenvalues[k];
        let v = eig.eigenvectors.column(k);
        if l > KERNEL_TOL * KERNEL_TOL * lmax {
            range.push(m * v / l.sqrt());
        } else {
            null.push(v.clone_owned());
        }
    }
    (
        DMatrix::from_fn(m.nrows(), range.len(), |i, j| range[j][i]),
        DMatrix::from_fn(r, null.len(), |i, j| null[j][i]),
    )
}

impl SideModel {
    pub fn new(op: &dyn DeformationOperator, keypoints: &[usize]) -> Result<Self> {
        let nv = op.dim();
        let n = keypoints.len();
        if n == 0 {
            return Err(Error::EmptyInput("keypoint list"));
        }
        let mut is_key = vec![false; nv];
        for &k in keypoints {
            is_key[k] = true;
        }
        let free: Vec<usize> = (0..nv).filter(|&v| !is_key[v]).collect();
        let l = op.to_dense();
        let e = &l * &l;
        let e = (&e + e.transpose()) * 0.5;

        let basis = op.kernel_basis();
        let b_i = DMatrix::from_fn(n, basis.ncols(), |r, c| basis[(keypoints[r], c)]);
        let (kernel, null_coeffs) = orthonormal_range(&b_i);

        let nf = free.len();
        let (extension, q) = if nf == 0 {
            (DMatrix::zeros(0, n), DMatrix::from_fn(n, n, |r, c| e[(keypoints[r], keypoints[c])]))
        } else {
            let mut e_ff = DMatrix::from_fn(nf, nf, |r, c| e[(free[r], free[c])]);
            let e_fi = DMatrix::from_fn(nf, n, |r, c| e[(free[r], keypoints[c])]);
            let e_ii = DMatrix::from_fn(n, n, |r, c| e[(keypoints[r], keypoints[c])]);
            let scale = (0..nf).map(|i| e_ff[(i, i)]).fold(0.0f64, f64::max).max(f64::MIN_POSITIVE);
            if null_coeffs.ncols() > 0 {
                // Kernel vectors vanishing on the keypoints leave E_FF singular;
                // penalizing them selects one minimizer without changing the value.
                let nvec = &basis * &null_coeffs;
                let n_f = DMatrix::from_fn(nf, nvec.ncols(), |r, c| nvec[(free[r], c)]);
                e_ff += &n_f * n_f.transpose() * scale;
            }
            let mut ridge = 1e-14 * scale;
            let chol = loop {
                let mut m = e_ff.clone();
                for i in 0..nf {
                    m[(i, i)] += ridge;
                }
                if let Some(c) = m.cholesky() {
                    break c;
                }
                ridge *= 100.0;
                if ridge > 1e-4 * scale {
                    return Err(Error::Convergence { what: "Cholesky of free-vertex energy block", iterations: 0 });
                }
            };
            let h = -chol.solve(&e_fi);
            let q = &e_ii + e_fi.transpose() * &h;
            (h, q)
        };
        let quadratic = ReducedQuadratic::from_matrix(q, &kernel);
        Ok(SideModel { num_vertices: nv, keypoints: keypoints.to_vec(), free, extension, kernel, quadratic })
    }

    pub fn n(&self) -> usize {
        self.keypoints.len()
    }

    /// Full `|X| × 3` reconstruction from keypoint rows.
    pub fn extend(&self, w: &DMatrix<f64>) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(self.num_vertices, w.ncols());
        for (r, &k) in self.keypoints.iter().enumerate() {
            out.row_mut(k).copy_from(&w.row(r));
        }
        let f = &self.extension * w;
        for (r, &v) in self.free.iter().enumerate() {
            out.row_mut(v).copy_from(&f.row(r));
        }
        out
    }

    /// Reduction onto a subset of keypoints (positions into the keypoint
    /// list); the remaining keypoints become free. Returns the quadratic and
    /// the map from subset rows to the other keypoint rows.
    pub fn restricted(&self, subset: &[usize]) -> (ReducedQuadratic, DMatrix<f64>) {
        let n = self.n();
        let mut in_s = vec![false; n];
        for &s in subset {
            in_s[s] = true;
        }
        let rest: Vec<usize> = (0..n).filter(|&i| !in_s[i]).collect();
        let q = self.quadratic.dense();
        let m = subset.len();
        let q_ss = DMatrix::from_fn(m, m, |r, c| q[(subset[r], subset[c])]);
        let kernel_s = DMatrix::from_fn(m, self.kernel.ncols(), |r, c| self.kernel[(subset[r], c)]);
        let (kernel_s, _) = orthonormal_range(&kernel_s);
        if rest.is_empty() {
            return (ReducedQuadratic::from_matrix(q_ss, &kernel_s), DMatrix::zeros(0, m));
        }
        let nu = rest.len();
        let q_uu = DMatrix::from_fn(nu, nu, |r, c| q[(rest[r], rest[c])]);
        let q_us = DMatrix::from_fn(nu, m, |r, c| q[(rest[r], subset[c])]);
        let eig = SymmetricEigen::new((&q_uu + q_uu.transpose()) * 0.5);
        let emax = eig.eigenvalues.iter().fold(0.0f64, |a, &b| a.max(b.abs()));
        let mut pinv = DMatrix::zeros(nu, nu);
        for k in 0..nu {
            let l = eig.eigenvalues[k];
            if l > 1e-12 * emax {
                let v = eig.eigenvectors.column(k);
                pinv += v * v.transpose() / l;
            }
        }
        let ext = -(&pinv * &q_us);
        let schur = &q_ss + q_us.transpose() * &ext;
        (ReducedQuadratic::from_matrix(schur, &kernel_s), ext)
    }

    /// Reconstruction when only `subset` keypoint rows are prescribed.
    pub fn extend_subset(&self, subset: &[usize], ext: &DMatrix<f64>, w_s: &DMatrix<f64>) -> DMatrix<f64> {
        let n = self.n();
        let mut in_s = vec![false; n];
        for &s in subset {
            in_s[s] = true;
        }
        let rest: Vec<usize> = (0..n).filter(|&i| !in_s[i]).collect();
        let mut w = DMatrix::zeros(n, w_s.ncols());
        for (r, &s) in subset.iter().enumerate() {
            w.row_mut(s).copy_from(&w_s.row(r));
        }
        if !rest.is_empty() {
            let w_u = ext * w_s;
            for (r, &u) in rest.iter().enumerate() {
                w.row_mut(u).copy_from(&w_u.row(r));
            }
        }
        self.extend(&w)
    }
}

/// Exact minimizer of `a‖W − T‖ + b‖GW‖` and its certificate.
#[derive(Debug, Clone)]
pub struct SideSolve {
    pub w: DMatrix<f64>,
    pub value: f64,
    /// Certified lower bound `⟨Z, T⟩ ≤ ψ(T)`.
    pub lower: f64,
    /// Dual `Z` with `Z = G V`, `‖V‖ ≤ b`, `‖Z‖ ≤ a`.
    pub dual: DMatrix<f64>,
    pub mu: f64,
    pub evaluations: usize,
}

struct Path<'a> {
    q: &'a [f64],
    t: &'a [f64],
    a: f64,
    b: f64,
}

impl Path<'_> {
    /// `(r1, r2)` at `μ`; `μ = ∞` is the kernel projection.
    fn residuals(&self, mu: f64) -> (f64, f64) {
        let (mut r1, mut r2) = (0.0, 0.0);
        for (&q, &t) in self.q.iter().zip(self.t) {
            if q == 0.0 {
                continue;
            }
            if mu.is_infinite() {
                r1 += t;
            } else {
                let d = 1.0 + mu * q;
                r1 += (mu * q / d).powi(2) * t;
                r2 += q * t / (d * d);
            }
        }
        (r1.sqrt(), r2.sqrt())
    }

    fn value(&self, mu: f64) -> f64 {
        let (r1, r2) = self.residuals(mu);
        self.a * r1 + self.b * r2
    }

    /// Best of the two dual candidates at `μ`, as per-mode multipliers
    /// `γ_k` with `Z' = γ_k T'_k`, and the bound they certify.
    fn dual(&self, mu: f64) -> (Vec<f64>, f64) {
        let (r1, r2) = self.residuals(mu);
        let m = self.q.len();
        let mut best = (vec![0.0; m], 0.0);
        if r2 > 0.0 && mu.is_finite() {
            // Z = b Q W / r2
            let g: Vec<f64> = self.q.iter().map(|&q| self.b * q / ((1.0 + mu * q) * r2)).collect();
            let (zt, zz) = self.inner(&g);
            let s = if zz.sqrt() > self.a { self.a / zz.sqrt() } else { 1.0 };
            if s * zt > best.1 {
                best = (g.iter().map(|x| x * s).collect(), s * zt);
            }
        }
        if r1 > 0.0 {
            // Z = a (T − W) / r1
            let g: Vec<f64> = self
                .q
                .iter()
                .map(|&q| {
                    if q == 0.0 {
                        0.0
                    } else if mu.is_infinite() {
                        self.a / r1
                    } else {
                        self.a * mu * q / ((1.0 + mu * q) * r1)
                    }
                })
                .collect();
            let (zt, _) = self.inner(&g);
            let vv: f64 = g
                .iter()
                .zip(self.q)
                .zip(self.t)
                .map(|((g, &q), &t)| if q > 0.0 { g * g * t / q } else { 0.0 })
                .sum();
            let s = if vv.sqrt() > self.b { self.b / vv.sqrt() } else { 1.0 };
            if s * zt > best.1 {
                best = (g.iter().map(|x| x * s).collect(), s * zt);
            }
        }
        best
    }

    fn inner(&self, g: &[f64]) -> (f64, f64) {
        let zt = g.iter().zip(self.t).map(|(g, t)| g * t).sum();
        let zz = g.iter().zip(self.t).map(|(g, t)| g * g * t).sum();
        (zt, zz)
    }
}

/// Minimizes `a‖W − T‖_F + b‖GW‖_F` over `W` to relative gap `tol`.
pub fn solve_side(rq: &ReducedQuadratic, a: f64, b: f64, target: &DMatrix<f64>, tol: f64) -> SideSolve {
    let tp = rq.eigvecs.tr_mul(target);
    let t: Vec<f64> = (0..rq.dim()).map(|k| tp.row(k).norm_squared()).collect();
    let path = Path { q: &rq.eigvals, t: &t, a, b };
    let positive: Vec<f64> = rq.eigvals.iter().copied().filter(|&q| q > 0.0).collect();
    let mut evaluations = 0;

    let mut candidates: Vec<(f64, f64)> = vec![(0.0, path.value(0.0)), (f64::INFINITY, path.value(f64::INFINITY))];
    evaluations += 2;
    if !positive.is_empty() && a > 0.0 && b > 0.0 {
        let qmax = positive.iter().fold(0.0f64, |x, &y| x.max(y));
        let qmin = positive.iter().fold(f64::INFINITY, |x, &y| x.min(y));
        let (lo, hi) = ((1e-8 / qmax).ln(), (1e8 / qmin).ln());
        let steps = 96;
        let grid: Vec<f64> = (0..=steps).map(|i| lo + (hi - lo) * i as f64 / steps as f64).collect();
        let vals: Vec<f64> = grid.iter().map(|&s| path.value(s.exp())).collect();
        evaluations += grid.len();
        let best = (0..vals.len()).min_by(|&x, &y| vals[x].total_cmp(&vals[y])).unwrap();
        // g'(μ) has the sign of a μ r2 − b r1; bisect on it around the grid minimum.
        let slope = |s: f64| {
            let mu = s.exp();
            let (r1, r2) = path.residuals(mu);
            a * mu * r2 - b * r1
        };
        let (mut l, mut r) = (grid[best.saturating_sub(1)], grid[(best + 1).min(steps)]);
        if slope(l) < 0.0 && slope(r) > 0.0 {
            for _ in 0..200 {
                let m = 0.5 * (l + r);
                if m <= l || m >= r {
                    break;
                }
                if slope(m) < 0.0 {
                    l = m;
                } else {
                    r = m;
                }
                evaluations += 1;
            }
            candidates.push((l.exp(), path.value(l.exp())));
            candidates.push((r.exp(), path.value(r.exp())));
        }
        candidates.push((grid[best].exp(), vals[best]));
    }
    let (mu, value) = candidates
        .iter()
        .copied()
        .min_by(|x, y| x.1.total_cmp(&y.1))
        .unwrap();

    let mut gamma = vec![0.0; rq.dim()];
    let mut lower = 0.0;
    for &(m, _) in &candidates {
        let (g, lb) = path.dual(m);
        if lb > lower {
            lower = lb;
            gamma = g;
        }
        if lower >= value * (1.0 - tol) {
            break;
        }
    }
    let lower = lower.min(value);

    let scale: Vec<f64> = rq
        .eigvals
        .iter()
        .map(|&q| if q == 0.0 { 1.0 } else if mu.is_infinite() { 0.0 } else { 1.0 / (1.0 + mu * q) })
        .collect();
    let wp = DMatrix::from_fn(tp.nrows(), tp.ncols(), |k, c| tp[(k, c)] * scale[k]);
    let w = &rq.eigvecs * wp;
    let zp = DMatrix::from_fn(tp.nrows(), tp.ncols(), |k, c| tp[(k, c)] * gamma[k]);
    let dual = &rq.eigvecs * zp;
    SideSolve { w, value, lower, dual, mu, evaluations }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quad(vals: &[f64]) -> ReducedQuadratic {
        let m = vals.len();
        ReducedQuadratic { eigvecs: DMatrix::identity(m, m), eigvals: vals.to_vec() }
    }

    #[test]
    fn target_in_kernel_costs_nothing() {
        let rq = quad(&[0.0, 0.0, 2.0]);
        let t = DMatrix::from_row_slice(3, 3, &[1.0, 2.0, 3.0, -1.0, 0.5, 0.0, 0.0, 0.0, 0.0]);
        let s = solve_side(&rq, 1.0, 1.0, &t, 1e-9);
        assert!(s.value.abs() < 1e-15);
        assert_eq!(s.w, t);
    }

    #[test]
    fn scalar_problem_closed_form() {
        // one mode: min a|w − t| + b√q|w|, optimum at w = 0 when b√q < a
        let rq = quad(&[4.0]);
        let t = DMatrix::from_row_slice(1, 3, &[1.0, 0.0, 0.0]);
        let s = solve_side(&rq, 3.0, 1.0, &t, 1e-12);
        assert!((s.value - 2.0).abs() < 1e-9, "{}", s.value);
        assert!(s.lower <= s.value && s.value - s.lower < 1e-8);
        let s = solve_side(&rq, 1.0, 1.0, &t, 1e-12);
        assert!((s.value - 1.0).abs() < 1e-9);
    }

    #[test]
    fn certificate_is_feasible() {
        let rq = quad(&[0.0, 0.5, 1.0, 3.0, 10.0]);
        let t = DMatrix::from_fn(5, 3, |i, j| ((i * 3 + j) as f64).sin());
        let (a, b) = (0.7, 0.3);
        let s = solve_side(&rq, a, b, &t, 1e-10);
        assert!(s.dual.norm() <= a * (1.0 + 1e-12));
        let v = rq.sqrt_pinv() * &s.dual;
        assert!(v.norm() <= b * (1.0 + 1e-9));
        assert!((s.dual.dot(&t) - s.lower).abs() < 1e-12);
        assert!(s.value - s.lower <= 1e-12 * s.value, "{} {}", s.value, s.lower);
        let direct = a * (&s.w - &t).norm() + b * rq.energy(&s.w);
        assert!((direct - s.value).abs() < 1e-12);
    }
}
