//! Laplacian eigenpairs, the wave kernel signature and the orientation feature.

use std::collections::VecDeque;
use std::fmt::Write as _;

use nalgebra::{DMatrix, SymmetricEigen};
use nalgebra_sparse::factorization::CscCholesky;
use nalgebra_sparse::{CooMatrix, CscMatrix};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mesh::{Geometry, Point, Shape, TriMesh};
use crate::operators::{stiffness_for, MassMatrix, StiffnessMatrix};

pub const DEFAULT_NUM_ENERGIES: usize = 100;
pub const DEFAULT_VARIANCE_SCALE: f64 = 7.0;
pub const MAX_EIGENPAIRS: usize = 120;
/// Above this size the iterative solver is used.
pub const DIRECT_LIMIT: usize = 800;
/// Largest problem the dense solver accepts as a fallback.
pub const DENSE_FALLBACK_LIMIT: usize = 3000;
pub const RESIDUAL_TOLERANCE: f64 = 1e-7;
pub const GRADIENT_EPS: f64 = 1e-10;
const KRYLOV_BLOCK: usize = 12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum EigenSolver {
    #[default]
    Auto,
    Dense,
    Krylov,
}

/// Smallest eigenpairs of `K φ = λ M φ`, `φᵀ M φ = 1`, ascending.
#[derive(Debug, Clone)]
pub struct EigenBasis {
    pub values: Vec<f64>,
    /// `n × k`, one eigenvector per column.
    pub vectors: DMatrix<f64>,
    /// Sum of the mass matrix; rescales `φ²` so WKS is scale invariant.
    pub total_mass: f64,
}

impl EigenBasis {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// `‖K φ_i − λ_i M φ_i‖₂` per pair.
    pub fn residuals(&self, stiffness: &StiffnessMatrix, mass: &MassMatrix) -> Vec<f64> {
        let kphi = stiffness.apply(&self.vectors);
        (0..self.len())
            .map(|i| {
                let mut r = 0.0;
                for v in 0..self.vectors.nrows() {
                    let d = kphi[(v, i)] - self.values[i] * mass.diagonal[v] * self.vectors[(v, i)];
                    r += d * d;
                }
                r.sqrt()
            })
            .collect()
    }
}

pub fn default_eigen_count(num_vertices: usize) -> usize {
    num_vertices.saturating_sub(2).min(MAX_EIGENPAIRS)
}

pub fn eigenpairs(shape: &Shape, k: usize) -> Result<EigenBasis> {
    eigenpairs_of(shape.geometry(), k, EigenSolver::Auto)
}

pub fn eigenpairs_of(geometry: &Geometry, k: usize, solver: EigenSolver) -> Result<EigenBasis> {
    let stiffness = stiffness_for(geometry)?;
    let mass = MassMatrix::for_geometry(geometry);
    generalized_eigenpairs(&stiffness, &mass, k, solver)
}

pub fn generalized_eigenpairs(
    stiffness: &StiffnessMatrix,
    mass: &MassMatrix,
    k: usize,
    solver: EigenSolver,
) -> Result<EigenBasis> {
    let n = stiffness.dim();
    if k == 0 || k > n.saturating_sub(1) {
        return Err(Error::Validation(format!(
            "requested {k} eigenpairs; a shape with {n} vertices supports 1..={}",
            n.saturating_sub(1)
        )));
    }
    let mut basis = match solver {
        EigenSolver::Dense => dense_eigenpairs(stiffness, mass, k),
        EigenSolver::Krylov => krylov_eigenpairs(stiffness, mass, k)?,
        EigenSolver::Auto if n <= DIRECT_LIMIT => dense_eigenpairs(stiffness, mass, k),
        EigenSolver::Auto => match krylov_eigenpairs(stiffness, mass, k) {
            Ok(b) => b,
            Err(e) if n <= DENSE_FALLBACK_LIMIT => {
                log::warn!("iterative eigensolver failed ({e}); using dense solver");
                dense_eigenpairs(stiffness, mass, k)
            }
            Err(e) => return Err(e),
        },
    };
    fix_signs(&mut basis.vectors);
    Ok(basis)
}

fn fix_signs(vectors: &mut DMatrix<f64>) {
    for mut col in vectors.column_iter_mut() {
        let mut best = 0;
        for (i, v) in col.iter().enumerate() {
            if v.abs() > col[best].abs() {
                best = i;
            }
        }
        if col[best] < 0.0 {
            col.neg_mut();
        }
    }
}

fn dense_eigenpairs(stiffness: &StiffnessMatrix, mass: &MassMatrix, k: usize) -> EigenBasis {
    let n = stiffness.dim();
    let inv_sqrt: Vec<f64> = mass.diagonal.iter().map(|m| 1.0 / m.sqrt()).collect();
    let mut a = stiffness.to_dense();
    for j in 0..n {
        for i in 0..n {
            a[(i, j)] *= inv_sqrt[i] * inv_sqrt[j];
        }
    }
    let a = (&a + a.transpose()) * 0.5;
    let eig = SymmetricEigen::new(a);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&x, &y| eig.eigenvalues[x].total_cmp(&eig.eigenvalues[y]));
    let mut vectors = DMatrix::zeros(n, k);
    let mut values = Vec::with_capacity(k);
    for (c, &o) in order.iter().take(k).enumerate() {
        values.push(eig.eigenvalues[o].max(0.0));
        for i in 0..n {
            vectors[(i, c)] = eig.eigenvectors[(i, o)] * inv_sqrt[i];
        }
    }
    EigenBasis { values, vectors, total_mass: mass.total() }
}

/// Reverse Cuthill-McKee ordering of a symmetric sparsity pattern.
pub fn reverse_cuthill_mckee(adjacency: &[Vec<usize>]) -> Vec<usize> {
    let n = adjacency.len();
    let mut visited = vec![false; n];
    let mut order = Vec::with_capacity(n);
    let mut by_degree: Vec<usize> = (0..n).collect();
    by_degree.sort_by_key(|&v| (adjacency[v].len(), v));
    for &start in &by_degree {
        if visited[start] {
            continue;
        }
        visited[start] = true;
        let mut queue = VecDeque::from([start]);
        while let Some(v) = queue.pop_front() {
            order.push(v);
            let mut nbrs: Vec<usize> = adjacency[v].iter().copied().filter(|&u| !visited[u]).collect();
            nbrs.sort_by_key(|&u| (adjacency[u].len(), u));
            for u in nbrs {
                visited[u] = true;
                queue.push_back(u);
            }
        }
    }
    order.reverse();
    order
}

/// Factorization of `K + εM` under a bandwidth-reducing permutation.
struct ShiftedSolver {
    factor: CscCholesky<f64>,
    perm: Vec<usize>,
}

impl ShiftedSolver {
    fn new(stiffness: &StiffnessMatrix, mass: &MassMatrix, shift: f64) -> Result<Self> {
        let n = stiffness.dim();
        let csr = &stiffness.matrix;
        let mut adjacency = vec![Vec::new(); n];
        for (i, j, _) in csr.triplet_iter() {
            if i != j {
                adjacency[i].push(j);
            }
        }
        let perm = reverse_cuthill_mckee(&adjacency);
        let mut inv = vec![0; n];
        for (new, &old) in perm.iter().enumerate() {
            inv[old] = new;
        }
        let mut coo = CooMatrix::new(n, n);
        for (i, j, &v) in csr.triplet_iter() {
            coo.push(inv[i], inv[j], v);
        }
        for (i, m) in mass.diagonal.iter().enumerate() {
            coo.push(inv[i], inv[i], shift * m);
        }
        let factor = CscCholesky::factor(&CscMatrix::from(&coo))
            .map_err(|_| Error::Convergence { what: "sparse Cholesky of shifted operator", iterations: 0 })?;
        Ok(ShiftedSolver { factor, perm })
    }

    fn solve(&self, rhs: &DMatrix<f64>) -> DMatrix<f64> {
        let (n, c) = rhs.shape();
        let mut permuted = DMatrix::zeros(n, c);
        for (new, &old) in self.perm.iter().enumerate() {
            permuted.row_mut(new).copy_from(&rhs.row(old));
        }
        let sol = self.factor.solve(&permuted);
        let mut out = DMatrix::zeros(n, c);
        for (new, &old) in self.perm.iter().enumerate() {
            out.row_mut(old).copy_from(&sol.row(new));
        }
        out
    }
}

fn m_dot(a: &[f64], b: &[f64], mass: &[f64]) -> f64 {
    a.iter().zip(b).zip(mass).map(|((x, y), m)| x * y * m).sum()
}

/// Block shift-invert Krylov space with full M-orthogonalization, followed
/// by Rayleigh-Ritz on `K`. The space grows until all `k` residuals pass.
fn krylov_eigenpairs(stiffness: &StiffnessMatrix, mass: &MassMatrix, k: usize) -> Result<EigenBasis> {
    let n = stiffness.dim();
    let m = mass.diagonal.as_slice();
    let scale = (0..n)
        .map(|i| stiffness.matrix.get_entry(i, i).map(|e| e.into_value()).unwrap_or(0.0) / m[i])
        .sum::<f64>()
        / n as f64;
    let shift = 1e-6 * scale.max(f64::MIN_POSITIVE);
    let solver = ShiftedSolver::new(stiffness, mass, shift)?;
    let knorm = stiffness_inf_norm(stiffness);
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);

    let mut basis: Vec<Vec<f64>> = Vec::new();
    let block = KRYLOV_BLOCK.min(n);
    let mut current = DMatrix::from_fn(n, block, |_, _| rng.random_range(-1.0..1.0));
    let mut target = (2 * k + 2 * block).min(n);
    let mut iterations = 0;
    loop {
        while basis.len() < target {
            iterations += 1;
            let mut next_block = Vec::new();
            for c in 0..current.ncols() {
                let mut v: Vec<f64> = current.column(c).iter().copied().collect();
                let before = m_dot(&v, &v, m).sqrt();
                for _ in 0..2 {
                    for b in &basis {
                        let d = m_dot(&v, b, m);
                        v.iter_mut().zip(b).for_each(|(x, y)| *x -= d * y);
                    }
                }
                let norm = m_dot(&v, &v, m).sqrt();
                if norm > 1e-10 * before && norm > 0.0 {
                    v.iter_mut().for_each(|x| *x /= norm);
                    basis.push(v.clone());
                    next_block.push(v);
                }
                if basis.len() >= target {
                    break;
                }
            }
            if next_block.is_empty() {
                // Invariant subspace reached; restart from fresh random vectors.
                if basis.len() >= n {
                    break;
                }
                current = DMatrix::from_fn(n, block, |_, _| rng.random_range(-1.0..1.0));
                continue;
            }
            let mut mv = DMatrix::zeros(n, next_block.len());
            for (c, v) in next_block.iter().enumerate() {
                for i in 0..n {
                    mv[(i, c)] = v[i] * m[i];
                }
            }
            current = solver.solve(&mv);
        }
        let cols = basis.len();
        let v = DMatrix::from_fn(n, cols, |i, j| basis[j][i]);
        let kv = stiffness.apply(&v);
        let h = v.transpose() * &kv;
        let h = (&h + h.transpose()) * 0.5;
        let eig = SymmetricEigen::new(h);
        let mut order: Vec<usize> = (0..cols).collect();
        order.sort_by(|&x, &y| eig.eigenvalues[x].total_cmp(&eig.eigenvalues[y]));
        let take = k.min(cols);
        let sel = DMatrix::from_fn(cols, take, |i, j| eig.eigenvectors[(i, order[j])]);
        let vectors = &v * sel;
        let values: Vec<f64> = order.iter().take(take).map(|&o| eig.eigenvalues[o].max(0.0)).collect();
        let out = EigenBasis { values, vectors, total_mass: mass.total() };
        let worst = out.residuals(stiffness, mass).into_iter().fold(0.0, f64::max);
        if take == k && worst <= RESIDUAL_TOLERANCE * knorm {
            return Ok(out);
        }
        if cols >= n || target >= n {
            return Err(Error::Convergence { what: "shift-invert eigensolver", iterations });
        }
        target = (target * 3 / 2).min(n);
    }
}

/// Maximum absolute row sum.
pub fn stiffness_inf_norm(stiffness: &StiffnessMatrix) -> f64 {
    stiffness
        .matrix
        .row_iter()
        .map(|r| r.values().iter().map(|v| v.abs()).sum::<f64>())
        .fold(0.0, f64::max)
}

#[derive(Debug, Clone)]
pub struct WksDescriptor {
    /// `n × M`.
    pub values: DMatrix<f64>,
    pub energies: Vec<f64>,
    pub sigma: f64,
}

impl WksDescriptor {
    /// Column by 1-based energy index.
    pub fn column_one_based(&self, c: usize) -> Result<Vec<f64>> {
        if c == 0 || c > self.values.ncols() {
            return Err(Error::Validation(format!(
                "WKS column {c} out of range 1..={}",
                self.values.ncols()
            )));
        }
        Ok(self.values.column(c - 1).iter().copied().collect())
    }
}

pub fn wks(basis: &EigenBasis, num_energies: usize, variance_scale: f64) -> Result<WksDescriptor> {
    let k = basis.len();
    if k < 3 {
        return Err(Error::InsufficientSpectrum { needed: 3, got: k });
    }
    if num_energies == 0 || variance_scale <= 0.0 {
        return Err(Error::Validation("WKS needs at least one energy and a positive variance".into()));
    }
    let lambda1 = basis.values[1];
    let top = basis.values[k - 1];
    if !(lambda1 > 1e-10 * top) {
        return Err(Error::InsufficientSpectrum { needed: 2, got: 1 });
    }
    let logs: Vec<f64> = basis.values[1..].iter().map(|l| (l / lambda1).ln()).collect();
    let (lo, hi) = (logs[0], *logs.last().unwrap());
    let step = if num_energies > 1 { (hi - lo) / (num_energies - 1) as f64 } else { 0.0 };
    let sigma = if step > 0.0 { variance_scale * step } else { variance_scale };
    let energies: Vec<f64> = (0..num_energies).map(|m| lo + step * m as f64).collect();

    let n = basis.vectors.nrows();
    let modes = logs.len();
    let mut weights = DMatrix::zeros(modes, num_energies);
    for (mi, e) in energies.iter().enumerate() {
        let col: Vec<f64> = logs.iter().map(|l| (-(e - l).powi(2) / (2.0 * sigma * sigma)).exp()).collect();
        let total: f64 = col.iter().sum();
        for (i, w) in col.into_iter().enumerate() {
            weights[(i, mi)] = w / total;
        }
    }
    let sq = DMatrix::from_fn(n, modes, |v, i| {
        let x = basis.vectors[(v, i + 1)];
        x * x * basis.total_mass
    });
    Ok(WksDescriptor { values: sq * weights, energies, sigma })
}

/// Per-face gradient of the piecewise-linear field, area-averaged onto
/// vertices and normalized; vanishing averages give the zero vector.
pub fn vertex_gradient(mesh: &TriMesh, field: &[f64]) -> Vec<Point> {
    let v = mesh.vertices();
    let mut acc = vec![Point::zeros(); v.len()];
    let mut area = vec![0.0; v.len()];
    for (fi, f) in mesh.faces().iter().enumerate() {
        let a = mesh.face_areas()[fi];
        let n = mesh.face_normal_scaled(fi);
        let nn = n.norm();
        if nn == 0.0 {
            continue;
        }
        let n = n / nn;
        let [i, j, k] = *f;
        let g = (n.cross(&(v[k] - v[j])) * field[i]
            + n.cross(&(v[i] - v[k])) * field[j]
            + n.cross(&(v[j] - v[i])) * field[k])
            / (2.0 * a);
        for &x in f {
            acc[x] += g * a;
            area[x] += a;
        }
    }
    acc.into_iter()
        .zip(area)
        .map(|(g, a)| {
            let g = if a > 0.0 { g / a } else { g };
            let norm = g.norm();
            if norm < GRADIENT_EPS {
                Point::zeros()
            } else {
                g / norm
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OrientationField {
    pub h: Vec<f64>,
}

pub fn orientation_field(shape: &Shape, f: &[f64], g: &[f64]) -> Result<OrientationField> {
    let mesh = shape.mesh().ok_or(Error::PointCloudUnsupported)?;
    orientation_on_mesh(mesh, f, g)
}

pub fn orientation_on_mesh(mesh: &TriMesh, f: &[f64], g: &[f64]) -> Result<OrientationField> {
    let n = mesh.num_vertices();
    if f.len() != n || g.len() != n {
        return Err(Error::Validation(format!(
            "scalar fields have lengths {} and {}, mesh has {n} vertices",
            f.len(),
            g.len()
        )));
    }
    if f.iter().chain(g).any(|x| !x.is_finite()) {
        return Err(Error::Validation("scalar field contains non-finite values".into()));
    }
    let normals = mesh.vertex_normals()?;
    let gf = vertex_gradient(mesh, f);
    let gg = vertex_gradient(mesh, g);
    let h = (0..n).map(|i| gf[i].cross(&gg[i]).dot(&normals[i])).collect();
    Ok(OrientationField { h })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FeatureConfig {
    pub num_energies: usize,
    pub variance_scale: f64,
    /// 1-based WKS energy columns feeding the orientation feature.
    pub columns: (usize, usize),
    pub max_eigenpairs: usize,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        FeatureConfig {
            num_energies: DEFAULT_NUM_ENERGIES,
            variance_scale: DEFAULT_VARIANCE_SCALE,
            columns: (1, 70),
            max_eigenpairs: MAX_EIGENPAIRS,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ShapeFeatures {
    pub wks: WksDescriptor,
    pub orientation: OrientationField,
}

/// WKS and orientation field with the given defaults.
pub fn shape_features(shape: &Shape, config: &FeatureConfig) -> Result<ShapeFeatures> {
    let mesh = shape.mesh().ok_or(Error::PointCloudUnsupported)?;
    let k = default_eigen_count(mesh.num_vertices()).min(config.max_eigenpairs);
    let basis = eigenpairs(shape, k)?;
    let w = wks(&basis, config.num_energies, config.variance_scale)?;
    let f = w.column_one_based(config.columns.0)?;
    let g = w.column_one_based(config.columns.1)?;
    let orientation = orientation_on_mesh(mesh, &f, &g)?;
    Ok(ShapeFeatures { wks: w, orientation })
}

/// CSV with one row per vertex: index, WKS columns, h.
pub fn features_csv(features: &ShapeFeatures) -> String {
    let w = &features.wks.values;
    let mut s = String::from("vertex");
    for c in 1..=w.ncols() {
        let _ = write!(s, ",wks_{c}");
    }
    s.push_str(",h\n");
    for v in 0..w.nrows() {
        let _ = write!(s, "{v}");
        for c in 0..w.ncols() {
            let _ = write!(s, ",{:?}", w[(v, c)]);
        }
        let _ = writeln!(s, ",{:?}", features.orientation.h[v]);
    }
    s
}

/// `Φᵀ M Φ`; the identity for an M-orthonormal basis.
pub fn mass_gram(basis: &EigenBasis, mass: &MassMatrix) -> DMatrix<f64> {
    let mv = DMatrix::from_fn(basis.vectors.nrows(), basis.len(), |i, j| basis.vectors[(i, j)] * mass.diagonal[i]);
    basis.vectors.transpose() * mv
}
