//! Discrete operators: cotangent stiffness, lumped mass, the projection onto
//! the orthogonal complement of the homogeneous coordinates, the projected
//! Laplacian built from both, and a kNN graph Laplacian for point clouds.

use std::io::Write;

use nalgebra::{DMatrix, DVector, Matrix4, SymmetricEigen};
use nalgebra_sparse::{CooMatrix, CsrMatrix};

use crate::error::{Error, Result};
use crate::mesh::{Geometry, Point, PointCloud, Shape, TriMesh};

pub const COT_CLAMP: f64 = 1e6;
pub const GRAM_CONDITION_LIMIT: f64 = 1e12;

/// Symmetric positive semi-definite Laplacian stiffness part with zero row
/// sums.
#[derive(Debug, Clone)]
pub struct StiffnessMatrix {
    pub matrix: CsrMatrix<f64>,
    /// Number of cotangents that hit the clamp.
    pub clamped: usize,
}

impl StiffnessMatrix {
    pub fn dim(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn apply(&self, z: &DMatrix<f64>) -> DMatrix<f64> {
        &self.matrix * z
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut d = DMatrix::zeros(self.dim(), self.dim());
        for (i, j, v) in self.matrix.triplet_iter() {
            d[(i, j)] += *v;
        }
        d
    }

    pub fn max_abs_entry(&self) -> f64 {
        self.matrix.values().iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Writes `i j value` lines, one per stored entry.
    pub fn write_coordinates<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        for (i, j, v) in self.matrix.triplet_iter() {
            writeln!(out, "{i} {j} {v}")?;
        }
        Ok(())
    }
}

fn cotangent(a: &Point, b: &Point) -> (f64, bool) {
    let c = a.dot(b) / a.cross(b).norm();
    if c.is_nan() {
        return (COT_CLAMP, true);
    }
    if c.abs() > COT_CLAMP {
        (c.signum() * COT_CLAMP, true)
    } else {
        (c, false)
    }
}

/// Cotangent stiffness: off-diagonal `(i, j)` is `-(cot a + cot b) / 2` over
/// the triangles sharing edge `ij`, the diagonal makes rows sum to zero.
pub fn cotan_stiffness(mesh: &TriMesh) -> StiffnessMatrix {
    let n = mesh.num_vertices();
    let v = mesh.vertices();
    let mut coo = CooMatrix::new(n, n);
    let mut clamped = 0;
    for f in mesh.faces() {
        for k in 0..3 {
            let (o, i, j) = (f[k], f[(k + 1) % 3], f[(k + 2) % 3]);
            let (cot, hit) = cotangent(&(v[i] - v[o]), &(v[j] - v[o]));
            clamped += hit as usize;
            let w = 0.5 * cot;
            coo.push(i, j, -w);
            coo.push(j, i, -w);
            coo.push(i, i, w);
            coo.push(j, j, w);
        }
    }
    if clamped > 0 {
        log::warn!("cotangent stiffness: {clamped} cotangents clamped to +/-{COT_CLAMP:e}");
    }
    StiffnessMatrix {
        matrix: CsrMatrix::from(&coo),
        clamped,
    }
}

/// Combinatorial Laplacian of the symmetrized k-nearest-neighbour graph.
pub fn graph_laplacian(cloud: &PointCloud) -> Result<StiffnessMatrix> {
    let k = cloud.knn();
    if k < 3 {
        return Err(Error::Validation(format!("graph Laplacian needs knn >= 3, got {k}")));
    }
    let adj = knn_graph(cloud.points(), k);
    let components = count_components(&adj);
    if components > 1 {
        return Err(Error::DisconnectedGraph { components });
    }
    let n = adj.len();
    let mut coo = CooMatrix::new(n, n);
    for (i, nbrs) in adj.iter().enumerate() {
        coo.push(i, i, nbrs.len() as f64);
        for &j in nbrs {
            coo.push(i, j, -1.0);
        }
    }
    Ok(StiffnessMatrix {
        matrix: CsrMatrix::from(&coo),
        clamped: 0,
    })
}

/// Symmetrized kNN adjacency, brute force; neighbours ordered by
/// `(distance, index)`.
pub fn knn_graph(points: &[Point], k: usize) -> Vec<Vec<usize>> {
    let n = points.len();
    let mut adj = vec![Vec::new(); n];
    for i in 0..n {
        let mut d: Vec<(f64, usize)> = (0..n)
            .filter(|&j| j != i)
            .map(|j| ((points[j] - points[i]).norm_squared(), j))
            .collect();
        d.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        for &(_, j) in d.iter().take(k) {
            adj[i].push(j);
            adj[j].push(i);
        }
    }
    for l in &mut adj {
        l.sort_unstable();
        l.dedup();
    }
    adj
}

fn count_components(adj: &[Vec<usize>]) -> usize {
    let mut seen = vec![false; adj.len()];
    let mut count = 0;
    for s in 0..adj.len() {
        if seen[s] {
            continue;
        }
        count += 1;
        let mut stack = vec![s];
        seen[s] = true;
        while let Some(v) = stack.pop() {
            for &u in &adj[v] {
                if !seen[u] {
                    seen[u] = true;
                    stack.push(u);
                }
            }
        }
    }
    count
}

/// Lumped (diagonal) mass: one third of the incident face areas per vertex.
/// Point clouds get uniform weights `1/N`.
#[derive(Debug, Clone)]
pub struct MassMatrix {
    pub diagonal: DVector<f64>,
}

impl MassMatrix {
    pub fn lumped(mesh: &TriMesh) -> Self {
        let mut d = DVector::zeros(mesh.num_vertices());
        for (f, a) in mesh.faces().iter().zip(mesh.face_areas()) {
            for &v in f {
                d[v] += a / 3.0;
            }
        }
        MassMatrix { diagonal: d }
    }

    pub fn uniform(n: usize) -> Self {
        MassMatrix {
            diagonal: DVector::from_element(n, 1.0 / n as f64),
        }
    }

    pub fn for_geometry(geometry: &Geometry) -> Self {
        match geometry {
            Geometry::Mesh(m) => MassMatrix::lumped(m),
            Geometry::Cloud(c) => MassMatrix::uniform(c.points().len()),
        }
    }

    pub fn total(&self) -> f64 {
        self.diagonal.sum()
    }
}

/// Orthogonal projection onto the complement of `span(X 1)`, kept in
/// factored form.
///
/// Applied through an orthonormal basis of the span, which is the same
/// operator as `I - X~ (X~^T X~)^-1 X~^T` but does not lose accuracy when the
/// shape sits far from the origin. For planar inputs the span has dimension
/// three and the pseudo-inverse is used.
#[derive(Debug, Clone)]
pub struct Projection {
    pub homogeneous: DMatrix<f64>,
    pub gram_inverse: Matrix4<f64>,
    basis: DMatrix<f64>,
}

impl Projection {
    pub fn dim(&self) -> usize {
        self.homogeneous.nrows()
    }

    /// Rank of `X~`: 4 for generic shapes, 3 for planar ones.
    pub fn rank(&self) -> usize {
        self.basis.ncols()
    }

    /// Orthonormal basis of `span(X~)`.
    pub fn basis(&self) -> &DMatrix<f64> {
        &self.basis
    }

    pub fn apply(&self, z: &DMatrix<f64>) -> DMatrix<f64> {
        let coeff = self.basis.tr_mul(z);
        z - &self.basis * coeff
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        DMatrix::identity(self.dim(), self.dim()) - &self.basis * self.basis.transpose()
    }
}

pub fn build_projection(vertices: &[Point]) -> Result<Projection> {
    let n = vertices.len();
    if n < 4 {
        return Err(Error::RankDeficient {
            condition: f64::INFINITY,
        });
    }
    let mut homogeneous = DMatrix::zeros(n, 4);
    for (r, p) in vertices.iter().enumerate() {
        homogeneous[(r, 0)] = p.x;
        homogeneous[(r, 1)] = p.y;
        homogeneous[(r, 2)] = p.z;
        homogeneous[(r, 3)] = 1.0;
    }

    // Centered coordinates carry the same span as X~ minus the constants;
    // their principal axes reveal the affine rank.
    let mean: Point = vertices.iter().sum::<Point>() / n as f64;
    let mut centered = DMatrix::zeros(n, 3);
    for (r, p) in vertices.iter().enumerate() {
        let c = p - mean;
        for k in 0..3 {
            centered[(r, k)] = c[k];
        }
    }
    let cov = centered.tr_mul(&centered);
    let eig = SymmetricEigen::new(cov);
    let lmax = eig.eigenvalues.max();
    if !(lmax > 0.0) {
        return Err(Error::RankDeficient {
            condition: f64::INFINITY,
        });
    }
    let mut axes: Vec<usize> = (0..3)
        .filter(|&k| eig.eigenvalues[k] > lmax / GRAM_CONDITION_LIMIT)
        .collect();
    axes.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    if axes.len() < 2 {
        let lmin = eig.eigenvalues.iter().copied().filter(|&l| l > 0.0).fold(lmax, f64::min);
        let condition = if axes.len() == 3 { lmax / lmin } else { f64::INFINITY };
        return Err(Error::RankDeficient { condition });
    }
    if axes.len() == 2 {
        log::info!("projection: planar shape, using the rank-3 pseudo-inverse");
    }

    let mut basis = DMatrix::zeros(n, axes.len() + 1);
    let inv_sqrt_n = 1.0 / (n as f64).sqrt();
    basis.column_mut(0).fill(inv_sqrt_n);
    for (c, &k) in axes.iter().enumerate() {
        let dir = eig.eigenvectors.column(k);
        let mut col = &centered * dir;
        col /= eig.eigenvalues[k].sqrt();
        basis.set_column(c + 1, &col);
    }
    // one Gram-Schmidt pass against round-off
    for c in 0..basis.ncols() {
        for p in 0..c {
            let d = basis.column(p).dot(&basis.column(c));
            let pc = basis.column(p).clone_owned();
            basis.column_mut(c).axpy(-d, &pc, 1.0);
        }
        let nrm = basis.column(c).norm();
        basis.column_mut(c).unscale_mut(nrm);
    }

    let gram = homogeneous.tr_mul(&homogeneous);
    let gram_inverse = pseudo_inverse_sym4(&gram);
    Ok(Projection {
        homogeneous,
        gram_inverse,
        basis,
    })
}

fn pseudo_inverse_sym4(m: &DMatrix<f64>) -> Matrix4<f64> {
    let m4 = Matrix4::from_iterator(m.iter().copied());
    let eig = SymmetricEigen::new(m4);
    let lmax = eig.eigenvalues.iter().fold(0.0f64, |a, &b| a.max(b.abs()));
    let mut inv = Matrix4::zeros();
    for k in 0..4 {
        let l = eig.eigenvalues[k];
        if l.abs() > lmax / GRAM_CONDITION_LIMIT {
            let v = eig.eigenvectors.column(k);
            inv += v * v.transpose() / l;
        }
    }
    inv
}

/// A linear deformation operator acting column-wise on `|X| x m` matrices.
pub trait DeformationOperator: Send + Sync {
    fn dim(&self) -> usize;
    fn apply(&self, z: &DMatrix<f64>) -> DMatrix<f64>;
    fn to_dense(&self) -> DMatrix<f64>;
    /// Orthonormal basis of a subspace known to lie in the kernel.
    fn kernel_basis(&self) -> DMatrix<f64>;
}

/// `Pi^T K Pi` for stiffness `K` and projection `Pi`.
#[derive(Debug, Clone)]
pub struct ProjectedOperator {
    pub stiffness: StiffnessMatrix,
    pub projection: Projection,
}

impl ProjectedOperator {
    pub fn new(stiffness: StiffnessMatrix, projection: Projection) -> Self {
        assert_eq!(stiffness.dim(), projection.dim());
        ProjectedOperator { stiffness, projection }
    }

    /// Typical entry magnitude, used to express tolerances relative to the
    /// operator.
    pub fn scale(&self) -> f64 {
        self.stiffness.max_abs_entry()
    }
}

impl DeformationOperator for ProjectedOperator {
    fn dim(&self) -> usize {
        self.stiffness.dim()
    }

    fn apply(&self, z: &DMatrix<f64>) -> DMatrix<f64> {
        let pz = self.projection.apply(z);
        let kpz = self.stiffness.apply(&pz);
        self.projection.apply(&kpz)
    }

    fn to_dense(&self) -> DMatrix<f64> {
        let k = self.stiffness.to_dense();
        let kp = self.projection.apply(&k.transpose()).transpose();
        self.projection.apply(&kp)
    }

    fn kernel_basis(&self) -> DMatrix<f64> {
        self.projection.basis().clone()
    }
}

/// The plain stiffness matrix as a deformation prior.
#[derive(Debug, Clone)]
pub struct StiffnessOperator(pub StiffnessMatrix);

impl DeformationOperator for StiffnessOperator {
    fn dim(&self) -> usize {
        self.0.dim()
    }

    fn apply(&self, z: &DMatrix<f64>) -> DMatrix<f64> {
        self.0.apply(z)
    }

    fn to_dense(&self) -> DMatrix<f64> {
        self.0.to_dense()
    }

    fn kernel_basis(&self) -> DMatrix<f64> {
        let n = self.dim();
        DMatrix::from_element(n, 1, 1.0 / (n as f64).sqrt())
    }
}

/// Stiffness for any geometry: cotangent for meshes, kNN graph for clouds.
pub fn stiffness_for(geometry: &Geometry) -> Result<StiffnessMatrix> {
    match geometry {
        Geometry::Mesh(m) => Ok(cotan_stiffness(m)),
        Geometry::Cloud(c) => graph_laplacian(c),
    }
}

pub fn build_plbo(shape: &Shape) -> Result<ProjectedOperator> {
    let stiffness = stiffness_for(shape.geometry())?;
    let projection = build_projection(shape.positions())?;
    Ok(ProjectedOperator::new(stiffness, projection))
}

/// `|X| x 3` coordinate matrix.
pub fn coordinates(points: &[Point]) -> DMatrix<f64> {
    DMatrix::from_fn(points.len(), 3, |r, c| points[r][c])
}

pub fn points_from(m: &DMatrix<f64>) -> Vec<Point> {
    (0..m.nrows()).map(|r| Point::new(m[(r, 0)], m[(r, 1)], m[(r, 2)])).collect()
}
