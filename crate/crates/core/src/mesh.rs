//! Triangle meshes, point clouds and keypoint-annotated shapes.
//!
//! All types are immutable once constructed. Derived per-face geometry is
//! computed at construction; vertex normals are computed on demand because a
//! valid mesh may still contain vertices whose incident normals cancel.

use std::collections::HashMap;

use nalgebra::{Matrix3, Vector3};

use crate::error::{Error, Result};
use crate::geodesics;

pub type Point = Vector3<f64>;

/// Relative area threshold: faces smaller than this times the squared
/// bounding-box diagonal are rejected.
pub const DEFAULT_AREA_EPS: f64 = 1e-12;

const NORMAL_EPS: f64 = 1e-12;

#[derive(Debug, Clone)]
pub struct TriMesh {
    vertices: Vec<Point>,
    faces: Vec<[usize; 3]>,
    face_areas: Vec<f64>,
}

impl TriMesh {
    pub fn new(vertices: Vec<Point>, faces: Vec<[usize; 3]>) -> Result<Self> {
        Self::with_area_eps(vertices, faces, DEFAULT_AREA_EPS)
    }

    pub fn with_area_eps(vertices: Vec<Point>, faces: Vec<[usize; 3]>, area_eps: f64) -> Result<Self> {
        if vertices.is_empty() {
            return Err(Error::Validation("mesh has no vertices".into()));
        }
        if faces.is_empty() {
            return Err(Error::Validation("mesh has no faces".into()));
        }
        for (fi, f) in faces.iter().enumerate() {
            for &v in f {
                if v >= vertices.len() {
                    return Err(Error::Validation(format!(
                        "face {fi} references vertex {v}, mesh has {} vertices",
                        vertices.len()
                    )));
                }
            }
            if f[0] == f[1] || f[1] == f[2] || f[0] == f[2] {
                return Err(Error::Validation(format!("face {fi} repeats a vertex: {f:?}")));
            }
        }
        if let Some(v) = vertices.iter().position(|p| !p.iter().all(|c| c.is_finite())) {
            return Err(Error::Validation(format!("vertex {v} has non-finite coordinates")));
        }
        let diag2 = bbox_diagonal(&vertices).powi(2);
        let min_area = area_eps * diag2;
        let face_areas: Vec<f64> = faces.iter().map(|f| triangle_area(&vertices, f)).collect();
        for (fi, &a) in face_areas.iter().enumerate() {
            if !(a >= min_area) || a == 0.0 {
                return Err(Error::Validation(format!(
                    "face {fi} is degenerate (area {a:.3e} < {min_area:.3e})"
                )));
            }
        }
        let mesh = TriMesh {
            vertices,
            faces,
            face_areas,
        };
        let nm = mesh.non_manifold_edges();
        if nm > 0 {
            log::warn!("mesh has {nm} non-manifold edges");
        }
        Ok(mesh)
    }

    pub fn vertices(&self) -> &[Point] {
        &self.vertices
    }

    pub fn faces(&self) -> &[[usize; 3]] {
        &self.faces
    }

    pub fn num_vertices(&self) -> usize {
        self.vertices.len()
    }

    pub fn num_faces(&self) -> usize {
        self.faces.len()
    }

    pub fn face_areas(&self) -> &[f64] {
        &self.face_areas
    }

    pub fn total_area(&self) -> f64 {
        self.face_areas.iter().sum()
    }

    /// Unnormalized face normal; its length is twice the face area.
    pub fn face_normal_scaled(&self, f: usize) -> Point {
        let [a, b, c] = self.faces[f];
        (self.vertices[b] - self.vertices[a]).cross(&(self.vertices[c] - self.vertices[a]))
    }

    /// Area-weighted average of incident face normals, normalized per vertex.
    ///
    /// Counterclockwise winding is taken as outward. Isolated vertices (no
    /// incident face) and vertices whose incident normals cancel are errors.
    pub fn vertex_normals(&self) -> Result<Vec<Point>> {
        let mut acc = vec![Point::zeros(); self.vertices.len()];
        for (fi, f) in self.faces.iter().enumerate() {
            // |cross| = 2 * area, so this already weights by area
            let n = self.face_normal_scaled(fi);
            for &v in f {
                acc[v] += n;
            }
        }
        let scale = bbox_diagonal(&self.vertices).powi(2).max(f64::MIN_POSITIVE);
        acc.into_iter()
            .enumerate()
            .map(|(v, n)| {
                let len = n.norm();
                if len < NORMAL_EPS * scale {
                    Err(Error::DegenerateNormal { vertex: v })
                } else {
                    Ok(n / len)
                }
            })
            .collect()
    }

    /// Vertex-to-vertex adjacency (sorted, deduplicated) from face edges.
    pub fn vertex_adjacency(&self) -> Vec<Vec<usize>> {
        let mut adj = vec![Vec::new(); self.vertices.len()];
        for f in &self.faces {
            for k in 0..3 {
                let (a, b) = (f[k], f[(k + 1) % 3]);
                adj[a].push(b);
                adj[b].push(a);
            }
        }
        for list in &mut adj {
            list.sort_unstable();
            list.dedup();
        }
        adj
    }

    /// Number of undirected edges shared by more than two faces.
    pub fn non_manifold_edges(&self) -> usize {
        let mut count: HashMap<(usize, usize), usize> = HashMap::new();
        for f in &self.faces {
            for k in 0..3 {
                let (a, b) = (f[k], f[(k + 1) % 3]);
                *count.entry((a.min(b), a.max(b))).or_default() += 1;
            }
        }
        count.values().filter(|&&c| c > 2).count()
    }

    /// Number of interior edges whose two incident faces traverse it in the
    /// same direction, i.e. disagree on orientation. Zero for a consistently
    /// wound mesh.
    pub fn inconsistent_orientation_edges(&self) -> usize {
        let mut directed: HashMap<(usize, usize), usize> = HashMap::new();
        for f in &self.faces {
            for k in 0..3 {
                *directed.entry((f[k], f[(k + 1) % 3])).or_default() += 1;
            }
        }
        directed.values().filter(|&&c| c > 1).map(|c| c - 1).sum()
    }

    /// Applies `x -> R x + t` to every vertex. Faces are kept as they are, so
    /// an improper `R` mirrors the surface without rewinding it.
    pub fn transformed(&self, rotation: &Matrix3<f64>, translation: &Point) -> TriMesh {
        let vertices = self
            .vertices
            .iter()
            .map(|p| rotation * p + translation)
            .collect();
        self.with_vertices_unchecked(vertices)
    }

    pub fn scaled(&self, s: f64) -> TriMesh {
        let vertices = self.vertices.iter().map(|p| p * s).collect();
        self.with_vertices_unchecked(vertices)
    }

    /// Same geometry with every face's winding reversed.
    pub fn flipped(&self) -> TriMesh {
        TriMesh {
            vertices: self.vertices.clone(),
            faces: self.faces.iter().map(|f| [f[0], f[2], f[1]]).collect(),
            face_areas: self.face_areas.clone(),
        }
    }

    /// Replaces the vertex positions while keeping connectivity; validates.
    pub fn with_vertices(&self, vertices: Vec<Point>) -> Result<TriMesh> {
        if vertices.len() != self.vertices.len() {
            return Err(Error::Validation(format!(
                "expected {} vertices, got {}",
                self.vertices.len(),
                vertices.len()
            )));
        }
        TriMesh::new(vertices, self.faces.clone())
    }

    // Similarity transforms cannot create degenerate faces, so revalidation is
    // skipped.
    fn with_vertices_unchecked(&self, vertices: Vec<Point>) -> TriMesh {
        let face_areas = self.faces.iter().map(|f| triangle_area(&vertices, f)).collect();
        TriMesh {
            vertices,
            faces: self.faces.clone(),
            face_areas,
        }
    }
}

pub fn triangle_area(vertices: &[Point], f: &[usize; 3]) -> f64 {
    let (a, b, c) = (vertices[f[0]], vertices[f[1]], vertices[f[2]]);
    0.5 * (b - a).cross(&(c - a)).norm()
}

pub fn bbox_diagonal(points: &[Point]) -> f64 {
    let mut lo = Point::repeat(f64::INFINITY);
    let mut hi = Point::repeat(f64::NEG_INFINITY);
    for p in points {
        lo = lo.inf(p);
        hi = hi.sup(p);
    }
    (hi - lo).norm()
}

#[derive(Debug, Clone)]
pub struct PointCloud {
    points: Vec<Point>,
    knn: usize,
}

pub const DEFAULT_KNN: usize = 8;

impl PointCloud {
    /// Builds a cloud, removing exact duplicate points.
    ///
    /// Returns the cloud together with the index remap `old -> new`.
    pub fn new(points: Vec<Point>, knn: usize) -> Result<(Self, Vec<usize>)> {
        if knn == 0 {
            return Err(Error::Validation("knn must be positive".into()));
        }
        if let Some(v) = points.iter().position(|p| !p.iter().all(|c| c.is_finite())) {
            return Err(Error::Validation(format!("point {v} has non-finite coordinates")));
        }
        let mut seen: HashMap<[u64; 3], usize> = HashMap::new();
        let mut unique = Vec::with_capacity(points.len());
        let mut remap = Vec::with_capacity(points.len());
        for p in points {
            // -0.0 and 0.0 coincide
            let key = [p.x + 0.0, p.y + 0.0, p.z + 0.0].map(f64::to_bits);
            let id = *seen.entry(key).or_insert_with(|| {
                unique.push(p);
                unique.len() - 1
            });
            remap.push(id);
        }
        if unique.len() < remap.len() {
            log::warn!(
                "point cloud: merged {} duplicate points",
                remap.len() - unique.len()
            );
        }
        if unique.len() < knn + 1 {
            return Err(Error::Validation(format!(
                "point cloud has {} distinct points, need at least knn + 1 = {}",
                unique.len(),
                knn + 1
            )));
        }
        Ok((PointCloud { points: unique, knn }, remap))
    }

    pub fn points(&self) -> &[Point] {
        &self.points
    }

    pub fn knn(&self) -> usize {
        self.knn
    }

    pub fn transformed(&self, rotation: &Matrix3<f64>, translation: &Point) -> PointCloud {
        PointCloud {
            points: self.points.iter().map(|p| rotation * p + translation).collect(),
            knn: self.knn,
        }
    }

    pub fn scaled(&self, s: f64) -> PointCloud {
        PointCloud {
            points: self.points.iter().map(|p| p * s).collect(),
            knn: self.knn,
        }
    }
}

#[derive(Debug, Clone)]
pub enum Geometry {
    Mesh(TriMesh),
    Cloud(PointCloud),
}

impl Geometry {
    pub fn positions(&self) -> &[Point] {
        match self {
            Geometry::Mesh(m) => m.vertices(),
            Geometry::Cloud(c) => c.points(),
        }
    }

    pub fn len(&self) -> usize {
        self.positions().len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions().is_empty()
    }

    pub fn as_mesh(&self) -> Option<&TriMesh> {
        match self {
            Geometry::Mesh(m) => Some(m),
            Geometry::Cloud(_) => None,
        }
    }

    pub fn is_mesh(&self) -> bool {
        matches!(self, Geometry::Mesh(_))
    }

    pub fn transformed(&self, rotation: &Matrix3<f64>, translation: &Point) -> Geometry {
        match self {
            Geometry::Mesh(m) => Geometry::Mesh(m.transformed(rotation, translation)),
            Geometry::Cloud(c) => Geometry::Cloud(c.transformed(rotation, translation)),
        }
    }

    pub fn scaled(&self, s: f64) -> Geometry {
        match self {
            Geometry::Mesh(m) => Geometry::Mesh(m.scaled(s)),
            Geometry::Cloud(c) => Geometry::Cloud(c.scaled(s)),
        }
    }
}

/// A mesh or point cloud with designated keypoints and its diameter.
#[derive(Debug, Clone)]
pub struct Shape {
    geometry: Geometry,
    keypoints: Vec<usize>,
    diameter: f64,
    diameter_approximate: bool,
    pub label: String,
}

impl Shape {
    /// Validates the keypoints and computes the diameter (edge-graph
    /// geodesic for meshes, Euclidean for point clouds).
    pub fn new(geometry: Geometry, keypoints: Vec<usize>, label: impl Into<String>) -> Result<Self> {
        validate_keypoints(&keypoints, geometry.len())?;
        let (diameter, diameter_approximate) = geodesics::diameter_of(&geometry)?;
        if !(diameter > 0.0) {
            return Err(Error::Validation("shape diameter must be positive".into()));
        }
        Ok(Shape {
            geometry,
            keypoints,
            diameter,
            diameter_approximate,
            label: label.into(),
        })
    }

    pub fn geometry(&self) -> &Geometry {
        &self.geometry
    }

    pub fn mesh(&self) -> Option<&TriMesh> {
        self.geometry.as_mesh()
    }

    pub fn positions(&self) -> &[Point] {
        self.geometry.positions()
    }

    pub fn keypoints(&self) -> &[usize] {
        &self.keypoints
    }

    pub fn num_keypoints(&self) -> usize {
        self.keypoints.len()
    }

    pub fn num_points(&self) -> usize {
        self.geometry.len()
    }

    pub fn diameter(&self) -> f64 {
        self.diameter
    }

    pub fn diameter_is_approximate(&self) -> bool {
        self.diameter_approximate
    }

    pub fn keypoint_positions(&self) -> Vec<Point> {
        self.keypoints.iter().map(|&k| self.positions()[k]).collect()
    }

    /// Rigid (or improper orthogonal) motion `x -> R x + t`.
    pub fn transformed(&self, rotation: &Matrix3<f64>, translation: &Point) -> Result<Shape> {
        Shape::new(
            self.geometry.transformed(rotation, translation),
            self.keypoints.clone(),
            self.label.clone(),
        )
    }

    pub fn scaled(&self, s: f64) -> Result<Shape> {
        if !(s > 0.0) {
            return Err(Error::Validation(format!("scale factor must be positive, got {s}")));
        }
        Shape::new(self.geometry.scaled(s), self.keypoints.clone(), self.label.clone())
    }

    pub fn with_keypoints(&self, keypoints: Vec<usize>) -> Result<Shape> {
        validate_keypoints(&keypoints, self.num_points())?;
        Ok(Shape {
            keypoints,
            ..self.clone()
        })
    }
}

fn validate_keypoints(keypoints: &[usize], n: usize) -> Result<()> {
    let mut seen = vec![false; n];
    for &k in keypoints {
        if k >= n {
            return Err(Error::Validation(format!(
                "keypoint index {k} out of range for {n} vertices"
            )));
        }
        if seen[k] {
            return Err(Error::Validation(format!("duplicate keypoint index {k}")));
        }
        seen[k] = true;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth;

    fn right_triangle() -> TriMesh {
        TriMesh::new(
            vec![Point::zeros(), Point::new(1.0, 0.0, 0.0), Point::new(0.0, 1.0, 0.0)],
            vec![[0, 1, 2]],
        )
        .unwrap()
    }

    #[test]
    fn face_area_of_right_triangle() {
        let m = right_triangle();
        assert_eq!(m.face_areas(), &[0.5]);
        assert!((m.scaled(3.0).face_areas()[0] - 4.5).abs() < 1e-12);
    }

    #[test]
    fn cube_faces_have_half_unit_area() {
        let cube = synth::unit_cube();
        assert_eq!(cube.num_faces(), 12);
        for &a in cube.face_areas() {
            assert!((a - 0.5).abs() < 1e-15);
        }
    }

    #[test]
    fn flat_square_normals_point_up() {
        let sq = synth::grid(2, 2, 1.0);
        for n in sq.vertex_normals().unwrap() {
            assert!((n - Point::z()).norm() < 1e-12);
        }
    }

    #[test]
    fn cube_corner_normals_are_diagonals() {
        let cube = synth::unit_cube();
        let center = Point::repeat(0.5);
        for (v, n) in cube.vertices().iter().zip(cube.vertex_normals().unwrap()) {
            let expected = (v - center).map(f64::signum) / 3f64.sqrt();
            assert!((n - expected).norm() < 1e-12, "{n:?} vs {expected:?}");
        }
    }

    #[test]
    fn out_of_range_face_is_rejected() {
        let err = TriMesh::new(
            vec![Point::zeros(), Point::x(), Point::y()],
            vec![[0, 1, 99]],
        )
        .unwrap_err();
        assert!(matches!(err, Error::Validation(_)));
    }

    #[test]
    fn degenerate_face_is_rejected() {
        let err = TriMesh::new(
            vec![Point::zeros(), Point::x(), Point::x() * 2.0],
            vec![[0, 1, 2]],
        )
        .unwrap_err();
        assert!(matches!(err, Error::Validation(_)));
    }

    #[test]
    fn cancelling_normals_are_reported() {
        // two coincident triangles with opposite winding
        let verts = vec![Point::zeros(), Point::x(), Point::y()];
        let m = TriMesh::new(verts, vec![[0, 1, 2], [0, 2, 1]]).unwrap();
        assert!(matches!(m.vertex_normals(), Err(Error::DegenerateNormal { vertex: 0 })));
    }

    #[test]
    fn duplicate_keypoints_are_rejected() {
        let m = right_triangle();
        assert!(Shape::new(Geometry::Mesh(m), vec![0, 0], "t").is_err());
    }

    #[test]
    fn point_cloud_dedups_and_remaps() {
        let pts = vec![
            Point::zeros(),
            Point::x(),
            Point::zeros(),
            Point::y(),
            Point::z(),
        ];
        let (cloud, remap) = PointCloud::new(pts, 3).unwrap();
        assert_eq!(cloud.points().len(), 4);
        assert_eq!(remap, vec![0, 1, 0, 2, 3]);
        assert!(PointCloud::new(vec![Point::zeros(), Point::x()], 3).is_err());
    }

    #[test]
    fn orientation_check_counts_flipped_faces() {
        let sq = synth::grid(3, 3, 1.0);
        assert_eq!(sq.inconsistent_orientation_edges(), 0);
        let mut faces = sq.faces().to_vec();
        faces[0] = [faces[0][0], faces[0][2], faces[0][1]];
        let bad = TriMesh::new(sq.vertices().to_vec(), faces).unwrap();
        assert!(bad.inconsistent_orientation_edges() > 0);
    }
}
