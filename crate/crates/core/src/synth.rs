//! Procedural shapes for tests, demos and invariance sweeps.
//!
//! Everything here is deterministic given its arguments (seeded RNG).

use std::collections::HashMap;

use nalgebra::{Matrix3, Rotation3, Unit, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::geodesics::farthest_point_sampling;
use crate::mesh::{Geometry, Point, PointCloud, Shape, TriMesh};

/// Regular tetrahedron with unit edges, outward counterclockwise faces.
pub fn tetrahedron() -> TriMesh {
    // alternate corners of a cube with edge 1/sqrt(2)
    let a = 0.5 / 2f64.sqrt();
    let verts = vec![
        Point::new(a, a, a),
        Point::new(a, -a, -a),
        Point::new(-a, a, -a),
        Point::new(-a, -a, a),
    ];
    let mut faces = vec![[0, 1, 2], [0, 3, 1], [0, 2, 3], [1, 3, 2]];
    orient_outward(&verts, &mut faces);
    TriMesh::new(verts, faces).expect("tetrahedron is valid")
}

/// Unit cube `[0,1]^3`; every square is split along the diagonal through its
/// even-parity corners, so each corner touches equal area on its three faces.
pub fn unit_cube() -> TriMesh {
    let mut verts = Vec::with_capacity(8);
    for i in 0..8usize {
        verts.push(Point::new((i & 1) as f64, ((i >> 1) & 1) as f64, ((i >> 2) & 1) as f64));
    }
    let idx = |x: usize, y: usize, z: usize| x | (y << 1) | (z << 2);
    let parity = |i: usize| (i.count_ones() % 2) as usize;
    let mut faces = Vec::with_capacity(12);
    for axis in 0..3 {
        for side in 0..2 {
            let mut quad = Vec::with_capacity(4);
            for (u, w) in [(0, 0), (1, 0), (1, 1), (0, 1)] {
                let mut c = [0usize; 3];
                c[axis] = side;
                c[(axis + 1) % 3] = u;
                c[(axis + 2) % 3] = w;
                quad.push(idx(c[0], c[1], c[2]));
            }
            // split along the diagonal joining the two even corners
            let start = if parity(quad[0]) == 0 { 0 } else { 1 };
            let q = |k: usize| quad[(start + k) % 4];
            faces.push([q(0), q(1), q(2)]);
            faces.push([q(0), q(2), q(3)]);
        }
    }
    orient_outward(&verts, &mut faces);
    TriMesh::new(verts, faces).expect("cube is valid")
}

// Flips faces of a convex, origin-star-shaped-about-centroid mesh to face away
// from the centroid.
fn orient_outward(verts: &[Point], faces: &mut [[usize; 3]]) {
    let c: Point = verts.iter().sum::<Point>() / verts.len() as f64;
    for f in faces.iter_mut() {
        let n = (verts[f[1]] - verts[f[0]]).cross(&(verts[f[2]] - verts[f[0]]));
        let m = (verts[f[0]] + verts[f[1]] + verts[f[2]]) / 3.0 - c;
        if n.dot(&m) < 0.0 {
            f.swap(1, 2);
        }
    }
}

/// Flat `cols x rows` vertex grid in the `z = 0` plane spanning `size` in x,
/// counterclockwise (normal `+z`). Quads are split along the same diagonal
/// direction, so the grid is symmetric under `x <-> y` when square.
pub fn grid(cols: usize, rows: usize, size: f64) -> TriMesh {
    assert!(cols >= 2 && rows >= 2);
    let h = size / (cols - 1) as f64;
    let mut verts = Vec::with_capacity(cols * rows);
    for r in 0..rows {
        for c in 0..cols {
            verts.push(Point::new(c as f64 * h, r as f64 * h, 0.0));
        }
    }
    let id = |c: usize, r: usize| r * cols + c;
    let mut faces = Vec::new();
    for r in 0..rows - 1 {
        for c in 0..cols - 1 {
            faces.push([id(c, r), id(c + 1, r), id(c + 1, r + 1)]);
            faces.push([id(c, r), id(c + 1, r + 1), id(c, r + 1)]);
        }
    }
    TriMesh::new(verts, faces).expect("grid is valid")
}

/// Unit icosphere obtained by `subdivisions` rounds of 1:4 splitting.
pub fn icosphere(subdivisions: usize) -> TriMesh {
    let t = (1.0 + 5f64.sqrt()) / 2.0;
    let mut verts: Vec<Point> = [
        (-1.0, t, 0.0),
        (1.0, t, 0.0),
        (-1.0, -t, 0.0),
        (1.0, -t, 0.0),
        (0.0, -1.0, t),
        (0.0, 1.0, t),
        (0.0, -1.0, -t),
        (0.0, 1.0, -t),
        (t, 0.0, -1.0),
        (t, 0.0, 1.0),
        (-t, 0.0, -1.0),
        (-t, 0.0, 1.0),
    ]
    .iter()
    .map(|&(x, y, z)| Point::new(x, y, z).normalize())
    .collect();
    let mut faces: Vec<[usize; 3]> = vec![
        [0, 11, 5],
        [0, 5, 1],
        [0, 1, 7],
        [0, 7, 10],
        [0, 10, 11],
        [1, 5, 9],
        [5, 11, 4],
        [11, 10, 2],
        [10, 7, 6],
        [7, 1, 8],
        [3, 9, 4],
        [3, 4, 2],
        [3, 2, 6],
        [3, 6, 8],
        [3, 8, 9],
        [4, 9, 5],
        [2, 4, 11],
        [6, 2, 10],
        [8, 6, 7],
        [9, 8, 1],
    ];
    for _ in 0..subdivisions {
        let mut mid: HashMap<(usize, usize), usize> = HashMap::new();
        let mut midpoint = |a: usize, b: usize, verts: &mut Vec<Point>| {
            *mid.entry((a.min(b), a.max(b))).or_insert_with(|| {
                verts.push(((verts[a] + verts[b]) / 2.0).normalize());
                verts.len() - 1
            })
        };
        let mut next = Vec::with_capacity(faces.len() * 4);
        for [a, b, c] in faces {
            let ab = midpoint(a, b, &mut verts);
            let bc = midpoint(b, c, &mut verts);
            let ca = midpoint(c, a, &mut verts);
            next.extend([[a, ab, ca], [b, bc, ab], [c, ca, bc], [ab, bc, ca]]);
        }
        faces = next;
    }
    orient_outward(&verts, &mut faces);
    TriMesh::new(verts, faces).expect("icosphere is valid")
}

/// Icosphere with smooth random radial bumps and an axis stretch; generically
/// has no symmetries.
pub fn blob(subdivisions: usize, seed: u64) -> TriMesh {
    let sphere = icosphere(subdivisions);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let bumps: Vec<(Point, f64, f64)> = (0..6)
        .map(|_| {
            let c = random_unit(&mut rng);
            let amp = rng.random_range(0.08..0.25);
            let width = rng.random_range(0.25..0.6);
            (c, amp, width)
        })
        .collect();
    let stretch = Vector3::new(1.6, 1.0, 0.8);
    let verts = sphere
        .vertices()
        .iter()
        .map(|p| {
            let r: f64 = 1.0
                + bumps
                    .iter()
                    .map(|(c, a, w)| a * (-(p - c).norm_squared() / (w * w)).exp())
                    .sum::<f64>();
            (p * r).component_mul(&stretch)
        })
        .collect();
    TriMesh::new(verts, sphere.faces().to_vec()).expect("blob is valid")
}

/// Blob shape with `n` keypoints chosen by farthest-point sampling.
pub fn keypointed_blob(subdivisions: usize, n: usize, seed: u64) -> Shape {
    let geometry = Geometry::Mesh(blob(subdivisions, seed));
    let kp = farthest_point_sampling(&geometry, n, 0);
    Shape::new(geometry, kp, format!("blob-{seed}")).expect("blob shape is valid")
}

/// Closed capped cylinder along x: `segments` rings of `ring` vertices over
/// `[0, length]` with radius `radius`, plus one apex per cap.
pub fn bar(segments: usize, ring: usize, length: f64, radius: f64) -> TriMesh {
    assert!(segments >= 2 && ring >= 3);
    let mut verts = Vec::with_capacity(segments * ring + 2);
    for s in 0..segments {
        let x = length * s as f64 / (segments - 1) as f64;
        for k in 0..ring {
            let a = 2.0 * std::f64::consts::PI * k as f64 / ring as f64;
            verts.push(Point::new(x, radius * a.cos(), radius * a.sin()));
        }
    }
    let cap0 = verts.len();
    verts.push(Point::new(-0.5 * radius, 0.0, 0.0));
    let cap1 = verts.len();
    verts.push(Point::new(length + 0.5 * radius, 0.0, 0.0));
    let id = |s: usize, k: usize| s * ring + (k % ring);
    let mut faces = Vec::new();
    for s in 0..segments - 1 {
        for k in 0..ring {
            faces.push([id(s, k), id(s, k + 1), id(s + 1, k + 1)]);
            faces.push([id(s, k), id(s + 1, k + 1), id(s + 1, k)]);
        }
    }
    for k in 0..ring {
        faces.push([cap0, id(0, k + 1), id(0, k)]);
        faces.push([cap1, id(segments - 1, k), id(segments - 1, k + 1)]);
    }
    let mesh = TriMesh::new(verts, faces).expect("bar is valid");
    debug_assert!(signed_volume(&mesh) > 0.0);
    mesh
}

/// Bends points along x onto a circular arc of curvature `curvature` in the
/// x-y plane; arc length along the neutral axis `y = 0` is preserved.
pub fn bend(points: &[Point], curvature: f64) -> Vec<Point> {
    if curvature == 0.0 {
        return points.to_vec();
    }
    let r0 = 1.0 / curvature;
    points
        .iter()
        .map(|p| {
            let theta = p.x * curvature;
            let r = r0 - p.y;
            Point::new(r * theta.sin(), r0 - r * theta.cos(), p.z)
        })
        .collect()
}

pub fn signed_volume(mesh: &TriMesh) -> f64 {
    let v = mesh.vertices();
    mesh.faces()
        .iter()
        .map(|f| v[f[0]].dot(&v[f[1]].cross(&v[f[2]])) / 6.0)
        .sum()
}

pub fn random_unit<R: Rng>(rng: &mut R) -> Point {
    loop {
        let p = Point::new(
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        );
        let n = p.norm();
        if n > 1e-3 && n <= 1.0 {
            return p / n;
        }
    }
}

pub fn random_rotation<R: Rng>(rng: &mut R) -> Matrix3<f64> {
    let axis = Unit::new_normalize(random_unit(rng));
    let angle = rng.random_range(-std::f64::consts::PI..std::f64::consts::PI);
    *Rotation3::from_axis_angle(&axis, angle).matrix()
}

/// Random element of O(3); a reflection with probability 1/2.
pub fn random_orthogonal<R: Rng>(rng: &mut R) -> Matrix3<f64> {
    let r = random_rotation(rng);
    if rng.random_bool(0.5) {
        r * Matrix3::from_diagonal(&Vector3::new(-1.0, 1.0, 1.0))
    } else {
        r
    }
}

pub fn random_translation<R: Rng>(rng: &mut R, scale: f64) -> Point {
    Point::new(
        rng.random_range(-scale..scale),
        rng.random_range(-scale..scale),
        rng.random_range(-scale..scale),
    )
}

/// A source shape, a near-isometrically deformed copy with shuffled keypoint
/// order, and the ground truth `gt[i] = position of source keypoint i in the
/// target keypoint list`.
#[derive(Debug, Clone)]
pub struct ShapePair {
    pub source: Shape,
    pub target: Shape,
    pub ground_truth: Vec<usize>,
}

/// Deformed pair built from a blob: bend, small vertex noise, random rigid
/// motion and keypoint shuffling.
pub fn near_isometric_pair(subdivisions: usize, n: usize, seed: u64, noise: f64) -> ShapePair {
    let source = keypointed_blob(subdivisions, n, seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ 0x5eed);
    let mesh = source.mesh().unwrap();
    let curvature = rng.random_range(0.02..0.05);
    let mut pts = bend(mesh.vertices(), curvature);
    let diam = source.diameter();
    for p in pts.iter_mut() {
        *p += random_unit(&mut rng) * noise * diam * rng.random_range(0.0..1.0);
    }
    let rot = random_rotation(&mut rng);
    let t = random_translation(&mut rng, 2.0);
    let pts: Vec<Point> = pts.iter().map(|p| rot * p + t).collect();
    let target_mesh = mesh.with_vertices(pts).expect("deformed blob is valid");

    let mut order: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.random_range(0..=i);
        order.swap(i, j);
    }
    // target list position p holds source keypoint order[p]
    let kp: Vec<usize> = order.iter().map(|&i| source.keypoints()[i]).collect();
    let mut ground_truth = vec![0; n];
    for (p, &i) in order.iter().enumerate() {
        ground_truth[i] = p;
    }
    let target = Shape::new(Geometry::Mesh(target_mesh), kp, format!("blob-{seed}-deformed"))
        .expect("deformed shape is valid");
    ShapePair {
        source,
        target,
        ground_truth,
    }
}

/// Straight bar and its bent copy with shared connectivity; keypoints are
/// the same vertex indices in the same order.
pub fn bent_bar_pair(n_keypoints: usize, curvature: f64) -> ShapePair {
    let mesh = bar(24, 10, 6.0, 0.5);
    let geometry = Geometry::Mesh(mesh.clone());
    let kp = farthest_point_sampling(&geometry, n_keypoints, 0);
    let source = Shape::new(geometry, kp.clone(), "bar").expect("bar is valid");
    let bent = mesh.with_vertices(bend(mesh.vertices(), curvature)).expect("bent bar is valid");
    let target = Shape::new(Geometry::Mesh(bent), kp, "bar-bent").expect("bent bar is valid");
    ShapePair {
        source,
        target,
        ground_truth: (0..n_keypoints).collect(),
    }
}

/// Random points sampled on the surface of a blob, as a point cloud shape.
pub fn blob_cloud(subdivisions: usize, n: usize, seed: u64, knn: usize) -> Shape {
    let mesh = blob(subdivisions, seed);
    let (cloud, _) = PointCloud::new(mesh.vertices().to_vec(), knn).expect("cloud is valid");
    let geometry = Geometry::Cloud(cloud);
    let kp = farthest_point_sampling(&geometry, n, 0);
    Shape::new(geometry, kp, format!("cloud-{seed}")).expect("cloud shape is valid")
}
