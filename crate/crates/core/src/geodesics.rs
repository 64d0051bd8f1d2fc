//! Edge-graph geodesics, shape diameter, geodesic histograms and
//! histogram-based candidate pruning.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mesh::{Geometry, Point, Shape};

/// Above this many points the diameter is estimated from sampled sources.
pub const EXACT_DIAMETER_LIMIT: usize = 5000;
pub const APPROX_DIAMETER_SOURCES: usize = 64;
pub const DEFAULT_HISTOGRAM_BINS: usize = 32;
pub const DEFAULT_PRUNING_K: usize = 11;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Metric {
    EdgeGraph,
    Euclidean,
}

#[derive(Debug, Clone)]
pub struct GeodesicTable {
    pub sources: Vec<usize>,
    pub distances: Vec<Vec<f64>>,
    pub metric: Metric,
}

impl GeodesicTable {
    pub fn row(&self, k: usize) -> &[f64] {
        &self.distances[k]
    }
}

/// Weighted adjacency of the vertex-edge graph.
#[derive(Debug, Clone)]
pub struct EdgeGraph {
    adjacency: Vec<Vec<(usize, f64)>>,
}

impl EdgeGraph {
    pub fn from_mesh(mesh: &crate::mesh::TriMesh) -> Self {
        let verts = mesh.vertices();
        let adjacency = mesh
            .vertex_adjacency()
            .into_iter()
            .enumerate()
            .map(|(v, nbrs)| {
                nbrs.into_iter()
                    .map(|u| (u, (verts[u] - verts[v]).norm()))
                    .collect()
            })
            .collect();
        EdgeGraph { adjacency }
    }

    pub fn len(&self) -> usize {
        self.adjacency.len()
    }

    pub fn is_empty(&self) -> bool {
        self.adjacency.is_empty()
    }

    /// Single-source shortest paths; unreachable vertices get `+inf`.
    pub fn dijkstra(&self, source: usize) -> Vec<f64> {
        #[derive(PartialEq)]
        struct Entry(f64, usize);
        impl Eq for Entry {}
        impl PartialOrd for Entry {
            fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
                Some(self.cmp(other))
            }
        }
        impl Ord for Entry {
            fn cmp(&self, other: &Self) -> Ordering {
                // min-heap on distance, then index
                other
                    .0
                    .total_cmp(&self.0)
                    .then_with(|| other.1.cmp(&self.1))
            }
        }

        let mut dist = vec![f64::INFINITY; self.adjacency.len()];
        let mut heap = BinaryHeap::new();
        dist[source] = 0.0;
        heap.push(Entry(0.0, source));
        while let Some(Entry(d, v)) = heap.pop() {
            if d > dist[v] {
                continue;
            }
            for &(u, w) in &self.adjacency[v] {
                let nd = d + w;
                if nd < dist[u] {
                    dist[u] = nd;
                    heap.push(Entry(nd, u));
                }
            }
        }
        dist
    }
}

fn euclidean_row(points: &[Point], source: usize) -> Vec<f64> {
    let p = points[source];
    points.iter().map(|q| (q - p).norm()).collect()
}

enum DistanceSource<'a> {
    Graph(EdgeGraph),
    Points(&'a [Point]),
}

impl DistanceSource<'_> {
    fn new(geometry: &Geometry) -> DistanceSource<'_> {
        match geometry {
            Geometry::Mesh(m) => DistanceSource::Graph(EdgeGraph::from_mesh(m)),
            Geometry::Cloud(c) => DistanceSource::Points(c.points()),
        }
    }

    fn row(&self, source: usize) -> Vec<f64> {
        match self {
            DistanceSource::Graph(g) => g.dijkstra(source),
            DistanceSource::Points(p) => euclidean_row(p, source),
        }
    }

    fn metric(&self) -> Metric {
        match self {
            DistanceSource::Graph(_) => Metric::EdgeGraph,
            DistanceSource::Points(_) => Metric::Euclidean,
        }
    }
}

/// Distances from each source to every vertex. Rows are computed in
/// parallel and returned in source order.
pub fn geodesic_distances(shape: &Shape, sources: &[usize]) -> Result<GeodesicTable> {
    distances_on(shape.geometry(), sources)
}

pub fn distances_on(geometry: &Geometry, sources: &[usize]) -> Result<GeodesicTable> {
    let n = geometry.len();
    if let Some(&s) = sources.iter().find(|&&s| s >= n) {
        return Err(Error::Validation(format!("source {s} out of range for {n} vertices")));
    }
    let ds = DistanceSource::new(geometry);
    let distances: Vec<Vec<f64>> = sources.par_iter().map(|&s| ds.row(s)).collect();
    for (row, &s) in distances.iter().zip(sources) {
        let unreachable = row.iter().filter(|d| d.is_infinite()).count();
        if unreachable > 0 {
            log::warn!("{unreachable} vertices unreachable from vertex {s}");
        }
    }
    Ok(GeodesicTable {
        sources: sources.to_vec(),
        distances,
        metric: ds.metric(),
    })
}

fn finite_max(row: &[f64]) -> f64 {
    row.iter()
        .copied()
        .filter(|d| d.is_finite())
        .fold(0.0, f64::max)
}

/// Largest finite pairwise distance. Exact up to [`EXACT_DIAMETER_LIMIT`]
/// points, otherwise the maximum over farthest-point-sampled sources; the
/// flag reports which.
pub fn diameter_of(geometry: &Geometry) -> Result<(f64, bool)> {
    let n = geometry.len();
    if n < 2 {
        return Err(Error::Validation("a shape needs at least two points".into()));
    }
    let ds = DistanceSource::new(geometry);
    if n <= EXACT_DIAMETER_LIMIT {
        let d = (0..n)
            .into_par_iter()
            .map(|s| finite_max(&ds.row(s)))
            .reduce(|| 0.0, f64::max);
        Ok((d, false))
    } else {
        let sources = farthest_point_sampling_with(&ds, n, APPROX_DIAMETER_SOURCES, 0);
        let d = sources
            .par_iter()
            .map(|&s| finite_max(&ds.row(s)))
            .reduce(|| 0.0, f64::max);
        Ok((d, true))
    }
}

pub fn shape_diameter(shape: &Shape) -> f64 {
    shape.diameter()
}

/// Greedy farthest-point sampling starting from `start`.
pub fn farthest_point_sampling(geometry: &Geometry, count: usize, start: usize) -> Vec<usize> {
    let ds = DistanceSource::new(geometry);
    farthest_point_sampling_with(&ds, geometry.len(), count, start)
}

fn farthest_point_sampling_with(ds: &DistanceSource, n: usize, count: usize, start: usize) -> Vec<usize> {
    let count = count.min(n);
    let mut chosen = Vec::with_capacity(count);
    if count == 0 {
        return chosen;
    }
    let mut min_dist = vec![f64::INFINITY; n];
    let mut next = start;
    while chosen.len() < count {
        chosen.push(next);
        for (m, d) in min_dist.iter_mut().zip(ds.row(next)) {
            *m = m.min(d);
        }
        // unreachable vertices are never picked
        let mut best = None;
        for (v, &d) in min_dist.iter().enumerate() {
            if d.is_finite() && d > 0.0 && best.map_or(true, |(_, bd)| d > bd) {
                best = Some((v, d));
            }
        }
        match best {
            Some((v, _)) => next = v,
            None => break,
        }
    }
    chosen
}

/// Equal-width histogram of `row` over `[0, diameter]`, normalized to sum 1.
/// Non-finite entries are skipped.
pub fn histogram_of_row(row: &[f64], diameter: f64, bins: usize) -> Vec<f64> {
    assert!(bins > 0);
    let mut h = vec![0.0; bins];
    let mut count = 0usize;
    for &d in row {
        if !d.is_finite() {
            continue;
        }
        let b = ((d / diameter) * bins as f64).floor();
        let b = if b.is_nan() || b < 0.0 { 0 } else { (b as usize).min(bins - 1) };
        h[b] += 1.0;
        count += 1;
    }
    if count > 0 {
        let inv = 1.0 / count as f64;
        h.iter_mut().for_each(|x| *x *= inv);
    }
    h
}

pub fn geodesic_histogram(shape: &Shape, vertex: usize, bins: usize) -> Result<Vec<f64>> {
    if bins == 0 {
        return Err(Error::Validation("histogram needs at least one bin".into()));
    }
    let table = geodesic_distances(shape, &[vertex])?;
    Ok(histogram_of_row(table.row(0), shape.diameter(), bins))
}

/// Histograms of all keypoints of a shape.
pub fn keypoint_histograms(shape: &Shape, bins: usize) -> Result<Vec<Vec<f64>>> {
    let table = geodesic_distances(shape, shape.keypoints())?;
    Ok(table
        .distances
        .iter()
        .map(|row| histogram_of_row(row, shape.diameter(), bins))
        .collect())
}

/// Allowed targets per source keypoint (positions into the target keypoint
/// list), each list sorted ascending.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CandidateSet {
    pub lists: Vec<Vec<usize>>,
    pub num_targets: usize,
}

impl CandidateSet {
    pub fn all(num_sources: usize, num_targets: usize) -> Self {
        CandidateSet {
            lists: vec![(0..num_targets).collect(); num_sources],
            num_targets,
        }
    }

    pub fn num_sources(&self) -> usize {
        self.lists.len()
    }

    pub fn allows(&self, i: usize, j: usize) -> bool {
        self.lists[i].binary_search(&j).is_ok()
    }

    /// The same pairs seen from the target side.
    pub fn transposed(&self) -> CandidateSet {
        let mut lists = vec![Vec::new(); self.num_targets];
        for (i, list) in self.lists.iter().enumerate() {
            for &j in list {
                lists[j].push(i);
            }
        }
        CandidateSet { lists, num_targets: self.lists.len() }
    }

    pub fn num_pairs(&self) -> usize {
        self.lists.iter().map(Vec::len).sum()
    }

    pub fn validate(&self, require_nonempty: bool) -> Result<()> {
        for (i, list) in self.lists.iter().enumerate() {
            if require_nonempty && list.is_empty() {
                return Err(Error::Validation(format!("candidate list of keypoint {i} is empty")));
            }
            if list.windows(2).any(|w| w[0] >= w[1]) {
                return Err(Error::Validation(format!("candidate list of keypoint {i} is not sorted")));
            }
            if let Some(&j) = list.iter().find(|&&j| j >= self.num_targets) {
                return Err(Error::Validation(format!(
                    "candidate {j} of keypoint {i} out of range ({} targets)",
                    self.num_targets
                )));
            }
        }
        Ok(())
    }
}

pub fn l1_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum()
}

/// Keeps, for every source keypoint, the `k` target keypoints whose geodesic
/// histograms are closest in L1 (ties broken by ascending target index).
pub fn prune_candidates(source: &Shape, target: &Shape, k: usize) -> Result<CandidateSet> {
    prune_candidates_with_bins(source, target, k, DEFAULT_HISTOGRAM_BINS)
}

pub fn prune_candidates_with_bins(source: &Shape, target: &Shape, k: usize, bins: usize) -> Result<CandidateSet> {
    if k == 0 {
        return Err(Error::Validation("pruning k must be at least 1".into()));
    }
    let nt = target.num_keypoints();
    if k >= nt {
        return Ok(CandidateSet::all(source.num_keypoints(), nt));
    }
    let hs = keypoint_histograms(source, bins)?;
    let ht = keypoint_histograms(target, bins)?;
    Ok(candidates_from_costs(&histogram_costs(&hs, &ht), k))
}

/// `cost[i][j]` = L1 distance between source histogram `i` and target `j`.
pub fn histogram_costs(source: &[Vec<f64>], target: &[Vec<f64>]) -> Vec<Vec<f64>> {
    source
        .iter()
        .map(|h| target.iter().map(|g| l1_distance(h, g)).collect())
        .collect()
}

/// The `k` cheapest targets per row, ties by ascending target index.
pub fn candidates_from_costs(costs: &[Vec<f64>], k: usize) -> CandidateSet {
    let nt = costs.first().map_or(0, |r| r.len());
    let lists = costs
        .iter()
        .map(|row| {
            let mut order: Vec<(f64, usize)> = row.iter().copied().zip(0..).collect();
            order.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            let mut keep: Vec<usize> = order.into_iter().take(k).map(|(_, j)| j).collect();
            keep.sort_unstable();
            keep
        })
        .collect();
    CandidateSet { lists, num_targets: nt }
}
