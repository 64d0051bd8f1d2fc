//! The matching objective: reconstruction, deformation and orientation terms
//! over an assignment of source keypoints to target keypoints.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geodesics::{
    candidates_from_costs, histogram_costs, keypoint_histograms, CandidateSet, DEFAULT_HISTOGRAM_BINS,
    DEFAULT_PRUNING_K,
};
use crate::mesh::Shape;
use crate::operators::{build_plbo, coordinates, DeformationOperator, ProjectedOperator};
use crate::reduced::SideModel;
use crate::spectral::{shape_features, FeatureConfig, OrientationField};

pub const DEFAULT_LAMBDA_DEF: f64 = 5.0;
pub const DEFAULT_LAMBDA_ORI: f64 = 0.025;
pub const DEFAULT_UNMATCHED_PENALTY: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Weights {
    pub lambda_def: f64,
    pub lambda_ori: f64,
}

impl Default for Weights {
    fn default() -> Self {
        Weights { lambda_def: DEFAULT_LAMBDA_DEF, lambda_ori: DEFAULT_LAMBDA_ORI }
    }
}

/// The same objective scaled by `1 / lambda_def`: reconstruction weighted by
/// `lambda_rec`, deformation by one.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReparamWeights {
    pub lambda_rec: f64,
    pub lambda_ori_prime: f64,
}

impl Weights {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_def >= 0.0 && self.lambda_ori >= 0.0) || !self.lambda_def.is_finite() || !self.lambda_ori.is_finite()
        {
            return Err(Error::Validation(format!("weights must be finite and nonnegative: {self:?}")));
        }
        Ok(())
    }

    pub fn reparameterized(&self) -> Result<ReparamWeights> {
        if !(self.lambda_def > 0.0) {
            return Err(Error::Validation("reparameterization needs lambda_def > 0".into()));
        }
        let lambda_rec = 1.0 / self.lambda_def;
        Ok(ReparamWeights { lambda_rec, lambda_ori_prime: self.lambda_ori * lambda_rec })
    }
}

impl ReparamWeights {
    pub fn to_weights(&self) -> Weights {
        Weights { lambda_def: 1.0 / self.lambda_rec, lambda_ori: self.lambda_ori_prime / self.lambda_rec }
    }
}

/// Target keypoint per source keypoint, `None` for unmatched (partial mode).
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Assignment(pub Vec<Option<usize>>);

impl Assignment {
    pub fn identity(n: usize) -> Self {
        Assignment((0..n).map(Some).collect())
    }

    pub fn from_permutation(p: &[usize]) -> Self {
        Assignment(p.iter().copied().map(Some).collect())
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn get(&self, i: usize) -> Option<usize> {
        self.0[i]
    }

    pub fn pairs(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.0.iter().enumerate().filter_map(|(i, j)| j.map(|j| (i, j)))
    }

    pub fn num_matched(&self) -> usize {
        self.0.iter().filter(|j| j.is_some()).count()
    }

    pub fn is_total(&self) -> bool {
        self.0.iter().all(Option::is_some)
    }

    /// Target-side view: source per target keypoint.
    pub fn inverse(&self, num_targets: usize) -> Assignment {
        let mut inv = vec![None; num_targets];
        for (i, j) in self.pairs() {
            inv[j] = Some(i);
        }
        Assignment(inv)
    }

    pub fn to_matrix(&self, num_targets: usize) -> DMatrix<f64> {
        let mut p = DMatrix::zeros(self.len(), num_targets);
        for (i, j) in self.pairs() {
            p[(i, j)] = 1.0;
        }
        p
    }

    /// Injectivity, range, totality (full mode) and candidate membership.
    pub fn check(&self, candidates: &CandidateSet, partial: bool) -> Result<()> {
        if self.len() != candidates.num_sources() {
            return Err(Error::InfeasibleAssignment(format!(
                "assignment covers {} sources, problem has {}",
                self.len(),
                candidates.num_sources()
            )));
        }
        let mut used = vec![false; candidates.num_targets];
        for (i, j) in self.0.iter().enumerate() {
            match j {
                None if !partial => {
                    return Err(Error::InfeasibleAssignment(format!("source {i} unmatched in full mode")))
                }
                None => {}
                Some(j) => {
                    if *j >= candidates.num_targets {
                        return Err(Error::InfeasibleAssignment(format!("target {j} out of range")));
                    }
                    if used[*j] {
                        return Err(Error::InfeasibleAssignment(format!("target {j} matched twice")));
                    }
                    used[*j] = true;
                    if !candidates.allows(i, *j) {
                        return Err(Error::InfeasibleAssignment(format!("pair ({i}, {j}) not a candidate")));
                    }
                }
            }
        }
        Ok(())
    }
}

/// `x_hat` is `|X| × 3` in the pose of Y, `y_hat` is `|Y| × 3` in the pose of X.
#[derive(Debug, Clone, PartialEq)]
pub struct Reconstruction {
    pub x_hat: DMatrix<f64>,
    pub y_hat: DMatrix<f64>,
}

impl Reconstruction {
    /// Both shapes reproduced as they are.
    pub fn identity(problem: &MatchProblem) -> Self {
        Reconstruction {
            x_hat: coordinates(problem.shape_x.positions()),
            y_hat: coordinates(problem.shape_y.positions()),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.x_hat.iter().chain(self.y_hat.iter()).all(|v| v.is_finite())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProblemOptions {
    pub k: usize,
    pub partial: bool,
    pub unmatched_penalty: f64,
    pub histogram_bins: usize,
    pub features: FeatureConfig,
}

impl Default for ProblemOptions {
    fn default() -> Self {
        ProblemOptions {
            k: DEFAULT_PRUNING_K,
            partial: false,
            unmatched_penalty: DEFAULT_UNMATCHED_PENALTY,
            histogram_bins: DEFAULT_HISTOGRAM_BINS,
            features: FeatureConfig::default(),
        }
    }
}

/// An assembled, immutable matching instance.
#[derive(Debug, Clone)]
pub struct MatchProblem {
    pub shape_x: Shape,
    pub shape_y: Shape,
    pub candidates: CandidateSet,
    /// Effective weights; `lambda_ori` is zero when orientation is unavailable.
    pub weights: Weights,
    pub partial: bool,
    pub unmatched_penalty: f64,
    pub options: ProblemOptions,
    pub orientation_x: Option<OrientationField>,
    pub orientation_y: Option<OrientationField>,
    /// L1 histogram distance between source and target keypoints.
    pub descriptor_cost: DMatrix<f64>,
    pub plbo_x: ProjectedOperator,
    pub plbo_y: ProjectedOperator,
    pub side_x: SideModel,
    pub side_y: SideModel,
}

pub fn assemble_problem(shape_x: &Shape, shape_y: &Shape, weights: Weights, k: usize, partial: bool) -> Result<MatchProblem> {
    let options = ProblemOptions { k, partial, ..ProblemOptions::default() };
    assemble_with(shape_x, shape_y, weights, &options, None)
}

/// Assembly with explicit options; `candidates` overrides pruning.
pub fn assemble_with(
    shape_x: &Shape,
    shape_y: &Shape,
    weights: Weights,
    options: &ProblemOptions,
    candidates: Option<CandidateSet>,
) -> Result<MatchProblem> {
    weights.validate()?;
    let (nx, ny) = (shape_x.num_keypoints(), shape_y.num_keypoints());
    if !options.partial && nx != ny {
        return Err(Error::KeypointCountMismatch { source_count: nx, target_count: ny });
    }
    if options.k == 0 {
        return Err(Error::Validation("pruning k must be at least 1".into()));
    }
    if !(options.unmatched_penalty >= 0.0) {
        return Err(Error::Validation("unmatched penalty must be nonnegative".into()));
    }
    let hx = keypoint_histograms(shape_x, options.histogram_bins)?;
    let hy = keypoint_histograms(shape_y, options.histogram_bins)?;
    let costs = histogram_costs(&hx, &hy);
    let candidates = match candidates {
        Some(c) => {
            if c.num_sources() != nx || c.num_targets != ny {
                return Err(Error::Validation(format!(
                    "candidate set is {}×{}, problem is {nx}×{ny}",
                    c.num_sources(),
                    c.num_targets
                )));
            }
            c
        }
        None => candidates_from_costs(&costs, options.k),
    };
    candidates.validate(false)?;
    let descriptor_cost = DMatrix::from_fn(nx, ny, |i, j| costs[i][j]);

    let mut weights = weights;
    let (orientation_x, orientation_y) = if weights.lambda_ori > 0.0 {
        if shape_x.mesh().is_some() && shape_y.mesh().is_some() {
            (
                Some(shape_features(shape_x, &options.features)?.orientation),
                Some(shape_features(shape_y, &options.features)?.orientation),
            )
        } else {
            log::warn!("orientation term needs meshes on both sides; lambda_ori set to 0");
            weights.lambda_ori = 0.0;
            (None, None)
        }
    } else {
        (None, None)
    };

    let plbo_x = build_plbo(shape_x)?;
    let plbo_y = build_plbo(shape_y)?;
    let side_x = SideModel::new(&plbo_x, shape_x.keypoints())?;
    let side_y = SideModel::new(&plbo_y, shape_y.keypoints())?;
    Ok(MatchProblem {
        shape_x: shape_x.clone(),
        shape_y: shape_y.clone(),
        candidates,
        weights,
        partial: options.partial,
        unmatched_penalty: options.unmatched_penalty,
        options: options.clone(),
        orientation_x,
        orientation_y,
        descriptor_cost,
        plbo_x,
        plbo_y,
        side_x,
        side_y,
    })
}

/// Breakdown of the objective at one point.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveTerms {
    pub rec: f64,
    pub def: f64,
    pub ori: f64,
    pub unmatched: usize,
    pub total: f64,
}

impl MatchProblem {
    pub fn n_x(&self) -> usize {
        self.shape_x.num_keypoints()
    }

    pub fn n_y(&self) -> usize {
        self.shape_y.num_keypoints()
    }

    pub fn d_x(&self) -> f64 {
        self.shape_x.diameter()
    }

    pub fn d_y(&self) -> f64 {
        self.shape_y.diameter()
    }

    /// Orientation values at the source keypoints.
    pub fn h_i(&self) -> Option<Vec<f64>> {
        self.orientation_x
            .as_ref()
            .map(|o| self.shape_x.keypoints().iter().map(|&k| o.h[k]).collect())
    }

    pub fn h_j(&self) -> Option<Vec<f64>> {
        self.orientation_y
            .as_ref()
            .map(|o| self.shape_y.keypoints().iter().map(|&k| o.h[k]).collect())
    }

    /// The problem with X and Y exchanged; assignments map through
    /// [`Assignment::inverse`].
    pub fn swapped(&self) -> MatchProblem {
        MatchProblem {
            shape_x: self.shape_y.clone(),
            shape_y: self.shape_x.clone(),
            candidates: self.candidates.transposed(),
            weights: self.weights,
            partial: self.partial,
            unmatched_penalty: self.unmatched_penalty,
            options: self.options.clone(),
            orientation_x: self.orientation_y.clone(),
            orientation_y: self.orientation_x.clone(),
            descriptor_cost: self.descriptor_cost.transpose(),
            plbo_x: self.plbo_y.clone(),
            plbo_y: self.plbo_x.clone(),
            side_x: self.side_y.clone(),
            side_y: self.side_x.clone(),
        }
    }

    /// Same geometry and features with other weights.
    pub fn with_weights(&self, weights: Weights) -> Result<MatchProblem> {
        weights.validate()?;
        if weights.lambda_ori > 0.0 && self.orientation_x.is_none() {
            return Err(Error::Validation("problem was assembled without orientation fields".into()));
        }
        let mut p = self.clone();
        p.weights = weights;
        Ok(p)
    }

    pub fn with_candidates(&self, candidates: CandidateSet) -> Result<MatchProblem> {
        if candidates.num_sources() != self.n_x() || candidates.num_targets != self.n_y() {
            return Err(Error::Validation("candidate set does not fit the problem".into()));
        }
        candidates.validate(false)?;
        let mut p = self.clone();
        p.candidates = candidates;
        Ok(p)
    }
}

fn check_reconstruction(problem: &MatchProblem, r: &Reconstruction) -> Result<()> {
    let (nx, ny) = (problem.shape_x.num_points(), problem.shape_y.num_points());
    if r.x_hat.shape() != (nx, 3) || r.y_hat.shape() != (ny, 3) {
        return Err(Error::Validation(format!(
            "reconstruction shapes {:?}/{:?}, expected ({nx}, 3)/({ny}, 3)",
            r.x_hat.shape(),
            r.y_hat.shape()
        )));
    }
    Ok(())
}

pub fn eval_rec(problem: &MatchProblem, assignment: &Assignment, reconstruction: &Reconstruction) -> Result<f64> {
    assignment.check(&problem.candidates, problem.partial)?;
    check_reconstruction(problem, reconstruction)?;
    let m = assignment.num_matched();
    if m == 0 {
        return Ok(0.0);
    }
    let kx = problem.shape_x.keypoints();
    let ky = problem.shape_y.keypoints();
    let px = problem.shape_x.positions();
    let py = problem.shape_y.positions();
    let (mut sx, mut sy) = (0.0, 0.0);
    for (i, j) in assignment.pairs() {
        for c in 0..3 {
            sx += (reconstruction.x_hat[(kx[i], c)] - py[ky[j]][c]).powi(2);
            sy += (reconstruction.y_hat[(ky[j], c)] - px[kx[i]][c]).powi(2);
        }
    }
    let m = m as f64;
    Ok(sx.sqrt() / (m * problem.d_y()) + sy.sqrt() / (m * problem.d_x()))
}

pub fn eval_def(problem: &MatchProblem, reconstruction: &Reconstruction) -> Result<f64> {
    check_reconstruction(problem, reconstruction)?;
    let lx = problem.plbo_x.apply(&reconstruction.x_hat).norm();
    let ly = problem.plbo_y.apply(&reconstruction.y_hat).norm();
    let (nx, ny) = (problem.shape_x.num_points() as f64, problem.shape_y.num_points() as f64);
    Ok(lx / (nx * problem.d_y()) + ly / (ny * problem.d_x()))
}

pub fn eval_ori(problem: &MatchProblem, assignment: &Assignment) -> Result<f64> {
    assignment.check(&problem.candidates, problem.partial)?;
    let (Some(hi), Some(hj)) = (problem.h_i(), problem.h_j()) else {
        return Ok(0.0);
    };
    let m = assignment.num_matched();
    if m == 0 {
        return Ok(0.0);
    }
    let s: f64 = assignment.pairs().map(|(i, j)| (hi[i] - hj[j]).powi(2)).sum();
    let norm = if problem.partial { m } else { problem.n_x() };
    Ok(s.sqrt() / norm as f64)
}

pub fn eval_terms(problem: &MatchProblem, assignment: &Assignment, reconstruction: &Reconstruction) -> Result<ObjectiveTerms> {
    let rec = eval_rec(problem, assignment, reconstruction)?;
    let def = eval_def(problem, reconstruction)?;
    let ori = eval_ori(problem, assignment)?;
    let unmatched = if problem.partial {
        (problem.n_x() - assignment.num_matched()) + (problem.n_y() - assignment.num_matched())
    } else {
        0
    };
    let w = problem.weights;
    let total = rec + w.lambda_def * def + w.lambda_ori * ori + problem.unmatched_penalty * unmatched as f64;
    Ok(ObjectiveTerms { rec, def, ori, unmatched, total })
}

pub fn eval_objective(problem: &MatchProblem, assignment: &Assignment, reconstruction: &Reconstruction) -> Result<f64> {
    Ok(eval_terms(problem, assignment, reconstruction)?.total)
}

/// The objective in the `(lambda_rec, lambda_ori')` form; equals
/// [`eval_objective`] divided by `lambda_def`.
pub fn eval_objective_reparam(
    problem: &MatchProblem,
    reparam: ReparamWeights,
    assignment: &Assignment,
    reconstruction: &Reconstruction,
) -> Result<f64> {
    let t = eval_terms(problem, assignment, reconstruction)?;
    Ok(reparam.lambda_rec * t.rec
        + t.def
        + reparam.lambda_ori_prime * t.ori
        + reparam.lambda_rec * problem.unmatched_penalty * t.unmatched as f64)
}

/// Where a shape came from, for reproducible instance files.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShapeSource {
    pub path: String,
    pub keypoints_path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProblemInstance {
    pub shape_x: ShapeSource,
    pub shape_y: ShapeSource,
    pub candidates: CandidateSet,
    pub weights: Weights,
    pub options: ProblemOptions,
}

impl MatchProblem {
    pub fn instance(&self, shape_x: ShapeSource, shape_y: ShapeSource) -> ProblemInstance {
        ProblemInstance {
            shape_x,
            shape_y,
            candidates: self.candidates.clone(),
            weights: self.weights,
            options: self.options.clone(),
        }
    }
}

impl ProblemInstance {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth;

    #[test]
    fn reparameterization_roundtrip() {
        let w = Weights::default();
        let r = w.reparameterized().unwrap();
        assert_eq!(r.lambda_rec, 0.2);
        assert!((r.lambda_ori_prime - 0.005).abs() < 1e-18);
        let back = r.to_weights();
        assert!((back.lambda_def - 5.0).abs() < 1e-12 && (back.lambda_ori - 0.025).abs() < 1e-15);
        assert!(Weights { lambda_def: 0.0, lambda_ori: 1.0 }.reparameterized().is_err());
    }

    #[test]
    fn assignment_checks() {
        let c = CandidateSet { lists: vec![vec![0, 1], vec![1]], num_targets: 2 };
        assert!(Assignment(vec![Some(0), Some(1)]).check(&c, false).is_ok());
        assert!(Assignment(vec![Some(1), Some(1)]).check(&c, false).is_err());
        assert!(Assignment(vec![Some(1), Some(0)]).check(&c, false).is_err());
        assert!(Assignment(vec![None, Some(1)]).check(&c, false).is_err());
        assert!(Assignment(vec![None, Some(1)]).check(&c, true).is_ok());
        assert_eq!(Assignment(vec![None, Some(0)]).inverse(3).0, vec![Some(1), None, None]);
    }

    #[test]
    fn count_mismatch_rejected_in_full_mode() {
        let x = synth::keypointed_blob(1, 3, 1);
        let y = synth::keypointed_blob(1, 5, 2);
        let err = assemble_problem(&x, &y, Weights::default(), 11, false).unwrap_err();
        assert!(matches!(err, Error::KeypointCountMismatch { source_count: 3, target_count: 5 }));
        assert!(assemble_problem(&x, &y, Weights::default(), 11, true).is_ok());
    }
}
