//! Correspondence metrics and experiment harnesses.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geodesics::{geodesic_distances, CandidateSet};
use crate::mesh::Shape;
use crate::model::{assemble_with, Assignment, ProblemOptions, Reconstruction, Weights};
use crate::operators::{stiffness_for, StiffnessOperator};
use crate::reduced::SideModel;
use crate::solver::{solve, solve_continuous, MatchSolution, SolveStatus, SolverConfig};

pub const DEFAULT_PCK_SAMPLES: usize = 30;
/// Error assigned to a source keypoint left unmatched.
pub const UNMATCHED_ERROR: f64 = 1.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PckCurve {
    pub thresholds: Vec<f64>,
    pub fractions: Vec<f64>,
    pub auc: f64,
}

impl PckCurve {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("threshold,fraction\n");
        for (t, f) in self.thresholds.iter().zip(&self.fractions) {
            out.push_str(&format!("{t},{f}\n"));
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub errors: Vec<f64>,
    pub mean_error: f64,
    pub pck: PckCurve,
    pub rel_gap: f64,
    pub status: SolveStatus,
    pub runtime_secs: f64,
}

/// `count` uniform thresholds on `[0, 1]`.
pub fn uniform_thresholds(count: usize) -> Vec<f64> {
    match count {
        0 => Vec::new(),
        1 => vec![0.0],
        _ => (0..count).map(|k| k as f64 / (count - 1) as f64).collect(),
    }
}

/// Geodesic error per source keypoint between predicted and true target
/// keypoints, divided by the target diameter.
pub fn keypoint_errors(predicted: &Assignment, ground_truth: &Assignment, target: &Shape) -> Result<Vec<f64>> {
    if ground_truth.len() < predicted.len() {
        return Err(Error::MissingGroundTruth(ground_truth.len()));
    }
    let kp = target.keypoints();
    let truth: Vec<usize> = (0..predicted.len())
        .map(|i| ground_truth.get(i).ok_or(Error::MissingGroundTruth(i)))
        .collect::<Result<_>>()?;
    if let Some(&j) = truth.iter().chain(predicted.0.iter().flatten()).find(|&&j| j >= kp.len()) {
        return Err(Error::Validation(format!("target keypoint {j} out of range")));
    }
    let sources: Vec<usize> = truth.iter().map(|&j| kp[j]).collect();
    let table = geodesic_distances(target, &sources)?;
    let d = target.diameter();
    Ok(predicted
        .0
        .iter()
        .enumerate()
        .map(|(i, p)| match p {
            None => UNMATCHED_ERROR,
            Some(j) => table.row(i)[kp[*j]] / d,
        })
        .collect())
}

pub fn pck_curve(errors: &[f64]) -> Result<PckCurve> {
    pck_curve_with(errors, &uniform_thresholds(DEFAULT_PCK_SAMPLES))
}

/// Fraction of errors at or below each threshold; AUC by the trapezoid rule.
pub fn pck_curve_with(errors: &[f64], thresholds: &[f64]) -> Result<PckCurve> {
    if errors.is_empty() {
        return Err(Error::EmptyInput("error list"));
    }
    if thresholds.is_empty() {
        return Err(Error::EmptyInput("threshold list"));
    }
    if let Some(e) = errors.iter().find(|e| !e.is_finite()) {
        return Err(Error::Validation(format!("non-finite error {e}")));
    }
    if thresholds.windows(2).any(|w| w[1] < w[0]) {
        return Err(Error::Validation("thresholds must be ascending".into()));
    }
    let count = errors.len() as f64;
    let fractions: Vec<f64> = thresholds
        .iter()
        .map(|&t| errors.iter().filter(|&&e| e <= t).count() as f64 / count)
        .collect();
    let auc = thresholds
        .windows(2)
        .zip(fractions.windows(2))
        .map(|(t, f)| 0.5 * (t[1] - t[0]) * (f[0] + f[1]))
        .sum();
    Ok(PckCurve { thresholds: thresholds.to_vec(), fractions, auc })
}

pub fn evaluate(solution: &MatchSolution, ground_truth: &Assignment, target: &Shape) -> Result<EvalReport> {
    let errors = keypoint_errors(&solution.assignment, ground_truth, target)?;
    let pck = pck_curve(&errors)?;
    Ok(EvalReport {
        mean_error: errors.iter().sum::<f64>() / errors.len() as f64,
        errors,
        pck,
        rel_gap: solution.rel_gap,
        status: solution.status,
        runtime_secs: solution.stats.wall_secs,
    })
}

pub const PAPER_SCALE_FACTORS: [f64; 5] = [0.1, 0.5, 1.0, 5.0, 10.0];

#[derive(Debug, Clone)]
pub struct SweepEntry {
    pub factor: f64,
    pub solution: MatchSolution,
    pub report: EvalReport,
}

/// Solves `(X, sY)` for every factor `s`, in parallel, reported in input order.
pub fn scale_sweep(
    shape_x: &Shape,
    shape_y: &Shape,
    ground_truth: &Assignment,
    factors: &[f64],
    weights: Weights,
    options: &ProblemOptions,
    config: &SolverConfig,
) -> Result<Vec<SweepEntry>> {
    if let Some(f) = factors.iter().find(|f| !(**f > 0.0) || !f.is_finite()) {
        return Err(Error::Validation(format!("scale factor {f} must be positive")));
    }
    factors
        .par_iter()
        .map(|&factor| {
            let y = shape_y.scaled(factor)?;
            let problem = assemble_with(shape_x, &y, weights, options, None)?;
            let solution = solve(&problem, config)?;
            let report = evaluate(&solution, ground_truth, &y)?;
            Ok(SweepEntry { factor, solution, report })
        })
        .collect()
}

pub fn sweep_csv(entries: &[SweepEntry]) -> String {
    let mut out = String::from("factor,mean_error,gap,objective\n");
    for e in entries {
        out.push_str(&format!("{},{},{},{}\n", e.factor, e.report.mean_error, e.report.rel_gap, e.solution.upper_bound));
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Prior {
    /// Plain cotangent stiffness.
    Lbo,
    /// Projected operator.
    Plbo,
}

#[derive(Debug, Clone)]
pub struct ReconstructionStudy {
    pub reconstruction: Reconstruction,
    pub objective: f64,
    /// RMS vertex distance of `X̂` to the target pose; present when the
    /// shapes share vertex order.
    pub rms: Option<f64>,
}

/// Continuous solve with the correspondence fixed to `ground_truth` under the
/// chosen deformation prior.
pub fn reconstruction_study(
    shape_x: &Shape,
    shape_y: &Shape,
    ground_truth: &Assignment,
    prior: Prior,
    lambda_def: f64,
) -> Result<ReconstructionStudy> {
    let weights = Weights { lambda_def, lambda_ori: 0.0 };
    let options = ProblemOptions { partial: !ground_truth.is_total(), ..ProblemOptions::default() };
    let all = CandidateSet::all(shape_x.num_keypoints(), shape_y.num_keypoints());
    let mut problem = assemble_with(shape_x, shape_y, weights, &options, Some(all))?;
    if prior == Prior::Lbo {
        let kx = StiffnessOperator(stiffness_for(shape_x.geometry())?);
        let ky = StiffnessOperator(stiffness_for(shape_y.geometry())?);
        problem.side_x = SideModel::new(&kx, shape_x.keypoints())?;
        problem.side_y = SideModel::new(&ky, shape_y.keypoints())?;
    }
    let sol = solve_continuous(&problem, ground_truth, 1e-10)?;
    let rms = (shape_x.num_points() == shape_y.num_points()).then(|| {
        let y = shape_y.positions();
        let x_hat = &sol.reconstruction.x_hat;
        let sum: f64 = (0..y.len())
            .map(|v| (0..3).map(|c| (x_hat[(v, c)] - y[v][c]).powi(2)).sum::<f64>())
            .sum();
        (sum / y.len() as f64).sqrt()
    });
    Ok(ReconstructionStudy { reconstruction: sol.reconstruction, objective: sol.value, rms })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pck_hand_computed() {
        let c = pck_curve_with(&[0.0, 0.5], &[0.0, 0.5, 1.0]).unwrap();
        assert_eq!(c.fractions, vec![0.5, 1.0, 1.0]);
        assert_eq!(c.auc, 0.5 * 0.5 * 1.5 + 0.5);
    }

    #[test]
    fn pck_extremes() {
        assert_eq!(pck_curve(&[0.0; 4]).unwrap().auc, 1.0);
        let c = pck_curve(&[1.5, 2.0]).unwrap();
        assert!(c.fractions.iter().all(|&f| f == 0.0));
        assert_eq!(c.auc, 0.0);
        assert!(matches!(pck_curve(&[]), Err(Error::EmptyInput(_))));
    }
}
