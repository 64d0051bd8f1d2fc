//! Continuous subproblems: the exact solve for a fixed assignment and the
//! relaxation over doubly stochastic matrices used for node bounds.
//!
//! Coordinates are normalized internally: target keypoints `Ỹ = (Y_J − ȳ)/d_Y`
//! and source keypoints `X̃ = (X_I − x̄)/d_X`. The objective for a doubly
//! stochastic `P` is then
//!
//! ```text
//! F(P) = ψ_X(P Ỹ) + ψ_Y(Pᵀ X̃) + c‖h_I − P h_J‖
//! ```
//!
//! with `ψ` the reduced side problems of [`crate::reduced`], `a = 1/n`,
//! `b = λ_def/|X|` (resp. `|Y|`) and `c = λ_ori/n`.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::model::{Assignment, MatchProblem, Reconstruction};
use crate::reduced::{solve_side, ReducedQuadratic};

use super::lap::min_cost_assignment;

/// Result of a continuous solve for one assignment.
#[derive(Debug, Clone)]
pub struct FixedSolution {
    pub reconstruction: Reconstruction,
    pub value: f64,
    /// Certified: no reconstruction achieves less than this for the assignment.
    pub lower: f64,
    pub iterations: usize,
    /// Dual certificate, present in full mode.
    pub duals: Option<Duals>,
}

/// Feasible dual point: `zx ∈ D_X`, `zy ∈ D_Y`, `‖w‖ ≤ c`.
#[derive(Debug, Clone, PartialEq)]
pub struct Duals {
    pub zx: DMatrix<f64>,
    pub zy: DMatrix<f64>,
    pub w: DVector<f64>,
}

/// Normalized data shared by all continuous solves of a problem.
#[derive(Debug, Clone)]
pub struct Context {
    pub n: usize,
    pub a_x: f64,
    pub b_x: f64,
    pub a_y: f64,
    pub b_y: f64,
    pub c: f64,
    pub xt: DMatrix<f64>,
    pub yt: DMatrix<f64>,
    pub x_mean: DVector<f64>,
    pub y_mean: DVector<f64>,
    pub h_i: DVector<f64>,
    pub h_j: DVector<f64>,
    pub gx: DMatrix<f64>,
    pub gy: DMatrix<f64>,
    /// Projector onto the range of `G` (complement of the kernel).
    pub range_x: DMatrix<f64>,
    pub range_y: DMatrix<f64>,
    pub gx_pinv: DMatrix<f64>,
    pub gy_pinv: DMatrix<f64>,
}

fn normalized(points: &DMatrix<f64>, diameter: f64) -> (DMatrix<f64>, DVector<f64>) {
    let n = points.nrows();
    let mean = DVector::from_fn(3, |c, _| points.column(c).sum() / n.max(1) as f64);
    let out = DMatrix::from_fn(n, 3, |i, c| (points[(i, c)] - mean[c]) / diameter);
    (out, mean)
}

fn keypoint_matrix(problem_shape: &crate::mesh::Shape) -> DMatrix<f64> {
    let kp = problem_shape.keypoint_positions();
    DMatrix::from_fn(kp.len(), 3, |i, c| kp[i][c])
}

fn range_projector(rq: &ReducedQuadratic) -> DMatrix<f64> {
    rq.spectral_map(|q| if q > 0.0 { 1.0 } else { 0.0 })
}

impl Context {
    pub fn new(problem: &MatchProblem) -> Self {
        let (xt, x_mean) = normalized(&keypoint_matrix(&problem.shape_x), problem.d_x());
        let (yt, y_mean) = normalized(&keypoint_matrix(&problem.shape_y), problem.d_y());
        let n = problem.n_x();
        let w = problem.weights;
        let h_i = problem.h_i().map(DVector::from_vec).unwrap_or_else(|| DVector::zeros(n));
        let h_j = problem.h_j().map(DVector::from_vec).unwrap_or_else(|| DVector::zeros(problem.n_y()));
        let qx = &problem.side_x.quadratic;
        let qy = &problem.side_y.quadratic;
        Context {
            n,
            a_x: 1.0 / n as f64,
            b_x: w.lambda_def / problem.shape_x.num_points() as f64,
            a_y: 1.0 / n as f64,
            b_y: w.lambda_def / problem.shape_y.num_points() as f64,
            c: if problem.h_i().is_some() { w.lambda_ori / n as f64 } else { 0.0 },
            xt,
            yt,
            x_mean,
            y_mean,
            h_i,
            h_j,
            gx: qx.sqrt(),
            gy: qy.sqrt(),
            range_x: range_projector(qx),
            range_y: range_projector(qy),
            gx_pinv: qx.sqrt_pinv(),
            gy_pinv: qy.sqrt_pinv(),
        }
    }

    /// Linear minorant `F(P) ≥ constant + Σ C_ij P_ij` from feasible duals.
    pub fn linear_cost(&self, d: &Duals) -> (f64, DMatrix<f64>) {
        let zy_part = &d.zx * self.yt.transpose();
        let zx_part = &self.xt * d.zy.transpose();
        let n = self.n;
        let cost = DMatrix::from_fn(n, self.yt.nrows(), |i, j| zy_part[(i, j)] + zx_part[(i, j)] - d.w[i] * self.h_j[j]);
        (d.w.dot(&self.h_i), cost)
    }

    /// Lower bound over all permutations allowed by `allowed`, with the
    /// minimizing permutation; `None` when none exists.
    pub fn lap_bound(&self, d: &Duals, allowed: impl Fn(usize, usize) -> bool) -> Option<(f64, Vec<usize>)> {
        let (k, cost) = self.linear_cost(d);
        let (cols, total) = min_cost_assignment(&cost, allowed)?;
        let scale = cost.iter().fold(0.0f64, |a, &b| a.max(b.abs())) * self.n as f64 + k.abs();
        Some((k + total - 1e-12 * scale, cols))
    }

    /// Scales a candidate `V` so that `Z = G V` is feasible for side X.
    fn feasible_x(&self, v: &DMatrix<f64>) -> DMatrix<f64> {
        feasible(&self.gx, v, self.a_x, self.b_x)
    }

    fn feasible_y(&self, v: &DMatrix<f64>) -> DMatrix<f64> {
        feasible(&self.gy, v, self.a_y, self.b_y)
    }
}

fn feasible(g: &DMatrix<f64>, v: &DMatrix<f64>, a: f64, b: f64) -> DMatrix<f64> {
    let z = g * v;
    let (zn, vn) = (z.norm(), v.norm());
    let mut s: f64 = 1.0;
    if zn > a {
        s = s.min(a / zn);
    }
    if vn > b {
        s = s.min(b / vn);
    }
    // stay strictly inside against round-off
    z * (s * (1.0 - 1e-12))
}

/// Exact continuous solve for a fixed assignment.
pub fn solve_fixed(problem: &MatchProblem, ctx: &Context, assignment: &Assignment, tol: f64) -> Result<FixedSolution> {
    assignment.check(&problem.candidates, problem.partial)?;
    if problem.partial {
        return solve_masked(problem, ctx, assignment, tol);
    }
    let n = ctx.n;
    let perm: Vec<usize> = assignment.0.iter().map(|j| j.unwrap()).collect();
    let mut inv = vec![0; n];
    for (i, &j) in perm.iter().enumerate() {
        inv[j] = i;
    }
    let tx = DMatrix::from_fn(n, 3, |i, c| ctx.yt[(perm[i], c)]);
    let ty = DMatrix::from_fn(n, 3, |j, c| ctx.xt[(inv[j], c)]);
    let sx = solve_side(&problem.side_x.quadratic, ctx.a_x, ctx.b_x, &tx, tol);
    let sy = solve_side(&problem.side_y.quadratic, ctx.a_y, ctx.b_y, &ty, tol);
    let resid = DVector::from_fn(n, |i, _| ctx.h_i[i] - ctx.h_j[perm[i]]);
    let rn = resid.norm();
    let ori = ctx.c * rn;
    let w = if rn > 0.0 { resid * (ctx.c / rn) } else { DVector::zeros(n) };

    let d_x = problem.d_x();
    let d_y = problem.d_y();
    let wx = DMatrix::from_fn(n, 3, |i, c| sx.w[(i, c)] * d_y + ctx.y_mean[c]);
    let wy = DMatrix::from_fn(n, 3, |j, c| sy.w[(j, c)] * d_x + ctx.x_mean[c]);
    let reconstruction = Reconstruction { x_hat: problem.side_x.extend(&wx), y_hat: problem.side_y.extend(&wy) };
    Ok(FixedSolution {
        reconstruction,
        value: sx.value + sy.value + ori,
        lower: sx.lower + sy.lower + ori,
        iterations: sx.evaluations + sy.evaluations,
        duals: Some(Duals { zx: sx.dual, zy: sy.dual, w }),
    })
}

/// Partial mode: unmatched keypoints become free vertices.
fn solve_masked(problem: &MatchProblem, ctx: &Context, assignment: &Assignment, tol: f64) -> Result<FixedSolution> {
    let pairs: Vec<(usize, usize)> = assignment.pairs().collect();
    let m = pairs.len();
    let unmatched = (problem.n_x() - m) + (problem.n_y() - m);
    let penalty = problem.unmatched_penalty * unmatched as f64;
    if m == 0 {
        return Ok(FixedSolution {
            reconstruction: Reconstruction::identity(problem),
            value: penalty,
            lower: penalty,
            iterations: 0,
            duals: None,
        });
    }
    let mut src: Vec<(usize, usize)> = pairs.clone();
    src.sort();
    let mut tgt: Vec<(usize, usize)> = pairs.iter().map(|&(i, j)| (j, i)).collect();
    tgt.sort();
    let s_x: Vec<usize> = src.iter().map(|p| p.0).collect();
    let s_y: Vec<usize> = tgt.iter().map(|p| p.0).collect();
    let (qx, ext_x) = problem.side_x.restricted(&s_x);
    let (qy, ext_y) = problem.side_y.restricted(&s_y);
    let a = 1.0 / m as f64;
    let b_x = problem.weights.lambda_def / problem.shape_x.num_points() as f64;
    let b_y = problem.weights.lambda_def / problem.shape_y.num_points() as f64;
    let tx = DMatrix::from_fn(m, 3, |r, c| ctx.yt[(src[r].1, c)]);
    let ty = DMatrix::from_fn(m, 3, |r, c| ctx.xt[(tgt[r].1, c)]);
    let sx = solve_side(&qx, a, b_x, &tx, tol);
    let sy = solve_side(&qy, a, b_y, &ty, tol);
    let rn = src.iter().map(|&(i, j)| (ctx.h_i[i] - ctx.h_j[j]).powi(2)).sum::<f64>().sqrt();
    let ori = if ctx.c > 0.0 { problem.weights.lambda_ori * rn / m as f64 } else { 0.0 };
    let wx = DMatrix::from_fn(m, 3, |r, c| sx.w[(r, c)] * problem.d_y() + ctx.y_mean[c]);
    let wy = DMatrix::from_fn(m, 3, |r, c| sy.w[(r, c)] * problem.d_x() + ctx.x_mean[c]);
    let reconstruction = Reconstruction {
        x_hat: problem.side_x.extend_subset(&s_x, &ext_x, &wx),
        y_hat: problem.side_y.extend_subset(&s_y, &ext_y, &wy),
    };
    Ok(FixedSolution {
        reconstruction,
        value: sx.value + sy.value + ori + penalty,
        lower: sx.lower + sy.lower + ori + penalty,
        iterations: sx.evaluations + sy.evaluations,
        duals: None,
    })
}

/// Primal-dual iterate for the relaxation of one node; warm-startable.
#[derive(Debug, Clone)]
pub struct PdhgState {
    pub p: DMatrix<f64>,
    wx: DMatrix<f64>,
    wy: DMatrix<f64>,
    ux: DMatrix<f64>,
    vx: DMatrix<f64>,
    uy: DMatrix<f64>,
    vy: DMatrix<f64>,
    w: DVector<f64>,
    alpha: DVector<f64>,
    beta: DVector<f64>,
}

/// Support of `P` at a node: `mask[i*n + j]`.
#[derive(Debug, Clone)]
pub struct Support {
    pub n: usize,
    pub mask: Vec<bool>,
}

impl Support {
    pub fn allows(&self, i: usize, j: usize) -> bool {
        self.mask[i * self.n + j]
    }
}

/// Euclidean projection onto `{P ≥ 0, P1 = 1, Pᵀ1 = 1, supp P ⊆ S}` by block
/// coordinate ascent on the dual (row and column thresholds).
pub fn project_birkhoff(a: &DMatrix<f64>, support: &Support, alpha: &mut DVector<f64>, beta: &mut DVector<f64>, sweeps: usize) -> DMatrix<f64> {
    let n = support.n;
    let mut vals = Vec::with_capacity(n);
    for _ in 0..sweeps {
        for i in 0..n {
            vals.clear();
            vals.extend((0..n).filter(|&j| support.allows(i, j)).map(|j| a[(i, j)] - beta[j]));
            alpha[i] = simplex_threshold(&mut vals);
        }
        for j in 0..n {
            vals.clear();
            vals.extend((0..n).filter(|&i| support.allows(i, j)).map(|i| a[(i, j)] - alpha[i]));
            beta[j] = simplex_threshold(&mut vals);
        }
        let mut worst: f64 = 0.0;
        for i in 0..n {
            let s: f64 = (0..n).filter(|&j| support.allows(i, j)).map(|j| (a[(i, j)] - alpha[i] - beta[j]).max(0.0)).sum();
            worst = worst.max((s - 1.0).abs());
        }
        if worst < 1e-10 {
            break;
        }
    }
    DMatrix::from_fn(n, n, |i, j| if support.allows(i, j) { (a[(i, j)] - alpha[i] - beta[j]).max(0.0) } else { 0.0 })
}

/// `τ` with `Σ max(0, v − τ) = 1`.
fn simplex_threshold(v: &mut [f64]) -> f64 {
    if v.is_empty() {
        return 0.0;
    }
    v.sort_by(|a, b| b.total_cmp(a));
    let mut acc = 0.0;
    let mut tau = v[0] - 1.0;
    for (k, &x) in v.iter().enumerate() {
        acc += x;
        let t = (acc - 1.0) / (k + 1) as f64;
        if x > t {
            tau = t;
        } else {
            break;
        }
    }
    tau
}

fn ball(m: &mut DMatrix<f64>) {
    let nrm = m.norm();
    if nrm > 1.0 {
        *m /= nrm;
    }
}

/// Relaxation solver for one problem; operator blocks are pre-scaled by the
/// weights so all dual balls have unit radius.
#[derive(Debug, Clone)]
pub struct Relaxation {
    step: f64,
}

impl Relaxation {
    pub fn new(ctx: &Context) -> Self {
        // power iteration on KᵀK for the step size
        let n = ctx.n;
        let mut p = DMatrix::from_element(n, n, 1.0);
        let mut wx = DMatrix::from_element(n, 3, 1.0);
        let mut wy = DMatrix::from_element(n, 3, 1.0);
        let mut est: f64 = 1.0;
        for _ in 0..50 {
            let (ux, vx, uy, vy, w) = forward(ctx, &p, &wx, &wy);
            let (gp, gwx, gwy) = adjoint(ctx, &ux, &vx, &uy, &vy, &w);
            let nrm = (gp.norm_squared() + gwx.norm_squared() + gwy.norm_squared()).sqrt();
            let xn = (p.norm_squared() + wx.norm_squared() + wy.norm_squared()).sqrt();
            est = nrm / xn;
            p = gp / nrm;
            wx = gwx / nrm;
            wy = gwy / nrm;
        }
        let knorm = est.sqrt() * 1.05 + 1e-12;
        Relaxation { step: 0.99 / knorm }
    }

    pub fn initial_state(&self, ctx: &Context, support: &Support) -> PdhgState {
        let n = ctx.n;
        let mut alpha = DVector::zeros(n);
        let mut beta = DVector::zeros(n);
        let uniform = DMatrix::from_element(n, n, 1.0 / n as f64);
        let p = project_birkhoff(&uniform, support, &mut alpha, &mut beta, 200);
        PdhgState {
            wx: &p * &ctx.yt,
            wy: p.transpose() * &ctx.xt,
            p,
            ux: DMatrix::zeros(n, 3),
            vx: DMatrix::zeros(n, 3),
            uy: DMatrix::zeros(n, 3),
            vy: DMatrix::zeros(n, 3),
            w: DVector::zeros(n),
            alpha,
            beta,
        }
    }

    /// Runs `iterations` primal-dual steps restricted to `support`.
    pub fn run(&self, ctx: &Context, support: &Support, state: &mut PdhgState, iterations: usize) {
        let (tau, sigma) = (self.step, self.step);
        for i in 0..ctx.n {
            for j in 0..ctx.n {
                if !support.allows(i, j) {
                    state.p[(i, j)] = 0.0;
                }
            }
        }
        for _ in 0..iterations {
            let (gp, gwx, gwy) = adjoint(ctx, &state.ux, &state.vx, &state.uy, &state.vy, &state.w);
            let p_new = project_birkhoff(&(&state.p - gp * tau), support, &mut state.alpha, &mut state.beta, 30);
            let wx_new = &state.wx - gwx * tau;
            let wy_new = &state.wy - gwy * tau;
            let pb = &p_new * 2.0 - &state.p;
            let wxb = &wx_new * 2.0 - &state.wx;
            let wyb = &wy_new * 2.0 - &state.wy;
            let (kux, kvx, kuy, kvy, kw) = forward(ctx, &pb, &wxb, &wyb);
            state.ux += kux * sigma;
            state.vx += kvx * sigma;
            state.uy += kuy * sigma;
            state.vy += kvy * sigma;
            state.w += (kw + &ctx.h_i * ctx.c) * sigma;
            ball(&mut state.ux);
            ball(&mut state.vx);
            ball(&mut state.uy);
            ball(&mut state.vy);
            let wn = state.w.norm();
            if wn > 1.0 {
                state.w /= wn;
            }
            state.p = p_new;
            state.wx = wx_new;
            state.wy = wy_new;
        }
    }

    /// Feasible dual points extracted from the iterate.
    pub fn duals(&self, ctx: &Context, state: &PdhgState) -> Vec<Duals> {
        let w = &state.w * ctx.c;
        // from V: Z = G V
        let from_v = Duals {
            zx: ctx.feasible_x(&(&state.vx * ctx.b_x)),
            zy: ctx.feasible_y(&(&state.vy * ctx.b_y)),
            w: w.clone(),
        };
        // from U: Z = −U restricted to the range of G
        let zx = -(&ctx.range_x * &state.ux) * ctx.a_x;
        let zy = -(&ctx.range_y * &state.uy) * ctx.a_y;
        let from_u = Duals {
            zx: ctx.feasible_x(&(&ctx.gx_pinv * zx)),
            zy: ctx.feasible_y(&(&ctx.gy_pinv * zy)),
            w,
        };
        vec![from_v, from_u]
    }
}

type DualBlocks = (DMatrix<f64>, DMatrix<f64>, DMatrix<f64>, DMatrix<f64>, DVector<f64>);

fn forward(ctx: &Context, p: &DMatrix<f64>, wx: &DMatrix<f64>, wy: &DMatrix<f64>) -> DualBlocks {
    let ux = (wx - p * &ctx.yt) * ctx.a_x;
    let vx = (&ctx.gx * wx) * ctx.b_x;
    let uy = (wy - p.transpose() * &ctx.xt) * ctx.a_y;
    let vy = (&ctx.gy * wy) * ctx.b_y;
    let w = -(p * &ctx.h_j) * ctx.c;
    (ux, vx, uy, vy, w)
}

fn adjoint(
    ctx: &Context,
    ux: &DMatrix<f64>,
    vx: &DMatrix<f64>,
    uy: &DMatrix<f64>,
    vy: &DMatrix<f64>,
    w: &DVector<f64>,
) -> (DMatrix<f64>, DMatrix<f64>, DMatrix<f64>) {
    let gp = -(ux * ctx.yt.transpose()) * ctx.a_x - (&ctx.xt * uy.transpose()) * ctx.a_y - (w * ctx.h_j.transpose()) * ctx.c;
    let gwx = ux * ctx.a_x + (&ctx.gx * vx) * ctx.b_x;
    let gwy = uy * ctx.a_y + (&ctx.gy * vy) * ctx.b_y;
    (gp, gwx, gwy)
}

/// Duals at a fractional `P`: the side problems solved at `T = P Ỹ` and
/// `T = Pᵀ X̃` give the inner-optimal certificates.
pub fn duals_at(problem: &MatchProblem, ctx: &Context, p: &DMatrix<f64>) -> Duals {
    let tx = p * &ctx.yt;
    let ty = p.transpose() * &ctx.xt;
    let sx = solve_side(&problem.side_x.quadratic, ctx.a_x, ctx.b_x, &tx, 1e-9);
    let sy = solve_side(&problem.side_y.quadratic, ctx.a_y, ctx.b_y, &ty, 1e-9);
    let r = &ctx.h_i - p * &ctx.h_j;
    let rn = r.norm();
    let w = if rn > 0.0 { r * (ctx.c / rn) } else { DVector::zeros(ctx.n) };
    Duals { zx: sx.dual, zy: sy.dual, w }
}

pub(crate) fn full_mode_only(problem: &MatchProblem) -> Result<()> {
    if problem.partial {
        return Err(Error::Validation("relaxation bounds are defined for full matching".into()));
    }
    Ok(())
}

/// Objective of the relaxation at a doubly stochastic `p`.
pub fn relaxed_value(problem: &MatchProblem, ctx: &Context, p: &DMatrix<f64>) -> f64 {
    let sx = solve_side(&problem.side_x.quadratic, ctx.a_x, ctx.b_x, &(p * &ctx.yt), 1e-9);
    let sy = solve_side(&problem.side_y.quadratic, ctx.a_y, ctx.b_y, &(p.transpose() * &ctx.xt), 1e-9);
    sx.value + sy.value + ctx.c * (&ctx.h_i - p * &ctx.h_j).norm()
}

/// `θ a + (1 − θ) b`; feasible whenever both inputs are.
pub fn mix(a: &Duals, b: &Duals, theta: f64) -> Duals {
    Duals {
        zx: &a.zx * theta + &b.zx * (1.0 - theta),
        zy: &a.zy * theta + &b.zy * (1.0 - theta),
        w: &a.w * theta + &b.w * (1.0 - theta),
    }
}
