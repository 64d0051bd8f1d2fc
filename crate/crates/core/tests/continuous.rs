use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sparse_match::geodesics::CandidateSet;
use sparse_match::model::{assemble_with, eval_objective, eval_terms, Assignment, MatchProblem, ProblemOptions, Reconstruction, Weights};
use sparse_match::operators::{coordinates, DeformationOperator};
use sparse_match::solver::{solve_continuous, solve_relaxation};
use sparse_match::synth;

fn problem(n: usize, seed: u64, weights: Weights) -> MatchProblem {
    let pair = synth::near_isometric_pair(2, n, seed, 0.003);
    let all = CandidateSet::all(n, n);
    assemble_with(&pair.source, &pair.target, weights, &ProblemOptions::default(), Some(all)).unwrap()
}

/// Minimizes `a‖S Z − T‖ + b‖L Z‖` over all of `Z` by iteratively reweighted
/// least squares on the dense operator.
fn irls_side(l: &DMatrix<f64>, rows: &[usize], target: &DMatrix<f64>, a: f64, b: f64) -> DMatrix<f64> {
    let nv = l.nrows();
    let mut s = DMatrix::zeros(rows.len(), nv);
    for (r, &v) in rows.iter().enumerate() {
        s[(r, v)] = 1.0;
    }
    let sts = s.transpose() * &s;
    let ltl = l.transpose() * l;
    let st_t = s.transpose() * target;
    let mut z = DMatrix::zeros(nv, 3);
    let (mut w1, mut w2) = (1.0, 1.0);
    for _ in 0..3000 {
        let m = &sts * (a * w1) + &ltl * (b * w2);
        z = m.cholesky().expect("positive definite").solve(&(&st_t * (a * w1)));
        let r1 = (&s * &z - target).norm().max(1e-300);
        let r2 = (l * &z).norm().max(1e-300);
        w1 = 1.0 / r1;
        w2 = 1.0 / r2;
    }
    z
}

fn irls_reconstruction(p: &MatchProblem, a: &Assignment) -> Reconstruction {
    let n = p.n_x();
    let ky = p.shape_y.keypoint_positions();
    let kx = p.shape_x.keypoint_positions();
    let inv = a.inverse(n);
    let tx = DMatrix::from_fn(n, 3, |i, c| ky[a.get(i).unwrap()][c]);
    let ty = DMatrix::from_fn(n, 3, |j, c| kx[inv.get(j).unwrap()][c]);
    let w = p.weights.lambda_def;
    let x_hat = irls_side(&p.plbo_x.to_dense(), p.shape_x.keypoints(), &tx, 1.0 / (n as f64 * p.d_y()), w / (p.shape_x.num_points() as f64 * p.d_y()));
    let y_hat = irls_side(&p.plbo_y.to_dense(), p.shape_y.keypoints(), &ty, 1.0 / (n as f64 * p.d_x()), w / (p.shape_y.num_points() as f64 * p.d_x()));
    Reconstruction { x_hat, y_hat }
}

#[test]
fn fixed_solve_matches_dense_reweighted_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for seed in [1u64, 2, 3] {
        let p = problem(6, seed, Weights::default());
        let mut perm: Vec<usize> = (0..6).collect();
        perm.shuffle(&mut rng);
        let a = Assignment::from_permutation(&perm);
        let fast = solve_continuous(&p, &a, 1e-9).unwrap();
        let oracle = irls_reconstruction(&p, &a);
        let oracle_value = eval_objective(&p, &a, &oracle).unwrap();
        let fast_eval = eval_objective(&p, &a, &fast.reconstruction).unwrap();
        assert!(((fast.value - oracle_value) / oracle_value).abs() < 1e-5, "{} vs {oracle_value}", fast.value);
        assert!(((fast_eval - fast.value) / fast.value).abs() < 1e-9, "reported value {} evaluates to {fast_eval}", fast.value);
        assert!(fast.lower <= oracle_value * (1.0 + 1e-12));
        assert!(fast.lower <= fast.value && fast.lower >= fast.value * (1.0 - 1e-9));
    }
}

#[test]
fn identical_shapes_identity_is_free() {
    let shape = synth::keypointed_blob(2, 7, 4);
    let p = assemble_with(&shape, &shape, Weights::default(), &ProblemOptions::default(), None).unwrap();
    let sol = solve_continuous(&p, &Assignment::identity(7), 1e-9).unwrap();
    assert!(sol.value.abs() < 1e-8 && sol.lower.abs() < 1e-8);
    let x = coordinates(shape.positions());
    assert!((&sol.reconstruction.x_hat - &x).amax() < 1e-8 * shape.diameter());
    assert!((&sol.reconstruction.y_hat - &x).amax() < 1e-8 * shape.diameter());
}

#[test]
fn no_deformation_weight_fits_keypoints_exactly() {
    let p = problem(5, 7, Weights { lambda_def: 0.0, lambda_ori: 0.025 });
    let a = Assignment::from_permutation(&[1, 0, 2, 4, 3]);
    let sol = solve_continuous(&p, &a, 1e-9).unwrap();
    let ky = p.shape_y.keypoint_positions();
    for (i, &v) in p.shape_x.keypoints().iter().enumerate() {
        let j = a.get(i).unwrap();
        for c in 0..3 {
            assert!((sol.reconstruction.x_hat[(v, c)] - ky[j][c]).abs() < 1e-9);
        }
    }
    let terms = eval_terms(&p, &a, &sol.reconstruction).unwrap();
    assert!(terms.rec < 1e-12);
    assert!((sol.value - terms.total).abs() < 1e-12 && (terms.total - 0.025 * terms.ori).abs() < 1e-12);
}

#[test]
fn relaxation_bounds_every_assignment() {
    let p = problem(5, 9, Weights::default());
    let relaxed = solve_relaxation(&p, 800).unwrap();
    assert!(relaxed.lower <= relaxed.value + 1e-12);
    for k in 0..10u64 {
        let mut perm: Vec<usize> = (0..5).collect();
        perm.shuffle(&mut ChaCha8Rng::seed_from_u64(k));
        let v = solve_continuous(&p, &Assignment::from_permutation(&perm), 1e-9).unwrap().value;
        assert!(relaxed.lower <= v + 1e-12);
    }
    for i in 0..5 {
        assert!((relaxed.p.row(i).sum() - 1.0).abs() < 1e-8);
        assert!((relaxed.p.column(i).sum() - 1.0).abs() < 1e-8);
    }
}

#[test]
fn partial_solve_masks_unmatched_pairs() {
    let pair = synth::near_isometric_pair(2, 5, 3, 0.003);
    let opts = ProblemOptions { partial: true, ..ProblemOptions::default() };
    let p = assemble_with(&pair.source, &pair.target, Weights::default(), &opts, Some(CandidateSet::all(5, 5))).unwrap();
    let none = solve_continuous(&p, &Assignment(vec![None; 5]), 1e-9).unwrap();
    assert!((none.value - 0.05 * 10.0).abs() < 1e-12);
    let mut a: Vec<Option<usize>> = pair.ground_truth.iter().map(|&j| Some(j)).collect();
    a[2] = None;
    let a = Assignment(a);
    let sol = solve_continuous(&p, &a, 1e-9).unwrap();
    let eval = eval_objective(&p, &a, &sol.reconstruction).unwrap();
    assert!(((eval - sol.value) / sol.value).abs() < 1e-9, "{eval} vs {}", sol.value);
    assert!(sol.lower <= sol.value);
}
