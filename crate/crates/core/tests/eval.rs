use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sparse_match::eval::{
    keypoint_errors, pck_curve, pck_curve_with, reconstruction_study, scale_sweep, Prior, PAPER_SCALE_FACTORS,
};
use sparse_match::mesh::{Geometry, Shape};
use sparse_match::model::{assemble_problem, Assignment, ProblemOptions, Weights};
use sparse_match::solver::{solve, SolverConfig};
use sparse_match::{synth, Error};

fn tetra() -> Shape {
    Shape::new(Geometry::Mesh(synth::tetrahedron()), vec![0, 1, 2, 3], "tet").unwrap()
}

#[test]
fn tetrahedron_errors_follow_edge_distances() {
    let t = tetra();
    assert!((t.diameter() - 1.0).abs() < 1e-12);
    let gt = Assignment::identity(4);
    assert_eq!(keypoint_errors(&gt, &gt, &t).unwrap(), vec![0.0; 4]);
    let off = Assignment::from_permutation(&[1, 0, 2, 3]);
    let e = keypoint_errors(&off, &gt, &t).unwrap();
    assert_eq!(e, vec![1.0, 1.0, 0.0, 0.0]);
    let unmatched = Assignment(vec![Some(0), None, Some(2), Some(3)]);
    assert_eq!(keypoint_errors(&unmatched, &gt, &t).unwrap()[1], 1.0);
    assert!(matches!(
        keypoint_errors(&gt, &Assignment(vec![Some(0), None, Some(2), Some(3)]), &t),
        Err(Error::MissingGroundTruth(1))
    ));
}

#[test]
fn prediction_one_diameter_away_scores_one() {
    let bar = synth::bent_bar_pair(2, 0.0).source;
    let all: Vec<usize> = (0..bar.num_points()).collect();
    let table = sparse_match::geodesics::geodesic_distances(&bar, &all).unwrap();
    let (mut a, mut b, mut best) = (0, 0, 0.0);
    for u in 0..all.len() {
        for (v, &d) in table.row(u).iter().enumerate() {
            if d > best {
                (a, b, best) = (u, v, d);
            }
        }
    }
    let ends = bar.with_keypoints(vec![a, b]).unwrap();
    let e = keypoint_errors(&Assignment::from_permutation(&[1, 0]), &Assignment::identity(2), &ends).unwrap();
    assert!(e.iter().all(|x| (x - 1.0).abs() < 1e-12), "{e:?}");
}

#[test]
fn pck_curves_by_hand() {
    let c = pck_curve_with(&[0.1, 0.2, 0.2, 0.9], &[0.0, 0.25, 0.5, 1.0]).unwrap();
    assert_eq!(c.fractions, vec![0.0, 0.75, 0.75, 1.0]);
    let auc = 0.5 * 0.25 * 0.75 + 0.25 * 0.75 + 0.5 * 0.5 * 1.75;
    assert!((c.auc - auc).abs() < 1e-15);
    let d = pck_curve(&[0.0, 0.0, 1.0]).unwrap();
    assert_eq!(d.thresholds.len(), 30);
    assert_eq!(*d.fractions.last().unwrap(), 1.0);
    assert!(d.fractions.windows(2).all(|w| w[0] <= w[1]));
}

#[test]
fn identical_shapes_sweep_is_exact_at_every_scale() {
    let shape = synth::keypointed_blob(2, 6, 5);
    let gt = Assignment::identity(6);
    let entries = scale_sweep(&shape, &shape, &gt, &PAPER_SCALE_FACTORS, Weights::default(), &ProblemOptions::default(), &SolverConfig::default()).unwrap();
    assert_eq!(entries.len(), 5);
    for e in &entries {
        assert_eq!(e.report.mean_error, 0.0, "factor {}", e.factor);
        assert_eq!(e.report.rel_gap, 0.0);
        assert_eq!(e.report.pck.auc, 1.0);
    }
}

#[test]
fn unit_factor_reproduces_the_plain_solve() {
    let pair = synth::near_isometric_pair(2, 6, 7, 0.003);
    let gt = Assignment::from_permutation(&pair.ground_truth);
    let cfg = SolverConfig::default();
    let entries = scale_sweep(&pair.source, &pair.target, &gt, &[1.0], Weights::default(), &ProblemOptions::default(), &cfg).unwrap();
    let p = assemble_problem(&pair.source, &pair.target, Weights::default(), 11, false).unwrap();
    let direct = solve(&p, &cfg).unwrap();
    assert_eq!(entries[0].solution.assignment, direct.assignment);
    assert_eq!(entries[0].solution.upper_bound.to_bits(), direct.upper_bound.to_bits());
    assert_eq!(entries[0].solution.lower_bound.to_bits(), direct.lower_bound.to_bits());
    assert_eq!(entries[0].solution.reconstruction, direct.reconstruction);
}

#[test]
fn priors_agree_without_deformation_weight() {
    let pair = synth::bent_bar_pair(8, 0.3);
    let gt = Assignment::identity(8);
    let lbo = reconstruction_study(&pair.source, &pair.target, &gt, Prior::Lbo, 0.0).unwrap();
    let plbo = reconstruction_study(&pair.source, &pair.target, &gt, Prior::Plbo, 0.0).unwrap();
    for &v in pair.source.keypoints() {
        for c in 0..3 {
            let a = lbo.reconstruction.x_hat[(v, c)];
            let b = plbo.reconstruction.x_hat[(v, c)];
            assert!((a - b).abs() < 1e-9, "{a} vs {b}");
        }
    }
}

#[test]
fn same_pose_lbo_is_worse_than_plbo() {
    let bar = synth::bent_bar_pair(8, 0.3).target;
    let gt = Assignment::identity(8);
    let lbo = reconstruction_study(&bar, &bar, &gt, Prior::Lbo, 5.0).unwrap().rms.unwrap();
    let plbo = reconstruction_study(&bar, &bar, &gt, Prior::Plbo, 5.0).unwrap().rms.unwrap();
    assert!(plbo <= 1e-6 * bar.diameter());
    assert!(lbo > plbo);
}

#[test]
fn auc_invariant_to_rigid_motion_and_scale() {
    let pair = synth::near_isometric_pair(2, 6, 12, 0.003);
    let gt = Assignment::from_permutation(&pair.ground_truth);
    let pred = Assignment::from_permutation(&[1, 0, 2, 3, 5, 4].map(|i| pair.ground_truth[i]));
    let base = pck_curve(&keypoint_errors(&pred, &gt, &pair.target).unwrap()).unwrap().auc;
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let r = synth::random_rotation(&mut rng);
    let t = synth::random_translation(&mut rng, 2.0);
    let moved = pair.target.transformed(&r, &t).unwrap().scaled(3.5).unwrap();
    let auc = pck_curve(&keypoint_errors(&pred, &gt, &moved).unwrap()).unwrap().auc;
    assert!((auc - base).abs() < 1e-12);
}
