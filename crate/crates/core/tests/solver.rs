use nalgebra::DMatrix;
use proptest::prelude::*;
use sparse_match::geodesics::CandidateSet;
use sparse_match::model::{assemble_problem, assemble_with, Assignment, MatchProblem, ProblemOptions, Weights};
use sparse_match::solver::lap::min_cost_assignment;
use sparse_match::solver::{
    count_assignments, exhaustive_oracle, relative_gap, round_to_assignment, solve, solve_with_observer, SolveStatus,
    SolverConfig,
};
use sparse_match::{synth, Error};

fn pair_problem(n: usize, seed: u64, k: usize) -> MatchProblem {
    let pair = synth::near_isometric_pair(2, n, seed, 0.003);
    assemble_problem(&pair.source, &pair.target, Weights::default(), k, false).unwrap()
}

fn perfect_matchings(c: &CandidateSet) -> Vec<Vec<usize>> {
    fn go(i: usize, c: &CandidateSet, used: &mut Vec<bool>, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if i == c.num_sources() {
            out.push(cur.clone());
            return;
        }
        for &j in &c.lists[i] {
            if !used[j] {
                used[j] = true;
                cur.push(j);
                go(i + 1, c, used, cur, out);
                cur.pop();
                used[j] = false;
            }
        }
    }
    let mut out = Vec::new();
    go(0, c, &mut vec![false; c.num_targets], &mut Vec::new(), &mut out);
    out
}

#[test]
fn rounding_is_idempotent_on_permutations() {
    let perm = [3, 0, 4, 1, 2];
    let a = Assignment::from_permutation(&perm);
    let back = round_to_assignment(&a.to_matrix(5), &CandidateSet::all(5, 5), false).unwrap();
    assert_eq!(back, a);
}

#[test]
fn rounding_finds_the_unique_perfect_matching() {
    let lists = vec![vec![0, 1], vec![1], vec![2, 3, 4], vec![2, 3], vec![3, 4], vec![0, 5, 6], vec![6, 7], vec![7, 5]];
    let c = CandidateSet { lists, num_targets: 8 };
    let all = perfect_matchings(&c);
    let p = DMatrix::from_fn(8, 8, |i, j| if c.allows(i, j) { 0.3 + 0.01 * ((i * 3 + j) % 5) as f64 } else { 0.0 });
    let got = round_to_assignment(&p, &c, false).unwrap();
    let best = all
        .iter()
        .map(|m| (m.iter().enumerate().map(|(i, &j)| p[(i, j)]).sum::<f64>(), m))
        .fold((f64::NEG_INFINITY, None), |acc, (v, m)| if v > acc.0 { (v, Some(m)) } else { acc });
    assert_eq!(got, Assignment::from_permutation(best.1.unwrap()));

    let forced = CandidateSet { lists: vec![vec![1], vec![0, 2], vec![0]], num_targets: 3 };
    assert_eq!(perfect_matchings(&forced).len(), 1);
    let got = round_to_assignment(&DMatrix::from_element(3, 3, 1.0 / 3.0), &forced, false).unwrap();
    assert_eq!(got, Assignment::from_permutation(&perfect_matchings(&forced)[0]));
}

#[test]
fn oracle_on_identical_shapes_and_single_keypoint() {
    let shape = synth::keypointed_blob(2, 5, 2);
    let p = assemble_problem(&shape, &shape, Weights::default(), 11, false).unwrap();
    let o = exhaustive_oracle(&p).unwrap();
    assert_eq!(o.assignment, Assignment::identity(5));
    assert!(o.upper_bound < 1e-10);

    let one = synth::keypointed_blob(2, 1, 3);
    let p = assemble_problem(&one, &one, Weights::default(), 11, false).unwrap();
    let o = exhaustive_oracle(&p).unwrap();
    assert_eq!(o.assignment, Assignment::identity(1));
    let direct = sparse_match::solver::solve_continuous(&p, &Assignment::identity(1), 1e-9).unwrap();
    assert!((o.upper_bound - direct.value).abs() < 1e-12);
}

#[test]
fn oracle_refuses_large_instances() {
    let c = CandidateSet::all(10, 10);
    assert!(count_assignments(&c, false, 1_000_000) > 1_000_000);
    let shape = synth::keypointed_blob(2, 10, 1);
    let p = assemble_with(&shape, &shape, Weights::default(), &ProblemOptions::default(), Some(c)).unwrap();
    assert!(matches!(exhaustive_oracle(&p), Err(Error::TooLarge { .. })));
}

#[test]
fn bounds_bracket_the_oracle_at_every_checkpoint() {
    for (n, seed, k) in [(6, 2, 5), (7, 8, 4), (8, 9, 6)] {
        let p = pair_problem(n, seed, k);
        let o = exhaustive_oracle(&p).unwrap();
        let mut trace = Vec::new();
        let s = solve_with_observer(&p, &SolverConfig::default(), &mut |c| trace.push(*c)).unwrap();
        assert_eq!(s.status, SolveStatus::Optimal);
        assert!(!trace.is_empty());
        for c in &trace {
            assert!(c.lower - 1e-6 <= o.upper_bound && o.upper_bound <= c.upper + 1e-6, "{c:?} vs {}", o.upper_bound);
        }
        assert_eq!(trace, s.stats.trace);
    }
}

#[test]
fn single_worker_runs_are_deterministic() {
    let p = pair_problem(8, 4, 7);
    let cfg = SolverConfig { seed: 17, ..SolverConfig::default() };
    let a = solve(&p, &cfg).unwrap();
    let b = solve(&p, &cfg).unwrap();
    assert_eq!(a.assignment, b.assignment);
    assert_eq!(a.stats.nodes, b.stats.nodes);
    let strip = |s: &sparse_match::solver::MatchSolution| s.stats.trace.iter().map(|c| (c.upper, c.lower, c.nodes)).collect::<Vec<_>>();
    assert_eq!(strip(&a), strip(&b));
}

#[test]
fn parallel_workers_reach_the_same_optimum() {
    let p = pair_problem(8, 4, 7);
    let serial = solve(&p, &SolverConfig::default()).unwrap();
    let parallel = solve(&p, &SolverConfig { workers: 4, ..SolverConfig::default() }).unwrap();
    assert_eq!(parallel.status, SolveStatus::Optimal);
    assert!((serial.upper_bound - parallel.upper_bound).abs() <= 1e-6 * serial.upper_bound);
}

#[test]
fn tiny_budget_reports_valid_bounds() {
    let pair = synth::near_isometric_pair(3, 20, 4, 0.003);
    let p = assemble_problem(&pair.source, &pair.target, Weights::default(), 11, false).unwrap();
    let s = solve(&p, &SolverConfig { time_budget_secs: 0.001, ..SolverConfig::default() }).unwrap();
    assert_eq!(s.status, SolveStatus::TimeBudgetExceeded);
    assert!(s.lower_bound <= s.upper_bound);
    assert!(s.assignment.check(&p.candidates, false).is_ok());
}

#[test]
fn infeasible_candidates_are_reported() {
    let shape = synth::keypointed_blob(2, 4, 1);
    let c = CandidateSet { lists: vec![vec![0], vec![0], vec![2], vec![3]], num_targets: 4 };
    let p = assemble_with(&shape, &shape, Weights::default(), &ProblemOptions::default(), Some(c)).unwrap();
    assert_eq!(solve(&p, &SolverConfig::default()).unwrap().status, SolveStatus::Infeasible);
    assert_eq!(exhaustive_oracle(&p).unwrap().status, SolveStatus::Infeasible);
}

#[test]
fn partial_mode_matches_the_oracle() {
    let pair = synth::near_isometric_pair(2, 5, 6, 0.003);
    let opts = ProblemOptions { partial: true, k: 3, ..ProblemOptions::default() };
    let p = assemble_with(&pair.source, &pair.target, Weights::default(), &opts, None).unwrap();
    let o = exhaustive_oracle(&p).unwrap();
    let s = solve(&p, &SolverConfig::default()).unwrap();
    assert_eq!(s.status, SolveStatus::Optimal);
    assert!(s.lower_bound <= o.upper_bound + 1e-9);
    assert!(s.upper_bound <= o.upper_bound * (1.0 + 1e-2) + 1e-12);
    assert!(s.upper_bound >= o.upper_bound - 1e-9);
}

#[test]
fn invalid_config_is_rejected() {
    let p = pair_problem(4, 0, 3);
    for cfg in [
        SolverConfig { time_budget_secs: 0.0, ..SolverConfig::default() },
        SolverConfig { gap_threshold: -1.0, ..SolverConfig::default() },
        SolverConfig { workers: 0, ..SolverConfig::default() },
    ] {
        assert!(matches!(solve(&p, &cfg), Err(Error::Validation(_))));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn gap_is_scale_free(u in 1e-6f64..1e6, frac in 0.0f64..1.0, s in 1e-3f64..1e3) {
        let l = u * frac;
        prop_assert!((relative_gap(u, l) - relative_gap(u * s, l * s)).abs() < 1e-12);
        prop_assert!((relative_gap(u, l) - (1.0 - frac)).abs() < 1e-12);
    }

    #[test]
    fn hungarian_matches_enumeration(vals in proptest::collection::vec(-5.0f64..5.0, 36), mask in proptest::collection::vec(any::<bool>(), 36)) {
        let cost = DMatrix::from_row_slice(6, 6, &vals);
        let allowed = |i: usize, j: usize| mask[i * 6 + j] || i == j;
        let c = CandidateSet { lists: (0..6).map(|i| (0..6).filter(|&j| allowed(i, j)).collect()).collect(), num_targets: 6 };
        let brute = perfect_matchings(&c).iter().map(|m| m.iter().enumerate().map(|(i, &j)| cost[(i, j)]).sum::<f64>()).fold(f64::INFINITY, f64::min);
        let (_, v) = min_cost_assignment(&cost, allowed).unwrap();
        prop_assert!((v - brute).abs() < 1e-9);
    }
}
