use std::process::ExitCode;
use std::time::Instant;

use nalgebra::{DMatrix, Matrix3, Vector3};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sparse_match::eval::{keypoint_errors, pck_curve, pck_curve_with, reconstruction_study, Prior};
use sparse_match::geodesics::{prune_candidates, CandidateSet};
use sparse_match::mesh::{Geometry, Point, Shape, TriMesh};
use sparse_match::model::{assemble_problem, assemble_with, eval_objective, Assignment, MatchProblem, ProblemOptions, Reconstruction, Weights};
use sparse_match::operators::{build_plbo, coordinates, cotan_stiffness, DeformationOperator};
use sparse_match::solver::{exhaustive_oracle, relative_gap, solve, solve_with_observer, SolveStatus, SolverConfig};
use sparse_match::spectral::{shape_features, FeatureConfig};
use sparse_match::synth;

type Outcome = Result<String, String>;

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-300)
}

fn fixtures() -> Vec<(&'static str, TriMesh)> {
    vec![
        ("cube", synth::unit_cube()),
        ("grid", synth::grid(9, 7, 1.3)),
        ("icosphere", synth::icosphere(2)),
        ("blob", synth::blob(2, 5)),
        ("bar", synth::bar(16, 8, 4.0, 0.6)),
    ]
}

fn as_shape(mesh: &TriMesh, name: &str) -> Shape {
    Shape::new(Geometry::Mesh(mesh.clone()), vec![0], name).unwrap()
}

fn plbo_dense(mesh: &TriMesh) -> DMatrix<f64> {
    build_plbo(&as_shape(mesh, "m")).unwrap().to_dense()
}

fn c1_plbo_rigid_invariance() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut worst: f64 = 0.0;
    let mut reflections = 0;
    for (name, mesh) in fixtures() {
        let base = plbo_dense(&mesh);
        let scale = base.amax();
        for _ in 0..20 {
            let r = synth::random_orthogonal(&mut rng);
            if r.determinant() < 0.0 {
                reflections += 1;
            }
            let t = synth::random_translation(&mut rng, 3.0);
            let moved = plbo_dense(&mesh.transformed(&r, &t));
            let dev = (&moved - &base).amax() / scale;
            worst = worst.max(dev);
            ensure(dev <= 1e-8, || format!("{name}: deviation {dev:e}"))?;
        }
    }
    ensure(reflections > 0, || "no reflections drawn".into())?;
    let secs = start.elapsed().as_secs_f64();
    ensure(secs < 10.0, || format!("took {secs:.2}s"))?;
    Ok(format!("max relative deviation {worst:.2e}, {reflections} reflections, {secs:.2}s"))
}

fn c2_plbo_null_space() -> Outcome {
    let mut worst: f64 = 0.0;
    for (name, mesh) in fixtures() {
        let op = build_plbo(&as_shape(&mesh, name)).unwrap();
        let x = coordinates(mesh.vertices());
        let n = mesh.num_vertices();
        let mut xt = DMatrix::from_element(n, 4, 1.0);
        xt.columns_mut(0, 3).copy_from(&x);
        let proj = op.apply(&xt).amax();
        let stiff = cotan_stiffness(&mesh).apply(&x).amax();
        let ratio = proj / stiff;
        worst = worst.max(ratio);
        ensure(ratio <= 1e-8, || format!("{name}: ratio {ratio:e}"))?;
    }
    Ok(format!("max ratio {worst:.2e}"))
}

fn random_permutation(rng: &mut ChaCha8Rng, n: usize) -> Assignment {
    let mut p: Vec<usize> = (0..n).collect();
    p.shuffle(rng);
    Assignment::from_permutation(&p)
}

fn random_points(rng: &mut ChaCha8Rng, rows: usize, scale: f64) -> DMatrix<f64> {
    DMatrix::from_fn(rows, 3, |_, _| rng.random_range(-scale..scale))
}

fn full_problem(x: &Shape, y: &Shape) -> MatchProblem {
    let n = x.num_keypoints();
    assemble_with(x, y, Weights::default(), &ProblemOptions::default(), Some(CandidateSet::all(n, n))).unwrap()
}

fn rigid_rows(m: &DMatrix<f64>, r: &Matrix3<f64>, t: &Point) -> DMatrix<f64> {
    let moved = m * r.transpose();
    DMatrix::from_fn(m.nrows(), 3, |i, c| moved[(i, c)] + t[c])
}

fn pointwise_identities() -> Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let mut worst: f64 = 0.0;
    for seed in [1u64, 2, 3] {
        let pair = synth::near_isometric_pair(2, 6, seed, 0.003);
        let (x, y) = (&pair.source, &pair.target);
        let base = full_problem(x, y);
        let s = [0.1, 0.5, 5.0, 10.0][seed as usize % 4];
        let scaled = full_problem(&x.scaled(s).unwrap(), y);
        let r = synth::random_rotation(&mut rng);
        let t = synth::random_translation(&mut rng, 2.0);
        let moved = full_problem(&x.transformed(&r, &t).unwrap(), y);
        let dy = y.diameter();
        let dx = x.diameter();
        for _ in 0..100 {
            let a = random_permutation(&mut rng, 6);
            let rec = Reconstruction {
                x_hat: random_points(&mut rng, x.num_points(), dy),
                y_hat: random_points(&mut rng, y.num_points(), dx),
            };
            let f = eval_objective(&base, &a, &rec).unwrap();
            let sc = Reconstruction { x_hat: rec.x_hat.clone(), y_hat: &rec.y_hat * s };
            let fs = eval_objective(&scaled, &a, &sc).unwrap();
            let mv = Reconstruction { x_hat: rec.x_hat.clone(), y_hat: rigid_rows(&rec.y_hat, &r, &t) };
            let fm = eval_objective(&moved, &a, &mv).unwrap();
            let d = rel(f, fs).max(rel(f, fm));
            worst = worst.max(d);
            ensure(d <= 1e-9, || format!("seed {seed}: {f} vs scaled {fs} vs moved {fm}"))?;
        }
    }
    Ok(format!("pointwise max rel {worst:.1e}"))
}

/// The oracle optimum, checked to be strictly better than every assignment
/// that differs from it in at least one row.
fn unique_optimum(p: &MatchProblem) -> Option<(Assignment, f64)> {
    let best = exhaustive_oracle(p).ok()?;
    if best.status != SolveStatus::Optimal {
        return None;
    }
    for i in 0..p.n_x() {
        let mut lists = p.candidates.lists.clone();
        let j = best.assignment.get(i).unwrap();
        lists[i].retain(|&c| c != j);
        if lists[i].is_empty() {
            continue;
        }
        let other = p.with_candidates(CandidateSet { lists, num_targets: p.candidates.num_targets }).ok()?;
        let o = exhaustive_oracle(&other).ok()?;
        if o.status == SolveStatus::Optimal && o.upper_bound <= best.upper_bound * (1.0 + 1e-3) {
            return None;
        }
    }
    Some((best.assignment, best.upper_bound))
}

fn c3_scale_and_rigid_invariance() -> Outcome {
    let start = Instant::now();
    let pointwise = pointwise_identities()?;
    let cfg = SolverConfig::default();
    let (pair, expected) = (1u64..20)
        .find_map(|seed| {
            let pair = synth::near_isometric_pair(2, 6, seed, 0.003);
            let p = assemble_problem(&pair.source, &pair.target, Weights::default(), 5, false).ok()?;
            unique_optimum(&p).map(|u| (pair, u))
        })
        .ok_or("no unique-optimum fixture found")?;
    let mut worst: f64 = 0.0;
    for s in [0.1, 0.5, 1.0, 5.0, 10.0] {
        let p = assemble_problem(&pair.source.scaled(s).unwrap(), &pair.target, Weights::default(), 5, false).unwrap();
        let sol = solve(&p, &cfg).unwrap();
        ensure(sol.status == SolveStatus::Optimal, || format!("s={s}: {:?}", sol.status))?;
        ensure(sol.assignment == expected.0, || format!("s={s}: assignment {:?} vs {:?}", sol.assignment, expected.0))?;
        let d = rel(sol.upper_bound, expected.1);
        worst = worst.max(d);
        ensure(d <= 1e-6, || format!("s={s}: objective {} vs {}", sol.upper_bound, expected.1))?;
    }
    let secs = start.elapsed().as_secs_f64();
    ensure(secs < 300.0, || format!("took {secs:.1}s"))?;
    Ok(format!("{pointwise}; sweep max rel {worst:.1e}, {secs:.1}s"))
}

fn c4_oracle_equivalence() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    let (mut done, mut skipped, mut seed) = (0, 0, 0u64);
    let mut worst: f64 = 0.0;
    while done < 25 {
        seed += 1;
        let n = rng.random_range(4..=8);
        let k = rng.random_range(3..=n);
        let pair = synth::near_isometric_pair(2, n, 1000 + seed, 0.003);
        let p = assemble_problem(&pair.source, &pair.target, Weights::default(), k, false).unwrap();
        let o = exhaustive_oracle(&p).unwrap();
        if o.status == SolveStatus::Infeasible {
            skipped += 1;
            continue;
        }
        let s = solve(&p, &SolverConfig::default()).unwrap();
        let d = rel(s.upper_bound, o.upper_bound);
        worst = worst.max(d);
        ensure(s.status == SolveStatus::Optimal, || format!("seed {seed} n={n} k={k}: {:?}", s.status))?;
        ensure(s.rel_gap < 1e-2, || format!("seed {seed}: gap {}", s.rel_gap))?;
        ensure(d <= 1e-6, || format!("seed {seed} n={n} k={k}: {} vs oracle {}", s.upper_bound, o.upper_bound))?;
        done += 1;
    }
    let secs = start.elapsed().as_secs_f64();
    ensure(secs < 600.0, || format!("took {secs:.1}s"))?;
    Ok(format!("25 fixtures, {skipped} infeasible skipped, max rel {worst:.1e}, {secs:.1}s"))
}

fn c5_zero_objective() -> Outcome {
    let mut slowest: f64 = 0.0;
    for (sub, n, seed) in [(3, 30, 1u64), (3, 20, 2), (2, 12, 3)] {
        let shape = synth::keypointed_blob(sub, n, seed);
        ensure(shape.num_points() <= 2000, || "fixture too large".into())?;
        let p = assemble_problem(&shape, &shape, Weights::default(), 11, false).unwrap();
        let t = Instant::now();
        let s = solve(&p, &SolverConfig::default()).unwrap();
        let secs = t.elapsed().as_secs_f64();
        slowest = slowest.max(secs);
        ensure(s.upper_bound.abs() < 1e-9, || format!("n={n}: objective {}", s.upper_bound))?;
        ensure(s.rel_gap == 0.0, || format!("n={n}: gap {}", s.rel_gap))?;
        ensure(s.assignment == Assignment::identity(n), || format!("n={n}: not identity"))?;
        ensure(secs < 1.0, || format!("n={n}: solve took {secs:.3}s"))?;
    }
    Ok(format!("slowest solve {slowest:.3}s"))
}

fn c6_gap() -> Outcome {
    ensure(relative_gap(2.0, 1.0) == 0.5, || "gap(2,1)".into())?;
    ensure(relative_gap(3.7, 3.7) == 0.0, || "gap(x,x)".into())?;
    ensure(relative_gap(0.0, 0.0) == 0.0, || "gap(0,0)".into())?;
    ensure(relative_gap(1e-13, -1e-13) == 0.0, || "zero convention".into())?;
    ensure(relative_gap(0.0, -1.0).is_infinite(), || "gap(0,l)".into())?;
    ensure(SolverConfig::default().gap_threshold == 1e-2, || "default threshold".into())?;
    let mut seen = Vec::new();
    for (n, seed, budget) in [(7, 5u64, 3600.0), (20, 4, 0.001), (8, 9, 3600.0), (20, 6, 0.05)] {
        let pair = synth::near_isometric_pair(if n > 10 { 3 } else { 2 }, n, seed, 0.003);
        let p = assemble_problem(&pair.source, &pair.target, Weights::default(), 11.min(n - 1), false).unwrap();
        let s = solve(&p, &SolverConfig { time_budget_secs: budget, ..SolverConfig::default() }).unwrap();
        match s.status {
            SolveStatus::Optimal => ensure(s.rel_gap < 1e-2, || format!("Optimal with gap {}", s.rel_gap))?,
            SolveStatus::TimeBudgetExceeded => ensure(s.rel_gap >= 1e-2, || format!("budget stop with gap {}", s.rel_gap))?,
            SolveStatus::Infeasible => return Err("unexpected infeasible".into()),
        }
        seen.push(format!("{:?}", s.status));
    }
    Ok(format!("unit cases ok; statuses {}", seen.join(",")))
}

fn c7_pruning() -> Outcome {
    let (mut total, mut kept) = (0, 0);
    for seed in 0..8u64 {
        for n in [12, 20, 30] {
            let pair = synth::near_isometric_pair(3, n, 700 + seed, 0.003);
            let c = prune_candidates(&pair.source, &pair.target, 11).unwrap();
            for (i, &j) in pair.ground_truth.iter().enumerate() {
                total += 1;
                if c.allows(i, j) {
                    kept += 1;
                }
            }
        }
    }
    ensure(kept == total, || format!("retained {kept}/{total}"))?;
    let mut rng = ChaCha8Rng::seed_from_u64(707);
    let pair = synth::near_isometric_pair(2, 20, 3, 0.003);
    let base = prune_candidates(&pair.source, &pair.target, 11).unwrap();
    for _ in 0..5 {
        let r = synth::random_orthogonal(&mut rng);
        let t = synth::random_translation(&mut rng, 4.0);
        let s = rng.random_range(0.1..10.0);
        let x = pair.source.transformed(&r, &t).unwrap().scaled(s).unwrap();
        let y = pair.target.scaled(1.0 / s).unwrap();
        ensure(prune_candidates(&x, &pair.target, 11).unwrap() == base, || "source motion changed candidates".into())?;
        ensure(prune_candidates(&pair.source, &y, 11).unwrap() == base, || "target scaling changed candidates".into())?;
    }
    Ok(format!("ground truth retained {kept}/{total}; invariant under 5 similarity transforms"))
}

fn c8_orientation() -> Outcome {
    let h_of = |s: &Shape| shape_features(s, &FeatureConfig::default()).unwrap().orientation.h;
    let shape = synth::keypointed_blob(2, 4, 21);
    let h = h_of(&shape);
    let bound = h.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    ensure(bound <= 1.0 + 1e-12, || format!("|h| reaches {bound}"))?;
    let mut rng = ChaCha8Rng::seed_from_u64(808);
    let mut rot_dev: f64 = 0.0;
    for _ in 0..3 {
        let r = synth::random_rotation(&mut rng);
        let t = synth::random_translation(&mut rng, 2.0);
        let hr = h_of(&shape.transformed(&r, &t).unwrap());
        rot_dev = rot_dev.max(h.iter().zip(&hr).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max));
    }
    ensure(rot_dev <= 1e-8, || format!("rotation deviation {rot_dev:e}"))?;
    let mirror = Matrix3::from_diagonal(&Vector3::new(-1.0, 1.0, 1.0));
    let mesh = shape.mesh().unwrap().transformed(&mirror, &Point::zeros()).flipped();
    let reflected = Shape::new(Geometry::Mesh(mesh), shape.keypoints().to_vec(), "mirror").unwrap();
    let hm = h_of(&reflected);
    let ref_dev = h.iter().zip(&hm).map(|(a, b)| (a + b).abs()).fold(0.0, f64::max);
    ensure(ref_dev <= 1e-8, || format!("reflection deviation {ref_dev:e}"))?;

    let weights: Weights = serde_json::from_str(r#"{"lambda_def": 5.0, "lambda_ori": 0.0}"#).map_err(|e| e.to_string())?;
    let pair = synth::near_isometric_pair(2, 5, 11, 0.003);
    let p = assemble_problem(&pair.source, &pair.target, weights, 4, false).unwrap();
    ensure(p.orientation_x.is_none() && p.weights.lambda_ori == 0.0, || "orientation still active".into())?;
    let s = solve(&p, &SolverConfig::default()).unwrap();
    ensure(s.status == SolveStatus::Optimal, || format!("ablation: {:?}", s.status))?;
    Ok(format!("max|h| {bound:.3}, rotation dev {rot_dev:.1e}, reflection dev {ref_dev:.1e}; ablation solved"))
}

fn c9_reconstruction() -> Outcome {
    let pair = synth::bent_bar_pair(8, 0.3);
    let gt = Assignment::identity(8);
    let lbo = reconstruction_study(&pair.source, &pair.target, &gt, Prior::Lbo, 5.0).unwrap().rms.ok_or("no rms")?;
    let plbo = reconstruction_study(&pair.source, &pair.target, &gt, Prior::Plbo, 5.0).unwrap().rms.ok_or("no rms")?;
    ensure(plbo < lbo, || format!("rms PLBO {plbo} vs LBO {lbo}"))?;
    let same = reconstruction_study(&pair.source, &pair.source, &gt, Prior::Plbo, 5.0).unwrap().rms.ok_or("no rms")?;
    let d = pair.source.diameter();
    ensure(same <= 1e-6 * d, || format!("same pose rms {same} vs d {d}"))?;
    Ok(format!("rms PLBO {plbo:.4} < LBO {lbo:.4}; same pose {same:.1e}"))
}

fn c10_pck() -> Outcome {
    let pair = synth::near_isometric_pair(2, 10, 5, 0.003);
    let gt = Assignment::from_permutation(&pair.ground_truth);
    let auc = pck_curve(&keypoint_errors(&gt, &gt, &pair.target).unwrap()).unwrap().auc;
    ensure(auc == 1.0, || format!("identity auc {auc}"))?;
    let c = pck_curve_with(&[0.0, 0.3, 0.3, 0.6, 2.0], &[0.0, 0.25, 0.5, 0.75, 1.0]).unwrap();
    ensure(c.fractions == vec![0.2, 0.2, 0.6, 0.8, 0.8], || format!("fractions {:?}", c.fractions))?;
    let expected = 0.25 * (0.2 + 0.2) / 2.0 + 0.25 * (0.2 + 0.6) / 2.0 + 0.25 * (0.6 + 0.8) / 2.0 + 0.25 * (0.8 + 0.8) / 2.0;
    ensure((c.auc - expected).abs() < 1e-15, || format!("auc {} vs {expected}", c.auc))?;
    let d = pck_curve_with(&[1.0, 1.0], &[0.0, 0.5, 1.0]).unwrap();
    ensure(d.fractions == vec![0.0, 0.0, 1.0] && (d.auc - 0.25).abs() < 1e-15, || format!("{:?} {}", d.fractions, d.auc))?;
    Ok("identity auc 1; hand curves exact".into())
}

fn c11_anytime() -> Outcome {
    let pair = synth::near_isometric_pair(3, 20, 4, 0.003);
    let p = assemble_problem(&pair.source, &pair.target, Weights::default(), 11, false).unwrap();
    let mut lines = Vec::new();
    for budget in [0.001, 0.01, 0.1, 1.0] {
        let mut trace = Vec::new();
        let s = solve_with_observer(&p, &SolverConfig { time_budget_secs: budget, ..SolverConfig::default() }, &mut |c| trace.push(*c)).unwrap();
        ensure(!trace.is_empty(), || format!("budget {budget}: empty trace"))?;
        ensure(s.lower_bound <= s.upper_bound, || format!("budget {budget}: {} > {}", s.lower_bound, s.upper_bound))?;
        ensure(s.assignment.check(&p.candidates, false).is_ok(), || format!("budget {budget}: infeasible incumbent"))?;
        for c in &trace {
            ensure(c.lower <= c.upper, || format!("budget {budget}: checkpoint {c:?}"))?;
        }
        for w in trace.windows(2) {
            ensure(w[1].upper <= w[0].upper && w[1].lower >= w[0].lower && w[1].t_secs >= w[0].t_secs, || {
                format!("budget {budget}: non-monotone {:?} -> {:?}", w[0], w[1])
            })?;
        }
        lines.push(format!("{budget}s:{:?}/{}cp", s.status, trace.len()));
    }
    Ok(lines.join(" "))
}

fn main() -> ExitCode {
    let criteria: [(&str, fn() -> Outcome); 11] = [
        ("PLBO invariant under rigid motions", c1_plbo_rigid_invariance),
        ("PLBO null space contains (X 1)", c2_plbo_null_space),
        ("objective scale and rigid invariance", c3_scale_and_rigid_invariance),
        ("branch-and-bound matches exhaustive oracle", c4_oracle_equivalence),
        ("identical shapes solve to zero", c5_zero_objective),
        ("relative gap and certification", c6_gap),
        ("pruning retention and invariance", c7_pruning),
        ("orientation feature", c8_orientation),
        ("PLBO vs LBO reconstruction", c9_reconstruction),
        ("PCK and AUC", c10_pck),
        ("anytime bounds", c11_anytime),
    ];
    let filter = std::env::args().skip(1).find(|a| !a.starts_with('-'));
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let id = i + 1;
        if filter.as_ref().is_some_and(|w| w.parse::<usize>().map_or(!name.contains(w.as_str()), |n| n != id)) {
            continue;
        }
        let t = Instant::now();
        let result = std::panic::catch_unwind(f).unwrap_or_else(|_| Err("panicked".into()));
        let secs = t.elapsed().as_secs_f64();
        match result {
            Ok(detail) => println!("PASS {id:>2} {name} ({secs:.1}s): {detail}"),
            Err(why) => {
                failed += 1;
                println!("FAIL {id:>2} {name} ({secs:.1}s): {why}");
            }
        }
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
