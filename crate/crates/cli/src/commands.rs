use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context, Result};
use serde::Serialize;
use sparse_match::eval::{keypoint_errors, pck_curve, reconstruction_study, scale_sweep, sweep_csv, Prior};
use sparse_match::io::load_shape;
use sparse_match::mesh::Shape;
use sparse_match::model::{assemble_with, Assignment, MatchProblem};
use sparse_match::solver::{exhaustive_oracle, solve_with_observer, MatchSolution, SolveStatus};
use sparse_match::spectral::{features_csv, shape_features};

use crate::config::{RunArgs, RunConfig};
use crate::output::{
    hash_header, hash_inputs, load_assignment, load_solution_meta, write_json, write_reconstruction, write_solution,
    write_text, InputHash,
};

struct Inputs {
    cfg: RunConfig,
    out: PathBuf,
    shape_x: Shape,
    shape_y: Option<Shape>,
    hashes: Vec<InputHash>,
}

fn keypoints_for(shape: &Path, explicit: Option<&PathBuf>) -> PathBuf {
    explicit.cloned().unwrap_or_else(|| shape.with_extension("kp.txt"))
}

fn load_inputs(run: &RunArgs, need_y: bool) -> Result<Inputs> {
    let cfg = run.resolve()?;
    let sx = run.shape_x.as_ref().ok_or_else(|| anyhow!("--shape-x is required"))?;
    let kx = keypoints_for(sx, run.keypoints_x.as_ref());
    let shape_x = load_shape(sx, &kx, &cfg.load)?;
    let mut roles: Vec<(&str, &Path)> = vec![("shape_x", sx), ("keypoints_x", &kx)];
    let ky;
    let shape_y = match &run.shape_y {
        Some(sy) => {
            ky = keypoints_for(sy, run.keypoints_y.as_ref());
            let s = load_shape(sy, &ky, &cfg.load)?;
            roles.push(("shape_y", sy));
            roles.push(("keypoints_y", &ky));
            Some(s)
        }
        None if need_y => return Err(anyhow!("--shape-y is required")),
        None => None,
    };
    if let Some(c) = &run.config {
        roles.push(("config", c));
    }
    let hashes = hash_inputs(&roles)?;
    let out = cfg.out_dir();
    fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    Ok(Inputs { cfg, out, shape_x, shape_y, hashes })
}

#[derive(Serialize)]
struct ConfigEcho<'a> {
    config: &'a RunConfig,
    inputs: &'a [InputHash],
}

fn echo_config(inp: &Inputs) -> Result<()> {
    write_json(&inp.out.join("config.json"), &ConfigEcho { config: &inp.cfg, inputs: &inp.hashes })
}

fn assemble(inp: &Inputs) -> Result<MatchProblem> {
    let y = inp.shape_y.as_ref().expect("target loaded");
    Ok(assemble_with(&inp.shape_x, y, inp.cfg.weights, &inp.cfg.problem, None)?)
}

fn exit_code(status: SolveStatus) -> u8 {
    match status {
        SolveStatus::Optimal => 0,
        SolveStatus::TimeBudgetExceeded => 2,
        SolveStatus::Infeasible => 3,
    }
}

fn report(sol: &MatchSolution) {
    log::info!(
        "{:?}: objective {:e}, lower bound {:e}, gap {:e}",
        sol.status,
        sol.upper_bound,
        sol.lower_bound,
        sol.rel_gap
    );
}

pub fn cmd_match(run: &RunArgs) -> Result<u8> {
    let inp = load_inputs(run, true)?;
    echo_config(&inp)?;
    let problem = assemble(&inp)?;
    let log_path = inp.out.join("checkpoints.ndjson");
    let mut log = BufWriter::new(File::create(&log_path).with_context(|| format!("creating {}", log_path.display()))?);
    writeln!(log, "{}", serde_json::json!({ "inputs": inp.hashes }))?;
    log.flush()?;
    let mut write_err = None;
    let sol = solve_with_observer(&problem, &inp.cfg.solver, &mut |cp| {
        let line = serde_json::to_string(cp).expect("checkpoint serializes");
        if let Err(e) = writeln!(log, "{line}").and_then(|_| log.flush()) {
            write_err.get_or_insert(e);
        }
    })?;
    if let Some(e) = write_err {
        return Err(e).with_context(|| format!("writing {}", log_path.display()));
    }
    write_solution(&inp.out, &inp.shape_x, inp.shape_y.as_ref().unwrap(), &sol, &inp.hashes)?;
    report(&sol);
    Ok(exit_code(sol.status))
}

pub fn cmd_oracle(run: &RunArgs) -> Result<u8> {
    let inp = load_inputs(run, true)?;
    echo_config(&inp)?;
    let problem = assemble(&inp)?;
    let sol = exhaustive_oracle(&problem)?;
    write_solution(&inp.out, &inp.shape_x, inp.shape_y.as_ref().unwrap(), &sol, &inp.hashes)?;
    report(&sol);
    Ok(exit_code(sol.status))
}

pub fn cmd_features(run: &RunArgs) -> Result<u8> {
    let inp = load_inputs(run, false)?;
    let header = hash_header(&inp.hashes);
    for (name, shape) in [("features_x.csv", Some(&inp.shape_x)), ("features_y.csv", inp.shape_y.as_ref())] {
        let Some(shape) = shape else { continue };
        let f = shape_features(shape, &inp.cfg.problem.features)?;
        write_text(&inp.out.join(name), &format!("{header}{}", features_csv(&f)))?;
    }
    Ok(0)
}

#[derive(Serialize)]
struct ReconstructionOut<'a> {
    prior: Prior,
    objective: f64,
    rms: Option<f64>,
    x_hat_path: String,
    y_hat_path: String,
    inputs: &'a [InputHash],
}

pub fn cmd_reconstruct(run: &RunArgs, ground_truth: Option<&Path>, prior: Prior) -> Result<u8> {
    let mut inp = load_inputs(run, true)?;
    let gt = match ground_truth {
        Some(p) => {
            inp.hashes.extend(hash_inputs(&[("ground_truth", p)])?);
            load_assignment(p)?
        }
        None => Assignment::identity(inp.shape_x.num_keypoints()),
    };
    let y = inp.shape_y.as_ref().unwrap();
    let study = reconstruction_study(&inp.shape_x, y, &gt, prior, inp.cfg.weights.lambda_def)?;
    let (xp, yp) = write_reconstruction(&inp.out, &inp.shape_x, y, &study.reconstruction, &inp.hashes)?;
    let name = |p: &Path| p.file_name().unwrap().to_string_lossy().into_owned();
    write_json(
        &inp.out.join("reconstruction.json"),
        &ReconstructionOut {
            prior,
            objective: study.objective,
            rms: study.rms,
            x_hat_path: name(&xp),
            y_hat_path: name(&yp),
            inputs: &inp.hashes,
        },
    )?;
    Ok(0)
}

#[derive(Serialize)]
struct EvalOut<'a> {
    errors: Vec<f64>,
    mean_error: f64,
    auc: f64,
    rel_gap: Option<f64>,
    status: Option<SolveStatus>,
    runtime_secs: Option<f64>,
    inputs: &'a [InputHash],
}

pub fn cmd_eval(run: &RunArgs, prediction: &Path, ground_truth: &Path) -> Result<u8> {
    let mut inp = load_inputs(run, true)?;
    inp.hashes.extend(hash_inputs(&[("prediction", prediction), ("ground_truth", ground_truth)])?);
    let pred = load_assignment(prediction)?;
    let gt = load_assignment(ground_truth)?;
    let errors = keypoint_errors(&pred, &gt, inp.shape_y.as_ref().unwrap())?;
    let pck = pck_curve(&errors)?;
    let meta = load_solution_meta(prediction);
    let header = hash_header(&inp.hashes);
    write_text(&inp.out.join("pck.csv"), &format!("{header}{}", pck.to_csv()))?;
    write_json(
        &inp.out.join("eval.json"),
        &EvalOut {
            mean_error: errors.iter().sum::<f64>() / errors.len() as f64,
            errors,
            auc: pck.auc,
            rel_gap: meta.as_ref().map(|m| m.rel_gap),
            status: meta.as_ref().map(|m| m.status),
            runtime_secs: meta.as_ref().map(|m| m.stats.wall_secs),
            inputs: &inp.hashes,
        },
    )?;
    println!("auc {}", pck.auc);
    Ok(0)
}

pub fn cmd_sweep(run: &RunArgs, factors: &[f64], ground_truth: Option<&Path>) -> Result<u8> {
    let mut inp = load_inputs(run, true)?;
    echo_config(&inp)?;
    let gt = match ground_truth {
        Some(p) => {
            inp.hashes.extend(hash_inputs(&[("ground_truth", p)])?);
            load_assignment(p)?
        }
        None => Assignment::identity(inp.shape_x.num_keypoints()),
    };
    let y = inp.shape_y.as_ref().unwrap();
    let entries = scale_sweep(&inp.shape_x, y, &gt, factors, inp.cfg.weights, &inp.cfg.problem, &inp.cfg.solver)?;
    for e in &entries {
        let dir = inp.out.join(format!("factor_{}", e.factor));
        fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
        write_solution(&dir, &inp.shape_x, &y.scaled(e.factor)?, &e.solution, &inp.hashes)?;
    }
    write_text(&inp.out.join("sweep.csv"), &format!("{}{}", hash_header(&inp.hashes), sweep_csv(&entries)))?;
    Ok(0)
}
