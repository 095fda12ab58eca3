use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use serde_json::{json, Value};
use silc::config::{BudgetSpec, ExperimentConfig};
use silc::metrics::{budget_schedule, load_response, report, settling_time, SETTLING_BAND};
use silc::sim::{
    run_episode_partial, DisturbanceKind, DisturbanceProfile, EpisodeOptions, Rollout,
};
use silc::trainer::Checkpoint;

use crate::error::{create_dir, num, to_pretty_json, write_file, CliError};
use crate::PerturbArgs;

pub const ROLLOUT_FILE: &str = "rollout.jsonl";
pub const DEFLECTION_FILE: &str = "deflection.csv";
pub const SUMMARY_FILE: &str = "summary.json";
/// Averaging window for pre- and post-event positions (s).
const POSITION_WINDOW: f64 = 0.5;

pub fn run(args: &PerturbArgs) -> Result<(), CliError> {
    let ck = Checkpoint::load(&args.checkpoint)?;
    let disturbance = parse_disturbance(args)?;
    let budget = match &args.config {
        Some(p) => ExperimentConfig::load(p)?.budget,
        None => ck.config.budget.clone(),
    };
    budget.values()?;
    let opts = EpisodeOptions {
        command: (!args.random_command).then(|| ck.model.nominal_point()),
        ..EpisodeOptions::default()
    };
    let (rollout, failure) = run_episode_partial(
        &ck.model,
        &ck.policy,
        &ck.layout,
        &disturbance,
        args.duration,
        args.seed,
        &opts,
    )?;
    create_dir(&args.out)?;
    write_rollout(&args.out.join(ROLLOUT_FILE), &rollout)?;
    write_deflection(&args.out.join(DEFLECTION_FILE), &rollout, &disturbance)?;

    let mut summary = json!({
        "checkpoint": args.checkpoint.display().to_string(),
        "seed": args.seed,
        "duration": args.duration,
        "steps": rollout.len(),
        "disturbance": serde_json::to_value(&disturbance).expect("disturbance serializes"),
        "budget": serde_json::to_value(budget.resolved()?).expect("budget serializes"),
    });
    if let Some(e) = failure {
        summary["error"] = json!(e.to_string());
        write_file(&args.out.join(SUMMARY_FILE), to_pretty_json(&summary))?;
        return Err(e.into());
    }
    annotate(&mut summary, &rollout, &disturbance);
    let budgets = schedule(&rollout, &budget, &ck)?;
    let metrics = report(&rollout, &budgets, &ck.model.gains, &ck.policy, &ck.layout)?;
    summary["metrics"] = metrics.to_json_value();
    write_file(&args.out.join(SUMMARY_FILE), to_pretty_json(&summary))?;
    println!("{}", args.out.display());
    Ok(())
}

pub fn schedule(
    rollout: &Rollout,
    budget: &BudgetSpec,
    ck: &Checkpoint,
) -> Result<Vec<silc::stiffness::StiffnessBudget>, CliError> {
    Ok(budget_schedule(rollout, |q| budget.build(&ck.model, q))?)
}

fn parse_disturbance(args: &PerturbArgs) -> Result<DisturbanceProfile, CliError> {
    let d = match args.disturbance.as_str() {
        "none" => DisturbanceProfile::none(),
        "impulse" | "impact" => DisturbanceProfile::impact(args.start),
        "constant" | "load" => DisturbanceProfile::constant_load(args.start, args.load_duration),
        path => {
            let p = Path::new(path);
            let s = std::fs::read_to_string(p).map_err(|e| CliError::io(p, e))?;
            serde_json::from_str(&s)
                .map_err(|e| CliError::config(format!("{}: {e}", p.display())))?
        }
    };
    d.validate()
        .map_err(|e| CliError::config(format!("disturbance: {e}")))?;
    Ok(d)
}

fn write_rollout(path: &Path, rollout: &Rollout) -> Result<(), CliError> {
    let f = File::create(path).map_err(|e| CliError::io(path, e))?;
    rollout.write_jsonl(BufWriter::new(f))?;
    Ok(())
}

fn mean_position(rollout: &Rollout, from: f64, to: f64) -> Option<[f64; 2]> {
    let pts: Vec<[f64; 2]> = rollout
        .steps
        .iter()
        .filter(|s| s.t >= from && s.t < to)
        .map(|s| s.x)
        .collect();
    if pts.is_empty() {
        return None;
    }
    let n = pts.len() as f64;
    Some([
        pts.iter().map(|p| p[0]).sum::<f64>() / n,
        pts.iter().map(|p| p[1]).sum::<f64>() / n,
    ])
}

/// Reference position the deflection is measured from.
fn reference(rollout: &Rollout, d: &DisturbanceProfile) -> [f64; 2] {
    let first = rollout.steps.first().map(|s| s.x).unwrap_or([0.0, 0.0]);
    let start = match d.kind {
        DisturbanceKind::None => POSITION_WINDOW,
        _ => d.start,
    };
    mean_position(rollout, start - POSITION_WINDOW, start).unwrap_or(first)
}

fn event_markers(rollout: &Rollout, d: &DisturbanceProfile) -> Vec<&'static str> {
    let mut out = vec![""; rollout.len()];
    let mut prev = [0.0, 0.0];
    for (k, s) in rollout.steps.iter().enumerate() {
        let on = s.ext_force != [0.0, 0.0];
        let was_on = prev != [0.0, 0.0];
        out[k] = match (d.kind, was_on, on) {
            (DisturbanceKind::Impulse, false, true) => "impact",
            (DisturbanceKind::Constant, false, true) => "load_on",
            (DisturbanceKind::Constant, true, false) => "load_off",
            _ => "",
        };
        prev = s.ext_force;
    }
    out
}

fn write_deflection(path: &Path, rollout: &Rollout, d: &DisturbanceProfile) -> Result<(), CliError> {
    let r = reference(rollout, d);
    let markers = event_markers(rollout, d);
    let mut w = csv::Writer::from_path(path).map_err(|e| CliError::io(path, e))?;
    let io = |e: csv::Error| CliError::io(path, e);
    w.write_record(["t", "x", "y", "dx", "dy", "fx", "fy", "event"])
        .map_err(io)?;
    for (s, m) in rollout.steps.iter().zip(markers) {
        w.write_record([
            s.t.to_string(),
            s.x[0].to_string(),
            s.x[1].to_string(),
            (s.x[0] - r[0]).to_string(),
            (s.x[1] - r[1]).to_string(),
            s.ext_force[0].to_string(),
            s.ext_force[1].to_string(),
            m.to_string(),
        ])
        .map_err(io)?;
    }
    w.flush().map_err(|e| CliError::io(path, e))
}

fn annotate(summary: &mut Value, rollout: &Rollout, d: &DisturbanceProfile) {
    let times = rollout.times();
    let end = times.last().copied().unwrap_or(0.0) + rollout.dt;
    let pre = reference(rollout, d);
    let pos = |p: [f64; 2]| json!([num(p[0]), num(p[1])]);
    summary["pre_position"] = pos(pre);
    match d.kind {
        DisturbanceKind::None => {
            summary["event_time"] = Value::Null;
            if let Some(p) = mean_position(rollout, end - POSITION_WINDOW, end) {
                summary["post_position"] = pos(p);
            }
        }
        DisturbanceKind::Impulse => {
            summary["event_time"] = json!(d.start);
            let dev: Vec<f64> = rollout
                .steps
                .iter()
                .map(|s| ((s.x[0] - pre[0]).powi(2) + (s.x[1] - pre[1]).powi(2)).sqrt())
                .collect();
            let peak = times
                .iter()
                .zip(&dev)
                .filter(|(t, _)| **t >= d.start)
                .map(|(_, v)| *v)
                .fold(0.0, f64::max);
            summary["peak_deflection"] = num(peak);
            if let Some(p) = mean_position(rollout, end - POSITION_WINDOW, end) {
                summary["post_position"] = pos(p);
            }
            let axis = if d.force[1].abs() >= d.force[0].abs() { 1 } else { 0 };
            let signal: Vec<f64> = rollout.steps.iter().map(|s| s.x[axis] - pre[axis]).collect();
            match settling_time(&times, &signal, d.start, SETTLING_BAND) {
                Ok(t) => summary["settling_time"] = num(t),
                Err(e) => {
                    summary["settling_time"] = Value::Null;
                    summary["settling_error"] = json!(e.to_string());
                }
            }
        }
        DisturbanceKind::Constant => {
            let t_on = d.start;
            let t_off = (d.start + d.duration).min(end);
            summary["event_time"] = json!(t_on);
            summary["load_off_time"] = json!(t_off);
            if let Some(p) = mean_position(rollout, t_off - POSITION_WINDOW, t_off) {
                summary["post_position"] = pos(p);
            }
            let mut per_axis = Vec::new();
            for axis in 0..2 {
                if d.force[axis] == 0.0 {
                    per_axis.push(Value::Null);
                    continue;
                }
                let x: Vec<f64> = rollout.steps.iter().map(|s| s.x[axis]).collect();
                let entry = match load_response(&times, &x, t_on, t_off, d.force[axis], POSITION_WINDOW) {
                    Ok(r) => json!({
                        "deflection": num(r.deflection),
                        "settling_time": num(r.settling_time),
                        "stiffness": num(r.stiffness),
                    }),
                    Err(e) => {
                        let steady = mean_position(rollout, t_off - POSITION_WINDOW, t_off)
                            .map(|p| p[axis] - pre[axis])
                            .unwrap_or(f64::NAN);
                        json!({
                            "deflection": num(steady),
                            "settling_time": Value::Null,
                            "stiffness": Value::Null,
                            "error": e.to_string(),
                        })
                    }
                };
                per_axis.push(entry);
            }
            summary["load_response"] = json!({ "x": per_axis[0], "y": per_axis[1] });
        }
    }
}
