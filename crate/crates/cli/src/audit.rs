use std::fs::File;
use std::io::BufReader;

use serde_json::json;
use silc::config::{BudgetMode, BudgetSpec, ExperimentConfig};
use silc::metrics::{audit_rollout, AUDIT_DIRECTIONS};
use silc::sim::Rollout;
use silc::trainer::Checkpoint;

use crate::error::{create_dir, num, to_pretty_json, write_file, CliError};
use crate::perturb::schedule;
use crate::AuditArgs;

pub const AUDIT_FILE: &str = "audit.csv";
pub const AUDIT_SUMMARY_FILE: &str = "audit_summary.json";

pub fn run(args: &AuditArgs) -> Result<(), CliError> {
    let f = File::open(&args.rollout).map_err(|e| CliError::io(&args.rollout, e))?;
    let rollout = Rollout::read_jsonl(BufReader::new(f))?;
    if rollout.is_empty() {
        return Err(CliError::config(format!(
            "{}: rollout has no steps",
            args.rollout.display()
        )));
    }
    let ck = Checkpoint::load(&args.checkpoint)?;
    let budget = budget_spec(args, &ck)?;
    let budgets = schedule(&rollout, &budget, &ck)?;
    let audit = audit_rollout(
        &rollout,
        &budgets,
        &ck.model.gains,
        &ck.policy,
        &ck.layout,
        args.seed,
    )?;

    create_dir(&args.out)?;
    let path = args.out.join(AUDIT_FILE);
    let io = |e: csv::Error| CliError::io(&path, e);
    let mut w = csv::Writer::from_path(&path).map_err(io)?;
    w.write_record(["step", "t", "direction", "lhs", "rhs", "violated"])
        .map_err(io)?;
    for r in &audit.rows {
        w.write_record([
            r.step.to_string(),
            r.t.to_string(),
            r.direction.to_string(),
            r.lhs.to_string(),
            r.rhs.to_string(),
            (r.violated as u8).to_string(),
        ])
        .map_err(io)?;
    }
    w.flush().map_err(|e| CliError::io(&path, e))?;

    let rebuilds = budgets
        .windows(2)
        .filter(|w| w[0].config_q() != w[1].config_q())
        .count();
    let summary = json!({
        "rollout": args.rollout.display().to_string(),
        "checkpoint": args.checkpoint.display().to_string(),
        "budget": serde_json::to_value(budget.resolved()?).expect("budget serializes"),
        "seed": args.seed,
        "steps": rollout.len(),
        "directions_per_step": AUDIT_DIRECTIONS,
        "samples": audit.rows.len(),
        "violation_rate": num(audit.violation_rate),
        "max_violation": num(audit.max_violation),
        "max_relative_violation": num(audit.max_relative_violation),
        "mean_antisymmetric_residual": num(audit.mean_antisymmetric_residual),
        "stacked_violation_rate": num(audit.stacked_violation_rate),
        "budget_rebuilds": rebuilds,
    });
    write_file(&args.out.join(AUDIT_SUMMARY_FILE), to_pretty_json(&summary))?;
    println!(
        "violation rate {:.4}  max violation {:.4e}",
        audit.violation_rate, audit.max_violation
    );
    Ok(())
}

fn budget_spec(args: &AuditArgs, ck: &Checkpoint) -> Result<BudgetSpec, CliError> {
    let mut spec = match &args.config {
        Some(p) => ExperimentConfig::load(p)?.budget,
        None => ck.config.budget.clone(),
    };
    if let Some(name) = &args.budget {
        let mode: BudgetMode = serde_json::from_value(json!(name)).map_err(|_| {
            CliError::config(format!(
                "unknown budget mode `{name}` (expected high-stiff, compliance, hard-nullspace or custom)"
            ))
        })?;
        spec = BudgetSpec::preset(mode);
    }
    if let Some(kx) = &args.kx_max {
        spec.kx_max = Some([kx[0], kx[1]]);
    }
    if let Some(k) = args.k_null {
        spec.k_null = Some(k);
    }
    spec.values()?;
    Ok(spec)
}
