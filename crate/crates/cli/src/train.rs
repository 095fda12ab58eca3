use std::path::Path;

use serde_json::json;
use silc::config::ExperimentConfig;
use silc::trainer::{train, Checkpoint, TrainError, LATEST_CHECKPOINT};

use crate::error::{create_dir, to_pretty_json, write_file, CliError};
use crate::TrainArgs;

pub const RESOLVED_CONFIG: &str = "config.resolved.json";
pub const FAILURE_FILE: &str = "failure.json";

pub fn run(args: &TrainArgs) -> Result<(), CliError> {
    let mut cfg = ExperimentConfig::load(&args.config)?;
    if let Some(out) = &args.out {
        cfg.output_dir = out.clone();
    }
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if let Some(n) = args.iterations {
        cfg.train.total_iterations = n;
    }
    cfg.validate()?;
    let cfg = cfg.resolved()?;
    let out = cfg.output_dir.clone();
    create_dir(&out)?;
    write_file(&out.join(RESOLVED_CONFIG), cfg.to_json() + "\n")?;

    let resume = if args.resume {
        let p = out.join(LATEST_CHECKPOINT);
        if p.exists() {
            Some(Checkpoint::load(&p)?)
        } else {
            None
        }
    } else {
        None
    };
    let every = args.progress_every;
    let outcome = train(cfg.arm.clone(), cfg.train_config(), &out, resume, |row| {
        if every > 0 && row.iteration % every == 0 {
            eprintln!(
                "iter {:>5}  reward {:.4}  penalty {:.4e}  |A| p95 {:.3}",
                row.iteration, row.mean_reward, row.stats.penalty_mean, row.a_norm_p95
            );
        }
    });
    match outcome {
        Ok(o) => {
            println!("{}", o.checkpoint.display());
            Ok(())
        }
        Err(e) => {
            write_failure(&out, &e)?;
            Err(e.into())
        }
    }
}

fn write_failure(out: &Path, e: &TrainError) -> Result<(), CliError> {
    let iteration = match e {
        TrainError::NonFiniteLoss { iteration, .. } => json!(iteration),
        _ => serde_json::Value::Null,
    };
    let body = json!({
        "error": e.to_string(),
        "iteration": iteration,
        "log": silc::trainer::LOG_FILE,
    });
    write_file(&out.join(FAILURE_FILE), to_pretty_json(&body))
}
