use std::fs::File;
use std::io::BufReader;
use std::path::{Path, PathBuf};

use serde_json::Value;
use silc::metrics::MetricsReport;
use silc::sim::Rollout;

use crate::audit::AUDIT_FILE;
use crate::error::{create_dir, write_file, CliError};
use crate::perturb::{DEFLECTION_FILE, ROLLOUT_FILE, SUMMARY_FILE};
use crate::svg::{bar_groups, line_panels, Panel, Series};
use crate::ReportArgs;

const BAR_METRICS: [&str; 6] = [
    "action_jitter",
    "dofvel_jitter",
    "torque_jitter",
    "energy",
    "budget_violation_rate",
    "hf_energy",
];

struct Run {
    label: String,
    dir: PathBuf,
    rollout: Rollout,
    metrics: Option<serde_json::Map<String, Value>>,
    deflection: Deflection,
    audit: Option<Vec<(f64, usize, f64, f64)>>,
}

struct Deflection {
    t: Vec<f64>,
    dx: Vec<f64>,
    dy: Vec<f64>,
    events: Vec<f64>,
}

pub fn run(args: &ReportArgs) -> Result<(), CliError> {
    let runs = args
        .runs
        .iter()
        .map(|s| load_run(s))
        .collect::<Result<Vec<_>, _>>()?;
    create_dir(&args.out)?;
    let timestamp = args.timestamp.then(|| {
        let secs = std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0);
        format!("unix {secs}")
    });
    let ts = timestamp.as_deref();

    write_comparison(&args.out, &runs)?;
    write_traces(&args.out, &runs)?;

    let provenance: Vec<String> = runs
        .iter()
        .map(|r| format!("{} = {} ({} steps)", r.label, r.dir.join(ROLLOUT_FILE).display(), r.rollout.len()))
        .collect();
    let panels: Vec<Panel> = runs
        .iter()
        .map(|r| Panel {
            title: r.label.clone(),
            series: vec![
                Series {
                    label: "dx".into(),
                    xs: r.deflection.t.clone(),
                    ys: r.deflection.dx.clone(),
                    dashed: true,
                },
                Series {
                    label: "dy".into(),
                    xs: r.deflection.t.clone(),
                    ys: r.deflection.dy.clone(),
                    dashed: false,
                },
            ],
            markers: r.deflection.events.clone(),
        })
        .collect();
    write_file(
        &args.out.join("deflection.svg"),
        line_panels("End-effector deflection", "t [s]", "deflection [m]", &panels, &provenance, ts),
    )?;

    let audited: Vec<&Run> = runs.iter().filter(|r| r.audit.is_some()).collect();
    if !audited.is_empty() {
        let panels: Vec<Panel> = audited
            .iter()
            .map(|r| {
                let rows: Vec<_> = r.audit.as_ref().unwrap().iter().filter(|a| a.1 == 0).collect();
                let t: Vec<f64> = rows.iter().map(|a| a.0).collect();
                Panel {
                    title: r.label.clone(),
                    series: vec![
                        Series {
                            label: "measured dq'K dq".into(),
                            xs: t.clone(),
                            ys: rows.iter().map(|a| a.2).collect(),
                            dashed: false,
                        },
                        Series {
                            label: "budget dq'Kmax dq".into(),
                            xs: t,
                            ys: rows.iter().map(|a| a.3).collect(),
                            dashed: true,
                        },
                    ],
                    markers: Vec::new(),
                }
            })
            .collect();
        let prov: Vec<String> = audited
            .iter()
            .map(|r| format!("{} = {} (direction 0)", r.label, r.dir.join(AUDIT_FILE).display()))
            .collect();
        write_file(
            &args.out.join("budget.svg"),
            line_panels("Directional budget audit", "t [s]", "quadratic form", &panels, &prov, ts),
        )?;
    }

    let labels: Vec<String> = runs.iter().map(|r| r.label.clone()).collect();
    let bars: Vec<(String, Vec<f64>)> = BAR_METRICS
        .iter()
        .map(|m| (m.to_string(), runs.iter().map(|r| metric(r, m)).collect()))
        .collect();
    let prov: Vec<String> = runs
        .iter()
        .map(|r| format!("{} = {}", r.label, r.dir.join(SUMMARY_FILE).display()))
        .collect();
    write_file(
        &args.out.join("metrics.svg"),
        bar_groups("Metrics (each group scaled to its maximum)", &bars, &labels, &prov, ts),
    )?;
    println!("{}", args.out.display());
    Ok(())
}

fn load_run(spec: &str) -> Result<Run, CliError> {
    let (label, dir) = spec
        .split_once('=')
        .ok_or_else(|| CliError::config(format!("--run expects label=DIR, got `{spec}`")))?;
    let dir = PathBuf::from(dir);
    let rp = dir.join(ROLLOUT_FILE);
    let f = File::open(&rp).map_err(|e| CliError::io(&rp, e))?;
    let rollout = Rollout::read_jsonl(BufReader::new(f))?;
    let sp = dir.join(SUMMARY_FILE);
    let metrics = if sp.exists() {
        let s = std::fs::read_to_string(&sp).map_err(|e| CliError::io(&sp, e))?;
        let v: Value = serde_json::from_str(&s).map_err(|e| CliError::io(&sp, e))?;
        v.get("metrics").and_then(|m| m.as_object().cloned())
    } else {
        None
    };
    let deflection = read_deflection(&dir.join(DEFLECTION_FILE), &rollout)?;
    let ap = dir.join(AUDIT_FILE);
    let audit = if ap.exists() { Some(read_audit(&ap)?) } else { None };
    Ok(Run {
        label: label.to_string(),
        dir,
        rollout,
        metrics,
        deflection,
        audit,
    })
}

fn parse_f64(s: &str) -> f64 {
    s.parse().unwrap_or(f64::NAN)
}

fn read_deflection(path: &Path, rollout: &Rollout) -> Result<Deflection, CliError> {
    if !path.exists() {
        let x0 = rollout.steps.first().map(|s| s.x).unwrap_or([0.0, 0.0]);
        return Ok(Deflection {
            t: rollout.times(),
            dx: rollout.steps.iter().map(|s| s.x[0] - x0[0]).collect(),
            dy: rollout.steps.iter().map(|s| s.x[1] - x0[1]).collect(),
            events: Vec::new(),
        });
    }
    let mut r = csv::Reader::from_path(path).map_err(|e| CliError::io(path, e))?;
    let mut d = Deflection {
        t: Vec::new(),
        dx: Vec::new(),
        dy: Vec::new(),
        events: Vec::new(),
    };
    for rec in r.records() {
        let rec = rec.map_err(|e| CliError::io(path, e))?;
        let t = parse_f64(&rec[0]);
        d.t.push(t);
        d.dx.push(parse_f64(&rec[3]));
        d.dy.push(parse_f64(&rec[4]));
        if !rec[7].is_empty() {
            d.events.push(t);
        }
    }
    Ok(d)
}

fn read_audit(path: &Path) -> Result<Vec<(f64, usize, f64, f64)>, CliError> {
    let mut r = csv::Reader::from_path(path).map_err(|e| CliError::io(path, e))?;
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| CliError::io(path, e))?;
        out.push((
            parse_f64(&rec[1]),
            rec[2].parse().unwrap_or(usize::MAX),
            parse_f64(&rec[3]),
            parse_f64(&rec[4]),
        ));
    }
    Ok(out)
}

fn metric(run: &Run, name: &str) -> f64 {
    run.metrics
        .as_ref()
        .and_then(|m| m.get(name))
        .and_then(Value::as_f64)
        .unwrap_or(f64::NAN)
}

fn write_comparison(out: &Path, runs: &[Run]) -> Result<(), CliError> {
    let path = out.join("comparison.csv");
    let io = |e: csv::Error| CliError::io(&path, e);
    let mut w = csv::Writer::from_path(&path).map_err(io)?;
    let mut header = vec!["metric".to_string()];
    header.extend(runs.iter().map(|r| r.label.clone()));
    w.write_record(&header).map_err(io)?;
    let mut rows: Vec<Vec<String>> = Vec::new();
    let mut steps = vec!["steps".to_string()];
    steps.extend(runs.iter().map(|r| r.rollout.len().to_string()));
    rows.push(steps);
    for m in MetricsReport::CSV_HEADER {
        let mut row = vec![m.to_string()];
        row.extend(runs.iter().map(|r| metric(r, m).to_string()));
        rows.push(row);
    }
    for row in &rows {
        w.write_record(row).map_err(io)?;
    }
    w.flush().map_err(|e| CliError::io(&path, e))?;

    let widths: Vec<usize> = (0..header.len())
        .map(|c| {
            rows.iter()
                .map(|r| r[c].len())
                .chain([header[c].len()])
                .max()
                .unwrap_or(0)
        })
        .collect();
    let mut txt = String::new();
    for row in std::iter::once(&header).chain(rows.iter()) {
        let cells: Vec<String> = row
            .iter()
            .enumerate()
            .map(|(c, v)| {
                if c == 0 {
                    format!("{v:<w$}", w = widths[c])
                } else {
                    format!("{v:>w$}", w = widths[c])
                }
            })
            .collect();
        txt.push_str(cells.join("  ").trim_end());
        txt.push('\n');
    }
    write_file(&out.join("comparison.txt"), txt)
}

fn write_traces(out: &Path, runs: &[Run]) -> Result<(), CliError> {
    let longest = runs.iter().map(|r| r.deflection.t.len()).max().unwrap_or(0);
    if runs.iter().any(|r| r.deflection.t.len() != longest) {
        eprintln!("warning: rollouts have different lengths; shorter traces are padded with NaN");
    }
    let t_ref = &runs
        .iter()
        .find(|r| r.deflection.t.len() == longest)
        .expect("at least one run")
        .deflection
        .t;
    let path = out.join("deflection_traces.csv");
    let io = |e: csv::Error| CliError::io(&path, e);
    let mut w = csv::Writer::from_path(&path).map_err(io)?;
    let mut header = vec!["t".to_string()];
    for r in runs {
        header.push(format!("{}_dx", r.label));
        header.push(format!("{}_dy", r.label));
    }
    w.write_record(&header).map_err(io)?;
    for k in 0..longest {
        let mut row = vec![t_ref[k].to_string()];
        for r in runs {
            let d = &r.deflection;
            row.push(d.dx.get(k).copied().unwrap_or(f64::NAN).to_string());
            row.push(d.dy.get(k).copied().unwrap_or(f64::NAN).to_string());
        }
        w.write_record(&row).map_err(io)?;
    }
    w.flush().map_err(|e| CliError::io(&path, e))
}
