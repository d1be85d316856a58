//! Run artifacts: result JSON, run-log/DoE/enrichment CSVs, and the
//! derived report files (quantile traces, eta traces, optimizer cloud).
//!
//! All files are deterministic under (config, seed): no timestamps, fixed
//! key order, floats at 17 significant digits in CSVs and shortest
//! round-trip representation in JSON.

use std::fs;
use std::path::Path;

use serde::Serialize;

use crate::config::RunConfig;
use crate::error::{QrbdoError, Result};
use crate::optimizer::{ModelSummary, QuantileSnapshot, RbdoResult};
use crate::problem::Problem;

/// 17-significant-digit float formatting for replay-fidelity CSVs.
pub fn fmt_float(x: f64) -> String {
    if x.is_nan() {
        "nan".to_string()
    } else if x.is_infinite() {
        if x > 0.0 { "inf".to_string() } else { "-inf".to_string() }
    } else {
        format!("{x:.16e}")
    }
}

#[derive(Serialize)]
struct ResultFile<'a> {
    problem: &'a str,
    seed: u64,
    d_star: &'a [f64],
    cost: f64,
    feasible: bool,
    true_model_calls: usize,
    initial_doe: usize,
    global_added: usize,
    local_added: usize,
    iterations: usize,
    stop_reason: &'a str,
    global_eta_final: f64,
    global_converged: bool,
    refined: bool,
    d_before_refine: &'a [f64],
    quantiles: &'a [QuantileSnapshot],
    model_summaries: &'a [ModelSummary],
    space_lower: &'a [f64],
    space_upper: &'a [f64],
    config: &'a RunConfig,
}

/// Writes result.json, run_log.csv, doe.csv and enrichment.csv into `dir`.
pub fn write_run_artifacts(dir: &Path, problem: &Problem, result: &RbdoResult) -> Result<()> {
    fs::create_dir_all(dir)?;

    let file = ResultFile {
        problem: &result.problem,
        seed: result.config.seed,
        d_star: &result.d_star,
        cost: result.cost,
        feasible: result.feasible,
        true_model_calls: result.true_model_calls,
        initial_doe: result.initial_doe,
        global_added: result.global_added,
        local_added: result.local_added,
        iterations: result.iterations,
        stop_reason: &result.stop_reason,
        global_eta_final: result.global_eta_final,
        global_converged: result.global_converged,
        refined: result.refined,
        d_before_refine: &result.d_before_refine,
        quantiles: &result.quantiles,
        model_summaries: &result.model_summaries,
        space_lower: &result.space_lower,
        space_upper: &result.space_upper,
        config: &result.config,
    };
    fs::write(
        dir.join("result.json"),
        serde_json::to_string_pretty(&file)? + "\n",
    )?;

    // Run log: one row per optimizer iteration.
    let design_names: Vec<String> = problem
        .model
        .design()
        .iter()
        .map(|v| format!("d_{}", v.name))
        .collect();
    let mut header = vec![
        "iter".to_string(),
        "accepted".into(),
        "evaluated".into(),
        "feasible".into(),
        "enriched".into(),
        "calls".into(),
        "cost".into(),
    ];
    header.extend(design_names);
    for c in &problem.constraints {
        header.push(format!("q_{}", c.name));
        header.push(format!("q_lo_{}", c.name));
        header.push(format!("q_hi_{}", c.name));
        header.push(format!("eta_q_{}", c.name));
    }
    let mut log = header.join(",") + "\n";
    for row in &result.history {
        let mut cells = vec![
            row.iter.to_string(),
            (row.accepted as u8).to_string(),
            (row.evaluated as u8).to_string(),
            (row.feasible as u8).to_string(),
            row.enriched.to_string(),
            row.calls.to_string(),
            fmt_float(row.cost),
        ];
        cells.extend(row.design.iter().map(|&v| fmt_float(v)));
        if row.quantiles.is_empty() {
            for _ in 0..problem.constraints.len() {
                cells.extend(["nan".to_string(), "nan".into(), "nan".into(), "nan".into()]);
            }
        } else {
            for q in &row.quantiles {
                cells.push(fmt_float(q.q));
                cells.push(fmt_float(q.q_lo));
                cells.push(fmt_float(q.q_hi));
                cells.push(fmt_float(q.eta_q));
            }
        }
        log.push_str(&cells.join(","));
        log.push('\n');
    }
    fs::write(dir.join("run_log.csv"), log)?;

    // DoE export: every true-model evaluation that entered the DoE.
    let mut doe = String::from("stage,iteration");
    for name in problem.model.names() {
        doe.push_str(&format!(",{name}"));
    }
    for c in &problem.constraints {
        doe.push_str(&format!(",y_{}", c.name));
    }
    doe.push('\n');
    for rec in &result.doe_records {
        doe.push_str(&format!("{},{}", rec.stage, rec.iteration));
        for v in &rec.phys {
            doe.push_str(&format!(",{}", fmt_float(*v)));
        }
        for v in &rec.responses {
            doe.push_str(&format!(",{}", fmt_float(*v)));
        }
        doe.push('\n');
    }
    fs::write(dir.join("doe.csv"), doe)?;

    // Enrichment events.
    let mut enr = String::from("stage,iteration,added,u_min,eta\n");
    for ev in &result.enrichment_events {
        enr.push_str(&format!(
            "{},{},{},{},{}\n",
            match ev.stage {
                crate::enrichment::Stage::Global => "global",
                crate::enrichment::Stage::Local => "local",
            },
            ev.iteration,
            ev.added,
            fmt_float(ev.u_min),
            fmt_float(ev.eta),
        ));
    }
    fs::write(dir.join("enrichment.csv"), enr)?;
    Ok(())
}

/// Regenerates plot-ready CSVs from a run directory's logs without
/// recomputing anything: quantile_trace.csv (long format), eta_trace.csv
/// (per-constraint eta_q against its active threshold) and cma_cloud.csv
/// (visited designs). Written into `<run_dir>/report/`.
pub fn report(run_dir: &Path) -> Result<()> {
    let log_path = run_dir.join("run_log.csv");
    let result_path = run_dir.join("result.json");
    if !log_path.exists() || !result_path.exists() {
        return Err(QrbdoError::Config(format!(
            "{} does not look like a run directory (missing run_log.csv/result.json)",
            run_dir.display()
        )));
    }
    let result: serde_json::Value = serde_json::from_str(&fs::read_to_string(&result_path)?)?;
    let config: RunConfig = serde_json::from_value(
        result
            .get("config")
            .cloned()
            .ok_or_else(|| QrbdoError::Config("result.json has no config echo".into()))?,
    )
    .map_err(|e| QrbdoError::Config(format!("bad config echo: {e}")))?;

    let log = fs::read_to_string(&log_path)?;
    let mut lines = log.lines();
    let header: Vec<&str> = lines
        .next()
        .ok_or_else(|| QrbdoError::Config("empty run log".into()))?
        .split(',')
        .collect();
    let col = |name: &str| -> Result<usize> {
        header
            .iter()
            .position(|&h| h == name)
            .ok_or_else(|| QrbdoError::Config(format!("run log misses column {name}")))
    };
    let iter_c = col("iter")?;
    let accepted_c = col("accepted")?;
    let feasible_c = col("feasible")?;
    let cost_c = col("cost")?;
    let d_cols: Vec<usize> = header
        .iter()
        .enumerate()
        .filter(|(_, h)| h.starts_with("d_"))
        .map(|(i, _)| i)
        .collect();
    let constraint_names: Vec<String> = header
        .iter()
        .filter(|h| h.starts_with("q_") && !h.starts_with("q_lo_") && !h.starts_with("q_hi_"))
        .map(|h| h["q_".len()..].to_string())
        .collect();

    let out = run_dir.join("report");
    fs::create_dir_all(&out)?;

    let mut quantile_trace = String::from("iter,constraint,q,q_lo,q_hi,eta_q\n");
    let mut eta_trace = String::from("iter");
    for name in &constraint_names {
        eta_trace.push_str(&format!(",eta_q_{name}"));
    }
    eta_trace.push_str(",threshold\n");
    let mut cloud = String::from("iter");
    for &c in &d_cols {
        cloud.push_str(&format!(",{}", header[c]));
    }
    cloud.push_str(",cost,accepted,feasible\n");

    for line in lines {
        if line.is_empty() {
            continue;
        }
        let cells: Vec<&str> = line.split(',').collect();
        let iter: usize = cells[iter_c]
            .parse()
            .map_err(|_| QrbdoError::Config("bad iter cell in run log".into()))?;
        let mut eta_row = vec![cells[iter_c].to_string()];
        let mut any_quantiles = false;
        for name in &constraint_names {
            let q = cells[col(&format!("q_{name}"))?];
            let q_lo = cells[col(&format!("q_lo_{name}"))?];
            let q_hi = cells[col(&format!("q_hi_{name}"))?];
            let eta = cells[col(&format!("eta_q_{name}"))?];
            if q != "nan" {
                any_quantiles = true;
                quantile_trace
                    .push_str(&format!("{iter},{name},{q},{q_lo},{q_hi},{eta}\n"));
            }
            eta_row.push(eta.to_string());
        }
        if any_quantiles {
            eta_row.push(fmt_float(config.eta_q_threshold(iter.saturating_sub(1))));
            eta_trace.push_str(&eta_row.join(","));
            eta_trace.push('\n');
        }
        let mut cloud_row = vec![cells[iter_c].to_string()];
        for &c in &d_cols {
            cloud_row.push(cells[c].to_string());
        }
        cloud_row.push(cells[cost_c].to_string());
        cloud_row.push(cells[accepted_c].to_string());
        cloud_row.push(cells[feasible_c].to_string());
        cloud.push_str(&cloud_row.join(","));
        cloud.push('\n');
    }

    fs::write(out.join("quantile_trace.csv"), quantile_trace)?;
    fs::write(out.join("eta_trace.csv"), eta_trace)?;
    fs::write(out.join("cma_cloud.csv"), cloud)?;
    Ok(())
}

/// Replication summary statistics.
#[derive(Debug, Serialize)]
pub struct Summary {
    pub replications: usize,
    pub feasible: usize,
    pub calls_min: usize,
    pub calls_median: f64,
    pub calls_max: usize,
    pub cost_min: f64,
    pub cost_median: f64,
    pub cost_max: f64,
    pub d_star: Vec<Vec<f64>>,
    pub seeds: Vec<u64>,
}

pub fn summarize(results: &[RbdoResult]) -> Summary {
    let mut calls: Vec<usize> = results.iter().map(|r| r.true_model_calls).collect();
    calls.sort_unstable();
    let mut costs: Vec<f64> = results.iter().map(|r| r.cost).collect();
    costs.sort_by(f64::total_cmp);
    Summary {
        replications: results.len(),
        feasible: results.iter().filter(|r| r.feasible).count(),
        calls_min: *calls.first().unwrap_or(&0),
        calls_median: median_usize(&calls),
        calls_max: *calls.last().unwrap_or(&0),
        cost_min: costs.first().copied().unwrap_or(f64::NAN),
        cost_median: median_f64(&costs),
        cost_max: costs.last().copied().unwrap_or(f64::NAN),
        d_star: results.iter().map(|r| r.d_star.clone()).collect(),
        seeds: results.iter().map(|r| r.config.seed).collect(),
    }
}

pub fn median_usize(sorted: &[usize]) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2] as f64
    } else {
        (sorted[n / 2 - 1] + sorted[n / 2]) as f64 / 2.0
    }
}

pub fn median_f64(sorted: &[f64]) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn float_format_is_seventeen_significant_digits() {
        assert_eq!(fmt_float(1.0), "1.0000000000000000e0");
        assert_eq!(fmt_float(-0.25), "-2.5000000000000000e-1");
        assert_eq!(fmt_float(f64::NAN), "nan");
        // Round trip.
        let x = 238.44921874999997_f64;
        let s = fmt_float(x);
        assert_eq!(s.parse::<f64>().unwrap(), x);
    }

    #[test]
    fn medians() {
        assert_eq!(median_usize(&[1, 2, 3]), 2.0);
        assert_eq!(median_usize(&[1, 2, 3, 4]), 2.5);
        assert_eq!(median_f64(&[1.0, 5.0]), 3.0);
    }
}
