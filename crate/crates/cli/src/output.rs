//! CSV schemas written by the harness.
//!
//! Floats are written with Rust's shortest round-trip formatting, so a file
//! read back parses to the same bits. Headers are pinned by tests; bump
//! [`SCHEMA_VERSION`] when one changes.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use curriculum_core::cmdp::TabularPolicy;
use curriculum_core::oracle::PropositionReport;
use curriculum_core::teacher::{Deployment, StudentRun};

use crate::stats::summarize;
use crate::HarnessError;

pub const SCHEMA_VERSION: u32 = 1;

pub const STUDENTS_HEADER: [&str; 14] = [
    "student",
    "seed",
    "unit",
    "intervention",
    "intervention_name",
    "value_estimate",
    "violation_gap",
    "training_episodes",
    "training_successes",
    "training_success_rate",
    "training_failures",
    "deploy_return",
    "deploy_success_rate",
    "deploy_failure_rate",
];

pub const FINAL_HEADER: [&str; 9] = [
    "student",
    "seed",
    "training_failures",
    "deploy_episodes",
    "deploy_return",
    "deploy_success_rate",
    "deploy_failure_rate",
    "teacher_reward",
    "switches",
];

pub const AGGREGATE_HEADER: [&str; 5] = ["metric", "n", "mean", "std", "ci95"];

pub const DEPLOYMENT_HEADER: [&str; 4] = ["episodes", "mean_return", "success_rate", "failure_rate"];

pub const REPORT_HEADER: [&str; 6] = ["proposition", "fixture", "policies_checked", "vacuous", "counterexamples", "status"];

pub fn create(dir: &Path, name: &str) -> Result<BufWriter<File>, HarnessError> {
    fs::create_dir_all(dir)?;
    Ok(BufWriter::new(File::create(dir.join(name))?))
}

fn intervention_label(id: usize, names: &[String]) -> String {
    names.get(id).cloned().unwrap_or_else(|| "original".into())
}

fn intervention_id(id: usize) -> String {
    if id == usize::MAX {
        "none".into()
    } else {
        id.to_string()
    }
}

/// One row per student and unit.
pub fn write_students_csv<W: Write>(out: W, runs: &[StudentRun], names: &[String]) -> Result<(), HarnessError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(STUDENTS_HEADER)?;
    for (j, run) in runs.iter().enumerate() {
        for u in &run.units {
            let rate = u.training_successes as f64 / u.training_episodes.max(1) as f64;
            let (ret, succ, fail) = match &u.deployment {
                Some(d) => (d.mean_return.to_string(), d.success_rate.to_string(), d.failure_rate.to_string()),
                None => Default::default(),
            };
            w.write_record([
                j.to_string(),
                run.seed.to_string(),
                u.unit.to_string(),
                intervention_id(u.intervention),
                intervention_label(u.intervention, names),
                u.observation.value_estimate.to_string(),
                u.observation.violation_gap.to_string(),
                u.training_episodes.to_string(),
                u.training_successes.to_string(),
                rate.to_string(),
                u.training_failures.to_string(),
                ret,
                succ,
                fail,
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// `unit:name` for the first unit and every switch, separated by `;`.
pub fn switch_string(run: &StudentRun, names: &[String]) -> String {
    run.switch_log
        .iter()
        .map(|(unit, id)| format!("{unit}:{}", intervention_label(*id, names)))
        .collect::<Vec<_>>()
        .join(";")
}

/// One row per student with its final deployment.
pub fn write_final_csv<W: Write>(out: W, runs: &[StudentRun], names: &[String]) -> Result<(), HarnessError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(FINAL_HEADER)?;
    for (j, run) in runs.iter().enumerate() {
        let d = &run.deployment;
        w.write_record([
            j.to_string(),
            run.seed.to_string(),
            run.training_failures.to_string(),
            d.episodes.to_string(),
            d.mean_return.to_string(),
            d.success_rate.to_string(),
            d.failure_rate.to_string(),
            run.teacher_reward.to_string(),
            switch_string(run, names),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Per-student metrics that the aggregate file summarizes.
pub fn aggregate_metrics(runs: &[StudentRun]) -> Vec<(&'static str, Vec<f64>)> {
    vec![
        ("training_failures", runs.iter().map(|r| r.training_failures as f64).collect()),
        ("deploy_return", runs.iter().map(|r| r.deployment.mean_return).collect()),
        ("deploy_success_rate", runs.iter().map(|r| r.deployment.success_rate).collect()),
        ("deploy_failure_rate", runs.iter().map(|r| r.deployment.failure_rate).collect()),
        ("teacher_reward", runs.iter().map(|r| r.teacher_reward).collect()),
    ]
}

/// Mean, sample std and 95% half-width over students for each metric.
pub fn write_aggregate_csv<W: Write>(out: W, runs: &[StudentRun]) -> Result<(), HarnessError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(AGGREGATE_HEADER)?;
    for (name, values) in aggregate_metrics(runs) {
        let s = summarize(&values);
        w.write_record([name.to_string(), s.n.to_string(), s.mean.to_string(), s.std.to_string(), s.ci95.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_deployment_csv<W: Write>(out: W, d: &Deployment) -> Result<(), HarnessError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(DEPLOYMENT_HEADER)?;
    w.write_record([d.episodes.to_string(), d.mean_return.to_string(), d.success_rate.to_string(), d.failure_rate.to_string()])?;
    w.flush()?;
    Ok(())
}

/// `obs,p_0,...,p_{m-1}`, one row per observation.
pub fn write_policy_csv<W: Write>(out: W, policy: &TabularPolicy) -> Result<(), HarnessError> {
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["obs".to_string()];
    header.extend((0..policy.n_actions()).map(|a| format!("p_{a}")));
    w.write_record(&header)?;
    for s in 0..policy.n_states() {
        let mut row = vec![s.to_string()];
        row.extend(policy.row(s).iter().map(f64::to_string));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_policy_csv(path: &Path) -> Result<TabularPolicy, HarnessError> {
    let bad = |msg: String| HarnessError::Config(format!("policy {}: {msg}", path.display()));
    let mut r = csv::Reader::from_path(path).map_err(|e| bad(e.to_string()))?;
    let n_actions = r.headers().map_err(|e| bad(e.to_string()))?.len().saturating_sub(1);
    if n_actions == 0 {
        return Err(bad("no action columns".into()));
    }
    let mut probs = Vec::new();
    let mut n_states = 0;
    for (i, rec) in r.records().enumerate() {
        let rec = rec.map_err(|e| bad(e.to_string()))?;
        let obs: usize = rec[0].parse().map_err(|_| bad(format!("row {i}: bad obs {:?}", &rec[0])))?;
        if obs != i {
            return Err(bad(format!("row {i} has obs {obs}; rows must be in order")));
        }
        for field in rec.iter().skip(1) {
            probs.push(field.parse::<f64>().map_err(|_| bad(format!("row {i}: bad probability {field:?}")))?);
        }
        n_states += 1;
    }
    TabularPolicy::new(n_states, n_actions, probs).map_err(|e| bad(e.to_string()))
}

pub fn write_report_csv<W: Write>(out: W, reports: &[PropositionReport]) -> Result<(), HarnessError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(REPORT_HEADER)?;
    for r in reports {
        let status = if r.vacuous {
            "vacuous"
        } else if r.counterexamples.is_empty() {
            "verified"
        } else {
            "violated"
        };
        w.write_record([
            r.proposition.as_str().to_string(),
            r.fixture.clone(),
            r.policies_checked.to_string(),
            r.vacuous.to_string(),
            r.counterexamples.len().to_string(),
            status.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

fn unix_seconds() -> f64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0.0, |d| d.as_secs_f64())
}

/// Wall-clock record of a command; the only non-deterministic output.
pub struct RunClock {
    command: String,
    started: f64,
}

impl RunClock {
    pub fn start(command: &str) -> Self {
        Self { command: command.into(), started: unix_seconds() }
    }

    pub fn finish(self, dir: &Path) -> Result<(), HarnessError> {
        let finished = unix_seconds();
        let mut f = create(dir, "metadata.toml")?;
        writeln!(f, "command = {:?}", self.command)?;
        writeln!(f, "schema_version = {SCHEMA_VERSION}")?;
        writeln!(f, "started_unix = {}", self.started)?;
        writeln!(f, "finished_unix = {finished}")?;
        writeln!(f, "elapsed_seconds = {}", finished - self.started)?;
        f.flush()?;
        Ok(())
    }
}
