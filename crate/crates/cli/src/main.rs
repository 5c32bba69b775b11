use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use curriculum_cli::config::{Environment, ExperimentConfig};
use curriculum_cli::experiment::{eval_policy, optimize_teacher, run_experiment, train_one, verify_props};
use curriculum_cli::output::switch_string;
use curriculum_cli::stats::summarize;
use curriculum_cli::HarnessError;

#[derive(Parser)]
#[command(name = "curriculum", version, about = "Curriculum teachers for safe exploration: experiments, optimization and exact checks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Experiment config (TOML).
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, value_name = "N")]
    seed: Option<u64>,
    /// Output directory; overrides `output_dir`.
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Worker threads for parallel students.
    #[arg(long, value_name = "N")]
    workers: Option<usize>,
    /// Frozen Lake map file.
    #[arg(long, value_name = "PATH")]
    map: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Train one student in a single environment and save its policy.
    TrainStudent {
        #[command(flatten)]
        common: Common,
    },
    /// Train a cohort of students under the configured teacher.
    RunExperiment {
        #[command(flatten)]
        common: Common,
    },
    /// Search curriculum policies with GP-UCB.
    OptimizeTeacher {
        #[command(flatten)]
        common: Common,
    },
    /// Exhaustively check feasibility inclusion and learning safety.
    VerifyProps {
        #[command(flatten)]
        common: Common,
        /// Random stochastic policies per fixture for the inclusion check.
        #[arg(long, default_value_t = 10_000)]
        random_policies: usize,
    },
    /// Deploy a saved policy in the original problem.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Policy CSV written by train-student.
        #[arg(long, value_name = "PATH")]
        policy: PathBuf,
    },
}

fn load(common: &Common) -> Result<ExperimentConfig, HarnessError> {
    let mut config = match &common.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::defaults(Environment::FrozenLake),
    };
    if let Some(seed) = common.seed {
        config.seed = seed;
        config.seeds = None;
    }
    if common.workers.is_some() {
        config.workers = common.workers;
    }
    if common.map.is_some() {
        config.map = common.map.clone();
    }
    if common.out.is_some() {
        config.output_dir = common.out.clone();
    }
    config.validate()?;
    Ok(config)
}

fn out_dir(config: &ExperimentConfig) -> PathBuf {
    config.output_dir.clone().unwrap_or_else(|| PathBuf::from("out"))
}

fn run(cli: Cli) -> Result<bool, HarnessError> {
    match cli.command {
        Command::TrainStudent { common } => {
            let config = load(&common)?;
            let dir = out_dir(&config);
            let s = train_one(&config, Some(&dir))?;
            println!(
                "training failures {} | deployment return {:.4}, success {:.4}, failure {:.4} over {} episodes",
                s.training_failures, s.deployment.mean_return, s.deployment.success_rate, s.deployment.failure_rate, s.deployment.episodes
            );
            println!("wrote {}", dir.display());
            Ok(true)
        }
        Command::RunExperiment { common } => {
            let config = load(&common)?;
            let dir = out_dir(&config);
            let o = run_experiment(&config, Some(&dir))?;
            for (j, r) in o.result.students.iter().enumerate() {
                println!(
                    "student {j}: failures {} return {:.4} success {:.4} [{}]",
                    r.training_failures,
                    r.deployment.mean_return,
                    r.deployment.success_rate,
                    switch_string(r, &o.names)
                );
            }
            let success: Vec<f64> = o.result.students.iter().map(|r| r.deployment.success_rate).collect();
            let s = summarize(&success);
            println!("mean success {:.4} +- {:.4} (95% CI), total training failures {}", s.mean, s.ci95, o.result.training_failures);
            println!("wrote {}", dir.display());
            Ok(true)
        }
        Command::OptimizeTeacher { common } => {
            let config = load(&common)?;
            let dir = out_dir(&config);
            let (opt, best) = optimize_teacher(&config, Some(&dir))?;
            let p = best.provenance.as_ref().expect("written by the optimizer");
            println!(
                "{} rounds; best round {} sequence {:?} thresholds {:?} final value {:.4} success {:.4}",
                opt.rounds.len(),
                p.round,
                best.intervention_sequence,
                best.switch_thresholds,
                p.final_value,
                p.mean_success
            );
            println!("wrote {}", dir.display());
            Ok(true)
        }
        Command::VerifyProps { common, random_policies } => {
            let config = match &common.config {
                Some(_) => Some(load(&common)?),
                None => None,
            };
            let seed = common.seed.or(config.as_ref().map(|c| c.base_seed())).unwrap_or(0);
            let dir = common.out.clone().or_else(|| config.as_ref().and_then(|c| c.output_dir.clone())).unwrap_or_else(|| PathBuf::from("out"));
            let v = verify_props(config.as_ref(), random_policies, seed, Some(&dir))?;
            for r in &v.reports {
                println!("{}", r.summary());
            }
            for r in &v.broken {
                println!("{} (expected to be violated)", r.summary());
            }
            println!("{}", if v.ok() { "all checks passed" } else { "CHECKS FAILED" });
            println!("wrote {}", dir.display());
            Ok(v.ok())
        }
        Command::Eval { common, policy } => {
            let config = load(&common)?;
            let dir = out_dir(&config);
            let d = eval_policy(&config, Path::new(&policy), Some(&dir))?;
            println!(
                "return {:.4} success {:.4} failure {:.4} over {} episodes",
                d.mean_return, d.success_rate, d.failure_rate, d.episodes
            );
            println!("wrote {}", dir.display());
            Ok(true)
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(3),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
