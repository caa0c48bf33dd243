use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde_json::json;

use persona_audit::audit::{self, AuditError};
use persona_audit::backend::CacheMode;
use persona_audit::calibrate::{detection_power, false_positive_rates, CalibrationSettings};
use persona_audit::config::{load_config, AuditConfig, ConfigError, ExperimentId};
use persona_audit::runner::RunOutput;

#[derive(Parser)]
#[command(name = "persona-audit", version, about = "Persona-conditioned bias audits of chat models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Sample and shuffle items; write the config snapshot and manifest.
    Prepare(Common),
    /// Multiple-choice accuracy under each persona.
    RunExp1(Common),
    /// Answer grading of correct and incorrect answers.
    RunExp2(Common),
    /// Salary negotiation advice.
    RunExp3(Common),
    /// Recompute every statistic and output from persisted records.
    Analyze(Common),
    /// False-positive rate and detection power on the synthetic backend.
    Calibrate {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 200)]
        seeds: u64,
        /// Salary gaps to test for detection power.
        #[arg(long, value_delimiter = ',', default_values_t = [0.10, 0.02])]
        gaps: Vec<f64>,
    },
    /// Write parse and backend failures as CSV for manual review.
    ReviewExport {
        #[command(flatten)]
        common: Common,
        /// Destination file (default: <run dir>/review/failures.csv).
        #[arg(long)]
        file: Option<PathBuf>,
    },
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    config: PathBuf,
    /// Comma-separated model ids to run.
    #[arg(long, value_delimiter = ',')]
    models: Vec<String>,
    /// Comma-separated experiments (1, 2, 3) to allow.
    #[arg(long, value_delimiter = ',')]
    experiments: Vec<String>,
    /// Serve responses from the cache only; a miss is an error.
    #[arg(long, conflicts_with = "record")]
    replay: bool,
    /// Call the backends and record every response.
    #[arg(long)]
    record: bool,
    /// Run directory (overrides `output_dir`).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Seed override, e.g. `--seed shuffle=7`; repeatable.
    #[arg(long = "seed", value_name = "KEY=VALUE")]
    seeds: Vec<String>,
}

fn apply_overrides(config: &mut AuditConfig, common: &Common) -> Result<()> {
    for s in &common.seeds {
        let (key, value) = s.split_once('=').with_context(|| format!("--seed {s}: expected KEY=VALUE"))?;
        let value: u64 = value.parse().with_context(|| format!("--seed {s}: not an integer"))?;
        let slot = match key {
            "shuffle" => &mut config.seeds.shuffle,
            "sample" => &mut config.seeds.sample,
            "wrong_answer" | "wrong-answer" => &mut config.seeds.wrong_answer,
            "synthetic" => &mut config.seeds.synthetic,
            other => bail!("--seed: unknown seed {other:?}"),
        };
        *slot = value;
    }
    if !common.experiments.is_empty() {
        config.experiments = common
            .experiments
            .iter()
            .map(|e| match e.as_str() {
                "1" => Ok(ExperimentId::One),
                "2" => Ok(ExperimentId::Two),
                "3" => Ok(ExperimentId::Three),
                other => bail!("--experiments: unknown experiment {other:?}"),
            })
            .collect::<Result<_>>()?;
    }
    if common.replay {
        config.cache.mode = CacheMode::StrictReplay;
    } else if common.record {
        config.cache.mode = CacheMode::Record;
    }
    if let Some(out) = &common.out {
        config.output_dir = out.clone();
    }
    config.validate()?;
    Ok(())
}

fn load(common: &Common) -> Result<AuditConfig> {
    let mut config = load_config(&common.config)?;
    apply_overrides(&mut config, common)?;
    Ok(config)
}

/// Runs one experiment phase, then refreshes the snapshot and the report.
fn run_phase(
    common: &Common,
    experiment: ExperimentId,
    run: fn(&AuditConfig, &Path, &[persona_audit::runner::ModelHandle]) -> Result<RunOutput, AuditError>,
) -> Result<(serde_json::Value, bool)> {
    let mut config = load(common)?;
    let run_dir = config.output_dir.clone();
    if !config.experiments.contains(&experiment) {
        return Ok((json!({"skipped": true, "reason": "experiment not selected"}), true));
    }
    let prepared = audit::load_prepared(&run_dir)?;
    // seeds are fixed when the run is prepared
    config.seeds = prepared.manifest.seeds;
    let models = audit::build_models(&config, &prepared.items, &common.models)?;
    let output = run(&config, &run_dir, &models)?;
    std::fs::write(run_dir.join(audit::CONFIG_FILE), config.to_toml_string())
        .with_context(|| format!("writing snapshot in {}", run_dir.display()))?;
    audit::analyze(&run_dir)?;
    let ok = !output.any_aborted();
    Ok((
        json!({
            "run_dir": run_dir.display().to_string(),
            "records": output.records.len(),
            "lanes": output.lanes,
        }),
        ok,
    ))
}

fn dispatch(cli: Cli) -> Result<(serde_json::Value, bool)> {
    match cli.command {
        Command::Prepare(common) => {
            let config = load(&common)?;
            let prepared = audit::prepare(&config, &config.output_dir)?;
            Ok((
                json!({
                    "run_dir": config.output_dir.display().to_string(),
                    "items": prepared.items.len(),
                    "digest": prepared.manifest.digest,
                }),
                true,
            ))
        }
        Command::RunExp1(common) => run_phase(&common, ExperimentId::One, audit::run_exp1),
        Command::RunExp2(common) => run_phase(&common, ExperimentId::Two, audit::run_exp2),
        Command::RunExp3(common) => run_phase(&common, ExperimentId::Three, audit::run_exp3),
        Command::Analyze(common) => {
            let config = load(&common)?;
            let report = audit::analyze(&config.output_dir)?;
            Ok((
                json!({
                    "report": config.output_dir.join(audit::REPORT_DIR).display().to_string(),
                    "digest": report.header.manifest_digest,
                    "failures": report.failures.len(),
                }),
                true,
            ))
        }
        Command::Calibrate { common, seeds, gaps } => {
            let config = load(&common)?;
            let settings = CalibrationSettings {
                seeds,
                first_seed: config.seeds.synthetic,
                trials: config.trials,
                alpha: config.alpha,
                fields: config.fields.clone(),
                levels: config.levels.clone(),
                parallelism: config.parallelism,
            };
            let fp = false_positive_rates(&config.synthetic, &settings)?;
            let power = gaps
                .iter()
                .map(|&g| detection_power(g, config.synthetic.salary.sd_fraction, &settings))
                .collect::<Result<Vec<_>, _>>()?;
            Ok((json!({"false_positives": fp, "power": power}), true))
        }
        Command::ReviewExport { common, file } => {
            let config = load(&common)?;
            let file = file.unwrap_or_else(|| config.output_dir.join("review").join("failures.csv"));
            if let Some(parent) = file.parent() {
                std::fs::create_dir_all(parent)?;
            }
            let n = audit::review_export(&config.output_dir, &file)?;
            Ok((json!({"file": file.display().to_string(), "failures": n}), true))
        }
    }
}

fn error_kind(e: &anyhow::Error) -> &'static str {
    if let Some(a) = e.downcast_ref::<AuditError>() {
        return match a {
            AuditError::Config(_) => "config",
            AuditError::Dataset(_) => "dataset",
            AuditError::Backend(_) => "backend",
            AuditError::Report(_) => "report",
            AuditError::Io { .. } => "io",
            AuditError::NotPrepared(_) | AuditError::DigestMismatch { .. } => "run-dir",
            AuditError::NoModels(_) => "usage",
        };
    }
    if e.downcast_ref::<ConfigError>().is_some() {
        return "config";
    }
    "error"
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok((summary, ok)) => {
            println!("{}", serde_json::to_string_pretty(&summary).expect("summary serializes"));
            if ok {
                ExitCode::SUCCESS
            } else {
                eprintln!("{}", json!({"error": "aborted", "message": "at least one model lane aborted"}));
                ExitCode::from(1)
            }
        }
        Err(e) => {
            eprintln!("{}", json!({"error": error_kind(&e), "message": format!("{e:#}")}));
            ExitCode::from(2)
        }
    }
}
