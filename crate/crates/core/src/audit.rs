//! Run-directory orchestration: prepare, run each experiment, analyze.
//!
//! Layout of a run directory:
//!
//! ```text
//! config.toml          snapshot of the validated config
//! manifest.json        sampled item ids, seeds, digest
//! items.jsonl          the sampled items (unshuffled)
//! shuffled.jsonl       the option order every model saw
//! records/*.jsonl      one TrialRecord per line
//! lanes/*.json         per-model lane status of each phase
//! report/              report.json, tables/, figures/, failures.csv
//! ```
//!
//! The snapshot, manifest and records are sufficient for [`analyze`].

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::de::DeserializeOwned;
use serde::Serialize;
use thiserror::Error;

use crate::backend::{Backend, BackendError, CacheMode, CachedBackend, HttpBackend, ReplayCache, SyntheticBackend};
use crate::canonical::to_canonical_pretty;
use crate::config::{AuditConfig, BackendKind, ConfigError, ModelConfig};
use crate::dataset::{load_items, sample_topics, shuffle_options, DatasetError, Manifest, McqItem, ShuffledItem};
use crate::personae::{compound_from_ids, personae_for_experiment, Experiment, PersonaSpec};
use crate::report::{build_report, emit, Format, Report, ReportError, ReportHeader};
use crate::runner::{
    run_experiment1, run_experiment2, run_experiment3, ModelHandle, Mode, Part, RunConfig, RunOutput, TrialRecord,
};

pub const CONFIG_FILE: &str = "config.toml";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const ITEMS_FILE: &str = "items.jsonl";
pub const SHUFFLED_FILE: &str = "shuffled.jsonl";
pub const REPORT_DIR: &str = "report";

#[derive(Debug, Error)]
pub enum AuditError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Report(#[from] ReportError),
    #[error("{path}: {message}")]
    Io { path: String, message: String },
    #[error("run directory {0} has not been prepared")]
    NotPrepared(String),
    #[error("items in {path} do not match the manifest digest")]
    DigestMismatch { path: String },
    #[error("no model matches the filter {0:?}")]
    NoModels(Vec<String>),
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> AuditError + '_ {
    move |e| AuditError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    }
}

fn write_atomic(path: &Path, contents: &[u8]) -> Result<(), AuditError> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(io_err(parent))?;
    }
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, contents).map_err(io_err(&tmp))?;
    fs::rename(&tmp, path).map_err(io_err(path))
}

fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<(), AuditError> {
    let mut buf = Vec::new();
    for row in rows {
        serde_json::to_writer(&mut buf, row).expect("rows serialize");
        buf.push(b'\n');
    }
    write_atomic(path, &buf)
}

fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, AuditError> {
    let file = fs::File::open(path).map_err(io_err(path))?;
    let mut rows = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        rows.push(serde_json::from_str(&line).map_err(|e| AuditError::Io {
            path: format!("{}:{}", path.display(), i + 1),
            message: e.to_string(),
        })?);
    }
    Ok(rows)
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, AuditError> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    serde_json::from_slice(&bytes).map_err(|e| AuditError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    })
}

/// Items of a prepared run, with options shuffled by the manifest seed.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub manifest: Manifest,
    pub items: Vec<ShuffledItem>,
}

/// Samples and shuffles items, then writes the config snapshot, manifest and items.
pub fn prepare(config: &AuditConfig, run_dir: &Path) -> Result<Prepared, AuditError> {
    let all = load_items(&config.dataset)?;
    let topics: Vec<&str> = config.topics.iter().map(String::as_str).collect();
    let sampled = sample_topics(&all, &topics, config.n_per_topic, config.seeds.sample)?;
    let manifest = Manifest::new(config.seeds, config.n_per_topic, &topics, &sampled);
    fs::create_dir_all(run_dir).map_err(io_err(run_dir))?;
    write_atomic(&run_dir.join(CONFIG_FILE), config.to_toml_string().as_bytes())?;
    write_atomic(
        &run_dir.join(MANIFEST_FILE),
        to_canonical_pretty(&manifest).expect("manifest serializes").as_bytes(),
    )?;
    write_jsonl(&run_dir.join(ITEMS_FILE), &sampled)?;
    let items: Vec<ShuffledItem> = sampled.iter().map(|i| shuffle_options(i, config.seeds.shuffle)).collect();
    write_jsonl(&run_dir.join(SHUFFLED_FILE), &items)?;
    Ok(Prepared { manifest, items })
}

/// Reloads a prepared run and checks the items against the manifest digest.
pub fn load_prepared(run_dir: &Path) -> Result<Prepared, AuditError> {
    let manifest_path = run_dir.join(MANIFEST_FILE);
    if !manifest_path.exists() {
        return Err(AuditError::NotPrepared(run_dir.display().to_string()));
    }
    let manifest: Manifest = read_json(&manifest_path)?;
    let items_path = run_dir.join(ITEMS_FILE);
    let sampled: Vec<McqItem> = read_jsonl(&items_path)?;
    if crate::dataset::items_digest(&sampled) != manifest.digest {
        return Err(AuditError::DigestMismatch {
            path: items_path.display().to_string(),
        });
    }
    let items = sampled
        .iter()
        .map(|i| shuffle_options(i, manifest.seeds.shuffle))
        .collect();
    Ok(Prepared { manifest, items })
}

/// Reads the config snapshot of a run directory.
pub fn load_snapshot(run_dir: &Path) -> Result<AuditConfig, AuditError> {
    let path = run_dir.join(CONFIG_FILE);
    let text = fs::read_to_string(&path).map_err(io_err(&path))?;
    Ok(AuditConfig::from_toml_str(&text, &path.display().to_string())?)
}

fn live_backend(model: &ModelConfig, config: &AuditConfig, items: &[ShuffledItem]) -> Result<Arc<dyn Backend>, AuditError> {
    Ok(match model.backend {
        BackendKind::Synthetic => {
            let mut profile = config.synthetic.clone();
            profile.seed = config.seeds.synthetic;
            for c in &config.compounds {
                if !profile.compounds.contains(c) {
                    profile.compounds.push(c.clone());
                }
            }
            Arc::new(SyntheticBackend::new(profile)?.with_items(items))
        }
        BackendKind::Http => {
            let api_key = match &model.credential_env {
                Some(var) => Some(std::env::var(var).map_err(|_| BackendError::MissingCredential(var.clone()))?),
                None => None,
            };
            let endpoint = model.endpoint.clone().expect("validated: http models have an endpoint");
            Arc::new(
                HttpBackend::new(model.id.clone(), endpoint, api_key)
                    .with_scoring(model.scoring)
                    .with_retry(config.retry),
            )
        }
    })
}

/// Builds model handles, wrapped in the replay cache when one is configured.
/// In strict replay no live backend is constructed at all.
pub fn build_models(
    config: &AuditConfig,
    items: &[ShuffledItem],
    filter: &[String],
) -> Result<Vec<ModelHandle>, AuditError> {
    let selected: Vec<&ModelConfig> = config
        .models
        .iter()
        .filter(|m| filter.is_empty() || filter.contains(&m.id))
        .collect();
    if selected.is_empty() {
        return Err(AuditError::NoModels(filter.to_vec()));
    }
    let mut out = Vec::new();
    for model in selected {
        let backend: Arc<dyn Backend> = match (config.cache.mode, &config.cache.dir) {
            (CacheMode::Off, _) | (_, None) => live_backend(model, config, items)?,
            (CacheMode::StrictReplay, Some(dir)) => {
                Arc::new(CachedBackend::new(None, Some(ReplayCache::new(dir)), CacheMode::StrictReplay))
            }
            (mode, Some(dir)) => Arc::new(CachedBackend::new(
                Some(live_backend(model, config, items)?),
                Some(ReplayCache::new(dir)),
                mode,
            )),
        };
        out.push(ModelHandle::new(model.id.clone(), backend));
    }
    Ok(out)
}

pub fn run_config(config: &AuditConfig) -> RunConfig {
    RunConfig {
        parallelism: config.parallelism,
        failure_budget: config.failure_budget,
        generation_temperature: config.generation_temperature,
        repeats: config.repeats,
        wrong_answer_seed: config.seeds.wrong_answer,
    }
}

fn mode_name(mode: Mode) -> &'static str {
    match mode {
        Mode::Generative => "generative",
        Mode::Loglik => "loglik",
    }
}

fn persist(run_dir: &Path, phase: &str, output: &RunOutput) -> Result<(), AuditError> {
    write_jsonl(&run_dir.join("records").join(format!("{phase}.jsonl")), &output.records)?;
    write_atomic(
        &run_dir.join("lanes").join(format!("{phase}.json")),
        to_canonical_pretty(&output.lanes).expect("lanes serialize").as_bytes(),
    )
}

fn personae(exp: Experiment) -> Vec<PersonaSpec> {
    personae_for_experiment(exp)
}

pub fn run_exp1(config: &AuditConfig, run_dir: &Path, models: &[ModelHandle]) -> Result<RunOutput, AuditError> {
    let prepared = load_prepared(run_dir)?;
    let mut all = RunOutput::default();
    for &mode in &config.modes {
        let out = run_experiment1(models, &personae(Experiment::One), &prepared.items, mode, &run_config(config));
        persist(run_dir, &format!("exp1-{}", mode_name(mode)), &out)?;
        all.records.extend(out.records);
        all.lanes.extend(out.lanes);
    }
    Ok(all)
}

pub fn run_exp2(config: &AuditConfig, run_dir: &Path, models: &[ModelHandle]) -> Result<RunOutput, AuditError> {
    let prepared = load_prepared(run_dir)?;
    let mut all = RunOutput::default();
    for (part, name) in [(Part::Correct, "exp2-correct"), (Part::Incorrect, "exp2-incorrect")] {
        let out = run_experiment2(models, &personae(Experiment::Two), &prepared.items, part, &run_config(config));
        persist(run_dir, name, &out)?;
        all.records.extend(out.records);
        all.lanes.extend(out.lanes);
    }
    Ok(all)
}

/// Salary personae: the built-in list plus configured compounds.
pub fn salary_personae(config: &AuditConfig) -> Result<Vec<PersonaSpec>, AuditError> {
    let mut list = personae(Experiment::Three);
    for c in &config.compounds {
        list.push(compound_from_ids(c).map_err(|e| {
            AuditError::Config(ConfigError::Invalid {
                key: "compounds".into(),
                message: e.to_string(),
            })
        })?);
    }
    Ok(list)
}

pub fn run_exp3(config: &AuditConfig, run_dir: &Path, models: &[ModelHandle]) -> Result<RunOutput, AuditError> {
    let list = salary_personae(config)?;
    let mut all = RunOutput::default();
    for (i, &temperature) in config.temperatures.iter().enumerate() {
        let run = run_experiment3(
            models,
            &list,
            &config.fields,
            &config.levels,
            config.trials,
            temperature,
            &run_config(config),
        );
        persist(run_dir, &format!("exp3-t{i}"), &run.output)?;
        all.records.extend(run.output.records);
        all.lanes.extend(run.output.lanes);
    }
    Ok(all)
}

/// Every persisted record of a run, in file-name order.
pub fn load_records(run_dir: &Path) -> Result<Vec<TrialRecord>, AuditError> {
    let dir = run_dir.join("records");
    if !dir.exists() {
        return Ok(Vec::new());
    }
    let mut files: Vec<PathBuf> = fs::read_dir(&dir)
        .map_err(io_err(&dir))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "jsonl"))
        .collect();
    files.sort();
    let mut records = Vec::new();
    for f in files {
        records.extend(read_jsonl::<TrialRecord>(&f)?);
    }
    Ok(records)
}

/// Recomputes the report from persisted records alone and writes it under `report/`.
pub fn analyze(run_dir: &Path) -> Result<Report, AuditError> {
    let config = load_snapshot(run_dir)?;
    let manifest: Manifest = read_json(&run_dir.join(MANIFEST_FILE))?;
    let records = load_records(run_dir)?;
    let header = ReportHeader::new(manifest.digest.clone(), manifest.seeds, config.alpha, config.trials);
    let report = build_report(&records, header)?;
    emit(&report, &run_dir.join(REPORT_DIR), &Format::ALL)?;
    Ok(report)
}

/// Writes the parse and backend failures of a run as CSV for manual review.
pub fn review_export(run_dir: &Path, out: &Path) -> Result<usize, AuditError> {
    let records = load_records(run_dir)?;
    let rows = crate::report::failure_rows(&records);
    let mut w = csv::Writer::from_writer(Vec::new());
    if rows.is_empty() {
        w.write_record(crate::report::FAILURE_COLUMNS).map_err(|e| AuditError::Io {
            path: out.display().to_string(),
            message: e.to_string(),
        })?;
    }
    for r in &rows {
        w.serialize(r).map_err(|e| AuditError::Io {
            path: out.display().to_string(),
            message: e.to_string(),
        })?;
    }
    let bytes = w.into_inner().expect("in-memory flush");
    let mut file = fs::File::create(out).map_err(io_err(out))?;
    file.write_all(&bytes).map_err(io_err(out))?;
    Ok(rows.len())
}
