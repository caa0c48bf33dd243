//! Executes the three experiments over models x personae x items (or salary
//! cells) with a bounded worker pool per model.
//!
//! Results are stored by job index, never by completion order, so a run is
//! the same at any parallelism.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicBool, AtomicU32, AtomicUsize, Ordering};
use std::sync::{Arc, OnceLock};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{
    cache_key, Backend, BackendError, CacheRequest, GenerationRequest, ScoringRequest, TokenScores, MAX_TOKENS_EXP1,
    MAX_TOKENS_EXP2, MAX_TOKENS_EXP3,
};
use crate::dataset::{humanize_topic, Field, Level, ShuffledItem, LETTERS};
use crate::parsers::{parse_choice, parse_salary, parse_yes_no, Confidence, ParseFailure, ParseOutcome};
use crate::personae::{build_exp1_prompt, build_exp2_prompt, build_exp3_prompt, PersonaSpec, PromptPair};
use crate::rng::{keyed_rng, sha256_hex, uniform_below};

pub const DEFAULT_FAILURE_BUDGET: u32 = 20;
pub const GENERATION_TEMPERATURE: f64 = 0.1;
pub const SALARY_TEMPERATURE: f64 = 0.6;
pub const DEFAULT_TRIALS: u32 = 30;

#[derive(Debug, Error)]
pub enum RunError {
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error("every token is special; the mean log-likelihood is undefined")]
    UndefinedScore,
}

#[derive(Clone)]
pub struct ModelHandle {
    pub id: String,
    pub backend: Arc<dyn Backend>,
}

impl ModelHandle {
    pub fn new(id: impl Into<String>, backend: Arc<dyn Backend>) -> Self {
        ModelHandle {
            id: id.into(),
            backend,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub parallelism: usize,
    /// Consecutive backend failures after which a model lane is abandoned.
    pub failure_budget: u32,
    pub generation_temperature: f64,
    /// Attempts per (model, persona, question); one in the original protocol.
    pub repeats: u32,
    pub wrong_answer_seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            parallelism: 1,
            failure_budget: DEFAULT_FAILURE_BUDGET,
            generation_temperature: GENERATION_TEMPERATURE,
            repeats: 1,
            wrong_answer_seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ExperimentKind {
    #[serde(rename = "1")]
    Exp1,
    #[serde(rename = "2a")]
    Exp2Correct,
    #[serde(rename = "2b")]
    Exp2Incorrect,
    #[serde(rename = "3")]
    Exp3,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Generative,
    Loglik,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Part {
    /// The offered answer is the true one.
    Correct,
    /// The offered answer is the predetermined wrong one.
    Incorrect,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Parsed {
    Choice { index: usize },
    Verdict { yes: bool },
    Dollars { usd: u64 },
    ParseFailure { reason: String },
    BackendFailure { reason: String },
}

impl Parsed {
    pub fn is_failure(&self) -> bool {
        matches!(self, Parsed::ParseFailure { .. } | Parsed::BackendFailure { .. })
    }

    pub fn failure_reason(&self) -> Option<&str> {
        match self {
            Parsed::ParseFailure { reason } | Parsed::BackendFailure { reason } => Some(reason),
            _ => None,
        }
    }
}

/// One model interaction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub experiment: ExperimentKind,
    pub model: String,
    pub persona: String,
    pub mode: Mode,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub topic: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub item_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub field: Option<Field>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub level: Option<Level>,
    pub temperature: f64,
    pub trial_index: u32,
    /// Option offered to the grader (experiment 2).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub selected: Option<usize>,
    /// Position of the true answer among the shuffled options.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub correct: Option<usize>,
    pub raw: String,
    pub parsed: Parsed,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub confidence: Option<Confidence>,
    pub cache_key: String,
}

impl TrialRecord {
    /// Experiment 1: whether the parsed answer is right; `None` on failure.
    pub fn is_correct(&self) -> Option<bool> {
        match (&self.parsed, self.correct) {
            (Parsed::Choice { index }, Some(c)) => Some(*index == c),
            _ => None,
        }
    }

    pub fn verdict(&self) -> Option<bool> {
        match self.parsed {
            Parsed::Verdict { yes } => Some(yes),
            _ => None,
        }
    }

    pub fn dollars(&self) -> Option<u64> {
        match self.parsed {
            Parsed::Dollars { usd } => Some(usd),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LaneStatus {
    pub model: String,
    pub experiment: ExperimentKind,
    pub planned: usize,
    pub completed: usize,
    pub backend_failures: usize,
    pub aborted: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunOutput {
    pub records: Vec<TrialRecord>,
    pub lanes: Vec<LaneStatus>,
}

impl RunOutput {
    pub fn any_aborted(&self) -> bool {
        self.lanes.iter().any(|l| l.aborted)
    }

    fn extend(&mut self, other: RunOutput) {
        self.records.extend(other.records);
        self.lanes.extend(other.lanes);
    }
}

/// Mean log-probability over non-special tokens.
pub fn mean_logprob(scores: &TokenScores) -> Result<f64, RunError> {
    let (sum, n) = scores
        .tokens
        .iter()
        .filter(|t| !t.special)
        .fold((0.0, 0usize), |(s, n), t| (s + t.logprob, n + 1));
    if n == 0 {
        return Err(RunError::UndefinedScore);
    }
    Ok(sum / n as f64)
}

/// Text scored for one candidate letter: system, blank line, user, space, letter.
pub fn loglik_text(prompt: &PromptPair, letter: char) -> String {
    format!("{}\n\n{} {letter}", prompt.system, prompt.user)
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoglikChoice {
    pub index: usize,
    pub scores: [f64; 4],
}

/// Scores the prompt completed by each letter A-D and returns the argmax of
/// the mean log-likelihood; ties go to the lowest index.
pub fn choose_by_loglikelihood(
    backend: &dyn Backend,
    model: &str,
    prompt: &PromptPair,
) -> Result<LoglikChoice, RunError> {
    let mut scores = [0.0; 4];
    for (i, letter) in LETTERS.iter().enumerate() {
        let tokens = backend.score_sequence(model, &loglik_text(prompt, *letter))?;
        scores[i] = mean_logprob(&tokens)?;
    }
    let mut index = 0;
    for i in 1..4 {
        if scores[i] > scores[index] {
            index = i;
        }
    }
    Ok(LoglikChoice { index, scores })
}

/// The predetermined wrong answer for an item: uniform over the three
/// incorrect positions, keyed by `(seed, item id)` so every model and persona
/// sees the same one.
pub fn pick_incorrect_option(item: &ShuffledItem, seed: u64) -> usize {
    let mut rng = keyed_rng("wrong-answer", seed, item.id());
    let k = uniform_below(&mut rng, 3) as usize;
    (0..4)
        .filter(|&i| i != item.shuffled_correct)
        .nth(k)
        .expect("three incorrect options")
}

fn execute<J: Sync>(
    model: &str,
    experiment: ExperimentKind,
    jobs: &[J],
    config: &RunConfig,
    run: impl Fn(&J) -> TrialRecord + Sync,
) -> RunOutput {
    let slots: Vec<OnceLock<TrialRecord>> = jobs.iter().map(|_| OnceLock::new()).collect();
    let next = AtomicUsize::new(0);
    let streak = AtomicU32::new(0);
    let failures = AtomicUsize::new(0);
    let aborted = AtomicBool::new(false);
    let budget = config.failure_budget.max(1);
    let workers = config.parallelism.max(1).min(jobs.len().max(1));

    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                if aborted.load(Ordering::SeqCst) {
                    break;
                }
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= jobs.len() {
                    break;
                }
                let record = run(&jobs[i]);
                if matches!(record.parsed, Parsed::BackendFailure { .. }) {
                    failures.fetch_add(1, Ordering::SeqCst);
                    if streak.fetch_add(1, Ordering::SeqCst) + 1 >= budget {
                        aborted.store(true, Ordering::SeqCst);
                    }
                } else {
                    streak.store(0, Ordering::SeqCst);
                }
                let _ = slots[i].set(record);
            });
        }
    });

    let records: Vec<TrialRecord> = slots.into_iter().filter_map(OnceLock::into_inner).collect();
    RunOutput {
        lanes: vec![LaneStatus {
            model: model.to_string(),
            experiment,
            planned: jobs.len(),
            completed: records.len(),
            backend_failures: failures.into_inner(),
            aborted: aborted.into_inner(),
        }],
        records,
    }
}

fn parsed_from<T>(result: Result<ParseOutcome<T>, ParseFailure>, wrap: impl FnOnce(T) -> Parsed) -> (Parsed, Option<Confidence>) {
    match result {
        Ok(o) => (wrap(o.value), Some(o.confidence)),
        Err(f) => (Parsed::ParseFailure { reason: f.reason }, None),
    }
}

fn backend_failure(e: impl std::fmt::Display) -> (String, Parsed, Option<Confidence>) {
    (
        String::new(),
        Parsed::BackendFailure {
            reason: e.to_string(),
        },
        None,
    )
}

pub fn run_experiment1(
    models: &[ModelHandle],
    personae: &[PersonaSpec],
    items: &[ShuffledItem],
    mode: Mode,
    config: &RunConfig,
) -> RunOutput {
    let jobs: Vec<(usize, usize, u32)> = (0..personae.len())
        .flat_map(|p| (0..items.len()).flat_map(move |i| (0..config.repeats.max(1)).map(move |r| (p, i, r))))
        .collect();
    let mut out = RunOutput::default();
    for model in models {
        let lane = execute(&model.id, ExperimentKind::Exp1, &jobs, config, |&(p, i, r)| {
            let persona = &personae[p];
            let item = &items[i];
            let prompt = build_exp1_prompt(persona, &humanize_topic(item.topic()), item);
            let (raw, parsed, confidence, key, temperature) = match mode {
                Mode::Generative => {
                    let request = GenerationRequest {
                        model: model.id.clone(),
                        system: prompt.system,
                        user: prompt.user,
                        temperature: config.generation_temperature,
                        max_tokens: MAX_TOKENS_EXP1,
                        trial_index: r,
                    };
                    let key = cache_key(&CacheRequest::Generate(request.clone()));
                    let (raw, parsed, confidence) = match model.backend.generate(&request) {
                        Ok(text) => {
                            let (parsed, conf) = parsed_from(parse_choice(&text), |index| Parsed::Choice { index });
                            (text, parsed, conf)
                        }
                        Err(e) => backend_failure(e),
                    };
                    (raw, parsed, confidence, key, config.generation_temperature)
                }
                Mode::Loglik => {
                    let keys: Vec<String> = LETTERS
                        .iter()
                        .map(|l| {
                            cache_key(&CacheRequest::Score(ScoringRequest {
                                model: model.id.clone(),
                                text: loglik_text(&prompt, *l),
                            }))
                        })
                        .collect();
                    let key = sha256_hex(keys.join("\n").as_bytes());
                    let (raw, parsed, confidence) = match choose_by_loglikelihood(model.backend.as_ref(), &model.id, &prompt) {
                        Ok(choice) => {
                            let raw = LETTERS
                                .iter()
                                .zip(choice.scores)
                                .map(|(l, s)| format!("{l}={s:.6}"))
                                .collect::<Vec<_>>()
                                .join(" ");
                            (raw, Parsed::Choice { index: choice.index }, None)
                        }
                        Err(e) => backend_failure(e),
                    };
                    (raw, parsed, confidence, key, 0.0)
                }
            };
            TrialRecord {
                experiment: ExperimentKind::Exp1,
                model: model.id.clone(),
                persona: persona.id.clone(),
                mode,
                topic: Some(item.topic().to_string()),
                item_id: Some(item.id().to_string()),
                field: None,
                level: None,
                temperature,
                trial_index: r,
                selected: None,
                correct: Some(item.shuffled_correct),
                raw,
                parsed,
                confidence,
                cache_key: key,
            }
        });
        out.extend(lane);
    }
    out
}

pub fn run_experiment2(
    models: &[ModelHandle],
    personae: &[PersonaSpec],
    items: &[ShuffledItem],
    part: Part,
    config: &RunConfig,
) -> RunOutput {
    let experiment = match part {
        Part::Correct => ExperimentKind::Exp2Correct,
        Part::Incorrect => ExperimentKind::Exp2Incorrect,
    };
    let jobs: Vec<(usize, usize, u32)> = (0..personae.len())
        .flat_map(|p| (0..items.len()).flat_map(move |i| (0..config.repeats.max(1)).map(move |r| (p, i, r))))
        .collect();
    let mut out = RunOutput::default();
    for model in models {
        let lane = execute(&model.id, experiment, &jobs, config, |&(p, i, r)| {
            let persona = &personae[p];
            let item = &items[i];
            let selected = match part {
                Part::Correct => item.shuffled_correct,
                Part::Incorrect => pick_incorrect_option(item, config.wrong_answer_seed),
            };
            let prompt = build_exp2_prompt(persona, &humanize_topic(item.topic()), item, selected);
            let request = GenerationRequest {
                model: model.id.clone(),
                system: prompt.system,
                user: prompt.user,
                temperature: config.generation_temperature,
                max_tokens: MAX_TOKENS_EXP2,
                trial_index: r,
            };
            let key = cache_key(&CacheRequest::Generate(request.clone()));
            let (raw, parsed, confidence) = match model.backend.generate(&request) {
                Ok(text) => {
                    let (parsed, conf) = parsed_from(parse_yes_no(&text), |yes| Parsed::Verdict { yes });
                    (text, parsed, conf)
                }
                Err(e) => backend_failure(e),
            };
            TrialRecord {
                experiment,
                model: model.id.clone(),
                persona: persona.id.clone(),
                mode: Mode::Generative,
                topic: Some(item.topic().to_string()),
                item_id: Some(item.id().to_string()),
                field: None,
                level: None,
                temperature: config.generation_temperature,
                trial_index: r,
                selected: Some(selected),
                correct: Some(item.shuffled_correct),
                raw,
                parsed,
                confidence,
                cache_key: key,
            }
        });
        out.extend(lane);
    }
    out
}

/// Parsed dollar values of one (model, persona, field, level, temperature) cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SalarySample {
    pub model: String,
    pub persona: String,
    pub field: Field,
    pub level: Level,
    pub temperature: f64,
    pub trials: u32,
    pub values: Vec<u64>,
    /// Trials without a value: parse failures, backend failures, or never run.
    pub failures: u32,
}

impl SalarySample {
    /// A cell with more than half of its trials failed is excluded from testing.
    pub fn is_valid(&self) -> bool {
        u64::from(self.failures) * 2 <= u64::from(self.trials)
    }

    pub fn values_f64(&self) -> Vec<f64> {
        self.values.iter().map(|&v| v as f64).collect()
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SalaryRun {
    pub output: RunOutput,
    pub samples: Vec<SalarySample>,
}

/// Groups experiment-3 records into cells in first-seen order.
pub fn salary_samples(records: &[TrialRecord], trials: u32) -> Vec<SalarySample> {
    let mut order: Vec<(String, String, Field, Level, u64)> = Vec::new();
    let mut cells: BTreeMap<(String, String, Field, Level, u64), Vec<u64>> = BTreeMap::new();
    for r in records.iter().filter(|r| r.experiment == ExperimentKind::Exp3) {
        let (Some(field), Some(level)) = (r.field, r.level) else {
            continue;
        };
        let key = (r.model.clone(), r.persona.clone(), field, level, r.temperature.to_bits());
        let values = cells.entry(key.clone()).or_insert_with(|| {
            order.push(key);
            Vec::new()
        });
        if let Some(v) = r.dollars() {
            values.push(v);
        }
    }
    order
        .into_iter()
        .map(|key| {
            let values = cells.remove(&key).unwrap_or_default();
            let (model, persona, field, level, temp) = key;
            SalarySample {
                model,
                persona,
                field,
                level,
                temperature: f64::from_bits(temp),
                trials,
                failures: trials.saturating_sub(values.len() as u32),
                values,
            }
        })
        .collect()
}

pub fn run_experiment3(
    models: &[ModelHandle],
    personae: &[PersonaSpec],
    fields: &[Field],
    levels: &[Level],
    trials: u32,
    temperature: f64,
    config: &RunConfig,
) -> SalaryRun {
    let jobs: Vec<(usize, Field, Level, u32)> = (0..personae.len())
        .flat_map(|p| {
            fields.iter().flat_map(move |&f| {
                levels
                    .iter()
                    .flat_map(move |&l| (0..trials).map(move |t| (p, f, l, t)))
            })
        })
        .collect();
    let mut output = RunOutput::default();
    for model in models {
        let lane = execute(&model.id, ExperimentKind::Exp3, &jobs, config, |&(p, field, level, t)| {
            let persona = &personae[p];
            let prompt = build_exp3_prompt(persona, level, field);
            let request = GenerationRequest {
                model: model.id.clone(),
                system: prompt.system,
                user: prompt.user,
                temperature,
                max_tokens: MAX_TOKENS_EXP3,
                trial_index: t,
            };
            let key = cache_key(&CacheRequest::Generate(request.clone()));
            let (raw, parsed, confidence) = match model.backend.generate(&request) {
                Ok(text) => {
                    let (parsed, conf) = parsed_from(parse_salary(&text), |usd| Parsed::Dollars { usd });
                    (text, parsed, conf)
                }
                Err(e) => backend_failure(e),
            };
            TrialRecord {
                experiment: ExperimentKind::Exp3,
                model: model.id.clone(),
                persona: persona.id.clone(),
                mode: Mode::Generative,
                topic: None,
                item_id: None,
                field: Some(field),
                level: Some(level),
                temperature,
                trial_index: t,
                selected: None,
                correct: None,
                raw,
                parsed,
                confidence,
                cache_key: key,
            }
        });
        output.extend(lane);
    }
    let samples = salary_samples(&output.records, trials);
    SalaryRun { output, samples }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::TokenScore;

    fn scores(v: &[(f64, bool)]) -> TokenScores {
        TokenScores {
            tokens: v
                .iter()
                .map(|&(logprob, special)| TokenScore {
                    text: "t".into(),
                    logprob,
                    special,
                })
                .collect(),
        }
    }

    #[test]
    fn mean_logprob_examples() {
        let s = scores(&[(-1.0, false), (-2.0, false), (-3.0, false)]);
        assert_eq!(mean_logprob(&s).unwrap(), -2.0);
        assert_eq!(mean_logprob(&scores(&[(-5.0, true), (-1.0, false)])).unwrap(), -1.0);
        assert!(matches!(
            mean_logprob(&scores(&[(-5.0, true)])),
            Err(RunError::UndefinedScore)
        ));
    }

    #[test]
    fn salary_sample_validity() {
        let s = SalarySample {
            model: "m".into(),
            persona: "p".into(),
            field: Field::Law,
            level: Level::Junior,
            temperature: 0.6,
            trials: 30,
            values: vec![1000; 15],
            failures: 15,
        };
        assert!(s.is_valid());
        let bad = SalarySample {
            values: vec![1000; 14],
            failures: 16,
            ..s
        };
        assert!(!bad.is_valid());
    }
}
