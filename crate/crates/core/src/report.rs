//! Aggregation of trial records into accuracy tables, grading fractions,
//! salary summaries and significance annotations, plus deterministic
//! emission as JSON, CSV and Markdown.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::canonical::to_canonical_pretty;
use crate::dataset::{Field, Level, Seeds};
use crate::personae::{compound_from_ids, persona_by_id, PersonaGroup};
use crate::runner::{salary_samples, ExperimentKind, Mode, Parsed, SalarySample, TrialRecord};
use crate::stats::{
    kruskal_wallis, mann_whitney, mcnemar, pair_count, paired_contingency, Direction, PairedContingency, TestResult,
};

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("records mix {0}; one table per model and mode")]
    MixedRecords(String),
    #[error("experiment 2 part {0} has no records")]
    MissingPart(&'static str),
    #[error("cannot write {path}: {message}")]
    Io { path: String, message: String },
}

pub fn round_dp(x: f64, dp: i32) -> f64 {
    let f = 10f64.powi(dp);
    (x * f).round() / f
}

/// Rounds to `digits` significant digits.
pub fn round_sig(x: f64, digits: i32) -> f64 {
    if x == 0.0 || !x.is_finite() {
        return x;
    }
    let magnitude = x.abs().log10().floor() as i32;
    let scale = 10f64.powi(digits - 1 - magnitude);
    (x * scale).round() / scale
}

fn rounded(r: &TestResult) -> TestResult {
    TestResult {
        statistic: round_sig(r.statistic, 6),
        p: round_sig(r.p, 4),
        p_adjusted: round_sig(r.p_adjusted, 4),
        ..r.clone()
    }
}

/// Group of a persona id, including compound ids such as `male+asian+expatriate`.
pub fn group_of(persona_id: &str) -> PersonaGroup {
    if let Some(p) = persona_by_id(persona_id) {
        return p.group;
    }
    if compound_from_ids(persona_id).is_ok() {
        return PersonaGroup::Compound;
    }
    PersonaGroup::Other
}

fn first_seen<'a>(values: impl Iterator<Item = &'a str>) -> Vec<String> {
    let mut out: Vec<String> = Vec::new();
    for v in values {
        if !out.iter().any(|o| o == v) {
            out.push(v.to_string());
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportHeader {
    pub manifest_digest: String,
    pub seeds: Seeds,
    pub alpha: f64,
    pub trials: u32,
    pub assumptions: Vec<String>,
}

impl ReportHeader {
    pub fn new(manifest_digest: String, seeds: Seeds, alpha: f64, trials: u32) -> Self {
        ReportHeader {
            manifest_digest,
            seeds,
            alpha,
            trials,
            assumptions: vec![
                format!("significance level alpha = {alpha} (assumed)"),
                "all tests two-sided; direction reported post hoc".into(),
                "McNemar: exact binomial when b + c <= 25, otherwise chi-square with continuity correction".into(),
                "Mann-Whitney: normal approximation, tie-corrected variance, continuity correction 0.5".into(),
                "Kruskal-Wallis: tie-corrected H, chi-square with k - 1 df".into(),
                "Bonferroni factor = number of pairs within the persona group".into(),
                "parse failures excluded from rates and tests".into(),
            ],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracyCell {
    pub correct: u32,
    pub answered: u32,
    pub failures: u32,
    /// `None` when nothing was answered.
    pub accuracy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracyTable {
    pub model: String,
    pub mode: Mode,
    pub personae: Vec<String>,
    pub topics: Vec<String>,
    /// `cells[persona][topic]`.
    pub cells: Vec<Vec<AccuracyCell>>,
}

/// Per (persona, topic) accuracy over parsed answers of one model and mode.
pub fn accuracy_table(records: &[TrialRecord]) -> Result<AccuracyTable, ReportError> {
    let models = first_seen(records.iter().map(|r| r.model.as_str()));
    if models.len() > 1 {
        return Err(ReportError::MixedRecords(format!("models {}", models.join(", "))));
    }
    let modes: Vec<Mode> = records.iter().fold(Vec::new(), |mut acc, r| {
        if !acc.contains(&r.mode) {
            acc.push(r.mode);
        }
        acc
    });
    if modes.len() > 1 {
        return Err(ReportError::MixedRecords("generative and loglik modes".into()));
    }
    if records.iter().any(|r| r.experiment != ExperimentKind::Exp1) {
        return Err(ReportError::MixedRecords("experiments".into()));
    }
    let personae = first_seen(records.iter().map(|r| r.persona.as_str()));
    let topics = first_seen(records.iter().filter_map(|r| r.topic.as_deref()));
    let mut cells = vec![
        vec![
            AccuracyCell {
                correct: 0,
                answered: 0,
                failures: 0,
                accuracy: None
            };
            topics.len()
        ];
        personae.len()
    ];
    for r in records {
        let p = personae.iter().position(|x| *x == r.persona).expect("seen");
        let Some(t) = r.topic.as_ref().and_then(|t| topics.iter().position(|x| x == t)) else {
            continue;
        };
        let cell = &mut cells[p][t];
        match r.is_correct() {
            Some(ok) => {
                cell.answered += 1;
                cell.correct += u32::from(ok);
            }
            None => cell.failures += 1,
        }
    }
    for cell in cells.iter_mut().flatten() {
        cell.accuracy = (cell.answered > 0).then(|| round_dp(f64::from(cell.correct) / f64::from(cell.answered), 2));
    }
    Ok(AccuracyTable {
        model: models.into_iter().next().unwrap_or_default(),
        mode: modes.into_iter().next().unwrap_or(Mode::Generative),
        personae,
        topics,
        cells,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McnemarPair {
    pub model: String,
    pub mode: Mode,
    pub topic: String,
    pub group: PersonaGroup,
    pub first: String,
    pub second: String,
    pub contingency: PairedContingency,
    pub result: TestResult,
    pub significant_raw: bool,
    pub significant: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestTally {
    pub performed: usize,
    pub significant_raw: usize,
    pub significant_adjusted: usize,
}

/// Outcomes of `first` and `second` on the items both answered, keyed by (item, trial).
fn paired_outcomes(
    records: &[&TrialRecord],
    first: &str,
    second: &str,
    outcome: impl Fn(&TrialRecord) -> Option<bool>,
) -> (Vec<bool>, Vec<bool>) {
    let index = |persona: &str| -> BTreeMap<(String, u32), bool> {
        records
            .iter()
            .filter(|r| r.persona == persona)
            .filter_map(|r| Some(((r.item_id.clone()?, r.trial_index), outcome(r)?)))
            .collect()
    };
    let a = index(first);
    let b = index(second);
    a.iter()
        .filter_map(|(k, &x)| b.get(k).map(|&y| (x, y)))
        .unzip()
}

/// Within-group pairs of the tested groups, in persona order.
fn group_pairs(personae: &[String]) -> Vec<(PersonaGroup, String, String, u32)> {
    let mut by_group: Vec<(PersonaGroup, Vec<String>)> = Vec::new();
    for p in personae {
        let g = group_of(p);
        if !g.is_tested() {
            continue;
        }
        match by_group.iter_mut().find(|(x, _)| *x == g) {
            Some((_, v)) => v.push(p.clone()),
            None => by_group.push((g, vec![p.clone()])),
        }
    }
    let mut out = Vec::new();
    for (g, members) in by_group {
        let m = pair_count(members.len()) as u32;
        for i in 0..members.len() {
            for j in i + 1..members.len() {
                out.push((g, members[i].clone(), members[j].clone(), m));
            }
        }
    }
    out
}

fn exp1_tests(records: &[TrialRecord], alpha: f64) -> Vec<McnemarPair> {
    let mut lanes: Vec<(String, Mode)> = Vec::new();
    for r in records {
        let k = (r.model.clone(), r.mode);
        if !lanes.contains(&k) {
            lanes.push(k);
        }
    }
    let mut out = Vec::new();
    for (model, mode) in lanes {
        let lane: Vec<&TrialRecord> = records.iter().filter(|r| r.model == model && r.mode == mode).collect();
        let personae = first_seen(lane.iter().map(|r| r.persona.as_str()));
        let topics = first_seen(lane.iter().filter_map(|r| r.topic.as_deref()));
        for topic in &topics {
            let in_topic: Vec<&TrialRecord> = lane
                .iter()
                .copied()
                .filter(|r| r.topic.as_deref() == Some(topic.as_str()))
                .collect();
            for (group, first, second, m) in group_pairs(&personae) {
                let (a, b) = paired_outcomes(&in_topic, &first, &second, TrialRecord::is_correct);
                let contingency = paired_contingency(&a, &b).expect("unzip gives equal lengths");
                let result = mcnemar(contingency.b, contingency.c).corrected(m);
                out.push(McnemarPair {
                    model: model.clone(),
                    mode,
                    topic: topic.clone(),
                    group,
                    first,
                    second,
                    contingency,
                    significant_raw: result.significant_raw(alpha),
                    significant: result.significant(alpha),
                    result: rounded(&result),
                });
            }
        }
    }
    out
}

fn tally<'a>(flags: impl Iterator<Item = (bool, bool)> + 'a) -> TestTally {
    let mut t = TestTally {
        performed: 0,
        significant_raw: 0,
        significant_adjusted: 0,
    };
    for (raw, adjusted) in flags {
        t.performed += 1;
        t.significant_raw += usize::from(raw);
        t.significant_adjusted += usize::from(adjusted);
    }
    t
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradingRow {
    pub model: String,
    pub persona: String,
    pub part: ExperimentKind,
    pub yes: u32,
    pub parsed: u32,
    pub failures: u32,
    pub fraction: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradingTest {
    pub model: String,
    pub part: ExperimentKind,
    pub first: String,
    pub second: String,
    pub contingency: PairedContingency,
    pub result: TestResult,
    pub highlighted: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradingReport {
    pub rows: Vec<GradingRow>,
    pub tests: Vec<GradingTest>,
}

/// Share of parsed "Yes" per (model, persona, part), with male-vs-female McNemar tests.
pub fn grading_fraction_table(records: &[TrialRecord], alpha: f64) -> Result<GradingReport, ReportError> {
    let exp2: Vec<&TrialRecord> = records
        .iter()
        .filter(|r| matches!(r.experiment, ExperimentKind::Exp2Correct | ExperimentKind::Exp2Incorrect))
        .collect();
    for (part, name) in [(ExperimentKind::Exp2Correct, "correct"), (ExperimentKind::Exp2Incorrect, "incorrect")] {
        if !exp2.iter().any(|r| r.experiment == part) {
            return Err(ReportError::MissingPart(name));
        }
    }
    let models = first_seen(exp2.iter().map(|r| r.model.as_str()));
    let mut rows = Vec::new();
    let mut tests = Vec::new();
    for model in &models {
        for part in [ExperimentKind::Exp2Correct, ExperimentKind::Exp2Incorrect] {
            let lane: Vec<&TrialRecord> = exp2
                .iter()
                .copied()
                .filter(|r| &r.model == model && r.experiment == part)
                .collect();
            let personae = first_seen(lane.iter().map(|r| r.persona.as_str()));
            for persona in &personae {
                let mut row = GradingRow {
                    model: model.clone(),
                    persona: persona.clone(),
                    part,
                    yes: 0,
                    parsed: 0,
                    failures: 0,
                    fraction: None,
                };
                for r in lane.iter().filter(|r| &r.persona == persona) {
                    match r.verdict() {
                        Some(y) => {
                            row.parsed += 1;
                            row.yes += u32::from(y);
                        }
                        None => row.failures += 1,
                    }
                }
                row.fraction = (row.parsed > 0).then(|| round_dp(f64::from(row.yes) / f64::from(row.parsed), 2));
                rows.push(row);
            }
            if personae.iter().any(|p| p == "male") && personae.iter().any(|p| p == "female") {
                let (a, b) = paired_outcomes(&lane, "male", "female", TrialRecord::verdict);
                let contingency = paired_contingency(&a, &b).expect("unzip gives equal lengths");
                let result = mcnemar(contingency.b, contingency.c);
                tests.push(GradingTest {
                    model: model.clone(),
                    part,
                    first: "male".into(),
                    second: "female".into(),
                    contingency,
                    highlighted: result.significant(alpha),
                    result: rounded(&result),
                });
            }
        }
    }
    Ok(GradingReport { rows, tests })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SalarySummaryRow {
    pub model: String,
    pub persona: String,
    pub group: PersonaGroup,
    pub field: Field,
    pub level: Level,
    pub temperature: f64,
    pub mean: Option<i64>,
    pub sd: Option<i64>,
    pub n: usize,
    pub star: bool,
    pub valid: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupTest {
    pub model: String,
    pub field: Field,
    pub level: Level,
    pub temperature: f64,
    pub group: PersonaGroup,
    pub personae: Vec<String>,
    /// `None` when every pooled value tied.
    pub result: Option<TestResult>,
    pub star: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SalaryPairTest {
    pub model: String,
    pub field: Field,
    pub level: Level,
    pub temperature: f64,
    pub group: PersonaGroup,
    pub first: String,
    pub second: String,
    pub result: TestResult,
    pub significant: bool,
    pub significant_adjusted: bool,
}

/// Significant within-group pairs per model and temperature, excluding compound personae.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairTally {
    pub model: String,
    pub temperature: f64,
    pub significant: usize,
    pub significant_adjusted: usize,
    pub total: usize,
}

impl PairTally {
    pub fn display(&self) -> String {
        format!("{} / {}", self.significant, self.total)
    }
}

/// How often the first compound persona significantly out-earns the second.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompoundTally {
    pub model: String,
    pub temperature: f64,
    pub first: String,
    pub second: String,
    pub first_dominates: usize,
    pub total: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellId {
    pub model: String,
    pub persona: String,
    pub field: Field,
    pub level: Level,
    pub temperature: f64,
    pub failures: u32,
    pub trials: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SalaryReport {
    pub rows: Vec<SalarySummaryRow>,
    pub group_tests: Vec<GroupTest>,
    pub pair_tests: Vec<SalaryPairTest>,
    pub tallies: Vec<PairTally>,
    pub compound: Vec<CompoundTally>,
    pub invalid_cells: Vec<CellId>,
}

fn mean_sd(values: &[u64]) -> (Option<i64>, Option<i64>) {
    if values.is_empty() {
        return (None, None);
    }
    let n = values.len() as f64;
    let mean = values.iter().map(|&v| v as f64).sum::<f64>() / n;
    let sd = if values.len() > 1 {
        (values.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    (Some(mean.round() as i64), Some(sd.round() as i64))
}

/// Summaries, Kruskal-Wallis stars and Mann-Whitney pair tests for salary samples.
pub fn salary_summary(samples: &[SalarySample], alpha: f64) -> SalaryReport {
    let mut report = SalaryReport {
        rows: Vec::new(),
        group_tests: Vec::new(),
        pair_tests: Vec::new(),
        tallies: Vec::new(),
        compound: Vec::new(),
        invalid_cells: Vec::new(),
    };
    // (model, temperature) lanes, then (field, level) cells, in first-seen order
    let mut lanes: Vec<(String, u64)> = Vec::new();
    for s in samples {
        let k = (s.model.clone(), s.temperature.to_bits());
        if !lanes.contains(&k) {
            lanes.push(k);
        }
    }
    for (model, temp_bits) in lanes {
        let temperature = f64::from_bits(temp_bits);
        let lane: Vec<&SalarySample> = samples
            .iter()
            .filter(|s| s.model == model && s.temperature.to_bits() == temp_bits)
            .collect();
        let mut cells: Vec<(Field, Level)> = Vec::new();
        for s in &lane {
            if !cells.contains(&(s.field, s.level)) {
                cells.push((s.field, s.level));
            }
        }
        let mut tally = PairTally {
            model: model.clone(),
            temperature,
            significant: 0,
            significant_adjusted: 0,
            total: 0,
        };
        let mut compound: Option<CompoundTally> = None;
        for (field, level) in cells {
            let cell: Vec<&SalarySample> = lane
                .iter()
                .copied()
                .filter(|s| s.field == field && s.level == level)
                .collect();
            let valid: Vec<&SalarySample> = cell.iter().copied().filter(|s| s.is_valid()).collect();
            for s in cell.iter().filter(|s| !s.is_valid()) {
                report.invalid_cells.push(CellId {
                    model: s.model.clone(),
                    persona: s.persona.clone(),
                    field,
                    level,
                    temperature,
                    failures: s.failures,
                    trials: s.trials,
                });
            }
            let personae: Vec<String> = valid.iter().map(|s| s.persona.clone()).collect();
            let values: BTreeMap<&str, Vec<f64>> =
                valid.iter().map(|s| (s.persona.as_str(), s.values_f64())).collect();

            let mut starred: Vec<PersonaGroup> = Vec::new();
            let mut groups: Vec<(PersonaGroup, Vec<String>)> = Vec::new();
            for p in &personae {
                let g = group_of(p);
                if !g.is_tested() {
                    continue;
                }
                match groups.iter_mut().find(|(x, _)| *x == g) {
                    Some((_, v)) => v.push(p.clone()),
                    None => groups.push((g, vec![p.clone()])),
                }
            }
            for (group, members) in &groups {
                if members.len() < 2 {
                    continue;
                }
                let slices: Vec<&[f64]> = members.iter().map(|m| values[m.as_str()].as_slice()).collect();
                let result = kruskal_wallis(&slices).ok();
                let star = result.as_ref().is_some_and(|r| r.significant(alpha));
                if star {
                    starred.push(*group);
                }
                report.group_tests.push(GroupTest {
                    model: model.clone(),
                    field,
                    level,
                    temperature,
                    group: *group,
                    personae: members.clone(),
                    result: result.as_ref().map(rounded),
                    star,
                });
            }
            for (group, first, second, m) in group_pairs(&personae) {
                let result = mann_whitney(&values[first.as_str()], &values[second.as_str()])
                    .expect("valid samples are nonempty and finite")
                    .corrected(m);
                let significant = result.significant_raw(alpha);
                let significant_adjusted = result.significant(alpha);
                if group == PersonaGroup::Compound {
                    let c = compound.get_or_insert_with(|| CompoundTally {
                        model: model.clone(),
                        temperature,
                        first: first.clone(),
                        second: second.clone(),
                        first_dominates: 0,
                        total: 0,
                    });
                    if c.first == first && c.second == second {
                        c.total += 1;
                        c.first_dominates += usize::from(significant && result.direction == Direction::FirstHigher);
                    }
                } else {
                    tally.total += 1;
                    tally.significant += usize::from(significant);
                    tally.significant_adjusted += usize::from(significant_adjusted);
                }
                report.pair_tests.push(SalaryPairTest {
                    model: model.clone(),
                    field,
                    level,
                    temperature,
                    group,
                    first,
                    second,
                    significant,
                    significant_adjusted,
                    result: rounded(&result),
                });
            }
            for s in &cell {
                let (mean, sd) = mean_sd(&s.values);
                let group = group_of(&s.persona);
                report.rows.push(SalarySummaryRow {
                    model: model.clone(),
                    persona: s.persona.clone(),
                    group,
                    field,
                    level,
                    temperature,
                    mean,
                    sd,
                    n: s.values.len(),
                    star: s.is_valid() && starred.contains(&group),
                    valid: s.is_valid(),
                });
            }
        }
        if tally.total > 0 {
            report.tallies.push(tally);
        }
        report.compound.extend(compound);
    }
    report
}

pub const FAILURE_COLUMNS: [&str; 10] = [
    "experiment", "model", "persona", "mode", "item", "temperature", "trial_index", "kind", "reason", "raw",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FailureRow {
    // keep in step with FAILURE_COLUMNS
    pub experiment: ExperimentKind,
    pub model: String,
    pub persona: String,
    pub mode: Mode,
    pub item: String,
    pub temperature: f64,
    pub trial_index: u32,
    pub kind: String,
    pub reason: String,
    pub raw: String,
}

pub fn failure_rows(records: &[TrialRecord]) -> Vec<FailureRow> {
    records
        .iter()
        .filter_map(|r| {
            let (kind, reason) = match &r.parsed {
                Parsed::ParseFailure { reason } => ("parse", reason.clone()),
                Parsed::BackendFailure { reason } => ("backend", reason.clone()),
                _ => return None,
            };
            let item = match (&r.item_id, r.field, r.level) {
                (Some(id), _, _) => id.clone(),
                (None, Some(f), Some(l)) => format!("{l} {f}"),
                _ => String::new(),
            };
            Some(FailureRow {
                experiment: r.experiment,
                model: r.model.clone(),
                persona: r.persona.clone(),
                mode: r.mode,
                item,
                temperature: r.temperature,
                trial_index: r.trial_index,
                kind: kind.into(),
                reason,
                raw: r.raw.clone(),
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Exp1Report {
    pub tables: Vec<AccuracyTable>,
    pub tests: Vec<McnemarPair>,
    pub tally: TestTally,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub header: ReportHeader,
    pub exp1: Option<Exp1Report>,
    pub grading: Option<GradingReport>,
    pub salary: Option<SalaryReport>,
    pub failures: Vec<FailureRow>,
}

/// Builds the full report from every persisted record of a run.
pub fn build_report(records: &[TrialRecord], header: ReportHeader) -> Result<Report, ReportError> {
    let alpha = header.alpha;
    let exp1: Vec<TrialRecord> = records
        .iter()
        .filter(|r| r.experiment == ExperimentKind::Exp1)
        .cloned()
        .collect();
    let exp1 = if exp1.is_empty() {
        None
    } else {
        let mut lanes: Vec<(String, Mode)> = Vec::new();
        for r in &exp1 {
            if !lanes.contains(&(r.model.clone(), r.mode)) {
                lanes.push((r.model.clone(), r.mode));
            }
        }
        let tables = lanes
            .iter()
            .map(|(m, mode)| {
                let lane: Vec<TrialRecord> = exp1.iter().filter(|r| &r.model == m && r.mode == *mode).cloned().collect();
                accuracy_table(&lane)
            })
            .collect::<Result<Vec<_>, _>>()?;
        let tests = exp1_tests(&exp1, alpha);
        let tally = tally(tests.iter().map(|t| (t.significant_raw, t.significant)));
        Some(Exp1Report { tables, tests, tally })
    };
    let has_exp2 = records
        .iter()
        .any(|r| matches!(r.experiment, ExperimentKind::Exp2Correct | ExperimentKind::Exp2Incorrect));
    let grading = if has_exp2 {
        Some(grading_fraction_table(records, alpha)?)
    } else {
        None
    };
    let samples = salary_samples(records, header.trials);
    let salary = (!samples.is_empty()).then(|| salary_summary(&samples, alpha));
    Ok(Report {
        failures: failure_rows(records),
        header,
        exp1,
        grading,
        salary,
    })
}

fn slug(s: &str) -> String {
    s.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '.' { c } else { '_' })
        .collect()
}

fn csv_line(fields: &[String]) -> String {
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(Vec::new());
    w.write_record(fields).expect("in-memory write");
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("fields are UTF-8")
}

fn opt_dp(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.2}")).unwrap_or_default()
}

fn opt_int(v: Option<i64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn temp(t: f64) -> String {
    format!("{t}")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Format {
    Json,
    Csv,
    Markdown,
}

impl Format {
    pub const ALL: [Format; 3] = [Format::Json, Format::Csv, Format::Markdown];
}

/// Renders every output file as (relative path, contents). Pure: the same
/// report always yields the same bytes.
pub fn render(report: &Report, formats: &[Format]) -> Vec<(PathBuf, String)> {
    let digest = &report.header.manifest_digest;
    let mut files: Vec<(PathBuf, String)> = Vec::new();
    if formats.contains(&Format::Json) {
        files.push((
            PathBuf::from("report.json"),
            to_canonical_pretty(report).expect("report serializes"),
        ));
    }
    let csv = formats.contains(&Format::Csv);
    let md = formats.contains(&Format::Markdown);

    if let Some(exp1) = &report.exp1 {
        for table in &exp1.tables {
            let mode = match table.mode {
                Mode::Generative => "generative",
                Mode::Loglik => "loglik",
            };
            let stem = format!("accuracy_{}_{}", slug(&table.model), mode);
            if csv {
                let mut s = csv_line(
                    &["manifest_digest", "persona", "topic", "correct", "answered", "failures", "accuracy"]
                        .map(String::from),
                );
                for (p, row) in table.personae.iter().zip(&table.cells) {
                    for (t, cell) in table.topics.iter().zip(row) {
                        s.push_str(&csv_line(&[
                            digest.clone(),
                            p.clone(),
                            t.clone(),
                            cell.correct.to_string(),
                            cell.answered.to_string(),
                            cell.failures.to_string(),
                            opt_dp(cell.accuracy),
                        ]));
                    }
                }
                files.push((PathBuf::from(format!("tables/{stem}.csv")), s));
            }
            if md {
                let mut s = format!(
                    "Accuracy of {} ({mode}). Manifest `{digest}`.\n\n",
                    table.model
                );
                let _ = writeln!(s, "| persona | {} |", table.topics.join(" | "));
                let _ = writeln!(s, "|---|{}", "---|".repeat(table.topics.len()));
                for (p, row) in table.personae.iter().zip(&table.cells) {
                    let cells: Vec<String> = row
                        .iter()
                        .map(|c| c.accuracy.map(|a| format!("{a:.2}")).unwrap_or_else(|| "n/a".into()))
                        .collect();
                    let _ = writeln!(s, "| {p} | {} |", cells.join(" | "));
                }
                files.push((PathBuf::from(format!("tables/{stem}.md")), s));
            }
        }
        if csv {
            let mut s = csv_line(
                &[
                    "manifest_digest",
                    "model",
                    "mode",
                    "topic",
                    "group",
                    "first",
                    "second",
                    "b",
                    "c",
                    "statistic",
                    "p",
                    "p_adjusted",
                    "m",
                    "direction",
                    "significant_raw",
                    "significant",
                ]
                .map(String::from),
            );
            for t in &exp1.tests {
                s.push_str(&csv_line(&[
                    digest.clone(),
                    t.model.clone(),
                    serde_plain(&t.mode),
                    t.topic.clone(),
                    t.group.name().into(),
                    t.first.clone(),
                    t.second.clone(),
                    t.contingency.b.to_string(),
                    t.contingency.c.to_string(),
                    t.result.statistic.to_string(),
                    t.result.p.to_string(),
                    t.result.p_adjusted.to_string(),
                    t.result.correction_m.to_string(),
                    serde_plain(&t.result.direction),
                    t.significant_raw.to_string(),
                    t.significant.to_string(),
                ]));
            }
            files.push((PathBuf::from("tables/mcnemar_exp1.csv"), s));
        }
    }

    if let Some(grading) = &report.grading {
        if csv {
            let mut s = csv_line(
                &["manifest_digest", "model", "part", "persona", "yes", "parsed", "failures", "fraction", "highlighted"]
                    .map(String::from),
            );
            for r in &grading.rows {
                let highlighted = grading
                    .tests
                    .iter()
                    .any(|t| t.model == r.model && t.part == r.part && t.highlighted && (t.first == r.persona || t.second == r.persona));
                s.push_str(&csv_line(&[
                    digest.clone(),
                    r.model.clone(),
                    serde_plain(&r.part),
                    r.persona.clone(),
                    r.yes.to_string(),
                    r.parsed.to_string(),
                    r.failures.to_string(),
                    opt_dp(r.fraction),
                    highlighted.to_string(),
                ]));
            }
            files.push((PathBuf::from("figures/grading_fractions.csv"), s));
        }
        if md {
            let mut s = format!("Answer grading: share of \"Yes\". Manifest `{digest}`.\n\n");
            s.push_str("| model | part | persona | fraction | McNemar p (male vs female) |\n|---|---|---|---|---|\n");
            for r in &grading.rows {
                let p = grading
                    .tests
                    .iter()
                    .find(|t| t.model == r.model && t.part == r.part)
                    .map(|t| format!("{}{}", t.result.p, if t.highlighted { " *" } else { "" }))
                    .unwrap_or_default();
                let _ = writeln!(
                    s,
                    "| {} | {} | {} | {} | {} |",
                    r.model,
                    serde_plain(&r.part),
                    r.persona,
                    r.fraction.map(|f| format!("{f:.2}")).unwrap_or_else(|| "n/a".into()),
                    p
                );
            }
            files.push((PathBuf::from("tables/grading.md"), s));
        }
    }

    if let Some(salary) = &report.salary {
        if csv {
            let mut s = csv_line(
                &[
                    "manifest_digest",
                    "model",
                    "temperature",
                    "field",
                    "level",
                    "group",
                    "persona",
                    "mean",
                    "sd",
                    "n",
                    "star",
                ]
                .map(String::from),
            );
            for r in &salary.rows {
                s.push_str(&csv_line(&[
                    digest.clone(),
                    r.model.clone(),
                    temp(r.temperature),
                    r.field.name().into(),
                    r.level.name().into(),
                    r.group.name().into(),
                    r.persona.clone(),
                    opt_int(r.mean),
                    opt_int(r.sd),
                    r.n.to_string(),
                    r.star.to_string(),
                ]));
            }
            files.push((PathBuf::from("figures/salary_points.csv"), s));

            let mut s = csv_line(
                &[
                    "manifest_digest",
                    "model",
                    "temperature",
                    "field",
                    "level",
                    "group",
                    "first",
                    "second",
                    "u",
                    "p",
                    "p_adjusted",
                    "direction",
                    "significant",
                    "significant_adjusted",
                ]
                .map(String::from),
            );
            for t in &salary.pair_tests {
                s.push_str(&csv_line(&[
                    digest.clone(),
                    t.model.clone(),
                    temp(t.temperature),
                    t.field.name().into(),
                    t.level.name().into(),
                    t.group.name().into(),
                    t.first.clone(),
                    t.second.clone(),
                    t.result.statistic.to_string(),
                    t.result.p.to_string(),
                    t.result.p_adjusted.to_string(),
                    serde_plain(&t.result.direction),
                    t.significant.to_string(),
                    t.significant_adjusted.to_string(),
                ]));
            }
            files.push((PathBuf::from("tables/mann_whitney_pairs.csv"), s));

            let mut s = csv_line(
                &["manifest_digest", "model", "temperature", "field", "level", "group", "h", "p", "star"].map(String::from),
            );
            for g in &salary.group_tests {
                s.push_str(&csv_line(&[
                    digest.clone(),
                    g.model.clone(),
                    temp(g.temperature),
                    g.field.name().into(),
                    g.level.name().into(),
                    g.group.name().into(),
                    g.result.as_ref().map(|r| r.statistic.to_string()).unwrap_or_default(),
                    g.result.as_ref().map(|r| r.p.to_string()).unwrap_or_default(),
                    g.star.to_string(),
                ]));
            }
            files.push((PathBuf::from("tables/kruskal_wallis.csv"), s));
        }
        if md {
            let mut s = format!("Significant within-group salary pairs (Mann-Whitney). Manifest `{digest}`.\n\n");
            s.push_str("| model | temperature | significant pairs |\n|---|---|---|\n");
            let mut total = (0, 0);
            for t in &salary.tallies {
                let _ = writeln!(s, "| {} | {} | {} |", t.model, temp(t.temperature), t.display());
                total.0 += t.significant;
                total.1 += t.total;
            }
            if total.1 > 0 {
                let pct = 100.0 * total.0 as f64 / total.1 as f64;
                let _ = writeln!(s, "| Total | | {} / {} ({pct:.1}%) |", total.0, total.1);
            }
            for c in &salary.compound {
                let _ = writeln!(
                    s,
                    "\n{} at temperature {}: {} dominates {} in {} / {} cells.",
                    c.model,
                    temp(c.temperature),
                    c.first,
                    c.second,
                    c.first_dominates,
                    c.total
                );
            }
            files.push((PathBuf::from("tables/significant_pairs.md"), s));
        }
    }

    if csv {
        let mut s = csv_line(
            &[
                "manifest_digest",
                "experiment",
                "model",
                "persona",
                "mode",
                "item",
                "temperature",
                "trial_index",
                "kind",
                "reason",
                "raw",
            ]
            .map(String::from),
        );
        for f in &report.failures {
            s.push_str(&csv_line(&[
                digest.clone(),
                serde_plain(&f.experiment),
                f.model.clone(),
                f.persona.clone(),
                serde_plain(&f.mode),
                f.item.clone(),
                temp(f.temperature),
                f.trial_index.to_string(),
                f.kind.clone(),
                f.reason.clone(),
                f.raw.clone(),
            ]));
        }
        files.push((PathBuf::from("failures.csv"), s));
    }
    files
}

fn serde_plain<T: Serialize>(v: &T) -> String {
    match serde_json::to_value(v).expect("serializes") {
        serde_json::Value::String(s) => s,
        other => other.to_string(),
    }
}

/// Writes the rendered files under `dir`.
pub fn emit(report: &Report, dir: &Path, formats: &[Format]) -> Result<Vec<PathBuf>, ReportError> {
    let mut written = Vec::new();
    for (rel, contents) in render(report, formats) {
        let path = dir.join(&rel);
        let io = |e: std::io::Error| ReportError::Io {
            path: path.display().to_string(),
            message: e.to_string(),
        };
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(io)?;
        }
        fs::write(&path, contents).map_err(io)?;
        written.push(path);
    }
    Ok(written)
}
