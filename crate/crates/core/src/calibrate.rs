//! Monte-Carlo calibration of the salary tests on the synthetic backend.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::backend::{BackendError, SyntheticBackend, SyntheticProfile};
use crate::dataset::{Field, Level};
use crate::personae::{persona_by_id, personae_for_experiment, Experiment, PersonaSpec};
use crate::report::salary_summary;
use crate::runner::{run_experiment3, ModelHandle, RunConfig, DEFAULT_TRIALS, SALARY_TEMPERATURE};
use crate::stats::{mann_whitney, DEFAULT_ALPHA};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationSettings {
    pub seeds: u64,
    pub first_seed: u64,
    pub trials: u32,
    pub alpha: f64,
    pub fields: Vec<Field>,
    pub levels: Vec<Level>,
    pub parallelism: usize,
}

impl Default for CalibrationSettings {
    fn default() -> Self {
        CalibrationSettings {
            seeds: 200,
            first_seed: 0,
            trials: DEFAULT_TRIALS,
            alpha: DEFAULT_ALPHA,
            fields: Field::ALL.to_vec(),
            levels: Level::ALL.to_vec(),
            parallelism: 1,
        }
    }
}

/// Empirical rejection rates under the configured profile.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FalsePositiveReport {
    pub seeds: u64,
    pub pairs_tested: usize,
    pub pairs_flagged: usize,
    pub pair_rate: f64,
    pub groups_tested: usize,
    pub groups_starred: usize,
    pub star_rate: f64,
}

/// Runs the salary experiment once per seed and counts raw rejections of
/// within-group Mann-Whitney pairs and Kruskal-Wallis stars.
pub fn false_positive_rates(
    profile: &SyntheticProfile,
    settings: &CalibrationSettings,
) -> Result<FalsePositiveReport, BackendError> {
    let personae = personae_for_experiment(Experiment::Three);
    let config = RunConfig {
        parallelism: settings.parallelism,
        ..RunConfig::default()
    };
    let mut report = FalsePositiveReport {
        seeds: settings.seeds,
        pairs_tested: 0,
        pairs_flagged: 0,
        pair_rate: 0.0,
        groups_tested: 0,
        groups_starred: 0,
        star_rate: 0.0,
    };
    for seed in settings.first_seed..settings.first_seed + settings.seeds {
        let backend = SyntheticBackend::new(SyntheticProfile {
            seed,
            ..profile.clone()
        })?;
        let models = [ModelHandle::new("synthetic", Arc::new(backend))];
        let run = run_experiment3(
            &models,
            &personae,
            &settings.fields,
            &settings.levels,
            settings.trials,
            SALARY_TEMPERATURE,
            &config,
        );
        let summary = salary_summary(&run.samples, settings.alpha);
        report.pairs_tested += summary.pair_tests.len();
        report.pairs_flagged += summary.pair_tests.iter().filter(|t| t.significant).count();
        report.groups_tested += summary.group_tests.len();
        report.groups_starred += summary.group_tests.iter().filter(|g| g.star).count();
    }
    report.pair_rate = report.pairs_flagged as f64 / report.pairs_tested.max(1) as f64;
    report.star_rate = report.groups_starred as f64 / report.groups_tested.max(1) as f64;
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PowerReport {
    pub gap: f64,
    pub sd_fraction: f64,
    pub seeds: u64,
    pub detected: u64,
    pub rate: f64,
}

/// Detection rate of a `gap` between the male and female personae in one
/// (field, level) cell, tested with two-sided Mann-Whitney at `alpha`.
pub fn detection_power(gap: f64, sd_fraction: f64, settings: &CalibrationSettings) -> Result<PowerReport, BackendError> {
    let pair: Vec<PersonaSpec> = ["male", "female"]
        .iter()
        .map(|id| persona_by_id(id).expect("built-in persona"))
        .collect();
    let field = settings.fields.first().copied().unwrap_or(Field::ALL[0]);
    let level = settings.levels.first().copied().unwrap_or(Level::Junior);
    let config = RunConfig {
        parallelism: settings.parallelism,
        ..RunConfig::default()
    };
    let mut detected = 0;
    for seed in settings.first_seed..settings.first_seed + settings.seeds {
        let mut profile = SyntheticProfile::zero_bias(seed);
        profile.salary.sd_fraction = sd_fraction;
        profile.salary.persona_gap.insert("male".into(), gap);
        let models = [ModelHandle::new("synthetic", Arc::new(SyntheticBackend::new(profile)?))];
        let run = run_experiment3(&models, &pair, &[field], &[level], settings.trials, SALARY_TEMPERATURE, &config);
        let [male, female] = [&run.samples[0], &run.samples[1]];
        let result = mann_whitney(&male.values_f64(), &female.values_f64()).expect("nonempty samples");
        if result.significant(settings.alpha) {
            detected += 1;
        }
    }
    Ok(PowerReport {
        gap,
        sd_fraction,
        seeds: settings.seeds,
        detected,
        rate: detected as f64 / settings.seeds.max(1) as f64,
    })
}
