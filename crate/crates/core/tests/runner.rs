use std::sync::Arc;

use persona_audit::backend::{Backend, BackendError, GenerationRequest, SyntheticBackend, SyntheticProfile, TokenScores};
use persona_audit::dataset::{shuffle_options, Field, Level, McqItem, ShuffledItem};
use persona_audit::personae::{personae_for_experiment, Experiment};
use persona_audit::runner::{
    run_experiment1, run_experiment2, run_experiment3, ModelHandle, Mode, Parsed, Part, RunConfig,
};

fn items(n: usize) -> Vec<ShuffledItem> {
    (0..n)
        .map(|i| {
            let item = McqItem {
                id: format!("q{i:03}"),
                topic: if i % 2 == 0 { "marketing" } else { "philosophy" }.into(),
                question: format!("Question number {i}?"),
                options: [0, 1, 2, 3].map(|k| format!("option {k} of {i}")),
                correct: i % 4,
            };
            shuffle_options(&item, 11)
        })
        .collect()
}

fn synthetic(items: &[ShuffledItem], seed: u64) -> ModelHandle {
    let backend = SyntheticBackend::new(SyntheticProfile::zero_bias(seed)).unwrap().with_items(items);
    ModelHandle::new(format!("syn-{seed}"), Arc::new(backend))
}

#[test]
fn record_counts_follow_the_cross_product() {
    let items = items(12);
    let models = [synthetic(&items, 1), synthetic(&items, 2)];
    let config = RunConfig {
        parallelism: 4,
        ..RunConfig::default()
    };
    let p1 = personae_for_experiment(Experiment::One);
    let out = run_experiment1(&models, &p1, &items, Mode::Generative, &config);
    assert_eq!(out.records.len(), 2 * p1.len() * 12);
    let out = run_experiment1(&models, &p1, &items, Mode::Loglik, &config);
    assert_eq!(out.records.len(), 2 * p1.len() * 12);
    assert!(out.records.iter().all(|r| matches!(r.parsed, Parsed::Choice { .. })));

    let p2 = personae_for_experiment(Experiment::Two);
    for part in [Part::Correct, Part::Incorrect] {
        let out = run_experiment2(&models, &p2, &items, part, &config);
        assert_eq!(out.records.len(), 2 * p2.len() * 12);
        for r in &out.records {
            let offered_correct = r.selected == r.correct;
            assert_eq!(offered_correct, part == Part::Correct);
        }
    }

    let p3 = personae_for_experiment(Experiment::Three);
    let run = run_experiment3(&models, &p3, &Field::ALL, &Level::ALL, 7, 0.6, &config);
    assert_eq!(run.output.records.len(), 2 * p3.len() * Field::ALL.len() * 2 * 7);
    assert_eq!(run.samples.len(), 2 * p3.len() * Field::ALL.len() * 2);
    assert!(run.samples.iter().all(|s| s.values.len() == 7 && s.is_valid()));
}

#[test]
fn repeats_multiply_trials() {
    let items = items(4);
    let models = [synthetic(&items, 1)];
    let config = RunConfig {
        repeats: 3,
        ..RunConfig::default()
    };
    let p = personae_for_experiment(Experiment::One);
    let out = run_experiment1(&models, &p, &items, Mode::Generative, &config);
    assert_eq!(out.records.len(), p.len() * 4 * 3);
}

#[test]
fn output_is_independent_of_parallelism() {
    let items = items(10);
    let models = [synthetic(&items, 5)];
    let p = personae_for_experiment(Experiment::One);
    let serial = run_experiment1(&models, &p, &items, Mode::Generative, &RunConfig::default());
    let parallel = run_experiment1(
        &models,
        &p,
        &items,
        Mode::Generative,
        &RunConfig {
            parallelism: 8,
            ..RunConfig::default()
        },
    );
    assert_eq!(serial, parallel);
}

struct Down;

impl Backend for Down {
    fn id(&self) -> &str {
        "down"
    }
    fn generate(&self, _: &GenerationRequest) -> Result<String, BackendError> {
        Err(BackendError::Unavailable {
            attempts: 1,
            message: "connection refused".into(),
        })
    }
    fn score_sequence(&self, _: &str, _: &str) -> Result<TokenScores, BackendError> {
        Err(BackendError::NoScoring("down".into()))
    }
}

#[test]
fn failing_lane_aborts_after_budget_and_keeps_partial_records() {
    let items = items(10);
    let models = [ModelHandle::new("down", Arc::new(Down)), synthetic(&items, 3)];
    let config = RunConfig {
        failure_budget: 5,
        ..RunConfig::default()
    };
    let p = personae_for_experiment(Experiment::One);
    let out = run_experiment1(&models, &p, &items, Mode::Generative, &config);
    assert!(out.any_aborted());
    let down = &out.lanes[0];
    assert!(down.aborted);
    assert_eq!(down.completed, 5);
    assert!(!out.lanes[1].aborted);
    assert_eq!(out.lanes[1].completed, p.len() * 10);
    assert!(out
        .records
        .iter()
        .filter(|r| r.model == "down")
        .all(|r| matches!(r.parsed, Parsed::BackendFailure { .. })));
}
