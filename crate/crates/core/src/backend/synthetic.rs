//! Seeded synthetic responder with configurable per-persona behaviour.
//!
//! It recognises the three prompt shapes, recovers the persona from the
//! persona sentence and answers from a known law. Every draw is keyed by
//! `(profile seed, cache key)`, so the same request always gets the same reply.

use std::collections::{BTreeMap, HashMap};
use std::sync::OnceLock;

use rand_distr::{Distribution, Normal};
use regex::Regex;
use serde::{Deserialize, Serialize};

use super::{cache_key, Backend, BackendError, CacheRequest, GenerationRequest, ScoringRequest, TokenScore, TokenScores};
use crate::dataset::{Field, Level, ShuffledItem, LETTERS};
use crate::personae::{
    builtin_personae, compound_from_ids, render_persona_sentence, render_question_block, PersonaSpec, Voice,
    EXP1_ANSWER_CUE, EXP1_TASK, EXP2_ANSWER_CUE, EXP2_TASK, EXP3_SYSTEM,
};
use crate::rng::{keyed_rng, uniform_below, unit_f64};

/// A default value with per-persona overrides.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PersonaRates {
    pub default: f64,
    #[serde(default)]
    pub persona: BTreeMap<String, f64>,
}

impl PersonaRates {
    pub fn uniform(default: f64) -> Self {
        PersonaRates {
            default,
            persona: BTreeMap::new(),
        }
    }

    pub fn get(&self, persona_id: &str) -> f64 {
        self.persona.get(persona_id).copied().unwrap_or(self.default)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GradingLaw {
    /// P(Yes) when the offered answer is right.
    pub yes_if_correct: f64,
    /// P(Yes) when the offered answer is wrong.
    pub yes_if_incorrect: f64,
    /// Additive per-persona shift of P(Yes).
    #[serde(default)]
    pub persona_offset: BTreeMap<String, f64>,
}

impl Default for GradingLaw {
    fn default() -> Self {
        GradingLaw {
            yes_if_correct: 0.9,
            yes_if_incorrect: 0.2,
            persona_offset: BTreeMap::new(),
        }
    }
}

/// Salary distribution: `mean = base * field * level * (1 + gap(persona))`, `sd = sd_fraction * mean`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SalaryLaw {
    pub base_mean: f64,
    pub sd_fraction: f64,
    #[serde(default = "one")]
    pub senior_factor: f64,
    #[serde(default)]
    pub field_factor: BTreeMap<Field, f64>,
    /// Relative gap per persona id; compound personae sum the gaps of their parts
    /// unless listed themselves.
    #[serde(default)]
    pub persona_gap: BTreeMap<String, f64>,
}

fn one() -> f64 {
    1.0
}

impl Default for SalaryLaw {
    fn default() -> Self {
        SalaryLaw {
            base_mean: 100_000.0,
            sd_fraction: 0.05,
            senior_factor: 1.0,
            field_factor: BTreeMap::new(),
            persona_gap: BTreeMap::new(),
        }
    }
}

impl SalaryLaw {
    pub fn gap(&self, persona_id: &str) -> f64 {
        if let Some(g) = self.persona_gap.get(persona_id) {
            return *g;
        }
        if persona_id.contains('+') {
            return persona_id
                .split('+')
                .map(|p| self.persona_gap.get(p).copied().unwrap_or(0.0))
                .sum();
        }
        0.0
    }

    /// (mean, sd) in USD.
    pub fn law(&self, persona_id: &str, field: Field, level: Level) -> (f64, f64) {
        let level_factor = match level {
            Level::Junior => 1.0,
            Level::Senior => self.senior_factor,
        };
        let field_factor = self.field_factor.get(&field).copied().unwrap_or(1.0);
        let mean = self.base_mean * field_factor * level_factor * (1.0 + self.gap(persona_id));
        (mean, (self.sd_fraction * mean).abs())
    }
}

/// Per-token log-probabilities of the synthetic scorer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScoringLaw {
    pub token_logprob: f64,
    /// Log-probability of the answer letter the scorer prefers.
    pub preferred_logprob: f64,
    /// Log-probability of the other three letters.
    pub other_logprob: f64,
}

impl Default for ScoringLaw {
    fn default() -> Self {
        ScoringLaw {
            token_logprob: -1.0,
            preferred_logprob: -0.5,
            other_logprob: -3.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticProfile {
    #[serde(default)]
    pub seed: u64,
    /// Probability of answering a multiple-choice question correctly.
    pub accuracy: PersonaRates,
    #[serde(default)]
    pub grading: GradingLaw,
    #[serde(default)]
    pub salary: SalaryLaw,
    #[serde(default)]
    pub scoring: ScoringLaw,
    /// Share of replies wrapped in extra text, to exercise the extraction rules.
    #[serde(default)]
    pub decoration_rate: f64,
    /// Compound persona ids (e.g. `male+asian+expatriate`) the responder should recognise.
    #[serde(default)]
    pub compounds: Vec<String>,
}

impl Default for SyntheticProfile {
    fn default() -> Self {
        SyntheticProfile {
            seed: 0,
            accuracy: PersonaRates::uniform(0.7),
            grading: GradingLaw::default(),
            salary: SalaryLaw::default(),
            scoring: ScoringLaw::default(),
            decoration_rate: 0.0,
            compounds: Vec::new(),
        }
    }
}

impl SyntheticProfile {
    /// No persona effects anywhere.
    pub fn zero_bias(seed: u64) -> Self {
        SyntheticProfile {
            seed,
            ..SyntheticProfile::default()
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        let probs = std::iter::once(("accuracy.default", self.accuracy.default))
            .chain(self.accuracy.persona.values().map(|v| ("accuracy.persona", *v)))
            .chain([
                ("grading.yes_if_correct", self.grading.yes_if_correct),
                ("grading.yes_if_incorrect", self.grading.yes_if_incorrect),
                ("decoration_rate", self.decoration_rate),
            ]);
        for (name, p) in probs {
            if !(0.0..=1.0).contains(&p) {
                return Err(format!("{name} = {p} is not a probability"));
            }
        }
        if self.salary.sd_fraction < 0.0 || self.salary.base_mean < 0.0 {
            return Err("salary law needs base_mean >= 0 and sd_fraction >= 0".into());
        }
        for c in &self.compounds {
            compound_from_ids(c).map_err(|e| e.to_string())?;
        }
        Ok(())
    }
}

enum Shape {
    Choice {
        persona: String,
        correct: usize,
    },
    Grade {
        persona: String,
        correct: usize,
        selected: usize,
    },
    Salary {
        persona: String,
        field: Field,
        level: Level,
    },
}

pub struct SyntheticBackend {
    id: String,
    profile: SyntheticProfile,
    personae: Vec<(String, String, String)>,
    answer_key: HashMap<String, usize>,
}

fn salary_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        Regex::new(r"a position of (Junior|Senior) Specialist in (.+?) in Denver, Colorado").expect("valid regex")
    })
}

impl SyntheticBackend {
    pub fn new(profile: SyntheticProfile) -> Result<Self, BackendError> {
        profile.validate().map_err(BackendError::InvalidRequest)?;
        let mut specs: Vec<PersonaSpec> = builtin_personae().into_iter().filter(|p| !p.is_baseline()).collect();
        for c in &profile.compounds {
            specs.push(compound_from_ids(c).map_err(|e| BackendError::InvalidRequest(e.to_string()))?);
        }
        let personae = specs
            .into_iter()
            .map(|p| {
                let second = format!("{} ", render_persona_sentence(&p, Voice::Second));
                let first = format!("{} ", render_persona_sentence(&p, Voice::First));
                (p.id, second, first)
            })
            .collect();
        Ok(SyntheticBackend {
            id: "synthetic".into(),
            profile,
            personae,
            answer_key: HashMap::new(),
        })
    }

    /// Teaches the responder the correct answers of `items`.
    pub fn with_items<'a>(mut self, items: impl IntoIterator<Item = &'a ShuffledItem>) -> Self {
        for item in items {
            self.answer_key.insert(render_question_block(item), item.shuffled_correct);
        }
        self
    }

    pub fn profile(&self) -> &SyntheticProfile {
        &self.profile
    }

    fn persona_of(&self, text: &str) -> String {
        self.personae
            .iter()
            .filter(|(_, second, first)| text.starts_with(second.as_str()) || text.starts_with(first.as_str()))
            .max_by_key(|(_, second, _)| second.len())
            .map(|(id, _, _)| id.clone())
            .unwrap_or_else(|| "baseline".to_string())
    }

    fn correct_for(&self, block: &str) -> Result<usize, BackendError> {
        self.answer_key
            .get(block)
            .copied()
            .ok_or_else(|| BackendError::InvalidRequest("question not in the synthetic answer key".into()))
    }

    fn detect(&self, system: &str, user: &str) -> Result<Shape, BackendError> {
        if system.contains(EXP1_TASK) && !system.contains(EXP2_TASK) {
            let block = user
                .strip_suffix(&format!("\n{EXP1_ANSWER_CUE}"))
                .ok_or(BackendError::UnrecognizedPrompt)?;
            return Ok(Shape::Choice {
                persona: self.persona_of(system),
                correct: self.correct_for(block)?,
            });
        }
        if system.contains(EXP2_TASK) {
            let (block, tail) = user
                .rsplit_once(&format!("\n{EXP2_ANSWER_CUE}"))
                .ok_or(BackendError::UnrecognizedPrompt)?;
            let selected = tail
                .chars()
                .next()
                .and_then(|c| LETTERS.iter().position(|l| *l == c))
                .ok_or(BackendError::UnrecognizedPrompt)?;
            return Ok(Shape::Grade {
                persona: self.persona_of(system),
                correct: self.correct_for(block)?,
                selected,
            });
        }
        if system == EXP3_SYSTEM {
            let caps = salary_re().captures(user).ok_or(BackendError::UnrecognizedPrompt)?;
            let level: Level = caps[1].parse().map_err(|_| BackendError::UnrecognizedPrompt)?;
            let field: Field = caps[2].parse().map_err(|_| BackendError::UnrecognizedPrompt)?;
            return Ok(Shape::Salary {
                persona: self.persona_of(user),
                field,
                level,
            });
        }
        Err(BackendError::UnrecognizedPrompt)
    }

    fn decorate(&self, rng: &mut impl rand::RngCore, canonical: String, kind: u8) -> String {
        if self.profile.decoration_rate <= 0.0 || unit_f64(rng) >= self.profile.decoration_rate {
            return canonical;
        }
        match kind {
            0 => format!("Answer: {canonical}"),
            1 => format!("{canonical}, that is correct."),
            _ => {
                let v: u64 = canonical[1..].parse().unwrap_or(0);
                format!("I would suggest asking for ${},{:03}.", v / 1000, v % 1000)
            }
        }
    }
}

impl Backend for SyntheticBackend {
    fn id(&self) -> &str {
        &self.id
    }

    fn generate(&self, request: &GenerationRequest) -> Result<String, BackendError> {
        let shape = self.detect(&request.system, &request.user)?;
        let key = cache_key(&CacheRequest::Generate(request.clone()));
        let mut rng = keyed_rng("synthetic-generate", self.profile.seed, &key);
        match shape {
            Shape::Choice { persona, correct } => {
                let p = self.profile.accuracy.get(&persona);
                let pick = if unit_f64(&mut rng) < p {
                    correct
                } else {
                    let k = uniform_below(&mut rng, 3) as usize;
                    (0..4).filter(|&i| i != correct).nth(k).expect("three wrong options")
                };
                Ok(self.decorate(&mut rng, LETTERS[pick].to_string(), 0))
            }
            Shape::Grade {
                persona,
                correct,
                selected,
            } => {
                let g = &self.profile.grading;
                let base = if selected == correct {
                    g.yes_if_correct
                } else {
                    g.yes_if_incorrect
                };
                let p = (base + g.persona_offset.get(&persona).copied().unwrap_or(0.0)).clamp(0.0, 1.0);
                let verdict = if unit_f64(&mut rng) < p { "Yes" } else { "No" };
                Ok(self.decorate(&mut rng, verdict.to_string(), 1))
            }
            Shape::Salary { persona, field, level } => {
                let (mean, sd) = self.profile.salary.law(&persona, field, level);
                let draw = if sd > 0.0 {
                    Normal::new(mean, sd)
                        .map_err(|e| BackendError::InvalidRequest(e.to_string()))?
                        .sample(&mut rng)
                } else {
                    mean
                };
                let rounded = ((draw / 1000.0).round() * 1000.0).max(1000.0) as u64;
                Ok(self.decorate(&mut rng, format!("${rounded}"), 2))
            }
        }
    }

    /// Whitespace tokens at `token_logprob`. When the text is an experiment-1
    /// prompt followed by an answer letter, that letter is scored from the
    /// accuracy law: the preferred letter (correct with the persona's
    /// accuracy) gets `preferred_logprob`, the rest `other_logprob`.
    fn score_sequence(&self, model: &str, text: &str) -> Result<TokenScores, BackendError> {
        if text.trim().is_empty() {
            return Err(BackendError::InvalidRequest("empty text".into()));
        }
        let mut tokens: Vec<TokenScore> = text
            .split_whitespace()
            .map(|t| TokenScore {
                text: t.to_string(),
                logprob: self.profile.scoring.token_logprob,
                special: false,
            })
            .collect();

        let answer = text
            .rsplit_once(' ')
            .filter(|(_, letter)| letter.len() == 1)
            .and_then(|(prompt, letter)| {
                let idx = LETTERS.iter().position(|l| letter.starts_with(*l))?;
                let (system, user) = prompt.split_once("\n\n")?;
                Some((prompt, system, user, idx))
            });
        if let Some((prompt, system, user, idx)) = answer {
            if let Ok(Shape::Choice { persona, correct }) = self.detect(system, user) {
                // keyed on the prompt alone so all four candidates see the same draw
                let key = cache_key(&CacheRequest::Score(ScoringRequest {
                    model: model.to_string(),
                    text: prompt.to_string(),
                }));
                let mut rng = keyed_rng("synthetic-score", self.profile.seed, &key);
                let preferred = if unit_f64(&mut rng) < self.profile.accuracy.get(&persona) {
                    correct
                } else {
                    let k = uniform_below(&mut rng, 3) as usize;
                    (0..4).filter(|&i| i != correct).nth(k).expect("three wrong options")
                };
                let last = tokens.last_mut().expect("nonempty text has a token");
                last.logprob = if idx == preferred {
                    self.profile.scoring.preferred_logprob
                } else {
                    self.profile.scoring.other_logprob
                };
            }
        }
        Ok(TokenScores { tokens })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{shuffle_options, McqItem};
    use crate::parsers::{parse_choice, parse_salary, parse_yes_no};
    use crate::personae::{build_exp1_prompt, build_exp2_prompt, build_exp3_prompt, persona_by_id};

    fn item(i: usize) -> ShuffledItem {
        shuffle_options(
            &McqItem {
                id: format!("marketing#{i}"),
                topic: "marketing".into(),
                question: format!("Question {i}?"),
                options: ["a".into(), "b".into(), "c".into(), "d".into()],
                correct: i % 4,
            },
            0,
        )
    }

    fn request(p: crate::personae::PromptPair, trial_index: u32) -> GenerationRequest {
        GenerationRequest {
            model: "synthetic-model".into(),
            system: p.system,
            user: p.user,
            temperature: 0.1,
            max_tokens: 8,
            trial_index,
        }
    }

    #[test]
    fn perfect_accuracy_answers_correctly() {
        let items: Vec<ShuffledItem> = (0..20).map(item).collect();
        let mut profile = SyntheticProfile::zero_bias(1);
        profile.accuracy = PersonaRates::uniform(1.0);
        let b = SyntheticBackend::new(profile).unwrap().with_items(&items);
        for it in &items {
            let req = request(build_exp1_prompt(&persona_by_id("female").unwrap(), "marketing", it), 0);
            let reply = b.generate(&req).unwrap();
            assert_eq!(parse_choice(&reply).unwrap().value, it.shuffled_correct);
            assert_eq!(b.generate(&req).unwrap(), reply);
        }
    }

    #[test]
    fn zero_accuracy_never_correct() {
        let items: Vec<ShuffledItem> = (0..200).map(item).collect();
        let mut profile = SyntheticProfile::zero_bias(2);
        profile.accuracy = PersonaRates::uniform(0.0);
        let b = SyntheticBackend::new(profile).unwrap().with_items(&items);
        for it in &items {
            let req = request(build_exp1_prompt(&PersonaSpec::baseline(), "marketing", it), 0);
            assert_ne!(parse_choice(&b.generate(&req).unwrap()).unwrap().value, it.shuffled_correct);
        }
    }

    #[test]
    fn degenerate_salary_law() {
        let mut profile = SyntheticProfile::zero_bias(3);
        profile.salary.sd_fraction = 0.0;
        let b = SyntheticBackend::new(profile).unwrap();
        let req = GenerationRequest {
            max_tokens: 16,
            temperature: 0.6,
            ..request(build_exp3_prompt(&PersonaSpec::baseline(), Level::Senior, Field::Medicine), 7)
        };
        assert_eq!(b.generate(&req).unwrap(), "$100000");
    }

    #[test]
    fn persona_gap_shifts_mean() {
        let mut profile = SyntheticProfile::zero_bias(3);
        profile.salary.sd_fraction = 0.0;
        profile.salary.persona_gap.insert("female".into(), -0.1);
        profile.salary.persona_gap.insert("hispanic".into(), -0.05);
        profile.compounds.push("female+hispanic+refugee".into());
        let b = SyntheticBackend::new(profile).unwrap();
        let ask = |id: &str| {
            let p = match id {
                "compound" => compound_from_ids("female+hispanic+refugee").unwrap(),
                _ => persona_by_id(id).unwrap(),
            };
            let r = request(build_exp3_prompt(&p, Level::Junior, Field::Law), 0);
            parse_salary(&b.generate(&r).unwrap()).unwrap().value
        };
        assert_eq!(ask("female"), 90_000);
        assert_eq!(ask("male"), 100_000);
        assert_eq!(ask("compound"), 85_000);
    }

    #[test]
    fn agreeing_grader_says_yes() {
        let items: Vec<ShuffledItem> = (0..30).map(item).collect();
        let mut profile = SyntheticProfile::zero_bias(4);
        profile.grading.yes_if_correct = 1.0;
        profile.grading.yes_if_incorrect = 1.0;
        let b = SyntheticBackend::new(profile).unwrap().with_items(&items);
        for it in &items {
            let p = build_exp2_prompt(&persona_by_id("male").unwrap(), "marketing", it, (it.shuffled_correct + 1) % 4);
            assert!(parse_yes_no(&b.generate(&request(p, 0)).unwrap()).unwrap().value);
        }
    }

    #[test]
    fn unrecognized_prompt() {
        let b = SyntheticBackend::new(SyntheticProfile::default()).unwrap();
        let req = GenerationRequest {
            model: "m".into(),
            system: "Tell me a joke.".into(),
            user: "Please.".into(),
            temperature: 0.1,
            max_tokens: 8,
            trial_index: 0,
        };
        assert!(matches!(b.generate(&req), Err(BackendError::UnrecognizedPrompt)));
    }

    #[test]
    fn plain_scoring() {
        let b = SyntheticBackend::new(SyntheticProfile::default()).unwrap();
        let s = b.score_sequence("m", "one two three four five").unwrap();
        assert_eq!(s.tokens.len(), 5);
        assert!(s.tokens.iter().all(|t| t.logprob == -1.0 && !t.special));
        assert!(b.score_sequence("m", "").is_err());
    }

    #[test]
    fn invalid_profile_rejected() {
        let mut p = SyntheticProfile::default();
        p.accuracy.default = 1.5;
        assert!(SyntheticBackend::new(p).is_err());
    }
}
