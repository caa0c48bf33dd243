//! Multiple-choice items: JSONL loading, keyed option shuffling, per-topic
//! sampling and the field-to-topic mapping used by the salary experiment.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io::BufRead;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::{fisher_yates, keyed_rng, sha256_hex};

/// The 18 evaluated topics, in reporting order.
pub const TOPICS: [&str; 18] = [
    "college_medicine",
    "electrical_engineering",
    "formal_logic",
    "high_school_biology",
    "high_school_chemistry",
    "high_school_computer_science",
    "high_school_geography",
    "high_school_mathematics",
    "high_school_physics",
    "high_school_psychology",
    "high_school_world_history",
    "jurisprudence",
    "logical_fallacies",
    "management",
    "marketing",
    "moral_disputes",
    "moral_scenarios",
    "philosophy",
];

pub const DEFAULT_PER_TOPIC: usize = 100;

pub const LETTERS: [char; 4] = ['A', 'B', 'C', 'D'];

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("cannot read {path}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: malformed item: {message}")]
    Malformed { line: usize, message: String },
    #[error("line {line}: schema violation: {message}")]
    Schema { line: usize, message: String },
    #[error("duplicate item id {0:?}")]
    DuplicateId(String),
    #[error("topic {topic:?} has {available} items, {needed} required")]
    InsufficientItems {
        topic: String,
        available: usize,
        needed: usize,
    },
    #[error("unknown employment field {0:?}")]
    UnknownField(String),
    #[error("unknown level {0:?}")]
    UnknownLevel(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct McqItem {
    pub id: String,
    pub topic: String,
    pub question: String,
    pub options: [String; 4],
    pub correct: usize,
}

/// An item with its options permuted: `shuffled_options[i] == base.options[perm[i]]`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShuffledItem {
    pub base: McqItem,
    pub perm: [usize; 4],
    pub shuffled_options: [String; 4],
    pub shuffled_correct: usize,
}

impl ShuffledItem {
    pub fn id(&self) -> &str {
        &self.base.id
    }

    pub fn topic(&self) -> &str {
        &self.base.topic
    }

    pub fn correct_letter(&self) -> char {
        LETTERS[self.shuffled_correct]
    }
}

#[derive(Deserialize)]
struct RawItem {
    id: Option<String>,
    topic: String,
    question: String,
    options: Vec<String>,
    answer: serde_json::Value,
}

fn parse_answer(value: &serde_json::Value) -> Option<usize> {
    match value {
        serde_json::Value::String(s) => {
            let s = s.trim();
            let mut chars = s.chars();
            match (chars.next(), chars.next()) {
                (Some(c), None) => LETTERS.iter().position(|l| l.eq_ignore_ascii_case(&c)),
                _ => None,
            }
        }
        serde_json::Value::Number(n) => n.as_u64().filter(|&i| i < 4).map(|i| i as usize),
        _ => None,
    }
}

/// Stable digest of an item's content, used when the source omits an id.
pub fn content_id(topic: &str, question: &str, options: &[String]) -> String {
    let mut buf = String::new();
    buf.push_str(topic);
    buf.push('\0');
    buf.push_str(question);
    for o in options {
        buf.push('\0');
        buf.push_str(o);
    }
    sha256_hex(buf.as_bytes())[..16].to_string()
}

fn parse_line(line_no: usize, line: &str) -> Result<McqItem, DatasetError> {
    let raw: RawItem = serde_json::from_str(line).map_err(|e| DatasetError::Malformed {
        line: line_no,
        message: e.to_string(),
    })?;
    let schema = |message: String| DatasetError::Schema {
        line: line_no,
        message,
    };
    let options: [String; 4] = raw
        .options
        .clone()
        .try_into()
        .map_err(|v: Vec<String>| schema(format!("expected 4 options, found {}", v.len())))?;
    let correct = parse_answer(&raw.answer)
        .ok_or_else(|| schema(format!("answer {} is not A-D or 0-3", raw.answer)))?;
    if raw.topic.trim().is_empty() {
        return Err(schema("empty topic".into()));
    }
    let id = match raw.id {
        Some(id) if !id.is_empty() => id,
        _ => content_id(&raw.topic, &raw.question, &raw.options),
    };
    Ok(McqItem {
        id,
        topic: raw.topic,
        question: raw.question,
        options,
        correct,
    })
}

/// Reads one JSON item per line; blank lines are skipped.
pub fn read_items<R: BufRead>(reader: R) -> Result<Vec<McqItem>, DatasetError> {
    let mut items = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| DatasetError::Malformed {
            line: idx + 1,
            message: e.to_string(),
        })?;
        if line.trim().is_empty() {
            continue;
        }
        items.push(parse_line(idx + 1, &line)?);
    }
    Ok(items)
}

pub fn load_items(path: &Path) -> Result<Vec<McqItem>, DatasetError> {
    let file = std::fs::File::open(path).map_err(|source| DatasetError::Io {
        path: path.display().to_string(),
        source,
    })?;
    read_items(std::io::BufReader::new(file))
}

/// Permutes the options with a generator keyed by `(seed, item.id)`, so the
/// order is the same in every experiment and on every platform.
pub fn shuffle_options(item: &McqItem, seed: u64) -> ShuffledItem {
    let mut perm = [0usize, 1, 2, 3];
    let mut rng = keyed_rng("shuffle-options", seed, &item.id);
    fisher_yates(&mut rng, &mut perm);
    let shuffled_options = perm.map(|i| item.options[i].clone());
    let shuffled_correct = perm
        .iter()
        .position(|&i| i == item.correct)
        .expect("permutation covers every index");
    ShuffledItem {
        base: item.clone(),
        perm,
        shuffled_options,
        shuffled_correct,
    }
}

/// Samples `n` items per topic without replacement. Items are sorted by id
/// before the seeded draw so the selection does not depend on file order.
/// Output is grouped by topic in the order given, sorted by id within a topic.
pub fn sample_topics(
    items: &[McqItem],
    topics: &[&str],
    n: usize,
    seed: u64,
) -> Result<Vec<McqItem>, DatasetError> {
    let mut by_topic: BTreeMap<&str, Vec<&McqItem>> = BTreeMap::new();
    let mut seen = BTreeSet::new();
    for item in items {
        if !seen.insert(item.id.as_str()) {
            return Err(DatasetError::DuplicateId(item.id.clone()));
        }
        by_topic.entry(item.topic.as_str()).or_default().push(item);
    }
    let mut out = Vec::with_capacity(topics.len() * n);
    for &topic in topics {
        let mut pool = by_topic.remove(topic).unwrap_or_default();
        if pool.len() < n {
            return Err(DatasetError::InsufficientItems {
                topic: topic.to_string(),
                available: pool.len(),
                needed: n,
            });
        }
        pool.sort_by(|a, b| a.id.cmp(&b.id));
        let mut rng = keyed_rng("sample-per-topic", seed, topic);
        fisher_yates(&mut rng, &mut pool);
        let mut chosen: Vec<McqItem> = pool.into_iter().take(n).cloned().collect();
        chosen.sort_by(|a, b| a.id.cmp(&b.id));
        out.extend(chosen);
    }
    Ok(out)
}

/// [`sample_topics`] over the built-in topic list.
pub fn sample_per_topic(items: &[McqItem], n: usize, seed: u64) -> Result<Vec<McqItem>, DatasetError> {
    sample_topics(items, &TOPICS, n, seed)
}

pub fn humanize_topic(slug: &str) -> String {
    slug.replace('_', " ")
}

/// Employment fields of the salary experiment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Field {
    #[serde(rename = "Business Administration")]
    BusinessAdministration,
    Engineering,
    Law,
    Medicine,
    #[serde(rename = "Social Sciences")]
    SocialSciences,
}

impl Field {
    pub const ALL: [Field; 5] = [
        Field::BusinessAdministration,
        Field::Engineering,
        Field::Law,
        Field::Medicine,
        Field::SocialSciences,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Field::BusinessAdministration => "Business Administration",
            Field::Engineering => "Engineering",
            Field::Law => "Law",
            Field::Medicine => "Medicine",
            Field::SocialSciences => "Social Sciences",
        }
    }

    pub fn topics(self) -> &'static [&'static str] {
        match self {
            Field::BusinessAdministration => &["management", "marketing"],
            Field::Engineering => &[
                "electrical_engineering",
                "high_school_mathematics",
                "high_school_physics",
                "high_school_computer_science",
            ],
            Field::Law => &[
                "jurisprudence",
                "formal_logic",
                "logical_fallacies",
                "moral_disputes",
            ],
            Field::Medicine => &[
                "college_medicine",
                "high_school_biology",
                "high_school_chemistry",
                "high_school_psychology",
            ],
            Field::SocialSciences => &[
                "high_school_world_history",
                "high_school_geography",
                "philosophy",
                "moral_scenarios",
            ],
        }
    }
}

impl fmt::Display for Field {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Field {
    type Err = DatasetError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Field::ALL
            .into_iter()
            .find(|f| f.name() == s)
            .ok_or_else(|| DatasetError::UnknownField(s.to_string()))
    }
}

pub fn topics_for_field(field: &str) -> Result<&'static [&'static str], DatasetError> {
    Ok(field.parse::<Field>()?.topics())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Level {
    Junior,
    Senior,
}

impl Level {
    pub const ALL: [Level; 2] = [Level::Junior, Level::Senior];

    pub fn name(self) -> &'static str {
        match self {
            Level::Junior => "Junior",
            Level::Senior => "Senior",
        }
    }
}

impl fmt::Display for Level {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Level {
    type Err = DatasetError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Level::ALL
            .into_iter()
            .find(|l| l.name() == s)
            .ok_or_else(|| DatasetError::UnknownLevel(s.to_string()))
    }
}

/// Digest of a sampled item set, embedded in manifests and reports.
pub fn items_digest(items: &[McqItem]) -> String {
    let bytes = serde_json::to_vec(items).expect("items serialize");
    sha256_hex(&bytes)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Seeds {
    pub shuffle: u64,
    pub sample: u64,
    pub wrong_answer: u64,
    pub synthetic: u64,
}

/// What `prepare` selected, so later phases and reports can prove which items they saw.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub seeds: Seeds,
    pub n_per_topic: usize,
    pub topics: Vec<String>,
    pub per_topic_counts: BTreeMap<String, usize>,
    pub item_ids: Vec<String>,
    pub digest: String,
}

impl Manifest {
    pub fn new(seeds: Seeds, n_per_topic: usize, topics: &[&str], sampled: &[McqItem]) -> Self {
        let mut per_topic_counts = BTreeMap::new();
        for item in sampled {
            *per_topic_counts.entry(item.topic.clone()).or_insert(0) += 1;
        }
        Manifest {
            seeds,
            n_per_topic,
            topics: topics.iter().map(|t| t.to_string()).collect(),
            per_topic_counts,
            item_ids: sampled.iter().map(|i| i.id.clone()).collect(),
            digest: items_digest(sampled),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn item(id: &str, topic: &str, correct: usize) -> McqItem {
        McqItem {
            id: id.into(),
            topic: topic.into(),
            question: format!("question {id}"),
            options: ["w".into(), "x".into(), "y".into(), "z".into()],
            correct,
        }
    }

    #[test]
    fn letter_answers_map_to_indices() {
        let line = r#"{"topic":"marketing","question":"Q","options":["w","x","y","z"],"answer":"B"}"#;
        let items = read_items(line.as_bytes()).unwrap();
        assert_eq!(items[0].correct, 1);
        assert_eq!(items[0].id.len(), 16);
        let numeric = r#"{"id":"m#1","topic":"marketing","question":"Q","options":["w","x","y","z"],"answer":3}"#;
        assert_eq!(read_items(numeric.as_bytes()).unwrap()[0].correct, 3);
    }

    #[test]
    fn empty_input_is_empty() {
        assert!(read_items("".as_bytes()).unwrap().is_empty());
        assert!(read_items("\n  \n".as_bytes()).unwrap().is_empty());
    }

    #[test]
    fn schema_and_syntax_errors_name_the_line() {
        let three = "\n{\"topic\":\"t\",\"question\":\"Q\",\"options\":[\"a\",\"b\",\"c\"],\"answer\":\"A\"}";
        match read_items(three.as_bytes()) {
            Err(DatasetError::Schema { line, .. }) => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
        match read_items("{not json".as_bytes()) {
            Err(DatasetError::Malformed { line, .. }) => assert_eq!(line, 1),
            other => panic!("unexpected {other:?}"),
        }
        let bad_answer = r#"{"topic":"t","question":"Q","options":["a","b","c","d"],"answer":"E"}"#;
        assert!(matches!(
            read_items(bad_answer.as_bytes()),
            Err(DatasetError::Schema { .. })
        ));
    }

    #[test]
    fn shuffle_is_deterministic() {
        let it = item("t#1", "marketing", 2);
        let a = shuffle_options(&it, 7);
        let b = shuffle_options(&it, 7);
        assert_eq!(a.perm, b.perm);
        assert_eq!(a.shuffled_options[a.shuffled_correct], it.options[it.correct]);
    }

    #[test]
    fn identity_permutation_keeps_answer() {
        // find a seed that happens to give the identity and check the mapping
        let it = item("t#1", "marketing", 2);
        let found = (0..2000u64)
            .map(|s| shuffle_options(&it, s))
            .find(|s| s.perm == [0, 1, 2, 3])
            .expect("identity occurs within 2000 seeds");
        assert_eq!(found.shuffled_correct, it.correct);
    }

    #[test]
    fn ids_change_permutations() {
        let perms: BTreeSet<[usize; 4]> = (0..100)
            .map(|i| shuffle_options(&item(&format!("q{i}"), "t", 0), 0).perm)
            .collect();
        assert!(perms.len() > 1);
    }

    #[test]
    fn sampling_exact_population_and_shortfall() {
        let items: Vec<McqItem> = (0..100).map(|i| item(&format!("m{i:03}"), "marketing", 0)).collect();
        let got = sample_topics(&items, &["marketing"], 100, 3).unwrap();
        assert_eq!(got.len(), 100);
        match sample_topics(&items[..99], &["marketing"], 100, 3) {
            Err(DatasetError::InsufficientItems { topic, available, .. }) => {
                assert_eq!(topic, "marketing");
                assert_eq!(available, 99);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn sampling_ignores_input_order() {
        let mut items: Vec<McqItem> = (0..40).map(|i| item(&format!("p{i:02}"), "philosophy", 0)).collect();
        let a = sample_topics(&items, &["philosophy"], 10, 11).unwrap();
        items.reverse();
        let b = sample_topics(&items, &["philosophy"], 10, 11).unwrap();
        assert_eq!(a, b);
        let c = sample_topics(&items, &["philosophy"], 10, 12).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn duplicate_ids_rejected() {
        let items = vec![item("a", "t", 0), item("a", "t", 1)];
        assert!(matches!(
            sample_topics(&items, &["t"], 1, 0),
            Err(DatasetError::DuplicateId(_))
        ));
    }

    #[test]
    fn field_mapping() {
        assert_eq!(
            topics_for_field("Business Administration").unwrap(),
            &["management", "marketing"]
        );
        assert_eq!(
            topics_for_field("Law").unwrap(),
            &["jurisprudence", "formal_logic", "logical_fallacies", "moral_disputes"]
        );
        assert!(matches!(
            topics_for_field("Astrology"),
            Err(DatasetError::UnknownField(_))
        ));
        // every field topic is an evaluated topic and together they cover all 18
        let covered: BTreeSet<&str> = Field::ALL.iter().flat_map(|f| f.topics().iter().copied()).collect();
        assert_eq!(covered, TOPICS.iter().copied().collect());
    }

    #[test]
    fn humanize() {
        assert_eq!(humanize_topic("college_medicine"), "college medicine");
        assert_eq!(humanize_topic("philosophy"), "philosophy");
        assert_eq!(humanize_topic("high_school_world_history"), "high school world history");
    }

    prop_compose! {
        fn any_item()(id in "[a-z0-9#]{1,12}", opts in prop::array::uniform4("[a-z]{0,6}"), correct in 0usize..4) -> McqItem {
            McqItem { id, topic: "t".into(), question: "q".into(), options: opts, correct }
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(10_000))]
        #[test]
        fn shuffled_item_invariants(it in any_item(), seed in any::<u64>()) {
            let s = shuffle_options(&it, seed);
            for i in 0..4 {
                prop_assert_eq!(&s.shuffled_options[i], &it.options[s.perm[i]]);
            }
            prop_assert_eq!(s.perm[s.shuffled_correct], it.correct);
            let mut a = s.shuffled_options.to_vec();
            let mut b = it.options.to_vec();
            a.sort();
            b.sort();
            prop_assert_eq!(a, b);
            prop_assert_eq!(shuffle_options(&it, seed), s);
        }
    }
}
