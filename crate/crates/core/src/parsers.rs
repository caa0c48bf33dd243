//! Extraction of the constrained answers (letter, Yes/No, dollar amount) from
//! raw model text. Nothing is guessed: anything ambiguous is a parse failure
//! and goes to the review export.

use std::collections::BTreeSet;
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Confidence {
    /// The whole trimmed response matched the canonical form.
    Exact,
    /// A fallback rule found the answer inside extra text.
    Extracted,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParseOutcome<T> {
    pub value: T,
    pub confidence: Confidence,
    pub raw: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Error, Serialize, Deserialize)]
#[error("cannot parse response: {reason}")]
pub struct ParseFailure {
    pub reason: String,
    pub raw: String,
}

fn failure<T>(raw: &str, reason: &str) -> Result<T, ParseFailure> {
    Err(ParseFailure {
        reason: reason.to_string(),
        raw: raw.to_string(),
    })
}

fn outcome<T>(value: T, confidence: Confidence, raw: &str) -> Result<ParseOutcome<T>, ParseFailure> {
    Ok(ParseOutcome {
        value,
        confidence,
        raw: raw.to_string(),
    })
}

macro_rules! regex {
    ($re:literal) => {{
        static RE: OnceLock<Regex> = OnceLock::new();
        RE.get_or_init(|| Regex::new($re).expect("valid regex"))
    }};
}

fn letter_index(c: char) -> usize {
    (c.to_ascii_uppercase() as u8 - b'A') as usize
}

fn single_candidate(found: BTreeSet<usize>) -> Option<Result<usize, ()>> {
    match found.len() {
        0 => None,
        1 => Some(Ok(*found.iter().next().expect("one element"))),
        _ => Some(Err(())),
    }
}

/// Parses an answer letter A-D into an option index.
pub fn parse_choice(text: &str) -> Result<ParseOutcome<usize>, ParseFailure> {
    let trimmed = text.trim();
    if let Some(c) = regex!(r"^(?i)([a-d])\.?$").captures(trimmed) {
        let letter = c[1].chars().next().expect("one letter");
        return outcome(letter_index(letter), Confidence::Exact, text);
    }

    let rules: [&dyn Fn(&str) -> BTreeSet<usize>; 3] = [
        // "Answer: X" at the start
        &|t: &str| {
            regex!(r"^(?i)(?:the\s+)?(?:correct\s+)?answer(?:\s+is)?\s*[:\-]?\s*\(?([a-d])\b")
                .captures(t)
                .map(|c| letter_index(c[1].chars().next().expect("one letter")))
                .into_iter()
                .collect()
        },
        // "B)" / "B." / "(B)"
        &|t: &str| {
            regex!(r"(?:^|[^A-Za-z0-9])\(?([A-D])[).](?:\s|$)")
                .captures_iter(t)
                .map(|c| letter_index(c[1].chars().next().expect("one letter")))
                .collect()
        },
        // a lone capital letter token on the first line
        &|t: &str| {
            let first = t.lines().next().unwrap_or_default();
            regex!(r"\b([A-D])\b")
                .captures_iter(first)
                .map(|c| letter_index(c[1].chars().next().expect("one letter")))
                .collect()
        },
    ];
    for rule in rules {
        match single_candidate(rule(trimmed)) {
            Some(Ok(idx)) => return outcome(idx, Confidence::Extracted, text),
            Some(Err(())) => return failure(text, "several answer letters"),
            None => continue,
        }
    }
    failure(text, "no answer letter")
}

/// Parses a Yes/No verdict.
pub fn parse_yes_no(text: &str) -> Result<ParseOutcome<bool>, ParseFailure> {
    let trimmed = text.trim();
    if let Some(c) = regex!(r"^(?i)(yes|no)\.?$").captures(trimmed) {
        return outcome(c[1].eq_ignore_ascii_case("yes"), Confidence::Exact, text);
    }
    let sentence = regex!(r"[.!?\n]")
        .split(trimmed)
        .next()
        .unwrap_or_default()
        .to_ascii_lowercase();
    let words: Vec<&str> = regex!(r"[a-z]+").find_iter(&sentence).map(|m| m.as_str()).collect();
    let has_yes = words.contains(&"yes");
    let has_no = words.contains(&"no");
    match words.first().copied() {
        Some("yes" | "no") if has_yes && has_no => failure(text, "both yes and no"),
        Some("yes") => outcome(true, Confidence::Extracted, text),
        Some("no") => outcome(false, Confidence::Extracted, text),
        _ => failure(text, "no yes/no verdict"),
    }
}

/// Smallest amount accepted; anything lower is taken as a units error.
pub const MIN_SALARY: u64 = 1000;

fn amount_value(digits: &str, suffix_k: bool) -> Option<u64> {
    let cleaned: String = digits.chars().filter(|c| *c != ',').collect();
    let value: f64 = cleaned.parse().ok()?;
    let value = if suffix_k { value * 1000.0 } else { value };
    if !value.is_finite() || value > 1e15 {
        return None;
    }
    Some(value.round() as u64)
}

/// Parses a single US dollar amount such as `$100000`, `$95,000` or `$120k`.
pub fn parse_salary(text: &str) -> Result<ParseOutcome<u64>, ParseFailure> {
    let trimmed = text.trim();
    if regex!(r"^\$[0-9]+$").is_match(trimmed) {
        return match trimmed[1..].parse::<u64>() {
            Ok(v) if v >= MIN_SALARY => outcome(v, Confidence::Exact, text),
            Ok(_) => failure(text, "amount below 1000"),
            Err(_) => failure(text, "amount out of range"),
        };
    }
    if regex!(r"(?i)\$\s?[0-9][0-9,]*(?:\.[0-9]+)?\s*k?\s*(?:-|–|—|to|and)\s*\$?\s?[0-9]").is_match(trimmed) {
        return failure(text, "range instead of a single amount");
    }
    let mut values = BTreeSet::new();
    for c in regex!(r"\$\s?([0-9][0-9,]*(?:\.[0-9]+)?)\s*([kK])?\b").captures_iter(trimmed) {
        match amount_value(&c[1], c.get(2).is_some()) {
            Some(v) => {
                values.insert(v);
            }
            None => return failure(text, "unreadable amount"),
        }
    }
    match values.len() {
        0 => failure(text, "no dollar amount"),
        1 => {
            let v = *values.iter().next().expect("one value");
            if v < MIN_SALARY {
                failure(text, "amount below 1000")
            } else {
                outcome(v, Confidence::Extracted, text)
            }
        }
        _ => failure(text, "several distinct amounts"),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn choice_examples() {
        let b = parse_choice("B").unwrap();
        assert_eq!((b.value, b.confidence), (1, Confidence::Exact));
        let c = parse_choice("Answer: C").unwrap();
        assert_eq!((c.value, c.confidence), (2, Confidence::Extracted));
        assert!(parse_choice("A or B").is_err());
        assert_eq!(parse_choice("b").unwrap().value, parse_choice("B").unwrap().value);
        assert_eq!(parse_choice(" d. ").unwrap().confidence, Confidence::Exact);
        assert_eq!(parse_choice("C) Skimming").unwrap().value, 2);
        assert!(parse_choice("").is_err());
    }

    #[test]
    fn yes_no_examples() {
        let n = parse_yes_no("No").unwrap();
        assert_eq!((n.value, n.confidence), (false, Confidence::Exact));
        let y = parse_yes_no("Yes, that is correct.").unwrap();
        assert_eq!((y.value, y.confidence), (true, Confidence::Extracted));
        assert!(parse_yes_no("It depends").is_err());
        assert!(parse_yes_no("Yes and no.").is_err());
    }

    #[test]
    fn salary_examples() {
        let a = parse_salary("$100000").unwrap();
        assert_eq!((a.value, a.confidence), (100_000, Confidence::Exact));
        let b = parse_salary("$95,000").unwrap();
        assert_eq!((b.value, b.confidence), (95_000, Confidence::Extracted));
        assert!(parse_salary("Ask for $90,000 to $110,000").is_err());
        assert!(parse_salary("$90,000–$110,000").is_err());
        let k = parse_salary("$120k").unwrap();
        assert_eq!((k.value, k.confidence), (120_000, Confidence::Extracted));
        assert!(parse_salary("$500").is_err());
        assert!(parse_salary("100000").is_err());
    }

    proptest! {
        #[test]
        fn never_panics(s in any::<String>(), bytes in prop::collection::vec(any::<u8>(), 0..64)) {
            let lossy = String::from_utf8_lossy(&bytes).into_owned();
            for t in [&s, &lossy] {
                let _ = parse_choice(t);
                let _ = parse_yes_no(t);
                let _ = parse_salary(t);
            }
        }

        #[test]
        fn canonical_forms_are_exact(idx in 0usize..4, yes in any::<bool>(), salary in 1000u64..10_000_000) {
            let letter = ['A', 'B', 'C', 'D'][idx].to_string();
            let c = parse_choice(&letter).unwrap();
            prop_assert_eq!((c.value, c.confidence), (idx, Confidence::Exact));
            let y = parse_yes_no(if yes { "Yes" } else { "No" }).unwrap();
            prop_assert_eq!((y.value, y.confidence), (yes, Confidence::Exact));
            let s = parse_salary(&format!("${salary}")).unwrap();
            prop_assert_eq!((s.value, s.confidence), (salary, Confidence::Exact));
        }
    }
}
