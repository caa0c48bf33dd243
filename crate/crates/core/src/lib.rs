//! Persona-conditioned bias audits for chat-completion models.
//!
//! The crate renders persona prompts for three probes (multiple-choice
//! accuracy, answer grading, salary advice), runs them against HTTP, cached or
//! synthetic backends, parses the constrained answers and decides significance
//! with McNemar, Mann-Whitney and Kruskal-Wallis tests.

pub mod audit;
pub mod backend;
pub mod calibrate;
pub mod canonical;
pub mod config;
pub mod dataset;
pub mod parsers;
pub mod personae;
pub mod report;
pub mod rng;
pub mod runner;
pub mod stats;
