//! Candidate skeleton generation.
//!
//! Every generator honours the same contract: given a [`PromptContext`] it
//! returns between one and `samples_per_prompt` skeletons, each of which
//! parses under the DSL and uses only the context's variables. Two
//! implementations exist: [`GrammarGenerator`], a seeded tree sampler that
//! runs offline, and [`LlmGenerator`], a chat-completion client.

mod grammar;
mod llm;
mod prompts;

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::datagen::Variable;
use crate::expr::Expression;

pub use grammar::{grammar_propose, GrammarConfig, GrammarGenerator};
pub use llm::{EndpointConfig, FixtureTransport, HttpReply, LlmGenerator, Transport, TransportError, UreqTransport};
pub use prompts::{render_hard_rules, render_prompt, system_message, OUTPUT_PROTOCOL};

#[derive(Debug, thiserror::Error)]
pub enum GenError {
    #[error("prompt slot `{0}` is missing")]
    MissingSlot(&'static str),
    #[error("{kind:?} prompt expects {expected} exemplar(s), got {got}")]
    ExemplarCount { kind: PromptKind, expected: &'static str, got: usize },
    #[error("samples_per_prompt must be at least 1")]
    ZeroSamples,
    #[error("transport failed after {attempts} attempt(s): {last}")]
    Transport { attempts: usize, last: String },
    #[error("endpoint rejected credentials (HTTP {status})")]
    Auth { status: u16 },
    #[error("API key variable `{0}` is not set")]
    MissingKey(String),
    #[error("malformed endpoint reply: {0}")]
    BadReply(String),
    #[error("response contained no usable expression ({dropped} dropped)")]
    NoValidExpression { dropped: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptKind {
    Warmup,
    Evolution,
    Refine,
    Repair,
    ImprovementAnalysis,
    ResidualAnalysis,
    Reflection,
}

impl PromptKind {
    /// Kinds whose reply is a list of skeletons rather than prose.
    pub fn yields_expressions(self) -> bool {
        matches!(self, PromptKind::Warmup | PromptKind::Evolution | PromptKind::Refine | PromptKind::Repair)
    }
}

/// A skeleton shown in a prompt.
#[derive(Debug, Clone, PartialEq)]
pub struct Exemplar {
    pub expr: Expression,
    pub score: f64,
    pub valid: bool,
}

/// One refined attempt shown to the reflection prompt.
#[derive(Debug, Clone, PartialEq)]
pub struct Attempt {
    pub expr: Expression,
    /// `None` when the attempt could not be fitted.
    pub score: Option<f64>,
    pub valid: bool,
    pub improved: bool,
}

/// Earlier repair attempt shown to the repair prompt.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepairRecord {
    pub failed: Expression,
    pub failure_reason: String,
    pub attempt: usize,
    pub fix_hint: String,
}

/// Original, improved and explanation triple from an earlier refinement.
#[derive(Debug, Clone, PartialEq)]
pub struct RefinementHistory {
    pub original: Expression,
    pub improved: Expression,
    pub explanation: String,
}

/// Everything a template may reference. Which fields are required depends on
/// `kind`; [`render_prompt`] reports the first missing one.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptContext {
    pub kind: PromptKind,
    pub domain: String,
    pub problem: String,
    pub variables: Vec<Variable>,
    pub target: Variable,
    /// Ordered worst to best.
    pub exemplars: Vec<Exemplar>,
    pub insights: Vec<String>,
    pub analysis: String,
    pub hard_rules: String,
    pub samples_per_prompt: usize,
    pub defect_var: Option<String>,
    pub failure_reason: Option<String>,
    pub fix_hint: Option<String>,
    pub good_examples: Vec<Exemplar>,
    pub history: Vec<RepairRecord>,
    pub refinements: Vec<RefinementHistory>,
    pub attempts: Vec<Attempt>,
}

impl PromptContext {
    pub fn new(kind: PromptKind, variables: Vec<Variable>, target: Variable) -> Self {
        PromptContext {
            kind,
            domain: String::new(),
            problem: String::new(),
            variables,
            target,
            exemplars: Vec::new(),
            insights: Vec::new(),
            analysis: String::new(),
            hard_rules: String::new(),
            samples_per_prompt: 4,
            defect_var: None,
            failure_reason: None,
            fix_hint: None,
            good_examples: Vec::new(),
            history: Vec::new(),
            refinements: Vec::new(),
            attempts: Vec::new(),
        }
    }

    pub fn variable_names(&self) -> BTreeSet<String> {
        self.variables.iter().map(|v| v.name.clone()).collect()
    }

    /// Checks exemplar counts and required slots for `kind`.
    pub fn validate(&self) -> Result<(), GenError> {
        if self.samples_per_prompt == 0 {
            return Err(GenError::ZeroSamples);
        }
        let n = self.exemplars.len();
        let (ok, expected) = match self.kind {
            PromptKind::Warmup => (n == 0, "0"),
            PromptKind::Evolution => (n >= 1, "at least 1"),
            PromptKind::Refine | PromptKind::ResidualAnalysis | PromptKind::Reflection => (n == 1, "1"),
            PromptKind::Repair | PromptKind::ImprovementAnalysis => (n == 2, "2"),
        };
        if !ok {
            return Err(GenError::ExemplarCount { kind: self.kind, expected, got: n });
        }
        if self.variables.is_empty() {
            return Err(GenError::MissingSlot("variables"));
        }
        let needs_analysis = matches!(
            self.kind,
            PromptKind::Warmup | PromptKind::Refine | PromptKind::Repair | PromptKind::ResidualAnalysis
        );
        if needs_analysis && self.analysis.is_empty() {
            return Err(GenError::MissingSlot("analysis"));
        }
        if matches!(self.kind, PromptKind::Warmup | PromptKind::Refine | PromptKind::Repair)
            && self.hard_rules.is_empty()
        {
            return Err(GenError::MissingSlot("hard_rules"));
        }
        if self.kind == PromptKind::Repair && self.failure_reason.is_none() {
            return Err(GenError::MissingSlot("failure_reason"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Proposal {
    pub expr: Expression,
    pub rationale: String,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Usage {
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorOutput {
    pub raw_text: String,
    pub extracted: Vec<Proposal>,
    /// Lines that carried an expression but failed to parse or used unknown
    /// variables.
    pub dropped: usize,
    pub usage: Usage,
}

/// The generation contract.
pub trait Generator: Send {
    /// Skeletons for an expression-yielding prompt.
    fn propose(&mut self, ctx: &PromptContext) -> Result<GeneratorOutput, GenError>;

    /// Prose reply for an analysis or reflection prompt.
    fn analyze(&mut self, ctx: &PromptContext) -> Result<String, GenError>;

    /// Opaque position in the generator's random stream, for checkpoints.
    fn cursor(&self) -> u64 {
        0
    }

    fn set_cursor(&mut self, _cursor: u64) {}
}

/// Collects `EXPR:` lines from a reply, dropping anything that does not
/// parse or mentions a variable outside `allowed`. Text between two
/// expression lines becomes the rationale of the later one.
pub fn extract_expressions(text: &str, allowed: &BTreeSet<String>, limit: usize) -> (Vec<Proposal>, usize) {
    let mut out = Vec::new();
    let mut dropped = 0;
    let mut notes: Vec<&str> = Vec::new();
    for raw in text.lines() {
        let line = raw.trim();
        if line.starts_with("```") {
            continue;
        }
        let body = line.trim_start_matches(['-', '*', '>', '`', ' ']);
        let Some(rest) = body.strip_prefix("EXPR:") else {
            if !line.is_empty() {
                notes.push(line);
            }
            continue;
        };
        let src = rest.trim().trim_matches('`').trim();
        match crate::expr::parse(src) {
            Ok(e) if e.free_vars().is_subset(allowed) => {
                if out.len() < limit {
                    out.push(Proposal { expr: e.renumber_params(), rationale: notes.join(" ") });
                }
            }
            _ => dropped += 1,
        }
        notes.clear();
    }
    (out, dropped)
}
