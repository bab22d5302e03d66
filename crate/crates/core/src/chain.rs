//! Chain plan types: the machine-readable attack program.
//!
//! A plan is an ordered list of steps (gadget resolutions, string
//! transforms, vetted literals) plus an output step and delivery
//! directives. Renderers turn the plan into prompt text and the resolver
//! executes it; both consume the same plan object, so the prompt shown to
//! a target and the string verified offline can never drift apart. The
//! JSON form mirrors these fields with stable names.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

/// Where a fill-in transform takes its template from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TemplateSource {
    /// Template text carried inline in the plan.
    Inline(String),
    /// Template produced by an earlier step.
    Step(usize),
}

/// A pure string transform applied to earlier step outputs.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Transform {
    /// Replace every occurrence of `find` with `replace`.
    Substitute { find: String, replace: String },
    /// Keep from the first occurrence of `marker` (inclusive) through the
    /// end of the string.
    ExtractStartingAt {
        marker: String,
        case_insensitive: bool,
    },
    /// Insert `count` copies of `pad_char` after the first occurrence of
    /// `anchor`.
    PadAfter {
        anchor: String,
        count: usize,
        pad_char: char,
    },
    /// Join the inputs with `separator`.
    Concat { separator: String },
    /// Fuse a subject step and an action step through a joiner template
    /// with `SUBJECT` and `ACTION` slots.
    Combine {
        subject_step: usize,
        action_step: usize,
        joiner_template: String,
    },
    /// Substitute assigned step outputs into the template's underscore
    /// runs, keyed by 0-based blank index.
    FillTemplate {
        template: TemplateSource,
        assignments: BTreeMap<usize, usize>,
    },
}

pub const DEFAULT_COMBINE_JOINER: &str = "SUBJECT ACTION";

impl Transform {
    /// Step indices this transform reads, beyond the generic input list.
    pub fn internal_refs(&self) -> Vec<usize> {
        match self {
            Transform::Combine {
                subject_step,
                action_step,
                ..
            } => vec![*subject_step, *action_step],
            Transform::FillTemplate {
                template,
                assignments,
            } => {
                let mut refs: Vec<usize> = assignments.values().copied().collect();
                if let TemplateSource::Step(step) = template {
                    refs.push(*step);
                }
                refs
            }
            _ => Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepAction {
    /// Ask the knowledge oracle for a gadget's resolution.
    ResolveGadget { id: String },
    /// Apply a transform to the outputs of earlier steps.
    ApplyTransform {
        transform: Transform,
        inputs: Vec<usize>,
    },
    /// Verbatim text; must pass the plan's target filters.
    LiteralText { text: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChainStep {
    /// 1-based ordinal; inputs may only reference smaller indices.
    pub index: usize,
    pub action: StepAction,
}

impl ChainStep {
    pub fn gadget(index: usize, id: impl Into<String>) -> Self {
        ChainStep {
            index,
            action: StepAction::ResolveGadget { id: id.into() },
        }
    }

    pub fn literal(index: usize, text: impl Into<String>) -> Self {
        ChainStep {
            index,
            action: StepAction::LiteralText { text: text.into() },
        }
    }

    pub fn transform(index: usize, transform: Transform, inputs: Vec<usize>) -> Self {
        ChainStep {
            index,
            action: StepAction::ApplyTransform { transform, inputs },
        }
    }

    /// All step indices this step reads.
    pub fn referenced_steps(&self) -> Vec<usize> {
        match &self.action {
            StepAction::ApplyTransform { transform, inputs } => {
                let mut refs = inputs.clone();
                refs.extend(transform.internal_refs());
                refs.sort_unstable();
                refs.dedup();
                refs
            }
            _ => Vec::new(),
        }
    }
}

/// Delivery directives rendered after the steps.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Directive {
    /// Suppress everything but the final step's result.
    OnlyOutputFinal,
    /// Ask for no trademarked names in the output.
    NoTrademarkNames,
    /// Ask the target to fill blanks without narrating it.
    QuietFill,
    /// Free-form directive carried verbatim and never interpreted.
    Opaque(String),
}

/// An ordered attack program that reconstructs a payload.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChainPlan {
    pub payload_id: String,
    pub steps: Vec<ChainStep>,
    pub output_step: usize,
    #[serde(default)]
    pub directives: BTreeSet<Directive>,
    /// Names of the lexicons this plan claims to evade.
    #[serde(default)]
    pub target_filters: Vec<String>,
}

#[derive(Debug, Error)]
pub enum PlanFormatError {
    #[error("plan document is not valid JSON: {0}")]
    Parse(#[from] serde_json::Error),
}

impl ChainPlan {
    pub fn step(&self, index: usize) -> Option<&ChainStep> {
        self.steps.get(index.checked_sub(1)?)
    }

    /// Step indices reachable from the output step, ascending.
    pub fn reachable_steps(&self) -> Vec<usize> {
        let mut seen = BTreeSet::new();
        let mut stack = vec![self.output_step];
        while let Some(index) = stack.pop() {
            if !seen.insert(index) {
                continue;
            }
            if let Some(step) = self.step(index) {
                stack.extend(step.referenced_steps());
            }
        }
        seen.into_iter().collect()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("plans always serialize")
    }

    pub fn from_json(source: &str) -> Result<Self, PlanFormatError> {
        Ok(serde_json::from_str(source)?)
    }

    /// Content hash tying renders and resolutions to one plan object.
    pub fn content_hash(&self) -> String {
        let canonical = serde_json::to_string(self).expect("plans always serialize");
        hex::encode(Sha256::digest(canonical.as_bytes()))
    }
}

/// Maximal runs of `_` in a template, as byte ranges in blank order.
pub fn underscore_runs(template: &str) -> Vec<(usize, usize)> {
    let mut runs = Vec::new();
    let mut current: Option<(usize, usize)> = None;
    for (pos, c) in template.char_indices() {
        if c == '_' {
            match &mut current {
                Some((_, end)) => *end = pos + 1,
                None => current = Some((pos, pos + 1)),
            }
        } else if let Some(run) = current.take() {
            runs.push(run);
        }
    }
    if let Some(run) = current {
        runs.push(run);
    }
    runs
}
