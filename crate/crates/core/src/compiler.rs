//! Chain compilation: from payload to validated, filter-evading plan.
//!
//! Two strategies. `numbered-steps` covers the payload with gadget
//! resolutions: a whole-payload gadget when one exists, otherwise
//! per-segment gadgets and vetted literals joined by concatenation.
//! `madlibs` blanks every word the knowledge base has a hint for, then
//! emits a fill-in-template plan whose hints are the gadget clues. Either
//! way the compiler proves its own work before returning: the plan must
//! resolve to the payload byte for byte and its rendering must pass every
//! lexicon in the suite.

use std::collections::{BTreeMap, BTreeSet};

use thiserror::Error;

use crate::chain::{
    underscore_runs, ChainPlan, ChainStep, Directive, StepAction, TemplateSource, Transform,
    DEFAULT_COMBINE_JOINER,
};
use crate::filters::{filter_check, FilterLexicon, ForbiddenPattern, MatchMode};
use crate::knowledge_base::{GadgetCategory, KnowledgeBase};
use crate::render::{render, PromptStyle, RenderError};
use crate::resolver::resolve;
use crate::segmentation::{
    hidden_words, segment_payload, Payload, SegmentError, SegmentKind, SegmentedPayload,
};

/// How the compiler covers the payload.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CompileStrategy {
    /// Gadget/transform pipeline rendered as a numbered instruction list.
    NumberedSteps,
    /// Blank filtered words and supply reference hints per blank.
    Madlibs,
}

impl CompileStrategy {
    pub fn default_style(&self) -> PromptStyle {
        match self {
            CompileStrategy::NumberedSteps => PromptStyle::NumberedSteps,
            CompileStrategy::Madlibs => PromptStyle::Madlibs,
        }
    }
}

#[derive(Debug, Error)]
pub enum CompileError {
    #[error("payload text must be nonempty")]
    EmptyPayload,
    #[error("filter suite must be nonempty")]
    EmptySuite,
    #[error("no gadget found for segment '{wanted}'")]
    NoGadgetFound { wanted: String },
    #[error("cannot evade lexicon '{lexicon}': pattern '{pattern}' still matches")]
    EvasionFailure { lexicon: String, pattern: String },
    #[error("segmentation failed: {0}")]
    Segmentation(#[from] SegmentError),
    #[error("plan validation failed: {0}")]
    Validation(String),
    #[error("compiled plan does not reconstruct the payload (diverges at byte {offset})")]
    Unsound { offset: usize },
}

impl From<RenderError> for CompileError {
    fn from(err: RenderError) -> Self {
        match err {
            RenderError::SelfCheckFailed { lexicon, pattern } => {
                CompileError::EvasionFailure { lexicon, pattern }
            }
            other => CompileError::Validation(other.to_string()),
        }
    }
}

fn suite_names(suite: &[FilterLexicon]) -> Vec<String> {
    suite.iter().map(|l| l.name.clone()).collect()
}

/// True when the plan's output step is an inline fill-in template.
pub fn is_fill_plan(plan: &ChainPlan) -> bool {
    matches!(
        plan.step(plan.output_step).map(|s| &s.action),
        Some(StepAction::ApplyTransform {
            transform: Transform::FillTemplate {
                template: TemplateSource::Inline(_),
                ..
            },
            ..
        })
    )
}

/// Combined view of every pattern in the suite, used to decide which
/// payload spans need hiding under the numbered-steps strategy.
fn union_lexicon(suite: &[FilterLexicon]) -> FilterLexicon {
    FilterLexicon {
        name: "union".into(),
        normalize_reassembly: false,
        patterns: suite.iter().flat_map(|l| l.patterns.clone()).collect(),
    }
}

/// Picks the lexicographically smallest gadget resolving exactly to
/// `target`.
fn exact_gadget(kb: &KnowledgeBase, target: &str) -> Option<String> {
    let matches = kb.find_gadgets(target);
    if matches.partial {
        return None;
    }
    matches.ids.into_iter().next()
}

/// Compiles a payload into a plan that provably evades the suite: the
/// returned plan resolves to the payload and renders without tripping any
/// lexicon.
pub fn compile_chain(
    payload: &Payload,
    kb: &KnowledgeBase,
    suite: &[FilterLexicon],
    strategy: CompileStrategy,
) -> Result<ChainPlan, CompileError> {
    if payload.text.is_empty() {
        return Err(CompileError::EmptyPayload);
    }
    if suite.is_empty() {
        return Err(CompileError::EmptySuite);
    }

    let plan = match strategy {
        CompileStrategy::NumberedSteps => compile_numbered(payload, kb, suite)?,
        CompileStrategy::Madlibs => compile_madlibs(payload, kb, suite)?,
    };

    // Prove the plan before handing it out: resolution equals the payload
    // and the rendering passes the whole suite.
    let resolved = resolve(&plan, kb);
    match resolved.final_text() {
        Some(text) if text == payload.text => {}
        Some(text) => {
            let offset = payload
                .text
                .bytes()
                .zip(text.bytes())
                .position(|(a, b)| a != b)
                .unwrap_or_else(|| payload.text.len().min(text.len()));
            return Err(CompileError::Unsound { offset });
        }
        None => {
            return Err(CompileError::Validation(format!(
                "compiled plan failed to resolve: {:?}",
                resolved.status
            )))
        }
    }
    let style = match strategy.default_style() {
        // a madlibs compile with nothing to blank degenerates to a literal
        // plan, which has no template to render as a fill-in game
        PromptStyle::Madlibs if !is_fill_plan(&plan) => PromptStyle::NumberedSteps,
        style => style,
    };
    render(&plan, kb, suite, style)?;

    let findings = validate_plan(&plan, kb, suite);
    if !findings.is_empty() {
        return Err(CompileError::Validation(
            findings
                .iter()
                .map(Finding::to_string)
                .collect::<Vec<_>>()
                .join("; "),
        ));
    }
    Ok(plan)
}

fn compile_numbered(
    payload: &Payload,
    kb: &KnowledgeBase,
    suite: &[FilterLexicon],
) -> Result<ChainPlan, CompileError> {
    let mut steps = Vec::new();

    if let Some(id) = exact_gadget(kb, &payload.text) {
        steps.push(ChainStep::gadget(1, id));
        return Ok(finish_plan(payload, suite, steps, 1, [Directive::OnlyOutputFinal]));
    }

    let seg = segment_payload(payload, &union_lexicon(suite))?;
    let words = hidden_words(&seg, payload)?;
    let mut inputs = Vec::new();
    for segment in &seg.segments {
        let index = steps.len() + 1;
        match segment.kind {
            SegmentKind::Literal => {
                let text = payload.text[segment.start..segment.end].to_string();
                steps.push(ChainStep::literal(index, text));
            }
            SegmentKind::Blank { blank_index } => {
                let word = &words[blank_index];
                let id = exact_gadget(kb, word).ok_or_else(|| CompileError::NoGadgetFound {
                    wanted: word.clone(),
                })?;
                steps.push(ChainStep::gadget(index, id));
            }
        }
        inputs.push(index);
    }

    let output_step = if steps.len() == 1 {
        1
    } else {
        let index = steps.len() + 1;
        steps.push(ChainStep::transform(
            index,
            Transform::Concat {
                separator: String::new(),
            },
            inputs,
        ));
        index
    };
    Ok(finish_plan(payload, suite, steps, output_step, [Directive::OnlyOutputFinal]))
}

fn compile_madlibs(
    payload: &Payload,
    kb: &KnowledgeBase,
    suite: &[FilterLexicon],
) -> Result<ChainPlan, CompileError> {
    let seg = blank_hinted_words(payload, kb)?;
    ensure_template_evades(&seg, suite)?;
    if seg.has_adjacent_blanks() {
        return Err(CompileError::Validation(
            "adjacent blanks would merge into one underscore run".into(),
        ));
    }

    let words = hidden_words(&seg, payload)?;
    if words.is_empty() {
        // nothing to hide; the payload itself already passes the suite
        let steps = vec![ChainStep::literal(1, payload.text.clone())];
        return Ok(finish_plan(payload, suite, steps, 1, [Directive::OnlyOutputFinal]));
    }

    let mut steps: Vec<ChainStep> = Vec::new();
    let mut step_for_word: BTreeMap<&str, usize> = BTreeMap::new();
    let mut assignments = BTreeMap::new();
    for (blank_index, word) in words.iter().enumerate() {
        let step_index = match step_for_word.get(word.as_str()) {
            Some(index) => *index,
            None => {
                let id = exact_gadget(kb, word).ok_or_else(|| CompileError::NoGadgetFound {
                    wanted: word.clone(),
                })?;
                let index = steps.len() + 1;
                steps.push(ChainStep::gadget(index, id));
                step_for_word.insert(word, index);
                index
            }
        };
        assignments.insert(blank_index, step_index);
    }

    let fill_index = steps.len() + 1;
    steps.push(ChainStep::transform(
        fill_index,
        Transform::FillTemplate {
            template: TemplateSource::Inline(seg.template.clone()),
            assignments,
        },
        Vec::new(),
    ));
    Ok(finish_plan(
        payload,
        suite,
        steps,
        fill_index,
        [Directive::OnlyOutputFinal, Directive::QuietFill],
    ))
}

/// Segments the payload against the words the knowledge base can hint:
/// the final resolutions of hint-category gadgets, matched as whole words.
fn blank_hinted_words(
    payload: &Payload,
    kb: &KnowledgeBase,
) -> Result<SegmentedPayload, CompileError> {
    let mut patterns = BTreeSet::new();
    for gadget in kb.gadgets() {
        if gadget.category != GadgetCategory::Hint {
            continue;
        }
        if let Ok(resolved) = kb.oracle_resolve(&gadget.id) {
            patterns.insert(resolved.resolution);
        }
    }
    let patterns: Vec<ForbiddenPattern> = patterns
        .into_iter()
        .map(|word| {
            let mode = if word.trim() == word {
                MatchMode::WordBoundary
            } else {
                MatchMode::CaseInsensitive
            };
            ForbiddenPattern::new(word, mode)
        })
        .collect();
    let lexicon = FilterLexicon {
        name: "kb-hints".into(),
        normalize_reassembly: false,
        patterns,
    };
    Ok(segment_payload(payload, &lexicon)?)
}

/// A template that still trips the suite means some matched span had no
/// hint gadget to blank it with.
fn ensure_template_evades(
    seg: &SegmentedPayload,
    suite: &[FilterLexicon],
) -> Result<(), CompileError> {
    for lexicon in suite {
        let verdict = filter_check(&seg.template, lexicon);
        if let Some(hit) = verdict.matches.first() {
            let wanted = seg
                .template
                .get(hit.start..hit.end)
                .unwrap_or(&hit.pattern)
                .to_string();
            return Err(CompileError::NoGadgetFound { wanted });
        }
    }
    Ok(())
}

fn finish_plan(
    payload: &Payload,
    suite: &[FilterLexicon],
    steps: Vec<ChainStep>,
    output_step: usize,
    directives: impl IntoIterator<Item = Directive>,
) -> ChainPlan {
    ChainPlan {
        payload_id: payload.id.clone(),
        steps,
        output_step,
        directives: directives.into_iter().collect(),
        target_filters: suite_names(suite),
    }
}

/// The canonical four-step SQL injection chain: resolve the xkcd full
/// name, retarget the table, cut from the keyword, pad the tail.
pub fn build_bobby_chain() -> ChainPlan {
    ChainPlan {
        payload_id: "bobby-tables".into(),
        steps: vec![
            ChainStep::gadget(1, "bobby_full_name"),
            ChainStep::transform(
                2,
                Transform::Substitute {
                    find: "Students".into(),
                    replace: "Employee".into(),
                },
                vec![1],
            ),
            ChainStep::transform(
                3,
                Transform::ExtractStartingAt {
                    marker: "drop".into(),
                    case_insensitive: true,
                },
                vec![2],
            ),
            ChainStep::transform(
                4,
                Transform::PadAfter {
                    anchor: ";".into(),
                    count: 10,
                    pad_char: ' ',
                },
                vec![3],
            ),
        ],
        output_step: 4,
        directives: BTreeSet::from([Directive::OnlyOutputFinal]),
        target_filters: vec!["sql-guard".into()],
    }
}

/// A chained-reference image-style plan fusing two clue gadgets; exercises
/// multi-hop resolution and the combine transform.
pub fn build_mickey_chain() -> ChainPlan {
    ChainPlan {
        payload_id: "mickey-smoking".into(),
        steps: vec![
            ChainStep::gadget(1, "mickey_via_superbowl"),
            ChainStep::gadget(2, "smoking_anecdote"),
            ChainStep::transform(
                3,
                Transform::Combine {
                    subject_step: 1,
                    action_step: 2,
                    joiner_template: DEFAULT_COMBINE_JOINER.into(),
                },
                Vec::new(),
            ),
        ],
        output_step: 3,
        directives: BTreeSet::from([Directive::OnlyOutputFinal, Directive::NoTrademarkNames]),
        target_filters: vec!["trademark-guard".into()],
    }
}

/// One problem found while validating a plan.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Finding {
    MissingOutputStep { output_step: usize },
    NonSequentialIndex { position: usize, index: usize },
    ForwardReference { step: usize, referenced: usize },
    UnknownGadget { step: usize, id: String },
    OracleFailure { step: usize, reason: String },
    InvalidTransform { step: usize, reason: String },
    BlankCoverage { step: usize, blanks: usize, assignments: usize },
    DeadStep { step: usize },
    LiteralBlocked { step: usize, lexicon: String, pattern: String },
    EvasionFailure { style: PromptStyle, lexicon: String, pattern: String },
    RenderFailure { style: PromptStyle, reason: String },
}

impl std::fmt::Display for Finding {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Finding::MissingOutputStep { output_step } => {
                write!(f, "output step {output_step} does not exist")
            }
            Finding::NonSequentialIndex { position, index } => write!(
                f,
                "step at position {position} carries index {index}; indices must be 1..n in order"
            ),
            Finding::ForwardReference { step, referenced } => {
                write!(f, "step {step} references step {referenced} at or after itself")
            }
            Finding::UnknownGadget { step, id } => {
                write!(f, "step {step} references unknown gadget '{id}'")
            }
            Finding::OracleFailure { step, reason } => {
                write!(f, "step {step} cannot resolve: {reason}")
            }
            Finding::InvalidTransform { step, reason } => {
                write!(f, "step {step} transform invalid: {reason}")
            }
            Finding::BlankCoverage {
                step,
                blanks,
                assignments,
            } => write!(
                f,
                "step {step} fill template has {blanks} blanks but {assignments} assignments"
            ),
            Finding::DeadStep { step } => {
                write!(f, "step {step} is unreachable from the output step")
            }
            Finding::LiteralBlocked {
                step,
                lexicon,
                pattern,
            } => write!(
                f,
                "step {step} literal trips lexicon '{lexicon}' (pattern '{pattern}')"
            ),
            Finding::EvasionFailure {
                style,
                lexicon,
                pattern,
            } => write!(
                f,
                "{style} rendering trips lexicon '{lexicon}' (pattern '{pattern}')"
            ),
            Finding::RenderFailure { style, reason } => {
                write!(f, "{style} rendering failed: {reason}")
            }
        }
    }
}

fn transform_findings(step_index: usize, transform: &Transform, inputs: &[usize]) -> Vec<Finding> {
    let mut findings = Vec::new();
    let mut invalid = |reason: String| {
        findings.push(Finding::InvalidTransform {
            step: step_index,
            reason,
        })
    };
    match transform {
        Transform::Substitute { find, .. } => {
            if find.is_empty() {
                invalid("substitute find string is empty".into());
            }
            if inputs.len() != 1 {
                invalid(format!("substitute takes one input, got {}", inputs.len()));
            }
        }
        Transform::ExtractStartingAt { marker, .. } => {
            if marker.is_empty() {
                invalid("extract marker is empty".into());
            }
            if inputs.len() != 1 {
                invalid(format!("extract takes one input, got {}", inputs.len()));
            }
        }
        Transform::PadAfter { anchor, .. } => {
            if anchor.is_empty() {
                invalid("pad anchor is empty".into());
            }
            if inputs.len() != 1 {
                invalid(format!("pad takes one input, got {}", inputs.len()));
            }
        }
        Transform::Concat { .. } => {
            if inputs.is_empty() {
                invalid("concat needs at least one input".into());
            }
        }
        Transform::Combine { .. } => {
            if !inputs.is_empty() {
                invalid("combine references its steps internally; inputs must be empty".into());
            }
        }
        Transform::FillTemplate {
            template,
            assignments,
        } => {
            if !inputs.is_empty() {
                invalid("fill template references its steps internally; inputs must be empty".into());
            }
            if let TemplateSource::Inline(text) = template {
                let blanks = underscore_runs(text).len();
                let keys_sequential = assignments
                    .keys()
                    .enumerate()
                    .all(|(expect, key)| *key == expect);
                if blanks != assignments.len() || !keys_sequential {
                    findings.push(Finding::BlankCoverage {
                        step: step_index,
                        blanks,
                        assignments: assignments.len(),
                    });
                }
            }
        }
    }
    findings
}

/// Re-checks every plan invariant plus gadget existence and render
/// evasion. An empty findings list means the plan is valid.
pub fn validate_plan(
    plan: &ChainPlan,
    kb: &KnowledgeBase,
    suite: &[FilterLexicon],
) -> Vec<Finding> {
    let mut findings = Vec::new();

    for (position, step) in plan.steps.iter().enumerate() {
        if step.index != position + 1 {
            findings.push(Finding::NonSequentialIndex {
                position,
                index: step.index,
            });
        }
    }
    if plan.step(plan.output_step).is_none() {
        findings.push(Finding::MissingOutputStep {
            output_step: plan.output_step,
        });
    }

    for step in &plan.steps {
        for referenced in step.referenced_steps() {
            if referenced >= step.index || referenced == 0 {
                findings.push(Finding::ForwardReference {
                    step: step.index,
                    referenced,
                });
            }
        }
        match &step.action {
            StepAction::ResolveGadget { id } => {
                if kb.gadget(id).is_none() {
                    findings.push(Finding::UnknownGadget {
                        step: step.index,
                        id: id.clone(),
                    });
                } else if let Err(err) = kb.oracle_resolve(id) {
                    findings.push(Finding::OracleFailure {
                        step: step.index,
                        reason: err.to_string(),
                    });
                }
            }
            StepAction::ApplyTransform { transform, inputs } => {
                findings.extend(transform_findings(step.index, transform, inputs));
            }
            StepAction::LiteralText { text } => {
                for lexicon in suite {
                    let verdict = filter_check(text, lexicon);
                    if let Some(hit) = verdict.matches.first() {
                        findings.push(Finding::LiteralBlocked {
                            step: step.index,
                            lexicon: lexicon.name.clone(),
                            pattern: hit.pattern.clone(),
                        });
                    }
                }
            }
        }
    }

    let reachable: BTreeSet<usize> = plan.reachable_steps().into_iter().collect();
    for step in &plan.steps {
        if !reachable.contains(&step.index) {
            findings.push(Finding::DeadStep { step: step.index });
        }
    }

    // Rendering checks only make sense on structurally sound plans.
    if findings.is_empty() {
        let mut styles = vec![PromptStyle::NumberedSteps, PromptStyle::Inline];
        if is_fill_plan(plan) {
            styles.push(PromptStyle::Madlibs);
        }
        for style in styles {
            match render(plan, kb, suite, style) {
                Ok(_) => {}
                Err(RenderError::SelfCheckFailed { lexicon, pattern }) => {
                    findings.push(Finding::EvasionFailure {
                        style,
                        lexicon,
                        pattern,
                    });
                }
                Err(err) => findings.push(Finding::RenderFailure {
                    style,
                    reason: err.to_string(),
                }),
            }
        }
    }

    findings
}
