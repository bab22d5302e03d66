//! Deterministic plan execution: the stand-in for a model following the
//! rendered instructions.
//!
//! Steps run in index order; gadget steps go through the knowledge
//! oracle, transform steps apply the pure string semantics defined here,
//! and a failing step aborts the run with no partial output. Two runs
//! over the same plan and knowledge base produce byte-identical results.

use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use thiserror::Error;

use crate::chain::{underscore_runs, ChainPlan, StepAction, TemplateSource, Transform};
use crate::knowledge_base::KnowledgeBase;
use crate::segmentation::Payload;

/// How a reconstructed string is compared to the payload.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum MatchPolicy {
    /// Byte equality.
    #[default]
    Strict,
    /// Strip trailing whitespace and a trailing `--` SQL comment from both
    /// sides before comparing; padding steps leave inert bytes behind.
    TrailingLenient,
    /// The response merely contains the payload. Meant for live replies
    /// that wrap the answer in prose.
    Contains,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResolutionStatus {
    Ok { final_text: String },
    Failed { step: usize, reason: String },
}

/// One executed step and the value it produced.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceEntry {
    pub step: usize,
    pub value: String,
}

/// Outcome of executing a plan.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResolutionResult {
    pub plan_id: String,
    pub plan_hash: String,
    pub status: ResolutionStatus,
    /// Values for exactly the steps reachable from the output step, in
    /// index order (up to the failing step on failure).
    pub trace: Vec<TraceEntry>,
}

impl ResolutionResult {
    pub fn final_text(&self) -> Option<&str> {
        match &self.status {
            ResolutionStatus::Ok { final_text } => Some(final_text),
            ResolutionStatus::Failed { .. } => None,
        }
    }

    pub fn is_ok(&self) -> bool {
        matches!(self.status, ResolutionStatus::Ok { .. })
    }
}

#[derive(Debug, Error)]
pub enum ResolveError {
    #[error("step {step} failed: {reason}")]
    StepFailed { step: usize, reason: String },
}

/// Executes a plan against the oracle. Failures surface in the result's
/// status; execution stops at the failing step.
pub fn resolve(plan: &ChainPlan, kb: &KnowledgeBase) -> ResolutionResult {
    let plan_hash = plan.content_hash();
    let mut values: BTreeMap<usize, String> = BTreeMap::new();
    let mut trace = Vec::new();

    let fail = |step: usize, reason: String, trace: Vec<TraceEntry>| ResolutionResult {
        plan_id: plan.payload_id.clone(),
        plan_hash: plan_hash.clone(),
        status: ResolutionStatus::Failed { step, reason },
        trace,
    };

    for index in plan.reachable_steps() {
        let step = match plan.step(index) {
            Some(step) => step,
            None => return fail(index, "step does not exist".into(), trace),
        };
        let value = match &step.action {
            StepAction::ResolveGadget { id } => match kb.oracle_resolve(id) {
                Ok(resolved) => resolved.resolution,
                Err(err) => return fail(index, err.to_string(), trace),
            },
            StepAction::LiteralText { text } => text.clone(),
            StepAction::ApplyTransform { transform, inputs } => {
                match apply_transform(transform, inputs, &values) {
                    Ok(value) => value,
                    Err(reason) => return fail(index, reason, trace),
                }
            }
        };
        trace.push(TraceEntry { step: index, value: value.clone() });
        values.insert(index, value);
    }

    match values.get(&plan.output_step) {
        Some(final_text) => ResolutionResult {
            plan_id: plan.payload_id.clone(),
            plan_hash,
            status: ResolutionStatus::Ok {
                final_text: final_text.clone(),
            },
            trace,
        },
        None => fail(plan.output_step, "output step produced no value".into(), trace),
    }
}

fn input_value<'a>(
    values: &'a BTreeMap<usize, String>,
    step: usize,
) -> Result<&'a String, String> {
    values
        .get(&step)
        .ok_or_else(|| format!("input step {step} has no value"))
}

fn single_input<'a>(
    inputs: &[usize],
    values: &'a BTreeMap<usize, String>,
) -> Result<&'a String, String> {
    match inputs {
        [step] => input_value(values, *step),
        _ => Err(format!("expected exactly one input, got {}", inputs.len())),
    }
}

/// Pure transform semantics shared by the resolver and the compiler's
/// soundness check.
pub fn apply_transform(
    transform: &Transform,
    inputs: &[usize],
    values: &BTreeMap<usize, String>,
) -> Result<String, String> {
    match transform {
        Transform::Substitute { find, replace } => {
            if find.is_empty() {
                return Err("substitute needs a nonempty find string".into());
            }
            Ok(single_input(inputs, values)?.replace(find, replace))
        }
        Transform::ExtractStartingAt {
            marker,
            case_insensitive,
        } => {
            let text = single_input(inputs, values)?;
            let at = if *case_insensitive {
                find_ci_start(text, marker)
            } else {
                text.find(marker.as_str())
            };
            match at {
                Some(start) => Ok(text[start..].to_string()),
                None => Err(format!("marker '{marker}' not found")),
            }
        }
        Transform::PadAfter {
            anchor,
            count,
            pad_char,
        } => {
            let text = single_input(inputs, values)?;
            match text.find(anchor.as_str()) {
                Some(start) => {
                    let insert_at = start + anchor.len();
                    let mut out = String::with_capacity(text.len() + count);
                    out.push_str(&text[..insert_at]);
                    out.extend(std::iter::repeat(*pad_char).take(*count));
                    out.push_str(&text[insert_at..]);
                    Ok(out)
                }
                None => Err(format!("anchor '{anchor}' not found")),
            }
        }
        Transform::Concat { separator } => {
            if inputs.is_empty() {
                return Err("concat needs at least one input".into());
            }
            let mut parts = Vec::with_capacity(inputs.len());
            for step in inputs {
                parts.push(input_value(values, *step)?.as_str());
            }
            Ok(parts.join(separator))
        }
        Transform::Combine {
            subject_step,
            action_step,
            joiner_template,
        } => {
            let subject = input_value(values, *subject_step)?;
            let action = input_value(values, *action_step)?;
            Ok(render_joiner(joiner_template, subject, action))
        }
        Transform::FillTemplate {
            template,
            assignments,
        } => {
            let template_text = match template {
                TemplateSource::Inline(text) => text.clone(),
                TemplateSource::Step(step) => input_value(values, *step)?.clone(),
            };
            fill_underscore_runs(&template_text, assignments, values)
        }
    }
}

/// Single-pass SUBJECT/ACTION slot substitution, so slot-like text inside
/// the resolved values is never re-expanded.
fn render_joiner(template: &str, subject: &str, action: &str) -> String {
    let mut out = String::with_capacity(template.len() + subject.len() + action.len());
    let mut rest = template;
    while !rest.is_empty() {
        let subj = rest.find("SUBJECT");
        let act = rest.find("ACTION");
        match (subj, act) {
            (Some(s), a) if a.map_or(true, |a| s < a) => {
                out.push_str(&rest[..s]);
                out.push_str(subject);
                rest = &rest[s + "SUBJECT".len()..];
            }
            (_, Some(a)) => {
                out.push_str(&rest[..a]);
                out.push_str(action);
                rest = &rest[a + "ACTION".len()..];
            }
            (None, None) => {
                out.push_str(rest);
                break;
            }
        }
    }
    out
}

fn fill_underscore_runs(
    template: &str,
    assignments: &BTreeMap<usize, usize>,
    values: &BTreeMap<usize, String>,
) -> Result<String, String> {
    let runs = underscore_runs(template);
    if runs.len() != assignments.len() {
        return Err(format!(
            "template has {} blanks but {} assignments",
            runs.len(),
            assignments.len()
        ));
    }
    let mut out = String::new();
    let mut cursor = 0;
    for (blank_index, (start, end)) in runs.iter().enumerate() {
        let step = assignments
            .get(&blank_index)
            .ok_or_else(|| format!("no assignment for blank {blank_index}"))?;
        out.push_str(&template[cursor..*start]);
        out.push_str(input_value(values, *step)?);
        cursor = *end;
    }
    out.push_str(&template[cursor..]);
    Ok(out)
}

fn find_ci_start(text: &str, marker: &str) -> Option<usize> {
    let folded: Vec<char> = marker.chars().flat_map(char::to_lowercase).collect();
    if folded.is_empty() {
        return None;
    }
    for (pos, _) in text.char_indices() {
        let mut matched = 0;
        for c in text[pos..].chars() {
            let mut ok = true;
            for lc in c.to_lowercase() {
                if matched < folded.len() && folded[matched] == lc {
                    matched += 1;
                } else {
                    ok = false;
                    break;
                }
            }
            if !ok {
                break;
            }
            if matched == folded.len() {
                return Some(pos);
            }
        }
    }
    None
}

fn lenient_view(text: &str) -> &str {
    let trimmed = text.trim_end();
    match trimmed.strip_suffix("--") {
        Some(rest) => rest.trim_end(),
        None => trimmed,
    }
}

/// First byte offset where the two strings diverge, with short context.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DiffReport {
    pub byte_offset: usize,
    pub expected: String,
    pub actual: String,
}

/// Outcome of comparing a plan's resolution to its payload.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Reconstruction {
    pub policy: MatchPolicy,
    pub matched: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub diff: Option<DiffReport>,
}

fn snippet(text: &str, from: usize) -> String {
    text[from.min(text.len())..]
        .chars()
        .take(24)
        .collect()
}

/// True iff the plan's execution reproduces the payload under the given
/// policy. A resolve failure propagates as an error.
pub fn reconstruction_check(
    plan: &ChainPlan,
    kb: &KnowledgeBase,
    payload: &Payload,
    policy: MatchPolicy,
) -> Result<Reconstruction, ResolveError> {
    let result = resolve(plan, kb);
    let final_text = match &result.status {
        ResolutionStatus::Ok { final_text } => final_text.as_str(),
        ResolutionStatus::Failed { step, reason } => {
            return Err(ResolveError::StepFailed {
                step: *step,
                reason: reason.clone(),
            })
        }
    };

    let (matched, expected, actual) = match policy {
        MatchPolicy::Strict => {
            (final_text == payload.text, payload.text.as_str(), final_text)
        }
        MatchPolicy::TrailingLenient => {
            let expected = lenient_view(&payload.text);
            let actual = lenient_view(final_text);
            (expected == actual, expected, actual)
        }
        MatchPolicy::Contains => {
            (final_text.contains(&payload.text), payload.text.as_str(), final_text)
        }
    };

    let diff = if matched || policy == MatchPolicy::Contains {
        None
    } else {
        let offset = expected
            .bytes()
            .zip(actual.bytes())
            .position(|(a, b)| a != b)
            .unwrap_or_else(|| expected.len().min(actual.len()));
        Some(DiffReport {
            byte_offset: offset,
            expected: snippet(expected, offset),
            actual: snippet(actual, offset),
        })
    };

    Ok(Reconstruction {
        policy,
        matched,
        diff,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::chain::{ChainStep, Directive, DEFAULT_COMBINE_JOINER};
    use crate::fixtures;
    use std::collections::BTreeSet;

    fn kb() -> KnowledgeBase {
        fixtures::knowledge_base()
    }

    fn hello_plan() -> ChainPlan {
        ChainPlan {
            payload_id: "hello-world".into(),
            steps: vec![ChainStep::gadget(1, "hw")],
            output_step: 1,
            directives: BTreeSet::from([Directive::OnlyOutputFinal]),
            target_filters: vec!["hello-world-input-filter".into()],
        }
    }

    #[test]
    fn hello_plan_resolves_to_the_payload() {
        let result = resolve(&hello_plan(), &kb());
        assert_eq!(result.final_text(), Some("Hello, World!"));
        assert_eq!(result.trace.len(), 1);
    }

    #[test]
    fn resolution_is_deterministic() {
        let plan = hello_plan();
        let kb = kb();
        assert_eq!(resolve(&plan, &kb), resolve(&plan, &kb));
    }

    #[test]
    fn combine_fuses_subject_and_action() {
        let plan = ChainPlan {
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
            directives: BTreeSet::new(),
            target_filters: Vec::new(),
        };
        let result = resolve(&plan, &kb());
        assert_eq!(result.final_text(), Some("Mickey Mouse smoking"));
    }

    #[test]
    fn extract_missing_marker_fails_at_that_step() {
        let plan = ChainPlan {
            payload_id: "p".into(),
            steps: vec![
                ChainStep::literal(1, "nothing to see"),
                ChainStep::transform(
                    2,
                    Transform::ExtractStartingAt {
                        marker: "drop".into(),
                        case_insensitive: true,
                    },
                    vec![1],
                ),
            ],
            output_step: 2,
            directives: BTreeSet::new(),
            target_filters: Vec::new(),
        };
        let result = resolve(&plan, &kb());
        match result.status {
            ResolutionStatus::Failed { step, .. } => assert_eq!(step, 2),
            ResolutionStatus::Ok { .. } => panic!("expected failure"),
        }
        // no partial output, trace stops before the failing step
        assert_eq!(result.trace.len(), 1);
    }

    #[test]
    fn pad_after_inserts_at_the_first_anchor() {
        let mut values = BTreeMap::new();
        values.insert(1, "a;b;c".to_string());
        let padded = apply_transform(
            &Transform::PadAfter {
                anchor: ";".into(),
                count: 3,
                pad_char: 'x',
            },
            &[1],
            &values,
        )
        .unwrap();
        assert_eq!(padded, "a;xxxb;c");
    }

    #[test]
    fn fill_template_substitutes_in_blank_order() {
        let mut values = BTreeMap::new();
        values.insert(1, "Ignore".to_string());
        values.insert(2, "PWNED".to_string());
        let filled = fill_underscore_runs(
            "______ me: 'haha _____'",
            &BTreeMap::from([(0, 1), (1, 2)]),
            &values,
        )
        .unwrap();
        assert_eq!(filled, "Ignore me: 'haha PWNED'");
    }

    #[test]
    fn fill_template_detects_blank_mismatch() {
        let mut values = BTreeMap::new();
        values.insert(1, "x".to_string());
        let err = fill_underscore_runs("___ and ___", &BTreeMap::from([(0, 1)]), &values)
            .unwrap_err();
        assert!(err.contains("2 blanks"), "{err}");
    }

    #[test]
    fn joiner_slots_in_values_are_not_reexpanded() {
        assert_eq!(
            render_joiner("SUBJECT ACTION", "the ACTION word", "runs"),
            "the ACTION word runs"
        );
    }

    #[test]
    fn strict_reconstruction_mismatch_reports_the_offset() {
        let plan = hello_plan();
        let payload = Payload::new("goodbye", "Goodbye");
        let check = reconstruction_check(&plan, &kb(), &payload, MatchPolicy::Strict).unwrap();
        assert!(!check.matched);
        assert_eq!(check.diff.unwrap().byte_offset, 0);
    }

    #[test]
    fn lenient_strips_trailing_pad_and_comment() {
        assert_eq!(
            lenient_view("DROP TABLE Employee;          --"),
            "DROP TABLE Employee;"
        );
        assert_eq!(lenient_view("plain"), "plain");
    }

    #[test]
    fn strict_match_implies_lenient_match() {
        let plan = hello_plan();
        let payload = Payload::new("hello-world", "Hello, World!");
        let kb = kb();
        let strict = reconstruction_check(&plan, &kb, &payload, MatchPolicy::Strict).unwrap();
        let lenient =
            reconstruction_check(&plan, &kb, &payload, MatchPolicy::TrailingLenient).unwrap();
        assert!(strict.matched);
        assert!(lenient.matched);
    }
}
