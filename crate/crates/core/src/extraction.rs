//! Trajectory analysis and tip extraction.
//!
//! The stages run in order for one trajectory:
//! [`Extractor::extract_intelligence`] builds an [`IntermediateRepresentation`],
//! [`Extractor::attribute_decisions`] traces each outcome indicator back to
//! causal steps, [`Extractor::generate_task_tips`] turns attributions into
//! task-level tips, and [`Extractor::segment_subtasks`] plus
//! [`Extractor::generate_subtask_tips`] produce subtask-level tips.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clock::Clock;
use crate::embed::{EmbedError, Embedder};
use crate::llm::{Gateway, GatewayError, Role};
use crate::model::{
    derived_id, ActionRecord, AttributionKind, CausalNode, CognitivePattern, DecisionAttribution, Granularity,
    OutcomeClassification, OutcomeKind, OutcomeSource, PatternKind, Priority, StepRange, Subtask, Thought,
    TipCategory, Tip, Trajectory,
};
use crate::prompts::{
    self, AttributionInput, CategorizerInput, IndicatorView, OutcomeInput, PatternInput, PatternView,
    ProposedOutcome, SegmenterInput, StepView, SubtaskTipperInput, ThoughtView, TipGenInput,
};
use crate::schema::{
    AttributionPayload, CategorizerPayload, IndicatorDiagnosis, OutcomePayload, PatternPayload, SegmentationPayload,
    SubtaskTipsPayload, TipGenPayload, TipText,
};

/// Tips requested per subtask.
pub const MIN_SUBTASK_TIPS: usize = 2;
pub const MAX_SUBTASK_TIPS: usize = 4;
/// Minimum length of a repeated-action run.
pub const MIN_REPEAT_RUN: usize = 3;

pub const NO_COMPLETION_RATIONALE: &str = "no completion signal";

#[derive(Debug, Error)]
pub enum ExtractionError {
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Embed(#[from] EmbedError),
    #[error("{role} payload references step {step} but the trajectory has {step_count} steps")]
    StepOutOfRange { role: Role, step: usize, step_count: usize },
    #[error("no outcome indicators found for a {0} trajectory")]
    NoIndicators(&'static str),
    #[error("intermediate representation belongs to `{ir}`, not `{trajectory}`")]
    TrajectoryMismatch { ir: String, trajectory: String },
}

/// A detected pattern together with the step it was found in.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepPattern {
    pub step_index: usize,
    #[serde(flatten)]
    pub pattern: CognitivePattern,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SuccessKind {
    Clean,
    Inefficient,
    Recovery,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuccessAnalysis {
    pub kind: SuccessKind,
    pub evidence: Vec<CausalNode>,
}

/// Run of at least [`MIN_REPEAT_RUN`] consecutive actions with the same
/// operation name whose arguments vary in at most one key.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RepeatedRun {
    pub name: String,
    pub steps: Vec<usize>,
    #[serde(default)]
    pub varying_key: Option<String>,
}

impl RepeatedRun {
    pub fn range(&self) -> StepRange {
        StepRange { start: self.steps[0], end: *self.steps.last().unwrap() }
    }
}

/// Structured view of one trajectory produced by intelligence extraction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntermediateRepresentation {
    pub trajectory_id: String,
    pub thoughts_by_step: BTreeMap<usize, Vec<Thought>>,
    pub patterns: Vec<StepPattern>,
    pub outcome: OutcomeClassification,
    #[serde(default)]
    pub success_analysis: Option<SuccessAnalysis>,
    #[serde(default)]
    pub evaluation_intelligence: Option<Vec<IndicatorDiagnosis>>,
    pub task_intent: String,
    pub step_count: usize,
    #[serde(default)]
    pub repeated_runs: Vec<RepeatedRun>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

impl IntermediateRepresentation {
    fn patterns_of(&self, kind: PatternKind) -> impl Iterator<Item = &StepPattern> {
        self.patterns.iter().filter(move |p| p.pattern.kind == kind)
    }
}

/// Result of subtask segmentation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Segmentation {
    pub subtasks: Vec<Subtask>,
    /// Set when the model returned no usable subtask and the fallback was used.
    pub degenerate: bool,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SubtaskTips {
    pub tips: Vec<Tip>,
    pub warnings: Vec<String>,
}

// ---------------------------------------------------------------------------
// Deterministic helpers
// ---------------------------------------------------------------------------

const MARKERS: &[&str] = &[
    "thought:",
    "thoughts:",
    "plan:",
    "reasoning:",
    "reflection:",
    "validation:",
    "analysis:",
    "observation:",
];
const SKIPPED_MARKERS: &[&str] = &["action:", "action input:", "code:"];

fn strip_marker<'a>(line: &'a str, markers: &[&str]) -> Option<&'a str> {
    let lower = line.to_ascii_lowercase();
    markers
        .iter()
        .find(|m| lower.starts_with(*m))
        .map(|m| line[m.len()..].trim_start())
}

fn split_sentences(text: &str, out: &mut Vec<String>) {
    let chars: Vec<(usize, char)> = text.char_indices().collect();
    let mut start = 0;
    for (i, &(pos, c)) in chars.iter().enumerate() {
        if matches!(c, '.' | '!' | '?') {
            let next = chars.get(i + 1).map(|&(_, n)| n);
            if next.is_none_or(char::is_whitespace) {
                let end = pos + c.len_utf8();
                let seg = text[start..end].trim();
                if !seg.is_empty() {
                    out.push(seg.to_owned());
                }
                start = end;
            }
        }
    }
    let tail = text[start..].trim();
    if !tail.is_empty() {
        out.push(tail.to_owned());
    }
}

/// Splits a step response into thought segments.
///
/// Lines introduced by a reasoning marker (`Thought:`, `Plan:`, ...) start a
/// new segment with the marker removed; action lines and fenced code blocks
/// are skipped; remaining text is split at sentence punctuation followed by
/// whitespace or end of text.
pub fn tokenize_thoughts(response: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut block = String::new();
    let mut in_fence = false;
    let mut skipping_action = false;
    let flush = |block: &mut String, out: &mut Vec<String>| {
        split_sentences(block, out);
        block.clear();
    };
    for line in response.lines() {
        let trimmed = line.trim();
        if trimmed.starts_with("```") {
            in_fence = !in_fence;
            flush(&mut block, &mut out);
            continue;
        }
        if in_fence {
            continue;
        }
        if strip_marker(trimmed, SKIPPED_MARKERS).is_some() {
            flush(&mut block, &mut out);
            skipping_action = true;
            continue;
        }
        if let Some(rest) = strip_marker(trimmed, MARKERS) {
            flush(&mut block, &mut out);
            skipping_action = false;
            block.push_str(rest);
            continue;
        }
        if trimmed.is_empty() {
            flush(&mut block, &mut out);
            skipping_action = false;
            continue;
        }
        if skipping_action {
            continue;
        }
        if !block.is_empty() {
            block.push(' ');
        }
        block.push_str(trimmed);
    }
    flush(&mut block, &mut out);
    out
}

/// Keys whose values differ between two argument maps with the same key set,
/// or `None` when the key sets differ.
fn differing_keys(a: &ActionRecord, b: &ActionRecord) -> Option<BTreeSet<String>> {
    if a.arguments.keys().ne(b.arguments.keys()) {
        return None;
    }
    Some(a.arguments.iter().filter(|(k, v)| b.arguments[*k] != **v).map(|(k, _)| k.clone()).collect())
}

/// Finds maximal repeated-action runs over the sequence of steps that carry an action.
pub fn detect_repeated_actions(t: &Trajectory) -> Vec<RepeatedRun> {
    let actions: Vec<(usize, &ActionRecord)> =
        t.steps.iter().filter_map(|s| s.action.as_ref().map(|a| (s.index, a))).collect();
    let mut runs = Vec::new();
    let mut i = 0;
    while i < actions.len() {
        let (_, first) = actions[i];
        let mut varying: BTreeSet<String> = BTreeSet::new();
        let mut j = i + 1;
        while j < actions.len() {
            let (_, next) = actions[j];
            if next.name != first.name {
                break;
            }
            let Some(diff) = differing_keys(first, next) else { break };
            let mut merged = varying.clone();
            merged.extend(diff);
            if merged.len() > 1 {
                break;
            }
            varying = merged;
            j += 1;
        }
        if j - i >= MIN_REPEAT_RUN {
            runs.push(RepeatedRun {
                name: first.name.clone(),
                steps: actions[i..j].iter().map(|(s, _)| *s).collect(),
                varying_key: varying.into_iter().next(),
            });
            i = j;
        } else {
            i += 1;
        }
    }
    runs
}

const COMPLETION_PHRASES: &[&str] = &[
    "task complete",
    "task is complete",
    "task has been completed",
    "completed the task",
    "successfully completed",
    "task is done",
    "all done",
];

const ERROR_PHRASES: &[&str] = &["error", "failed", "failure", "exception", "invalid", "denied", "not found", "bad request"];

/// The final step reports completion, either through a completion action or
/// a completion statement.
pub fn has_completion_signal(t: &Trajectory) -> bool {
    let Some(last) = t.steps.last() else { return false };
    if last.action.as_ref().is_some_and(|a| a.name.to_ascii_lowercase().contains("complete_task")) {
        return true;
    }
    let lower = last.response.to_lowercase();
    COMPLETION_PHRASES.iter().any(|p| lower.contains(p))
}

pub fn is_error_result(result: &str) -> bool {
    let lower = result.to_lowercase();
    ERROR_PHRASES.iter().any(|p| lower.contains(p))
}

/// Pairs each error recognition with the first later self-correction, greedily.
fn recovery_pairs(ir_patterns: &[StepPattern]) -> Vec<(usize, usize)> {
    let errors: Vec<usize> =
        ir_patterns.iter().filter(|p| p.pattern.kind == PatternKind::ErrorRecognition).map(|p| p.step_index).collect();
    let fixes: Vec<usize> =
        ir_patterns.iter().filter(|p| p.pattern.kind == PatternKind::SelfCorrection).map(|p| p.step_index).collect();
    let mut pairs = Vec::new();
    let mut after = None;
    for e in errors {
        if after.is_some_and(|a| e <= a) {
            continue;
        }
        if let Some(&f) = fixes.iter().find(|&&f| f > e) {
            pairs.push((e, f));
            after = Some(f);
        }
    }
    pairs
}

/// Ordered outcome rule over detected patterns and repetition.
///
/// With `passed` given (ground truth), only the success sub-kind is inferred.
pub fn infer_outcome(
    patterns: &[StepPattern],
    runs: &[RepeatedRun],
    completed: bool,
    passed: Option<bool>,
) -> (OutcomeKind, String, bool) {
    let has = |k: PatternKind| patterns.iter().any(|p| p.pattern.kind == k);
    let recovered = !recovery_pairs(patterns).is_empty();
    let inefficient = has(PatternKind::EfficiencyAwareness) || !runs.is_empty();
    let errors = has(PatternKind::ErrorRecognition);

    if let Some(passed) = passed {
        if !passed {
            return (OutcomeKind::Failure, "evaluation report failed".into(), false);
        }
        return if recovered {
            (OutcomeKind::RecoverySuccess, "evaluation passed after a recognized and corrected error".into(), false)
        } else if inefficient {
            (OutcomeKind::InefficientSuccess, "evaluation passed with repeated or avoidable operations".into(), false)
        } else {
            (OutcomeKind::CleanSuccess, "evaluation passed".into(), false)
        };
    }

    if recovered && completed {
        (OutcomeKind::RecoverySuccess, "error recognized, then corrected, then completed".into(), false)
    } else if inefficient && completed {
        (OutcomeKind::InefficientSuccess, "completed with repeated or avoidable operations".into(), false)
    } else if completed && !errors {
        (OutcomeKind::CleanSuccess, "completed without error signals".into(), false)
    } else if !completed && patterns.is_empty() {
        (OutcomeKind::Failure, NO_COMPLETION_RATIONALE.into(), true)
    } else {
        (OutcomeKind::Failure, "no completion signal after detected error signals".into(), false)
    }
}

fn step_summary(t: &Trajectory, step: usize) -> String {
    let s = &t.steps[step];
    match (&s.action, &s.action_result) {
        (Some(a), Some(r)) => format!("{} -> {}", a.signature(), r),
        (Some(a), None) => a.signature(),
        _ => s.response.lines().next().unwrap_or_default().to_owned(),
    }
}

fn node(t: &Trajectory, step: usize) -> CausalNode {
    CausalNode { step_index: step, description: step_summary(t, step) }
}

/// Outcome indicators scanned from a representation.
pub fn detect_indicators(ir: &IntermediateRepresentation, t: &Trajectory) -> Vec<IndicatorView> {
    let last = ir.step_count.saturating_sub(1);
    let mut out = Vec::new();
    match ir.outcome.kind {
        OutcomeKind::Failure => {
            let step = t
                .steps
                .iter()
                .rev()
                .find(|s| s.action_result.as_deref().is_some_and(is_error_result))
                .map_or(last, |s| s.index);
            let failing: Vec<String> = t
                .evaluation_report
                .iter()
                .flat_map(|r| &r.indicators)
                .filter(|i| !i.passed)
                .map(|i| format!("{}: {}", i.name, i.message))
                .collect();
            let summary = if failing.is_empty() {
                format!("task not completed: {}", ir.outcome.rationale)
            } else {
                format!("failed evaluation: {}", failing.join("; "))
            };
            out.push(IndicatorView { kind: AttributionKind::Failure, step_index: step, start_step: 0, end_step: step, summary });
        }
        OutcomeKind::RecoverySuccess => {
            let pairs = recovery_pairs(&ir.patterns);
            for (e, f) in &pairs {
                out.push(IndicatorView {
                    kind: AttributionKind::Recovery,
                    step_index: *f,
                    start_step: *e,
                    end_step: *f,
                    summary: format!("error recognized at step {e}, corrected at step {f}"),
                });
            }
            if pairs.is_empty() {
                let e = t
                    .steps
                    .iter()
                    .find(|s| s.action_result.as_deref().is_some_and(is_error_result))
                    .map_or(0, |s| s.index);
                out.push(IndicatorView {
                    kind: AttributionKind::Recovery,
                    step_index: last,
                    start_step: e,
                    end_step: last,
                    summary: format!("failure at step {e} followed by successful completion"),
                });
            }
        }
        OutcomeKind::InefficientSuccess => {
            for run in &ir.repeated_runs {
                let r = run.range();
                let key = run.varying_key.as_deref().map(|k| format!(" varying `{k}`")).unwrap_or_default();
                out.push(IndicatorView {
                    kind: AttributionKind::Inefficiency,
                    step_index: r.end,
                    start_step: r.start,
                    end_step: r.end,
                    summary: format!("{} repeated {} times{key}", run.name, run.steps.len()),
                });
            }
            for p in ir.patterns_of(PatternKind::EfficiencyAwareness) {
                if ir.repeated_runs.iter().any(|r| r.range().contains(p.step_index)) {
                    continue;
                }
                out.push(IndicatorView {
                    kind: AttributionKind::Inefficiency,
                    step_index: p.step_index,
                    start_step: p.step_index,
                    end_step: p.step_index,
                    summary: format!("efficiency concern: {}", p.pattern.evidence),
                });
            }
            if out.is_empty() {
                out.push(IndicatorView {
                    kind: AttributionKind::Inefficiency,
                    step_index: last,
                    start_step: 0,
                    end_step: last,
                    summary: "completed suboptimally".into(),
                });
            }
        }
        OutcomeKind::CleanSuccess => {
            let checks = ir.patterns_of(PatternKind::Validation).count();
            out.push(IndicatorView {
                kind: AttributionKind::SuccessPattern,
                step_index: last,
                start_step: 0,
                end_step: last,
                summary: format!("clean completion with {checks} validation check(s)"),
            });
        }
    }
    out
}

/// Clips proposed ranges to sorted, disjoint ranges within `[0, step_count)`.
/// Returns the kept `(proposal index, range)` pairs and warnings.
pub fn clip_ranges(proposed: &[(usize, usize)], step_count: usize) -> (Vec<(usize, StepRange)>, Vec<String>) {
    let mut warnings = Vec::new();
    let mut ranges: Vec<(usize, StepRange)> = Vec::new();
    for (i, &(start, end)) in proposed.iter().enumerate() {
        if step_count == 0 || start >= step_count || start > end {
            warnings.push(format!("subtask {i}: range [{start}, {end}] is invalid for {step_count} steps; dropped"));
            continue;
        }
        let clamped = end.min(step_count - 1);
        if clamped != end {
            warnings.push(format!("subtask {i}: end {end} clamped to {clamped}"));
        }
        ranges.push((i, StepRange { start, end: clamped }));
    }
    ranges.sort_by_key(|(i, r)| (r.start, r.end, *i));
    let mut kept: Vec<(usize, StepRange)> = Vec::new();
    for (i, mut r) in ranges {
        if let Some((_, prev)) = kept.last() {
            if r.start <= prev.end {
                let start = prev.end + 1;
                if start > r.end {
                    warnings.push(format!("subtask {i}: range [{}, {}] lies inside the previous subtask; dropped", r.start, r.end));
                    continue;
                }
                warnings.push(format!("subtask {i}: overlapping start {} clipped to {start}", r.start));
                r.start = start;
            }
        }
        kept.push((i, r));
    }
    (kept, warnings)
}

fn normalize_context(ctx: Option<String>) -> Option<String> {
    ctx.map(|c| c.trim().to_lowercase()).filter(|c| !c.is_empty())
}

fn task_tip_priority(kind: AttributionKind, outcome: OutcomeKind, prerequisite_critical: bool) -> Priority {
    match kind {
        AttributionKind::Failure if outcome == OutcomeKind::Failure => Priority::Critical,
        AttributionKind::Failure | AttributionKind::Recovery => Priority::High,
        AttributionKind::SuccessPattern if prerequisite_critical => Priority::High,
        AttributionKind::SuccessPattern | AttributionKind::Inefficiency => Priority::Medium,
    }
}

fn default_subtask_priority(category: TipCategory) -> Priority {
    match category {
        TipCategory::Recovery => Priority::High,
        TipCategory::Strategy | TipCategory::Optimization => Priority::Medium,
    }
}

// ---------------------------------------------------------------------------
// Model-backed stages
// ---------------------------------------------------------------------------

/// Runs extraction stages against a gateway, embedder and clock.
pub struct Extractor<'a> {
    pub gateway: &'a Gateway,
    pub embedder: &'a dyn Embedder,
    pub clock: &'a dyn Clock,
}

impl<'a> Extractor<'a> {
    pub fn new(gateway: &'a Gateway, embedder: &'a dyn Embedder, clock: &'a dyn Clock) -> Self {
        Extractor { gateway, embedder, clock }
    }

    pub fn extract_intelligence(&self, t: &Trajectory) -> Result<IntermediateRepresentation, ExtractionError> {
        let n = t.steps.len();
        let mut warnings = Vec::new();

        let mut thoughts_by_step: BTreeMap<usize, Vec<Thought>> = BTreeMap::new();
        for step in &t.steps {
            let segments = tokenize_thoughts(&step.response);
            if segments.is_empty() {
                thoughts_by_step.insert(step.index, Vec::new());
                continue;
            }
            let input = CategorizerInput { trajectory_id: t.id.clone(), step_index: step.index, segments };
            let prompt = prompts::render(Role::ThoughtCategorizer, &input, &[]);
            let payload: CategorizerPayload = self.gateway.call(Role::ThoughtCategorizer, &prompt)?;
            if payload.categories.len() != input.segments.len() {
                warnings.push(format!(
                    "step {}: categorizer returned {} categories for {} segments",
                    step.index,
                    payload.categories.len(),
                    input.segments.len()
                ));
            }
            let thoughts = input
                .segments
                .into_iter()
                .zip(payload.categories)
                .map(|(text, category)| Thought { text, category, patterns: Vec::new() })
                .collect();
            thoughts_by_step.insert(step.index, thoughts);
        }

        let views: Vec<ThoughtView> = thoughts_by_step
            .iter()
            .flat_map(|(i, ts)| ts.iter().map(|th| ThoughtView { step_index: *i, category: th.category, text: th.text.clone() }))
            .collect();
        let input = PatternInput { trajectory_id: t.id.clone(), task_description: t.task_description.clone(), thoughts: views };
        let prompt = prompts::render(Role::PatternDetector, &input, &[]);
        let payload: PatternPayload = self.gateway.call(Role::PatternDetector, &prompt)?;
        let mut patterns = Vec::new();
        for p in payload.patterns {
            if p.step_index >= n || !t.steps[p.step_index].response.contains(&p.evidence) {
                warnings.push(format!(
                    "dropped {} pattern at step {}: evidence is not a span of that step's response",
                    p.kind.as_str(),
                    p.step_index
                ));
                continue;
            }
            let pattern = CognitivePattern { kind: p.kind, confidence: p.confidence, evidence: p.evidence };
            if let Some(thoughts) = thoughts_by_step.get_mut(&p.step_index) {
                let host = thoughts
                    .iter()
                    .position(|th| th.text.contains(&pattern.evidence) || pattern.evidence.contains(&th.text))
                    .unwrap_or(0);
                if let Some(th) = thoughts.get_mut(host) {
                    th.patterns.push(pattern.clone());
                }
            }
            patterns.push(StepPattern { step_index: p.step_index, pattern });
        }
        patterns.sort_by_key(|p| p.step_index);

        let repeated_runs = detect_repeated_actions(t);
        let completed = has_completion_signal(t);
        let passed = t.evaluation_report.as_ref().map(|r| r.passed);
        let (kind, rationale, low_confidence) = infer_outcome(&patterns, &repeated_runs, completed, passed);
        let source = if passed.is_some() { OutcomeSource::GroundTruth } else { OutcomeSource::Inferred };

        let input = OutcomeInput {
            trajectory_id: t.id.clone(),
            task_description: t.task_description.clone(),
            proposed: ProposedOutcome { kind, rationale: rationale.clone() },
            patterns: patterns
                .iter()
                .map(|p| PatternView { step_index: p.step_index, kind: p.pattern.kind, evidence: p.pattern.evidence.clone() })
                .collect(),
            final_response: t.steps[n - 1].response.clone(),
            evaluation_report: t.evaluation_report.clone(),
        };
        let prompt = prompts::render(Role::OutcomeInterpreter, &input, &[]);
        let payload: OutcomePayload = self.gateway.call(Role::OutcomeInterpreter, &prompt)?;

        let mut outcome = OutcomeClassification { kind, source, rationale, low_confidence };
        if let Some(over) = payload.kind {
            if passed.is_some_and(|p| p != over.is_success()) {
                warnings.push(format!("ignored interpreter outcome {} contradicting the evaluation report", over.as_str()));
            } else if over != kind {
                outcome.kind = over;
                outcome.rationale = payload.rationale.clone().unwrap_or_else(|| format!("interpreter override of {}", kind.as_str()));
                outcome.low_confidence = false;
            }
        }
        if outcome.low_confidence {
            warnings.push("outcome could not be classified from any signal; recorded as low-confidence failure".into());
        }

        let evaluation_intelligence = t.evaluation_report.as_ref().map(|r| {
            if payload.diagnoses.is_empty() {
                r.indicators
                    .iter()
                    .map(|i| IndicatorDiagnosis { indicator: i.name.clone(), diagnosis: i.message.clone() })
                    .collect()
            } else {
                payload.diagnoses.clone()
            }
        });

        let success_analysis = match outcome.kind {
            OutcomeKind::Failure => None,
            OutcomeKind::RecoverySuccess => Some(SuccessAnalysis {
                kind: SuccessKind::Recovery,
                evidence: recovery_pairs(&patterns).iter().flat_map(|(e, f)| [node(t, *e), node(t, *f)]).collect(),
            }),
            OutcomeKind::InefficientSuccess => Some(SuccessAnalysis {
                kind: SuccessKind::Inefficient,
                evidence: repeated_runs.iter().flat_map(|r| r.steps.iter().map(|s| node(t, *s))).collect(),
            }),
            OutcomeKind::CleanSuccess => {
                let mut evidence: Vec<CausalNode> = patterns
                    .iter()
                    .filter(|p| p.pattern.kind == PatternKind::Validation)
                    .map(|p| CausalNode { step_index: p.step_index, description: p.pattern.evidence.clone() })
                    .collect();
                if evidence.is_empty() {
                    evidence.push(node(t, n - 1));
                }
                Some(SuccessAnalysis { kind: SuccessKind::Clean, evidence })
            }
        };

        Ok(IntermediateRepresentation {
            trajectory_id: t.id.clone(),
            thoughts_by_step,
            patterns,
            outcome,
            success_analysis,
            evaluation_intelligence,
            task_intent: payload.task_intent,
            step_count: n,
            repeated_runs,
            warnings,
        })
    }

    pub fn attribute_decisions(
        &self,
        ir: &IntermediateRepresentation,
        t: &Trajectory,
    ) -> Result<Vec<DecisionAttribution>, ExtractionError> {
        if ir.trajectory_id != t.id {
            return Err(ExtractionError::TrajectoryMismatch { ir: ir.trajectory_id.clone(), trajectory: t.id.clone() });
        }
        let indicators = detect_indicators(ir, t);
        if indicators.is_empty() && ir.outcome.kind != OutcomeKind::CleanSuccess {
            return Err(ExtractionError::NoIndicators(ir.outcome.kind.as_str()));
        }
        let steps: Vec<StepView> = t.steps.iter().map(StepView::from).collect();
        let mut out = Vec::with_capacity(indicators.len());
        for indicator in indicators {
            let kind = indicator.kind;
            let input = AttributionInput {
                trajectory_id: t.id.clone(),
                task_description: t.task_description.clone(),
                outcome: ir.outcome.kind,
                indicator,
                steps: steps.clone(),
            };
            let prompt = prompts::render(Role::AttributionAnalyst, &input, &[("indicator_kind", kind.as_str().to_owned())]);
            let p: AttributionPayload = self.gateway.call(Role::AttributionAnalyst, &prompt)?;

            let proximate = p.proximate_cause.filter(|px| {
                p.immediate_cause.step_index != p.root_cause.step_index
                    && px.step_index != p.immediate_cause.step_index
                    && px.step_index != p.root_cause.step_index
            });
            let attribution = DecisionAttribution {
                outcome_kind: kind,
                immediate_cause: p.immediate_cause,
                proximate_cause: proximate,
                root_cause: p.root_cause,
                contributing_factors: p.contributing_factors,
                improvement_steps: p.improvement_steps.into_iter().map(|s| s.trim().to_owned()).collect(),
                prerequisite_critical: p.prerequisite_critical,
            };
            if let Some(bad) = attribution.causal_nodes().find(|c| c.step_index >= t.steps.len()) {
                return Err(ExtractionError::StepOutOfRange {
                    role: Role::AttributionAnalyst,
                    step: bad.step_index,
                    step_count: t.steps.len(),
                });
            }
            out.push(attribution);
        }
        Ok(out)
    }

    pub fn generate_task_tips(
        &self,
        ir: &IntermediateRepresentation,
        t: &Trajectory,
        attributions: &[DecisionAttribution],
    ) -> Result<Vec<Tip>, ExtractionError> {
        if attributions.is_empty() {
            return Ok(Vec::new());
        }
        let embedding = self.embedder.embed(&t.task_description)?;
        let created_at = self.clock.now();
        let app_hints: Vec<String> = t.app_hints.iter().flatten().cloned().collect();
        let mut tips = Vec::new();
        for (index, attribution) in attributions.iter().enumerate() {
            let category = attribution.outcome_kind.tip_category();
            let input = TipGenInput {
                trajectory_id: t.id.clone(),
                task_description: t.task_description.clone(),
                task_intent: ir.task_intent.clone(),
                category,
                attribution_index: index,
                attribution: attribution.clone(),
                app_hints: app_hints.clone(),
            };
            let prompt = prompts::render(Role::TipGenerator, &input, &[("category", category.as_str().to_owned())]);
            let payload: TipGenPayload = self.gateway.call(Role::TipGenerator, &prompt)?;
            let priority = task_tip_priority(attribution.outcome_kind, ir.outcome.kind, attribution.prerequisite_critical);

            for (ordinal, generated) in payload.tips.into_iter().enumerate() {
                let make = |text: TipText, variant: &str, context: Option<String>, task_category: Option<String>| Tip {
                    id: derived_id(&["tip", &t.id, "task", &index.to_string(), &ordinal.to_string(), variant]),
                    category,
                    content: text.content,
                    purpose: text.purpose,
                    steps: text.steps,
                    trigger: text.trigger,
                    negative_example: text.negative_example.filter(|s| !s.trim().is_empty()),
                    application_context: context,
                    task_category,
                    priority,
                    granularity: Granularity::Task,
                    subtask_description: None,
                    generalized_description: None,
                    index_description: t.task_description.clone(),
                    source_trajectory_ids: vec![t.id.clone()],
                    source_outcome: ir.outcome.kind.as_str().to_owned(),
                    embedding: embedding.clone(),
                    created_at,
                };
                let context = normalize_context(generated.application_context);
                let task_category = normalize_context(generated.task_category);
                tips.push(make(generated.text, "specific", context, task_category));
                if generated.generalizable {
                    if let Some(generic) = generated.generic_variant {
                        tips.push(make(generic, "generic", None, None));
                    }
                }
            }
        }
        Ok(tips)
    }

    pub fn segment_subtasks(&self, t: &Trajectory) -> Result<Segmentation, ExtractionError> {
        let n = t.steps.len();
        let input = SegmenterInput {
            trajectory_id: t.id.clone(),
            task_description: t.task_description.clone(),
            steps: t.steps.iter().map(StepView::from).collect(),
        };
        let prompt = prompts::render(Role::Segmenter, &input, &[]);
        let payload: SegmentationPayload = self.gateway.call(Role::Segmenter, &prompt)?;

        let proposed: Vec<(usize, usize)> = payload.subtasks.iter().map(|s| (s.start_step, s.end_step)).collect();
        let (kept, mut warnings) = clip_ranges(&proposed, n);
        let mut subtasks: Vec<Subtask> = kept
            .into_iter()
            .map(|(i, range)| {
                let s = &payload.subtasks[i];
                Subtask {
                    description: s.description.trim().to_owned(),
                    generalized: false,
                    apps: s.apps.iter().map(|a| a.trim().to_lowercase()).filter(|a| !a.is_empty()).collect(),
                    step_range: range,
                    purpose: s.purpose.trim().to_owned(),
                }
            })
            .collect();

        let degenerate = subtasks.is_empty();
        if degenerate {
            warnings.push(format!(
                "segmentation returned no usable subtasks ({} proposed); using one subtask spanning all steps",
                payload.subtasks.len()
            ));
            let apps = t.app_hints.iter().flatten().map(|a| a.to_lowercase()).collect();
            subtasks.push(Subtask {
                description: "Complete the task".into(),
                generalized: false,
                apps,
                step_range: StepRange { start: 0, end: n - 1 },
                purpose: "Carry out the full task end to end".into(),
            });
        }
        for w in &warnings {
            tracing::warn!(trajectory = %t.id, "{w}");
        }
        Ok(Segmentation { subtasks, degenerate, warnings })
    }

    pub fn generate_subtask_tips(
        &self,
        t: &Trajectory,
        subtasks: &[Subtask],
        outcome: OutcomeKind,
    ) -> Result<SubtaskTips, ExtractionError> {
        let created_at = self.clock.now();
        let mut tips = Vec::new();
        let mut warnings = Vec::new();
        for (index, subtask) in subtasks.iter().enumerate() {
            let r = subtask.step_range;
            if r.end >= t.steps.len() {
                return Err(ExtractionError::StepOutOfRange { role: Role::SubtaskTipper, step: r.end, step_count: t.steps.len() });
            }
            let input = SubtaskTipperInput {
                trajectory_id: t.id.clone(),
                subtask_index: index,
                subtask: subtask.clone(),
                steps: t.steps[r.start..=r.end].iter().map(StepView::from).collect(),
            };
            let prompt = prompts::render(
                Role::SubtaskTipper,
                &input,
                &[("min_tips", MIN_SUBTASK_TIPS.to_string()), ("max_tips", MAX_SUBTASK_TIPS.to_string())],
            );
            let mut payload: SubtaskTipsPayload = self.gateway.call(Role::SubtaskTipper, &prompt)?;
            if payload.tips.len() > MAX_SUBTASK_TIPS {
                warnings.push(format!(
                    "subtask {index}: {} tips returned, keeping the first {MAX_SUBTASK_TIPS}",
                    payload.tips.len()
                ));
                payload.tips.truncate(MAX_SUBTASK_TIPS);
            }
            if payload.tips.is_empty() {
                continue;
            }
            let embedding = self.embedder.embed(&subtask.description)?;
            let context = if subtask.apps.len() == 1 { subtask.apps.iter().next().cloned() } else { None };
            for (ordinal, draft) in payload.tips.into_iter().enumerate() {
                tips.push(Tip {
                    id: derived_id(&["tip", &t.id, "subtask", &index.to_string(), &ordinal.to_string()]),
                    category: draft.category,
                    content: draft.text.content,
                    purpose: draft.text.purpose,
                    steps: draft.text.steps,
                    trigger: draft.text.trigger,
                    negative_example: draft.text.negative_example.filter(|s| !s.trim().is_empty()),
                    application_context: context.clone(),
                    task_category: normalize_context(draft.task_category),
                    priority: draft.priority.unwrap_or_else(|| default_subtask_priority(draft.category)),
                    granularity: Granularity::Subtask,
                    subtask_description: Some(subtask.description.clone()),
                    generalized_description: None,
                    index_description: subtask.description.clone(),
                    source_trajectory_ids: vec![t.id.clone()],
                    source_outcome: outcome.as_str().to_owned(),
                    embedding: embedding.clone(),
                    created_at,
                });
            }
        }
        Ok(SubtaskTips { tips, warnings })
    }
}
