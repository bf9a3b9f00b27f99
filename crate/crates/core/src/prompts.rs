//! Versioned prompt templates and the structured inputs rendered into them.
//!
//! Templates live in `prompts/<role>.v1.txt`. Placeholders are written
//! `{{name}}`; every template has `{{input}}`, which receives the role's input
//! struct as pretty-printed JSON inside a fenced block. Rendering fails on a
//! placeholder without a value and on a value without a placeholder.

use std::collections::BTreeSet;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::llm::Role;
use crate::model::{
    AttributionKind, DecisionAttribution, EvaluationReport, Granularity, OutcomeKind, PatternKind, Priority, Step,
    Subtask, ThoughtCategory, TipCategory,
};

pub const TEMPLATE_VERSION: &str = "v1";

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TemplateError {
    #[error("template for {role} has no value for placeholder `{name}`")]
    MissingValue { role: Role, name: String },
    #[error("template for {role} has no placeholder `{name}`")]
    UnusedValue { role: Role, name: String },
}

pub fn template(role: Role) -> &'static str {
    match role {
        Role::ThoughtCategorizer => include_str!("../prompts/thought_categorizer.v1.txt"),
        Role::PatternDetector => include_str!("../prompts/pattern_detector.v1.txt"),
        Role::OutcomeInterpreter => include_str!("../prompts/outcome_interpreter.v1.txt"),
        Role::AttributionAnalyst => include_str!("../prompts/attribution_analyst.v1.txt"),
        Role::TipGenerator => include_str!("../prompts/tip_generator.v1.txt"),
        Role::Segmenter => include_str!("../prompts/segmenter.v1.txt"),
        Role::SubtaskTipper => include_str!("../prompts/subtask_tipper.v1.txt"),
        Role::Generalizer => include_str!("../prompts/generalizer.v1.txt"),
        Role::Consolidator => include_str!("../prompts/consolidator.v1.txt"),
        Role::RetrievalSelector => include_str!("../prompts/retrieval_selector.v1.txt"),
    }
}

/// Placeholder names in order of first appearance.
pub fn placeholders(text: &str) -> Vec<String> {
    let mut seen = BTreeSet::new();
    let mut out = Vec::new();
    let mut rest = text;
    while let Some(start) = rest.find("{{") {
        let Some(len) = rest[start + 2..].find("}}") else { break };
        let name = &rest[start + 2..start + 2 + len];
        if seen.insert(name.to_owned()) {
            out.push(name.to_owned());
        }
        rest = &rest[start + 2 + len + 2..];
    }
    out
}

pub fn render_template(role: Role, values: &[(&str, String)]) -> Result<String, TemplateError> {
    let text = template(role);
    let names = placeholders(text);
    for (name, _) in values {
        if !names.iter().any(|n| n == name) {
            return Err(TemplateError::UnusedValue { role, name: (*name).to_owned() });
        }
    }
    let mut out = text.to_owned();
    for name in names {
        let value = values
            .iter()
            .find(|(n, _)| *n == name)
            .map(|(_, v)| v.as_str())
            .ok_or_else(|| TemplateError::MissingValue { role, name: name.clone() })?;
        out = out.replace(&format!("{{{{{name}}}}}"), value);
    }
    Ok(out)
}

/// Renders `role`'s template with `input` as the `{{input}}` JSON block plus `extra` values.
pub fn render<T: Serialize>(role: Role, input: &T, extra: &[(&str, String)]) -> String {
    let json = serde_json::to_string_pretty(input).expect("prompt input serializes");
    let mut values: Vec<(&str, String)> = vec![("input", json)];
    values.extend(extra.iter().cloned());
    render_template(role, &values).expect("built-in templates match their inputs")
}

/// Recovers the structured input from a rendered prompt (the last fenced JSON block).
pub fn extract_input<T: DeserializeOwned>(prompt: &str) -> Option<T> {
    let start = prompt.rfind("```json\n")? + "```json\n".len();
    let end = start + prompt[start..].find("\n```")?;
    serde_json::from_str(&prompt[start..end]).ok()
}

// ---------------------------------------------------------------------------
// Per-role inputs
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepView {
    pub index: usize,
    pub response: String,
    #[serde(default)]
    pub action: Option<String>,
    #[serde(default)]
    pub action_result: Option<String>,
}

impl From<&Step> for StepView {
    fn from(s: &Step) -> Self {
        StepView {
            index: s.index,
            response: s.response.clone(),
            action: s.action.as_ref().map(|a| a.signature()),
            action_result: s.action_result.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategorizerInput {
    pub trajectory_id: String,
    pub step_index: usize,
    pub segments: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThoughtView {
    pub step_index: usize,
    pub category: ThoughtCategory,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatternInput {
    pub trajectory_id: String,
    pub task_description: String,
    pub thoughts: Vec<ThoughtView>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatternView {
    pub step_index: usize,
    pub kind: PatternKind,
    pub evidence: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProposedOutcome {
    pub kind: OutcomeKind,
    pub rationale: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutcomeInput {
    pub trajectory_id: String,
    pub task_description: String,
    pub proposed: ProposedOutcome,
    pub patterns: Vec<PatternView>,
    pub final_response: String,
    #[serde(default)]
    pub evaluation_report: Option<EvaluationReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndicatorView {
    pub kind: AttributionKind,
    /// Step where the outcome shows.
    pub step_index: usize,
    pub start_step: usize,
    pub end_step: usize,
    pub summary: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributionInput {
    pub trajectory_id: String,
    pub task_description: String,
    pub outcome: OutcomeKind,
    pub indicator: IndicatorView,
    pub steps: Vec<StepView>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TipGenInput {
    pub trajectory_id: String,
    pub task_description: String,
    pub task_intent: String,
    pub category: TipCategory,
    /// Position of the attribution within the trajectory's attribution list.
    pub attribution_index: usize,
    pub attribution: DecisionAttribution,
    pub app_hints: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmenterInput {
    pub trajectory_id: String,
    pub task_description: String,
    pub steps: Vec<StepView>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubtaskTipperInput {
    pub trajectory_id: String,
    pub subtask_index: usize,
    pub subtask: Subtask,
    pub steps: Vec<StepView>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneralizerInput {
    pub description: String,
    /// Post-check findings from a previous attempt; empty on the first attempt.
    #[serde(default)]
    pub violations: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemberView {
    pub id: String,
    pub category: TipCategory,
    pub priority: Priority,
    pub content: String,
    pub purpose: String,
    pub steps: Vec<String>,
    pub trigger: String,
    #[serde(default)]
    pub negative_example: Option<String>,
    #[serde(default)]
    pub application_context: Option<String>,
    #[serde(default)]
    pub task_category: Option<String>,
    pub index_description: String,
    pub source_outcome: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConsolidatorInput {
    pub granularity: Granularity,
    pub members: Vec<MemberView>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectorInput {
    pub task_description: String,
    pub known_applications: Vec<String>,
    pub known_task_categories: Vec<String>,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_template_has_input_placeholder() {
        for role in Role::ALL {
            let names = placeholders(template(role));
            assert!(names.contains(&"input".to_owned()), "{role}");
        }
    }

    #[test]
    fn render_checks_placeholders() {
        let err = render_template(Role::Segmenter, &[]).unwrap_err();
        assert_eq!(err, TemplateError::MissingValue { role: Role::Segmenter, name: "input".into() });
        let err = render_template(Role::Segmenter, &[("input", "{}".into()), ("bogus", "x".into())]).unwrap_err();
        assert!(matches!(err, TemplateError::UnusedValue { .. }));
    }

    #[test]
    fn input_round_trips_through_prompt() {
        let input = GeneralizerInput { description: "Fetch Phone app password from supervisor".into(), violations: vec![] };
        let prompt = render(Role::Generalizer, &input, &[("violations", String::new())]);
        assert!(!prompt.contains("{{"));
        let back: GeneralizerInput = extract_input(&prompt).unwrap();
        assert_eq!(back, input);
    }

    #[test]
    fn placeholder_scan_dedups() {
        assert_eq!(placeholders("{{a}} {{b}} {{a}}"), vec!["a".to_owned(), "b".to_owned()]);
    }
}
