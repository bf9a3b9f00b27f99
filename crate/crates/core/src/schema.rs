//! Structured payloads returned by each model role, and the registry that
//! names their JSON Schemas.
//!
//! A payload is valid when it deserializes into the registered type and
//! passes that type's semantic [`PayloadCheck`].

use std::collections::BTreeMap;

use schemars::JsonSchema;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::model::{CausalNode, OutcomeKind, PatternKind, Priority, ThoughtCategory, TipCategory};

/// Semantic checks layered over structural deserialization.
pub trait PayloadCheck {
    fn check(&self) -> Result<(), String> {
        Ok(())
    }
}

fn non_empty(field: &str, s: &str) -> Result<(), String> {
    if s.trim().is_empty() {
        Err(format!("`{field}` must not be empty"))
    } else {
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct CategorizerPayload {
    /// One category per input segment, in input order.
    pub categories: Vec<ThoughtCategory>,
}

impl PayloadCheck for CategorizerPayload {}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct DetectedPattern {
    pub step_index: usize,
    pub kind: PatternKind,
    pub confidence: f64,
    pub evidence: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct PatternPayload {
    pub patterns: Vec<DetectedPattern>,
}

impl PayloadCheck for PatternPayload {
    fn check(&self) -> Result<(), String> {
        for p in &self.patterns {
            if !(0.0..=1.0).contains(&p.confidence) {
                return Err(format!("pattern confidence {} outside [0,1]", p.confidence));
            }
            non_empty("evidence", &p.evidence)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct IndicatorDiagnosis {
    pub indicator: String,
    pub diagnosis: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct OutcomePayload {
    pub task_intent: String,
    /// Optional override of the rule-based outcome.
    #[serde(default)]
    pub kind: Option<OutcomeKind>,
    #[serde(default)]
    pub rationale: Option<String>,
    #[serde(default)]
    pub diagnoses: Vec<IndicatorDiagnosis>,
}

impl PayloadCheck for OutcomePayload {
    fn check(&self) -> Result<(), String> {
        non_empty("task_intent", &self.task_intent)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct AttributionPayload {
    pub immediate_cause: CausalNode,
    #[serde(default)]
    pub proximate_cause: Option<CausalNode>,
    pub root_cause: CausalNode,
    #[serde(default)]
    pub contributing_factors: Vec<CausalNode>,
    #[serde(default)]
    pub improvement_steps: Vec<String>,
    #[serde(default)]
    pub prerequisite_critical: bool,
}

impl PayloadCheck for AttributionPayload {
    fn check(&self) -> Result<(), String> {
        for s in &self.improvement_steps {
            non_empty("improvement_steps[]", s)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct TipText {
    pub content: String,
    pub purpose: String,
    pub steps: Vec<String>,
    pub trigger: String,
    #[serde(default)]
    pub negative_example: Option<String>,
}

impl TipText {
    fn check(&self) -> Result<(), String> {
        non_empty("content", &self.content)?;
        non_empty("trigger", &self.trigger)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct GeneratedTip {
    #[serde(flatten)]
    pub text: TipText,
    #[serde(default)]
    pub application_context: Option<String>,
    #[serde(default)]
    pub task_category: Option<String>,
    /// When set, a generic (null-context) variant is emitted as well.
    #[serde(default)]
    pub generalizable: bool,
    #[serde(default)]
    pub generic_variant: Option<TipText>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct TipGenPayload {
    pub tips: Vec<GeneratedTip>,
}

impl PayloadCheck for TipGenPayload {
    fn check(&self) -> Result<(), String> {
        if self.tips.is_empty() {
            return Err("tips must not be empty".into());
        }
        for t in &self.tips {
            t.text.check()?;
            match (&t.generalizable, &t.generic_variant) {
                (true, None) => return Err("generalizable tip lacks generic_variant".into()),
                (_, Some(v)) => v.check()?,
                _ => {}
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct SegmentedSubtask {
    pub description: String,
    #[serde(default)]
    pub apps: Vec<String>,
    pub start_step: usize,
    pub end_step: usize,
    pub purpose: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct SegmentationPayload {
    pub subtasks: Vec<SegmentedSubtask>,
}

impl PayloadCheck for SegmentationPayload {
    fn check(&self) -> Result<(), String> {
        for s in &self.subtasks {
            non_empty("description", &s.description)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct SubtaskTipDraft {
    #[serde(flatten)]
    pub text: TipText,
    pub category: TipCategory,
    #[serde(default)]
    pub priority: Option<Priority>,
    #[serde(default)]
    pub task_category: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct SubtaskTipsPayload {
    pub tips: Vec<SubtaskTipDraft>,
}

impl PayloadCheck for SubtaskTipsPayload {
    fn check(&self) -> Result<(), String> {
        self.tips.iter().try_for_each(|t| t.text.check())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct GeneralizerPayload {
    pub generalized: String,
}

impl PayloadCheck for GeneralizerPayload {
    fn check(&self) -> Result<(), String> {
        non_empty("generalized", &self.generalized)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct MergedTipDraft {
    /// Ids of the member tips this merged tip synthesizes.
    pub merged_from: Vec<String>,
    pub category: TipCategory,
    pub priority: Priority,
    #[serde(flatten)]
    pub text: TipText,
    #[serde(default)]
    pub application_context: Option<String>,
    #[serde(default)]
    pub task_category: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct ConflictDraft {
    /// The two member tips giving contradictory guidance.
    pub tip_ids: Vec<String>,
    #[serde(default)]
    pub topic: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct ConsolidationPayload {
    pub canonical_description: String,
    pub merged_tips: Vec<MergedTipDraft>,
    #[serde(default)]
    pub conflicts: Vec<ConflictDraft>,
}

impl PayloadCheck for ConsolidationPayload {
    fn check(&self) -> Result<(), String> {
        non_empty("canonical_description", &self.canonical_description)?;
        if self.merged_tips.is_empty() {
            return Err("merged_tips must not be empty".into());
        }
        for m in &self.merged_tips {
            if m.merged_from.is_empty() {
                return Err("merged_from must not be empty".into());
            }
            m.text.check()?;
        }
        for c in &self.conflicts {
            if c.tip_ids.len() != 2 || c.tip_ids[0] == c.tip_ids[1] {
                return Err("a conflict names exactly two distinct tip ids".into());
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct SelectorPayload {
    #[serde(default)]
    pub application_context: Option<String>,
    #[serde(default)]
    pub task_category: Option<String>,
    #[serde(default)]
    pub preferred_categories: Vec<TipCategory>,
}

impl PayloadCheck for SelectorPayload {}

type Validator = fn(&serde_json::Value) -> Result<(), String>;

fn validate_as<T: DeserializeOwned + PayloadCheck>(v: &serde_json::Value) -> Result<(), String> {
    let parsed: T = serde_json::from_value(v.clone()).map_err(|e| e.to_string())?;
    parsed.check()
}

struct Entry {
    schema: serde_json::Value,
    validate: Validator,
}

/// Maps schema ids (`<role>.v1`) to a JSON Schema document and a validator.
pub struct SchemaRegistry {
    entries: BTreeMap<String, Entry>,
}

impl Default for SchemaRegistry {
    fn default() -> Self {
        Self::standard()
    }
}

impl SchemaRegistry {
    pub fn empty() -> Self {
        Self { entries: BTreeMap::new() }
    }

    pub fn register<T: DeserializeOwned + PayloadCheck + JsonSchema>(&mut self, id: &str) {
        let schema = serde_json::to_value(schemars::schema_for!(T)).expect("schema serializes");
        self.entries.insert(id.to_owned(), Entry { schema, validate: validate_as::<T> });
    }

    /// Every role's payload schema.
    pub fn standard() -> Self {
        use crate::llm::Role;
        let mut r = Self::empty();
        r.register::<CategorizerPayload>(Role::ThoughtCategorizer.schema_id());
        r.register::<PatternPayload>(Role::PatternDetector.schema_id());
        r.register::<OutcomePayload>(Role::OutcomeInterpreter.schema_id());
        r.register::<AttributionPayload>(Role::AttributionAnalyst.schema_id());
        r.register::<TipGenPayload>(Role::TipGenerator.schema_id());
        r.register::<SegmentationPayload>(Role::Segmenter.schema_id());
        r.register::<SubtaskTipsPayload>(Role::SubtaskTipper.schema_id());
        r.register::<GeneralizerPayload>(Role::Generalizer.schema_id());
        r.register::<ConsolidationPayload>(Role::Consolidator.schema_id());
        r.register::<SelectorPayload>(Role::RetrievalSelector.schema_id());
        r
    }

    pub fn contains(&self, id: &str) -> bool {
        self.entries.contains_key(id)
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn schema(&self, id: &str) -> Option<&serde_json::Value> {
        self.entries.get(id).map(|e| &e.schema)
    }

    /// `Err(None)` when the id is unknown, `Err(Some(detail))` on violation.
    pub fn validate(&self, id: &str, payload: &serde_json::Value) -> Result<(), Option<String>> {
        let entry = self.entries.get(id).ok_or(None)?;
        (entry.validate)(payload).map_err(Some)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::llm::Role;
    use serde_json::json;

    fn tip_text() -> TipText {
        TipText {
            content: "Verify payment methods before checkout".into(),
            purpose: "Avoid checkout failures".into(),
            steps: vec!["Call get_payment_methods()".into()],
            trigger: "Checkout tasks".into(),
            negative_example: None,
        }
    }

    /// One representative payload per role.
    fn samples() -> Vec<(Role, serde_json::Value)> {
        let node = CausalNode { step_index: 1, description: "x".into() };
        vec![
            (Role::ThoughtCategorizer, serde_json::to_value(CategorizerPayload { categories: vec![ThoughtCategory::Planning] }).unwrap()),
            (
                Role::PatternDetector,
                serde_json::to_value(PatternPayload {
                    patterns: vec![DetectedPattern { step_index: 0, kind: PatternKind::Validation, confidence: 0.5, evidence: "check".into() }],
                })
                .unwrap(),
            ),
            (
                Role::OutcomeInterpreter,
                serde_json::to_value(OutcomePayload { task_intent: "buy".into(), kind: None, rationale: None, diagnoses: vec![] }).unwrap(),
            ),
            (
                Role::AttributionAnalyst,
                serde_json::to_value(AttributionPayload {
                    immediate_cause: node.clone(),
                    proximate_cause: None,
                    root_cause: node,
                    contributing_factors: vec![],
                    improvement_steps: vec!["Verify first".into()],
                    prerequisite_critical: false,
                })
                .unwrap(),
            ),
            (
                Role::TipGenerator,
                serde_json::to_value(TipGenPayload {
                    tips: vec![GeneratedTip {
                        text: tip_text(),
                        application_context: Some("amazon".into()),
                        task_category: None,
                        generalizable: true,
                        generic_variant: Some(tip_text()),
                    }],
                })
                .unwrap(),
            ),
            (
                Role::Segmenter,
                serde_json::to_value(SegmentationPayload {
                    subtasks: vec![SegmentedSubtask {
                        description: "Authenticate".into(),
                        apps: vec!["spotify".into()],
                        start_step: 0,
                        end_step: 1,
                        purpose: "login".into(),
                    }],
                })
                .unwrap(),
            ),
            (
                Role::SubtaskTipper,
                serde_json::to_value(SubtaskTipsPayload {
                    tips: vec![SubtaskTipDraft { text: tip_text(), category: TipCategory::Strategy, priority: None, task_category: None }],
                })
                .unwrap(),
            ),
            (Role::Generalizer, serde_json::to_value(GeneralizerPayload { generalized: "Retrieve credentials".into() }).unwrap()),
            (
                Role::Consolidator,
                serde_json::to_value(ConsolidationPayload {
                    canonical_description: "Retrieve credentials".into(),
                    merged_tips: vec![MergedTipDraft {
                        merged_from: vec!["a".into(), "b".into()],
                        category: TipCategory::Strategy,
                        priority: Priority::High,
                        text: tip_text(),
                        application_context: None,
                        task_category: None,
                    }],
                    conflicts: vec![ConflictDraft { tip_ids: vec!["a".into(), "b".into()], topic: "retry".into() }],
                })
                .unwrap(),
            ),
            (
                Role::RetrievalSelector,
                serde_json::to_value(SelectorPayload {
                    application_context: Some("venmo".into()),
                    task_category: None,
                    preferred_categories: vec![TipCategory::Recovery],
                })
                .unwrap(),
            ),
        ]
    }

    #[test]
    fn every_role_schema_round_trips() {
        let reg = SchemaRegistry::standard();
        let samples = samples();
        assert_eq!(samples.len(), Role::ALL.len());
        for (role, payload) in samples {
            assert!(reg.contains(role.schema_id()));
            let text = serde_json::to_string(&payload).unwrap();
            let back: serde_json::Value = serde_json::from_str(&text).unwrap();
            reg.validate(role.schema_id(), &back).unwrap_or_else(|e| panic!("{role:?}: {e:?}"));
            assert!(reg.schema(role.schema_id()).unwrap().get("properties").is_some());
        }
    }

    #[test]
    fn semantic_checks_reject_bad_payloads() {
        let reg = SchemaRegistry::standard();
        let bad_conf = json!({"patterns": [{"step_index": 0, "kind": "validation", "confidence": 1.5, "evidence": "x"}]});
        assert!(reg.validate("pattern_detector.v1", &bad_conf).is_err());
        let bad_kind = json!({"categories": ["dreaming"]});
        assert!(reg.validate("thought_categorizer.v1", &bad_kind).is_err());
        let missing_variant = json!({"tips": [{"content": "c", "purpose": "p", "steps": [], "trigger": "t", "generalizable": true}]});
        assert!(reg.validate("tip_generator.v1", &missing_variant).is_err());
        assert_eq!(reg.validate("nope.v1", &json!({})), Err(None));
    }
}
