//! Domain types shared by every stage of the pipeline.
//!
//! Everything here is an immutable value once validated. Field names serialize
//! in `lower_snake_case`; enums serialize as their snake_case variant names.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use schemars::JsonSchema;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use uuid::Uuid;

use crate::clock::{Clock, Timestamp};

/// Default maximum number of steps accepted per trajectory.
pub const DEFAULT_STEP_CAP: usize = 30;

/// Tolerance on the unit norm of stored embeddings.
pub const UNIT_NORM_TOLERANCE: f64 = 1e-9;

const ID_NAMESPACE: Uuid = Uuid::from_u128(0x6f1c_2d0e_8a4b_4c7d_9e51_3b2a_7d10_c0de);

/// Deterministic UUID-style id derived from `parts`.
pub fn derived_id(parts: &[&str]) -> String {
    Uuid::new_v5(&ID_NAMESPACE, parts.join("\u{1f}").as_bytes()).to_string()
}

// ---------------------------------------------------------------------------
// Trajectories
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct ActionRecord {
    /// Operation name, e.g. `amazon.remove_from_cart`.
    pub name: String,
    #[serde(default)]
    pub arguments: BTreeMap<String, serde_json::Value>,
}

impl ActionRecord {
    /// Canonical `name(k=v, ...)` rendering used for repetition detection.
    pub fn signature(&self) -> String {
        let args: Vec<String> = self.arguments.iter().map(|(k, v)| format!("{k}={v}")).collect();
        format!("{}({})", self.name, args.join(", "))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize, JsonSchema)]
#[serde(rename_all = "snake_case")]
pub enum ThoughtCategory {
    Analytical,
    Planning,
    Validation,
    Reflection,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize, JsonSchema)]
#[serde(rename_all = "snake_case")]
pub enum PatternKind {
    Validation,
    Reflection,
    SelfCorrection,
    ErrorRecognition,
    ApiDiscovery,
    EfficiencyAwareness,
}

impl PatternKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            PatternKind::Validation => "validation",
            PatternKind::Reflection => "reflection",
            PatternKind::SelfCorrection => "self_correction",
            PatternKind::ErrorRecognition => "error_recognition",
            PatternKind::ApiDiscovery => "api_discovery",
            PatternKind::EfficiencyAwareness => "efficiency_awareness",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct CognitivePattern {
    pub kind: PatternKind,
    /// Detector confidence in `[0, 1]`, stored as given.
    pub confidence: f64,
    /// Verbatim span of the step response.
    pub evidence: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct Thought {
    pub text: String,
    pub category: ThoughtCategory,
    #[serde(default)]
    pub patterns: Vec<CognitivePattern>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct Step {
    pub index: usize,
    /// Prompt or context given to the agent for this step.
    #[serde(default)]
    pub context: String,
    /// Full agent output.
    pub response: String,
    #[serde(default)]
    pub thoughts: Vec<Thought>,
    #[serde(default)]
    pub action: Option<ActionRecord>,
    #[serde(default)]
    pub action_result: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct Indicator {
    pub name: String,
    pub passed: bool,
    #[serde(default)]
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct EvaluationReport {
    pub passed: bool,
    #[serde(default)]
    pub indicators: Vec<Indicator>,
}

/// A validated, complete task execution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct Trajectory {
    pub id: String,
    pub task_description: String,
    pub steps: Vec<Step>,
    #[serde(default)]
    pub evaluation_report: Option<EvaluationReport>,
    #[serde(default)]
    pub app_hints: Option<BTreeSet<String>>,
    pub created_at: Timestamp,
}

/// Trajectory as read from the input format: `id` and `created_at` may be omitted.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct RawTrajectory {
    #[serde(default)]
    pub id: Option<String>,
    pub task_description: String,
    pub steps: Vec<Step>,
    #[serde(default)]
    pub evaluation_report: Option<EvaluationReport>,
    #[serde(default)]
    pub app_hints: Option<BTreeSet<String>>,
    #[serde(default)]
    pub created_at: Option<Timestamp>,
}

impl From<Trajectory> for RawTrajectory {
    fn from(t: Trajectory) -> Self {
        RawTrajectory {
            id: Some(t.id),
            task_description: t.task_description,
            steps: t.steps,
            evaluation_report: t.evaluation_report,
            app_hints: t.app_hints,
            created_at: Some(t.created_at),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ValidationError {
    #[error("trajectory has no steps")]
    EmptySteps,
    #[error("step indices must be contiguous from 0: expected {expected}, found {found}")]
    NonContiguousIndices { expected: usize, found: usize },
    #[error("trajectory has {count} steps, cap is {cap}")]
    StepCapExceeded { cap: usize, count: usize },
    #[error("duplicate trajectory id `{0}`")]
    DuplicateId(String),
    #[error("step {step} has an action but no action result and is not the final step")]
    MissingActionResult { step: usize },
    #[error("a failing evaluation report must carry at least one indicator")]
    EmptyFailingReport,
    #[error("field `{0}` must not be empty")]
    EmptyField(&'static str),
}

/// Ingest-time validation settings.
pub struct ValidationContext<'a> {
    pub step_cap: usize,
    pub clock: &'a dyn Clock,
}

/// Establishes every trajectory invariant, filling in `id` and `created_at` when absent.
///
/// `is_known` reports whether an id already exists in the target store.
pub fn validate_trajectory(
    raw: RawTrajectory,
    ctx: &ValidationContext<'_>,
    is_known: impl Fn(&str) -> bool,
) -> Result<Trajectory, ValidationError> {
    if raw.task_description.trim().is_empty() {
        return Err(ValidationError::EmptyField("task_description"));
    }
    if raw.steps.is_empty() {
        return Err(ValidationError::EmptySteps);
    }
    if raw.steps.len() > ctx.step_cap {
        return Err(ValidationError::StepCapExceeded { cap: ctx.step_cap, count: raw.steps.len() });
    }
    for (expected, step) in raw.steps.iter().enumerate() {
        if step.index != expected {
            return Err(ValidationError::NonContiguousIndices { expected, found: step.index });
        }
    }
    let last = raw.steps.len() - 1;
    for step in &raw.steps {
        if step.action.is_some() && step.action_result.is_none() && step.index != last {
            return Err(ValidationError::MissingActionResult { step: step.index });
        }
    }
    if let Some(report) = &raw.evaluation_report {
        if !report.passed && report.indicators.is_empty() {
            return Err(ValidationError::EmptyFailingReport);
        }
    }

    let created_at = raw.created_at.unwrap_or_else(|| ctx.clock.now());
    let id = match raw.id {
        Some(id) if id.trim().is_empty() => return Err(ValidationError::EmptyField("id")),
        Some(id) => id,
        None => {
            let body = serde_json::to_string(&raw.steps).expect("steps serialize");
            derived_id(&["trajectory", &raw.task_description, &created_at.to_string(), &body])
        }
    };
    if is_known(&id) {
        return Err(ValidationError::DuplicateId(id));
    }

    Ok(Trajectory {
        id,
        task_description: raw.task_description,
        steps: raw.steps,
        evaluation_report: raw.evaluation_report,
        app_hints: raw.app_hints,
        created_at,
    })
}

// ---------------------------------------------------------------------------
// Outcomes and attributions
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize, JsonSchema)]
#[serde(rename_all = "snake_case")]
pub enum OutcomeKind {
    CleanSuccess,
    InefficientSuccess,
    RecoverySuccess,
    Failure,
}

impl OutcomeKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            OutcomeKind::CleanSuccess => "clean_success",
            OutcomeKind::InefficientSuccess => "inefficient_success",
            OutcomeKind::RecoverySuccess => "recovery_success",
            OutcomeKind::Failure => "failure",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        [Self::CleanSuccess, Self::InefficientSuccess, Self::RecoverySuccess, Self::Failure]
            .into_iter()
            .find(|k| k.as_str() == s)
    }

    pub fn is_success(&self) -> bool {
        !matches!(self, OutcomeKind::Failure)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, JsonSchema)]
#[serde(rename_all = "snake_case")]
pub enum OutcomeSource {
    GroundTruth,
    Inferred,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct OutcomeClassification {
    pub kind: OutcomeKind,
    pub source: OutcomeSource,
    pub rationale: String,
    /// Set when inference found no completion signal at all.
    #[serde(default)]
    pub low_confidence: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct CausalNode {
    pub step_index: usize,
    pub description: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize, JsonSchema)]
#[serde(rename_all = "snake_case")]
pub enum AttributionKind {
    Failure,
    Recovery,
    Inefficiency,
    SuccessPattern,
}

impl AttributionKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            AttributionKind::Failure => "failure",
            AttributionKind::Recovery => "recovery",
            AttributionKind::Inefficiency => "inefficiency",
            AttributionKind::SuccessPattern => "success_pattern",
        }
    }

    /// Tip category produced from an attribution of this kind.
    pub fn tip_category(&self) -> TipCategory {
        match self {
            AttributionKind::SuccessPattern => TipCategory::Strategy,
            AttributionKind::Failure | AttributionKind::Recovery => TipCategory::Recovery,
            AttributionKind::Inefficiency => TipCategory::Optimization,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct DecisionAttribution {
    pub outcome_kind: AttributionKind,
    pub immediate_cause: CausalNode,
    #[serde(default)]
    pub proximate_cause: Option<CausalNode>,
    pub root_cause: CausalNode,
    #[serde(default)]
    pub contributing_factors: Vec<CausalNode>,
    #[serde(default)]
    pub improvement_steps: Vec<String>,
    /// Analyst flag: the success pattern is a hard prerequisite check.
    #[serde(default)]
    pub prerequisite_critical: bool,
}

impl DecisionAttribution {
    pub fn causal_nodes(&self) -> impl Iterator<Item = &CausalNode> {
        std::iter::once(&self.immediate_cause)
            .chain(self.proximate_cause.iter())
            .chain(std::iter::once(&self.root_cause))
            .chain(self.contributing_factors.iter())
    }
}

// ---------------------------------------------------------------------------
// Tips, embeddings, subtasks, clusters
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize, JsonSchema)]
#[serde(rename_all = "snake_case")]
pub enum TipCategory {
    Strategy,
    Recovery,
    Optimization,
}

impl TipCategory {
    pub const ALL: [TipCategory; 3] = [TipCategory::Strategy, TipCategory::Recovery, TipCategory::Optimization];

    pub fn as_str(&self) -> &'static str {
        match self {
            TipCategory::Strategy => "strategy",
            TipCategory::Recovery => "recovery",
            TipCategory::Optimization => "optimization",
        }
    }

    /// Capitalized form used in rendered guidelines.
    pub fn title(&self) -> &'static str {
        match self {
            TipCategory::Strategy => "Strategy",
            TipCategory::Recovery => "Recovery",
            TipCategory::Optimization => "Optimization",
        }
    }
}

impl fmt::Display for TipCategory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Ordered from most to least severe; `Ord` follows declaration order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize, JsonSchema)]
#[serde(rename_all = "snake_case")]
pub enum Priority {
    Critical,
    High,
    Medium,
    Low,
}

impl Priority {
    pub const ALL: [Priority; 4] = [Priority::Critical, Priority::High, Priority::Medium, Priority::Low];

    pub fn as_str(&self) -> &'static str {
        match self {
            Priority::Critical => "critical",
            Priority::High => "high",
            Priority::Medium => "medium",
            Priority::Low => "low",
        }
    }
}

impl fmt::Display for Priority {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize, JsonSchema)]
#[serde(rename_all = "snake_case")]
pub enum Granularity {
    Task,
    Subtask,
}

impl Granularity {
    pub fn as_str(&self) -> &'static str {
        match self {
            Granularity::Task => "task",
            Granularity::Subtask => "subtask",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum EmbeddingError {
    #[error("embedding has zero length")]
    Empty,
    #[error("embedding declares dim {dim} but holds {len} values")]
    DimMismatch { dim: usize, len: usize },
    #[error("embedding norm {0} is not 1 within tolerance")]
    NotUnit(String),
    #[error("embedding vector is zero and cannot be normalized")]
    Zero,
}

/// Unit-norm dense vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "EmbeddingRepr")]
pub struct Embedding {
    vector: Vec<f64>,
    dim: usize,
}

#[derive(Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
struct EmbeddingRepr {
    vector: Vec<f64>,
    dim: usize,
}

impl TryFrom<EmbeddingRepr> for Embedding {
    type Error = EmbeddingError;

    fn try_from(repr: EmbeddingRepr) -> Result<Self, Self::Error> {
        if repr.vector.len() != repr.dim {
            return Err(EmbeddingError::DimMismatch { dim: repr.dim, len: repr.vector.len() });
        }
        Embedding::from_unit(repr.vector)
    }
}

impl JsonSchema for Embedding {
    fn schema_name() -> String {
        "Embedding".to_owned()
    }

    fn json_schema(gen: &mut schemars::gen::SchemaGenerator) -> schemars::schema::Schema {
        EmbeddingRepr::json_schema(gen)
    }
}

impl Embedding {
    /// L2-normalizes `vector`.
    pub fn normalize(mut vector: Vec<f64>) -> Result<Self, EmbeddingError> {
        if vector.is_empty() {
            return Err(EmbeddingError::Empty);
        }
        let norm = vector.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 || !norm.is_finite() {
            return Err(EmbeddingError::Zero);
        }
        for x in &mut vector {
            *x /= norm;
        }
        let dim = vector.len();
        Ok(Embedding { vector, dim })
    }

    /// Accepts an already-normalized vector, checking the norm.
    pub fn from_unit(vector: Vec<f64>) -> Result<Self, EmbeddingError> {
        if vector.is_empty() {
            return Err(EmbeddingError::Empty);
        }
        let norm = vector.iter().map(|x| x * x).sum::<f64>().sqrt();
        if (norm - 1.0).abs() > UNIT_NORM_TOLERANCE {
            return Err(EmbeddingError::NotUnit(norm.to_string()));
        }
        let dim = vector.len();
        Ok(Embedding { vector, dim })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.vector
    }

    /// Cosine similarity; both operands are unit vectors so this is the dot product.
    pub fn cosine(&self, other: &Embedding) -> f64 {
        debug_assert_eq!(self.dim, other.dim);
        self.vector.iter().zip(&other.vector).map(|(a, b)| a * b).sum()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TipError {
    #[error("tip `{0}` has no source trajectory ids")]
    EmptyProvenance(String),
    #[error("subtask tip `{0}` has no subtask_description")]
    MissingSubtaskDescription(String),
    #[error("tip `{0}` has empty content")]
    EmptyContent(String),
}

/// Categorized, prioritized, provenance-tracked guidance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct Tip {
    pub id: String,
    pub category: TipCategory,
    pub content: String,
    pub purpose: String,
    pub steps: Vec<String>,
    pub trigger: String,
    #[serde(default)]
    pub negative_example: Option<String>,
    /// `None` marks a generic tip.
    #[serde(default)]
    pub application_context: Option<String>,
    #[serde(default)]
    pub task_category: Option<String>,
    pub priority: Priority,
    pub granularity: Granularity,
    #[serde(default)]
    pub subtask_description: Option<String>,
    #[serde(default)]
    pub generalized_description: Option<String>,
    /// Text the tip is retrieved by: the task description for task tips, the
    /// (generalized or canonical) subtask description for subtask tips.
    pub index_description: String,
    pub source_trajectory_ids: Vec<String>,
    pub source_outcome: String,
    /// Embedding of `index_description`.
    pub embedding: Embedding,
    pub created_at: Timestamp,
}

impl Tip {
    pub fn validate(&self) -> Result<(), TipError> {
        if self.source_trajectory_ids.is_empty() {
            return Err(TipError::EmptyProvenance(self.id.clone()));
        }
        if self.granularity == Granularity::Subtask && self.subtask_description.is_none() {
            return Err(TipError::MissingSubtaskDescription(self.id.clone()));
        }
        if self.content.trim().is_empty() {
            return Err(TipError::EmptyContent(self.id.clone()));
        }
        Ok(())
    }

    pub fn is_generic(&self) -> bool {
        self.application_context.is_none()
    }

    /// Outcome kind of the source trajectory, when `source_outcome` names one.
    pub fn source_outcome_kind(&self) -> Option<OutcomeKind> {
        OutcomeKind::parse(self.source_outcome.split(':').next().unwrap_or("").trim())
    }
}

/// Inclusive step range, serialized as `[start, end]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize, JsonSchema)]
#[serde(from = "(usize, usize)", into = "(usize, usize)")]
pub struct StepRange {
    pub start: usize,
    pub end: usize,
}

impl From<(usize, usize)> for StepRange {
    fn from((start, end): (usize, usize)) -> Self {
        StepRange { start, end }
    }
}

impl From<StepRange> for (usize, usize) {
    fn from(r: StepRange) -> Self {
        (r.start, r.end)
    }
}

impl StepRange {
    pub fn contains(&self, step: usize) -> bool {
        self.start <= step && step <= self.end
    }

    pub fn overlaps(&self, other: &StepRange) -> bool {
        self.start <= other.end && other.start <= self.end
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct Subtask {
    pub description: String,
    pub generalized: bool,
    pub apps: BTreeSet<String>,
    pub step_range: StepRange,
    pub purpose: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct Cluster {
    pub id: String,
    pub canonical_description: String,
    pub canonical_embedding: Embedding,
    /// Sorted ascending.
    pub member_tip_ids: Vec<String>,
}

impl Cluster {
    /// Cluster id derived from its (sorted) membership.
    pub fn id_for_members(members: &[String]) -> String {
        let refs: Vec<&str> = std::iter::once("cluster").chain(members.iter().map(String::as_str)).collect();
        derived_id(&refs)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clock::FixedClock;

    fn step(index: usize) -> Step {
        Step {
            index,
            context: String::new(),
            response: format!("Thought: step {index}."),
            thoughts: vec![],
            action: None,
            action_result: None,
        }
    }

    fn raw(n: usize) -> RawTrajectory {
        RawTrajectory {
            id: Some("t-1".into()),
            task_description: "Buy a book".into(),
            steps: (0..n).map(step).collect(),
            evaluation_report: None,
            app_hints: None,
            created_at: None,
        }
    }

    fn ctx(clock: &FixedClock) -> ValidationContext<'_> {
        ValidationContext { step_cap: DEFAULT_STEP_CAP, clock }
    }

    #[test]
    fn accepts_four_contiguous_steps() {
        let clock = FixedClock::at_unix(1_700_000_000);
        let t = validate_trajectory(raw(4), &ctx(&clock), |_| false).unwrap();
        assert_eq!(t.steps.len(), 4);
        assert_eq!(t.created_at, clock.0);
    }

    #[test]
    fn rejects_thirty_one_steps() {
        let clock = FixedClock::at_unix(0);
        let err = validate_trajectory(raw(31), &ctx(&clock), |_| false).unwrap_err();
        assert_eq!(err, ValidationError::StepCapExceeded { cap: 30, count: 31 });
        assert!(validate_trajectory(raw(30), &ctx(&clock), |_| false).is_ok());
    }

    #[test]
    fn rejects_gap_in_indices() {
        let clock = FixedClock::at_unix(0);
        let mut r = raw(3);
        r.steps[2].index = 3;
        let err = validate_trajectory(r, &ctx(&clock), |_| false).unwrap_err();
        assert_eq!(err, ValidationError::NonContiguousIndices { expected: 2, found: 3 });
    }

    #[test]
    fn rejects_empty_and_duplicate() {
        let clock = FixedClock::at_unix(0);
        assert_eq!(validate_trajectory(raw(0), &ctx(&clock), |_| false).unwrap_err(), ValidationError::EmptySteps);
        assert_eq!(
            validate_trajectory(raw(2), &ctx(&clock), |id| id == "t-1").unwrap_err(),
            ValidationError::DuplicateId("t-1".into())
        );
    }

    #[test]
    fn missing_action_result_only_allowed_on_final_step() {
        let clock = FixedClock::at_unix(0);
        let action = ActionRecord { name: "supervisor.complete_task".into(), arguments: BTreeMap::new() };
        let mut r = raw(2);
        r.steps[1].action = Some(action.clone());
        assert!(validate_trajectory(r.clone(), &ctx(&clock), |_| false).is_ok());
        r.steps[0].action = Some(action);
        assert_eq!(
            validate_trajectory(r, &ctx(&clock), |_| false).unwrap_err(),
            ValidationError::MissingActionResult { step: 0 }
        );
    }

    #[test]
    fn generated_id_is_deterministic() {
        let clock = FixedClock::at_unix(100);
        let mut r = raw(2);
        r.id = None;
        let a = validate_trajectory(r.clone(), &ctx(&clock), |_| false).unwrap();
        let b = validate_trajectory(r, &ctx(&clock), |_| false).unwrap();
        assert_eq!(a.id, b.id);
        assert_eq!(a.id.len(), 36);
    }

    #[test]
    fn failing_report_needs_indicators() {
        let clock = FixedClock::at_unix(0);
        let mut r = raw(1);
        r.evaluation_report = Some(EvaluationReport { passed: false, indicators: vec![] });
        assert_eq!(validate_trajectory(r, &ctx(&clock), |_| false).unwrap_err(), ValidationError::EmptyFailingReport);
    }

    #[test]
    fn embedding_rejects_non_unit_on_deserialize() {
        let bad = r#"{"vector":[1.0,1.0],"dim":2}"#;
        assert!(serde_json::from_str::<Embedding>(bad).is_err());
        let e = Embedding::normalize(vec![3.0, 4.0]).unwrap();
        let back: Embedding = serde_json::from_str(&serde_json::to_string(&e).unwrap()).unwrap();
        assert_eq!(back, e);
        assert!((e.cosine(&e) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn step_range_serializes_as_pair() {
        let r = StepRange { start: 2, end: 5 };
        assert_eq!(serde_json::to_string(&r).unwrap(), "[2,5]");
        assert!(r.overlaps(&StepRange { start: 5, end: 7 }));
        assert!(!r.overlaps(&StepRange { start: 6, end: 7 }));
    }
}
