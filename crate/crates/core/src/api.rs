//! Request and response types shared by the HTTP service and the CLI's
//! `--json` output, so both expose identical shapes.

use std::collections::BTreeSet;

use schemars::JsonSchema;
use serde::{Deserialize, Serialize};

use crate::model::{Granularity, OutcomeClassification, Priority, TipCategory};
use crate::retrieval::{RetrievalResult, Strategy};
use crate::store::MetadataFilter;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, JsonSchema)]
pub struct IngestResponse {
    pub id: String,
    pub revision: u64,
    /// Background extraction job, when one was requested through the service.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub job_id: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, JsonSchema)]
#[serde(rename_all = "snake_case")]
pub enum ExtractMode {
    Task,
    Subtask,
    Both,
}

impl ExtractMode {
    pub fn task(&self) -> bool {
        matches!(self, ExtractMode::Task | ExtractMode::Both)
    }

    pub fn subtask(&self) -> bool {
        matches!(self, ExtractMode::Subtask | ExtractMode::Both)
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "task" => Some(ExtractMode::Task),
            "subtask" => Some(ExtractMode::Subtask),
            "both" => Some(ExtractMode::Both),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct ExtractionSummary {
    pub trajectory_id: String,
    pub outcome: OutcomeClassification,
    pub attributions: usize,
    pub subtasks: usize,
    pub task_tips: usize,
    pub subtask_tips: usize,
    pub tip_ids: Vec<String>,
    pub revision: u64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct RetrieveRequest {
    pub task_description: String,
    #[serde(default)]
    pub strategy: Option<Strategy>,
    #[serde(default)]
    pub tau: Option<f64>,
    #[serde(default)]
    pub k: Option<usize>,
    #[serde(default)]
    pub granularities: Option<BTreeSet<Granularity>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct RetrieveResponse {
    #[serde(flatten)]
    pub result: RetrievalResult,
    /// `render_guidelines` of `tips`.
    pub rendered: String,
}

/// Query-string filter for tip listings.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct TipsQuery {
    #[serde(default)]
    pub category: Option<TipCategory>,
    #[serde(default)]
    pub priority: Option<Priority>,
    #[serde(default)]
    pub application_context: Option<String>,
    #[serde(default)]
    pub generic_only: Option<bool>,
    #[serde(default)]
    pub task_category: Option<String>,
    #[serde(default)]
    pub granularity: Option<Granularity>,
}

impl From<TipsQuery> for MetadataFilter {
    fn from(q: TipsQuery) -> Self {
        MetadataFilter {
            category: q.category,
            priority: q.priority,
            application_context: q.application_context,
            generic_only: q.generic_only.unwrap_or(false),
            task_category: q.task_category,
            granularity: q.granularity,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, JsonSchema)]
pub struct ErrorBody {
    pub error: String,
    pub kind: String,
}
