//! Background extraction jobs: `queued -> running -> done | failed`.

use std::collections::BTreeMap;

use parking_lot::Mutex;
use schemars::JsonSchema;
use serde::{Deserialize, Serialize};
use tmem_core::api::{ErrorBody, ExtractMode, ExtractionSummary};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, JsonSchema)]
#[serde(rename_all = "snake_case")]
pub enum JobState {
    Queued,
    Running,
    Done,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct Job {
    pub id: String,
    pub trajectory_id: String,
    pub mode: ExtractMode,
    pub state: JobState,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub summary: Option<ExtractionSummary>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<ErrorBody>,
}

/// In-memory job table. Ids are `job-000001`, `job-000002`, ...
#[derive(Debug, Default)]
pub struct JobRegistry {
    inner: Mutex<(u64, BTreeMap<String, Job>)>,
}

impl JobRegistry {
    pub fn enqueue(&self, trajectory_id: &str, mode: ExtractMode) -> String {
        let mut g = self.inner.lock();
        g.0 += 1;
        let id = format!("job-{:06}", g.0);
        let job = Job { id: id.clone(), trajectory_id: trajectory_id.to_owned(), mode, state: JobState::Queued, summary: None, error: None };
        g.1.insert(id.clone(), job);
        id
    }

    pub fn get(&self, id: &str) -> Option<Job> {
        self.inner.lock().1.get(id).cloned()
    }

    fn update(&self, id: &str, f: impl FnOnce(&mut Job)) {
        if let Some(job) = self.inner.lock().1.get_mut(id) {
            f(job);
        }
    }

    pub fn start(&self, id: &str) {
        self.update(id, |j| j.state = JobState::Running);
    }

    pub fn finish(&self, id: &str, summary: ExtractionSummary) {
        self.update(id, |j| {
            j.state = JobState::Done;
            j.summary = Some(summary);
        });
    }

    pub fn fail(&self, id: &str, error: ErrorBody) {
        self.update(id, |j| {
            j.state = JobState::Failed;
            j.error = Some(error);
        });
    }
}
