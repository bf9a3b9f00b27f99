//! Runtime tip selection and guidelines rendering.
//!
//! Both strategies score tips by the cosine similarity between the query
//! embedding and the tip's index-description embedding. Cosine keeps tips
//! with score `>= tau`, sorted by score descending then id ascending, and
//! truncates to `k`. LLM-guided first asks the selector role for metadata
//! filters and a category preference, then orders by (preferred-category
//! rank, score descending, id ascending).

use std::collections::BTreeSet;
use std::fmt::Write as _;

use schemars::JsonSchema;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embed::{EmbedError, Embedder};
use crate::llm::{Gateway, GatewayError, Role};
use crate::model::{Granularity, Tip};
use crate::prompts::{self, SelectorInput};
use crate::schema::SelectorPayload;
use crate::store::{rank_order, MetadataFilter, StoreError, StoreState};

pub const DEFAULT_TAU: f64 = 0.6;
pub const DEFAULT_K: usize = 5;

#[derive(Debug, Error)]
pub enum RetrievalError {
    #[error("query text is empty")]
    EmptyQuery,
    #[error("tau {0} is outside (0, 1]")]
    InvalidTau(f64),
    #[error("k must be at least 1")]
    InvalidK,
    #[error("at least one granularity must be enabled")]
    NoGranularity,
    #[error(transparent)]
    Embed(EmbedError),
    #[error(transparent)]
    Store(#[from] StoreError),
}

impl From<EmbedError> for RetrievalError {
    fn from(e: EmbedError) -> Self {
        match e {
            EmbedError::EmptyText => RetrievalError::EmptyQuery,
            other => RetrievalError::Embed(other),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, JsonSchema)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    #[default]
    Cosine,
    LlmGuided,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, JsonSchema)]
#[serde(rename_all = "snake_case")]
pub enum StrategyUsed {
    Cosine,
    LlmGuided,
    /// LLM-guided selection failed and cosine retrieval answered instead.
    CosineFallback,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalConfig {
    pub strategy: Strategy,
    pub tau: f64,
    pub k: usize,
    pub granularities: BTreeSet<Granularity>,
    /// Apply `tau` as a score floor under LLM-guided selection too.
    pub llm_tau_floor: bool,
}

impl Default for RetrievalConfig {
    fn default() -> Self {
        RetrievalConfig {
            strategy: Strategy::Cosine,
            tau: DEFAULT_TAU,
            k: DEFAULT_K,
            granularities: [Granularity::Task, Granularity::Subtask].into(),
            llm_tau_floor: true,
        }
    }
}

impl RetrievalConfig {
    pub fn validate(&self) -> Result<(), RetrievalError> {
        if !(self.tau > 0.0 && self.tau <= 1.0) {
            return Err(RetrievalError::InvalidTau(self.tau));
        }
        if self.k == 0 {
            return Err(RetrievalError::InvalidK);
        }
        if self.granularities.is_empty() {
            return Err(RetrievalError::NoGranularity);
        }
        Ok(())
    }

    fn granularity_filter(&self) -> Option<Granularity> {
        if self.granularities.len() == 1 {
            self.granularities.iter().next().copied()
        } else {
            None
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct RetrievedTip {
    pub tip: Tip,
    pub score: f64,
    pub matched_description: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct RetrievalResult {
    pub tips: Vec<RetrievedTip>,
    pub strategy_used: StrategyUsed,
    pub query_text: String,
    /// Selector output applied under LLM-guided selection.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub selection: Option<SelectorPayload>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

fn retrieved(tip: &Tip, score: f64) -> RetrievedTip {
    RetrievedTip { tip: tip.clone(), score, matched_description: tip.index_description.clone() }
}

/// Cosine strategy over a snapshot.
pub fn retrieve_cosine(
    state: &StoreState,
    embedder: &dyn Embedder,
    task_description: &str,
    cfg: &RetrievalConfig,
) -> Result<RetrievalResult, RetrievalError> {
    cfg.validate()?;
    if task_description.trim().is_empty() {
        return Err(RetrievalError::EmptyQuery);
    }
    let q = embedder.embed(task_description)?;
    let filter = MetadataFilter { granularity: cfg.granularity_filter(), ..Default::default() };
    let tips = state
        .query(&filter, Some(&q))?
        .into_iter()
        .filter(|s| s.score.unwrap() >= cfg.tau)
        .take(cfg.k)
        .map(|s| retrieved(&s.tip, s.score.unwrap()))
        .collect();
    Ok(RetrievalResult {
        tips,
        strategy_used: StrategyUsed::Cosine,
        query_text: task_description.to_owned(),
        selection: None,
        warnings: Vec::new(),
    })
}

/// LLM-guided strategy; falls back to cosine when the gateway fails.
pub fn retrieve_llm_guided(
    state: &StoreState,
    gateway: &Gateway,
    embedder: &dyn Embedder,
    task_description: &str,
    cfg: &RetrievalConfig,
) -> Result<RetrievalResult, RetrievalError> {
    cfg.validate()?;
    if task_description.trim().is_empty() {
        return Err(RetrievalError::EmptyQuery);
    }
    let q = embedder.embed(task_description)?;
    let input = SelectorInput {
        task_description: task_description.to_owned(),
        known_applications: state.known_applications().into_iter().collect(),
        known_task_categories: state.known_task_categories().into_iter().collect(),
    };
    let prompt = prompts::render(Role::RetrievalSelector, &input, &[]);
    let selection: SelectorPayload = match gateway.call(Role::RetrievalSelector, &prompt) {
        Ok(s) => s,
        Err(e) => return fallback(state, embedder, task_description, cfg, &e),
    };

    let filter = MetadataFilter {
        application_context: selection.application_context.clone().filter(|c| !c.trim().is_empty()),
        task_category: selection.task_category.clone().filter(|c| !c.trim().is_empty()),
        granularity: cfg.granularity_filter(),
        ..Default::default()
    };
    let rank = |t: &Tip| {
        selection.preferred_categories.iter().position(|c| *c == t.category).unwrap_or(selection.preferred_categories.len())
    };
    let mut scored: Vec<(usize, f64, std::sync::Arc<Tip>)> = state
        .query(&filter, Some(&q))?
        .into_iter()
        .map(|s| (rank(&s.tip), s.score.unwrap(), s.tip))
        .filter(|(_, score, _)| !cfg.llm_tau_floor || *score >= cfg.tau)
        .collect();
    scored.sort_by(|a, b| a.0.cmp(&b.0).then_with(|| rank_order((a.1, &a.2.id), (b.1, &b.2.id))));
    let tips = scored.into_iter().take(cfg.k).map(|(_, score, tip)| retrieved(&tip, score)).collect();
    Ok(RetrievalResult {
        tips,
        strategy_used: StrategyUsed::LlmGuided,
        query_text: task_description.to_owned(),
        selection: Some(selection),
        warnings: Vec::new(),
    })
}

fn fallback(
    state: &StoreState,
    embedder: &dyn Embedder,
    task_description: &str,
    cfg: &RetrievalConfig,
    err: &GatewayError,
) -> Result<RetrievalResult, RetrievalError> {
    tracing::warn!(error = %err, "retrieval selector failed; falling back to cosine");
    let mut result = retrieve_cosine(state, embedder, task_description, cfg)?;
    result.strategy_used = StrategyUsed::CosineFallback;
    result.warnings.push(format!("llm-guided selection failed ({err}); cosine retrieval used"));
    Ok(result)
}

/// Dispatches on `cfg.strategy`.
pub fn retrieve(
    state: &StoreState,
    gateway: &Gateway,
    embedder: &dyn Embedder,
    task_description: &str,
    cfg: &RetrievalConfig,
) -> Result<RetrievalResult, RetrievalError> {
    match cfg.strategy {
        Strategy::Cosine => retrieve_cosine(state, embedder, task_description, cfg),
        Strategy::LlmGuided => retrieve_llm_guided(state, gateway, embedder, task_description, cfg),
    }
}

fn one_line(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Renders tips as the guidelines prompt section.
///
/// ```text
/// [PRIORITY: HIGH] Recovery Tip:
/// <content>
///
/// Apply when: <trigger>
/// Steps:
/// 1. <step>
/// Avoid: <negative example>
/// ```
///
/// `Steps:` is omitted when a tip has no steps and `Avoid:` when it has no
/// negative example. Blocks are separated by one blank line; every line ends
/// with `\n`; an empty result renders as the empty string.
pub fn render_guidelines(result: &RetrievalResult) -> String {
    render_tips(result.tips.iter().map(|r| &r.tip))
}

pub fn render_tips<'a>(tips: impl IntoIterator<Item = &'a Tip>) -> String {
    let mut out = String::new();
    for (i, tip) in tips.into_iter().enumerate() {
        if i > 0 {
            out.push('\n');
        }
        let _ = writeln!(out, "[PRIORITY: {}] {} Tip:", tip.priority.as_str().to_uppercase(), tip.category.title());
        let _ = writeln!(out, "{}", one_line(&tip.content));
        out.push('\n');
        let _ = writeln!(out, "Apply when: {}", one_line(&tip.trigger));
        if !tip.steps.is_empty() {
            out.push_str("Steps:\n");
            for (n, step) in tip.steps.iter().enumerate() {
                let _ = writeln!(out, "{}. {}", n + 1, one_line(step));
            }
        }
        if let Some(neg) = tip.negative_example.as_deref().filter(|s| !s.trim().is_empty()) {
            let _ = writeln!(out, "Avoid: {}", one_line(neg));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clock::Timestamp;
    use crate::embed::HashEmbedder;
    use crate::llm::UnavailableProvider;
    use crate::model::{Priority, Step, TipCategory, Trajectory};
    use crate::store::Store;

    fn tip(id: &str, cat: TipCategory, ctx: Option<&str>, desc: &str) -> Tip {
        Tip {
            id: id.into(),
            category: cat,
            content: format!("content {id}"),
            purpose: "p".into(),
            steps: vec!["one".into(), "two".into()],
            trigger: "t".into(),
            negative_example: None,
            application_context: ctx.map(str::to_owned),
            task_category: None,
            priority: Priority::High,
            granularity: Granularity::Task,
            subtask_description: None,
            generalized_description: None,
            index_description: desc.into(),
            source_trajectory_ids: vec!["T".into()],
            source_outcome: "clean_success".into(),
            embedding: HashEmbedder::default().embed(desc).unwrap(),
            created_at: Timestamp::from_unix(0),
        }
    }

    fn store(tips: Vec<Tip>) -> Store {
        let s = Store::in_memory(256);
        s.put_trajectory(Trajectory {
            id: "T".into(),
            task_description: "x".into(),
            steps: vec![Step { index: 0, context: String::new(), response: "r".into(), thoughts: vec![], action: None, action_result: None }],
            evaluation_report: None,
            app_hints: Some(["venmo".to_string()].into()),
            created_at: Timestamp::from_unix(0),
        })
        .unwrap();
        s.put_tips(tips).unwrap();
        s
    }

    #[test]
    fn self_match_ranks_first() {
        let s = store(vec![tip("a", TipCategory::Strategy, None, "buy a book"), tip("b", TipCategory::Recovery, None, "pay my venmo requests")]);
        let r = retrieve_cosine(&s.snapshot(), &HashEmbedder::default(), "pay my venmo requests", &RetrievalConfig::default()).unwrap();
        assert_eq!(r.tips[0].tip.id, "b");
        assert!((r.tips[0].score - 1.0).abs() < 1e-12);
        assert_eq!(r.tips[0].matched_description, "pay my venmo requests");
    }

    #[test]
    fn config_bounds() {
        let snap = store(vec![]).snapshot();
        let e = HashEmbedder::default();
        let bad_k = RetrievalConfig { k: 0, ..Default::default() };
        assert!(matches!(retrieve_cosine(&snap, &e, "x", &bad_k), Err(RetrievalError::InvalidK)));
        let bad_tau = RetrievalConfig { tau: 1.5, ..Default::default() };
        assert!(matches!(retrieve_cosine(&snap, &e, "x", &bad_tau), Err(RetrievalError::InvalidTau(_))));
        assert!(matches!(retrieve_cosine(&snap, &e, "  ", &RetrievalConfig::default()), Err(RetrievalError::EmptyQuery)));
    }

    #[test]
    fn gateway_failure_falls_back_to_cosine() {
        let s = store(vec![tip("a", TipCategory::Strategy, None, "pay my venmo requests")]);
        let gw = Gateway::with_provider(UnavailableProvider);
        let e = HashEmbedder::default();
        let cfg = RetrievalConfig { strategy: Strategy::LlmGuided, ..Default::default() };
        let guided = retrieve_llm_guided(&s.snapshot(), &gw, &e, "pay my venmo requests", &cfg).unwrap();
        let cosine = retrieve_cosine(&s.snapshot(), &e, "pay my venmo requests", &cfg).unwrap();
        assert_eq!(guided.strategy_used, StrategyUsed::CosineFallback);
        assert_eq!(guided.tips, cosine.tips);
        assert_eq!(guided.warnings.len(), 1);
    }

    #[test]
    fn render_format() {
        let mut t = tip("a", TipCategory::Recovery, None, "d");
        t.negative_example = Some("Do not retry blindly.".into());
        let mut u = tip("b", TipCategory::Optimization, None, "d");
        u.steps.clear();
        u.priority = Priority::Medium;
        let text = render_tips([&t, &u]);
        assert_eq!(
            text,
            "[PRIORITY: HIGH] Recovery Tip:\ncontent a\n\nApply when: t\nSteps:\n1. one\n2. two\nAvoid: Do not retry blindly.\n\n\
             [PRIORITY: MEDIUM] Optimization Tip:\ncontent b\n\nApply when: t\n"
        );
        assert_eq!(render_tips(std::iter::empty()), "");
    }
}
