//! Generalization, clustering and consolidation of stored tips.
//!
//! Clustering is average-linkage agglomerative over cosine similarity. To make
//! merge order independent of floating-point summation order, every pairwise
//! similarity is quantized to a fixed-point integer (`round(sim * 2^40)`) and
//! cluster averages are compared exactly as rationals.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet};
use std::sync::LazyLock;

use regex::Regex;
use schemars::JsonSchema;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embed::{EmbedError, Embedder};
use crate::llm::{Gateway, GatewayError, Role};
use crate::model::{derived_id, Cluster, Embedding, Granularity, Tip, TipCategory};
use crate::prompts::{self, ConsolidatorInput, GeneralizerInput, MemberView};
use crate::schema::{ConsolidationPayload, GeneralizerPayload};
use crate::store::{Store, StoreError, StoreState};

pub const DEFAULT_CLUSTER_THRESHOLD: f64 = 0.85;

/// Fixed-point scale for quantized similarities.
pub const SIM_SCALE: f64 = (1u64 << 40) as f64;

#[derive(Debug, Error)]
pub enum CurationError {
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Embed(#[from] EmbedError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error("cluster threshold {0} is outside (0, 1]")]
    InvalidThreshold(f64),
    #[error("description must not be empty")]
    EmptyDescription,
    #[error("cluster has no members")]
    EmptyCluster,
    #[error("cluster mixes task and subtask tips")]
    MixedGranularity,
    #[error("consolidator referenced unknown member `{0}`")]
    UnknownMember(String),
    #[error("consolidation drops member tips {missing:?}")]
    ProvenanceLoss { missing: Vec<String> },
    #[error("consolidator returned {merged} tips for {members} members")]
    TooManyMergedTips { members: usize, merged: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct CurationConfig {
    pub threshold: f64,
    /// Cluster task-level tips by their task-description embeddings as well.
    pub cluster_task_tips: bool,
    /// Extra entity names (users, products) treated like app names.
    pub extra_entities: Vec<String>,
}

impl Default for CurationConfig {
    fn default() -> Self {
        CurationConfig { threshold: DEFAULT_CLUSTER_THRESHOLD, cluster_task_tips: true, extra_entities: Vec::new() }
    }
}

pub fn validate_threshold(threshold: f64) -> Result<(), CurationError> {
    if threshold > 0.0 && threshold <= 1.0 {
        Ok(())
    } else {
        Err(CurationError::InvalidThreshold(threshold))
    }
}

// ---------------------------------------------------------------------------
// Generalization post-checks
// ---------------------------------------------------------------------------

static EMAIL: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"[A-Za-z0-9._%+-]+@[A-Za-z0-9-]+(?:\.[A-Za-z0-9-]+)*\.[A-Za-z]{2,}").unwrap());
static ID_TOKEN: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"\b[A-Za-z_-]*\d[A-Za-z0-9_-]*\b").unwrap());
static RETRIEVE_VERBS: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"(?i)\b(get|gets|fetch|fetches|obtain|obtains|acquire|acquires|grab)\b").unwrap());
static AUTH_VERBS: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"(?i)\b(?:log|sign)(?:s)?[ -]?(?:in(?:to)?|on)\b").unwrap());
static PURPOSE: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"(?i)[\s,;]*\b(in order to|in order for|so that|so as to|for the purpose of)\b.*$").unwrap());
static TRAILING_FILLER: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"(?i)[\s,;:.]*\b(for|of|from|to|with|by|using|via|on|in|at|and|user|account)?[\s,;:.]*$").unwrap());

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Violation {
    Entity { text: String },
    Verb { text: String, canonical: String },
    PurposeClause { text: String },
}

impl std::fmt::Display for Violation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Violation::Entity { text } => write!(f, "contains the specific entity `{text}`"),
            Violation::Verb { text, canonical } => write!(f, "uses `{text}`; use the canonical verb `{canonical}`"),
            Violation::PurposeClause { text } => write!(f, "contains the purpose clause `{text}`"),
        }
    }
}

/// Names and patterns a generalized description must not contain.
#[derive(Debug, Clone)]
pub struct EntityLexicon {
    names: Vec<(String, Regex)>,
}

impl EntityLexicon {
    pub fn new(names: impl IntoIterator<Item = String>) -> Self {
        let set: BTreeSet<String> = names.into_iter().map(|n| n.trim().to_lowercase()).filter(|n| !n.is_empty()).collect();
        let names = set
            .into_iter()
            .map(|n| {
                let pattern = format!(r"(?i)\b{}\b", regex::escape(&n).replace(r"\ ", r"\s+").replace('_', "[_ ]"));
                (n, Regex::new(&pattern).expect("escaped name is a valid pattern"))
            })
            .collect();
        EntityLexicon { names }
    }

    /// Application names from every trajectory's hints plus `extra`.
    pub fn from_store(state: &StoreState, extra: &[String]) -> Self {
        Self::new(state.known_applications().into_iter().chain(extra.iter().cloned()))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.names.iter().map(|(n, _)| n.as_str())
    }

    pub fn check(&self, text: &str) -> Vec<Violation> {
        let mut out = Vec::new();
        for m in EMAIL.find_iter(text) {
            out.push(Violation::Entity { text: m.as_str().to_owned() });
        }
        let without_emails = EMAIL.replace_all(text, " ");
        for m in ID_TOKEN.find_iter(&without_emails) {
            out.push(Violation::Entity { text: m.as_str().to_owned() });
        }
        for (_, re) in &self.names {
            for m in re.find_iter(&without_emails) {
                out.push(Violation::Entity { text: m.as_str().to_owned() });
            }
        }
        for m in RETRIEVE_VERBS.find_iter(text) {
            out.push(Violation::Verb { text: m.as_str().to_owned(), canonical: "retrieve".into() });
        }
        for m in AUTH_VERBS.find_iter(text) {
            out.push(Violation::Verb { text: m.as_str().to_owned(), canonical: "authenticate".into() });
        }
        if let Some(m) = PURPOSE.find(text) {
            out.push(Violation::PurposeClause { text: m.as_str().trim_start_matches([' ', ',', ';']).to_owned() });
        }
        out
    }

    /// Deterministic rewrite removing every violation found by [`EntityLexicon::check`].
    pub fn repair(&self, text: &str) -> String {
        let mut s = PURPOSE.replace(text, "").into_owned();
        let prefix = r"(?i)\b(?:(?:for|of|from|to|with|by)\s+)?(?:(?:user|account|id|item)\s+)?";
        let email = Regex::new(&format!("{prefix}{}", EMAIL.as_str())).unwrap();
        s = email.replace_all(&s, " ").into_owned();
        let id = Regex::new(&format!("{prefix}{}", ID_TOKEN.as_str())).unwrap();
        s = id.replace_all(&s, " ").into_owned();
        for (_, re) in &self.names {
            s = re.replace_all(&s, "service").into_owned();
        }
        s = RETRIEVE_VERBS.replace_all(&s, "retrieve").into_owned();
        s = AUTH_VERBS.replace_all(&s, "authenticate").into_owned();

        let mut words: Vec<&str> = Vec::new();
        for w in s.split_whitespace() {
            if words.last().is_some_and(|p| p.eq_ignore_ascii_case(w)) {
                continue;
            }
            words.push(w);
        }
        let mut s = words.join(" ");
        loop {
            let trimmed = TRAILING_FILLER.replace(&s, "").into_owned();
            if trimmed == s {
                break;
            }
            s = trimmed;
        }
        if s.is_empty() {
            s = "Perform service operation".into();
        }
        capitalize(&s)
    }
}

fn capitalize(s: &str) -> String {
    let mut chars = s.chars();
    match chars.next() {
        Some(c) => c.to_uppercase().chain(chars).collect(),
        None => String::new(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Generalized {
    pub text: String,
    /// Set when the deterministic repair had to be applied.
    pub repaired: bool,
    pub warnings: Vec<String>,
}

fn violation_list(vs: &[Violation]) -> Vec<String> {
    vs.iter().map(ToString::to_string).collect()
}

/// Rewrites `desc` through the generalizer role, re-prompting once with the
/// post-check findings and falling back to [`EntityLexicon::repair`].
pub fn generalize_description(gateway: &Gateway, lexicon: &EntityLexicon, desc: &str) -> Result<Generalized, CurationError> {
    let desc = desc.trim();
    if desc.is_empty() {
        return Err(CurationError::EmptyDescription);
    }
    let mut warnings = Vec::new();
    let mut violations: Vec<Violation> = Vec::new();
    let mut candidate = String::new();
    for attempt in 0..2 {
        let input = GeneralizerInput { description: desc.to_owned(), violations: violation_list(&violations) };
        let notes = if violations.is_empty() {
            String::new()
        } else {
            format!("Your previous answer `{candidate}` violated these rules:\n- {}\n", input.violations.join("\n- "))
        };
        let prompt = prompts::render(Role::Generalizer, &input, &[("violations", notes)]);
        let payload: GeneralizerPayload = gateway.call(Role::Generalizer, &prompt)?;
        candidate = payload.generalized.trim().to_owned();
        violations = lexicon.check(&candidate);
        if violations.is_empty() {
            return Ok(Generalized { text: candidate, repaired: false, warnings });
        }
        if attempt == 0 {
            warnings.push(format!("generalized description `{candidate}` re-prompted: {}", violation_list(&violations).join("; ")));
        }
    }
    let repaired = lexicon.repair(&candidate);
    warnings.push(format!("generalized description `{candidate}` repaired to `{repaired}`"));
    Ok(Generalized { text: repaired, repaired: true, warnings })
}

// ---------------------------------------------------------------------------
// Clustering
// ---------------------------------------------------------------------------

/// `round(sim * 2^40)`, clamped to `[-2^40, 2^40]`.
pub fn quantize_similarity(sim: f64) -> i64 {
    let q = (sim.clamp(-1.0, 1.0) * SIM_SCALE).round();
    q as i64
}

fn quantize_threshold(threshold: f64) -> i128 {
    (threshold * SIM_SCALE).round() as i128
}

/// Average-linkage agglomerative clustering.
///
/// `items` are `(id, embedding)` pairs. Returns groups of ids, each sorted,
/// ordered by their smallest id. Repeatedly merges the pair of clusters with
/// the highest average pairwise similarity, breaking ties by the
/// lexicographically smallest (min id, min id) pair, until the best average
/// falls below `threshold`.
pub fn cluster_tips(items: &[(String, Embedding)], threshold: f64) -> Result<Vec<Vec<String>>, CurationError> {
    validate_threshold(threshold)?;
    let mut order: Vec<usize> = (0..items.len()).collect();
    order.sort_by(|&a, &b| items[a].0.cmp(&items[b].0));
    let n = order.len();
    if n == 0 {
        return Ok(Vec::new());
    }
    let tq = quantize_threshold(threshold);

    // Cluster state: members (indices into `order`), sizes, and pairwise sums.
    let mut members: Vec<Vec<usize>> = (0..n).map(|i| vec![i]).collect();
    let mut alive: Vec<bool> = vec![true; n];
    let mut sums: Vec<Vec<i128>> = vec![vec![0; n]; n];
    for i in 0..n {
        for j in (i + 1)..n {
            let s = i128::from(quantize_similarity(items[order[i]].1.cosine(&items[order[j]].1)));
            sums[i][j] = s;
            sums[j][i] = s;
        }
    }

    loop {
        // Clusters keep the index of their smallest member, so index order is min-id order.
        let mut best: Option<(usize, usize)> = None;
        for a in (0..n).filter(|&a| alive[a]) {
            for b in ((a + 1)..n).filter(|&b| alive[b]) {
                let better = match best {
                    None => true,
                    Some((x, y)) => {
                        let lhs = sums[a][b] * (members[x].len() * members[y].len()) as i128;
                        let rhs = sums[x][y] * (members[a].len() * members[b].len()) as i128;
                        lhs > rhs
                    }
                };
                if better {
                    best = Some((a, b));
                }
            }
        }
        let Some((a, b)) = best else { break };
        let pairs = (members[a].len() * members[b].len()) as i128;
        if sums[a][b] < tq * pairs {
            break;
        }
        let moved = std::mem::take(&mut members[b]);
        members[a].extend(moved);
        alive[b] = false;
        for c in (0..n).filter(|&c| alive[c] && c != a) {
            let s = sums[a][c] + sums[b][c];
            sums[a][c] = s;
            sums[c][a] = s;
        }
    }

    Ok((0..n)
        .filter(|&i| alive[i])
        .map(|i| {
            let mut ids: Vec<String> = members[i].iter().map(|&m| items[order[m]].0.clone()).collect();
            ids.sort();
            ids
        })
        .collect())
}

// ---------------------------------------------------------------------------
// Consolidation
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct ConflictResolution {
    pub winner: String,
    pub loser: String,
    pub topic: String,
    /// Merged tips dropped because they carried only the losing guidance.
    pub dropped: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Consolidated {
    pub cluster: Cluster,
    pub merged_tips: Vec<Tip>,
    pub conflicts: Vec<ConflictResolution>,
    pub warnings: Vec<String>,
}

/// Total precedence order among conflicting tips; the smallest key wins.
///
/// Success-derived first, then recovery tips, then higher priority, then
/// newer, then smaller id.
pub fn precedence_cmp(a: &Tip, b: &Tip) -> Ordering {
    let success = |t: &Tip| !t.source_outcome_kind().is_some_and(|k| k.is_success());
    let recovery = |t: &Tip| t.category != TipCategory::Recovery;
    success(a)
        .cmp(&success(b))
        .then_with(|| recovery(a).cmp(&recovery(b)))
        .then_with(|| a.priority.cmp(&b.priority))
        .then_with(|| b.created_at.cmp(&a.created_at))
        .then_with(|| a.id.cmp(&b.id))
}

fn member_view(t: &Tip) -> MemberView {
    MemberView {
        id: t.id.clone(),
        category: t.category,
        priority: t.priority,
        content: t.content.clone(),
        purpose: t.purpose.clone(),
        steps: t.steps.clone(),
        trigger: t.trigger.clone(),
        negative_example: t.negative_example.clone(),
        application_context: t.application_context.clone(),
        task_category: t.task_category.clone(),
        index_description: t.index_description.clone(),
        source_outcome: t.source_outcome.clone(),
    }
}

/// Description a tip is clustered and indexed by.
fn cluster_text(t: &Tip) -> &str {
    t.generalized_description.as_deref().unwrap_or(&t.index_description)
}

pub struct Curator<'a> {
    pub gateway: &'a Gateway,
    pub embedder: &'a dyn Embedder,
    pub config: CurationConfig,
}

impl<'a> Curator<'a> {
    pub fn new(gateway: &'a Gateway, embedder: &'a dyn Embedder, config: CurationConfig) -> Result<Self, CurationError> {
        validate_threshold(config.threshold)?;
        Ok(Curator { gateway, embedder, config })
    }

    /// Merges one cluster's members through the consolidator role.
    ///
    /// Singletons pass through unchanged. The returned cluster record lists
    /// the merged tip ids.
    pub fn consolidate_cluster(&self, members: &[Tip], lexicon: &EntityLexicon) -> Result<Consolidated, CurationError> {
        let Some(first) = members.first() else { return Err(CurationError::EmptyCluster) };
        let granularity = first.granularity;
        if members.iter().any(|t| t.granularity != granularity) {
            return Err(CurationError::MixedGranularity);
        }
        let mut sorted: Vec<&Tip> = members.iter().collect();
        sorted.sort_by(|a, b| a.id.cmp(&b.id));

        if sorted.len() == 1 {
            let tip = sorted[0].clone();
            let cluster = Cluster {
                id: Cluster::id_for_members(std::slice::from_ref(&tip.id)),
                canonical_description: cluster_text(&tip).to_owned(),
                canonical_embedding: tip.embedding.clone(),
                member_tip_ids: vec![tip.id.clone()],
            };
            return Ok(Consolidated { cluster, merged_tips: vec![tip], conflicts: vec![], warnings: vec![] });
        }

        let by_id: BTreeMap<&str, &Tip> = sorted.iter().map(|t| (t.id.as_str(), *t)).collect();
        let input = ConsolidatorInput { granularity, members: sorted.iter().map(|t| member_view(t)).collect() };
        let prompt = prompts::render(Role::Consolidator, &input, &[("granularity", granularity.as_str().to_owned())]);
        let payload: ConsolidationPayload = self.gateway.call(Role::Consolidator, &prompt)?;

        if payload.merged_tips.len() > sorted.len() {
            return Err(CurationError::TooManyMergedTips { members: sorted.len(), merged: payload.merged_tips.len() });
        }
        for id in payload.merged_tips.iter().flat_map(|m| &m.merged_from).chain(payload.conflicts.iter().flat_map(|c| &c.tip_ids)) {
            if !by_id.contains_key(id.as_str()) {
                return Err(CurationError::UnknownMember(id.clone()));
            }
        }
        let covered: BTreeSet<&str> = payload.merged_tips.iter().flat_map(|m| m.merged_from.iter().map(String::as_str)).collect();
        let missing: Vec<String> = by_id.keys().filter(|id| !covered.contains(*id)).map(|s| s.to_string()).collect();
        if !missing.is_empty() {
            return Err(CurationError::ProvenanceLoss { missing });
        }

        let mut warnings = Vec::new();
        let mut canonical = payload.canonical_description.trim().to_owned();
        if granularity == Granularity::Subtask {
            let violations = lexicon.check(&canonical);
            if !violations.is_empty() {
                let repaired = lexicon.repair(&canonical);
                warnings.push(format!(
                    "canonical description `{canonical}` repaired to `{repaired}`: {}",
                    violation_list(&violations).join("; ")
                ));
                canonical = repaired;
            }
        }
        let canonical_embedding = self.embedder.embed(&canonical)?;

        // Merged drafts with their member sets; conflict resolution may fold some away.
        let mut drafts: Vec<(BTreeSet<String>, Option<crate::schema::MergedTipDraft>)> = payload
            .merged_tips
            .into_iter()
            .map(|m| (m.merged_from.iter().cloned().collect(), Some(m)))
            .collect();
        let mut conflicts = Vec::new();
        for c in &payload.conflicts {
            let (a, b) = (by_id[c.tip_ids[0].as_str()], by_id[c.tip_ids[1].as_str()]);
            let (winner, loser) = if precedence_cmp(a, b) == Ordering::Greater { (b, a) } else { (a, b) };
            let Some(host) = drafts.iter().position(|(m, d)| d.is_some() && m.contains(&winner.id)) else {
                continue;
            };
            let mut dropped = 0;
            for i in 0..drafts.len() {
                let (m, d) = &drafts[i];
                if i != host && d.is_some() && m.contains(&loser.id) && !m.contains(&winner.id) {
                    let folded = drafts[i].0.clone();
                    drafts[i].1 = None;
                    drafts[host].0.extend(folded);
                    dropped += 1;
                }
            }
            conflicts.push(ConflictResolution {
                winner: winner.id.clone(),
                loser: loser.id.clone(),
                topic: c.topic.clone(),
                dropped,
            });
        }

        let member_ids: Vec<String> = by_id.keys().map(|s| s.to_string()).collect();
        let cluster_id = Cluster::id_for_members(&member_ids);
        let mut merged_tips = Vec::new();
        for (ordinal, (from, draft)) in drafts.into_iter().enumerate() {
            let Some(draft) = draft else { continue };
            let sources: Vec<&Tip> = from.iter().map(|id| by_id[id.as_str()]).collect();
            let source_ids: BTreeSet<String> = sources.iter().flat_map(|t| t.source_trajectory_ids.iter().cloned()).collect();
            let lead = sources.iter().copied().min_by(|a, b| precedence_cmp(a, b)).expect("non-empty merged_from");
            let created_at = sources.iter().map(|t| t.created_at).max().expect("non-empty merged_from");
            let subtask = (granularity == Granularity::Subtask).then(|| canonical.clone());
            merged_tips.push(Tip {
                id: derived_id(&["merged", &cluster_id, &ordinal.to_string()]),
                category: draft.category,
                content: draft.text.content,
                purpose: draft.text.purpose,
                steps: draft.text.steps,
                trigger: draft.text.trigger,
                negative_example: draft.text.negative_example.filter(|s| !s.trim().is_empty()),
                application_context: draft.application_context.map(|c| c.trim().to_lowercase()).filter(|c| !c.is_empty()),
                task_category: draft.task_category.map(|c| c.trim().to_lowercase()).filter(|c| !c.is_empty()),
                priority: draft.priority,
                granularity,
                subtask_description: subtask.clone(),
                generalized_description: subtask,
                index_description: canonical.clone(),
                source_trajectory_ids: source_ids.into_iter().collect(),
                source_outcome: lead.source_outcome.clone(),
                embedding: canonical_embedding.clone(),
                created_at,
            });
        }

        let before: BTreeSet<&String> = members.iter().flat_map(|t| &t.source_trajectory_ids).collect();
        let after: BTreeSet<&String> = merged_tips.iter().flat_map(|t| &t.source_trajectory_ids).collect();
        let missing: Vec<String> = before.difference(&after).map(|s| s.to_string()).collect();
        if !missing.is_empty() {
            return Err(CurationError::ProvenanceLoss { missing });
        }

        let mut merged_ids: Vec<String> = merged_tips.iter().map(|t| t.id.clone()).collect();
        merged_ids.sort();
        let cluster = Cluster {
            id: Cluster::id_for_members(&merged_ids),
            canonical_description: canonical,
            canonical_embedding,
            member_tip_ids: merged_ids,
        };
        Ok(Consolidated { cluster, merged_tips, conflicts, warnings })
    }

    /// Generalizes, clusters and consolidates every tip in `store`,
    /// committing each cluster atomically. Repeats until a pass changes
    /// nothing, so a second invocation is a no-op.
    pub fn run_consolidation(&self, store: &Store) -> Result<ConsolidationReport, CurationError> {
        let start = store.snapshot();
        let mut report = ConsolidationReport {
            revision_before: start.revision,
            revision_after: start.revision,
            tips_before: start.tips.len(),
            tips_after: start.tips.len(),
            ..Default::default()
        };
        if start.tips.is_empty() {
            return Ok(report);
        }
        let lexicon = EntityLexicon::from_store(&start, &self.config.extra_entities);

        // Generalize subtask tips lacking a generalized description, once per distinct text.
        let pending: Vec<Tip> = start
            .tips
            .values()
            .filter(|t| t.granularity == Granularity::Subtask && t.generalized_description.is_none())
            .map(|t| (**t).clone())
            .collect();
        let mut cache: BTreeMap<String, (String, Embedding)> = BTreeMap::new();
        for mut tip in pending {
            let desc = tip.subtask_description.clone().unwrap_or_else(|| tip.index_description.clone());
            let result = match cache.get(&desc) {
                Some(hit) => Ok(hit.clone()),
                None => generalize_description(self.gateway, &lexicon, &desc).and_then(|g| {
                    report.warnings.extend(g.warnings);
                    let e = self.embedder.embed(&g.text)?;
                    cache.insert(desc.clone(), (g.text.clone(), e.clone()));
                    Ok((g.text, e))
                }),
            };
            match result {
                Ok((text, embedding)) => {
                    tip.generalized_description = Some(text.clone());
                    tip.index_description = text;
                    tip.embedding = embedding;
                    let id = tip.id.clone();
                    store.replace_tips([id].into(), vec![tip], vec![])?;
                    report.generalized += 1;
                }
                Err(e) => report.failures.push(ClusterFailure { members: vec![tip.id.clone()], error: e.to_string() }),
            }
        }

        let mut failed: BTreeSet<Vec<String>> = report.failures.iter().map(|f| f.members.clone()).collect();
        let mut granularities = vec![Granularity::Subtask];
        if self.config.cluster_task_tips {
            granularities.insert(0, Granularity::Task);
        }
        for granularity in granularities {
            let max_passes = store.snapshot().tips.len() + 1;
            for _ in 0..max_passes {
                report.passes += 1;
                let snap = store.snapshot();
                let tips: Vec<&Tip> = snap
                    .tips
                    .values()
                    .map(AsRef::as_ref)
                    .filter(|t| t.granularity == granularity && !failed.iter().any(|f| f.contains(&t.id)))
                    .collect();
                let items: Vec<(String, Embedding)> = tips.iter().map(|t| (t.id.clone(), t.embedding.clone())).collect();
                let groups = cluster_tips(&items, self.config.threshold)?;
                let mut changed = false;
                for group in groups {
                    let stored = snap.cluster_of(&group[0]);
                    if stored.is_some_and(|c| c.member_tip_ids == group) {
                        continue;
                    }
                    let members: Vec<Tip> = group.iter().map(|id| snap.tip(id).expect("grouped tip exists").clone()).collect();
                    match self.consolidate_cluster(&members, &lexicon) {
                        Ok(done) => {
                            let removed: BTreeSet<String> = if group.len() == 1 { BTreeSet::new() } else { group.iter().cloned().collect() };
                            let added = if group.len() == 1 { vec![] } else { done.merged_tips.clone() };
                            store.replace_tips(removed, added, vec![done.cluster.clone()])?;
                            report.warnings.extend(done.warnings);
                            report.conflicts_resolved.extend(done.conflicts);
                            report.clusters.push(ClusterSummary {
                                cluster_id: done.cluster.id,
                                granularity,
                                canonical_description: done.cluster.canonical_description,
                                members_before: group.len(),
                                members_after: done.merged_tips.len(),
                            });
                            changed = true;
                        }
                        Err(e) => {
                            tracing::warn!(members = ?group, error = %e, "cluster consolidation failed");
                            report.failures.push(ClusterFailure { members: group.clone(), error: e.to_string() });
                            failed.insert(group);
                        }
                    }
                }
                if !changed {
                    break;
                }
            }
        }

        let end = store.snapshot();
        report.revision_after = end.revision;
        report.tips_after = end.tips.len();
        Ok(report)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct ClusterSummary {
    pub cluster_id: String,
    pub granularity: Granularity,
    pub canonical_description: String,
    pub members_before: usize,
    pub members_after: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct ClusterFailure {
    pub members: Vec<String>,
    pub error: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct ConsolidationReport {
    pub revision_before: u64,
    pub revision_after: u64,
    pub tips_before: usize,
    pub tips_after: usize,
    /// Subtask tips whose description was generalized in this run.
    pub generalized: usize,
    pub clusters: Vec<ClusterSummary>,
    pub conflicts_resolved: Vec<ConflictResolution>,
    pub failures: Vec<ClusterFailure>,
    pub passes: usize,
    pub warnings: Vec<String>,
}

impl ConsolidationReport {
    pub fn clusters_formed(&self) -> usize {
        self.clusters.len()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embed::HashEmbedder;
    use crate::llm::{ChatProvider, ProviderError};
    use serde_json::{json, Value};

    type Respond = Box<dyn Fn(Role, &str) -> Value + Send + Sync>;
    struct FnProvider(Respond);

    impl ChatProvider for FnProvider {
        fn chat(&self, role: Role, _m: Option<&str>, prompt: &str, _t: f64) -> Result<String, ProviderError> {
            Ok((self.0)(role, prompt).to_string())
        }
    }

    fn lexicon() -> EntityLexicon {
        EntityLexicon::new(["Spotify".to_string(), "venmo".into(), "alice_smith".into()])
    }

    #[test]
    fn post_check_finds_all_three_kinds() {
        let v = lexicon().check("Get Spotify password for john.doe@email.com in order to check subscription");
        assert!(v.contains(&Violation::Entity { text: "john.doe@email.com".into() }));
        assert!(v.contains(&Violation::Entity { text: "Spotify".into() }));
        assert!(v.iter().any(|x| matches!(x, Violation::Verb { canonical, .. } if canonical == "retrieve")));
        assert!(v.iter().any(|x| matches!(x, Violation::PurposeClause { .. })));
        assert!(lexicon().check("Retrieve service account credentials").is_empty());
        assert!(lexicon().check("Mark task complete").is_empty());
    }

    #[test]
    fn repair_removes_violations() {
        let lex = lexicon();
        for raw in [
            "Retrieve Spotify password for john.doe@email.com",
            "Get Venmo login credentials for user alice_smith",
            "Retrieve credentials in order to check subscription status",
            "Log in to Spotify with account 12345",
        ] {
            let fixed = lex.repair(raw);
            assert!(lex.check(&fixed).is_empty(), "{raw} -> {fixed}");
            assert!(!fixed.is_empty());
        }
        assert_eq!(lex.repair("Retrieve credentials in order to check subscription status"), "Retrieve credentials");
        assert_eq!(lex.repair("Retrieve Spotify password for john.doe@email.com"), "Retrieve service password");
    }

    #[test]
    fn generalizer_reprompts_once_then_repairs() {
        let calls = std::sync::Arc::new(std::sync::atomic::AtomicUsize::new(0));
        let c = calls.clone();
        let gw = Gateway::with_provider(FnProvider(Box::new(move |_, prompt| {
            c.fetch_add(1, std::sync::atomic::Ordering::SeqCst);
            let input: GeneralizerInput = prompts::extract_input(prompt).unwrap();
            if input.violations.is_empty() {
                json!({"generalized": "Fetch Spotify credentials"})
            } else {
                json!({"generalized": "Fetch service credentials"})
            }
        })));
        let g = generalize_description(&gw, &lexicon(), "Fetch Spotify password").unwrap();
        assert_eq!(calls.load(std::sync::atomic::Ordering::SeqCst), 2);
        assert!(g.repaired);
        assert_eq!(g.text, "Retrieve service credentials");
    }

    #[test]
    fn generic_input_is_fixpoint() {
        let gw = Gateway::with_provider(FnProvider(Box::new(|_, prompt| {
            let input: GeneralizerInput = prompts::extract_input(prompt).unwrap();
            json!({ "generalized": input.description })
        })));
        let g = generalize_description(&gw, &lexicon(), "Mark task complete").unwrap();
        assert_eq!(g.text, "Mark task complete");
        assert!(!g.repaired && g.warnings.is_empty());
    }

    fn items(texts: &[(&str, &str)]) -> Vec<(String, Embedding)> {
        let e = HashEmbedder::default();
        texts.iter().map(|(id, t)| (id.to_string(), e.embed(t).unwrap())).collect()
    }

    #[test]
    fn identical_descriptions_cluster_even_at_threshold_one() {
        let it = items(&[("a", "retrieve credentials"), ("b", "retrieve credentials"), ("c", "paginate songs")]);
        assert_eq!(cluster_tips(&it, 1.0).unwrap(), vec![vec!["a".to_string(), "b".into()], vec!["c".to_string()]]);
    }

    #[test]
    fn threshold_bounds() {
        let it = items(&[("a", "x")]);
        assert!(matches!(cluster_tips(&it, 1.0 + 1e-9), Err(CurationError::InvalidThreshold(_))));
        assert!(cluster_tips(&it, 0.0).is_err());
        assert!(cluster_tips(&[], 0.5).unwrap().is_empty());
    }

    #[test]
    fn precedence_prefers_success_then_recovery() {
        let e = HashEmbedder::default();
        let base = Tip {
            id: "a".into(),
            category: TipCategory::Strategy,
            content: "c".into(),
            purpose: "p".into(),
            steps: vec![],
            trigger: "t".into(),
            negative_example: None,
            application_context: None,
            task_category: None,
            priority: Priority::Critical,
            granularity: Granularity::Subtask,
            subtask_description: Some("d".into()),
            generalized_description: Some("d".into()),
            index_description: "d".into(),
            source_trajectory_ids: vec!["A".into()],
            source_outcome: "failure".into(),
            embedding: e.embed("d").unwrap(),
            created_at: crate::clock::Timestamp::from_unix(5),
        };
        let success = Tip { id: "b".into(), source_outcome: "clean_success".into(), priority: Priority::Low, ..base.clone() };
        assert_eq!(precedence_cmp(&success, &base), Ordering::Less);
        let recovery = Tip { id: "z".into(), category: TipCategory::Recovery, ..success.clone() };
        assert_eq!(precedence_cmp(&recovery, &success), Ordering::Less);
        let newer = Tip { created_at: crate::clock::Timestamp::from_unix(9), ..success.clone() };
        assert_eq!(precedence_cmp(&newer, &success), Ordering::Less);
    }

    use crate::model::Priority;
}
