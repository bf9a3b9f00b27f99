//! Durable store for trajectories, tips and clusters.
//!
//! Readers take an immutable [`StoreState`] snapshot (`Arc`) and never block
//! writers; writes are serialized, validated against a copy of the current
//! state, appended to `log.jsonl`, and only then published as the next
//! revision. Recovery loads `checkpoint.json` and replays the log tail.
//!
//! On-disk layout under the store directory:
//!
//! | file              | content                                              |
//! |-------------------|------------------------------------------------------|
//! | `log.jsonl`       | one [`LogRecord`] per committed revision             |
//! | `checkpoint.json` | full state at some revision                          |
//! | `meta.json`       | `{format, embed_dim, revision}`                      |
//! | `lock`            | advisory lock held by the single writer              |

use std::collections::{BTreeMap, BTreeSet};
use std::fs::{self, File, OpenOptions};
use std::io::{self, BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use parking_lot::{Mutex, RwLock};
use schemars::JsonSchema;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{Cluster, Embedding, Granularity, Priority, Tip, TipCategory, TipError, Trajectory};

pub const STORE_FORMAT: u32 = 1;
pub const DEFAULT_CHECKPOINT_EVERY: u64 = 256;

const LOG_FILE: &str = "log.jsonl";
const CHECKPOINT_FILE: &str = "checkpoint.json";
const META_FILE: &str = "meta.json";
const LOCK_FILE: &str = "lock";

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("duplicate id `{0}`")]
    DuplicateId(String),
    #[error("tip `{tip}` references unknown trajectory `{trajectory}`")]
    DanglingProvenance { tip: String, trajectory: String },
    #[error("embedding dimension {got} does not match store dimension {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("replacement drops source trajectory ids {missing:?}")]
    ProvenanceLoss { missing: Vec<String> },
    #[error("unknown tip `{0}`")]
    UnknownTip(String),
    #[error("cluster `{cluster}` references unknown tip `{tip}`")]
    UnknownClusterMember { cluster: String, tip: String },
    #[error("tip `{0}` is assigned to more than one cluster")]
    ClusterOverlap(String),
    #[error(transparent)]
    InvalidTip(#[from] TipError),
    #[error("store is locked by another writer")]
    Locked,
    #[error("store was opened read-only")]
    ReadOnly,
    #[error("store data is corrupt: {0}")]
    Corrupt(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Immutable view of the store at one revision.
#[derive(Debug, Clone, PartialEq)]
pub struct StoreState {
    pub trajectories: BTreeMap<String, Arc<Trajectory>>,
    pub tips: BTreeMap<String, Arc<Tip>>,
    pub clusters: BTreeMap<String, Cluster>,
    pub embed_dim: usize,
    pub revision: u64,
}

/// Filterable tip attributes. `None` fields do not constrain.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetadataFilter {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub category: Option<TipCategory>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub priority: Option<Priority>,
    /// Matches tips with this context or a null (generic) context.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub application_context: Option<String>,
    /// Only generic (null-context) tips.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub generic_only: bool,
    /// Matches tips with this task category or a null one.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub task_category: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub granularity: Option<Granularity>,
}

fn eq_or_null(value: &Option<String>, wanted: &Option<String>) -> bool {
    match (wanted, value) {
        (None, _) | (Some(_), None) => true,
        (Some(w), Some(v)) => w.eq_ignore_ascii_case(v),
    }
}

impl MetadataFilter {
    pub fn matches(&self, tip: &Tip) -> bool {
        self.category.is_none_or(|c| tip.category == c)
            && self.priority.is_none_or(|p| tip.priority == p)
            && self.granularity.is_none_or(|g| tip.granularity == g)
            && (!self.generic_only || tip.application_context.is_none())
            && eq_or_null(&tip.application_context, &self.application_context)
            && eq_or_null(&tip.task_category, &self.task_category)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoredTip {
    pub tip: Arc<Tip>,
    /// Present when the query carried an embedding.
    pub score: Option<f64>,
}

/// Score descending, then tip id ascending.
pub fn rank_order(a: (f64, &str), b: (f64, &str)) -> std::cmp::Ordering {
    b.0.total_cmp(&a.0).then_with(|| a.1.cmp(b.1))
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize, JsonSchema)]
pub struct StoreStats {
    pub revision: u64,
    pub trajectories: usize,
    pub tips: usize,
    pub clusters: usize,
    pub by_category: BTreeMap<String, usize>,
    pub by_priority: BTreeMap<String, usize>,
    pub by_granularity: BTreeMap<String, usize>,
}

impl StoreState {
    pub fn empty(embed_dim: usize) -> Self {
        StoreState {
            trajectories: BTreeMap::new(),
            tips: BTreeMap::new(),
            clusters: BTreeMap::new(),
            embed_dim,
            revision: 0,
        }
    }

    pub fn trajectory(&self, id: &str) -> Option<&Trajectory> {
        self.trajectories.get(id).map(Arc::as_ref)
    }

    pub fn tip(&self, id: &str) -> Option<&Tip> {
        self.tips.get(id).map(Arc::as_ref)
    }

    /// Cluster containing `tip_id`, if any.
    pub fn cluster_of(&self, tip_id: &str) -> Option<&Cluster> {
        self.clusters.values().find(|c| c.member_tip_ids.iter().any(|m| m == tip_id))
    }

    /// Filtered tips; with an embedding, scored by cosine and ranked.
    pub fn query(&self, filter: &MetadataFilter, query_embedding: Option<&Embedding>) -> Result<Vec<ScoredTip>, StoreError> {
        let candidates = self.tips.values().filter(|t| filter.matches(t));
        match query_embedding {
            None => Ok(candidates.map(|t| ScoredTip { tip: Arc::clone(t), score: None }).collect()),
            Some(q) => {
                if q.dim() != self.embed_dim {
                    return Err(StoreError::DimensionMismatch { expected: self.embed_dim, got: q.dim() });
                }
                let mut scored: Vec<ScoredTip> = candidates
                    .map(|t| ScoredTip { score: Some(q.cosine(&t.embedding)), tip: Arc::clone(t) })
                    .collect();
                scored.sort_by(|a, b| rank_order((a.score.unwrap(), &a.tip.id), (b.score.unwrap(), &b.tip.id)));
                Ok(scored)
            }
        }
    }

    pub fn stats(&self) -> StoreStats {
        let mut stats = StoreStats {
            revision: self.revision,
            trajectories: self.trajectories.len(),
            tips: self.tips.len(),
            clusters: self.clusters.len(),
            ..Default::default()
        };
        for c in TipCategory::ALL {
            stats.by_category.insert(c.as_str().to_owned(), 0);
        }
        for p in Priority::ALL {
            stats.by_priority.insert(p.as_str().to_owned(), 0);
        }
        for g in [Granularity::Task, Granularity::Subtask] {
            stats.by_granularity.insert(g.as_str().to_owned(), 0);
        }
        for t in self.tips.values() {
            *stats.by_category.get_mut(t.category.as_str()).unwrap() += 1;
            *stats.by_priority.get_mut(t.priority.as_str()).unwrap() += 1;
            *stats.by_granularity.get_mut(t.granularity.as_str()).unwrap() += 1;
        }
        stats
    }

    /// Application names mentioned in trajectory app hints, lowercased.
    pub fn known_applications(&self) -> BTreeSet<String> {
        let mut apps: BTreeSet<String> = self
            .trajectories
            .values()
            .flat_map(|t| t.app_hints.iter().flatten())
            .map(|a| a.to_lowercase())
            .collect();
        apps.extend(self.tips.values().filter_map(|t| t.application_context.clone()));
        apps
    }

    pub fn known_task_categories(&self) -> BTreeSet<String> {
        self.tips.values().filter_map(|t| t.task_category.clone()).collect()
    }

    /// Checks referential integrity, dimensions and cluster exclusivity.
    pub fn check_integrity(&self) -> Result<(), StoreError> {
        for tip in self.tips.values() {
            self.check_tip(tip)?;
        }
        let mut owner: BTreeMap<&str, &str> = BTreeMap::new();
        for c in self.clusters.values() {
            if c.canonical_embedding.dim() != self.embed_dim {
                return Err(StoreError::DimensionMismatch { expected: self.embed_dim, got: c.canonical_embedding.dim() });
            }
            for m in &c.member_tip_ids {
                if !self.tips.contains_key(m) {
                    return Err(StoreError::UnknownClusterMember { cluster: c.id.clone(), tip: m.clone() });
                }
                if owner.insert(m, &c.id).is_some() {
                    return Err(StoreError::ClusterOverlap(m.clone()));
                }
            }
        }
        Ok(())
    }

    fn check_tip(&self, tip: &Tip) -> Result<(), StoreError> {
        tip.validate()?;
        if tip.embedding.dim() != self.embed_dim {
            return Err(StoreError::DimensionMismatch { expected: self.embed_dim, got: tip.embedding.dim() });
        }
        for src in &tip.source_trajectory_ids {
            if !self.trajectories.contains_key(src) {
                return Err(StoreError::DanglingProvenance { tip: tip.id.clone(), trajectory: src.clone() });
            }
        }
        Ok(())
    }

    fn apply(&mut self, record: &LogRecord) -> Result<(), StoreError> {
        match record {
            LogRecord::PutTrajectory { trajectory, .. } => {
                if self.trajectories.contains_key(&trajectory.id) {
                    return Err(StoreError::DuplicateId(trajectory.id.clone()));
                }
                self.trajectories.insert(trajectory.id.clone(), Arc::new(trajectory.clone()));
            }
            LogRecord::PutTips { tips, .. } => {
                let mut batch = BTreeSet::new();
                for tip in tips {
                    if self.tips.contains_key(&tip.id) || !batch.insert(tip.id.as_str()) {
                        return Err(StoreError::DuplicateId(tip.id.clone()));
                    }
                    self.check_tip(tip)?;
                }
                for tip in tips {
                    self.tips.insert(tip.id.clone(), Arc::new(tip.clone()));
                }
            }
            LogRecord::ReplaceTips { removed_ids, added, clusters, .. } => {
                let mut removed_sources = BTreeSet::new();
                for id in removed_ids {
                    let tip = self.tips.get(id).ok_or_else(|| StoreError::UnknownTip(id.clone()))?;
                    removed_sources.extend(tip.source_trajectory_ids.iter().cloned());
                }
                let mut batch = BTreeSet::new();
                for tip in added {
                    let clash = self.tips.contains_key(&tip.id) && !removed_ids.contains(&tip.id);
                    if clash || !batch.insert(tip.id.as_str()) {
                        return Err(StoreError::DuplicateId(tip.id.clone()));
                    }
                    self.check_tip(tip)?;
                }
                let added_sources: BTreeSet<&String> = added.iter().flat_map(|t| &t.source_trajectory_ids).collect();
                let missing: Vec<String> =
                    removed_sources.iter().filter(|s| !added_sources.contains(s)).cloned().collect();
                if !missing.is_empty() {
                    return Err(StoreError::ProvenanceLoss { missing });
                }

                for id in removed_ids {
                    self.tips.remove(id);
                }
                for tip in added {
                    self.tips.insert(tip.id.clone(), Arc::new(tip.clone()));
                }
                let touched: BTreeSet<&String> =
                    removed_ids.iter().chain(clusters.iter().flat_map(|c| &c.member_tip_ids)).collect();
                self.clusters.retain(|_, c| !c.member_tip_ids.iter().any(|m| touched.contains(m)));
                for c in clusters {
                    self.clusters.insert(c.id.clone(), c.clone());
                }
                self.check_integrity()?;
            }
        }
        self.revision = record.revision();
        Ok(())
    }
}

/// One committed write, tagged by `type`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum LogRecord {
    PutTrajectory {
        revision: u64,
        trajectory: Trajectory,
    },
    PutTips {
        revision: u64,
        tips: Vec<Tip>,
    },
    ReplaceTips {
        revision: u64,
        removed_ids: BTreeSet<String>,
        added: Vec<Tip>,
        clusters: Vec<Cluster>,
    },
}

impl LogRecord {
    pub fn revision(&self) -> u64 {
        match self {
            LogRecord::PutTrajectory { revision, .. }
            | LogRecord::PutTips { revision, .. }
            | LogRecord::ReplaceTips { revision, .. } => *revision,
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct Checkpoint {
    format: u32,
    revision: u64,
    embed_dim: usize,
    trajectories: Vec<Trajectory>,
    tips: Vec<Tip>,
    clusters: Vec<Cluster>,
}

impl Checkpoint {
    fn from_state(s: &StoreState) -> Self {
        Checkpoint {
            format: STORE_FORMAT,
            revision: s.revision,
            embed_dim: s.embed_dim,
            trajectories: s.trajectories.values().map(|t| (**t).clone()).collect(),
            tips: s.tips.values().map(|t| (**t).clone()).collect(),
            clusters: s.clusters.values().cloned().collect(),
        }
    }

    fn into_state(self) -> StoreState {
        StoreState {
            trajectories: self.trajectories.into_iter().map(|t| (t.id.clone(), Arc::new(t))).collect(),
            tips: self.tips.into_iter().map(|t| (t.id.clone(), Arc::new(t))).collect(),
            clusters: self.clusters.into_iter().map(|c| (c.id.clone(), c)).collect(),
            embed_dim: self.embed_dim,
            revision: self.revision,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StoreMeta {
    pub format: u32,
    pub embed_dim: usize,
    pub revision: u64,
}

#[derive(Debug, Clone)]
pub struct StoreOptions {
    /// Dimension for a newly created store; an existing store keeps its own.
    pub embed_dim: usize,
    /// Commits between automatic checkpoints; 0 disables.
    pub checkpoint_every: u64,
    /// fsync the log after each commit.
    pub sync: bool,
    pub read_only: bool,
}

impl Default for StoreOptions {
    fn default() -> Self {
        StoreOptions {
            embed_dim: crate::embed::DEFAULT_EMBED_DIM,
            checkpoint_every: DEFAULT_CHECKPOINT_EVERY,
            sync: true,
            read_only: false,
        }
    }
}

struct Persistence {
    dir: PathBuf,
    log: File,
    _lock: File,
    since_checkpoint: u64,
}

struct Writer {
    persistence: Option<Persistence>,
}

pub struct Store {
    current: RwLock<Arc<StoreState>>,
    writer: Mutex<Writer>,
    options: StoreOptions,
}

fn write_atomic(path: &Path, bytes: &[u8], sync: bool) -> io::Result<()> {
    let tmp = path.with_extension("tmp");
    {
        let mut f = File::create(&tmp)?;
        f.write_all(bytes)?;
        if sync {
            f.sync_all()?;
        }
    }
    fs::rename(&tmp, path)
}

fn to_json_line<T: Serialize>(value: &T) -> Vec<u8> {
    let mut line = serde_json::to_vec(value).expect("record serializes");
    line.push(b'\n');
    line
}

impl Store {
    pub fn in_memory(embed_dim: usize) -> Self {
        Store {
            current: RwLock::new(Arc::new(StoreState::empty(embed_dim))),
            writer: Mutex::new(Writer { persistence: None }),
            options: StoreOptions { embed_dim, checkpoint_every: 0, sync: false, read_only: false },
        }
    }

    /// Opens (creating when absent) the store at `dir`, recovering from the
    /// last checkpoint plus the log tail. A torn final log line is discarded.
    pub fn open(dir: &Path, options: StoreOptions) -> Result<Self, StoreError> {
        if !dir.exists() {
            if options.read_only {
                return Err(StoreError::Io(io::Error::new(io::ErrorKind::NotFound, format!("{} does not exist", dir.display()))));
            }
            fs::create_dir_all(dir)?;
        }
        let lock = OpenOptions::new().create(true).truncate(false).write(true).open(dir.join(LOCK_FILE))?;
        let locked = if options.read_only { lock.try_lock_shared() } else { lock.try_lock() };
        if locked.is_err() {
            return Err(StoreError::Locked);
        }

        let meta_path = dir.join(META_FILE);
        let meta: Option<StoreMeta> = match fs::read(&meta_path) {
            Ok(bytes) => Some(serde_json::from_slice(&bytes).map_err(|e| StoreError::Corrupt(format!("meta.json: {e}")))?),
            Err(e) if e.kind() == io::ErrorKind::NotFound => None,
            Err(e) => return Err(e.into()),
        };
        let embed_dim = meta.as_ref().map_or(options.embed_dim, |m| m.embed_dim);

        let mut state = match fs::read(dir.join(CHECKPOINT_FILE)) {
            Ok(bytes) => {
                let cp: Checkpoint =
                    serde_json::from_slice(&bytes).map_err(|e| StoreError::Corrupt(format!("checkpoint.json: {e}")))?;
                if cp.embed_dim != embed_dim {
                    return Err(StoreError::Corrupt("checkpoint and meta disagree on embed_dim".into()));
                }
                cp.into_state()
            }
            Err(e) if e.kind() == io::ErrorKind::NotFound => StoreState::empty(embed_dim),
            Err(e) => return Err(e.into()),
        };

        let log_path = dir.join(LOG_FILE);
        let mut valid_len: u64 = 0;
        let mut replayed = 0;
        if log_path.exists() {
            let mut reader = BufReader::new(File::open(&log_path)?);
            let mut buf = Vec::new();
            loop {
                buf.clear();
                let n = reader.read_until(b'\n', &mut buf)?;
                if n == 0 || buf.last() != Some(&b'\n') {
                    break;
                }
                let Ok(record) = serde_json::from_slice::<LogRecord>(&buf) else { break };
                let rev = record.revision();
                if rev > state.revision {
                    if rev != state.revision + 1 {
                        return Err(StoreError::Corrupt(format!("log jumps from revision {} to {rev}", state.revision)));
                    }
                    let mut next = state.clone();
                    next.apply(&record)?;
                    state = next;
                    replayed += 1;
                }
                valid_len += n as u64;
            }
        }

        let persistence = if options.read_only {
            None
        } else {
            let log = OpenOptions::new().create(true).truncate(false).read(true).write(true).open(&log_path)?;
            if log.metadata()?.len() != valid_len {
                log.set_len(valid_len)?;
            }
            let log = OpenOptions::new().append(true).open(&log_path)?;
            let meta_now = StoreMeta { format: STORE_FORMAT, embed_dim, revision: state.revision };
            if meta.as_ref() != Some(&meta_now) {
                write_atomic(&meta_path, &to_json_line(&meta_now), options.sync)?;
            }
            Some(Persistence { dir: dir.to_owned(), log, _lock: lock, since_checkpoint: replayed })
        };

        Ok(Store {
            current: RwLock::new(Arc::new(state)),
            writer: Mutex::new(Writer { persistence }),
            options: StoreOptions { embed_dim, ..options },
        })
    }

    pub fn snapshot(&self) -> Arc<StoreState> {
        Arc::clone(&self.current.read())
    }

    pub fn embed_dim(&self) -> usize {
        self.options.embed_dim
    }

    pub fn revision(&self) -> u64 {
        self.current.read().revision
    }

    fn commit(&self, build: impl FnOnce(u64) -> LogRecord) -> Result<u64, StoreError> {
        if self.options.read_only {
            return Err(StoreError::ReadOnly);
        }
        let mut writer = self.writer.lock();
        let base = self.snapshot();
        let record = build(base.revision + 1);
        let mut next = (*base).clone();
        next.apply(&record)?;

        if let Some(p) = writer.persistence.as_mut() {
            p.log.write_all(&to_json_line(&record))?;
            if self.options.sync {
                p.log.sync_data()?;
            }
            let meta = StoreMeta { format: STORE_FORMAT, embed_dim: next.embed_dim, revision: next.revision };
            write_atomic(&p.dir.join(META_FILE), &to_json_line(&meta), self.options.sync)?;
            p.since_checkpoint += 1;
        }

        let revision = next.revision;
        let next = Arc::new(next);
        *self.current.write() = Arc::clone(&next);

        if let Some(p) = writer.persistence.as_mut() {
            if self.options.checkpoint_every > 0 && p.since_checkpoint >= self.options.checkpoint_every {
                Self::write_checkpoint(p, &next, self.options.sync)?;
            }
        }
        Ok(revision)
    }

    fn write_checkpoint(p: &mut Persistence, state: &StoreState, sync: bool) -> Result<(), StoreError> {
        let bytes = to_json_line(&Checkpoint::from_state(state));
        write_atomic(&p.dir.join(CHECKPOINT_FILE), &bytes, sync)?;
        p.log.set_len(0)?;
        if sync {
            p.log.sync_all()?;
        }
        p.since_checkpoint = 0;
        Ok(())
    }

    /// Writes a full checkpoint and truncates the log.
    pub fn checkpoint(&self) -> Result<(), StoreError> {
        let mut writer = self.writer.lock();
        let state = self.snapshot();
        match writer.persistence.as_mut() {
            Some(p) => Self::write_checkpoint(p, &state, self.options.sync),
            None => Ok(()),
        }
    }

    pub fn put_trajectory(&self, trajectory: Trajectory) -> Result<u64, StoreError> {
        self.commit(|revision| LogRecord::PutTrajectory { revision, trajectory })
    }

    /// Adds tips; an empty batch is a no-op returning the current revision.
    pub fn put_tips(&self, tips: Vec<Tip>) -> Result<u64, StoreError> {
        if tips.is_empty() {
            return Ok(self.revision());
        }
        self.commit(|revision| LogRecord::PutTips { revision, tips })
    }

    /// Atomically removes `removed_ids`, adds `added` and installs `clusters`.
    /// Clusters touching a removed tip, or sharing a member with a new
    /// cluster, are dropped in the same revision.
    pub fn replace_tips(&self, removed_ids: BTreeSet<String>, added: Vec<Tip>, clusters: Vec<Cluster>) -> Result<u64, StoreError> {
        if removed_ids.is_empty() && added.is_empty() && clusters.is_empty() {
            return Ok(self.revision());
        }
        self.commit(|revision| LogRecord::ReplaceTips { revision, removed_ids, added, clusters })
    }
}

impl Drop for Store {
    fn drop(&mut self) {
        let writer = self.writer.get_mut();
        if let Some(p) = writer.persistence.as_mut() {
            let _ = p.log.flush();
        }
    }
}
