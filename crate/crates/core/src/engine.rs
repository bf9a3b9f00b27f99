//! Facade wiring store, gateway, embedder and clock into the operations the
//! CLI and the service expose.

use std::collections::BTreeMap;
use std::sync::Arc;

use thiserror::Error;

use crate::api::{ExtractMode, ExtractionSummary, IngestResponse, RetrieveRequest, RetrieveResponse, TipsQuery};
use crate::clock::Clock;
use crate::config::{ConfigError, Settings};
use crate::curation::{generalize_description, ConsolidationReport, CurationConfig, CurationError, Curator, EntityLexicon};
use crate::embed::{EmbedError, Embedder};
use crate::extraction::{ExtractionError, Extractor};
use crate::llm::{Gateway, GatewayError};
use crate::model::{validate_trajectory, RawTrajectory, Tip, Trajectory, ValidationContext, ValidationError};
use crate::retrieval::{self, render_guidelines, RetrievalConfig, RetrievalError};
use crate::store::{MetadataFilter, Store, StoreError, StoreOptions, StoreStats};

/// Coarse error class used for HTTP status codes and CLI exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    /// Malformed input or invalid parameters.
    Validation,
    /// Duplicate id or a conflicting operation in progress.
    Conflict,
    NotFound,
    Io,
    Gateway,
    Internal,
}

impl ErrorKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            ErrorKind::Validation => "validation",
            ErrorKind::Conflict => "conflict",
            ErrorKind::NotFound => "not_found",
            ErrorKind::Io => "io",
            ErrorKind::Gateway => "gateway",
            ErrorKind::Internal => "internal",
        }
    }
}

#[derive(Debug, Error)]
pub enum EngineError {
    #[error(transparent)]
    Validation(#[from] ValidationError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Extraction(#[from] ExtractionError),
    #[error(transparent)]
    Curation(#[from] CurationError),
    #[error(transparent)]
    Retrieval(#[from] RetrievalError),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("{0} not found")]
    NotFound(String),
    #[error("{0}")]
    Invalid(String),
}

fn gateway_kind(e: &GatewayError) -> ErrorKind {
    match e {
        GatewayError::InvalidRequest(_) => ErrorKind::Internal,
        _ => ErrorKind::Gateway,
    }
}

fn embed_kind(e: &EmbedError) -> ErrorKind {
    match e {
        EmbedError::EmptyText => ErrorKind::Validation,
        EmbedError::Provider(_) | EmbedError::WrongDimension { .. } => ErrorKind::Gateway,
        EmbedError::Degenerate(_) => ErrorKind::Internal,
    }
}

fn store_kind(e: &StoreError) -> ErrorKind {
    match e {
        StoreError::DuplicateId(_) => ErrorKind::Conflict,
        StoreError::Io(_) | StoreError::Locked | StoreError::Corrupt(_) | StoreError::ReadOnly => ErrorKind::Io,
        StoreError::UnknownTip(_) => ErrorKind::NotFound,
        _ => ErrorKind::Validation,
    }
}

impl EngineError {
    pub fn kind(&self) -> ErrorKind {
        match self {
            EngineError::Validation(ValidationError::DuplicateId(_)) => ErrorKind::Conflict,
            EngineError::Validation(_) | EngineError::Invalid(_) => ErrorKind::Validation,
            EngineError::Store(e) => store_kind(e),
            EngineError::Extraction(e) => match e {
                ExtractionError::Gateway(g) => gateway_kind(g),
                ExtractionError::Embed(e) => embed_kind(e),
                _ => ErrorKind::Gateway,
            },
            EngineError::Curation(e) => match e {
                CurationError::Gateway(g) => gateway_kind(g),
                CurationError::Embed(e) => embed_kind(e),
                CurationError::Store(s) => store_kind(s),
                CurationError::InvalidThreshold(_) | CurationError::EmptyDescription => ErrorKind::Validation,
                _ => ErrorKind::Gateway,
            },
            EngineError::Retrieval(e) => match e {
                RetrievalError::Embed(e) => embed_kind(e),
                RetrievalError::Store(s) => store_kind(s),
                _ => ErrorKind::Validation,
            },
            EngineError::Config(ConfigError::Read { .. } | ConfigError::Script { .. }) => ErrorKind::Io,
            EngineError::Config(_) => ErrorKind::Validation,
            EngineError::NotFound(_) => ErrorKind::NotFound,
        }
    }
}

pub struct Engine {
    pub store: Store,
    pub gateway: Gateway,
    pub embedder: Arc<dyn Embedder>,
    pub clock: Arc<dyn Clock>,
    pub settings: Settings,
}

impl Engine {
    pub fn new(store: Store, gateway: Gateway, embedder: Arc<dyn Embedder>, clock: Arc<dyn Clock>, settings: Settings) -> Self {
        Engine { store, gateway, embedder, clock, settings }
    }

    /// Opens the store and builds provider, embedder and clock from `settings`.
    pub fn open(settings: Settings) -> Result<Self, EngineError> {
        settings.validate()?;
        let store = Store::open(
            &settings.store,
            StoreOptions {
                embed_dim: settings.embed_dim,
                checkpoint_every: settings.checkpoint_every,
                sync: settings.sync,
                read_only: false,
            },
        )?;
        if store.embed_dim() != settings.embed_dim {
            return Err(EngineError::Invalid(format!(
                "store embedding dimension {} differs from configured {}",
                store.embed_dim(),
                settings.embed_dim
            )));
        }
        let gateway = Gateway::new(settings.provider()?, settings.gateway_config());
        Ok(Engine::new(store, gateway, settings.embedder(), settings.clock(), settings))
    }

    fn extractor(&self) -> Extractor<'_> {
        Extractor::new(&self.gateway, self.embedder.as_ref(), self.clock.as_ref())
    }

    fn curation_config(&self, threshold: Option<f64>) -> CurationConfig {
        let mut c = self.settings.curation();
        if let Some(t) = threshold {
            c.threshold = t;
        }
        c
    }

    /// Validates and stores a trajectory.
    pub fn ingest(&self, raw: RawTrajectory) -> Result<IngestResponse, EngineError> {
        let snap = self.store.snapshot();
        let ctx = ValidationContext { step_cap: self.settings.step_cap, clock: self.clock.as_ref() };
        let t = validate_trajectory(raw, &ctx, |id| snap.trajectories.contains_key(id))?;
        let id = t.id.clone();
        let revision = self.store.put_trajectory(t)?;
        Ok(IngestResponse { id, revision, job_id: None })
    }

    /// Runs extraction for a stored trajectory and stores the resulting tips.
    ///
    /// Subtask tip descriptions are generalized before storage.
    pub fn extract(&self, trajectory_id: &str, mode: ExtractMode) -> Result<ExtractionSummary, EngineError> {
        let snap = self.store.snapshot();
        let t: Trajectory = snap
            .trajectory(trajectory_id)
            .cloned()
            .ok_or_else(|| EngineError::NotFound(format!("trajectory `{trajectory_id}`")))?;
        let x = self.extractor();
        let ir = x.extract_intelligence(&t)?;
        let mut warnings = ir.warnings.clone();
        let mut tips: Vec<Tip> = Vec::new();
        let mut attributions = 0;
        let mut task_tips = 0;
        if mode.task() {
            let attrs = x.attribute_decisions(&ir, &t)?;
            attributions = attrs.len();
            let generated = x.generate_task_tips(&ir, &t, &attrs)?;
            task_tips = generated.len();
            tips.extend(generated);
        }
        let mut subtasks = 0;
        let mut subtask_tips = 0;
        if mode.subtask() {
            let seg = x.segment_subtasks(&t)?;
            warnings.extend(seg.warnings);
            subtasks = seg.subtasks.len();
            let out = x.generate_subtask_tips(&t, &seg.subtasks, ir.outcome.kind)?;
            warnings.extend(out.warnings);
            let lexicon = EntityLexicon::from_store(&snap, &self.settings.extra_entities);
            let mut cache: BTreeMap<String, (String, crate::model::Embedding)> = BTreeMap::new();
            for mut tip in out.tips {
                let desc = tip.subtask_description.clone().expect("subtask tips carry a description");
                if !cache.contains_key(&desc) {
                    let g = generalize_description(&self.gateway, &lexicon, &desc)?;
                    warnings.extend(g.warnings);
                    let e = self.embedder.embed(&g.text).map_err(CurationError::from)?;
                    cache.insert(desc.clone(), (g.text, e));
                }
                let (text, embedding) = cache[&desc].clone();
                tip.generalized_description = Some(text.clone());
                tip.index_description = text;
                tip.embedding = embedding;
                subtask_tips += 1;
                tips.push(tip);
            }
        }
        let tip_ids = tips.iter().map(|t| t.id.clone()).collect();
        let revision = self.store.put_tips(tips)?;
        Ok(ExtractionSummary {
            trajectory_id: t.id,
            outcome: ir.outcome,
            attributions,
            subtasks,
            task_tips,
            subtask_tips,
            tip_ids,
            revision,
            warnings,
        })
    }

    pub fn consolidate(&self, threshold: Option<f64>) -> Result<ConsolidationReport, EngineError> {
        let curator = Curator::new(&self.gateway, self.embedder.as_ref(), self.curation_config(threshold))?;
        Ok(curator.run_consolidation(&self.store)?)
    }

    /// Retrieval config from settings overlaid with request fields.
    pub fn retrieval_config(&self, req: &RetrieveRequest) -> Result<RetrievalConfig, EngineError> {
        let mut cfg = RetrievalConfig {
            tau: self.settings.tau,
            k: self.settings.k,
            llm_tau_floor: self.settings.llm_tau_floor,
            ..Default::default()
        };
        if let Some(s) = req.strategy {
            cfg.strategy = s;
        }
        if let Some(t) = req.tau {
            cfg.tau = t;
        }
        if let Some(k) = req.k {
            cfg.k = k;
        }
        if let Some(g) = &req.granularities {
            cfg.granularities = g.clone();
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn retrieve(&self, req: &RetrieveRequest) -> Result<RetrieveResponse, EngineError> {
        let cfg = self.retrieval_config(req)?;
        let snap = self.store.snapshot();
        let result = retrieval::retrieve(&snap, &self.gateway, self.embedder.as_ref(), &req.task_description, &cfg)?;
        let rendered = render_guidelines(&result);
        Ok(RetrieveResponse { result, rendered })
    }

    pub fn stats(&self) -> StoreStats {
        self.store.snapshot().stats()
    }

    pub fn tip(&self, id: &str) -> Result<Tip, EngineError> {
        self.store.snapshot().tip(id).cloned().ok_or_else(|| EngineError::NotFound(format!("tip `{id}`")))
    }

    /// Tips matching `query`, ordered by id.
    pub fn tips(&self, query: TipsQuery) -> Result<Vec<Tip>, EngineError> {
        let filter: MetadataFilter = query.into();
        Ok(self.store.snapshot().query(&filter, None)?.into_iter().map(|s| (*s.tip).clone()).collect())
    }

    pub fn trajectory(&self, id: &str) -> Result<Trajectory, EngineError> {
        self.store
            .snapshot()
            .trajectory(id)
            .cloned()
            .ok_or_else(|| EngineError::NotFound(format!("trajectory `{id}`")))
    }
}
