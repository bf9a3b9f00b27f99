//! The canonical end-to-end run over the fixture corpus.
//!
//! The compiled provider file holds exactly the replies this scenario needs,
//! so a scripted engine can replay it without the rule book.

use serde::Serialize;
use tmem_core::api::{ExtractMode, ExtractionSummary, IngestResponse, RetrieveRequest, RetrieveResponse};
use tmem_core::curation::ConsolidationReport;
use tmem_core::engine::{Engine, EngineError};
use tmem_core::retrieval::Strategy;

use crate::fixtures::{trajectory, FIXTURES};

/// Queries retrieved with both strategies at the end of the scenario.
pub const QUERIES: [&str; 5] = [
    "Complete my pending Venmo payment requests",
    "Check out the items in my Amazon cart",
    "Empty my Amazon shopping cart",
    "Name the artist most recommended to me on Spotify",
    "Authenticate with service and retrieve service data",
];

#[derive(Debug, Clone, Serialize)]
pub struct ScenarioOutput {
    pub ingested: Vec<IngestResponse>,
    pub extracted: Vec<ExtractionSummary>,
    pub consolidations: Vec<ConsolidationReport>,
    pub retrievals: Vec<RetrieveResponse>,
}

pub fn retrieve_requests() -> Vec<RetrieveRequest> {
    QUERIES
        .iter()
        .flat_map(|q| {
            [Strategy::Cosine, Strategy::LlmGuided].map(|s| RetrieveRequest {
                task_description: (*q).to_owned(),
                strategy: Some(s),
                tau: None,
                k: None,
                granularities: None,
            })
        })
        .collect()
}

/// Ingests every fixture with both extraction levels.
pub fn ingest_and_extract(engine: &Engine) -> Result<(Vec<IngestResponse>, Vec<ExtractionSummary>), EngineError> {
    let mut ingested = Vec::new();
    let mut extracted = Vec::new();
    for stem in FIXTURES {
        let r = engine.ingest(trajectory(stem))?;
        extracted.push(engine.extract(&r.id, ExtractMode::Both)?);
        ingested.push(r);
    }
    Ok((ingested, extracted))
}

/// Ingest, extract, consolidate twice, then retrieve every query with both strategies.
pub fn run(engine: &Engine) -> Result<ScenarioOutput, EngineError> {
    let (ingested, extracted) = ingest_and_extract(engine)?;
    let consolidations = vec![engine.consolidate(None)?, engine.consolidate(None)?];
    let retrievals = retrieve_requests().iter().map(|r| engine.retrieve(r)).collect::<Result<_, _>>()?;
    Ok(ScenarioOutput { ingested, extracted, consolidations, retrievals })
}
