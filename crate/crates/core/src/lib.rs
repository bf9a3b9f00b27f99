//! Trajectory-informed memory engine for LLM agents.
//!
//! Completed agent trajectories are mined for categorized, provenance-tracked
//! tips ([`extraction`]), curated by generalization, clustering and
//! consolidation ([`curation`]), persisted in an append-only store
//! ([`store`]) and retrieved at runtime as a prompt "guidelines" section
//! ([`retrieval`]). [`engine::Engine`] ties the stages together for the CLI
//! and the HTTP service.

pub mod api;
pub mod clock;
pub mod config;
pub mod curation;
pub mod embed;
pub mod engine;
pub mod extraction;
pub mod llm;
pub mod model;
pub mod prompts;
pub mod retrieval;
pub mod schema;
pub mod store;
