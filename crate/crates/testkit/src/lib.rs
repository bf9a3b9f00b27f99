//! Test support for tmem: a deterministic rule book standing in for the
//! model, a recording wrapper that compiles scripted-provider files, fixture
//! paths, and the canonical end-to-end scenario.

pub mod book;
pub mod checks;
pub mod fixtures;
pub mod golden;
pub mod oracle;
pub mod recorder;
pub mod scenario;
pub mod service;
pub mod stress;

use std::sync::Arc;

use tmem_core::llm::ScriptFile;
use tmem_core::store::Store;

pub use book::ScriptBook;
pub use recorder::RecordingProvider;

/// Runs the canonical scenario under the fixture book and returns the replies it used.
pub fn compile_provider_script() -> anyhow::Result<ScriptFile> {
    let recorder = Arc::new(RecordingProvider::new(ScriptBook::fixtures()));
    let settings = tmem_core::config::Settings {
        fixed_clock: Some(fixtures::FIXED_CLOCK_SECS),
        ..Default::default()
    };
    let engine = fixtures::engine_with(Store::in_memory(settings.embed_dim), recorder.clone(), settings);
    scenario::run(&engine)?;
    Ok(recorder.script())
}
