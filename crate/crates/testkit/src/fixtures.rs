//! Paths to the checked-in fixtures and engine builders used across tests.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use tmem_core::clock::FixedClock;
use tmem_core::config::{ProviderKind, Settings};
use tmem_core::embed::HashEmbedder;
use tmem_core::engine::Engine;
use tmem_core::llm::{ChatProvider, Gateway, GatewayConfig};
use tmem_core::model::RawTrajectory;
use tmem_core::store::{Store, StoreOptions};

/// "Now" for every fixture run: 2025-10-09T08:53:20Z.
pub const FIXED_CLOCK_SECS: i64 = 1_760_000_000;

/// Fixture file stems in ingestion order.
pub const FIXTURES: [&str; 6] =
    ["clean_checkout", "cart_empty_loop", "payment_recovery", "hard_failure", "spotify_recommended_artist", "single_step"];

pub fn workspace_root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..").canonicalize().expect("workspace root exists")
}

pub fn fixtures_dir() -> PathBuf {
    workspace_root().join("fixtures")
}

pub fn trajectory_path(stem: &str) -> PathBuf {
    fixtures_dir().join("trajectories").join(format!("{stem}.json"))
}

pub fn trajectory(stem: &str) -> RawTrajectory {
    let path = trajectory_path(stem);
    let text = std::fs::read_to_string(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
    serde_json::from_str(&text).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

/// Compiled scripted-provider responses for the canonical scenario.
pub fn provider_script_path() -> PathBuf {
    fixtures_dir().join("scripted").join("provider.json")
}

pub fn golden_path(name: &str) -> PathBuf {
    fixtures_dir().join("golden").join(name)
}

/// Settings for a scripted run against the compiled provider file.
pub fn scripted_settings(store: &Path) -> Settings {
    Settings {
        store: store.to_path_buf(),
        provider: ProviderKind::Scripted,
        script: Some(provider_script_path()),
        fixed_clock: Some(FIXED_CLOCK_SECS),
        ..Settings::default()
    }
}

/// Engine over `store` answering model calls with `provider`.
pub fn engine_with(store: Store, provider: Arc<dyn ChatProvider>, settings: Settings) -> Engine {
    let gateway = Gateway::new(provider, GatewayConfig::default());
    Engine::new(
        store,
        gateway,
        Arc::new(HashEmbedder::new(settings.embed_dim)),
        Arc::new(FixedClock::at_unix(FIXED_CLOCK_SECS)),
        settings,
    )
}

/// In-memory engine driven by the fixture [`ScriptBook`](crate::book::ScriptBook).
pub fn book_engine() -> Engine {
    let settings = Settings { fixed_clock: Some(FIXED_CLOCK_SECS), ..Settings::default() };
    engine_with(Store::in_memory(settings.embed_dim), Arc::new(crate::book::ScriptBook::fixtures()), settings)
}

/// On-disk engine driven by the fixture book.
pub fn book_engine_at(dir: &Path) -> Engine {
    let settings = Settings { store: dir.to_path_buf(), fixed_clock: Some(FIXED_CLOCK_SECS), ..Settings::default() };
    let store = Store::open(dir, StoreOptions::default()).expect("store opens");
    engine_with(store, Arc::new(crate::book::ScriptBook::fixtures()), settings)
}
