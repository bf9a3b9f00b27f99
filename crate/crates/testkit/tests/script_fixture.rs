use tmem_core::engine::Engine;
use tmem_testkit::fixtures::{book_engine, provider_script_path, scripted_settings};
use tmem_testkit::{compile_provider_script, scenario};

#[test]
fn compiled_provider_file_is_current() {
    let compiled = compile_provider_script().unwrap().to_pretty_json();
    let on_disk = std::fs::read_to_string(provider_script_path()).unwrap();
    assert!(
        compiled == on_disk,
        "fixtures/scripted/provider.json is stale; run `cargo run -p tmem-testkit --bin record-fixtures`"
    );
}

#[test]
fn scripted_replay_matches_book_run() {
    let book = scenario::run(&book_engine()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let engine = Engine::open(scripted_settings(dir.path())).unwrap();
    let replay = scenario::run(&engine).unwrap();
    assert_eq!(serde_json::to_value(&book).unwrap(), serde_json::to_value(&replay).unwrap());
}
