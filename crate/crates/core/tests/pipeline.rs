use tmem_testkit::checks;

#[test]
fn canonical_fixtures_yield_expected_categories() {
    println!("{}", checks::end_to_end_categories().unwrap());
}

#[test]
fn spotify_fixture_segments_into_four_subtasks() {
    println!("{}", checks::spotify_segmentation().unwrap());
}

#[test]
fn guidelines_render_matches_golden() {
    println!("{}", checks::golden_render().unwrap());
}

#[test]
fn scripted_runs_are_byte_identical() {
    println!("{}", checks::determinism().unwrap());
}

#[test]
fn concurrent_readers_see_committed_snapshots() {
    println!("{}", checks::linearizability(10).unwrap());
}

#[test]
fn fixture_outcomes_are_classified() {
    use tmem_core::model::{OutcomeKind, OutcomeSource};
    let engine = tmem_testkit::fixtures::book_engine();
    let (_, extracted) = tmem_testkit::scenario::ingest_and_extract(&engine).unwrap();
    let got: Vec<(&str, OutcomeKind)> = extracted.iter().map(|s| (s.trajectory_id.as_str(), s.outcome.kind)).collect();
    assert_eq!(
        got,
        [
            ("clean-checkout", OutcomeKind::CleanSuccess),
            ("cart-empty-loop", OutcomeKind::InefficientSuccess),
            ("payment-recovery", OutcomeKind::RecoverySuccess),
            ("hard-failure", OutcomeKind::Failure),
            ("spotify-recommended-artist", OutcomeKind::CleanSuccess),
            ("single-step", OutcomeKind::CleanSuccess),
        ]
    );
    let hard = &extracted[3];
    assert_eq!(hard.outcome.source, OutcomeSource::GroundTruth);
    assert!(hard.task_tips > 0);
    for s in &extracted {
        assert!(s.subtasks >= 1, "{} has no subtasks", s.trajectory_id);
        assert!(s.subtask_tips <= 4 * s.subtasks);
    }
}

#[test]
fn engine_rejects_duplicates_and_unknown_ids() {
    use tmem_core::engine::ErrorKind;
    let engine = tmem_testkit::fixtures::book_engine();
    engine.ingest(tmem_testkit::fixtures::trajectory("clean_checkout")).unwrap();
    let dup = engine.ingest(tmem_testkit::fixtures::trajectory("clean_checkout")).unwrap_err();
    assert_eq!(dup.kind(), ErrorKind::Conflict);
    assert_eq!(engine.tip("nope").unwrap_err().kind(), ErrorKind::NotFound);
    let missing = engine.extract("nope", tmem_core::api::ExtractMode::Both).unwrap_err();
    assert_eq!(missing.kind(), ErrorKind::NotFound);
}
