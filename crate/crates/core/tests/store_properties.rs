use std::collections::BTreeSet;
use std::sync::Arc;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tmem_core::embed::{Embedder, HashEmbedder};
use tmem_core::model::{Granularity, Priority, Tip, TipCategory};
use tmem_core::store::{MetadataFilter, Store, StoreOptions, StoreState};
use tmem_testkit::oracle::{random_corpus, seed_store, stub_trajectory, TipGen};

fn opt_matches(value: &Option<String>, wanted: &Option<String>) -> bool {
    match wanted {
        None => true,
        Some(w) => value.as_ref().is_none_or(|v| v.to_lowercase() == w.to_lowercase()),
    }
}

fn brute_filter(tips: &[Tip], f: &MetadataFilter) -> BTreeSet<String> {
    tips.iter()
        .filter(|t| f.category.is_none_or(|c| c == t.category))
        .filter(|t| f.priority.is_none_or(|p| p == t.priority))
        .filter(|t| f.granularity.is_none_or(|g| g == t.granularity))
        .filter(|t| !f.generic_only || t.application_context.is_none())
        .filter(|t| opt_matches(&t.application_context, &f.application_context))
        .filter(|t| opt_matches(&t.task_category, &f.task_category))
        .map(|t| t.id.clone())
        .collect()
}

fn filter_strategy() -> impl Strategy<Value = MetadataFilter> {
    (
        proptest::option::of(proptest::sample::select(TipCategory::ALL.to_vec())),
        proptest::option::of(proptest::sample::select(Priority::ALL.to_vec())),
        proptest::option::of(proptest::sample::select(vec!["amazon", "Venmo", "spotify", "gmail"])),
        any::<bool>(),
        proptest::option::of(proptest::sample::select(vec!["shopping", "payments", "music"])),
        proptest::option::of(proptest::sample::select(vec![Granularity::Task, Granularity::Subtask])),
    )
        .prop_map(|(category, priority, ctx, generic_only, task_category, granularity)| MetadataFilter {
            category,
            priority,
            application_context: ctx.map(str::to_owned),
            generic_only,
            task_category: task_category.map(str::to_owned),
            granularity,
        })
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 64, ..ProptestConfig::default() })]

    #[test]
    fn query_matches_brute_force_filter(seed in any::<u64>(), n in 0usize..120, filter in filter_strategy(), text in "[a-z]{1,8}( [a-z]{1,8}){0,3}") {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let embedder = HashEmbedder::default();
        let tips = random_corpus(&mut rng, &embedder, n, TipGen { sources: 5, ungeneralized: false });
        let store = Store::in_memory(embedder.dim());
        seed_store(&store, tips.clone()).unwrap();
        let snap = store.snapshot();

        let plain: BTreeSet<String> = snap.query(&filter, None).unwrap().into_iter().map(|s| s.tip.id.clone()).collect();
        prop_assert_eq!(&plain, &brute_filter(&tips, &filter));

        let q = embedder.embed(&text).unwrap();
        let ranked = snap.query(&filter, Some(&q)).unwrap();
        let ids: BTreeSet<String> = ranked.iter().map(|s| s.tip.id.clone()).collect();
        prop_assert_eq!(&ids, &plain);
        for w in ranked.windows(2) {
            let (a, b) = (w[0].score.unwrap(), w[1].score.unwrap());
            prop_assert!(a > b || (a == b && w[0].tip.id < w[1].tip.id));
        }
    }

    #[test]
    fn revision_increments_once_per_commit(k in 1usize..40) {
        let store = Store::in_memory(16);
        for i in 0..k {
            prop_assert_eq!(store.put_trajectory(stub_trajectory(&format!("t{i}"))).unwrap(), i as u64 + 1);
        }
    }
}

fn copy_dir(from: &std::path::Path, to: &std::path::Path) {
    std::fs::create_dir_all(to).unwrap();
    for e in std::fs::read_dir(from).unwrap() {
        let e = e.unwrap();
        if e.file_name() != "lock" {
            std::fs::copy(e.path(), to.join(e.file_name())).unwrap();
        }
    }
}

/// Any byte prefix of the log recovers exactly the state at the last complete record.
#[test]
fn truncated_log_recovers_a_committed_prefix() {
    let dir = tempfile::tempdir().unwrap();
    let live = dir.path().join("live");
    let opts = StoreOptions { embed_dim: 32, checkpoint_every: 0, sync: false, read_only: false };
    let embedder = HashEmbedder::new(32);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut states: Vec<Arc<StoreState>> = Vec::new();
    let mut line_ends = vec![0u64];
    {
        let store = Store::open(&live, opts.clone()).unwrap();
        states.push(store.snapshot());
        let tips = random_corpus(&mut rng, &embedder, 12, TipGen { sources: 3, ungeneralized: false });
        for s in ["traj-00", "traj-01", "traj-02"] {
            store.put_trajectory(stub_trajectory(s)).unwrap();
            states.push(store.snapshot());
            line_ends.push(std::fs::metadata(live.join("log.jsonl")).unwrap().len());
        }
        for chunk in tips.chunks(4) {
            store.put_tips(chunk.to_vec()).unwrap();
            states.push(store.snapshot());
            line_ends.push(std::fs::metadata(live.join("log.jsonl")).unwrap().len());
        }
        let removed: BTreeSet<String> = [tips[0].id.clone()].into();
        let mut replacement = tips[0].clone();
        replacement.id = "replacement".into();
        store.replace_tips(removed, vec![replacement], vec![]).unwrap();
        states.push(store.snapshot());
        line_ends.push(std::fs::metadata(live.join("log.jsonl")).unwrap().len());
    }
    let log = std::fs::read(live.join("log.jsonl")).unwrap();
    assert_eq!(log.len() as u64, *line_ends.last().unwrap());

    let cuts: BTreeSet<u64> = (0..=log.len() as u64).step_by(97).chain(line_ends.iter().copied()).chain(line_ends.iter().map(|e| e.saturating_sub(1))).collect();
    for cut in cuts {
        let trial = dir.path().join(format!("cut-{cut}"));
        copy_dir(&live, &trial);
        std::fs::write(trial.join("log.jsonl"), &log[..cut as usize]).unwrap();
        let complete = line_ends.iter().filter(|&&e| e <= cut).count() - 1;
        let reopened = Store::open(&trial, opts.clone()).unwrap();
        assert_eq!(*reopened.snapshot(), *states[complete], "cut at byte {cut}");
        reopened.snapshot().check_integrity().unwrap();
        // The torn tail is discarded, so the next commit lands cleanly.
        reopened.put_trajectory(stub_trajectory("after-crash")).unwrap();
        drop(reopened);
        let again = Store::open(&trial, opts.clone()).unwrap();
        assert_eq!(again.revision(), states[complete].revision + 1);
    }
}

#[test]
fn checkpoint_then_log_tail_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let opts = StoreOptions { embed_dim: 32, checkpoint_every: 3, sync: false, read_only: false };
    let want = {
        let store = Store::open(dir.path(), opts.clone()).unwrap();
        for i in 0..10 {
            store.put_trajectory(stub_trajectory(&format!("t{i}"))).unwrap();
        }
        store.snapshot()
    };
    let store = Store::open(dir.path(), opts).unwrap();
    assert_eq!(*store.snapshot(), *want);
}
