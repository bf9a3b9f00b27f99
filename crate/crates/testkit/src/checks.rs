//! Acceptance checks shared by the per-crate test suites (at reduced scale)
//! and the acceptance target (at full scale). Each returns a one-line detail
//! on success and a diagnosis on failure.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;
use std::time::Instant;

use proptest::prelude::*;
use proptest::test_runner::{Config as PropConfig, TestCaseError, TestRunner};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tmem_core::curation::{cluster_tips, CurationConfig, Curator};
use tmem_core::embed::{Embedder, HashEmbedder};
use tmem_core::engine::Engine;
use tmem_core::extraction::Extractor;
use tmem_core::llm::Gateway;
use tmem_core::model::{Embedding, Granularity, Tip, TipCategory};
use tmem_core::retrieval::{render_guidelines, retrieve_cosine, RetrievalConfig};
use tmem_core::store::{Store, StoreOptions};

use crate::book::ScriptBook;
use crate::fixtures::{golden_path, scripted_settings};
use crate::golden::{five_tip_result, GUIDELINES_GOLDEN};
use crate::oracle::{
    brute_force_cosine, cosine_invariants, provenance_union, random_corpus, random_text, reference_clusters, same_ranking,
    seed_store, TipGen, VOCAB,
};
use crate::scenario;
use crate::stress::{linearizability_trial, StressConfig};

pub type Check = Result<String, String>;

const SCORE_TOL: f64 = 1e-12;
const TAUS: [f64; 3] = [0.5, 0.6, 0.7];
const KS: [usize; 3] = [3, 5, 10];

fn err<E: std::fmt::Display>(ctx: &str) -> impl Fn(E) -> String + '_ {
    move |e| format!("{ctx}: {e}")
}

fn scored(result: &tmem_core::retrieval::RetrievalResult) -> Vec<(String, f64)> {
    result.tips.iter().map(|t| (t.tip.id.clone(), t.score)).collect()
}

fn granularity_choice<R: Rng>(rng: &mut R) -> BTreeSet<Granularity> {
    match rng.gen_range(0..3) {
        0 => [Granularity::Task].into(),
        1 => [Granularity::Subtask].into(),
        _ => [Granularity::Task, Granularity::Subtask].into(),
    }
}

/// A query near the corpus: a stored description with one word swapped, or fresh text.
fn nearby_query<R: Rng>(rng: &mut R, tips: &[Tip]) -> String {
    match tips.choose(rng) {
        Some(t) if rng.gen_bool(0.8) => {
            let mut words: Vec<&str> = t.index_description.split(' ').collect();
            if rng.gen_bool(0.5) {
                let i = rng.gen_range(0..words.len());
                words[i] = VOCAB.choose(rng).unwrap();
            }
            words.join(" ")
        }
        _ => random_text(rng, &VOCAB, 1, 6),
    }
}

fn corpus_store(rng: &mut ChaCha8Rng, embedder: &HashEmbedder, n: usize) -> Result<(Store, Vec<Tip>), String> {
    let tips = random_corpus(rng, embedder, n, TipGen { sources: 20, ungeneralized: false });
    let store = Store::in_memory(embedder.dim());
    seed_store(&store, tips.clone()).map_err(err("seeding store"))?;
    Ok((store, tips))
}

/// Cosine retrieval equals the brute-force oracle on `stores` random stores
/// holding up to `max_tips` tips, for every tau and k of the grid.
pub fn retrieval_oracle(seed: u64, stores: usize, max_tips: usize) -> Check {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let embedder = HashEmbedder::default();
    let mut queries = 0;
    let mut nonempty = 0;
    let mut largest = 0;
    for s in 0..stores {
        let n = if s == 0 { max_tips } else { (rng.gen_range(0.0..(max_tips as f64).ln())).exp().round() as usize };
        largest = largest.max(n);
        let (store, tips) = corpus_store(&mut rng, &embedder, n)?;
        let snap = store.snapshot();
        let query = nearby_query(&mut rng, &tips);
        let granularities = granularity_choice(&mut rng);
        let q = embedder.embed(&query).map_err(err("embedding query"))?;
        for tau in TAUS {
            for k in KS {
                let cfg = RetrievalConfig { tau, k, granularities: granularities.clone(), ..Default::default() };
                let got = scored(&retrieve_cosine(&snap, &embedder, &query, &cfg).map_err(err("retrieve"))?);
                let want = brute_force_cosine(snap.tips.values().map(AsRef::as_ref), &q, tau, k, &granularities);
                same_ranking(&got, &want, SCORE_TOL)
                    .map_err(|e| format!("store {s} ({n} tips), query {query:?}, tau {tau}, k {k}: {e}"))?;
                queries += 1;
                nonempty += usize::from(!got.is_empty());
            }
        }
    }
    Ok(format!(
        "{stores} stores (largest {largest} tips), {queries} queries ({nonempty} non-empty) in {:.1}s",
        start.elapsed().as_secs_f64()
    ))
}

/// Property test: threshold, cardinality and ordering invariants of cosine retrieval.
pub fn retrieval_invariants(cases: u32) -> Check {
    let mut runner = TestRunner::new(PropConfig { cases, failure_persistence: None, ..PropConfig::default() });
    let embedder = HashEmbedder::default();
    let strategy = (any::<u64>(), 0usize..300, 0.01f64..=1.0, 1usize..25, 0usize..3, "[a-z ]{0,40}");
    runner
        .run(&strategy, |(seed, n, tau, k, g, extra)| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (store, tips) = corpus_store(&mut rng, &embedder, n).map_err(TestCaseError::fail)?;
            let mut query = nearby_query(&mut rng, &tips);
            if !extra.trim().is_empty() {
                query.push(' ');
                query.push_str(&extra);
            }
            let granularities: BTreeSet<Granularity> = match g {
                0 => [Granularity::Task].into(),
                1 => [Granularity::Subtask].into(),
                _ => [Granularity::Task, Granularity::Subtask].into(),
            };
            let cfg = RetrievalConfig { tau, k, granularities: granularities.clone(), ..Default::default() };
            let result = retrieve_cosine(&store.snapshot(), &embedder, &query, &cfg).map_err(|e| TestCaseError::fail(e.to_string()))?;
            let got = scored(&result);
            cosine_invariants(&got, tau, k).map_err(TestCaseError::fail)?;
            for t in &result.tips {
                prop_assert!(granularities.contains(&t.tip.granularity));
            }
            Ok(())
        })
        .map_err(|e| e.to_string())?;
    Ok(format!("{cases} property cases"))
}

/// Clustering equals the from-scratch reference on `instances` random instances of at most 12 tips.
pub fn clustering_reference(seed: u64, instances: usize) -> Check {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let embedder = HashEmbedder::default();
    let vocab = &VOCAB[..6];
    let mut merged = 0;
    for i in 0..instances {
        let n = rng.gen_range(1..=12);
        let mut items: Vec<(String, Embedding)> = Vec::new();
        for j in 0..n {
            let e = match items.choose(&mut rng) {
                Some((_, e)) if rng.gen_bool(0.2) => e.clone(),
                _ => embedder.embed(&random_text(&mut rng, vocab, 1, 4)).map_err(err("embed"))?,
            };
            items.push((format!("t{:02}", (j * 7 + i) % 97), e));
        }
        items.sort_by(|a, b| a.0.cmp(&b.0));
        items.dedup_by(|a, b| a.0 == b.0);
        items.shuffle(&mut rng);
        let threshold = [0.3, 0.5, 0.6, 0.7, 0.8, 0.85, 0.9, 0.95, 1.0][rng.gen_range(0..9)];
        let got: BTreeSet<BTreeSet<String>> = cluster_tips(&items, threshold)
            .map_err(err("cluster_tips"))?
            .into_iter()
            .map(|g| g.into_iter().collect())
            .collect();
        let want = reference_clusters(&items, threshold);
        if got != want {
            return Err(format!("instance {i} (threshold {threshold}): got {got:?}, reference {want:?}"));
        }
        merged += items.len() - got.len();
    }
    Ok(format!("{instances} instances ({merged} merges) in {:.1}s", start.elapsed().as_secs_f64()))
}

/// Every file in a store directory except the lock, by name.
pub fn store_files(dir: &Path) -> Result<BTreeMap<String, Vec<u8>>, String> {
    let mut out = BTreeMap::new();
    for entry in std::fs::read_dir(dir).map_err(err("reading store dir"))? {
        let entry = entry.map_err(err("reading store dir"))?;
        let name = entry.file_name().to_string_lossy().into_owned();
        if name == "lock" {
            continue;
        }
        out.insert(name, std::fs::read(entry.path()).map_err(err("reading store file"))?);
    }
    Ok(out)
}

fn conserved(store: &Store, consolidate: impl Fn() -> Result<tmem_core::curation::ConsolidationReport, String>, dir: &Path) -> Result<(usize, usize, usize), String> {
    let before = store.snapshot();
    let report = consolidate()?;
    let after = store.snapshot();
    let (pb, pa) = (provenance_union(before.tips.values().map(AsRef::as_ref)), provenance_union(after.tips.values().map(AsRef::as_ref)));
    if pb != pa {
        return Err(format!("provenance changed: before {pb:?}, after {pa:?}"));
    }
    if after.tips.len() > before.tips.len() {
        return Err(format!("tip count grew from {} to {}", before.tips.len(), after.tips.len()));
    }
    if !report.failures.is_empty() {
        return Err(format!("cluster failures: {:?}", report.failures));
    }
    let files = store_files(dir)?;
    let second = consolidate()?;
    if store_files(dir)? != files || store.snapshot() != after {
        return Err(format!("second run changed the store ({} clusters formed)", second.clusters_formed()));
    }
    Ok((before.tips.len(), after.tips.len(), report.clusters_formed()))
}

fn disk_options() -> StoreOptions {
    StoreOptions { sync: false, ..StoreOptions::default() }
}

/// Provenance conservation, shrinkage and second-run idempotence on the
/// fixture corpus (scripted provider) and on `corpora` random corpora.
pub fn consolidation_conservation(seed: u64, corpora: usize) -> Check {
    let dir = tempfile::tempdir().map_err(err("tempdir"))?;
    let engine = Engine::open(scripted_settings(dir.path())).map_err(err("opening scripted engine"))?;
    scenario::ingest_and_extract(&engine).map_err(err("fixture extraction"))?;
    let (fb, fa, fc) = conserved(&engine.store, || engine.consolidate(None).map_err(err("fixture consolidation")), dir.path())
        .map_err(|e| format!("fixture corpus: {e}"))?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let embedder = HashEmbedder::default();
    let gateway = Gateway::with_provider(ScriptBook::fixtures());
    let mut totals = (0, 0, 0);
    for c in 0..corpora {
        let dir = tempfile::tempdir().map_err(err("tempdir"))?;
        let store = Store::open(dir.path(), disk_options()).map_err(err("opening store"))?;
        let n = rng.gen_range(1..=40);
        let opts = TipGen { sources: rng.gen_range(1..=8), ungeneralized: true };
        let tips = random_corpus(&mut rng, &embedder, n, opts);
        seed_store(&store, tips).map_err(err("seeding store"))?;
        let threshold = [0.6, 0.75, 0.85, 0.95][rng.gen_range(0..4)];
        let config = CurationConfig { threshold, ..CurationConfig::default() };
        let curator = Curator::new(&gateway, &embedder, config).map_err(err("curator"))?;
        let (b, a, k) = conserved(&store, || curator.run_consolidation(&store).map_err(err("consolidation")), dir.path())
            .map_err(|e| format!("random corpus {c}: {e}"))?;
        totals = (totals.0 + b, totals.1 + a, totals.2 + k);
    }
    Ok(format!(
        "fixtures {fb}->{fa} tips ({fc} clusters); {corpora} random corpora {}->{} tips ({} clusters)",
        totals.0, totals.1, totals.2
    ))
}

/// Categories, provenance and generic variants for the three canonical fixtures.
pub fn end_to_end_categories() -> Check {
    let dir = tempfile::tempdir().map_err(err("tempdir"))?;
    let engine = Engine::open(scripted_settings(dir.path())).map_err(err("opening scripted engine"))?;
    scenario::ingest_and_extract(&engine).map_err(err("extraction"))?;
    let snap = engine.store.snapshot();
    let expectations = [
        ("clean-checkout", TipCategory::Strategy, false),
        ("cart-empty-loop", TipCategory::Optimization, true),
        ("payment-recovery", TipCategory::Recovery, false),
    ];
    let mut found = Vec::new();
    for (id, category, needs_negative) in expectations {
        let own: Vec<&Tip> = snap
            .tips
            .values()
            .map(AsRef::as_ref)
            .filter(|t| t.granularity == Granularity::Task && t.source_trajectory_ids.iter().any(|s| s == id))
            .collect();
        if let Some(bad) = own.iter().find(|t| t.source_trajectory_ids != [id.to_owned()]) {
            return Err(format!("{id}: tip {} has provenance {:?}", bad.id, bad.source_trajectory_ids));
        }
        let matching: Vec<&&Tip> = own
            .iter()
            .filter(|t| t.category == category && (!needs_negative || t.negative_example.as_deref().is_some_and(|n| !n.trim().is_empty())))
            .collect();
        if matching.is_empty() {
            let cats: Vec<_> = own.iter().map(|t| t.category.as_str()).collect();
            return Err(format!("{id}: no {} tip{} among {cats:?}", category.as_str(), if needs_negative { " with a negative example" } else { "" }));
        }
        if !own.iter().any(|t| t.is_generic()) {
            return Err(format!("{id}: no generic (null-context) task tip"));
        }
        found.push(format!("{id}: {} {}", matching.len(), category.as_str()));
    }
    Ok(found.join(", "))
}

/// The Spotify fixture segments into 4 ordered, disjoint, covering subtasks with at most 4 tips each.
pub fn spotify_segmentation() -> Check {
    let dir = tempfile::tempdir().map_err(err("tempdir"))?;
    let engine = Engine::open(scripted_settings(dir.path())).map_err(err("opening scripted engine"))?;
    scenario::ingest_and_extract(&engine).map_err(err("extraction"))?;
    let id = "spotify-recommended-artist";
    let t = engine.trajectory(id).map_err(err("stored fixture"))?;
    let x = Extractor::new(&engine.gateway, engine.embedder.as_ref(), engine.clock.as_ref());
    let seg = x.segment_subtasks(&t).map_err(err("segmentation"))?;
    let ranges: Vec<(usize, usize)> = seg.subtasks.iter().map(|s| (s.step_range.start, s.step_range.end)).collect();
    if ranges.len() != 4 {
        return Err(format!("expected 4 subtasks, got {ranges:?}"));
    }
    let mut next = 0;
    for &(s, e) in &ranges {
        if s != next || e < s {
            return Err(format!("ranges {ranges:?} are not ordered, disjoint and contiguous"));
        }
        next = e + 1;
    }
    if next != t.steps.len() {
        return Err(format!("ranges {ranges:?} do not cover {} steps", t.steps.len()));
    }
    let mut per_subtask: BTreeMap<&str, usize> = BTreeMap::new();
    let snap = engine.store.snapshot();
    for tip in snap.tips.values() {
        if tip.granularity == Granularity::Subtask && tip.source_trajectory_ids.iter().any(|s| s == id) {
            *per_subtask.entry(tip.subtask_description.as_deref().unwrap_or("")).or_default() += 1;
        }
    }
    let descs: BTreeSet<&str> = seg.subtasks.iter().map(|s| s.description.as_str()).collect();
    if let Some((d, n)) = per_subtask.iter().find(|(_, n)| **n > 4) {
        return Err(format!("subtask {d:?} has {n} tips"));
    }
    if per_subtask.keys().any(|d| !descs.contains(d)) {
        return Err(format!("tips reference unknown subtasks: {:?}", per_subtask.keys().collect::<Vec<_>>()));
    }
    Ok(format!("ranges {ranges:?}, tips per subtask {:?}", per_subtask.values().collect::<Vec<_>>()))
}

/// Rendered five-tip result equals the golden file. `TMEM_BLESS=1` rewrites it.
pub fn golden_render() -> Check {
    let rendered = render_guidelines(&five_tip_result());
    let path = golden_path(GUIDELINES_GOLDEN);
    if std::env::var_os("TMEM_BLESS").is_some() {
        std::fs::create_dir_all(path.parent().unwrap()).map_err(err("creating golden dir"))?;
        std::fs::write(&path, &rendered).map_err(err("writing golden"))?;
    }
    let want = std::fs::read_to_string(&path).map_err(|e| format!("{}: {e}", path.display()))?;
    if !rendered.starts_with("[PRIORITY: HIGH] Recovery Tip:") {
        return Err("rendering does not open with the HIGH recovery block".into());
    }
    if rendered != want {
        let line = rendered.lines().zip(want.lines()).position(|(a, b)| a != b).map_or(0, |i| i + 1);
        return Err(format!("rendering differs from {} (first differing line {line})", path.display()));
    }
    Ok(format!("{} bytes identical", rendered.len()))
}

/// Two full scripted runs produce identical store files and outputs.
pub fn determinism() -> Check {
    let mut runs = Vec::new();
    for _ in 0..2 {
        let dir = tempfile::tempdir().map_err(err("tempdir"))?;
        let output = {
            let engine = Engine::open(scripted_settings(dir.path())).map_err(err("opening scripted engine"))?;
            let out = scenario::run(&engine).map_err(err("scenario"))?;
            serde_json::to_string(&out).map_err(err("serializing output"))?
        };
        runs.push((store_files(dir.path())?, output));
    }
    let (a, b) = (&runs[0], &runs[1]);
    if a.0 != b.0 {
        let differing: Vec<&String> = a.0.keys().filter(|k| a.0.get(*k) != b.0.get(*k)).collect();
        return Err(format!("store files differ: {differing:?}"));
    }
    if a.1 != b.1 {
        return Err("pipeline outputs differ".into());
    }
    let bytes: usize = a.0.values().map(Vec::len).sum();
    Ok(format!("{} store files ({bytes} bytes) and {} output bytes identical", a.0.len(), a.1.len()))
}

/// `trials` linearizability trials with 8 readers and 100 replacements each.
pub fn linearizability(trials: u64) -> Check {
    let (mut snapshots, mut revisions) = (0, 0);
    for seed in 0..trials {
        let o = linearizability_trial(seed, StressConfig::default()).map_err(|e| format!("trial {seed}: {e}"))?;
        snapshots += o.snapshots;
        revisions += o.revisions;
    }
    Ok(format!("{trials}/{trials} trials, {snapshots} snapshots over {revisions} distinct revisions checked"))
}
