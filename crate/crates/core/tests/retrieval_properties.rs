use std::collections::BTreeSet;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::json;
use tmem_core::embed::{Embedder, HashEmbedder};
use tmem_core::llm::{ChatProvider, Gateway, ProviderError, Role, UnavailableProvider};
use tmem_core::model::{Granularity, TipCategory};
use tmem_core::retrieval::{retrieve_cosine, retrieve_llm_guided, RetrievalConfig, StrategyUsed};
use tmem_core::store::Store;
use tmem_testkit::checks;
use tmem_testkit::oracle::{random_corpus, seed_store, TipGen};

#[test]
fn cosine_matches_brute_force_oracle() {
    let detail = checks::retrieval_oracle(11, 20, 2_000).unwrap();
    println!("{detail}");
}

#[test]
fn cosine_invariants_hold() {
    checks::retrieval_invariants(128).unwrap();
}

struct FixedSelector(serde_json::Value);

impl ChatProvider for FixedSelector {
    fn chat(&self, role: Role, _: Option<&str>, _: &str, _: f64) -> Result<String, ProviderError> {
        assert_eq!(role, Role::RetrievalSelector);
        Ok(self.0.to_string())
    }
}

fn category_strategy() -> impl Strategy<Value = Vec<TipCategory>> {
    Just(TipCategory::ALL.to_vec()).prop_shuffle().prop_flat_map(|v| {
        let n = v.len();
        (Just(v), 0..=n).prop_map(|(v, k)| v[..k].to_vec())
    })
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 96, ..ProptestConfig::default() })]

    /// Selected tips satisfy the selector's filters, the tau floor and k, and
    /// are ordered by preferred-category rank, then score, then id.
    #[test]
    fn llm_guided_respects_selection(
        seed in any::<u64>(),
        n in 0usize..200,
        ctx in proptest::option::of(proptest::sample::select(vec!["amazon", "venmo", "spotify"])),
        task_category in proptest::option::of(proptest::sample::select(vec!["shopping", "payments"])),
        preferred in category_strategy(),
        tau in 0.05f64..0.9,
        k in 1usize..12,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let embedder = HashEmbedder::default();
        let tips = random_corpus(&mut rng, &embedder, n, TipGen { sources: 4, ungeneralized: false });
        let store = Store::in_memory(embedder.dim());
        seed_store(&store, tips.clone()).unwrap();
        let query = tips.first().map_or("retrieve service".to_owned(), |t| t.index_description.clone());
        let gateway = Gateway::with_provider(FixedSelector(json!({
            "application_context": ctx,
            "task_category": task_category,
            "preferred_categories": preferred,
        })));
        let cfg = RetrievalConfig { tau, k, ..Default::default() };
        let r = retrieve_llm_guided(&store.snapshot(), &gateway, &embedder, &query, &cfg).unwrap();
        prop_assert_eq!(r.strategy_used, StrategyUsed::LlmGuided);
        prop_assert!(r.tips.len() <= k);

        let q = embedder.embed(&query).unwrap();
        let rank = |c: TipCategory| preferred.iter().position(|p| *p == c).unwrap_or(preferred.len());
        let allowed = |t: &tmem_core::model::Tip| {
            ctx.is_none_or(|c| t.application_context.as_deref().is_none_or(|v| v == c))
                && task_category.is_none_or(|c| t.task_category.as_deref().is_none_or(|v| v == c))
        };
        let mut want: Vec<(usize, f64, String)> = tips
            .iter()
            .filter(|t| allowed(t))
            .map(|t| (rank(t.category), q.cosine(&t.embedding), t.id.clone()))
            .filter(|(_, s, _)| *s >= tau)
            .collect();
        want.sort_by(|a, b| a.0.cmp(&b.0).then(b.1.total_cmp(&a.1)).then(a.2.cmp(&b.2)));
        want.truncate(k);
        let got: Vec<String> = r.tips.iter().map(|t| t.tip.id.clone()).collect();
        let want: Vec<String> = want.into_iter().map(|w| w.2).collect();
        prop_assert_eq!(got, want);
    }
}

#[test]
fn unavailable_selector_falls_back_to_cosine() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let embedder = HashEmbedder::default();
    let tips = random_corpus(&mut rng, &embedder, 60, TipGen { sources: 4, ungeneralized: false });
    let store = Store::in_memory(embedder.dim());
    seed_store(&store, tips.clone()).unwrap();
    let gateway = Gateway::with_provider(UnavailableProvider);
    let cfg = RetrievalConfig { tau: 0.3, k: 7, ..Default::default() };
    let snap = store.snapshot();
    let fallback = retrieve_llm_guided(&snap, &gateway, &embedder, &tips[0].index_description, &cfg).unwrap();
    let cosine = retrieve_cosine(&snap, &embedder, &tips[0].index_description, &cfg).unwrap();
    assert_eq!(fallback.strategy_used, StrategyUsed::CosineFallback);
    assert_eq!(fallback.tips, cosine.tips);
    assert_eq!(fallback.warnings.len(), 1);
}

#[test]
fn granularity_restriction_is_honoured() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let embedder = HashEmbedder::default();
    let tips = random_corpus(&mut rng, &embedder, 80, TipGen { sources: 4, ungeneralized: false });
    let store = Store::in_memory(embedder.dim());
    seed_store(&store, tips.clone()).unwrap();
    for g in [Granularity::Task, Granularity::Subtask] {
        let cfg = RetrievalConfig { tau: 0.1, k: 50, granularities: BTreeSet::from([g]), ..Default::default() };
        let r = retrieve_cosine(&store.snapshot(), &embedder, &tips[3].index_description, &cfg).unwrap();
        assert!(!r.tips.is_empty());
        assert!(r.tips.iter().all(|t| t.tip.granularity == g));
    }
}

#[test]
fn invalid_parameters_are_rejected() {
    let store = Store::in_memory(HashEmbedder::default().dim());
    let embedder = HashEmbedder::default();
    for cfg in [
        RetrievalConfig { tau: 0.0, ..Default::default() },
        RetrievalConfig { tau: 1.5, ..Default::default() },
        RetrievalConfig { k: 0, ..Default::default() },
        RetrievalConfig { granularities: BTreeSet::new(), ..Default::default() },
    ] {
        assert!(retrieve_cosine(&store.snapshot(), &embedder, "query", &cfg).is_err());
    }
    assert!(retrieve_cosine(&store.snapshot(), &embedder, "   ", &RetrievalConfig::default()).is_err());
}
