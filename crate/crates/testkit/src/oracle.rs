//! Independent reference implementations and random corpus generators.
//!
//! Every oracle here recomputes its answer from scratch with the plainest
//! possible algorithm; none of them call the code they check.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::Rng;
use tmem_core::clock::Timestamp;
use tmem_core::embed::{Embedder, HashEmbedder};
use tmem_core::model::{Embedding, Granularity, Priority, Tip, TipCategory};

/// Small vocabulary so random descriptions overlap and produce ties.
pub const VOCAB: [&str; 24] = [
    "retrieve", "service", "credentials", "authenticate", "cart", "items", "payment", "method", "checkout", "empty",
    "songs", "artist", "paginated", "requests", "verify", "prerequisites", "account", "password", "order", "send",
    "friends", "list", "recommended", "task",
];

pub const CONTEXTS: [Option<&str>; 4] = [None, Some("amazon"), Some("venmo"), Some("spotify")];
pub const TASK_CATEGORIES: [Option<&str>; 3] = [None, Some("shopping"), Some("payments")];

pub fn random_text<R: Rng>(rng: &mut R, vocab: &[&str], min: usize, max: usize) -> String {
    let n = rng.gen_range(min..=max);
    (0..n).map(|_| *vocab.choose(rng).expect("non-empty vocabulary")).collect::<Vec<_>>().join(" ")
}

/// Options for [`random_tip`].
#[derive(Debug, Clone, Copy)]
pub struct TipGen {
    pub sources: usize,
    /// Subtask tips left without a generalized description.
    pub ungeneralized: bool,
}

/// A valid tip indexed by `text`.
pub fn random_tip<R: Rng>(rng: &mut R, embedder: &HashEmbedder, id: String, text: &str, opts: TipGen) -> Tip {
    tip_with_embedding(rng, id, text, embedder.embed(text).expect("non-empty text"), opts)
}

fn tip_with_embedding<R: Rng>(rng: &mut R, id: String, text: &str, embedding: Embedding, opts: TipGen) -> Tip {
    let category = *TipCategory::ALL.choose(rng).unwrap();
    let granularity = if rng.gen_bool(0.5) { Granularity::Task } else { Granularity::Subtask };
    let subtask = granularity == Granularity::Subtask;
    let n_sources = rng.gen_range(1..=2);
    let mut sources: BTreeSet<String> = BTreeSet::new();
    while sources.len() < n_sources.min(opts.sources) {
        sources.insert(format!("traj-{:02}", rng.gen_range(0..opts.sources)));
    }
    let generalized = subtask && !(opts.ungeneralized && rng.gen_bool(0.5));
    Tip {
        id,
        category,
        content: format!("Tip about {text}"),
        purpose: "random".into(),
        steps: (0..rng.gen_range(0..3)).map(|i| format!("step {i}")).collect(),
        trigger: format!("When {text}"),
        negative_example: rng.gen_bool(0.3).then(|| "Do not repeat calls".to_owned()),
        application_context: CONTEXTS.choose(rng).unwrap().map(str::to_owned),
        task_category: TASK_CATEGORIES.choose(rng).unwrap().map(str::to_owned),
        priority: *Priority::ALL.choose(rng).unwrap(),
        granularity,
        subtask_description: subtask.then(|| text.to_owned()),
        generalized_description: generalized.then(|| text.to_owned()),
        index_description: text.to_owned(),
        source_trajectory_ids: sources.into_iter().collect(),
        source_outcome: ["clean_success", "recovery_success", "failure", "inefficient_success"].choose(rng).unwrap().to_string(),
        embedding,
        created_at: Timestamp::from_unix(1_700_000_000 + rng.gen_range(0..1000)),
    }
}

/// `n` tips whose descriptions repeat often enough to create score ties.
pub fn random_corpus<R: Rng>(rng: &mut R, embedder: &HashEmbedder, n: usize, opts: TipGen) -> Vec<Tip> {
    let pool: Vec<(String, Embedding)> = (0..(n / 3).max(1))
        .map(|_| {
            let text = random_text(rng, &VOCAB, 2, 6);
            let e = embedder.embed(&text).expect("non-empty text");
            (text, e)
        })
        .collect();
    (0..n)
        .map(|i| {
            let (text, e) = pool.choose(rng).unwrap().clone();
            tip_with_embedding(rng, format!("tip-{i:05}"), &text, e, opts)
        })
        .collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for i in 0..a.len() {
        s += a[i] * b[i];
    }
    s
}

/// Scan, filter by `tau`, sort by score descending then id, keep `k`.
pub fn brute_force_cosine<'a>(
    tips: impl IntoIterator<Item = &'a Tip>,
    query: &Embedding,
    tau: f64,
    k: usize,
    granularities: &BTreeSet<Granularity>,
) -> Vec<(String, f64)> {
    let mut hits: Vec<(String, f64)> = Vec::new();
    for t in tips {
        if !granularities.contains(&t.granularity) {
            continue;
        }
        let s = dot(query.as_slice(), t.embedding.as_slice());
        if s >= tau {
            hits.push((t.id.clone(), s));
        }
    }
    hits.sort_by(|a, b| match b.1.partial_cmp(&a.1).unwrap() {
        Ordering::Equal => a.0.cmp(&b.0),
        o => o,
    });
    hits.truncate(k);
    hits
}

/// Compares a result against the oracle: same ids in the same order, scores within `tol`.
pub fn same_ranking(got: &[(String, f64)], want: &[(String, f64)], tol: f64) -> Result<(), String> {
    if got.len() != want.len() {
        return Err(format!("length {} != oracle {}", got.len(), want.len()));
    }
    for (i, (g, w)) in got.iter().zip(want).enumerate() {
        if g.0 != w.0 {
            return Err(format!("position {i}: id {} != oracle {}", g.0, w.0));
        }
        if (g.1 - w.1).abs() > tol {
            return Err(format!("position {i}: score {} vs oracle {}", g.1, w.1));
        }
    }
    Ok(())
}

/// Threshold, cardinality and order invariants of a cosine result.
pub fn cosine_invariants(got: &[(String, f64)], tau: f64, k: usize) -> Result<(), String> {
    if got.len() > k {
        return Err(format!("{} results exceed k={k}", got.len()));
    }
    if let Some((id, s)) = got.iter().find(|(_, s)| *s < tau) {
        return Err(format!("{id} has score {s} < tau {tau}"));
    }
    for w in got.windows(2) {
        let ok = w[0].1 > w[1].1 || (w[0].1 == w[1].1 && w[0].0 < w[1].0);
        if !ok {
            return Err(format!("{:?} precedes {:?}", w[0], w[1]));
        }
    }
    Ok(())
}

/// `round(sim * 2^40)` computed independently of the curation module.
fn quantize(sim: f64) -> i128 {
    let scale = (1u64 << 40) as f64;
    (sim.clamp(-1.0, 1.0) * scale).round() as i128
}

/// Average-linkage reference: every round recomputes every inter-cluster
/// average from the raw pairwise similarities, merges the best pair (ties to
/// the smallest pair of minimum ids) and stops below `threshold`.
pub fn reference_clusters(items: &[(String, Embedding)], threshold: f64) -> BTreeSet<BTreeSet<String>> {
    let sim: BTreeMap<(&str, &str), i128> = items
        .iter()
        .flat_map(|a| items.iter().map(move |b| ((a.0.as_str(), b.0.as_str()), quantize(dot(a.1.as_slice(), b.1.as_slice())))))
        .collect();
    let tq = (threshold * (1u64 << 40) as f64).round() as i128;
    let mut clusters: Vec<BTreeSet<&str>> = items.iter().map(|(id, _)| BTreeSet::from([id.as_str()])).collect();
    loop {
        clusters.sort_by(|a, b| a.first().cmp(&b.first()));
        let mut best: Option<(usize, usize, i128, i128)> = None;
        for i in 0..clusters.len() {
            for j in (i + 1)..clusters.len() {
                let mut sum = 0i128;
                for a in &clusters[i] {
                    for b in &clusters[j] {
                        sum += sim[&(*a, *b)];
                    }
                }
                let pairs = (clusters[i].len() * clusters[j].len()) as i128;
                let better = match best {
                    None => true,
                    Some((_, _, bs, bp)) => sum * bp > bs * pairs,
                };
                if better {
                    best = Some((i, j, sum, pairs));
                }
            }
        }
        match best {
            Some((i, j, sum, pairs)) if sum >= tq * pairs => {
                let moved = clusters.remove(j);
                clusters[i].extend(moved);
            }
            _ => break,
        }
    }
    clusters.into_iter().map(|c| c.into_iter().map(str::to_owned).collect()).collect()
}

/// Multiset union of every tip's source list: each id with its largest multiplicity in any single tip.
pub fn provenance_union<'a>(tips: impl IntoIterator<Item = &'a Tip>) -> BTreeMap<String, usize> {
    let mut out: BTreeMap<String, usize> = BTreeMap::new();
    for t in tips {
        let mut local: BTreeMap<&str, usize> = BTreeMap::new();
        for s in &t.source_trajectory_ids {
            *local.entry(s).or_default() += 1;
        }
        for (s, n) in local {
            let e = out.entry(s.to_owned()).or_default();
            *e = (*e).max(n);
        }
    }
    out
}

/// Minimal valid trajectory used as a provenance target.
pub fn stub_trajectory(id: &str) -> tmem_core::model::Trajectory {
    tmem_core::model::Trajectory {
        id: id.to_owned(),
        task_description: format!("stub task {id}"),
        steps: vec![tmem_core::model::Step {
            index: 0,
            context: String::new(),
            response: "Task complete.".into(),
            thoughts: vec![],
            action: None,
            action_result: None,
        }],
        evaluation_report: None,
        app_hints: None,
        created_at: Timestamp::from_unix(1_700_000_000),
    }
}

/// Stores stub trajectories for every source id, then the tips in one batch.
pub fn seed_store(store: &tmem_core::store::Store, tips: Vec<Tip>) -> Result<(), tmem_core::store::StoreError> {
    let sources: BTreeSet<&String> = tips.iter().flat_map(|t| &t.source_trajectory_ids).collect();
    for s in sources {
        store.put_trajectory(stub_trajectory(s))?;
    }
    store.put_tips(tips)?;
    Ok(())
}
