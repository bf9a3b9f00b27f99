//! Concurrent readers against a replacing writer, checked against a model
//! of every committed state.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Barrier};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tmem_core::embed::HashEmbedder;
use tmem_core::store::Store;

use crate::oracle::{random_text, random_tip, seed_store, TipGen, VOCAB};

#[derive(Debug, Clone, Copy)]
pub struct StressConfig {
    pub readers: usize,
    pub replaces: usize,
    pub initial_tips: usize,
}

impl Default for StressConfig {
    fn default() -> Self {
        StressConfig { readers: 8, replaces: 100, initial_tips: 24 }
    }
}

/// What the readers saw in one trial.
#[derive(Debug, Clone, Copy, Default)]
pub struct Observations {
    pub snapshots: usize,
    /// Distinct revisions seen across all readers.
    pub revisions: usize,
}

/// One trial: every snapshot a reader sees must equal the modelled state at
/// its revision, and each reader's revisions must never go backwards.
pub fn linearizability_trial(seed: u64, cfg: StressConfig) -> Result<Observations, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let embedder = HashEmbedder::default();
    let store = Arc::new(Store::in_memory(embedder_dim(&embedder)));
    let opts = TipGen { sources: 1, ungeneralized: false };
    let initial: Vec<_> = (0..cfg.initial_tips)
        .map(|i| {
            let text = random_text(&mut rng, &VOCAB, 2, 5);
            random_tip(&mut rng, &embedder, format!("init-{i:03}"), &text, opts)
        })
        .collect();
    seed_store(&store, initial).map_err(|e| e.to_string())?;

    // Model: revision -> tip ids with a content fingerprint.
    let fingerprint = |s: &tmem_core::store::StoreState| -> BTreeMap<String, String> {
        s.tips.iter().map(|(id, t)| (id.clone(), t.content.clone())).collect()
    };
    let mut model: BTreeMap<u64, BTreeMap<String, String>> = BTreeMap::new();
    let start = store.snapshot();
    model.insert(start.revision, fingerprint(&start));

    let done = Arc::new(AtomicBool::new(false));
    let barrier = Arc::new(Barrier::new(cfg.readers + 1));
    let readers: Vec<_> = (0..cfg.readers)
        .map(|_| {
            let store = Arc::clone(&store);
            let done = Arc::clone(&done);
            let barrier = Arc::clone(&barrier);
            std::thread::spawn(move || {
                barrier.wait();
                let mut seen = Vec::new();
                loop {
                    let finished = done.load(Ordering::Acquire);
                    let s = store.snapshot();
                    let integrity = s.check_integrity().map_err(|e| e.to_string());
                    seen.push((s.revision, fingerprint(&s), integrity));
                    if finished {
                        break;
                    }
                    std::thread::yield_now();
                }
                seen
            })
        })
        .collect();

    let mut current: BTreeMap<String, String> = model[&start.revision].clone();
    barrier.wait();
    for op in 0..cfg.replaces {
        let ids: Vec<String> = current.keys().cloned().collect();
        let n_remove = rng.gen_range(1..=3.min(ids.len()));
        let mut removed = BTreeSet::new();
        while removed.len() < n_remove {
            removed.insert(ids[rng.gen_range(0..ids.len())].clone());
        }
        let n_add = rng.gen_range(1..=3);
        let added: Vec<_> = (0..n_add)
            .map(|j| {
                let text = random_text(&mut rng, &VOCAB, 2, 5);
                let mut t = random_tip(&mut rng, &embedder, format!("op-{op:03}-{j}"), &text, opts);
                t.content = format!("op {op} tip {j}: {text}");
                t
            })
            .collect();
        for id in &removed {
            current.remove(id);
        }
        for t in &added {
            current.insert(t.id.clone(), t.content.clone());
        }
        let rev = store.replace_tips(removed, added, vec![]).map_err(|e| format!("replace {op}: {e}"))?;
        model.insert(rev, current.clone());
        std::thread::sleep(std::time::Duration::from_micros(200));
    }
    done.store(true, Ordering::Release);

    let mut observed = Observations::default();
    let mut revisions = BTreeSet::new();
    for (r, h) in readers.into_iter().enumerate() {
        let seen = h.join().map_err(|_| format!("reader {r} panicked"))?;
        let mut last = 0;
        for (rev, fp, integrity) in seen {
            observed.snapshots += 1;
            revisions.insert(rev);
            integrity.map_err(|e| format!("reader {r} saw a snapshot failing integrity at revision {rev}: {e}"))?;
            if rev < last {
                return Err(format!("reader {r} went back from revision {last} to {rev}"));
            }
            last = rev;
            match model.get(&rev) {
                Some(m) if *m == fp => {}
                Some(_) => return Err(format!("reader {r} saw a state at revision {rev} that was never committed")),
                None => return Err(format!("reader {r} saw unknown revision {rev}")),
            }
        }
    }
    observed.revisions = revisions.len();
    Ok(observed)
}

fn embedder_dim(e: &HashEmbedder) -> usize {
    use tmem_core::embed::Embedder;
    e.dim()
}
