//! Acceptance gate: every criterion at full scale, one PASS/FAIL line each.

use std::io::Write;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use tmem_testkit::checks::{self, Check};
use tmem_testkit::service::service_equivalence;

struct Criterion {
    name: &'static str,
    budget: Option<Duration>,
    run: fn() -> Check,
}

const CRITERIA: [Criterion; 10] = [
    Criterion {
        name: "retrieval oracle equivalence (200 stores, <=10k tips, tau x k grid, <60s)",
        budget: Some(Duration::from_secs(60)),
        run: || checks::retrieval_oracle(2024, 200, 10_000),
    },
    Criterion { name: "threshold/cardinality/order invariants (property test)", budget: None, run: || checks::retrieval_invariants(512) },
    Criterion {
        name: "clustering reference equivalence (1000 instances, <=12 tips, <30s)",
        budget: Some(Duration::from_secs(30)),
        run: || checks::clustering_reference(2024, 1000),
    },
    Criterion {
        name: "consolidation conservation (fixtures + 100 random corpora, idempotent)",
        budget: None,
        run: || checks::consolidation_conservation(2024, 100),
    },
    Criterion { name: "end-to-end categorical correctness", budget: None, run: checks::end_to_end_categories },
    Criterion { name: "subtask segmentation fidelity (spotify)", budget: None, run: checks::spotify_segmentation },
    Criterion { name: "rendering golden file", budget: None, run: checks::golden_render },
    Criterion { name: "determinism (byte-identical stores and outputs)", budget: None, run: checks::determinism },
    Criterion { name: "store linearizability stress (100/100 trials)", budget: None, run: || checks::linearizability(100) },
    Criterion { name: "service/library equivalence (50 requests)", budget: None, run: || service_equivalence(2024, 50) },
];

/// Written to the stderr handle directly so the lines survive test output capture.
fn report(line: String) {
    let _ = writeln!(std::io::stderr(), "{line}");
}

#[test]
fn acceptance() {
    let mut failed = Vec::new();
    for (i, c) in CRITERIA.iter().enumerate() {
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(c.run)).unwrap_or_else(|p| {
            Err(p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or_else(|| "panicked".into()))
        });
        let elapsed = start.elapsed();
        let outcome = match (outcome, c.budget) {
            (Ok(_), Some(b)) if elapsed > b => Err(format!("took {:.1}s, budget {:.0}s", elapsed.as_secs_f64(), b.as_secs_f64())),
            (o, _) => o,
        };
        match outcome {
            Ok(detail) => report(format!("PASS [{:>2}] {} ({:.1}s): {detail}", i + 1, c.name, elapsed.as_secs_f64())),
            Err(why) => {
                report(format!("FAIL [{:>2}] {} ({:.1}s): {why}", i + 1, c.name, elapsed.as_secs_f64()));
                failed.push(c.name);
            }
        }
    }
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
