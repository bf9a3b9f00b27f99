use std::collections::BTreeSet;

use proptest::prelude::*;
use tmem_core::curation::cluster_tips;
use tmem_core::embed::{Embedder, HashEmbedder};
use tmem_core::model::Embedding;
use tmem_testkit::checks;
use tmem_testkit::oracle::reference_clusters;

#[test]
fn clustering_matches_reference() {
    println!("{}", checks::clustering_reference(23, 400).unwrap());
}

#[test]
fn consolidation_conserves_provenance_and_is_idempotent() {
    println!("{}", checks::consolidation_conservation(29, 12).unwrap());
}

fn items(texts: &[String]) -> Vec<(String, Embedding)> {
    let e = HashEmbedder::new(64);
    texts.iter().enumerate().map(|(i, t)| (format!("id{i:02}"), e.embed(t).unwrap())).collect()
}

proptest! {
    /// Output is a partition of the input ids, each group sorted, groups ordered by first id.
    #[test]
    fn clusters_partition_input(texts in proptest::collection::vec("(cart|pay|song|login|list)( (cart|pay|song|login|list)){0,2}", 0..14), threshold in 0.05f64..=1.0) {
        let items = items(&texts);
        let groups = cluster_tips(&items, threshold).unwrap();
        let flat: Vec<&String> = groups.iter().flatten().collect();
        let unique: BTreeSet<&String> = flat.iter().copied().collect();
        prop_assert_eq!(flat.len(), items.len());
        prop_assert_eq!(unique.len(), items.len());
        for g in &groups {
            prop_assert!(g.windows(2).all(|w| w[0] < w[1]));
        }
        prop_assert!(groups.windows(2).all(|w| w[0][0] < w[1][0]));
        let got: BTreeSet<BTreeSet<String>> = groups.into_iter().map(|g| g.into_iter().collect()).collect();
        prop_assert_eq!(got, reference_clusters(&items, threshold));
    }

    /// Identical embeddings always land in one cluster.
    #[test]
    fn duplicates_merge(n in 2usize..10, threshold in 0.05f64..=1.0) {
        let texts = vec!["retrieve service credentials".to_owned(); n];
        let groups = cluster_tips(&items(&texts), threshold).unwrap();
        prop_assert_eq!(groups.len(), 1);
    }
}

#[test]
fn invalid_threshold_is_rejected() {
    for t in [0.0, -0.2, 1.01, f64::NAN] {
        assert!(cluster_tips(&[], t).is_err(), "{t}");
    }
}
