//! Stratified train/validation splits and k-fold partitions over kept images.

use std::collections::{BTreeMap, HashSet};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{hash_parts, DatasetManifest};

/// Image ids of one partition, each list in manifest order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<String>,
    pub validation: Vec<String>,
}

/// Per-class train count: `round_half_up(fraction × n)` clamped to `[1, n − 1]`.
pub fn train_count(n: usize, fraction: f64) -> usize {
    // The epsilon absorbs representation error such as 0.7 × 5 = 3.4999….
    let raw = (fraction * n as f64 + 0.5 + 1e-9).floor() as usize;
    raw.clamp(1, n.saturating_sub(1).max(1))
}

fn class_rng(seed: u64, purpose: &str, class: &str) -> ChaCha8Rng {
    ChaCha8Rng::from_seed(hash_parts(&[purpose.as_bytes(), &seed.to_le_bytes(), class.as_bytes()]))
}

/// Kept image ids grouped by class, each group in manifest order.
fn kept_by_class(manifest: &DatasetManifest) -> BTreeMap<&str, Vec<&str>> {
    let mut groups: BTreeMap<&str, Vec<&str>> = manifest.classes.iter().map(|c| (c.as_str(), Vec::new())).collect();
    for img in manifest.kept_images() {
        groups.entry(img.class_label.as_str()).or_default().push(img.id.as_str());
    }
    groups
}

fn in_manifest_order(manifest: &DatasetManifest, chosen: &HashSet<&str>) -> Vec<String> {
    manifest
        .images
        .iter()
        .filter(|i| chosen.contains(i.id.as_str()))
        .map(|i| i.id.clone())
        .collect()
}

pub fn split_dataset(manifest: &DatasetManifest, train_fraction: f64, seed: u64) -> Result<Split> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::validation("train_fraction", format!("{train_fraction} not in (0, 1)")));
    }
    let mut train = HashSet::new();
    let mut validation = HashSet::new();
    for (class, mut ids) in kept_by_class(manifest) {
        if ids.len() < 2 {
            return Err(Error::InsufficientData {
                class: class.to_string(),
                message: format!("{} kept image(s), need at least 2", ids.len()),
            });
        }
        ids.shuffle(&mut class_rng(seed, "split", class));
        let n_train = train_count(ids.len(), train_fraction);
        train.extend(&ids[..n_train]);
        validation.extend(&ids[n_train..]);
    }
    Ok(Split {
        train: in_manifest_order(manifest, &train),
        validation: in_manifest_order(manifest, &validation),
    })
}

/// `k` stratified folds. Within a class, shuffled positions are dealt round
/// robin, continuing from where the previous class stopped so overall fold
/// sizes stay balanced.
pub fn kfold_split(manifest: &DatasetManifest, k: usize, seed: u64) -> Result<Vec<Split>> {
    if k < 2 {
        return Err(Error::validation("k", format!("k = {k}, need at least 2")));
    }
    let mut folds: Vec<HashSet<&str>> = vec![HashSet::new(); k];
    let mut offset = 0;
    for (class, mut ids) in kept_by_class(manifest) {
        if ids.len() < k {
            return Err(Error::InsufficientData {
                class: class.to_string(),
                message: format!("{} kept image(s), fewer than k = {k}", ids.len()),
            });
        }
        ids.shuffle(&mut class_rng(seed, "kfold", class));
        for (pos, id) in ids.iter().enumerate() {
            folds[(pos + offset) % k].insert(id);
        }
        offset = (offset + ids.len()) % k;
    }
    Ok(folds
        .iter()
        .map(|val| {
            let train: HashSet<&str> = manifest
                .kept_images()
                .map(|i| i.id.as_str())
                .filter(|id| !val.contains(id))
                .collect();
            Split {
                train: in_manifest_order(manifest, &train),
                validation: in_manifest_order(manifest, val),
            }
        })
        .collect())
}

#[cfg(test)]
pub(crate) mod tests {
    use std::collections::BTreeMap;

    use chrono::DateTime;
    use proptest::prelude::*;

    use super::*;
    use crate::filter::FilterParams;
    use crate::model::{
        sha256_hex, Embedding, Flow, FilterVerdict, ImageRecord, PipelineSnapshot, PromptRecord, PromptSource, Stage,
        EMBEDDING_DIM,
    };
    use crate::prompt::WeightedTerm;

    /// Manifest with `counts[c]` images in class `c{c}`, interleaved.
    pub(crate) fn manifest_with_counts(counts: &[usize]) -> DatasetManifest {
        let classes: Vec<String> = (0..counts.len()).map(|c| format!("c{c}")).collect();
        let prompts: Vec<PromptRecord> = classes
            .iter()
            .map(|c| PromptRecord {
                id: format!("p-{c}"),
                terms: vec![WeightedTerm::plain(c.clone())],
                source: PromptSource::Simplistic,
                combination: None,
                class_label: c.clone(),
            })
            .collect();
        let mut images = Vec::new();
        let max = counts.iter().copied().max().unwrap_or(0);
        for i in 0..max {
            for (c, &n) in counts.iter().enumerate() {
                if i < n {
                    let mut v = vec![0.0f32; EMBEDDING_DIM];
                    v[c] = 1.0;
                    images.push(ImageRecord {
                        id: format!("img-c{c}-{i:04}"),
                        class_label: classes[c].clone(),
                        image_ref: sha256_hex(format!("{c}/{i}").as_bytes()),
                        embedding: Embedding::new(v).unwrap(),
                        prompt_id: format!("p-c{c}"),
                        seed: i as u64,
                        stage_history: vec![Stage::Generated],
                        filter_verdict: FilterVerdict::Kept,
                    });
                }
            }
        }
        DatasetManifest {
            dataset_id: "ds-split".into(),
            name: "split".into(),
            revision: 0,
            grammar: None,
            prompts,
            images,
            classes,
            created_at: DateTime::from_timestamp(0, 0).unwrap(),
            pipeline_config: PipelineSnapshot {
                flow: Flow::AirGen,
                backends: BTreeMap::new(),
                seed: 0,
                images_per_prompt: 1,
                image_size: 256,
                use_rewriter: false,
                use_style_transfer: false,
                style_domain: None,
                use_filter: false,
                filter: FilterParams::default(),
                source_dataset: None,
            },
        }
    }

    fn class_of(m: &DatasetManifest, id: &str) -> String {
        m.images.iter().find(|i| i.id == id).unwrap().class_label.clone()
    }

    fn count_class(m: &DatasetManifest, ids: &[String], class: &str) -> usize {
        ids.iter().filter(|id| class_of(m, id) == class).count()
    }

    #[test]
    fn balanced_eighty_twenty() {
        let m = manifest_with_counts(&[50, 50]);
        let s = split_dataset(&m, 0.8, 7).unwrap();
        assert_eq!((s.train.len(), s.validation.len()), (80, 20));
        for c in ["c0", "c1"] {
            assert_eq!(count_class(&m, &s.train, c), 40);
            assert_eq!(count_class(&m, &s.validation, c), 10);
        }
        assert_eq!(split_dataset(&m, 0.8, 7).unwrap(), s);
        assert_ne!(split_dataset(&m, 0.8, 8).unwrap(), s);
    }

    #[test]
    fn rounding_rule_small_cases() {
        // Exact rational half-up: floor((2·num·n + den) / (2·den)), then clamp.
        fn rule(n: usize, num: usize, den: usize) -> usize {
            ((2 * num * n + den) / (2 * den)).clamp(1, n - 1)
        }
        for n in 2..=12 {
            for (num, den) in [(1, 10), (1, 4), (1, 3), (1, 2), (2, 3), (7, 10), (3, 4), (4, 5), (9, 10)] {
                let f = num as f64 / den as f64;
                assert_eq!(train_count(n, f), rule(n, num, den), "n={n} f={num}/{den}");
            }
        }
        assert_eq!(train_count(3, 0.5), 2);
        assert_eq!(train_count(2, 0.5), 1);
        assert_eq!(train_count(5, 0.7), 4);
        assert_eq!(train_count(10, 0.99), 9);
        assert_eq!(train_count(10, 0.01), 1);
    }

    #[test]
    fn three_image_class_half_split() {
        let m = manifest_with_counts(&[3, 4]);
        let s = split_dataset(&m, 0.5, 1).unwrap();
        assert_eq!(count_class(&m, &s.train, "c0"), 2);
        assert_eq!(count_class(&m, &s.validation, "c0"), 1);
        assert_eq!(count_class(&m, &s.train, "c1"), 2);
    }

    #[test]
    fn tiny_class_is_insufficient() {
        let m = manifest_with_counts(&[1, 4]);
        match split_dataset(&m, 0.8, 0) {
            Err(Error::InsufficientData { class, .. }) => assert_eq!(class, "c0"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn removed_images_are_ineligible() {
        let mut m = manifest_with_counts(&[5, 5]);
        m.images[0].filter_verdict = FilterVerdict::RemovedDuplicate;
        let s = split_dataset(&m, 0.5, 3).unwrap();
        assert_eq!(s.train.len() + s.validation.len(), 9);
        assert!(!s.train.contains(&m.images[0].id) && !s.validation.contains(&m.images[0].id));
    }

    #[test]
    fn five_folds_of_twenty() {
        let m = manifest_with_counts(&[50, 50]);
        let folds = kfold_split(&m, 5, 11).unwrap();
        assert_eq!(folds.len(), 5);
        for f in &folds {
            assert_eq!(f.validation.len(), 20);
            assert_eq!(f.train.len(), 80);
        }
    }

    #[test]
    fn two_folds_over_four() {
        let m = manifest_with_counts(&[2, 2]);
        let folds = kfold_split(&m, 2, 0).unwrap();
        assert_eq!(folds[0].validation.len(), 2);
        assert_eq!(folds[1].validation.len(), 2);
        let all: HashSet<_> = folds.iter().flat_map(|f| f.validation.iter()).collect();
        assert_eq!(all.len(), 4);
    }

    #[test]
    fn kfold_errors() {
        let m = manifest_with_counts(&[3, 6]);
        assert!(matches!(kfold_split(&m, 1, 0), Err(Error::Validation { .. })));
        match kfold_split(&m, 4, 0) {
            Err(Error::InsufficientData { class, .. }) => assert_eq!(class, "c0"),
            other => panic!("{other:?}"),
        }
    }

    proptest! {
        #[test]
        fn split_partitions_kept(counts in prop::collection::vec(2usize..30, 1..4), f in 0.01f64..0.99, seed: u64) {
            let m = manifest_with_counts(&counts);
            let s = split_dataset(&m, f, seed).unwrap();
            let train: HashSet<_> = s.train.iter().collect();
            let val: HashSet<_> = s.validation.iter().collect();
            prop_assert!(train.is_disjoint(&val));
            prop_assert_eq!(train.len() + val.len(), m.kept_images().count());
            for c in &m.classes {
                let n = counts[c[1..].parse::<usize>().unwrap()];
                prop_assert_eq!(count_class(&m, &s.train, c), train_count(n, f));
            }
        }

        #[test]
        fn kfold_partitions_kept(counts in prop::collection::vec(5usize..25, 1..4), k in 2usize..6, seed: u64) {
            let m = manifest_with_counts(&counts);
            let folds = kfold_split(&m, k, seed).unwrap();
            prop_assert_eq!(folds.len(), k);
            let mut seen = HashSet::new();
            for f in &folds {
                for id in &f.validation {
                    prop_assert!(seen.insert(id.clone()));
                }
                let val: HashSet<_> = f.validation.iter().collect();
                prop_assert!(f.train.iter().all(|id| !val.contains(id)));
                prop_assert_eq!(f.train.len() + f.validation.len(), m.images.len());
            }
            prop_assert_eq!(seen.len(), m.images.len());
            for c in &m.classes {
                let sizes: Vec<usize> = folds.iter().map(|f| count_class(&m, &f.validation, c)).collect();
                prop_assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
            }
        }
    }
}
