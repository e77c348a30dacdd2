use std::collections::{BTreeMap, BTreeSet, HashMap};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{evaluate, train_probe, MetricsReport, ModelArtifact, ProgressSink, Samples, TrainConfig};
use crate::error::{Error, Result};
use crate::model::{hash_parts, DatasetManifest, ImageRecord};
use crate::split::{kfold_split, split_dataset, Split};

/// Fraction of augmented images added to training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum MergeFraction {
    None,
    Tenth,
    Fifth,
    Half,
    All,
}

impl MergeFraction {
    pub const ALL_OPTIONS: [MergeFraction; 5] = [
        MergeFraction::None,
        MergeFraction::Tenth,
        MergeFraction::Fifth,
        MergeFraction::Half,
        MergeFraction::All,
    ];

    pub fn percent(self) -> usize {
        match self {
            MergeFraction::None => 0,
            MergeFraction::Tenth => 10,
            MergeFraction::Fifth => 20,
            MergeFraction::Half => 50,
            MergeFraction::All => 100,
        }
    }

    pub fn value(self) -> f64 {
        self.percent() as f64 / 100.0
    }

    pub fn from_f64(v: f64) -> Result<Self> {
        Self::ALL_OPTIONS
            .into_iter()
            .find(|f| (f.value() - v).abs() < 1e-9)
            .ok_or_else(|| Error::validation("fraction", format!("{v} not one of 0, 0.1, 0.2, 0.5, 1.0")))
    }

    /// `⌊fraction × n⌋`, computed exactly.
    pub fn count_of(self, n: usize) -> usize {
        self.percent() * n / 100
    }
}

impl Serialize for MergeFraction {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_f64(self.value())
    }
}

impl<'de> Deserialize<'de> for MergeFraction {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let v = f64::deserialize(d)?;
        MergeFraction::from_f64(v).map_err(serde::de::Error::custom)
    }
}

/// All kept originals plus the sampled augmented images, both in manifest order.
#[derive(Debug, Clone)]
pub struct MergedTrainingSet<'a> {
    pub original: Vec<&'a ImageRecord>,
    pub augmented: Vec<&'a ImageRecord>,
}

impl MergedTrainingSet<'_> {
    pub fn len(&self) -> usize {
        self.original.len() + self.augmented.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

fn check_labels(original: &DatasetManifest, augmented: &DatasetManifest) -> Result<()> {
    let a: BTreeSet<&String> = original.classes.iter().collect();
    let b: BTreeSet<&String> = augmented.classes.iter().collect();
    if let Some(class) = a.symmetric_difference(&b).next() {
        return Err(Error::LabelMismatch {
            class: (*class).clone(),
        });
    }
    Ok(())
}

/// Per class, samples `⌊fraction × kept augmented count⌋` augmented images.
pub fn merge_for_training<'a>(
    original: &'a DatasetManifest,
    augmented: &'a DatasetManifest,
    fraction: MergeFraction,
    seed: u64,
) -> Result<MergedTrainingSet<'a>> {
    check_labels(original, augmented)?;
    let mut by_class: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, img) in augmented.images.iter().enumerate() {
        if img.is_kept() {
            by_class.entry(img.class_label.as_str()).or_default().push(i);
        }
    }
    let mut chosen = Vec::new();
    for (class, mut idx) in by_class {
        let take = fraction.count_of(idx.len());
        let mut rng = ChaCha8Rng::from_seed(hash_parts(&[b"merge", &seed.to_le_bytes(), class.as_bytes()]));
        idx.shuffle(&mut rng);
        chosen.extend_from_slice(&idx[..take]);
    }
    chosen.sort_unstable();
    Ok(MergedTrainingSet {
        original: original.kept_images().collect(),
        augmented: chosen.into_iter().map(|i| &augmented.images[i]).collect(),
    })
}

fn label_index(manifest: &DatasetManifest) -> HashMap<&str, usize> {
    manifest.classes.iter().enumerate().map(|(i, c)| (c.as_str(), i)).collect()
}

/// Features and label indices (into `classes`) for `images`.
fn samples_of<'a>(images: impl IntoIterator<Item = &'a ImageRecord>, classes: &HashMap<&str, usize>) -> Samples {
    let mut s = Samples::default();
    for img in images {
        s.features.push(img.embedding.to_f64());
        s.labels.push(classes[img.class_label.as_str()]);
    }
    s
}

/// Samples for the given image ids, labels indexing `manifest.classes`.
pub fn dataset_samples(manifest: &DatasetManifest, ids: &[String]) -> Result<Samples> {
    let by_id: HashMap<&str, &ImageRecord> = manifest.images.iter().map(|i| (i.id.as_str(), i)).collect();
    let images = ids
        .iter()
        .map(|id| {
            by_id
                .get(id.as_str())
                .copied()
                .ok_or_else(|| Error::validation("image_id", format!("unknown image `{id}`")))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(samples_of(images, &label_index(manifest)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainOutcome {
    pub model: ModelArtifact,
    pub metrics: MetricsReport,
    pub split: Split,
    pub augmented_used: Vec<String>,
}

/// Trains on the seeded train split of `manifest` plus an optional augmented
/// sample, and evaluates on the original validation split only.
pub fn train_on_dataset(
    manifest: &DatasetManifest,
    merge: Option<(&DatasetManifest, MergeFraction)>,
    config: &TrainConfig,
    sink: &dyn ProgressSink,
) -> Result<TrainOutcome> {
    config.validate()?;
    let split = split_dataset(manifest, config.train_fraction, config.seed)?;
    let classes = label_index(manifest);
    let mut train = dataset_samples(manifest, &split.train)?;
    let mut augmented_used = Vec::new();
    if let Some((aug, fraction)) = merge {
        let merged = merge_for_training(manifest, aug, fraction, config.seed)?;
        let extra = samples_of(merged.augmented.iter().copied(), &classes);
        train.features.extend(extra.features);
        train.labels.extend(extra.labels);
        augmented_used = merged.augmented.iter().map(|i| i.id.clone()).collect();
    }
    let validation = dataset_samples(manifest, &split.validation)?;
    let mut model = train_probe(&train, Some(&validation), manifest.classes.clone(), config, None, sink)?;
    model.embedder = manifest.pipeline_config.backends.get("embedder").cloned();
    let metrics = evaluate(&model, &validation)?;
    Ok(TrainOutcome {
        model,
        metrics,
        split,
        augmented_used,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeanMetrics {
    pub accuracy: f64,
    pub weighted_precision: f64,
    pub weighted_recall: f64,
    pub weighted_f1: f64,
}

impl MeanMetrics {
    fn of(reports: &[MetricsReport]) -> Self {
        let n = reports.len() as f64;
        let mean = |f: fn(&MetricsReport) -> f64| reports.iter().map(f).sum::<f64>() / n;
        MeanMetrics {
            accuracy: mean(|r| r.accuracy),
            weighted_precision: mean(|r| r.weighted_precision),
            weighted_recall: mean(|r| r.weighted_recall),
            weighted_f1: mean(|r| r.weighted_f1),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrossValidationReport {
    pub folds: Vec<MetricsReport>,
    pub mean: MeanMetrics,
}

impl CrossValidationReport {
    pub fn from_folds(folds: Vec<MetricsReport>) -> Self {
        let mean = MeanMetrics::of(&folds);
        CrossValidationReport { folds, mean }
    }
}

/// One train/evaluate cycle per stratified fold; folds run concurrently and
/// report progress with their fold index.
pub fn cross_validate(
    manifest: &DatasetManifest,
    k: usize,
    config: &TrainConfig,
    sink: &dyn ProgressSink,
) -> Result<CrossValidationReport> {
    config.validate()?;
    let folds = kfold_split(manifest, k, config.seed)?;
    let results: Vec<Result<MetricsReport>> = std::thread::scope(|scope| {
        let handles: Vec<_> = folds
            .iter()
            .enumerate()
            .map(|(i, fold)| {
                scope.spawn(move || {
                    let train = dataset_samples(manifest, &fold.train)?;
                    let val = dataset_samples(manifest, &fold.validation)?;
                    let model = train_probe(&train, Some(&val), manifest.classes.clone(), config, Some(i), sink)?;
                    evaluate(&model, &val)
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("fold worker panicked")).collect()
    });
    Ok(CrossValidationReport::from_folds(results.into_iter().collect::<Result<Vec<_>>>()?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::FilterVerdict;
    use crate::split::tests::manifest_with_counts;
    use crate::trainer::NullSink;

    #[test]
    fn fractions_parse_and_count() {
        for (v, n, expected) in [(0.0, 60, 0), (0.1, 60, 6), (0.2, 45, 9), (0.5, 41, 20), (1.0, 7, 7)] {
            assert_eq!(MergeFraction::from_f64(v).unwrap().count_of(n), expected);
        }
        assert!(MergeFraction::from_f64(0.3).is_err());
        let f: MergeFraction = serde_json::from_str("0.2").unwrap();
        assert_eq!(f, MergeFraction::Fifth);
    }

    #[test]
    fn half_of_sixty_forty() {
        let original = manifest_with_counts(&[30, 30]);
        let augmented = manifest_with_counts(&[60, 40]);
        let merged = merge_for_training(&original, &augmented, MergeFraction::Half, 5).unwrap();
        assert_eq!(merged.original.len(), 60);
        let c0 = merged.augmented.iter().filter(|i| i.class_label == "c0").count();
        let c1 = merged.augmented.iter().filter(|i| i.class_label == "c1").count();
        assert_eq!((c0, c1), (30, 20));
        let again = merge_for_training(&original, &augmented, MergeFraction::Half, 5).unwrap();
        let ids = |m: &MergedTrainingSet| m.augmented.iter().map(|i| i.id.clone()).collect::<Vec<_>>();
        assert_eq!(ids(&merged), ids(&again));
    }

    #[test]
    fn zero_and_full_fractions() {
        let original = manifest_with_counts(&[10, 10]);
        let mut augmented = manifest_with_counts(&[8, 6]);
        augmented.images[0].filter_verdict = FilterVerdict::RemovedOutlier;
        assert_eq!(merge_for_training(&original, &augmented, MergeFraction::None, 0).unwrap().len(), 20);
        assert_eq!(merge_for_training(&original, &augmented, MergeFraction::All, 0).unwrap().len(), 20 + 13);
    }

    #[test]
    fn label_mismatch_names_class() {
        let original = manifest_with_counts(&[10, 10]);
        let augmented = manifest_with_counts(&[10, 10, 10]);
        match merge_for_training(&original, &augmented, MergeFraction::Half, 0) {
            Err(Error::LabelMismatch { class }) => assert_eq!(class, "c2"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn identical_fold_reports_mean_to_themselves() {
        let r = MetricsReport::from_confusion(vec![vec![9, 1], vec![2, 8]], vec!["a".into(), "b".into()]).unwrap();
        let cv = CrossValidationReport::from_folds(vec![r.clone(); 5]);
        assert!((cv.mean.accuracy - r.accuracy).abs() < 1e-15);
        assert!((cv.mean.weighted_f1 - r.weighted_f1).abs() < 1e-15);
    }

    #[test]
    fn cross_validation_gives_k_reports() {
        let m = manifest_with_counts(&[10, 10]);
        let cfg = TrainConfig {
            epochs: 5,
            ..TrainConfig::default()
        };
        let cv = cross_validate(&m, 5, &cfg, &NullSink).unwrap();
        assert_eq!(cv.folds.len(), 5);
        assert_eq!(cv.mean.accuracy, 1.0);
        assert_eq!(cross_validate(&m, 5, &cfg, &NullSink).unwrap(), cv);
    }

    #[test]
    fn train_on_dataset_with_merge_validates_on_originals() {
        let original = manifest_with_counts(&[10, 10]);
        let augmented = manifest_with_counts(&[10, 10]);
        let out = train_on_dataset(&original, Some((&augmented, MergeFraction::Half)), &TrainConfig::default(), &NullSink)
            .unwrap();
        assert_eq!(out.augmented_used.len(), 10);
        assert_eq!(out.metrics.sample_count(), out.split.validation.len() as u64);
        assert_eq!(out.metrics.accuracy, 1.0);
    }
}
