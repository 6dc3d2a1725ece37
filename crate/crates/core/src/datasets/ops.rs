use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::{Class, ClassSet, DatasetId, Labels, Manifest, Split};
use crate::error::{Error, Result};

/// Class `c` is positive iff at least `threshold` of `n_annotators` marked it.
pub fn binarize_labels(counts: &[u32; 7], n_annotators: u32, threshold: u32) -> Result<Labels> {
    if threshold == 0 || threshold > n_annotators {
        return Err(Error::Config(format!(
            "threshold {threshold} outside 1..={n_annotators}"
        )));
    }
    if let Some(c) = counts.iter().find(|&&c| c > n_annotators) {
        return Err(Error::Data(format!(
            "annotator count {c} exceeds {n_annotators} annotators"
        )));
    }
    Ok(Labels(counts.map(|c| c >= threshold)))
}

/// Named dataset combinations.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum MergeName {
    /// FluencyBank + SEP-28k-Extended.
    AllEn,
    /// KSoF + FluencyBank.
    MultiS,
    /// KSoF + FluencyBank + SEP-28k-Extended.
    Multi,
    Custom(String),
}

impl MergeName {
    pub fn as_str(&self) -> &str {
        match self {
            MergeName::AllEn => "ALL-EN",
            MergeName::MultiS => "Multi-S",
            MergeName::Multi => "Multi",
            MergeName::Custom(s) => s,
        }
    }

    /// Datasets a named combination must consist of.
    pub fn expected_datasets(&self) -> Option<BTreeSet<DatasetId>> {
        use DatasetId::*;
        let set: &[DatasetId] = match self {
            MergeName::AllEn => &[FluencyBank, Sep28kE],
            MergeName::MultiS => &[Ksof, FluencyBank],
            MergeName::Multi => &[Ksof, FluencyBank, Sep28kE],
            MergeName::Custom(_) => return None,
        };
        Some(set.iter().copied().collect())
    }
}

impl fmt::Display for MergeName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for MergeName {
    type Err = std::convert::Infallible;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        Ok(match s {
            "ALL-EN" => MergeName::AllEn,
            "Multi-S" => MergeName::MultiS,
            "Multi" => MergeName::Multi,
            other => MergeName::Custom(other.to_string()),
        })
    }
}

/// Concatenates manifests. The result predicts seven classes iff any source
/// contains KSoF clips; English clips keep `Mod = 0`.
pub fn merge(manifests: &[&Manifest], name: MergeName) -> Result<Manifest> {
    let first = manifests
        .first()
        .ok_or_else(|| Error::Merge("nothing to merge".into()))?;
    let datasets: BTreeSet<DatasetId> = manifests.iter().flat_map(|m| m.datasets()).collect();
    if let Some(expected) = name.expected_datasets() {
        if datasets != expected {
            return Err(Error::Merge(format!(
                "{name} combines {:?}, got {:?}",
                expected.iter().map(|d| d.as_str()).collect::<Vec<_>>(),
                datasets.iter().map(|d| d.as_str()).collect::<Vec<_>>()
            )));
        }
    }
    let mut seen = HashSet::new();
    let mut collisions = BTreeSet::new();
    for m in manifests {
        for r in &m.records {
            if !seen.insert(r.clip_id.as_str()) {
                collisions.insert(r.clip_id.clone());
            }
        }
    }
    if !collisions.is_empty() {
        return Err(Error::Merge(format!(
            "clip_id collision: {}",
            collisions.into_iter().collect::<Vec<_>>().join(", ")
        )));
    }
    let class_set = if datasets.contains(&DatasetId::Ksof) {
        ClassSet::Seven
    } else {
        ClassSet::Six
    };
    let records: Vec<_> = manifests
        .iter()
        .flat_map(|m| m.records.iter().cloned())
        .collect();
    let dataset_id = (datasets.len() == 1).then(|| *datasets.iter().next().expect("one dataset"));
    let sources = if manifests.len() == 1 {
        first.sources.clone()
    } else {
        manifests.iter().map(|m| m.name.clone()).collect()
    };
    let merged = Manifest {
        name: name.as_str().to_string(),
        dataset_id,
        class_set,
        n_annotators: first.n_annotators,
        sources,
        binarization_threshold: first.binarization_threshold,
        records,
        header_extra: Default::default(),
    };
    let issues = merged.validate();
    if !issues.is_empty() {
        return Err(Error::Validation(issues));
    }
    Ok(merged)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct SpeakerLeak {
    pub dataset_id: DatasetId,
    pub speaker_id: String,
    pub splits: Vec<Split>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct SpeakerReport {
    pub leaks: Vec<SpeakerLeak>,
}

impl SpeakerReport {
    pub fn passed(&self) -> bool {
        self.leaks.is_empty()
    }
}

impl fmt::Display for SpeakerReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.passed() {
            return writeln!(f, "speaker exclusivity: PASS");
        }
        writeln!(f, "speaker exclusivity: FAIL ({} speakers)", self.leaks.len())?;
        for leak in &self.leaks {
            let splits: Vec<_> = leak.splits.iter().map(|s| s.as_str()).collect();
            writeln!(f, "  {}/{}: {}", leak.dataset_id, leak.speaker_id, splits.join(", "))?;
        }
        Ok(())
    }
}

/// Lists every speaker (namespaced by dataset) found in more than one split.
pub fn validate_speaker_exclusivity(manifest: &Manifest) -> SpeakerReport {
    let mut splits: BTreeMap<(DatasetId, &str), BTreeSet<Split>> = BTreeMap::new();
    for r in &manifest.records {
        splits
            .entry((r.dataset_id, r.speaker_id.as_str()))
            .or_default()
            .insert(r.split);
    }
    let leaks = splits
        .into_iter()
        .filter(|(_, s)| s.len() > 1)
        .map(|((dataset_id, speaker), s)| SpeakerLeak {
            dataset_id,
            speaker_id: speaker.to_string(),
            splits: s.into_iter().collect(),
        })
        .collect();
    SpeakerReport { leaks }
}

/// Positive counts per class over a selection of clips.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LabelDistribution {
    pub class_set: ClassSet,
    pub total: usize,
    pub positives: Vec<usize>,
}

impl LabelDistribution {
    /// `100 · positives / total`, or `None` for an empty selection.
    pub fn percent(&self, class: Class) -> Option<f64> {
        let i = self.class_set.position(class)?;
        (self.total > 0).then(|| 100.0 * self.positives[i] as f64 / self.total as f64)
    }

    pub fn is_empty(&self) -> bool {
        self.total == 0
    }
}

pub fn label_distribution(manifest: &Manifest, split: Option<Split>) -> LabelDistribution {
    let classes = manifest.class_set.classes();
    let mut positives = vec![0; classes.len()];
    let mut total = 0;
    for r in manifest
        .records
        .iter()
        .filter(|r| split.is_none_or(|s| r.split == s))
    {
        total += 1;
        for (count, &c) in positives.iter_mut().zip(classes) {
            *count += usize::from(r.labels.get(c));
        }
    }
    LabelDistribution {
        class_set: manifest.class_set,
        total,
        positives,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct Cooccurrence {
    /// Clips with two or more dysfluency labels (No-Df not counted).
    pub multi_label: usize,
    pub total: usize,
}

impl Cooccurrence {
    /// Fraction of clips with more than one dysfluency type; 0 when empty.
    pub fn fraction(&self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            self.multi_label as f64 / self.total as f64
        }
    }
}

pub fn cooccurrence_stats(manifest: &Manifest) -> Cooccurrence {
    Cooccurrence {
        multi_label: manifest
            .records
            .iter()
            .filter(|r| r.labels.dysfluency_count() > 1)
            .count(),
        total: manifest.records.len(),
    }
}

/// Record indices of one epoch's batches over `split`. The shuffle depends
/// only on `(seed, epoch)`.
pub fn batch_indices(
    manifest: &Manifest,
    split: Split,
    batch_size: usize,
    seed: u64,
    epoch: u64,
) -> Result<Vec<Vec<usize>>> {
    if batch_size == 0 {
        return Err(Error::Config("batch size must be positive".into()));
    }
    let mut idx: Vec<usize> = manifest
        .records
        .iter()
        .enumerate()
        .filter(|(_, r)| r.split == split)
        .map(|(i, _)| i)
        .collect();
    if idx.is_empty() {
        return Err(Error::Data(format!("split `{split}` of {} is empty", manifest.name)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch);
    idx.shuffle(&mut rng);
    Ok(idx.chunks(batch_size).map(<[usize]>::to_vec).collect())
}

/// Clip ids of one epoch's batches over `split`.
pub fn make_batches(
    manifest: &Manifest,
    split: Split,
    batch_size: usize,
    seed: u64,
    epoch: u64,
) -> Result<Vec<Vec<String>>> {
    Ok(batch_indices(manifest, split, batch_size, seed, epoch)?
        .into_iter()
        .map(|b| {
            b.into_iter()
                .map(|i| manifest.records[i].clip_id.clone())
                .collect()
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasets::ClipRecord;
    use proptest::prelude::*;

    fn clip(id: &str, ds: DatasetId, speaker: &str, split: Split, classes: &[Class]) -> ClipRecord {
        ClipRecord::new(id, ds, speaker, split, Labels::from_classes(classes))
    }

    fn sized(name: &str, ds: DatasetId, n: usize) -> Manifest {
        let records = (0..n)
            .map(|i| clip(&format!("{name}-{i}"), ds, &format!("s{}", i % 5), Split::Train, &[]))
            .collect();
        Manifest::new(name, ds.class_set(), records).unwrap()
    }

    #[test]
    fn binarize_definition() {
        let l = binarize_labels(&[3, 0, 0, 0, 0, 0, 0], 3, 2).unwrap();
        assert_eq!(l, Labels::from_classes(&[Class::Mod]));
        assert_eq!(binarize_labels(&[0; 7], 3, 2).unwrap(), Labels::default());
        assert!(matches!(binarize_labels(&[4, 0, 0, 0, 0, 0, 0], 3, 2), Err(Error::Data(_))));
        assert!(matches!(binarize_labels(&[0; 7], 3, 0), Err(Error::Config(_))));
    }

    #[test]
    fn binarize_is_monotone_in_threshold_exhaustively() {
        // Every count vector for 3 annotators over 7 classes: 4^7 cases.
        for code in 0..4u32.pow(7) {
            let mut counts = [0u32; 7];
            let mut rest = code;
            for c in counts.iter_mut() {
                *c = rest % 4;
                rest /= 4;
            }
            let by_threshold: Vec<Labels> = (1..=3)
                .map(|t| binarize_labels(&counts, 3, t).unwrap())
                .collect();
            for pair in by_threshold.windows(2) {
                for k in 0..7 {
                    assert!(!pair[1].0[k] || pair[0].0[k], "counts {counts:?}");
                }
            }
        }
    }

    #[test]
    fn named_merges_sizes_and_class_sets() {
        let ksof = sized("ksof", DatasetId::Ksof, 56);
        let fb = sized("fb", DatasetId::FluencyBank, 41);
        let sep = sized("sep", DatasetId::Sep28kE, 28);
        let multi = merge(&[&ksof, &fb, &sep], MergeName::Multi).unwrap();
        assert_eq!(multi.len(), 56 + 41 + 28);
        assert_eq!(multi.class_set, ClassSet::Seven);
        assert_eq!(multi.dataset_id, None);
        assert_eq!(multi.sources, vec!["ksof", "fb", "sep"]);
        let all_en = merge(&[&fb, &sep], MergeName::AllEn).unwrap();
        assert_eq!(all_en.class_set, ClassSet::Six);
        let multi_s = merge(&[&ksof, &fb], MergeName::MultiS).unwrap();
        assert_eq!(multi_s.class_set, ClassSet::Seven);
        assert!(merge(&[&ksof, &sep], MergeName::AllEn).is_err());
    }

    #[test]
    fn merge_of_one_is_identity() {
        let fb = sized("fb", DatasetId::FluencyBank, 9);
        let m = merge(&[&fb], MergeName::Custom("fb".into())).unwrap();
        assert_eq!(m.records, fb.records);
        assert_eq!(m.class_set, fb.class_set);
        assert_eq!(m.dataset_id, fb.dataset_id);
    }

    #[test]
    fn merge_rejects_collisions() {
        let a = sized("x", DatasetId::FluencyBank, 3);
        let b = sized("x", DatasetId::Sep28kE, 2);
        let err = merge(&[&a, &b], MergeName::AllEn).unwrap_err();
        assert!(err.to_string().contains("x-0") && err.to_string().contains("x-1"));
    }

    #[test]
    fn speaker_leak_fixtures() {
        let leak = Manifest::new(
            "leak",
            ClassSet::Six,
            vec![
                clip("a", DatasetId::Sep28kE, "s1", Split::Train, &[]),
                clip("b", DatasetId::Sep28kE, "s1", Split::Test, &[]),
                clip("c", DatasetId::Sep28kE, "s2", Split::Dev, &[]),
            ],
        )
        .unwrap();
        let report = validate_speaker_exclusivity(&leak);
        assert!(!report.passed());
        assert_eq!(report.leaks.len(), 1);
        assert_eq!(report.leaks[0].speaker_id, "s1");
        assert_eq!(report.leaks[0].splits, vec![Split::Train, Split::Test]);
        assert!(report.to_string().contains("s1: train, test"));

        let namespaced = Manifest::new(
            "ns",
            ClassSet::Seven,
            vec![
                clip("a", DatasetId::Sep28kE, "s1", Split::Train, &[]),
                clip("b", DatasetId::Ksof, "s1", Split::Test, &[]),
            ],
        )
        .unwrap();
        assert!(validate_speaker_exclusivity(&namespaced).passed());
    }

    #[test]
    fn distribution_and_cooccurrence_arithmetic() {
        let records = (0..10)
            .map(|i| {
                let classes: &[Class] = match i {
                    0 | 1 => &[Class::Bl, Class::Int],
                    2 => &[Class::Bl, Class::Snd],
                    3 => &[Class::Int],
                    _ => &[Class::NoDf],
                };
                clip(&format!("c{i}"), DatasetId::FluencyBank, "s", Split::Train, classes)
            })
            .collect();
        let m = Manifest::new("toy", ClassSet::Six, records).unwrap();
        let d = label_distribution(&m, None);
        assert_eq!(d.total, 10);
        assert_eq!(d.percent(Class::Bl), Some(30.0));
        assert_eq!(d.percent(Class::NoDf), Some(60.0));
        assert_eq!(d.percent(Class::Mod), None);
        assert!(label_distribution(&m, Some(Split::Test)).is_empty());
        assert_eq!(label_distribution(&m, Some(Split::Test)).percent(Class::Bl), None);
        let c = cooccurrence_stats(&m);
        assert_eq!((c.multi_label, c.total), (3, 10));
        assert!((c.fraction() - 0.3).abs() < 1e-15);
    }

    #[test]
    fn batches_partition_the_split() {
        let m = sized("fb", DatasetId::FluencyBank, 10);
        let b = make_batches(&m, Split::Train, 4, 7, 0).unwrap();
        assert_eq!(b.iter().map(Vec::len).collect::<Vec<_>>(), vec![4, 4, 2]);
        assert_eq!(b, make_batches(&m, Split::Train, 4, 7, 0).unwrap());
        assert_ne!(b, make_batches(&m, Split::Train, 4, 7, 1).unwrap());
        let mut all: Vec<_> = b.into_iter().flatten().collect();
        all.sort();
        let mut expected: Vec<_> = m.records.iter().map(|r| r.clip_id.clone()).collect();
        expected.sort();
        assert_eq!(all, expected);
        assert!(make_batches(&m, Split::Dev, 4, 7, 0).is_err());
        assert!(make_batches(&m, Split::Train, 0, 7, 0).is_err());
    }

    fn arb_manifest(prefix: &'static str, ds: DatasetId) -> impl Strategy<Value = Manifest> {
        proptest::collection::vec((0usize..4, 0usize..3, any::<[bool; 6]>()), 0..8).prop_map(move |rows| {
            let records = rows
                .into_iter()
                .enumerate()
                .map(|(i, (spk, split, bits))| {
                    let mut labels = Labels::default();
                    for (k, b) in bits.iter().enumerate() {
                        labels.0[k + 1] = *b;
                    }
                    ClipRecord::new(format!("{prefix}{i}"), ds, format!("s{spk}"), Split::ALL[split], labels)
                })
                .collect();
            let mut m = Manifest::new(prefix, ds.class_set(), records).unwrap();
            m.dataset_id = Some(ds);
            m
        })
    }

    fn sorted_ids(m: &Manifest) -> Vec<String> {
        let mut v: Vec<_> = m.records.iter().map(|r| r.clip_id.clone()).collect();
        v.sort();
        v
    }

    proptest! {
        #[test]
        fn merge_is_associative_up_to_order(a in arb_manifest("a", DatasetId::Ksof),
                                            b in arb_manifest("b", DatasetId::FluencyBank),
                                            c in arb_manifest("c", DatasetId::Sep28kE)) {
            let custom = || MergeName::Custom("m".into());
            let ab = merge(&[&a, &b], custom()).unwrap();
            let left = merge(&[&ab, &c], custom()).unwrap();
            let bc = merge(&[&b, &c], custom()).unwrap();
            let right = merge(&[&a, &bc], custom()).unwrap();
            let flat = merge(&[&a, &b, &c], MergeName::Multi).unwrap();
            prop_assert_eq!(sorted_ids(&left), sorted_ids(&right));
            prop_assert_eq!(sorted_ids(&left), sorted_ids(&flat));
            prop_assert_eq!(left.len(), a.len() + b.len() + c.len());
        }

        #[test]
        fn complement_percentages_sum_to_100(m in arb_manifest("a", DatasetId::Ksof)) {
            let d = label_distribution(&m, None);
            for (i, &c) in m.class_set.classes().iter().enumerate() {
                if let Some(p) = d.percent(c) {
                    let neg = 100.0 * (d.total - d.positives[i]) as f64 / d.total as f64;
                    prop_assert!((p + neg - 100.0).abs() < 1e-9);
                }
            }
        }

        #[test]
        fn exclusivity_ignores_record_order(m in arb_manifest("a", DatasetId::Sep28kE), seed in any::<u64>()) {
            let mut shuffled = m.clone();
            shuffled.records.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
            prop_assert_eq!(validate_speaker_exclusivity(&m), validate_speaker_exclusivity(&shuffled));
        }
    }
}
