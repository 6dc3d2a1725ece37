//! Synthetic separable corpus with `.dyfh` fixtures, for sanity training
//! and tests without the real corpora.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::datasets::{save_manifest, Class, ClassSet, ClipRecord, DatasetId, Gender, Labels, Manifest, Split};
use crate::error::{Error, Result};
use crate::features::write_features;
use crate::tensor::Tensor;

pub const MANIFEST_FILE: &str = "manifest.jsonl";
pub const FEATURES_DIR: &str = "features";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub clips: usize,
    pub layers: usize,
    pub frames: usize,
    pub dim: usize,
    /// Speakers are assigned round-robin; the last two go to dev and test.
    pub speakers: usize,
    /// Probability of each of the six dysfluency labels.
    pub positive_rate: f64,
    /// Distance between the positive and negative class means along the
    /// class's own feature dimension.
    pub separation: f64,
    /// Standard deviation of the per-element Gaussian noise.
    pub noise: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            clips: 64,
            layers: 12,
            frames: 10,
            dim: 16,
            speakers: 8,
            positive_rate: 1.0 / 3.0,
            separation: 1.0,
            noise: 1.0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticSet {
    pub manifest: Manifest,
    /// Hidden states in manifest record order.
    pub features: Vec<Tensor>,
}

impl SyntheticSet {
    /// Writes `manifest.jsonl` and `features/<clip_id>.dyfh` under `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        let features = dir.join(FEATURES_DIR);
        std::fs::create_dir_all(&features).map_err(|e| Error::io(&features, e))?;
        for (record, tensor) in self.manifest.records.iter().zip(&self.features) {
            write_features(&features, &record.clip_id, tensor)?;
        }
        save_manifest(&self.manifest, dir.join(MANIFEST_FILE))
    }
}

/// KSoF-labelled seven-class corpus. Each element of a clip's `L×T×D`
/// hidden states is `N(0, noise²)`; on dimension `k < 7` the mean is
/// `+separation/2` when class `k` (seven-class order) is positive and
/// `−separation/2` otherwise.
pub fn generate(spec: &SyntheticSpec) -> Result<SyntheticSet> {
    if spec.dim < Class::ALL.len() {
        return Err(Error::Config(format!(
            "synthetic features need at least {} dimensions",
            Class::ALL.len()
        )));
    }
    if spec.speakers < 3 || spec.clips < spec.speakers {
        return Err(Error::Config("need at least 3 speakers and one clip per speaker".into()));
    }
    if spec.layers == 0 || spec.frames == 0 || !(0.0..=1.0).contains(&spec.positive_rate) {
        return Err(Error::Config(format!("invalid synthetic spec {spec:?}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut records = Vec::with_capacity(spec.clips);
    let mut features = Vec::with_capacity(spec.clips);
    for i in 0..spec.clips {
        let speaker = i % spec.speakers;
        let split = match spec.speakers - speaker {
            1 => Split::Test,
            2 => Split::Dev,
            _ => Split::Train,
        };
        let mut labels = Labels::default();
        for c in Class::DYSFLUENCIES {
            labels.set(c, rng.gen_bool(spec.positive_rate));
        }
        labels.set(Class::NoDf, !labels.any_dysfluency());

        let (l, t, d) = (spec.layers, spec.frames, spec.dim);
        let mut tensor = Tensor::from_fn(vec![l, t, d], |_| {
            spec.noise * rng.sample::<f64, _>(StandardNormal)
        })?;
        for (k, &positive) in labels.0.iter().enumerate() {
            let shift = if positive { 0.5 } else { -0.5 } * spec.separation;
            for row in 0..l * t {
                tensor.data_mut()[row * d + k] += shift;
            }
        }
        let mut record = ClipRecord::new(
            format!("syn{i:04}"),
            DatasetId::Ksof,
            format!("spk{speaker}"),
            split,
            labels,
        );
        record.gender = if speaker % 2 == 0 { Gender::F } else { Gender::M };
        records.push(record);
        features.push(tensor);
    }
    let mut manifest = Manifest::new("synthetic", ClassSet::Seven, records)?;
    manifest.header_extra.insert(
        "generator".into(),
        serde_json::to_value(spec).expect("spec serializes"),
    );
    Ok(SyntheticSet { manifest, features })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasets::{label_distribution, validate_speaker_exclusivity};

    #[test]
    fn default_layout() {
        let set = generate(&SyntheticSpec::default()).unwrap();
        let m = &set.manifest;
        assert_eq!(m.len(), 64);
        assert_eq!(m.split(Split::Train).count(), 48);
        assert_eq!(m.split(Split::Dev).count(), 8);
        assert_eq!(m.split(Split::Test).count(), 8);
        assert!(validate_speaker_exclusivity(m).passed());
        assert!(set.features.iter().all(|f| f.shape() == [12, 10, 16]));
        for r in &m.records {
            assert_eq!(r.labels.get(Class::NoDf), !r.labels.any_dysfluency());
        }
    }

    #[test]
    fn deterministic_per_seed() {
        let a = generate(&SyntheticSpec::default()).unwrap();
        let b = generate(&SyntheticSpec::default()).unwrap();
        assert_eq!(a.manifest, b.manifest);
        assert_eq!(a.features, b.features);
        let c = generate(&SyntheticSpec { seed: 1, ..Default::default() }).unwrap();
        assert_ne!(a.features, c.features);
    }

    #[test]
    fn label_rate_near_two_per_clip() {
        let set = generate(&SyntheticSpec { clips: 4000, ..Default::default() }).unwrap();
        let mean = set
            .manifest
            .records
            .iter()
            .map(|r| r.labels.dysfluency_count() as f64)
            .sum::<f64>()
            / 4000.0;
        assert!((mean - 2.0).abs() < 0.1, "{mean}");
        let d = label_distribution(&set.manifest, None);
        let bl = d.percent(Class::Bl).unwrap();
        assert!((bl - 100.0 / 3.0).abs() < 3.0, "{bl}");
    }

    #[test]
    fn class_dimension_carries_the_shift() {
        let set = generate(&SyntheticSpec { clips: 400, ..Default::default() }).unwrap();
        let (mut pos, mut neg, mut np, mut nn) = (0.0, 0.0, 0, 0);
        for (r, f) in set.manifest.records.iter().zip(&set.features) {
            let m: f64 = (0..120).map(|row| f.data()[row * 16 + Class::Bl.index()]).sum::<f64>() / 120.0;
            if r.labels.get(Class::Bl) {
                pos += m;
                np += 1;
            } else {
                neg += m;
                nn += 1;
            }
        }
        let gap = pos / np as f64 - neg / nn as f64;
        assert!((gap - 1.0).abs() < 0.05, "{gap}");
    }

    #[test]
    fn writes_readable_fixtures() {
        let dir = tempfile::tempdir().unwrap();
        let set = generate(&SyntheticSpec { clips: 8, ..Default::default() }).unwrap();
        set.write(dir.path()).unwrap();
        let m = crate::datasets::load_manifest(dir.path().join(MANIFEST_FILE)).unwrap();
        assert_eq!(m.records, set.manifest.records);
        let f = crate::features::read_features(&dir.path().join("features/syn0003.dyfh")).unwrap();
        let expected: Vec<f32> = set.features[3].data().iter().map(|&v| v as f32).collect();
        assert_eq!(f.values, expected);
    }
}
