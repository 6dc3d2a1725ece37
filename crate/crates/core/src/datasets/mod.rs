//! Clip manifests, the label schema and the dataset-composition protocol.

mod manifest;
mod ops;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::Error;

pub use manifest::{load_manifest, load_manifest_with, parse_manifest, save_manifest, LoadOptions};
pub use ops::{
    batch_indices, binarize_labels, cooccurrence_stats, label_distribution, make_batches, merge,
    validate_speaker_exclusivity, Cooccurrence, LabelDistribution, MergeName, SpeakerLeak,
    SpeakerReport,
};

/// Output classes, in the order of the seven-class schema.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Class {
    Mod,
    Bl,
    Int,
    Pro,
    Snd,
    Wd,
    NoDf,
}

impl Class {
    pub const ALL: [Class; 7] = [
        Class::Mod,
        Class::Bl,
        Class::Int,
        Class::Pro,
        Class::Snd,
        Class::Wd,
        Class::NoDf,
    ];

    /// Classes that mark a dysfluency (everything except No-Df).
    pub const DYSFLUENCIES: [Class; 6] = [
        Class::Mod,
        Class::Bl,
        Class::Int,
        Class::Pro,
        Class::Snd,
        Class::Wd,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Class::Mod => "Mod",
            Class::Bl => "Bl",
            Class::Int => "Int",
            Class::Pro => "Pro",
            Class::Snd => "Snd",
            Class::Wd => "Wd",
            Class::NoDf => "No-Df",
        }
    }

    /// Position in the seven-class label vector.
    pub fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for Class {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Class {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Error> {
        Class::ALL
            .into_iter()
            .find(|c| c.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Data(format!("unknown class `{s}`")))
    }
}

/// Ordered set of classes a model predicts or a dataset annotates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClassSet {
    Six,
    Seven,
}

impl ClassSet {
    pub fn classes(self) -> &'static [Class] {
        match self {
            ClassSet::Seven => &Class::ALL,
            ClassSet::Six => &Class::ALL[1..],
        }
    }

    pub fn len(self) -> usize {
        self.classes().len()
    }

    pub fn is_empty(self) -> bool {
        false
    }

    pub fn contains(self, class: Class) -> bool {
        self.classes().contains(&class)
    }

    pub fn position(self, class: Class) -> Option<usize> {
        self.classes().iter().position(|&c| c == class)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ClassSet::Six => "six",
            ClassSet::Seven => "seven",
        }
    }
}

impl FromStr for ClassSet {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Error> {
        match s.to_ascii_lowercase().as_str() {
            "six" | "6" => Ok(ClassSet::Six),
            "seven" | "7" => Ok(ClassSet::Seven),
            _ => Err(Error::Data(format!("unknown class set `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum DatasetId {
    #[serde(rename = "SEP28K-E")]
    Sep28kE,
    #[serde(rename = "FBANK")]
    FluencyBank,
    #[serde(rename = "KSOF")]
    Ksof,
}

impl DatasetId {
    pub fn as_str(self) -> &'static str {
        match self {
            DatasetId::Sep28kE => "SEP28K-E",
            DatasetId::FluencyBank => "FBANK",
            DatasetId::Ksof => "KSOF",
        }
    }

    /// English corpora never carry the speech-modification label.
    pub fn is_english(self) -> bool {
        !matches!(self, DatasetId::Ksof)
    }

    /// Class set a model trained on this dataset alone predicts.
    pub fn class_set(self) -> ClassSet {
        if self.is_english() {
            ClassSet::Six
        } else {
            ClassSet::Seven
        }
    }
}

impl fmt::Display for DatasetId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for DatasetId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Error> {
        match s.to_ascii_uppercase().as_str() {
            "SEP28K-E" => Ok(DatasetId::Sep28kE),
            "FBANK" => Ok(DatasetId::FluencyBank),
            "KSOF" => Ok(DatasetId::Ksof),
            _ => Err(Error::Data(format!("unknown dataset id `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Gender {
    F,
    M,
    Unknown,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Dev,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Dev, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Dev => "dev",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Error> {
        Split::ALL
            .into_iter()
            .find(|x| x.as_str() == s)
            .ok_or_else(|| Error::Data(format!("unknown split `{s}`")))
    }
}

/// Binary labels in seven-class order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct Labels(pub [bool; 7]);

impl Labels {
    pub fn from_classes(classes: &[Class]) -> Self {
        let mut l = Labels::default();
        for &c in classes {
            l.0[c.index()] = true;
        }
        l
    }

    pub fn get(&self, class: Class) -> bool {
        self.0[class.index()]
    }

    pub fn set(&mut self, class: Class, value: bool) {
        self.0[class.index()] = value;
    }

    /// True iff any of Mod, Bl, Int, Pro, Snd, Wd is set.
    pub fn any_dysfluency(&self) -> bool {
        self.dysfluency_count() > 0
    }

    pub fn dysfluency_count(&self) -> usize {
        Class::DYSFLUENCIES.iter().filter(|&&c| self.get(c)).count()
    }

    /// Labels restricted to a class set, in that set's order.
    pub fn project(&self, set: ClassSet) -> Vec<bool> {
        set.classes().iter().map(|&c| self.get(c)).collect()
    }
}

/// Metadata of one clip.
#[derive(Debug, Clone, PartialEq)]
pub struct ClipRecord {
    pub clip_id: String,
    pub dataset_id: DatasetId,
    pub speaker_id: String,
    pub gender: Gender,
    pub split: Split,
    pub annotator_counts: Option<[u32; 7]>,
    pub labels: Labels,
    pub duration_s: f64,
    /// Keys not interpreted by the toolkit; written back unchanged.
    pub extra: serde_json::Map<String, serde_json::Value>,
}

impl ClipRecord {
    pub fn new(
        clip_id: impl Into<String>,
        dataset_id: DatasetId,
        speaker_id: impl Into<String>,
        split: Split,
        labels: Labels,
    ) -> Self {
        Self {
            clip_id: clip_id.into(),
            dataset_id,
            speaker_id: speaker_id.into(),
            gender: Gender::Unknown,
            split,
            annotator_counts: None,
            labels,
            duration_s: 3.0,
            extra: serde_json::Map::new(),
        }
    }

    pub fn any_label(&self) -> bool {
        self.labels.any_dysfluency()
    }
}

/// A validated collection of clips.
#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub name: String,
    /// `None` for manifests that mix datasets; records then carry their own id.
    pub dataset_id: Option<DatasetId>,
    pub class_set: ClassSet,
    pub n_annotators: u32,
    /// Names of the manifests this one was merged from.
    pub sources: Vec<String>,
    /// Threshold used when labels were derived from annotator counts.
    pub binarization_threshold: u32,
    pub records: Vec<ClipRecord>,
    pub header_extra: serde_json::Map<String, serde_json::Value>,
}

impl Manifest {
    /// Builds a manifest from records and checks every invariant.
    pub fn new(
        name: impl Into<String>,
        class_set: ClassSet,
        records: Vec<ClipRecord>,
    ) -> crate::Result<Self> {
        let dataset_id = single_dataset(&records);
        let manifest = Self {
            name: name.into(),
            dataset_id,
            class_set,
            n_annotators: 3,
            sources: Vec::new(),
            binarization_threshold: 2,
            records,
            header_extra: serde_json::Map::new(),
        };
        let issues = manifest.validate();
        if issues.is_empty() {
            Ok(manifest)
        } else {
            Err(Error::Validation(issues))
        }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &ClipRecord> {
        self.records.iter().filter(move |r| r.split == split)
    }

    pub fn get(&self, clip_id: &str) -> Option<&ClipRecord> {
        self.records.iter().find(|r| r.clip_id == clip_id)
    }

    /// Datasets present, in first-appearance order.
    pub fn datasets(&self) -> Vec<DatasetId> {
        let mut out = Vec::new();
        for r in &self.records {
            if !out.contains(&r.dataset_id) {
                out.push(r.dataset_id);
            }
        }
        if out.is_empty() {
            out.extend(self.dataset_id);
        }
        out
    }

    /// Human-readable description of how labels were obtained.
    pub fn binarization_rule(&self) -> String {
        format!(
            "class positive iff >= {} of {} annotators (applied where only counts are given)",
            self.binarization_threshold, self.n_annotators
        )
    }

    /// Invariant violations; line numbers are record positions + 1 (the
    /// header occupies line 1 of a manifest file).
    pub fn validate(&self) -> Vec<crate::error::Issue> {
        manifest::validate_records(&self.records, self.class_set, |i| i + 2)
    }
}

fn single_dataset(records: &[ClipRecord]) -> Option<DatasetId> {
    let first = records.first()?.dataset_id;
    records
        .iter()
        .all(|r| r.dataset_id == first)
        .then_some(first)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn six_is_seven_without_mod() {
        let seven = ClassSet::Seven.classes();
        let six = ClassSet::Six.classes();
        assert_eq!(six, &seven[1..]);
        assert!(!six.contains(&Class::Mod));
        assert_eq!(ClassSet::Six.position(Class::Bl), Some(0));
        assert_eq!(ClassSet::Seven.position(Class::Bl), Some(1));
    }

    #[test]
    fn any_label_ignores_no_df() {
        assert!(!Labels::from_classes(&[Class::NoDf]).any_dysfluency());
        assert!(Labels::from_classes(&[Class::Mod]).any_dysfluency());
        assert_eq!(Labels::from_classes(&[Class::Bl, Class::Int, Class::NoDf]).dysfluency_count(), 2);
    }

    #[test]
    fn parse_names() {
        assert_eq!("No-Df".parse::<Class>().unwrap(), Class::NoDf);
        assert_eq!("ksof".parse::<DatasetId>().unwrap(), DatasetId::Ksof);
        assert!("holdout".parse::<Split>().is_err());
        assert_eq!("seven".parse::<ClassSet>().unwrap(), ClassSet::Seven);
    }
}
