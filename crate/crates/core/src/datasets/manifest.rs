//! JSON-lines manifest reader and writer.
//!
//! Line 1 is a header object `{"name", "dataset_id", "class_set",
//! "n_annotators"}`; every following non-blank line is one clip record.
//! Keys the toolkit does not interpret are kept and written back.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use super::{binarize_labels, Class, ClassSet, ClipRecord, DatasetId, Gender, Labels, Manifest, Split};
use crate::error::{Error, Issue, Result};
use crate::fsutil;

const MIXED: &str = "mixed";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LoadOptions {
    /// Minimum annotator count for a positive label when a record only
    /// carries `annotator_counts`.
    pub threshold: u32,
}

impl Default for LoadOptions {
    fn default() -> Self {
        Self { threshold: 2 }
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct RawHeader {
    name: String,
    #[serde(default)]
    dataset_id: Option<String>,
    class_set: ClassSet,
    #[serde(default = "default_annotators")]
    n_annotators: u32,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    sources: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    binarization_threshold: Option<u32>,
    #[serde(flatten)]
    extra: Map<String, Value>,
}

fn default_annotators() -> u32 {
    3
}

#[derive(Debug, Serialize, Deserialize)]
struct RawRecord {
    clip_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    dataset_id: Option<DatasetId>,
    speaker_id: String,
    gender: Gender,
    split: Split,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    labels: Option<Map<String, Value>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    annotator_counts: Option<Map<String, Value>>,
    duration_s: f64,
    #[serde(flatten)]
    extra: Map<String, Value>,
}

fn parse_class_map(map: &Map<String, Value>, what: &str) -> std::result::Result<[u64; 7], String> {
    let mut out = [0u64; 7];
    for (key, value) in map {
        let class: Class = key.parse().map_err(|_| format!("unknown class `{key}` in {what}"))?;
        out[class.index()] = value
            .as_u64()
            .ok_or_else(|| format!("{what}.{key} must be a non-negative integer, got {value}"))?;
    }
    Ok(out)
}

fn convert_record(
    raw: RawRecord,
    header_dataset: Option<DatasetId>,
    n_annotators: u32,
    threshold: u32,
) -> std::result::Result<ClipRecord, String> {
    let dataset_id = match (raw.dataset_id, header_dataset) {
        (Some(own), Some(h)) if own != h => {
            return Err(format!("dataset_id {own} differs from header dataset {h}"))
        }
        (Some(own), _) => own,
        (None, Some(h)) => h,
        (None, None) => return Err("dataset_id required in a mixed manifest".into()),
    };
    let counts = match &raw.annotator_counts {
        Some(map) => {
            let c = parse_class_map(map, "annotator_counts")?;
            let mut out = [0u32; 7];
            for (dst, src) in out.iter_mut().zip(c) {
                *dst = u32::try_from(src).map_err(|_| format!("annotator count {src} too large"))?;
            }
            Some(out)
        }
        None => None,
    };
    let labels = match (&raw.labels, &counts) {
        (Some(map), _) => {
            let values = parse_class_map(map, "labels")?;
            if let Some(v) = values.iter().find(|&&v| v > 1) {
                return Err(format!("labels must be 0 or 1, got {v}"));
            }
            Labels(values.map(|v| v == 1))
        }
        (None, Some(c)) => binarize_labels(c, n_annotators, threshold).map_err(|e| e.to_string())?,
        (None, None) => return Err("record has neither labels nor annotator_counts".into()),
    };
    Ok(ClipRecord {
        clip_id: raw.clip_id,
        dataset_id,
        speaker_id: raw.speaker_id,
        gender: raw.gender,
        split: raw.split,
        annotator_counts: counts,
        labels,
        duration_s: raw.duration_s,
        extra: raw.extra,
    })
}

/// Record-level invariants. `line_of` maps a record index to its file line.
pub(crate) fn validate_records(
    records: &[ClipRecord],
    class_set: ClassSet,
    line_of: impl Fn(usize) -> usize,
) -> Vec<Issue> {
    let mut issues = Vec::new();
    let mut seen: HashMap<&str, usize> = HashMap::new();
    for (i, r) in records.iter().enumerate() {
        let line = line_of(i);
        let issue = |message: String| Issue {
            line,
            clip_id: Some(r.clip_id.clone()),
            message,
        };
        if let Some(prev) = seen.insert(&r.clip_id, line) {
            issues.push(issue(format!("duplicate clip_id (first seen on line {prev})")));
        }
        if r.labels.get(Class::Mod) {
            if r.dataset_id.is_english() {
                issues.push(issue(format!("Mod label on English clip from {}", r.dataset_id)));
            } else if class_set == ClassSet::Six {
                issues.push(issue("Mod label in a six-class manifest".into()));
            }
        }
        if !(r.duration_s.is_finite() && r.duration_s > 0.0) {
            issues.push(issue(format!("duration_s must be positive, got {}", r.duration_s)));
        }
    }
    issues
}

/// Parses manifest text; all record problems are reported together.
pub fn parse_manifest(text: &str, options: LoadOptions) -> Result<Manifest> {
    let mut lines = text.lines().enumerate();
    let header_line = lines
        .next()
        .filter(|(_, l)| !l.trim().is_empty())
        .ok_or_else(|| {
            Error::Validation(vec![Issue {
                line: 1,
                clip_id: None,
                message: "missing header line".into(),
            }])
        })?
        .1;
    let header: RawHeader = serde_json::from_str(header_line).map_err(|e| {
        Error::Validation(vec![Issue {
            line: 1,
            clip_id: None,
            message: format!("bad header: {e}"),
        }])
    })?;
    let header_dataset = match header.dataset_id.as_deref() {
        None | Some(MIXED) => None,
        Some(s) => Some(s.parse::<DatasetId>().map_err(|e| {
            Error::Validation(vec![Issue {
                line: 1,
                clip_id: None,
                message: e.to_string(),
            }])
        })?),
    };
    if options.threshold == 0 || options.threshold > header.n_annotators {
        return Err(Error::Config(format!(
            "binarization threshold {} outside 1..={}",
            options.threshold, header.n_annotators
        )));
    }

    let mut issues = Vec::new();
    let mut records = Vec::new();
    let mut lines_of = Vec::new();
    let mut raw_label_free = 0usize;
    for (idx, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let line_no = idx + 1;
        let parsed = serde_json::from_str::<RawRecord>(line)
            .map_err(|e| e.to_string())
            .and_then(|raw| {
                if raw.labels.is_none() {
                    raw_label_free += 1;
                }
                let id = raw.clip_id.clone();
                convert_record(raw, header_dataset, header.n_annotators, options.threshold)
                    .map_err(|m| format!("clip `{id}`: {m}"))
            });
        match parsed {
            Ok(r) => {
                records.push(r);
                lines_of.push(line_no);
            }
            Err(message) => issues.push(Issue {
                line: line_no,
                clip_id: None,
                message,
            }),
        }
    }
    issues.extend(validate_records(&records, header.class_set, |i| lines_of[i]));
    let binarized_any = raw_label_free > 0;
    if !issues.is_empty() {
        issues.sort_by_key(|i| i.line);
        return Err(Error::Validation(issues));
    }
    Ok(Manifest {
        name: header.name,
        dataset_id: header_dataset,
        class_set: header.class_set,
        n_annotators: header.n_annotators,
        sources: header.sources,
        binarization_threshold: if binarized_any {
            options.threshold
        } else {
            header.binarization_threshold.unwrap_or(options.threshold)
        },
        records,
        header_extra: header.extra,
    })
}

pub fn load_manifest(path: impl AsRef<Path>) -> Result<Manifest> {
    load_manifest_with(path, LoadOptions::default())
}

pub fn load_manifest_with(path: impl AsRef<Path>, options: LoadOptions) -> Result<Manifest> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_manifest(&text, options)
}

fn class_map<T: Into<Value> + Copy>(set: ClassSet, values: &[T; 7]) -> Map<String, Value> {
    set.classes()
        .iter()
        .map(|&c| (c.name().to_string(), values[c.index()].into()))
        .collect()
}

/// Serialises a manifest to its JSON-lines text.
pub fn manifest_to_string(manifest: &Manifest) -> Result<String> {
    let header = RawHeader {
        name: manifest.name.clone(),
        dataset_id: Some(
            manifest
                .dataset_id
                .map_or(MIXED.to_string(), |d| d.as_str().to_string()),
        ),
        class_set: manifest.class_set,
        n_annotators: manifest.n_annotators,
        sources: manifest.sources.clone(),
        binarization_threshold: Some(manifest.binarization_threshold),
        extra: manifest.header_extra.clone(),
    };
    let mut out = serde_json::to_string(&header)?;
    out.push('\n');
    for r in &manifest.records {
        let labels = r.labels.0.map(u8::from);
        let raw = RawRecord {
            clip_id: r.clip_id.clone(),
            dataset_id: manifest.dataset_id.is_none().then_some(r.dataset_id),
            speaker_id: r.speaker_id.clone(),
            gender: r.gender,
            split: r.split,
            labels: Some(class_map(manifest.class_set, &labels)),
            annotator_counts: r.annotator_counts.map(|c| class_map(ClassSet::Seven, &c)),
            duration_s: r.duration_s,
            extra: r.extra.clone(),
        };
        out.push_str(&serde_json::to_string(&raw)?);
        out.push('\n');
    }
    Ok(out)
}

/// Writes a manifest atomically (temporary file + rename).
pub fn save_manifest(manifest: &Manifest, path: impl AsRef<Path>) -> Result<()> {
    fsutil::write_atomic(path.as_ref(), manifest_to_string(manifest)?.as_bytes())
}
