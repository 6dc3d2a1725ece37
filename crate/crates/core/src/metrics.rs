//! Per-class precision, recall and F1 with the `N/A` and `-` conventions,
//! and Table-style reports.
//!
//! * `N/A`: the class has no labelled and no predicted positives.
//! * `-`: the dataset annotates the class but the model does not predict it.
//!
//! When only one of precision and recall is undefined it is reported as 0,
//! and F1 as 0. Macro averages skip `N/A` and `-` classes.

use std::fmt::Write as _;

use serde::Serialize;

use crate::datasets::{Class, ClassSet, Manifest, Split};
use crate::error::{Error, Result};
use crate::features::FeatureStore;
use crate::head::{head_forward, HeadParams};
use crate::tensor::Tensor;
use crate::training::Checkpoint;

pub const DEFAULT_THRESHOLD: f64 = 0.5;

fn check_threshold(threshold: f64) -> Result<()> {
    if (0.0..=1.0).contains(&threshold) {
        Ok(())
    } else {
        Err(Error::Config(format!("threshold must lie in [0, 1], got {threshold}")))
    }
}

/// `probs[c] >= threshold`.
pub fn threshold_probs(probs: &[f64], threshold: f64) -> Vec<bool> {
    probs.iter().map(|&p| p >= threshold).collect()
}

/// Binary main-task decision for one clip's hidden states.
pub fn predict(params: &HeadParams, hidden: &Tensor, threshold: f64) -> Result<Vec<bool>> {
    check_threshold(threshold)?;
    Ok(threshold_probs(&head_forward(hidden, params)?.main_probs, threshold))
}

/// Confusion counts of one class.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct Counts {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tn: u64,
}

impl Counts {
    pub fn add(&mut self, pred: bool, target: bool) {
        match (pred, target) {
            (true, true) => self.tp += 1,
            (true, false) => self.fp += 1,
            (false, true) => self.fn_ += 1,
            (false, false) => self.tn += 1,
        }
    }

    pub fn merge(&mut self, other: &Counts) {
        self.tp += other.tp;
        self.fp += other.fp;
        self.fn_ += other.fn_;
        self.tn += other.tn;
    }

    pub fn support(&self) -> u64 {
        self.tp + self.fn_
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassStatus {
    Defined,
    Na,
    NotEvaluable,
}

impl ClassStatus {
    pub fn sentinel(self) -> Option<&'static str> {
        match self {
            ClassStatus::Defined => None,
            ClassStatus::Na => Some("N/A"),
            ClassStatus::NotEvaluable => Some("-"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClassMetrics {
    pub class: String,
    pub status: ClassStatus,
    #[serde(flatten)]
    pub counts: Counts,
    pub support: u64,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub f1: Option<f64>,
}

impl ClassMetrics {
    pub fn from_counts(class: impl Into<String>, counts: Counts) -> Self {
        let Counts { tp, fp, fn_, .. } = counts;
        let ratio = |den: u64| (den > 0).then(|| tp as f64 / den as f64);
        let (p, r) = (ratio(tp + fp), ratio(tp + fn_));
        let (status, precision, recall, f1) = match (p, r) {
            (None, None) => (ClassStatus::Na, None, None, None),
            (Some(p), Some(r)) => {
                let f1 = if p + r > 0.0 { 2.0 * p * r / (p + r) } else { 0.0 };
                (ClassStatus::Defined, Some(p), Some(r), Some(f1))
            }
            (p, r) => (ClassStatus::Defined, Some(p.unwrap_or(0.0)), Some(r.unwrap_or(0.0)), Some(0.0)),
        };
        Self {
            class: class.into(),
            status,
            counts,
            support: counts.support(),
            precision,
            recall,
            f1,
        }
    }

    pub fn not_evaluable(class: impl Into<String>) -> Self {
        Self {
            class: class.into(),
            status: ClassStatus::NotEvaluable,
            counts: Counts::default(),
            support: 0,
            precision: None,
            recall: None,
            f1: None,
        }
    }
}

/// Per-class metrics plus macro averages over defined classes.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Prf1 {
    pub classes: Vec<ClassMetrics>,
    pub macro_precision: Option<f64>,
    pub macro_recall: Option<f64>,
    pub macro_f1: Option<f64>,
}

impl Prf1 {
    pub fn from_classes(classes: Vec<ClassMetrics>) -> Self {
        let mean = |get: fn(&ClassMetrics) -> Option<f64>| {
            let v: Vec<f64> = classes
                .iter()
                .filter(|c| c.status == ClassStatus::Defined)
                .filter_map(get)
                .collect();
            (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
        };
        Self {
            macro_precision: mean(|c| c.precision),
            macro_recall: mean(|c| c.recall),
            macro_f1: mean(|c| c.f1),
            classes,
        }
    }
}

/// Tallies `N×C` predictions against targets, class by class.
pub fn tally(preds: &[Vec<bool>], targets: &[Vec<bool>]) -> Result<Vec<Counts>> {
    if preds.len() != targets.len() {
        return Err(Error::Shape(format!(
            "{} prediction rows for {} target rows",
            preds.len(),
            targets.len()
        )));
    }
    let c = targets.first().or(preds.first()).map_or(0, Vec::len);
    let mut counts = vec![Counts::default(); c];
    for (i, (p, t)) in preds.iter().zip(targets).enumerate() {
        if p.len() != c || t.len() != c {
            return Err(Error::Shape(format!(
                "row {i} has {} predictions and {} targets, expected {c}",
                p.len(),
                t.len()
            )));
        }
        for (k, counts) in counts.iter_mut().enumerate() {
            counts.add(p[k], t[k]);
        }
    }
    Ok(counts)
}

/// Metrics for classes named `c0`, `c1`, ….
pub fn prf1(preds: &[Vec<bool>], targets: &[Vec<bool>]) -> Result<Prf1> {
    let classes = tally(preds, targets)?
        .into_iter()
        .enumerate()
        .map(|(k, c)| ClassMetrics::from_counts(format!("c{k}"), c))
        .collect();
    Ok(Prf1::from_classes(classes))
}

/// Evaluation of a checkpoint on one split of a manifest.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsReport {
    pub toolkit_version: String,
    pub manifest: String,
    pub split: Split,
    pub clips: usize,
    pub threshold: f64,
    pub seed: u64,
    pub binarization_rule: String,
    pub model_class_set: ClassSet,
    pub dataset_class_set: ClassSet,
    #[serde(flatten)]
    pub metrics: Prf1,
}

/// Classes reported for a model/dataset pairing, in seven-class order.
pub fn report_classes(model: ClassSet, dataset: ClassSet) -> Vec<Class> {
    Class::ALL
        .into_iter()
        .filter(|&c| model.contains(c) || dataset.contains(c))
        .collect()
}

/// Builds class metrics for a model/dataset pairing from per-clip binary
/// predictions (model class order) and seven-class label vectors.
pub fn class_metrics(
    model: ClassSet,
    dataset: ClassSet,
    preds: &[Vec<bool>],
    labels: &[[bool; 7]],
) -> Result<Prf1> {
    let targets: Vec<Vec<bool>> = labels
        .iter()
        .map(|l| model.classes().iter().map(|c| l[c.index()]).collect())
        .collect();
    if preds.iter().any(|p| p.len() != model.len()) {
        return Err(Error::Shape(format!("predictions must have {} classes", model.len())));
    }
    let counts = if preds.is_empty() {
        vec![Counts::default(); model.len()]
    } else {
        tally(preds, &targets)?
    };
    let classes = report_classes(model, dataset)
        .into_iter()
        .map(|c| match model.position(c) {
            Some(k) => ClassMetrics::from_counts(c.name(), counts[k]),
            None => ClassMetrics::not_evaluable(c.name()),
        })
        .collect();
    Ok(Prf1::from_classes(classes))
}

/// Runs the checkpoint over every clip of `split` and scores the decisions.
pub fn evaluate(
    checkpoint: &Checkpoint,
    manifest: &Manifest,
    split: Split,
    threshold: f64,
    store: &mut FeatureStore,
) -> Result<MetricsReport> {
    check_threshold(threshold)?;
    let records: Vec<_> = manifest.split(split).collect();
    if records.is_empty() {
        return Err(Error::Data(format!("split `{split}` of {} is empty", manifest.name)));
    }
    store.require(records.iter().map(|r| r.clip_id.as_str()))?;
    let mut preds = Vec::with_capacity(records.len());
    for r in &records {
        let hidden = store.get(&r.clip_id)?;
        preds.push(
            predict(&checkpoint.params, &hidden, threshold)
                .map_err(|e| Error::Shape(format!("clip `{}`: {e}", r.clip_id)))?,
        );
    }
    let labels: Vec<[bool; 7]> = records.iter().map(|r| r.labels.0).collect();
    let metrics = class_metrics(checkpoint.class_set(), manifest.class_set, &preds, &labels)?;
    Ok(MetricsReport {
        toolkit_version: env!("CARGO_PKG_VERSION").to_string(),
        manifest: manifest.name.clone(),
        split,
        clips: records.len(),
        threshold,
        seed: checkpoint.config.seed,
        binarization_rule: manifest.binarization_rule(),
        model_class_set: checkpoint.class_set(),
        dataset_class_set: manifest.class_set,
        metrics,
    })
}

fn cell(value: Option<f64>, status: ClassStatus) -> String {
    match (status.sentinel(), value) {
        (Some(s), _) => s.to_string(),
        (None, Some(v)) => format!("{v:.4}"),
        (None, None) => "N/A".to_string(),
    }
}

impl MetricsReport {
    /// Classes as columns, one row per measure; `#` lines carry metadata.
    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        let meta = [
            ("toolkit_version", self.toolkit_version.clone()),
            ("manifest", self.manifest.clone()),
            ("split", self.split.to_string()),
            ("clips", self.clips.to_string()),
            ("threshold", self.threshold.to_string()),
            ("seed", self.seed.to_string()),
            ("binarization_rule", self.binarization_rule.clone()),
            ("model_class_set", self.model_class_set.as_str().to_string()),
            ("dataset_class_set", self.dataset_class_set.as_str().to_string()),
        ];
        for (k, v) in meta {
            let _ = writeln!(out, "# {k}: {v}");
        }
        let classes = &self.metrics.classes;
        out.push_str("measure");
        for c in classes {
            let _ = write!(out, "\t{}", c.class);
        }
        out.push_str("\tmacro\n");
        let rows: [(&str, fn(&ClassMetrics) -> Option<f64>, Option<f64>); 3] = [
            ("f1", |c| c.f1, self.metrics.macro_f1),
            ("precision", |c| c.precision, self.metrics.macro_precision),
            ("recall", |c| c.recall, self.metrics.macro_recall),
        ];
        for (name, get, macro_value) in rows {
            out.push_str(name);
            for c in classes {
                let _ = write!(out, "\t{}", cell(get(c), c.status));
            }
            let _ = writeln!(out, "\t{}", cell(macro_value, ClassStatus::Defined));
        }
        out.push_str("support");
        for c in classes {
            match c.status {
                ClassStatus::NotEvaluable => out.push_str("\t-"),
                _ => {
                    let _ = write!(out, "\t{}", c.support);
                }
            }
        }
        out.push_str("\t-\n");
        out
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    pub fn class(&self, name: &str) -> Option<&ClassMetrics> {
        self.metrics.classes.iter().find(|c| c.class == name)
    }
}
