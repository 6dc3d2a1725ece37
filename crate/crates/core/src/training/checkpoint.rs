use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{EpochRecord, TrainConfig, WarmStart};
use crate::datasets::{Class, ClassSet};
use crate::error::{Error, Result};
use crate::fsutil::write_atomic;
use crate::head::{init_row, HeadDims, HeadParams};

pub const CHECKPOINT_FORMAT: u32 = 1;
pub const PARAMS_JSON: &str = "params.json";
pub const PARAMS_BIN: &str = "params.bin";

/// One training run in a checkpoint's ancestry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LineageEntry {
    pub manifest: String,
    pub sources: Vec<String>,
    pub class_set: ClassSet,
    pub seed: u64,
}

/// A trained head with the configuration and history that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: HeadParams,
    pub config: TrainConfig,
    pub history: Vec<EpochRecord>,
    /// 1-based epoch whose parameters are stored.
    pub best_epoch: usize,
    /// Oldest run first; the last entry is the run that wrote this checkpoint.
    pub lineage: Vec<LineageEntry>,
}

impl Checkpoint {
    pub fn class_set(&self) -> ClassSet {
        self.config.class_set
    }

    pub fn dims(&self) -> HeadDims {
        self.params.dims()
    }

    pub fn best_record(&self) -> Option<&EpochRecord> {
        self.history.iter().find(|r| r.epoch == self.best_epoch)
    }

    /// Monitored dev loss at the stored epoch.
    pub fn best_dev_loss(&self) -> Option<f64> {
        self.best_record().map(|r| r.dev.monitored(self.config.monitor))
    }
}

#[derive(Serialize, Deserialize)]
struct SegmentInfo {
    name: String,
    len: usize,
}

#[derive(Serialize, Deserialize)]
struct ParamsJson {
    format_version: u32,
    toolkit_version: String,
    dims: HeadDims,
    class_set: ClassSet,
    classes: Vec<String>,
    num_params: usize,
    segments: Vec<SegmentInfo>,
    best_epoch: usize,
    config: TrainConfig,
    history: Vec<EpochRecord>,
    lineage: Vec<LineageEntry>,
}

/// Writes `params.json` and `params.bin` (f32 little-endian, canonical
/// parameter order) into `dir`, creating it if needed.
pub fn save_checkpoint(checkpoint: &Checkpoint, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let params = &checkpoint.params;
    let meta = ParamsJson {
        format_version: CHECKPOINT_FORMAT,
        toolkit_version: env!("CARGO_PKG_VERSION").to_string(),
        dims: params.dims(),
        class_set: checkpoint.class_set(),
        classes: checkpoint.class_set().classes().iter().map(|c| c.name().to_string()).collect(),
        num_params: params.num_params(),
        segments: params
            .segments()
            .iter()
            .map(|s| SegmentInfo {
                name: s.name.to_string(),
                len: s.values.len(),
            })
            .collect(),
        best_epoch: checkpoint.best_epoch,
        config: checkpoint.config.clone(),
        history: checkpoint.history.clone(),
        lineage: checkpoint.lineage.clone(),
    };
    let mut bin = Vec::with_capacity(4 * meta.num_params);
    for v in params.to_flat() {
        bin.extend_from_slice(&(v as f32).to_le_bytes());
    }
    write_atomic(&dir.join(PARAMS_BIN), &bin)?;
    let mut json = serde_json::to_string_pretty(&meta)?;
    json.push('\n');
    write_atomic(&dir.join(PARAMS_JSON), json.as_bytes())
}

pub fn load_checkpoint(dir: &Path) -> Result<Checkpoint> {
    let json_path = dir.join(PARAMS_JSON);
    let text = std::fs::read_to_string(&json_path).map_err(|e| Error::io(&json_path, e))?;
    let meta: ParamsJson = serde_json::from_str(&text)?;
    if meta.format_version != CHECKPOINT_FORMAT {
        return Err(Error::format(
            "format_version",
            format!("unsupported checkpoint format {}", meta.format_version),
        ));
    }
    if meta.dims.classes != meta.class_set.len() || meta.config.class_set != meta.class_set {
        return Err(Error::format(
            "class_set",
            format!("{} outputs for class set {}", meta.dims.classes, meta.class_set.as_str()),
        ));
    }
    let expected = HeadParams::zeros(meta.dims);
    let layout_ok = meta.num_params == expected.num_params()
        && meta.segments.len() == expected.segments().len()
        && meta
            .segments
            .iter()
            .zip(expected.segments())
            .all(|(a, b)| a.name == b.name && a.len == b.values.len());
    if !layout_ok {
        return Err(Error::format("segments", "parameter layout does not match dims"));
    }
    let bin_path = dir.join(PARAMS_BIN);
    let bytes = std::fs::read(&bin_path).map_err(|e| Error::io(&bin_path, e))?;
    if bytes.len() != 4 * meta.num_params {
        return Err(Error::format(
            "params.bin",
            format!("{} bytes for {} parameters", bytes.len(), meta.num_params),
        ));
    }
    let flat: Vec<f64> = bytes
        .chunks_exact(4)
        .map(|c| f64::from(f32::from_le_bytes(c.try_into().expect("4-byte chunk"))))
        .collect();
    let params = HeadParams::from_flat(meta.dims, &flat)?;
    if !params.is_finite() {
        return Err(Error::format("params.bin", "non-finite parameter"));
    }
    Ok(Checkpoint {
        params,
        config: meta.config,
        history: meta.history,
        best_epoch: meta.best_epoch,
        lineage: meta.lineage,
    })
}

/// Initial parameters for a run configured by `config`, taken from
/// `checkpoint`. Between six- and seven-class heads the Mod row of the main
/// layer is dropped, or drawn fresh with zero bias.
pub fn warm_start(checkpoint: &Checkpoint, config: &TrainConfig) -> Result<WarmStart> {
    let source = &checkpoint.params;
    let src_dims = source.dims();
    if src_dims.projections != config.projections {
        return Err(Error::Incompatible(format!(
            "checkpoint projections={} but configuration projections={}",
            src_dims.projections, config.projections
        )));
    }
    let mut params = source.clone();
    let d = src_dims.dim;
    let mod_row = Class::Mod.index();
    match (checkpoint.class_set(), config.class_set) {
        (a, b) if a == b => {}
        (ClassSet::Six, ClassSet::Seven) => {
            params.main.weight.splice(0..0, init_row(config.seed, d));
            params.main.bias.insert(mod_row, 0.0);
            params.main.out_dim += 1;
        }
        (ClassSet::Seven, ClassSet::Six) => {
            params.main.weight.drain(mod_row * d..(mod_row + 1) * d);
            params.main.bias.remove(mod_row);
            params.main.out_dim -= 1;
        }
        _ => unreachable!("two class sets"),
    }
    Ok(WarmStart {
        params,
        lineage: checkpoint.lineage.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::head::init_params;
    use crate::training::LossSummary;

    fn checkpoint(class_set: ClassSet) -> Checkpoint {
        let config = TrainConfig { class_set, ..Default::default() };
        let loss = |v| LossSummary { total: v, main: v, aux: v };
        Checkpoint {
            params: init_params(3, HeadDims::new(4, 5, class_set.len())),
            config,
            history: vec![
                EpochRecord { epoch: 1, train: loss(1.0), dev: loss(0.9) },
                EpochRecord { epoch: 2, train: loss(0.8), dev: loss(0.7) },
            ],
            best_epoch: 2,
            lineage: vec![LineageEntry {
                manifest: "toy".into(),
                sources: vec![],
                class_set,
                seed: 0,
            }],
        }
    }

    fn rows(p: &HeadParams) -> Vec<&[f64]> {
        (0..p.main.out_dim).map(|o| p.main.row(o)).collect()
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut ck = checkpoint(ClassSet::Seven);
        ck.params = HeadParams::from_flat(
            ck.params.dims(),
            &ck.params.to_flat().iter().map(|&v| f64::from(v as f32)).collect::<Vec<_>>(),
        )
        .unwrap();
        save_checkpoint(&ck, dir.path()).unwrap();
        let back = load_checkpoint(dir.path()).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.best_dev_loss(), Some(0.7));
        let bin = std::fs::read(dir.path().join(PARAMS_BIN)).unwrap();
        assert_eq!(bin.len(), 4 * ck.params.num_params());
        assert_eq!(&bin[..4], &(ck.params.layer_weights[0] as f32).to_le_bytes());
    }

    #[test]
    fn truncated_params_rejected() {
        let dir = tempfile::tempdir().unwrap();
        save_checkpoint(&checkpoint(ClassSet::Six), dir.path()).unwrap();
        let bin = dir.path().join(PARAMS_BIN);
        let bytes = std::fs::read(&bin).unwrap();
        std::fs::write(&bin, &bytes[..bytes.len() - 4]).unwrap();
        assert!(matches!(load_checkpoint(dir.path()), Err(Error::Format { field: "params.bin", .. })));
    }

    #[test]
    fn warm_start_same_set_copies() {
        let ck = checkpoint(ClassSet::Seven);
        let w = warm_start(&ck, &ck.config).unwrap();
        assert_eq!(w.params, ck.params);
        assert_eq!(w.lineage, ck.lineage);
    }

    #[test]
    fn warm_start_six_to_seven() {
        let ck = checkpoint(ClassSet::Six);
        let config = TrainConfig { class_set: ClassSet::Seven, seed: 11, ..Default::default() };
        let w = warm_start(&ck, &config).unwrap();
        let (src, dst) = (rows(&ck.params), rows(&w.params));
        assert_eq!(dst.len(), 7);
        assert_eq!(&dst[1..], &src[..]);
        assert_eq!(dst[0], init_row(11, 5).as_slice());
        assert_eq!(w.params.main.bias[0], 0.0);
        assert_eq!(&w.params.main.bias[1..], &ck.params.main.bias[..]);
        assert_eq!(w.params.aux, ck.params.aux);
        assert_eq!(w.params.projections, ck.params.projections);
        assert_eq!(w.params.dims(), HeadDims::new(4, 5, 7));
    }

    #[test]
    fn warm_start_seven_to_six() {
        let mut ck = checkpoint(ClassSet::Seven);
        ck.params.main.bias = (0..7).map(|i| i as f64).collect();
        let config = TrainConfig { class_set: ClassSet::Six, ..Default::default() };
        let w = warm_start(&ck, &config).unwrap();
        let (src, dst) = (rows(&ck.params), rows(&w.params));
        for (k, row) in dst.iter().enumerate() {
            assert_eq!(*row, src[k + 1]);
        }
        assert_eq!(w.params.main.bias, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
    }

    #[test]
    fn warm_start_projection_mismatch() {
        let ck = checkpoint(ClassSet::Seven);
        let config = TrainConfig { projections: false, ..Default::default() };
        assert!(matches!(warm_start(&ck, &config), Err(Error::Incompatible(_))));
    }
}
