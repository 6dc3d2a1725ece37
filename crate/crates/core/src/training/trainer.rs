use serde::{Deserialize, Serialize};

use super::{AdamState, AuxTask, Checkpoint, LineageEntry, ModPolicy, Monitor, TrainConfig};
use crate::datasets::{Class, ClassSet, ClipRecord, Gender, Manifest, Split};
use crate::error::{Error, Result};
use crate::features::FeatureStore;
use crate::head::{init_params, ForwardPass, HeadDims, HeadParams};
use crate::losses::{aux_cross_entropy, main_loss_logits, mtl_loss};

use super::optimizer_step;

/// Main, auxiliary and combined loss over a set of clips.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossSummary {
    pub total: f64,
    pub main: f64,
    pub aux: f64,
}

impl LossSummary {
    pub fn monitored(&self, monitor: Monitor) -> f64 {
        match monitor {
            Monitor::Total => self.total,
            Monitor::Main => self.main,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    /// Mean over the epoch's batches of the batch loss.
    pub train: LossSummary,
    pub dev: LossSummary,
}

/// Tracks the best monitored loss; stops after `patience` consecutive
/// epochs without a strict improvement.
#[derive(Debug, Clone)]
pub struct EarlyStopping {
    patience: usize,
    best: Option<(usize, f64)>,
    stale: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        Self {
            patience,
            best: None,
            stale: 0,
        }
    }

    /// Records an epoch's loss; returns `true` when training should stop.
    pub fn observe(&mut self, epoch: usize, loss: f64) -> bool {
        if !loss.is_nan() && self.best.is_none_or(|(_, best)| loss < best) {
            self.best = Some((epoch, loss));
            self.stale = 0;
        } else {
            self.stale += 1;
        }
        self.stale >= self.patience
    }

    pub fn improved_at(&self, epoch: usize) -> bool {
        self.best.is_some_and(|(e, _)| e == epoch)
    }

    pub fn best_epoch(&self) -> Option<usize> {
        self.best.map(|(e, _)| e)
    }
}

/// Initial parameters and ancestry inherited from an earlier checkpoint.
#[derive(Debug, Clone)]
pub struct WarmStart {
    pub params: HeadParams,
    pub lineage: Vec<LineageEntry>,
}

struct Targets {
    main: Vec<bool>,
    mask: Option<Vec<bool>>,
    aux: Option<usize>,
}

fn targets(record: &ClipRecord, config: &TrainConfig) -> Targets {
    let set = config.class_set;
    let mask = (config.mod_policy == ModPolicy::Mask
        && record.dataset_id.is_english()
        && set.contains(Class::Mod))
    .then(|| set.classes().iter().map(|&c| c != Class::Mod).collect());
    let aux = match config.aux_task {
        AuxTask::Any => Some(usize::from(record.labels.any_dysfluency())),
        AuxTask::Gender => match record.gender {
            Gender::F => Some(0),
            Gender::M => Some(1),
            Gender::Unknown => None,
        },
    };
    Targets {
        main: record.labels.project(set),
        mask,
        aux,
    }
}

struct ClipLoss {
    main: f64,
    aux: Option<f64>,
    d_main: Vec<f64>,
    d_aux: Vec<f64>,
}

fn clip_loss(pass: &ForwardPass<'_>, t: &Targets, config: &TrainConfig) -> Result<ClipLoss> {
    let out = pass.output();
    let main = main_loss_logits(&out.main_logits, &t.main, t.mask.as_deref(), &config.loss)?;
    let (aux, d_aux) = match t.aux {
        Some(target) => {
            let lg = aux_cross_entropy(&out.aux_logits, target, config.loss.aux_class_weights.as_ref())?;
            (Some(lg.value), lg.grad)
        }
        None => (None, vec![0.0; 2]),
    };
    Ok(ClipLoss {
        main: main.value,
        aux,
        d_main: main.grad,
        d_aux,
    })
}

fn with_clip<T>(clip_id: &str, r: Result<T>) -> Result<T> {
    r.map_err(|e| match e {
        Error::Shape(m) => Error::Shape(format!("clip `{clip_id}`: {m}")),
        other => other,
    })
}

fn summarize(main_sum: f64, n: usize, aux_sum: f64, n_aux: usize, w_main: f64) -> LossSummary {
    let main = main_sum / n as f64;
    let aux = if n_aux == 0 { 0.0 } else { aux_sum / n_aux as f64 };
    LossSummary {
        total: mtl_loss(main, aux, w_main),
        main,
        aux,
    }
}

/// Loss of `params` over one split, without gradients.
pub fn evaluate_loss(
    params: &HeadParams,
    config: &TrainConfig,
    manifest: &Manifest,
    split: Split,
    store: &mut FeatureStore,
) -> Result<LossSummary> {
    let (mut main_sum, mut aux_sum, mut n, mut n_aux) = (0.0, 0.0, 0, 0);
    for record in manifest.split(split) {
        let hidden = store.get(&record.clip_id)?;
        let pass = with_clip(&record.clip_id, ForwardPass::run(&hidden, params))?;
        let loss = clip_loss(&pass, &targets(record, config), config)?;
        main_sum += loss.main;
        n += 1;
        if let Some(a) = loss.aux {
            aux_sum += a;
            n_aux += 1;
        }
    }
    if n == 0 {
        return Err(Error::Data(format!("split `{split}` of {} is empty", manifest.name)));
    }
    Ok(summarize(main_sum, n, aux_sum, n_aux, config.loss.w_main))
}

fn lineage_entry(manifest: &Manifest, class_set: ClassSet, seed: u64) -> LineageEntry {
    LineageEntry {
        manifest: manifest.name.clone(),
        sources: manifest.sources.clone(),
        class_set,
        seed,
    }
}

/// Trains a freshly initialised head.
pub fn train(config: &TrainConfig, manifest: &Manifest, store: &mut FeatureStore) -> Result<Checkpoint> {
    train_with(config, manifest, store, None)
}

/// Trains from `warm` when given, otherwise from [`init_params`] with the
/// configured seed. The returned checkpoint holds the parameters of the
/// epoch with the lowest monitored dev loss.
pub fn train_with(
    config: &TrainConfig,
    manifest: &Manifest,
    store: &mut FeatureStore,
    warm: Option<WarmStart>,
) -> Result<Checkpoint> {
    config.validate()?;
    let train_ids: Vec<&str> = manifest.split(Split::Train).map(|r| r.clip_id.as_str()).collect();
    if train_ids.is_empty() {
        return Err(Error::Data(format!("train split of {} is empty", manifest.name)));
    }
    if manifest.split(Split::Dev).next().is_none() {
        return Err(Error::Data(format!("dev split of {} is empty", manifest.name)));
    }
    store.require(
        manifest
            .records
            .iter()
            .filter(|r| r.split != Split::Test)
            .map(|r| r.clip_id.as_str()),
    )?;

    let (layers, _, dim) = store.get(train_ids[0])?.dims3()?;
    let dims = HeadDims {
        layers,
        dim,
        classes: config.class_set.len(),
        projections: config.projections,
    };
    let (mut params, mut lineage) = match warm {
        Some(w) => {
            let have = w.params.dims();
            if have.layers != layers || have.dim != dim {
                return Err(Error::Incompatible(format!(
                    "warm-start head expects {} layers of width {}, features have {layers} of width {dim}",
                    have.layers, have.dim
                )));
            }
            if have != dims {
                return Err(Error::Incompatible(format!(
                    "warm-start head {have:?} does not match the configured head {dims:?}"
                )));
            }
            (w.params, w.lineage)
        }
        None => (init_params(config.seed, dims), Vec::new()),
    };
    lineage.push(lineage_entry(manifest, config.class_set, config.seed));
    log::info!(
        "training {} parameters on {} train clips of {}",
        params.num_params(),
        train_ids.len(),
        manifest.name
    );

    let adamw = config.adamw();
    let w_main = config.loss.w_main;
    let mut state = AdamState::new(&params);
    let mut stopper = EarlyStopping::new(config.patience);
    let mut history = Vec::new();
    let mut best_params = params.clone();

    for epoch in 1..=config.max_epochs {
        let batches = crate::datasets::batch_indices(
            manifest,
            Split::Train,
            config.batch_size,
            config.seed,
            epoch as u64,
        )?;
        let (mut total_sum, mut main_sum, mut aux_sum) = (0.0, 0.0, 0.0);
        for batch in &batches {
            let records: Vec<&ClipRecord> = batch.iter().map(|&i| &manifest.records[i]).collect();
            let batch_targets: Vec<Targets> = records.iter().map(|r| targets(r, config)).collect();
            let n = records.len();
            let n_aux = batch_targets.iter().filter(|t| t.aux.is_some()).count();
            let main_scale = w_main / n as f64;
            let aux_scale = if n_aux == 0 { 0.0 } else { (1.0 - w_main) / n_aux as f64 };

            let mut grads = HeadParams::zeros(dims);
            let (mut b_main, mut b_aux) = (0.0, 0.0);
            for (record, t) in records.iter().zip(&batch_targets) {
                let hidden = store.get(&record.clip_id)?;
                let pass = with_clip(&record.clip_id, ForwardPass::run(&hidden, &params))?;
                let mut loss = clip_loss(&pass, t, config)?;
                b_main += loss.main;
                b_aux += loss.aux.unwrap_or(0.0);
                loss.d_main.iter_mut().for_each(|g| *g *= main_scale);
                loss.d_aux.iter_mut().for_each(|g| *g *= aux_scale);
                grads.add_scaled(1.0, &pass.backward(&loss.d_main, &loss.d_aux)?)?;
            }
            let summary = summarize(b_main, n, b_aux, n_aux, w_main);
            total_sum += summary.total;
            main_sum += summary.main;
            aux_sum += summary.aux;
            optimizer_step(&mut params, &grads, &mut state, &adamw)?;
            if !params.is_finite() {
                return Err(Error::Domain(format!("parameters became non-finite in epoch {epoch}")));
            }
        }
        let nb = batches.len() as f64;
        let train = LossSummary {
            total: total_sum / nb,
            main: main_sum / nb,
            aux: aux_sum / nb,
        };
        let dev = evaluate_loss(&params, config, manifest, Split::Dev, store)?;
        log::info!(
            "epoch {epoch}: train {:.6} (main {:.6}, aux {:.6}), dev {:.6} (main {:.6}, aux {:.6})",
            train.total,
            train.main,
            train.aux,
            dev.total,
            dev.main,
            dev.aux
        );
        history.push(EpochRecord { epoch, train, dev });
        let stop = stopper.observe(epoch, dev.monitored(config.monitor));
        if stopper.improved_at(epoch) {
            best_params.clone_from(&params);
        }
        if stop {
            log::info!("early stop after epoch {epoch}");
            break;
        }
    }
    let best_epoch = stopper
        .best_epoch()
        .ok_or_else(|| Error::Domain("dev loss was never finite".into()))?;
    Ok(Checkpoint {
        params: best_params,
        config: config.clone(),
        history,
        best_epoch,
        lineage,
    })
}
