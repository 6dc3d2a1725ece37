use std::path::PathBuf;

use dysflux_core::synthetic::{generate, SyntheticSet, SyntheticSpec, FEATURES_DIR};
use dysflux_core::training::{
    grid_search, load_checkpoint, save_checkpoint, train_with, warm_start, AuxTask, Grid,
};
use dysflux_core::{train, ClassSet, Error, FeatureStore, Split, TrainConfig};
use tempfile::TempDir;

struct Fixture {
    _dir: TempDir,
    set: SyntheticSet,
    features: PathBuf,
}

fn fixture(spec: SyntheticSpec) -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let set = generate(&spec).unwrap();
    set.write(dir.path()).unwrap();
    let features = dir.path().join(FEATURES_DIR);
    Fixture { _dir: dir, set, features }
}

fn quick() -> TrainConfig {
    TrainConfig {
        learning_rate: 3e-4,
        batch_size: 16,
        max_epochs: 6,
        ..TrainConfig::default()
    }
}

impl Fixture {
    fn store(&self) -> FeatureStore {
        FeatureStore::new(&self.features, 1 << 28)
    }

    fn train(&self, config: &TrainConfig) -> dysflux_core::Checkpoint {
        train(config, &self.set.manifest, &mut self.store()).unwrap()
    }
}

#[test]
fn same_seed_gives_identical_runs_and_files() {
    let fx = fixture(SyntheticSpec::default());
    let a = fx.train(&quick());
    let b = fx.train(&quick());
    assert_eq!(a.history, b.history);
    assert_eq!(a.params, b.params);
    assert_eq!(a.best_epoch, b.best_epoch);

    let out = tempfile::tempdir().unwrap();
    let (da, db) = (out.path().join("a"), out.path().join("b"));
    save_checkpoint(&a, &da).unwrap();
    save_checkpoint(&b, &db).unwrap();
    for file in ["params.json", "params.bin"] {
        assert_eq!(std::fs::read(da.join(file)).unwrap(), std::fs::read(db.join(file)).unwrap());
    }

    let c = fx.train(&TrainConfig { seed: 1, ..quick() });
    assert_ne!(a.params, c.params);
}

#[test]
fn checkpoint_round_trip_after_training() {
    let fx = fixture(SyntheticSpec::default());
    let ck = fx.train(&quick());
    let dir = tempfile::tempdir().unwrap();
    save_checkpoint(&ck, dir.path()).unwrap();
    let back = load_checkpoint(dir.path()).unwrap();
    assert_eq!(back.history, ck.history);
    assert_eq!(back.best_epoch, ck.best_epoch);
    for (a, b) in back.params.to_flat().iter().zip(ck.params.to_flat()) {
        assert_eq!(*a, b as f32 as f64);
    }
}

#[test]
fn main_only_weight_ignores_the_auxiliary_task() {
    let fx = fixture(SyntheticSpec::default());
    let mut cfg = quick();
    cfg.loss.w_main = 1.0;
    let any = fx.train(&cfg);
    let gender = fx.train(&TrainConfig { aux_task: AuxTask::Gender, ..cfg.clone() });
    assert_eq!(any.params.main, gender.params.main);
    assert_eq!(any.params.projections, gender.params.projections);
    assert_eq!(any.params.layer_weights, gender.params.layer_weights);
    for r in &any.history {
        assert_eq!(r.train.total, r.train.main);
        assert_eq!(r.dev.total, r.dev.main);
    }
}

#[test]
fn train_loss_goes_down() {
    let fx = fixture(SyntheticSpec::default());
    let ck = fx.train(&TrainConfig { max_epochs: 30, ..quick() });
    let first = ck.history.first().unwrap().train.total;
    let last = ck.history.last().unwrap().train.total;
    assert!(last < first, "{first} -> {last}");
}

#[test]
fn early_epochs_are_non_increasing_for_most_seeds() {
    let mut good = 0;
    for seed in 0..10 {
        let fx = fixture(SyntheticSpec { seed, ..SyntheticSpec::default() });
        let cfg = TrainConfig { seed, max_epochs: 5, patience: 5, ..quick() };
        let ck = fx.train(&cfg);
        let losses: Vec<f64> = ck.history.iter().map(|r| r.train.total).collect();
        if losses.len() == 5 && losses.windows(2).all(|w| w[1] <= w[0]) {
            good += 1;
        }
    }
    assert!(good >= 9, "{good}/10 seeds");
}

#[test]
fn warm_start_rejects_other_backbone_shapes() {
    let fx = fixture(SyntheticSpec::default());
    let ck = fx.train(&TrainConfig { max_epochs: 1, patience: 1, ..quick() });
    let narrow = fixture(SyntheticSpec { dim: 12, ..SyntheticSpec::default() });
    let start = warm_start(&ck, &quick()).unwrap();
    let err = train_with(&quick(), &narrow.set.manifest, &mut narrow.store(), Some(start)).unwrap_err();
    assert!(matches!(err, Error::Incompatible(_)), "{err}");

    let shallow = fixture(SyntheticSpec { layers: 6, ..SyntheticSpec::default() });
    let start = warm_start(&ck, &quick()).unwrap();
    let err = train_with(&quick(), &shallow.set.manifest, &mut shallow.store(), Some(start)).unwrap_err();
    assert!(matches!(err, Error::Incompatible(_)), "{err}");
}

#[test]
fn warm_start_extends_lineage_across_class_sets() {
    let fx = fixture(SyntheticSpec::default());
    let six = TrainConfig { class_set: ClassSet::Six, max_epochs: 2, patience: 2, ..quick() };
    let ck = fx.train(&six);
    assert_eq!(ck.dims().classes, 6);
    let seven = TrainConfig { max_epochs: 2, patience: 2, ..quick() };
    let start = warm_start(&ck, &seven).unwrap();
    let next = train_with(&seven, &fx.set.manifest, &mut fx.store(), Some(start)).unwrap();
    assert_eq!(next.dims().classes, 7);
    assert_eq!(next.lineage.len(), 2);
}

#[test]
fn single_cell_grid_matches_plain_training() {
    let fx = fixture(SyntheticSpec::default());
    let base = quick();
    let grid = Grid::parse("0.8;0.6;2").unwrap();
    let outcome = grid_search(&base, &fx.set.manifest, &fx.features, &grid, 2, None, 1 << 28).unwrap();
    assert_eq!(outcome.results.len(), 1);
    let direct = fx.train(&grid.cells()[0].apply(&base));
    assert_eq!(outcome.best.params, direct.params);
    assert_eq!(outcome.best.history, direct.history);
    assert_eq!(outcome.results[0].best_epoch, direct.best_epoch);
}

#[test]
fn grid_is_independent_of_job_count() {
    let fx = fixture(SyntheticSpec::default());
    let base = TrainConfig { max_epochs: 2, patience: 2, ..quick() };
    let grid = Grid::parse("0.5,0.9;0.3,0.7;1,3").unwrap();
    let one = grid_search(&base, &fx.set.manifest, &fx.features, &grid, 1, None, 1 << 28).unwrap();
    let four = grid_search(&base, &fx.set.manifest, &fx.features, &grid, 4, None, 1 << 28).unwrap();
    assert_eq!(one.results, four.results);
    assert_eq!(one.best.params, four.best.params);
    assert!(one.results.windows(2).all(|w| w[0].best_dev_loss <= w[1].best_dev_loss));
}

#[test]
fn missing_features_are_named() {
    let fx = fixture(SyntheticSpec::default());
    let dev: Vec<String> = fx.set.manifest.split(Split::Dev).map(|r| r.clip_id.clone()).collect();
    for id in &dev[..2] {
        std::fs::remove_file(fx.features.join(format!("{id}.dyfh"))).unwrap();
    }
    let err = train(&quick(), &fx.set.manifest, &mut fx.store()).unwrap_err();
    match &err {
        Error::MissingFeatures(ids) => assert_eq!(ids, &dev[..2].to_vec()),
        other => panic!("{other}"),
    }
    let text = err.to_string();
    assert!(text.contains(&dev[0]) && text.contains(&dev[1]), "{text}");
}

#[test]
fn test_split_features_are_not_needed_for_training() {
    let fx = fixture(SyntheticSpec::default());
    for r in fx.set.manifest.split(Split::Test) {
        std::fs::remove_file(fx.features.join(format!("{}.dyfh", r.clip_id))).unwrap();
    }
    fx.train(&TrainConfig { max_epochs: 1, patience: 1, ..quick() });
}
