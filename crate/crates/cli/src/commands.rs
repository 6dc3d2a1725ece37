use std::fmt::Write as _;
use std::path::Path;

use anyhow::{Context, Result};
use dysflux_core::datasets::{
    cooccurrence_stats, label_distribution, load_manifest_with, merge, save_manifest,
    validate_speaker_exclusivity, LoadOptions,
};
use dysflux_core::features::missing_features;
use dysflux_core::fsutil::write_atomic;
use dysflux_core::gradcheck::{run_suite, SuiteSpec};
use dysflux_core::synthetic::{generate, SyntheticSpec};
use dysflux_core::training::{
    grid_search, load_checkpoint, save_checkpoint, train_with, warm_start, Checkpoint, Grid,
};
use dysflux_core::{evaluate, Error, FeatureStore, Manifest, Split, TrainConfig, VERSION};

use crate::args::{
    Command, EvaluateArgs, GradcheckArgs, GridArgs, HyperArgs, ManifestArgs, MergeArgs, StatsArgs,
    SynthArgs, TrainArgs, ValidateArgs,
};

/// Outcome of a command that ran to completion.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Status {
    Ok,
    /// A check reported problems.
    Failed,
}

pub fn run(command: Command) -> Result<Status> {
    match command {
        Command::Validate(a) => validate(&a),
        Command::Stats(a) => stats(&a),
        Command::Merge(a) => merge_cmd(&a),
        Command::Train(a) => train_cmd(&a),
        Command::Evaluate(a) => evaluate_cmd(&a),
        Command::GridSearch(a) => grid_cmd(&a),
        Command::Gradcheck(a) => gradcheck(&a),
        Command::Synth(a) => synth(&a),
    }
}

fn load(input: &ManifestArgs) -> Result<Manifest> {
    let options = LoadOptions {
        threshold: input.min_annotators,
    };
    load_manifest_with(&input.manifest, options)
        .with_context(|| format!("loading {}", input.manifest.display()))
}

fn meta(out: &mut String, pairs: &[(&str, String)]) {
    let _ = writeln!(out, "# toolkit_version: {VERSION}");
    for (k, v) in pairs {
        let _ = writeln!(out, "# {k}: {v}");
    }
}

/// Prints `report` and, when `out` is given, writes it there atomically.
fn emit(report: &str, out: Option<&Path>) -> Result<()> {
    print!("{report}");
    if let Some(path) = out {
        write_atomic(path, report.as_bytes())?;
        log::info!("wrote {}", path.display());
    }
    Ok(())
}

fn log_config(config: &TrainConfig) -> Result<()> {
    log::info!("resolved config: {}", serde_json::to_string(config)?);
    Ok(())
}

fn validate(args: &ValidateArgs) -> Result<Status> {
    log::info!(
        "validate: manifest={} min_annotators={} features_dir={:?}",
        args.input.manifest.display(),
        args.input.min_annotators,
        args.features_dir
    );
    let mut report = String::new();
    let manifest = match load(&args.input) {
        Ok(m) => m,
        Err(e) => match e.downcast_ref::<Error>() {
            Some(Error::Validation(issues)) => {
                meta(&mut report, &[("manifest", args.input.manifest.display().to_string())]);
                let _ = writeln!(report, "invariants: FAIL");
                for issue in issues {
                    let _ = writeln!(report, "  {issue}");
                }
                emit(&report, args.out.as_deref())?;
                return Ok(Status::Failed);
            }
            _ => return Err(e),
        },
    };
    meta(
        &mut report,
        &[
            ("manifest", manifest.name.clone()),
            ("binarization_rule", manifest.binarization_rule()),
        ],
    );
    let counts: Vec<String> = Split::ALL
        .iter()
        .map(|&s| format!("{s} {}", manifest.split(s).count()))
        .collect();
    let _ = writeln!(
        report,
        "records: {} ({}), class set {}",
        manifest.len(),
        counts.join(", "),
        manifest.class_set.as_str()
    );
    let _ = writeln!(report, "invariants: PASS");
    let speakers = validate_speaker_exclusivity(&manifest);
    let _ = writeln!(report, "{}", speakers.to_string().trim_end());
    let mut ok = speakers.passed();
    if let Some(dir) = &args.features_dir {
        let missing = missing_features(dir, manifest.records.iter().map(|r| r.clip_id.as_str()));
        if missing.is_empty() {
            let _ = writeln!(report, "features: PASS");
        } else {
            ok = false;
            let _ = writeln!(report, "features: FAIL ({} missing)", missing.len());
            for id in missing {
                let _ = writeln!(report, "  {id}");
            }
        }
    }
    emit(&report, args.out.as_deref())?;
    Ok(if ok { Status::Ok } else { Status::Failed })
}

fn stats(args: &StatsArgs) -> Result<Status> {
    log::info!(
        "stats: manifest={} split={:?} min_annotators={}",
        args.input.manifest.display(),
        args.split,
        args.input.min_annotators
    );
    let manifest = load(&args.input)?;
    let dist = label_distribution(&manifest, args.split);
    let mut report = String::new();
    meta(
        &mut report,
        &[
            ("manifest", manifest.name.clone()),
            ("split", args.split.map_or("all".to_string(), |s| s.to_string())),
            ("binarization_rule", manifest.binarization_rule()),
        ],
    );
    report.push_str("class\tpercent\tpositives\n");
    for (&class, &n) in manifest.class_set.classes().iter().zip(&dist.positives) {
        let pct = dist.percent(class).map_or("-".to_string(), |p| format!("{p:.1}"));
        let _ = writeln!(report, "{}\t{pct}\t{n}", class.name());
    }
    let _ = writeln!(report, "total\t-\t{}", dist.total);
    let scope = match args.split {
        None => manifest.clone(),
        Some(s) => {
            let mut m = manifest.clone();
            m.records.retain(|r| r.split == s);
            m
        }
    };
    let co = cooccurrence_stats(&scope);
    let _ = writeln!(
        report,
        "co-occurrence\t{:.1}\t{}",
        100.0 * co.fraction(),
        co.multi_label
    );
    emit(&report, args.out.as_deref())?;
    Ok(Status::Ok)
}

fn merge_cmd(args: &MergeArgs) -> Result<Status> {
    log::info!(
        "merge: name={} inputs={:?} min_annotators={} out={}",
        args.name,
        args.manifests,
        args.min_annotators,
        args.out.display()
    );
    let manifests = args
        .manifests
        .iter()
        .map(|path| {
            load(&ManifestArgs {
                manifest: path.clone(),
                min_annotators: args.min_annotators,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let refs: Vec<&Manifest> = manifests.iter().collect();
    let merged = merge(&refs, args.name.clone())?;
    save_manifest(&merged, &args.out)?;
    println!(
        "{}: {} records from {} manifests, class set {} -> {}",
        merged.name,
        merged.len(),
        refs.len(),
        merged.class_set.as_str(),
        args.out.display()
    );
    Ok(Status::Ok)
}

fn resolve(hyper: &HyperArgs, manifest: &Manifest) -> Result<(TrainConfig, Option<Checkpoint>)> {
    let config = hyper.resolve(manifest.class_set);
    log_config(&config)?;
    config.validate()?;
    let warm = match &hyper.warm_start {
        Some(dir) => {
            log::info!("warm start from {}", dir.display());
            Some(load_checkpoint(dir).with_context(|| format!("loading {}", dir.display()))?)
        }
        None => None,
    };
    Ok((config, warm))
}

fn train_cmd(args: &TrainArgs) -> Result<Status> {
    let manifest = load(&args.input)?;
    let (config, warm) = resolve(&args.hyper, &manifest)?;
    let start = warm.as_ref().map(|ck| warm_start(ck, &config)).transpose()?;
    let mut store = FeatureStore::new(&args.features_dir, FeatureStore::DEFAULT_BUDGET);
    let ck = train_with(&config, &manifest, &mut store, start)?;
    save_checkpoint(&ck, &args.out)?;
    let best = ck.best_record().context("empty training history")?;
    println!(
        "best epoch {} of {}: dev loss {:.6} (main {:.6}, aux {:.6}) -> {}",
        ck.best_epoch,
        ck.history.len(),
        best.dev.total,
        best.dev.main,
        best.dev.aux,
        args.out.display()
    );
    Ok(Status::Ok)
}

fn evaluate_cmd(args: &EvaluateArgs) -> Result<Status> {
    log::info!(
        "evaluate: manifest={} checkpoint={} split={} threshold={} min_annotators={}",
        args.input.manifest.display(),
        args.checkpoint.display(),
        args.split,
        args.threshold,
        args.input.min_annotators
    );
    let manifest = load(&args.input)?;
    let ck = load_checkpoint(&args.checkpoint)
        .with_context(|| format!("loading {}", args.checkpoint.display()))?;
    let mut store = FeatureStore::new(&args.features_dir, FeatureStore::DEFAULT_BUDGET);
    let report = evaluate(&ck, &manifest, args.split, args.threshold, &mut store)?;
    let tsv = report.to_tsv();
    print!("{tsv}");
    if let Some(path) = &args.out {
        let body = if path.extension().is_some_and(|e| e == "json") {
            report.to_json()?
        } else {
            tsv
        };
        write_atomic(path, body.as_bytes())?;
        log::info!("wrote {}", path.display());
    }
    Ok(Status::Ok)
}

fn grid_cmd(args: &GridArgs) -> Result<Status> {
    let manifest = load(&args.input)?;
    let (base, warm) = resolve(&args.hyper, &manifest)?;
    let grid = match &args.grid {
        Some(s) => Grid::parse(s)?,
        None => Grid::standard(),
    };
    log::info!("grid: {} cells, {} jobs: {}", grid.len(), args.jobs, serde_json::to_string(&grid)?);
    let outcome = grid_search(
        &base,
        &manifest,
        &args.features_dir,
        &grid,
        args.jobs,
        warm.as_ref(),
        FeatureStore::DEFAULT_BUDGET,
    )?;
    std::fs::create_dir_all(&args.out).with_context(|| format!("creating {}", args.out.display()))?;
    let mut report = String::new();
    meta(
        &mut report,
        &[
            ("manifest", manifest.name.clone()),
            ("seed", base.seed.to_string()),
            ("monitor", base.monitor.to_string()),
            ("binarization_rule", manifest.binarization_rule()),
        ],
    );
    report.push_str("rank\tw_main\talpha\tgamma\tbest_epoch\tepochs_run\tbest_dev_loss\n");
    for (i, r) in outcome.results.iter().enumerate() {
        let _ = writeln!(
            report,
            "{}\t{}\t{}\t{}\t{}\t{}\t{:.6}",
            i + 1,
            r.cell.w_main,
            r.cell.alpha,
            r.cell.gamma,
            r.best_epoch,
            r.epochs_run,
            r.best_dev_loss
        );
    }
    let ranking = args.out.join("grid.tsv");
    write_atomic(&ranking, report.as_bytes())?;
    let best_dir = args.out.join("best");
    save_checkpoint(&outcome.best, &best_dir)?;
    let top = &outcome.results[0];
    println!(
        "best of {}: w_main={} alpha={} gamma={} dev loss {:.6} -> {}",
        outcome.results.len(),
        top.cell.w_main,
        top.cell.alpha,
        top.cell.gamma,
        top.best_dev_loss,
        best_dir.display()
    );
    Ok(Status::Ok)
}

fn gradcheck(args: &GradcheckArgs) -> Result<Status> {
    let spec = SuiteSpec {
        seeds: args.seeds,
        ..SuiteSpec::default()
    };
    log::info!("gradcheck: {}", serde_json::to_string(&spec)?);
    let suite = run_suite(&spec)?;
    let mut report = String::new();
    meta(
        &mut report,
        &[
            ("seeds", format!("0..{}", spec.seeds)),
            ("eps", spec.eps.to_string()),
            ("tolerance", spec.tolerance.to_string()),
        ],
    );
    report.push_str("seed\tframes\tclasses\tparams\tmax_rel_error\tworst\n");
    for c in &suite.cases {
        let _ = writeln!(
            report,
            "{}\t{}\t{}\t{}\t{:.3e}\t{}",
            c.seed, c.frames, c.classes, c.coordinates, c.max_rel_error, c.worst
        );
    }
    let verdict = if suite.passed() { "PASS" } else { "FAIL" };
    let _ = writeln!(
        report,
        "gradient check: {verdict} (max rel. error {:.3e} over {} cases)",
        suite.max_rel_error(),
        suite.cases.len()
    );
    emit(&report, args.out.as_deref())?;
    log::info!("gradcheck took {:.2} s", suite.elapsed.as_secs_f64());
    Ok(if suite.passed() { Status::Ok } else { Status::Failed })
}

fn synth(args: &SynthArgs) -> Result<Status> {
    let spec = SyntheticSpec {
        seed: args.seed,
        clips: args.clips,
        ..SyntheticSpec::default()
    };
    log::info!("synth: {}", serde_json::to_string(&spec)?);
    let set = generate(&spec)?;
    set.write(&args.out)?;
    println!("{} clips -> {}", set.manifest.len(), args.out.display());
    Ok(Status::Ok)
}
