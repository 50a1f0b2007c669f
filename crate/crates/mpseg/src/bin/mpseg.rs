//! Command-line front end for the mpseg library.
//!
//! Subcommands cover the whole pipeline: `phantom` (synthetic cohorts),
//! `split` (cross-validation folds), `train` (one fold), `predict`
//! (per-plane probability volumes), `fuse-fit` (learn the fusion map),
//! `evaluate` (Dice tables), `stats` (significance tests), `params`
//! (parameter-count audit), and `run` (the full experiment).
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 data error,
//! 3 numeric failure. Flag values override config-file fields, which
//! override built-in defaults. Every output directory receives a
//! `manifest.json` echoing the resolved invocation, and nothing written
//! under it embeds a timestamp, so reruns are diffable.

use clap::{Args, Parser, Subcommand};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use mpseg::error::{Error, Result};
use mpseg::evalstats::{box_stats, paired_t_test, wilcoxon_test, WilcoxonMode};
use mpseg::fusion::{fit_fusion, FitSubject, FusionFile};
use mpseg::multiplanar::{sample_plane_set_with, PlaneSet};
use mpseg::nn::{load_checkpoint, save_checkpoint};
use mpseg::pipeline::{
    evaluate_subject, load_dataset, load_prob_volumes, load_subject, make_folds,
    make_phantom_cohort, predict_subject, run_experiment_jobs, save_prob_volumes, train_fold,
    DatasetManifest, ExperimentConfig, SubjectData, SubjectStacks,
};
use mpseg::unetzoo::{build, params_csv, ArchSpec, Variant};
use mpseg::volume::PhantomSpec;

#[derive(Parser)]
#[command(
    name = "mpseg",
    about = "Multiplanar volumetric segmentation with 2D UNet-family cores",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic phantom cohort with a dataset manifest.
    Phantom(PhantomArgs),
    /// Split a dataset into seeded cross-validation folds.
    Split(SplitArgs),
    /// Train one fold: plane set, network checkpoint, training log.
    Train(TrainArgs),
    /// Predict per-plane class-probability volumes for subjects.
    Predict(PredictArgs),
    /// Fit the linear fusion map on predicted probability volumes.
    FuseFit(FuseFitArgs),
    /// Score per-plane and fused predictions against ground truth.
    Evaluate(EvaluateArgs),
    /// Pairwise significance tests over a Dice report.
    Stats(StatsArgs),
    /// Audit parameter counts: closed-form formula vs the built graph.
    Params(ParamsArgs),
    /// Run the full cross-validated experiment end to end.
    Run(RunArgs),
}

#[derive(Args)]
struct PhantomArgs {
    /// Output dataset directory.
    #[arg(long)]
    out: PathBuf,
    /// Number of subjects.
    #[arg(long, default_value_t = 20)]
    subjects: usize,
    /// Cubic volume edge length in voxels.
    #[arg(long, default_value_t = 48)]
    shape: usize,
    /// Comma-separated shell radii as fractions of the half-extent.
    #[arg(long, default_value = "0.35,0.65,0.95", value_delimiter = ',')]
    radii: Vec<f64>,
    /// Additive Gaussian intensity noise.
    #[arg(long, default_value_t = 0.08)]
    noise: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct SplitArgs {
    /// Dataset directory containing dataset.json.
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    seed: u64,
    /// Output JSON path; defaults to folds.json inside the dataset.
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Config-file overrides shared by train and run; unset flags leave the
/// file values in place.
#[derive(Args)]
struct ConfigOverrides {
    /// Experiment config JSON.
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    planes: Option<usize>,
    #[arg(long)]
    max_epochs: Option<usize>,
    #[arg(long)]
    patience: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    /// Comma-separated fold indices to run (run subcommand only).
    #[arg(long, value_delimiter = ',')]
    run_folds: Option<Vec<usize>>,
}

impl ConfigOverrides {
    fn resolve(&self) -> Result<ExperimentConfig> {
        let mut cfg = ExperimentConfig::from_file(&self.config)?;
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        if let Some(v) = self.planes {
            cfg.planes = v;
        }
        if let Some(v) = self.max_epochs {
            cfg.max_epochs = v;
        }
        if let Some(v) = self.patience {
            cfg.patience = v;
        }
        if let Some(v) = self.batch_size {
            cfg.batch_size = v;
        }
        if let Some(v) = self.learning_rate {
            cfg.learning_rate = v;
        }
        if let Some(v) = &self.run_folds {
            cfg.run_folds = Some(v.clone());
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    overrides: ConfigOverrides,
    #[arg(long)]
    dataset: PathBuf,
    /// Fold index to train.
    #[arg(long, default_value_t = 0)]
    fold: usize,
    #[arg(long)]
    out: PathBuf,
    /// Print the resolved config and exit without training.
    #[arg(long)]
    dry_run: bool,
}

#[derive(Args)]
struct PredictArgs {
    /// Experiment config JSON (architecture and slicing geometry).
    #[arg(long)]
    config: PathBuf,
    /// Checkpoint manifest written by train.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Plane-set JSON written by train.
    #[arg(long)]
    planes: PathBuf,
    #[arg(long)]
    dataset: PathBuf,
    /// Comma-separated subject ids, or "all".
    #[arg(long, default_value = "all", value_delimiter = ',')]
    subjects: Vec<String>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct FuseFitArgs {
    /// Directory of probability volumes written by predict.
    #[arg(long)]
    probs: PathBuf,
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long, default_value = "all", value_delimiter = ',')]
    subjects: Vec<String>,
    /// Plane-set JSON; its view axes are echoed into the fusion file.
    #[arg(long)]
    planes: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output fusion JSON path.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    probs: PathBuf,
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long, default_value = "all", value_delimiter = ',')]
    subjects: Vec<String>,
    /// Fusion JSON written by fuse-fit.
    #[arg(long)]
    fusion: PathBuf,
    /// Output Dice CSV path.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct StatsArgs {
    /// Dice report CSV (from run or evaluate).
    #[arg(long)]
    report: PathBuf,
    /// Split to test on (subject rows only).
    #[arg(long, default_value = "test")]
    split: String,
    /// Output p-value CSV path.
    #[arg(long)]
    out: PathBuf,
    /// Optional box-statistics CSV path (one row per method).
    #[arg(long)]
    r#box: Option<PathBuf>,
}

#[derive(Args)]
struct ParamsArgs {
    /// Architecture: unet, unet2p, or unet3p.
    #[arg(long)]
    variant: String,
    #[arg(long, default_value_t = 5)]
    levels: usize,
    #[arg(long, default_value_t = 32)]
    base: usize,
    #[arg(long, default_value_t = 2)]
    classes: usize,
    #[arg(long, default_value_t = 1)]
    input_channels: usize,
    /// Scale unet encoder widths by sqrt(2).
    #[arg(long)]
    sqrt2: bool,
    #[arg(long)]
    deep_supervision: bool,
    /// Write the audit CSV here as well as to stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    overrides: ConfigOverrides,
    #[arg(long)]
    dataset: PathBuf,
    /// Parent directory for the seed-named run directory.
    #[arg(long)]
    out: PathBuf,
    /// Train up to this many folds concurrently.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    /// Print the resolved config and exit without running.
    #[arg(long)]
    dry_run: bool,
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn write_manifest<S: serde::Serialize>(dir: &Path, command: &str, resolved: &S) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let body = serde_json::json!({"command": command, "resolved": resolved});
    let text = serde_json::to_string_pretty(&body)
        .map_err(|e| Error::data(format!("serialize manifest: {e}")))?;
    write_text(&dir.join("manifest.json"), &text)
}

fn pick_subjects(manifest: &DatasetManifest, requested: &[String]) -> Result<Vec<String>> {
    if requested.len() == 1 && requested[0] == "all" {
        return Ok(manifest.subject_ids());
    }
    for id in requested {
        manifest.entry(id)?;
    }
    Ok(requested.to_vec())
}

fn cmd_phantom(a: &PhantomArgs) -> Result<()> {
    let spec = PhantomSpec {
        shape: [a.shape; 3],
        spacing: [1.0; 3],
        shell_radii: a.radii.clone(),
        noise_sigma: a.noise,
        seed: 0,
    };
    let manifest = make_phantom_cohort(&a.out, a.subjects, &spec, a.seed)?;
    write_manifest(
        &a.out,
        "phantom",
        &serde_json::json!({"spec": spec, "subjects": a.subjects, "seed": a.seed}),
    )?;
    println!(
        "wrote {} subjects ({} classes) to {}",
        manifest.subjects.len(),
        manifest.classes,
        a.out.display()
    );
    Ok(())
}

fn cmd_split(a: &SplitArgs) -> Result<()> {
    let manifest = load_dataset(&a.dataset)?;
    let split = make_folds(&manifest.subject_ids(), a.seed)?;
    let out = a
        .out
        .clone()
        .unwrap_or_else(|| a.dataset.join("folds.json"));
    let text = serde_json::to_string_pretty(&split)
        .map_err(|e| Error::data(format!("serialize folds: {e}")))?;
    write_text(&out, &text)?;
    for (i, f) in split.folds.iter().enumerate() {
        println!(
            "fold {i}: {} train / {} val / {} test",
            f.train.len(),
            f.val.len(),
            f.test.len()
        );
    }
    println!("wrote {}", out.display());
    Ok(())
}

fn prepare_subjects(
    dataset: &Path,
    manifest: &DatasetManifest,
    ids: &[String],
) -> Result<Vec<SubjectData>> {
    ids.iter()
        .map(|id| {
            let (img, lbl) = load_subject(dataset, manifest.entry(id)?)?;
            SubjectData::prepare(id, &img, &lbl)
        })
        .collect()
}

fn extract_stacks(
    subjects: &[SubjectData],
    ps: &PlaneSet,
    cfg: &ExperimentConfig,
) -> Result<Vec<SubjectStacks>> {
    subjects
        .iter()
        .map(|s| SubjectStacks::extract(s, ps, cfg.target_size, cfg.grid_spacing))
        .collect()
}

fn cmd_train(a: &TrainArgs) -> Result<()> {
    let cfg = a.overrides.resolve()?;
    if a.dry_run {
        println!("{}", serde_json::to_string_pretty(&cfg).unwrap());
        return Ok(());
    }
    if a.fold >= cfg.folds {
        return Err(Error::config(format!(
            "fold {} outside 0..{}",
            a.fold, cfg.folds
        )));
    }
    let manifest = load_dataset(&a.dataset)?;
    let split = make_folds(&manifest.subject_ids(), cfg.seed)?;
    let ids = &split.folds[a.fold];
    let ps = sample_plane_set_with(cfg.planes, cfg.plane_seed(a.fold), cfg.min_angle_deg)?;
    let train = extract_stacks(&prepare_subjects(&a.dataset, &manifest, &ids.train)?, &ps, &cfg)?;
    let val = extract_stacks(&prepare_subjects(&a.dataset, &manifest, &ids.val)?, &ps, &cfg)?;
    let (graph, log) = train_fold::<f32>(&cfg, &train, &val, cfg.net_seed(a.fold))?;

    write_manifest(
        &a.out,
        "train",
        &serde_json::json!({"config": cfg, "fold": a.fold, "dataset": a.dataset}),
    )?;
    ps.save(&a.out.join("planes.json"))?;
    save_checkpoint(&graph, &a.out.join("model.ckpt.json"))?;
    write_text(&a.out.join("train_log.csv"), &log.to_csv())?;
    println!(
        "fold {}: best epoch {} (val dice {:.4}), artifacts in {}",
        a.fold,
        log.best_epoch,
        log.best_val_dice,
        a.out.display()
    );
    Ok(())
}

fn cmd_predict(a: &PredictArgs) -> Result<()> {
    let cfg = ExperimentConfig::from_file(&a.config)?;
    let ps = PlaneSet::load(&a.planes)?;
    let mut graph = build::<f32>(&cfg.arch, 0)?;
    load_checkpoint(&mut graph, &a.checkpoint)?;
    let manifest = load_dataset(&a.dataset)?;
    let ids = pick_subjects(&manifest, &a.subjects)?;
    write_manifest(
        &a.out,
        "predict",
        &serde_json::json!({
            "config": cfg, "checkpoint": a.checkpoint, "planes": a.planes,
            "dataset": a.dataset, "subjects": ids
        }),
    )?;
    for id in &ids {
        let (img, lbl) = load_subject(&a.dataset, manifest.entry(id)?)?;
        let s = SubjectData::prepare(id, &img, &lbl)?;
        let probs = predict_subject(
            &mut graph,
            &s.intensity,
            &ps,
            cfg.target_size,
            cfg.grid_spacing,
            cfg.batch_size,
        )?;
        save_prob_volumes(&a.out, id, &probs, &img)?;
        println!("predicted {id} ({} planes)", probs.len());
    }
    Ok(())
}

fn cmd_fuse_fit(a: &FuseFitArgs) -> Result<()> {
    let manifest = load_dataset(&a.dataset)?;
    let ids = pick_subjects(&manifest, &a.subjects)?;
    let ps = PlaneSet::load(&a.planes)?;
    let mut probs = Vec::with_capacity(ids.len());
    let mut truths = Vec::with_capacity(ids.len());
    for id in &ids {
        probs.push(load_prob_volumes(&a.probs, id)?);
        let (_, lbl) = load_subject(&a.dataset, manifest.entry(id)?)?;
        truths.push(lbl);
    }
    let subjects: Vec<FitSubject<'_>> = ids
        .iter()
        .enumerate()
        .map(|(i, _)| {
            Ok(FitSubject {
                probs: probs[i].iter().collect(),
                truth: truths[i].labels()?,
            })
        })
        .collect::<Result<_>>()?;
    let fit = fit_fusion(&subjects, a.seed)?;
    let views: Vec<[f64; 3]> = ps.views.iter().map(|v| v.view).collect();
    FusionFile::new(views, &fit.params).save(&a.out)?;
    println!(
        "fit on {} voxels: ce {:.6} -> {:.6} in {} steps; wrote {}",
        fit.n_samples,
        fit.initial_ce,
        fit.final_ce,
        fit.accepted_steps,
        a.out.display()
    );
    Ok(())
}

fn cmd_evaluate(a: &EvaluateArgs) -> Result<()> {
    let manifest = load_dataset(&a.dataset)?;
    let ids = pick_subjects(&manifest, &a.subjects)?;
    let fusion = FusionFile::load(&a.fusion)?;
    let fp = fusion.params();
    let mut csv = String::from("scope,fold,split,source,subject,class,dice\n");
    for id in &ids {
        let probs = load_prob_volumes(&a.probs, id)?;
        let (_, lbl) = load_subject(&a.dataset, manifest.entry(id)?)?;
        let eval = evaluate_subject(id, &probs, &lbl, &fp)?;
        for (v, scores) in eval.per_plane.iter().enumerate() {
            for (c, d) in scores.iter().enumerate() {
                csv.push_str(&format!("subject,,eval,plane{v},{id},{c},{d}\n"));
            }
        }
        for (c, d) in eval.fused.iter().enumerate() {
            csv.push_str(&format!("subject,,eval,fused,{id},{c},{d}\n"));
        }
    }
    write_text(&a.out, &csv)?;
    println!("wrote {}", a.out.display());
    Ok(())
}

/// Subject-level Dice rows from a report CSV, keyed by method (source
/// column), then by (subject, class) pair.
fn read_score_table(
    path: &Path,
    split: &str,
) -> Result<BTreeMap<String, BTreeMap<(String, String), f64>>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::data(format!("{} is empty", path.display())))?;
    let cols: Vec<&str> = header.split(',').collect();
    let idx = |name: &str| {
        cols.iter()
            .position(|c| *c == name)
            .ok_or_else(|| Error::data(format!("report is missing a {name:?} column")))
    };
    let (i_scope, i_split, i_source) = (idx("scope")?, idx("split")?, idx("source")?);
    let (i_subject, i_class, i_dice) = (idx("subject")?, idx("class")?, idx("dice")?);
    let mut table: BTreeMap<String, BTreeMap<(String, String), f64>> = BTreeMap::new();
    for (ln, line) in lines.enumerate() {
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != cols.len() {
            return Err(Error::data(format!("row {} has {} fields", ln + 2, f.len())));
        }
        if f[i_scope] != "subject" || f[i_split] != split || f[i_class] == "mean_fg" {
            continue;
        }
        let dice: f64 = f[i_dice]
            .parse()
            .map_err(|e| Error::data(format!("row {}: bad dice value: {e}", ln + 2)))?;
        table
            .entry(f[i_source].to_string())
            .or_default()
            .insert((f[i_subject].to_string(), f[i_class].to_string()), dice);
    }
    if table.is_empty() {
        return Err(Error::data(format!(
            "no subject rows for split {split:?} in {}",
            path.display()
        )));
    }
    Ok(table)
}

fn cmd_stats(a: &StatsArgs) -> Result<()> {
    let table = read_score_table(&a.report, &a.split)?;
    let methods: Vec<&String> = table.keys().collect();
    let mut csv = String::from("test,unit,method_a,method_b,n,statistic,p_value,exact\n");
    for (i, ma) in methods.iter().enumerate() {
        for mb in methods.iter().skip(i + 1) {
            let sa = &table[*ma];
            let sb = &table[*mb];
            let keys: Vec<_> = sa.keys().filter(|k| sb.contains_key(*k)).cloned().collect();
            if keys.len() < 2 {
                return Err(Error::data(format!(
                    "methods {ma} and {mb} share too few scored (subject, class) pairs"
                )));
            }
            let xa: Vec<f64> = keys.iter().map(|k| sa[k]).collect();
            let xb: Vec<f64> = keys.iter().map(|k| sb[k]).collect();
            let rows = [
                ("paired_t", paired_t_test(&xa, &xb)?),
                ("rank_sum", wilcoxon_test(&xa, &xb, WilcoxonMode::RankSum)?),
                ("signed_rank", wilcoxon_test(&xa, &xb, WilcoxonMode::SignedRank)?),
            ];
            for (name, r) in rows {
                csv.push_str(&format!(
                    "{name},subject-class,{ma},{mb},{},{},{},{}\n",
                    keys.len(),
                    r.statistic,
                    r.p_value,
                    r.exact
                ));
            }
        }
    }
    write_text(&a.out, &csv)?;
    println!("wrote {}", a.out.display());
    if let Some(box_path) = &a.r#box {
        let mut csv = String::from("method,n,min,p25,median,p75,max,mean,iqr,n_outliers\n");
        for (m, scores) in &table {
            let xs: Vec<f64> = scores.values().copied().collect();
            let b = box_stats(&xs)?;
            csv.push_str(&format!(
                "{m},{},{},{},{},{},{},{},{},{}\n",
                xs.len(),
                b.min,
                b.p25,
                b.median,
                b.p75,
                b.max,
                b.mean,
                b.iqr,
                b.outliers.len()
            ));
        }
        write_text(box_path, &csv)?;
        println!("wrote {}", box_path.display());
    }
    Ok(())
}

fn cmd_params(a: &ParamsArgs) -> Result<()> {
    let variant: Variant = a.variant.parse()?;
    let spec = ArchSpec {
        variant,
        levels: a.levels,
        base_channels: a.base,
        deep_supervision: a.deep_supervision,
        input_channels: a.input_channels,
        num_classes: a.classes,
        unet_sqrt2_scale: a.sqrt2,
    };
    let csv = params_csv(&spec)?;
    print!("{csv}");
    if let Some(out) = &a.out {
        write_text(out, &csv)?;
    }
    // any nonzero delta between the closed form and the graph is a failure
    let mismatches = csv
        .lines()
        .skip(1)
        .filter(|l| {
            let f: Vec<&str> = l.split(',').collect();
            f.len() == 6 && f[4] != "0" && !f[2].is_empty()
        })
        .count();
    if mismatches > 0 {
        return Err(Error::numeric(format!(
            "{mismatches} decoder stages disagree with the closed-form count"
        )));
    }
    Ok(())
}

fn cmd_run(a: &RunArgs) -> Result<()> {
    let cfg = a.overrides.resolve()?;
    if a.dry_run {
        println!("{}", serde_json::to_string_pretty(&cfg).unwrap());
        return Ok(());
    }
    let (report, run_dir) = run_experiment_jobs(&cfg, &a.dataset, &a.out, a.jobs)?;
    write_manifest(
        &run_dir,
        "run",
        &serde_json::json!({"config": cfg, "dataset": a.dataset, "jobs": a.jobs}),
    )?;
    for f in &report.folds {
        println!(
            "fold {}: fused val {:.4} (best plane {:.4}), fused test {:.4}",
            f.fold, f.fused_val_mean_fg, f.max_plane_val_mean_fg, f.fused_test_mean_fg
        );
    }
    println!(
        "aggregate fused test mean foreground dice {:.4}; artifacts in {}",
        report.aggregate.fused_test_mean_fg,
        run_dir.display()
    );
    Ok(())
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // --help and --version are successes; anything else is usage
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            std::process::exit(code);
        }
    };
    let result = match &cli.command {
        Command::Phantom(a) => cmd_phantom(a),
        Command::Split(a) => cmd_split(a),
        Command::Train(a) => cmd_train(a),
        Command::Predict(a) => cmd_predict(a),
        Command::FuseFit(a) => cmd_fuse_fit(a),
        Command::Evaluate(a) => cmd_evaluate(a),
        Command::Stats(a) => cmd_stats(a),
        Command::Params(a) => cmd_params(a),
        Command::Run(a) => cmd_run(a),
    };
    if let Err(e) = result {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}
