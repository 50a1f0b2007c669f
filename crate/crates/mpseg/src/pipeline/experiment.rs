//! End-to-end experiments: configuration, the per-fold pipeline
//! (train, fit fusion on validation, evaluate on test), and report files.
//!
//! Every run writes into a timestamp-free directory named after the
//! architecture, plane count, and seed, so identical configurations
//! produce byte-identical artifacts: report.csv, report.json, folds.json,
//! and per-fold planes.json, model.ckpt.json/.bin, fusion.json,
//! train_log.csv. Wall-clock numbers go to timing.txt only, keeping the
//! reports deterministic.

use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use crate::augment::ElasticParams;
use crate::error::{Error, Result};
use crate::fusion::{fit_fusion, FitSubject, FusionFile};
use crate::multiplanar::{sample_plane_set_with, PlaneSet};
use crate::nn::save_checkpoint;
use crate::unetzoo::{build_with_init, count_params, ArchSpec};
use crate::volume::Volume;

use super::dataset::{load_dataset, load_subject, DatasetManifest};
use super::folds::{make_folds, FoldIds, N_FOLDS};
use super::train::{
    evaluate_subject, predict_subject, train_fold, SubjectData, SubjectEval, SubjectStacks,
};

fn d_planes() -> usize {
    3
}
fn d_min_angle() -> f64 {
    crate::multiplanar::DEFAULT_MIN_ANGLE_DEG
}
fn d_folds() -> usize {
    N_FOLDS
}
fn d_max_epochs() -> usize {
    500
}
fn d_patience() -> usize {
    15
}
fn d_train_ipe() -> usize {
    2500
}
fn d_val_ipe() -> usize {
    3500
}
fn d_batch() -> usize {
    16
}
fn d_budget() -> u64 {
    2 * 1024 * 1024 * 1024
}
fn d_lr() -> f64 {
    5e-5
}
fn d_l2() -> f64 {
    1e-5
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub arch: ArchSpec,
    /// Number of view planes (1, 3, or 6).
    #[serde(default = "d_planes")]
    pub planes: usize,
    #[serde(default = "d_min_angle")]
    pub min_angle_deg: f64,
    #[serde(default = "d_folds")]
    pub folds: usize,
    #[serde(default = "d_max_epochs")]
    pub max_epochs: usize,
    #[serde(default = "d_patience")]
    pub patience: usize,
    #[serde(default = "d_train_ipe")]
    pub train_images_per_epoch: usize,
    #[serde(default = "d_val_ipe")]
    pub val_images_per_epoch: usize,
    /// Starting batch size; halved down to 4 until a step fits the budget.
    #[serde(default = "d_batch")]
    pub batch_size: usize,
    #[serde(default = "d_budget")]
    pub memory_budget_bytes: u64,
    #[serde(default = "d_lr")]
    pub learning_rate: f64,
    #[serde(default = "d_l2")]
    pub l2: f64,
    #[serde(default)]
    pub augmentation: ElasticParams,
    /// Fixed slice size; required when subjects differ in extent.
    #[serde(default)]
    pub target_size: Option<(usize, usize)>,
    /// Isotropic slice grid spacing; defaults to the finest voxel spacing.
    #[serde(default)]
    pub grid_spacing: Option<f64>,
    /// Subset of folds to run; all five when absent.
    #[serde(default)]
    pub run_folds: Option<Vec<usize>>,
    pub seed: u64,
}

impl ExperimentConfig {
    pub fn defaults(arch: ArchSpec, seed: u64) -> ExperimentConfig {
        ExperimentConfig {
            arch,
            planes: d_planes(),
            min_angle_deg: d_min_angle(),
            folds: d_folds(),
            max_epochs: d_max_epochs(),
            patience: d_patience(),
            train_images_per_epoch: d_train_ipe(),
            val_images_per_epoch: d_val_ipe(),
            batch_size: d_batch(),
            memory_budget_bytes: d_budget(),
            learning_rate: d_lr(),
            l2: d_l2(),
            augmentation: ElasticParams::default(),
            target_size: None,
            grid_spacing: None,
            run_folds: None,
            seed,
        }
    }

    pub fn from_file(path: &Path) -> Result<ExperimentConfig> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: ExperimentConfig = serde_json::from_str(&text)
            .map_err(|e| Error::config(format!("parse {}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.arch.validate()?;
        if ![1, 3, 6].contains(&self.planes) {
            return Err(Error::config(format!(
                "plane count must be 1, 3, or 6, got {}",
                self.planes
            )));
        }
        if self.folds != N_FOLDS {
            return Err(Error::config(format!(
                "cross-validation uses exactly {N_FOLDS} folds, got {}",
                self.folds
            )));
        }
        if self.max_epochs == 0 {
            return Err(Error::config("max_epochs must be at least 1"));
        }
        if self.patience == 0 || self.patience >= self.max_epochs.max(2) {
            return Err(Error::config(format!(
                "patience must satisfy 1 <= patience < max_epochs, got {} vs {}",
                self.patience, self.max_epochs
            )));
        }
        if !(4..=16).contains(&self.batch_size) {
            return Err(Error::config(format!(
                "batch size must lie in [4, 16], got {}",
                self.batch_size
            )));
        }
        if self.train_images_per_epoch == 0 || self.val_images_per_epoch == 0 {
            return Err(Error::config("images per epoch must be positive"));
        }
        if !(self.learning_rate >= 0.0) || !(self.l2 >= 0.0) {
            return Err(Error::config(
                "learning rate and l2 must be finite and non-negative",
            ));
        }
        if !(0.0..=90.0).contains(&self.min_angle_deg) {
            return Err(Error::config(format!(
                "minimum plane angle must lie in [0, 90], got {}",
                self.min_angle_deg
            )));
        }
        if self.memory_budget_bytes == 0 {
            return Err(Error::config("memory budget must be positive"));
        }
        self.augmentation.validate()?;
        if let Some(fs) = &self.run_folds {
            if fs.is_empty() {
                return Err(Error::config("run_folds must not be empty when set"));
            }
            if let Some(&bad) = fs.iter().find(|&&f| f >= self.folds) {
                return Err(Error::config(format!(
                    "run_folds entry {bad} outside 0..{}",
                    self.folds
                )));
            }
        }
        Ok(())
    }

    pub fn run_dir_name(&self) -> String {
        format!(
            "run-{}-k{}-seed{}",
            self.arch.variant.as_str(),
            self.planes,
            self.seed
        )
    }

    /// Seeds for the independent random streams of one fold.
    pub fn plane_seed(&self, fold: usize) -> u64 {
        self.seed.wrapping_add(fold as u64)
    }
    pub fn net_seed(&self, fold: usize) -> u64 {
        self.seed.wrapping_add(7919 * (fold as u64 + 1))
    }
    pub fn fusion_seed(&self, fold: usize) -> u64 {
        self.seed.wrapping_add(104_729 * (fold as u64 + 1))
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct FoldReport {
    pub fold: usize,
    pub planes: Vec<[f64; 3]>,
    pub batch_size: usize,
    pub best_epoch: usize,
    pub best_val_dice: f64,
    pub stopped_early: bool,
    pub fusion_initial_ce: f64,
    pub fusion_final_ce: f64,
    pub fusion_steps: usize,
    pub val: Vec<SubjectEval>,
    pub test: Vec<SubjectEval>,
    /// Mean over test subjects of the fused foreground-mean Dice.
    pub fused_test_mean_fg: f64,
    pub fused_val_mean_fg: f64,
    /// Best single plane on validation, for the fusion-dominance check.
    pub max_plane_val_mean_fg: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct AggregateReport {
    /// Per-class fused test Dice averaged over subjects then folds;
    /// index = class id.
    pub fused_test_per_class: Vec<f64>,
    pub fused_test_mean_fg: f64,
    pub fused_val_mean_fg: f64,
    pub max_plane_val_mean_fg: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct ExperimentReport {
    pub config: ExperimentConfig,
    pub param_count: u64,
    pub folds: Vec<FoldReport>,
    pub aggregate: AggregateReport,
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (mut s, mut n) = (0.0, 0usize);
    for x in xs {
        s += x;
        n += 1;
    }
    if n == 0 {
        f64::NAN
    } else {
        s / n as f64
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn prepare(
    dir: &Path,
    manifest: &DatasetManifest,
    ids: &[String],
) -> Result<Vec<SubjectData>> {
    ids.iter()
        .map(|id| {
            let entry = manifest.entry(id)?;
            let (img, lbl) = load_subject(dir, entry)?;
            SubjectData::prepare(id, &img, &lbl)
        })
        .collect()
}

fn extract_all(
    subjects: &[SubjectData],
    ps: &PlaneSet,
    cfg: &ExperimentConfig,
) -> Result<Vec<SubjectStacks>> {
    subjects
        .iter()
        .map(|s| SubjectStacks::extract(s, ps, cfg.target_size, cfg.grid_spacing))
        .collect()
}

struct FoldOutcome {
    report: FoldReport,
    timings: Vec<(String, f64)>,
}

fn run_fold(
    cfg: &ExperimentConfig,
    dataset_dir: &Path,
    manifest: &DatasetManifest,
    fold: usize,
    ids: &FoldIds,
    fold_dir: &Path,
) -> Result<FoldOutcome> {
    std::fs::create_dir_all(fold_dir).map_err(|e| Error::io(fold_dir, e))?;
    let mut timings = Vec::new();
    let clock = Instant::now();

    let ps = sample_plane_set_with(cfg.planes, cfg.plane_seed(fold), cfg.min_angle_deg)?;
    ps.save(&fold_dir.join("planes.json"))?;

    let train_subjects = prepare(dataset_dir, manifest, &ids.train)?;
    let val_subjects = prepare(dataset_dir, manifest, &ids.val)?;
    let test_subjects = prepare(dataset_dir, manifest, &ids.test)?;
    let train_stacks = extract_all(&train_subjects, &ps, cfg)?;
    let val_stacks = extract_all(&val_subjects, &ps, cfg)?;
    timings.push(("prepare_seconds".into(), clock.elapsed().as_secs_f64()));

    let t_train = Instant::now();
    let (mut graph, log) = train_fold::<f32>(cfg, &train_stacks, &val_stacks, cfg.net_seed(fold))?;
    timings.push(("train_seconds".into(), t_train.elapsed().as_secs_f64()));
    write_text(&fold_dir.join("train_log.csv"), &log.to_csv())?;
    save_checkpoint(&graph, &fold_dir.join("model.ckpt.json"))?;

    // per-plane prediction: validation first (fusion fit), then test
    let t_pred = Instant::now();
    let predict = |g: &mut crate::nn::NetworkGraph<f32>, s: &SubjectData| {
        predict_subject(
            g,
            &s.intensity,
            &ps,
            cfg.target_size,
            cfg.grid_spacing,
            log.batch_size,
        )
    };
    let mut val_probs = Vec::with_capacity(val_subjects.len());
    for s in &val_subjects {
        val_probs.push(predict(&mut graph, s)?);
    }
    let fit_subjects: Vec<FitSubject<'_>> = val_subjects
        .iter()
        .zip(&val_probs)
        .map(|(s, probs)| {
            Ok(FitSubject {
                probs: probs.iter().collect(),
                truth: s.labels.labels()?,
            })
        })
        .collect::<Result<_>>()?;
    let fit = fit_fusion(&fit_subjects, cfg.fusion_seed(fold))?;
    let views: Vec<[f64; 3]> = ps.views.iter().map(|v| v.view).collect();
    FusionFile::new(views.clone(), &fit.params).save(&fold_dir.join("fusion.json"))?;

    let eval_set = |subjects: &[SubjectData],
                    probs: &[Vec<ndarray::Array4<f32>>]|
     -> Result<Vec<SubjectEval>> {
        subjects
            .iter()
            .zip(probs)
            .map(|(s, p)| evaluate_subject(&s.id, p, &s.labels, &fit.params))
            .collect()
    };
    let val_eval = eval_set(&val_subjects, &val_probs)?;
    drop(val_probs);
    let mut test_probs = Vec::with_capacity(test_subjects.len());
    for s in &test_subjects {
        test_probs.push(predict(&mut graph, s)?);
    }
    let test_eval = eval_set(&test_subjects, &test_probs)?;
    timings.push(("predict_seconds".into(), t_pred.elapsed().as_secs_f64()));

    let fused_test_mean_fg = mean(test_eval.iter().map(|e| SubjectEval::mean_fg(&e.fused)));
    let fused_val_mean_fg = mean(val_eval.iter().map(|e| SubjectEval::mean_fg(&e.fused)));
    let max_plane_val_mean_fg = (0..cfg.planes)
        .map(|v| mean(val_eval.iter().map(|e| SubjectEval::mean_fg(&e.per_plane[v]))))
        .fold(f64::NEG_INFINITY, f64::max);

    Ok(FoldOutcome {
        report: FoldReport {
            fold,
            planes: views,
            batch_size: log.batch_size,
            best_epoch: log.best_epoch,
            best_val_dice: log.best_val_dice,
            stopped_early: log.stopped_early,
            fusion_initial_ce: fit.initial_ce,
            fusion_final_ce: fit.final_ce,
            fusion_steps: fit.accepted_steps,
            val: val_eval,
            test: test_eval,
            fused_test_mean_fg,
            fused_val_mean_fg,
            max_plane_val_mean_fg,
        },
        timings,
    })
}

fn report_csv(report: &ExperimentReport) -> String {
    let mut out = String::from("scope,fold,split,source,subject,class,dice\n");
    let classes = report.config.arch.num_classes;
    let mut push = |scope: &str, fold: &str, split: &str, source: &str, subject: &str, class: &str, dice: f64| {
        out.push_str(&format!(
            "{scope},{fold},{split},{source},{subject},{class},{dice}\n"
        ));
    };
    for f in &report.folds {
        for (split, evals) in [("val", &f.val), ("test", &f.test)] {
            // subject rows
            for e in evals {
                for (v, scores) in e.per_plane.iter().enumerate() {
                    for (c, &d) in scores.iter().enumerate() {
                        push("subject", &f.fold.to_string(), split, &format!("plane{v}"), &e.id, &c.to_string(), d);
                    }
                    push("subject", &f.fold.to_string(), split, &format!("plane{v}"), &e.id, "mean_fg", SubjectEval::mean_fg(scores));
                }
                for (c, &d) in e.fused.iter().enumerate() {
                    push("subject", &f.fold.to_string(), split, "fused", &e.id, &c.to_string(), d);
                }
                push("subject", &f.fold.to_string(), split, "fused", &e.id, "mean_fg", SubjectEval::mean_fg(&e.fused));
            }
            // per-fold means over subjects
            for v in 0..report.config.planes {
                for c in 0..classes {
                    let m = mean(evals.iter().map(|e| e.per_plane[v][c]));
                    push("fold", &f.fold.to_string(), split, &format!("plane{v}"), "", &c.to_string(), m);
                }
                let m = mean(evals.iter().map(|e| SubjectEval::mean_fg(&e.per_plane[v])));
                push("fold", &f.fold.to_string(), split, &format!("plane{v}"), "", "mean_fg", m);
            }
            for c in 0..classes {
                let m = mean(evals.iter().map(|e| e.fused[c]));
                push("fold", &f.fold.to_string(), split, "fused", "", &c.to_string(), m);
            }
            let m = mean(evals.iter().map(|e| SubjectEval::mean_fg(&e.fused)));
            push("fold", &f.fold.to_string(), split, "fused", "", "mean_fg", m);
        }
    }
    for (c, &d) in report.aggregate.fused_test_per_class.iter().enumerate() {
        push("aggregate", "", "test", "fused", "", &c.to_string(), d);
    }
    push("aggregate", "", "test", "fused", "", "mean_fg", report.aggregate.fused_test_mean_fg);
    push("aggregate", "", "val", "fused", "", "mean_fg", report.aggregate.fused_val_mean_fg);
    push("aggregate", "", "val", "best_plane", "", "mean_fg", report.aggregate.max_plane_val_mean_fg);
    out
}

/// Run the configured experiment on a dataset directory. Creates
/// `<out_parent>/<run dir>` and returns the report; the selected folds
/// (all five by default) are trained sequentially.
pub fn run_experiment(
    cfg: &ExperimentConfig,
    dataset_dir: &Path,
    out_parent: &Path,
) -> Result<(ExperimentReport, PathBuf)> {
    run_experiment_jobs(cfg, dataset_dir, out_parent, 1)
}

/// As [`run_experiment`], training up to `jobs` folds concurrently.
/// Reports are assembled in fold order, so the artifact bytes do not
/// depend on the worker count.
pub fn run_experiment_jobs(
    cfg: &ExperimentConfig,
    dataset_dir: &Path,
    out_parent: &Path,
    jobs: usize,
) -> Result<(ExperimentReport, PathBuf)> {
    cfg.validate()?;
    if jobs == 0 {
        return Err(Error::config("jobs must be at least 1"));
    }
    let manifest = load_dataset(dataset_dir)?;
    if manifest.classes as usize + 1 != cfg.arch.num_classes {
        return Err(Error::config(format!(
            "dataset has {} foreground classes; the architecture expects {} total",
            manifest.classes, cfg.arch.num_classes
        )));
    }
    for entry in &manifest.subjects {
        let p = dataset_dir.join(&entry.labels);
        if !p.exists() {
            return Err(Error::data(format!(
                "subject {} is missing labels at {}",
                entry.id,
                p.display()
            )));
        }
    }

    let run_dir = out_parent.join(cfg.run_dir_name());
    std::fs::create_dir_all(&run_dir).map_err(|e| Error::io(&run_dir, e))?;
    let split = make_folds(&manifest.subject_ids(), cfg.seed)?;
    write_text(
        &run_dir.join("folds.json"),
        &serde_json::to_string_pretty(&split)
            .map_err(|e| Error::data(format!("serialize folds: {e}")))?,
    )?;

    let selected: Vec<usize> = cfg
        .run_folds
        .clone()
        .unwrap_or_else(|| (0..cfg.folds).collect());
    let total_clock = Instant::now();
    let mut outcomes: Vec<Option<Result<FoldOutcome>>> = Vec::new();
    outcomes.resize_with(selected.len(), || None);
    if jobs == 1 || selected.len() == 1 {
        for (i, &f) in selected.iter().enumerate() {
            outcomes[i] = Some(run_fold(
                cfg,
                dataset_dir,
                &manifest,
                f,
                &split.folds[f],
                &run_dir.join(format!("fold{f}")),
            ));
        }
    } else {
        let next = std::sync::atomic::AtomicUsize::new(0);
        let slots = std::sync::Mutex::new(&mut outcomes);
        std::thread::scope(|scope| {
            for _ in 0..jobs.min(selected.len()) {
                scope.spawn(|| loop {
                    let i = next.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
                    if i >= selected.len() {
                        break;
                    }
                    let f = selected[i];
                    let r = run_fold(
                        cfg,
                        dataset_dir,
                        &manifest,
                        f,
                        &split.folds[f],
                        &run_dir.join(format!("fold{f}")),
                    );
                    slots.lock().unwrap()[i] = Some(r);
                });
            }
        });
    }
    let mut fold_reports = Vec::with_capacity(selected.len());
    let mut timing: BTreeMap<String, f64> = BTreeMap::new();
    for (&f, slot) in selected.iter().zip(outcomes) {
        let outcome = slot.expect("every selected fold ran")?;
        for (k, v) in outcome.timings {
            timing.insert(format!("fold{f}.{k}"), v);
        }
        fold_reports.push(outcome.report);
    }
    timing.insert("total_seconds".into(), total_clock.elapsed().as_secs_f64());

    let classes = cfg.arch.num_classes;
    let aggregate = AggregateReport {
        fused_test_per_class: (0..classes)
            .map(|c| mean(fold_reports.iter().map(|f| mean(f.test.iter().map(|e| e.fused[c])))))
            .collect(),
        fused_test_mean_fg: mean(fold_reports.iter().map(|f| f.fused_test_mean_fg)),
        fused_val_mean_fg: mean(fold_reports.iter().map(|f| f.fused_val_mean_fg)),
        max_plane_val_mean_fg: mean(fold_reports.iter().map(|f| f.max_plane_val_mean_fg)),
    };
    let param_count = count_params(&build_with_init::<f32>(&cfg.arch, 0, false)?).0;
    let report = ExperimentReport {
        config: cfg.clone(),
        param_count,
        folds: fold_reports,
        aggregate,
    };

    write_text(&run_dir.join("report.csv"), &report_csv(&report))?;
    write_text(
        &run_dir.join("report.json"),
        &serde_json::to_string_pretty(&report)
            .map_err(|e| Error::data(format!("serialize report: {e}")))?,
    )?;
    let mut timing_text = String::new();
    for (k, v) in &timing {
        timing_text.push_str(&format!("{k}={v:.3}\n"));
    }
    write_text(&run_dir.join("timing.txt"), &timing_text)?;
    Ok((report, run_dir))
}

/// The loaded (intensity, labels) pair of every subject named in `ids`.
pub fn load_cohort(
    dataset_dir: &Path,
    manifest: &DatasetManifest,
    ids: &[String],
) -> Result<Vec<(String, Volume, Volume)>> {
    ids.iter()
        .map(|id| {
            let entry = manifest.entry(id)?;
            let (img, lbl) = load_subject(dataset_dir, entry)?;
            Ok((id.clone(), img, lbl))
        })
        .collect()
}
