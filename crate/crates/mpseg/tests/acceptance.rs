//! Acceptance checklist for the whole pipeline. Each test is one
//! criterion and prints one summary line (visible with --nocapture);
//! the harness line `test criterion_N_... ok` is the pass/fail verdict.
//!
//! The desk-scale experiment behind criteria 5, 6, and 8 runs once and is
//! shared; expect the full suite to take roughly twenty minutes on a
//! single core, dominated by the two end-to-end training runs.

use std::path::{Path, PathBuf};
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use ndarray::{Array3, Array4};

use mpseg::evalstats::{box_stats, paired_t_test, wilcoxon_test, WilcoxonMode};
use mpseg::multiplanar::{
    extract_slices, line_angle_deg, map_back, sample_plane_set, PlaneSet, SliceStack, TargetGrid,
    ViewBasis,
};
use mpseg::pipeline::{make_phantom_cohort, run_experiment, ExperimentConfig, ExperimentReport};
use mpseg::unetzoo::{
    build_with_init, count_params, formula_params, params_csv, stage_kernel_count, ArchSpec,
    Variant,
};
use mpseg::volume::{make_phantom, PhantomSpec, Volume};

fn spec(variant: Variant, levels: usize, base: usize, classes: usize, sqrt2: bool) -> ArchSpec {
    ArchSpec {
        variant,
        levels,
        base_channels: base,
        deep_supervision: false,
        input_channels: 1,
        num_classes: classes,
        unet_sqrt2_scale: sqrt2,
    }
}

#[test]
fn criterion_1_parameter_formula_equivalence() {
    let clock = Instant::now();
    let mut stages_checked = 0usize;
    for variant in [Variant::Unet, Variant::Unet2p, Variant::Unet3p] {
        for levels in [3usize, 4, 5] {
            for base in [8usize, 32] {
                for sqrt2 in [false, true] {
                    if sqrt2 && variant != Variant::Unet {
                        continue;
                    }
                    let s = spec(variant, levels, base, 4, sqrt2);
                    let g = build_with_init::<f32>(&s, 0, false).unwrap();
                    let (_, counts) = count_params(&g);
                    for j in 0..levels - 1 {
                        let formula = formula_params(&s, j).unwrap();
                        let graph = stage_kernel_count(&counts, &format!("dec{j}"));
                        assert_eq!(
                            formula, graph,
                            "{variant:?} levels {levels} base {base} sqrt2 {sqrt2} stage {j}"
                        );
                        stages_checked += 1;
                    }
                    // the audit table agrees with itself
                    let csv = params_csv(&s).unwrap();
                    assert!(csv.lines().skip(1).all(|l| {
                        let f: Vec<&str> = l.split(',').collect();
                        f[2].is_empty() || f[4] == "0"
                    }));
                }
            }
        }
    }
    let elapsed = clock.elapsed();
    println!(
        "criterion 1: {stages_checked} decoder stages, formula == graph exactly, {:.2}s",
        elapsed.as_secs_f64()
    );
    assert!(elapsed < Duration::from_secs(5), "took {elapsed:?}");
}

#[test]
fn criterion_2_published_magnitudes_and_ordering() {
    let clock = Instant::now();
    let totals: Vec<u64> = [
        spec(Variant::Unet, 5, 32, 8, true),
        spec(Variant::Unet2p, 5, 32, 8, false),
        spec(Variant::Unet3p, 5, 32, 8, false),
    ]
    .iter()
    .map(|s| count_params(&build_with_init::<f32>(s, 0, false).unwrap()).0)
    .collect();
    assert!(
        totals[0] > totals[1] && totals[1] > totals[2],
        "ordering violated: {totals:?}"
    );
    let published = [62_061_823u64, 36_643_528, 26_975_432];
    for (t, p) in totals.iter().zip(published) {
        let rel = (*t as f64 - p as f64).abs() / p as f64;
        assert!(rel <= 0.20, "total {t} vs published {p}: rel {rel:.3}");
    }
    let elapsed = clock.elapsed();
    println!(
        "criterion 2: totals {totals:?} within 20% of {published:?}, ordered, {:.2}s",
        elapsed.as_secs_f64()
    );
    assert!(elapsed < Duration::from_secs(5), "took {elapsed:?}");
}

#[test]
fn criterion_3_gradient_checks_ten_seeds() {
    let clock = Instant::now();
    let mut worst = 0.0f64;
    let mut graphs = 0usize;
    for seed in 0..10u64 {
        for (name, report) in mpseg::nn::standard_layer_checks(seed).unwrap() {
            assert!(
                report.max_rel_err <= 1e-4,
                "{name} seed {seed}: {}",
                report.max_rel_err
            );
            worst = worst.max(report.max_rel_err);
            graphs += 1;
        }
    }
    let elapsed = clock.elapsed();
    println!(
        "criterion 3: {graphs} gradchecked graphs over 10 seeds, worst rel err {worst:.2e}, {:.1}s",
        elapsed.as_secs_f64()
    );
    assert!(elapsed < Duration::from_secs(120), "took {elapsed:?}");
}

fn one_hot(stack: &SliceStack, classes: usize) -> Array4<f32> {
    let labels = stack.labels.as_ref().unwrap();
    let (ns, w, h) = labels.dim();
    let mut p = Array4::<f32>::zeros((ns, w, h, classes));
    for ((s, x, y), &l) in labels.indexed_iter() {
        p[[s, x, y, l as usize]] = 1.0;
    }
    p
}

fn roundtrip_mismatches(
    intensity: &Volume,
    labels: &Volume,
    ps: &PlaneSet,
    view: usize,
) -> usize {
    let classes = labels.classes.unwrap() as usize + 1;
    let stack = extract_slices(intensity, Some(labels), ps, view, None, Some(1.0)).unwrap();
    let mapped = map_back(
        &one_hot(&stack, classes),
        &stack.geom,
        &TargetGrid::of(intensity),
    )
    .unwrap();
    let truth = labels.labels().unwrap();
    let mut mismatches = 0usize;
    for ((x, y, z), &l) in truth.indexed_iter() {
        let mut best = 0usize;
        for c in 1..classes {
            if mapped[[x, y, z, c]] > mapped[[x, y, z, best]] {
                best = c;
            }
        }
        mismatches += (best as u8 != l) as usize;
    }
    mismatches
}

#[test]
fn criterion_4_geometry_round_trips() {
    let clock = Instant::now();
    let phantom = PhantomSpec {
        shape: [32, 32, 32],
        spacing: [1.0; 3],
        shell_radii: vec![0.4, 0.8],
        noise_sigma: 0.05,
        seed: 17,
    };
    let (intensity, labels) = make_phantom(&phantom).unwrap();

    // axis-aligned round trips lose nothing
    for axis in [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]] {
        let ps = PlaneSet {
            views: vec![ViewBasis::from_view(axis).unwrap()],
            min_angle_deg: 0.0,
            seed: 0,
        };
        let m = roundtrip_mismatches(&intensity, &labels, &ps, 0);
        assert_eq!(m, 0, "axis {axis:?}: {m} mismatched voxels");
    }

    // oblique round trips keep at least 99% of voxels
    let total = 32usize.pow(3);
    let mut worst_agree = 1.0f64;
    for seed in [3u64, 4, 5] {
        let ps = sample_plane_set(3, seed).unwrap();
        for v in 0..ps.k() {
            let m = roundtrip_mismatches(&intensity, &labels, &ps, v);
            let agree = 1.0 - m as f64 / total as f64;
            assert!(agree >= 0.99, "seed {seed} view {v}: agreement {agree:.4}");
            worst_agree = worst_agree.min(agree);
        }
    }

    // trilinear sampling reproduces an affine field exactly
    let shape = [16usize, 14, 15];
    let spacing = [1.0, 1.25, 0.75];
    let origin = [-3.0, 2.0, 0.5];
    let affine = |p: [f64; 3]| 0.3 * p[0] - 0.7 * p[1] + 0.05 * p[2] + 2.0;
    let mut data = Array3::<f32>::zeros((shape[0], shape[1], shape[2]));
    for ((i, j, k), v) in data.indexed_iter_mut() {
        *v = affine([
            origin[0] + i as f64 * spacing[0],
            origin[1] + j as f64 * spacing[1],
            origin[2] + k as f64 * spacing[2],
        ]) as f32;
    }
    let vol = Volume::new_intensity(data, spacing, origin);
    let mut max_err = 0.0f64;
    for seed in [8u64, 9] {
        let ps = sample_plane_set(3, seed).unwrap();
        for v in 0..ps.k() {
            let stack = extract_slices(&vol, None, &ps, v, None, Some(0.9)).unwrap();
            let (lo, hi) = vol.center_bounds();
            for s in 0..stack.geom.n_slices {
                for r in 0..stack.geom.width {
                    for c in 0..stack.geom.height {
                        let p = stack.geom.grid_point(s, r, c);
                        let inside = (0..3).all(|a| p[a] >= lo[a] && p[a] <= hi[a]);
                        if inside {
                            let err = (stack.images[[s, r, c]] as f64 - affine(p)).abs();
                            max_err = max_err.max(err);
                        }
                    }
                }
            }
        }
    }
    assert!(max_err <= 1e-5, "trilinear affine error {max_err:.2e}");

    let elapsed = clock.elapsed();
    println!(
        "criterion 4: axis-aligned exact, oblique agreement >= {worst_agree:.4}, affine err {max_err:.1e}, {:.1}s",
        elapsed.as_secs_f64()
    );
    assert!(elapsed < Duration::from_secs(60), "took {elapsed:?}");
}

/// The desk-scale experiment shared by criteria 5, 6, and 8.
struct DeskRun {
    // keeps the temp dir alive for the whole test process
    _dir: tempfile::TempDir,
    dataset: PathBuf,
    report: ExperimentReport,
    run_dir: PathBuf,
    elapsed: Duration,
}

fn desk_phantom() -> PhantomSpec {
    PhantomSpec {
        shape: [48, 48, 48],
        spacing: [1.0; 3],
        shell_radii: vec![0.35, 0.65, 0.95],
        noise_sigma: 0.08,
        seed: 0,
    }
}

fn desk_config() -> ExperimentConfig {
    let arch = ArchSpec {
        variant: Variant::Unet2p,
        levels: 3,
        base_channels: 8,
        deep_supervision: false,
        input_channels: 1,
        num_classes: 4,
        unet_sqrt2_scale: false,
    };
    let mut cfg = ExperimentConfig::defaults(arch, 20260825);
    cfg.planes = 3;
    cfg.max_epochs = 15;
    cfg.patience = 14;
    cfg.train_images_per_epoch = 400;
    cfg.val_images_per_epoch = 400;
    cfg.batch_size = 16;
    cfg.learning_rate = 1e-3;
    cfg.target_size = Some((48, 48));
    cfg.grid_spacing = Some(1.75);
    cfg.augmentation.alpha_range = [4.0, 8.0];
    cfg.augmentation.sigma_range = [0.0, 60.0];
    cfg.run_folds = Some(vec![0]);
    cfg
}

fn desk_run_in(parent: &Path) -> (PathBuf, ExperimentReport, PathBuf) {
    let dataset = parent.join("dataset");
    make_phantom_cohort(&dataset, 20, &desk_phantom(), 20260825).unwrap();
    let (report, run_dir) = run_experiment(&desk_config(), &dataset, parent).unwrap();
    (dataset, report, run_dir)
}

fn desk_run() -> &'static DeskRun {
    static RUN: OnceLock<DeskRun> = OnceLock::new();
    RUN.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let clock = Instant::now();
        let (dataset, report, run_dir) = desk_run_in(dir.path());
        let elapsed = clock.elapsed();
        DeskRun {
            _dir: dir,
            dataset,
            report,
            run_dir,
            elapsed,
        }
    })
}

#[test]
fn criterion_5_desk_scale_experiment() {
    let run = desk_run();
    let agg = &run.report.aggregate;
    assert!(
        agg.fused_test_mean_fg >= 0.80,
        "fused test mean foreground dice {:.4} < 0.80",
        agg.fused_test_mean_fg
    );
    for f in &run.report.folds {
        assert!(
            f.fused_val_mean_fg >= f.max_plane_val_mean_fg - 0.02,
            "fold {}: fused val {:.4} < best plane {:.4} - 0.02",
            f.fold,
            f.fused_val_mean_fg,
            f.max_plane_val_mean_fg
        );
    }
    println!(
        "criterion 5: fused test dice {:.4} (>= 0.80), fused val {:.4} vs best plane {:.4}, {:.1} min",
        agg.fused_test_mean_fg,
        agg.fused_val_mean_fg,
        agg.max_plane_val_mean_fg,
        run.elapsed.as_secs_f64() / 60.0
    );
    assert!(
        run.elapsed <= Duration::from_secs(30 * 60),
        "took {:?}",
        run.elapsed
    );
}

#[test]
fn criterion_6_fusion_dominance_on_every_fold() {
    let run = desk_run();
    for f in &run.report.folds {
        assert!(
            f.fusion_final_ce <= f.fusion_initial_ce,
            "fold {}: fitted ce {:.6} > uniform ce {:.6}",
            f.fold,
            f.fusion_final_ce,
            f.fusion_initial_ce
        );
    }
    let f0 = &run.report.folds[0];
    println!(
        "criterion 6: fit-set cross-entropy {:.4} -> {:.4} on every fold",
        f0.fusion_initial_ce, f0.fusion_final_ce
    );
}

fn independent_midranks(values: &[f64]) -> Vec<f64> {
    let n = values.len();
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&a, &b| values[a].partial_cmp(&values[b]).unwrap());
    let mut ranks = vec![0.0; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && values[idx[j + 1]] == values[idx[i]] {
            j += 1;
        }
        let avg = (i + j + 2) as f64 / 2.0;
        for t in i..=j {
            ranks[idx[t]] = avg;
        }
        i = j + 1;
    }
    ranks
}

/// Two-sided exact rank-sum p by enumerating every n1-subset of the pooled
/// midranks (bitmask enumeration; n1 + n2 <= 16 here).
fn brute_force_rank_sum_p(a: &[f64], b: &[f64]) -> f64 {
    let pooled: Vec<f64> = a.iter().chain(b.iter()).copied().collect();
    let ranks = independent_midranks(&pooled);
    let n = pooled.len();
    let n1 = a.len();
    let observed: f64 = ranks[..n1].iter().sum();
    let (mut below, mut above, mut total) = (0u64, 0u64, 0u64);
    for mask in 0u32..(1u32 << n) {
        if mask.count_ones() as usize != n1 {
            continue;
        }
        let mut w = 0.0;
        for (i, r) in ranks.iter().enumerate() {
            if mask & (1 << i) != 0 {
                w += r;
            }
        }
        total += 1;
        below += (w <= observed + 1e-9) as u64;
        above += (w >= observed - 1e-9) as u64;
    }
    let p = 2.0 * (below.min(above) as f64) / total as f64;
    p.min(1.0)
}

#[test]
fn criterion_7_statistics_oracles() {
    // paired t on differences 1..5
    let base = [0.2, 0.4, 0.6, 0.8, 1.0];
    let shifted: Vec<f64> = base.iter().zip(1..).map(|(x, d)| x + d as f64).collect();
    let t = paired_t_test(&shifted, &base).unwrap();
    assert!(
        (t.p_value - 0.0132).abs() <= 1e-3,
        "p {:.6} not within 1e-3 of 0.0132",
        t.p_value
    );

    // exact rank-sum enumeration vs independent brute force, all n <= 8
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(20260825);
    let mut cases = 0usize;
    for n1 in 1..=8usize {
        for n2 in 1..=8usize {
            for trial in 0..2 {
                // one tie-free draw, one on a coarse lattice to force ties
                let draw = |rng: &mut rand_chacha::ChaCha8Rng, n: usize| -> Vec<f64> {
                    (0..n)
                        .map(|_| {
                            if trial == 0 {
                                rng.gen_range(0.0..1.0)
                            } else {
                                rng.gen_range(0..5) as f64
                            }
                        })
                        .collect()
                };
                let a = draw(&mut rng, n1);
                let b = draw(&mut rng, n2);
                let fast = wilcoxon_test(&a, &b, WilcoxonMode::RankSum).unwrap();
                assert!(fast.exact, "n1={n1} n2={n2} not exact");
                let brute = brute_force_rank_sum_p(&a, &b);
                assert!(
                    (fast.p_value - brute).abs() <= 1e-9,
                    "n1={n1} n2={n2}: library {} vs brute force {brute}",
                    fast.p_value
                );
                cases += 1;
            }
        }
    }

    // box statistics against hand-computed summaries
    let s = box_stats(&[1.0, 2.0, 3.0, 4.0, 5.0]).unwrap();
    assert_eq!(
        (s.min, s.p25, s.median, s.p75, s.max, s.mean, s.iqr),
        (1.0, 2.0, 3.0, 4.0, 5.0, 3.0, 2.0)
    );
    assert!(s.outliers.is_empty());
    let s = box_stats(&[1.0, 2.0, 3.0, 4.0, 100.0]).unwrap();
    // fences at p25 - 1.5 iqr = -1 and p75 + 1.5 iqr = 7
    assert_eq!((s.p25, s.median, s.p75, s.iqr, s.mean), (2.0, 3.0, 4.0, 2.0, 22.0));
    assert_eq!(s.outliers, vec![100.0]);

    println!(
        "criterion 7: paired-t p {:.5} ~ 0.0132, {cases} rank-sum cases match brute force, box stats exact",
        t.p_value
    );
}

#[test]
fn criterion_8_determinism_byte_identical_reruns() {
    let first = desk_run();
    let second_dir = tempfile::tempdir().unwrap();
    let (_, _, second_run_dir) = desk_run_in(second_dir.path());

    let files = [
        "report.csv",
        "report.json",
        "folds.json",
        "fold0/planes.json",
        "fold0/train_log.csv",
        "fold0/model.ckpt.json",
        "fold0/model.ckpt.bin",
        "fold0/fusion.json",
    ];
    let mut bytes = 0usize;
    for name in files {
        let a = std::fs::read(first.run_dir.join(name)).unwrap();
        let b = std::fs::read(second_run_dir.join(name)).unwrap();
        assert_eq!(a, b, "{name} differs between identically seeded runs");
        bytes += a.len();
    }
    // the regenerated cohort is itself byte-identical
    let a = std::fs::read(first.dataset.join("dataset.json")).unwrap();
    let b = std::fs::read(second_dir.path().join("dataset").join("dataset.json")).unwrap();
    assert_eq!(a, b, "dataset manifests differ");
    println!(
        "criterion 8: {} artifacts ({bytes} bytes) byte-identical across two full runs",
        files.len() + 1
    );
}

#[test]
fn criterion_9_plane_set_invariants() {
    for k in [3usize, 6] {
        for seed in 0..1000u64 {
            let ps = sample_plane_set(k, seed).unwrap();
            assert_eq!(ps.k(), k);
            for v in &ps.views {
                let norm = (v.view[0].powi(2) + v.view[1].powi(2) + v.view[2].powi(2)).sqrt();
                assert!(
                    (norm - 1.0).abs() <= 1e-9,
                    "k {k} seed {seed}: |v| = {norm}"
                );
            }
            for i in 0..k {
                for j in i + 1..k {
                    let angle = line_angle_deg(ps.views[i].view, ps.views[j].view);
                    assert!(
                        angle >= 60.0 - 1e-9,
                        "k {k} seed {seed}: angle {angle:.6} below 60"
                    );
                }
            }
        }
    }
    let single = sample_plane_set(1, 999).unwrap();
    assert_eq!(single.views[0].view, [1.0, 0.0, 0.0]);
    println!("criterion 9: 2000 sampled plane sets valid; k=1 is exactly sagittal");
}
