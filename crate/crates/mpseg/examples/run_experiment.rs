//! End-to-end experiment on a synthetic phantom cohort: generate data,
//! train one fold of a multiplanar UNet2+ ensemble, fit the fusion map on
//! validation, and report fused test Dice.
//!
//! Quick demo (about a minute):
//!
//! ```text
//! cargo run --example run_experiment -- /tmp/mpseg-demo
//! ```
//!
//! Full desk-scale run (tens of minutes on one core):
//!
//! ```text
//! cargo run --example run_experiment -- /tmp/mpseg-desk --full
//! ```

use std::path::Path;
use std::time::Instant;

use mpseg::pipeline::{make_phantom_cohort, run_experiment, ExperimentConfig};
use mpseg::unetzoo::{ArchSpec, Variant};
use mpseg::volume::PhantomSpec;

fn arch(levels: usize) -> ArchSpec {
    ArchSpec {
        variant: Variant::Unet2p,
        levels,
        base_channels: 8,
        deep_supervision: false,
        input_channels: 1,
        num_classes: 4,
        unet_sqrt2_scale: false,
    }
}

fn desk_config(seed: u64) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::defaults(arch(3), seed);
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

fn quick_config(seed: u64) -> ExperimentConfig {
    let mut cfg = desk_config(seed);
    cfg.arch = arch(2);
    cfg.max_epochs = 3;
    cfg.patience = 2;
    cfg.train_images_per_epoch = 64;
    cfg.val_images_per_epoch = 64;
    cfg.target_size = Some((24, 24));
    cfg.grid_spacing = Some(2.0);
    cfg
}

fn main() -> mpseg::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let out_root = Path::new(args.get(1).map(String::as_str).unwrap_or("/tmp/mpseg-demo"));
    let full = args.iter().any(|a| a == "--full");
    let seed = 20260825u64;

    let (n_subjects, shape) = if full { (20, 48) } else { (8, 24) };
    let phantom = PhantomSpec {
        shape: [shape; 3],
        spacing: [1.0; 3],
        shell_radii: vec![0.35, 0.65, 0.95],
        noise_sigma: 0.08,
        seed: 0,
    };
    let dataset_dir = out_root.join("dataset");
    if !dataset_dir.join("dataset.json").exists() {
        println!("generating {n_subjects} phantom subjects at {shape}^3 ...");
        make_phantom_cohort(&dataset_dir, n_subjects, &phantom, seed)?;
    }

    let cfg = if full { desk_config(seed) } else { quick_config(seed) };
    println!(
        "training {} (levels {}, base {}) on {} planes, {} epochs x {} images",
        cfg.arch.variant.as_str(),
        cfg.arch.levels,
        cfg.arch.base_channels,
        cfg.planes,
        cfg.max_epochs,
        cfg.train_images_per_epoch
    );
    let clock = Instant::now();
    let (report, run_dir) = run_experiment(&cfg, &dataset_dir, out_root)?;
    let minutes = clock.elapsed().as_secs_f64() / 60.0;

    println!("\nparameters: {}", report.param_count);
    for f in &report.folds {
        println!(
            "fold {}: batch {}, best epoch {} (val dice {:.4}), fusion ce {:.4} -> {:.4} in {} steps",
            f.fold,
            f.batch_size,
            f.best_epoch,
            f.best_val_dice,
            f.fusion_initial_ce,
            f.fusion_final_ce,
            f.fusion_steps
        );
        println!(
            "         fused val {:.4} vs best plane {:.4}; fused test {:.4}",
            f.fused_val_mean_fg, f.max_plane_val_mean_fg, f.fused_test_mean_fg
        );
    }
    println!(
        "aggregate fused test mean foreground dice: {:.4}",
        report.aggregate.fused_test_mean_fg
    );
    println!("finished in {minutes:.1} min; artifacts in {}", run_dir.display());
    Ok(())
}
