//! Train a small UNet for a few epochs on two tiny phantoms and print the
//! per-epoch log: training loss, validation Dice, early-stopping state.
//!
//! ```text
//! cargo run --example train_tiny
//! ```

use mpseg::multiplanar::sample_plane_set;
use mpseg::pipeline::{train_fold, ExperimentConfig, SubjectData, SubjectStacks};
use mpseg::unetzoo::{ArchSpec, Variant};
use mpseg::volume::{make_phantom, PhantomSpec};

fn main() -> mpseg::Result<()> {
    let arch = ArchSpec {
        variant: Variant::Unet,
        levels: 2,
        base_channels: 4,
        deep_supervision: false,
        input_channels: 1,
        num_classes: 3,
        unet_sqrt2_scale: false,
    };
    let mut cfg = ExperimentConfig::defaults(arch, 1);
    cfg.planes = 3;
    cfg.max_epochs = 6;
    cfg.patience = 5;
    cfg.train_images_per_epoch = 48;
    cfg.val_images_per_epoch = 48;
    cfg.batch_size = 8;
    cfg.learning_rate = 1e-3;
    cfg.target_size = Some((24, 24));
    cfg.grid_spacing = Some(1.0);

    let ps = sample_plane_set(cfg.planes, cfg.plane_seed(0))?;
    let mut stacks = Vec::new();
    for (i, seed) in [(0usize, 100u64), (1, 101), (2, 102)] {
        let spec = PhantomSpec {
            shape: [24, 24, 24],
            spacing: [1.0; 3],
            shell_radii: vec![0.45, 0.9],
            noise_sigma: 0.05,
            seed,
        };
        let (img, lbl) = make_phantom(&spec)?;
        let s = SubjectData::prepare(&format!("s{i}"), &img, &lbl)?;
        stacks.push(SubjectStacks::extract(&s, &ps, cfg.target_size, cfg.grid_spacing)?);
    }

    let (graph, log) = train_fold::<f32>(&cfg, &stacks[..2], &stacks[2..], cfg.net_seed(0))?;
    print!("{}", log.to_csv());
    println!(
        "\nbest epoch {} with val dice {:.4} ({} parameters, batch {})",
        log.best_epoch,
        log.best_val_dice,
        graph.param_count(),
        log.batch_size
    );
    Ok(())
}
