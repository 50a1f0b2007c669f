//! Audit parameter counts for the three UNet variants: the closed-form
//! per-decoder-stage kernel counts against the counts measured on the
//! built graphs, plus totals at publication scale (5 levels, base width
//! 64 after the first doubling, 8 output classes).
//!
//! ```text
//! cargo run --example parameter_audit
//! ```

use mpseg::unetzoo::{params_csv, ArchSpec, Variant};

fn spec(variant: Variant) -> ArchSpec {
    ArchSpec {
        variant,
        levels: 5,
        base_channels: 32,
        deep_supervision: false,
        input_channels: 1,
        num_classes: 8,
        // the original UNet is wider than its siblings by a factor sqrt(2)
        unet_sqrt2_scale: variant == Variant::Unet,
    }
}

fn main() -> mpseg::Result<()> {
    let mut totals = Vec::new();
    for variant in [Variant::Unet, Variant::Unet2p, Variant::Unet3p] {
        let csv = params_csv(&spec(variant))?;
        print!("{csv}");
        let total: u64 = csv
            .lines()
            .find(|l| l.split(',').nth(1) == Some("total"))
            .and_then(|l| l.split(',').nth(3))
            .and_then(|v| v.parse().ok())
            .unwrap();
        totals.push((variant.as_str(), total));
        println!();
    }
    println!("totals:");
    for (name, t) in &totals {
        println!("  {name:7} {:>12} ({:.1}M)", t, *t as f64 / 1e6);
    }
    assert!(totals[0].1 > totals[1].1 && totals[1].1 > totals[2].1);
    println!("ordering holds: unet > unet2p > unet3p");
    Ok(())
}
