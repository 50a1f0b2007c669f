//! Generate a synthetic phantom cohort and inspect its manifest.
//!
//! ```text
//! cargo run --example phantom_cohort -- /tmp/mpseg-phantoms
//! ```

use std::path::Path;

use mpseg::pipeline::make_phantom_cohort;
use mpseg::volume::{load_volume, PhantomSpec};

fn main() -> mpseg::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let dir = Path::new(args.get(1).map(String::as_str).unwrap_or("/tmp/mpseg-phantoms"));

    let spec = PhantomSpec {
        shape: [32, 32, 32],
        spacing: [1.0, 1.0, 1.0],
        shell_radii: vec![0.35, 0.65, 0.95],
        noise_sigma: 0.08,
        seed: 0,
    };
    let manifest = make_phantom_cohort(dir, 6, &spec, 42)?;

    println!(
        "cohort of {} subjects, {} foreground classes",
        manifest.subjects.len(),
        manifest.classes
    );
    for entry in &manifest.subjects {
        let counts: Vec<String> = entry.class_counts.iter().map(u64::to_string).collect();
        println!(
            "  {}: shape {:?}, voxels per class [{}]",
            entry.id,
            entry.shape,
            counts.join(", ")
        );
    }

    // the manifest's counts match a recount of the stored volume
    let first = &manifest.subjects[0];
    let labels = load_volume(&dir.join(&first.labels))?;
    let data = labels.labels()?;
    let mut recount = vec![0u64; manifest.classes as usize + 1];
    for &v in data.iter() {
        recount[v as usize] += 1;
    }
    println!(
        "recounted {}: [{}] (matches manifest: {})",
        first.id,
        recount.iter().map(u64::to_string).collect::<Vec<_>>().join(", "),
        recount == first.class_counts
    );
    Ok(())
}
