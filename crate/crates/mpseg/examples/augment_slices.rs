//! Apply random elastic deformation to a phantom slice and summarize its
//! effect: how many pixels move, how far intensities shift, and how the
//! label histogram is preserved.
//!
//! ```text
//! cargo run --example augment_slices
//! ```

use ndarray::Axis;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use mpseg::augment::{elastic_deform, ElasticParams};
use mpseg::multiplanar::{extract_slices, sample_plane_set};
use mpseg::volume::{make_phantom, PhantomSpec};

fn main() -> mpseg::Result<()> {
    let spec = PhantomSpec {
        shape: [32, 32, 32],
        spacing: [1.0; 3],
        shell_radii: vec![0.4, 0.8],
        noise_sigma: 0.02,
        seed: 3,
    };
    let (img, lbl) = make_phantom(&spec)?;
    let ps = sample_plane_set(1, 0)?;
    let stack = extract_slices(&img, Some(&lbl), &ps, 0, None, Some(1.0))?;
    let mid = stack.geom.n_slices / 2;
    let image = stack.images.index_axis(Axis(0), mid).to_owned();
    let labels = stack
        .labels
        .as_ref()
        .expect("labels present")
        .index_axis(Axis(0), mid)
        .to_owned();

    let params = ElasticParams {
        alpha_range: [4.0, 8.0],
        sigma_range: [40.0, 60.0],
        probability: 1.0, // always deform for the demo
        affine: None,
    };
    params.validate()?;

    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for trial in 0..3 {
        let (di, dl) = elastic_deform(&image, &labels, &params, &mut rng);
        let moved = dl
            .iter()
            .zip(labels.iter())
            .filter(|(a, b)| a != b)
            .count();
        let max_shift = di
            .iter()
            .zip(image.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f32, f32::max);
        let hist = |l: &ndarray::Array2<u8>| {
            let mut h = [0usize; 3];
            for &v in l.iter() {
                h[v as usize] += 1;
            }
            h
        };
        println!(
            "trial {trial}: {moved} of {} label pixels changed, max intensity shift {max_shift:.3}",
            labels.len()
        );
        println!(
            "  label histogram before {:?} after {:?}",
            hist(&labels),
            hist(&dl)
        );
    }

    // probability zero leaves the pair untouched
    let off = ElasticParams {
        probability: 0.0,
        ..params
    };
    let (di, dl) = elastic_deform(&image, &labels, &off, &mut rng);
    println!(
        "probability 0: unchanged = {}",
        di == image && dl == labels
    );
    Ok(())
}
