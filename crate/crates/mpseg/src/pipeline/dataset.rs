//! On-disk datasets: a manifest plus one (intensity, label) container pair
//! per subject, and deterministic phantom cohort generation.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;

use crate::error::{Error, Result};
use crate::volume::{load_volume, make_phantom, save_volume, PhantomSpec, Volume};

pub const DATASET_FORMAT: &str = "mpseg-dataset-v1";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SubjectEntry {
    pub id: String,
    /// Paths relative to the manifest's directory.
    pub image: String,
    pub labels: String,
    pub shape: [usize; 3],
    /// Voxels per class, background first; length = classes + 1.
    pub class_counts: Vec<u64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format: String,
    /// Foreground classes; labels run 0..=classes.
    pub classes: u8,
    pub subjects: Vec<SubjectEntry>,
}

impl DatasetManifest {
    pub fn subject_ids(&self) -> Vec<String> {
        self.subjects.iter().map(|s| s.id.clone()).collect()
    }

    pub fn entry(&self, id: &str) -> Result<&SubjectEntry> {
        self.subjects
            .iter()
            .find(|s| s.id == id)
            .ok_or_else(|| Error::data(format!("subject {id:?} not in the dataset manifest")))
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let path = dir.join("dataset.json");
        let text = serde_json::to_string_pretty(self)
            .map_err(|e| Error::data(format!("serialize dataset manifest: {e}")))?;
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        Ok(())
    }
}

pub fn load_dataset(dir: &Path) -> Result<DatasetManifest> {
    let path = dir.join("dataset.json");
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: DatasetManifest =
        serde_json::from_str(&text).map_err(|e| Error::data(format!("parse {}: {e}", path.display())))?;
    if manifest.format != DATASET_FORMAT {
        return Err(Error::data(format!(
            "unrecognized dataset format {:?}",
            manifest.format
        )));
    }
    if manifest.subjects.is_empty() {
        return Err(Error::data("dataset manifest lists no subjects"));
    }
    Ok(manifest)
}

/// Load one subject's (intensity, labels) pair.
pub fn load_subject(dir: &Path, entry: &SubjectEntry) -> Result<(Volume, Volume)> {
    let img = load_volume(&dir.join(&entry.image))?;
    let lbl = load_volume(&dir.join(&entry.labels))?;
    img.intensity()?;
    lbl.labels()?;
    if img.shape() != lbl.shape() {
        return Err(Error::data(format!(
            "subject {}: image shape {:?} does not match labels {:?}",
            entry.id,
            img.shape(),
            lbl.shape()
        )));
    }
    Ok((img, lbl))
}

fn count_classes(labels: &Volume, classes: u8) -> Result<Vec<u64>> {
    let data = labels.labels()?;
    let mut counts = vec![0u64; classes as usize + 1];
    for &l in data.iter() {
        if l as usize >= counts.len() {
            return Err(Error::data(format!(
                "label {l} exceeds the declared class count {classes}"
            )));
        }
        counts[l as usize] += 1;
    }
    Ok(counts)
}

/// Generate a cohort of n phantoms varying shell geometry per subject:
/// each subject scales the base radii by a factor drawn from [0.8, 1.0]
/// and uses its own noise stream. Writes containers plus dataset.json.
pub fn make_phantom_cohort(
    dir: &Path,
    n: usize,
    base: &PhantomSpec,
    seed: u64,
) -> Result<DatasetManifest> {
    if n == 0 {
        return Err(Error::config("cohort size must be at least 1"));
    }
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut subjects = Vec::with_capacity(n);
    for i in 0..n {
        let scale = rng.gen_range(0.8..=1.0);
        let subject_seed = rng.gen::<u64>();
        let spec = PhantomSpec {
            shell_radii: base.shell_radii.iter().map(|r| r * scale).collect(),
            seed: subject_seed,
            ..base.clone()
        };
        let (img, lbl) = make_phantom(&spec)?;
        let id = format!("s{i:03}");
        let image = format!("{id}_img.vhdr");
        let labels = format!("{id}_lbl.vhdr");
        save_volume(&img, &dir.join(&image))?;
        save_volume(&lbl, &dir.join(&labels))?;
        subjects.push(SubjectEntry {
            id,
            image,
            labels,
            shape: img.shape(),
            class_counts: count_classes(&lbl, base.classes())?,
        });
    }
    let manifest = DatasetManifest {
        format: DATASET_FORMAT.into(),
        classes: base.classes(),
        subjects,
    };
    manifest.save(dir)?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec() -> PhantomSpec {
        PhantomSpec {
            shape: [12, 12, 12],
            spacing: [1.0; 3],
            shell_radii: vec![0.5, 0.9],
            noise_sigma: 0.05,
            seed: 0,
        }
    }

    #[test]
    fn cohort_round_trips_and_counts_match() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = make_phantom_cohort(dir.path(), 3, &small_spec(), 42).unwrap();
        assert_eq!(manifest.subjects.len(), 3);
        let loaded = load_dataset(dir.path()).unwrap();
        assert_eq!(loaded.subjects.len(), 3);
        for entry in &loaded.subjects {
            let (img, lbl) = load_subject(dir.path(), entry).unwrap();
            assert_eq!(img.shape(), entry.shape);
            let recount = count_classes(&lbl, loaded.classes).unwrap();
            assert_eq!(recount, entry.class_counts);
            assert_eq!(recount.iter().sum::<u64>(), 12 * 12 * 12);
        }
    }

    #[test]
    fn cohort_generation_is_deterministic() {
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        let m1 = make_phantom_cohort(d1.path(), 2, &small_spec(), 7).unwrap();
        let m2 = make_phantom_cohort(d2.path(), 2, &small_spec(), 7).unwrap();
        for (a, b) in m1.subjects.iter().zip(&m2.subjects) {
            assert_eq!(a.class_counts, b.class_counts);
            let raw1 = std::fs::read(d1.path().join(a.image.replace(".vhdr", ".raw"))).unwrap();
            let raw2 = std::fs::read(d2.path().join(b.image.replace(".vhdr", ".raw"))).unwrap();
            assert_eq!(raw1, raw2);
        }
    }

    #[test]
    fn subjects_differ_from_each_other() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = make_phantom_cohort(dir.path(), 2, &small_spec(), 9).unwrap();
        assert_ne!(
            manifest.subjects[0].class_counts,
            manifest.subjects[1].class_counts
        );
    }

    #[test]
    fn empty_cohort_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let err = make_phantom_cohort(dir.path(), 0, &small_spec(), 0).unwrap_err();
        assert_eq!(err.exit_code(), 1);
    }

    #[test]
    fn missing_manifest_is_an_io_error() {
        let dir = tempfile::tempdir().unwrap();
        let err = load_dataset(dir.path()).unwrap_err();
        assert_eq!(err.exit_code(), 2);
    }
}
