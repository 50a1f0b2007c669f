//! On-disk interchange for per-plane class-probability volumes.
//!
//! One subject's prediction is k planes x C classes of f32 volumes on the
//! subject's voxel grid. Each (plane, class) pair is stored as an intensity
//! container; a manifest ties them together so fusion fitting and
//! evaluation can run as separate invocations from prediction.

use ndarray::Array4;
use serde::{Deserialize, Serialize};
use std::path::Path;

use crate::error::{Error, Result};
use crate::volume::{load_volume, save_volume, Volume};

pub const PROBS_FORMAT: &str = "mpseg-probs-v1";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProbManifest {
    pub format: String,
    pub subject: String,
    pub planes: usize,
    pub classes: usize,
    pub shape: [usize; 3],
    /// files[plane][class], relative to the manifest's directory.
    pub files: Vec<Vec<String>>,
}

fn manifest_path(dir: &Path, subject: &str) -> std::path::PathBuf {
    dir.join(format!("{subject}.probs.json"))
}

/// Write one subject's per-plane probability volumes beside a manifest.
/// `grid` supplies the voxel spacing and origin.
pub fn save_prob_volumes(
    dir: &Path,
    subject: &str,
    probs: &[Array4<f32>],
    grid: &Volume,
) -> Result<()> {
    if probs.is_empty() {
        return Err(Error::data(format!("subject {subject}: no planes to save")));
    }
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let (nx, ny, nz, classes) = probs[0].dim();
    let mut files = Vec::with_capacity(probs.len());
    for (v, p) in probs.iter().enumerate() {
        if p.dim() != (nx, ny, nz, classes) {
            return Err(Error::data(format!(
                "subject {subject}: plane {v} shape {:?} differs from plane 0 {:?}",
                p.dim(),
                (nx, ny, nz, classes)
            )));
        }
        let mut row = Vec::with_capacity(classes);
        for c in 0..classes {
            let name = format!("{subject}_plane{v}_class{c}.vhdr");
            let slab = p.index_axis(ndarray::Axis(3), c).to_owned();
            let vol = Volume::new_intensity(slab, grid.spacing, grid.origin);
            save_volume(&vol, &dir.join(&name))?;
            row.push(name);
        }
        files.push(row);
    }
    let manifest = ProbManifest {
        format: PROBS_FORMAT.into(),
        subject: subject.into(),
        planes: probs.len(),
        classes,
        shape: [nx, ny, nz],
        files,
    };
    let text = serde_json::to_string_pretty(&manifest)
        .map_err(|e| Error::data(format!("serialize probability manifest: {e}")))?;
    let mp = manifest_path(dir, subject);
    std::fs::write(&mp, text).map_err(|e| Error::io(&mp, e))?;
    Ok(())
}

/// Load one subject's probability volumes back as (planes, (x, y, z, class)).
pub fn load_prob_volumes(dir: &Path, subject: &str) -> Result<Vec<Array4<f32>>> {
    let mp = manifest_path(dir, subject);
    let text = std::fs::read_to_string(&mp).map_err(|e| Error::io(&mp, e))?;
    let manifest: ProbManifest = serde_json::from_str(&text)
        .map_err(|e| Error::data(format!("parse probability manifest: {e}")))?;
    if manifest.format != PROBS_FORMAT {
        return Err(Error::data(format!(
            "unrecognized probability manifest format {:?}",
            manifest.format
        )));
    }
    let [nx, ny, nz] = manifest.shape;
    let mut out = Vec::with_capacity(manifest.planes);
    for (v, row) in manifest.files.iter().enumerate() {
        if row.len() != manifest.classes {
            return Err(Error::data(format!(
                "plane {v} lists {} class files, manifest says {}",
                row.len(),
                manifest.classes
            )));
        }
        let mut p = Array4::<f32>::zeros((nx, ny, nz, manifest.classes));
        for (c, name) in row.iter().enumerate() {
            let vol = load_volume(&dir.join(name))?;
            let data = vol.intensity()?;
            if vol.shape() != manifest.shape {
                return Err(Error::data(format!(
                    "{name}: shape {:?} does not match manifest {:?}",
                    vol.shape(),
                    manifest.shape
                )));
            }
            p.index_axis_mut(ndarray::Axis(3), c).assign(data);
        }
        out.push(p);
    }
    Ok(out)
}
