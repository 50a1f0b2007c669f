//! Learned linear fusion of per-plane probabilistic segmentations.
//!
//! Each plane contributes a probability volume (X, Y, Z, C). The fused
//! score of class c at a voxel is z_c = sum_k W[k][c] * p_k,c + beta_c,
//! the label is argmax_c softmax(z)_c (equal to argmax_c z_c since softmax
//! is strictly monotone), ties resolving to the lowest class index.
//!
//! Fitting minimizes the mean voxel cross-entropy of softmax(z) against
//! the truth labels over a class-balanced voxel subsample, by full-batch
//! gradient descent from the uniform-averaging initialization (W = 1/|V|,
//! beta = 0) with a halving step size that only ever accepts improvements.
//! The fitted parameters therefore never score worse than uniform
//! averaging on the fit set.

use ndarray::{Array3, Array4};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;

use crate::error::{Error, Result};

/// Upper bound on the fit subsample size.
pub const MAX_FIT_VOXELS: usize = 1_000_000;
/// Maximum accepted descent steps.
pub const MAX_FIT_STEPS: usize = 200;
/// Initial descent step size.
pub const INITIAL_STEP: f64 = 0.1;
/// Step sizes and loss improvements below this end the fit.
pub const FIT_FLOOR: f64 = 1e-12;

/// Per-plane probabilities at a voxel must sum to 1 within this.
const PROB_SUM_TOL: f32 = 1e-5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusionParams {
    /// weights[k][c]: weight of plane k's class-c probability.
    pub weights: Vec<Vec<f64>>,
    /// bias[c]: additive score offset of class c.
    pub bias: Vec<f64>,
}

impl FusionParams {
    /// Uniform averaging: W = 1/|V|, beta = 0.
    pub fn uniform(n_views: usize, n_classes: usize) -> FusionParams {
        FusionParams {
            weights: vec![vec![1.0 / n_views as f64; n_classes]; n_views],
            bias: vec![0.0; n_classes],
        }
    }

    pub fn n_views(&self) -> usize {
        self.weights.len()
    }

    pub fn n_classes(&self) -> usize {
        self.bias.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.weights.is_empty() || self.bias.len() < 2 {
            return Err(Error::config(
                "fusion parameters need at least one plane and two classes",
            ));
        }
        for row in &self.weights {
            if row.len() != self.bias.len() {
                return Err(Error::config(format!(
                    "fusion weight row has {} classes, bias has {}",
                    row.len(),
                    self.bias.len()
                )));
            }
            if row.iter().any(|w| !w.is_finite()) {
                return Err(Error::numeric("non-finite fusion weight"));
            }
        }
        if self.bias.iter().any(|b| !b.is_finite()) {
            return Err(Error::numeric("non-finite fusion bias"));
        }
        Ok(())
    }
}

/// On-disk form: the plane directions travel with the weights so a saved
/// fusion can be checked against the plane set it was fitted for.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FusionFile {
    pub views: Vec<[f64; 3]>,
    pub weights: Vec<Vec<f64>>,
    pub bias: Vec<f64>,
}

impl FusionFile {
    pub fn new(views: Vec<[f64; 3]>, params: &FusionParams) -> FusionFile {
        FusionFile {
            views,
            weights: params.weights.clone(),
            bias: params.bias.clone(),
        }
    }

    pub fn params(&self) -> FusionParams {
        FusionParams {
            weights: self.weights.clone(),
            bias: self.bias.clone(),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)
            .map_err(|e| Error::config(format!("serializing fusion parameters: {e}")))?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<FusionFile> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let file: FusionFile = serde_json::from_str(&text)
            .map_err(|e| Error::data(format!("parsing fusion parameters: {e}")))?;
        file.params().validate()?;
        Ok(file)
    }
}

fn check_volumes(prob_volumes: &[&Array4<f32>], n_classes: usize) -> Result<()> {
    let first = prob_volumes[0].dim();
    if first.3 != n_classes {
        return Err(Error::data(format!(
            "probability volumes carry {} classes, fusion expects {n_classes}",
            first.3
        )));
    }
    for (k, v) in prob_volumes.iter().enumerate() {
        if v.dim() != first {
            return Err(Error::data(format!(
                "plane {k} volume shape {:?} differs from plane 0 {:?}",
                v.dim(),
                first
            )));
        }
        for row in v.rows() {
            let s: f32 = row.sum();
            if (s - 1.0).abs() > PROB_SUM_TOL {
                return Err(Error::data(format!(
                    "plane {k} has a voxel whose class probabilities sum to {s}"
                )));
            }
        }
    }
    Ok(())
}

/// Fuse per-plane probability volumes into a score volume and a label
/// volume. Scores follow z_c = sum_k W[k][c] p_k,c + beta_c; the label is
/// the argmax (lowest class index on ties).
pub fn fuse(
    prob_volumes: &[&Array4<f32>],
    fp: &FusionParams,
) -> Result<(Array4<f32>, Array3<u8>)> {
    fp.validate()?;
    if prob_volumes.len() != fp.n_views() {
        return Err(Error::data(format!(
            "{} probability volumes for {} fusion planes",
            prob_volumes.len(),
            fp.n_views()
        )));
    }
    let c = fp.n_classes();
    check_volumes(prob_volumes, c)?;
    let (nx, ny, nz, _) = prob_volumes[0].dim();
    let mut scores = Array4::<f32>::zeros((nx, ny, nz, c));
    let mut labels = Array3::<u8>::zeros((nx, ny, nz));
    let mut z = vec![0.0f64; c];
    for x in 0..nx {
        for y in 0..ny {
            for zi in 0..nz {
                for (ci, zc) in z.iter_mut().enumerate() {
                    let mut acc = fp.bias[ci];
                    for (k, v) in prob_volumes.iter().enumerate() {
                        acc += fp.weights[k][ci] * v[[x, y, zi, ci]] as f64;
                    }
                    *zc = acc;
                }
                let mut best = 0usize;
                for (ci, zc) in z.iter().enumerate() {
                    scores[[x, y, zi, ci]] = *zc as f32;
                    if *zc > z[best] {
                        best = ci;
                    }
                }
                labels[[x, y, zi]] = best as u8;
            }
        }
    }
    Ok((scores, labels))
}

/// Per-voxel argmax of a probability volume, lowest class index on ties.
pub fn argmax_labels(probs: &Array4<f32>) -> Array3<u8> {
    let (nx, ny, nz, c) = probs.dim();
    let mut labels = Array3::<u8>::zeros((nx, ny, nz));
    for x in 0..nx {
        for y in 0..ny {
            for z in 0..nz {
                let mut best = 0usize;
                for ci in 1..c {
                    if probs[[x, y, z, ci]] > probs[[x, y, z, best]] {
                        best = ci;
                    }
                }
                labels[[x, y, z]] = best as u8;
            }
        }
    }
    labels
}

/// One fit subject: |V| probability volumes plus the truth labels on the
/// same grid.
pub struct FitSubject<'a> {
    pub probs: Vec<&'a Array4<f32>>,
    pub truth: &'a Array3<u8>,
}

/// The materialized fit subsample: probs is (n_samples, n_views,
/// n_classes), labels one class id per sample.
pub struct FitSet {
    pub probs: Array3<f32>,
    pub labels: Vec<u8>,
}

impl FitSet {
    pub fn n_samples(&self) -> usize {
        self.labels.len()
    }
    pub fn n_views(&self) -> usize {
        self.probs.dim().1
    }
    pub fn n_classes(&self) -> usize {
        self.probs.dim().2
    }
}

/// Draw the class-balanced fit subsample: background voxels capped at half
/// the budget, foreground resampled (with replacement when scarce) to the
/// same count.
pub fn build_fit_set(subjects: &[FitSubject<'_>], seed: u64) -> Result<FitSet> {
    if subjects.is_empty() {
        return Err(Error::data("fusion fitting needs at least one subject"));
    }
    let n_views = subjects[0].probs.len();
    if n_views == 0 {
        return Err(Error::data("fusion fitting needs at least one plane"));
    }
    let n_classes = subjects[0].probs[0].dim().3;
    for (i, s) in subjects.iter().enumerate() {
        if s.probs.len() != n_views {
            return Err(Error::data(format!(
                "subject {i} has {} planes, subject 0 has {n_views}",
                s.probs.len()
            )));
        }
        check_volumes(&s.probs, n_classes)?;
        let (nx, ny, nz, _) = s.probs[0].dim();
        if s.truth.dim() != (nx, ny, nz) {
            return Err(Error::data(format!(
                "subject {i} truth shape {:?} does not match its volumes",
                s.truth.dim()
            )));
        }
        if let Some(&l) = s.truth.iter().find(|&&l| l as usize >= n_classes) {
            return Err(Error::data(format!(
                "subject {i} truth label {l} outside {n_classes} classes"
            )));
        }
    }

    // Coordinates in deterministic subject-major C-order.
    let mut bg: Vec<(usize, [usize; 3])> = Vec::new();
    let mut fg: Vec<(usize, [usize; 3])> = Vec::new();
    for (i, s) in subjects.iter().enumerate() {
        for (idx, &l) in s.truth.indexed_iter() {
            let coord = (i, [idx.0, idx.1, idx.2]);
            if l == 0 {
                bg.push(coord);
            } else {
                fg.push(coord);
            }
        }
    }
    if fg.is_empty() {
        return Err(Error::data("no foreground voxels in the fusion fit truth"));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let half = MAX_FIT_VOXELS / 2;
    let take_bg = bg.len().min(half);
    let mut picks: Vec<(usize, [usize; 3])> = Vec::with_capacity(2 * take_bg.max(1));
    if take_bg == bg.len() {
        picks.extend_from_slice(&bg);
    } else {
        let mut idx = rand::seq::index::sample(&mut rng, bg.len(), take_bg).into_vec();
        idx.sort_unstable();
        picks.extend(idx.into_iter().map(|i| bg[i]));
    }
    // Foreground matched to the background count; when there is no
    // background at all, fall back to plain foreground sampling.
    let take_fg = if take_bg == 0 {
        fg.len().min(MAX_FIT_VOXELS)
    } else {
        take_bg
    };
    if take_fg <= fg.len() {
        if take_fg == fg.len() {
            picks.extend_from_slice(&fg);
        } else {
            let mut idx = rand::seq::index::sample(&mut rng, fg.len(), take_fg).into_vec();
            idx.sort_unstable();
            picks.extend(idx.into_iter().map(|i| fg[i]));
        }
    } else {
        picks.extend_from_slice(&fg);
        for _ in fg.len()..take_fg {
            picks.push(fg[rng.gen_range(0..fg.len())]);
        }
    }

    let n = picks.len();
    let mut probs = Array3::<f32>::zeros((n, n_views, n_classes));
    let mut labels = Vec::with_capacity(n);
    for (row, &(si, [x, y, z])) in picks.iter().enumerate() {
        let s = &subjects[si];
        for (k, v) in s.probs.iter().enumerate() {
            for c in 0..n_classes {
                probs[[row, k, c]] = v[[x, y, z, c]];
            }
        }
        labels.push(s.truth[[x, y, z]]);
    }
    Ok(FitSet { probs, labels })
}

/// Mean cross-entropy of softmax(z) against the fit-set labels, with an
/// optional gradient accumulated into (dW, dbias).
fn ce_pass(
    fs: &FitSet,
    fp: &FusionParams,
    mut grad: Option<(&mut [f64], &mut [f64])>,
) -> f64 {
    let n = fs.n_samples();
    let v = fs.n_views();
    let c = fs.n_classes();
    let inv_n = 1.0 / n as f64;
    let mut z = vec![0.0f64; c];
    let mut loss = 0.0f64;
    for i in 0..n {
        for (ci, zc) in z.iter_mut().enumerate() {
            let mut acc = fp.bias[ci];
            for k in 0..v {
                acc += fp.weights[k][ci] * fs.probs[[i, k, ci]] as f64;
            }
            *zc = acc;
        }
        let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let sum_exp: f64 = z.iter().map(|&zc| (zc - m).exp()).sum();
        let lse = m + sum_exp.ln();
        let y = fs.labels[i] as usize;
        loss += lse - z[y];
        if let Some((dw, db)) = grad.as_mut() {
            for ci in 0..c {
                let q = (z[ci] - lse).exp();
                let d = (q - if ci == y { 1.0 } else { 0.0 }) * inv_n;
                db[ci] += d;
                for k in 0..v {
                    dw[k * c + ci] += d * fs.probs[[i, k, ci]] as f64;
                }
            }
        }
    }
    loss * inv_n
}

/// Fit-set mean cross-entropy of a parameter set.
pub fn fit_set_ce(fs: &FitSet, fp: &FusionParams) -> Result<f64> {
    fp.validate()?;
    if fp.n_views() != fs.n_views() || fp.n_classes() != fs.n_classes() {
        return Err(Error::data(
            "fusion parameter shape does not match the fit set",
        ));
    }
    Ok(ce_pass(fs, fp, None))
}

#[derive(Debug, Clone, Serialize)]
pub struct FusionFit {
    pub params: FusionParams,
    /// Cross-entropy of the uniform-averaging initialization.
    pub initial_ce: f64,
    /// Cross-entropy of the returned parameters; never above initial_ce.
    pub final_ce: f64,
    pub accepted_steps: usize,
    pub n_samples: usize,
}

/// Descend from uniform averaging on an already-built fit set.
pub fn fit_fusion_on(fs: &FitSet) -> Result<FusionFit> {
    if fs.n_samples() == 0 {
        return Err(Error::data("empty fusion fit set"));
    }
    let v = fs.n_views();
    let c = fs.n_classes();
    let mut fp = FusionParams::uniform(v, c);
    let mut ce = ce_pass(fs, &fp, None);
    let initial_ce = ce;
    let mut step = INITIAL_STEP;
    let mut accepted = 0usize;
    'outer: while accepted < MAX_FIT_STEPS {
        let mut dw = vec![0.0f64; v * c];
        let mut db = vec![0.0f64; c];
        ce_pass(fs, &fp, Some((&mut dw, &mut db)));
        loop {
            if step < FIT_FLOOR {
                break 'outer;
            }
            let mut cand = fp.clone();
            for k in 0..v {
                for ci in 0..c {
                    cand.weights[k][ci] -= step * dw[k * c + ci];
                }
            }
            for ci in 0..c {
                cand.bias[ci] -= step * db[ci];
            }
            let cand_ce = ce_pass(fs, &cand, None);
            if cand_ce < ce {
                let delta = ce - cand_ce;
                fp = cand;
                ce = cand_ce;
                accepted += 1;
                if delta < FIT_FLOOR {
                    break 'outer;
                }
                break;
            }
            step *= 0.5;
        }
    }
    Ok(FusionFit {
        params: fp,
        initial_ce,
        final_ce: ce,
        accepted_steps: accepted,
        n_samples: fs.n_samples(),
    })
}

/// Build the balanced subsample from validation subjects and fit.
pub fn fit_fusion(subjects: &[FitSubject<'_>], seed: u64) -> Result<FusionFit> {
    let fs = build_fit_set(subjects, seed)?;
    fit_fusion_on(&fs)
}
