//! View sampling over the unit sphere, oblique slice extraction, and
//! mapping slice-grid predictions back onto a voxel grid.
//!
//! A view is a unit vector n with a right-handed orthonormal in-plane basis
//! (n, b1, b2). Slices are isotropic 2D grids orthogonal to n, stepping by
//! `grid_spacing` mm along n, b1, b2, centered on the volume's physical
//! center. Intensities are sampled trilinearly, labels nearest-neighbour;
//! points outside the volume's voxel-center hull read as background.

use std::path::Path;

use ndarray::{Array3, Array4};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::container::{self, Dtype, Header, Payload};
use crate::error::{Error, Result};
use crate::volume::{Volume, VolumeKind};

pub const DEFAULT_MIN_ANGLE_DEG: f64 = 60.0;
/// Total candidate budget for rejection sampling before giving up.
pub const SAMPLER_BUDGET: usize = 2_000_000;
/// Consecutive rejections before the sampler restarts from scratch.
const STALL_LIMIT: usize = 5_000;

fn dot(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

fn norm(a: [f64; 3]) -> f64 {
    dot(a, a).sqrt()
}

fn scale(a: [f64; 3], s: f64) -> [f64; 3] {
    [a[0] * s, a[1] * s, a[2] * s]
}

fn sub(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn add(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

/// One view axis with its in-plane basis; (view, b1, b2) is right-handed
/// and orthonormal.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ViewBasis {
    pub view: [f64; 3],
    pub b1: [f64; 3],
    pub b2: [f64; 3],
}

impl ViewBasis {
    /// Deterministic basis: Gram-Schmidt of the canonical axis least
    /// aligned with the view (first such axis on ties), then cross product.
    pub fn from_view(view: [f64; 3]) -> Result<ViewBasis> {
        let n = norm(view);
        if !(n > 0.0) || !n.is_finite() {
            return Err(Error::config("view vector must be nonzero and finite"));
        }
        let v = scale(view, 1.0 / n);
        let axes = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
        let mut best = 0;
        let mut best_dot = f64::INFINITY;
        for (i, e) in axes.iter().enumerate() {
            let d = dot(v, *e).abs();
            if d < best_dot {
                best_dot = d;
                best = i;
            }
        }
        let e = axes[best];
        let proj = dot(e, v);
        let raw = sub(e, scale(v, proj));
        let b1 = scale(raw, 1.0 / norm(raw));
        let b2 = cross(v, b1);
        Ok(ViewBasis { view: v, b1, b2 })
    }
}

/// A set of k view axes sampled over the unit sphere.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct PlaneSet {
    pub views: Vec<ViewBasis>,
    pub min_angle_deg: f64,
    pub seed: u64,
}

impl PlaneSet {
    pub fn k(&self) -> usize {
        self.views.len()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)
            .map_err(|e| Error::data(format!("serialize plane set: {e}")))?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<PlaneSet> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::data(format!("parse plane set: {e}")))
    }
}

/// Line angle between two unit vectors in degrees (sign-insensitive).
pub fn line_angle_deg(a: [f64; 3], b: [f64; 3]) -> f64 {
    dot(a, b).abs().min(1.0).acos().to_degrees()
}

/// Uniform random rotation matrix (Shoemake: normalized iid-normal quaternion).
fn random_rotation(rng: &mut ChaCha8Rng) -> [[f64; 3]; 3] {
    let normal = StandardNormal;
    loop {
        let q: [f64; 4] = std::array::from_fn(|_| normal.sample(rng));
        let n = q.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-12 {
            let [w, x, y, z] = q.map(|v| v / n);
            return [
                [
                    1.0 - 2.0 * (y * y + z * z),
                    2.0 * (x * y - w * z),
                    2.0 * (x * z + w * y),
                ],
                [
                    2.0 * (x * y + w * z),
                    1.0 - 2.0 * (x * x + z * z),
                    2.0 * (y * z - w * x),
                ],
                [
                    2.0 * (x * z - w * y),
                    2.0 * (y * z + w * x),
                    1.0 - 2.0 * (x * x + y * y),
                ],
            ];
        }
    }
}

/// Best-possible line packings used when rejection sampling stalls out:
/// orthogonal axes for k = 3 (pairwise 90 degrees), the icosahedron's
/// six diagonals for k = 6 (pairwise acos(1/sqrt(5)) ~ 63.43 degrees).
fn optimal_packing(k: usize) -> Vec<[f64; 3]> {
    match k {
        3 => vec![[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
        6 => {
            let phi = (1.0 + 5.0f64.sqrt()) / 2.0;
            let s = 1.0 / (1.0 + phi * phi).sqrt();
            vec![
                [0.0, s, s * phi],
                [0.0, s, -s * phi],
                [s, s * phi, 0.0],
                [s, -s * phi, 0.0],
                [s * phi, 0.0, s],
                [s * phi, 0.0, -s],
            ]
        }
        _ => unreachable!("packings exist for k = 3 and k = 6 only"),
    }
}

/// Sample k view axes with every pairwise line angle >= `min_angle_deg`.
///
/// k = 1 returns the sagittal axis (grid axis 0) deterministically. k > 1
/// rejection-samples uniform unit vectors, restarting after long stalls.
/// When the candidate budget runs out (near 60 degrees the last k = 6 slot
/// is a vanishing target for greedy placement), the sampler falls back to
/// a seeded random rotation of the optimal packing for k, so every seed
/// terminates. A constraint even the rotated packing violates is
/// infeasible and errors.
pub fn sample_plane_set_with(
    k: usize,
    seed: u64,
    min_angle_deg: f64,
) -> Result<PlaneSet> {
    if !matches!(k, 1 | 3 | 6) {
        return Err(Error::config(format!("plane count k must be 1, 3, or 6, got {k}")));
    }
    if !(0.0..=90.0).contains(&min_angle_deg) {
        return Err(Error::config(format!(
            "min line angle must lie in [0, 90] degrees, got {min_angle_deg}"
        )));
    }
    if k == 1 {
        let sagittal = ViewBasis::from_view([1.0, 0.0, 0.0])?;
        return Ok(PlaneSet {
            views: vec![sagittal],
            min_angle_deg,
            seed,
        });
    }
    let cos_limit = min_angle_deg.to_radians().cos();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = StandardNormal;
    let mut accepted: Vec<[f64; 3]> = Vec::with_capacity(k);
    let mut stall = 0usize;
    for _attempt in 0..SAMPLER_BUDGET {
        let mut v = [0.0; 3];
        loop {
            for x in v.iter_mut() {
                *x = normal.sample(&mut rng);
            }
            let n = norm(v);
            if n > 1e-12 {
                v = scale(v, 1.0 / n);
                break;
            }
        }
        // |dot| <= cos(min_angle) keeps the line angle >= min_angle
        let ok = accepted
            .iter()
            .all(|&u| dot(u, v).abs() <= cos_limit + 1e-12);
        if ok {
            accepted.push(v);
            stall = 0;
            if accepted.len() == k {
                let views = accepted
                    .into_iter()
                    .map(ViewBasis::from_view)
                    .collect::<Result<Vec<_>>>()?;
                return Ok(PlaneSet {
                    views,
                    min_angle_deg,
                    seed,
                });
            }
        } else {
            stall += 1;
            if stall >= STALL_LIMIT {
                accepted.clear();
                stall = 0;
            }
        }
    }
    let rot = random_rotation(&mut rng);
    let rotated: Vec<[f64; 3]> = optimal_packing(k)
        .into_iter()
        .map(|v| {
            let r = [dot(rot[0], v), dot(rot[1], v), dot(rot[2], v)];
            scale(r, 1.0 / norm(r))
        })
        .collect();
    let feasible = rotated.iter().enumerate().all(|(i, &u)| {
        rotated[i + 1..]
            .iter()
            .all(|&v| dot(u, v).abs() <= cos_limit + 1e-12)
    });
    if feasible {
        let views = rotated
            .into_iter()
            .map(ViewBasis::from_view)
            .collect::<Result<Vec<_>>>()?;
        return Ok(PlaneSet {
            views,
            min_angle_deg,
            seed,
        });
    }
    Err(Error::numeric(format!(
        "plane sampler exhausted its budget of {SAMPLER_BUDGET} candidates \
         for k={k} at min angle {min_angle_deg} degrees"
    )))
}

pub fn sample_plane_set(k: usize, seed: u64) -> Result<PlaneSet> {
    sample_plane_set_with(k, seed, DEFAULT_MIN_ANGLE_DEG)
}

/// Geometry of a slice stack: a regular lattice in (view, b1, b2)
/// coordinates with isotropic step `grid_spacing`, anchored at the physical
/// position of grid point (slice 0, row 0, col 0).
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct StackGeometry {
    pub basis: ViewBasis,
    pub grid_spacing: f64,
    pub n_slices: usize,
    /// Pixels along b1.
    pub width: usize,
    /// Pixels along b2.
    pub height: usize,
    pub origin: [f64; 3],
}

impl StackGeometry {
    /// Physical coordinates (mm) of a sampled pixel.
    pub fn grid_point(&self, slice: usize, row: usize, col: usize) -> [f64; 3] {
        let t = slice as f64 * self.grid_spacing;
        let u = row as f64 * self.grid_spacing;
        let v = col as f64 * self.grid_spacing;
        let mut p = self.origin;
        p = add(p, scale(self.basis.view, t));
        p = add(p, scale(self.basis.b1, u));
        p = add(p, scale(self.basis.b2, v));
        p
    }
}

/// Slices through a volume along one view: images (n_slices, w, h), and
/// matching labels when a label volume was supplied.
#[derive(Debug, Clone, PartialEq)]
pub struct SliceStack {
    pub geom: StackGeometry,
    pub images: Array3<f32>,
    pub labels: Option<Array3<u8>>,
    pub classes: Option<u8>,
}

/// Support of the voxel-center bounding box along a direction.
fn box_extent(volume: &Volume, dir: [f64; 3]) -> f64 {
    let shape = volume.shape();
    let mut e = 0.0;
    for a in 0..3 {
        e += dir[a].abs() * (shape[a] - 1) as f64 * volume.spacing[a];
    }
    e
}

fn steps_to_cover(extent: f64, g: f64) -> usize {
    (extent / g + 1e-9).floor() as usize + 1
}

/// Trilinear sample of an intensity array at continuous index q; None when
/// q lies outside the voxel-center hull.
fn trilinear(data: &Array3<f32>, q: [f64; 3]) -> Option<f64> {
    let dims = data.dim();
    let n = [dims.0, dims.1, dims.2];
    let mut i0 = [0usize; 3];
    let mut f = [0.0f64; 3];
    for a in 0..3 {
        if q[a] < 0.0 || q[a] > (n[a] - 1) as f64 {
            return None;
        }
        let base = q[a].floor().min((n[a] - 2).max(0) as f64);
        i0[a] = base as usize;
        f[a] = q[a] - base;
    }
    let mut acc = 0.0;
    for da in 0..2usize {
        for db in 0..2usize {
            for dc in 0..2usize {
                let w = (if da == 0 { 1.0 - f[0] } else { f[0] })
                    * (if db == 0 { 1.0 - f[1] } else { f[1] })
                    * (if dc == 0 { 1.0 - f[2] } else { f[2] });
                if w != 0.0 {
                    let idx = [
                        (i0[0] + da).min(n[0] - 1),
                        (i0[1] + db).min(n[1] - 1),
                        (i0[2] + dc).min(n[2] - 1),
                    ];
                    acc += w * data[[idx[0], idx[1], idx[2]]] as f64;
                }
            }
        }
    }
    Some(acc)
}

/// Round to nearest with exact halves going down, so index ties resolve to
/// the lower index.
fn round_half_down(x: f64) -> f64 {
    (x - 0.5).ceil()
}

/// Nearest-neighbour label sample at continuous index q; None outside the
/// half-voxel border around the grid.
fn nearest_label(data: &Array3<u8>, q: [f64; 3]) -> Option<u8> {
    let dims = data.dim();
    let n = [dims.0, dims.1, dims.2];
    let mut idx = [0usize; 3];
    for a in 0..3 {
        let r = round_half_down(q[a]);
        if r < 0.0 || r > (n[a] - 1) as f64 {
            return None;
        }
        idx[a] = r as usize;
    }
    Some(data[[idx[0], idx[1], idx[2]]])
}

/// Extract a slice stack through `intensity` (and optionally `labels`)
/// along view `view_index` of the plane set.
///
/// `target_size` fixes the in-plane pixel counts (centered crop/pad);
/// `None` sizes the plane to cover the volume's voxel-center bounding box.
/// `grid_spacing` defaults to the smallest voxel spacing. Points outside
/// the volume read 0 (background).
pub fn extract_slices(
    intensity: &Volume,
    labels: Option<&Volume>,
    ps: &PlaneSet,
    view_index: usize,
    target_size: Option<(usize, usize)>,
    grid_spacing: Option<f64>,
) -> Result<SliceStack> {
    if intensity.kind() != VolumeKind::Intensity {
        return Err(Error::data("extract_slices needs an intensity volume"));
    }
    let img = intensity.intensity()?;
    if view_index >= ps.views.len() {
        return Err(Error::config(format!(
            "view index {view_index} out of range for {} views",
            ps.views.len()
        )));
    }
    let basis = ps.views[view_index];
    let g = match grid_spacing {
        Some(g) if g > 0.0 && g.is_finite() => g,
        Some(g) => return Err(Error::config(format!("grid spacing must be positive, got {g}"))),
        None => {
            let m = intensity
                .spacing
                .iter()
                .cloned()
                .fold(f64::INFINITY, f64::min);
            m
        }
    };
    if let Some(lv) = labels {
        if lv.kind() != VolumeKind::Label {
            return Err(Error::data("label argument must be a label volume"));
        }
        if lv.shape() != intensity.shape() {
            return Err(Error::data(format!(
                "label shape {:?} does not match intensity shape {:?}",
                lv.shape(),
                intensity.shape()
            )));
        }
    }

    let n_slices = steps_to_cover(box_extent(intensity, basis.view), g);
    let (width, height) = match target_size {
        Some((w, h)) => {
            if w == 0 || h == 0 {
                return Err(Error::config("target size must be positive"));
            }
            (w, h)
        }
        None => (
            steps_to_cover(box_extent(intensity, basis.b1), g),
            steps_to_cover(box_extent(intensity, basis.b2), g),
        ),
    };

    let (lo, hi) = intensity.center_bounds();
    let center = [
        (lo[0] + hi[0]) / 2.0,
        (lo[1] + hi[1]) / 2.0,
        (lo[2] + hi[2]) / 2.0,
    ];
    let mut origin = center;
    origin = add(origin, scale(basis.view, -((n_slices - 1) as f64) / 2.0 * g));
    origin = add(origin, scale(basis.b1, -((width - 1) as f64) / 2.0 * g));
    origin = add(origin, scale(basis.b2, -((height - 1) as f64) / 2.0 * g));

    let geom = StackGeometry {
        basis,
        grid_spacing: g,
        n_slices,
        width,
        height,
        origin,
    };

    let spacing = intensity.spacing;
    let vorigin = intensity.origin;
    let mut images = Array3::<f32>::zeros((n_slices, width, height));
    let mut out_labels = labels.map(|_| Array3::<u8>::zeros((n_slices, width, height)));
    let label_data = labels.map(|lv| lv.labels()).transpose()?;

    for s in 0..n_slices {
        for r in 0..width {
            for c in 0..height {
                let p = geom.grid_point(s, r, c);
                let q = [
                    (p[0] - vorigin[0]) / spacing[0],
                    (p[1] - vorigin[1]) / spacing[1],
                    (p[2] - vorigin[2]) / spacing[2],
                ];
                images[[s, r, c]] = trilinear(img, q).unwrap_or(0.0) as f32;
                if let (Some(ol), Some(ld)) = (out_labels.as_mut(), label_data) {
                    ol[[s, r, c]] = nearest_label(ld, q).unwrap_or(0);
                }
            }
        }
    }

    Ok(SliceStack {
        geom,
        images,
        labels: out_labels,
        classes: labels.and_then(|lv| lv.classes),
    })
}

/// Target voxel grid for [`map_back`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TargetGrid {
    pub shape: [usize; 3],
    pub spacing: [f64; 3],
    pub origin: [f64; 3],
}

impl TargetGrid {
    pub fn of(volume: &Volume) -> TargetGrid {
        TargetGrid {
            shape: volume.shape(),
            spacing: volume.spacing,
            origin: volume.origin,
        }
    }
}

/// Map per-pixel class probabilities (n_slices, w, h, C) back onto a voxel
/// grid, assigning each voxel the nearest predicted point in physical
/// coordinates. Ties resolve to the lowest (slice, row, col); voxels
/// farther than one grid step from every predicted point become background
/// one-hot.
pub fn map_back(
    predictions: &Array4<f32>,
    geom: &StackGeometry,
    target: &TargetGrid,
) -> Result<Array4<f32>> {
    let (ns, w, h, channels) = predictions.dim();
    if ns == 0 || w == 0 || h == 0 || channels == 0 {
        return Err(Error::data("map_back on an empty prediction stack"));
    }
    if ns != geom.n_slices || w != geom.width || h != geom.height {
        return Err(Error::data(format!(
            "prediction dims ({ns}, {w}, {h}) do not match stack geometry ({}, {}, {})",
            geom.n_slices, geom.width, geom.height
        )));
    }
    let g = geom.grid_spacing;
    let [d0, d1, d2] = target.shape;
    let mut out = Array4::<f32>::zeros((d0, d1, d2, channels));
    for i0 in 0..d0 {
        for i1 in 0..d1 {
            for i2 in 0..d2 {
                let p = [
                    target.origin[0] + i0 as f64 * target.spacing[0],
                    target.origin[1] + i1 as f64 * target.spacing[1],
                    target.origin[2] + i2 as f64 * target.spacing[2],
                ];
                let rel = sub(p, geom.origin);
                let t = dot(rel, geom.basis.view) / g;
                let u = dot(rel, geom.basis.b1) / g;
                let v = dot(rel, geom.basis.b2) / g;
                let si = round_half_down(t).clamp(0.0, (geom.n_slices - 1) as f64);
                let ri = round_half_down(u).clamp(0.0, (geom.width - 1) as f64);
                let ci = round_half_down(v).clamp(0.0, (geom.height - 1) as f64);
                let dt = t - si;
                let du = u - ri;
                let dv = v - ci;
                let dist2 = dt * dt + du * du + dv * dv;
                if dist2 > 1.0 + 1e-9 {
                    out[[i0, i1, i2, 0]] = 1.0;
                } else {
                    let (s, r, c) = (si as usize, ri as usize, ci as usize);
                    for ch in 0..channels {
                        out[[i0, i1, i2, ch]] = predictions[[s, r, c, ch]];
                    }
                }
            }
        }
    }
    Ok(out)
}

/// One-hot encode a label slice stack as (n_slices, w, h, K+1) probabilities.
pub fn one_hot_stack(labels: &Array3<u8>, classes: u8) -> Array4<f32> {
    let (ns, w, h) = labels.dim();
    let c = classes as usize + 1;
    let mut out = Array4::<f32>::zeros((ns, w, h, c));
    for s in 0..ns {
        for r in 0..w {
            for col in 0..h {
                let l = labels[[s, r, col]] as usize;
                out[[s, r, col, l.min(c - 1)]] = 1.0;
            }
        }
    }
    out
}

/// Export a stack as numbered 2D containers plus a JSON geometry manifest.
pub fn export_slice_stack(stack: &SliceStack, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let g = stack.geom.grid_spacing;
    for s in 0..stack.geom.n_slices {
        let name = format!("slice_{s:04}.vhdr");
        let path = dir.join(&name);
        let vals: Vec<f32> = stack
            .images
            .index_axis(ndarray::Axis(0), s)
            .iter()
            .copied()
            .collect();
        let header = Header {
            shape: vec![stack.geom.width, stack.geom.height],
            spacing: vec![g, g],
            origin: vec![0.0, 0.0],
            kind: "intensity".into(),
            classes: None,
            channels: 1,
            dtype: Dtype::F32,
            payload: container::default_payload_name(&path),
        };
        container::write(&path, &header, &Payload::F32(vals))?;
        if let Some(lab) = &stack.labels {
            let name = format!("labels_{s:04}.vhdr");
            let path = dir.join(&name);
            let vals: Vec<u8> = lab
                .index_axis(ndarray::Axis(0), s)
                .iter()
                .copied()
                .collect();
            let header = Header {
                shape: vec![stack.geom.width, stack.geom.height],
                spacing: vec![g, g],
                origin: vec![0.0, 0.0],
                kind: "label".into(),
                classes: Some(stack.classes.unwrap_or(u8::MAX)),
                channels: 1,
                dtype: Dtype::U8,
                payload: container::default_payload_name(&path),
            };
            container::write(&path, &header, &Payload::U8(vals))?;
        }
    }
    let manifest = serde_json::json!({
        "geometry": stack.geom,
        "slices": stack.geom.n_slices,
        "width": stack.geom.width,
        "height": stack.geom.height,
        "has_labels": stack.labels.is_some(),
        "classes": stack.classes,
    });
    let path = dir.join("geometry.json");
    std::fs::write(&path, serde_json::to_string_pretty(&manifest).unwrap())
        .map_err(|e| Error::io(&path, e))?;
    Ok(())
}
