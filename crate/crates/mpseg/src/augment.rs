//! Random elastic deformation of training slices.
//!
//! A per-pixel displacement field (uniform in [-1,1] per axis) is smoothed
//! by a Gaussian, normalized so the largest displacement vector has unit
//! length, scaled by a drawn intensity multiplier divided by the image
//! width, then applied by warping: bilinear for intensities, nearest for
//! labels. The whole transform fires with a configurable probability and
//! otherwise returns the pair unchanged.

use ndarray::Array2;
use rand::Rng;

/// Optional small affine stage composed with the elastic warp. Off by
/// default; multiplanar slice sampling already covers systematic affine
/// variation.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AffineParams {
    /// Rotation drawn from [-max_rotate_deg, max_rotate_deg].
    pub max_rotate_deg: f64,
    /// Isotropic scale drawn from [1 - max_scale_delta, 1 + max_scale_delta].
    pub max_scale_delta: f64,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ElasticParams {
    /// Gaussian smoothing width range in pixels.
    pub alpha_range: [f64; 2],
    /// Displacement intensity multiplier range, applied to the
    /// unit-normalized field and divided by the image width.
    pub sigma_range: [f64; 2],
    /// Probability that the deformation is applied at all.
    pub probability: f64,
    #[serde(default)]
    pub affine: Option<AffineParams>,
}

impl Default for ElasticParams {
    fn default() -> Self {
        ElasticParams {
            alpha_range: [20.0, 30.0],
            sigma_range: [0.0, 450.0],
            probability: 1.0 / 3.0,
            affine: None,
        }
    }
}

impl ElasticParams {
    pub fn validate(&self) -> crate::Result<()> {
        let ok_range = |r: [f64; 2]| r[0].is_finite() && r[1].is_finite() && 0.0 <= r[0] && r[0] <= r[1];
        if !ok_range(self.alpha_range) {
            return Err(crate::Error::config(format!(
                "alpha range must be ordered and non-negative, got {:?}",
                self.alpha_range
            )));
        }
        if !ok_range(self.sigma_range) {
            return Err(crate::Error::config(format!(
                "sigma range must be ordered and non-negative, got {:?}",
                self.sigma_range
            )));
        }
        if !(0.0..=1.0).contains(&self.probability) {
            return Err(crate::Error::config(format!(
                "probability must lie in [0,1], got {}",
                self.probability
            )));
        }
        Ok(())
    }
}

fn draw_uniform<R: Rng>(rng: &mut R, range: [f64; 2]) -> f64 {
    if range[0] == range[1] {
        range[0]
    } else {
        rng.gen_range(range[0]..=range[1])
    }
}

/// Separable Gaussian blur with zero padding; kernel radius ceil(3 alpha).
fn gaussian_smooth(field: &Array2<f64>, alpha: f64) -> Array2<f64> {
    if alpha <= 0.0 {
        return field.clone();
    }
    let radius = (3.0 * alpha).ceil() as usize;
    let mut kernel = Vec::with_capacity(2 * radius + 1);
    let mut sum = 0.0;
    for i in 0..=(2 * radius) {
        let d = i as f64 - radius as f64;
        let w = (-d * d / (2.0 * alpha * alpha)).exp();
        kernel.push(w);
        sum += w;
    }
    for w in kernel.iter_mut() {
        *w /= sum;
    }
    let (h, w) = field.dim();
    let mut tmp = Array2::<f64>::zeros((h, w));
    for r in 0..h {
        for c in 0..w {
            let mut acc = 0.0;
            for (i, k) in kernel.iter().enumerate() {
                let rr = r as isize + i as isize - radius as isize;
                if rr >= 0 && (rr as usize) < h {
                    acc += k * field[[rr as usize, c]];
                }
            }
            tmp[[r, c]] = acc;
        }
    }
    let mut out = Array2::<f64>::zeros((h, w));
    for r in 0..h {
        for c in 0..w {
            let mut acc = 0.0;
            for (i, k) in kernel.iter().enumerate() {
                let cc = c as isize + i as isize - radius as isize;
                if cc >= 0 && (cc as usize) < w {
                    acc += k * tmp[[r, cc as usize]];
                }
            }
            out[[r, c]] = acc;
        }
    }
    out
}

fn bilinear2(img: &Array2<f32>, y: f64, x: f64) -> f32 {
    let (h, w) = img.dim();
    if y < 0.0 || x < 0.0 || y > (h - 1) as f64 || x > (w - 1) as f64 {
        return 0.0;
    }
    let y0 = y.floor().min((h - 2).max(0) as f64);
    let x0 = x.floor().min((w - 2).max(0) as f64);
    let fy = y - y0;
    let fx = x - x0;
    let (iy, ix) = (y0 as usize, x0 as usize);
    let iy1 = (iy + 1).min(h - 1);
    let ix1 = (ix + 1).min(w - 1);
    let mut acc = 0.0f64;
    for (dy, wy) in [(0usize, 1.0 - fy), (1, fy)] {
        for (dx, wx) in [(0usize, 1.0 - fx), (1, fx)] {
            let wgt = wy * wx;
            if wgt != 0.0 {
                let yy = if dy == 0 { iy } else { iy1 };
                let xx = if dx == 0 { ix } else { ix1 };
                acc += wgt * img[[yy, xx]] as f64;
            }
        }
    }
    acc as f32
}

fn nearest2(lab: &Array2<u8>, y: f64, x: f64) -> u8 {
    let (h, w) = lab.dim();
    let ry = (y - 0.5).ceil();
    let rx = (x - 0.5).ceil();
    if ry < 0.0 || rx < 0.0 || ry > (h - 1) as f64 || rx > (w - 1) as f64 {
        return 0;
    }
    lab[[ry as usize, rx as usize]]
}

/// Elastic-deform an image/label pair; with probability 1 - p.probability
/// the inputs come back unchanged. Deterministic given the rng state; draw
/// order is apply gate, alpha, sigma, field axis 0, field axis 1, then the
/// optional affine draws.
pub fn elastic_deform<R: Rng>(
    image: &Array2<f32>,
    label: &Array2<u8>,
    p: &ElasticParams,
    rng: &mut R,
) -> (Array2<f32>, Array2<u8>) {
    assert_eq!(image.dim(), label.dim(), "image and label shapes must match");
    if rng.gen::<f64>() >= p.probability {
        return (image.clone(), label.clone());
    }
    let alpha = draw_uniform(rng, p.alpha_range);
    let sigma = draw_uniform(rng, p.sigma_range);
    let (h, w) = image.dim();
    let mut dy = Array2::<f64>::zeros((h, w));
    let mut dx = Array2::<f64>::zeros((h, w));
    for v in dy.iter_mut() {
        *v = rng.gen_range(-1.0..=1.0);
    }
    for v in dx.iter_mut() {
        *v = rng.gen_range(-1.0..=1.0);
    }
    let mut dy = gaussian_smooth(&dy, alpha);
    let mut dx = gaussian_smooth(&dx, alpha);
    let mut max_mag = 0.0f64;
    for (a, b) in dy.iter().zip(dx.iter()) {
        max_mag = max_mag.max((a * a + b * b).sqrt());
    }
    // scale so the largest displacement is sigma / width pixels
    let scale = if max_mag > 0.0 {
        sigma / (h as f64) / max_mag
    } else {
        0.0
    };
    for v in dy.iter_mut() {
        *v *= scale;
    }
    for v in dx.iter_mut() {
        *v *= scale;
    }
    let affine = p.affine.map(|a| {
        let theta = draw_uniform(rng, [-a.max_rotate_deg, a.max_rotate_deg]).to_radians();
        let s = draw_uniform(rng, [1.0 - a.max_scale_delta, 1.0 + a.max_scale_delta]);
        (theta.cos() * s, theta.sin() * s)
    });
    let cy = (h as f64 - 1.0) / 2.0;
    let cx = (w as f64 - 1.0) / 2.0;
    let mut out_img = Array2::<f32>::zeros((h, w));
    let mut out_lab = Array2::<u8>::zeros((h, w));
    for r in 0..h {
        for c in 0..w {
            let (mut sy, mut sx) = (r as f64, c as f64);
            if let Some((ca, sa)) = affine {
                let ry = sy - cy;
                let rx = sx - cx;
                sy = cy + ca * ry - sa * rx;
                sx = cx + sa * ry + ca * rx;
            }
            sy += dy[[r, c]];
            sx += dx[[r, c]];
            out_img[[r, c]] = bilinear2(image, sy, sx);
            out_lab[[r, c]] = nearest2(label, sy, sx);
        }
    }
    (out_img, out_lab)
}
