//! Builders for the 2D segmentation cores (UNet, UNet2+, UNet3+, with
//! optional deep supervision) plus closed-form per-decoder-stage parameter
//! accounting that must match the constructed graphs exactly.
//!
//! Width schedule: encoder stage j (0-based) carries base_channels * 2^(j+1)
//! channels; the optional sqrt(2) scale on the plain UNet multiplies each
//! stage width and rounds half-up. UNet3+ aggregates every scale at a fixed
//! 64 channels per source, so its decoder nodes all carry 64*N channels;
//! its bottleneck is first projected to that depth once and then reused by
//! every decoder stage.
//!
//! Block convention: every non-head convolution is conv-BN-ReLU with a 3x3
//! kernel; an encoder or decoder node applies two such blocks (one
//! aggregation conv after the skip concat, one refinement conv). Upsampling
//! into UNet/UNet2+ nodes is a 3x3 stride-2 transposed conv (+BN+ReLU);
//! UNet3+ scales with bilinear resize / max-pool before its source convs.
//! Heads are 1x1 convs with bias producing num_classes logit channels.
//!
//! Per-stage kernel counts, with d_j the stage width, N the level count,
//! F=3, and D = 64N:
//!   unet   stage j: F^2 * (d_j*d_{j+1} + 3*d_j^2)
//!   unet2p stage j: F^2 * (d_{j+1}*d_j + (N+1-j)*d_j^2)
//!   unet3p stage j: F^2 * ((sum_{m<=j} d_m + (N-1-j)*D)*64 + D^2)
//! The unet2p count covers the decoder-column node only; the dense
//! intermediate-grid nodes are tagged mid{j}_{m} and reported separately.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{GraphBuilder, NetworkGraph, NodeId, Scalar};

/// Fixed per-source aggregation width of UNet3+ decoder stages.
pub const UNET3P_AGG_WIDTH: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Unet,
    Unet2p,
    Unet3p,
}

impl Variant {
    pub fn as_str(&self) -> &'static str {
        match self {
            Variant::Unet => "unet",
            Variant::Unet2p => "unet2p",
            Variant::Unet3p => "unet3p",
        }
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Variant> {
        match s {
            "unet" => Ok(Variant::Unet),
            "unet2p" => Ok(Variant::Unet2p),
            "unet3p" => Ok(Variant::Unet3p),
            other => Err(Error::config(format!(
                "unknown variant {other:?}; expected unet, unet2p, or unet3p"
            ))),
        }
    }
}

fn default_levels() -> usize {
    5
}
fn default_base() -> usize {
    32
}
fn default_input_channels() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchSpec {
    pub variant: Variant,
    #[serde(default = "default_levels")]
    pub levels: usize,
    #[serde(default = "default_base")]
    pub base_channels: usize,
    #[serde(default)]
    pub deep_supervision: bool,
    #[serde(default = "default_input_channels")]
    pub input_channels: usize,
    /// Output classes including background (K+1).
    pub num_classes: usize,
    #[serde(default)]
    pub unet_sqrt2_scale: bool,
}

impl ArchSpec {
    pub fn validate(&self) -> Result<()> {
        if self.levels < 2 {
            return Err(Error::config(format!(
                "levels must be at least 2, got {}",
                self.levels
            )));
        }
        if self.base_channels < 1 {
            return Err(Error::config("base_channels must be at least 1"));
        }
        if self.input_channels < 1 {
            return Err(Error::config("input_channels must be at least 1"));
        }
        if self.num_classes < 2 {
            return Err(Error::config(format!(
                "num_classes must be at least 2 (including background), got {}",
                self.num_classes
            )));
        }
        if self.deep_supervision && self.variant == Variant::Unet {
            return Err(Error::config(
                "deep_supervision is not valid for the plain unet variant",
            ));
        }
        if self.unet_sqrt2_scale && self.variant != Variant::Unet {
            return Err(Error::config(
                "unet_sqrt2_scale applies to the plain unet variant only",
            ));
        }
        Ok(())
    }

    /// Channel width of stage j; sqrt(2)-scaled widths round half-up.
    pub fn width(&self, j: usize) -> usize {
        let w = self.base_channels << (j + 1);
        if self.unet_sqrt2_scale {
            (w as f64 * std::f64::consts::SQRT_2 + 0.5).floor() as usize
        } else {
            w
        }
    }

    /// UNet3+ decoder node depth (64 per aggregated scale).
    pub fn decoder_depth(&self) -> usize {
        UNET3P_AGG_WIDTH * self.levels
    }

    pub fn spatial_divisor(&self) -> usize {
        1 << (self.levels - 1)
    }
}

/// Closed-form convolution-kernel parameter count of decoder stage j
/// (0 <= j < N-1); biases and batchnorm are not part of the formulas.
pub fn formula_params(spec: &ArchSpec, j: usize) -> Result<u64> {
    spec.validate()?;
    let n = spec.levels;
    if j >= n - 1 {
        return Err(Error::config(format!(
            "decoder stage {j} out of range: variant has stages 0..{}",
            n - 1
        )));
    }
    let f2 = 9u64;
    let d = |i: usize| spec.width(i) as u64;
    let count = match spec.variant {
        Variant::Unet => f2 * (d(j) * d(j + 1) + 3 * d(j) * d(j)),
        Variant::Unet2p => f2 * (d(j + 1) * d(j) + (n as u64 + 1 - j as u64) * d(j) * d(j)),
        Variant::Unet3p => {
            let depth = spec.decoder_depth() as u64;
            let enc_sum: u64 = (0..=j).map(d).sum();
            let agg = UNET3P_AGG_WIDTH as u64;
            f2 * ((enc_sum + (n as u64 - 1 - j as u64) * depth) * agg + depth * depth)
        }
    };
    Ok(count)
}

fn block<T: Scalar>(
    b: &mut GraphBuilder<T>,
    input: NodeId,
    ci: usize,
    co: usize,
    tag: &str,
) -> NodeId {
    let c1 = b.conv_bn_relu(input, ci, co, 3, &format!("{tag}.conv1"));
    b.conv_bn_relu(c1, co, co, 3, &format!("{tag}.conv2"))
}

fn up_block<T: Scalar>(
    b: &mut GraphBuilder<T>,
    input: NodeId,
    ci: usize,
    co: usize,
    tag: &str,
) -> NodeId {
    let t = b.conv_transpose(input, ci, co, tag);
    let n = b.batchnorm(t, co, tag);
    b.relu(n, tag)
}

/// Encoder chain shared by all variants: enc{j} blocks with 2x2 max-pool
/// between stages. Returns one node per stage.
fn encoder<T: Scalar>(b: &mut GraphBuilder<T>, spec: &ArchSpec) -> Vec<NodeId> {
    let x = b.input();
    let mut enc = Vec::with_capacity(spec.levels);
    for j in 0..spec.levels {
        let (src, ci) = if j == 0 {
            (x, spec.input_channels)
        } else {
            let p = b.maxpool(enc[j - 1], 2, &format!("enc{j}.pool"));
            (p, spec.width(j - 1))
        };
        enc.push(block(b, src, ci, spec.width(j), &format!("enc{j}")));
    }
    enc
}

fn head<T: Scalar>(
    b: &mut GraphBuilder<T>,
    input: NodeId,
    ci: usize,
    classes: usize,
    tag: &str,
) -> NodeId {
    b.conv(input, ci, classes, 1, true, tag)
}

/// Build the network graph for a spec. The seed drives He-normal weight
/// initialization. Output 0 is always the primary full-resolution head;
/// deep supervision appends auxiliary heads, every one shaped (B, H, W,
/// num_classes).
pub fn build<T: Scalar>(spec: &ArchSpec, seed: u64) -> Result<NetworkGraph<T>> {
    build_with_init(spec, seed, true)
}

/// As [`build`], optionally skipping weight sampling (zeros) when only the
/// structure or parameter counts are needed.
pub fn build_with_init<T: Scalar>(
    spec: &ArchSpec,
    seed: u64,
    init: bool,
) -> Result<NetworkGraph<T>> {
    spec.validate()?;
    let mut b = GraphBuilder::<T>::new(spec.input_channels, seed);
    if !init {
        b = b.with_zero_init();
    }
    let n = spec.levels;
    let k = spec.num_classes;
    let graph = match spec.variant {
        Variant::Unet => {
            let enc = encoder(&mut b, spec);
            let mut de = enc[n - 1];
            let mut de_width = spec.width(n - 1);
            for j in (0..n - 1).rev() {
                let tag = format!("dec{j}");
                let w = spec.width(j);
                let up = up_block(&mut b, de, de_width, w, &format!("{tag}.up"));
                let cat = b.concat(&[enc[j], up], &format!("{tag}.cat"));
                let c1 = b.conv_bn_relu(cat, 2 * w, w, 3, &format!("{tag}.conv1"));
                de = b.conv_bn_relu(c1, w, w, 3, &format!("{tag}.conv2"));
                de_width = w;
            }
            let h = head(&mut b, de, de_width, k, "head");
            b.finish(vec![h], spec.spatial_divisor())
        }
        Variant::Unet2p => {
            // grid[j][m]: m=0 encoder column, m=N-1-j decoder column
            let enc = encoder(&mut b, spec);
            let mut grid: Vec<Vec<NodeId>> = enc.iter().map(|&e| vec![e]).collect();
            for m in 1..n {
                for j in 0..n - m {
                    let w = spec.width(j);
                    let tag = if m == n - 1 - j {
                        format!("dec{j}")
                    } else {
                        format!("mid{j}_{m}")
                    };
                    let up = up_block(
                        &mut b,
                        grid[j + 1][m - 1],
                        spec.width(j + 1),
                        w,
                        &format!("{tag}.up"),
                    );
                    let mut inputs: Vec<NodeId> = grid[j][0..m].to_vec();
                    inputs.push(up);
                    let cat = b.concat(&inputs, &format!("{tag}.cat"));
                    let c1 = b.conv_bn_relu(cat, (m + 1) * w, w, 3, &format!("{tag}.conv1"));
                    let c2 = b.conv_bn_relu(c1, w, w, 3, &format!("{tag}.conv2"));
                    grid[j].push(c2);
                }
            }
            let h = head(&mut b, grid[0][n - 1], spec.width(0), k, "head");
            let mut outputs = vec![h];
            if spec.deep_supervision {
                for j in 0..n - 1 {
                    for m in 1..n - j {
                        if j == 0 && m == n - 1 {
                            continue; // the primary head covers this node
                        }
                        let tag = format!("ds{j}_{m}");
                        let hc = head(&mut b, grid[j][m], spec.width(j), k, &tag);
                        let out = if j > 0 {
                            b.upsample_bilinear(hc, 1 << j, &format!("{tag}.up"))
                        } else {
                            hc
                        };
                        outputs.push(out);
                    }
                }
            }
            b.finish(outputs, spec.spatial_divisor())
        }
        Variant::Unet3p => {
            let enc = encoder(&mut b, spec);
            let depth = spec.decoder_depth();
            let agg = UNET3P_AGG_WIDTH;
            let proj = block_single(&mut b, enc[n - 1], spec.width(n - 1), depth, "proj");
            let mut de: Vec<Option<NodeId>> = vec![None; n - 1];
            for j in (0..n - 1).rev() {
                let tag = format!("dec{j}");
                let mut sources = Vec::new();
                for m in 0..=j {
                    let src = if m < j {
                        b.maxpool(enc[m], 1 << (j - m), &format!("{tag}.from_enc{m}.pool"))
                    } else {
                        enc[m]
                    };
                    sources.push(b.conv_bn_relu(
                        src,
                        spec.width(m),
                        agg,
                        3,
                        &format!("{tag}.from_enc{m}"),
                    ));
                }
                for m in j + 1..n - 1 {
                    let up = b.upsample_bilinear(
                        de[m].expect("deeper stage built"),
                        1 << (m - j),
                        &format!("{tag}.from_dec{m}.up"),
                    );
                    sources.push(b.conv_bn_relu(up, depth, agg, 3, &format!("{tag}.from_dec{m}")));
                }
                let up = b.upsample_bilinear(proj, 1 << (n - 1 - j), &format!("{tag}.from_proj.up"));
                sources.push(b.conv_bn_relu(up, depth, agg, 3, &format!("{tag}.from_proj")));
                let cat = b.concat(&sources, &format!("{tag}.cat"));
                de[j] = Some(b.conv_bn_relu(cat, depth, depth, 3, &format!("{tag}.fuse")));
            }
            let h = head(&mut b, de[0].unwrap(), depth, k, "head");
            let mut outputs = vec![h];
            if spec.deep_supervision {
                for (j, node) in de.iter().enumerate().skip(1) {
                    let tag = format!("ds_dec{j}");
                    let hc = head(&mut b, node.unwrap(), depth, k, &tag);
                    outputs.push(b.upsample_bilinear(hc, 1 << j, &format!("{tag}.up")));
                }
                let hc = head(&mut b, proj, depth, k, "ds_proj");
                outputs.push(b.upsample_bilinear(hc, 1 << (n - 1), "ds_proj.up"));
            }
            b.finish(outputs, spec.spatial_divisor())
        }
    };
    Ok(graph)
}

/// One conv-BN-ReLU (the bottleneck projection uses a single block).
fn block_single<T: Scalar>(
    b: &mut GraphBuilder<T>,
    input: NodeId,
    ci: usize,
    co: usize,
    tag: &str,
) -> NodeId {
    b.conv_bn_relu(input, ci, co, 3, tag)
}

/// Parameter tally for one stage tag: convolution-kernel entries versus
/// everything else (biases, batchnorm scale/shift).
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct StageCount {
    pub stage: String,
    pub kernel_params: u64,
    pub other_params: u64,
}

fn stage_of(param_name: &str) -> &str {
    param_name.split('.').next().unwrap_or(param_name)
}

/// Exact parameter totals grouped by stage tag (the prefix before the
/// first dot in each parameter name), sorted by stage name.
pub fn count_params<T: Scalar>(g: &NetworkGraph<T>) -> (u64, Vec<StageCount>) {
    let mut stages: std::collections::BTreeMap<String, (u64, u64)> = Default::default();
    let mut total = 0u64;
    for p in &g.params {
        let n = p.value.len() as u64;
        total += n;
        let entry = stages.entry(stage_of(&p.name).to_string()).or_default();
        if p.kernel {
            entry.0 += n;
        } else {
            entry.1 += n;
        }
    }
    let counts = stages
        .into_iter()
        .map(|(stage, (kernel_params, other_params))| StageCount {
            stage,
            kernel_params,
            other_params,
        })
        .collect();
    (total, counts)
}

pub fn stage_kernel_count(counts: &[StageCount], stage: &str) -> u64 {
    counts
        .iter()
        .find(|c| c.stage == stage)
        .map(|c| c.kernel_params)
        .unwrap_or(0)
}

/// CSV audit: per decoder stage, the closed-form kernel count, the count
/// from the constructed graph, and their difference.
pub fn params_csv(spec: &ArchSpec) -> Result<String> {
    spec.validate()?;
    let g = build_with_init::<f32>(spec, 0, false)?;
    let (total, counts) = count_params(&g);
    let mut out = String::from("variant,stage,formula_kernel,graph_kernel,delta,other_params\n");
    for j in 0..spec.levels - 1 {
        let stage = format!("dec{j}");
        let formula = formula_params(spec, j)?;
        let graph = stage_kernel_count(&counts, &stage);
        let other: u64 = counts
            .iter()
            .find(|c| c.stage == stage)
            .map(|c| c.other_params)
            .unwrap_or(0);
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            spec.variant.as_str(),
            stage,
            formula,
            graph,
            graph as i64 - formula as i64,
            other
        ));
    }
    out.push_str(&format!(
        "{},total,,{},,{}\n",
        spec.variant.as_str(),
        total,
        0
    ));
    Ok(out)
}
