//! Per-fold training: slice sampling across planes, the epoch loop with
//! validation-Dice early stopping, per-plane prediction, and subject
//! evaluation.

use ndarray::{Array2, Array3, Array4, ArrayD};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::fusion::{argmax_labels, fuse, FusionParams};
use crate::multiplanar::{extract_slices, map_back, PlaneSet, SliceStack, TargetGrid};
use crate::nn::{
    adam_step, apply_l2_grad, multi_output_ce, softmax, AdamConfig, LayerKind, Mode,
    NetworkGraph, OptimState, Scalar,
};
use crate::unetzoo::build;
use crate::volume::{dice, robust_scale, Volume};

use super::experiment::ExperimentConfig;

// Distinct rng streams derived from the fold seed.
const TRAIN_STREAM: u64 = 0x7452_41494e;
const VAL_STREAM: u64 = 0x56_414c;

/// A subject prepared for one fold: robust-scaled intensity plus labels.
pub struct SubjectData {
    pub id: String,
    pub intensity: Volume,
    pub labels: Volume,
}

impl SubjectData {
    pub fn prepare(id: &str, intensity: &Volume, labels: &Volume) -> Result<SubjectData> {
        if intensity.shape() != labels.shape() {
            return Err(Error::data(format!(
                "subject {id}: image shape {:?} does not match labels {:?}",
                intensity.shape(),
                labels.shape()
            )));
        }
        let (scaled, _) = robust_scale(intensity)?;
        Ok(SubjectData {
            id: id.to_string(),
            intensity: scaled,
            labels: labels.clone(),
        })
    }
}

/// One slice stack per view for a subject.
pub struct SubjectStacks {
    pub id: String,
    pub stacks: Vec<SliceStack>,
}

impl SubjectStacks {
    pub fn extract(
        subject: &SubjectData,
        ps: &PlaneSet,
        target_size: Option<(usize, usize)>,
        grid_spacing: Option<f64>,
    ) -> Result<SubjectStacks> {
        let mut stacks = Vec::with_capacity(ps.k());
        for v in 0..ps.k() {
            stacks.push(extract_slices(
                &subject.intensity,
                Some(&subject.labels),
                ps,
                v,
                target_size,
                grid_spacing,
            )?);
        }
        Ok(SubjectStacks {
            id: subject.id.clone(),
            stacks,
        })
    }
}

/// Track the best validation score; stop after `patience` epochs without
/// improvement. Improvement is strict.
#[derive(Debug)]
pub struct EarlyStopper {
    patience: usize,
    pub best: f64,
    pub best_epoch: usize,
    since: usize,
}

impl EarlyStopper {
    pub fn new(patience: usize) -> EarlyStopper {
        EarlyStopper {
            patience,
            best: f64::NEG_INFINITY,
            best_epoch: 0,
            since: 0,
        }
    }

    /// Returns (improved, stop). Epochs are 1-based.
    pub fn observe(&mut self, epoch: usize, score: f64) -> (bool, bool) {
        if score > self.best {
            self.best = score;
            self.best_epoch = epoch;
            self.since = 0;
            (true, false)
        } else {
            self.since += 1;
            (false, self.since >= self.patience)
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct EpochRow {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_dice: f64,
    pub improved: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct TrainLog {
    pub rows: Vec<EpochRow>,
    pub best_epoch: usize,
    pub best_val_dice: f64,
    pub stopped_early: bool,
    pub batch_size: usize,
}

impl TrainLog {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,train_loss,val_dice,improved\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{}\n",
                r.epoch, r.train_loss, r.val_dice, r.improved
            ));
        }
        out
    }
}

fn node_shapes<T: Scalar>(g: &NetworkGraph<T>, h: usize, w: usize) -> Vec<(usize, usize, usize)> {
    let mut dims: Vec<(usize, usize, usize)> = Vec::with_capacity(g.nodes.len());
    for node in &g.nodes {
        let d = match &node.kind {
            LayerKind::Input => (h, w, g.in_channels),
            LayerKind::Conv { w: wid, .. } | LayerKind::ConvTranspose { w: wid } => {
                let src = dims[node.inputs[0]];
                let co = g.params[*wid].value.shape()[3];
                match &node.kind {
                    LayerKind::ConvTranspose { .. } => (src.0 * 2, src.1 * 2, co),
                    _ => (src.0, src.1, co),
                }
            }
            LayerKind::BatchNorm { .. } | LayerKind::Relu => dims[node.inputs[0]],
            LayerKind::MaxPool { k } => {
                let src = dims[node.inputs[0]];
                (src.0 / k, src.1 / k, src.2)
            }
            LayerKind::UpsampleNearest { f } | LayerKind::UpsampleBilinear { f } => {
                let src = dims[node.inputs[0]];
                (src.0 * f, src.1 * f, src.2)
            }
            LayerKind::Concat => {
                let first = dims[node.inputs[0]];
                let c: usize = node.inputs.iter().map(|&i| dims[i].2).sum();
                (first.0, first.1, c)
            }
        };
        dims.push(d);
    }
    dims
}

/// Approximate working-set bytes of one training step: activations plus
/// their gradients, parameters with gradient and Adam moment mirrors.
pub fn estimate_step_bytes<T: Scalar>(
    g: &NetworkGraph<T>,
    batch: usize,
    h: usize,
    w: usize,
) -> u64 {
    let act_elems: u64 = node_shapes(g, h, w)
        .iter()
        .map(|&(nh, nw, nc)| (batch * nh * nw * nc) as u64)
        .sum();
    let param_elems = g.param_count() as u64;
    (2 * act_elems + 4 * param_elems) * T::BYTES as u64
}

/// Halve the starting batch size until the estimated step fits the memory
/// budget; sizes below 4 are not attempted.
pub fn pick_batch_size<T: Scalar>(
    g: &NetworkGraph<T>,
    h: usize,
    w: usize,
    start: usize,
    budget_bytes: u64,
) -> Result<usize> {
    let mut b = start;
    while b >= 4 {
        if estimate_step_bytes(g, b, h, w) <= budget_bytes {
            return Ok(b);
        }
        b /= 2;
    }
    Err(Error::config(format!(
        "even a batch of 4 exceeds the memory budget of {budget_bytes} bytes"
    )))
}

struct SliceRef<'a> {
    stacks: &'a [SubjectStacks],
}

impl<'a> SliceRef<'a> {
    /// Uniform over subject, then view, then slice index.
    fn sample<R: Rng>(&self, rng: &mut R) -> (usize, usize, usize) {
        let s = rng.gen_range(0..self.stacks.len());
        let v = rng.gen_range(0..self.stacks[s].stacks.len());
        let n = self.stacks[s].stacks[v].images.dim().0;
        let i = rng.gen_range(0..n);
        (s, v, i)
    }

    fn slice_pair(&self, (s, v, i): (usize, usize, usize)) -> (Array2<f32>, Array2<u8>) {
        let stack = &self.stacks[s].stacks[v];
        let img = stack.images.index_axis(ndarray::Axis(0), i).to_owned();
        let lbl = stack
            .labels
            .as_ref()
            .expect("training stacks carry labels")
            .index_axis(ndarray::Axis(0), i)
            .to_owned();
        (img, lbl)
    }
}

fn to_batch<T: Scalar>(images: &[Array2<f32>], labels: &[Array2<u8>]) -> (Array4<T>, Array3<u8>) {
    let b = images.len();
    let (h, w) = images[0].dim();
    let mut x = Array4::<T>::zeros((b, h, w, 1));
    let mut y = Array3::<u8>::zeros((b, h, w));
    for (i, (img, lbl)) in images.iter().zip(labels).enumerate() {
        for r in 0..h {
            for c in 0..w {
                x[[i, r, c, 0]] = T::from_f64(img[[r, c]] as f64);
                y[[i, r, c]] = lbl[[r, c]];
            }
        }
    }
    (x, y)
}

fn check_stack_dims(sets: &[&[SubjectStacks]]) -> Result<(usize, usize)> {
    let mut dims: Option<(usize, usize)> = None;
    for set in sets {
        for subject in *set {
            for stack in &subject.stacks {
                let (_, h, w) = stack.images.dim();
                match dims {
                    None => dims = Some((h, w)),
                    Some(d) if d != (h, w) => {
                        return Err(Error::data(format!(
                            "slice size {:?} of subject {} differs from {:?}; set a fixed target size",
                            (h, w),
                            subject.id,
                            d
                        )))
                    }
                    _ => {}
                }
                if stack.labels.is_none() {
                    return Err(Error::data(format!(
                        "subject {} has unlabeled stacks",
                        subject.id
                    )));
                }
            }
        }
    }
    dims.ok_or_else(|| Error::data("no slice stacks to train on"))
}

/// Dice from aggregated pixel counts; empty-everywhere classes score 1.
fn dice_from_counts(inter: u64, np: u64, nt: u64) -> f64 {
    if np + nt == 0 {
        1.0
    } else {
        2.0 * inter as f64 / (np + nt) as f64
    }
}

/// Train one fold's network. Every epoch samples
/// `train_images_per_epoch` slices uniformly over (subject, view, slice)
/// with augmentation, then scores mean foreground Dice on
/// `val_images_per_epoch` sampled validation slices; the best-Dice
/// parameters are restored before returning.
pub fn train_fold<T: Scalar>(
    cfg: &ExperimentConfig,
    train: &[SubjectStacks],
    val: &[SubjectStacks],
    fold_seed: u64,
) -> Result<(NetworkGraph<T>, TrainLog)> {
    cfg.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::data("training needs non-empty train and val sets"));
    }
    let (h, w) = check_stack_dims(&[train, val])?;
    let classes = cfg.arch.num_classes;

    let mut graph = build::<T>(&cfg.arch, fold_seed)?;
    let batch = pick_batch_size(&graph, h, w, cfg.batch_size, cfg.memory_budget_bytes)?;
    let mut opt = OptimState::new(&graph);
    let adam = AdamConfig {
        lr: cfg.learning_rate,
        ..AdamConfig::default()
    };
    let l2 = T::from_f64(cfg.l2);

    let mut train_rng = ChaCha8Rng::seed_from_u64(fold_seed ^ TRAIN_STREAM);
    let train_ref = SliceRef { stacks: train };
    let val_ref = SliceRef { stacks: val };

    let mut stopper = EarlyStopper::new(cfg.patience);
    let mut rows = Vec::new();
    let mut best: Option<(Vec<ArrayD<T>>, Vec<ArrayD<T>>)> = None;
    let mut stopped_early = false;

    for epoch in 1..=cfg.max_epochs {
        // training pass
        let mut loss_sum = 0.0f64;
        let mut seen = 0usize;
        while seen < cfg.train_images_per_epoch {
            let b = batch.min(cfg.train_images_per_epoch - seen);
            let mut imgs = Vec::with_capacity(b);
            let mut lbls = Vec::with_capacity(b);
            for _ in 0..b {
                let pick = train_ref.sample(&mut train_rng);
                let (img, lbl) = train_ref.slice_pair(pick);
                let (img, lbl) =
                    crate::augment::elastic_deform(&img, &lbl, &cfg.augmentation, &mut train_rng);
                imgs.push(img);
                lbls.push(lbl);
            }
            let (x, y) = to_batch::<T>(&imgs, &lbls);
            let tape = graph.forward(&x, Mode::Train)?;
            let outs = graph.output_activations(&tape);
            let (loss, out_grads) = multi_output_ce(&graph, &outs, &y, l2)?;
            let mut back = graph.backward(&tape, &out_grads)?;
            apply_l2_grad(&graph, &mut back.param_grads, l2);
            adam_step(&mut graph, &back.param_grads, &mut opt, &adam);
            loss_sum += loss.to_f64() * b as f64;
            seen += b;
        }
        let train_loss = loss_sum / cfg.train_images_per_epoch as f64;

        // validation pass: aggregate per-class pixel counts over sampled
        // slices, then mean foreground Dice. The sample is re-drawn from
        // the same seed every epoch so epochs compare on identical slices.
        let mut val_rng = ChaCha8Rng::seed_from_u64(fold_seed ^ VAL_STREAM);
        let mut inter = vec![0u64; classes];
        let mut np = vec![0u64; classes];
        let mut nt = vec![0u64; classes];
        let mut seen_val = 0usize;
        while seen_val < cfg.val_images_per_epoch {
            let b = batch.min(cfg.val_images_per_epoch - seen_val);
            let mut imgs = Vec::with_capacity(b);
            let mut lbls = Vec::with_capacity(b);
            for _ in 0..b {
                let pick = val_ref.sample(&mut val_rng);
                let (img, lbl) = val_ref.slice_pair(pick);
                imgs.push(img);
                lbls.push(lbl);
            }
            let (x, y) = to_batch::<T>(&imgs, &lbls);
            let tape = graph.forward(&x, Mode::Infer)?;
            let outs = graph.output_activations(&tape);
            let logits = outs[0];
            for bi in 0..b {
                for r in 0..h {
                    for c in 0..w {
                        let mut arg = 0usize;
                        for ci in 1..classes {
                            if logits[[bi, r, c, ci]] > logits[[bi, r, c, arg]] {
                                arg = ci;
                            }
                        }
                        let t = y[[bi, r, c]] as usize;
                        np[arg] += 1;
                        nt[t] += 1;
                        if arg == t {
                            inter[t] += 1;
                        }
                    }
                }
            }
            seen_val += b;
        }
        let val_dice = (1..classes)
            .map(|c| dice_from_counts(inter[c], np[c], nt[c]))
            .sum::<f64>()
            / (classes - 1) as f64;

        let (improved, stop) = stopper.observe(epoch, val_dice);
        if improved {
            best = Some((
                graph.params.iter().map(|p| p.value.clone()).collect(),
                graph.buffers.iter().map(|b| b.value.clone()).collect(),
            ));
        }
        rows.push(EpochRow {
            epoch,
            train_loss,
            val_dice,
            improved,
        });
        if stop {
            stopped_early = true;
            break;
        }
    }

    let (params, buffers) = best.expect("at least one epoch ran");
    for (p, v) in graph.params.iter_mut().zip(params) {
        p.value = v;
    }
    for (b, v) in graph.buffers.iter_mut().zip(buffers) {
        b.value = v;
    }
    Ok((
        graph,
        TrainLog {
            rows,
            best_epoch: stopper.best_epoch,
            best_val_dice: stopper.best,
            stopped_early,
            batch_size: batch,
        },
    ))
}

/// Per-plane probabilistic prediction of one subject: extract each view's
/// slice stack, run the network in inference mode, softmax, and map every
/// stack back onto the subject grid. Returns one probability volume per
/// view.
pub fn predict_subject<T: Scalar>(
    graph: &mut NetworkGraph<T>,
    intensity: &Volume,
    ps: &PlaneSet,
    target_size: Option<(usize, usize)>,
    grid_spacing: Option<f64>,
    batch: usize,
) -> Result<Vec<Array4<f32>>> {
    let target = TargetGrid::of(intensity);
    let classes = {
        let shapes = node_shapes(graph, graph.spatial_divisor, graph.spatial_divisor);
        shapes[graph.outputs[0]].2
    };
    let mut volumes = Vec::with_capacity(ps.k());
    for v in 0..ps.k() {
        let stack = extract_slices(intensity, None, ps, v, target_size, grid_spacing)?;
        let (ns, h, w) = stack.images.dim();
        let mut preds = Array4::<f32>::zeros((ns, h, w, classes));
        let mut s0 = 0usize;
        while s0 < ns {
            let b = batch.min(ns - s0);
            let mut x = Array4::<T>::zeros((b, h, w, 1));
            for bi in 0..b {
                for r in 0..h {
                    for c in 0..w {
                        x[[bi, r, c, 0]] = T::from_f64(stack.images[[s0 + bi, r, c]] as f64);
                    }
                }
            }
            let tape = graph.forward(&x, Mode::Infer)?;
            let probs = softmax(graph.output_activations(&tape)[0]);
            for bi in 0..b {
                for r in 0..h {
                    for c in 0..w {
                        for ci in 0..classes {
                            preds[[s0 + bi, r, c, ci]] = probs[[bi, r, c, ci]].to_f64() as f32;
                        }
                    }
                }
            }
            s0 += b;
        }
        volumes.push(map_back(&preds, &stack.geom, &target)?);
    }
    Ok(volumes)
}

/// Dice of every plane and of the fused prediction against the truth,
/// per class (background included) plus the foreground mean.
#[derive(Debug, Clone, Serialize)]
pub struct SubjectEval {
    pub id: String,
    /// per_plane[view][class]
    pub per_plane: Vec<Vec<f64>>,
    pub fused: Vec<f64>,
}

impl SubjectEval {
    pub fn mean_fg(scores: &[f64]) -> f64 {
        scores[1..].iter().sum::<f64>() / (scores.len() - 1) as f64
    }
}

pub fn evaluate_subject(
    id: &str,
    prob_volumes: &[Array4<f32>],
    truth: &Volume,
    fp: &FusionParams,
) -> Result<SubjectEval> {
    let classes = fp.n_classes() as u8;
    let as_volume = |labels: ndarray::Array3<u8>| {
        Volume::new_label(labels, truth.spacing, truth.origin, classes - 1)
    };
    let mut per_plane = Vec::with_capacity(prob_volumes.len());
    for probs in prob_volumes {
        let pred = as_volume(argmax_labels(probs));
        let mut scores = Vec::with_capacity(classes as usize);
        for c in 0..classes {
            scores.push(dice(&pred, truth, c)?);
        }
        per_plane.push(scores);
    }
    let refs: Vec<&Array4<f32>> = prob_volumes.iter().collect();
    let (_, fused_labels) = fuse(&refs, fp)?;
    let fused_vol = as_volume(fused_labels);
    let mut fused = Vec::with_capacity(classes as usize);
    for c in 0..classes {
        fused.push(dice(&fused_vol, truth, c)?);
    }
    Ok(SubjectEval {
        id: id.to_string(),
        per_plane,
        fused,
    })
}
