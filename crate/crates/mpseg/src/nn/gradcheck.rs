//! Central finite-difference verification of analytic gradients, run at
//! f64. Checks every parameter element and every input element, the latter
//! covering parameter-free layers through their input gradients.

use ndarray::{Array3, Array4};

use super::graph::{Mode, NetworkGraph};
use super::loss::{apply_l2_grad, multi_output_ce};
use crate::error::Result;

pub const FD_STEP: f64 = 1e-5;
pub const GRAD_TOL: f64 = 1e-4;

#[derive(Debug, Clone, Copy)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub checked: usize,
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

fn loss_only(
    graph: &mut NetworkGraph<f64>,
    x: &Array4<f64>,
    labels: &Array3<u8>,
    l2: f64,
) -> Result<f64> {
    let tape = graph.forward(x, Mode::Train)?;
    let outputs = graph.output_activations(&tape);
    let (value, _) = multi_output_ce(graph, &outputs, labels, l2)?;
    Ok(value)
}

/// Compare analytic gradients of the mean cross-entropy (over all graph
/// outputs) plus L2 against central differences for every parameter and
/// input element. Returns the worst relative error.
pub fn check_graph(
    graph: &mut NetworkGraph<f64>,
    x: &Array4<f64>,
    labels: &Array3<u8>,
    l2: f64,
) -> Result<GradCheckReport> {
    let tape = graph.forward(x, Mode::Train)?;
    let outputs = graph.output_activations(&tape);
    let (_, dlogits) = multi_output_ce(graph, &outputs, labels, l2)?;
    let mut back = graph.backward(&tape, &dlogits)?;
    apply_l2_grad(graph, &mut back.param_grads, l2);
    drop(tape);

    // forward passes in train mode update batchnorm running buffers, which
    // never feed the train-mode loss; snapshot anyway so the graph is
    // returned unchanged
    let saved_buffers: Vec<_> = graph.buffers.iter().map(|b| b.value.clone()).collect();

    let mut max_rel = 0.0f64;
    let mut checked = 0usize;
    for pi in 0..graph.params.len() {
        for ei in 0..graph.params[pi].value.len() {
            let orig = graph.params[pi].value.as_slice_mut().unwrap()[ei];
            graph.params[pi].value.as_slice_mut().unwrap()[ei] = orig + FD_STEP;
            let up = loss_only(graph, x, labels, l2)?;
            graph.params[pi].value.as_slice_mut().unwrap()[ei] = orig - FD_STEP;
            let down = loss_only(graph, x, labels, l2)?;
            graph.params[pi].value.as_slice_mut().unwrap()[ei] = orig;
            let fd = (up - down) / (2.0 * FD_STEP);
            let an = back.param_grads[pi].as_slice().unwrap()[ei];
            max_rel = max_rel.max(rel_err(fd, an));
            checked += 1;
        }
    }
    let mut xp = x.clone();
    for ei in 0..xp.len() {
        let orig = xp.as_slice().unwrap()[ei];
        xp.as_slice_mut().unwrap()[ei] = orig + FD_STEP;
        let up = loss_only(graph, &xp, labels, l2)?;
        xp.as_slice_mut().unwrap()[ei] = orig - FD_STEP;
        let down = loss_only(graph, &xp, labels, l2)?;
        xp.as_slice_mut().unwrap()[ei] = orig;
        let fd = (up - down) / (2.0 * FD_STEP);
        let an = back.input_grad.as_slice().unwrap()[ei];
        max_rel = max_rel.max(rel_err(fd, an));
        checked += 1;
    }

    for (b, saved) in graph.buffers.iter_mut().zip(saved_buffers) {
        b.value = saved;
    }
    Ok(GradCheckReport {
        max_rel_err: max_rel,
        checked,
    })
}

/// Inputs with magnitudes in [0.5, 1.5] and random signs, keeping values
/// away from the ReLU kink for direct-input layers.
pub fn sample_input(shape: (usize, usize, usize, usize), seed: u64) -> Array4<f64> {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut x = Array4::<f64>::zeros(shape);
    for v in x.iter_mut() {
        let mag = rng.gen_range(0.5..=1.5);
        *v = if rng.gen::<bool>() { mag } else { -mag };
    }
    x
}

pub fn sample_labels(shape: (usize, usize, usize), classes: u8, seed: u64) -> Array3<u8> {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9);
    let mut y = Array3::<u8>::zeros(shape);
    for v in y.iter_mut() {
        *v = rng.gen_range(0..classes);
    }
    y
}

/// Finite-difference checks for every layer kind in isolation plus a
/// two-level composite with deep supervision; returns one report per graph.
pub fn standard_layer_checks(seed: u64) -> Result<Vec<(&'static str, GradCheckReport)>> {
    use super::graph::GraphBuilder;
    let mut out = Vec::new();

    {
        let mut b = GraphBuilder::<f64>::new(2, seed);
        let x = b.input();
        let c = b.conv(x, 2, 3, 3, true, "conv3");
        let mut g = b.finish(vec![c], 1);
        let xs = sample_input((2, 4, 4, 2), seed);
        let ys = sample_labels((2, 4, 4), 3, seed);
        out.push(("conv3x3", check_graph(&mut g, &xs, &ys, 0.0)?));
    }
    {
        let mut b = GraphBuilder::<f64>::new(2, seed);
        let x = b.input();
        let c = b.conv(x, 2, 3, 1, true, "conv1");
        let mut g = b.finish(vec![c], 1);
        let xs = sample_input((2, 4, 4, 2), seed);
        let ys = sample_labels((2, 4, 4), 3, seed);
        out.push(("conv1x1", check_graph(&mut g, &xs, &ys, 0.0)?));
    }
    {
        let mut b = GraphBuilder::<f64>::new(2, seed);
        let x = b.input();
        let c = b.conv_transpose(x, 2, 3, "convt");
        let mut g = b.finish(vec![c], 1);
        let xs = sample_input((2, 3, 3, 2), seed);
        let ys = sample_labels((2, 6, 6), 3, seed);
        out.push(("transposed_conv", check_graph(&mut g, &xs, &ys, 0.0)?));
    }
    {
        let mut b = GraphBuilder::<f64>::new(3, seed);
        let x = b.input();
        let n = b.batchnorm(x, 3, "bn");
        let mut g = b.finish(vec![n], 1);
        let xs = sample_input((2, 3, 3, 3), seed);
        let ys = sample_labels((2, 3, 3), 3, seed);
        out.push(("batchnorm", check_graph(&mut g, &xs, &ys, 0.0)?));
    }
    {
        let mut b = GraphBuilder::<f64>::new(3, seed);
        let x = b.input();
        let r = b.relu(x, "relu");
        let mut g = b.finish(vec![r], 1);
        let xs = sample_input((1, 3, 3, 3), seed);
        let ys = sample_labels((1, 3, 3), 3, seed);
        out.push(("relu", check_graph(&mut g, &xs, &ys, 0.0)?));
    }
    {
        let mut b = GraphBuilder::<f64>::new(3, seed);
        let x = b.input();
        let p = b.maxpool(x, 2, "pool");
        let mut g = b.finish(vec![p], 2);
        let xs = sample_input((1, 4, 4, 3), seed);
        let ys = sample_labels((1, 2, 2), 3, seed);
        out.push(("maxpool2x2", check_graph(&mut g, &xs, &ys, 0.0)?));
    }
    {
        let mut b = GraphBuilder::<f64>::new(3, seed);
        let x = b.input();
        let u = b.upsample_nearest(x, 2, "upn");
        let mut g = b.finish(vec![u], 1);
        let xs = sample_input((1, 2, 2, 3), seed);
        let ys = sample_labels((1, 4, 4), 3, seed);
        out.push(("upsample_nearest", check_graph(&mut g, &xs, &ys, 0.0)?));
    }
    {
        let mut b = GraphBuilder::<f64>::new(2, seed);
        let x = b.input();
        let u = b.upsample_bilinear(x, 2, "upb");
        let mut g = b.finish(vec![u], 1);
        let xs = sample_input((1, 3, 3, 2), seed);
        let ys = sample_labels((1, 6, 6), 2, seed);
        out.push(("upsample_bilinear", check_graph(&mut g, &xs, &ys, 0.0)?));
    }
    {
        let mut b = GraphBuilder::<f64>::new(2, seed);
        let x = b.input();
        let c = b.conv(x, 2, 2, 3, false, "branch");
        let cat = b.concat(&[x, c], "cat");
        let mut g = b.finish(vec![cat], 1);
        let xs = sample_input((1, 3, 3, 2), seed);
        let ys = sample_labels((1, 3, 3), 4, seed);
        out.push(("concat", check_graph(&mut g, &xs, &ys, 0.0)?));
    }
    {
        // two-level encoder/decoder with a deep-supervision head and L2
        let mut b = GraphBuilder::<f64>::new(1, seed);
        let x = b.input();
        let e0 = b.conv_bn_relu(x, 1, 4, 3, "enc0");
        let p = b.maxpool(e0, 2, "enc0.pool");
        let e1 = b.conv_bn_relu(p, 4, 8, 3, "enc1");
        let up = b.conv_transpose(e1, 8, 4, "dec0.up");
        let cat = b.concat(&[e0, up], "dec0.cat");
        let d0 = b.conv_bn_relu(cat, 8, 4, 3, "dec0");
        let head = b.conv(d0, 4, 3, 1, true, "head");
        let ds = b.conv(e1, 8, 3, 1, true, "ds_head");
        let ds_up = b.upsample_bilinear(ds, 2, "ds_head.up");
        let mut g = b.finish(vec![head, ds_up], 2);
        let xs = sample_input((2, 4, 4, 1), seed);
        let ys = sample_labels((2, 4, 4), 3, seed);
        out.push(("composite_deep_supervision", check_graph(&mut g, &xs, &ys, 1e-3)?));
    }
    Ok(out)
}
