//! Softmax, categorical cross-entropy (fused with its gradient), and the
//! L2 kernel penalty.

use ndarray::{Array3, Array4};

use super::graph::NetworkGraph;
use super::Scalar;
use crate::error::{Error, Result};

/// Per-pixel softmax over the channel axis, numerically stable.
pub fn softmax<T: Scalar>(logits: &Array4<T>) -> Array4<T> {
    let c = logits.dim().3;
    let mut out = logits.clone();
    let os = out.as_slice_mut().expect("standard layout");
    for px in os.chunks_exact_mut(c) {
        let mut m = px[0];
        for v in px.iter().skip(1) {
            if *v > m {
                m = *v;
            }
        }
        let mut sum = T::zero();
        for v in px.iter_mut() {
            *v = (*v - m).exp();
            sum += *v;
        }
        for v in px.iter_mut() {
            *v = *v / sum;
        }
    }
    out
}

#[derive(Debug)]
pub struct LossOut<T> {
    pub value: T,
    /// d(loss)/d(logits), already divided by the pixel count.
    pub dlogits: Array4<T>,
}

/// Mean per-pixel categorical cross-entropy between logits (B, H, W, C)
/// and integer labels (B, H, W), fused with its exact gradient.
pub fn softmax_ce<T: Scalar>(logits: &Array4<T>, labels: &Array3<u8>) -> Result<LossOut<T>> {
    let (b, h, w, c) = logits.dim();
    if labels.dim() != (b, h, w) {
        return Err(Error::data(format!(
            "label shape {:?} does not match logits {:?}",
            labels.dim(),
            (b, h, w)
        )));
    }
    let n_px = b * h * w;
    let inv_n = T::from_f64(1.0 / n_px as f64);
    let mut dlogits = logits.clone();
    let ds = dlogits.as_slice_mut().expect("standard layout");
    let ls = labels.as_slice().expect("standard layout");
    let mut loss = T::zero();
    for (px, &y) in ds.chunks_exact_mut(c).zip(ls) {
        let y = y as usize;
        if y >= c {
            return Err(Error::data(format!(
                "label {y} outside the valid class range [0, {})",
                c
            )));
        }
        let mut m = px[0];
        for v in px.iter().skip(1) {
            if *v > m {
                m = *v;
            }
        }
        let mut sum = T::zero();
        for v in px.iter() {
            sum += (*v - m).exp();
        }
        let lse = m + sum.ln();
        loss += lse - px[y];
        // gradient: (softmax - onehot) / n_px
        for (i, v) in px.iter_mut().enumerate() {
            let q = (*v - lse).exp();
            let target = if i == y { T::one() } else { T::zero() };
            *v = (q - target) * inv_n;
        }
    }
    Ok(LossOut {
        value: loss * inv_n,
        dlogits,
    })
}

/// Sum of squared convolution-kernel entries (biases and norm parameters
/// excluded).
pub fn l2_penalty<T: Scalar>(graph: &NetworkGraph<T>) -> T {
    let mut acc = T::zero();
    for p in &graph.params {
        if p.kernel {
            for v in p.value.iter() {
                acc += *v * *v;
            }
        }
    }
    acc
}

/// Add the L2 gradient 2*l2*theta for kernel parameters in place.
pub fn apply_l2_grad<T: Scalar>(
    graph: &NetworkGraph<T>,
    grads: &mut [ndarray::ArrayD<T>],
    l2: T,
) {
    if l2 == T::zero() {
        return;
    }
    let two_l2 = T::from_f64(2.0) * l2;
    for (p, g) in graph.params.iter().zip(grads.iter_mut()) {
        if p.kernel {
            for (gv, pv) in g.iter_mut().zip(p.value.iter()) {
                *gv += two_l2 * *pv;
            }
        }
    }
}

/// Training loss over one or more graph outputs (mean of per-output
/// cross-entropies, the deep-supervision convention) plus the L2 kernel
/// penalty. Returns the scalar and one gradient per output.
pub fn multi_output_ce<T: Scalar>(
    graph: &NetworkGraph<T>,
    outputs: &[&Array4<T>],
    labels: &Array3<u8>,
    l2: T,
) -> Result<(T, Vec<Array4<T>>)> {
    if outputs.is_empty() {
        return Err(Error::config("loss needs at least one output"));
    }
    let scale = T::from_f64(1.0 / outputs.len() as f64);
    let mut total = T::zero();
    let mut grads = Vec::with_capacity(outputs.len());
    for out in outputs {
        let LossOut { value, mut dlogits } = softmax_ce(*out, labels)?;
        total += value * scale;
        for v in dlogits.iter_mut() {
            *v *= scale;
        }
        grads.push(dlogits);
    }
    total += l2 * l2_penalty(graph);
    Ok((total, grads))
}
