//! Adam with bias correction; the default hyperparameters follow the
//! training recipe used throughout the pipeline.

use ndarray::ArrayD;

use super::graph::NetworkGraph;
use super::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Added to gradients as weight_decay * theta (plain L2-style decay).
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 5e-5,
            beta1: 0.9,
            beta2: 0.99,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct OptimState<T> {
    pub step: u64,
    m: Vec<ArrayD<T>>,
    v: Vec<ArrayD<T>>,
}

impl<T: Scalar> OptimState<T> {
    pub fn new(graph: &NetworkGraph<T>) -> Self {
        OptimState {
            step: 0,
            m: graph
                .params
                .iter()
                .map(|p| ArrayD::zeros(p.value.raw_dim()))
                .collect(),
            v: graph
                .params
                .iter()
                .map(|p| ArrayD::zeros(p.value.raw_dim()))
                .collect(),
        }
    }
}

/// One Adam update over every graph parameter.
/// theta -= lr * m_hat / (sqrt(v_hat) + eps).
pub fn adam_step<T: Scalar>(
    graph: &mut NetworkGraph<T>,
    grads: &[ArrayD<T>],
    state: &mut OptimState<T>,
    cfg: &AdamConfig,
) {
    assert_eq!(grads.len(), graph.params.len(), "gradient count mismatch");
    state.step += 1;
    let t = state.step as i32;
    let b1 = T::from_f64(cfg.beta1);
    let b2 = T::from_f64(cfg.beta2);
    let lr = T::from_f64(cfg.lr);
    let eps = T::from_f64(cfg.eps);
    let wd = T::from_f64(cfg.weight_decay);
    let c1 = T::one() - T::from_f64(cfg.beta1.powi(t));
    let c2 = T::one() - T::from_f64(cfg.beta2.powi(t));
    for ((p, g), (m, v)) in graph
        .params
        .iter_mut()
        .zip(grads)
        .zip(state.m.iter_mut().zip(state.v.iter_mut()))
    {
        for (((pv, gv), mv), vv) in p
            .value
            .iter_mut()
            .zip(g.iter())
            .zip(m.iter_mut())
            .zip(v.iter_mut())
        {
            let grad = *gv + wd * *pv;
            *mv = b1 * *mv + (T::one() - b1) * grad;
            *vv = b2 * *vv + (T::one() - b2) * grad * grad;
            let mhat = *mv / c1;
            let vhat = *vv / c2;
            *pv = *pv - lr * mhat / (vhat.sqrt() + eps);
        }
    }
}
