//! Static computation graphs: nodes in topological order, named parameters,
//! forward tape, and reverse-mode backward.

use ndarray::{Array1, Array4, ArrayD, Ix1, Ix4};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{ops, Scalar};
use crate::error::{Error, Result};

pub type NodeId = usize;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone)]
pub enum LayerKind {
    Input,
    /// Same-padding stride-1 convolution; parameter ids for weight and
    /// optional bias.
    Conv { w: usize, b: Option<usize>, k: usize },
    /// Transposed 3x3 stride-2 convolution (doubles spatial dims).
    ConvTranspose { w: usize },
    /// Batchnorm with trainable gamma/beta and running-stat buffer ids.
    BatchNorm {
        gamma: usize,
        beta: usize,
        rmean: usize,
        rvar: usize,
    },
    Relu,
    MaxPool { k: usize },
    UpsampleNearest { f: usize },
    UpsampleBilinear { f: usize },
    Concat,
}

#[derive(Debug, Clone)]
pub struct Node {
    pub kind: LayerKind,
    pub inputs: Vec<NodeId>,
    /// Stage tag used for parameter grouping and audits.
    pub tag: String,
}

#[derive(Debug, Clone)]
pub struct Param<T> {
    pub name: String,
    pub value: ArrayD<T>,
    /// Convolution kernels carry the L2 penalty; biases and norms do not.
    pub kernel: bool,
}

#[derive(Debug, Clone)]
pub struct Buffer<T> {
    pub name: String,
    pub value: ArrayD<T>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

#[derive(Debug, Clone)]
pub struct NetworkGraph<T> {
    pub nodes: Vec<Node>,
    pub params: Vec<Param<T>>,
    pub buffers: Vec<Buffer<T>>,
    pub outputs: Vec<NodeId>,
    /// Input spatial dims must be divisible by this (pooling depth).
    pub spatial_divisor: usize,
    pub in_channels: usize,
}

/// Activation record of one forward pass; required by backward.
#[derive(Debug)]
pub struct Tape<T> {
    pub acts: Vec<Array4<T>>,
    /// Batch statistics per batchnorm node (train mode only).
    bn_stats: Vec<Option<(Array1<T>, Array1<T>)>>,
    pub mode: Mode,
}

pub struct BackwardResult<T> {
    /// Indexed like `NetworkGraph::params`.
    pub param_grads: Vec<ArrayD<T>>,
    pub input_grad: Array4<T>,
}

impl<T: Scalar> NetworkGraph<T> {
    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn param_index(&self, name: &str) -> Option<usize> {
        self.params.iter().position(|p| p.name == name)
    }

    fn param4(&self, id: usize) -> ndarray::ArrayView4<'_, T> {
        self.params[id]
            .value
            .view()
            .into_dimensionality::<Ix4>()
            .expect("4d parameter")
    }

    fn param1(&self, id: usize) -> ndarray::ArrayView1<'_, T> {
        self.params[id]
            .value
            .view()
            .into_dimensionality::<Ix1>()
            .expect("1d parameter")
    }

    /// Run the graph. Train mode uses batch statistics in batchnorm nodes
    /// and updates their running buffers; infer mode reads the buffers and
    /// leaves the graph untouched.
    pub fn forward(&mut self, x: &Array4<T>, mode: Mode) -> Result<Tape<T>> {
        let (_, h, w, c) = x.dim();
        if c != self.in_channels {
            return Err(Error::data(format!(
                "input has {c} channels, graph expects {}",
                self.in_channels
            )));
        }
        let d = self.spatial_divisor;
        if h % d != 0 || w % d != 0 {
            return Err(Error::data(format!(
                "incompatible input size: {h}x{w} not divisible by {d}"
            )));
        }
        let n = self.nodes.len();
        let mut acts: Vec<Array4<T>> = Vec::with_capacity(n);
        let mut bn_stats: Vec<Option<(Array1<T>, Array1<T>)>> = vec![None; n];
        let mut bn_updates: Vec<(usize, usize, Array1<T>, Array1<T>)> = Vec::new();
        for (i, node) in self.nodes.iter().enumerate() {
            let out = match &node.kind {
                LayerKind::Input => x.clone(),
                LayerKind::Conv { w, b, k: _ } => {
                    let xin = &acts[node.inputs[0]];
                    let bias = b.map(|id| self.param1(id));
                    ops::conv2d_forward(xin, &self.param4(*w), bias.as_ref())?
                }
                LayerKind::ConvTranspose { w } => {
                    let xin = &acts[node.inputs[0]];
                    ops::convt2d_forward(xin, &self.param4(*w))?
                }
                LayerKind::BatchNorm {
                    gamma,
                    beta,
                    rmean,
                    rvar,
                } => {
                    let xin = &acts[node.inputs[0]];
                    let eps = T::from_f64(BN_EPS);
                    match mode {
                        Mode::Train => {
                            let (mean, var) = ops::batch_stats(xin);
                            let y = ops::batchnorm_apply(
                                xin,
                                &self.param1(*gamma),
                                &self.param1(*beta),
                                &mean.view(),
                                &var.view(),
                                eps,
                            );
                            bn_updates.push((*rmean, *rvar, mean.clone(), var.clone()));
                            bn_stats[i] = Some((mean, var));
                            y
                        }
                        Mode::Infer => {
                            let rm = self.buffers[*rmean]
                                .value
                                .view()
                                .into_dimensionality::<Ix1>()
                                .expect("1d buffer");
                            let rv = self.buffers[*rvar]
                                .value
                                .view()
                                .into_dimensionality::<Ix1>()
                                .expect("1d buffer");
                            ops::batchnorm_apply(
                                xin,
                                &self.param1(*gamma),
                                &self.param1(*beta),
                                &rm,
                                &rv,
                                eps,
                            )
                        }
                    }
                }
                LayerKind::Relu => ops::relu_forward(&acts[node.inputs[0]]),
                LayerKind::MaxPool { k } => ops::maxpool_forward(&acts[node.inputs[0]], *k)?,
                LayerKind::UpsampleNearest { f } => {
                    ops::upsample_nearest_forward(&acts[node.inputs[0]], *f)
                }
                LayerKind::UpsampleBilinear { f } => {
                    ops::upsample_bilinear_forward(&acts[node.inputs[0]], *f)
                }
                LayerKind::Concat => {
                    let xs: Vec<&Array4<T>> = node.inputs.iter().map(|&j| &acts[j]).collect();
                    ops::concat_forward(&xs)?
                }
            };
            acts.push(out);
        }
        if mode == Mode::Train {
            let mom = T::from_f64(BN_MOMENTUM);
            let keep = T::one() - mom;
            for (rmean, rvar, mean, var) in bn_updates {
                for (r, m) in self.buffers[rmean].value.iter_mut().zip(mean.iter()) {
                    *r = keep * *r + mom * *m;
                }
                for (r, v) in self.buffers[rvar].value.iter_mut().zip(var.iter()) {
                    *r = keep * *r + mom * *v;
                }
            }
        }
        Ok(Tape {
            acts,
            bn_stats,
            mode,
        })
    }

    pub fn output_activations<'a>(&self, tape: &'a Tape<T>) -> Vec<&'a Array4<T>> {
        self.outputs.iter().map(|&i| &tape.acts[i]).collect()
    }

    /// Reverse-mode gradients. `output_grads` pairs with `self.outputs`;
    /// requires a train-mode tape.
    pub fn backward(&self, tape: &Tape<T>, output_grads: &[Array4<T>]) -> Result<BackwardResult<T>> {
        if tape.mode != Mode::Train {
            return Err(Error::config("backward requires a train-mode forward pass"));
        }
        if output_grads.len() != self.outputs.len() {
            return Err(Error::config(format!(
                "got {} output gradients for {} graph outputs",
                output_grads.len(),
                self.outputs.len()
            )));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Array4<T>>> = (0..n).map(|_| None).collect();
        for (&o, g) in self.outputs.iter().zip(output_grads) {
            accumulate(&mut grads[o], g);
        }
        let mut param_grads: Vec<ArrayD<T>> = self
            .params
            .iter()
            .map(|p| ArrayD::zeros(p.value.raw_dim()))
            .collect();
        let mut input_grad: Option<Array4<T>> = None;
        for i in (0..n).rev() {
            let Some(dy) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.kind {
                LayerKind::Input => accumulate(&mut input_grad, &dy),
                LayerKind::Conv { w, b, k: _ } => {
                    let xin = &tape.acts[node.inputs[0]];
                    let (dx, dw, db) =
                        ops::conv2d_backward(xin, &self.param4(*w), b.is_some(), &dy);
                    param_grads[*w] += &dw.into_dyn();
                    if let (Some(bid), Some(db)) = (b, db) {
                        param_grads[*bid] += &db.into_dyn();
                    }
                    accumulate(&mut grads[node.inputs[0]], &dx);
                }
                LayerKind::ConvTranspose { w } => {
                    let xin = &tape.acts[node.inputs[0]];
                    let (dx, dw) = ops::convt2d_backward(xin, &self.param4(*w), &dy);
                    param_grads[*w] += &dw.into_dyn();
                    accumulate(&mut grads[node.inputs[0]], &dx);
                }
                LayerKind::BatchNorm { gamma, beta, .. } => {
                    let xin = &tape.acts[node.inputs[0]];
                    let (mean, var) = tape.bn_stats[i]
                        .as_ref()
                        .expect("train tape holds batch stats");
                    let (dx, dgamma, dbeta) = ops::batchnorm_backward(
                        xin,
                        &self.param1(*gamma),
                        &mean.view(),
                        &var.view(),
                        T::from_f64(BN_EPS),
                        &dy,
                    );
                    param_grads[*gamma] += &dgamma.into_dyn();
                    param_grads[*beta] += &dbeta.into_dyn();
                    accumulate(&mut grads[node.inputs[0]], &dx);
                }
                LayerKind::Relu => {
                    let xin = &tape.acts[node.inputs[0]];
                    let dx = ops::relu_backward(xin, &dy);
                    accumulate(&mut grads[node.inputs[0]], &dx);
                }
                LayerKind::MaxPool { k } => {
                    let xin = &tape.acts[node.inputs[0]];
                    let dx = ops::maxpool_backward(xin, *k, &dy);
                    accumulate(&mut grads[node.inputs[0]], &dx);
                }
                LayerKind::UpsampleNearest { f } => {
                    let dx = ops::upsample_nearest_backward(&dy, *f);
                    accumulate(&mut grads[node.inputs[0]], &dx);
                }
                LayerKind::UpsampleBilinear { f } => {
                    let dx = ops::upsample_bilinear_backward(&dy, *f);
                    accumulate(&mut grads[node.inputs[0]], &dx);
                }
                LayerKind::Concat => {
                    let channels: Vec<usize> = node
                        .inputs
                        .iter()
                        .map(|&j| tape.acts[j].dim().3)
                        .collect();
                    let parts = ops::concat_backward(&dy, &channels);
                    for (&j, dx) in node.inputs.iter().zip(parts.iter()) {
                        accumulate(&mut grads[j], dx);
                    }
                }
            }
        }
        let input_grad = input_grad.unwrap_or_else(|| Array4::zeros(tape.acts[0].raw_dim()));
        Ok(BackwardResult {
            param_grads,
            input_grad,
        })
    }
}

fn accumulate<T: Scalar>(slot: &mut Option<Array4<T>>, g: &Array4<T>) {
    match slot {
        Some(acc) => *acc += g,
        None => *slot = Some(g.clone()),
    }
}

/// Incremental graph constructor. Node 0 is always the input; weights are
/// He-normal initialized from a seeded generator, biases zero, batchnorm
/// gamma one / beta zero.
pub struct GraphBuilder<T> {
    graph: NetworkGraph<T>,
    rng: ChaCha8Rng,
    zero_init: bool,
}

impl<T: Scalar> GraphBuilder<T> {
    pub fn new(in_channels: usize, seed: u64) -> Self {
        let graph = NetworkGraph {
            nodes: vec![Node {
                kind: LayerKind::Input,
                inputs: vec![],
                tag: "input".into(),
            }],
            params: Vec::new(),
            buffers: Vec::new(),
            outputs: Vec::new(),
            spatial_divisor: 1,
            in_channels,
        };
        GraphBuilder {
            graph,
            rng: ChaCha8Rng::seed_from_u64(seed),
            zero_init: false,
        }
    }

    /// Skip weight sampling; useful when only the graph structure or
    /// parameter counts matter.
    pub fn with_zero_init(mut self) -> Self {
        self.zero_init = true;
        self
    }

    pub fn input(&self) -> NodeId {
        0
    }

    fn push(&mut self, kind: LayerKind, inputs: Vec<NodeId>, tag: &str) -> NodeId {
        for &i in &inputs {
            assert!(i < self.graph.nodes.len(), "input node out of order");
        }
        self.graph.nodes.push(Node {
            kind,
            inputs,
            tag: tag.to_string(),
        });
        self.graph.nodes.len() - 1
    }

    fn add_param(&mut self, name: String, value: ArrayD<T>, kernel: bool) -> usize {
        assert!(
            self.graph.params.iter().all(|p| p.name != name),
            "duplicate parameter name {name}"
        );
        self.graph.params.push(Param {
            name,
            value,
            kernel,
        });
        self.graph.params.len() - 1
    }

    fn he_kernel(&mut self, k: usize, ci: usize, co: usize) -> ArrayD<T> {
        if self.zero_init {
            return ArrayD::zeros(ndarray::IxDyn(&[k, k, ci, co]));
        }
        let fan_in = (k * k * ci) as f64;
        let normal = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("valid std");
        let mut v = Vec::with_capacity(k * k * ci * co);
        for _ in 0..k * k * ci * co {
            v.push(T::from_f64(normal.sample(&mut self.rng)));
        }
        ArrayD::from_shape_vec(ndarray::IxDyn(&[k, k, ci, co]), v).expect("shape matches")
    }

    pub fn conv(
        &mut self,
        input: NodeId,
        ci: usize,
        co: usize,
        k: usize,
        bias: bool,
        tag: &str,
    ) -> NodeId {
        let w = self.he_kernel(k, ci, co);
        let wid = self.add_param(format!("{tag}.weight"), w, true);
        let bid = bias.then(|| {
            self.add_param(
                format!("{tag}.bias"),
                ArrayD::zeros(ndarray::IxDyn(&[co])),
                false,
            )
        });
        self.push(LayerKind::Conv { w: wid, b: bid, k }, vec![input], tag)
    }

    pub fn conv_transpose(&mut self, input: NodeId, ci: usize, co: usize, tag: &str) -> NodeId {
        let w = self.he_kernel(3, ci, co);
        let wid = self.add_param(format!("{tag}.weight"), w, true);
        self.push(LayerKind::ConvTranspose { w: wid }, vec![input], tag)
    }

    pub fn batchnorm(&mut self, input: NodeId, channels: usize, tag: &str) -> NodeId {
        let ones = ArrayD::from_elem(ndarray::IxDyn(&[channels]), T::one());
        let zeros = ArrayD::zeros(ndarray::IxDyn(&[channels]));
        let gamma = self.add_param(format!("{tag}.gamma"), ones.clone(), false);
        let beta = self.add_param(format!("{tag}.beta"), zeros.clone(), false);
        let rmean = self.add_buffer(format!("{tag}.running_mean"), zeros);
        let rvar = self.add_buffer(format!("{tag}.running_var"), ones);
        self.push(
            LayerKind::BatchNorm {
                gamma,
                beta,
                rmean,
                rvar,
            },
            vec![input],
            tag,
        )
    }

    fn add_buffer(&mut self, name: String, value: ArrayD<T>) -> usize {
        assert!(
            self.graph.buffers.iter().all(|b| b.name != name),
            "duplicate buffer name {name}"
        );
        self.graph.buffers.push(Buffer { name, value });
        self.graph.buffers.len() - 1
    }

    pub fn relu(&mut self, input: NodeId, tag: &str) -> NodeId {
        self.push(LayerKind::Relu, vec![input], tag)
    }

    /// The standard conv block: conv (no bias) then batchnorm then ReLU.
    pub fn conv_bn_relu(
        &mut self,
        input: NodeId,
        ci: usize,
        co: usize,
        k: usize,
        tag: &str,
    ) -> NodeId {
        let c = self.conv(input, ci, co, k, false, tag);
        let b = self.batchnorm(c, co, tag);
        self.relu(b, tag)
    }

    pub fn maxpool(&mut self, input: NodeId, k: usize, tag: &str) -> NodeId {
        self.push(LayerKind::MaxPool { k }, vec![input], tag)
    }

    pub fn upsample_nearest(&mut self, input: NodeId, f: usize, tag: &str) -> NodeId {
        self.push(LayerKind::UpsampleNearest { f }, vec![input], tag)
    }

    pub fn upsample_bilinear(&mut self, input: NodeId, f: usize, tag: &str) -> NodeId {
        self.push(LayerKind::UpsampleBilinear { f }, vec![input], tag)
    }

    pub fn concat(&mut self, inputs: &[NodeId], tag: &str) -> NodeId {
        self.push(LayerKind::Concat, inputs.to_vec(), tag)
    }

    pub fn finish(mut self, outputs: Vec<NodeId>, spatial_divisor: usize) -> NetworkGraph<T> {
        assert!(!outputs.is_empty(), "graph needs at least one output");
        for &o in &outputs {
            assert!(o < self.graph.nodes.len(), "output node out of range");
        }
        self.graph.outputs = outputs;
        self.graph.spatial_divisor = spatial_divisor.max(1);
        self.graph
    }
}
