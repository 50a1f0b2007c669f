//! Minimal differentiable 2D computation-graph engine.
//!
//! Tensors are channels-last (batch, height, width, channels). Graphs are
//! static DAGs of layer nodes built in topological order; forward records
//! a tape of activations, backward walks it in reverse and produces exact
//! gradients for every parameter plus the input. f32 is the training
//! precision; the same code instantiated at f64 backs the
//! finite-difference gradient checks.

pub mod checkpoint;
pub mod gradcheck;
pub mod graph;
pub mod loss;
pub mod ops;
pub mod optim;

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use gradcheck::{
    check_graph, sample_input, sample_labels, standard_layer_checks, GradCheckReport, FD_STEP,
    GRAD_TOL,
};
pub use graph::{BackwardResult, GraphBuilder, LayerKind, Mode, NetworkGraph, NodeId, Tape};
pub use loss::{apply_l2_grad, l2_penalty, multi_output_ce, softmax, softmax_ce, LossOut};
pub use optim::{adam_step, AdamConfig, OptimState};

/// Element type for all graph arithmetic: f32 for training, f64 for
/// gradient verification.
pub trait Scalar:
    num_traits::Float
    + ndarray::LinalgScalar
    + std::fmt::Debug
    + std::fmt::Display
    + std::ops::AddAssign
    + std::ops::SubAssign
    + std::ops::MulAssign
    + Send
    + Sync
    + 'static
{
    const DTYPE: &'static str;
    const BYTES: usize;

    fn from_f64(x: f64) -> Self;
    fn to_f64(self) -> f64;
    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;
}

impl Scalar for f32 {
    const DTYPE: &'static str = "f32";
    const BYTES: usize = 4;

    fn from_f64(x: f64) -> Self {
        x as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes.try_into().expect("4-byte chunk"))
    }
}

impl Scalar for f64 {
    const DTYPE: &'static str = "f64";
    const BYTES: usize = 8;

    fn from_f64(x: f64) -> Self {
        x
    }
    fn to_f64(self) -> f64 {
        self
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes.try_into().expect("8-byte chunk"))
    }
}

#[cfg(test)]
mod tests {
    use super::gradcheck::{check_graph, sample_input, sample_labels, standard_layer_checks, GRAD_TOL};
    use super::*;
    use ndarray::{Array3, Array4, ArrayD};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// conv head + hidden block used across several tests
    fn small_graph(seed: u64) -> NetworkGraph<f32> {
        let mut b = GraphBuilder::<f32>::new(1, seed);
        let x = b.input();
        let h = b.conv_bn_relu(x, 1, 8, 3, "block");
        let head = b.conv(h, 8, 4, 1, true, "head");
        b.finish(vec![head], 1)
    }

    #[test]
    fn conv_parameter_count() {
        let mut b = GraphBuilder::<f32>::new(2, 0);
        let x = b.input();
        let c = b.conv(x, 2, 4, 3, true, "c");
        let g = b.finish(vec![c], 1);
        // 3*3*2*4 kernel entries + 4 biases
        assert_eq!(g.param_count(), 76);
    }

    #[test]
    fn zeroed_head_gives_exactly_uniform_softmax() {
        let mut g = small_graph(1);
        let wid = g.param_index("head.weight").unwrap();
        let bid = g.param_index("head.bias").unwrap();
        g.params[wid].value.fill(0.0);
        g.params[bid].value.fill(0.0);
        let x = Array4::<f32>::from_elem((2, 4, 4, 1), 0.7);
        let tape = g.forward(&x, Mode::Infer).unwrap();
        let probs = softmax(g.output_activations(&tape)[0]);
        for v in probs.iter() {
            assert_eq!(v.to_bits(), 0.25f32.to_bits());
        }
    }

    #[test]
    fn forward_shape_contract_and_infer_determinism() {
        let mut g = small_graph(2);
        let x = sample_input((3, 6, 6, 1), 5).mapv(|v| v as f32);
        let t1 = g.forward(&x, Mode::Infer).unwrap();
        let t2 = g.forward(&x, Mode::Infer).unwrap();
        let o1 = g.output_activations(&t1)[0];
        let o2 = g.output_activations(&t2)[0];
        assert_eq!(o1.dim(), (3, 6, 6, 4));
        for (a, b) in o1.iter().zip(o2.iter()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn incompatible_input_size_is_rejected() {
        let mut b = GraphBuilder::<f32>::new(1, 3);
        let x = b.input();
        let p = b.maxpool(x, 2, "pool");
        let mut g = b.finish(vec![p], 2);
        let x = Array4::<f32>::zeros((1, 5, 6, 1));
        let err = g.forward(&x, Mode::Train).unwrap_err();
        assert_eq!(err.exit_code(), 2);
        assert!(err.to_string().contains("incompatible input size"));
    }

    #[test]
    fn backward_needs_train_tape() {
        let mut g = small_graph(4);
        let x = Array4::<f32>::zeros((1, 4, 4, 1));
        let tape = g.forward(&x, Mode::Infer).unwrap();
        let dy = Array4::<f32>::zeros((1, 4, 4, 4));
        assert!(g.backward(&tape, &[dy]).is_err());
    }

    #[test]
    fn uniform_logits_cross_entropy_is_ln_k_plus_1() {
        let logits = Array4::<f64>::zeros((2, 3, 3, 4));
        let labels = sample_labels((2, 3, 3), 4, 9);
        let out = softmax_ce(&logits, &labels).unwrap();
        assert!((out.value - 4.0f64.ln()).abs() < 1e-12);
        let logits = Array4::<f32>::from_elem((1, 2, 2, 6), 0.3);
        let labels = sample_labels((1, 2, 2), 6, 10);
        let out = softmax_ce(&logits, &labels).unwrap();
        assert!((out.value - 6.0f32.ln()).abs() < 1e-5);
    }

    #[test]
    fn scaled_one_hot_logits_drive_loss_to_zero() {
        let labels = sample_labels((1, 4, 4), 3, 11);
        let mut prev = f64::INFINITY;
        for scale in [1.0, 2.0, 4.0, 8.0, 16.0] {
            let mut logits = Array4::<f64>::zeros((1, 4, 4, 3));
            for y in 0..4 {
                for x in 0..4 {
                    logits[[0, y, x, labels[[0, y, x]] as usize]] = scale;
                }
            }
            let v = softmax_ce(&logits, &labels).unwrap().value;
            assert!(v < prev, "loss must drop as the margin grows");
            prev = v;
        }
        assert!(prev < 1e-6);
    }

    #[test]
    fn out_of_range_label_is_a_data_error() {
        let logits = Array4::<f32>::zeros((1, 2, 2, 3));
        let mut labels = Array3::<u8>::zeros((1, 2, 2));
        labels[[0, 1, 1]] = 3;
        let err = softmax_ce(&logits, &labels).unwrap_err();
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn l2_penalty_counts_kernel_entries_only() {
        let mut g = small_graph(6);
        for p in g.params.iter_mut() {
            p.value.fill(1.0);
        }
        // block 3x3x1x8 + head 1x1x8x4 kernels; biases and norms excluded
        let expect = (9 * 8 + 8 * 4) as f32;
        assert_eq!(l2_penalty(&g), expect);
    }

    #[test]
    fn unused_parameter_gets_zero_gradient() {
        let mut b = GraphBuilder::<f32>::new(1, 7);
        let x = b.input();
        let live = b.conv(x, 1, 3, 3, true, "live");
        let _dead = b.conv(x, 1, 2, 3, true, "dead");
        let mut g = b.finish(vec![live], 1);
        let xs = sample_input((1, 4, 4, 1), 1).mapv(|v| v as f32);
        let ys = sample_labels((1, 4, 4), 3, 2);
        let tape = g.forward(&xs, Mode::Train).unwrap();
        let outs = g.output_activations(&tape);
        let (_, dl) = multi_output_ce(&g, &outs, &ys, 0.0).unwrap();
        let back = g.backward(&tape, &dl).unwrap();
        let dead_w = g.param_index("dead.weight").unwrap();
        let dead_b = g.param_index("dead.bias").unwrap();
        assert!(back.param_grads[dead_w].iter().all(|v| *v == 0.0));
        assert!(back.param_grads[dead_b].iter().all(|v| *v == 0.0));
        let live_w = g.param_index("live.weight").unwrap();
        assert!(back.param_grads[live_w].iter().any(|v| *v != 0.0));
    }

    #[test]
    fn doubling_output_gradients_doubles_parameter_gradients() {
        let mut g = small_graph(8);
        let xs = sample_input((2, 4, 4, 1), 3).mapv(|v| v as f32);
        let ys = sample_labels((2, 4, 4), 4, 4);
        let tape = g.forward(&xs, Mode::Train).unwrap();
        let outs = g.output_activations(&tape);
        let (_, dl) = multi_output_ce(&g, &outs, &ys, 0.0).unwrap();
        let back1 = g.backward(&tape, &dl).unwrap();
        let dl2: Vec<Array4<f32>> = dl.iter().map(|d| d.mapv(|v| 2.0 * v)).collect();
        let back2 = g.backward(&tape, &dl2).unwrap();
        for (g1, g2) in back1.param_grads.iter().zip(back2.param_grads.iter()) {
            for (a, b) in g1.iter().zip(g2.iter()) {
                assert_eq!((2.0 * a).to_bits(), b.to_bits());
            }
        }
    }

    #[test]
    fn adam_zero_gradient_leaves_parameters_unchanged() {
        let mut g = small_graph(9);
        let before: Vec<ArrayD<f32>> = g.params.iter().map(|p| p.value.clone()).collect();
        let zeros: Vec<ArrayD<f32>> = g
            .params
            .iter()
            .map(|p| ArrayD::zeros(p.value.raw_dim()))
            .collect();
        let mut st = OptimState::new(&g);
        adam_step(&mut g, &zeros, &mut st, &AdamConfig::default());
        for (p, b) in g.params.iter().zip(before.iter()) {
            for (x, y) in p.value.iter().zip(b.iter()) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
    }

    #[test]
    fn adam_constant_gradient_steps_by_lr() {
        let mut g = small_graph(10);
        let cfg = AdamConfig::default();
        let grads: Vec<ArrayD<f32>> = g
            .params
            .iter()
            .map(|p| ArrayD::from_elem(p.value.raw_dim(), 0.37f32))
            .collect();
        let mut st = OptimState::new(&g);
        for step in 0..50 {
            let before = g.params[0].value.first().copied().unwrap();
            adam_step(&mut g, &grads, &mut st, &cfg);
            let after = g.params[0].value.first().copied().unwrap();
            let delta = (before - after) as f64;
            assert!(
                (delta - cfg.lr).abs() / cfg.lr < 1e-3,
                "step {step}: delta {delta}"
            );
        }
    }

    #[test]
    fn adam_is_deterministic() {
        let run = || {
            let mut g = small_graph(11);
            let xs = sample_input((2, 4, 4, 1), 5).mapv(|v| v as f32);
            let ys = sample_labels((2, 4, 4), 4, 6);
            let mut st = OptimState::new(&g);
            for _ in 0..3 {
                let tape = g.forward(&xs, Mode::Train).unwrap();
                let outs = g.output_activations(&tape);
                let (_, dl) = multi_output_ce(&g, &outs, &ys, 1e-5).unwrap();
                let mut back = g.backward(&tape, &dl).unwrap();
                apply_l2_grad(&g, &mut back.param_grads, 1e-5);
                adam_step(&mut g, &back.param_grads, &mut st, &AdamConfig::default());
            }
            g.params
                .iter()
                .flat_map(|p| p.value.iter().map(|v| v.to_bits()).collect::<Vec<_>>())
                .collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let mut g = small_graph(12);
        // move the running statistics off their initial values
        let xs = sample_input((2, 4, 4, 1), 7).mapv(|v| v as f32);
        g.forward(&xs, Mode::Train).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.json");
        save_checkpoint(&g, &path).unwrap();
        let mut g2 = small_graph(999); // same structure, different init
        load_checkpoint(&mut g2, &path).unwrap();
        for (a, b) in g.params.iter().zip(g2.params.iter()) {
            assert_eq!(a.name, b.name);
            for (x, y) in a.value.iter().zip(b.value.iter()) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
        for (a, b) in g.buffers.iter().zip(g2.buffers.iter()) {
            for (x, y) in a.value.iter().zip(b.value.iter()) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
        let t1 = g.forward(&xs, Mode::Infer).unwrap();
        let t2 = g2.forward(&xs, Mode::Infer).unwrap();
        for (a, b) in g
            .output_activations(&t1)[0]
            .iter()
            .zip(g2.output_activations(&t2)[0].iter())
        {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn checkpoint_dtype_mismatch_is_rejected() {
        let g = small_graph(13);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.json");
        save_checkpoint(&g, &path).unwrap();
        let mut b = GraphBuilder::<f64>::new(1, 13);
        let x = b.input();
        let h = b.conv_bn_relu(x, 1, 8, 3, "block");
        let head = b.conv(h, 8, 4, 1, true, "head");
        let mut g64 = b.finish(vec![head], 1);
        let err = load_checkpoint(&mut g64, &path).unwrap_err();
        assert!(err.to_string().contains("dtype"));
    }

    #[test]
    fn every_layer_kind_passes_gradient_checks() {
        for seed in [0u64, 1, 2] {
            for (name, report) in standard_layer_checks(seed).unwrap() {
                assert!(
                    report.max_rel_err <= GRAD_TOL,
                    "{name} seed {seed}: max rel err {}",
                    report.max_rel_err
                );
            }
        }
    }

    #[test]
    fn composite_gradcheck_covers_l2() {
        let mut b = GraphBuilder::<f64>::new(1, 21);
        let x = b.input();
        let h = b.conv_bn_relu(x, 1, 3, 3, "block");
        let head = b.conv(h, 3, 2, 1, true, "head");
        let mut g = b.finish(vec![head], 1);
        let xs = sample_input((1, 4, 4, 1), 22);
        let ys = sample_labels((1, 4, 4), 2, 23);
        let with_l2 = check_graph(&mut g, &xs, &ys, 1e-2).unwrap();
        assert!(with_l2.max_rel_err <= GRAD_TOL, "err {}", with_l2.max_rel_err);
    }

    #[test]
    fn toy_training_loss_is_monotone_for_most_seeds() {
        // tiny separable task: class = center pixel sign
        let mut monotone = 0;
        let seeds = 10u64;
        for seed in 0..seeds {
            let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
            let mut x = Array4::<f32>::zeros((8, 8, 8, 1));
            let mut y = Array3::<u8>::zeros((8, 8, 8));
            for b in 0..8 {
                for i in 0..8 {
                    for j in 0..8 {
                        let v: f32 = rng.gen_range(-1.0..1.0);
                        x[[b, i, j, 0]] = v;
                        y[[b, i, j]] = (v > 0.0) as u8;
                    }
                }
            }
            let mut bld = GraphBuilder::<f32>::new(1, seed);
            let xi = bld.input();
            let h = bld.conv_bn_relu(xi, 1, 6, 3, "block");
            let head = bld.conv(h, 6, 2, 1, true, "head");
            let mut g = bld.finish(vec![head], 1);
            let mut st = OptimState::new(&g);
            let cfg = AdamConfig::default();
            let mut prev = f32::INFINITY;
            let mut ok = true;
            for _ in 0..50 {
                let tape = g.forward(&x, Mode::Train).unwrap();
                let outs = g.output_activations(&tape);
                let (loss, dl) = multi_output_ce(&g, &outs, &y, 0.0).unwrap();
                if loss > prev {
                    ok = false;
                }
                prev = loss;
                let back = g.backward(&tape, &dl).unwrap();
                adam_step(&mut g, &back.param_grads, &mut st, &cfg);
            }
            monotone += ok as usize;
        }
        assert!(
            monotone * 100 >= seeds as usize * 95,
            "only {monotone}/{seeds} seeds monotone"
        );
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let x = sample_input((2, 3, 3, 5), 31);
        let p = softmax(&x);
        for px in p.as_slice().unwrap().chunks_exact(5) {
            let s: f64 = px.iter().sum();
            assert!((s - 1.0).abs() < 1e-6);
        }
    }
}

