//! Randomized invariants of the numeric substrate, structured maps, the
//! cumulative state and the model.

use proptest::prelude::*;
use scformer::attention::Variant;
use scformer::hippo::{HippoState, LegsOperator};
use scformer::model::{
    init_params, instance_denormalize, instance_normalize, predict_batch, Batch, ModelConfig,
    Precision,
};
use scformer::numerics::{Graph, NumericsError, Tensor, Var};
use scformer::structured::{toeplitz_from_kernel, ConvKernelStack, MaskedLinear};
use scformer::trainer::{adam_step, AdamState, TrainConfig};

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Tensor<f64>> {
    prop::collection::vec(-2.0f64..2.0, rows * cols)
        .prop_map(move |v| Tensor::new(&[rows, cols], v).unwrap())
}

fn dims() -> impl Strategy<Value = (usize, usize)> {
    (1usize..5, 1usize..5)
}

/// Pushes entries away from zero so ReLU never sits on its kink.
fn off_kink(t: Tensor<f64>) -> Tensor<f64> {
    t.map(|v| if v >= 0.0 { v + 0.05 } else { v - 0.05 })
}

/// Max relative disagreement between backward() and central differences
/// for the scalar `sum(w ⊙ f(inputs))` with fixed random weights `w`.
fn grad_error<F>(inputs: &[Tensor<f64>], f: F) -> f64
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var, NumericsError>,
{
    let scalar = |g: &mut Graph<f64>, vars: &[Var]| -> Var {
        let out = f(g, vars).unwrap();
        let shape = g.value(out).shape().to_vec();
        let n: usize = shape.iter().product();
        let w = Tensor::new(
            &shape,
            (0..n).map(|i| 0.3 + (i as f64 * 0.7).sin()).collect(),
        )
        .unwrap();
        let wv = g.constant(w);
        let prod = g.mul(out, wv).unwrap();
        g.sum(prod).unwrap()
    };
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let loss = scalar(&mut g, &vars);
    let grads = g.backward(loss).unwrap();
    let eps = 1e-6;
    let mut worst: f64 = 0.0;
    for (idx, t) in inputs.iter().enumerate() {
        let analytic = grads.get_or_zeros(vars[idx], t);
        for k in 0..t.len() {
            let eval = |delta: f64| {
                let mut g = Graph::new();
                let vars: Vec<Var> = inputs
                    .iter()
                    .enumerate()
                    .map(|(i, x)| {
                        let mut x = x.clone();
                        if i == idx {
                            x.data_mut()[k] += delta;
                        }
                        g.param(x)
                    })
                    .collect();
                let l = scalar(&mut g, &vars);
                g.value(l).data()[0]
            };
            let numeric = (eval(eps) - eval(-eps)) / (2.0 * eps);
            let a = analytic.data()[k];
            worst = worst.max((a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6));
        }
    }
    worst
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn matmul_gradient((r, k) in dims(), c in 1usize..5, seed in any::<u64>()) {
        let a = Tensor::new(&[r, k], (0..r * k).map(|i| ((seed as f64 + i as f64) * 0.37).sin()).collect()).unwrap();
        let b = Tensor::new(&[k, c], (0..k * c).map(|i| ((seed as f64 - i as f64) * 0.53).cos()).collect()).unwrap();
        prop_assert!(grad_error(&[a, b], |g, v| g.matmul(v[0], v[1])) < 1e-4);
    }

    #[test]
    fn elementwise_gradients(x in dims().prop_flat_map(|(r, c)| (matrix(r, c), matrix(r, c)))) {
        let (a, b) = x;
        prop_assert!(grad_error(&[a.clone(), b.clone()], |g, v| g.add(v[0], v[1])) < 1e-4);
        prop_assert!(grad_error(&[a.clone(), b.clone()], |g, v| g.sub(v[0], v[1])) < 1e-4);
        prop_assert!(grad_error(&[a, b], |g, v| g.mul(v[0], v[1])) < 1e-4);
    }

    #[test]
    fn relu_and_shape_gradients(a in dims().prop_flat_map(|(r, c)| matrix(r, c + 1))) {
        let a = off_kink(a);
        let cols = a.cols();
        prop_assert!(grad_error(&[a.clone()], |g, v| g.relu(v[0])) < 1e-4);
        prop_assert!(grad_error(&[a.clone()], |g, v| g.transpose(v[0])) < 1e-4);
        prop_assert!(grad_error(&[a.clone()], |g, v| g.slice_cols(v[0], 1, cols - 1)) < 1e-4);
        prop_assert!(grad_error(&[a.clone(), a], |g, v| g.concat_cols(v[0], v[1])) < 1e-4);
    }

    #[test]
    fn softmax_and_reduction_gradients(a in dims().prop_flat_map(|(r, c)| matrix(r, c + 1))) {
        prop_assert!(grad_error(&[a.clone()], |g, v| g.softmax_rows(v[0])) < 1e-4);
        prop_assert!(grad_error(&[a.clone()], |g, v| g.row_mean(v[0])) < 1e-4);
        prop_assert!(grad_error(&[a.clone()], |g, v| g.row_std(v[0], 1e-5)) < 1e-4);
        prop_assert!(grad_error(&[a], |g, v| g.mean(v[0])) < 1e-4);
    }

    #[test]
    fn conv1d_gradient(x in (1usize..4, 2usize..9).prop_flat_map(|(r, d)| (matrix(r, d), 1..=d)), seed in any::<u64>()) {
        let (z, k) = x;
        let kernel = Tensor::new(&[k], (0..k).map(|i| ((seed as f64 + i as f64) * 0.71).sin()).collect()).unwrap();
        prop_assert!(grad_error(&[z, kernel], |g, v| g.conv1d(v[0], v[1])) < 1e-4);
    }

    #[test]
    fn softmax_rows_lie_on_the_simplex(a in dims().prop_flat_map(|(r, c)| matrix(r, c)), scale in 0.1f64..400.0) {
        let mut g = Graph::new();
        let x = g.constant(a.map(|v| v * scale));
        let s = g.softmax_rows(x).unwrap();
        let out = g.value(s);
        for r in 0..out.rows() {
            let row = out.row(r);
            prop_assert!(row.iter().all(|&v| v >= 0.0));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-6);
        }
    }

    #[test]
    fn tensor_shape_matches_data(shape in prop::collection::vec(1usize..5, 1..4)) {
        let n: usize = shape.iter().product();
        prop_assert!(Tensor::<f64>::new(&shape, vec![0.0; n]).is_ok());
        prop_assert!(Tensor::<f64>::new(&shape, vec![0.0; n + 1]).is_err());
    }

    #[test]
    fn conv_stack_equals_toeplitz_product(
        d in 1usize..24,
        kernels in prop::collection::vec(prop::collection::vec(-1.0f64..1.0, 1..8), 1..5),
        z_seed in any::<u64>(),
    ) {
        let kernels: Vec<Vec<f64>> = kernels.into_iter().map(|mut k| { k.truncate(d); k }).collect();
        let z = Tensor::new(&[2, d], (0..2 * d).map(|i| ((z_seed as f64 + i as f64) * 0.91).sin()).collect()).unwrap();
        let stack = ConvKernelStack::new(kernels.iter().map(|k| Tensor::new(&[k.len()], k.clone()).unwrap()).collect(), d).unwrap();
        let conv = stack.apply(&z).unwrap();
        let mut expect = z.clone();
        for k in &kernels {
            expect = expect.matmul(&toeplitz_from_kernel(k, d).unwrap().transpose()).unwrap();
        }
        prop_assert!(conv.max_abs_diff(&expect) <= 1e-12);
        let m = stack.materialize(d).unwrap();
        for i in 0..d {
            for j in 0..i {
                prop_assert_eq!(m.at(i, j), 0.0);
            }
        }
    }

    #[test]
    fn masked_output_ignores_earlier_positions(d in 2usize..16, seed in any::<u64>(), j_frac in 0.0f64..1.0, bump in 0.1f64..5.0) {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let layer = MaskedLinear::<Tensor<f64>>::init(d, &mut rng);
        let z = Tensor::new(&[3, d], (0..3 * d).map(|i| (i as f64 * 0.3 + seed as f64).sin()).collect()).unwrap();
        let j = ((d as f64 * j_frac) as usize).min(d - 1);
        let mut zp = z.clone();
        for r in 0..3 {
            zp.set(r, j, z.at(r, j) + bump);
        }
        let (a, b) = (layer.apply(&z).unwrap(), layer.apply(&zp).unwrap());
        for r in 0..3 {
            for i in j + 1..d {
                prop_assert_eq!(a.at(r, i), b.at(r, i));
            }
        }
    }

    #[test]
    fn instance_norm_round_trip(l in 2usize..40, c in 1usize..6, scale in 1e-3f64..1e3, shift in -1e3f64..1e3, seed in any::<u64>()) {
        let x = Tensor::new(&[l, c], (0..l * c).map(|i| ((i as f64 + seed as f64) * 1.3).sin() * scale + shift).collect()).unwrap();
        let (n, stats) = instance_normalize(&x).unwrap();
        let back = instance_denormalize(&n, &stats).unwrap();
        prop_assert!(back.max_abs_diff(&x) <= 1e-6 * (1.0 + shift.abs() + scale));
    }

    #[test]
    fn first_legs_coefficient_is_the_running_mean(xs in prop::collection::vec(-5.0f64..5.0, 1..200), order in 1usize..12) {
        let op = LegsOperator::new(order).unwrap();
        let mut st = HippoState::new(1, order);
        let mut sum = 0.0;
        for (k, &x) in xs.iter().enumerate() {
            st.advance(&[x], &op).unwrap();
            sum += x;
            prop_assert!((st.coeffs()[0] - sum / (k + 1) as f64).abs() <= 1e-9);
            prop_assert!(st.coeffs().iter().all(|v| v.is_finite()));
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn adam_keeps_masked_entries_zero(seed in any::<u64>(), steps in 1usize..30) {
        let cfg = ModelConfig {
            lookback: 8, horizon: 4, channels: 2, d_model: 8, hippo_order: 4, heads: 2,
            precision: Precision::F64, ..ModelConfig::default()
        };
        let mut p = init_params::<f64>(&cfg, seed).unwrap();
        let mut state = AdamState::new(&p);
        let tc = TrainConfig { learning_rate: 0.1, ..TrainConfig::default() };
        for s in 0..steps {
            // Dense gradients, including the off-support entries.
            let grads: Vec<Tensor<f64>> = p.leaves().into_iter()
                .map(|t| t.map(|v| (v * 13.0 + s as f64 + seed as f64 * 1e-3).sin() + 0.5))
                .collect();
            adam_step(&mut p, &grads, &mut state, &tc).unwrap();
        }
        prop_assert_eq!(p.mask_violations(), 0);
    }

    #[test]
    fn forward_is_deterministic(seed in any::<u64>(), conv in any::<bool>()) {
        let cfg = ModelConfig {
            lookback: 8, horizon: 4, channels: 3, d_model: 8, hippo_order: 4, heads: 2,
            kernel_sizes: vec![3, 3],
            variant: if conv { Variant::Conv } else { Variant::Triangular },
            precision: Precision::F64, ..ModelConfig::default()
        };
        let p = init_params::<f64>(&cfg, seed).unwrap();
        let q = init_params::<f64>(&cfg, seed).unwrap();
        let batch = Batch {
            lookback: Tensor::new(&[3, 8], (0..24).map(|i| (i as f64 * 0.4).sin()).collect()).unwrap(),
            state: Tensor::new(&[3, 4], (0..12).map(|i| (i as f64 * 0.8).cos()).collect()).unwrap(),
            channels: 3,
        };
        let a = predict_batch(&p, &batch, &cfg).unwrap();
        let b = predict_batch(&q, &batch, &cfg).unwrap();
        prop_assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
}
