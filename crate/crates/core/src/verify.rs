//! Seeded property suites run by `scformer verify`. Each check reports a
//! measured value against its threshold; informational checks are reported
//! but never fail the run.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::attention::{encoder_stack_eval, BlockConfig, EncoderBlockParams, Transform, Variant};
use crate::hippo::{
    midpoint_grid, project_oracle, reconstruct, relative_l2, HippoState, LegsOperator,
};
use crate::model::{
    batch_loss, init_params, instance_denormalize, instance_normalize, predict_batch, Batch,
    ModelConfig, ModelError, Precision,
};
use crate::numerics::{gradcheck, GradcheckReport, Graph, NumericsError, Tensor};
use crate::structured::{
    band_width, is_full_upper_triangle, masked_free_params, min_layers_full_triangle,
    toeplitz_from_kernel, ConvKernelStack, MaskedLinear,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Suite {
    All,
    Hippo,
    Structured,
    Grad,
    Model,
}

impl std::str::FromStr for Suite {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "all" => Ok(Self::All),
            "hippo" => Ok(Self::Hippo),
            "structured" => Ok(Self::Structured),
            "grad" => Ok(Self::Grad),
            "model" => Ok(Self::Model),
            other => Err(format!(
                "unknown suite {other:?} (expected all, hippo, structured, grad or model)"
            )),
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct Check {
    pub suite: &'static str,
    pub name: String,
    pub value: f64,
    /// Bound the value is compared against; how is stated in `detail`.
    pub threshold: f64,
    pub pass: bool,
    /// Reported only; does not affect the overall verdict.
    pub informational: bool,
    pub detail: String,
}

#[derive(Clone, Debug, Serialize)]
pub struct Report {
    pub suite: Suite,
    pub seed: u64,
    pub checks: Vec<Check>,
    pub passed: usize,
    pub failed: usize,
    pub pass: bool,
}

pub fn run(suite: Suite, seed: u64) -> Report {
    let mut checks = Vec::new();
    let wants = |s: Suite| suite == Suite::All || suite == s;
    if wants(Suite::Hippo) {
        checks.extend(hippo_suite());
    }
    if wants(Suite::Structured) {
        checks.extend(structured_suite(seed));
    }
    if wants(Suite::Grad) {
        checks.extend(grad_suite(seed));
    }
    if wants(Suite::Model) {
        checks.extend(model_suite(seed));
    }
    let failed = checks
        .iter()
        .filter(|c| !c.pass && !c.informational)
        .count();
    Report {
        suite,
        seed,
        passed: checks.iter().filter(|c| c.pass).count(),
        failed,
        pass: failed == 0,
        checks,
    }
}

fn check(
    suite: &'static str,
    name: impl Into<String>,
    value: f64,
    threshold: f64,
    pass: bool,
    detail: impl Into<String>,
) -> Check {
    Check {
        suite,
        name: name.into(),
        value,
        threshold,
        pass,
        informational: false,
        detail: detail.into(),
    }
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(lo..hi)).collect()).expect("shape matches")
}

/// Recurrence and oracle measured on one signal at one order.
#[derive(Clone, Debug, Serialize)]
pub struct HippoAgreement {
    pub order: usize,
    /// Relative L2 reconstruction error of the recurrence state.
    pub recurrence_err: f64,
    /// Same for the least-squares projection.
    pub oracle_err: f64,
    /// Relative L2 distance between the two coefficient vectors.
    pub coeff_gap: f64,
}

pub fn hippo_agreement(
    signal: &[f64],
    order: usize,
) -> Result<HippoAgreement, crate::hippo::HippoError> {
    let op = LegsOperator::new(order)?;
    let mut st = HippoState::new(1, order);
    for &x in signal {
        st.advance(&[x], &op)?;
    }
    let oracle = project_oracle(signal, order)?;
    let grid = midpoint_grid(signal.len());
    Ok(HippoAgreement {
        order,
        recurrence_err: relative_l2(&reconstruct(st.coeffs(), &grid), signal),
        oracle_err: relative_l2(&reconstruct(&oracle, &grid), signal),
        coeff_gap: relative_l2(st.coeffs(), &oracle),
    })
}

/// Test signals on `[0, 1]` sampled at `k` points.
pub fn hippo_signals(k: usize) -> Vec<(&'static str, Vec<f64>)> {
    let t = |i: usize| i as f64 / (k - 1) as f64;
    let pi2 = 2.0 * std::f64::consts::PI;
    vec![
        ("sine", (0..k).map(|i| (pi2 * t(i)).sin()).collect()),
        ("ramp", (0..k).map(t).collect()),
        (
            "damped",
            (0..k)
                .map(|i| (-3.0 * t(i)).exp() * (12.0 * t(i)).cos())
                .collect(),
        ),
    ]
}

/// Allowed relative excess of the recurrence reconstruction error over the oracle's.
pub const HIPPO_REL_MARGIN: f64 = 0.10;

/// Reconstruction errors this small are exact fits up to rounding and are
/// not expected to keep decreasing with the order.
pub const HIPPO_EXACT_FIT: f64 = 1e-12;

/// Oracle reconstruction error is non-increasing as the order doubles,
/// strictly decreasing until the fit is exact.
pub fn oracle_monotone(errs: &[f64]) -> bool {
    errs.windows(2)
        .all(|w| w[1] < w[0] || (w[0] < HIPPO_EXACT_FIT && w[1] < HIPPO_EXACT_FIT))
}

fn hippo_suite() -> Vec<Check> {
    let mut out = Vec::new();
    let fail = |name: String, e: crate::hippo::HippoError| {
        check("hippo", name, f64::NAN, 0.0, false, e.to_string())
    };
    for (name, signal) in hippo_signals(512) {
        let mut oracle_errs = Vec::new();
        for order in [8, 16, 32] {
            let a = match hippo_agreement(&signal, order) {
                Ok(a) => a,
                Err(e) => {
                    out.push(fail(format!("oracle_agreement.{name}.n{order}"), e));
                    continue;
                }
            };
            let ratio_bound = a.oracle_err * (1.0 + HIPPO_REL_MARGIN);
            // The first-order recurrence keeps an O(1/K) discretization error
            // while the least-squares fit becomes exact, so the ratio form is
            // reported only.
            out.push(Check {
                informational: true,
                ..check(
                    "hippo",
                    format!("oracle_agreement.{name}.n{order}"),
                    a.recurrence_err,
                    ratio_bound,
                    a.recurrence_err <= ratio_bound,
                    format!(
                        "recurrence reconstruction error vs 1.1 × oracle error {:.3e}",
                        a.oracle_err
                    ),
                )
            });
            let gap = a.recurrence_err - a.oracle_err;
            out.push(check(
                "hippo",
                format!("reconstruction_gap.{name}.n{order}"),
                gap,
                HIPPO_REL_MARGIN,
                gap <= HIPPO_REL_MARGIN,
                format!(
                    "recurrence minus oracle relative L2 reconstruction error; coefficient gap {:.3e}",
                    a.coeff_gap
                ),
            ));
            oracle_errs.push(a.oracle_err);
        }
        out.push(check(
            "hippo",
            format!("oracle_monotone_in_order.{name}"),
            oracle_errs.last().copied().unwrap_or(f64::NAN),
            oracle_errs.first().copied().unwrap_or(f64::NAN),
            oracle_errs.len() == 3 && oracle_monotone(&oracle_errs),
            format!("oracle reconstruction errors for N = 8, 16, 32: {oracle_errs:?}"),
        ));
    }
    let sine = &hippo_signals(512)[0].1;
    match hippo_agreement(sine, 8) {
        Ok(a) => out.push(check(
            "hippo",
            "coefficients_match_oracle.sine.n8",
            a.coeff_gap,
            HIPPO_REL_MARGIN,
            a.coeff_gap <= HIPPO_REL_MARGIN,
            "relative L2 distance between recurrence and oracle coefficients",
        )),
        Err(e) => out.push(fail("coefficients_match_oracle.sine.n8".into(), e)),
    }
    out
}

/// Dense product of single-layer Toeplitz matrices, applied to every row.
fn toeplitz_stack_apply(kernels: &[Tensor<f64>], z: &Tensor<f64>) -> Tensor<f64> {
    let d = z.cols();
    let mut out = z.clone();
    for k in kernels {
        let m = toeplitz_from_kernel(k.data(), d).expect("kernel fits");
        out = out.matmul(&m.transpose()).expect("shapes agree");
    }
    out
}

fn structured_suite(seed: u64) -> Vec<Check> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();

    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let d = rng.gen_range(1..=32);
        let layers = rng.gen_range(1..=4);
        let kernels: Vec<Tensor<f64>> = (0..layers)
            .map(|_| {
                let k = rng.gen_range(1..=8.min(d));
                uniform(&mut rng, &[k], -1.0, 1.0)
            })
            .collect();
        let rows = rng.gen_range(1..=4);
        let z = uniform(&mut rng, &[rows, d], -1.0, 1.0);
        let stack = ConvKernelStack::new(kernels.clone(), d).expect("valid stack");
        let conv = stack.apply(&z).expect("valid input");
        worst = worst.max(conv.max_abs_diff(&toeplitz_stack_apply(&kernels, &z)));
    }
    out.push(check(
        "structured",
        "conv_matrix_equivalence",
        worst,
        1e-12,
        worst <= 1e-12,
        "max |conv stack − Toeplitz product| over 1000 seeded cases",
    ));

    let mut misses = Vec::new();
    for d in [8, 16, 32] {
        for k in [2, 3, 4, 8] {
            let bound = min_layers_full_triangle(d, k).expect("k ≤ d");
            let stack = |n: usize| {
                let ks = (0..n)
                    .map(|i| Tensor::full(&[k], 0.5 + 0.1 * i as f64))
                    .collect();
                ConvKernelStack::new(ks, d)
                    .and_then(|s| s.materialize(d))
                    .expect("valid stack")
            };
            let full = stack(bound);
            // Zero layers is the identity, band width 1.
            let short_band = if bound > 1 {
                band_width(&stack(bound - 1))
            } else {
                1
            };
            if !is_full_upper_triangle(&full) || short_band >= d {
                misses.push(format!("d={d} k={k}"));
            }
        }
    }
    out.push(check(
        "structured",
        "layer_count_bound",
        misses.len() as f64,
        0.0,
        misses.is_empty(),
        if misses.is_empty() {
            "full triangle at the bound, strictly narrower band one layer earlier".to_string()
        } else {
            format!("violations: {}", misses.join(", "))
        },
    ));

    let d = 32;
    let w = MaskedLinear::<Tensor<f64>>::init(d, &mut rng);
    let count = w.weight.data().iter().filter(|v| **v != 0.0).count();
    out.push(check(
        "structured",
        "triangular_free_params",
        count as f64,
        masked_free_params(d) as f64,
        count <= masked_free_params(d) && crate::structured::mask_violations(&w.weight) == 0,
        "nonzero weights of a freshly drawn 32×32 masked map vs d(d+1)/2",
    ));

    for variant in [Variant::Triangular, Variant::Conv] {
        let mut leaks: f64 = 0.0;
        for _ in 0..50 {
            let t = Transform::<Tensor<f64>>::init(variant, true, 16, &[4, 4, 4], &mut rng)
                .expect("valid transform");
            let z = uniform(&mut rng, &[3, 16], -1.0, 1.0);
            let j = rng.gen_range(0..16);
            let mut zp = z.clone();
            for r in 0..3 {
                zp.set(r, j, z.at(r, j) + 1.0);
            }
            let apply = |z: &Tensor<f64>| {
                let mut g = Graph::new();
                let p = t.map("t", &mut |_, w| g.constant(w.clone()));
                let x = g.constant(z.clone());
                let y = p.forward(&mut g, x).expect("forward");
                g.value(y).clone()
            };
            let (a, b) = (apply(&z), apply(&zp));
            for r in 0..3 {
                for i in j + 1..16 {
                    leaks = leaks.max((a.at(r, i) - b.at(r, i)).abs());
                }
            }
        }
        out.push(check(
            "structured",
            format!("transform_causality.{}", variant_name(variant)),
            leaks,
            1e-12,
            leaks <= 1e-12,
            "max change at positions i > j after perturbing position j",
        ));
    }
    out
}

fn variant_name(v: Variant) -> &'static str {
    match v {
        Variant::Triangular => "triangular",
        Variant::Conv => "conv",
    }
}

/// The small model used for gradient checks.
pub fn gradcheck_config(variant: Variant, softmax: bool) -> ModelConfig {
    ModelConfig {
        lookback: 8,
        horizon: 4,
        channels: 3,
        d_model: 8,
        hippo_order: 4,
        depth: 2,
        heads: 2,
        kernel_sizes: vec![3, 3],
        variant,
        softmax,
        precision: Precision::F64,
        ..ModelConfig::default()
    }
}

/// Central-difference check of every parameter of `cfg`'s model on a seeded
/// two-sample batch.
pub fn model_gradcheck(
    cfg: &ModelConfig,
    seed: u64,
    eps: f64,
    tol: f64,
) -> Result<GradcheckReport, ModelError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let p = init_params::<f64>(cfg, seed)?;
    let rows = 2 * cfg.channels;
    let batch = Batch {
        lookback: uniform(&mut rng, &[rows, cfg.lookback], -2.0, 2.0),
        state: uniform(&mut rng, &[rows, cfg.hippo_order], -2.0, 2.0),
        channels: cfg.channels,
    };
    let target = uniform(&mut rng, &[rows, cfg.horizon], -2.0, 2.0);
    let named: Vec<(String, Tensor<f64>)> = p
        .slots()
        .into_iter()
        .map(|s| s.name)
        .zip(p.leaves().into_iter().cloned())
        .collect();
    let report = gradcheck(
        |g, vars| {
            let bound = p.with_leaves(vars.to_vec()).expect("one var per slot");
            batch_loss(g, &bound, &batch, &target, cfg).map_err(|e| match e {
                ModelError::Numerics(n) => n,
                other => NumericsError::Gradcheck(other.to_string()),
            })
        },
        &named,
        eps,
        tol,
    )?;
    Ok(report)
}

fn grad_suite(seed: u64) -> Vec<Check> {
    let mut out = Vec::new();
    for variant in [Variant::Triangular, Variant::Conv] {
        for softmax in [true, false] {
            let name = format!(
                "model_gradcheck.{}.softmax_{}",
                variant_name(variant),
                if softmax { "on" } else { "off" }
            );
            match model_gradcheck(&gradcheck_config(variant, softmax), seed, 1e-5, 1e-4) {
                Ok(r) => out.push(check(
                    "grad",
                    name,
                    r.max_rel_err,
                    1e-4,
                    r.pass,
                    format!(
                        "{} groups, {} kinks excluded, {} below resolution, worst {:?}",
                        r.groups.len(),
                        r.kinks,
                        r.below_resolution,
                        r.worst
                    ),
                )),
                Err(e) => out.push(check("grad", name, f64::NAN, 1e-4, false, e.to_string())),
            }
        }
    }
    out
}

fn model_suite(seed: u64) -> Vec<Check> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();

    // Instance normalization contract.
    let x = uniform(&mut rng, &[32, 5], -10.0, 10.0);
    let (n, stats) = instance_normalize(&x).expect("valid window");
    let back = instance_denormalize(&n, &stats).expect("matching stats");
    let mut moment_err: f64 = 0.0;
    for c in 0..5 {
        let col: Vec<f64> = (0..32).map(|r| n.at(r, c)).collect();
        let mean = col.iter().sum::<f64>() / 32.0;
        let std = (col.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 32.0).sqrt();
        moment_err = moment_err.max(mean.abs()).max((std - 1.0).abs());
    }
    let round_trip = back.max_abs_diff(&x);
    out.push(check(
        "model",
        "instance_norm.round_trip",
        round_trip,
        1e-6,
        round_trip <= 1e-6,
        "max |denormalize(normalize(x)) − x|",
    ));
    out.push(check(
        "model",
        "instance_norm.moments",
        moment_err,
        1e-6,
        moment_err <= 1e-6,
        "max per-channel |mean| and |std − 1|",
    ));

    // Channel permutation equivariance and attention simplex.
    for variant in [Variant::Triangular, Variant::Conv] {
        let cfg = ModelConfig {
            channels: 4,
            ..gradcheck_config(variant, true)
        };
        let p = init_params::<f64>(&cfg, seed).expect("valid config");
        let lb = uniform(&mut rng, &[4, 8], -2.0, 2.0);
        let st = uniform(&mut rng, &[4, 4], -2.0, 2.0);
        let perm = [2, 0, 3, 1];
        let permute = |t: &Tensor<f64>| {
            Tensor::from_rows(&perm.iter().map(|&r| t.row(r).to_vec()).collect::<Vec<_>>())
        };
        let run = |lb: Tensor<f64>, st: Tensor<f64>| {
            predict_batch(
                &p,
                &Batch {
                    lookback: lb,
                    state: st,
                    channels: 4,
                },
                &cfg,
            )
            .expect("forward")
        };
        let y = run(lb.clone(), st.clone());
        let yp = run(permute(&lb), permute(&st));
        let err = yp.max_abs_diff(&permute(&y));
        out.push(check(
            "model",
            format!("permutation_equivariance.{}", variant_name(variant)),
            err,
            1e-6,
            err <= 1e-6,
            "max |f(Px) − P f(x)| over a fixed channel permutation",
        ));

        let z = uniform(&mut rng, &[4, 8], -1.0, 1.0);
        let (_, scores) =
            encoder_stack_eval(&z, &p.blocks, 4, &cfg.block_config()).expect("forward");
        let mut row_err: f64 = 0.0;
        for s in &scores {
            for r in s.data().chunks(4) {
                row_err = row_err.max((r.iter().sum::<f64>() - 1.0).abs());
            }
        }
        out.push(check(
            "model",
            format!("attention_rows_sum_to_one.{}", variant_name(variant)),
            row_err,
            1e-6,
            row_err <= 1e-6,
            "max |Σ_j score[i, j] − 1| with softmax on",
        ));
    }

    // Free parameters per structured transform at d = 128.
    let cfg = ModelConfig::default();
    let p = init_params::<f32>(&cfg, seed).expect("default config");
    let counts: Vec<usize> = p.blocks[0]
        .transforms()
        .map(|(_, t)| t.weight_params())
        .collect();
    let want = 128 * 129 / 2;
    out.push(check(
        "model",
        "triangular_params_d128",
        counts[0] as f64,
        want as f64,
        counts.iter().all(|&c| c == want),
        format!(
            "free weights per transform {counts:?}; {:.1}% of d²",
            100.0 * want as f64 / (128.0 * 128.0)
        ),
    ));

    // Whole encoder stack is not causal along the embedding axis: attention
    // mixes every position into every score.
    let cfg = gradcheck_config(Variant::Triangular, true);
    let blocks: Vec<EncoderBlockParams<Tensor<f64>>> =
        init_params::<f64>(&cfg, seed).expect("valid").blocks;
    let z = uniform(&mut rng, &[3, 8], -1.0, 1.0);
    let mut zp = z.clone();
    for r in 0..3 {
        zp.set(r, 5, z.at(r, 5) + 1.0);
    }
    let bc = BlockConfig {
        heads: 2,
        ..cfg.block_config()
    };
    let (a, _) = encoder_stack_eval(&z, &blocks, 3, &bc).expect("forward");
    let (b, _) = encoder_stack_eval(&zp, &blocks, 3, &bc).expect("forward");
    let leak = (0..3)
        .flat_map(|r| (6..8).map(move |i| (r, i)))
        .map(|(r, i)| (a.at(r, i) - b.at(r, i)).abs())
        .fold(0.0, f64::max);
    out.push(Check {
        informational: true,
        ..check(
            "model",
            "encoder_stack_causality",
            leak,
            1e-9,
            leak <= 1e-9,
            "max change at positions 6..8 after perturbing position 5 through two blocks",
        )
    });
    out
}
