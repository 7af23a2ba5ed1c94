//! End-to-end forecaster: instance normalization, look-back/state fusion,
//! encoder stack and a dense decoder shared across channels.

mod checkpoint;

pub use checkpoint::{
    load_checkpoint, save_checkpoint, Checkpoint, CheckpointError, Manifest, TensorEntry,
    ARCHIVE_FILE, MANIFEST_FILE,
};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::attention::{self, AttentionError, BlockConfig, EncoderBlockParams, Variant};
use crate::numerics::{Graph, NumericsError, Scalar, Tensor, Var};
use crate::structured::{join, MaskedLinear, Slot};

/// Lower clamp on the per-window standard deviation.
pub const NORM_EPS: f64 = 1e-5;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("instance norm needs at least 2 time steps, got {0}")]
    ShortWindow(usize),
    #[error(transparent)]
    Attention(#[from] AttentionError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

impl std::str::FromStr for Precision {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "f32" => Ok(Self::F32),
            "f64" => Ok(Self::F64),
            other => Err(format!("unknown precision {other:?} (expected f32 or f64)")),
        }
    }
}

impl Precision {
    pub fn name(self) -> &'static str {
        match self {
            Self::F32 => "f32",
            Self::F64 => "f64",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub lookback: usize,
    pub horizon: usize,
    pub channels: usize,
    pub d_model: usize,
    pub hippo_order: usize,
    pub depth: usize,
    pub heads: usize,
    pub variant: Variant,
    pub kernel_sizes: Vec<usize>,
    pub softmax: bool,
    pub residual: bool,
    pub second_ff: bool,
    /// False swaps every structured transform for a dense one.
    pub constrained: bool,
    pub use_hippo: bool,
    pub use_lookback: bool,
    pub precision: Precision,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            lookback: 96,
            horizon: 96,
            channels: 7,
            d_model: 128,
            hippo_order: 64,
            depth: 2,
            heads: 8,
            variant: Variant::Triangular,
            kernel_sizes: vec![32, 32, 32],
            softmax: true,
            residual: true,
            second_ff: false,
            constrained: true,
            use_hippo: true,
            use_lookback: true,
            precision: Precision::F32,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let positive = [
            ("lookback", self.lookback),
            ("horizon", self.horizon),
            ("channels", self.channels),
            ("d_model", self.d_model),
            ("hippo_order", self.hippo_order),
            ("depth", self.depth),
            ("heads", self.heads),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(ModelError::Config(format!("{name} must be at least 1")));
            }
        }
        if self.lookback < 2 {
            return Err(ModelError::Config("lookback must be at least 2".into()));
        }
        if self.d_model % self.heads != 0 {
            return Err(ModelError::Config(format!(
                "d_model {} is not divisible by heads {}",
                self.d_model, self.heads
            )));
        }
        if self.variant == Variant::Conv && self.constrained {
            if self.kernel_sizes.is_empty() {
                return Err(ModelError::Config("kernel_sizes must not be empty".into()));
            }
            if let Some(&k) = self
                .kernel_sizes
                .iter()
                .find(|&&k| k == 0 || k > self.d_model)
            {
                return Err(ModelError::Config(format!(
                    "kernel size {k} must lie in 1..={}",
                    self.d_model
                )));
            }
        }
        Ok(())
    }

    pub fn block_config(&self) -> BlockConfig {
        BlockConfig {
            heads: self.heads,
            softmax: self.softmax,
            residual: self.residual,
            second_ff: self.second_ff,
        }
    }
}

/// Every trainable tensor of the forecaster.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<P> {
    /// Look-back MLP `L → d → d`.
    pub inner: [MaskedLinear<P>; 2],
    /// Fusion MLP `(d + N) → d → d`.
    pub outer: [MaskedLinear<P>; 2],
    pub blocks: Vec<EncoderBlockParams<P>>,
    /// Dense `d → H`, shared across channels.
    pub decoder: MaskedLinear<P>,
}

impl<P> ModelParams<P> {
    /// Rebuilds the tree leaf by leaf in a fixed canonical order.
    pub fn map<'a, Q>(&'a self, f: &mut dyn FnMut(&Slot, &'a P) -> Q) -> ModelParams<Q> {
        ModelParams {
            inner: [
                self.inner[0].map("inner.0", false, f),
                self.inner[1].map("inner.1", false, f),
            ],
            outer: [
                self.outer[0].map("outer.0", false, f),
                self.outer[1].map("outer.1", false, f),
            ],
            blocks: self
                .blocks
                .iter()
                .enumerate()
                .map(|(i, b)| b.map(&join("blocks", &i.to_string()), f))
                .collect(),
            decoder: self.decoder.map("decoder", false, f),
        }
    }

    pub fn visit_mut(&mut self, f: &mut dyn FnMut(&Slot, &mut P)) {
        self.inner[0].visit_mut("inner.0", false, f);
        self.inner[1].visit_mut("inner.1", false, f);
        self.outer[0].visit_mut("outer.0", false, f);
        self.outer[1].visit_mut("outer.1", false, f);
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.visit_mut(&join("blocks", &i.to_string()), f);
        }
        self.decoder.visit_mut("decoder", false, f);
    }

    /// Same layout, leaves replaced in canonical order; `None` if the count is off.
    pub fn with_leaves<Q>(&self, leaves: Vec<Q>) -> Option<ModelParams<Q>> {
        if leaves.len() != self.slots().len() {
            return None;
        }
        let mut it = leaves.into_iter();
        Some(self.map(&mut |_, _| it.next().expect("length checked")))
    }

    pub fn slots(&self) -> Vec<Slot> {
        let mut out = Vec::new();
        self.map(&mut |s, _| out.push(s.clone()));
        out
    }

    pub fn leaves(&self) -> Vec<&P> {
        let mut out = Vec::new();
        self.map(&mut |_, p| out.push(p));
        out
    }
}

impl<T: Scalar> ModelParams<Tensor<T>> {
    /// Rebuilds a tree of the same layout from tensors in canonical order.
    pub fn from_leaves(like: &Self, leaves: Vec<Tensor<T>>) -> Result<Self, ModelError> {
        let expected = like.slots().len();
        if leaves.len() != expected {
            return Err(ModelError::Shape(format!(
                "{} tensors for {expected} slots",
                leaves.len()
            )));
        }
        let mut it = leaves.into_iter();
        let mut bad = None;
        let out = like.map(&mut |s, t| {
            let next = it.next().expect("length checked");
            if next.shape() != t.shape() && bad.is_none() {
                bad = Some(format!("{}: {:?} vs {:?}", s.name, next.shape(), t.shape()));
            }
            next
        });
        match bad {
            Some(msg) => Err(ModelError::Shape(msg)),
            None => Ok(out),
        }
    }

    pub fn bind(&self, g: &mut Graph<T>) -> ModelParams<Var> {
        self.map(&mut |_, t| g.param(t.clone()))
    }

    pub fn constant(&self, g: &mut Graph<T>) -> ModelParams<Var> {
        self.map(&mut |_, t| g.constant(t.clone()))
    }

    pub fn cast<U: Scalar>(&self) -> ModelParams<Tensor<U>> {
        self.map(&mut |_, t| t.cast())
    }

    pub fn total_params(&self) -> usize {
        self.leaves().iter().map(|t| t.len()).sum()
    }

    /// Trainable entries: masked strictly-lower weight entries are excluded.
    pub fn free_params(&self) -> usize {
        let mut n = 0;
        self.map(&mut |s, t| {
            n += if s.masked {
                crate::structured::masked_free_params(t.cols())
            } else {
                t.len()
            }
        });
        n
    }

    /// Strictly-lower nonzero entries across masked slots.
    pub fn mask_violations(&self) -> usize {
        let mut n = 0;
        self.map(&mut |s, t| {
            if s.masked {
                n += crate::structured::mask_violations(t);
            }
        });
        n
    }
}

/// Seeded initialization.
pub fn init_params<T: Scalar>(
    cfg: &ModelConfig,
    seed: u64,
) -> Result<ModelParams<Tensor<T>>, ModelError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = cfg.d_model;
    let inner = [
        MaskedLinear::init_dense(cfg.lookback, d, &mut rng),
        MaskedLinear::init_dense(d, d, &mut rng),
    ];
    let outer = [
        MaskedLinear::init_dense(d + cfg.hippo_order, d, &mut rng),
        MaskedLinear::init_dense(d, d, &mut rng),
    ];
    let block_cfg = cfg.block_config();
    let blocks = (0..cfg.depth)
        .map(|_| {
            EncoderBlockParams::init(
                cfg.variant,
                cfg.constrained,
                d,
                &cfg.kernel_sizes,
                &block_cfg,
                &mut rng,
            )
        })
        .collect::<Result<Vec<_>, _>>()?;
    let decoder = MaskedLinear::init_dense(d, cfg.horizon, &mut rng);
    Ok(ModelParams {
        inner,
        outer,
        blocks,
        decoder,
    })
}

/// Per-channel statistics of one look-back window.
#[derive(Clone, Debug, PartialEq)]
pub struct InstanceNormStats<T> {
    pub mean: Vec<T>,
    /// Population standard deviation, clamped below at [`NORM_EPS`].
    pub std: Vec<T>,
}

/// Standardizes each column of an `L×C` window.
pub fn instance_normalize<T: Scalar>(
    x: &Tensor<T>,
) -> Result<(Tensor<T>, InstanceNormStats<T>), ModelError> {
    if x.shape().len() != 2 {
        return Err(ModelError::Shape(format!(
            "window must be L×C, got {:?}",
            x.shape()
        )));
    }
    let (l, c) = x.dims2();
    if l < 2 {
        return Err(ModelError::ShortWindow(l));
    }
    let cols = x.transpose();
    let mut mean = Vec::with_capacity(c);
    let mut std = Vec::with_capacity(c);
    let mut out = Tensor::zeros(&[c, l]);
    for ch in 0..c {
        let (m, s) = row_stats(cols.row(ch));
        for (o, &v) in out.data_mut()[ch * l..(ch + 1) * l]
            .iter_mut()
            .zip(cols.row(ch))
        {
            *o = (v - m) / s;
        }
        mean.push(m);
        std.push(s);
    }
    Ok((out.transpose(), InstanceNormStats { mean, std }))
}

/// `ŷ·std + mean` per column of an `H×C` forecast.
pub fn instance_denormalize<T: Scalar>(
    y: &Tensor<T>,
    stats: &InstanceNormStats<T>,
) -> Result<Tensor<T>, ModelError> {
    let c = y.cols();
    if y.shape().len() != 2 || stats.mean.len() != c || stats.std.len() != c {
        return Err(ModelError::Shape(format!(
            "forecast {:?} vs stats for {} channels",
            y.shape(),
            stats.mean.len()
        )));
    }
    let mut out = y.clone();
    for row in out.data_mut().chunks_mut(c) {
        for ((v, &m), &s) in row.iter_mut().zip(&stats.mean).zip(&stats.std) {
            *v = *v * s + m;
        }
    }
    Ok(out)
}

fn row_stats<T: Scalar>(row: &[T]) -> (T, T) {
    let n = T::of(row.len() as f64);
    let mean = row.iter().copied().sum::<T>() / n;
    let std = crate::numerics::row_population_std(row).max(T::of(NORM_EPS));
    (mean, std)
}

/// Inputs for a batch of `G` samples, one row per (sample, channel).
#[derive(Clone, Debug)]
pub struct Batch<T> {
    /// `[G·C, L]` raw look-back rows.
    pub lookback: Tensor<T>,
    /// `[G·C, N]` cumulative states.
    pub state: Tensor<T>,
    pub channels: usize,
}

impl<T: Scalar> Batch<T> {
    /// Builds a batch from `L×C` windows and `C×N` states (as stored by the hippo prefix table).
    pub fn from_windows(
        windows: &[(&[f64], &[f64])],
        lookback: usize,
        channels: usize,
        order: usize,
    ) -> Result<Self, ModelError> {
        if windows.is_empty() {
            return Err(ModelError::Shape("empty batch".into()));
        }
        let g = windows.len();
        let mut lb = Vec::with_capacity(g * channels * lookback);
        let mut st = Vec::with_capacity(g * channels * order);
        for (x, c) in windows {
            if x.len() != lookback * channels || c.len() != channels * order {
                return Err(ModelError::Shape(format!(
                    "window of {} values and state of {} for L={lookback}, C={channels}, N={order}",
                    x.len(),
                    c.len()
                )));
            }
            for ch in 0..channels {
                lb.extend((0..lookback).map(|t| T::of(x[t * channels + ch])));
            }
            st.extend(c.iter().map(|&v| T::of(v)));
        }
        Ok(Self {
            lookback: Tensor::new(&[g * channels, lookback], lb)?,
            state: Tensor::new(&[g * channels, order], st)?,
            channels,
        })
    }

    pub fn samples(&self) -> usize {
        self.lookback.rows() / self.channels
    }
}

/// Graph handles produced by one forward pass.
pub struct Forward {
    /// `[G·C, H]` denormalized forecasts.
    pub yhat: Var,
    /// Per block `[G·H_heads, C, C]` scores.
    pub scores: Vec<Var>,
}

/// Two-layer MLP with a hidden ReLU.
fn mlp<T: Scalar>(
    g: &mut Graph<T>,
    layers: &[MaskedLinear<Var>; 2],
    x: Var,
) -> Result<Var, NumericsError> {
    let h = layers[0].forward(g, x)?;
    let h = g.relu(h)?;
    layers[1].forward(g, h)
}

/// `Z = MLP(Concat([MLP(l), c]))` per row.
pub fn embed_fuse<T: Scalar>(
    g: &mut Graph<T>,
    p: &ModelParams<Var>,
    lookback_norm: Var,
    state: Var,
) -> Result<Var, NumericsError> {
    let l = mlp(g, &p.inner, lookback_norm)?;
    let joined = g.concat_cols(l, state)?;
    mlp(g, &p.outer, joined)
}

/// Full forward pass on a batch.
pub fn forward_graph<T: Scalar>(
    g: &mut Graph<T>,
    p: &ModelParams<Var>,
    batch: &Batch<T>,
    cfg: &ModelConfig,
) -> Result<Forward, ModelError> {
    let rows = batch.lookback.rows();
    if batch.lookback.cols() != cfg.lookback
        || batch.state.cols() != cfg.hippo_order
        || batch.state.rows() != rows
        || batch.channels != cfg.channels
    {
        return Err(ModelError::Shape(format!(
            "batch lookback {:?}, state {:?}, C={} for config L={}, N={}, C={}",
            batch.lookback.shape(),
            batch.state.shape(),
            batch.channels,
            cfg.lookback,
            cfg.hippo_order,
            cfg.channels
        )));
    }
    let l = cfg.lookback;
    let mut normed = Tensor::zeros(&[rows, l]);
    let mut mean = Vec::with_capacity(rows);
    let mut std = Vec::with_capacity(rows);
    for r in 0..rows {
        let (m, s) = row_stats(batch.lookback.row(r));
        if cfg.use_lookback {
            for (o, &v) in normed.data_mut()[r * l..(r + 1) * l]
                .iter_mut()
                .zip(batch.lookback.row(r))
            {
                *o = (v - m) / s;
            }
        }
        mean.push(m);
        std.push(s);
    }
    let state = if cfg.use_hippo {
        batch.state.clone()
    } else {
        Tensor::zeros(batch.state.shape())
    };
    let x = g.constant(normed);
    let c = g.constant(state);
    let mut z = embed_fuse(g, p, x, c)?;
    let block_cfg = cfg.block_config();
    let mut scores = Vec::with_capacity(p.blocks.len());
    for b in &p.blocks {
        let out = attention::encoder_block(g, z, b, cfg.channels, &block_cfg)?;
        scores.push(out.scores);
        z = out.out;
    }
    let y = p.decoder.forward(g, z)?;
    let h = cfg.horizon;
    let spread = |v: &[T]| {
        let data = v.iter().flat_map(|&s| std::iter::repeat_n(s, h)).collect();
        Tensor::new(&[rows, h], data)
    };
    let std_t = g.constant(spread(&std)?);
    let mean_t = g.constant(spread(&mean)?);
    let scaled = g.mul(y, std_t)?;
    let yhat = g.add(scaled, mean_t)?;
    Ok(Forward { yhat, scores })
}

/// Mean squared error of a batch forecast against `[G·C, H]` targets.
pub fn batch_loss<T: Scalar>(
    g: &mut Graph<T>,
    p: &ModelParams<Var>,
    batch: &Batch<T>,
    target: &Tensor<T>,
    cfg: &ModelConfig,
) -> Result<Var, ModelError> {
    let f = forward_graph(g, p, batch, cfg)?;
    let y = g.constant(target.clone());
    Ok(g.mse(f.yhat, y)?)
}

/// Forecast for a batch, as `[G·C, H]` rows.
pub fn predict_batch<T: Scalar>(
    params: &ModelParams<Tensor<T>>,
    batch: &Batch<T>,
    cfg: &ModelConfig,
) -> Result<Tensor<T>, ModelError> {
    let mut g = Graph::new();
    let p = params.constant(&mut g);
    let f = forward_graph(&mut g, &p, batch, cfg)?;
    Ok(g.value(f.yhat).clone())
}

/// Single-sample forecast: `x` is `L×C`, `c` is `N×C`; returns `H×C`.
pub fn forward<T: Scalar>(
    x: &Tensor<T>,
    c: &Tensor<T>,
    params: &ModelParams<Tensor<T>>,
    cfg: &ModelConfig,
) -> Result<Tensor<T>, ModelError> {
    let (l, ch) = x.dims2();
    if c.dims2() != (cfg.hippo_order, ch) || x.shape().len() != 2 {
        return Err(ModelError::Shape(format!(
            "x {:?} with c {:?}",
            x.shape(),
            c.shape()
        )));
    }
    let batch = Batch {
        lookback: x.transpose(),
        state: c.transpose(),
        channels: ch,
    };
    debug_assert_eq!(batch.lookback.cols(), l);
    Ok(predict_batch(params, &batch, cfg)?.transpose())
}

/// Mean of squared differences.
pub fn mse_loss<T: Scalar>(y: &Tensor<T>, yhat: &Tensor<T>) -> Result<f64, ModelError> {
    let d = y.sub(yhat)?;
    Ok(d.data()
        .iter()
        .map(|v| v.as_f64() * v.as_f64())
        .sum::<f64>()
        / d.len() as f64)
}

/// Mean of absolute differences.
pub fn mae_metric<T: Scalar>(y: &Tensor<T>, yhat: &Tensor<T>) -> Result<f64, ModelError> {
    let d = y.sub(yhat)?;
    Ok(d.data().iter().map(|v| v.as_f64().abs()).sum::<f64>() / d.len() as f64)
}
