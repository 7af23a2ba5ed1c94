//! Adam with frozen structured masks, seeded shuffling, early stopping and
//! resumable checkpoints.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;

use crate::data::{evaluate, DataError, Dataset, Forecaster, Sample};
use crate::model::{
    batch_loss, predict_batch, save_checkpoint, Batch, Checkpoint, CheckpointError, ModelConfig,
    ModelError, ModelParams,
};
use crate::numerics::{Graph, NumericsError, Scalar, Tensor};
use crate::structured::in_support;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("non-finite gradient in {0}")]
    NonFiniteGradient(String),
    #[error("loss diverged at epoch {epoch}, step {step}{}", last_good.as_ref().map(|p| format!("; last good checkpoint at {}", p.display())).unwrap_or_default())]
    Diverged {
        epoch: usize,
        step: u64,
        last_good: Option<PathBuf>,
    },
    #[error("no {0} samples")]
    NoSamples(&'static str),
    #[error("resume state is inconsistent: {0}")]
    Resume(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Global gradient-norm cap; off by default.
    pub clip_norm: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            batch_size: 32,
            max_epochs: 10,
            patience: 3,
            seed: 0,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            clip_norm: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::Config(m));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            ));
        }
        if self.batch_size == 0 || self.max_epochs == 0 || self.patience == 0 {
            return bad("batch_size, max_epochs and patience must be positive".into());
        }
        if self.patience > self.max_epochs {
            return bad(format!(
                "patience {} exceeds max_epochs {}",
                self.patience, self.max_epochs
            ));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad(format!(
                "betas must lie in [0, 1), got {} and {}",
                self.beta1, self.beta2
            ));
        }
        if !(self.adam_eps > 0.0) {
            return bad("adam_eps must be positive".into());
        }
        if let Some(c) = self.clip_norm {
            if !(c > 0.0 && c.is_finite()) {
                return bad(format!("clip_norm must be positive, got {c}"));
            }
        }
        Ok(())
    }
}

/// First and second moments, one tensor per parameter slot in canonical order.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub step: u64,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(params: &ModelParams<Tensor<T>>) -> Self {
        let zeros: Vec<Tensor<T>> = params
            .leaves()
            .iter()
            .map(|t| Tensor::zeros(t.shape()))
            .collect();
        Self {
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }
}

/// One bias-corrected Adam update. On masked slots the gradient and both
/// moments are zeroed outside the support, so masked weights never move.
pub fn adam_step<T: Scalar>(
    params: &mut ModelParams<Tensor<T>>,
    grads: &[Tensor<T>],
    state: &mut AdamState<T>,
    cfg: &TrainConfig,
) -> Result<(), TrainError> {
    let n = state.m.len();
    if grads.len() != n || state.v.len() != n {
        return Err(TrainError::Config(format!(
            "{} gradients for {n} moment slots",
            grads.len()
        )));
    }
    let slots = params.slots();
    for (slot, g) in slots.iter().zip(grads) {
        if !g.all_finite() {
            return Err(TrainError::NonFiniteGradient(slot.name.clone()));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (cfg.beta1, cfg.beta2);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    let mut i = 0;
    let mut shape_err = None;
    params.visit_mut(&mut |slot, w| {
        let (g, m, v) = (&grads[i], &mut state.m[i], &mut state.v[i]);
        i += 1;
        if g.shape() != w.shape() || m.shape() != w.shape() {
            shape_err.get_or_insert_with(|| {
                format!(
                    "{}: grad {:?} vs param {:?}",
                    slot.name,
                    g.shape(),
                    w.shape()
                )
            });
            return;
        }
        let cols = w.shape().last().copied().unwrap_or(1);
        let (w, m, v) = (w.data_mut(), m.data_mut(), v.data_mut());
        for (k, &gk) in g.data().iter().enumerate() {
            if slot.masked && !in_support(k / cols, k % cols) {
                m[k] = T::zero();
                v[k] = T::zero();
                w[k] = T::zero();
                continue;
            }
            let gk = gk.as_f64();
            let mk = b1 * m[k].as_f64() + (1.0 - b1) * gk;
            let vk = b2 * v[k].as_f64() + (1.0 - b2) * gk * gk;
            m[k] = T::of(mk);
            v[k] = T::of(vk);
            let update = cfg.learning_rate * (mk / c1) / ((vk / c2).sqrt() + cfg.adam_eps);
            w[k] = T::of(w[k].as_f64() - update);
        }
    });
    match shape_err {
        Some(msg) => Err(TrainError::Config(msg)),
        None => Ok(()),
    }
}

/// Rescales all gradients together so their joint L2 norm is at most `max`.
pub fn clip_global_norm<T: Scalar>(grads: &mut [Tensor<T>], max: f64) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|g| g.data().iter())
        .map(|v| v.as_f64() * v.as_f64())
        .sum::<f64>()
        .sqrt();
    if norm > max {
        let s = T::of(max / norm);
        for g in grads.iter_mut() {
            for v in g.data_mut() {
                *v *= s;
            }
        }
    }
    norm
}

/// Stacks dataset samples into a model batch and its `[G·C, H]` target.
pub fn make_batch<T: Scalar>(
    ds: &Dataset,
    samples: &[Sample],
    cfg: &ModelConfig,
) -> Result<(Batch<T>, Tensor<T>), ModelError> {
    let c = ds.channels();
    let windows: Vec<(&[f64], &[f64])> = samples
        .iter()
        .map(|&s| (ds.lookback(s), ds.state(s)))
        .collect();
    let batch = Batch::from_windows(&windows, cfg.lookback, c, cfg.hippo_order)?;
    let h = ds.horizon;
    let mut target = Vec::with_capacity(samples.len() * c * h);
    for &s in samples {
        let y = ds.target(s);
        for ch in 0..c {
            target.extend((0..h).map(|k| T::of(y[k * c + ch])));
        }
    }
    Ok((batch, Tensor::new(&[samples.len() * c, h], target)?))
}

/// Loss and per-slot gradients for one minibatch.
pub fn loss_and_grads<T: Scalar>(
    params: &ModelParams<Tensor<T>>,
    batch: &Batch<T>,
    target: &Tensor<T>,
    cfg: &ModelConfig,
) -> Result<(f64, Vec<Tensor<T>>), TrainError> {
    let mut g = Graph::new();
    let p = params.bind(&mut g);
    let loss = batch_loss(&mut g, &p, batch, target, cfg)?;
    let value = g.value(loss).data()[0].as_f64();
    if !value.is_finite() {
        return Ok((value, Vec::new()));
    }
    let mut grads = g.backward(loss)?;
    let out = params
        .leaves()
        .into_iter()
        .zip(p.leaves())
        .map(|(t, &v)| grads.take(v).unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();
    Ok((value, out))
}

/// Serves model forecasts to the evaluation harness.
pub struct ModelForecaster<'a, T> {
    pub params: &'a ModelParams<Tensor<T>>,
    pub config: &'a ModelConfig,
}

impl<T: Scalar> Forecaster for ModelForecaster<'_, T> {
    fn forecast(&self, ds: &Dataset, samples: &[Sample]) -> Result<Vec<f64>, DataError> {
        let wrap = |e: ModelError| DataError::Forecast(e.to_string());
        let (batch, _) = make_batch::<T>(ds, samples, self.config).map_err(wrap)?;
        let y = predict_batch(self.params, &batch, self.config).map_err(wrap)?;
        let (c, h) = (ds.channels(), ds.horizon);
        let mut out = Vec::with_capacity(samples.len() * h * c);
        for s in 0..samples.len() {
            for k in 0..h {
                out.extend((0..c).map(|ch| y.at(s * c + ch, k).as_f64()));
            }
        }
        Ok(out)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub steps: u64,
    /// Mean minibatch loss over the epoch.
    pub train_loss: f64,
    pub val_mse: f64,
    pub best_val_mse: f64,
    pub improved: bool,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct History {
    pub seed: u64,
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: Option<usize>,
    pub stopped_early: bool,
}

impl History {
    pub fn write(&self, path: &Path) -> Result<(), DataError> {
        crate::data::write_metrics_json(path, self)
    }
}

/// Resumable training state.
pub struct Trainer<'a, T> {
    ds: &'a Dataset,
    model: ModelConfig,
    cfg: TrainConfig,
    pub params: ModelParams<Tensor<T>>,
    pub best: ModelParams<Tensor<T>>,
    pub adam: AdamState<T>,
    pub history: History,
    best_val: f64,
    bad_epochs: usize,
}

const LAST_DIR: &str = "last";
const BEST_DIR: &str = "best";

impl<'a, T: Scalar> Trainer<'a, T> {
    pub fn new(
        ds: &'a Dataset,
        model: &ModelConfig,
        cfg: &TrainConfig,
        params: ModelParams<Tensor<T>>,
    ) -> Result<Self, TrainError> {
        cfg.validate()?;
        model.validate()?;
        if ds.channels() != model.channels
            || ds.lookback != model.lookback
            || ds.horizon != model.horizon
        {
            return Err(TrainError::Config(format!(
                "dataset has C={}, L={}, H={} but the model expects C={}, L={}, H={}",
                ds.channels(),
                ds.lookback,
                ds.horizon,
                model.channels,
                model.lookback,
                model.horizon
            )));
        }
        Ok(Self {
            ds,
            model: model.clone(),
            cfg: cfg.clone(),
            adam: AdamState::new(&params),
            best: params.clone(),
            params,
            history: History {
                seed: cfg.seed,
                ..History::default()
            },
            best_val: f64::INFINITY,
            bad_epochs: 0,
        })
    }

    pub fn epoch(&self) -> usize {
        self.history.epochs.len()
    }

    pub fn best_val(&self) -> f64 {
        self.best_val
    }

    pub fn finished(&self) -> bool {
        self.history.stopped_early || self.epoch() >= self.cfg.max_epochs
    }

    /// One forward/backward/update on `samples`; returns the minibatch loss.
    pub fn train_step(&mut self, samples: &[Sample]) -> Result<f64, TrainError> {
        let (batch, target) = make_batch::<T>(self.ds, samples, &self.model)?;
        let (loss, mut grads) = loss_and_grads(&self.params, &batch, &target, &self.model)?;
        if !loss.is_finite() {
            return Err(TrainError::Diverged {
                epoch: self.epoch(),
                step: self.adam.step,
                last_good: None,
            });
        }
        if let Some(max) = self.cfg.clip_norm {
            clip_global_norm(&mut grads, max);
        }
        adam_step(&mut self.params, &grads, &mut self.adam, &self.cfg)?;
        Ok(loss)
    }

    /// Scaled-space MSE of the current parameters.
    pub fn validation_mse(&self, samples: &[Sample]) -> Result<f64, TrainError> {
        let f = ModelForecaster {
            params: &self.params,
            config: &self.model,
        };
        Ok(evaluate(self.ds, &f, samples, self.cfg.batch_size)?.0.mse)
    }

    /// Order of training samples for `epoch`, a pure function of seed and epoch.
    pub fn epoch_order(&self, train: &[Sample], epoch: usize) -> Vec<Sample> {
        let mut order = train.to_vec();
        let mixed = self.cfg.seed ^ (epoch as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(mixed));
        order
    }

    pub fn run_epoch(
        &mut self,
        train: &[Sample],
        val: &[Sample],
    ) -> Result<EpochRecord, TrainError> {
        if train.is_empty() {
            return Err(TrainError::NoSamples("training"));
        }
        if val.is_empty() {
            return Err(TrainError::NoSamples("validation"));
        }
        let epoch = self.epoch();
        let order = self.epoch_order(train, epoch);
        let mut total = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(self.cfg.batch_size) {
            total += self.train_step(chunk)?;
            batches += 1;
        }
        let val_mse = self.validation_mse(val)?;
        if !val_mse.is_finite() {
            return Err(TrainError::Diverged {
                epoch,
                step: self.adam.step,
                last_good: None,
            });
        }
        let improved = val_mse < self.best_val;
        if improved {
            self.best_val = val_mse;
            self.best = self.params.clone();
            self.bad_epochs = 0;
            self.history.best_epoch = Some(epoch);
        } else {
            self.bad_epochs += 1;
            self.history.stopped_early = self.bad_epochs >= self.cfg.patience;
        }
        let rec = EpochRecord {
            epoch,
            steps: self.adam.step,
            train_loss: total / batches as f64,
            val_mse,
            best_val_mse: self.best_val,
            improved,
        };
        self.history.epochs.push(rec.clone());
        Ok(rec)
    }

    /// Runs epochs until the budget or patience runs out. With `dir`, the
    /// full state goes to `dir/last` after every epoch and the best
    /// parameters to `dir/best`; a divergence error then points at `dir/last`.
    pub fn fit(
        &mut self,
        train: &[Sample],
        val: &[Sample],
        dir: Option<&Path>,
    ) -> Result<(), TrainError> {
        while !self.finished() {
            match self.run_epoch(train, val) {
                Ok(rec) => {
                    if let Some(dir) = dir {
                        save_checkpoint(&dir.join(LAST_DIR), &self.checkpoint())?;
                        if rec.improved {
                            save_checkpoint(&dir.join(BEST_DIR), &self.best_checkpoint())?;
                        }
                    }
                }
                Err(TrainError::Diverged { epoch, step, .. }) => {
                    let last_good = dir.map(|d| d.join(LAST_DIR)).filter(|p| p.exists());
                    return Err(TrainError::Diverged {
                        epoch,
                        step,
                        last_good,
                    });
                }
                Err(e) => return Err(e),
            }
        }
        Ok(())
    }

    /// Best parameters only, ready for evaluation.
    pub fn best_checkpoint(&self) -> Checkpoint<T> {
        Checkpoint {
            config: self.model.clone(),
            seed: self.cfg.seed,
            params: self.best.clone(),
            extra: Vec::new(),
            meta: json!({ "epoch": self.history.best_epoch, "val_mse": self.best_val }),
        }
    }

    /// Current parameters plus everything needed to resume bit-exactly.
    pub fn checkpoint(&self) -> Checkpoint<T> {
        let slots = self.params.slots();
        let mut extra = Vec::with_capacity(3 * slots.len());
        for (prefix, tensors) in [("adam.m", &self.adam.m), ("adam.v", &self.adam.v)] {
            for (s, t) in slots.iter().zip(tensors) {
                extra.push((format!("{prefix}.{}", s.name), t.clone()));
            }
        }
        for (s, t) in slots.iter().zip(self.best.leaves()) {
            extra.push((format!("best.{}", s.name), t.clone()));
        }
        Checkpoint {
            config: self.model.clone(),
            seed: self.cfg.seed,
            params: self.params.clone(),
            extra,
            meta: json!({
                "adam_step": self.adam.step,
                // JSON has no infinity; null stands for "no epoch yet".
                "best_val": self.best_val.is_finite().then_some(self.best_val),
                "bad_epochs": self.bad_epochs,
                "history": self.history,
                "train": self.cfg,
            }),
        }
    }

    /// Restores a state written by [`Trainer::checkpoint`]. The training
    /// config may differ only in `max_epochs` (to extend a run).
    pub fn resume(
        ds: &'a Dataset,
        cfg: &TrainConfig,
        ckpt: Checkpoint<T>,
    ) -> Result<Self, TrainError> {
        let err = |m: &str| TrainError::Resume(m.to_string());
        let meta = &ckpt.meta;
        let stored: TrainConfig = serde_json::from_value(meta["train"].clone())
            .map_err(|e| TrainError::Resume(e.to_string()))?;
        if (TrainConfig {
            max_epochs: cfg.max_epochs,
            ..stored
        }) != *cfg
        {
            return Err(err("training config differs from the checkpointed run"));
        }
        let mut t = Self::new(ds, &ckpt.config, cfg, ckpt.params)?;
        let n = t.params.slots().len();
        if ckpt.extra.len() != 3 * n {
            return Err(err("optimizer tensors missing"));
        }
        let mut extra = ckpt.extra.into_iter().map(|(_, t)| t);
        t.adam.m = extra.by_ref().take(n).collect();
        t.adam.v = extra.by_ref().take(n).collect();
        t.best = ModelParams::from_leaves(&t.params, extra.collect())?;
        t.adam.step = meta["adam_step"].as_u64().ok_or_else(|| err("adam_step"))?;
        t.best_val = meta["best_val"].as_f64().unwrap_or(f64::INFINITY);
        t.bad_epochs = meta["bad_epochs"]
            .as_u64()
            .ok_or_else(|| err("bad_epochs"))? as usize;
        t.history = serde_json::from_value(meta["history"].clone())
            .map_err(|e| TrainError::Resume(e.to_string()))?;
        Ok(t)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::Variant;
    use crate::data::{MultivariateSeries, Split, SplitSpec};
    use crate::model::{init_params, load_checkpoint};

    fn tiny(variant: Variant) -> ModelConfig {
        ModelConfig {
            lookback: 8,
            horizon: 4,
            channels: 2,
            d_model: 8,
            hippo_order: 4,
            heads: 2,
            kernel_sizes: vec![3, 3],
            variant,
            ..ModelConfig::default()
        }
    }

    fn toy_dataset() -> Dataset {
        let t = 200;
        let values = (0..t)
            .flat_map(|i| {
                let x = i as f64;
                [(x * 0.3).sin() + 0.01 * x, (x * 0.17).cos() * 2.0]
            })
            .collect();
        let series = MultivariateSeries::from_values(2, values).unwrap();
        let spec = SplitSpec::Sizes {
            train: 140,
            val: 30,
            test: 30,
        };
        Dataset::prepare(series, &spec, 8, 4, 4).unwrap()
    }

    fn scalar_params(w: f64) -> ModelParams<Tensor<f64>> {
        let mut p = init_params::<f64>(&tiny(Variant::Triangular), 0).unwrap();
        p.visit_mut(&mut |_, t| *t = Tensor::zeros(t.shape()));
        p.decoder.bias.data_mut()[0] = w;
        p
    }

    fn grads_like(p: &ModelParams<Tensor<f64>>, value: f64) -> Vec<Tensor<f64>> {
        p.leaves()
            .iter()
            .map(|t| Tensor::full(t.shape(), value))
            .collect()
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut p = scalar_params(0.0);
        let mut st = AdamState::new(&p);
        let cfg = TrainConfig {
            learning_rate: 0.1,
            ..TrainConfig::default()
        };
        let g = grads_like(&p, 1.0);
        adam_step(&mut p, &g, &mut st, &cfg).unwrap();
        assert!((p.decoder.bias.data()[0] + 0.1).abs() < 1e-6);
        assert_eq!(st.step, 1);
    }

    #[test]
    fn zero_gradients_leave_params_unchanged() {
        let mut p = init_params::<f64>(&tiny(Variant::Triangular), 4).unwrap();
        let before = p.clone();
        let mut st = AdamState::new(&p);
        for _ in 0..5 {
            let g = grads_like(&p, 0.0);
            adam_step(&mut p, &g, &mut st, &TrainConfig::default()).unwrap();
        }
        assert_eq!(p, before);
    }

    #[test]
    fn moments_follow_their_recurrence() {
        let mut p = scalar_params(0.0);
        let mut st = AdamState::new(&p);
        let cfg = TrainConfig::default();
        let (mut m, mut v) = (0.0, 0.0);
        for _ in 0..10 {
            let g = grads_like(&p, 0.5);
            adam_step(&mut p, &g, &mut st, &cfg).unwrap();
            m = 0.9 * m + 0.1 * 0.5;
            v = 0.999 * v + 0.001 * 0.25;
        }
        let last = st.m.len() - 1;
        assert!((st.m[last].data()[0] - m).abs() < 1e-15);
        assert!((st.v[last].data()[0] - v).abs() < 1e-15);
    }

    #[test]
    fn masked_entries_stay_zero() {
        let mut p = init_params::<f64>(&tiny(Variant::Triangular), 1).unwrap();
        let mut st = AdamState::new(&p);
        let cfg = TrainConfig {
            learning_rate: 0.05,
            ..TrainConfig::default()
        };
        for _ in 0..50 {
            let g = grads_like(&p, 1.0);
            adam_step(&mut p, &g, &mut st, &cfg).unwrap();
        }
        assert_eq!(p.mask_violations(), 0);
        let mut masked_moment = 0.0;
        for (s, m) in p.slots().iter().zip(&st.m) {
            if s.masked {
                let d = m.cols();
                for (k, &x) in m.data().iter().enumerate() {
                    if !in_support(k / d, k % d) {
                        masked_moment += x.abs();
                    }
                }
            }
        }
        assert_eq!(masked_moment, 0.0);
    }

    #[test]
    fn non_finite_gradient_is_rejected() {
        let mut p = scalar_params(0.0);
        let mut st = AdamState::new(&p);
        let mut g = grads_like(&p, 0.0);
        g[3].data_mut()[0] = f64::NAN;
        let err = adam_step(&mut p, &g, &mut st, &TrainConfig::default()).unwrap_err();
        assert!(
            matches!(err, TrainError::NonFiniteGradient(ref s) if s == "inner.1.bias"),
            "{err}"
        );
        assert_eq!(st.step, 0);
    }

    #[test]
    fn clipping_caps_the_global_norm() {
        let mut g = vec![Tensor::<f64>::full(&[2], 3.0), Tensor::full(&[1], 4.0)];
        let norm = clip_global_norm(&mut g, 1.0);
        assert!((norm - 34f64.sqrt()).abs() < 1e-12);
        let after: f64 = g
            .iter()
            .flat_map(|t| t.data())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt();
        assert!((after - 1.0).abs() < 1e-12);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let c = TrainConfig {
            patience: 11,
            ..TrainConfig::default()
        };
        assert!(c.validate().is_err());
        let c = TrainConfig {
            learning_rate: 0.0,
            ..TrainConfig::default()
        };
        assert!(c.validate().is_err());
        let c: Result<TrainConfig, _> = serde_json::from_str(r#"{"lr": 0.1}"#);
        assert!(c.is_err());
    }

    #[test]
    fn forecaster_matches_single_sample_forward() {
        let ds = toy_dataset();
        let cfg = tiny(Variant::Conv);
        let p = init_params::<f64>(&cfg, 2).unwrap();
        let samples = ds.samples(Split::Val);
        let f = ModelForecaster {
            params: &p,
            config: &cfg,
        };
        let batched = f.forecast(&ds, &samples[..5]).unwrap();
        for (i, &s) in samples[..5].iter().enumerate() {
            let x = Tensor::new(&[8, 2], ds.lookback(s).to_vec()).unwrap();
            let c = Tensor::new(&[2, 4], ds.state(s).to_vec())
                .unwrap()
                .transpose();
            let y = crate::model::forward(&x, &c, &p, &cfg).unwrap();
            for (a, b) in y.data().iter().zip(&batched[i * 8..(i + 1) * 8]) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn history_best_is_monotone_and_runs_are_deterministic() {
        let ds = toy_dataset();
        let cfg = tiny(Variant::Triangular);
        let tc = TrainConfig {
            learning_rate: 3e-3,
            batch_size: 8,
            max_epochs: 4,
            patience: 4,
            seed: 9,
            ..TrainConfig::default()
        };
        let (train, val) = (ds.samples(Split::Train), ds.samples(Split::Val));
        let run = || {
            let mut t = Trainer::new(&ds, &cfg, &tc, init_params::<f64>(&cfg, 9).unwrap()).unwrap();
            t.fit(&train, &val, None).unwrap();
            (t.history.clone(), t.best.clone())
        };
        let (h1, b1) = run();
        let (h2, b2) = run();
        assert_eq!(h1, h2);
        assert_eq!(b1, b2);
        assert_eq!(h1.epochs.len(), 4);
        for w in h1.epochs.windows(2) {
            assert!(w[1].best_val_mse <= w[0].best_val_mse);
        }
        assert!(h1.epochs[0].train_loss.to_bits() == h2.epochs[0].train_loss.to_bits());
    }

    #[test]
    fn resume_continues_identically() {
        let ds = toy_dataset();
        let cfg = tiny(Variant::Conv);
        let tc = TrainConfig {
            learning_rate: 3e-3,
            batch_size: 16,
            max_epochs: 4,
            patience: 4,
            seed: 5,
            ..TrainConfig::default()
        };
        let (train, val) = (ds.samples(Split::Train), ds.samples(Split::Val));
        let mut full = Trainer::new(&ds, &cfg, &tc, init_params::<f64>(&cfg, 5).unwrap()).unwrap();
        full.fit(&train, &val, None).unwrap();

        let dir = tempfile::tempdir().unwrap();
        let half = TrainConfig {
            max_epochs: 2,
            patience: 2,
            ..tc.clone()
        };
        let mut first =
            Trainer::new(&ds, &cfg, &half, init_params::<f64>(&cfg, 5).unwrap()).unwrap();
        first.fit(&train, &val, Some(dir.path())).unwrap();
        assert!(dir.path().join("best").join("manifest.json").exists());
        let ckpt = load_checkpoint::<f64>(&dir.path().join("last"), Some(&cfg)).unwrap();
        // Patience is part of the run identity, so extending needs the original value.
        assert!(matches!(
            Trainer::resume(&ds, &tc, ckpt.clone()),
            Err(TrainError::Resume(_))
        ));
        let ext = TrainConfig {
            max_epochs: 4,
            ..half
        };
        let mut resumed = Trainer::resume(&ds, &ext, ckpt).unwrap();
        resumed.fit(&train, &val, None).unwrap();
        let losses = |h: &History| {
            h.epochs
                .iter()
                .map(|e| e.train_loss.to_bits())
                .collect::<Vec<_>>()
        };
        assert_eq!(losses(&resumed.history), losses(&full.history));
        assert_eq!(resumed.params, full.params);
    }

    #[test]
    fn early_stopping_after_patience() {
        let ds = toy_dataset();
        let cfg = tiny(Variant::Triangular);
        // A huge step size makes validation worse after the first epoch.
        let tc = TrainConfig {
            learning_rate: 0.5,
            batch_size: 4,
            max_epochs: 10,
            patience: 2,
            clip_norm: Some(1.0),
            ..TrainConfig::default()
        };
        let (train, val) = (ds.samples(Split::Train), ds.samples(Split::Val));
        let mut t = Trainer::new(&ds, &cfg, &tc, init_params::<f64>(&cfg, 0).unwrap()).unwrap();
        t.fit(&train, &val, None).unwrap();
        let h = &t.history;
        if h.stopped_early {
            let tail = &h.epochs[h.epochs.len() - 2..];
            assert!(tail.iter().all(|e| !e.improved));
            assert!(h.epochs.len() < 10);
        }
        let best = h.best_epoch.unwrap();
        assert_eq!(h.epochs[best].val_mse, t.best_val());
    }
}
