use std::path::Path;

use rayon::prelude::*;
use serde::Serialize;

use super::{DataError, Dataset, Sample};

/// Anything that maps samples to scaled-space forecasts.
pub trait Forecaster: Sync {
    /// One `H×C` row-major forecast per sample, concatenated in order.
    fn forecast(&self, ds: &Dataset, samples: &[Sample]) -> Result<Vec<f64>, DataError>;
}

/// Repeats the last look-back row across the horizon.
pub struct LastValue;

impl Forecaster for LastValue {
    fn forecast(&self, ds: &Dataset, samples: &[Sample]) -> Result<Vec<f64>, DataError> {
        let c = ds.channels();
        let mut out = Vec::with_capacity(samples.len() * ds.horizon * c);
        for &s in samples {
            let lb = ds.lookback(s);
            let last = &lb[lb.len() - c..];
            for _ in 0..ds.horizon {
                out.extend_from_slice(last);
            }
        }
        Ok(out)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct HorizonMetrics {
    /// 1-based step ahead.
    pub step: usize,
    pub mse: f64,
    pub mae: f64,
}

/// Errors in globally scaled space, plus raw-unit counterparts.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Metrics {
    pub samples: usize,
    pub mse: f64,
    pub mae: f64,
    pub raw_mse: f64,
    pub raw_mae: f64,
    pub per_horizon: Vec<HorizonMetrics>,
}

/// Forecasts every sample in batches (in parallel on the current rayon pool)
/// and returns the predictions in sample order.
pub fn forecast_all(
    ds: &Dataset,
    model: &dyn Forecaster,
    samples: &[Sample],
    batch_size: usize,
) -> Result<Vec<f64>, DataError> {
    let chunks: Vec<Vec<f64>> = samples
        .par_chunks(batch_size.max(1))
        .map(|chunk| model.forecast(ds, chunk))
        .collect::<Result<_, _>>()?;
    let out: Vec<f64> = chunks.into_iter().flatten().collect();
    let expected = samples.len() * ds.horizon * ds.channels();
    if out.len() != expected {
        return Err(DataError::Forecast(format!(
            "{} values returned, {expected} expected",
            out.len()
        )));
    }
    Ok(out)
}

/// Forecasts and scores `samples`; returns the metrics and the scaled predictions.
pub fn evaluate(
    ds: &Dataset,
    model: &dyn Forecaster,
    samples: &[Sample],
    batch_size: usize,
) -> Result<(Metrics, Vec<f64>), DataError> {
    if samples.is_empty() {
        return Err(DataError::NoSamples);
    }
    let preds = forecast_all(ds, model, samples, batch_size)?;
    let (h, c) = (ds.horizon, ds.channels());
    let mut sq = vec![0.0; h];
    let mut ab = vec![0.0; h];
    let (mut raw_sq, mut raw_ab) = (0.0, 0.0);
    for (i, &s) in samples.iter().enumerate() {
        let target = ds.target(s);
        let pred = &preds[i * h * c..(i + 1) * h * c];
        for step in 0..h {
            for ch in 0..c {
                let e = pred[step * c + ch] - target[step * c + ch];
                sq[step] += e * e;
                ab[step] += e.abs();
                let raw = e * ds.scaler.std[ch];
                raw_sq += raw * raw;
                raw_ab += raw.abs();
            }
        }
    }
    let per_step = (samples.len() * c) as f64;
    let total = per_step * h as f64;
    let metrics = Metrics {
        samples: samples.len(),
        mse: sq.iter().sum::<f64>() / total,
        mae: ab.iter().sum::<f64>() / total,
        raw_mse: raw_sq / total,
        raw_mae: raw_ab / total,
        per_horizon: (0..h)
            .map(|step| HorizonMetrics {
                step: step + 1,
                mse: sq[step] / per_step,
                mae: ab[step] / per_step,
            })
            .collect(),
    };
    Ok((metrics, preds))
}

/// Writes `timestamp,channel,horizon_step,y_true,y_pred` in raw units, one row
/// per sample, step and channel.
pub fn write_predictions_csv(
    path: &Path,
    ds: &Dataset,
    samples: &[Sample],
    preds: &[f64],
) -> Result<usize, DataError> {
    let io = |e: &dyn std::fmt::Display| DataError::Io {
        path: path.to_path_buf(),
        message: e.to_string(),
    };
    let mut w = csv::Writer::from_path(path).map_err(|e| io(&e))?;
    w.write_record(["timestamp", "channel", "horizon_step", "y_true", "y_pred"])
        .map_err(|e| io(&e))?;
    let (h, c) = (ds.horizon, ds.channels());
    let mut rows = 0;
    for (i, &s) in samples.iter().enumerate() {
        let truth = ds.scaler.invert(ds.target(s));
        let pred = ds.scaler.invert(&preds[i * h * c..(i + 1) * h * c]);
        for step in 0..h {
            let stamp = &ds.series.timestamps[s.start + ds.lookback + step];
            for ch in 0..c {
                w.write_record([
                    stamp.as_str(),
                    ds.series.channels[ch].as_str(),
                    &(step + 1).to_string(),
                    &truth[step * c + ch].to_string(),
                    &pred[step * c + ch].to_string(),
                ])
                .map_err(|e| io(&e))?;
                rows += 1;
            }
        }
    }
    w.flush().map_err(|e| io(&e))?;
    Ok(rows)
}

pub fn write_metrics_json(path: &Path, value: &impl Serialize) -> Result<(), DataError> {
    let text = serde_json::to_string_pretty(value).map_err(|e| DataError::Io {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    std::fs::write(path, text).map_err(|e| DataError::Io {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}
