//! Ingestion, chronological splits, global scaling, windowing and metrics.

mod metrics;
mod split;

pub use metrics::{
    evaluate, forecast_all, write_metrics_json, write_predictions_csv, Forecaster, HorizonMetrics,
    LastValue, Metrics,
};
pub use split::{Split, SplitBounds, SplitSpec};

use std::path::{Path, PathBuf};

use chrono::NaiveDateTime;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::hippo::{HippoError, LegsOperator, PrefixStates};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("cannot read {path}: {message}")]
    Io { path: PathBuf, message: String },
    #[error("column `{0}` not found in header")]
    MissingColumn(String),
    #[error("row {row}, column `{column}`: missing value")]
    MissingValue { row: usize, column: String },
    #[error("row {row}, column `{column}`: `{value}` is not a finite number")]
    NonNumeric {
        row: usize,
        column: String,
        value: String,
    },
    #[error("row {row}: timestamp `{value}` is not parseable")]
    BadTimestamp { row: usize, value: String },
    #[error("row {row}: timestamp `{value}` does not increase")]
    NonMonotone { row: usize, value: String },
    #[error("series has no rows")]
    Empty,
    #[error("channel `{0}` is constant on the training split")]
    ConstantChannel(String),
    #[error("split needs {needed} rows but the series has {available}")]
    SplitTooLarge { needed: usize, available: usize },
    #[error("{split} split has {len} rows, fewer than look-back + horizon = {needed}")]
    ShortSplit {
        split: Split,
        len: usize,
        needed: usize,
    },
    #[error("invalid split: {0}")]
    InvalidSplit(String),
    #[error("no samples to evaluate")]
    NoSamples,
    #[error("forecaster error: {0}")]
    Forecast(String),
    #[error(transparent)]
    Hippo(#[from] HippoError),
}

/// `T×C` series with timestamps and channel names.
#[derive(Clone, Debug, PartialEq)]
pub struct MultivariateSeries {
    pub timestamps: Vec<String>,
    pub channels: Vec<String>,
    /// Row-major `T×C`.
    pub values: Vec<f64>,
}

impl MultivariateSeries {
    pub fn new(
        timestamps: Vec<String>,
        channels: Vec<String>,
        values: Vec<f64>,
    ) -> Result<Self, DataError> {
        if timestamps.is_empty() || channels.is_empty() {
            return Err(DataError::Empty);
        }
        assert_eq!(
            values.len(),
            timestamps.len() * channels.len(),
            "values must be T×C"
        );
        Ok(Self {
            timestamps,
            channels,
            values,
        })
    }

    /// Series with integer timestamps `0..T`.
    pub fn from_values(channels: usize, values: Vec<f64>) -> Result<Self, DataError> {
        if channels == 0 || values.is_empty() {
            return Err(DataError::Empty);
        }
        let t = values.len() / channels;
        Self::new(
            (0..t).map(|i| i.to_string()).collect(),
            (0..channels).map(|c| format!("ch{c}")).collect(),
            values,
        )
    }

    pub fn len(&self) -> usize {
        self.timestamps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.timestamps.is_empty()
    }

    pub fn num_channels(&self) -> usize {
        self.channels.len()
    }

    pub fn row(&self, t: usize) -> &[f64] {
        let c = self.channels.len();
        &self.values[t * c..(t + 1) * c]
    }

    pub fn column(&self, ch: usize) -> Vec<f64> {
        self.values
            .iter()
            .skip(ch)
            .step_by(self.channels.len())
            .copied()
            .collect()
    }
}

const DATE_FORMATS: &[&str] = &[
    "%Y-%m-%d %H:%M:%S",
    "%Y-%m-%d %H:%M",
    "%Y/%m/%d %H:%M:%S",
    "%Y/%m/%d %H:%M",
    "%Y-%m-%dT%H:%M:%S",
];

/// Orderable key of a timestamp cell: datetimes in the usual formats, bare
/// dates, or plain numbers.
fn timestamp_key(s: &str) -> Option<i128> {
    for f in DATE_FORMATS {
        if let Ok(t) = NaiveDateTime::parse_from_str(s, f) {
            return Some(t.and_utc().timestamp_micros() as i128);
        }
    }
    if let Ok(d) = chrono::NaiveDate::parse_from_str(s, "%Y-%m-%d") {
        return Some(d.and_hms_opt(0, 0, 0)?.and_utc().timestamp_micros() as i128);
    }
    s.parse::<i64>().ok().map(i128::from)
}

/// Reads a headered CSV. `channel_columns = None` takes every column except
/// the date column, in file order. Rows are numbered from 1 after the header.
pub fn load_csv(
    path: &Path,
    date_column: &str,
    channel_columns: Option<&[String]>,
) -> Result<MultivariateSeries, DataError> {
    let io = |e: &dyn std::fmt::Display| DataError::Io {
        path: path.to_path_buf(),
        message: e.to_string(),
    };
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| io(&e))?;
    let header: Vec<String> = reader
        .headers()
        .map_err(|e| io(&e))?
        .iter()
        .map(str::to_string)
        .collect();
    let find = |name: &str| {
        header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| DataError::MissingColumn(name.to_string()))
    };
    let date_idx = find(date_column)?;
    let channels: Vec<String> = match channel_columns {
        Some(cols) => cols.to_vec(),
        None => header
            .iter()
            .filter(|h| *h != date_column)
            .cloned()
            .collect(),
    };
    let idx = channels
        .iter()
        .map(|c| find(c))
        .collect::<Result<Vec<_>, _>>()?;

    let mut timestamps = Vec::new();
    let mut values = Vec::new();
    let mut last_key = None;
    for (i, rec) in reader.records().enumerate() {
        let row = i + 1;
        let rec = rec.map_err(|e| io(&e))?;
        let stamp = rec.get(date_idx).unwrap_or("").to_string();
        let key = timestamp_key(&stamp).ok_or_else(|| DataError::BadTimestamp {
            row,
            value: stamp.clone(),
        })?;
        if last_key.is_some_and(|k| key <= k) {
            return Err(DataError::NonMonotone { row, value: stamp });
        }
        last_key = Some(key);
        for (&j, name) in idx.iter().zip(&channels) {
            let cell = rec.get(j).unwrap_or("");
            if cell.is_empty() {
                return Err(DataError::MissingValue {
                    row,
                    column: name.clone(),
                });
            }
            let v: f64 = cell
                .parse()
                .ok()
                .filter(|v: &f64| v.is_finite())
                .ok_or_else(|| DataError::NonNumeric {
                    row,
                    column: name.clone(),
                    value: cell.to_string(),
                })?;
            values.push(v);
        }
        timestamps.push(stamp);
    }
    if timestamps.is_empty() {
        return Err(DataError::Empty);
    }
    MultivariateSeries::new(timestamps, channels, values)
}

/// Per-channel z-score statistics (population standard deviation).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScalerStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl ScalerStats {
    /// Fits on rows `range` of `series`.
    pub fn fit(
        series: &MultivariateSeries,
        range: std::ops::Range<usize>,
    ) -> Result<Self, DataError> {
        let c = series.num_channels();
        if range.is_empty() {
            return Err(DataError::Empty);
        }
        let n = range.len() as f64;
        let mut mean = vec![0.0; c];
        for t in range.clone() {
            for (m, v) in mean.iter_mut().zip(series.row(t)) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; c];
        for t in range {
            for ((s, v), m) in var.iter_mut().zip(series.row(t)).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        let std: Vec<f64> = var.iter().map(|s| (s / n).sqrt()).collect();
        if let Some(ch) = std
            .iter()
            .zip(&mean)
            .position(|(&s, &m)| s <= 1e-12 * (1.0 + m.abs()))
        {
            return Err(DataError::ConstantChannel(series.channels[ch].clone()));
        }
        Ok(Self { mean, std })
    }

    pub fn apply(&self, values: &[f64]) -> Vec<f64> {
        let c = self.mean.len();
        values
            .iter()
            .enumerate()
            .map(|(i, v)| (v - self.mean[i % c]) / self.std[i % c])
            .collect()
    }

    pub fn invert(&self, values: &[f64]) -> Vec<f64> {
        let c = self.mean.len();
        values
            .iter()
            .enumerate()
            .map(|(i, v)| v * self.std[i % c] + self.mean[i % c])
            .collect()
    }
}

/// One forecasting example, identified by the first look-back index `t`:
/// look-back `x[t, t+L)`, state of prefix `x[0, t)`, target `x[t+L, t+L+H)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Sample {
    pub start: usize,
}

/// A scaled series ready for windowing, with its split and prefix states.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub series: MultivariateSeries,
    /// Globally scaled values, row-major `T×C`.
    pub scaled: Vec<f64>,
    pub scaler: ScalerStats,
    pub bounds: SplitBounds,
    pub states: PrefixStates,
    pub lookback: usize,
    pub horizon: usize,
}

impl Dataset {
    /// Splits, fits the scaler on the training rows, scales the series and
    /// scans it once for the prefix states at every window start.
    pub fn prepare(
        series: MultivariateSeries,
        split: &SplitSpec,
        lookback: usize,
        horizon: usize,
        hippo_order: usize,
    ) -> Result<Self, DataError> {
        let bounds = split.bounds(series.len())?;
        for s in Split::ALL {
            let len = bounds.window_range(s, lookback).len();
            if len < lookback + horizon {
                return Err(DataError::ShortSplit {
                    split: s,
                    len,
                    needed: lookback + horizon,
                });
            }
        }
        let scaler = ScalerStats::fit(&series, bounds.train.clone())?;
        let scaled = scaler.apply(&series.values);
        let c = series.num_channels();
        let end = bounds.test.end;
        let op = LegsOperator::new(hippo_order)?;
        let states = PrefixStates::build_retaining(&scaled[..end * c], c, &op, |m| {
            m + lookback + horizon <= end
        })?;
        Ok(Self {
            series,
            scaled,
            scaler,
            bounds,
            states,
            lookback,
            horizon,
        })
    }

    pub fn channels(&self) -> usize {
        self.series.num_channels()
    }

    /// Every window of `split` whose target fits inside it, in time order.
    pub fn samples(&self, split: Split) -> Vec<Sample> {
        let r = self.bounds.window_range(split, self.lookback);
        let span = self.lookback + self.horizon;
        if r.len() < span {
            return Vec::new();
        }
        (r.start..=r.end - span)
            .map(|start| Sample { start })
            .collect()
    }

    /// Scaled look-back, `L×C`.
    pub fn lookback(&self, s: Sample) -> &[f64] {
        let c = self.channels();
        &self.scaled[s.start * c..(s.start + self.lookback) * c]
    }

    /// Scaled target, `H×C`.
    pub fn target(&self, s: Sample) -> &[f64] {
        let c = self.channels();
        let from = s.start + self.lookback;
        &self.scaled[from * c..(from + self.horizon) * c]
    }

    /// Cumulative state of `x[0, start)`, `C×N`.
    pub fn state(&self, s: Sample) -> &[f64] {
        self.states
            .prefix(s.start)
            .expect("state retained for every window start")
    }
}
