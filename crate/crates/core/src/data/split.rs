use std::fmt;
use std::ops::Range;

use serde::{Deserialize, Serialize};

use super::DataError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

/// How to cut a series into train/val/test.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum SplitSpec {
    /// 12/4/4 months of hourly rows (ETTh1, ETTh2).
    EttHourly,
    /// 12/4/4 months of 15-minute rows (ETTm1, ETTm2).
    EttMinute,
    /// Train `floor(train·T)`, test `floor(test·T)`, val the rest.
    Ratio { train: f64, val: f64, test: f64 },
    /// Explicit row counts.
    Sizes {
        train: usize,
        val: usize,
        test: usize,
    },
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self::Ratio {
            train: 0.7,
            val: 0.1,
            test: 0.2,
        }
    }
}

/// Contiguous row ranges owned by each split. Targets of a split always fall
/// inside its own range; val and test look-backs may reach back `L` rows.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitBounds {
    pub train: Range<usize>,
    pub val: Range<usize>,
    pub test: Range<usize>,
}

impl SplitBounds {
    pub fn range(&self, split: Split) -> Range<usize> {
        match split {
            Split::Train => self.train.clone(),
            Split::Val => self.val.clone(),
            Split::Test => self.test.clone(),
        }
    }

    /// Rows available to windows of `split`, including the look-back overlap
    /// into the preceding split.
    pub fn window_range(&self, split: Split, lookback: usize) -> Range<usize> {
        let r = self.range(split);
        match split {
            Split::Train => r,
            _ => r.start.saturating_sub(lookback)..r.end,
        }
    }

    /// Number of look-back windows per split, as benchmark tables count them.
    pub fn lookback_windows(&self, lookback: usize) -> [usize; 3] {
        Split::ALL.map(|s| (self.window_range(s, lookback).len() + 1).saturating_sub(lookback))
    }
}

impl SplitSpec {
    pub fn bounds(&self, len: usize) -> Result<SplitBounds, DataError> {
        let sizes = match *self {
            SplitSpec::EttHourly => [12 * 30 * 24, 4 * 30 * 24, 4 * 30 * 24],
            SplitSpec::EttMinute => [12 * 30 * 24 * 4, 4 * 30 * 24 * 4, 4 * 30 * 24 * 4],
            SplitSpec::Sizes { train, val, test } => [train, val, test],
            SplitSpec::Ratio { train, val, test } => {
                let total = train + val + test;
                if !(train > 0.0 && val >= 0.0 && test > 0.0 && total.is_finite()) {
                    return Err(DataError::InvalidSplit(format!(
                        "ratios {train}:{val}:{test}"
                    )));
                }
                // The nudge keeps e.g. 10·0.7/1.0000000000000002 from flooring to 6.
                let part = |w: f64| (len as f64 * w / total + 1e-9).floor() as usize;
                let (n_train, n_test) = (part(train), part(test));
                [n_train, len - n_train - n_test, n_test]
            }
        };
        let needed: usize = sizes.iter().sum();
        if needed > len {
            return Err(DataError::SplitTooLarge {
                needed,
                available: len,
            });
        }
        Ok(SplitBounds {
            train: 0..sizes[0],
            val: sizes[0]..sizes[0] + sizes[1],
            test: sizes[0] + sizes[1]..needed,
        })
    }
}
