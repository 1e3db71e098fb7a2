//! Datasets, preprocessing and leak-free train/validation splits.
//!
//! Series are stored row-major (`T x D`) and indexed from 0.

mod csv_io;
mod split;
mod synthetic;

use serde::{Deserialize, Serialize};

pub use csv_io::{load_csv, parse_csv, write_csv, write_csv_to};
pub use split::{
    split_train_val, training_targets, validation_targets, Split, SplitMode, SplitSpec,
    VAL_FRACTION, VAL_SECTIONS,
};
pub use synthetic::{
    generate_scenario, generate_synthetic, inject_anomaly, AnomalyKind, AnomalySpec, Family,
    Scenario, ScenarioSpec,
};

use crate::{Error, Result};

/// Value used for all-zero channels and for the parity padding channel.
pub const FILL_VALUE: f64 = 0.5;

/// A `T x D` multivariate series with optional per-step binary labels.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeSeriesDataset {
    /// Row-major values, `len * dim` entries.
    pub values: Vec<f64>,
    pub dim: usize,
    pub labels: Option<Vec<bool>>,
    pub channel_names: Vec<String>,
    /// Statistics used to normalize `values`, if it has been normalized.
    pub norm_stats: Option<NormStats>,
    /// Source path or generator description.
    pub provenance: String,
    /// Anomalies injected by the generator, for overlap checks.
    pub anomalies: Vec<AnomalySpec>,
}

impl TimeSeriesDataset {
    pub fn new(values: Vec<f64>, dim: usize, labels: Option<Vec<bool>>) -> Result<Self> {
        if dim == 0 || !values.len().is_multiple_of(dim) {
            return Err(Error::Dimension(format!(
                "{} values do not form rows of width {dim}",
                values.len()
            )));
        }
        let len = values.len() / dim;
        if let Some(l) = &labels {
            if l.len() != len {
                return Err(Error::Data(format!(
                    "{} labels for {len} timesteps",
                    l.len()
                )));
            }
        }
        Ok(Self {
            values,
            dim,
            labels,
            channel_names: (0..dim).map(|c| format!("ch{c}")).collect(),
            norm_stats: None,
            provenance: String::new(),
            anomalies: Vec::new(),
        })
    }

    /// Number of timesteps `T`.
    pub fn len(&self) -> usize {
        self.values.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn row(&self, t: usize) -> &[f64] {
        &self.values[t * self.dim..(t + 1) * self.dim]
    }

    pub fn channel(&self, c: usize) -> Vec<f64> {
        self.values.iter().skip(c).step_by(self.dim).copied().collect()
    }

    /// Labels, or all `false` when the series is unlabeled.
    pub fn label_vec(&self) -> Vec<bool> {
        self.labels.clone().unwrap_or_else(|| vec![false; self.len()])
    }

    /// Keeps only the given channels, in the given order.
    pub fn select_channels(&self, channels: &[usize]) -> Result<Self> {
        if let Some(&bad) = channels.iter().find(|&&c| c >= self.dim) {
            return Err(Error::Dimension(format!("channel {bad} out of range")));
        }
        let mut values = Vec::with_capacity(self.len() * channels.len());
        for t in 0..self.len() {
            let row = self.row(t);
            values.extend(channels.iter().map(|&c| row[c]));
        }
        let mut out = Self::new(values, channels.len(), self.labels.clone())?;
        out.channel_names = channels.iter().map(|&c| self.channel_names[c].clone()).collect();
        out.provenance = self.provenance.clone();
        Ok(out)
    }
}

/// Contiguous `[start, end)` runs of `true`.
pub fn label_ranges(labels: &[bool]) -> Vec<(usize, usize)> {
    let mut ranges = Vec::new();
    let mut start = None;
    for (t, &l) in labels.iter().enumerate() {
        match (l, start) {
            (true, None) => start = Some(t),
            (false, Some(s)) => {
                ranges.push((s, t));
                start = None;
            }
            _ => {}
        }
    }
    if let Some(s) = start {
        ranges.push((s, labels.len()));
    }
    ranges
}

/// Per-channel min-max statistics fitted on training data.
///
/// Regular channels map affinely onto `[-1, 1]`. A channel that is all zero
/// in the fitted data is shifted by [`FILL_VALUE`] and a constant nonzero
/// channel is shifted to zero; both maps are affine, so unseen test values
/// stay visible and [`NormStats::invert`] is exact.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub min: Vec<f64>,
    pub max: Vec<f64>,
    pub zero_channels: Vec<bool>,
}

impl NormStats {
    /// Fits statistics on the rows of `ds`.
    pub fn fit(ds: &TimeSeriesDataset) -> Result<Self> {
        if ds.is_empty() {
            return Err(Error::Data("cannot fit normalization on an empty series".into()));
        }
        let mut min = vec![f64::INFINITY; ds.dim];
        let mut max = vec![f64::NEG_INFINITY; ds.dim];
        for row in ds.values.chunks(ds.dim) {
            for (c, &v) in row.iter().enumerate() {
                if !v.is_finite() {
                    return Err(Error::Data(format!("non-finite value in channel {c}")));
                }
                min[c] = min[c].min(v);
                max[c] = max[c].max(v);
            }
        }
        let zero_channels = min.iter().zip(&max).map(|(&a, &b)| a == 0.0 && b == 0.0).collect();
        Ok(Self {
            min,
            max,
            zero_channels,
        })
    }

    pub fn dim(&self) -> usize {
        self.min.len()
    }

    fn forward(&self, c: usize, v: f64) -> f64 {
        let (lo, hi) = (self.min[c], self.max[c]);
        if self.zero_channels[c] {
            v + FILL_VALUE
        } else if hi == lo {
            v - lo
        } else {
            2.0 * (v - lo) / (hi - lo) - 1.0
        }
    }

    fn backward(&self, c: usize, v: f64) -> f64 {
        let (lo, hi) = (self.min[c], self.max[c]);
        if self.zero_channels[c] {
            v - FILL_VALUE
        } else if hi == lo {
            v + lo
        } else {
            (v + 1.0) * (hi - lo) / 2.0 + lo
        }
    }

    fn check(&self, ds: &TimeSeriesDataset) -> Result<()> {
        if ds.dim != self.dim() {
            return Err(Error::Dimension(format!(
                "statistics cover {} channels, dataset has {}",
                self.dim(),
                ds.dim
            )));
        }
        Ok(())
    }

    /// Normalized copy of `ds`; values outside the fitted range are not
    /// clipped.
    pub fn apply(&self, ds: &TimeSeriesDataset) -> Result<TimeSeriesDataset> {
        self.check(ds)?;
        let mut out = ds.clone();
        for row in out.values.chunks_mut(ds.dim) {
            for (c, v) in row.iter_mut().enumerate() {
                *v = self.forward(c, *v);
            }
        }
        out.norm_stats = Some(self.clone());
        Ok(out)
    }

    /// Maps normalized values back to the original scale.
    pub fn invert(&self, ds: &TimeSeriesDataset) -> Result<TimeSeriesDataset> {
        self.check(ds)?;
        let mut out = ds.clone();
        for row in out.values.chunks_mut(ds.dim) {
            for (c, v) in row.iter_mut().enumerate() {
                *v = self.backward(c, *v);
            }
        }
        out.norm_stats = None;
        Ok(out)
    }
}

/// Fits statistics on `ds` and returns the normalized copy.
pub fn normalize_minmax(ds: &TimeSeriesDataset) -> Result<TimeSeriesDataset> {
    NormStats::fit(ds)?.apply(ds)
}

/// Appends a constant [`FILL_VALUE`] channel when `D` is odd.
pub fn pad_even_channels(ds: &TimeSeriesDataset) -> TimeSeriesDataset {
    if ds.dim.is_multiple_of(2) {
        return ds.clone();
    }
    let dim = ds.dim + 1;
    let mut values = Vec::with_capacity(ds.len() * dim);
    for row in ds.values.chunks(ds.dim) {
        values.extend_from_slice(row);
        values.push(FILL_VALUE);
    }
    let mut out = ds.clone();
    out.values = values;
    out.dim = dim;
    out.channel_names.push("pad".into());
    out
}

/// Normalizes with `stats` (fitting them on `ds` when absent) and pads to an
/// even channel count.
pub fn prepare(ds: &TimeSeriesDataset, stats: Option<&NormStats>) -> Result<TimeSeriesDataset> {
    let normalized = match stats {
        Some(s) => s.apply(ds)?,
        None => normalize_minmax(ds)?,
    };
    Ok(pad_even_channels(&normalized))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ds(values: Vec<f64>, dim: usize) -> TimeSeriesDataset {
        TimeSeriesDataset::new(values, dim, None).unwrap()
    }

    #[test]
    fn minmax_endpoints_and_midpoint() {
        let n = normalize_minmax(&ds(vec![0.0, 5.0, 10.0], 1)).unwrap();
        assert_eq!(n.values, vec![-1.0, 0.0, 1.0]);
    }

    #[test]
    fn zero_and_constant_channels() {
        let train = ds(vec![0.0, 3.0, 1.0, 0.0, 3.0, 2.0], 3);
        let stats = NormStats::fit(&train).unwrap();
        assert_eq!(stats.zero_channels, vec![true, false, false]);
        let n = stats.apply(&train).unwrap();
        assert_eq!(n.channel(0), vec![0.5, 0.5]);
        assert_eq!(n.channel(1), vec![0.0, 0.0]);
        assert_eq!(n.channel(2), vec![-1.0, 1.0]);
    }

    #[test]
    fn test_values_extrapolate_without_clipping() {
        let stats = NormStats::fit(&ds(vec![0.0, 10.0], 1)).unwrap();
        let n = stats.apply(&ds(vec![15.0, -5.0], 1)).unwrap();
        assert_eq!(n.values, vec![2.0, -2.0]);
    }

    #[test]
    fn invert_recovers_originals() {
        let orig = ds(vec![0.3, -2.0, 0.0, 7.1, 1.5, 0.0, 4.0, 4.0], 2);
        let stats = NormStats::fit(&orig).unwrap();
        let back = stats.invert(&stats.apply(&orig).unwrap()).unwrap();
        for (a, b) in back.values.iter().zip(&orig.values) {
            assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn padding_is_idempotent() {
        let three = ds(vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0], 3);
        let once = pad_even_channels(&three);
        assert_eq!(once.dim, 4);
        assert_eq!(once.channel(3), vec![0.5, 0.5]);
        assert_eq!(pad_even_channels(&once), once);
        let four = pad_even_channels(&once);
        assert_eq!(four.dim, 4);
    }

    #[test]
    fn ranges_of_labels() {
        let l = [true, true, false, false, true, false, true];
        assert_eq!(label_ranges(&l), vec![(0, 2), (4, 5), (6, 7)]);
        assert!(label_ranges(&[false; 4]).is_empty());
    }

    #[test]
    fn label_length_is_checked() {
        assert!(TimeSeriesDataset::new(vec![0.0; 4], 2, Some(vec![true])).is_err());
        assert!(TimeSeriesDataset::new(vec![0.0; 5], 2, None).is_err());
    }
}
