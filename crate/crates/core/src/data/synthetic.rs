//! Desk-scale synthetic sequences and anomaly injection.

use std::f64::consts::TAU;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::TimeSeriesDataset;
use crate::{Error, Result};

const PERIOD: f64 = 50.0;
const AMPLITUDE: f64 = 1.0;
/// Second period of the wave family; incommensurate with [`PERIOD`].
const WAVE_PERIOD: f64 = PERIOD * 1.618_033_988_75;
const WALK_STEP: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Family {
    Sine,
    Saw,
    Increasing,
    Wave,
    RandomWalk,
    Cbf,
}

impl Family {
    pub const ALL: [Family; 6] = [
        Family::Sine,
        Family::Saw,
        Family::Increasing,
        Family::Wave,
        Family::RandomWalk,
        Family::Cbf,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Family::Sine => "sine",
            Family::Saw => "saw",
            Family::Increasing => "increasing",
            Family::Wave => "wave",
            Family::RandomWalk => "random-walk",
            Family::Cbf => "cbf",
        }
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Family {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Family::ALL
            .into_iter()
            .find(|f| f.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown sequence family '{s}'")))
    }
}

fn phase(c: usize, dim: usize) -> f64 {
    TAU * c as f64 / dim as f64
}

/// Generates `len` steps of `dim` phase-shifted channels of `family` plus
/// Gaussian noise with standard deviation `noise`.
pub fn generate_synthetic(
    family: Family,
    len: usize,
    dim: usize,
    noise: f64,
    seed: u64,
) -> Result<TimeSeriesDataset> {
    if len < 100 || dim < 2 {
        return Err(Error::Config(format!(
            "synthetic series need T >= 100 and D >= 2, got T={len}, D={dim}"
        )));
    }
    if !(noise >= 0.0 && noise.is_finite()) {
        return Err(Error::Config(format!("noise must be non-negative, got {noise}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut values = vec![0.0; len * dim];
    for c in 0..dim {
        let phi = phase(c, dim);
        let signal: Vec<f64> = match family {
            Family::Sine => (0..len)
                .map(|t| AMPLITUDE * (TAU * t as f64 / PERIOD + phi).sin())
                .collect(),
            Family::Saw => (0..len)
                .map(|t| {
                    let x = t as f64 / PERIOD + c as f64 / dim as f64;
                    AMPLITUDE * (2.0 * x.fract() - 1.0)
                })
                .collect(),
            Family::Increasing => (0..len)
                .map(|t| {
                    let trend = 2.0 * AMPLITUDE * t as f64 / len as f64;
                    0.5 * AMPLITUDE * (TAU * t as f64 / PERIOD + phi).sin() + trend
                })
                .collect(),
            Family::Wave => (0..len)
                .map(|t| {
                    let t = t as f64;
                    AMPLITUDE
                        * (0.6 * (TAU * t / PERIOD + phi).sin()
                            + 0.4 * (TAU * t / WAVE_PERIOD + 2.0 * phi).sin())
                })
                .collect(),
            Family::RandomWalk => {
                let step = Normal::new(0.0, WALK_STEP).expect("valid sd");
                let mut x = 0.0;
                (0..len)
                    .map(|_| {
                        x += step.sample(&mut rng);
                        x
                    })
                    .collect()
            }
            Family::Cbf => cbf_channel(len, &mut rng),
        };
        for (t, v) in signal.into_iter().enumerate() {
            values[t * dim + c] = v;
        }
    }
    if noise > 0.0 {
        let n = Normal::new(0.0, noise).expect("valid sd");
        for v in &mut values {
            *v += n.sample(&mut rng);
        }
    }
    let mut ds = TimeSeriesDataset::new(values, dim, None)?;
    ds.provenance = format!("synthetic:{family}:T={len}:D={dim}:noise={noise}:seed={seed}");
    Ok(ds)
}

/// Consecutive cylinder, bell or funnel shapes, one per period.
fn cbf_channel(len: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let p = PERIOD as usize;
    let mut out = Vec::with_capacity(len);
    while out.len() < len {
        let a = rng.random_range(p / 8..=p / 4) as f64;
        let b = rng.random_range(3 * p / 4..=7 * p / 8) as f64;
        let amp = AMPLITUDE * (1.0 + rng.random_range(-0.1..0.1));
        let shape = rng.random_range(0..3);
        for i in 0..p {
            let x = i as f64;
            let v = if x < a || x >= b {
                0.0
            } else {
                match shape {
                    0 => amp,
                    1 => amp * (x - a) / (b - a),
                    _ => amp * (b - x) / (b - a),
                }
            };
            out.push(v);
        }
    }
    out.truncate(len);
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AnomalyKind {
    Spike,
    Platform,
    MeanShift,
    Amplitude,
    Pattern,
    Variance,
    Trend,
    Cutoff,
}

impl AnomalyKind {
    pub const ALL: [AnomalyKind; 8] = [
        AnomalyKind::Spike,
        AnomalyKind::Platform,
        AnomalyKind::MeanShift,
        AnomalyKind::Amplitude,
        AnomalyKind::Pattern,
        AnomalyKind::Variance,
        AnomalyKind::Trend,
        AnomalyKind::Cutoff,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AnomalyKind::Spike => "spike",
            AnomalyKind::Platform => "platform",
            AnomalyKind::MeanShift => "mean-shift",
            AnomalyKind::Amplitude => "amplitude",
            AnomalyKind::Pattern => "pattern",
            AnomalyKind::Variance => "variance",
            AnomalyKind::Trend => "trend",
            AnomalyKind::Cutoff => "cutoff",
        }
    }

    /// Magnitude used when none is given. Units are channel standard
    /// deviations for additive kinds, a relative factor for `amplitude` and
    /// `pattern`, and unused for `cutoff`.
    pub fn default_magnitude(self) -> f64 {
        match self {
            AnomalyKind::Spike => 4.0,
            AnomalyKind::Platform => 0.0,
            AnomalyKind::MeanShift => 1.0,
            AnomalyKind::Amplitude => 0.5,
            AnomalyKind::Pattern => 1.0,
            AnomalyKind::Variance => 1.0,
            AnomalyKind::Trend => 2.0,
            AnomalyKind::Cutoff => 0.0,
        }
    }
}

impl fmt::Display for AnomalyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AnomalyKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        AnomalyKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown anomaly kind '{s}'")))
    }
}

/// One injected anomaly over 0-based steps `start .. start + length`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnomalySpec {
    pub kind: AnomalyKind,
    pub start: usize,
    pub length: usize,
    pub magnitude: f64,
    pub channels: Vec<usize>,
}

impl AnomalySpec {
    pub fn end(&self) -> usize {
        self.start + self.length
    }

    fn overlaps(&self, other: &AnomalySpec) -> Option<usize> {
        let disjoint = self.end() <= other.start || other.end() <= self.start;
        if disjoint {
            return None;
        }
        self.channels.iter().copied().find(|c| other.channels.contains(c))
    }
}

/// Returns a copy of `ds` with `spec` applied and its range labeled.
///
/// Additive magnitudes are scaled by the channel's standard deviation.
/// `spike` jumps at the first step of the range only, `platform` holds the
/// value at the start plus the offset, `pattern` replays the signal
/// `1 + magnitude` times faster and `amplitude` scales deviations from the
/// channel mean by `1 + magnitude`.
pub fn inject_anomaly(ds: &TimeSeriesDataset, spec: &AnomalySpec, seed: u64) -> Result<TimeSeriesDataset> {
    let len = ds.len();
    if spec.length == 0 || spec.end() > len {
        return Err(Error::Config(format!(
            "anomaly range [{}, {}) does not fit in a series of length {len}",
            spec.start,
            spec.end()
        )));
    }
    if spec.channels.is_empty() {
        return Err(Error::Config("anomaly affects no channels".into()));
    }
    if let Some(&c) = spec.channels.iter().find(|&&c| c >= ds.dim) {
        return Err(Error::Dimension(format!("anomaly channel {c} out of range")));
    }
    for existing in &ds.anomalies {
        if let Some(channel) = spec.overlaps(existing) {
            return Err(Error::OverlappingAnomaly {
                channel,
                start: existing.start,
                end: existing.end(),
            });
        }
    }
    let mut out = ds.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let m = spec.magnitude;
    let range = spec.start..spec.end();
    for &c in &spec.channels {
        let orig = ds.channel(c);
        let mean = orig.iter().sum::<f64>() / len as f64;
        let var = orig.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / len as f64;
        let sd = if var > 0.0 { var.sqrt() } else { 1.0 };
        let at = |t: usize| t * ds.dim + c;
        match spec.kind {
            AnomalyKind::Spike => out.values[at(spec.start)] += m * sd,
            AnomalyKind::Platform => {
                let level = orig[spec.start] + m * sd;
                for t in range.clone() {
                    out.values[at(t)] = level;
                }
            }
            AnomalyKind::MeanShift => {
                for t in range.clone() {
                    out.values[at(t)] += m * sd;
                }
            }
            AnomalyKind::Amplitude => {
                for t in range.clone() {
                    out.values[at(t)] = mean + (orig[t] - mean) * (1.0 + m);
                }
            }
            AnomalyKind::Pattern => {
                for (i, t) in range.clone().enumerate() {
                    let pos = (spec.start as f64 + i as f64 * (1.0 + m)).min((len - 1) as f64);
                    let lo = pos.floor() as usize;
                    let hi = (lo + 1).min(len - 1);
                    let frac = pos - lo as f64;
                    out.values[at(t)] = orig[lo] * (1.0 - frac) + orig[hi] * frac;
                }
            }
            AnomalyKind::Variance => {
                if m > 0.0 {
                    let n = Normal::new(0.0, m * sd).expect("valid sd");
                    for t in range.clone() {
                        out.values[at(t)] += n.sample(&mut rng);
                    }
                }
            }
            AnomalyKind::Trend => {
                for (i, t) in range.clone().enumerate() {
                    out.values[at(t)] += m * sd * (i + 1) as f64 / spec.length as f64;
                }
            }
            AnomalyKind::Cutoff => {
                for t in range.clone() {
                    out.values[at(t)] = 0.0;
                }
            }
        }
    }
    let labels = out.labels.get_or_insert_with(|| vec![false; len]);
    labels[range].fill(true);
    out.anomalies.push(spec.clone());
    Ok(out)
}

/// Settings for a clean training sequence, a contaminated training sequence
/// and a labeled test sequence of the same family.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScenarioSpec {
    pub family: Family,
    pub len: usize,
    pub dim: usize,
    pub noise: f64,
    /// Kinds injected in turn until `count` anomalies are placed.
    pub anomalies: Vec<AnomalyKind>,
    pub count: usize,
    /// Length of every non-spike anomaly.
    pub anomaly_length: usize,
    /// Overrides each kind's default magnitude.
    pub magnitude: Option<f64>,
}

impl Default for ScenarioSpec {
    fn default() -> Self {
        Self {
            family: Family::Sine,
            len: 2000,
            dim: 2,
            noise: 0.05,
            anomalies: vec![AnomalyKind::Spike, AnomalyKind::Platform],
            count: 3,
            anomaly_length: 20,
            magnitude: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub train_clean: TimeSeriesDataset,
    pub train_anomalous: TimeSeriesDataset,
    pub test: TimeSeriesDataset,
}

/// Spreads `spec.count` anomalies over `ds`, one per equal-width bin.
fn contaminate(ds: &TimeSeriesDataset, spec: &ScenarioSpec, rng: &mut ChaCha8Rng) -> Result<TimeSeriesDataset> {
    let mut out = ds.clone();
    out.labels = Some(vec![false; ds.len()]);
    if spec.count == 0 {
        return Ok(out);
    }
    if spec.anomalies.is_empty() {
        return Err(Error::Config("no anomaly kinds given".into()));
    }
    let margin = ds.len() / 20;
    let bin = (ds.len() - 2 * margin) / spec.count;
    for i in 0..spec.count {
        let kind = spec.anomalies[i % spec.anomalies.len()];
        let length = if kind == AnomalyKind::Spike { 1 } else { spec.anomaly_length };
        if length == 0 || length > bin {
            return Err(Error::Config(format!(
                "{} anomalies of length {length} do not fit in a series of length {}",
                spec.count,
                ds.len()
            )));
        }
        let lo = margin + i * bin;
        let start = rng.random_range(lo..=lo + bin - length);
        let anomaly = AnomalySpec {
            kind,
            start,
            length,
            magnitude: spec.magnitude.unwrap_or(kind.default_magnitude()),
            channels: (0..ds.dim).collect(),
        };
        out = inject_anomaly(&out, &anomaly, rng.random())?;
    }
    Ok(out)
}

pub fn generate_scenario(spec: &ScenarioSpec, seed: u64) -> Result<Scenario> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let seeds: [u64; 3] = rng.random();
    let series = |s: u64| generate_synthetic(spec.family, spec.len, spec.dim, spec.noise, s);
    let train_clean = series(seeds[0])?;
    let train_anomalous = contaminate(&series(seeds[1])?, spec, &mut rng)?;
    let test = contaminate(&series(seeds[2])?, spec, &mut rng)?;
    Ok(Scenario {
        train_clean,
        train_anomalous,
        test,
    })
}
