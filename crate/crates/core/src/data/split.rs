use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Share of the training sequence held out for validation.
pub const VAL_FRACTION: f64 = 0.2;
/// Number of validation sections in [`SplitMode::RandomSections`].
pub const VAL_SECTIONS: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SplitMode {
    /// Five equal random sections totalling 20% of the series.
    RandomSections,
    /// The last 20% of the series.
    SequentialTail,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitSpec {
    pub mode: SplitMode,
    /// Training indices within `gap` steps of a validation index are dropped.
    pub gap: usize,
    pub seed: u64,
}

/// Sorted 0-based index sets.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Split {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
}

pub fn split_train_val(len: usize, spec: &SplitSpec) -> Result<Split> {
    let n_val = (VAL_FRACTION * len as f64).round() as usize;
    if n_val < VAL_SECTIONS {
        return Err(Error::Data(format!(
            "series of length {len} is too short for a validation split"
        )));
    }
    let mut is_val = vec![false; len];
    match spec.mode {
        SplitMode::SequentialTail => is_val[len - n_val..].fill(true),
        SplitMode::RandomSections => {
            let base = n_val / VAL_SECTIONS;
            let extra = n_val % VAL_SECTIONS;
            let lengths: Vec<usize> = (0..VAL_SECTIONS).map(|i| base + usize::from(i < extra)).collect();
            let free = len - n_val;
            let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
            let mut offsets: Vec<usize> = (0..VAL_SECTIONS).map(|_| rng.random_range(0..=free)).collect();
            offsets.sort_unstable();
            let mut consumed = 0;
            for (offset, l) in offsets.into_iter().zip(lengths) {
                let start = offset + consumed;
                is_val[start..start + l].fill(true);
                consumed += l;
            }
        }
    }
    // Distance from each index to the nearest validation index.
    let mut dist = vec![usize::MAX; len];
    let mut last = None;
    for t in 0..len {
        if is_val[t] {
            last = Some(t);
        }
        if let Some(v) = last {
            dist[t] = t - v;
        }
    }
    last = None;
    for t in (0..len).rev() {
        if is_val[t] {
            last = Some(t);
        }
        if let Some(v) = last {
            dist[t] = dist[t].min(v - t);
        }
    }
    let val: Vec<usize> = (0..len).filter(|&t| is_val[t]).collect();
    let train: Vec<usize> = (0..len).filter(|&t| dist[t] > spec.gap).collect();
    if train.is_empty() {
        return Err(Error::Data(format!(
            "series of length {len} leaves no training data with gap {}",
            spec.gap
        )));
    }
    Ok(Split { train, val })
}

fn membership(indices: &[usize], len: usize) -> Vec<bool> {
    let mut m = vec![false; len];
    for &i in indices {
        m[i] = true;
    }
    m
}

/// Targets `t` whose whole window `t-k ..= t` lies in the training set.
pub fn training_targets(split: &Split, k: usize) -> Vec<usize> {
    let len = split.train.iter().chain(&split.val).max().map_or(0, |m| m + 1);
    let m = membership(&split.train, len);
    let mut run = 0;
    let mut out = Vec::new();
    for (t, &inside) in m.iter().enumerate() {
        run = if inside { run + 1 } else { 0 };
        if run > k {
            out.push(t);
        }
    }
    out
}

/// Validation targets with a full history none of which is training data.
pub fn validation_targets(split: &Split, k: usize) -> Vec<usize> {
    let len = split.train.iter().chain(&split.val).max().map_or(0, |m| m + 1);
    let train = membership(&split.train, len);
    split
        .val
        .iter()
        .copied()
        .filter(|&t| t >= k && !train[t - k..t].iter().any(|&b| b))
        .collect()
}
