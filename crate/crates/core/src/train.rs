//! Adam and the maximum-likelihood training loop.

use std::io::Write;
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::conditioners::{LstmState, WindowBatch};
use crate::data::{
    split_train_val, training_targets, validation_targets, Split, SplitMode, SplitSpec,
    TimeSeriesDataset,
};
use crate::diffcore::{Graph, NodeId, ParamStore, Tensor};
use crate::flow::{FlowModel, ModelConfig};
use crate::{Error, Result};

/// Scoring and validation process targets in chunks of this many rows.
pub(crate) const EVAL_CHUNK: usize = 256;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    /// Global gradient norm limit; non-positive disables clipping.
    pub clip_norm: f64,
    pub seed: u64,
    pub split: SplitMode,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 64,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            patience: 10,
            clip_norm: 5.0,
            seed: 0,
            split: SplitMode::RandomSections,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("epochs", self.epochs as f64),
            ("batch_size", self.batch_size as f64),
            ("learning_rate", self.learning_rate),
            ("epsilon", self.epsilon),
            ("patience", self.patience as f64),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Config(format!("{name} must lie in [0, 1), got {b}")));
            }
        }
        Ok(())
    }
}

/// First and second moment estimates for every parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub step: u64,
}

impl AdamState {
    pub fn new(store: &ParamStore) -> Self {
        let zeros: Vec<Tensor> = store
            .iter()
            .map(|(_, p)| Tensor::zeros(p.value.shape()))
            .collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }
}

/// One bias-corrected Adam update from the gradients accumulated in `store`,
/// after optional global-norm clipping.
pub fn adam_step(store: &mut ParamStore, state: &mut AdamState, cfg: &TrainConfig) -> Result<()> {
    let mut sq_norm = 0.0;
    for (_, p) in store.iter() {
        if !p.grad.is_finite() {
            return Err(Error::NonFiniteGradient(p.name.clone()));
        }
        sq_norm += p.grad.data().iter().map(|g| g * g).sum::<f64>();
    }
    let norm = sq_norm.sqrt();
    let scale = if cfg.clip_norm > 0.0 && norm > cfg.clip_norm {
        cfg.clip_norm / norm
    } else {
        1.0
    };
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let i = id.index();
        let p = store.get_mut(id);
        if !p.trainable {
            continue;
        }
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        for (j, (w, &g)) in p.value.data_mut().iter_mut().zip(p.grad.data()).enumerate() {
            let g = g * scale;
            m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * g;
            v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * g * g;
            let m_hat = m[j] / c1;
            let v_hat = v[j] / c2;
            *w -= cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.epsilon);
        }
    }
    Ok(())
}

/// Per-epoch losses of one training run.
#[derive(Debug, Clone)]
pub struct TrainReport {
    pub train_loss: Vec<f64>,
    pub val_loss: Vec<f64>,
    /// 1-based epoch whose parameters were kept.
    pub best_epoch: usize,
    pub wall_time: Duration,
}

/// Wall time is excluded: it is the only nondeterministic field.
impl PartialEq for TrainReport {
    fn eq(&self, other: &Self) -> bool {
        self.train_loss == other.train_loss
            && self.val_loss == other.val_loss
            && self.best_epoch == other.best_epoch
    }
}

impl TrainReport {
    pub fn best_val_loss(&self) -> f64 {
        self.val_loss[self.best_epoch - 1]
    }

    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "epoch,train_loss,val_loss")?;
        for (i, (t, v)) in self.train_loss.iter().zip(&self.val_loss).enumerate() {
            writeln!(out, "{},{t},{v}", i + 1)?;
        }
        out.flush()?;
        Ok(())
    }
}

/// Contiguous `[start, end)` runs of a sorted index list.
fn runs(indices: &[usize]) -> Vec<(usize, usize)> {
    let mut out: Vec<(usize, usize)> = Vec::new();
    for &i in indices {
        match out.last_mut() {
            Some((_, end)) if *end == i => *end += 1,
            _ => out.push((i, i + 1)),
        }
    }
    out
}

/// Stateful pass over targets `from .. to` of `values`: the LSTM consumes
/// `x_{t-1}` before each target `x_t`, starting from `state`. Returns the
/// mean-NLL node and the final state nodes.
fn stateful_chunk(
    model: &FlowModel,
    g: &mut Graph,
    values: &[f64],
    from: usize,
    to: usize,
    state: LstmState,
    rng: &mut dyn RngCore,
) -> Result<(NodeId, LstmState)> {
    let dim = model.dim();
    let encoder = model.encoder();
    let mut state = state;
    let mut contexts = Vec::with_capacity(to - from);
    for t in from..to {
        let x = g.constant(Tensor::matrix(1, dim, values[(t - 1) * dim..t * dim].to_vec())?);
        let (next, h) = encoder.lstm_step(g, model.params(), x, &state, rng);
        state = next;
        contexts.push(h);
    }
    let w = g.concat_rows(&contexts);
    let x = g.constant(Tensor::matrix(to - from, dim, values[from * dim..to * dim].to_vec())?);
    let nodes = model.normalize_nodes(g, x, Some(w), rng);
    let mean = g.mean(nodes.log_prob);
    Ok((g.neg(mean), state))
}

/// Evaluated state detached into constants of a fresh graph.
fn carry_state(src: &mut Graph, dst: &mut Graph, state: &LstmState) -> Result<LstmState> {
    state
        .iter()
        .map(|&(h, c)| {
            let h = dst.constant(src.forward(h)?.clone());
            let c = dst.constant(src.forward(c)?.clone());
            Ok((h, c))
        })
        .collect()
}

/// Mean NLL of every validation target.
fn validation_loss(model: &FlowModel, ds: &TimeSeriesDataset, split: &Split) -> Result<f64> {
    let mut total = 0.0;
    let mut count = 0usize;
    if model.encoder().kind().is_stateful() {
        let mut rng = crate::nn::inference_rng();
        for (start, end) in runs(&split.val) {
            let mut g = Graph::new();
            let mut state = model.encoder().zero_state(&mut g, 1);
            let mut t = start + 1;
            while t < end {
                let to = (t + EVAL_CHUNK).min(end);
                let mut next = Graph::new();
                let carried = carry_state(&mut g, &mut next, &state)?;
                g = next;
                let (loss, s) = stateful_chunk(model, &mut g, &ds.values, t, to, carried, &mut rng)?;
                total += g.forward(loss)?.data()[0] * (to - t) as f64;
                count += to - t;
                state = s;
                t = to;
            }
        }
    } else {
        let k = model.lookback();
        let targets = validation_targets(split, k);
        for chunk in targets.chunks(EVAL_CHUNK) {
            let batch = WindowBatch::gather(&ds.values, ds.dim, k, chunk);
            let lp = model.log_prob_windows(&batch)?;
            total -= lp.iter().sum::<f64>();
            count += lp.len();
        }
    }
    if count == 0 {
        return Err(Error::Data("validation split yields no windows".into()));
    }
    Ok(total / count as f64)
}

/// Runs one optimizer step on the loss node `loss` of graph `g`.
fn step(
    model: &mut FlowModel,
    g: &mut Graph,
    loss: NodeId,
    adam: &mut AdamState,
    cfg: &TrainConfig,
) -> Result<f64> {
    let value = g.forward(loss)?.data()[0];
    if !value.is_finite() {
        return Ok(value);
    }
    let grads = g.backward(loss)?;
    model.params_mut().zero_grad();
    model.params_mut().accumulate(&grads);
    adam_step(model.params_mut(), adam, cfg)?;
    Ok(value)
}

fn train_epoch(
    model: &mut FlowModel,
    ds: &TimeSeriesDataset,
    split: &Split,
    targets: &mut [usize],
    adam: &mut AdamState,
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    let mut total = 0.0;
    let mut count = 0usize;
    if model.encoder().kind().is_stateful() {
        let k = model.lookback();
        for (start, end) in runs(&split.train) {
            let mut carried: Option<(Graph, LstmState)> = None;
            let mut t = start + 1;
            while t < end {
                let to = (t + k).min(end);
                let mut g = Graph::training();
                let state = match carried.as_mut() {
                    Some((prev, s)) => carry_state(prev, &mut g, s)?,
                    None => model.encoder().zero_state(&mut g, 1),
                };
                let (loss, next) = stateful_chunk(model, &mut g, &ds.values, t, to, state, rng)?;
                let value = step(model, &mut g, loss, adam, cfg)?;
                if !value.is_finite() {
                    return Ok(value);
                }
                total += value * (to - t) as f64;
                count += to - t;
                carried = Some((g, next));
                t = to;
            }
        }
    } else {
        targets.shuffle(rng);
        let k = model.lookback();
        for chunk in targets.chunks(cfg.batch_size) {
            let batch = WindowBatch::gather(&ds.values, ds.dim, k, chunk);
            let mut g = Graph::training();
            let (loss, _) = model.batch_loss(&mut g, &batch, rng)?;
            let value = step(model, &mut g, loss, adam, cfg)?;
            if !value.is_finite() {
                return Ok(value);
            }
            total += value * chunk.len() as f64;
            count += chunk.len();
        }
    }
    if count == 0 {
        return Err(Error::Data("training split yields no windows".into()));
    }
    Ok(total / count as f64)
}

/// Fits a fresh model to a normalized, even-channel dataset and returns the
/// parameters of the epoch with the lowest validation loss.
///
/// The stateful encoder walks each contiguous training run in order with
/// truncated backpropagation every `k` steps; every other kind trains on
/// shuffled mini-batches of windows.
pub fn train_model(
    ds: &TimeSeriesDataset,
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
) -> Result<(FlowModel, TrainReport)> {
    cfg.validate()?;
    if ds.dim != model_cfg.dim {
        return Err(Error::Dimension(format!(
            "dataset has {} channels, model expects {}",
            ds.dim, model_cfg.dim
        )));
    }
    let started = Instant::now();
    let mut model = FlowModel::new(model_cfg, cfg.seed)?;
    model.set_norm_stats(ds.norm_stats.clone());
    let k = model.lookback();
    let split = split_train_val(
        ds.len(),
        &SplitSpec {
            mode: cfg.split,
            gap: k,
            seed: cfg.seed,
        },
    )?;
    let mut targets = training_targets(&split, k);
    if targets.is_empty() {
        return Err(Error::Data("training split yields no windows".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x7472_6169_6e00);
    let mut adam = AdamState::new(model.params());
    let mut report = TrainReport {
        train_loss: Vec::new(),
        val_loss: Vec::new(),
        best_epoch: 0,
        wall_time: Duration::ZERO,
    };
    let mut best = (f64::INFINITY, model.params().values());
    let mut last_finite = None;
    for epoch in 1..=cfg.epochs {
        let train = train_epoch(&mut model, ds, &split, &mut targets, &mut adam, cfg, &mut rng)?;
        let val = if train.is_finite() {
            validation_loss(&model, ds, &split).unwrap_or(f64::NAN)
        } else {
            f64::NAN
        };
        if !(train.is_finite() && val.is_finite()) {
            return Err(Error::Diverged { epoch, last_finite });
        }
        last_finite = Some(epoch);
        report.train_loss.push(train);
        report.val_loss.push(val);
        if val < best.0 {
            best = (val, model.params().values());
            report.best_epoch = epoch;
        } else if epoch - report.best_epoch >= cfg.patience {
            break;
        }
    }
    model.params_mut().set_values(best.1);
    report.wall_time = started.elapsed();
    Ok((model, report))
}
