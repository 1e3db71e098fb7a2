//! Hyperparameter search with CMA-ES.
//!
//! Candidates live in `[0, 1]^n` and are decoded affinely onto each
//! parameter's bounds; integer parameters are rounded half-up and clipped.

mod cma;

use std::collections::BTreeMap;
use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use cma::{
    cma_ask, cma_tell, default_population, minimize, reflect, CmaOptions, CmaState, Evaluated,
    Minimum, STAGNATION_GENERATIONS, STAGNATION_TOLERANCE,
};

use crate::conditioners::{EncoderConfig, EncoderKind};
use crate::data::TimeSeriesDataset;
use crate::flow::{ConditionerConfig, FlowModel, ModelConfig};
use crate::metrics::{auc_roc, combined_objective, default_window, vus_roc};
use crate::score::score_series;
use crate::train::{train_model, TrainConfig, TrainReport};
use crate::{Error, Result};

/// Environment variable holding the number of parallel candidate workers.
pub const WORKERS_ENV: &str = "TCNF_WORKERS";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ParamKind {
    Integer,
    Real,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamDef {
    pub name: String,
    pub lower: f64,
    pub upper: f64,
    pub kind: ParamKind,
}

/// Bounded search space of one method.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchSpace {
    pub params: Vec<ParamDef>,
}

fn def(name: &str, lower: f64, upper: f64, kind: ParamKind) -> ParamDef {
    ParamDef {
        name: name.into(),
        lower,
        upper,
        kind,
    }
}

impl SearchSpace {
    /// The full ranges for `method`; `max_lookback` is 50 for the synthetic
    /// suites and 100 otherwise.
    pub fn for_method(method: EncoderKind, max_lookback: usize) -> Self {
        use ParamKind::{Integer, Real};
        let mut params = vec![
            def("coupling_layers", 3.0, 20.0, Integer),
            def("theta_multiplier", 1.0, 50.0, Integer),
            def("theta_layers", 3.0, 8.0, Integer),
            def("theta_dropout", 0.1, 0.9, Real),
            def("theta_funnel", 1.0, 10.0, Real),
        ];
        if method.uses_history() {
            params.push(def("lookback", 1.0, max_lookback as f64, Integer));
        }
        match method {
            EncoderKind::Mlp => params.extend([
                def("encoder_layers", 3.0, 20.0, Integer),
                def("encoder_dropout", 0.1, 0.9, Real),
                def("encoder_compression", 1.0, 20.0, Real),
            ]),
            EncoderKind::Cnn => params.extend([
                def("encoder_layers", 1.0, 5.0, Integer),
                def("encoder_dropout", 0.1, 0.9, Real),
                def("encoder_kernel", 3.0, 7.0, Integer),
                def("encoder_max_channels", 1.0, 20.0, Integer),
            ]),
            EncoderKind::LstmStateless | EncoderKind::LstmStateful => params.extend([
                def("encoder_layers", 1.0, 10.0, Integer),
                def("encoder_dropout", 0.1, 0.9, Real),
            ]),
            _ => {}
        }
        Self { params }
    }

    pub fn dim(&self) -> usize {
        self.params.len()
    }

    /// Narrows named parameters to `[lower, upper]`, which must lie inside
    /// the current bounds. Equal bounds pin a parameter.
    pub fn with_overrides(&self, overrides: &BTreeMap<String, [f64; 2]>) -> Result<Self> {
        let mut out = self.clone();
        for (name, &[lo, hi]) in overrides {
            let p = out
                .params
                .iter_mut()
                .find(|p| &p.name == name)
                .ok_or_else(|| Error::Config(format!("search space has no parameter '{name}'")))?;
            if !(lo <= hi && lo >= p.lower && hi <= p.upper) {
                return Err(Error::Config(format!(
                    "override [{lo}, {hi}] for {name} is not inside [{}, {}]",
                    p.lower, p.upper
                )));
            }
            p.lower = lo;
            p.upper = hi;
        }
        Ok(out)
    }
}

/// Decoded parameter values in space order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Decoded {
    pub values: Vec<(String, f64)>,
}

impl Decoded {
    pub fn get(&self, name: &str) -> Option<f64> {
        self.values.iter().find(|(n, _)| n == name).map(|(_, v)| *v)
    }

    /// Applies the decoded values on top of `base`.
    pub fn to_model_config(&self, base: &ModelConfig) -> ModelConfig {
        let mut cfg = base.clone();
        let int = |v: f64| v as usize;
        for (name, v) in &self.values {
            let v = *v;
            match name.as_str() {
                "coupling_layers" => cfg.coupling_layers = int(v),
                "theta_multiplier" => cfg.conditioner.multiplier = int(v),
                "theta_layers" => cfg.conditioner.layers = int(v),
                "theta_dropout" => cfg.conditioner.dropout = v,
                "theta_funnel" => cfg.conditioner.funnel_factor = v,
                "lookback" => cfg.encoder.lookback = int(v),
                "encoder_dropout" => cfg.encoder.dropout = v,
                "encoder_compression" => cfg.encoder.mlp_compression = v,
                "encoder_kernel" => cfg.encoder.cnn_kernel = int(v),
                "encoder_max_channels" => cfg.encoder.cnn_max_channels = int(v),
                "encoder_layers" => match cfg.encoder.kind {
                    EncoderKind::Mlp => cfg.encoder.mlp_layers = int(v),
                    EncoderKind::Cnn => cfg.encoder.cnn_layers = int(v),
                    _ => cfg.encoder.lstm_layers = int(v),
                },
                _ => {}
            }
        }
        cfg
    }
}

/// Maps a candidate in `[0, 1]^n` onto the space. Out-of-range coordinates
/// are clamped first.
pub fn decode(candidate: &[f64], space: &SearchSpace) -> Decoded {
    let values = space
        .params
        .iter()
        .zip(candidate)
        .map(|(p, &c)| {
            let raw = p.lower + c.clamp(0.0, 1.0) * (p.upper - p.lower);
            let v = match p.kind {
                ParamKind::Integer => (raw + 0.5).floor(),
                ParamKind::Real => raw,
            };
            (p.name.clone(), v.clamp(p.lower, p.upper))
        })
        .collect();
    Decoded { values }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Objective {
    /// `-(0.3 AUC + 0.7 VUS)` on a labeled evaluation series.
    #[serde(rename = "labeled-30-70")]
    Labeled3070,
    /// Best validation NLL of the training run.
    ValLoss,
}

impl Objective {
    pub fn name(self) -> &'static str {
        match self {
            Objective::Labeled3070 => "labeled-30-70",
            Objective::ValLoss => "val-loss",
        }
    }
}

impl std::str::FromStr for Objective {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [Objective::Labeled3070, Objective::ValLoss]
            .into_iter()
            .find(|o| o.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown objective '{s}', expected labeled-30-70 or val-loss")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SearchConfig {
    pub method: EncoderKind,
    pub objective: Objective,
    /// Total candidate evaluations.
    pub budget: usize,
    pub seed: u64,
    /// First population size; the default depends on the space dimension.
    pub population: Option<usize>,
    pub sigma0: f64,
    pub restarts: bool,
    pub max_lookback: usize,
    /// Epochs per candidate; the winner is refit with `train.epochs`.
    pub candidate_epochs: usize,
    pub train: TrainConfig,
    /// Hidden size of the LSTM encoders (not searched).
    pub lstm_hidden: usize,
    pub overrides: BTreeMap<String, [f64; 2]>,
    /// VUS window; the median labeled range length when unset.
    pub metric_window: Option<usize>,
}

impl Default for SearchConfig {
    fn default() -> Self {
        Self {
            method: EncoderKind::Passthrough,
            objective: Objective::Labeled3070,
            budget: 60,
            seed: 0,
            population: None,
            sigma0: 0.3,
            restarts: true,
            max_lookback: 50,
            candidate_epochs: 10,
            train: TrainConfig::default(),
            lstm_hidden: 8,
            overrides: BTreeMap::new(),
            metric_window: None,
        }
    }
}

impl SearchConfig {
    pub fn space(&self) -> Result<SearchSpace> {
        SearchSpace::for_method(self.method, self.max_lookback).with_overrides(&self.overrides)
    }
}

/// One evaluated candidate.
#[derive(Debug, Clone, PartialEq)]
pub struct Trial {
    pub trial: usize,
    pub generation: usize,
    pub seed: u64,
    pub params: Decoded,
    pub fitness: f64,
    pub auc: Option<f64>,
    pub vus: Option<f64>,
    pub val_loss: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct SearchResult {
    /// Every trial in evaluation order.
    pub trials: Vec<Trial>,
    /// Index into `trials` of the winner.
    pub best: usize,
    pub model: FlowModel,
    pub report: TrainReport,
    pub model_config: ModelConfig,
}

impl SearchResult {
    /// Trials sorted best first (NaN fitness last, ties by trial index).
    pub fn ranked(&self) -> Vec<&Trial> {
        let mut out: Vec<&Trial> = self.trials.iter().collect();
        let key = |f: f64| if f.is_nan() { f64::INFINITY } else { f };
        out.sort_by(|a, b| key(a.fitness).total_cmp(&key(b.fitness)).then(a.trial.cmp(&b.trial)));
        out
    }
}

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Seed of the `trial`-th candidate of a run.
pub fn trial_seed(run_seed: u64, trial: usize) -> u64 {
    splitmix(splitmix(run_seed) ^ trial as u64)
}

/// Base architecture the decoded parameters are applied to.
pub fn base_model_config(cfg: &SearchConfig, dim: usize) -> ModelConfig {
    let mut encoder = EncoderConfig::with_kind(cfg.method, 1);
    encoder.lstm_hidden = cfg.lstm_hidden;
    ModelConfig {
        dim,
        coupling_layers: 3,
        conditioner: ConditionerConfig::default(),
        encoder,
    }
}

/// Labeled objective terms of a trained model on `eval`.
pub fn evaluate_model(model: &FlowModel, eval: &TimeSeriesDataset, window: Option<usize>) -> Result<(f64, f64)> {
    let labels = eval
        .labels
        .as_ref()
        .ok_or_else(|| Error::Search("labeled objective needs a labeled evaluation series".into()))?;
    let scores = score_series(model, eval)?.scores;
    let w = window.unwrap_or_else(|| default_window(labels));
    Ok((auc_roc(&scores, labels)?, vus_roc(&scores, labels, w)?))
}

/// Objective terms of one trained candidate.
struct TrialScore {
    fitness: f64,
    auc: Option<f64>,
    vus: Option<f64>,
    val_loss: f64,
}

fn run_trial(
    train: &TimeSeriesDataset,
    eval: Option<&TimeSeriesDataset>,
    cfg: &SearchConfig,
    model_cfg: &ModelConfig,
    seed: u64,
    epochs: usize,
) -> Result<TrialScore> {
    let train_cfg = TrainConfig {
        epochs,
        seed,
        ..cfg.train.clone()
    };
    let (model, report) = train_model(train, model_cfg, &train_cfg)?;
    let val = report.best_val_loss();
    match (cfg.objective, eval) {
        (Objective::ValLoss, _) => Ok(TrialScore {
            fitness: val,
            auc: None,
            vus: None,
            val_loss: val,
        }),
        (Objective::Labeled3070, Some(eval)) => {
            let (auc, vus) = evaluate_model(&model, eval, cfg.metric_window)?;
            Ok(TrialScore {
                fitness: -combined_objective(auc, vus),
                auc: Some(auc),
                vus: Some(vus),
                val_loss: val,
            })
        }
        (Objective::Labeled3070, None) => Err(Error::Search(
            "labeled objective needs a labeled evaluation series".into(),
        )),
    }
}

fn thread_pool() -> Result<rayon::ThreadPool> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Ok(v) = std::env::var(WORKERS_ENV) {
        let n: usize = v
            .parse()
            .map_err(|_| Error::Config(format!("{WORKERS_ENV}={v} is not a worker count")))?;
        builder = builder.num_threads(n);
    }
    builder
        .build()
        .map_err(|e| Error::Search(format!("cannot start workers: {e}")))
}

/// Searches the method's space on `train` (normalized, even channels),
/// then refits the best candidate with the full training budget.
///
/// Candidates of one generation train in parallel. A candidate whose
/// training fails gets NaN fitness, which CMA-ES ranks last.
pub fn run_search(
    train: &TimeSeriesDataset,
    eval: Option<&TimeSeriesDataset>,
    cfg: &SearchConfig,
) -> Result<SearchResult> {
    if cfg.objective == Objective::Labeled3070 {
        match eval.and_then(|e| e.labels.as_ref()) {
            Some(l) if l.iter().any(|&b| b) && l.iter().any(|&b| !b) => {}
            _ => {
                return Err(Error::Search(
                    "labeled objective needs an evaluation series with both classes".into(),
                ))
            }
        }
    }
    let space = cfg.space()?;
    let base = base_model_config(cfg, train.dim);
    let pool = thread_pool()?;
    let options = CmaOptions {
        sigma0: cfg.sigma0,
        lambda: cfg.population,
        restarts: cfg.restarts,
        seed: cfg.seed,
    };
    let mut trials: Vec<Trial> = Vec::new();
    let mut failure: Option<Error> = None;
    minimize(space.dim(), cfg.budget, &options, |generation, candidates| {
        let first = trials.len();
        let jobs: Vec<(usize, Decoded)> = candidates
            .iter()
            .enumerate()
            .map(|(i, c)| (first + i, decode(c, &space)))
            .collect();
        let outcomes: Vec<Result<TrialScore>> = pool.install(|| {
            jobs.par_iter()
                .map(|(trial, decoded)| {
                    let model_cfg = decoded.to_model_config(&base);
                    let seed = trial_seed(cfg.seed, *trial);
                    run_trial(train, eval, cfg, &model_cfg, seed, cfg.candidate_epochs)
                })
                .collect()
        });
        let mut fitness = Vec::with_capacity(jobs.len());
        for ((trial, params), outcome) in jobs.into_iter().zip(outcomes) {
            let (f, auc, vus, val_loss) = match outcome {
                Ok(t) => (t.fitness, t.auc, t.vus, Some(t.val_loss)),
                Err(e @ Error::Search(_)) => {
                    failure.get_or_insert(e);
                    (f64::NAN, None, None, None)
                }
                Err(_) => (f64::NAN, None, None, None),
            };
            fitness.push(f);
            trials.push(Trial {
                trial,
                generation,
                seed: trial_seed(cfg.seed, trial),
                params,
                fitness: f,
                auc,
                vus,
                val_loss,
            });
        }
        fitness
    })?;
    if let Some(e) = failure {
        return Err(e);
    }
    let key = |f: f64| if f.is_nan() { f64::INFINITY } else { f };
    let best = (0..trials.len())
        .min_by(|&a, &b| key(trials[a].fitness).total_cmp(&key(trials[b].fitness)).then(a.cmp(&b)))
        .ok_or_else(|| Error::Search("no trials were run".into()))?;
    if trials[best].fitness.is_nan() {
        return Err(Error::Search("every candidate failed to train".into()));
    }
    let model_cfg = trials[best].params.to_model_config(&base);
    let refit_cfg = TrainConfig {
        seed: trials[best].seed,
        ..cfg.train.clone()
    };
    let (model, report) = train_model(train, &model_cfg, &refit_cfg)?;
    Ok(SearchResult {
        trials,
        best,
        model,
        report,
        model_config: model_cfg,
    })
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Trials log: one row per candidate with every decoded parameter.
pub fn write_trials_csv<W: Write>(trials: &[Trial], mut out: W) -> Result<()> {
    let names: Vec<&str> = trials
        .first()
        .map(|t| t.params.values.iter().map(|(n, _)| n.as_str()).collect())
        .unwrap_or_default();
    writeln!(
        out,
        "trial,generation,seed,{},fitness,auc,vus,val_loss",
        names.join(",")
    )?;
    for t in trials {
        let values: Vec<String> = t.params.values.iter().map(|(_, v)| v.to_string()).collect();
        writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            t.trial,
            t.generation,
            t.seed,
            values.join(","),
            t.fitness,
            opt(t.auc),
            opt(t.vus),
            opt(t.val_loss)
        )?;
    }
    out.flush()?;
    Ok(())
}
