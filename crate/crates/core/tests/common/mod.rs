//! Helpers shared by the integration test targets.
#![allow(dead_code)]

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tcnf::conditioners::{EncoderConfig, EncoderKind, WindowBatch};
use tcnf::data::{generate_scenario, prepare, AnomalyKind, Family, NormStats, ScenarioSpec, SplitMode};
use tcnf::data::{split_train_val, training_targets, validation_targets, SplitSpec};
use tcnf::diffcore::{finite_diff_check, Graph, NodeId, Tensor};
use tcnf::flow::{ConditionerConfig, FlowModel, ModelConfig};
use tcnf::hyperopt::{run_search, SearchConfig};
use tcnf::metrics::auc_roc;
use tcnf::score::score_series;
use tcnf::train::TrainConfig;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Small architecture with every encoder kind at its cheapest settings.
pub fn small_config(kind: EncoderKind, dim: usize, layers: usize, k: usize) -> ModelConfig {
    let mut encoder = EncoderConfig::with_kind(kind, k);
    encoder.cnn_layers = 2;
    encoder.cnn_max_channels = 4;
    encoder.lstm_hidden = 4;
    encoder.lstm_layers = 2;
    encoder.mlp_compression = 2.0;
    ModelConfig {
        dim,
        coupling_layers: layers,
        conditioner: ConditionerConfig {
            multiplier: 2,
            layers: 3,
            dropout: 0.1,
            funnel_factor: 1.0,
        },
        encoder,
    }
}

/// Fresh model with every parameter moved off its initial value, so the
/// zero-initialized output layers no longer hide anything.
pub fn random_model(config: &ModelConfig, seed: u64, scale: f64) -> FlowModel {
    let mut model = FlowModel::new(config, seed).unwrap();
    model.perturb_parameters(scale, seed ^ 0x5eed);
    model
}

pub fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Tensor {
    Tensor::from_fn(rows, cols, |_, _| rng.random_range(-scale..scale))
}

pub fn random_batch(rng: &mut ChaCha8Rng, n: usize, dim: usize, k: usize) -> WindowBatch {
    let len = n + k;
    let values: Vec<f64> = (0..len * dim).map(|_| rng.random_range(-1.0..1.0)).collect();
    let targets: Vec<usize> = (k..len).collect();
    WindowBatch::gather(&values, dim, k, &targets)
}

/// Largest relative error of the mean NLL's gradient against central
/// differences.
pub fn loss_gradient_error(model: &FlowModel, batch: &WindowBatch) -> f64 {
    let mut store = model.params().clone();
    let build = |g: &mut Graph, store: &tcnf::diffcore::ParamStore| -> Result<NodeId, tcnf::diffcore::DiffError> {
        let mut m = model.clone();
        *m.params_mut() = store.clone();
        let (loss, _) = m.batch_loss(g, batch, &mut rng(0)).expect("loss builds");
        Ok(loss)
    };
    finite_diff_check(build, &mut store, 1e-4).unwrap()
}

/// Same check for a truncated-backprop chunk of the stateful encoder: the
/// state is carried step to step and the per-step NLLs are summed.
pub fn stateful_chunk_error(model: &FlowModel, values: &[f64]) -> f64 {
    let dim = model.dim();
    let steps = values.len() / dim;
    let mut store = model.params().clone();
    let build = |g: &mut Graph, store: &tcnf::diffcore::ParamStore| -> Result<NodeId, tcnf::diffcore::DiffError> {
        let mut m = model.clone();
        *m.params_mut() = store.clone();
        let mut r = rng(0);
        let mut state = m.encoder().zero_state(g, 1);
        let mut total: Option<NodeId> = None;
        for t in 1..steps {
            let prev = g.constant(Tensor::matrix(1, dim, values[(t - 1) * dim..t * dim].to_vec()).unwrap());
            let (next, context) = m.encoder().lstm_step(g, m.params(), prev, &state, &mut r);
            state = next;
            let x = g.constant(Tensor::matrix(1, dim, values[t * dim..(t + 1) * dim].to_vec()).unwrap());
            let nodes = m.normalize_nodes(g, x, Some(context), &mut r);
            let lp = g.sum(nodes.log_prob);
            total = Some(match total {
                Some(acc) => g.add(acc, lp),
                None => lp,
            });
        }
        Ok(g.neg(total.expect("at least two steps")))
    };
    finite_diff_check(build, &mut store, 1e-4).unwrap()
}

/// Midpoint-rule integral of `exp(log p(x | w))` over `[-h, h]^2`.
pub fn quadrature_2d(model: &FlowModel, context: &[f64], half_width: f64, steps: usize) -> f64 {
    let cell = 2.0 * half_width / steps as f64;
    let centre = |i: usize| -half_width + (i as f64 + 0.5) * cell;
    let l = context.len();
    let mut total = 0.0;
    for i in 0..steps {
        let x = Tensor::from_fn(steps, 2, |j, c| if c == 0 { centre(i) } else { centre(j) });
        let w = (l > 0).then(|| Tensor::from_fn(steps, l, |_, c| context[c]));
        let lp = model.log_prob_batch(&x, w.as_ref()).unwrap();
        total += lp.iter().map(|v| v.exp()).sum::<f64>();
    }
    total * cell * cell
}

/// Quadratic-time AUC: share of (positive, negative) pairs ranked correctly,
/// ties counting one half.
pub fn pairwise_auc(scores: &[f64], labels: &[bool]) -> f64 {
    let mut wins = 0.0;
    let mut pairs = 0.0;
    for (i, &li) in labels.iter().enumerate() {
        if !li {
            continue;
        }
        for (j, &lj) in labels.iter().enumerate() {
            if lj {
                continue;
            }
            pairs += 1.0;
            if scores[i] > scores[j] {
                wins += 1.0;
            } else if scores[i] == scores[j] {
                wins += 0.5;
            }
        }
    }
    wins / pairs
}

/// Describes the first leak of a split, if any: a training window index
/// within `k` of a validation index, or a training index inside a
/// validation context.
pub fn find_leak(len: usize, k: usize, mode: SplitMode, seed: u64) -> Option<String> {
    let split = split_train_val(len, &SplitSpec { mode, gap: k, seed }).ok()?;
    let val = &split.val;
    let nearest = |j: usize| -> usize {
        let pos = val.partition_point(|&v| v < j);
        let after = val.get(pos).map_or(usize::MAX, |&v| v - j);
        let before = pos.checked_sub(1).map_or(usize::MAX, |p| j - val[p]);
        after.min(before)
    };
    for t in training_targets(&split, k) {
        for j in t - k..=t {
            if nearest(j) <= k {
                return Some(format!("len {len} k {k} {mode:?}: training window of t={t} reaches index {j}"));
            }
        }
    }
    let train: std::collections::HashSet<usize> = split.train.iter().copied().collect();
    for t in validation_targets(&split, k) {
        if let Some(j) = (t - k..t).find(|j| train.contains(j)) {
            return Some(format!("len {len} k {k} {mode:?}: validation context of t={t} holds training index {j}"));
        }
    }
    None
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// The synthetic scenario used for desk-scale detection runs.
pub fn desk_scenario(family: Family) -> ScenarioSpec {
    let anomalies = match family {
        // Anomalies that stay inside the marginal range of the signal.
        Family::Wave => vec![AnomalyKind::Pattern, AnomalyKind::Platform],
        _ => vec![AnomalyKind::Spike, AnomalyKind::Platform],
    };
    ScenarioSpec {
        family,
        len: 2000,
        dim: 2,
        anomalies,
        count: 3,
        ..ScenarioSpec::default()
    }
}

/// Narrowed search ranges for desk-scale runs.
pub fn desk_overrides() -> BTreeMap<String, [f64; 2]> {
    BTreeMap::from([
        ("coupling_layers".to_string(), [3.0, 8.0]),
        ("theta_multiplier".to_string(), [1.0, 16.0]),
        ("theta_layers".to_string(), [3.0, 4.0]),
    ])
}

/// Searches on the clean training series, selects on the contaminated one
/// and returns the winner's test AUC.
pub fn desk_run(spec: &ScenarioSpec, method: EncoderKind, budget: usize, seed: u64) -> f64 {
    let scenario = generate_scenario(spec, seed).unwrap();
    let stats = NormStats::fit(&scenario.train_clean).unwrap();
    let train = prepare(&scenario.train_clean, Some(&stats)).unwrap();
    let eval = prepare(&scenario.train_anomalous, Some(&stats)).unwrap();
    let test = prepare(&scenario.test, Some(&stats)).unwrap();
    let cfg = SearchConfig {
        method,
        budget,
        seed,
        candidate_epochs: 10,
        train: TrainConfig {
            epochs: 50,
            seed,
            ..TrainConfig::default()
        },
        overrides: desk_overrides(),
        ..SearchConfig::default()
    };
    let result = run_search(&train, Some(&eval), &cfg).unwrap();
    let scores = score_series(&result.model, &test).unwrap();
    auc_roc(&scores.scores, test.labels.as_ref().unwrap()).unwrap()
}
