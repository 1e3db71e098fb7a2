mod common;

use tcnf::conditioners::EncoderKind;
use tcnf::data::{generate_scenario, parse_csv, prepare, write_csv_to, Family, NormStats, ScenarioSpec};
use tcnf::flow::{read_model, write_model};
use tcnf::score::{compute_latent, score_series, select_threshold, ThresholdPolicy};
use tcnf::train::{train_model, TrainConfig};

use common::*;

fn small_scenario(seed: u64) -> tcnf::data::Scenario {
    let spec = ScenarioSpec {
        len: 500,
        anomaly_length: 10,
        ..desk_scenario(Family::Sine)
    };
    generate_scenario(&spec, seed).unwrap()
}

#[test]
fn every_method_trains_and_scores() {
    let scenario = small_scenario(0);
    let stats = NormStats::fit(&scenario.train_clean).unwrap();
    let train = prepare(&scenario.train_clean, Some(&stats)).unwrap();
    let test = prepare(&scenario.test, Some(&stats)).unwrap();
    let cfg = TrainConfig {
        epochs: 3,
        ..TrainConfig::default()
    };
    for kind in EncoderKind::ALL {
        let (model, report) = train_model(&train, &small_config(kind, 2, 3, 5), &cfg).unwrap();
        assert_eq!(report.train_loss.len(), report.val_loss.len());
        let scores = score_series(&model, &test).unwrap();
        assert_eq!(scores.scores.len(), test.len());
        assert!(scores.scores.iter().all(|s| s.is_finite()), "{kind}");
        let latent = compute_latent(&model, &test).unwrap();
        assert_eq!(latent.scores, scores.scores);
    }
}

#[test]
fn model_file_keeps_scores_and_normalization() {
    let scenario = small_scenario(1);
    let stats = NormStats::fit(&scenario.train_clean).unwrap();
    let train = prepare(&scenario.train_clean, Some(&stats)).unwrap();
    let cfg = TrainConfig {
        epochs: 4,
        ..TrainConfig::default()
    };
    let (model, _) = train_model(&train, &small_config(EncoderKind::LstmStateful, 2, 2, 4), &cfg).unwrap();
    let mut bytes = Vec::new();
    write_model(&model, &mut bytes).unwrap();
    let loaded = read_model(bytes.as_slice()).unwrap();
    assert_eq!(loaded.norm_stats(), Some(&stats));
    let test = prepare(&scenario.test, loaded.norm_stats()).unwrap();
    assert_eq!(
        score_series(&model, &test).unwrap().scores,
        score_series(&loaded, &test).unwrap().scores
    );
}

#[test]
fn csv_round_trip_keeps_training_identical() {
    let scenario = small_scenario(2);
    let mut text = Vec::new();
    write_csv_to(&scenario.train_clean, &mut text).unwrap();
    let back = parse_csv(text.as_slice(), false).unwrap();
    assert_eq!(back.values, scenario.train_clean.values);
    let cfg = TrainConfig {
        epochs: 2,
        ..TrainConfig::default()
    };
    let fit = |ds: &tcnf::data::TimeSeriesDataset| {
        let p = prepare(ds, Some(&NormStats::fit(ds).unwrap())).unwrap();
        let (m, _) = train_model(&p, &small_config(EncoderKind::Passthrough, 2, 2, 3), &cfg).unwrap();
        let mut b = Vec::new();
        write_model(&m, &mut b).unwrap();
        b
    };
    assert_eq!(fit(&scenario.train_clean), fit(&back));
}

#[test]
fn spike_is_the_top_score_of_its_neighbourhood() {
    let spec = ScenarioSpec {
        anomalies: vec![tcnf::data::AnomalyKind::Spike],
        ..desk_scenario(Family::Sine)
    };
    let scenario = generate_scenario(&spec, 0).unwrap();
    let stats = NormStats::fit(&scenario.train_clean).unwrap();
    let train = prepare(&scenario.train_clean, Some(&stats)).unwrap();
    let test = prepare(&scenario.test, Some(&stats)).unwrap();
    let cfg = TrainConfig {
        epochs: 20,
        ..TrainConfig::default()
    };
    let (model, _) = train_model(&train, &small_config(EncoderKind::Passthrough, 2, 4, 10), &cfg).unwrap();
    let scores = score_series(&model, &test).unwrap().scores;
    for a in &scenario.test.anomalies {
        let lo = a.start.saturating_sub(20);
        let hi = (a.end() + 20).min(scores.len());
        let top = (lo..hi).max_by(|&i, &j| scores[i].total_cmp(&scores[j])).unwrap();
        assert!(top >= a.start && top < a.end() + 1, "spike at {} but peak at {top}", a.start);
    }
    let thr = select_threshold(&scores, None, ThresholdPolicy::Quantile(0.995)).unwrap();
    assert!(scenario.test.anomalies.iter().all(|a| scores[a.start] >= thr));
}
