mod common;

use proptest::prelude::*;
use rand::Rng;
use rand_distr::StandardNormal;
use tcnf::conditioners::EncoderKind;
use tcnf::diffcore::Tensor;
use tcnf::flow::{read_model, write_model, FlowModel};

use common::*;

fn kind() -> impl Strategy<Value = EncoderKind> {
    proptest::sample::select(EncoderKind::ALL.to_vec())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn generate_then_normalize_is_identity(
        kind in kind(),
        half in 1usize..=4,
        layers in 1usize..=5,
        k in 3usize..=6,
        seed in any::<u64>(),
        scale in 0.05f64..0.8,
    ) {
        let dim = 2 * half;
        let model = random_model(&small_config(kind, dim, layers, k), seed, scale);
        let mut r = rng(seed);
        let u = random_matrix(&mut r, 3, dim, 3.0);
        let l = model.context_dim();
        let w = (l > 0).then(|| random_matrix(&mut r, 3, l, 2.0));
        let x = model.generate_batch(&u, w.as_ref()).unwrap();
        let (back, _) = model.latent_batch(&x, w.as_ref()).unwrap();
        for (a, b) in back.data().iter().zip(u.data()) {
            prop_assert!((a - b).abs() <= 1e-9, "{a} vs {b}");
        }
    }

    #[test]
    fn log_density_matches_latent_and_logdet(
        kind in kind(),
        seed in any::<u64>(),
    ) {
        let model = random_model(&small_config(kind, 4, 3, 4), seed, 0.5);
        let mut r = rng(seed);
        let x = random_matrix(&mut r, 5, 4, 2.0);
        let l = model.context_dim();
        let w = (l > 0).then(|| random_matrix(&mut r, 5, l, 1.0));
        let lp = model.log_prob_batch(&x, w.as_ref()).unwrap();
        let (u, ld) = model.latent_batch(&x, w.as_ref()).unwrap();
        for b in 0..5 {
            let base = tcnf::flow::gaussian_log_density(u.row(b));
            prop_assert!((lp[b] - (base + ld[b])).abs() <= 1e-10);
        }
    }

    #[test]
    fn model_file_round_trips(kind in kind(), seed in any::<u64>()) {
        let model = random_model(&small_config(kind, 2, 2, 3), seed, 0.3);
        let mut bytes = Vec::new();
        write_model(&model, &mut bytes).unwrap();
        let back = read_model(bytes.as_slice()).unwrap();
        let mut again = Vec::new();
        write_model(&back, &mut again).unwrap();
        prop_assert_eq!(bytes, again);
        prop_assert_eq!(back.params().values(), model.params().values());
    }
}

#[test]
fn loss_gradients_match_finite_differences() {
    let mut r = rng(31);
    for kind in EncoderKind::ALL {
        if kind == EncoderKind::LstmStateful {
            continue;
        }
        for dim in [2, 4] {
            let model = random_model(&small_config(kind, dim, 2, 4), 17, 0.4);
            let batch = random_batch(&mut r, 4, dim, model.lookback());
            let err = loss_gradient_error(&model, &batch);
            assert!(err <= 1e-4, "{kind} D={dim}: {err}");
        }
    }
}

#[test]
fn stateful_chunk_gradients_match_finite_differences() {
    let model = random_model(&small_config(EncoderKind::LstmStateful, 2, 2, 4), 5, 0.4);
    let mut r = rng(2);
    let seq: Vec<f64> = (0..12).map(|_| r.random_range(-1.0..1.0)).collect();
    let err = stateful_chunk_error(&model, &seq);
    assert!(err <= 1e-4, "{err}");
}

#[test]
fn identity_flow_has_standard_normal_entropy() {
    let model = FlowModel::new(&small_config(EncoderKind::None, 2, 3, 1), 0).unwrap();
    let mut r = rng(1);
    let n = 10_000;
    let x = Tensor::from_fn(n, 2, |_, _| r.sample(StandardNormal));
    let nll: Vec<f64> = model.log_prob_batch(&x, None).unwrap().iter().map(|v| -v).collect();
    let mean = nll.iter().sum::<f64>() / n as f64;
    let sd = (nll.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt();
    let expected = (2.0 * std::f64::consts::PI * std::f64::consts::E).ln();
    assert!((mean - expected).abs() <= 3.0 * sd / (n as f64).sqrt(), "{mean} vs {expected}");
}

#[test]
fn random_flow_density_integrates_to_one() {
    let model = random_model(&small_config(EncoderKind::Passthrough, 2, 3, 3), 8, 0.3);
    let context = [0.2, -0.4, 0.1, 0.3, -0.2, 0.5];
    let total = quadrature_2d(&model, &context, 8.0, 400);
    assert!((total - 1.0).abs() <= 0.02, "{total}");
}

#[test]
fn samples_have_the_model_density() {
    // For an identity flow the samples are N(0, I): check mean and variance.
    let model = FlowModel::new(&small_config(EncoderKind::None, 4, 2, 1), 0).unwrap();
    let mut r = rng(3);
    let n = 4000;
    let draws: Vec<Vec<f64>> = (0..n).map(|_| model.sample(&[], &mut r).unwrap()).collect();
    for c in 0..4 {
        let m = draws.iter().map(|d| d[c]).sum::<f64>() / n as f64;
        let v = draws.iter().map(|d| (d[c] - m).powi(2)).sum::<f64>() / (n - 1) as f64;
        assert!(m.abs() < 0.06 && (v - 1.0).abs() < 0.08, "channel {c}: {m} {v}");
    }
}
