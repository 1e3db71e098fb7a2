//! Per-timestep anomaly scores, thresholds and latent export.
//!
//! The score of step `t` is `-log p(x_t | w_t)`. Steps without a full
//! history use a context left-padded with the first row; the stateful
//! encoder scores the first step with the state obtained by consuming that
//! row from zero, without advancing.

use std::fmt::Write as _;
use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::conditioners::WindowBatch;
use crate::data::{label_ranges, TimeSeriesDataset};
use crate::diffcore::Tensor;
use crate::flow::{gaussian_log_density, FlowModel};
use crate::metrics::best_f1_threshold;
use crate::train::EVAL_CHUNK;
use crate::{Error, Result};

/// Scores aligned with the rows of a test series.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreSeries {
    pub scores: Vec<f64>,
    pub labels: Option<Vec<bool>>,
    pub model_id: String,
    pub dataset_id: String,
}

impl ScoreSeries {
    /// CSV with columns `t,score[,label]`; `t` is the 0-based row index.
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        match &self.labels {
            Some(labels) => {
                writeln!(out, "t,score,label")?;
                for (t, (s, l)) in self.scores.iter().zip(labels).enumerate() {
                    writeln!(out, "{t},{s},{}", u8::from(*l))?;
                }
            }
            None => {
                writeln!(out, "t,score")?;
                for (t, s) in self.scores.iter().enumerate() {
                    writeln!(out, "{t},{s}")?;
                }
            }
        }
        out.flush()?;
        Ok(())
    }

    /// Line plot of the scores with labeled ranges shaded.
    pub fn to_svg(&self) -> String {
        let (w, h, pad) = (900.0, 300.0, 30.0);
        let n = self.scores.len().max(2);
        let lo = self.scores.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = self.scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let span = if hi > lo { hi - lo } else { 1.0 };
        let x = |t: usize| pad + (w - 2.0 * pad) * t as f64 / (n - 1) as f64;
        let y = |s: f64| h - pad - (h - 2.0 * pad) * (s - lo) / span;
        let mut svg = format!(
            "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" viewBox=\"0 0 {w} {h}\">\n\
             <rect width=\"{w}\" height=\"{h}\" fill=\"white\"/>\n"
        );
        if let Some(labels) = &self.labels {
            for (s, e) in label_ranges(labels) {
                let _ = writeln!(
                    svg,
                    "<rect x=\"{:.2}\" y=\"{pad}\" width=\"{:.2}\" height=\"{:.2}\" fill=\"#f4b6b6\"/>",
                    x(s),
                    (x(e.max(s + 1)) - x(s)).max(1.0),
                    h - 2.0 * pad
                );
            }
        }
        let points: Vec<String> = self
            .scores
            .iter()
            .enumerate()
            .map(|(t, &s)| format!("{:.2},{:.2}", x(t), y(s)))
            .collect();
        let _ = writeln!(
            svg,
            "<polyline fill=\"none\" stroke=\"#1f4e9c\" stroke-width=\"1\" points=\"{}\"/>",
            points.join(" ")
        );
        let _ = writeln!(
            svg,
            "<text x=\"{pad}\" y=\"{:.0}\" font-size=\"12\" font-family=\"sans-serif\">score ({} on {})</text>",
            pad - 10.0,
            self.model_id,
            self.dataset_id
        );
        svg.push_str("</svg>\n");
        svg
    }
}

fn check_dim(model: &FlowModel, ds: &TimeSeriesDataset) -> Result<()> {
    if ds.dim != model.dim() {
        return Err(Error::Dimension(format!(
            "dataset has {} channels, model expects {}",
            ds.dim,
            model.dim()
        )));
    }
    if ds.is_empty() {
        return Err(Error::Data("cannot score an empty series".into()));
    }
    Ok(())
}

/// Contexts `w_t` of every step from one sequential pass of the stateful
/// encoder, `[T, L]`.
fn stateful_contexts(model: &FlowModel, ds: &TimeSeriesDataset) -> Result<Tensor> {
    let encoder = model.encoder();
    let mut handle = encoder.new_handle();
    let mut peek = handle.clone();
    let mut data = encoder.encode_stateful(model.params(), ds.row(0), &mut peek, 2)?;
    for t in 1..ds.len() {
        // 1-based target index is t + 1.
        data.extend(encoder.encode_stateful(model.params(), ds.row(t - 1), &mut handle, t + 1)?);
    }
    Ok(Tensor::matrix(ds.len(), model.context_dim(), data)?)
}

fn rows(t: &Tensor, from: usize, to: usize) -> Result<Tensor> {
    let cols = t.shape()[1];
    Ok(Tensor::matrix(to - from, cols, t.data()[from * cols..to * cols].to_vec())?)
}

/// Latents and log-determinants of every step, computed chunk-wise in
/// parallel (sequentially for the stateful encoder's context pass).
fn latents(model: &FlowModel, ds: &TimeSeriesDataset) -> Result<(Vec<f64>, Vec<f64>)> {
    check_dim(model, ds)?;
    let starts: Vec<usize> = (0..ds.len()).step_by(EVAL_CHUNK).collect();
    let stateful = if model.encoder().kind().is_stateful() {
        Some(stateful_contexts(model, ds)?)
    } else {
        None
    };
    let parts: Vec<(Tensor, Vec<f64>)> = starts
        .par_iter()
        .map(|&from| {
            let to = (from + EVAL_CHUNK).min(ds.len());
            match &stateful {
                Some(w) => {
                    let x = Tensor::matrix(to - from, ds.dim, ds.values[from * ds.dim..to * ds.dim].to_vec())?;
                    model.latent_batch(&x, Some(&rows(w, from, to)?))
                }
                None => {
                    let targets: Vec<usize> = (from..to).collect();
                    let batch = WindowBatch::gather(&ds.values, ds.dim, model.lookback(), &targets);
                    model.latent_windows(&batch)
                }
            }
        })
        .collect::<Result<_>>()?;
    let mut latent = Vec::with_capacity(ds.values.len());
    let mut log_det = Vec::with_capacity(ds.len());
    for (u, ld) in parts {
        latent.extend_from_slice(u.data());
        log_det.extend(ld);
    }
    Ok((latent, log_det))
}

fn model_id(model: &FlowModel) -> String {
    format!("{}-seed{}", model.encoder().kind().method_name(), model.seed())
}

/// `-log p(x_t | w_t)` for every row of a normalized test series.
pub fn score_series(model: &FlowModel, ds: &TimeSeriesDataset) -> Result<ScoreSeries> {
    let dump = compute_latent(model, ds)?;
    Ok(ScoreSeries {
        scores: dump.scores,
        labels: ds.labels.clone(),
        model_id: model_id(model),
        dataset_id: ds.provenance.clone(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ThresholdPolicy {
    /// The `q`-quantile of the scores (linear interpolation).
    Quantile(f64),
    /// The score value maximizing F1; needs labels.
    BestF1,
}

pub fn select_threshold(scores: &[f64], labels: Option<&[bool]>, policy: ThresholdPolicy) -> Result<f64> {
    if scores.is_empty() {
        return Err(Error::Metric("no scores".into()));
    }
    match policy {
        ThresholdPolicy::Quantile(q) => {
            if !(0.0..=1.0).contains(&q) {
                return Err(Error::Config(format!("quantile {q} outside [0, 1]")));
            }
            let mut sorted = scores.to_vec();
            sorted.sort_by(f64::total_cmp);
            let pos = q * (sorted.len() - 1) as f64;
            let lo = pos.floor() as usize;
            let hi = pos.ceil() as usize;
            Ok(sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64))
        }
        ThresholdPolicy::BestF1 => {
            let labels =
                labels.ok_or_else(|| Error::Metric("best-f1 threshold needs labels".into()))?;
            Ok(best_f1_threshold(scores, labels)?.0)
        }
    }
}

/// Latent representation `u_t = G(x_t | w_t)` of every step.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentDump {
    pub dim: usize,
    /// `T x D`, row-major.
    pub latent: Vec<f64>,
    /// Summed log-determinant of the normalizing direction per step.
    pub log_det: Vec<f64>,
    pub scores: Vec<f64>,
    pub labels: Option<Vec<bool>>,
}

impl LatentDump {
    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    /// CSV with columns `t,u_0..u_{D-1},logdet,score,label`; `label` is empty
    /// for unlabeled series.
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        let mut header = String::from("t");
        for i in 0..self.dim {
            let _ = write!(header, ",u_{i}");
        }
        writeln!(out, "{header},logdet,score,label")?;
        for t in 0..self.len() {
            let mut line = t.to_string();
            for v in &self.latent[t * self.dim..(t + 1) * self.dim] {
                let _ = write!(line, ",{v}");
            }
            let label = match &self.labels {
                Some(l) => u8::from(l[t]).to_string(),
                None => String::new(),
            };
            writeln!(out, "{line},{},{},{label}", self.log_det[t], self.scores[t])?;
        }
        out.flush()?;
        Ok(())
    }
}

pub fn compute_latent(model: &FlowModel, ds: &TimeSeriesDataset) -> Result<LatentDump> {
    let (latent, log_det) = latents(model, ds)?;
    let scores = latent
        .chunks(ds.dim)
        .zip(&log_det)
        .map(|(u, ld)| -(gaussian_log_density(u) + ld))
        .collect();
    Ok(LatentDump {
        dim: ds.dim,
        latent,
        log_det,
        scores,
        labels: ds.labels.clone(),
    })
}

pub fn export_latent(model: &FlowModel, ds: &TimeSeriesDataset, path: &std::path::Path) -> Result<LatentDump> {
    let dump = compute_latent(model, ds)?;
    dump.write_csv(std::io::BufWriter::new(std::fs::File::create(path)?))?;
    Ok(dump)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::conditioners::{EncoderConfig, EncoderKind};
    use crate::flow::{ConditionerConfig, ModelConfig, LOG_2PI};

    fn model(kind: EncoderKind) -> FlowModel {
        let mut encoder = EncoderConfig::with_kind(kind, 3);
        encoder.lstm_layers = 1;
        let cfg = ModelConfig {
            dim: 2,
            coupling_layers: 3,
            conditioner: ConditionerConfig::default(),
            encoder,
        };
        FlowModel::new(&cfg, 1).unwrap()
    }

    fn series(len: usize) -> TimeSeriesDataset {
        let values = (0..2 * len).map(|i| ((i * 37) % 11) as f64 / 11.0 - 0.5).collect();
        TimeSeriesDataset::new(values, 2, Some((0..len).map(|t| t % 7 == 0).collect())).unwrap()
    }

    #[test]
    fn identity_model_at_origin() {
        let ds = TimeSeriesDataset::new(vec![0.0; 40], 2, None).unwrap();
        let s = score_series(&model(EncoderKind::Passthrough), &ds).unwrap();
        assert_eq!(s.scores.len(), 20);
        assert!(s.scores.iter().all(|v| (v - LOG_2PI).abs() < 1e-12));
    }

    #[test]
    fn scoring_is_pointwise_for_stateless_encoders() {
        let mut m = model(EncoderKind::Cnn);
        m.perturb_parameters(0.2, 4);
        let ds = series(30);
        let a = score_series(&m, &ds).unwrap();
        let b = score_series(&m, &ds).unwrap();
        assert_eq!(a, b);
        assert!(a.scores.iter().all(|s| s.is_finite()));
    }

    #[test]
    fn stateful_scores_match_the_recurrence() {
        let mut m = model(EncoderKind::LstmStateful);
        m.perturb_parameters(0.3, 2);
        let ds = series(12);
        let s = score_series(&m, &ds).unwrap();
        let enc = m.encoder();
        let mut h = enc.new_handle();
        for t in 1..ds.len() {
            let w = enc.encode_stateful(m.params(), ds.row(t - 1), &mut h, t + 1).unwrap();
            let lp = m.log_prob(ds.row(t), &w).unwrap();
            assert!((s.scores[t] + lp).abs() < 1e-9);
        }
    }

    #[test]
    fn dimension_mismatch_is_an_error() {
        let ds = TimeSeriesDataset::new(vec![0.0; 40], 4, None).unwrap();
        assert!(score_series(&model(EncoderKind::Passthrough), &ds).is_err());
    }

    #[test]
    fn latent_dump_matches_scores() {
        let mut m = model(EncoderKind::Mlp);
        m.perturb_parameters(0.2, 7);
        let ds = series(40);
        let dump = compute_latent(&m, &ds).unwrap();
        assert_eq!(dump.len(), 40);
        let identity = compute_latent(&model(EncoderKind::Mlp), &ds).unwrap();
        assert_eq!(identity.latent, ds.values);
        let mut buf = Vec::new();
        dump.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("t,u_0,u_1,logdet,score,label\n"));
        assert_eq!(text.lines().count(), 41);
    }

    #[test]
    fn thresholds() {
        let s = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(select_threshold(&s, None, ThresholdPolicy::Quantile(1.0)).unwrap(), 4.0);
        assert_eq!(select_threshold(&s, None, ThresholdPolicy::Quantile(0.5)).unwrap(), 2.5);
        let labels = [false, false, true, true];
        let t = select_threshold(&s, Some(&labels), ThresholdPolicy::BestF1).unwrap();
        assert!(t > 2.0 && t <= 3.0);
        assert!(select_threshold(&s, None, ThresholdPolicy::BestF1).is_err());
    }

    #[test]
    fn svg_shades_labeled_ranges() {
        let s = ScoreSeries {
            scores: vec![1.0, 3.0, 2.0],
            labels: Some(vec![false, true, false]),
            model_id: "m".into(),
            dataset_id: "d".into(),
        };
        let svg = s.to_svg();
        assert!(svg.starts_with("<svg") && svg.contains("<polyline") && svg.contains("#f4b6b6"));
    }
}
