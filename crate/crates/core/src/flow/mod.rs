//! Affine coupling layers and the conditional normalizing flow built from
//! them.
//!
//! Direction conventions: the *generative* direction `F` maps base samples
//! `u` to data `x`; the *normalizing* direction `G = F^-1` maps data to the
//! latent space and is what training and scoring use. A coupling layer in the
//! generative direction keeps the first half and transforms the second:
//!
//! ```text
//! x[..d] = u[..d]
//! x[d..] = u[d..] * exp(s) + t,   (s, t) = conditioner(u[..d], w)
//! ```
//!
//! with `s = cap * tanh(raw_s)` so the log-scale is bounded by a learnable
//! per-feature cap. The two halves are exchanged between consecutive layers.

mod io;
mod model;

pub use io::{load_model, read_model, save_model, write_model, FORMAT_VERSION};
pub use model::{FlowModel, ModelConfig, NormalizeNodes};

use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::diffcore::{Graph, NodeId, ParamId, ParamStore, Tensor};
use crate::nn::{funnel_widths, Mlp};
use crate::{Error, Result};

/// `ln(2π)`.
pub const LOG_2PI: f64 = 1.837_877_066_409_345_5;

/// Log density of the standard normal `N(0, I)` in `u.len()` dimensions.
pub fn gaussian_log_density(u: &[f64]) -> f64 {
    let sq: f64 = u.iter().map(|v| v * v).sum();
    -0.5 * u.len() as f64 * LOG_2PI - 0.5 * sq
}

/// Generative affine map of the transformed half; returns `(x2, sum(s))`.
pub fn affine_forward(u2: &[f64], s: &[f64], t: &[f64]) -> (Vec<f64>, f64) {
    let x2 = u2
        .iter()
        .zip(s)
        .zip(t)
        .map(|((u, s), t)| u * s.exp() + t)
        .collect();
    (x2, s.iter().sum())
}

/// Exact inverse of [`affine_forward`]; returns `(u2, -sum(s))`.
pub fn affine_inverse(x2: &[f64], s: &[f64], t: &[f64]) -> (Vec<f64>, f64) {
    let u2 = x2
        .iter()
        .zip(s)
        .zip(t)
        .map(|((x, s), t)| (x - t) * (-s).exp())
        .collect();
    (u2, -s.iter().sum::<f64>())
}

/// Hyperparameters of the conditioner network inside every coupling layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ConditionerConfig {
    /// First hidden width is `multiplier * D`.
    pub multiplier: usize,
    /// Number of hidden layers.
    pub layers: usize,
    pub dropout: f64,
    /// Each hidden width is the previous one divided by this factor.
    pub funnel_factor: f64,
}

impl Default for ConditionerConfig {
    fn default() -> Self {
        Self {
            multiplier: 8,
            layers: 3,
            dropout: 0.1,
            funnel_factor: 1.0,
        }
    }
}

impl ConditionerConfig {
    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::Config(m));
        if !(1..=50).contains(&self.multiplier) {
            return err(format!("conditioner multiplier {} outside [1, 50]", self.multiplier));
        }
        if !(3..=8).contains(&self.layers) {
            return err(format!("conditioner layers {} outside [3, 8]", self.layers));
        }
        if !(0.1..=0.9).contains(&self.dropout) {
            return err(format!("conditioner dropout {} outside [0.1, 0.9]", self.dropout));
        }
        if !(1.0..=10.0).contains(&self.funnel_factor) {
            return err(format!(
                "conditioner funnel factor {} outside [1, 10]",
                self.funnel_factor
            ));
        }
        Ok(())
    }

    /// Hidden widths for `dim` channels.
    pub fn hidden_widths(&self, dim: usize) -> Vec<usize> {
        funnel_widths(self.multiplier * dim, self.layers, self.funnel_factor)
    }
}

/// One temporal-conditioned affine coupling layer.
#[derive(Debug, Clone, PartialEq)]
pub struct CouplingLayer {
    pub index: usize,
    pub dim: usize,
    /// Split point `d = D / 2`.
    pub split: usize,
    pub context_dim: usize,
    pub net: Mlp,
    pub scale_cap: ParamId,
}

impl CouplingLayer {
    /// The conditioner's output layer starts at zero, so a fresh layer is the
    /// identity map.
    pub fn new(
        index: usize,
        dim: usize,
        context_dim: usize,
        config: &ConditionerConfig,
        store: &mut ParamStore,
        rng: &mut dyn RngCore,
    ) -> Result<Self> {
        if dim < 2 || !dim.is_multiple_of(2) {
            return Err(Error::Dimension(format!(
                "coupling layers need an even channel count, got {dim}"
            )));
        }
        let split = dim / 2;
        let half = dim - split;
        let mut widths = vec![split + context_dim];
        widths.extend(config.hidden_widths(dim));
        widths.push(2 * half);
        let prefix = format!("coupling{index}");
        let net = Mlp::new(store, &prefix, &widths, true, config.dropout, rng);
        let scale_cap = store.add(format!("{prefix}.scale_cap"), Tensor::filled(&[half], 1.0));
        Ok(Self {
            index,
            dim,
            split,
            context_dim,
            net,
            scale_cap,
        })
    }

    /// Bounded log-scale `s` and shift `t`, each `[B, D - d]`.
    pub fn scale_shift(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        kept: NodeId,
        context: Option<NodeId>,
        rng: &mut dyn RngCore,
    ) -> (NodeId, NodeId) {
        let input = match context {
            Some(w) => g.concat_cols(&[kept, w]),
            None => kept,
        };
        let out = self.net.apply(g, store, input, rng);
        let half = self.dim - self.split;
        let raw_s = g.slice_cols(out, 0, half);
        let t = g.slice_cols(out, half, 2 * half);
        let squashed = g.tanh(raw_s);
        let cap = g.param(store, self.scale_cap);
        let s = g.mul(squashed, cap);
        (s, t)
    }

    /// Generative direction on `[B, D]` rows; returns `(x, sum(s))` with the
    /// log-det as `[B, 1]`.
    pub fn forward_nodes(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        u: NodeId,
        context: Option<NodeId>,
        rng: &mut dyn RngCore,
    ) -> (NodeId, NodeId) {
        let kept = g.slice_cols(u, 0, self.split);
        let moved = g.slice_cols(u, self.split, self.dim);
        let (s, t) = self.scale_shift(g, store, kept, context, rng);
        let scale = g.exp(s);
        let scaled = g.mul(moved, scale);
        let shifted = g.add(scaled, t);
        let x = g.concat_cols(&[kept, shifted]);
        (x, g.sum_cols(s))
    }

    /// Normalizing direction on `[B, D]` rows; returns `(u, -sum(s))`.
    pub fn inverse_nodes(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x: NodeId,
        context: Option<NodeId>,
        rng: &mut dyn RngCore,
    ) -> (NodeId, NodeId) {
        let kept = g.slice_cols(x, 0, self.split);
        let moved = g.slice_cols(x, self.split, self.dim);
        let (s, t) = self.scale_shift(g, store, kept, context, rng);
        let centered = g.sub(moved, t);
        let neg_s = g.neg(s);
        let inv_scale = g.exp(neg_s);
        let u2 = g.mul(centered, inv_scale);
        let u = g.concat_cols(&[kept, u2]);
        let sum_s = g.sum_cols(s);
        (u, g.neg(sum_s))
    }

    fn check_dims(&self, v: &[f64], w: &[f64]) -> Result<()> {
        if v.len() != self.dim || w.len() != self.context_dim {
            return Err(Error::Dimension(format!(
                "coupling layer {} expects input {} and context {}, got {} and {}",
                self.index,
                self.dim,
                self.context_dim,
                v.len(),
                w.len()
            )));
        }
        Ok(())
    }

    fn run_single(
        &self,
        store: &ParamStore,
        v: &[f64],
        w: &[f64],
        inverse: bool,
    ) -> Result<(Vec<f64>, f64)> {
        self.check_dims(v, w)?;
        let mut g = Graph::new();
        let mut rng = crate::nn::inference_rng();
        let input = g.constant(Tensor::matrix(1, self.dim, v.to_vec())?);
        let context = (self.context_dim > 0)
            .then(|| Tensor::matrix(1, self.context_dim, w.to_vec()))
            .transpose()?
            .map(|t| g.constant(t));
        let (out, logdet) = if inverse {
            self.inverse_nodes(&mut g, store, input, context, &mut rng)
        } else {
            self.forward_nodes(&mut g, store, input, context, &mut rng)
        };
        let out = g.forward(out)?.data().to_vec();
        let logdet = g.forward(logdet)?.data()[0];
        Ok((out, logdet))
    }

    /// Generative map of a single point: `(x, sum(s))`.
    pub fn forward(&self, store: &ParamStore, u: &[f64], w: &[f64]) -> Result<(Vec<f64>, f64)> {
        self.run_single(store, u, w, false)
    }

    /// Normalizing map of a single point: `(u, -sum(s))`.
    pub fn inverse(&self, store: &ParamStore, x: &[f64], w: &[f64]) -> Result<(Vec<f64>, f64)> {
        self.run_single(store, x, w, true)
    }
}

/// Exchanges the two halves of `[B, D]` rows; its own inverse when `D` is even.
pub fn swap_halves(g: &mut Graph, z: NodeId, split: usize, dim: usize) -> NodeId {
    let a = g.slice_cols(z, 0, split);
    let b = g.slice_cols(z, split, dim);
    g.concat_cols(&[b, a])
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn layer(dim: usize, context_dim: usize) -> (CouplingLayer, ParamStore) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let cfg = ConditionerConfig {
            multiplier: 2,
            ..ConditionerConfig::default()
        };
        let l = CouplingLayer::new(0, dim, context_dim, &cfg, &mut store, &mut rng).unwrap();
        (l, store)
    }

    /// Makes the conditioner output constant: zero weights everywhere and the
    /// output bias chosen so that `s` and `t` take the given values.
    fn force_output(l: &CouplingLayer, store: &mut ParamStore, s: &[f64], t: &[f64]) {
        let head = l.net.layers.last().unwrap();
        store.get_mut(head.weight).value.data_mut().fill(0.0);
        let bias = store.get_mut(head.bias).value.data_mut();
        for (i, v) in s.iter().enumerate() {
            bias[i] = v.atanh();
        }
        bias[s.len()..].copy_from_slice(t);
    }

    #[test]
    fn base_density_closed_forms() {
        assert!((gaussian_log_density(&[0.0, 0.0]) + 1.837877).abs() < 1e-6);
        assert!((gaussian_log_density(&[0.0]) + 0.918939).abs() < 1e-6);
        let v = gaussian_log_density(&[1.0, -1.0]);
        assert!((v - (-LOG_2PI - 1.0)).abs() < 1e-15);
    }

    #[test]
    fn zero_scale_and_shift_is_identity() {
        let (l, store) = layer(4, 3);
        let u = [0.3, -1.0, 2.0, 0.5];
        let (x, logdet) = l.forward(&store, &u, &[1.0, 2.0, 3.0]).unwrap();
        assert_eq!(x, u.to_vec());
        assert_eq!(logdet, 0.0);
        let (back, inv_logdet) = l.inverse(&store, &x, &[1.0, 2.0, 3.0]).unwrap();
        assert_eq!(back, u.to_vec());
        assert_eq!(inv_logdet, 0.0);
    }

    #[test]
    fn hand_evaluated_forward_and_inverse() {
        let ln2 = std::f64::consts::LN_2;
        let (x2, logdet) = affine_forward(&[1.0], &[ln2], &[1.0]);
        assert!((x2[0] - 3.0).abs() < 1e-15);
        assert_eq!(logdet, ln2);
        let (u2, inv) = affine_inverse(&[3.0], &[ln2], &[1.0]);
        assert!((u2[0] - 1.0).abs() < 1e-15);
        assert_eq!(inv, -ln2);

        let (l, mut store) = layer(2, 0);
        force_output(&l, &mut store, &[ln2], &[1.0]);
        let (x, logdet) = l.forward(&store, &[0.0, 1.0], &[]).unwrap();
        assert_eq!(x[0], 0.0);
        assert!((x[1] - 3.0).abs() < 1e-12);
        assert!((logdet - ln2).abs() < 1e-12);
        let (u, inv) = l.inverse(&store, &[0.0, 3.0], &[]).unwrap();
        assert!((u[1] - 1.0).abs() < 1e-12);
        assert!((inv + ln2).abs() < 1e-12);
    }

    #[test]
    fn symmetric_scales_cancel_in_logdet() {
        let (_, logdet) = affine_forward(&[1.0, 2.0], &[0.5, -0.5], &[0.0, 0.0]);
        assert_eq!(logdet, 0.0);
    }

    #[test]
    fn scale_is_bounded_by_cap() {
        let (l, mut store) = layer(2, 0);
        let head = l.net.layers.last().unwrap();
        store.get_mut(head.bias).value.data_mut()[0] = 1e6;
        store.get_mut(l.scale_cap).value.data_mut()[0] = 0.7;
        let (x, logdet) = l.forward(&store, &[0.0, 1.0], &[]).unwrap();
        assert!((logdet - 0.7).abs() < 1e-12);
        assert!(x[1].is_finite());
    }

    #[test]
    fn dimension_mismatch_is_an_error() {
        let (l, store) = layer(4, 2);
        assert!(l.forward(&store, &[0.0; 3], &[0.0; 2]).is_err());
        assert!(l.inverse(&store, &[0.0; 4], &[0.0; 1]).is_err());
        let mut s = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let cfg = ConditionerConfig::default();
        assert!(CouplingLayer::new(0, 3, 0, &cfg, &mut s, &mut rng).is_err());
    }

    #[test]
    fn conditioner_config_enforces_search_bounds() {
        assert!(ConditionerConfig::default().validate().is_ok());
        let bad = [
            ConditionerConfig { multiplier: 0, ..Default::default() },
            ConditionerConfig { multiplier: 51, ..Default::default() },
            ConditionerConfig { layers: 2, ..Default::default() },
            ConditionerConfig { layers: 9, ..Default::default() },
            ConditionerConfig { dropout: 0.05, ..Default::default() },
            ConditionerConfig { funnel_factor: 10.5, ..Default::default() },
        ];
        for cfg in bad {
            assert!(cfg.validate().is_err(), "{cfg:?}");
        }
    }
}
