use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{swap_halves, ConditionerConfig, CouplingLayer, LOG_2PI};
use crate::conditioners::{Encoder, EncoderConfig, WindowBatch};
use crate::data::NormStats;
use crate::diffcore::{Graph, NodeId, ParamStore, Tensor};
use crate::nn::inference_rng;
use crate::{Error, Result};

/// Architecture of a [`FlowModel`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Channel count `D` (even).
    pub dim: usize,
    /// Number of coupling layers `N`.
    pub coupling_layers: usize,
    #[serde(default)]
    pub conditioner: ConditionerConfig,
    #[serde(default)]
    pub encoder: EncoderConfig,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim < 2 || !self.dim.is_multiple_of(2) {
            return Err(Error::Dimension(format!(
                "flow needs an even channel count, got {}",
                self.dim
            )));
        }
        if self.coupling_layers == 0 {
            return Err(Error::Config("at least one coupling layer is required".into()));
        }
        self.conditioner.validate()?;
        self.encoder.validate()
    }
}

/// Graph nodes produced by one pass in the normalizing direction.
#[derive(Debug, Clone)]
pub struct NormalizeNodes {
    /// `u = G(x | w)`, `[B, D]`.
    pub latent: NodeId,
    /// Sum of the per-layer log-determinants of `G`, `[B, 1]`.
    pub log_det: NodeId,
    /// Output of each coupling layer, in application order.
    pub layer_outputs: Vec<NodeId>,
    /// `log p(x | w)`, `[B, 1]`.
    pub log_prob: NodeId,
}

/// Stack of temporal-conditioned coupling layers plus the shared context
/// encoder. Owns every learnable parameter and, once fitted, the
/// normalization statistics of its training data.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowModel {
    config: ModelConfig,
    seed: u64,
    params: ParamStore,
    layers: Vec<CouplingLayer>,
    encoder: Encoder,
    norm: Option<NormStats>,
}

impl FlowModel {
    /// Fresh model; every coupling layer starts as the identity.
    pub fn new(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let encoder = Encoder::new(&config.encoder, config.dim, &mut params, &mut rng)?;
        let context_dim = encoder.context_dim();
        let layers = (0..config.coupling_layers)
            .map(|i| {
                CouplingLayer::new(
                    i,
                    config.dim,
                    context_dim,
                    &config.conditioner,
                    &mut params,
                    &mut rng,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            config: config.clone(),
            seed,
            params,
            layers,
            encoder,
            norm: None,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn layers(&self) -> &[CouplingLayer] {
        &self.layers
    }

    pub fn encoder(&self) -> &Encoder {
        &self.encoder
    }

    pub fn dim(&self) -> usize {
        self.config.dim
    }

    pub fn context_dim(&self) -> usize {
        self.encoder.context_dim()
    }

    /// History rows needed per target (0 for the unconditioned baseline).
    pub fn lookback(&self) -> usize {
        self.encoder.lookback()
    }

    pub fn norm_stats(&self) -> Option<&NormStats> {
        self.norm.as_ref()
    }

    pub fn set_norm_stats(&mut self, stats: Option<NormStats>) {
        self.norm = stats;
    }

    /// Adds uniform noise in `±scale` to every parameter. Used to move away
    /// from the identity initialization in tests and diagnostics.
    pub fn perturb_parameters(&mut self, scale: f64, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ids: Vec<_> = self.params.ids().collect();
        for id in ids {
            for v in self.params.get_mut(id).value.data_mut() {
                *v += rng.random_range(-scale..scale);
            }
        }
    }

    /// Normalizing pass `x -> u` with the half swap between layers.
    pub fn normalize_nodes(
        &self,
        g: &mut Graph,
        x: NodeId,
        context: Option<NodeId>,
        rng: &mut dyn RngCore,
    ) -> NormalizeNodes {
        let (dim, split) = (self.config.dim, self.config.dim / 2);
        let mut z = x;
        let mut log_det: Option<NodeId> = None;
        let mut layer_outputs = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate() {
            if i > 0 {
                z = swap_halves(g, z, split, dim);
            }
            let (u, ld) = layer.inverse_nodes(g, &self.params, z, context, rng);
            z = u;
            layer_outputs.push(u);
            log_det = Some(match log_det {
                Some(acc) => g.add(acc, ld),
                None => ld,
            });
        }
        let log_det = log_det.expect("at least one layer");
        let sq = g.square(z);
        let sq_sum = g.sum_cols(sq);
        let half_sq = g.scale(sq_sum, -0.5);
        let base = g.add_scalar(half_sq, -0.5 * dim as f64 * LOG_2PI);
        let log_prob = g.add(base, log_det);
        NormalizeNodes {
            latent: z,
            log_det,
            layer_outputs,
            log_prob,
        }
    }

    /// Generative pass `u -> x`; returns `x` and the summed `log|det J_F|`.
    pub fn generate_nodes(
        &self,
        g: &mut Graph,
        u: NodeId,
        context: Option<NodeId>,
        rng: &mut dyn RngCore,
    ) -> (NodeId, NodeId) {
        let (dim, split) = (self.config.dim, self.config.dim / 2);
        let mut z = u;
        let mut log_det: Option<NodeId> = None;
        for (i, layer) in self.layers.iter().enumerate().rev() {
            let (x, ld) = layer.forward_nodes(g, &self.params, z, context, rng);
            z = x;
            if i > 0 {
                z = swap_halves(g, z, split, dim);
            }
            log_det = Some(match log_det {
                Some(acc) => g.add(acc, ld),
                None => ld,
            });
        }
        (z, log_det.expect("at least one layer"))
    }

    /// Evaluates `nodes` and reports the first coupling layer whose output is
    /// not finite.
    pub fn check_finite(&self, g: &mut Graph, nodes: &NormalizeNodes) -> Result<()> {
        for (i, &out) in nodes.layer_outputs.iter().enumerate() {
            if !g.forward(out)?.is_finite() {
                return Err(Error::NonFinite { layer: i });
            }
        }
        if !g.forward(nodes.log_prob)?.is_finite() {
            return Err(Error::NonFinite {
                layer: self.layers.len() - 1,
            });
        }
        Ok(())
    }

    /// Mean negative log-likelihood node over a batch of windows.
    pub fn batch_loss(
        &self,
        g: &mut Graph,
        batch: &WindowBatch,
        rng: &mut dyn RngCore,
    ) -> Result<(NodeId, NormalizeNodes)> {
        if batch.is_empty() {
            return Err(Error::EmptyBatch);
        }
        let context = self.encoder.encode_batch(g, &self.params, batch, rng)?;
        let x = g.constant(batch.targets_tensor());
        let nodes = self.normalize_nodes(g, x, context, rng);
        let mean = g.mean(nodes.log_prob);
        Ok((g.neg(mean), nodes))
    }

    fn check_rows(&self, x: &Tensor, w: Option<&Tensor>) -> Result<()> {
        let rows = x.shape().first().copied().unwrap_or(0);
        if x.rank() != 2 || x.shape()[1] != self.dim() {
            return Err(Error::Dimension(format!(
                "inputs have shape {:?}, expected [B, {}]",
                x.shape(),
                self.dim()
            )));
        }
        match (w, self.context_dim()) {
            (None, 0) => Ok(()),
            (Some(w), l) if w.rank() == 2 && w.shape() == [rows, l] => Ok(()),
            (w, l) => Err(Error::Dimension(format!(
                "context has shape {:?}, expected [{rows}, {l}]",
                w.map(|t| t.shape().to_vec())
            ))),
        }
    }

    fn context_node(&self, g: &mut Graph, w: Option<&Tensor>) -> Option<NodeId> {
        w.filter(|_| self.context_dim() > 0).map(|t| g.constant(t.clone()))
    }

    /// `log p(x_b | w_b)` for each row of `x` given precomputed contexts.
    pub fn log_prob_batch(&self, x: &Tensor, w: Option<&Tensor>) -> Result<Vec<f64>> {
        self.check_rows(x, w)?;
        let mut g = Graph::new();
        let mut rng = inference_rng();
        let xn = g.constant(x.clone());
        let context = self.context_node(&mut g, w);
        let nodes = self.normalize_nodes(&mut g, xn, context, &mut rng);
        self.check_finite(&mut g, &nodes)?;
        Ok(g.forward(nodes.log_prob)?.data().to_vec())
    }

    /// `log p(x | w)` for a single point.
    pub fn log_prob(&self, x: &[f64], w: &[f64]) -> Result<f64> {
        let xt = Tensor::matrix(1, x.len(), x.to_vec())?;
        let wt = (!w.is_empty())
            .then(|| Tensor::matrix(1, w.len(), w.to_vec()))
            .transpose()?;
        Ok(self.log_prob_batch(&xt, wt.as_ref())?[0])
    }

    /// Mean negative log-likelihood of a batch with precomputed contexts.
    pub fn nll_loss(&self, x: &Tensor, w: Option<&Tensor>) -> Result<f64> {
        if x.is_empty() {
            return Err(Error::EmptyBatch);
        }
        let lp = self.log_prob_batch(x, w)?;
        Ok(-lp.iter().sum::<f64>() / lp.len() as f64)
    }

    /// Latent rows `u = G(x | w)` and per-row log-determinants of `G`.
    pub fn latent_batch(&self, x: &Tensor, w: Option<&Tensor>) -> Result<(Tensor, Vec<f64>)> {
        self.check_rows(x, w)?;
        let mut g = Graph::new();
        let mut rng = inference_rng();
        let xn = g.constant(x.clone());
        let context = self.context_node(&mut g, w);
        let nodes = self.normalize_nodes(&mut g, xn, context, &mut rng);
        self.check_finite(&mut g, &nodes)?;
        let latent = g.forward(nodes.latent)?.clone();
        let log_det = g.forward(nodes.log_det)?.data().to_vec();
        Ok((latent, log_det))
    }

    /// Generative map `x = F(u | w)` of each row.
    pub fn generate_batch(&self, u: &Tensor, w: Option<&Tensor>) -> Result<Tensor> {
        self.check_rows(u, w)?;
        let mut g = Graph::new();
        let mut rng = inference_rng();
        let un = g.constant(u.clone());
        let context = self.context_node(&mut g, w);
        let (x, _) = self.generate_nodes(&mut g, un, context, &mut rng);
        Ok(g.forward(x)?.clone())
    }

    /// Draws `u ~ N(0, I)` and returns `F(u | w)`.
    pub fn sample<R: Rng + ?Sized>(&self, w: &[f64], rng: &mut R) -> Result<Vec<f64>> {
        let u: Vec<f64> = (0..self.dim()).map(|_| rng.sample(StandardNormal)).collect();
        let ut = Tensor::matrix(1, u.len(), u)?;
        let wt = (!w.is_empty())
            .then(|| Tensor::matrix(1, w.len(), w.to_vec()))
            .transpose()?;
        Ok(self.generate_batch(&ut, wt.as_ref())?.into_data())
    }

    /// Log densities of a batch of windows, encoding the contexts on the way.
    pub fn log_prob_windows(&self, batch: &WindowBatch) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let mut rng = inference_rng();
        let context = self.encoder.encode_batch(&mut g, &self.params, batch, &mut rng)?;
        let x = g.constant(batch.targets_tensor());
        let nodes = self.normalize_nodes(&mut g, x, context, &mut rng);
        self.check_finite(&mut g, &nodes)?;
        Ok(g.forward(nodes.log_prob)?.data().to_vec())
    }

    /// Latents and log-determinants of a batch of windows.
    pub fn latent_windows(&self, batch: &WindowBatch) -> Result<(Tensor, Vec<f64>)> {
        let mut g = Graph::new();
        let mut rng = inference_rng();
        let context = self.encoder.encode_batch(&mut g, &self.params, batch, &mut rng)?;
        let w = match context {
            Some(node) => Some(g.forward(node)?.clone()),
            None => None,
        };
        self.latent_batch(&batch.targets_tensor(), w.as_ref())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::conditioners::EncoderKind;
    use crate::flow::gaussian_log_density;

    fn config(dim: usize, layers: usize, kind: EncoderKind, k: usize) -> ModelConfig {
        ModelConfig {
            dim,
            coupling_layers: layers,
            conditioner: ConditionerConfig {
                multiplier: 3,
                ..ConditionerConfig::default()
            },
            encoder: EncoderConfig::with_kind(kind, k),
        }
    }

    #[test]
    fn identity_model_equals_base_density() {
        let model = FlowModel::new(&config(4, 3, EncoderKind::Passthrough, 2), 0).unwrap();
        let x = [0.5, -1.0, 0.25, 2.0];
        let w = [0.1; 8];
        let lp = model.log_prob(&x, &w).unwrap();
        assert!((lp - gaussian_log_density(&x)).abs() < 1e-14);
    }

    #[test]
    fn two_doubling_layers_subtract_d_ln2() {
        // With every layer scaling its transformed half by 2, F doubles all
        // coordinates and log p_X(F(u)) = log p_U(u) - D ln 2.
        let mut model = FlowModel::new(&config(2, 2, EncoderKind::None, 1), 0).unwrap();
        let ln2 = std::f64::consts::LN_2;
        for layer in model.layers.clone() {
            let head = layer.net.layers.last().unwrap();
            model.params.get_mut(head.bias).value.data_mut()[0] = ln2.atanh();
        }
        let u = [0.3, -0.8];
        let ut = Tensor::matrix(1, 2, u.to_vec()).unwrap();
        let x = model.generate_batch(&ut, None).unwrap();
        // Layer 1 doubles the second half, the swap exchanges halves, layer 0
        // doubles the (new) second half.
        assert!((x.data()[0] + 1.6).abs() < 1e-12 && (x.data()[1] - 0.6).abs() < 1e-12);
        let lp = model.log_prob(x.data(), &[]).unwrap();
        let expected = gaussian_log_density(&u) - 2.0 * ln2;
        assert!((lp - expected).abs() < 1e-12, "{lp} vs {expected}");
    }

    #[test]
    fn round_trip_with_random_parameters() {
        for dim in [2, 4, 8] {
            let mut model = FlowModel::new(&config(dim, 4, EncoderKind::Passthrough, 3), 7).unwrap();
            model.perturb_parameters(0.5, 3);
            let mut rng = ChaCha8Rng::seed_from_u64(dim as u64);
            let u = Tensor::from_fn(5, dim, |_, _| rng.random_range(-2.0..2.0));
            let w = Tensor::from_fn(5, model.context_dim(), |_, _| rng.random_range(-1.0..1.0));
            let x = model.generate_batch(&u, Some(&w)).unwrap();
            let (back, _) = model.latent_batch(&x, Some(&w)).unwrap();
            let err = back
                .data()
                .iter()
                .zip(u.data())
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            assert!(err <= 1e-6, "dim {dim}: {err}");
        }
    }

    #[test]
    fn forward_and_inverse_log_dets_cancel() {
        let mut model = FlowModel::new(&config(4, 3, EncoderKind::None, 1), 2).unwrap();
        model.perturb_parameters(0.4, 9);
        let mut g = Graph::new();
        let mut rng = inference_rng();
        let u = g.constant(Tensor::matrix(1, 4, vec![0.1, -0.2, 0.7, 1.1]).unwrap());
        let (x, fwd) = model.generate_nodes(&mut g, u, None, &mut rng);
        let nodes = model.normalize_nodes(&mut g, x, None, &mut rng);
        let a = g.forward(fwd).unwrap().data()[0];
        let b = g.forward(nodes.log_det).unwrap().data()[0];
        assert!(a.abs() > 1e-3);
        assert!((a + b).abs() < 1e-12);
    }

    #[test]
    fn loss_helpers_match_closed_forms() {
        let model = FlowModel::new(&config(2, 3, EncoderKind::None, 1), 0).unwrap();
        let zero = Tensor::zeros(&[1, 2]);
        assert!((model.nll_loss(&zero, None).unwrap() - LOG_2PI).abs() < 1e-12);
        let unit = Tensor::matrix(1, 2, vec![1.0, 1.0]).unwrap();
        assert!((model.nll_loss(&unit, None).unwrap() - (LOG_2PI + 1.0)).abs() < 1e-12);
        let pair = Tensor::matrix(2, 2, vec![0.3, 0.1, -0.5, 2.0]).unwrap();
        let doubled = Tensor::matrix(4, 2, [pair.data(), pair.data()].concat()).unwrap();
        let a = model.nll_loss(&pair, None).unwrap();
        let b = model.nll_loss(&doubled, None).unwrap();
        assert!((a - b).abs() < 1e-14);
        assert!(matches!(
            model.nll_loss(&Tensor::zeros(&[0, 2]), None),
            Err(Error::EmptyBatch)
        ));
    }

    #[test]
    fn non_finite_input_reports_a_layer() {
        let model = FlowModel::new(&config(2, 3, EncoderKind::None, 1), 0).unwrap();
        match model.log_prob(&[f64::NAN, 0.0], &[]) {
            Err(Error::NonFinite { layer }) => assert_eq!(layer, 0),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn sampling_is_seeded_and_invertible() {
        let mut model = FlowModel::new(&config(4, 3, EncoderKind::Passthrough, 1), 5).unwrap();
        model.perturb_parameters(0.3, 1);
        let w = [0.2, -0.1, 0.4, 0.0];
        let a = model.sample(&w, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let b = model.sample(&w, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        assert_eq!(a, b);
        assert!(model.log_prob(&a, &w).unwrap().is_finite());
    }

    #[test]
    fn context_shape_is_checked() {
        let model = FlowModel::new(&config(2, 3, EncoderKind::Passthrough, 2), 0).unwrap();
        assert!(model.log_prob(&[0.0, 0.0], &[0.0; 3]).is_err());
        assert!(model.log_prob(&[0.0, 0.0], &[]).is_err());
        assert!(model.log_prob(&[0.0, 0.0, 0.0], &[0.0; 4]).is_err());
    }
}
