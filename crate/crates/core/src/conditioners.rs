//! History windows and the encoders that turn `x_{t-k..t-1}` into the
//! context vector `w_t` shared by every coupling layer.
//!
//! Time indices in this module are 0-based: the window for target `t` holds
//! rows `t-k .. t-1`. Targets with `t < k` only exist at scoring time, where
//! the missing history is filled by repeating the first row.

use std::fmt;
use std::str::FromStr;

use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::diffcore::{Graph, NodeId, ParamId, ParamStore, Tensor};
use crate::nn::{inference_rng, uniform, Mlp};
use crate::{Error, Result};

/// How the lookback window is summarized.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum EncoderKind {
    /// No context: the plain RealNVP baseline.
    #[serde(rename = "realnvp")]
    None,
    /// Flattened raw window (tcNF-base).
    #[serde(rename = "tcnf-base")]
    Passthrough,
    /// Per-channel summary statistics (basic encoded variant).
    #[serde(rename = "tcnf-fixed")]
    FixedEncode,
    #[serde(rename = "tcnf-mlp")]
    Mlp,
    #[serde(rename = "tcnf-cnn")]
    Cnn,
    #[serde(rename = "tcnf-stateless")]
    LstmStateless,
    #[serde(rename = "tcnf-stateful")]
    LstmStateful,
}

impl EncoderKind {
    pub const ALL: [EncoderKind; 7] = [
        EncoderKind::None,
        EncoderKind::Passthrough,
        EncoderKind::FixedEncode,
        EncoderKind::Mlp,
        EncoderKind::Cnn,
        EncoderKind::LstmStateless,
        EncoderKind::LstmStateful,
    ];

    /// Public method name used on the command line and in reports.
    pub fn method_name(self) -> &'static str {
        match self {
            EncoderKind::None => "realnvp",
            EncoderKind::Passthrough => "tcnf-base",
            EncoderKind::FixedEncode => "tcnf-fixed",
            EncoderKind::Mlp => "tcnf-mlp",
            EncoderKind::Cnn => "tcnf-cnn",
            EncoderKind::LstmStateless => "tcnf-stateless",
            EncoderKind::LstmStateful => "tcnf-stateful",
        }
    }

    pub fn uses_history(self) -> bool {
        self != EncoderKind::None
    }

    pub fn is_stateful(self) -> bool {
        self == EncoderKind::LstmStateful
    }

    pub fn is_lstm(self) -> bool {
        matches!(self, EncoderKind::LstmStateless | EncoderKind::LstmStateful)
    }
}

impl fmt::Display for EncoderKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.method_name())
    }
}

impl FromStr for EncoderKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        EncoderKind::ALL
            .into_iter()
            .find(|k| k.method_name() == s)
            .ok_or_else(|| {
                let names: Vec<_> = EncoderKind::ALL.iter().map(|k| k.method_name()).collect();
                Error::Config(format!("unknown method '{s}', expected one of {names:?}"))
            })
    }
}

/// Encoder hyperparameters. Only the fields of the active `kind` matter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub kind: EncoderKind,
    /// Lookback length `k`.
    pub lookback: usize,
    pub mlp_layers: usize,
    pub mlp_compression: f64,
    pub cnn_layers: usize,
    pub cnn_kernel: usize,
    pub cnn_max_channels: usize,
    pub lstm_layers: usize,
    pub lstm_hidden: usize,
    /// Dropout between encoder layers while training.
    pub dropout: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            kind: EncoderKind::Passthrough,
            lookback: 10,
            mlp_layers: 3,
            mlp_compression: 2.0,
            cnn_layers: 2,
            cnn_kernel: 3,
            cnn_max_channels: 8,
            lstm_layers: 1,
            lstm_hidden: 8,
            dropout: 0.1,
        }
    }
}

impl EncoderConfig {
    pub fn with_kind(kind: EncoderKind, lookback: usize) -> Self {
        Self {
            kind,
            lookback,
            ..Self::default()
        }
    }

    /// Checks the kind-specific fields against the searchable ranges.
    pub fn validate(&self) -> Result<()> {
        fn check<T: PartialOrd + fmt::Display>(name: &str, v: T, lo: T, hi: T) -> Result<()> {
            if v < lo || v > hi {
                return Err(Error::Config(format!("{name} = {v} outside [{lo}, {hi}]")));
            }
            Ok(())
        }
        if self.kind.uses_history() && self.lookback == 0 {
            return Err(Error::Config("lookback must be at least 1".into()));
        }
        let learned = matches!(
            self.kind,
            EncoderKind::Mlp | EncoderKind::Cnn | EncoderKind::LstmStateless | EncoderKind::LstmStateful
        );
        if learned {
            check("encoder dropout", self.dropout, 0.1, 0.9)?;
        }
        match self.kind {
            EncoderKind::Mlp => {
                check("mlp_layers", self.mlp_layers, 3, 20)?;
                check("mlp_compression", self.mlp_compression, 1.0, 20.0)?;
            }
            EncoderKind::Cnn => {
                check("cnn_layers", self.cnn_layers, 1, 5)?;
                check("cnn_kernel", self.cnn_kernel, 3, 7)?;
                check("cnn_max_channels", self.cnn_max_channels, 1, 20)?;
            }
            EncoderKind::LstmStateless | EncoderKind::LstmStateful => {
                check("lstm_layers", self.lstm_layers, 1, 10)?;
                if self.lstm_hidden == 0 {
                    return Err(Error::Config("lstm_hidden must be positive".into()));
                }
            }
            _ => {}
        }
        Ok(())
    }

    /// Context dimension `L` for `dim` input channels.
    pub fn context_dim(&self, dim: usize) -> usize {
        let flat = self.lookback * dim;
        match self.kind {
            EncoderKind::None => 0,
            EncoderKind::Passthrough => flat,
            EncoderKind::FixedEncode => 4 * dim,
            EncoderKind::Mlp => ((flat as f64 / self.mlp_compression).floor() as usize).max(2),
            EncoderKind::Cnn => self.cnn_max_channels,
            EncoderKind::LstmStateless | EncoderKind::LstmStateful => self.lstm_hidden,
        }
    }

    /// Number of history rows the encoder consumes per target.
    pub fn history(&self) -> usize {
        if self.kind.uses_history() {
            self.lookback
        } else {
            0
        }
    }

    /// Channel count after conv layer `i` (0-based): a linear ramp from the
    /// input channels to `cnn_max_channels`.
    fn cnn_channels(&self, dim: usize) -> Vec<usize> {
        let n = self.cnn_layers;
        let (from, to) = (dim as f64, self.cnn_max_channels as f64);
        (1..=n)
            .map(|i| {
                if i == n {
                    self.cnn_max_channels
                } else {
                    ((from + (to - from) * i as f64 / n as f64).round() as usize).max(1)
                }
            })
            .collect()
    }

    /// Widths of the MLP encoder: geometric interpolation from `k*D` to `L`.
    fn mlp_widths(&self, dim: usize) -> Vec<usize> {
        let input = self.lookback * dim;
        let out = self.context_dim(dim);
        let n = self.mlp_layers;
        let ratio = out as f64 / input as f64;
        let mut widths = vec![input];
        for i in 1..n {
            let w = (input as f64 * ratio.powf(i as f64 / n as f64)).round() as usize;
            widths.push(w.max(2));
        }
        widths.push(out);
        widths
    }
}

/// One lookback window over a row-major series.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Window<'a> {
    /// 0-based index of the target row.
    pub t: usize,
    /// Rows `t-k .. t-1`, row-major, `k * D` values.
    pub context: &'a [f64],
    pub target: &'a [f64],
}

/// Every full window of a `T x D` row-major series: one per `t` in `k..T`.
pub fn make_windows(values: &[f64], dim: usize, k: usize) -> Result<Vec<Window<'_>>> {
    if dim == 0 || !values.len().is_multiple_of(dim) {
        return Err(Error::Dimension(format!(
            "{} values do not form rows of width {dim}",
            values.len()
        )));
    }
    let len = values.len() / dim;
    if k == 0 || len <= k {
        return Err(Error::Data(format!(
            "series of length {len} is too short for lookback {k}"
        )));
    }
    Ok((k..len)
        .map(|t| Window {
            t,
            context: &values[(t - k) * dim..t * dim],
            target: &values[t * dim..(t + 1) * dim],
        })
        .collect())
}

/// Context rows for target `t`, left-padding with row 0 when `t < k`.
pub fn padded_context(values: &[f64], dim: usize, k: usize, t: usize) -> Vec<f64> {
    if t >= k {
        return values[(t - k) * dim..t * dim].to_vec();
    }
    let mut out = Vec::with_capacity(k * dim);
    for i in 0..k {
        let src = (t + i).saturating_sub(k);
        out.extend_from_slice(&values[src * dim..(src + 1) * dim]);
    }
    out
}

/// Targets and their contexts gathered into contiguous buffers.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowBatch {
    pub lookback: usize,
    pub dim: usize,
    /// `B x k x D`.
    pub contexts: Vec<f64>,
    /// `B x D`.
    pub targets: Vec<f64>,
}

impl WindowBatch {
    /// Gathers the given 0-based targets with the padding policy of
    /// [`padded_context`].
    pub fn gather(values: &[f64], dim: usize, k: usize, targets: &[usize]) -> Self {
        let mut contexts = Vec::with_capacity(targets.len() * k * dim);
        let mut rows = Vec::with_capacity(targets.len() * dim);
        for &t in targets {
            if k > 0 {
                contexts.extend(padded_context(values, dim, k, t));
            }
            rows.extend_from_slice(&values[t * dim..(t + 1) * dim]);
        }
        Self {
            lookback: k,
            dim,
            contexts,
            targets: rows,
        }
    }

    pub fn len(&self) -> usize {
        self.targets.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    pub fn targets_tensor(&self) -> Tensor {
        Tensor::matrix(self.len(), self.dim, self.targets.clone()).expect("targets shape")
    }

    fn flat_contexts(&self) -> Tensor {
        Tensor::matrix(self.len(), self.lookback * self.dim, self.contexts.clone())
            .expect("contexts shape")
    }

    /// Contexts laid out as `[B, D, k]` for temporal convolution.
    fn channel_major(&self) -> Tensor {
        let (b, k, d) = (self.len(), self.lookback, self.dim);
        let mut data = vec![0.0; b * d * k];
        for n in 0..b {
            for t in 0..k {
                for c in 0..d {
                    data[(n * d + c) * k + t] = self.contexts[(n * k + t) * d + c];
                }
            }
        }
        Tensor::new(vec![b, d, k], data).expect("conv input shape")
    }

    /// Row `t` of every context, as `[B, D]`.
    fn step(&self, t: usize) -> Tensor {
        let (b, k, d) = (self.len(), self.lookback, self.dim);
        let mut data = Vec::with_capacity(b * d);
        for n in 0..b {
            let start = (n * k + t) * d;
            data.extend_from_slice(&self.contexts[start..start + d]);
        }
        Tensor::matrix(b, d, data).expect("step shape")
    }
}

/// Per-channel `(mean, std, last, mean first difference)` of a `k x D`
/// window, interleaved by channel.
pub fn fixed_summary(context: &[f64], dim: usize) -> Vec<f64> {
    let k = context.len() / dim;
    let mut out = Vec::with_capacity(4 * dim);
    for c in 0..dim {
        let col: Vec<f64> = (0..k).map(|t| context[t * dim + c]).collect();
        let mean = col.iter().sum::<f64>() / k as f64;
        let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / k as f64;
        let last = col[k - 1];
        let diff_mean = if k > 1 {
            (col[k - 1] - col[0]) / (k - 1) as f64
        } else {
            0.0
        };
        out.extend([mean, var.sqrt(), last, diff_mean]);
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
struct LstmLayer {
    w_x: ParamId,
    w_h: ParamId,
    bias: ParamId,
    hidden: usize,
}

#[derive(Debug, Clone, PartialEq)]
struct ConvLayer {
    weight: ParamId,
    bias: ParamId,
}

#[derive(Debug, Clone, PartialEq)]
enum EncoderNet {
    Static,
    Mlp(Mlp),
    Cnn(Vec<ConvLayer>),
    Lstm(Vec<LstmLayer>),
}

/// LSTM state carried from timestep to timestep by the stateful encoder.
#[derive(Debug, Clone, PartialEq)]
pub struct StatefulHandle {
    pub hidden: Vec<Vec<f64>>,
    pub cell: Vec<Vec<f64>>,
    /// 1-based index of the last consumed observation; 0 before any.
    pub t: usize,
}

impl StatefulHandle {
    pub fn new(layers: usize, hidden: usize) -> Self {
        Self {
            hidden: vec![vec![0.0; hidden]; layers],
            cell: vec![vec![0.0; hidden]; layers],
            t: 0,
        }
    }

    pub fn reset(&mut self) {
        for v in self.hidden.iter_mut().chain(self.cell.iter_mut()) {
            v.fill(0.0);
        }
        self.t = 0;
    }
}

/// Graph nodes of an LSTM stack's state.
pub type LstmState = Vec<(NodeId, NodeId)>;

/// A context encoder with its parameters registered in a [`ParamStore`].
#[derive(Debug, Clone, PartialEq)]
pub struct Encoder {
    config: EncoderConfig,
    dim: usize,
    net: EncoderNet,
}

impl Encoder {
    pub fn new(
        config: &EncoderConfig,
        dim: usize,
        store: &mut ParamStore,
        rng: &mut dyn RngCore,
    ) -> Result<Self> {
        config.validate()?;
        let net = match config.kind {
            EncoderKind::None | EncoderKind::Passthrough | EncoderKind::FixedEncode => {
                EncoderNet::Static
            }
            EncoderKind::Mlp => EncoderNet::Mlp(Mlp::new(
                store,
                "encoder.mlp",
                &config.mlp_widths(dim),
                false,
                config.dropout,
                rng,
            )),
            EncoderKind::Cnn => {
                let mut layers = Vec::new();
                let mut cin = dim;
                for (i, cout) in config.cnn_channels(dim).into_iter().enumerate() {
                    let fan_in = (cin * config.cnn_kernel) as f64;
                    let bound = 1.0 / fan_in.sqrt();
                    let weight = store.add(
                        format!("encoder.conv{i}.weight"),
                        uniform(rng, &[cout, cin, config.cnn_kernel], bound),
                    );
                    let bias = store.add(
                        format!("encoder.conv{i}.bias"),
                        uniform(rng, &[cout], bound),
                    );
                    layers.push(ConvLayer { weight, bias });
                    cin = cout;
                }
                EncoderNet::Cnn(layers)
            }
            EncoderKind::LstmStateless | EncoderKind::LstmStateful => {
                let h = config.lstm_hidden;
                let bound = 1.0 / (h as f64).sqrt();
                let layers = (0..config.lstm_layers)
                    .map(|i| {
                        let input = if i == 0 { dim } else { h };
                        LstmLayer {
                            w_x: store.add(
                                format!("encoder.lstm{i}.w_x"),
                                uniform(rng, &[input, 4 * h], bound),
                            ),
                            w_h: store.add(
                                format!("encoder.lstm{i}.w_h"),
                                uniform(rng, &[h, 4 * h], bound),
                            ),
                            bias: store.add(
                                format!("encoder.lstm{i}.bias"),
                                uniform(rng, &[4 * h], bound),
                            ),
                            hidden: h,
                        }
                    })
                    .collect();
                EncoderNet::Lstm(layers)
            }
        };
        Ok(Self {
            config: config.clone(),
            dim,
            net,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn kind(&self) -> EncoderKind {
        self.config.kind
    }

    pub fn context_dim(&self) -> usize {
        self.config.context_dim(self.dim)
    }

    pub fn lookback(&self) -> usize {
        self.config.history()
    }

    /// Context node `[B, L]` for a batch of windows, or `None` for the
    /// unconditioned baseline. The stateful LSTM is encoded here as a
    /// zero-state run over the window, exactly like the stateless one.
    pub fn encode_batch(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        batch: &WindowBatch,
        rng: &mut dyn RngCore,
    ) -> Result<Option<NodeId>> {
        if batch.dim != self.dim || batch.lookback != self.lookback() {
            return Err(Error::Dimension(format!(
                "window batch is {}x{} but the encoder expects {}x{}",
                batch.lookback,
                batch.dim,
                self.lookback(),
                self.dim
            )));
        }
        let node = match (&self.net, self.config.kind) {
            (_, EncoderKind::None) => return Ok(None),
            (EncoderNet::Static, EncoderKind::Passthrough) => g.constant(batch.flat_contexts()),
            (EncoderNet::Static, _) => {
                let k = batch.lookback;
                let per = k * self.dim;
                let data: Vec<f64> = batch
                    .contexts
                    .chunks(per)
                    .flat_map(|ctx| fixed_summary(ctx, self.dim))
                    .collect();
                g.constant(Tensor::matrix(batch.len(), 4 * self.dim, data)?)
            }
            (EncoderNet::Mlp(mlp), _) => {
                let x = g.constant(batch.flat_contexts());
                mlp.apply(g, store, x, rng)
            }
            (EncoderNet::Cnn(layers), _) => {
                let mut h = g.constant(batch.channel_major());
                for layer in layers {
                    let w = g.param(store, layer.weight);
                    let b = g.param(store, layer.bias);
                    h = g.conv1d(h, w, b);
                    h = g.tanh(h);
                    h = g.dropout(h, self.config.dropout, rng);
                }
                g.mean_last(h)
            }
            (EncoderNet::Lstm(_), _) => {
                let mut state = self.zero_state(g, batch.len());
                let mut top = None;
                for t in 0..batch.lookback {
                    let x = g.constant(batch.step(t));
                    let (next, h) = self.lstm_step(g, store, x, &state, rng);
                    state = next;
                    top = Some(h);
                }
                top.expect("lookback is at least 1")
            }
        };
        Ok(Some(node))
    }

    /// Encodes a single `k x D` window in inference mode.
    pub fn encode(&self, store: &ParamStore, context: &[f64]) -> Result<Vec<f64>> {
        let k = self.lookback();
        if context.len() != k * self.dim {
            return Err(Error::Dimension(format!(
                "context has {} values, expected {k}x{}",
                context.len(),
                self.dim
            )));
        }
        let batch = WindowBatch {
            lookback: k,
            dim: self.dim,
            contexts: context.to_vec(),
            targets: vec![0.0; self.dim],
        };
        let mut g = Graph::new();
        let mut rng = inference_rng();
        match self.encode_batch(&mut g, store, &batch, &mut rng)? {
            Some(node) => Ok(g.forward(node)?.data().to_vec()),
            None => Ok(Vec::new()),
        }
    }

    fn lstm_layers(&self) -> &[LstmLayer] {
        match &self.net {
            EncoderNet::Lstm(layers) => layers,
            _ => &[],
        }
    }

    /// All-zero LSTM state for a batch of `rows`.
    pub fn zero_state(&self, g: &mut Graph, rows: usize) -> LstmState {
        self.lstm_layers()
            .iter()
            .map(|l| {
                let h = g.constant(Tensor::zeros(&[rows, l.hidden]));
                let c = g.constant(Tensor::zeros(&[rows, l.hidden]));
                (h, c)
            })
            .collect()
    }

    /// State nodes initialized from a handle (batch of one, no gradient).
    pub fn state_from_handle(&self, g: &mut Graph, handle: &StatefulHandle) -> LstmState {
        self.lstm_layers()
            .iter()
            .enumerate()
            .map(|(i, l)| {
                let h = g.constant(Tensor::matrix(1, l.hidden, handle.hidden[i].clone()).unwrap());
                let c = g.constant(Tensor::matrix(1, l.hidden, handle.cell[i].clone()).unwrap());
                (h, c)
            })
            .collect()
    }

    /// Advances every LSTM layer by one step; returns the new state and the
    /// top layer's hidden output.
    pub fn lstm_step(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x: NodeId,
        state: &LstmState,
        rng: &mut dyn RngCore,
    ) -> (LstmState, NodeId) {
        let layers = self.lstm_layers();
        let mut input = x;
        let mut next = Vec::with_capacity(layers.len());
        for (i, (layer, &(h, c))) in layers.iter().zip(state).enumerate() {
            let w_x = g.param(store, layer.w_x);
            let w_h = g.param(store, layer.w_h);
            let b = g.param(store, layer.bias);
            let (h2, c2) = g.lstm_cell(input, h, c, w_x, w_h, b, layer.hidden);
            next.push((h2, c2));
            input = if i + 1 < layers.len() {
                g.dropout(h2, self.config.dropout, rng)
            } else {
                h2
            };
        }
        (next, input)
    }

    pub fn new_handle(&self) -> StatefulHandle {
        StatefulHandle::new(self.config.lstm_layers, self.config.lstm_hidden)
    }

    /// Consumes `x_prev = x_{t-1}` (1-based `t`) and returns `w_t`.
    ///
    /// The handle must have consumed exactly the observations up to
    /// `x_{t-2}`.
    pub fn encode_stateful(
        &self,
        store: &ParamStore,
        x_prev: &[f64],
        handle: &mut StatefulHandle,
        t: usize,
    ) -> Result<Vec<f64>> {
        if !self.config.kind.is_lstm() {
            return Err(Error::Config(format!(
                "{} has no recurrent state",
                self.config.kind
            )));
        }
        if t != handle.t + 2 {
            return Err(Error::OutOfOrder {
                expected: handle.t + 2,
                actual: t,
            });
        }
        if x_prev.len() != self.dim {
            return Err(Error::Dimension(format!(
                "observation has {} channels, expected {}",
                x_prev.len(),
                self.dim
            )));
        }
        let mut g = Graph::new();
        let mut rng = inference_rng();
        let state = self.state_from_handle(&mut g, handle);
        let x = g.constant(Tensor::matrix(1, self.dim, x_prev.to_vec())?);
        let (next, top) = self.lstm_step(&mut g, store, x, &state, &mut rng);
        for (i, (h, c)) in next.into_iter().enumerate() {
            handle.hidden[i] = g.forward(h)?.data().to_vec();
            handle.cell[i] = g.forward(c)?.data().to_vec();
        }
        handle.t += 1;
        Ok(g.forward(top)?.data().to_vec())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn series(len: usize, dim: usize) -> Vec<f64> {
        (0..len * dim).map(|i| i as f64).collect()
    }

    #[test]
    fn windows_unroll_the_definition() {
        // 1-based t = 3, 4, 5 are 0-based 2, 3, 4.
        let v = series(5, 2);
        let w = make_windows(&v, 2, 2).unwrap();
        assert_eq!(w.iter().map(|w| w.t).collect::<Vec<_>>(), vec![2, 3, 4]);
        assert_eq!(w[0].context, &[0.0, 1.0, 2.0, 3.0]);
        assert_eq!(w[0].target, &[4.0, 5.0]);
    }

    #[test]
    fn lookback_of_len_minus_one_gives_one_window() {
        let v = series(6, 3);
        assert_eq!(make_windows(&v, 3, 5).unwrap().len(), 1);
        assert!(make_windows(&v, 3, 6).is_err());
    }

    #[test]
    fn window_count_is_len_minus_k_and_never_contains_target() {
        for len in 2..20 {
            for k in 1..len {
                let v = series(len, 1);
                let w = make_windows(&v, 1, k).unwrap();
                assert_eq!(w.len(), len - k);
                for win in &w {
                    // values equal their index, so the context indices are its values
                    assert!(win.context.iter().all(|&i| (i as usize) < win.t));
                    assert_eq!(win.context.len(), k);
                }
            }
        }
    }

    #[test]
    fn padded_context_repeats_first_row() {
        let v = series(4, 1);
        assert_eq!(padded_context(&v, 1, 3, 0), vec![0.0, 0.0, 0.0]);
        assert_eq!(padded_context(&v, 1, 3, 1), vec![0.0, 0.0, 0.0]);
        assert_eq!(padded_context(&v, 1, 3, 2), vec![0.0, 0.0, 1.0]);
        assert_eq!(padded_context(&v, 1, 3, 3), vec![0.0, 1.0, 2.0]);
    }

    fn encoder(kind: EncoderKind, k: usize, dim: usize) -> (Encoder, ParamStore) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let cfg = EncoderConfig {
            lstm_layers: 2,
            ..EncoderConfig::with_kind(kind, k)
        };
        let enc = Encoder::new(&cfg, dim, &mut store, &mut rng).unwrap();
        (enc, store)
    }

    #[test]
    fn passthrough_flattens_in_time_order() {
        let (enc, store) = encoder(EncoderKind::Passthrough, 2, 2);
        let w = enc.encode(&store, &[1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(w, vec![1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn fixed_encode_of_constant_channel() {
        let (enc, store) = encoder(EncoderKind::FixedEncode, 4, 2);
        let ctx = [2.5, 0.0, 2.5, 1.0, 2.5, 2.0, 2.5, 3.0];
        let w = enc.encode(&store, &ctx).unwrap();
        assert_eq!(&w[..4], &[2.5, 0.0, 2.5, 0.0]);
        assert_eq!(w[6], 3.0);
        assert_eq!(w[7], 1.0);
        assert_eq!(enc.context_dim(), 8);
    }

    #[test]
    fn context_dims_follow_each_kind() {
        let dim = 4;
        let mut cfg = EncoderConfig::with_kind(EncoderKind::Mlp, 5);
        cfg.mlp_compression = 3.0;
        assert_eq!(cfg.context_dim(dim), 6);
        cfg.mlp_compression = 20.0;
        assert_eq!(cfg.context_dim(dim), 2);
        cfg.kind = EncoderKind::Cnn;
        cfg.cnn_max_channels = 7;
        assert_eq!(cfg.context_dim(dim), 7);
        cfg.kind = EncoderKind::None;
        assert_eq!(cfg.context_dim(dim), 0);
        cfg.kind = EncoderKind::Passthrough;
        assert_eq!(cfg.context_dim(dim), 20);
    }

    #[test]
    fn learned_encoders_emit_context_dim_values() {
        for kind in [EncoderKind::Mlp, EncoderKind::Cnn, EncoderKind::LstmStateless] {
            let (enc, store) = encoder(kind, 6, 2);
            let ctx: Vec<f64> = (0..12).map(|i| (i as f64 * 0.3).sin()).collect();
            let w = enc.encode(&store, &ctx).unwrap();
            assert_eq!(w.len(), enc.context_dim(), "{kind}");
            assert_eq!(w, enc.encode(&store, &ctx).unwrap());
        }
    }

    #[test]
    fn zero_lstm_on_zero_context_gives_zero() {
        let (enc, mut store) = encoder(EncoderKind::LstmStateless, 3, 2);
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            if store.get(id).name.ends_with("bias") {
                store.get_mut(id).value.data_mut().fill(0.0);
            }
        }
        let w = enc.encode(&store, &[0.0; 6]).unwrap();
        assert!(w.iter().all(|&v| v == 0.0), "{w:?}");
    }

    #[test]
    fn stateful_steps_equal_stateless_prefix_run() {
        let (enc, store) = encoder(EncoderKind::LstmStateful, 1, 2);
        let xs: Vec<f64> = (0..16).map(|i| (i as f64 * 0.7).cos()).collect();
        let mut handle = enc.new_handle();
        let mut last = Vec::new();
        for (i, x) in xs.chunks(2).enumerate() {
            last = enc.encode_stateful(&store, x, &mut handle, i + 2).unwrap();
        }
        assert_eq!(handle.t, 8);

        let cfg = EncoderConfig {
            kind: EncoderKind::LstmStateless,
            lookback: 8,
            ..enc.config().clone()
        };
        let prefix = Encoder {
            config: cfg,
            dim: 2,
            net: enc.net.clone(),
        };
        let full = prefix.encode(&store, &xs).unwrap();
        for (a, b) in last.iter().zip(&full) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn stateful_rejects_out_of_order_and_resets() {
        let (enc, store) = encoder(EncoderKind::LstmStateful, 1, 2);
        let mut handle = enc.new_handle();
        enc.encode_stateful(&store, &[0.1, 0.2], &mut handle, 2).unwrap();
        match enc.encode_stateful(&store, &[0.1, 0.2], &mut handle, 5) {
            Err(Error::OutOfOrder { expected, actual }) => {
                assert_eq!((expected, actual), (3, 5));
            }
            other => panic!("{other:?}"),
        }
        handle.reset();
        assert_eq!(handle.t, 0);
        assert!(handle.hidden.iter().flatten().all(|&v| v == 0.0));
    }

    #[test]
    fn identical_streams_give_identical_contexts() {
        let (enc, store) = encoder(EncoderKind::LstmStateful, 1, 2);
        let (mut a, mut b) = (enc.new_handle(), enc.new_handle());
        for t in 0..10 {
            let x = [t as f64 * 0.1, -(t as f64) * 0.05];
            let wa = enc.encode_stateful(&store, &x, &mut a, t + 2).unwrap();
            let wb = enc.encode_stateful(&store, &x, &mut b, t + 2).unwrap();
            assert_eq!(wa, wb);
        }
    }

    #[test]
    fn permuting_a_batch_permutes_outputs() {
        for kind in [EncoderKind::Mlp, EncoderKind::Cnn, EncoderKind::LstmStateless] {
            let (enc, store) = encoder(kind, 4, 2);
            let v: Vec<f64> = (0..40).map(|i| (i as f64 * 0.37).sin()).collect();
            let run = |targets: &[usize]| {
                let batch = WindowBatch::gather(&v, 2, 4, targets);
                let mut g = Graph::new();
                let mut rng = ChaCha8Rng::seed_from_u64(0);
                let node = enc.encode_batch(&mut g, &store, &batch, &mut rng).unwrap().unwrap();
                g.forward(node).unwrap().clone()
            };
            let fwd = run(&[5, 9, 14]);
            let rev = run(&[14, 9, 5]);
            let l = enc.context_dim();
            for (i, j) in [(0, 2), (1, 1), (2, 0)] {
                assert_eq!(fwd.row(i), rev.row(j), "{kind}");
            }
            assert_eq!(fwd.shape(), &[3, l]);
        }
    }

    #[test]
    fn method_names_round_trip() {
        for kind in EncoderKind::ALL {
            assert_eq!(kind.method_name().parse::<EncoderKind>().unwrap(), kind);
        }
        assert!("tcnf-unknown".parse::<EncoderKind>().is_err());
    }
}
