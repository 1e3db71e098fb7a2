//! Small network building blocks shared by the coupling conditioners and the
//! context encoders.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::diffcore::{Graph, NodeId, ParamId, ParamStore, Tensor};

/// RNG handed to inference graphs, where dropout never draws from it.
pub(crate) fn inference_rng() -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(0)
}

/// Uniform tensor in `[-bound, bound)`.
pub(crate) fn uniform(rng: &mut dyn RngCore, shape: &[usize], bound: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape product")
}

/// Fully connected layer `x W + b`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub weight: ParamId,
    pub bias: ParamId,
    pub inputs: usize,
    pub outputs: usize,
}

impl Dense {
    /// Weights uniform in `±1/sqrt(inputs)`, or all zeros when `zero` is set.
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        inputs: usize,
        outputs: usize,
        zero: bool,
        rng: &mut dyn RngCore,
    ) -> Self {
        let bound = 1.0 / (inputs.max(1) as f64).sqrt();
        let (w, b) = if zero {
            (Tensor::zeros(&[inputs, outputs]), Tensor::zeros(&[outputs]))
        } else {
            (
                uniform(rng, &[inputs, outputs], bound),
                uniform(rng, &[outputs], bound),
            )
        };
        let weight = store.add(format!("{name}.weight"), w);
        let bias = store.add(format!("{name}.bias"), b);
        Self {
            weight,
            bias,
            inputs,
            outputs,
        }
    }

    pub fn apply(&self, g: &mut Graph, store: &ParamStore, x: NodeId) -> NodeId {
        let w = g.param(store, self.weight);
        let b = g.param(store, self.bias);
        g.linear(x, w, b)
    }
}

/// Stack of dense layers with `tanh` and dropout between them and a linear
/// output.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Dense>,
    pub dropout: f64,
}

impl Mlp {
    /// `widths` lists every layer width including input and output, so a net
    /// with `widths.len() - 1` dense layers is built.
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        widths: &[usize],
        zero_last: bool,
        dropout: f64,
        rng: &mut dyn RngCore,
    ) -> Self {
        assert!(widths.len() >= 2, "an MLP needs input and output widths");
        let last = widths.len() - 2;
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| {
                Dense::new(
                    store,
                    &format!("{prefix}.fc{i}"),
                    w[0],
                    w[1],
                    zero_last && i == last,
                    rng,
                )
            })
            .collect();
        Self { layers, dropout }
    }

    pub fn output_width(&self) -> usize {
        self.layers.last().map(|l| l.outputs).unwrap_or(0)
    }

    pub fn apply(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x: NodeId,
        rng: &mut dyn RngCore,
    ) -> NodeId {
        let mut h = x;
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.apply(g, store, h);
            if i < last {
                h = g.tanh(h);
                h = g.dropout(h, self.dropout, rng);
            }
        }
        h
    }
}

/// Hidden widths that start at `first` and shrink by `funnel` each layer,
/// never below 2.
pub fn funnel_widths(first: usize, layers: usize, funnel: f64) -> Vec<usize> {
    let mut widths = Vec::with_capacity(layers);
    let mut w = first.max(2) as f64;
    for _ in 0..layers {
        let width = (w.floor() as usize).max(2);
        widths.push(width);
        w = width as f64 / funnel.max(1.0);
    }
    widths
}
