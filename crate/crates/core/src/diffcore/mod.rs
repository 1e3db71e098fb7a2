//! Minimal reverse-mode differentiation over dense `f64` arrays.
//!
//! A [`Graph`] records operations as they are built, evaluates them lazily on
//! [`Graph::forward`], and propagates gradients of a scalar root back to every
//! [`Parameter`] in a [`ParamStore`]. The op set is exactly what the flow,
//! its conditioners and the context encoders need: matrix multiply,
//! broadcasting elementwise arithmetic, `tanh`/`sigmoid`/`exp`/`log`,
//! reductions, column slicing and concatenation, 1-D convolution, dropout and
//! an LSTM cell step composed from those primitives.

mod graph;
mod params;
mod tensor;

pub use graph::{Gradients, Graph, NodeId};
pub use params::{ParamId, ParamStore, Parameter};
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DiffError {
    #[error("shape mismatch in {op}: {shapes:?}")]
    ShapeMismatch {
        op: &'static str,
        shapes: Vec<Vec<usize>>,
    },
    #[error("shape {shape:?} does not hold {len} elements")]
    InvalidShape { shape: Vec<usize>, len: usize },
    #[error("backward needs a scalar root, got shape {shape:?}")]
    NonScalarRoot { shape: Vec<usize> },
    #[error("node {0} has not been evaluated; run forward first")]
    NotEvaluated(usize),
    #[error("node {0} does not exist")]
    UnknownNode(usize),
}

/// Compares analytic gradients against central differences.
///
/// `build` must construct a deterministic scalar loss in an inference-mode
/// graph from the current parameter values. Every trainable scalar is
/// perturbed by `±epsilon`; the result is the largest
/// `|analytic - numeric| / (|analytic| + |numeric| + 1e-12)`.
pub fn finite_diff_check<F>(
    build: F,
    store: &mut ParamStore,
    epsilon: f64,
) -> Result<f64, DiffError>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<NodeId, DiffError>,
{
    assert!(epsilon > 0.0, "epsilon must be positive");
    let eval = |store: &ParamStore| -> Result<f64, DiffError> {
        let mut g = Graph::new();
        let root = build(&mut g, store)?;
        let v = g.forward(root)?;
        v.item().ok_or(DiffError::NonScalarRoot {
            shape: v.shape().to_vec(),
        })
    };

    let mut g = Graph::new();
    let root = build(&mut g, store)?;
    g.forward(root)?;
    let grads = g.backward(root)?;

    let ids: Vec<ParamId> = store.ids().collect();
    let mut worst: f64 = 0.0;
    for id in ids {
        if !store.get(id).trainable {
            continue;
        }
        let zeros = Tensor::zeros(store.get(id).value.shape());
        let analytic = grads.param(id).unwrap_or(&zeros).clone();
        for i in 0..store.get(id).value.len() {
            let orig = store.get(id).value.data()[i];
            store.get_mut(id).value.data_mut()[i] = orig + epsilon;
            let plus = eval(store);
            store.get_mut(id).value.data_mut()[i] = orig - epsilon;
            let minus = eval(store);
            store.get_mut(id).value.data_mut()[i] = orig;
            let numeric = (plus? - minus?) / (2.0 * epsilon);
            let a = analytic.data()[i];
            let rel = (a - numeric).abs() / (a.abs() + numeric.abs() + 1e-12);
            worst = worst.max(rel);
        }
    }
    Ok(worst)
}
