//! Temporal-conditioned normalizing flows for unsupervised anomaly detection
//! in multivariate time series.
//!
//! A stack of affine coupling layers models `p(x_t | x_{t-k..t-1})`; the
//! history window is summarized into a context vector by one of several
//! encoders and fed to every coupling layer's conditioner. Points are scored
//! by their negative log-likelihood under the trained flow.
//!
//! The crate is organized bottom-up:
//!
//! - [`diffcore`]: reverse-mode differentiation used to train everything.
//! - [`flow`]: coupling layers, the full [`flow::FlowModel`] and its file format.
//! - [`conditioners`]: history windows and the context encoders.
//! - [`data`]: CSV ingestion, preprocessing, splits and a synthetic generator.
//! - [`train`]: Adam and the training loop.
//! - [`score`]: per-timestep scores, thresholds and latent export.
//! - [`metrics`]: AUC-ROC, VUS-ROC, AUC-PR, precision/recall/F1.
//! - [`hyperopt`]: CMA-ES over the method's hyperparameter space.

pub mod conditioners;
pub mod data;
pub mod diffcore;
mod error;
pub mod flow;
pub mod hyperopt;
pub mod metrics;
pub mod nn;
pub mod score;
pub mod train;

pub use error::{Error, Result};
