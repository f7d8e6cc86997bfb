//! Neural Granger causality discovery with sparse input projections and sLSTM forecasters.
//!
//! Each variate `v` of a multivariate series gets its own model: a projection
//! `x = W_v s + b_v` that embeds all variates into a hidden space, followed by an
//! sLSTM layer and a linear head that predicts the next value of `v`. Training
//! alternates Adam steps on the prediction loss with a column-wise proximal
//! (soft-thresholding) step on `W_v`, weighted by learned reduction coefficients
//! `alpha_v = softmax(beta_v)`. Columns that reach exactly zero are variates the model
//! no longer reads, so the Granger-causal graph is read off the surviving columns.
//!
//! Module map:
//! - [`dataset`]: series container, CSV IO, standardization, context windows
//! - [`simulate`]: Lorenz-96 and VAR benchmark generators with ground truth
//! - [`slstm`] / [`lstm`]: forecasters with exact backpropagation through time
//! - [`selector`]: sparse projection, reduction loss and proximal operators
//! - [`train`]: Adam, learning-rate schedule, the joint optimization loop
//! - [`gc`]: graph extraction, sweep scores and evaluation metrics
//! - [`checkpoint`]: named-tensor parameter files

pub mod checkpoint;
pub mod dataset;
mod error;
pub mod gc;
pub mod lstm;
pub mod selector;
pub mod simulate;
pub mod slstm;
pub mod train;

pub use error::{Error, Result};
