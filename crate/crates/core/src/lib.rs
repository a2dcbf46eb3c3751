//! Feedforward networks whose neurons are univariate Gaussian mixtures.
//!
//! Each neuron of a [`ugmm`] layer owns one Gaussian component per input and
//! emits the log-density of that mixture, evaluated at its inputs. Layers
//! stack into a [`net::NetworkParams`], train with Adam under a multi-step
//! learning-rate schedule ([`train`]), and can be trained either
//! discriminatively (softmax cross-entropy) or generatively (maximising the
//! true-class output as a joint log-likelihood). A plain ReLU network is
//! included as a baseline.
//!
//! Gradients are written out by hand, layer by layer, and checked against
//! central differences by the [`audit`] module.

pub mod audit;
pub mod cli;
pub mod data;
pub mod error;
pub mod net;
pub mod numkit;
pub mod train;
pub mod ugmm;

pub use error::{Error, Result};
pub use net::{Mode, ModelKind, NetworkParams, NetworkSpec};
pub use numkit::{Matrix, Rng};
