//! Federated-learning simulator for targeted data-poisoning attacks on
//! tabular traffic classifiers, with a validation-score defense that fits a
//! Weibull distribution to client scores and keeps the top-ranked models.
//!
//! The crate is organised bottom-up:
//!
//! - [`nn`]: dense ReLU/softmax classifier with manual backpropagation and SGD.
//! - [`data`]: CSV ingestion, synthetic blobs, stratified split, Dirichlet
//!   partitioning and the server auxiliary dataset.
//! - [`attacks`]: FGSM, PGD, Gaussian noise, label flipping and the
//!   compromised-client update.
//! - [`aggregation`]: FedAvg, Krum, Multi-Krum, coordinate median, trimmed mean.
//! - [`weidetect`]: validation scoring, Weibull MLE, CDF ranking and filtered
//!   averaging.
//! - [`orchestrator`]: the round loop, metrics and timing.
//! - [`config`] and [`report`]: experiment files in and result files out.

pub mod aggregation;
pub mod attacks;
pub mod config;
pub mod data;
mod error;
pub mod metrics;
pub mod nn;
pub mod orchestrator;
pub mod report;
pub mod seed;
pub mod weidetect;

pub use error::{Error, Result};
