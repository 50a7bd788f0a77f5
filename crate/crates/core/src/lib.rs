//! A desk-scale laboratory for parallel neural-network training strategies.
//!
//! Four strategies over `K` simulated workers with a barrier every `tau`
//! iterations:
//!
//! * **S-DNN** — sequential training of one model on the full dataset;
//! * **E-DNN** — independent local trainings, one terminal output ensemble;
//! * **MA-DNN** — periodic parameter averaging;
//! * **EC-DNN** — periodic output-ensemble aggregation, distilled back into
//!   local-sized models so the aggregate never grows.
//!
//! Runs are deterministic: every stochastic choice is drawn from a stream
//! keyed by `(seed, purpose, worker)`, so the same config produces identical
//! records whether workers run sequentially or on a thread pool (the
//! `parallel` feature, on by default, enables the thread pool).

pub mod aggregate;
pub mod compress;
pub mod config;
pub mod data;
pub mod error;
pub mod experiment;
pub mod fixtures;
pub mod gauge;
pub mod harness;
pub mod loss;
pub mod metrics;
pub mod net;
pub mod optim;
pub mod seedstream;
pub mod snapshot;
pub mod svg;

pub use error::{Error, Result};
