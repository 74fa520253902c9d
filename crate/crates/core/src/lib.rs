//! Training and diagnostics for classifiers under class imbalance.
//!
//! The crate is organised bottom-up: [`autodiff`] provides tensors and a
//! reverse-mode tape, [`models`] builds MLPs on it, [`losses`] and [`optim`]
//! hold the objectives and update rules, [`data`] handles ingestion and
//! curation, [`diagnostics`] computes accuracy groups, collapse metrics and
//! decision-boundary margins, and [`harness`] runs configured experiments.

pub mod autodiff;
pub mod data;
pub mod diagnostics;
pub mod error;
pub mod harness;
pub mod losses;
pub mod models;
pub mod optim;

pub use error::{Error, Result};
