//! Deterministic single-process federated learning simulator.
//!
//! The crate trains a small exact-gradient classifier across simulated
//! clients under three server aggregation policies (federated averaging,
//! clipped+noised private averaging, and median-based robust aggregation),
//! then applies a grid of client personalization strategies — finetuning,
//! freeze-base finetuning, elastic multi-task regularization, knowledge
//! distillation, and mixture-of-experts ensembling — and reports per-client
//! accuracy tables.
//!
//! Everything is driven by one master seed: partitioning, initialization,
//! client sampling, batch shuffles and noise all draw from labeled RNG
//! streams, so runs are bitwise reproducible regardless of thread count.

pub mod aggregation;
pub mod checks;
pub mod data;
pub mod error;
pub mod exec;
pub mod federation;
pub mod harness;
pub mod model;
pub mod personalization;
pub mod rng;

pub use error::{Error, Result};
