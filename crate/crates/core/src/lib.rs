//! Benchmarking workbench for item-item recommendation.
//!
//! The pipeline runs ingest → preprocess → graph → models → metrics, and
//! [`bench`] ties it together into per-k accuracy / diversity reports.

pub mod autodiff;
pub mod ingest;
pub mod preprocess;
pub mod graph;
pub mod metrics;
pub mod models;
pub mod bench;
pub mod util;
