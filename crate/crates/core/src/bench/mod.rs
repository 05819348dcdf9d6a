//! Synthetic data, cost model, latency runs, and evaluation.

pub mod config;
pub mod cost;
pub mod data;
pub mod efficacy;
pub mod eval;
pub mod latency;
pub mod report;

pub use config::BenchConfig;
