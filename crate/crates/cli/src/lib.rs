//! Experiment harness: config ingestion, seeded training/testing runs,
//! comparison reports, and parameter sweeps.

pub mod config;
pub mod report;
pub mod runner;
pub mod sweep;
