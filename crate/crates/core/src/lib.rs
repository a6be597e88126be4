//! Core of an active-learning service: domain types, selection strategies,
//! dataset management with content-addressed caching, batched inference,
//! the staged selection pipeline and the benchmark harness.

pub mod model;
pub mod bench;
pub mod data;
pub mod inference;
pub mod pipeline;
pub mod strategy;
pub mod synth;
