//! Active learning service: HTTP server, client SDK and the `alaas` CLI.

pub mod api;
pub mod cli;
pub mod client;
pub mod config;
pub mod jobs;
pub mod server;

pub use client::{Client, ClientConfig, ClientError};
pub use config::{load_config, ConfigError, ServiceConfig};
pub use jobs::{JobRecord, JobState, JobStore};
pub use server::{serve, ServeError, ServiceHandle};
