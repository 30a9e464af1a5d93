//! Encrypted store, query service, HTTP API and command line for tracewave.

pub mod cli;
pub mod config;
pub mod http;
pub mod pipeline;
pub mod service;
pub mod store;

pub use config::Config;
pub use service::{Service, ServiceError};
