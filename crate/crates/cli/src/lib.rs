//! Command-line pipeline and HTTP generation service.

pub mod app;
pub mod config;
pub mod service;

pub use config::RunConfig;
pub use service::{GenerateRequest, JobState, JobView, Service, ServiceConfig};
