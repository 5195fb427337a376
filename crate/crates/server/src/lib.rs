//! WebSocket server, command line and remote advisor.

pub mod advisor;
pub mod cli;
pub mod config;
pub mod transport;

pub use config::ServerConfig;
pub use transport::{load_experiment, router, start, Running};

#[cfg(doctest)]
#[doc = include_str!("../../../book/src/server.md")]
mod guide_server {}
