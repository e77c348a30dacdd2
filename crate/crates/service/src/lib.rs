//! HTTP API and command-line front end for the air dataset pipeline.

pub mod api;
pub mod cli;
pub mod ops;
pub mod store;
