//! HTTP API, CLI and configuration for the riskscope engine.

pub mod api;
pub mod auth;
pub mod cli;
pub mod config;
