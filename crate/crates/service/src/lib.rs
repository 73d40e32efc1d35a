//! Ingestion service, decision log and command-line front end for the
//! `clickshield-core` filter.

pub mod cli;
pub mod config;
pub mod decision_log;
pub mod server;
