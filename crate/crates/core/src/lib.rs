//! A small container orchestrator for comparing poll-based and signal-based
//! container monitoring on one host.

pub mod config;
pub mod eventlog;
pub mod fault;
pub mod harness;
pub mod model;
pub mod net;
pub mod probe;
pub mod service;
pub mod signal;
pub mod state_machine;
pub mod supervisor;
pub mod time;
