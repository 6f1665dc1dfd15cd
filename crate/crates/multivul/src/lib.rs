pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod error;
pub mod fixture;
pub mod jsonl;
pub mod latency;
pub mod output;
pub mod remote;

pub use multivul_core as core;
