//! Coordinator daemon, executor agent and CLI for running experiments on
//! remote machines.

pub mod agent;
pub mod bridge;
pub mod cli;
pub mod conn;
pub mod daemon;
