#![allow(dead_code)]

pub mod relay_sim;
pub mod sched_sim;
pub mod trees;
