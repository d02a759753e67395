//! Simulation of the history-tree Counting protocol for congested anonymous
//! dynamic networks with a leader.

pub mod counting;
pub mod engine;
pub mod harness;
pub mod history_tree;
pub mod messages;
pub mod protocol;
