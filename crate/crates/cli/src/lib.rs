//! Scenario runner for capergo: built-in scenarios, overrides and report output.

pub mod registry;
pub mod runner;
pub mod scenario;
