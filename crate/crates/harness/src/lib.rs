//! Experiment harness: condition tables, run store, reports and acceptance
//! checks for the routing study.

pub mod checks;
pub mod conditions;
pub mod config;
pub mod report;
pub mod runner;
pub mod selftest;
pub mod store;

// The language model allocates tens of megabytes per tape node; the system
// allocator returns those to the kernel on every free.
#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

#[derive(Debug, thiserror::Error)]
pub enum HarnessError {
    #[error("{0}")]
    Invalid(String),
    #[error(transparent)]
    Core(#[from] route_lab_core::Error),
    #[error("i/o: {0}")]
    Io(String),
    #[error("missing runs: {}", .0.join(", "))]
    Missing(Vec<String>),
}
