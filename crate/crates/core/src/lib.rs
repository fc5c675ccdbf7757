pub mod budget;
pub mod cli;
pub mod manifest;
pub mod metrics;
pub mod rnnt;
pub mod selection;
