//! Pipeline behind the `tco` command: running and evaluating scenes,
//! metrics reports, the synthetic benchmark and its ablations.

pub mod bench;
pub mod error;
pub mod pipeline;
pub mod report;

pub use error::{CliError, Result};
