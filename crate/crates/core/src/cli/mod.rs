//! `tedb` command line: one JSON run config per task, with flags that
//! overlay it.

pub mod config;
pub mod run;
pub mod selfcheck;

pub use config::{validate_config, RunConfig, Task};
pub use run::{main_with, EXIT_DATA, EXIT_NUMERIC, EXIT_OK, EXIT_USAGE};
