//! Configuration files, binary snapshots and CSV tables.

pub mod config;
pub mod csv;
pub mod snapshot;

pub use config::{parse_config, parse_config_str, parse_config_with, ConfigError, RunConfig, TimeStep};
pub use snapshot::{read_snapshot, read_state, write_snapshot, write_state, Snapshot, SnapshotError};
