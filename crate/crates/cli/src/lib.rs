//! Command-line tooling around `tad-core`: campaign configuration,
//! lossless persistence, CSV export, and an HTTP API.

pub mod config;
pub mod error;
pub mod export;
pub mod persist;
pub mod server;
pub mod session;

pub use config::{CampaignConfig, InitialDesign, OracleMode};
pub use error::{CliError, Result};
pub use persist::{load_state, save_state, PersistedState, FORMAT_VERSION};
pub use session::{Session, Snapshot, StepReport};
