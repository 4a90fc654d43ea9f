//! Hosts simulation runs: persistence, recovery, human sessions, filtered
//! event feeds and the HTTP API on top of them.

pub mod api;
pub mod error;
pub mod feed;
pub mod manager;
pub mod manifest;
pub mod session;
pub mod table;

pub use error::ServiceError;
pub use manager::{AdvanceRequest, BackendSpec, CreateRun, CreatedRun, RunEntry, RunManager, StorySource, SubmitRequest};
pub use manifest::{RunHandle, RunManifest, RunStatus};
