//! Staged multi-agent group-chat simulation.
//!
//! Characters, resources and camps are declared in a [`StoryConfig`]. Each
//! character is driven by a verbal-strategist agent (or a human) that acts
//! through seven actions: think, perceive, choose, speak, summarize, reflect
//! and vote. Rounds move through update, private chatting, confidential
//! meeting and group chatting stages, followed by a single settlement.
//!
//! Every action is appended to a [`RunLog`], which is the input to the
//! evaluation suite in [`eval`].

pub mod actions;
pub mod backend;
pub mod engine;
pub mod eval;
pub mod model;
pub mod persona;
pub mod stories;

pub use backend::{BackendDescriptor, ChatBackend, ChatRequest, ChatResponse};
pub use engine::{RunOptions, RunOutcome, Simulation};
pub use model::{
    action_visible_to, ActionKind, ActionRecord, CharacterId, RunLog, SimTime, StageId,
    StoryConfig, Visibility, VisibilityScope,
};
pub use persona::PersonaState;
