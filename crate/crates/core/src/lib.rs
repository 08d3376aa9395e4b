//! Two-level visual token pruning for vision-language-action inference:
//! action-level static pruning from previous-generation attention, frame
//! differencing and early-layer speculation; layer-level dynamic pruning from
//! EMA importance scores; and a velocity-driven controller that picks the
//! pruning budget. Runs on an instrumented toy transformer against a
//! synthetic tabletop episode simulator.

pub mod controller;
pub mod dynamic_pruner;
pub mod error;
pub mod flops;
pub mod grid;
pub mod harness;
pub mod layout;
pub mod model;
pub mod pipeline;
pub mod render;
pub mod runner;
pub mod scoring;
pub mod sim;
pub mod static_pruner;

pub use error::{Error, Result};
pub use layout::{TokenLayout, TokenSet, View};
pub use model::{Model, ModelConfig};
