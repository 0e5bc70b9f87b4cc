//! Hierarchy description and the hourglass language model.

mod hierarchy;
mod hourglass;

pub use hierarchy::{Hierarchy, Level, Stage};
pub use hourglass::{ForwardOptions, Hourglass, ModelSpec, SfdSpec};
