//! Helpers shared by the gradient, model and acceptance test targets.
#![allow(dead_code)]

pub mod decoder;
pub mod gradients;
