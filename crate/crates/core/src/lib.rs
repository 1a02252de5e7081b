//! Map-plus-landmark navigation on a synthetic grid world.
//!
//! Registered views are turned into a spatial map, a value-iteration planner
//! produces a plan, the plan is compiled into a path signature with synthesized
//! features, and a recurrent attention policy follows it under noisy actuation.

pub mod autograd;
pub mod executor;
pub mod gridworld;
pub mod harness;
pub mod planner;
pub mod mapper;
pub mod metrics;
pub mod synthesizer;
