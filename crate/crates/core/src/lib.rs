//! Orchestration engine for challenges in which organizers train
//! participant-supplied codebases on sequestered data.

pub mod cli;
pub mod cohort;
pub mod domain;
pub mod metrics;
pub mod phase;
pub mod platform;
pub mod review;
pub mod sandbox;
pub mod service;
