//! Reference implementations shared by the oracle suites and the
//! acceptance run.
#![allow(dead_code)]

pub mod crf;
pub mod lift;
pub mod metrics;
