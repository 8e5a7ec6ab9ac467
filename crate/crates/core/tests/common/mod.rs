//! Helpers shared by the integration test targets.
#![allow(dead_code)]

pub mod checks;
pub mod experiments;
pub mod grad;
pub mod oracle;
