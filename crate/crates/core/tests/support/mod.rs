//! Check machinery shared by the gradient tests and the acceptance report.

#![allow(dead_code)]

pub mod chain;
pub mod primitives;
