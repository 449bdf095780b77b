//! Distillation dynamics toolkit: closed-form gradient-flow analysis, a
//! small deterministic training engine, confidence diagnostics, and an
//! experiment runner.

pub mod data;
pub mod diagnostics;
pub mod gradflow;
pub mod nn;
pub mod numerics;
pub mod runner;
