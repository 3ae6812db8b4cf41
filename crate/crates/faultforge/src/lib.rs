//! faultforge: a deterministic, desk-scale fault-injection laboratory.
//!
//! A tiny ARM-like ISA is executed on a model of a dual-issue out-of-order
//! window. Pulse-style faults are injected into the set of in-flight
//! instructions, workloads can be hardened with software countermeasures,
//! and observed corruptions are classified back to explanatory fault specs.

pub mod campaign;
pub mod classify;
pub mod fault;
pub mod harden;
pub mod isa;
pub mod report;
pub mod timing;
pub mod workloads;
