//! Kinetic model of wealth exchange coupled to a knowledge variable.
//!
//! Each agent carries knowledge `x ≥ 0` and wealth `v ≥ 0`. Knowledge relaxes
//! toward a background level with multiplicative noise; wealth moves through
//! binary trades whose saving propensity and risk depend on the trader's
//! knowledge. The crate offers a Monte Carlo solver for the Boltzmann-type
//! model ([`boltzmann`]), a finite-volume solver for its Fokker-Planck limit
//! ([`fokker_planck`]) and the shared statistics ([`stats`]).

// `!(a > b)` guards are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod boltzmann;
pub mod fokker_planck;
pub mod model;
pub mod sampling;
pub mod stats;

pub use boltzmann::{
    InitSpec, KnowledgeInit, MomentRecord, Population, RunReport, SimConfig, SimError, Snapshot,
    WealthInit,
};
pub use fokker_planck::{
    Equation, Field2D, FpDiagnostics, FpError, FpRecord, FpRunOptions, Grid2D,
};
pub use model::{
    Agent, BackgroundSpec, FunctionSpec, KnowledgeParams, ModelError, ModelParams, TradeParams,
    ValidationReport, Violation,
};
pub use sampling::{RngStream, StreamRole};
pub use stats::{Axis, BinSpec, Histogram1D, Moments, Profile, TailFit};
