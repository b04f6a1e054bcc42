//! Simulation and analysis toolkit for meta-control of a two-link arm with
//! Stribeck friction and an unobservable friction memory.

pub mod config;
pub mod controller;
pub mod dynamics;
pub mod error;
pub mod experiment;
pub mod incrt;
pub mod linalg;
pub mod markov_gap;
pub mod memory_analysis;
pub mod shield;
pub mod stats;

pub use error::{Error, Result};
