//! Simulation of distributed multichannel active noise control in which each
//! node adapts only its own local filter and folds in its peers' filters
//! through fixed compensation filters, plus the centralized multichannel
//! FxLMS baseline and models of delayed or intermittent coefficient exchange.

pub mod compensation;
pub mod control;
pub mod dsp;
pub mod error;
pub mod harness;
pub mod network;
pub mod plant;

pub use error::{Error, Result};
