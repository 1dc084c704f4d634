//! Occupancy-grid sequence prediction with attention-augmented ConvLSTMs.
//!
//! The crate covers the whole pipeline: synthetic evidential occupancy
//! grids ([`dst`]), attention operators ([`attention`]) and their timing
//! ([`bench`]), recurrent cells ([`cells`]), the stacked predictive-coding
//! model and the PredRNN++ baseline ([`prednet`]), training ([`training`]),
//! checkpoints ([`checkpoint`]) and evaluation metrics ([`metrics`]).

pub mod attention;
pub mod bench;
pub mod cells;
pub mod checkpoint;
pub mod dst;
pub mod error;
pub mod metrics;
pub mod params;
pub mod prednet;
pub mod training;

pub use error::{Error, Result};
pub use gridcast_tensor as tensor;
