//! Behavioral and structural simulator of a charge-domain CIM SRAM macro.

pub mod adc;
pub mod bundle;
pub mod characterize;
pub mod charge;
pub mod config;
pub mod dataflow;
pub mod dp_array;
pub mod energy;
pub mod engine;
pub mod error;
pub mod mapping;
pub mod mbiw;
pub mod network;
pub mod rng;
pub mod scalar;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type ElectricalParamsF64 = dp_array::ElectricalParams<f64>;
pub type MacroConfigF64 = config::MacroConfig<f64>;
pub type MacroInstanceF64 = engine::MacroInstance<f64>;
