pub mod error;
pub mod tensor;

pub use error::{Error, Result, TensorError};
pub mod mfen;
pub mod mamba;
pub mod mrn;
pub mod ibfm;
pub mod metrics;
pub mod info;
pub mod model;
pub mod data;
pub mod schedule;
pub mod config;
pub mod train;
pub mod run;
pub mod checkpoint;
pub mod report;
pub mod study;
pub mod verify;
