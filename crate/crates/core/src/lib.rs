//! Active k-space acquisition at desk scale: k-space algebra, metrics, phantom data,
//! the cascaded reconstructor and spectral-map evaluator, joint training and the
//! closed-loop acquisition simulator.

pub mod acquisition;
pub mod data;
pub mod error;
pub mod evaluation;
pub mod kspace;
pub mod metrics;
pub mod models;
pub mod tensor_io;
pub mod training;

pub use error::{CoreError, Result};
pub use kspace::{ComplexImage, Domain, RealGrid, SamplingMask, SpectralMapStack};
