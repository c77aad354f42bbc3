pub mod autodiff;
pub mod data;
pub mod error;
pub mod features;
pub mod federated;
pub mod graph;
pub mod labelprop;
pub mod metrics;
pub mod model;
pub mod params;
pub mod pipeline;
pub mod policy;
pub mod ppr;
pub mod synth;
pub mod tensor;

pub use error::{Error, Result};
