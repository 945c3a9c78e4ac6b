pub mod data;
pub mod error;
pub mod loss;
pub mod metrics;
pub mod mmcab;
pub mod modality;
pub mod numerics;
pub mod retinex;
pub mod run;

pub use error::{Error, Result};
