pub mod config;
pub mod detection;
pub mod encoders;
mod error;
pub mod io;
pub mod modality;
pub mod msbt;
pub mod msta;
pub mod nn;
pub mod synth;

pub use error::{Error, FeatureFileError, Result};
pub use modality::{ModalityId, ModalitySet};
