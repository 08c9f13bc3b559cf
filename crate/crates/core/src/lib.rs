//! Disentangled content/attribute image-to-image translation trained on
//! unpaired data.
//!
//! Images are split into a content code living in a space shared by every
//! domain and a low-dimensional attribute vector specific to each domain.
//! Training swaps attributes between two unpaired images twice and asks the
//! result to match the inputs (cross-cycle consistency), alongside
//! adversarial, self-reconstruction, latent regression, KL, mode-seeking and
//! (multi-domain) classification objectives.

pub mod checkpoint;
pub mod data;
pub mod domain;
mod error;
pub mod gradcheck;
pub mod imageio;
pub mod inference;
pub mod losses;
pub mod metrics;
pub mod networks;
pub mod optim;
pub mod report;
pub mod rng;
pub mod training;

pub use domain::{
    one_hot, sample_attribute_prior, validate_config, AttributeCode, ContentCode, DomainCode,
    Hyperparameters, ImageTensor, Mode,
};
pub use error::{Error, Result};
pub use networks::{build_models, ArchConfig, ModelSet};
pub use rng::RngStream;
