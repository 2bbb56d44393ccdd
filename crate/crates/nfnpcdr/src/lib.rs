//! Cold-start cross-domain rating prediction with a set-based preference
//! encoder, an invertible latent refinement stack, a shared preference pool,
//! and a feature-wise modulated decoder.

pub mod commonpref;
pub mod data;
pub mod decoder;
pub mod error;
pub mod flows;
pub mod model;
pub mod npencoder;
pub mod numkernel;
pub mod par;
pub mod synthdata;
pub mod training;

pub use error::{Error, Result};
