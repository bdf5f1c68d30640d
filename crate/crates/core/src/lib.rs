//! Action-unit conditioned facial expression synthesis: an attention-masked
//! generator, a patch critic with an AU regression head, the training
//! objective, and the editing pipeline built on top of them.

pub mod error;
pub mod aucode;
pub mod facedata;
pub mod inference;
pub mod losses;
pub mod models;
pub mod numerics;
pub mod service;
pub mod training;

pub use error::{Error, Result};
