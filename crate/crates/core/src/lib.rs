//! Paired-image super-resolution for electron microscope images.
//!
//! A high-resolution (HR) and a low-resolution (LR) acquisition of the same
//! specimen are registered, cut into corresponding patches and condensed into
//! a clustered paired library. New LR images are then super-resolved with a
//! library-based non-local means filter and scored against the bicubic
//! baseline.

pub mod error;
pub mod harness;
pub mod image;
pub mod io;
pub mod lbnlm;
pub mod library;
pub mod metrics;
pub mod registration;

pub use error::{Error, Result};
pub use image::GrayImage;
