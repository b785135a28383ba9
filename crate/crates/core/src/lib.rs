//! Multi-annotation triplet loss laboratory.
//!
//! Box geometry is clustered into discrete box labels, and a shared encoder
//! embedding is trained with a weighted sum of a class-label triplet loss and
//! a box-label triplet loss alongside classification and mask heads.

pub mod autodiff;
pub mod boxlabels;
pub mod data;
pub mod error;
pub mod nn;
pub mod traineval;
pub mod triplet;

pub use error::{Error, Result};
