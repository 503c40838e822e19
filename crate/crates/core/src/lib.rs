//! Patch-rotation self-supervised pretext tasks.
//!
//! The crate covers the whole desk-scale pipeline: raster transforms
//! ([`imaging`]), pretext sample generation ([`pretext`]), a small
//! reverse-mode autodiff engine ([`tensor`]), CIFAR-style ResNet encoders and
//! GradCAM ([`models`]), and the pretraining / linear-evaluation / finetuning
//! protocols ([`training`]). Dataset loaders live in [`datasets`].

pub mod config;
pub mod datasets;
pub mod error;
pub mod imaging;
pub mod models;
pub mod pretext;
pub mod rng;
pub mod tensor;
pub mod training;

pub use error::{Error, ErrorClass, Result};
