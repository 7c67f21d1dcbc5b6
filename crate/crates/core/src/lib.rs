//! Constrained fine-tuning of a style-based generator for portrait
//! stylization, multi-level pseudo-paired data generation, and controllable
//! multimodal / reference-guided stylization.

pub mod checkpoint;
pub mod discriminator;
pub mod encoder;
pub mod error;
pub mod faces;
pub mod finetune;
pub mod generator;
pub mod image;
pub mod inversion;
pub mod latent;
pub mod layers;
pub mod losses;
pub mod metrics;
pub mod optim;
pub mod params;
pub mod pseudo_pairs;
pub mod stylize;

pub use error::{Error, Result};
pub use generator::{Generator, GeneratorConfig, GeneratorRole};
pub use image::Image;
pub use latent::{broadcast_w, mix_codes, LatentCode, LatentSpace};
