//! Interaction-aware fine-tuning and evaluation for text-to-image diffusion.
//!
//! The crate is organised around the stages of the pipeline:
//!
//! - [`hoi_data`]: human-object-interaction annotations, prompt realignment,
//!   anchor-verb tables, class-balance weights, and interaction masks.
//! - [`attention_geometry`]: cross-attention map aggregation, centroids, and
//!   interaction-region extraction.
//! - [`guidance_losses`]: the guidance terms (triplet, alignment, direction,
//!   masked reconstruction) with analytic gradients.
//! - [`model_adapters`]: ports for the text encoder, image encoder, denoiser,
//!   latent codec and sampler, plus deterministic toy implementations and a
//!   backend registry.
//! - [`trainer`]: the fine-tuning loop (cross-attention parameters only),
//!   checkpoints and step metrics.
//! - [`eval_harness`]: generation-quality metrics behind pluggable scorer
//!   ports.
//! - [`synth`]: deterministic synthetic fixtures used by tests and demos.
//!
//! Numeric code is generic over [`scalar::Scalar`]; the pipeline itself runs
//! on the concrete aliases below.

pub mod attention_geometry;
pub mod eval_harness;
pub mod guidance_losses;
pub mod hoi_data;
pub mod model_adapters;
pub mod rng;
pub mod scalar;
pub mod synth;
pub mod trainer;

/// Scalar type the pipeline runs on.
pub type Real = f64;

/// Feature vector in the concrete pipeline scalar.
pub type Feature = guidance_losses::FeatureVector<Real>;

/// A single-channel map (attention map, mask weights) in the pipeline scalar.
pub type Map = ndarray::Array2<Real>;

/// Channel-major (C, H, W) image or latent tensor in the pipeline scalar.
pub type Volume = ndarray::Array3<Real>;

/// Interaction region in the pipeline scalar.
pub type Region = attention_geometry::InteractionRegion<Real>;

/// Centroid in the pipeline scalar.
pub type Point = attention_geometry::Centroid<Real>;
