//! Backend ports and deterministic toy implementations.
//!
//! The pipeline talks to every heavyweight model through a small port: text
//! encoder, image encoder, denoiser, latent codec, and sampler. Each port
//! ships a toy implementation that runs in CPU milliseconds and is bit-exact
//! given a seed, so every loss, region, and training invariant can be
//! exercised without any pretrained weights. The toy denoiser is two frozen
//! conv blocks around one trainable cross-attention block, with a
//! hand-written backward pass for exactly the parameters the trainer is
//! allowed to touch.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use ndarray::{Array1, Array2, Array3, Array4};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::attention_geometry::{
    AttentionAccumulator, AttentionStack, Role, StepAggregation,
};
use crate::guidance_losses::FeatureVector;
use crate::hoi_data::PromptParts;
use crate::rng::stream;
use crate::{Feature, Map, Real, Volume};

/// Sampling steps used while generating images during training.
pub const DEFAULT_TRAIN_SAMPLING_STEPS: usize = 30;

/// Sampling steps used at inference time.
pub const DEFAULT_INFERENCE_STEPS: usize = 50;

/// Negative prompt applied to training-time generation.
pub const TRAIN_NEGATIVE_PROMPT: &str = "black and white image, extra arms, extra legs";

/// Negative prompt applied to inference-time generation (the training
/// negatives plus the general-purpose additions).
pub const INFERENCE_NEGATIVE_PROMPT: &str =
    "black and white image, extra arms, extra legs, naked, poor resolution";

/// Environment variable naming a directory of external backend manifests.
pub const BACKEND_DIR_ENV: &str = "VERBDIFF_BACKEND_DIR";

/// Latent/pixel shape of the toy stack (channels, height, width). The toy
/// codec is the identity, so images and latents share this shape.
pub const LATENT_SHAPE: (usize, usize, usize) = (4, 32, 32);

#[derive(Debug, Error)]
pub enum BackendError {
    #[error("text encoder got empty text")]
    EmptyText,
    #[error("{port} expected shape {expected:?}, got {got:?}")]
    Shape {
        port: &'static str,
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error("timestep {t} outside schedule of length {len}")]
    TimestepOutOfRange { t: usize, len: usize },
    #[error("cannot draw {steps} sampling steps from a {len}-step schedule")]
    BadStepCount { steps: usize, len: usize },
    #[error("denoiser exposes no parameter groups")]
    NoParameterGroups,
    #[error("denoiser has no cross_attention parameter group")]
    NoCrossAttentionGroup,
    #[error("unknown backend '{name}'; available: {available:?}")]
    UnknownBackend { name: String, available: Vec<String> },
    #[error("backend '{name}' cannot {operation}: {detail}")]
    Unsupported {
        name: String,
        operation: &'static str,
        detail: String,
    },
    #[error("backend manifest {path}: {message}")]
    Manifest { path: PathBuf, message: String },
    #[error("sampler failed at step {step}: {message}")]
    Sampler { step: usize, message: String },
    #[error("{context}: {message}")]
    Port {
        context: &'static str,
        message: String,
    },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("unknown tensor '{name}' for this denoiser")]
    UnknownTensor { name: String },
}

// ---------------------------------------------------------------------------
// Images
// ---------------------------------------------------------------------------

/// A channel-major (C, H, W) pixel grid with values nominally in [−1, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    data: Volume,
}

impl Image {
    pub fn new(data: Volume) -> Self {
        Self { data }
    }

    pub fn data(&self) -> &Volume {
        &self.data
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        let s = self.data.shape();
        (s[0], s[1], s[2])
    }

    /// FNV-1a over the shape and the raw f64 bit patterns; stable content
    /// key for caches and scripted evaluation ports.
    pub fn content_hash(&self) -> u64 {
        let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
        let mut eat = |byte: u8| {
            hash ^= u64::from(byte);
            hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
        };
        for &dim in self.data.shape() {
            for byte in (dim as u64).to_le_bytes() {
                eat(byte);
            }
        }
        for v in self.data.iter() {
            for byte in v.to_bits().to_le_bytes() {
                eat(byte);
            }
        }
        hash
    }

    /// Maps channels 0..4 onto RGBA with [−1, 1] → [0, 255]; missing
    /// channels render as 0 (alpha as 255).
    pub fn to_rgba(&self) -> image::RgbaImage {
        let (c, h, w) = self.shape();
        image::RgbaImage::from_fn(w as u32, h as u32, |x, y| {
            let mut px = [0u8, 0, 0, 255];
            for (slot, p) in px.iter_mut().enumerate() {
                if slot < c {
                    let v = self.data[(slot, y as usize, x as usize)];
                    *p = ((v.clamp(-1.0, 1.0) + 1.0) / 2.0 * 255.0).round() as u8;
                }
            }
            image::Rgba(px)
        })
    }

    pub fn save_png(&self, path: &Path) -> Result<(), BackendError> {
        self.to_rgba().save(path).map_err(|e| BackendError::Port {
            context: "png encode",
            message: format!("{path:?}: {e}"),
        })
    }

    /// Loads an RGBA PNG back into a 4-channel [−1, 1] grid (8-bit
    /// quantized, so round-trips are exact only to 1/255).
    pub fn from_png(path: &Path) -> Result<Self, BackendError> {
        let img = image::open(path)
            .map_err(|e| BackendError::Port {
                context: "png decode",
                message: format!("{path:?}: {e}"),
            })?
            .to_rgba8();
        let (w, h) = (img.width() as usize, img.height() as usize);
        let mut data = Array3::zeros((4, h, w));
        for (x, y, px) in img.enumerate_pixels() {
            for c in 0..4 {
                data[(c, y as usize, x as usize)] = f64::from(px.0[c]) / 255.0 * 2.0 - 1.0;
            }
        }
        Ok(Self::new(data))
    }
}

// ---------------------------------------------------------------------------
// Text conditioning
// ---------------------------------------------------------------------------

/// One prompt token with its byte span in the source text.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenSpan {
    pub text: String,
    pub start: usize,
    pub end: usize,
}

/// Everything the denoiser needs about a prompt: tokens, per-token
/// embeddings (rows), and optionally which token indices carry the
/// human/verb/object phrases.
#[derive(Debug, Clone)]
pub struct TextConditioning {
    pub prompt: String,
    pub tokens: Vec<TokenSpan>,
    pub embeddings: Array2<Real>,
    pub role_spans: BTreeMap<Role, Vec<usize>>,
}

/// Token indices whose byte span overlaps the given byte range.
fn tokens_overlapping(tokens: &[TokenSpan], range: &std::ops::Range<usize>) -> Vec<usize> {
    tokens
        .iter()
        .enumerate()
        .filter(|(_, t)| t.start < range.end && range.start < t.end)
        .map(|(i, _)| i)
        .collect()
}

// ---------------------------------------------------------------------------
// Ports
// ---------------------------------------------------------------------------

pub trait TextEncoderPort {
    /// Stable identifier for caches and reports.
    fn id(&self) -> &str;

    /// Unit-norm sentence embedding.
    fn encode(&self, text: &str) -> Result<Feature, BackendError>;

    /// Whitespace-delimited tokens with byte spans covering the input.
    fn tokenize(&self, text: &str) -> Vec<TokenSpan>;

    /// Per-token embeddings, one row per token from [`Self::tokenize`].
    fn token_embeddings(&self, text: &str) -> Result<Array2<Real>, BackendError>;

    /// Conditioning for an arbitrary prompt; no role spans are attached.
    fn conditioning_plain(&self, text: &str) -> Result<TextConditioning, BackendError> {
        let tokens = self.tokenize(text);
        let embeddings = self.token_embeddings(text)?;
        Ok(TextConditioning {
            prompt: text.to_string(),
            tokens,
            embeddings,
            role_spans: BTreeMap::new(),
        })
    }

    /// Conditioning for a templated prompt, with the human/verb/object
    /// byte ranges mapped onto token indices.
    fn conditioning(&self, parts: &PromptParts) -> Result<TextConditioning, BackendError> {
        let mut cond = self.conditioning_plain(&parts.text)?;
        cond.role_spans = BTreeMap::from([
            (Role::Human, tokens_overlapping(&cond.tokens, &parts.human)),
            (Role::Verb, tokens_overlapping(&cond.tokens, &parts.verb)),
            (Role::Object, tokens_overlapping(&cond.tokens, &parts.object)),
        ]);
        Ok(cond)
    }
}

pub trait ImageEncoderPort {
    fn id(&self) -> &str;

    /// Unit-norm image embedding.
    fn encode(&self, image: &Image) -> Result<Feature, BackendError>;
}

/// Tag separating the fine-tuned parameters from the frozen backbone.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParameterTag {
    CrossAttention,
    Other,
}

/// One named group of denoiser parameters.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParameterGroup {
    pub name: String,
    pub tag: ParameterTag,
    pub parameter_names: Vec<String>,
}

/// Denoiser output: a noise estimate plus, when requested, the per-token
/// cross-attention maps from this call.
#[derive(Debug, Clone)]
pub struct NoisePrediction {
    pub noise: Volume,
    pub attention: Option<BTreeMap<usize, Map>>,
}

pub trait DenoiserPort {
    fn predict_noise(
        &self,
        z_t: &Volume,
        t: usize,
        cond: &TextConditioning,
        capture_attention: bool,
    ) -> Result<NoisePrediction, BackendError>;

    fn parameter_groups(&self) -> Vec<ParameterGroup>;
}

/// Which parameters the trainer may update and which must stay frozen.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParameterSelection {
    pub trainable: Vec<String>,
    pub frozen: Vec<String>,
}

/// Selects exactly the `cross_attention`-tagged groups for training and
/// flags everything else frozen.
pub fn trainable_parameter_filter(
    denoiser: &dyn DenoiserPort,
) -> Result<ParameterSelection, BackendError> {
    let groups = denoiser.parameter_groups();
    if groups.is_empty() {
        return Err(BackendError::NoParameterGroups);
    }
    let mut trainable = Vec::new();
    let mut frozen = Vec::new();
    for group in &groups {
        match group.tag {
            ParameterTag::CrossAttention => trainable.extend(group.parameter_names.clone()),
            ParameterTag::Other => frozen.extend(group.parameter_names.clone()),
        }
    }
    if trainable.is_empty() {
        return Err(BackendError::NoCrossAttentionGroup);
    }
    Ok(ParameterSelection { trainable, frozen })
}

pub trait LatentCodecPort {
    fn encode_image(&self, image: &Image) -> Result<Volume, BackendError>;
    fn decode_latent(&self, z: &Volume) -> Result<Image, BackendError>;
}

pub trait SamplerPort {
    /// Runs the denoising loop and returns the decoded image, plus the
    /// step-aggregated attention stack when capture is requested.
    fn sample(
        &self,
        prompt: &str,
        negative_prompt: &str,
        steps: usize,
        seed: u64,
        capture_attention: bool,
    ) -> Result<(Image, Option<AttentionStack<Real>>), BackendError>;

    /// Decodes the one-step clean estimate x̂₀ = (z_t − √(1−ᾱ_t)·ε̂)/√ᾱ_t.
    fn one_step_clean_estimate(
        &self,
        z_t: &Volume,
        t: usize,
        text: &str,
    ) -> Result<Image, BackendError>;
}

// ---------------------------------------------------------------------------
// DDIM schedule
// ---------------------------------------------------------------------------

/// Deterministic (η = 0) DDIM schedule over a scaled-linear β ramp.
#[derive(Debug, Clone, PartialEq)]
pub struct DdimSchedule {
    alphas_cumprod: Vec<Real>,
}

impl Default for DdimSchedule {
    fn default() -> Self {
        Self::new(1000)
    }
}

impl DdimSchedule {
    /// β ramps from 0.00085 to 0.012 linearly in √β space; ᾱ_t is the
    /// running product of (1 − β).
    pub fn new(num_train_timesteps: usize) -> Self {
        assert!(num_train_timesteps >= 1, "schedule needs at least one step");
        let (start, end) = (0.00085f64.sqrt(), 0.012f64.sqrt());
        let n = num_train_timesteps;
        let mut alphas_cumprod = Vec::with_capacity(n);
        let mut running = 1.0;
        for i in 0..n {
            let frac = if n == 1 { 0.0 } else { i as Real / (n - 1) as Real };
            let beta = (start + (end - start) * frac).powi(2);
            running *= 1.0 - beta;
            alphas_cumprod.push(running);
        }
        Self { alphas_cumprod }
    }

    pub fn len(&self) -> usize {
        self.alphas_cumprod.len()
    }

    pub fn is_empty(&self) -> bool {
        self.alphas_cumprod.is_empty()
    }

    pub fn alpha_bar(&self, t: usize) -> Result<Real, BackendError> {
        self.alphas_cumprod
            .get(t)
            .copied()
            .ok_or(BackendError::TimestepOutOfRange {
                t,
                len: self.len(),
            })
    }

    /// Descending sub-sampled timesteps ending at 0, e.g. 30 of 1000 →
    /// [966, 933, …, 33, 0].
    pub fn timesteps(&self, steps: usize) -> Result<Vec<usize>, BackendError> {
        if steps == 0 || steps > self.len() {
            return Err(BackendError::BadStepCount {
                steps,
                len: self.len(),
            });
        }
        let ratio = self.len() / steps;
        Ok((0..steps).rev().map(|k| k * ratio).collect())
    }

    /// √ᾱ_t·z₀ + √(1−ᾱ_t)·ε.
    pub fn add_noise(
        &self,
        z0: &Volume,
        noise: &Volume,
        t: usize,
    ) -> Result<Volume, BackendError> {
        let ab = self.alpha_bar(t)?;
        Ok(z0.mapv(|v| v * ab.sqrt()) + noise.mapv(|v| v * (1.0 - ab).sqrt()))
    }

    /// x̂₀ = (z_t − √(1−ᾱ_t)·ε̂)/√ᾱ_t; with ε̂ = 0 this is z_t/√ᾱ_t.
    pub fn clean_estimate(
        &self,
        z_t: &Volume,
        eps_hat: &Volume,
        t: usize,
    ) -> Result<Volume, BackendError> {
        let ab = self.alpha_bar(t)?;
        let c = (1.0 - ab).sqrt();
        Ok((z_t - &eps_hat.mapv(|v| v * c)).mapv(|v| v / ab.sqrt()))
    }

    /// ∂x̂₀/∂ε̂ at timestep t: −√(1−ᾱ_t)/√ᾱ_t (elementwise).
    pub fn clean_estimate_noise_coeff(&self, t: usize) -> Result<Real, BackendError> {
        let ab = self.alpha_bar(t)?;
        Ok(-(1.0 - ab).sqrt() / ab.sqrt())
    }

    /// One deterministic DDIM update from t to `t_prev`; `None` finishes
    /// the chain and returns the clean estimate itself.
    pub fn ddim_step(
        &self,
        z_t: &Volume,
        eps_hat: &Volume,
        t: usize,
        t_prev: Option<usize>,
    ) -> Result<Volume, BackendError> {
        let x0 = self.clean_estimate(z_t, eps_hat, t)?;
        match t_prev {
            None => Ok(x0),
            Some(tp) => {
                let ab = self.alpha_bar(tp)?;
                Ok(x0.mapv(|v| v * ab.sqrt()) + eps_hat.mapv(|v| v * (1.0 - ab).sqrt()))
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Toy text encoder
// ---------------------------------------------------------------------------

/// Embedding width shared by the toy text and image encoders.
pub const TOY_TEXT_DIM: usize = 32;

/// Fixed seeds giving the toy encoders stable, "pretrained" weights that do
/// not move with the training seed.
const TOY_TEXT_SEED: u64 = 0x7e47_c0de;
const TOY_IMAGE_SEED: u64 = 0x1a6e_c0de;
/// Fixed seed for the toy denoiser's frozen conv backbone, mirroring how a
/// real pipeline fine-tunes the same pretrained weights regardless of the
/// run seed; only the cross-attention parameters follow the run seed.
const TOY_BACKBONE_SEED: u64 = 0x5d_bb0e;

/// Hashes each (lowercased) token to a fixed Gaussian vector; the sentence
/// embedding is the normalized token mean.
#[derive(Debug, Clone)]
pub struct ToyTextEncoder {
    id: String,
    seed: u64,
    dim: usize,
}

impl Default for ToyTextEncoder {
    fn default() -> Self {
        Self::new(TOY_TEXT_SEED)
    }
}

impl ToyTextEncoder {
    pub fn new(seed: u64) -> Self {
        Self::with_dim(seed, TOY_TEXT_DIM)
    }

    pub fn with_dim(seed: u64, dim: usize) -> Self {
        assert!(dim > 0, "embedding dim must be positive");
        Self {
            id: format!("toy-text-{seed:016x}-{dim}"),
            seed,
            dim,
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    fn token_vector(&self, token: &str) -> Array1<Real> {
        let mut rng = stream(self.seed, &format!("token/{}", token.to_lowercase()));
        let scale = 1.0 / (self.dim as Real).sqrt();
        Array1::from_iter((0..self.dim).map(|_| {
            let v: Real = rng.sample(StandardNormal);
            v * scale
        }))
    }
}

impl TextEncoderPort for ToyTextEncoder {
    fn id(&self) -> &str {
        &self.id
    }

    fn encode(&self, text: &str) -> Result<Feature, BackendError> {
        let rows = self.token_embeddings(text)?;
        let mean = rows.mean_axis(ndarray::Axis(0)).expect("nonempty rows");
        FeatureVector::normalized(mean).map_err(|e| BackendError::Port {
            context: "toy text encoder",
            message: e.to_string(),
        })
    }

    fn tokenize(&self, text: &str) -> Vec<TokenSpan> {
        let mut tokens = Vec::new();
        let mut start: Option<usize> = None;
        for (i, ch) in text.char_indices() {
            if ch.is_whitespace() {
                if let Some(s) = start.take() {
                    tokens.push(TokenSpan {
                        text: text[s..i].to_string(),
                        start: s,
                        end: i,
                    });
                }
            } else if start.is_none() {
                start = Some(i);
            }
        }
        if let Some(s) = start {
            tokens.push(TokenSpan {
                text: text[s..].to_string(),
                start: s,
                end: text.len(),
            });
        }
        tokens
    }

    fn token_embeddings(&self, text: &str) -> Result<Array2<Real>, BackendError> {
        let tokens = self.tokenize(text);
        if tokens.is_empty() {
            return Err(BackendError::EmptyText);
        }
        let mut rows = Array2::zeros((tokens.len(), self.dim));
        for (i, token) in tokens.iter().enumerate() {
            rows.row_mut(i).assign(&self.token_vector(&token.text));
        }
        Ok(rows)
    }
}

// ---------------------------------------------------------------------------
// Toy image encoder
// ---------------------------------------------------------------------------

/// Pooling grid the toy image encoder reduces any input to.
const IMAGE_POOL: (usize, usize) = (8, 8);
/// Channels the pooled grid keeps (missing input channels read as zero).
const IMAGE_CHANNEL_CAP: usize = 4;

/// Adaptive mean-pool to a fixed grid followed by a fixed random projection
/// and unit normalization. Differentiable by hand for the trainer.
#[derive(Debug, Clone)]
pub struct ToyImageEncoder {
    id: String,
    dim: usize,
    projection: Array2<Real>,
}

/// Cached intermediates from [`ToyImageEncoder::encode_cached`], consumed by
/// the backward pass.
#[derive(Debug, Clone)]
pub struct ImageEncodeCache {
    input_shape: (usize, usize, usize),
    raw: Array1<Real>,
}

/// Inclusive-exclusive input row/col range feeding one pooled cell.
fn pool_bucket(out_index: usize, out_len: usize, in_len: usize) -> (usize, usize) {
    let start = out_index * in_len / out_len;
    let end = ((out_index + 1) * in_len / out_len).max(start + 1).min(in_len);
    (start, end.max(start + 1))
}

impl Default for ToyImageEncoder {
    fn default() -> Self {
        Self::new(TOY_IMAGE_SEED)
    }
}

impl ToyImageEncoder {
    pub fn new(seed: u64) -> Self {
        Self::with_dim(seed, TOY_TEXT_DIM)
    }

    pub fn with_dim(seed: u64, dim: usize) -> Self {
        assert!(dim > 0, "embedding dim must be positive");
        let cols = IMAGE_CHANNEL_CAP * IMAGE_POOL.0 * IMAGE_POOL.1;
        let mut rng = stream(seed, "image-projection");
        let scale = 1.0 / (cols as Real).sqrt();
        let projection = Array2::from_shape_fn((dim, cols), |_| {
            let v: Real = rng.sample(StandardNormal);
            v * scale
        });
        Self {
            id: format!("toy-image-{seed:016x}-{dim}"),
            dim,
            projection,
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    fn pooled(&self, image: &Image) -> Array1<Real> {
        let (c_in, h, w) = image.shape();
        let (ph, pw) = IMAGE_POOL;
        let mut v = Array1::zeros(IMAGE_CHANNEL_CAP * ph * pw);
        for c in 0..IMAGE_CHANNEL_CAP.min(c_in) {
            for py in 0..ph {
                let (y0, y1) = pool_bucket(py, ph, h);
                for px in 0..pw {
                    let (x0, x1) = pool_bucket(px, pw, w);
                    let mut sum = 0.0;
                    for y in y0..y1 {
                        for x in x0..x1 {
                            sum += image.data()[(c, y, x)];
                        }
                    }
                    v[(c * ph + py) * pw + px] = sum / ((y1 - y0) * (x1 - x0)) as Real;
                }
            }
        }
        v
    }

    /// Encode while keeping what the backward pass needs.
    pub fn encode_cached(
        &self,
        image: &Image,
    ) -> Result<(Feature, ImageEncodeCache), BackendError> {
        let pooled = self.pooled(image);
        let raw = self.projection.dot(&pooled);
        let feature =
            FeatureVector::normalized(raw.clone()).map_err(|e| BackendError::Port {
                context: "toy image encoder",
                message: e.to_string(),
            })?;
        Ok((
            feature,
            ImageEncodeCache {
                input_shape: image.shape(),
                raw,
            },
        ))
    }

    /// Pixels whose encoding points along `target`: the projection's
    /// transpose image of the vector, held constant over each pooling
    /// bucket so the mean-pool recovers it exactly. Because the projection
    /// rows are near-orthonormal, `encode(feature_pixels(v)) ≈ v̂`. Fixture
    /// builders use this to plant a chosen feature direction in an image.
    pub fn feature_pixels(&self, target: &Array1<Real>, shape: (usize, usize, usize)) -> Volume {
        let cells = self.projection.t().dot(target);
        let (c_n, h, w) = shape;
        let (ph, pw) = IMAGE_POOL;
        let mut pixels = Array3::zeros((c_n, h, w));
        for c in 0..IMAGE_CHANNEL_CAP.min(c_n) {
            for py in 0..ph {
                let (y0, y1) = pool_bucket(py, ph, h);
                for px in 0..pw {
                    let (x0, x1) = pool_bucket(px, pw, w);
                    let value = cells[(c * ph + py) * pw + px];
                    for y in y0..y1 {
                        for x in x0..x1 {
                            pixels[(c, y, x)] = value;
                        }
                    }
                }
            }
        }
        pixels
    }

    /// ∂(feature)/∂(image) applied to an upstream gradient: through the
    /// normalization Jacobian, the projection transpose, and the pool
    /// spread (each input pixel contributed 1/|bucket| to its cell).
    pub fn backward(&self, cache: &ImageEncodeCache, d_feature: &Array1<Real>) -> Volume {
        let norm = cache.raw.dot(&cache.raw).sqrt();
        let unit = cache.raw.mapv(|v| v / norm);
        let along = unit.dot(d_feature);
        let d_raw = (d_feature - &unit.mapv(|v| v * along)).mapv(|v| v / norm);
        let d_pooled = self.projection.t().dot(&d_raw);

        let (c_in, h, w) = cache.input_shape;
        let (ph, pw) = IMAGE_POOL;
        let mut d_image = Array3::zeros((c_in, h, w));
        for c in 0..IMAGE_CHANNEL_CAP.min(c_in) {
            for py in 0..ph {
                let (y0, y1) = pool_bucket(py, ph, h);
                for px in 0..pw {
                    let (x0, x1) = pool_bucket(px, pw, w);
                    let share =
                        d_pooled[(c * ph + py) * pw + px] / ((y1 - y0) * (x1 - x0)) as Real;
                    for y in y0..y1 {
                        for x in x0..x1 {
                            d_image[(c, y, x)] += share;
                        }
                    }
                }
            }
        }
        d_image
    }
}

impl ImageEncoderPort for ToyImageEncoder {
    fn id(&self) -> &str {
        &self.id
    }

    fn encode(&self, image: &Image) -> Result<Feature, BackendError> {
        Ok(self.encode_cached(image)?.0)
    }
}

// ---------------------------------------------------------------------------
// Identity latent codec
// ---------------------------------------------------------------------------

/// Pass-through codec: the toy pipeline works directly in pixel space.
#[derive(Debug, Clone, Copy, Default)]
pub struct IdentityCodec;

impl LatentCodecPort for IdentityCodec {
    fn encode_image(&self, image: &Image) -> Result<Volume, BackendError> {
        Ok(image.data().clone())
    }

    fn decode_latent(&self, z: &Volume) -> Result<Image, BackendError> {
        Ok(Image::new(z.clone()))
    }
}

// ---------------------------------------------------------------------------
// Toy denoiser
// ---------------------------------------------------------------------------

const MID_CHANNELS: usize = 8;
const ATTN_DIM: usize = 16;
const ATTN_GRID: usize = 16;
const ATTN_POSITIONS: usize = ATTN_GRID * ATTN_GRID;

/// Names of the trainable cross-attention tensors, in export order.
pub const ATTN_PARAM_NAMES: [&str; 4] = [
    "cross_attention.w_k",
    "cross_attention.w_o",
    "cross_attention.w_q",
    "cross_attention.w_v",
];

const BACKBONE_PARAM_NAMES: [&str; 4] = [
    "backbone.conv1.weight",
    "backbone.conv1.bias",
    "backbone.conv2.weight",
    "backbone.conv2.bias",
];

/// Two frozen 3×3 conv blocks around one trainable cross-attention block:
/// conv → SiLU → 2× mean-pool (+ sinusoidal time bias) → attention over
/// prompt tokens with a residual → 2× nearest-neighbor upsample → conv.
#[derive(Debug, Clone)]
pub struct ToyDenoiser {
    conv1_w: Array4<Real>,
    conv1_b: Array1<Real>,
    conv2_w: Array4<Real>,
    conv2_b: Array1<Real>,
    w_q: Array2<Real>,
    w_k: Array2<Real>,
    w_v: Array2<Real>,
    w_o: Array2<Real>,
}

/// Intermediates of one cached forward pass, consumed by
/// [`ToyDenoiser::backward`].
#[derive(Debug, Clone)]
pub struct DenoiserCache {
    embeddings: Array2<Real>,
    phi: Array2<Real>,
    q: Array2<Real>,
    k: Array2<Real>,
    v: Array2<Real>,
    attn: Array2<Real>,
    attn_out: Array2<Real>,
}

/// Gradients (or optimizer moments) for the cross-attention tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct AttnGrads {
    pub w_q: Array2<Real>,
    pub w_k: Array2<Real>,
    pub w_v: Array2<Real>,
    pub w_o: Array2<Real>,
}

impl AttnGrads {
    pub fn zeros(text_dim: usize) -> Self {
        Self {
            w_q: Array2::zeros((MID_CHANNELS, ATTN_DIM)),
            w_k: Array2::zeros((text_dim, ATTN_DIM)),
            w_v: Array2::zeros((text_dim, MID_CHANNELS)),
            w_o: Array2::zeros((MID_CHANNELS, MID_CHANNELS)),
        }
    }

    pub fn accumulate(&mut self, other: &Self) {
        self.w_q += &other.w_q;
        self.w_k += &other.w_k;
        self.w_v += &other.w_v;
        self.w_o += &other.w_o;
    }

    pub fn scale(&mut self, factor: Real) {
        for tensor in [&mut self.w_q, &mut self.w_k, &mut self.w_v, &mut self.w_o] {
            tensor.mapv_inplace(|v| v * factor);
        }
    }

    /// Sum of squared entries over all four tensors.
    pub fn squared_norm(&self) -> Real {
        [&self.w_q, &self.w_k, &self.w_v, &self.w_o]
            .iter()
            .map(|t| t.iter().map(|v| v * v).sum::<Real>())
            .sum()
    }

    /// Tensor lookup by its [`ATTN_PARAM_NAMES`] entry.
    pub fn by_name(&self, name: &str) -> Option<&Array2<Real>> {
        match name {
            "cross_attention.w_q" => Some(&self.w_q),
            "cross_attention.w_k" => Some(&self.w_k),
            "cross_attention.w_v" => Some(&self.w_v),
            "cross_attention.w_o" => Some(&self.w_o),
            _ => None,
        }
    }

    /// Mutable variant of [`Self::by_name`].
    pub fn by_name_mut(&mut self, name: &str) -> Option<&mut Array2<Real>> {
        match name {
            "cross_attention.w_q" => Some(&mut self.w_q),
            "cross_attention.w_k" => Some(&mut self.w_k),
            "cross_attention.w_v" => Some(&mut self.w_v),
            "cross_attention.w_o" => Some(&mut self.w_o),
            _ => None,
        }
    }
}

fn gaussian_tensor<D: ndarray::Dimension>(
    shape: impl ndarray::ShapeBuilder<Dim = D>,
    fan_in: usize,
    rng: &mut impl Rng,
) -> ndarray::Array<Real, D> {
    let scale = 1.0 / (fan_in as Real).sqrt();
    ndarray::Array::from_shape_simple_fn(shape, || {
        let v: Real = rng.sample(StandardNormal);
        v * scale
    })
}

/// Same-padding 3×3 convolution, channel-major.
fn conv3x3(x: &Volume, w: &Array4<Real>, b: &Array1<Real>) -> Volume {
    let (c_in, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let c_out = w.shape()[0];
    let mut out = Array3::zeros((c_out, h, wd));
    for o in 0..c_out {
        for y in 0..h {
            for xx in 0..wd {
                let mut acc = b[o];
                for i in 0..c_in {
                    for ky in 0..3 {
                        let sy = y as isize + ky as isize - 1;
                        if sy < 0 || sy >= h as isize {
                            continue;
                        }
                        for kx in 0..3 {
                            let sx = xx as isize + kx as isize - 1;
                            if sx < 0 || sx >= wd as isize {
                                continue;
                            }
                            acc += w[(o, i, ky, kx)] * x[(i, sy as usize, sx as usize)];
                        }
                    }
                }
                out[(o, y, xx)] = acc;
            }
        }
    }
    out
}

/// Gradient of [`conv3x3`] with respect to its input.
fn conv3x3_input_grad(d_out: &Volume, w: &Array4<Real>) -> Volume {
    let (c_out, h, wd) = (d_out.shape()[0], d_out.shape()[1], d_out.shape()[2]);
    let c_in = w.shape()[1];
    let mut d_in = Array3::zeros((c_in, h, wd));
    for o in 0..c_out {
        for y in 0..h {
            for xx in 0..wd {
                let g = d_out[(o, y, xx)];
                for i in 0..c_in {
                    for ky in 0..3 {
                        let sy = y as isize + ky as isize - 1;
                        if sy < 0 || sy >= h as isize {
                            continue;
                        }
                        for kx in 0..3 {
                            let sx = xx as isize + kx as isize - 1;
                            if sx < 0 || sx >= wd as isize {
                                continue;
                            }
                            d_in[(i, sy as usize, sx as usize)] += g * w[(o, i, ky, kx)];
                        }
                    }
                }
            }
        }
    }
    d_in
}

/// 2×2 mean-pool halving each spatial dimension.
fn avgpool2(x: &Volume) -> Volume {
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    Array3::from_shape_fn((c, h / 2, w / 2), |(ch, y, xx)| {
        (x[(ch, 2 * y, 2 * xx)]
            + x[(ch, 2 * y, 2 * xx + 1)]
            + x[(ch, 2 * y + 1, 2 * xx)]
            + x[(ch, 2 * y + 1, 2 * xx + 1)])
            / 4.0
    })
}

/// 2× nearest-neighbor upsample.
fn upsample2(x: &Volume) -> Volume {
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    Array3::from_shape_fn((c, h * 2, w * 2), |(ch, y, xx)| x[(ch, y / 2, xx / 2)])
}

fn upsample2_backward(d: &Volume) -> Volume {
    let (c, h, w) = (d.shape()[0], d.shape()[1], d.shape()[2]);
    Array3::from_shape_fn((c, h / 2, w / 2), |(ch, y, xx)| {
        d[(ch, 2 * y, 2 * xx)]
            + d[(ch, 2 * y, 2 * xx + 1)]
            + d[(ch, 2 * y + 1, 2 * xx)]
            + d[(ch, 2 * y + 1, 2 * xx + 1)]
    })
}

fn sigmoid(x: Real) -> Real {
    1.0 / (1.0 + (-x).exp())
}

fn silu(x: Real) -> Real {
    x * sigmoid(x)
}

/// Row-wise softmax (over tokens, per spatial position).
fn softmax_rows(mut s: Array2<Real>) -> Array2<Real> {
    for mut row in s.rows_mut() {
        let max = row.iter().cloned().fold(Real::NEG_INFINITY, Real::max);
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
    s
}

impl ToyDenoiser {
    /// The conv backbone comes from the fixed [`TOY_BACKBONE_SEED`] — it
    /// plays the role of pretrained weights and is identical for every
    /// `seed` — while the trainable cross-attention tensors are drawn from
    /// `seed` like any fine-tune initialization.
    pub fn new(seed: u64) -> Self {
        let rng_for = |label: &str| stream(seed, &format!("denoiser/{label}"));
        let backbone_for = |label: &str| stream(TOY_BACKBONE_SEED, &format!("denoiser/{label}"));
        let (c_lat, _, _) = LATENT_SHAPE;
        Self {
            conv1_w: gaussian_tensor(
                (MID_CHANNELS, c_lat, 3, 3),
                c_lat * 9,
                &mut backbone_for("conv1.weight"),
            ),
            conv1_b: gaussian_tensor(MID_CHANNELS, c_lat * 9, &mut backbone_for("conv1.bias")),
            conv2_w: gaussian_tensor(
                (c_lat, MID_CHANNELS, 3, 3),
                MID_CHANNELS * 9,
                &mut backbone_for("conv2.weight"),
            ),
            conv2_b: gaussian_tensor(c_lat, MID_CHANNELS * 9, &mut backbone_for("conv2.bias")),
            w_q: gaussian_tensor((MID_CHANNELS, ATTN_DIM), MID_CHANNELS, &mut rng_for("w_q")),
            w_k: gaussian_tensor((TOY_TEXT_DIM, ATTN_DIM), TOY_TEXT_DIM, &mut rng_for("w_k")),
            w_v: gaussian_tensor(
                (TOY_TEXT_DIM, MID_CHANNELS),
                TOY_TEXT_DIM,
                &mut rng_for("w_v"),
            ),
            w_o: gaussian_tensor(
                (MID_CHANNELS, MID_CHANNELS),
                MID_CHANNELS,
                &mut rng_for("w_o"),
            ),
        }
    }

    /// Grid resolution of the captured attention maps.
    pub fn attention_resolution(&self) -> (usize, usize) {
        (ATTN_GRID, ATTN_GRID)
    }

    /// SHA-256 over the frozen backbone tensors, little-endian f64 bytes in
    /// declaration order. Training must never change this.
    pub fn frozen_checksum(&self) -> String {
        let mut hasher = Sha256::new();
        for tensor in [
            self.conv1_w.iter().collect::<Vec<_>>(),
            self.conv1_b.iter().collect(),
            self.conv2_w.iter().collect(),
            self.conv2_b.iter().collect(),
        ] {
            for v in tensor {
                hasher.update(v.to_le_bytes());
            }
        }
        format!("{:x}", hasher.finalize())
    }

    /// The trainable tensors by name, for checkpointing.
    pub fn export_tensors(&self) -> BTreeMap<String, (Vec<usize>, Vec<Real>)> {
        let mut out = BTreeMap::new();
        for (name, tensor) in [
            ("cross_attention.w_k", &self.w_k),
            ("cross_attention.w_o", &self.w_o),
            ("cross_attention.w_q", &self.w_q),
            ("cross_attention.w_v", &self.w_v),
        ] {
            out.insert(
                name.to_string(),
                (tensor.shape().to_vec(), tensor.iter().copied().collect()),
            );
        }
        out
    }

    /// Restores trainable tensors exported by [`Self::export_tensors`].
    pub fn import_tensors(
        &mut self,
        tensors: &BTreeMap<String, (Vec<usize>, Vec<Real>)>,
    ) -> Result<(), BackendError> {
        for (name, (shape, data)) in tensors {
            let target = match name.as_str() {
                "cross_attention.w_q" => &mut self.w_q,
                "cross_attention.w_k" => &mut self.w_k,
                "cross_attention.w_v" => &mut self.w_v,
                "cross_attention.w_o" => &mut self.w_o,
                _ => return Err(BackendError::UnknownTensor { name: name.clone() }),
            };
            if shape != target.shape() {
                return Err(BackendError::Shape {
                    port: "denoiser tensor import",
                    expected: target.shape().to_vec(),
                    got: shape.clone(),
                });
            }
            *target = Array2::from_shape_vec((shape[0], shape[1]), data.clone())
                .expect("shape/data agreement checked above");
        }
        Ok(())
    }

    /// Mutable views of the trainable tensors, keyed like
    /// [`ATTN_PARAM_NAMES`]; the optimizer's update surface.
    pub fn attn_tensors_mut(&mut self) -> [(&'static str, &mut Array2<Real>); 4] {
        [
            ("cross_attention.w_k", &mut self.w_k),
            ("cross_attention.w_o", &mut self.w_o),
            ("cross_attention.w_q", &mut self.w_q),
            ("cross_attention.w_v", &mut self.w_v),
        ]
    }

    pub fn text_dim(&self) -> usize {
        self.w_k.shape()[0]
    }

    fn check_input(&self, z_t: &Volume, cond: &TextConditioning) -> Result<(), BackendError> {
        let (c, h, w) = LATENT_SHAPE;
        if z_t.shape() != [c, h, w] {
            return Err(BackendError::Shape {
                port: "denoiser input",
                expected: vec![c, h, w],
                got: z_t.shape().to_vec(),
            });
        }
        if cond.embeddings.nrows() == 0 || cond.embeddings.ncols() != self.text_dim() {
            return Err(BackendError::Shape {
                port: "denoiser conditioning",
                expected: vec![1, self.text_dim()],
                got: vec![cond.embeddings.nrows(), cond.embeddings.ncols()],
            });
        }
        Ok(())
    }

    /// Sinusoidal per-channel time bias added after pooling.
    fn time_bias(t: usize) -> [Real; MID_CHANNELS] {
        let mut bias = [0.0; MID_CHANNELS];
        for (c, b) in bias.iter_mut().enumerate() {
            let freq = 10000f64.powf(c as Real / MID_CHANNELS as Real);
            *b = (t as Real / freq).sin();
        }
        bias
    }

    fn forward_impl(
        &self,
        z_t: &Volume,
        t: usize,
        cond: &TextConditioning,
        capture_attention: bool,
        keep_cache: bool,
    ) -> Result<(NoisePrediction, Option<DenoiserCache>), BackendError> {
        self.check_input(z_t, cond)?;
        let a1 = conv3x3(z_t, &self.conv1_w, &self.conv1_b).mapv(silu);
        let pooled = avgpool2(&a1);

        let bias = Self::time_bias(t);
        let mut phi = Array2::zeros((ATTN_POSITIONS, MID_CHANNELS));
        for c in 0..MID_CHANNELS {
            for y in 0..ATTN_GRID {
                for x in 0..ATTN_GRID {
                    phi[(y * ATTN_GRID + x, c)] = pooled[(c, y, x)] + bias[c];
                }
            }
        }

        let e = &cond.embeddings;
        let q = phi.dot(&self.w_q);
        let k = e.dot(&self.w_k);
        let v = e.dot(&self.w_v);
        let inv_sqrt_d = 1.0 / (ATTN_DIM as Real).sqrt();
        let attn = softmax_rows(q.dot(&k.t()).mapv(|s| s * inv_sqrt_d));
        let attn_out = attn.dot(&v);
        let phi2 = &phi + &attn_out.dot(&self.w_o);

        let mut mid = Array3::zeros((MID_CHANNELS, ATTN_GRID, ATTN_GRID));
        for c in 0..MID_CHANNELS {
            for y in 0..ATTN_GRID {
                for x in 0..ATTN_GRID {
                    mid[(c, y, x)] = phi2[(y * ATTN_GRID + x, c)];
                }
            }
        }
        let up = upsample2(&mid);
        let noise = conv3x3(&up, &self.conv2_w, &self.conv2_b);

        let attention = capture_attention.then(|| {
            (0..e.nrows())
                .map(|token| {
                    let map = Array2::from_shape_fn((ATTN_GRID, ATTN_GRID), |(y, x)| {
                        attn[(y * ATTN_GRID + x, token)]
                    });
                    (token, map)
                })
                .collect::<BTreeMap<usize, Map>>()
        });
        let cache = keep_cache.then(|| DenoiserCache {
            embeddings: e.clone(),
            phi,
            q,
            k,
            v,
            attn,
            attn_out,
        });
        Ok((NoisePrediction { noise, attention }, cache))
    }

    /// Forward pass that keeps the intermediates needed for
    /// [`Self::backward`].
    pub fn forward_cached(
        &self,
        z_t: &Volume,
        t: usize,
        cond: &TextConditioning,
        capture_attention: bool,
    ) -> Result<(NoisePrediction, DenoiserCache), BackendError> {
        let (pred, cache) = self.forward_impl(z_t, t, cond, capture_attention, true)?;
        Ok((pred, cache.expect("cache requested")))
    }

    /// Gradients of the cross-attention tensors given ∂L/∂ε̂. The backbone
    /// is frozen, so only the attention parameters come back.
    pub fn backward(&self, cache: &DenoiserCache, d_noise: &Volume) -> AttnGrads {
        let d_up = conv3x3_input_grad(d_noise, &self.conv2_w);
        let d_mid = upsample2_backward(&d_up);
        let mut d_phi2 = Array2::zeros((ATTN_POSITIONS, MID_CHANNELS));
        for c in 0..MID_CHANNELS {
            for y in 0..ATTN_GRID {
                for x in 0..ATTN_GRID {
                    d_phi2[(y * ATTN_GRID + x, c)] = d_mid[(c, y, x)];
                }
            }
        }

        // phi2 = phi + attn_out · W_o
        let d_w_o = cache.attn_out.t().dot(&d_phi2);
        let d_attn_out = d_phi2.dot(&self.w_o.t());

        // attn_out = A · V
        let d_attn = d_attn_out.dot(&cache.v.t());
        let d_v = cache.attn.t().dot(&d_attn_out);

        // Row-softmax backward: dS = A ⊙ (dA − (A·dA per row)).
        let mut d_s = Array2::zeros(d_attn.raw_dim());
        for p in 0..ATTN_POSITIONS {
            let row = cache.attn.row(p);
            let d_row = d_attn.row(p);
            let dot = row.dot(&d_row);
            for j in 0..row.len() {
                d_s[(p, j)] = row[j] * (d_row[j] - dot);
            }
        }
        let inv_sqrt_d = 1.0 / (ATTN_DIM as Real).sqrt();
        d_s.mapv_inplace(|v| v * inv_sqrt_d);

        // S = Q·Kᵀ/√d
        let d_q = d_s.dot(&cache.k);
        let d_k = d_s.t().dot(&cache.q);

        let d_w_q = cache.phi.t().dot(&d_q);
        let d_w_k = cache.embeddings.t().dot(&d_k);
        let d_w_v = cache.embeddings.t().dot(&d_v);

        AttnGrads {
            w_q: d_w_q,
            w_k: d_w_k,
            w_v: d_w_v,
            w_o: d_w_o,
        }
    }
}

impl DenoiserPort for ToyDenoiser {
    fn predict_noise(
        &self,
        z_t: &Volume,
        t: usize,
        cond: &TextConditioning,
        capture_attention: bool,
    ) -> Result<NoisePrediction, BackendError> {
        Ok(self.forward_impl(z_t, t, cond, capture_attention, false)?.0)
    }

    fn parameter_groups(&self) -> Vec<ParameterGroup> {
        vec![
            ParameterGroup {
                name: "cross_attention".to_string(),
                tag: ParameterTag::CrossAttention,
                parameter_names: ATTN_PARAM_NAMES.iter().map(|s| s.to_string()).collect(),
            },
            ParameterGroup {
                name: "backbone".to_string(),
                tag: ParameterTag::Other,
                parameter_names: BACKBONE_PARAM_NAMES.iter().map(|s| s.to_string()).collect(),
            },
        ]
    }
}

// ---------------------------------------------------------------------------
// Toy backend bundle and sampling
// ---------------------------------------------------------------------------

/// The full deterministic toy stack behind one training seed. Text and
/// image encoders use fixed internal seeds (they play the role of
/// pretrained, frozen models); the denoiser is initialized from `seed`.
#[derive(Debug, Clone)]
pub struct ToyBackend {
    pub text: ToyTextEncoder,
    pub image: ToyImageEncoder,
    pub denoiser: ToyDenoiser,
    pub codec: IdentityCodec,
    pub schedule: DdimSchedule,
}

/// A generation whose final denoiser call kept its cache, so guidance
/// losses on the clean estimate can reach the attention parameters.
#[derive(Debug, Clone)]
pub struct TracedSample {
    /// The finished sample (clean estimate of the last step).
    pub image: Image,
    /// Step-aggregated attention stack with the conditioning's role spans.
    pub stack: AttentionStack<Real>,
    /// The differentiable clean estimate x̂₀ formed at `traced_t`.
    pub estimate: Image,
    /// Timestep of the traced denoiser call.
    pub traced_t: usize,
    /// Cache of that call, for [`ToyDenoiser::backward`].
    pub cache: DenoiserCache,
    /// ∂x̂₀/∂ε̂ at the traced call.
    pub noise_coeff: Real,
}

impl ToyBackend {
    pub const NAME: &'static str = "toy";

    pub fn new(seed: u64) -> Self {
        Self {
            text: ToyTextEncoder::default(),
            image: ToyImageEncoder::default(),
            denoiser: ToyDenoiser::new(seed),
            codec: IdentityCodec,
            schedule: DdimSchedule::default(),
        }
    }

    /// Conditioning with role spans for a templated triplet prompt.
    pub fn conditioning(&self, parts: &PromptParts) -> Result<TextConditioning, BackendError> {
        self.text.conditioning(parts)
    }

    fn initial_latent(&self, seed: u64) -> Volume {
        let (c, h, w) = LATENT_SHAPE;
        let mut rng = stream(seed, "ddim/init");
        Array3::from_shape_simple_fn((c, h, w), || rng.sample(StandardNormal))
    }

    /// Full DDIM loop. The final step returns the clean estimate, so the
    /// sample equals x̂₀ of the last denoiser call.
    pub fn sample_conditioned(
        &self,
        cond: &TextConditioning,
        steps: usize,
        seed: u64,
        capture_attention: bool,
        aggregation: StepAggregation,
    ) -> Result<(Image, Option<AttentionStack<Real>>), BackendError> {
        let timesteps = self.schedule.timesteps(steps)?;
        let mut z = self.initial_latent(seed);
        let mut acc = AttentionAccumulator::new(aggregation, self.denoiser.attention_resolution());
        for (i, &t) in timesteps.iter().enumerate() {
            let pred = self
                .denoiser
                .predict_noise(&z, t, cond, capture_attention)
                .map_err(|e| BackendError::Sampler {
                    step: i,
                    message: e.to_string(),
                })?;
            if let Some(maps) = &pred.attention {
                acc.push_step(maps);
            }
            z = self
                .schedule
                .ddim_step(&z, &pred.noise, t, timesteps.get(i + 1).copied())?;
        }
        let image = self.codec.decode_latent(&z)?;
        let stack = if capture_attention {
            Some(
                acc.finish(cond.role_spans.clone())
                    .map_err(|e| BackendError::Port {
                        context: "attention aggregation",
                        message: e.to_string(),
                    })?,
            )
        } else {
            None
        };
        Ok((image, stack))
    }

    /// Like [`Self::sample_conditioned`] with attention always captured,
    /// but the final step of the trajectory also keeps its denoiser cache
    /// and exposes its clean estimate as the differentiable stand-in for
    /// the generated image. Because the sampler's own last step returns
    /// that same estimate, the differentiable image IS the sampled image;
    /// gradients flow through the last denoiser call only (a one-step
    /// truncation of backprop through the sampler).
    pub fn sample_traced(
        &self,
        cond: &TextConditioning,
        steps: usize,
        seed: u64,
        aggregation: StepAggregation,
    ) -> Result<TracedSample, BackendError> {
        let timesteps = self.schedule.timesteps(steps)?;
        // TEMPORARY experiment hook, removed before shipping.
        let traced_index = match std::env::var("VD_TRACE").ok().as_deref() {
            Some("uniform") => stream(seed, "ddim/traced-step").gen_range(0..timesteps.len()),
            Some(k) if k.parse::<usize>().is_ok() => {
                let k: usize = k.parse().unwrap();
                let k = k.min(timesteps.len());
                timesteps.len() - 1 - stream(seed, "ddim/traced-step").gen_range(0..k)
            }
            _ => timesteps.len() - 1,
        };
        let mut z = self.initial_latent(seed);
        let mut acc = AttentionAccumulator::new(aggregation, self.denoiser.attention_resolution());
        let mut traced: Option<(usize, DenoiserCache, Volume)> = None;
        for (i, &t) in timesteps.iter().enumerate() {
            let pred = if i == traced_index {
                let (pred, cache) = self.denoiser.forward_cached(&z, t, cond, true)?;
                let estimate = self.schedule.clean_estimate(&z, &pred.noise, t)?;
                traced = Some((t, cache, estimate));
                pred
            } else {
                self.denoiser.predict_noise(&z, t, cond, true)?
            };
            if let Some(maps) = &pred.attention {
                acc.push_step(maps);
            }
            z = self
                .schedule
                .ddim_step(&z, &pred.noise, t, timesteps.get(i + 1).copied())?;
        }
        let (traced_t, cache, estimate) = traced.expect("traced index within loop");
        let image = self.codec.decode_latent(&z)?;
        let stack = acc
            .finish(cond.role_spans.clone())
            .map_err(|e| BackendError::Port {
                context: "attention aggregation",
                message: e.to_string(),
            })?;
        Ok(TracedSample {
            image,
            stack,
            estimate: self.codec.decode_latent(&estimate)?,
            traced_t,
            cache,
            noise_coeff: self.schedule.clean_estimate_noise_coeff(traced_t)?,
        })
    }
}

impl SamplerPort for ToyBackend {
    fn sample(
        &self,
        prompt: &str,
        _negative_prompt: &str,
        steps: usize,
        seed: u64,
        capture_attention: bool,
    ) -> Result<(Image, Option<AttentionStack<Real>>), BackendError> {
        // The toy backend runs without classifier-free guidance, so the
        // negative prompt is accepted for interface parity but unused.
        let cond = self.text.conditioning_plain(prompt)?;
        self.sample_conditioned(&cond, steps, seed, capture_attention, StepAggregation::default())
    }

    fn one_step_clean_estimate(
        &self,
        z_t: &Volume,
        t: usize,
        text: &str,
    ) -> Result<Image, BackendError> {
        let cond = self.text.conditioning_plain(text)?;
        let pred = self.denoiser.predict_noise(z_t, t, &cond, false)?;
        self.codec
            .decode_latent(&self.schedule.clean_estimate(z_t, &pred.noise, t)?)
    }
}

/// Training-time generation: denoise `steps` times (30 by default during
/// training) under the negative prompt, capturing attention for the
/// region extractor.
pub fn generate_training_image(
    sampler: &dyn SamplerPort,
    prompt: &str,
    negative: &str,
    steps: usize,
    seed: u64,
) -> Result<(Image, AttentionStack<Real>), BackendError> {
    let (image, stack) = sampler.sample(prompt, negative, steps, seed, true)?;
    let stack = stack.ok_or(BackendError::Port {
        context: "generate_training_image",
        message: "sampler did not capture attention".to_string(),
    })?;
    Ok((image, stack))
}

/// Cache tying a differentiable clean estimate back to the denoiser call
/// that produced it.
#[derive(Debug, Clone)]
pub struct DiffGenCache {
    pub cache: DenoiserCache,
    pub noise_coeff: Real,
}

/// Decoded one-step clean estimate with the pieces needed to push loss
/// gradients back into the cross-attention parameters.
pub fn differentiable_generation(
    backend: &ToyBackend,
    z_t: &Volume,
    t: usize,
    cond: &TextConditioning,
) -> Result<(Image, DiffGenCache), BackendError> {
    let (pred, cache) = backend.denoiser.forward_cached(z_t, t, cond, false)?;
    let estimate = backend.schedule.clean_estimate(z_t, &pred.noise, t)?;
    Ok((
        backend.codec.decode_latent(&estimate)?,
        DiffGenCache {
            cache,
            noise_coeff: backend.schedule.clean_estimate_noise_coeff(t)?,
        },
    ))
}

/// ∂L/∂(attention tensors) given ∂L/∂(estimate image). The identity codec
/// makes image and latent gradients coincide; the schedule contributes the
/// scalar ∂x̂₀/∂ε̂.
pub fn differentiable_generation_backward(
    backend: &ToyBackend,
    gen: &DiffGenCache,
    d_image: &Volume,
) -> AttnGrads {
    let d_eps = d_image.mapv(|v| v * gen.noise_coeff);
    backend.denoiser.backward(&gen.cache, &d_eps)
}

// ---------------------------------------------------------------------------
// Backend registry
// ---------------------------------------------------------------------------

/// On-disk description of an external backend plugin.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BackendManifest {
    pub name: String,
    /// `embedding_file` is the only external kind understood here; other
    /// kinds are discovered but refused with a clear error.
    pub kind: String,
    /// Payload path (e.g. an embedding JSON), relative to the manifest.
    #[serde(default)]
    pub path: Option<PathBuf>,
}

/// A manifest found on disk, with its resolved payload path.
#[derive(Debug, Clone)]
pub struct DiscoveredBackend {
    pub manifest: BackendManifest,
    pub manifest_path: PathBuf,
    pub data_path: Option<PathBuf>,
}

/// Scans a directory for `*.toml` backend manifests, sorted by file name.
pub fn discover_backends_in(dir: &Path) -> Result<Vec<DiscoveredBackend>, BackendError> {
    let mut entries: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|source| BackendError::Io {
            path: dir.to_path_buf(),
            source,
        })?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|ext| ext == "toml"))
        .collect();
    entries.sort();
    let mut found = Vec::new();
    for path in entries {
        let text = std::fs::read_to_string(&path).map_err(|source| BackendError::Io {
            path: path.clone(),
            source,
        })?;
        let manifest: BackendManifest =
            toml::from_str(&text).map_err(|e| BackendError::Manifest {
                path: path.clone(),
                message: e.to_string(),
            })?;
        let data_path = manifest.path.as_ref().map(|rel| {
            if rel.is_absolute() {
                rel.clone()
            } else {
                path.parent().unwrap_or(Path::new(".")).join(rel)
            }
        });
        found.push(DiscoveredBackend {
            manifest,
            manifest_path: path,
            data_path,
        });
    }
    Ok(found)
}

/// Manifests from the directory named by [`BACKEND_DIR_ENV`]; empty when
/// the variable is unset.
pub fn discover_backends() -> Result<Vec<DiscoveredBackend>, BackendError> {
    match std::env::var_os(BACKEND_DIR_ENV) {
        Some(dir) => discover_backends_in(Path::new(&dir)),
        None => Ok(Vec::new()),
    }
}

/// Resolves a generation/training backend by config key. Only the toy
/// backend can train or sample in-process; external manifests are
/// acknowledged by name but refused for these operations.
pub fn resolve_backend(key: &str, seed: u64) -> Result<ToyBackend, BackendError> {
    if key == ToyBackend::NAME {
        return Ok(ToyBackend::new(seed));
    }
    let discovered = discover_backends()?;
    if let Some(found) = discovered.iter().find(|d| d.manifest.name == key) {
        return Err(BackendError::Unsupported {
            name: key.to_string(),
            operation: "train or sample",
            detail: format!(
                "manifest {:?} has kind '{}', which only provides evaluation embeddings",
                found.manifest_path, found.manifest.kind
            ),
        });
    }
    let mut available = vec![ToyBackend::NAME.to_string()];
    available.extend(discovered.into_iter().map(|d| d.manifest.name));
    Err(BackendError::UnknownBackend {
        name: key.to_string(),
        available,
    })
}
