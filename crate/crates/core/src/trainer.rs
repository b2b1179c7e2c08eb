//! Training loop: configuration, dataset assembly, per-class batching, the
//! per-step loss/gradient composition, Adam, checkpointing, and a resumable
//! `run` driver that logs one JSONL record per step.
//!
//! Determinism contract: every random draw is keyed by the config seed plus
//! a purpose label (and the step or image id where relevant), never by call
//! order. Two runs of the same config over the same dataset produce
//! byte-identical metrics and checkpoints, and a run interrupted at a
//! checkpoint resumes into exactly the bytes the uninterrupted run writes.

use std::collections::BTreeMap;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::attention_geometry::{
    aggregate_token_map, centroid, crop_region, interaction_center, interaction_region,
    region_pixel_mask, AttentionAccumulator, GeometryError, RegionParams, Role, StepAggregation,
};
use crate::guidance_losses::{
    align_loss_grad, idg_grad, masked_reconstruction_grad, rdg, total_loss, triplet_loss_grad,
    LossBreakdown, LossError, LossWeights, TripletSign, DEFAULT_MARGIN,
};
use crate::hoi_data::{
    anchor_prompt, build_anchor_table, build_balance_table, gt_interaction_region,
    interaction_mask, prompt_parts, realign_outcome, AnchorTable, AnnotationRecord, BalanceMode,
    BalanceTable, BoundingBox, DataError, HOITriplet, Mask, PromptRecord,
};
use crate::model_adapters::{
    resolve_backend, AttnGrads, BackendError, Image, ImageEncoderPort, LatentCodecPort,
    TextEncoderPort, ToyBackend, ToyDenoiser, ATTN_PARAM_NAMES, DEFAULT_INFERENCE_STEPS,
    DEFAULT_TRAIN_SAMPLING_STEPS, LATENT_SHAPE,
};
use crate::rng::{derive_seed, indexed_stream, stream};
use crate::attention_geometry::RegionExponent;
use crate::{Real, Volume};

/// Rolling checkpoint file name inside a run directory.
pub const CHECKPOINT_FILE: &str = "checkpoint.vdcp";
/// Per-step metrics log inside a run directory.
pub const METRICS_FILE: &str = "metrics.jsonl";
/// Frozen copy of the config a run directory was created with.
pub const CONFIG_LOCK_FILE: &str = "config.lock";
/// Leading magic of the checkpoint container.
pub const CHECKPOINT_MAGIC: &[u8; 8] = b"VDCP0001";

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error("no prompt classes to train on")]
    EmptyDataset,
    #[error("annotations reference image '{0}' but no such image was provided")]
    MissingImage(String),
    #[error("class '{0}' has no balance factor")]
    MissingAlpha(String),
    #[error("batch names item ({triplet}, {image_id}) that the dataset does not hold")]
    MissingItem { triplet: String, image_id: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("config TOML: {0}")]
    ConfigToml(String),
    #[error("run directory is locked to a different config: {path}")]
    ConfigMismatch { path: PathBuf },
    #[error("checkpoint {path}: {message}")]
    Checkpoint { path: PathBuf, message: String },
    #[error("cannot resume: checkpoint at {path} was written with a different config")]
    ResumeConfigMismatch { path: PathBuf },
    #[error("metrics line {line}: {message}")]
    Metrics { line: usize, message: String },
}

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

/// Everything a training run depends on. Serializes losslessly to TOML; the
/// run directory keeps a frozen copy and the checkpoint embeds one, so a
/// checkpoint is self-describing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Weight of the masked reconstruction term (λ1).
    pub lambda_rec: Real,
    /// Weight of the disentanglement term (λ2).
    pub lambda_rdg: Real,
    /// Weight of the interaction-direction term (λ3).
    pub lambda_idg: Real,
    /// Triplet-loss margin.
    pub margin: Real,
    pub learning_rate: Real,
    pub batch_size: usize,
    /// Denoising steps per training-time generation.
    pub train_sampling_steps: usize,
    /// Denoising steps at inference time.
    pub inference_steps: usize,
    pub balance_mode: BalanceMode,
    pub triplet_sign: TripletSign,
    pub region_exponent: RegionExponent,
    /// Grid size the cross-attention maps are captured at.
    pub attention_resolution: usize,
    /// Floor on the interaction-region half extent, as a fraction of the
    /// larger grid dimension.
    pub min_extent: Real,
    pub seed: u64,
    pub backend: String,
    /// Run the generation-based guidance terms every N steps (0 = never).
    pub gen_every: u64,
    /// Differentiable image the guidance terms are evaluated on.
    pub guidance_source: GuidanceSource,
    /// Extra checkpoint cadence; 0 keeps only the final checkpoint.
    pub checkpoint_every: u64,
    /// Step budget; defaults to one pass over the planned batches.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_steps: Option<u64>,
    pub adam_beta1: Real,
    pub adam_beta2: Real,
    pub adam_epsilon: Real,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda_rec: 1.0,
            lambda_rdg: 10.0,
            lambda_idg: 0.8,
            margin: DEFAULT_MARGIN,
            learning_rate: 4e-6,
            batch_size: 4,
            train_sampling_steps: DEFAULT_TRAIN_SAMPLING_STEPS,
            inference_steps: DEFAULT_INFERENCE_STEPS,
            balance_mode: BalanceMode::default(),
            triplet_sign: TripletSign::default(),
            region_exponent: RegionExponent::default(),
            attention_resolution: 16,
            min_extent: 0.05,
            seed: 0,
            backend: "toy".to_string(),
            gen_every: 1,
            guidance_source: GuidanceSource::default(),
            checkpoint_every: 0,
            max_steps: None,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_epsilon: 1e-8,
        }
    }
}

/// Where the differentiable stand-in for the generated image comes from
/// when the guidance terms are computed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GuidanceSource {
    /// One-step clean estimate from the same noised real latent the masked
    /// reconstruction term uses, with attention captured from that single
    /// denoiser call. Memory-light: no sampling loop runs during training.
    #[default]
    Estimate,
    /// Full `train_sampling_steps` generation; gradients flow through the
    /// final sampler step only (a one-step truncation of backprop through
    /// the trajectory), and attention is aggregated across all steps.
    Trajectory,
}

impl TrainConfig {
    pub fn to_toml(&self) -> Result<String, TrainError> {
        toml::to_string_pretty(self).map_err(|e| TrainError::ConfigToml(e.to_string()))
    }

    pub fn from_toml(text: &str) -> Result<Self, TrainError> {
        toml::from_str(text).map_err(|e| TrainError::ConfigToml(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, TrainError> {
        let text = std::fs::read_to_string(path).map_err(|source| TrainError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_toml(&text)
    }

    pub fn weights(&self) -> LossWeights<Real> {
        LossWeights {
            lambda1: self.lambda_rec,
            lambda2: self.lambda_rdg,
            lambda3: self.lambda_idg,
        }
    }

    pub fn region_params(&self) -> RegionParams {
        RegionParams {
            exponent: self.region_exponent,
            min_extent: self.min_extent,
        }
    }
}

// ---------------------------------------------------------------------------
// Dataset
// ---------------------------------------------------------------------------

/// One trainable (class, image) pairing with its precomputed mask and the
/// annotation boxes behind the ground-truth interaction region.
#[derive(Debug, Clone)]
pub struct TrainItem {
    pub image_id: String,
    pub triplet: HOITriplet,
    pub image: Image,
    /// Union of the class's human/object boxes at latent resolution; drives
    /// masked reconstruction and the masked ground-truth feature.
    pub rec_mask: Mask,
    pub human_box: BoundingBox,
    pub object_box: BoundingBox,
}

/// Realigned prompts, anchor and balance tables, and per-(class, image)
/// training items.
#[derive(Debug, Clone)]
pub struct TrainDataset {
    pub prompts: Vec<PromptRecord>,
    pub anchors: AnchorTable,
    pub balance: BalanceTable,
    items: BTreeMap<(HOITriplet, String), TrainItem>,
}

impl TrainDataset {
    /// Realigns annotations into prompts and pairs every prompt image with
    /// its pixels and interaction mask. `images` must cover every image id
    /// that survives realignment.
    pub fn build(
        records: &[AnnotationRecord],
        images: &BTreeMap<String, Image>,
        balance_mode: BalanceMode,
    ) -> Result<Self, TrainError> {
        let outcome = realign_outcome(records);
        if outcome.prompts.is_empty() {
            return Err(TrainError::EmptyDataset);
        }
        let anchors = build_anchor_table(&outcome.prompts);
        let balance = build_balance_table(&outcome.prompts, balance_mode)?;
        let by_id: BTreeMap<&str, &AnnotationRecord> = records
            .iter()
            .map(|r| (r.image_id.as_str(), r))
            .collect();

        let (_, lat_h, lat_w) = LATENT_SHAPE;
        let mut items = BTreeMap::new();
        for prompt in &outcome.prompts {
            for image_id in &prompt.image_ids {
                let record = by_id
                    .get(image_id.as_str())
                    .expect("realignment only emits ids from the input records");
                let image = images
                    .get(image_id)
                    .ok_or_else(|| TrainError::MissingImage(image_id.clone()))?;
                let rec_mask = interaction_mask(record, &prompt.triplet, (lat_h, lat_w))?;
                let pair = record
                    .pairs
                    .iter()
                    .find(|p| p.triplet == prompt.triplet)
                    .expect("realignment only emits classes present in the record");
                items.insert(
                    (prompt.triplet.clone(), image_id.clone()),
                    TrainItem {
                        image_id: image_id.clone(),
                        triplet: prompt.triplet.clone(),
                        image: image.clone(),
                        rec_mask,
                        human_box: pair.human_box.clone(),
                        object_box: pair.object_box.clone(),
                    },
                );
            }
        }
        Ok(Self {
            prompts: outcome.prompts,
            anchors,
            balance,
            items,
        })
    }

    pub fn item(&self, triplet: &HOITriplet, image_id: &str) -> Option<&TrainItem> {
        self.items
            .get(&(triplet.clone(), image_id.to_string()))
    }

    pub fn num_items(&self) -> usize {
        self.items.len()
    }
}

// ---------------------------------------------------------------------------
// Batching
// ---------------------------------------------------------------------------

/// One batch: a single class and up to `batch_size` of its images. Batches
/// never mix classes because every loss term is class-conditional (anchor
/// verb, balance factor, prompt).
#[derive(Debug, Clone, PartialEq)]
pub struct ClassBatch {
    pub triplet: HOITriplet,
    pub prompt: String,
    pub image_ids: Vec<String>,
}

/// Splits every class's sorted image list into `batch_size` chunks and
/// shuffles the resulting batch list with a seed keyed by the epoch, so
/// each epoch visits the same batches in a fresh deterministic order.
pub fn plan_batches(
    prompts: &[PromptRecord],
    batch_size: usize,
    seed: u64,
    epoch: u64,
) -> Vec<ClassBatch> {
    assert!(batch_size > 0, "batch size must be positive");
    let mut batches = Vec::new();
    for prompt in prompts {
        let mut ids = prompt.image_ids.clone();
        ids.sort();
        for chunk in ids.chunks(batch_size) {
            batches.push(ClassBatch {
                triplet: prompt.triplet.clone(),
                prompt: prompt.text.clone(),
                image_ids: chunk.to_vec(),
            });
        }
    }
    let mut order = stream(seed, &format!("batch-order/{epoch}"));
    batches.shuffle(&mut order);
    batches
}

// ---------------------------------------------------------------------------
// Adam
// ---------------------------------------------------------------------------

/// Adam moments over the trainable attention tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: AttnGrads,
    pub v: AttnGrads,
    pub t: u64,
}

impl AdamState {
    pub fn new(text_dim: usize) -> Self {
        Self {
            m: AttnGrads::zeros(text_dim),
            v: AttnGrads::zeros(text_dim),
            t: 0,
        }
    }

    /// One bias-corrected Adam update applied in place to the denoiser's
    /// attention tensors.
    pub fn apply(
        &mut self,
        denoiser: &mut ToyDenoiser,
        grads: &AttnGrads,
        lr: Real,
        beta1: Real,
        beta2: Real,
        epsilon: Real,
    ) {
        self.t += 1;
        let bc1 = 1.0 - beta1.powi(self.t as i32);
        let bc2 = 1.0 - beta2.powi(self.t as i32);
        for (name, param) in denoiser.attn_tensors_mut() {
            let g = grads.by_name(name).expect("known tensor name");
            let m = self.m.by_name_mut(name).expect("known tensor name");
            let v = self.v.by_name_mut(name).expect("known tensor name");
            ndarray::Zip::from(param)
                .and(m)
                .and(v)
                .and(g)
                .for_each(|p, m, v, &g| {
                    *m = beta1 * *m + (1.0 - beta1) * g;
                    *v = beta2 * *v + (1.0 - beta2) * g * g;
                    *p -= lr * (*m / bc1) / ((*v / bc2).sqrt() + epsilon);
                });
        }
    }
}

// ---------------------------------------------------------------------------
// Checkpoint container
// ---------------------------------------------------------------------------

/// Single-file training snapshot: step counter, the exact config TOML (with
/// its SHA-256), and named f64 tensors — the four attention parameters plus
/// the optimizer moments and step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub step: u64,
    pub config_toml: String,
    pub tensors: BTreeMap<String, (Vec<usize>, Vec<Real>)>,
}

fn sha256_bytes(data: &[u8]) -> [u8; 32] {
    let mut hasher = Sha256::new();
    hasher.update(data);
    hasher.finalize().into()
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], String> {
        if self.pos + n > self.bytes.len() {
            return Err(format!(
                "truncated: wanted {n} bytes at offset {}, file has {}",
                self.pos,
                self.bytes.len()
            ));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, String> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&self.step.to_le_bytes());
        let toml_bytes = self.config_toml.as_bytes();
        out.extend_from_slice(&(toml_bytes.len() as u32).to_le_bytes());
        out.extend_from_slice(toml_bytes);
        out.extend_from_slice(&sha256_bytes(toml_bytes));
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, (shape, data)) in &self.tensors {
            let name_bytes = name.as_bytes();
            out.extend_from_slice(&(name_bytes.len() as u32).to_le_bytes());
            out.extend_from_slice(name_bytes);
            out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
            for &dim in shape {
                out.extend_from_slice(&(dim as u64).to_le_bytes());
            }
            for v in data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, String> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != CHECKPOINT_MAGIC {
            return Err("bad magic; not a checkpoint file".to_string());
        }
        let step = r.u64()?;
        let toml_len = r.u32()? as usize;
        let toml_bytes = r.take(toml_len)?.to_vec();
        let stored_hash: [u8; 32] = r.take(32)?.try_into().unwrap();
        if stored_hash != sha256_bytes(&toml_bytes) {
            return Err("config hash mismatch; file is corrupt".to_string());
        }
        let config_toml =
            String::from_utf8(toml_bytes).map_err(|e| format!("config not UTF-8: {e}"))?;
        let count = r.u32()? as usize;
        let mut tensors = BTreeMap::new();
        for _ in 0..count {
            let name_len = r.u32()? as usize;
            let name = String::from_utf8(r.take(name_len)?.to_vec())
                .map_err(|e| format!("tensor name not UTF-8: {e}"))?;
            let ndim = r.u32()? as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(r.u64()? as usize);
            }
            let len: usize = shape.iter().product();
            let raw = r.take(len * 8)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| Real::from_le_bytes(c.try_into().unwrap()))
                .collect();
            tensors.insert(name, (shape, data));
        }
        if r.pos != bytes.len() {
            return Err(format!("{} trailing bytes after tensors", bytes.len() - r.pos));
        }
        Ok(Self {
            step,
            config_toml,
            tensors,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), TrainError> {
        std::fs::write(path, self.to_bytes()).map_err(|source| TrainError::Io {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self, TrainError> {
        let bytes = std::fs::read(path).map_err(|source| TrainError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_bytes(&bytes).map_err(|message| TrainError::Checkpoint {
            path: path.to_path_buf(),
            message,
        })
    }
}

fn grads_to_tensors(prefix: &str, grads: &AttnGrads) -> Vec<(String, (Vec<usize>, Vec<Real>))> {
    ATTN_PARAM_NAMES
        .iter()
        .map(|name| {
            let tensor = grads.by_name(name).expect("known tensor name");
            (
                format!("{prefix}/{name}"),
                (tensor.shape().to_vec(), tensor.iter().copied().collect()),
            )
        })
        .collect()
}

fn tensors_to_grads(
    prefix: &str,
    tensors: &BTreeMap<String, (Vec<usize>, Vec<Real>)>,
    text_dim: usize,
    path: &Path,
) -> Result<AttnGrads, TrainError> {
    let mut grads = AttnGrads::zeros(text_dim);
    for name in ATTN_PARAM_NAMES {
        let key = format!("{prefix}/{name}");
        let (shape, data) = tensors.get(&key).ok_or_else(|| TrainError::Checkpoint {
            path: path.to_path_buf(),
            message: format!("missing tensor '{key}'"),
        })?;
        let target = grads.by_name_mut(name).expect("known tensor name");
        if shape != target.shape() {
            return Err(TrainError::Checkpoint {
                path: path.to_path_buf(),
                message: format!(
                    "tensor '{key}' has shape {shape:?}, expected {:?}",
                    target.shape()
                ),
            });
        }
        *target = Array2::from_shape_vec((shape[0], shape[1]), data.clone())
            .expect("shape/data agreement checked above");
    }
    Ok(grads)
}

/// Assembles the checkpoint tensor set from the live training state.
pub fn snapshot(
    denoiser: &ToyDenoiser,
    adam: &AdamState,
    step: u64,
    config_toml: &str,
) -> Checkpoint {
    let mut tensors = denoiser.export_tensors();
    tensors.extend(grads_to_tensors("optimizer/m", &adam.m));
    tensors.extend(grads_to_tensors("optimizer/v", &adam.v));
    tensors.insert(
        "optimizer/t".to_string(),
        (vec![1], vec![adam.t as Real]),
    );
    Checkpoint {
        step,
        config_toml: config_toml.to_string(),
        tensors,
    }
}

/// Restores denoiser parameters and optimizer moments from a checkpoint.
pub fn restore(
    checkpoint: &Checkpoint,
    denoiser: &mut ToyDenoiser,
    adam: &mut AdamState,
    path: &Path,
) -> Result<(), TrainError> {
    let params: BTreeMap<String, (Vec<usize>, Vec<Real>)> = checkpoint
        .tensors
        .iter()
        .filter(|(name, _)| !name.starts_with("optimizer/"))
        .map(|(name, t)| (name.clone(), t.clone()))
        .collect();
    denoiser.import_tensors(&params)?;
    let text_dim = denoiser.text_dim();
    adam.m = tensors_to_grads("optimizer/m", &checkpoint.tensors, text_dim, path)?;
    adam.v = tensors_to_grads("optimizer/v", &checkpoint.tensors, text_dim, path)?;
    let (_, t_data) = checkpoint
        .tensors
        .get("optimizer/t")
        .ok_or_else(|| TrainError::Checkpoint {
            path: path.to_path_buf(),
            message: "missing tensor 'optimizer/t'".to_string(),
        })?;
    adam.t = t_data.first().copied().unwrap_or(0.0) as u64;
    Ok(())
}

// ---------------------------------------------------------------------------
// Train step
// ---------------------------------------------------------------------------

/// One JSONL metrics record. Wall time is kept in memory for reporting but
/// excluded from serialization so reruns of the same config are
/// byte-identical.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainStepRecord {
    pub step: u64,
    pub losses: LossBreakdown<Real>,
    pub prompt: String,
    pub anchor_prompt: String,
    pub alpha: Real,
    #[serde(skip)]
    pub wall_time_ms: u128,
}

/// Zeroes every pixel outside the mask (mask resolution must equal the
/// image's spatial resolution).
fn mask_image(image: &Image, mask: &Mask) -> Image {
    let weights: Array2<Real> = mask.to_weights();
    let mut data = image.data().clone();
    for mut channel in data.outer_iter_mut() {
        channel *= &weights;
    }
    Image::new(data)
}

struct GuidanceTerms {
    triple: Real,
    align: Real,
    idg: Real,
}

/// One optimization step over a single-class batch: masked reconstruction
/// on noised ground truth, plus (when scheduled) the disentanglement and
/// direction terms on a differentiable stand-in for the generated image —
/// the one-step clean estimate of the reconstruction call by default, or a
/// traced generation (see [`GuidanceSource`]). Returns the averaged loss
/// breakdown and the summed-then-averaged parameter gradients; the caller
/// applies them with Adam.
pub fn train_step(
    backend: &ToyBackend,
    dataset: &TrainDataset,
    config: &TrainConfig,
    batch: &ClassBatch,
    step: u64,
) -> Result<(LossBreakdown<Real>, AttnGrads, String), TrainError> {
    let alpha = dataset
        .balance
        .alpha(&batch.triplet)
        .ok_or_else(|| TrainError::MissingAlpha(batch.triplet.to_string()))?;
    let anchor_text = anchor_prompt(&batch.triplet, &dataset.anchors)?;
    let parts = prompt_parts(&batch.triplet);
    let cond = backend.conditioning(&parts)?;
    let weights = config.weights();
    let params = config.region_params();

    let guidance_on = config.gen_every != 0
        && step % config.gen_every == 0
        && (config.lambda_rdg != 0.0 || config.lambda_idg != 0.0);

    // Class text features for the triplet term (frozen encoder: values
    // only, no gradients flow into it).
    let e_gt = backend.text.encode(&batch.prompt)?;
    let e_anc = backend.text.encode(&anchor_text)?;

    let mut grads = AttnGrads::zeros(backend.denoiser.text_dim());
    let mut rec_sum = 0.0;
    let mut guidance: Option<GuidanceTerms> = None;

    for image_id in &batch.image_ids {
        let item = dataset
            .item(&batch.triplet, image_id)
            .ok_or_else(|| TrainError::MissingItem {
                triplet: batch.triplet.to_string(),
                image_id: image_id.clone(),
            })?;

        // Masked reconstruction on noised ground truth. When the guidance
        // terms draw their differentiable image from this same call, the
        // call also captures its attention maps for the region extractor.
        let z0 = backend.codec.encode_image(&item.image)?;
        let t_rec = indexed_stream(config.seed, &format!("rec-t/{image_id}"), step)
            .gen_range(0..backend.schedule.len());
        let mut noise_rng = indexed_stream(config.seed, &format!("rec-noise/{image_id}"), step);
        let noise: Volume = Array3::from_shape_simple_fn(LATENT_SHAPE, || {
            noise_rng.sample::<Real, _>(StandardNormal)
        });
        let z_t = backend.schedule.add_noise(&z0, &noise, t_rec)?;
        let estimate_source = guidance_on && config.guidance_source == GuidanceSource::Estimate;
        let (pred, rec_cache) = backend
            .denoiser
            .forward_cached(&z_t, t_rec, &cond, estimate_source)?;
        let (rec_loss, rec_grads) =
            masked_reconstruction_grad(&noise, &pred.noise, &item.rec_mask)?;
        rec_sum += rec_loss;
        let mut d_pred = (config.lambda_rec != 0.0)
            .then(|| rec_grads.d_predicted.mapv(|v| v * config.lambda_rec));

        if !guidance_on {
            if let Some(d) = &d_pred {
                grads.accumulate(&backend.denoiser.backward(&rec_cache, d));
            }
            continue;
        }

        // Differentiable stand-in for the generated image, its attention
        // stack, the scalar ∂image/∂ε̂, and (trajectory mode only) the
        // traced call's own cache.
        let (estimate, stack, noise_coeff, traced_cache) = match config.guidance_source {
            GuidanceSource::Estimate => {
                let maps = pred.attention.as_ref().expect("attention captured");
                let mut acc: AttentionAccumulator<Real> = AttentionAccumulator::new(
                    StepAggregation::default(),
                    backend.denoiser.attention_resolution(),
                );
                acc.push_step(maps);
                let stack = acc.finish(cond.role_spans.clone())?;
                let latent = backend.schedule.clean_estimate(&z_t, &pred.noise, t_rec)?;
                let estimate = backend.codec.decode_latent(&latent)?;
                let coeff = backend.schedule.clean_estimate_noise_coeff(t_rec)?;
                (estimate, stack, coeff, None)
            }
            GuidanceSource::Trajectory => {
                let gen_seed = derive_seed(config.seed, &format!("gen/{step}/{image_id}"));
                let traced = backend.sample_traced(
                    &cond,
                    config.train_sampling_steps,
                    gen_seed,
                    StepAggregation::default(),
                )?;
                (
                    traced.estimate,
                    traced.stack,
                    traced.noise_coeff,
                    Some(traced.cache),
                )
            }
        };
        let (f_gen, gen_cache) = backend.image.encode_cached(&estimate)?;

        // Masked ground-truth feature (interaction pixels only).
        let f_gt_masked = backend.image.encode(&mask_image(&item.image, &item.rec_mask))?;

        // Disentanglement: triplet against the anchor verb plus alignment
        // to the masked ground truth.
        let (triple, tgrads) =
            triplet_loss_grad(&f_gen, &e_gt, &e_anc, config.margin, config.triplet_sign)?;
        let (align, _d_gt, d_fgen_align) = align_loss_grad(&f_gt_masked, &f_gen)?;

        // Interaction regions: generated one from attention centroids,
        // ground-truth one from the annotation boxes.
        let verb_map = aggregate_token_map(&stack, Role::Verb)?;
        let human_map = aggregate_token_map(&stack, Role::Human)?;
        let object_map = aggregate_token_map(&stack, Role::Object)?;
        let c_v = centroid(&verb_map)?;
        let c_h = centroid(&human_map)?;
        let c_o = centroid(&object_map)?;
        let c_rel = interaction_center(&c_h, &c_v, &c_o);
        let gen_region = interaction_region(&c_rel, &c_h, &c_o, &params, stack.resolution());
        let gt_region = gt_interaction_region(&item.human_box, &item.object_box, &params);

        let rel_gen_pixels = crop_region(estimate.data(), &gen_region);
        let (f_rel_gen, rel_cache) = backend.image.encode_cached(&Image::new(rel_gen_pixels))?;
        let f_rel_gt = backend
            .image
            .encode(&Image::new(crop_region(item.image.data(), &gt_region)))?;

        let (idg_val, igrads) = idg_grad(&f_gt_masked, &f_gen, &f_rel_gt, &f_rel_gen)?;

        // Chain every guidance gradient back through the image encoder and
        // the traced clean estimate into the attention parameters.
        let scale_rdg = config.lambda_rdg * alpha;
        let d_f_gen = tgrads.d_f_gen.mapv(|v| v * scale_rdg)
            + d_fgen_align.mapv(|v| v * scale_rdg)
            + igrads.d_f_gen.mapv(|v| v * config.lambda_idg);
        let d_f_rel_gen = igrads.d_f_rel_gen.mapv(|v| v * config.lambda_idg);

        let mut d_estimate = backend.image.backward(&gen_cache, &d_f_gen);
        let mut d_rel = backend.image.backward(&rel_cache, &d_f_rel_gen);
        // Cropping zeroes pixels outside the region, so its backward pass
        // zeroes the corresponding gradient entries.
        let (h, w) = (d_rel.shape()[1], d_rel.shape()[2]);
        let region_mask = region_pixel_mask(&gen_region, (h, w));
        for mut channel in d_rel.outer_iter_mut() {
            ndarray::Zip::from(&mut channel)
                .and(&region_mask)
                .for_each(|g, &m| {
                    if m == 0 {
                        *g = 0.0;
                    }
                });
        }
        d_estimate += &d_rel;

        let d_eps = d_estimate.mapv(|v| v * noise_coeff);
        match &traced_cache {
            // Trajectory: reconstruction and guidance went through two
            // different denoiser calls, so each cache is walked once.
            Some(cache) => {
                if let Some(d) = &d_pred {
                    grads.accumulate(&backend.denoiser.backward(&rec_cache, d));
                }
                grads.accumulate(&backend.denoiser.backward(cache, &d_eps));
            }
            // Estimate: both losses share the reconstruction call, so their
            // output gradients combine and the cache is walked once.
            None => {
                let combined = match d_pred.take() {
                    Some(d) => d + &d_eps,
                    None => d_eps,
                };
                grads.accumulate(&backend.denoiser.backward(&rec_cache, &combined));
            }
        }

        let terms = guidance.get_or_insert(GuidanceTerms {
            triple: 0.0,
            align: 0.0,
            idg: 0.0,
        });
        terms.triple += triple;
        terms.align += align;
        terms.idg += idg_val.value;
    }

    let n = batch.image_ids.len() as Real;
    grads.scale(1.0 / n);
    let rec_mean = rec_sum / n;
    let (triple_mean, align_mean, idg_mean) = match &guidance {
        Some(t) => (t.triple / n, t.align / n, t.idg / n),
        None => (0.0, 0.0, 0.0),
    };
    let rdg_val = rdg(alpha, triple_mean, align_mean);
    let losses = total_loss(rec_mean, &rdg_val, idg_mean, &weights);
    Ok((losses, grads, anchor_text))
}

// ---------------------------------------------------------------------------
// Run driver
// ---------------------------------------------------------------------------

/// What a completed (or resumed-and-completed) run leaves behind.
#[derive(Debug)]
pub struct TrainOutcome {
    /// Steps executed by this invocation (0 when already complete).
    pub steps_run: u64,
    /// Total step budget of the run.
    pub total_steps: u64,
    pub checkpoint_path: PathBuf,
    pub metrics_path: PathBuf,
    /// Records written by this invocation, in step order.
    pub records: Vec<TrainStepRecord>,
    /// Backend holding the final trained parameters.
    pub backend: ToyBackend,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> TrainError + '_ {
    move |source| TrainError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Drops metrics lines past the checkpointed step so a resumed run appends
/// cleanly; returns how many lines were kept.
fn truncate_metrics(path: &Path, keep_through: u64) -> Result<u64, TrainError> {
    if !path.exists() {
        return Ok(0);
    }
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    let mut kept = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let record: TrainStepRecord =
            serde_json::from_str(line).map_err(|e| TrainError::Metrics {
                line: i + 1,
                message: e.to_string(),
            })?;
        if record.step <= keep_through {
            kept.push(line.to_string());
        }
    }
    let mut out = kept.join("\n");
    if !out.is_empty() {
        out.push('\n');
    }
    std::fs::write(path, out).map_err(io_err(path))?;
    Ok(kept.len() as u64)
}

/// Runs (or resumes) training in `run_dir`. The directory accumulates a
/// frozen config copy, a rolling checkpoint, and one metrics line per step;
/// a rerun of a finished run is a no-op and a rerun of an interrupted one
/// picks up at the last checkpoint.
pub fn run(
    config: &TrainConfig,
    dataset: &TrainDataset,
    run_dir: &Path,
) -> Result<TrainOutcome, TrainError> {
    run_with_budget(config, dataset, run_dir, None)
}

/// Like [`run`], but this invocation stops after at most `budget` steps,
/// leaving a resumable checkpoint behind. The run's step total and frozen
/// config are untouched, so a later invocation (with or without a budget)
/// picks up where this one stopped and the finished artifacts are
/// byte-identical to an unbudgeted run.
pub fn run_with_budget(
    config: &TrainConfig,
    dataset: &TrainDataset,
    run_dir: &Path,
    budget: Option<u64>,
) -> Result<TrainOutcome, TrainError> {
    std::fs::create_dir_all(run_dir).map_err(io_err(run_dir))?;
    let config_toml = config.to_toml()?;

    // Freeze the config in the run directory; refuse to mix configs.
    let lock_path = run_dir.join(CONFIG_LOCK_FILE);
    if lock_path.exists() {
        let existing = std::fs::read_to_string(&lock_path).map_err(io_err(&lock_path))?;
        if existing != config_toml {
            return Err(TrainError::ConfigMismatch { path: lock_path });
        }
    } else {
        std::fs::write(&lock_path, &config_toml).map_err(io_err(&lock_path))?;
    }

    let mut backend = resolve_backend(&config.backend, config.seed)?;
    let mut adam = AdamState::new(backend.denoiser.text_dim());

    let epoch_len = plan_batches(&dataset.prompts, config.batch_size, config.seed, 0).len() as u64;
    if epoch_len == 0 {
        return Err(TrainError::EmptyDataset);
    }
    let total_steps = config.max_steps.unwrap_or(epoch_len);

    // Resume from the rolling checkpoint when one exists.
    let checkpoint_path = run_dir.join(CHECKPOINT_FILE);
    let mut start_step = 0;
    if checkpoint_path.exists() {
        let ckpt = Checkpoint::load(&checkpoint_path)?;
        if ckpt.config_toml != config_toml {
            return Err(TrainError::ResumeConfigMismatch {
                path: checkpoint_path,
            });
        }
        restore(&ckpt, &mut backend.denoiser, &mut adam, &checkpoint_path)?;
        start_step = ckpt.step;
    }

    let metrics_path = run_dir.join(METRICS_FILE);
    truncate_metrics(&metrics_path, start_step)?;
    let mut metrics = std::io::BufWriter::new(
        std::fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(&metrics_path)
            .map_err(io_err(&metrics_path))?,
    );

    let stop_step = match budget {
        Some(b) => total_steps.min(start_step.saturating_add(b)),
        None => total_steps,
    };

    let mut records = Vec::new();
    let mut epoch_cache: Option<(u64, Vec<ClassBatch>)> = None;
    for step in (start_step + 1)..=stop_step {
        let epoch = (step - 1) / epoch_len;
        if epoch_cache.as_ref().map(|(e, _)| *e) != Some(epoch) {
            epoch_cache = Some((
                epoch,
                plan_batches(&dataset.prompts, config.batch_size, config.seed, epoch),
            ));
        }
        let batch = &epoch_cache.as_ref().expect("just filled").1
            [((step - 1) % epoch_len) as usize];

        let started = std::time::Instant::now();
        let (losses, grads, anchor_text) = train_step(&backend, dataset, config, batch, step)?;
        adam.apply(
            &mut backend.denoiser,
            &grads,
            config.learning_rate,
            config.adam_beta1,
            config.adam_beta2,
            config.adam_epsilon,
        );

        let record = TrainStepRecord {
            step,
            losses,
            prompt: batch.prompt.clone(),
            anchor_prompt: anchor_text,
            alpha: losses.alpha_used,
            wall_time_ms: started.elapsed().as_millis(),
        };
        let line = serde_json::to_string(&record).expect("record serializes");
        metrics
            .write_all(line.as_bytes())
            .and_then(|()| metrics.write_all(b"\n"))
            .and_then(|()| metrics.flush())
            .map_err(io_err(&metrics_path))?;
        records.push(record);

        let periodic = config.checkpoint_every != 0 && step % config.checkpoint_every == 0;
        if periodic || step == stop_step {
            snapshot(&backend.denoiser, &adam, step, &config_toml).save(&checkpoint_path)?;
        }
    }

    // A run that was already complete must still leave a checkpoint behind.
    if start_step >= total_steps && !checkpoint_path.exists() {
        snapshot(&backend.denoiser, &adam, start_step, &config_toml).save(&checkpoint_path)?;
    }

    Ok(TrainOutcome {
        steps_run: stop_step.saturating_sub(start_step),
        total_steps,
        checkpoint_path,
        metrics_path,
        records,
        backend,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{fixture_images, training_fixture_records};

    /// Small two-class dataset (9 images) for fast loop tests.
    fn mini_dataset() -> TrainDataset {
        let records: Vec<AnnotationRecord> = training_fixture_records()
            .into_iter()
            .filter(|r| {
                let verb = &r.pairs[0].triplet.verb;
                let object = &r.pairs[0].triplet.object;
                (verb == "carrying" && object == "bicycle")
                    || (verb == "straddling" && object == "horse")
            })
            .collect();
        assert_eq!(records.len(), 9);
        let images = fixture_images(&records);
        TrainDataset::build(&records, &images, BalanceMode::AsWritten).unwrap()
    }

    fn fast_config() -> TrainConfig {
        TrainConfig {
            batch_size: 2,
            train_sampling_steps: 5,
            learning_rate: 1e-3,
            seed: 11,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn config_toml_round_trip_is_lossless() {
        for config in [
            TrainConfig::default(),
            TrainConfig {
                max_steps: Some(5),
                balance_mode: BalanceMode::InverseNormalized,
                triplet_sign: TripletSign::AsWritten,
                region_exponent: RegionExponent::SquaredDistance,
                gen_every: 3,
                ..TrainConfig::default()
            },
        ] {
            let toml = config.to_toml().unwrap();
            let back = TrainConfig::from_toml(&toml).unwrap();
            assert_eq!(back, config);
            // Round-tripping the text is also stable byte-for-byte.
            assert_eq!(back.to_toml().unwrap(), toml);
        }
    }

    #[test]
    fn config_defaults_match_published_recipe() {
        let c = TrainConfig::default();
        assert_eq!(
            (c.lambda_rec, c.lambda_rdg, c.lambda_idg),
            (1.0, 10.0, 0.8)
        );
        assert_eq!(c.margin, 0.2);
        assert_eq!(c.learning_rate, 4e-6);
        assert_eq!(c.train_sampling_steps, 30);
        assert_eq!(c.inference_steps, 50);
        assert_eq!((c.adam_beta1, c.adam_beta2), (0.9, 0.999));
    }

    #[test]
    fn config_rejects_unknown_keys() {
        let err = TrainConfig::from_toml("nonsense_key = 3\n").unwrap_err();
        assert!(matches!(err, TrainError::ConfigToml(_)));
    }

    #[test]
    fn plan_batches_covers_all_images_single_class_each() {
        let dataset = mini_dataset();
        let batches = plan_batches(&dataset.prompts, 2, 7, 0);
        // carrying: 5 images → 3 batches; straddling: 4 → 2 batches.
        assert_eq!(batches.len(), 5);
        let mut seen: Vec<(String, String)> = Vec::new();
        for b in &batches {
            assert!(b.image_ids.len() <= 2 && !b.image_ids.is_empty());
            for id in &b.image_ids {
                seen.push((b.triplet.to_string(), id.clone()));
            }
        }
        seen.sort();
        seen.dedup();
        assert_eq!(seen.len(), 9, "every (class, image) exactly once");
    }

    #[test]
    fn plan_batches_is_deterministic_and_epoch_sensitive() {
        let dataset = mini_dataset();
        let a = plan_batches(&dataset.prompts, 2, 7, 0);
        let b = plan_batches(&dataset.prompts, 2, 7, 0);
        let c = plan_batches(&dataset.prompts, 2, 7, 1);
        assert_eq!(a, b);
        assert_ne!(a, c, "epochs reshuffle");
    }

    #[test]
    fn adam_first_step_matches_hand_computation() {
        let mut backend = ToyBackend::new(0);
        let before = backend.denoiser.export_tensors();
        let mut grads = AttnGrads::zeros(backend.denoiser.text_dim());
        *grads.by_name_mut("cross_attention.w_q").unwrap() += 2.0;
        let mut adam = AdamState::new(backend.denoiser.text_dim());
        let (lr, b1, b2, eps) = (0.01, 0.9, 0.999, 1e-8);
        adam.apply(&mut backend.denoiser, &grads, lr, b1, b2, eps);

        // t=1 from zero moments: m̂ = g, v̂ = g², update = lr·g/(|g|+ε).
        let expected = lr * 2.0 / (2.0 + eps);
        let after = backend.denoiser.export_tensors();
        let (_, before_q) = &before["cross_attention.w_q"];
        let (_, after_q) = &after["cross_attention.w_q"];
        for (b, a) in before_q.iter().zip(after_q.iter()) {
            assert!((b - a - expected).abs() < 1e-12);
        }
        // Untouched tensors stay put (zero grad → zero update).
        assert_eq!(before["cross_attention.w_k"], after["cross_attention.w_k"]);
        assert_eq!(adam.t, 1);
    }

    #[test]
    fn checkpoint_bytes_round_trip_exactly() {
        let backend = ToyBackend::new(3);
        let adam = AdamState::new(backend.denoiser.text_dim());
        let ckpt = snapshot(&backend.denoiser, &adam, 17, "seed = 3\n");
        let bytes = ckpt.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, ckpt);
        assert_eq!(back.to_bytes(), bytes, "byte-identical re-serialization");
        assert_eq!(back.step, 17);
        // 4 params + 4 m + 4 v + t.
        assert_eq!(back.tensors.len(), 13);
    }

    #[test]
    fn checkpoint_rejects_corruption() {
        let backend = ToyBackend::new(3);
        let adam = AdamState::new(backend.denoiser.text_dim());
        let bytes = snapshot(&backend.denoiser, &adam, 1, "x = 1\n").to_bytes();

        let mut bad_magic = bytes.clone();
        bad_magic[0] ^= 0xff;
        assert!(Checkpoint::from_bytes(&bad_magic)
            .unwrap_err()
            .contains("magic"));

        // Flip a config byte so the stored hash no longer matches.
        let mut bad_config = bytes.clone();
        bad_config[20] ^= 0xff;
        assert!(Checkpoint::from_bytes(&bad_config)
            .unwrap_err()
            .contains("hash"));

        let truncated = &bytes[..bytes.len() - 3];
        assert!(Checkpoint::from_bytes(truncated)
            .unwrap_err()
            .contains("truncated"));
    }

    #[test]
    fn snapshot_restore_round_trips_training_state() {
        let dataset = mini_dataset();
        let config = fast_config();
        let mut backend = ToyBackend::new(config.seed);
        let mut adam = AdamState::new(backend.denoiser.text_dim());
        let batches = plan_batches(&dataset.prompts, config.batch_size, config.seed, 0);
        for step in 1..=2u64 {
            let (_, grads, _) =
                train_step(&backend, &dataset, &config, &batches[(step - 1) as usize], step)
                    .unwrap();
            adam.apply(&mut backend.denoiser, &grads, 1e-3, 0.9, 0.999, 1e-8);
        }
        let ckpt = snapshot(&backend.denoiser, &adam, 2, "c = 1\n");

        let mut fresh = ToyBackend::new(999);
        let mut fresh_adam = AdamState::new(fresh.denoiser.text_dim());
        restore(&ckpt, &mut fresh.denoiser, &mut fresh_adam, Path::new("mem")).unwrap();
        assert_eq!(fresh.denoiser.export_tensors(), backend.denoiser.export_tensors());
        assert_eq!(fresh_adam, adam);
    }

    #[test]
    fn dataset_build_missing_image_errors() {
        let records = training_fixture_records();
        let mut images = fixture_images(&records);
        images.remove("t0000");
        let err = TrainDataset::build(&records, &images, BalanceMode::AsWritten).unwrap_err();
        assert!(matches!(err, TrainError::MissingImage(id) if id == "t0000"));
    }

    #[test]
    fn dataset_build_counts_items_and_prompts() {
        let records = training_fixture_records();
        let images = fixture_images(&records);
        let dataset = TrainDataset::build(&records, &images, BalanceMode::AsWritten).unwrap();
        assert_eq!(dataset.prompts.len(), 8);
        assert_eq!(dataset.num_items(), 62);
        let item = dataset
            .item(&HOITriplet::new("person", "riding", "bicycle"), "t0000")
            .unwrap();
        assert!(item.rec_mask.ones_count() > 0);
    }

    #[test]
    fn train_step_guidance_produces_finite_losses_and_nonzero_grads() {
        let dataset = mini_dataset();
        let config = fast_config();
        let backend = ToyBackend::new(config.seed);
        let batches = plan_batches(&dataset.prompts, config.batch_size, config.seed, 0);
        let (losses, grads, anchor_text) =
            train_step(&backend, &dataset, &config, &batches[0], 1).unwrap();

        for v in [
            losses.rec,
            losses.triple,
            losses.align,
            losses.rdg,
            losses.idg,
            losses.total,
        ] {
            assert!(v.is_finite());
        }
        assert!(losses.rec > 0.0);
        // Single-verb objects anchor to themselves.
        assert_eq!(anchor_text, batches[0].prompt);
        // Weighted-sum identity.
        assert!((losses.total
            - (config.lambda_rec * losses.rec
                + config.lambda_rdg * losses.rdg
                + config.lambda_idg * losses.idg))
            .abs()
            < 1e-12);
        assert!(grads.squared_norm() > 0.0);
    }

    #[test]
    fn train_step_skips_guidance_off_schedule() {
        let dataset = mini_dataset();
        let config = TrainConfig {
            gen_every: 2,
            ..fast_config()
        };
        let backend = ToyBackend::new(config.seed);
        let batches = plan_batches(&dataset.prompts, config.batch_size, config.seed, 0);
        // Step 1 is off-schedule for gen_every=2; step 2 is on.
        let (off, _, _) = train_step(&backend, &dataset, &config, &batches[0], 1).unwrap();
        assert_eq!((off.triple, off.align, off.rdg, off.idg), (0.0, 0.0, 0.0, 0.0));
        assert!(off.rec > 0.0);
        let (on, _, _) = train_step(&backend, &dataset, &config, &batches[0], 2).unwrap();
        assert!(on.rdg != 0.0 || on.idg != 0.0);

        // Zero guidance weights also skip generation entirely.
        let zero = TrainConfig {
            lambda_rdg: 0.0,
            lambda_idg: 0.0,
            ..fast_config()
        };
        let (z, _, _) = train_step(&backend, &dataset, &zero, &batches[0], 1).unwrap();
        assert_eq!((z.triple, z.align, z.rdg, z.idg), (0.0, 0.0, 0.0, 0.0));
    }

    #[test]
    fn run_writes_metrics_checkpoint_and_lock() {
        let dataset = mini_dataset();
        let config = TrainConfig {
            max_steps: Some(4),
            checkpoint_every: 2,
            gen_every: 2,
            ..fast_config()
        };
        let dir = tempfile::tempdir().unwrap();
        let outcome = run(&config, &dataset, dir.path()).unwrap();
        assert_eq!(outcome.steps_run, 4);
        assert_eq!(outcome.records.len(), 4);
        assert!(outcome.checkpoint_path.exists());
        assert!(dir.path().join(CONFIG_LOCK_FILE).exists());

        let text = std::fs::read_to_string(&outcome.metrics_path).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 4);
        for (i, line) in lines.iter().enumerate() {
            let record: TrainStepRecord = serde_json::from_str(line).unwrap();
            assert_eq!(record.step, i as u64 + 1);
            assert!(record.losses.total.is_finite());
        }
        let ckpt = Checkpoint::load(&outcome.checkpoint_path).unwrap();
        assert_eq!(ckpt.step, 4);
        assert_eq!(ckpt.config_toml, config.to_toml().unwrap());
    }

    #[test]
    fn resumed_run_matches_uninterrupted_run_byte_for_byte() {
        let dataset = mini_dataset();
        let config = TrainConfig {
            max_steps: Some(6),
            gen_every: 2,
            checkpoint_every: 3,
            ..fast_config()
        };

        // Uninterrupted 6-step run.
        let full_dir = tempfile::tempdir().unwrap();
        run(&config, &dataset, full_dir.path()).unwrap();

        // Simulate a process killed mid-step-4: the rolling checkpoint
        // holds step 3 and the metrics file already has 4 lines. Built
        // from the same public pieces `run` uses, with the same config.
        let part_dir = tempfile::tempdir().unwrap();
        let config_toml = config.to_toml().unwrap();
        let mut backend = ToyBackend::new(config.seed);
        let mut adam = AdamState::new(backend.denoiser.text_dim());
        let epoch_len =
            plan_batches(&dataset.prompts, config.batch_size, config.seed, 0).len() as u64;
        let batches = plan_batches(&dataset.prompts, config.batch_size, config.seed, 0);
        let mut metrics_text = String::new();
        for step in 1..=4u64 {
            assert!(step <= epoch_len, "interruption stays inside epoch 0");
            let batch = &batches[(step - 1) as usize];
            let (losses, grads, anchor_text) =
                train_step(&backend, &dataset, &config, batch, step).unwrap();
            adam.apply(
                &mut backend.denoiser,
                &grads,
                config.learning_rate,
                config.adam_beta1,
                config.adam_beta2,
                config.adam_epsilon,
            );
            let record = TrainStepRecord {
                step,
                losses,
                prompt: batch.prompt.clone(),
                anchor_prompt: anchor_text,
                alpha: losses.alpha_used,
                wall_time_ms: 0,
            };
            metrics_text.push_str(&serde_json::to_string(&record).unwrap());
            metrics_text.push('\n');
            if step == 3 {
                snapshot(&backend.denoiser, &adam, 3, &config_toml)
                    .save(&part_dir.path().join(CHECKPOINT_FILE))
                    .unwrap();
            }
        }
        std::fs::write(part_dir.path().join(METRICS_FILE), metrics_text).unwrap();

        // Resume with the same config: truncates back to step 3, replays
        // 4..6, and lands on the exact bytes of the uninterrupted run.
        let resumed = run(&config, &dataset, part_dir.path()).unwrap();
        assert_eq!(resumed.steps_run, 3, "resume starts after the checkpoint");
        assert_eq!(
            resumed.records.iter().map(|r| r.step).collect::<Vec<_>>(),
            vec![4, 5, 6]
        );

        let full_metrics = std::fs::read(full_dir.path().join(METRICS_FILE)).unwrap();
        let part_metrics = std::fs::read(part_dir.path().join(METRICS_FILE)).unwrap();
        assert_eq!(full_metrics, part_metrics);
        let full_ckpt = std::fs::read(full_dir.path().join(CHECKPOINT_FILE)).unwrap();
        let part_ckpt = std::fs::read(part_dir.path().join(CHECKPOINT_FILE)).unwrap();
        assert_eq!(full_ckpt, part_ckpt);
    }

    #[test]
    fn budgeted_run_stops_early_and_resumes_to_identical_artifacts() {
        let dataset = mini_dataset();
        let config = TrainConfig {
            max_steps: Some(6),
            ..fast_config()
        };

        let full_dir = tempfile::tempdir().unwrap();
        run(&config, &dataset, full_dir.path()).unwrap();

        let cut_dir = tempfile::tempdir().unwrap();
        let first = run_with_budget(&config, &dataset, cut_dir.path(), Some(4)).unwrap();
        assert_eq!(first.steps_run, 4);
        assert_eq!(first.total_steps, 6);
        let partial = std::fs::read_to_string(cut_dir.path().join(METRICS_FILE)).unwrap();
        assert_eq!(partial.lines().count(), 4, "one metrics line per executed step");

        let second = run(&config, &dataset, cut_dir.path()).unwrap();
        assert_eq!(second.steps_run, 2);
        assert_eq!(
            second.records.iter().map(|r| r.step).collect::<Vec<_>>(),
            vec![5, 6]
        );

        for name in [METRICS_FILE, CHECKPOINT_FILE, CONFIG_LOCK_FILE] {
            assert_eq!(
                std::fs::read(full_dir.path().join(name)).unwrap(),
                std::fs::read(cut_dir.path().join(name)).unwrap(),
                "{name} differs between budgeted+resumed and unbudgeted runs"
            );
        }
    }

    #[test]
    fn rerun_of_finished_run_is_a_noop() {
        let dataset = mini_dataset();
        let config = TrainConfig {
            max_steps: Some(2),
            gen_every: 0,
            ..fast_config()
        };
        let dir = tempfile::tempdir().unwrap();
        let first = run(&config, &dataset, dir.path()).unwrap();
        assert_eq!(first.steps_run, 2);
        let metrics_before = std::fs::read(&first.metrics_path).unwrap();
        let again = run(&config, &dataset, dir.path()).unwrap();
        assert_eq!(again.steps_run, 0);
        assert!(again.records.is_empty());
        assert_eq!(std::fs::read(&again.metrics_path).unwrap(), metrics_before);
    }

    #[test]
    fn run_rejects_config_changes() {
        let dataset = mini_dataset();
        let config = TrainConfig {
            max_steps: Some(1),
            gen_every: 0,
            ..fast_config()
        };
        let dir = tempfile::tempdir().unwrap();
        run(&config, &dataset, dir.path()).unwrap();

        let changed = TrainConfig {
            learning_rate: 5e-3,
            ..config.clone()
        };
        assert!(matches!(
            run(&changed, &dataset, dir.path()),
            Err(TrainError::ConfigMismatch { .. })
        ));

        // Same drift caught at the checkpoint layer when the lock is gone.
        std::fs::remove_file(dir.path().join(CONFIG_LOCK_FILE)).unwrap();
        assert!(matches!(
            run(&changed, &dataset, dir.path()),
            Err(TrainError::ResumeConfigMismatch { .. })
        ));
    }

    #[test]
    fn truncate_metrics_drops_lines_past_checkpoint() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join(METRICS_FILE);
        let mut text = String::new();
        for step in 1..=7u64 {
            let record = TrainStepRecord {
                step,
                losses: total_loss(
                    0.5,
                    &rdg(1.0, 0.0, 0.0),
                    0.0,
                    &LossWeights::default(),
                ),
                prompt: "p".to_string(),
                anchor_prompt: "a".to_string(),
                alpha: 1.0,
                wall_time_ms: 0,
            };
            text.push_str(&serde_json::to_string(&record).unwrap());
            text.push('\n');
        }
        std::fs::write(&path, text).unwrap();
        assert_eq!(truncate_metrics(&path, 5).unwrap(), 5);
        let kept = std::fs::read_to_string(&path).unwrap();
        assert_eq!(kept.lines().count(), 5);
    }
}
