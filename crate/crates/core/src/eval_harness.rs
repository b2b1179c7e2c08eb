//! Evaluation protocol for interaction-aware generation: caption-based
//! text-to-text similarity under two embedding backends, joint text-to-image
//! similarity, per-class HOI detection accuracy in Default and Known-Object
//! settings over Full and Rare splits, and VQA-based alignment scores.
//!
//! Heavy models (captioner, detector, VQA, embedding spaces) sit behind
//! ports with deterministic toy and scripted implementations, so every
//! metric has an exact hand-tallied oracle in the tests.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::guidance_losses::FeatureVector;
use crate::hoi_data::{article_for, HOITriplet};
use crate::model_adapters::{
    discover_backends, BackendError, Image, ImageEncoderPort, TextEncoderPort, ToyImageEncoder,
    ToyTextEncoder,
};
use crate::{Feature, Real};

/// Classes with fewer samples than this in the training distribution form
/// the Rare split.
pub const RARE_THRESHOLD: u64 = 10;

/// Version stamp written into serialized reports.
pub const REPORT_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("empty evaluation input")]
    EmptyInput,
    #[error("aligned lists differ in length: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
    #[error("embedding dims differ: {left} vs {right}")]
    DimMismatch { left: usize, right: usize },
    #[error("backend '{backend}' is text-only and cannot embed images")]
    TextOnly { backend: String },
    #[error("backend '{backend}' has no embedding for text {text:?}")]
    MissingEmbedding { backend: String, text: String },
    #[error("detector contract violation: {0}")]
    DetectorContract(String),
    #[error("port '{port}' returned probability {value} outside [0,1]")]
    BadProbability { port: String, value: Real },
    #[error("no classes in the requested split")]
    EmptySplit,
    #[error("unknown similarity backend '{key}'; expected one of: clip_like, sentence_like")]
    UnknownSimilarityKey { key: String },
    #[error("port '{port}': {message}")]
    Port { port: String, message: String },
    #[error("{path}: {message}")]
    File { path: PathBuf, message: String },
    #[error(transparent)]
    Backend(#[from] BackendError),
}

fn file_err(path: &Path) -> impl FnOnce(std::io::Error) -> EvalError + '_ {
    move |e| EvalError::File {
        path: path.to_path_buf(),
        message: e.to_string(),
    }
}

// ---------------------------------------------------------------------------
// Ports
// ---------------------------------------------------------------------------

/// Which embedding family a similarity backend plays the role of.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SimilarityKind {
    /// Joint text/image space (CLIP-style).
    ClipLike,
    /// Text-only sentence-embedding space (S-BERT-style).
    SentenceLike,
}

pub trait SimilarityBackendPort {
    fn id(&self) -> &str;
    fn kind(&self) -> SimilarityKind;
    /// Unit-norm text embedding.
    fn embed_text(&self, text: &str) -> Result<Feature, EvalError>;
    /// Unit-norm image embedding in the same space; text-only backends
    /// refuse.
    fn embed_image(&self, _image: &Image) -> Result<Feature, EvalError> {
        Err(EvalError::TextOnly {
            backend: self.id().to_string(),
        })
    }
}

pub trait CaptionerPort {
    /// Stable identifier; part of the caption-cache key.
    fn id(&self) -> &str;
    fn caption(&self, image: &Image) -> Result<String, EvalError>;
}

/// One ranked detection: a triplet with its confidence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub triplet: HOITriplet,
    pub confidence: Real,
}

pub trait HOIDetectorPort {
    fn id(&self) -> &str;
    /// Ranked detections, confidences in [0,1] descending. An empty list is
    /// legal and scores as a miss.
    fn detect(&self, image: &Image) -> Result<Vec<Detection>, EvalError>;
}

/// Renders the yes/no alignment question for a triplet, with the same
/// article rule the prompt template uses.
pub fn vqa_question(triplet: &HOITriplet) -> String {
    format!(
        "Is this figure showing a {} {} {} {}? Please answer yes or no",
        triplet.human,
        triplet.verb,
        article_for(&triplet.object),
        triplet.object
    )
}

pub trait VQAPort {
    fn id(&self) -> &str;
    /// Probability of answering "yes" to the question about the image.
    fn yes_probability(&self, image: &Image, question: &str) -> Result<Real, EvalError>;
    /// Image-to-text alignment score. The scoring prompt for this variant
    /// is not pinned anywhere authoritative, so the default reuses the
    /// yes/no question template; ports with a native alignment head can
    /// override.
    fn alignment_probability(
        &self,
        image: &Image,
        triplet: &HOITriplet,
    ) -> Result<Real, EvalError> {
        self.yes_probability(image, &vqa_question(triplet))
    }
}

// ---------------------------------------------------------------------------
// Evaluation inputs
// ---------------------------------------------------------------------------

/// One evaluation sample: the class, its reference prompt text, and the
/// generated image under test.
#[derive(Debug, Clone)]
pub struct EvalItem {
    pub triplet: HOITriplet,
    pub prompt: String,
    pub image: Image,
}

/// Classes under the rare threshold in the training distribution.
pub fn rare_classes(training_counts: &BTreeMap<HOITriplet, u64>) -> BTreeSet<HOITriplet> {
    training_counts
        .iter()
        .filter(|(_, &n)| n < RARE_THRESHOLD)
        .map(|(t, _)| t.clone())
        .collect()
}

fn checked_probability(port: &str, value: Real) -> Result<Real, EvalError> {
    if !(0.0..=1.0).contains(&value) {
        return Err(EvalError::BadProbability {
            port: port.to_string(),
            value,
        });
    }
    Ok(value)
}

fn cosine(a: &Feature, b: &Feature) -> Result<Real, EvalError> {
    if a.dim() != b.dim() {
        return Err(EvalError::DimMismatch {
            left: a.dim(),
            right: b.dim(),
        });
    }
    Ok(a.values().dot(b.values()))
}

// ---------------------------------------------------------------------------
// Caption cache
// ---------------------------------------------------------------------------

/// Captions keyed by (image content hash, captioner id). Captioning
/// dominates evaluation cost against real backends, so the cache persists
/// as JSON between runs; hit/miss counters stay in memory.
#[derive(Debug, Default, Clone, Serialize, Deserialize)]
pub struct CaptionCache {
    entries: BTreeMap<String, String>,
    #[serde(skip)]
    hits: u64,
    #[serde(skip)]
    misses: u64,
}

impl CaptionCache {
    pub fn new() -> Self {
        Self::default()
    }

    fn key(image: &Image, captioner_id: &str) -> String {
        format!("{:016x}/{captioner_id}", image.content_hash())
    }

    /// Returns the cached caption or produces and stores a fresh one.
    pub fn caption(
        &mut self,
        image: &Image,
        captioner: &dyn CaptionerPort,
    ) -> Result<String, EvalError> {
        let key = Self::key(image, captioner.id());
        if let Some(hit) = self.entries.get(&key) {
            self.hits += 1;
            return Ok(hit.clone());
        }
        let caption = captioner.caption(image)?;
        self.entries.insert(key, caption.clone());
        self.misses += 1;
        Ok(caption)
    }

    pub fn hits(&self) -> u64 {
        self.hits
    }

    pub fn misses(&self) -> u64 {
        self.misses
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn save(&self, path: &Path) -> Result<(), EvalError> {
        let json = serde_json::to_string_pretty(self).expect("cache serializes");
        std::fs::write(path, json).map_err(file_err(path))
    }

    pub fn load(path: &Path) -> Result<Self, EvalError> {
        let text = std::fs::read_to_string(path).map_err(file_err(path))?;
        serde_json::from_str(&text).map_err(|e| EvalError::File {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
    }
}

// ---------------------------------------------------------------------------
// Metrics
// ---------------------------------------------------------------------------

/// Mean cosine between each reference text and the caption of its image,
/// in the given embedding space.
pub fn t2t_similarity(
    gt_texts: &[String],
    images: &[Image],
    captioner: &dyn CaptionerPort,
    backend: &dyn SimilarityBackendPort,
    cache: &mut CaptionCache,
) -> Result<Real, EvalError> {
    if gt_texts.len() != images.len() {
        return Err(EvalError::LengthMismatch {
            left: gt_texts.len(),
            right: images.len(),
        });
    }
    if gt_texts.is_empty() {
        return Err(EvalError::EmptyInput);
    }
    let mut sum = 0.0;
    for (text, image) in gt_texts.iter().zip(images) {
        let caption = cache.caption(image, captioner)?;
        sum += cosine(&backend.embed_text(text)?, &backend.embed_text(&caption)?)?;
    }
    Ok(sum / gt_texts.len() as Real)
}

/// Mean cosine between each prompt and its image in a joint embedding
/// space; text-only backends are a configuration error.
pub fn t2i_similarity(
    prompts: &[String],
    images: &[Image],
    backend: &dyn SimilarityBackendPort,
) -> Result<Real, EvalError> {
    if prompts.len() != images.len() {
        return Err(EvalError::LengthMismatch {
            left: prompts.len(),
            right: images.len(),
        });
    }
    if prompts.is_empty() {
        return Err(EvalError::EmptyInput);
    }
    let mut sum = 0.0;
    for (prompt, image) in prompts.iter().zip(images) {
        sum += cosine(&backend.embed_text(prompt)?, &backend.embed_image(image)?)?;
    }
    Ok(sum / prompts.len() as Real)
}

/// Detection matching rule.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DetectionSetting {
    /// Top-1 detection must match both verb and object.
    Default,
    /// Candidates are first restricted to the ground-truth object; the top
    /// remaining verb must match.
    KnownObject,
}

fn validate_detections(port: &str, detections: &[Detection]) -> Result<(), EvalError> {
    let mut prev = Real::INFINITY;
    for d in detections {
        if !(0.0..=1.0).contains(&d.confidence) {
            return Err(EvalError::DetectorContract(format!(
                "'{port}' confidence {} outside [0,1]",
                d.confidence
            )));
        }
        if d.confidence > prev {
            return Err(EvalError::DetectorContract(format!(
                "'{port}' confidences not descending ({} after {prev})",
                d.confidence
            )));
        }
        prev = d.confidence;
    }
    Ok(())
}

fn detection_hit(gt: &HOITriplet, detections: &[Detection], setting: DetectionSetting) -> bool {
    match setting {
        DetectionSetting::Default => detections
            .first()
            .is_some_and(|d| d.triplet.verb == gt.verb && d.triplet.object == gt.object),
        DetectionSetting::KnownObject => detections
            .iter()
            .find(|d| d.triplet.object == gt.object)
            .is_some_and(|d| d.triplet.verb == gt.verb),
    }
}

/// Per-class hit fractions under one detection setting. Images whose
/// detector output is empty count as misses and are tallied in the second
/// return value (and logged).
pub fn per_class_accuracy(
    items: &[EvalItem],
    detector: &dyn HOIDetectorPort,
    setting: DetectionSetting,
) -> Result<(BTreeMap<HOITriplet, Real>, usize), EvalError> {
    if items.is_empty() {
        return Err(EvalError::EmptyInput);
    }
    let mut hits: BTreeMap<HOITriplet, (u64, u64)> = BTreeMap::new();
    let mut empty_outputs = 0usize;
    for item in items {
        let detections = detector.detect(&item.image)?;
        validate_detections(detector.id(), &detections)?;
        if detections.is_empty() {
            empty_outputs += 1;
            log::warn!(
                "detector '{}' returned no detections for class '{}'; counted as miss",
                detector.id(),
                item.triplet
            );
        }
        let entry = hits.entry(item.triplet.clone()).or_insert((0, 0));
        entry.1 += 1;
        if detection_hit(&item.triplet, &detections, setting) {
            entry.0 += 1;
        }
    }
    let per_class = hits
        .into_iter()
        .map(|(t, (hit, total))| (t, hit as Real / total as Real))
        .collect();
    Ok((per_class, empty_outputs))
}

/// Macro average over all classes, or over the intersection with `subset`.
pub fn macro_average(
    per_class: &BTreeMap<HOITriplet, Real>,
    subset: Option<&BTreeSet<HOITriplet>>,
) -> Result<Real, EvalError> {
    let kept: Vec<Real> = per_class
        .iter()
        .filter(|(t, _)| subset.is_none_or(|s| s.contains(*t)))
        .map(|(_, &v)| v)
        .collect();
    if kept.is_empty() {
        return Err(EvalError::EmptySplit);
    }
    Ok(kept.iter().sum::<Real>() / kept.len() as Real)
}

/// Macro-averaged detection accuracy for one setting and split.
pub fn hoi_accuracy(
    items: &[EvalItem],
    detector: &dyn HOIDetectorPort,
    setting: DetectionSetting,
    subset: Option<&BTreeSet<HOITriplet>>,
) -> Result<Real, EvalError> {
    let (per_class, _) = per_class_accuracy(items, detector, setting)?;
    macro_average(&per_class, subset)
}

/// Mean yes-probability of the rendered alignment question per item.
pub fn vqa_score(items: &[EvalItem], vqa: &dyn VQAPort) -> Result<Real, EvalError> {
    if items.is_empty() {
        return Err(EvalError::EmptyInput);
    }
    let mut sum = 0.0;
    for item in items {
        let p = vqa.yes_probability(&item.image, &vqa_question(&item.triplet))?;
        sum += checked_probability(vqa.id(), p)?;
    }
    Ok(sum / items.len() as Real)
}

/// Mean image-to-text alignment probability per item.
pub fn i2t_alignment(items: &[EvalItem], vqa: &dyn VQAPort) -> Result<Real, EvalError> {
    if items.is_empty() {
        return Err(EvalError::EmptyInput);
    }
    let mut sum = 0.0;
    for item in items {
        let p = vqa.alignment_probability(&item.image, &item.triplet)?;
        sum += checked_probability(vqa.id(), p)?;
    }
    Ok(sum / items.len() as Real)
}

// ---------------------------------------------------------------------------
// Report
// ---------------------------------------------------------------------------

/// Default/Known-Object hit fractions for one class.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassAccuracy {
    pub default: Real,
    pub known_object: Real,
}

/// Full evaluation output: scalar scores keyed by metric name, the
/// per-class accuracy table, and the rare split used.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub format_version: u32,
    pub scores: BTreeMap<String, Real>,
    pub per_class_accuracy: BTreeMap<String, ClassAccuracy>,
    pub rare_classes: Vec<String>,
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, EvalError> {
        serde_json::from_str(text).map_err(|e| EvalError::File {
            path: PathBuf::from("<json>"),
            message: e.to_string(),
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), EvalError> {
        std::fs::write(path, self.to_json()).map_err(file_err(path))
    }

    pub fn load(path: &Path) -> Result<Self, EvalError> {
        let text = std::fs::read_to_string(path).map_err(file_err(path))?;
        serde_json::from_str(&text).map_err(|e| EvalError::File {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
    }

    /// Human-readable two-section table: scores, then per-class accuracy.
    pub fn render_table(&self) -> String {
        let mut out = String::new();
        out.push_str("metric            score\n");
        out.push_str("----------------  ------\n");
        for (name, value) in &self.scores {
            out.push_str(&format!("{name:<16}  {value:.4}\n"));
        }
        out.push('\n');
        out.push_str("class (human, verb, object)              default  known-object  rare\n");
        out.push_str("----------------------------------------  -------  ------------  ----\n");
        for (class, acc) in &self.per_class_accuracy {
            let rare = if self.rare_classes.contains(class) {
                "yes"
            } else {
                "no"
            };
            out.push_str(&format!(
                "{class:<40}  {:.4}   {:.4}        {rare}\n",
                acc.default, acc.known_object
            ));
        }
        out
    }
}

/// The ports a full evaluation needs.
pub struct EvalSuite<'a> {
    pub captioner: &'a dyn CaptionerPort,
    pub clip_like: &'a dyn SimilarityBackendPort,
    pub sentence_like: &'a dyn SimilarityBackendPort,
    pub detector: &'a dyn HOIDetectorPort,
    pub vqa: &'a dyn VQAPort,
}

/// Runs the whole protocol and assembles the report. Rare-split scores are
/// present only when the training distribution has rare classes among the
/// evaluated ones.
pub fn evaluate(
    items: &[EvalItem],
    training_counts: &BTreeMap<HOITriplet, u64>,
    suite: &EvalSuite<'_>,
    cache: &mut CaptionCache,
) -> Result<EvalReport, EvalError> {
    if items.is_empty() {
        return Err(EvalError::EmptyInput);
    }
    let prompts: Vec<String> = items.iter().map(|i| i.prompt.clone()).collect();
    let images: Vec<Image> = items.iter().map(|i| i.image.clone()).collect();
    let rare = rare_classes(training_counts);

    let mut scores = BTreeMap::new();
    scores.insert(
        "t2t_clip".to_string(),
        t2t_similarity(&prompts, &images, suite.captioner, suite.clip_like, cache)?,
    );
    scores.insert(
        "t2t_sbert".to_string(),
        t2t_similarity(&prompts, &images, suite.captioner, suite.sentence_like, cache)?,
    );
    scores.insert(
        "t2i".to_string(),
        t2i_similarity(&prompts, &images, suite.clip_like)?,
    );

    let (def_class, _) = per_class_accuracy(items, suite.detector, DetectionSetting::Default)?;
    let (ko_class, _) = per_class_accuracy(items, suite.detector, DetectionSetting::KnownObject)?;
    scores.insert("hoi_def_full".to_string(), macro_average(&def_class, None)?);
    scores.insert("hoi_ko_full".to_string(), macro_average(&ko_class, None)?);
    if def_class.keys().any(|t| rare.contains(t)) {
        scores.insert(
            "hoi_def_rare".to_string(),
            macro_average(&def_class, Some(&rare))?,
        );
        scores.insert(
            "hoi_ko_rare".to_string(),
            macro_average(&ko_class, Some(&rare))?,
        );
    }

    scores.insert("vqa".to_string(), vqa_score(items, suite.vqa)?);
    scores.insert("i2t_align".to_string(), i2t_alignment(items, suite.vqa)?);

    let per_class_accuracy = def_class
        .iter()
        .map(|(t, &default)| {
            (
                t.to_string(),
                ClassAccuracy {
                    default,
                    known_object: ko_class[t],
                },
            )
        })
        .collect();

    Ok(EvalReport {
        format_version: REPORT_FORMAT_VERSION,
        scores,
        per_class_accuracy,
        rare_classes: rare.iter().map(|t| t.to_string()).collect(),
    })
}

// ---------------------------------------------------------------------------
// Toy, scripted, and oracle ports
// ---------------------------------------------------------------------------

/// Joint text/image toy space: the deterministic 32-d toy encoders.
#[derive(Debug, Clone)]
pub struct ToyJointBackend {
    id: String,
    text: ToyTextEncoder,
    image: ToyImageEncoder,
}

impl Default for ToyJointBackend {
    fn default() -> Self {
        Self {
            id: "toy-joint".to_string(),
            text: ToyTextEncoder::default(),
            image: ToyImageEncoder::default(),
        }
    }
}

impl SimilarityBackendPort for ToyJointBackend {
    fn id(&self) -> &str {
        &self.id
    }

    fn kind(&self) -> SimilarityKind {
        SimilarityKind::ClipLike
    }

    fn embed_text(&self, text: &str) -> Result<Feature, EvalError> {
        Ok(self.text.encode(text)?)
    }

    fn embed_image(&self, image: &Image) -> Result<Feature, EvalError> {
        Ok(self.image.encode(image)?)
    }
}

/// Text-only toy sentence space (distinct seed from the joint space).
#[derive(Debug, Clone)]
pub struct ToySentenceBackend {
    id: String,
    text: ToyTextEncoder,
}

impl Default for ToySentenceBackend {
    fn default() -> Self {
        Self {
            id: "toy-sentence".to_string(),
            text: ToyTextEncoder::new(0x5b3e_27c1),
        }
    }
}

impl SimilarityBackendPort for ToySentenceBackend {
    fn id(&self) -> &str {
        &self.id
    }

    fn kind(&self) -> SimilarityKind {
        SimilarityKind::SentenceLike
    }

    fn embed_text(&self, text: &str) -> Result<Feature, EvalError> {
        Ok(self.text.encode(text)?)
    }
}

/// Deterministic stand-in captioner: captions name the image content hash.
/// Useful for cache and plumbing tests, not for semantic scores.
#[derive(Debug, Clone)]
pub struct ToyCaptioner {
    id: String,
}

impl Default for ToyCaptioner {
    fn default() -> Self {
        Self {
            id: "toy-captioner".to_string(),
        }
    }
}

impl CaptionerPort for ToyCaptioner {
    fn id(&self) -> &str {
        &self.id
    }

    fn caption(&self, image: &Image) -> Result<String, EvalError> {
        Ok(format!("an image with signature {:016x}", image.content_hash()))
    }
}

/// Captioner scripted by image content hash, with a fallback caption.
#[derive(Debug, Clone)]
pub struct ScriptedCaptioner {
    pub id: String,
    pub by_hash: BTreeMap<u64, String>,
    pub fallback: String,
}

impl CaptionerPort for ScriptedCaptioner {
    fn id(&self) -> &str {
        &self.id
    }

    fn caption(&self, image: &Image) -> Result<String, EvalError> {
        Ok(self
            .by_hash
            .get(&image.content_hash())
            .cloned()
            .unwrap_or_else(|| self.fallback.clone()))
    }
}

/// Detector scripted by image content hash; unknown images yield no
/// detections.
#[derive(Debug, Clone, Default)]
pub struct ScriptedDetector {
    pub id: String,
    pub by_hash: BTreeMap<u64, Vec<Detection>>,
}

impl HOIDetectorPort for ScriptedDetector {
    fn id(&self) -> &str {
        &self.id
    }

    fn detect(&self, image: &Image) -> Result<Vec<Detection>, EvalError> {
        Ok(self
            .by_hash
            .get(&image.content_hash())
            .cloned()
            .unwrap_or_default())
    }
}

/// VQA port scripted by image content hash, with a fallback probability.
#[derive(Debug, Clone)]
pub struct ScriptedVqa {
    pub id: String,
    pub by_hash: BTreeMap<u64, Real>,
    pub fallback: Real,
}

impl VQAPort for ScriptedVqa {
    fn id(&self) -> &str {
        &self.id
    }

    fn yes_probability(&self, image: &Image, _question: &str) -> Result<Real, EvalError> {
        Ok(self
            .by_hash
            .get(&image.content_hash())
            .copied()
            .unwrap_or(self.fallback))
    }
}

/// Every port rigged to the ground truth of a known item set: captions echo
/// the reference prompt, detections echo the label at confidence 1, VQA
/// always answers yes, and image embeddings equal the prompt embedding.
/// The whole report scores 1.0 on such items — the end-to-end fixture for
/// wiring tests.
#[derive(Debug, Clone)]
pub struct OracleSuite {
    by_hash: BTreeMap<u64, (HOITriplet, String)>,
    text: ToyTextEncoder,
    kind: SimilarityKind,
    id: String,
}

impl OracleSuite {
    pub fn new(items: &[EvalItem]) -> Self {
        Self {
            by_hash: items
                .iter()
                .map(|i| (i.image.content_hash(), (i.triplet.clone(), i.prompt.clone())))
                .collect(),
            text: ToyTextEncoder::default(),
            kind: SimilarityKind::ClipLike,
            id: "oracle".to_string(),
        }
    }

    /// The same oracle presented as a sentence-like backend.
    pub fn as_sentence_like(&self) -> Self {
        Self {
            kind: SimilarityKind::SentenceLike,
            id: "oracle-sentence".to_string(),
            ..self.clone()
        }
    }

    fn known(&self, image: &Image) -> Result<&(HOITriplet, String), EvalError> {
        self.by_hash
            .get(&image.content_hash())
            .ok_or_else(|| EvalError::Port {
                port: self.id.clone(),
                message: "image not in the oracle's item set".to_string(),
            })
    }
}

impl CaptionerPort for OracleSuite {
    fn id(&self) -> &str {
        &self.id
    }

    fn caption(&self, image: &Image) -> Result<String, EvalError> {
        Ok(self.known(image)?.1.clone())
    }
}

impl HOIDetectorPort for OracleSuite {
    fn id(&self) -> &str {
        &self.id
    }

    fn detect(&self, image: &Image) -> Result<Vec<Detection>, EvalError> {
        Ok(vec![Detection {
            triplet: self.known(image)?.0.clone(),
            confidence: 1.0,
        }])
    }
}

impl VQAPort for OracleSuite {
    fn id(&self) -> &str {
        &self.id
    }

    fn yes_probability(&self, _image: &Image, _question: &str) -> Result<Real, EvalError> {
        Ok(1.0)
    }
}

impl SimilarityBackendPort for OracleSuite {
    fn id(&self) -> &str {
        &self.id
    }

    fn kind(&self) -> SimilarityKind {
        self.kind
    }

    fn embed_text(&self, text: &str) -> Result<Feature, EvalError> {
        Ok(self.text.encode(text)?)
    }

    /// Image embedding defined as the embedding of the image's own prompt,
    /// so prompt-image cosine is exactly 1.
    fn embed_image(&self, image: &Image) -> Result<Feature, EvalError> {
        let (_, prompt) = self.known(image)?;
        Ok(self.text.encode(prompt)?)
    }
}

// ---------------------------------------------------------------------------
// File-backed embedding backend and resolution
// ---------------------------------------------------------------------------

/// Embeddings read from a JSON map of text to vector. Stands in for a real
/// CLIP/S-BERT service: export real embeddings once, then evaluate offline
/// and deterministically.
#[derive(Debug, Clone)]
pub struct FileEmbeddingBackend {
    id: String,
    kind: SimilarityKind,
    embeddings: BTreeMap<String, Feature>,
}

impl FileEmbeddingBackend {
    /// Loads and unit-normalizes a `{text: [f64, …]}` JSON map.
    pub fn load(path: &Path, kind: SimilarityKind, id: &str) -> Result<Self, EvalError> {
        let text = std::fs::read_to_string(path).map_err(file_err(path))?;
        let raw: BTreeMap<String, Vec<Real>> =
            serde_json::from_str(&text).map_err(|e| EvalError::File {
                path: path.to_path_buf(),
                message: e.to_string(),
            })?;
        let mut embeddings = BTreeMap::new();
        for (key, values) in raw {
            let feature = FeatureVector::normalized(ndarray::Array1::from_vec(values))
                .map_err(|e| EvalError::File {
                    path: path.to_path_buf(),
                    message: format!("embedding for {key:?}: {e}"),
                })?;
            embeddings.insert(key, feature);
        }
        Ok(Self {
            id: id.to_string(),
            kind,
            embeddings,
        })
    }
}

impl SimilarityBackendPort for FileEmbeddingBackend {
    fn id(&self) -> &str {
        &self.id
    }

    fn kind(&self) -> SimilarityKind {
        self.kind
    }

    fn embed_text(&self, text: &str) -> Result<Feature, EvalError> {
        self.embeddings
            .get(text)
            .cloned()
            .ok_or_else(|| EvalError::MissingEmbedding {
                backend: self.id.clone(),
                text: text.to_string(),
            })
    }
}

/// Resolves `clip_like` / `sentence_like` to a file-backed backend when a
/// matching `embedding_file` manifest is discovered, falling back to the
/// toy spaces otherwise.
pub fn resolve_similarity_backend(
    key: &str,
) -> Result<Box<dyn SimilarityBackendPort>, EvalError> {
    let kind = match key {
        "clip_like" => SimilarityKind::ClipLike,
        "sentence_like" => SimilarityKind::SentenceLike,
        _ => {
            return Err(EvalError::UnknownSimilarityKey {
                key: key.to_string(),
            })
        }
    };
    for found in discover_backends()? {
        if found.manifest.name == key && found.manifest.kind == "embedding_file" {
            let path = found.data_path.ok_or_else(|| EvalError::File {
                path: found.manifest_path.clone(),
                message: "manifest has no 'path' field".to_string(),
            })?;
            return Ok(Box::new(FileEmbeddingBackend::load(&path, kind, key)?));
        }
    }
    Ok(match kind {
        SimilarityKind::ClipLike => Box::new(ToyJointBackend::default()),
        SimilarityKind::SentenceLike => Box::new(ToySentenceBackend::default()),
    })
}
