//! Human-object-interaction annotations and everything derived from them:
//! prompt realignment, anchor-verb tables, effective-number class weights,
//! interaction masks, and ground-truth interaction regions.
//!
//! Annotations arrive as JSON lines, one image per line:
//!
//! ```json
//! {"image_id":"img_0001","width":640,"height":480,
//!  "pairs":[{"human_box":[0.1,0.2,0.4,0.9],"object_box":[0.3,0.5,0.9,1.0],
//!            "human":"person","verb":"riding","object":"bicycle"}]}
//! ```
//!
//! Box coordinates are normalized to `[0,1]`. Structural problems (bad JSON,
//! missing keys, empty labels, no pairs) fail the load with a line number;
//! geometric problems (zero-area or out-of-range boxes) reject only the
//! offending record and are reported as warnings.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io::BufRead;
use std::ops::Range;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::attention_geometry::{region_from_centers, Centroid, InteractionRegion, RegionParams};
use crate::scalar::{powi, Field};
use crate::Real;

/// Verb label used for the dataset's no-interaction classes; those classes
/// are excluded from realignment.
pub const NO_INTERACTION_VERB: &str = "and";

#[derive(Debug, Error)]
pub enum DataError {
    #[error("failed to read {path}")]
    ReadFile {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: malformed annotation record: {message}")]
    MalformedRecord { line: usize, message: String },
    #[error("line {line}: duplicate image_id {image_id:?}")]
    DuplicateImage { image_id: String, line: usize },
    #[error("image {image_id:?} has no pair matching triplet ({triplet})")]
    NoMatchingPair { image_id: String, triplet: String },
    #[error("object {0:?} is not present in the anchor table")]
    UnknownObject(String),
    #[error("effective number needs a total sample count of at least 2, got {0}")]
    TotalTooSmall(u64),
    #[error("effective number needs a positive per-class count, got 0")]
    EmptyClass,
    #[error("cannot build a balance table from an empty prompt list")]
    NoPrompts,
}

/// A (human, verb, object) class label. The verb may contain spaces
/// ("sitting on"); none of the fields may be empty.
#[derive(
    Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
pub struct HOITriplet {
    pub human: String,
    pub verb: String,
    pub object: String,
}

impl HOITriplet {
    pub fn new(
        human: impl Into<String>,
        verb: impl Into<String>,
        object: impl Into<String>,
    ) -> Self {
        Self {
            human: human.into(),
            verb: verb.into(),
            object: object.into(),
        }
    }
}

impl fmt::Display for HOITriplet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}, {}, {}", self.human, self.verb, self.object)
    }
}

/// Axis-aligned box in normalized image coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub x_min: Real,
    pub y_min: Real,
    pub x_max: Real,
    pub y_max: Real,
}

impl BoundingBox {
    pub fn new(x_min: Real, y_min: Real, x_max: Real, y_max: Real) -> Self {
        Self {
            x_min,
            y_min,
            x_max,
            y_max,
        }
    }

    pub fn from_corners(c: [Real; 4]) -> Self {
        Self::new(c[0], c[1], c[2], c[3])
    }

    /// Positive area, coordinates in range, all finite.
    pub fn is_valid(&self) -> bool {
        let coords = [self.x_min, self.y_min, self.x_max, self.y_max];
        coords.iter().all(|v| v.is_finite() && (0.0..=1.0).contains(v))
            && self.x_min < self.x_max
            && self.y_min < self.y_max
    }

    pub fn center(&self) -> (Real, Real) {
        (
            (self.x_min + self.x_max) / 2.0,
            (self.y_min + self.y_max) / 2.0,
        )
    }
}

/// One annotated human-object pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HOIPair {
    pub triplet: HOITriplet,
    pub human_box: BoundingBox,
    pub object_box: BoundingBox,
}

/// All annotations for one image. An image may carry several distinct
/// triplets and several pairs per triplet.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationRecord {
    pub image_id: String,
    pub width: u32,
    pub height: u32,
    pub pairs: Vec<HOIPair>,
}

/// One realigned class: a triplet, its prompt text, and the images that
/// carry it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptRecord {
    pub triplet: HOITriplet,
    pub text: String,
    pub image_ids: Vec<String>,
    pub sample_count: u64,
}

/// A record the loader dropped, with the reason.
#[derive(Debug, Clone)]
pub struct Rejection {
    pub line: usize,
    pub image_id: String,
    pub reason: String,
}

/// Loaded annotations plus per-record rejections (zero-area or out-of-range
/// boxes). Structural errors abort the load instead.
#[derive(Debug, Clone)]
pub struct LoadOutcome {
    pub records: Vec<AnnotationRecord>,
    pub rejections: Vec<Rejection>,
}

// Wire format for one JSONL line; pairs carry the label strings inline.
#[derive(Debug, Serialize, Deserialize)]
struct RawRecord {
    image_id: String,
    width: u32,
    height: u32,
    pairs: Vec<RawPair>,
}

#[derive(Debug, Serialize, Deserialize)]
struct RawPair {
    human_box: [Real; 4],
    object_box: [Real; 4],
    human: String,
    verb: String,
    object: String,
}

/// Reads a JSON-lines annotation file. Records come back sorted by
/// `image_id`; duplicate image ids are an error.
pub fn load_annotations(path: &Path) -> Result<LoadOutcome, DataError> {
    let file = std::fs::File::open(path).map_err(|source| DataError::ReadFile {
        path: path.to_path_buf(),
        source,
    })?;
    let reader = std::io::BufReader::new(file);
    let mut records: Vec<(usize, AnnotationRecord)> = Vec::new();
    let mut rejections = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line.map_err(|source| DataError::ReadFile {
            path: path.to_path_buf(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let raw: RawRecord =
            serde_json::from_str(&line).map_err(|e| DataError::MalformedRecord {
                line: line_no,
                message: e.to_string(),
            })?;
        match validate_record(raw, line_no)? {
            Ok(record) => records.push((line_no, record)),
            Err(rejection) => {
                log::warn!(
                    "rejecting annotation record at line {}: {}",
                    rejection.line,
                    rejection.reason
                );
                rejections.push(rejection);
            }
        }
    }
    records.sort_by(|a, b| a.1.image_id.cmp(&b.1.image_id));
    for pair in records.windows(2) {
        if pair[0].1.image_id == pair[1].1.image_id {
            return Err(DataError::DuplicateImage {
                image_id: pair[1].1.image_id.clone(),
                line: pair[1].0,
            });
        }
    }
    Ok(LoadOutcome {
        records: records.into_iter().map(|(_, r)| r).collect(),
        rejections,
    })
}

/// Structural problems are `Err(DataError)`; geometric problems come back
/// as `Ok(Err(Rejection))` so the caller can keep going.
fn validate_record(
    raw: RawRecord,
    line: usize,
) -> Result<Result<AnnotationRecord, Rejection>, DataError> {
    let malformed = |message: String| DataError::MalformedRecord { line, message };
    if raw.image_id.is_empty() {
        return Err(malformed("empty image_id".into()));
    }
    if raw.width == 0 || raw.height == 0 {
        return Err(malformed(format!(
            "image size {}x{} is not positive",
            raw.width, raw.height
        )));
    }
    if raw.pairs.is_empty() {
        return Err(malformed("record has no pairs".into()));
    }
    let mut pairs = Vec::with_capacity(raw.pairs.len());
    for (i, p) in raw.pairs.into_iter().enumerate() {
        if p.human.is_empty() || p.verb.is_empty() || p.object.is_empty() {
            return Err(malformed(format!("pair {i} has an empty label")));
        }
        let human_box = BoundingBox::from_corners(p.human_box);
        let object_box = BoundingBox::from_corners(p.object_box);
        for (name, b) in [("human_box", &human_box), ("object_box", &object_box)] {
            if !b.is_valid() {
                return Ok(Err(Rejection {
                    line,
                    image_id: raw.image_id,
                    reason: format!(
                        "pair {i} {name} [{}, {}, {}, {}] is degenerate or out of range",
                        b.x_min, b.y_min, b.x_max, b.y_max
                    ),
                }));
            }
        }
        pairs.push(HOIPair {
            triplet: HOITriplet::new(p.human, p.verb, p.object),
            human_box,
            object_box,
        });
    }
    Ok(Ok(AnnotationRecord {
        image_id: raw.image_id,
        width: raw.width,
        height: raw.height,
        pairs,
    }))
}

/// Writes records back out in the JSONL wire format (used by fixtures and
/// the synthetic dataset generator).
pub fn write_annotations(path: &Path, records: &[AnnotationRecord]) -> Result<(), DataError> {
    let mut out = String::new();
    for r in records {
        let raw = RawRecord {
            image_id: r.image_id.clone(),
            width: r.width,
            height: r.height,
            pairs: r
                .pairs
                .iter()
                .map(|p| RawPair {
                    human_box: [
                        p.human_box.x_min,
                        p.human_box.y_min,
                        p.human_box.x_max,
                        p.human_box.y_max,
                    ],
                    object_box: [
                        p.object_box.x_min,
                        p.object_box.y_min,
                        p.object_box.x_max,
                        p.object_box.y_max,
                    ],
                    human: p.triplet.human.clone(),
                    verb: p.triplet.verb.clone(),
                    object: p.triplet.object.clone(),
                })
                .collect(),
        };
        out.push_str(&serde_json::to_string(&raw).expect("annotation serializes"));
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|source| DataError::ReadFile {
        path: path.to_path_buf(),
        source,
    })
}

/// "a" or "an" by the object's first letter.
pub fn article_for(object: &str) -> &'static str {
    match object.chars().next().map(|c| c.to_ascii_lowercase()) {
        Some('a' | 'e' | 'i' | 'o' | 'u') => "an",
        _ => "a",
    }
}

/// Prompt text plus the byte ranges of the human, verb, and object phrases,
/// for mapping onto tokenizer spans.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptParts {
    pub text: String,
    pub human: Range<usize>,
    pub verb: Range<usize>,
    pub object: Range<usize>,
}

/// Renders "A photo of a {human} {verb} {article} {object}" and records
/// where each phrase landed.
pub fn prompt_parts(triplet: &HOITriplet) -> PromptParts {
    let mut text = String::from("A photo of a ");
    let human = text.len()..text.len() + triplet.human.len();
    text.push_str(&triplet.human);
    text.push(' ');
    let verb = text.len()..text.len() + triplet.verb.len();
    text.push_str(&triplet.verb);
    text.push(' ');
    text.push_str(article_for(&triplet.object));
    text.push(' ');
    let object = text.len()..text.len() + triplet.object.len();
    text.push_str(&triplet.object);
    PromptParts {
        text,
        human,
        verb,
        object,
    }
}

/// The class prompt for a triplet.
pub fn render_prompt(triplet: &HOITriplet) -> String {
    prompt_parts(triplet).text
}

/// Realignment result: the kept per-prompt records plus how many classes the
/// no-interaction exclusion removed.
#[derive(Debug, Clone)]
pub struct RealignOutcome {
    pub prompts: Vec<PromptRecord>,
    /// Distinct triplets before exclusion.
    pub total_classes: usize,
    /// Classes dropped because their verb is the no-interaction conjunction.
    pub excluded_classes: usize,
}

/// Groups annotations into one record per distinct triplet. An image id
/// appears under every triplet it annotates, once each; classes whose verb
/// is [`NO_INTERACTION_VERB`] are dropped.
pub fn realign_to_prompts(records: &[AnnotationRecord]) -> Vec<PromptRecord> {
    realign_outcome(records).prompts
}

/// Like [`realign_to_prompts`] but also reports exclusion counts.
pub fn realign_outcome(records: &[AnnotationRecord]) -> RealignOutcome {
    let mut by_triplet: BTreeMap<HOITriplet, BTreeSet<String>> = BTreeMap::new();
    for record in records {
        for pair in &record.pairs {
            by_triplet
                .entry(pair.triplet.clone())
                .or_default()
                .insert(record.image_id.clone());
        }
    }
    let total_classes = by_triplet.len();
    let mut prompts = Vec::new();
    let mut excluded_classes = 0;
    for (triplet, ids) in by_triplet {
        if triplet.verb == NO_INTERACTION_VERB {
            excluded_classes += 1;
            continue;
        }
        let image_ids: Vec<String> = ids.into_iter().collect();
        prompts.push(PromptRecord {
            text: render_prompt(&triplet),
            sample_count: image_ids.len() as u64,
            image_ids,
            triplet,
        });
    }
    RealignOutcome {
        prompts,
        total_classes,
        excluded_classes,
    }
}

/// Verb statistics for one object: per-verb sample counts and the verb with
/// the highest count (ties go to the lexicographically smallest verb).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnchorEntry {
    pub anchor_verb: String,
    pub counts: BTreeMap<String, u64>,
}

/// Per-object anchor verbs derived from realigned prompt counts.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnchorTable {
    pub format_version: u32,
    pub objects: BTreeMap<String, AnchorEntry>,
}

pub const TABLE_FORMAT_VERSION: u32 = 1;

/// For each object, the verb with the highest sample count wins; ties break
/// to the lexicographically smallest verb so runs are reproducible.
pub fn build_anchor_table(prompts: &[PromptRecord]) -> AnchorTable {
    let mut counts: BTreeMap<String, BTreeMap<String, u64>> = BTreeMap::new();
    for p in prompts {
        *counts
            .entry(p.triplet.object.clone())
            .or_default()
            .entry(p.triplet.verb.clone())
            .or_default() += p.sample_count;
    }
    let objects = counts
        .into_iter()
        .map(|(object, verb_counts)| {
            // Iteration is verb-sorted, so keeping only strict improvements
            // leaves the lexicographically smallest verb on ties.
            let mut best: Option<(&str, u64)> = None;
            for (verb, &count) in &verb_counts {
                if best.map_or(true, |(_, c)| count > c) {
                    best = Some((verb, count));
                }
            }
            let anchor_verb = best.expect("object has at least one verb").0.to_string();
            (
                object,
                AnchorEntry {
                    anchor_verb,
                    counts: verb_counts,
                },
            )
        })
        .collect();
    AnchorTable {
        format_version: TABLE_FORMAT_VERSION,
        objects,
    }
}

impl AnchorTable {
    pub fn anchor_verb(&self, object: &str) -> Result<&str, DataError> {
        self.objects
            .get(object)
            .map(|e| e.anchor_verb.as_str())
            .ok_or_else(|| DataError::UnknownObject(object.to_string()))
    }
}

/// The triplet's prompt with its verb replaced by the object's anchor verb.
pub fn anchor_prompt(triplet: &HOITriplet, table: &AnchorTable) -> Result<String, DataError> {
    let anchor_verb = table.anchor_verb(&triplet.object)?;
    Ok(render_prompt(&HOITriplet::new(
        triplet.human.clone(),
        anchor_verb,
        triplet.object.clone(),
    )))
}

/// Anchor triplet (verb swapped for the anchor verb), for callers that need
/// spans as well as text.
pub fn anchor_triplet(triplet: &HOITriplet, table: &AnchorTable) -> Result<HOITriplet, DataError> {
    let anchor_verb = table.anchor_verb(&triplet.object)?;
    Ok(HOITriplet::new(
        triplet.human.clone(),
        anchor_verb,
        triplet.object.clone(),
    ))
}

/// How per-class weights are derived from the effective-number growth law.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BalanceMode {
    /// α(k) = (1−β^{n_k})/(1−β): the effective number itself, matching the
    /// source formula literally. Frequent classes get LARGER weights.
    #[default]
    AsWritten,
    /// The class-balanced-loss literature weights by the inverse effective
    /// number instead. Per-class values are (1−β)/(1−β^{n_k}); the table
    /// rescales them so the mean weight over classes is 1.
    InverseNormalized,
}

/// `(1 − β^{n_k}) / (1 − β)` over any field; exact when `T` is exact.
pub fn effective_number_from_beta<T: Field>(beta: T, n_k: u64) -> T {
    (T::one() - powi(beta.clone(), n_k)) / (T::one() - beta)
}

/// Effective number of samples for one class among `total` samples, with
/// β = (total−1)/total.
///
/// In `InverseNormalized` mode this returns the raw inverse value; the
/// across-class mean-1 rescaling needs every class and is applied by
/// [`build_balance_table`].
pub fn effective_number(n_k: u64, total: u64, mode: BalanceMode) -> Result<Real, DataError> {
    if total < 2 {
        return Err(DataError::TotalTooSmall(total));
    }
    if n_k == 0 {
        return Err(DataError::EmptyClass);
    }
    let beta = (total - 1) as Real / total as Real;
    let alpha = effective_number_from_beta(beta, n_k);
    Ok(match mode {
        BalanceMode::AsWritten => alpha,
        BalanceMode::InverseNormalized => 1.0 / alpha,
    })
}

/// One class row in the balance table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BalanceEntry {
    pub triplet: HOITriplet,
    pub sample_count: u64,
    pub alpha: Real,
}

/// Per-class loss weights α(k) under a given [`BalanceMode`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BalanceTable {
    pub format_version: u32,
    pub mode: BalanceMode,
    pub total_samples: u64,
    pub beta: Real,
    pub classes: Vec<BalanceEntry>,
}

impl BalanceTable {
    pub fn alpha(&self, triplet: &HOITriplet) -> Option<Real> {
        self.classes
            .iter()
            .find(|e| &e.triplet == triplet)
            .map(|e| e.alpha)
    }
}

/// Builds per-class weights from realigned prompts. `total_samples` is the
/// sum of per-class counts (an image under two triplets counts twice).
pub fn build_balance_table(
    prompts: &[PromptRecord],
    mode: BalanceMode,
) -> Result<BalanceTable, DataError> {
    if prompts.is_empty() {
        return Err(DataError::NoPrompts);
    }
    let total: u64 = prompts.iter().map(|p| p.sample_count).sum();
    let mut classes: Vec<BalanceEntry> = prompts
        .iter()
        .map(|p| {
            Ok(BalanceEntry {
                triplet: p.triplet.clone(),
                sample_count: p.sample_count,
                alpha: effective_number(p.sample_count, total, mode)?,
            })
        })
        .collect::<Result<_, DataError>>()?;
    if mode == BalanceMode::InverseNormalized {
        let sum: Real = classes.iter().map(|e| e.alpha).sum();
        let scale = classes.len() as Real / sum;
        for e in &mut classes {
            e.alpha *= scale;
        }
    }
    classes.sort_by(|a, b| a.triplet.cmp(&b.triplet));
    Ok(BalanceTable {
        format_version: TABLE_FORMAT_VERSION,
        mode,
        total_samples: total,
        beta: (total - 1) as Real / total as Real,
        classes,
    })
}

/// Binary mask over an (H, W) pixel grid.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    values: Array2<u8>,
}

impl Mask {
    pub fn new(values: Array2<u8>) -> Self {
        debug_assert!(values.iter().all(|v| *v <= 1));
        Self { values }
    }

    pub fn resolution(&self) -> (usize, usize) {
        (self.values.nrows(), self.values.ncols())
    }

    pub fn values(&self) -> &Array2<u8> {
        &self.values
    }

    pub fn ones_count(&self) -> usize {
        self.values.iter().filter(|v| **v == 1).count()
    }

    /// 0/1 values lifted into a scalar grid for loss arithmetic.
    pub fn to_weights<S: crate::scalar::Scalar>(&self) -> Array2<S> {
        self.values
            .mapv(|v| if v == 1 { S::one() } else { S::zero() })
    }
}

/// Rasterizes one normalized box: a pixel is 1 iff its center lies inside
/// the closed box. A box too small to cover any pixel center still marks
/// the pixel containing its own center, so no valid box rasterizes empty.
pub fn rasterize_box(b: &BoundingBox, resolution: (usize, usize)) -> Array2<u8> {
    let (h, w) = resolution;
    let mut grid = Array2::zeros((h, w));
    let mut any = false;
    for ((row, col), v) in grid.indexed_iter_mut() {
        let cx = (col as f64 + 0.5) / w as f64;
        let cy = (row as f64 + 0.5) / h as f64;
        if cx >= b.x_min && cx <= b.x_max && cy >= b.y_min && cy <= b.y_max {
            *v = 1;
            any = true;
        }
    }
    if !any {
        let (cx, cy) = b.center();
        let col = ((cx * w as f64).floor() as usize).min(w - 1);
        let row = ((cy * h as f64).floor() as usize).min(h - 1);
        grid[(row, col)] = 1;
    }
    grid
}

/// Union of the human and object boxes over all pairs in `record` whose
/// triplet equals `target`, rasterized at `resolution`.
pub fn interaction_mask(
    record: &AnnotationRecord,
    target: &HOITriplet,
    resolution: (usize, usize),
) -> Result<Mask, DataError> {
    let mut grid = Array2::zeros(resolution);
    let mut matched = false;
    for pair in record.pairs.iter().filter(|p| &p.triplet == target) {
        matched = true;
        for b in [&pair.human_box, &pair.object_box] {
            grid.zip_mut_with(&rasterize_box(b, resolution), |acc: &mut u8, v| {
                *acc = (*acc).max(*v);
            });
        }
    }
    if !matched {
        return Err(DataError::NoMatchingPair {
            image_id: record.image_id.clone(),
            triplet: target.to_string(),
        });
    }
    Ok(Mask::new(grid))
}

/// Ground-truth interaction region: centered on the midpoint of the two box
/// centers, sized by the same extent rule as the attention path, all in
/// normalized coordinates (unit grid).
pub fn gt_interaction_region(
    human_box: &BoundingBox,
    object_box: &BoundingBox,
    params: &RegionParams,
) -> InteractionRegion<Real> {
    let (hx, hy) = human_box.center();
    let (ox, oy) = object_box.center();
    let c_h = Centroid::new(hx, hy);
    let c_o = Centroid::new(ox, oy);
    let c_rel = Centroid::new((hx + ox) / 2.0, (hy + oy) / 2.0);
    region_from_centers(&c_rel, &c_h, &c_o, params, 1.0, (1.0, 1.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn triplet(verb: &str, object: &str) -> HOITriplet {
        HOITriplet::new("person", verb, object)
    }

    fn write_jsonl(lines: &[&str]) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        for line in lines {
            writeln!(f, "{line}").unwrap();
        }
        f.flush().unwrap();
        f
    }

    const RIDE_LINE: &str = r#"{"image_id":"img_b","width":640,"height":480,"pairs":[{"human_box":[0.1,0.2,0.4,0.9],"object_box":[0.3,0.5,0.9,1.0],"human":"person","verb":"riding","object":"bicycle"}]}"#;
    const HOLD_LINE: &str = r#"{"image_id":"img_a","width":640,"height":480,"pairs":[{"human_box":[0.0,0.0,0.5,1.0],"object_box":[0.4,0.1,0.6,0.5],"human":"person","verb":"holding","object":"backpack"}]}"#;
    const WEAR_LINE: &str = r#"{"image_id":"img_c","width":320,"height":240,"pairs":[{"human_box":[0.2,0.2,0.8,0.8],"object_box":[0.3,0.1,0.7,0.4],"human":"person","verb":"wearing","object":"backpack"}]}"#;

    #[test]
    fn load_sorts_by_image_id() {
        let f = write_jsonl(&[RIDE_LINE, HOLD_LINE, WEAR_LINE]);
        let out = load_annotations(f.path()).unwrap();
        assert_eq!(out.rejections.len(), 0);
        let ids: Vec<&str> = out.records.iter().map(|r| r.image_id.as_str()).collect();
        assert_eq!(ids, ["img_a", "img_b", "img_c"]);
    }

    #[test]
    fn load_rejects_zero_area_box() {
        let degenerate = r#"{"image_id":"img_z","width":64,"height":64,"pairs":[{"human_box":[0.5,0.5,0.5,0.9],"object_box":[0.1,0.1,0.2,0.2],"human":"person","verb":"riding","object":"horse"}]}"#;
        let f = write_jsonl(&[RIDE_LINE, HOLD_LINE, degenerate]);
        let out = load_annotations(f.path()).unwrap();
        assert_eq!(out.records.len(), 2);
        assert_eq!(out.rejections.len(), 1);
        assert_eq!(out.rejections[0].image_id, "img_z");
        assert_eq!(out.rejections[0].line, 3);
    }

    #[test]
    fn load_reports_line_of_malformed_record() {
        let f = write_jsonl(&[RIDE_LINE, "{not json"]);
        let err = load_annotations(f.path()).unwrap_err();
        match err {
            DataError::MalformedRecord { line, .. } => assert_eq!(line, 2),
            other => panic!("unexpected error {other}"),
        }
    }

    #[test]
    fn load_rejects_empty_pairs_and_labels() {
        let no_pairs = r#"{"image_id":"img_e","width":64,"height":64,"pairs":[]}"#;
        let f = write_jsonl(&[no_pairs]);
        assert!(matches!(
            load_annotations(f.path()),
            Err(DataError::MalformedRecord { line: 1, .. })
        ));

        let empty_verb = r#"{"image_id":"img_f","width":64,"height":64,"pairs":[{"human_box":[0.1,0.1,0.5,0.5],"object_box":[0.5,0.5,0.9,0.9],"human":"person","verb":"","object":"horse"}]}"#;
        let f = write_jsonl(&[empty_verb]);
        assert!(matches!(
            load_annotations(f.path()),
            Err(DataError::MalformedRecord { line: 1, .. })
        ));
    }

    #[test]
    fn load_rejects_duplicate_image_ids() {
        let f = write_jsonl(&[RIDE_LINE, RIDE_LINE]);
        assert!(matches!(
            load_annotations(f.path()),
            Err(DataError::DuplicateImage { .. })
        ));
    }

    #[test]
    fn load_missing_file_errors() {
        assert!(matches!(
            load_annotations(Path::new("/nonexistent/annotations.jsonl")),
            Err(DataError::ReadFile { .. })
        ));
    }

    #[test]
    fn annotations_round_trip_through_wire_format() {
        let f = write_jsonl(&[RIDE_LINE, HOLD_LINE]);
        let first = load_annotations(f.path()).unwrap();
        let copy = tempfile::NamedTempFile::new().unwrap();
        write_annotations(copy.path(), &first.records).unwrap();
        let second = load_annotations(copy.path()).unwrap();
        assert_eq!(first.records, second.records);
    }

    #[test]
    fn prompt_consonant_object() {
        let t = triplet("holding", "backpack");
        assert_eq!(render_prompt(&t), "A photo of a person holding a backpack");
    }

    #[test]
    fn prompt_vowel_object() {
        let t = triplet("boarding", "airplane");
        assert_eq!(
            render_prompt(&t),
            "A photo of a person boarding an airplane"
        );
    }

    #[test]
    fn prompt_multiword_verb() {
        let t = triplet("sitting on", "bench");
        assert_eq!(render_prompt(&t), "A photo of a person sitting on a bench");
    }

    #[test]
    fn prompt_parts_ranges_cover_phrases() {
        let t = triplet("sitting on", "airplane");
        let parts = prompt_parts(&t);
        assert_eq!(&parts.text[parts.human.clone()], "person");
        assert_eq!(&parts.text[parts.verb.clone()], "sitting on");
        assert_eq!(&parts.text[parts.object.clone()], "airplane");
    }

    fn record(id: &str, triplets: &[HOITriplet]) -> AnnotationRecord {
        AnnotationRecord {
            image_id: id.to_string(),
            width: 64,
            height: 64,
            pairs: triplets
                .iter()
                .map(|t| HOIPair {
                    triplet: t.clone(),
                    human_box: BoundingBox::new(0.1, 0.1, 0.4, 0.9),
                    object_box: BoundingBox::new(0.5, 0.3, 0.9, 0.8),
                })
                .collect(),
        }
    }

    #[test]
    fn realign_drops_no_interaction_classes() {
        let records = vec![
            record("i1", &[triplet("riding", "horse")]),
            record("i2", &[triplet("riding", "horse")]),
            record("i3", &[triplet("feeding", "horse")]),
            record("i4", &[triplet("and", "horse")]),
            record("i5", &[triplet("and", "horse")]),
        ];
        let out = realign_outcome(&records);
        assert_eq!(out.total_classes, 3);
        assert_eq!(out.excluded_classes, 1);
        assert_eq!(out.prompts.len(), 2);
        let riding = out
            .prompts
            .iter()
            .find(|p| p.triplet.verb == "riding")
            .unwrap();
        assert_eq!(riding.sample_count, 2);
        assert_eq!(riding.image_ids, ["i1", "i2"]);
    }

    #[test]
    fn realign_image_with_two_triplets_lands_in_both() {
        let records = vec![
            record("i1", &[triplet("riding", "horse"), triplet("feeding", "horse")]),
            record("i2", &[triplet("riding", "horse")]),
        ];
        let prompts = realign_to_prompts(&records);
        assert_eq!(prompts.len(), 2);
        for p in &prompts {
            assert!(p.image_ids.contains(&"i1".to_string()));
        }
        // One image under two triplets counts once per triplet.
        let total: u64 = prompts.iter().map(|p| p.sample_count).sum();
        assert_eq!(total, 3);
    }

    #[test]
    fn realign_counts_duplicate_pairs_once() {
        // Two pairs with the same triplet in one image: the image id is
        // still counted once for that class.
        let t = triplet("riding", "horse");
        let records = vec![record("i1", &[t.clone(), t.clone()])];
        let prompts = realign_to_prompts(&records);
        assert_eq!(prompts.len(), 1);
        assert_eq!(prompts[0].sample_count, 1);
    }

    #[test]
    fn realign_is_permutation_invariant() {
        let mut records = vec![
            record("i1", &[triplet("riding", "horse")]),
            record("i2", &[triplet("feeding", "horse"), triplet("riding", "horse")]),
            record("i3", &[triplet("walking", "dog")]),
            record("i4", &[triplet("riding", "horse")]),
        ];
        let forward = realign_to_prompts(&records);
        records.reverse();
        records.swap(0, 2);
        let shuffled = realign_to_prompts(&records);
        assert_eq!(forward, shuffled);
    }

    #[test]
    fn realign_empty_input_is_empty() {
        assert!(realign_to_prompts(&[]).is_empty());
    }

    fn prompt_record(verb: &str, object: &str, n: u64) -> PromptRecord {
        let t = triplet(verb, object);
        PromptRecord {
            text: render_prompt(&t),
            triplet: t,
            image_ids: (0..n).map(|i| format!("{verb}_{object}_{i}")).collect(),
            sample_count: n,
        }
    }

    #[test]
    fn anchor_is_highest_count_verb() {
        let prompts = vec![
            prompt_record("wearing", "backpack", 50),
            prompt_record("holding", "backpack", 20),
            prompt_record("carrying", "backpack", 10),
        ];
        let table = build_anchor_table(&prompts);
        assert_eq!(table.anchor_verb("backpack").unwrap(), "wearing");
        // Counts cover exactly the verbs present.
        let entry = &table.objects["backpack"];
        assert_eq!(entry.counts.len(), 3);
        assert_eq!(entry.counts["wearing"], 50);
    }

    #[test]
    fn anchor_singleton_verb() {
        let prompts = vec![prompt_record("riding", "horse", 5)];
        let table = build_anchor_table(&prompts);
        assert_eq!(table.anchor_verb("horse").unwrap(), "riding");
    }

    #[test]
    fn anchor_tie_breaks_lexicographically() {
        let prompts = vec![
            prompt_record("walking", "dog", 30),
            prompt_record("riding", "dog", 30),
        ];
        let table = build_anchor_table(&prompts);
        assert_eq!(table.anchor_verb("dog").unwrap(), "riding");
        // Independent max-scan oracle: no verb beats the anchor's count.
        let entry = &table.objects["dog"];
        let anchor_count = entry.counts[&entry.anchor_verb];
        assert!(entry.counts.values().all(|&c| c <= anchor_count));
    }

    #[test]
    fn anchor_prompt_swaps_verb() {
        let prompts = vec![
            prompt_record("wearing", "backpack", 50),
            prompt_record("holding", "backpack", 20),
        ];
        let table = build_anchor_table(&prompts);
        let got = anchor_prompt(&triplet("holding", "backpack"), &table).unwrap();
        assert_eq!(got, "A photo of a person wearing a backpack");
    }

    #[test]
    fn anchor_prompt_fixed_point_when_verb_is_anchor() {
        let prompts = vec![prompt_record("riding", "horse", 5)];
        let table = build_anchor_table(&prompts);
        let t = triplet("riding", "horse");
        assert_eq!(anchor_prompt(&t, &table).unwrap(), render_prompt(&t));
    }

    #[test]
    fn anchor_prompt_unknown_object_errors() {
        let table = build_anchor_table(&[prompt_record("riding", "horse", 5)]);
        assert!(matches!(
            anchor_prompt(&triplet("riding", "zebra"), &table),
            Err(DataError::UnknownObject(o)) if o == "zebra"
        ));
    }

    #[test]
    fn effective_number_single_sample_is_one() {
        for total in [2, 10, 1000] {
            let a = effective_number(1, total, BalanceMode::AsWritten).unwrap();
            assert_eq!(a, 1.0);
        }
    }

    #[test]
    fn effective_number_beta_09_three_samples() {
        // β = 0.9 → (1 − 0.729) / 0.1 = 2.71.
        let a = effective_number(3, 10, BalanceMode::AsWritten).unwrap();
        assert!((a - 2.71).abs() < 1e-12);
    }

    #[test]
    fn effective_number_is_exact_on_rationals() {
        use num_rational::Ratio;
        let beta = Ratio::new(9i64, 10);
        let alpha = effective_number_from_beta(beta, 3);
        assert_eq!(alpha, Ratio::new(271, 100));
    }

    #[test]
    fn effective_number_approaches_total() {
        for total in [10u64, 100, 1000] {
            let a = effective_number(10 * total, total, BalanceMode::AsWritten).unwrap();
            let rel = (a - total as Real).abs() / total as Real;
            assert!(rel < 1e-3, "total={total}: α={a}, rel err {rel}");
        }
    }

    #[test]
    fn effective_number_strictly_increasing_and_bounded() {
        let total = 50;
        let mut prev = 0.0;
        for n in 1..=200 {
            let a = effective_number(n, total, BalanceMode::AsWritten).unwrap();
            assert!(a > prev, "not strictly increasing at n={n}");
            assert!(a <= total as Real * (1.0 + 1e-12), "α exceeded N at n={n}");
            prev = a;
        }
    }

    #[test]
    fn effective_number_domain_errors() {
        assert!(matches!(
            effective_number(1, 1, BalanceMode::AsWritten),
            Err(DataError::TotalTooSmall(1))
        ));
        assert!(matches!(
            effective_number(0, 10, BalanceMode::AsWritten),
            Err(DataError::EmptyClass)
        ));
    }

    #[test]
    fn balance_table_as_written_stores_effective_numbers() {
        let prompts = vec![
            prompt_record("riding", "horse", 3),
            prompt_record("feeding", "horse", 7),
        ];
        let table = build_balance_table(&prompts, BalanceMode::AsWritten).unwrap();
        assert_eq!(table.total_samples, 10);
        assert!((table.beta - 0.9).abs() < 1e-15);
        let riding = table.alpha(&triplet("riding", "horse")).unwrap();
        assert!((riding - 2.71).abs() < 1e-12);
    }

    #[test]
    fn balance_table_inverse_mode_has_mean_one() {
        let prompts = vec![
            prompt_record("riding", "horse", 2),
            prompt_record("feeding", "horse", 9),
            prompt_record("walking", "dog", 30),
        ];
        let table = build_balance_table(&prompts, BalanceMode::InverseNormalized).unwrap();
        let mean: Real =
            table.classes.iter().map(|e| e.alpha).sum::<Real>() / table.classes.len() as Real;
        assert!((mean - 1.0).abs() < 1e-12);
        // Rarer classes must weigh more in inverse mode.
        let rare = table.alpha(&triplet("riding", "horse")).unwrap();
        let common = table.alpha(&triplet("walking", "dog")).unwrap();
        assert!(rare > common);
    }

    #[test]
    fn balance_table_empty_prompts_errors() {
        assert!(matches!(
            build_balance_table(&[], BalanceMode::AsWritten),
            Err(DataError::NoPrompts)
        ));
    }

    #[test]
    fn mask_full_cover_is_all_ones() {
        let rec = AnnotationRecord {
            image_id: "i".into(),
            width: 64,
            height: 64,
            pairs: vec![HOIPair {
                triplet: triplet("riding", "horse"),
                human_box: BoundingBox::new(0.0, 0.0, 0.5, 1.0),
                object_box: BoundingBox::new(0.5, 0.0, 1.0, 1.0),
            }],
        };
        let mask = interaction_mask(&rec, &triplet("riding", "horse"), (8, 8)).unwrap();
        assert_eq!(mask.ones_count(), 64);
    }

    #[test]
    fn mask_ignores_other_triplets() {
        let target = triplet("riding", "horse");
        let rec = AnnotationRecord {
            image_id: "i".into(),
            width: 64,
            height: 64,
            pairs: vec![
                HOIPair {
                    triplet: target.clone(),
                    human_box: BoundingBox::new(0.0, 0.0, 0.25, 0.25),
                    object_box: BoundingBox::new(0.0, 0.25, 0.25, 0.5),
                },
                HOIPair {
                    triplet: triplet("feeding", "horse"),
                    human_box: BoundingBox::new(0.75, 0.75, 1.0, 1.0),
                    object_box: BoundingBox::new(0.5, 0.5, 0.75, 0.75),
                },
            ],
        };
        let mask = interaction_mask(&rec, &target, (8, 8)).unwrap();
        // Per-pixel oracle over the fixture boxes.
        for ((row, col), &v) in mask.values().indexed_iter() {
            let cx = (col as f64 + 0.5) / 8.0;
            let cy = (row as f64 + 0.5) / 8.0;
            let in_h = cx <= 0.25 && cy <= 0.25;
            let in_o = cx <= 0.25 && (0.25..=0.5).contains(&cy);
            assert_eq!(v == 1, in_h || in_o, "mismatch at ({row},{col})");
        }
    }

    #[test]
    fn mask_disjoint_boxes_area_is_sum() {
        let target = triplet("riding", "horse");
        let rec = AnnotationRecord {
            image_id: "i".into(),
            width: 64,
            height: 64,
            pairs: vec![HOIPair {
                triplet: target.clone(),
                human_box: BoundingBox::new(0.0, 0.0, 0.25, 0.25),
                object_box: BoundingBox::new(0.5, 0.5, 1.0, 1.0),
            }],
        };
        let mask = interaction_mask(&rec, &target, (16, 16)).unwrap();
        let h_area = rasterize_box(&rec.pairs[0].human_box, (16, 16))
            .iter()
            .filter(|v| **v == 1)
            .count();
        let o_area = rasterize_box(&rec.pairs[0].object_box, (16, 16))
            .iter()
            .filter(|v| **v == 1)
            .count();
        assert_eq!(mask.ones_count(), h_area + o_area);
    }

    #[test]
    fn mask_dominates_single_boxes() {
        let target = triplet("riding", "horse");
        let rec = AnnotationRecord {
            image_id: "i".into(),
            width: 64,
            height: 64,
            pairs: vec![HOIPair {
                triplet: target.clone(),
                human_box: BoundingBox::new(0.1, 0.2, 0.6, 0.7),
                object_box: BoundingBox::new(0.4, 0.5, 0.9, 0.95),
            }],
        };
        let mask = interaction_mask(&rec, &target, (13, 9)).unwrap();
        for b in [&rec.pairs[0].human_box, &rec.pairs[0].object_box] {
            let single = rasterize_box(b, (13, 9));
            for (m, s) in mask.values().iter().zip(single.iter()) {
                assert!(m >= s);
            }
        }
    }

    #[test]
    fn mask_no_matching_pair_errors() {
        let rec = record("i", &[triplet("riding", "horse")]);
        assert!(matches!(
            interaction_mask(&rec, &triplet("feeding", "horse"), (8, 8)),
            Err(DataError::NoMatchingPair { .. })
        ));
    }

    #[test]
    fn tiny_box_still_marks_a_pixel() {
        let b = BoundingBox::new(0.40, 0.40, 0.45, 0.45);
        let grid = rasterize_box(&b, (4, 4));
        assert_eq!(grid.iter().filter(|v| **v == 1).count(), 1);
        // The marked pixel is the one containing the box center (0.425, 0.425).
        assert_eq!(grid[(1, 1)], 1);
    }

    #[test]
    fn gt_region_center_is_midpoint() {
        let h = BoundingBox::new(0.1, 0.4, 0.3, 0.6); // center (0.2, 0.5)
        let o = BoundingBox::new(0.7, 0.4, 0.9, 0.6); // center (0.8, 0.5)
        let r = gt_interaction_region(&h, &o, &RegionParams::default());
        assert!((r.center.x - 0.5).abs() < 1e-12);
        assert!((r.center.y - 0.5).abs() < 1e-12);
    }

    #[test]
    fn gt_region_identical_boxes_hits_min_extent() {
        let b = BoundingBox::new(0.3, 0.3, 0.5, 0.5);
        let params = RegionParams::default();
        let r = gt_interaction_region(&b, &b, &params);
        assert!((r.center.x - 0.4).abs() < 1e-12);
        assert!((r.half_extent - params.min_extent).abs() < 1e-12);
        assert!(r.clipped_box.is_valid());
    }

    #[test]
    fn gt_region_euclidean_half_extent() {
        // Centers (0.1, 0.1) and (0.4, 0.5): distance 0.5.
        let h = BoundingBox::new(0.05, 0.05, 0.15, 0.15);
        let o = BoundingBox::new(0.35, 0.45, 0.45, 0.55);
        let r = gt_interaction_region(&h, &o, &RegionParams::default());
        assert!((r.half_extent - 0.5).abs() < 1e-12);
        // Midpoint (0.25, 0.3) ± 0.5, clipped to the unit square.
        assert!((r.clipped_box.x_min - 0.0).abs() < 1e-12);
        assert!((r.clipped_box.x_max - 0.75).abs() < 1e-12);
        assert!((r.clipped_box.y_min - 0.0).abs() < 1e-12);
        assert!((r.clipped_box.y_max - 0.8).abs() < 1e-12);
    }

    #[test]
    fn gt_region_center_matches_average_invariant() {
        let mut rng = crate::rng::stream(3, "gt-region");
        use rand::Rng;
        for _ in 0..50 {
            let mut corner = || -> (Real, Real) {
                let a: Real = rng.gen_range(0.0..0.5);
                let b: Real = rng.gen_range(0.5..1.0);
                (a, b)
            };
            let (hx0, hx1) = corner();
            let (hy0, hy1) = corner();
            let (ox0, ox1) = corner();
            let (oy0, oy1) = corner();
            let h = BoundingBox::new(hx0, hy0, hx1, hy1);
            let o = BoundingBox::new(ox0, oy0, ox1, oy1);
            let r = gt_interaction_region(&h, &o, &RegionParams::default());
            let want_x = (h.center().0 + o.center().0) / 2.0;
            let want_y = (h.center().1 + o.center().1) / 2.0;
            assert!((r.center.x - want_x).abs() < 1e-12);
            assert!((r.center.y - want_y).abs() < 1e-12);
        }
    }
}
