//! Interaction-region extraction from cross-attention maps.
//!
//! A denoiser run captures per-token attention maps ([`AttentionStack`]).
//! From the human/verb/object token spans we aggregate one map per role,
//! take centroids, form the triangle center, and cut a square region whose
//! side tracks the human-object centroid distance. The same center/extent
//! rule is reused for ground-truth regions built from annotation boxes
//! (normalized coordinates, unit grid).

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::hoi_data::BoundingBox;
use crate::scalar::Scalar;
use crate::Real;

/// Prompt role whose token maps feed the region geometry.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Human,
    Verb,
    Object,
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Role::Human => write!(f, "human"),
            Role::Verb => write!(f, "verb"),
            Role::Object => write!(f, "object"),
        }
    }
}

#[derive(Debug, Error)]
pub enum GeometryError {
    #[error("attention map is all zeros; centroid undefined")]
    DegenerateMap,
    #[error("attention map contains a negative value at (row {row}, col {col})")]
    NegativeValue { row: usize, col: usize },
    #[error("map shape {got:?} does not match stack resolution {expected:?}")]
    ShapeMismatch {
        expected: (usize, usize),
        got: (usize, usize),
    },
    #[error("role {0} has no token span in this stack")]
    RoleMissing(Role),
    #[error("role {role} span references token {index}, which has no captured map")]
    SpanOutOfRange { role: Role, index: usize },
    #[error("role {0} has an empty token span")]
    EmptySpan(Role),
    #[error("attention stack has no token maps")]
    EmptyStack,
}

/// Captured cross-attention maps for one generation, keyed by prompt-token
/// index, plus the token spans of the human/verb/object phrases.
///
/// Maps are softmax-normalized over tokens per spatial position and already
/// aggregated over heads/layers (and, per config, over sampling steps), so
/// entries are non-negative.
#[derive(Debug, Clone)]
pub struct AttentionStack<S: Scalar> {
    resolution: (usize, usize),
    token_maps: BTreeMap<usize, Array2<S>>,
    token_spans: BTreeMap<Role, Vec<usize>>,
}

impl<S: Scalar> AttentionStack<S> {
    /// Validates non-negativity, shapes, and span references.
    pub fn new(
        resolution: (usize, usize),
        token_maps: BTreeMap<usize, Array2<S>>,
        token_spans: BTreeMap<Role, Vec<usize>>,
    ) -> Result<Self, GeometryError> {
        if token_maps.is_empty() {
            return Err(GeometryError::EmptyStack);
        }
        for map in token_maps.values() {
            let got = (map.nrows(), map.ncols());
            if got != resolution {
                return Err(GeometryError::ShapeMismatch {
                    expected: resolution,
                    got,
                });
            }
            if let Some(((row, col), _)) = map.indexed_iter().find(|(_, v)| **v < S::zero()) {
                return Err(GeometryError::NegativeValue { row, col });
            }
        }
        for (&role, span) in &token_spans {
            if span.is_empty() {
                return Err(GeometryError::EmptySpan(role));
            }
            for &index in span {
                if !token_maps.contains_key(&index) {
                    return Err(GeometryError::SpanOutOfRange { role, index });
                }
            }
        }
        Ok(Self {
            resolution,
            token_maps,
            token_spans,
        })
    }

    pub fn resolution(&self) -> (usize, usize) {
        self.resolution
    }

    pub fn token_map(&self, index: usize) -> Option<&Array2<S>> {
        self.token_maps.get(&index)
    }

    pub fn token_indices(&self) -> impl Iterator<Item = usize> + '_ {
        self.token_maps.keys().copied()
    }

    pub fn span(&self, role: Role) -> Option<&[usize]> {
        self.token_spans.get(&role).map(Vec::as_slice)
    }
}

/// How to combine attention captured at several sampling steps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepAggregation {
    /// Elementwise mean over all captured steps (default).
    #[default]
    MeanOverSteps,
    /// Keep only the final captured step.
    FinalStep,
}

/// Accumulates per-token maps across sampling steps into one
/// [`AttentionStack`].
#[derive(Debug, Clone)]
pub struct AttentionAccumulator<S: Scalar> {
    mode: StepAggregation,
    resolution: (usize, usize),
    sums: BTreeMap<usize, Array2<S>>,
    steps: usize,
}

impl<S: Scalar> AttentionAccumulator<S> {
    pub fn new(mode: StepAggregation, resolution: (usize, usize)) -> Self {
        Self {
            mode,
            resolution,
            sums: BTreeMap::new(),
            steps: 0,
        }
    }

    /// Folds in the maps captured at one sampling step.
    pub fn push_step(&mut self, maps: &BTreeMap<usize, Array2<S>>) {
        match self.mode {
            StepAggregation::MeanOverSteps => {
                for (&token, map) in maps {
                    self.sums
                        .entry(token)
                        .and_modify(|acc| *acc += map)
                        .or_insert_with(|| map.clone());
                }
            }
            StepAggregation::FinalStep => {
                self.sums = maps.clone();
            }
        }
        self.steps += 1;
    }

    pub fn finish(
        self,
        token_spans: BTreeMap<Role, Vec<usize>>,
    ) -> Result<AttentionStack<S>, GeometryError> {
        let maps = match self.mode {
            StepAggregation::MeanOverSteps if self.steps > 1 => {
                let inv = S::one() / S::from_usize(self.steps).expect("step count");
                self.sums
                    .into_iter()
                    .map(|(k, m)| (k, m.mapv(|v| v * inv)))
                    .collect()
            }
            _ => self.sums,
        };
        AttentionStack::new(self.resolution, maps, token_spans)
    }
}

/// A point in zero-indexed map pixel coordinates (`x` along width,
/// `y` along height).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Centroid<S> {
    pub x: S,
    pub y: S,
}

impl<S: Scalar> Centroid<S> {
    pub fn new(x: S, y: S) -> Self {
        Self { x, y }
    }

    pub fn distance(&self, other: &Self) -> S {
        let dx = self.x - other.x;
        let dy = self.y - other.y;
        (dx * dx + dy * dy).sqrt()
    }
}

/// Exponent applied to the human-object centroid distance when sizing the
/// region. The source formula squares the distance, which explodes in pixel
/// units and vanishes in normalized units, so plain distance is the default
/// and the squared reading stays available.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RegionExponent {
    #[default]
    Distance,
    SquaredDistance,
}

impl RegionExponent {
    pub fn apply<S: Scalar>(self, d: S) -> S {
        match self {
            RegionExponent::Distance => d,
            RegionExponent::SquaredDistance => d * d,
        }
    }
}

impl TryFrom<u32> for RegionExponent {
    type Error = String;

    fn try_from(v: u32) -> Result<Self, Self::Error> {
        match v {
            1 => Ok(RegionExponent::Distance),
            2 => Ok(RegionExponent::SquaredDistance),
            other => Err(format!("region exponent must be 1 or 2, got {other}")),
        }
    }
}

/// Extent rule parameters shared by the generated-image (attention) and
/// ground-truth (annotation box) region paths.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegionParams {
    pub exponent: RegionExponent,
    /// Minimum half-extent in normalized units; scaled by `max(H, W)` on
    /// pixel grids. Keeps coincident centroids from producing an empty box.
    pub min_extent: Real,
}

impl Default for RegionParams {
    fn default() -> Self {
        Self {
            exponent: RegionExponent::Distance,
            min_extent: 0.05,
        }
    }
}

/// Square interaction region: `center ± half_extent` in the source grid's
/// pixel coordinates, plus the same box clipped to the grid and normalized.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InteractionRegion<S> {
    pub center: Centroid<S>,
    pub half_extent: S,
    pub clipped_box: BoundingBox,
}

/// Mean of the role's token maps.
pub fn aggregate_token_map<S: Scalar>(
    stack: &AttentionStack<S>,
    role: Role,
) -> Result<Array2<S>, GeometryError> {
    let span = stack
        .span(role)
        .ok_or(GeometryError::RoleMissing(role))?;
    let mut acc = Array2::<S>::zeros(stack.resolution());
    for &index in span {
        let map = stack
            .token_map(index)
            .ok_or(GeometryError::SpanOutOfRange { role, index })?;
        acc += map;
    }
    let inv = S::one() / S::from_usize(span.len()).expect("span length");
    Ok(acc.mapv(|v| v * inv))
}

/// First moment of a non-negative map: `x = Σ w·A(h,w)/ΣA`,
/// `y = Σ h·A(h,w)/ΣA` over zero-indexed coordinates.
pub fn centroid<S: Scalar>(map: &Array2<S>) -> Result<Centroid<S>, GeometryError> {
    let mut total = S::zero();
    let mut mx = S::zero();
    let mut my = S::zero();
    for ((row, col), &v) in map.indexed_iter() {
        if v < S::zero() {
            return Err(GeometryError::NegativeValue { row, col });
        }
        total += v;
        mx += S::from_usize(col).expect("col index") * v;
        my += S::from_usize(row).expect("row index") * v;
    }
    if total <= S::zero() {
        return Err(GeometryError::DegenerateMap);
    }
    Ok(Centroid::new(mx / total, my / total))
}

/// Componentwise mean of the three role centroids (triangle center).
pub fn interaction_center<S: Scalar>(
    c_h: &Centroid<S>,
    c_r: &Centroid<S>,
    c_o: &Centroid<S>,
) -> Centroid<S> {
    let three = S::from_f64_lossy(3.0);
    Centroid::new(
        (c_h.x + c_o.x + c_r.x) / three,
        (c_h.y + c_o.y + c_r.y) / three,
    )
}

/// Square region around `c_rel` with half-extent
/// `max(‖c_h − c_o‖^exponent, min_extent·max(H, W))`, clipped to
/// `[0, W−1] × [0, H−1]` and normalized by `(W−1, H−1)`.
pub fn interaction_region<S: Scalar>(
    c_rel: &Centroid<S>,
    c_h: &Centroid<S>,
    c_o: &Centroid<S>,
    params: &RegionParams,
    grid: (usize, usize),
) -> InteractionRegion<S> {
    let (h, w) = grid;
    let scale = S::from_usize(h.max(w)).expect("grid size");
    let bounds = (
        S::from_usize(w - 1).expect("grid width"),
        S::from_usize(h - 1).expect("grid height"),
    );
    region_from_centers(c_rel, c_h, c_o, params, scale, bounds)
}

/// Shared center/extent rule. `min_extent_scale` converts the normalized
/// minimum extent into grid units; `bounds` is the inclusive coordinate
/// range `(x_max, y_max)` the box is clipped to (and normalized by).
pub(crate) fn region_from_centers<S: Scalar>(
    c_rel: &Centroid<S>,
    c_h: &Centroid<S>,
    c_o: &Centroid<S>,
    params: &RegionParams,
    min_extent_scale: S,
    bounds: (S, S),
) -> InteractionRegion<S> {
    let dist = c_h.distance(c_o);
    let floor = S::from_f64_lossy(params.min_extent) * min_extent_scale;
    let half_extent = params.exponent.apply(dist).max(floor);
    let x0 = (c_rel.x - half_extent).max(S::zero());
    let y0 = (c_rel.y - half_extent).max(S::zero());
    let x1 = (c_rel.x + half_extent).min(bounds.0);
    let y1 = (c_rel.y + half_extent).min(bounds.1);
    let clipped_box = BoundingBox {
        x_min: (x0 / bounds.0).to_f64().expect("finite coordinate"),
        y_min: (y0 / bounds.1).to_f64().expect("finite coordinate"),
        x_max: (x1 / bounds.0).to_f64().expect("finite coordinate"),
        y_max: (y1 / bounds.1).to_f64().expect("finite coordinate"),
    };
    InteractionRegion {
        center: *c_rel,
        half_extent,
        clipped_box,
    }
}

/// Zeroes pixels whose centers fall outside the region's clipped box.
/// `image` is channel-major (C, H, W); dimensions are preserved.
pub fn crop_region<S: Scalar>(
    image: &ndarray::Array3<S>,
    region: &InteractionRegion<S>,
) -> ndarray::Array3<S> {
    let mask = region_pixel_mask(region, (image.shape()[1], image.shape()[2]));
    let mut out = image.clone();
    for mut channel in out.outer_iter_mut() {
        for ((row, col), v) in channel.indexed_iter_mut() {
            if mask[(row, col)] == 0 {
                *v = S::zero();
            }
        }
    }
    out
}

/// Rasterizes the region's normalized clipped box at `(H, W)`: a pixel is 1
/// iff its center lies inside the closed box. Same pixel-center rule as
/// annotation-box masks.
pub fn region_pixel_mask<S: Scalar>(
    region: &InteractionRegion<S>,
    resolution: (usize, usize),
) -> Array2<u8> {
    let (h, w) = resolution;
    let b = &region.clipped_box;
    Array2::from_shape_fn((h, w), |(row, col)| {
        let cx = (col as f64 + 0.5) / w as f64;
        let cy = (row as f64 + 0.5) / h as f64;
        u8::from(cx >= b.x_min && cx <= b.x_max && cy >= b.y_min && cy <= b.y_max)
    })
}

/// Debug sidecar written next to region overlays. Centroids and half extent
/// are in attention-map pixel units; `grid` records that map's (H, W) so
/// they can be projected onto other resolutions.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RegionSidecar {
    pub image_id: String,
    pub grid: (usize, usize),
    pub c_h: Centroid<Real>,
    pub c_r: Centroid<Real>,
    pub c_o: Centroid<Real>,
    pub c_rel: Centroid<Real>,
    pub half_extent: Real,
    pub clipped_box: BoundingBox,
}

/// Writes `{image_id}.png` (region box and centroid markers drawn over the
/// base image) and `{image_id}.json` (the sidecar) into `dir`.
pub fn write_region_debug(
    dir: &Path,
    base: &image::RgbaImage,
    sidecar: &RegionSidecar,
) -> std::io::Result<()> {
    let mut canvas = base.clone();
    let (w, h) = (canvas.width() as i64, canvas.height() as i64);
    let px = |n: f64, limit: i64| ((n * (limit - 1) as f64).round() as i64).clamp(0, limit - 1);
    let b = &sidecar.clipped_box;
    let (x0, x1) = (px(b.x_min, w), px(b.x_max, w));
    let (y0, y1) = (px(b.y_min, h), px(b.y_max, h));
    let box_color = image::Rgba([255, 64, 64, 255]);
    for x in x0..=x1 {
        canvas.put_pixel(x as u32, y0 as u32, box_color);
        canvas.put_pixel(x as u32, y1 as u32, box_color);
    }
    for y in y0..=y1 {
        canvas.put_pixel(x0 as u32, y as u32, box_color);
        canvas.put_pixel(x1 as u32, y as u32, box_color);
    }
    // Centroids are in map pixel units; rescale to image pixels.
    let (grid_h, grid_w) = sidecar.grid;
    let map_max = |v: f64, limit: i64, grid: usize| {
        ((v / (grid.saturating_sub(1).max(1)) as f64) * (limit - 1) as f64).round() as i64
    };
    for (c, color) in [
        (&sidecar.c_h, image::Rgba([64, 128, 255, 255])),
        (&sidecar.c_o, image::Rgba([64, 255, 128, 255])),
        (&sidecar.c_r, image::Rgba([255, 255, 64, 255])),
        (&sidecar.c_rel, image::Rgba([255, 255, 255, 255])),
    ] {
        let (cx, cy) = (
            map_max(c.x, w, grid_w).clamp(0, w - 1),
            map_max(c.y, h, grid_h).clamp(0, h - 1),
        );
        for dx in -1..=1i64 {
            for dy in -1..=1i64 {
                let (x, y) = ((cx + dx).clamp(0, w - 1), (cy + dy).clamp(0, h - 1));
                canvas.put_pixel(x as u32, y as u32, color);
            }
        }
    }
    std::fs::create_dir_all(dir)?;
    let png_path = dir.join(format!("{}.png", sidecar.image_id));
    canvas
        .save_with_format(&png_path, image::ImageFormat::Png)
        .map_err(|e| std::io::Error::other(e.to_string()))?;
    let json_path = dir.join(format!("{}.json", sidecar.image_id));
    let json = serde_json::to_string_pretty(sidecar).map_err(std::io::Error::other)?;
    std::fs::write(json_path, json)
}
