//! Guidance loss terms and their analytic gradients.
//!
//! Four terms steer fine-tuning: a triplet loss pushing generated-image
//! features toward the ground-truth verb text and away from the object's
//! anchor verb, an image alignment loss against masked real images, a
//! direction loss matching the real-vs-generated global feature shift to
//! the shift inside the interaction region, and a masked noise
//! reconstruction loss. Every differentiable term also has a `_grad`
//! variant returning exact gradients with respect to each input; those are
//! what the trainer backpropagates, and they are validated against central
//! finite differences.
//!
//! Feature vectors are re-normalized defensively before any similarity is
//! computed, and the gradients account for that normalization.

use ndarray::{Array1, Array3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::hoi_data::Mask;
use crate::scalar::Scalar;

/// Loss weights (λ1 reconstruction, λ2 disentanglement, λ3 direction).
pub const DEFAULT_LAMBDAS: (f64, f64, f64) = (1.0, 10.0, 0.8);

/// Triplet margin m.
pub const DEFAULT_MARGIN: f64 = 0.2;

/// Difference vectors shorter than this make the direction loss inactive.
pub const DEGENERATE_DIRECTION_NORM: f64 = 1e-8;

#[derive(Debug, Error)]
pub enum LossError {
    #[error("zero vector has no direction")]
    ZeroVector,
    #[error("dimension mismatch: {left} vs {right}")]
    DimensionMismatch { left: usize, right: usize },
    #[error("shape mismatch: {left:?} vs {right:?}")]
    ShapeMismatch {
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("mask resolution {mask:?} does not match grid {grid:?}")]
    MaskResolution {
        mask: (usize, usize),
        grid: (usize, usize),
    },
}

/// A feature embedding. `normalized` records whether the stored values were
/// already scaled to unit length; similarity code renormalizes defensively
/// either way.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVector<S: Scalar> {
    values: Array1<S>,
    normalized: bool,
}

impl<S: Scalar> FeatureVector<S> {
    pub fn new(values: Array1<S>) -> Self {
        Self {
            values,
            normalized: false,
        }
    }

    /// Scales to unit length; errors on the zero vector.
    pub fn normalized(values: Array1<S>) -> Result<Self, LossError> {
        let n = norm(&values);
        if n == S::zero() {
            return Err(LossError::ZeroVector);
        }
        Ok(Self {
            values: values.mapv(|v| v / n),
            normalized: true,
        })
    }

    pub fn values(&self) -> &Array1<S> {
        &self.values
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }
}

fn norm<S: Scalar>(v: &Array1<S>) -> S {
    v.dot(v).sqrt()
}

fn check_dims<S: Scalar>(a: &FeatureVector<S>, b: &FeatureVector<S>) -> Result<(), LossError> {
    if a.dim() != b.dim() {
        return Err(LossError::DimensionMismatch {
            left: a.dim(),
            right: b.dim(),
        });
    }
    Ok(())
}

/// cos(a, b) = a·b / (‖a‖‖b‖).
pub fn cosine_sim<S: Scalar>(a: &FeatureVector<S>, b: &FeatureVector<S>) -> Result<S, LossError> {
    check_dims(a, b)?;
    cos_raw(a.values(), b.values()).map(|c| c.value)
}

/// Cosine similarity together with its gradients.
pub fn cosine_sim_grad<S: Scalar>(
    a: &FeatureVector<S>,
    b: &FeatureVector<S>,
) -> Result<(S, Array1<S>, Array1<S>), LossError> {
    check_dims(a, b)?;
    let c = cos_raw(a.values(), b.values())?;
    Ok((c.value, c.d_a, c.d_b))
}

struct CosParts<S: Scalar> {
    value: S,
    d_a: Array1<S>,
    d_b: Array1<S>,
}

/// Value and gradients of cos(a, b) on raw (not necessarily unit) vectors:
/// d/da = b/(‖a‖‖b‖) − cos·a/‖a‖².
fn cos_raw<S: Scalar>(a: &Array1<S>, b: &Array1<S>) -> Result<CosParts<S>, LossError> {
    let na = norm(a);
    let nb = norm(b);
    if na == S::zero() || nb == S::zero() {
        return Err(LossError::ZeroVector);
    }
    let value = a.dot(b) / (na * nb);
    let d_a = b.mapv(|v| v / (na * nb)) - a.mapv(|v| v * value / (na * na));
    let d_b = a.mapv(|v| v / (na * nb)) - b.mapv(|v| v * value / (nb * nb));
    Ok(CosParts { value, d_a, d_b })
}

/// Which way the triplet hinge reads.
///
/// The source formula as printed penalizes HIGH similarity to the
/// ground-truth verb, contradicting its own prose ("similarity with the
/// ground-truth larger than with the anchor by a margin"); `AsProse` is the
/// corrected default, `AsWritten` reproduces the printed formula.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TripletSign {
    #[default]
    AsProse,
    AsWritten,
}

/// Hinge on the two similarities of the generated-image feature:
/// `AsProse` → max(0, m − cos(f_gen,e_gt) + cos(f_gen,e_anc)).
pub fn triplet_loss<S: Scalar>(
    f_gen: &FeatureVector<S>,
    e_gt: &FeatureVector<S>,
    e_anc: &FeatureVector<S>,
    margin: S,
    sign: TripletSign,
) -> Result<S, LossError> {
    Ok(triplet_loss_grad(f_gen, e_gt, e_anc, margin, sign)?.0)
}

/// Gradients of the triplet loss with respect to all three vectors.
#[derive(Debug, Clone)]
pub struct TripletGrads<S: Scalar> {
    pub d_f_gen: Array1<S>,
    pub d_e_gt: Array1<S>,
    pub d_e_anc: Array1<S>,
}

pub fn triplet_loss_grad<S: Scalar>(
    f_gen: &FeatureVector<S>,
    e_gt: &FeatureVector<S>,
    e_anc: &FeatureVector<S>,
    margin: S,
    sign: TripletSign,
) -> Result<(S, TripletGrads<S>), LossError> {
    check_dims(f_gen, e_gt)?;
    check_dims(f_gen, e_anc)?;
    let pos = cos_raw(f_gen.values(), e_gt.values())?;
    let neg = cos_raw(f_gen.values(), e_anc.values())?;
    // AsProse: m − pos + neg; AsWritten: m + pos − neg.
    let (pos_sign, neg_sign) = match sign {
        TripletSign::AsProse => (-S::one(), S::one()),
        TripletSign::AsWritten => (S::one(), -S::one()),
    };
    let raw = margin + pos_sign * pos.value + neg_sign * neg.value;
    if raw > S::zero() {
        let d_f_gen = pos.d_a.mapv(|v| v * pos_sign) + neg.d_a.mapv(|v| v * neg_sign);
        Ok((
            raw,
            TripletGrads {
                d_f_gen,
                d_e_gt: pos.d_b.mapv(|v| v * pos_sign),
                d_e_anc: neg.d_b.mapv(|v| v * neg_sign),
            },
        ))
    } else {
        let zeros = || Array1::zeros(f_gen.dim());
        Ok((
            S::zero(),
            TripletGrads {
                d_f_gen: zeros(),
                d_e_gt: zeros(),
                d_e_anc: zeros(),
            },
        ))
    }
}

/// 1 − cos(f_gt_masked, f_gen): pulls generated features toward features of
/// the masked real image.
pub fn align_loss<S: Scalar>(
    f_gt_masked: &FeatureVector<S>,
    f_gen: &FeatureVector<S>,
) -> Result<S, LossError> {
    Ok(S::one() - cosine_sim(f_gt_masked, f_gen)?)
}

pub fn align_loss_grad<S: Scalar>(
    f_gt_masked: &FeatureVector<S>,
    f_gen: &FeatureVector<S>,
) -> Result<(S, Array1<S>, Array1<S>), LossError> {
    let (value, d_a, d_b) = cosine_sim_grad(f_gt_masked, f_gen)?;
    Ok((
        S::one() - value,
        d_a.mapv(|v| -v),
        d_b.mapv(|v| -v),
    ))
}

/// The disentanglement guidance value α·(triple + align), with its parts
/// kept for bookkeeping.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RdgValue<S> {
    pub alpha: S,
    pub triple: S,
    pub align: S,
    pub value: S,
}

/// Combines the triplet and alignment terms under the class weight α(k).
pub fn rdg<S: Scalar>(alpha: S, triple: S, align: S) -> RdgValue<S> {
    RdgValue {
        alpha,
        triple,
        align,
        value: alpha * (triple + align),
    }
}

/// Direction loss value; `degenerate` is set when either difference vector
/// was too short to define a direction (loss inactive, gradients zero).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IdgValue<S> {
    pub value: S,
    pub degenerate: bool,
}

/// 1 − cos(n(f_gt_masked) − n(f_gen), n(f_rel_gt) − n(f_rel_gen)) where n
/// is unit normalization; the second argument is the biased relation
/// feature formed inside the interaction region.
pub fn idg<S: Scalar>(
    f_gt_masked: &FeatureVector<S>,
    f_gen: &FeatureVector<S>,
    f_rel_gt: &FeatureVector<S>,
    f_rel_gen: &FeatureVector<S>,
) -> Result<IdgValue<S>, LossError> {
    Ok(idg_grad(f_gt_masked, f_gen, f_rel_gt, f_rel_gen)?.0)
}

#[derive(Debug, Clone)]
pub struct IdgGrads<S: Scalar> {
    pub d_f_gt_masked: Array1<S>,
    pub d_f_gen: Array1<S>,
    pub d_f_rel_gt: Array1<S>,
    pub d_f_rel_gen: Array1<S>,
}

pub fn idg_grad<S: Scalar>(
    f_gt_masked: &FeatureVector<S>,
    f_gen: &FeatureVector<S>,
    f_rel_gt: &FeatureVector<S>,
    f_rel_gen: &FeatureVector<S>,
) -> Result<(IdgValue<S>, IdgGrads<S>), LossError> {
    check_dims(f_gt_masked, f_gen)?;
    check_dims(f_gt_masked, f_rel_gt)?;
    check_dims(f_gt_masked, f_rel_gen)?;
    let ua = unit_checked(f_gt_masked.values())?;
    let ub = unit_checked(f_gen.values())?;
    let uc = unit_checked(f_rel_gt.values())?;
    let ud = unit_checked(f_rel_gen.values())?;
    let g = &ua - &ub;
    let r = &uc - &ud;
    let eps = S::from_f64_lossy(DEGENERATE_DIRECTION_NORM);
    let zeros = || Array1::zeros(f_gt_masked.dim());
    if norm(&g) < eps || norm(&r) < eps {
        return Ok((
            IdgValue {
                value: S::zero(),
                degenerate: true,
            },
            IdgGrads {
                d_f_gt_masked: zeros(),
                d_f_gen: zeros(),
                d_f_rel_gt: zeros(),
                d_f_rel_gen: zeros(),
            },
        ));
    }
    let c = cos_raw(&g, &r)?;
    let d_g = c.d_a.mapv(|v| -v);
    let d_r = c.d_b.mapv(|v| -v);
    Ok((
        IdgValue {
            value: S::one() - c.value,
            degenerate: false,
        },
        IdgGrads {
            d_f_gt_masked: unit_jacobian_apply(f_gt_masked.values(), &d_g),
            d_f_gen: unit_jacobian_apply(f_gen.values(), &d_g).mapv(|v| -v),
            d_f_rel_gt: unit_jacobian_apply(f_rel_gt.values(), &d_r),
            d_f_rel_gen: unit_jacobian_apply(f_rel_gen.values(), &d_r).mapv(|v| -v),
        },
    ))
}

fn unit_checked<S: Scalar>(v: &Array1<S>) -> Result<Array1<S>, LossError> {
    let n = norm(v);
    if n == S::zero() {
        return Err(LossError::ZeroVector);
    }
    Ok(v.mapv(|x| x / n))
}

/// Applies the Jacobian of v ↦ v/‖v‖ to `upstream`:
/// (I − uuᵀ)/‖v‖ · upstream with u = v/‖v‖.
fn unit_jacobian_apply<S: Scalar>(v: &Array1<S>, upstream: &Array1<S>) -> Array1<S> {
    let n = norm(v);
    let u = v.mapv(|x| x / n);
    let proj = u.dot(upstream);
    (upstream - &u.mapv(|x| x * proj)).mapv(|x| x / n)
}

/// Mean over ALL elements of ((noise − predicted) ⊙ mask)²; the divisor is
/// the full element count, not the mask area, so magnitudes stay comparable
/// across masks.
pub fn masked_reconstruction<S: Scalar>(
    noise: &Array3<S>,
    predicted: &Array3<S>,
    mask: &Mask,
) -> Result<S, LossError> {
    Ok(masked_reconstruction_grad(noise, predicted, mask)?.0)
}

/// Gradients of the masked reconstruction loss with respect to both grids
/// (they differ only in sign).
#[derive(Debug, Clone)]
pub struct MaskedRecGrads<S: Scalar> {
    pub d_noise: Array3<S>,
    pub d_predicted: Array3<S>,
}

pub fn masked_reconstruction_grad<S: Scalar>(
    noise: &Array3<S>,
    predicted: &Array3<S>,
    mask: &Mask,
) -> Result<(S, MaskedRecGrads<S>), LossError> {
    if noise.shape() != predicted.shape() {
        return Err(LossError::ShapeMismatch {
            left: noise.shape().to_vec(),
            right: predicted.shape().to_vec(),
        });
    }
    let grid = (noise.shape()[1], noise.shape()[2]);
    if mask.resolution() != grid {
        return Err(LossError::MaskResolution {
            mask: mask.resolution(),
            grid,
        });
    }
    let weights = mask.to_weights::<S>();
    let count = S::from_usize(noise.len()).expect("element count");
    let mut value = S::zero();
    let mut d_noise = Array3::zeros(noise.raw_dim());
    for ((c, h, w), dn) in d_noise.indexed_iter_mut() {
        let m = weights[(h, w)];
        let e = (noise[(c, h, w)] - predicted[(c, h, w)]) * m;
        value += e * e;
        *dn = S::from_f64_lossy(2.0) * e * m / count;
    }
    let d_predicted = d_noise.mapv(|v| -v);
    Ok((
        value / count,
        MaskedRecGrads {
            d_noise,
            d_predicted,
        },
    ))
}

/// Per-term values for one training step. `total` and `rdg` satisfy the
/// weighted-sum identities by construction.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown<S> {
    pub rec: S,
    pub triple: S,
    pub align: S,
    pub rdg: S,
    pub idg: S,
    pub total: S,
    pub alpha_used: S,
}

/// Loss term weights λ1 (reconstruction), λ2 (disentanglement),
/// λ3 (direction).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights<S> {
    pub lambda1: S,
    pub lambda2: S,
    pub lambda3: S,
}

impl<S: Scalar> Default for LossWeights<S> {
    fn default() -> Self {
        Self {
            lambda1: S::from_f64_lossy(DEFAULT_LAMBDAS.0),
            lambda2: S::from_f64_lossy(DEFAULT_LAMBDAS.1),
            lambda3: S::from_f64_lossy(DEFAULT_LAMBDAS.2),
        }
    }
}

/// total = λ1·rec + λ2·rdg + λ3·idg, with the breakdown fields populated
/// from the disentanglement parts.
pub fn total_loss<S: Scalar>(
    rec: S,
    rdg_val: &RdgValue<S>,
    idg_val: S,
    weights: &LossWeights<S>,
) -> LossBreakdown<S> {
    LossBreakdown {
        rec,
        triple: rdg_val.triple,
        align: rdg_val.align,
        rdg: rdg_val.value,
        idg: idg_val,
        total: weights.lambda1 * rec + weights.lambda2 * rdg_val.value + weights.lambda3 * idg_val,
        alpha_used: rdg_val.alpha,
    }
}

/// Central-difference gradient of `f` at `x` with the given step; the
/// reference oracle the analytic gradients are checked against.
pub fn numeric_gradient<S: Scalar>(
    f: impl Fn(&[S]) -> S,
    x: &[S],
    step: S,
) -> Vec<S> {
    let mut probe = x.to_vec();
    let two = S::from_f64_lossy(2.0);
    (0..x.len())
        .map(|i| {
            let original = probe[i];
            probe[i] = original + step;
            let plus = f(&probe);
            probe[i] = original - step;
            let minus = f(&probe);
            probe[i] = original;
            (plus - minus) / (two * step)
        })
        .collect()
}

/// Relative error between an analytic and a numeric gradient:
/// ‖a − n‖ / max(‖a‖, ‖n‖, floor).
pub fn gradient_relative_error<S: Scalar>(analytic: &[S], numeric: &[S], floor: S) -> S {
    let mut diff = S::zero();
    let mut na = S::zero();
    let mut nn = S::zero();
    for (a, n) in analytic.iter().zip(numeric) {
        diff += (*a - *n) * (*a - *n);
        na += *a * *a;
        nn += *n * *n;
    }
    diff.sqrt() / na.sqrt().max(nn.sqrt()).max(floor)
}
