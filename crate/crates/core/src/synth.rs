//! Deterministic synthetic corpora for tests, fixtures, and the CLI's
//! `prep-data --synthetic` path.
//!
//! Every fixture here is analytic: class counts, anchor verbs, balance
//! factors, mask areas, and region boxes are all hand-computable, so tests
//! can pin them as independent oracles instead of trusting the code under
//! test. Synthetic pixels are trigonometric patterns keyed by the class
//! and image id plus a planted feature-space component from fixed-seed
//! encoders — no free randomness anywhere, so rebuilding is bit-exact.

use std::collections::BTreeMap;

use ndarray::Array3;

use crate::hoi_data::{
    render_prompt, AnnotationRecord, BoundingBox, HOIPair, HOITriplet, NO_INTERACTION_VERB,
};
use crate::model_adapters::{
    Image, TextEncoderPort, ToyImageEncoder, ToyTextEncoder, LATENT_SHAPE,
};
use crate::rng::fnv1a;
use crate::Real;

/// Canonical pixel size recorded for synthetic annotations.
pub const SYNTH_WIDTH: u32 = 640;
/// Canonical pixel size recorded for synthetic annotations.
pub const SYNTH_HEIGHT: u32 = 480;

fn pair(verb: &str, object: &str, human_box: [Real; 4], object_box: [Real; 4]) -> HOIPair {
    HOIPair {
        triplet: HOITriplet::new("person", verb, object),
        human_box: BoundingBox::from_corners(human_box),
        object_box: BoundingBox::from_corners(object_box),
    }
}

fn record(image_id: String, pairs: Vec<HOIPair>) -> AnnotationRecord {
    AnnotationRecord {
        image_id,
        width: SYNTH_WIDTH,
        height: SYNTH_HEIGHT,
        pairs,
    }
}

/// Boxes used by every bicycle pair in the fixtures. Chosen so the 32×32
/// interaction mask has a hand-countable area (414 cells) and the
/// ground-truth region box is exactly [0.0125, 0.175, 0.8625, 1.0].
pub const BICYCLE_HUMAN_BOX: [Real; 4] = [0.1, 0.2, 0.4, 0.8];
/// See [`BICYCLE_HUMAN_BOX`].
pub const BICYCLE_OBJECT_BOX: [Real; 4] = [0.35, 0.5, 0.9, 0.9];

const HORSE_HUMAN_BOX: [Real; 4] = [0.5, 0.1, 0.8, 0.7];
const HORSE_OBJECT_BOX: [Real; 4] = [0.1, 0.4, 0.5, 0.95];

/// Boxes used by the training fixture. They deliberately cover most of the
/// frame: the interaction mask is then nearly the whole image, so the
/// masked ground-truth feature tracks the full-image feature and the
/// alignment term's optimum is consistent with plain reconstruction
/// instead of fighting it.
const TRAIN_BICYCLE_HUMAN_BOX: [Real; 4] = [0.02, 0.05, 0.60, 0.95];
const TRAIN_BICYCLE_OBJECT_BOX: [Real; 4] = [0.40, 0.05, 0.98, 0.95];
const TRAIN_HORSE_HUMAN_BOX: [Real; 4] = [0.05, 0.02, 0.62, 0.92];
const TRAIN_HORSE_OBJECT_BOX: [Real; 4] = [0.38, 0.10, 0.95, 0.98];

fn bicycle_pair(verb: &str) -> HOIPair {
    pair(verb, "bicycle", BICYCLE_HUMAN_BOX, BICYCLE_OBJECT_BOX)
}

fn horse_pair(verb: &str) -> HOIPair {
    pair(verb, "horse", HORSE_HUMAN_BOX, HORSE_OBJECT_BOX)
}

/// 50-image corpus exercising every data-preparation edge:
///
/// | class                  | images | notes                              |
/// |------------------------|--------|------------------------------------|
/// | person riding bicycle  | 0–19   | 20 samples                         |
/// | person holding bicycle | 10–24  | 15 samples; 10–19 carry two classes|
/// | person washing bicycle | 25–29  | 5 samples (rare)                   |
/// | person "and" bicycle   | 30–31  | no-interaction, dropped on realign |
/// | person riding horse    | 32–40  | 9 samples                          |
/// | person feeding horse   | 41–49  | 9 samples (count tie with riding)  |
///
/// Kept classes total 58 samples, so the balance β is 57/58; the horse
/// anchor resolves the 9–9 tie lexicographically to "feeding".
pub fn prep_fixture_records() -> Vec<AnnotationRecord> {
    let mut records = Vec::new();
    for i in 0..50u32 {
        let id = format!("img{i:04}");
        let pairs = match i {
            0..=9 => vec![bicycle_pair("riding")],
            10..=19 => vec![bicycle_pair("riding"), bicycle_pair("holding")],
            20..=24 => vec![bicycle_pair("holding")],
            25..=29 => vec![bicycle_pair("washing")],
            30..=31 => vec![bicycle_pair(NO_INTERACTION_VERB)],
            32..=40 => vec![horse_pair("riding")],
            _ => vec![horse_pair("feeding")],
        };
        records.push(record(id, pairs));
    }
    records
}

/// 62-image, 8-class corpus for training and evaluation fixtures. Per-class
/// counts (four verbs per object, one class per image):
///
/// bicycle — riding 12, holding 9, washing 7, carrying 5;
/// horse — riding 11, feeding 8, walking 6, straddling 4.
///
/// Both anchors are "riding"; with a rare threshold of 10 the two riding
/// classes are the full split and the other six are rare.
pub fn training_fixture_records() -> Vec<AnnotationRecord> {
    let plan: [(&str, &str, usize); 8] = [
        ("riding", "bicycle", 12),
        ("holding", "bicycle", 9),
        ("washing", "bicycle", 7),
        ("carrying", "bicycle", 5),
        ("riding", "horse", 11),
        ("feeding", "horse", 8),
        ("walking", "horse", 6),
        ("straddling", "horse", 4),
    ];
    let mut records = Vec::new();
    let mut next = 0u32;
    for (verb, object, count) in plan {
        for _ in 0..count {
            let p = if object == "bicycle" {
                pair(verb, "bicycle", TRAIN_BICYCLE_HUMAN_BOX, TRAIN_BICYCLE_OBJECT_BOX)
            } else {
                pair(verb, "horse", TRAIN_HORSE_HUMAN_BOX, TRAIN_HORSE_OBJECT_BOX)
            };
            records.push(record(format!("t{next:04}"), vec![p]));
            next += 1;
        }
    }
    records
}

/// Root-mean-square amplitude of the planted prompt-feature component in
/// [`synthetic_image`]. Comparable to the carrier's RMS (0.25/√2 ≈ 0.18),
/// so neither term drowns out the other.
const PLANTED_FEATURE_RMS: Real = 0.5;

/// Deterministic synthetic pixels for an annotated image: a trigonometric
/// carrier whose frequencies come from hashing the verb and object, a
/// smooth bump at each box center, and a planted feature-space component,
/// clamped to [−1, 1]. Purely analytic and seeded by fixed constants, so
/// identical ids always produce identical pixels and distinct classes
/// produce visibly different ones. Three deliberate design points make the
/// corpus learnable rather than merely distinct: the per-image phase jitter
/// is a narrow 1/64-turn band, so a class's images cluster tightly in
/// feature space while staying distinct; distinct hash-assigned carrier
/// frequencies keep the classes well separated under pooled features; and
/// each pair plants a pixel component that the default toy image encoder
/// maps onto the pair's prompt embedding, giving images and captions the
/// correlated embeddings real photo corpora have under a joint image–text
/// model. That correlation is what lets feature-alignment training move
/// generations toward the right prompt for systematic reasons.
pub fn synthetic_image(record: &AnnotationRecord) -> Image {
    let (c_n, h, w) = LATENT_SHAPE;
    let text_encoder = ToyTextEncoder::default();
    let image_encoder = ToyImageEncoder::default();
    let phase_seed = (fnv1a(record.image_id.as_bytes()) % 64) as Real / (64.0 * 64.0);
    let mut data = Array3::zeros((c_n, h, w));
    for pair in &record.pairs {
        let f_verb = 1.0 + (fnv1a(pair.triplet.verb.as_bytes()) % 5) as Real;
        let f_obj = 1.0 + (fnv1a(pair.triplet.object.as_bytes()) % 5) as Real;
        let centers = [pair.human_box.center(), pair.object_box.center()];
        for c in 0..c_n {
            let phase = std::f64::consts::TAU * (phase_seed + c as Real / 8.0);
            for y in 0..h {
                let v = y as Real / (h - 1) as Real;
                for x in 0..w {
                    let u = x as Real / (w - 1) as Real;
                    let carrier = 0.25
                        * (std::f64::consts::TAU * (f_verb * u + f_obj * v) + phase).sin();
                    let mut bumps = 0.0;
                    for (cx, cy) in centers {
                        let d2 = (u - cx).powi(2) + (v - cy).powi(2);
                        bumps += 0.4 * (-d2 / 0.02).exp();
                    }
                    data[(c, y, x)] += carrier + bumps;
                }
            }
        }
        let prompt_feature = text_encoder
            .encode(&render_prompt(&pair.triplet))
            .expect("fixture prompts are nonempty");
        let mut planted = image_encoder.feature_pixels(prompt_feature.values(), LATENT_SHAPE);
        let rms = planted.mapv(|p| p * p).mean().unwrap_or(0.0).sqrt();
        if rms > 0.0 {
            planted.mapv_inplace(|p| p * (PLANTED_FEATURE_RMS / rms));
            data += &planted;
        }
    }
    data.mapv_inplace(|v: Real| v.clamp(-1.0, 1.0));
    Image::new(data)
}

/// Synthetic pixels for a whole corpus, keyed by image id.
pub fn fixture_images(records: &[AnnotationRecord]) -> BTreeMap<String, Image> {
    records
        .iter()
        .map(|r| (r.image_id.clone(), synthetic_image(r)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention_geometry::RegionParams;
    use crate::hoi_data::{
        build_anchor_table, build_balance_table, gt_interaction_region, interaction_mask,
        realign_outcome, BalanceMode,
    };

    #[test]
    fn prep_fixture_has_pinned_class_structure() {
        let records = prep_fixture_records();
        assert_eq!(records.len(), 50);

        let outcome = realign_outcome(&records);
        assert_eq!(outcome.total_classes, 6);
        assert_eq!(outcome.excluded_classes, 1);
        assert_eq!(outcome.prompts.len(), 5);

        let count = |verb: &str, object: &str| {
            outcome
                .prompts
                .iter()
                .find(|p| p.triplet.verb == verb && p.triplet.object == object)
                .map(|p| p.sample_count)
                .unwrap()
        };
        assert_eq!(count("riding", "bicycle"), 20);
        assert_eq!(count("holding", "bicycle"), 15);
        assert_eq!(count("washing", "bicycle"), 5);
        assert_eq!(count("riding", "horse"), 9);
        assert_eq!(count("feeding", "horse"), 9);
    }

    #[test]
    fn prep_fixture_anchor_tie_breaks_lexicographically() {
        let records = prep_fixture_records();
        let prompts = realign_outcome(&records).prompts;
        let anchors = build_anchor_table(&prompts);
        assert_eq!(anchors.anchor_verb("bicycle").unwrap(), "riding");
        // riding and feeding tie at 9 samples; "feeding" < "riding".
        assert_eq!(anchors.anchor_verb("horse").unwrap(), "feeding");
    }

    #[test]
    fn prep_fixture_balance_beta_is_57_over_58() {
        let records = prep_fixture_records();
        let prompts = realign_outcome(&records).prompts;
        let table = build_balance_table(&prompts, BalanceMode::AsWritten).unwrap();
        assert_eq!(table.total_samples, 58);
        assert!((table.beta - 57.0 / 58.0).abs() < 1e-15);
    }

    #[test]
    fn bicycle_mask_area_matches_hand_count() {
        // Human box [0.1,0.2]–[0.4,0.8] covers cols 3–12 × rows 6–25 = 200
        // cells at 32×32 (pixel-center rule); object box [0.35,0.5]–
        // [0.9,0.9] covers cols 11–28 × rows 16–28 = 234; they overlap on
        // cols 11–12 × rows 16–25 = 20. Union: 200 + 234 − 20 = 414.
        let records = prep_fixture_records();
        let target = HOITriplet::new("person", "riding", "bicycle");
        let mask = interaction_mask(&records[0], &target, (32, 32)).unwrap();
        assert_eq!(mask.ones_count(), 414);
    }

    #[test]
    fn bicycle_gt_region_matches_hand_computation() {
        // Centers: human (0.25, 0.5), object (0.625, 0.7); midpoint
        // (0.4375, 0.6); distance √(0.375² + 0.2²) = 0.425 exactly, which
        // beats the 0.05 floor, so the box is the midpoint ± 0.425 clipped
        // to the unit square.
        let human = BoundingBox::from_corners(BICYCLE_HUMAN_BOX);
        let object = BoundingBox::from_corners(BICYCLE_OBJECT_BOX);
        let region = gt_interaction_region(&human, &object, &RegionParams::default());
        assert!((region.center.x - 0.4375).abs() < 1e-12);
        assert!((region.center.y - 0.6).abs() < 1e-12);
        assert!((region.half_extent - 0.425).abs() < 1e-12);
        let b = &region.clipped_box;
        assert!((b.x_min - 0.0125).abs() < 1e-12);
        assert!((b.y_min - 0.175).abs() < 1e-12);
        assert!((b.x_max - 0.8625).abs() < 1e-12);
        assert!((b.y_max - 1.0).abs() < 1e-12);
    }

    #[test]
    fn training_fixture_counts_and_anchors() {
        let records = training_fixture_records();
        assert_eq!(records.len(), 62);
        let outcome = realign_outcome(&records);
        assert_eq!(outcome.prompts.len(), 8);
        assert_eq!(outcome.excluded_classes, 0);
        let total: u64 = outcome.prompts.iter().map(|p| p.sample_count).sum();
        assert_eq!(total, 62);

        let anchors = build_anchor_table(&outcome.prompts);
        assert_eq!(anchors.anchor_verb("bicycle").unwrap(), "riding");
        assert_eq!(anchors.anchor_verb("horse").unwrap(), "riding");

        let rare: Vec<_> = outcome
            .prompts
            .iter()
            .filter(|p| p.sample_count < 10)
            .map(|p| p.triplet.verb.as_str())
            .collect();
        assert_eq!(
            rare,
            ["carrying", "feeding", "holding", "straddling", "walking", "washing"]
        );
    }

    #[test]
    fn synthetic_images_are_deterministic_and_class_distinct() {
        let records = training_fixture_records();
        let a = synthetic_image(&records[0]);
        let b = synthetic_image(&records[0]);
        assert_eq!(a.data(), b.data());
        assert_eq!(a.shape(), LATENT_SHAPE);
        assert!(a.data().iter().all(|v| (-1.0..=1.0).contains(v)));

        // First image of each class must differ from the others.
        let firsts = [0usize, 12, 21, 28, 33, 44, 52, 58];
        for (i, &fa) in firsts.iter().enumerate() {
            for &fb in &firsts[i + 1..] {
                assert_ne!(
                    synthetic_image(&records[fa]).data(),
                    synthetic_image(&records[fb]).data(),
                    "classes at {fa} and {fb} collided"
                );
            }
        }
    }

    #[test]
    fn fixture_images_cover_every_record() {
        let records = prep_fixture_records();
        let images = fixture_images(&records);
        assert_eq!(images.len(), records.len());
        assert!(records.iter().all(|r| images.contains_key(&r.image_id)));
    }
}
