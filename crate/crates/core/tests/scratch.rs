//! TEMPORARY measurement harness — delete before shipping.

use std::time::Instant;

use verbdiff_core::attention_geometry::StepAggregation;
use verbdiff_core::guidance_losses::cosine_sim;
use verbdiff_core::hoi_data::{anchor_triplet, prompt_parts, render_prompt};
use verbdiff_core::model_adapters::{ImageEncoderPort, TextEncoderPort, ToyBackend};
use verbdiff_core::synth::{fixture_images, training_fixture_records};
use verbdiff_core::trainer::{run, TrainConfig, TrainDataset};
use verbdiff_core::Real;

fn dataset() -> TrainDataset {
    let records = training_fixture_records();
    let images = fixture_images(&records);
    TrainDataset::build(&records, &images, Default::default()).unwrap()
}

fn config(seed: u64) -> TrainConfig {
    TrainConfig {
        batch_size: 9,
        learning_rate: 2e-3,
        margin: 0.02,
        max_steps: Some(200),
        seed,
        ..TrainConfig::default()
    }
}

/// Mean over fixture classes of sim(f_gen, e_gt) − sim(f_gen, e_anc) for
/// full sampled generations from the given backend.
fn generation_margin(backend: &ToyBackend, dataset: &TrainDataset) -> Real {
    let gen_seeds = [901u64, 902, 903];
    let mut total = 0.0;
    let mut n = 0usize;
    for prompt in &dataset.prompts {
        let e_gt = backend.text.encode(&render_prompt(&prompt.triplet)).unwrap();
        let anc = anchor_triplet(&prompt.triplet, &dataset.anchors).unwrap();
        let e_anc = backend.text.encode(&render_prompt(&anc)).unwrap();
        let cond = backend.conditioning(&prompt_parts(&prompt.triplet)).unwrap();
        for &gs in &gen_seeds {
            let (image, _) = backend
                .sample_conditioned(&cond, 30, gs, false, StepAggregation::default())
                .unwrap();
            let f_gen = backend.image.encode(&image).unwrap();
            total += cosine_sim(&f_gen, &e_gt).unwrap() - cosine_sim(&f_gen, &e_anc).unwrap();
            n += 1;
        }
    }
    total / n as Real
}

#[test]
fn fixture_feature_alignment_probe() {
    let records = training_fixture_records();
    let images = fixture_images(&records);
    let ds = dataset();
    let backend = ToyBackend::new(0);
    let mut cos_gt = Vec::new();
    let mut margins = Vec::new();
    for r in &records {
        let t = &r.pairs[0].triplet;
        let e_gt = backend.text.encode(&render_prompt(t)).unwrap();
        let anc = anchor_triplet(t, &ds.anchors).unwrap();
        let e_anc = backend.text.encode(&render_prompt(&anc)).unwrap();
        let f = backend.image.encode(&images[&r.image_id]).unwrap();
        cos_gt.push(cosine_sim(&f, &e_gt).unwrap());
        margins.push(cosine_sim(&f, &e_gt).unwrap() - cosine_sim(&f, &e_anc).unwrap());
    }
    let mean = |v: &[Real]| v.iter().sum::<Real>() / v.len() as Real;
    println!(
        "fixture: mean cos(f_img, e_gt) = {:.4}, min = {:.4}, mean margin = {:.4}",
        mean(&cos_gt),
        cos_gt.iter().cloned().fold(Real::INFINITY, Real::min),
        mean(&margins)
    );
}

#[test]
fn criterion5_ratio_sweep() {
    let ds = dataset();
    for seed in [0u64, 3, 7, 11] {
        let dir = tempfile::tempdir().unwrap();
        let start = Instant::now();
        let outcome = run(&config(seed), &ds, dir.path()).unwrap();
        let term = |f: fn(&verbdiff_core::guidance_losses::LossBreakdown<Real>) -> Real| {
            let v: Vec<Real> = outcome.records.iter().map(|r| f(&r.losses)).collect();
            let first: Real = v[..20].iter().sum::<Real>() / 20.0;
            let last: Real = v[v.len() - 20..].iter().sum::<Real>() / 20.0;
            (first, last)
        };
        let (tf, tl) = term(|l| l.total);
        let (rf, rl) = term(|l| l.rec);
        let (trf, trl) = term(|l| l.triple);
        let (af, al) = term(|l| l.align);
        let (idf, idl) = term(|l| l.idg);
        println!(
            "seed {seed}: total {tf:.3}->{tl:.3} (ratio {:.4}) | rec {rf:.3}->{rl:.3} | triple {trf:.4}->{trl:.4} | align {af:.4}->{al:.4} | idg {idf:.4}->{idl:.4} | wall {:.1}s",
            tl / tf,
            start.elapsed().as_secs_f64()
        );
    }
}

/// Estimate-based margin: same probe as training's guidance source — noised
/// fixture images, one-step clean estimates at a fixed grid of timesteps.
fn estimate_margin(backend: &ToyBackend, ds: &TrainDataset) -> Real {
    use verbdiff_core::model_adapters::DenoiserPort;
    use verbdiff_core::rng::stream;
    let mut total = 0.0;
    let mut n = 0usize;
    for prompt in &ds.prompts {
        let e_gt = backend.text.encode(&render_prompt(&prompt.triplet)).unwrap();
        let anc = anchor_triplet(&prompt.triplet, &ds.anchors).unwrap();
        let e_anc = backend.text.encode(&render_prompt(&anc)).unwrap();
        let cond = backend.conditioning(&prompt_parts(&prompt.triplet)).unwrap();
        let image_id = &prompt.image_ids[0];
        let item = ds.item(&prompt.triplet, image_id).unwrap();
        let z0 = backend.codec.encode_image(&item.image).unwrap();
        for t in [100usize, 300, 500, 700, 900] {
            let mut rng = stream(4242, &format!("probe/{}/{t}", prompt.triplet));
            let noise = ndarray::Array3::from_shape_simple_fn(z0.dim(), || {
                use rand::Rng;
                rng.sample(rand_distr::StandardNormal)
            });
            let z_t = backend.schedule.add_noise(&z0, &noise, t).unwrap();
            let pred = backend.denoiser.predict_noise(&z_t, t, &cond).unwrap();
            let x0 = backend.schedule.clean_estimate(&z_t, &pred.noise, t).unwrap();
            let image = backend.codec.decode_latent(&x0).unwrap();
            let f = backend.image.encode(&image).unwrap();
            total += cosine_sim(&f, &e_gt).unwrap() - cosine_sim(&f, &e_anc).unwrap();
            n += 1;
        }
    }
    total / n as Real
}

#[test]
fn criterion6_margin_sweep() {
    let ds = dataset();
    for seed in [0u64, 1, 2, 3, 7] {
        let init_backend = ToyBackend::new(seed);
        let gen_init = generation_margin(&init_backend, &ds);
        let est_init = estimate_margin(&init_backend, &ds);
        let dir = tempfile::tempdir().unwrap();
        let outcome = run(&config(seed), &ds, dir.path()).unwrap();
        let gen_trained = generation_margin(&outcome.backend, &ds);
        let est_trained = estimate_margin(&outcome.backend, &ds);
        println!(
            "seed {seed}: gen {gen_init:+.5} -> {gen_trained:+.5} (d {:+.5}) | est {est_init:+.5} -> {est_trained:+.5} (d {:+.5})",
            gen_trained - gen_init,
            est_trained - est_init
        );
    }
}
