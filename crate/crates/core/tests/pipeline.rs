//! End-to-end checks across dictionary, sampler, ADMM and synthesis.

mod common;

use std::sync::Arc;

use patchsynth::archive::{encode_layer, write_class_model};
use patchsynth::assess::{image_log_likelihood, ll_dictionaries, patch_log_density, AssessConfig, ImageScore};
use patchsynth::dictionary::build_dictionaries;
use patchsynth::epll::{location_set, z_step, LayerInputs};
use patchsynth::image::{bilinear_upscale2x, build_pyramid, extract_patch};
use patchsynth::synthesis::{layer_synthesis, make_seed, synthesize, write_run_dir};
use patchsynth::{
    AdmmState, ClassModel, ContextSpec, Image, IterationParams, KnnBackend, LayerBank, LlConfig, OriginalityIndex,
    PatchLocation, ScoreReport, SynthesisSchedule,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn small_digit_schedule() -> SynthesisSchedule {
    let mut s = SynthesisSchedule::mnist_digit();
    s.k = 8;
    s
}

#[test]
fn kdtree_and_exhaustive_top10_agree() {
    let train = common::bumps(20, 32, 3);
    let pyramids: Vec<Vec<Image>> = train.iter().map(|t| build_pyramid(t, 1).unwrap()).collect();
    let bank = Arc::new(LayerBank::from_pyramids(&pyramids, 0, 6, ContextSpec::square(2, 0.5)).unwrap());
    let loc = PatchLocation::new(12, 12, 0);
    let dicts = build_dictionaries(&bank, &[loc], 2, KnnBackend::KdTree).unwrap();
    let dict = &dicts[&loc];
    assert_eq!(dict.len(), 500);
    assert!(dict.has_index());
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for probe_no in 0..100 {
        // half the probes are perturbed stored descriptors, half are uniform noise
        let probe: Vec<f64> = if probe_no % 2 == 0 {
            let base = dict.descriptor(rng.random_range(0..dict.len()));
            base.iter().map(|v| v + 0.05 * (rng.random::<f64>() - 0.5)).collect()
        } else {
            (0..dict.descriptor_len()).map(|_| rng.random::<f64>()).collect()
        };
        let a = dict.knn_query(&probe, 10).unwrap();
        let b = dict.knn_exhaustive(&probe, 10).unwrap();
        let ia: Vec<usize> = a.iter().map(|n| n.index).collect();
        let ib: Vec<usize> = b.iter().map(|n| n.index).collect();
        assert_eq!(ia, ib, "probe {probe_no}");
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.distance, y.distance);
        }
    }
}

fn self_sr_images() -> (Vec<Image>, &'static str) {
    match common::mnist("train") {
        Some(c) => (c.class_images(3).into_iter().take(200).collect(), "MNIST"),
        None => (common::bumps(200, 32, 5), "synthetic"),
    }
}

#[test]
fn deterministic_self_super_resolution() {
    let (train, source) = self_sr_images();
    // with a neighbor window, HR sources one pixel apart share an LR patch and
    // h -> 0 cannot tell them apart; window 0 leaves the image's own patch unique
    let mut schedule = small_digit_schedule().deterministic();
    schedule.layers[0].window = 0;
    let model = ClassModel::build(&train, &schedule, KnnBackend::Exhaustive).unwrap();
    let mut worst = f64::INFINITY;
    for (j, img) in train.iter().take(10).enumerate() {
        let pyr = build_pyramid(img, 1).unwrap();
        let (out, _) = layer_synthesis(&pyr[1], 0, &model.layers[0], &schedule, j as u64).unwrap();
        let p = common::psnr(&out, &pyr[0]);
        worst = worst.min(p);
        assert!(p >= 30.0, "{source} image {j}: PSNR {p:.2} dB");
    }
    eprintln!("self super-resolution on {source}: worst PSNR {worst:.2} dB");
}

#[test]
fn deterministic_z_step_picks_own_patches() {
    let train = common::textured(10, 32, 8);
    let pyramids: Vec<Vec<Image>> = train.iter().map(|t| build_pyramid(t, 1).unwrap()).collect();
    let bank = Arc::new(LayerBank::from_pyramids(&pyramids, 0, 6, ContextSpec::square(2, 0.5)).unwrap());
    let locs = location_set(32, 32, 0, 6, 2, (0, 0)).unwrap();
    let dicts = build_dictionaries(&bank, &locs, 0, KnnBackend::Exhaustive).unwrap();
    let params = IterationParams {
        lambda: 1.0,
        rho: 0.0,
        h: 1e-12,
        offset: (0, 0),
    };
    let (mut own, mut total) = (0, 0);
    for (j, pyr) in pyramids.iter().enumerate() {
        let mut state = AdmmState::new(bilinear_upscale2x(&pyr[1]));
        state.activate(&locs, 6);
        let inputs = LayerInputs {
            lr_image: &pyr[1],
            dictionaries: &dicts,
            layer: 0,
            patch_side: 6,
            k: 16,
            root_seed: 1,
        };
        let z = z_step(&state, &inputs, &params).unwrap();
        own += z.values().filter(|c| c.source_image == j).count();
        total += z.len();
    }
    let frac = own as f64 / total as f64;
    assert!(frac >= 0.95, "own-image fraction {frac}");
}

#[test]
fn runs_are_bit_reproducible() {
    let train = common::bumps(30, 32, 9);
    let schedule = small_digit_schedule();
    let model = ClassModel::build(&train, &schedule, KnnBackend::Exhaustive).unwrap();
    let seed = make_seed(&train[4], (32, 32), schedule.seed_size()).unwrap();
    let a = synthesize(&seed, &schedule, &model, 1234).unwrap();
    let b = synthesize(&seed, &schedule, &model, 1234).unwrap();
    let c = synthesize(&seed, &schedule, &model, 1235).unwrap();
    assert_eq!(a.layers, b.layers);
    assert_ne!(a.output(), c.output());

    let dir = tempfile::tempdir().unwrap();
    let hash = schedule.hash().unwrap();
    write_run_dir(&dir.path().join("r1"), &a, "s", Some("5"), 1234, &hash, 1.0).unwrap();
    write_run_dir(&dir.path().join("r2"), &b, "s", Some("5"), 1234, &hash, 2.0).unwrap();
    for f in ["seed.pgm", "layer_1.pgm", "layer_0.pgm", "final.pgm", "run.json"] {
        let x = std::fs::read(dir.path().join("r1").join(f)).unwrap();
        let y = std::fs::read(dir.path().join("r2").join(f)).unwrap();
        assert_eq!(x, y, "{f}");
    }
}

#[test]
fn outputs_stay_in_range() {
    let train = common::bumps(30, 32, 13);
    let schedule = small_digit_schedule();
    let model = ClassModel::build(&train, &schedule, KnnBackend::Exhaustive).unwrap();
    for j in 0..4 {
        let seed = make_seed(&train[j], (32, 32), schedule.seed_size()).unwrap();
        let out = synthesize(&seed, &schedule, &model, 50 + j as u64).unwrap();
        for layer in &out.layers {
            assert!(layer.pixels().iter().all(|v| (-0.1..=1.1).contains(v)));
        }
    }
}

#[test]
fn dictionary_archives_are_deterministic() {
    let train = common::bumps(12, 32, 21);
    let schedule = small_digit_schedule();
    let hash = schedule.hash().unwrap();
    let a = ClassModel::build(&train, &schedule, KnnBackend::Exhaustive).unwrap();
    let b = ClassModel::build(&train, &schedule, KnnBackend::Exhaustive).unwrap();
    for l in 0..schedule.depth() {
        let w = schedule.layers[l].window;
        assert_eq!(encode_layer(&a.layers[l], w, &hash).unwrap(), encode_layer(&b.layers[l], w, &hash).unwrap());
    }
    let dir = tempfile::tempdir().unwrap();
    let files_a = write_class_model(&dir.path().join("a"), "5", &a, &schedule).unwrap();
    let files_b = write_class_model(&dir.path().join("b"), "5", &b, &schedule).unwrap();
    for (x, y) in files_a.iter().zip(&files_b) {
        assert_eq!(std::fs::read(x).unwrap(), std::fs::read(y).unwrap());
    }
}

#[test]
fn log_likelihood_is_additive_over_images() {
    let train = common::bumps(25, 16, 31);
    let xs = common::bumps(2, 16, 32);
    let cfg = LlConfig {
        patch_side: 4,
        ..LlConfig::default()
    };
    let dicts = ll_dictionaries(&train, &cfg).unwrap();
    let locs = cfg.locations(16, 16).unwrap();
    let patches: Vec<Vec<patchsynth::Patch>> = locs
        .iter()
        .map(|l| train.iter().map(|t| extract_patch(t, *l, 4).unwrap()).collect())
        .collect();
    // independent oracle: the normalized sum of per-patch Parzen log densities
    let direct = |x: &Image| -> f64 {
        let s: f64 = locs
            .iter()
            .zip(&patches)
            .map(|(l, d)| patch_log_density(&extract_patch(x, *l, 4).unwrap(), d, cfg.sigma).unwrap())
            .sum();
        x.len() as f64 * s / (locs.len() * 16) as f64
    };
    let each: Vec<f64> = xs.iter().map(|x| image_log_likelihood(x, &dicts, &cfg).unwrap()).collect();
    for (x, v) in xs.iter().zip(&each) {
        assert!((v - direct(x)).abs() < 1e-9);
    }
    // the report's aggregate is the per-image sum spread over the images
    let rows: Vec<ImageScore> = each
        .iter()
        .enumerate()
        .map(|(i, &ll)| ImageScore {
            id: i.to_string(),
            ll,
            originality: 1.0,
            d_g: 1.0,
            d_t: 1.0,
        })
        .collect();
    let cfg_all = AssessConfig {
        ll: cfg,
        spread: None,
        mask: None,
        corpus_hash: "test".into(),
    };
    let report = ScoreReport::new(&cfg_all, rows, Vec::new()).unwrap();
    assert!((2.0 * report.aggregates.mean_ll - (each[0] + each[1])).abs() < 1e-12);
}

#[test]
fn originality_ratio_is_scale_invariant() {
    let train = common::bumps(15, 16, 41);
    let x = common::bumps(1, 16, 42).remove(0);
    let base = OriginalityIndex::new(&train, None).unwrap().score(&x).unwrap();
    for alpha in [0.1, 3.0, 250.0] {
        let scaled: Vec<Image> = train.iter().map(|t| t.map(|v| v * alpha)).collect();
        let s = OriginalityIndex::new(&scaled, None).unwrap().score(&x.map(|v| v * alpha)).unwrap();
        assert_eq!(s.nearest, base.nearest);
        assert!((s.ratio - base.ratio).abs() < 1e-12 * base.ratio.max(1.0));
        assert!((s.d_g - alpha * base.d_g).abs() < 1e-9 * alpha);
    }
}
