//! End-to-end use of the library API: manifest, protection, persistence
//! and evaluation.

use voidkit::evaluation::{psnr_from_l2, row_labels, swap_and_score, RowStatus, TransformSuite, PSNR_CAP};
use voidkit::gradcheck::{check_objective_gradients, GradCheckConfig};
use voidkit::image::{max_byte_deviation, quantize_u8, ImageTensor};
use voidkit::losses::LossSettings;
use voidkit::optimizer::{protect, RunOptions};
use voidkit::saliency::MaskSet;
use voidkit::synth::synthetic_face;
use voidkit::types::PerturbationBudget;
use voidkit::victim::{BundleManifest, VictimBundle};

fn short_run(seed: u64) -> RunOptions {
    RunOptions {
        budget: PerturbationBudget::new(12.0 / 255.0, 1.0 / 255.0, 4).unwrap(),
        seed,
        ..RunOptions::default()
    }
}

#[test]
fn manifest_round_trip_rebuilds_identical_models() {
    let manifest = BundleManifest {
        seed: 17,
        ..BundleManifest::default()
    };
    let reloaded = BundleManifest::from_toml(&manifest.to_toml()).unwrap();
    assert_eq!(reloaded, manifest);
    let a = VictimBundle::surrogate(&manifest).unwrap();
    let b = VictimBundle::surrogate(&reloaded).unwrap();
    let img = synthetic_face(2, a.image_dims().0);
    let enc = a.evaluation_encoder().id().to_string();
    assert_eq!(a.embed(&img, &enc).unwrap(), b.embed(&img, &enc).unwrap());
    assert_eq!(a.detector.detect(&img).unwrap(), b.detector.detect(&img).unwrap());
}

#[test]
fn protected_png_stays_within_budget_and_reloads_exactly() {
    let bundle = VictimBundle::surrogate_seeded(0);
    let src = synthetic_face(11, bundle.image_dims().0);
    let out = protect(&src, &bundle, LossSettings::default(), short_run(3)).unwrap();
    assert!(out.summary.aborted.is_none());
    assert_eq!(out.summary.iterations, 4);
    assert_eq!(out.history.len(), 4);
    assert!(out.summary.linf_bytes <= 12);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("protected.png");
    out.image.save_png(&path).unwrap();
    let loaded = ImageTensor::load(&path).unwrap();
    assert_eq!(quantize_u8(&loaded), quantize_u8(&out.image));
    assert!(max_byte_deviation(&quantize_u8(&loaded), &quantize_u8(&src)) <= 12);

    let again = protect(&src, &bundle, LossSettings::default(), short_run(3)).unwrap();
    assert_eq!(again.image, out.image);
    assert_eq!(again.history, out.history);
}

#[test]
fn evaluation_scores_every_transform() {
    let bundle = VictimBundle::surrogate_seeded(0);
    let size = bundle.image_dims().0;
    let src = synthetic_face(21, size);
    let target = synthetic_face(5021, size);
    let protected = protect(&src, &bundle, LossSettings::default(), short_run(0)).unwrap().image;
    let suite = TransformSuite::default();
    let rows = swap_and_score("p0", &protected, &src, &target, &bundle, &suite);
    let labels: Vec<String> = rows.iter().map(|r| r.transform.clone()).collect();
    assert_eq!(labels, row_labels(&suite));
    for r in &rows {
        match r.status {
            RowStatus::Ok => {
                assert!(r.l2 >= 0.0);
                assert_eq!(r.psnr, psnr_from_l2(r.l2));
                assert!(r.psnr <= PSNR_CAP);
                assert!((-1.0..=1.0).contains(&r.ism));
            }
            RowStatus::NoFace => assert_eq!(r.l2, -1.0),
            RowStatus::Error(ref e) => panic!("{}: {e}", r.transform),
        }
    }

    let null = swap_and_score("p1", &src, &src, &target, &bundle, &suite);
    assert!(null.iter().all(|r| r.l2 == 0.0 && r.ism == r.ism_clean));
}

#[test]
fn masks_and_gradients_on_a_fresh_bundle() {
    let bundle = VictimBundle::surrogate_seeded(3);
    let src = synthetic_face(8, bundle.image_dims().0);
    let masks = MaskSet::build(&src, &bundle, 0.5).unwrap();
    assert_eq!(masks.anchor.dims(), (1, bundle.detector.anchor_count()));
    assert!(masks.cam.max() <= 1.0 && masks.cam.min() >= 0.0);
    assert_eq!(masks.per_layer.len(), bundle.backbone.feature_layers().len());

    let cfg = GradCheckConfig {
        coordinates: 6,
        ..GradCheckConfig::default()
    };
    let report = check_objective_gradients(&bundle, &src, LossSettings::default(), &cfg).unwrap();
    for t in &report.terms {
        assert!(t.passed, "{} max rel err {}", t.name, t.max_rel_error);
    }
}
