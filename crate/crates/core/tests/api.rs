use affpipe::backbone::{extract_features, fingerprint, load_backbone, BackboneSpec, WeightsRef};
use affpipe::config::RunConfig;
use affpipe::experiment::{run_experiment, Metrics, RunArtifacts};
use affpipe::imaging::RgbImage;
use affpipe::ingest::ConditionLabel;
use affpipe::preprocess::{FaceBox, FaceCrop};
use affpipe::probe::{adam_step, init_probe, loss, predict_logits, AdamState, OptimizerConfig};
use affpipe::rng;
use affpipe::synthetic::{write_face_fixture, FixtureSpec};
use ndarray::{array, Array2};
use rand::Rng;
use rand_distr::StandardNormal;

fn crop(seed: u64) -> FaceCrop {
    let pixels = RgbImage::from_fn(224, 224, |y, x| {
        let v = ((x * 7 + y * 13 + seed as usize * 31) % 97) as f32 / 96.0;
        [v, 1.0 - v, (v * 3.0) % 1.0]
    });
    FaceCrop {
        source_box: FaceBox::full(&pixels),
        pixels,
        source_frame_id: format!("c{seed}"),
    }
}

#[test]
fn wrong_checksum_is_rejected() {
    let spec = BackboneSpec::from_id("sup-vit-s16").unwrap().with_checksum("00".repeat(32));
    let e = load_backbone(&spec, &WeightsRef::parse("synthetic:1").unwrap()).unwrap_err();
    assert_eq!(e.code(), "CHECKSUM_MISMATCH");
}

#[test]
fn features_are_deterministic_across_batches_and_loads() {
    let spec = BackboneSpec::from_id("sup-vit-s16").unwrap();
    let w = WeightsRef::parse("synthetic:4").unwrap();
    let a = load_backbone(&spec, &w).unwrap();
    let b = load_backbone(&spec, &w).unwrap();
    assert_eq!(fingerprint(&a), fingerprint(&b));
    let c = crop(1);
    let batch = extract_features(&a, &[c.clone(), c.clone()]).unwrap();
    assert_eq!(batch.vectors.dim(), (2, 384));
    assert_eq!(batch.vectors.row(0), batch.vectors.row(1));
    let again = extract_features(&b, &[c]).unwrap();
    assert_eq!(again.vectors.row(0), batch.vectors.row(0));
}

#[test]
fn cross_entropy_matches_direct_formula() {
    let mut r = rng::seeded(11);
    for _ in 0..50 {
        let n = r.random_range(1..10);
        let logits = Array2::from_shape_simple_fn((n, 2), || 5.0 * r.sample::<f64, _>(StandardNormal));
        let labels: Vec<usize> = (0..n).map(|_| r.random_range(0..2)).collect();
        let want: f64 = (0..n)
            .map(|i| {
                let (a, b) = (logits[[i, 0]], logits[[i, 1]]);
                let z = a.exp() + b.exp();
                -(logits[[i, labels[i]]].exp() / z).ln()
            })
            .sum::<f64>()
            / n as f64;
        assert!((loss(&logits.view(), &labels).unwrap() - want).abs() < 1e-10);
    }
}

#[test]
fn two_constant_gradient_steps_match_the_recurrence() {
    let cfg = OptimizerConfig::with_learning_rate(1e-3);
    let g = 0.37;
    let mut p = [2.0];
    let mut s = AdamState::new(1);
    adam_step(&mut p, &[g], &mut s, &cfg).unwrap();
    adam_step(&mut p, &[g], &mut s, &cfg).unwrap();
    // β1 = 0: m̂ = g. v₂ = (1-β2)(β2 + 1)g², v̂₂ = v₂ / (1 - β2²) = g².
    let b2: f64 = 0.999;
    let v2 = (1.0 - b2) * (b2 * g * g) + (1.0 - b2) * g * g;
    let v_hat = v2 / (1.0 - b2 * b2);
    let first = 1e-3 * g / (g.abs() + 1e-8);
    let second = 1e-3 * g / (v_hat.sqrt() + 1e-8);
    assert!((p[0] - (2.0 - first - second)).abs() < 1e-12);
}

#[test]
fn metrics_match_a_counting_oracle() {
    let mut r = rng::seeded(12);
    for _ in 0..100 {
        let n = r.random_range(1..40);
        let labels: Vec<usize> = (0..n).map(|_| r.random_range(0..2)).collect();
        let preds: Vec<usize> = (0..n).map(|_| r.random_range(0..2)).collect();
        let m = Metrics::from_predictions(&labels, &preds).unwrap();
        let mut confusion = [[0usize; 2]; 2];
        for (&y, &p) in labels.iter().zip(&preds) {
            confusion[y][p] += 1;
        }
        assert_eq!(m.confusion, confusion);
        assert_eq!(m.n_correct, confusion[0][0] + confusion[1][1]);
        assert_eq!(m.accuracy, m.n_correct as f64 / n as f64);
        for (k, label) in ConditionLabel::ALL.iter().enumerate() {
            let total = confusion[k][0] + confusion[k][1];
            let want = (total > 0).then(|| confusion[k][k] as f64 / total as f64);
            assert_eq!(m.per_label_accuracy[label], want);
        }
    }
}

#[test]
fn prediction_reference_values() {
    let p = predict_logits(&array![[2.0, -1.0], [0.5, 0.5]].view());
    assert_eq!(p[0].label, ConditionLabel::Frustration);
    assert!((p[0].confidence - 3f64.exp() / (1.0 + 3f64.exp())).abs() < 1e-15);
    assert_eq!(p[1].label, ConditionLabel::Frustration);
    assert_eq!(p[1].confidence, 0.5);
}

#[test]
fn probe_init_is_seeded() {
    let spec = BackboneSpec::from_id("dino-vit-s8").unwrap();
    let a = init_probe(384, spec.clone(), 5).unwrap();
    assert_eq!(a, init_probe(384, spec, 5).unwrap());
    assert!(a.bias.iter().all(|&b| b == 0.0));
}

#[test]
fn single_backbone_config_gives_one_row() {
    let dir = tempfile::tempdir().unwrap();
    let spec = FixtureSpec {
        n_subjects: 2,
        frames_per_subject: 2,
        image_side: 64,
        seed: 3,
    };
    write_face_fixture(dir.path(), &spec).unwrap();
    let text = "output_dir = \"run\"\n\
                [dataset]\nmanifest = \"manifest.jsonl\"\nboxes = \"boxes.jsonl\"\n\
                [split]\nn_train_subjects = 1\nn_test_subjects = 1\n\
                [[backbones]]\nid = \"sup-vit-s16\"\nweights = \"synthetic\"\n\
                [optimizer.vision_transformer]\nlearning_rate = 5e-6\nepochs = 4\n\
                [training]\naugmentation_views = 1\n\
                [explain]\nframes_per_label = 1\n";
    let path = dir.path().join("config.toml");
    std::fs::write(&path, text).unwrap();
    let (cfg, verbatim) = RunConfig::load(&path).unwrap();
    let report = run_experiment(&cfg, Some(&verbatim)).unwrap();
    assert_eq!(report.rows.len(), 1);
    let row = &report.rows[0];
    assert!(row.is_ok());
    assert!(row.train_accuracy.is_some() && row.val_accuracy.is_some() && row.fingerprint.is_some());
    assert_eq!(report.curves["sup-vit-s16"].len(), 4);
    let art = RunArtifacts::new(dir.path().join("run"));
    assert!(art.checkpoint("sup-vit-s16").is_file());
    assert!(art.contact_sheet("sup-vit-s16").is_file());
    assert_eq!(std::fs::read_to_string(art.config_verbatim()).unwrap(), text);
}
