//! Source gating, loss composition, encoder invariances and checkpoint behaviour.

use candle_core::{DType, Device, Tensor};
use capdet::caption::{caption_lm_loss, total_loss, total_loss_scalar};
use capdet::data::{Corpus, SceneSpec, Source, UnifiedSample};
use capdet::losses::LossWeights;
use capdet::model::{CapDet, ModelConfig};
use capdet::train::checkpoint::{self, TrainingState};
use capdet::train::{fit, TrainConfig, TrainData, Trainer};
use capdet::Error;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn tiny_data(n: usize) -> TrainData {
    let corpus = Corpus::generate(&SceneSpec::default(), n, 1, 3).unwrap();
    TrainData {
        det: corpus.det_train.into_iter().map(|s| s.sample).collect(),
        cap: corpus.cap_train.into_iter().map(|s| s.sample).collect(),
        dictionary: corpus.dictionary,
    }
}

fn tiny_config() -> TrainConfig {
    TrainConfig {
        batch_size: 4,
        epochs: 2,
        lr_decay_epochs: vec![],
        warmup_iters: 2,
        ..TrainConfig::desk()
    }
}

#[test]
fn caption_batch_leaves_box_and_centerness_heads_untouched() {
    let data = tiny_data(4);
    let trainer = Trainer::new(tiny_config(), &data).unwrap();
    let batch: Vec<&UnifiedSample> = data.cap.iter().collect();
    assert!(batch.iter().all(|s| s.source == Source::DenseCaption));
    let losses = trainer.compute_losses(&batch, 0).unwrap();
    let b = losses.detection.breakdown().unwrap();
    assert_eq!(b.reg, 0.0);
    assert_eq!(b.center, 0.0);
    assert!(b.align > 0.0);
    let grads = losses.total.backward().unwrap();
    for v in trainer.model.image.detection_head_vars() {
        if let Some(g) = grads.get(v.as_tensor()) {
            let max: f32 = g.abs().unwrap().flatten_all().unwrap().max(0).unwrap().to_scalar().unwrap();
            assert_eq!(max, 0.0);
        }
    }
}

#[test]
fn detection_batch_does_train_the_heads() {
    let data = tiny_data(4);
    let trainer = Trainer::new(tiny_config(), &data).unwrap();
    let batch: Vec<&UnifiedSample> = data.det.iter().filter(|s| !s.is_empty()).collect();
    let losses = trainer.compute_losses(&batch, 0).unwrap();
    let grads = losses.total.backward().unwrap();
    let head = trainer.model.image.detection_head_vars()[0];
    let g = grads.get(head.as_tensor()).expect("box head gradient");
    let max: f32 = g.abs().unwrap().flatten_all().unwrap().max(0).unwrap().to_scalar().unwrap();
    assert!(max > 0.0);
}

#[test]
fn total_loss_is_linear() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..10 {
        let (ld, lc): (f64, f64) = (rng.random_range(0.0..5.0), rng.random_range(0.0..5.0));
        let w = LossWeights {
            w_d: rng.random_range(0.0..2.0),
            w_c: rng.random_range(0.0..2.0),
            ..LossWeights::default()
        };
        let t = total_loss(
            &Tensor::new(ld, &Device::Cpu).unwrap(),
            &Tensor::new(lc, &Device::Cpu).unwrap(),
            &w,
        )
        .unwrap();
        let v: f64 = t.to_scalar().unwrap();
        assert!((v - (w.w_d * ld + w.w_c * lc)).abs() <= 4.0 * f64::EPSILON * v.abs().max(1.0));
        assert_eq!(total_loss_scalar(ld, lc, &w), w.w_d * ld + w.w_c * lc);
    }
}

fn f64_model() -> CapDet {
    let data = tiny_data(4);
    let vocab = capdet::model::build_vocab(&data.dictionary, data.cap.iter().flat_map(|s| s.concepts.iter().map(String::as_str)));
    let cfg = ModelConfig {
        precision: capdet::model::Precision::F64,
        ..ModelConfig::default()
    };
    CapDet::new(cfg, vocab, 1).unwrap()
}

#[test]
fn caption_loss_ignores_caption_order() {
    let model = f64_model();
    let texts = ["a small red square near the top left", "a large blue hexagon near the center", "a small green cross near the bottom right"];
    let toks: Vec<_> = texts.iter().map(|t| model.vocab.tokenize(t, 20)).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let feats: Vec<f64> = (0..3 * 64).map(|_| rng.random_range(-1.0..1.0)).collect();
    let f = Tensor::from_vec(feats.clone(), (3, 64), &Device::Cpu).unwrap();
    let a: f64 = caption_lm_loss(&model.caption, &f, &toks).unwrap().loss.to_scalar().unwrap();
    let perm = [2usize, 0, 1];
    let pf: Vec<f64> = perm.iter().flat_map(|&i| feats[i * 64..(i + 1) * 64].to_vec()).collect();
    let pt: Vec<_> = perm.iter().map(|&i| toks[i].clone()).collect();
    let f2 = Tensor::from_vec(pf, (3, 64), &Device::Cpu).unwrap();
    let b: f64 = caption_lm_loss(&model.caption, &f2, &pt).unwrap().loss.to_scalar().unwrap();
    assert!((a - b).abs() < 1e-12, "{a} vs {b}");
}

#[test]
fn text_embeddings_ignore_padding_and_batch_order() {
    let model = f64_model();
    let seqs: Vec<_> = ["red square, a 4-sided shape colored red.", "object", "a small blue cross near the top left"]
        .iter()
        .map(|t| model.vocab.tokenize(t, 20))
        .collect();
    let a: Vec<Vec<f64>> = model.text.encode_padded(&seqs, None).unwrap().embeddings.to_vec2().unwrap();
    let b: Vec<Vec<f64>> = model.text.encode_padded(&seqs, Some(20)).unwrap().embeddings.to_vec2().unwrap();
    let rev: Vec<_> = seqs.iter().rev().cloned().collect();
    let c: Vec<Vec<f64>> = model.text.encode_padded(&rev, None).unwrap().embeddings.to_vec2().unwrap();
    for i in 0..3 {
        for j in 0..a[i].len() {
            assert!((a[i][j] - b[i][j]).abs() < 1e-10);
            assert!((a[i][j] - c[2 - i][j]).abs() < 1e-10);
        }
    }
}

#[test]
fn region_features_do_not_depend_on_batch_mates() {
    let model = f64_model();
    let data = tiny_data(3);
    let imgs: Vec<_> = data.det.iter().map(|s| &s.image).collect();
    let all = model.image.encode(&imgs, DType::F64).unwrap();
    let one = model.image.encode(&imgs[1..2], DType::F64).unwrap();
    let a: Vec<Vec<f64>> = all.region_features.get(1).unwrap().to_vec2().unwrap();
    let b: Vec<Vec<f64>> = one.region_features.get(0).unwrap().to_vec2().unwrap();
    for (ra, rb) in a.iter().zip(&b) {
        for (x, y) in ra.iter().zip(rb) {
            assert!((x - y).abs() < 1e-10);
        }
    }
}

fn probe(model: &CapDet, data: &TrainData) -> (Vec<f32>, Vec<f32>) {
    let imgs: Vec<_> = data.det.iter().take(2).map(|s| &s.image).collect();
    let r = model.image.encode(&imgs, model.dtype()).unwrap();
    let t = model.text.encode_texts(&data.dictionary.concepts(), &model.vocab).unwrap();
    let s = model.align.scores(&r.region_features, &t).unwrap();
    (
        s.flatten_all().unwrap().to_vec1().unwrap(),
        r.box_deltas.flatten_all().unwrap().to_vec1().unwrap(),
    )
}

#[test]
fn checkpoint_round_trip_is_bitwise() {
    let data = tiny_data(4);
    let cfg = TrainConfig {
        max_steps: Some(2),
        ..tiny_config()
    };
    let dir = tempfile::tempdir().unwrap();
    let out = fit(&data, &cfg, dir.path(), None).unwrap();
    let trained = Trainer::resume(cfg.clone(), &data, &out.checkpoint).unwrap();
    let (loaded, manifest) = checkpoint::load(&out.checkpoint).unwrap();
    assert!(manifest.is_final);
    assert_eq!(probe(&trained.model, &data), probe(&loaded, &data));

    // save again from the loaded model and compare once more
    let again = dir.path().join("again");
    checkpoint::save(&again, &loaded, None, None, TrainingState { epoch: 0, step: 0 }, false).unwrap();
    let (reloaded, _) = checkpoint::load(&again).unwrap();
    assert_eq!(probe(&loaded, &data), probe(&reloaded, &data));
}

#[test]
fn mismatched_width_is_refused() {
    let data = tiny_data(2);
    let vocab = capdet::model::build_vocab(&data.dictionary, data.cap.iter().flat_map(|s| s.concepts.iter().map(String::as_str)));
    let model = CapDet::new(ModelConfig::default(), vocab.clone(), 0).unwrap();
    let dir = tempfile::tempdir().unwrap();
    checkpoint::save(dir.path(), &model, None, None, TrainingState { epoch: 0, step: 0 }, true).unwrap();
    let narrow = CapDet::new(
        ModelConfig {
            embed_dim: 32,
            ..ModelConfig::default()
        },
        vocab,
        0,
    )
    .unwrap();
    assert!(matches!(checkpoint::load_into(&narrow, dir.path()), Err(Error::ArchMismatch(_))));
}

fn step_lines(path: &std::path::Path, epoch: usize) -> Vec<String> {
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .filter(|l| l.contains("\"kind\":\"step\"") && l.contains(&format!("\"epoch\":{epoch},")))
        .map(String::from)
        .collect()
}

#[test]
fn resuming_reproduces_the_next_epoch() {
    let data = tiny_data(6);
    let full_cfg = tiny_config();
    let full = tempfile::tempdir().unwrap();
    let a = fit(&data, &full_cfg, full.path(), None).unwrap();

    let first = tempfile::tempdir().unwrap();
    let one_epoch = TrainConfig {
        epochs: 1,
        ..tiny_config()
    };
    let b = fit(&data, &one_epoch, first.path(), None).unwrap();
    let resumed = tempfile::tempdir().unwrap();
    let c = fit(&data, &full_cfg, resumed.path(), Some(&b.checkpoint)).unwrap();
    assert_eq!(c.epochs_completed, 2);

    let expect = step_lines(&a.metrics, 1);
    assert!(!expect.is_empty());
    assert_eq!(expect, step_lines(&c.metrics, 1));
    assert_eq!(step_lines(&a.metrics, 0), step_lines(&b.metrics, 0));
}

#[test]
fn identical_seeds_give_identical_logs() {
    let data = tiny_data(4);
    let cfg = TrainConfig {
        epochs: 1,
        ..tiny_config()
    };
    let (d1, d2) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let a = fit(&data, &cfg, d1.path(), None).unwrap();
    let b = fit(&data, &cfg, d2.path(), None).unwrap();
    assert_eq!(std::fs::read(a.metrics).unwrap(), std::fs::read(b.metrics).unwrap());
}
