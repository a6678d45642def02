use candle_core::Tensor;
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::datasets::{generate_shapes, shapes_vocab, ShapesConfig};
use crate::embeddings::ToyEmbedder;
use crate::scene_graph::Edge;

fn small_config(input_dim: usize) -> Sg2SegConfig {
    Sg2SegConfig {
        input_dim,
        embed_dim: 16,
        gcn_layers: 3,
        gcn_hidden: 32,
        box_hidden: 32,
        mask_widths: vec![16, 8, 8, 4, 4, 4],
        num_relations: 4,
        seed: 3,
    }
}

fn random_features(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Array2<f64> {
    Array2::from_shape_simple_fn((n, d), || rng.random_range(-1.0..1.0))
}

fn embeddings(model: &Sg2SegModel, graph: &SceneGraph, features: &Array2<f64>) -> Array2<f64> {
    model.predict(graph, features).unwrap().embeddings
}

fn four_node_graph() -> SceneGraph {
    SceneGraph::new(
        vec![0, 1, 2, 3],
        vec![
            Edge { src: 0, rel: 0, dst: 1 },
            Edge { src: 1, rel: 1, dst: 2 },
            Edge { src: 3, rel: 2, dst: 0 },
            Edge { src: 2, rel: 3, dst: 3 },
        ],
    )
    .unwrap()
}

#[test]
fn isolated_node_gets_no_messages() {
    let model = Sg2SegModel::new(small_config(8)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let f = random_features(&mut rng, 3, 8);
    let alone = SceneGraph::new(vec![2], vec![]).unwrap();
    let own = embeddings(&model, &alone, &f.slice(ndarray::s![0..1, ..]).to_owned());
    // node 0 sits next to a connected pair but has no incident edge
    let g = SceneGraph::new(vec![2, 0, 1], vec![Edge { src: 1, rel: 0, dst: 2 }]).unwrap();
    let with_pair = embeddings(&model, &g, &f);
    for j in 0..16 {
        assert!((own[[0, j]] - with_pair[[0, j]]).abs() < 1e-6);
    }
    let node1_alone = embeddings(&model, &alone, &f.slice(ndarray::s![1..2, ..]).to_owned());
    assert!((0..16).any(|j| (with_pair[[1, j]] - node1_alone[[0, j]]).abs() > 1e-6));
}

#[test]
fn gcn_is_permutation_equivariant() {
    let model = Sg2SegModel::new(small_config(8)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let g = four_node_graph();
    for perm in [[1, 2, 3, 0], [3, 0, 2, 1], [2, 3, 0, 1]] {
        let f = random_features(&mut rng, 4, 8);
        let mut pf = Array2::zeros(f.dim());
        for (i, &p) in perm.iter().enumerate() {
            pf.row_mut(p).assign(&f.row(i));
        }
        let a = embeddings(&model, &g, &f);
        let b = embeddings(&model, &g.permuted(&perm), &pf);
        for (i, &p) in perm.iter().enumerate() {
            let dev = (&a.row(i) - &b.row(p)).iter().fold(0.0f64, |m, v| m.max(v.abs()));
            assert!(dev <= 1e-5, "row {i}: {dev}");
        }
    }
}

#[test]
fn relation_label_changes_embeddings() {
    let model = Sg2SegModel::new(small_config(8)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let f = random_features(&mut rng, 2, 8);
    let a = SceneGraph::new(vec![0, 1], vec![Edge { src: 0, rel: 0, dst: 1 }]).unwrap();
    let b = SceneGraph::new(vec![0, 1], vec![Edge { src: 0, rel: 2, dst: 1 }]).unwrap();
    let diff = (embeddings(&model, &a, &f) - embeddings(&model, &b, &f))
        .iter()
        .fold(0.0f64, |m, v| m.max(v.abs()));
    assert!(diff > 1e-4);
}

#[test]
fn zeroed_box_head_gives_centred_minimum_box() {
    let model = Sg2SegModel::new(small_config(8)).unwrap();
    model.set_param("box.1.weight", &Tensor::zeros((4, 32), DType::F32, &Device::Cpu).unwrap()).unwrap();
    model.set_param("box.1.bias", &Tensor::zeros(4, DType::F32, &Device::Cpu).unwrap()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let out = model.predict(&four_node_graph(), &random_features(&mut rng, 4, 8)).unwrap();
    for b in &out.boxes {
        assert!((b.width() - MIN_BOX_SIDE).abs() < 1e-12 && (b.height() - MIN_BOX_SIDE).abs() < 1e-12);
        let (cx, cy) = b.center();
        assert!((cx - 0.5).abs() < 1e-12 && (cy - 0.5).abs() < 1e-12);
    }
}

#[test]
fn hand_set_bias_reproduces_target_box() {
    let model = Sg2SegModel::new(small_config(8)).unwrap();
    let target = [0.1, 0.2, 0.6, 0.8];
    let logit = |p: f64| (p / (1.0 - p)).ln();
    model.set_param("box.1.weight", &Tensor::zeros((4, 32), DType::F32, &Device::Cpu).unwrap()).unwrap();
    let bias: Vec<f64> = target.iter().map(|&p| logit(p)).collect();
    model.set_param("box.1.bias", &Tensor::new(bias.as_slice(), &Device::Cpu).unwrap()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let out = model.predict(&four_node_graph(), &random_features(&mut rng, 4, 8)).unwrap();
    for b in &out.boxes {
        for (got, want) in b.as_array().iter().zip(target) {
            assert!((got - want).abs() < 1e-6, "{got} vs {want}");
        }
    }
}

#[test]
fn masks_are_64_square_and_strictly_inside_unit_interval() {
    let model = Sg2SegModel::new(small_config(8)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let out = model.predict(&four_node_graph(), &random_features(&mut rng, 4, 8)).unwrap();
    assert_eq!(out.masks.len(), 4);
    for m in &out.masks {
        assert_eq!(m.values().dim(), (MASK_SIZE, MASK_SIZE));
        assert!(m.values().iter().all(|&v| v > 0.0 && v < 1.0));
    }
    // a zeroed output convolution gives the uniform 0.5 mask
    model.set_param("mask.out.weight", &Tensor::zeros((1, 4, 1, 1), DType::F32, &Device::Cpu).unwrap()).unwrap();
    model.set_param("mask.out.bias", &Tensor::zeros(1, DType::F32, &Device::Cpu).unwrap()).unwrap();
    let out = model.predict(&four_node_graph(), &random_features(&mut rng, 4, 8)).unwrap();
    assert!(out.masks.iter().all(|m| m.values().iter().all(|&v| v == 0.5)));
}

fn shapes_samples(count: usize) -> (Vec<Sg2SegSample>, Vocab) {
    let vocab = shapes_vocab();
    let records = generate_shapes(&ShapesConfig::default(), count).unwrap();
    let samples = samples_from_records(&records, &vocab, &ToyEmbedder::shapes(), NodeFeatureMode::Semantic).unwrap();
    (samples, vocab)
}

#[test]
fn tensor_losses_match_reference_losses() {
    let (samples, vocab) = shapes_samples(3);
    let mut config = small_config(512);
    config.num_relations = vocab.relationship_classes().len();
    let model = Sg2SegModel::new(config).unwrap();
    let prepared = prepare(samples.iter().collect(), 4, 32).unwrap();
    let out = model.forward(&prepared.batch, true, false).unwrap();
    let weights = LossWeights {
        box_weight: 1.0,
        mask_weight: 1.0,
        seg_weight: 0.0,
    };
    let terms = model::batch_losses(
        &out,
        &prepared.boxes,
        prepared.masks.as_ref(),
        None,
        &prepared.classes,
        &prepared.batch.offsets,
        4,
        32,
        &weights,
    )
    .unwrap();
    let graphs = samples.len() as f64;
    let sig = |z: f64| 1.0 / (1.0 + (-z).exp());
    let pred: Vec<[f64; 4]> = model::tensor_to_rows(&out.box_logits)
        .unwrap()
        .iter()
        .map(|r| [sig(r[0]), sig(r[1]), sig(r[2]), sig(r[3])])
        .collect();
    let gt: Vec<[f64; 4]> = prepared.boxes.iter().map(BBox::as_array).collect();
    let want_box = losses::loss_box(&pred, &gt).unwrap() / graphs;
    assert!((terms.box_loss - want_box).abs() <= 1e-5 * want_box.max(1.0));

    let pred_masks: Vec<Array2<f64>> = model::masks_from_logits(out.mask_logits.as_ref().unwrap())
        .unwrap()
        .into_iter()
        .map(ObjectMask::into_inner)
        .collect();
    let gt_masks: Vec<Array2<f64>> = samples
        .iter()
        .flat_map(|s| s.masks.clone().unwrap())
        .map(ObjectMask::into_inner)
        .collect();
    let want_mask = losses::loss_mask(&pred_masks, &gt_masks).unwrap() / graphs;
    // f32 accumulation over ~5e4 pixels
    assert!((terms.mask_loss - want_mask).abs() <= 1e-3 * want_mask.max(1.0), "{} vs {want_mask}", terms.mask_loss);
}

#[test]
fn checkpoint_round_trip_preserves_predictions() {
    let (samples, vocab) = shapes_samples(2);
    let mut config = small_config(512);
    config.num_relations = vocab.relationship_classes().len();
    let model = Sg2SegModel::new(config).unwrap();
    let meta = Sg2SegMeta {
        vocab: vocab.clone(),
        embedder: ToyEmbedder::shapes().profile().clone(),
        node_features: NodeFeatureMode::Semantic,
    };
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.bin");
    model.save(&path, &meta).unwrap();
    let (loaded, loaded_meta) = Sg2SegModel::load(&path).unwrap();
    assert_eq!(loaded_meta, meta);
    assert_eq!(loaded.config(), model.config());
    let a = model.predict(&samples[0].graph, &samples[0].features).unwrap();
    let b = loaded.predict(&samples[0].graph, &samples[0].features).unwrap();
    assert_eq!(a.box_logits, b.box_logits);
    assert_eq!(a.masks, b.masks);
}

#[test]
fn single_sample_is_memorised() {
    let (samples, vocab) = shapes_samples(1);
    let mut config = small_config(512);
    config.num_relations = vocab.relationship_classes().len();
    let mut model = Sg2SegModel::new(config).unwrap();
    let cfg = TrainConfig {
        epochs: 500,
        batch_size: 1,
        learning_rate: 1e-3,
        seg_size: 32,
        max_steps: Some(500),
        ..TrainConfig::default()
    };
    let history = train(&mut model, &samples, &[], &vocab, &cfg).unwrap();
    assert_eq!(history.last().unwrap().steps, 500);
    let err = evaluate(&model, &samples).unwrap().box_l1;
    assert!(err < 0.02, "box L1 {err}");
}

#[test]
fn training_is_deterministic_and_stops_at_targets() {
    let (samples, vocab) = shapes_samples(12);
    let run = |cfg: &TrainConfig| {
        let mut config = small_config(512);
        config.num_relations = vocab.relationship_classes().len();
        let mut model = Sg2SegModel::new(config).unwrap();
        train(&mut model, &samples[..8], &samples[8..], &vocab, cfg).unwrap()
    };
    let cfg = TrainConfig {
        epochs: 2,
        batch_size: 4,
        learning_rate: 1e-3,
        seg_size: 32,
        ..TrainConfig::default()
    };
    let a = run(&cfg);
    let b = run(&cfg);
    assert_eq!(a.len(), 2);
    let bits = |h: &[EpochMetrics]| serde_json::to_string(h).unwrap();
    assert_eq!(bits(&a), bits(&b));

    let early = run(&TrainConfig {
        epochs: 5,
        target_box_l1: Some(10.0),
        target_mask_iou: Some(-1.0),
        ..cfg.clone()
    });
    assert_eq!(early.len(), 1);
}

#[test]
fn empty_dataset_is_rejected() {
    let vocab = shapes_vocab();
    let mut model = Sg2SegModel::new(small_config(512)).unwrap();
    assert!(matches!(
        train(&mut model, &[], &[], &vocab, &TrainConfig::default()),
        Err(Error::DatasetEmpty)
    ));
    assert!(matches!(evaluate(&model, &[]), Err(Error::DatasetEmpty)));
}
