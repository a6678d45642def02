//! Trains the layout network on synthetic shapes and prints per-epoch metrics.
//!
//! `cargo run --release -p sgguide --example sg2seg_shapes -- [records] [epochs] [lr] [batch] [random]`

use std::time::Instant;

use sgguide::datasets::{generate_shapes, shapes_vocab, ShapesConfig};
use sgguide::embeddings::{Embedder, ToyEmbedder};
use sgguide::sg2seg::{samples_from_records, train, NodeFeatureMode, Sg2SegConfig, Sg2SegModel, TrainConfig};

fn main() -> sgguide::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let count: usize = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(1000);
    let epochs: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(20);
    let lr: f64 = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(1e-3);
    let batch: usize = args.get(4).and_then(|s| s.parse().ok()).unwrap_or(32);
    let random = args.get(5).is_some_and(|s| s == "random");
    let no_masks = args.get(6).is_some_and(|s| s == "nomask");
    let no_seg = args.get(6).is_some_and(|s| s == "noseg");
    let widths: Option<Vec<usize>> = std::env::var("MASK_WIDTHS")
        .ok()
        .map(|v| v.split(',').map(|w| w.parse().expect("width")).collect());

    let vocab = shapes_vocab();
    let embedder = ToyEmbedder::shapes();
    let records = generate_shapes(&ShapesConfig::default(), count)?;
    let mode = if random {
        NodeFeatureMode::Random { seed: 7 }
    } else {
        NodeFeatureMode::Semantic
    };
    let samples = samples_from_records(&records, &vocab, &embedder, mode)?;
    let split = count * 4 / 5;
    let (train_set, test_set) = samples.split_at(split);
    let mut model = Sg2SegModel::new(Sg2SegConfig {
        input_dim: embedder.profile().dimension,
        num_relations: vocab.relationship_classes().len(),
        mask_widths: widths.unwrap_or_else(|| Sg2SegConfig::default().mask_widths),
        ..Sg2SegConfig::default()
    })?;
    let cfg = TrainConfig {
        epochs,
        learning_rate: lr,
        batch_size: batch,
        mask_weight: if no_masks { 0.0 } else { 1.0 },
        seg_weight: if no_masks || no_seg { 0.0 } else { 1.0 },
        ..TrainConfig::default()
    };
    let start = Instant::now();
    let history = train(&mut model, train_set, test_set, &vocab, &cfg)?;
    for m in &history {
        println!(
            "epoch {:2} steps {:5} loss {:.4} (box {:.4} mask {:.4} seg {:.4}) held-out box_l1 {:.4} mask_iou {:.4}",
            m.epoch,
            m.steps,
            m.train_loss,
            m.train_box_loss,
            m.train_mask_loss,
            m.train_seg_loss,
            m.eval.box_l1,
            m.eval.mask_iou.unwrap_or(f64::NAN)
        );
    }
    println!("elapsed {:.1}s", start.elapsed().as_secs_f64());
    Ok(())
}
