//! Trains the call classifier on simulated tiles and reports held-out
//! accuracy per category.
//!
//! `cargo run --release --example classify_tiles -- [tile_px] [epochs]`

use std::collections::BTreeMap;

use usvkit::callsim::{tile_corpus, CorpusConfig};
use usvkit::classifier::{init_model, train, CallLabel, ClassifierModel, TrainConfig};
use usvkit::spectrogram::TileParams;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let size: usize = args.first().map(|s| s.parse()).transpose()?.unwrap_or(48);
    let epochs: usize = args.get(1).map(|s| s.parse()).transpose()?.unwrap_or(12);

    let corpus = |per_category, seed| tile_corpus(&CorpusConfig { per_category, tile: TileParams::with_size(size), seed, ..CorpusConfig::default() });
    let train_set = corpus(20, 1)?;
    let test_set = corpus(10, 2)?;

    let config = TrainConfig { epochs, ..TrainConfig::default() };
    let model = init_model(size, &CallLabel::ALL, config.seed)?;
    let (model, history) = train(&model, &train_set, &config)?;
    for e in &history.epochs {
        println!("epoch {:>2}  loss {:.4}  train {:.3}  val {:.3}", e.epoch, e.train_loss, e.train_accuracy, e.val_accuracy);
    }

    let mut per_label: BTreeMap<String, (usize, usize)> = BTreeMap::new();
    for t in &test_set {
        let hit = model.forward(&t.tile)?.label == t.label;
        let entry = per_label.entry(format!("{:?}", t.label)).or_default();
        entry.0 += hit as usize;
        entry.1 += 1;
    }
    let correct: usize = per_label.values().map(|v| v.0).sum();
    println!("held-out accuracy {:.3} on {} tiles", correct as f64 / test_set.len() as f64, test_set.len());
    for (label, (ok, n)) in per_label {
        println!("  {label:<13} {ok}/{n}");
    }

    let path = std::env::temp_dir().join("classify_tiles.usvm");
    std::fs::write(&path, model.to_bytes())?;
    let back = ClassifierModel::from_bytes(&std::fs::read(&path)?)?;
    println!("checkpoint {} (sha256 {})", path.display(), &back.digest()[..16]);
    Ok(())
}
