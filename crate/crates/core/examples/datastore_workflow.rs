//! The annotation store end to end: import a recording, annotate its calls,
//! freeze a split, train, morph the training calls, review, and grow the
//! dataset into a second version.
//!
//! `cargo run --release --example datastore_workflow -- [store_dir]`

use std::path::PathBuf;

use usvkit::callsim::{preset, synth_recording};
use usvkit::classifier::{init_model, train_split, validate, CallLabel, TrainConfig};
use usvkit::datastore::{AnnotationSource, NewAnnotation, Store};
use usvkit::spectrogram::{SpectrogramParams, TileParams};
use usvkit::synthgen::{propose, MorphParams, ReviewStatus, SeedTile, Verdict};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let dir = std::env::args().nth(1).map(PathBuf::from).unwrap_or_else(|| std::env::temp_dir().join("usv_store_example"));
    if dir.exists() {
        std::fs::remove_dir_all(&dir)?;
    }
    let mut store = Store::open(&dir)?;
    let spec = SpectrogramParams::default();
    let tile = TileParams::with_size(32);

    let (clip, truth) = synth_recording(&preset("low_noise", 11)?)?;
    let rec = store.add_recording(&clip, Some("simulated".into()))?;
    for b in &truth.boxes {
        store.put_annotation(NewAnnotation {
            recording_id: rec.id.clone(),
            bbox: b.bbox(),
            label: b.label,
            annotator: "example".into(),
            source: AnnotationSource::Human,
        })?;
    }
    let v1 = store.build_split(None, 0.2, 1)?;
    println!("version {}: {} train / {} val annotations", v1.version, v1.splits.train.len(), v1.splits.val.len());

    let (train, val) = store.load_split(v1.version, &spec, &tile)?;
    let config = TrainConfig { epochs: 8, batch_size: 8, ..TrainConfig::default() };
    let model = init_model(32, &CallLabel::CALLS, 1)?;
    let (model, _) = train_split(&model, &train, &val, &config)?;
    println!("natural-only model: val accuracy {:.3}", validate(&model, &val)?);
    store.save_checkpoint("natural", &model)?;

    let seeds = v1
        .splits
        .train
        .iter()
        .map(|id| {
            let a = store.annotation(id)?;
            Ok(SeedTile { annotation_id: id.clone(), label: a.label, tile: store.natural_tile(id, &spec, &tile)? })
        })
        .collect::<Result<Vec<_>, Box<dyn std::error::Error>>>()?;
    let ids = store.add_synthetics(propose(&seeds, 2, &MorphParams::for_tile(32, 3))?)?;
    for (i, id) in ids.iter().enumerate() {
        let verdict = if i % 5 == 4 { Verdict::Reject } else { Verdict::Accept };
        store.decide(id, verdict, "example")?;
    }
    println!(
        "{} synthetics: {} accepted, {} rejected",
        ids.len(),
        store.synthetics(Some(ReviewStatus::Accepted)).len(),
        store.synthetics(Some(ReviewStatus::Rejected)).len()
    );

    let v2 = store.build_split(Some(v1.version), 0.2, 1)?;
    println!("version {}: {} natural + {} synthetic, val unchanged: {}", v2.version, v2.natural_count(), v2.synthetic_ids.len(), v2.splits.val == v1.splits.val);
    let (train, val) = store.load_split(v2.version, &spec, &tile)?;
    let (augmented, _) = train_split(&init_model(32, &CallLabel::CALLS, 1)?, &train, &val, &config)?;
    println!("augmented model: val accuracy {:.3}", validate(&augmented, &val)?);

    let exported = store.export_tiles(v2.version, &spec, &tile, dir.join("export"))?;
    println!("exported {exported} tiles; store at {}", dir.display());
    Ok(())
}
