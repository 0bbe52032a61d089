//! Elastic morphing of call tiles: one seed tile and a few offspring written
//! as PNGs, then a review pass over proposed synthetics.

use usvkit::callsim::{tile_corpus, CorpusConfig};
use usvkit::classifier::CallLabel;
use usvkit::spectrogram::TileParams;
use usvkit::synthgen::{morph, propose, random_field, MorphParams, ReviewStatus, SeedTile, Verdict};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let px = 128;
    let corpus = tile_corpus(&CorpusConfig {
        per_category: 2,
        categories: CallLabel::CALLS.to_vec(),
        tile: TileParams::with_size(px),
        seed: 5,
        ..CorpusConfig::default()
    })?;

    let out = std::env::temp_dir().join("usv_morphs");
    std::fs::create_dir_all(&out)?;
    let seed = &corpus[0];
    seed.tile.save_png(out.join("seed.png"))?;
    for k in 0..4 {
        let params = MorphParams::for_tile(px, k);
        let field = random_field(&params, (px, px))?;
        morph(&seed.tile, &params)?.save_png(out.join(format!("morph_{k}.png")))?;
        println!("offspring {k}: largest displacement {:.2} px (bound {:.1})", field.max_abs(), params.max_displacement_px);
    }
    println!("{:?} seed and offspring written to {}", seed.label, out.display());

    let seeds: Vec<SeedTile> = corpus
        .iter()
        .enumerate()
        .map(|(i, t)| SeedTile { annotation_id: format!("ann-{i}"), label: t.label, tile: t.tile.clone() })
        .collect();
    let mut proposals = propose(&seeds, 3, &MorphParams::for_tile(px, 42))?;
    for (i, s) in proposals.iter_mut().enumerate() {
        // Stand-in for a human reviewer: keep two of every three.
        let verdict = if i % 3 == 2 { Verdict::Reject } else { Verdict::Accept };
        s.decide(verdict, "example", "2024-01-01T00:00:00Z")?;
    }
    let accepted = proposals.iter().filter(|s| s.review_status == ReviewStatus::Accepted).count();
    let eligible = proposals.iter().filter(|s| s.is_train_eligible()).count();
    println!("{} proposals from {} seeds: {accepted} accepted, {eligible} eligible for training", proposals.len(), seeds.len());
    Ok(())
}
