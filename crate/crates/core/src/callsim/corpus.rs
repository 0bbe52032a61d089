use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{synth_recording, CallSpec, NoiseSpec, RecordingPlan, Result, DEFAULT_SAMPLE_RATE_HZ};
use crate::classifier::{CallLabel, LabeledTile};
use crate::spectrogram::{compute_spectrogram, extract_tile, SpectrogramParams, TileParams, TimeFreqBox};

/// Draw a call of the given category with randomized but valid parameters; onset 0.
pub fn random_call<R: Rng>(category: CallLabel, rng: &mut R) -> CallSpec {
    let mut u = |lo: f64, hi: f64| rng.random_range(lo..hi);
    let amplitude = u(0.2, 0.5);
    let base = CallSpec { category, amplitude, ..CallSpec::flat(0.0, 0.0) };
    match category {
        CallLabel::Flat => CallSpec { f0: u(40e3, 75e3), duration_ms: u(20.0, 80.0), ..base },
        CallLabel::Short => CallSpec { f0: u(40e3, 75e3), duration_ms: u(6.0, 11.0), ..base },
        CallLabel::UpwardRamp => CallSpec { f0: u(35e3, 60e3), fm_depth: u(10.5e3, 20e3), duration_ms: u(15.0, 60.0), ..base },
        CallLabel::DownwardRamp => CallSpec { f0: u(55e3, 80e3), fm_depth: u(10.5e3, 20e3), duration_ms: u(15.0, 60.0), ..base },
        CallLabel::Trill => {
            let fm_rate = u(60.0, 100.0);
            let min_ms = 3.3 / fm_rate * 1000.0;
            CallSpec { f0: u(50e3, 70e3), fm_depth: u(5e3, 10e3), fm_rate, duration_ms: u(min_ms, min_ms + 40.0), ..base }
        }
        CallLabel::ComplexTrill => {
            let fm_rate = u(70.0, 100.0);
            let min_ms = 3.3 / fm_rate / (1.0 - super::COMPLEX_TRILL_LEAD_FRACTION) * 1000.0;
            let step_delta = if u(0.0, 1.0) < 0.5 { 0.0 } else { u(-12e3, 12e3) };
            CallSpec {
                f0: u(50e3, 65e3),
                fm_depth: u(5e3, 9e3),
                fm_rate,
                step_delta,
                duration_ms: u(min_ms, min_ms + 40.0),
                ..base
            }
        }
        CallLabel::Complex => CallSpec { f0: u(45e3, 60e3), fm_depth: u(10e3, 18e3), duration_ms: u(30.0, 90.0), ..base },
        CallLabel::InvertedU => CallSpec { f0: u(40e3, 60e3), fm_depth: u(8e3, 15e3), duration_ms: u(25.0, 70.0), ..base },
        CallLabel::StepUp => CallSpec { f0: u(38e3, 55e3), step_delta: u(8.5e3, 15e3), duration_ms: u(20.0, 70.0), ..base },
        CallLabel::StepDown => CallSpec { f0: u(55e3, 75e3), step_delta: -u(8.5e3, 15e3), duration_ms: u(20.0, 70.0), ..base },
        CallLabel::Split => {
            let gap_ms = u(5.0, 15.0);
            CallSpec { f0: u(40e3, 75e3), gap_ms, duration_ms: gap_ms + u(20.0, 60.0), ..base }
        }
        CallLabel::Noise => panic!("Noise is not a call category"),
    }
}

/// Settings for a labeled tile corpus drawn from isolated simulated calls.
#[derive(Debug, Clone, PartialEq)]
pub struct CorpusConfig {
    pub per_category: usize,
    pub categories: Vec<CallLabel>,
    pub tile: TileParams,
    pub spectrogram: SpectrogramParams,
    /// Background level range, dB relative to the call amplitude.
    pub noise_db: (f64, f64),
    /// Silence before and after each call.
    pub pad_s: f64,
    pub seed: u64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            per_category: 50,
            categories: CallLabel::ALL.to_vec(),
            tile: TileParams::default(),
            spectrogram: SpectrogramParams::default(),
            noise_db: (-40.0, -25.0),
            pad_s: 0.05,
            seed: 0,
        }
    }
}

/// Random box inside a noise-only clip of `duration_s`.
pub fn noise_tile_box<R: Rng>(rng: &mut R, duration_s: f64) -> TimeFreqBox {
    let dur = rng.random_range(0.01..0.06);
    let t0 = rng.random_range(0.0..(duration_s - dur).max(1e-3));
    let bw = rng.random_range(3e3..20e3);
    let f0 = rng.random_range(35e3..(85e3 - bw));
    TimeFreqBox::new(t0, t0 + dur, f0, f0 + bw)
}

/// Tiles for every requested category, `per_category` each, in category order.
/// Noise tiles come from call-free clips, half of them with broadband bursts.
pub fn tile_corpus(config: &CorpusConfig) -> Result<Vec<LabeledTile>> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut out = Vec::with_capacity(config.per_category * config.categories.len());
    for &label in &config.categories {
        for i in 0..config.per_category {
            let noise_db = rng.random_range(config.noise_db.0..config.noise_db.1);
            let seed = rng.random::<u64>();
            let (plan, call_box) = if label == CallLabel::Noise {
                let clicks = i % 2 == 1;
                let duration_s = 0.2;
                let plan = RecordingPlan {
                    sample_rate_hz: DEFAULT_SAMPLE_RATE_HZ,
                    duration_s,
                    calls: vec![],
                    noise: NoiseSpec { click_rate_hz: if clicks { 25.0 } else { 0.0 }, ..NoiseSpec::white(noise_db) },
                    seed,
                    source_id: format!("noise_{i}"),
                };
                let b = noise_tile_box(&mut rng, duration_s);
                (plan, Some(b))
            } else {
                let mut call = random_call(label, &mut rng);
                call.onset_s = config.pad_s;
                let plan = RecordingPlan {
                    sample_rate_hz: DEFAULT_SAMPLE_RATE_HZ,
                    duration_s: call.duration_s() + 2.0 * config.pad_s,
                    calls: vec![call],
                    noise: NoiseSpec::white(noise_db),
                    seed,
                    source_id: format!("{label}_{i}"),
                };
                (plan, None)
            };
            let (clip, truth) = synth_recording(&plan)?;
            let spec = compute_spectrogram(&clip, &config.spectrogram).expect("corpus clips exceed one window");
            let b = call_box.unwrap_or_else(|| truth.boxes[0].bbox());
            let tile = extract_tile(&spec, &b, &config.tile).expect("box lies inside the clip");
            out.push(LabeledTile { tile, label });
        }
    }
    Ok(out)
}
