//! Runs the detector on a WAV file, or on a simulated recording when no path
//! is given, and scores it against the planted calls.
//!
//! `cargo run --example detect_calls -- [file.wav]`

use usvkit::audio::load_wav;
use usvkit::callsim::{preset, synth_recording};
use usvkit::detection::{detect, DetectionConfig};
use usvkit::metrics::{match_detections, rates, DEFAULT_MIN_OVERLAP};
use usvkit::spectrogram::SpectrogramParams;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let (clip, truth) = match std::env::args().nth(1) {
        Some(path) => (load_wav(path, 0)?, None),
        None => {
            let (clip, truth) = synth_recording(&preset("high_noise", 3)?)?;
            (clip, Some(truth))
        }
    };

    let candidates = detect(&clip, &SpectrogramParams::default(), &DetectionConfig::default())?;
    println!("{}: {} candidates in {:.1} s", clip.source_id(), candidates.len(), clip.duration_s());
    for c in &candidates {
        println!(
            "  {:7.3}-{:7.3} s  {:5.1}-{:5.1} kHz  {:5.1} ms  peak {:6.1} dB  {:?}",
            c.t_start,
            c.t_end,
            c.f_min / 1e3,
            c.f_max / 1e3,
            c.duration_ms(),
            c.peak_db,
            c.band
        );
    }

    if let Some(truth) = truth {
        let tally = match_detections(&candidates, &truth.boxes, DEFAULT_MIN_OVERLAP);
        let r = rates(&tally)?;
        println!("against {} planted calls: {tally:?}", truth.len());
        println!("hit rate {:.3}, false-alarm rate {:.3}", r.hit_rate, r.false_alarm_rate);
    }
    Ok(())
}
