//! Median-floor detector against a global percentile threshold on both
//! simulator presets, over a few seeds.

use usvkit::callsim::{preset, synth_recording};
use usvkit::detection::{baseline_detect, detect, DetectionConfig, DEFAULT_BASELINE_PERCENTILE};
use usvkit::metrics::{d_prime_of, match_detections, rates, OutcomeTally, DEFAULT_MIN_OVERLAP};
use usvkit::spectrogram::SpectrogramParams;

fn describe(name: &str, t: &OutcomeTally) -> String {
    let r = rates(t).map(|r| format!("hit {:.3} FA {:.3}", r.hit_rate, r.false_alarm_rate)).unwrap_or_else(|_| "no detections".into());
    let d = d_prime_of(t).map(|d| format!("{:+.2}", d.value)).unwrap_or_else(|_| "n/a".into());
    format!("{name:<9} {:>3} det {:>3} hits {:>3} FA {:>3} miss  {r}  d' {d}", t.detections, t.hits, t.false_alarms, t.misses)
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let params = SpectrogramParams::default();
    let config = DetectionConfig::default();
    for name in ["low_noise", "high_noise"] {
        println!("{name}");
        for seed in [1, 2, 3] {
            let (clip, truth) = synth_recording(&preset(name, seed)?)?;
            let ours = detect(&clip, &params, &config)?;
            let base = baseline_detect(&clip, &params, DEFAULT_BASELINE_PERCENTILE)?;
            println!("  seed {seed}");
            println!("    {}", describe("median", &match_detections(&ours, &truth.boxes, DEFAULT_MIN_OVERLAP)));
            println!("    {}", describe("baseline", &match_detections(&base, &truth.boxes, DEFAULT_MIN_OVERLAP)));
        }
    }
    Ok(())
}
