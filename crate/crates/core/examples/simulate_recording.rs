//! Synthesizes a preset recording and writes the WAV plus its ground truth.
//!
//! `cargo run --example simulate_recording -- [preset] [seed] [out_dir]`

use std::fs::File;
use std::path::PathBuf;

use usvkit::audio::write_wav;
use usvkit::callsim::{preset, preset_names, synth_recording};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let name = args.first().map(String::as_str).unwrap_or("low_noise");
    let seed: u64 = args.get(1).map(|s| s.parse()).transpose()?.unwrap_or(7);
    let out = args.get(2).map(PathBuf::from).unwrap_or_else(std::env::temp_dir);

    let plan = preset(name, seed).map_err(|e| format!("{e} (known presets: {})", preset_names().join(", ")))?;
    let (clip, truth) = synth_recording(&plan)?;

    let wav = out.join(format!("{name}_{seed}.wav"));
    let jsonl = out.join(format!("{name}_{seed}.truth.jsonl"));
    write_wav(&clip, &wav)?;
    truth.write_jsonl(File::create(&jsonl)?)?;

    println!("{name} seed {seed}: {:.1} s at {} Hz, {} calls", clip.duration_s(), clip.sample_rate_hz(), truth.len());
    for b in truth.boxes.iter().take(5) {
        println!("  {:>13} {:7.3}-{:7.3} s  {:5.1}-{:5.1} kHz", format!("{:?}", b.label), b.t_start, b.t_end, b.f_min / 1e3, b.f_max / 1e3);
    }
    if truth.len() > 5 {
        println!("  ...");
    }
    println!("wrote {} and {}", wav.display(), jsonl.display());
    Ok(())
}
