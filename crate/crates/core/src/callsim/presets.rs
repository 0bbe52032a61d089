use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{random_call, NoiseSpec, RecordingPlan, Result, SimError};
use crate::classifier::CallLabel;

/// Recipe for a simulated recording; the call list is drawn from the seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PresetSpec {
    pub name: String,
    pub duration_s: f64,
    pub n_calls: usize,
    pub sample_rate_hz: u32,
    pub noise: NoiseSpec,
}

const PRESETS: [(&str, &str); 2] = [
    ("low_noise", include_str!("../../presets/low_noise.json")),
    ("high_noise", include_str!("../../presets/high_noise.json")),
];

pub fn preset_names() -> Vec<&'static str> {
    PRESETS.iter().map(|(n, _)| *n).collect()
}

impl PresetSpec {
    pub fn named(name: &str) -> Result<Self> {
        let (_, text) = PRESETS.iter().find(|(n, _)| *n == name).ok_or_else(|| SimError::UnknownPreset(name.to_string()))?;
        Ok(serde_json::from_str(text).expect("bundled preset parses"))
    }

    /// Expand into a plan. Calls depend only on `seed`, `duration_s` and
    /// `n_calls`, never on the noise settings, so presets sharing those fields
    /// share their ground truth.
    pub fn plan(&self, seed: u64) -> RecordingPlan {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut categories: Vec<CallLabel> = CallLabel::CALLS.iter().copied().cycle().take(self.n_calls).collect();
        categories.shuffle(&mut rng);
        let slot = self.duration_s / self.n_calls.max(1) as f64;
        let margin = 0.05;
        let calls = categories
            .into_iter()
            .enumerate()
            .map(|(i, cat)| {
                let mut call = random_call(cat, &mut rng);
                let room = (slot - call.duration_s() - 2.0 * margin).max(0.0);
                call.onset_s = i as f64 * slot + margin + rng.random::<f64>() * room;
                call
            })
            .collect();
        RecordingPlan {
            sample_rate_hz: self.sample_rate_hz,
            duration_s: self.duration_s,
            calls,
            noise: self.noise.clone(),
            seed,
            source_id: format!("{}_{seed}", self.name),
        }
    }
}

pub fn preset(name: &str, seed: u64) -> Result<RecordingPlan> {
    Ok(PresetSpec::named(name)?.plan(seed))
}
