//! Glue between the modules: one configuration document, classifier-screened
//! detection, and scoring of candidate and label files.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::audio::{AudioClip, AudioError};
use crate::callsim::{SimError, TruthBox};
use crate::classifier::{CallLabel, ClassifierError, ClassifierModel, TrainConfig};
use crate::datastore::StoreError;
use crate::detection::{detect, CallCandidate, DetectionConfig, DetectionError, DEFAULT_BASELINE_PERCENTILE};
use crate::metrics::{
    generalization, match_pairs, paired_t, proportion_correct, rates, welch_t, EvaluationReport, GeneralizationResult,
    MetricsError, OutcomeTally, RecordingScore, TTestResult, DEFAULT_MIN_OVERLAP,
};
use crate::spectrogram::{tile_from_clip, SpectrogramError, SpectrogramParams, TileParams};
use crate::synthgen::{MorphParams, SynthError};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("config: {0}")]
    Config(String),
    #[error("parse error in {what}: {message}")]
    Parse { what: String, message: String },
    #[error("noise screening needs a classifier model")]
    ScreenNeedsModel,
    #[error(transparent)]
    Audio(#[from] AudioError),
    #[error(transparent)]
    Spectrogram(#[from] SpectrogramError),
    #[error(transparent)]
    Detection(#[from] DetectionError),
    #[error(transparent)]
    Classifier(#[from] ClassifierError),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error("i/o failure: {0}")]
    Io(#[from] std::io::Error),
}

impl PipelineError {
    /// Process exit code: 2 for usage, parse and I/O failures, 1 for domain errors.
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Config(_) | PipelineError::Parse { .. } | PipelineError::Io(_) => 2,
            PipelineError::Audio(AudioError::Io(_) | AudioError::MalformedWav(_) | AudioError::UnsupportedEncoding { .. }) => 2,
            PipelineError::Store(StoreError::Io(_) | StoreError::Locked(_)) => 2,
            _ => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, PipelineError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvaluationConfig {
    pub min_overlap: f64,
    pub baseline_percentile: f64,
}

impl Default for EvaluationConfig {
    fn default() -> Self {
        Self { min_overlap: DEFAULT_MIN_OVERLAP, baseline_percentile: DEFAULT_BASELINE_PERCENTILE }
    }
}

/// Every tunable in one TOML document. Missing sections and keys take defaults.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Config {
    pub spectrogram: SpectrogramParams,
    pub tile: TileParams,
    pub detection: DetectionConfig,
    pub train: TrainConfig,
    pub morph: MorphParams,
    pub evaluation: EvaluationConfig,
}

impl Config {
    pub fn from_toml(text: &str) -> Result<Self> {
        let c: Config = toml::from_str(text).map_err(|e| PipelineError::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |e: String| PipelineError::Config(e);
        self.spectrogram.validate().map_err(|e| bad(e.to_string()))?;
        self.detection.validate().map_err(|e| bad(e.to_string()))?;
        self.train.validate().map_err(|e| bad(e.to_string()))?;
        self.morph.validate().map_err(|e| bad(e.to_string()))?;
        if self.tile.out_size < 8 {
            return Err(bad("tile.out_size must be at least 8".into()));
        }
        if !(0.0..=1.0).contains(&self.evaluation.min_overlap) {
            return Err(bad("evaluation.min_overlap must lie in [0, 1]".into()));
        }
        if !(0.0..=1.0).contains(&self.evaluation.baseline_percentile) {
            return Err(bad("evaluation.baseline_percentile must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

/// Detection followed, when `detection.noise_screen` is set, by dropping
/// candidates the classifier gives at least that Noise probability.
pub fn detect_screened(clip: &AudioClip, config: &Config, model: Option<&ClassifierModel>) -> Result<Vec<CallCandidate>> {
    let candidates = detect(clip, &config.spectrogram, &config.detection)?;
    let Some(threshold) = config.detection.noise_screen else {
        return Ok(candidates);
    };
    let model = model.ok_or(PipelineError::ScreenNeedsModel)?;
    if !model.categories.contains(&CallLabel::Noise) {
        return Err(ClassifierError::UnknownCategory(CallLabel::Noise).into());
    }
    let tile_params = TileParams { out_size: model.input_size().0, ..config.tile.clone() };
    let mut kept = Vec::with_capacity(candidates.len());
    for c in candidates {
        let tile = tile_from_clip(clip, &c.bbox(), &config.spectrogram, &tile_params)?;
        let p = model.forward(&tile)?;
        if model.probability_of(&p, CallLabel::Noise) < threshold {
            kept.push(c);
        }
    }
    Ok(kept)
}

/// Scores candidates against truth per recording (grouped by `source_id`).
/// Recordings present on either side are reported.
pub fn evaluate_detections(candidates: &[CallCandidate], truth: &[TruthBox], min_overlap: f64) -> EvaluationReport {
    let mut groups: BTreeMap<&str, (Vec<&CallCandidate>, Vec<&TruthBox>)> = BTreeMap::new();
    for c in candidates {
        groups.entry(&c.source_id).or_default().0.push(c);
    }
    for t in truth {
        groups.entry(&t.source_id).or_default().1.push(t);
    }
    let per_recording = groups
        .into_iter()
        .map(|(rec, (c, t))| {
            let c: Vec<CallCandidate> = c.into_iter().cloned().collect();
            let t: Vec<TruthBox> = t.into_iter().cloned().collect();
            let tally = match_pairs(&c, &t, min_overlap).tally;
            RecordingScore { recording: rec.to_string(), tally, rates: rates(&tally).ok() }
        })
        .collect();
    EvaluationReport::from_recordings(per_recording)
}

/// Report for tallies counted elsewhere, one per named row.
pub fn evaluate_tallies(tallies: Vec<(String, OutcomeTally)>) -> Result<EvaluationReport> {
    let mut rows = Vec::with_capacity(tallies.len());
    for (name, tally) in tallies {
        tally.check()?;
        rows.push(RecordingScore { recording: name, tally, rates: rates(&tally).ok() });
    }
    Ok(EvaluationReport::from_recordings(rows))
}

/// One classified call in a label file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelRecord {
    pub recording: String,
    pub predicted: CallLabel,
    pub truth: CallLabel,
}

pub fn read_label_records(text: &str, what: &str) -> Result<Vec<LabelRecord>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| PipelineError::Parse { what: format!("{what} line {}", i + 1), message: e.to_string() })
        })
        .collect()
}

/// Proportion correct per recording.
pub fn label_scores(records: &[LabelRecord]) -> Result<BTreeMap<String, f64>> {
    let mut groups: BTreeMap<String, (Vec<CallLabel>, Vec<CallLabel>)> = BTreeMap::new();
    for r in records {
        let g = groups.entry(r.recording.clone()).or_default();
        g.0.push(r.predicted);
        g.1.push(r.truth);
    }
    groups.into_iter().map(|(k, (p, t))| Ok((k, proportion_correct(&p, &t)?))).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelComparison {
    pub pre: GeneralizationResult,
    pub post: GeneralizationResult,
    /// Welch first, then paired over recordings present in both runs.
    pub tests: Vec<TTestResult>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

/// Compares two classification runs. Tests that are undefined for the data
/// (too few recordings, zero variance) are skipped with a warning.
pub fn compare_label_runs(pre: &[LabelRecord], post: &[LabelRecord]) -> Result<LabelComparison> {
    let a = label_scores(pre)?;
    let b = label_scores(post)?;
    let va: Vec<f64> = a.values().copied().collect();
    let vb: Vec<f64> = b.values().copied().collect();
    let mut tests = Vec::new();
    let mut warnings = Vec::new();
    match welch_t(&vb, &va) {
        Ok(t) => tests.push(t),
        Err(e) => warnings.push(format!("welch: {e}")),
    }
    let pairs: Vec<(f64, f64)> = a.iter().filter_map(|(k, x)| b.get(k).map(|y| (*x, *y))).collect();
    match paired_t(&pairs) {
        Ok(t) => tests.push(t),
        Err(e) => warnings.push(format!("paired: {e}")),
    }
    Ok(LabelComparison { pre: generalization(&va)?, post: generalization(&vb)?, tests, warnings })
}
