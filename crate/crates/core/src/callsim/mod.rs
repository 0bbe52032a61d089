//! Procedural ground-truth recordings.
//!
//! Each call category is given a concrete, quantified frequency contour so
//! that detection and classification can be checked against known truth.
//! The thresholds below are operational choices, not measured constants.

mod corpus;
mod presets;

use std::f64::consts::PI;
use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::audio::{AudioClip, AudioError};
use crate::classifier::CallLabel;
use crate::detection::{Band, BandLimits};
use crate::spectrogram::TimeFreqBox;

pub use corpus::{noise_tile_box, random_call, tile_corpus, CorpusConfig};
pub use presets::{preset, preset_names, PresetSpec};

/// Minimum frequency excursion of a ramp.
pub const RAMP_MIN_EXCURSION_HZ: f64 = 10_000.0;
/// Minimum jump between the two plateaus of a step call.
pub const STEP_MIN_DELTA_HZ: f64 = 8_000.0;
/// Minimum number of full modulation cycles in a trill.
pub const TRILL_MIN_CYCLES: f64 = 3.0;
/// Short calls are strictly shorter than this.
pub const SHORT_MAX_MS: f64 = 12.0;
/// Allowed silent gap of a split call.
pub const SPLIT_GAP_MS: (f64, f64) = (5.0, 15.0);
/// Each side of a split call lasts at least this long.
pub const SPLIT_MIN_PART_MS: f64 = 4.0;
/// Minimum apex height of an inverted-U above its endpoints.
pub const INVERTED_U_MIN_RISE_HZ: f64 = 5_000.0;
/// Fraction of a complex trill occupied by its leading non-trill segment.
pub const COMPLEX_TRILL_LEAD_FRACTION: f64 = 0.4;
/// Envelope ramp length at every voiced-segment boundary.
pub const ENVELOPE_RAMP_MS: f64 = 2.0;
/// Every sample of a 50-kHz-type contour stays inside this band.
pub const HIGH_BAND_HZ: (f64, f64) = (30_000.0, 90_000.0);
pub const DEFAULT_SAMPLE_RATE_HZ: u32 = 250_000;
/// Noise reference used when a plan contains no calls.
pub const DEFAULT_CALL_PEAK: f64 = 0.5;

/// Knots of the complex contour: (time fraction, offset as a fraction of `fm_depth`).
const COMPLEX_KNOTS: [(f64, f64); 4] = [(0.0, 0.0), (0.25, 1.0), (0.6, -0.3), (1.0, 0.6)];

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid {category} call: {reason}")]
    InvalidSpec { category: CallLabel, reason: String },
    #[error("sample rate {sample_rate_hz} Hz cannot represent {max_freq_hz} Hz")]
    AliasRisk { sample_rate_hz: u32, max_freq_hz: f64 },
    #[error("calls {0} and {1} overlap or leave the recording")]
    OverlapError(usize, usize),
    #[error("unknown preset '{0}'")]
    UnknownPreset(String),
    #[error("invalid plan: {0}")]
    InvalidPlan(String),
    #[error(transparent)]
    Audio(#[from] AudioError),
}

pub type Result<T> = std::result::Result<T, SimError>;

/// Parameters of one planted call. Which fields matter depends on the category:
/// `fm_depth` is the trill depth, the ramp excursion, the inverted-U rise and the
/// complex-contour scale; `step_delta` is the plateau jump (signed) or the rise of
/// a complex trill's leading segment; `gap_ms` applies to split calls only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CallSpec {
    pub category: CallLabel,
    pub onset_s: f64,
    pub duration_ms: f64,
    pub f0: f64,
    #[serde(default)]
    pub fm_depth: f64,
    #[serde(default)]
    pub fm_rate: f64,
    #[serde(default)]
    pub step_delta: f64,
    #[serde(default)]
    pub gap_ms: f64,
    pub amplitude: f64,
}

impl CallSpec {
    pub fn flat(f0: f64, duration_ms: f64) -> Self {
        Self {
            category: CallLabel::Flat,
            onset_s: 0.0,
            duration_ms,
            f0,
            fm_depth: 0.0,
            fm_rate: 0.0,
            step_delta: 0.0,
            gap_ms: 0.0,
            amplitude: 0.5,
        }
    }

    pub fn duration_s(&self) -> f64 {
        self.duration_ms / 1000.0
    }

    pub fn end_s(&self) -> f64 {
        self.onset_s + self.duration_s()
    }
}

/// Frequency trajectory of a validated call; time is relative to onset.
#[derive(Debug, Clone, PartialEq)]
pub struct Contour {
    spec: CallSpec,
}

impl Contour {
    pub fn spec(&self) -> &CallSpec {
        &self.spec
    }

    pub fn duration_s(&self) -> f64 {
        self.spec.duration_s()
    }

    /// Silent interval of a split call, seconds from onset.
    pub fn gap(&self) -> Option<(f64, f64)> {
        (self.spec.category == CallLabel::Split).then(|| {
            let mid = self.duration_s() / 2.0;
            let half = self.spec.gap_ms / 2000.0;
            (mid - half, mid + half)
        })
    }

    /// Times at which the contour jumps or stops.
    pub fn discontinuities(&self) -> Vec<f64> {
        match self.spec.category {
            CallLabel::StepUp | CallLabel::StepDown => vec![self.duration_s() / 2.0],
            CallLabel::Split => {
                let (a, b) = self.gap().expect("split gap");
                vec![a, b]
            }
            _ => vec![],
        }
    }

    /// Instantaneous frequency at `t`; `None` outside the call or inside a gap.
    pub fn freq_at(&self, t: f64) -> Option<f64> {
        let d = self.duration_s();
        if !(0.0..=d).contains(&t) {
            return None;
        }
        if let Some((a, b)) = self.gap() {
            if t > a && t < b {
                return None;
            }
        }
        let s = &self.spec;
        let u = t / d;
        Some(match s.category {
            CallLabel::Flat | CallLabel::Short | CallLabel::Split | CallLabel::Noise => s.f0,
            CallLabel::UpwardRamp => s.f0 + s.fm_depth * u,
            CallLabel::DownwardRamp => s.f0 - s.fm_depth * u,
            CallLabel::Trill => s.f0 + s.fm_depth * (2.0 * PI * s.fm_rate * t).sin(),
            CallLabel::ComplexTrill => {
                let lead = COMPLEX_TRILL_LEAD_FRACTION * d;
                if t < lead {
                    s.f0 - s.step_delta * (1.0 - t / lead)
                } else {
                    s.f0 + s.fm_depth * (2.0 * PI * s.fm_rate * (t - lead)).sin()
                }
            }
            CallLabel::Complex => {
                let i = COMPLEX_KNOTS.windows(2).position(|w| u <= w[1].0).unwrap_or(COMPLEX_KNOTS.len() - 2);
                let ((u0, o0), (u1, o1)) = (COMPLEX_KNOTS[i], COMPLEX_KNOTS[i + 1]);
                let w = (u - u0) / (u1 - u0);
                s.f0 + s.fm_depth * (o0 + (o1 - o0) * w)
            }
            CallLabel::InvertedU => s.f0 + s.fm_depth * (PI * u).sin(),
            CallLabel::StepUp | CallLabel::StepDown => {
                if u < 0.5 {
                    s.f0
                } else {
                    s.f0 + s.step_delta
                }
            }
        })
    }

    /// Lowest and highest frequency reached, from the closed-form extremes.
    pub fn range(&self) -> (f64, f64) {
        let s = &self.spec;
        let (a, b) = match s.category {
            CallLabel::Flat | CallLabel::Short | CallLabel::Split | CallLabel::Noise => (s.f0, s.f0),
            CallLabel::UpwardRamp => (s.f0, s.f0 + s.fm_depth),
            CallLabel::DownwardRamp => (s.f0 - s.fm_depth, s.f0),
            CallLabel::Trill => (s.f0 - s.fm_depth, s.f0 + s.fm_depth),
            CallLabel::ComplexTrill => {
                let lead_start = s.f0 - s.step_delta;
                (lead_start.min(s.f0 - s.fm_depth), lead_start.max(s.f0 + s.fm_depth))
            }
            CallLabel::Complex => {
                let offs = COMPLEX_KNOTS.map(|(_, o)| s.f0 + s.fm_depth * o);
                (offs.iter().copied().fold(f64::INFINITY, f64::min), offs.iter().copied().fold(f64::NEG_INFINITY, f64::max))
            }
            CallLabel::InvertedU => (s.f0, s.f0 + s.fm_depth),
            CallLabel::StepUp | CallLabel::StepDown => (s.f0.min(s.f0 + s.step_delta), s.f0.max(s.f0 + s.step_delta)),
        };
        (a.min(b), a.max(b))
    }
}

/// Validate `spec` against its category's contour constraints.
pub fn contour(spec: &CallSpec) -> Result<Contour> {
    let fail = |reason: String| Err(SimError::InvalidSpec { category: spec.category, reason });
    let finite = [spec.onset_s, spec.duration_ms, spec.f0, spec.fm_depth, spec.fm_rate, spec.step_delta, spec.gap_ms, spec.amplitude];
    if finite.iter().any(|v| !v.is_finite()) {
        return fail("non-finite parameter".into());
    }
    if spec.category == CallLabel::Noise {
        return fail("Noise is not a call category".into());
    }
    if spec.duration_ms <= 0.0 || spec.onset_s < 0.0 {
        return fail("duration must be positive and onset non-negative".into());
    }
    if !(0.0..=1.0).contains(&spec.amplitude) {
        return fail(format!("amplitude {} outside [0, 1]", spec.amplitude));
    }
    let d_s = spec.duration_s();
    match spec.category {
        CallLabel::Short if spec.duration_ms >= SHORT_MAX_MS => {
            return fail(format!("short calls last under {SHORT_MAX_MS} ms"));
        }
        CallLabel::UpwardRamp | CallLabel::DownwardRamp if spec.fm_depth < RAMP_MIN_EXCURSION_HZ => {
            return fail(format!("ramp excursion {} Hz below {RAMP_MIN_EXCURSION_HZ}", spec.fm_depth));
        }
        CallLabel::Trill if spec.fm_depth <= 0.0 || spec.fm_rate * d_s < TRILL_MIN_CYCLES - 1e-9 => {
            return fail(format!("trill needs positive depth and at least {TRILL_MIN_CYCLES} cycles"));
        }
        CallLabel::ComplexTrill
            if spec.fm_depth <= 0.0 || spec.fm_rate * d_s * (1.0 - COMPLEX_TRILL_LEAD_FRACTION) < TRILL_MIN_CYCLES - 1e-9 =>
        {
            return fail(format!("trill segment needs positive depth and at least {TRILL_MIN_CYCLES} cycles"));
        }
        CallLabel::Complex if spec.fm_depth <= 0.0 => return fail("complex contour needs positive fm_depth".into()),
        CallLabel::InvertedU if spec.fm_depth < INVERTED_U_MIN_RISE_HZ => {
            return fail(format!("apex rise below {INVERTED_U_MIN_RISE_HZ} Hz"));
        }
        CallLabel::StepUp if spec.step_delta < STEP_MIN_DELTA_HZ => {
            return fail(format!("step up needs step_delta ≥ {STEP_MIN_DELTA_HZ}"));
        }
        CallLabel::StepDown if spec.step_delta > -STEP_MIN_DELTA_HZ => {
            return fail(format!("step down needs step_delta ≤ -{STEP_MIN_DELTA_HZ}"));
        }
        CallLabel::Split => {
            if !(SPLIT_GAP_MS.0..=SPLIT_GAP_MS.1).contains(&spec.gap_ms) {
                return fail(format!("gap {} ms outside {SPLIT_GAP_MS:?}", spec.gap_ms));
            }
            if spec.duration_ms < spec.gap_ms + 2.0 * SPLIT_MIN_PART_MS {
                return fail("split parts too short".into());
            }
        }
        _ => {}
    }
    let c = Contour { spec: spec.clone() };
    let (lo, hi) = c.range();
    if lo < HIGH_BAND_HZ.0 || hi > HIGH_BAND_HZ.1 {
        return fail(format!("contour spans {lo}–{hi} Hz, outside {HIGH_BAND_HZ:?}"));
    }
    Ok(c)
}

/// Amplitude envelope with raised-cosine ramps at each voiced-segment boundary.
fn envelope(contour: &Contour, t: f64) -> f64 {
    let d = contour.duration_s();
    let segments = match contour.gap() {
        Some((a, b)) => vec![(0.0, a), (b, d)],
        None => vec![(0.0, d)],
    };
    for (s, e) in segments {
        if t < s || t > e {
            continue;
        }
        let ramp = (ENVELOPE_RAMP_MS / 1000.0).min((e - s) / 2.0);
        let edge = (t - s).min(e - t);
        return if edge >= ramp { 1.0 } else { 0.5 - 0.5 * (PI * edge / ramp).cos() };
    }
    0.0
}

/// Render one call (without its onset offset) as phase-continuous FM.
pub fn synth_call_samples(spec: &CallSpec, sample_rate_hz: u32) -> Result<Vec<f64>> {
    let c = contour(spec)?;
    let (_, hi) = c.range();
    if 2.0 * hi >= sample_rate_hz as f64 {
        return Err(SimError::AliasRisk { sample_rate_hz, max_freq_hz: hi });
    }
    let sr = sample_rate_hz as f64;
    let n = (c.duration_s() * sr).round() as usize;
    let mut phase = 0.0f64;
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let t = i as f64 / sr;
        let x = match c.freq_at(t) {
            Some(f) => {
                let v = spec.amplitude * envelope(&c, t) * phase.sin();
                phase = (phase + 2.0 * PI * f / sr) % (2.0 * PI);
                v
            }
            None => 0.0,
        };
        out.push(x);
    }
    Ok(out)
}

pub fn synth_call(spec: &CallSpec, sample_rate_hz: u32) -> Result<AudioClip> {
    let samples = synth_call_samples(spec, sample_rate_hz)?;
    Ok(AudioClip::from_f64_normalized(&samples, sample_rate_hz, format!("{}", spec.category))?)
}

/// Background noise: white Gaussian plus Poisson-timed broadband bursts ("clicks").
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    /// Standard deviation of the white noise, dB relative to the call peak amplitude.
    pub broadband_db: f64,
    pub click_rate_hz: f64,
    /// Burst standard deviation, dB relative to the call peak amplitude.
    #[serde(default = "default_click_db")]
    pub click_db: f64,
    /// Burst duration drawn uniformly from this range.
    #[serde(default = "default_click_ms")]
    pub click_ms: (f64, f64),
}

fn default_click_db() -> f64 {
    -6.0
}

fn default_click_ms() -> (f64, f64) {
    (1.0, 30.0)
}

impl NoiseSpec {
    pub fn white(broadband_db: f64) -> Self {
        Self { broadband_db, click_rate_hz: 0.0, click_db: default_click_db(), click_ms: default_click_ms() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecordingPlan {
    #[serde(default = "default_sr")]
    pub sample_rate_hz: u32,
    pub duration_s: f64,
    pub calls: Vec<CallSpec>,
    pub noise: NoiseSpec,
    pub seed: u64,
    #[serde(default = "default_source_id")]
    pub source_id: String,
}

fn default_sr() -> u32 {
    DEFAULT_SAMPLE_RATE_HZ
}

fn default_source_id() -> String {
    "sim".into()
}

impl RecordingPlan {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("plan serializes")
    }

    pub fn from_json(text: &str) -> serde_json::Result<Self> {
        serde_json::from_str(text)
    }

    /// Calls sorted, pairwise disjoint and inside the recording.
    pub fn validate(&self) -> Result<()> {
        if !(self.duration_s > 0.0) || self.sample_rate_hz == 0 {
            return Err(SimError::InvalidPlan("duration and sample rate must be positive".into()));
        }
        for (i, c) in self.calls.iter().enumerate() {
            contour(c)?;
            if c.end_s() > self.duration_s {
                return Err(SimError::OverlapError(i, i));
            }
            if i > 0 && c.onset_s < self.calls[i - 1].end_s() {
                return Err(SimError::OverlapError(i - 1, i));
            }
        }
        Ok(())
    }

    pub fn call_peak(&self) -> f64 {
        self.calls.iter().map(|c| c.amplitude).fold(None, |m: Option<f64>, a| Some(m.map_or(a, |m| m.max(a)))).unwrap_or(DEFAULT_CALL_PEAK)
    }
}

/// One planted call's box; bounds come from the contour definition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruthBox {
    #[serde(default)]
    pub source_id: String,
    pub t_start: f64,
    pub t_end: f64,
    pub f_min: f64,
    pub f_max: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub band: Option<Band>,
    pub label: CallLabel,
}

impl TruthBox {
    pub fn bbox(&self) -> TimeFreqBox {
        TimeFreqBox::new(self.t_start, self.t_end, self.f_min, self.f_max)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub boxes: Vec<TruthBox>,
}

impl GroundTruth {
    pub fn len(&self) -> usize {
        self.boxes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }

    pub fn write_jsonl<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        for b in &self.boxes {
            serde_json::to_writer(&mut w, b)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn read_jsonl(text: &str) -> serde_json::Result<Self> {
        let boxes = text.lines().filter(|l| !l.trim().is_empty()).map(serde_json::from_str).collect::<serde_json::Result<_>>()?;
        Ok(Self { boxes })
    }
}

pub fn truth_box(spec: &CallSpec, source_id: &str) -> Result<TruthBox> {
    let c = contour(spec)?;
    let (f_min, f_max) = c.range();
    Ok(TruthBox {
        source_id: source_id.to_string(),
        t_start: spec.onset_s,
        t_end: spec.end_s(),
        f_min,
        f_max,
        band: BandLimits::default().classify((f_min + f_max) / 2.0),
        label: spec.category,
    })
}

/// Add white noise and bursts at the plan's levels into `buf`.
fn add_noise(buf: &mut [f64], plan: &RecordingPlan, seed: u64) {
    let sr = plan.sample_rate_hz as f64;
    let peak = plan.call_peak();
    let sigma = peak * 10f64.powf(plan.noise.broadband_db / 20.0);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    if sigma > 0.0 {
        let normal = Normal::new(0.0, sigma).expect("finite sigma");
        for x in buf.iter_mut() {
            *x += normal.sample(&mut rng);
        }
    }
    if plan.noise.click_rate_hz > 0.0 {
        let mut click_rng = ChaCha8Rng::seed_from_u64(seed ^ 0xC11C_C11C_C11C_C11C);
        let gaps = Exp::new(plan.noise.click_rate_hz).expect("positive rate");
        let click_sigma = peak * 10f64.powf(plan.noise.click_db / 20.0);
        let unit = Normal::new(0.0, 1.0).expect("unit normal");
        let (lo, hi) = plan.noise.click_ms;
        let mut t = gaps.sample(&mut click_rng);
        while t < plan.duration_s {
            let dur_ms = if hi > lo { click_rng.random_range(lo..hi) } else { lo };
            let start = (t * sr) as usize;
            let len = ((dur_ms / 1000.0 * sr) as usize).max(1);
            for k in 0..len {
                let Some(x) = buf.get_mut(start + k) else { break };
                let env = 0.5 - 0.5 * (2.0 * PI * (k as f64 + 0.5) / len as f64).cos();
                *x += click_sigma * env * unit.sample(&mut click_rng);
            }
            t += gaps.sample(&mut click_rng);
        }
    }
}

/// Sum the planted calls over seeded noise. If the mixture exceeds full scale
/// the whole recording is scaled down uniformly.
pub fn synth_recording(plan: &RecordingPlan) -> Result<(AudioClip, GroundTruth)> {
    plan.validate()?;
    let sr = plan.sample_rate_hz;
    let n = (plan.duration_s * sr as f64).round() as usize;
    let mut buf = vec![0.0f64; n];
    let mut truth = GroundTruth::default();
    for spec in &plan.calls {
        let samples = synth_call_samples(spec, sr)?;
        let start = (spec.onset_s * sr as f64).round() as usize;
        for (k, s) in samples.iter().enumerate() {
            if let Some(x) = buf.get_mut(start + k) {
                *x += s;
            }
        }
        truth.boxes.push(truth_box(spec, &plan.source_id)?);
    }
    add_noise(&mut buf, plan, plan.seed);
    let clip = AudioClip::from_f64_normalized(&buf, sr, plan.source_id.clone())?;
    Ok((clip, truth))
}
