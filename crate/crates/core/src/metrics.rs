//! Detection matching, signal-detection rates, d′, t-tests and accuracy summaries.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::callsim::TruthBox;
use crate::classifier::CallLabel;
use crate::detection::CallCandidate;
use crate::spectrogram::TimeFreqBox;

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("no detections to score")]
    NoDetections,
    #[error("no ground-truth calls to score")]
    NoTruth,
    #[error("probability {0} outside (0, 1)")]
    OutOfRange(f64),
    #[error("rate {0} is 0 or 1 and no count was given for the correction")]
    ExtremeRateNoN(f64),
    #[error("degenerate sample: {0}")]
    DegenerateSample(String),
    #[error("length mismatch: {0} predictions vs {1} labels")]
    LengthMismatch(usize, usize),
    #[error("empty input")]
    Empty,
    #[error("tally is inconsistent: detections {detections} != hits {hits} + false alarms {false_alarms}")]
    InconsistentTally { detections: usize, hits: usize, false_alarms: usize },
}

pub type Result<T> = std::result::Result<T, MetricsError>;

pub const DEFAULT_MIN_OVERLAP: f64 = 0.3;

/// Anything with a time extent in seconds.
pub trait TimeSpan {
    fn time_span(&self) -> (f64, f64);
}

impl TimeSpan for TimeFreqBox {
    fn time_span(&self) -> (f64, f64) {
        (self.t_start, self.t_end)
    }
}

impl TimeSpan for CallCandidate {
    fn time_span(&self) -> (f64, f64) {
        (self.t_start, self.t_end)
    }
}

impl TimeSpan for TruthBox {
    fn time_span(&self) -> (f64, f64) {
        (self.t_start, self.t_end)
    }
}

impl TimeSpan for (f64, f64) {
    fn time_span(&self) -> (f64, f64) {
        *self
    }
}

/// Intersection over union of two time intervals; 0 when either is empty.
pub fn temporal_iou(a: (f64, f64), b: (f64, f64)) -> f64 {
    let inter = (a.1.min(b.1) - a.0.max(b.0)).max(0.0);
    let union = (a.1 - a.0).max(0.0) + (b.1 - b.0).max(0.0) - inter;
    if union > 0.0 { inter / union } else { 0.0 }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct OutcomeTally {
    pub detections: usize,
    pub hits: usize,
    pub false_alarms: usize,
    pub misses: usize,
}

impl OutcomeTally {
    pub fn new(detections: usize, hits: usize, false_alarms: usize, misses: usize) -> Result<Self> {
        let t = Self { detections, hits, false_alarms, misses };
        t.check()?;
        Ok(t)
    }

    pub fn check(&self) -> Result<()> {
        if self.detections != self.hits + self.false_alarms {
            return Err(MetricsError::InconsistentTally { detections: self.detections, hits: self.hits, false_alarms: self.false_alarms });
        }
        Ok(())
    }

    pub fn merged(&self, other: &OutcomeTally) -> OutcomeTally {
        OutcomeTally {
            detections: self.detections + other.detections,
            hits: self.hits + other.hits,
            false_alarms: self.false_alarms + other.false_alarms,
            misses: self.misses + other.misses,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matching {
    pub tally: OutcomeTally,
    /// (candidate index, truth index, IoU) for every hit.
    pub pairs: Vec<(usize, usize, f64)>,
}

/// Greedy one-to-one matching by descending temporal IoU. Ties are broken by
/// candidate index, then truth index.
pub fn match_pairs<C: TimeSpan, T: TimeSpan>(candidates: &[C], truth: &[T], min_overlap: f64) -> Matching {
    let mut scored = Vec::new();
    for (ci, c) in candidates.iter().enumerate() {
        for (ti, t) in truth.iter().enumerate() {
            let iou = temporal_iou(c.time_span(), t.time_span());
            if iou > 0.0 && iou >= min_overlap {
                scored.push((ci, ti, iou));
            }
        }
    }
    scored.sort_by(|a, b| b.2.total_cmp(&a.2).then(a.0.cmp(&b.0)).then(a.1.cmp(&b.1)));
    let mut c_used = vec![false; candidates.len()];
    let mut t_used = vec![false; truth.len()];
    let mut pairs = Vec::new();
    for (ci, ti, iou) in scored {
        if !c_used[ci] && !t_used[ti] {
            c_used[ci] = true;
            t_used[ti] = true;
            pairs.push((ci, ti, iou));
        }
    }
    let hits = pairs.len();
    let tally = OutcomeTally { detections: candidates.len(), hits, false_alarms: candidates.len() - hits, misses: truth.len() - hits };
    Matching { tally, pairs }
}

pub fn match_detections<C: TimeSpan, T: TimeSpan>(candidates: &[C], truth: &[T], min_overlap: f64) -> OutcomeTally {
    match_pairs(candidates, truth, min_overlap).tally
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RatesReport {
    pub hit_rate: f64,
    pub false_alarm_rate: f64,
    pub miss_rate: f64,
}

/// Hit and false-alarm rates are fractions of detections; the miss rate is a
/// fraction of ground-truth calls.
pub fn rates(tally: &OutcomeTally) -> Result<RatesReport> {
    tally.check()?;
    if tally.detections == 0 {
        return Err(MetricsError::NoDetections);
    }
    if tally.hits + tally.misses == 0 {
        return Err(MetricsError::NoTruth);
    }
    let d = tally.detections as f64;
    Ok(RatesReport {
        hit_rate: tally.hits as f64 / d,
        false_alarm_rate: tally.false_alarms as f64 / d,
        miss_rate: tally.misses as f64 / (tally.hits + tally.misses) as f64,
    })
}

/// Inverse standard normal CDF (Wichura's AS 241, PPND16).
pub fn probit(p: f64) -> Result<f64> {
    if !(p > 0.0 && p < 1.0) {
        return Err(MetricsError::OutOfRange(p));
    }
    let q = p - 0.5;
    if q.abs() <= 0.425 {
        let r = 0.180625 - q * q;
        return Ok(q * poly(&A, r) / poly(&B, r));
    }
    let r = if q < 0.0 { p } else { 1.0 - p };
    let r = (-r.ln()).sqrt();
    let z = if r <= 5.0 {
        let r = r - 1.6;
        poly(&C, r) / poly(&D, r)
    } else {
        let r = r - 5.0;
        poly(&E, r) / poly(&F, r)
    };
    Ok(if q < 0.0 { -z } else { z })
}

fn poly(coeffs: &[f64; 8], x: f64) -> f64 {
    coeffs.iter().rev().fold(0.0, |acc, &c| acc * x + c)
}

const A: [f64; 8] = [
    3.387_132_872_796_366_5,
    1.331_416_678_917_843_8e2,
    1.971_590_950_306_551_3e3,
    1.373_169_376_550_946e4,
    4.592_195_393_154_987e4,
    6.726_577_092_700_87e4,
    3.343_057_558_358_813e4,
    2.509_080_928_730_122_7e3,
];
const B: [f64; 8] = [
    1.0,
    4.231_333_070_160_091e1,
    6.871_870_074_920_579e2,
    5.394_196_021_424_751e3,
    2.121_379_430_158_659_7e4,
    3.930_789_580_009_271e4,
    2.872_908_573_572_194_3e4,
    5.226_495_278_852_545e3,
];
const C: [f64; 8] = [
    1.423_437_110_749_683_5,
    4.630_337_846_156_546,
    5.769_497_221_460_691,
    3.647_848_324_763_204_5,
    1.270_458_252_452_368_4,
    2.417_807_251_774_506e-1,
    2.272_384_498_926_918_4e-2,
    7.745_450_142_783_414e-4,
];
const D: [f64; 8] = [
    1.0,
    2.053_191_626_637_759,
    1.676_384_830_183_803_8,
    6.897_673_349_851e-1,
    1.481_039_764_274_800_8e-1,
    1.519_866_656_361_645_7e-2,
    5.475_938_084_995_345e-4,
    1.050_750_071_644_416_9e-9,
];
const E: [f64; 8] = [
    6.657_904_643_501_103,
    5.463_784_911_164_114,
    1.784_826_539_917_291_3,
    2.965_605_718_285_048_7e-1,
    2.653_218_952_657_612_4e-2,
    1.242_660_947_388_078_4e-3,
    2.711_555_568_743_487_6e-5,
    2.010_334_399_292_288_1e-7,
];
const F: [f64; 8] = [
    1.0,
    5.998_322_065_558_88e-1,
    1.369_298_809_227_358e-1,
    1.487_536_129_085_061_5e-2,
    7.868_691_311_456_133e-4,
    1.846_318_317_510_054_8e-5,
    1.421_511_758_316_446e-7,
    2.043_631_033_641_527_5e-15,
];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DPrime {
    pub value: f64,
    /// True when a rate of exactly 0 or 1 was replaced by 1/(2N) or 1 − 1/(2N).
    pub corrected: bool,
}

fn corrected_rate(rate: f64, n: Option<usize>) -> Result<(f64, bool)> {
    if !(0.0..=1.0).contains(&rate) {
        return Err(MetricsError::OutOfRange(rate));
    }
    if rate > 0.0 && rate < 1.0 {
        return Ok((rate, false));
    }
    match n {
        Some(n) if n > 0 => {
            let e = 1.0 / (2.0 * n as f64);
            Ok((if rate == 0.0 { e } else { 1.0 - e }, true))
        }
        _ => Err(MetricsError::ExtremeRateNoN(rate)),
    }
}

/// z(hit rate) − z(false-alarm rate).
pub fn d_prime(hit_rate: f64, fa_rate: f64, n_for_correction: Option<usize>) -> Result<DPrime> {
    let (h, ch) = corrected_rate(hit_rate, n_for_correction)?;
    let (f, cf) = corrected_rate(fa_rate, n_for_correction)?;
    Ok(DPrime { value: probit(h)? - probit(f)?, corrected: ch || cf })
}

/// d′ of a tally's rates, correcting extremes with the detection count.
pub fn d_prime_of(tally: &OutcomeTally) -> Result<DPrime> {
    let r = rates(tally)?;
    d_prime(r.hit_rate, r.false_alarm_rate, Some(tally.detections))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TTestKind {
    WelchUnpaired,
    Paired,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TTestResult {
    pub t: f64,
    pub df: f64,
    pub p_two_tailed: f64,
    pub kind: TTestKind,
}

fn mean_var(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var)
}

fn two_tailed(t: f64, df: f64) -> f64 {
    (2.0 * t_sf(t.abs(), df)).min(1.0)
}

/// Unequal-variance two-sample t-test with Welch–Satterthwaite degrees of freedom.
pub fn welch_t(a: &[f64], b: &[f64]) -> Result<TTestResult> {
    if a.len() < 2 || b.len() < 2 {
        return Err(MetricsError::DegenerateSample("each sample needs at least 2 values".into()));
    }
    let (ma, va) = mean_var(a);
    let (mb, vb) = mean_var(b);
    let (sa, sb) = (va / a.len() as f64, vb / b.len() as f64);
    if sa + sb <= 0.0 {
        return Err(MetricsError::DegenerateSample("both samples have zero variance".into()));
    }
    let t = (ma - mb) / (sa + sb).sqrt();
    let df = (sa + sb).powi(2) / (sa * sa / (a.len() as f64 - 1.0) + sb * sb / (b.len() as f64 - 1.0));
    Ok(TTestResult { t, df, p_two_tailed: two_tailed(t, df), kind: TTestKind::WelchUnpaired })
}

/// Paired t-test on the differences `y − x`.
pub fn paired_t(pairs: &[(f64, f64)]) -> Result<TTestResult> {
    if pairs.len() < 2 {
        return Err(MetricsError::DegenerateSample("need at least 2 pairs".into()));
    }
    let d: Vec<f64> = pairs.iter().map(|(x, y)| y - x).collect();
    let (m, v) = mean_var(&d);
    if v <= 0.0 {
        return Err(MetricsError::DegenerateSample("differences have zero variance".into()));
    }
    let df = d.len() as f64 - 1.0;
    let t = m / (v / d.len() as f64).sqrt();
    Ok(TTestResult { t, df, p_two_tailed: two_tailed(t, df), kind: TTestKind::Paired })
}

/// Upper-tail probability P(T > t) of Student's t with `df` degrees of freedom.
pub fn t_sf(t: f64, df: f64) -> f64 {
    assert!(df > 0.0, "degrees of freedom must be positive");
    if t.is_nan() {
        return f64::NAN;
    }
    if t == f64::INFINITY {
        return 0.0;
    }
    if t == f64::NEG_INFINITY {
        return 1.0;
    }
    let x = df / (df + t * t);
    let tail = 0.5 * regularized_beta(x, df / 2.0, 0.5);
    if t >= 0.0 { tail } else { 1.0 - tail }
}

/// Natural log of the gamma function (Lanczos, g = 7, n = 9).
pub fn ln_gamma(x: f64) -> f64 {
    const G: f64 = 7.0;
    const COEF: [f64; 9] = [
        0.999_999_999_999_809_9,
        676.520_368_121_885_1,
        -1_259.139_216_722_402_8,
        771.323_428_777_653_1,
        -176.615_029_162_140_6,
        12.507_343_278_686_905,
        -0.138_571_095_265_720_12,
        9.984_369_578_019_572e-6,
        1.505_632_735_149_311_6e-7,
    ];
    if x < 0.5 {
        let pi = std::f64::consts::PI;
        return (pi / (pi * x).sin()).ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut a = COEF[0];
    let t = x + G + 0.5;
    for (i, &c) in COEF.iter().enumerate().skip(1) {
        a += c / (x + i as f64);
    }
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + a.ln()
}

/// Regularized incomplete beta I_x(a, b).
pub fn regularized_beta(x: f64, a: f64, b: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    if x >= 1.0 {
        return 1.0;
    }
    let ln_front = ln_gamma(a + b) - ln_gamma(a) - ln_gamma(b) + a * x.ln() + b * (1.0 - x).ln();
    if x < (a + 1.0) / (a + b + 2.0) {
        ln_front.exp() * beta_cf(x, a, b) / a
    } else {
        1.0 - ln_front.exp() * beta_cf(1.0 - x, b, a) / b
    }
}

/// Continued fraction for the incomplete beta (modified Lentz).
fn beta_cf(x: f64, a: f64, b: f64) -> f64 {
    const TINY: f64 = 1e-300;
    const EPS: f64 = 1e-16;
    let (qab, qap, qam) = (a + b, a + 1.0, a - 1.0);
    let mut c = 1.0;
    let mut d = 1.0 - qab * x / qap;
    if d.abs() < TINY {
        d = TINY;
    }
    d = 1.0 / d;
    let mut h = d;
    for m in 1..=1000 {
        let m = m as f64;
        let m2 = 2.0 * m;
        let aa = m * (b - m) * x / ((qam + m2) * (a + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        h *= d * c;
        let aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        let del = d * c;
        h *= del;
        if (del - 1.0).abs() < EPS {
            break;
        }
    }
    h
}

pub fn proportion_correct(predicted: &[CallLabel], truth: &[CallLabel]) -> Result<f64> {
    if predicted.len() != truth.len() {
        return Err(MetricsError::LengthMismatch(predicted.len(), truth.len()));
    }
    if predicted.is_empty() {
        return Err(MetricsError::Empty);
    }
    let correct = predicted.iter().zip(truth).filter(|(p, t)| p == t).count();
    Ok(correct as f64 / predicted.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneralizationResult {
    pub per_recording: Vec<f64>,
    pub mean: f64,
    /// Sample standard deviation over √n; 0 for a single recording.
    pub sem: f64,
}

pub fn generalization(per_recording: &[f64]) -> Result<GeneralizationResult> {
    if per_recording.is_empty() {
        return Err(MetricsError::Empty);
    }
    if let Some(&bad) = per_recording.iter().find(|p| !(0.0..=1.0).contains(*p)) {
        return Err(MetricsError::OutOfRange(bad));
    }
    let n = per_recording.len() as f64;
    let mean = per_recording.iter().sum::<f64>() / n;
    let sem = if per_recording.len() > 1 { (mean_var(per_recording).1 / n).sqrt() } else { 0.0 };
    Ok(GeneralizationResult { per_recording: per_recording.to_vec(), mean, sem })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecordingScore {
    pub recording: String,
    pub tally: OutcomeTally,
    pub rates: Option<RatesReport>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub tally: OutcomeTally,
    pub rates: Option<RatesReport>,
    pub d_prime: Option<DPrime>,
    pub per_recording: Vec<RecordingScore>,
    pub tests: Vec<TTestResult>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub generalization: Option<GeneralizationResult>,
}

impl EvaluationReport {
    /// Pools per-recording tallies and derives rates and d′ where defined.
    pub fn from_recordings(per_recording: Vec<RecordingScore>) -> Self {
        let tally = per_recording.iter().fold(OutcomeTally::default(), |acc, r| acc.merged(&r.tally));
        Self { tally, rates: rates(&tally).ok(), d_prime: d_prime_of(&tally).ok(), per_recording, tests: vec![], generalization: None }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// One row per recording plus a pooled `ALL` row.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("recording,detections,hits,false_alarms,misses,hit_rate,false_alarm_rate,miss_rate,d_prime\n");
        let fmt = |v: Option<f64>| v.map(|v| format!("{v:.6}")).unwrap_or_default();
        let mut row = |name: &str, t: &OutcomeTally, r: Option<&RatesReport>, d: Option<f64>| {
            let _ = writeln!(
                out,
                "{name},{},{},{},{},{},{},{},{}",
                t.detections,
                t.hits,
                t.false_alarms,
                t.misses,
                fmt(r.map(|r| r.hit_rate)),
                fmt(r.map(|r| r.false_alarm_rate)),
                fmt(r.map(|r| r.miss_rate)),
                fmt(d)
            );
        };
        for r in &self.per_recording {
            row(&r.recording, &r.tally, r.rates.as_ref(), d_prime_of(&r.tally).ok().map(|d| d.value));
        }
        row("ALL", &self.tally, self.rates.as_ref(), self.d_prime.map(|d| d.value));
        out
    }
}
