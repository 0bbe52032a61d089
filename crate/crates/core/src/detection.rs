//! Call segmentation: an adaptive local-median noise floor, thresholding,
//! morphological opening, 8-connected components and band/duration gating.
//!
//! [`baseline_detect`] swaps the adaptive floor for a single global
//! percentile threshold and serves as the weaker comparison detector.

use std::collections::VecDeque;
use std::io::Write;

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::audio::AudioClip;
use crate::spectrogram::{compute_spectrogram, Spectrogram, SpectrogramError, SpectrogramParams, TimeFreqBox};

#[derive(Debug, Error)]
pub enum DetectionError {
    #[error("shape mismatch: spectrogram {spec:?} vs floor {floor:?}")]
    ShapeMismatch { spec: (usize, usize), floor: (usize, usize) },
    #[error("invalid detection config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Spectrogram(#[from] SpectrogramError),
}

pub type Result<T> = std::result::Result<T, DetectionError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Band {
    Low,
    High,
}

/// Frequency bands in Hz. The low band is half-open at its top so a
/// centroid on the shared edge belongs to the high band.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BandLimits {
    pub low_band: (f64, f64),
    pub high_band: (f64, f64),
}

impl Default for BandLimits {
    fn default() -> Self {
        Self { low_band: (18_000.0, 30_000.0), high_band: (30_000.0, 90_000.0) }
    }
}

impl BandLimits {
    pub fn classify(&self, freq_hz: f64) -> Option<Band> {
        if freq_hz >= self.low_band.0 && freq_hz < self.low_band.1 {
            Some(Band::Low)
        } else if freq_hz >= self.high_band.0 && freq_hz <= self.high_band.1 {
            Some(Band::High)
        } else {
            None
        }
    }

    fn validate(&self) -> Result<()> {
        let (l, h) = (self.low_band, self.high_band);
        if !(l.0 > 0.0 && l.0 < l.1 && l.1 == h.0 && h.0 < h.1) {
            return Err(DetectionError::InvalidConfig(format!("band limits {l:?} / {h:?} must be positive, increasing and adjacent")));
        }
        Ok(())
    }
}

/// Accepted call durations per band, milliseconds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DurationLimits {
    pub high_band_ms: (f64, f64),
    pub low_band_ms: (f64, f64),
}

impl Default for DurationLimits {
    fn default() -> Self {
        Self { high_band_ms: (5.0, 300.0), low_band_ms: (300.0, 3500.0) }
    }
}

impl DurationLimits {
    pub fn for_band(&self, band: Band) -> (f64, f64) {
        match band {
            Band::Low => self.low_band_ms,
            Band::High => self.high_band_ms,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DetectionConfig {
    /// Median window as (frames, bins); both odd.
    pub median_window: (usize, usize),
    pub threshold_offset_db: f64,
    pub open_radius: usize,
    pub min_area: usize,
    pub bands: BandLimits,
    pub durations: DurationLimits,
    /// Components closer than this in time (ms) are joined into one call when
    /// their frequency ranges are within `merge_max_freq_gap_hz`. At 0 only
    /// components overlapping or abutting in time join, so a silent gap always
    /// separates calls.
    pub merge_gap_ms: f64,
    pub merge_max_freq_gap_hz: f64,
    /// Drop candidates whose Noise probability under a classifier reaches
    /// this value. Needs a model, see `pipeline::detect_screened`.
    pub noise_screen: Option<f64>,
}

impl Default for DetectionConfig {
    fn default() -> Self {
        Self {
            median_window: (7, 41),
            threshold_offset_db: 6.0,
            open_radius: 1,
            min_area: 12,
            bands: BandLimits::default(),
            durations: DurationLimits::default(),
            merge_gap_ms: 0.0,
            merge_max_freq_gap_hz: 20_000.0,
            noise_screen: None,
        }
    }
}

impl DetectionConfig {
    pub fn validate(&self) -> Result<()> {
        let (wt, wf) = self.median_window;
        if wt % 2 == 0 || wf % 2 == 0 {
            return Err(DetectionError::InvalidConfig(format!("median window {wt}x{wf} must be odd in both axes")));
        }
        if !(self.threshold_offset_db > 0.0) {
            return Err(DetectionError::InvalidConfig("threshold offset must be positive".into()));
        }
        self.bands.validate()?;
        if !(self.merge_gap_ms >= 0.0 && self.merge_max_freq_gap_hz >= 0.0) {
            return Err(DetectionError::InvalidConfig("merge limits must be non-negative".into()));
        }
        for (lo, hi) in [self.durations.high_band_ms, self.durations.low_band_ms] {
            if !(lo > 0.0 && lo < hi) {
                return Err(DetectionError::InvalidConfig(format!("duration limits ({lo}, {hi}) must satisfy 0 < min < max")));
            }
        }
        Ok(())
    }
}

/// Foreground mask over spectrogram cells, indexed `[frame, bin]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMask(pub Array2<bool>);

impl BinaryMask {
    pub fn empty(frames: usize, bins: usize) -> Self {
        Self(Array2::from_elem((frames, bins), false))
    }

    pub fn dim(&self) -> (usize, usize) {
        self.0.dim()
    }

    pub fn count(&self) -> usize {
        self.0.iter().filter(|&&v| v).count()
    }

    pub fn is_subset_of(&self, other: &BinaryMask) -> bool {
        self.dim() == other.dim() && self.0.iter().zip(other.0.iter()).all(|(&a, &b)| !a || b)
    }
}

/// One connected group of foreground cells as `(frame, bin)` in scan order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Segment {
    pub pixels: Vec<(usize, usize)>,
}

impl Segment {
    pub fn area(&self) -> usize {
        self.pixels.len()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CallCandidate {
    pub source_id: String,
    pub t_start: f64,
    pub t_end: f64,
    pub f_min: f64,
    pub f_max: f64,
    pub peak_db: f64,
    pub band: Band,
    #[serde(skip)]
    pub pixel_mask: Vec<(usize, usize)>,
}

impl CallCandidate {
    pub fn bbox(&self) -> TimeFreqBox {
        TimeFreqBox::new(self.t_start, self.t_end, self.f_min, self.f_max)
    }

    pub fn duration_ms(&self) -> f64 {
        (self.t_end - self.t_start) * 1000.0
    }
}

/// Windowed median with replicated borders. `window` is (frames, bins), odd.
///
/// Exact: values get a monotone 16-bit code, and a sliding two-level histogram
/// locates the code holding the median rank. Each code also keeps the XOR of
/// its members' bit patterns, which is the member itself when the code holds a
/// single value; otherwise the window is scanned for that code.
pub fn local_median_floor(values: &Array2<f64>, window: (usize, usize)) -> Array2<f64> {
    let (frames, bins) = values.dim();
    let mut out = Array2::zeros((frames, bins));
    if frames == 0 || bins == 0 {
        return out;
    }
    let values = values.as_standard_layout();
    let vals = values.as_slice().expect("standard layout");
    let (lo, hi) = vals.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &v| (l.min(v), h.max(v)));
    let scale = if hi > lo { 65535.0 / (hi - lo) } else { 0.0 };
    let codes: Vec<u16> = vals.iter().map(|&v| (((v - lo) * scale) as usize).min(65535) as u16).collect();
    let (ht, hf) = (window.0 as isize / 2, window.1 as isize / 2);
    let clamp = |i: isize, n: usize| i.clamp(0, n as isize - 1) as usize;
    let k = window.0 * window.1 / 2;
    let cols: Vec<usize> = (-hf..bins as isize + hf).map(|b| clamp(b, bins)).collect();

    let mut coarse = [0u32; 256];
    let mut fine = vec![0u32; 65536];
    let mut xor = vec![0u64; 65536];
    let mut buf = Vec::with_capacity(window.0 * window.1);
    let mut rows = Vec::with_capacity(window.0);
    let add = |i: usize, coarse: &mut [u32; 256], fine: &mut [u32], xor: &mut [u64]| {
        let c = codes[i] as usize;
        coarse[c >> 8] += 1;
        fine[c] += 1;
        xor[c] ^= vals[i].to_bits();
    };
    let remove = |i: usize, coarse: &mut [u32; 256], fine: &mut [u32], xor: &mut [u64]| {
        let c = codes[i] as usize;
        coarse[c >> 8] -= 1;
        fine[c] -= 1;
        xor[c] ^= vals[i].to_bits();
    };

    for f in 0..frames {
        rows.clear();
        rows.extend((-ht..=ht).map(|d| clamp(f as isize + d, frames) * bins));
        for &r in &rows {
            for &c in &cols[..window.1] {
                add(r + c, &mut coarse, &mut fine, &mut xor);
            }
        }
        let (mut m, mut below) = (0usize, 0usize);
        for b in 0..bins {
            if b > 0 {
                let (leaving, entering) = (cols[b - 1], cols[b - 1 + window.1]);
                if leaving != entering {
                    for &r in &rows {
                        remove(r + leaving, &mut coarse, &mut fine, &mut xor);
                        add(r + entering, &mut coarse, &mut fine, &mut xor);
                        if (codes[r + leaving] as usize >> 8) < m {
                            below -= 1;
                        }
                        if (codes[r + entering] as usize >> 8) < m {
                            below += 1;
                        }
                    }
                }
            }
            while below > k {
                m -= 1;
                below -= coarse[m] as usize;
            }
            while below + coarse[m] as usize <= k {
                below += coarse[m] as usize;
                m += 1;
            }
            let mut acc = below;
            let mut code = m << 8;
            while acc + fine[code] as usize <= k {
                acc += fine[code] as usize;
                code += 1;
            }
            out[[f, b]] = if fine[code] == 1 {
                f64::from_bits(xor[code])
            } else {
                buf.clear();
                for &r in &rows {
                    for &c in &cols[b..b + window.1] {
                        if codes[r + c] as usize == code {
                            buf.push(vals[r + c]);
                        }
                    }
                }
                *buf.select_nth_unstable_by(k - acc, f64::total_cmp).1
            };
        }
        for &r in &rows {
            for &c in &cols[bins - 1..bins - 1 + window.1] {
                remove(r + c, &mut coarse, &mut fine, &mut xor);
            }
        }
    }
    out
}

/// `mask[i, j] = power[i, j] > floor[i, j] + offset_db`.
pub fn binarize(power_db: &Array2<f64>, floor: &Array2<f64>, offset_db: f64) -> Result<BinaryMask> {
    if power_db.dim() != floor.dim() {
        return Err(DetectionError::ShapeMismatch { spec: power_db.dim(), floor: floor.dim() });
    }
    let mut mask = Array2::from_elem(power_db.raw_dim(), false);
    ndarray::Zip::from(&mut mask).and(power_db).and(floor).for_each(|m, &p, &fl| *m = p > fl + offset_db);
    Ok(BinaryMask(mask))
}

/// Cells of the cross (plus-shaped) structuring element of the given radius.
fn cross_offsets(radius: usize) -> Vec<(isize, isize)> {
    let r = radius as isize;
    let mut offs = vec![(0, 0)];
    for d in 1..=r {
        offs.extend([(d, 0), (-d, 0), (0, d), (0, -d)]);
    }
    offs
}

/// Erosion with a cross; cells beyond the border count as background.
pub fn erode(mask: &BinaryMask, radius: usize) -> BinaryMask {
    let (n, m) = mask.dim();
    let offs = cross_offsets(radius);
    let src = &mask.0;
    BinaryMask(Array2::from_shape_fn((n, m), |(i, j)| {
        src[[i, j]]
            && offs.iter().all(|&(di, dj)| {
                let (a, b) = (i as isize + di, j as isize + dj);
                a >= 0 && b >= 0 && (a as usize) < n && (b as usize) < m && src[[a as usize, b as usize]]
            })
    }))
}

pub fn dilate(mask: &BinaryMask, radius: usize) -> BinaryMask {
    let (n, m) = mask.dim();
    let offs = cross_offsets(radius);
    let mut out = Array2::from_elem((n, m), false);
    for ((i, j), &v) in mask.0.indexed_iter() {
        if !v {
            continue;
        }
        for &(di, dj) in &offs {
            let (a, b) = (i as isize + di, j as isize + dj);
            if a >= 0 && b >= 0 && (a as usize) < n && (b as usize) < m {
                out[[a as usize, b as usize]] = true;
            }
        }
    }
    BinaryMask(out)
}

/// Erosion followed by dilation with a cross of the given radius.
pub fn morphological_open(mask: &BinaryMask, radius: usize) -> BinaryMask {
    if radius == 0 {
        return mask.clone();
    }
    dilate(&erode(mask, radius), radius)
}

/// 8-connected components, ordered by their first cell in scan order.
pub fn connected_components(mask: &BinaryMask) -> Vec<Segment> {
    let (n, m) = mask.dim();
    let mut seen = Array2::from_elem((n, m), false);
    let mut segments = Vec::new();
    let mut queue = VecDeque::new();
    for i in 0..n {
        for j in 0..m {
            if !mask.0[[i, j]] || seen[[i, j]] {
                continue;
            }
            seen[[i, j]] = true;
            queue.push_back((i, j));
            let mut pixels = Vec::new();
            while let Some((a, b)) = queue.pop_front() {
                pixels.push((a, b));
                for da in -1isize..=1 {
                    for db in -1isize..=1 {
                        let (x, y) = (a as isize + da, b as isize + db);
                        if x < 0 || y < 0 || x as usize >= n || y as usize >= m {
                            continue;
                        }
                        let (x, y) = (x as usize, y as usize);
                        if mask.0[[x, y]] && !seen[[x, y]] {
                            seen[[x, y]] = true;
                            queue.push_back((x, y));
                        }
                    }
                }
            }
            pixels.sort_unstable();
            segments.push(Segment { pixels });
        }
    }
    segments
}

/// Map segments to time/frequency boxes and keep those passing area, band and
/// duration gates. Output is sorted by start time.
pub fn segments_to_candidates(segments: &[Segment], spec: &Spectrogram, config: &DetectionConfig) -> Vec<CallCandidate> {
    let mut out = Vec::new();
    for seg in segments {
        if seg.area() < config.min_area || seg.area() == 0 {
            continue;
        }
        let (mut f_lo, mut f_hi) = (usize::MAX, 0);
        let (mut b_lo, mut b_hi) = (usize::MAX, 0);
        let mut bin_sum = 0.0;
        let mut peak = f64::NEG_INFINITY;
        for &(f, b) in &seg.pixels {
            f_lo = f_lo.min(f);
            f_hi = f_hi.max(f);
            b_lo = b_lo.min(b);
            b_hi = b_hi.max(b);
            bin_sum += b as f64;
            peak = peak.max(spec.power_db[[f, b]]);
        }
        let centroid_hz = spec.bin_freq(bin_sum / seg.area() as f64);
        let Some(band) = config.bands.classify(centroid_hz) else { continue };
        let t_start = spec.frame_time(f_lo as f64) - spec.hop_s / 2.0;
        let t_end = spec.frame_time(f_hi as f64) + spec.hop_s / 2.0;
        let duration_ms = (t_end - t_start) * 1000.0;
        let (lo, hi) = config.durations.for_band(band);
        if duration_ms < lo || duration_ms > hi {
            continue;
        }
        out.push(CallCandidate {
            source_id: spec.source_id.clone(),
            t_start: t_start.max(0.0),
            t_end,
            f_min: spec.bin_freq(b_lo as f64 - 0.5).max(0.0),
            f_max: spec.bin_freq(b_hi as f64 + 0.5),
            peak_db: peak,
            band,
            pixel_mask: seg.pixels.clone(),
        });
    }
    out.sort_by(|a, b| a.t_start.total_cmp(&b.t_start));
    out
}

/// Joins segments of at least `config.min_area` pixels that touch in time
/// (see [`DetectionConfig::merge_gap_ms`]). Smaller segments pass through unchanged.
pub fn merge_touching(segments: Vec<Segment>, spec: &Spectrogram, config: &DetectionConfig) -> Vec<Segment> {
    let gap_frames = (config.merge_gap_ms / 1000.0 / spec.hop_s).floor() as usize + 1;
    let gap_bins = config.merge_max_freq_gap_hz / spec.bin_hz;
    let extent = |s: &Segment| {
        let mut e = (usize::MAX, 0, usize::MAX, 0);
        for &(f, b) in &s.pixels {
            e = (e.0.min(f), e.1.max(f), e.2.min(b), e.3.max(b));
        }
        e
    };
    let (big, mut out): (Vec<Segment>, Vec<Segment>) = segments.into_iter().partition(|s| s.area() >= config.min_area.max(1));
    let ext: Vec<_> = big.iter().map(extent).collect();
    let mut order: Vec<usize> = (0..big.len()).collect();
    order.sort_by_key(|&i| (ext[i].0, i));
    let mut parent: Vec<usize> = (0..big.len()).collect();
    fn find(p: &mut [usize], mut i: usize) -> usize {
        while p[i] != i {
            p[i] = p[p[i]];
            i = p[i];
        }
        i
    }
    for (k, &i) in order.iter().enumerate() {
        for &j in &order[k + 1..] {
            if ext[j].0 > ext[i].1 + gap_frames {
                break;
            }
            let freq_gap = ext[i].2.max(ext[j].2).saturating_sub(ext[i].3.min(ext[j].3));
            if freq_gap as f64 <= gap_bins + 1.0 {
                let (a, b) = (find(&mut parent, i), find(&mut parent, j));
                parent[a.max(b)] = a.min(b);
            }
        }
    }
    let mut groups: std::collections::BTreeMap<usize, Vec<(usize, usize)>> = std::collections::BTreeMap::new();
    for (i, seg) in big.into_iter().enumerate() {
        let root = find(&mut parent, i);
        groups.entry(root).or_default().extend(seg.pixels);
    }
    for (_, mut pixels) in groups {
        pixels.sort_unstable();
        out.push(Segment { pixels });
    }
    out.sort_by_key(|s| s.pixels.first().copied());
    out
}

fn run_from_floor(spec: &Spectrogram, floor: &Array2<f64>, offset_db: f64, config: &DetectionConfig) -> Result<Vec<CallCandidate>> {
    let mask = binarize(&spec.power_db, floor, offset_db)?;
    let opened = morphological_open(&mask, config.open_radius);
    let segments = merge_touching(connected_components(&opened), spec, config);
    Ok(segments_to_candidates(&segments, spec, config))
}

/// Full pipeline on an already computed spectrogram.
pub fn detect_in_spectrogram(spec: &Spectrogram, config: &DetectionConfig) -> Result<Vec<CallCandidate>> {
    config.validate()?;
    let floor = local_median_floor(&spec.power_db, config.median_window);
    run_from_floor(spec, &floor, config.threshold_offset_db, config)
}

pub fn detect(clip: &AudioClip, params: &SpectrogramParams, config: &DetectionConfig) -> Result<Vec<CallCandidate>> {
    let spec = compute_spectrogram(clip, params)?;
    detect_in_spectrogram(&spec, config)
}

/// Value below which `fraction` of the cells fall (nearest-rank).
pub fn percentile(values: &Array2<f64>, fraction: f64) -> f64 {
    let mut v: Vec<f64> = values.iter().copied().collect();
    if v.is_empty() {
        return f64::NAN;
    }
    let rank = ((fraction * v.len() as f64).ceil() as usize).clamp(1, v.len()) - 1;
    let (_, nth, _) = v.select_nth_unstable_by(rank, f64::total_cmp);
    *nth
}

/// Global-threshold detector: cells strictly above the `percentile` power level.
pub fn baseline_detect_in_spectrogram(spec: &Spectrogram, percentile_frac: f64, config: &DetectionConfig) -> Result<Vec<CallCandidate>> {
    if !(percentile_frac > 0.0 && percentile_frac < 1.0) {
        return Err(DetectionError::InvalidConfig(format!("percentile {percentile_frac} must lie in (0, 1)")));
    }
    let level = percentile(&spec.power_db, percentile_frac);
    let floor = Array2::from_elem(spec.power_db.raw_dim(), level);
    run_from_floor(spec, &floor, 0.0, config)
}

pub fn baseline_detect(clip: &AudioClip, params: &SpectrogramParams, percentile_frac: f64) -> Result<Vec<CallCandidate>> {
    let spec = compute_spectrogram(clip, params)?;
    baseline_detect_in_spectrogram(&spec, percentile_frac, &DetectionConfig::default())
}

pub const DEFAULT_BASELINE_PERCENTILE: f64 = 0.95;

/// One JSON object per line: `{source_id, t_start, t_end, f_min, f_max, peak_db, band}`.
pub fn write_candidates_jsonl<W: Write>(mut w: W, candidates: &[CallCandidate]) -> std::io::Result<()> {
    for c in candidates {
        serde_json::to_writer(&mut w, c)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_candidates_jsonl(text: &str) -> serde_json::Result<Vec<CallCandidate>> {
    text.lines().filter(|l| !l.trim().is_empty()).map(serde_json::from_str).collect()
}
