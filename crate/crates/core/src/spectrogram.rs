//! Short-time Fourier transform, decibel conversion and classifier tiles.

use std::io::Cursor;
use std::path::Path;

use ndarray::Array2;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::audio::AudioClip;

#[derive(Debug, Error)]
pub enum SpectrogramError {
    #[error("invalid spectrogram parameters: {0}")]
    InvalidParams(String),
    #[error("clip of {len} samples is shorter than the {window_len}-sample window")]
    TooShort { len: usize, window_len: usize },
    #[error("box does not select any part of the spectrogram")]
    EmptyBox,
    #[error("image error: {0}")]
    Image(String),
    #[error("i/o failure: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, SpectrogramError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WindowKind {
    Rectangular,
    Hann,
}

impl WindowKind {
    /// Periodic window coefficients.
    pub fn coefficients(self, len: usize) -> Vec<f64> {
        match self {
            WindowKind::Rectangular => vec![1.0; len],
            WindowKind::Hann => (0..len)
                .map(|n| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * n as f64 / len as f64).cos())
                .collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SpectrogramParams {
    pub window_len: usize,
    pub hop: usize,
    pub fft_len: usize,
    pub window_kind: WindowKind,
    pub db_floor: f64,
}

impl Default for SpectrogramParams {
    /// 2.048 ms Hann frames at 250 kHz with a 0.512 ms hop; 488.3 Hz bins.
    fn default() -> Self {
        Self { window_len: 512, hop: 128, fft_len: 512, window_kind: WindowKind::Hann, db_floor: -90.0 }
    }
}

impl SpectrogramParams {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(SpectrogramError::InvalidParams(m.into()));
        if self.window_len == 0 {
            return bad("window_len must be positive");
        }
        if self.window_len > self.fft_len {
            return bad("window_len must not exceed fft_len");
        }
        if self.hop == 0 {
            return bad("hop must be at least 1");
        }
        if !(self.db_floor < 0.0) {
            return bad("db_floor must be negative");
        }
        Ok(())
    }

    pub fn bins(&self) -> usize {
        self.fft_len / 2 + 1
    }

    /// Stable textual digest, used as a cache key.
    pub fn digest(&self) -> String {
        format!("{}-{}-{}-{:?}-{}", self.window_len, self.hop, self.fft_len, self.window_kind, self.db_floor)
    }
}

/// Axis-aligned time–frequency rectangle in seconds and Hz.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimeFreqBox {
    pub t_start: f64,
    pub t_end: f64,
    pub f_min: f64,
    pub f_max: f64,
}

impl TimeFreqBox {
    pub fn new(t_start: f64, t_end: f64, f_min: f64, f_max: f64) -> Self {
        Self { t_start, t_end, f_min, f_max }
    }

    pub fn duration(&self) -> f64 {
        self.t_end - self.t_start
    }

    pub fn bandwidth(&self) -> f64 {
        self.f_max - self.f_min
    }

    pub fn is_well_formed(&self) -> bool {
        [self.t_start, self.t_end, self.f_min, self.f_max].iter().all(|v| v.is_finite())
            && self.t_end > self.t_start
            && self.f_max >= self.f_min
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Spectrogram {
    /// `[frames × bins]`, decibels relative to a full-scale DC frame.
    pub power_db: Array2<f64>,
    pub bin_hz: f64,
    pub hop_s: f64,
    pub sample_rate_hz: u32,
    pub params: SpectrogramParams,
    pub source_id: String,
}

impl Spectrogram {
    pub fn frames(&self) -> usize {
        self.power_db.nrows()
    }

    pub fn bins(&self) -> usize {
        self.power_db.ncols()
    }

    /// Time of the centre of frame `f` (may be fractional).
    pub fn frame_time(&self, f: f64) -> f64 {
        f * self.hop_s + self.half_window_s()
    }

    /// Fractional frame index whose centre is at time `t`.
    pub fn time_to_frame(&self, t: f64) -> f64 {
        (t - self.half_window_s()) / self.hop_s
    }

    pub fn bin_freq(&self, b: f64) -> f64 {
        b * self.bin_hz
    }

    pub fn freq_to_bin(&self, f: f64) -> f64 {
        f / self.bin_hz
    }

    fn half_window_s(&self) -> f64 {
        self.params.window_len as f64 / 2.0 / self.sample_rate_hz as f64
    }

    pub fn duration_s(&self) -> f64 {
        self.frame_time(self.frames() as f64 - 1.0) + self.half_window_s()
    }

    pub fn nyquist_hz(&self) -> f64 {
        self.sample_rate_hz as f64 / 2.0
    }

    /// Bilinear sample at fractional (frame, bin); cells outside the matrix read as `db_floor`.
    pub fn sample(&self, frame: f64, bin: f64) -> f64 {
        let floor = self.params.db_floor;
        let at = |f: isize, b: isize| -> f64 {
            if f < 0 || b < 0 || f as usize >= self.frames() || b as usize >= self.bins() {
                floor
            } else {
                self.power_db[[f as usize, b as usize]]
            }
        };
        let f0 = frame.floor();
        let b0 = bin.floor();
        let (tf, tb) = (frame - f0, bin - b0);
        let (f0, b0) = (f0 as isize, b0 as isize);
        let top = at(f0, b0) * (1.0 - tb) + at(f0, b0 + 1) * tb;
        let bottom = at(f0 + 1, b0) * (1.0 - tb) + at(f0 + 1, b0 + 1) * tb;
        top * (1.0 - tf) + bottom * tf
    }
}

/// Linear power `|X_k|²` per frame, one-sided (`fft_len/2 + 1` bins), no scaling.
pub fn compute_power(clip: &AudioClip, params: &SpectrogramParams) -> Result<Array2<f64>> {
    params.validate()?;
    let samples = clip.samples();
    if samples.is_empty() || samples.len() < params.window_len {
        return Err(SpectrogramError::TooShort { len: samples.len(), window_len: params.window_len });
    }
    let frames = 1 + (samples.len() - params.window_len) / params.hop;
    let bins = params.bins();
    let window = params.window_kind.coefficients(params.window_len);
    let fft = FftPlanner::<f64>::new().plan_fft_forward(params.fft_len);
    let mut scratch = vec![Complex::new(0.0, 0.0); fft.get_inplace_scratch_len()];
    let mut buf = vec![Complex::new(0.0, 0.0); params.fft_len];
    let mut power = Array2::zeros((frames, bins));
    for f in 0..frames {
        let start = f * params.hop;
        for (i, slot) in buf.iter_mut().enumerate() {
            *slot = if i < params.window_len {
                Complex::new(samples[start + i] as f64 * window[i], 0.0)
            } else {
                Complex::new(0.0, 0.0)
            };
        }
        fft.process_with_scratch(&mut buf, &mut scratch);
        for (k, v) in power.row_mut(f).iter_mut().enumerate() {
            *v = buf[k].norm_sqr();
        }
    }
    Ok(power)
}

/// Power of a full-scale DC frame under the given window: the largest `|X_k|²` any
/// clip with `|x| ≤ 1` can produce.
pub fn reference_power(params: &SpectrogramParams) -> f64 {
    let sum: f64 = params.window_kind.coefficients(params.window_len).iter().sum();
    sum * sum
}

pub fn compute_spectrogram(clip: &AudioClip, params: &SpectrogramParams) -> Result<Spectrogram> {
    let power = compute_power(clip, params)?;
    let reference = reference_power(params);
    let floor = params.db_floor;
    let power_db = power.mapv(|p| if p > 0.0 { (10.0 * (p / reference).log10()).max(floor) } else { floor });
    Ok(Spectrogram {
        power_db,
        bin_hz: clip.sample_rate_hz() as f64 / params.fft_len as f64,
        hop_s: params.hop as f64 / clip.sample_rate_hz() as f64,
        sample_rate_hz: clip.sample_rate_hz(),
        params: params.clone(),
        source_id: clip.source_id().to_string(),
    })
}

/// Single-channel image with intensities in [0, 1]; row 0 is the highest frequency.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectroImage {
    pub pixels: Array2<f64>,
    pub source_box: Option<TimeFreqBox>,
}

impl Default for SpectroImage {
    fn default() -> Self {
        SpectroImage::new(Array2::zeros((0, 0)))
    }
}

impl SpectroImage {
    pub fn new(pixels: Array2<f64>) -> Self {
        Self { pixels, source_box: None }
    }

    pub fn height(&self) -> usize {
        self.pixels.nrows()
    }

    pub fn width(&self) -> usize {
        self.pixels.ncols()
    }

    pub fn min_max(&self) -> (f64, f64) {
        self.pixels.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
    }

    /// Round every pixel to the nearest 8-bit level, so the image survives PNG storage exactly.
    pub fn quantized(&self) -> Self {
        Self { pixels: self.pixels.mapv(|p| (p.clamp(0.0, 1.0) * 255.0).round() / 255.0), source_box: self.source_box }
    }

    pub fn to_png(&self) -> Result<Vec<u8>> {
        let (h, w) = (self.height() as u32, self.width() as u32);
        let raw: Vec<u8> = self.pixels.iter().map(|&p| (p.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
        let img = image::GrayImage::from_raw(w, h, raw).ok_or_else(|| SpectrogramError::Image("bad dimensions".into()))?;
        let mut out = Cursor::new(Vec::new());
        img.write_to(&mut out, image::ImageFormat::Png).map_err(|e| SpectrogramError::Image(e.to_string()))?;
        Ok(out.into_inner())
    }

    pub fn from_png(bytes: &[u8]) -> Result<Self> {
        let img = image::load_from_memory_with_format(bytes, image::ImageFormat::Png)
            .map_err(|e| SpectrogramError::Image(e.to_string()))?
            .into_luma8();
        let (w, h) = img.dimensions();
        let pixels = Array2::from_shape_vec((h as usize, w as usize), img.into_raw().into_iter().map(|v| v as f64 / 255.0).collect())
            .map_err(|e| SpectrogramError::Image(e.to_string()))?;
        Ok(Self::new(pixels))
    }

    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_png()?)?;
        Ok(())
    }

    pub fn load_png(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_png(&std::fs::read(path)?)
    }
}

/// How a call box is framed before resizing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TileParams {
    pub out_size: usize,
    /// Context added on each side, as a fraction of the box extent.
    pub margin_frac: f64,
    /// Lower bounds on the framed region, so that short and long calls keep
    /// their relative scale.
    pub min_time_s: f64,
    pub min_freq_hz: f64,
}

impl Default for TileParams {
    fn default() -> Self {
        Self { out_size: 128, margin_frac: 0.25, min_time_s: 0.04, min_freq_hz: 20_000.0 }
    }
}

impl TileParams {
    pub fn with_size(out_size: usize) -> Self {
        Self { out_size, ..Self::default() }
    }

    /// The region actually rendered for a box.
    pub fn framed_region(&self, b: &TimeFreqBox) -> TimeFreqBox {
        let grow = 1.0 + 2.0 * self.margin_frac;
        let half_t = (b.duration() * grow).max(self.min_time_s) / 2.0;
        let half_f = (b.bandwidth() * grow).max(self.min_freq_hz) / 2.0;
        let tc = (b.t_start + b.t_end) / 2.0;
        let fc = (b.f_min + b.f_max) / 2.0;
        TimeFreqBox::new(tc - half_t, tc + half_t, fc - half_f, fc + half_f)
    }
}

/// Render `region` of the spectrogram to an `height × width` grid of dB values
/// sampled at pixel centres.
fn sample_region(spec: &Spectrogram, region: &TimeFreqBox, height: usize, width: usize) -> Array2<f64> {
    let cols: Vec<f64> = (0..width)
        .map(|c| spec.time_to_frame(region.t_start + (c as f64 + 0.5) / width as f64 * region.duration()))
        .collect();
    Array2::from_shape_fn((height, width), |(r, c)| {
        let f = region.f_max - (r as f64 + 0.5) / height as f64 * region.bandwidth();
        spec.sample(cols[c], spec.freq_to_bin(f))
    })
}

fn min_max_normalize(values: Array2<f64>) -> Array2<f64> {
    let (lo, hi) = values.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    if !(hi > lo) {
        return Array2::zeros(values.raw_dim());
    }
    let span = hi - lo;
    values.mapv(|v| ((v - lo) / span).clamp(0.0, 1.0))
}

/// Fixed-size tile centred on `call`, min–max normalized. A constant region yields all zeros.
pub fn extract_tile(spec: &Spectrogram, call: &TimeFreqBox, params: &TileParams) -> Result<SpectroImage> {
    if !call.is_well_formed() || params.out_size == 0 {
        return Err(SpectrogramError::EmptyBox);
    }
    let extent_t = spec.duration_s();
    let intersects =
        call.t_end >= 0.0 && call.t_start <= extent_t && call.f_max >= 0.0 && call.f_min <= spec.nyquist_hz();
    if !intersects {
        return Err(SpectrogramError::EmptyBox);
    }
    let region = params.framed_region(call);
    let raw = sample_region(spec, &region, params.out_size, params.out_size);
    Ok(SpectroImage { pixels: min_max_normalize(raw), source_box: Some(*call) })
}

/// Tile for `call` computed from only the audio around it. The excerpt starts
/// on the recording's hop grid, so frames coincide with those of the full
/// recording's spectrogram.
pub fn tile_from_clip(clip: &AudioClip, call: &TimeFreqBox, spec_params: &SpectrogramParams, tile_params: &TileParams) -> Result<SpectroImage> {
    let (spec, offset_s) = excerpt_around(clip, &tile_params.framed_region(call), spec_params)?;
    let shifted = TimeFreqBox::new(call.t_start - offset_s, call.t_end - offset_s, call.f_min, call.f_max);
    let mut tile = extract_tile(&spec, &shifted, tile_params)?;
    tile.source_box = Some(*call);
    Ok(tile)
}

/// Spectrogram of the hop-aligned excerpt covering `region` plus one frame on
/// each side, and the excerpt's start time.
pub fn excerpt_around(clip: &AudioClip, region: &TimeFreqBox, params: &SpectrogramParams) -> Result<(Spectrogram, f64)> {
    params.validate()?;
    let sr = clip.sample_rate_hz() as f64;
    if clip.len() < params.window_len {
        return Err(SpectrogramError::TooShort { len: clip.len(), window_len: params.window_len });
    }
    let n_frames = 1 + (clip.len() - params.window_len) / params.hop;
    let half = params.window_len as f64 / 2.0;
    let frame_of = |t: f64| (t * sr - half) / params.hop as f64;
    let first = (frame_of(region.t_start).floor() - 1.0).clamp(0.0, (n_frames - 1) as f64) as usize;
    let last = (frame_of(region.t_end).ceil() + 1.0).clamp(first as f64, (n_frames - 1) as f64) as usize;
    let start = first * params.hop;
    let end = last * params.hop + params.window_len;
    let excerpt = AudioClip::new(clip.samples()[start..end].to_vec(), clip.sample_rate_hz(), clip.source_id())
        .expect("samples of a valid clip are valid");
    Ok((compute_spectrogram(&excerpt, params)?, start as f64 / sr))
}

/// Render a strip for display: dB mapped linearly from `db_floor` (black) to 0 dB (white).
pub fn render_region(spec: &Spectrogram, region: &TimeFreqBox, width: usize, height: usize) -> Result<SpectroImage> {
    if !region.is_well_formed() || region.bandwidth() <= 0.0 || width == 0 || height == 0 {
        return Err(SpectrogramError::EmptyBox);
    }
    let floor = spec.params.db_floor;
    let raw = sample_region(spec, region, height, width);
    Ok(SpectroImage { pixels: raw.mapv(|v| ((v - floor) / -floor).clamp(0.0, 1.0)), source_box: Some(*region) })
}

/// Bilinear resize with corner-aligned sampling grids.
pub fn resize_bilinear(img: &SpectroImage, out: usize) -> SpectroImage {
    let (h, w) = (img.height(), img.width());
    if h == out && w == out {
        return img.clone();
    }
    let coord = |i: usize, n_in: usize| -> f64 {
        if out <= 1 || n_in <= 1 {
            0.0
        } else {
            i as f64 * (n_in - 1) as f64 / (out - 1) as f64
        }
    };
    let src = &img.pixels;
    let pixels = Array2::from_shape_fn((out, out), |(r, c)| {
        let y = coord(r, h);
        let x = coord(c, w);
        let (y0, x0) = (y.floor() as usize, x.floor() as usize);
        let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
        let (ty, tx) = (y - y0 as f64, x - x0 as f64);
        let top = src[[y0, x0]] * (1.0 - tx) + src[[y0, x1]] * tx;
        let bottom = src[[y1, x0]] * (1.0 - tx) + src[[y1, x1]] * tx;
        top * (1.0 - ty) + bottom * ty
    });
    SpectroImage { pixels, source_box: img.source_box }
}
