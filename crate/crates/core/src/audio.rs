//! Uncompressed WAV reading/writing and clip slicing.
//!
//! Only 16-bit integer PCM (format code 1) and 32-bit IEEE float (format
//! code 3) are accepted. Multi-channel files are never mixed down: the
//! caller selects one channel. Nothing is resampled.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::sync::Arc;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum AudioError {
    #[error("malformed WAV: {0}")]
    MalformedWav(String),
    #[error("unsupported encoding: format code {format_code}, {bits} bits per sample")]
    UnsupportedEncoding { format_code: u16, bits: u16 },
    #[error("channel {channel} out of range ({channels} channels)")]
    ChannelOutOfRange { channel: usize, channels: usize },
    #[error("invalid samples: {0}")]
    InvalidSamples(String),
    #[error("slice [{t0}, {t1}) outside clip of {duration} s")]
    RangeError { t0: f64, t1: f64, duration: f64 },
    #[error("i/o failure: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, AudioError>;

/// Mono audio buffer with amplitudes in [-1, 1].
///
/// Cloning is cheap; the sample buffer is shared.
#[derive(Debug, Clone, PartialEq)]
pub struct AudioClip {
    samples: Arc<[f32]>,
    sample_rate_hz: u32,
    source_id: String,
}

impl AudioClip {
    pub fn new(samples: Vec<f32>, sample_rate_hz: u32, source_id: impl Into<String>) -> Result<Self> {
        if sample_rate_hz == 0 {
            return Err(AudioError::InvalidSamples("sample rate must be positive".into()));
        }
        if let Some((i, s)) = samples.iter().enumerate().find(|(_, s)| !s.is_finite() || s.abs() > 1.0) {
            return Err(AudioError::InvalidSamples(format!("sample {i} = {s} is not within [-1, 1]")));
        }
        Ok(Self { samples: samples.into(), sample_rate_hz, source_id: source_id.into() })
    }

    /// Build a clip from double-precision samples, rescaling the whole buffer
    /// if its peak exceeds full scale.
    pub fn from_f64_normalized(samples: &[f64], sample_rate_hz: u32, source_id: impl Into<String>) -> Result<Self> {
        let peak = samples.iter().fold(0.0f64, |m, s| m.max(s.abs()));
        if !peak.is_finite() {
            return Err(AudioError::InvalidSamples("non-finite sample".into()));
        }
        let scale = if peak > 1.0 { 1.0 / peak } else { 1.0 };
        let converted = samples.iter().map(|&s| ((s * scale) as f32).clamp(-1.0, 1.0)).collect();
        Self::new(converted, sample_rate_hz, source_id)
    }

    pub fn samples(&self) -> &[f32] {
        &self.samples
    }

    pub fn sample_rate_hz(&self) -> u32 {
        self.sample_rate_hz
    }

    pub fn source_id(&self) -> &str {
        &self.source_id
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate_hz as f64
    }

    pub fn with_source_id(&self, source_id: impl Into<String>) -> Self {
        Self { samples: self.samples.clone(), sample_rate_hz: self.sample_rate_hz, source_id: source_id.into() }
    }

    /// Samples in `[round(t0·sr), round(t1·sr))`.
    pub fn slice(&self, t0: f64, t1: f64) -> Result<Self> {
        let duration = self.duration_s();
        if !(t0 >= 0.0 && t0 < t1 && t1 <= duration) {
            return Err(AudioError::RangeError { t0, t1, duration });
        }
        let sr = self.sample_rate_hz as f64;
        let start = ((t0 * sr).round() as usize).min(self.len());
        let end = ((t1 * sr).round() as usize).min(self.len());
        Ok(Self {
            samples: self.samples[start..end].into(),
            sample_rate_hz: self.sample_rate_hz,
            source_id: self.source_id.clone(),
        })
    }
}

/// Load one channel of a WAV file. The source id is the file stem.
pub fn load_wav(path: impl AsRef<Path>, channel: usize) -> Result<AudioClip> {
    let path = path.as_ref();
    let mut bytes = Vec::new();
    BufReader::new(File::open(path)?).read_to_end(&mut bytes)?;
    let id = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    decode_wav(&bytes, channel, id)
}

struct FmtChunk {
    format_code: u16,
    channels: u16,
    sample_rate: u32,
    block_align: u16,
    bits: u16,
}

fn le_u16(b: &[u8], at: usize) -> u16 {
    u16::from_le_bytes([b[at], b[at + 1]])
}

fn le_u32(b: &[u8], at: usize) -> u32 {
    u32::from_le_bytes([b[at], b[at + 1], b[at + 2], b[at + 3]])
}

/// Decode an in-memory RIFF/WAVE image.
pub fn decode_wav(bytes: &[u8], channel: usize, source_id: impl Into<String>) -> Result<AudioClip> {
    let malformed = |m: &str| AudioError::MalformedWav(m.to_string());
    if bytes.len() < 12 || &bytes[0..4] != b"RIFF" || &bytes[8..12] != b"WAVE" {
        return Err(malformed("missing RIFF/WAVE header"));
    }
    let mut fmt: Option<FmtChunk> = None;
    let mut data: Option<&[u8]> = None;
    let mut pos = 12;
    while pos + 8 <= bytes.len() {
        let id = &bytes[pos..pos + 4];
        let size = le_u32(bytes, pos + 4) as usize;
        let body_start = pos + 8;
        let body_end = body_start.checked_add(size).ok_or_else(|| malformed("chunk size overflow"))?;
        match id {
            b"fmt " => {
                if size < 16 || body_end > bytes.len() {
                    return Err(malformed("truncated fmt chunk"));
                }
                let b = &bytes[body_start..];
                fmt = Some(FmtChunk {
                    format_code: le_u16(b, 0),
                    channels: le_u16(b, 2),
                    sample_rate: le_u32(b, 4),
                    block_align: le_u16(b, 12),
                    bits: le_u16(b, 14),
                });
            }
            b"data" => {
                if body_end > bytes.len() {
                    return Err(malformed("data chunk shorter than declared"));
                }
                data = Some(&bytes[body_start..body_end]);
            }
            _ => {}
        }
        // chunks are word aligned
        pos = body_end + (size & 1);
    }
    let fmt = fmt.ok_or_else(|| malformed("missing fmt chunk"))?;
    let data = data.ok_or_else(|| malformed("missing data chunk"))?;

    let bytes_per_sample = match (fmt.format_code, fmt.bits) {
        (1, 16) => 2,
        (3, 32) => 4,
        (format_code, bits) => return Err(AudioError::UnsupportedEncoding { format_code, bits }),
    };
    let channels = fmt.channels as usize;
    if channels == 0 || fmt.sample_rate == 0 {
        return Err(malformed("zero channels or sample rate"));
    }
    if fmt.block_align as usize != channels * bytes_per_sample {
        return Err(malformed("block align disagrees with channel count and bit depth"));
    }
    if channel >= channels {
        return Err(AudioError::ChannelOutOfRange { channel, channels });
    }
    let frame = channels * bytes_per_sample;
    if data.len() % frame != 0 {
        return Err(malformed("data chunk is not a whole number of frames"));
    }
    let offset = channel * bytes_per_sample;
    let samples: Vec<f32> = data
        .chunks_exact(frame)
        .map(|f| {
            let s = &f[offset..offset + bytes_per_sample];
            if bytes_per_sample == 2 {
                i16::from_le_bytes([s[0], s[1]]) as f32 / 32768.0
            } else {
                f32::from_le_bytes([s[0], s[1], s[2], s[3]])
            }
        })
        .collect();
    AudioClip::new(samples, fmt.sample_rate, source_id).map_err(|e| match e {
        AudioError::InvalidSamples(m) => AudioError::MalformedWav(m),
        other => other,
    })
}

/// Serialize a clip as mono 32-bit float WAV.
pub fn encode_wav(clip: &AudioClip) -> Vec<u8> {
    let data_len = clip.len() * 4;
    let mut out = Vec::with_capacity(44 + data_len);
    out.extend_from_slice(b"RIFF");
    out.extend_from_slice(&((36 + data_len) as u32).to_le_bytes());
    out.extend_from_slice(b"WAVE");
    out.extend_from_slice(b"fmt ");
    out.extend_from_slice(&16u32.to_le_bytes());
    out.extend_from_slice(&3u16.to_le_bytes());
    out.extend_from_slice(&1u16.to_le_bytes());
    out.extend_from_slice(&clip.sample_rate_hz().to_le_bytes());
    out.extend_from_slice(&(clip.sample_rate_hz() * 4).to_le_bytes());
    out.extend_from_slice(&4u16.to_le_bytes());
    out.extend_from_slice(&32u16.to_le_bytes());
    out.extend_from_slice(b"data");
    out.extend_from_slice(&(data_len as u32).to_le_bytes());
    for s in clip.samples() {
        out.extend_from_slice(&s.to_le_bytes());
    }
    out
}

pub fn write_wav(clip: &AudioClip, path: impl AsRef<Path>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(&encode_wav(clip))?;
    w.flush()?;
    Ok(())
}

/// Build a PCM16 WAV image; used for fixtures and interop.
pub fn encode_wav_pcm16(channels: &[Vec<i16>], sample_rate_hz: u32) -> Vec<u8> {
    let n_ch = channels.len();
    let frames = channels.first().map_or(0, Vec::len);
    let data_len = frames * n_ch * 2;
    let mut out = Vec::with_capacity(44 + data_len);
    out.extend_from_slice(b"RIFF");
    out.extend_from_slice(&((36 + data_len) as u32).to_le_bytes());
    out.extend_from_slice(b"WAVE");
    out.extend_from_slice(b"fmt ");
    out.extend_from_slice(&16u32.to_le_bytes());
    out.extend_from_slice(&1u16.to_le_bytes());
    out.extend_from_slice(&(n_ch as u16).to_le_bytes());
    out.extend_from_slice(&sample_rate_hz.to_le_bytes());
    out.extend_from_slice(&(sample_rate_hz * n_ch as u32 * 2).to_le_bytes());
    out.extend_from_slice(&((n_ch * 2) as u16).to_le_bytes());
    out.extend_from_slice(&16u16.to_le_bytes());
    out.extend_from_slice(b"data");
    out.extend_from_slice(&(data_len as u32).to_le_bytes());
    for f in 0..frames {
        for ch in channels {
            out.extend_from_slice(&ch[f].to_le_bytes());
        }
    }
    out
}
