//! Synthetic tiles by smooth random warping of natural seed tiles, plus the
//! accept/reject review state machine.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::classifier::CallLabel;
use crate::spectrogram::SpectroImage;

#[derive(Debug, Error, PartialEq)]
pub enum SynthError {
    #[error("field is {field:?} but the tile is {tile:?}")]
    ShapeMismatch { field: (usize, usize), tile: (usize, usize) },
    #[error("no seed tiles given")]
    NoSeeds,
    #[error("seed {0} is labeled Noise and cannot be morphed")]
    NoiseSeed(String),
    #[error("invalid morph parameters: {0}")]
    InvalidParams(String),
    #[error("synthetic {id} is already {status:?}")]
    AlreadyDecided { id: String, status: ReviewStatus },
    #[error("unknown synthetic id {0}")]
    UnknownId(String),
}

pub type Result<T> = std::result::Result<T, SynthError>;

/// Tile size the default displacement refers to.
pub const REFERENCE_TILE_PX: usize = 128;
pub const DEFAULT_MAX_DISPLACEMENT_PX: f64 = 6.0;
pub const AUTO_REVIEWER: &str = "auto";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MorphParams {
    pub max_displacement_px: f64,
    /// Control points per axis.
    pub control_grid: usize,
    pub seed: u64,
    /// Relative intensity gain jitter, e.g. 0.1 for ±10%. 0 disables it.
    pub gain_jitter: f64,
    /// Horizontal (time) shift jitter in pixels. 0 disables it.
    pub shift_jitter_px: f64,
}

impl Default for MorphParams {
    fn default() -> Self {
        Self { max_displacement_px: DEFAULT_MAX_DISPLACEMENT_PX, control_grid: 4, seed: 0, gain_jitter: 0.0, shift_jitter_px: 0.0 }
    }
}

impl MorphParams {
    /// Defaults with the displacement scaled from the 128 px reference to `tile_px`.
    pub fn for_tile(tile_px: usize, seed: u64) -> Self {
        Self { max_displacement_px: DEFAULT_MAX_DISPLACEMENT_PX * tile_px as f64 / REFERENCE_TILE_PX as f64, seed, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.max_displacement_px >= 0.0 && self.max_displacement_px.is_finite()) {
            return Err(SynthError::InvalidParams("max_displacement_px must be a finite value >= 0".into()));
        }
        if self.control_grid < 2 {
            return Err(SynthError::InvalidParams("control_grid must be at least 2".into()));
        }
        if !(self.gain_jitter >= 0.0 && self.gain_jitter < 1.0) || !(self.shift_jitter_px >= 0.0) {
            return Err(SynthError::InvalidParams("jitters must be non-negative and gain below 1".into()));
        }
        Ok(())
    }
}

/// Per-pixel displacement in pixels; `dx` runs along columns (time), `dy` along rows.
#[derive(Debug, Clone, PartialEq)]
pub struct DisplacementField {
    pub dx: Array2<f64>,
    pub dy: Array2<f64>,
}

impl DisplacementField {
    pub fn zeros(shape: (usize, usize)) -> Self {
        Self { dx: Array2::zeros(shape), dy: Array2::zeros(shape) }
    }

    pub fn constant(shape: (usize, usize), dx: f64, dy: f64) -> Self {
        Self { dx: Array2::from_elem(shape, dx), dy: Array2::from_elem(shape, dy) }
    }

    pub fn shape(&self) -> (usize, usize) {
        self.dx.dim()
    }

    pub fn max_abs(&self) -> f64 {
        self.dx.iter().chain(self.dy.iter()).fold(0.0, |m, v| m.max(v.abs()))
    }
}

/// Uniform offsets in [−A, A] on a `control_grid`² lattice, bilinearly
/// upsampled with the lattice corners on the tile corners.
pub fn random_field(params: &MorphParams, shape: (usize, usize)) -> Result<DisplacementField> {
    params.validate()?;
    let g = params.control_grid;
    let (h, w) = shape;
    if h < g || w < g {
        return Err(SynthError::InvalidParams(format!("shape {h}x{w} is smaller than the {g}x{g} control grid")));
    }
    let a = params.max_displacement_px;
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let mut draw = || Array2::from_shape_simple_fn((g, g), || if a > 0.0 { rng.random_range(-a..=a) } else { 0.0 });
    let cx = draw();
    let cy = draw();
    Ok(DisplacementField { dx: upsample(&cx, shape), dy: upsample(&cy, shape) })
}

fn upsample(grid: &Array2<f64>, (h, w): (usize, usize)) -> Array2<f64> {
    let (gh, gw) = grid.dim();
    let pos = |i: usize, n: usize, gn: usize| if n > 1 { i as f64 * (gn - 1) as f64 / (n - 1) as f64 } else { 0.0 };
    Array2::from_shape_fn((h, w), |(r, c)| bilinear(grid, pos(r, h, gh), pos(c, w, gw)))
}

/// Bilinear sample with coordinates clamped to the array; exact at integer positions.
fn bilinear(img: &Array2<f64>, y: f64, x: f64) -> f64 {
    let (h, w) = img.dim();
    let y = y.clamp(0.0, (h - 1) as f64);
    let x = x.clamp(0.0, (w - 1) as f64);
    let (y0, x0) = (y.floor() as usize, x.floor() as usize);
    let (fy, fx) = (y - y0 as f64, x - x0 as f64);
    let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
    let row = |yy: usize| if fx == 0.0 { img[[yy, x0]] } else { img[[yy, x0]] * (1.0 - fx) + img[[yy, x1]] * fx };
    if fy == 0.0 {
        row(y0)
    } else {
        row(y0) * (1.0 - fy) + row(y1) * fy
    }
}

/// Inverse-mapping warp: `out(p) = input(p + field(p))`, edges clamped.
pub fn warp_tile(tile: &SpectroImage, field: &DisplacementField) -> Result<SpectroImage> {
    let shape = tile.pixels.dim();
    if field.shape() != shape {
        return Err(SynthError::ShapeMismatch { field: field.shape(), tile: shape });
    }
    let src = &tile.pixels;
    let pixels = Array2::from_shape_fn(shape, |(r, c)| {
        let v = bilinear(src, r as f64 + field.dy[[r, c]], c as f64 + field.dx[[r, c]]);
        v.clamp(0.0, 1.0)
    });
    Ok(SpectroImage { pixels, source_box: tile.source_box })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReviewStatus {
    Pending,
    Accepted,
    Rejected,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Verdict {
    Accept,
    Reject,
}

impl Verdict {
    pub fn status(self) -> ReviewStatus {
        match self {
            Verdict::Accept => ReviewStatus::Accepted,
            Verdict::Reject => ReviewStatus::Rejected,
        }
    }
}

impl std::str::FromStr for Verdict {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.trim().to_ascii_lowercase().as_str() {
            "accept" | "a" | "y" | "yes" => Ok(Verdict::Accept),
            "reject" | "r" | "n" | "no" => Ok(Verdict::Reject),
            other => Err(format!("unknown verdict '{other}'")),
        }
    }
}

/// A natural annotation's tile offered for morphing.
#[derive(Debug, Clone, PartialEq)]
pub struct SeedTile {
    pub annotation_id: String,
    pub label: CallLabel,
    pub tile: SpectroImage,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticCall {
    pub id: String,
    #[serde(skip)]
    pub tile: SpectroImage,
    pub seed_annotation_id: String,
    pub label: CallLabel,
    /// Parameters of this offspring, with its derived seed.
    pub params: MorphParams,
    pub review_status: ReviewStatus,
    #[serde(default)]
    pub reviewer: Option<String>,
    #[serde(default)]
    pub decided_at: Option<String>,
}

impl SyntheticCall {
    /// Applies a verdict. Repeating the recorded verdict is a no-op returning
    /// `Ok(false)`; a contradicting verdict fails.
    pub fn decide(&mut self, verdict: Verdict, reviewer: &str, timestamp: &str) -> Result<bool> {
        match self.review_status {
            ReviewStatus::Pending => {
                self.review_status = verdict.status();
                self.reviewer = Some(reviewer.to_string());
                self.decided_at = Some(timestamp.to_string());
                Ok(true)
            }
            s if s == verdict.status() => Ok(false),
            s => Err(SynthError::AlreadyDecided { id: self.id.clone(), status: s }),
        }
    }

    pub fn is_train_eligible(&self) -> bool {
        self.review_status == ReviewStatus::Accepted
    }
}

/// Seed for offspring `k` of `seed_id` under run seed `run_seed`.
pub fn derive_seed(run_seed: u64, seed_id: &str, k: usize) -> u64 {
    let digest = Sha256::digest(format!("{run_seed}:{seed_id}:{k}").as_bytes());
    u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
}

/// `offspring_per_seed` pending morphs of every seed, in seed order.
pub fn propose(seeds: &[SeedTile], offspring_per_seed: usize, params: &MorphParams) -> Result<Vec<SyntheticCall>> {
    params.validate()?;
    if seeds.is_empty() {
        return Err(SynthError::NoSeeds);
    }
    if let Some(s) = seeds.iter().find(|s| s.label == CallLabel::Noise) {
        return Err(SynthError::NoiseSeed(s.annotation_id.clone()));
    }
    let mut out = Vec::with_capacity(seeds.len() * offspring_per_seed);
    for seed in seeds {
        for k in 0..offspring_per_seed {
            let sub = derive_seed(params.seed, &seed.annotation_id, k);
            let child = MorphParams { seed: sub, ..params.clone() };
            out.push(SyntheticCall {
                id: format!("syn-{sub:016x}"),
                tile: morph(&seed.tile, &child)?,
                seed_annotation_id: seed.annotation_id.clone(),
                label: seed.label,
                params: child,
                review_status: ReviewStatus::Pending,
                reviewer: None,
                decided_at: None,
            });
        }
    }
    Ok(out)
}

/// Warps `tile` with the field drawn from `params`, then applies enabled jitters.
pub fn morph(tile: &SpectroImage, params: &MorphParams) -> Result<SpectroImage> {
    let mut field = random_field(params, tile.pixels.dim())?;
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed ^ 0x6A17_7E55);
    if params.shift_jitter_px > 0.0 {
        let shift = rng.random_range(-params.shift_jitter_px..=params.shift_jitter_px);
        field.dx += shift;
    }
    let mut out = warp_tile(tile, &field)?;
    if params.gain_jitter > 0.0 {
        let gain = 1.0 + rng.random_range(-params.gain_jitter..=params.gain_jitter);
        out.pixels.mapv_inplace(|v| (v * gain).clamp(0.0, 1.0));
    }
    Ok(out)
}
