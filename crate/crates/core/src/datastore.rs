//! Directory-backed store for recordings, annotations, synthetic proposals,
//! dataset manifests, checkpoints and evaluation runs.
//!
//! ```text
//! <root>/schema.json            {"schema_version": 1}
//! <root>/.lock                  present while a writer has the store open
//! <root>/recordings.jsonl       one RecordingEntry per line
//! <root>/recordings/<id>.wav
//! <root>/annotations.jsonl      full Annotation snapshots, last line per id wins
//! <root>/synthetics.jsonl       full SyntheticCall snapshots, last line per id wins
//! <root>/synthetics/<id>.png
//! <root>/candidates/<id>.jsonl  cached detector output per recording
//! <root>/manifests/<version>.json
//! <root>/tiles/                 default export target
//! <root>/checkpoints/<name>.ckpt
//! <root>/runs/<run_id>.json     evaluation reports
//! ```

use std::collections::{BTreeMap, BTreeSet};
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use chrono::{SecondsFormat, Utc};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::audio::{encode_wav, load_wav, AudioClip, AudioError};
use crate::classifier::{CallLabel, ClassifierModel, LabeledTile};
use crate::detection::CallCandidate;
use crate::metrics::EvaluationReport;
use crate::spectrogram::{resize_bilinear, tile_from_clip, SpectroImage, SpectrogramError, SpectrogramParams, TileParams, TimeFreqBox};
use crate::synthgen::{ReviewStatus, SynthError, SyntheticCall, Verdict};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("store schema version {found} is newer than supported version {supported}")]
    SchemaMismatch { found: u32, supported: u32 },
    #[error("store at {0} is locked by another writer (remove the .lock file if no writer is running)")]
    Locked(PathBuf),
    #[error("store is open read-only")]
    ReadOnly,
    #[error("unknown recording {0}")]
    UnknownRecording(String),
    #[error("unknown id {0}")]
    UnknownId(String),
    #[error("duplicate id {0}")]
    DuplicateId(String),
    #[error("unknown manifest version {0}")]
    UnknownManifest(u64),
    #[error("need at least 2 categories among eligible annotations, found {0}")]
    TooFewCategories(usize),
    #[error("invalid value: {0}")]
    Invalid(String),
    #[error("corrupt store: {0}")]
    Corrupt(String),
    #[error("audio for recording {id} is missing or unreadable: {source}")]
    MissingAudio { id: String, source: AudioError },
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error(transparent)]
    Spectrogram(#[from] SpectrogramError),
    #[error(transparent)]
    Classifier(#[from] crate::classifier::ClassifierError),
    #[error("io failure: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, StoreError>;

pub fn now_timestamp() -> String {
    Utc::now().to_rfc3339_opts(SecondsFormat::Millis, true)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecordingEntry {
    pub id: String,
    /// Path relative to the store root.
    pub path: String,
    pub duration_s: f64,
    pub sample_rate_hz: u32,
    #[serde(default)]
    pub noise_tag: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AnnotationSource {
    Human,
    Model,
    Synthetic { seed_annotation_id: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditEntry {
    pub at: String,
    pub annotator: String,
    pub from: CallLabel,
    pub to: CallLabel,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Annotation {
    pub id: String,
    pub recording_id: String,
    #[serde(rename = "box")]
    pub bbox: TimeFreqBox,
    pub label: CallLabel,
    pub source: AnnotationSource,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub review_status: Option<ReviewStatus>,
    pub created_at: String,
    pub updated_at: String,
    pub annotator: String,
    #[serde(default)]
    pub audit: Vec<AuditEntry>,
}

/// Fields a caller supplies for a new annotation; the store fills in the rest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NewAnnotation {
    pub recording_id: String,
    #[serde(rename = "box")]
    pub bbox: TimeFreqBox,
    pub label: CallLabel,
    #[serde(default = "default_annotator")]
    pub annotator: String,
    #[serde(default = "default_source")]
    pub source: AnnotationSource,
}

fn default_annotator() -> String {
    "unknown".into()
}

fn default_source() -> AnnotationSource {
    AnnotationSource::Human
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct AnnotationFilter {
    pub label: Option<CallLabel>,
    pub recording_id: Option<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Splits {
    pub train: Vec<String>,
    pub val: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub version: u64,
    pub parent_version: Option<u64>,
    pub annotation_ids: Vec<String>,
    pub splits: Splits,
    pub counts_per_category: BTreeMap<CallLabel, usize>,
    pub created_at: String,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub val_fraction: f64,
    /// Ids drawn from the synthetic pool.
    #[serde(default)]
    pub synthetic_ids: Vec<String>,
}

impl DatasetManifest {
    pub fn natural_count(&self) -> usize {
        self.annotation_ids.len() - self.synthetic_ids.len()
    }

    /// Split and count invariants, given the label of every listed id.
    pub fn check(&self, labels: &BTreeMap<String, CallLabel>) -> std::result::Result<(), String> {
        let all: BTreeSet<&String> = self.annotation_ids.iter().collect();
        if all.len() != self.annotation_ids.len() {
            return Err(format!("manifest {} lists an id twice", self.version));
        }
        let train: BTreeSet<&String> = self.splits.train.iter().collect();
        let val: BTreeSet<&String> = self.splits.val.iter().collect();
        if train.intersection(&val).next().is_some() {
            return Err(format!("manifest {}: train and val overlap", self.version));
        }
        if !train.iter().chain(val.iter()).all(|id| all.contains(id)) {
            return Err(format!("manifest {}: split id outside annotation_ids", self.version));
        }
        let synthetic: BTreeSet<&String> = self.synthetic_ids.iter().collect();
        if val.iter().any(|id| synthetic.contains(id)) {
            return Err(format!("manifest {}: synthetic id in val", self.version));
        }
        let mut counts: BTreeMap<CallLabel, usize> = BTreeMap::new();
        for id in &self.annotation_ids {
            let label = labels.get(id).ok_or_else(|| format!("manifest {}: unknown id {id}", self.version))?;
            *counts.entry(*label).or_default() += 1;
        }
        if counts != self.counts_per_category {
            return Err(format!("manifest {}: counts do not match labels", self.version));
        }
        Ok(())
    }
}

/// Per-category validation counts: round half up per category, then adjusted
/// one at a time toward `round_half_up(N * fraction)` where the rounding error
/// is largest (first category wins ties).
pub fn stratified_val_counts(sizes: &[usize], fraction: f64) -> Vec<usize> {
    let rhu = |x: f64| (x + 0.5).floor() as usize;
    let total: usize = sizes.iter().sum();
    let target = rhu(total as f64 * fraction);
    let mut k: Vec<usize> = sizes.iter().map(|&n| rhu(n as f64 * fraction).min(n)).collect();
    let err = |k: &[usize], i: usize| k[i] as f64 - sizes[i] as f64 * fraction;
    loop {
        let sum: usize = k.iter().sum();
        if sum > target {
            let i = (0..k.len()).filter(|&i| k[i] > 0).max_by(|&a, &b| err(&k, a).total_cmp(&err(&k, b)).then(b.cmp(&a)));
            match i {
                Some(i) => k[i] -= 1,
                None => break,
            }
        } else if sum < target {
            let i = (0..k.len()).filter(|&i| k[i] < sizes[i]).min_by(|&a, &b| err(&k, a).total_cmp(&err(&k, b)).then(a.cmp(&b)));
            match i {
                Some(i) => k[i] += 1,
                None => break,
            }
        } else {
            break;
        }
    }
    k
}

struct WriterLock(PathBuf);

impl Drop for WriterLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.0);
    }
}

pub struct Store {
    root: PathBuf,
    lock: Option<WriterLock>,
    recordings: BTreeMap<String, RecordingEntry>,
    annotations: BTreeMap<String, Annotation>,
    synthetics: BTreeMap<String, SyntheticCall>,
    manifests: BTreeMap<u64, DatasetManifest>,
    next_annotation: u64,
}

#[derive(Serialize, Deserialize)]
struct SchemaFile {
    schema_version: u32,
}

fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    let text = fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(line).map_err(|e| StoreError::Corrupt(format!("{}:{}: {e}", path.display(), i + 1)))?);
    }
    Ok(out)
}

fn append_jsonl<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut f = OpenOptions::new().create(true).append(true).open(path)?;
    let mut line = serde_json::to_string(value)?;
    line.push('\n');
    f.write_all(line.as_bytes())?;
    f.sync_data()?;
    Ok(())
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

fn check_id(id: &str) -> Result<()> {
    let ok = !id.is_empty() && id.chars().all(|c| c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.')) && !id.starts_with('.');
    if ok { Ok(()) } else { Err(StoreError::Invalid(format!("id '{id}' must be non-empty [A-Za-z0-9._-] and not start with '.'"))) }
}

impl Store {
    /// Opens or initializes a store as its single writer.
    pub fn open(dir: impl AsRef<Path>) -> Result<Self> {
        Self::open_inner(dir.as_ref(), true)
    }

    /// Opens an existing or empty store for reading; mutations fail with `ReadOnly`.
    pub fn open_read_only(dir: impl AsRef<Path>) -> Result<Self> {
        Self::open_inner(dir.as_ref(), false)
    }

    fn open_inner(root: &Path, writer: bool) -> Result<Self> {
        fs::create_dir_all(root)?;
        let schema_path = root.join("schema.json");
        if schema_path.exists() {
            let schema: SchemaFile = serde_json::from_slice(&fs::read(&schema_path)?)?;
            if schema.schema_version != SCHEMA_VERSION {
                return Err(StoreError::SchemaMismatch { found: schema.schema_version, supported: SCHEMA_VERSION });
            }
        } else if writer {
            write_atomic(&schema_path, &serde_json::to_vec(&SchemaFile { schema_version: SCHEMA_VERSION })?)?;
        }
        let lock = if writer {
            let path = root.join(".lock");
            match OpenOptions::new().write(true).create_new(true).open(&path) {
                Ok(mut f) => {
                    let _ = writeln!(f, "{}", std::process::id());
                }
                Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => return Err(StoreError::Locked(root.to_path_buf())),
                Err(e) => return Err(e.into()),
            }
            for sub in ["recordings", "synthetics", "candidates", "manifests", "tiles", "checkpoints", "runs"] {
                fs::create_dir_all(root.join(sub))?;
            }
            Some(WriterLock(path))
        } else {
            None
        };

        let mut store = Store {
            root: root.to_path_buf(),
            lock,
            recordings: BTreeMap::new(),
            annotations: BTreeMap::new(),
            synthetics: BTreeMap::new(),
            manifests: BTreeMap::new(),
            next_annotation: 1,
        };
        for r in read_jsonl::<RecordingEntry>(&root.join("recordings.jsonl"))? {
            store.recordings.insert(r.id.clone(), r);
        }
        for a in read_jsonl::<Annotation>(&root.join("annotations.jsonl"))? {
            if let Some(n) = a.id.strip_prefix("ann-").and_then(|n| n.parse::<u64>().ok()) {
                store.next_annotation = store.next_annotation.max(n + 1);
            }
            store.annotations.insert(a.id.clone(), a);
        }
        for s in read_jsonl::<SyntheticCall>(&root.join("synthetics.jsonl"))? {
            store.synthetics.insert(s.id.clone(), s);
        }
        let mdir = root.join("manifests");
        if mdir.exists() {
            for entry in fs::read_dir(&mdir)? {
                let path = entry?.path();
                if path.extension().is_some_and(|e| e == "json") {
                    let m: DatasetManifest = serde_json::from_slice(&fs::read(&path)?)?;
                    store.manifests.insert(m.version, m);
                }
            }
        }
        store.verify()?;
        Ok(store)
    }

    /// Checks cross-record invariants; run on every open.
    pub fn verify(&self) -> Result<()> {
        for s in self.synthetics.values() {
            if !self.annotations.contains_key(&s.seed_annotation_id) {
                return Err(StoreError::Corrupt(format!("synthetic {} has unknown seed {}", s.id, s.seed_annotation_id)));
            }
        }
        let labels = self.label_index();
        for m in self.manifests.values() {
            m.check(&labels).map_err(StoreError::Corrupt)?;
            if let Some(p) = m.parent_version {
                if p >= m.version || !self.manifests.contains_key(&p) {
                    return Err(StoreError::Corrupt(format!("manifest {} has invalid parent {p}", m.version)));
                }
            }
        }
        Ok(())
    }

    fn label_index(&self) -> BTreeMap<String, CallLabel> {
        self.annotations
            .values()
            .map(|a| (a.id.clone(), a.label))
            .chain(self.synthetics.values().map(|s| (s.id.clone(), s.label)))
            .collect()
    }

    fn writable(&self) -> Result<()> {
        if self.lock.is_none() {
            return Err(StoreError::ReadOnly);
        }
        Ok(())
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    /// Latest manifest version, 0 when none exist.
    pub fn version(&self) -> u64 {
        self.manifests.keys().next_back().copied().unwrap_or(0)
    }

    pub fn add_recording(&mut self, clip: &AudioClip, noise_tag: Option<String>) -> Result<RecordingEntry> {
        self.writable()?;
        let id = clip.source_id().to_string();
        check_id(&id)?;
        if self.recordings.contains_key(&id) {
            return Err(StoreError::DuplicateId(id));
        }
        let rel = format!("recordings/{id}.wav");
        write_atomic(&self.root.join(&rel), &encode_wav(clip))?;
        let entry = RecordingEntry { id: id.clone(), path: rel, duration_s: clip.duration_s(), sample_rate_hz: clip.sample_rate_hz(), noise_tag };
        append_jsonl(&self.root.join("recordings.jsonl"), &entry)?;
        self.recordings.insert(id, entry.clone());
        Ok(entry)
    }

    pub fn recordings(&self) -> impl Iterator<Item = &RecordingEntry> {
        self.recordings.values()
    }

    pub fn recording(&self, id: &str) -> Result<&RecordingEntry> {
        self.recordings.get(id).ok_or_else(|| StoreError::UnknownRecording(id.to_string()))
    }

    pub fn load_recording(&self, id: &str) -> Result<AudioClip> {
        let entry = self.recording(id)?;
        load_wav(self.root.join(&entry.path), 0)
            .map(|c| c.with_source_id(id))
            .map_err(|source| StoreError::MissingAudio { id: id.to_string(), source })
    }

    pub fn cached_candidates(&self, recording_id: &str) -> Result<Option<Vec<CallCandidate>>> {
        self.recording(recording_id)?;
        let path = self.root.join("candidates").join(format!("{recording_id}.jsonl"));
        if !path.exists() {
            return Ok(None);
        }
        Ok(Some(read_jsonl(&path)?))
    }

    pub fn put_candidates(&mut self, recording_id: &str, candidates: &[CallCandidate]) -> Result<()> {
        self.writable()?;
        self.recording(recording_id)?;
        let mut buf = Vec::new();
        crate::detection::write_candidates_jsonl(&mut buf, candidates)?;
        write_atomic(&self.root.join("candidates").join(format!("{recording_id}.jsonl")), &buf)
    }

    pub fn put_annotation(&mut self, new: NewAnnotation) -> Result<String> {
        self.writable()?;
        self.recording(&new.recording_id)?;
        if !new.bbox.is_well_formed() {
            return Err(StoreError::Invalid(format!("malformed box {:?}", new.bbox)));
        }
        if let AnnotationSource::Synthetic { seed_annotation_id } = &new.source {
            if !self.annotations.contains_key(seed_annotation_id) {
                return Err(StoreError::UnknownId(seed_annotation_id.clone()));
            }
        }
        let id = format!("ann-{:06}", self.next_annotation);
        let now = now_timestamp();
        let review_status = matches!(new.source, AnnotationSource::Synthetic { .. }).then_some(ReviewStatus::Pending);
        let a = Annotation {
            id: id.clone(),
            recording_id: new.recording_id,
            bbox: new.bbox,
            label: new.label,
            source: new.source,
            review_status,
            created_at: now.clone(),
            updated_at: now,
            annotator: new.annotator,
            audit: Vec::new(),
        };
        append_jsonl(&self.root.join("annotations.jsonl"), &a)?;
        self.annotations.insert(id.clone(), a);
        self.next_annotation += 1;
        Ok(id)
    }

    pub fn annotation(&self, id: &str) -> Result<&Annotation> {
        self.annotations.get(id).ok_or_else(|| StoreError::UnknownId(id.to_string()))
    }

    pub fn annotations(&self, filter: &AnnotationFilter) -> Vec<&Annotation> {
        self.annotations
            .values()
            .filter(|a| filter.label.is_none_or(|l| a.label == l))
            .filter(|a| filter.recording_id.as_ref().is_none_or(|r| &a.recording_id == r))
            .collect()
    }

    /// Relabels an annotation, appending the change to its audit trail.
    pub fn update_label(&mut self, id: &str, label: CallLabel, annotator: &str) -> Result<Annotation> {
        self.writable()?;
        let now = now_timestamp();
        let a = self.annotations.get_mut(id).ok_or_else(|| StoreError::UnknownId(id.to_string()))?;
        let mut next = a.clone();
        next.audit.push(AuditEntry { at: now.clone(), annotator: annotator.to_string(), from: a.label, to: label });
        next.label = label;
        next.updated_at = now;
        append_jsonl(&self.root.join("annotations.jsonl"), &next)?;
        *a = next.clone();
        Ok(next)
    }

    /// Stores pending synthetics; tiles are quantized to 8 bits first so the
    /// stored PNG and the in-memory record agree exactly.
    pub fn add_synthetics(&mut self, items: Vec<SyntheticCall>) -> Result<Vec<String>> {
        self.writable()?;
        for s in &items {
            check_id(&s.id)?;
            if self.synthetics.contains_key(&s.id) || self.annotations.contains_key(&s.id) {
                return Err(StoreError::DuplicateId(s.id.clone()));
            }
            let seed = self.annotation(&s.seed_annotation_id)?;
            if seed.label != s.label {
                return Err(StoreError::Invalid(format!("synthetic {} label differs from its seed", s.id)));
            }
        }
        let mut ids = Vec::with_capacity(items.len());
        for mut s in items {
            let tile = s.tile.quantized();
            write_atomic(&self.synthetic_png_path(&s.id), &tile.to_png()?)?;
            s.tile = SpectroImage::default();
            append_jsonl(&self.root.join("synthetics.jsonl"), &s)?;
            ids.push(s.id.clone());
            self.synthetics.insert(s.id.clone(), s);
        }
        Ok(ids)
    }

    fn synthetic_png_path(&self, id: &str) -> PathBuf {
        self.root.join("synthetics").join(format!("{id}.png"))
    }

    /// Synthetic record without pixels; see [`Store::synthetic_tile`].
    pub fn synthetic(&self, id: &str) -> Result<&SyntheticCall> {
        self.synthetics.get(id).ok_or_else(|| StoreError::UnknownId(id.to_string()))
    }

    pub fn synthetics(&self, status: Option<ReviewStatus>) -> Vec<&SyntheticCall> {
        self.synthetics.values().filter(|s| status.is_none_or(|st| s.review_status == st)).collect()
    }

    pub fn synthetic_tile(&self, id: &str) -> Result<SpectroImage> {
        self.synthetic(id)?;
        Ok(SpectroImage::load_png(self.synthetic_png_path(id))?)
    }

    pub fn synthetic_png(&self, id: &str) -> Result<Vec<u8>> {
        self.synthetic(id)?;
        Ok(fs::read(self.synthetic_png_path(id))?)
    }

    /// Applies a review verdict. Returns the record and whether it changed.
    pub fn decide(&mut self, id: &str, verdict: Verdict, reviewer: &str) -> Result<(SyntheticCall, bool)> {
        self.writable()?;
        let s = self.synthetics.get_mut(id).ok_or_else(|| SynthError::UnknownId(id.to_string()))?;
        let mut next = s.clone();
        let changed = next.decide(verdict, reviewer, &now_timestamp())?;
        if changed {
            append_jsonl(&self.root.join("synthetics.jsonl"), &next)?;
            *s = next.clone();
        }
        Ok((next, changed))
    }

    /// Tile for a natural annotation, rendered from its recording.
    pub fn natural_tile(&self, id: &str, spec: &SpectrogramParams, tile: &TileParams) -> Result<SpectroImage> {
        let a = self.annotation(id)?;
        let clip = self.load_recording(&a.recording_id)?;
        Ok(tile_from_clip(&clip, &a.bbox, spec, tile)?)
    }

    /// Tile and label for any natural or synthetic id. Natural tiles of one
    /// recording share a single audio load via `clips`.
    fn tile_for(
        &self,
        id: &str,
        spec: &SpectrogramParams,
        tile: &TileParams,
        clips: &mut BTreeMap<String, AudioClip>,
    ) -> Result<LabeledTile> {
        if let Some(s) = self.synthetics.get(id) {
            let mut t = self.synthetic_tile(id)?;
            if t.pixels.dim() != (tile.out_size, tile.out_size) {
                t = resize_bilinear(&t, tile.out_size);
            }
            return Ok(LabeledTile { tile: t, label: s.label });
        }
        let a = self.annotation(id)?;
        if !clips.contains_key(&a.recording_id) {
            clips.insert(a.recording_id.clone(), self.load_recording(&a.recording_id)?);
        }
        let clip = &clips[&a.recording_id];
        Ok(LabeledTile { tile: tile_from_clip(clip, &a.bbox, spec, tile)?, label: a.label })
    }

    /// Builds a new manifest over every natural annotation and every accepted
    /// synthetic. Naturals are split per category; synthetics go to train only.
    /// The new version is one past the latest existing version.
    pub fn build_split(&mut self, parent_version: Option<u64>, val_fraction: f64, seed: u64) -> Result<DatasetManifest> {
        self.writable()?;
        if !(val_fraction > 0.0 && val_fraction < 1.0) {
            return Err(StoreError::Invalid("val_fraction must lie in (0, 1)".into()));
        }
        if let Some(p) = parent_version {
            if !self.manifests.contains_key(&p) {
                return Err(StoreError::UnknownManifest(p));
            }
        }
        let naturals: Vec<&Annotation> =
            self.annotations.values().filter(|a| !matches!(a.source, AnnotationSource::Synthetic { .. })).collect();
        let accepted: Vec<&SyntheticCall> = self.synthetics.values().filter(|s| s.is_train_eligible()).collect();

        let mut by_cat: BTreeMap<CallLabel, Vec<String>> = BTreeMap::new();
        for a in &naturals {
            by_cat.entry(a.label).or_default().push(a.id.clone());
        }
        let mut cats: BTreeSet<CallLabel> = by_cat.keys().copied().collect();
        cats.extend(accepted.iter().map(|s| s.label));
        if cats.len() < 2 {
            return Err(StoreError::TooFewCategories(cats.len()));
        }
        let sizes: Vec<usize> = by_cat.values().map(Vec::len).collect();
        let k = stratified_val_counts(&sizes, val_fraction);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut splits = Splits::default();
        for ((_, ids), k) in by_cat.iter().zip(k) {
            let mut ids = ids.clone();
            ids.shuffle(&mut rng);
            splits.val.extend_from_slice(&ids[..k]);
            splits.train.extend_from_slice(&ids[k..]);
        }
        let synthetic_ids: Vec<String> = accepted.iter().map(|s| s.id.clone()).collect();
        splits.train.extend(synthetic_ids.iter().cloned());
        splits.train.sort();
        splits.val.sort();

        let mut annotation_ids: Vec<String> = naturals.iter().map(|a| a.id.clone()).chain(synthetic_ids.iter().cloned()).collect();
        annotation_ids.sort();
        let mut counts: BTreeMap<CallLabel, usize> = BTreeMap::new();
        for a in &naturals {
            *counts.entry(a.label).or_default() += 1;
        }
        for s in &accepted {
            *counts.entry(s.label).or_default() += 1;
        }
        let m = DatasetManifest {
            version: self.version() + 1,
            parent_version,
            annotation_ids,
            splits,
            counts_per_category: counts,
            created_at: now_timestamp(),
            seed,
            val_fraction,
            synthetic_ids,
        };
        m.check(&self.label_index()).map_err(StoreError::Corrupt)?;
        write_atomic(&self.root.join("manifests").join(format!("{}.json", m.version)), &serde_json::to_vec_pretty(&m)?)?;
        self.manifests.insert(m.version, m.clone());
        Ok(m)
    }

    pub fn manifest(&self, version: u64) -> Result<&DatasetManifest> {
        self.manifests.get(&version).ok_or(StoreError::UnknownManifest(version))
    }

    pub fn manifests(&self) -> impl Iterator<Item = &DatasetManifest> {
        self.manifests.values()
    }

    /// Tiles and labels for natural or synthetic ids, in order. Synthetic tiles
    /// of another size are resampled to `tile.out_size`.
    pub fn labeled_tiles(&self, ids: &[String], spec: &SpectrogramParams, tile: &TileParams) -> Result<Vec<LabeledTile>> {
        let mut clips = BTreeMap::new();
        ids.iter().map(|id| self.tile_for(id, spec, tile, &mut clips)).collect()
    }

    /// Train and val tiles of a manifest, in split order.
    pub fn load_split(&self, version: u64, spec: &SpectrogramParams, tile: &TileParams) -> Result<(Vec<LabeledTile>, Vec<LabeledTile>)> {
        let m = self.manifest(version)?;
        Ok((self.labeled_tiles(&m.splits.train, spec, tile)?, self.labeled_tiles(&m.splits.val, spec, tile)?))
    }

    /// Writes `<id>.png` for every id in the manifest plus `manifest.json`.
    /// Stored synthetic PNGs are copied as is when they already have the tile size.
    /// Returns the number of PNGs written.
    pub fn export_tiles(&self, version: u64, spec: &SpectrogramParams, tile: &TileParams, out_dir: impl AsRef<Path>) -> Result<usize> {
        let out_dir = out_dir.as_ref();
        fs::create_dir_all(out_dir)?;
        let m = self.manifest(version)?;
        let mut clips = BTreeMap::new();
        let mut labels = BTreeMap::new();
        for id in &m.annotation_ids {
            let stored = self.synthetics.contains_key(id).then(|| self.synthetic_png(id)).transpose()?;
            let bytes = if let Some(png) = stored.filter(|b| SpectroImage::from_png(b).is_ok_and(|t| t.width() == tile.out_size && t.height() == tile.out_size)) {
                labels.insert(id.clone(), self.synthetics[id].label);
                png
            } else {
                let t = self.tile_for(id, spec, tile, &mut clips)?;
                labels.insert(id.clone(), t.label);
                t.tile.to_png()?
            };
            fs::write(out_dir.join(format!("{id}.png")), bytes)?;
        }
        #[derive(Serialize)]
        struct Export<'a> {
            #[serde(flatten)]
            manifest: &'a DatasetManifest,
            labels: BTreeMap<String, CallLabel>,
            spectrogram: &'a SpectrogramParams,
            tile: &'a TileParams,
        }
        let doc = Export { manifest: m, labels, spectrogram: spec, tile };
        fs::write(out_dir.join("manifest.json"), serde_json::to_vec_pretty(&doc)?)?;
        Ok(m.annotation_ids.len())
    }

    pub fn checkpoint_path(&self, name: &str) -> Result<PathBuf> {
        check_id(name)?;
        Ok(self.root.join("checkpoints").join(format!("{name}.ckpt")))
    }

    pub fn save_checkpoint(&self, name: &str, model: &ClassifierModel) -> Result<PathBuf> {
        self.writable()?;
        let path = self.checkpoint_path(name)?;
        write_atomic(&path, &model.to_bytes())?;
        Ok(path)
    }

    pub fn load_checkpoint(&self, name: &str) -> Result<ClassifierModel> {
        Ok(ClassifierModel::load(self.checkpoint_path(name)?)?)
    }

    pub fn save_run(&self, run_id: &str, report: &EvaluationReport) -> Result<()> {
        self.writable()?;
        check_id(run_id)?;
        write_atomic(&self.root.join("runs").join(format!("{run_id}.json")), report.to_json().as_bytes())
    }

    pub fn load_run(&self, run_id: &str) -> Result<EvaluationReport> {
        check_id(run_id)?;
        let path = self.root.join("runs").join(format!("{run_id}.json"));
        if !path.exists() {
            return Err(StoreError::UnknownId(run_id.to_string()));
        }
        Ok(serde_json::from_slice(&fs::read(path)?)?)
    }

    /// Every file under the store root except the lock, with its bytes; used to
    /// compare stores byte for byte.
    pub fn snapshot_files(&self) -> Result<BTreeMap<PathBuf, Vec<u8>>> {
        fn walk(dir: &Path, root: &Path, out: &mut BTreeMap<PathBuf, Vec<u8>>) -> std::io::Result<()> {
            for entry in fs::read_dir(dir)? {
                let path = entry?.path();
                if path.is_dir() {
                    walk(&path, root, out)?;
                } else if path.file_name().is_some_and(|n| n != ".lock") {
                    out.insert(path.strip_prefix(root).expect("under root").to_path_buf(), fs::read(&path)?);
                }
            }
            Ok(())
        }
        let mut out = BTreeMap::new();
        walk(&self.root, &self.root, &mut out)?;
        Ok(out)
    }
}

impl std::fmt::Debug for Store {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Store")
            .field("root", &self.root)
            .field("writer", &self.lock.is_some())
            .field("recordings", &self.recordings.len())
            .field("annotations", &self.annotations.len())
            .field("synthetics", &self.synthetics.len())
            .field("manifests", &self.manifests.len())
            .finish()
    }
}
