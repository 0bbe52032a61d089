//! Command-line front end. `run` parses arguments, executes one subcommand
//! and returns the process exit code: 0 success, 1 domain error, 2 usage or
//! I/O error.

use std::ffi::OsString;
use std::io::{BufRead, Write};
use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::audio::{load_wav, write_wav};
use crate::callsim::{preset, preset_names, synth_recording, GroundTruth, RecordingPlan, TruthBox};
use crate::classifier::{
    check_categories, confusion, init_model, train_split_observed, validate, CallLabel, ClassifierModel, LabeledTile,
};
use crate::datastore::{AnnotationSource, NewAnnotation, Store};
use crate::detection::{baseline_detect, read_candidates_jsonl, write_candidates_jsonl, CallCandidate};
use crate::metrics::OutcomeTally;
use crate::pipeline::{
    compare_label_runs, detect_screened, evaluate_detections, evaluate_tallies, read_label_records, Config, PipelineError, Result,
};
use crate::spectrogram::{tile_from_clip, SpectroImage, TileParams};
use crate::synthgen::{propose, ReviewStatus, SeedTile, Verdict, AUTO_REVIEWER};

#[derive(Debug, Parser)]
#[command(name = "usvkit", version, about = "Detect, classify and augment rodent ultrasonic vocalizations")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct ConfigArgs {
    /// TOML configuration; flags given on the command line take precedence.
    #[arg(long)]
    config: Option<PathBuf>,
}

impl ConfigArgs {
    fn load(&self) -> Result<Config> {
        match &self.config {
            Some(p) => Config::load(p),
            None => Ok(Config::default()),
        }
    }
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[arg(long)]
    store: PathBuf,
    /// Dataset manifest version to train on.
    #[arg(long)]
    manifest: u64,
    /// Where to write the resulting checkpoint.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Square tile edge in pixels (fresh models only).
    #[arg(long)]
    tile_size: Option<usize>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Detect calls in WAV files and write candidates as JSON lines.
    Detect {
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
        /// Output file; standard output when omitted.
        #[arg(long, short)]
        out: Option<PathBuf>,
        /// Use the global-percentile baseline detector instead.
        #[arg(long)]
        baseline: bool,
        /// Classifier checkpoint for noise screening.
        #[arg(long)]
        model: Option<PathBuf>,
        /// Drop candidates whose Noise probability reaches this value (needs --model).
        #[arg(long)]
        noise_screen: Option<f64>,
        #[arg(long)]
        threshold_offset_db: Option<f64>,
        #[arg(long)]
        min_area: Option<usize>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Write a simulated recording, its ground truth and its plan.
    Simulate {
        #[arg(long, conflicts_with = "plan")]
        preset: Option<String>,
        /// JSON recording plan, used verbatim.
        #[arg(long)]
        plan: Option<PathBuf>,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long, short)]
        out: Option<PathBuf>,
        /// Print preset names and exit.
        #[arg(long)]
        list_presets: bool,
    },
    /// Score candidates against truth, tallies, or two classification runs.
    Evaluate {
        #[arg(long, requires = "truth")]
        candidates: Option<PathBuf>,
        #[arg(long)]
        truth: Option<PathBuf>,
        /// Pre-counted tally as NAME=detections,hits,false_alarms,misses (repeatable).
        #[arg(long)]
        tally: Vec<String>,
        /// Label file of the first classification run (JSON lines of recording, predicted, truth).
        #[arg(long, requires = "post")]
        pre: Option<PathBuf>,
        #[arg(long, requires = "pre")]
        post: Option<PathBuf>,
        #[arg(long)]
        min_overlap: Option<f64>,
        #[arg(long, default_value = "json", value_parser = ["json", "csv"])]
        format: String,
        #[arg(long, short)]
        out: Option<PathBuf>,
        /// Also save the report in this store under --run-id.
        #[arg(long, requires = "run_id")]
        store: Option<PathBuf>,
        #[arg(long)]
        run_id: Option<String>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Train a fresh classifier on a stored dataset manifest.
    Train {
        #[command(flatten)]
        args: TrainArgs,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Continue training a checkpoint on a (usually larger) manifest.
    Resume {
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        args: TrainArgs,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Accuracy and confusion counts of a checkpoint on a manifest split.
    Validate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        store: PathBuf,
        #[arg(long)]
        manifest: u64,
        #[arg(long, default_value = "val", value_parser = ["val", "train"])]
        split: String,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Classify candidate calls of a recording, or PNG tiles.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, requires = "candidates")]
        wav: Option<PathBuf>,
        #[arg(long)]
        candidates: Option<PathBuf>,
        /// Tiles to classify directly.
        #[arg(long, num_args = 1..)]
        png: Vec<PathBuf>,
        #[arg(long, short)]
        out: Option<PathBuf>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Propose morphed copies of a manifest's natural training calls.
    Augment {
        #[arg(long)]
        store: PathBuf,
        #[arg(long)]
        manifest: u64,
        #[arg(long, default_value_t = 1)]
        per_seed: usize,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        max_displacement_px: Option<f64>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Accept or reject pending synthetic calls from the terminal.
    Review {
        #[arg(long)]
        store: PathBuf,
        #[arg(long, default_value = "terminal")]
        reviewer: String,
        /// Accept every pending item without prompting.
        #[arg(long)]
        auto_accept: bool,
        /// Write each pending tile pair here as PNGs while reviewing.
        #[arg(long)]
        preview_dir: Option<PathBuf>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Add WAV recordings to a store.
    Import {
        #[arg(long)]
        store: PathBuf,
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
        #[arg(long)]
        noise_tag: Option<String>,
    },
    /// Add labeled boxes (truth JSON lines) to a store as annotations.
    Annotate {
        #[arg(long)]
        store: PathBuf,
        /// Ground-truth file; each box's source_id must name a stored recording.
        #[arg(long)]
        truth: PathBuf,
        #[arg(long, default_value = "import")]
        annotator: String,
    },
    /// Build a new dataset manifest from the store's current contents.
    Split {
        #[arg(long)]
        store: PathBuf,
        #[arg(long)]
        parent: Option<u64>,
        #[arg(long, default_value_t = 0.2)]
        val_fraction: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Write a manifest's tiles as PNGs plus manifest.json.
    Export {
        #[arg(long)]
        store: PathBuf,
        #[arg(long)]
        manifest: u64,
        #[arg(long, short)]
        out: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Print the default configuration as TOML.
    Config,
    /// Serve the HTTP API over a store.
    Serve {
        #[arg(long)]
        store: PathBuf,
        #[arg(long, default_value = "127.0.0.1:8080")]
        bind: SocketAddr,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
}

/// Runs the CLI on `args` (including the program name) and returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match execute(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn output(path: Option<&Path>) -> Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(std::io::BufWriter::new(std::fs::File::create(p)?)),
        None => Box::new(std::io::stdout().lock()),
    })
}

fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| PipelineError::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))
}

fn load_input(path: &Path) -> Result<crate::audio::AudioClip> {
    load_wav(path, 0).map_err(|e| match e {
        crate::audio::AudioError::Io(io) => PipelineError::Io(std::io::Error::new(io.kind(), format!("{}: {io}", path.display()))),
        other => parse_err(path, other),
    })
}

fn parse_err(what: &Path, e: impl std::fmt::Display) -> PipelineError {
    PipelineError::Parse { what: what.display().to_string(), message: e.to_string() }
}

fn parse_tally(s: &str) -> Result<(String, OutcomeTally)> {
    let bad = || PipelineError::Config(format!("tally '{s}' is not NAME=detections,hits,false_alarms,misses"));
    let (name, counts) = s.split_once('=').ok_or_else(bad)?;
    let v: Vec<usize> = counts.split(',').map(|c| c.trim().parse().map_err(|_| bad())).collect::<Result<_>>()?;
    if v.len() != 4 {
        return Err(bad());
    }
    Ok((name.to_string(), OutcomeTally { detections: v[0], hits: v[1], false_alarms: v[2], misses: v[3] }))
}

fn execute(command: Command) -> Result<()> {
    match command {
        Command::Detect { inputs, out, baseline, model, noise_screen, threshold_offset_db, min_area, cfg } => {
            let mut config = cfg.load()?;
            if let Some(v) = threshold_offset_db {
                config.detection.threshold_offset_db = v;
            }
            if let Some(v) = min_area {
                config.detection.min_area = v;
            }
            if noise_screen.is_some() {
                config.detection.noise_screen = noise_screen;
            }
            config.validate()?;
            let model = model.map(ClassifierModel::load).transpose()?;
            let mut w = output(out.as_deref())?;
            for path in &inputs {
                let clip = load_input(path)?;
                let found = if baseline {
                    baseline_detect(&clip, &config.spectrogram, config.evaluation.baseline_percentile)?
                } else {
                    detect_screened(&clip, &config, model.as_ref())?
                };
                write_candidates_jsonl(&mut w, &found)?;
                eprintln!("{}: {} candidates", path.display(), found.len());
            }
            w.flush()?;
        }
        Command::Simulate { preset: name, plan, seed, out, list_presets } => {
            if list_presets {
                for n in preset_names() {
                    println!("{n}");
                }
                return Ok(());
            }
            let out = out.ok_or_else(|| PipelineError::Config("--out is required".into()))?;
            let plan = match (name, plan) {
                (Some(n), None) => preset(&n, seed)?,
                (None, Some(p)) => RecordingPlan::from_json(&read_text(&p)?).map_err(|e| parse_err(&p, e))?,
                _ => return Err(PipelineError::Config("give exactly one of --preset or --plan".into())),
            };
            let (clip, truth) = synth_recording(&plan)?;
            std::fs::create_dir_all(&out)?;
            let stem = &plan.source_id;
            write_wav(&clip, out.join(format!("{stem}.wav")))?;
            let mut t = std::fs::File::create(out.join(format!("{stem}.truth.jsonl")))?;
            truth.write_jsonl(&mut t)?;
            std::fs::write(out.join(format!("{stem}.plan.json")), plan.to_json())?;
            eprintln!("{stem}: {} calls, {:.1} s", truth.len(), clip.duration_s());
        }
        Command::Evaluate { candidates, truth, tally, pre, post, min_overlap, format, out, store, run_id, cfg } => {
            let config = cfg.load()?;
            let min_overlap = min_overlap.unwrap_or(config.evaluation.min_overlap);
            let mut w = output(out.as_deref())?;
            if let (Some(pre), Some(post)) = (&pre, &post) {
                let a = read_label_records(&read_text(pre)?, &pre.display().to_string())?;
                let b = read_label_records(&read_text(post)?, &post.display().to_string())?;
                let cmp = compare_label_runs(&a, &b)?;
                writeln!(w, "{}", serde_json::to_string_pretty(&cmp).expect("serializes"))?;
                return Ok(w.flush()?);
            }
            let report = if let Some(cpath) = candidates {
                let tpath = truth.expect("clap enforces --truth");
                let c = read_candidates_jsonl(&read_text(&cpath)?).map_err(|e| parse_err(&cpath, e))?;
                let t = GroundTruth::read_jsonl(&read_text(&tpath)?).map_err(|e| parse_err(&tpath, e))?;
                evaluate_detections(&c, &t.boxes, min_overlap)
            } else if !tally.is_empty() {
                evaluate_tallies(tally.iter().map(|s| parse_tally(s)).collect::<Result<_>>()?)?
            } else {
                return Err(PipelineError::Config("give --candidates/--truth, --tally or --pre/--post".into()));
            };
            if let (Some(dir), Some(id)) = (store, run_id) {
                Store::open(dir)?.save_run(&id, &report)?;
            }
            match format.as_str() {
                "csv" => write!(w, "{}", report.to_csv())?,
                _ => writeln!(w, "{}", report.to_json())?,
            }
            w.flush()?;
        }
        Command::Train { args, cfg } => train_command(None, args, cfg.load()?)?,
        Command::Resume { checkpoint, args, cfg } => train_command(Some(checkpoint), args, cfg.load()?)?,
        Command::Validate { checkpoint, store, manifest, split, cfg } => {
            let config = cfg.load()?;
            let model = ClassifierModel::load(&checkpoint)?;
            let store = Store::open_read_only(store)?;
            let tile = TileParams { out_size: model.input_size().0, ..config.tile };
            let m = store.manifest(manifest)?;
            let ids = if split == "train" { &m.splits.train } else { &m.splits.val };
            let set = store.labeled_tiles(ids, &config.spectrogram, &tile)?;
            let accuracy = validate(&model, &set)?;
            let doc = serde_json::json!({ "split": split, "n": set.len(), "accuracy": accuracy, "confusion": confusion(&model, &set)? });
            println!("{}", serde_json::to_string_pretty(&doc).expect("serializes"));
        }
        Command::Predict { checkpoint, wav, candidates, png, out, cfg } => {
            let config = cfg.load()?;
            let model = ClassifierModel::load(&checkpoint)?;
            let mut w = output(out.as_deref())?;
            if let (Some(wav), Some(cpath)) = (wav, candidates) {
                let clip = load_input(&wav)?;
                let cands: Vec<CallCandidate> = read_candidates_jsonl(&read_text(&cpath)?).map_err(|e| parse_err(&cpath, e))?;
                let tile = TileParams { out_size: model.input_size().0, ..config.tile.clone() };
                for c in cands {
                    let p = model.forward(&tile_from_clip(&clip, &c.bbox(), &config.spectrogram, &tile)?)?;
                    let doc = serde_json::json!({
                        "source_id": c.source_id, "t_start": c.t_start, "t_end": c.t_end, "f_min": c.f_min, "f_max": c.f_max,
                        "label": p.label, "probability": model.probability_of(&p, p.label),
                    });
                    writeln!(w, "{doc}")?;
                }
            }
            for path in png {
                let p = model.forward(&SpectroImage::load_png(&path)?)?;
                writeln!(w, "{}", serde_json::json!({ "file": path.display().to_string(), "label": p.label, "probability": model.probability_of(&p, p.label) }))?;
            }
            w.flush()?;
        }
        Command::Augment { store, manifest, per_seed, seed, max_displacement_px, cfg } => {
            let config = cfg.load()?;
            let mut store = Store::open(store)?;
            let m = store.manifest(manifest)?.clone();
            let ids: Vec<String> = m
                .splits
                .train
                .iter()
                .filter(|id| !m.synthetic_ids.contains(id))
                .filter(|id| store.annotation(id).is_ok_and(|a| a.label != CallLabel::Noise))
                .cloned()
                .collect();
            let tiles = store.labeled_tiles(&ids, &config.spectrogram, &config.tile)?;
            let seeds: Vec<SeedTile> =
                ids.into_iter().zip(tiles).map(|(annotation_id, t)| SeedTile { annotation_id, label: t.label, tile: t.tile }).collect();
            let mut params = config.morph.clone();
            if let Some(s) = seed {
                params.seed = s;
            }
            if let Some(a) = max_displacement_px {
                params.max_displacement_px = a;
            }
            let added = store.add_synthetics(propose(&seeds, per_seed, &params)?)?;
            println!("{} pending synthetics from {} seeds", added.len(), seeds.len());
        }
        Command::Review { store, reviewer, auto_accept, preview_dir, cfg } => {
            let config = cfg.load()?;
            let mut store = Store::open(store)?;
            let pending: Vec<(String, CallLabel, String)> = store
                .synthetics(Some(ReviewStatus::Pending))
                .into_iter()
                .map(|s| (s.id.clone(), s.label, s.seed_annotation_id.clone()))
                .collect();
            let (mut accepted, mut rejected) = (0usize, 0usize);
            if auto_accept {
                for (id, _, _) in &pending {
                    store.decide(id, Verdict::Accept, AUTO_REVIEWER)?;
                    accepted += 1;
                }
            } else {
                let stdin = std::io::stdin();
                let mut lines = stdin.lock().lines();
                for (i, (id, label, seed)) in pending.iter().enumerate() {
                    if let Some(dir) = &preview_dir {
                        std::fs::create_dir_all(dir)?;
                        std::fs::write(dir.join(format!("{id}.png")), store.synthetic_png(id)?)?;
                        store.natural_tile(seed, &config.spectrogram, &config.tile)?.save_png(dir.join(format!("{id}.seed.png")))?;
                    }
                    eprint!("[{}/{}] {id} {label} (seed {seed}) [a]ccept/[r]eject/[s]kip/[q]uit: ", i + 1, pending.len());
                    let Some(line) = lines.next().transpose()? else { break };
                    let answer = line.trim();
                    if answer.eq_ignore_ascii_case("q") {
                        break;
                    }
                    if answer.is_empty() || answer.eq_ignore_ascii_case("s") {
                        continue;
                    }
                    match answer.parse::<Verdict>() {
                        Ok(v) => {
                            store.decide(id, v, &reviewer)?;
                            match v {
                                Verdict::Accept => accepted += 1,
                                Verdict::Reject => rejected += 1,
                            }
                        }
                        Err(e) => eprintln!("{e}; skipped"),
                    }
                }
            }
            println!("accepted {accepted}, rejected {rejected}, pending {}", pending.len() - accepted - rejected);
        }
        Command::Import { store, inputs, noise_tag } => {
            let mut store = Store::open(store)?;
            for path in inputs {
                let clip = load_input(&path)?;
                let id = path.file_stem().and_then(|s| s.to_str()).unwrap_or("recording").to_string();
                let e = store.add_recording(&clip.with_source_id(id), noise_tag.clone())?;
                println!("{} {:.3} s", e.id, e.duration_s);
            }
        }
        Command::Annotate { store, truth, annotator } => {
            let mut store = Store::open(store)?;
            let boxes: Vec<TruthBox> = GroundTruth::read_jsonl(&read_text(&truth)?).map_err(|e| parse_err(&truth, e))?.boxes;
            for b in &boxes {
                store.put_annotation(NewAnnotation {
                    recording_id: b.source_id.clone(),
                    bbox: b.bbox(),
                    label: b.label,
                    annotator: annotator.clone(),
                    source: AnnotationSource::Human,
                })?;
            }
            println!("{} annotations added", boxes.len());
        }
        Command::Split { store, parent, val_fraction, seed } => {
            let m = Store::open(store)?.build_split(parent, val_fraction, seed)?;
            println!("manifest {}: train {}, val {}", m.version, m.splits.train.len(), m.splits.val.len());
        }
        Command::Export { store, manifest, out, cfg } => {
            let config = cfg.load()?;
            let n = Store::open_read_only(store)?.export_tiles(manifest, &config.spectrogram, &config.tile, &out)?;
            println!("{n} tiles written to {}", out.display());
        }
        Command::Config => print!("{}", Config::default().to_toml()),
        Command::Serve { store, bind, cfg } => {
            let config = cfg.load()?;
            crate::server::serve(Store::open(store)?, config, bind)?;
        }
    }
    Ok(())
}

fn train_command(init: Option<PathBuf>, args: TrainArgs, mut config: Config) -> Result<()> {
    let t = &mut config.train;
    if let Some(v) = args.epochs {
        t.epochs = v;
    }
    if let Some(v) = args.seed {
        t.seed = v;
    }
    if let Some(v) = args.learning_rate {
        t.learning_rate = v;
    }
    if let Some(v) = args.batch_size {
        t.batch_size = v;
    }
    if let Some(v) = args.tile_size {
        config.tile.out_size = v;
    }
    config.validate()?;
    let init = init.map(ClassifierModel::load).transpose()?;
    let store = Store::open_read_only(&args.store)?;
    let size = init.as_ref().map_or(config.tile.out_size, |m| m.input_size().0);
    let tile = TileParams { out_size: size, ..config.tile.clone() };
    let (train, val) = store.load_split(args.manifest, &config.spectrogram, &tile)?;
    let model = match init {
        Some(m) => {
            check_categories(&m, train.iter().chain(&val))?;
            m
        }
        None => init_model(size, &categories_of(&train, &val), config.train.seed)?,
    };
    let (mut model, history) = train_split_observed(&model, &train, &val, &config.train, &mut |e| {
        eprintln!("epoch {:>3}  train {:.3}  val {:.3}  loss {:.4}", e.epoch, e.train_accuracy, e.val_accuracy, e.train_loss);
    })?;
    for w in &history.warnings {
        eprintln!("warning: {w}");
    }
    model.meta.dataset_version = Some(args.manifest);
    model.save(&args.out)?;
    println!("{} best val {:.4} digest {}", args.out.display(), history.best_val_accuracy().unwrap_or(0.0), model.digest());
    Ok(())
}

fn categories_of(train: &[LabeledTile], val: &[LabeledTile]) -> Vec<CallLabel> {
    let mut cats: Vec<CallLabel> = train.iter().chain(val).map(|t| t.label).collect();
    cats.sort();
    cats.dedup();
    cats
}
