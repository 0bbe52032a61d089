//! Convolutional call classifier: training, validation, resumed training,
//! gradient verification and checkpoints.

mod checkpoint;
mod label;
pub mod network;

use std::collections::BTreeMap;

use ndarray::{Array1, ArrayView2};
use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use checkpoint::{CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use label::{CallLabel, UnknownLabel};
pub use network::{default_architecture, Gradients, LayerSpec, Network, Shape};

use crate::spectrogram::SpectroImage;

#[derive(Debug, Error)]
pub enum ClassifierError {
    #[error("tile is {got:?} but the model expects {expected:?}")]
    ShapeMismatch { expected: (usize, usize), got: (usize, usize) },
    #[error("empty dataset: {0}")]
    EmptyDataset(String),
    #[error("category mismatch: model has {model:?}, dataset has {dataset:?}")]
    CategoryMismatch { model: Vec<CallLabel>, dataset: Vec<CallLabel> },
    #[error("label {0} is not one of the model's categories")]
    UnknownCategory(CallLabel),
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("malformed checkpoint: {0}")]
    MalformedCheckpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, ClassifierError>;

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledTile {
    pub tile: SpectroImage,
    pub label: CallLabel,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub label: CallLabel,
    /// One entry per model category, in the model's category order.
    pub probabilities: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub seed: u64,
    pub val_fraction: f64,
    pub oversample_minority: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { epochs: 30, batch_size: 32, learning_rate: 0.01, momentum: 0.9, seed: 0, val_fraction: 0.2, oversample_minority: true }
    }
}

impl TrainConfig {
    fn check(&self, allow_zero_epochs: bool) -> Result<()> {
        let bad = |m: &str| Err(ClassifierError::InvalidConfig(m.to_string()));
        if self.epochs == 0 && !allow_zero_epochs {
            return bad("epochs must be at least 1");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum must lie in [0, 1)");
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return bad("val_fraction must lie in (0, 1)");
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.check(false)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1-based epoch number counted across resumed runs.
    pub epoch: usize,
    pub train_accuracy: f64,
    pub val_accuracy: f64,
    pub train_loss: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

impl TrainHistory {
    pub fn best_val_accuracy(&self) -> Option<f64> {
        self.epochs.iter().map(|e| e.val_accuracy).fold(None, |a, v| Some(a.map_or(v, |a: f64| a.max(v))))
    }

    pub fn final_val_accuracy(&self) -> Option<f64> {
        self.epochs.last().map(|e| e.val_accuracy)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingMeta {
    pub seed: u64,
    pub epochs_completed: usize,
    #[serde(default)]
    pub dataset_version: Option<u64>,
    /// Every epoch run so far, including earlier runs this model was resumed from.
    #[serde(default)]
    pub history: Vec<EpochRecord>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierModel {
    pub network: Network,
    pub categories: Vec<CallLabel>,
    pub meta: TrainingMeta,
}

/// Fresh model with the default architecture; `categories` fixes output order.
pub fn init_model(input_size: usize, categories: &[CallLabel], seed: u64) -> Result<ClassifierModel> {
    ClassifierModel::with_architecture(input_size, categories, seed, default_architecture(categories.len()))
}

impl ClassifierModel {
    pub fn with_architecture(input_size: usize, categories: &[CallLabel], seed: u64, layers: Vec<LayerSpec>) -> Result<Self> {
        if input_size < 32 {
            return Err(ClassifierError::InvalidInput(format!("input size {input_size} is below 32")));
        }
        if categories.is_empty() {
            return Err(ClassifierError::InvalidInput("no categories".into()));
        }
        let mut seen = categories.to_vec();
        seen.sort();
        seen.dedup();
        if seen.len() != categories.len() {
            return Err(ClassifierError::InvalidInput("duplicate categories".into()));
        }
        let input = Shape { c: 1, h: input_size, w: input_size };
        let network = Network::init(layers, input, seed)
            .ok_or_else(|| ClassifierError::InvalidInput(format!("architecture does not fit a {input_size}x{input_size} input")))?;
        if network.output_len() != categories.len() {
            return Err(ClassifierError::InvalidInput("output width differs from category count".into()));
        }
        Ok(Self { network, categories: categories.to_vec(), meta: TrainingMeta { seed, ..TrainingMeta::default() } })
    }

    pub fn input_size(&self) -> (usize, usize) {
        (self.network.input.h, self.network.input.w)
    }

    fn check_tile(&self, tile: &SpectroImage) -> Result<()> {
        let got = tile.pixels.dim();
        if got != self.input_size() {
            return Err(ClassifierError::ShapeMismatch { expected: self.input_size(), got });
        }
        Ok(())
    }

    fn category_index(&self, label: CallLabel) -> Result<usize> {
        self.categories.iter().position(|&c| c == label).ok_or(ClassifierError::UnknownCategory(label))
    }

    pub fn logits(&self, tile: &SpectroImage) -> Result<Array1<f64>> {
        self.check_tile(tile)?;
        Ok(self.network.logits(tile.pixels.view()))
    }

    pub fn forward(&self, tile: &SpectroImage) -> Result<Prediction> {
        let probs = network::softmax(&self.logits(tile)?);
        let label = self.categories[network::argmax(&probs)];
        Ok(Prediction { label, probabilities: probs.to_vec() })
    }

    pub fn predict_all(&self, tiles: &[SpectroImage]) -> Result<Vec<Prediction>> {
        tiles.iter().map(|t| self.forward(t)).collect()
    }

    /// Probability of `label`, or 0 when the model lacks that category.
    pub fn probability_of(&self, prediction: &Prediction, label: CallLabel) -> f64 {
        self.categories.iter().position(|&c| c == label).map_or(0.0, |i| prediction.probabilities[i])
    }

    pub fn all_weights_finite(&self) -> bool {
        self.network.all_finite()
    }
}

/// Standalone form of [`ClassifierModel::forward`].
pub fn forward(model: &ClassifierModel, tile: &SpectroImage) -> Result<Prediction> {
    model.forward(tile)
}

/// Proportion of tiles whose predicted label equals the ground truth.
pub fn validate(model: &ClassifierModel, val_set: &[LabeledTile]) -> Result<f64> {
    if val_set.is_empty() {
        return Err(ClassifierError::EmptyDataset("validation set is empty".into()));
    }
    let mut correct = 0usize;
    for item in val_set {
        if model.forward(&item.tile)?.label == item.label {
            correct += 1;
        }
    }
    Ok(correct as f64 / val_set.len() as f64)
}

/// Per-category confusion counts `truth -> predicted -> n`.
pub fn confusion(model: &ClassifierModel, set: &[LabeledTile]) -> Result<BTreeMap<CallLabel, BTreeMap<CallLabel, usize>>> {
    let mut out: BTreeMap<CallLabel, BTreeMap<CallLabel, usize>> = BTreeMap::new();
    for item in set {
        let p = model.forward(&item.tile)?;
        *out.entry(item.label).or_default().entry(p.label).or_default() += 1;
    }
    Ok(out)
}

fn round_half_up(x: f64) -> usize {
    (x + 0.5).floor() as usize
}

/// Stratified seeded split into (train, val) index lists.
///
/// Each category with at least two tiles contributes `round_half_up(n * fraction)`
/// tiles to validation, keeping at least one for training.
pub fn stratified_split(labels: &[CallLabel], val_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut by_cat: BTreeMap<CallLabel, Vec<usize>> = BTreeMap::new();
    for (i, &l) in labels.iter().enumerate() {
        by_cat.entry(l).or_default().push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut train, mut val) = (Vec::new(), Vec::new());
    for (_, mut idx) in by_cat {
        idx.shuffle(&mut rng);
        let n = idx.len();
        let k = if n >= 2 { round_half_up(n as f64 * val_fraction).clamp(1, n - 1) } else { 0 };
        val.extend_from_slice(&idx[..k]);
        train.extend_from_slice(&idx[k..]);
    }
    if val.is_empty() && train.len() >= 2 {
        val.push(train.pop().expect("non-empty"));
    }
    train.sort_unstable();
    val.sort_unstable();
    (train, val)
}

/// Splits `dataset` with `config.val_fraction` and trains on the result.
pub fn train(model: &ClassifierModel, dataset: &[LabeledTile], config: &TrainConfig) -> Result<(ClassifierModel, TrainHistory)> {
    config.validate()?;
    if dataset.is_empty() {
        return Err(ClassifierError::EmptyDataset("no labeled tiles".into()));
    }
    let labels: Vec<CallLabel> = dataset.iter().map(|t| t.label).collect();
    let (tr, va) = stratified_split(&labels, config.val_fraction, config.seed);
    let train_set: Vec<LabeledTile> = tr.iter().map(|&i| dataset[i].clone()).collect();
    let val_set: Vec<LabeledTile> = va.iter().map(|&i| dataset[i].clone()).collect();
    train_split(model, &train_set, &val_set, config)
}

/// Trains on an explicit split. `config.val_fraction` is ignored.
pub fn train_split(
    model: &ClassifierModel,
    train_set: &[LabeledTile],
    val_set: &[LabeledTile],
    config: &TrainConfig,
) -> Result<(ClassifierModel, TrainHistory)> {
    config.validate()?;
    run_training(model, train_set, val_set, config, &mut |_| {})
}

/// [`train_split`] reporting each finished epoch to `on_epoch`.
pub fn train_split_observed(
    model: &ClassifierModel,
    train_set: &[LabeledTile],
    val_set: &[LabeledTile],
    config: &TrainConfig,
    on_epoch: &mut dyn FnMut(&EpochRecord),
) -> Result<(ClassifierModel, TrainHistory)> {
    config.validate()?;
    run_training(model, train_set, val_set, config, on_epoch)
}

/// Continues training from `checkpoint`. The set of labels in the data must equal
/// the checkpoint's category list. Zero epochs returns the checkpoint unchanged.
pub fn resume_train(
    checkpoint: &ClassifierModel,
    dataset: &[LabeledTile],
    config: &TrainConfig,
) -> Result<(ClassifierModel, TrainHistory)> {
    check_categories(checkpoint, dataset.iter())?;
    if config.epochs == 0 {
        config.check(true)?;
        return Ok((checkpoint.clone(), TrainHistory::default()));
    }
    train(checkpoint, dataset, config)
}

pub fn resume_train_split(
    checkpoint: &ClassifierModel,
    train_set: &[LabeledTile],
    val_set: &[LabeledTile],
    config: &TrainConfig,
) -> Result<(ClassifierModel, TrainHistory)> {
    check_categories(checkpoint, train_set.iter().chain(val_set))?;
    config.check(true)?;
    if config.epochs == 0 {
        return Ok((checkpoint.clone(), TrainHistory::default()));
    }
    run_training(checkpoint, train_set, val_set, config, &mut |_| {})
}

/// Fails unless the labels present in `data` are exactly the model categories.
pub fn check_categories<'a>(model: &ClassifierModel, data: impl Iterator<Item = &'a LabeledTile>) -> Result<()> {
    let mut present: Vec<CallLabel> = data.map(|t| t.label).collect();
    present.sort();
    present.dedup();
    let mut expected = model.categories.clone();
    expected.sort();
    if present != expected {
        return Err(ClassifierError::CategoryMismatch { model: model.categories.clone(), dataset: present });
    }
    Ok(())
}

fn indexed<'a>(model: &ClassifierModel, set: &'a [LabeledTile]) -> Result<Vec<(ArrayView2<'a, f64>, usize)>> {
    set.iter()
        .map(|t| {
            model.check_tile(&t.tile)?;
            Ok((t.tile.pixels.view(), model.category_index(t.label)?))
        })
        .collect()
}

/// One epoch's visiting order; minority categories are topped up to the
/// majority count by seeded sampling with replacement.
fn epoch_order(targets: &[usize], oversample: bool, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut order: Vec<usize> = (0..targets.len()).collect();
    if oversample {
        let mut by_cat: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (i, &t) in targets.iter().enumerate() {
            by_cat.entry(t).or_default().push(i);
        }
        let max = by_cat.values().map(Vec::len).max().unwrap_or(0);
        for members in by_cat.values() {
            for _ in members.len()..max {
                order.push(members[rng.random_range(0..members.len())]);
            }
        }
    }
    order.shuffle(rng);
    order
}

fn accuracy(net: &Network, set: &[(ArrayView2<f64>, usize)]) -> f64 {
    let correct = set.iter().filter(|(img, t)| network::argmax(&net.logits(*img)) == *t).count();
    correct as f64 / set.len() as f64
}

fn run_training(
    model: &ClassifierModel,
    train_set: &[LabeledTile],
    val_set: &[LabeledTile],
    config: &TrainConfig,
    on_epoch: &mut dyn FnMut(&EpochRecord),
) -> Result<(ClassifierModel, TrainHistory)> {
    if train_set.is_empty() {
        return Err(ClassifierError::EmptyDataset("training split is empty".into()));
    }
    if val_set.is_empty() {
        return Err(ClassifierError::EmptyDataset("validation split is empty".into()));
    }
    let train_data = indexed(model, train_set)?;
    let val_data = indexed(model, val_set)?;
    let targets: Vec<usize> = train_data.iter().map(|(_, t)| *t).collect();

    let mut history = TrainHistory::default();
    let mut distinct = targets.clone();
    distinct.sort_unstable();
    distinct.dedup();
    if distinct.len() < 2 {
        history.warnings.push(format!("single category in training data: {}", model.categories[distinct[0]]));
    }

    let offset = model.meta.epochs_completed;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ (offset as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    let mut net = model.network.clone();
    let mut velocity = Gradients::zeros_for(&net);
    let mut best: Option<(f64, Network)> = None;

    for e in 0..config.epochs {
        let order = epoch_order(&targets, config.oversample_minority, &mut rng);
        let (mut loss_sum, mut correct) = (0.0, 0usize);
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<(ArrayView2<f64>, usize)> = chunk.iter().map(|&i| train_data[i]).collect();
            let (loss, hits, mut grads) = net.batch_gradients(&batch);
            loss_sum += loss;
            correct += hits;
            grads.scale(1.0 / batch.len() as f64);
            sgd_step(&mut net, &mut velocity, &grads, config);
        }
        let record = EpochRecord {
            epoch: offset + e + 1,
            train_accuracy: correct as f64 / order.len() as f64,
            val_accuracy: accuracy(&net, &val_data),
            train_loss: loss_sum / order.len() as f64,
        };
        if best.as_ref().is_none_or(|(b, _)| record.val_accuracy > *b) {
            best = Some((record.val_accuracy, net.clone()));
        }
        on_epoch(&record);
        history.epochs.push(record);
    }

    let (_, best_net) = best.expect("at least one epoch");
    let mut meta = model.meta.clone();
    meta.seed = config.seed;
    meta.epochs_completed = offset + config.epochs;
    meta.history.extend(history.epochs.iter().cloned());
    Ok((ClassifierModel { network: best_net, categories: model.categories.clone(), meta }, history))
}

fn sgd_step(net: &mut Network, velocity: &mut Gradients, grads: &Gradients, config: &TrainConfig) {
    for ((p, v), g) in net.params.iter_mut().zip(velocity.params.iter_mut()).zip(&grads.params) {
        if let (Some(p), Some(v), Some(g)) = (p, v, g) {
            v.weights *= config.momentum;
            v.weights.scaled_add(-config.learning_rate, &g.weights);
            v.bias *= config.momentum;
            v.bias.scaled_add(-config.learning_rate, &g.bias);
            p.weights += &v.weights;
            p.bias += &v.bias;
        }
    }
}

/// Result of comparing analytic and finite-difference gradients.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheck {
    pub max_relative_error: f64,
    pub max_absolute_error: f64,
    pub parameters_checked: usize,
}

impl GradCheck {
    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_relative_error < tolerance
    }
}

pub const GRAD_CHECK_STEP: f64 = 1e-5;
pub const GRAD_CHECK_ABS_FLOOR: f64 = 1e-8;
pub const GRAD_CHECK_MIN_PARAMS: usize = 200;

/// Compares backpropagated gradients of the mean batch loss with central differences.
pub fn grad_check(model: &ClassifierModel, batch: &[LabeledTile]) -> Result<GradCheck> {
    grad_check_with(model, batch, |net, data| {
        let (_, _, mut g) = net.batch_gradients(data);
        g.scale(1.0 / data.len() as f64);
        g
    })
}

/// Like [`grad_check`] but with a caller-supplied analytic gradient.
///
/// Parameters are sampled per tensor with a seeded generator. A parameter whose
/// analytic and numeric gradients differ by at most the absolute floor counts as
/// exact; otherwise the error is relative to the larger magnitude.
pub fn grad_check_with<F>(model: &ClassifierModel, batch: &[LabeledTile], analytic: F) -> Result<GradCheck>
where
    F: Fn(&Network, &[(ArrayView2<f64>, usize)]) -> Gradients,
{
    if batch.is_empty() || batch.len() > 4 {
        return Err(ClassifierError::InvalidInput(format!("grad check needs 1 to 4 tiles, got {}", batch.len())));
    }
    let data = indexed(model, batch)?;
    let grads = analytic(&model.network, &data);

    let mut tensors = Vec::new();
    for (li, p) in model.network.params.iter().enumerate() {
        if let Some(p) = p {
            tensors.push((li, false, p.weights.len()));
            tensors.push((li, true, p.bias.len()));
        }
    }
    let mut quota = GRAD_CHECK_MIN_PARAMS.div_ceil(tensors.len());
    while tensors.iter().map(|t| t.2.min(quota)).sum::<usize>() < GRAD_CHECK_MIN_PARAMS {
        quota += 1;
    }

    let mut rng = ChaCha8Rng::seed_from_u64(model.meta.seed ^ 0x6772_6164);
    let mut net = model.network.clone();
    let (mut max_rel, mut max_abs, mut checked) = (0.0f64, 0.0f64, 0usize);
    for &(layer, bias, len) in &tensors {
        let gp = grads.params[layer].as_ref().expect("parametric layer");
        for idx in index::sample(&mut rng, len, quota.min(len)).into_iter() {
            let a = if bias { gp.bias[idx] } else { gp.weights.as_slice().expect("contiguous")[idx] };
            let orig = *net.param_mut(layer, bias, idx);
            *net.param_mut(layer, bias, idx) = orig + GRAD_CHECK_STEP;
            let up = net.batch_loss(&data);
            *net.param_mut(layer, bias, idx) = orig - GRAD_CHECK_STEP;
            let down = net.batch_loss(&data);
            *net.param_mut(layer, bias, idx) = orig;
            let n = (up - down) / (2.0 * GRAD_CHECK_STEP);
            let diff = (a - n).abs();
            max_abs = max_abs.max(diff);
            if diff > GRAD_CHECK_ABS_FLOOR {
                max_rel = max_rel.max(diff / a.abs().max(n.abs()));
            }
            checked += 1;
        }
    }
    Ok(GradCheck { max_relative_error: max_rel, max_absolute_error: max_abs, parameters_checked: checked })
}
