//! Fine-tuning: cross-entropy with Adam updates, early stopping with
//! best-weight restoration, and the two-stage cross-validation recipe.

pub mod adam;
pub mod cv;
pub mod early_stop;

use std::collections::{BTreeSet, HashMap};
use std::path::Path;

use candle_core::{DType, Device, Tensor, Var};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::dataio::augment::augment;
use crate::dataio::stack::standardize;
use crate::dataio::StackedSample;
use crate::ensemble::EnsembleModel;
use crate::error::{Error, Result};
use crate::nn::{Backbone, Pass, Snapshot};
use crate::types::{rng_stream, Modality};

pub use adam::{Adam, AdamParams};

pub use self::cv::{cross_validate, cross_validate_samples, CvRun, FoldResult, RecipeConfig, RunLayout};
pub use self::early_stop::{early_stop_update, EarlyStopState, StopDecision};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "defaults::learning_rate")]
    pub learning_rate: f64,
    #[serde(default = "defaults::batch_size")]
    pub batch_size: usize,
    pub max_epochs: usize,
    #[serde(default = "defaults::patience")]
    pub patience: usize,
    #[serde(default)]
    pub min_delta: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "defaults::modality")]
    pub modality: Modality,
    #[serde(default)]
    pub crop: bool,
    /// Random rescale-crop and horizontal flip on training batches.
    #[serde(default = "defaults::augment")]
    pub augment: bool,
    #[serde(default = "defaults::image_side")]
    pub image_side: usize,
}

mod defaults {
    use crate::types::Modality;

    pub fn learning_rate() -> f64 {
        1e-4
    }
    pub fn batch_size() -> usize {
        16
    }
    pub fn patience() -> usize {
        200
    }
    pub fn modality() -> Modality {
        Modality::Bse
    }
    pub fn augment() -> bool {
        true
    }
    pub fn image_side() -> usize {
        crate::dataio::INPUT_SIDE
    }
}

impl TrainConfig {
    pub fn new(max_epochs: usize) -> Self {
        Self {
            learning_rate: defaults::learning_rate(),
            batch_size: defaults::batch_size(),
            max_epochs,
            patience: defaults::patience().min(max_epochs),
            min_delta: 0.0,
            seed: 0,
            modality: defaults::modality(),
            crop: false,
            augment: defaults::augment(),
            image_side: defaults::image_side(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if self.max_epochs == 0 {
            return bad("max_epochs must be positive".into());
        }
        if self.patience == 0 {
            return bad("patience must be positive".into());
        }
        if self.min_delta.is_nan() || self.min_delta < 0.0 {
            return bad(format!("min_delta must be non-negative, got {}", self.min_delta));
        }
        if self.image_side < 32 {
            return bad(format!("image_side {} is below 32", self.image_side));
        }
        Ok(())
    }
}

/// A model split into a frozen prefix, whose output can be cached, and a
/// trainable remainder producing class logits.
pub trait Trainable {
    fn input_channels(&self) -> usize;
    fn frozen_prefix(&self, x: &Tensor) -> Result<Tensor>;
    fn trainable_forward(&self, h: &Tensor, pass: &mut Pass) -> Result<Tensor>;
    fn trainable_vars(&self) -> Vec<Var>;
    fn snapshot(&self) -> Result<Snapshot>;
    fn restore(&self, snap: &Snapshot) -> Result<()>;
}

impl Trainable for Backbone {
    fn input_channels(&self) -> usize {
        Backbone::input_channels(self)
    }

    fn frozen_prefix(&self, x: &Tensor) -> Result<Tensor> {
        self.check_input(x)?;
        self.forward_range(x, 0..self.trainable_start(), &mut Pass::eval())
    }

    fn trainable_forward(&self, h: &Tensor, pass: &mut Pass) -> Result<Tensor> {
        if !self.has_head() {
            return Err(Error::MissingHead);
        }
        self.forward_range(h, self.trainable_start()..self.stages().len(), pass)
    }

    fn trainable_vars(&self) -> Vec<Var> {
        self.store().trainable_vars()
    }

    fn snapshot(&self) -> Result<Snapshot> {
        self.store().snapshot_trainable()
    }

    fn restore(&self, snap: &Snapshot) -> Result<()> {
        self.store().restore_named(snap)
    }
}

impl Trainable for EnsembleModel {
    fn input_channels(&self) -> usize {
        EnsembleModel::input_channels(self)
    }

    fn frozen_prefix(&self, x: &Tensor) -> Result<Tensor> {
        self.features(x)
    }

    fn trainable_forward(&self, h: &Tensor, _pass: &mut Pass) -> Result<Tensor> {
        self.head_logits(h)
    }

    fn trainable_vars(&self) -> Vec<Var> {
        self.head_store().trainable_vars()
    }

    fn snapshot(&self) -> Result<Snapshot> {
        self.head_store().snapshot_trainable()
    }

    fn restore(&self, snap: &Snapshot) -> Result<()> {
        self.head_store().restore_named(snap)
    }
}

/// Standardize and stack samples into an N×C×H×W tensor.
pub fn batch_tensor(samples: &[&StackedSample]) -> Result<Tensor> {
    let first = samples.first().ok_or(Error::EmptyInput("batch"))?;
    let dim = first.tensor.dim();
    let mut data = Vec::with_capacity(samples.len() * dim.0 * dim.1 * dim.2);
    for s in samples {
        if s.tensor.dim() != dim {
            return Err(Error::Shape(format!(
                "batch mixes {:?} and {:?} samples",
                dim,
                s.tensor.dim()
            )));
        }
        let mut t = s.tensor.clone();
        standardize(&mut t, s.modality);
        data.extend(t.iter().copied());
    }
    Ok(Tensor::from_vec(data, (samples.len(), dim.0, dim.1, dim.2), &Device::Cpu)?)
}

fn targets(samples: &[&StackedSample]) -> Result<Tensor> {
    let t: Vec<u32> = samples.iter().map(|s| s.label.index() as u32).collect();
    Ok(Tensor::new(t, &Device::Cpu)?)
}

/// Frozen-prefix outputs keyed by image id. Only valid for one model whose
/// frozen part does not change while the cache is alive.
#[derive(Debug, Default, Clone)]
pub struct PrefixCache {
    rows: HashMap<String, Tensor>,
}

impl PrefixCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Compute prefixes for samples not yet cached, `chunk` at a time.
    pub fn fill<M: Trainable + ?Sized>(&mut self, model: &M, samples: &[&StackedSample], chunk: usize) -> Result<()> {
        let missing: Vec<&StackedSample> = samples
            .iter()
            .copied()
            .filter(|s| !self.rows.contains_key(&s.image_id))
            .collect();
        for part in missing.chunks(chunk.max(1)) {
            let h = model.frozen_prefix(&batch_tensor(part)?)?;
            for (i, s) in part.iter().enumerate() {
                self.rows.insert(s.image_id.clone(), h.narrow(0, i, 1)?);
            }
        }
        Ok(())
    }

    pub fn batch(&self, samples: &[&StackedSample]) -> Result<Tensor> {
        let rows = samples
            .iter()
            .map(|s| {
                self.rows
                    .get(&s.image_id)
                    .ok_or_else(|| Error::Shape(format!("no cached prefix for {}", s.image_id)))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Tensor::cat(&rows, 0)?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub initial_val_loss: f64,
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: Option<usize>,
    pub best_val_loss: f64,
    pub stopped_early: bool,
}

impl TrainHistory {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        for r in &self.epochs {
            w.serialize(r)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

/// Run epochs until `max_epochs` or early stop, snapshotting the trainable
/// weights whenever validation loss improves and restoring the best snapshot
/// at the end. `epoch_fn` trains one epoch and returns
/// `(train_loss, val_loss, val_accuracy)`.
pub fn fit_with_early_stopping<M, F>(
    model: &M,
    initial_val_loss: f64,
    max_epochs: usize,
    patience: usize,
    min_delta: f64,
    mut epoch_fn: F,
) -> Result<TrainHistory>
where
    M: Trainable + ?Sized,
    F: FnMut(usize) -> Result<(f64, f64, f64)>,
{
    let mut state = EarlyStopState::new(patience, min_delta);
    let mut best: Option<Snapshot> = None;
    let mut epochs = Vec::new();
    let mut stopped_early = false;
    for epoch in 0..max_epochs {
        let (train_loss, val_loss, val_accuracy) = epoch_fn(epoch)?;
        epochs.push(EpochRecord {
            epoch,
            train_loss,
            val_loss,
            val_accuracy,
        });
        let decision = early_stop_update(&mut state, val_loss, epoch);
        if state.improved {
            best = Some(model.snapshot()?);
        }
        log::debug!("epoch {epoch}: train {train_loss:.5} val {val_loss:.5} acc {val_accuracy:.3}");
        if decision == StopDecision::Stop {
            stopped_early = true;
            break;
        }
    }
    if let Some(snap) = &best {
        model.restore(snap)?;
    }
    Ok(TrainHistory {
        initial_val_loss,
        epochs,
        best_epoch: state.best_epoch,
        best_val_loss: state.best_val_loss,
        stopped_early,
    })
}

/// Declared patient partition for the runtime leakage guard.
#[derive(Debug, Clone, Default)]
pub struct Partition {
    pub train: BTreeSet<String>,
    pub val: BTreeSet<String>,
}

impl Partition {
    pub fn from_samples(train: &[&StackedSample], val: &[&StackedSample]) -> Self {
        Self {
            train: train.iter().map(|s| s.patient_id.clone()).collect(),
            val: val.iter().map(|s| s.patient_id.clone()).collect(),
        }
    }

    fn check_disjoint(&self) -> Result<()> {
        if let Some(p) = self.train.intersection(&self.val).next() {
            return Err(Error::Leakage(format!("patient {p} is in both train and val")));
        }
        Ok(())
    }

    fn check_members(&self, samples: &[&StackedSample], val: bool) -> Result<()> {
        let (set, name) = if val { (&self.val, "val") } else { (&self.train, "train") };
        for s in samples {
            if !set.contains(&s.patient_id) {
                return Err(Error::Leakage(format!(
                    "image {} of patient {} is outside the declared {name} partition",
                    s.image_id, s.patient_id
                )));
            }
        }
        Ok(())
    }
}

/// Knobs beyond [`TrainConfig`] used by the cross-validation driver.
#[derive(Default)]
pub struct TrainOptions<'a> {
    /// Prefix for the named RNG streams of this run.
    pub stream: String,
    pub partition: Option<Partition>,
    /// Shared frozen-prefix cache, used when augmentation is off.
    pub cache: Option<&'a mut PrefixCache>,
}

pub fn train_loop<M: Trainable + ?Sized>(
    model: &M,
    train: &[&StackedSample],
    val: &[&StackedSample],
    cfg: &TrainConfig,
) -> Result<TrainHistory> {
    train_loop_with(model, train, val, cfg, TrainOptions::default())
}

pub fn train_loop_with<M: Trainable + ?Sized>(
    model: &M,
    train: &[&StackedSample],
    val: &[&StackedSample],
    cfg: &TrainConfig,
    opts: TrainOptions,
) -> Result<TrainHistory> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::EmptySet("train"));
    }
    if val.is_empty() {
        return Err(Error::EmptySet("val"));
    }
    let vars = model.trainable_vars();
    if vars.is_empty() {
        return Err(Error::NoTrainableParameters);
    }
    let partition = opts.partition.unwrap_or_else(|| Partition::from_samples(train, val));
    partition.check_disjoint()?;
    partition.check_members(val, true)?;

    let mut own_cache = PrefixCache::new();
    let cache = opts.cache.unwrap_or(&mut own_cache);
    cache.fill(model, val, cfg.batch_size)?;
    if !cfg.augment {
        cache.fill(model, train, cfg.batch_size)?;
    }

    let mut opt = Adam::new(vars, AdamParams::new(cfg.learning_rate));
    let stream = if opts.stream.is_empty() { "train".to_string() } else { opts.stream };
    let mut order_rng = rng_stream(cfg.seed, &format!("{stream}/order"));
    let mut aug_rng = rng_stream(cfg.seed, &format!("{stream}/augment"));
    let mut drop_rng = rng_stream(cfg.seed, &format!("{stream}/dropout"));

    let evaluate = |cache: &PrefixCache| -> Result<(f64, f64)> {
        let mut loss_sum = 0.0;
        let mut correct = 0usize;
        for part in val.chunks(cfg.batch_size) {
            let logits = model.trainable_forward(&cache.batch(part)?, &mut Pass::eval())?;
            let y = targets(part)?;
            let loss = candle_nn::loss::cross_entropy(&logits, &y)?.to_scalar::<f32>()? as f64;
            loss_sum += loss * part.len() as f64;
            let pred = logits.argmax(1)?.to_vec1::<u32>()?;
            correct += pred
                .iter()
                .zip(part)
                .filter(|(p, s)| **p as usize == s.label.index())
                .count();
        }
        Ok((loss_sum / val.len() as f64, correct as f64 / val.len() as f64))
    };

    let (initial_val_loss, _) = evaluate(cache)?;
    let mut order: Vec<usize> = (0..train.len()).collect();
    fit_with_early_stopping(model, initial_val_loss, cfg.max_epochs, cfg.patience, cfg.min_delta, |epoch| {
        order.shuffle(&mut order_rng);
        let mut loss_sum = 0.0;
        for (b, idx) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<&StackedSample> = idx.iter().map(|&i| train[i]).collect();
            partition.check_members(&batch, false)?;
            let h = if cfg.augment {
                let augmented: Vec<StackedSample> = batch.iter().map(|s| augment(s, &mut aug_rng)).collect();
                let refs: Vec<&StackedSample> = augmented.iter().collect();
                model.frozen_prefix(&batch_tensor(&refs)?)?
            } else {
                cache.batch(&batch)?
            };
            let logits = model.trainable_forward(&h, &mut Pass::train(&mut drop_rng))?;
            let loss = candle_nn::loss::cross_entropy(&logits, &targets(&batch)?)?;
            let value = loss.to_scalar::<f32>()?;
            if !value.is_finite() {
                return Err(Error::NonFiniteLoss { epoch, batch: b, value });
            }
            opt.backward_step(&loss)?;
            loss_sum += value as f64 * batch.len() as f64;
        }
        let (val_loss, val_acc) = evaluate(cache)?;
        Ok((loss_sum / train.len() as f64, val_loss, val_acc))
    })
}

/// Evaluation-mode probabilities for samples, `chunk` at a time.
pub fn predict_rows(model: &crate::model::Model, samples: &[&StackedSample], chunk: usize) -> Result<Vec<[f64; 2]>> {
    let mut out = Vec::with_capacity(samples.len());
    for part in samples.chunks(chunk.max(1)) {
        out.extend(model.probability_rows(&batch_tensor(part)?)?);
    }
    Ok(out)
}

/// Probabilities through a trainable model using cached prefixes.
pub fn predict_cached<M: Trainable + ?Sized>(model: &M, cache: &mut PrefixCache, samples: &[&StackedSample], chunk: usize) -> Result<Vec<[f64; 2]>> {
    cache.fill(model, samples, chunk)?;
    let mut out = Vec::with_capacity(samples.len());
    for part in samples.chunks(chunk.max(1)) {
        let logits = model.trainable_forward(&cache.batch(part)?, &mut Pass::eval())?;
        let p = candle_nn::ops::softmax_last_dim(&logits)?.to_dtype(DType::F64)?.to_vec2::<f64>()?;
        out.extend(p.into_iter().map(|r| [r[0], r[1]]));
    }
    Ok(out)
}
