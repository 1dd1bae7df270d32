//! Epoch loop, validation, history and best-model tracking.

use std::fs;
use std::path::Path;

use indexmap::IndexMap;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamStore, Tape, Var};
use crate::error::{Error, Result};
use crate::model::{LayerGraph, Mode, ModelKind};
use crate::ops::sigmoid_scalar;
use crate::tensor::Tensor;
use crate::train::adam::{adam_step, AdamState};
use crate::train::schedule::PlateauMonitor;
use crate::train::TrainConfig;

/// Supervision for one sample.
#[derive(Debug, Clone, PartialEq)]
pub enum Target {
    /// Binary class label, 0 or 1.
    Class(f32),
    /// Class index per pixel.
    Mask(Vec<u8>),
}

/// One training example; `input` has the model's per-sample shape `[C, s..]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: String,
    pub input: Tensor<f32>,
    pub target: Target,
}

impl Sample {
    pub fn class(id: impl Into<String>, input: Tensor<f32>, label: bool) -> Self {
        Sample { id: id.into(), input, target: Target::Class(if label { 1.0 } else { 0.0 }) }
    }

    pub fn mask(id: impl Into<String>, input: Tensor<f32>, mask: Vec<u8>) -> Self {
        Sample { id: id.into(), input, target: Target::Mask(mask) }
    }
}

/// Mean binary cross-entropy of the logits against 0/1 labels.
pub fn bce_loss(tape: &mut Tape<f32>, logits: Var, labels: &[f32]) -> Result<Var> {
    tape.bce_with_logits(logits, labels)
}

/// Mean per-pixel cross-entropy of class probabilities against a class-index mask.
pub fn pixel_ce_loss(tape: &mut Tape<f32>, probs: Var, mask: &[u8]) -> Result<Var> {
    tape.pixel_cross_entropy(probs, mask)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1-based epoch number.
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_acc: f64,
    /// Learning rate used during the epoch.
    pub lr: f64,
}

pub const HISTORY_HEADER: &str = "epoch,train_loss,val_loss,val_acc,lr";

pub fn history_csv(history: &[EpochRecord]) -> String {
    let mut s = format!("{HISTORY_HEADER}\n");
    for r in history {
        s.push_str(&format!("{},{},{},{},{}\n", r.epoch, r.train_loss, r.val_loss, r.val_acc, r.lr));
    }
    s
}

pub fn write_history_csv(path: &Path, history: &[EpochRecord]) -> Result<()> {
    fs::write(path, history_csv(history)).map_err(|e| Error::io(path, e))
}

/// Parameter and running-statistic values of the best epoch so far.
#[derive(Debug, Clone, PartialEq)]
pub struct BestSnapshot {
    pub epoch: usize,
    pub val_loss: f64,
    pub params: IndexMap<String, Tensor<f32>>,
    pub buffers: IndexMap<String, Tensor<f32>>,
}

/// Loss and accuracy over a sample set.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Evaluation {
    pub loss: f64,
    /// Sample accuracy for classifiers, pixel accuracy for segmenters.
    pub accuracy: f64,
}

/// Training state: everything needed to continue bit-exactly.
#[derive(Debug, Clone)]
pub struct TrainSession {
    pub model: LayerGraph<f32>,
    pub config: TrainConfig,
    pub adam: AdamState,
    pub monitor: PlateauMonitor,
    pub history: Vec<EpochRecord>,
    pub best: Option<BestSnapshot>,
    pub stopped: bool,
}

fn is_segmenter(model: &LayerGraph<f32>) -> bool {
    model.kind() == ModelKind::Unet2d
}

/// Stacks samples into a batch and collects their targets.
fn assemble(samples: &[&Sample]) -> Result<(Tensor<f32>, Vec<f32>, Vec<u8>)> {
    let inputs: Vec<&Tensor<f32>> = samples.iter().map(|s| &s.input).collect();
    let batch = Tensor::stack(&inputs)?;
    let mut labels = Vec::new();
    let mut mask = Vec::new();
    for s in samples {
        match &s.target {
            Target::Class(y) => labels.push(*y),
            Target::Mask(m) => mask.extend_from_slice(m),
        }
    }
    Ok((batch, labels, mask))
}

fn batch_loss(model: &LayerGraph<f32>, tape: &mut Tape<f32>, out: Var, labels: &[f32], mask: &[u8]) -> Result<Var> {
    if is_segmenter(model) {
        pixel_ce_loss(tape, out, mask)
    } else {
        bce_loss(tape, out, labels)
    }
}

/// Number of correct units in a batch: samples for classifiers, pixels for segmenters.
fn correct(model: &LayerGraph<f32>, out: &Tensor<f32>, labels: &[f32], mask: &[u8]) -> (usize, usize) {
    if is_segmenter(model) {
        let pred = argmax_classes(out);
        (pred.iter().zip(mask).filter(|(p, m)| p == m).count(), mask.len())
    } else {
        let hits = out
            .data()
            .iter()
            .zip(labels)
            .filter(|(&z, &y)| (sigmoid_scalar(z as f64) >= 0.5) == (y == 1.0))
            .count();
        (hits, labels.len())
    }
}

/// Per-pixel argmax over the class dim of `[N, C, s..]`; ties go to the lower class.
pub fn argmax_classes(probs: &Tensor<f32>) -> Vec<u8> {
    let (n, c) = (probs.shape()[0], probs.shape()[1]);
    let plane: usize = probs.spatial().iter().product();
    let d = probs.data();
    let mut out = Vec::with_capacity(n * plane);
    for b in 0..n {
        for q in 0..plane {
            let mut best = 0;
            for k in 1..c {
                if d[(b * c + k) * plane + q] > d[(b * c + best) * plane + q] {
                    best = k;
                }
            }
            out.push(best as u8);
        }
    }
    out
}

/// Infer-mode loss and accuracy over `samples` in fixed order.
pub fn evaluate(model: &LayerGraph<f32>, samples: &[Sample], batch_size: usize) -> Result<Evaluation> {
    if samples.is_empty() {
        return Err(Error::invalid("evaluation set is empty"));
    }
    let mut loss = 0.0;
    let (mut hits, mut units) = (0, 0);
    let refs: Vec<&Sample> = samples.iter().collect();
    for chunk in refs.chunks(batch_size.max(1)) {
        let (batch, labels, mask) = assemble(chunk)?;
        let mut pass = model.forward_infer(&batch)?;
        let l = batch_loss(model, &mut pass.tape, pass.output, &labels, &mask)?;
        loss += pass.tape.value(l).item()? as f64 * chunk.len() as f64;
        let (h, u) = correct(model, pass.output_value(), &labels, &mask);
        hits += h;
        units += u;
    }
    Ok(Evaluation { loss: loss / samples.len() as f64, accuracy: hits as f64 / units as f64 })
}

/// Positive-class probability per sample from a classifier.
pub fn predict_probabilities(model: &LayerGraph<f32>, inputs: &[&Tensor<f32>], batch_size: usize) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(inputs.len());
    for chunk in inputs.chunks(batch_size.max(1)) {
        let pass = model.forward_infer(&Tensor::stack(chunk)?)?;
        out.extend(pass.output_value().data().iter().map(|&z| sigmoid_scalar(z as f64)));
    }
    Ok(out)
}

/// Predicted class index per pixel from a segmenter, one mask per input.
pub fn predict_masks(model: &LayerGraph<f32>, inputs: &[&Tensor<f32>], batch_size: usize) -> Result<Vec<Vec<u8>>> {
    let mut out = Vec::with_capacity(inputs.len());
    for chunk in inputs.chunks(batch_size.max(1)) {
        let pass = model.forward_infer(&Tensor::stack(chunk)?)?;
        let pred = argmax_classes(pass.output_value());
        let per = pred.len() / chunk.len();
        out.extend(pred.chunks(per).map(|c| c.to_vec()));
    }
    Ok(out)
}

/// Shuffle generator for one epoch, derived from the master seed.
pub fn epoch_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64);
    rng
}

fn snapshot(store: &ParamStore<f32>) -> IndexMap<String, Tensor<f32>> {
    store.iter().map(|(_, n, p)| (n.to_string(), p.value.clone())).collect()
}

impl TrainSession {
    pub fn new(model: LayerGraph<f32>, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let adam = AdamState::new(model.params());
        let monitor = PlateauMonitor::new(config.learning_rate);
        Ok(TrainSession { model, config, adam, monitor, history: Vec::new(), best: None, stopped: false })
    }

    /// Completed epochs.
    pub fn epoch(&self) -> usize {
        self.history.len()
    }

    pub fn finished(&self) -> bool {
        self.stopped || self.epoch() >= self.config.max_epochs
    }

    fn check_sets(&self, train: &[Sample], val: &[Sample]) -> Result<()> {
        if train.is_empty() || val.is_empty() {
            return Err(Error::invalid("training and validation sets must be nonempty"));
        }
        if !is_segmenter(&self.model) {
            for (name, set) in [("train", train), ("val", val)] {
                let pos = set.iter().filter(|s| s.target == Target::Class(1.0)).count();
                if pos == 0 || pos == set.len() {
                    return Err(Error::invalid(format!("{name} set must contain both classes")));
                }
            }
        }
        Ok(())
    }

    /// One epoch of shuffled mini-batch training followed by validation.
    pub fn run_epoch(&mut self, train: &[Sample], val: &[Sample]) -> Result<EpochRecord> {
        let epoch = self.epoch() + 1;
        let lr = self.monitor.lr;
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut epoch_rng(self.config.seed, epoch));
        let mut total = 0.0;
        for (b, idx) in order.chunks(self.config.batch_size).enumerate() {
            let chunk: Vec<&Sample> = idx.iter().map(|&i| &train[i]).collect();
            let (batch, labels, mask) = assemble(&chunk)?;
            let mut pass = self.model.forward(&batch, Mode::Train)?;
            let l = batch_loss(&self.model, &mut pass.tape, pass.output, &labels, &mask)?;
            let value = pass.tape.value(l).item()? as f64;
            if !value.is_finite() {
                return Err(Error::NonFinite(format!("training loss at epoch {epoch}, batch {}", b + 1)));
            }
            total += value * chunk.len() as f64;
            self.model.params_mut().zero_grad();
            pass.tape.backward(l, self.model.params_mut())?;
            adam_step(self.model.params_mut(), &mut self.adam, lr)
                .map_err(|e| Error::NonFinite(format!("epoch {epoch}, batch {}: {e}", b + 1)))?;
        }
        self.model.params_mut().zero_grad();
        let eval = evaluate(&self.model, val, self.config.batch_size)?;
        if !eval.loss.is_finite() {
            return Err(Error::NonFinite(format!("validation loss at epoch {epoch}")));
        }
        let step = self.monitor.update(eval.loss, &self.config);
        if self.best.as_ref().is_none_or(|b| eval.loss < b.val_loss) {
            self.best = Some(BestSnapshot {
                epoch,
                val_loss: eval.loss,
                params: snapshot(self.model.params()),
                buffers: self.model.buffers().clone(),
            });
        }
        self.stopped = step.stop;
        let record = EpochRecord { epoch, train_loss: total / train.len() as f64, val_loss: eval.loss, val_acc: eval.accuracy, lr };
        self.history.push(record);
        Ok(record)
    }

    /// Runs epochs until `max_epochs` or early stopping.
    pub fn fit(&mut self, train: &[Sample], val: &[Sample]) -> Result<&[EpochRecord]> {
        self.check_sets(train, val)?;
        while !self.finished() {
            let r = self.run_epoch(train, val)?;
            log::info!(
                "epoch {} train_loss {:.4} val_loss {:.4} val_acc {:.4} lr {:e}",
                r.epoch,
                r.train_loss,
                r.val_loss,
                r.val_acc,
                r.lr
            );
        }
        Ok(&self.history)
    }

    /// Copy of the model with the best epoch's values (the current model if no epoch ran).
    pub fn best_model(&self) -> Result<LayerGraph<f32>> {
        let mut m = self.model.clone();
        if let Some(b) = &self.best {
            for (name, v) in &b.params {
                let id = m.params().id(name)?;
                *m.params_mut().value_mut(id) = v.clone();
            }
            *m.buffers_mut() = b.buffers.clone();
        }
        Ok(m)
    }
}
