//! SGD training with warmup and cosine decay, evaluation, and the two
//! few-shot protocols (base-to-new class generalization and cross-dataset
//! transfer).
//!
//! Training touches only grad-enabled tensors; the frozen backbone is
//! bit-identical before and after, which tests verify by digest.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::data::FewShotDataset;
use crate::error::Error;
use crate::model::PromptModel;
use crate::rng::{shuffle, stream_rng};
use crate::tensor::Tensor;
use crate::Result;

/// Optimizer and protocol settings.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    /// Training examples per class.
    pub shots: usize,
    /// Peak learning rate.
    pub lr: f64,
    pub epochs: usize,
    pub batch_size_train: usize,
    pub batch_size_eval: usize,
    /// Steps of linear warmup; `None` means one epoch's worth.
    pub warmup_steps: Option<usize>,
    /// Learning rate at step zero and at the final step.
    pub min_lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            shots: 16,
            lr: 3.5e-3,
            epochs: 5,
            batch_size_train: 4,
            batch_size_eval: 100,
            warmup_steps: None,
            min_lr: 1e-5,
            momentum: 0.0,
            weight_decay: 0.0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.shots == 0 || self.batch_size_train == 0 || self.batch_size_eval == 0 {
            return Err(Error::Config(String::from(
                "shots and batch sizes must be at least 1",
            )));
        }
        if !(self.lr > 0.0) || !(self.min_lr > 0.0) || self.min_lr > self.lr {
            return Err(Error::Config(format!(
                "need 0 < min_lr <= lr, got min_lr {} and lr {}",
                self.min_lr, self.lr
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) || self.weight_decay < 0.0 {
            return Err(Error::Config(format!(
                "momentum {} must be in [0, 1) and weight decay {} nonnegative",
                self.momentum, self.weight_decay
            )));
        }
        Ok(())
    }
}

/// Linear warmup from `min_lr` to `max_lr`, then cosine decay back to
/// `min_lr` at the final step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LrSchedule {
    pub max_lr: f64,
    pub min_lr: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
}

impl LrSchedule {
    pub fn new(max_lr: f64, min_lr: f64, warmup_steps: usize, total_steps: usize) -> Result<Self> {
        if total_steps == 0 {
            return Err(Error::Config(String::from("schedule needs at least one step")));
        }
        if warmup_steps >= total_steps {
            return Err(Error::Config(format!(
                "warmup of {warmup_steps} steps must be shorter than the {total_steps} total"
            )));
        }
        if !(max_lr > 0.0) || !(min_lr > 0.0) || min_lr > max_lr {
            return Err(Error::Config(format!(
                "need 0 < min_lr <= max_lr, got {min_lr} and {max_lr}"
            )));
        }
        Ok(LrSchedule { max_lr, min_lr, warmup_steps, total_steps })
    }

    /// Derive the schedule for a run: warmup defaults to one epoch's steps,
    /// clamped to leave at least one decay step.
    pub fn from_config(
        config: &TrainConfig,
        steps_per_epoch: usize,
        total_steps: usize,
    ) -> Result<Self> {
        let warmup = config
            .warmup_steps
            .unwrap_or(steps_per_epoch)
            .min(total_steps.saturating_sub(1));
        LrSchedule::new(config.lr, config.min_lr, warmup, total_steps)
    }

    /// Learning rate at a step in `0..total_steps`.
    pub fn lr_at_step(&self, step: usize) -> Result<f64> {
        if step >= self.total_steps {
            return Err(Error::Contract(format!(
                "step {step} outside schedule of {} steps",
                self.total_steps
            )));
        }
        if step == self.warmup_steps {
            return Ok(self.max_lr);
        }
        if step < self.warmup_steps {
            let frac = step as f64 / self.warmup_steps as f64;
            return Ok(self.min_lr + (self.max_lr - self.min_lr) * frac);
        }
        let last = self.total_steps - 1;
        if step == last {
            return Ok(self.min_lr);
        }
        let span = (last - self.warmup_steps) as f64;
        let frac = (step - self.warmup_steps) as f64 / span;
        let cos = libm::cos(core::f64::consts::PI * frac);
        Ok(self.min_lr + (self.max_lr - self.min_lr) * 0.5 * (1.0 + cos))
    }
}

/// Results of a training run or an evaluation pass.
#[derive(Clone, Debug, PartialEq)]
pub struct Metrics {
    /// Overall accuracy in `[0, 1]`.
    pub accuracy: f64,
    /// Accuracy per class id.
    pub per_class_accuracy: Vec<f64>,
    /// Mean loss per epoch (empty for pure evaluation).
    pub loss_curve: Vec<f64>,
    /// Filled by callers that can read a clock; zero inside this crate.
    pub wall_time_seconds: f64,
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Accuracy of the model on a dataset, batched. Parameters are untouched;
/// batching cannot change predictions because probability rows are
/// computed independently per image.
pub fn evaluate(model: &PromptModel, dataset: &FewShotDataset, batch_size: usize) -> Result<Metrics> {
    if batch_size == 0 {
        return Err(Error::Config(String::from("evaluation batch size must be at least 1")));
    }
    dataset.validate()?;
    if dataset.is_empty() {
        return Err(Error::Data(String::from("cannot evaluate on an empty dataset")));
    }
    let weights = model.encode_texts(&dataset.class_names)?;
    let c = dataset.num_classes();
    let mut correct = vec![0usize; c];
    let mut totals = vec![0usize; c];
    let mut start = 0;
    while start < dataset.len() {
        let end = (start + batch_size).min(dataset.len());
        let images = (start..end)
            .map(|i| dataset.image_tensor(i))
            .collect::<Result<Vec<_>>>()?;
        let probs = model.predict_batch(&images, &weights)?;
        let data = probs.to_vec();
        for (offset, i) in (start..end).enumerate() {
            let label = dataset.labels[i];
            totals[label] += 1;
            if argmax(&data[offset * c..(offset + 1) * c]) == label {
                correct[label] += 1;
            }
        }
        start = end;
    }
    let accuracy =
        correct.iter().sum::<usize>() as f64 / dataset.len() as f64;
    let per_class_accuracy = correct
        .iter()
        .zip(&totals)
        .map(|(&c, &t)| if t == 0 { 0.0 } else { c as f64 / t as f64 })
        .collect();
    Ok(Metrics { accuracy, per_class_accuracy, loss_curve: Vec::new(), wall_time_seconds: 0.0 })
}

/// SGD over shuffled batches. Returns final accuracy on the training set
/// plus the per-epoch mean loss curve. Numeric blowups abort with the
/// failing step index.
pub fn train(model: &PromptModel, dataset: &FewShotDataset, config: &TrainConfig) -> Result<Metrics> {
    config.validate()?;
    dataset.validate()?;
    if dataset.is_empty() {
        return Err(Error::Data(String::from("cannot train on an empty dataset")));
    }
    let trainable = model.trainable_params();
    if trainable.is_empty() {
        return Err(Error::Contract(String::from("trainable set empty")));
    }
    let n = dataset.len();
    let steps_per_epoch = n.div_ceil(config.batch_size_train);
    let total_steps = steps_per_epoch * config.epochs;
    let schedule = if total_steps > 0 {
        Some(LrSchedule::from_config(config, steps_per_epoch, total_steps)?)
    } else {
        None
    };
    let mut velocity: Vec<Vec<f64>> =
        trainable.iter().map(|(_, t)| vec![0.0; t.numel()]).collect();
    let mut loss_curve = Vec::with_capacity(config.epochs);
    let mut step = 0;
    for epoch in 0..config.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        let mut rng = stream_rng(config.seed, 10_000 + epoch as u64);
        shuffle(&mut rng, &mut order);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(config.batch_size_train) {
            let images = batch
                .iter()
                .map(|&i| dataset.image_tensor(i))
                .collect::<Result<Vec<_>>>()?;
            let labels: Vec<usize> = batch.iter().map(|&i| dataset.labels[i]).collect();
            model.zero_grads();
            let loss = model
                .batch_loss(&images, &labels, &dataset.class_names)
                .map_err(|e| diverged(e, step))?;
            let loss_value = loss.item()?;
            if !loss_value.is_finite() {
                return Err(Error::TrainingDiverged { step });
            }
            loss.backward()?;
            let lr = schedule.as_ref().unwrap().lr_at_step(step)?;
            for ((_, tensor), vel) in trainable.iter().zip(velocity.iter_mut()) {
                let Some(grad) = tensor.grad() else { continue };
                let mut data = tensor.to_vec();
                for i in 0..data.len() {
                    let mut g = grad[i];
                    if config.weight_decay > 0.0 {
                        g += config.weight_decay * data[i];
                    }
                    let update = if config.momentum > 0.0 {
                        vel[i] = config.momentum * vel[i] + g;
                        vel[i]
                    } else {
                        g
                    };
                    data[i] -= lr * update;
                }
                tensor.set_data(data)?;
            }
            epoch_loss += loss_value;
            step += 1;
        }
        loss_curve.push(epoch_loss / steps_per_epoch as f64);
    }
    let mut metrics = evaluate(model, dataset, config.batch_size_eval)?;
    metrics.loss_curve = loss_curve;
    Ok(metrics)
}

/// Treat numeric failures inside a training step as divergence at that
/// step; structural errors pass through untouched.
fn diverged(e: Error, step: usize) -> Error {
    match e.root() {
        Error::Numeric(_) => Error::TrainingDiverged { step },
        _ => e,
    }
}

/// Outcome of the base-to-new protocol.
#[derive(Clone, Debug, PartialEq)]
pub struct SplitMetrics {
    /// Final metrics on the base-class training shots.
    pub train: Metrics,
    /// Held-out samples of the training classes, classified among them.
    pub base: Metrics,
    /// Samples of the unseen classes, classified among those classes only.
    pub new: Metrics,
}

/// Train on shots from the first half of the classes, then evaluate on the
/// base split's held-out samples and on the entirely unseen second half.
/// Each evaluation restricts the classifier to its own split's classes.
pub fn base_to_new_protocol(
    model: &PromptModel,
    dataset: &FewShotDataset,
    config: &TrainConfig,
) -> Result<SplitMetrics> {
    let (base_all, new_all) = dataset.split_base_new()?;
    let (base_train, base_held) = base_all.split_train_heldout(config.shots, config.seed)?;
    let train_metrics = train(model, &base_train, config)?;
    let base = evaluate(model, &base_held, config.batch_size_eval)?;
    let new = evaluate(model, &new_all, config.batch_size_eval)?;
    Ok(SplitMetrics { train: train_metrics, base, new })
}

/// Outcome of the cross-dataset protocol.
#[derive(Clone, Debug, PartialEq)]
pub struct TransferMetrics {
    /// Final metrics on the training shots.
    pub train: Metrics,
    /// One entry per evaluation dataset, in input order.
    pub evals: Vec<Metrics>,
}

/// Train once on shots from `train_ds`, then evaluate every dataset in
/// `eval_list` with its own class names, in order.
pub fn cross_dataset_protocol(
    model: &PromptModel,
    train_ds: &FewShotDataset,
    eval_list: &[&FewShotDataset],
    config: &TrainConfig,
) -> Result<TransferMetrics> {
    for (i, ds) in eval_list.iter().enumerate() {
        if ds.height != train_ds.height || ds.width != train_ds.width {
            return Err(Error::Data(format!(
                "eval dataset {i} is {}x{} but training images are {}x{}",
                ds.height, ds.width, train_ds.height, train_ds.width
            )));
        }
    }
    let shots = train_ds.sample_few_shot(config.shots, config.seed)?;
    let train_metrics = train(model, &shots, config)?;
    let evals = eval_list
        .iter()
        .map(|ds| evaluate(model, ds, config.batch_size_eval))
        .collect::<Result<Vec<_>>>()?;
    Ok(TransferMetrics { train: train_metrics, evals })
}

/// One image as a tensor list for quick loss probes in tests and tools.
pub fn image_tensors(dataset: &FewShotDataset, indices: &[usize]) -> Result<Vec<Tensor>> {
    indices.iter().map(|&i| dataset.image_tensor(i)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{make_synthetic_dataset, SyntheticSpec};
    use crate::model::ModelConfig;
    use crate::schedule::PromptSchedule;

    fn tiny_model(seed: u64, depth: usize) -> PromptModel {
        let config = ModelConfig {
            num_layers: 2,
            num_heads: 2,
            d_t: 8,
            d_v: 12,
            d_joint: 8,
            mlp_ratio: 2,
            image_size: (8, 8),
            patch: 4,
            vocab_size: 32,
            max_seq_len: 8,
            template_tokens: vec![1, 2],
            ..ModelConfig::default()
        };
        let schedule = if depth == 0 {
            PromptSchedule::plain(2).unwrap()
        } else {
            PromptSchedule::mpl(2, 2, 1, depth).unwrap()
        };
        PromptModel::init(config, schedule, seed).unwrap()
    }

    fn tiny_data(classes: usize, per_class: usize) -> crate::data::FewShotDataset {
        make_synthetic_dataset(&SyntheticSpec {
            classes,
            per_class,
            noise: 0.03,
            height: 8,
            width: 8,
            cell: 4,
            ..SyntheticSpec::default()
        })
        .unwrap()
    }

    fn quick_config(epochs: usize) -> TrainConfig {
        TrainConfig {
            shots: 2,
            epochs,
            batch_size_train: 4,
            batch_size_eval: 16,
            lr: 5e-3,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn warmup_and_cosine_endpoints_are_exact() {
        let s = LrSchedule::new(3.5e-3, 1e-5, 10, 101).unwrap();
        assert_eq!(s.lr_at_step(0).unwrap(), 1e-5);
        assert_eq!(s.lr_at_step(10).unwrap(), 3.5e-3);
        assert_eq!(s.lr_at_step(100).unwrap(), 1e-5);
        // Continuity at the junction.
        let before = s.lr_at_step(9).unwrap();
        assert!((before - 3.5e-3).abs() < 3.5e-4 + 1e-12);
        // Midpoint of the cosine phase.
        let mid = s.lr_at_step(10 + 45).unwrap();
        assert!((mid - (3.5e-3 + 1e-5) / 2.0).abs() < 1e-15);
    }

    #[test]
    fn lr_schedule_rejects_bad_shapes() {
        assert!(LrSchedule::new(1e-3, 1e-5, 5, 5).is_err());
        assert!(LrSchedule::new(1e-3, 1e-5, 0, 0).is_err());
        assert!(LrSchedule::new(1e-5, 1e-3, 0, 10).is_err());
        let s = LrSchedule::new(1e-3, 1e-5, 2, 10).unwrap();
        assert!(matches!(s.lr_at_step(10), Err(Error::Contract(_))));
    }

    #[test]
    fn warmup_is_monotone_and_cosine_decreasing() {
        let s = LrSchedule::new(1e-2, 1e-4, 7, 40).unwrap();
        for step in 1..7 {
            assert!(s.lr_at_step(step).unwrap() > s.lr_at_step(step - 1).unwrap());
        }
        for step in 8..40 {
            assert!(s.lr_at_step(step).unwrap() < s.lr_at_step(step - 1).unwrap());
        }
    }

    #[test]
    fn zero_epochs_leaves_parameters_bit_identical() {
        let model = tiny_model(1, 2);
        let data = tiny_data(2, 3);
        let before = model.trainable_digest();
        let metrics = train(&model, &data, &quick_config(0)).unwrap();
        assert_eq!(model.trainable_digest(), before);
        assert!(metrics.loss_curve.is_empty());
    }

    #[test]
    fn empty_trainable_set_is_a_contract_error() {
        let model = tiny_model(2, 0);
        let data = tiny_data(2, 3);
        let err = train(&model, &data, &quick_config(1)).unwrap_err();
        let msg = format!("{err}");
        assert!(msg.contains("trainable set empty"), "{msg}");
    }

    #[test]
    fn training_is_seed_deterministic_and_leaves_backbone_frozen() {
        let data = tiny_data(2, 3);
        let run = || {
            let model = tiny_model(3, 2);
            let frozen_before = model.frozen_digest();
            let metrics = train(&model, &data, &quick_config(2)).unwrap();
            assert_eq!(model.frozen_digest(), frozen_before);
            (model.trainable_digest(), metrics)
        };
        let (d1, m1) = run();
        let (d2, m2) = run();
        assert_eq!(d1, d2);
        assert_eq!(m1, m2);
    }

    #[test]
    fn training_changes_trainable_parameters() {
        let model = tiny_model(4, 2);
        let data = tiny_data(2, 3);
        let before = model.trainable_digest();
        train(&model, &data, &quick_config(1)).unwrap();
        assert_ne!(model.trainable_digest(), before);
    }

    #[test]
    fn numeric_blowup_aborts_with_step_index() {
        let model = tiny_model(5, 2);
        let data = tiny_data(2, 3);
        // Layer norm rescales arbitrarily large finite values back to order
        // one, so only a genuine overflow can break the forward pass. An
        // infinite parameter turns the first normalization into NaN.
        let (_, t) = &model.trainable_params()[0];
        t.set_data(vec![f64::INFINITY; t.numel()]).unwrap();
        match train(&model, &data, &quick_config(1)) {
            Err(Error::TrainingDiverged { step }) => assert_eq!(step, 0),
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn evaluation_mutates_nothing_and_matches_single_sample_oracle() {
        let model = tiny_model(6, 2);
        let data = tiny_data(3, 4);
        let digest_before = (model.trainable_digest(), model.frozen_digest());
        let batched = evaluate(&model, &data, 5).unwrap();
        assert_eq!((model.trainable_digest(), model.frozen_digest()), digest_before);

        let singles = evaluate(&model, &data, 1).unwrap();
        assert_eq!(batched.accuracy, singles.accuracy);
        assert_eq!(batched.per_class_accuracy, singles.per_class_accuracy);
    }

    #[test]
    fn protocols_run_and_report_per_split() {
        let model = tiny_model(7, 2);
        let data = tiny_data(4, 4);
        let config = TrainConfig { epochs: 1, ..quick_config(1) };
        let out = base_to_new_protocol(&model, &data, &config).unwrap();
        assert!(out.base.accuracy >= 0.0 && out.base.accuracy <= 1.0);
        assert_eq!(out.base.per_class_accuracy.len(), 2);
        assert_eq!(out.new.per_class_accuracy.len(), 2);
    }

    #[test]
    fn cross_dataset_checks_geometry_and_evaluates_in_order() {
        let model = tiny_model(8, 2);
        let data = tiny_data(2, 4);
        let shifted = make_synthetic_dataset(&SyntheticSpec {
            classes: 2,
            per_class: 4,
            noise: 0.03,
            height: 8,
            width: 8,
            cell: 4,
            seed: 9,
            prototype_jitter: 0.1,
            ..SyntheticSpec::default()
        })
        .unwrap();
        let outcome =
            cross_dataset_protocol(&model, &data, &[&data, &shifted], &quick_config(1)).unwrap();
        assert_eq!(outcome.evals.len(), 2);

        let wrong = make_synthetic_dataset(&SyntheticSpec {
            classes: 2,
            per_class: 2,
            noise: 0.03,
            height: 16,
            width: 16,
            cell: 4,
            ..SyntheticSpec::default()
        })
        .unwrap();
        let model2 = tiny_model(8, 2);
        assert!(matches!(
            cross_dataset_protocol(&model2, &data, &[&wrong], &quick_config(1)),
            Err(Error::Data(_))
        ));
    }
}
