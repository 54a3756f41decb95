//! Training loop, evaluation driver and the learning-rate schedule.

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{augment, AugmentToggles, SceneSample};
use crate::error::{Error, Result};
use crate::metrics::{map_values, Evaluator, MetricsReport};
use crate::model::{parse_num, Model};
use crate::tensor::{Adam, AdamConfig, ParamStore, Tape, Tensor};

/// `base_lr * (1 - step / total_steps)^power`, zero past the end.
pub fn poly_lr(step: usize, total_steps: usize, base_lr: f64, power: f64) -> f64 {
    if step > total_steps {
        log::warn!("step {step} is past the schedule end {total_steps}; using lr 0");
        return 0.0;
    }
    if total_steps == 0 {
        return base_lr;
    }
    base_lr * (1.0 - step as f64 / total_steps as f64).powf(power)
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    /// Optimizer steps.
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub poly_power: f64,
    pub weight_decay: f64,
    /// Seeds batch order and augmentation.
    pub seed: u64,
    pub augment: AugmentToggles,
    /// Kept for interface stability; training is always single-threaded and
    /// reproducible.
    pub deterministic: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch: 4,
            lr: 1e-3,
            poly_power: 0.9,
            weight_decay: 1e-4,
            seed: 0,
            augment: AugmentToggles::NONE,
            deterministic: true,
        }
    }
}

impl TrainConfig {
    /// The published protocol (batch 8, lr 1e-4), for reference runs.
    pub fn published() -> Self {
        Self {
            batch: 8,
            lr: 1e-4,
            augment: AugmentToggles::ALL,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.batch == 0 {
            return Err(Error::Config("steps and batch size must be positive".into()));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) || self.poly_power < 0.0 || self.weight_decay < 0.0 {
            return Err(Error::Config(format!(
                "invalid optimizer settings: lr {}, power {}, weight decay {}",
                self.lr, self.poly_power, self.weight_decay
            )));
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            weight_decay: self.weight_decay,
            ..AdamConfig::default()
        }
    }

    pub fn to_pairs(&self) -> Vec<(String, String)> {
        let b = |v: bool| v.to_string();
        vec![
            ("train.steps".into(), self.steps.to_string()),
            ("train.batch".into(), self.batch.to_string()),
            ("train.lr".into(), self.lr.to_string()),
            ("train.poly_power".into(), self.poly_power.to_string()),
            ("train.weight_decay".into(), self.weight_decay.to_string()),
            ("train.seed".into(), self.seed.to_string()),
            ("train.flip".into(), b(self.augment.flip)),
            ("train.rotate".into(), b(self.augment.rotate)),
            ("train.brightness".into(), b(self.augment.brightness)),
            ("train.deterministic".into(), b(self.deterministic)),
        ]
    }

    /// Applies one `key=value` setting; `Ok(false)` for keys outside `train.*`.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        match key {
            "train.steps" => self.steps = parse_num(key, value)?,
            "train.batch" => self.batch = parse_num(key, value)?,
            "train.lr" => self.lr = parse_num(key, value)?,
            "train.poly_power" => self.poly_power = parse_num(key, value)?,
            "train.weight_decay" => self.weight_decay = parse_num(key, value)?,
            "train.seed" => self.seed = parse_num(key, value)?,
            "train.flip" => self.augment.flip = parse_num(key, value)?,
            "train.rotate" => self.augment.rotate = parse_num(key, value)?,
            "train.brightness" => self.augment.brightness = parse_num(key, value)?,
            "train.deterministic" => self.deterministic = parse_num(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }
}

/// One row of the loss log.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossRecord {
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub optimizer: Adam<f32>,
    pub log: Vec<LossRecord>,
}

fn stack(samples: &[SceneSample], pick: impl Fn(&SceneSample) -> &Tensor<f32>) -> Result<Tensor<f32>> {
    let parts: Vec<&Tensor<f32>> = samples.iter().map(pick).collect();
    Tensor::stack(&parts)
}

/// Runs `config.steps` Adam steps of BCE training on `data`, calling
/// `on_step` after each one.
pub fn train(
    model: &Model,
    store: &mut ParamStore<f32>,
    data: &[SceneSample],
    config: &TrainConfig,
    mut on_step: impl FnMut(&LossRecord),
) -> Result<TrainOutcome> {
    config.validate()?;
    if data.is_empty() {
        return Err(Error::Usage("training needs at least one sample".into()));
    }
    for s in data {
        if s.size() != model.config.input_size {
            return Err(Error::dim(
                "train",
                format!(
                    "sample {} is {:?}, model expects {:?}",
                    s.id,
                    s.size(),
                    model.config.input_size
                ),
            ));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut adam = Adam::new(config.adam(), store)?;
    let mut order: Vec<usize> = Vec::new();
    let mut tape = Tape::new();
    let mut log = Vec::with_capacity(config.steps);
    for step in 0..config.steps {
        let lr = poly_lr(step, config.steps, config.lr, config.poly_power);
        let mut batch = Vec::with_capacity(config.batch);
        while batch.len() < config.batch {
            if order.is_empty() {
                order = (0..data.len()).collect();
                order.shuffle(&mut rng);
                order.reverse();
            }
            let s = &data[order.pop().expect("refilled")];
            batch.push(augment(s, &mut rng, config.augment));
        }
        let diverged = |loss: f64| Error::Diverged { step, lr, loss };
        let rgb = tape.constant(stack(&batch, |s| &s.rgb)?);
        let depth = tape.constant(stack(&batch, |s| &s.depth)?);
        let mask = tape.constant(stack(&batch, |s| &s.mask)?);
        let loss = model
            .logits(&mut tape, store, rgb, depth)
            .and_then(|logits| tape.bce_with_logits(logits, mask))
            .map_err(|e| match e {
                Error::NonFinite { .. } => diverged(f64::NAN),
                e => e,
            })?;
        let value = tape.value(loss).item()? as f64;
        if !value.is_finite() {
            return Err(diverged(value));
        }
        let grads = tape.backward(loss).map_err(|e| match e {
            Error::NonFinite { .. } => diverged(value),
            e => e,
        })?;
        store.apply_grads(&grads)?;
        adam.set_lr(lr);
        adam.step(store).map_err(|e| match e {
            Error::NonFinite { .. } => diverged(value),
            e => e,
        })?;
        let rec = LossRecord { step, lr, loss: value };
        on_step(&rec);
        log.push(rec);
    }
    store.zero_grads();
    Ok(TrainOutcome { optimizer: adam, log })
}

/// Writes the loss log as CSV `step,lr,loss`.
pub fn write_loss_log(path: &Path, log: &[LossRecord]) -> Result<()> {
    let mut out = String::from("step,lr,loss\n");
    for r in log {
        out.push_str(&format!("{},{:.9e},{:.9}\n", r.step, r.lr, r.loss));
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))
}

/// Saliency probabilities of one sample.
pub fn predict(model: &Model, store: &ParamStore<f32>, sample: &SceneSample) -> Result<Tensor<f32>> {
    model.forward(store, &sample.rgb, &sample.depth)
}

/// Runs the model on every sample and scores it.
pub fn evaluate(model: &Model, store: &ParamStore<f32>, data: &[SceneSample]) -> Result<MetricsReport> {
    evaluate_with(data, |s| predict(model, store, s))
}

/// Scores predictions from an arbitrary source, e.g. the ground truth itself.
pub fn evaluate_with(
    data: &[SceneSample],
    mut predictor: impl FnMut(&SceneSample) -> Result<Tensor<f32>>,
) -> Result<MetricsReport> {
    if data.is_empty() {
        return Err(Error::Usage("cannot evaluate an empty dataset".into()));
    }
    let mut ev = Evaluator::new();
    for s in data {
        let pred = predictor(s)?;
        let (h, w) = s.size();
        ev.add(&s.id, &map_values(&pred), &map_values(&s.mask), h, w)?;
    }
    ev.finish()
}
