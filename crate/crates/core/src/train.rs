//! Minibatch training with Adam.

use std::io::Write;
use std::path::Path;

use ecvae_autodiff::{Adam, AdamConfig, OptimError, ParamStore};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::LabeledDataset;
use crate::model::{batch_tensor, EpistemicModel, LossBreakdown, ModelError, DEFAULT_LAMBDA_C};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("training diverged at epoch {epoch}, step {step}: `{term}` became non-finite; parameters restored to the last good step")]
    Diverged {
        epoch: usize,
        step: usize,
        term: String,
    },
    #[error("dataset has {found} classes but the model was built for {expected}")]
    ClassCount { found: usize, expected: usize },
    #[error("dataset images are {found:?} but the model expects {expected:?}")]
    ImageShape {
        found: crate::data::ImageShape,
        expected: crate::data::ImageShape,
    },
    #[error("invalid training config: {0}")]
    Config(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Optim(#[from] OptimError),
    #[error("{0}")]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lambda_c: f64,
    pub adam: AdamConfigSerde,
    pub seed: u64,
}

/// Serializable mirror of [`AdamConfig`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfigSerde {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl From<AdamConfigSerde> for AdamConfig {
    fn from(c: AdamConfigSerde) -> Self {
        AdamConfig {
            lr: c.lr,
            beta1: c.beta1,
            beta2: c.beta2,
            eps: c.eps,
        }
    }
}

impl Default for AdamConfigSerde {
    fn default() -> Self {
        let c = AdamConfig::default();
        Self {
            lr: c.lr,
            beta1: c.beta1,
            beta2: c.beta2,
            eps: c.eps,
        }
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: 128,
            lambda_c: DEFAULT_LAMBDA_C,
            adam: AdamConfigSerde::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(TrainError::Config("epochs and batch_size must be positive".into()));
        }
        if !(self.lambda_c >= 0.0 && self.lambda_c.is_finite()) {
            return Err(TrainError::Config(format!("lambda_c must be finite and >= 0, got {}", self.lambda_c)));
        }
        if !(self.adam.lr > 0.0) {
            return Err(TrainError::Config(format!("learning rate must be positive, got {}", self.adam.lr)));
        }
        Ok(())
    }
}

/// Sample-weighted mean of the per-batch loss terms over one epoch.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss: LossBreakdown,
    pub train_accuracy: f64,
}

pub const LOSS_CSV_HEADER: &str =
    "epoch,reconstruction,cross_entropy_qp,entropy_q,kl,classification,lambda_c,total,train_accuracy";

impl EpochLog {
    pub fn csv_row(&self) -> String {
        let l = &self.loss;
        format!(
            "{},{},{},{},{},{},{},{},{}",
            self.epoch,
            l.reconstruction,
            l.cross_entropy_qp,
            l.entropy_q,
            l.kl(),
            l.classification,
            l.lambda_c,
            l.total,
            self.train_accuracy
        )
    }
}

pub fn write_loss_csv(path: &Path, logs: &[EpochLog]) -> std::io::Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "{LOSS_CSV_HEADER}")?;
    for l in logs {
        writeln!(f, "{}", l.csv_row())?;
    }
    f.flush()
}

/// Trains `model` in place. `on_epoch` sees each finished epoch.
///
/// On a non-finite loss term or gradient the parameters are restored to the
/// state after the last successful step and [`TrainError::Diverged`] is
/// returned.
pub fn train(
    model: &mut EpistemicModel<f32>,
    data: &LabeledDataset,
    config: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<Vec<EpochLog>, TrainError> {
    config.validate()?;
    let mc = model.config().clone();
    if data.shape != mc.image {
        return Err(TrainError::ImageShape {
            found: data.shape,
            expected: mc.image,
        });
    }
    if data.n_classes() > mc.n_classes {
        return Err(TrainError::ClassCount {
            found: data.n_classes(),
            expected: mc.n_classes,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut opt = Adam::new(config.adam.into(), model.params());
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut logs = Vec::with_capacity(config.epochs);
    let mut last_good: ParamStore<f32> = model.params().clone();
    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        let mut sum = LossBreakdown::default();
        let mut correct = 0usize;
        for (step, batch) in order.chunks(config.batch_size).enumerate() {
            let x = batch_tensor::<f32>(&data.images, data.shape, batch);
            let labels: Vec<usize> = batch.iter().map(|&i| data.labels[i]).collect();
            let diverged = |term: String| TrainError::Diverged { epoch, step, term };
            let (b, grads, logits) = match model.loss_and_grads(&x, &labels, config.lambda_c, &mut rng) {
                Ok(v) => v,
                Err(ModelError::Divergence { term, .. }) => {
                    *model.params_mut() = last_good;
                    return Err(diverged(term.to_string()));
                }
                Err(e) => return Err(e.into()),
            };
            correct += count_correct(logits.data(), mc.n_classes, &labels);
            match opt.step(model.params_mut(), &grads) {
                Ok(()) => {}
                Err(OptimError::NonFiniteGradient { name }) => {
                    *model.params_mut() = last_good;
                    return Err(diverged(format!("gradient of {name}")));
                }
                Err(e) => return Err(e.into()),
            }
            if !model.params().iter().all(|(_, _, t)| t.all_finite()) {
                *model.params_mut() = last_good;
                return Err(diverged("parameters".into()));
            }
            last_good.clone_from(model.params());
            sum.accumulate(&b, batch.len() as f64 / data.len() as f64);
        }
        let log = EpochLog {
            epoch,
            loss: sum,
            train_accuracy: correct as f64 / data.len() as f64,
        };
        on_epoch(&log);
        logs.push(log);
    }
    Ok(logs)
}

fn count_correct(scores: &[f32], n_classes: usize, labels: &[usize]) -> usize {
    scores
        .chunks(n_classes)
        .zip(labels)
        .filter(|(row, &y)| argmax(row) == y)
        .count()
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax<T: PartialOrd + Copy>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Top-1 accuracy of the classifier over a dataset.
pub fn accuracy(model: &EpistemicModel<f32>, data: &LabeledDataset, batch_size: usize) -> Result<f64, ModelError> {
    let idx: Vec<usize> = (0..data.len()).collect();
    let mut correct = 0;
    for chunk in idx.chunks(batch_size.max(1)) {
        let x = batch_tensor::<f32>(&data.images, data.shape, chunk);
        let labels: Vec<usize> = chunk.iter().map(|&i| data.labels[i]).collect();
        let p = model.classify(&x)?;
        correct += count_correct(p.data(), model.config().n_classes, &labels);
    }
    Ok(correct as f64 / data.len() as f64)
}
