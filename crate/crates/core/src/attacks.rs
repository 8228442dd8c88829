//! Gray-box perturbations driven by classifier gradients only (FGSM, BIM),
//! plus seeded uniform noise.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use ecvae_autodiff::{Graph, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::data::{read_idx_bytes, write_idx_bytes, DataError, ImageShape, LabeledDataset};
use crate::model::{EpistemicModel, ModelError};

pub const DEFAULT_EPSILON: f64 = 0.2;
pub const DEFAULT_BIM_ITERS: usize = 10;
pub const DEFAULT_NOISE_RANGE: f64 = 0.1;
const ATTACK_BATCH: usize = 128;

#[derive(Debug, Error)]
pub enum AttackError {
    #[error("invalid attack config: {0}")]
    Config(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Data(#[from] DataError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AttackMethod {
    Fgsm,
    Bim,
    Uniform,
}

impl fmt::Display for AttackMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AttackMethod::Fgsm => "fgsm",
            AttackMethod::Bim => "bim",
            AttackMethod::Uniform => "uniform",
        })
    }
}

impl FromStr for AttackMethod {
    type Err = AttackError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "fgsm" => Ok(AttackMethod::Fgsm),
            "bim" => Ok(AttackMethod::Bim),
            "uniform" => Ok(AttackMethod::Uniform),
            _ => Err(AttackError::Config(format!("unknown attack method `{s}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AttackConfig {
    pub method: AttackMethod,
    pub epsilon: f64,
    /// Per-step size; `None` means `epsilon / 10`.
    pub bim_alpha: Option<f64>,
    pub bim_iters: usize,
    /// Half-width `r` of the uniform noise interval `[-r, r]`.
    pub noise_range: f64,
    pub seed: u64,
}

impl AttackConfig {
    pub fn new(method: AttackMethod) -> Self {
        Self {
            method,
            epsilon: DEFAULT_EPSILON,
            bim_alpha: None,
            bim_iters: DEFAULT_BIM_ITERS,
            noise_range: DEFAULT_NOISE_RANGE,
            seed: 0,
        }
    }

    pub fn alpha(&self) -> f64 {
        self.bim_alpha.unwrap_or(self.epsilon / 10.0)
    }

    pub fn validate(&self) -> Result<(), AttackError> {
        if !(self.epsilon >= 0.0 && self.epsilon.is_finite()) {
            return Err(AttackError::Config(format!("epsilon must be finite and >= 0, got {}", self.epsilon)));
        }
        if !(self.noise_range >= 0.0 && self.noise_range.is_finite()) {
            return Err(AttackError::Config(format!("noise range must be finite and >= 0, got {}", self.noise_range)));
        }
        if self.method == AttackMethod::Bim {
            let a = self.alpha();
            if self.bim_iters == 0 || !(a >= 0.0) {
                return Err(AttackError::Config("BIM needs iters >= 1 and alpha >= 0".into()));
            }
            // Small slack: alpha = eps / 10 times 10 may round just below eps.
            if a * self.bim_iters as f64 + 1e-12 < self.epsilon {
                return Err(AttackError::Config(format!(
                    "BIM cannot reach epsilon {}: alpha {a} x {} iterations",
                    self.epsilon, self.bim_iters
                )));
            }
        }
        Ok(())
    }
}

fn sign(v: f32) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Nudges a rounded f32 back inside `[lo, hi]` (computed in f64).
fn fit_f32(v: f64, lo: f64, hi: f64) -> f32 {
    let mut r = v as f32;
    while (r as f64) > hi {
        r = r.next_down();
    }
    while (r as f64) < lo {
        r = r.next_up();
    }
    r
}

/// `clip_{x,eps}(clip_[0,1](cur + step * s))` per pixel, with the f32 result
/// guaranteed to satisfy both boxes exactly.
fn project_step(orig: &[f32], cur: &[f32], grad: &[f32], step: f64, eps: f64) -> Vec<f32> {
    orig.iter()
        .zip(cur)
        .zip(grad)
        .map(|((&x0, &xc), &g)| {
            let x0 = x0 as f64;
            let v = (xc as f64 + step * sign(g)).clamp(0.0, 1.0);
            let lo = (x0 - eps).max(0.0);
            let hi = (x0 + eps).min(1.0);
            fit_f32(v.clamp(lo, hi), lo, hi)
        })
        .collect()
}

/// Gradient of the summed per-sample cross-entropy w.r.t. the input batch.
/// Flows through encoder, `mu` and classifier head only.
pub fn input_gradient(
    model: &EpistemicModel<f32>,
    images: &[f32],
    shape: ImageShape,
    labels: &[usize],
) -> Result<Vec<f32>, ModelError> {
    let x = Tensor::new(
        vec![labels.len(), shape.height, shape.width, shape.channels],
        images.to_vec(),
    )
    .map_err(|e| ModelError::Config(e.to_string()))?;
    model.check_images(&x)?;
    let mut g = Graph::new();
    let xi = g.input_with_grad("x", x);
    let logits = model.classify_graph(&mut g, xi)?;
    let ce = g.softmax_cross_entropy(logits, labels)?;
    let loss = g.sum(ce);
    let grads = g.backward(loss)?;
    Ok(grads.wrt(xi).expect("input requires grad").data().to_vec())
}

fn batched(
    images: &[f32],
    shape: ImageShape,
    labels: &[usize],
    mut f: impl FnMut(&[f32], &[usize]) -> Result<Vec<f32>, AttackError>,
) -> Result<Vec<f32>, AttackError> {
    let p = shape.pixels();
    let mut out = Vec::with_capacity(images.len());
    for (imgs, labs) in images.chunks(ATTACK_BATCH * p).zip(labels.chunks(ATTACK_BATCH)) {
        out.extend(f(imgs, labs)?);
    }
    Ok(out)
}

/// One signed-gradient step of size `epsilon` on the true-label loss.
pub fn fgsm(
    model: &EpistemicModel<f32>,
    images: &[f32],
    shape: ImageShape,
    labels: &[usize],
    epsilon: f64,
) -> Result<Vec<f32>, AttackError> {
    batched(images, shape, labels, |x, y| {
        let g = input_gradient(model, x, shape, y)?;
        Ok(project_step(x, x, &g, epsilon, epsilon))
    })
}

/// Iterated signed-gradient steps of size `alpha`, projected back into the
/// `epsilon` box around the original after every step.
pub fn bim(
    model: &EpistemicModel<f32>,
    images: &[f32],
    shape: ImageShape,
    labels: &[usize],
    epsilon: f64,
    alpha: f64,
    iters: usize,
) -> Result<Vec<f32>, AttackError> {
    batched(images, shape, labels, |x, y| {
        let mut cur = x.to_vec();
        for _ in 0..iters {
            let g = input_gradient(model, &cur, shape, y)?;
            cur = project_step(x, &cur, &g, alpha, epsilon);
        }
        Ok(cur)
    })
}

/// Adds i.i.d. `U(-r, r)` noise per pixel and clips to `[0, 1]`. Image `i`
/// draws from stream `i` of the seeded generator, so results do not depend
/// on batching or order.
pub fn uniform_noise(images: &[f32], shape: ImageShape, range: f64, seed: u64) -> Vec<f32> {
    let p = shape.pixels();
    let mut out = Vec::with_capacity(images.len());
    for (i, img) in images.chunks(p).enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(i as u64);
        out.extend(img.iter().map(|&x| {
            let u = if range > 0.0 { rng.random_range(-range..=range) } else { 0.0 };
            let x0 = x as f64;
            let lo = (x0 - range).max(0.0);
            let hi = (x0 + range).min(1.0);
            fit_f32((x0 + u).clamp(lo, hi), lo, hi)
        }));
    }
    out
}

/// Perturbs every image of `data` under `config`.
pub fn attack_dataset(
    model: &EpistemicModel<f32>,
    data: &LabeledDataset,
    config: &AttackConfig,
) -> Result<LabeledDataset, AttackError> {
    config.validate()?;
    let (imgs, shape, y) = (&data.images, data.shape, &data.labels);
    let images = match config.method {
        AttackMethod::Fgsm => fgsm(model, imgs, shape, y, config.epsilon)?,
        AttackMethod::Bim => bim(model, imgs, shape, y, config.epsilon, config.alpha(), config.bim_iters)?,
        AttackMethod::Uniform => uniform_noise(imgs, shape, config.noise_range, config.seed),
    };
    Ok(LabeledDataset::new(shape, images, data.labels.clone(), data.split)?)
}

/// The original set followed by its attacked copy; `flags[i]` marks
/// attacked samples.
pub fn expand_testset(
    model: &EpistemicModel<f32>,
    data: &LabeledDataset,
    config: &AttackConfig,
) -> Result<(LabeledDataset, Vec<bool>), AttackError> {
    let attacked = attack_dataset(model, data, config)?;
    let mut images = data.images.clone();
    images.extend_from_slice(&attacked.images);
    let mut labels = data.labels.clone();
    labels.extend_from_slice(&attacked.labels);
    let flags = (0..2 * data.len()).map(|i| i >= data.len()).collect();
    Ok((LabeledDataset::new(data.shape, images, labels, data.split)?, flags))
}

/// Sidecar flag file: IDX unsigned-byte vector, 1 = attacked.
pub fn write_flags(path: &Path, flags: &[bool]) -> Result<(), DataError> {
    let bytes: Vec<u8> = flags.iter().map(|&f| u8::from(f)).collect();
    write_idx_bytes(path, &bytes)
}

pub fn read_flags(path: &Path) -> Result<Vec<bool>, DataError> {
    Ok(read_idx_bytes(path)?.into_iter().map(|b| b != 0).collect())
}
