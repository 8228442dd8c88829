//! Experiment configuration and the train / calibrate / evaluate / report
//! stages. Stages exchange data only through files in the output directory.

use std::path::{Path, PathBuf};

use serde_json::{json, Value};
use thiserror::Error;

use crate::attacks::{attack_dataset, expand_testset, read_flags, write_flags, AttackConfig, AttackError, AttackMethod};
use crate::container::{Container, ContainerError};
use crate::data::{load_idx, split, write_idx, DataError, ImageShape, LabeledDataset, PixelEncoding, Split};
use crate::justify::{
    assert_all, assert_evidence, calibrate, compute_evidence, match_baseline_threshold, write_assertions_csv, Assertion,
    AssertionRecord, CalibrationConfig, CalibrationRule, Evidence, JustificationParams, JustifyError, Mode, Tag,
};
use crate::kv::{KvError, KvFile};
use crate::metrics::{fmt_opt, AugmentedConfusionMatrix, MetricError, ReliabilityMetrics, SsimWindow};
use crate::model::{batch_tensor, ClassifierHead, EpistemicModel, ModelConfig, ModelError};
use crate::neighbors::{NeighborError, NeighborIndex};
use crate::train::{train, write_loss_csv, AdamConfigSerde, EpochLog, TrainConfig, TrainError};

pub const MODEL_FILE: &str = "model.ec";
pub const INDEX_FILE: &str = "index.ec";
pub const PARAMS_FILE: &str = "params.txt";
pub const LOSS_FILE: &str = "loss.csv";
pub const CONFIG_SNAPSHOT: &str = "config.txt";

pub const TRAIN_IMAGES: &str = "train-images-idx3-ubyte";
pub const TRAIN_LABELS: &str = "train-labels-idx1-ubyte";
pub const TEST_IMAGES: &str = "t10k-images-idx3-ubyte";
pub const TEST_LABELS: &str = "t10k-labels-idx1-ubyte";

pub const ATTACKED_IMAGES: &str = "attacked-images-idx3-float";
pub const ATTACKED_LABELS: &str = "attacked-labels-idx1-ubyte";
pub const ATTACKED_FLAGS: &str = "attacked-flags-idx1-ubyte";

/// Failure classes; the CLI maps each to its own exit code.
#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("config: {0}")]
    Config(String),
    #[error("data: {0}")]
    Data(String),
    #[error("model: {0}")]
    Model(String),
    #[error("{0}")]
    Other(String),
}

impl From<KvError> for PipelineError {
    fn from(e: KvError) -> Self {
        match e {
            KvError::Io { .. } => PipelineError::Other(e.to_string()),
            _ => PipelineError::Config(e.to_string()),
        }
    }
}

impl From<DataError> for PipelineError {
    fn from(e: DataError) -> Self {
        PipelineError::Data(e.to_string())
    }
}

impl From<ModelError> for PipelineError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::Config(_) => PipelineError::Config(e.to_string()),
            _ => PipelineError::Model(e.to_string()),
        }
    }
}

impl From<TrainError> for PipelineError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Config(_) => PipelineError::Config(e.to_string()),
            TrainError::ClassCount { .. } | TrainError::ImageShape { .. } => PipelineError::Data(e.to_string()),
            TrainError::Io(_) => PipelineError::Other(e.to_string()),
            _ => PipelineError::Model(e.to_string()),
        }
    }
}

impl From<ContainerError> for PipelineError {
    fn from(e: ContainerError) -> Self {
        PipelineError::Model(e.to_string())
    }
}

impl From<NeighborError> for PipelineError {
    fn from(e: NeighborError) -> Self {
        PipelineError::Model(e.to_string())
    }
}

impl From<JustifyError> for PipelineError {
    fn from(e: JustifyError) -> Self {
        match e {
            JustifyError::Params(_) | JustifyError::Kv(_) => PipelineError::Config(e.to_string()),
            JustifyError::EmptyValidation => PipelineError::Data(e.to_string()),
            JustifyError::Model(m) => m.into(),
            JustifyError::Neighbor(n) => n.into(),
            _ => PipelineError::Other(e.to_string()),
        }
    }
}

impl From<AttackError> for PipelineError {
    fn from(e: AttackError) -> Self {
        match e {
            AttackError::Config(_) => PipelineError::Config(e.to_string()),
            AttackError::Model(m) => m.into(),
            AttackError::Data(d) => d.into(),
        }
    }
}

impl From<MetricError> for PipelineError {
    fn from(e: MetricError) -> Self {
        PipelineError::Data(e.to_string())
    }
}

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> PipelineError + '_ {
    move |e| PipelineError::Other(format!("{}: {e}", path.display()))
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub data_dir: PathBuf,
    pub train_images: Option<PathBuf>,
    pub train_labels: Option<PathBuf>,
    pub test_images: Option<PathBuf>,
    pub test_labels: Option<PathBuf>,
    /// Attack-flag file matching the test set, e.g. written by `attack`.
    pub test_flags: Option<PathBuf>,
    pub validation_fraction: f64,
    /// Use only the first `n` training images (before the split).
    pub train_limit: Option<usize>,
    pub test_limit: Option<usize>,
    pub n_classes: Option<usize>,
    pub latent_dim: usize,
    pub stem_channels: usize,
    pub deep_channels: usize,
    pub head: ClassifierHead,
    pub train: TrainConfig,
    pub calibration: CalibrationConfig,
    pub leaf_size: usize,
    pub modes: Vec<Mode>,
    pub attack: Option<AttackConfig>,
    pub expand: bool,
    pub eval_batch: usize,
    pub seed: u64,
    pub out_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let m = ModelConfig::default();
        Self {
            data_dir: PathBuf::from("data/mnist"),
            train_images: None,
            train_labels: None,
            test_images: None,
            test_labels: None,
            test_flags: None,
            validation_fraction: 0.1,
            train_limit: None,
            test_limit: None,
            n_classes: None,
            latent_dim: m.latent_dim,
            stem_channels: m.stem_channels,
            deep_channels: m.deep_channels,
            head: m.head,
            train: TrainConfig::default(),
            calibration: CalibrationConfig::default(),
            leaf_size: crate::neighbors::DEFAULT_LEAF_SIZE,
            modes: vec![Mode::BaselineSoftmax, Mode::SupportOnly, Mode::ReconstructionOnly, Mode::Combined],
            attack: None,
            expand: false,
            eval_batch: 256,
            seed: 0,
            out_dir: PathBuf::from("out"),
        }
    }
}

fn opt_path(kv: &KvFile, key: &str) -> Option<PathBuf> {
    kv.raw(key).filter(|v| !v.is_empty()).map(PathBuf::from)
}

fn opt_usize(kv: &KvFile, key: &str) -> Result<Option<usize>, KvError> {
    match kv.raw(key) {
        None | Some("") | Some("none") => Ok(None),
        Some(_) => kv.get(key).map(Some),
    }
}

impl ExperimentConfig {
    pub const KEYS: &'static [&'static str] = &[
        "data_dir",
        "train_images",
        "train_labels",
        "test_images",
        "test_labels",
        "test_flags",
        "validation_fraction",
        "train_limit",
        "test_limit",
        "n_classes",
        "latent_dim",
        "stem_channels",
        "deep_channels",
        "classifier_head",
        "classifier_hidden",
        "lambda_c",
        "epochs",
        "batch_size",
        "lr",
        "beta1",
        "beta2",
        "adam_eps",
        "k",
        "percentile_n",
        "calibration_rule",
        "calibrate_correct_only",
        "ssim_window",
        "ssim_window_size",
        "ssim_sigma",
        "leaf_size",
        "modes",
        "attack",
        "epsilon",
        "bim_alpha",
        "bim_iters",
        "noise_range",
        "expand",
        "eval_batch",
        "seed",
        "out_dir",
    ];

    /// Reads a config; absent keys keep their defaults, unknown keys are errors.
    pub fn from_kv(kv: &KvFile) -> Result<Self, PipelineError> {
        if let Some(k) = kv.keys().find(|k| !Self::KEYS.contains(k)) {
            return Err(PipelineError::Config(format!("unknown config key `{k}`")));
        }
        let d = Self::default();
        let seed = kv.get_or("seed", d.seed)?;
        let head = match kv.get_or("classifier_head", "hidden".to_string())?.as_str() {
            "hidden" => ClassifierHead::Hidden {
                hidden: kv.get_or("classifier_hidden", 64usize)?,
            },
            "single_relu" => ClassifierHead::SingleRelu,
            other => return Err(PipelineError::Config(format!("unknown classifier_head `{other}`"))),
        };
        let adam = AdamConfigSerde {
            lr: kv.get_or("lr", d.train.adam.lr)?,
            beta1: kv.get_or("beta1", d.train.adam.beta1)?,
            beta2: kv.get_or("beta2", d.train.adam.beta2)?,
            eps: kv.get_or("adam_eps", d.train.adam.eps)?,
        };
        let train = TrainConfig {
            epochs: kv.get_or("epochs", d.train.epochs)?,
            batch_size: kv.get_or("batch_size", d.train.batch_size)?,
            lambda_c: kv.get_or("lambda_c", d.train.lambda_c)?,
            adam,
            seed,
        };
        let size = kv.get_or("ssim_window_size", 7usize)?;
        let ssim_window = match kv.get_or("ssim_window", "uniform".to_string())?.as_str() {
            "uniform" => SsimWindow::Uniform { size },
            "gaussian" => SsimWindow::Gaussian {
                size,
                sigma: kv.get_or("ssim_sigma", 1.5)?,
            },
            other => return Err(PipelineError::Config(format!("unknown ssim_window `{other}`"))),
        };
        let calibration = CalibrationConfig {
            k: kv.get_or("k", d.calibration.k)?,
            percentile_n: kv.get_or("percentile_n", d.calibration.percentile_n)?,
            rule: kv.get_or("calibration_rule", "joint".to_string())?.parse::<CalibrationRule>()?,
            correct_only: kv.get_or("calibrate_correct_only", false)?,
            ssim_window,
        };
        let modes = match kv.raw("modes") {
            None => d.modes.clone(),
            Some(s) => parse_modes(s)?,
        };
        let attack = match kv.get_or("attack", "none".to_string())?.as_str() {
            "none" => None,
            m => {
                let mut a = AttackConfig::new(m.parse::<AttackMethod>()?);
                a.epsilon = kv.get_or("epsilon", a.epsilon)?;
                a.bim_alpha = match kv.raw("bim_alpha") {
                    None | Some("") | Some("auto") => None,
                    Some(_) => Some(kv.get("bim_alpha")?),
                };
                a.bim_iters = kv.get_or("bim_iters", a.bim_iters)?;
                a.noise_range = kv.get_or("noise_range", a.noise_range)?;
                a.seed = seed;
                a.validate()?;
                Some(a)
            }
        };
        let cfg = Self {
            data_dir: opt_path(kv, "data_dir").unwrap_or(d.data_dir),
            train_images: opt_path(kv, "train_images"),
            train_labels: opt_path(kv, "train_labels"),
            test_images: opt_path(kv, "test_images"),
            test_labels: opt_path(kv, "test_labels"),
            test_flags: opt_path(kv, "test_flags"),
            validation_fraction: kv.get_or("validation_fraction", d.validation_fraction)?,
            train_limit: opt_usize(kv, "train_limit")?,
            test_limit: opt_usize(kv, "test_limit")?,
            n_classes: opt_usize(kv, "n_classes")?,
            latent_dim: kv.get_or("latent_dim", d.latent_dim)?,
            stem_channels: kv.get_or("stem_channels", d.stem_channels)?,
            deep_channels: kv.get_or("deep_channels", d.deep_channels)?,
            head,
            train,
            calibration,
            leaf_size: kv.get_or("leaf_size", d.leaf_size)?,
            modes,
            attack,
            expand: kv.get_or("expand", false)?,
            eval_batch: kv.get_or("eval_batch", d.eval_batch)?,
            seed,
            out_dir: opt_path(kv, "out_dir").unwrap_or(d.out_dir),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        if !(self.validation_fraction > 0.0 && self.validation_fraction < 1.0) {
            return Err(PipelineError::Config(format!(
                "validation_fraction must be in (0, 1), got {}",
                self.validation_fraction
            )));
        }
        if self.eval_batch == 0 || self.leaf_size == 0 || self.calibration.k == 0 {
            return Err(PipelineError::Config("eval_batch, leaf_size and k must be positive".into()));
        }
        let p = self.calibration.percentile_n;
        if !(p > 0.0 && p <= 100.0) {
            return Err(PipelineError::Config(format!("percentile_n must be in (0, 100], got {p}")));
        }
        self.train.validate()?;
        Ok(())
    }

    /// Every key with its resolved value.
    pub fn to_kv(&self) -> KvFile {
        let mut kv = KvFile::default();
        let path = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string()).unwrap_or_default();
        let opt = |v: Option<usize>| v.map_or_else(|| "none".to_string(), |v| v.to_string());
        kv.set("data_dir", self.data_dir.display());
        kv.set("train_images", path(&self.train_images));
        kv.set("train_labels", path(&self.train_labels));
        kv.set("test_images", path(&self.test_images));
        kv.set("test_labels", path(&self.test_labels));
        kv.set("test_flags", path(&self.test_flags));
        kv.set("validation_fraction", self.validation_fraction);
        kv.set("train_limit", opt(self.train_limit));
        kv.set("test_limit", opt(self.test_limit));
        kv.set("n_classes", opt(self.n_classes));
        kv.set("latent_dim", self.latent_dim);
        kv.set("stem_channels", self.stem_channels);
        kv.set("deep_channels", self.deep_channels);
        match self.head {
            ClassifierHead::Hidden { hidden } => {
                kv.set("classifier_head", "hidden");
                kv.set("classifier_hidden", hidden);
            }
            ClassifierHead::SingleRelu => kv.set("classifier_head", "single_relu"),
        }
        kv.set("lambda_c", self.train.lambda_c);
        kv.set("epochs", self.train.epochs);
        kv.set("batch_size", self.train.batch_size);
        kv.set("lr", self.train.adam.lr);
        kv.set("beta1", self.train.adam.beta1);
        kv.set("beta2", self.train.adam.beta2);
        kv.set("adam_eps", self.train.adam.eps);
        kv.set("k", self.calibration.k);
        kv.set("percentile_n", self.calibration.percentile_n);
        kv.set("calibration_rule", self.calibration.rule.as_str());
        kv.set("calibrate_correct_only", self.calibration.correct_only);
        match self.calibration.ssim_window {
            SsimWindow::Uniform { size } => {
                kv.set("ssim_window", "uniform");
                kv.set("ssim_window_size", size);
            }
            SsimWindow::Gaussian { size, sigma } => {
                kv.set("ssim_window", "gaussian");
                kv.set("ssim_window_size", size);
                kv.set("ssim_sigma", sigma);
            }
        }
        kv.set("leaf_size", self.leaf_size);
        kv.set(
            "modes",
            self.modes.iter().map(|m| m.as_str()).collect::<Vec<_>>().join(","),
        );
        match &self.attack {
            None => kv.set("attack", "none"),
            Some(a) => {
                kv.set("attack", a.method);
                kv.set("epsilon", a.epsilon);
                kv.set("bim_alpha", a.bim_alpha.map_or_else(|| "auto".to_string(), |v| v.to_string()));
                kv.set("bim_iters", a.bim_iters);
                kv.set("noise_range", a.noise_range);
            }
        }
        kv.set("expand", self.expand);
        kv.set("eval_batch", self.eval_batch);
        kv.set("seed", self.seed);
        kv.set("out_dir", self.out_dir.display());
        kv
    }

    pub fn write_snapshot(&self, dir: &Path) -> Result<PathBuf, PipelineError> {
        std::fs::create_dir_all(dir).map_err(io(dir))?;
        let path = dir.join(CONFIG_SNAPSHOT);
        self.to_kv().write(&path)?;
        Ok(path)
    }

    fn file(&self, explicit: &Option<PathBuf>, name: &str) -> PathBuf {
        explicit.clone().unwrap_or_else(|| self.data_dir.join(name))
    }

    /// Training images split into `(train, validation)`.
    pub fn load_train_validation(&self) -> Result<(LabeledDataset, LabeledDataset), PipelineError> {
        let mut all = load_idx(
            &self.file(&self.train_images, TRAIN_IMAGES),
            &self.file(&self.train_labels, TRAIN_LABELS),
            Split::Train,
        )?;
        if let Some(n) = self.train_limit {
            all = all.take(n.min(all.len()));
        }
        Ok(split(&all, self.validation_fraction, self.seed)?)
    }

    pub fn load_test(&self) -> Result<LabeledDataset, PipelineError> {
        let mut test = load_idx(
            &self.file(&self.test_images, TEST_IMAGES),
            &self.file(&self.test_labels, TEST_LABELS),
            Split::Test,
        )?;
        if let Some(n) = self.test_limit {
            test = test.take(n.min(test.len()));
        }
        Ok(test)
    }

    pub fn model_config(&self, data: &LabeledDataset) -> ModelConfig {
        ModelConfig {
            image: data.shape,
            latent_dim: self.latent_dim,
            n_classes: self.n_classes.unwrap_or_else(|| data.n_classes()),
            stem_channels: self.stem_channels,
            deep_channels: self.deep_channels,
            head: self.head,
        }
    }
}

pub fn parse_modes(s: &str) -> Result<Vec<Mode>, PipelineError> {
    let modes = s
        .split(',')
        .map(str::trim)
        .filter(|m| !m.is_empty())
        .map(|m| m.parse::<Mode>())
        .collect::<Result<Vec<_>, _>>()?;
    if modes.is_empty() {
        return Err(PipelineError::Config("no evaluation modes given".into()));
    }
    Ok(modes)
}

pub fn load_model(path: &Path) -> Result<EpistemicModel<f32>, PipelineError> {
    if !path.exists() {
        return Err(PipelineError::Model(format!("model checkpoint {} not found", path.display())));
    }
    Ok(EpistemicModel::from_container(&Container::read(path)?)?)
}

pub fn load_index(path: &Path) -> Result<NeighborIndex, PipelineError> {
    if !path.exists() {
        return Err(PipelineError::Model(format!("neighbor index {} not found", path.display())));
    }
    Ok(NeighborIndex::read_from(&Container::read(path)?)?)
}

pub fn load_params(path: &Path) -> Result<JustificationParams, PipelineError> {
    if !path.exists() {
        return Err(PipelineError::Config(format!("params file {} not found", path.display())));
    }
    Ok(JustificationParams::read(path)?)
}

/// Trains from scratch and writes the checkpoint, loss log and config
/// snapshot into `cfg.out_dir`.
pub fn run_train(
    cfg: &ExperimentConfig,
    on_epoch: impl FnMut(&EpochLog),
) -> Result<(EpistemicModel<f32>, Vec<EpochLog>), PipelineError> {
    let (train_set, _) = cfg.load_train_validation()?;
    let mut model = EpistemicModel::<f32>::new(cfg.model_config(&train_set), cfg.seed)?;
    cfg.write_snapshot(&cfg.out_dir)?;
    let logs = train(&mut model, &train_set, &cfg.train, on_epoch)?;
    model.to_container().write(&cfg.out_dir.join(MODEL_FILE))?;
    let loss = cfg.out_dir.join(LOSS_FILE);
    write_loss_csv(&loss, &logs).map_err(io(&loss))?;
    Ok((model, logs))
}

/// Latent means of every image, row-major `[n, latent_dim]`.
pub fn encode_means(model: &EpistemicModel<f32>, data: &LabeledDataset, batch: usize) -> Result<Vec<f32>, PipelineError> {
    let ids: Vec<usize> = (0..data.len()).collect();
    let mut out = Vec::with_capacity(data.len() * model.config().latent_dim);
    for chunk in ids.chunks(batch.max(1)) {
        let x = batch_tensor::<f32>(&data.images, data.shape, chunk);
        out.extend_from_slice(model.encode_mean(&x)?.data());
    }
    Ok(out)
}

pub fn build_index(
    model: &EpistemicModel<f32>,
    train_set: &LabeledDataset,
    leaf_size: usize,
    batch: usize,
) -> Result<NeighborIndex, PipelineError> {
    let mu = encode_means(model, train_set, batch)?;
    Ok(NeighborIndex::build(
        mu,
        train_set.labels.clone(),
        model.config().latent_dim,
        leaf_size,
    )?)
}

/// Builds the neighbor index over the training latents, calibrates the
/// thresholds on the validation split and writes `index.ec` and `params.txt`.
pub fn run_calibrate(
    cfg: &ExperimentConfig,
    model: &EpistemicModel<f32>,
) -> Result<(NeighborIndex, JustificationParams), PipelineError> {
    let (train_set, val) = cfg.load_train_validation()?;
    let index = build_index(model, &train_set, cfg.leaf_size, cfg.eval_batch)?;
    if cfg.calibration.k > index.len() {
        return Err(PipelineError::Config(format!(
            "k = {} exceeds the {} indexed training samples",
            cfg.calibration.k,
            index.len()
        )));
    }
    let evidence = compute_evidence(
        model,
        &index,
        &val,
        cfg.calibration.k,
        &cfg.calibration.ssim_window,
        cfg.eval_batch,
    )?;
    let params = calibrate(&evidence, &val.labels, &cfg.calibration)?;
    std::fs::create_dir_all(&cfg.out_dir).map_err(io(&cfg.out_dir))?;
    let mut c = Container::new();
    index.write_to(&mut c);
    c.write(&cfg.out_dir.join(INDEX_FILE))?;
    params.write(&cfg.out_dir.join(PARAMS_FILE))?;
    cfg.write_snapshot(&cfg.out_dir)?;
    Ok((index, params))
}

/// The evaluated dataset, with per-sample attack flags when attacked.
pub fn evaluation_set(
    cfg: &ExperimentConfig,
    model: &EpistemicModel<f32>,
) -> Result<(LabeledDataset, Option<Vec<bool>>), PipelineError> {
    let test = cfg.load_test()?;
    Ok(match &cfg.attack {
        None => {
            let flags = match &cfg.test_flags {
                None => None,
                Some(p) => {
                    let mut f = read_flags(p)?;
                    if f.len() < test.len() {
                        return Err(PipelineError::Data(format!(
                            "{} holds {} flags for {} test samples",
                            p.display(),
                            f.len(),
                            test.len()
                        )));
                    }
                    f.truncate(test.len());
                    Some(f)
                }
            };
            (test, flags)
        }
        Some(a) if cfg.expand => {
            let (set, flags) = expand_testset(model, &test, a)?;
            (set, Some(flags))
        }
        Some(a) => {
            let n = test.len();
            (attack_dataset(model, &test, a)?, Some(vec![true; n]))
        }
    })
}

/// Writes the evaluation set (attacked per `cfg.attack`) as float IDX plus
/// a flag file. Returns `(images, labels, flags)` paths.
pub fn run_attack(cfg: &ExperimentConfig) -> Result<(PathBuf, PathBuf, PathBuf), PipelineError> {
    if cfg.attack.is_none() {
        return Err(PipelineError::Config("attack needs a method (fgsm, bim or uniform)".into()));
    }
    let model = load_model(&cfg.out_dir.join(MODEL_FILE))?;
    let (data, flags) = evaluation_set(cfg, &model)?;
    let flags = flags.unwrap_or_else(|| vec![false; data.len()]);
    let paths = (
        cfg.out_dir.join(ATTACKED_IMAGES),
        cfg.out_dir.join(ATTACKED_LABELS),
        cfg.out_dir.join(ATTACKED_FLAGS),
    );
    std::fs::create_dir_all(&cfg.out_dir).map_err(io(&cfg.out_dir))?;
    write_idx(&data, &paths.0, &paths.1, PixelEncoding::Float32)?;
    write_flags(&paths.2, &flags)?;
    cfg.write_snapshot(&cfg.out_dir)?;
    Ok(paths)
}

/// Single-input result of `infer`.
#[derive(Clone, Debug)]
pub struct Inference {
    pub evidence: Evidence,
    pub assertion: Assertion,
    pub reconstruction: Vec<f32>,
}

/// Asserts on raw images (`n` images of `shape`, pixels in `[0, 1]`).
pub fn infer(
    model: &EpistemicModel<f32>,
    index: &NeighborIndex,
    params: &JustificationParams,
    shape: ImageShape,
    images: &[f32],
) -> Result<Vec<Inference>, PipelineError> {
    let expected = model.config().image;
    if shape != expected {
        return Err(PipelineError::Data(format!(
            "input images are {}x{}x{}, the model expects {}x{}x{}",
            shape.height, shape.width, shape.channels, expected.height, expected.width, expected.channels
        )));
    }
    let n = images.len() / shape.pixels();
    let data = LabeledDataset::new(shape, images.to_vec(), vec![0; n], Split::Test)?;
    let evidence = compute_evidence(model, index, &data, params.k, &params.ssim_window, 256)?;
    let mut out = Vec::with_capacity(n);
    for (i, ev) in evidence.into_iter().enumerate() {
        let recon = model.forward(&batch_tensor::<f32>(&data.images, shape, &[i]))?.recon;
        out.push(Inference {
            assertion: assert_evidence(&ev, params)?,
            evidence: ev,
            reconstruction: recon.data().to_vec(),
        });
    }
    Ok(out)
}

#[derive(Clone, Debug)]
pub struct ModeReport {
    pub mode: Mode,
    pub params: JustificationParams,
    pub assertions: Vec<Assertion>,
    pub acm: AugmentedConfusionMatrix,
    /// ACMs over the clean and attacked subsets, when flags are known.
    pub clean: Option<AugmentedConfusionMatrix>,
    pub attacked: Option<AugmentedConfusionMatrix>,
}

impl ModeReport {
    pub fn metrics(&self) -> ReliabilityMetrics {
        self.acm.metrics()
    }

    pub fn tags(&self) -> Vec<Tag> {
        self.assertions.iter().map(|a| a.tag).collect()
    }

    pub fn to_json(&self, extra: Value) -> Value {
        let mut meta = json!({
            "mode": self.mode.as_str(),
            "k": self.params.k,
            "percentile_n": self.params.percentile_n,
            "effective_percentile": self.params.effective_percentile,
            "t_mse": self.params.thresholds.t_mse,
            "t_ssim": self.params.thresholds.t_ssim,
        });
        if self.mode == Mode::BaselineSoftmax {
            meta["baseline_log_odds_threshold"] = json!(self.params.baseline_threshold);
            meta["baseline_prob_threshold"] = json!(1.0 / (1.0 + (-self.params.baseline_threshold).exp()));
        }
        if let (Value::Object(m), Value::Object(e)) = (&mut meta, extra) {
            m.extend(e);
        }
        let mut report = self.acm.report_json(meta);
        if let Some(c) = &self.clean {
            report["clean_subset"] = c.metrics().to_json();
        }
        if let Some(a) = &self.attacked {
            report["attacked_subset"] = a.metrics().to_json();
        }
        report
    }
}

/// Assertions and ACMs for each requested mode. The softmax baseline's
/// threshold is set so its IK coverage matches combined mode on `data`.
pub fn evaluate_modes(
    evidence: &[Evidence],
    labels: &[usize],
    flags: Option<&[bool]>,
    params: &JustificationParams,
    modes: &[Mode],
    n_classes: usize,
) -> Result<Vec<ModeReport>, PipelineError> {
    let combined = assert_all(evidence, &params.with_mode(Mode::Combined))?;
    let target = combined.iter().filter(|a| a.tag == Tag::IK).count() as f64 / evidence.len().max(1) as f64;
    let scores: Vec<f64> = evidence.iter().map(|e| e.score).collect();
    let mut baseline = params.with_mode(Mode::BaselineSoftmax);
    baseline.baseline_threshold = match_baseline_threshold(&scores, target);
    let mut out = Vec::new();
    for &mode in modes {
        let p = if mode == Mode::BaselineSoftmax {
            baseline.clone()
        } else {
            params.with_mode(mode)
        };
        let assertions = if mode == Mode::Combined {
            combined.clone()
        } else {
            assert_all(evidence, &p)?
        };
        let tags: Vec<Tag> = assertions.iter().map(|a| a.tag).collect();
        let pred: Vec<usize> = assertions.iter().map(|a| a.predicted).collect();
        let acm = AugmentedConfusionMatrix::build(&tags, &pred, labels, n_classes)?;
        let subset = |want: bool| -> Result<Option<AugmentedConfusionMatrix>, PipelineError> {
            let Some(f) = flags else { return Ok(None) };
            let idx: Vec<usize> = (0..tags.len()).filter(|&i| f[i] == want).collect();
            let pick = |v: &[usize]| idx.iter().map(|&i| v[i]).collect::<Vec<_>>();
            let t: Vec<Tag> = idx.iter().map(|&i| tags[i]).collect();
            Ok(Some(AugmentedConfusionMatrix::build(&t, &pick(&pred), &pick(labels), n_classes)?))
        };
        out.push(ModeReport {
            mode,
            params: p,
            clean: subset(false)?,
            attacked: subset(true)?,
            assertions,
            acm,
        });
    }
    Ok(out)
}

/// Writes `acm_<mode>.json`, `acm_<mode>.txt` and `assertions_<mode>.csv`.
pub fn write_reports(
    dir: &Path,
    reports: &[ModeReport],
    evidence: &[Evidence],
    labels: &[usize],
    flags: Option<&[bool]>,
    extra: &Value,
) -> Result<(), PipelineError> {
    std::fs::create_dir_all(dir).map_err(io(dir))?;
    for r in reports {
        let name = r.mode.as_str();
        let json_path = dir.join(format!("acm_{name}.json"));
        let text = serde_json::to_string_pretty(&r.to_json(extra.clone())).expect("report serializes");
        std::fs::write(&json_path, text + "\n").map_err(io(&json_path))?;
        let txt_path = dir.join(format!("acm_{name}.txt"));
        std::fs::write(&txt_path, r.acm.render_text(&format!("ACM, mode {name}"))).map_err(io(&txt_path))?;
        let csv_path = dir.join(format!("assertions_{name}.csv"));
        let f = std::fs::File::create(&csv_path).map_err(io(&csv_path))?;
        let records = r.assertions.iter().enumerate().map(|(i, a)| AssertionRecord {
            sample_id: i,
            true_label: Some(labels[i]),
            attacked: flags.map(|f| f[i]),
            evidence: &evidence[i],
            assertion: a,
        });
        write_assertions_csv(std::io::BufWriter::new(f), records)?;
    }
    Ok(())
}

/// Summary table over every `acm_*.json` in `dir`.
pub fn summarize_reports(dir: &Path) -> Result<String, PipelineError> {
    let mut rows = Vec::new();
    let entries = std::fs::read_dir(dir).map_err(io(dir))?;
    let mut paths: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.file_name()
                .and_then(|n| n.to_str())
                .is_some_and(|n| n.starts_with("acm_") && n.ends_with(".json"))
        })
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(PipelineError::Data(format!("no acm_*.json reports in {}", dir.display())));
    }
    for p in paths {
        let text = std::fs::read_to_string(&p).map_err(io(&p))?;
        let v: Value = serde_json::from_str(&text).map_err(|e| PipelineError::Data(format!("{}: {e}", p.display())))?;
        let m = &v["metrics"];
        let cell = |x: &Value| match x {
            Value::Number(n) => fmt_opt(n.as_f64()),
            Value::String(s) => s.clone(),
            _ => "?".into(),
        };
        rows.push(format!(
            "{:<20} {:>8} {:>8} {:>8} {:>8} {:>8}",
            v["metadata"]["mode"].as_str().unwrap_or("?"),
            m["total"],
            cell(&m["f_ik"]),
            cell(&m["a_ik"]),
            cell(&m["a_not_ik"]),
            cell(&m["accuracy"]),
        ));
    }
    let mut out = format!(
        "{:<20} {:>8} {:>8} {:>8} {:>8} {:>8}\n",
        "mode", "samples", "F_IK", "A_IK", "A_notIK", "accuracy"
    );
    for r in rows {
        out.push_str(&r);
        out.push('\n');
    }
    Ok(out)
}

/// Loads artifacts from `cfg.out_dir`, evaluates on the configured test set
/// (attacked when configured) and writes one report per mode.
pub fn run_evaluate(cfg: &ExperimentConfig) -> Result<Vec<ModeReport>, PipelineError> {
    let model = load_model(&cfg.out_dir.join(MODEL_FILE))?;
    let index = load_index(&cfg.out_dir.join(INDEX_FILE))?;
    let params = load_params(&cfg.out_dir.join(PARAMS_FILE))?;
    let (data, flags) = evaluation_set(cfg, &model)?;
    let evidence = compute_evidence(&model, &index, &data, params.k, &params.ssim_window, cfg.eval_batch)?;
    let reports = evaluate_modes(
        &evidence,
        &data.labels,
        flags.as_deref(),
        &params,
        &cfg.modes,
        model.config().n_classes,
    )?;
    let extra = json!({
        "attack": cfg.attack.map_or_else(|| "none".to_string(), |a| a.method.to_string()),
        "epsilon": cfg.attack.map(|a| a.epsilon),
        "expand": cfg.expand,
        "samples": data.len(),
    });
    write_reports(&cfg.out_dir, &reports, &evidence, &data.labels, flags.as_deref(), &extra)?;
    cfg.write_snapshot(&cfg.out_dir)?;
    Ok(reports)
}
