//! VAE co-trained with a classifier head.
//!
//! Encoder: stride-2 conv stem, residual block, stride-2 conv, residual
//! block, then two dense heads for `mu` and `logvar`. The decoder mirrors it
//! with nearest-neighbour upsampling. The classifier reads `mu` only.

use ecvae_autodiff::{Gradients, Graph, GraphError, ParamId, ParamStore, Real, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::container::{Container, ContainerError};
use crate::data::ImageShape;

pub const DEFAULT_LATENT_DIM: usize = 16;
pub const DEFAULT_LAMBDA_C: f64 = 50.0;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("input has shape {got:?}, expected [batch, {h}, {w}, {c}]", h = expected.height, w = expected.width, c = expected.channels)]
    InputShape { got: Vec<usize>, expected: ImageShape },
    #[error("latent batch has shape {got:?}, expected [batch, {latent_dim}]")]
    LatentShape { got: Vec<usize>, latent_dim: usize },
    #[error("{0} labels for a batch of {1}")]
    LabelCount(usize, usize),
    #[error("label {label} out of range for {n_classes} classes")]
    Label { label: usize, n_classes: usize },
    #[error("loss term `{term}` is not finite ({value})")]
    Divergence { term: &'static str, value: f64 },
    #[error("checkpoint parameter `{name}`: {detail}")]
    Checkpoint { name: String, detail: String },
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Container(#[from] ContainerError),
}

/// Shape of the classifier head on top of `mu`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ClassifierHead {
    /// `mu -> dense(hidden, ReLU) -> dense(n_classes)`.
    Hidden { hidden: usize },
    /// `mu -> dense(n_classes) -> ReLU`; the ReLU output is used as logits.
    SingleRelu,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub image: ImageShape,
    pub latent_dim: usize,
    pub n_classes: usize,
    /// Channels after the stem (at 1/2 resolution).
    pub stem_channels: usize,
    /// Channels after the second downsampling (at 1/4 resolution).
    pub deep_channels: usize,
    pub head: ClassifierHead,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            image: ImageShape::new(28, 28, 1),
            latent_dim: DEFAULT_LATENT_DIM,
            n_classes: 10,
            stem_channels: 16,
            deep_channels: 32,
            head: ClassifierHead::Hidden { hidden: 64 },
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let s = self.image;
        if s.height == 0 || s.width == 0 || s.channels == 0 {
            return Err(ModelError::Config("image dimensions must be positive".into()));
        }
        if s.height % 4 != 0 || s.width % 4 != 0 {
            return Err(ModelError::Config(format!(
                "image {}x{} must be divisible by 4 for two stride-2 stages",
                s.height, s.width
            )));
        }
        if self.latent_dim == 0 || self.n_classes < 2 || self.stem_channels == 0 || self.deep_channels == 0 {
            return Err(ModelError::Config(
                "latent_dim, channel widths must be positive and n_classes >= 2".into(),
            ));
        }
        if let ClassifierHead::Hidden { hidden: 0 } = self.head {
            return Err(ModelError::Config("classifier hidden width must be positive".into()));
        }
        Ok(())
    }

    fn bottleneck(&self) -> (usize, usize, usize) {
        (self.image.height / 4, self.image.width / 4, self.deep_channels)
    }
}

#[derive(Clone, Copy, Debug)]
struct Conv {
    w: ParamId,
    b: ParamId,
    stride: usize,
}

#[derive(Clone, Copy, Debug)]
struct Dense {
    w: ParamId,
    b: ParamId,
}

#[derive(Clone, Copy, Debug)]
struct ResBlock {
    c1: Conv,
    c2: Conv,
}

#[derive(Clone, Copy, Debug)]
enum Head {
    Hidden { hidden: Dense, out: Dense },
    SingleRelu(Dense),
}

#[derive(Clone, Copy, Debug)]
struct Layers {
    stem: Conv,
    enc_rb1: ResBlock,
    down: Conv,
    enc_rb2: ResBlock,
    mu: Dense,
    logvar: Dense,
    dec_in: Dense,
    dec_rb2: ResBlock,
    up: Conv,
    dec_rb1: ResBlock,
    out: Conv,
    head: Head,
}

/// Parameter layout as `(name, shape, fan_in)`, in creation order.
fn layout(cfg: &ModelConfig) -> Vec<(String, Vec<usize>, usize)> {
    let mut v = Vec::new();
    let c = cfg.image.channels;
    let (s, d, z) = (cfg.stem_channels, cfg.deep_channels, cfg.latent_dim);
    let (bh, bw, _) = cfg.bottleneck();
    let flat = bh * bw * d;
    let mut conv = |name: &str, cin: usize, cout: usize| {
        v.push((format!("{name}.w"), vec![3, 3, cin, cout], 9 * cin));
        v.push((format!("{name}.b"), vec![cout], 0));
    };
    conv("enc.stem", c, s);
    conv("enc.rb1.c1", s, s);
    conv("enc.rb1.c2", s, s);
    conv("enc.down", s, d);
    conv("enc.rb2.c1", d, d);
    conv("enc.rb2.c2", d, d);
    conv("dec.rb2.c1", d, d);
    conv("dec.rb2.c2", d, d);
    conv("dec.up", d, s);
    conv("dec.rb1.c1", s, s);
    conv("dec.rb1.c2", s, s);
    conv("dec.out", s, c);
    let mut dense = |name: &str, i: usize, o: usize| {
        v.push((format!("{name}.w"), vec![i, o], i));
        v.push((format!("{name}.b"), vec![o], 0));
    };
    dense("enc.mu", flat, z);
    dense("enc.logvar", flat, z);
    dense("dec.in", z, flat);
    match cfg.head {
        ClassifierHead::Hidden { hidden } => {
            dense("cls.hidden", z, hidden);
            dense("cls.out", hidden, cfg.n_classes);
        }
        ClassifierHead::SingleRelu => dense("cls.out", z, cfg.n_classes),
    }
    v
}

fn resolve(cfg: &ModelConfig, params: &ParamStore<impl Real>) -> Result<Layers, ModelError> {
    let id = |name: &str| {
        params.find(name).ok_or_else(|| ModelError::Checkpoint {
            name: name.to_string(),
            detail: "missing".into(),
        })
    };
    let conv = |name: &str, stride: usize| -> Result<Conv, ModelError> {
        Ok(Conv {
            w: id(&format!("{name}.w"))?,
            b: id(&format!("{name}.b"))?,
            stride,
        })
    };
    let dense = |name: &str| -> Result<Dense, ModelError> {
        Ok(Dense {
            w: id(&format!("{name}.w"))?,
            b: id(&format!("{name}.b"))?,
        })
    };
    let rb = |name: &str| -> Result<ResBlock, ModelError> {
        Ok(ResBlock {
            c1: conv(&format!("{name}.c1"), 1)?,
            c2: conv(&format!("{name}.c2"), 1)?,
        })
    };
    Ok(Layers {
        stem: conv("enc.stem", 2)?,
        enc_rb1: rb("enc.rb1")?,
        down: conv("enc.down", 2)?,
        enc_rb2: rb("enc.rb2")?,
        mu: dense("enc.mu")?,
        logvar: dense("enc.logvar")?,
        dec_in: dense("dec.in")?,
        dec_rb2: rb("dec.rb2")?,
        up: conv("dec.up", 1)?,
        dec_rb1: rb("dec.rb1")?,
        out: conv("dec.out", 1)?,
        head: match cfg.head {
            ClassifierHead::Hidden { .. } => Head::Hidden {
                hidden: dense("cls.hidden")?,
                out: dense("cls.out")?,
            },
            ClassifierHead::SingleRelu => Head::SingleRelu(dense("cls.out")?),
        },
    })
}

/// Per-sample latent statistics for a batch, each `[batch, latent_dim]`.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentCode<T> {
    pub mu: Tensor<T>,
    pub logvar: Tensor<T>,
    /// `mu + exp(logvar / 2) * noise`.
    pub sample: Tensor<T>,
    pub noise: Tensor<T>,
}

/// Deterministic forward pass `g(x)`: class distribution and reconstruction
/// decoded from `mu`.
#[derive(Clone, Debug, PartialEq)]
pub struct ForwardOutput<T> {
    pub logits: Tensor<T>,
    pub probs: Tensor<T>,
    pub recon: Tensor<T>,
    pub mu: Tensor<T>,
    pub logvar: Tensor<T>,
}

/// The four terms of the training objective, averaged over the batch.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    /// Bernoulli negative log-likelihood, summed over pixels.
    pub reconstruction: f64,
    /// `H(Q, P)` against the standard normal prior.
    pub cross_entropy_qp: f64,
    /// `H(Q)`; enters the objective with a negative sign.
    pub entropy_q: f64,
    /// Categorical cross-entropy of the classifier on `mu`.
    pub classification: f64,
    pub lambda_c: f64,
    pub total: f64,
}

impl LossBreakdown {
    /// `H(Q, P) - H(Q)`, the Gaussian KL divergence to the prior.
    pub fn kl(&self) -> f64 {
        self.cross_entropy_qp - self.entropy_q
    }

    pub fn neg_entropy_q(&self) -> f64 {
        -self.entropy_q
    }

    fn scaled(&self, w: f64) -> Self {
        Self {
            reconstruction: self.reconstruction * w,
            cross_entropy_qp: self.cross_entropy_qp * w,
            entropy_q: self.entropy_q * w,
            classification: self.classification * w,
            lambda_c: self.lambda_c,
            total: self.total * w,
        }
    }

    pub(crate) fn accumulate(&mut self, other: &Self, weight: f64) {
        let o = other.scaled(weight);
        self.reconstruction += o.reconstruction;
        self.cross_entropy_qp += o.cross_entropy_qp;
        self.entropy_q += o.entropy_q;
        self.classification += o.classification;
        self.total += o.total;
        self.lambda_c = other.lambda_c;
    }
}

/// Loss nodes on a graph.
#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub reconstruction: Var,
    pub cross_entropy_qp: Var,
    pub entropy_q: Var,
    pub classification: Var,
    pub total: Var,
    pub class_logits: Var,
    pub mu: Var,
    pub logvar: Var,
    pub noise: Var,
}

#[derive(Clone, Debug)]
pub struct EpistemicModel<T> {
    config: ModelConfig,
    params: ParamStore<T>,
    layers: Layers,
}

impl<T: Real> EpistemicModel<T> {
    /// He-initialised model; biases start at zero.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        for (name, shape, fan_in) in layout(&config) {
            let n: usize = shape.iter().product();
            let data = if fan_in == 0 {
                vec![T::zero(); n]
            } else {
                let std = (2.0 / fan_in as f64).sqrt();
                let normal = Normal::new(0.0, std).expect("positive std");
                (0..n).map(|_| T::lit(normal.sample(&mut rng))).collect()
            };
            params.add(name, Tensor::new(shape, data).expect("layout shapes are consistent"));
        }
        let layers = resolve(&config, &params)?;
        Ok(Self {
            config,
            params,
            layers,
        })
    }

    /// Rebuilds a model from named parameters, checking every name and shape
    /// against the layout implied by `config`.
    pub fn from_params(config: ModelConfig, params: ParamStore<T>) -> Result<Self, ModelError> {
        config.validate()?;
        let expected = layout(&config);
        if expected.len() != params.len() {
            return Err(ModelError::Checkpoint {
                name: "*".into(),
                detail: format!("expected {} tensors, found {}", expected.len(), params.len()),
            });
        }
        for (name, shape, _) in &expected {
            let id = params.find(name).ok_or_else(|| ModelError::Checkpoint {
                name: name.clone(),
                detail: "missing".into(),
            })?;
            let got = params.get(id).expect("found").shape();
            if got != shape.as_slice() {
                return Err(ModelError::Checkpoint {
                    name: name.clone(),
                    detail: format!("shape {got:?}, expected {shape:?}"),
                });
            }
        }
        let layers = resolve(&config, &params)?;
        Ok(Self {
            config,
            params,
            layers,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn cast<U: Real>(&self) -> EpistemicModel<U> {
        EpistemicModel {
            config: self.config.clone(),
            params: self.params.cast(),
            layers: self.layers,
        }
    }

    /// Zeroes the weights and biases of the `mu` and `logvar` heads.
    pub fn zero_latent_heads(&mut self) {
        let l = self.layers;
        for id in [l.mu.w, l.mu.b, l.logvar.w, l.logvar.b] {
            self.params.get_mut(id).expect("layer id").data_mut().fill(T::zero());
        }
    }

    pub fn check_images(&self, x: &Tensor<T>) -> Result<usize, ModelError> {
        let s = x.shape();
        let e = self.config.image;
        if s.len() != 4 || s[1] != e.height || s[2] != e.width || s[3] != e.channels {
            return Err(ModelError::InputShape {
                got: s.to_vec(),
                expected: e,
            });
        }
        Ok(s[0])
    }

    fn check_labels(&self, labels: &[usize], batch: usize) -> Result<(), ModelError> {
        if labels.len() != batch {
            return Err(ModelError::LabelCount(labels.len(), batch));
        }
        if let Some(&label) = labels.iter().find(|&&l| l >= self.config.n_classes) {
            return Err(ModelError::Label {
                label,
                n_classes: self.config.n_classes,
            });
        }
        Ok(())
    }

    fn conv(&self, g: &mut Graph<T>, x: Var, c: Conv) -> Result<Var, ModelError> {
        let w = g.param(&self.params, c.w)?;
        let b = g.param(&self.params, c.b)?;
        let y = g.conv2d(x, w, c.stride, 1)?;
        Ok(g.add_bias(y, b)?)
    }

    fn dense(&self, g: &mut Graph<T>, x: Var, d: Dense) -> Result<Var, ModelError> {
        let w = g.param(&self.params, d.w)?;
        let b = g.param(&self.params, d.b)?;
        let y = g.matmul(x, w)?;
        Ok(g.add_bias(y, b)?)
    }

    fn res_block(&self, g: &mut Graph<T>, x: Var, rb: ResBlock) -> Result<Var, ModelError> {
        let h = self.conv(g, x, rb.c1)?;
        let h = g.relu(h);
        let h = self.conv(g, h, rb.c2)?;
        let s = g.add(x, h)?;
        Ok(g.relu(s))
    }

    /// Encoder path on a graph; returns `(mu, logvar)`, each `[batch, latent_dim]`.
    pub fn encode_graph(&self, g: &mut Graph<T>, x: Var) -> Result<(Var, Var), ModelError> {
        let l = &self.layers;
        let batch = g.shape(x)[0];
        let h = self.conv(g, x, l.stem)?;
        let h = g.relu(h);
        let h = self.res_block(g, h, l.enc_rb1)?;
        let h = self.conv(g, h, l.down)?;
        let h = g.relu(h);
        let h = self.res_block(g, h, l.enc_rb2)?;
        let (bh, bw, d) = self.config.bottleneck();
        let flat = g.reshape(h, &[batch, bh * bw * d])?;
        let mu = self.dense(g, flat, l.mu)?;
        let logvar = self.dense(g, flat, l.logvar)?;
        Ok((mu, logvar))
    }

    /// Decoder path on a graph; returns pre-sigmoid logits shaped like the input images.
    pub fn decode_graph(&self, g: &mut Graph<T>, z: Var) -> Result<Var, ModelError> {
        let l = &self.layers;
        let batch = g.shape(z)[0];
        let (bh, bw, d) = self.config.bottleneck();
        let h = self.dense(g, z, l.dec_in)?;
        let h = g.relu(h);
        let h = g.reshape(h, &[batch, bh, bw, d])?;
        let h = self.res_block(g, h, l.dec_rb2)?;
        let h = g.upsample2x(h)?;
        let h = self.conv(g, h, l.up)?;
        let h = g.relu(h);
        let h = self.res_block(g, h, l.dec_rb1)?;
        let h = g.upsample2x(h)?;
        self.conv(g, h, l.out)
    }

    /// Classifier head on a graph; returns logits `[batch, n_classes]`.
    pub fn head_graph(&self, g: &mut Graph<T>, mu: Var) -> Result<Var, ModelError> {
        match self.layers.head {
            Head::Hidden { hidden, out } => {
                let h = self.dense(g, mu, hidden)?;
                let h = g.relu(h);
                self.dense(g, h, out)
            }
            Head::SingleRelu(out) => {
                let h = self.dense(g, mu, out)?;
                Ok(g.relu(h))
            }
        }
    }

    /// Class logits for images on a graph, through `mu` only.
    pub fn classify_graph(&self, g: &mut Graph<T>, x: Var) -> Result<Var, ModelError> {
        let (mu, _) = self.encode_graph(g, x)?;
        self.head_graph(g, mu)
    }

    pub fn encode<R: Rng + ?Sized>(&self, x: &Tensor<T>, rng: &mut R) -> Result<LatentCode<T>, ModelError> {
        let batch = self.check_images(x)?;
        let mut g = Graph::inference();
        let xi = g.input("x", x.clone());
        let (mu, logvar) = self.encode_graph(&mut g, xi)?;
        let eta = g.sample_normal(&[batch, self.config.latent_dim], rng);
        let z = reparameterize(&mut g, mu, logvar, eta)?;
        Ok(LatentCode {
            mu: g.value(mu).clone(),
            logvar: g.value(logvar).clone(),
            sample: g.value(z).clone(),
            noise: g.value(eta).clone(),
        })
    }

    /// Latent means only; the deterministic representative used for support.
    pub fn encode_mean(&self, x: &Tensor<T>) -> Result<Tensor<T>, ModelError> {
        self.check_images(x)?;
        let mut g = Graph::inference();
        let xi = g.input("x", x.clone());
        let (mu, _) = self.encode_graph(&mut g, xi)?;
        Ok(g.value(mu).clone())
    }

    /// Reconstructions in `[0, 1]` for latent vectors `[batch, latent_dim]`.
    pub fn decode(&self, z: &Tensor<T>) -> Result<Tensor<T>, ModelError> {
        let s = z.shape();
        if s.len() != 2 || s[1] != self.config.latent_dim {
            return Err(ModelError::LatentShape {
                got: s.to_vec(),
                latent_dim: self.config.latent_dim,
            });
        }
        let mut g = Graph::inference();
        let zi = g.input("z", z.clone());
        let logits = self.decode_graph(&mut g, zi)?;
        let out = g.sigmoid(logits);
        Ok(g.value(out).clone())
    }

    /// Class probabilities from a given `mu` batch.
    pub fn classify_latent(&self, mu: &Tensor<T>) -> Result<Tensor<T>, ModelError> {
        let mut g = Graph::inference();
        let m = g.input("mu", mu.clone());
        let logits = self.head_graph(&mut g, m)?;
        let p = g.softmax(logits);
        Ok(g.value(p).clone())
    }

    pub fn classify(&self, x: &Tensor<T>) -> Result<Tensor<T>, ModelError> {
        self.check_images(x)?;
        let mut g = Graph::inference();
        let xi = g.input("x", x.clone());
        let logits = self.classify_graph(&mut g, xi)?;
        let p = g.softmax(logits);
        Ok(g.value(p).clone())
    }

    /// `g(x)`: class distribution plus reconstruction decoded from `mu`.
    pub fn forward(&self, x: &Tensor<T>) -> Result<ForwardOutput<T>, ModelError> {
        self.check_images(x)?;
        let mut g = Graph::inference();
        let xi = g.input("x", x.clone());
        let (mu, logvar) = self.encode_graph(&mut g, xi)?;
        let logits = self.head_graph(&mut g, mu)?;
        let probs = g.softmax(logits);
        let rl = self.decode_graph(&mut g, mu)?;
        let recon = g.sigmoid(rl);
        Ok(ForwardOutput {
            logits: g.value(logits).clone(),
            probs: g.value(probs).clone(),
            recon: g.value(recon).clone(),
            mu: g.value(mu).clone(),
            logvar: g.value(logvar).clone(),
        })
    }

    /// Builds the training objective on `g`. The decoder sees the
    /// reparameterised sample; the classifier sees `mu`. With
    /// `lambda_c == 0` the classification term is left out of `total`.
    pub fn loss_graph<R: Rng + ?Sized>(
        &self,
        g: &mut Graph<T>,
        x: Var,
        labels: &[usize],
        lambda_c: f64,
        rng: &mut R,
    ) -> Result<LossVars, ModelError> {
        let batch = g.shape(x)[0];
        self.check_labels(labels, batch)?;
        let (mu, logvar) = self.encode_graph(g, x)?;
        let eta = g.sample_normal(&[batch, self.config.latent_dim], rng);
        let z = reparameterize(g, mu, logvar, eta)?;
        let dec = self.decode_graph(g, z)?;
        let logits = self.head_graph(g, mu)?;
        gaussian_vae_terms(g, x, dec, mu, logvar, eta, logits, labels, lambda_c)
    }

    pub fn loss<R: Rng + ?Sized>(
        &self,
        x: &Tensor<T>,
        labels: &[usize],
        lambda_c: f64,
        rng: &mut R,
    ) -> Result<LossBreakdown, ModelError> {
        self.check_images(x)?;
        let mut g = Graph::inference();
        let xi = g.input("x", x.clone());
        let vars = self.loss_graph(&mut g, xi, labels, lambda_c, rng)?;
        breakdown(&g, &vars, lambda_c)
    }

    /// Loss terms, parameter gradients and the class logits of the batch.
    pub fn loss_and_grads<R: Rng + ?Sized>(
        &self,
        x: &Tensor<T>,
        labels: &[usize],
        lambda_c: f64,
        rng: &mut R,
    ) -> Result<(LossBreakdown, Gradients<T>, Tensor<T>), ModelError> {
        self.check_images(x)?;
        let mut g = Graph::new();
        let xi = g.input("x", x.clone());
        let vars = self.loss_graph(&mut g, xi, labels, lambda_c, rng)?;
        let b = breakdown(&g, &vars, lambda_c)?;
        let grads = g.backward(vars.total)?;
        Ok((b, grads, g.value(vars.class_logits).clone()))
    }

    pub fn to_container(&self) -> Container {
        let mut c = Container::new();
        c.set_section(
            "MODEL",
            serde_json::to_value(&self.config).expect("config serializes"),
        );
        for (_, name, t) in self.params.iter() {
            let data = t.data().iter().map(|v| v.as_f64() as f32).collect();
            c.push_f32(name, t.shape(), data);
        }
        c
    }

    pub fn from_container(c: &Container) -> Result<Self, ModelError> {
        let config: ModelConfig = serde_json::from_value(c.section("MODEL")?.clone())
            .map_err(|e| ModelError::Config(e.to_string()))?;
        let mut params = ParamStore::new();
        for (name, _, _) in layout(&config) {
            let (shape, data) = c.f32(&name)?;
            let t = Tensor::new(shape.to_vec(), data.iter().map(|&v| T::lit(v as f64)).collect())
                .map_err(|e| ModelError::Checkpoint {
                    name: name.clone(),
                    detail: e.to_string(),
                })?;
            params.add(name, t);
        }
        Self::from_params(config, params)
    }
}

/// `z = mu + exp(logvar / 2) * eta`.
pub fn reparameterize<T: Real>(g: &mut Graph<T>, mu: Var, logvar: Var, eta: Var) -> Result<Var, GraphError> {
    let half = g.scale(logvar, T::lit(0.5));
    let sd = g.exp(half);
    let noise = g.mul(sd, eta)?;
    g.add(mu, noise)
}

/// The four objective terms from already-built encoder/decoder/classifier
/// outputs. Shared by the model and by tests that force `mu`/`logvar`.
#[allow(clippy::too_many_arguments)]
pub fn gaussian_vae_terms<T: Real>(
    g: &mut Graph<T>,
    x: Var,
    decoder_logits: Var,
    mu: Var,
    logvar: Var,
    noise: Var,
    class_logits: Var,
    labels: &[usize],
    lambda_c: f64,
) -> Result<LossVars, ModelError> {
    let batch = g.shape(mu)[0] as f64;
    let d = g.shape(mu)[1] as f64;
    let ln_2pi = (2.0 * std::f64::consts::PI).ln();

    let bce = g.bce_with_logits(decoder_logits, x)?;
    let bce_sum = g.sum(bce);
    let reconstruction = g.scale(bce_sum, T::lit(1.0 / batch));

    // H(Q, P) = E_Q[-log N(z; 0, I)] = 0.5 * sum(mu^2 + exp(logvar)) + 0.5 * d * ln(2 pi)
    let mu2 = g.square(mu);
    let var = g.exp(logvar);
    let second = g.add(mu2, var)?;
    let second_sum = g.sum(second);
    let ce = g.scale(second_sum, T::lit(0.5 / batch));
    let cross_entropy_qp = g.add_scalar(ce, T::lit(0.5 * d * ln_2pi));

    // H(Q) = 0.5 * sum(1 + ln(2 pi) + logvar)
    let lv_sum = g.sum(logvar);
    let ent = g.scale(lv_sum, T::lit(0.5 / batch));
    let entropy_q = g.add_scalar(ent, T::lit(0.5 * d * (1.0 + ln_2pi)));

    let per_sample = g.softmax_cross_entropy(class_logits, labels)?;
    let classification = g.mean(per_sample);

    let vae = g.add(reconstruction, cross_entropy_qp)?;
    let mut total = g.sub(vae, entropy_q)?;
    if lambda_c != 0.0 {
        let weighted = g.scale(classification, T::lit(lambda_c));
        total = g.add(total, weighted)?;
    }
    Ok(LossVars {
        reconstruction,
        cross_entropy_qp,
        entropy_q,
        classification,
        total,
        class_logits,
        mu,
        logvar,
        noise,
    })
}

/// Reads the loss terms off a graph, failing on the first non-finite one.
pub fn breakdown<T: Real>(g: &Graph<T>, v: &LossVars, lambda_c: f64) -> Result<LossBreakdown, ModelError> {
    let read = |var: Var, term: &'static str| {
        let value = g.value(var).item().expect("scalar").as_f64();
        if value.is_finite() {
            Ok(value)
        } else {
            Err(ModelError::Divergence { term, value })
        }
    };
    Ok(LossBreakdown {
        reconstruction: read(v.reconstruction, "reconstruction")?,
        cross_entropy_qp: read(v.cross_entropy_qp, "cross_entropy_qp")?,
        entropy_q: read(v.entropy_q, "entropy_q")?,
        classification: read(v.classification, "classification")?,
        lambda_c,
        total: read(v.total, "total")?,
    })
}

/// Closed-form `KL(N(mu, diag(exp(logvar))) || N(0, I))` per row.
pub fn gaussian_kl(mu: &[f64], logvar: &[f64]) -> f64 {
    mu.iter()
        .zip(logvar)
        .map(|(&m, &lv)| 0.5 * (m * m + lv.exp() - lv - 1.0))
        .sum()
}

/// Copies images `[start, end)` of a flat NHWC buffer into a batch tensor.
pub fn batch_tensor<T: Real>(images: &[f32], shape: ImageShape, indices: &[usize]) -> Tensor<T> {
    let p = shape.pixels();
    let mut data = Vec::with_capacity(indices.len() * p);
    for &i in indices {
        data.extend(images[i * p..(i + 1) * p].iter().map(|&v| T::lit(v as f64)));
    }
    Tensor::new(vec![indices.len(), shape.height, shape.width, shape.channels], data)
        .expect("batch has at least one image")
}
