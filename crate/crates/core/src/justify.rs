//! Justification and assertion: reconstruction-quality gate, justification
//! set, calibration and the IK / IMK / IDK decision.
//!
//! Every mode is computed from the same per-sample [`Evidence`], so modes are
//! directly comparable on one dataset.

use std::collections::BTreeSet;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use thiserror::Error;

use crate::data::{ImageShape, LabeledDataset};
use crate::kv::{KvError, KvFile};
use crate::metrics::{mse, ssim_loss, MetricError, SsimWindow};
use crate::model::{batch_tensor, EpistemicModel, ModelError};
use crate::neighbors::{Neighbor, NeighborError, NeighborIndex};

pub const MNIST_K: usize = 10;
pub const MNIST_PERCENTILE: f64 = 99.0;
pub const FASHION_MNIST_K: usize = 50;
pub const FASHION_MNIST_PERCENTILE: f64 = 90.0;

#[derive(Debug, Error)]
pub enum JustifyError {
    #[error("calibration needs at least one validation sample")]
    EmptyValidation,
    #[error("invalid justification parameters: {0}")]
    Params(String),
    #[error("evidence has {have} neighbours but k = {k}")]
    TooFewNeighbors { have: usize, k: usize },
    #[error("{0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Kv(#[from] KvError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Neighbor(#[from] NeighborError),
    #[error(transparent)]
    Metric(#[from] MetricError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Tag {
    IK,
    IMK,
    IDK,
}

impl Tag {
    pub const ALL: [Tag; 3] = [Tag::IK, Tag::IMK, Tag::IDK];
}

impl fmt::Display for Tag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Tag::IK => "IK",
            Tag::IMK => "IMK",
            Tag::IDK => "IDK",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Mode {
    SupportOnly,
    ReconstructionOnly,
    Combined,
    BaselineSoftmax,
}

impl Mode {
    pub const ALL: [Mode; 4] = [
        Mode::SupportOnly,
        Mode::ReconstructionOnly,
        Mode::Combined,
        Mode::BaselineSoftmax,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            Mode::SupportOnly => "support_only",
            Mode::ReconstructionOnly => "reconstruction_only",
            Mode::Combined => "combined",
            Mode::BaselineSoftmax => "baseline_softmax",
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Mode {
    type Err = JustifyError;

    /// Accepts the canonical names and the short forms `baseline`,
    /// `support` and `recon`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "baseline" => Ok(Mode::BaselineSoftmax),
            "support" => Ok(Mode::SupportOnly),
            "recon" => Ok(Mode::ReconstructionOnly),
            _ => Mode::ALL
                .into_iter()
                .find(|m| m.as_str() == s)
                .ok_or_else(|| JustifyError::Params(format!("unknown mode `{s}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Quality {
    Good,
    Bad,
}

/// How the two loss thresholds are derived from the validation losses.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CalibrationRule {
    /// Each threshold is the N-th nearest-rank percentile of its own metric.
    PerMetric,
    /// Both thresholds use the same nearest-rank level, raised from N until
    /// at least N% of the validation samples pass both gates.
    Joint,
}

impl CalibrationRule {
    pub fn as_str(&self) -> &'static str {
        match self {
            CalibrationRule::PerMetric => "per_metric",
            CalibrationRule::Joint => "joint",
        }
    }
}

impl FromStr for CalibrationRule {
    type Err = JustifyError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "per_metric" => Ok(CalibrationRule::PerMetric),
            "joint" => Ok(CalibrationRule::Joint),
            _ => Err(JustifyError::Params(format!("unknown calibration rule `{s}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Thresholds {
    pub t_mse: f64,
    pub t_ssim: f64,
}

impl Thresholds {
    pub const OPEN: Thresholds = Thresholds {
        t_mse: f64::INFINITY,
        t_ssim: f64::INFINITY,
    };
}

/// Good iff both losses are within their thresholds. The comparison is
/// inclusive so a nearest-rank threshold admits the sample it came from.
pub fn recon_quality(mse: f64, ssim_loss: f64, t: &Thresholds) -> Quality {
    if mse <= t.t_mse && ssim_loss <= t.t_ssim {
        Quality::Good
    } else {
        Quality::Bad
    }
}

/// Recomputes the losses from images, then gates them.
pub fn recon_quality_images(
    x: &[f32],
    recon: &[f32],
    shape: ImageShape,
    window: &SsimWindow,
    t: &Thresholds,
) -> Result<Quality, MetricError> {
    Ok(recon_quality(mse(x, recon)?, ssim_loss(x, recon, shape, window)?, t))
}

/// Class labels plus the out-of-band element marking bad reconstruction.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct JustificationSet {
    pub labels: BTreeSet<usize>,
    pub has_phi: bool,
}

impl JustificationSet {
    pub fn cardinality(&self) -> usize {
        self.labels.len() + usize::from(self.has_phi)
    }
}

impl fmt::Display for JustificationSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut parts: Vec<String> = self.labels.iter().map(|l| l.to_string()).collect();
        if self.has_phi {
            parts.push("phi".into());
        }
        write!(f, "{{{}}}", parts.join(" "))
    }
}

pub fn justification(support: BTreeSet<usize>, quality: Quality) -> JustificationSet {
    JustificationSet {
        labels: support,
        has_phi: quality == Quality::Bad,
    }
}

/// IK iff `J == {y}`; IMK iff `y` is in `J` alongside anything else
/// (including the bad-reconstruction marker); IDK otherwise.
pub fn assert_tag(predicted: usize, j: &JustificationSet) -> Tag {
    if !j.labels.contains(&predicted) {
        Tag::IDK
    } else if j.cardinality() == 1 {
        Tag::IK
    } else {
        Tag::IMK
    }
}

/// `ln(p / (1 - p))` for the top softmax probability, computed from logits
/// as `l_max - logsumexp(other logits)`; stays finite when `p` rounds to 1.
pub fn top_log_odds(logits: &[f32]) -> f64 {
    let top = crate::train::argmax(logits);
    let l_max = logits[top] as f64;
    let m = logits
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != top)
        .map(|(_, &l)| l as f64)
        .fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return f64::INFINITY;
    }
    let lse = m + logits
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != top)
        .map(|(_, &l)| (l as f64 - m).exp())
        .sum::<f64>()
        .ln();
    l_max - lse
}

/// Everything the assertion modes need about one input.
#[derive(Clone, Debug, PartialEq)]
pub struct Evidence {
    pub predicted: usize,
    /// Log-odds of the top class probability.
    pub score: f64,
    pub max_prob: f64,
    pub mse: f64,
    pub ssim_loss: f64,
    /// Nearest training latents, ascending by `(distance, id)`.
    pub neighbors: Vec<Neighbor>,
}

impl Evidence {
    /// Labels of the first `k` neighbours.
    pub fn support(&self, k: usize) -> Result<BTreeSet<usize>, JustifyError> {
        if k == 0 || k > self.neighbors.len() {
            return Err(JustifyError::TooFewNeighbors {
                have: self.neighbors.len(),
                k,
            });
        }
        Ok(self.neighbors[..k].iter().map(|n| n.label).collect())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct JustificationParams {
    pub k: usize,
    pub percentile_n: f64,
    pub thresholds: Thresholds,
    pub mode: Mode,
    pub rule: CalibrationRule,
    /// Nearest-rank level actually used for the thresholds (≥ `percentile_n`
    /// under the joint rule).
    pub effective_percentile: f64,
    /// Log-odds threshold for the softmax baseline.
    pub baseline_threshold: f64,
    pub ssim_window: SsimWindow,
    pub correct_only: bool,
}

impl JustificationParams {
    pub fn validate(&self) -> Result<(), JustifyError> {
        if self.k == 0 {
            return Err(JustifyError::Params("k must be at least 1".into()));
        }
        if !(self.percentile_n > 0.0 && self.percentile_n <= 100.0) {
            return Err(JustifyError::Params(format!(
                "percentile_n must be in (0, 100], got {}",
                self.percentile_n
            )));
        }
        let t = self.thresholds;
        if !(t.t_mse >= 0.0 && t.t_ssim >= 0.0) {
            return Err(JustifyError::Params("thresholds must be non-negative".into()));
        }
        Ok(())
    }

    pub fn with_mode(&self, mode: Mode) -> Self {
        Self { mode, ..self.clone() }
    }

    pub fn to_kv(&self) -> KvFile {
        let mut kv = KvFile::default();
        kv.set("k", self.k);
        kv.set("percentile_n", self.percentile_n);
        kv.set("t_mse", self.thresholds.t_mse);
        kv.set("t_ssim", self.thresholds.t_ssim);
        kv.set("mode", self.mode);
        kv.set("calibration_rule", self.rule.as_str());
        kv.set("effective_percentile", self.effective_percentile);
        kv.set("baseline_threshold", self.baseline_threshold);
        match self.ssim_window {
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
        kv.set("calibrate_correct_only", self.correct_only);
        kv
    }

    pub fn from_kv(kv: &KvFile) -> Result<Self, JustifyError> {
        let size = kv.get_or("ssim_window_size", 7usize)?;
        let ssim_window = match kv.get_or("ssim_window", "uniform".to_string())?.as_str() {
            "uniform" => SsimWindow::Uniform { size },
            "gaussian" => SsimWindow::Gaussian {
                size,
                sigma: kv.get_or("ssim_sigma", 1.5)?,
            },
            other => return Err(JustifyError::Params(format!("unknown ssim_window `{other}`"))),
        };
        let percentile_n: f64 = kv.get("percentile_n")?;
        let p = Self {
            k: kv.get("k")?,
            percentile_n,
            thresholds: Thresholds {
                t_mse: kv.get("t_mse")?,
                t_ssim: kv.get("t_ssim")?,
            },
            mode: kv.get_or("mode", "combined".to_string())?.parse()?,
            rule: kv.get_or("calibration_rule", "joint".to_string())?.parse()?,
            effective_percentile: kv.get_or("effective_percentile", percentile_n)?,
            baseline_threshold: kv.get_or("baseline_threshold", f64::INFINITY)?,
            ssim_window,
            correct_only: kv.get_or("calibrate_correct_only", false)?,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn write(&self, path: &Path) -> Result<(), JustifyError> {
        Ok(self.to_kv().write(path)?)
    }

    pub fn read(path: &Path) -> Result<Self, JustifyError> {
        Self::from_kv(&KvFile::read(path)?)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Assertion {
    pub tag: Tag,
    pub predicted: usize,
    pub justification: JustificationSet,
    pub quality: Quality,
    pub exemplar_ids: Vec<usize>,
}

/// Applies `params.mode` to one sample's evidence.
pub fn assert_evidence(ev: &Evidence, params: &JustificationParams) -> Result<Assertion, JustifyError> {
    let quality = recon_quality(ev.mse, ev.ssim_loss, &params.thresholds);
    let y = ev.predicted;
    let justification = match params.mode {
        Mode::SupportOnly => justification(ev.support(params.k)?, Quality::Good),
        Mode::ReconstructionOnly => justification(BTreeSet::from([y]), quality),
        Mode::Combined => justification(ev.support(params.k)?, quality),
        Mode::BaselineSoftmax => JustificationSet {
            labels: if ev.score >= params.baseline_threshold {
                BTreeSet::from([y])
            } else {
                BTreeSet::new()
            },
            has_phi: false,
        },
    };
    let k = params.k.min(ev.neighbors.len());
    Ok(Assertion {
        tag: assert_tag(y, &justification),
        predicted: y,
        justification,
        quality,
        exemplar_ids: ev.neighbors[..k].iter().map(|n| n.id).collect(),
    })
}

pub fn assert_all(evidence: &[Evidence], params: &JustificationParams) -> Result<Vec<Assertion>, JustifyError> {
    evidence.iter().map(|e| assert_evidence(e, params)).collect()
}

/// Builds evidence for every image in `data`: classifier output and
/// reconstruction from `mu`, both losses, and the `k_max` nearest training
/// latents.
pub fn compute_evidence(
    model: &EpistemicModel<f32>,
    index: &NeighborIndex,
    data: &LabeledDataset,
    k_max: usize,
    window: &SsimWindow,
    batch_size: usize,
) -> Result<Vec<Evidence>, JustifyError> {
    let shape = data.shape;
    let p = shape.pixels();
    let n_classes = model.config().n_classes;
    let dim = model.config().latent_dim;
    let ids: Vec<usize> = (0..data.len()).collect();
    let mut out = Vec::with_capacity(data.len());
    for chunk in ids.chunks(batch_size.max(1)) {
        let x = batch_tensor::<f32>(&data.images, shape, chunk);
        let f = model.forward(&x)?;
        for (j, &i) in chunk.iter().enumerate() {
            let img = data.image(i);
            let recon = &f.recon.data()[j * p..(j + 1) * p];
            let logits = &f.logits.data()[j * n_classes..(j + 1) * n_classes];
            let probs = &f.probs.data()[j * n_classes..(j + 1) * n_classes];
            let predicted = crate::train::argmax(logits);
            out.push(Evidence {
                predicted,
                score: top_log_odds(logits),
                max_prob: probs[predicted] as f64,
                mse: mse(img, recon)?,
                ssim_loss: ssim_loss(img, recon, shape, window)?,
                neighbors: index.knn(&f.mu.data()[j * dim..(j + 1) * dim], k_max)?,
            });
        }
    }
    Ok(out)
}

/// Nearest-rank percentile: the smallest value with at least `p`% of the
/// sample at or below it. `sorted` must be ascending and non-empty.
pub fn nearest_rank(sorted: &[f64], p: f64) -> f64 {
    sorted[nearest_rank_index(sorted.len(), p)]
}

fn nearest_rank_index(n: usize, p: f64) -> usize {
    let rank = (p * n as f64 / 100.0).ceil() as usize;
    rank.clamp(1, n) - 1
}

fn sorted(v: impl Iterator<Item = f64>) -> Vec<f64> {
    let mut s: Vec<f64> = v.collect();
    s.sort_by(f64::total_cmp);
    s
}

/// Fraction of `(mse, ssim_loss)` pairs passing both thresholds.
pub fn good_fraction(losses: &[(f64, f64)], t: &Thresholds) -> f64 {
    let good = losses
        .iter()
        .filter(|&&(m, s)| recon_quality(m, s, t) == Quality::Good)
        .count();
    good as f64 / losses.len() as f64
}

/// Thresholds from validation losses. Returns the thresholds and the
/// nearest-rank level they correspond to.
pub fn calibrate_thresholds(
    losses: &[(f64, f64)],
    percentile_n: f64,
    rule: CalibrationRule,
) -> Result<(Thresholds, f64), JustifyError> {
    if losses.is_empty() {
        return Err(JustifyError::EmptyValidation);
    }
    if !(percentile_n > 0.0 && percentile_n <= 100.0) {
        return Err(JustifyError::Params(format!(
            "percentile_n must be in (0, 100], got {percentile_n}"
        )));
    }
    let n = losses.len();
    let ms = sorted(losses.iter().map(|l| l.0));
    let ss = sorted(losses.iter().map(|l| l.1));
    let at_rank = |r: usize| Thresholds {
        t_mse: ms[r],
        t_ssim: ss[r],
    };
    let r0 = nearest_rank_index(n, percentile_n);
    match rule {
        CalibrationRule::PerMetric => Ok((at_rank(r0), percentile_n)),
        CalibrationRule::Joint => {
            // Joint coverage is non-decreasing in the shared rank, and the
            // top rank passes every sample, so binary search terminates.
            let enough = |r: usize| {
                let t = at_rank(r);
                let good = losses
                    .iter()
                    .filter(|&&(m, s)| recon_quality(m, s, &t) == Quality::Good)
                    .count();
                good as f64 * 100.0 >= percentile_n * n as f64
            };
            let (mut lo, mut hi) = (r0, n - 1);
            while lo < hi {
                let mid = lo + (hi - lo) / 2;
                if enough(mid) {
                    hi = mid;
                } else {
                    lo = mid + 1;
                }
            }
            Ok((at_rank(lo), 100.0 * (lo + 1) as f64 / n as f64))
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CalibrationConfig {
    pub k: usize,
    pub percentile_n: f64,
    pub rule: CalibrationRule,
    pub correct_only: bool,
    pub ssim_window: SsimWindow,
}

impl Default for CalibrationConfig {
    fn default() -> Self {
        Self {
            k: MNIST_K,
            percentile_n: MNIST_PERCENTILE,
            rule: CalibrationRule::Joint,
            correct_only: false,
            ssim_window: SsimWindow::default(),
        }
    }
}

/// Derives justification parameters from validation evidence. `labels` are
/// the validation ground truth, used only when `correct_only` is set.
pub fn calibrate(
    evidence: &[Evidence],
    labels: &[usize],
    config: &CalibrationConfig,
) -> Result<JustificationParams, JustifyError> {
    let losses: Vec<(f64, f64)> = evidence
        .iter()
        .zip(labels)
        .filter(|(e, &y)| !config.correct_only || e.predicted == y)
        .map(|(e, _)| (e.mse, e.ssim_loss))
        .collect();
    let (thresholds, effective) = calibrate_thresholds(&losses, config.percentile_n, config.rule)?;
    let params = JustificationParams {
        k: config.k,
        percentile_n: config.percentile_n,
        thresholds,
        mode: Mode::Combined,
        rule: config.rule,
        effective_percentile: effective,
        baseline_threshold: f64::INFINITY,
        ssim_window: config.ssim_window,
        correct_only: config.correct_only,
    };
    params.validate()?;
    Ok(params)
}

/// Log-odds threshold admitting the `round(target_f_ik * n)` highest
/// scores. With tied scores at the cut the coverage can overshoot.
pub fn match_baseline_threshold(scores: &[f64], target_f_ik: f64) -> f64 {
    let mut s: Vec<f64> = scores.to_vec();
    s.sort_by(|a, b| b.total_cmp(a));
    let m = (target_f_ik.clamp(0.0, 1.0) * s.len() as f64).round() as usize;
    if m == 0 {
        f64::INFINITY
    } else {
        s[m - 1]
    }
}

/// Fraction of IK assertions.
pub fn f_ik(assertions: &[Assertion]) -> f64 {
    assertions.iter().filter(|a| a.tag == Tag::IK).count() as f64 / assertions.len().max(1) as f64
}

#[derive(Clone, Debug, PartialEq)]
pub struct GridPoint {
    pub k: usize,
    pub percentile_n: f64,
    pub f_ik: f64,
    pub a_ik: Option<f64>,
}

/// Searches `(k, N)` pairs on validation evidence for the highest
/// combined-mode IK accuracy with IK coverage at least `coverage_floor`.
/// Ties prefer higher coverage, then smaller `k`, then smaller `N`.
pub fn grid_search(
    evidence: &[Evidence],
    labels: &[usize],
    ks: &[usize],
    percentiles: &[f64],
    coverage_floor: f64,
    base: &CalibrationConfig,
) -> Result<(Option<JustificationParams>, Vec<GridPoint>), JustifyError> {
    let mut table = Vec::new();
    let mut best: Option<(JustificationParams, f64, f64)> = None;
    for &k in ks {
        for &n in percentiles {
            let cfg = CalibrationConfig {
                k,
                percentile_n: n,
                ..base.clone()
            };
            let params = calibrate(evidence, labels, &cfg)?;
            let asserts = assert_all(evidence, &params)?;
            let ik: Vec<bool> = asserts
                .iter()
                .zip(labels)
                .filter(|(a, _)| a.tag == Tag::IK)
                .map(|(a, &y)| a.predicted == y)
                .collect();
            let cov = ik.len() as f64 / evidence.len() as f64;
            let acc = (!ik.is_empty()).then(|| ik.iter().filter(|&&c| c).count() as f64 / ik.len() as f64);
            table.push(GridPoint {
                k,
                percentile_n: n,
                f_ik: cov,
                a_ik: acc,
            });
            let (Some(acc), true) = (acc, cov >= coverage_floor) else {
                continue;
            };
            let better = match &best {
                None => true,
                Some((bp, bacc, bcov)) => (acc, cov, std::cmp::Reverse(k), -n)
                    .partial_cmp(&(*bacc, *bcov, std::cmp::Reverse(bp.k), -bp.percentile_n))
                    == Some(std::cmp::Ordering::Greater),
            };
            if better {
                best = Some((params, acc, cov));
            }
        }
    }
    Ok((best.map(|b| b.0), table))
}

/// One row of the assertion stream.
#[derive(Clone, Debug, PartialEq)]
pub struct AssertionRecord<'a> {
    pub sample_id: usize,
    pub true_label: Option<usize>,
    pub attacked: Option<bool>,
    pub evidence: &'a Evidence,
    pub assertion: &'a Assertion,
}

pub const ASSERTION_CSV_HEADER: [&str; 13] = [
    "sample_id",
    "predicted",
    "true_label",
    "tag",
    "mse",
    "ssim_loss",
    "quality",
    "justification",
    "log_odds",
    "max_prob",
    "neighbor_ids",
    "neighbor_labels",
    "attacked",
];

fn join<T: ToString>(v: impl Iterator<Item = T>) -> String {
    v.map(|x| x.to_string()).collect::<Vec<_>>().join(" ")
}

/// Writes the assertion stream as CSV. List-valued fields are
/// space-separated; unknown true labels and attack flags are empty.
pub fn write_assertions_csv<'a, W: std::io::Write>(
    out: W,
    records: impl IntoIterator<Item = AssertionRecord<'a>>,
) -> Result<(), JustifyError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(ASSERTION_CSV_HEADER)?;
    for r in records {
        let a = r.assertion;
        let nbrs = &r.evidence.neighbors[..a.exemplar_ids.len()];
        w.write_record([
            r.sample_id.to_string(),
            a.predicted.to_string(),
            r.true_label.map(|l| l.to_string()).unwrap_or_default(),
            a.tag.to_string(),
            r.evidence.mse.to_string(),
            r.evidence.ssim_loss.to_string(),
            format!("{:?}", a.quality).to_lowercase(),
            a.justification.to_string(),
            r.evidence.score.to_string(),
            r.evidence.max_prob.to_string(),
            join(nbrs.iter().map(|n| n.id)),
            join(nbrs.iter().map(|n| n.label)),
            r.attacked.map(|b| u8::from(b).to_string()).unwrap_or_default(),
        ])?;
    }
    w.flush()?;
    Ok(())
}
