//! Image dissimilarity (MSE, SSIM) and the augmented confusion matrix.

use std::fmt::Write as _;

use serde_json::{json, Value};
use thiserror::Error;

use crate::data::ImageShape;
use crate::justify::Tag;

pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;

/// Rendered in reports wherever a ratio has an empty denominator.
pub const UNDEFINED: &str = "n/a";

#[derive(Debug, Error, PartialEq)]
pub enum MetricError {
    #[error("images have {0} and {1} values")]
    LengthMismatch(usize, usize),
    #[error("image {shape:?} does not hold {len} values")]
    Shape { shape: ImageShape, len: usize },
    #[error("image {height}x{width} is smaller than the {window}x{window} SSIM window")]
    TooSmall { height: usize, width: usize, window: usize },
    #[error("invalid SSIM window: {0}")]
    Window(String),
    #[error("{field} label {label} out of range for {n_classes} classes (sample {index})")]
    Label {
        field: &'static str,
        label: usize,
        n_classes: usize,
        index: usize,
    },
    #[error("{0} tags, {1} predictions and {2} true labels")]
    Lengths(usize, usize, usize),
}

/// Mean squared per-pixel difference.
pub fn mse(a: &[f32], b: &[f32]) -> Result<f64, MetricError> {
    if a.len() != b.len() {
        return Err(MetricError::LengthMismatch(a.len(), b.len()));
    }
    let s: f64 = a
        .iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum();
    Ok(s / a.len().max(1) as f64)
}

/// Local weighting window for SSIM statistics.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum SsimWindow {
    Uniform { size: usize },
    Gaussian { size: usize, sigma: f64 },
}

impl Default for SsimWindow {
    fn default() -> Self {
        SsimWindow::Uniform { size: 7 }
    }
}

impl SsimWindow {
    pub fn size(&self) -> usize {
        match *self {
            SsimWindow::Uniform { size } | SsimWindow::Gaussian { size, .. } => size,
        }
    }

    /// Normalised row-major weights, `size * size` long.
    pub fn weights(&self) -> Result<Vec<f64>, MetricError> {
        let size = self.size();
        if size == 0 {
            return Err(MetricError::Window("size must be positive".into()));
        }
        let w = match *self {
            SsimWindow::Uniform { .. } => vec![1.0; size * size],
            SsimWindow::Gaussian { sigma, .. } => {
                if !(sigma > 0.0) {
                    return Err(MetricError::Window(format!("sigma must be positive, got {sigma}")));
                }
                let c = (size as f64 - 1.0) / 2.0;
                let g: Vec<f64> = (0..size)
                    .map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp())
                    .collect();
                g.iter().flat_map(|&gy| g.iter().map(move |&gx| gy * gx)).collect()
            }
        };
        let total: f64 = w.iter().sum();
        Ok(w.into_iter().map(|v| v / total).collect())
    }
}

/// Mean local SSIM over all fully-contained window positions, averaged over
/// channels. Statistics are weighted population moments.
pub fn ssim(a: &[f32], b: &[f32], shape: ImageShape, window: &SsimWindow) -> Result<f64, MetricError> {
    if a.len() != b.len() {
        return Err(MetricError::LengthMismatch(a.len(), b.len()));
    }
    if a.len() != shape.pixels() {
        return Err(MetricError::Shape { shape, len: a.len() });
    }
    let size = window.size();
    if shape.height < size || shape.width < size {
        return Err(MetricError::TooSmall {
            height: shape.height,
            width: shape.width,
            window: size,
        });
    }
    let weights = window.weights()?;
    let (h, w, c) = (shape.height, shape.width, shape.channels);
    let at = |img: &[f32], y: usize, x: usize, ch: usize| img[(y * w + x) * c + ch] as f64;
    let positions = (h - size + 1) * (w - size + 1);
    let mut total = 0.0;
    for ch in 0..c {
        let mut acc = 0.0;
        for oy in 0..=h - size {
            for ox in 0..=w - size {
                let (mut mx, mut my) = (0.0, 0.0);
                for dy in 0..size {
                    for dx in 0..size {
                        let wt = weights[dy * size + dx];
                        mx += wt * at(a, oy + dy, ox + dx, ch);
                        my += wt * at(b, oy + dy, ox + dx, ch);
                    }
                }
                let (mut vx, mut vy, mut cxy) = (0.0, 0.0, 0.0);
                for dy in 0..size {
                    for dx in 0..size {
                        let wt = weights[dy * size + dx];
                        let ex = at(a, oy + dy, ox + dx, ch) - mx;
                        let ey = at(b, oy + dy, ox + dx, ch) - my;
                        vx += wt * ex * ex;
                        vy += wt * ey * ey;
                        cxy += wt * ex * ey;
                    }
                }
                acc += ((2.0 * mx * my + SSIM_C1) * (2.0 * cxy + SSIM_C2))
                    / ((mx * mx + my * my + SSIM_C1) * (vx + vy + SSIM_C2));
            }
        }
        total += acc / positions as f64;
    }
    Ok(total / c as f64)
}

/// `1 - SSIM`; zero for identical images, larger is worse.
pub fn ssim_loss(a: &[f32], b: &[f32], shape: ImageShape, window: &SsimWindow) -> Result<f64, MetricError> {
    Ok(1.0 - ssim(a, b, shape, window)?)
}

/// Three confusion matrices (rows = true label, columns = predicted), one
/// per assertion tag.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AugmentedConfusionMatrix {
    pub n_classes: usize,
    pub ik: Vec<Vec<u64>>,
    pub imk: Vec<Vec<u64>>,
    pub idk: Vec<Vec<u64>>,
}

impl AugmentedConfusionMatrix {
    pub fn new(n_classes: usize) -> Self {
        let zero = vec![vec![0; n_classes]; n_classes];
        Self {
            n_classes,
            ik: zero.clone(),
            imk: zero.clone(),
            idk: zero,
        }
    }

    pub fn build(tags: &[Tag], predicted: &[usize], truth: &[usize], n_classes: usize) -> Result<Self, MetricError> {
        if tags.len() != predicted.len() || tags.len() != truth.len() {
            return Err(MetricError::Lengths(tags.len(), predicted.len(), truth.len()));
        }
        let mut acm = Self::new(n_classes);
        for (i, ((&t, &p), &y)) in tags.iter().zip(predicted).zip(truth).enumerate() {
            acm.record(i, t, y, p)?;
        }
        Ok(acm)
    }

    pub fn record(&mut self, index: usize, tag: Tag, truth: usize, predicted: usize) -> Result<(), MetricError> {
        for (field, label) in [("true", truth), ("predicted", predicted)] {
            if label >= self.n_classes {
                return Err(MetricError::Label {
                    field,
                    label,
                    n_classes: self.n_classes,
                    index,
                });
            }
        }
        self.matrix_mut(tag)[truth][predicted] += 1;
        Ok(())
    }

    pub fn matrix(&self, tag: Tag) -> &Vec<Vec<u64>> {
        match tag {
            Tag::IK => &self.ik,
            Tag::IMK => &self.imk,
            Tag::IDK => &self.idk,
        }
    }

    fn matrix_mut(&mut self, tag: Tag) -> &mut Vec<Vec<u64>> {
        match tag {
            Tag::IK => &mut self.ik,
            Tag::IMK => &mut self.imk,
            Tag::IDK => &mut self.idk,
        }
    }

    pub fn count(&self, tag: Tag) -> u64 {
        self.matrix(tag).iter().flatten().sum()
    }

    pub fn correct(&self, tag: Tag) -> u64 {
        let m = self.matrix(tag);
        (0..self.n_classes).map(|i| m[i][i]).sum()
    }

    pub fn total(&self) -> u64 {
        Tag::ALL.iter().map(|&t| self.count(t)).sum()
    }

    pub fn metrics(&self) -> ReliabilityMetrics {
        let ratio = |num: u64, den: u64| (den > 0).then(|| num as f64 / den as f64);
        let total = self.total();
        let ik = self.count(Tag::IK);
        let not_ik = total - ik;
        let not_ik_correct = self.correct(Tag::IMK) + self.correct(Tag::IDK);
        ReliabilityMetrics {
            total,
            ik,
            imk: self.count(Tag::IMK),
            idk: self.count(Tag::IDK),
            f_ik: ratio(ik, total),
            a_ik: ratio(self.correct(Tag::IK), ik),
            a_not_ik: ratio(not_ik_correct, not_ik),
            accuracy: ratio(self.correct(Tag::IK) + not_ik_correct, total),
        }
    }

    fn matrix_json(m: &[Vec<u64>]) -> Value {
        Value::Array(m.iter().map(|row| json!(row)).collect())
    }

    /// JSON report: the three sub-matrices, the metrics and caller metadata.
    pub fn report_json(&self, metadata: Value) -> Value {
        json!({
            "metadata": metadata,
            "n_classes": self.n_classes,
            "metrics": self.metrics().to_json(),
            "acm": {
                "ik": Self::matrix_json(&self.ik),
                "imk": Self::matrix_json(&self.imk),
                "idk": Self::matrix_json(&self.idk),
            },
        })
    }

    /// Plain-text rendering: IK, IMK and IDK matrices stacked top to bottom.
    pub fn render_text(&self, title: &str) -> String {
        let mut out = String::new();
        let width = self
            .ik
            .iter()
            .chain(&self.imk)
            .chain(&self.idk)
            .flatten()
            .map(|v| v.to_string().len())
            .max()
            .unwrap_or(1)
            .max(self.n_classes.saturating_sub(1).to_string().len())
            .max(3);
        let _ = writeln!(out, "{title}");
        let _ = writeln!(out, "rows = true label, columns = predicted label");
        for tag in Tag::ALL {
            let _ = writeln!(out, "\n{} ({} samples)", tag, self.count(tag));
            let _ = write!(out, "{:>5} |", "");
            for j in 0..self.n_classes {
                let _ = write!(out, " {j:>width$}");
            }
            let _ = writeln!(out);
            let _ = writeln!(out, "{}", "-".repeat(7 + self.n_classes * (width + 1)));
            for (i, row) in self.matrix(tag).iter().enumerate() {
                let _ = write!(out, "{i:>5} |");
                for v in row {
                    let _ = write!(out, " {v:>width$}");
                }
                let _ = writeln!(out);
            }
        }
        let m = self.metrics();
        let _ = writeln!(out);
        let _ = writeln!(out, "F_IK   = {}", fmt_opt(m.f_ik));
        let _ = writeln!(out, "A_IK   = {}", fmt_opt(m.a_ik));
        let _ = writeln!(out, "A_notIK = {}", fmt_opt(m.a_not_ik));
        let _ = writeln!(out, "accuracy = {}", fmt_opt(m.accuracy));
        out
    }
}

/// Ratios are `None` when their denominator is empty.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ReliabilityMetrics {
    pub total: u64,
    pub ik: u64,
    pub imk: u64,
    pub idk: u64,
    pub f_ik: Option<f64>,
    pub a_ik: Option<f64>,
    pub a_not_ik: Option<f64>,
    pub accuracy: Option<f64>,
}

fn opt_json(v: Option<f64>) -> Value {
    v.map_or_else(|| Value::String(UNDEFINED.into()), |x| json!(x))
}

pub fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| UNDEFINED.to_string(), |x| format!("{x:.4}"))
}

impl ReliabilityMetrics {
    pub fn to_json(&self) -> Value {
        json!({
            "total": self.total,
            "ik": self.ik,
            "imk": self.imk,
            "idk": self.idk,
            "f_ik": opt_json(self.f_ik),
            "a_ik": opt_json(self.a_ik),
            "a_not_ik": opt_json(self.a_not_ik),
            "accuracy": opt_json(self.accuracy),
        })
    }
}
