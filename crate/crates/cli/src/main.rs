//! `ecvae`: train, calibrate, attack, evaluate and inspect an epistemic
//! classifier built on a class-conditioned VAE.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use ecvae::data::{load_idx_images, ImageShape};
use ecvae::justify::Mode;
use ecvae::kv::KvFile;
use ecvae::pipeline::{
    self, ExperimentConfig, PipelineError, CONFIG_SNAPSHOT, INDEX_FILE, MODEL_FILE, PARAMS_FILE,
};

#[derive(Parser)]
#[command(name = "ecvae", version, about = "Epistemic classifier with VAE-based justification")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the model; writes model.ec, loss.csv and config.txt.
    Train {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        train: TrainArgs,
    },
    /// Build the neighbor index and calibrate thresholds; writes index.ec and params.txt.
    Calibrate {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        calibration: CalibrationArgs,
    },
    /// Assert on individual images (PNG, or IDX image files).
    Infer {
        #[command(flatten)]
        common: Common,
        /// Input image: a PNG, or an IDX image file.
        #[arg(long)]
        input: PathBuf,
        /// Image index within an IDX input; all images when absent.
        #[arg(long)]
        item: Option<usize>,
        /// Assertion mode.
        #[arg(long, default_value = "combined")]
        mode: Mode,
        /// Write the input, its reconstruction and the k exemplar training images as PNGs.
        #[arg(long, value_name = "DIR")]
        dump_exemplars: Option<PathBuf>,
    },
    /// Write the (attacked) evaluation set as float IDX plus an attack-flag file.
    Attack {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        eval: EvalArgs,
    },
    /// Evaluate every requested mode; writes acm_<mode>.{json,txt} and assertions_<mode>.csv.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        eval: EvalArgs,
    },
    /// Summarize the ACM reports in the output directory.
    Report {
        /// Directory holding acm_*.json reports.
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
}

#[derive(Args)]
struct Common {
    /// Key-value config file. Later stages default to <out>/config.txt.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Directory with the MNIST-style IDX files.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Output directory for artifacts and reports.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Override any config key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Classification loss weight; 0 trains a plain VAE.
    #[arg(long)]
    lambda_c: Option<f64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    latent_dim: Option<usize>,
    /// Use only the first N training images.
    #[arg(long)]
    train_limit: Option<usize>,
    #[arg(long)]
    validation_fraction: Option<f64>,
}

#[derive(Args)]
struct CalibrationArgs {
    /// Neighbors in the support.
    #[arg(long)]
    k: Option<usize>,
    /// Percentile N of validation samples that must reconstruct Good.
    #[arg(long)]
    percentile: Option<f64>,
    /// `joint` or `per_metric`.
    #[arg(long)]
    calibration_rule: Option<String>,
    /// Calibrate thresholds on correctly classified validation samples only.
    #[arg(long)]
    correct_only: bool,
}

#[derive(Args)]
struct EvalArgs {
    /// Comma-separated: baseline, support, recon, combined.
    #[arg(long)]
    modes: Option<String>,
    /// none, fgsm, bim or uniform.
    #[arg(long)]
    attack: Option<String>,
    #[arg(long)]
    epsilon: Option<f64>,
    #[arg(long)]
    bim_alpha: Option<f64>,
    #[arg(long)]
    bim_iters: Option<usize>,
    /// Half-width of the uniform noise interval.
    #[arg(long)]
    noise_range: Option<f64>,
    /// Evaluate the clean test set followed by its attacked copy.
    #[arg(long)]
    expand: bool,
    #[arg(long)]
    test_limit: Option<usize>,
    #[arg(long)]
    test_images: Option<PathBuf>,
    #[arg(long)]
    test_labels: Option<PathBuf>,
    /// Attack-flag IDX file matching the test set.
    #[arg(long)]
    test_flags: Option<PathBuf>,
}

/// Keys describing one evaluation rather than the trained artifacts; not
/// inherited from a previous run's snapshot.
const EVAL_KEYS: &[&str] = &[
    "test_images",
    "test_labels",
    "test_flags",
    "test_limit",
    "modes",
    "attack",
    "epsilon",
    "bim_alpha",
    "bim_iters",
    "noise_range",
    "expand",
];

type Overrides = Vec<(&'static str, String)>;

fn push<T: ToString>(o: &mut Overrides, key: &'static str, v: &Option<T>) {
    if let Some(v) = v {
        o.push((key, v.to_string()));
    }
}

impl TrainArgs {
    fn overrides(&self, o: &mut Overrides) {
        push(o, "epochs", &self.epochs);
        push(o, "batch_size", &self.batch_size);
        push(o, "lambda_c", &self.lambda_c);
        push(o, "lr", &self.lr);
        push(o, "latent_dim", &self.latent_dim);
        push(o, "train_limit", &self.train_limit);
        push(o, "validation_fraction", &self.validation_fraction);
    }
}

impl CalibrationArgs {
    fn overrides(&self, o: &mut Overrides) {
        push(o, "k", &self.k);
        push(o, "percentile_n", &self.percentile);
        push(o, "calibration_rule", &self.calibration_rule);
        if self.correct_only {
            o.push(("calibrate_correct_only", "true".into()));
        }
    }
}

impl EvalArgs {
    fn overrides(&self, o: &mut Overrides) {
        let path = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string());
        push(o, "modes", &self.modes);
        push(o, "attack", &self.attack);
        push(o, "epsilon", &self.epsilon);
        push(o, "bim_alpha", &self.bim_alpha);
        push(o, "bim_iters", &self.bim_iters);
        push(o, "noise_range", &self.noise_range);
        if self.expand {
            o.push(("expand", "true".into()));
        }
        push(o, "test_limit", &self.test_limit);
        push(o, "test_images", &path(&self.test_images));
        push(o, "test_labels", &path(&self.test_labels));
        push(o, "test_flags", &path(&self.test_flags));
    }
}

/// Resolves the config: base file, then flags, then `--set` pairs.
/// `inherit` lets a stage fall back to the snapshot in the output directory.
fn resolve(common: &Common, mut extra: Overrides, inherit: bool) -> Result<ExperimentConfig, PipelineError> {
    let read = |p: &Path| KvFile::read(p).map_err(|e| PipelineError::Config(format!("{}: {e}", p.display())));
    let mut kv = match &common.config {
        Some(p) => read(p)?,
        None => {
            let out = common.out.clone().unwrap_or_else(|| ExperimentConfig::default().out_dir);
            let snapshot = out.join(CONFIG_SNAPSHOT);
            if inherit && snapshot.exists() {
                let prev = read(&snapshot)?;
                let mut kv = KvFile::default();
                for key in prev.keys().filter(|k| !EVAL_KEYS.contains(k)) {
                    kv.set(key, prev.raw(key).unwrap_or_default());
                }
                kv
            } else {
                KvFile::default()
            }
        }
    };
    push(&mut extra, "data_dir", &common.data.as_ref().map(|p| p.display().to_string()));
    push(&mut extra, "out_dir", &common.out.as_ref().map(|p| p.display().to_string()));
    push(&mut extra, "seed", &common.seed);
    for (k, v) in extra {
        kv.set(k, v);
    }
    for pair in &common.set {
        let (k, v) = pair
            .split_once('=')
            .ok_or_else(|| PipelineError::Config(format!("--set expects KEY=VALUE, got `{pair}`")))?;
        kv.set(k.trim(), v.trim());
    }
    ExperimentConfig::from_kv(&kv)
}

fn cmd_train(common: &Common, args: &TrainArgs) -> Result<(), PipelineError> {
    let mut o = Overrides::new();
    args.overrides(&mut o);
    let cfg = resolve(common, o, false)?;
    let epochs = cfg.train.epochs;
    let start = Instant::now();
    let (_, logs) = pipeline::run_train(&cfg, |log| {
        let l = &log.loss;
        println!(
            "epoch {}/{epochs}  loss {:.4}  recon {:.4}  kl {:.4}  class {:.4}  train_acc {:.4}  ({:.0}s)",
            log.epoch,
            l.total,
            l.reconstruction,
            l.kl(),
            l.classification,
            log.train_accuracy,
            start.elapsed().as_secs_f64()
        );
    })?;
    println!(
        "wrote {} ({} epochs), {} and {}",
        cfg.out_dir.join(MODEL_FILE).display(),
        logs.len(),
        cfg.out_dir.join(pipeline::LOSS_FILE).display(),
        cfg.out_dir.join(CONFIG_SNAPSHOT).display()
    );
    Ok(())
}

fn cmd_calibrate(common: &Common, args: &CalibrationArgs) -> Result<(), PipelineError> {
    let mut o = Overrides::new();
    args.overrides(&mut o);
    let cfg = resolve(common, o, true)?;
    let model = pipeline::load_model(&cfg.out_dir.join(MODEL_FILE))?;
    let (index, params) = pipeline::run_calibrate(&cfg, &model)?;
    println!(
        "indexed {} training latents; k = {}, N = {} (effective {:.3}), t_mse = {}, t_ssim = {}",
        index.len(),
        params.k,
        params.percentile_n,
        params.effective_percentile,
        params.thresholds.t_mse,
        params.thresholds.t_ssim
    );
    println!(
        "wrote {} and {}",
        cfg.out_dir.join(INDEX_FILE).display(),
        cfg.out_dir.join(PARAMS_FILE).display()
    );
    Ok(())
}

fn read_png(path: &Path, channels: usize) -> Result<(ImageShape, Vec<f32>), PipelineError> {
    let img = image::open(path).map_err(|e| PipelineError::Data(format!("{}: {e}", path.display())))?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let bytes = match channels {
        1 => img.to_luma8().into_raw(),
        3 => img.to_rgb8().into_raw(),
        c => return Err(PipelineError::Data(format!("PNG input needs 1 or 3 model channels, model has {c}"))),
    };
    Ok((ImageShape::new(h, w, channels), bytes.iter().map(|&b| b as f32 / 255.0).collect()))
}

fn write_png(path: &Path, shape: ImageShape, pixels: &[f32]) -> Result<(), PipelineError> {
    let bytes: Vec<u8> = pixels.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
    let (w, h) = (shape.width as u32, shape.height as u32);
    let res = match shape.channels {
        1 => image::GrayImage::from_raw(w, h, bytes).map(|i| i.save(path)),
        3 => image::RgbImage::from_raw(w, h, bytes).map(|i| i.save(path)),
        c => return Err(PipelineError::Other(format!("cannot write {c}-channel PNG"))),
    };
    match res {
        Some(Ok(())) => Ok(()),
        Some(Err(e)) => Err(PipelineError::Other(format!("{}: {e}", path.display()))),
        None => Err(PipelineError::Other("image buffer size mismatch".into())),
    }
}

fn cmd_infer(
    common: &Common,
    input: &Path,
    item: Option<usize>,
    mode: Mode,
    dump: Option<&Path>,
) -> Result<(), PipelineError> {
    let cfg = resolve(common, Overrides::new(), true)?;
    let model = pipeline::load_model(&cfg.out_dir.join(MODEL_FILE))?;
    let index = pipeline::load_index(&cfg.out_dir.join(INDEX_FILE))?;
    let params = pipeline::load_params(&cfg.out_dir.join(PARAMS_FILE))?.with_mode(mode);
    let is_png = input
        .extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| e.eq_ignore_ascii_case("png"));
    let (shape, mut pixels) = if is_png {
        read_png(input, model.config().image.channels)?
    } else {
        load_idx_images(input)?
    };
    let n = pixels.len() / shape.pixels().max(1);
    let ids: Vec<usize> = match item {
        Some(i) if i >= n => {
            return Err(PipelineError::Data(format!("--item {i} out of range; {} holds {n} images", input.display())))
        }
        Some(i) => {
            pixels = pixels[i * shape.pixels()..(i + 1) * shape.pixels()].to_vec();
            vec![i]
        }
        None => (0..n).collect(),
    };
    let results = pipeline::infer(&model, &index, &params, shape, &pixels)?;
    let train_set = match dump {
        Some(_) => Some(cfg.load_train_validation()?.0),
        None => None,
    };
    if let Some(dir) = dump {
        std::fs::create_dir_all(dir).map_err(|e| PipelineError::Other(format!("{}: {e}", dir.display())))?;
    }
    for (j, (r, &id)) in results.iter().zip(&ids).enumerate() {
        let (a, ev) = (&r.assertion, &r.evidence);
        println!(
            "image {id}: {} predicted {}  J = {}  quality {:?}  mse {:.6}  ssim_loss {:.6}  p_max {:.6}",
            a.tag, a.predicted, a.justification, a.quality, ev.mse, ev.ssim_loss, ev.max_prob
        );
        for nb in &ev.neighbors[..a.exemplar_ids.len()] {
            println!("  neighbor id {:>6}  label {}  distance {:.6}", nb.id, nb.label, nb.distance);
        }
        if let (Some(dir), Some(train_set)) = (dump, &train_set) {
            let p = shape.pixels();
            write_png(&dir.join(format!("input_{id}.png")), shape, &pixels[j * p..(j + 1) * p])?;
            write_png(&dir.join(format!("recon_{id}.png")), shape, &r.reconstruction)?;
            for (rank, &ex) in a.exemplar_ids.iter().enumerate() {
                if ex >= train_set.len() {
                    return Err(PipelineError::Data(format!(
                        "exemplar {ex} is outside the {}-image training split; was the index built with this config?",
                        train_set.len()
                    )));
                }
                let name = format!("exemplar_{id}_{rank}_id{ex}_label{}.png", train_set.labels[ex]);
                write_png(&dir.join(name), shape, train_set.image(ex))?;
            }
        }
    }
    Ok(())
}

fn cmd_attack(common: &Common, args: &EvalArgs) -> Result<(), PipelineError> {
    let mut o = Overrides::new();
    args.overrides(&mut o);
    let cfg = resolve(common, o, true)?;
    let (images, labels, flags) = pipeline::run_attack(&cfg)?;
    println!("wrote {}, {} and {}", images.display(), labels.display(), flags.display());
    Ok(())
}

fn cmd_evaluate(common: &Common, args: &EvalArgs) -> Result<(), PipelineError> {
    let mut o = Overrides::new();
    args.overrides(&mut o);
    let cfg = resolve(common, o, true)?;
    let reports = pipeline::run_evaluate(&cfg)?;
    for r in &reports {
        let m = r.metrics();
        let f = ecvae::metrics::fmt_opt;
        println!(
            "{:<20} F_IK {}  A_IK {}  A_notIK {}  accuracy {}",
            r.mode.as_str(),
            f(m.f_ik),
            f(m.a_ik),
            f(m.a_not_ik),
            f(m.accuracy)
        );
    }
    println!("reports in {}", cfg.out_dir.display());
    Ok(())
}

fn exit_code(e: &PipelineError) -> u8 {
    match e {
        PipelineError::Config(_) => 2,
        PipelineError::Data(_) => 3,
        PipelineError::Model(_) => 4,
        PipelineError::Other(_) => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Train { common, train } => cmd_train(common, train),
        Command::Calibrate { common, calibration } => cmd_calibrate(common, calibration),
        Command::Infer {
            common,
            input,
            item,
            mode,
            dump_exemplars,
        } => cmd_infer(common, input, *item, *mode, dump_exemplars.as_deref()),
        Command::Attack { common, eval } => cmd_attack(common, eval),
        Command::Evaluate { common, eval } => cmd_evaluate(common, eval),
        Command::Report { out } => pipeline::summarize_reports(out).map(|s| print!("{s}")),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
