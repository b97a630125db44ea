//! Command-line front end.
//!
//! Exit status is 0 on success, 1 for usage errors and 2 for configuration,
//! validation, data and I/O errors.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::bench::{bench_all, bench_csv, BenchCase};
use crate::config::{network_pairs, RunConfig};
use crate::data::{
    load_checkpoint, load_manifest, load_pgm, load_samples, network_checkpoint, resize_bilinear, restore_network,
    save_checkpoint, synth_dataset, write_pgm, write_synth, Image, SynthConfig,
};
use crate::error::{Error, Result};
use crate::evaluation::{
    auc_per_class, detect, label_matrix, localization_accuracy, localization_cases, DEFAULT_TAU, IOBB_THRESHOLDS,
};
use crate::model::{build_network, TAP_PRE_POOL};
use crate::selftest::{run_selftest, Mutation};
use crate::tensor::Tensor;
use crate::training::{predict, train_epoch, Trainer};

pub const METRICS_CSV_HEADER: &str = "epoch,lambda_plus,lambda_minus,mean_loss";

#[derive(Parser, Debug)]
#[command(
    name = "dynroute",
    version,
    about = "Capsule network with Gram-matrix dynamic routing"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Train a network and write a checkpoint plus per-epoch metrics.
    Train(TrainArgs),
    /// Score a manifest: per-class AUC and, when boxes exist, localization.
    Eval(EvalArgs),
    /// Grad-CAM heatmap and detected box for one image.
    Gradcam(GradcamArgs),
    /// Time plain, element-wise routed and Gram-routed 1x1 layers.
    Bench(BenchArgs),
    /// Generate the synthetic glyph dataset.
    Synth(SynthArgs),
    /// Run the built-in verification suites.
    Selftest(SelftestArgs),
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub images_root: PathBuf,
    /// Flat key=value configuration file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory for model.ckpt and metrics.csv.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Plain 1x1 convolutions and an unrouted class-capsule head.
    #[arg(long)]
    pub baseline: bool,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub images_root: PathBuf,
    #[arg(long)]
    pub ckpt: PathBuf,
    /// AUC CSV path; the localization table goes next to it.
    #[arg(long)]
    pub report: PathBuf,
    /// Configuration the checkpoint must match.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_TAU)]
    pub tau: f64,
}

#[derive(Args, Debug)]
pub struct GradcamArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub image: PathBuf,
    #[arg(long)]
    pub class: usize,
    /// Heatmap PGM path; the box is printed and written beside it as .txt.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = DEFAULT_TAU)]
    pub tau: f64,
}

#[derive(Args, Debug)]
pub struct BenchArgs {
    #[arg(long = "spatial")]
    pub spatial: usize,
    #[arg(long = "in-maps")]
    pub in_maps: usize,
    #[arg(long = "out-maps")]
    pub out_maps: usize,
    #[arg(long = "iters")]
    pub iters: usize,
    #[arg(long = "repeat", default_value_t = 5)]
    pub repeat: usize,
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    #[arg(long)]
    pub out_dir: PathBuf,
    #[arg(long)]
    pub n_train: usize,
    #[arg(long)]
    pub n_test: usize,
    #[arg(long, default_value_t = 64)]
    pub size: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Args, Debug)]
pub struct SelftestArgs {
    /// Inject a known defect to confirm the suites catch it.
    #[arg(long, hide = true, value_parser = ["transpose"])]
    pub mutate: Option<String>,
}

/// Parses `args` (including the program name), runs the command and
/// returns the process exit status. Normal output goes to `out`.
pub fn run<I, S>(args: I, out: &mut dyn std::io::Write) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli.command, out) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            2
        }
    }
}

fn execute(cmd: Command, out: &mut dyn std::io::Write) -> Result<i32> {
    let mut text = String::new();
    let code = match cmd {
        Command::Train(a) => cmd_train(&a, &mut text)?,
        Command::Eval(a) => cmd_eval(&a, &mut text)?,
        Command::Gradcam(a) => cmd_gradcam(&a, &mut text)?,
        Command::Bench(a) => cmd_bench(&a, &mut text)?,
        Command::Synth(a) => cmd_synth(&a, &mut text)?,
        Command::Selftest(a) => cmd_selftest(&a, &mut text),
    };
    out.write_all(text.as_bytes())?;
    Ok(code)
}

fn resolve_config(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        Some(p) => RunConfig::from_file(p),
        None => Ok(RunConfig::default()),
    }
}

pub fn cmd_train(a: &TrainArgs, out: &mut String) -> Result<i32> {
    let mut cfg = resolve_config(a.config.as_deref())?;
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(e) = a.epochs {
        cfg.epochs = e;
    }
    if a.baseline {
        cfg.network.routed = false;
    }
    cfg.validate()?;
    let entries = load_manifest(&a.manifest)?;
    let samples = load_samples(&entries, &a.images_root, cfg.network.n_classes, cfg.network.input_size)?;
    if samples.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "{} lists no images",
            a.manifest.display()
        )));
    }
    let mut net = build_network(&cfg.network, cfg.seed)?;
    let mut trainer = Trainer::new(cfg.train.clone(), &net, &samples, cfg.seed)?;
    let mut metrics = format!("{METRICS_CSV_HEADER}\n");
    for _ in 0..cfg.epochs {
        let m = train_epoch(&mut net, &samples, &mut trainer)?;
        log::info!("epoch {} loss {:.6}", m.epoch, m.mean_loss);
        let _ = writeln!(
            metrics,
            "{},{},{},{:.12e}",
            m.epoch, m.lambda_plus, m.lambda_minus, m.mean_loss
        );
    }
    std::fs::create_dir_all(&a.out)?;
    let ckpt_path = a.out.join("model.ckpt");
    save_checkpoint(&ckpt_path, &network_checkpoint(&net, Some(&trainer)))?;
    std::fs::write(a.out.join("metrics.csv"), metrics)?;
    std::fs::write(a.out.join("config.txt"), cfg.to_text())?;
    let _ = writeln!(out, "wrote {}", ckpt_path.display());
    Ok(0)
}

/// Names of architecture keys whose checkpoint echo differs from `cfg`.
fn mismatched_keys(echo: &[(String, String)], cfg: &RunConfig) -> Vec<String> {
    network_pairs(&cfg.network)
        .into_iter()
        .filter(|(k, v)| !echo.iter().any(|(ek, ev)| ek == k && ev == v))
        .map(|(k, _)| k)
        .collect()
}

fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let stem = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    path.with_file_name(format!("{stem}{suffix}"))
}

pub fn cmd_eval(a: &EvalArgs, out: &mut String) -> Result<i32> {
    let ckpt = load_checkpoint(&a.ckpt)?;
    if let Some(p) = &a.config {
        let cfg = RunConfig::from_file(p)?;
        let bad = mismatched_keys(&ckpt.config, &cfg);
        if !bad.is_empty() {
            return Err(Error::Config(format!(
                "checkpoint is incompatible with {}: mismatched keys {}",
                p.display(),
                bad.join(", ")
            )));
        }
    }
    let net = restore_network(&ckpt)?;
    let entries = load_manifest(&a.manifest)?;
    let samples = load_samples(&entries, &a.images_root, net.config.n_classes, net.config.input_size)?;
    let scores = predict(&net, &samples, 32)?;
    let report = auc_per_class(&scores, &label_matrix(&samples, net.config.n_classes)?)?;
    std::fs::write(&a.report, report.to_csv())?;
    match report.macro_auc {
        Some(m) => {
            let _ = writeln!(out, "macro AUC {m:.6}");
        }
        None => {
            let _ = writeln!(out, "macro AUC undefined");
        }
    }
    if samples.iter().any(|s| !s.boxes.is_empty()) {
        let cases = localization_cases(&net, &samples, TAP_PRE_POOL, a.tau, 32)?;
        let loc = localization_accuracy(&cases, &IOBB_THRESHOLDS);
        let path = sibling(&a.report, "_localization.csv");
        std::fs::write(&path, loc.to_csv())?;
        let _ = writeln!(out, "wrote {}", path.display());
    }
    Ok(0)
}

pub fn cmd_gradcam(a: &GradcamArgs, out: &mut String) -> Result<i32> {
    let net = restore_network(&load_checkpoint(&a.ckpt)?)?;
    if a.class >= net.config.n_classes {
        return Err(Error::InvalidArgument(format!(
            "class {} out of range for {} classes",
            a.class, net.config.n_classes
        )));
    }
    let mut img = load_pgm(&a.image)?;
    let s = net.config.input_size;
    if (img.width, img.height) != (s, s) {
        eprintln!("notice: resizing {}x{} input to {s}x{s}", img.width, img.height);
        img = resize_bilinear(&img, s, s)?;
    }
    let batch = Tensor::new(vec![1, 1, s, s], img.pixels)?;
    let det = detect(&net, &batch, &[a.class], TAP_PRE_POOL, a.tau)?.remove(0);
    write_pgm(&Image::new(s, s, det.upsampled)?, &a.out)?;
    let line = match det.region.bbox {
        Some(b) => format!("{} {} {} {}", b.x, b.y, b.w, b.h),
        None => "no detection".to_string(),
    };
    std::fs::write(a.out.with_extension("txt"), format!("{line}\n"))?;
    let _ = writeln!(out, "{line}");
    Ok(0)
}

pub fn cmd_bench(a: &BenchArgs, out: &mut String) -> Result<i32> {
    let case = BenchCase {
        spatial: a.spatial,
        in_maps: a.in_maps,
        out_maps: a.out_maps,
        iters: a.iters,
    };
    out.push_str(&bench_csv(&bench_all(&case, a.repeat, 0)?));
    Ok(0)
}

pub fn cmd_synth(a: &SynthArgs, out: &mut String) -> Result<i32> {
    let ds = synth_dataset(&SynthConfig::new(a.n_train, a.n_test, a.size, a.seed))?;
    write_synth(&ds, &a.out_dir)?;
    let _ = writeln!(
        out,
        "wrote {} training and {} test images to {}",
        ds.train.len(),
        ds.test.len(),
        a.out_dir.display()
    );
    Ok(0)
}

pub fn cmd_selftest(a: &SelftestArgs, out: &mut String) -> i32 {
    let mutation = a.mutate.as_deref().map(|_| Mutation::TransposeWeights);
    let suites = run_selftest(mutation);
    let mut failed = 0;
    for s in &suites {
        let _ = writeln!(out, "{s}");
        failed += usize::from(!s.ok());
    }
    let _ = writeln!(out, "{} suites, {failed} failed", suites.len());
    if failed == 0 {
        0
    } else {
        2
    }
}
