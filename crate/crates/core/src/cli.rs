//! The `hazecraft` command line.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::dcp::{self, DcpConfig};
use crate::error::{Error, Result};
use crate::gradcheck;
use crate::haze;
use crate::io::{self, ImageBuffer};
use crate::metrics;
use crate::model::{self, ArchVariant};
use crate::tensor::ClipMode;
use crate::train::{self, LossScale, TrainConfig};

/// Environment variable capping worker threads; `0` or unset means one per core.
pub const THREADS_ENV: &str = "HAZECRAFT_THREADS";

/// Tolerance `grad-check` must meet to succeed.
pub const GRAD_CHECK_TOLERANCE: f64 = 1e-5;

#[derive(Parser, Debug)]
#[command(name = "hazecraft", version, about = "Single-image dehazing with AOD-Net")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Synthesize hazy images from clean images and depth maps.
    Synth(SynthArgs),
    /// Write procedural clean scenes and depth maps.
    GenScenes(GenScenesArgs),
    /// Train a model on a manifest.
    Train(TrainArgs),
    /// Dehaze one image with a trained model.
    Dehaze(DehazeArgs),
    /// Score a model on a manifest.
    Eval(EvalArgs),
    /// Dehaze one image with the dark channel prior.
    Dcp(DcpArgs),
    /// Split the MSE between two images into mean and residual parts.
    Decompose(DecomposeArgs),
    /// Compare analytic gradients with finite differences.
    GradCheck(GradCheckArgs),
}

#[derive(Args, Debug)]
struct SynthArgs {
    /// Directory of clean PNG images.
    #[arg(long)]
    clean: PathBuf,
    /// Directory of depth PNGs named like the clean images.
    #[arg(long)]
    depth: PathBuf,
    /// Output directory for hazy images and manifest.tsv.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Scattering coefficient; repeat for several hazy versions per image.
    /// Sampled from 0.4..=1.6 in steps of 0.2 when omitted.
    #[arg(long = "beta")]
    betas: Vec<f64>,
}

#[derive(Args, Debug)]
struct GenScenesArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 200)]
    count: usize,
    /// Scene size as HxW.
    #[arg(long, default_value = "64x64", value_parser = parse_size)]
    size: (usize, usize),
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ArchArg {
    Multiscale,
    Plain,
}

impl From<ArchArg> for ArchVariant {
    fn from(a: ArchArg) -> Self {
        match a {
            ArchArg::Multiscale => ArchVariant::MultiScale,
            ArchArg::Plain => ArchVariant::Plain,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ClipArg {
    Elementwise,
    GlobalNorm,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum LossScaleArg {
    /// Squared error summed per sample, halved, averaged over the batch.
    PerSample,
    /// Squared error averaged over every element.
    Mean,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Manifest written by `synth`.
    #[arg(long)]
    manifest: PathBuf,
    /// Where to write the final checkpoint.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 40)]
    epochs: usize,
    #[arg(long, default_value_t = 0.001)]
    lr: f64,
    #[arg(long, default_value_t = 8)]
    batch: usize,
    #[arg(long, default_value_t = 0.9)]
    momentum: f64,
    #[arg(long, default_value_t = 0.0001)]
    weight_decay: f64,
    /// Gradient clipping bound.
    #[arg(long, default_value_t = 0.1)]
    clip: f64,
    #[arg(long, value_enum, default_value_t = ClipArg::Elementwise)]
    clip_mode: ClipArg,
    /// Scale of the training objective; the logged loss is always the mean.
    #[arg(long, value_enum, default_value_t = LossScaleArg::PerSample)]
    loss_scale: LossScaleArg,
    /// Random HxW crop per sample and epoch.
    #[arg(long, value_parser = parse_size)]
    crop: Option<(usize, usize)>,
    #[arg(long, value_enum, default_value_t = ArchArg::Multiscale)]
    arch: ArchArg,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Standard deviation of the Gaussian weight initialization.
    #[arg(long, default_value_t = model::DEFAULT_INIT_STD)]
    init_std: f64,
    /// Also write a checkpoint every N epochs, next to --out.
    #[arg(long)]
    checkpoint_every: Option<usize>,
    /// Loss log CSV.
    #[arg(long)]
    log: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct DehazeArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    output: PathBuf,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    /// Per-image CSV; printed to stdout when omitted.
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct DcpArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    output: PathBuf,
    /// Skip guided-filter refinement of the transmission.
    #[arg(long)]
    no_refine: bool,
    #[arg(long, default_value_t = 15)]
    patch: usize,
    #[arg(long, default_value_t = 0.95)]
    omega: f64,
    #[arg(long, default_value_t = 0.1)]
    t0: f64,
}

#[derive(Args, Debug)]
struct DecomposeArgs {
    #[arg(long)]
    a: PathBuf,
    #[arg(long)]
    b: PathBuf,
}

#[derive(Args, Debug)]
struct GradCheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn parse_size(s: &str) -> std::result::Result<(usize, usize), String> {
    let (h, w) = s
        .split_once(['x', 'X'])
        .ok_or_else(|| format!("expected HxW, got {s:?}"))?;
    let h: usize = h.trim().parse().map_err(|_| format!("bad height in {s:?}"))?;
    let w: usize = w.trim().parse().map_err(|_| format!("bad width in {s:?}"))?;
    if h == 0 || w == 0 {
        return Err(format!("size must be positive, got {s:?}"));
    }
    Ok((h, w))
}

fn configure_threads() -> std::result::Result<(), String> {
    let threads = match std::env::var(THREADS_ENV) {
        Ok(v) => v
            .trim()
            .parse::<usize>()
            .map_err(|_| format!("{THREADS_ENV} must be a non-negative integer, got {v:?}"))?,
        Err(_) => 0,
    };
    // A pool may already exist when embedded; that is fine.
    let _ = rayon::ThreadPoolBuilder::new().num_threads(threads).build_global();
    Ok(())
}

/// Runs the CLI and returns the process exit code: 0 on success, 1 on a
/// usage error, 2 on a runtime failure.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    if let Err(msg) = configure_threads() {
        eprintln!("error: {msg}");
        return 1;
    }
    match execute(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            2
        }
    }
}

fn execute(command: Command) -> Result<i32> {
    match command {
        Command::Synth(a) => {
            let betas = (!a.betas.is_empty()).then_some(a.betas.as_slice());
            let summary = haze::build_dataset(&a.clean, &a.depth, &a.out, a.seed, betas)?;
            for (path, why) in &summary.skipped {
                eprintln!("skipped {}: {why}", path.display());
            }
            println!(
                "wrote {} hazy images, manifest {}",
                summary.records.len(),
                summary.manifest_path.display()
            );
        }
        Command::GenScenes(a) => {
            let written = haze::write_scenes(&a.out, a.count, a.size.0, a.size.1, a.seed)?;
            println!("wrote {} scenes to {}", written.len(), a.out.display());
        }
        Command::Train(a) => run_train(a)?,
        Command::Dehaze(a) => {
            let params = model::load_checkpoint(&a.model)?;
            let hazy = io::read_png(&a.input)?.to_rgb();
            let out = model::dehaze(&params, &hazy.to_tensor())?;
            io::write_png(&ImageBuffer::from_tensor(&out, 0)?, &a.output)?;
        }
        Command::Eval(a) => {
            let params = model::load_checkpoint(&a.model)?;
            let records = io::read_manifest(&a.manifest)?;
            let ev = train::evaluate(&params, &records)?;
            match &a.csv {
                Some(path) => {
                    metrics::write_metrics_csv(&ev.rows, path)?;
                    println!(
                        "{} images: mean PSNR {:.4} dB, mean SSIM {:.4}",
                        ev.rows.len(),
                        ev.mean.psnr,
                        ev.mean.ssim
                    );
                }
                None => print!("{}", ev.to_csv()),
            }
        }
        Command::Dcp(a) => {
            let config = DcpConfig {
                patch: a.patch,
                omega: a.omega,
                t0: a.t0,
                refine: !a.no_refine,
                ..Default::default()
            };
            let img = io::read_png(&a.input)?;
            let out = dcp::dcp_dehaze(&img, &config)?;
            io::write_png(&out.clean, &a.output)?;
            let [r, g, b] = out.atmosphere;
            println!("atmospheric light {r:.4} {g:.4} {b:.4}");
        }
        Command::Decompose(a) => {
            let x = io::read_png(&a.a)?;
            let y = io::read_png(&a.b)?;
            let d = metrics::mse_decompose(&x, &y)?;
            println!("mse_total {}", d.total);
            println!("mse_mean {}", d.mean_part);
            println!("mse_residual {}", d.residual_part);
        }
        Command::GradCheck(a) => {
            let report = gradcheck::run_gradient_suite(a.seed)?;
            for e in &report.entries {
                println!("{:<40} {:>6} {:.3e}", e.name, e.checked, e.max_rel_error);
            }
            let max = report.max_rel_error();
            let ok = report.passed(GRAD_CHECK_TOLERANCE);
            println!(
                "max relative error {max:.3e} ({})",
                if ok { "ok" } else { "FAILED" }
            );
            return Ok(if ok { 0 } else { 2 });
        }
    }
    Ok(0)
}

fn epoch_checkpoint_path(out: &Path, epoch: usize) -> PathBuf {
    let stem = out.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let ext = out.extension().map(|e| format!(".{}", e.to_string_lossy())).unwrap_or_default();
    out.with_file_name(format!("{stem}_epoch{epoch:03}{ext}"))
}

fn run_train(a: TrainArgs) -> Result<()> {
    let config = TrainConfig {
        lr: a.lr,
        momentum: a.momentum,
        weight_decay: a.weight_decay,
        batch_size: a.batch,
        epochs: a.epochs,
        clip_bound: a.clip,
        clip_mode: match a.clip_mode {
            ClipArg::Elementwise => ClipMode::Elementwise,
            ClipArg::GlobalNorm => ClipMode::GlobalNorm,
        },
        loss_scale: match a.loss_scale {
            LossScaleArg::PerSample => LossScale::PerSample,
            LossScaleArg::Mean => LossScale::Mean,
        },
        crop: a.crop,
        seed: a.seed,
        init_std: a.init_std,
    };
    config.validate()?;
    if a.checkpoint_every == Some(0) {
        return Err(Error::InvalidArgument("--checkpoint-every must be at least 1".into()));
    }
    let records = io::read_manifest(&a.manifest)?;
    if records.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "{} has no records",
            a.manifest.display()
        )));
    }
    let samples = train::load_samples(&records)?;
    let (params, log) = train::train_samples(&samples, &config, a.arch.into(), |epoch, params, e| {
        eprintln!(
            "epoch {epoch:>3}  loss {:.6}  clipped {:.3}  {:.1}s",
            e.mean_loss, e.clipped_fraction, e.seconds
        );
        if a.checkpoint_every.is_some_and(|n| epoch % n == 0) {
            model::save_checkpoint(params, epoch_checkpoint_path(&a.out, epoch))?;
        }
        Ok(())
    })?;
    model::save_checkpoint(&params, &a.out)?;
    if let Some(path) = &a.log {
        log.write_csv(path)?;
    }
    println!("wrote {}", a.out.display());
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sizes_parse() {
        assert_eq!(parse_size("64x48"), Ok((64, 48)));
        assert_eq!(parse_size("480X640"), Ok((480, 640)));
        assert!(parse_size("64").is_err());
        assert!(parse_size("0x4").is_err());
    }

    #[test]
    fn exit_codes() {
        assert_eq!(run(["hazecraft", "--help"]), 0);
        assert_eq!(run(["hazecraft"]), 1);
        assert_eq!(run(["hazecraft", "train", "--bogus"]), 1);
        assert_eq!(run(["hazecraft", "gen-scenes", "--out", "x", "--size", "64"]), 1);
        assert_eq!(
            run(["hazecraft", "dehaze", "--model", "/nonexistent", "--input", "a", "--output", "b"]),
            2
        );
    }

    #[test]
    fn train_defaults_match_config_defaults() {
        let cli = Cli::try_parse_from(["hazecraft", "train", "--manifest", "m", "--out", "o"]).unwrap();
        let Command::Train(a) = cli.command else { panic!() };
        let d = TrainConfig::default();
        assert_eq!((a.lr, a.momentum, a.weight_decay, a.clip), (d.lr, d.momentum, d.weight_decay, d.clip_bound));
        assert_eq!((a.batch, a.epochs, a.init_std), (d.batch_size, d.epochs, d.init_std));
    }

    #[test]
    fn epoch_paths() {
        assert_eq!(
            epoch_checkpoint_path(Path::new("/tmp/m.ckpt"), 5),
            PathBuf::from("/tmp/m_epoch005.ckpt")
        );
    }
}
