use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use sinofill::diffusion::{DiffusionSchedule, TrainConfig, DEFAULT_SAMPLING_STEPS};
use sinofill::io::{self, Split};
use sinofill::metrics::Method;
use sinofill::mlem::{reconstruct, MlemConfig};
use sinofill::pipeline::{self, EvaluateConfig, GenerateConfig};
use sinofill::Projector;

/// Limited-angle sinogram inpainting with a conditional diffusion model.
#[derive(Parser, Debug)]
#[command(name = "sinofill", version)]
struct Cli {
    /// Default sizes: `desk` (64×64 images, 90 angles) or `ci` (32×32, 45 angles, 3 epochs).
    #[arg(long, value_enum, global = true, default_value_t = Profile::Desk)]
    profile: Profile,

    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Profile {
    Desk,
    Ci,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic corpus of phantoms and sinograms.
    GenerateData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        n_train: Option<usize>,
        #[arg(long)]
        n_eval: Option<usize>,
        /// Image side length in pixels.
        #[arg(long)]
        size: Option<usize>,
        #[arg(long)]
        angles: Option<usize>,
        #[arg(long)]
        bins: Option<usize>,
        #[arg(long)]
        missing_fraction: Option<f64>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train the conditional denoiser on the train split.
    Train {
        #[arg(long)]
        data: PathBuf,
        /// Checkpoint path; the loss log goes next to it as `<stem>.loss.csv`.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_parser = positive)]
        epochs: Option<usize>,
        #[arg(long, value_parser = positive, default_value_t = 8)]
        batch: usize,
        #[arg(long, default_value_t = 2e-4)]
        lr: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Inpaint the missing wedge of every sample in a split.
    Infer {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "eval")]
        split: Split,
        #[arg(long, value_parser = positive, default_value_t = DEFAULT_SAMPLING_STEPS)]
        steps: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// MLEM reconstruction of a single sinogram.
    Reconstruct {
        #[arg(long)]
        sino: PathBuf,
        /// Angular mask record; only observed rows enter the data model.
        #[arg(long)]
        mask: Option<PathBuf>,
        #[arg(long, default_value_t = 50)]
        iters: usize,
        /// Image side length; defaults to 2(bins+1)/3.
        #[arg(long)]
        size: Option<usize>,
        /// Output image (`.sino`); a `.pgm` preview is written alongside.
        #[arg(long)]
        out: PathBuf,
    },
    /// Score LA and inpainted reconstructions of the eval split.
    Evaluate {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 50)]
        iters: usize,
        /// Number of samples that get error-map previews.
        #[arg(long, default_value_t = 4)]
        maps: usize,
    },
}

fn positive(s: &str) -> Result<usize, String> {
    match s.parse::<usize>() {
        Ok(0) => Err("must be at least 1".into()),
        Ok(v) => Ok(v),
        Err(e) => Err(e.to_string()),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => e.exit(),
    };
    if let Err(e) = configure_threads() {
        eprintln!("error: {e:#}");
        return ExitCode::from(2);
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn configure_threads() -> Result<()> {
    let Ok(v) = std::env::var("SINOFILL_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .with_context(|| format!("SINOFILL_THREADS={v:?} is not a positive integer"))?;
    #[cfg(feature = "parallel")]
    rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    #[cfg(not(feature = "parallel"))]
    let _ = n;
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let base = match cli.profile {
        Profile::Desk => GenerateConfig::desk(),
        Profile::Ci => GenerateConfig::ci(),
    };
    match cli.command {
        Command::GenerateData { out, n_train, n_eval, size, angles, bins, missing_fraction, seed } => {
            let cfg = GenerateConfig {
                n_train: n_train.unwrap_or(base.n_train),
                n_eval: n_eval.unwrap_or(base.n_eval),
                image_size: size.unwrap_or(base.image_size),
                n_angles: angles.unwrap_or(base.n_angles),
                n_bins: bins.unwrap_or(base.n_bins),
                missing_fraction: missing_fraction.unwrap_or(base.missing_fraction),
                seed,
            };
            let m = pipeline::generate_dataset(&out, &cfg).with_context(|| format!("generating {}", out.display()))?;
            println!(
                "wrote {} samples to {} (normalisation scale {:.4})",
                m.samples.len(),
                out.display(),
                m.norm_scale
            );
        }
        Command::Train { data, out, epochs, batch, lr, seed } => {
            let epochs = epochs.unwrap_or(if cli.profile == Profile::Ci { 3 } else { 30 });
            let cfg = TrainConfig { epochs, batch_size: batch, learning_rate: lr, seed, ..TrainConfig::default() };
            let mut last_epoch = None;
            let mut sum = 0.0;
            let mut count = 0;
            let (ckpt, losses) =
                pipeline::train_on_dataset(&data, &cfg, &DiffusionSchedule::default_linear(), |epoch, rec| {
                    if last_epoch.is_some_and(|e| e != epoch) {
                        flush(last_epoch.unwrap(), sum, count);
                        (sum, count) = (0.0, 0);
                    }
                    last_epoch = Some(epoch);
                    sum += rec.loss;
                    count += 1;
                })
                .with_context(|| format!("training on {}", data.display()))?;
            if let Some(e) = last_epoch {
                flush(e, sum, count);
            }
            io::write_checkpoint(&out, &ckpt)?;
            let loss_path = loss_csv_path(&out);
            std::fs::write(&loss_path, io::loss_csv(&losses))
                .with_context(|| format!("writing {}", loss_path.display()))?;
            println!("wrote {} and {}", out.display(), loss_path.display());
        }
        Command::Infer { model, data, split, steps, out, seed } => {
            let ckpt = io::read_checkpoint(&model)?;
            let ids = pipeline::infer_dataset(&ckpt, &data, split, steps, seed, &out)?;
            println!("inpainted {} samples into {}", ids.len(), out.display());
        }
        Command::Reconstruct { sino, mask, iters, size, out } => {
            let grid = io::read_sino_grid(&sino)?;
            let size = match size {
                Some(s) => s,
                None if (2 * (grid.cols + 1)) % 3 == 0 => 2 * (grid.cols + 1) / 3,
                None => bail!("cannot infer the image size from {} bins; pass --size", grid.cols),
            };
            let y = grid.into_sinogram(size)?;
            let mask = mask.map(|p| io::read_mask(&p)).transpose()?;
            let cfg = MlemConfig::new(iters, MlemConfig::default().epsilon, mask)?;
            let img = reconstruct(&Projector::new(*y.geometry()), &y, &cfg)?;
            let (sino_path, pgm_path) = if out.extension().is_some_and(|e| e == "pgm") {
                (out.with_extension("sino"), out.clone())
            } else {
                (out.clone(), out.with_extension("pgm"))
            };
            io::write_image(&sino_path, &img)?;
            io::write_pgm(&pgm_path, img.size(), img.size(), img.data())?;
            println!("wrote {} and {}", sino_path.display(), pgm_path.display());
        }
        Command::Evaluate { data, pred, out, iters, maps } => {
            let cfg =
                EvaluateConfig { mlem: MlemConfig::new(iters, MlemConfig::default().epsilon, None)?, n_maps: maps };
            let (eval, previews) = pipeline::evaluate_dataset(&data, &pred, &cfg)?;
            pipeline::write_evaluation(&out, &eval, &previews)?;
            print!("{}", eval.summary());
            let perfect = eval.vs_phantom.samples.iter().filter(|s| s.get(Method::Inpainted).is_infinite()).count()
                + eval.vs_gt_recon.samples.iter().filter(|s| s.get(Method::Inpainted).is_infinite()).count();
            if perfect > 0 {
                eprintln!("note: {perfect} inpainted scores are infinite (prediction identical to the reference)");
            }
        }
    }
    Ok(())
}

fn flush(epoch: usize, sum: f64, count: usize) {
    eprintln!("epoch {:>3}  mean loss {:.5}", epoch + 1, sum / count as f64);
}

fn loss_csv_path(checkpoint: &Path) -> PathBuf {
    checkpoint.with_extension("loss.csv")
}
