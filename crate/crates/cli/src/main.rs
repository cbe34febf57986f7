use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use robustgan::eval::{self, ExtractorKind, FeatureExtractor, MetricRow, DEFAULT_EXTRACTOR_SEED};
use robustgan::imageio::{load_dir, write_png, BitDepth};
use robustgan::settings::{build_setting, degrade_dataset, ErrorPolicy};
use robustgan::{restore, synth, train, Result};

#[derive(Parser)]
#[command(name = "robustgan", version, about = "Generative models from blurred, noisy and compressed images")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Degrade a clean corpus under a setting and write manifest.jsonl.
    Degrade {
        #[arg(long)]
        setting: char,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Use the larger blur kernel grid.
        #[arg(long)]
        enlarged: bool,
        /// Skip unreadable images instead of aborting.
        #[arg(long)]
        keep_going: bool,
    },
    /// Train a generator from a config file.
    Train {
        #[arg(long)]
        config: PathBuf,
    },
    /// Compare two image directories and write metrics and grids.
    Eval {
        #[arg(long)]
        real: PathBuf,
        #[arg(long)]
        fake: PathBuf,
        #[arg(long, default_value = "randproj")]
        extractor: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "fake")]
        model: String,
        #[arg(long, default_value = "-")]
        setting: String,
        #[arg(long, default_value_t = DEFAULT_EXTRACTOR_SEED)]
        extractor_seed: u64,
        /// Also report PSNR and SSIM, pairing images by sorted file name.
        #[arg(long)]
        paired: bool,
    },
    /// Train a restoration network from a config file.
    RestoreTrain {
        #[arg(long)]
        config: PathBuf,
    },
    /// Restore every image in a directory with a trained restorer.
    Restore {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write clean samples from a generator checkpoint.
    Sample {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 64)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Use the raw generator instead of its moving average.
        #[arg(long)]
        raw: bool,
    },
    /// Write a synthetic shapes corpus.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1000)]
        n: usize,
        #[arg(long, default_value_t = 32)]
        size: usize,
        #[arg(long, default_value_t = 3)]
        channels: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::Degrade { setting, input, out, seed, enlarged, keep_going } => {
            let mut s = build_setting(setting.to_ascii_uppercase())?;
            if enlarged {
                s = s.enlarged();
            }
            let policy = if keep_going { ErrorPolicy::Continue } else { ErrorPolicy::Abort };
            let report = degrade_dataset(&input, &out, &s, seed, policy)?;
            println!("degraded {} images into {}", report.records.len(), out.display());
            for (path, reason) in &report.failures {
                eprintln!("skipped {}: {reason}", path.display());
            }
        }
        Command::Train { config } => {
            let cfg = train::TrainConfig::load(&config)?;
            let summary = train::run(&cfg)?;
            println!("trained {} iterations, checkpoint {}", summary.iterations, summary.final_checkpoint.display());
        }
        Command::Eval { real, fake, extractor, out, model, setting, extractor_seed, paired } => {
            let real = load_dir(&real)?;
            let fake = load_dir(&fake)?;
            let Some(first) = real.first() else {
                return Err(robustgan::Error::InvalidArgument("no real images".into()));
            };
            let shape = (first.channels(), first.height(), first.width());
            let ex = FeatureExtractor::new(ExtractorKind::parse(&extractor)?, shape, extractor_seed)?;
            let fid = eval::fid_images(&real, &fake, &ex)?;
            let mut rows = vec![MetricRow::new(&model, &setting, "fid", fid)];
            if paired {
                rows = restore::restore_eval(&model, &setting, &fake, &real, &ex)?;
            }
            eval::report(&rows, &[("real", &real[..real.len().min(64)]), ("fake", &fake[..fake.len().min(64)])], &out)?;
            for r in &rows {
                println!("{} {} {} {:.6}", r.model, r.setting, r.metric, r.value);
            }
        }
        Command::RestoreTrain { config } => {
            let cfg = restore::RestoreConfig::load(&config)?;
            let summary = restore::train_restorer(&cfg)?;
            println!("trained {} iterations, checkpoint {}", summary.iterations, summary.final_checkpoint.display());
        }
        Command::Restore { ckpt, input, out } => {
            let n = restore::restore_dir(&ckpt, &input, &out)?;
            println!("restored {n} images into {}", out.display());
        }
        Command::Sample { ckpt, out, n, seed, raw } => {
            let (_, bundle) = train::load_generator::<f64>(&ckpt)?;
            let images = train::sample_clean(&bundle, n, seed, !raw)?;
            std::fs::create_dir_all(&out).map_err(|e| robustgan::Error::io(&out, e))?;
            for (i, img) in images.iter().enumerate() {
                write_png(&out.join(format!("sample_{i:05}.png")), img, BitDepth::Eight)?;
            }
            println!("wrote {n} samples into {}", out.display());
        }
        Command::Synth { out, n, size, channels, seed } => {
            synth::write_dataset(&out, &synth::shapes(n, channels, size, seed)?)?;
            println!("wrote {n} images into {}", out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse().command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
