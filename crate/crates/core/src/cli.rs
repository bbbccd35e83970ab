//! Command-line front end: argument parsing and the subcommand drivers.
//!
//! Exit codes: 0 on success, 1 on usage, validation or contract errors, 2 when
//! the filesystem fails.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::autodiff::Checkpoint;
use crate::checks::{gradcheck_suite, TOLERANCE};
use crate::error::Result;
use crate::eval::{evaluate, export_spectrogram};
use crate::separator::{separate, SeparatorConfig, SeparatorModel};
use crate::signals::{make_dataset, read_wav, write_wav, BitDepth, DatasetConfig, DatasetManifest, Split};
use crate::trainer::{train, TrainConfig};

#[derive(Debug, Parser)]
#[command(name = "noisy-sep", version, about = "Noise-aware speech separation toolkit")]
struct Cli {
    /// `key=value` configuration file (training, model and loss settings)
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for data generation, initialization and training
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Root directory for every file written
    #[arg(long, global = true, default_value = ".")]
    out: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic dataset and its manifest
    Mix(MixArgs),
    /// Train a separator
    Train(TrainArgs),
    /// Split a WAV file into per-source WAVs
    Separate(SeparateArgs),
    /// Score a checkpoint on a manifest and write a CSV report
    Evaluate(EvaluateArgs),
    /// Check every gradient against finite differences on the tiny model
    Gradcheck,
    /// Export a magnitude spectrogram as PGM and CSV
    Spectrogram(SpectrogramArgs),
    /// Count parameters with the noise output on and off
    Params,
}

#[derive(Debug, Args)]
struct MixArgs {
    #[arg(long, default_value_t = 8)]
    items: usize,
    /// Seconds per mixture
    #[arg(long, default_value_t = 1.0)]
    duration: f64,
    #[arg(long, default_value_t = 2)]
    speakers: usize,
    #[arg(long, default_value_t = -6.0, allow_hyphen_values = true)]
    snr_min: f64,
    #[arg(long, default_value_t = 3.0, allow_hyphen_values = true)]
    snr_max: f64,
    #[arg(long, default_value = "train")]
    split: String,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[arg(long)]
    train_manifest: Option<PathBuf>,
    #[arg(long)]
    valid_manifest: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    /// Continue from latest.ckpt in the checkpoint directory
    #[arg(long)]
    resume: bool,
}

#[derive(Debug, Args)]
struct SeparateArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    input: PathBuf,
}

#[derive(Debug, Args)]
struct EvaluateArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    /// Report file name under the output root
    #[arg(long, default_value = "report.csv")]
    report: PathBuf,
}

#[derive(Debug, Args)]
struct SpectrogramArgs {
    input: PathBuf,
    #[arg(long, default_value_t = 256)]
    frame: usize,
    #[arg(long, default_value_t = 64)]
    hop: usize,
}

fn stem(path: &Path) -> String {
    path.file_stem()
        .map_or_else(|| "out".to_string(), |s| s.to_string_lossy().into_owned())
}

fn load_config(cli: &Cli) -> Result<TrainConfig> {
    let mut cfg = match &cli.config {
        Some(p) => TrainConfig::load(p)?,
        None => TrainConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn load_model(path: &Path) -> Result<SeparatorModel> {
    SeparatorModel::from_checkpoint(&Checkpoint::load(path)?)
}

fn run_mix(cli: &Cli, a: &MixArgs) -> Result<()> {
    let cfg = DatasetConfig {
        num_speakers: a.speakers,
        items: a.items,
        duration_s: a.duration,
        snr_min_db: a.snr_min,
        snr_max_db: a.snr_max,
        seed: cli.seed.unwrap_or(0),
        split: a.split.parse::<Split>()?,
        ..DatasetConfig::default()
    };
    let m = make_dataset(&cfg, &cli.out)?;
    println!(
        "wrote {} items to {}",
        m.len(),
        cli.out.join(format!("{}.tsv", cfg.split)).display()
    );
    Ok(())
}

fn run_train(cli: &Cli, a: &TrainArgs) -> Result<()> {
    let mut cfg = load_config(cli)?;
    if let Some(p) = &a.train_manifest {
        cfg.train_manifest = Some(p.clone());
    }
    if let Some(p) = &a.valid_manifest {
        cfg.valid_manifest = Some(p.clone());
    }
    if let Some(e) = a.epochs {
        cfg.epochs = e;
    }
    if cfg.checkpoint_dir.is_relative() {
        cfg.checkpoint_dir = cli.out.join(&cfg.checkpoint_dir);
    }
    let outcome = train(&cfg, a.resume)?;
    let s = &outcome.state;
    print!("trained {} steps over {} epochs", s.step, s.epoch);
    match s.best_epoch {
        Some(e) => println!("; best validation loss {:.4} at epoch {e}", s.best_val),
        None => println!(),
    }
    println!("latest: {}", outcome.latest.display());
    println!("best: {}", outcome.best.display());
    println!("log: {}", outcome.log.display());
    Ok(())
}

fn run_separate(cli: &Cli, a: &SeparateArgs) -> Result<()> {
    let model = load_model(&a.checkpoint)?;
    let mix = read_wav(&a.input)?;
    let sep = separate(&model, &mix)?;
    fs::create_dir_all(&cli.out)?;
    let base = stem(&a.input);
    let mut named: Vec<(String, _)> = sep
        .speakers
        .iter()
        .enumerate()
        .map(|(k, s)| (format!("{base}_s{}.wav", k + 1), s))
        .collect();
    if let Some(n) = &sep.noise {
        named.push((format!("{base}_noise.wav"), n));
    }
    for (name, signal) in named {
        let path = cli.out.join(name);
        let report = write_wav(&path, signal, BitDepth::Float32)?;
        println!("{}{}", path.display(), if report.saturated() { " (clipped)" } else { "" });
    }
    Ok(())
}

fn run_evaluate(cli: &Cli, a: &EvaluateArgs) -> Result<()> {
    let model = load_model(&a.checkpoint)?;
    let manifest = DatasetManifest::load(&a.manifest)?;
    let report = evaluate(&model, &manifest)?;
    fs::create_dir_all(&cli.out)?;
    let path = cli.out.join(&a.report);
    fs::write(&path, report.to_csv())?;
    print!("{} items: SI-SNRi {:.2} dB, SDRi {:.2} dB", report.rows.len(), report.mean_si_snri(), report.mean_sdri());
    if let Some(n) = report.mean_noise_si_snr() {
        print!(", noise SI-SNR {n:.2} dB");
    }
    println!("\nreport: {}", path.display());
    Ok(())
}

/// Returns whether every check passed.
fn run_gradcheck(cli: &Cli) -> Result<bool> {
    let outcomes = gradcheck_suite(cli.seed.unwrap_or(0))?;
    let mut worst: f64 = 0.0;
    let mut all = true;
    for o in &outcomes {
        let r = &o.report;
        worst = worst.max(r.max_rel_err);
        all &= r.pass;
        println!(
            "{:<18} max_rel_err {:.3e}  coords {:>5}  kinks {:>3}  below-floor {:>4}  {}",
            o.name,
            r.max_rel_err,
            r.coords_checked,
            r.kinks_skipped,
            r.below_resolution,
            if r.pass { "ok" } else { "FAIL" }
        );
    }
    println!("max_rel_err {worst:.3e} (tolerance {TOLERANCE:e})");
    println!("{}", if all { "PASS" } else { "FAIL" });
    Ok(all)
}

fn run_spectrogram(cli: &Cli, a: &SpectrogramArgs) -> Result<()> {
    let signal = read_wav(&a.input)?;
    let files = export_spectrogram(&signal, a.frame, a.hop, &cli.out.join(stem(&a.input)))?;
    println!(
        "{} frames x {} bins: {}, {}",
        files.frames,
        files.bins,
        files.pgm.display(),
        files.csv.display()
    );
    Ok(())
}

fn count_params(cfg: &SeparatorConfig, noise_speaker: bool) -> Result<usize> {
    let cfg = SeparatorConfig {
        noise_speaker,
        ..cfg.clone()
    };
    Ok(SeparatorModel::new(cfg, 0)?.num_params())
}

fn run_params(cli: &Cli) -> Result<()> {
    let cfg = load_config(cli)?.model;
    let off = count_params(&cfg, false)?;
    let on = count_params(&cfg, true)?;
    let delta = on - off;
    println!("without noise output: {off}");
    println!("with noise output: {on}");
    println!("delta: {delta} ({:.3}%)", 100.0 * delta as f64 / off as f64);
    Ok(())
}

fn dispatch(cli: &Cli) -> Result<i32> {
    match &cli.command {
        Command::Mix(a) => run_mix(cli, a)?,
        Command::Train(a) => run_train(cli, a)?,
        Command::Separate(a) => run_separate(cli, a)?,
        Command::Evaluate(a) => run_evaluate(cli, a)?,
        Command::Gradcheck => return Ok(if run_gradcheck(cli)? { 0 } else { 1 }),
        Command::Spectrogram(a) => run_spectrogram(cli, a)?,
        Command::Params => run_params(cli)?,
    }
    Ok(0)
}

/// Runs the tool on `argv` (program name first) and returns the exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(&cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_io() {
                2
            } else {
                1
            }
        }
    }
}
