//! Command-line entry points for the watermarking laboratory.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use latentmark::attacks::AttackKind;
use latentmark::error::LabError;
use latentmark::eval::{DistortionKind, DistortionSpec};
use latentmark::runtime::{
    cmd_attack, cmd_detect, cmd_distort, cmd_evaluate, cmd_generate, cmd_report,
    cmd_train_selector, CorpusSource, EvaluateMode, RunConfig, ENV_WORKERS,
};

#[derive(Parser)]
#[command(
    name = "latentmark",
    version,
    about = "Instance-specific diffusion watermarking lab: inject, detect, attack, evaluate"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArg {
    /// Run configuration (TOML). Omit to use the built-in toy defaults.
    #[arg(long)]
    config: Option<PathBuf>,
}

impl ConfigArg {
    fn load(&self) -> Result<RunConfig, LabError> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::toy_defaults(),
        };
        cfg.apply_env_overrides()?;
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train the parameter selector on non-watermarked images.
    TrainSelector {
        #[command(flatten)]
        config: ConfigArg,
        /// Directory of training PNGs; omit to generate a toy corpus.
        #[arg(long)]
        corpus: Option<PathBuf>,
        /// Number of toy images to generate when no corpus is given.
        #[arg(long, default_value_t = 64)]
        generate: usize,
        /// Existing key file; omit to derive a fresh key from the run seed.
        #[arg(long)]
        key: Option<PathBuf>,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Generate plain or watermarked images.
    Generate {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        selector: Option<PathBuf>,
        #[arg(long)]
        key: PathBuf,
        #[arg(long, default_value_t = 16)]
        count: usize,
        /// Emit watermarked images (mutually exclusive with --plain).
        #[arg(long, conflicts_with = "plain")]
        watermark: bool,
        /// Emit non-watermarked images.
        #[arg(long)]
        plain: bool,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Detect watermarks and write a CSV of per-image results.
    Detect {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        selector: Option<PathBuf>,
        #[arg(long)]
        key: PathBuf,
        /// Directory of PNGs to score.
        #[arg(long)]
        images: PathBuf,
        /// Fixed decision threshold.
        #[arg(long, conflicts_with = "calibrate_dir")]
        tau: Option<f64>,
        /// Calibrate the threshold on this benign directory first.
        #[arg(long)]
        calibrate_dir: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run one removal/forgery attack over a directory of images.
    Attack {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        key: PathBuf,
        /// Attack kind: imp-removal, imp-forgery, avg-removal, avg-forgery,
        /// vae-removal, vae-forgery.
        #[arg(long)]
        kind: String,
        #[arg(long)]
        inputs: PathBuf,
        /// Leaked watermarked reference (imp-forgery, vae-forgery).
        #[arg(long)]
        reference: Option<PathBuf>,
        /// Plain images for the averaging residual.
        #[arg(long)]
        pairs_plain: Option<PathBuf>,
        /// Watermarked images for the averaging residual.
        #[arg(long)]
        pairs_marked: Option<PathBuf>,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Apply an image distortion to a directory of images.
    Distort {
        #[command(flatten)]
        config: ConfigArg,
        /// rotation, noise, blur, crop, or jpeg.
        #[arg(long)]
        kind: String,
        /// Per-kind magnitude (degrees, sigma, support, area fraction,
        /// quality). Defaults to the published suite value.
        #[arg(long)]
        magnitude: Option<f64>,
        #[arg(long)]
        inputs: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Run the evaluation matrix, the ablation grid, or the step sweep.
    Evaluate {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        selector: PathBuf,
        #[arg(long)]
        key: PathBuf,
        /// Dynamic scheme + static baseline against all attacks and the
        /// distortion suite.
        #[arg(long, conflicts_with_all = ["ablation", "sweep"])]
        matrix: bool,
        /// The four ablation rows against all attacks.
        #[arg(long, conflicts_with = "sweep")]
        ablation: bool,
        /// Injection-step ranges against the imprint attacks.
        #[arg(long)]
        sweep: bool,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Render a markdown summary and charts from an evaluation CSV.
    Report {
        /// cells.csv emitted by `evaluate`.
        #[arg(long)]
        results: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
    },
}

fn main() -> ExitCode {
    if let Ok(workers) = std::env::var(ENV_WORKERS) {
        if let Ok(n) = workers.parse::<usize>() {
            let _ = rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build_global();
        }
    }
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error[{}]: {err}", err.code());
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<(), LabError> {
    match cli.command {
        Command::TrainSelector {
            config,
            corpus,
            generate,
            key,
            out_dir,
        } => {
            let cfg = config.load()?;
            let source = match corpus {
                Some(dir) => CorpusSource::Directory(dir),
                None => CorpusSource::Generated(generate),
            };
            let out = cmd_train_selector(&cfg, source, key.as_deref(), &out_dir)?;
            println!("selector: {}", out.selector_path.display());
            println!("key:      {}", out.key_path.display());
            println!("manifest: {}", out.manifest_path.display());
            print_histogram(&out.histogram);
            if out.empty_clusters > 0 {
                eprintln!(
                    "warning: {} of {} clusters are empty on the training corpus",
                    out.empty_clusters,
                    out.histogram.len()
                );
            }
            Ok(())
        }
        Command::Generate {
            config,
            selector,
            key,
            count,
            watermark,
            plain,
            out_dir,
        } => {
            let cfg = config.load()?;
            if watermark == plain {
                return Err(LabError::Argument(
                    "pass exactly one of --watermark or --plain".into(),
                ));
            }
            let manifest =
                cmd_generate(&cfg, selector.as_deref(), &key, count, watermark, &out_dir)?;
            println!("manifest: {}", manifest.display());
            Ok(())
        }
        Command::Detect {
            config,
            selector,
            key,
            images,
            tau,
            calibrate_dir,
            out,
        } => {
            let cfg = config.load()?;
            let rows = cmd_detect(
                &cfg,
                selector.as_deref(),
                &key,
                &images,
                tau,
                calibrate_dir.as_deref(),
                &out,
            )?;
            let detected = rows.iter().filter(|r| r.decision).count();
            println!(
                "scored {} images, {} detected as watermarked; csv: {}",
                rows.len(),
                detected,
                out.display()
            );
            Ok(())
        }
        Command::Attack {
            config,
            key,
            kind,
            inputs,
            reference,
            pairs_plain,
            pairs_marked,
            out_dir,
        } => {
            let cfg = config.load()?;
            let kind = AttackKind::parse(&kind)?;
            let pairs = match (&pairs_plain, &pairs_marked) {
                (Some(p), Some(m)) => Some((p.as_path(), m.as_path())),
                (None, None) => None,
                _ => {
                    return Err(LabError::Argument(
                        "--pairs-plain and --pairs-marked must be given together".into(),
                    ))
                }
            };
            let rows = cmd_attack(
                &cfg,
                &key,
                kind,
                &inputs,
                reference.as_deref(),
                pairs,
                &out_dir,
            )?;
            println!("attacked {} images into {}", rows.len(), out_dir.display());
            Ok(())
        }
        Command::Distort {
            config,
            kind,
            magnitude,
            inputs,
            out_dir,
            seed,
        } => {
            let cfg = config.load()?;
            let spec = distortion_spec(&kind, magnitude);
            let count = cmd_distort(&spec, cfg.backend.channels, &inputs, &out_dir, seed)?;
            println!("distorted {count} images into {}", out_dir.display());
            Ok(())
        }
        Command::Evaluate {
            config,
            selector,
            key,
            matrix,
            ablation,
            sweep,
            out_dir,
        } => {
            let cfg = config.load()?;
            let mode = match (matrix, ablation, sweep) {
                (_, false, false) => EvaluateMode::Matrix,
                (false, true, false) => EvaluateMode::Ablation,
                (false, false, true) => EvaluateMode::Sweep,
                _ => {
                    return Err(LabError::Argument(
                        "pass at most one of --matrix, --ablation, --sweep".into(),
                    ))
                }
            };
            let out = cmd_evaluate(&cfg, &selector, &key, mode, &out_dir)?;
            println!("cells: {}", out.cells_csv.display());
            if let Some(agg) = &out.aggregates_csv {
                println!("aggregates: {}", agg.display());
            }
            if let Some(sweep_csv) = &out.sweep_csv {
                println!("sweep: {}", sweep_csv.display());
            }
            println!("plot: {}", out.plot.display());
            Ok(())
        }
        Command::Report { results, out_dir } => {
            let md = cmd_report(&results, &out_dir)?;
            println!("report: {}", md.display());
            Ok(())
        }
    }
}

fn distortion_spec(kind: &str, magnitude: Option<f64>) -> DistortionSpec {
    match kind {
        "rotation" => DistortionSpec::rotation(magnitude.unwrap_or(75.0)),
        "noise" => DistortionSpec::noise(magnitude.unwrap_or(0.1)),
        "blur" => DistortionSpec::blur(magnitude.unwrap_or(8.0)),
        "crop" => DistortionSpec::crop(magnitude.unwrap_or(0.75)),
        "jpeg" => DistortionSpec::jpeg(magnitude.unwrap_or(25.0)),
        other => DistortionSpec {
            kind: DistortionKind::External(other.to_string()),
            magnitude: magnitude.unwrap_or(0.0),
            crop_side_fraction: false,
        },
    }
}

fn print_histogram(histogram: &[usize]) {
    let max = histogram.iter().copied().max().unwrap_or(0).max(1);
    println!("cluster sizes ({} clusters):", histogram.len());
    for (i, &count) in histogram.iter().enumerate() {
        let bar = "#".repeat(count * 40 / max);
        println!("  {i:4} | {count:4} {bar}");
    }
}
