use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use mdfr_core::degradation::{degrade, sample_spec_with, DegradationSpec};
use mdfr_core::evaluation::{format_db, psnr, ssim};
use mdfr_core::geometry::{encode_heatmaps, LandmarkSet};
use mdfr_core::image::FaceImage;
use mdfr_core::training::PhaseKind;

use crate::config::{config_base, validate_config, RunConfig};
use crate::error::{CliError, Result};
use crate::pipeline::{Run, FRN_S_FILE, FRN_TI_FILE};

#[derive(Debug, Parser)]
#[command(name = "mdfr", about = "Joint face restoration and frontalization on a synthetic face corpus")]
pub struct Cli {
    /// Run configuration (TOML); built-in defaults when omitted.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the configured run directory.
    #[arg(long, global = true, env = "MDFR_RUN_DIR")]
    pub run_dir: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write or check run configurations.
    #[command(subcommand)]
    Config(ConfigCmd),
    /// Build the synthetic corpus.
    #[command(subcommand)]
    Data(DataCmd),
    /// Run one training phase.
    Train(TrainArgs),
    /// Apply trained networks to an image.
    #[command(subcommand)]
    Infer(InferCmd),
    /// Degrade an image with a seeded random degradation.
    Degrade(DegradeArgs),
    /// Compare two images, or evaluate the run when no images are given.
    Eval(EvalArgs),
    /// Summarize an evaluated run as tables and a contact sheet.
    Report,
}

#[derive(Debug, Subcommand)]
pub enum ConfigCmd {
    /// Write the default configuration.
    Init { path: PathBuf },
    /// Validate a configuration file.
    Check { path: PathBuf },
}

#[derive(Debug, Subcommand)]
pub enum DataCmd {
    Build {
        /// Output directory; defaults to the configured corpus path.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(value_parser = parse_phase)]
    pub phase: PhaseKind,
    /// Overrides the configured step count.
    #[arg(long)]
    pub steps: Option<usize>,
}

fn parse_phase(s: &str) -> std::result::Result<PhaseKind, String> {
    s.parse().map_err(|e: mdfr_core::Error| e.to_string())
}

#[derive(Debug, Subcommand)]
pub enum InferCmd {
    /// Pose-preserving restoration with the separately trained network.
    Restore { input: PathBuf, output: PathBuf },
    /// Frontalization of a single low-quality image with the task-integrated network.
    Frontalize {
        input: PathBuf,
        output: PathBuf,
        /// Use the frontalization network with explicit landmarks instead.
        #[arg(long, requires_all = ["source_landmarks", "target_landmarks"])]
        with_landmarks: bool,
        /// JSON landmark set of the input face.
        #[arg(long)]
        source_landmarks: Option<PathBuf>,
        /// JSON landmark set of the wanted frontal face.
        #[arg(long)]
        target_landmarks: Option<PathBuf>,
    },
}

#[derive(Debug, Args)]
pub struct DegradeArgs {
    #[arg(long)]
    pub seed: u64,
    /// Use this key=value spec instead of sampling one.
    #[arg(long)]
    pub spec: Option<PathBuf>,
    /// Write the applied spec next to the output as `<output>.spec`.
    #[arg(long)]
    pub save_spec: bool,
    pub input: PathBuf,
    pub output: PathBuf,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum Metric {
    Psnr,
    Ssim,
    All,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long, value_enum, default_value_t = Metric::All)]
    pub metric: Metric,
    #[arg(requires = "b")]
    pub a: Option<PathBuf>,
    pub b: Option<PathBuf>,
}

/// Parses `argv` and runs the command; returns the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli) {
        Ok(out) => {
            print!("{out}");
            0
        }
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

fn load_run(cli: &Cli) -> Result<Run> {
    let (cfg, base) = match &cli.config {
        Some(p) => (validate_config(p)?, config_base(p)),
        None => (RunConfig::default(), PathBuf::from(".")),
    };
    Ok(Run::new(cfg, &base, cli.run_dir.clone()))
}

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io { path: path.to_path_buf(), source }
}

fn load_landmarks(path: &Path) -> Result<LandmarkSet> {
    let text = fs::read_to_string(path).map_err(io(path))?;
    let raw: LandmarkSet = serde_json::from_str(&text).map_err(mdfr_core::Error::from)?;
    Ok(LandmarkSet::new(raw.points().to_vec())?)
}

/// Runs a parsed command and returns its standard output.
pub fn execute(cli: Cli) -> Result<String> {
    match &cli.command {
        Command::Config(ConfigCmd::Init { path }) => {
            fs::write(path, RunConfig::default().to_toml()?).map_err(io(path))?;
            Ok(format!("wrote {}\n", path.display()))
        }
        Command::Config(ConfigCmd::Check { path }) => {
            validate_config(path)?;
            Ok(format!("{}: ok\n", path.display()))
        }
        Command::Data(DataCmd::Build { out }) => {
            let mut run = load_run(&cli)?;
            if let Some(o) = out {
                run.corpus_dir = o.clone();
            }
            let corpus = run.build_data()?;
            Ok(format!("built {} records in {}\n", corpus.len(), run.corpus_dir.display()))
        }
        Command::Train(args) => {
            let mut run = load_run(&cli)?;
            if let Some(s) = args.steps {
                run.config.phases.get_mut(args.phase).max_steps = s;
            }
            let log = run.train(args.phase)?;
            let last = log.last().map_or_else(|| "no steps run".to_string(), |r| r.line());
            Ok(format!("{}: {} steps\n{last}\n", args.phase, log.records.len()))
        }
        Command::Infer(InferCmd::Restore { input, output }) => {
            let run = load_run(&cli)?;
            let img = FaceImage::load_png(input)?;
            run.load_frn(FRN_S_FILE)?.restore(&img)?.save_png(output)?;
            Ok(format!("wrote {}\n", output.display()))
        }
        Command::Infer(InferCmd::Frontalize { input, output, with_landmarks, source_landmarks, target_landmarks }) => {
            let run = load_run(&cli)?;
            let img = FaceImage::load_png(input)?;
            let out = if *with_landmarks {
                let (src, tgt) = source_landmarks.as_ref().zip(target_landmarks.as_ref()).ok_or_else(|| {
                    CliError::Usage("--with-landmarks needs --source-landmarks and --target-landmarks".into())
                })?;
                let (h, w) = img.dims();
                let sigma = run.config.corpus.heatmap_sigma;
                let lp = encode_heatmaps(&load_landmarks(src)?, h, w, sigma)?;
                let lt = encode_heatmaps(&load_landmarks(tgt)?, h, w, sigma)?;
                run.load_ffn()?.frontalize(&img, &lp, &lt)?
            } else {
                run.load_frn(FRN_TI_FILE)?.restore(&img)?
            };
            out.save_png(output)?;
            Ok(format!("wrote {}\n", output.display()))
        }
        Command::Degrade(args) => {
            let spec = match &args.spec {
                Some(p) => DegradationSpec::from_kv(&fs::read_to_string(p).map_err(io(p))?)?,
                None => {
                    let overrides = match &cli.config {
                        Some(_) => load_run(&cli)?.config.corpus.degradation,
                        None => Default::default(),
                    };
                    sample_spec_with(args.seed, &overrides)
                }
            };
            let img = FaceImage::load_png(&args.input)?;
            degrade(&img, &spec)?.quantized().save_png(&args.output)?;
            if args.save_spec {
                let mut p = args.output.clone().into_os_string();
                p.push(".spec");
                let p = PathBuf::from(p);
                fs::write(&p, spec.to_kv()).map_err(io(&p))?;
            }
            Ok(format!("wrote {}\n", args.output.display()))
        }
        Command::Eval(args) => match (&args.a, &args.b) {
            (Some(a), Some(b)) => {
                let (x, y) = (FaceImage::load_png(a)?, FaceImage::load_png(b)?);
                Ok(match args.metric {
                    Metric::Psnr => format!("{}\n", format_db(psnr(&x, &y)?)),
                    Metric::Ssim => format!("{:.6}\n", ssim(&x, &y)?),
                    Metric::All => format!("psnr {}\nssim {:.6}\n", format_db(psnr(&x, &y)?), ssim(&x, &y)?),
                })
            }
            _ => {
                let run = load_run(&cli)?;
                let r = run.evaluate()?;
                Ok(format!("{}\n{}", crate::pipeline::recognition_text(&r), r.frontalized))
            }
        },
        Command::Report => load_run(&cli)?.report(),
    }
}
