//! Command-line front end. Exit codes: 0 success, 1 runtime failure, 2 usage error.

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Parser, Subcommand, ValueEnum};

use crate::config::{load_config, Config};
use crate::data::{write_ppm, TextVocab};
use crate::error::{Result, SeedError};
use crate::lm::{generate_caption, generate_image, DecodeMode};
use crate::pipeline::{self, EvalKind, Report, Workdir};
use crate::rng::Rng;
use crate::selftest::run_selftest;
use crate::vq::CodeSequence;

#[derive(Debug, Parser)]
#[command(name = "seed", version, about = "Discrete causal image tokenizer and multimodal LM on a synthetic shapes world")]
pub struct Cli {
    /// JSON config file (required for training and evaluation).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output path (image for detokenize/imagine, report for eval and run-all).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Split {
    Train,
    Heldout,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Mode {
    Greedy,
    Sample,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum EvalTarget {
    Retrieval,
    Consistency,
    Caption,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render the train and held-out splits into the work directory.
    GenData,
    /// Train the frozen ViT, text encoders and image decoder.
    PretrainBackbones,
    /// Stage I: contrastive training of the causal Q-Former.
    TrainQformer,
    /// Stage II: codebook, code decoder and reverse Q-Former.
    TrainVq,
    /// Pretrain the base LM, then train the multimodal adapters.
    TrainLm,
    /// Print the visual codes of one image.
    Tokenize {
        #[arg(long)]
        image_idx: usize,
        #[arg(long, value_enum, default_value = "heldout")]
        split: Split,
    },
    /// Render a code sequence to a PPM image.
    Detokenize {
        /// Space-separated code ids.
        #[arg(long)]
        codes: String,
    },
    /// Caption one image.
    Caption {
        #[arg(long)]
        image_idx: usize,
        #[arg(long, value_enum, default_value = "heldout")]
        split: Split,
    },
    /// Generate an image from a caption.
    Imagine {
        #[arg(long)]
        text: String,
        #[arg(long, value_enum, default_value = "greedy")]
        mode: Mode,
        #[arg(long, default_value_t = 1.0)]
        temp: f64,
    },
    /// Evaluate one protocol on the held-out split.
    Eval {
        #[arg(value_enum)]
        target: EvalTarget,
        #[arg(long, value_enum, default_value = "heldout")]
        split: Split,
    },
    /// Every stage and evaluation in order.
    RunAll,
    /// Fast property suite; needs no trained artifacts.
    Selftest,
}

fn load(cli: &Cli, required: bool) -> Result<Config> {
    let mut cfg = match &cli.config {
        Some(path) => {
            let (cfg, warnings) = load_config(path)?;
            for w in warnings {
                log::warn!("{w}");
            }
            cfg
        }
        None if required => return Err(SeedError::Config { op: "cli", msg: "--config <path> is required for this command".into() }),
        None => Config::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn print_report(report: &Report) {
    for (k, v) in report {
        println!("{k}\t{v:.6}");
    }
}

fn pick_sample(wd: &Workdir, split: Split, idx: usize) -> Result<crate::data::ImageSample> {
    let (train, heldout) = pipeline::load_data(wd)?;
    let pool = if split == Split::Train { train } else { heldout };
    let n = pool.len();
    pool.into_iter()
        .nth(idx)
        .ok_or_else(|| SeedError::InvalidInput { op: "cli", msg: format!("image index {idx} outside split of {n}") })
}

fn out_path(cli: &Cli, default: &str) -> PathBuf {
    cli.out.clone().unwrap_or_else(|| PathBuf::from(default))
}

fn run(cli: &Cli) -> Result<bool> {
    match &cli.command {
        Command::Selftest => {
            let checks = run_selftest(cli.seed.unwrap_or(0));
            for c in &checks {
                println!("{}\t{}\t{}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
            }
            return Ok(checks.iter().all(|c| c.passed));
        }
        Command::GenData => {
            let cfg = load(cli, false)?;
            pipeline::gen_data(&cfg, &Workdir::new(&cfg))?;
        }
        Command::PretrainBackbones => {
            let cfg = load(cli, true)?;
            print_report(&pipeline::stage_backbones(&cfg, &Workdir::new(&cfg))?);
        }
        Command::TrainQformer => {
            let cfg = load(cli, true)?;
            print_report(&pipeline::stage_qformer(&cfg, &Workdir::new(&cfg))?);
        }
        Command::TrainVq => {
            let cfg = load(cli, true)?;
            print_report(&pipeline::stage_vq(&cfg, &Workdir::new(&cfg))?);
        }
        Command::TrainLm => {
            let cfg = load(cli, true)?;
            print_report(&pipeline::stage_lm(&cfg, &Workdir::new(&cfg))?);
        }
        Command::Tokenize { image_idx, split } => {
            let cfg = load(cli, false)?;
            let wd = Workdir::new(&cfg);
            let tok = pipeline::load_tokenizer(&cfg, &wd)?;
            let sample = pick_sample(&wd, *split, *image_idx)?;
            println!("{}", tok.view().tokenize(&[&sample.image])?[0].to_text());
        }
        Command::Detokenize { codes } => {
            let cfg = load(cli, false)?;
            let tok = pipeline::load_tokenizer(&cfg, &Workdir::new(&cfg))?;
            let seq = CodeSequence::parse(codes)?;
            let image = tok.view().detokenize(&[seq])?.remove(0);
            let path = out_path(cli, "detokenized.ppm");
            write_ppm(&path, &image)?;
            println!("{}", path.display());
        }
        Command::Caption { image_idx, split } => {
            let cfg = load(cli, false)?;
            let wd = Workdir::new(&cfg);
            let text = TextVocab::new();
            let tok = pipeline::load_tokenizer(&cfg, &wd)?;
            let mm = pipeline::load_multimodal(&cfg, &wd, &text)?;
            let sample = pick_sample(&wd, *split, *image_idx)?;
            println!("{}", generate_caption(&mm, &tok.view(), &text, &sample.image)?);
        }
        Command::Imagine { text: caption, mode, temp } => {
            let cfg = load(cli, false)?;
            let wd = Workdir::new(&cfg);
            let text = TextVocab::new();
            let tok = pipeline::load_tokenizer(&cfg, &wd)?;
            let mm = pipeline::load_multimodal(&cfg, &wd, &text)?;
            let mode = match mode {
                Mode::Greedy => DecodeMode::Greedy,
                Mode::Sample => DecodeMode::Sample { temperature: *temp },
            };
            let mut rng = Rng::for_stage(cfg.seed, "imagine");
            let (codes, image) = generate_image(&mm, &tok.view(), &text, &text.encode(caption), mode, &mut rng)?;
            let path = out_path(cli, "imagined.ppm");
            write_ppm(&path, &image)?;
            println!("{}\t{}", codes.to_text(), path.display());
        }
        Command::Eval { target, split } => {
            if *split != Split::Heldout {
                return Err(SeedError::InvalidInput { op: "eval", msg: "only the held-out split is evaluated".into() });
            }
            let cfg = load(cli, true)?;
            let wd = Workdir::new(&cfg);
            let kind = match target {
                EvalTarget::Retrieval => EvalKind::Retrieval,
                EvalTarget::Consistency => EvalKind::Consistency,
                EvalTarget::Caption => EvalKind::Caption,
            };
            let report = pipeline::evaluate(&cfg, &wd, kind)?;
            if let Some(out) = &cli.out {
                pipeline::merge_report(out, &report)?;
            }
            print_report(&report);
        }
        Command::RunAll => {
            let cfg = load(cli, true)?;
            let report = pipeline::run_all(&cfg)?;
            if let Some(out) = &cli.out {
                pipeline::write_report(out, &report)?;
            }
            print_report(&report);
        }
    }
    Ok(true)
}

/// Parses `args` and runs the command, returning the process exit code.
pub fn dispatch<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match run(&cli) {
        Ok(true) => 0,
        Ok(false) => 1,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}
