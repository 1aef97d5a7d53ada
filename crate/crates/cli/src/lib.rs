//! Command-line front end: training, sampling, evaluation, ablation grids,
//! gradient checks and report comparison.
//!
//! Exit codes: 0 on success, 1 on usage or configuration errors, 2 on
//! runtime failures such as divergence or unreadable checkpoints.

pub mod ablate;
pub mod compare;
pub mod config;

use std::ffi::OsString;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use rrlm::eval::run_eval;
use rrlm::gradcheck;
use rrlm::rng;
use rrlm::sampler::{generate_for_prompts, sample_prompts, write_samples, SampleConfig};
use rrlm::trainer::{MetricsWriter, Trainer};
use rrlm::{Error, Result};

use crate::ablate::{grid_csv, run_grid, GridFile};
use crate::compare::{compare_reports, load_report, REPORT_FILE};
use crate::config::RunConfig;

pub const METRICS_FILE: &str = "metrics.csv";
pub const CHECKPOINT_FILE: &str = "checkpoint.ckpt";
pub const CONFIG_FILE: &str = "config.json";

#[derive(Debug, Parser)]
#[command(name = "rrlm", version, about = "Train, sample and evaluate a text-conditioned multi-stream token model")]
pub struct Cli {
    /// Print the effective configuration as canonical JSON and exit.
    #[arg(long)]
    pub dump_config: bool,
    /// Configuration file read by --dump-config.
    #[arg(long, value_name = "FILE", requires = "dump_config")]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Option<Command>,
}

#[derive(Debug, clap::Args)]
pub struct SampleArgs {
    /// Checkpoint to load; its EMA weights are used.
    #[arg(long, value_name = "FILE")]
    pub ckpt: PathBuf,
    /// Number of prompts.
    #[arg(long)]
    pub n: usize,
    /// Guidance scale.
    #[arg(long)]
    pub gamma: Option<f64>,
    #[arg(long)]
    pub top_k: Option<usize>,
    /// Sampling temperature.
    #[arg(long)]
    pub temp: Option<f64>,
    /// Sampling seed; defaults to the run's seed.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model, writing metrics and checkpoints to --out.
    Train {
        #[arg(long, value_name = "FILE", conflicts_with = "resume")]
        config: Option<PathBuf>,
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
        /// Continue from a checkpoint, appending to the metrics file.
        #[arg(long, value_name = "FILE")]
        resume: Option<PathBuf>,
        /// Stop after this many steps even if the schedule is not finished.
        #[arg(long)]
        max_steps: Option<usize>,
    },
    /// Generate token grids for random prompts.
    Sample {
        #[command(flatten)]
        args: SampleArgs,
        /// Output directory for tokens.bin and manifest.json.
        #[arg(long, value_name = "DIR", default_value = "samples")]
        out: PathBuf,
    },
    /// Generate for random prompts and score the results.
    Eval {
        #[command(flatten)]
        args: SampleArgs,
        /// Report path; defaults to eval.json next to the checkpoint.
        #[arg(long, value_name = "FILE")]
        out: Option<PathBuf>,
    },
    /// Train and evaluate every cell of a grid, emitting one CSV.
    Ablate {
        #[arg(long, value_name = "FILE")]
        config: Option<PathBuf>,
        #[arg(long, value_name = "FILE")]
        grid: PathBuf,
        /// CSV path; printed to stdout when omitted.
        #[arg(long, value_name = "FILE")]
        out: Option<PathBuf>,
        /// Worker threads.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Finite-difference check of every primitive and the full toy model.
    GradCheck {
        /// Random draws per primitive.
        #[arg(long, default_value_t = 20)]
        seeds: u64,
    },
    /// Compare two evaluated runs side by side.
    Compare {
        /// Baseline run directory (or report file).
        run_a: PathBuf,
        /// Candidate run directory (or report file).
        run_b: PathBuf,
        #[arg(long, default_value = "w/o rr")]
        label_a: String,
        #[arg(long, default_value = "w/ rr")]
        label_b: String,
    },
}

pub fn exit_code(e: &Error) -> i32 {
    if e.is_config() {
        1
    } else {
        2
    }
}

/// Parses `args` and runs the command; returns the process exit code.
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
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        Some(p) => RunConfig::load(p),
        None => Ok(RunConfig::default()),
    }
}

fn execute(cli: Cli) -> Result<()> {
    if cli.dump_config {
        if cli.command.is_some() {
            return Err(Error::Config("--dump-config takes no subcommand".into()));
        }
        print!("{}", load_config(cli.config.as_deref())?.to_json());
        return Ok(());
    }
    let Some(command) = cli.command else {
        return Err(Error::Config("no subcommand given; see --help".into()));
    };
    match command {
        Command::Train { config, out, resume, max_steps } => train(config.as_deref(), &out, resume.as_deref(), max_steps),
        Command::Sample { args, out } => sample(&args, &out),
        Command::Eval { args, out } => eval(&args, out.as_deref()),
        Command::Ablate { config, grid, out, jobs } => ablate(config.as_deref(), &grid, out.as_deref(), jobs),
        Command::GradCheck { seeds } => grad_check(seeds),
        Command::Compare { run_a, run_b, label_a, label_b } => {
            let a = load_report(&run_a)?;
            let b = load_report(&run_b)?;
            print!("{}", compare_reports(&a, &b, &label_a, &label_b).render());
            Ok(())
        }
    }
}

fn train(config: Option<&Path>, out: &Path, resume: Option<&Path>, max_steps: Option<usize>) -> Result<()> {
    std::fs::create_dir_all(out)?;
    let metrics_path = out.join(METRICS_FILE);
    let (mut trainer, checkpoint_every, mut writer) = match resume {
        Some(ckpt) => {
            let trainer = Trainer::load_checkpoint(ckpt)?;
            let every = match std::fs::read_to_string(out.join(CONFIG_FILE)) {
                Ok(text) => RunConfig::from_json(&text)?.checkpoint_every,
                Err(_) => RunConfig::default().checkpoint_every,
            };
            let file = std::fs::OpenOptions::new().append(true).create(true).open(&metrics_path)?;
            (trainer, every, MetricsWriter::append(BufWriter::new(file)))
        }
        None => {
            let cfg = load_config(config)?;
            std::fs::write(out.join(CONFIG_FILE), cfg.to_json())?;
            let trainer = Trainer::new(cfg.grammar(), cfg.model(), cfg.train())?;
            let writer = MetricsWriter::new(BufWriter::new(File::create(&metrics_path)?))?;
            (trainer, cfg.checkpoint_every, writer)
        }
    };
    let ckpt = out.join(CHECKPOINT_FILE);
    let mut budget = max_steps.unwrap_or(usize::MAX);
    while !trainer.is_done() && budget > 0 {
        let m = trainer.step()?;
        writer.write(&m)?;
        if m.step % checkpoint_every == 0 {
            trainer.save_checkpoint(&ckpt)?;
        }
        budget -= 1;
    }
    writer.into_inner().flush()?;
    trainer.save_checkpoint(&ckpt)?;
    println!("step {}/{}; checkpoint {}", trainer.state().step, trainer.config().total_steps, ckpt.display());
    Ok(())
}

/// Flag values over the run's saved sampling settings (`config.json` next to
/// the checkpoint), falling back to the defaults when there is none.
fn sample_config(args: &SampleArgs, trainer: &Trainer) -> Result<SampleConfig> {
    let saved = args.ckpt.parent().map(|d| d.join(CONFIG_FILE)).filter(|p| p.is_file());
    let d = match saved {
        Some(p) => RunConfig::load(&p)?.sample(),
        None => SampleConfig { seed: trainer.config().seed, ..SampleConfig::default() },
    };
    let cfg = SampleConfig {
        top_k: args.top_k.unwrap_or(d.top_k),
        temperature: args.temp.unwrap_or(d.temperature),
        guidance_scale: args.gamma.unwrap_or(d.guidance_scale),
        seed: args.seed.unwrap_or(d.seed),
        chunk_size: d.chunk_size,
    };
    cfg.validate(trainer.grammar().spec().audio_vocab)?;
    if args.n == 0 {
        return Err(Error::Config("--n must be positive".into()));
    }
    Ok(cfg)
}

fn sample(args: &SampleArgs, out: &Path) -> Result<()> {
    let trainer = Trainer::load_checkpoint(&args.ckpt)?;
    let cfg = sample_config(args, &trainer)?;
    let prompts = sample_prompts(trainer.grammar(), cfg.seed, rng::LABEL_PROMPT, args.n);
    let grids = generate_for_prompts(trainer.model(), &trainer.state().ema, trainer.grammar(), &prompts, &cfg)?;
    write_samples(out, trainer.grammar(), &prompts, &grids, &cfg)?;
    println!("wrote {} samples to {}", grids.len(), out.display());
    Ok(())
}

fn eval(args: &SampleArgs, out: Option<&Path>) -> Result<()> {
    let trainer = Trainer::load_checkpoint(&args.ckpt)?;
    let cfg = sample_config(args, &trainer)?;
    let report = run_eval(trainer.model(), &trainer.state().ema, trainer.grammar(), args.n, &cfg)?;
    let path = match out {
        Some(p) => p.to_path_buf(),
        None => args.ckpt.parent().unwrap_or(Path::new(".")).join(REPORT_FILE),
    };
    let json = report.to_json()?;
    std::fs::write(&path, &json)?;
    print!("{json}");
    Ok(())
}

fn ablate(config: Option<&Path>, grid: &Path, out: Option<&Path>, jobs: usize) -> Result<()> {
    let base = load_config(config)?;
    let cells = GridFile::load(grid)?.expand(&base)?;
    let results = run_grid(&base, &cells, jobs)?;
    let csv = grid_csv(&results);
    match out {
        Some(p) => std::fs::write(p, &csv)?,
        None => print!("{csv}"),
    }
    Ok(())
}

fn grad_check(seeds: u64) -> Result<()> {
    let results = gradcheck::full_suite(seeds)?;
    let mut failed = 0;
    for r in &results {
        let verdict = if r.passed() { "PASS" } else { "FAIL" };
        println!("{verdict} {:<24} max_rel_error {:.3e} (tolerance {:.0e})", r.name, r.max_rel_error, r.tolerance);
        failed += usize::from(!r.passed());
    }
    if failed > 0 {
        return Err(Error::NonFiniteGradient(format!("{failed} gradient checks above tolerance")));
    }
    Ok(())
}
