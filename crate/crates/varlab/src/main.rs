//! `varlab` — variance-controlled transformer pre-training at desk scale.
//!
//! Exit codes: 0 success, 1 usage error, 2 invalid input, 3 numeric failure.

use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use varlab_core::gradcheck::{grad_check, GradCheckSettings};
use varlab_core::model::Arch;
use varlab_core::Error;

use varlab::checkpoint::Checkpoint;
use varlab::config::RunConfig;
use varlab::corpus;
use varlab::inspect::{probe_from_checkpoint, stats_from_checkpoints};
use varlab::presets;
use varlab::train::{run_train, TrainOptions};

const EXIT_USAGE: u8 = 1;
const EXIT_INVALID: u8 = 2;
const EXIT_NUMERIC: u8 = 3;

#[derive(Parser)]
#[command(
    name = "varlab",
    version,
    about = "Train small transformers with variance-controlling init and weight rescaling"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run (or resume) a training run from a config file.
    Train {
        /// Path to a `key = value` run config; optional when resuming.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Override `train.seed` from the config.
        #[arg(long)]
        seed: Option<u64>,
        /// Override `train.out_dir` from the config.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Resume from a pause/periodic checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Pause once the token clock reaches this value (checkpoint + exit).
        #[arg(long = "stop-after")]
        stop_after: Option<u64>,
    },
    /// Verify analytic gradients against central differences (float64).
    GradCheck {
        /// Sampled coordinates per parameter class.
        #[arg(long, default_value_t = 100)]
        coords: usize,
        /// Seed for the probe model, data, and coordinate sample.
        #[arg(long, default_value_t = 1234)]
        seed: u64,
        /// Test hook: perturb analytic gradients so the check must fail.
        #[arg(long, hide = true)]
        corrupt: bool,
    },
    /// Run the fixed-prompt activation probe on a checkpoint (CSV on stdout).
    Probe {
        #[arg(long)]
        ckpt: PathBuf,
        /// Custom prompt (byte-encoded); defaults to the standard sentence.
        #[arg(long)]
        prompt: Option<String>,
    },
    /// Per-parameter mean/std for one or more checkpoints (CSV on stdout).
    Stats {
        #[arg(required = true)]
        ckpts: Vec<PathBuf>,
    },
    /// Print or emit a named experiment preset's config file(s).
    Preset {
        name: String,
        /// Write one config file per variant into this directory.
        #[arg(long)]
        emit: Option<PathBuf>,
    },
    /// Generate a deterministic synthetic text corpus.
    GenCorpus {
        #[arg(long, default_value = "corpus.txt")]
        out: PathBuf,
        #[arg(long, default_value_t = 4_000_000)]
        bytes: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn error_exit(err: &Error) -> ExitCode {
    eprintln!("error: {err}");
    match err {
        Error::InvalidArgument(_) | Error::DegenerateInput(_) => ExitCode::from(EXIT_INVALID),
        Error::NumericFailure { .. } => ExitCode::from(EXIT_NUMERIC),
    }
}

fn usage_exit(msg: &str) -> ExitCode {
    eprintln!("error: {msg}");
    ExitCode::from(EXIT_USAGE)
}

fn cmd_train(
    config: Option<PathBuf>,
    seed: Option<u64>,
    out: Option<PathBuf>,
    resume: Option<PathBuf>,
    stop_after: Option<u64>,
) -> ExitCode {
    if resume.is_some() && (seed.is_some() || out.is_some()) {
        return usage_exit("--seed/--out cannot be combined with --resume; the checkpoint fixes them");
    }
    let mut run_config = match (&config, &resume) {
        (Some(path), _) => {
            let text = match fs::read_to_string(path) {
                Ok(t) => t,
                Err(e) => return error_exit(&Error::invalid(format_args!("{}: {e}", path.display()))),
            };
            match RunConfig::from_text(&text) {
                Ok(c) => c,
                Err(e) => return error_exit(&e),
            }
        }
        (None, Some(ckpt_path)) => match Checkpoint::load(ckpt_path) {
            Ok(ckpt) => ckpt.config,
            Err(e) => return error_exit(&e),
        },
        (None, None) => return usage_exit("train needs --config (or --resume)"),
    };
    if let Some(s) = seed {
        run_config.train.seed = s;
    }
    if let Some(dir) = out {
        run_config.train.out_dir = dir;
    }
    let options = TrainOptions { resume, stop_after_tokens: stop_after };
    match run_train(&run_config, &options) {
        Ok(outcome) => {
            let status = if outcome.paused { "paused" } else { "done" };
            println!(
                "{status}: {} tokens, {} steps, final loss {:.6}, checkpoint {}",
                outcome.tokens_seen,
                outcome.steps,
                outcome.final_loss,
                outcome.checkpoint.display()
            );
            ExitCode::SUCCESS
        }
        Err(e) => error_exit(&e),
    }
}

fn cmd_grad_check(coords: usize, seed: u64, corrupt: bool) -> ExitCode {
    let settings = GradCheckSettings { coords_per_class: coords, seed, ..Default::default() };
    let mut all_passed = true;
    for arch in [Arch::GluLlama, Arch::Gpt2NonGlu] {
        match grad_check(arch, &settings, corrupt) {
            Ok(report) => {
                print!("{report}");
                all_passed &= report.passed(settings.tolerance);
            }
            Err(e) => return error_exit(&e),
        }
    }
    if all_passed {
        println!("grad check passed (tolerance {:.1e})", settings.tolerance);
        ExitCode::SUCCESS
    } else {
        eprintln!("grad check FAILED (tolerance {:.1e})", settings.tolerance);
        ExitCode::from(EXIT_NUMERIC)
    }
}

fn cmd_preset(name: &str, emit: Option<PathBuf>) -> ExitCode {
    let variants = match presets::expand(name) {
        Ok(v) => v,
        // Unknown preset is a usage error: print the available names.
        Err(e) => return usage_exit(&e.to_string()),
    };
    match emit {
        Some(dir) => {
            if let Err(e) = fs::create_dir_all(&dir) {
                return error_exit(&Error::invalid(format_args!("{}: {e}", dir.display())));
            }
            for (variant, cfg) in &variants {
                let path = dir.join(format!("{variant}.txt"));
                if let Err(e) = fs::write(&path, cfg.to_text()) {
                    return error_exit(&Error::invalid(format_args!("{}: {e}", path.display())));
                }
                println!("{}", path.display());
            }
        }
        None => {
            for (variant, cfg) in &variants {
                println!("# variant: {variant}");
                print!("{}", cfg.to_text());
            }
        }
    }
    ExitCode::SUCCESS
}

fn cmd_gen_corpus(out: PathBuf, bytes: usize, seed: u64) -> ExitCode {
    let text = corpus::generate(seed, bytes);
    if let Err(e) = fs::write(&out, &text) {
        return error_exit(&Error::invalid(format_args!("{}: {e}", out.display())));
    }
    eprintln!("wrote {} bytes to {}", text.len(), out.display());
    ExitCode::SUCCESS
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Help/version are successes; everything else is a usage error.
            let is_help = matches!(
                e.kind(),
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion
            );
            let _ = e.print();
            return if is_help { ExitCode::SUCCESS } else { ExitCode::from(EXIT_USAGE) };
        }
    };
    match cli.command {
        Command::Train { config, seed, out, resume, stop_after } => {
            cmd_train(config, seed, out, resume, stop_after)
        }
        Command::GradCheck { coords, seed, corrupt } => cmd_grad_check(coords, seed, corrupt),
        Command::Probe { ckpt, prompt } => {
            match probe_from_checkpoint(&ckpt, prompt.as_deref()) {
                Ok(csv) => {
                    print!("{csv}");
                    ExitCode::SUCCESS
                }
                Err(e) => error_exit(&e),
            }
        }
        Command::Stats { ckpts } => match stats_from_checkpoints(&ckpts) {
            Ok(csv) => {
                print!("{csv}");
                ExitCode::SUCCESS
            }
            Err(e) => error_exit(&e),
        },
        Command::Preset { name, emit } => cmd_preset(&name, emit),
        Command::GenCorpus { out, bytes, seed } => cmd_gen_corpus(out, bytes, seed),
    }
}
