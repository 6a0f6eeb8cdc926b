//! The training loop: batches through the corpus, steps AdamW under the
//! warmup+cosine schedule, applies the configured rescale strategy on its
//! token clock, and streams telemetry CSVs into the run directory.
//!
//! Determinism contract: with a fixed config and seed, `std.csv`, `run.csv`
//! and `activations.csv` are byte-identical across runs (and across
//! pause/resume splits); only `throughput.csv` carries wall-clock values.

use std::fs;
use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use varlab_core::data::{batches, byte_encode, decode_tok, pack, Pair, TOK_MAGIC};
use varlab_core::init::apply_init;
use varlab_core::model::{backward, Model};
use varlab_core::optim::{adamw_step, clip_global_norm, OptimState};
use varlab_core::telemetry::{
    probe_max_activations, record_param_stats, ActivationRecord, CsvRecord, Phase, RunLogRecord,
    StdRecord, PROBE_PROMPT,
};
use varlab_core::{Error, Prng, Result};

use crate::checkpoint::{Checkpoint, ResumeClocks};
use crate::config::RunConfig;

/// Flags threaded in from the CLI.
#[derive(Debug, Clone, Default)]
pub struct TrainOptions {
    /// Continue from this checkpoint instead of initialising fresh.
    pub resume: Option<PathBuf>,
    /// Pause (checkpoint and exit) once the token clock reaches this value;
    /// the run is resumed later with `resume`.
    pub stop_after_tokens: Option<u64>,
}

/// What a (possibly paused) run produced.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub final_loss: f64,
    pub steps: u64,
    pub tokens_seen: u64,
    pub out_dir: PathBuf,
    /// True when the run stopped at `stop_after_tokens` instead of the
    /// configured budget.
    pub paused: bool,
    pub checkpoint: PathBuf,
}

/// One deterministic CSV output file.
struct CsvSink {
    file: File,
    path: PathBuf,
}

impl CsvSink {
    fn create(path: PathBuf, header: &str) -> Result<CsvSink> {
        let mut file = File::create(&path)
            .map_err(|e| Error::invalid(format_args!("{}: {e}", path.display())))?;
        file.write_all(header.as_bytes())
            .and_then(|_| file.write_all(b"\n"))
            .map_err(|e| Error::invalid(format_args!("{}: {e}", path.display())))?;
        Ok(CsvSink { file, path })
    }

    fn append(path: PathBuf) -> Result<CsvSink> {
        if !path.is_file() {
            return Err(Error::invalid(format_args!(
                "{}: resume expects the telemetry file to exist",
                path.display()
            )));
        }
        let file = OpenOptions::new()
            .append(true)
            .open(&path)
            .map_err(|e| Error::invalid(format_args!("{}: {e}", path.display())))?;
        Ok(CsvSink { file, path })
    }

    fn row<R: CsvRecord>(&mut self, record: &R) -> Result<()> {
        let mut line = String::new();
        record.write_row(&mut line);
        line.push('\n');
        self.file
            .write_all(line.as_bytes())
            .map_err(|e| Error::invalid(format_args!("{}: {e}", self.path.display())))
    }

    fn raw_line(&mut self, line: &str) -> Result<()> {
        self.file
            .write_all(line.as_bytes())
            .and_then(|_| self.file.write_all(b"\n"))
            .map_err(|e| Error::invalid(format_args!("{}: {e}", self.path.display())))
    }
}

/// Loads the corpus file, auto-detecting pretokenized streams by magic.
fn load_pairs(config: &RunConfig) -> Result<Vec<Pair>> {
    let path = &config.data.corpus;
    let bytes =
        fs::read(path).map_err(|e| Error::invalid(format_args!("{}: {e}", path.display())))?;
    let stream = if bytes.starts_with(TOK_MAGIC) {
        decode_tok(&bytes)?
    } else {
        byte_encode(&bytes)
    };
    if stream.vocab_size() > config.model.vocab_size {
        return Err(Error::invalid(format_args!(
            "corpus vocab {} exceeds model vocab_size {}",
            stream.vocab_size(),
            config.model.vocab_size
        )));
    }
    let pairs = pack(&stream, config.model.ctx_len)?;
    if pairs.len() < config.train.batch_size {
        return Err(Error::invalid(format_args!(
            "corpus yields {} sequences, fewer than one batch of {}",
            pairs.len(),
            config.train.batch_size
        )));
    }
    Ok(pairs)
}

struct Sinks {
    std: CsvSink,
    run: CsvSink,
    activations: CsvSink,
    throughput: CsvSink,
}

impl Sinks {
    fn create(dir: &Path) -> Result<Sinks> {
        Ok(Sinks {
            std: CsvSink::create(dir.join("std.csv"), StdRecord::header())?,
            run: CsvSink::create(dir.join("run.csv"), RunLogRecord::header())?,
            activations: CsvSink::create(
                dir.join("activations.csv"),
                ActivationRecord::header(),
            )?,
            throughput: CsvSink::create(
                dir.join("throughput.csv"),
                "tokens_seen,step,tokens_per_second",
            )?,
        })
    }

    fn append(dir: &Path) -> Result<Sinks> {
        Ok(Sinks {
            std: CsvSink::append(dir.join("std.csv"))?,
            run: CsvSink::append(dir.join("run.csv"))?,
            activations: CsvSink::append(dir.join("activations.csv"))?,
            throughput: CsvSink::append(dir.join("throughput.csv"))?,
        })
    }

    fn std_block(&mut self, model: &Model<f32>, tokens: u64, phase: Phase) -> Result<()> {
        for record in record_param_stats(model, tokens, phase)? {
            self.std.row(&record)?;
        }
        Ok(())
    }
}

/// Runs (or resumes) one training run to its token budget.
pub fn run_train(config: &RunConfig, options: &TrainOptions) -> Result<TrainOutcome> {
    config.validate()?;
    let out_dir = config.train.out_dir.clone();
    let schedule = config.schedule();
    let pairs = load_pairs(config)?;
    let batch_size = config.train.batch_size;
    let ctx = config.model.ctx_len;
    let step_tokens = (batch_size * ctx) as u64;

    // Fresh init or checkpoint restore.
    let mut model: Model<f32>;
    let mut optim: OptimState<f32>;
    let train_rng: Prng;
    let mut tokens_seen: u64;
    let mut clocks: ResumeClocks;
    let mut sinks: Sinks;
    if let Some(ckpt_path) = &options.resume {
        let ckpt = Checkpoint::load(ckpt_path)?;
        if ckpt.config != *config {
            return Err(Error::invalid(
                "checkpoint config differs from the requested config; resume with the \
                 checkpoint's own config",
            ));
        }
        if ckpt.tokens_seen >= config.train.total_tokens {
            return Err(Error::invalid(format_args!(
                "checkpoint is already at its token budget ({} of {})",
                ckpt.tokens_seen, config.train.total_tokens
            )));
        }
        model = ckpt.model;
        optim = ckpt
            .optim
            .ok_or_else(|| Error::invalid("checkpoint has no optimizer state; cannot resume"))?;
        train_rng = Prng::from_state(ckpt.prng_state);
        tokens_seen = ckpt.tokens_seen;
        clocks = ckpt.clocks;
        sinks = Sinks::append(&out_dir)?;
    } else {
        fs::create_dir_all(&out_dir)
            .map_err(|e| Error::invalid(format_args!("{}: {e}", out_dir.display())))?;
        fs::write(out_dir.join("config.txt"), config.to_text())
            .map_err(|e| Error::invalid(format_args!("config echo: {e}")))?;
        model = Model::new(config.model.clone())?;
        let mut init_rng = Prng::substream(config.train.seed, u64::from_le_bytes(*b"initpass"));
        apply_init(&mut model, &config.init, &mut init_rng)?;
        optim = OptimState::new(&model, config.optim.clone());
        train_rng = Prng::substream(config.train.seed, u64::from_le_bytes(*b"trainrng"));
        tokens_seen = 0;
        clocks = ResumeClocks::default();
        sinks = Sinks::create(&out_dir)?;
        // Init-time stds are the t=0 row block of the std telemetry.
        sinks.std_block(&model, 0, Phase::Scheduled)?;
    }

    let total = config.train.total_tokens;
    let save_checkpoint = |name: &str,
                           model: &Model<f32>,
                           optim: &OptimState<f32>,
                           rng: &Prng,
                           tokens: u64,
                           clocks: ResumeClocks|
     -> Result<PathBuf> {
        let path = out_dir.join(name);
        Checkpoint {
            config: config.clone(),
            tokens_seen: tokens,
            model: model.clone(),
            optim: Some(optim.clone()),
            prng_state: rng.state(),
            clocks,
        }
        .save(&path)?;
        Ok(path)
    };

    // The loop always runs at least one step (validate() guarantees the
    // budget covers one batch; resume past the budget is rejected above),
    // but the compiler can't see that, hence the lint allowance.
    #[allow(unused_assignments)]
    let mut final_loss = None;
    let mut last_ckpt_tokens = tokens_seen;
    let mut window_start = Instant::now();
    let mut window_tokens = 0u64;
    let mut paused = false;

    'outer: loop {
        let epoch_seed = config.train.seed.wrapping_add(clocks.epoch);
        let mut epoch_batches = batches(&pairs, batch_size, epoch_seed)?;
        epoch_batches.skip_to(clocks.batch_cursor as usize);
        while let Some(batch) = epoch_batches.next() {
            let tokens_after = tokens_seen + step_tokens;
            let lr = schedule.lr_at(tokens_after);

            let step_result = (|| -> Result<f64> {
                let (loss, mut grads) =
                    backward(&model, &batch.inputs, &batch.targets, batch_size, ctx)?;
                if let Some(max_norm) = config.clip_norm {
                    clip_global_norm(&model, &mut grads, max_norm)?;
                }
                adamw_step(&mut model, &grads, &mut optim, lr)?;
                Ok(loss)
            })();
            let loss = match step_result {
                Ok(loss) => loss,
                Err(err) => {
                    // Emergency telemetry dump so the failure is inspectable,
                    // then surface the original error.
                    let _ = sinks.std_block(&model, tokens_seen, Phase::Scheduled);
                    return Err(err);
                }
            };
            final_loss = Some(loss);
            tokens_seen = tokens_after;
            clocks.step += 1;
            clocks.batch_cursor += 1;
            window_tokens += step_tokens;

            // Rescale on its token clock, bracketed by std captures.
            let mut rescaled = false;
            if config.rescale.due(tokens_seen, clocks.last_rescale_applied) {
                sinks.std_block(&model, tokens_seen, Phase::PreRescale)?;
                let outcome = varlab_core::rescale::rescale_tick(
                    &mut model,
                    &config.rescale,
                    tokens_seen,
                    clocks.last_rescale_applied,
                )?;
                clocks.last_rescale_applied = outcome.new_last_applied;
                sinks.std_block(&model, tokens_seen, Phase::PostRescale)?;
                rescaled = true;
            }

            // Logging tick.
            if tokens_seen - clocks.last_log_tokens >= config.train.log_interval_tokens {
                let elapsed = window_start.elapsed().as_secs_f64().max(1e-9);
                let record = RunLogRecord {
                    tokens_seen,
                    step: clocks.step,
                    loss,
                    lr,
                    tokens_per_second: window_tokens as f64 / elapsed,
                };
                sinks.run.row(&record)?;
                sinks.throughput.raw_line(&format!(
                    "{},{},{}",
                    record.tokens_seen, record.step, record.tokens_per_second
                ))?;
                if !rescaled {
                    sinks.std_block(&model, tokens_seen, Phase::Scheduled)?;
                }
                clocks.last_log_tokens = tokens_seen;
                window_start = Instant::now();
                window_tokens = 0;
            }

            // Periodic checkpoints.
            let interval = config.train.checkpoint_interval_tokens;
            if interval > 0 && tokens_seen - last_ckpt_tokens >= interval && tokens_seen < total
            {
                save_checkpoint(
                    &format!("ckpt_{tokens_seen}.ckpt"),
                    &model,
                    &optim,
                    &train_rng,
                    tokens_seen,
                    clocks,
                )?;
                last_ckpt_tokens = tokens_seen;
            }

            if tokens_seen >= total {
                break 'outer;
            }
            if options.stop_after_tokens.is_some_and(|s| tokens_seen >= s) {
                paused = true;
                break 'outer;
            }
        }
        clocks.epoch += 1;
        clocks.batch_cursor = 0;
    }

    let checkpoint = if paused {
        save_checkpoint("pause.ckpt", &model, &optim, &train_rng, tokens_seen, clocks)?
    } else {
        // Completed runs end with the fixed-prompt activation probe and the
        // final checkpoint.
        let prompt: Vec<u32> = PROBE_PROMPT.bytes().map(u32::from).collect();
        if prompt.iter().all(|&id| (id as usize) < config.model.vocab_size) {
            for record in probe_max_activations(&model, &prompt, "default")? {
                sinks.activations.row(&record)?;
            }
        }
        save_checkpoint("final.ckpt", &model, &optim, &train_rng, tokens_seen, clocks)?
    };

    Ok(TrainOutcome {
        final_loss: final_loss.unwrap_or(f64::NAN),
        steps: clocks.step,
        tokens_seen,
        out_dir,
        paused,
        checkpoint,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus;

    /// A deliberately tiny run: 2-layer d=32 model, short context, small
    /// budget — fast enough for unit tests while exercising every branch.
    fn tiny_config(dir: &Path, seed: u64) -> RunConfig {
        let mut cfg = RunConfig::default();
        cfg.model.d_model = 32;
        cfg.model.n_layers = 2;
        cfg.model.n_heads = 2;
        cfg.model.d_ff = 48;
        cfg.model.ctx_len = 32;
        cfg.train.batch_size = 8;
        cfg.train.total_tokens = 16_384;
        cfg.train.log_interval_tokens = 2_048;
        cfg.warmup_tokens = 1_024;
        cfg.train.seed = seed;
        cfg.data.corpus = dir.join("corpus.txt");
        cfg.train.out_dir = dir.join("out");
        cfg
    }

    fn with_corpus(dir: &Path, cfg: &RunConfig) {
        fs::write(&cfg.data.corpus, corpus::generate(11, 120_000)).unwrap();
    }

    #[test]
    fn trains_and_emits_all_artifacts() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_config(dir.path(), 1);
        with_corpus(dir.path(), &cfg);
        let outcome = run_train(&cfg, &TrainOptions::default()).unwrap();
        assert!(!outcome.paused);
        assert_eq!(outcome.tokens_seen, 16_384);
        assert!(outcome.final_loss.is_finite());
        for name in ["std.csv", "run.csv", "activations.csv", "throughput.csv", "config.txt"] {
            assert!(cfg.train.out_dir.join(name).is_file(), "{name} missing");
        }
        assert!(outcome.checkpoint.ends_with("final.ckpt"));
        let activations = fs::read_to_string(cfg.train.out_dir.join("activations.csv")).unwrap();
        assert_eq!(activations.lines().count(), 1 + cfg.model.n_layers);
        let echoed = fs::read_to_string(cfg.train.out_dir.join("config.txt")).unwrap();
        assert_eq!(RunConfig::from_text(&echoed).unwrap(), cfg);
        // Loss should comfortably beat the uniform-byte baseline even in a
        // short smoke run.
        assert!(outcome.final_loss < (256f64).ln(), "loss {}", outcome.final_loss);
    }

    #[test]
    fn same_seed_runs_are_byte_identical() {
        let dir_a = tempfile::tempdir().unwrap();
        let dir_b = tempfile::tempdir().unwrap();
        let cfg_a = tiny_config(dir_a.path(), 9);
        let cfg_b = tiny_config(dir_b.path(), 9);
        with_corpus(dir_a.path(), &cfg_a);
        with_corpus(dir_b.path(), &cfg_b);
        run_train(&cfg_a, &TrainOptions::default()).unwrap();
        run_train(&cfg_b, &TrainOptions::default()).unwrap();
        for name in ["std.csv", "run.csv", "activations.csv"] {
            let a = fs::read(cfg_a.train.out_dir.join(name)).unwrap();
            let b = fs::read(cfg_b.train.out_dir.join(name)).unwrap();
            assert_eq!(a, b, "{name} differs between identical runs");
        }
    }

    #[test]
    fn pause_and_resume_matches_unpaused_run() {
        let dir_full = tempfile::tempdir().unwrap();
        let dir_split = tempfile::tempdir().unwrap();
        let cfg_full = tiny_config(dir_full.path(), 33);
        let cfg_split = tiny_config(dir_split.path(), 33);
        with_corpus(dir_full.path(), &cfg_full);
        with_corpus(dir_split.path(), &cfg_split);

        run_train(&cfg_full, &TrainOptions::default()).unwrap();
        let paused = run_train(
            &cfg_split,
            &TrainOptions { stop_after_tokens: Some(8_000), ..Default::default() },
        )
        .unwrap();
        assert!(paused.paused);
        assert!(paused.tokens_seen < 16_384);
        let resumed = run_train(
            &cfg_split,
            &TrainOptions { resume: Some(paused.checkpoint.clone()), ..Default::default() },
        )
        .unwrap();
        assert!(!resumed.paused);
        assert_eq!(resumed.tokens_seen, 16_384);

        for name in ["std.csv", "run.csv", "activations.csv"] {
            let a = fs::read(cfg_full.train.out_dir.join(name)).unwrap();
            let b = fs::read(cfg_split.train.out_dir.join(name)).unwrap();
            assert_eq!(a, b, "{name} differs after pause/resume");
        }
    }

    #[test]
    fn rescale_phases_appear_in_std_csv() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = tiny_config(dir.path(), 5);
        cfg.init.scheme = varlab_core::init::Scheme::Lir;
        cfg.init.sigma_base = 0.006;
        cfg.rescale.strategy = varlab_core::rescale::Strategy::Tvr;
        cfg.rescale.interval_tokens = 4_096;
        cfg.rescale.sigma_target_base = 0.01;
        with_corpus(dir.path(), &cfg);
        run_train(&cfg, &TrainOptions::default()).unwrap();
        let std_csv = fs::read_to_string(cfg.train.out_dir.join("std.csv")).unwrap();
        assert!(std_csv.contains(",pre_rescale"));
        assert!(std_csv.contains(",post_rescale"));
        assert!(std_csv.contains(",scheduled"));
        // Post-rescale TVR rows sit on the target for matrix roles.
        let on_target = std_csv
            .lines()
            .skip(1)
            .map(|l| StdRecord::parse_csv_row(l).unwrap())
            .filter(|r| r.phase == Phase::PostRescale && r.role.is_decoder_2d())
            .all(|r| (r.std - 0.01).abs() < 1e-6);
        assert!(on_target);
    }

    #[test]
    fn resume_rejects_mismatched_config() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_config(dir.path(), 2);
        with_corpus(dir.path(), &cfg);
        let paused = run_train(
            &cfg,
            &TrainOptions { stop_after_tokens: Some(4_096), ..Default::default() },
        )
        .unwrap();
        let mut other = cfg.clone();
        other.train.seed = 3;
        let err = run_train(
            &other,
            &TrainOptions { resume: Some(paused.checkpoint), ..Default::default() },
        )
        .unwrap_err();
        assert!(matches!(err, Error::InvalidArgument(_)));
    }

    #[test]
    fn corpus_too_small_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_config(dir.path(), 2);
        fs::write(&cfg.data.corpus, corpus::generate(0, 100)).unwrap();
        assert!(run_train(&cfg, &TrainOptions::default()).is_err());
    }
}
