//! Run configuration and its flat `key = value` text codec.
//!
//! The format is deliberately plain — one dotted key per line, `#` comments,
//! blank lines ignored — so archived run configs diff cleanly. Parsing
//! starts from the defaults and applies overrides; serialization always
//! emits every key in a fixed order, so the config echoed into a run
//! directory is complete and byte-stable.

use std::path::PathBuf;

use varlab_core::init::{InitSpec, Scheme};
use varlab_core::model::{Arch, ModelConfig, RoleSet};
use varlab_core::optim::{AdamHyper, DecayMode, LrSchedule};
use varlab_core::rescale::{RescaleSpec, Strategy};
use varlab_core::{Error, Result};

/// Where the training corpus comes from. `.tok` streams are detected by
/// magic at load time; anything else is treated as byte-level text.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DataConfig {
    pub corpus: PathBuf,
}

/// Loop-level knobs: token budget, batching, logging, seeding, output.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrainKnobs {
    pub batch_size: usize,
    pub total_tokens: u64,
    pub log_interval_tokens: u64,
    /// Periodic checkpoint spacing; 0 keeps only the final checkpoint.
    pub checkpoint_interval_tokens: u64,
    pub seed: u64,
    pub out_dir: PathBuf,
}

/// Everything one training run needs, serializable to a single text file.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub init: InitSpec,
    pub rescale: RescaleSpec,
    pub optim: AdamHyper,
    /// Global-norm gradient clip threshold; `None` disables clipping.
    pub clip_norm: Option<f64>,
    pub max_lr: f64,
    pub end_lr: f64,
    pub warmup_tokens: u64,
    pub data: DataConfig,
    pub train: TrainKnobs,
}

impl Default for RunConfig {
    /// The desk-scale baseline: 4-layer d=64 GLU decoder, byte vocab,
    /// gaussian σ=0.02 init, no rescaling, 2M-token budget.
    fn default() -> Self {
        RunConfig {
            model: ModelConfig {
                arch: Arch::GluLlama,
                d_model: 64,
                n_layers: 4,
                n_heads: 4,
                d_ff: 170,
                vocab_size: 256,
                ctx_len: 128,
                norm_eps: 1e-5,
                rope_theta: 10000.0,
            },
            init: InitSpec::default(),
            rescale: RescaleSpec::default(),
            optim: AdamHyper::default(),
            clip_norm: None,
            max_lr: 6e-4,
            end_lr: 6e-5,
            warmup_tokens: 20_000,
            data: DataConfig { corpus: PathBuf::from("corpus.txt") },
            train: TrainKnobs {
                batch_size: 32,
                total_tokens: 2_000_000,
                log_interval_tokens: 10_000,
                checkpoint_interval_tokens: 0,
                seed: 42,
                out_dir: PathBuf::from("runs/run"),
            },
        }
    }
}

impl RunConfig {
    /// The LR schedule implied by this config (total = the token budget).
    pub fn schedule(&self) -> LrSchedule {
        LrSchedule {
            warmup_tokens: self.warmup_tokens,
            total_tokens: self.train.total_tokens,
            max_lr: self.max_lr,
            end_lr: self.end_lr,
        }
    }

    /// Validates every section plus the cross-section constraints.
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.init.validate()?;
        self.rescale.validate()?;
        self.optim.validate()?;
        self.schedule().validate()?;
        if let Some(c) = self.clip_norm {
            if !(c > 0.0) || !c.is_finite() {
                return Err(Error::invalid("optim.clip_norm must be > 0 or none"));
            }
        }
        if self.train.batch_size == 0 {
            return Err(Error::invalid("train.batch_size must be >= 1"));
        }
        let step_tokens = self.train.batch_size as u64 * self.model.ctx_len as u64;
        if self.train.total_tokens < step_tokens {
            return Err(Error::invalid(format_args!(
                "train.total_tokens {} is below one step ({step_tokens} tokens)",
                self.train.total_tokens
            )));
        }
        if self.train.log_interval_tokens == 0 {
            return Err(Error::invalid("train.log_interval_tokens must be >= 1"));
        }
        if self.data.corpus.as_os_str().is_empty() {
            return Err(Error::invalid("data.corpus must name a file"));
        }
        Ok(())
    }

    /// Canonical serialization: every key, fixed order, round-trippable
    /// float formatting.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let kv = |s: &mut String, k: &str, v: &str| {
            s.push_str(k);
            s.push_str(" = ");
            s.push_str(v);
            s.push('\n');
        };
        kv(&mut s, "model.arch", self.model.arch.as_str());
        kv(&mut s, "model.d_model", &self.model.d_model.to_string());
        kv(&mut s, "model.n_layers", &self.model.n_layers.to_string());
        kv(&mut s, "model.n_heads", &self.model.n_heads.to_string());
        kv(&mut s, "model.d_ff", &self.model.d_ff.to_string());
        kv(&mut s, "model.vocab_size", &self.model.vocab_size.to_string());
        kv(&mut s, "model.ctx_len", &self.model.ctx_len.to_string());
        kv(&mut s, "model.norm_eps", &self.model.norm_eps.to_string());
        kv(&mut s, "model.rope_theta", &self.model.rope_theta.to_string());
        kv(&mut s, "init.scheme", self.init.scheme.as_str());
        kv(&mut s, "init.sigma_base", &self.init.sigma_base.to_string());
        kv(&mut s, "init.alpha", &self.init.alpha.to_string());
        kv(&mut s, "init.embed_sigma", &self.init.embed_sigma.to_string());
        kv(&mut s, "init.target_roles", &roles_to_text(self.init.target_roles));
        kv(&mut s, "rescale.strategy", self.rescale.strategy.as_str());
        kv(&mut s, "rescale.interval_tokens", &self.rescale.interval_tokens.to_string());
        kv(&mut s, "rescale.sigma_target_base", &self.rescale.sigma_target_base.to_string());
        kv(&mut s, "rescale.depth_scaled", bool_text(self.rescale.depth_scaled));
        kv(&mut s, "rescale.target_roles", &roles_to_text(self.rescale.target_roles));
        kv(&mut s, "optim.beta1", &self.optim.beta1.to_string());
        kv(&mut s, "optim.beta2", &self.optim.beta2.to_string());
        kv(&mut s, "optim.eps", &self.optim.eps.to_string());
        kv(&mut s, "optim.weight_decay", &self.optim.weight_decay.to_string());
        kv(&mut s, "optim.decay_mode", self.optim.mode.as_str());
        kv(&mut s, "optim.decay_roles", &roles_to_text(self.optim.decay_roles));
        let clip = match self.clip_norm {
            Some(c) => c.to_string(),
            None => String::from("none"),
        };
        kv(&mut s, "optim.clip_norm", &clip);
        kv(&mut s, "schedule.max_lr", &self.max_lr.to_string());
        kv(&mut s, "schedule.end_lr", &self.end_lr.to_string());
        kv(&mut s, "schedule.warmup_tokens", &self.warmup_tokens.to_string());
        kv(&mut s, "data.corpus", &self.data.corpus.display().to_string());
        kv(&mut s, "train.batch_size", &self.train.batch_size.to_string());
        kv(&mut s, "train.total_tokens", &self.train.total_tokens.to_string());
        kv(&mut s, "train.log_interval_tokens", &self.train.log_interval_tokens.to_string());
        kv(
            &mut s,
            "train.checkpoint_interval_tokens",
            &self.train.checkpoint_interval_tokens.to_string(),
        );
        kv(&mut s, "train.seed", &self.train.seed.to_string());
        kv(&mut s, "train.out_dir", &self.train.out_dir.display().to_string());
        s
    }

    /// Parses the flat text format. Unknown or duplicated keys are errors;
    /// keys left out keep their defaults.
    pub fn from_text(text: &str) -> Result<RunConfig> {
        let mut cfg = RunConfig::default();
        let mut seen: Vec<String> = Vec::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::invalid(format_args!("config line {}: expected key = value", lineno + 1))
            })?;
            let key = key.trim();
            let value = value.trim();
            if seen.iter().any(|k| k == key) {
                return Err(Error::invalid(format_args!(
                    "config line {}: duplicate key {key}",
                    lineno + 1
                )));
            }
            seen.push(key.to_string());
            cfg.apply(key, value).map_err(|e| {
                Error::invalid(format_args!("config line {}: {e}", lineno + 1))
            })?;
        }
        Ok(cfg)
    }

    fn apply(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "model.arch" => self.model.arch = Arch::parse(value)?,
            "model.d_model" => self.model.d_model = parse_usize(key, value)?,
            "model.n_layers" => self.model.n_layers = parse_usize(key, value)?,
            "model.n_heads" => self.model.n_heads = parse_usize(key, value)?,
            "model.d_ff" => self.model.d_ff = parse_usize(key, value)?,
            "model.vocab_size" => self.model.vocab_size = parse_usize(key, value)?,
            "model.ctx_len" => self.model.ctx_len = parse_usize(key, value)?,
            "model.norm_eps" => self.model.norm_eps = parse_f64(key, value)?,
            "model.rope_theta" => self.model.rope_theta = parse_f64(key, value)?,
            "init.scheme" => self.init.scheme = Scheme::parse(value)?,
            "init.sigma_base" => self.init.sigma_base = parse_f64(key, value)?,
            "init.alpha" => self.init.alpha = parse_f64(key, value)?,
            "init.embed_sigma" => self.init.embed_sigma = parse_f64(key, value)?,
            "init.target_roles" => self.init.target_roles = roles_from_text(value)?,
            "rescale.strategy" => self.rescale.strategy = Strategy::parse(value)?,
            "rescale.interval_tokens" => {
                self.rescale.interval_tokens = parse_u64(key, value)?
            }
            "rescale.sigma_target_base" => {
                self.rescale.sigma_target_base = parse_f64(key, value)?
            }
            "rescale.depth_scaled" => self.rescale.depth_scaled = parse_bool(key, value)?,
            "rescale.target_roles" => self.rescale.target_roles = roles_from_text(value)?,
            "optim.beta1" => self.optim.beta1 = parse_f64(key, value)?,
            "optim.beta2" => self.optim.beta2 = parse_f64(key, value)?,
            "optim.eps" => self.optim.eps = parse_f64(key, value)?,
            "optim.weight_decay" => self.optim.weight_decay = parse_f64(key, value)?,
            "optim.decay_mode" => self.optim.mode = DecayMode::parse(value)?,
            "optim.decay_roles" => self.optim.decay_roles = roles_from_text(value)?,
            "optim.clip_norm" => {
                self.clip_norm =
                    if value == "none" { None } else { Some(parse_f64(key, value)?) }
            }
            "schedule.max_lr" => self.max_lr = parse_f64(key, value)?,
            "schedule.end_lr" => self.end_lr = parse_f64(key, value)?,
            "schedule.warmup_tokens" => self.warmup_tokens = parse_u64(key, value)?,
            "data.corpus" => self.data.corpus = PathBuf::from(value),
            "train.batch_size" => self.train.batch_size = parse_usize(key, value)?,
            "train.total_tokens" => self.train.total_tokens = parse_u64(key, value)?,
            "train.log_interval_tokens" => {
                self.train.log_interval_tokens = parse_u64(key, value)?
            }
            "train.checkpoint_interval_tokens" => {
                self.train.checkpoint_interval_tokens = parse_u64(key, value)?
            }
            "train.seed" => self.train.seed = parse_u64(key, value)?,
            "train.out_dir" => self.train.out_dir = PathBuf::from(value),
            other => return Err(Error::invalid(format_args!("unknown key {other:?}"))),
        }
        Ok(())
    }
}

fn parse_usize(key: &str, value: &str) -> Result<usize> {
    value.parse().map_err(|_| Error::invalid(format_args!("{key}: bad integer {value:?}")))
}

fn parse_u64(key: &str, value: &str) -> Result<u64> {
    value.parse().map_err(|_| Error::invalid(format_args!("{key}: bad integer {value:?}")))
}

fn parse_f64(key: &str, value: &str) -> Result<f64> {
    value.parse().map_err(|_| Error::invalid(format_args!("{key}: bad number {value:?}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(Error::invalid(format_args!("{key}: expected true or false, got {value:?}"))),
    }
}

fn bool_text(b: bool) -> &'static str {
    if b {
        "true"
    } else {
        "false"
    }
}

/// Role sets serialize as the `decoder_2d` shorthand when they are exactly
/// that set, otherwise as a comma list.
fn roles_to_text(set: RoleSet) -> String {
    if set == RoleSet::decoder_2d() {
        String::from("decoder_2d")
    } else {
        set.to_string()
    }
}

fn roles_from_text(value: &str) -> Result<RoleSet> {
    if value == "decoder_2d" {
        Ok(RoleSet::decoder_2d())
    } else {
        RoleSet::parse(value)
    }
}
