//! Measurement records captured during training — per-parameter standard
//! deviations, a fixed-prompt max-activation probe, and the loss/lr run log —
//! plus deterministic CSV rendering for all of them.
//!
//! Wall-clock throughput lives in its own CSV so the deterministic files stay
//! byte-stable across identical runs.

use crate::error::{Error, Result};
use crate::model::{forward, Model, Role};
use crate::tensor::{moments, Element};
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt::Write as _;

/// Fixed English probe prompt; byte-encoded before feeding the model.
pub const PROBE_PROMPT: &str = "Summer is warm. Winter is cold.";

/// When a std record was captured relative to rescale activity.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    /// Ordinary logging tick, no rescale at this step.
    Scheduled,
    /// Captured just before a rescale application.
    PreRescale,
    /// Captured just after a rescale application.
    PostRescale,
}

impl Phase {
    /// Stable textual name.
    pub fn as_str(self) -> &'static str {
        match self {
            Phase::Scheduled => "scheduled",
            Phase::PreRescale => "pre_rescale",
            Phase::PostRescale => "post_rescale",
        }
    }

    /// Parses the textual name back.
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "scheduled" => Ok(Phase::Scheduled),
            "pre_rescale" => Ok(Phase::PreRescale),
            "post_rescale" => Ok(Phase::PostRescale),
            other => Err(Error::invalid(format_args!("unknown phase {other:?}"))),
        }
    }
}

/// Mean/std snapshot of one parameter tensor at one token count.
#[derive(Debug, Clone, PartialEq)]
pub struct StdRecord {
    pub tokens_seen: u64,
    pub path: String,
    pub layer: usize,
    pub role: Role,
    pub mean: f64,
    pub std: f64,
    pub phase: Phase,
}

/// Per-layer max |activation| on the residual stream for one prompt.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationRecord {
    pub layer: usize,
    pub max_abs: f64,
    pub prompt_id: String,
}

/// One training-loop logging tick. `tokens_per_second` is wall-clock and is
/// rendered into the separate throughput CSV only.
#[derive(Debug, Clone, PartialEq)]
pub struct RunLogRecord {
    pub tokens_seen: u64,
    pub step: u64,
    pub loss: f64,
    pub lr: f64,
    pub tokens_per_second: f64,
}

/// A record type that knows its CSV header and row layout.
///
/// Reals are printed with `Display`, which emits the shortest string that
/// parses back to the same bits. No field ever contains a comma, so no
/// quoting is needed.
pub trait CsvRecord {
    /// Comma-separated column names, no trailing newline.
    fn header() -> &'static str;
    /// Appends one data row (no newline) to `out`.
    fn write_row(&self, out: &mut String);
}

impl CsvRecord for StdRecord {
    fn header() -> &'static str {
        "tokens_seen,path,layer,role,mean,std,phase"
    }

    fn write_row(&self, out: &mut String) {
        let _ = write!(
            out,
            "{},{},{},{},{},{},{}",
            self.tokens_seen,
            self.path,
            self.layer,
            self.role.as_str(),
            self.mean,
            self.std,
            self.phase.as_str()
        );
    }
}

impl CsvRecord for ActivationRecord {
    fn header() -> &'static str {
        "layer,max_abs,prompt_id"
    }

    fn write_row(&self, out: &mut String) {
        let _ = write!(out, "{},{},{}", self.layer, self.max_abs, self.prompt_id);
    }
}

impl CsvRecord for RunLogRecord {
    fn header() -> &'static str {
        "tokens_seen,step,loss,lr"
    }

    fn write_row(&self, out: &mut String) {
        let _ = write!(out, "{},{},{},{}", self.tokens_seen, self.step, self.loss, self.lr);
    }
}

/// Renders header + one line per record, LF endings, trailing newline.
pub fn render_csv<R: CsvRecord>(records: &[R]) -> String {
    let mut out = String::new();
    out.push_str(R::header());
    out.push('\n');
    for r in records {
        r.write_row(&mut out);
        out.push('\n');
    }
    out
}

/// Renders the wall-clock companion file for a run log.
pub fn render_throughput_csv(records: &[RunLogRecord]) -> String {
    let mut out = String::from("tokens_seen,step,tokens_per_second\n");
    for r in records {
        let _ = writeln!(out, "{},{},{}", r.tokens_seen, r.step, r.tokens_per_second);
    }
    out
}

impl StdRecord {
    /// Parses one data row in the `StdRecord` column order.
    pub fn parse_csv_row(line: &str) -> Result<StdRecord> {
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 7 {
            return Err(Error::invalid(format_args!(
                "std record needs 7 fields, got {}: {line:?}",
                fields.len()
            )));
        }
        let int = |s: &str, what: &str| -> Result<u64> {
            s.parse::<u64>().map_err(|_| Error::invalid(format_args!("bad {what}: {s:?}")))
        };
        let real = |s: &str, what: &str| -> Result<f64> {
            s.parse::<f64>().map_err(|_| Error::invalid(format_args!("bad {what}: {s:?}")))
        };
        Ok(StdRecord {
            tokens_seen: int(fields[0], "tokens_seen")?,
            path: fields[1].to_string(),
            layer: int(fields[2], "layer")? as usize,
            role: Role::parse(fields[3])?,
            mean: real(fields[4], "mean")?,
            std: real(fields[5], "std")?,
            phase: Phase::parse(fields[6])?,
        })
    }
}

/// Captures mean/std for every parameter tensor — matrices, norms,
/// embedding, lm_head — without touching model bits.
pub fn record_param_stats<E: Element>(
    model: &Model<E>,
    tokens_seen: u64,
    phase: Phase,
) -> Result<Vec<StdRecord>> {
    let mut records = Vec::with_capacity(model.n_params());
    for i in 0..model.n_params() {
        let h = model.handle(i);
        let (mean, std) = moments(model.param(i))?;
        records.push(StdRecord {
            tokens_seen,
            path: h.path.clone(),
            layer: h.layer_index,
            role: h.role,
            mean,
            std,
            phase,
        });
    }
    Ok(records)
}

/// Runs the prompt through the model and records, per layer, the max
/// |value| over all positions and channels of that layer's residual stream.
pub fn probe_max_activations<E: Element>(
    model: &Model<E>,
    prompt_tokens: &[u32],
    prompt_id: &str,
) -> Result<Vec<ActivationRecord>> {
    if prompt_tokens.is_empty() {
        return Err(Error::invalid("probe prompt must be non-empty"));
    }
    if prompt_tokens.len() > model.config().ctx_len {
        return Err(Error::invalid(format_args!(
            "probe prompt length {} exceeds ctx_len {}",
            prompt_tokens.len(),
            model.config().ctx_len
        )));
    }
    let out = forward(model, prompt_tokens, 1, prompt_tokens.len())?;
    let mut records = Vec::with_capacity(out.residuals.len());
    for (idx, stream) in out.residuals.iter().enumerate() {
        let mut max_abs = 0.0f64;
        for &x in stream.data() {
            let v = x.to_f64();
            if !v.is_finite() {
                return Err(Error::numeric(format_args!("probe activations, layer {}", idx + 1)));
            }
            max_abs = max_abs.max(v.abs());
        }
        records.push(ActivationRecord {
            layer: idx + 1,
            max_abs,
            prompt_id: String::from(prompt_id),
        });
    }
    Ok(records)
}

/// Mean of the latest-tick stds across all mlp_down handles, the quantity
/// the weight-decay trend comparison is computed from.
pub fn final_mlp_down_mean_std(records: &[StdRecord]) -> Option<f64> {
    let last_tick = records
        .iter()
        .filter(|r| r.role == Role::MlpDown)
        .map(|r| r.tokens_seen)
        .max()?;
    let stds: Vec<f64> = records
        .iter()
        .filter(|r| r.role == Role::MlpDown && r.tokens_seen == last_tick)
        .map(|r| r.std)
        .collect();
    if stds.is_empty() {
        return None;
    }
    Some(stds.iter().sum::<f64>() / stds.len() as f64)
}
