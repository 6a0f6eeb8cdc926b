//! Finite-difference validation of the hand-written backward pass.
//!
//! For each parameter role, a deterministic sample of coordinates is nudged
//! by ±h and the central-difference slope of the training loss is compared
//! against the analytic gradient. Runs in float64 so the difference quotient
//! has headroom below the acceptance tolerance.

use crate::error::{Error, Result};
use crate::init::{apply_init, InitSpec};
use crate::model::{backward, cross_entropy, forward, Arch, Model, ModelConfig, Role};
use crate::rng::Prng;
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

/// Knobs for one gradient check run.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckSettings {
    /// Coordinates sampled per parameter role (classes smaller than this
    /// are checked exhaustively).
    pub coords_per_class: usize,
    /// Central-difference step.
    pub h: f64,
    /// Seeds the model init, the probe batch, and the coordinate sample.
    pub seed: u64,
    /// Max relative error allowed before `passed` reports failure.
    pub tolerance: f64,
}

impl Default for GradCheckSettings {
    fn default() -> Self {
        GradCheckSettings { coords_per_class: 100, h: 1e-5, seed: 1234, tolerance: 1e-5 }
    }
}

/// Worst observed coordinate for one role.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassReport {
    pub role: Role,
    pub checked: usize,
    pub max_rel_err: f64,
    pub worst_path: String,
    pub worst_coord: usize,
}

/// Outcome of a full check on one architecture.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub arch: Arch,
    pub classes: Vec<ClassReport>,
    pub max_rel_err: f64,
}

impl GradCheckReport {
    /// True when every sampled coordinate met the tolerance.
    pub fn passed(&self, tolerance: f64) -> bool {
        self.max_rel_err < tolerance
    }
}

impl fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{}: max rel err {:.3e}", self.arch.as_str(), self.max_rel_err)?;
        for c in &self.classes {
            writeln!(
                f,
                "  {:<14} {:>4} coords, max rel err {:.3e} ({}[{}])",
                c.role.as_str(),
                c.checked,
                c.max_rel_err,
                c.worst_path,
                c.worst_coord
            )?;
        }
        Ok(())
    }
}

/// The small float64 model the check runs on: 2 layers, d_model 16.
pub fn check_config(arch: Arch) -> ModelConfig {
    ModelConfig {
        arch,
        d_model: 16,
        n_layers: 2,
        n_heads: 2,
        d_ff: 24,
        vocab_size: 32,
        ctx_len: 16,
        norm_eps: 1e-5,
        rope_theta: 10000.0,
    }
}

// Relative error denominator is floored so finite-difference roundoff on
// near-zero gradients doesn't read as disagreement.
const DENOM_FLOOR: f64 = 1e-3;

// Probe batch shape; seq stays under ctx_len.
const BATCH: usize = 2;
const SEQ: usize = 12;

/// Checks `backward` against central differences on a small float64 model.
///
/// `corrupt` is a test hook: it perturbs the analytic gradients before
/// comparison so callers can prove the detector actually fires.
pub fn grad_check(
    arch: Arch,
    settings: &GradCheckSettings,
    corrupt: bool,
) -> Result<GradCheckReport> {
    if !(settings.h > 0.0) || settings.coords_per_class == 0 {
        return Err(Error::invalid("grad check needs h > 0 and at least one coordinate"));
    }
    let config = check_config(arch);
    let mut model: Model<f64> = Model::new(config)?;
    let mut prng = Prng::substream(settings.seed, u64::from_le_bytes(*b"gradinit"));
    apply_init(&mut model, &InitSpec::default(), &mut prng)?;

    let mut data_rng = Prng::substream(settings.seed, u64::from_le_bytes(*b"graddata"));
    let vocab = model.config().vocab_size as u64;
    let tokens: Vec<u32> =
        (0..BATCH * SEQ).map(|_| data_rng.next_bounded(vocab) as u32).collect();
    let targets: Vec<u32> =
        (0..BATCH * SEQ).map(|_| data_rng.next_bounded(vocab) as u32).collect();

    let (_, mut grads) = backward(&model, &tokens, &targets, BATCH, SEQ)?;
    if corrupt {
        for t in grads.tensors_mut() {
            for x in t.data_mut() {
                *x += 1e-3;
            }
        }
    }

    // Coordinates grouped by role, sampled without replacement.
    let mut classes = Vec::new();
    let mut max_rel_err = 0.0f64;
    for role in Role::ALL {
        let mut coords: Vec<(usize, usize)> = Vec::new();
        for i in 0..model.n_params() {
            if model.handle(i).role == role {
                coords.extend((0..model.param(i).len()).map(|c| (i, c)));
            }
        }
        if coords.is_empty() {
            continue; // e.g. mlp_gate on the non-GLU architecture
        }
        let mut pick_rng = Prng::substream(settings.seed, 0x100 + role as u64);
        pick_rng.shuffle(&mut coords);
        coords.truncate(settings.coords_per_class);

        let mut class = ClassReport {
            role,
            checked: coords.len(),
            max_rel_err: 0.0,
            worst_path: String::new(),
            worst_coord: 0,
        };
        for (i, c) in coords {
            let original = model.param(i).data()[c];
            let loss_at = |m: &mut Model<f64>, value: f64| -> Result<f64> {
                m.param_mut(i).data_mut()[c] = value;
                let out = forward(m, &tokens, BATCH, SEQ)?;
                cross_entropy(&out.logits, &targets)
            };
            let plus = loss_at(&mut model, original + settings.h)?;
            let minus = loss_at(&mut model, original - settings.h)?;
            model.param_mut(i).data_mut()[c] = original;
            let fd = (plus - minus) / (2.0 * settings.h);
            let g = grads.tensors()[i].data()[c];
            let rel = (g - fd).abs() / g.abs().max(fd.abs()).max(DENOM_FLOOR);
            if rel > class.max_rel_err {
                class.max_rel_err = rel;
                class.worst_path = model.handle(i).path.clone();
                class.worst_coord = c;
            }
        }
        max_rel_err = max_rel_err.max(class.max_rel_err);
        classes.push(class);
    }
    Ok(GradCheckReport { arch, classes, max_rel_err })
}
