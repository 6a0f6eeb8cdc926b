//! Weight-initialization schemes and their application to a model, recording
//! the analytic per-parameter init std for later rescaling.

use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig, ParamHandle, Role, RoleSet};
use crate::rng::{fill_gaussian, fill_uniform, Prng};
use crate::tensor::Element;

/// Initialization scheme.
///
/// Normal family samples N(0, std²); uniform family samples U(−bound, bound).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scheme {
    /// N(0, σ_base²) everywhere.
    Gaussian,
    /// U(±√(6/(n_in+n_out))).
    XavierUniform,
    /// N(0, 2/(n_in+n_out)).
    XavierNormal,
    /// U(±√(6/n_in)).
    KaimingUniform,
    /// N(0, 2/n_in).
    KaimingNormal,
    /// σ_base, except the residual projections (attn_o, mlp_down) get
    /// σ_base/√(2N) — the GPT-2 special residual init.
    Sir,
    /// Depth-scaled uniform: bound βα/√l with β = √(6/(n_in+n_out)).
    DsInit,
    /// Layer-index rescaling: N(0, σ_base²/l), i.e. std σ_base/√l.
    Lir,
}

impl Scheme {
    /// Every scheme, in canonical order.
    pub const ALL: [Scheme; 8] = [
        Scheme::Gaussian,
        Scheme::XavierUniform,
        Scheme::XavierNormal,
        Scheme::KaimingUniform,
        Scheme::KaimingNormal,
        Scheme::Sir,
        Scheme::DsInit,
        Scheme::Lir,
    ];

    /// Stable textual name.
    pub fn as_str(self) -> &'static str {
        match self {
            Scheme::Gaussian => "gaussian",
            Scheme::XavierUniform => "xavier_uniform",
            Scheme::XavierNormal => "xavier_normal",
            Scheme::KaimingUniform => "kaiming_uniform",
            Scheme::KaimingNormal => "kaiming_normal",
            Scheme::Sir => "sir",
            Scheme::DsInit => "ds_init",
            Scheme::Lir => "lir",
        }
    }

    /// Parses the textual name back.
    pub fn parse(s: &str) -> Result<Self> {
        Scheme::ALL
            .iter()
            .copied()
            .find(|x| x.as_str() == s)
            .ok_or_else(|| Error::invalid(format_args!("unknown init scheme {s:?}")))
    }

    /// True for the bounded-uniform schemes.
    pub fn is_uniform_family(self) -> bool {
        matches!(self, Scheme::XavierUniform | Scheme::KaimingUniform | Scheme::DsInit)
    }
}

/// Full description of how to initialize a model.
#[derive(Debug, Clone, PartialEq)]
pub struct InitSpec {
    pub scheme: Scheme,
    /// Base std σ for gaussian/sir/lir.
    pub sigma_base: f64,
    /// DS-Init damping α in [0, 1].
    pub alpha: f64,
    /// Roles the scheme applies to; 2-D decoder params outside this set fall
    /// back to gaussian(σ_base).
    pub target_roles: RoleSet,
    /// Gaussian σ for embedding and lm_head (kept out of the experimental
    /// variable set).
    pub embed_sigma: f64,
}

impl Default for InitSpec {
    fn default() -> Self {
        InitSpec {
            scheme: Scheme::Gaussian,
            sigma_base: 0.02,
            alpha: 1.0,
            target_roles: RoleSet::decoder_2d(),
            embed_sigma: 0.02,
        }
    }
}

impl InitSpec {
    /// Checks hyperparameter ranges.
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma_base > 0.0) || !self.sigma_base.is_finite() {
            return Err(Error::invalid("init: sigma_base must be > 0"));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::invalid("init: alpha must be in [0, 1]"));
        }
        if !(self.embed_sigma > 0.0) || !self.embed_sigma.is_finite() {
            return Err(Error::invalid("init: embed_sigma must be > 0"));
        }
        Ok(())
    }
}

fn fan_dims(handle: &ParamHandle) -> Result<(f64, f64)> {
    match handle.shape.as_slice() {
        &[n_in, n_out] => Ok((n_in as f64, n_out as f64)),
        other => Err(Error::invalid(format_args!(
            "{}: fan-based init needs a 2-D shape, got {other:?}",
            handle.path
        ))),
    }
}

fn check_target(spec: &InitSpec, handle: &ParamHandle) -> Result<()> {
    if !spec.target_roles.contains(handle.role) {
        return Err(Error::invalid(format_args!(
            "{} (role {}) is outside the init target role set",
            handle.path, handle.role
        )));
    }
    Ok(())
}

fn layer_index(handle: &ParamHandle) -> Result<f64> {
    if handle.layer_index == 0 {
        return Err(Error::invalid(format_args!(
            "{}: depth-dependent scheme needs a decoder-layer parameter",
            handle.path
        )));
    }
    Ok(handle.layer_index as f64)
}

/// Std of the Gaussian a normal-family scheme samples for `handle`.
pub fn effective_std(spec: &InitSpec, handle: &ParamHandle, config: &ModelConfig) -> Result<f64> {
    check_target(spec, handle)?;
    match spec.scheme {
        Scheme::Gaussian => Ok(spec.sigma_base),
        Scheme::XavierNormal => {
            let (n_in, n_out) = fan_dims(handle)?;
            Ok(libm::sqrt(2.0 / (n_in + n_out)))
        }
        Scheme::KaimingNormal => {
            let (n_in, _) = fan_dims(handle)?;
            Ok(libm::sqrt(2.0 / n_in))
        }
        Scheme::Sir => {
            layer_index(handle)?;
            if matches!(handle.role, Role::AttnO | Role::MlpDown) {
                Ok(spec.sigma_base / libm::sqrt(2.0 * config.n_layers as f64))
            } else {
                Ok(spec.sigma_base)
            }
        }
        Scheme::Lir => Ok(spec.sigma_base / libm::sqrt(layer_index(handle)?)),
        uniform => Err(Error::invalid(format_args!(
            "{} is a uniform-family scheme; use effective_bound",
            uniform.as_str()
        ))),
    }
}

/// Half-width of the uniform interval a uniform-family scheme samples.
pub fn effective_bound(spec: &InitSpec, handle: &ParamHandle, _config: &ModelConfig) -> Result<f64> {
    check_target(spec, handle)?;
    match spec.scheme {
        Scheme::XavierUniform => {
            let (n_in, n_out) = fan_dims(handle)?;
            Ok(libm::sqrt(6.0 / (n_in + n_out)))
        }
        Scheme::KaimingUniform => {
            let (n_in, _) = fan_dims(handle)?;
            Ok(libm::sqrt(6.0 / n_in))
        }
        Scheme::DsInit => {
            let (n_in, n_out) = fan_dims(handle)?;
            let beta = libm::sqrt(6.0 / (n_in + n_out));
            Ok(beta * spec.alpha / libm::sqrt(layer_index(handle)?))
        }
        normal => Err(Error::invalid(format_args!(
            "{} is a normal-family scheme; use effective_std",
            normal.as_str()
        ))),
    }
}

/// Analytic std of whatever distribution the scheme draws for `handle`
/// (bound/√3 for uniform schemes), i.e. the value recorded as
/// `init_std_effective`.
pub fn recorded_std(spec: &InitSpec, handle: &ParamHandle, config: &ModelConfig) -> Result<f64> {
    if spec.scheme.is_uniform_family() {
        Ok(effective_bound(spec, handle, config)? / libm::sqrt(3.0))
    } else {
        effective_std(spec, handle, config)
    }
}

/// Stamps `init_std_effective` on every handle per the spec without
/// touching parameter values. Used by `apply_init` and by checkpoint
/// restore, where the values come from disk but ZWR still needs its
/// reference stds.
pub fn record_init_stds<E: Element>(model: &mut Model<E>, spec: &InitSpec) -> Result<()> {
    spec.validate()?;
    let config = model.config().clone();
    for i in 0..model.n_params() {
        let handle = model.handle(i).clone();
        let std = match handle.role {
            Role::InputNorm | Role::PostAttnNorm | Role::FinalNorm => 0.0,
            Role::Embedding | Role::LmHead => spec.embed_sigma,
            _ if spec.target_roles.contains(handle.role) => {
                recorded_std(spec, &handle, &config)?
            }
            _ => spec.sigma_base,
        };
        model.set_init_std(i, std);
    }
    Ok(())
}

/// Samples every parameter: target-role matrices per the scheme, other
/// decoder matrices gaussian(σ_base), embedding/lm_head gaussian(embed σ),
/// norm γ=1 and β=0. Sampling order is the canonical handle order and is
/// part of the determinism contract.
pub fn apply_init<E: Element>(model: &mut Model<E>, spec: &InitSpec, prng: &mut Prng) -> Result<()> {
    record_init_stds(model, spec)?;
    let config = model.config().clone();
    for i in 0..model.n_params() {
        let handle = model.handle(i).clone();
        match handle.role {
            Role::InputNorm | Role::PostAttnNorm | Role::FinalNorm => {
                let fill = if handle.path.ends_with(".b") { E::ZERO } else { E::ONE };
                model.param_mut(i).data_mut().iter_mut().for_each(|x| *x = fill);
            }
            Role::Embedding | Role::LmHead => {
                fill_gaussian(model.param_mut(i).data_mut(), 0.0, spec.embed_sigma, prng);
            }
            _ if spec.target_roles.contains(handle.role) => {
                if spec.scheme.is_uniform_family() {
                    let bound = effective_bound(spec, &handle, &config)?;
                    fill_uniform(model.param_mut(i).data_mut(), -bound, bound, prng);
                } else {
                    let std = effective_std(spec, &handle, &config)?;
                    fill_gaussian(model.param_mut(i).data_mut(), 0.0, std, prng);
                }
            }
            _ => {
                fill_gaussian(model.param_mut(i).data_mut(), 0.0, spec.sigma_base, prng);
            }
        }
    }
    Ok(())
}
