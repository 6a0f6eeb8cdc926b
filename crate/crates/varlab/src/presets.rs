//! Named experiment presets: desk-scaled configurations for the ablations
//! this codebase is built to run. Each preset expands to one or more
//! `(variant_name, RunConfig)` pairs; multi-variant presets differ only in
//! the knob under study.

use varlab_core::init::Scheme;
use varlab_core::model::Arch;
use varlab_core::rescale::Strategy;
use varlab_core::{Error, Result};

use crate::config::RunConfig;

/// Every preset name, in display order.
pub const PRESET_NAMES: [&str; 8] = [
    "baseline",
    "best",
    "wd_ablation",
    "sir_vs_lir",
    "tvr_frequency",
    "depth_target",
    "activation_sweep",
    "gpt2_nonglu",
];

fn desk(variant: &str) -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.train.out_dir = format!("runs/{variant}").into();
    cfg
}

/// Plain desk run: gaussian σ=0.02, no rescaling.
fn baseline() -> Vec<(String, RunConfig)> {
    vec![("baseline".into(), desk("baseline"))]
}

/// The winning combination: σ_init=0.006 with layer-index rescaling, plus
/// target-variance rescaling to σ_target=0.01 on the 1%-of-budget interval.
fn best() -> Vec<(String, RunConfig)> {
    let mut cfg = desk("best");
    cfg.init.scheme = Scheme::Lir;
    cfg.init.sigma_base = 0.006;
    cfg.rescale.strategy = Strategy::Tvr;
    cfg.rescale.sigma_target_base = 0.01;
    cfg.rescale.depth_scaled = false;
    cfg.rescale.interval_tokens = 20_000;
    vec![("best".into(), cfg)]
}

/// Weight-decay ablation: σ=0.03 desk runs, identical except λ ∈ {0.1, 0.0}.
/// Longer budget (5M tokens) so the std drift has room to show.
fn wd_ablation() -> Vec<(String, RunConfig)> {
    let mut on = desk("wd_on");
    on.init.sigma_base = 0.03;
    on.init.embed_sigma = 0.03;
    on.train.total_tokens = 5_000_000;
    on.warmup_tokens = 50_000;
    on.optim.weight_decay = 0.1;
    let mut off = on.clone();
    off.train.out_dir = "runs/wd_off".into();
    off.optim.weight_decay = 0.0;
    vec![("wd_on".into(), on), ("wd_off".into(), off)]
}

/// Residual-projection special init (attn_o, mlp_down scaled by 1/√(2N))
/// versus layer-index rescaling, both from σ=0.02, no in-training rescale.
fn sir_vs_lir() -> Vec<(String, RunConfig)> {
    let mut sir = desk("sir");
    sir.init.scheme = Scheme::Sir;
    let mut lir = desk("lir");
    lir.init.scheme = Scheme::Lir;
    vec![("sir".into(), sir), ("lir".into(), lir)]
}

/// Rescale-interval ablation: σ_init=0.006 + LIR with σ_target=0.02, applied
/// every 1% versus every 5% of the token budget.
fn tvr_frequency() -> Vec<(String, RunConfig)> {
    let mut fast = desk("tvr_20k");
    fast.init.scheme = Scheme::Lir;
    fast.init.sigma_base = 0.006;
    fast.rescale.strategy = Strategy::Tvr;
    fast.rescale.sigma_target_base = 0.02;
    fast.rescale.interval_tokens = 20_000;
    let mut slow = fast.clone();
    slow.train.out_dir = "runs/tvr_100k".into();
    slow.rescale.interval_tokens = 100_000;
    vec![("tvr_20k".into(), fast), ("tvr_100k".into(), slow)]
}

/// Depth-scaled σ_target (σ_target/√l per layer) versus a constant target,
/// both from σ_init=0.006 + LIR with base target 0.01.
fn depth_target() -> Vec<(String, RunConfig)> {
    let mut scaled = desk("depth_scaled");
    scaled.init.scheme = Scheme::Lir;
    scaled.init.sigma_base = 0.006;
    scaled.rescale.strategy = Strategy::Tvr;
    scaled.rescale.sigma_target_base = 0.01;
    scaled.rescale.interval_tokens = 20_000;
    scaled.rescale.depth_scaled = true;
    let mut constant = scaled.clone();
    constant.train.out_dir = "runs/depth_constant".into();
    constant.rescale.depth_scaled = false;
    vec![("depth_scaled".into(), scaled), ("depth_constant".into(), constant)]
}

/// Extreme-activation comparison: the probe is run on both checkpoints after
/// training; pairs the plain baseline against the best combination.
fn activation_sweep() -> Vec<(String, RunConfig)> {
    let base = desk("sweep_baseline");
    let mut tuned = best().pop().unwrap().1;
    tuned.train.out_dir = "runs/sweep_best".into();
    vec![("sweep_baseline".into(), base), ("sweep_best".into(), tuned)]
}

/// Non-GLU architecture check: GPT-2-style desk model (LayerNorm, GELU,
/// learned positions) with gradient clipping at 1.0, comparing plain init,
/// LIR, and LIR + TVR.
fn gpt2_nonglu() -> Vec<(String, RunConfig)> {
    let mut base = desk("gpt2_baseline");
    base.model.arch = Arch::Gpt2NonGlu;
    base.model.d_ff = 256;
    base.clip_norm = Some(1.0);
    let mut lir = base.clone();
    lir.train.out_dir = "runs/gpt2_lir".into();
    lir.init.scheme = Scheme::Lir;
    let mut lir_tvr = lir.clone();
    lir_tvr.train.out_dir = "runs/gpt2_lir_tvr".into();
    lir_tvr.rescale.strategy = Strategy::Tvr;
    lir_tvr.rescale.sigma_target_base = 0.02;
    lir_tvr.rescale.interval_tokens = 20_000;
    vec![
        ("gpt2_baseline".into(), base),
        ("gpt2_lir".into(), lir),
        ("gpt2_lir_tvr".into(), lir_tvr),
    ]
}

/// Expands a preset name into its variant configs.
pub fn expand(name: &str) -> Result<Vec<(String, RunConfig)>> {
    match name {
        "baseline" => Ok(baseline()),
        "best" => Ok(best()),
        "wd_ablation" => Ok(wd_ablation()),
        "sir_vs_lir" => Ok(sir_vs_lir()),
        "tvr_frequency" => Ok(tvr_frequency()),
        "depth_target" => Ok(depth_target()),
        "activation_sweep" => Ok(activation_sweep()),
        "gpt2_nonglu" => Ok(gpt2_nonglu()),
        _ => Err(Error::invalid(format_args!(
            "unknown preset '{name}'; available: {}",
            PRESET_NAMES.join(", ")
        ))),
    }
}
