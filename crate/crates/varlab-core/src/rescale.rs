//! In-training weight rescaling: unit-norm (UWR), z-score back to init std
//! (ZWR), z-score to a fixed target std (TVR), and the token-interval
//! scheduler that applies a strategy to the target parameter set.

use crate::error::{Error, Result};
use crate::model::{Model, Role, RoleSet};
use crate::tensor::{moments, Element, Tensor};
use alloc::string::String;
use alloc::vec::Vec;

/// Rescaling strategy.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Strategy {
    None,
    /// Divide by the Frobenius norm.
    Uwr,
    /// Reset population std to the recorded init std, preserving the mean.
    Zwr,
    /// Reset population std to a configured target, preserving the mean.
    Tvr,
}

impl Strategy {
    /// Stable textual name.
    pub fn as_str(self) -> &'static str {
        match self {
            Strategy::None => "none",
            Strategy::Uwr => "uwr",
            Strategy::Zwr => "zwr",
            Strategy::Tvr => "tvr",
        }
    }

    /// Parses the textual name back.
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Strategy::None),
            "uwr" => Ok(Strategy::Uwr),
            "zwr" => Ok(Strategy::Zwr),
            "tvr" => Ok(Strategy::Tvr),
            other => Err(Error::invalid(format_args!("unknown rescale strategy {other:?}"))),
        }
    }
}

/// When and how to rescale during training.
#[derive(Debug, Clone, PartialEq)]
pub struct RescaleSpec {
    pub strategy: Strategy,
    /// Token-clock spacing between applications.
    pub interval_tokens: u64,
    /// TVR target std (per layer when `depth_scaled`).
    pub sigma_target_base: f64,
    /// Divide the target by √l (deeper layers get smaller targets).
    pub depth_scaled: bool,
    pub target_roles: RoleSet,
}

impl Default for RescaleSpec {
    fn default() -> Self {
        RescaleSpec {
            strategy: Strategy::None,
            interval_tokens: 20_000,
            sigma_target_base: 0.01,
            depth_scaled: false,
            target_roles: RoleSet::decoder_2d(),
        }
    }
}

impl RescaleSpec {
    /// Checks hyperparameter ranges.
    pub fn validate(&self) -> Result<()> {
        if self.strategy != Strategy::None && self.interval_tokens == 0 {
            return Err(Error::invalid("rescale: interval_tokens must be positive"));
        }
        if self.strategy == Strategy::Tvr
            && (!(self.sigma_target_base > 0.0) || !self.sigma_target_base.is_finite())
        {
            return Err(Error::invalid("rescale: tvr needs sigma_target_base > 0"));
        }
        Ok(())
    }

    /// True when a tick at `tokens_seen` would apply the strategy; lets the
    /// training loop capture pre-rescale telemetry first.
    pub fn due(&self, tokens_seen: u64, last_applied: u64) -> bool {
        self.strategy != Strategy::None
            && tokens_seen >= last_applied
            && tokens_seen - last_applied >= self.interval_tokens
    }
}

/// `W / ‖W‖_F` — the result has unit Frobenius norm.
pub fn uwr_apply<E: Element>(w: &Tensor<E>) -> Result<Tensor<E>> {
    let mut out = w.clone();
    uwr_in_place(out.data_mut())?;
    Ok(out)
}

fn uwr_in_place<E: Element>(data: &mut [E]) -> Result<f64> {
    let mut sq = 0.0f64;
    for &x in data.iter() {
        let v = x.to_f64();
        sq += v * v;
    }
    let norm = libm::sqrt(sq);
    if !norm.is_finite() {
        return Err(Error::numeric("uwr input"));
    }
    if norm == 0.0 {
        return Err(Error::degenerate("uwr of zero matrix"));
    }
    // Divide in f64 rather than multiplying by a rounded reciprocal so
    // exactly-representable quotients (e.g. 3/5) come out exact.
    for x in data.iter_mut() {
        *x = E::from_f64(x.to_f64() / norm);
    }
    Ok(norm)
}

fn zscore_in_place<E: Element>(data: &mut [E], new_std: f64, what: &str) -> Result<(f64, f64)> {
    if !(new_std > 0.0) || !new_std.is_finite() {
        return Err(Error::invalid(format_args!("{what}: target std must be > 0, got {new_std}")));
    }
    let (mean, std) = crate::tensor::moments_slice(data)?;
    if !std.is_finite() || !mean.is_finite() {
        return Err(Error::numeric(what));
    }
    if std == 0.0 {
        return Err(Error::degenerate(format_args!("{what} of constant matrix (std 0)")));
    }
    let ratio = new_std / std;
    for x in data.iter_mut() {
        *x = E::from_f64((x.to_f64() - mean) * ratio + mean);
    }
    Ok((mean, std))
}

/// `z·σ_init + μ(W)` with z the per-entry z-scores — population std becomes
/// `sigma_init`, the mean and the centered direction are preserved.
pub fn zwr_apply<E: Element>(w: &Tensor<E>, sigma_init: f64) -> Result<Tensor<E>> {
    let mut out = w.clone();
    zscore_in_place(out.data_mut(), sigma_init, "zwr")?;
    Ok(out)
}

/// Same transform as [`zwr_apply`] toward a configured `sigma_target`.
pub fn tvr_apply<E: Element>(w: &Tensor<E>, sigma_target: f64) -> Result<Tensor<E>> {
    let mut out = w.clone();
    zscore_in_place(out.data_mut(), sigma_target, "tvr")?;
    Ok(out)
}

/// One telemetry event per handle the scheduler touched (or skipped).
#[derive(Debug, Clone)]
pub struct RescaleEvent {
    pub path: String,
    pub layer_index: usize,
    pub role: Role,
    pub std_before: f64,
    pub std_after: f64,
    /// True when the tensor was degenerate (zero norm / zero spread) and was
    /// left untouched; callers log a warning.
    pub skipped: bool,
}

/// Outcome of one scheduler call.
#[derive(Debug, Clone)]
pub struct TickOutcome {
    pub applied: bool,
    pub new_last_applied: u64,
    pub events: Vec<RescaleEvent>,
}

/// Applies the strategy once if at least `interval_tokens` have passed since
/// `last_applied` (no catch-up multiples). Degenerate tensors are reported as
/// skipped events, never errors.
pub fn rescale_tick<E: Element>(
    model: &mut Model<E>,
    spec: &RescaleSpec,
    tokens_seen: u64,
    last_applied: u64,
) -> Result<TickOutcome> {
    if tokens_seen < last_applied {
        return Err(Error::invalid(format_args!(
            "token clock ran backwards: tokens_seen {tokens_seen} < last_applied {last_applied}"
        )));
    }
    spec.validate()?;
    if !spec.due(tokens_seen, last_applied) {
        return Ok(TickOutcome {
            applied: false,
            new_last_applied: last_applied,
            events: Vec::new(),
        });
    }

    let mut events = Vec::new();
    for idx in model.param_indices(spec.target_roles) {
        let handle = model.handle(idx).clone();
        let (_, std_before) = moments(model.param(idx))?;
        let result = match spec.strategy {
            Strategy::Uwr => uwr_in_place(model.param_mut(idx).data_mut()).map(|_| ()),
            Strategy::Zwr => {
                zscore_in_place(model.param_mut(idx).data_mut(), handle.init_std_effective, "zwr")
                    .map(|_| ())
            }
            Strategy::Tvr => {
                let target = if spec.depth_scaled {
                    spec.sigma_target_base / libm::sqrt(handle.layer_index.max(1) as f64)
                } else {
                    spec.sigma_target_base
                };
                zscore_in_place(model.param_mut(idx).data_mut(), target, "tvr").map(|_| ())
            }
            Strategy::None => unreachable!(),
        };
        let skipped = match result {
            Ok(()) => false,
            Err(Error::DegenerateInput(_)) => true,
            // A recorded init std of 0 means ZWR has no defined target;
            // treat like degeneracy rather than aborting training.
            Err(Error::InvalidArgument(_)) if spec.strategy == Strategy::Zwr => true,
            Err(e) => return Err(e),
        };
        let (_, std_after) = moments(model.param(idx))?;
        events.push(RescaleEvent {
            path: handle.path,
            layer_index: handle.layer_index,
            role: handle.role,
            std_before,
            std_after,
            skipped,
        });
    }
    Ok(TickOutcome { applied: true, new_last_applied: tokens_seen, events })
}

#[cfg(test)]
mod tests {
    use super::*;
    // Explicit import so the enum wins over proptest's `Strategy` trait.
    use super::Strategy;
    use crate::tensor::frobenius_norm;
    use crate::init::{apply_init, InitSpec, Scheme};
    use crate::model::{Arch, ModelConfig};
    use crate::rng::{sample_gaussian, Prng};
    use alloc::vec;
    use proptest::prelude::*;

    #[test]
    fn uwr_known_examples() {
        let w = Tensor::from_vec(&[2, 2], vec![3.0f64, 4.0, 0.0, 0.0]).unwrap();
        let out = uwr_apply(&w).unwrap();
        assert_eq!(out.data(), &[0.6, 0.8, 0.0, 0.0]);
        let one = Tensor::from_vec(&[1, 1], vec![2.0f64]).unwrap();
        assert_eq!(uwr_apply(&one).unwrap().data(), &[1.0]);
    }

    #[test]
    fn uwr_unit_norm_input_unchanged_and_idempotent() {
        let mut prng = Prng::new(1);
        let w: Tensor<f64> = sample_gaussian(&[8, 8], 0.0, 0.3, &mut prng).unwrap();
        let once = uwr_apply(&w).unwrap();
        assert!((frobenius_norm(&once) - 1.0).abs() < 1e-12);
        let twice = uwr_apply(&once).unwrap();
        for (a, b) in once.data().iter().zip(twice.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn uwr_zero_matrix_is_degenerate() {
        let w: Tensor<f64> = Tensor::zeros(&[3, 3]);
        assert!(matches!(uwr_apply(&w), Err(Error::DegenerateInput(_))));
    }

    #[test]
    fn zwr_frozen_example() {
        // W=[1,2,3,4], sigma_init=0.01: moments give mean 2.5, std
        // sqrt(1.25); z = (W-mean)/std, result z*0.01 + mean.
        let w = Tensor::from_vec(&[2, 2], vec![1.0f64, 2.0, 3.0, 4.0]).unwrap();
        let (mean, std) = moments(&w).unwrap();
        assert_eq!(mean, 2.5);
        assert!((std - 1.118033988749895).abs() < 1e-15);
        let out = zwr_apply(&w, 0.01).unwrap();
        let expect = [
            2.4865835921350015,
            2.4955278640450005,
            2.5044721359549995,
            2.5134164078649985,
        ];
        for (a, e) in out.data().iter().zip(expect) {
            assert!((a - e).abs() < 1e-12, "{a} vs {e}");
        }
        // Postcondition: std equals sigma_init, mean preserved.
        let (m2, s2) = moments(&out).unwrap();
        assert!((m2 - 2.5).abs() < 1e-9 && (s2 - 0.01).abs() < 1e-9);
    }

    #[test]
    fn zwr_fixed_point() {
        let mut prng = Prng::new(5);
        let mut w: Tensor<f64> = sample_gaussian(&[16, 16], 0.0, 0.02, &mut prng).unwrap();
        // Force exact moments (0, 0.02) first.
        w = zwr_apply(&w, 0.02).unwrap();
        let again = zwr_apply(&w, 0.02).unwrap();
        for (a, b) in w.data().iter().zip(again.data()) {
            assert!((a - b).abs() < 1e-7);
        }
    }

    #[test]
    fn zwr_constant_matrix_is_degenerate() {
        let w = Tensor::from_vec(&[2, 2], vec![3.0f64; 4]).unwrap();
        assert!(matches!(zwr_apply(&w, 0.01), Err(Error::DegenerateInput(_))));
    }

    #[test]
    fn tvr_sets_target_std_and_preserves_mean() {
        let w = Tensor::from_vec(&[2, 2], vec![1.0f64, 2.0, 3.0, 4.0]).unwrap();
        let out = tvr_apply(&w, 0.01).unwrap();
        let (mean, std) = moments(&out).unwrap();
        assert!((mean - 2.5).abs() < 1e-9);
        assert!((std - 0.01).abs() < 1e-9);
    }

    #[test]
    fn tvr_identity_when_already_on_target() {
        let mut prng = Prng::new(6);
        let w: Tensor<f64> = sample_gaussian(&[32, 32], 0.1, 0.05, &mut prng).unwrap();
        let (_, std) = moments(&w).unwrap();
        let out = tvr_apply(&w, std).unwrap();
        for (a, b) in w.data().iter().zip(out.data()) {
            assert!((a - b).abs() < 1e-7);
        }
    }

    #[test]
    fn tvr_is_idempotent() {
        let mut prng = Prng::new(7);
        let w: Tensor<f32> = sample_gaussian(&[64, 64], 0.0, 0.02, &mut prng).unwrap();
        let once = tvr_apply(&w, 0.01).unwrap();
        let twice = tvr_apply(&once, 0.01).unwrap();
        for (a, b) in once.data().iter().zip(twice.data()) {
            assert!((a - b).abs() < 1e-7, "{a} vs {b}");
        }
    }

    fn desk_model(n_layers: usize) -> Model<f32> {
        let config = ModelConfig {
            arch: Arch::GluLlama,
            d_model: 32,
            n_layers,
            n_heads: 2,
            d_ff: 48,
            vocab_size: 64,
            ctx_len: 16,
            norm_eps: 1e-5,
            rope_theta: 10000.0,
        };
        let mut m = Model::new(config).unwrap();
        let mut prng = Prng::new(21);
        apply_init(&mut m, &InitSpec::default(), &mut prng).unwrap();
        m
    }

    #[test]
    fn tick_threshold_semantics() {
        let mut m = desk_model(2);
        let spec = RescaleSpec {
            strategy: Strategy::Tvr,
            interval_tokens: 10_000,
            ..RescaleSpec::default()
        };
        let out = rescale_tick(&mut m, &spec, 9_999, 0).unwrap();
        assert!(!out.applied);
        assert_eq!(out.new_last_applied, 0);
        assert!(out.events.is_empty());
        let out = rescale_tick(&mut m, &spec, 10_000, 0).unwrap();
        assert!(out.applied);
        assert_eq!(out.new_last_applied, 10_000);
        assert_eq!(out.events.len(), 2 * 7);
        // No catch-up: a large jump still applies exactly once and resets to
        // the current clock.
        let out = rescale_tick(&mut m, &spec, 45_000, 10_000).unwrap();
        assert!(out.applied);
        assert_eq!(out.new_last_applied, 45_000);
    }

    #[test]
    fn tick_none_strategy_is_noop() {
        let mut m = desk_model(2);
        let before: Vec<Vec<f32>> =
            (0..m.n_params()).map(|i| m.param(i).data().to_vec()).collect();
        let spec = RescaleSpec::default();
        let out = rescale_tick(&mut m, &spec, 1_000_000, 0).unwrap();
        assert!(!out.applied);
        for (i, prev) in before.iter().enumerate() {
            assert_eq!(m.param(i).data(), prev.as_slice());
        }
    }

    #[test]
    fn tick_tvr_hits_target_everywhere_and_spares_non_targets() {
        let mut m = desk_model(4);
        let emb_before = m.param(m.find("embedding").unwrap()).data().to_vec();
        let head_before = m.param(m.find("lm_head").unwrap()).data().to_vec();
        let norm_before = m.param(m.find("layers.3.input_norm.g").unwrap()).data().to_vec();
        let spec = RescaleSpec {
            strategy: Strategy::Tvr,
            interval_tokens: 1,
            sigma_target_base: 0.011,
            ..RescaleSpec::default()
        };
        let out = rescale_tick(&mut m, &spec, 10, 0).unwrap();
        assert!(out.applied);
        for idx in m.param_indices(RoleSet::decoder_2d()) {
            let (_, std) = moments(m.param(idx)).unwrap();
            assert!((std - 0.011).abs() < 1e-6, "{}: {std}", m.handle(idx).path);
        }
        assert_eq!(m.param(m.find("embedding").unwrap()).data(), emb_before.as_slice());
        assert_eq!(m.param(m.find("lm_head").unwrap()).data(), head_before.as_slice());
        assert_eq!(
            m.param(m.find("layers.3.input_norm.g").unwrap()).data(),
            norm_before.as_slice()
        );
    }

    #[test]
    fn tick_tvr_depth_scaled_divides_by_sqrt_layer() {
        let mut m = desk_model(4);
        let spec = RescaleSpec {
            strategy: Strategy::Tvr,
            interval_tokens: 1,
            sigma_target_base: 0.02,
            depth_scaled: true,
            ..RescaleSpec::default()
        };
        rescale_tick(&mut m, &spec, 10, 0).unwrap();
        for l in 1..=4usize {
            let idx = m.find(&alloc::format!("layers.{l}.mlp.down")).unwrap();
            let (_, std) = moments(m.param(idx)).unwrap();
            let want = 0.02 / (l as f64).sqrt();
            assert!((std - want).abs() < 1e-6, "layer {l}: {std} vs {want}");
        }
    }

    #[test]
    fn tick_zwr_restores_recorded_init_std() {
        let config = ModelConfig {
            arch: Arch::GluLlama,
            d_model: 32,
            n_layers: 4,
            n_heads: 2,
            d_ff: 48,
            vocab_size: 64,
            ctx_len: 16,
            norm_eps: 1e-5,
            rope_theta: 10000.0,
        };
        let mut m: Model<f32> = Model::new(config).unwrap();
        let mut prng = Prng::new(33);
        apply_init(&mut m, &InitSpec { scheme: Scheme::Lir, ..InitSpec::default() }, &mut prng)
            .unwrap();
        // Perturb all target stds, then ZWR must pull each back to its own
        // recorded (layer-dependent) init std.
        for idx in m.param_indices(RoleSet::decoder_2d()) {
            for x in m.param_mut(idx).data_mut() {
                *x *= 3.5;
            }
        }
        let spec = RescaleSpec { strategy: Strategy::Zwr, interval_tokens: 1, ..Default::default() };
        rescale_tick(&mut m, &spec, 5, 0).unwrap();
        for idx in m.param_indices(RoleSet::decoder_2d()) {
            let h = m.handle(idx);
            let (_, std) = moments(m.param(idx)).unwrap();
            assert!(
                (std - h.init_std_effective).abs() < 1e-6,
                "{}: {std} vs {}",
                h.path,
                h.init_std_effective
            );
        }
    }

    #[test]
    fn tick_skips_degenerate_tensors_without_error() {
        let mut m = desk_model(2);
        let dead = m.find("layers.1.attn.k").unwrap();
        m.param_mut(dead).data_mut().iter_mut().for_each(|x| *x = 0.0);
        let spec = RescaleSpec {
            strategy: Strategy::Tvr,
            interval_tokens: 1,
            ..RescaleSpec::default()
        };
        let out = rescale_tick(&mut m, &spec, 10, 0).unwrap();
        let ev = out.events.iter().find(|e| e.path == "layers.1.attn.k").unwrap();
        assert!(ev.skipped);
        assert!(m.param(dead).data().iter().all(|&x| x == 0.0));
        // Everything else still landed on target.
        let other = out.events.iter().find(|e| e.path == "layers.1.attn.q").unwrap();
        assert!(!other.skipped && (other.std_after - 0.01).abs() < 1e-6);
    }

    #[test]
    fn tick_rejects_backwards_clock() {
        let mut m = desk_model(2);
        let spec = RescaleSpec::default();
        assert!(rescale_tick(&mut m, &spec, 5, 10).is_err());
    }

    fn cosine_centered(a: &[f64], b: &[f64]) -> f64 {
        let ma: f64 = a.iter().sum::<f64>() / a.len() as f64;
        let mb: f64 = b.iter().sum::<f64>() / b.len() as f64;
        let mut dot = 0.0;
        let mut na = 0.0;
        let mut nb = 0.0;
        for (&x, &y) in a.iter().zip(b) {
            let (cx, cy) = (x - ma, y - mb);
            dot += cx * cy;
            na += cx * cx;
            nb += cy * cy;
        }
        dot / (na.sqrt() * nb.sqrt())
    }

    proptest! {
        #[test]
        fn prop_zwr_preserves_centered_direction(seed in 0u64..1000) {
            let mut prng = Prng::new(seed);
            let w: Tensor<f64> = sample_gaussian(&[16, 16], 0.3, 0.07, &mut prng).unwrap();
            let out = zwr_apply(&w, 0.01).unwrap();
            let cos = cosine_centered(w.data(), out.data());
            prop_assert!(cos >= 1.0 - 1e-9, "cos {cos}");
        }

        #[test]
        fn prop_tvr_mean_drift_bounded(seed in 0u64..1000, target in 1e-4f64..0.5) {
            let mut prng = Prng::new(seed);
            let w: Tensor<f32> = sample_gaussian(&[32, 32], -0.2, 0.04, &mut prng).unwrap();
            let (m0, _) = moments(&w).unwrap();
            let out = tvr_apply(&w, target).unwrap();
            let (m1, s1) = moments(&out).unwrap();
            prop_assert!((m1 - m0).abs() < 1e-6);
            prop_assert!((s1 - target).abs() < 1e-6);
        }
    }
}
