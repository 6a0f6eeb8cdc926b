//! AdamW with decoupled weight decay (or classical L2-coupled decay),
//! global-norm gradient clipping, and the linear-warmup + cosine-decay
//! learning-rate schedule.

use crate::error::{Error, Result};
use crate::model::{Gradients, Model, Role, RoleSet};
use crate::tensor::{Element, Tensor};
use alloc::vec::Vec;

/// How weight decay enters the update.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DecayMode {
    /// λ·w subtracted directly in the update rule (the AdamW convention).
    Decoupled,
    /// λ·w added to the gradient before the moment updates (classical L2).
    L2Coupled,
}

impl DecayMode {
    /// Stable textual name.
    pub fn as_str(self) -> &'static str {
        match self {
            DecayMode::Decoupled => "decoupled",
            DecayMode::L2Coupled => "l2_coupled",
        }
    }

    /// Parses the textual name back.
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "decoupled" => Ok(DecayMode::Decoupled),
            "l2_coupled" => Ok(DecayMode::L2Coupled),
            other => Err(Error::invalid(format_args!("unknown decay mode {other:?}"))),
        }
    }
}

/// Adam hyperparameters plus the decay policy.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamHyper {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub mode: DecayMode,
    /// Roles whose parameters are decayed; norm vectors stay out.
    pub decay_roles: RoleSet,
}

impl AdamHyper {
    /// All 2-D matrices plus embedding and lm_head; norm γ/β excluded.
    pub fn default_decay_roles() -> RoleSet {
        let mut set = RoleSet::decoder_2d();
        set.insert(Role::Embedding);
        set.insert(Role::LmHead);
        set
    }

    /// Checks hyperparameter ranges.
    pub fn validate(&self) -> Result<()> {
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::invalid(format_args!("optim: {name} must be in [0, 1)")));
            }
        }
        if !(self.eps > 0.0) {
            return Err(Error::invalid("optim: eps must be > 0"));
        }
        if !(self.weight_decay >= 0.0) || !self.weight_decay.is_finite() {
            return Err(Error::invalid("optim: weight_decay must be >= 0"));
        }
        Ok(())
    }
}

impl Default for AdamHyper {
    fn default() -> Self {
        AdamHyper {
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-7,
            weight_decay: 0.1,
            mode: DecayMode::Decoupled,
            decay_roles: AdamHyper::default_decay_roles(),
        }
    }
}

/// First/second moments and step counter for one model.
#[derive(Debug, Clone)]
pub struct OptimState<E: Element> {
    pub hyper: AdamHyper,
    m: Vec<Tensor<E>>,
    v: Vec<Tensor<E>>,
    pub t: u64,
}

impl<E: Element> OptimState<E> {
    /// Fresh zeroed state shaped like the model's parameters.
    pub fn new(model: &Model<E>, hyper: AdamHyper) -> Self {
        let zeros = || -> Vec<Tensor<E>> {
            model.handles().iter().map(|h| Tensor::zeros(&h.shape)).collect()
        };
        OptimState { hyper, m: zeros(), v: zeros(), t: 0 }
    }

    /// Rebuilds state from checkpointed parts.
    pub fn from_parts(
        hyper: AdamHyper,
        m: Vec<Tensor<E>>,
        v: Vec<Tensor<E>>,
        t: u64,
        model: &Model<E>,
    ) -> Result<Self> {
        if m.len() != model.n_params() || v.len() != model.n_params() {
            return Err(Error::invalid("optimizer state tensor count mismatch"));
        }
        for (i, h) in model.handles().iter().enumerate() {
            if m[i].shape() != h.shape.as_slice() || v[i].shape() != h.shape.as_slice() {
                return Err(Error::invalid(format_args!(
                    "optimizer state shape mismatch at {}",
                    h.path
                )));
            }
        }
        Ok(OptimState { hyper, m, v, t })
    }

    /// First moments, canonical handle order.
    pub fn first_moments(&self) -> &[Tensor<E>] {
        &self.m
    }

    /// Second moments, canonical handle order.
    pub fn second_moments(&self) -> &[Tensor<E>] {
        &self.v
    }
}

/// Global L2 norm over all gradient tensors, accumulated in f64.
pub fn global_grad_norm<E: Element>(grads: &Gradients<E>) -> f64 {
    let mut sq = 0.0f64;
    for t in grads.tensors() {
        for &x in t.data() {
            let v = x.to_f64();
            sq += v * v;
        }
    }
    libm::sqrt(sq)
}

/// Scales all gradients by max_norm/g when the global norm g exceeds
/// `max_norm`; otherwise leaves them bit-unchanged. Returns the pre-clip
/// norm.
pub fn clip_global_norm<E: Element>(
    model: &Model<E>,
    grads: &mut Gradients<E>,
    max_norm: f64,
) -> Result<f64> {
    if !(max_norm > 0.0) {
        return Err(Error::invalid("clip: max_norm must be > 0"));
    }
    for (h, g) in model.handles().iter().zip(grads.tensors()) {
        if !g.all_finite() {
            return Err(Error::numeric(&h.path));
        }
    }
    let norm = global_grad_norm(grads);
    if norm > max_norm {
        let factor = E::from_f64(max_norm / norm);
        for t in grads.tensors_mut() {
            for x in t.data_mut() {
                *x *= factor;
            }
        }
    }
    Ok(norm)
}

/// One optimizer step: moment updates with bias correction, then either the
/// decoupled update `w ← w − lr·(m̂/(√v̂+ε) + λ·w)` or, in L2-coupled mode,
/// plain Adam on `g + λ·w`.
pub fn adamw_step<E: Element>(
    model: &mut Model<E>,
    grads: &Gradients<E>,
    state: &mut OptimState<E>,
    lr: f64,
) -> Result<()> {
    state.hyper.validate()?;
    if grads.tensors().len() != model.n_params() {
        return Err(Error::invalid("gradient tensor count mismatch"));
    }
    if !lr.is_finite() {
        return Err(Error::numeric("learning rate"));
    }
    state.t += 1;
    let h = &state.hyper;
    let c1 = 1.0 / (1.0 - libm::pow(h.beta1, state.t as f64));
    let c2 = 1.0 / (1.0 - libm::pow(h.beta2, state.t as f64));

    for i in 0..model.n_params() {
        let handle_role = model.handle(i).role;
        let decayed = h.weight_decay > 0.0 && h.decay_roles.contains(handle_role);
        let g_t = &grads.tensors()[i];
        if g_t.shape() != model.handle(i).shape.as_slice() {
            return Err(Error::invalid(format_args!(
                "gradient shape mismatch at {}",
                model.handle(i).path
            )));
        }
        let m_t = state.m[i].data_mut();
        let v_t = state.v[i].data_mut();
        let w_t = model.param_mut(i).data_mut();
        for ((w, g), (m, v)) in
            w_t.iter_mut().zip(g_t.data()).zip(m_t.iter_mut().zip(v_t.iter_mut()))
        {
            let wv = w.to_f64();
            let mut gv = g.to_f64();
            if h.mode == DecayMode::L2Coupled && decayed {
                gv += h.weight_decay * wv;
            }
            let mv = h.beta1 * m.to_f64() + (1.0 - h.beta1) * gv;
            let vv = h.beta2 * v.to_f64() + (1.0 - h.beta2) * gv * gv;
            let m_hat = mv * c1;
            let v_hat = vv * c2;
            let mut upd = m_hat / (libm::sqrt(v_hat) + h.eps);
            if h.mode == DecayMode::Decoupled && decayed {
                upd += h.weight_decay * wv;
            }
            *m = E::from_f64(mv);
            *v = E::from_f64(vv);
            *w = E::from_f64(wv - lr * upd);
        }
        if !model.param(i).all_finite() {
            return Err(Error::numeric(&model.handle(i).path));
        }
    }
    Ok(())
}

/// Linear warmup to `max_lr`, then cosine decay to `end_lr`.
#[derive(Debug, Clone, PartialEq)]
pub struct LrSchedule {
    pub warmup_tokens: u64,
    pub total_tokens: u64,
    pub max_lr: f64,
    pub end_lr: f64,
}

impl LrSchedule {
    /// Checks 0 < warmup < total and sane rates.
    pub fn validate(&self) -> Result<()> {
        if self.warmup_tokens == 0 || self.warmup_tokens >= self.total_tokens {
            return Err(Error::invalid(format_args!(
                "schedule: need 0 < warmup ({}) < total ({})",
                self.warmup_tokens, self.total_tokens
            )));
        }
        if !(self.max_lr > 0.0) || !(self.end_lr >= 0.0) || self.end_lr > self.max_lr {
            return Err(Error::invalid("schedule: need 0 <= end_lr <= max_lr, max_lr > 0"));
        }
        Ok(())
    }

    /// Learning rate after `tokens` trained tokens.
    pub fn lr_at(&self, tokens: u64) -> f64 {
        if tokens <= self.warmup_tokens {
            return self.max_lr * tokens as f64 / self.warmup_tokens as f64;
        }
        let span = (self.total_tokens - self.warmup_tokens) as f64;
        let p = (tokens - self.warmup_tokens) as f64 / span;
        if p >= 1.0 {
            return self.end_lr;
        }
        self.end_lr + (self.max_lr - self.end_lr) * (1.0 + libm::cos(core::f64::consts::PI * p)) / 2.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Arch, Model, ModelConfig};
    use crate::rng::{fill_gaussian, Prng};
    use alloc::vec::Vec;
    use proptest::prelude::*;

    fn sched() -> LrSchedule {
        LrSchedule {
            warmup_tokens: 20_000,
            total_tokens: 2_000_000,
            max_lr: 6e-4,
            end_lr: 6e-5,
        }
    }

    #[test]
    fn lr_endpoints_are_exact() {
        let s = sched();
        assert_eq!(s.lr_at(0), 0.0);
        assert_eq!(s.lr_at(s.warmup_tokens), 6e-4);
        assert_eq!(s.lr_at(s.total_tokens), 6e-5);
        assert_eq!(s.lr_at(s.total_tokens + 500_000), 6e-5);
    }

    #[test]
    fn lr_cosine_midpoint() {
        let s = sched();
        let mid = s.warmup_tokens + (s.total_tokens - s.warmup_tokens) / 2;
        assert!((s.lr_at(mid) - 3.3e-4).abs() < 1e-12);
    }

    #[test]
    fn lr_continuous_at_junction_and_monotone_after() {
        let s = sched();
        assert!((s.lr_at(s.warmup_tokens + 1) - 6e-4).abs() < 1e-12);
        let mut prev = s.lr_at(s.warmup_tokens);
        for k in 1..=100u64 {
            let t = s.warmup_tokens + k * (s.total_tokens - s.warmup_tokens) / 100;
            let lr = s.lr_at(t);
            assert!(lr <= prev + 1e-18, "not monotone at {t}");
            prev = lr;
        }
    }

    #[test]
    fn lr_validate_rejects_bad_windows() {
        let mut s = sched();
        s.warmup_tokens = 0;
        assert!(s.validate().is_err());
        let mut s = sched();
        s.warmup_tokens = s.total_tokens;
        assert!(s.validate().is_err());
    }

    fn tiny_model(seed: u64) -> Model<f64> {
        let config = ModelConfig {
            arch: Arch::GluLlama,
            d_model: 16,
            n_layers: 1,
            n_heads: 2,
            d_ff: 24,
            vocab_size: 32,
            ctx_len: 8,
            norm_eps: 1e-5,
            rope_theta: 10000.0,
        };
        let mut m = Model::new(config).unwrap();
        let mut prng = Prng::new(seed);
        for i in 0..m.n_params() {
            fill_gaussian(m.param_mut(i).data_mut(), 0.0, 0.02, &mut prng);
        }
        m
    }

    fn grads_like(model: &Model<f64>, fill: f64) -> Gradients<f64> {
        let mut g = Gradients::zeros_like(model);
        for t in g.tensors_mut() {
            t.data_mut().iter_mut().for_each(|x| *x = fill);
        }
        g
    }

    #[test]
    fn adamw_first_step_matches_hand_oracle() {
        // Scalar oracle at t=1: m-hat = v-hat = 1, so
        // w' = w - lr·(1/(1+eps) + λ·w) for a decayed weight with w=g=1.
        let mut m = tiny_model(1);
        let emb = m.find("embedding").unwrap();
        m.param_mut(emb).data_mut().iter_mut().for_each(|x| *x = 0.0);
        m.param_mut(emb).data_mut()[0] = 1.0;
        let mut grads = grads_like(&m, 0.0);
        grads.tensors_mut()[emb].data_mut()[0] = 1.0;
        let mut state = OptimState::new(&m, AdamHyper::default());
        adamw_step(&mut m, &grads, &mut state, 1e-3).unwrap();
        let got = m.param(emb).data()[0];
        let expect = 1.0 - 1e-3 * (1.0 / (1.0 + 1e-7) + 0.1);
        assert!((got - expect).abs() < 1e-15, "{got} vs {expect}");
        assert!((got - 0.9989000001).abs() < 1e-10);
        assert_eq!(state.t, 1);
        // Untouched zero-weight/zero-grad entries stay put.
        assert_eq!(m.param(emb).data()[1], 0.0);
    }

    #[test]
    fn zero_grad_zero_decay_leaves_weights() {
        let mut m = tiny_model(2);
        let before: Vec<Vec<f64>> = (0..m.n_params()).map(|i| m.param(i).data().to_vec()).collect();
        let grads = grads_like(&m, 0.0);
        let hyper = AdamHyper { weight_decay: 0.0, ..AdamHyper::default() };
        let mut state = OptimState::new(&m, hyper);
        adamw_step(&mut m, &grads, &mut state, 1e-3).unwrap();
        for (i, prev) in before.iter().enumerate() {
            assert_eq!(m.param(i).data(), prev.as_slice(), "{}", m.handle(i).path);
        }
    }

    #[test]
    fn modes_identical_without_decay_diverge_with_it() {
        let run = |mode: DecayMode, lambda: f64| {
            let mut m = tiny_model(3);
            let hyper = AdamHyper { mode, weight_decay: lambda, ..AdamHyper::default() };
            let mut state = OptimState::new(&m, hyper);
            let grads = grads_like(&m, 0.01);
            adamw_step(&mut m, &grads, &mut state, 1e-3).unwrap();
            let grads = grads_like(&m, -0.02);
            adamw_step(&mut m, &grads, &mut state, 1e-3).unwrap();
            m
        };
        let a = run(DecayMode::Decoupled, 0.0);
        let b = run(DecayMode::L2Coupled, 0.0);
        for i in 0..a.n_params() {
            assert_eq!(a.param(i).data(), b.param(i).data(), "λ=0 must be bit-identical");
        }
        let a = run(DecayMode::Decoupled, 0.1);
        let b = run(DecayMode::L2Coupled, 0.1);
        let emb = a.find("embedding").unwrap();
        assert_ne!(a.param(emb).data(), b.param(emb).data(), "modes must differ with λ>0");
    }

    #[test]
    fn norm_vectors_are_never_decayed() {
        let mut m = tiny_model(4);
        let g_idx = m.find("layers.1.input_norm.g").unwrap();
        m.param_mut(g_idx).data_mut().iter_mut().for_each(|x| *x = 1.0);
        let grads = grads_like(&m, 0.0);
        let mut state = OptimState::new(&m, AdamHyper::default());
        for _ in 0..5 {
            adamw_step(&mut m, &grads, &mut state, 1e-2).unwrap();
        }
        assert!(m.param(g_idx).data().iter().all(|&x| x == 1.0));
        // While a decayed role with zero grads shrinks.
        let emb = m.find("embedding").unwrap();
        let (_, std) = crate::tensor::moments(m.param(emb)).unwrap();
        assert!(std < 0.02, "embedding std should shrink under decay, got {std}");
    }

    #[test]
    fn clip_scales_only_above_threshold() {
        let m = tiny_model(5);
        let mut grads = grads_like(&m, 0.0);
        grads.tensors_mut()[0].data_mut()[0] = 3.0;
        grads.tensors_mut()[0].data_mut()[1] = 4.0;
        let norm = clip_global_norm(&m, &mut grads, 1.0).unwrap();
        assert!((norm - 5.0).abs() < 1e-12);
        assert!((grads.tensors()[0].data()[0] - 0.6).abs() < 1e-12);
        assert!((grads.tensors()[0].data()[1] - 0.8).abs() < 1e-12);
        // Below threshold: bit-unchanged.
        let mut grads = grads_like(&m, 0.0);
        grads.tensors_mut()[0].data_mut()[0] = 0.25;
        let before = grads.tensors()[0].data().to_vec();
        clip_global_norm(&m, &mut grads, 1.0).unwrap();
        assert_eq!(grads.tensors()[0].data(), before.as_slice());
    }

    #[test]
    fn clip_flags_non_finite_gradient_with_path() {
        let m = tiny_model(6);
        let mut grads = grads_like(&m, 0.0);
        let idx = m.find("layers.1.mlp.up").unwrap();
        grads.tensors_mut()[idx].data_mut()[3] = f64::INFINITY;
        let err = clip_global_norm(&m, &mut grads, 1.0).unwrap_err();
        match err {
            Error::NumericFailure { path } => assert_eq!(path, "layers.1.mlp.up"),
            other => panic!("unexpected error {other:?}"),
        }
    }

    proptest! {
        #[test]
        fn prop_post_clip_norm_is_min(fill in -0.3f64..0.3, max_norm in 0.01f64..2.0) {
            prop_assume!(fill.abs() > 1e-6);
            let m = tiny_model(7);
            let mut grads = grads_like(&m, fill);
            let pre = global_grad_norm(&grads);
            clip_global_norm(&m, &mut grads, max_norm).unwrap();
            let post = global_grad_norm(&grads);
            prop_assert!((post - pre.min(max_norm)).abs() < 1e-6);
        }

        #[test]
        fn prop_lr_bounded_by_schedule(tokens in 0u64..3_000_000) {
            let s = sched();
            let lr = s.lr_at(tokens);
            prop_assert!(lr >= 0.0 && lr <= s.max_lr + 1e-18);
            if tokens > s.warmup_tokens {
                prop_assert!(lr >= s.end_lr - 1e-18);
            }
        }
    }
}
