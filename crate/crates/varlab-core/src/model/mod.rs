//! Decoder-only transformer in two variants: LLaMA-style (RMSNorm, SiLU-GLU
//! MLP, rotary positions) and GPT-2-style (LayerNorm, GELU MLP, learned
//! positions), with residual-stream exposure for activation probing.

mod backward;
mod forward;
mod norms;

pub use backward::{backward, backward_scaled, Gradients};
pub use forward::{cross_entropy, forward, ForwardOutput};
pub use norms::{layernorm, rmsnorm};

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

/// Architecture variant.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Arch {
    /// RMSNorm + SiLU-GLU MLP + rotary positions, no biases anywhere.
    GluLlama,
    /// LayerNorm (with β) + GELU MLP + learned absolute positions, no linear
    /// biases.
    Gpt2NonGlu,
}

impl Arch {
    /// Stable textual name.
    pub fn as_str(self) -> &'static str {
        match self {
            Arch::GluLlama => "glu_llama",
            Arch::Gpt2NonGlu => "gpt2_nonglu",
        }
    }

    /// Parses the textual name back.
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "glu_llama" => Ok(Arch::GluLlama),
            "gpt2_nonglu" => Ok(Arch::Gpt2NonGlu),
            other => Err(Error::invalid(format_args!("unknown arch {other:?}"))),
        }
    }
}

/// Functional role of a parameter; the seven 2-D decoder roles form the
/// rescaling/init target set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Role {
    AttnQ,
    AttnK,
    AttnV,
    AttnO,
    MlpGate,
    MlpUp,
    MlpDown,
    InputNorm,
    PostAttnNorm,
    FinalNorm,
    Embedding,
    LmHead,
}

impl Role {
    /// Every role, in canonical order.
    pub const ALL: [Role; 12] = [
        Role::AttnQ,
        Role::AttnK,
        Role::AttnV,
        Role::AttnO,
        Role::MlpGate,
        Role::MlpUp,
        Role::MlpDown,
        Role::InputNorm,
        Role::PostAttnNorm,
        Role::FinalNorm,
        Role::Embedding,
        Role::LmHead,
    ];

    /// The seven 2-D decoder-layer roles targeted by init schemes and
    /// rescaling strategies.
    pub const DECODER_2D: [Role; 7] = [
        Role::AttnQ,
        Role::AttnK,
        Role::AttnV,
        Role::AttnO,
        Role::MlpGate,
        Role::MlpUp,
        Role::MlpDown,
    ];

    /// Stable textual name.
    pub fn as_str(self) -> &'static str {
        match self {
            Role::AttnQ => "attn_q",
            Role::AttnK => "attn_k",
            Role::AttnV => "attn_v",
            Role::AttnO => "attn_o",
            Role::MlpGate => "mlp_gate",
            Role::MlpUp => "mlp_up",
            Role::MlpDown => "mlp_down",
            Role::InputNorm => "input_norm",
            Role::PostAttnNorm => "post_attn_norm",
            Role::FinalNorm => "final_norm",
            Role::Embedding => "embedding",
            Role::LmHead => "lm_head",
        }
    }

    /// Parses the textual name back.
    pub fn parse(s: &str) -> Result<Self> {
        Role::ALL
            .iter()
            .copied()
            .find(|r| r.as_str() == s)
            .ok_or_else(|| Error::invalid(format_args!("unknown role {s:?}")))
    }

    /// True for the seven decoder-layer matrix roles.
    pub fn is_decoder_2d(self) -> bool {
        (self as usize) < 7
    }
}

impl core::fmt::Display for Role {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Small set of [`Role`]s, used as init/rescale target filters.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RoleSet(u16);

impl RoleSet {
    /// No roles.
    pub fn empty() -> Self {
        RoleSet(0)
    }

    /// The default target set: the seven 2-D decoder roles.
    pub fn decoder_2d() -> Self {
        let mut s = RoleSet::empty();
        for r in Role::DECODER_2D {
            s.insert(r);
        }
        s
    }

    /// Set holding exactly `role`.
    pub fn only(role: Role) -> Self {
        let mut s = RoleSet::empty();
        s.insert(role);
        s
    }

    /// Adds a role.
    pub fn insert(&mut self, role: Role) {
        self.0 |= 1 << role as u16;
    }

    /// Membership test.
    pub fn contains(&self, role: Role) -> bool {
        self.0 & (1 << role as u16) != 0
    }

    /// True when no role is present.
    pub fn is_empty(&self) -> bool {
        self.0 == 0
    }

    /// Roles present, in canonical order.
    pub fn iter(&self) -> impl Iterator<Item = Role> + '_ {
        Role::ALL.iter().copied().filter(|&r| self.contains(r))
    }

    /// Parses a comma-separated role list, e.g. `"attn_o,mlp_down"`.
    pub fn parse(s: &str) -> Result<Self> {
        let mut set = RoleSet::empty();
        for part in s.split(',') {
            let part = part.trim();
            if !part.is_empty() {
                set.insert(Role::parse(part)?);
            }
        }
        Ok(set)
    }
}

impl core::fmt::Display for RoleSet {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        let mut first = true;
        for r in self.iter() {
            if !first {
                f.write_str(",")?;
            }
            f.write_str(r.as_str())?;
            first = false;
        }
        Ok(())
    }
}

/// Structural hyperparameters of a model.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub arch: Arch,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub ctx_len: usize,
    /// Normalization ε.
    pub norm_eps: f64,
    /// Rotary base frequency (glu_llama only; ignored by gpt2_nonglu).
    pub rope_theta: f64,
}

impl ModelConfig {
    /// The full-scale reference configuration this laboratory scales down
    /// from: d_model 2048, d_ff 5440, 16 layers, 16 heads, vocab 65536,
    /// context 2048, ε 1e-5.
    pub fn reference_full_scale() -> Self {
        ModelConfig {
            arch: Arch::GluLlama,
            d_model: 2048,
            n_layers: 16,
            n_heads: 16,
            d_ff: 5440,
            vocab_size: 65536,
            ctx_len: 2048,
            norm_eps: 1e-5,
            rope_theta: 10000.0,
        }
    }

    /// Checks structural invariants.
    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0
            || self.n_layers == 0
            || self.n_heads == 0
            || self.d_ff == 0
            || self.vocab_size < 2
            || self.ctx_len < 2
        {
            return Err(Error::invalid(
                "all dims must be positive (vocab_size >= 2, ctx_len >= 2)",
            ));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::invalid(format_args!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if !(self.norm_eps > 0.0) {
            return Err(Error::invalid("norm_eps must be > 0"));
        }
        if self.arch == Arch::GluLlama {
            if !(self.rope_theta > 0.0) {
                return Err(Error::invalid("rope_theta must be > 0"));
            }
            if self.head_dim() % 2 != 0 {
                return Err(Error::invalid(format_args!(
                    "rotary positions need an even head dim, got {}",
                    self.head_dim()
                )));
            }
        }
        Ok(())
    }

    /// Per-head width.
    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// Total parameter count for this configuration.
    pub fn param_count(&self) -> u64 {
        build_handles(self)
            .iter()
            .map(|h| h.shape.iter().product::<usize>() as u64)
            .sum()
    }
}

/// Identity, shape, and recorded init std of one parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamHandle {
    /// Dotted path, e.g. `layers.3.mlp.down`.
    pub path: String,
    /// 1-based decoder layer index; 0 for parameters outside the stack.
    pub layer_index: usize,
    pub role: Role,
    pub shape: Vec<usize>,
    /// Analytic std of the init distribution, recorded by `apply_init`
    /// (bound/√3 for uniform schemes) and never touched by training.
    pub init_std_effective: f64,
}

/// Parameter indices for one decoder layer. Options are `None` when the
/// architecture lacks that parameter.
#[derive(Debug, Clone)]
pub(crate) struct LayerSlots {
    pub q: usize,
    pub k: usize,
    pub v: usize,
    pub o: usize,
    pub gate: Option<usize>,
    pub up: usize,
    pub down: usize,
    pub in_g: usize,
    pub in_b: Option<usize>,
    pub post_g: usize,
    pub post_b: Option<usize>,
}

/// Parameter indices outside the decoder stack.
#[derive(Debug, Clone)]
pub(crate) struct Slots {
    pub embedding: usize,
    pub pos_embedding: Option<usize>,
    pub final_g: usize,
    pub final_b: Option<usize>,
    pub lm_head: usize,
    pub layers: Vec<LayerSlots>,
}

fn describe(config: &ModelConfig) -> (Vec<ParamHandle>, Slots) {
    let d = config.d_model;
    let f = config.d_ff;
    let gpt2 = config.arch == Arch::Gpt2NonGlu;
    let mut handles = Vec::new();
    let mut push = |path: String, layer: usize, role: Role, shape: &[usize]| -> usize {
        handles.push(ParamHandle {
            path,
            layer_index: layer,
            role,
            shape: shape.to_vec(),
            init_std_effective: 0.0,
        });
        handles.len() - 1
    };

    let embedding = push("embedding".into(), 0, Role::Embedding, &[config.vocab_size, d]);
    let pos_embedding =
        gpt2.then(|| push("pos_embedding".into(), 0, Role::Embedding, &[config.ctx_len, d]));
    let mut layers = Vec::with_capacity(config.n_layers);
    for l in 1..=config.n_layers {
        let p = |leaf: &str| format!("layers.{l}.{leaf}");
        layers.push(LayerSlots {
            q: push(p("attn.q"), l, Role::AttnQ, &[d, d]),
            k: push(p("attn.k"), l, Role::AttnK, &[d, d]),
            v: push(p("attn.v"), l, Role::AttnV, &[d, d]),
            o: push(p("attn.o"), l, Role::AttnO, &[d, d]),
            gate: (!gpt2).then(|| push(p("mlp.gate"), l, Role::MlpGate, &[d, f])),
            up: push(p("mlp.up"), l, Role::MlpUp, &[d, f]),
            down: push(p("mlp.down"), l, Role::MlpDown, &[f, d]),
            in_g: push(p("input_norm.g"), l, Role::InputNorm, &[d]),
            in_b: gpt2.then(|| push(p("input_norm.b"), l, Role::InputNorm, &[d])),
            post_g: push(p("post_attn_norm.g"), l, Role::PostAttnNorm, &[d]),
            post_b: gpt2.then(|| push(p("post_attn_norm.b"), l, Role::PostAttnNorm, &[d])),
        });
    }
    let final_g = push("final_norm.g".into(), 0, Role::FinalNorm, &[d]);
    let final_b = gpt2.then(|| push("final_norm.b".into(), 0, Role::FinalNorm, &[d]));
    let lm_head = push("lm_head".into(), 0, Role::LmHead, &[d, config.vocab_size]);

    (handles, Slots { embedding, pos_embedding, final_g, final_b, lm_head, layers })
}

/// Handles for every parameter of `config`, in canonical (stable) order:
/// embeddings, then layers 1..N with a fixed within-layer role order, then
/// final norm and lm_head.
pub fn build_handles(config: &ModelConfig) -> Vec<ParamHandle> {
    describe(config).0
}

/// A model: config, parameter tensors, and their handles, in matching order.
#[derive(Debug, Clone)]
pub struct Model<E: Element> {
    config: ModelConfig,
    handles: Vec<ParamHandle>,
    params: Vec<Tensor<E>>,
    slots: Slots,
}

impl<E: Element> Model<E> {
    /// Allocates a model with all parameters zeroed.
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let (handles, slots) = describe(&config);
        let params = handles.iter().map(|h| Tensor::zeros(&h.shape)).collect();
        Ok(Model { config, handles, params, slots })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// All handles in canonical order.
    pub fn handles(&self) -> &[ParamHandle] {
        &self.handles
    }

    /// Handle at `index`.
    pub fn handle(&self, index: usize) -> &ParamHandle {
        &self.handles[index]
    }

    /// Number of parameter tensors.
    pub fn n_params(&self) -> usize {
        self.params.len()
    }

    /// Parameter tensor at `index` (same order as [`Model::handles`]).
    pub fn param(&self, index: usize) -> &Tensor<E> {
        &self.params[index]
    }

    /// Mutable parameter tensor at `index`.
    pub fn param_mut(&mut self, index: usize) -> &mut Tensor<E> {
        &mut self.params[index]
    }

    /// Index of the parameter at `path`.
    pub fn find(&self, path: &str) -> Option<usize> {
        self.handles.iter().position(|h| h.path == path)
    }

    /// Records the analytic init std for handle `index`; called by init and
    /// checkpoint restore only.
    pub fn set_init_std(&mut self, index: usize, std: f64) {
        self.handles[index].init_std_effective = std;
    }

    /// Handles whose role is in `filter`, in canonical order (layer-major,
    /// fixed role order). Pass [`RoleSet::decoder_2d`] for the default
    /// init/rescale target set.
    pub fn param_iter(&self, filter: RoleSet) -> Vec<&ParamHandle> {
        self.handles.iter().filter(|h| filter.contains(h.role)).collect()
    }

    /// Indices of handles whose role is in `filter`, in canonical order.
    pub fn param_indices(&self, filter: RoleSet) -> Vec<usize> {
        (0..self.handles.len()).filter(|&i| filter.contains(self.handles[i].role)).collect()
    }

    pub(crate) fn slots(&self) -> &Slots {
        &self.slots
    }
}
