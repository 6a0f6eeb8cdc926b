//! Forward pass: embedding, decoder stack, final norm, logits — with every
//! intermediate the backward pass needs captured in a cache.

use super::norms::{layernorm_rows, rmsnorm_rows};
use super::{Arch, Model};
use crate::error::{Error, Result};
use crate::tensor::{gemm_nn, gemm_nt, softmax_in_place, Element, Tensor};
use alloc::vec;
use alloc::vec::Vec;

const GELU_A: f64 = 0.044715;
const GELU_C: f64 = 0.7978845608028654; // sqrt(2/pi)

/// σ(x) in the element's own precision (float64 training-check runs keep
/// full precision; float32 runs use the cheaper `expf`).
pub(crate) fn sigmoid<E: Element>(x: E) -> E {
    E::ONE / (E::ONE + (-x).exp())
}

/// SiLU (swish): x·σ(x).
pub(crate) fn silu<E: Element>(x: E) -> E {
    x * sigmoid(x)
}

/// GELU, tanh approximation (the GPT-2 convention).
pub(crate) fn gelu<E: Element>(x: E) -> E {
    let half = E::from_f64(0.5);
    let c = E::from_f64(GELU_C);
    let a = E::from_f64(GELU_A);
    half * x * (E::ONE + (c * (x + a * x * x * x)).tanh())
}

/// d/dx of the tanh-approximated GELU.
pub(crate) fn gelu_prime<E: Element>(x: E) -> E {
    let half = E::from_f64(0.5);
    let c = E::from_f64(GELU_C);
    let a = E::from_f64(GELU_A);
    let three = E::from_f64(3.0);
    let t = (c * (x + a * x * x * x)).tanh();
    half * (E::ONE + t) + half * x * (E::ONE - t * t) * c * (E::ONE + three * a * x * x)
}

/// Copies one head's column block (`col..col+dh`) of batch `b` out of an
/// interleaved [batch·seq, d] buffer into a contiguous [seq, dh] tile.
pub(crate) fn gather_head<E: Element>(
    src: &[E],
    b: usize,
    seq: usize,
    d: usize,
    col: usize,
    dh: usize,
    dst: &mut [E],
) {
    for t in 0..seq {
        dst[t * dh..(t + 1) * dh].copy_from_slice(&src[(b * seq + t) * d + col..][..dh]);
    }
}

/// Inverse of [`gather_head`]: writes a contiguous [seq, dh] tile back into
/// one head's column block of an interleaved [batch·seq, d] buffer.
pub(crate) fn scatter_head<E: Element>(
    src: &[E],
    b: usize,
    seq: usize,
    d: usize,
    col: usize,
    dh: usize,
    dst: &mut [E],
) {
    for t in 0..seq {
        dst[(b * seq + t) * d + col..][..dh].copy_from_slice(&src[t * dh..(t + 1) * dh]);
    }
}

/// Rotary cos/sin tables for positions 0..seq, laid out [seq, head_dim/2].
pub(crate) struct RopeTable<E> {
    pub cos: Vec<E>,
    pub sin: Vec<E>,
    pub half: usize,
}

impl<E: Element> RopeTable<E> {
    pub(crate) fn new(seq: usize, head_dim: usize, base: f64) -> Self {
        let half = head_dim / 2;
        let mut cos = Vec::with_capacity(seq * half);
        let mut sin = Vec::with_capacity(seq * half);
        for t in 0..seq {
            for i in 0..half {
                let freq = libm::pow(base, -2.0 * i as f64 / head_dim as f64);
                let angle = t as f64 * freq;
                cos.push(E::from_f64(libm::cos(angle)));
                sin.push(E::from_f64(libm::sin(angle)));
            }
        }
        RopeTable { cos, sin, half }
    }
}

/// Rotates q or k in place, pairing channel i with i+half within each head.
pub(crate) fn rope_rotate<E: Element>(
    x: &mut [E],
    rows: usize,
    seq: usize,
    d: usize,
    n_heads: usize,
    table: &RopeTable<E>,
) {
    let dh = d / n_heads;
    let half = table.half;
    for r in 0..rows {
        let t = r % seq;
        let cs = &table.cos[t * half..][..half];
        let sn = &table.sin[t * half..][..half];
        let row = &mut x[r * d..][..d];
        for h in 0..n_heads {
            let hd = &mut row[h * dh..][..dh];
            for i in 0..half {
                let (a, b) = (hd[i], hd[i + half]);
                hd[i] = a * cs[i] - b * sn[i];
                hd[i + half] = a * sn[i] + b * cs[i];
            }
        }
    }
}

/// Inverse of [`rope_rotate`] (the transpose rotation), used on gradients.
pub(crate) fn rope_unrotate<E: Element>(
    x: &mut [E],
    rows: usize,
    seq: usize,
    d: usize,
    n_heads: usize,
    table: &RopeTable<E>,
) {
    let dh = d / n_heads;
    let half = table.half;
    for r in 0..rows {
        let t = r % seq;
        let cs = &table.cos[t * half..][..half];
        let sn = &table.sin[t * half..][..half];
        let row = &mut x[r * d..][..d];
        for h in 0..n_heads {
            let hd = &mut row[h * dh..][..dh];
            for i in 0..half {
                let (a, b) = (hd[i], hd[i + half]);
                hd[i] = a * cs[i] + b * sn[i];
                hd[i + half] = -a * sn[i] + b * cs[i];
            }
        }
    }
}

/// Everything the backward pass reuses from one forward evaluation.
pub(crate) struct LayerCache<E> {
    /// Per-row 1/RMS (glu) or 1/√(σ²+ε) (gpt2) of the first norm.
    pub rinv1: Vec<E>,
    pub normed1: Vec<E>,
    /// Standardized rows of the first norm; empty for rmsnorm.
    pub xhat1: Vec<E>,
    /// Projections, [rows·d]; q/k are post-rotation under glu_llama.
    pub q: Vec<E>,
    pub k: Vec<E>,
    pub v: Vec<E>,
    /// Attention probabilities, [batch·heads·seq·seq], causal upper part zero.
    pub probs: Vec<E>,
    /// Head-mixed context before the output projection, [rows·d].
    pub ctx: Vec<E>,
    /// Residual stream between attention and MLP, [rows·d].
    pub x_mid: Vec<E>,
    pub rinv2: Vec<E>,
    pub normed2: Vec<E>,
    pub xhat2: Vec<E>,
    /// Gate pre-activation (glu only), [rows·d_ff].
    pub gate_pre: Vec<E>,
    /// Up/fc pre-activation, [rows·d_ff].
    pub up_pre: Vec<E>,
    /// MLP activation entering the down projection, [rows·d_ff].
    pub act: Vec<E>,
}

pub(crate) struct Cache<E: Element> {
    /// Residual stream snapshots: `streams[0]` is the embedding output,
    /// `streams[l]` the output of layer l (1-based), each [rows·d].
    pub streams: Vec<Vec<E>>,
    pub layers: Vec<LayerCache<E>>,
    pub rinv_f: Vec<E>,
    pub normed_f: Vec<E>,
    pub xhat_f: Vec<E>,
    /// [rows, vocab].
    pub logits: Tensor<E>,
}

fn validate_tokens(vocab: usize, ids: &[u32], what: &str) -> Result<()> {
    for &id in ids {
        if id as usize >= vocab {
            return Err(Error::invalid(format_args!(
                "{what} id {id} out of range for vocab_size {vocab}"
            )));
        }
    }
    Ok(())
}

/// Runs the full forward pass, returning the cache (logits included).
pub(crate) fn forward_cached<E: Element>(
    model: &Model<E>,
    tokens: &[u32],
    batch: usize,
    seq: usize,
) -> Result<Cache<E>> {
    let cfg = model.config();
    if batch == 0 || seq == 0 || tokens.len() != batch * seq {
        return Err(Error::invalid(format_args!(
            "token matrix [{batch}, {seq}] does not match {} ids",
            tokens.len()
        )));
    }
    if seq > cfg.ctx_len {
        return Err(Error::invalid(format_args!(
            "sequence length {seq} exceeds ctx_len {}",
            cfg.ctx_len
        )));
    }
    validate_tokens(cfg.vocab_size, tokens, "token")?;

    let d = cfg.d_model;
    let heads = cfg.n_heads;
    let dh = cfg.head_dim();
    let ff = cfg.d_ff;
    let rows = batch * seq;
    let glu = cfg.arch == Arch::GluLlama;
    let slots = model.slots();

    // Token embedding (plus learned positions for gpt2).
    let emb = model.param(slots.embedding).data();
    let mut x = vec![E::ZERO; rows * d];
    for (r, &id) in tokens.iter().enumerate() {
        x[r * d..(r + 1) * d].copy_from_slice(&emb[id as usize * d..(id as usize + 1) * d]);
    }
    if let Some(pos_idx) = slots.pos_embedding {
        let wpe = model.param(pos_idx).data();
        for r in 0..rows {
            let t = r % seq;
            for j in 0..d {
                x[r * d + j] += wpe[t * d + j];
            }
        }
    }

    let rope = glu.then(|| RopeTable::<E>::new(seq, dh, cfg.rope_theta));
    let scale = E::from_f64(1.0 / libm::sqrt(dh as f64));

    let mut streams = Vec::with_capacity(cfg.n_layers + 1);
    streams.push(x);
    let mut layer_caches = Vec::with_capacity(cfg.n_layers);

    // Per-head work tiles, reused across layers.
    let mut qt = vec![E::ZERO; seq * dh];
    let mut kt = vec![E::ZERO; seq * dh];
    let mut vt = vec![E::ZERO; seq * dh];
    let mut ct = vec![E::ZERO; seq * dh];

    for sl in &slots.layers {
        let x_in = streams.last().unwrap();
        let mut lc = LayerCache {
            rinv1: vec![E::ZERO; rows],
            normed1: vec![E::ZERO; rows * d],
            xhat1: if glu { Vec::new() } else { vec![E::ZERO; rows * d] },
            q: vec![E::ZERO; rows * d],
            k: vec![E::ZERO; rows * d],
            v: vec![E::ZERO; rows * d],
            probs: vec![E::ZERO; batch * heads * seq * seq],
            ctx: vec![E::ZERO; rows * d],
            x_mid: vec![E::ZERO; rows * d],
            rinv2: vec![E::ZERO; rows],
            normed2: vec![E::ZERO; rows * d],
            xhat2: if glu { Vec::new() } else { vec![E::ZERO; rows * d] },
            gate_pre: if glu { vec![E::ZERO; rows * ff] } else { Vec::new() },
            up_pre: vec![E::ZERO; rows * ff],
            act: vec![E::ZERO; rows * ff],
        };

        // First norm.
        if glu {
            rmsnorm_rows(
                x_in,
                d,
                model.param(sl.in_g).data(),
                cfg.norm_eps,
                &mut lc.normed1,
                &mut lc.rinv1,
            );
        } else {
            layernorm_rows(
                x_in,
                d,
                model.param(sl.in_g).data(),
                model.param(sl.in_b.unwrap()).data(),
                cfg.norm_eps,
                &mut lc.normed1,
                &mut lc.xhat1,
                &mut lc.rinv1,
            );
        }

        // Projections.
        gemm_nn(rows, d, d, &lc.normed1, model.param(sl.q).data(), &mut lc.q);
        gemm_nn(rows, d, d, &lc.normed1, model.param(sl.k).data(), &mut lc.k);
        gemm_nn(rows, d, d, &lc.normed1, model.param(sl.v).data(), &mut lc.v);
        if let Some(table) = &rope {
            rope_rotate(&mut lc.q, rows, seq, d, heads, table);
            rope_rotate(&mut lc.k, rows, seq, d, heads, table);
        }

        // Causal attention, one (batch, head) pair at a time. Each head's
        // strided column block is gathered into a contiguous [seq, dh] tile so
        // the score and context products can run through the matmul kernels;
        // the score block lands directly in this head's contiguous slice of
        // the probability cache.
        for b in 0..batch {
            for h in 0..heads {
                let col = h * dh;
                gather_head(&lc.q, b, seq, d, col, dh, &mut qt);
                gather_head(&lc.k, b, seq, d, col, dh, &mut kt);
                gather_head(&lc.v, b, seq, d, col, dh, &mut vt);
                let pb = &mut lc.probs[(b * heads + h) * seq * seq..][..seq * seq];
                gemm_nt(seq, dh, seq, &qt, &kt, pb);
                for t in 0..seq {
                    let p_row = &mut pb[t * seq..][..seq];
                    for p in &mut p_row[..=t] {
                        *p *= scale;
                    }
                    softmax_in_place(&mut p_row[..=t]);
                    // Future positions stay exactly zero so the context
                    // product below can run over the full square block.
                    for p in &mut p_row[t + 1..] {
                        *p = E::ZERO;
                    }
                }
                ct.fill(E::ZERO);
                gemm_nn(seq, seq, dh, pb, &vt, &mut ct);
                scatter_head(&ct, b, seq, d, col, dh, &mut lc.ctx);
            }
        }

        // Output projection + first residual add.
        let mut attn_out = vec![E::ZERO; rows * d];
        gemm_nn(rows, d, d, &lc.ctx, model.param(sl.o).data(), &mut attn_out);
        for ((xm, &xi), &ao) in lc.x_mid.iter_mut().zip(x_in).zip(&attn_out) {
            *xm = xi + ao;
        }

        // Second norm.
        if glu {
            rmsnorm_rows(
                &lc.x_mid,
                d,
                model.param(sl.post_g).data(),
                cfg.norm_eps,
                &mut lc.normed2,
                &mut lc.rinv2,
            );
        } else {
            layernorm_rows(
                &lc.x_mid,
                d,
                model.param(sl.post_g).data(),
                model.param(sl.post_b.unwrap()).data(),
                cfg.norm_eps,
                &mut lc.normed2,
                &mut lc.xhat2,
                &mut lc.rinv2,
            );
        }

        // MLP.
        if let Some(gate_idx) = sl.gate {
            gemm_nn(rows, d, ff, &lc.normed2, model.param(gate_idx).data(), &mut lc.gate_pre);
            gemm_nn(rows, d, ff, &lc.normed2, model.param(sl.up).data(), &mut lc.up_pre);
            for ((a, &g), &u) in lc.act.iter_mut().zip(&lc.gate_pre).zip(&lc.up_pre) {
                *a = silu(g) * u;
            }
        } else {
            gemm_nn(rows, d, ff, &lc.normed2, model.param(sl.up).data(), &mut lc.up_pre);
            for (a, &u) in lc.act.iter_mut().zip(&lc.up_pre) {
                *a = gelu(u);
            }
        }
        let mut mlp_out = vec![E::ZERO; rows * d];
        gemm_nn(rows, ff, d, &lc.act, model.param(sl.down).data(), &mut mlp_out);

        // Second residual add -> this layer's residual-stream output.
        let mut x_next = vec![E::ZERO; rows * d];
        for ((xn, &xm), &mo) in x_next.iter_mut().zip(&lc.x_mid).zip(&mlp_out) {
            *xn = xm + mo;
        }
        streams.push(x_next);
        layer_caches.push(lc);
    }

    // Final norm + head.
    let x_last = streams.last().unwrap();
    let mut rinv_f = vec![E::ZERO; rows];
    let mut normed_f = vec![E::ZERO; rows * d];
    let mut xhat_f = if glu { Vec::new() } else { vec![E::ZERO; rows * d] };
    if glu {
        rmsnorm_rows(
            x_last,
            d,
            model.param(slots.final_g).data(),
            cfg.norm_eps,
            &mut normed_f,
            &mut rinv_f,
        );
    } else {
        layernorm_rows(
            x_last,
            d,
            model.param(slots.final_g).data(),
            model.param(slots.final_b.unwrap()).data(),
            cfg.norm_eps,
            &mut normed_f,
            &mut xhat_f,
            &mut rinv_f,
        );
    }
    let mut logits = Tensor::zeros(&[rows, cfg.vocab_size]);
    gemm_nn(
        rows,
        d,
        cfg.vocab_size,
        &normed_f,
        model.param(slots.lm_head).data(),
        logits.data_mut(),
    );

    Ok(Cache {
        streams,
        layers: layer_caches,
        rinv_f,
        normed_f,
        xhat_f,
        logits,
    })
}

/// Logits and per-layer residual-stream outputs of one forward evaluation.
pub struct ForwardOutput<E: Element> {
    /// [batch, seq, vocab].
    pub logits: Tensor<E>,
    /// `residuals[l-1]` is the stream after layer l, [batch, seq, d_model].
    pub residuals: Vec<Tensor<E>>,
}

/// Evaluates the model on a [batch, seq] token matrix (flattened row-major).
pub fn forward<E: Element>(
    model: &Model<E>,
    tokens: &[u32],
    batch: usize,
    seq: usize,
) -> Result<ForwardOutput<E>> {
    let d = model.config().d_model;
    let vocab = model.config().vocab_size;
    let cache = forward_cached(model, tokens, batch, seq)?;
    let logits = cache.logits.clone().reshape(&[batch, seq, vocab])?;
    let residuals = cache.streams[1..]
        .iter()
        .map(|s| Tensor::from_vec(&[batch, seq, d], s.clone()).expect("stream volume"))
        .collect();
    Ok(ForwardOutput { logits, residuals })
}

/// Mean negative log-likelihood of `targets` under row-wise softmax of
/// `logits` ([rows, vocab] or [batch, seq, vocab]).
pub fn cross_entropy<E: Element>(logits: &Tensor<E>, targets: &[u32]) -> Result<f64> {
    let vocab = *logits
        .shape()
        .last()
        .ok_or_else(|| Error::invalid("cross_entropy: scalar logits"))?;
    if vocab == 0 || logits.len() == 0 {
        return Err(Error::degenerate("cross_entropy of empty logits"));
    }
    let rows = logits.len() / vocab;
    if targets.len() != rows {
        return Err(Error::invalid(format_args!(
            "cross_entropy: {rows} logit rows vs {} targets",
            targets.len()
        )));
    }
    validate_tokens(vocab, targets, "target")?;
    let mut total = 0.0f64;
    for (r, &target) in targets.iter().enumerate() {
        let row = &logits.data()[r * vocab..(r + 1) * vocab];
        let mut max = row[0];
        for &x in row {
            if !x.is_finite() {
                return Err(Error::numeric("logits"));
            }
            max = max.maxf(x);
        }
        let mut sum = 0.0f64;
        for &x in row {
            sum += (x - max).exp().to_f64();
        }
        total += libm::log(sum) - (row[target as usize] - max).to_f64();
    }
    Ok(total / rows as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ModelConfig, Role};
    use crate::rng::{fill_gaussian, Prng};

    fn tiny(arch: Arch) -> ModelConfig {
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

    fn randomized(arch: Arch, seed: u64) -> Model<f64> {
        let mut m = Model::new(tiny(arch)).unwrap();
        let mut prng = Prng::new(seed);
        for i in 0..m.n_params() {
            let role = m.handle(i).role;
            let is_norm =
                matches!(role, Role::InputNorm | Role::PostAttnNorm | Role::FinalNorm);
            if is_norm {
                let gamma = m.handle(i).path.ends_with(".g");
                let fill = if gamma { 1.0 } else { 0.0 };
                m.param_mut(i).data_mut().iter_mut().for_each(|x| *x = fill);
            } else {
                fill_gaussian(m.param_mut(i).data_mut(), 0.0, 0.05, &mut prng);
            }
        }
        m
    }

    fn token_ramp(n: usize, vocab: u32) -> Vec<u32> {
        (0..n).map(|i| (i as u32 * 7 + 3) % vocab).collect()
    }

    #[test]
    fn output_shapes_match_contract() {
        for arch in [Arch::GluLlama, Arch::Gpt2NonGlu] {
            let m = randomized(arch, 1);
            let toks = token_ramp(2 * 8, 32);
            let out = forward(&m, &toks, 2, 8).unwrap();
            assert_eq!(out.logits.shape(), &[2, 8, 32]);
            assert_eq!(out.residuals.len(), 2);
            assert_eq!(out.residuals[0].shape(), &[2, 8, 16]);
        }
    }

    #[test]
    fn zero_decoder_weights_pass_embedding_through() {
        for arch in [Arch::GluLlama, Arch::Gpt2NonGlu] {
            let mut m: Model<f64> = Model::new(tiny(arch)).unwrap();
            let mut prng = Prng::new(2);
            // Embeddings random, decoder weights zero, norms gamma=1.
            let slots_emb = m.find("embedding").unwrap();
            fill_gaussian(m.param_mut(slots_emb).data_mut(), 0.0, 1.0, &mut prng);
            if let Some(p) = m.find("pos_embedding") {
                fill_gaussian(m.param_mut(p).data_mut(), 0.0, 1.0, &mut prng);
            }
            for i in 0..m.n_params() {
                if m.handle(i).path.ends_with(".g") {
                    m.param_mut(i).data_mut().iter_mut().for_each(|x| *x = 1.0);
                }
            }
            let toks = token_ramp(8, 32);
            let out = forward(&m, &toks, 1, 8).unwrap();
            // Every residual equals the (position-augmented) embedding stream.
            let cache = forward_cached(&m, &toks, 1, 8).unwrap();
            for res in &out.residuals {
                assert_eq!(res.data(), cache.streams[0].as_slice());
            }
        }
    }

    #[test]
    fn causality_perturbing_last_token_keeps_earlier_logits() {
        for arch in [Arch::GluLlama, Arch::Gpt2NonGlu] {
            let m = randomized(arch, 3);
            let mut toks = token_ramp(8, 32);
            let base = forward(&m, &toks, 1, 8).unwrap();
            toks[7] = (toks[7] + 11) % 32;
            let bumped = forward(&m, &toks, 1, 8).unwrap();
            let v = 32;
            // Positions 0..6 bit-identical; position 7 must differ.
            assert_eq!(base.logits.data()[..7 * v], bumped.logits.data()[..7 * v]);
            assert_ne!(base.logits.data()[7 * v..], bumped.logits.data()[7 * v..]);
            for (a, b) in base.residuals.iter().zip(&bumped.residuals) {
                assert_eq!(a.data()[..7 * 16], b.data()[..7 * 16]);
            }
        }
    }

    #[test]
    fn rejects_out_of_range_token() {
        let m = randomized(Arch::GluLlama, 4);
        let mut toks = token_ramp(8, 32);
        toks[3] = 32;
        assert!(matches!(forward(&m, &toks, 1, 8), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn cross_entropy_uniform_logits_is_ln_vocab() {
        let logits: Tensor<f64> = Tensor::zeros(&[4, 256]);
        let loss = cross_entropy(&logits, &[0, 10, 200, 255]).unwrap();
        assert!((loss - libm::log(256.0)).abs() < 1e-12);
        let two: Tensor<f64> = Tensor::zeros(&[1, 2]);
        assert!((cross_entropy(&two, &[0]).unwrap() - libm::log(2.0)).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_confident_correct_is_tiny() {
        let mut logits: Tensor<f64> = Tensor::zeros(&[1, 32]);
        logits.data_mut()[5] = 30.0;
        let loss = cross_entropy(&logits, &[5]).unwrap();
        assert!(loss < 1e-9, "loss {loss}");
    }

    #[test]
    fn cross_entropy_flags_non_finite_logits() {
        let mut logits: Tensor<f64> = Tensor::zeros(&[1, 4]);
        logits.data_mut()[2] = f64::NAN;
        assert!(matches!(
            cross_entropy(&logits, &[0]),
            Err(Error::NumericFailure { .. })
        ));
    }

    #[test]
    fn rope_rotation_roundtrips() {
        let table = RopeTable::<f64>::new(8, 8, 10000.0);
        let mut prng = Prng::new(9);
        let mut x = vec![0.0f64; 8 * 16];
        fill_gaussian(&mut x, 0.0, 1.0, &mut prng);
        let orig = x.clone();
        rope_rotate(&mut x, 8, 8, 16, 2, &table);
        assert_ne!(x, orig);
        rope_unrotate(&mut x, 8, 8, 16, 2, &table);
        for (a, b) in x.iter().zip(&orig) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn rope_preserves_norms() {
        // Rotations are isometries: per-head vector norms must not change.
        let table = RopeTable::<f64>::new(4, 8, 10000.0);
        let mut x: Vec<f64> = (0..4 * 16).map(|i| (i as f64).sin()).collect();
        let norms_before: Vec<f64> = x.chunks(8).map(|c| c.iter().map(|v| v * v).sum()).collect();
        rope_rotate(&mut x, 4, 4, 16, 2, &table);
        let norms_after: Vec<f64> = x.chunks(8).map(|c| c.iter().map(|v| v * v).sum()).collect();
        for (a, b) in norms_before.iter().zip(&norms_after) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn position_zero_rope_is_identity() {
        let table = RopeTable::<f64>::new(1, 8, 10000.0);
        let mut x: Vec<f64> = (0..16).map(|i| i as f64).collect();
        let orig = x.clone();
        rope_rotate(&mut x, 1, 1, 16, 2, &table);
        for (a, b) in x.iter().zip(&orig) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn gpt2_uses_positions_glu_does_not_distinguish_by_table() {
        // Two identical tokens at different positions produce different
        // residual rows in both archs (positions enter via wpe or rope).
        for arch in [Arch::GluLlama, Arch::Gpt2NonGlu] {
            let m = randomized(arch, 6);
            let toks = vec![5u32; 8];
            let out = forward(&m, &toks, 1, 8).unwrap();
            let row0 = &out.logits.data()[..32];
            let row3 = &out.logits.data()[3 * 32..4 * 32];
            assert_ne!(row0, row3, "{arch:?} ignored position");
        }
    }

    #[test]
    fn activation_derivatives_match_finite_differences() {
        // Closed form the fused SiLU backward relies on: σ(x)·(1 + x·(1−σ(x))).
        let silu_prime = |x: f64| {
            let s = sigmoid(x);
            s * (1.0 + x * (1.0 - s))
        };
        let h = 1e-6;
        for x in [-3.0, -1.0, -0.1, 0.0, 0.5, 2.0, 4.0] {
            let fd_silu = (silu(x + h) - silu(x - h)) / (2.0 * h);
            assert!((fd_silu - silu_prime(x)).abs() < 1e-8, "silu' at {x}");
            let fd_gelu = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((fd_gelu - gelu_prime(x)).abs() < 1e-8, "gelu' at {x}");
        }
    }
}
