//! Hand-written reverse-mode differentiation of the forward pass.

use super::forward::{
    cross_entropy, forward_cached, gather_head, gelu_prime, rope_unrotate, scatter_head, sigmoid,
    RopeTable,
};
use super::norms::{layernorm_rows_backward, rmsnorm_rows_backward};
use super::{Arch, Model};
use crate::error::{Error, Result};
use crate::tensor::{gemm_nn, gemm_nt, gemm_tn, softmax_in_place, Element, Tensor};
use alloc::vec;
use alloc::vec::Vec;

/// Per-parameter gradients, stored in the model's canonical handle order.
#[derive(Debug, Clone)]
pub struct Gradients<E: Element> {
    tensors: Vec<Tensor<E>>,
}

impl<E: Element> Gradients<E> {
    /// Zero gradients shaped like the model's parameters.
    pub fn zeros_like(model: &Model<E>) -> Self {
        Gradients {
            tensors: model.handles().iter().map(|h| Tensor::zeros(&h.shape)).collect(),
        }
    }

    /// Wraps externally built tensors (test/tooling use).
    pub fn from_tensors(tensors: Vec<Tensor<E>>) -> Self {
        Gradients { tensors }
    }

    pub fn tensors(&self) -> &[Tensor<E>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<E>] {
        &mut self.tensors
    }

    /// Gradient for the parameter at `path`.
    pub fn get<'a>(&'a self, model: &Model<E>, path: &str) -> Option<&'a Tensor<E>> {
        model.find(path).map(|i| &self.tensors[i])
    }

    /// (path, gradient) pairs in canonical order.
    pub fn iter<'a>(
        &'a self,
        model: &'a Model<E>,
    ) -> impl Iterator<Item = (&'a str, &'a Tensor<E>)> {
        model.handles().iter().zip(&self.tensors).map(|(h, t)| (h.path.as_str(), t))
    }
}

/// Loss and exact gradients of [`cross_entropy`]∘[`forward`] for one batch.
pub fn backward<E: Element>(
    model: &Model<E>,
    tokens: &[u32],
    targets: &[u32],
    batch: usize,
    seq: usize,
) -> Result<(f64, Gradients<E>)> {
    backward_scaled(model, tokens, targets, batch, seq, 1.0)
}

/// [`backward`] of `loss_scale · loss`; gradients scale linearly with it.
pub fn backward_scaled<E: Element>(
    model: &Model<E>,
    tokens: &[u32],
    targets: &[u32],
    batch: usize,
    seq: usize,
    loss_scale: f64,
) -> Result<(f64, Gradients<E>)> {
    let cache = forward_cached(model, tokens, batch, seq)?;
    let loss = cross_entropy(&cache.logits, targets)?;

    let cfg = model.config();
    let d = cfg.d_model;
    let heads = cfg.n_heads;
    let dh = cfg.head_dim();
    let ff = cfg.d_ff;
    let vocab = cfg.vocab_size;
    let rows = batch * seq;
    let glu = cfg.arch == Arch::GluLlama;
    let slots = model.slots();
    let rope = glu.then(|| RopeTable::<E>::new(seq, dh, cfg.rope_theta));
    let scale = E::from_f64(1.0 / libm::sqrt(dh as f64));

    let mut grads = Gradients::zeros_like(model);

    // d loss / d logits = (softmax − onehot) · loss_scale / rows.
    let mut d_logits = cache.logits.data().to_vec();
    let w = E::from_f64(loss_scale / rows as f64);
    for (r, &target) in targets.iter().enumerate() {
        let row = &mut d_logits[r * vocab..(r + 1) * vocab];
        softmax_in_place(row);
        row[target as usize] -= E::ONE;
        for x in row.iter_mut() {
            *x *= w;
        }
    }

    // Head and final norm.
    gemm_tn(rows, d, vocab, &cache.normed_f, &d_logits, grads.tensors[slots.lm_head].data_mut());
    let mut d_normf = vec![E::ZERO; rows * d];
    gemm_nt(rows, vocab, d, &d_logits, model.param(slots.lm_head).data(), &mut d_normf);

    let x_last = cache.streams.last().unwrap();
    let mut dx = vec![E::ZERO; rows * d];
    if glu {
        let (g, dg) = (model.param(slots.final_g).data(), slots.final_g);
        rmsnorm_rows_backward(
            x_last,
            d,
            g,
            &cache.rinv_f,
            &d_normf,
            &mut dx,
            grads.tensors[dg].data_mut(),
        );
    } else {
        let g = model.param(slots.final_g).data();
        let [dg, db] = grads
            .tensors
            .get_disjoint_mut([slots.final_g, slots.final_b.unwrap()])
            .expect("distinct slots");
        layernorm_rows_backward(
            &cache.xhat_f,
            d,
            g,
            &cache.rinv_f,
            &d_normf,
            &mut dx,
            dg.data_mut(),
            db.data_mut(),
        );
    }

    // Per-head work tiles for the attention backward, reused across layers.
    let mut qt = vec![E::ZERO; seq * dh];
    let mut kt = vec![E::ZERO; seq * dh];
    let mut vt = vec![E::ZERO; seq * dh];
    let mut dct = vec![E::ZERO; seq * dh];
    let mut dqt = vec![E::ZERO; seq * dh];
    let mut dkt = vec![E::ZERO; seq * dh];
    let mut dvt = vec![E::ZERO; seq * dh];
    let mut dpt = vec![E::ZERO; seq * seq];
    for l in (0..cfg.n_layers).rev() {
        let lc = &cache.layers[l];
        let sl = &slots.layers[l];
        let x_in = &cache.streams[l];

        // MLP branch (dx is the gradient at this layer's output).
        let mut d_act = vec![E::ZERO; rows * ff];
        gemm_nt(rows, d, ff, &dx, model.param(sl.down).data(), &mut d_act);
        gemm_tn(rows, ff, d, &lc.act, &dx, grads.tensors[sl.down].data_mut());

        let mut d_normed2 = vec![E::ZERO; rows * d];
        if let Some(gate_idx) = sl.gate {
            let mut d_gate = vec![E::ZERO; rows * ff];
            let mut d_up = vec![E::ZERO; rows * ff];
            // One sigmoid per element covers both factors:
            // d_gate = da·u·silu'(g) and d_up = da·silu(g) = da·g·σ(g).
            for i in 0..rows * ff {
                let da = d_act[i];
                let g = lc.gate_pre[i];
                let u = lc.up_pre[i];
                let s = sigmoid(g);
                d_gate[i] = da * u * (s * (E::ONE + g * (E::ONE - s)));
                d_up[i] = da * (g * s);
            }
            gemm_nt(rows, ff, d, &d_gate, model.param(gate_idx).data(), &mut d_normed2);
            gemm_nt(rows, ff, d, &d_up, model.param(sl.up).data(), &mut d_normed2);
            gemm_tn(rows, d, ff, &lc.normed2, &d_gate, grads.tensors[gate_idx].data_mut());
            gemm_tn(rows, d, ff, &lc.normed2, &d_up, grads.tensors[sl.up].data_mut());
        } else {
            let mut d_fc = vec![E::ZERO; rows * ff];
            for i in 0..rows * ff {
                d_fc[i] = d_act[i] * gelu_prime(lc.up_pre[i]);
            }
            gemm_nt(rows, ff, d, &d_fc, model.param(sl.up).data(), &mut d_normed2);
            gemm_tn(rows, d, ff, &lc.normed2, &d_fc, grads.tensors[sl.up].data_mut());
        }

        // Second norm; dx doubles as the residual passthrough into x_mid.
        let mut d_x_mid = dx;
        if glu {
            rmsnorm_rows_backward(
                &lc.x_mid,
                d,
                model.param(sl.post_g).data(),
                &lc.rinv2,
                &d_normed2,
                &mut d_x_mid,
                grads.tensors[sl.post_g].data_mut(),
            );
        } else {
            let g = model.param(sl.post_g).data();
            let [dg, db] = grads
                .tensors
                .get_disjoint_mut([sl.post_g, sl.post_b.unwrap()])
                .expect("distinct slots");
            layernorm_rows_backward(
                &lc.xhat2,
                d,
                g,
                &lc.rinv2,
                &d_normed2,
                &mut d_x_mid,
                dg.data_mut(),
                db.data_mut(),
            );
        }

        // Attention output projection.
        let mut d_ctx = vec![E::ZERO; rows * d];
        gemm_nt(rows, d, d, &d_x_mid, model.param(sl.o).data(), &mut d_ctx);
        gemm_tn(rows, d, d, &lc.ctx, &d_x_mid, grads.tensors[sl.o].data_mut());

        // Attention core on the same per-head tiles as the forward pass.
        // With P the softmax block (future positions exactly zero) and C the
        // context C = P·V: dP = dC·Vᵀ, dV = Pᵀ·dC, then the softmax/scale
        // backward rewrites dP into dS row by row, and dQ = dS·K, dK = dSᵀ·Q.
        let mut d_q = vec![E::ZERO; rows * d];
        let mut d_k = vec![E::ZERO; rows * d];
        let mut d_v = vec![E::ZERO; rows * d];
        for b in 0..batch {
            for h in 0..heads {
                let col = h * dh;
                gather_head(&lc.q, b, seq, d, col, dh, &mut qt);
                gather_head(&lc.k, b, seq, d, col, dh, &mut kt);
                gather_head(&lc.v, b, seq, d, col, dh, &mut vt);
                gather_head(&d_ctx, b, seq, d, col, dh, &mut dct);
                let pb = &lc.probs[(b * heads + h) * seq * seq..][..seq * seq];
                dpt.fill(E::ZERO);
                gemm_nt(seq, dh, seq, &dct, &vt, &mut dpt);
                dvt.fill(E::ZERO);
                gemm_tn(seq, seq, dh, pb, &dct, &mut dvt);
                for t in 0..seq {
                    let p_row = &pb[t * seq..][..t + 1];
                    let dp_row = &mut dpt[t * seq..][..seq];
                    let mut p_dot = E::ZERO;
                    for (&p, &dp) in p_row.iter().zip(dp_row.iter()) {
                        p_dot += p * dp;
                    }
                    for (ds, &p) in dp_row[..=t].iter_mut().zip(p_row) {
                        *ds = p * (*ds - p_dot) * scale;
                    }
                    for ds in &mut dp_row[t + 1..] {
                        *ds = E::ZERO;
                    }
                }
                dqt.fill(E::ZERO);
                dkt.fill(E::ZERO);
                gemm_nn(seq, seq, dh, &dpt, &kt, &mut dqt);
                gemm_tn(seq, seq, dh, &dpt, &qt, &mut dkt);
                scatter_head(&dqt, b, seq, d, col, dh, &mut d_q);
                scatter_head(&dkt, b, seq, d, col, dh, &mut d_k);
                scatter_head(&dvt, b, seq, d, col, dh, &mut d_v);
            }
        }
        if let Some(table) = &rope {
            rope_unrotate(&mut d_q, rows, seq, d, heads, table);
            rope_unrotate(&mut d_k, rows, seq, d, heads, table);
        }

        // Q/K/V projections back to the first norm output.
        let mut d_normed1 = vec![E::ZERO; rows * d];
        gemm_nt(rows, d, d, &d_q, model.param(sl.q).data(), &mut d_normed1);
        gemm_nt(rows, d, d, &d_k, model.param(sl.k).data(), &mut d_normed1);
        gemm_nt(rows, d, d, &d_v, model.param(sl.v).data(), &mut d_normed1);
        gemm_tn(rows, d, d, &lc.normed1, &d_q, grads.tensors[sl.q].data_mut());
        gemm_tn(rows, d, d, &lc.normed1, &d_k, grads.tensors[sl.k].data_mut());
        gemm_tn(rows, d, d, &lc.normed1, &d_v, grads.tensors[sl.v].data_mut());

        // First norm; d_x_mid doubles as the residual passthrough.
        let mut d_x_prev = d_x_mid;
        if glu {
            rmsnorm_rows_backward(
                x_in,
                d,
                model.param(sl.in_g).data(),
                &lc.rinv1,
                &d_normed1,
                &mut d_x_prev,
                grads.tensors[sl.in_g].data_mut(),
            );
        } else {
            let g = model.param(sl.in_g).data();
            let [dg, db] = grads
                .tensors
                .get_disjoint_mut([sl.in_g, sl.in_b.unwrap()])
                .expect("distinct slots");
            layernorm_rows_backward(
                &lc.xhat1,
                d,
                g,
                &lc.rinv1,
                &d_normed1,
                &mut d_x_prev,
                dg.data_mut(),
                db.data_mut(),
            );
        }
        dx = d_x_prev;
    }

    // Embedding scatter-add (and learned positions for gpt2).
    {
        let demb = grads.tensors[slots.embedding].data_mut();
        for (r, &id) in tokens.iter().enumerate() {
            let dst = &mut demb[id as usize * d..(id as usize + 1) * d];
            let src = &dx[r * d..(r + 1) * d];
            for (dj, &sj) in dst.iter_mut().zip(src) {
                *dj += sj;
            }
        }
    }
    if let Some(pos_idx) = slots.pos_embedding {
        let dwpe = grads.tensors[pos_idx].data_mut();
        for r in 0..rows {
            let t = r % seq;
            let dst = &mut dwpe[t * d..(t + 1) * d];
            let src = &dx[r * d..(r + 1) * d];
            for (dj, &sj) in dst.iter_mut().zip(src) {
                *dj += sj;
            }
        }
    }

    for (h, g) in model.handles().iter().zip(grads.tensors()) {
        if !g.all_finite() {
            return Err(Error::numeric(&h.path));
        }
    }
    Ok((loss * loss_scale, grads))
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
            let is_norm = matches!(
                m.handle(i).role,
                Role::InputNorm | Role::PostAttnNorm | Role::FinalNorm
            );
            if is_norm {
                let fill = if m.handle(i).path.ends_with(".g") { 1.0 } else { 0.0 };
                m.param_mut(i).data_mut().iter_mut().for_each(|x| *x = fill);
            } else {
                fill_gaussian(m.param_mut(i).data_mut(), 0.0, 0.08, &mut prng);
            }
        }
        m
    }

    fn tokens_and_targets(n: usize) -> (Vec<u32>, Vec<u32>) {
        let toks: Vec<u32> = (0..n).map(|i| (i as u32 * 5 + 2) % 32).collect();
        let tgts: Vec<u32> = (0..n).map(|i| (i as u32 * 3 + 7) % 32).collect();
        (toks, tgts)
    }

    #[test]
    fn gradient_shapes_mirror_parameters() {
        for arch in [Arch::GluLlama, Arch::Gpt2NonGlu] {
            let m = randomized(arch, 1);
            let (toks, tgts) = tokens_and_targets(2 * 8);
            let (_, grads) = backward(&m, &toks, &tgts, 2, 8).unwrap();
            for (i, g) in grads.tensors().iter().enumerate() {
                assert_eq!(g.shape(), m.handle(i).shape.as_slice(), "{}", m.handle(i).path);
            }
        }
    }

    #[test]
    fn loss_matches_cross_entropy_of_forward() {
        let m = randomized(Arch::GluLlama, 2);
        let (toks, tgts) = tokens_and_targets(8);
        let (loss, _) = backward(&m, &toks, &tgts, 1, 8).unwrap();
        let out = super::super::forward(&m, &toks, 1, 8).unwrap();
        let direct = cross_entropy(&out.logits, &tgts).unwrap();
        assert!((loss - direct).abs() < 1e-12);
    }

    #[test]
    fn doubling_loss_scale_doubles_gradients() {
        for arch in [Arch::GluLlama, Arch::Gpt2NonGlu] {
            let m = randomized(arch, 3);
            let (toks, tgts) = tokens_and_targets(8);
            let (l1, g1) = backward_scaled(&m, &toks, &tgts, 1, 8, 1.0).unwrap();
            let (l2, g2) = backward_scaled(&m, &toks, &tgts, 1, 8, 2.0).unwrap();
            assert!((l2 - 2.0 * l1).abs() < 1e-12);
            for (a, b) in g1.tensors().iter().zip(g2.tensors()) {
                for (x, y) in a.data().iter().zip(b.data()) {
                    let rel = (y - 2.0 * x).abs() / x.abs().max(1e-300);
                    assert!(rel < 1e-12 || (y - 2.0 * x).abs() < 1e-300, "x={x} y={y}");
                }
            }
        }
    }

    #[test]
    fn gamma_behind_zero_weights_gets_zero_gradient() {
        // Zero the layer-2 MLP: its post_attn_norm gamma cannot affect the
        // loss, so its gradient must vanish.
        let mut m = randomized(Arch::GluLlama, 4);
        for leaf in ["mlp.gate", "mlp.up", "mlp.down"] {
            let i = m.find(&alloc::format!("layers.2.{leaf}")).unwrap();
            m.param_mut(i).data_mut().iter_mut().for_each(|x| *x = 0.0);
        }
        let (toks, tgts) = tokens_and_targets(8);
        let (_, grads) = backward(&m, &toks, &tgts, 1, 8).unwrap();
        let dg = grads.get(&m, "layers.2.post_attn_norm.g").unwrap();
        for &x in dg.data() {
            assert!(x.abs() < 1e-15, "expected zero gradient, got {x}");
        }
    }

    #[test]
    fn spot_finite_difference_agreement() {
        // A handful of coordinates per arch; the full sweep lives in the
        // gradcheck module.
        for arch in [Arch::GluLlama, Arch::Gpt2NonGlu] {
            let mut m = randomized(arch, 5);
            let (toks, tgts) = tokens_and_targets(2 * 6);
            let (_, grads) = backward(&m, &toks, &tgts, 2, 6).unwrap();
            let h = 1e-5;
            let picks = [
                ("layers.1.attn.q", 7usize),
                ("layers.2.mlp.down", 11),
                ("embedding", 40),
                ("lm_head", 13),
            ];
            for (path, at) in picks {
                let idx = m.find(path).unwrap();
                let analytic = grads.tensors()[idx].data()[at];
                let orig = m.param(idx).data()[at];
                m.param_mut(idx).data_mut()[at] = orig + h;
                let up = eval_loss(&m, &toks, &tgts);
                m.param_mut(idx).data_mut()[at] = orig - h;
                let down = eval_loss(&m, &toks, &tgts);
                m.param_mut(idx).data_mut()[at] = orig;
                let fd = (up - down) / (2.0 * h);
                let rel = (analytic - fd).abs() / analytic.abs().max(fd.abs()).max(1e-3);
                assert!(rel < 1e-6, "{path}[{at}]: analytic {analytic} vs fd {fd}");
            }
        }
    }

    fn eval_loss(m: &Model<f64>, toks: &[u32], tgts: &[u32]) -> f64 {
        let out = super::super::forward(m, toks, 2, 6).unwrap();
        cross_entropy(&out.logits, tgts).unwrap()
    }

    #[test]
    fn non_finite_parameter_surfaces_path() {
        let mut m = randomized(Arch::GluLlama, 6);
        let i = m.find("layers.1.attn.v").unwrap();
        m.param_mut(i).data_mut()[0] = f64::NAN;
        let (toks, tgts) = tokens_and_targets(8);
        let err = backward(&m, &toks, &tgts, 1, 8).unwrap_err();
        assert!(matches!(err, Error::NumericFailure { .. }), "{err}");
    }
}
