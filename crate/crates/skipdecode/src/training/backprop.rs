//! Skip-aware teacher-forced forward pass with recorded intermediates, and
//! its hand-written reverse pass.
//!
//! Nested budgets mean that at any layer the participating positions form a
//! prefix of the sequence, so each layer works on a compact (batch * prefix,
//! d_model) view; positions outside the prefix pass through as identities and
//! route gradients straight through. Parameters of a layer receive gradient
//! only from positions that actually executed it.

use crate::model::{DecoderWeights, LayerWeights, LN_EPS};
use crate::schedule::ActiveLayerSet;
use crate::tensor::{gelu_grad_scalar, gelu_scalar, Scalar, Tensor2D};
use crate::{Error, Result};

/// Targets for next-token cross-entropy: position `t` of row `b` predicts
/// `tokens[b][t + 1]`, counted only where `mask` is set.
pub struct LossTargets {
    /// mask[b][t]: whether the prediction made at position t is scored.
    pub mask: Vec<Vec<bool>>,
}

impl LossTargets {
    /// Score every position whose next token is a real (non-pad) token.
    pub fn from_pad(tokens: &[Vec<u32>], pad_id: u32) -> LossTargets {
        let mask = tokens
            .iter()
            .map(|row| {
                (0..row.len())
                    .map(|t| t + 1 < row.len() && row[t + 1] != pad_id)
                    .collect()
            })
            .collect();
        LossTargets { mask }
    }
}

/// Per-layer participation prefix: the number of leading positions whose
/// active set contains the layer. Errors when participation is not a prefix
/// (non-monotone budgets).
pub fn layer_prefixes(active_sets: &[ActiveLayerSet], num_layers: usize) -> Result<Vec<usize>> {
    let mut prefixes = vec![0usize; num_layers];
    for (l, prefix) in prefixes.iter_mut().enumerate() {
        let mut q = 0;
        let mut closed = false;
        for (t, set) in active_sets.iter().enumerate() {
            if set.contains(l) {
                if closed {
                    return Err(Error::contract(format!(
                        "active sets are not monotone: layer {l} inactive before position {t} but active there"
                    )));
                }
                q = t + 1;
            } else {
                closed = true;
            }
        }
        *prefix = q;
    }
    Ok(prefixes)
}

struct NormTape<S: Scalar> {
    mean: Vec<S>,
    rstd: Vec<S>,
}

fn ln_forward<S: Scalar>(x: &Tensor2D<S>, gain: &[S], bias: &[S]) -> (Tensor2D<S>, NormTape<S>) {
    let (rows, cols) = x.shape();
    let eps = S::from_f64(LN_EPS);
    let n = S::from_f64(cols as f64);
    let mut out = Tensor2D::zeros(rows, cols);
    let mut tape = NormTape {
        mean: Vec::with_capacity(rows),
        rstd: Vec::with_capacity(rows),
    };
    for r in 0..rows {
        let row = x.row(r);
        let mut mean = S::ZERO;
        for &v in row {
            mean += v;
        }
        mean /= n;
        let mut var = S::ZERO;
        for &v in row {
            let d = v - mean;
            var += d * d;
        }
        var /= n;
        let rstd = S::ONE / (var + eps).sqrt();
        let out_row = out.row_mut(r);
        for c in 0..cols {
            out_row[c] = (row[c] - mean) * rstd * gain[c] + bias[c];
        }
        tape.mean.push(mean);
        tape.rstd.push(rstd);
    }
    (out, tape)
}

/// Standard layer-norm backward; accumulates into dgain/dbias and returns dx.
fn ln_backward<S: Scalar>(
    dout: &Tensor2D<S>,
    x: &Tensor2D<S>,
    tape: &NormTape<S>,
    gain: &[S],
    dgain: &mut Tensor2D<S>,
    dbias: &mut Tensor2D<S>,
) -> Tensor2D<S> {
    let (rows, cols) = x.shape();
    let n = S::from_f64(cols as f64);
    let mut dx = Tensor2D::zeros(rows, cols);
    for r in 0..rows {
        let xrow = x.row(r);
        let drow = dout.row(r);
        let mean = tape.mean[r];
        let rstd = tape.rstd[r];

        let mut m1 = S::ZERO;
        let mut m2 = S::ZERO;
        for c in 0..cols {
            let xhat = (xrow[c] - mean) * rstd;
            let dxhat = drow[c] * gain[c];
            m1 += dxhat;
            m2 += dxhat * xhat;
            dgain.data_mut()[c] += drow[c] * xhat;
            dbias.data_mut()[c] += drow[c];
        }
        m1 /= n;
        m2 /= n;
        let dxrow = dx.row_mut(r);
        for c in 0..cols {
            let xhat = (xrow[c] - mean) * rstd;
            let dxhat = drow[c] * gain[c];
            dxrow[c] = rstd * (dxhat - m1 - xhat * m2);
        }
    }
    dx
}

fn colsum_into<S: Scalar>(src: &Tensor2D<S>, acc: &mut Tensor2D<S>) {
    let cols = src.cols();
    for r in 0..src.rows() {
        let row = src.row(r);
        for c in 0..cols {
            acc.data_mut()[c] += row[c];
        }
    }
}

struct LayerTape<S: Scalar> {
    prefix: usize,
    x_in: Tensor2D<S>,
    ln1: NormTape<S>,
    normed1: Tensor2D<S>,
    q: Tensor2D<S>,
    k: Tensor2D<S>,
    v: Tensor2D<S>,
    /// One (prefix, prefix) lower-triangular probability matrix per (row, head).
    probs: Vec<Tensor2D<S>>,
    ctx: Tensor2D<S>,
    x_mid: Tensor2D<S>,
    ln2: NormTape<S>,
    normed2: Tensor2D<S>,
    z1: Tensor2D<S>,
    gelu_out: Tensor2D<S>,
}

/// Everything the backward pass needs from one forward evaluation.
pub struct Tape<S: Scalar> {
    batch: usize,
    seq_len: usize,
    tokens: Vec<Vec<u32>>,
    layers: Vec<Option<LayerTape<S>>>,
    final_input: Tensor2D<S>,
    final_ln: NormTape<S>,
    final_normed: Tensor2D<S>,
    /// (batch * seq_len, vocab) logits.
    pub logits: Tensor2D<S>,
}

/// Runs the recorded skip-aware forward pass over a full batch of sequences.
///
/// All rows must share one length; `active_sets[t]` is the layer set for
/// position `t` (shared across rows, column-wise batching).
pub fn tape_forward<S: Scalar>(
    weights: &DecoderWeights<S>,
    tokens: &[Vec<u32>],
    active_sets: &[ActiveLayerSet],
) -> Result<Tape<S>> {
    let cfg = &weights.config;
    let batch = tokens.len();
    if batch == 0 {
        return Err(Error::contract("empty training batch"));
    }
    let seq_len = tokens[0].len();
    if tokens.iter().any(|r| r.len() != seq_len) {
        return Err(Error::contract("training rows must share one length"));
    }
    if seq_len < 2 {
        return Err(Error::contract("sequences need at least two tokens"));
    }
    if seq_len > cfg.max_positions {
        return Err(Error::contract(format!(
            "sequence length {seq_len} exceeds max_positions {}",
            cfg.max_positions
        )));
    }
    if active_sets.len() < seq_len {
        return Err(Error::contract(format!(
            "need {seq_len} active sets, got {}",
            active_sets.len()
        )));
    }
    let prefixes = layer_prefixes(&active_sets[..seq_len], cfg.num_decoder_layers)?;

    let d = cfg.d_model;
    let mut hidden = Tensor2D::zeros(batch * seq_len, d);
    for (b, row_tokens) in tokens.iter().enumerate() {
        for (t, &tok) in row_tokens.iter().enumerate() {
            let tok = tok as usize;
            if tok >= cfg.vocab_size {
                return Err(Error::contract(format!(
                    "token id {tok} >= vocab_size {}",
                    cfg.vocab_size
                )));
            }
            let row = hidden.row_mut(b * seq_len + t);
            let emb = weights.tok_emb.row(tok);
            let pos = weights.pos_emb.row(t);
            for c in 0..d {
                row[c] = emb[c] + pos[c];
            }
        }
    }

    let n_heads = cfg.n_heads;
    let head_dim = cfg.head_dim();
    let scale = S::ONE / S::from_f64(head_dim as f64).sqrt();

    let mut layer_tapes: Vec<Option<LayerTape<S>>> = Vec::with_capacity(cfg.num_decoder_layers);
    for (l, lw) in weights.layers.iter().enumerate() {
        let q_len = prefixes[l];
        if q_len == 0 {
            layer_tapes.push(None);
            continue;
        }
        // compact view: rows (b, t) with t < q_len, index b * q_len + t
        let mut x_in = Tensor2D::zeros(batch * q_len, d);
        for b in 0..batch {
            for t in 0..q_len {
                x_in.row_mut(b * q_len + t).copy_from_slice(hidden.row(b * seq_len + t));
            }
        }

        let (normed1, ln1) = ln_forward(&x_in, lw.ln1_gain.row(0), lw.ln1_bias.row(0));
        let mut q = normed1.matmul(&lw.wq)?;
        q.add_row_broadcast(lw.bq.row(0))?;
        let mut k = normed1.matmul(&lw.wk)?;
        k.add_row_broadcast(lw.bk.row(0))?;
        let mut v = normed1.matmul(&lw.wv)?;
        v.add_row_broadcast(lw.bv.row(0))?;

        let mut probs: Vec<Tensor2D<S>> = Vec::with_capacity(batch * n_heads);
        let mut ctx = Tensor2D::zeros(batch * q_len, d);
        let mut scores = vec![S::ZERO; q_len];
        for b in 0..batch {
            for h in 0..n_heads {
                let off = h * head_dim;
                let mut pmat = Tensor2D::zeros(q_len, q_len);
                for t in 0..q_len {
                    let q_row = &q.row(b * q_len + t)[off..off + head_dim];
                    let mut max = S::from_f64(f64::NEG_INFINITY);
                    for (j, score) in scores.iter_mut().enumerate().take(t + 1) {
                        let k_row = &k.row(b * q_len + j)[off..off + head_dim];
                        let mut dot = S::ZERO;
                        for i in 0..head_dim {
                            dot += q_row[i] * k_row[i];
                        }
                        *score = dot * scale;
                        max = max.maximum(*score);
                    }
                    let mut denom = S::ZERO;
                    for score in scores.iter_mut().take(t + 1) {
                        let e = (*score - max).exp();
                        *score = e;
                        denom += e;
                    }
                    let ctx_row = &mut ctx.row_mut(b * q_len + t)[off..off + head_dim];
                    for j in 0..=t {
                        let p = scores[j] / denom;
                        pmat.set(t, j, p);
                        let v_row = &v.row(b * q_len + j)[off..off + head_dim];
                        for i in 0..head_dim {
                            ctx_row[i] += p * v_row[i];
                        }
                    }
                }
                probs.push(pmat);
            }
        }

        let mut attn_out = ctx.matmul(&lw.wo)?;
        attn_out.add_row_broadcast(lw.bo.row(0))?;
        let x_mid = x_in.add(&attn_out)?;

        let (normed2, ln2) = ln_forward(&x_mid, lw.ln2_gain.row(0), lw.ln2_bias.row(0));
        let mut z1 = normed2.matmul(&lw.w_in)?;
        z1.add_row_broadcast(lw.b_in.row(0))?;
        let gelu_out = {
            let mut g = z1.clone();
            for val in g.data_mut() {
                *val = gelu_scalar(*val);
            }
            g
        };
        let mut ffn = gelu_out.matmul(&lw.w_out)?;
        ffn.add_row_broadcast(lw.b_out.row(0))?;
        let x_out = x_mid.add(&ffn)?;

        // scatter the prefix back; positions >= q_len stay untouched
        for b in 0..batch {
            for t in 0..q_len {
                hidden
                    .row_mut(b * seq_len + t)
                    .copy_from_slice(x_out.row(b * q_len + t));
            }
        }

        layer_tapes.push(Some(LayerTape {
            prefix: q_len,
            x_in,
            ln1,
            normed1,
            q,
            k,
            v,
            probs,
            ctx,
            x_mid,
            ln2,
            normed2,
            z1,
            gelu_out,
        }));
    }

    let final_input = hidden;
    let (final_normed, final_ln) = ln_forward(
        &final_input,
        weights.final_norm_gain.row(0),
        weights.final_norm_bias.row(0),
    );
    let logits = final_normed.matmul_transb(&weights.tok_emb)?;

    Ok(Tape {
        batch,
        seq_len,
        tokens: tokens.to_vec(),
        layers: layer_tapes,
        final_input,
        final_ln,
        final_normed,
        logits,
    })
}

/// Mean next-token cross-entropy (nats) over the scored targets, plus the
/// per-position per-row values (NaN where unscored).
pub fn cross_entropy<S: Scalar>(tape: &Tape<S>, targets: &LossTargets) -> (f64, Tensor2D<f64>) {
    let vocab = tape.logits.cols();
    let mut per = Tensor2D::<f64>::filled(tape.batch, tape.seq_len, f64::NAN);
    let mut total = 0.0f64;
    let mut count = 0usize;
    for b in 0..tape.batch {
        for t in 0..tape.seq_len.saturating_sub(1) {
            if !targets.mask[b][t] {
                continue;
            }
            let target = tape.tokens[b][t + 1] as usize;
            let row = tape.logits.row(b * tape.seq_len + t);
            let mut max = f64::NEG_INFINITY;
            for &l in row.iter().take(vocab) {
                max = max.max(l.to_f64());
            }
            let mut lse = 0.0f64;
            for &l in row.iter().take(vocab) {
                lse += (l.to_f64() - max).exp();
            }
            let loss = max + lse.ln() - row[target].to_f64();
            per.set(b, t, loss);
            total += loss;
            count += 1;
        }
    }
    let mean = if count == 0 { f64::NAN } else { total / count as f64 };
    (mean, per)
}

/// Reverse pass: gradients of the mean cross-entropy for every parameter.
pub fn tape_backward<S: Scalar>(
    weights: &DecoderWeights<S>,
    tape: &Tape<S>,
    targets: &LossTargets,
) -> Result<DecoderWeights<S>> {
    let cfg = &weights.config;
    let d = cfg.d_model;
    let n_heads = cfg.n_heads;
    let head_dim = cfg.head_dim();
    let scale = S::ONE / S::from_f64(head_dim as f64).sqrt();
    let (batch, seq_len) = (tape.batch, tape.seq_len);
    let vocab = cfg.vocab_size;

    let mut grads = weights.zeros_like();

    // count scored targets for the mean
    let mut count = 0usize;
    for b in 0..batch {
        for t in 0..seq_len - 1 {
            if targets.mask[b][t] {
                count += 1;
            }
        }
    }
    if count == 0 {
        return Err(Error::contract("no scored targets in batch"));
    }
    let inv = 1.0 / count as f64;

    // d loss / d logits = (softmax - onehot) / count on scored rows
    let mut dlogits = Tensor2D::<S>::zeros(batch * seq_len, vocab);
    for b in 0..batch {
        for t in 0..seq_len - 1 {
            if !targets.mask[b][t] {
                continue;
            }
            let row = tape.logits.row(b * seq_len + t);
            let mut max = f64::NEG_INFINITY;
            for &l in row.iter() {
                max = max.max(l.to_f64());
            }
            let mut denom = 0.0f64;
            for &l in row.iter() {
                denom += (l.to_f64() - max).exp();
            }
            let target = tape.tokens[b][t + 1] as usize;
            let drow = dlogits.row_mut(b * seq_len + t);
            for c in 0..vocab {
                let p = (row[c].to_f64() - max).exp() / denom;
                let grad = (p - if c == target { 1.0 } else { 0.0 }) * inv;
                drow[c] = S::from_f64(grad);
            }
        }
    }

    // tied head: logits = final_normed . tok_emb^T
    grads.tok_emb.add_assign(&dlogits.matmul_transa(&tape.final_normed)?)?;
    let dfinal_normed = dlogits.matmul(&weights.tok_emb)?;

    let mut dhidden = ln_backward(
        &dfinal_normed,
        &tape.final_input,
        &tape.final_ln,
        weights.final_norm_gain.row(0),
        &mut grads.final_norm_gain,
        &mut grads.final_norm_bias,
    );

    for l in (0..cfg.num_decoder_layers).rev() {
        let Some(ltape) = tape.layers[l].as_ref() else {
            continue; // no position executed this layer: pure identity
        };
        let lw: &LayerWeights<S> = &weights.layers[l];
        let q_len = ltape.prefix;

        // gather the gradient of the layer output over the active prefix
        let mut dx_out = Tensor2D::zeros(batch * q_len, d);
        for b in 0..batch {
            for t in 0..q_len {
                dx_out
                    .row_mut(b * q_len + t)
                    .copy_from_slice(dhidden.row(b * seq_len + t));
            }
        }

        // FFN block: x_out = x_mid + W_out(gelu(W_in ln2(x_mid) + b_in)) + b_out
        let gl = &mut grads.layers[l];
        let dffn = &dx_out;
        gl.w_out.add_assign(&ltape.gelu_out.matmul_transa(dffn)?)?;
        colsum_into(dffn, &mut gl.b_out);
        let dgelu = dffn.matmul_transb(&lw.w_out)?;
        let mut dz1 = dgelu;
        for (dv, &z) in dz1.data_mut().iter_mut().zip(ltape.z1.data()) {
            *dv *= gelu_grad_scalar(z);
        }
        gl.w_in.add_assign(&ltape.normed2.matmul_transa(&dz1)?)?;
        colsum_into(&dz1, &mut gl.b_in);
        let dnormed2 = dz1.matmul_transb(&lw.w_in)?;
        let mut dx_mid = ln_backward(
            &dnormed2,
            &ltape.x_mid,
            &ltape.ln2,
            lw.ln2_gain.row(0),
            &mut gl.ln2_gain,
            &mut gl.ln2_bias,
        );
        dx_mid.add_assign(&dx_out)?; // residual branch

        // attention block: x_mid = x_in + Wo(ctx) + bo
        let dattn = &dx_mid;
        gl.wo.add_assign(&ltape.ctx.matmul_transa(dattn)?)?;
        colsum_into(dattn, &mut gl.bo);
        let dctx = dattn.matmul_transb(&lw.wo)?;

        let mut dq = Tensor2D::zeros(batch * q_len, d);
        let mut dk = Tensor2D::zeros(batch * q_len, d);
        let mut dv = Tensor2D::zeros(batch * q_len, d);
        let mut dprobs_row = vec![S::ZERO; q_len];
        for b in 0..batch {
            for h in 0..n_heads {
                let off = h * head_dim;
                let pmat = &ltape.probs[b * n_heads + h];
                for t in 0..q_len {
                    let dctx_row = &dctx.row(b * q_len + t)[off..off + head_dim];
                    // dprobs and softmax backward over the causal row
                    let mut srow = S::ZERO;
                    for (j, dp) in dprobs_row.iter_mut().enumerate().take(t + 1) {
                        let v_row = &ltape.v.row(b * q_len + j)[off..off + head_dim];
                        let mut dot = S::ZERO;
                        for i in 0..head_dim {
                            dot += dctx_row[i] * v_row[i];
                        }
                        *dp = dot;
                        srow += pmat.get(t, j) * dot;
                    }
                    for j in 0..=t {
                        let p = pmat.get(t, j);
                        // dv accumulation
                        {
                            let dv_row = &mut dv.row_mut(b * q_len + j)[off..off + head_dim];
                            for i in 0..head_dim {
                                dv_row[i] += p * dctx_row[i];
                            }
                        }
                        let dscore = p * (dprobs_row[j] - srow) * scale;
                        if dscore != S::ZERO {
                            {
                                let k_row = &ltape.k.row(b * q_len + j)[off..off + head_dim];
                                let dq_row = &mut dq.row_mut(b * q_len + t)[off..off + head_dim];
                                for i in 0..head_dim {
                                    dq_row[i] += dscore * k_row[i];
                                }
                            }
                            {
                                let q_row = &ltape.q.row(b * q_len + t)[off..off + head_dim];
                                let dk_row = &mut dk.row_mut(b * q_len + j)[off..off + head_dim];
                                for i in 0..head_dim {
                                    dk_row[i] += dscore * q_row[i];
                                }
                            }
                        }
                    }
                }
            }
        }

        gl.wq.add_assign(&ltape.normed1.matmul_transa(&dq)?)?;
        colsum_into(&dq, &mut gl.bq);
        gl.wk.add_assign(&ltape.normed1.matmul_transa(&dk)?)?;
        colsum_into(&dk, &mut gl.bk);
        gl.wv.add_assign(&ltape.normed1.matmul_transa(&dv)?)?;
        colsum_into(&dv, &mut gl.bv);

        let mut dnormed1 = dq.matmul_transb(&lw.wq)?;
        dnormed1.add_assign(&dk.matmul_transb(&lw.wk)?)?;
        dnormed1.add_assign(&dv.matmul_transb(&lw.wv)?)?;

        let mut dx_in = ln_backward(
            &dnormed1,
            &ltape.x_in,
            &ltape.ln1,
            lw.ln1_gain.row(0),
            &mut gl.ln1_gain,
            &mut gl.ln1_bias,
        );
        dx_in.add_assign(&dx_mid)?; // residual branch

        // scatter the prefix gradient back into the full-width stream
        for b in 0..batch {
            for t in 0..q_len {
                dhidden
                    .row_mut(b * seq_len + t)
                    .copy_from_slice(dx_in.row(b * q_len + t));
            }
        }
    }

    // embeddings
    for b in 0..batch {
        for (t, &tok) in tape.tokens[b].iter().enumerate() {
            let drow = dhidden.row(b * seq_len + t);
            {
                let erow = grads.tok_emb.row_mut(tok as usize);
                for c in 0..d {
                    erow[c] += drow[c];
                }
            }
            let prow = grads.pos_emb.row_mut(t);
            for c in 0..d {
                prow[c] += drow[c];
            }
        }
    }

    Ok(grads)
}
