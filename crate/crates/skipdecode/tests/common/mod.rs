//! Independent reference implementations used as oracles by the integration
//! tests. Everything here recomputes from scratch with plain nested loops:
//! no KV cache, no compact prefix views, no shared kernel calls beyond raw
//! arithmetic, so agreement with the engine is meaningful.

#![allow(dead_code)]
// raw index loops on purpose: the oracle mirrors the math, not the engine
#![allow(clippy::needless_range_loop)]

use skipdecode::model::{DecoderWeights, LN_EPS};
use skipdecode::schedule::ActiveLayerSet;
use skipdecode::tensor::{Scalar, Tensor2D};

fn ln_row<S: Scalar>(x: &[S], gain: &[S], bias: &[S]) -> Vec<S> {
    let n = S::from_f64(x.len() as f64);
    let mut mean = S::ZERO;
    for &v in x {
        mean += v;
    }
    mean /= n;
    let mut var = S::ZERO;
    for &v in x {
        let d = v - mean;
        var += d * d;
    }
    var /= n;
    let rstd = S::ONE / (var + S::from_f64(LN_EPS)).sqrt();
    x.iter()
        .enumerate()
        .map(|(c, &v)| (v - mean) * rstd * gain[c] + bias[c])
        .collect()
}

fn gelu<S: Scalar>(x: S) -> S {
    let c = S::from_f64(0.7978845608028654);
    let k = S::from_f64(0.044715);
    let half = S::from_f64(0.5);
    half * x * (S::ONE + (c * (x + k * x * x * x)).tanh())
}

/// project a row through a (in, out) matrix plus bias
fn proj<S: Scalar>(x: &[S], w: &Tensor2D<S>, b: &[S]) -> Vec<S> {
    let (input, output) = w.shape();
    assert_eq!(x.len(), input);
    let mut out = b.to_vec();
    for (c, &xv) in x.iter().enumerate() {
        for (c2, o) in out.iter_mut().enumerate().take(output) {
            *o += xv * w.get(c, c2);
        }
    }
    out
}

/// From-scratch forward over a whole prefix with per-position active layer
/// sets. Row `b` of the returned tensor block `t` holds the logits of
/// position `t` (layout `(batch * seq_len, vocab)`, row `b * seq_len + t`).
pub fn reference_skip_logits<S: Scalar>(
    weights: &DecoderWeights<S>,
    tokens: &[Vec<u32>],
    active_sets: &[ActiveLayerSet],
    attend_from: &[usize],
) -> Tensor2D<S> {
    let cfg = &weights.config;
    let batch = tokens.len();
    let seq_len = tokens[0].len();
    let d = cfg.d_model;
    let n_heads = cfg.n_heads;
    let head_dim = d / n_heads;
    let scale = S::ONE / S::from_f64(head_dim as f64).sqrt();

    // hidden[b][t][c]
    let mut hidden: Vec<Vec<Vec<S>>> = (0..batch)
        .map(|b| {
            (0..seq_len)
                .map(|t| {
                    let tok = tokens[b][t] as usize;
                    (0..d)
                        .map(|c| weights.tok_emb.get(tok, c) + weights.pos_emb.get(t, c))
                        .collect()
                })
                .collect()
        })
        .collect();

    for (l, lw) in weights.layers.iter().enumerate() {
        let participating: Vec<bool> = (0..seq_len).map(|t| active_sets[t].contains(l)).collect();
        for b in 0..batch {
            // keys/values of every participating position at this layer,
            // from the current hidden states
            let mut keys: Vec<Option<Vec<S>>> = vec![None; seq_len];
            let mut values: Vec<Option<Vec<S>>> = vec![None; seq_len];
            let mut queries: Vec<Option<Vec<S>>> = vec![None; seq_len];
            for t in 0..seq_len {
                if participating[t] {
                    let normed = ln_row(&hidden[b][t], lw.ln1_gain.row(0), lw.ln1_bias.row(0));
                    queries[t] = Some(proj(&normed, &lw.wq, lw.bq.row(0)));
                    keys[t] = Some(proj(&normed, &lw.wk, lw.bk.row(0)));
                    values[t] = Some(proj(&normed, &lw.wv, lw.bv.row(0)));
                }
            }
            for t in 0..seq_len {
                if !participating[t] {
                    continue;
                }
                let q = queries[t].as_ref().unwrap();
                let mut ctx = vec![S::ZERO; d];
                for h in 0..n_heads {
                    let off = h * head_dim;
                    let mut js = Vec::new();
                    let mut scores = Vec::new();
                    for j in 0..=t {
                        if !participating[j] {
                            continue;
                        }
                        if j < attend_from[b] && j != t {
                            continue;
                        }
                        let k = keys[j].as_ref().unwrap();
                        let mut dot = S::ZERO;
                        for i in 0..head_dim {
                            dot += q[off + i] * k[off + i];
                        }
                        js.push(j);
                        scores.push(dot * scale);
                    }
                    let mut max = scores[0];
                    for &s in &scores[1..] {
                        max = max.maximum(s);
                    }
                    let mut denom = S::ZERO;
                    for s in scores.iter_mut() {
                        *s = (*s - max).exp();
                        denom += *s;
                    }
                    for (idx, &j) in js.iter().enumerate() {
                        let p = scores[idx] / denom;
                        let v = values[j].as_ref().unwrap();
                        for i in 0..head_dim {
                            ctx[off + i] += p * v[off + i];
                        }
                    }
                }
                let attn_out = proj(&ctx, &lw.wo, lw.bo.row(0));
                for c in 0..d {
                    hidden[b][t][c] += attn_out[c];
                }
                let normed2 = ln_row(&hidden[b][t], lw.ln2_gain.row(0), lw.ln2_bias.row(0));
                let mut z = proj(&normed2, &lw.w_in, lw.b_in.row(0));
                for v in z.iter_mut() {
                    *v = gelu(*v);
                }
                let f = proj(&z, &lw.w_out, lw.b_out.row(0));
                for c in 0..d {
                    hidden[b][t][c] += f[c];
                }
            }
        }
    }

    let mut logits = Tensor2D::zeros(batch * seq_len, cfg.vocab_size);
    for b in 0..batch {
        for t in 0..seq_len {
            let y = ln_row(
                &hidden[b][t],
                weights.final_norm_gain.row(0),
                weights.final_norm_bias.row(0),
            );
            let row = logits.row_mut(b * seq_len + t);
            for v in 0..cfg.vocab_size {
                let mut dot = S::ZERO;
                for c in 0..d {
                    dot += y[c] * weights.tok_emb.get(v, c);
                }
                row[v] = dot;
            }
        }
    }
    logits
}

// ---------------------------------------------------------------------------
// Independent full-depth forward + analytic backward in f64.
// ---------------------------------------------------------------------------

struct LnState {
    mean: f64,
    rstd: f64,
}

fn ln_fwd(x: &[f64], gain: &[f64], bias: &[f64]) -> (Vec<f64>, LnState) {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let rstd = 1.0 / (var + LN_EPS).sqrt();
    let out = x
        .iter()
        .enumerate()
        .map(|(c, &v)| (v - mean) * rstd * gain[c] + bias[c])
        .collect();
    (out, LnState { mean, rstd })
}

fn ln_bwd(
    dout: &[f64],
    x: &[f64],
    st: &LnState,
    gain: &[f64],
    dgain: &mut [f64],
    dbias: &mut [f64],
) -> Vec<f64> {
    let n = x.len() as f64;
    let mut m1 = 0.0;
    let mut m2 = 0.0;
    for c in 0..x.len() {
        let xhat = (x[c] - st.mean) * st.rstd;
        let dxhat = dout[c] * gain[c];
        m1 += dxhat;
        m2 += dxhat * xhat;
        dgain[c] += dout[c] * xhat;
        dbias[c] += dout[c];
    }
    m1 /= n;
    m2 /= n;
    (0..x.len())
        .map(|c| {
            let xhat = (x[c] - st.mean) * st.rstd;
            st.rstd * (dout[c] * gain[c] - m1 - xhat * m2)
        })
        .collect()
}

fn gelu_grad(x: f64) -> f64 {
    let c = 0.7978845608028654;
    let k = 0.044715;
    let inner = c * (x + k * x * x * x);
    let t = inner.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * c * (1.0 + 3.0 * k * x * x)
}

struct RefLayerState {
    x_in: Vec<Vec<f64>>,    // per (b*T + t)
    ln1: Vec<LnState>,
    normed1: Vec<Vec<f64>>,
    q: Vec<Vec<f64>>,
    k: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    probs: Vec<Vec<Vec<f64>>>, // [b*H + h][t][j]
    ctx: Vec<Vec<f64>>,
    x_mid: Vec<Vec<f64>>,
    ln2: Vec<LnState>,
    normed2: Vec<Vec<f64>>,
    z: Vec<Vec<f64>>,
    g: Vec<Vec<f64>>,
}

/// Full-depth (no skipping, no padding) teacher-forced loss and parameter
/// gradients, written independently of the engine's training path.
pub fn reference_full_loss_and_grads(
    weights: &DecoderWeights<f64>,
    tokens: &[Vec<u32>],
    mask: &[Vec<bool>],
) -> (f64, DecoderWeights<f64>) {
    let cfg = &weights.config;
    let batch = tokens.len();
    let seq = tokens[0].len();
    let d = cfg.d_model;
    let n_heads = cfg.n_heads;
    let head_dim = d / n_heads;
    let scale = 1.0 / (head_dim as f64).sqrt();
    let vocab = cfg.vocab_size;
    let idx = |b: usize, t: usize| b * seq + t;

    let mut grads = weights.zeros_like();

    // ---- forward ----
    let mut hidden: Vec<Vec<f64>> = (0..batch * seq).map(|_| vec![0.0; d]).collect();
    for b in 0..batch {
        for t in 0..seq {
            let tok = tokens[b][t] as usize;
            for c in 0..d {
                hidden[idx(b, t)][c] = weights.tok_emb.get(tok, c) + weights.pos_emb.get(t, c);
            }
        }
    }

    let mut states: Vec<RefLayerState> = Vec::with_capacity(cfg.num_decoder_layers);
    for lw in &weights.layers {
        let x_in = hidden.clone();
        let mut ln1 = Vec::with_capacity(batch * seq);
        let mut normed1 = Vec::with_capacity(batch * seq);
        for row in &x_in {
            let (n, s) = ln_fwd(row, lw.ln1_gain.row(0), lw.ln1_bias.row(0));
            normed1.push(n);
            ln1.push(s);
        }
        let q: Vec<Vec<f64>> = normed1.iter().map(|n| proj(n, &lw.wq, lw.bq.row(0))).collect();
        let k: Vec<Vec<f64>> = normed1.iter().map(|n| proj(n, &lw.wk, lw.bk.row(0))).collect();
        let v: Vec<Vec<f64>> = normed1.iter().map(|n| proj(n, &lw.wv, lw.bv.row(0))).collect();

        let mut probs: Vec<Vec<Vec<f64>>> = Vec::new();
        let mut ctx: Vec<Vec<f64>> = (0..batch * seq).map(|_| vec![0.0; d]).collect();
        for b in 0..batch {
            for h in 0..n_heads {
                let off = h * head_dim;
                let mut pmat: Vec<Vec<f64>> = Vec::with_capacity(seq);
                for t in 0..seq {
                    let mut scores = Vec::with_capacity(t + 1);
                    for j in 0..=t {
                        let mut dot = 0.0;
                        for i in 0..head_dim {
                            dot += q[idx(b, t)][off + i] * k[idx(b, j)][off + i];
                        }
                        scores.push(dot * scale);
                    }
                    let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let denom: f64 = scores.iter().map(|s| (s - max).exp()).sum();
                    let row: Vec<f64> = scores.iter().map(|s| (s - max).exp() / denom).collect();
                    for (j, &p) in row.iter().enumerate() {
                        for i in 0..head_dim {
                            ctx[idx(b, t)][off + i] += p * v[idx(b, j)][off + i];
                        }
                    }
                    pmat.push(row);
                }
                probs.push(pmat);
            }
        }

        let mut x_mid = Vec::with_capacity(batch * seq);
        for (r, row) in x_in.iter().enumerate() {
            let attn = proj(&ctx[r], &lw.wo, lw.bo.row(0));
            x_mid.push(row.iter().zip(&attn).map(|(a, b)| a + b).collect::<Vec<f64>>());
        }

        let mut ln2 = Vec::with_capacity(batch * seq);
        let mut normed2 = Vec::with_capacity(batch * seq);
        for row in &x_mid {
            let (n, s) = ln_fwd(row, lw.ln2_gain.row(0), lw.ln2_bias.row(0));
            normed2.push(n);
            ln2.push(s);
        }
        let z: Vec<Vec<f64>> = normed2.iter().map(|n| proj(n, &lw.w_in, lw.b_in.row(0))).collect();
        let g: Vec<Vec<f64>> = z
            .iter()
            .map(|row| row.iter().map(|&x| gelu(x)).collect())
            .collect();
        for (r, grow) in g.iter().enumerate() {
            let f = proj(grow, &lw.w_out, lw.b_out.row(0));
            hidden[r] = x_mid[r].iter().zip(&f).map(|(a, b)| a + b).collect();
        }

        states.push(RefLayerState {
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
            z,
            g,
        });
    }

    let final_input = hidden.clone();
    let mut final_ln = Vec::with_capacity(batch * seq);
    let mut final_normed = Vec::with_capacity(batch * seq);
    for row in &final_input {
        let (n, s) = ln_fwd(
            row,
            weights.final_norm_gain.row(0),
            weights.final_norm_bias.row(0),
        );
        final_normed.push(n);
        final_ln.push(s);
    }

    // logits, loss, dlogits
    let mut count = 0usize;
    for b in 0..batch {
        for t in 0..seq - 1 {
            if mask[b][t] {
                count += 1;
            }
        }
    }
    assert!(count > 0, "reference loss needs at least one scored target");
    let inv = 1.0 / count as f64;

    let mut loss = 0.0;
    let mut dnormed_final: Vec<Vec<f64>> = (0..batch * seq).map(|_| vec![0.0; d]).collect();
    for b in 0..batch {
        for t in 0..seq {
            let y = &final_normed[idx(b, t)];
            let mut logits = vec![0.0f64; vocab];
            for (vv, logit) in logits.iter_mut().enumerate() {
                let mut dot = 0.0;
                for c in 0..d {
                    dot += y[c] * weights.tok_emb.get(vv, c);
                }
                *logit = dot;
            }
            let scored = t + 1 < seq && mask[b][t];
            if !scored {
                continue;
            }
            let target = tokens[b][t + 1] as usize;
            let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let denom: f64 = logits.iter().map(|l| (l - max).exp()).sum();
            loss += (max + denom.ln() - logits[target]) * inv;
            for (vv, &logit) in logits.iter().enumerate() {
                let p = (logit - max).exp() / denom;
                let dl = (p - if vv == target { 1.0 } else { 0.0 }) * inv;
                // head is tied to the token embedding
                for c in 0..d {
                    dnormed_final[idx(b, t)][c] += dl * weights.tok_emb.get(vv, c);
                    *grads
                        .tok_emb
                        .data_mut()
                        .get_mut(vv * d + c)
                        .unwrap() += dl * y[c];
                }
            }
        }
    }

    // ---- backward ----
    let mut dhidden: Vec<Vec<f64>> = (0..batch * seq).map(|_| vec![0.0; d]).collect();
    for r in 0..batch * seq {
        let dx = ln_bwd(
            &dnormed_final[r],
            &final_input[r],
            &final_ln[r],
            weights.final_norm_gain.row(0),
            grads.final_norm_gain.row_mut(0),
            grads.final_norm_bias.row_mut(0),
        );
        dhidden[r] = dx;
    }

    for l in (0..cfg.num_decoder_layers).rev() {
        let st = &states[l];
        let lw = &weights.layers[l];
        let gl = &mut grads.layers[l];
        let d_ff = cfg.d_ff;

        let mut dx_mid: Vec<Vec<f64>> = (0..batch * seq).map(|_| vec![0.0; d]).collect();
        for r in 0..batch * seq {
            // x_out = x_mid + W_out(g) + b_out
            let dout = &dhidden[r];
            for c in 0..d {
                dx_mid[r][c] += dout[c];
                gl.b_out.data_mut()[c] += dout[c];
            }
            let mut dg = vec![0.0; d_ff];
            for f in 0..d_ff {
                let mut acc = 0.0;
                for c in 0..d {
                    acc += dout[c] * lw.w_out.get(f, c);
                    gl.w_out.data_mut()[f * d + c] += st.g[r][f] * dout[c];
                }
                dg[f] = acc;
            }
            let dz: Vec<f64> = dg
                .iter()
                .enumerate()
                .map(|(f, &dv)| dv * gelu_grad(st.z[r][f]))
                .collect();
            let mut dnormed2 = vec![0.0; d];
            for f in 0..d_ff {
                gl.b_in.data_mut()[f] += dz[f];
                for c in 0..d {
                    gl.w_in.data_mut()[c * d_ff + f] += st.normed2[r][c] * dz[f];
                    dnormed2[c] += dz[f] * lw.w_in.get(c, f);
                }
            }
            let dx = ln_bwd(
                &dnormed2,
                &st.x_mid[r],
                &st.ln2[r],
                lw.ln2_gain.row(0),
                gl.ln2_gain.row_mut(0),
                gl.ln2_bias.row_mut(0),
            );
            for c in 0..d {
                dx_mid[r][c] += dx[c];
            }
        }

        // x_mid = x_in + Wo(ctx) + bo
        let mut dctx: Vec<Vec<f64>> = (0..batch * seq).map(|_| vec![0.0; d]).collect();
        let mut dx_in: Vec<Vec<f64>> = dx_mid.clone(); // residual branch
        for r in 0..batch * seq {
            for c in 0..d {
                gl.bo.data_mut()[c] += dx_mid[r][c];
            }
            for c_in in 0..d {
                let mut acc = 0.0;
                for c in 0..d {
                    acc += dx_mid[r][c] * lw.wo.get(c_in, c);
                    gl.wo.data_mut()[c_in * d + c] += st.ctx[r][c_in] * dx_mid[r][c];
                }
                dctx[r][c_in] = acc;
            }
        }

        let mut dq: Vec<Vec<f64>> = (0..batch * seq).map(|_| vec![0.0; d]).collect();
        let mut dk: Vec<Vec<f64>> = (0..batch * seq).map(|_| vec![0.0; d]).collect();
        let mut dv: Vec<Vec<f64>> = (0..batch * seq).map(|_| vec![0.0; d]).collect();
        for b in 0..batch {
            for h in 0..n_heads {
                let off = h * head_dim;
                let pmat = &st.probs[b * n_heads + h];
                for t in 0..seq {
                    let mut dprobs = vec![0.0; t + 1];
                    for (j, dp) in dprobs.iter_mut().enumerate() {
                        let mut acc = 0.0;
                        for i in 0..head_dim {
                            acc += dctx[idx(b, t)][off + i] * st.v[idx(b, j)][off + i];
                        }
                        *dp = acc;
                    }
                    let srow: f64 = (0..=t).map(|j| pmat[t][j] * dprobs[j]).sum();
                    for j in 0..=t {
                        let p = pmat[t][j];
                        for i in 0..head_dim {
                            dv[idx(b, j)][off + i] += p * dctx[idx(b, t)][off + i];
                        }
                        let dscore = p * (dprobs[j] - srow) * scale;
                        for i in 0..head_dim {
                            dq[idx(b, t)][off + i] += dscore * st.k[idx(b, j)][off + i];
                            dk[idx(b, j)][off + i] += dscore * st.q[idx(b, t)][off + i];
                        }
                    }
                }
            }
        }

        for r in 0..batch * seq {
            let mut dnormed1 = vec![0.0; d];
            for c_in in 0..d {
                let mut acc = 0.0;
                for c in 0..d {
                    acc += dq[r][c] * lw.wq.get(c_in, c)
                        + dk[r][c] * lw.wk.get(c_in, c)
                        + dv[r][c] * lw.wv.get(c_in, c);
                    gl.wq.data_mut()[c_in * d + c] += st.normed1[r][c_in] * dq[r][c];
                    gl.wk.data_mut()[c_in * d + c] += st.normed1[r][c_in] * dk[r][c];
                    gl.wv.data_mut()[c_in * d + c] += st.normed1[r][c_in] * dv[r][c];
                }
                dnormed1[c_in] = acc;
            }
            for c in 0..d {
                gl.bq.data_mut()[c] += dq[r][c];
                gl.bk.data_mut()[c] += dk[r][c];
                gl.bv.data_mut()[c] += dv[r][c];
            }
            let dx = ln_bwd(
                &dnormed1,
                &st.x_in[r],
                &st.ln1[r],
                lw.ln1_gain.row(0),
                gl.ln1_gain.row_mut(0),
                gl.ln1_bias.row_mut(0),
            );
            for c in 0..d {
                dx_in[r][c] += dx[c];
            }
        }

        dhidden = dx_in;
    }

    for b in 0..batch {
        for t in 0..seq {
            let tok = tokens[b][t] as usize;
            for c in 0..d {
                grads.tok_emb.data_mut()[tok * d + c] += dhidden[idx(b, t)][c];
                grads.pos_emb.data_mut()[t * d + c] += dhidden[idx(b, t)][c];
            }
        }
    }

    (loss, grads)
}

/// Deterministic pseudo-random token grid (xorshift; not the engine's RNG).
pub fn token_grid(batch: usize, len: usize, vocab: usize, seed: u64) -> Vec<Vec<u32>> {
    let mut state = seed.wrapping_mul(2654435761).wrapping_add(12345) | 1;
    let mut next = move || {
        state ^= state << 13;
        state ^= state >> 7;
        state ^= state << 17;
        state
    };
    (0..batch)
        .map(|_| (0..len).map(|_| (next() % vocab as u64) as u32).collect())
        .collect()
}

/// Decodes a fixed token grid step by step through the cached engine and
/// returns the largest absolute logit difference against the from-scratch
/// reference over every (position, row, vocab) entry. Panics if the cache
/// recomputed or backfilled anything.
pub fn incremental_vs_reference<S: Scalar>(
    weights: &DecoderWeights<S>,
    tokens: &[Vec<u32>],
    sets: &[ActiveLayerSet],
) -> f64 {
    use skipdecode::kvcache::KVCache;
    use skipdecode::model::forward_step;

    let cfg = &weights.config;
    let batch = tokens.len();
    let len = tokens[0].len();
    let attend_from = vec![0usize; batch];
    let mut cache = KVCache::new(cfg.num_decoder_layers, cfg.max_positions, batch);

    let reference = reference_skip_logits(weights, tokens, sets, &attend_from);
    let mut worst = 0.0f64;
    for t in 0..len {
        let column: Vec<u32> = tokens.iter().map(|r| r[t]).collect();
        let out = forward_step(weights, &column, t, &sets[t], &mut cache, &attend_from, false)
            .expect("incremental step");
        for b in 0..batch {
            let engine = out.logits.row(b);
            let reference_row = reference.row(b * len + t);
            for (e, r) in engine.iter().zip(reference_row.iter()) {
                worst = worst.max((e.to_f64() - r.to_f64()).abs());
            }
        }
    }
    assert_eq!(cache.recompute_count(), 0, "cached decode recomputed K/V");
    assert_eq!(cache.backfill_count(), 0, "cached decode backfilled K/V");
    worst
}

/// Worst relative disagreement over all parameter tensors, with a floor so
/// near-zero entries compare absolutely.
pub fn max_param_rel_err(a: &DecoderWeights<f64>, b: &DecoderWeights<f64>) -> f64 {
    let mut worst = 0.0f64;
    for ((_, ta), (_, tb)) in a.tensors().iter().zip(b.tensors().iter()) {
        for (&va, &vb) in ta.data().iter().zip(tb.data().iter()) {
            let denom = va.abs().max(vb.abs()).max(1e-3);
            worst = worst.max((va - vb).abs() / denom);
        }
    }
    worst
}
