//! GPT-style decoder-only transformer whose forward pass executes an
//! arbitrary active layer set.
//!
//! Blocks are pre-norm (attention then GELU feed-forward), positions use
//! learned absolute embeddings, and the LM head is tied to the token
//! embedding. A layer outside the active set passes the hidden state through
//! unchanged and contributes nothing to the KV cache.

use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::kvcache::{KVCache, KvProjection};
use crate::schedule::ActiveLayerSet;
use crate::tensor::{Scalar, Tensor2D};
use crate::{Error, Result};

/// Layer-norm epsilon used everywhere in the model.
pub const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub num_decoder_layers: usize,
    pub max_positions: usize,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            self.vocab_size,
            self.d_model,
            self.n_heads,
            self.d_ff,
            self.num_decoder_layers,
            self.max_positions,
        ];
        if counts.contains(&0) {
            return Err(Error::contract("all model dimensions must be >= 1"));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::contract(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}

/// Parameters of one decoder block. Biases and norm parameters are stored as
/// 1-row tensors so every parameter is visited uniformly (checkpointing,
/// optimizer state, gradient checks).
#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights<S: Scalar> {
    pub ln1_gain: Tensor2D<S>,
    pub ln1_bias: Tensor2D<S>,
    pub wq: Tensor2D<S>,
    pub bq: Tensor2D<S>,
    pub wk: Tensor2D<S>,
    pub bk: Tensor2D<S>,
    pub wv: Tensor2D<S>,
    pub bv: Tensor2D<S>,
    pub wo: Tensor2D<S>,
    pub bo: Tensor2D<S>,
    pub ln2_gain: Tensor2D<S>,
    pub ln2_bias: Tensor2D<S>,
    pub w_in: Tensor2D<S>,
    pub b_in: Tensor2D<S>,
    pub w_out: Tensor2D<S>,
    pub b_out: Tensor2D<S>,
}

/// Full parameter set. The LM head is tied to `tok_emb`.
#[derive(Debug, Clone, PartialEq)]
pub struct DecoderWeights<S: Scalar> {
    pub config: ModelConfig,
    pub tok_emb: Tensor2D<S>,
    pub pos_emb: Tensor2D<S>,
    pub layers: Vec<LayerWeights<S>>,
    pub final_norm_gain: Tensor2D<S>,
    pub final_norm_bias: Tensor2D<S>,
}

/// Output of one decode step.
#[derive(Debug, Clone)]
pub struct StepOutput<S: Scalar> {
    /// (batch, vocab) next-token logits.
    pub logits: Tensor2D<S>,
    pub executed_layers: ActiveLayerSet,
    /// When requested: hidden state after the embedding, then after each
    /// executed layer in ascending order.
    pub hidden_states: Option<Vec<Tensor2D<S>>>,
}

struct NormalSampler {
    rng: StdRng,
    spare: Option<f64>,
}

impl NormalSampler {
    fn new(seed: u64) -> Self {
        NormalSampler {
            rng: StdRng::seed_from_u64(seed),
            spare: None,
        }
    }

    /// Box-Muller standard normal.
    fn sample(&mut self) -> f64 {
        if let Some(z) = self.spare.take() {
            return z;
        }
        let u1: f64 = 1.0 - self.rng.gen::<f64>(); // (0, 1]
        let u2: f64 = self.rng.gen();
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = 2.0 * std::f64::consts::PI * u2;
        self.spare = Some(r * theta.sin());
        r * theta.cos()
    }

    fn tensor<S: Scalar>(&mut self, rows: usize, cols: usize, std: f64) -> Tensor2D<S> {
        let data = (0..rows * cols)
            .map(|_| S::from_f64(self.sample() * std))
            .collect();
        Tensor2D::from_vec(rows, cols, data).expect("sized by construction")
    }
}

/// Deterministic scaled-normal initialization (std 0.02; residual output
/// projections scaled by 1 / sqrt(2 * num_decoder_layers)).
pub fn init_weights<S: Scalar>(cfg: &ModelConfig, seed: u64) -> Result<DecoderWeights<S>> {
    cfg.validate()?;
    let mut sampler = NormalSampler::new(seed);
    let std = 0.02;
    let out_std = std / (2.0 * cfg.num_decoder_layers as f64).sqrt();
    let d = cfg.d_model;

    let tok_emb = sampler.tensor(cfg.vocab_size, d, std);
    let pos_emb = sampler.tensor(cfg.max_positions, d, std);
    let mut layers = Vec::with_capacity(cfg.num_decoder_layers);
    for _ in 0..cfg.num_decoder_layers {
        layers.push(LayerWeights {
            ln1_gain: Tensor2D::filled(1, d, S::ONE),
            ln1_bias: Tensor2D::zeros(1, d),
            wq: sampler.tensor(d, d, std),
            bq: Tensor2D::zeros(1, d),
            wk: sampler.tensor(d, d, std),
            bk: Tensor2D::zeros(1, d),
            wv: sampler.tensor(d, d, std),
            bv: Tensor2D::zeros(1, d),
            wo: sampler.tensor(d, d, out_std),
            bo: Tensor2D::zeros(1, d),
            ln2_gain: Tensor2D::filled(1, d, S::ONE),
            ln2_bias: Tensor2D::zeros(1, d),
            w_in: sampler.tensor(d, cfg.d_ff, std),
            b_in: Tensor2D::zeros(1, cfg.d_ff),
            w_out: sampler.tensor(cfg.d_ff, d, out_std),
            b_out: Tensor2D::zeros(1, d),
        });
    }
    Ok(DecoderWeights {
        config: *cfg,
        tok_emb,
        pos_emb,
        layers,
        final_norm_gain: Tensor2D::filled(1, d, S::ONE),
        final_norm_bias: Tensor2D::zeros(1, d),
    })
}

impl<S: Scalar> DecoderWeights<S> {
    /// Canonical named-tensor traversal; the checkpoint manifest, optimizer
    /// state, and gradient checks all follow this order.
    pub fn tensor_names(cfg: &ModelConfig) -> Vec<String> {
        let mut names = vec!["tok_emb".to_string(), "pos_emb".to_string()];
        for l in 0..cfg.num_decoder_layers {
            for field in [
                "ln1_gain", "ln1_bias", "wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo",
                "ln2_gain", "ln2_bias", "w_in", "b_in", "w_out", "b_out",
            ] {
                names.push(format!("layer{l}.{field}"));
            }
        }
        names.push("final_norm_gain".to_string());
        names.push("final_norm_bias".to_string());
        names
    }

    pub fn tensors(&self) -> Vec<(&str, &Tensor2D<S>)> {
        let mut out: Vec<(&str, &Tensor2D<S>)> =
            vec![("tok_emb", &self.tok_emb), ("pos_emb", &self.pos_emb)];
        for layer in &self.layers {
            out.push(("ln1_gain", &layer.ln1_gain));
            out.push(("ln1_bias", &layer.ln1_bias));
            out.push(("wq", &layer.wq));
            out.push(("bq", &layer.bq));
            out.push(("wk", &layer.wk));
            out.push(("bk", &layer.bk));
            out.push(("wv", &layer.wv));
            out.push(("bv", &layer.bv));
            out.push(("wo", &layer.wo));
            out.push(("bo", &layer.bo));
            out.push(("ln2_gain", &layer.ln2_gain));
            out.push(("ln2_bias", &layer.ln2_bias));
            out.push(("w_in", &layer.w_in));
            out.push(("b_in", &layer.b_in));
            out.push(("w_out", &layer.w_out));
            out.push(("b_out", &layer.b_out));
        }
        out.push(("final_norm_gain", &self.final_norm_gain));
        out.push(("final_norm_bias", &self.final_norm_bias));
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor2D<S>> {
        let mut out: Vec<&mut Tensor2D<S>> = vec![&mut self.tok_emb, &mut self.pos_emb];
        for layer in &mut self.layers {
            out.push(&mut layer.ln1_gain);
            out.push(&mut layer.ln1_bias);
            out.push(&mut layer.wq);
            out.push(&mut layer.bq);
            out.push(&mut layer.wk);
            out.push(&mut layer.bk);
            out.push(&mut layer.wv);
            out.push(&mut layer.bv);
            out.push(&mut layer.wo);
            out.push(&mut layer.bo);
            out.push(&mut layer.ln2_gain);
            out.push(&mut layer.ln2_bias);
            out.push(&mut layer.w_in);
            out.push(&mut layer.b_in);
            out.push(&mut layer.w_out);
            out.push(&mut layer.b_out);
        }
        out.push(&mut self.final_norm_gain);
        out.push(&mut self.final_norm_bias);
        out
    }

    /// Same-shape zero tensors (gradient/optimizer accumulators).
    pub fn zeros_like(&self) -> DecoderWeights<S> {
        let mut copy = self.clone();
        for t in copy.tensors_mut() {
            for v in t.data_mut() {
                *v = S::ZERO;
            }
        }
        copy
    }

    pub fn cast<T: Scalar>(&self) -> DecoderWeights<T> {
        DecoderWeights {
            config: self.config,
            tok_emb: self.tok_emb.cast(),
            pos_emb: self.pos_emb.cast(),
            layers: self
                .layers
                .iter()
                .map(|l| LayerWeights {
                    ln1_gain: l.ln1_gain.cast(),
                    ln1_bias: l.ln1_bias.cast(),
                    wq: l.wq.cast(),
                    bq: l.bq.cast(),
                    wk: l.wk.cast(),
                    bk: l.bk.cast(),
                    wv: l.wv.cast(),
                    bv: l.bv.cast(),
                    wo: l.wo.cast(),
                    bo: l.bo.cast(),
                    ln2_gain: l.ln2_gain.cast(),
                    ln2_bias: l.ln2_bias.cast(),
                    w_in: l.w_in.cast(),
                    b_in: l.b_in.cast(),
                    w_out: l.w_out.cast(),
                    b_out: l.b_out.cast(),
                })
                .collect(),
            final_norm_gain: self.final_norm_gain.cast(),
            final_norm_bias: self.final_norm_bias.cast(),
        }
    }

    /// Projection bundle used to backfill layer `l` KV entries.
    pub fn kv_projection(&self, l: usize) -> KvProjection<'_, S> {
        let layer = &self.layers[l];
        KvProjection {
            ln_gain: layer.ln1_gain.row(0),
            ln_bias: layer.ln1_bias.row(0),
            ln_eps: S::from_f64(LN_EPS),
            wk: &layer.wk,
            bk: layer.bk.row(0),
            wv: &layer.wv,
            bv: layer.bv.row(0),
        }
    }
}

/// Token + positional embedding for one batch column.
pub fn embed_tokens<S: Scalar>(
    weights: &DecoderWeights<S>,
    token_ids: &[u32],
    position: usize,
) -> Result<Tensor2D<S>> {
    let cfg = &weights.config;
    if position >= cfg.max_positions {
        return Err(Error::contract(format!(
            "position {position} >= max_positions {}",
            cfg.max_positions
        )));
    }
    let mut out = Tensor2D::zeros(token_ids.len(), cfg.d_model);
    for (b, &tok) in token_ids.iter().enumerate() {
        let tok = tok as usize;
        if tok >= cfg.vocab_size {
            return Err(Error::contract(format!(
                "token id {tok} >= vocab_size {}",
                cfg.vocab_size
            )));
        }
        let row = out.row_mut(b);
        let emb = weights.tok_emb.row(tok);
        let pos = weights.pos_emb.row(position);
        for c in 0..cfg.d_model {
            row[c] = emb[c] + pos[c];
        }
    }
    Ok(out)
}

/// Final layer norm plus the tied LM head.
pub fn lm_head<S: Scalar>(weights: &DecoderWeights<S>, hidden: &Tensor2D<S>) -> Result<Tensor2D<S>> {
    let normed = hidden.layer_norm(
        weights.final_norm_gain.row(0),
        weights.final_norm_bias.row(0),
        S::from_f64(LN_EPS),
    )?;
    normed.matmul_transb(&weights.tok_emb)
}

/// Pre-norm causal self-attention sublayer for one position step.
///
/// Computes this position's K/V from the normed hidden state, appends them
/// to the cache at `layer`, attends over every cached position `<= position`
/// and adds the projected context back onto `hidden`. Row `b` only attends to
/// positions `>= attend_from[b]` (left-pad masking) plus itself.
///
/// An absent cached position is a contract violation here: the nested-budget
/// policy guarantees it cannot happen, and baseline policies must backfill
/// before stepping.
pub fn attention_sublayer<S: Scalar>(
    weights: &DecoderWeights<S>,
    layer: usize,
    hidden: &Tensor2D<S>,
    position: usize,
    cache: &mut KVCache<S>,
    attend_from: &[usize],
) -> Result<Tensor2D<S>> {
    let cfg = &weights.config;
    let lw = &weights.layers[layer];
    let batch = hidden.rows();
    if attend_from.len() != batch {
        return Err(Error::contract("attend_from length must equal batch size"));
    }

    let normed = hidden.layer_norm(lw.ln1_gain.row(0), lw.ln1_bias.row(0), S::from_f64(LN_EPS))?;
    let mut q = normed.matmul(&lw.wq)?;
    q.add_row_broadcast(lw.bq.row(0))?;
    let mut k = normed.matmul(&lw.wk)?;
    k.add_row_broadcast(lw.bk.row(0))?;
    let mut v = normed.matmul(&lw.wv)?;
    v.add_row_broadcast(lw.bv.row(0))?;

    cache.append(layer, position, k, v)?;
    let gathered = cache.gather(layer, position);
    if !gathered.absent.is_empty() {
        return Err(Error::contract(format!(
            "attention at layer {layer}, position {position} found absent cached positions {:?}",
            gathered.absent
        )));
    }

    let n_heads = cfg.n_heads;
    let head_dim = cfg.head_dim();
    let scale = S::ONE / S::from_f64(head_dim as f64).sqrt();
    let ctx_len = gathered.blocks.len();
    let mut ctx = Tensor2D::zeros(batch, cfg.d_model);
    let mut scores = vec![S::ZERO; ctx_len];
    for b in 0..batch {
        for h in 0..n_heads {
            let off = h * head_dim;
            let q_row = &q.row(b)[off..off + head_dim];

            let mut max: Option<S> = None;
            for (idx, &(pos, block)) in gathered.blocks.iter().enumerate() {
                if pos < attend_from[b] && pos != position {
                    continue;
                }
                let k_row = &block.keys.row(b)[off..off + head_dim];
                let mut dot = S::ZERO;
                for i in 0..head_dim {
                    dot += q_row[i] * k_row[i];
                }
                let s = dot * scale;
                scores[idx] = s;
                max = Some(match max {
                    Some(m) => m.maximum(s),
                    None => s,
                });
            }
            let max = max.expect("self position is always attendable");

            let mut denom = S::ZERO;
            for (idx, &(pos, _)) in gathered.blocks.iter().enumerate() {
                if pos < attend_from[b] && pos != position {
                    scores[idx] = S::ZERO;
                } else {
                    let e = (scores[idx] - max).exp();
                    scores[idx] = e;
                    denom += e;
                }
            }
            let ctx_row = &mut ctx.row_mut(b)[off..off + head_dim];
            for (idx, &(pos, block)) in gathered.blocks.iter().enumerate() {
                if pos < attend_from[b] && pos != position {
                    continue;
                }
                let w = scores[idx] / denom;
                let v_row = &block.values.row(b)[off..off + head_dim];
                for i in 0..head_dim {
                    ctx_row[i] += w * v_row[i];
                }
            }
        }
    }

    let mut attn_out = ctx.matmul(&lw.wo)?;
    attn_out.add_row_broadcast(lw.bo.row(0))?;
    hidden.add(&attn_out)
}

/// Pre-norm GELU feed-forward sublayer.
pub fn ffn_sublayer<S: Scalar>(
    weights: &DecoderWeights<S>,
    layer: usize,
    hidden: &Tensor2D<S>,
) -> Result<Tensor2D<S>> {
    let lw = &weights.layers[layer];
    let normed = hidden.layer_norm(lw.ln2_gain.row(0), lw.ln2_bias.row(0), S::from_f64(LN_EPS))?;
    let mut z = normed.matmul(&lw.w_in)?;
    z.add_row_broadcast(lw.b_in.row(0))?;
    let mut f = z.gelu().matmul(&lw.w_out)?;
    f.add_row_broadcast(lw.b_out.row(0))?;
    hidden.add(&f)
}

/// One full decoder block (attention + feed-forward) at one position.
pub fn decoder_layer_step<S: Scalar>(
    weights: &DecoderWeights<S>,
    layer: usize,
    hidden: &Tensor2D<S>,
    position: usize,
    cache: &mut KVCache<S>,
    attend_from: &[usize],
) -> Result<Tensor2D<S>> {
    let hidden = attention_sublayer(weights, layer, hidden, position, cache, attend_from)?;
    ffn_sublayer(weights, layer, &hidden)
}

/// Executes one batch column through the active layer set.
///
/// Layers outside `active` leave the hidden state untouched and append
/// nothing to the cache.
pub fn forward_step<S: Scalar>(
    weights: &DecoderWeights<S>,
    token_ids: &[u32],
    position: usize,
    active: &ActiveLayerSet,
    cache: &mut KVCache<S>,
    attend_from: &[usize],
    capture_hidden: bool,
) -> Result<StepOutput<S>> {
    let cfg = &weights.config;
    if let Some(&worst) = active.indices().last() {
        if worst >= cfg.num_decoder_layers {
            return Err(Error::contract(format!(
                "active layer {worst} out of range ({} layers)",
                cfg.num_decoder_layers
            )));
        }
    }
    let mut hidden = embed_tokens(weights, token_ids, position)?;
    let mut captured = capture_hidden.then(|| vec![hidden.clone()]);
    for layer in active.iter() {
        hidden = decoder_layer_step(weights, layer, &hidden, position, cache, attend_from)?;
        if let Some(c) = captured.as_mut() {
            c.push(hidden.clone());
        }
    }
    let logits = lm_head(weights, &hidden)?;
    Ok(StepOutput {
        logits,
        executed_layers: active.clone(),
        hidden_states: captured,
    })
}

/// Runs a left-padded prompt batch through the full network in one parallel
/// teacher-forced pass, populating the cache at every layer and position.
///
/// `prompts` rows must share one length (left-padded); `attend_from[b]` is
/// the first non-pad column of row `b`. Pad columns are processed like any
/// other column (full depth, cached) but no later column attends to them.
pub fn process_prompt<S: Scalar>(
    weights: &DecoderWeights<S>,
    prompts: &[Vec<u32>],
    attend_from: &[usize],
    cache: &mut KVCache<S>,
) -> Result<Vec<StepOutput<S>>> {
    let full = ActiveLayerSet::full(weights.config.num_decoder_layers);
    process_prompt_with_layers(weights, prompts, attend_from, cache, &full)
}

/// [`process_prompt`] restricted to an explicit layer set, shared by every
/// prompt column (truncation-style policies prune the prompt too). Layers
/// outside the set are identities and cache nothing.
pub fn process_prompt_with_layers<S: Scalar>(
    weights: &DecoderWeights<S>,
    prompts: &[Vec<u32>],
    attend_from: &[usize],
    cache: &mut KVCache<S>,
    layers: &ActiveLayerSet,
) -> Result<Vec<StepOutput<S>>> {
    let cfg = &weights.config;
    let batch = prompts.len();
    if batch == 0 {
        return Err(Error::contract("empty prompt batch"));
    }
    let len = prompts[0].len();
    if prompts.iter().any(|p| p.len() != len) {
        return Err(Error::contract("prompt rows must be left-padded to one length"));
    }
    if len == 0 {
        return Err(Error::contract("prompts must contain at least one token"));
    }
    if len > cfg.max_positions {
        return Err(Error::contract(format!(
            "prompt length {len} exceeds max_positions {}",
            cfg.max_positions
        )));
    }
    if attend_from.len() != batch {
        return Err(Error::contract("attend_from length must equal batch size"));
    }

    let d = cfg.d_model;
    let n_heads = cfg.n_heads;
    let head_dim = cfg.head_dim();
    let scale = S::ONE / S::from_f64(head_dim as f64).sqrt();

    // hidden: (batch * len, d), row index b * len + t
    let mut hidden = Tensor2D::zeros(batch * len, d);
    for (b, row_tokens) in prompts.iter().enumerate() {
        for (t, &tok) in row_tokens.iter().enumerate() {
            let tok = tok as usize;
            if tok >= cfg.vocab_size {
                return Err(Error::contract(format!(
                    "token id {tok} >= vocab_size {}",
                    cfg.vocab_size
                )));
            }
            let out = hidden.row_mut(b * len + t);
            let emb = weights.tok_emb.row(tok);
            let pos = weights.pos_emb.row(t);
            for c in 0..d {
                out[c] = emb[c] + pos[c];
            }
        }
    }

    for (l, lw) in weights.layers.iter().enumerate() {
        if !layers.contains(l) {
            continue;
        }
        let normed = hidden.layer_norm(lw.ln1_gain.row(0), lw.ln1_bias.row(0), S::from_f64(LN_EPS))?;
        let mut q = normed.matmul(&lw.wq)?;
        q.add_row_broadcast(lw.bq.row(0))?;
        let mut k = normed.matmul(&lw.wk)?;
        k.add_row_broadcast(lw.bk.row(0))?;
        let mut v = normed.matmul(&lw.wv)?;
        v.add_row_broadcast(lw.bv.row(0))?;

        // store this layer's K/V per position as (batch, d) blocks
        for t in 0..len {
            let mut kt = Tensor2D::zeros(batch, d);
            let mut vt = Tensor2D::zeros(batch, d);
            for b in 0..batch {
                kt.row_mut(b).copy_from_slice(k.row(b * len + t));
                vt.row_mut(b).copy_from_slice(v.row(b * len + t));
            }
            cache.append(l, t, kt, vt)?;
        }

        let mut ctx = Tensor2D::zeros(batch * len, d);
        let mut scores = vec![S::ZERO; len];
        for b in 0..batch {
            for h in 0..n_heads {
                let off = h * head_dim;
                for t in 0..len {
                    let q_row = &q.row(b * len + t)[off..off + head_dim];
                    let attendable = |j: usize| j <= t && (j >= attend_from[b] || j == t);

                    let mut max: Option<S> = None;
                    for j in 0..=t {
                        if !attendable(j) {
                            continue;
                        }
                        let k_row = &k.row(b * len + j)[off..off + head_dim];
                        let mut dot = S::ZERO;
                        for i in 0..head_dim {
                            dot += q_row[i] * k_row[i];
                        }
                        let s = dot * scale;
                        scores[j] = s;
                        max = Some(match max {
                            Some(m) => m.maximum(s),
                            None => s,
                        });
                    }
                    let max = max.expect("self position is always attendable");
                    let mut denom = S::ZERO;
                    for j in 0..=t {
                        if attendable(j) {
                            let e = (scores[j] - max).exp();
                            scores[j] = e;
                            denom += e;
                        }
                    }
                    let ctx_row = &mut ctx.row_mut(b * len + t)[off..off + head_dim];
                    for j in 0..=t {
                        if !attendable(j) {
                            continue;
                        }
                        let w = scores[j] / denom;
                        let v_row = &v.row(b * len + j)[off..off + head_dim];
                        for i in 0..head_dim {
                            ctx_row[i] += w * v_row[i];
                        }
                    }
                }
            }
        }

        let mut attn_out = ctx.matmul(&lw.wo)?;
        attn_out.add_row_broadcast(lw.bo.row(0))?;
        hidden.add_assign(&attn_out)?;

        let normed2 = hidden.layer_norm(lw.ln2_gain.row(0), lw.ln2_bias.row(0), S::from_f64(LN_EPS))?;
        let mut z = normed2.matmul(&lw.w_in)?;
        z.add_row_broadcast(lw.b_in.row(0))?;
        let mut f = z.gelu().matmul(&lw.w_out)?;
        f.add_row_broadcast(lw.b_out.row(0))?;
        hidden.add_assign(&f)?;
    }

    let mut outputs = Vec::with_capacity(len);
    for t in 0..len {
        let mut at = Tensor2D::zeros(batch, d);
        for b in 0..batch {
            at.row_mut(b).copy_from_slice(hidden.row(b * len + t));
        }
        outputs.push(StepOutput {
            logits: lm_head(weights, &at)?,
            executed_layers: layers.clone(),
            hidden_states: None,
        });
    }
    Ok(outputs)
}
