//! Comparison decode policies: fixed-layer truncation and adaptive
//! hidden-state-saturation exit with KV backfill.
//!
//! Both run against the same model and cache as the scheduled policy, so
//! budget and quality comparisons are head-to-head. Truncation executes the
//! bottom `exit_layer` blocks for every token, prompt included. The
//! saturation policy decodes one sequence at a time, exits each token once
//! consecutive hidden states stop moving, and lazily backfills missing cache
//! entries whenever a later token runs deeper than a predecessor.

use std::time::Instant;

use rand::rngs::StdRng;

use crate::generation::{
    layer_flops, run_decode, sample_top_p, DecodeSpec, GenerationConfig, GenerationOutput,
    PolicyKind, PositionBudget,
};
use crate::generation::{row_rng, BudgetReport};
use crate::kvcache::KVCache;
use crate::model::{decoder_layer_step, embed_tokens, lm_head, process_prompt, DecoderWeights};
use crate::schedule::ActiveLayerSet;
use crate::tensor::{Scalar, Tensor2D};
use crate::{Error, Result};

/// Fixed early-termination policy: every token runs layers `0..exit_layer`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TruncationPolicy {
    pub exit_layer: usize,
}

impl TruncationPolicy {
    pub fn validate(&self, num_decoder_layers: usize) -> Result<()> {
        if self.exit_layer == 0 || self.exit_layer > num_decoder_layers {
            return Err(Error::contract(format!(
                "truncation exit_layer {} must be in 1..={num_decoder_layers}",
                self.exit_layer
            )));
        }
        Ok(())
    }
}

/// Adaptive exit once consecutive hidden states reach cosine similarity
/// `lambda`, but never before `min_layer` layers were executed.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SaturationPolicy {
    pub lambda: f64,
    pub min_layer: usize,
}

impl SaturationPolicy {
    pub fn validate(&self) -> Result<()> {
        if self.min_layer == 0 {
            return Err(Error::contract("saturation min_layer must be >= 1"));
        }
        if self.lambda <= 0.0 {
            return Err(Error::contract("saturation lambda must be > 0"));
        }
        Ok(())
    }
}

/// Decodes with a bottom-prefix layer set at every position, prompt included.
/// Supports batching and caching; never recomputes or backfills.
pub fn truncation_generate<S: Scalar>(
    weights: &DecoderWeights<S>,
    policy: &TruncationPolicy,
    prompts: &[Vec<u32>],
    gen_cfg: &GenerationConfig,
) -> Result<GenerationOutput<S>> {
    policy.validate(weights.config.num_decoder_layers)?;
    let set = ActiveLayerSet::prefix(policy.exit_layer);
    let mut column_set = |_n: usize| Ok(ActiveLayerSet::prefix(policy.exit_layer));
    run_decode(
        weights,
        prompts,
        gen_cfg,
        DecodeSpec {
            policy: PolicyKind::Truncation,
            prompt_set: set,
            max_generation_budget: policy.exit_layer,
            required_prompt_len: None,
            column_set: &mut column_set,
        },
    )
}

fn cosine_similarity<S: Scalar>(a: &[S], b: &[S]) -> f64 {
    let mut dot = 0.0f64;
    let mut na = 0.0f64;
    let mut nb = 0.0f64;
    for (&x, &y) in a.iter().zip(b) {
        let (x, y) = (x.to_f64(), y.to_f64());
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    dot / (na.sqrt() * nb.sqrt())
}

/// Post-hoc exit decision for one token given its consecutive hidden states
/// (`hiddens[0]` is the embedding, `hiddens[l]` the state after `l` executed
/// layers). Returns the number of layers the token should execute: the
/// smallest `l >= min_layer` with `cos(h_l, h_{l-1}) >= lambda`, or the full
/// depth if saturation is never reached.
pub fn saturation_exit_layer<S: Scalar>(hiddens: &[Tensor2D<S>], policy: &SaturationPolicy) -> usize {
    let full = hiddens.len() - 1;
    for l in policy.min_layer..=full {
        if cosine_similarity(hiddens[l].row(0), hiddens[l - 1].row(0)) >= policy.lambda {
            return l;
        }
    }
    full
}

/// Per-token exit decision driver for the adaptive policy. The scripted
/// implementation exists so backfill behavior can be tested on exact traces.
pub trait ExitDecider<S: Scalar> {
    /// Called after a token has executed `layers_done` layers (`prev` and
    /// `current` are the hidden states before/after the block just executed).
    /// Returning `true` stops the token here.
    fn should_exit(
        &mut self,
        token_index: usize,
        layers_done: usize,
        prev: &Tensor2D<S>,
        current: &Tensor2D<S>,
    ) -> bool;
}

impl<S: Scalar> ExitDecider<S> for SaturationPolicy {
    fn should_exit(
        &mut self,
        _token_index: usize,
        layers_done: usize,
        prev: &Tensor2D<S>,
        current: &Tensor2D<S>,
    ) -> bool {
        layers_done >= self.min_layer && cosine_similarity(current.row(0), prev.row(0)) >= self.lambda
    }
}

/// Forces a predetermined exit layer per generated token (test instrument).
#[derive(Debug, Clone)]
pub struct ScriptedExits(pub Vec<usize>);

impl<S: Scalar> ExitDecider<S> for ScriptedExits {
    fn should_exit(
        &mut self,
        token_index: usize,
        layers_done: usize,
        _prev: &Tensor2D<S>,
        _current: &Tensor2D<S>,
    ) -> bool {
        let target = self.0.get(token_index).copied().unwrap_or(usize::MAX);
        layers_done >= target
    }
}

/// Adaptive-exit decode (single sequence only).
///
/// The prompt runs at full depth. Each generated token executes bottom
/// layers until the saturation policy fires; when a later token runs deeper
/// than a predecessor, the predecessor's missing K/V entries are backfilled
/// lazily from its last computed hidden state, and every backfill is counted.
pub fn calm_dec_generate<S: Scalar>(
    weights: &DecoderWeights<S>,
    policy: &SaturationPolicy,
    prompts: &[Vec<u32>],
    gen_cfg: &GenerationConfig,
) -> Result<GenerationOutput<S>> {
    policy.validate()?;
    let mut policy = *policy;
    calm_dec_generate_with(weights, &mut policy, prompts, gen_cfg)
}

/// [`calm_dec_generate`] with an arbitrary exit decider.
pub fn calm_dec_generate_with<S: Scalar>(
    weights: &DecoderWeights<S>,
    decider: &mut dyn ExitDecider<S>,
    prompts: &[Vec<u32>],
    gen_cfg: &GenerationConfig,
) -> Result<GenerationOutput<S>> {
    let started = Instant::now();
    gen_cfg.validate()?;
    if prompts.len() != 1 {
        return Err(Error::UnsupportedPolicy {
            policy: "calm_dec".into(),
            reason: format!(
                "adaptive per-token exits preclude batching (got batch size {})",
                prompts.len()
            ),
        });
    }
    let cfg = &weights.config;
    let num_layers = cfg.num_decoder_layers;
    let prompt = prompts[0].clone();
    if prompt.is_empty() {
        return Err(Error::contract("prompt must contain at least one token"));
    }
    let prompt_len = prompt.len();
    if prompt_len + gen_cfg.max_new_tokens > cfg.max_positions {
        return Err(Error::contract(format!(
            "prompt {} + max_new_tokens {} exceeds max_positions {}",
            prompt_len, gen_cfg.max_new_tokens, cfg.max_positions
        )));
    }

    let mut cache = KVCache::new(num_layers, cfg.max_positions, 1);
    let mut rng: StdRng = row_rng(gen_cfg.seed, 0);
    let attend_from = [0usize];

    let prompt_outputs =
        process_prompt(weights, std::slice::from_ref(&prompt), &attend_from, &mut cache)?;
    let decode_started = Instant::now();
    let mut last_logits = prompt_outputs.last().unwrap().logits.clone();

    let mut sequence = prompt;
    let mut flops = {
        let mut total = 0.0;
        for t in 0..prompt_len {
            total += num_layers as f64 * layer_flops(cfg.d_model, cfg.d_ff, t + 1);
        }
        total
    };
    // last computed hidden state per generated position (backfill source)
    let mut last_hidden: Vec<Option<Tensor2D<S>>> = vec![None; cfg.max_positions];
    // layers executed per generated position
    let mut exits: Vec<usize> = vec![0; cfg.max_positions];
    let mut per_position: Vec<PositionBudget> = Vec::new();
    let mut executed_sets: Vec<ActiveLayerSet> = Vec::new();

    let mut next = sample_top_p(last_logits.row(0), gen_cfg, &mut rng);
    sequence.push(next);
    let mut done = next == gen_cfg.eos_id;
    let mut sampled = 1usize;
    let mut token_index = 0usize; // generated-token counter fed to the decider

    while sampled < gen_cfg.max_new_tokens && !done {
        let n = sequence.len() - 1;
        let mut hidden = embed_tokens(weights, &[next], n)?;
        let mut layers_done = 0usize;
        for l in 0..num_layers {
            // lazily restore K/V this layer needs for earlier shallow exits
            let absent = cache.gather(l, n.saturating_sub(1)).absent;
            for p in absent {
                let source = last_hidden[p].as_ref().ok_or_else(|| {
                    Error::contract(format!("no hidden state recorded for position {p}"))
                })?;
                let proj = weights.kv_projection(l);
                cache.backfill(l, p, source, &proj)?;
            }
            let prev = hidden.clone();
            hidden = decoder_layer_step(weights, l, &hidden, n, &mut cache, &attend_from)?;
            layers_done += 1;
            flops += layer_flops(cfg.d_model, cfg.d_ff, n + 1);
            if decider.should_exit(token_index, layers_done, &prev, &hidden) {
                break;
            }
        }
        exits[n] = layers_done;
        last_hidden[n] = Some(hidden.clone());
        per_position.push(PositionBudget {
            position: n,
            budget: layers_done,
            live_rows: 1,
            cum_flops: flops,
        });
        executed_sets.push(ActiveLayerSet::prefix(layers_done));
        token_index += 1;

        last_logits = lm_head(weights, &hidden)?;
        next = sample_top_p(last_logits.row(0), gen_cfg, &mut rng);
        sequence.push(next);
        done = next == gen_cfg.eos_id;
        sampled += 1;
    }
    let decode_ms = decode_started.elapsed().as_secs_f64() * 1000.0;

    let generated_tokens = per_position.len() as u64;
    let avg = if generated_tokens == 0 {
        f64::NAN
    } else {
        per_position.iter().map(|p| p.budget as f64).sum::<f64>() / generated_tokens as f64
    };
    let total_layer_steps = (prompt_len * num_layers) as u64
        + per_position.iter().map(|p| p.budget as u64).sum::<u64>();

    let report = BudgetReport {
        policy: PolicyKind::CalmDec,
        base_layers: num_layers,
        prompt_positions: prompt_len,
        prompt_layers_per_position: num_layers,
        // the adaptive policy's worst case is the whole network
        max_generation_budget: num_layers,
        per_position,
        total_layer_steps,
        generated_tokens,
        avg_generation_layer: avg,
        realized_speedup: if generated_tokens == 0 {
            f64::NAN
        } else {
            num_layers as f64 / avg
        },
        estimated_flops: flops,
        recompute_count: cache.recompute_count(),
        backfill_count: cache.backfill_count(),
        wall_time_ms: started.elapsed().as_secs_f64() * 1000.0,
        decode_wall_time_ms: decode_ms,
    };
    Ok(GenerationOutput {
        sequences: vec![sequence],
        report,
        executed_sets,
        cache,
    })
}

/// Teacher-forced evaluation under the adaptive policy: gold tokens are fed
/// through the saturation-driven layer stack and the cross-entropy of each
/// next-token prediction over the completion region is averaged. Returns
/// (mean loss, backfill count, mean exit layer).
pub fn calm_dec_teacher_forced_loss<S: Scalar>(
    weights: &DecoderWeights<S>,
    policy: &SaturationPolicy,
    sequence: &[u32],
    prompt_len: usize,
) -> Result<(f64, u64, f64)> {
    policy.validate()?;
    let cfg = &weights.config;
    let num_layers = cfg.num_decoder_layers;
    if prompt_len == 0 || prompt_len >= sequence.len() {
        return Err(Error::contract(
            "teacher-forced eval needs a prompt and at least one completion token",
        ));
    }
    if sequence.len() > cfg.max_positions {
        return Err(Error::contract(format!(
            "sequence length {} exceeds max_positions {}",
            sequence.len(),
            cfg.max_positions
        )));
    }

    let mut cache = KVCache::new(num_layers, cfg.max_positions, 1);
    let attend_from = [0usize];
    let prompt = sequence[..prompt_len].to_vec();
    let prompt_outputs = process_prompt(weights, &[prompt], &attend_from, &mut cache)?;

    let mut policy = *policy;
    let mut total = 0.0f64;
    let mut count = 0usize;
    let mut exits_sum = 0usize;
    let mut exits_n = 0usize;
    let mut last_hidden: Vec<Option<Tensor2D<S>>> = vec![None; cfg.max_positions];

    let mut logits = prompt_outputs.last().unwrap().logits.clone();
    for n in prompt_len..sequence.len() {
        total += row_cross_entropy(logits.row(0), sequence[n]);
        count += 1;
        if n + 1 == sequence.len() {
            break;
        }
        // run the gold token through the adaptive stack to predict the next
        let mut hidden = embed_tokens(weights, &[sequence[n]], n)?;
        let mut layers_done = 0usize;
        for l in 0..num_layers {
            let absent = cache.gather(l, n.saturating_sub(1)).absent;
            for p in absent {
                let source = last_hidden[p].as_ref().ok_or_else(|| {
                    Error::contract(format!("no hidden state recorded for position {p}"))
                })?;
                let proj = weights.kv_projection(l);
                cache.backfill(l, p, source, &proj)?;
            }
            let prev = hidden.clone();
            hidden = decoder_layer_step(weights, l, &hidden, n, &mut cache, &attend_from)?;
            layers_done += 1;
            if ExitDecider::<S>::should_exit(&mut policy, n - prompt_len, layers_done, &prev, &hidden) {
                break;
            }
        }
        exits_sum += layers_done;
        exits_n += 1;
        last_hidden[n] = Some(hidden.clone());
        logits = lm_head(weights, &hidden)?;
    }

    let mean_exit = if exits_n == 0 {
        num_layers as f64
    } else {
        exits_sum as f64 / exits_n as f64
    };
    Ok((total / count as f64, cache.backfill_count(), mean_exit))
}

fn row_cross_entropy<S: Scalar>(logits: &[S], target: u32) -> f64 {
    let mut max = f64::NEG_INFINITY;
    for &l in logits {
        max = max.max(l.to_f64());
    }
    let mut lse = 0.0f64;
    for &l in logits {
        lse += (l.to_f64() - max).exp();
    }
    max + lse.ln() - logits[target as usize].to_f64()
}

/// Brute-force count of the backfills a lazy scheme must perform for a trace
/// of per-token exit layers: token `i` is backfilled at every layer some
/// later executed token reaches beyond `exit[i]`.
pub fn expected_backfills(exits: &[usize]) -> u64 {
    let mut total = 0u64;
    for (i, &e) in exits.iter().enumerate() {
        let deepest_later = exits[i + 1..].iter().copied().max().unwrap_or(0);
        total += deepest_later.saturating_sub(e) as u64;
    }
    total
}
