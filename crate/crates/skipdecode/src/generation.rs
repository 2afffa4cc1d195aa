//! Batched column-wise autoregressive decoding under an exit-budget policy,
//! with nucleus sampling and per-run budget accounting.
//!
//! Batches are built column-wise: variable-length prompts are left-padded to
//! a shared length so generation positions line up across rows, and at every
//! position all live rows execute one shared active layer set. Each row draws
//! from its own RNG stream (`seed + row_index`), which makes a batched run
//! token-identical to independent single-row runs.

use std::fmt::Write as _;
use std::time::Instant;

use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::kvcache::{assert_monotone, KVCache};
use crate::model::{forward_step, DecoderWeights};
use crate::schedule::{ActiveLayerSet, ExitSchedule};
use crate::tensor::{Scalar, Tensor2D};
use crate::{Error, Result};

/// Decode policy tag carried on reports and output records.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PolicyKind {
    #[serde(rename = "skipdecode")]
    SkipDecode,
    #[serde(rename = "truncation")]
    Truncation,
    #[serde(rename = "calm_dec")]
    CalmDec,
    #[serde(rename = "full")]
    Full,
}

impl std::fmt::Display for PolicyKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            PolicyKind::SkipDecode => "skipdecode",
            PolicyKind::Truncation => "truncation",
            PolicyKind::CalmDec => "calm_dec",
            PolicyKind::Full => "full",
        };
        f.write_str(s)
    }
}

/// Sampling configuration.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct GenerationConfig {
    pub temperature: f64,
    pub top_p: f64,
    /// Only beam 1 (sampling) is supported.
    pub beam: usize,
    pub max_new_tokens: usize,
    pub eos_id: u32,
    /// Token used for left-padding and for finished rows.
    pub pad_id: u32,
    pub seed: u64,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        GenerationConfig {
            temperature: 0.3,
            top_p: 0.7,
            beam: 1,
            max_new_tokens: 32,
            eos_id: 0,
            pad_id: 0,
            seed: 0,
        }
    }
}

impl GenerationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.temperature <= 0.0 {
            return Err(Error::contract("temperature must be > 0"));
        }
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return Err(Error::contract("top_p must be in (0, 1]"));
        }
        if self.beam != 1 {
            return Err(Error::contract("only beam == 1 is supported"));
        }
        if self.max_new_tokens == 0 {
            return Err(Error::contract("max_new_tokens must be >= 1"));
        }
        Ok(())
    }
}

/// RNG stream for one batch row: global seed plus row index.
pub fn row_rng(seed: u64, row: usize) -> StdRng {
    StdRng::seed_from_u64(seed.wrapping_add(row as u64))
}

/// Column-aligned batch of sequences being decoded.
#[derive(Debug, Clone)]
pub struct BatchState {
    /// Token rows, all the same length (left-padded).
    pub sequences: Vec<Vec<u32>>,
    /// Rows that already emitted EOS; they extend with pad tokens.
    pub done: Vec<bool>,
    /// Column index where the next sampled token will be placed.
    pub position: usize,
    /// First non-pad column per row (attention mask origin).
    pub attend_from: Vec<usize>,
    /// True (unpadded) prompt length per row.
    pub prompt_lens: Vec<usize>,
    pub pad_id: u32,
}

/// Left-pads `prompts` to the longest prompt length and records per-row true
/// lengths for attention masking and metric exclusion.
pub fn batch_columns(prompts: &[Vec<u32>], pad_id: u32) -> Result<BatchState> {
    if prompts.is_empty() {
        return Err(Error::contract("prompt set is empty"));
    }
    if prompts.iter().any(|p| p.is_empty()) {
        return Err(Error::contract("every prompt needs at least one token"));
    }
    let target = prompts.iter().map(|p| p.len()).max().unwrap();
    let mut sequences = Vec::with_capacity(prompts.len());
    let mut attend_from = Vec::with_capacity(prompts.len());
    let mut prompt_lens = Vec::with_capacity(prompts.len());
    for p in prompts {
        let pad = target - p.len();
        let mut row = vec![pad_id; pad];
        row.extend_from_slice(p);
        sequences.push(row);
        attend_from.push(pad);
        prompt_lens.push(p.len());
    }
    Ok(BatchState {
        done: vec![false; prompts.len()],
        position: target,
        sequences,
        attend_from,
        prompt_lens,
        pad_id,
    })
}

impl BatchState {
    pub fn batch(&self) -> usize {
        self.sequences.len()
    }

    pub fn padded_len(&self) -> usize {
        self.sequences[0].len()
    }

    pub fn all_done(&self) -> bool {
        self.done.iter().all(|&d| d)
    }

    /// Adds extra uniform left-padding so the shared prompt region reaches
    /// `target` columns.
    pub fn pad_to(&mut self, target: usize) -> Result<()> {
        let current = self.padded_len();
        if target < current {
            return Err(Error::contract(format!(
                "cannot left-pad to {target}: batch already {current} columns wide"
            )));
        }
        let extra = target - current;
        if extra == 0 {
            return Ok(());
        }
        for (row, off) in self.sequences.iter_mut().zip(self.attend_from.iter_mut()) {
            let mut padded = vec![self.pad_id; extra];
            padded.append(row);
            *row = padded;
            *off += extra;
        }
        self.position = target;
        Ok(())
    }

    fn column(&self, n: usize) -> Vec<u32> {
        self.sequences.iter().map(|row| row[n]).collect()
    }
}

/// Nucleus filter: temperature-scale, softmax, keep the smallest
/// probability-sorted prefix with cumulative mass >= `top_p`, renormalize.
/// Returns (token, probability) pairs in probability order.
pub fn nucleus_filter<S: Scalar>(logits_row: &[S], temperature: f64, top_p: f64) -> Vec<(u32, f64)> {
    let scaled: Vec<f64> = logits_row.iter().map(|&l| l.to_f64() / temperature).collect();
    let max = scaled.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scaled.iter().map(|&s| (s - max).exp()).collect();
    let denom: f64 = exps.iter().sum();

    let mut probs: Vec<(u32, f64)> = exps
        .iter()
        .enumerate()
        .map(|(i, &e)| (i as u32, e / denom))
        .collect();
    // probability descending; token id ascending on ties (deterministic)
    probs.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));

    let mut cum = 0.0;
    let mut kept = Vec::new();
    for (tok, p) in probs {
        cum += p;
        kept.push((tok, p));
        if cum >= top_p {
            break;
        }
    }
    for entry in kept.iter_mut() {
        entry.1 /= cum;
    }
    kept
}

/// Samples one token from a logits row under the nucleus/temperature policy.
/// Deterministic given the RNG state.
pub fn sample_top_p<S: Scalar>(logits_row: &[S], gen_cfg: &GenerationConfig, rng: &mut StdRng) -> u32 {
    let kept = nucleus_filter(logits_row, gen_cfg.temperature, gen_cfg.top_p);
    let mut u: f64 = rng.gen();
    for &(tok, p) in &kept {
        u -= p;
        if u <= 0.0 {
            return tok;
        }
    }
    kept.last().expect("nucleus keeps at least one token").0
}

/// Budget and compute accounting for one executed generation column.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PositionBudget {
    pub position: usize,
    pub budget: usize,
    /// Rows whose token at this column was really sampled (not post-EOS pad).
    pub live_rows: usize,
    /// Cumulative estimated FLOPs through this column (prompt included).
    pub cum_flops: f64,
}

/// Realized budget, compute, and cache counters for one generation run.
///
/// A column is executed (and counted here) only when at least one row still
/// needs a next token; the final sampled column of a run (for example a
/// batch-wide EOS) appears in the output sequences but required no forward
/// pass. Layer averages are per generated token.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BudgetReport {
    pub policy: PolicyKind,
    pub base_layers: usize,
    pub prompt_positions: usize,
    /// Layers executed per prompt position (full depth except under truncation).
    pub prompt_layers_per_position: usize,
    /// Upper bound on any generation-column budget under this policy.
    pub max_generation_budget: usize,
    pub per_position: Vec<PositionBudget>,
    /// prompt columns * prompt layers + sum of executed column budgets.
    pub total_layer_steps: u64,
    /// Sum of live rows over executed columns.
    pub generated_tokens: u64,
    /// Live-row-weighted mean budget over executed columns (NaN when none).
    pub avg_generation_layer: f64,
    pub realized_speedup: f64,
    pub estimated_flops: f64,
    pub recompute_count: u64,
    pub backfill_count: u64,
    #[serde(skip)]
    pub wall_time_ms: f64,
    #[serde(skip)]
    pub decode_wall_time_ms: f64,
}

impl BudgetReport {
    /// The controlled-budget guarantee as an inequality over the report:
    /// every generation budget within its cap, and total layer-steps within
    /// `prompt * prompt_layers + executed_columns * cap`.
    pub fn check_budget_bound(&self) -> Result<()> {
        for pb in &self.per_position {
            if pb.budget > self.max_generation_budget {
                return Err(Error::contract(format!(
                    "column {} used {} layers, cap {}",
                    pb.position, pb.budget, self.max_generation_budget
                )));
            }
        }
        let bound = (self.prompt_positions * self.prompt_layers_per_position
            + self.per_position.len() * self.max_generation_budget) as u64;
        if self.total_layer_steps > bound {
            return Err(Error::contract(format!(
                "total layer-steps {} exceed bound {bound}",
                self.total_layer_steps
            )));
        }
        Ok(())
    }

    /// `position,budget,executed_layers,cum_flops` CSV for the decode columns.
    pub fn to_csv(&self, active_sets: &[ActiveLayerSet]) -> String {
        let mut out = String::from("position,budget,executed_layers,cum_flops\n");
        for (pb, set) in self.per_position.iter().zip(active_sets) {
            let _ = writeln!(
                out,
                "{},{},{},{}",
                pb.position,
                pb.budget,
                set.join_semicolon(),
                pb.cum_flops
            );
        }
        out
    }
}

/// Estimated FLOPs for one token passing through one decoder layer while
/// attending over `context_len` positions.
pub fn layer_flops(d_model: usize, d_ff: usize, context_len: usize) -> f64 {
    (12 * d_model * d_model + 2 * d_model * d_ff + 4 * d_model * context_len) as f64
}

/// base layers over realized average generation layers.
pub fn realized_speedup(report: &BudgetReport, base_layers: usize) -> Result<f64> {
    if report.generated_tokens == 0 {
        return Err(Error::contract(
            "speedup is undefined: no generation column was executed",
        ));
    }
    Ok(base_layers as f64 / report.avg_generation_layer)
}

/// Output of one decode run: grown sequences plus per-column active sets
/// (index-aligned with `report.per_position`).
#[derive(Debug)]
pub struct GenerationOutput<S: Scalar> {
    pub sequences: Vec<Vec<u32>>,
    pub report: BudgetReport,
    pub executed_sets: Vec<ActiveLayerSet>,
    pub cache: KVCache<S>,
}

/// Decodes a batch under the exit schedule.
///
/// The prompt region runs at full depth through [`process_prompt`]; each
/// generation column then executes `active_layer_set(budget[n])`. Stops when
/// every row has emitted EOS or `max_new_tokens` tokens were sampled.
pub fn generate<S: Scalar>(
    weights: &DecoderWeights<S>,
    schedule: &ExitSchedule,
    prompts: &[Vec<u32>],
    gen_cfg: &GenerationConfig,
) -> Result<GenerationOutput<S>> {
    generate_with_policy(weights, schedule, prompts, gen_cfg, PolicyKind::SkipDecode)
}

/// [`generate`] under a full-depth schedule, reported as the `full` policy.
pub fn generate_full<S: Scalar>(
    weights: &DecoderWeights<S>,
    schedule: &ExitSchedule,
    prompts: &[Vec<u32>],
    gen_cfg: &GenerationConfig,
) -> Result<GenerationOutput<S>> {
    let scfg = schedule.config();
    if scfg.min_exit_layer != scfg.num_decoder_layers || scfg.max_exit_layer != scfg.num_decoder_layers
    {
        return Err(Error::contract(
            "the full policy needs a schedule with min == max == num_decoder_layers",
        ));
    }
    generate_with_policy(weights, schedule, prompts, gen_cfg, PolicyKind::Full)
}

pub(crate) fn generate_with_policy<S: Scalar>(
    weights: &DecoderWeights<S>,
    schedule: &ExitSchedule,
    prompts: &[Vec<u32>],
    gen_cfg: &GenerationConfig,
    policy: PolicyKind,
) -> Result<GenerationOutput<S>> {
    let cfg = &weights.config;
    let scfg = schedule.config();
    if scfg.num_decoder_layers != cfg.num_decoder_layers {
        return Err(Error::contract(format!(
            "schedule is for {} layers, model has {}",
            scfg.num_decoder_layers, cfg.num_decoder_layers
        )));
    }
    if scfg.prompt_size == 0 {
        return Err(Error::contract(
            "decoding needs at least one prompt column (schedule prompt_size >= 1)",
        ));
    }
    assert_monotone(schedule.budgets(), scfg.prompt_size)?;
    let scfg = *scfg;
    run_decode(
        weights,
        prompts,
        gen_cfg,
        DecodeSpec {
            policy,
            prompt_set: ActiveLayerSet::full(cfg.num_decoder_layers),
            max_generation_budget: scfg.max_exit_layer,
            required_prompt_len: Some(scfg.prompt_size),
            column_set: &mut |n| ActiveLayerSet::from_budget(schedule.budget_at(n), &scfg),
        },
    )
}

/// How a decode run picks its layers; shared by the schedule-driven policy
/// and the fixed-truncation baseline.
pub(crate) struct DecodeSpec<'a> {
    pub policy: PolicyKind,
    /// Layer set every prompt column executes.
    pub prompt_set: ActiveLayerSet,
    /// Cap on generation-column budgets (reported and bound-checked).
    pub max_generation_budget: usize,
    /// Shared prompt width; `None` pads to the longest prompt.
    pub required_prompt_len: Option<usize>,
    /// Active set for generation column `n`.
    pub column_set: &'a mut dyn FnMut(usize) -> Result<ActiveLayerSet>,
}

pub(crate) fn run_decode<S: Scalar>(
    weights: &DecoderWeights<S>,
    prompts: &[Vec<u32>],
    gen_cfg: &GenerationConfig,
    spec: DecodeSpec<'_>,
) -> Result<GenerationOutput<S>> {
    let started = Instant::now();
    gen_cfg.validate()?;
    let cfg = &weights.config;

    let mut state = batch_columns(prompts, gen_cfg.pad_id)?;
    if let Some(required) = spec.required_prompt_len {
        if state.padded_len() > required {
            return Err(Error::contract(format!(
                "longest prompt ({} tokens) exceeds schedule prompt_size {required}",
                state.padded_len(),
            )));
        }
        state.pad_to(required)?;
    }
    let prompt_len = state.padded_len();
    if prompt_len + gen_cfg.max_new_tokens > cfg.max_positions {
        return Err(Error::contract(format!(
            "prompt {} + max_new_tokens {} exceeds max_positions {}",
            prompt_len, gen_cfg.max_new_tokens, cfg.max_positions
        )));
    }

    let batch = state.batch();
    let mut cache = KVCache::new(cfg.num_decoder_layers, cfg.max_positions, batch);
    let mut rngs: Vec<StdRng> = (0..batch).map(|b| row_rng(gen_cfg.seed, b)).collect();

    let prompt_outputs = crate::model::process_prompt_with_layers(
        weights,
        &state.sequences,
        &state.attend_from,
        &mut cache,
        &spec.prompt_set,
    )?;
    let decode_started = Instant::now();
    let mut last_logits = prompt_outputs
        .last()
        .expect("prompt has at least one column")
        .logits
        .clone();

    let mut flops = prompt_flops(cfg.d_model, cfg.d_ff, spec.prompt_set.len(), prompt_len, batch);
    let mut per_position: Vec<PositionBudget> = Vec::new();
    let mut executed_sets: Vec<ActiveLayerSet> = Vec::new();
    // live_at[n - prompt_len]: rows whose token at column n was truly sampled
    let mut live_at: Vec<usize> = Vec::new();

    sample_column(&mut state, &last_logits, gen_cfg, &mut rngs, &mut live_at);
    let mut sampled = 1usize;

    while sampled < gen_cfg.max_new_tokens && !state.all_done() {
        let n = state.position - 1; // column holding the freshest sampled tokens
        let active = (spec.column_set)(n)?;
        let budget = active.len();
        let column = state.column(n);
        let out = forward_step(weights, &column, n, &active, &mut cache, &state.attend_from, false)?;
        flops += batch as f64 * budget as f64 * layer_flops(cfg.d_model, cfg.d_ff, n + 1);
        per_position.push(PositionBudget {
            position: n,
            budget,
            live_rows: live_at[n - prompt_len],
            cum_flops: flops,
        });
        executed_sets.push(active);
        last_logits = out.logits;
        sample_column(&mut state, &last_logits, gen_cfg, &mut rngs, &mut live_at);
        sampled += 1;
    }
    let decode_ms = decode_started.elapsed().as_secs_f64() * 1000.0;

    let generated_tokens: u64 = per_position.iter().map(|p| p.live_rows as u64).sum();
    let weighted: f64 = per_position
        .iter()
        .map(|p| (p.budget * p.live_rows) as f64)
        .sum();
    let avg = if generated_tokens == 0 {
        f64::NAN
    } else {
        weighted / generated_tokens as f64
    };
    let total_layer_steps = (prompt_len * spec.prompt_set.len()) as u64
        + per_position.iter().map(|p| p.budget as u64).sum::<u64>();

    let report = BudgetReport {
        policy: spec.policy,
        base_layers: cfg.num_decoder_layers,
        prompt_positions: prompt_len,
        prompt_layers_per_position: spec.prompt_set.len(),
        max_generation_budget: spec.max_generation_budget,
        per_position,
        total_layer_steps,
        generated_tokens,
        avg_generation_layer: avg,
        realized_speedup: if generated_tokens == 0 {
            f64::NAN
        } else {
            cfg.num_decoder_layers as f64 / avg
        },
        estimated_flops: flops,
        recompute_count: cache.recompute_count(),
        backfill_count: cache.backfill_count(),
        wall_time_ms: started.elapsed().as_secs_f64() * 1000.0,
        decode_wall_time_ms: decode_ms,
    };
    Ok(GenerationOutput {
        sequences: state.sequences,
        report,
        executed_sets,
        cache,
    })
}

fn prompt_flops(d_model: usize, d_ff: usize, layers: usize, prompt_len: usize, batch: usize) -> f64 {
    let mut total = 0.0;
    for t in 0..prompt_len {
        total += batch as f64 * layers as f64 * layer_flops(d_model, d_ff, t + 1);
    }
    total
}

fn sample_column(
    state: &mut BatchState,
    logits: &Tensor2D<impl Scalar>,
    gen_cfg: &GenerationConfig,
    rngs: &mut [StdRng],
    live_at: &mut Vec<usize>,
) {
    let mut live = 0usize;
    for b in 0..state.batch() {
        let token = if state.done[b] {
            state.pad_id
        } else {
            live += 1;
            let tok = sample_top_p(logits.row(b), gen_cfg, &mut rngs[b]);
            if tok == gen_cfg.eos_id {
                state.done[b] = true;
            }
            tok
        };
        state.sequences[b].push(token);
    }
    live_at.push(live);
    state.position += 1;
}

/// Strips left padding and anything after the first EOS from a decoded row.
pub fn completion_tokens(sequence: &[u32], prompt_len: usize, eos_id: u32) -> Vec<u32> {
    let completion = &sequence[prompt_len.min(sequence.len())..];
    let mut out = Vec::new();
    for &t in completion {
        out.push(t);
        if t == eos_id {
            break;
        }
    }
    out
}

/// One JSON-lines output record (one decoded sequence).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GenerationRecord {
    pub policy: PolicyKind,
    pub prompt: String,
    pub completion: String,
    pub prompt_token_ids: Vec<u32>,
    pub completion_token_ids: Vec<u32>,
    pub per_position_budgets: Vec<usize>,
    pub report: BudgetReport,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::init_weights;
    use crate::model::ModelConfig;
    use crate::schedule::{build_schedule, DecayFunction, ScheduleConfig};

    fn tiny_cfg(layers: usize) -> ModelConfig {
        ModelConfig {
            vocab_size: 13,
            d_model: 8,
            n_heads: 2,
            d_ff: 16,
            num_decoder_layers: layers,
            max_positions: 32,
        }
    }

    fn sched(layers: usize, prompt: usize, seq: usize, min: usize, max: usize) -> ExitSchedule {
        build_schedule(&ScheduleConfig {
            num_decoder_layers: layers,
            prompt_size: prompt,
            sequence_length: seq,
            min_exit_layer: min,
            max_exit_layer: max,
            warmup_layers: 1,
            decay: DecayFunction::Linear,
        })
        .unwrap()
    }

    #[test]
    fn nucleus_one_hot_keeps_single_token() {
        let mut logits = vec![0.0f64; 8];
        logits[3] = 1000.0;
        let kept = nucleus_filter(&logits, 0.3, 0.7);
        assert_eq!(kept.len(), 1);
        assert_eq!(kept[0].0, 3);
        assert!((kept[0].1 - 1.0).abs() < 1e-12);
    }

    #[test]
    fn nucleus_uniform_ten_tokens_keeps_seven() {
        // ten equal logits: cumulative mass reaches 0.7 at exactly the 7th token
        let logits = vec![1.0f64; 10];
        let kept = nucleus_filter(&logits, 1.0, 0.7);
        assert_eq!(kept.len(), 7);
        let sum: f64 = kept.iter().map(|&(_, p)| p).sum();
        assert!((sum - 1.0).abs() < 1e-12);
    }

    #[test]
    fn nucleus_top_p_one_is_plain_softmax() {
        let logits = vec![0.5f64, -1.0, 2.0];
        let kept = nucleus_filter(&logits, 1.0, 1.0);
        assert_eq!(kept.len(), 3);
        let denom: f64 = logits.iter().map(|l| l.exp()).sum();
        for &(tok, p) in &kept {
            assert!((p - logits[tok as usize].exp() / denom).abs() < 1e-12);
        }
    }

    #[test]
    fn sampling_is_deterministic_per_rng_state() {
        let logits = vec![0.1f32, 0.9, -0.3, 0.4];
        let cfg = GenerationConfig::default();
        let a: Vec<u32> = {
            let mut rng = row_rng(9, 0);
            (0..16).map(|_| sample_top_p(&logits, &cfg, &mut rng)).collect()
        };
        let b: Vec<u32> = {
            let mut rng = row_rng(9, 0);
            (0..16).map(|_| sample_top_p(&logits, &cfg, &mut rng)).collect()
        };
        assert_eq!(a, b);
    }

    #[test]
    fn batch_columns_left_pads_to_longest() {
        let state = batch_columns(&[vec![1, 2, 3], vec![1, 2, 3, 4, 5]], 0).unwrap();
        assert_eq!(state.sequences[0], vec![0, 0, 1, 2, 3]);
        assert_eq!(state.sequences[1], vec![1, 2, 3, 4, 5]);
        assert_eq!(state.attend_from, vec![2, 0]);
        assert_eq!(state.prompt_lens, vec![3, 5]);
    }

    #[test]
    fn batch_columns_single_prompt_unpadded() {
        let state = batch_columns(&[vec![7, 8]], 0).unwrap();
        assert_eq!(state.sequences[0], vec![7, 8]);
        assert_eq!(state.attend_from, vec![0]);
    }

    #[test]
    fn batch_columns_empty_set_errors() {
        assert!(batch_columns(&[], 0).is_err());
    }

    #[test]
    fn realized_speedup_examples() {
        let mk = |budgets: &[usize], base: usize| {
            let per_position: Vec<PositionBudget> = budgets
                .iter()
                .enumerate()
                .map(|(i, &b)| PositionBudget {
                    position: i,
                    budget: b,
                    live_rows: 1,
                    cum_flops: 0.0,
                })
                .collect();
            let tokens = budgets.len() as u64;
            let avg = budgets.iter().sum::<usize>() as f64 / tokens.max(1) as f64;
            BudgetReport {
                policy: PolicyKind::SkipDecode,
                base_layers: base,
                prompt_positions: 0,
                prompt_layers_per_position: base,
                max_generation_budget: base,
                per_position,
                total_layer_steps: 0,
                generated_tokens: tokens,
                avg_generation_layer: avg,
                realized_speedup: base as f64 / avg,
                estimated_flops: 0.0,
                recompute_count: 0,
                backfill_count: 0,
                wall_time_ms: 0.0,
                decode_wall_time_ms: 0.0,
            }
        };
        assert_eq!(realized_speedup(&mk(&[12, 12, 12], 24), 24).unwrap(), 2.0);
        assert_eq!(realized_speedup(&mk(&[16, 12, 8], 24), 24).unwrap(), 2.0);
        assert_eq!(realized_speedup(&mk(&[24, 24], 24), 24).unwrap(), 1.0);
        assert!(realized_speedup(&mk(&[], 24), 24).is_err());
    }

    #[test]
    fn generate_runs_clean_under_schedule() {
        let cfg = tiny_cfg(6);
        let w = init_weights::<f32>(&cfg, 17).unwrap();
        let schedule = sched(6, 4, 20, 2, 5);
        let gen_cfg = GenerationConfig {
            max_new_tokens: 12,
            eos_id: 12,
            seed: 5,
            ..Default::default()
        };
        let out = generate(&w, &schedule, &[vec![1, 2, 3], vec![4, 5, 6, 7]], &gen_cfg).unwrap();
        assert_eq!(out.report.recompute_count, 0);
        assert_eq!(out.report.backfill_count, 0);
        out.report.check_budget_bound().unwrap();
        // one shared active set per executed column
        assert_eq!(out.report.per_position.len(), out.executed_sets.len());
        for (pb, set) in out.report.per_position.iter().zip(&out.executed_sets) {
            assert_eq!(pb.budget, set.len());
        }
        // columns follow the schedule
        for pb in &out.report.per_position {
            assert_eq!(pb.budget, schedule.budget_at(pb.position));
        }
    }

    #[test]
    fn generate_is_deterministic() {
        let cfg = tiny_cfg(4);
        let w = init_weights::<f32>(&cfg, 3).unwrap();
        let schedule = sched(4, 3, 16, 2, 3);
        let gen_cfg = GenerationConfig {
            max_new_tokens: 8,
            eos_id: 12,
            seed: 77,
            ..Default::default()
        };
        let a = generate(&w, &schedule, &[vec![1, 2], vec![3, 4]], &gen_cfg).unwrap();
        let b = generate(&w, &schedule, &[vec![1, 2], vec![3, 4]], &gen_cfg).unwrap();
        assert_eq!(a.sequences, b.sequences);
        assert_eq!(a.report.per_position, b.report.per_position);
        assert_eq!(a.report.generated_tokens, b.report.generated_tokens);
        assert_eq!(a.report.estimated_flops, b.report.estimated_flops);
    }

    #[test]
    fn batch_of_equal_prompts_matches_independent_runs() {
        let cfg = tiny_cfg(4);
        let w = init_weights::<f32>(&cfg, 23).unwrap();
        let schedule = sched(4, 3, 16, 2, 3);
        let gen_cfg = GenerationConfig {
            max_new_tokens: 8,
            eos_id: 12,
            seed: 100,
            ..Default::default()
        };
        let prompts = vec![vec![1, 2, 3], vec![4, 5, 6], vec![7, 8, 9]];
        let batched = generate(&w, &schedule, &prompts, &gen_cfg).unwrap();
        for (row, prompt) in prompts.iter().enumerate() {
            let solo_cfg = GenerationConfig {
                seed: gen_cfg.seed + row as u64,
                ..gen_cfg
            };
            let solo = generate(&w, &schedule, std::slice::from_ref(prompt), &solo_cfg).unwrap();
            // rows that finish early keep emitting pad while the batch runs on;
            // compare the real content (prompt plus completion up to EOS)
            let batched_row = completion_tokens(&batched.sequences[row], 3, gen_cfg.eos_id);
            let solo_row = completion_tokens(&solo.sequences[0], 3, gen_cfg.eos_id);
            assert_eq!(&batched.sequences[row][..3], &solo.sequences[0][..3]);
            assert_eq!(batched_row, solo_row, "row {row} diverged from its independent run");
        }
    }

    #[test]
    fn schedule_layer_count_mismatch_errors() {
        let cfg = tiny_cfg(4);
        let w = init_weights::<f32>(&cfg, 1).unwrap();
        let schedule = sched(6, 3, 16, 2, 5);
        let gen_cfg = GenerationConfig {
            max_new_tokens: 4,
            eos_id: 12,
            ..Default::default()
        };
        assert!(generate(&w, &schedule, &[vec![1, 2]], &gen_cfg).is_err());
    }

    #[test]
    fn early_eos_counts_only_executed_columns() {
        // A model rigged so the first generated token is a plain token and the
        // second is EOS with overwhelming probability: zeroed residual output
        // projections make every block an identity map, so logits depend only
        // on the (token, position) embedding through the tied head.
        let cfg = ModelConfig {
            vocab_size: 4, // 0 pad, 1 "a", 2 unused, 3 eos
            d_model: 4,
            n_heads: 1,
            d_ff: 8,
            num_decoder_layers: 6,
            max_positions: 24,
        };
        let mut w = init_weights::<f32>(&cfg, 2).unwrap();
        for layer in w.layers.iter_mut() {
            layer.wo = Tensor2D::zeros(cfg.d_model, cfg.d_model);
            layer.w_out = Tensor2D::zeros(cfg.d_ff, cfg.d_model);
        }
        // "a" and eos read the first hidden coordinate with opposite signs
        w.tok_emb = Tensor2D::from_rows(&[
            &[0.05, 0.0, 0.0, 0.0], // pad
            &[5.0, 0.0, 0.0, 0.0],  // "a"
            &[0.2, 0.1, 0.0, 0.0],  // filler
            &[-5.0, 0.0, 0.0, 0.0], // eos
        ])
        .unwrap();
        // the position embedding drives that coordinate far positive (pick
        // "a") or far negative (pick eos), swamping the token contribution;
        // the winning token holds virtually all probability mass, so the
        // nucleus keeps it alone and sampling is deterministic
        let mut pos = Tensor2D::zeros(cfg.max_positions, cfg.d_model);
        for p in 0..cfg.max_positions {
            // logits at column p pick the token at column p + 1
            let towards_a = p != 3;
            pos.set(p, 0, if towards_a { 100.0 } else { -100.0 });
            pos.set(p, 1, 0.5);
            pos.set(p, 2, 1.0);
            pos.set(p, 3, 0.25);
        }
        w.pos_emb = pos;

        let schedule = sched(6, 3, 20, 2, 5);
        let gen_cfg = GenerationConfig {
            max_new_tokens: 10,
            eos_id: 3,
            seed: 4,
            ..Default::default()
        };
        let out = generate(&w, &schedule, &[vec![1, 1, 1], vec![1, 1, 1]], &gen_cfg).unwrap();
        for row in &out.sequences {
            assert_eq!(&row[3..], &[1, 3], "completion should be one token then eos");
        }
        // only column 3 (the first generated token) was executed
        assert_eq!(out.report.per_position.len(), 1);
        assert_eq!(out.report.per_position[0].position, 3);
        assert_eq!(out.report.avg_generation_layer, schedule.budget_at(3) as f64);
        assert_eq!(out.report.avg_generation_layer, 5.0); // max_exit_layer
        let speedup = realized_speedup(&out.report, 6).unwrap();
        assert!((speedup - 6.0 / 5.0).abs() < 1e-12);
    }

    #[test]
    fn preset_run_to_max_length_hits_target_average() {
        // 24-layer model under the 2x preset decoded to the full schedule
        // length realizes the table's target average of 12 within 0.5
        let cfg = ModelConfig {
            vocab_size: 13,
            d_model: 8,
            n_heads: 2,
            d_ff: 16,
            num_decoder_layers: 24,
            max_positions: 64,
        };
        let w = init_weights::<f32>(&cfg, 2).unwrap();
        let preset = crate::schedule::preset_for(24, 2.0).unwrap();
        let schedule = build_schedule(&preset.schedule_config(4, 44)).unwrap();
        let gen_cfg = GenerationConfig {
            max_new_tokens: 40,
            eos_id: u32::MAX, // run to max length
            seed: 12,
            ..Default::default()
        };
        let out = generate(&w, &schedule, &[vec![1, 2, 3, 4]], &gen_cfg).unwrap();
        let avg = out.report.avg_generation_layer;
        assert!((avg - 12.0).abs() <= 0.5, "realized avg {avg} vs target 12");
        assert!((realized_speedup(&out.report, 24).unwrap() - 2.0).abs() <= 0.1);
    }

    #[test]
    fn cache_population_equals_budget_sum() {
        // populated (layer, position) slots == prompt_len * L plus the sum of
        // executed column budgets: exactly the compute budget, never more
        let cfg = tiny_cfg(6);
        let w = init_weights::<f32>(&cfg, 40).unwrap();
        let schedule = sched(6, 4, 24, 2, 5);
        let gen_cfg = GenerationConfig {
            max_new_tokens: 10,
            eos_id: u32::MAX,
            seed: 8,
            ..Default::default()
        };
        let out = generate(&w, &schedule, &[vec![1, 2, 3], vec![4, 5, 6, 7]], &gen_cfg).unwrap();
        let expected = 4 * 6 + out.report.per_position.iter().map(|p| p.budget).sum::<usize>();
        assert_eq!(out.cache.populated_slots(), expected);

        // presence per position is nested: each later position's layer set is
        // a subset of every earlier one's
        let last = out.report.per_position.last().unwrap().position;
        for p in 4..last {
            for l in 0..6 {
                if out.cache.is_present(l, p + 1) {
                    assert!(out.cache.is_present(l, p), "layer {l} present at {} but not {p}", p + 1);
                }
            }
        }
    }

    #[test]
    fn completion_tokens_trims_pad_and_post_eos() {
        assert_eq!(completion_tokens(&[0, 0, 1, 2, 3, 9, 9], 2, 3), vec![1, 2, 3]);
        assert_eq!(completion_tokens(&[5, 6, 7], 1, 99), vec![6, 7]);
    }
}
