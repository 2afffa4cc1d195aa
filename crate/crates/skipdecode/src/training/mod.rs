//! Manual-backprop training on synthetic corpora, schedule-aware
//! fine-tuning, and the per-position loss measurement harness.

pub mod backprop;
pub mod corpus;

use std::fmt::Write as _;

use rand::rngs::StdRng;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};

pub use backprop::{cross_entropy, tape_backward, tape_forward, LossTargets};
pub use corpus::{
    build_vocabulary, load_corpus, make_synthetic_corpus, save_corpus, Corpus, CorpusRecord,
    CorpusSpec, Vocabulary,
};

use crate::model::DecoderWeights;
use crate::schedule::{ActiveLayerSet, ExitSchedule};
use crate::tensor::Scalar;
use crate::{Error, Result};

/// Learning-rate sweep bounds used for hyperparameter selection.
pub const LR_SWEEP_MIN: f64 = 8e-6;
pub const LR_SWEEP_MAX: f64 = 2e-4;

/// Training hyperparameters.
#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub warmup_steps: usize,
    pub max_seq_len: usize,
    /// Shared prompt width (the corpus median); the full-depth region when
    /// training with a schedule.
    pub prompt_length: usize,
    pub seed: u64,
    pub schedule: Option<ExitSchedule>,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.learning_rate <= 0.0 {
            return Err(Error::contract("learning rate must be positive"));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::contract("epochs and batch size must be >= 1"));
        }
        if self.prompt_length >= self.max_seq_len {
            return Err(Error::contract(format!(
                "prompt length {} must be < max sequence length {}",
                self.prompt_length, self.max_seq_len
            )));
        }
        if let Some(schedule) = &self.schedule {
            if schedule.prompt_size() != self.prompt_length {
                return Err(Error::contract(format!(
                    "schedule prompt_size {} != training prompt length {}",
                    schedule.prompt_size(),
                    self.prompt_length
                )));
            }
        }
        Ok(())
    }
}

/// Per-position active sets for a batch of width `seq_len`: the schedule's
/// sets when present, full depth otherwise.
pub fn active_sets_for<S: Scalar>(
    weights: &DecoderWeights<S>,
    schedule: Option<&ExitSchedule>,
    seq_len: usize,
) -> Result<Vec<ActiveLayerSet>> {
    match schedule {
        Some(s) => (0..seq_len).map(|t| s.active_layers_at(t)).collect(),
        None => Ok(vec![
            ActiveLayerSet::full(weights.config.num_decoder_layers);
            seq_len
        ]),
    }
}

/// Teacher-forced mean cross-entropy and gradients for one batch under the
/// given per-position active sets.
pub fn loss_and_grads<S: Scalar>(
    weights: &DecoderWeights<S>,
    tokens: &[Vec<u32>],
    targets: &LossTargets,
    active_sets: &[ActiveLayerSet],
) -> Result<(f64, DecoderWeights<S>)> {
    let tape = tape_forward(weights, tokens, active_sets)?;
    let (loss, _) = cross_entropy(&tape, targets);
    let grads = tape_backward(weights, &tape, targets)?;
    Ok((loss, grads))
}

/// Forward-only evaluation loss under the given active sets.
pub fn eval_loss<S: Scalar>(
    weights: &DecoderWeights<S>,
    tokens: &[Vec<u32>],
    targets: &LossTargets,
    active_sets: &[ActiveLayerSet],
) -> Result<f64> {
    let tape = tape_forward(weights, tokens, active_sets)?;
    Ok(cross_entropy(&tape, targets).0)
}

/// Adam first/second-moment state.
pub struct AdamState<S: Scalar> {
    m: DecoderWeights<S>,
    v: DecoderWeights<S>,
    step: u64,
}

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

impl<S: Scalar> AdamState<S> {
    pub fn new(weights: &DecoderWeights<S>) -> AdamState<S> {
        AdamState {
            m: weights.zeros_like(),
            v: weights.zeros_like(),
            step: 0,
        }
    }

    pub fn step(&self) -> u64 {
        self.step
    }
}

/// Learning rate after linear warmup (constant afterwards).
pub fn lr_at_step(base_lr: f64, step: u64, warmup_steps: usize) -> f64 {
    if warmup_steps == 0 || step as usize >= warmup_steps {
        base_lr
    } else {
        base_lr * (step + 1) as f64 / warmup_steps as f64
    }
}

/// One Adam update (linear warmup, then constant rate). Deterministic; a
/// zero gradient leaves the corresponding parameter untouched.
pub fn adam_step<S: Scalar>(
    weights: &mut DecoderWeights<S>,
    grads: &DecoderWeights<S>,
    state: &mut AdamState<S>,
    base_lr: f64,
    warmup_steps: usize,
) {
    let lr = lr_at_step(base_lr, state.step, warmup_steps);
    state.step += 1;
    let t = state.step as f64;
    let bc1 = 1.0 - ADAM_BETA1.powf(t);
    let bc2 = 1.0 - ADAM_BETA2.powf(t);

    let grads = grads.tensors();
    let mut ms = state.m.tensors_mut();
    let mut vs = state.v.tensors_mut();
    for (i, w) in weights.tensors_mut().into_iter().enumerate() {
        let g = grads[i].1.data();
        let m = ms[i].data_mut();
        let v = vs[i].data_mut();
        let w = w.data_mut();
        for j in 0..w.len() {
            let gj = g[j].to_f64();
            let mj = ADAM_BETA1 * m[j].to_f64() + (1.0 - ADAM_BETA1) * gj;
            let vj = ADAM_BETA2 * v[j].to_f64() + (1.0 - ADAM_BETA2) * gj * gj;
            m[j] = S::from_f64(mj);
            v[j] = S::from_f64(vj);
            let update = lr * (mj / bc1) / ((vj / bc2).sqrt() + ADAM_EPS);
            w[j] = S::from_f64(w[j].to_f64() - update);
        }
    }
}

/// One line of the training log CSV.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct StepLog {
    pub step: u64,
    pub loss: f64,
    pub lr: f64,
}

/// `step,loss,lr` CSV.
pub fn training_log_csv(log: &[StepLog]) -> String {
    let mut out = String::from("step,loss,lr\n");
    for entry in log {
        let _ = writeln!(out, "{},{},{}", entry.step, entry.loss, entry.lr);
    }
    out
}

/// Trains on the given token sequences. When the config carries a schedule,
/// every batch uses the schedule's per-position active sets; otherwise the
/// full network. Returns the trained weights and per-step loss history.
pub fn finetune_with_schedule<S: Scalar>(
    mut weights: DecoderWeights<S>,
    sequences: &[Vec<u32>],
    pad_id: u32,
    train_cfg: &TrainConfig,
) -> Result<(DecoderWeights<S>, Vec<StepLog>)> {
    train_cfg.validate()?;
    if sequences.is_empty() {
        return Err(Error::contract("training corpus is empty"));
    }
    if sequences.iter().any(|s| s.len() > train_cfg.max_seq_len) {
        return Err(Error::contract(format!(
            "corpus contains a sequence longer than max_seq_len {}",
            train_cfg.max_seq_len
        )));
    }

    let mut state = AdamState::new(&weights);
    let mut log = Vec::new();
    let mut order: Vec<usize> = (0..sequences.len()).collect();
    let mut rng = StdRng::seed_from_u64(train_cfg.seed);

    for _epoch in 0..train_cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(train_cfg.batch_size) {
            let width = chunk.iter().map(|&i| sequences[i].len()).max().unwrap();
            let tokens: Vec<Vec<u32>> = chunk
                .iter()
                .map(|&i| {
                    let mut row = sequences[i].clone();
                    row.resize(width, pad_id);
                    row
                })
                .collect();
            let targets = LossTargets::from_pad(&tokens, pad_id);
            let sets = active_sets_for(&weights, train_cfg.schedule.as_ref(), width)?;
            let (loss, grads) = loss_and_grads(&weights, &tokens, &targets, &sets)?;
            adam_step(
                &mut weights,
                &grads,
                &mut state,
                train_cfg.learning_rate,
                train_cfg.warmup_steps,
            );
            log.push(StepLog {
                step: state.step(),
                loss,
                lr: lr_at_step(train_cfg.learning_rate, state.step() - 1, train_cfg.warmup_steps),
            });
        }
    }
    Ok((weights, log))
}

/// Mean loss and confidence interval at one sequence position.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct PositionLoss {
    pub position: usize,
    pub mean_loss: f64,
    /// Normal-approximation 95% bounds; infinite when only one sample exists.
    pub ci_low: f64,
    pub ci_high: f64,
    pub count: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PositionLossCurve {
    pub points: Vec<PositionLoss>,
}

impl PositionLossCurve {
    /// `position,mean_loss,ci_low,ci_high,count` CSV.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("position,mean_loss,ci_low,ci_high,count\n");
        for p in &self.points {
            let _ = writeln!(
                out,
                "{},{},{},{},{}",
                p.position, p.mean_loss, p.ci_low, p.ci_high, p.count
            );
        }
        out
    }

    /// Mean losses over generation positions (>= `prompt_len`).
    pub fn generation_means(&self, prompt_len: usize) -> (Vec<f64>, Vec<f64>) {
        let mut positions = Vec::new();
        let mut means = Vec::new();
        for p in &self.points {
            if p.position >= prompt_len {
                positions.push(p.position as f64);
                means.push(p.mean_loss);
            }
        }
        (positions, means)
    }
}

/// Full-depth per-position mean cross-entropy over an eval corpus, with
/// normal-approximation 95% confidence intervals.
pub fn per_position_loss<S: Scalar>(
    weights: &DecoderWeights<S>,
    sequences: &[Vec<u32>],
    pad_id: u32,
    batch_size: usize,
) -> Result<PositionLossCurve> {
    if sequences.is_empty() {
        return Err(Error::contract("evaluation corpus is empty"));
    }
    let mut samples: Vec<Vec<f64>> = Vec::new();
    for chunk in sequences.chunks(batch_size.max(1)) {
        let width = chunk.iter().map(|s| s.len()).max().unwrap();
        let tokens: Vec<Vec<u32>> = chunk
            .iter()
            .map(|s| {
                let mut row = s.clone();
                row.resize(width, pad_id);
                row
            })
            .collect();
        let targets = LossTargets::from_pad(&tokens, pad_id);
        let sets = active_sets_for(weights, None, width)?;
        let tape = tape_forward(weights, &tokens, &sets)?;
        let (_, per) = cross_entropy(&tape, &targets);
        for b in 0..tokens.len() {
            for t in 0..width {
                let v = per.get(b, t);
                if v.is_finite() {
                    if samples.len() <= t {
                        samples.resize(t + 1, Vec::new());
                    }
                    samples[t].push(v);
                }
            }
        }
    }

    let mut points = Vec::new();
    for (position, values) in samples.iter().enumerate() {
        if values.is_empty() {
            continue;
        }
        let n = values.len();
        let mean = values.iter().sum::<f64>() / n as f64;
        let (ci_low, ci_high) = if n < 2 {
            (f64::NEG_INFINITY, f64::INFINITY)
        } else {
            let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
            let half = 1.96 * (var / n as f64).sqrt();
            (mean - half, mean + half)
        };
        points.push(PositionLoss {
            position,
            mean_loss: mean,
            ci_low,
            ci_high,
            count: n,
        });
    }
    Ok(PositionLossCurve { points })
}

fn ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].partial_cmp(&values[b]).unwrap());
    let mut out = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let rank = (i + j) as f64 / 2.0 + 1.0; // average rank for ties
        for &idx in &order[i..=j] {
            out[idx] = rank;
        }
        i = j + 1;
    }
    out
}

/// Spearman rank correlation between two equally long samples.
pub fn spearman_rank_correlation(xs: &[f64], ys: &[f64]) -> f64 {
    assert_eq!(xs.len(), ys.len());
    let n = xs.len();
    if n < 2 {
        return f64::NAN;
    }
    let rx = ranks(xs);
    let ry = ranks(ys);
    let mx = rx.iter().sum::<f64>() / n as f64;
    let my = ry.iter().sum::<f64>() / n as f64;
    let mut cov = 0.0;
    let mut vx = 0.0;
    let mut vy = 0.0;
    for i in 0..n {
        let dx = rx[i] - mx;
        let dy = ry[i] - my;
        cov += dx * dy;
        vx += dx * dx;
        vy += dy * dy;
    }
    if vx == 0.0 || vy == 0.0 {
        return f64::NAN;
    }
    cov / (vx * vy).sqrt()
}
