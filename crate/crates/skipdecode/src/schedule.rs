//! Per-position exit budgets and active layer sets.
//!
//! The policy gives every sequence position a layer budget: full depth over
//! the prompt, then a linear decay from `max_exit_layer` down to
//! `min_exit_layer` across the generation region. A budget is spent on the
//! bottom warmup layers plus the top of the stack, so whatever a later token
//! executes is always a subset of what every earlier token executed.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Decay shape for the generation region. Only linear decay is implemented;
/// the tag exists so other shapes can be added without changing callers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum DecayFunction {
    #[default]
    Linear,
}

/// Hyperparameters of the exit-budget policy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScheduleConfig {
    pub num_decoder_layers: usize,
    pub prompt_size: usize,
    pub sequence_length: usize,
    pub min_exit_layer: usize,
    pub max_exit_layer: usize,
    pub warmup_layers: usize,
    #[serde(default)]
    pub decay: DecayFunction,
}

impl ScheduleConfig {
    pub fn validate(&self) -> Result<()> {
        if !(1 <= self.warmup_layers
            && self.warmup_layers <= self.min_exit_layer
            && self.min_exit_layer <= self.max_exit_layer
            && self.max_exit_layer <= self.num_decoder_layers)
        {
            return Err(Error::contract(format!(
                "schedule bounds must satisfy 1 <= warmup ({}) <= min ({}) <= max ({}) <= layers ({})",
                self.warmup_layers, self.min_exit_layer, self.max_exit_layer, self.num_decoder_layers
            )));
        }
        if self.prompt_size >= self.sequence_length {
            return Err(Error::contract(format!(
                "prompt_size ({}) must be < sequence_length ({})",
                self.prompt_size, self.sequence_length
            )));
        }
        Ok(())
    }

    /// Config that runs the full network at every position.
    pub fn full_depth(num_decoder_layers: usize, prompt_size: usize, sequence_length: usize) -> Self {
        ScheduleConfig {
            num_decoder_layers,
            prompt_size,
            sequence_length,
            min_exit_layer: num_decoder_layers,
            max_exit_layer: num_decoder_layers,
            warmup_layers: 1,
            decay: DecayFunction::Linear,
        }
    }
}

/// Raw (pre-rounding) exit budget for position `i`.
///
/// Full depth for prompt positions; for generation positions the budget
/// interpolates linearly from `max_exit_layer` at `i == prompt_size` to
/// `min_exit_layer` at `i == sequence_length`. The terminal position
/// `i == sequence_length` is accepted and evaluates with interpolant 1.
pub fn exit_budget(i: usize, cfg: &ScheduleConfig) -> Result<f64> {
    if i > cfg.sequence_length {
        return Err(Error::contract(format!(
            "position {i} out of range (sequence_length {})",
            cfg.sequence_length
        )));
    }
    if i < cfg.prompt_size {
        return Ok(cfg.num_decoder_layers as f64);
    }
    let t = (i - cfg.prompt_size) as f64 / (cfg.sequence_length - cfg.prompt_size) as f64;
    Ok((1.0 - t) * cfg.max_exit_layer as f64 + t * cfg.min_exit_layer as f64)
}

/// Round-half-up to the nearest integer layer count. Clamping to the
/// configured bounds is the caller's job (prompt positions are not clamped).
pub fn round_budget(raw: f64) -> usize {
    debug_assert!(raw >= 1.0);
    (raw + 0.5).floor() as usize
}

/// Ordered set of decoder layer indices one token executes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ActiveLayerSet {
    indices: Vec<usize>,
}

impl ActiveLayerSet {
    /// Bottom `warmup` layers plus the top `budget - warmup` layers.
    pub fn from_budget(budget: usize, cfg: &ScheduleConfig) -> Result<Self> {
        Self::warmup_plus_top(budget, cfg.warmup_layers, cfg.num_decoder_layers)
    }

    pub fn warmup_plus_top(budget: usize, warmup: usize, num_layers: usize) -> Result<Self> {
        if budget < warmup {
            return Err(Error::contract(format!(
                "budget {budget} smaller than warmup layer count {warmup}"
            )));
        }
        if budget > num_layers {
            return Err(Error::contract(format!(
                "budget {budget} exceeds decoder depth {num_layers}"
            )));
        }
        let top = budget - warmup;
        let mut indices: Vec<usize> = (0..warmup).collect();
        indices.extend(num_layers - top..num_layers);
        Ok(ActiveLayerSet { indices })
    }

    /// Bottom-prefix set `{0 .. k-1}` (truncation-style policies).
    pub fn prefix(k: usize) -> Self {
        ActiveLayerSet {
            indices: (0..k).collect(),
        }
    }

    pub fn full(num_layers: usize) -> Self {
        Self::prefix(num_layers)
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn contains(&self, layer: usize) -> bool {
        self.indices.binary_search(&layer).is_ok()
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn iter(&self) -> impl Iterator<Item = usize> + '_ {
        self.indices.iter().copied()
    }

    pub fn is_subset_of(&self, other: &ActiveLayerSet) -> bool {
        self.indices.iter().all(|&l| other.contains(l))
    }

    /// `;`-joined index list, as used in the schedule CSV dump.
    pub fn join_semicolon(&self) -> String {
        let mut s = String::new();
        for (i, l) in self.indices.iter().enumerate() {
            if i > 0 {
                s.push(';');
            }
            let _ = write!(s, "{l}");
        }
        s
    }
}

/// The realized per-position budget table for one run configuration.
///
/// `budgets` covers positions `0 ..= sequence_length` inclusive, so the
/// decayed region runs all the way down to `min_exit_layer` at the terminal
/// position (the decay curve's full domain). Positions past the terminal one
/// clamp to `min_exit_layer`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExitSchedule {
    budgets: Vec<usize>,
    config: ScheduleConfig,
}

/// Builds the rounded budget table for `cfg`.
pub fn build_schedule(cfg: &ScheduleConfig) -> Result<ExitSchedule> {
    cfg.validate()?;
    let mut budgets = Vec::with_capacity(cfg.sequence_length + 1);
    for i in 0..=cfg.sequence_length {
        let raw = exit_budget(i, cfg)?;
        let rounded = round_budget(raw);
        let clamped = if i < cfg.prompt_size {
            rounded
        } else {
            rounded.clamp(cfg.min_exit_layer, cfg.max_exit_layer)
        };
        budgets.push(clamped);
    }
    Ok(ExitSchedule {
        budgets,
        config: *cfg,
    })
}

impl ExitSchedule {
    pub fn config(&self) -> &ScheduleConfig {
        &self.config
    }

    pub fn budgets(&self) -> &[usize] {
        &self.budgets
    }

    /// Budget at `position`; positions beyond the table clamp to the minimum.
    pub fn budget_at(&self, position: usize) -> usize {
        self.budgets
            .get(position)
            .copied()
            .unwrap_or(self.config.min_exit_layer)
    }

    pub fn active_layers_at(&self, position: usize) -> Result<ActiveLayerSet> {
        ActiveLayerSet::from_budget(self.budget_at(position), &self.config)
    }

    pub fn prompt_size(&self) -> usize {
        self.config.prompt_size
    }

    pub fn num_decoder_layers(&self) -> usize {
        self.config.num_decoder_layers
    }

    /// CSV dump: `position,raw_budget,budget,active_layers`.
    pub fn to_csv(&self) -> Result<String> {
        let mut out = String::from("position,raw_budget,budget,active_layers\n");
        for (i, &b) in self.budgets.iter().enumerate() {
            let raw = exit_budget(i, &self.config)?;
            let active = ActiveLayerSet::from_budget(b, &self.config)?;
            let _ = writeln!(out, "{i},{raw},{b},{}", active.join_semicolon());
        }
        Ok(out)
    }
}

/// Mean rounded budget over the generation region (positions >= prompt_size).
pub fn average_generation_layer(schedule: &ExitSchedule) -> f64 {
    let gen = &schedule.budgets[schedule.config.prompt_size..];
    debug_assert!(!gen.is_empty());
    gen.iter().sum::<usize>() as f64 / gen.len() as f64
}

/// One row of the speedup preset table.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpeedupPreset {
    pub base_layers: usize,
    pub target_speedup: f64,
    pub target_avg_layer: f64,
    pub warmup_layers: usize,
    pub min_exit_layer: usize,
    pub max_exit_layer: usize,
}

impl SpeedupPreset {
    /// Schedule config realizing this preset for the given lengths.
    pub fn schedule_config(&self, prompt_size: usize, sequence_length: usize) -> ScheduleConfig {
        ScheduleConfig {
            num_decoder_layers: self.base_layers,
            prompt_size,
            sequence_length,
            min_exit_layer: self.min_exit_layer,
            max_exit_layer: self.max_exit_layer,
            warmup_layers: self.warmup_layers,
            decay: DecayFunction::Linear,
        }
    }
}

/// Tuned (min, max, warmup) configurations per (base depth, target speedup).
const PRESETS: &[SpeedupPreset] = &[
    SpeedupPreset { base_layers: 32, target_speedup: 2.0, target_avg_layer: 16.0, warmup_layers: 1, min_exit_layer: 11, max_exit_layer: 22 },
    SpeedupPreset { base_layers: 32, target_speedup: 3.0, target_avg_layer: 11.0, warmup_layers: 1, min_exit_layer: 8, max_exit_layer: 14 },
    SpeedupPreset { base_layers: 32, target_speedup: 4.0, target_avg_layer: 8.0, warmup_layers: 1, min_exit_layer: 6, max_exit_layer: 10 },
    SpeedupPreset { base_layers: 32, target_speedup: 5.0, target_avg_layer: 6.5, warmup_layers: 1, min_exit_layer: 5, max_exit_layer: 8 },
    SpeedupPreset { base_layers: 24, target_speedup: 2.0, target_avg_layer: 12.0, warmup_layers: 1, min_exit_layer: 8, max_exit_layer: 16 },
    SpeedupPreset { base_layers: 24, target_speedup: 3.0, target_avg_layer: 8.0, warmup_layers: 1, min_exit_layer: 6, max_exit_layer: 10 },
    SpeedupPreset { base_layers: 24, target_speedup: 4.0, target_avg_layer: 6.0, warmup_layers: 1, min_exit_layer: 5, max_exit_layer: 7 },
    SpeedupPreset { base_layers: 24, target_speedup: 5.0, target_avg_layer: 5.0, warmup_layers: 1, min_exit_layer: 4, max_exit_layer: 6 },
];

/// All tuned presets (speedups above 1x).
pub fn all_presets() -> &'static [SpeedupPreset] {
    PRESETS
}

/// Looks up the preset for `(base_layers, target_speedup)`.
///
/// Speedup 1 is accepted for any base depth and means the full network
/// (min == max == base).
pub fn preset_for(base_layers: usize, target_speedup: f64) -> Result<SpeedupPreset> {
    if (target_speedup - 1.0).abs() < 1e-9 {
        return Ok(SpeedupPreset {
            base_layers,
            target_speedup: 1.0,
            target_avg_layer: base_layers as f64,
            warmup_layers: 1,
            min_exit_layer: base_layers,
            max_exit_layer: base_layers,
        });
    }
    PRESETS
        .iter()
        .find(|p| p.base_layers == base_layers && (p.target_speedup - target_speedup).abs() < 1e-9)
        .copied()
        .ok_or_else(|| Error::UnknownPreset {
            base_layers,
            speedup: target_speedup,
            available: PRESETS
                .iter()
                .map(|p| format!("({}, {}x)", p.base_layers, p.target_speedup))
                .collect::<Vec<_>>()
                .join(", "),
        })
}

/// Tuned preset when one exists; otherwise derives (min, max) around the
/// implied average layer count `base / speedup`, keeping the table's rough
/// max ≈ 4/3 · avg proportions. Lets toy-depth models target a speedup.
pub fn preset_or_derived(base_layers: usize, target_speedup: f64) -> Result<SpeedupPreset> {
    if let Ok(p) = preset_for(base_layers, target_speedup) {
        return Ok(p);
    }
    if target_speedup < 1.0 || target_speedup > base_layers as f64 {
        return Err(Error::contract(format!(
            "speedup {target_speedup} out of range for {base_layers} layers"
        )));
    }
    let avg = base_layers as f64 / target_speedup;
    let max = ((4.0 * avg / 3.0).round() as usize).clamp(1, base_layers);
    let min = (((2.0 * avg).round() as i64 - max as i64).max(1) as usize).min(max);
    Ok(SpeedupPreset {
        base_layers,
        target_speedup,
        target_avg_layer: (min + max) as f64 / 2.0,
        warmup_layers: 1.min(min),
        min_exit_layer: min,
        max_exit_layer: max,
    })
}
