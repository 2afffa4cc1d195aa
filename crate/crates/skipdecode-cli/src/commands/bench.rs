use std::fmt::Write as _;
use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::Args;
use serde_json::json;
use skipdecode::baselines::{
    calm_dec_generate, calm_dec_teacher_forced_loss, truncation_generate, SaturationPolicy,
    TruncationPolicy,
};
use skipdecode::generation::{generate, generate_full, GenerationConfig};
use skipdecode::model::DecoderWeights;
use skipdecode::schedule::{build_schedule, preset_or_derived, ActiveLayerSet, ScheduleConfig};
use skipdecode::tensor::Scalar;
use skipdecode::training::{eval_loss, load_corpus, LossTargets, Vocabulary};

use super::{encode_prompt, load_checkpoint, load_vocab, write_text};
use crate::config::ConfigFile;
use crate::{Outcome, Precision, SharedArgs};

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[command(flatten)]
    pub shared: SharedArgs,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub vocab: Option<PathBuf>,
    /// JSON-lines eval set; completions are the teacher-forcing references
    #[arg(long)]
    pub eval: PathBuf,
    /// Comma-separated target speedups for skipdecode and truncation rows
    #[arg(long, value_delimiter = ',')]
    pub speedups: Option<Vec<f64>>,
    /// Comma-separated saturation thresholds for calm_dec rows
    #[arg(long, value_delimiter = ',')]
    pub lambdas: Option<Vec<f64>>,
    #[arg(long)]
    pub max_new_tokens: Option<usize>,
}

struct Row {
    policy: &'static str,
    target_speedup: Option<f64>,
    avg_gen_layer: f64,
    realized_speedup: f64,
    wall_time_ms: f64,
    eval_loss: f64,
    recompute_count: u64,
    backfill_count: u64,
}

pub fn run(args: BenchArgs) -> Result<Outcome> {
    match args.shared.precision {
        Precision::F32 => run_typed::<f32>(args),
        Precision::F64 => run_typed::<f64>(args),
    }
}

/// Teacher-forced loss over completion targets given per-position sets.
fn sets_eval_loss<S: Scalar>(
    weights: &DecoderWeights<S>,
    sequences: &[Vec<u32>],
    pad: u32,
    sets_for: impl Fn(usize) -> Result<Vec<ActiveLayerSet>>,
) -> Result<f64> {
    let mut total = 0.0;
    let mut batches = 0usize;
    for chunk in sequences.chunks(16) {
        let width = chunk.iter().map(|s| s.len()).max().unwrap();
        let tokens: Vec<Vec<u32>> = chunk
            .iter()
            .map(|s| {
                let mut row = s.clone();
                row.resize(width, pad);
                row
            })
            .collect();
        let targets = LossTargets::from_pad(&tokens, pad);
        total += eval_loss(weights, &tokens, &targets, &sets_for(width)?)?;
        batches += 1;
    }
    Ok(total / batches as f64)
}

fn run_typed<S: Scalar>(args: BenchArgs) -> Result<Outcome> {
    let file = ConfigFile::load(args.shared.config.as_deref())?;
    let weights: DecoderWeights<S> = load_checkpoint(&args.checkpoint)?;
    let vocab: Vocabulary = load_vocab(args.vocab.as_deref(), &args.checkpoint)?;
    let records = load_corpus(&args.eval)
        .with_context(|| format!("loading eval set {}", args.eval.display()))?;

    let mut prompts = Vec::with_capacity(records.len());
    let mut sequences = Vec::with_capacity(records.len());
    for record in &records {
        let prompt = encode_prompt(&vocab, &record.prompt)?;
        let mut seq = prompt.clone();
        seq.extend(vocab.encode(&record.completion)?);
        prompts.push(prompt);
        sequences.push(seq);
    }
    let prompt_len = prompts.iter().map(|p| p.len()).max().unwrap();
    let max_seq = sequences.iter().map(|s| s.len()).max().unwrap();

    let layers = weights.config.num_decoder_layers;
    let speedups = args.speedups.unwrap_or_else(|| vec![2.0, 3.0, 5.0]);
    let lambdas = args.lambdas.unwrap_or_else(|| vec![0.98]);
    let max_new = file.usize(
        "max_new_tokens",
        args.max_new_tokens,
        (weights.config.max_positions - prompt_len).min(max_seq - prompt_len + 8),
    );
    let gen_cfg = GenerationConfig {
        max_new_tokens: max_new,
        eos_id: vocab.eos_id(),
        pad_id: vocab.pad_id(),
        seed: args.shared.seed,
        ..Default::default()
    };
    let seq_len = prompt_len + max_new;
    let pad = vocab.pad_id();

    let mut rows: Vec<Row> = Vec::new();

    // full network baseline (1x by definition)
    {
        let schedule = build_schedule(&ScheduleConfig::full_depth(layers, prompt_len, seq_len))?;
        let out = generate_full(&weights, &schedule, &prompts, &gen_cfg)?;
        let loss = sets_eval_loss(&weights, &sequences, pad, |width| {
            Ok(vec![ActiveLayerSet::full(layers); width])
        })?;
        rows.push(Row {
            policy: "full",
            target_speedup: Some(1.0),
            avg_gen_layer: out.report.avg_generation_layer,
            realized_speedup: out.report.realized_speedup,
            wall_time_ms: out.report.wall_time_ms,
            eval_loss: loss,
            recompute_count: out.report.recompute_count,
            backfill_count: out.report.backfill_count,
        });
    }

    for &s in &speedups {
        let preset = preset_or_derived(layers, s)?;
        let schedule = build_schedule(&preset.schedule_config(prompt_len, seq_len))?;
        let out = generate(&weights, &schedule, &prompts, &gen_cfg)?;
        out.report.check_budget_bound().map_err(anyhow::Error::from)?;
        let eval_schedule = build_schedule(&preset.schedule_config(prompt_len, max_seq))?;
        let loss = sets_eval_loss(&weights, &sequences, pad, |width| {
            (0..width)
                .map(|t| eval_schedule.active_layers_at(t).map_err(anyhow::Error::from))
                .collect()
        })?;
        rows.push(Row {
            policy: "skipdecode",
            target_speedup: Some(s),
            avg_gen_layer: out.report.avg_generation_layer,
            realized_speedup: out.report.realized_speedup,
            wall_time_ms: out.report.wall_time_ms,
            eval_loss: loss,
            recompute_count: out.report.recompute_count,
            backfill_count: out.report.backfill_count,
        });
    }

    for &s in &speedups {
        let exit_layer = ((layers as f64 / s).round() as usize).clamp(1, layers);
        let policy = TruncationPolicy { exit_layer };
        let out = truncation_generate(&weights, &policy, &prompts, &gen_cfg)?;
        let loss = sets_eval_loss(&weights, &sequences, pad, |width| {
            Ok(vec![ActiveLayerSet::prefix(exit_layer); width])
        })?;
        rows.push(Row {
            policy: "truncation",
            target_speedup: Some(s),
            avg_gen_layer: out.report.avg_generation_layer,
            realized_speedup: out.report.realized_speedup,
            wall_time_ms: out.report.wall_time_ms,
            eval_loss: loss,
            recompute_count: out.report.recompute_count,
            backfill_count: out.report.backfill_count,
        });
    }

    // calm_dec decodes one sequence at a time (batching is unsupported)
    for &lambda in &lambdas {
        let policy = SaturationPolicy { lambda, min_layer: 1 };
        let mut layer_steps = 0.0;
        let mut tokens = 0u64;
        let mut wall = 0.0;
        let mut recompute = 0u64;
        let mut backfill = 0u64;
        let mut loss_total = 0.0;
        for (prompt, seq) in prompts.iter().zip(&sequences) {
            let out = calm_dec_generate(&weights, &policy, std::slice::from_ref(prompt), &gen_cfg)?;
            for pb in &out.report.per_position {
                layer_steps += (pb.budget * pb.live_rows) as f64;
                tokens += pb.live_rows as u64;
            }
            wall += out.report.wall_time_ms;
            recompute += out.report.recompute_count;
            backfill += out.report.backfill_count;
            let (loss, extra_backfills, _) =
                calm_dec_teacher_forced_loss(&weights, &policy, seq, prompt.len())?;
            loss_total += loss;
            backfill += extra_backfills;
        }
        let avg = if tokens == 0 { f64::NAN } else { layer_steps / tokens as f64 };
        rows.push(Row {
            policy: "calm_dec",
            target_speedup: None,
            avg_gen_layer: avg,
            realized_speedup: layers as f64 / avg,
            wall_time_ms: wall,
            eval_loss: loss_total / prompts.len() as f64,
            recompute_count: recompute,
            backfill_count: backfill,
        });
    }

    let mut csv = String::from(
        "policy,target_speedup,avg_gen_layer,realized_speedup,wall_time_ms,eval_loss,recompute_count,backfill_count\n",
    );
    for row in &rows {
        let target = row
            .target_speedup
            .map(|s| s.to_string())
            .unwrap_or_default();
        let _ = writeln!(
            csv,
            "{},{},{},{},{},{},{},{}",
            row.policy,
            target,
            row.avg_gen_layer,
            row.realized_speedup,
            row.wall_time_ms,
            row.eval_loss,
            row.recompute_count,
            row.backfill_count
        );
    }
    let csv_path = args.shared.out_dir.join("bench.csv");
    write_text(&csv_path, &csv)?;
    println!("{csv}");

    Ok(Outcome {
        resolved_config: json!({
            "checkpoint": args.checkpoint.display().to_string(),
            "eval": args.eval.display().to_string(),
            "speedups": speedups,
            "lambdas": lambdas,
            "max_new_tokens": max_new,
        }),
        inputs: vec![args.checkpoint.clone(), args.eval.clone()],
        outputs: vec![csv_path],
    })
}
