use std::fmt::Write as _;
use std::path::PathBuf;

use anyhow::{anyhow, Context, Result};
use clap::{Args, ValueEnum};
use serde_json::json;
use skipdecode::baselines::{
    calm_dec_generate, truncation_generate, SaturationPolicy, TruncationPolicy,
};
use skipdecode::generation::{
    completion_tokens, generate, generate_full, GenerationConfig, GenerationOutput,
    GenerationRecord,
};
use skipdecode::model::DecoderWeights;
use skipdecode::schedule::{build_schedule, preset_or_derived, ScheduleConfig};
use skipdecode::tensor::Scalar;
use skipdecode::training::load_corpus;

use super::{encode_prompt, load_checkpoint, load_vocab, write_text};
use crate::config::ConfigFile;
use crate::{Outcome, Precision, SharedArgs};

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum PolicyArg {
    Skipdecode,
    Truncation,
    #[value(name = "calm_dec")]
    CalmDec,
    Full,
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[command(flatten)]
    pub shared: SharedArgs,
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Vocabulary file; defaults to vocab.json beside the checkpoint
    #[arg(long)]
    pub vocab: Option<PathBuf>,
    /// JSON-lines file with a `prompt` field per record
    #[arg(long)]
    pub prompts: PathBuf,
    #[arg(long, value_enum, default_value_t = PolicyArg::Skipdecode)]
    pub policy: PolicyArg,
    /// Target speedup for the skipdecode policy
    #[arg(long)]
    pub speedup: Option<f64>,
    /// Explicit schedule bounds (override the preset)
    #[arg(long)]
    pub min_exit: Option<usize>,
    #[arg(long)]
    pub max_exit: Option<usize>,
    #[arg(long)]
    pub warmup: Option<usize>,
    /// Schedule sequence length (defaults to prompt size + max new tokens)
    #[arg(long)]
    pub seq_len: Option<usize>,
    /// Fixed exit layer for the truncation policy
    #[arg(long)]
    pub exit_layer: Option<usize>,
    /// Saturation threshold for the calm_dec policy
    #[arg(long)]
    pub lambda: Option<f64>,
    /// Earliest exit layer for the calm_dec policy
    #[arg(long)]
    pub min_layer: Option<usize>,
    #[arg(long)]
    pub max_new_tokens: Option<usize>,
    #[arg(long)]
    pub temperature: Option<f64>,
    #[arg(long)]
    pub top_p: Option<f64>,
    /// Beam width (only 1 is supported)
    #[arg(long)]
    pub beam: Option<usize>,
}

pub fn run(args: GenerateArgs) -> Result<Outcome> {
    match args.shared.precision {
        Precision::F32 => run_typed::<f32>(args),
        Precision::F64 => run_typed::<f64>(args),
    }
}

fn run_typed<S: Scalar>(args: GenerateArgs) -> Result<Outcome> {
    let file = ConfigFile::load(args.shared.config.as_deref())?;
    let weights: DecoderWeights<S> = load_checkpoint(&args.checkpoint)?;
    let vocab = load_vocab(args.vocab.as_deref(), &args.checkpoint)?;
    let records = load_corpus(&args.prompts)
        .with_context(|| format!("loading prompts {}", args.prompts.display()))?;

    let mut prompts = Vec::with_capacity(records.len());
    for record in &records {
        prompts.push(encode_prompt(&vocab, &record.prompt)?);
    }
    let longest = prompts.iter().map(|p| p.len()).max().unwrap();

    let default_new = weights.config.max_positions.saturating_sub(longest).clamp(1, 24);
    let gen_cfg = GenerationConfig {
        temperature: file.f64("temperature", args.temperature, 0.3),
        top_p: file.f64("top_p", args.top_p, 0.7),
        beam: file.usize("beam", args.beam, 1),
        max_new_tokens: file.usize("max_new_tokens", args.max_new_tokens, default_new),
        eos_id: vocab.eos_id(),
        pad_id: vocab.pad_id(),
        seed: args.shared.seed,
    };

    let layers = weights.config.num_decoder_layers;
    let speedup = file.f64("speedup", args.speedup, 2.0);
    let seq_len = file.usize(
        "seq_len",
        args.seq_len,
        longest + gen_cfg.max_new_tokens,
    );

    let (out, policy_desc): (GenerationOutput<S>, String) = match args.policy {
        PolicyArg::Skipdecode => {
            let preset = preset_or_derived(layers, speedup)?;
            let mut cfg = preset.schedule_config(longest, seq_len);
            if let Some(min) = file.usize_opt("min_exit", args.min_exit) {
                cfg.min_exit_layer = min;
            }
            if let Some(max) = file.usize_opt("max_exit", args.max_exit) {
                cfg.max_exit_layer = max;
            }
            if let Some(w) = file.usize_opt("warmup", args.warmup) {
                cfg.warmup_layers = w;
            }
            let schedule = build_schedule(&cfg)?;
            let out = generate(&weights, &schedule, &prompts, &gen_cfg)?;
            (out, format!("skipdecode(min {}, max {}, warmup {})", cfg.min_exit_layer, cfg.max_exit_layer, cfg.warmup_layers))
        }
        PolicyArg::Full => {
            let schedule = build_schedule(&ScheduleConfig::full_depth(layers, longest, seq_len))?;
            let out = generate_full(&weights, &schedule, &prompts, &gen_cfg)?;
            (out, "full".to_string())
        }
        PolicyArg::Truncation => {
            let exit_layer = file
                .usize_opt("exit_layer", args.exit_layer)
                .ok_or_else(|| anyhow!("--exit-layer is required for the truncation policy"))?;
            let out = truncation_generate(&weights, &TruncationPolicy { exit_layer }, &prompts, &gen_cfg)?;
            (out, format!("truncation(exit {exit_layer})"))
        }
        PolicyArg::CalmDec => {
            let policy = SaturationPolicy {
                lambda: file.f64("lambda", args.lambda, 0.9),
                min_layer: file.usize("min_layer", args.min_layer, 1),
            };
            let out = calm_dec_generate(&weights, &policy, &prompts, &gen_cfg)?;
            (out, format!("calm_dec(lambda {}, min_layer {})", policy.lambda, policy.min_layer))
        }
    };

    // JSON-lines: one record per sequence
    let prompt_cols = out.report.prompt_positions;
    let mut jsonl = String::new();
    for (row, record) in records.iter().enumerate() {
        let completion_ids = completion_tokens(&out.sequences[row], prompt_cols, gen_cfg.eos_id);
        let entry = GenerationRecord {
            policy: out.report.policy,
            prompt: record.prompt.clone(),
            completion: vocab.decode(&completion_ids),
            prompt_token_ids: prompts[row].clone(),
            completion_token_ids: completion_ids,
            per_position_budgets: out.report.per_position.iter().map(|p| p.budget).collect(),
            report: out.report.clone(),
        };
        let _ = writeln!(jsonl, "{}", serde_json::to_string(&entry)?);
    }

    let jsonl_path = args.shared.out_dir.join("generations.jsonl");
    write_text(&jsonl_path, &jsonl)?;
    let csv_path = args.shared.out_dir.join("budget.csv");
    write_text(&csv_path, &out.report.to_csv(&out.executed_sets))?;

    let speedup_msg = if out.report.generated_tokens > 0 {
        format!(
            "avg generation layer {:.3}, realized speedup {:.2}x",
            out.report.avg_generation_layer, out.report.realized_speedup
        )
    } else {
        "no generation column executed".to_string()
    };
    println!(
        "{policy_desc}: {} sequences, {speedup_msg}, recompute {}, backfill {}",
        out.sequences.len(),
        out.report.recompute_count,
        out.report.backfill_count
    );

    Ok(Outcome {
        resolved_config: json!({
            "checkpoint": args.checkpoint.display().to_string(),
            "prompts": args.prompts.display().to_string(),
            "policy": out.report.policy,
            "policy_desc": policy_desc,
            "temperature": gen_cfg.temperature,
            "top_p": gen_cfg.top_p,
            "beam": gen_cfg.beam,
            "max_new_tokens": gen_cfg.max_new_tokens,
            "seq_len": seq_len,
            "precision": if matches!(args.shared.precision, Precision::F64) { "f64" } else { "f32" },
        }),
        inputs: vec![args.checkpoint.clone(), args.prompts.clone()],
        outputs: vec![jsonl_path, csv_path],
    })
}
