use anyhow::{anyhow, bail, Result};
use clap::Args;
use serde_json::json;
use skipdecode::schedule::{
    all_presets, average_generation_layer, build_schedule, preset_for, DecayFunction,
    ScheduleConfig,
};

use super::write_text;
use crate::config::ConfigFile;
use crate::{Outcome, SharedArgs};

#[derive(Debug, Args)]
pub struct ScheduleArgs {
    #[command(flatten)]
    pub shared: SharedArgs,
    /// Decoder depth of the target model
    #[arg(long)]
    pub layers: Option<usize>,
    /// Target speedup; looks the bounds up in the preset table
    #[arg(long)]
    pub speedup: Option<f64>,
    /// Explicit bounds (used when --speedup is absent)
    #[arg(long)]
    pub min_exit: Option<usize>,
    #[arg(long)]
    pub max_exit: Option<usize>,
    #[arg(long)]
    pub warmup: Option<usize>,
    #[arg(long)]
    pub prompt_len: Option<usize>,
    #[arg(long)]
    pub seq_len: Option<usize>,
}

pub fn run(args: ScheduleArgs) -> Result<Outcome> {
    let file = ConfigFile::load(args.shared.config.as_deref())?;
    let layers = file
        .usize_opt("layers", args.layers)
        .ok_or_else(|| anyhow!("--layers is required"))?;
    let speedup = file.f64_opt("speedup", args.speedup);

    let (cfg, target_avg) = if let Some(speedup) = speedup {
        let preset = preset_for(layers, speedup).map_err(|e| {
            let table = all_presets()
                .iter()
                .map(|p| {
                    format!(
                        "  {:>2} layers @ {}x -> warmup {}, min {}, max {}, target avg {}",
                        p.base_layers,
                        p.target_speedup,
                        p.warmup_layers,
                        p.min_exit_layer,
                        p.max_exit_layer,
                        p.target_avg_layer
                    )
                })
                .collect::<Vec<_>>()
                .join("\n");
            eprintln!("available presets:\n{table}");
            anyhow!(e)
        })?;
        let prompt_len = file.usize("prompt_len", args.prompt_len, 10);
        let seq_len = file.usize("seq_len", args.seq_len, prompt_len + 1025);
        (
            preset.schedule_config(prompt_len, seq_len),
            Some(preset.target_avg_layer),
        )
    } else {
        let min_exit = file.usize_opt("min_exit", args.min_exit);
        let max_exit = file.usize_opt("max_exit", args.max_exit);
        let (Some(min_exit), Some(max_exit)) = (min_exit, max_exit) else {
            bail!("pass either --speedup or both --min-exit and --max-exit");
        };
        let prompt_len = file.usize("prompt_len", args.prompt_len, 10);
        (
            ScheduleConfig {
                num_decoder_layers: layers,
                prompt_size: prompt_len,
                sequence_length: file.usize("seq_len", args.seq_len, prompt_len + 100),
                min_exit_layer: min_exit,
                max_exit_layer: max_exit,
                warmup_layers: file.usize("warmup", args.warmup, 1),
                decay: DecayFunction::Linear,
            },
            None,
        )
    };

    let schedule = build_schedule(&cfg)?;
    let avg = average_generation_layer(&schedule);
    let implied_speedup = layers as f64 / avg;

    let csv_path = args.shared.out_dir.join("schedule.csv");
    write_text(&csv_path, &schedule.to_csv()?)?;

    match target_avg {
        Some(target) => println!(
            "layers {layers}, min {}, max {}, warmup {}: target avg layer {target}, computed avg {avg:.3}, implied speedup {implied_speedup:.2}x",
            cfg.min_exit_layer, cfg.max_exit_layer, cfg.warmup_layers
        ),
        None => println!(
            "layers {layers}, min {}, max {}, warmup {}: computed avg layer {avg:.3}, implied speedup {implied_speedup:.2}x",
            cfg.min_exit_layer, cfg.max_exit_layer, cfg.warmup_layers
        ),
    }

    Ok(Outcome {
        resolved_config: json!({
            "layers": layers,
            "speedup": speedup,
            "min_exit": cfg.min_exit_layer,
            "max_exit": cfg.max_exit_layer,
            "warmup": cfg.warmup_layers,
            "prompt_len": cfg.prompt_size,
            "seq_len": cfg.sequence_length,
            "computed_avg_layer": avg,
            "implied_speedup": implied_speedup,
        }),
        inputs: Vec::new(),
        outputs: vec![csv_path],
    })
}
