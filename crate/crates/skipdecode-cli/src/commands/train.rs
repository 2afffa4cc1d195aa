use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::Args;
use serde_json::json;
use skipdecode::model::{init_weights, DecoderWeights, ModelConfig};
use skipdecode::schedule::{build_schedule, preset_or_derived};
use skipdecode::tensor::Scalar;
use skipdecode::training::{
    build_vocabulary, finetune_with_schedule, load_corpus, make_synthetic_corpus, save_corpus,
    training_log_csv, CorpusRecord, CorpusSpec, TrainConfig, Vocabulary,
};

use super::write_text;
use crate::config::ConfigFile;
use crate::{Outcome, Precision, SharedArgs};

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub shared: SharedArgs,
    /// Generate a synthetic corpus with this many records
    #[arg(long, conflicts_with = "corpus")]
    pub synthetic: Option<usize>,
    /// JSON-lines corpus file with prompt/completion fields
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    #[arg(long)]
    pub d_model: Option<usize>,
    #[arg(long)]
    pub n_heads: Option<usize>,
    #[arg(long)]
    pub d_ff: Option<usize>,
    #[arg(long)]
    pub layers: Option<usize>,
    #[arg(long)]
    pub max_positions: Option<usize>,
    /// Base learning rate (linear warmup, then constant)
    #[arg(long)]
    pub lr: Option<f64>,
    /// Passes over the corpus; 0 writes the freshly initialized checkpoint
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub warmup_steps: Option<usize>,
    /// Shared prompt width; defaults to the corpus median prompt length
    #[arg(long)]
    pub prompt_len: Option<usize>,
    #[arg(long)]
    pub max_seq_len: Option<usize>,
    /// Train with the skipping schedule for this target speedup
    #[arg(long)]
    pub schedule_speedup: Option<f64>,
}

pub fn run(args: TrainArgs) -> Result<Outcome> {
    match args.shared.precision {
        Precision::F32 => run_typed::<f32>(args),
        Precision::F64 => run_typed::<f64>(args),
    }
}

fn median(mut lens: Vec<usize>) -> usize {
    lens.sort_unstable();
    lens[lens.len() / 2]
}

fn run_typed<S: Scalar>(args: TrainArgs) -> Result<Outcome> {
    let file = ConfigFile::load(args.shared.config.as_deref())?;
    let out_dir = &args.shared.out_dir;
    let mut inputs = Vec::new();
    let mut outputs = Vec::new();

    // corpus + vocabulary
    let synthetic = file.usize_opt("synthetic", args.synthetic);
    let corpus_path = file
        .string_opt("corpus", args.corpus.as_ref().map(|p| p.display().to_string()))
        .map(PathBuf::from);
    let (records, vocab, corpus_source): (Vec<CorpusRecord>, Vocabulary, String) =
        match (synthetic, corpus_path) {
            (Some(n), None) => {
                let corpus = make_synthetic_corpus(&CorpusSpec { records: n, seed: args.shared.seed });
                let path = out_dir.join("corpus.jsonl");
                save_corpus(&corpus.records, &path)?;
                outputs.push(path);
                (corpus.records, corpus.vocab, format!("synthetic:{n}"))
            }
            (None, Some(path)) => {
                let records = load_corpus(&path)
                    .with_context(|| format!("loading corpus {}", path.display()))?;
                let vocab = build_vocabulary(&records);
                inputs.push(path.clone());
                (records, vocab, path.display().to_string())
            }
            _ => bail!("pass exactly one of --synthetic <N> or --corpus <path>"),
        };

    // tokenized sequences: prompt + separator + completion
    let mut sequences = Vec::with_capacity(records.len());
    let mut prompt_lens = Vec::with_capacity(records.len());
    for record in &records {
        let mut seq = vocab.encode(&record.prompt)?;
        seq.push(vocab.sep_id());
        prompt_lens.push(seq.len());
        seq.extend(vocab.encode(&record.completion)?);
        sequences.push(seq);
    }

    let prompt_len = file.usize("prompt_len", args.prompt_len, median(prompt_lens));
    let corpus_max = sequences.iter().map(|s| s.len()).max().unwrap();
    let max_seq_len = file.usize("max_seq_len", args.max_seq_len, corpus_max);

    let model_cfg = ModelConfig {
        vocab_size: vocab.len(),
        d_model: file.usize("d_model", args.d_model, 32),
        n_heads: file.usize("n_heads", args.n_heads, 4),
        d_ff: file.usize("d_ff", args.d_ff, 64),
        num_decoder_layers: file.usize("layers", args.layers, 6),
        // leave decode headroom past the longest training sequence
        max_positions: file.usize("max_positions", args.max_positions, max_seq_len + 16),
    };

    let schedule_speedup = file.f64_opt("schedule_speedup", args.schedule_speedup);
    let schedule = match schedule_speedup {
        Some(s) => {
            let preset = preset_or_derived(model_cfg.num_decoder_layers, s)?;
            Some(build_schedule(&preset.schedule_config(prompt_len, max_seq_len))?)
        }
        None => None,
    };

    let epochs = file.usize("epochs", args.epochs, 4);
    let train_cfg = TrainConfig {
        learning_rate: file.f64("lr", args.lr, 1e-3),
        epochs: epochs.max(1),
        batch_size: file.usize("batch_size", args.batch_size, 16),
        warmup_steps: file.usize("warmup_steps", args.warmup_steps, 20),
        max_seq_len,
        prompt_length: prompt_len,
        seed: args.shared.seed,
        schedule,
    };

    let weights: DecoderWeights<S> = init_weights(&model_cfg, args.shared.seed)?;
    let (trained, log) = if epochs == 0 {
        (weights, Vec::new())
    } else {
        finetune_with_schedule(weights, &sequences, vocab.pad_id(), &train_cfg)?
    };

    let ckpt_path = out_dir.join("checkpoint.bin");
    skipdecode::checkpoint::save(&trained, &ckpt_path)?;
    outputs.push(ckpt_path);
    let vocab_path = out_dir.join("vocab.json");
    vocab.save(&vocab_path)?;
    outputs.push(vocab_path);
    let log_path = out_dir.join("train_log.csv");
    write_text(&log_path, &training_log_csv(&log))?;
    outputs.push(log_path);

    if let (Some(first), Some(last)) = (log.first(), log.last()) {
        println!(
            "trained {} steps: loss {:.4} -> {:.4}",
            log.len(),
            first.loss,
            last.loss
        );
    } else {
        println!("wrote initialized checkpoint (no training steps)");
    }

    Ok(Outcome {
        resolved_config: json!({
            "corpus": corpus_source,
            "vocab_size": vocab.len(),
            "d_model": model_cfg.d_model,
            "n_heads": model_cfg.n_heads,
            "d_ff": model_cfg.d_ff,
            "layers": model_cfg.num_decoder_layers,
            "max_positions": model_cfg.max_positions,
            "lr": train_cfg.learning_rate,
            "epochs": epochs,
            "batch_size": train_cfg.batch_size,
            "warmup_steps": train_cfg.warmup_steps,
            "prompt_len": prompt_len,
            "max_seq_len": max_seq_len,
            "schedule_speedup": schedule_speedup,
            "precision": if matches!(args.shared.precision, Precision::F64) { "f64" } else { "f32" },
        }),
        inputs,
        outputs,
    })
}
