use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::Args;
use serde_json::json;
use skipdecode::model::DecoderWeights;
use skipdecode::tensor::Scalar;
use skipdecode::training::{load_corpus, per_position_loss, spearman_rank_correlation};

use super::{load_checkpoint, load_vocab, write_text};
use crate::config::ConfigFile;
use crate::{Outcome, Precision, SharedArgs};

#[derive(Debug, Args)]
pub struct LossCurveArgs {
    #[command(flatten)]
    pub shared: SharedArgs,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub vocab: Option<PathBuf>,
    /// JSON-lines eval corpus with prompt/completion fields
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub batch_size: Option<usize>,
}

pub fn run(args: LossCurveArgs) -> Result<Outcome> {
    match args.shared.precision {
        Precision::F32 => run_typed::<f32>(args),
        Precision::F64 => run_typed::<f64>(args),
    }
}

fn run_typed<S: Scalar>(args: LossCurveArgs) -> Result<Outcome> {
    let file = ConfigFile::load(args.shared.config.as_deref())?;
    let weights: DecoderWeights<S> = load_checkpoint(&args.checkpoint)?;
    let vocab = load_vocab(args.vocab.as_deref(), &args.checkpoint)?;
    let records = load_corpus(&args.corpus)
        .with_context(|| format!("loading corpus {}", args.corpus.display()))?;

    let mut sequences = Vec::with_capacity(records.len());
    let mut prompt_lens = Vec::with_capacity(records.len());
    for record in &records {
        let mut seq = vocab.encode(&record.prompt)?;
        seq.push(vocab.sep_id());
        prompt_lens.push(seq.len());
        seq.extend(vocab.encode(&record.completion)?);
        sequences.push(seq);
    }
    prompt_lens.sort_unstable();
    let prompt_len = prompt_lens[prompt_lens.len() / 2];

    let batch_size = file.usize("batch_size", args.batch_size, 32);
    let curve = per_position_loss(&weights, &sequences, vocab.pad_id(), batch_size)?;
    let csv_path = args.shared.out_dir.join("loss_curve.csv");
    write_text(&csv_path, &curve.to_csv())?;

    let (positions, means) = curve.generation_means(prompt_len);
    let rho = if positions.len() >= 2 {
        spearman_rank_correlation(&positions, &means)
    } else {
        f64::NAN
    };
    println!(
        "{} positions, {} generation positions (prompt {prompt_len}); generation-region Spearman(position, loss) = {rho:.3}",
        curve.points.len(),
        positions.len()
    );

    Ok(Outcome {
        resolved_config: json!({
            "checkpoint": args.checkpoint.display().to_string(),
            "corpus": args.corpus.display().to_string(),
            "batch_size": batch_size,
            "prompt_len": prompt_len,
            "generation_spearman": rho,
        }),
        inputs: vec![args.checkpoint.clone(), args.corpus.clone()],
        outputs: vec![csv_path],
    })
}
