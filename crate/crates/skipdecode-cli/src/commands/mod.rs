pub mod bench;
pub mod generate;
pub mod loss_curve;
pub mod schedule;
pub mod train;

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use skipdecode::model::DecoderWeights;
use skipdecode::tensor::Scalar;
use skipdecode::training::Vocabulary;

/// Loads a checkpoint in the requested precision.
pub fn load_checkpoint<S: Scalar>(path: &Path) -> Result<DecoderWeights<S>> {
    skipdecode::checkpoint::load(path)
        .with_context(|| format!("loading checkpoint {}", path.display()))
}

/// Loads the vocabulary: an explicit path or `vocab.json` next to the
/// checkpoint.
pub fn load_vocab(explicit: Option<&Path>, checkpoint: &Path) -> Result<Vocabulary> {
    let path: PathBuf = match explicit {
        Some(p) => p.to_path_buf(),
        None => checkpoint
            .parent()
            .unwrap_or_else(|| Path::new("."))
            .join("vocab.json"),
    };
    Vocabulary::load(&path).with_context(|| format!("loading vocabulary {}", path.display()))
}

/// Tokenizes a record prompt and appends the separator, producing the
/// context a model expects to continue from.
pub fn encode_prompt(vocab: &Vocabulary, prompt: &str) -> Result<Vec<u32>> {
    let mut ids = vocab.encode(prompt)?;
    ids.push(vocab.sep_id());
    Ok(ids)
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}
