//! Deterministic synthetic corpus: key-value records rendered through a
//! fixed sentence template, with a word-level vocabulary built from the
//! corpus.
//!
//! Each record's prompt lists attributes as single `key:value` tokens; a
//! separator token splits prompt from completion, and every completion ends
//! with the end-of-text token. Every completion slot has a synonym
//! alternative whose sampling probability decays linearly along the
//! sentence, so the per-position entropy of the corpus falls steadily from
//! the separator to the end, so later tokens really are easier to predict.

use std::collections::HashMap;
use std::path::Path;

use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub const PAD_TOKEN: &str = "<pad>";
pub const SEP_TOKEN: &str = "<sep>";
pub const EOS_TOKEN: &str = "<eos>";

const NAMES: &[&str] = &["alory", "brint", "casca", "dovet", "elmra", "finch", "galet", "harlo"];
const EAT_TYPES: &[&str] = &["pub", "cafe", "bistro", "diner"];
const FOODS: &[&str] = &["thai", "sushi", "pizza", "tapas", "curry"];
const RATINGS: &[&str] = &["low", "average", "high"];
const NEARS: &[&str] = &["station", "park", "river", "market"];

/// Word-level vocabulary; id 0 is always the pad token.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Vocabulary {
    words: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, u32>,
}

impl Vocabulary {
    fn from_words(words: Vec<String>) -> Vocabulary {
        let index = words
            .iter()
            .enumerate()
            .map(|(i, w)| (w.clone(), i as u32))
            .collect();
        Vocabulary { words, index }
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn pad_id(&self) -> u32 {
        0
    }

    pub fn sep_id(&self) -> u32 {
        self.index[SEP_TOKEN]
    }

    pub fn eos_id(&self) -> u32 {
        self.index[EOS_TOKEN]
    }

    pub fn id(&self, word: &str) -> Option<u32> {
        self.index.get(word).copied()
    }

    pub fn word(&self, id: u32) -> Option<&str> {
        self.words.get(id as usize).map(|s| s.as_str())
    }

    /// Whitespace tokenization against this vocabulary.
    pub fn encode(&self, text: &str) -> Result<Vec<u32>> {
        text.split_whitespace()
            .map(|w| {
                self.id(w)
                    .ok_or_else(|| Error::Format(format!("word {w:?} not in vocabulary")))
            })
            .collect()
    }

    pub fn decode(&self, tokens: &[u32]) -> String {
        tokens
            .iter()
            .filter_map(|&t| self.word(t))
            .collect::<Vec<_>>()
            .join(" ")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Vocabulary> {
        let v: Vocabulary = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        Ok(Vocabulary::from_words(v.words))
    }
}

/// One prompt/completion pair, tokenized and raw.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CorpusRecord {
    pub prompt: String,
    pub completion: String,
}

#[derive(Debug, Clone)]
pub struct Corpus {
    pub records: Vec<CorpusRecord>,
    pub vocab: Vocabulary,
}

/// Generator knobs for the synthetic corpus.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct CorpusSpec {
    pub records: usize,
    pub seed: u64,
}

impl Corpus {
    /// Prompt + separator + completion as one token sequence.
    pub fn sequence(&self, record: &CorpusRecord) -> Result<Vec<u32>> {
        let mut seq = self.vocab.encode(&record.prompt)?;
        seq.push(self.vocab.sep_id());
        seq.extend(self.vocab.encode(&record.completion)?);
        Ok(seq)
    }

    pub fn sequences(&self) -> Result<Vec<Vec<u32>>> {
        self.records.iter().map(|r| self.sequence(r)).collect()
    }

    /// Prompt region width (attribute tokens plus the separator); identical
    /// for every record, so it is also the median prompt length.
    pub fn prompt_len(&self) -> usize {
        6
    }

    pub fn max_sequence_len(&self) -> Result<usize> {
        Ok(self
            .sequences()?
            .iter()
            .map(|s| s.len())
            .max()
            .unwrap_or(0))
    }
}

fn synonym(word: &str) -> &'static str {
    match word {
        // attribute renderings
        "low" => "poor",
        "average" => "okay",
        "high" => "great",
        "pub" => "tavern",
        "cafe" => "coffeehouse",
        "bistro" => "eatery",
        "diner" => "grill",
        "thai" => "eastern",
        "sushi" => "seafood",
        "pizza" => "italian",
        "tapas" => "spanish",
        "curry" => "spiced",
        "station" => "terminal",
        "park" => "gardens",
        "river" => "waterside",
        "market" => "bazaar",
        // glue words
        "is" => "was",
        "a" => "one",
        "rated" => "scored",
        "serving" => "offering",
        "food" => "dishes",
        "near" => "by",
        "the" => "that",
        "and" => "while",
        "locals" => "guests",
        "like" => "love",
        "it" => "this",
        "very" => "quite",
        "much" => "often",
        _ => "spot", // opener alternative (replaces the venue name)
    }
}

/// Renders one completion. Slot `i` uses its synonym with probability
/// `0.5 * (1 - i / slots)`, so entropy decays linearly along the sentence;
/// the closing period and end-of-text token are always deterministic.
fn render_completion(rng: &mut StdRng, name: &str, eat: &str, food: &str, rating: &str, near: &str) -> String {
    let primaries: Vec<&str> = vec![
        name, "is", "a", rating, "rated", eat, "serving", food, "food", "near", "the", near,
        "and", "locals", "like", "it", "very", "much",
    ];
    let slots = primaries.len() as f64;
    let mut words = Vec::with_capacity(primaries.len() + 2);
    for (i, primary) in primaries.iter().enumerate() {
        let alt_prob = 0.5 * (1.0 - i as f64 / slots);
        if rng.gen::<f64>() < alt_prob {
            words.push(synonym(primary));
        } else {
            words.push(primary);
        }
    }
    words.push(".");
    words.push(EOS_TOKEN);
    words.join(" ")
}

/// Builds the deterministic synthetic corpus and its vocabulary.
pub fn make_synthetic_corpus(spec: &CorpusSpec) -> Corpus {
    let mut rng = StdRng::seed_from_u64(spec.seed);
    let mut records = Vec::with_capacity(spec.records);
    for _ in 0..spec.records {
        let name = NAMES[rng.gen_range(0..NAMES.len())];
        let eat = EAT_TYPES[rng.gen_range(0..EAT_TYPES.len())];
        let food = FOODS[rng.gen_range(0..FOODS.len())];
        let rating = RATINGS[rng.gen_range(0..RATINGS.len())];
        let near = NEARS[rng.gen_range(0..NEARS.len())];
        let prompt =
            format!("name:{name} type:{eat} food:{food} rating:{rating} near:{near}");
        let completion = render_completion(&mut rng, name, eat, food, rating, near);
        records.push(CorpusRecord { prompt, completion });
    }

    let vocab = build_vocabulary(&records);
    Corpus { records, vocab }
}

/// Word-level vocabulary over a record set: pad/separator/end-of-text first,
/// then every distinct corpus word in first-seen order, so the vocabulary
/// covers the corpus completely.
pub fn build_vocabulary(records: &[CorpusRecord]) -> Vocabulary {
    let mut words = vec![PAD_TOKEN.to_string(), SEP_TOKEN.to_string(), EOS_TOKEN.to_string()];
    let mut seen: HashMap<String, ()> = words.iter().cloned().map(|w| (w, ())).collect();
    for record in records {
        for word in record
            .prompt
            .split_whitespace()
            .chain(record.completion.split_whitespace())
        {
            if seen.insert(word.to_string(), ()).is_none() {
                words.push(word.to_string());
            }
        }
    }
    Vocabulary::from_words(words)
}

/// Writes records as JSON-lines with `prompt` and `completion` fields.
pub fn save_corpus(records: &[CorpusRecord], path: &Path) -> Result<()> {
    let mut out = String::new();
    for record in records {
        out.push_str(&serde_json::to_string(record)?);
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Reads a JSON-lines corpus file.
pub fn load_corpus(path: &Path) -> Result<Vec<CorpusRecord>> {
    let text = std::fs::read_to_string(path)?;
    let mut records = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let record: CorpusRecord = serde_json::from_str(line)
            .map_err(|e| Error::Format(format!("corpus line {}: {e}", i + 1)))?;
        records.push(record);
    }
    if records.is_empty() {
        return Err(Error::Format("corpus file has no records".into()));
    }
    Ok(records)
}
