//! Corpus loading, tokenization, vocabulary and batching.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{TokenBatch, BOS_ID, EOS_ID, PAD_ID, UNK_ID};

pub const RESERVED_TOKENS: [&str; 4] = ["<pad>", "<bos>", "<eos>", "<unk>"];

/// Share of malformed lines above which loading fails.
pub const MAX_MALFORMED_FRACTION: f64 = 0.10;

fn is_punctuation(c: char) -> bool {
    !c.is_alphanumeric() && !c.is_whitespace()
}

/// Lowercases and splits on whitespace; every punctuation character
/// becomes its own token.
pub fn basic_tokenize(text: &str) -> Vec<String> {
    let mut tokens = Vec::new();
    let mut word = String::new();
    for c in text.chars().flat_map(char::to_lowercase) {
        if c.is_whitespace() || is_punctuation(c) {
            if !word.is_empty() {
                tokens.push(std::mem::take(&mut word));
            }
            if is_punctuation(c) {
                tokens.push(c.to_string());
            }
        } else {
            word.push(c);
        }
    }
    if !word.is_empty() {
        tokens.push(word);
    }
    tokens
}

/// Rule-based tokenizer with an optional subword vocabulary.
#[derive(Clone, Debug, Default)]
pub enum Tokenizer {
    #[default]
    Basic,
    /// Greedy longest-match-first subwords; continuation pieces carry a
    /// `##` prefix. Words that cannot be split become `unk`.
    WordPiece {
        pieces: HashSet<String>,
        unk: String,
        max_word_chars: usize,
    },
}

impl Tokenizer {
    /// Loads a subword vocabulary file with one piece per line.
    pub fn wordpiece_from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let pieces: HashSet<String> = text
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty())
            .map(String::from)
            .collect();
        if pieces.is_empty() {
            return Err(Error::Data(format!("subword vocabulary {} is empty", path.display())));
        }
        Ok(Tokenizer::WordPiece {
            pieces,
            unk: RESERVED_TOKENS[UNK_ID].to_string(),
            max_word_chars: 100,
        })
    }

    pub fn tokenize(&self, text: &str) -> Vec<String> {
        let words = basic_tokenize(text);
        match self {
            Tokenizer::Basic => words,
            Tokenizer::WordPiece {
                pieces,
                unk,
                max_word_chars,
            } => words
                .iter()
                .flat_map(|w| wordpiece_split(w, pieces, unk, *max_word_chars))
                .collect(),
        }
    }
}

fn wordpiece_split(word: &str, pieces: &HashSet<String>, unk: &str, max_chars: usize) -> Vec<String> {
    let chars: Vec<char> = word.chars().collect();
    if chars.len() > max_chars {
        return vec![unk.to_string()];
    }
    let mut out = Vec::new();
    let mut start = 0;
    while start < chars.len() {
        let mut end = chars.len();
        let mut found = None;
        while end > start {
            let mut piece: String = chars[start..end].iter().collect();
            if start > 0 {
                piece.insert_str(0, "##");
            }
            if pieces.contains(&piece) {
                found = Some(piece);
                break;
            }
            end -= 1;
        }
        match found {
            Some(p) => out.push(p),
            None => return vec![unk.to_string()],
        }
        start = end;
    }
    out
}

/// Joins tokens with spaces, gluing `##` continuation pieces.
pub fn detokenize(tokens: &[String]) -> String {
    let mut out = String::new();
    for t in tokens {
        match t.strip_prefix("##") {
            Some(rest) if !out.is_empty() => out.push_str(rest),
            _ => {
                if !out.is_empty() {
                    out.push(' ');
                }
                out.push_str(t);
            }
        }
    }
    out
}

/// Token/id bijection with four reserved ids.
#[derive(Clone, Debug, PartialEq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    fn from_tokens(words: impl IntoIterator<Item = String>) -> Result<Self> {
        let mut tokens: Vec<String> = RESERVED_TOKENS.iter().map(|s| s.to_string()).collect();
        tokens.extend(words);
        let mut index = HashMap::with_capacity(tokens.len());
        for (id, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), id).is_some() {
                return Err(Error::Data(format!("duplicate vocabulary entry {t:?}")));
            }
        }
        Ok(Vocabulary { tokens, index })
    }

    /// Keeps the most frequent tokens with at least `min_freq` occurrences,
    /// ties broken lexicographically. `max_size` counts the reserved ids.
    pub fn build<'a>(
        corpus: impl IntoIterator<Item = &'a [String]>,
        max_size: Option<usize>,
        min_freq: usize,
    ) -> Result<Self> {
        let mut counts: HashMap<&str, usize> = HashMap::new();
        for sentence in corpus {
            for t in sentence {
                *counts.entry(t.as_str()).or_default() += 1;
            }
        }
        if counts.is_empty() {
            return Err(Error::Data("cannot build a vocabulary from an empty corpus".into()));
        }
        let mut ranked: Vec<(&str, usize)> = counts
            .into_iter()
            .filter(|&(t, c)| c >= min_freq.max(1) && !RESERVED_TOKENS.contains(&t))
            .collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
        let room = max_size.map_or(usize::MAX, |m| m.saturating_sub(RESERVED_TOKENS.len()));
        Self::from_tokens(ranked.into_iter().take(room).map(|(t, _)| t.to_string()))
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK_ID)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn encode(&self, tokens: &[String]) -> Vec<usize> {
        tokens.iter().map(|t| self.id(t)).collect()
    }

    /// Tokens up to the first EOS, skipping PAD and BOS.
    pub fn decode(&self, ids: &[usize]) -> Vec<String> {
        ids.iter()
            .take_while(|&&id| id != EOS_ID)
            .filter(|&&id| id != PAD_ID && id != BOS_ID)
            .map(|&id| self.token(id).unwrap_or(RESERVED_TOKENS[UNK_ID]).to_string())
            .collect()
    }

    /// Writes the non-reserved tokens, one per line, in id order.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = String::new();
        for t in &self.tokens[RESERVED_TOKENS.len()..] {
            text.push_str(t);
            text.push('\n');
        }
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_tokens(text.lines().filter(|l| !l.is_empty()).map(String::from))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "train" => Ok(Split::Train),
            "valid" | "validation" | "dev" => Ok(Split::Valid),
            "test" => Ok(Split::Test),
            other => Err(Error::Data(format!("unknown split {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParaphrasePair {
    pub source: String,
    pub target: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<Split>,
}

impl ParaphrasePair {
    pub fn new(source: &str, target: &str) -> Self {
        ParaphrasePair {
            source: source.to_string(),
            target: target.to_string(),
            split: None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Format {
    /// `source<TAB>target[<TAB>split]`.
    Tsv,
    /// `{"source": .., "target": .., "split": ..}` per line.
    Jsonl,
}

impl Format {
    /// `.jsonl`/`.json` files are JSON lines, anything else TSV.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some("jsonl" | "json") => Format::Jsonl,
            _ => Format::Tsv,
        }
    }
}

impl FromStr for Format {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "tsv" => Ok(Format::Tsv),
            "jsonl" => Ok(Format::Jsonl),
            other => Err(Error::Config(format!(
                "unknown data format {other:?}; expected tsv or jsonl"
            ))),
        }
    }
}

impl fmt::Display for Format {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Format::Tsv => "tsv",
            Format::Jsonl => "jsonl",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MalformedLine {
    pub line: usize,
    pub reason: String,
}

#[derive(Clone, Debug, Default)]
pub struct LoadReport {
    pub pairs: Vec<ParaphrasePair>,
    pub malformed: Vec<MalformedLine>,
}

fn normalize(text: &str) -> String {
    text.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn parse_line(line: &str, format: Format) -> std::result::Result<ParaphrasePair, String> {
    let mut pair = match format {
        Format::Tsv => {
            let mut fields = line.split('\t');
            let (Some(source), Some(target)) = (fields.next(), fields.next()) else {
                return Err("missing TAB separator".into());
            };
            let split = fields
                .next()
                .map(str::parse)
                .transpose()
                .map_err(|e: Error| e.to_string())?;
            ParaphrasePair {
                source: source.to_string(),
                target: target.to_string(),
                split,
            }
        }
        Format::Jsonl => serde_json::from_str::<ParaphrasePair>(line).map_err(|e| e.to_string())?,
    };
    pair.source = normalize(&pair.source);
    pair.target = normalize(&pair.target);
    if pair.source.is_empty() || pair.target.is_empty() {
        return Err("empty source or target".into());
    }
    Ok(pair)
}

/// Parses a corpus from text; blank lines are ignored.
pub fn parse_dataset(text: &str, format: Format) -> Result<LoadReport> {
    let mut report = LoadReport::default();
    let mut seen = 0usize;
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        seen += 1;
        match parse_line(line, format) {
            Ok(p) => report.pairs.push(p),
            Err(reason) => {
                log::warn!("skipping line {}: {reason}", i + 1);
                report.malformed.push(MalformedLine { line: i + 1, reason });
            }
        }
    }
    let bad = report.malformed.len();
    if seen > 0 && bad as f64 > MAX_MALFORMED_FRACTION * seen as f64 {
        return Err(Error::Data(format!(
            "{bad} of {seen} lines are malformed (first at line {})",
            report.malformed[0].line
        )));
    }
    Ok(report)
}

pub fn load_dataset(path: &Path, format: Format) -> Result<LoadReport> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_dataset(&text, format)
}

/// Seeded shuffle into train/valid/test by fractions; pairs that already
/// carry a split tag keep it.
pub fn split_pairs(
    pairs: &[ParaphrasePair],
    valid_fraction: f64,
    test_fraction: f64,
    seed: u64,
) -> (Vec<ParaphrasePair>, Vec<ParaphrasePair>, Vec<ParaphrasePair>) {
    let mut untagged: Vec<&ParaphrasePair> = pairs.iter().filter(|p| p.split.is_none()).collect();
    untagged.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n = untagged.len() as f64;
    let n_valid = (n * valid_fraction).round() as usize;
    let n_test = ((n * test_fraction).round() as usize).min(untagged.len() - n_valid.min(untagged.len()));
    let (mut train, mut valid, mut test) = (Vec::new(), Vec::new(), Vec::new());
    for p in pairs.iter().filter(|p| p.split.is_some()) {
        match p.split {
            Some(Split::Train) => train.push(p.clone()),
            Some(Split::Valid) => valid.push(p.clone()),
            _ => test.push(p.clone()),
        }
    }
    for (i, p) in untagged.into_iter().enumerate() {
        let mut p = p.clone();
        let bucket = if i < n_valid {
            p.split = Some(Split::Valid);
            &mut valid
        } else if i < n_valid + n_test {
            p.split = Some(Split::Test);
            &mut test
        } else {
            p.split = Some(Split::Train);
            &mut train
        };
        bucket.push(p);
    }
    (train, valid, test)
}

/// A pair mapped to content ids, before BOS/EOS wrapping.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EncodedPair {
    pub source: Vec<usize>,
    pub target: Vec<usize>,
}

impl EncodedPair {
    pub fn encode(pair: &ParaphrasePair, tokenizer: &Tokenizer, vocab: &Vocabulary) -> Self {
        EncodedPair {
            source: vocab.encode(&tokenizer.tokenize(&pair.source)),
            target: vocab.encode(&tokenizer.tokenize(&pair.target)),
        }
    }
}

/// One padded training batch.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub src: TokenBatch,
    /// BOS followed by the truncated target.
    pub tgt_in: TokenBatch,
    /// Truncated target followed by EOS, `None` at padding; flattened
    /// `[batch, tgt_in.len]`.
    pub labels: Vec<Option<usize>>,
    /// Positions of the batch rows in the input slice.
    pub indices: Vec<usize>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn label_count(&self) -> usize {
        self.labels.iter().flatten().count()
    }
}

/// Source truncated to `max_len`.
pub fn source_ids(source: &[usize], max_len: usize) -> Vec<usize> {
    source[..source.len().min(max_len)].to_vec()
}

/// Decoder input and labels: `BOS + t[..max_len-1]` and `t[..max_len-1] + EOS`.
pub fn target_ids(target: &[usize], max_len: usize) -> (Vec<usize>, Vec<usize>) {
    let content = &target[..target.len().min(max_len.saturating_sub(1))];
    let mut input = vec![BOS_ID];
    input.extend_from_slice(content);
    let mut labels = content.to_vec();
    labels.push(EOS_ID);
    (input, labels)
}

/// Truncates, wraps, pads and groups pairs into batches. With a seed the
/// order is shuffled first.
pub fn make_batches(
    pairs: &[EncodedPair],
    batch_size: usize,
    max_len: usize,
    shuffle_seed: Option<u64>,
) -> Result<Vec<Batch>> {
    if batch_size == 0 || max_len == 0 {
        return Err(Error::Config("batch_size and max_len must be at least 1".into()));
    }
    if let Some(i) = pairs.iter().position(|p| p.source.is_empty()) {
        return Err(Error::Data(format!("pair {i} has an empty source")));
    }
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    if let Some(seed) = shuffle_seed {
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    }
    order
        .chunks(batch_size)
        .map(|chunk| {
            let srcs: Vec<Vec<usize>> = chunk.iter().map(|&i| source_ids(&pairs[i].source, max_len)).collect();
            let (inputs, outputs): (Vec<_>, Vec<_>) =
                chunk.iter().map(|&i| target_ids(&pairs[i].target, max_len)).unzip();
            let tgt_in = TokenBatch::from_sequences(&inputs)?;
            let mut labels = Vec::with_capacity(tgt_in.ids.len());
            for out in &outputs {
                labels.extend(out.iter().map(|&id| Some(id)));
                labels.resize(labels.len() + tgt_in.len - out.len(), None);
            }
            Ok(Batch {
                src: TokenBatch::from_sequences(&srcs)?,
                tgt_in,
                labels,
                indices: chunk.to_vec(),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toks(s: &[&str]) -> Vec<String> {
        s.iter().map(|t| t.to_string()).collect()
    }

    #[test]
    fn tokenizer_examples() {
        assert_eq!(basic_tokenize("What is AI?"), toks(&["what", "is", "ai", "?"]));
        assert!(basic_tokenize("").is_empty());
        assert_eq!(
            basic_tokenize("  Don't  stop!! "),
            toks(&["don", "'", "t", "stop", "!", "!"])
        );
        let t = basic_tokenize("How do I learn Rust, fast?");
        assert_eq!(basic_tokenize(&detokenize(&t)), t);
    }

    #[test]
    fn wordpiece_examples() {
        let pieces: HashSet<String> = ["un", "##aff", "##able", "run", "##ning"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        let tok = Tokenizer::WordPiece {
            pieces,
            unk: "<unk>".into(),
            max_word_chars: 100,
        };
        assert_eq!(
            tok.tokenize("Unaffable running"),
            toks(&["un", "##aff", "##able", "run", "##ning"])
        );
        assert_eq!(tok.tokenize("xyz"), toks(&["<unk>"]));
        assert_eq!(detokenize(&toks(&["un", "##aff", "##able", "run"])), "unaffable run");
    }

    #[test]
    fn vocabulary_building() {
        let corpus = [toks(&["b", "a", "c", "a"]), toks(&["b", "d"])];
        let v = Vocabulary::build(corpus.iter().map(|s| s.as_slice()), None, 1).unwrap();
        assert_eq!(v.len(), 8);
        // a and b tie at 2, then c and d at 1.
        assert_eq!(v.id("a"), 4);
        assert_eq!(v.id("b"), 5);
        assert_eq!(v.id("c"), 6);
        assert_eq!(v.id("zzz"), UNK_ID);
        let v = Vocabulary::build(corpus.iter().map(|s| s.as_slice()), None, 2).unwrap();
        assert_eq!(v.id("c"), UNK_ID);
        let v = Vocabulary::build(corpus.iter().map(|s| s.as_slice()), Some(5), 1).unwrap();
        assert_eq!(v.len(), 5);
        assert!(Vocabulary::build(std::iter::empty(), None, 1).is_err());
        assert_eq!(v.decode(&[BOS_ID, 4, 3, EOS_ID, 4]), toks(&["a", "<unk>"]));
    }

    #[test]
    fn vocabulary_round_trip() {
        let corpus = [toks(&["x", "y", "y"])];
        let v = Vocabulary::build(corpus.iter().map(|s| s.as_slice()), None, 1).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vocab.txt");
        v.save(&path).unwrap();
        assert_eq!(fs::read_to_string(&path).unwrap(), "y\nx\n");
        assert_eq!(Vocabulary::load(&path).unwrap(), v);
    }

    #[test]
    fn parse_formats() {
        let r = parse_dataset("a b\tc d\nx\ty\n", Format::Tsv).unwrap();
        assert_eq!(r.pairs.len(), 2);
        let text = "{\"source\":\"a\",\"target\":\"b\",\"id\":7}\n".repeat(10) + "not json\n";
        let r = parse_dataset(&text, Format::Jsonl).unwrap();
        assert_eq!(r.pairs.len(), 10);
        assert_eq!(r.malformed[0].line, 11);
        let text = "a\tb\n".repeat(9) + "missing tab\n";
        let r = parse_dataset(&text, Format::Tsv).unwrap();
        assert_eq!(r.malformed.len(), 1);
        let text = "a\tb\n".repeat(8) + "bad\nbad\n";
        assert!(parse_dataset(&text, Format::Tsv).is_err());
    }

    #[test]
    fn truncation_rule() {
        let long: Vec<usize> = (4..29).collect();
        assert_eq!(source_ids(&long, 20).len(), 20);
        let (input, labels) = target_ids(&long, 20);
        assert_eq!(input.len(), 20);
        assert_eq!(input[0], BOS_ID);
        assert_eq!(labels.len(), 20);
        assert_eq!(labels[..19], long[..19]);
        assert_eq!(labels[19], EOS_ID);
    }

    #[test]
    fn batch_sizes_and_padding() {
        let pairs: Vec<EncodedPair> = (0..33)
            .map(|i| EncodedPair {
                source: vec![4; 1 + i % 5],
                target: vec![5; i % 3],
            })
            .collect();
        let batches = make_batches(&pairs, 32, 20, Some(1)).unwrap();
        assert_eq!(batches.iter().map(Batch::len).collect::<Vec<_>>(), vec![32, 1]);
        for b in &batches {
            for row in 0..b.len() {
                let ids = &b.src.ids[row * b.src.len..(row + 1) * b.src.len];
                let first_pad = ids.iter().position(|&x| x == PAD_ID).unwrap_or(ids.len());
                assert!(ids[first_pad..].iter().all(|&x| x == PAD_ID));
            }
            assert_eq!(b.labels.len(), b.tgt_in.ids.len());
        }
        let again = make_batches(&pairs, 32, 20, Some(1)).unwrap();
        assert_eq!(batches, again);
    }

    #[test]
    fn seeded_split() {
        let pairs: Vec<ParaphrasePair> = (0..100).map(|i| ParaphrasePair::new(&i.to_string(), "x")).collect();
        let (train, valid, test) = split_pairs(&pairs, 0.1, 0.2, 3);
        assert_eq!((train.len(), valid.len(), test.len()), (70, 10, 20));
        assert_eq!(split_pairs(&pairs, 0.1, 0.2, 3).1, valid);
    }
}
