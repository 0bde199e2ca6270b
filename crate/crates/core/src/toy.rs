//! A small synthetic paraphrase task and matching configs, used by the
//! overfitting checks and as a quick end-to-end smoke run.
//!
//! Each target copies its source except that words with a listed synonym
//! are rewritten, so a model has to learn both copying and a lexical map.

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attention::MaskMode;
use crate::data::ParaphrasePair;
use crate::model::ModelConfig;
use crate::train::TrainConfig;

const WORDS: [&str; 16] = [
    "how", "can", "i", "learn", "fast", "big", "cheap", "car", "city", "buy", "good", "phone", "start", "job", "quick",
    "home",
];

const SYNONYMS: [(&str, &str); 6] = [
    ("fast", "quickly"),
    ("big", "large"),
    ("cheap", "affordable"),
    ("buy", "purchase"),
    ("start", "begin"),
    ("good", "great"),
];

fn rewrite(word: &str) -> &str {
    SYNONYMS.iter().find(|(w, _)| *w == word).map_or(word, |(_, s)| s)
}

/// `n` distinct pairs with sources of 3 to 6 words.
pub fn toy_corpus(n: usize, seed: u64) -> Vec<ParaphrasePair> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut seen = std::collections::HashSet::new();
    let mut pairs = Vec::with_capacity(n);
    while pairs.len() < n {
        let len = rng.random_range(3..=6);
        let words: Vec<&str> = (0..len).map(|_| *WORDS.choose(&mut rng).unwrap()).collect();
        let source = words.join(" ");
        if !seen.insert(source.clone()) {
            continue;
        }
        let target = words.iter().map(|w| rewrite(w)).collect::<Vec<_>>().join(" ");
        pairs.push(ParaphrasePair::new(&source, &target));
    }
    pairs
}

/// Two layers, width 64, four heads.
pub fn toy_model_config(vocab_size: usize, mask_mode: MaskMode) -> ModelConfig {
    ModelConfig {
        layers: 2,
        hidden: 64,
        heads: 4,
        ffn_dim: 256,
        vocab_size,
        max_len: 12,
        dropout: 0.0,
        mask_mode,
        ..ModelConfig::default()
    }
}

/// Short schedule with a high peak rate, suitable for memorizing
/// [`toy_corpus`].
pub fn toy_train_config(seed: u64) -> TrainConfig {
    TrainConfig {
        batch_size: 16,
        max_steps: 2000,
        warmup_steps: 100,
        peak_lr: 2e-3,
        weight_decay: 0.0,
        seed,
        validation_interval: 0,
        ..TrainConfig::default()
    }
}
