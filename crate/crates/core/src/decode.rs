//! Greedy and beam-search generation.
//!
//! Decoders work against [`StepModel`], which exposes one encoded source
//! and next-token log-probabilities for a set of equal-length prefixes.
//! Prefixes handed to the model start with BOS; hypotheses returned here
//! do not include it.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{EncoderOutput, Model, BOS_ID, EOS_ID};
use crate::tensor::Element;

pub const DEFAULT_BEAM_SIZE: usize = 8;

/// An autoregressive model as seen by the decoders.
pub trait StepModel {
    type Encoded;

    fn encode(&self, src: &[usize]) -> Result<Self::Encoded>;

    /// One row of log-probabilities over the vocabulary per prefix.
    fn next_log_probs(&self, encoded: &Self::Encoded, prefixes: &[Vec<usize>]) -> Result<Vec<Vec<f64>>>;
}

impl<T: Element> StepModel for Model<T> {
    type Encoded = EncoderOutput<T>;

    fn encode(&self, src: &[usize]) -> Result<Self::Encoded> {
        self.encoder_forward(self.clip_source(src))
    }

    fn next_log_probs(&self, encoded: &Self::Encoded, prefixes: &[Vec<usize>]) -> Result<Vec<Vec<f64>>> {
        Model::next_log_probs(self, prefixes, encoded)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecodeConfig {
    pub beam_size: usize,
    /// Maximum number of generated tokens, EOS included.
    pub max_len: usize,
    /// Scores are `log_prob / len^alpha`.
    pub length_alpha: f64,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        DecodeConfig {
            beam_size: DEFAULT_BEAM_SIZE,
            max_len: 20,
            length_alpha: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Hypothesis {
    /// Generated ids, ending in EOS when finished by it.
    pub token_ids: Vec<usize>,
    pub log_prob: f64,
    pub finished: bool,
}

impl Hypothesis {
    pub fn score(&self, alpha: f64) -> f64 {
        length_normalized(self.log_prob, self.token_ids.len(), alpha)
    }
}

pub fn length_normalized(log_prob: f64, len: usize, alpha: f64) -> f64 {
    if len == 0 {
        return log_prob;
    }
    log_prob / (len as f64).powf(alpha)
}

/// Higher score first, then lexicographically smaller ids.
fn rank(a: (f64, &[usize]), b: (f64, &[usize])) -> Ordering {
    b.0.total_cmp(&a.0).then_with(|| a.1.cmp(b.1))
}

fn with_bos(tokens: &[usize]) -> Vec<usize> {
    let mut p = Vec::with_capacity(tokens.len() + 1);
    p.push(BOS_ID);
    p.extend_from_slice(tokens);
    p
}

fn argmax_lowest(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in row.iter().enumerate() {
        if x > row[best] {
            best = i;
        }
    }
    best
}

/// Picks the most likely token at every step; ties go to the lowest id.
pub fn greedy_decode<M: StepModel>(model: &M, src: &[usize], max_len: usize) -> Result<Hypothesis> {
    let encoded = model.encode(src)?;
    let mut tokens = Vec::new();
    let mut log_prob = 0.0;
    while tokens.len() < max_len {
        let row = model
            .next_log_probs(&encoded, &[with_bos(&tokens)])?
            .pop()
            .ok_or_else(|| Error::Input("model returned no log-probabilities".into()))?;
        let next = argmax_lowest(&row);
        log_prob += row[next];
        tokens.push(next);
        if next == EOS_ID {
            break;
        }
    }
    Ok(Hypothesis {
        token_ids: tokens,
        log_prob,
        finished: true,
    })
}

/// Beam search with length-normalized ranking. Hypotheses that emit EOS
/// or reach `max_len` leave the beam for a finished pool; the pool and any
/// remaining live hypotheses are returned best first.
pub fn beam_search<M: StepModel>(model: &M, src: &[usize], cfg: &DecodeConfig) -> Result<Vec<Hypothesis>> {
    if cfg.beam_size == 0 {
        return Err(Error::Config("beam_size must be at least 1".into()));
    }
    let alpha = cfg.length_alpha;
    let encoded = model.encode(src)?;
    let mut live = vec![Hypothesis {
        token_ids: Vec::new(),
        log_prob: 0.0,
        finished: false,
    }];
    let mut pool = Vec::new();
    for _ in 0..cfg.max_len {
        if live.is_empty() {
            break;
        }
        let prefixes: Vec<Vec<usize>> = live.iter().map(|h| with_bos(&h.token_ids)).collect();
        let rows = model.next_log_probs(&encoded, &prefixes)?;
        let mut candidates: Vec<(f64, Vec<usize>, f64)> = Vec::new();
        for (h, row) in live.iter().zip(&rows) {
            for (token, &lp) in row.iter().enumerate() {
                if lp == f64::NEG_INFINITY {
                    continue;
                }
                let mut ids = h.token_ids.clone();
                ids.push(token);
                let total = h.log_prob + lp;
                candidates.push((length_normalized(total, ids.len(), alpha), ids, total));
            }
        }
        candidates.sort_by(|a, b| rank((a.0, &a.1), (b.0, &b.1)));
        candidates.truncate(cfg.beam_size);
        live = Vec::with_capacity(candidates.len());
        for (_, ids, log_prob) in candidates {
            let finished = ids.last() == Some(&EOS_ID) || ids.len() >= cfg.max_len;
            let h = Hypothesis {
                token_ids: ids,
                log_prob,
                finished,
            };
            if finished {
                pool.push(h);
            } else {
                live.push(h);
            }
        }
    }
    pool.extend(live);
    pool.sort_by(|a, b| rank((a.score(alpha), &a.token_ids), (b.score(alpha), &b.token_ids)));
    Ok(pool)
}

/// Every sequence of at most `max_len` tokens that either ends at its
/// first EOS or runs to `max_len`, with its log-probability. Exponential;
/// meant as a test oracle for tiny vocabularies.
pub fn enumerate_sequences<M: StepModel>(model: &M, src: &[usize], max_len: usize) -> Result<Vec<Hypothesis>> {
    let encoded = model.encode(src)?;
    let mut out = Vec::new();
    let mut frontier = vec![(Vec::<usize>::new(), 0.0)];
    while let Some((ids, lp)) = frontier.pop() {
        if ids.last() == Some(&EOS_ID) || ids.len() == max_len {
            out.push(Hypothesis {
                token_ids: ids,
                log_prob: lp,
                finished: true,
            });
            continue;
        }
        let row = model.next_log_probs(&encoded, &[with_bos(&ids)])?.remove(0);
        for (token, &p) in row.iter().enumerate() {
            let mut next = ids.clone();
            next.push(token);
            frontier.push((next, lp + p));
        }
    }
    Ok(out)
}
