//! BLEU, iBLEU and ROUGE-L over token sequences.
//!
//! Sentence-level BLEU smooths an n-gram order of 2 or more that has no
//! matches by counting one match out of `total + 1`. An order for which
//! the candidate has no n-grams at all (the candidate is shorter than `n`)
//! contributes a precision of 1. Corpus-level BLEU pools clipped counts
//! over all records and does not smooth.

use std::collections::HashMap;
use std::hash::Hash;

use serde::{Deserialize, Serialize};

pub const DEFAULT_IBLEU_ALPHA: f64 = 0.9;
pub const ROUGE_BETA: f64 = 1.2;

fn ngram_counts<T: Eq + Hash>(tokens: &[T], n: usize) -> HashMap<&[T], usize> {
    let mut counts = HashMap::new();
    if n > 0 && tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    counts
}

/// Clipped matches and candidate n-gram total for one order.
pub fn clipped_counts<T: Eq + Hash>(candidate: &[T], references: &[&[T]], n: usize) -> (usize, usize) {
    let cand = ngram_counts(candidate, n);
    let mut max_ref: HashMap<&[T], usize> = HashMap::new();
    for r in references {
        for (g, c) in ngram_counts(r, n) {
            let e = max_ref.entry(g).or_insert(0);
            *e = (*e).max(c);
        }
    }
    let matches = cand
        .iter()
        .map(|(g, &c)| c.min(max_ref.get(g).copied().unwrap_or(0)))
        .sum();
    (matches, candidate.len().saturating_sub(n - 1))
}

/// Length of the reference closest to `c`, preferring the shorter on ties.
pub fn closest_ref_len(c: usize, ref_lens: impl IntoIterator<Item = usize>) -> usize {
    ref_lens.into_iter().min_by_key(|&r| (r.abs_diff(c), r)).unwrap_or(0)
}

pub fn brevity_penalty(c: usize, r: usize) -> f64 {
    if c == 0 {
        0.0
    } else if c > r {
        1.0
    } else {
        (1.0 - r as f64 / c as f64).exp()
    }
}

fn geometric_mean(precisions: &[f64]) -> f64 {
    if precisions.contains(&0.0) {
        return 0.0;
    }
    (precisions.iter().map(|p| p.ln()).sum::<f64>() / precisions.len() as f64).exp()
}

/// Smoothed sentence BLEU with uniform weights over orders `1..=max_n`.
pub fn sentence_bleu<T: Eq + Hash>(candidate: &[T], references: &[&[T]], max_n: usize) -> f64 {
    if candidate.is_empty() {
        log::warn!("empty candidate scores BLEU 0");
        return 0.0;
    }
    if references.is_empty() {
        return 0.0;
    }
    let precisions: Vec<f64> = (1..=max_n)
        .map(|n| match clipped_counts(candidate, references, n) {
            (_, 0) => 1.0,
            (0, total) if n >= 2 => 1.0 / (total + 1) as f64,
            (m, total) => m as f64 / total as f64,
        })
        .collect();
    let r = closest_ref_len(candidate.len(), references.iter().map(|r| r.len()));
    geometric_mean(&precisions) * brevity_penalty(candidate.len(), r)
}

/// Corpus BLEU: clipped counts and lengths are summed over records before
/// the precisions and brevity penalty are formed.
pub fn corpus_bleu<T: Eq + Hash>(candidates: &[&[T]], references: &[Vec<&[T]>], max_n: usize) -> f64 {
    assert_eq!(candidates.len(), references.len(), "one reference set per candidate");
    let mut matches = vec![0usize; max_n];
    let mut totals = vec![0usize; max_n];
    let (mut c, mut r) = (0usize, 0usize);
    for (cand, refs) in candidates.iter().zip(references) {
        if cand.is_empty() {
            log::warn!("empty candidate in corpus BLEU");
        }
        for n in 1..=max_n {
            let (m, t) = clipped_counts(cand, refs, n);
            matches[n - 1] += m;
            totals[n - 1] += t;
        }
        c += cand.len();
        r += closest_ref_len(cand.len(), refs.iter().map(|x| x.len()));
    }
    let precisions: Vec<f64> = matches
        .iter()
        .zip(&totals)
        .map(|(&m, &t)| if t == 0 { 1.0 } else { m as f64 / t as f64 })
        .collect();
    geometric_mean(&precisions) * brevity_penalty(c, r)
}

/// `alpha * BLEU-4(candidate, reference) - (1 - alpha) * BLEU-4(candidate, source)`.
pub fn ibleu<T: Eq + Hash>(candidate: &[T], reference: &[T], source: &[T], alpha: f64) -> f64 {
    alpha * sentence_bleu(candidate, &[reference], 4) - (1.0 - alpha) * sentence_bleu(candidate, &[source], 4)
}

pub fn corpus_ibleu<T: Eq + Hash>(candidates: &[&[T]], references: &[Vec<&[T]>], sources: &[&[T]], alpha: f64) -> f64 {
    let src: Vec<Vec<&[T]>> = sources.iter().map(|s| vec![*s]).collect();
    alpha * corpus_bleu(candidates, references, 4) - (1.0 - alpha) * corpus_bleu(candidates, &src, 4)
}

/// Longest common subsequence length by dynamic programming.
pub fn lcs_len<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { prev[j + 1].max(cur[j]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// LCS-based F-measure with recall weighted by `beta`.
pub fn rouge_l_with_beta<T: PartialEq>(candidate: &[T], reference: &[T], beta: f64) -> f64 {
    if candidate.is_empty() || reference.is_empty() {
        log::warn!("empty sequence scores ROUGE-L 0");
        return 0.0;
    }
    let lcs = lcs_len(candidate, reference) as f64;
    if lcs == 0.0 {
        return 0.0;
    }
    let p = lcs / candidate.len() as f64;
    let r = lcs / reference.len() as f64;
    let b2 = beta * beta;
    (1.0 + b2) * p * r / (r + b2 * p)
}

pub fn rouge_l<T: PartialEq>(candidate: &[T], reference: &[T]) -> f64 {
    rouge_l_with_beta(candidate, reference, ROUGE_BETA)
}

/// Best ROUGE-L over several references.
pub fn rouge_l_multi<T: PartialEq>(candidate: &[T], references: &[&[T]]) -> f64 {
    references.iter().map(|r| rouge_l(candidate, r)).fold(0.0, f64::max)
}

/// One evaluated candidate with its references and source.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub source: Vec<String>,
    pub references: Vec<Vec<String>>,
    pub candidate: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecordScores {
    pub index: usize,
    pub bleu2: f64,
    pub bleu4: f64,
    pub ibleu: f64,
    pub rouge_l: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub bleu2: f64,
    pub bleu4: f64,
    pub ibleu: f64,
    pub rouge_l: f64,
    pub n_records: usize,
}

fn refs_of(r: &EvalRecord) -> Vec<&[String]> {
    r.references.iter().map(Vec::as_slice).collect()
}

pub fn score_record(index: usize, r: &EvalRecord, alpha: f64) -> RecordScores {
    let refs = refs_of(r);
    let bleu4 = sentence_bleu(&r.candidate, &refs, 4);
    RecordScores {
        index,
        bleu2: sentence_bleu(&r.candidate, &refs, 2),
        bleu4,
        ibleu: alpha * bleu4 - (1.0 - alpha) * sentence_bleu(&r.candidate, &[r.source.as_slice()], 4),
        rouge_l: rouge_l_multi(&r.candidate, &refs),
    }
}

/// Corpus BLEU and iBLEU with mean sentence ROUGE-L.
pub fn evaluate(records: &[EvalRecord], alpha: f64) -> EvalReport {
    let cands: Vec<&[String]> = records.iter().map(|r| r.candidate.as_slice()).collect();
    let refs: Vec<Vec<&[String]>> = records.iter().map(refs_of).collect();
    let srcs: Vec<&[String]> = records.iter().map(|r| r.source.as_slice()).collect();
    let rouge = if records.is_empty() {
        0.0
    } else {
        records
            .iter()
            .map(|r| rouge_l_multi(&r.candidate, &refs_of(r)))
            .sum::<f64>()
            / records.len() as f64
    };
    EvalReport {
        bleu2: corpus_bleu(&cands, &refs, 2),
        bleu4: corpus_bleu(&cands, &refs, 4),
        ibleu: corpus_ibleu(&cands, &refs, &srcs, alpha),
        rouge_l: rouge,
        n_records: records.len(),
    }
}
