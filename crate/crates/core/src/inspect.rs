//! Per-layer granularity heatmaps for a single sentence.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::attention::MaskMode;
use crate::data::{Tokenizer, Vocabulary};
use crate::error::{Error, Result};
use crate::model::Model;

/// Upper edges of the lower four heatmap buckets.
pub const BUCKET_EDGES: [f64; 4] = [0.2, 0.4, 0.6, 0.8];

/// Cold to warm, lowest granularity first.
const ANSI_COLORS: [&str; 5] = ["\x1b[34m", "\x1b[36m", "\x1b[32m", "\x1b[33m", "\x1b[31m"];
const ANSI_RESET: &str = "\x1b[0m";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GranularityReport {
    pub tokens: Vec<String>,
    /// `layers x tokens` scores.
    pub per_layer_z: Vec<Vec<f64>>,
    pub checkpoint_id: String,
    pub mask_mode: MaskMode,
    /// Tokens dropped to fit `max_len`.
    #[serde(default)]
    pub truncated: usize,
}

/// Heatmap bucket `0..5` for a score.
pub fn bucket(z: f64) -> usize {
    BUCKET_EDGES.iter().take_while(|&&edge| z >= edge).count()
}

/// Runs the encoder over `sentence` and collects every layer's scores.
pub fn inspect<T: crate::tensor::Element>(
    model: &Model<T>,
    tokenizer: &Tokenizer,
    vocab: &Vocabulary,
    sentence: &str,
    checkpoint_id: &str,
) -> Result<GranularityReport> {
    let mut tokens = tokenizer.tokenize(sentence);
    if tokens.is_empty() {
        return Err(Error::Input("nothing to inspect: the sentence has no tokens".into()));
    }
    let max_len = model.config.max_len;
    let truncated = tokens.len().saturating_sub(max_len);
    if truncated > 0 {
        log::warn!("sentence has {} tokens; keeping the first {max_len}", tokens.len());
        tokens.truncate(max_len);
    }
    let enc = model.encoder_forward(&vocab.encode(&tokens))?;
    if enc.per_layer_z.is_empty() {
        return Err(Error::Input(
            "model uses plain attention and has no granularity scores".into(),
        ));
    }
    Ok(GranularityReport {
        tokens,
        per_layer_z: enc.per_layer_z.into_iter().map(|g| g.z).collect(),
        checkpoint_id: checkpoint_id.to_string(),
        mask_mode: model.config.mask_mode,
        truncated,
    })
}

impl GranularityReport {
    pub fn layers(&self) -> usize {
        self.per_layer_z.len()
    }

    pub fn buckets(&self) -> Vec<Vec<usize>> {
        self.per_layer_z
            .iter()
            .map(|row| row.iter().map(|&z| bucket(z)).collect())
            .collect()
    }

    /// One line per layer. With `color`, tokens are tinted by bucket;
    /// otherwise each token is followed by its score to two decimals.
    pub fn render(&self, color: bool) -> String {
        let mut out = String::new();
        if self.truncated > 0 {
            let _ = writeln!(out, "note: {} tokens truncated", self.truncated);
        }
        for (l, row) in self.per_layer_z.iter().enumerate() {
            let _ = write!(out, "layer {}:", l + 1);
            for (tok, &z) in self.tokens.iter().zip(row) {
                if color {
                    let _ = write!(out, " {}{tok}{ANSI_RESET}", ANSI_COLORS[bucket(z)]);
                } else {
                    let _ = write!(out, " {tok}({z:.2})");
                }
            }
            out.push('\n');
        }
        if color {
            out.push_str("legend:");
            for (k, c) in ANSI_COLORS.iter().enumerate() {
                let lo = if k == 0 { 0.0 } else { BUCKET_EDGES[k - 1] };
                let hi = BUCKET_EDGES.get(k).copied().unwrap_or(1.0);
                let _ = write!(out, " {c}[{lo:.1},{hi:.1}){ANSI_RESET}");
            }
            out.push('\n');
        }
        out
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}
