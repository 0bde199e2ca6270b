//! Granularity-aware multi-head self-attention.
//!
//! Each layer estimates one granularity score per token with a sigmoid
//! head, `z = sigmoid(H W_g)`. Scores near 1 mark detail (phrase-level)
//! tokens and scores near 0 mark template (sentence-level) tokens. Two
//! attenuation masks are derived from `z`:
//!
//! * resonance `C[i][j]`, which is large when tokens `i` and `j` sit at a
//!   similar granularity level;
//! * scope `S[i][j]`, which narrows the attention window of detail tokens
//!   to `epsilon` neighbours on each side while template tokens see the
//!   whole sentence.
//!
//! The masks are combined according to a [`MaskMode`] and multiply the
//! softmaxed attention weights. Rows of the adjusted weights are not
//! renormalized unless [`AttentionSettings::renormalize`] is set. The same
//! `z` is shared by every head of a layer.
//!
//! Two families of functions live here: plain `f64` mask builders used for
//! inspection and as test oracles, and graph versions used by the model.

use std::fmt;
use std::str::FromStr;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, ParamId, ParamStore, Var};
use crate::error::{Error, Result, TensorError};
use crate::nn::{maybe_dropout, Dropout, Linear};
use crate::tensor::{Element, Tensor};

/// Additive sentinel for masked attention logits.
pub const MASK_SENTINEL: f64 = -1e9;

/// Default scope floor: detail tokens attend to `epsilon` neighbours.
pub const DEFAULT_EPSILON: usize = 2;

/// Which granularity masks adjust the attention weights.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum MaskMode {
    /// Resonance only.
    #[default]
    #[serde(rename = "r")]
    R,
    /// Scope only.
    #[serde(rename = "s")]
    S,
    /// Elementwise product of resonance and scope.
    #[serde(rename = "r_mul_s")]
    RMulS,
    /// Average of resonance and scope.
    #[serde(rename = "r_plus_s")]
    RPlusS,
}

impl MaskMode {
    pub const ALL: [MaskMode; 4] = [MaskMode::R, MaskMode::S, MaskMode::RMulS, MaskMode::RPlusS];

    pub fn as_str(self) -> &'static str {
        match self {
            MaskMode::R => "r",
            MaskMode::S => "s",
            MaskMode::RMulS => "r_mul_s",
            MaskMode::RPlusS => "r_plus_s",
        }
    }

    fn uses_resonance(self) -> bool {
        self != MaskMode::S
    }

    fn uses_scope(self) -> bool {
        self != MaskMode::R
    }
}

impl fmt::Display for MaskMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for MaskMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "r" => Ok(MaskMode::R),
            "s" => Ok(MaskMode::S),
            "r_mul_s" | "r*s" | "rs" => Ok(MaskMode::RMulS),
            "r_plus_s" | "r+s" => Ok(MaskMode::RPlusS),
            other => Err(Error::Config(format!(
                "unknown mask mode {other:?}; expected one of r, s, r_mul_s, r_plus_s"
            ))),
        }
    }
}

/// Whether self-attention uses granularity masks at all.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionKind {
    #[default]
    GranularityAware,
    /// Plain scaled dot-product attention; the granularity head is unused.
    Vanilla,
}

/// Test and benchmarking hooks that pin the granularity masks.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub enum MaskOverride {
    #[default]
    None,
    /// The combined mask is all ones.
    ForceOnes,
    /// Every granularity score is replaced by this constant.
    FixedGranularity(f64),
}

/// Per-token granularity scores of one layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GranularityVector {
    pub z: Vec<f64>,
    pub layer_index: usize,
}

impl GranularityVector {
    pub fn new(z: Vec<f64>, layer_index: usize) -> Self {
        GranularityVector { z, layer_index }
    }

    pub fn len(&self) -> usize {
        self.z.len()
    }

    pub fn is_empty(&self) -> bool {
        self.z.is_empty()
    }
}

/// Resonance coefficient between a query at granularity `zi` and a key at
/// granularity `zj`.
pub fn resonance_entry(zi: f64, zj: f64) -> f64 {
    (1.0 - zi) * f64::max(0.0, 1.0 - (zi + zj)) + zi * f64::min(1.0, 1.0 - zi + zj)
}

/// Scope threshold for a query at granularity `zi` in a sequence of `n`
/// tokens: `max(1, n - eps)^(1 - zi) + eps`.
pub fn scope_threshold(zi: f64, n: usize, epsilon: usize) -> f64 {
    let base = (n as f64 - epsilon as f64).max(1.0);
    base.powf(1.0 - zi) + epsilon as f64
}

/// Scope coefficient for query `i` attending to key `j`.
pub fn scope_entry(zi: f64, i: usize, j: usize, n: usize, epsilon: usize) -> f64 {
    let distance = i.abs_diff(j) as f64;
    (scope_threshold(zi, n, epsilon) - distance).clamp(0.0, 1.0)
}

fn square(n: usize, f: impl Fn(usize, usize) -> f64) -> Tensor<f64> {
    Tensor::from_fn(&[n, n], |k| f(k / n, k % n))
}

fn check_binary(z: &[f64]) -> Result<()> {
    match z.iter().position(|&v| v != 0.0 && v != 1.0) {
        Some(i) => Err(Error::Input(format!(
            "discrete masks need binary granularity, got z[{i}] = {}",
            z[i]
        ))),
        None => Ok(()),
    }
}

/// Binary resonance: 1 where the two tokens share a granularity level.
pub fn resonance_mask_discrete(z: &[f64]) -> Result<Tensor<f64>> {
    check_binary(z)?;
    Ok(square(z.len(), |i, j| if z[i] == z[j] { 1.0 } else { 0.0 }))
}

/// Continuous resonance mask over granularity scores in `[0, 1]`.
pub fn resonance_mask(z: &[f64]) -> Tensor<f64> {
    square(z.len(), |i, j| resonance_entry(z[i], z[j]))
}

/// Binary scope: 1 where `|i - j| < (n - eps)^(1 - z_i) + eps`.
///
/// The threshold is evaluated without clamping the base, which is exact
/// for binary `z`: the exponent is 0 or 1.
pub fn scope_mask_discrete(z: &[f64], n: usize, epsilon: usize) -> Result<Tensor<f64>> {
    check_binary(z)?;
    if n == 0 {
        return Err(Error::Input("scope mask needs n >= 1".into()));
    }
    let base = n as f64 - epsilon as f64;
    Ok(square(z.len(), |i, j| {
        let threshold = if z[i] == 1.0 { 1.0 } else { base } + epsilon as f64;
        if (i.abs_diff(j) as f64) < threshold {
            1.0
        } else {
            0.0
        }
    }))
}

/// Continuous scope mask: `max(0, min(1, threshold_i - |i - j|))`.
pub fn scope_mask(z: &[f64], n: usize, epsilon: usize) -> Result<Tensor<f64>> {
    if n == 0 {
        return Err(Error::Input("scope mask needs n >= 1".into()));
    }
    Ok(square(z.len(), |i, j| scope_entry(z[i], i, j, n, epsilon)))
}

/// Combines resonance and scope masks according to `mode`.
pub fn combine_masks(resonance: &Tensor<f64>, scope: &Tensor<f64>, mode: MaskMode) -> Result<Tensor<f64>> {
    if resonance.shape() != scope.shape() {
        return Err(TensorError::Broadcast {
            lhs: resonance.shape().to_vec(),
            rhs: scope.shape().to_vec(),
        }
        .into());
    }
    let data = resonance
        .data()
        .iter()
        .zip(scope.data())
        .map(|(&c, &s)| match mode {
            MaskMode::R => c,
            MaskMode::S => s,
            MaskMode::RMulS => c * s,
            MaskMode::RPlusS => (c + s) / 2.0,
        })
        .collect();
    Ok(Tensor::new(resonance.shape(), data)?)
}

/// Resonance, scope and their combination for one sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionMasks {
    pub resonance: Tensor<f64>,
    pub scope: Tensor<f64>,
    pub combined: Tensor<f64>,
}

impl AttentionMasks {
    pub fn compute(z: &[f64], n: usize, epsilon: usize, mode: MaskMode) -> Result<Self> {
        let resonance = resonance_mask(z);
        let scope = scope_mask(z, n, epsilon)?;
        let combined = combine_masks(&resonance, &scope, mode)?;
        Ok(AttentionMasks {
            resonance,
            scope,
            combined,
        })
    }
}

/// Resonance mask on the tape: `z` is `[.., N]`, output `[.., N, N]`.
pub fn resonance_mask_var<'g, T: Element>(z: Var<'g, T>) -> Result<Var<'g, T>, TensorError> {
    let shape = z.shape();
    let n = *shape.last().ok_or_else(|| TensorError::Invalid("empty z".into()))?;
    let lead = &shape[..shape.len() - 1];
    let zi = z.reshape(&[lead, &[n, 1]].concat())?;
    let zj = z.reshape(&[lead, &[1, n]].concat())?;
    let sentence_part = zi
        .rsub_scalar(T::one())
        .mul(zi.add(zj)?.rsub_scalar(T::one()).max_scalar(T::zero()))?;
    let detail_part = zi.mul(zj.sub(zi)?.add_scalar(T::one()).min_scalar(T::one()))?;
    sentence_part.add(detail_part)
}

/// Scope mask on the tape for a batch: `z` is `[B, N]`, `lengths[b]` is
/// the true sequence length used as `N` in the threshold. Output
/// `[B, N, N]`.
///
/// With `causal` set, query `i` only sees a prefix of `i + 1` tokens and
/// uses that prefix length instead, so a decoder fed a whole target
/// sequence builds the same mask rows as one fed a growing prefix.
pub fn scope_mask_var<'g, T: Element>(
    z: Var<'g, T>,
    lengths: &[usize],
    epsilon: usize,
    causal: bool,
) -> Result<Var<'g, T>, TensorError> {
    let g = z.graph();
    let shape = z.shape();
    let (batch, n) = match shape.as_slice() {
        [b, n] => (*b, *n),
        other => {
            return Err(TensorError::Invalid(format!(
                "scope mask expects z of shape [B, N], got {other:?}"
            )))
        }
    };
    if lengths.len() != batch {
        return Err(TensorError::Invalid(format!(
            "{} lengths for a batch of {batch}",
            lengths.len()
        )));
    }
    let eps = epsilon as f64;
    let base = Tensor::from_fn(&[batch, n, 1], |k| {
        let (b, i) = (k / n, k % n);
        let visible = if causal { (i + 1).min(lengths[b]) } else { lengths[b] };
        T::from_f64_lossy((visible as f64 - eps).max(1.0))
    });
    let distance = Tensor::from_fn(&[n, n], |k| T::from_f64_lossy((k / n).abs_diff(k % n) as f64));
    let exponent = z.reshape(&[batch, n, 1])?.rsub_scalar(T::one());
    let threshold = g.constant(base).pow(exponent)?.add_scalar(T::from_f64_lossy(eps));
    Ok(threshold
        .sub(g.constant(distance))?
        .min_scalar(T::one())
        .max_scalar(T::zero()))
}

/// Tape version of [`combine_masks`]; only the masks the mode needs are
/// built.
pub fn combined_mask_var<'g, T: Element>(
    z: Var<'g, T>,
    lengths: &[usize],
    epsilon: usize,
    causal: bool,
    mode: MaskMode,
) -> Result<Var<'g, T>, TensorError> {
    let resonance = mode.uses_resonance().then(|| resonance_mask_var(z)).transpose()?;
    let scope = mode
        .uses_scope()
        .then(|| scope_mask_var(z, lengths, epsilon, causal))
        .transpose()?;
    match (mode, resonance, scope) {
        (MaskMode::R, Some(c), _) => Ok(c),
        (MaskMode::S, _, Some(s)) => Ok(s),
        (MaskMode::RMulS, Some(c), Some(s)) => c.mul(s),
        (MaskMode::RPlusS, Some(c), Some(s)) => Ok(c.add(s)?.mul_scalar(T::from_f64_lossy(0.5))),
        _ => unreachable!("mode selects its masks"),
    }
}

/// Hyperparameters of one attention block.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AttentionSettings {
    pub heads: usize,
    pub epsilon: usize,
    pub mode: MaskMode,
    pub kind: AttentionKind,
    pub renormalize: bool,
    pub mask_override: MaskOverride,
}

impl Default for AttentionSettings {
    fn default() -> Self {
        AttentionSettings {
            heads: 1,
            epsilon: DEFAULT_EPSILON,
            mode: MaskMode::R,
            kind: AttentionKind::GranularityAware,
            renormalize: false,
            mask_override: MaskOverride::None,
        }
    }
}

/// Per-batch sequence information for attention.
#[derive(Clone, Debug)]
pub struct SequenceMask {
    /// True (unpadded) length of every sequence in the batch.
    pub lengths: Vec<usize>,
    /// Padded length.
    pub padded_len: usize,
    pub causal: bool,
}

impl SequenceMask {
    pub fn new(lengths: Vec<usize>, padded_len: usize, causal: bool) -> Result<Self> {
        if lengths.iter().any(|&l| l == 0 || l > padded_len) {
            return Err(Error::Input(format!(
                "sequence lengths {lengths:?} must be in 1..={padded_len}"
            )));
        }
        Ok(SequenceMask {
            lengths,
            padded_len,
            causal,
        })
    }

    /// Additive logits mask `[B, 1, Nq, Nk]` that hides padded keys and,
    /// when causal, future keys.
    pub fn additive<T: Element>(&self, queries: usize) -> Tensor<T> {
        let (b, n) = (self.lengths.len(), self.padded_len);
        let sentinel = T::from_f64_lossy(MASK_SENTINEL);
        Tensor::from_fn(&[b, 1, queries, n], |k| {
            let batch = k / (queries * n);
            let (i, j) = ((k / n) % queries, k % n);
            if j >= self.lengths[batch] || (self.causal && j > i) {
                sentinel
            } else {
                T::zero()
            }
        })
    }
}

/// Projection weights of a granularity-aware attention block.
#[derive(Clone, Copy, Debug)]
pub struct GaAttentionParams {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    /// `[d, 1]` granularity head.
    pub granularity: ParamId,
}

impl GaAttentionParams {
    pub fn new<T: Element>(store: &mut ParamStore<T>, name: &str, d: usize, rng: &mut ChaCha8Rng) -> Self {
        let query = Linear::new(store, &format!("{name}.query"), d, d, false, rng);
        let key = Linear::new(store, &format!("{name}.key"), d, d, false, rng);
        let value = Linear::new(store, &format!("{name}.value"), d, d, false, rng);
        let output = Linear::new(store, &format!("{name}.output"), d, d, false, rng);
        let granularity = Linear::new(store, &format!("{name}.granularity"), d, 1, false, rng).weight;
        GaAttentionParams {
            query,
            key,
            value,
            output,
            granularity,
        }
    }
}

/// Tape outputs of one attention call.
pub struct AttentionOutput<'g, T: Element> {
    /// `[B, N, d]`.
    pub output: Var<'g, T>,
    /// `[B, N]`; absent for vanilla attention.
    pub granularity: Option<Var<'g, T>>,
    /// Softmaxed weights `[B, A, Nq, Nk]`.
    pub weights: Var<'g, T>,
    /// Weights after the granularity mask `[B, A, Nq, Nk]`.
    pub masked_weights: Var<'g, T>,
}

/// `[B, N, d]` -> `[B, A, N, d / A]`.
fn split_heads<'g, T: Element>(x: Var<'g, T>, heads: usize) -> Result<Var<'g, T>, TensorError> {
    let shape = x.shape();
    let (b, n, d) = (shape[0], shape[1], shape[2]);
    x.reshape(&[b, n, heads, d / heads])?.permute(&[0, 2, 1, 3])
}

/// `[B, A, N, dh]` -> `[B, N, A * dh]`.
fn merge_heads<'g, T: Element>(x: Var<'g, T>) -> Result<Var<'g, T>, TensorError> {
    let shape = x.shape();
    let (b, a, n, dh) = (shape[0], shape[1], shape[2], shape[3]);
    x.permute(&[0, 2, 1, 3])?.reshape(&[b, n, a * dh])
}

/// Softmax attention weights `[B, A, Nq, Nk]` with the additive mask
/// applied inside the softmax.
fn attention_weights<'g, T: Element>(
    q: Var<'g, T>,
    k: Var<'g, T>,
    additive: Var<'g, T>,
) -> Result<Var<'g, T>, TensorError> {
    let dh = *q.shape().last().unwrap();
    let scale = T::from_f64_lossy(1.0 / (dh as f64).sqrt());
    Ok(q.matmul_t(k)?.mul_scalar(scale).add(additive)?.softmax())
}

fn check_heads(d: usize, heads: usize) -> Result<(), TensorError> {
    if heads == 0 || !d.is_multiple_of(heads) {
        return Err(TensorError::Invalid(format!(
            "hidden size {d} is not divisible by {heads} heads"
        )));
    }
    Ok(())
}

/// Multi-head self-attention over `h: [B, N, d]` with granularity masks
/// applied after the softmax (or plain attention for
/// [`AttentionKind::Vanilla`]).
pub fn ga_self_attention<'g, T: Element>(
    g: &'g Graph<T>,
    store: &ParamStore<T>,
    params: &GaAttentionParams,
    h: Var<'g, T>,
    settings: &AttentionSettings,
    mask: &SequenceMask,
    dropout: &mut Option<Dropout>,
) -> Result<AttentionOutput<'g, T>, TensorError> {
    let shape = h.shape();
    let [b, n, d] = shape[..] else {
        return Err(TensorError::Invalid(format!(
            "self-attention expects [B, N, d], got {shape:?}"
        )));
    };
    check_heads(d, settings.heads)?;
    if n == 0 || b == 0 {
        return Err(TensorError::Invalid("self-attention over an empty sequence".into()));
    }
    if mask.lengths.len() != b || mask.padded_len != n {
        return Err(TensorError::Invalid(format!(
            "mask for {} x {} does not match input {shape:?}",
            mask.lengths.len(),
            mask.padded_len
        )));
    }
    let q = split_heads(params.query.forward(g, store, h)?, settings.heads)?;
    let k = split_heads(params.key.forward(g, store, h)?, settings.heads)?;
    let v = split_heads(params.value.forward(g, store, h)?, settings.heads)?;
    let weights = attention_weights(q, k, g.constant(mask.additive(n)))?;

    let (granularity, masked_weights) = match settings.kind {
        AttentionKind::Vanilla => (None, weights),
        AttentionKind::GranularityAware => {
            let z = match settings.mask_override {
                MaskOverride::FixedGranularity(value) => g.constant(Tensor::full(&[b, n], T::from_f64_lossy(value))),
                _ => h
                    .matmul(g.param(store, params.granularity))?
                    .sigmoid()
                    .reshape(&[b, n])?,
            };
            let combined = match settings.mask_override {
                MaskOverride::ForceOnes => g.constant(Tensor::ones(&[b, n, n])),
                _ => combined_mask_var(z, &mask.lengths, settings.epsilon, mask.causal, settings.mode)?,
            };
            let mut masked = weights.mul(combined.reshape(&[b, 1, n, n])?)?;
            if settings.renormalize {
                masked = masked.div(masked.sum_last().max_scalar(T::min_positive_value()))?;
            }
            (Some(z), masked)
        }
    };
    let attended = maybe_dropout(masked_weights, dropout)?.matmul(v)?;
    let output = params.output.forward(g, store, merge_heads(attended)?)?;
    Ok(AttentionOutput {
        output,
        granularity,
        weights,
        masked_weights,
    })
}

/// Plain multi-head attention from `queries: [B, Nq, d]` onto
/// `memory: [B, Nk, d]`, used for encoder-decoder attention.
#[allow(clippy::too_many_arguments)]
pub fn cross_attention<'g, T: Element>(
    g: &'g Graph<T>,
    store: &ParamStore<T>,
    params: &CrossAttentionParams,
    queries: Var<'g, T>,
    memory: Var<'g, T>,
    memory_mask: &SequenceMask,
    heads: usize,
    dropout: &mut Option<Dropout>,
) -> Result<Var<'g, T>, TensorError> {
    let nq = queries.shape()[1];
    check_heads(queries.shape()[2], heads)?;
    let q = split_heads(params.query.forward(g, store, queries)?, heads)?;
    let k = split_heads(params.key.forward(g, store, memory)?, heads)?;
    let v = split_heads(params.value.forward(g, store, memory)?, heads)?;
    let weights = attention_weights(q, k, g.constant(memory_mask.additive(nq)))?;
    let attended = maybe_dropout(weights, dropout)?.matmul(v)?;
    params.output.forward(g, store, merge_heads(attended)?)
}

#[derive(Clone, Copy, Debug)]
pub struct CrossAttentionParams {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
}

impl CrossAttentionParams {
    pub fn new<T: Element>(store: &mut ParamStore<T>, name: &str, d: usize, rng: &mut ChaCha8Rng) -> Self {
        CrossAttentionParams {
            query: Linear::new(store, &format!("{name}.query"), d, d, false, rng),
            key: Linear::new(store, &format!("{name}.key"), d, d, false, rng),
            value: Linear::new(store, &format!("{name}.value"), d, d, false, rng),
            output: Linear::new(store, &format!("{name}.output"), d, d, false, rng),
        }
    }
}

/// Diagnostics of a single-sequence attention call.
#[derive(Clone, Debug)]
pub struct AttentionDiagnostics<T: Element> {
    /// Softmaxed weights `[A, N, N]`.
    pub weights: Tensor<T>,
    /// Weights after masking `[A, N, N]`.
    pub masked_weights: Tensor<T>,
}

/// A standalone attention block owning its parameters, operating on one
/// unbatched sequence at a time.
#[derive(Clone, Debug)]
pub struct GaAttention<T: Element> {
    pub store: ParamStore<T>,
    pub params: GaAttentionParams,
    pub settings: AttentionSettings,
    pub hidden: usize,
}

/// Result of [`GaAttention::forward`].
#[derive(Clone, Debug)]
pub struct GaForward<T: Element> {
    /// `[N, d]`.
    pub output: Tensor<T>,
    pub granularity: Option<GranularityVector>,
    pub diagnostics: AttentionDiagnostics<T>,
}

impl<T: Element> GaAttention<T> {
    pub fn new(hidden: usize, settings: AttentionSettings, rng: &mut ChaCha8Rng) -> Result<Self> {
        check_heads(hidden, settings.heads)?;
        let mut store = ParamStore::new();
        let params = GaAttentionParams::new(&mut store, "attention", hidden, rng);
        Ok(GaAttention {
            store,
            params,
            settings,
            hidden,
        })
    }

    /// Runs attention over `h: [N, d]`.
    pub fn forward(&self, h: &Tensor<T>, causal: bool) -> Result<GaForward<T>> {
        let g = Graph::new();
        let (n, d) = match h.shape() {
            [n, d] => (*n, *d),
            other => return Err(Error::Input(format!("expected [N, d] hidden states, got {other:?}"))),
        };
        if n == 0 {
            return Err(Error::Input("attention over an empty sequence".into()));
        }
        let x = g.constant(h.clone().reshape(&[1, n, d])?);
        let mask = SequenceMask::new(vec![n], n, causal)?;
        let out = ga_self_attention(&g, &self.store, &self.params, x, &self.settings, &mask, &mut None)?;
        let heads = self.settings.heads;
        Ok(GaForward {
            output: out.output.value().reshape(&[n, d])?,
            granularity: out
                .granularity
                .map(|z| GranularityVector::new(z.value().to_f64_vec(), 0)),
            diagnostics: AttentionDiagnostics {
                weights: out.weights.value().reshape(&[heads, n, n])?,
                masked_weights: out.masked_weights.value().reshape(&[heads, n, n])?,
            },
        })
    }
}
