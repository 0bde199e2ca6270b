//! Encoder-decoder transformer whose self-attention sublayers are
//! granularity-aware.
//!
//! Layers are post-norm: every sublayer output is added to its input and
//! then layer-normalized. Encoder-decoder attention stays vanilla. Source
//! and target share one token embedding; the output projection is a
//! separate matrix.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{
    cross_attention, ga_self_attention, AttentionKind, AttentionSettings, CrossAttentionParams, GaAttentionParams,
    GranularityVector, MaskMode, MaskOverride, SequenceMask, DEFAULT_EPSILON,
};
use crate::autograd::{Graph, ParamStore, Var};
use crate::error::{Error, Result, TensorError};
use crate::nn::{maybe_dropout, Dropout, LayerNorm, Linear};
use crate::tensor::{Element, Tensor};

pub const PAD_ID: usize = 0;
pub const BOS_ID: usize = 1;
pub const EOS_ID: usize = 2;
pub const UNK_ID: usize = 3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub layers: usize,
    pub hidden: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub vocab_size: usize,
    pub max_len: usize,
    pub dropout: f64,
    pub mask_mode: MaskMode,
    pub epsilon: usize,
    pub renormalize: bool,
    pub attention: AttentionKind,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            layers: 3,
            hidden: 450,
            heads: 9,
            ffn_dim: 1800,
            vocab_size: 8000,
            max_len: 20,
            dropout: 0.1,
            mask_mode: MaskMode::R,
            epsilon: DEFAULT_EPSILON,
            renormalize: false,
            attention: AttentionKind::GranularityAware,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.layers == 0 {
            return fail("layers must be at least 1".into());
        }
        if self.heads == 0 || !self.hidden.is_multiple_of(self.heads) {
            return fail(format!(
                "hidden size {} must be a positive multiple of heads {}",
                self.hidden, self.heads
            ));
        }
        if self.max_len == 0 {
            return fail("max_len must be at least 1".into());
        }
        if self.ffn_dim == 0 {
            return fail("ffn_dim must be at least 1".into());
        }
        if self.vocab_size <= UNK_ID {
            return fail(format!(
                "vocab_size {} leaves no room past the reserved ids",
                self.vocab_size
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail(format!("dropout {} is outside [0, 1)", self.dropout));
        }
        Ok(())
    }

    fn attention_settings(&self, mask_override: MaskOverride) -> AttentionSettings {
        AttentionSettings {
            heads: self.heads,
            epsilon: self.epsilon,
            mode: self.mask_mode,
            kind: self.attention,
            renormalize: self.renormalize,
            mask_override,
        }
    }
}

/// Padded token ids of a batch, row-major `[batch, len]`.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenBatch {
    pub ids: Vec<usize>,
    pub batch: usize,
    pub len: usize,
    pub lengths: Vec<usize>,
}

impl TokenBatch {
    /// Right-pads `seqs` with [`PAD_ID`] to the longest sequence.
    pub fn from_sequences(seqs: &[Vec<usize>]) -> Result<Self> {
        if seqs.is_empty() || seqs.iter().any(|s| s.is_empty()) {
            return Err(Error::Input("batches need at least one non-empty sequence".into()));
        }
        let len = seqs.iter().map(Vec::len).max().unwrap_or(0);
        let mut ids = Vec::with_capacity(seqs.len() * len);
        for s in seqs {
            ids.extend_from_slice(s);
            ids.resize(ids.len() + len - s.len(), PAD_ID);
        }
        Ok(TokenBatch {
            ids,
            batch: seqs.len(),
            len,
            lengths: seqs.iter().map(Vec::len).collect(),
        })
    }

    pub fn row(&self, b: usize) -> &[usize] {
        &self.ids[b * self.len..b * self.len + self.lengths[b]]
    }

    fn mask(&self, causal: bool) -> Result<SequenceMask> {
        SequenceMask::new(self.lengths.clone(), self.len, causal)
    }
}

/// Sinusoidal position encodings `[n, d]`.
pub fn positional_encoding<T: Element>(n: usize, d: usize) -> Tensor<T> {
    Tensor::from_fn(&[n, d], |k| {
        let (pos, i) = ((k / d) as f64, k % d);
        let angle = pos / 10000f64.powf((i - i % 2) as f64 / d as f64);
        T::from_f64_lossy(if i % 2 == 0 { angle.sin() } else { angle.cos() })
    })
}

#[derive(Clone, Copy, Debug)]
struct FeedForward {
    inner: Linear,
    outer: Linear,
}

impl FeedForward {
    fn new<T: Element>(store: &mut ParamStore<T>, name: &str, cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Self {
        FeedForward {
            inner: Linear::new(store, &format!("{name}.inner"), cfg.hidden, cfg.ffn_dim, true, rng),
            outer: Linear::new(store, &format!("{name}.outer"), cfg.ffn_dim, cfg.hidden, true, rng),
        }
    }

    fn forward<'g, T: Element>(
        &self,
        g: &'g Graph<T>,
        store: &ParamStore<T>,
        x: Var<'g, T>,
        dropout: &mut Option<Dropout>,
    ) -> Result<Var<'g, T>, TensorError> {
        let h = self.inner.forward(g, store, x)?.relu();
        maybe_dropout(self.outer.forward(g, store, h)?, dropout)
    }
}

#[derive(Clone, Copy, Debug)]
struct EncoderLayer {
    attention: GaAttentionParams,
    attention_norm: LayerNorm,
    ffn: FeedForward,
    ffn_norm: LayerNorm,
}

#[derive(Clone, Copy, Debug)]
struct DecoderLayer {
    attention: GaAttentionParams,
    attention_norm: LayerNorm,
    cross: CrossAttentionParams,
    cross_norm: LayerNorm,
    ffn: FeedForward,
    ffn_norm: LayerNorm,
}

/// Tape outputs of the encoder.
pub struct EncoderGraph<'g, T: Element> {
    /// `[B, N, d]`.
    pub hidden: Var<'g, T>,
    /// One `[B, N]` granularity tensor per layer; empty for vanilla models.
    pub granularity: Vec<Var<'g, T>>,
}

/// Encoder states of a single source sentence.
#[derive(Clone, Debug)]
pub struct EncoderOutput<T: Element> {
    /// `[N, d]`.
    pub hidden: Tensor<T>,
    pub per_layer_z: Vec<GranularityVector>,
}

/// A seq2seq transformer with its parameters.
#[derive(Clone, Debug)]
pub struct Model<T: Element = f32> {
    pub config: ModelConfig,
    pub store: ParamStore<T>,
    /// Runtime hook for equivalence tests and benchmarks; never saved.
    pub mask_override: MaskOverride,
    embedding: crate::autograd::ParamId,
    encoder: Vec<EncoderLayer>,
    decoder: Vec<DecoderLayer>,
    output: Linear,
}

impl<T: Element> Model<T> {
    /// Builds a model with freshly initialized weights.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let (d, v) = (config.hidden, config.vocab_size);
        let embedding = store.add(
            "embedding",
            crate::nn::normal(&[v, d], 1.0 / (d as f64).sqrt(), &mut rng),
        );
        let encoder = (0..config.layers)
            .map(|l| {
                let name = format!("encoder.{l}");
                EncoderLayer {
                    attention: GaAttentionParams::new(&mut store, &format!("{name}.attention"), d, &mut rng),
                    attention_norm: LayerNorm::new(&mut store, &format!("{name}.attention_norm"), d),
                    ffn: FeedForward::new(&mut store, &format!("{name}.ffn"), &config, &mut rng),
                    ffn_norm: LayerNorm::new(&mut store, &format!("{name}.ffn_norm"), d),
                }
            })
            .collect();
        let decoder = (0..config.layers)
            .map(|l| {
                let name = format!("decoder.{l}");
                DecoderLayer {
                    attention: GaAttentionParams::new(&mut store, &format!("{name}.attention"), d, &mut rng),
                    attention_norm: LayerNorm::new(&mut store, &format!("{name}.attention_norm"), d),
                    cross: CrossAttentionParams::new(&mut store, &format!("{name}.cross"), d, &mut rng),
                    cross_norm: LayerNorm::new(&mut store, &format!("{name}.cross_norm"), d),
                    ffn: FeedForward::new(&mut store, &format!("{name}.ffn"), &config, &mut rng),
                    ffn_norm: LayerNorm::new(&mut store, &format!("{name}.ffn_norm"), d),
                }
            })
            .collect();
        let output = Linear::new(&mut store, "output", d, v, true, &mut rng);
        Ok(Model {
            config,
            store,
            mask_override: MaskOverride::None,
            embedding,
            encoder,
            decoder,
            output,
        })
    }

    /// Same architecture and weights in another element type.
    pub fn cast<U: Element>(&self) -> Model<U> {
        Model {
            config: self.config.clone(),
            store: self.store.cast(),
            mask_override: self.mask_override,
            embedding: self.embedding,
            encoder: self.encoder.clone(),
            decoder: self.decoder.clone(),
            output: self.output,
        }
    }

    /// A copy that shares weights but runs a different attention variant.
    pub fn with_attention(&self, kind: AttentionKind, mask_override: MaskOverride) -> Self {
        let mut m = self.clone();
        m.config.attention = kind;
        m.mask_override = mask_override;
        m
    }

    fn settings(&self) -> AttentionSettings {
        self.config.attention_settings(self.mask_override)
    }

    fn check_ids(&self, ids: &[usize]) -> Result<()> {
        match ids.iter().find(|&&id| id >= self.config.vocab_size) {
            Some(id) => Err(Error::Input(format!(
                "token id {id} is outside the vocabulary of {}",
                self.config.vocab_size
            ))),
            None => Ok(()),
        }
    }

    /// Scaled token embeddings plus position encodings, `[B, N, d]`.
    pub fn embed_graph<'g>(&self, g: &'g Graph<T>, batch: &TokenBatch) -> Result<Var<'g, T>> {
        self.check_ids(&batch.ids)?;
        let d = self.config.hidden;
        let table = g.param(&self.store, self.embedding);
        let scale = T::from_f64_lossy((d as f64).sqrt());
        let x = table
            .gather_rows(&batch.ids)?
            .mul_scalar(scale)
            .reshape(&[batch.batch, batch.len, d])?;
        Ok(x.add(g.constant(positional_encoding(batch.len, d)))?)
    }

    /// Single-sequence embedding, `[N, d]`.
    pub fn embed(&self, ids: &[usize]) -> Result<Tensor<T>> {
        let g = Graph::new();
        let batch = TokenBatch::from_sequences(&[ids.to_vec()])?;
        Ok(self
            .embed_graph(&g, &batch)?
            .value()
            .reshape(&[ids.len(), self.config.hidden])?)
    }

    pub fn encode_graph<'g>(
        &self,
        g: &'g Graph<T>,
        src: &TokenBatch,
        dropout: &mut Option<Dropout>,
    ) -> Result<EncoderGraph<'g, T>> {
        let mask = src.mask(false)?;
        let settings = self.settings();
        let mut h = self.embed_graph(g, src)?;
        let mut granularity = Vec::with_capacity(self.encoder.len());
        for layer in &self.encoder {
            let att = ga_self_attention(g, &self.store, &layer.attention, h, &settings, &mask, dropout)?;
            granularity.extend(att.granularity);
            h = layer.attention_norm.forward(g, &self.store, att.output.add(h)?)?;
            let f = layer.ffn.forward(g, &self.store, h, dropout)?;
            h = layer.ffn_norm.forward(g, &self.store, f.add(h)?)?;
        }
        Ok(EncoderGraph { hidden: h, granularity })
    }

    /// Vocabulary logits `[B, M, V]` for every target prefix position.
    pub fn decode_graph<'g>(
        &self,
        g: &'g Graph<T>,
        tgt: &TokenBatch,
        memory: Var<'g, T>,
        src_lengths: &[usize],
        dropout: &mut Option<Dropout>,
    ) -> Result<(Var<'g, T>, Vec<Var<'g, T>>)> {
        let mem_shape = memory.shape();
        if mem_shape.len() != 3 || mem_shape[0] != tgt.batch || src_lengths.len() != tgt.batch {
            return Err(Error::Input(format!(
                "encoder memory {mem_shape:?} does not match a target batch of {}",
                tgt.batch
            )));
        }
        let self_mask = tgt.mask(true)?;
        let memory_mask = SequenceMask::new(src_lengths.to_vec(), mem_shape[1], false)?;
        let settings = self.settings();
        let mut h = self.embed_graph(g, tgt)?;
        let mut granularity = Vec::with_capacity(self.decoder.len());
        for layer in &self.decoder {
            let att = ga_self_attention(g, &self.store, &layer.attention, h, &settings, &self_mask, dropout)?;
            granularity.extend(att.granularity);
            h = layer.attention_norm.forward(g, &self.store, att.output.add(h)?)?;
            let c = cross_attention(
                g,
                &self.store,
                &layer.cross,
                h,
                memory,
                &memory_mask,
                self.config.heads,
                dropout,
            )?;
            h = layer.cross_norm.forward(g, &self.store, c.add(h)?)?;
            let f = layer.ffn.forward(g, &self.store, h, dropout)?;
            h = layer.ffn_norm.forward(g, &self.store, f.add(h)?)?;
        }
        Ok((self.output.forward(g, &self.store, h)?, granularity))
    }

    /// Mean teacher-forced cross-entropy of `labels` (flattened `[B, M]`,
    /// `None` at padding) given source and shifted target inputs.
    pub fn loss_graph<'g>(
        &self,
        g: &'g Graph<T>,
        src: &TokenBatch,
        tgt_in: &TokenBatch,
        labels: &[Option<usize>],
        dropout: &mut Option<Dropout>,
    ) -> Result<Var<'g, T>> {
        let enc = self.encode_graph(g, src, dropout)?;
        let (logits, _) = self.decode_graph(g, tgt_in, enc.hidden, &src.lengths, dropout)?;
        let v = self.config.vocab_size;
        let flat = logits.reshape(&[tgt_in.batch * tgt_in.len, v])?;
        Ok(flat.cross_entropy(labels)?)
    }

    /// Runs the encoder over one source sentence.
    pub fn encoder_forward(&self, src_ids: &[usize]) -> Result<EncoderOutput<T>> {
        if src_ids.is_empty() {
            return Err(Error::Input("cannot encode an empty source".into()));
        }
        let g = Graph::new();
        let batch = TokenBatch::from_sequences(&[src_ids.to_vec()])?;
        let enc = self.encode_graph(&g, &batch, &mut None)?;
        let n = src_ids.len();
        Ok(EncoderOutput {
            hidden: enc.hidden.value().reshape(&[n, self.config.hidden])?,
            per_layer_z: enc
                .granularity
                .iter()
                .enumerate()
                .map(|(l, z)| GranularityVector::new(z.value().to_f64_vec(), l))
                .collect(),
        })
    }

    /// Logits `[M, V]` for every position of a target prefix.
    pub fn decoder_forward(&self, prefix: &[usize], encoded: &EncoderOutput<T>) -> Result<Tensor<T>> {
        if prefix.is_empty() {
            return Err(Error::Input("decoder prefix must contain at least BOS".into()));
        }
        let g = Graph::new();
        let n = encoded.hidden.shape()[0];
        let memory = g.constant(encoded.hidden.clone().reshape(&[1, n, self.config.hidden])?);
        let tgt = TokenBatch::from_sequences(&[prefix.to_vec()])?;
        let (logits, _) = self.decode_graph(&g, &tgt, memory, &[n], &mut None)?;
        Ok(logits.value().reshape(&[prefix.len(), self.config.vocab_size])?)
    }

    /// Log-probabilities of the next token after each of several
    /// equal-length prefixes sharing one encoded source.
    pub fn next_log_probs(&self, prefixes: &[Vec<usize>], encoded: &EncoderOutput<T>) -> Result<Vec<Vec<f64>>> {
        let Some(first) = prefixes.first() else {
            return Ok(Vec::new());
        };
        let m = first.len();
        if m == 0 || prefixes.iter().any(|p| p.len() != m) {
            return Err(Error::Input("prefixes must be non-empty and of equal length".into()));
        }
        let (n, d, v) = (encoded.hidden.shape()[0], self.config.hidden, self.config.vocab_size);
        let b = prefixes.len();
        let g = Graph::new();
        let mem = encoded.hidden.data();
        let tiled = Tensor::from_fn(&[b, n, d], |k| mem[k % (n * d)]);
        let tgt = TokenBatch::from_sequences(prefixes)?;
        let (logits, _) = self.decode_graph(&g, &tgt, g.constant(tiled), &vec![n; b], &mut None)?;
        let logits = logits.value();
        Ok((0..b)
            .map(|row| {
                let start = (row * m + m - 1) * v;
                log_softmax_f64(&logits.data()[start..start + v])
            })
            .collect())
    }

    /// Truncates a source to `max_len`.
    pub fn clip_source<'a>(&self, ids: &'a [usize]) -> &'a [usize] {
        &ids[..ids.len().min(self.config.max_len)]
    }
}

fn log_softmax_f64<T: Element>(row: &[T]) -> Vec<f64> {
    let xs: Vec<f64> = row.iter().map(|x| x.as_f64()).collect();
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + xs.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
    xs.iter().map(|x| x - lse).collect()
}
