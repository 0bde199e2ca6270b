//! Step-time comparison between granularity-aware and plain attention.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{AttentionKind, MaskOverride};
use crate::autograd::Graph;
use crate::data::Batch;
use crate::error::Result;
use crate::model::{Model, ModelConfig, TokenBatch, BOS_ID, UNK_ID};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchConfig {
    pub model: ModelConfig,
    pub batch_size: usize,
    /// Source and target length.
    pub seq_len: usize,
    /// Timed repetitions per variant; the median is reported.
    pub repeats: usize,
    pub warmup: usize,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            model: ModelConfig {
                dropout: 0.0,
                ..ModelConfig::default()
            },
            batch_size: 32,
            seq_len: 20,
            repeats: 5,
            warmup: 1,
            seed: 0,
        }
    }
}

/// Median timings of one model variant, in milliseconds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VariantTiming {
    pub forward_ms: f64,
    pub step_ms: f64,
    pub step_samples_ms: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub granularity_aware: VariantTiming,
    /// Same weights with plain attention.
    pub vanilla: VariantTiming,
    /// Same weights with the granularity head evaluated but every mask
    /// entry forced to 1.
    pub forced_ones: VariantTiming,
    /// Forward+backward time of granularity-aware over vanilla.
    pub step_ratio: f64,
    pub forward_ratio: f64,
    pub step_ratio_vs_forced_ones: f64,
}

pub fn median(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    match v.len() {
        0 => f64::NAN,
        n if n % 2 == 1 => v[n / 2],
        n => (v[n / 2 - 1] + v[n / 2]) / 2.0,
    }
}

fn random_batch(cfg: &BenchConfig) -> Result<Batch> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let v = cfg.model.vocab_size;
    let mut draw = |n: usize| -> Vec<Vec<usize>> {
        (0..cfg.batch_size)
            .map(|_| (0..n).map(|_| rng.random_range(UNK_ID + 1..v)).collect())
            .collect()
    };
    let src = draw(cfg.seq_len);
    let mut tgt = draw(cfg.seq_len);
    for row in &mut tgt {
        row[0] = BOS_ID;
    }
    let labels = draw(cfg.seq_len).into_iter().flatten().map(Some).collect();
    Ok(Batch {
        src: TokenBatch::from_sequences(&src)?,
        tgt_in: TokenBatch::from_sequences(&tgt)?,
        labels,
        indices: (0..cfg.batch_size).collect(),
    })
}

fn time_variant(model: &Model<f32>, batch: &Batch, cfg: &BenchConfig) -> Result<VariantTiming> {
    let run = |backward: bool| -> Result<f64> {
        let start = Instant::now();
        let g = Graph::new();
        let loss = model.loss_graph(&g, &batch.src, &batch.tgt_in, &batch.labels, &mut None)?;
        if backward {
            g.backward(loss)?;
        }
        Ok(start.elapsed().as_secs_f64() * 1e3)
    };
    for _ in 0..cfg.warmup {
        run(true)?;
    }
    let forward: Vec<f64> = (0..cfg.repeats).map(|_| run(false)).collect::<Result<_>>()?;
    let step: Vec<f64> = (0..cfg.repeats).map(|_| run(true)).collect::<Result<_>>()?;
    Ok(VariantTiming {
        forward_ms: median(&forward),
        step_ms: median(&step),
        step_samples_ms: step,
    })
}

/// Times forward and forward+backward passes of three variants sharing
/// one set of weights. Variants are interleaved per repetition round so
/// slow drift in machine load affects them alike.
pub fn run_bench(cfg: &BenchConfig) -> Result<BenchReport> {
    let mut model_cfg = cfg.model.clone();
    model_cfg.attention = AttentionKind::GranularityAware;
    model_cfg.dropout = 0.0;
    let ga = Model::<f32>::new(model_cfg, cfg.seed)?;
    let vanilla = ga.with_attention(AttentionKind::Vanilla, MaskOverride::None);
    let ones = ga.with_attention(AttentionKind::GranularityAware, MaskOverride::ForceOnes);
    let batch = random_batch(cfg)?;
    let single = BenchConfig {
        repeats: 1,
        warmup: 0,
        ..cfg.clone()
    };
    for m in [&ga, &vanilla, &ones] {
        for _ in 0..cfg.warmup {
            time_variant(m, &batch, &single)?;
        }
    }
    let mut samples = [Vec::new(), Vec::new(), Vec::new()];
    let mut forwards = [Vec::new(), Vec::new(), Vec::new()];
    for _ in 0..cfg.repeats {
        for (k, m) in [&ga, &vanilla, &ones].into_iter().enumerate() {
            let t = time_variant(m, &batch, &single)?;
            forwards[k].push(t.forward_ms);
            samples[k].push(t.step_ms);
        }
    }
    let timing = |k: usize| VariantTiming {
        forward_ms: median(&forwards[k]),
        step_ms: median(&samples[k]),
        step_samples_ms: samples[k].clone(),
    };
    let (ga_t, va_t, ones_t) = (timing(0), timing(1), timing(2));
    Ok(BenchReport {
        step_ratio: ga_t.step_ms / va_t.step_ms,
        forward_ratio: ga_t.forward_ms / va_t.forward_ms,
        step_ratio_vs_forced_ones: ga_t.step_ms / ones_t.step_ms,
        granularity_aware: ga_t,
        vanilla: va_t,
        forced_ones: ones_t,
    })
}

impl BenchReport {
    pub fn render(&self) -> String {
        let row = |name: &str, t: &VariantTiming| {
            format!(
                "{name:<18} forward {:>9.2} ms   forward+backward {:>9.2} ms\n",
                t.forward_ms, t.step_ms
            )
        };
        let mut s = String::new();
        s += &row("granularity-aware", &self.granularity_aware);
        s += &row("vanilla", &self.vanilla);
        s += &row("masks forced to 1", &self.forced_ones);
        s += &format!("step ratio (GA / vanilla): {:.2}\n", self.step_ratio);
        s += &format!("forward ratio (GA / vanilla): {:.2}\n", self.forward_ratio);
        s += &format!("step ratio (GA / forced ones): {:.2}\n", self.step_ratio_vs_forced_ones);
        s
    }
}
