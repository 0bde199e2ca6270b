//! Small building blocks shared by the attention and model code.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};

use crate::autograd::{Graph, ParamId, ParamStore, Var};
use crate::error::TensorError;
use crate::tensor::{Element, Tensor};

/// Affine map `x @ W (+ b)` with `W` stored as `[d_in, d_out]`.
#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Linear {
    /// Xavier-uniform weights, zero bias.
    pub fn new<T: Element>(
        store: &mut ParamStore<T>,
        name: &str,
        d_in: usize,
        d_out: usize,
        bias: bool,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let bound = (6.0 / (d_in + d_out) as f64).sqrt();
        let weight = store.add(&format!("{name}.weight"), uniform(&[d_in, d_out], bound, rng));
        let bias = bias.then(|| store.add(&format!("{name}.bias"), Tensor::zeros(&[d_out])));
        Linear { weight, bias }
    }

    pub fn forward<'g, T: Element>(
        &self,
        g: &'g Graph<T>,
        store: &ParamStore<T>,
        x: Var<'g, T>,
    ) -> Result<Var<'g, T>, TensorError> {
        let y = x.matmul(g.param(store, self.weight))?;
        match self.bias {
            Some(b) => y.add(g.param(store, b)),
            None => Ok(y),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

impl LayerNorm {
    pub fn new<T: Element>(store: &mut ParamStore<T>, name: &str, d: usize) -> Self {
        LayerNorm {
            gain: store.add(&format!("{name}.gain"), Tensor::ones(&[d])),
            bias: store.add(&format!("{name}.bias"), Tensor::zeros(&[d])),
        }
    }

    pub fn forward<'g, T: Element>(
        &self,
        g: &'g Graph<T>,
        store: &ParamStore<T>,
        x: Var<'g, T>,
    ) -> Result<Var<'g, T>, TensorError> {
        x.layer_norm(
            g.param(store, self.gain),
            g.param(store, self.bias),
            T::from_f64_lossy(LAYER_NORM_EPS),
        )
    }
}

/// Inverted dropout driven by a seeded generator.
#[derive(Debug)]
pub struct Dropout {
    pub p: f64,
    rng: ChaCha8Rng,
}

impl Dropout {
    pub fn new(p: f64, rng: ChaCha8Rng) -> Self {
        Dropout { p, rng }
    }

    pub fn apply<'g, T: Element>(&mut self, x: Var<'g, T>) -> Result<Var<'g, T>, TensorError> {
        if self.p <= 0.0 {
            return Ok(x);
        }
        let keep = 1.0 - self.p;
        let scale = T::from_f64_lossy(1.0 / keep);
        let shape = x.shape();
        let mask = Tensor::from_fn(&shape, |_| {
            if self.rng.random::<f64>() < keep {
                scale
            } else {
                T::zero()
            }
        });
        x.mul(x.graph().constant(mask))
    }
}

/// Applies dropout when a generator is present.
pub fn maybe_dropout<'g, T: Element>(x: Var<'g, T>, dropout: &mut Option<Dropout>) -> Result<Var<'g, T>, TensorError> {
    match dropout {
        Some(d) => d.apply(x),
        None => Ok(x),
    }
}

pub fn uniform<T: Element>(shape: &[usize], bound: f64, rng: &mut ChaCha8Rng) -> Tensor<T> {
    let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
    Tensor::from_fn(shape, |_| T::from_f64_lossy(dist.sample(rng)))
}

pub fn normal<T: Element>(shape: &[usize], std: f64, rng: &mut ChaCha8Rng) -> Tensor<T> {
    let dist = Normal::new(0.0, std).expect("positive std");
    Tensor::from_fn(shape, |_| T::from_f64_lossy(dist.sample(rng)))
}
