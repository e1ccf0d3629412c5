//! Parameterized layers built from tape operations.

use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

/// Forward-pass context: where ops are recorded and where weights live.
#[derive(Clone, Copy)]
pub struct Ctx<'t> {
    pub tape: &'t Tape,
    pub store: &'t ParamStore,
}

impl<'t> Ctx<'t> {
    pub fn new(tape: &'t Tape, store: &'t ParamStore) -> Self {
        Ctx { tape, store }
    }

    pub fn p(&self, id: ParamId) -> Var<'t> {
        self.tape.param(self.store, id)
    }

    pub fn constant(&self, t: Tensor) -> Var<'t> {
        self.tape.constant(t)
    }
}

/// `y = x·W + b` over the last axis.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        d_in: usize,
        d_out: usize,
        rng: &mut R,
    ) -> Self {
        Self::with_gain(store, name, d_in, d_out, 1.0, rng)
    }

    pub fn with_gain<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        d_in: usize,
        d_out: usize,
        gain: f64,
        rng: &mut R,
    ) -> Self {
        Linear {
            weight: store.add_scaled(format!("{name}.weight"), &[d_in, d_out], d_in, gain, rng),
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[d_out])),
            d_in,
            d_out,
        }
    }

    pub fn forward<'t>(&self, cx: &Ctx<'t>, x: Var<'t>) -> Result<Var<'t>> {
        x.matmul(cx.p(self.weight))?.add(cx.p(self.bias))
    }
}

/// Square-kernel convolution with "same" padding.
#[derive(Debug, Clone)]
pub struct Conv {
    pub weight: ParamId,
    pub bias: ParamId,
    pub c_in: usize,
    pub c_out: usize,
    pub k: usize,
    pub stride: usize,
}

impl Conv {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        rng: &mut R,
    ) -> Self {
        Self::with_gain(store, name, c_in, c_out, k, stride, 1.0, rng)
    }

    /// `gain = √2` suits layers followed by a GELU.
    #[allow(clippy::too_many_arguments)]
    pub fn with_gain<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        gain: f64,
        rng: &mut R,
    ) -> Self {
        let fan_in = c_in * k * k;
        Conv {
            weight: store.add_scaled(format!("{name}.weight"), &[c_out, c_in, k, k], fan_in, gain, rng),
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[c_out])),
            c_in,
            c_out,
            k,
            stride,
        }
    }

    pub fn forward<'t>(&self, cx: &Ctx<'t>, x: Var<'t>) -> Result<Var<'t>> {
        x.conv2d(cx.p(self.weight), Some(cx.p(self.bias)), self.stride, self.k / 2)
    }

    /// Multiply-adds this layer spends on an `h×w` input, times two.
    pub fn flops(&self, h: usize, w: usize) -> usize {
        let (ho, wo) = (h / self.stride, w / self.stride);
        2 * self.c_out * self.c_in * self.k * self.k * ho * wo
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, d: usize) -> Self {
        LayerNorm {
            gain: store.add(format!("{name}.gain"), Tensor::ones(&[d])),
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[d])),
        }
    }

    pub fn forward<'t>(&self, cx: &Ctx<'t>, x: Var<'t>) -> Result<Var<'t>> {
        x.layer_norm(cx.p(self.gain), cx.p(self.bias))
    }
}

/// Multi-head scaled dot-product attention.
#[derive(Debug, Clone)]
pub struct Attention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
    pub heads: usize,
    pub dim: usize,
}

impl Attention {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        heads: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if heads == 0 || !dim.is_multiple_of(heads) {
            return Err(Error::arg(format!("attention width {dim} not divisible by {heads} heads")));
        }
        Ok(Attention {
            q: Linear::new(store, &format!("{name}.q"), dim, dim, rng),
            k: Linear::new(store, &format!("{name}.k"), dim, dim, rng),
            v: Linear::new(store, &format!("{name}.v"), dim, dim, rng),
            out: Linear::new(store, &format!("{name}.out"), dim, dim, rng),
            heads,
            dim,
        })
    }

    fn split<'t>(&self, x: Var<'t>) -> Result<Var<'t>> {
        let n = x.shape()[0];
        x.reshape(&[n, self.heads, self.dim / self.heads])?.permute(&[1, 0, 2])
    }

    /// Returns the attended output `[Nq, D]` and the weights `[heads, Nq, Nk]`.
    pub fn forward_with_weights<'t>(
        &self,
        cx: &Ctx<'t>,
        query: Var<'t>,
        key: Var<'t>,
        value: Var<'t>,
    ) -> Result<(Var<'t>, Var<'t>)> {
        let (qs, ks, vs) = (query.shape(), key.shape(), value.shape());
        if qs.len() != 2 || ks.len() != 2 || vs.len() != 2 || qs[1] != self.dim || ks[1] != self.dim || vs != ks {
            return Err(Error::shape(format!(
                "attention width {} with query {qs:?}, key {ks:?}, value {vs:?}",
                self.dim
            )));
        }
        let nq = qs[0];
        let q = self.split(self.q.forward(cx, query)?)?;
        let k = self.split(self.k.forward(cx, key)?)?;
        let v = self.split(self.v.forward(cx, value)?)?;
        let scale = 1.0 / ((self.dim / self.heads) as f64).sqrt();
        let weights = q.matmul(k.t()?)?.scale(scale).softmax();
        let ctx = weights.matmul(v)?.permute(&[1, 0, 2])?.reshape(&[nq, self.dim])?;
        Ok((self.out.forward(cx, ctx)?, weights))
    }

    pub fn forward<'t>(
        &self,
        cx: &Ctx<'t>,
        query: Var<'t>,
        key: Var<'t>,
        value: Var<'t>,
    ) -> Result<Var<'t>> {
        Ok(self.forward_with_weights(cx, query, key, value)?.0)
    }
}

#[derive(Debug, Clone)]
pub struct FeedForward {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl FeedForward {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Self {
        FeedForward {
            fc1: Linear::new(store, &format!("{name}.fc1"), dim, hidden, rng),
            fc2: Linear::new(store, &format!("{name}.fc2"), hidden, dim, rng),
        }
    }

    pub fn forward<'t>(&self, cx: &Ctx<'t>, x: Var<'t>) -> Result<Var<'t>> {
        let h = self.fc1.forward(cx, x)?.gelu();
        self.fc2.forward(cx, h)
    }
}

/// Flattens `[C,h,w]` into tokens `[h·w, C]`.
pub fn to_tokens(x: Var<'_>) -> Result<Var<'_>> {
    let s = x.shape();
    if s.len() != 3 {
        return Err(Error::shape(format!("expected [C,H,W], got {s:?}")));
    }
    x.reshape(&[s[0], s[1] * s[2]])?.t()
}

/// Inverse of [`to_tokens`].
pub fn from_tokens(x: Var<'_>, h: usize, w: usize) -> Result<Var<'_>> {
    let c = x.shape()[1];
    x.t()?.reshape(&[c, h, w])
}
