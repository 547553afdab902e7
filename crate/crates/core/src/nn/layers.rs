use rand::Rng;

use super::{Ctx, ParamGroup, ParamId, ParamStore};
use crate::autodiff::{Real, Var};
use crate::lora::LoraLinear;

/// `y = x Wᵀ + b` over the last axis, `W` stored `(d_out, d_in)`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        d_in: usize,
        d_out: usize,
        group: ParamGroup,
        trainable: bool,
        rng: &mut impl Rng,
    ) -> Self {
        let weight = store.normal(format!("{name}.weight"), &[d_out, d_in], (1.0 / d_in as f64).sqrt(), group, trainable, rng);
        let bias = Some(store.filled(format!("{name}.bias"), &[d_out], 0.0, group, trainable));
        Self { weight, bias, d_in, d_out }
    }

    pub fn forward<T: Real>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Var {
        let shape = ctx.g.shape(x).to_vec();
        let rows: usize = shape[..shape.len() - 1].iter().product();
        let flat = ctx.g.reshape(x, &[rows, self.d_in]);
        let w = ctx.p(self.weight);
        let mut y = ctx.g.matmul(flat, w, true);
        if let Some(b) = self.bias {
            let b = ctx.p(b);
            y = ctx.g.add(y, b);
        }
        let mut out_shape = shape;
        *out_shape.last_mut().expect("rank >= 1") = self.d_out;
        ctx.g.reshape(y, &out_shape)
    }
}

/// Attention projection, optionally carrying a LoRA adapter.
#[derive(Clone, Debug)]
pub enum Projection {
    Plain(Linear),
    Lora(LoraLinear),
}

impl Projection {
    pub fn forward<T: Real>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Var {
        match self {
            Projection::Plain(l) => l.forward(ctx, x),
            Projection::Lora(l) => l.forward(ctx, x),
        }
    }
}

/// Layer normalization with learned scale and shift.
///
/// `axis` is the normalized axis; the affine parameters broadcast from there to
/// the end of the shape (`(C,)` for token features, `(C,1,1)` for NCHW maps).
#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub axis_from_end: usize,
    pub eps: f64,
}

impl LayerNorm {
    /// Normalizes the last axis.
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, dim: usize, group: ParamGroup, trainable: bool) -> Self {
        let gamma = store.filled(format!("{name}.gamma"), &[dim], 1.0, group, trainable);
        let beta = store.filled(format!("{name}.beta"), &[dim], 0.0, group, trainable);
        Self { gamma, beta, axis_from_end: 1, eps: 1e-5 }
    }

    /// Normalizes the channel axis of NCHW maps.
    pub fn channels<T: Real>(store: &mut ParamStore<T>, name: &str, dim: usize, group: ParamGroup, trainable: bool) -> Self {
        let gamma = store.filled(format!("{name}.gamma"), &[dim, 1, 1], 1.0, group, trainable);
        let beta = store.filled(format!("{name}.beta"), &[dim, 1, 1], 0.0, group, trainable);
        Self { gamma, beta, axis_from_end: 3, eps: 1e-5 }
    }

    pub fn forward<T: Real>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Var {
        let axis = ctx.g.shape(x).len() - self.axis_from_end;
        let n = ctx.g.layer_norm(x, axis, T::lit(self.eps));
        let gamma = ctx.p(self.gamma);
        let beta = ctx.p(self.beta);
        let y = ctx.g.mul(n, gamma);
        ctx.g.add(y, beta)
    }
}

/// Two-layer perceptron with GELU.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        dims: (usize, usize, usize),
        group: ParamGroup,
        trainable: bool,
        rng: &mut impl Rng,
    ) -> Self {
        Self {
            fc1: Linear::new(store, &format!("{name}.fc1"), dims.0, dims.1, group, trainable, rng),
            fc2: Linear::new(store, &format!("{name}.fc2"), dims.1, dims.2, group, trainable, rng),
        }
    }

    pub fn forward<T: Real>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Var {
        let h = self.fc1.forward(ctx, x);
        let h = ctx.g.gelu(h);
        self.fc2.forward(ctx, h)
    }
}

/// Multi-head attention over `(B, N, D)` token sequences.
#[derive(Clone, Debug)]
pub struct Attention {
    pub q: Projection,
    pub k: Projection,
    pub v: Projection,
    pub out: Linear,
    pub heads: usize,
    pub dim: usize,
}

impl Attention {
    pub fn forward<T: Real>(&self, ctx: &mut Ctx<'_, T>, q_in: Var, k_in: Var, v_in: Var) -> Var {
        let (b, nq) = (ctx.g.shape(q_in)[0], ctx.g.shape(q_in)[1]);
        let nk = ctx.g.shape(k_in)[1];
        let dh = self.dim / self.heads;
        let q = self.q.forward(ctx, q_in);
        let k = self.k.forward(ctx, k_in);
        let v = self.v.forward(ctx, v_in);
        let split = |ctx: &mut Ctx<'_, T>, t: Var, n: usize| {
            let t = ctx.g.reshape(t, &[b, n, self.heads, dh]);
            let t = ctx.g.permute(t, &[0, 2, 1, 3]);
            ctx.g.reshape(t, &[b * self.heads, n, dh])
        };
        let q = split(ctx, q, nq);
        let k = split(ctx, k, nk);
        let v = split(ctx, v, nk);
        let logits = ctx.g.bmm(q, k, true);
        let logits = ctx.g.scale(logits, T::lit(1.0 / (dh as f64).sqrt()));
        let attn = ctx.g.softmax(logits);
        let o = ctx.g.bmm(attn, v, false);
        let o = ctx.g.reshape(o, &[b, self.heads, nq, dh]);
        let o = ctx.g.permute(o, &[0, 2, 1, 3]);
        let o = ctx.g.reshape(o, &[b, nq, self.dim]);
        self.out.forward(ctx, o)
    }
}

/// Pointwise convolution on NCHW maps, weight `(C_out, C_in)`.
#[derive(Clone, Debug)]
pub struct Conv1x1 {
    pub weight: ParamId,
    pub bias: ParamId,
    pub c_in: usize,
    pub c_out: usize,
}

impl Conv1x1 {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        c_in: usize,
        c_out: usize,
        group: ParamGroup,
        rng: &mut impl Rng,
    ) -> Self {
        let weight = store.normal(format!("{name}.weight"), &[c_out, c_in], (1.0 / c_in as f64).sqrt(), group, true, rng);
        let bias = store.filled(format!("{name}.bias"), &[c_out, 1, 1], 0.0, group, true);
        Self { weight, bias, c_in, c_out }
    }

    pub fn forward<T: Real>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Var {
        let s = ctx.g.shape(x).to_vec();
        let flat = ctx.g.reshape(x, &[s[0], s[1], s[2] * s[3]]);
        let w = ctx.p(self.weight);
        let y = ctx.g.shared_matmul(w, flat, false);
        let y = ctx.g.reshape(y, &[s[0], self.c_out, s[2], s[3]]);
        let b = ctx.p(self.bias);
        ctx.g.add(y, b)
    }
}

/// `K x K` convolution, stride 1, same padding. Weight `(C_out, C_in, K, K)`.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub c_in: usize,
    pub c_out: usize,
    pub kernel: usize,
}

impl Conv2d {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        group: ParamGroup,
        rng: &mut impl Rng,
    ) -> Self {
        let fan_in = (c_in * kernel * kernel) as f64;
        let weight = store.normal(format!("{name}.weight"), &[c_out, c_in, kernel, kernel], (1.0 / fan_in).sqrt(), group, true, rng);
        let bias = store.filled(format!("{name}.bias"), &[c_out, 1, 1], 0.0, group, true);
        Self { weight, bias, c_in, c_out, kernel }
    }

    pub fn forward<T: Real>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Var {
        let s = ctx.g.shape(x).to_vec();
        let cols = ctx.g.unfold(x, self.kernel, 1, self.kernel / 2);
        let w = ctx.p(self.weight);
        let w = ctx.g.reshape(w, &[self.c_out, self.c_in * self.kernel * self.kernel]);
        let y = ctx.g.shared_matmul(w, cols, false);
        let y = ctx.g.reshape(y, &[s[0], self.c_out, s[2], s[3]]);
        let b = ctx.p(self.bias);
        ctx.g.add(y, b)
    }
}

/// Transposed convolution with kernel 2 and stride 2. Weight `(C_in, C_out, 2, 2)`.
#[derive(Clone, Debug)]
pub struct ConvTranspose2x2 {
    pub weight: ParamId,
    pub bias: ParamId,
    pub c_in: usize,
    pub c_out: usize,
}

impl ConvTranspose2x2 {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        c_in: usize,
        c_out: usize,
        group: ParamGroup,
        rng: &mut impl Rng,
    ) -> Self {
        let weight = store.normal(format!("{name}.weight"), &[c_in, c_out, 2, 2], (1.0 / c_in as f64).sqrt(), group, true, rng);
        let bias = store.filled(format!("{name}.bias"), &[c_out, 1, 1], 0.0, group, true);
        Self { weight, bias, c_in, c_out }
    }

    pub fn forward<T: Real>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Var {
        let s = ctx.g.shape(x).to_vec();
        let flat = ctx.g.reshape(x, &[s[0], s[1], s[2] * s[3]]);
        let w = ctx.p(self.weight);
        let w = ctx.g.reshape(w, &[self.c_in, self.c_out * 4]);
        let y = ctx.g.shared_matmul(w, flat, true);
        let y = ctx.g.reshape(y, &[s[0], self.c_out * 4, s[2], s[3]]);
        let y = ctx.g.pixel_shuffle2(y);
        let b = ctx.p(self.bias);
        ctx.g.add(y, b)
    }
}
