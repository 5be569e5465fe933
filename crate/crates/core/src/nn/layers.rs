//! Layer primitives. Each layer registers its parameters in a
//! [`ParamStore`] at construction and replays them onto a [`Fwd`] pass.

use super::{randn, Fwd, ParamId, ParamStore};
use crate::tensor::{Scalar, Var};
use ndarray::ArrayD;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

#[derive(Debug, Clone)]
pub struct Conv2d {
    weight: ParamId,
    bias: ParamId,
    stride: usize,
    pad: usize,
}

impl Conv2d {
    /// Kaiming-normal init, zero bias.
    pub fn new<S, R>(
        store: &mut ParamStore<S>,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        rng: &mut R,
    ) -> Self
    where
        S: Scalar,
        R: Rng,
        StandardNormal: Distribution<S>,
    {
        let std = (2.0 / (cin * k * k) as f64).sqrt();
        let weight = store.add(format!("{name}.weight"), randn(&[cout, cin, k, k], std, rng));
        let bias = store.add(
            format!("{name}.bias"),
            ArrayD::zeros(ndarray::IxDyn(&[cout])),
        );
        Conv2d {
            weight,
            bias,
            stride,
            pad: k / 2,
        }
    }

    /// Force the output projection to start at zero (used for the final
    /// layers of residual branches).
    pub fn zero_init<S: Scalar>(&self, store: &mut ParamStore<S>) {
        store.get_mut(self.weight).fill(S::zero());
    }

    pub fn apply<S: Scalar>(&self, f: &mut Fwd<S>, x: Var) -> Var {
        let w = f.p(self.weight);
        let b = f.p(self.bias);
        f.tape.conv2d(x, w, b, self.stride, self.pad)
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    weight: ParamId,
    bias: ParamId,
}

impl Linear {
    pub fn new<S, R>(
        store: &mut ParamStore<S>,
        name: &str,
        fin: usize,
        fout: usize,
        rng: &mut R,
    ) -> Self
    where
        S: Scalar,
        R: Rng,
        StandardNormal: Distribution<S>,
    {
        let std = (1.0 / fin as f64).sqrt();
        let weight = store.add(format!("{name}.weight"), randn(&[fin, fout], std, rng));
        let bias = store.add(
            format!("{name}.bias"),
            ArrayD::zeros(ndarray::IxDyn(&[fout])),
        );
        Linear { weight, bias }
    }

    pub fn apply<S: Scalar>(&self, f: &mut Fwd<S>, x: Var) -> Var {
        let w = f.p(self.weight);
        let b = f.p(self.bias);
        f.tape.linear(x, w, b)
    }

    /// Apply to a 3-D batch of token sequences `[n, l, fin]`.
    pub fn apply_tokens<S: Scalar>(&self, f: &mut Fwd<S>, x: Var) -> Var {
        let shape: Vec<usize> = f.tape.shape(x).to_vec();
        let (n, l, fin) = (shape[0], shape[1], shape[2]);
        let flat = f.tape.reshape(x, &[n * l, fin]);
        let y = self.apply(f, flat);
        let fout = f.tape.shape(y)[1];
        f.tape.reshape(y, &[n, l, fout])
    }
}

#[derive(Debug, Clone)]
pub struct GroupNorm {
    gamma: ParamId,
    beta: ParamId,
    groups: usize,
    eps: f64,
}

impl GroupNorm {
    pub fn new<S: Scalar>(store: &mut ParamStore<S>, name: &str, channels: usize, groups: usize) -> Self {
        assert_eq!(channels % groups, 0);
        let gamma = store.add(
            format!("{name}.gamma"),
            ArrayD::from_elem(ndarray::IxDyn(&[channels]), S::one()),
        );
        let beta = store.add(
            format!("{name}.beta"),
            ArrayD::zeros(ndarray::IxDyn(&[channels])),
        );
        GroupNorm {
            gamma,
            beta,
            groups,
            eps: 1e-5,
        }
    }

    pub fn apply<S: Scalar>(&self, f: &mut Fwd<S>, x: Var) -> Var {
        let g = f.p(self.gamma);
        let b = f.p(self.beta);
        f.tape.group_norm(x, g, b, self.groups, self.eps)
    }
}

/// Single-head cross-attention from a spatial feature map onto an external
/// token sequence. Queries come from the `[n, c, h, w]` map, keys and values
/// from the `[n, l, d]` context.
#[derive(Debug, Clone)]
pub struct CrossAttention {
    wq: Linear,
    wk: Linear,
    wv: Linear,
    wo: Linear,
    inner: usize,
}

impl CrossAttention {
    pub fn new<S, R>(
        store: &mut ParamStore<S>,
        name: &str,
        channels: usize,
        ctx_dim: usize,
        inner: usize,
        rng: &mut R,
    ) -> Self
    where
        S: Scalar,
        R: Rng,
        StandardNormal: Distribution<S>,
    {
        CrossAttention {
            wq: Linear::new(store, &format!("{name}.q"), channels, inner, rng),
            wk: Linear::new(store, &format!("{name}.k"), ctx_dim, inner, rng),
            wv: Linear::new(store, &format!("{name}.v"), ctx_dim, inner, rng),
            wo: Linear::new(store, &format!("{name}.out"), inner, channels, rng),
            inner,
        }
    }

    /// Returns a tensor shaped like `x` (the caller adds the residual).
    pub fn apply<S: Scalar>(&self, f: &mut Fwd<S>, x: Var, ctx: Var) -> Var {
        let shape: Vec<usize> = f.tape.shape(x).to_vec();
        let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
        // [n, c, h, w] -> [n, h*w, c]
        let flat = f.tape.reshape(x, &[n, c, h * w]);
        let tokens = f.tape.transpose_last2(flat);
        let q = self.wq.apply_tokens(f, tokens); // [n, hw, inner]
        let k = self.wk.apply_tokens(f, ctx); // [n, l, inner]
        let v = self.wv.apply_tokens(f, ctx);
        let kt = f.tape.transpose_last2(k); // [n, inner, l]
        let scores = f.tape.bmm(q, kt);
        let scaled = f.tape.scale(scores, 1.0 / (self.inner as f64).sqrt());
        let attn = f.tape.softmax_lastdim(scaled);
        let mixed = f.tape.bmm(attn, v); // [n, hw, inner]
        let out = self.wo.apply_tokens(f, mixed); // [n, hw, c]
        let back = f.tape.transpose_last2(out);
        f.tape.reshape(back, &[n, c, h, w])
    }
}
