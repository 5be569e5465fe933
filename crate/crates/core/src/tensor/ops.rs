//! Elementwise, shape and linear-algebra operations recorded on the tape.

use super::{Scalar, Tape, Var, VjpOp};
use ndarray::{s, ArrayD, Axis, Ix2, Ix3, Ix4, IxDyn};

pub(crate) struct Lambda<S: Scalar> {
    #[allow(clippy::type_complexity)]
    f: Box<dyn Fn(&ArrayD<S>, &[&ArrayD<S>], &ArrayD<S>) -> Vec<ArrayD<S>>>,
}

impl<S: Scalar> Lambda<S> {
    pub fn new(
        f: impl Fn(&ArrayD<S>, &[&ArrayD<S>], &ArrayD<S>) -> Vec<ArrayD<S>> + 'static,
    ) -> Box<Self> {
        Box::new(Lambda { f: Box::new(f) })
    }
}

impl<S: Scalar> VjpOp<S> for Lambda<S> {
    fn vjp(&self, grad: &ArrayD<S>, inputs: &[&ArrayD<S>], output: &ArrayD<S>) -> Vec<ArrayD<S>> {
        (self.f)(grad, inputs, output)
    }
}

pub(crate) fn reshape_arr<S: Scalar>(x: &ArrayD<S>, shape: &[usize]) -> ArrayD<S> {
    let v: Vec<S> = x.iter().cloned().collect();
    ArrayD::from_shape_vec(IxDyn(shape), v).expect("element count must match")
}

impl<S: Scalar> Tape<S> {
    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "add: shape mismatch");
        let v = self.value(a) + self.value(b);
        self.record(v, &[a, b], Lambda::<S>::new(|g, _, _| vec![g.clone(), g.clone()]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "sub: shape mismatch");
        let v = self.value(a) - self.value(b);
        self.record(v, &[a, b], Lambda::<S>::new(|g, _, _| vec![g.clone(), g.mapv(|x| -x)]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "mul: shape mismatch");
        let v = self.value(a) * self.value(b);
        self.record(
            v,
            &[a, b],
            Lambda::<S>::new(|g, inp, _| vec![g * inp[1], g * inp[0]]),
        )
    }

    pub fn neg(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(|x| -x);
        self.record(v, &[a], Lambda::<S>::new(|g, _, _| vec![g.mapv(|x| -x)]))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let cs = S::lit(c);
        let v = self.value(a).mapv(|x| x * cs);
        self.record(v, &[a], Lambda::<S>::new(move |g, _, _| vec![g.mapv(|x| x * cs)]))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let cs = S::lit(c);
        let v = self.value(a).mapv(|x| x + cs);
        self.record(v, &[a], Lambda::<S>::new(|g, _, _| vec![g.clone()]))
    }

    pub fn square(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(|x| x * x);
        self.record(
            v,
            &[a],
            Lambda::<S>::new(|g, inp, _| {
                let two = S::lit(2.0);
                vec![g * &inp[0].mapv(|x| x * two)]
            }),
        )
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(|x| x.abs());
        self.record(
            v,
            &[a],
            Lambda::<S>::new(|g, inp, _| vec![g * &inp[0].mapv(|x| x.signum())]),
        )
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(|x| x.exp());
        self.record(v, &[a], Lambda::<S>::new(|g, _, out| vec![g * out]))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(|x| x.tanh());
        self.record(
            v,
            &[a],
            Lambda::<S>::new(|g, _, out| vec![g * &out.mapv(|y| S::one() - y * y)]),
        )
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(|x| x * sigmoid(x));
        self.record(
            v,
            &[a],
            Lambda::<S>::new(|g, inp, _| {
                let d = inp[0].mapv(|x| {
                    let s = sigmoid(x);
                    s * (S::one() + x * (S::one() - s))
                });
                vec![g * &d]
            }),
        )
    }

    /// Clamp with zero gradient outside the admitted range.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let (los, his) = (S::lit(lo), S::lit(hi));
        let v = self.value(a).mapv(|x| x.max(los).min(his));
        self.record(
            v,
            &[a],
            Lambda::<S>::new(move |g, inp, _| {
                let mut gx = g.clone();
                gx.zip_mut_with(inp[0], |gv, &x| {
                    if x < los || x > his {
                        *gv = S::zero();
                    }
                });
                vec![gx]
            }),
        )
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.value(a).len();
        let m = self.value(a).sum() / S::lit(n as f64);
        let shape: Vec<usize> = self.shape(a).to_vec();
        let v = ArrayD::from_elem(IxDyn(&[]), m);
        self.record(
            v,
            &[a],
            Lambda::<S>::new(move |g, _, _| {
                let gv = g[[]] / S::lit(n as f64);
                vec![ArrayD::from_elem(IxDyn(&shape), gv)]
            }),
        )
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let shape: Vec<usize> = self.shape(a).to_vec();
        let v = ArrayD::from_elem(IxDyn(&[]), self.value(a).sum());
        self.record(
            v,
            &[a],
            Lambda::<S>::new(move |g, _, _| vec![ArrayD::from_elem(IxDyn(&shape), g[[]])]),
        )
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let old: Vec<usize> = self.shape(a).to_vec();
        let v = reshape_arr(self.value(a), shape);
        self.record(
            v,
            &[a],
            Lambda::<S>::new(move |g, _, _| vec![reshape_arr(g, &old)]),
        )
    }

    /// Swap the last two axes of a 2-D or 3-D tensor.
    pub fn transpose_last2(&mut self, a: Var) -> Var {
        fn swap<S: Scalar>(x: &ArrayD<S>) -> ArrayD<S> {
            let ndim = x.ndim();
            assert!(ndim == 2 || ndim == 3, "transpose_last2 needs 2-D or 3-D");
            let mut axes: Vec<usize> = (0..ndim).collect();
            axes.swap(ndim - 2, ndim - 1);
            x.view()
                .permuted_axes(axes.as_slice())
                .as_standard_layout()
                .to_owned()
        }
        let v = swap(self.value(a));
        self.record(v, &[a], Lambda::<S>::new(|g, _, _| vec![swap(g)]))
    }

    /// 2-D matrix product `[m, k] x [k, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let av = self.value(a).view().into_dimensionality::<Ix2>().unwrap();
        let bv = self.value(b).view().into_dimensionality::<Ix2>().unwrap();
        let v = av.dot(&bv).into_dyn();
        self.record(
            v,
            &[a, b],
            Lambda::<S>::new(|g, inp, _| {
                let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
                let a2 = inp[0].view().into_dimensionality::<Ix2>().unwrap();
                let b2 = inp[1].view().into_dimensionality::<Ix2>().unwrap();
                vec![g2.dot(&b2.t()).into_dyn(), a2.t().dot(&g2).into_dyn()]
            }),
        )
    }

    /// Batched matrix product `[n, a, k] x [n, k, b]`.
    pub fn bmm(&mut self, a: Var, b: Var) -> Var {
        let av = self.value(a).view().into_dimensionality::<Ix3>().unwrap();
        let bv = self.value(b).view().into_dimensionality::<Ix3>().unwrap();
        let (n, m, k) = (av.shape()[0], av.shape()[1], av.shape()[2]);
        assert_eq!(k, bv.shape()[1], "bmm: inner dims");
        let p = bv.shape()[2];
        let mut out = ndarray::Array3::<S>::zeros((n, m, p));
        for i in 0..n {
            out.index_axis_mut(Axis(0), i)
                .assign(&av.index_axis(Axis(0), i).dot(&bv.index_axis(Axis(0), i)));
        }
        self.record(
            out.into_dyn(),
            &[a, b],
            Lambda::<S>::new(|g, inp, _| {
                let g3 = g.view().into_dimensionality::<Ix3>().unwrap();
                let a3 = inp[0].view().into_dimensionality::<Ix3>().unwrap();
                let b3 = inp[1].view().into_dimensionality::<Ix3>().unwrap();
                let mut ga = ndarray::Array3::<S>::zeros(a3.raw_dim());
                let mut gb = ndarray::Array3::<S>::zeros(b3.raw_dim());
                for i in 0..g3.shape()[0] {
                    let gi = g3.index_axis(Axis(0), i);
                    ga.index_axis_mut(Axis(0), i)
                        .assign(&gi.dot(&b3.index_axis(Axis(0), i).t()));
                    gb.index_axis_mut(Axis(0), i)
                        .assign(&a3.index_axis(Axis(0), i).t().dot(&gi));
                }
                vec![ga.into_dyn(), gb.into_dyn()]
            }),
        )
    }

    pub fn softmax_lastdim(&mut self, a: Var) -> Var {
        let v = softmax_last(self.value(a));
        self.record(
            v,
            &[a],
            Lambda::<S>::new(|g, _, out| {
                let mut gx = g * out;
                let last = out.ndim() - 1;
                let dot = gx.sum_axis(Axis(last)).insert_axis(Axis(last));
                gx = &gx - &(out * &dot);
                vec![gx]
            }),
        )
    }

    pub fn log_softmax_lastdim(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let last = x.ndim() - 1;
        let max = x.map_axis(Axis(last), |row| {
            row.iter().cloned().fold(S::neg_infinity(), S::max)
        });
        let shifted = x - &max.insert_axis(Axis(last));
        let lse = shifted
            .mapv(|v| v.exp())
            .sum_axis(Axis(last))
            .mapv(|v| v.ln())
            .insert_axis(Axis(last));
        let v = &shifted - &lse;
        self.record(
            v,
            &[a],
            Lambda::<S>::new(|g, _, out| {
                let last = out.ndim() - 1;
                let gsum = g.sum_axis(Axis(last)).insert_axis(Axis(last));
                let soft = out.mapv(|v| v.exp());
                vec![g - &(&soft * &gsum)]
            }),
        )
    }

    /// Concatenate along axis 1 (channels / feature axis).
    pub fn concat_axis1(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let v = ndarray::concatenate(Axis(1), &views).expect("concat shapes");
        let widths: Vec<usize> = parts.iter().map(|&p| self.shape(p)[1]).collect();
        self.record(
            v,
            parts,
            Lambda::<S>::new(move |g, _, _| {
                let mut out = Vec::with_capacity(widths.len());
                let mut at = 0;
                for &w in &widths {
                    out.push(
                        g.slice_axis(Axis(1), ndarray::Slice::from(at..at + w))
                            .to_owned(),
                    );
                    at += w;
                }
                out
            }),
        )
    }

    /// Slice `[start, end)` along axis 1.
    pub fn slice_axis1(&mut self, a: Var, start: usize, end: usize) -> Var {
        let full = self.shape(a)[1];
        assert!(start < end && end <= full);
        let v = self
            .value(a)
            .slice_axis(Axis(1), ndarray::Slice::from(start..end))
            .to_owned();
        self.record(
            v,
            &[a],
            Lambda::<S>::new(move |g, inp, _| {
                let mut gx = ArrayD::zeros(inp[0].raw_dim());
                gx.slice_axis_mut(Axis(1), ndarray::Slice::from(start..end))
                    .assign(g);
                vec![gx]
            }),
        )
    }

    /// Add a per-feature bias `[f]` to a 2-D tensor `[n, f]`.
    pub fn add_bias_row(&mut self, x: Var, b: Var) -> Var {
        let xb = self.value(x) + self.value(b);
        self.record(
            xb,
            &[x, b],
            Lambda::<S>::new(|g, _, _| vec![g.clone(), g.sum_axis(Axis(0))]),
        )
    }

    /// Add a per-channel bias `[c]` to a 4-D tensor `[n, c, h, w]`.
    pub fn add_bias_chan(&mut self, x: Var, b: Var) -> Var {
        let xv = self.value(x).view().into_dimensionality::<Ix4>().unwrap();
        let bv = self.value(b);
        let mut out = xv.to_owned();
        for c in 0..bv.len() {
            out.slice_mut(s![.., c, .., ..]).mapv_inplace(|v| v + bv[c]);
        }
        self.record(
            out.into_dyn(),
            &[x, b],
            Lambda::<S>::new(|g, inp, _| {
                let g4 = g.view().into_dimensionality::<Ix4>().unwrap();
                let c = inp[1].len();
                let mut gb = ndarray::Array1::<S>::zeros(c);
                for ci in 0..c {
                    gb[ci] = g4.slice(s![.., ci, .., ..]).sum();
                }
                vec![g.clone(), gb.into_dyn()]
            }),
        )
    }

    /// Add a per-sample, per-channel bias `[n, c]` to `[n, c, h, w]`
    /// (timestep embeddings enter residual blocks this way).
    pub fn add_bias_sample_chan(&mut self, x: Var, b: Var) -> Var {
        let xv = self.value(x).view().into_dimensionality::<Ix4>().unwrap();
        let bv = self.value(b).view().into_dimensionality::<Ix2>().unwrap();
        let mut out = xv.to_owned();
        for n in 0..bv.shape()[0] {
            for c in 0..bv.shape()[1] {
                let add = bv[[n, c]];
                out.slice_mut(s![n, c, .., ..]).mapv_inplace(|v| v + add);
            }
        }
        self.record(
            out.into_dyn(),
            &[x, b],
            Lambda::<S>::new(|g, inp, _| {
                let g4 = g.view().into_dimensionality::<Ix4>().unwrap();
                let bshape = inp[1].shape();
                let mut gb = ndarray::Array2::<S>::zeros((bshape[0], bshape[1]));
                for n in 0..bshape[0] {
                    for c in 0..bshape[1] {
                        gb[[n, c]] = g4.slice(s![n, c, .., ..]).sum();
                    }
                }
                vec![g.clone(), gb.into_dyn()]
            }),
        )
    }

    /// Mean over the spatial axes: `[n, c, h, w] -> [n, c]`.
    pub fn spatial_mean(&mut self, x: Var) -> Var {
        let xv = self.value(x).view().into_dimensionality::<Ix4>().unwrap();
        let (h, w) = (xv.shape()[2], xv.shape()[3]);
        let v = xv
            .sum_axis(Axis(3))
            .sum_axis(Axis(2))
            .mapv(|s| s / S::lit((h * w) as f64));
        self.record(
            v.into_dyn(),
            &[x],
            Lambda::<S>::new(move |g, inp, _| {
                let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
                let mut gx = ndarray::ArrayD::<S>::zeros(inp[0].raw_dim());
                let scale = S::lit((h * w) as f64);
                let mut gx4 = gx.view_mut().into_dimensionality::<Ix4>().unwrap();
                for n in 0..g2.shape()[0] {
                    for c in 0..g2.shape()[1] {
                        gx4.slice_mut(s![n, c, .., ..]).fill(g2[[n, c]] / scale);
                    }
                }
                drop(gx4);
                vec![gx]
            }),
        )
    }

    /// Repeat a tensor `n` times along a new leading axis; the gradient
    /// sums over the copies.
    pub fn broadcast_axis0(&mut self, x: Var, n: usize) -> Var {
        let xv = self.value(x).clone();
        let mut shape = vec![n];
        shape.extend_from_slice(xv.shape());
        let mut out = ArrayD::<S>::zeros(ndarray::IxDyn(&shape));
        for mut lane in out.outer_iter_mut() {
            lane.assign(&xv);
        }
        self.record(
            out,
            &[x],
            Lambda::<S>::new(move |g, inp, _| {
                let mut gx = ArrayD::<S>::zeros(inp[0].raw_dim());
                for lane in g.outer_iter() {
                    gx.zip_mut_with(&lane, |a, &b| *a = *a + b);
                }
                vec![gx]
            }),
        )
    }

    /// Row-wise L2 normalization of `[n, d]`; rows with norm below `eps`
    /// are scaled by `1/eps` instead.
    pub fn l2_normalize_rows(&mut self, x: Var) -> Var {
        const EPS: f64 = 1e-12;
        let xv = self.value(x).view().into_dimensionality::<Ix2>().unwrap();
        let norms: Vec<S> = xv
            .outer_iter()
            .map(|row| {
                row.iter()
                    .fold(S::zero(), |acc, &v| acc + v * v)
                    .sqrt()
                    .max(S::lit(EPS))
            })
            .collect();
        let mut out = xv.to_owned();
        for (mut row, &n) in out.outer_iter_mut().zip(&norms) {
            row.mapv_inplace(|v| v / n);
        }
        let y = out.clone();
        self.record(
            out.into_dyn(),
            &[x],
            Lambda::<S>::new(move |g, _, _| {
                let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
                let mut gx = ndarray::Array2::<S>::zeros(g2.raw_dim());
                for i in 0..g2.shape()[0] {
                    let dot = (0..g2.shape()[1])
                        .fold(S::zero(), |acc, j| acc + y[[i, j]] * g2[[i, j]]);
                    for j in 0..g2.shape()[1] {
                        gx[[i, j]] = (g2[[i, j]] - y[[i, j]] * dot) / norms[i];
                    }
                }
                vec![gx.into_dyn()]
            }),
        )
    }

    /// Nearest-neighbour 2x upsampling of `[n, c, h, w]`.
    pub fn upsample2(&mut self, x: Var) -> Var {
        let xv = self.value(x).view().into_dimensionality::<Ix4>().unwrap();
        let (n, c, h, w) = (xv.shape()[0], xv.shape()[1], xv.shape()[2], xv.shape()[3]);
        let mut out = ndarray::Array4::<S>::zeros((n, c, 2 * h, 2 * w));
        for ni in 0..n {
            for ci in 0..c {
                for hi in 0..h {
                    for wi in 0..w {
                        let v = xv[[ni, ci, hi, wi]];
                        out[[ni, ci, 2 * hi, 2 * wi]] = v;
                        out[[ni, ci, 2 * hi, 2 * wi + 1]] = v;
                        out[[ni, ci, 2 * hi + 1, 2 * wi]] = v;
                        out[[ni, ci, 2 * hi + 1, 2 * wi + 1]] = v;
                    }
                }
            }
        }
        self.record(
            out.into_dyn(),
            &[x],
            Lambda::<S>::new(move |g, _, _| {
                let g4 = g.view().into_dimensionality::<Ix4>().unwrap();
                let mut gx = ndarray::Array4::<S>::zeros((n, c, h, w));
                for ni in 0..n {
                    for ci in 0..c {
                        for hi in 0..h {
                            for wi in 0..w {
                                gx[[ni, ci, hi, wi]] = g4[[ni, ci, 2 * hi, 2 * wi]]
                                    + g4[[ni, ci, 2 * hi, 2 * wi + 1]]
                                    + g4[[ni, ci, 2 * hi + 1, 2 * wi]]
                                    + g4[[ni, ci, 2 * hi + 1, 2 * wi + 1]];
                            }
                        }
                    }
                }
                vec![gx.into_dyn()]
            }),
        )
    }

    /// Group normalization over `[n, c, h, w]` with per-channel affine params.
    pub fn group_norm(&mut self, x: Var, gamma: Var, beta: Var, groups: usize, eps: f64) -> Var {
        let xv = self.value(x).view().into_dimensionality::<Ix4>().unwrap();
        let (n, c) = (xv.shape()[0], xv.shape()[1]);
        assert_eq!(c % groups, 0, "group_norm: channels divisible by groups");
        let gv = self.value(gamma).clone();
        let bv = self.value(beta).clone();
        let eps_s = S::lit(eps);
        let cpg = c / groups;
        let mut out = xv.to_owned();
        for ni in 0..n {
            for gi in 0..groups {
                let sl = s![ni, gi * cpg..(gi + 1) * cpg, .., ..];
                let chunk = xv.slice(sl);
                let m = chunk.len();
                let mean = chunk.sum() / S::lit(m as f64);
                let var = chunk.mapv(|v| (v - mean) * (v - mean)).sum() / S::lit(m as f64);
                let inv_std = (var + eps_s).sqrt().recip();
                let mut oc = out.slice_mut(sl);
                oc.mapv_inplace(|v| (v - mean) * inv_std);
            }
            for ci in 0..c {
                let (gc, bc) = (gv[ci], bv[ci]);
                out.slice_mut(s![ni, ci, .., ..])
                    .mapv_inplace(|v| v * gc + bc);
            }
        }
        self.record(
            out.into_dyn(),
            &[x, gamma, beta],
            Lambda::<S>::new(move |g, inp, _| {
                let xv = inp[0].view().into_dimensionality::<Ix4>().unwrap();
                let gv = inp[1];
                let g4 = g.view().into_dimensionality::<Ix4>().unwrap();
                let (n, c) = (xv.shape()[0], xv.shape()[1]);
                let cpg = c / groups;
                let mut gx = ndarray::Array4::<S>::zeros(xv.raw_dim());
                let mut ggamma = ndarray::Array1::<S>::zeros(c);
                let mut gbeta = ndarray::Array1::<S>::zeros(c);
                for ni in 0..n {
                    for gi in 0..groups {
                        let sl = s![ni, gi * cpg..(gi + 1) * cpg, .., ..];
                        let chunk = xv.slice(sl);
                        let m = chunk.len();
                        let mf = S::lit(m as f64);
                        let mean = chunk.sum() / mf;
                        let var = chunk.mapv(|v| (v - mean) * (v - mean)).sum() / mf;
                        let inv_std = (var + eps_s).sqrt().recip();
                        let xhat = chunk.mapv(|v| (v - mean) * inv_std);
                        // dxhat = dy * gamma_c
                        let mut dxhat = g4.slice(sl).to_owned();
                        for (cc, mut lane) in dxhat.axis_iter_mut(Axis(0)).enumerate() {
                            let gc = gv[gi * cpg + cc];
                            lane.mapv_inplace(|v| v * gc);
                        }
                        let mean_dxhat = dxhat.sum() / mf;
                        let mean_dxhat_xhat = (&dxhat * &xhat).sum() / mf;
                        let mut dchunk = dxhat;
                        dchunk.zip_mut_with(&xhat, |d, &xh| {
                            *d = (*d - mean_dxhat - xh * mean_dxhat_xhat) * inv_std;
                        });
                        gx.slice_mut(sl).assign(&dchunk);
                        for cc in 0..cpg {
                            let ci = gi * cpg + cc;
                            ggamma[ci] = ggamma[ci]
                                + (&g4.slice(s![ni, ci, .., ..]).to_owned()
                                    * &xhat.index_axis(Axis(0), cc))
                                    .sum();
                            gbeta[ci] = gbeta[ci] + g4.slice(s![ni, ci, .., ..]).sum();
                        }
                    }
                }
                vec![gx.into_dyn(), ggamma.into_dyn(), gbeta.into_dyn()]
            }),
        )
    }
}

fn sigmoid<S: Scalar>(x: S) -> S {
    S::one() / (S::one() + (-x).exp())
}

pub(crate) fn softmax_last<S: Scalar>(x: &ArrayD<S>) -> ArrayD<S> {
    let last = x.ndim() - 1;
    let max = x.map_axis(Axis(last), |row| {
        row.iter().cloned().fold(S::neg_infinity(), S::max)
    });
    let mut e = (x - &max.insert_axis(Axis(last))).mapv(|v| v.exp());
    let sum = e.sum_axis(Axis(last)).insert_axis(Axis(last));
    e = &e / &sum;
    e
}
