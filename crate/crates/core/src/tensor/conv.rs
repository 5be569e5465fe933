//! im2col-based 2-D convolution with hand-derived backward pass.

use super::ops::Lambda;
use super::{Scalar, Tape, Var};
use ndarray::{Array2, Array4, ArrayView3, ArrayViewMut3, Axis, Ix4};

/// Unfold one sample `[c, h, w]` into a `[c*k*k, oh*ow]` matrix.
pub fn im2col<S: Scalar>(
    x: ArrayView3<S>,
    k: usize,
    stride: usize,
    pad: usize,
) -> (Array2<S>, usize, usize) {
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let oh = (h + 2 * pad - k) / stride + 1;
    let ow = (w + 2 * pad - k) / stride + 1;
    let mut cols = Array2::<S>::zeros((c * k * k, oh * ow));
    for ci in 0..c {
        for ki in 0..k {
            for kj in 0..k {
                let row = ci * k * k + ki * k + kj;
                for oi in 0..oh {
                    let ii = (oi * stride + ki) as isize - pad as isize;
                    if ii < 0 || ii >= h as isize {
                        continue;
                    }
                    for oj in 0..ow {
                        let jj = (oj * stride + kj) as isize - pad as isize;
                        if jj < 0 || jj >= w as isize {
                            continue;
                        }
                        cols[[row, oi * ow + oj]] = x[[ci, ii as usize, jj as usize]];
                    }
                }
            }
        }
    }
    (cols, oh, ow)
}

/// Fold a `[c*k*k, oh*ow]` matrix back onto a `[c, h, w]` gradient
/// (transpose of [`im2col`]).
pub fn col2im<S: Scalar>(
    cols: &Array2<S>,
    mut gx: ArrayViewMut3<S>,
    k: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) {
    let (c, h, w) = (gx.shape()[0], gx.shape()[1], gx.shape()[2]);
    for ci in 0..c {
        for ki in 0..k {
            for kj in 0..k {
                let row = ci * k * k + ki * k + kj;
                for oi in 0..oh {
                    let ii = (oi * stride + ki) as isize - pad as isize;
                    if ii < 0 || ii >= h as isize {
                        continue;
                    }
                    for oj in 0..ow {
                        let jj = (oj * stride + kj) as isize - pad as isize;
                        if jj < 0 || jj >= w as isize {
                            continue;
                        }
                        gx[[ci, ii as usize, jj as usize]] =
                            gx[[ci, ii as usize, jj as usize]] + cols[[row, oi * ow + oj]];
                    }
                }
            }
        }
    }
}

impl<S: Scalar> Tape<S> {
    /// 2-D convolution: `x [n, cin, h, w]`, `w [cout, cin, k, k]`, `b [cout]`.
    /// Square kernel, symmetric zero padding.
    pub fn conv2d(&mut self, x: Var, weight: Var, bias: Var, stride: usize, pad: usize) -> Var {
        let xv = self.value(x).view().into_dimensionality::<Ix4>().unwrap();
        let wv = self
            .value(weight)
            .view()
            .into_dimensionality::<Ix4>()
            .unwrap();
        let bv = self.value(bias).clone();
        let (n, cin) = (xv.shape()[0], xv.shape()[1]);
        let (cout, k) = (wv.shape()[0], wv.shape()[2]);
        assert_eq!(cin, wv.shape()[1], "conv2d: input channels");
        let wmat = wv
            .to_shape((cout, cin * k * k))
            .unwrap()
            .as_standard_layout()
            .to_owned();
        let mut out_opt: Option<Array4<S>> = None;
        for ni in 0..n {
            let (cols, oh, ow) = im2col(xv.index_axis(Axis(0), ni), k, stride, pad);
            let o = wmat.dot(&cols); // [cout, oh*ow]
            let out =
                out_opt.get_or_insert_with(|| Array4::<S>::zeros((n, cout, oh, ow)));
            let mut dst = out.index_axis_mut(Axis(0), ni);
            for co in 0..cout {
                let lane = o.index_axis(Axis(0), co);
                let mut dl = dst.index_axis_mut(Axis(0), co);
                for (d, &s) in dl.iter_mut().zip(lane.iter()) {
                    *d = s + bv[co];
                }
            }
        }
        let out = out_opt.expect("batch size >= 1");
        self.record(
            out.into_dyn(),
            &[x, weight, bias],
            Lambda::<S>::new(move |g, inp, _| {
                let xv = inp[0].view().into_dimensionality::<Ix4>().unwrap();
                let wv = inp[1].view().into_dimensionality::<Ix4>().unwrap();
                let g4 = g.view().into_dimensionality::<Ix4>().unwrap();
                let (n, cin) = (xv.shape()[0], xv.shape()[1]);
                let (cout, k) = (wv.shape()[0], wv.shape()[2]);
                let (oh, ow) = (g4.shape()[2], g4.shape()[3]);
                let wmat = wv
                    .to_shape((cout, cin * k * k))
                    .unwrap()
                    .as_standard_layout()
                    .to_owned();
                let mut gw = Array2::<S>::zeros((cout, cin * k * k));
                let mut gx = Array4::<S>::zeros(xv.raw_dim());
                let mut gb = ndarray::Array1::<S>::zeros(cout);
                for ni in 0..n {
                    // im2col is recomputed here rather than cached from the
                    // forward pass to keep activation memory flat.
                    let (cols, _, _) = im2col(xv.index_axis(Axis(0), ni), k, stride, pad);
                    let gmat = g4
                        .index_axis(Axis(0), ni)
                        .to_shape((cout, oh * ow))
                        .unwrap()
                        .as_standard_layout()
                        .to_owned();
                    gw = gw + gmat.dot(&cols.t());
                    let gcols = wmat.t().dot(&gmat);
                    col2im(
                        &gcols,
                        gx.index_axis_mut(Axis(0), ni),
                        k,
                        stride,
                        pad,
                        oh,
                        ow,
                    );
                    gb = gb + gmat.sum_axis(Axis(1));
                }
                let gw4 = gw
                    .into_shape_with_order((cout, cin, k, k))
                    .unwrap()
                    .into_dyn();
                vec![gx.into_dyn(), gw4, gb.into_dyn()]
            }),
        )
    }

    /// Fully-connected layer: `x [n, fin] x w [fin, fout] + b [fout]`.
    pub fn linear(&mut self, x: Var, weight: Var, bias: Var) -> Var {
        let y = self.matmul(x, weight);
        self.add_bias_row(y, bias)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;

    #[test]
    fn im2col_col2im_adjoint() {
        // <im2col(x), c> == <x, col2im(c)> for random x, c.
        let mut rng = 17_u64;
        let mut next = || {
            rng = rng.wrapping_mul(6364136223846793005).wrapping_add(1);
            ((rng >> 33) as f64 / (1u64 << 31) as f64) - 0.5
        };
        let x = Array3::from_shape_fn((2, 5, 5), |_| next());
        let (cols, oh, ow) = im2col(x.view(), 3, 2, 1);
        let c = Array2::from_shape_fn(cols.raw_dim(), |_| next());
        let lhs: f64 = (&cols * &c).sum();
        let mut adj = Array3::<f64>::zeros((2, 5, 5));
        col2im(&c, adj.view_mut(), 3, 2, 1, oh, ow);
        let rhs: f64 = (&x * &adj).sum();
        assert!((lhs - rhs).abs() < 1e-12, "{lhs} vs {rhs}");
    }
}
