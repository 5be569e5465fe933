use super::*;
use ndarray::{ArrayD, IxDyn};

fn lcg(seed: &mut u64) -> f64 {
    *seed = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
    ((*seed >> 33) as f64 / (1u64 << 31) as f64) - 0.5
}

fn rand_arr(shape: &[usize], seed: &mut u64) -> ArrayD<f64> {
    ArrayD::from_shape_fn(IxDyn(shape), |_| lcg(seed))
}

/// Compare analytic gradients against central finite differences for a
/// scalar-valued function of several tensor inputs.
fn check_grads(
    inputs: &[ArrayD<f64>],
    f: impl Fn(&mut Tape<f64>, &[Var]) -> Var,
    tol: f64,
) {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|a| tape.leaf(a.clone())).collect();
    let loss = f(&mut tape, &vars);
    let grads = tape.backward(loss);
    let h = 1e-5;
    for (i, arr) in inputs.iter().enumerate() {
        let analytic = grads.get(vars[i]).expect("leaf should get a gradient");
        for idx in 0..arr.len() {
            let mut plus = inputs.to_vec();
            plus[i].as_slice_mut().unwrap()[idx] += h;
            let mut minus = inputs.to_vec();
            minus[i].as_slice_mut().unwrap()[idx] -= h;
            let eval = |ins: &[ArrayD<f64>]| {
                let mut t = Tape::new();
                let vs: Vec<Var> = ins.iter().map(|a| t.leaf(a.clone())).collect();
                let l = f(&mut t, &vs);
                t.value(l)[[]]
            };
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * h);
            let a = analytic.as_slice().unwrap()[idx];
            let denom = a.abs().max(numeric.abs()).max(1e-6);
            assert!(
                (a - numeric).abs() / denom < tol,
                "input {i} coord {idx}: analytic {a} vs numeric {numeric}"
            );
        }
    }
}

#[test]
fn grad_elementwise_chain() {
    let mut seed = 3;
    let x = rand_arr(&[2, 3], &mut seed);
    let y = rand_arr(&[2, 3], &mut seed);
    check_grads(&[x, y], |t, v| {
        let a = t.mul(v[0], v[1]);
        let b = t.silu(a);
        let c = t.tanh(b);
        let d = t.square(c);
        let e = t.sub(d, v[0]);
        let f = t.exp(e);
        t.mean_all(f)
    }, 1e-5);
}

#[test]
fn grad_abs_scale_clamp() {
    let mut seed = 9;
    // keep values away from the kinks of |x| and clamp
    let x = rand_arr(&[3, 2], &mut seed).mapv(|v| v + 0.6 * v.signum());
    check_grads(&[x], |t, v| {
        let a = t.abs(v[0]);
        let b = t.scale(a, 1.7);
        let c = t.clamp(b, -0.9, 0.9);
        t.sum_all(c)
    }, 1e-5);
}

#[test]
fn grad_matmul_softmax() {
    let mut seed = 11;
    let a = rand_arr(&[3, 4], &mut seed);
    let b = rand_arr(&[4, 2], &mut seed);
    check_grads(&[a, b], |t, v| {
        let m = t.matmul(v[0], v[1]);
        let s = t.softmax_lastdim(m);
        let q = t.square(s);
        t.mean_all(q)
    }, 1e-5);
}

#[test]
fn grad_log_softmax_bmm() {
    let mut seed = 13;
    let a = rand_arr(&[2, 3, 4], &mut seed);
    let b = rand_arr(&[2, 4, 3], &mut seed);
    check_grads(&[a, b], |t, v| {
        let m = t.bmm(v[0], v[1]);
        let ls = t.log_softmax_lastdim(m);
        let sq = t.square(ls);
        t.mean_all(sq)
    }, 1e-5);
}

#[test]
fn grad_conv2d() {
    let mut seed = 29;
    let x = rand_arr(&[2, 3, 5, 5], &mut seed);
    let w = rand_arr(&[4, 3, 3, 3], &mut seed);
    let b = rand_arr(&[4], &mut seed);
    for stride in [1, 2] {
        check_grads(&[x.clone(), w.clone(), b.clone()], move |t, v| {
            let y = t.conv2d(v[0], v[1], v[2], stride, 1);
            let y2 = t.silu(y);
            t.mean_all(y2)
        }, 1e-4);
    }
}

#[test]
fn grad_group_norm() {
    let mut seed = 31;
    let x = rand_arr(&[2, 4, 3, 3], &mut seed);
    let gamma = rand_arr(&[4], &mut seed).mapv(|v| v + 1.0);
    let beta = rand_arr(&[4], &mut seed);
    check_grads(&[x, gamma, beta], |t, v| {
        let y = t.group_norm(v[0], v[1], v[2], 2, 1e-5);
        let y2 = t.square(y);
        t.mean_all(y2)
    }, 1e-4);
}

#[test]
fn grad_shape_ops() {
    let mut seed = 37;
    let x = rand_arr(&[2, 4, 2, 2], &mut seed);
    let b = rand_arr(&[4], &mut seed);
    check_grads(&[x, b], |t, v| {
        let u = t.upsample2(v[0]);
        let c = t.add_bias_chan(u, v[1]);
        let m = t.spatial_mean(c);
        let r = t.reshape(m, &[2, 2, 2]);
        let tr = t.transpose_last2(r);
        let sq = t.square(tr);
        t.sum_all(sq)
    }, 1e-5);
}

#[test]
fn grad_concat_slice_bias() {
    let mut seed = 41;
    let a = rand_arr(&[2, 2, 3, 3], &mut seed);
    let b = rand_arr(&[2, 3, 3, 3], &mut seed);
    let nc = rand_arr(&[2, 5], &mut seed);
    check_grads(&[a, b, nc], |t, v| {
        let cat = t.concat_axis1(&[v[0], v[1]]);
        let biased = t.add_bias_sample_chan(cat, v[2]);
        let sl = t.slice_axis1(biased, 1, 4);
        let sq = t.square(sl);
        t.mean_all(sq)
    }, 1e-5);
}

#[test]
fn grad_linear_bias_row() {
    let mut seed = 43;
    let x = rand_arr(&[3, 4], &mut seed);
    let w = rand_arr(&[4, 2], &mut seed);
    let b = rand_arr(&[2], &mut seed);
    check_grads(&[x, w, b], |t, v| {
        let y = t.linear(v[0], v[1], v[2]);
        let s = t.silu(y);
        t.mean_all(s)
    }, 1e-5);
}

#[test]
fn backward_accumulates_shared_parents() {
    // z = x*x + x  (x used twice): dz/dx = 2x + 1
    let mut tape = Tape::<f64>::new();
    let x = tape.leaf(ArrayD::from_elem(IxDyn(&[1]), 3.0));
    let sq = tape.mul(x, x);
    let z = tape.add(sq, x);
    let l = tape.sum_all(z);
    let grads = tape.backward(l);
    assert!((grads.get(x).unwrap()[[0]] - 7.0).abs() < 1e-12);
}

#[test]
fn constants_receive_no_gradient() {
    let mut tape = Tape::<f64>::new();
    let x = tape.leaf(ArrayD::from_elem(IxDyn(&[2]), 1.0));
    let c = tape.constant(ArrayD::from_elem(IxDyn(&[2]), 5.0));
    let y = tape.mul(x, c);
    let l = tape.sum_all(y);
    let grads = tape.backward(l);
    assert!(grads.get(c).is_none());
    assert_eq!(grads.get(x).unwrap()[[0]], 5.0);
}

#[test]
fn grad_l2_normalize_rows() {
    let mut seed = 41;
    let x = rand_arr(&[3, 5], &mut seed).mapv(|v| v + 0.3);
    let w = rand_arr(&[3, 5], &mut seed);
    check_grads(&[x, w], |t, v| {
        let n = t.l2_normalize_rows(v[0]);
        let p = t.mul(n, v[1]);
        t.sum_all(p)
    }, 1e-5);
}

#[test]
fn l2_normalize_rows_produces_unit_rows() {
    let mut seed = 43;
    let x = rand_arr(&[4, 8], &mut seed);
    let mut tape = Tape::<f64>::new();
    let v = tape.leaf(x);
    let n = tape.l2_normalize_rows(v);
    for row in tape.value(n).view().into_dimensionality::<ndarray::Ix2>().unwrap().outer_iter() {
        let norm: f64 = row.iter().map(|&v| v * v).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() < 1e-12);
    }
}

#[test]
fn grad_broadcast_axis0() {
    let mut seed = 47;
    let x = rand_arr(&[2, 3], &mut seed);
    let w = rand_arr(&[4, 2, 3], &mut seed);
    check_grads(&[x, w], |t, v| {
        let b = t.broadcast_axis0(v[0], 4);
        let p = t.mul(b, v[1]);
        t.sum_all(p)
    }, 1e-5);
}
