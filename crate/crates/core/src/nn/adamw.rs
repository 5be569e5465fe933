//! Decoupled-weight-decay Adam.

use super::{ParamId, ParamStore};
use crate::tensor::{Gradients, Scalar, Var};
use ndarray::ArrayD;

#[derive(Debug, Clone, Copy)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-2,
        }
    }
}

pub struct AdamW<S: Scalar> {
    cfg: AdamWConfig,
    step: u64,
    m: Vec<Option<ArrayD<S>>>,
    v: Vec<Option<ArrayD<S>>>,
}

impl<S: Scalar> AdamW<S> {
    pub fn new(cfg: AdamWConfig, store: &ParamStore<S>) -> Self {
        AdamW {
            cfg,
            step: 0,
            m: vec![None; store.len()],
            v: vec![None; store.len()],
        }
    }

    pub fn config(&self) -> AdamWConfig {
        self.cfg
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.cfg.lr = lr;
    }

    /// Export the optimizer state as a parameter store so checkpoints can
    /// persist it alongside the model weights. Moments are keyed by the
    /// parameter names of `params`.
    pub fn state_store(&self, params: &ParamStore<S>) -> ParamStore<S> {
        let mut out = ParamStore::new();
        out.add(
            "step",
            ArrayD::from_elem(ndarray::IxDyn(&[1]), S::lit(self.step as f64)),
        );
        for (id, name, value) in params.iter() {
            let m = self.m[id.0].clone().unwrap_or_else(|| ArrayD::zeros(value.raw_dim()));
            let v = self.v[id.0].clone().unwrap_or_else(|| ArrayD::zeros(value.raw_dim()));
            out.add(format!("m.{name}"), m);
            out.add(format!("v.{name}"), v);
        }
        out
    }

    /// Restore state previously exported with [`AdamW::state_store`]. Any
    /// moment missing from `state` stays at zero.
    pub fn load_state(&mut self, params: &ParamStore<S>, state: &ParamStore<S>) {
        if let Some(id) = state.id_of("step") {
            self.step = state.get(id)[[0]].to_f64v() as u64;
        }
        for (id, name, _) in params.iter() {
            if let Some(mid) = state.id_of(&format!("m.{name}")) {
                self.m[id.0] = Some(state.get(mid).clone());
            }
            if let Some(vid) = state.id_of(&format!("v.{name}")) {
                self.v[id.0] = Some(state.get(vid).clone());
            }
        }
    }

    /// Apply one update given the bindings of the finished forward pass.
    pub fn step(
        &mut self,
        store: &mut ParamStore<S>,
        grads: &mut Gradients<S>,
        bindings: &[(ParamId, Var)],
    ) {
        self.step += 1;
        let t = self.step as f64;
        let bc1 = 1.0 - self.cfg.beta1.powf(t);
        let bc2 = 1.0 - self.cfg.beta2.powf(t);
        let (b1, b2) = (S::lit(self.cfg.beta1), S::lit(self.cfg.beta2));
        let one_m_b1 = S::lit(1.0 - self.cfg.beta1);
        let one_m_b2 = S::lit(1.0 - self.cfg.beta2);
        let eps = S::lit(self.cfg.eps);
        let lr = S::lit(self.cfg.lr);
        let decay = S::lit(self.cfg.lr * self.cfg.weight_decay);
        let (c1, c2) = (S::lit(1.0 / bc1), S::lit(1.0 / bc2));
        for &(pid, var) in bindings {
            let Some(g) = grads.take(var) else { continue };
            let m = self.m[pid.0].get_or_insert_with(|| ArrayD::zeros(g.raw_dim()));
            let v = self.v[pid.0].get_or_insert_with(|| ArrayD::zeros(g.raw_dim()));
            m.zip_mut_with(&g, |mi, &gi| *mi = b1 * *mi + one_m_b1 * gi);
            v.zip_mut_with(&g, |vi, &gi| *vi = b2 * *vi + one_m_b2 * gi * gi);
            let p = store.get_mut(pid);
            ndarray::Zip::from(&mut *p).and(&*m).and(&*v).for_each(|pi, &mi, &vi| {
                let mhat = mi * c1;
                let vhat = vi * c2;
                *pi = *pi - lr * mhat / (vhat.sqrt() + eps) - decay * *pi;
            });
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Fwd;
    use crate::tensor::Tape;
    use ndarray::IxDyn;

    #[test]
    fn adamw_descends_quadratic() {
        // minimize (x - 3)^2 from x = 0
        let mut store = ParamStore::<f64>::new();
        let x = store.add("x", ArrayD::from_elem(IxDyn(&[1]), 0.0));
        let mut opt = AdamW::new(
            AdamWConfig {
                lr: 0.1,
                weight_decay: 0.0,
                ..Default::default()
            },
            &store,
        );
        for _ in 0..200 {
            let mut f = Fwd::new(&store, true);
            let xv = f.p(x);
            let t = f.tape.add_scalar(xv, -3.0);
            let sq = f.tape.square(t);
            let loss = f.tape.sum_all(sq);
            let mut grads = f.tape.backward(loss);
            let bindings = f.bindings();
            drop(f);
            opt.step(&mut store, &mut grads, &bindings);
        }
        let xf = store.get(x)[[0]];
        assert!((xf - 3.0).abs() < 1e-2, "got {xf}");
    }

    #[test]
    fn state_roundtrip_resumes_bit_identically() {
        let run = |split: Option<usize>| -> f64 {
            let mut store = ParamStore::<f64>::new();
            let x = store.add("x", ArrayD::from_elem(IxDyn(&[1]), 0.0));
            let cfg = AdamWConfig { lr: 0.1, ..Default::default() };
            let mut opt = AdamW::new(cfg, &store);
            for step in 0..20 {
                if split == Some(step) {
                    // serialize and restore mid-run
                    let state = opt.state_store(&store);
                    let mut fresh = AdamW::new(cfg, &store);
                    fresh.load_state(&store, &state);
                    opt = fresh;
                }
                let mut f = Fwd::new(&store, true);
                let xv = f.p(x);
                let t = f.tape.add_scalar(xv, -3.0);
                let sq = f.tape.square(t);
                let loss = f.tape.sum_all(sq);
                let mut grads = f.tape.backward(loss);
                let bindings = f.bindings();
                drop(f);
                opt.step(&mut store, &mut grads, &bindings);
            }
            store.get(x)[[0]]
        };
        let straight = run(None);
        for split in [1, 7, 19] {
            assert_eq!(straight.to_bits(), run(Some(split)).to_bits());
        }
    }

    #[test]
    fn first_step_magnitude_is_lr() {
        // with zero state, |update| ~= lr regardless of gradient scale
        let mut store = ParamStore::<f64>::new();
        let x = store.add("x", ArrayD::from_elem(IxDyn(&[1]), 1.0));
        let mut opt = AdamW::new(
            AdamWConfig {
                lr: 0.05,
                weight_decay: 0.0,
                ..Default::default()
            },
            &store,
        );
        let mut tape = Tape::<f64>::new();
        let xv = tape.leaf(store.get(x).clone());
        let s = tape.scale(xv, 40.0);
        let loss = tape.sum_all(s);
        let mut grads = tape.backward(loss);
        opt.step(&mut store, &mut grads, &[(x, xv)]);
        let moved = (store.get(x)[[0]] - 1.0).abs();
        assert!((moved - 0.05).abs() < 1e-3, "moved {moved}");
    }
}
