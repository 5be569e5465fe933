//! Neural-network building blocks on top of the [`crate::tensor`] tape:
//! a named parameter store, layer primitives, the AdamW optimizer and
//! checkpoint serialization with content hashing.

mod adamw;
mod io;
mod layers;

pub use adamw::{AdamW, AdamWConfig};
pub use io::{load_params, params_hash, save_params, IoError};
pub use layers::{Conv2d, CrossAttention, GroupNorm, Linear};

use crate::tensor::{Scalar, Tape, Var};
use ndarray::ArrayD;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

/// Index of a parameter inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(pub(crate) usize);

/// Flat collection of named, trainable tensors.
pub struct ParamStore<S: Scalar> {
    names: Vec<String>,
    values: Vec<ArrayD<S>>,
}

impl<S: Scalar> Default for ParamStore<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> ParamStore<S> {
    pub fn new() -> Self {
        ParamStore {
            names: Vec::new(),
            values: Vec::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: ArrayD<S>) -> ParamId {
        let name = name.into();
        assert!(
            !self.names.contains(&name),
            "duplicate parameter name {name}"
        );
        self.names.push(name);
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    pub fn get(&self, id: ParamId) -> &ArrayD<S> {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut ArrayD<S> {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &ArrayD<S>)> {
        self.values
            .iter()
            .enumerate()
            .map(|(i, v)| (ParamId(i), self.names[i].as_str(), v))
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }
}

/// One forward pass: a tape plus lazy bindings of store parameters to
/// tape variables. When `trainable` is false the parameters enter the
/// graph as constants, so no gradient flows into them (frozen encoders).
pub struct Fwd<'a, S: Scalar> {
    pub tape: Tape<S>,
    store: &'a ParamStore<S>,
    bound: Vec<Option<Var>>,
    trainable: bool,
}

impl<'a, S: Scalar> Fwd<'a, S> {
    pub fn new(store: &'a ParamStore<S>, trainable: bool) -> Self {
        Fwd {
            tape: Tape::new(),
            store,
            bound: vec![None; store.len()],
            trainable,
        }
    }

    /// Bind a parameter to the tape (at most once per pass).
    pub fn p(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let arr = self.store.get(id).clone();
        let var = if self.trainable {
            self.tape.leaf(arr)
        } else {
            self.tape.constant(arr)
        };
        self.bound[id.0] = Some(var);
        var
    }

    /// Parameter-to-variable bindings made during this pass.
    pub fn bindings(&self) -> Vec<(ParamId, Var)> {
        self.bound
            .iter()
            .enumerate()
            .filter_map(|(i, v)| v.map(|var| (ParamId(i), var)))
            .collect()
    }
}

/// Draw an `N(0, std^2)` tensor.
pub fn randn<S, R>(shape: &[usize], std: f64, rng: &mut R) -> ArrayD<S>
where
    S: Scalar,
    R: Rng,
    StandardNormal: Distribution<S>,
{
    let stds = S::lit(std);
    ArrayD::from_shape_simple_fn(ndarray::IxDyn(shape), || {
        let z: S = StandardNormal.sample(rng);
        z * stds
    })
}
