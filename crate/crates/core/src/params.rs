//! Named parameter storage and the small layer descriptors built on it.

use std::collections::HashMap;

use rand::Rng;

use crate::tensor::{Activation, LayerRef, Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Ordered, named collection of trainable tensors.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter name {name}");
        self.index.insert(name.clone(), self.names.len());
        self.names.push(name);
        self.tensors.push(value);
        ParamId(self.tensors.len() - 1)
    }

    /// Weight `[fan_in × fan_out]` drawn from U(±sqrt(6 / (fan_in + fan_out))).
    pub fn add_xavier(&mut self, name: impl Into<String>, fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> ParamId {
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let data = (0..fan_in * fan_out).map(|_| rng.random_range(-bound..bound)).collect();
        self.add(name, Tensor::new(&[fan_in, fan_out], data).expect("weight shape"))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    /// Total scalar count.
    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    /// Registers every parameter on `tape` as a gradient-tracked leaf.
    pub fn bind(&self, tape: &mut Tape) -> Bound {
        Bound(self.tensors.iter().map(|t| tape.param(t.clone())).collect())
    }

    /// Registers every parameter as a constant (inference only).
    pub fn bind_frozen(&self, tape: &mut Tape) -> Bound {
        Bound(self.tensors.iter().map(|t| tape.constant(t.clone())).collect())
    }

    /// Concatenation of all parameters in registration order.
    pub fn flatten(&self) -> Vec<f64> {
        self.tensors.iter().flat_map(|t| t.data().iter().copied()).collect()
    }

    /// Exposes a flat vector leaf as parameter views (for gradient checks).
    pub fn bind_flat(&self, tape: &mut Tape, flat: Var) -> crate::tensor::Result<Bound> {
        let mut offset = 0;
        let mut vars = Vec::with_capacity(self.len());
        for t in &self.tensors {
            vars.push(tape.slice_flat(flat, offset, t.shape())?);
            offset += t.len();
        }
        Ok(Bound(vars))
    }

    /// Rounds every value through `f32`, the checkpoint storage precision.
    pub fn round_to_f32(&mut self) {
        for t in &mut self.tensors {
            for v in t.data_mut() {
                *v = f64::from(*v as f32);
            }
        }
    }
}

/// Tape handles for every parameter of a [`ParamStore`], indexed by [`ParamId`].
#[derive(Debug, Clone)]
pub struct Bound(Vec<Var>);

impl Bound {
    pub fn var(&self, id: ParamId) -> Var {
        self.0[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new(store: &mut ParamStore, prefix: &str, fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Self {
        let weight = store.add_xavier(format!("{prefix}.weight"), fan_in, fan_out, rng);
        let bias = store.add(format!("{prefix}.bias"), Tensor::zeros(&[fan_out]));
        Self { weight, bias }
    }

    pub fn dims(&self, store: &ParamStore) -> (usize, usize) {
        store.get(self.weight).dims2().expect("rank-2 weight")
    }
}

/// Stack of affine layers with per-layer activations.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub layers: Vec<(Linear, Activation)>,
}

impl Mlp {
    /// `widths = [in, h1, ..., out]`; hidden layers use `hidden`, the last
    /// uses `output`.
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        widths: &[usize],
        hidden: Activation,
        output: Activation,
        rng: &mut impl Rng,
    ) -> Self {
        assert!(widths.len() >= 2, "an MLP needs input and output widths");
        let n = widths.len() - 1;
        let layers = (0..n)
            .map(|i| {
                let lin = Linear::new(store, &format!("{prefix}.{i}"), widths[i], widths[i + 1], rng);
                (lin, if i + 1 == n { output } else { hidden })
            })
            .collect();
        Self { layers }
    }

    pub fn bind(&self, bound: &Bound) -> Vec<LayerRef> {
        self.layers
            .iter()
            .map(|(l, act)| LayerRef {
                weight: bound.var(l.weight),
                bias: bound.var(l.bias),
                activation: *act,
            })
            .collect()
    }

    pub fn param_count(&self, store: &ParamStore) -> usize {
        self.layers
            .iter()
            .map(|(l, _)| store.get(l.weight).len() + store.get(l.bias).len())
            .sum()
    }

    /// Multiply-adds counted as 2 FLOPs per weight, per input row.
    pub fn flops_per_row(&self, store: &ParamStore) -> usize {
        self.layers.iter().map(|(l, _)| 2 * store.get(l.weight).len()).sum()
    }

    pub fn in_dim(&self, store: &ParamStore) -> usize {
        self.layers[0].0.dims(store).0
    }

    pub fn out_dim(&self, store: &ParamStore) -> usize {
        self.layers.last().unwrap().0.dims(store).1
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn mlp_4_to_8_has_40_parameters() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mlp = Mlp::new(&mut store, "m", &[4, 8], Activation::Relu, Activation::Identity, &mut rng);
        assert_eq!(mlp.param_count(&store), 40);
        assert_eq!(store.numel(), 40);
    }

    #[test]
    fn xavier_bounds_and_zero_bias() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let l = Linear::new(&mut store, "l", 10, 6, &mut rng);
        let bound = (6.0f64 / 16.0).sqrt();
        assert!(store.get(l.weight).data().iter().all(|v| v.abs() <= bound));
        assert!(store.get(l.bias).data().iter().all(|&v| v == 0.0));
        assert_eq!(store.name(l.weight), "l.weight");
        assert_eq!(store.id("l.bias"), Some(l.bias));
    }
}
