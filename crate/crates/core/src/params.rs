//! Named parameter tensors.
//!
//! Values are kept representable in `f32` (the checkpoint precision): every
//! write through [`ParamStore::add`] or [`ParamStore::round_to_storage`]
//! rounds, so save/load is bit-exact while arithmetic stays in `f64`.

use std::collections::HashMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::graph::{Graph, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Register a tensor under a unique name.
    pub fn add(&mut self, name: impl Into<String>, mut tensor: Tensor) -> ParamId {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter name {name}");
        round_f32(tensor.data_mut());
        self.index.insert(name.clone(), self.names.len());
        self.names.push(name);
        self.tensors.push(tensor);
        ParamId(self.names.len() - 1)
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

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    /// Total element count over all parameters.
    pub fn count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Element count over parameters whose name starts with `prefix`.
    pub fn count_prefix(&self, prefix: &str) -> usize {
        self.iter().filter(|(n, _)| n.starts_with(prefix)).map(|(_, t)| t.len()).sum()
    }

    pub fn round_to_storage(&mut self) {
        for t in &mut self.tensors {
            round_f32(t.data_mut());
        }
    }

    /// Place every parameter on the tape; `trainable(name)` decides whether
    /// its gradient is tracked.
    pub fn bind_with(&self, g: &mut Graph, trainable: impl Fn(&str) -> bool) -> Bound {
        let vars = self
            .names
            .iter()
            .zip(&self.tensors)
            .map(|(n, t)| if trainable(n) { g.input(t.clone()) } else { g.constant(t.clone()) })
            .collect();
        Bound { vars }
    }

    pub fn bind(&self, g: &mut Graph) -> Bound {
        self.bind_with(g, |_| true)
    }

    /// Bind as constants (inference).
    pub fn bind_frozen(&self, g: &mut Graph) -> Bound {
        self.bind_with(g, |_| false)
    }
}

fn round_f32(data: &mut [f64]) {
    for v in data {
        *v = *v as f32 as f64;
    }
}

/// Parameters placed on one tape.
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    #[cfg(test)]
    /// Bind pre-built vars, one per parameter in store order.
    pub(crate) fn from_vars(vars: Vec<Var>) -> Self {
        Self { vars }
    }

    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

#[derive(Clone, Copy, Debug)]
pub enum Init {
    Zeros,
    Ones,
    Normal(f64),
    /// Normal truncated to ±2 std by resampling.
    TruncNormal(f64),
    /// He initialization for a leaky-ReLU with the given negative slope.
    Kaiming { fan_in: usize, slope: f64 },
}

impl Init {
    pub fn sample(self, shape: Vec<usize>, rng: &mut impl Rng) -> Tensor {
        let n: usize = shape.iter().product();
        let data = match self {
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
            Init::Normal(std) => {
                let dist = Normal::new(0.0, std).expect("valid std");
                (0..n).map(|_| dist.sample(rng)).collect()
            }
            Init::TruncNormal(std) => {
                let dist = Normal::new(0.0, std).expect("valid std");
                (0..n)
                    .map(|_| loop {
                        let v: f64 = dist.sample(rng);
                        if v.abs() <= 2.0 * std {
                            break v;
                        }
                    })
                    .collect()
            }
            Init::Kaiming { fan_in, slope } => {
                let std = (2.0 / ((1.0 + slope * slope) * fan_in as f64)).sqrt();
                let dist = Normal::new(0.0, std).expect("valid std");
                (0..n).map(|_| dist.sample(rng)).collect()
            }
        };
        Tensor::new(shape, data)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn values_are_f32_representable() {
        let mut s = ParamStore::new();
        let id = s.add("w", Tensor::new(vec![2], vec![0.1, 1.0 / 3.0]));
        for &v in s.get(id).data() {
            assert_eq!(v, v as f32 as f64);
        }
        s.get_mut(id).data_mut()[0] = 0.123456789123;
        s.round_to_storage();
        assert_eq!(s.get(id).data()[0], 0.123456789123f32 as f64);
    }

    #[test]
    fn counting_and_lookup() {
        let mut s = ParamStore::new();
        assert_eq!(s.count(), 0);
        s.add("a.w", Tensor::zeros(vec![3, 4]));
        s.add("a.b", Tensor::zeros(vec![3]));
        s.add("c.w", Tensor::zeros(vec![5]));
        assert_eq!(s.count(), 20);
        assert_eq!(s.count_prefix("a."), 15);
        assert_eq!(s.by_name("c.w").unwrap().len(), 5);
        assert!(s.id("missing").is_none());
    }

    #[test]
    fn truncated_normal_respects_bound() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let t = Init::TruncNormal(0.02).sample(vec![1000], &mut rng);
        assert!(t.data().iter().all(|v| v.abs() <= 0.04));
    }
}
