//! Named parameter storage shared by every reward model.

use numcore::{Gradients, NumError, Rng, Tape, Tensor, Var};
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
}

/// Ordered list of named tensors. Order is the layout order of the owning model
/// and is what the optimizer, checkpoints and gradient checks iterate over.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamStore {
    entries: Vec<Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        debug_assert!(self.find(&name).is_none(), "duplicate parameter {name}");
        self.entries.push(Param { name, value });
        ParamId(self.entries.len() - 1)
    }

    /// `fan_in`-scaled Gaussian weight `[fan_in, fan_out]`.
    pub fn add_weight(
        &mut self,
        name: impl Into<String>,
        fan_in: usize,
        fan_out: usize,
        rng: &mut Rng,
    ) -> ParamId {
        let std = 1.0 / (fan_in as f64).sqrt();
        self.add(name, Tensor::randn([fan_in, fan_out], std, rng))
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].value
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries
            .iter()
            .position(|p| p.name == name)
            .map(ParamId)
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor> {
        self.find(name).map(|id| self.get(id))
    }

    pub fn by_name_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.find(name).map(|id| self.get_mut(id))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.entries.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.entries.iter_mut()
    }

    /// Total number of scalars.
    pub fn numel(&self) -> usize {
        self.entries.iter().map(|p| p.value.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.entries.iter().all(|p| p.value.is_finite())
    }

    /// All values concatenated in layout order.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.numel());
        for p in &self.entries {
            out.extend_from_slice(p.value.data());
        }
        out
    }

    pub fn assign_flat(&mut self, flat: &[f64]) {
        assert_eq!(flat.len(), self.numel(), "flat parameter length");
        let mut off = 0;
        for p in &mut self.entries {
            let n = p.value.len();
            p.value.data_mut().copy_from_slice(&flat[off..off + n]);
            off += n;
        }
    }

    /// Records every parameter on `tape`, tracked when `track` is set.
    pub fn bind(&self, tape: &mut Tape, track: bool) -> Result<Bound, NumError> {
        let vars = self
            .entries
            .iter()
            .map(|p| {
                if track {
                    tape.leaf(p.value.clone())
                } else {
                    tape.constant(p.value.clone())
                }
            })
            .collect::<Result<_, _>>()?;
        Ok(Bound { vars })
    }

    /// Same names and shapes in the same order.
    pub fn same_layout(&self, other: &ParamStore) -> bool {
        self.entries.len() == other.entries.len()
            && self
                .entries
                .iter()
                .zip(&other.entries)
                .all(|(a, b)| a.name == b.name && a.value.shape() == b.value.shape())
    }
}

/// Tape handles for a [`ParamStore`], one per parameter.
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    /// Gradients in store order, zeros for parameters the output ignores.
    pub fn gradients(&self, grads: &Gradients, store: &ParamStore) -> Vec<Tensor> {
        self.vars
            .iter()
            .zip(store.iter())
            .map(|(&v, p)| grads.get_or_zeros(v, p.value.shape()))
            .collect()
    }
}
