use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{AutodiffError, Result};
use crate::graph::{Gradients, Graph, Var};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub struct ParamEntry<T> {
    pub name: String,
    pub value: Tensor<T>,
    /// Running statistics are stored alongside weights but never updated by
    /// the optimizer.
    pub trainable: bool,
}

/// Named parameter storage shared by every forward pass of a model.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    entries: Vec<ParamEntry<T>>,
    by_name: HashMap<String, ParamId>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            entries: Vec::new(),
            by_name: HashMap::new(),
        }
    }

    pub fn add(
        &mut self,
        name: impl Into<String>,
        value: Tensor<T>,
        trainable: bool,
    ) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(AutodiffError::Usage(format!(
                "duplicate parameter name `{name}`"
            )));
        }
        let id = ParamId(self.entries.len());
        self.by_name.insert(name.clone(), id);
        self.entries.push(ParamEntry {
            name,
            value,
            trainable,
        });
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.entries[id.0].value
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry<T> {
        &self.entries[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &ParamEntry<T>)> {
        self.entries
            .iter()
            .enumerate()
            .map(|(i, e)| (ParamId(i), e))
    }

    /// Number of trainable scalars.
    pub fn trainable_count(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| e.trainable)
            .map(|e| e.value.len())
            .sum()
    }

    /// Order-sensitive FNV-1a hash over names, shapes and the bit patterns of
    /// every value.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut feed = |bytes: &[u8]| {
            for &b in bytes {
                h ^= b as u64;
                h = h.wrapping_mul(0x0000_0100_0000_01b3);
            }
        };
        for e in &self.entries {
            feed(e.name.as_bytes());
            for &d in e.value.shape() {
                feed(&(d as u64).to_le_bytes());
            }
            for v in e.value.data() {
                feed(&v.as_f64().to_bits().to_le_bytes());
            }
        }
        h
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|e| ParamEntry {
                    name: e.name.clone(),
                    value: e.value.cast(),
                    trainable: e.trainable,
                })
                .collect(),
            by_name: self.by_name.clone(),
        }
    }

    /// Overwrites values by name. Every stored parameter must be present with
    /// a matching shape.
    pub fn load_named(&mut self, named: &[(String, Tensor<T>)]) -> Result<()> {
        let lookup: HashMap<&str, &Tensor<T>> =
            named.iter().map(|(n, t)| (n.as_str(), t)).collect();
        for e in &mut self.entries {
            let t = lookup
                .get(e.name.as_str())
                .ok_or_else(|| AutodiffError::Format {
                    field: "name",
                    detail: format!("checkpoint is missing parameter `{}`", e.name),
                })?;
            if t.shape() != e.value.shape() {
                return Err(AutodiffError::Format {
                    field: "dims",
                    detail: format!(
                        "parameter `{}` has shape {:?} in checkpoint, model expects {:?}",
                        e.name,
                        t.shape(),
                        e.value.shape()
                    ),
                });
            }
            e.value = (*t).clone();
        }
        Ok(())
    }

    pub fn named(&self) -> Vec<(String, Tensor<T>)> {
        self.entries
            .iter()
            .map(|e| (e.name.clone(), e.value.clone()))
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

/// One forward pass: a fresh graph bound to a parameter store.
///
/// Each parameter is inserted into the graph at most once, so every use of
/// it (for instance both branches of a siamese pair) shares one leaf and
/// their gradients sum.
pub struct Session<'s, T: Scalar> {
    pub graph: Graph<T>,
    store: &'s mut ParamStore<T>,
    bound: Vec<Option<Var>>,
    mode: Mode,
    rng: ChaCha8Rng,
}

impl<'s, T: Scalar> Session<'s, T> {
    pub fn new(store: &'s mut ParamStore<T>, mode: Mode, seed: u64) -> Self {
        let n = store.len();
        Self {
            graph: Graph::new(),
            store,
            bound: vec![None; n],
            mode,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }

    pub fn store(&self) -> &ParamStore<T> {
        self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore<T> {
        self.store
    }

    /// Graph handle for a parameter. Trainable parameters become gradient
    /// leaves in training mode; everything else is a constant.
    pub fn param(&mut self, id: ParamId) -> Result<Var> {
        if let Some(v) = self.bound[id.0] {
            return Ok(v);
        }
        let entry = &self.store.entries[id.0];
        let value = entry.value.clone();
        let v = if entry.trainable && self.mode == Mode::Train {
            self.graph.leaf(value)?
        } else {
            self.graph.constant(value)?
        };
        self.bound[id.0] = Some(v);
        Ok(v)
    }

    pub fn input(&mut self, value: Tensor<T>) -> Result<Var> {
        self.graph.constant(value)
    }

    /// Runs the backward sweep and returns one gradient slot per parameter.
    pub fn backward(self, loss: Var) -> Result<ParamGrads<T>> {
        let mut grads: Gradients<T> = self.graph.backward(loss)?;
        let per_param = self
            .bound
            .iter()
            .map(|b| b.and_then(|v| grads.take(v)))
            .collect();
        Ok(ParamGrads { grads: per_param })
    }
}

/// Gradients indexed by [`ParamId`]; `None` for parameters the loss did not
/// touch or that are not trainable.
#[derive(Clone, Debug)]
pub struct ParamGrads<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> ParamGrads<T> {
    pub fn get(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }
}
