//! Dense tensors with reverse-mode automatic differentiation, the Adam
//! update rule, and global-norm gradient clipping.

mod adam;
mod kernels;
mod tape;

pub use adam::{adam_step, clip_global_norm, global_norm, AdamState};
pub use tape::{Gradients, Tape, TensorId};

/// Scalar type for all numeric work. 64-bit by default; the `f32` feature
/// trades gradient-check headroom for speed.
#[cfg(not(feature = "f32"))]
pub type Real = f64;
#[cfg(feature = "f32")]
pub type Real = f32;

use crate::error::{Error, Result};

/// A dense n-dimensional array in row-major order.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<Real>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<Real>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::InvalidArgument(format!(
                "tensor shape {:?} implies {} elements, got {}",
                shape,
                numel,
                data.len()
            )));
        }
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::InvalidArgument(format!(
                "tensor shape {:?} has a zero dimension",
                shape
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; numel],
        }
    }

    pub fn full(shape: Vec<usize>, value: Real) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape,
            data: vec![value; numel],
        }
    }

    pub fn scalar(value: Real) -> Self {
        Tensor {
            shape: vec![],
            data: vec![value],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[Real] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [Real] {
        &mut self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn into_data(self) -> Vec<Real> {
        self.data
    }

    /// Value of a rank-0 or single-element tensor.
    pub fn item(&self) -> Real {
        debug_assert_eq!(self.numel(), 1);
        self.data[0]
    }
}

/// Identifies a parameter inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(&self) -> usize {
        self.0
    }
}

struct ParamEntry {
    name: String,
    value: Tensor,
    /// Whether the Adam step updates this entry. Batch-norm running
    /// statistics live in the store but are not trainable.
    trainable: bool,
}

/// Named parameter tensors in a stable registration order.
#[derive(Default)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        self.register_with(name, value, true)
    }

    pub fn register_buffer(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        self.register_with(name, value, false)
    }

    fn register_with(&mut self, name: impl Into<String>, value: Tensor, trainable: bool) -> ParamId {
        let name = name.into();
        debug_assert!(
            !self.entries.iter().any(|e| e.name == name),
            "duplicate parameter name {name}"
        );
        self.entries.push(ParamEntry {
            name,
            value,
            trainable,
        });
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].value
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.entries[id.0].trainable
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn lookup(&self, name: &str) -> Option<ParamId> {
        self.entries
            .iter()
            .position(|e| e.name == name)
            .map(ParamId)
    }

    /// Total number of scalars across all trainable entries.
    pub fn scalar_count(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| e.trainable)
            .map(|e| e.value.numel())
            .sum()
    }

    /// Put every parameter on a fresh tape (trainable ones with gradients
    /// enabled) and return the tape ids aligned with [`ParamId`] order.
    pub fn bind(&self, tape: &mut Tape) -> Result<ParamBinding> {
        let mut ids = Vec::with_capacity(self.entries.len());
        for e in &self.entries {
            ids.push(tape.leaf(e.value.clone(), e.trainable)?);
        }
        Ok(ParamBinding { ids })
    }
}

/// Tape ids for one [`ParamStore::bind`] call.
pub struct ParamBinding {
    ids: Vec<TensorId>,
}

impl ParamBinding {
    pub fn id(&self, p: ParamId) -> TensorId {
        self.ids[p.0]
    }

    /// Collect gradients for every store entry, in store order. Trainable
    /// entries always yield a buffer (zeros when unreachable from the
    /// loss); non-trainable entries yield `None`.
    pub fn collect_grads(&self, store: &ParamStore, grads: &Gradients) -> Vec<Option<Vec<Real>>> {
        self.ids
            .iter()
            .enumerate()
            .map(|(i, &tid)| {
                if store.is_trainable(ParamId(i)) {
                    Some(
                        grads
                            .get(tid)
                            .map(|g| g.to_vec())
                            .unwrap_or_else(|| vec![0.0; store.value(ParamId(i)).numel()]),
                    )
                } else {
                    None
                }
            })
            .collect()
    }
}
