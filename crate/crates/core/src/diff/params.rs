//! Named trainable tensors with bias tags and gradient buffers.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use sha2::{Digest, Sha256};

use crate::error::{param_err, shape_err, Result};
use crate::real::Real;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamTensor<R> {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<R>,
    pub grad: Vec<R>,
    /// Additive offsets only: convolution/linear biases and normalization shifts.
    pub is_bias: bool,
    pub trainable: bool,
}

impl<R: Real> ParamTensor<R> {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Insertion-ordered parameter collection.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParameterStore<R> {
    params: Vec<ParamTensor<R>>,
    index: BTreeMap<String, usize>,
}

impl<R: Real> ParameterStore<R> {
    pub fn new() -> Self {
        Self {
            params: Vec::new(),
            index: BTreeMap::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, shape: &[usize], values: Vec<R>, is_bias: bool) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(param_err!("duplicate parameter name `{name}`"));
        }
        if shape.iter().product::<usize>() != values.len() {
            return Err(shape_err!(
                "parameter `{name}` has shape {:?} but {} values",
                shape,
                values.len()
            ));
        }
        let id = ParamId(self.params.len());
        self.index.insert(name.clone(), id.0);
        self.params.push(ParamTensor {
            name,
            shape: shape.to_vec(),
            grad: vec![R::ZERO; values.len()],
            values,
            is_bias,
            trainable: true,
        });
        Ok(id)
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn require(&self, name: &str) -> Result<ParamId> {
        self.id(name).ok_or_else(|| crate::Error::Unknown {
            kind: "parameter",
            name: name.into(),
        })
    }

    pub fn get(&self, id: ParamId) -> &ParamTensor<R> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut ParamTensor<R> {
        &mut self.params[id.0]
    }

    pub fn by_name(&self, name: &str) -> Option<&ParamTensor<R>> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn by_name_mut(&mut self, name: &str) -> Option<&mut ParamTensor<R>> {
        self.id(name).map(|id| &mut self.params[id.0])
    }

    pub fn iter(&self) -> impl Iterator<Item = &ParamTensor<R>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut ParamTensor<R>> {
        self.params.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn element_count(&self) -> usize {
        self.params.iter().map(|p| p.values.len()).sum()
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad.iter_mut().for_each(|g| *g = R::ZERO);
        }
    }

    pub fn set_all_trainable(&mut self, trainable: bool) {
        for p in &mut self.params {
            p.trainable = trainable;
        }
    }

    /// Marks exactly the tensors selected by `pred` as trainable.
    pub fn set_trainable_where(&mut self, pred: impl Fn(&ParamTensor<R>) -> bool) {
        for p in &mut self.params {
            p.trainable = pred(p);
        }
    }

    pub fn bias_names(&self) -> Vec<String> {
        self.params
            .iter()
            .filter(|p| p.is_bias)
            .map(|p| p.name.clone())
            .collect()
    }

    /// SHA-256 over name, shape and value bits of every tensor selected by `pred`.
    pub fn digest_where(&self, pred: impl Fn(&ParamTensor<R>) -> bool) -> [u8; 32] {
        let mut h = Sha256::new();
        for p in self.params.iter().filter(|p| pred(p)) {
            h.update((p.name.len() as u64).to_le_bytes());
            h.update(p.name.as_bytes());
            for d in &p.shape {
                h.update((*d as u64).to_le_bytes());
            }
            for v in &p.values {
                h.update(v.to_f64().to_bits().to_le_bytes());
            }
        }
        h.finalize().into()
    }

    pub fn digest_non_bias(&self) -> [u8; 32] {
        self.digest_where(|p| !p.is_bias)
    }

    pub fn digest_all(&self) -> [u8; 32] {
        self.digest_where(|_| true)
    }

    /// Copy with every value converted to `S` (gradients reset).
    pub fn cast<S: Real>(&self) -> ParameterStore<S> {
        ParameterStore {
            params: self
                .params
                .iter()
                .map(|p| ParamTensor {
                    name: p.name.clone(),
                    shape: p.shape.clone(),
                    values: p.values.iter().map(|v| S::from_f64(v.to_f64())).collect(),
                    grad: vec![S::ZERO; p.values.len()],
                    is_bias: p.is_bias,
                    trainable: p.trainable,
                })
                .collect(),
            index: self.index.clone(),
        }
    }

    pub fn first_non_finite_grad(&self) -> Option<(&str, usize, R)> {
        self.params.iter().find_map(|p| {
            p.grad
                .iter()
                .position(|g| !g.is_finite())
                .map(|i| (p.name.as_str(), i, p.grad[i]))
        })
    }
}
