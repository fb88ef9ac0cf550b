use serde::{Deserialize, Serialize};

use super::{NumericError, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// A named learnable tensor.
///
/// `frozen_rows` lists rows of a 2-D parameter that never receive updates
/// (the padding row of an embedding table, for example).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub trainable: bool,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub frozen_rows: Vec<usize>,
}

/// Ordered collection of parameters addressed by name or [`ParamId`].
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamSet {
    params: Vec<Param>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        if let Some(id) = self.find(&name) {
            self.params[id.0].value = value;
            return id;
        }
        self.params.push(Param { name, value, trainable: true, frozen_rows: Vec::new() });
        ParamId(self.params.len() - 1)
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn id(&self, name: &str) -> Result<ParamId, NumericError> {
        self.find(name).ok_or_else(|| NumericError::MissingParam(name.to_string()))
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.params[id.0]
    }

    pub fn value(&self, name: &str) -> Result<&Tensor, NumericError> {
        Ok(&self.get(self.id(name)?).value)
    }

    pub fn value_mut(&mut self, name: &str) -> Result<&mut Tensor, NumericError> {
        let id = self.id(name)?;
        Ok(&mut self.get_mut(id).value)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    /// Mark every parameter whose name starts with `prefix`.
    pub fn set_trainable_prefix(&mut self, prefix: &str, trainable: bool) {
        for p in self.params.iter_mut().filter(|p| p.name.starts_with(prefix)) {
            p.trainable = trainable;
        }
    }

    /// Copy of the parameters whose names start with `prefix`.
    pub fn subset(&self, prefix: &str) -> ParamSet {
        ParamSet {
            params: self.params.iter().filter(|p| p.name.starts_with(prefix)).cloned().collect(),
        }
    }

    /// Insert or overwrite every parameter of `other`, keeping its flags.
    pub fn merge(&mut self, other: &ParamSet) {
        for p in &other.params {
            match self.find(&p.name) {
                Some(id) => self.params[id.0] = p.clone(),
                None => self.params.push(p.clone()),
            }
        }
    }

    pub fn total_len(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }
}

/// Dense gradient buffers aligned with a [`ParamSet`]; `None` means no
/// contribution was recorded.
#[derive(Clone, Debug, Default)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn empty(n_params: usize) -> Self {
        Self { grads: vec![None; n_params] }
    }

    pub fn get(&self, id: ParamId) -> Option<&[f64]> {
        self.grads.get(id.0).and_then(|g| g.as_deref())
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.iter().all(|g| g.is_none())
    }

    pub(crate) fn set(&mut self, id: ParamId, grad: Vec<f64>) {
        if self.grads.len() <= id.0 {
            self.grads.resize(id.0 + 1, None);
        }
        self.grads[id.0] = Some(grad);
    }

    /// Sum another gradient set into this one.
    pub fn accumulate(&mut self, other: &Gradients) {
        if self.grads.len() < other.grads.len() {
            self.grads.resize(other.grads.len(), None);
        }
        for (mine, theirs) in self.grads.iter_mut().zip(&other.grads) {
            if let Some(t) = theirs {
                match mine {
                    Some(m) => m.iter_mut().zip(t).for_each(|(a, b)| *a += b),
                    None => *mine = Some(t.clone()),
                }
            }
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for g in self.grads.iter_mut().flatten() {
            g.iter_mut().for_each(|v| *v *= factor);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.grads.iter().flatten().all(|g| g.iter().all(|v| v.is_finite()))
    }
}
