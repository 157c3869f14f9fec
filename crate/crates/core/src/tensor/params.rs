use std::collections::HashMap;

use super::{Result, Tensor, TensorError};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A named learnable tensor, or a non-trainable buffer when `requires_grad`
/// is false (batchnorm running statistics live here too).
#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub grad: Option<Tensor>,
    pub requires_grad: bool,
}

/// Ordered collection of parameters addressed by id or by name.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Param>,
    by_name: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a tensor. Panics on duplicate names, which is a wiring bug.
    pub fn add(&mut self, name: impl Into<String>, value: Tensor, requires_grad: bool) -> ParamId {
        let name = name.into();
        let id = ParamId(self.params.len());
        let prev = self.by_name.insert(name.clone(), id);
        assert!(prev.is_none(), "duplicate parameter name `{name}`");
        self.params.push(Param {
            name,
            value,
            grad: None,
            requires_grad,
        });
        id
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.params[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn by_name(&self, name: &str) -> Result<&Param> {
        self.id(name)
            .map(|id| self.get(id))
            .ok_or_else(|| TensorError::UnknownParam(name.to_string()))
    }

    pub fn by_name_mut(&mut self, name: &str) -> Result<&mut Param> {
        let id = self
            .id(name)
            .ok_or_else(|| TensorError::UnknownParam(name.to_string()))?;
        Ok(self.get_mut(id))
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn trainable(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.iter().filter(|(_, p)| p.requires_grad)
    }

    pub fn num_trainable_values(&self) -> usize {
        self.trainable().map(|(_, p)| p.value.numel()).sum()
    }

    pub(crate) fn accumulate_grad(&mut self, id: ParamId, grad: &[f64]) {
        let p = &mut self.params[id.0];
        if !p.requires_grad {
            return;
        }
        match &mut p.grad {
            Some(g) => g.data_mut().iter_mut().zip(grad).for_each(|(a, b)| *a += b),
            None => {
                p.grad = Some(Tensor::new(p.value.shape(), grad.to_vec()).expect("grad shape"))
            }
        }
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            if let Some(g) = &mut p.grad {
                g.data_mut().fill(0.0);
            }
        }
    }

    pub fn clear_grads(&mut self) {
        for p in &mut self.params {
            p.grad = None;
        }
    }

    /// Copies every value from `other`, matching by name and shape.
    pub fn load_values(&mut self, other: &ParamStore) -> Result<()> {
        if other.len() != self.len() {
            return Err(super::invalid(
                "load_values",
                format!("expected {} parameters, found {}", self.len(), other.len()),
            ));
        }
        for p in &mut self.params {
            let src = other.by_name(&p.name)?;
            if src.value.shape() != p.value.shape() {
                return Err(TensorError::ShapeMismatch {
                    op: "load_values",
                    lhs: p.value.shape().to_vec(),
                    rhs: src.value.shape().to_vec(),
                });
            }
            p.value = src.value.clone();
        }
        Ok(())
    }
}
