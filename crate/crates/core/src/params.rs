//! Named parameter collections shared by all models.

use rand::Rng;

use crate::error::{KtError, Result};
use crate::tensor::{Tape, Tensor, Var};

/// Index of a parameter inside its [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

/// Which entries receive L2 weight decay.
#[derive(Debug, Clone, PartialEq)]
pub enum Decay {
    /// Biases, gains and scalar parameters.
    None,
    /// Weight matrices.
    All,
    /// Embedding tables whose listed rows (padding) are exempt.
    ExceptRows(Vec<usize>),
}

#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub decay: Decay,
}

#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: &str, value: Tensor, decay: Decay) -> ParamId {
        assert!(
            self.find(name).is_none(),
            "duplicate parameter name `{name}`"
        );
        self.params.push(Param {
            name: name.to_string(),
            value,
            decay,
        });
        ParamId(self.params.len() - 1)
    }

    /// Uniform(-bound, bound) initialisation.
    pub fn add_uniform<R: Rng>(
        &mut self,
        name: &str,
        shape: &[usize],
        bound: f64,
        decay: Decay,
        rng: &mut R,
    ) -> ParamId {
        let mut t = Tensor::zeros(shape);
        for v in t.data_mut() {
            *v = rng.random_range(-bound..bound);
        }
        self.add(name, t, decay)
    }

    pub fn add_const(&mut self, name: &str, shape: &[usize], value: f64) -> ParamId {
        self.add(name, Tensor::full(shape, value), Decay::None)
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

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.params.iter_mut()
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    /// Records every parameter on `tape` as a differentiable leaf.
    pub fn bind(&self, tape: &mut Tape) -> Bound {
        Bound {
            vars: self
                .params
                .iter()
                .map(|p| tape.leaf(p.value.clone().with_requires_grad(true)))
                .collect(),
        }
    }

    /// Gradients collected after `tape.backward`, zero for parameters the
    /// loss does not reach.
    pub fn collect_grads(&self, tape: &Tape, bound: &Bound) -> Vec<Vec<f64>> {
        self.params
            .iter()
            .zip(&bound.vars)
            .map(|(p, &v)| match tape.grad(v) {
                Some(g) => g.to_vec(),
                None => vec![0.0; p.value.numel()],
            })
            .collect()
    }

    /// Replaces values from another store with identical names and shapes.
    pub fn load_from(&mut self, other: &ParamStore) -> Result<()> {
        for p in &mut self.params {
            let src = other
                .find(&p.name)
                .map(|id| other.get(id))
                .ok_or_else(|| KtError::Checkpoint(format!("missing parameter `{}`", p.name)))?;
            if src.value.shape() != p.value.shape() {
                return Err(KtError::Checkpoint(format!(
                    "parameter `{}` has shape {:?}, expected {:?}",
                    p.name,
                    src.value.shape(),
                    p.value.shape()
                )));
            }
            p.value = src.value.clone();
        }
        Ok(())
    }
}

/// Parameters recorded on one tape, indexed by [`ParamId`].
#[derive(Debug, Clone)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }
}

impl std::ops::Index<ParamId> for Bound {
    type Output = Var;

    fn index(&self, id: ParamId) -> &Var {
        &self.vars[id.0]
    }
}
