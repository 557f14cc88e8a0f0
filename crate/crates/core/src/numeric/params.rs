use alloc::string::{String, ToString};
use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

use super::tape::{GradBuf, Gradients};
use super::Matrix;
use crate::{Error, Result};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Which half of the joint objective a parameter belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    /// Embeddings and backbone layers.
    Rs,
    /// Selection controller.
    Controller,
    /// Embedding tables that only feed a transferred, frozen controller.
    SelectorEmbedding,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Param {
    pub name: String,
    pub group: ParamGroup,
    pub value: Matrix,
    /// Adam first moment.
    pub m: Matrix,
    /// Adam second moment.
    pub v: Matrix,
    /// Number of Adam updates applied to this parameter.
    pub steps: u64,
    #[serde(skip)]
    grad: Matrix,
    #[serde(skip)]
    has_grad: bool,
}

/// Gradient buffers are scratch space and do not take part in equality.
impl PartialEq for Param {
    fn eq(&self, other: &Self) -> bool {
        self.name == other.name
            && self.group == other.group
            && self.value == other.value
            && self.m == other.m
            && self.v == other.v
            && self.steps == other.steps
    }
}

impl Param {
    pub fn grad(&self) -> &Matrix {
        &self.grad
    }

    pub fn has_grad(&self) -> bool {
        self.has_grad
    }

    fn grad_mut(&mut self) -> &mut Matrix {
        if self.grad.shape() != self.value.shape() {
            self.grad = Matrix::zeros(self.value.rows(), self.value.cols());
        }
        &mut self.grad
    }
}

/// Named parameters with gradient accumulators and Adam state.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ParamStore {
    params: Vec<Param>,
    /// Optimizer steps taken on this store.
    step: u64,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, group: ParamGroup, value: Matrix) -> Result<ParamId> {
        let name = name.into();
        if self.id(&name).is_some() {
            return Err(Error::InvalidInput(alloc::format!("duplicate parameter `{name}`")));
        }
        let (r, c) = value.shape();
        self.params.push(Param {
            name,
            group,
            m: Matrix::zeros(r, c),
            v: Matrix::zeros(r, c),
            grad: Matrix::zeros(r, c),
            value,
            steps: 0,
            has_grad: false,
        });
        Ok(ParamId(self.params.len() - 1))
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn require(&self, name: &str) -> Result<ParamId> {
        self.id(name)
            .ok_or_else(|| Error::InvalidInput(alloc::format!("missing parameter `{name}`")))
    }

    #[inline]
    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    #[inline]
    pub fn value(&self, id: ParamId) -> &Matrix {
        &self.params[id.0].value
    }

    #[inline]
    pub fn value_mut(&mut self, id: ParamId) -> &mut Matrix {
        &mut self.params[id.0].value
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    /// Total number of scalar coordinates.
    pub fn coordinate_count(&self) -> usize {
        self.params.iter().map(|p| p.value.as_slice().len()).sum()
    }

    /// Adds a backward pass' gradients into the accumulators.
    pub fn accumulate(&mut self, grads: &Gradients) {
        for (id, buf) in grads.iter() {
            let p = &mut self.params[id.0];
            p.has_grad = true;
            let g = p.grad_mut();
            match buf {
                GradBuf::Dense(m) => {
                    for (a, b) in g.as_mut_slice().iter_mut().zip(m.as_slice()) {
                        *a += b;
                    }
                }
                GradBuf::Rows(rows) => {
                    for (&r, vals) in rows {
                        for (a, b) in g.row_mut(r).iter_mut().zip(vals) {
                            *a += b;
                        }
                    }
                }
            }
        }
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            if p.has_grad {
                p.grad_mut().fill(0.0);
            }
            p.has_grad = false;
        }
    }

    /// Copies values of every parameter of `group` from `other` (matched by name).
    pub fn copy_group_from(&mut self, other: &ParamStore, group: ParamGroup) -> Result<()> {
        for p in other.params.iter().filter(|p| p.group == group) {
            let id = self.require(&p.name)?;
            let dst = &mut self.params[id.0];
            if dst.value.shape() != p.value.shape() {
                return Err(Error::Shape {
                    op: "copy_group_from",
                    left: dst.value.shape(),
                    right: p.value.shape(),
                });
            }
            dst.value = p.value.clone();
        }
        Ok(())
    }

    /// Names of parameters in a group, in insertion order.
    pub fn names(&self, group: ParamGroup) -> Vec<String> {
        self.params
            .iter()
            .filter(|p| p.group == group)
            .map(|p| p.name.to_string())
            .collect()
    }
}

/// One Adam update over every parameter accepted by `update`.
///
/// L2 enters as an extra gradient term `l2 * θ`. Every selected parameter must
/// carry a gradient from the current step. All gradients are cleared afterwards,
/// including those of parameters that were not updated.
pub fn adam_step(store: &mut ParamStore, lr: f64, l2: f64, update: impl Fn(&Param) -> bool) -> Result<()> {
    if let Some(p) = store.params.iter().find(|p| update(p) && !p.has_grad) {
        return Err(Error::MissingGradient(p.name.clone()));
    }
    for p in store.params.iter_mut().filter(|p| update(p)) {
        p.steps += 1;
        let bc1 = 1.0 - libm::pow(ADAM_BETA1, p.steps as f64);
        let bc2 = 1.0 - libm::pow(ADAM_BETA2, p.steps as f64);
        let Param { value, m, v, grad, .. } = p;
        let it = value
            .as_mut_slice()
            .iter_mut()
            .zip(m.as_mut_slice())
            .zip(v.as_mut_slice())
            .zip(grad.as_slice());
        for (((theta, m), v), &g) in it {
            let g = g + l2 * *theta;
            *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * g;
            *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * g * g;
            let m_hat = *m / bc1;
            let v_hat = *v / bc2;
            *theta -= lr * m_hat / (libm::sqrt(v_hat) + ADAM_EPS);
        }
    }
    store.step += 1;
    store.zero_grads();
    Ok(())
}
