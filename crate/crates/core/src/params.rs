//! Named parameter storage with layer-group tags for progressive unfreezing.

use rand::distributions::{Distribution, Uniform};
use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Unfreezable backbone layer group. Group 1 sits nearest the output.
pub type Group = u8;

#[derive(Clone, Debug)]
pub struct Param<F> {
    pub name: String,
    pub value: Tensor<F>,
    /// Zero-initialised accumulator; additive until [`ParamStore::zero_grad`].
    pub grad: Vec<F>,
    /// `None` for parameters that are always trainable.
    pub group: Option<Group>,
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore<F> {
    params: Vec<Param<F>>,
}

impl<F: Real> ParamStore<F> {
    pub fn new() -> Self {
        ParamStore { params: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<F>, group: Option<Group>) -> ParamId {
        let grad = vec![F::zero(); value.len()];
        self.params.push(Param {
            name: name.into(),
            value,
            grad,
            group,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Param<F> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param<F> {
        &mut self.params[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param<F>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param<F>> {
        self.params.iter_mut()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.iter_mut().for_each(|g| *g = F::zero());
        }
    }

    /// Whether `id` is updated when groups `1..=unfrozen` are released.
    pub fn is_trainable(&self, id: ParamId, unfrozen: Group) -> bool {
        self.params[id.0].group.map_or(true, |g| g <= unfrozen)
    }

    pub fn values(&self) -> Vec<Tensor<F>> {
        self.params.iter().map(|p| p.value.clone()).collect()
    }

    pub fn set_values(&mut self, values: &[Tensor<F>]) -> Result<()> {
        if values.len() != self.params.len() {
            return Err(Error::Data(format!(
                "expected {} parameter tensors, got {}",
                self.params.len(),
                values.len()
            )));
        }
        for (p, v) in self.params.iter_mut().zip(values) {
            if p.value.shape() != v.shape() {
                return Err(Error::shape(
                    "set_values",
                    format!("{}: {:?} vs {:?}", p.name, p.value.shape(), v.shape()),
                ));
            }
            p.value = v.clone();
        }
        Ok(())
    }

    /// Places every parameter on `tape`. Trainable ones become gradient leaves.
    pub fn bind(&self, tape: &mut Tape<F>, unfrozen: Group) -> Binding {
        let vars = self
            .ids()
            .map(|id| tape.leaf(self.get(id).value.clone(), self.is_trainable(id, unfrozen)))
            .collect();
        Binding { vars }
    }

    /// Adds the tape's gradients for bound parameters into the accumulators.
    pub fn accumulate_grads(&mut self, tape: &Tape<F>, binding: &Binding) {
        for (p, &v) in self.params.iter_mut().zip(&binding.vars) {
            if let Some(g) = tape.grad(v) {
                p.grad.iter_mut().zip(g).for_each(|(a, &b)| *a += b);
            }
        }
    }
}

/// Tape variables for every parameter of a store, indexed by [`ParamId`].
#[derive(Clone, Debug)]
pub struct Binding {
    vars: Vec<Var>,
}

impl Binding {
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Binding { vars }
    }

    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

/// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) initialisation.
pub fn uniform_init<F: Real, R: Rng + ?Sized>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor<F> {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    let dist = Uniform::new_inclusive(-bound, bound);
    let n = shape.iter().product();
    let data = (0..n).map(|_| F::from_f64_lossy(dist.sample(rng))).collect();
    Tensor::new(shape.to_vec(), data).expect("non-empty shape")
}
