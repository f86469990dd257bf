use std::collections::HashMap;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{ensure_arg, Error, Result};
use crate::numerics::ops::bilinear;
use crate::numerics::tape::{Tape, Var};
use crate::numerics::tensor::{Scalar, Tensor};

/// Power-iteration vectors for spectral normalisation. `u` spans the rows
/// of the matrix view, `v` the columns.
#[derive(Clone, Debug, PartialEq)]
pub struct SpectralState<T = f64> {
    pub u: Tensor<T>,
    pub v: Tensor<T>,
}

impl<T: Scalar> SpectralState<T> {
    pub fn random(rows: usize, cols: usize, rng: &mut impl Rng) -> Self {
        Self {
            u: unit_random(rows, rng),
            v: unit_random(cols, rng),
        }
    }
}

fn unit_random<T: Scalar>(n: usize, rng: &mut impl Rng) -> Tensor<T> {
    let t = Tensor::from_fn([n], |_| T::lit(rng.sample::<f64, _>(StandardNormal)));
    let norm = t.l2_norm();
    t.scale(T::one() / norm)
}

#[derive(Clone, Debug)]
pub struct Parameter<T = f64> {
    pub name: String,
    pub value: Tensor<T>,
    pub grad: Option<Tensor<T>>,
    pub trainable: bool,
    pub spectral: Option<SpectralState<T>>,
}

impl<T: Scalar> Parameter<T> {
    pub fn new(name: impl Into<String>, value: Tensor<T>) -> Self {
        Self {
            name: name.into(),
            value,
            grad: None,
            trainable: true,
            spectral: None,
        }
    }

    /// `(rows, cols)` of the matrix view used by spectral normalisation.
    pub fn matrix_dims(&self) -> (usize, usize) {
        (self.value.rows(), self.value.cols())
    }

    pub fn accumulate_grad(&mut self, g: &Tensor<T>) {
        assert_eq!(g.shape(), self.value.shape(), "gradient shape for `{}`", self.name);
        match &mut self.grad {
            Some(acc) => acc.add_assign(g),
            None => self.grad = Some(g.clone()),
        }
    }
}

/// Named parameter collection with unique hierarchical names.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T = f64> {
    params: Vec<Parameter<T>>,
    index: HashMap<String, usize>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            params: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn add(&mut self, param: Parameter<T>) -> Result<usize> {
        ensure_arg!(
            !self.index.contains_key(&param.name),
            "duplicate parameter name `{}`",
            param.name
        );
        let id = self.params.len();
        self.index.insert(param.name.clone(), id);
        self.params.push(param);
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: usize) -> &Parameter<T> {
        &self.params[id]
    }

    pub fn get_mut(&mut self, id: usize) -> &mut Parameter<T> {
        &mut self.params[id]
    }

    pub fn id(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn by_name(&self, name: &str) -> Result<&Parameter<T>> {
        self.id(name)
            .map(|id| &self.params[id])
            .ok_or_else(|| Error::arg(format!("no parameter named `{name}`")))
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter<T>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter<T>> {
        self.params.iter_mut()
    }

    pub fn total_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad = None;
        }
    }
}

/// Binds store parameters onto a tape on first use, so each parameter is a
/// single leaf however often it is read.
pub struct Binder<'s, T: Scalar> {
    store: &'s ParamStore<T>,
    bound: HashMap<usize, Var>,
}

impl<'s, T: Scalar> Binder<'s, T> {
    pub fn new(store: &'s ParamStore<T>) -> Self {
        Self {
            store,
            bound: HashMap::new(),
        }
    }

    /// Substitutes an existing tape node for a parameter, e.g. a perturbed
    /// copy during finite-difference checks.
    pub fn with_override(mut self, id: usize, var: Var) -> Self {
        self.bound.insert(id, var);
        self
    }

    pub fn store(&self) -> &'s ParamStore<T> {
        self.store
    }

    pub fn var(&mut self, tape: &mut Tape<T>, id: usize) -> Var {
        if let Some(&v) = self.bound.get(&id) {
            return v;
        }
        let p = &self.store.params[id];
        let v = tape.param_leaf(p.value.clone(), id, p.trainable);
        self.bound.insert(id, v);
        v
    }

    /// Spectrally normalised view of a parameter using its current
    /// power-iteration state. A numerically zero matrix maps to zero.
    pub fn spectral(&mut self, tape: &mut Tape<T>, id: usize) -> Result<Var> {
        let var = self.var(tape, id);
        let p = &self.store.params[id];
        let state = p
            .spectral
            .as_ref()
            .ok_or_else(|| Error::arg(format!("parameter `{}` has no spectral state", p.name)))?;
        let sigma = bilinear(tape.value(var).data(), state.u.data(), state.v.data(), tape.value(var).cols());
        if sigma.abs().as_f64() <= 1e-12 {
            return Ok(tape.scale(var, T::zero()));
        }
        tape.spectral_scale(var, &state.u, &state.v)
    }
}
