//! Parameterised building blocks: registration into a [`ParamStore`] plus
//! the matching forward pass through a [`Binder`].

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::Result;
use crate::numerics::{Binder, ParamStore, Parameter, Scalar, SpectralState, Tape, Tensor, Var};

pub const LN_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug)]
pub enum Init {
    Zeros,
    Ones,
    /// Normal with the given standard deviation, resampled beyond ±2σ.
    TruncNormal(f64),
    /// Uniform in `±1/√fan_in`.
    FanIn(usize),
}

impl Init {
    pub fn tensor<T: Scalar>(self, shape: &[usize], rng: &mut impl Rng) -> Tensor<T> {
        match self {
            Init::Zeros => Tensor::zeros(shape.to_vec()),
            Init::Ones => Tensor::full(shape.to_vec(), T::one()),
            Init::TruncNormal(std) => Tensor::from_fn(shape.to_vec(), |_| loop {
                let z: f64 = rng.sample(StandardNormal);
                if z.abs() <= 2.0 {
                    break T::lit(z * std);
                }
            }),
            Init::FanIn(fan_in) => {
                let bound = 1.0 / (fan_in as f64).sqrt();
                Tensor::from_fn(shape.to_vec(), |_| T::lit(rng.gen_range(-bound..=bound)))
            }
        }
    }
}

pub fn register<T: Scalar>(
    store: &mut ParamStore<T>,
    name: String,
    shape: &[usize],
    init: Init,
    rng: &mut impl Rng,
) -> Result<usize> {
    store.add(Parameter::new(name, init.tensor(shape, rng)))
}

/// `x·W + b` with `W: [fan_in, fan_out]`.
#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub weight: usize,
    pub bias: Option<usize>,
}

impl Linear {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        init: Init,
        bias: bool,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let weight = register(store, format!("{name}.weight"), &[fan_in, fan_out], init, rng)?;
        let bias = bias
            .then(|| register(store, format!("{name}.bias"), &[fan_out], Init::Zeros, rng))
            .transpose()?;
        Ok(Self { weight, bias })
    }

    pub fn vars<T: Scalar>(&self, tape: &mut Tape<T>, b: &mut Binder<T>) -> (Var, Option<Var>) {
        (b.var(tape, self.weight), self.bias.map(|id| b.var(tape, id)))
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, b: &mut Binder<T>, x: Var) -> Result<Var> {
        let (w, bias) = self.vars(tape, b);
        tape.linear(x, w, bias)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LayerNorm {
    pub gamma: usize,
    pub beta: usize,
}

impl LayerNorm {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, dim: usize, rng: &mut impl Rng) -> Result<Self> {
        Ok(Self {
            gamma: register(store, format!("{name}.gamma"), &[dim], Init::Ones, rng)?,
            beta: register(store, format!("{name}.beta"), &[dim], Init::Zeros, rng)?,
        })
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, b: &mut Binder<T>, x: Var) -> Result<Var> {
        let (g, be) = (b.var(tape, self.gamma), b.var(tape, self.beta));
        tape.layer_norm(x, g, be, LN_EPS)
    }
}

/// Same-padded 2-D convolution on `[h*w, cin]` token maps, optionally with
/// a spectrally normalised weight.
#[derive(Clone, Copy, Debug)]
pub struct Conv {
    pub weight: usize,
    pub bias: usize,
    pub spectral: bool,
}

impl Conv {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        ks: usize,
        cin: usize,
        cout: usize,
        spectral: bool,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let fan_in = ks * ks * cin;
        let mut p = Parameter::new(format!("{name}.weight"), Init::FanIn(fan_in).tensor(&[fan_in, cout], rng));
        if spectral {
            p.spectral = Some(SpectralState::random(fan_in, cout, rng));
        }
        let weight = store.add(p)?;
        let bias = register(store, format!("{name}.bias"), &[cout], Init::FanIn(fan_in), rng)?;
        Ok(Self { weight, bias, spectral })
    }

    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        b: &mut Binder<T>,
        x: Var,
        h: usize,
        w: usize,
    ) -> Result<Var> {
        let weight = if self.spectral {
            b.spectral(tape, self.weight)?
        } else {
            b.var(tape, self.weight)
        };
        let bias = b.var(tape, self.bias);
        tape.conv2d(x, h, w, weight, Some(bias))
    }
}
