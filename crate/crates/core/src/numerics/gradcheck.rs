//! Central finite-difference verification of tape gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{ensure_arg, Error, Result};
use crate::numerics::tape::{Tape, Var};
use crate::numerics::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    pub h: f64,
    pub tol: f64,
    /// Lower bound on the relative-error denominator, so coordinates whose
    /// true gradient is ~0 are judged on absolute error.
    pub floor: f64,
    /// Check at most this many coordinates per input (sampled with `seed`).
    pub max_coords: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            h: 1e-5,
            tol: 1e-3,
            floor: 1e-6,
            max_coords: None,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct CoordCheck {
    pub input: usize,
    pub coord: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub checks: Vec<CoordCheck>,
    pub max_rel_err: f64,
    pub tol: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err < self.tol
    }

    pub fn worst(&self) -> Option<&CoordCheck> {
        self.checks
            .iter()
            .max_by(|a, b| a.rel_err.total_cmp(&b.rel_err))
    }
}

fn evaluate<F>(f: &F, inputs: &[Tensor<f64>]) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    ensure_arg!(
        tape.value(out).len() == 1,
        "gradient_check needs a scalar-valued function, got shape {:?}",
        tape.shape(out)
    );
    Ok(tape.value(out).item())
}

/// Compares analytic gradients of the scalar `f` at `inputs` with central
/// differences `(f(x+h) − f(x−h)) / 2h`, coordinate by coordinate.
///
/// The relative error of a coordinate is `|a − n| / max(|a|, |n|, floor)`.
pub fn gradient_check<F>(f: F, inputs: &[Tensor<f64>], opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    ensure_arg!(
        tape.value(out).len() == 1,
        "gradient_check needs a scalar-valued function, got shape {:?}",
        tape.shape(out)
    );
    if !tape.value(out).item().is_finite() {
        return Err(Error::NonFinite {
            context: "gradient_check base evaluation".into(),
        });
    }
    let grads = tape.backward(out);

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut checks = Vec::new();
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    for (i, input) in inputs.iter().enumerate() {
        let analytic = grads
            .get(vars[i])
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(input.shape().to_vec()));
        let coords: Vec<usize> = match opts.max_coords {
            Some(m) if m < input.len() => {
                let mut c = sample(&mut rng, input.len(), m).into_vec();
                c.sort_unstable();
                c
            }
            _ => (0..input.len()).collect(),
        };
        for c in coords {
            let x0 = input.data()[c];
            work[i].data_mut()[c] = x0 + opts.h;
            let plus = evaluate(&f, &work)?;
            work[i].data_mut()[c] = x0 - opts.h;
            let minus = evaluate(&f, &work)?;
            work[i].data_mut()[c] = x0;
            if !plus.is_finite() || !minus.is_finite() {
                return Err(Error::NonFinite {
                    context: format!("gradient_check at input {i}, coordinate {c}"),
                });
            }
            let numeric = (plus - minus) / (2.0 * opts.h);
            let a = analytic.data()[c];
            let denom = a.abs().max(numeric.abs()).max(opts.floor);
            checks.push(CoordCheck {
                input: i,
                coord: c,
                analytic: a,
                numeric,
                rel_err: (a - numeric).abs() / denom,
            });
        }
    }
    let max_rel_err = checks.iter().map(|c| c.rel_err).fold(0.0, f64::max);
    Ok(GradCheckReport {
        checks,
        max_rel_err,
        tol: opts.tol,
    })
}
