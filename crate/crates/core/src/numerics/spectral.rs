use crate::error::{ensure_arg, Error, Result};
use crate::numerics::ops::bilinear;
use crate::numerics::param::{Parameter, SpectralState};
use crate::numerics::tensor::{Scalar, Tensor};

const DEGENERATE: f64 = 1e-12;

#[derive(Clone, Debug)]
pub struct SpectralNormalized<T> {
    pub weight: Tensor<T>,
    /// Power-iteration estimate of the largest singular value.
    pub sigma: T,
    /// Set when the matrix is (numerically) zero; `weight` is then zero.
    pub degenerate: bool,
}

/// `v ← Wᵀu/‖Wᵀu‖`, `u ← Wv/‖Wv‖`. Returns `false` when `W` annihilates the
/// current vectors, leaving them untouched.
fn power_step<T: Scalar>(w: &[T], rows: usize, cols: usize, state: &mut SpectralState<T>) -> bool {
    let mut v = vec![T::zero(); cols];
    for (r, row) in w.chunks(cols).enumerate() {
        let ur = state.u.data()[r];
        for (acc, &x) in v.iter_mut().zip(row) {
            *acc += ur * x;
        }
    }
    let vn = v.iter().map(|&x| x * x).sum::<T>().sqrt();
    if vn.as_f64() < DEGENERATE {
        return false;
    }
    for x in &mut v {
        *x = *x / vn;
    }
    let mut u = vec![T::zero(); rows];
    for (r, row) in w.chunks(cols).enumerate() {
        u[r] = row.iter().zip(&v).map(|(&a, &b)| a * b).sum();
    }
    let un = u.iter().map(|&x| x * x).sum::<T>().sqrt();
    if un.as_f64() < DEGENERATE {
        return false;
    }
    for x in &mut u {
        *x = *x / un;
    }
    state.u = Tensor::from_parts(vec![rows], u);
    state.v = Tensor::from_parts(vec![cols], v);
    true
}

/// Runs `iters` power iterations on the parameter's spectral state (updated
/// in place) and returns the weight divided by the resulting estimate.
pub fn spectral_normalize<T: Scalar>(p: &mut Parameter<T>, iters: usize) -> Result<SpectralNormalized<T>> {
    let (rows, cols) = p.matrix_dims();
    let state = p
        .spectral
        .as_mut()
        .ok_or_else(|| Error::arg(format!("parameter `{}` has no spectral state", p.name)))?;
    ensure_arg!(
        state.u.len() == rows && state.v.len() == cols,
        "spectral state of `{}` does not match its {rows}x{cols} view",
        p.name
    );
    for _ in 0..iters {
        if !power_step(p.value.data(), rows, cols, state) {
            return Ok(SpectralNormalized {
                weight: Tensor::zeros(p.value.shape().to_vec()),
                sigma: T::zero(),
                degenerate: true,
            });
        }
    }
    let sigma = bilinear(p.value.data(), state.u.data(), state.v.data(), cols);
    if sigma.abs().as_f64() < DEGENERATE {
        return Ok(SpectralNormalized {
            weight: Tensor::zeros(p.value.shape().to_vec()),
            sigma: T::zero(),
            degenerate: true,
        });
    }
    Ok(SpectralNormalized {
        weight: p.value.scale(T::one() / sigma),
        sigma,
        degenerate: false,
    })
}

/// Strict variant for callers that must not continue on a zero matrix.
pub fn spectral_normalize_strict<T: Scalar>(p: &mut Parameter<T>, iters: usize) -> Result<Tensor<T>> {
    let name = p.name.clone();
    let out = spectral_normalize(p, iters)?;
    if out.degenerate {
        return Err(Error::DegenerateNorm(name));
    }
    Ok(out.weight)
}

/// Largest singular value of a 2-D view by power iteration from a fixed,
/// dense starting vector.
pub fn top_singular_value<T: Scalar>(m: &Tensor<T>, iters: usize) -> f64 {
    let (rows, cols) = (m.rows(), m.cols());
    let start = Tensor::from_fn([rows], |i| T::lit(1.0 + 0.01 * (i % 7) as f64));
    let norm = start.l2_norm();
    let mut state = SpectralState {
        u: start.scale(T::one() / norm),
        v: Tensor::zeros([cols]),
    };
    for _ in 0..iters {
        if !power_step(m.data(), rows, cols, &mut state) {
            return 0.0;
        }
    }
    bilinear(m.data(), state.u.data(), state.v.data(), cols).as_f64().abs()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn param(rows: usize, cols: usize, data: Vec<f64>, seed: u64) -> Parameter<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = Parameter::new("w", Tensor::new([rows, cols], data).unwrap());
        p.spectral = Some(SpectralState::random(rows, cols, &mut rng));
        p
    }

    #[test]
    fn diagonal_matrix() {
        let mut p = param(2, 2, vec![3.0, 0.0, 0.0, 1.0], 1);
        let out = spectral_normalize(&mut p, 100).unwrap();
        let expect = [1.0, 0.0, 0.0, 1.0 / 3.0];
        for (a, b) in out.weight.data().iter().zip(expect) {
            assert!((a - b).abs() < 1e-9, "{a} vs {b}");
        }
        let st = p.spectral.as_ref().unwrap();
        assert!((st.u.l2_norm() - 1.0).abs() < 1e-6);
        assert!((st.v.l2_norm() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn orthogonal_matrix_is_fixed() {
        let (c, s) = (0.6f64, 0.8f64);
        let data = vec![c, -s, s, c];
        let mut p = param(2, 2, data.clone(), 2);
        let out = spectral_normalize(&mut p, 10).unwrap();
        for (a, b) in out.weight.data().iter().zip(&data) {
            assert!((a - b).abs() < 1e-3);
        }
    }

    #[test]
    fn zero_matrix_is_degenerate() {
        let mut p = param(3, 2, vec![0.0; 6], 3);
        let out = spectral_normalize(&mut p, 5).unwrap();
        assert!(out.degenerate);
        assert!(out.weight.data().iter().all(|&x| x == 0.0));
        let mut p = param(3, 2, vec![0.0; 6], 3);
        assert!(matches!(
            spectral_normalize_strict(&mut p, 5),
            Err(Error::DegenerateNorm(_))
        ));
    }

    #[test]
    fn top_singular_value_of_diagonal() {
        let m = Tensor::new([3, 3], vec![2.0, 0.0, 0.0, 0.0, -5.0, 0.0, 0.0, 0.0, 1.0]).unwrap();
        assert!((top_singular_value(&m, 200) - 5.0).abs() < 1e-9);
    }
}
