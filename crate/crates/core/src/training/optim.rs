use serde::{Deserialize, Serialize};

use crate::error::{ensure_arg, Error, Result};
use crate::numerics::{ParamStore, Scalar, Tensor};

/// Fraction of the schedule spent rising to the peak.
pub const PEAK_FRACTION: f64 = 0.3;
/// Start and end learning rates are `max_lr / START_DIVISOR`.
pub const START_DIVISOR: f64 = 25.0;

/// Cosine one-cycle schedule: rises from `max_lr/25` to `max_lr` over the
/// first 30% of `total_steps`, then falls back to `max_lr/25`.
pub fn one_cycle_lr(step: u64, total_steps: u64, max_lr: f64) -> Result<f64> {
    ensure_arg!(total_steps > 0, "one-cycle schedule needs at least one step");
    ensure_arg!(
        step <= total_steps,
        "step {step} is outside the schedule of {total_steps} steps"
    );
    let floor = max_lr / START_DIVISOR;
    let peak = (PEAK_FRACTION * total_steps as f64).round();
    let s = step as f64;
    let cos_ramp = |from: f64, to: f64, frac: f64| to + (from - to) * 0.5 * (1.0 + (std::f64::consts::PI * frac).cos());
    if s <= peak {
        let frac = if peak == 0.0 { 1.0 } else { s / peak };
        Ok(cos_ramp(floor, max_lr, frac))
    } else {
        let frac = (s - peak) / (total_steps as f64 - peak);
        Ok(cos_ramp(max_lr, floor, frac))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.0,
            beta2: 0.99,
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates, one slot per store parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T: Scalar> {
    pub t: u64,
    pub m: Vec<Option<Tensor<T>>>,
    pub v: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(n_params: usize) -> Self {
        Self {
            t: 0,
            m: vec![None; n_params],
            v: vec![None; n_params],
        }
    }
}

/// One Adam update from the gradients held in the store. Trainable
/// parameters without a gradient are treated as having a zero gradient.
pub fn adam_step<T: Scalar>(store: &mut ParamStore<T>, state: &mut AdamState<T>, cfg: &AdamConfig, lr: f64) -> Result<()> {
    ensure_arg!(
        state.m.len() == store.len(),
        "optimiser state covers {} parameters, the store has {}",
        state.m.len(),
        store.len()
    );
    for p in store.iter().filter(|p| p.trainable) {
        if let Some(g) = &p.grad {
            if !g.all_finite() {
                return Err(Error::NonFinite {
                    context: format!("gradient of `{}`", p.name),
                });
            }
        }
    }
    state.t += 1;
    let (b1, b2) = (cfg.beta1, cfg.beta2);
    let c1 = 1.0 - b1.powi(state.t as i32);
    let c2 = 1.0 - b2.powi(state.t as i32);
    let (tb1, tb2) = (T::lit(b1), T::lit(b2));
    let (ob1, ob2) = (T::lit(1.0 - b1), T::lit(1.0 - b2));
    let (lr_t, c1_t, c2_t, eps) = (T::lit(lr), T::lit(c1), T::lit(c2), T::lit(cfg.eps));
    for (id, p) in store.iter_mut().enumerate() {
        if !p.trainable {
            continue;
        }
        let shape = p.value.shape().to_vec();
        let m = state.m[id].get_or_insert_with(|| Tensor::zeros(shape.clone()));
        let v = state.v[id].get_or_insert_with(|| Tensor::zeros(shape.clone()));
        let zero;
        let g = match &p.grad {
            Some(g) => g,
            None => {
                zero = Tensor::zeros(shape);
                &zero
            }
        };
        let gd = g.data();
        for (((w, m), v), &g) in p
            .value
            .data_mut()
            .iter_mut()
            .zip(m.data_mut())
            .zip(v.data_mut())
            .zip(gd)
        {
            *m = tb1 * *m + ob1 * g;
            *v = tb2 * *v + ob2 * g * g;
            let mh = *m / c1_t;
            let vh = *v / c2_t;
            *w = *w - lr_t * mh / (vh.sqrt() + eps);
        }
    }
    Ok(())
}

/// Euclidean norm over all trainable gradients.
pub fn global_grad_norm<T: Scalar>(store: &ParamStore<T>) -> f64 {
    store
        .iter()
        .filter(|p| p.trainable)
        .filter_map(|p| p.grad.as_ref())
        .flat_map(|g| g.data().iter().map(|x| x.as_f64() * x.as_f64()))
        .sum::<f64>()
        .sqrt()
}

/// Rescales gradients so their global norm is at most `max_norm`; returns
/// the norm before clipping.
pub fn clip_grad_norm<T: Scalar>(store: &mut ParamStore<T>, max_norm: f64) -> f64 {
    let norm = global_grad_norm(store);
    if norm > max_norm {
        let c = T::lit(max_norm / norm);
        for p in store.iter_mut().filter(|p| p.trainable) {
            if let Some(g) = &mut p.grad {
                *g = g.scale(c);
            }
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Parameter;

    fn store_with(values: &[f64], grad: &[f64]) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        let mut p = Parameter::new("w", Tensor::new([values.len()], values.to_vec()).unwrap());
        p.grad = Some(Tensor::new([grad.len()], grad.to_vec()).unwrap());
        s.add(p).unwrap();
        s
    }

    #[test]
    fn schedule_endpoints_and_peak() {
        let total = 1000;
        assert!((one_cycle_lr(0, total, 1e-4).unwrap() - 4e-6).abs() < 1e-18);
        assert!((one_cycle_lr(300, total, 1e-4).unwrap() - 1e-4).abs() < 1e-18);
        assert!((one_cycle_lr(total, total, 1e-4).unwrap() - 4e-6).abs() < 1e-18);
        for s in 0..=total {
            assert!(one_cycle_lr(s, total, 1e-4).unwrap() <= 1e-4);
        }
        assert!(one_cycle_lr(total + 1, total, 1e-4).is_err());
        assert!(one_cycle_lr(0, 0, 1e-4).is_err());
    }

    #[test]
    fn schedule_rises_then_falls() {
        let lrs: Vec<f64> = (0..=200).map(|s| one_cycle_lr(s, 200, 1.0).unwrap()).collect();
        assert!(lrs[..=60].windows(2).all(|w| w[1] > w[0]));
        assert!(lrs[60..].windows(2).all(|w| w[1] < w[0]));
    }

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        // With bias correction the first update is lr·g/(|g| + eps).
        let mut s = store_with(&[1.0, -2.0], &[0.5, -3.0]);
        let mut st = AdamState::new(1);
        adam_step(&mut s, &mut st, &AdamConfig::default(), 0.1).unwrap();
        let w = s.get(0).value.data().to_vec();
        assert!((w[0] - (1.0 - 0.1 * 0.5 / (0.5 + 1e-8))).abs() < 1e-15);
        assert!((w[1] - (-2.0 + 0.1 * 3.0 / (3.0 + 1e-8))).abs() < 1e-15);
        assert_eq!(st.t, 1);
    }

    #[test]
    fn zero_gradient_is_a_null_step() {
        let mut s = store_with(&[1.0, 2.0], &[0.0, 0.0]);
        let mut st = AdamState::new(1);
        adam_step(&mut s, &mut st, &AdamConfig::default(), 0.1).unwrap();
        assert_eq!(s.get(0).value.data(), &[1.0, 2.0]);
        assert_eq!(st.t, 1);
    }

    #[test]
    fn update_is_linear_in_lr() {
        let run = |lr: f64| {
            let mut s = store_with(&[0.0, 0.0], &[0.3, -0.7]);
            let mut st = AdamState::new(1);
            adam_step(&mut s, &mut st, &AdamConfig::default(), lr).unwrap();
            s.get(0).value.data().to_vec()
        };
        let (a, b) = (run(0.01), run(0.03));
        for (x, y) in a.iter().zip(&b) {
            assert!((3.0 * x - y).abs() < 1e-15);
        }
    }

    #[test]
    fn non_finite_gradient_names_the_parameter() {
        let mut s = store_with(&[1.0], &[f64::NAN]);
        let mut st = AdamState::new(1);
        let err = adam_step(&mut s, &mut st, &AdamConfig::default(), 0.1).unwrap_err();
        assert!(err.to_string().contains("`w`"));
        assert_eq!(s.get(0).value.data(), &[1.0]);
        assert_eq!(st.t, 0);
    }

    #[test]
    fn clipping_caps_the_global_norm() {
        let mut s = store_with(&[0.0, 0.0], &[3.0, 4.0]);
        assert_eq!(clip_grad_norm(&mut s, 1.0), 5.0);
        assert!((global_grad_norm(&s) - 1.0).abs() < 1e-15);
        let mut s = store_with(&[0.0], &[0.5]);
        clip_grad_norm(&mut s, 1.0);
        assert_eq!(s.get(0).grad.as_ref().unwrap().data(), &[0.5]);
    }
}
