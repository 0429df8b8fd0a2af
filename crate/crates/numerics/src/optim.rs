use crate::error::{NumericsError, Result};
use crate::params::ParamStore;
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub base_lr: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            base_lr: 1e-3,
        }
    }
}

/// Moment buffers for every parameter of a store, in store order.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T: Scalar = f32> {
    pub config: AdamConfig,
    pub step: u64,
    pub first_moment: Vec<Vec<T>>,
    pub second_moment: Vec<Vec<T>>,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(params: &ParamStore<T>, config: AdamConfig) -> Self {
        let zeros: Vec<Vec<T>> = params
            .iter()
            .map(|(_, p)| vec![T::zero(); p.tensor.len()])
            .collect();
        AdamState {
            config,
            step: 0,
            first_moment: zeros.clone(),
            second_moment: zeros,
        }
    }
}

/// One bias-corrected Adam update of a single buffer. `step` is the 1-based
/// index of this update.
#[allow(clippy::too_many_arguments)]
pub fn adam_update<T: Scalar>(
    values: &mut [T],
    grads: &[T],
    m: &mut [T],
    v: &mut [T],
    step: u64,
    lr: f64,
    config: &AdamConfig,
) {
    let b1 = T::lit(config.beta1);
    let b2 = T::lit(config.beta2);
    let one = T::one();
    let c1 = T::lit(1.0 - config.beta1.powi(step as i32));
    let c2 = T::lit(1.0 - config.beta2.powi(step as i32));
    let lr = T::lit(lr);
    let eps = T::lit(config.eps);
    for i in 0..values.len() {
        let g = grads[i];
        m[i] = b1 * m[i] + (one - b1) * g;
        v[i] = b2 * v[i] + (one - b2) * g * g;
        let m_hat = m[i] / c1;
        let v_hat = v[i] / c2;
        values[i] -= lr * m_hat / (v_hat.sqrt() + eps);
    }
}

/// Applies one Adam step to every trainable parameter using the gradients
/// held in the store, then increments the step counter.
pub fn adam_step<T: Scalar>(params: &mut ParamStore<T>, state: &mut AdamState<T>, lr_t: f64) -> Result<()> {
    if !(lr_t >= 0.0) {
        return Err(NumericsError::InvalidConfig(format!("learning rate {lr_t} must be >= 0")));
    }
    if state.first_moment.len() != params.len() {
        return Err(NumericsError::dim(
            "adam_step",
            format!("state tracks {} params, store has {}", state.first_moment.len(), params.len()),
        ));
    }
    for ((_, p), m) in params.iter().zip(&state.first_moment) {
        if p.tensor.len() != m.len() {
            return Err(NumericsError::dim("adam_step", format!("moment shape for `{}`", p.name)));
        }
    }
    state.step += 1;
    let step = state.step;
    let config = state.config;
    for ((p, m), v) in params
        .iter_mut()
        .zip(state.first_moment.iter_mut())
        .zip(state.second_moment.iter_mut())
    {
        if !p.trainable {
            continue;
        }
        let (values, grads) = p.tensor.data_and_grad_mut();
        adam_update(values, grads, m, v, step, lr_t, &config);
    }
    Ok(())
}

/// Linear warmup from 0 to `base_lr` over `ceil(warmup_fraction * total)`
/// steps, then linear decay to 0 at `total_steps`.
pub fn lr_schedule(step: u64, total_steps: u64, base_lr: f64, warmup_fraction: f64) -> Result<f64> {
    if total_steps == 0 {
        return Err(NumericsError::InvalidConfig("total_steps must be > 0".into()));
    }
    if !(warmup_fraction > 0.0 && warmup_fraction < 1.0) {
        return Err(NumericsError::InvalidConfig(format!(
            "warmup_fraction {warmup_fraction} must lie in (0, 1)"
        )));
    }
    if step > total_steps {
        return Err(NumericsError::InvalidConfig(format!(
            "step {step} beyond total {total_steps}"
        )));
    }
    let warmup = ((warmup_fraction * total_steps as f64).ceil() as u64).clamp(1, total_steps);
    let lr = if step <= warmup {
        base_lr * step as f64 / warmup as f64
    } else {
        base_lr * (total_steps - step) as f64 / (total_steps - warmup) as f64
    };
    Ok(lr)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use proptest::prelude::*;

    fn store(values: &[f64]) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        s.add("p", Tensor::new(&[values.len()], values.to_vec()).unwrap()).unwrap();
        s
    }

    #[test]
    fn zero_gradient_leaves_params_unchanged() {
        let mut s = store(&[0.5, -1.25, 3.0]);
        s.tensor_mut(crate::ParamId(0)).grad_mut();
        let mut st = AdamState::new(&s, AdamConfig::default());
        adam_step(&mut s, &mut st, 0.1).unwrap();
        assert_eq!(s.tensor(crate::ParamId(0)).data(), &[0.5, -1.25, 3.0]);
        assert_eq!(st.step, 1);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut s = store(&[2.0]);
        s.tensor_mut(crate::ParamId(0)).grad_mut()[0] = 1.0;
        let mut st = AdamState::new(&s, AdamConfig::default());
        adam_step(&mut s, &mut st, 0.01).unwrap();
        let moved = s.tensor(crate::ParamId(0)).data()[0] - 2.0;
        assert!((moved + 0.01).abs() < 1e-9, "moved {moved}");
    }

    #[test]
    fn quadratic_trace_matches_reference() {
        // f(x, y) = x^2 + 3 y^2, gradients (2x, 6y).
        fn reference(mut x: [f64; 2], steps: usize, lr: f64) -> [f64; 2] {
            let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8f64);
            let mut m = [0.0; 2];
            let mut v = [0.0; 2];
            for t in 1..=steps {
                let g = [2.0 * x[0], 6.0 * x[1]];
                for i in 0..2 {
                    m[i] = b1 * m[i] + (1.0 - b1) * g[i];
                    v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
                    let mh = m[i] / (1.0 - b1.powi(t as i32));
                    let vh = v[i] / (1.0 - b2.powi(t as i32));
                    x[i] -= lr * mh / (vh.sqrt() + eps);
                }
            }
            x
        }
        fn run<T: Scalar>() -> Vec<f64> {
            let mut s = ParamStore::<T>::new();
            let init = vec![T::lit(1.0), T::lit(-0.5)];
            let id = s.add("xy", Tensor::new(&[2], init).unwrap()).unwrap();
            let mut st = AdamState::new(&s, AdamConfig::default());
            for _ in 0..3 {
                s.zero_grad();
                let v = s.tensor(id).data().to_vec();
                let g = s.tensor_mut(id).grad_mut();
                g[0] = T::lit(2.0) * v[0];
                g[1] = T::lit(6.0) * v[1];
                adam_step(&mut s, &mut st, 0.05).unwrap();
            }
            s.tensor(id).data().iter().map(|x| x.as_f64()).collect()
        }
        let want = reference([1.0, -0.5], 3, 0.05);
        for (g, w) in run::<f64>().iter().zip(want) {
            assert!((g - w).abs() < 1e-6, "{g} vs {w}");
        }
        for (g, w) in run::<f32>().iter().zip(want) {
            assert!((g - w).abs() < 1e-5, "{g} vs {w}");
        }
    }

    #[test]
    fn frozen_params_are_skipped() {
        let mut s = store(&[1.0]);
        s.tensor_mut(crate::ParamId(0)).grad_mut()[0] = 5.0;
        s.freeze_except(|_| false);
        let mut st = AdamState::new(&s, AdamConfig::default());
        adam_step(&mut s, &mut st, 0.1).unwrap();
        assert_eq!(s.tensor(crate::ParamId(0)).data(), &[1.0]);
    }

    #[test]
    fn schedule_anchor_points() {
        assert_eq!(lr_schedule(0, 1000, 1e-3, 0.1).unwrap(), 0.0);
        assert_eq!(lr_schedule(100, 1000, 1e-3, 0.1).unwrap(), 1e-3);
        assert!((lr_schedule(50, 1000, 1e-3, 0.1).unwrap() - 5e-4).abs() < 1e-18);
        assert_eq!(lr_schedule(1000, 1000, 1e-3, 0.1).unwrap(), 0.0);
        assert!(lr_schedule(0, 0, 1e-3, 0.1).is_err());
        assert!(lr_schedule(0, 10, 1e-3, 0.0).is_err());
    }

    proptest! {
        #[test]
        fn schedule_is_bounded_and_peaks_at_boundary(total in 1u64..5000, frac in 0.01f64..0.99, step_frac in 0.0f64..=1.0) {
            let step = ((total as f64) * step_frac) as u64;
            let lr = lr_schedule(step, total, 2.0, frac).unwrap();
            prop_assert!((0.0..=2.0).contains(&lr));
            let warmup = ((frac * total as f64).ceil() as u64).clamp(1, total);
            prop_assert_eq!(lr_schedule(warmup, total, 2.0, frac).unwrap(), 2.0);
        }

        #[test]
        fn schedule_steps_are_small(total in 10u64..2000, frac in 0.05f64..0.5) {
            // Piecewise linear: consecutive values differ by at most one slope unit.
            let warmup = ((frac * total as f64).ceil() as u64).clamp(1, total);
            let max_slope = 1.0 / warmup.min(total - warmup).max(1) as f64;
            for s in 0..total {
                let a = lr_schedule(s, total, 1.0, frac).unwrap();
                let b = lr_schedule(s + 1, total, 1.0, frac).unwrap();
                prop_assert!((a - b).abs() <= max_slope + 1e-12);
            }
        }
    }
}
