//! Central finite-difference verification of reverse-mode gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::NumericsError;
use crate::graph::{Graph, Var};
use crate::params::{ParamId, ParamStore};
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub checked: usize,
    /// Coordinate with the largest error: (parameter, flat index, analytic, numeric).
    pub worst: Option<(String, usize, f64, f64)>,
}

/// Magnitude below which gradients are compared absolutely. A structurally
/// zero gradient (for example a key bias, to which softmax is invariant) has
/// a finite-difference estimate made only of rounding noise.
pub const GRAD_FLOOR: f64 = 1e-4;

/// `|a - b| / max(|a|, |b|, GRAD_FLOOR)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(GRAD_FLOOR)
}

fn eval_loss<T: Scalar, E, F>(params: &ParamStore<T>, loss_fn: &mut F) -> Result<(Graph<T>, Var, f64), E>
where
    E: From<NumericsError>,
    F: FnMut(&ParamStore<T>, &mut Graph<T>) -> Result<Var, E>,
{
    let mut g = Graph::new();
    let loss = loss_fn(params, &mut g)?;
    let value = g.value(loss);
    if value.len() != 1 {
        return Err(NumericsError::dim("finite_difference_check", "loss must be scalar").into());
    }
    let v = value.data()[0].as_f64();
    if !v.is_finite() {
        return Err(NumericsError::NonFinite(format!("loss = {v}")).into());
    }
    Ok((g, loss, v))
}

/// Compares backward-pass gradients with central differences on `samples`
/// coordinates drawn from the trainable parameters (a parameter tensor is
/// picked uniformly, then a coordinate within it). Parameters are restored
/// before returning.
pub fn finite_difference_check<T, E, F>(
    params: &mut ParamStore<T>,
    mut loss_fn: F,
    eps: f64,
    samples: usize,
    seed: u64,
) -> Result<GradCheckReport, E>
where
    T: Scalar,
    E: From<NumericsError>,
    F: FnMut(&ParamStore<T>, &mut Graph<T>) -> Result<Var, E>,
{
    if !(eps > 0.0) {
        return Err(NumericsError::InvalidConfig("eps must be > 0".into()).into());
    }
    let (mut g, loss, _) = eval_loss(params, &mut loss_fn)?;
    g.backward(loss)?;
    let mut analytic = ParamStore::clone(params);
    analytic.zero_grad();
    for p in analytic.iter_mut() {
        p.tensor.clear_grad();
    }
    g.accumulate_param_grads(&mut analytic);
    drop(g);

    let candidates: Vec<ParamId> = params
        .iter()
        .filter(|(_, p)| p.trainable)
        .map(|(id, _)| id)
        .collect();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        checked: 0,
        worst: None,
    };
    if candidates.is_empty() {
        return Ok(report);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let h = T::lit(eps);
    for _ in 0..samples {
        let id = candidates[rng.random_range(0..candidates.len())];
        let idx = rng.random_range(0..params.tensor(id).len());
        let a = analytic
            .tensor(id)
            .grad()
            .map_or(0.0, |gr| gr[idx].as_f64());
        let original = params.tensor(id).data()[idx];
        params.tensor_mut(id).data_mut()[idx] = original + h;
        let plus = eval_loss(params, &mut loss_fn).map(|r| r.2);
        params.tensor_mut(id).data_mut()[idx] = original - h;
        let minus = eval_loss(params, &mut loss_fn).map(|r| r.2);
        params.tensor_mut(id).data_mut()[idx] = original;
        let (plus, minus) = (plus?, minus?);
        // Use the perturbation actually representable in T.
        let step = (original + h).as_f64() - (original - h).as_f64();
        let numeric = (plus - minus) / step;
        let err = relative_error(a, numeric);
        report.checked += 1;
        if report.worst.is_none() || err > report.max_rel_error {
            report.max_rel_error = err;
            report.worst = Some((params.get(id).name.clone(), idx, a, numeric));
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn store() -> ParamStore<f64> {
        let mut s = ParamStore::new();
        s.add("a", Tensor::new(&[3], vec![0.3, -1.2, 2.0]).unwrap()).unwrap();
        s.add("b", Tensor::new(&[2, 2], vec![0.1, 0.2, -0.3, 0.4]).unwrap()).unwrap();
        s
    }

    #[test]
    fn sum_of_squares_is_exact() {
        let mut s = store();
        let ids: Vec<ParamId> = s.iter().map(|(id, _)| id).collect();
        let report = finite_difference_check::<f64, NumericsError, _>(
            &mut s,
            |p, g| {
                let mut total = None;
                for &id in &ids {
                    let v = g.param(p, id);
                    let sq = g.mul(v, v)?;
                    let s = g.sum(sq);
                    total = Some(match total {
                        None => s,
                        Some(t) => g.add(t, s)?,
                    });
                }
                Ok(total.unwrap())
            },
            1e-4,
            20,
            7,
        )
        .unwrap();
        assert_eq!(report.checked, 20);
        assert!(report.max_rel_error < 1e-6, "{report:?}");
    }

    #[test]
    fn constant_loss_has_zero_error() {
        let mut s = store();
        let report = finite_difference_check::<f64, NumericsError, _>(
            &mut s,
            |_, g| Ok(g.constant(Tensor::scalar(4.0))),
            1e-3,
            10,
            1,
        )
        .unwrap();
        assert_eq!(report.max_rel_error, 0.0);
    }

    #[test]
    fn non_finite_loss_is_reported() {
        let mut s = store();
        let err = finite_difference_check::<f64, NumericsError, _>(
            &mut s,
            |_, g| Ok(g.constant(Tensor::scalar(f64::NAN))),
            1e-3,
            1,
            1,
        )
        .unwrap_err();
        assert!(matches!(err, NumericsError::NonFinite(_)));
    }
}
