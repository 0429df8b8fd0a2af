//! Slice-level kernels shared by the graph ops and usable on their own.

use crate::error::{NumericsError, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Max-subtracted softmax of one slice, in place.
pub fn softmax_in_place<T: Scalar>(x: &mut [T]) {
    if x.is_empty() {
        return;
    }
    let max = x.iter().copied().fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for v in x.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    let inv = T::one() / sum;
    x.iter_mut().for_each(|v| *v *= inv);
}

/// Softmax over the last axis.
pub fn softmax<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let mut out = x.clone();
    out.clear_grad();
    let cols = out.cols();
    out.data_mut()
        .chunks_mut(cols)
        .for_each(softmax_in_place);
    out
}

/// `log(sum(exp(x)))` computed stably.
pub fn log_sum_exp<T: Scalar>(x: &[T]) -> T {
    let max = x.iter().copied().fold(T::neg_infinity(), T::max);
    if max == T::neg_infinity() {
        return max;
    }
    let s: T = x.iter().map(|&v| (v - max).exp()).sum();
    max + s.ln()
}

/// Normalizes `x` to zero mean and unit variance, then applies `gain` and
/// `bias`. Returns the output together with `1/sqrt(var + eps)`.
pub fn layer_norm_row<T: Scalar>(x: &[T], gain: &[T], bias: &[T], eps: T, out: &mut [T]) -> T {
    let n = T::lit(x.len() as f64);
    let mean = x.iter().copied().sum::<T>() / n;
    let var = x.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
    let rstd = T::one() / (var + eps).sqrt();
    for i in 0..x.len() {
        out[i] = (x[i] - mean) * rstd * gain[i] + bias[i];
    }
    rstd
}

pub fn layer_norm<T: Scalar>(x: &[T], gain: &[T], bias: &[T], eps: T) -> Result<Vec<T>> {
    if gain.len() != x.len() || bias.len() != x.len() {
        return Err(NumericsError::dim(
            "layer_norm",
            format!(
                "input {} vs gain {} / bias {}",
                x.len(),
                gain.len(),
                bias.len()
            ),
        ));
    }
    if eps.partial_cmp(&T::zero()) != Some(std::cmp::Ordering::Greater) {
        return Err(NumericsError::InvalidConfig("layer_norm eps must be > 0".into()));
    }
    let mut out = vec![T::zero(); x.len()];
    layer_norm_row(x, gain, bias, eps, &mut out);
    Ok(out)
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Tanh approximation of GELU, evaluated through 0.5 * (1 + tanh(u)) =
/// sigmoid(2u).
pub fn gelu<T: Scalar>(x: T) -> T {
    x * gelu_gate(x)
}

fn gelu_inner<T: Scalar>(x: T) -> T {
    T::lit(GELU_C) * (x + T::lit(GELU_A) * x * x * x)
}

fn gelu_gate<T: Scalar>(x: T) -> T {
    T::one() / (T::one() + (-(gelu_inner(x) + gelu_inner(x))).exp())
}

pub fn gelu_derivative<T: Scalar>(x: T) -> T {
    let s = gelu_gate(x);
    let du = T::lit(GELU_C) * (T::one() + T::lit(3.0 * GELU_A) * x * x);
    s + T::lit(2.0) * x * s * (T::one() - s) * du
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn softmax_of_equal_logits_is_uniform() {
        let t = Tensor::<f32>::new(&[2], vec![0.0, 0.0]).unwrap();
        assert_eq!(softmax(&t).data(), &[0.5, 0.5]);
    }

    #[test]
    fn softmax_does_not_overflow() {
        let t = Tensor::<f32>::new(&[2], vec![1000.0, 0.0]).unwrap();
        let s = softmax(&t);
        assert!(s.all_finite());
        assert_eq!(s.data()[0], 1.0);
        assert!(s.data()[1] < 1e-30);
    }

    #[test]
    fn softmax_matches_f64_reference() {
        let xs: Vec<f32> = vec![0.3, -1.7, 2.2, 0.0, 4.1, -0.4, 1.05, -3.3];
        let reference: Vec<f64> = {
            let e: Vec<f64> = xs.iter().map(|&v| (v as f64).exp()).collect();
            let s: f64 = e.iter().sum();
            e.into_iter().map(|v| v / s).collect()
        };
        let got = softmax(&Tensor::new(&[8], xs).unwrap());
        for (g, r) in got.data().iter().zip(&reference) {
            assert!((*g as f64 - r).abs() < 1e-6, "{g} vs {r}");
        }
    }

    #[test]
    fn layer_norm_of_constant_vector_collapses_to_bias() {
        let y = layer_norm(&[3.0f64; 3], &[1.0; 3], &[0.0; 3], 1e-5).unwrap();
        assert_eq!(y, vec![0.0; 3]);
    }

    #[test]
    fn layer_norm_keeps_standardized_input() {
        let y = layer_norm(&[1.0f64, -1.0], &[1.0; 2], &[0.0; 2], 1e-12).unwrap();
        assert!((y[0] - 1.0).abs() < 1e-9 && (y[1] + 1.0).abs() < 1e-9);
    }

    #[test]
    fn layer_norm_rejects_mismatched_gain() {
        assert!(matches!(
            layer_norm(&[1.0f32, 2.0], &[1.0], &[0.0, 0.0], 1e-5),
            Err(NumericsError::Dimension { .. })
        ));
    }

    #[test]
    fn layer_norm_output_has_zero_mean() {
        let x: Vec<f32> = (0..16).map(|i| ((i * 7919) % 13) as f32 * 0.31 - 1.2).collect();
        let y = layer_norm(&x, &[1.0; 16], &[0.0; 16], 1e-5).unwrap();
        let mean: f64 = y.iter().map(|&v| v as f64).sum::<f64>() / 16.0;
        assert!(mean.abs() < 1e-6);
    }

    #[test]
    fn gelu_matches_the_tanh_formula() {
        for &x in &[-40.0f64, -3.0, -0.7, -1e-4, 0.0, 1e-4, 0.4, 2.5, 40.0] {
            let u = GELU_C * (x + GELU_A * x * x * x);
            let reference = 0.5 * x * (1.0 + u.tanh());
            assert!((gelu(x) - reference).abs() < 1e-12, "{x}");
            assert!((gelu(x as f32) as f64 - reference).abs() < 1e-5, "{x}");
        }
    }

    #[test]
    fn gelu_derivative_matches_central_difference() {
        for &x in &[-3.0f64, -0.7, 0.0, 0.4, 2.5] {
            let h = 1e-6;
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((fd - gelu_derivative(x)).abs() < 1e-8);
        }
    }

    proptest! {
        #[test]
        fn softmax_lands_on_the_simplex(xs in proptest::collection::vec(-50.0f32..50.0, 1..32)) {
            let n = xs.len();
            let s = softmax(&Tensor::new(&[n], xs).unwrap());
            prop_assert!(s.data().iter().all(|&p| p >= 0.0));
            let total: f64 = s.data().iter().map(|&p| p as f64).sum();
            prop_assert!((total - 1.0).abs() < 1e-6);
        }
    }
}
