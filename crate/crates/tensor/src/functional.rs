//! Value-level numerical kernels shared by the tape ops and by callers that
//! only need a forward value (decoding, evaluation).

use crate::error::{Result, TensorError};
use crate::real::Real;

fn check_finite<T: Real>(op: &'static str, x: &[T]) -> Result<()> {
    match x.iter().position(|v| !v.is_finite()) {
        None => Ok(()),
        Some(i) => Err(TensorError::InvalidValue {
            op,
            detail: format!("non-finite element at index {i}"),
        }),
    }
}

/// Max-stabilised softmax of `x` written into `out`; entries past `limit`
/// are treated as masked (probability zero).
pub(crate) fn softmax_into<T: Real>(x: &[T], limit: usize, out: &mut [T]) {
    let live = &x[..limit];
    let max = live.iter().copied().fold(T::neg_infinity(), T::max);
    let mut total = T::zero();
    for (o, &v) in out[..limit].iter_mut().zip(live) {
        *o = (v - max).exp();
        total += *o;
    }
    for o in &mut out[..limit] {
        *o /= total;
    }
    out[limit..].fill(T::zero());
}

pub fn softmax<T: Real>(x: &[T]) -> Result<Vec<T>> {
    if x.is_empty() {
        return Err(TensorError::Empty("softmax"));
    }
    check_finite("softmax", x)?;
    let mut out = vec![T::zero(); x.len()];
    softmax_into(x, x.len(), &mut out);
    Ok(out)
}

pub fn log_softmax<T: Real>(x: &[T]) -> Result<Vec<T>> {
    if x.is_empty() {
        return Err(TensorError::Empty("log_softmax"));
    }
    check_finite("log_softmax", x)?;
    let lse = log_sum_exp(x);
    Ok(x.iter().map(|&v| v - lse).collect())
}

pub(crate) fn log_sum_exp<T: Real>(x: &[T]) -> T {
    let max = x.iter().copied().fold(T::neg_infinity(), T::max);
    let total: T = x.iter().map(|&v| (v - max).exp()).sum();
    max + total.ln()
}

/// `-log softmax(logits)[target]`.
pub fn cross_entropy<T: Real>(logits: &[T], target: usize) -> Result<T> {
    if target >= logits.len() {
        return Err(TensorError::IndexOutOfRange {
            op: "cross_entropy",
            index: target,
            len: logits.len(),
        });
    }
    check_finite("cross_entropy", logits)?;
    Ok(log_sum_exp(logits) - logits[target])
}

pub fn layer_norm<T: Real>(x: &[T], gain: &[T], bias: &[T], eps: T) -> Result<Vec<T>> {
    if x.is_empty() {
        return Err(TensorError::Empty("layer_norm"));
    }
    if gain.len() != x.len() || bias.len() != x.len() {
        return Err(TensorError::ShapeMismatch {
            op: "layer_norm",
            lhs: vec![x.len()],
            rhs: vec![gain.len(), bias.len()],
        });
    }
    if !(eps > T::zero()) {
        return Err(TensorError::InvalidValue {
            op: "layer_norm",
            detail: "eps must be positive".into(),
        });
    }
    let mut out = vec![T::zero(); x.len()];
    layer_norm_row(x, gain, bias, eps, &mut out);
    Ok(out)
}

/// Normalises one row; returns `(mean, 1/sqrt(var + eps))`.
pub(crate) fn layer_norm_row<T: Real>(
    x: &[T],
    gain: &[T],
    bias: &[T],
    eps: T,
    out: &mut [T],
) -> (T, T) {
    let n = T::from_usize(x.len()).unwrap();
    let mean = x.iter().copied().sum::<T>() / n;
    let var = x.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
    let rstd = T::one() / (var + eps).sqrt();
    for i in 0..x.len() {
        out[i] = (x[i] - mean) * rstd * gain[i] + bias[i];
    }
    (mean, rstd)
}

const FRAC_1_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

/// Exact GELU, `x * Phi(x)`.
pub fn gelu<T: Real>(x: T) -> T {
    let half = T::from_f64_lossy(0.5);
    half * x * (T::one() + (x * T::from_f64_lossy(std::f64::consts::FRAC_1_SQRT_2)).erf())
}

pub(crate) fn gelu_grad<T: Real>(x: T) -> T {
    let half = T::from_f64_lossy(0.5);
    let cdf = half * (T::one() + (x * T::from_f64_lossy(std::f64::consts::FRAC_1_SQRT_2)).erf());
    let pdf = T::from_f64_lossy(FRAC_1_SQRT_2PI) * (-half * x * x).exp();
    cdf + x * pdf
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
    }

    #[test]
    fn softmax_examples() {
        let third = 1.0 / 3.0;
        assert!(close(&softmax(&[0.0, 0.0, 0.0]).unwrap(), &[third; 3], 1e-12));
        assert!(close(
            &softmax(&[0.0, 2f64.ln()]).unwrap(),
            &[third, 2.0 * third],
            1e-12
        ));
        let p: Vec<f64> = softmax(&[1000.0, 0.0]).unwrap();
        assert!(p.iter().all(|v| v.is_finite()));
        assert!((p[0] - 1.0).abs() < 1e-12 && p[1] < 1e-300);
    }

    #[test]
    fn softmax_rejects_non_finite() {
        assert!(matches!(
            softmax(&[0.0, f64::NAN]),
            Err(TensorError::InvalidValue { .. })
        ));
        assert!(softmax(&[f64::INFINITY]).is_err());
    }

    #[test]
    fn softmax_handles_large_magnitudes() {
        let p = softmax(&[1e4, -1e4, 9999.0]).unwrap();
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn cross_entropy_examples() {
        let uniform = vec![0.0f64; 100];
        assert!((cross_entropy(&uniform, 17).unwrap() - 100f64.ln()).abs() < 1e-12);
        assert!(cross_entropy(&[0.0f64, 1000.0], 1).unwrap().abs() < 1e-12);
        let ce = cross_entropy(&[0.0, 3f64.ln()], 0).unwrap();
        assert!((ce - 4f64.ln()).abs() < 1e-12);
        assert!(matches!(
            cross_entropy(&[0.0, 1.0], 2),
            Err(TensorError::IndexOutOfRange { .. })
        ));
    }

    #[test]
    fn layer_norm_examples() {
        let out = layer_norm(&[1.0, 1.0, 1.0], &[1.0; 3], &[0.0; 3], 1e-5).unwrap();
        assert!(close(&out, &[0.0; 3], 1e-12));
        let out = layer_norm(&[-1.0, 1.0], &[1.0; 2], &[0.0; 2], 1e-12).unwrap();
        assert!(close(&out, &[-1.0, 1.0], 1e-9));
        let out = layer_norm(&[0.0, 2.0], &[2.0; 2], &[1.0; 2], 1e-12).unwrap();
        assert!(close(&out, &[-1.0, 3.0], 1e-9));
        assert!(matches!(
            layer_norm::<f64>(&[], &[], &[], 1e-5),
            Err(TensorError::Empty(_))
        ));
    }

    #[test]
    fn gelu_examples() {
        assert_eq!(gelu(0.0f64), 0.0);
        assert!((gelu(10.0f64) - 10.0).abs() < 1e-6);
        assert!(gelu(-10.0f64).abs() < 1e-6);
    }
}
