//! Pure tensor kernels shared by the spiking simulator and the tape.

use alloc::vec;
use alloc::vec::Vec;

use super::RealTensor;
use crate::error::{Error, Result};

/// Variance floor used by [`layer_norm`].
pub const LAYER_NORM_EPS: f64 = 1e-12;

pub fn matmul(a: &RealTensor, b: &RealTensor) -> Result<RealTensor> {
    if a.shape().len() != 2 || b.shape().len() != 2 || a.cols() != b.rows() {
        return Err(Error::dim("matmul", a.shape(), b.shape()));
    }
    let (n, k, m) = (a.rows(), a.cols(), b.cols());
    let mut out = vec![0.0; n * m];
    let (ad, bd) = (a.data(), b.data());
    for i in 0..n {
        let orow = &mut out[i * m..(i + 1) * m];
        for p in 0..k {
            let x = ad[i * k + p];
            if x == 0.0 {
                continue;
            }
            for (o, w) in orow.iter_mut().zip(&bd[p * m..(p + 1) * m]) {
                *o += x * w;
            }
        }
    }
    RealTensor::new(vec![n, m], out)
}

/// Row-wise softmax over the last dimension, stabilized by the row max.
pub fn softmax_rows(x: &RealTensor) -> RealTensor {
    let c = x.cols();
    let mut data = x.data().to_vec();
    for row in data.chunks_mut(c.max(1)) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for v in row.iter_mut() {
            *v = libm::exp(*v - max);
            total += *v;
        }
        for v in row.iter_mut() {
            *v /= total;
        }
    }
    RealTensor::from_parts(x.shape().to_vec(), data)
}

pub fn log_softmax_rows(x: &RealTensor) -> RealTensor {
    let c = x.cols();
    let mut data = x.data().to_vec();
    for row in data.chunks_mut(c.max(1)) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + libm::log(row.iter().map(|v| libm::exp(v - max)).sum::<f64>());
        for v in row.iter_mut() {
            *v -= lse;
        }
    }
    RealTensor::from_parts(x.shape().to_vec(), data)
}

/// Per-row statistics retained for the layer-norm adjoint.
#[derive(Debug, Clone)]
pub(crate) struct NormCache {
    pub normalized: RealTensor,
    pub inv_std: Vec<f64>,
}

pub(crate) fn layer_norm_cached(
    x: &RealTensor,
    gain: &RealTensor,
    shift: &RealTensor,
) -> Result<(RealTensor, NormCache)> {
    let c = x.cols();
    if gain.len() != c || shift.len() != c {
        return Err(Error::dim("layer_norm", x.shape(), gain.shape()));
    }
    let rows = x.len() / c.max(1);
    let mut normalized = Vec::with_capacity(x.len());
    let mut out = Vec::with_capacity(x.len());
    let mut inv_std = Vec::with_capacity(rows);
    for row in x.data().chunks(c.max(1)) {
        let mean = row.iter().sum::<f64>() / c as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
        let inv = 1.0 / libm::sqrt(var + LAYER_NORM_EPS);
        inv_std.push(inv);
        for (j, v) in row.iter().enumerate() {
            let n = (v - mean) * inv;
            normalized.push(n);
            out.push(gain.data()[j] * n + shift.data()[j]);
        }
    }
    let normalized = RealTensor::from_parts(x.shape().to_vec(), normalized);
    let out = RealTensor::new(x.shape().to_vec(), out)?;
    Ok((out, NormCache { normalized, inv_std }))
}

/// Layer normalization over the last dimension followed by `gain * x + shift`.
pub fn layer_norm(x: &RealTensor, gain: &RealTensor, shift: &RealTensor) -> Result<RealTensor> {
    layer_norm_cached(x, gain, shift).map(|(y, _)| y)
}

/// Standard normal CDF.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x * core::f64::consts::FRAC_1_SQRT_2))
}

fn normal_pdf(x: f64) -> f64 {
    libm::exp(-0.5 * x * x) / libm::sqrt(2.0 * core::f64::consts::PI)
}

pub fn gelu_scalar(x: f64) -> f64 {
    x * normal_cdf(x)
}

pub fn gelu_derivative(x: f64) -> f64 {
    normal_cdf(x) + x * normal_pdf(x)
}

/// Exact (erf) GELU.
pub fn gelu(x: &RealTensor) -> RealTensor {
    RealTensor::from_parts(
        x.shape().to_vec(),
        x.data().iter().map(|&v| gelu_scalar(v)).collect(),
    )
}

pub fn clip01_scalar(x: f64) -> f64 {
    x.clamp(0.0, 1.0)
}

/// Clamp into `[0, 1]`.
pub fn clip01(x: &RealTensor) -> RealTensor {
    RealTensor::from_parts(
        x.shape().to_vec(),
        x.data().iter().map(|&v| clip01_scalar(v)).collect(),
    )
}

/// Adjoint mask of [`clip01`]: 1 strictly inside `(0, 1)`, 0 elsewhere.
pub fn clip01_mask(x: f64) -> f64 {
    if x > 0.0 && x < 1.0 {
        1.0
    } else {
        0.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn t(rows: &[&[f64]]) -> RealTensor {
        RealTensor::from_rows(rows).unwrap()
    }

    #[test]
    fn matmul_examples() {
        let id = t(&[&[1.0, 0.0], &[0.0, 1.0]]);
        let col = t(&[&[3.0], &[4.0]]);
        assert_eq!(matmul(&id, &col).unwrap(), col);
        let a = t(&[&[1.0, 2.0], &[3.0, 4.0]]);
        let ones = t(&[&[1.0], &[1.0]]);
        assert_eq!(matmul(&a, &ones).unwrap().data(), &[3.0, 7.0]);
        let z = RealTensor::zeros(&[2, 2]);
        assert_eq!(matmul(&z, &a).unwrap(), z);
        assert!(matches!(matmul(&a, &t(&[&[1.0, 2.0, 3.0]])), Err(Error::Dimension { .. })));
    }

    #[test]
    fn softmax_examples() {
        let s = softmax_rows(&t(&[&[0.0, 0.0]]));
        assert_eq!(s.data(), &[0.5, 0.5]);
        let s = softmax_rows(&t(&[&[1000.0, 0.0]]));
        assert_abs_diff_eq!(s.data()[0], 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(s.data()[1], 0.0, epsilon = 1e-12);
        // Reference values: e^k / (e + e^2 + e^3) evaluated in extended precision.
        let s = softmax_rows(&t(&[&[1.0, 2.0, 3.0]]));
        let expected = [0.090_030_573_170_380_46, 0.244_728_471_054_797_65, 0.665_240_955_774_821_9];
        for (a, b) in s.data().iter().zip(expected) {
            assert_abs_diff_eq!(*a, b, epsilon = 1e-15);
        }
    }

    #[test]
    fn layer_norm_examples() {
        let ones = RealTensor::vector(vec![1.0, 1.0]).unwrap();
        let zeros = RealTensor::vector(vec![0.0, 0.0]).unwrap();
        let y = layer_norm(&t(&[&[5.0, 5.0]]), &ones, &zeros).unwrap();
        assert_eq!(y.data(), &[0.0, 0.0]);
        let y = layer_norm(&t(&[&[1.0, 3.0]]), &ones, &zeros).unwrap();
        assert_abs_diff_eq!(y.data()[0], -1.0, epsilon = 1e-6);
        assert_abs_diff_eq!(y.data()[1], 1.0, epsilon = 1e-6);
        let shift = RealTensor::vector(vec![0.3, -0.7]).unwrap();
        let y = layer_norm(&t(&[&[1.0, 3.0], &[2.0, -4.0]]), &zeros, &shift).unwrap();
        assert_eq!(y.data(), &[0.3, -0.7, 0.3, -0.7]);
    }

    /// Maclaurin series of erf, summed until terms vanish.
    fn erf_series(x: f64) -> f64 {
        let mut term = x;
        let mut sum = x;
        let mut n = 0.0;
        while term.abs() > 1e-18 {
            n += 1.0;
            term *= -x * x / n;
            sum += term / (2.0 * n + 1.0);
        }
        sum * 2.0 / libm::sqrt(core::f64::consts::PI)
    }

    #[test]
    fn gelu_examples() {
        assert_eq!(gelu_scalar(0.0), 0.0);
        assert_abs_diff_eq!(gelu_scalar(10.0), 10.0, epsilon = 1e-6);
        let oracle = 0.5 * (1.0 + erf_series(1.0 / libm::sqrt(2.0)));
        assert_abs_diff_eq!(gelu_scalar(1.0), oracle, epsilon = 1e-14);
        assert_abs_diff_eq!(gelu_scalar(1.0), 0.841_344_746_068_542_9, epsilon = 1e-14);
    }

    #[test]
    fn clip_examples() {
        let y = clip01(&RealTensor::vector(vec![0.5, 1.5, -0.2]).unwrap());
        assert_eq!(y.data(), &[0.5, 1.0, 0.0]);
        assert_eq!(clip01_mask(0.0), 0.0);
        assert_eq!(clip01_mask(1.0), 0.0);
        assert_eq!(clip01_mask(0.3), 1.0);
    }
}
