//! Minimal neural-network toolkit with explicit backward passes.
//!
//! Every trainable module implements [`Parameterized`]; a module of the same
//! type with zeroed values doubles as its gradient accumulator.

mod adam;
mod bert;
mod layers;
pub mod tensor_file;

pub use adam::{Adam, AdamConfig};
pub use bert::{BertCache, BertConfig, BertEncoder};
pub use layers::{Dropout, LayerNorm, LayerNormCache, Linear};

use ndarray::{Array1, Array2, ArrayView1, Axis};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use crate::scalar::{lit, Scalar};

/// Callback receiving a parameter's dotted name, shape and values.
pub type Visit<'a, T> = dyn FnMut(&str, &[usize], &[T]) + 'a;
pub type VisitMut<'a, T> = dyn FnMut(&str, &[usize], &mut [T]) + 'a;

/// Uniform access to a module's parameter tensors, in a fixed order.
pub trait Parameterized<T: Scalar> {
    fn visit_params(&self, prefix: &str, f: &mut Visit<'_, T>);

    fn visit_params_mut(&mut self, prefix: &str, f: &mut VisitMut<'_, T>);
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

pub(crate) fn visit2<T: Scalar>(
    prefix: &str,
    name: &str,
    a: &Array2<T>,
    f: &mut Visit<'_, T>,
) {
    f(&join(prefix, name), a.shape(), a.as_slice().expect("standard layout"));
}

pub(crate) fn visit2_mut<T: Scalar>(
    prefix: &str,
    name: &str,
    a: &mut Array2<T>,
    f: &mut VisitMut<'_, T>,
) {
    let shape = a.shape().to_vec();
    f(&join(prefix, name), &shape, a.as_slice_mut().expect("standard layout"));
}

pub(crate) fn visit1<T: Scalar>(
    prefix: &str,
    name: &str,
    a: &Array1<T>,
    f: &mut Visit<'_, T>,
) {
    f(&join(prefix, name), a.shape(), a.as_slice().expect("standard layout"));
}

pub(crate) fn visit1_mut<T: Scalar>(
    prefix: &str,
    name: &str,
    a: &mut Array1<T>,
    f: &mut VisitMut<'_, T>,
) {
    let shape = a.shape().to_vec();
    f(&join(prefix, name), &shape, a.as_slice_mut().expect("standard layout"));
}

/// A copy of `m` with every parameter set to zero.
pub fn zeros_like<T: Scalar, M: Parameterized<T> + Clone>(m: &M) -> M {
    let mut z = m.clone();
    z.visit_params_mut("", &mut |_, _, v| v.fill(T::zero()));
    z
}

pub fn param_count<T: Scalar, M: Parameterized<T> + ?Sized>(m: &M) -> usize {
    let mut n = 0;
    m.visit_params("", &mut |_, _, v| n += v.len());
    n
}

/// All parameters concatenated in visitation order.
pub fn flatten<T: Scalar, M: Parameterized<T> + ?Sized>(m: &M) -> Vec<T> {
    let mut out = Vec::new();
    m.visit_params("", &mut |_, _, v| out.extend_from_slice(v));
    out
}

/// `dst += src`, parameter-wise. Both must have identical structure.
pub fn accumulate<T: Scalar, M: Parameterized<T>>(dst: &mut M, src: &M) {
    let flat = flatten(src);
    let mut offset = 0;
    dst.visit_params_mut("", &mut |_, _, v| {
        let n = v.len();
        for (d, s) in v.iter_mut().zip(&flat[offset..offset + n]) {
            *d += *s;
        }
        offset += n;
    });
}

pub fn scale_params<T: Scalar, M: Parameterized<T>>(m: &mut M, factor: T) {
    m.visit_params_mut("", &mut |_, _, v| v.iter_mut().for_each(|x| *x *= factor));
}

/// SHA-256 over parameter names, shapes and little-endian values.
pub fn checksum<T: Scalar, M: Parameterized<T> + ?Sized>(m: &M) -> String {
    let mut h = Sha256::new();
    let mut buf = Vec::new();
    m.visit_params("", &mut |name, shape, v| {
        h.update(name.as_bytes());
        for d in shape {
            h.update((*d as u64).to_le_bytes());
        }
        buf.clear();
        for x in v {
            x.write_le(&mut buf);
        }
        h.update(&buf);
    });
    hex::encode(h.finalize())
}

pub fn all_finite<T: Scalar, M: Parameterized<T> + ?Sized>(m: &M) -> bool {
    let mut ok = true;
    m.visit_params("", &mut |_, _, v| ok &= v.iter().all(|x| x.is_finite()));
    ok
}

pub fn normal_matrix<T: Scalar, R: Rng + ?Sized>(rows: usize, cols: usize, std: f64, rng: &mut R) -> Array2<T> {
    let dist = Normal::new(0.0, std).expect("valid std");
    Array2::from_shape_simple_fn((rows, cols), || lit(dist.sample(rng)))
}

#[inline]
pub fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// Max-subtracted softmax of a vector.
pub fn softmax<T: Scalar>(logits: ArrayView1<T>) -> Array1<T> {
    let max = logits.fold(T::neg_infinity(), |m, &x| m.max(x));
    let mut out = logits.mapv(|x| (x - max).exp());
    let sum = out.sum();
    out /= sum;
    out
}

/// `ln Σ exp(x)` computed with max subtraction.
pub fn log_sum_exp<T: Scalar>(logits: ArrayView1<T>) -> T {
    let max = logits.fold(T::neg_infinity(), |m, &x| m.max(x));
    max + logits.fold(T::zero(), |s, &x| s + (x - max).exp()).ln()
}

/// Row-wise softmax in place.
pub(crate) fn softmax_rows<T: Scalar>(m: &mut Array2<T>) {
    for mut row in m.axis_iter_mut(Axis(0)) {
        let max = row.fold(T::neg_infinity(), |a, &x| a.max(x));
        row.mapv_inplace(|x| (x - max).exp());
        let sum = row.sum();
        row /= sum;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn sigmoid_is_stable_at_extremes() {
        assert_eq!(sigmoid(0.0f64), 0.5);
        assert!(sigmoid(20.0f64) > 0.999);
        assert!(sigmoid(-800.0f64) >= 0.0);
        assert!(sigmoid(800.0f64) <= 1.0);
    }

    #[test]
    fn softmax_and_lse_agree() {
        let x = array![1.0f64, 0.0, 0.0];
        let p = softmax(x.view());
        let lse = log_sum_exp(x.view());
        for i in 0..3 {
            assert!((p[i].ln() - (x[i] - lse)).abs() < 1e-12);
        }
        assert!((p[0] - 0.576_116_884_9).abs() < 1e-9);
    }
}
