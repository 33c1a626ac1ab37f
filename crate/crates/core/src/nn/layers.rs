use ndarray::{Array1, Array2, Axis};
use rand::Rng;

use super::{normal_matrix, visit1, visit1_mut, visit2, visit2_mut, Parameterized, Visit, VisitMut};
use crate::scalar::{lit, Scalar};

/// `y = x Wᵀ + b`, weight stored `[out, in]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear<T> {
    pub weight: Array2<T>,
    pub bias: Array1<T>,
}

impl<T: Scalar> Linear<T> {
    pub fn new<R: Rng + ?Sized>(inputs: usize, outputs: usize, init_std: f64, rng: &mut R) -> Self {
        Self {
            weight: normal_matrix(outputs, inputs, init_std, rng),
            bias: Array1::zeros(outputs),
        }
    }

    pub fn forward(&self, x: &Array2<T>) -> Array2<T> {
        x.dot(&self.weight.t()) + &self.bias
    }

    /// Accumulates parameter gradients into `grad`, returns `dL/dx`.
    pub fn backward(&self, x: &Array2<T>, dy: &Array2<T>, grad: &mut Linear<T>) -> Array2<T> {
        grad.weight += &dy.t().dot(x);
        grad.bias += &dy.sum_axis(Axis(0));
        dy.dot(&self.weight)
    }
}

impl<T: Scalar> Parameterized<T> for Linear<T> {
    fn visit_params(&self, prefix: &str, f: &mut Visit<'_, T>) {
        visit2(prefix, "weight", &self.weight, f);
        visit1(prefix, "bias", &self.bias, f);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut VisitMut<'_, T>) {
        visit2_mut(prefix, "weight", &mut self.weight, f);
        visit1_mut(prefix, "bias", &mut self.bias, f);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNorm<T> {
    pub weight: Array1<T>,
    pub bias: Array1<T>,
    pub eps: f64,
}

pub struct LayerNormCache<T> {
    normalized: Array2<T>,
    inv_std: Array1<T>,
}

impl<T: Scalar> LayerNorm<T> {
    pub fn new(dim: usize, eps: f64) -> Self {
        Self {
            weight: Array1::ones(dim),
            bias: Array1::zeros(dim),
            eps,
        }
    }

    pub fn forward(&self, x: &Array2<T>) -> (Array2<T>, LayerNormCache<T>) {
        let d: T = lit(x.ncols() as f64);
        let eps: T = lit(self.eps);
        let mut normalized = x.clone();
        let mut inv_std = Array1::zeros(x.nrows());
        for (mut row, s) in normalized.axis_iter_mut(Axis(0)).zip(inv_std.iter_mut()) {
            let mean = row.sum() / d;
            row.mapv_inplace(|v| v - mean);
            let var = row.fold(T::zero(), |a, &v| a + v * v) / d;
            let inv = T::one() / (var + eps).sqrt();
            row.mapv_inplace(|v| v * inv);
            *s = inv;
        }
        let y = &normalized * &self.weight + &self.bias;
        (y, LayerNormCache { normalized, inv_std })
    }

    pub fn backward(&self, cache: &LayerNormCache<T>, dy: &Array2<T>, grad: &mut LayerNorm<T>) -> Array2<T> {
        grad.weight += &(dy * &cache.normalized).sum_axis(Axis(0));
        grad.bias += &dy.sum_axis(Axis(0));
        let d: T = lit(dy.ncols() as f64);
        let mut dx = dy * &self.weight;
        for ((mut row, xhat), &inv) in dx
            .axis_iter_mut(Axis(0))
            .zip(cache.normalized.axis_iter(Axis(0)))
            .zip(cache.inv_std.iter())
        {
            let mean_g = row.sum() / d;
            let mean_gx = row.iter().zip(xhat.iter()).fold(T::zero(), |a, (&g, &x)| a + g * x) / d;
            for (g, &x) in row.iter_mut().zip(xhat.iter()) {
                *g = inv * (*g - mean_g - x * mean_gx);
            }
        }
        dx
    }
}

impl<T: Scalar> Parameterized<T> for LayerNorm<T> {
    fn visit_params(&self, prefix: &str, f: &mut Visit<'_, T>) {
        visit1(prefix, "weight", &self.weight, f);
        visit1(prefix, "bias", &self.bias, f);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut VisitMut<'_, T>) {
        visit1_mut(prefix, "weight", &mut self.weight, f);
        visit1_mut(prefix, "bias", &mut self.bias, f);
    }
}

/// Inverted dropout mask: entries are 0 or `1 / (1 - p)`.
#[derive(Debug, Clone)]
pub struct Dropout<T> {
    mask: Option<Array2<T>>,
}

impl<T: Scalar> Dropout<T> {
    pub fn sample<R: Rng + ?Sized>(shape: (usize, usize), p: f64, rng: Option<&mut R>) -> Self {
        match rng {
            Some(rng) if p > 0.0 => {
                let keep: T = lit(1.0 / (1.0 - p));
                let mask = Array2::from_shape_simple_fn(shape, || if rng.random::<f64>() < p { T::zero() } else { keep });
                Self { mask: Some(mask) }
            }
            _ => Self { mask: None },
        }
    }

    pub fn apply(&self, x: Array2<T>) -> Array2<T> {
        match &self.mask {
            Some(m) => x * m,
            None => x,
        }
    }
}

pub(crate) fn gelu<T: Scalar>(x: T) -> T {
    let half: T = lit(0.5);
    half * x * (T::one() + (x * lit(std::f64::consts::FRAC_1_SQRT_2)).erf())
}

pub(crate) fn gelu_grad<T: Scalar>(x: T) -> T {
    let half: T = lit(0.5);
    let cdf = half * (T::one() + (x * lit(std::f64::consts::FRAC_1_SQRT_2)).erf());
    let pdf = (-(x * x) * half).exp() * lit(1.0 / (2.0 * std::f64::consts::PI).sqrt());
    cdf + x * pdf
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn numeric_grad(f: &dyn Fn(f64) -> f64, x: f64) -> f64 {
        let h = 1e-6;
        (f(x + h) - f(x - h)) / (2.0 * h)
    }

    #[test]
    fn gelu_derivative_matches_finite_difference() {
        for &x in &[-3.0, -1.0, -0.1, 0.0, 0.3, 2.0] {
            let num = numeric_grad(&|v| gelu(v), x);
            assert!((gelu_grad(x) - num).abs() < 1e-7, "x={x}");
        }
    }

    #[test]
    fn layer_norm_backward_matches_finite_difference() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut ln = LayerNorm::<f64>::new(5, 1e-12);
        ln.weight = Array1::from_shape_simple_fn(5, || rng.random::<f64>() + 0.5);
        ln.bias = Array1::from_shape_simple_fn(5, || rng.random::<f64>());
        let x: Array2<f64> = normal_matrix(3, 5, 1.0, &mut rng);
        let w: Array2<f64> = normal_matrix(3, 5, 1.0, &mut rng);
        let loss = |x: &Array2<f64>| (ln.forward(x).0 * &w).sum();

        let (_, cache) = ln.forward(&x);
        let mut grad = LayerNorm::new(5, 1e-12);
        grad.weight.fill(0.0);
        let dx = ln.backward(&cache, &w, &mut grad);
        for i in 0..3 {
            for j in 0..5 {
                let mut xp = x.clone();
                xp[[i, j]] += 1e-6;
                let mut xm = x.clone();
                xm[[i, j]] -= 1e-6;
                let num = (loss(&xp) - loss(&xm)) / 2e-6;
                assert!((dx[[i, j]] - num).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn dropout_without_rng_is_identity() {
        let x = Array2::<f32>::ones((2, 3));
        let d = Dropout::<f32>::sample::<ChaCha8Rng>((2, 3), 0.5, None);
        assert_eq!(d.apply(x.clone()), x);
    }
}
