//! Category preference model: a contextual encoder followed by one
//! independent sigmoid head per category token.

use ndarray::{Array1, Array2, ArrayView1, Axis};
use rand::Rng;

use crate::encoder_input::EncodedInput;
use crate::error::{Error, Result};
use crate::nn::{join, normal_matrix, sigmoid, visit1, visit1_mut, visit2, visit2_mut, BertCache, BertEncoder, Parameterized, Visit, VisitMut};
use crate::scalar::{lit, Scalar};

/// Row `i` of `weight` and entry `i` of `bias` form the head for category `i`.
#[derive(Debug, Clone, PartialEq)]
pub struct CategoryHeads<T> {
    pub weight: Array2<T>,
    pub bias: Array1<T>,
}

/// Per-category interest, each component in (0, 1), in vocabulary order.
#[derive(Debug, Clone, PartialEq)]
pub struct CategoryPreference<T> {
    pub values: Array1<T>,
}

impl<T: Scalar> CategoryPreference<T> {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.values.iter().map(|v| v.to_f64_lossy()).collect()
    }
}

impl<T: Scalar> CategoryHeads<T> {
    pub fn new<R: Rng + ?Sized>(num_categories: usize, hidden: usize, init_std: f64, rng: &mut R) -> Self {
        Self {
            weight: normal_matrix(num_categories, hidden, init_std, rng),
            bias: Array1::zeros(num_categories),
        }
    }

    pub fn zeros(num_categories: usize, hidden: usize) -> Self {
        Self {
            weight: Array2::zeros((num_categories, hidden)),
            bias: Array1::zeros(num_categories),
        }
    }

    pub fn num_categories(&self) -> usize {
        self.bias.len()
    }

    pub fn hidden_size(&self) -> usize {
        self.weight.ncols()
    }

    fn check(&self, hiddens: &Array2<T>) -> Result<()> {
        if hiddens.nrows() != self.num_categories() {
            return Err(Error::Shape {
                context: "category hidden states (rows)",
                expected: self.num_categories(),
                actual: hiddens.nrows(),
            });
        }
        if hiddens.ncols() != self.hidden_size() {
            return Err(Error::Shape {
                context: "category hidden states (width)",
                expected: self.hidden_size(),
                actual: hiddens.ncols(),
            });
        }
        Ok(())
    }

    /// `sigmoid(W_i · h_i + b_i)` for each category `i`. `hiddens` is `[|C|, hid]`.
    pub fn predict_preferences(&self, hiddens: &Array2<T>) -> Result<CategoryPreference<T>> {
        self.check(hiddens)?;
        let values = Array1::from_shape_fn(self.num_categories(), |i| {
            sigmoid(self.weight.row(i).dot(&hiddens.row(i)) + self.bias[i])
        });
        Ok(CategoryPreference { values })
    }

    /// Given `dL/dpref`, accumulates head gradients into `grad` and returns
    /// `dL/dhiddens`.
    pub fn backward(
        &self,
        hiddens: &Array2<T>,
        pref: &CategoryPreference<T>,
        d_pref: ArrayView1<T>,
        grad: &mut CategoryHeads<T>,
    ) -> Array2<T> {
        let mut d_hidden = Array2::zeros(hiddens.raw_dim());
        for i in 0..self.num_categories() {
            let p = pref.values[i];
            let dz = d_pref[i] * p * (T::one() - p);
            grad.bias[i] += dz;
            grad.weight.row_mut(i).scaled_add(dz, &hiddens.row(i));
            d_hidden.row_mut(i).scaled_add(dz, &self.weight.row(i));
        }
        d_hidden
    }
}

impl<T: Scalar> Parameterized<T> for CategoryHeads<T> {
    fn visit_params(&self, prefix: &str, f: &mut Visit<'_, T>) {
        visit2(prefix, "weight", &self.weight, f);
        visit1(prefix, "bias", &self.bias, f);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut VisitMut<'_, T>) {
        visit2_mut(prefix, "weight", &mut self.weight, f);
        visit1_mut(prefix, "bias", &mut self.bias, f);
    }
}

/// `sqrt(mean_i (pred_i - target_i)^2)` for one sample.
pub fn rmse_loss<T: Scalar>(pred: ArrayView1<T>, target: ArrayView1<T>) -> T {
    let n: T = lit(pred.len() as f64);
    let sq = pred.iter().zip(target.iter()).fold(T::zero(), |a, (&p, &t)| a + (p - t) * (p - t));
    (sq / n).sqrt()
}

/// RMSE and its gradient with respect to `pred`. At zero error the gradient
/// is taken as zero.
pub fn rmse_loss_grad<T: Scalar>(pred: ArrayView1<T>, target: ArrayView1<T>) -> (T, Array1<T>) {
    let loss = rmse_loss(pred, target);
    if loss == T::zero() {
        return (loss, Array1::zeros(pred.len()));
    }
    let scale = T::one() / (lit::<T>(pred.len() as f64) * loss);
    let grad = Array1::from_shape_fn(pred.len(), |i| (pred[i] - target[i]) * scale);
    (loss, grad)
}

/// Mean of per-sample RMSE over the rows of `pred` and `target`.
pub fn batch_rmse<T: Scalar>(pred: &Array2<T>, target: &Array2<T>) -> T {
    let n: T = lit(pred.nrows() as f64);
    pred.axis_iter(Axis(0))
        .zip(target.axis_iter(Axis(0)))
        .fold(T::zero(), |a, (p, t)| a + rmse_loss(p, t))
        / n
}

/// Encoder plus category heads.
#[derive(Debug, Clone, PartialEq)]
pub struct PreferenceModel<T> {
    pub encoder: BertEncoder<T>,
    pub heads: CategoryHeads<T>,
}

pub struct PreferenceCache<T> {
    encoder: BertCache<T>,
    seq_len: usize,
    cat_positions: Vec<usize>,
    hiddens: Array2<T>,
    pub preference: CategoryPreference<T>,
}

impl<T: Scalar> PreferenceModel<T> {
    pub fn new<R: Rng + ?Sized>(encoder: BertEncoder<T>, num_categories: usize, rng: &mut R) -> Self {
        let c = encoder.config();
        let heads = CategoryHeads::new(num_categories, c.hidden_size, c.initializer_range, rng);
        Self { encoder, heads }
    }

    pub fn num_categories(&self) -> usize {
        self.heads.num_categories()
    }

    /// Inference-mode prediction.
    pub fn predict(&self, input: &EncodedInput) -> Result<CategoryPreference<T>> {
        let hiddens = crate::encoder_input::encode(input, &self.encoder)?;
        self.heads.predict_preferences(&hiddens)
    }

    /// Training forward pass; dropout is active when `rng` is given.
    pub fn forward<R: Rng + ?Sized>(&self, input: &EncodedInput, rng: Option<&mut R>) -> Result<PreferenceCache<T>> {
        let (out, encoder) = self.encoder.forward(input, rng)?;
        let hiddens = out.select(Axis(0), &input.cat_positions);
        let preference = self.heads.predict_preferences(&hiddens)?;
        Ok(PreferenceCache {
            encoder,
            seq_len: out.nrows(),
            cat_positions: input.cat_positions.clone(),
            hiddens,
            preference,
        })
    }

    pub fn backward(&self, cache: &PreferenceCache<T>, d_pref: ArrayView1<T>, grads: &mut PreferenceModel<T>) {
        let d_hidden = self.heads.backward(&cache.hiddens, &cache.preference, d_pref, &mut grads.heads);
        let mut d_out = Array2::zeros((cache.seq_len, self.heads.hidden_size()));
        for (row, &pos) in cache.cat_positions.iter().enumerate() {
            let mut r = d_out.row_mut(pos);
            r += &d_hidden.row(row);
        }
        self.encoder.backward(&cache.encoder, &d_out, &mut grads.encoder);
    }
}

impl<T: Scalar> Parameterized<T> for PreferenceModel<T> {
    fn visit_params(&self, prefix: &str, f: &mut Visit<'_, T>) {
        self.encoder.visit_params(&join(prefix, "bert"), f);
        self.heads.visit_params(&join(prefix, "heads"), f);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut VisitMut<'_, T>) {
        self.encoder.visit_params_mut(&join(prefix, "bert"), f);
        self.heads.visit_params_mut(&join(prefix, "heads"), f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_heads_give_one_half() {
        let heads = CategoryHeads::<f64>::zeros(19, 4);
        let h = Array2::from_elem((19, 4), 3.0);
        let p = heads.predict_preferences(&h).unwrap();
        assert!(p.values.iter().all(|&v| v == 0.5));
    }

    #[test]
    fn large_bias_saturates_one_component_only() {
        let mut heads = CategoryHeads::<f64>::zeros(3, 2);
        heads.bias[1] = 20.0;
        let p = heads.predict_preferences(&Array2::ones((3, 2))).unwrap();
        assert!(p.values[1] > 0.999);
        assert_eq!(p.values[0], 0.5);
        assert_eq!(p.values[2], 0.5);
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let heads = CategoryHeads::<f32>::zeros(3, 2);
        assert!(heads.predict_preferences(&Array2::zeros((2, 2))).is_err());
        assert!(heads.predict_preferences(&Array2::zeros((3, 5))).is_err());
    }

    #[test]
    fn rmse_hand_values() {
        let t = Array1::<f64>::zeros(19);
        assert_eq!(rmse_loss(t.view(), t.view()), 0.0);
        let half = Array1::from_elem(19, 0.5);
        let mut binary = Array1::zeros(19);
        binary[3] = 1.0;
        binary[7] = 1.0;
        assert_eq!(rmse_loss(half.view(), binary.view()), 0.5);
        let mut one = Array1::zeros(19);
        one[0] = 1.0;
        assert!((rmse_loss(one.view(), t.view()) - (1.0f64 / 19.0).sqrt()).abs() < 1e-12);
        assert!((rmse_loss(one.view(), t.view()) - 0.2294).abs() < 5e-5);
    }

    #[test]
    fn rmse_grad_matches_finite_difference() {
        let p = array![0.2f64, 0.9, 0.4];
        let t = array![0.0, 1.0, 0.5];
        let (_, g) = rmse_loss_grad(p.view(), t.view());
        for i in 0..3 {
            let mut a = p.clone();
            a[i] += 1e-6;
            let mut b = p.clone();
            b[i] -= 1e-6;
            let num = (rmse_loss(a.view(), t.view()) - rmse_loss(b.view(), t.view())) / 2e-6;
            assert!((g[i] - num).abs() < 1e-8);
        }
    }

    #[test]
    fn batch_rmse_is_mean_of_rows() {
        let p = array![[1.0f64, 0.0], [0.5, 0.5]];
        let t = array![[0.0, 0.0], [0.5, 0.5]];
        assert!((batch_rmse(&p, &t) - 0.5f64.sqrt() / 2.0).abs() < 1e-12);
    }

    #[test]
    fn heads_backward_matches_finite_difference() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let heads = CategoryHeads::<f64>::new(3, 4, 0.5, &mut rng);
        let h: Array2<f64> = normal_matrix(3, 4, 1.0, &mut rng);
        let target = array![1.0, 0.0, 0.5];
        let loss = |hd: &CategoryHeads<f64>, h: &Array2<f64>| {
            rmse_loss(hd.predict_preferences(h).unwrap().values.view(), target.view())
        };
        let pref = heads.predict_preferences(&h).unwrap();
        let (_, d_pref) = rmse_loss_grad(pref.values.view(), target.view());
        let mut grad = CategoryHeads::zeros(3, 4);
        let dh = heads.backward(&h, &pref, d_pref.view(), &mut grad);
        let eps = 1e-6;
        for i in 0..3 {
            for j in 0..4 {
                let (mut a, mut b) = (heads.clone(), heads.clone());
                a.weight[[i, j]] += eps;
                b.weight[[i, j]] -= eps;
                let num = (loss(&a, &h) - loss(&b, &h)) / (2.0 * eps);
                assert!((grad.weight[[i, j]] - num).abs() < 1e-8);
                let (mut ha, mut hb) = (h.clone(), h.clone());
                ha[[i, j]] += eps;
                hb[[i, j]] -= eps;
                let num = (loss(&heads, &ha) - loss(&heads, &hb)) / (2.0 * eps);
                assert!((dh[[i, j]] - num).abs() < 1e-8);
            }
        }
    }
}
