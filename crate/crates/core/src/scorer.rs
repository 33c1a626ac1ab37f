//! Item scorer: an affine map from category preferences to item logits,
//! normalized with softmax.

use std::cmp::Ordering;

use ndarray::{Array1, Array2, ArrayView1, Axis};

use crate::error::{Error, Result};
use crate::nn::{log_sum_exp, softmax, visit1, visit1_mut, visit2, visit2_mut, Parameterized, Visit, VisitMut};
use crate::scalar::{lit, Scalar};

/// `weight` is `[|I|, |C|]`, `bias` is `[|I|]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ItemScorer<T> {
    pub weight: Array2<T>,
    pub bias: Array1<T>,
}

/// Softmax output together with the logits and log-normalizer it came from.
#[derive(Debug, Clone, PartialEq)]
pub struct RecommendationScores<T> {
    pub logits: Array1<T>,
    pub probs: Array1<T>,
    pub log_norm: T,
}

impl<T: Scalar> RecommendationScores<T> {
    pub fn from_logits(logits: Array1<T>) -> Self {
        let log_norm = log_sum_exp(logits.view());
        let probs = softmax(logits.view());
        Self { logits, probs, log_norm }
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }
}

impl<T: Scalar> ItemScorer<T> {
    /// Zero weights and bias: the uniform distribution over items.
    pub fn zeros(num_items: usize, num_categories: usize) -> Self {
        Self {
            weight: Array2::zeros((num_items, num_categories)),
            bias: Array1::zeros(num_items),
        }
    }

    pub fn num_items(&self) -> usize {
        self.bias.len()
    }

    pub fn num_categories(&self) -> usize {
        self.weight.ncols()
    }

    fn check(&self, pref: ArrayView1<T>) -> Result<()> {
        if pref.len() != self.num_categories() {
            return Err(Error::Shape {
                context: "category preference",
                expected: self.num_categories(),
                actual: pref.len(),
            });
        }
        if pref.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("category preference fed to the item scorer".into()));
        }
        Ok(())
    }

    pub fn logits(&self, pref: ArrayView1<T>) -> Result<Array1<T>> {
        self.check(pref)?;
        Ok(self.weight.dot(&pref) + &self.bias)
    }

    /// `softmax(W · pref + b)`.
    pub fn score_items(&self, pref: ArrayView1<T>) -> Result<RecommendationScores<T>> {
        Ok(RecommendationScores::from_logits(self.logits(pref)?))
    }

    /// Accumulates `d CE / d(W, b)` for one sample into `grad` and returns
    /// `d CE / d pref`.
    pub fn backward(
        &self,
        pref: ArrayView1<T>,
        scores: &RecommendationScores<T>,
        target: usize,
        grad: &mut ItemScorer<T>,
    ) -> Array1<T> {
        let mut d_logits = scores.probs.clone();
        d_logits[target] -= T::one();
        grad.bias += &d_logits;
        for (mut row, &d) in grad.weight.axis_iter_mut(Axis(0)).zip(d_logits.iter()) {
            row.scaled_add(d, &pref);
        }
        self.weight.t().dot(&d_logits)
    }

    /// Mean cross-entropy over a batch of preference rows and, when `grad` is
    /// given, the accumulated gradient of that mean.
    pub fn batch_loss(&self, prefs: &Array2<T>, targets: &[usize], grad: Option<&mut ItemScorer<T>>) -> Result<T> {
        if prefs.nrows() != targets.len() {
            return Err(Error::Shape {
                context: "scorer batch targets",
                expected: prefs.nrows(),
                actual: targets.len(),
            });
        }
        if prefs.ncols() != self.num_categories() {
            return Err(Error::Shape {
                context: "scorer batch width",
                expected: self.num_categories(),
                actual: prefs.ncols(),
            });
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= self.num_items()) {
            return Err(Error::UnknownItem(bad));
        }
        let n: T = lit(targets.len() as f64);
        let mut logits = prefs.dot(&self.weight.t()) + &self.bias;
        let mut total = T::zero();
        for (mut row, &t) in logits.axis_iter_mut(Axis(0)).zip(targets) {
            let lse = log_sum_exp(row.view());
            total += lse - row[t];
            if grad.is_some() {
                row.mapv_inplace(|z| (z - lse).exp() / n);
                row[t] -= T::one() / n;
            }
        }
        if let Some(g) = grad {
            g.weight += &logits.t().dot(prefs);
            g.bias += &logits.sum_axis(Axis(0));
        }
        Ok(total / n)
    }
}

impl<T: Scalar> Parameterized<T> for ItemScorer<T> {
    fn visit_params(&self, prefix: &str, f: &mut Visit<'_, T>) {
        visit2(prefix, "weight", &self.weight, f);
        visit1(prefix, "bias", &self.bias, f);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut VisitMut<'_, T>) {
        visit2_mut(prefix, "weight", &mut self.weight, f);
        visit1_mut(prefix, "bias", &mut self.bias, f);
    }
}

/// `-ln scores[target]` in log-softmax form.
pub fn cross_entropy_loss<T: Scalar>(scores: &RecommendationScores<T>, target: usize) -> T {
    scores.log_norm - scores.logits[target]
}

/// Descending score, ascending index on ties. NaN sorts last.
fn rank_order<T: Scalar>(a: (usize, T), b: (usize, T)) -> Ordering {
    match b.1.partial_cmp(&a.1) {
        Some(Ordering::Equal) => a.0.cmp(&b.0),
        Some(o) => o,
        None => a.1.is_nan().cmp(&b.1.is_nan()).then(a.0.cmp(&b.0)),
    }
}

/// Top `k` entries of `scores`, best first. `k` is clamped to the length.
pub fn rank_items<T: Scalar>(scores: ArrayView1<T>, k: usize) -> Vec<(usize, T)> {
    let mut all: Vec<(usize, T)> = scores.iter().copied().enumerate().collect();
    let k = k.min(all.len());
    if k == 0 {
        return Vec::new();
    }
    if k < all.len() {
        all.select_nth_unstable_by(k - 1, |a, b| rank_order(*a, *b));
        all.truncate(k);
    }
    all.sort_unstable_by(|a, b| rank_order(*a, *b));
    all
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn zero_scorer_is_uniform() {
        let s = ItemScorer::<f64>::zeros(4, 3);
        let sc = s.score_items(array![0.1, 0.9, 0.5].view()).unwrap();
        assert!(sc.probs.iter().all(|&p| (p - 0.25).abs() < 1e-15));
    }

    #[test]
    fn toy_scores_and_loss() {
        let s = ItemScorer {
            weight: array![[1.0f64, 0.0], [0.0, 1.0], [0.0, 0.0]],
            bias: Array1::zeros(3),
        };
        let sc = s.score_items(array![1.0, 0.0].view()).unwrap();
        let e = std::f64::consts::E;
        let expect = [e / (e + 2.0), 1.0 / (e + 2.0), 1.0 / (e + 2.0)];
        for (p, e) in sc.probs.iter().zip(expect) {
            assert!((p - e).abs() < 1e-12);
        }
        assert!((sc.probs[0] - 0.5761).abs() < 5e-5);
        assert!((cross_entropy_loss(&sc, 0) - 0.5514).abs() < 5e-5);
    }

    #[test]
    fn uniform_loss_over_catalog() {
        let s = ItemScorer::<f64>::zeros(6924, 19);
        let sc = s.score_items(Array1::from_elem(19, 0.5).view()).unwrap();
        assert!((cross_entropy_loss(&sc, 17) - (6924f64).ln()).abs() < 1e-9);
        assert!((cross_entropy_loss(&sc, 17) - 8.8428).abs() < 1e-4);
    }

    #[test]
    fn dominant_target_has_near_zero_loss() {
        let sc = RecommendationScores::from_logits(array![20.0f64, 0.0, 0.0]);
        assert!(cross_entropy_loss(&sc, 0) < 1e-3);
    }

    #[test]
    fn non_finite_preference_rejected() {
        let s = ItemScorer::<f32>::zeros(2, 2);
        assert!(matches!(s.score_items(array![f32::NAN, 0.0].view()), Err(Error::NonFinite(_))));
        assert!(s.score_items(array![0.0f32].view()).is_err());
    }

    #[test]
    fn ranking_ties_and_order() {
        assert_eq!(rank_items(array![0.5f64, 0.3, 0.2].view(), 2), vec![(0, 0.5), (1, 0.3)]);
        let r = rank_items(array![0.1f64, 0.0, 0.3, 0.0, 0.3].view(), 3);
        assert_eq!(r, vec![(2, 0.3), (4, 0.3), (0, 0.1)]);
        assert_eq!(rank_items(array![1.0f32].view(), 5).len(), 1);
    }

    #[test]
    fn batch_loss_matches_per_sample() {
        let s = ItemScorer {
            weight: array![[0.3f64, -1.0], [2.0, 0.5], [0.0, 0.1]],
            bias: array![0.1, -0.2, 0.0],
        };
        let prefs = array![[0.2, 0.9], [0.7, 0.4]];
        let targets = [2, 0];
        let mut g_batch = ItemScorer::zeros(3, 2);
        let loss = s.batch_loss(&prefs, &targets, Some(&mut g_batch)).unwrap();
        let mut g_each = ItemScorer::zeros(3, 2);
        let mut total = 0.0;
        for (row, &t) in prefs.axis_iter(Axis(0)).zip(&targets) {
            let sc = s.score_items(row).unwrap();
            total += cross_entropy_loss(&sc, t);
            s.backward(row, &sc, t, &mut g_each);
        }
        assert!((loss - total / 2.0).abs() < 1e-12);
        for (a, b) in g_batch.weight.iter().zip(g_each.weight.iter()) {
            assert!((a - b / 2.0).abs() < 1e-12);
        }
        assert!(s.batch_loss(&prefs, &[0, 3], None).is_err());
    }
}
