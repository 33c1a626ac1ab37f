//! Bidirectional transformer encoder with the BERT parameter layout, so
//! pretrained `bert-base`-style checkpoints load by tensor name.

use ndarray::{s, Array2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::layers::{gelu, gelu_grad, Dropout, LayerNorm, LayerNormCache, Linear};
use super::{join, normal_matrix, softmax_rows, visit2, visit2_mut, Parameterized, Visit, VisitMut};
use crate::encoder_input::{EncodedInput, Encoder};
use crate::error::{Error, Result};
use crate::scalar::{lit, Scalar};

fn default_type_vocab() -> usize {
    2
}
fn default_eps() -> f64 {
    1e-12
}
fn default_init_range() -> f64 {
    0.02
}

/// Field names follow the Hugging Face `config.json` of BERT models.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BertConfig {
    pub vocab_size: usize,
    pub hidden_size: usize,
    pub num_hidden_layers: usize,
    pub num_attention_heads: usize,
    pub intermediate_size: usize,
    pub max_position_embeddings: usize,
    #[serde(default = "default_type_vocab")]
    pub type_vocab_size: usize,
    #[serde(default = "default_eps")]
    pub layer_norm_eps: f64,
    #[serde(default)]
    pub hidden_dropout_prob: f64,
    #[serde(default = "default_init_range")]
    pub initializer_range: f64,
}

impl BertConfig {
    /// `bert-base-uncased` shape for a given vocabulary size.
    pub fn base(vocab_size: usize) -> Self {
        Self {
            vocab_size,
            hidden_size: 768,
            num_hidden_layers: 12,
            num_attention_heads: 12,
            intermediate_size: 3072,
            max_position_embeddings: 512,
            type_vocab_size: 2,
            layer_norm_eps: 1e-12,
            hidden_dropout_prob: 0.1,
            initializer_range: 0.02,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden_size == 0 || self.num_attention_heads == 0 || !self.hidden_size.is_multiple_of(self.num_attention_heads) {
            return Err(Error::Config(format!(
                "hidden_size {} must be a positive multiple of num_attention_heads {}",
                self.hidden_size, self.num_attention_heads
            )));
        }
        if self.type_vocab_size < 2 {
            return Err(Error::Config("type_vocab_size must be at least 2".into()));
        }
        if !(0.0..1.0).contains(&self.hidden_dropout_prob) {
            return Err(Error::Config("hidden_dropout_prob must be in [0, 1)".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Embeddings<T> {
    word: Array2<T>,
    position: Array2<T>,
    token_type: Array2<T>,
    layer_norm: LayerNorm<T>,
}

#[derive(Debug, Clone, PartialEq)]
struct Layer<T> {
    query: Linear<T>,
    key: Linear<T>,
    value: Linear<T>,
    attn_out: Linear<T>,
    attn_norm: LayerNorm<T>,
    intermediate: Linear<T>,
    output: Linear<T>,
    out_norm: LayerNorm<T>,
}

struct LayerCache<T> {
    input: Array2<T>,
    q: Array2<T>,
    k: Array2<T>,
    v: Array2<T>,
    probs: Vec<Array2<T>>,
    ctx: Array2<T>,
    attn_drop: Dropout<T>,
    attn_norm: LayerNormCache<T>,
    h1: Array2<T>,
    inter_pre: Array2<T>,
    inter_act: Array2<T>,
    ffn_drop: Dropout<T>,
    out_norm: LayerNormCache<T>,
}

/// Activations kept from a training forward pass.
pub struct BertCache<T> {
    token_ids: Vec<usize>,
    type_ids: Vec<usize>,
    emb_norm: LayerNormCache<T>,
    emb_drop: Dropout<T>,
    layers: Vec<LayerCache<T>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BertEncoder<T> {
    config: BertConfig,
    embeddings: Embeddings<T>,
    layers: Vec<Layer<T>>,
}

impl<T: Scalar> Layer<T> {
    fn new<R: Rng + ?Sized>(c: &BertConfig, rng: &mut R) -> Self {
        let (h, std) = (c.hidden_size, c.initializer_range);
        Self {
            query: Linear::new(h, h, std, rng),
            key: Linear::new(h, h, std, rng),
            value: Linear::new(h, h, std, rng),
            attn_out: Linear::new(h, h, std, rng),
            attn_norm: LayerNorm::new(h, c.layer_norm_eps),
            intermediate: Linear::new(h, c.intermediate_size, std, rng),
            output: Linear::new(c.intermediate_size, h, std, rng),
            out_norm: LayerNorm::new(h, c.layer_norm_eps),
        }
    }

    fn forward<R: Rng + ?Sized>(&self, x: Array2<T>, heads: usize, p: f64, mut rng: Option<&mut R>) -> (Array2<T>, LayerCache<T>) {
        let (n, d) = x.dim();
        let dh = d / heads;
        let scale: T = lit(1.0 / (dh as f64).sqrt());
        let q = self.query.forward(&x);
        let k = self.key.forward(&x);
        let v = self.value.forward(&x);
        let mut ctx = Array2::zeros((n, d));
        let mut probs = Vec::with_capacity(heads);
        for h in 0..heads {
            let cols = s![.., h * dh..(h + 1) * dh];
            let mut scores = q.slice(cols).dot(&k.slice(cols).t());
            scores.mapv_inplace(|s| s * scale);
            softmax_rows(&mut scores);
            ctx.slice_mut(cols).assign(&scores.dot(&v.slice(cols)));
            probs.push(scores);
        }
        let attn_drop = Dropout::sample((n, d), p, rng.as_deref_mut());
        let a = attn_drop.apply(self.attn_out.forward(&ctx));
        let (h1, attn_norm) = self.attn_norm.forward(&(a + &x));
        let inter_pre = self.intermediate.forward(&h1);
        let inter_act = inter_pre.mapv(gelu);
        let ffn_drop = Dropout::sample((n, d), p, rng);
        let o = ffn_drop.apply(self.output.forward(&inter_act));
        let (out, out_norm) = self.out_norm.forward(&(o + &h1));
        let cache = LayerCache {
            input: x,
            q,
            k,
            v,
            probs,
            ctx,
            attn_drop,
            attn_norm,
            h1,
            inter_pre,
            inter_act,
            ffn_drop,
            out_norm,
        };
        (out, cache)
    }

    fn backward(&self, c: &LayerCache<T>, d_out: &Array2<T>, heads: usize, g: &mut Layer<T>) -> Array2<T> {
        let d = c.input.ncols();
        let dh = d / heads;
        let scale: T = lit(1.0 / (dh as f64).sqrt());

        let d_sum2 = self.out_norm.backward(&c.out_norm, d_out, &mut g.out_norm);
        let d_o = c.ffn_drop.apply(d_sum2.clone());
        let d_act = self.output.backward(&c.inter_act, &d_o, &mut g.output);
        let d_pre = d_act * &c.inter_pre.mapv(gelu_grad);
        let dh1 = d_sum2 + self.intermediate.backward(&c.h1, &d_pre, &mut g.intermediate);

        let d_sum1 = self.attn_norm.backward(&c.attn_norm, &dh1, &mut g.attn_norm);
        let d_a = c.attn_drop.apply(d_sum1.clone());
        let d_ctx = self.attn_out.backward(&c.ctx, &d_a, &mut g.attn_out);

        let mut dq = Array2::zeros(c.q.raw_dim());
        let mut dk = Array2::zeros(c.k.raw_dim());
        let mut dv = Array2::zeros(c.v.raw_dim());
        for (h, p) in c.probs.iter().enumerate() {
            let cols = s![.., h * dh..(h + 1) * dh];
            let d_ctx_h = d_ctx.slice(cols);
            let mut ds = d_ctx_h.dot(&c.v.slice(cols).t());
            dv.slice_mut(cols).assign(&p.t().dot(&d_ctx_h));
            for (mut ds_row, p_row) in ds.axis_iter_mut(Axis(0)).zip(p.axis_iter(Axis(0))) {
                let dot = ds_row.iter().zip(p_row.iter()).fold(T::zero(), |a, (&x, &y)| a + x * y);
                for (x, &y) in ds_row.iter_mut().zip(p_row.iter()) {
                    *x = y * (*x - dot) * scale;
                }
            }
            dq.slice_mut(cols).assign(&ds.dot(&c.k.slice(cols)));
            dk.slice_mut(cols).assign(&ds.t().dot(&c.q.slice(cols)));
        }
        let mut dx = d_sum1;
        dx += &self.query.backward(&c.input, &dq, &mut g.query);
        dx += &self.key.backward(&c.input, &dk, &mut g.key);
        dx += &self.value.backward(&c.input, &dv, &mut g.value);
        dx
    }
}

impl<T: Scalar> BertEncoder<T> {
    pub fn new<R: Rng + ?Sized>(config: BertConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let (h, std) = (config.hidden_size, config.initializer_range);
        let embeddings = Embeddings {
            word: normal_matrix(config.vocab_size, h, std, rng),
            position: normal_matrix(config.max_position_embeddings, h, std, rng),
            token_type: normal_matrix(config.type_vocab_size, h, std, rng),
            layer_norm: LayerNorm::new(h, config.layer_norm_eps),
        };
        let layers = (0..config.num_hidden_layers).map(|_| Layer::new(&config, rng)).collect();
        Ok(Self {
            config,
            embeddings,
            layers,
        })
    }

    pub fn config(&self) -> &BertConfig {
        &self.config
    }

    pub fn set_dropout(&mut self, p: f64) {
        self.config.hidden_dropout_prob = p;
    }

    /// Grows the word-embedding table to `vocab_size`, initializing new rows
    /// from the configured normal distribution.
    pub fn resize_token_embeddings<R: Rng + ?Sized>(&mut self, vocab_size: usize, rng: &mut R) {
        let old = &self.embeddings.word;
        if vocab_size <= old.nrows() {
            return;
        }
        let mut word = normal_matrix(vocab_size, self.config.hidden_size, self.config.initializer_range, rng);
        word.slice_mut(s![..old.nrows(), ..]).assign(old);
        self.embeddings.word = word;
        self.config.vocab_size = vocab_size;
    }

    fn check_input(&self, input: &EncodedInput) -> Result<()> {
        if input.len() > self.config.max_position_embeddings {
            return Err(Error::SequenceTooLong {
                len: input.len(),
                capacity: self.config.max_position_embeddings,
            });
        }
        if let Some(&bad) = input.token_ids.iter().find(|&&t| t as usize >= self.config.vocab_size) {
            return Err(Error::Shape {
                context: "token id",
                expected: self.config.vocab_size,
                actual: bad as usize,
            });
        }
        Ok(())
    }

    /// Full forward pass. Dropout is active only when `rng` is given.
    pub fn forward<R: Rng + ?Sized>(&self, input: &EncodedInput, mut rng: Option<&mut R>) -> Result<(Array2<T>, BertCache<T>)> {
        self.check_input(input)?;
        let n = input.len();
        let h = self.config.hidden_size;
        let p = self.config.hidden_dropout_prob;
        let token_ids: Vec<usize> = input.token_ids.iter().map(|&t| t as usize).collect();
        let type_ids: Vec<usize> = input.segment_ids.iter().map(|s| s.type_id()).collect();

        let e = &self.embeddings;
        let mut x = Array2::zeros((n, h));
        for (i, mut row) in x.axis_iter_mut(Axis(0)).enumerate() {
            row.assign(&e.word.row(token_ids[i]));
            row += &e.position.row(i);
            row += &e.token_type.row(type_ids[i]);
        }
        let (x, emb_norm) = e.layer_norm.forward(&x);
        let emb_drop = Dropout::sample((n, h), p, rng.as_deref_mut());
        let mut x = emb_drop.apply(x);

        let mut layers = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let (out, cache) = layer.forward(x, self.config.num_attention_heads, p, rng.as_deref_mut());
            layers.push(cache);
            x = out;
        }
        Ok((
            x,
            BertCache {
                token_ids,
                type_ids,
                emb_norm,
                emb_drop,
                layers,
            },
        ))
    }

    /// Accumulates parameter gradients for `dL/d(output)` into `grads`.
    pub fn backward(&self, cache: &BertCache<T>, d_out: &Array2<T>, grads: &mut BertEncoder<T>) {
        let heads = self.config.num_attention_heads;
        let mut d = d_out.clone();
        for ((layer, c), g) in self.layers.iter().zip(&cache.layers).zip(grads.layers.iter_mut()).rev() {
            d = layer.backward(c, &d, heads, g);
        }
        let d = cache.emb_drop.apply(d);
        let ge = &mut grads.embeddings;
        let de = self.embeddings.layer_norm.backward(&cache.emb_norm, &d, &mut ge.layer_norm);
        for (i, row) in de.axis_iter(Axis(0)).enumerate() {
            let mut w = ge.word.row_mut(cache.token_ids[i]);
            w += &row;
            let mut p = ge.position.row_mut(i);
            p += &row;
            let mut t = ge.token_type.row_mut(cache.type_ids[i]);
            t += &row;
        }
    }
}

impl<T: Scalar> Encoder<T> for BertEncoder<T> {
    fn hidden_size(&self) -> usize {
        self.config.hidden_size
    }

    fn max_positions(&self) -> usize {
        self.config.max_position_embeddings
    }

    fn encode_sequence(&self, input: &EncodedInput) -> Result<Array2<T>> {
        Ok(self.forward::<rand_chacha::ChaCha8Rng>(input, None)?.0)
    }
}

impl<T: Scalar> Parameterized<T> for Embeddings<T> {
    fn visit_params(&self, prefix: &str, f: &mut Visit<'_, T>) {
        visit2(prefix, "word_embeddings.weight", &self.word, f);
        visit2(prefix, "position_embeddings.weight", &self.position, f);
        visit2(prefix, "token_type_embeddings.weight", &self.token_type, f);
        self.layer_norm.visit_params(&join(prefix, "LayerNorm"), f);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut VisitMut<'_, T>) {
        visit2_mut(prefix, "word_embeddings.weight", &mut self.word, f);
        visit2_mut(prefix, "position_embeddings.weight", &mut self.position, f);
        visit2_mut(prefix, "token_type_embeddings.weight", &mut self.token_type, f);
        self.layer_norm.visit_params_mut(&join(prefix, "LayerNorm"), f);
    }
}

impl<T: Scalar> Parameterized<T> for Layer<T> {
    fn visit_params(&self, prefix: &str, f: &mut Visit<'_, T>) {
        self.query.visit_params(&join(prefix, "attention.self.query"), f);
        self.key.visit_params(&join(prefix, "attention.self.key"), f);
        self.value.visit_params(&join(prefix, "attention.self.value"), f);
        self.attn_out.visit_params(&join(prefix, "attention.output.dense"), f);
        self.attn_norm.visit_params(&join(prefix, "attention.output.LayerNorm"), f);
        self.intermediate.visit_params(&join(prefix, "intermediate.dense"), f);
        self.output.visit_params(&join(prefix, "output.dense"), f);
        self.out_norm.visit_params(&join(prefix, "output.LayerNorm"), f);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut VisitMut<'_, T>) {
        self.query.visit_params_mut(&join(prefix, "attention.self.query"), f);
        self.key.visit_params_mut(&join(prefix, "attention.self.key"), f);
        self.value.visit_params_mut(&join(prefix, "attention.self.value"), f);
        self.attn_out.visit_params_mut(&join(prefix, "attention.output.dense"), f);
        self.attn_norm.visit_params_mut(&join(prefix, "attention.output.LayerNorm"), f);
        self.intermediate.visit_params_mut(&join(prefix, "intermediate.dense"), f);
        self.output.visit_params_mut(&join(prefix, "output.dense"), f);
        self.out_norm.visit_params_mut(&join(prefix, "output.LayerNorm"), f);
    }
}

impl<T: Scalar> Parameterized<T> for BertEncoder<T> {
    fn visit_params(&self, prefix: &str, f: &mut Visit<'_, T>) {
        self.embeddings.visit_params(&join(prefix, "embeddings"), f);
        for (i, l) in self.layers.iter().enumerate() {
            l.visit_params(&join(prefix, &format!("encoder.layer.{i}")), f);
        }
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut VisitMut<'_, T>) {
        self.embeddings.visit_params_mut(&join(prefix, "embeddings"), f);
        for (i, l) in self.layers.iter_mut().enumerate() {
            l.visit_params_mut(&join(prefix, &format!("encoder.layer.{i}")), f);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder_input::Segment;
    use crate::nn::{flatten, zeros_like};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn tiny_config() -> BertConfig {
        BertConfig {
            vocab_size: 11,
            hidden_size: 8,
            num_hidden_layers: 2,
            num_attention_heads: 2,
            intermediate_size: 12,
            max_position_embeddings: 16,
            type_vocab_size: 2,
            layer_norm_eps: 1e-12,
            hidden_dropout_prob: 0.0,
            initializer_range: 0.5,
        }
    }

    fn input() -> EncodedInput {
        EncodedInput {
            token_ids: vec![1, 2, 5, 7, 3, 2],
            segment_ids: vec![
                Segment::System,
                Segment::System,
                Segment::User,
                Segment::User,
                Segment::System,
                Segment::User,
            ],
            cat_positions: vec![0, 1],
        }
    }

    /// Loss = Σ out ⊙ W for a fixed random W.
    fn loss(enc: &BertEncoder<f64>, w: &Array2<f64>) -> f64 {
        (enc.forward::<ChaCha8Rng>(&input(), None).unwrap().0 * w).sum()
    }

    #[test]
    fn backward_matches_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let enc = BertEncoder::<f64>::new(tiny_config(), &mut rng).unwrap();
        let w: Array2<f64> = normal_matrix(6, 8, 1.0, &mut rng);

        let (_, cache) = enc.forward::<ChaCha8Rng>(&input(), None).unwrap();
        let mut grads = zeros_like(&enc);
        enc.backward(&cache, &w, &mut grads);
        let analytic = flatten(&grads);

        let base = flatten(&enc);
        let h = 1e-5;
        let mut worst: f64 = 0.0;
        // Every 7th parameter keeps the test quick while touching all tensors.
        for idx in (0..base.len()).step_by(7) {
            let perturbed = |delta: f64| {
                let mut e = enc.clone();
                let mut off = 0;
                e.visit_params_mut("", &mut |_, _, v| {
                    if idx >= off && idx < off + v.len() {
                        v[idx - off] += delta;
                    }
                    off += v.len();
                });
                loss(&e, &w)
            };
            let num = (perturbed(h) - perturbed(-h)) / (2.0 * h);
            let a = analytic[idx];
            let err = (a - num).abs() / (a.abs() + num.abs()).max(1e-6);
            worst = worst.max(err);
        }
        assert!(worst < 1e-4, "worst relative error {worst}");
    }

    #[test]
    fn output_shape_and_determinism() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let enc = BertEncoder::<f32>::new(tiny_config(), &mut rng).unwrap();
        let a = enc.encode_sequence(&input()).unwrap();
        let b = enc.encode_sequence(&input()).unwrap();
        assert_eq!(a.dim(), (6, 8));
        assert_eq!(a, b);
        let cats = crate::encoder_input::encode(&input(), &enc).unwrap();
        assert_eq!(cats.dim(), (2, 8));
        assert_eq!(cats.row(1), a.row(1));
    }

    #[test]
    fn word_order_matters() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let enc = BertEncoder::<f64>::new(tiny_config(), &mut rng).unwrap();
        let mut swapped = input();
        swapped.token_ids.swap(2, 3);
        let a = crate::encoder_input::encode(&input(), &enc).unwrap();
        let b = crate::encoder_input::encode(&swapped, &enc).unwrap();
        assert!(a.iter().zip(b.iter()).any(|(x, y)| (x - y).abs() > 1e-9));
    }

    #[test]
    fn overlong_input_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let enc = BertEncoder::<f32>::new(tiny_config(), &mut rng).unwrap();
        let long = EncodedInput {
            token_ids: vec![1; 17],
            segment_ids: vec![Segment::System; 17],
            cat_positions: vec![0],
        };
        assert!(matches!(
            crate::encoder_input::encode(&long, &enc),
            Err(Error::SequenceTooLong { len: 17, capacity: 16 })
        ));
    }

    #[test]
    fn resize_keeps_existing_rows() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut enc = BertEncoder::<f32>::new(tiny_config(), &mut rng).unwrap();
        let before = enc.embeddings.word.clone();
        enc.resize_token_embeddings(15, &mut rng);
        assert_eq!(enc.embeddings.word.nrows(), 15);
        assert_eq!(enc.embeddings.word.slice(s![..11, ..]), before);
        assert_eq!(enc.config().vocab_size, 15);
    }

    #[test]
    fn dropout_changes_training_forward_only() {
        let mut cfg = tiny_config();
        cfg.hidden_dropout_prob = 0.3;
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let enc = BertEncoder::<f32>::new(cfg, &mut rng).unwrap();
        let eval = enc.encode_sequence(&input()).unwrap();
        let (train, _) = enc.forward(&input(), Some(&mut ChaCha8Rng::seed_from_u64(5))).unwrap();
        assert_ne!(eval, train);
        assert_eq!(eval, enc.encode_sequence(&input()).unwrap());
    }
}
