//! Training: Stage 1 (category preferences, RMSE), Stage 2 (item scorer,
//! cross-entropy, Stage 1 frozen), the end-to-end ablation and the oracle
//! scorer. Every stage early-stops on its own validation loss.

use std::collections::{BTreeMap, HashSet};
use std::path::{Path, PathBuf};
use std::time::Instant;

use ndarray::{Array1, Array2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::catalog::{Catalog, UNKNOWN_CATEGORY_VALUE};
use crate::corpus::{Sample, Split};
use crate::encoder_input::EncodedInput;
use crate::error::{Error, Result};
use crate::evaluation::{evaluate, EvalOptions, PreferenceSource};
use crate::model::{build_preference_stage, EncoderSettings, Mode, PreferenceStage, Recommender};
use crate::nn::{accumulate, join, normal_matrix, scale_params, zeros_like, Adam, AdamConfig, Parameterized, Visit, VisitMut};
use crate::preference::{rmse_loss, rmse_loss_grad, PreferenceModel};
use crate::scalar::{lit, Scalar};
use crate::scorer::{cross_entropy_loss, ItemScorer};

pub const DEFAULT_PATIENCE: usize = 5;

/// Rows per chunk when scoring a whole split at once.
const EVAL_CHUNK: usize = 1024;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSettings {
    /// Output directory of `ingest` (catalog and sample files).
    pub dir: PathBuf,
}

impl Default for DataSettings {
    fn default() -> Self {
        Self { dir: PathBuf::from("data") }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputSettings {
    /// Parent of the per-run directories.
    pub dir: PathBuf,
}

impl Default for OutputSettings {
    fn default() -> Self {
        Self { dir: PathBuf::from("runs") }
    }
}

/// Run configuration, read from TOML. Encoder-stage settings come first,
/// the `scorer_*` keys apply to Stage 2 and the oracle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingConfig {
    pub mode: Mode,
    pub seed: u64,
    /// `f32` or `f64`.
    pub dtype: String,
    pub max_len: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub scorer_learning_rate: f64,
    pub scorer_batch_size: usize,
    pub scorer_max_epochs: usize,
    pub weight_decay: f64,
    pub max_grad_norm: Option<f64>,
    /// Samples per gradient work unit; fixes the summation order so results
    /// do not depend on the thread count.
    pub grad_chunk: usize,
    pub exclude_unmatched_targets: bool,
    pub data: DataSettings,
    pub encoder: EncoderSettings,
    pub output: OutputSettings,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            mode: Mode::TwoStage,
            seed: 42,
            dtype: "f32".into(),
            max_len: crate::encoder_input::DEFAULT_MAX_LEN,
            learning_rate: 2e-5,
            batch_size: 16,
            max_epochs: 30,
            patience: DEFAULT_PATIENCE,
            scorer_learning_rate: 1e-3,
            scorer_batch_size: 256,
            scorer_max_epochs: 200,
            weight_decay: 0.0,
            max_grad_norm: Some(1.0),
            grad_chunk: 4,
            exclude_unmatched_targets: false,
            data: DataSettings::default(),
            encoder: EncoderSettings::default(),
            output: OutputSettings::default(),
        }
    }
}

impl TrainingConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.patience < 1 {
            return bad("patience must be at least 1");
        }
        if self.batch_size < 1 || self.scorer_batch_size < 1 || self.grad_chunk < 1 {
            return bad("batch sizes and grad_chunk must be at least 1");
        }
        if self.max_epochs < 1 || self.scorer_max_epochs < 1 {
            return bad("max epochs must be at least 1");
        }
        if !(self.learning_rate > 0.0 && self.scorer_learning_rate > 0.0) {
            return bad("learning rates must be positive");
        }
        if crate::scalar::Dtype::parse(&self.dtype).is_none() {
            return bad("dtype must be f32 or f64");
        }
        Ok(())
    }

    pub fn encoder_stage(&self) -> StageConfig {
        StageConfig {
            learning_rate: self.learning_rate,
            batch_size: self.batch_size,
            max_epochs: self.max_epochs,
            patience: self.patience,
            seed: self.seed,
            weight_decay: self.weight_decay,
            max_grad_norm: self.max_grad_norm,
            grad_chunk: self.grad_chunk,
        }
    }

    pub fn scorer_stage(&self) -> StageConfig {
        StageConfig {
            learning_rate: self.scorer_learning_rate,
            batch_size: self.scorer_batch_size,
            max_epochs: self.scorer_max_epochs,
            patience: self.patience,
            seed: self.seed,
            weight_decay: 0.0,
            max_grad_norm: None,
            grad_chunk: self.grad_chunk,
        }
    }
}

/// Optimization settings for one stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
    pub weight_decay: f64,
    pub max_grad_norm: Option<f64>,
    pub grad_chunk: usize,
}

impl StageConfig {
    fn adam(&self, learning_rate: f64) -> AdamConfig {
        AdamConfig {
            weight_decay: self.weight_decay,
            max_grad_norm: self.max_grad_norm,
            ..AdamConfig::with_lr(learning_rate)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    Patience,
    MaxEpochs,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingReport {
    pub stage: String,
    pub loss: String,
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub stop_reason: StopReason,
    pub wall_seconds: f64,
    pub train_samples: usize,
    pub val_samples: usize,
    #[serde(default)]
    pub metrics: BTreeMap<String, f64>,
    #[serde(default)]
    pub notes: BTreeMap<String, String>,
}

const TAG_SHUFFLE: u64 = 1;
const TAG_DROPOUT: u64 = 2;
const TAG_INIT: u64 = 3;

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Independent stream for `(seed, tag, a, b)`.
pub(crate) fn derived_rng(seed: u64, tag: u64, a: u64, b: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(splitmix(seed ^ splitmix(tag ^ splitmix(a ^ splitmix(b)))))
}

fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut derived_rng(seed, TAG_SHUFFLE, epoch as u64, 0));
    order
}

fn finite(what: &str, epoch: usize, v: f64) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::NonFinite(format!("{what} at epoch {epoch} is {v}")))
    }
}

/// Epoch loop with early stopping; returns the best-validation snapshot.
fn fit<M: Clone>(
    stage: &str,
    loss: &str,
    cfg: &StageConfig,
    model: &mut M,
    mut train_epoch: impl FnMut(&mut M, usize) -> Result<f64>,
    mut validate: impl FnMut(&M) -> Result<f64>,
) -> Result<(M, TrainingReport)> {
    let start = Instant::now();
    let mut epochs = Vec::new();
    let mut best: Option<(usize, f64, M)> = None;
    let mut stop_reason = StopReason::MaxEpochs;
    for epoch in 1..=cfg.max_epochs {
        let t = Instant::now();
        let train_loss = finite("training loss", epoch, train_epoch(model, epoch)?)?;
        let val_loss = finite("validation loss", epoch, validate(model)?)?;
        log::info!("{stage} epoch {epoch}: train {loss} {train_loss:.5}, validation {val_loss:.5}");
        epochs.push(EpochRecord {
            epoch,
            train_loss,
            val_loss,
            seconds: t.elapsed().as_secs_f64(),
        });
        match &best {
            Some((_, b, _)) if val_loss >= *b => {}
            _ => best = Some((epoch, val_loss, model.clone())),
        }
        let best_epoch = best.as_ref().map_or(epoch, |b| b.0);
        if epoch - best_epoch >= cfg.patience {
            stop_reason = StopReason::Patience;
            break;
        }
    }
    let (best_epoch, best_val_loss, snapshot) = best.expect("at least one epoch ran");
    let report = TrainingReport {
        stage: stage.to_string(),
        loss: loss.to_string(),
        epochs,
        best_epoch,
        best_val_loss,
        stop_reason,
        wall_seconds: start.elapsed().as_secs_f64(),
        train_samples: 0,
        val_samples: 0,
        metrics: BTreeMap::new(),
        notes: BTreeMap::new(),
    };
    Ok((snapshot, report))
}

/// Sum of per-sample gradients over `batch`. Work is split into fixed chunks
/// of `chunk` samples and reduced in chunk order.
fn batch_gradient<T, M, F>(model: &M, batch: &[usize], chunk: usize, per_sample: F) -> Result<(M, f64)>
where
    T: Scalar,
    M: Parameterized<T> + Clone + Send + Sync,
    F: Fn(&M, usize, &mut M) -> Result<T> + Sync,
{
    let parts: Vec<Result<(M, f64)>> = batch
        .par_chunks(chunk.max(1))
        .map(|c| {
            let mut g = zeros_like(model);
            let mut loss = 0.0;
            for &i in c {
                loss += per_sample(model, i, &mut g)?.to_f64_lossy();
            }
            Ok((g, loss))
        })
        .collect();
    let mut parts = parts.into_iter();
    let (mut grad, mut loss) = parts.next().ok_or(Error::Empty("gradient batch"))??;
    for p in parts {
        let (g, l) = p?;
        accumulate(&mut grad, &g);
        loss += l;
    }
    Ok((grad, loss))
}

fn is_unknown_vector(v: &[f64]) -> bool {
    v.iter().all(|&x| x == UNKNOWN_CATEGORY_VALUE)
}

fn to_array<T: Scalar>(v: &[f64]) -> Array1<T> {
    v.iter().map(|&x| lit(x)).collect()
}

fn check_targets(samples: &[&Sample], catalog: &Catalog) -> Result<()> {
    match samples.iter().find(|s| s.target_item >= catalog.len()) {
        Some(s) => Err(Error::UnknownItem(s.target_item)),
        None => Ok(()),
    }
}

/// Stage 1: fine-tunes encoder and heads against the target items' category
/// vectors with per-sample RMSE averaged over the batch.
pub fn train_stage1<T: Scalar>(
    stage: PreferenceStage<T>,
    train: &[&Sample],
    val: &[&Sample],
    cfg: &StageConfig,
    exclude_unmatched_targets: bool,
) -> Result<(PreferenceStage<T>, TrainingReport)> {
    let keep = |s: &&&Sample| !exclude_unmatched_targets || !is_unknown_vector(&s.target_category_vector);
    let train: Vec<&Sample> = train.iter().filter(keep).copied().collect();
    let val: Vec<&Sample> = val.iter().filter(keep).copied().collect();
    if train.is_empty() {
        return Err(Error::Empty("stage-1 training samples"));
    }
    if val.is_empty() {
        return Err(Error::Empty("stage-1 validation samples"));
    }
    let prep = |set: &[&Sample]| -> (Vec<EncodedInput>, Vec<Array1<T>>) {
        set.par_iter()
            .map(|s| (stage.form_input(&s.history), to_array::<T>(&s.target_category_vector)))
            .unzip()
    };
    let (train_in, train_tgt) = prep(&train);
    let (val_in, val_tgt) = prep(&val);
    let PreferenceStage { formatter, mut model } = stage;
    let mut adam = Adam::new(cfg.adam(cfg.learning_rate));

    let (best, mut report) = fit(
        "stage1",
        "rmse",
        cfg,
        &mut model,
        |m, epoch| {
            let mut total = 0.0;
            for batch in epoch_order(train_in.len(), cfg.seed, epoch).chunks(cfg.batch_size) {
                let (mut g, loss) = batch_gradient(m, batch, cfg.grad_chunk, |m: &PreferenceModel<T>, i, g| {
                    let mut rng = derived_rng(cfg.seed, TAG_DROPOUT, epoch as u64, i as u64);
                    let cache = m.forward(&train_in[i], Some(&mut rng))?;
                    let (loss, d) = rmse_loss_grad(cache.preference.values.view(), train_tgt[i].view());
                    m.backward(&cache, d.view(), g);
                    Ok(loss)
                })?;
                scale_params(&mut g, lit(1.0 / batch.len() as f64));
                adam.step(m, &g);
                total += loss;
            }
            Ok(total / train_in.len() as f64)
        },
        |m| mean_rmse(m, &val_in, &val_tgt),
    )?;
    report.train_samples = train.len();
    report.val_samples = val.len();
    Ok((PreferenceStage { formatter, model: best }, report))
}

fn mean_rmse<T: Scalar>(model: &PreferenceModel<T>, inputs: &[EncodedInput], targets: &[Array1<T>]) -> Result<f64> {
    let losses: Vec<Result<f64>> = inputs
        .par_iter()
        .zip(targets.par_iter())
        .map(|(x, t)| Ok(rmse_loss(model.predict(x)?.values.view(), t.view()).to_f64_lossy()))
        .collect();
    let mut sum = 0.0;
    for l in losses {
        sum += l?;
    }
    Ok(sum / inputs.len() as f64)
}

/// Where Stage 2 gets its category vectors.
pub enum Stage2Input<'a, T> {
    /// Predictions of a trained (and frozen) Stage-1 model.
    Predicted(&'a Recommender<T>),
    /// The target items' own category vectors (oracle setting).
    GroundTruth,
}

/// Preference rows for `samples`, from the model or the ground truth.
pub fn preference_matrix<T: Scalar>(stage1: Option<&PreferenceStage<T>>, samples: &[&Sample]) -> Result<Array2<T>> {
    let rows: Vec<Result<Array1<T>>> = samples
        .par_iter()
        .map(|s| match stage1 {
            Some(p) => Ok(p.predict(&s.history)?.values),
            None => Ok(to_array(&s.target_category_vector)),
        })
        .collect();
    let width = match stage1 {
        Some(p) => p.model.num_categories(),
        None => samples.first().map_or(0, |s| s.target_category_vector.len()),
    };
    let mut m = Array2::zeros((samples.len(), width));
    for (mut dst, r) in m.axis_iter_mut(Axis(0)).zip(rows) {
        let r = r?;
        if r.len() != width {
            return Err(Error::Shape {
                context: "category vector",
                expected: width,
                actual: r.len(),
            });
        }
        dst.assign(&r);
    }
    Ok(m)
}

fn mean_scorer_loss<T: Scalar>(scorer: &ItemScorer<T>, prefs: &Array2<T>, targets: &[usize]) -> Result<f64> {
    let parts: Vec<Result<f64>> = (0..targets.len())
        .step_by(EVAL_CHUNK)
        .collect::<Vec<_>>()
        .par_iter()
        .map(|&start| {
            let end = (start + EVAL_CHUNK).min(targets.len());
            let rows = prefs.slice(ndarray::s![start..end, ..]).to_owned();
            Ok(scorer.batch_loss(&rows, &targets[start..end], None)?.to_f64_lossy() * (end - start) as f64)
        })
        .collect();
    let mut sum = 0.0;
    for p in parts {
        sum += p?;
    }
    Ok(sum / targets.len() as f64)
}

/// Stage 2 (or the oracle): trains only the item scorer with cross-entropy.
/// The Stage-1 model is read-only here; its parameter checksum is compared
/// before and after and recorded in the report.
pub fn train_stage2<T: Scalar>(
    input: Stage2Input<'_, T>,
    catalog: &Catalog,
    train: &[&Sample],
    val: &[&Sample],
    cfg: &StageConfig,
) -> Result<(ItemScorer<T>, TrainingReport)> {
    if train.is_empty() {
        return Err(Error::Empty("stage-2 training samples"));
    }
    if val.is_empty() {
        return Err(Error::Empty("stage-2 validation samples"));
    }
    check_targets(train, catalog)?;
    check_targets(val, catalog)?;
    let (stage1, stage_name) = match &input {
        Stage2Input::Predicted(r) => {
            let (expected, actual) = (r.catalog.fingerprint(), catalog.fingerprint());
            if expected != actual {
                return Err(Error::FingerprintMismatch { expected, actual });
            }
            let p = r
                .preference
                .as_ref()
                .ok_or_else(|| Error::Config("stage-2 input model has no preference stage".into()))?;
            (Some(p), "stage2")
        }
        Stage2Input::GroundTruth => (None, "oracle"),
    };
    let before = stage1.map(|p| p.checksum());

    let train_x = preference_matrix(stage1, train)?;
    let val_x = preference_matrix(stage1, val)?;
    let train_y: Vec<usize> = train.iter().map(|s| s.target_item).collect();
    let val_y: Vec<usize> = val.iter().map(|s| s.target_item).collect();

    let mut scorer = ItemScorer::zeros(catalog.len(), catalog.vocabulary().len());
    let mut adam = Adam::new(cfg.adam(cfg.learning_rate));
    let (best, mut report) = fit(
        stage_name,
        "cross_entropy",
        cfg,
        &mut scorer,
        |s, epoch| {
            let mut total = 0.0;
            for batch in epoch_order(train_y.len(), cfg.seed, epoch).chunks(cfg.batch_size) {
                let x = train_x.select(Axis(0), batch);
                let y: Vec<usize> = batch.iter().map(|&i| train_y[i]).collect();
                let mut g = ItemScorer::zeros(s.num_items(), s.num_categories());
                let loss = s.batch_loss(&x, &y, Some(&mut g))?;
                adam.step(s, &g);
                total += loss.to_f64_lossy() * batch.len() as f64;
            }
            Ok(total / train_y.len() as f64)
        },
        |s| mean_scorer_loss(s, &val_x, &val_y),
    )?;

    if let (Some(p), Some(before)) = (stage1, before) {
        let after = p.checksum();
        report.notes.insert("stage1_checksum_before".into(), before.clone());
        report.notes.insert("stage1_checksum_after".into(), after.clone());
        if before != after {
            return Err(Error::Config(format!("stage-1 parameters changed during stage 2: {before} -> {after}")));
        }
    }
    report.train_samples = train.len();
    report.val_samples = val.len();
    Ok((best, report))
}

/// Preference model and scorer trained jointly, cross-entropy only.
#[derive(Debug, Clone, PartialEq)]
pub struct FullModel<T> {
    pub preference: PreferenceModel<T>,
    pub scorer: ItemScorer<T>,
}

impl<T: Scalar> Parameterized<T> for FullModel<T> {
    fn visit_params(&self, prefix: &str, f: &mut Visit<'_, T>) {
        self.preference.visit_params(prefix, f);
        self.scorer.visit_params(&join(prefix, "scorer"), f);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut VisitMut<'_, T>) {
        self.preference.visit_params_mut(prefix, f);
        self.scorer.visit_params_mut(&join(prefix, "scorer"), f);
    }
}

impl<T: Scalar> FullModel<T> {
    /// Cross-entropy of one sample; accumulates gradients when `grad` is given.
    pub fn sample_loss(&self, input: &EncodedInput, target: usize, rng: Option<&mut ChaCha8Rng>, grad: Option<&mut FullModel<T>>) -> Result<T> {
        let cache = self.preference.forward(input, rng)?;
        let pref = cache.preference.values.view();
        let scores = self.scorer.score_items(pref)?;
        let loss = cross_entropy_loss(&scores, target);
        if let Some(g) = grad {
            let d_pref = self.scorer.backward(pref, &scores, target, &mut g.scorer);
            self.preference.backward(&cache, d_pref.view(), &mut g.preference);
        }
        Ok(loss)
    }
}

/// End-to-end ablation: the same architecture trained on item cross-entropy
/// only. The category vectors of the samples are never read. Encoder and
/// heads use `cfg.learning_rate`, the scorer `scorer_learning_rate`.
///
/// Unlike Stage 2 the scorer weights start from `N(0, scorer_init_std)`: with
/// `W = 0` the gradient reaching the heads and encoder is `W^T dlogits = 0`,
/// so the first step would leave them untouched.
pub fn train_e2e<T: Scalar>(
    stage: PreferenceStage<T>,
    catalog: &Catalog,
    train: &[&Sample],
    val: &[&Sample],
    cfg: &StageConfig,
    scorer_learning_rate: f64,
    scorer_init_std: f64,
) -> Result<(Recommender<T>, TrainingReport)> {
    if train.is_empty() {
        return Err(Error::Empty("e2e training samples"));
    }
    if val.is_empty() {
        return Err(Error::Empty("e2e validation samples"));
    }
    check_targets(train, catalog)?;
    check_targets(val, catalog)?;
    let prep = |set: &[&Sample]| -> (Vec<EncodedInput>, Vec<usize>) {
        set.par_iter().map(|s| (stage.form_input(&s.history), s.target_item)).unzip()
    };
    let (train_in, train_y) = prep(train);
    let (val_in, val_y) = prep(val);
    let PreferenceStage { formatter, model } = stage;
    let mut full = FullModel {
        preference: model,
        scorer: ItemScorer {
            weight: normal_matrix(catalog.len(), catalog.vocabulary().len(), scorer_init_std, &mut derived_rng(cfg.seed, TAG_INIT, 1, 0)),
            bias: Array1::zeros(catalog.len()),
        },
    };
    let mut adam_pref = Adam::new(cfg.adam(cfg.learning_rate));
    let mut adam_scorer = Adam::new(cfg.adam(scorer_learning_rate));

    let (best, mut report) = fit(
        "e2e",
        "cross_entropy",
        cfg,
        &mut full,
        |m, epoch| {
            let mut total = 0.0;
            for batch in epoch_order(train_in.len(), cfg.seed, epoch).chunks(cfg.batch_size) {
                let (mut g, loss) = batch_gradient(m, batch, cfg.grad_chunk, |m: &FullModel<T>, i, g| {
                    let mut rng = derived_rng(cfg.seed, TAG_DROPOUT, epoch as u64, i as u64);
                    m.sample_loss(&train_in[i], train_y[i], Some(&mut rng), Some(g))
                })?;
                scale_params(&mut g, lit(1.0 / batch.len() as f64));
                adam_pref.step(&mut m.preference, &g.preference);
                adam_scorer.step(&mut m.scorer, &g.scorer);
                total += loss;
            }
            Ok(total / train_in.len() as f64)
        },
        |m| {
            let losses: Vec<Result<f64>> = val_in
                .par_iter()
                .zip(val_y.par_iter())
                .map(|(x, &y)| Ok(m.sample_loss(x, y, None, None)?.to_f64_lossy()))
                .collect();
            let mut sum = 0.0;
            for l in losses {
                sum += l?;
            }
            Ok(sum / val_in.len() as f64)
        },
    )?;
    report.train_samples = train.len();
    report.val_samples = val.len();
    let rec = Recommender::new(
        Mode::E2e,
        Some(PreferenceStage {
            formatter,
            model: best.preference,
        }),
        best.scorer,
        catalog.clone(),
    )?;
    Ok((rec, report))
}

pub fn split_samples(samples: &[Sample], split: Split) -> Vec<&Sample> {
    samples.iter().filter(|s| s.split == split).collect()
}

/// Unique utterance texts from the given samples' histories.
fn history_texts<'a>(samples: &[&'a Sample]) -> Vec<&'a str> {
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for s in samples {
        for (i, u) in s.history.iter().enumerate() {
            if seen.insert((s.conv_id.as_str(), i)) {
                out.push(u.text.as_str());
            }
        }
    }
    out
}

pub struct TrainingOutcome<T> {
    pub model: Recommender<T>,
    /// The Stage-1 model with an untrained (uniform) scorer, two-stage only.
    pub stage1: Option<Recommender<T>>,
    pub reports: Vec<TrainingReport>,
}

/// Runs the configured mode on the train/validation splits of `samples`.
pub fn run_training<T: Scalar>(cfg: &TrainingConfig, catalog: &Catalog, samples: &[Sample]) -> Result<TrainingOutcome<T>> {
    cfg.validate()?;
    let train = split_samples(samples, Split::Train);
    let val = split_samples(samples, Split::Validation);
    let build = || {
        let mut rng = derived_rng(cfg.seed, TAG_INIT, 0, 0);
        build_preference_stage::<T, _>(&cfg.encoder, catalog.vocabulary(), cfg.max_len, history_texts(&train), &mut rng)
    };
    let mut outcome = match cfg.mode {
        Mode::TwoStage => {
            let (stage, r1) = train_stage1(build()?, &train, &val, &cfg.encoder_stage(), cfg.exclude_unmatched_targets)?;
            let scorer = ItemScorer::zeros(catalog.len(), catalog.vocabulary().len());
            let stage1 = Recommender::new(Mode::TwoStage, Some(stage), scorer, catalog.clone())?;
            let (scorer, r2) = train_stage2(Stage2Input::Predicted(&stage1), catalog, &train, &val, &cfg.scorer_stage())?;
            let mut model = stage1.clone();
            model.scorer = scorer;
            TrainingOutcome {
                model,
                stage1: Some(stage1),
                reports: vec![r1, r2],
            }
        }
        Mode::E2e => {
            let (model, r) = train_e2e(build()?, catalog, &train, &val, &cfg.encoder_stage(), cfg.scorer_learning_rate, cfg.encoder.init_range)?;
            TrainingOutcome {
                model,
                stage1: None,
                reports: vec![r],
            }
        }
        Mode::Oracle => {
            let (scorer, r) = train_stage2(Stage2Input::GroundTruth, catalog, &train, &val, &cfg.scorer_stage())?;
            TrainingOutcome {
                model: Recommender::new(Mode::Oracle, None, scorer, catalog.clone())?,
                stage1: None,
                reports: vec![r],
            }
        }
    };
    let val_owned: Vec<Sample> = val.iter().map(|s| (*s).clone()).collect();
    let source = PreferenceSource::for_mode(cfg.mode);
    let eval = evaluate(&outcome.model, &val_owned, source, &EvalOptions::default())?;
    if let Some(last) = outcome.reports.last_mut() {
        last.metrics.insert("validation_rec_at_1_pct".into(), eval.rec_at_1_pct);
        last.metrics.insert("validation_rec_at_10_pct".into(), eval.rec_at_10_pct);
    }
    Ok(outcome)
}
