//! The assembled recommender, its on-disk checkpoint and encoder construction
//! (from scratch or from a BERT-style pretrained directory).

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use ndarray::{Array1, ArrayView1};
use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::catalog::{Catalog, CategoryVocabulary, RedialId};
use crate::corpus::{mention_pattern, Utterance};
use crate::encoder_input::{EncodedInput, InputFormatter, SpecialTokens};
use crate::error::{Error, Result};
use crate::explain::{make_explanation, Explanation, DEFAULT_THRESHOLD};
use crate::nn::tensor_file::TensorFile;
use crate::nn::{checksum, BertConfig, BertEncoder};
use crate::preference::{CategoryPreference, PreferenceModel};
use crate::scalar::{Dtype, Scalar};
use crate::scorer::{rank_items, ItemScorer, RecommendationScores};
use crate::tokenizer::WordPieceTokenizer;

pub const CHECKPOINT_FORMAT: u32 = 1;
const META_FILE: &str = "meta.json";
const VOCAB_FILE: &str = "vocab.txt";
const PREFERENCE_FILE: &str = "preference.safetensors";
const SCORER_FILE: &str = "scorer.safetensors";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    TwoStage,
    E2e,
    Oracle,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::TwoStage => "two_stage",
            Mode::E2e => "e2e",
            Mode::Oracle => "oracle",
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "two_stage" | "two-stage" => Ok(Mode::TwoStage),
            "e2e" => Ok(Mode::E2e),
            "oracle" => Ok(Mode::Oracle),
            other => Err(Error::Config(format!("unknown mode {other:?}"))),
        }
    }
}

/// Input formatting plus the preference model it feeds.
#[derive(Debug, Clone)]
pub struct PreferenceStage<T> {
    pub formatter: InputFormatter,
    pub model: PreferenceModel<T>,
}

impl<T: Scalar> PreferenceStage<T> {
    pub fn form_input(&self, history: &[Utterance]) -> EncodedInput {
        self.formatter.form_input(history)
    }

    pub fn predict(&self, history: &[Utterance]) -> Result<CategoryPreference<T>> {
        self.model.predict(&self.form_input(history))
    }

    pub fn checksum(&self) -> String {
        checksum(&self.model)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedItem {
    pub item_index: usize,
    pub redial_id: RedialId,
    pub title: String,
    pub year: Option<u16>,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedPreference {
    pub category: String,
    pub value: f64,
}

/// Everything a single turn produces.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Turn {
    pub cat_pref: Vec<NamedPreference>,
    pub top_k: Vec<RankedItem>,
    pub explanation: String,
}

/// A trained pipeline bound to the catalog it was trained against. In
/// oracle mode there is no preference stage.
#[derive(Debug, Clone)]
pub struct Recommender<T> {
    pub mode: Mode,
    pub preference: Option<PreferenceStage<T>>,
    pub scorer: ItemScorer<T>,
    pub catalog: Catalog,
}

impl<T: Scalar> Recommender<T> {
    pub fn new(mode: Mode, preference: Option<PreferenceStage<T>>, scorer: ItemScorer<T>, catalog: Catalog) -> Result<Self> {
        if scorer.num_items() != catalog.len() {
            return Err(Error::Shape {
                context: "scorer items vs catalog",
                expected: catalog.len(),
                actual: scorer.num_items(),
            });
        }
        if scorer.num_categories() != catalog.vocabulary().len() {
            return Err(Error::Shape {
                context: "scorer categories vs vocabulary",
                expected: catalog.vocabulary().len(),
                actual: scorer.num_categories(),
            });
        }
        if let Some(p) = &preference {
            if p.model.num_categories() != catalog.vocabulary().len() {
                return Err(Error::Shape {
                    context: "preference heads vs vocabulary",
                    expected: catalog.vocabulary().len(),
                    actual: p.model.num_categories(),
                });
            }
        }
        if mode != Mode::Oracle && preference.is_none() {
            return Err(Error::Config(format!("{mode} model needs a preference stage")));
        }
        Ok(Self {
            mode,
            preference,
            scorer,
            catalog,
        })
    }

    pub fn vocabulary(&self) -> &CategoryVocabulary {
        self.catalog.vocabulary()
    }

    fn stage(&self) -> Result<&PreferenceStage<T>> {
        self.preference
            .as_ref()
            .ok_or_else(|| Error::Config("oracle checkpoint has no preference model; it only scores given category vectors".into()))
    }

    pub fn preferences(&self, history: &[Utterance]) -> Result<CategoryPreference<T>> {
        self.stage()?.predict(history)
    }

    pub fn score(&self, pref: ArrayView1<T>) -> Result<RecommendationScores<T>> {
        self.scorer.score_items(pref)
    }

    /// Preferences, top-`k` items and explanation for the full history.
    pub fn respond(&self, history: &[Utterance], k: usize) -> Result<Turn> {
        let pref = self.preferences(history)?;
        self.respond_with(&pref.values, k)
    }

    pub fn respond_with(&self, pref: &Array1<T>, k: usize) -> Result<Turn> {
        let scores = self.score(pref.view())?;
        let pref64: Vec<f64> = pref.iter().map(|v| v.to_f64_lossy()).collect();
        let vocab = self.vocabulary();
        let top_k = rank_items(scores.probs.view(), k)
            .into_iter()
            .map(|(i, s)| {
                let item = &self.catalog.items()[i];
                RankedItem {
                    item_index: i,
                    redial_id: item.redial_id,
                    title: item.title.clone(),
                    year: item.year,
                    score: s.to_f64_lossy(),
                }
            })
            .collect();
        let Explanation { text, .. } = make_explanation(&pref64, vocab, DEFAULT_THRESHOLD);
        Ok(Turn {
            cat_pref: vocab
                .names()
                .iter()
                .zip(&pref64)
                .map(|(n, &v)| NamedPreference {
                    category: n.clone(),
                    value: v,
                })
                .collect(),
            top_k,
            explanation: text,
        })
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let encoder = self.preference.as_ref().map(|p| EncoderMeta {
            config: p.model.encoder.config().clone(),
            max_len: p.formatter.max_len,
            lowercase: p.formatter.tokenizer.lowercase(),
            checksum: p.checksum(),
        });
        let meta = CheckpointMeta {
            format: CHECKPOINT_FORMAT,
            mode: self.mode,
            dtype: T::DTYPE.as_str().to_string(),
            categories: self.vocabulary().names().to_vec(),
            catalog_fingerprint: self.catalog.fingerprint(),
            num_items: self.catalog.len(),
            encoder,
        };
        write_json(&dir.join(META_FILE), &meta)?;
        if let Some(p) = &self.preference {
            p.formatter.tokenizer.save(dir.join(VOCAB_FILE))?;
            let mut f = TensorFile::default();
            f.add_module("", &p.model);
            f.save(dir.join(PREFERENCE_FILE))?;
        }
        let mut f = TensorFile::default();
        f.add_module("scorer", &self.scorer);
        f.save(dir.join(SCORER_FILE))
    }

    /// Loads a checkpoint, refusing one trained against a different catalog.
    pub fn load(dir: impl AsRef<Path>, catalog: Catalog) -> Result<Self> {
        let dir = dir.as_ref();
        let meta: CheckpointMeta = read_json(&dir.join(META_FILE))?;
        if meta.format != CHECKPOINT_FORMAT {
            return Err(Error::format("checkpoint", format!("unsupported format version {}", meta.format)));
        }
        let fingerprint = catalog.fingerprint();
        if meta.catalog_fingerprint != fingerprint {
            return Err(Error::FingerprintMismatch {
                expected: meta.catalog_fingerprint,
                actual: fingerprint,
            });
        }
        if meta.categories != catalog.vocabulary().names() {
            return Err(Error::format("checkpoint", "category order differs from the catalog's vocabulary"));
        }
        let preference = match &meta.encoder {
            None => None,
            Some(em) => {
                let tokenizer = WordPieceTokenizer::from_vocab_file(dir.join(VOCAB_FILE), em.lowercase)?;
                let specials = SpecialTokens::resolve(&tokenizer, catalog.vocabulary())?;
                let formatter = InputFormatter::new(tokenizer, specials, em.max_len)?;
                let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
                let encoder = BertEncoder::new(em.config.clone(), &mut rng)?;
                let mut model = PreferenceModel::new(encoder, catalog.vocabulary().len(), &mut rng);
                TensorFile::load(dir.join(PREFERENCE_FILE))?.load_module("", &mut model, &|n| vec![n.to_string()])?;
                Some(PreferenceStage { formatter, model })
            }
        };
        let mut scorer = ItemScorer::zeros(catalog.len(), catalog.vocabulary().len());
        TensorFile::load(dir.join(SCORER_FILE))?.load_module("scorer", &mut scorer, &|n| vec![n.to_string()])?;
        Self::new(meta.mode, preference, scorer, catalog)
    }
}

/// A checkpoint loaded at whatever precision it was saved in.
#[derive(Debug, Clone)]
pub enum AnyRecommender {
    F32(Recommender<f32>),
    F64(Recommender<f64>),
}

macro_rules! both {
    ($self:expr, $m:ident => $e:expr) => {
        match $self {
            AnyRecommender::F32($m) => $e,
            AnyRecommender::F64($m) => $e,
        }
    };
}

impl AnyRecommender {
    pub fn load(dir: impl AsRef<Path>, catalog: Catalog) -> Result<Self> {
        let dir = dir.as_ref();
        Ok(match CheckpointMeta::read(dir)?.dtype()? {
            Dtype::F32 => AnyRecommender::F32(Recommender::load(dir, catalog)?),
            Dtype::F64 => AnyRecommender::F64(Recommender::load(dir, catalog)?),
        })
    }

    pub fn mode(&self) -> Mode {
        both!(self, m => m.mode)
    }

    pub fn catalog(&self) -> &Catalog {
        both!(self, m => &m.catalog)
    }

    pub fn has_preference_model(&self) -> bool {
        both!(self, m => m.preference.is_some())
    }

    /// The encoder input for `history`, if there is an encoder.
    pub fn form_input(&self, history: &[Utterance]) -> Option<EncodedInput> {
        both!(self, m => m.preference.as_ref().map(|p| p.form_input(history)))
    }

    pub fn respond(&self, history: &[Utterance], k: usize) -> Result<Turn> {
        both!(self, m => m.respond(history, k))
    }

    pub fn respond_with(&self, pref: &[f64], k: usize) -> Result<Turn> {
        both!(self, m => m.respond_with(&pref.iter().map(|&v| crate::scalar::lit(v)).collect(), k))
    }

    pub fn evaluate(
        &self,
        samples: &[crate::corpus::Sample],
        source: crate::evaluation::PreferenceSource,
        opts: &crate::evaluation::EvalOptions,
    ) -> Result<crate::evaluation::EvalReport> {
        both!(self, m => crate::evaluation::evaluate(m, samples, source, opts))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderMeta {
    pub config: BertConfig,
    pub max_len: usize,
    pub lowercase: bool,
    /// Parameter checksum of the preference model at save time.
    pub checksum: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub format: u32,
    pub mode: Mode,
    pub dtype: String,
    pub categories: Vec<String>,
    pub catalog_fingerprint: String,
    pub num_items: usize,
    pub encoder: Option<EncoderMeta>,
}

impl CheckpointMeta {
    pub fn read(dir: impl AsRef<Path>) -> Result<Self> {
        read_json(&dir.as_ref().join(META_FILE))
    }

    pub fn dtype(&self) -> Result<Dtype> {
        Dtype::parse(&self.dtype).ok_or_else(|| Error::format("checkpoint", format!("unknown dtype {}", self.dtype)))
    }
}

pub(crate) fn write_json<S: Serialize>(path: &Path, value: &S) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

pub(crate) fn read_json<D: for<'de> Deserialize<'de>>(path: &Path) -> Result<D> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

/// How to obtain the encoder before fine-tuning.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderSettings {
    /// Directory with `config.json`, `vocab.txt` and `model.safetensors`.
    /// When absent a randomly initialized encoder of the size below is used,
    /// with a vocabulary built from the training text.
    pub checkpoint: Option<PathBuf>,
    pub hidden_size: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub intermediate_size: usize,
    pub dropout: f64,
    pub init_range: f64,
    pub min_token_count: usize,
    pub lowercase: bool,
}

impl Default for EncoderSettings {
    fn default() -> Self {
        Self {
            checkpoint: None,
            hidden_size: 768,
            num_layers: 12,
            num_heads: 12,
            intermediate_size: 3072,
            dropout: 0.1,
            init_range: 0.02,
            min_token_count: 2,
            lowercase: true,
        }
    }
}

/// Candidate tensor names for one of our parameter names in a pretrained file.
fn pretrained_names(name: &str) -> Vec<String> {
    let mut out = vec![name.to_string(), format!("bert.{name}")];
    let legacy = name
        .strip_suffix("LayerNorm.weight")
        .map(|p| format!("{p}LayerNorm.gamma"))
        .or_else(|| name.strip_suffix("LayerNorm.bias").map(|p| format!("{p}LayerNorm.beta")));
    if let Some(l) = legacy {
        out.push(format!("bert.{l}"));
        out.push(l);
    }
    out
}

#[derive(Debug, Deserialize)]
struct HfTokenizerConfig {
    #[serde(default = "yes")]
    do_lower_case: bool,
}

fn yes() -> bool {
    true
}

/// Reads a pretrained BERT directory: `config.json`, `vocab.txt`,
/// `model.safetensors` and optionally `tokenizer_config.json`.
pub fn load_pretrained_encoder<T: Scalar>(dir: &Path) -> Result<(BertEncoder<T>, WordPieceTokenizer)> {
    let config: BertConfig = read_json(&dir.join("config.json"))?;
    let tok_cfg = dir.join("tokenizer_config.json");
    let lowercase = if tok_cfg.exists() {
        read_json::<HfTokenizerConfig>(&tok_cfg)?.do_lower_case
    } else {
        true
    };
    let tokenizer = WordPieceTokenizer::from_vocab_file(dir.join("vocab.txt"), lowercase)?;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
    let mut encoder = BertEncoder::new(config, &mut rng)?;
    TensorFile::load(dir.join("model.safetensors"))?.load_module("", &mut encoder, &pretrained_names)?;
    Ok((encoder, tokenizer))
}

/// Builds the untrained preference stage: encoder (pretrained or fresh),
/// tokenizer extended with the category and utterance tokens, and heads.
pub fn build_preference_stage<'a, T: Scalar, R: Rng + ?Sized>(
    settings: &EncoderSettings,
    vocab: &CategoryVocabulary,
    max_len: usize,
    training_text: impl IntoIterator<Item = &'a str>,
    rng: &mut R,
) -> Result<PreferenceStage<T>> {
    let (mut encoder, mut tokenizer) = match &settings.checkpoint {
        Some(dir) => {
            let (mut enc, tok) = load_pretrained_encoder::<T>(dir)?;
            if max_len > enc.config().max_position_embeddings {
                return Err(Error::Config(format!(
                    "max_len {max_len} exceeds the pretrained encoder's {} positions",
                    enc.config().max_position_embeddings
                )));
            }
            enc.set_dropout(settings.dropout);
            (enc, tok)
        }
        None => {
            let texts: Vec<String> = training_text
                .into_iter()
                .map(|t| mention_pattern().replace_all(t, " ").into_owned())
                .collect();
            let tok = WordPieceTokenizer::build(texts.iter().map(String::as_str), settings.min_token_count, settings.lowercase);
            let config = BertConfig {
                vocab_size: tok.len(),
                hidden_size: settings.hidden_size,
                num_hidden_layers: settings.num_layers,
                num_attention_heads: settings.num_heads,
                intermediate_size: settings.intermediate_size,
                max_position_embeddings: max_len,
                type_vocab_size: 2,
                layer_norm_eps: 1e-12,
                hidden_dropout_prob: settings.dropout,
                initializer_range: settings.init_range,
            };
            (BertEncoder::new(config, rng)?, tok)
        }
    };
    let specials = SpecialTokens::install(&mut tokenizer, vocab)?;
    encoder.resize_token_embeddings(tokenizer.len(), rng);
    let formatter = InputFormatter::new(tokenizer, specials, max_len)?;
    let model = PreferenceModel::new(encoder, vocab.len(), rng);
    Ok(PreferenceStage { formatter, model })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pretrained_name_candidates() {
        let c = pretrained_names("embeddings.LayerNorm.weight");
        assert!(c.contains(&"bert.embeddings.LayerNorm.weight".to_string()));
        assert!(c.contains(&"bert.embeddings.LayerNorm.gamma".to_string()));
        let c = pretrained_names("encoder.layer.0.output.LayerNorm.bias");
        assert!(c.contains(&"encoder.layer.0.output.LayerNorm.beta".to_string()));
        assert_eq!(pretrained_names("pooler.dense.weight").len(), 2);
    }

    #[test]
    fn mode_parsing() {
        assert_eq!("two_stage".parse::<Mode>().unwrap(), Mode::TwoStage);
        assert_eq!("oracle".parse::<Mode>().unwrap().to_string(), "oracle");
        assert!("gt".parse::<Mode>().is_err());
    }
}
