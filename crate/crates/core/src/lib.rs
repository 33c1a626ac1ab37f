//! Explainable conversational movie recommendation.
//!
//! A dialogue history is turned into per-genre preferences by a transformer
//! encoder with one sigmoid head per genre token; an affine map plus softmax
//! turns those preferences into a distribution over the catalog. The model
//! code is generic over [`scalar::Scalar`] (`f32` or `f64`).

pub mod catalog;
pub mod corpus;
pub mod encoder_input;
pub mod error;
pub mod evaluation;
pub mod explain;
pub mod ingest;
pub mod model;
pub mod nn;
pub mod preference;
pub mod scalar;
pub mod scorer;
pub mod synthetic;
pub mod tokenizer;
pub mod training;

pub use error::{Error, Result};
pub use model::{AnyRecommender, Mode, Recommender};

pub type Recommender32 = model::Recommender<f32>;
pub type Recommender64 = model::Recommender<f64>;
pub type PreferenceModel32 = preference::PreferenceModel<f32>;
pub type PreferenceModel64 = preference::PreferenceModel<f64>;
pub type ItemScorer32 = scorer::ItemScorer<f32>;
pub type ItemScorer64 = scorer::ItemScorer<f64>;
pub type BertEncoder32 = nn::BertEncoder<f32>;
pub type BertEncoder64 = nn::BertEncoder<f64>;
