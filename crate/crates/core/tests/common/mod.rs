#![allow(dead_code)]

use std::path::Path;

use catrec::ingest::{ingest, IngestOptions, Ingested};
use catrec::model::EncoderSettings;
use catrec::synthetic::{generate, SyntheticSpec};
use catrec::training::TrainingConfig;
use catrec::Mode;

/// Synthetic corpus of `conversations` dialogues, ingested from files in `dir`.
pub fn synthetic_data(dir: &Path, conversations: usize, seed: u64) -> Ingested {
    let corpus = generate(&SyntheticSpec {
        conversations,
        seed,
        ..SyntheticSpec::default()
    });
    let (movies, redial) = corpus.write_to(dir).unwrap();
    ingest(&IngestOptions {
        redial_files: vec![redial],
        test_files: vec![],
        movielens: movies,
        seed,
        include_empty_history: false,
    })
    .unwrap()
}

/// A small from-scratch encoder that trains in seconds.
pub fn toy_config(mode: Mode, seed: u64) -> TrainingConfig {
    TrainingConfig {
        mode,
        seed,
        dtype: "f32".into(),
        max_len: 48,
        learning_rate: 3e-3,
        batch_size: 16,
        max_epochs: 30,
        patience: 5,
        scorer_learning_rate: 5e-2,
        scorer_batch_size: 32,
        scorer_max_epochs: 30,
        weight_decay: 0.0,
        max_grad_norm: Some(1.0),
        grad_chunk: 4,
        exclude_unmatched_targets: false,
        encoder: EncoderSettings {
            checkpoint: None,
            hidden_size: 32,
            num_layers: 2,
            num_heads: 2,
            intermediate_size: 64,
            dropout: 0.0,
            init_range: 0.1,
            min_token_count: 1,
            lowercase: true,
        },
        ..TrainingConfig::default()
    }
}
