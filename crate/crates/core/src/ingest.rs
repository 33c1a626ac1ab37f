//! End-to-end data preparation: movie table, catalog, conversations, splits
//! and samples, plus the on-disk layout shared by training and evaluation.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::catalog::{build_catalog, load_movielens, Catalog, CatalogReport, CategoryVocabulary, MovieLensReport};
use crate::corpus::{assign_splits, build_all_samples, parse_redial, read_samples, redial_movie_table, write_samples, Conversation, ParseReport, Sample, SampleReport};
use crate::error::{Error, Result};
use crate::model::write_json;

pub const CATALOG_FILE: &str = "catalog.tsv";
pub const SAMPLES_FILE: &str = "samples.jsonl";
pub const REPORT_FILE: &str = "ingest_report.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IngestOptions {
    /// Corpus files whose conversations are split into train/validation/test.
    pub redial_files: Vec<PathBuf>,
    /// Corpus files whose conversations all go to test.
    pub test_files: Vec<PathBuf>,
    pub movielens: PathBuf,
    pub seed: u64,
    pub include_empty_history: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IngestReport {
    pub movielens: MovieLensReport,
    pub catalog: CatalogReport,
    pub corpus: ParseReport,
    pub samples: SampleReport,
    pub split_seed: u64,
}

pub struct Ingested {
    pub catalog: Catalog,
    pub conversations: Vec<Conversation>,
    pub samples: Vec<Sample>,
    pub report: IngestReport,
}

pub fn ingest(opts: &IngestOptions) -> Result<Ingested> {
    if opts.redial_files.is_empty() && opts.test_files.is_empty() {
        return Err(Error::Config("no corpus files given".into()));
    }
    let ml = load_movielens(&opts.movielens)?;
    let all_files: Vec<&PathBuf> = opts.redial_files.iter().chain(&opts.test_files).collect();
    let table = redial_movie_table(&all_files)?;
    if table.is_empty() {
        return Err(Error::Empty("movie mention table"));
    }
    let (catalog, catalog_report) = build_catalog(&table, &ml, &CategoryVocabulary::movielens())?;

    let mut conversations = Vec::new();
    let mut corpus = ParseReport::default();
    for (files, published_test) in [(&opts.redial_files, false), (&opts.test_files, true)] {
        for f in files {
            let (convs, r) = parse_redial(f, &catalog, published_test)?;
            corpus.merge(&r);
            conversations.extend(convs);
        }
    }
    assign_splits(&mut conversations, opts.seed);
    let (samples, sample_report) = build_all_samples(&conversations, &catalog, opts.include_empty_history);
    Ok(Ingested {
        catalog,
        conversations,
        samples,
        report: IngestReport {
            movielens: ml.report.clone(),
            catalog: catalog_report,
            corpus,
            samples: sample_report,
            split_seed: opts.seed,
        },
    })
}

impl Ingested {
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        self.catalog.save(dir.join(CATALOG_FILE))?;
        write_samples(dir.join(SAMPLES_FILE), &self.samples)?;
        write_json(&dir.join(REPORT_FILE), &self.report)
    }
}

/// Catalog and samples from a directory written by [`Ingested::write`].
pub fn load_data_dir(dir: impl AsRef<Path>) -> Result<(Catalog, Vec<Sample>)> {
    let dir = dir.as_ref();
    Ok((Catalog::load(dir.join(CATALOG_FILE))?, read_samples(dir.join(SAMPLES_FILE))?))
}
