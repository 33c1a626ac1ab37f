//! Recall@N evaluation and the comparison report.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use ndarray::Array1;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::Sample;
use crate::error::{Error, Result};
use crate::model::{Mode, Recommender};
use crate::scalar::{lit, Scalar};
use crate::scorer::rank_items;

pub const CUTOFFS: [usize; 2] = [1, 10];

/// Published Recall@1 / Recall@10 (percent) of prior systems on the same
/// corpus, shown next to our numbers for context.
pub const REFERENCE_BASELINES: [(&str, f64, f64); 2] = [("ReDial", 1.50, 10.49), ("KBRD", 2.15, 16.42)];

/// 1 if `target` is among the first `n` entries of `ranked`.
pub fn recall_at_n(ranked: &[usize], target: usize, n: usize) -> u32 {
    ranked.iter().take(n).any(|&i| i == target) as u32
}

/// Where category vectors come from during evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PreferenceSource {
    Model,
    GroundTruth,
}

impl PreferenceSource {
    pub fn for_mode(mode: Mode) -> Self {
        match mode {
            Mode::Oracle => PreferenceSource::GroundTruth,
            Mode::TwoStage | Mode::E2e => PreferenceSource::Model,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalOptions {
    /// Drop items already mentioned in the history from the ranking.
    pub exclude_mentioned: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mode: String,
    pub sample_count: usize,
    pub hits_at_1: usize,
    pub hits_at_10: usize,
    pub rec_at_1_pct: f64,
    pub rec_at_10_pct: f64,
    #[serde(default)]
    pub metadata: BTreeMap<String, String>,
}

impl EvalReport {
    fn from_hits(mode: &str, n: usize, hits: [usize; 2]) -> Self {
        let pct = |h: usize| 100.0 * h as f64 / n as f64;
        Self {
            mode: mode.to_string(),
            sample_count: n,
            hits_at_1: hits[0],
            hits_at_10: hits[1],
            rec_at_1_pct: pct(hits[0]),
            rec_at_10_pct: pct(hits[1]),
            metadata: BTreeMap::new(),
        }
    }

    /// Fixed-width table with the reference baselines underneath.
    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{:<14} {:>8} {:>8} {:>9}", "model", "Rec@1", "Rec@10", "samples");
        let _ = writeln!(
            s,
            "{:<14} {:>8.2} {:>8.2} {:>9}",
            self.mode, self.rec_at_1_pct, self.rec_at_10_pct, self.sample_count
        );
        for (name, r1, r10) in REFERENCE_BASELINES {
            let _ = writeln!(s, "{:<14} {:>8.2} {:>8.2} {:>9}", format!("{name} (ref)"), r1, r10, "-");
        }
        s
    }

    /// `key=value` lines, sorted, for regression diffs.
    pub fn to_key_values(&self) -> String {
        let mut kv: BTreeMap<String, String> = BTreeMap::new();
        kv.insert("mode".into(), self.mode.clone());
        kv.insert("sample_count".into(), self.sample_count.to_string());
        kv.insert("hits_at_1".into(), self.hits_at_1.to_string());
        kv.insert("hits_at_10".into(), self.hits_at_10.to_string());
        kv.insert("rec_at_1_pct".into(), format!("{:.4}", self.rec_at_1_pct));
        kv.insert("rec_at_10_pct".into(), format!("{:.4}", self.rec_at_10_pct));
        for (name, r1, r10) in REFERENCE_BASELINES {
            let key = name.to_lowercase();
            kv.insert(format!("reference.{key}.rec_at_1_pct"), format!("{r1:.2}"));
            kv.insert(format!("reference.{key}.rec_at_10_pct"), format!("{r10:.2}"));
        }
        for (k, v) in &self.metadata {
            kv.insert(format!("meta.{k}"), v.clone());
        }
        kv.into_iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }

    /// Writes `<stem>.txt` (table) and `<stem>.kv` (key-values).
    pub fn write(&self, stem: impl AsRef<Path>) -> Result<()> {
        let stem = stem.as_ref();
        for (ext, body) in [("txt", self.to_table()), ("kv", self.to_key_values())] {
            let path = stem.with_extension(ext);
            if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
                std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            }
            std::fs::write(&path, body).map_err(|e| Error::io(&path, e))?;
        }
        Ok(())
    }
}

/// Scores every sample with `score`, ranks, and counts hits at 1 and 10.
/// Samples are scored in parallel; hit counts are order-independent sums.
pub fn evaluate_with<T, F>(mode: &str, samples: &[Sample], num_items: usize, opts: &EvalOptions, mention_index: &(dyn Fn(u64) -> Option<usize> + Sync), score: F) -> Result<EvalReport>
where
    T: Scalar,
    F: Fn(usize, &Sample) -> Result<Array1<T>> + Sync,
{
    if samples.is_empty() {
        return Err(Error::Empty("evaluation samples"));
    }
    if let Some(s) = samples.iter().find(|s| s.target_item >= num_items) {
        return Err(Error::UnknownItem(s.target_item));
    }
    let depth = CUTOFFS[1].min(num_items);
    let hits: Vec<Result<[usize; 2]>> = samples
        .par_iter()
        .enumerate()
        .map(|(i, s)| {
            let mut scores = score(i, s)?;
            if scores.len() != num_items {
                return Err(Error::Shape {
                    context: "item scores",
                    expected: num_items,
                    actual: scores.len(),
                });
            }
            if opts.exclude_mentioned {
                for id in s.history.iter().flat_map(|u| &u.mentions) {
                    if let Some(idx) = mention_index(*id) {
                        scores[idx] = T::neg_infinity();
                    }
                }
            }
            let ranked: Vec<usize> = rank_items(scores.view(), depth).into_iter().map(|(i, _)| i).collect();
            Ok(CUTOFFS.map(|n| recall_at_n(&ranked, s.target_item, n) as usize))
        })
        .collect();
    let mut total = [0usize; 2];
    for h in hits {
        let h = h?;
        total[0] += h[0];
        total[1] += h[1];
    }
    Ok(EvalReport::from_hits(mode, samples.len(), total))
}

/// Runs `model` over `samples`, taking category vectors from `source`.
pub fn evaluate<T: Scalar>(model: &Recommender<T>, samples: &[Sample], source: PreferenceSource, opts: &EvalOptions) -> Result<EvalReport> {
    let stage = match source {
        PreferenceSource::Model => Some(model.preference.as_ref().ok_or_else(|| {
            Error::Config("this checkpoint has no preference model; evaluate it with ground-truth category vectors".into())
        })?),
        PreferenceSource::GroundTruth => None,
    };
    let label = match source {
        PreferenceSource::GroundTruth if model.mode != Mode::Oracle => format!("{}+gt", model.mode),
        _ => model.mode.to_string(),
    };
    let catalog = &model.catalog;
    let mut report = evaluate_with(&label, samples, catalog.len(), opts, &|id| catalog.index_of(id), |_, s| {
        let pref: Array1<T> = match stage {
            Some(p) => p.predict(&s.history)?.values,
            None => s.target_category_vector.iter().map(|&v| lit(v)).collect(),
        };
        Ok(model.score(pref.view())?.probs)
    })?;
    report.metadata.insert("catalog_fingerprint".into(), catalog.fingerprint());
    report.metadata.insert("exclude_mentioned".into(), opts.exclude_mentioned.to_string());
    Ok(report)
}

/// A scorer that ranks items uniformly at random: each sample gets i.i.d.
/// uniform scores from a stream derived from `seed` and its position.
pub fn evaluate_random(samples: &[Sample], num_items: usize, seed: u64, opts: &EvalOptions, mention_index: &(dyn Fn(u64) -> Option<usize> + Sync)) -> Result<EvalReport> {
    let mut report = evaluate_with("random", samples, num_items, opts, mention_index, |i, _| {
        let mut rng = crate::training::derived_rng(seed, 0x7261_6e64, i as u64, 0);
        Ok(Array1::from_shape_simple_fn(num_items, || rng.random::<f64>()))
    })?;
    report.metadata.insert("seed".into(), seed.to_string());
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn recall_basics() {
        let ranked: Vec<usize> = (0..20).collect();
        assert_eq!(recall_at_n(&ranked, 0, 1), 1);
        assert_eq!(recall_at_n(&ranked, 10, 10), 0);
        assert_eq!(recall_at_n(&ranked, 9, 10), 1);
    }

    #[test]
    fn report_formats() {
        let r = EvalReport::from_hits("two_stage", 200, [5, 30]);
        assert_eq!(r.rec_at_1_pct, 2.5);
        assert_eq!(r.rec_at_10_pct, 15.0);
        let kv = r.to_key_values();
        assert!(kv.contains("rec_at_10_pct=15.0000\n"));
        assert!(kv.contains("reference.kbrd.rec_at_10_pct=16.42\n"));
        let table = r.to_table();
        assert!(table.lines().nth(1).unwrap().starts_with("two_stage"));
        assert!(table.contains("ReDial (ref)"));
    }
}
