mod common;

use std::collections::BTreeMap;

use catrec::corpus::{extract_mentions, Split};
use catrec::ingest::load_data_dir;
use catrec::synthetic::RULES;

#[test]
fn synthetic_corpus_counts() {
    let dir = tempfile::tempdir().unwrap();
    let data = common::synthetic_data(dir.path(), 120, 21);
    let csv = std::fs::read_to_string(dir.path().join("movies.csv")).unwrap();
    let jsonl = std::fs::read_to_string(dir.path().join("redial.jsonl")).unwrap();

    // Counts taken straight from the files.
    let csv_rows = csv.lines().count() - 1;
    let raw_mentions: usize = jsonl
        .lines()
        .map(|l| {
            let v: serde_json::Value = serde_json::from_str(l).unwrap();
            v["messages"].as_array().unwrap().iter().map(|m| m["text"].as_str().unwrap().matches('@').count()).sum::<usize>()
        })
        .sum();

    let r = &data.report;
    assert_eq!(r.movielens.loaded, csv_rows);
    assert_eq!(r.corpus.conversations, 120);
    assert_eq!(r.corpus.mentions_total, raw_mentions);
    assert_eq!(data.catalog.len(), RULES.len() * 2 + 4);
    assert_eq!(r.catalog.unlinked, 4);
    assert!((r.catalog.unmatched_fraction() - 4.0 / 20.0).abs() < 1e-12);
    // Exactly one recommender mention per conversation, never in the opener.
    assert_eq!(data.samples.len(), 120);
    assert_eq!(r.samples.dropped_empty_history, 0);

    let per_split: BTreeMap<Split, usize> = data.conversations.iter().fold(BTreeMap::new(), |mut m, c| {
        *m.entry(c.split).or_default() += 1;
        m
    });
    assert_eq!(per_split[&Split::Test], 12);
    assert_eq!(per_split[&Split::Validation], 22);
    assert_eq!(per_split[&Split::Train], 86);

    for s in &data.samples {
        let item = &data.catalog.items()[s.target_item];
        assert_eq!(item.redial_id, s.target_redial_id);
        assert_eq!(s.target_category_vector, item.category_vector);
        assert_eq!(s.target_category_vector.iter().filter(|&&v| v == 1.0).count(), 1);
        assert!(s.history.iter().all(|u| extract_mentions(&u.text) == u.mentions));
    }
}

#[test]
fn written_data_reloads() {
    let dir = tempfile::tempdir().unwrap();
    let data = common::synthetic_data(dir.path(), 40, 22);
    let out = dir.path().join("data");
    data.write(&out).unwrap();
    let (catalog, samples) = load_data_dir(&out).unwrap();
    assert_eq!(catalog.fingerprint(), data.catalog.fingerprint());
    assert_eq!(samples, data.samples);
    assert!(out.join("ingest_report.json").exists());

    let again = common::synthetic_data(&dir.path().join("again"), 40, 22);
    assert_eq!(again.catalog.to_text(), data.catalog.to_text());
    assert_eq!(again.samples, data.samples);
}
