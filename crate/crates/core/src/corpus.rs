//! ReDial conversation parsing, split assignment and sample construction.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::sync::OnceLock;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::catalog::{Catalog, RedialId};
use crate::error::{Error, Result};

/// Share of all conversations held out for testing when the distribution
/// ships no test file of its own.
pub const TEST_FRACTION: f64 = 0.10;
/// Share of the training portion moved to validation (0.2 * 0.9 = 0.18).
pub const VALIDATION_FRACTION_OF_TRAIN: f64 = 0.20;

const MAX_REPORT_WARNINGS: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Sender {
    Seeker,
    Recommender,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Validation,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Validation, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Validation => "validation",
            Split::Test => "test",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "validation" | "valid" | "val" => Ok(Split::Validation),
            "test" => Ok(Split::Test),
            other => Err(Error::Config(format!("unknown split {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Utterance {
    pub sender: Sender,
    pub text: String,
    /// Catalog-resolvable `@<id>` mentions, in text order.
    pub mentions: Vec<RedialId>,
}

impl Utterance {
    /// Builds an utterance, keeping every `@<id>` mention found in `text`.
    pub fn new(sender: Sender, text: impl Into<String>) -> Self {
        let text = text.into();
        let mentions = extract_mentions(&text);
        Self {
            sender,
            text,
            mentions,
        }
    }

    pub fn seeker(text: impl Into<String>) -> Self {
        Self::new(Sender::Seeker, text)
    }

    pub fn recommender(text: impl Into<String>) -> Self {
        Self::new(Sender::Recommender, text)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Conversation {
    pub conv_id: String,
    pub utterances: Vec<Utterance>,
    pub split: Split,
    /// Came from the distribution's own test file.
    #[serde(default)]
    pub published_test: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub conv_id: String,
    pub split: Split,
    /// Index of the recommender utterance that mentions the target.
    pub cut: usize,
    pub history: Vec<Utterance>,
    pub target_item: usize,
    pub target_redial_id: RedialId,
    pub target_category_vector: Vec<f64>,
}

pub(crate) fn mention_pattern() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"@(\d+)").unwrap())
}

/// Every `@<id>` in `text`, in order.
pub fn extract_mentions(text: &str) -> Vec<RedialId> {
    mention_pattern()
        .captures_iter(text)
        .filter_map(|c| c[1].parse().ok())
        .collect()
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParseReport {
    pub conversations: usize,
    pub utterances: usize,
    /// Every `@<id>` occurrence in message text.
    pub mentions_total: usize,
    pub mentions_resolved: usize,
    pub mentions_dropped: usize,
    pub malformed_lines: usize,
    pub warnings: Vec<String>,
}

impl ParseReport {
    fn warn(&mut self, msg: String) {
        log::warn!("{msg}");
        if self.warnings.len() < MAX_REPORT_WARNINGS {
            self.warnings.push(msg);
        }
    }

    pub fn merge(&mut self, other: &ParseReport) {
        self.conversations += other.conversations;
        self.utterances += other.utterances;
        self.mentions_total += other.mentions_total;
        self.mentions_resolved += other.mentions_resolved;
        self.mentions_dropped += other.mentions_dropped;
        self.malformed_lines += other.malformed_lines;
        for w in &other.warnings {
            if self.warnings.len() < MAX_REPORT_WARNINGS {
                self.warnings.push(w.clone());
            }
        }
    }
}

#[derive(Debug, Deserialize)]
struct RawMessage {
    text: String,
    #[serde(rename = "senderWorkerId")]
    sender_worker_id: i64,
}

#[derive(Debug, Deserialize)]
struct RawRecord {
    #[serde(rename = "conversationId")]
    conversation_id: serde_json::Value,
    #[serde(rename = "initiatorWorkerId")]
    initiator_worker_id: i64,
    messages: Vec<RawMessage>,
    /// An object id -> title, or `[]` when the conversation mentions nothing.
    #[serde(rename = "movieMentions", default)]
    movie_mentions: serde_json::Value,
}

fn conv_id_string(v: &serde_json::Value) -> String {
    match v {
        serde_json::Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}

fn mention_table(v: &serde_json::Value) -> Vec<(RedialId, String)> {
    let mut out = Vec::new();
    if let serde_json::Value::Object(map) = v {
        for (k, title) in map {
            if let Ok(id) = k.trim().parse::<RedialId>() {
                let title = title.as_str().unwrap_or_default().trim().to_string();
                out.push((id, title));
            }
        }
    }
    out
}

/// Union of the per-conversation movie-mention tables across corpus files.
/// The first title seen for an id wins.
pub fn redial_movie_table<P: AsRef<Path>>(paths: &[P]) -> Result<Vec<(RedialId, String)>> {
    let mut table: BTreeMap<RedialId, String> = BTreeMap::new();
    for path in paths {
        let path = path.as_ref();
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        for (n, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let record: RawRecord = match serde_json::from_str(&line) {
                Ok(r) => r,
                Err(e) => {
                    log::warn!("{}:{}: skipping malformed record: {e}", path.display(), n + 1);
                    continue;
                }
            };
            for (id, title) in mention_table(&record.movie_mentions) {
                table.entry(id).or_insert(title);
            }
        }
    }
    Ok(table.into_iter().collect())
}

/// Parses ReDial JSON lines. Senders are resolved against the initiator
/// (seeker) worker id; mentions absent from `catalog` are dropped and counted.
pub fn parse_redial_reader<R: BufRead>(
    reader: R,
    catalog: &Catalog,
    published_test: bool,
) -> Result<(Vec<Conversation>, ParseReport)> {
    let mut report = ParseReport::default();
    let mut convs = Vec::new();
    for (n, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::format("redial corpus", e.to_string()))?;
        if line.trim().is_empty() {
            continue;
        }
        let record: RawRecord = match serde_json::from_str(&line) {
            Ok(r) => r,
            Err(e) => {
                report.malformed_lines += 1;
                report.warn(format!("line {}: malformed record: {e}", n + 1));
                continue;
            }
        };
        let conv_id = conv_id_string(&record.conversation_id);
        let mut utterances = Vec::with_capacity(record.messages.len());
        for msg in record.messages {
            let sender = if msg.sender_worker_id == record.initiator_worker_id {
                Sender::Seeker
            } else {
                Sender::Recommender
            };
            let raw = extract_mentions(&msg.text);
            report.mentions_total += raw.len();
            let mut mentions = Vec::with_capacity(raw.len());
            for id in raw {
                if catalog.index_of(id).is_some() {
                    mentions.push(id);
                } else {
                    report.mentions_dropped += 1;
                    report.warn(format!("conversation {conv_id}: unresolvable movie id {id}"));
                }
            }
            report.mentions_resolved += mentions.len();
            utterances.push(Utterance {
                sender,
                text: msg.text,
                mentions,
            });
        }
        report.utterances += utterances.len();
        report.conversations += 1;
        convs.push(Conversation {
            conv_id,
            utterances,
            split: if published_test { Split::Test } else { Split::Train },
            published_test,
        });
    }
    Ok((convs, report))
}

pub fn parse_redial(
    path: impl AsRef<Path>,
    catalog: &Catalog,
    published_test: bool,
) -> Result<(Vec<Conversation>, ParseReport)> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    parse_redial_reader(BufReader::new(file), catalog, published_test)
}

fn round_count(n: usize, fraction: f64) -> usize {
    ((n as f64) * fraction).round() as usize
}

/// Assigns train/validation/test at conversation granularity.
///
/// Conversations from a published test file stay in test. If there are none,
/// a seeded 10% is carved out as test first. The remainder is shuffled and
/// split 80/20 into train and validation.
pub fn assign_splits(convs: &mut [Conversation], seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pool: Vec<usize> = Vec::with_capacity(convs.len());
    let mut has_published = false;
    for (i, c) in convs.iter_mut().enumerate() {
        if c.published_test {
            c.split = Split::Test;
            has_published = true;
        } else {
            pool.push(i);
        }
    }
    pool.shuffle(&mut rng);
    if !has_published {
        let n_test = round_count(convs.len(), TEST_FRACTION);
        for &i in &pool[..n_test] {
            convs[i].split = Split::Test;
        }
        pool.drain(..n_test);
    }
    let n_val = round_count(pool.len(), VALIDATION_FRACTION_OF_TRAIN);
    for (rank, &i) in pool.iter().enumerate() {
        convs[i].split = if rank < n_val { Split::Validation } else { Split::Train };
    }
}

/// One sample per catalog-resolved recommender mention. Returns the samples
/// and the number dropped for having an empty history.
pub fn build_samples(conv: &Conversation, catalog: &Catalog, include_empty_history: bool) -> (Vec<Sample>, usize) {
    let mut samples = Vec::new();
    let mut dropped = 0;
    for (cut, utt) in conv.utterances.iter().enumerate() {
        if utt.sender != Sender::Recommender {
            continue;
        }
        for &id in &utt.mentions {
            let Some(item) = catalog.by_redial_id(id) else {
                continue;
            };
            if cut == 0 && !include_empty_history {
                dropped += 1;
                continue;
            }
            samples.push(Sample {
                conv_id: conv.conv_id.clone(),
                split: conv.split,
                cut,
                history: conv.utterances[..cut].to_vec(),
                target_item: item.item_index,
                target_redial_id: id,
                target_category_vector: item.category_vector.clone(),
            });
        }
    }
    (samples, dropped)
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleReport {
    pub recommender_mentions: usize,
    pub samples: usize,
    pub dropped_empty_history: usize,
    pub per_split: BTreeMap<String, usize>,
    pub conversations_per_split: BTreeMap<String, usize>,
}

/// Builds samples for every conversation in parallel; order follows `convs`.
pub fn build_all_samples(convs: &[Conversation], catalog: &Catalog, include_empty_history: bool) -> (Vec<Sample>, SampleReport) {
    let built: Vec<(Vec<Sample>, usize)> = convs
        .par_iter()
        .map(|c| build_samples(c, catalog, include_empty_history))
        .collect();
    let mut report = SampleReport::default();
    for c in convs {
        *report.conversations_per_split.entry(c.split.as_str().to_string()).or_default() += 1;
        report.recommender_mentions += c
            .utterances
            .iter()
            .filter(|u| u.sender == Sender::Recommender)
            .map(|u| u.mentions.len())
            .sum::<usize>();
    }
    let mut samples = Vec::new();
    for (s, dropped) in built {
        report.dropped_empty_history += dropped;
        samples.extend(s);
    }
    report.samples = samples.len();
    for s in &samples {
        *report.per_split.entry(s.split.as_str().to_string()).or_default() += 1;
    }
    (samples, report)
}

pub fn write_samples(path: impl AsRef<Path>, samples: &[Sample]) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for s in samples {
        serde_json::to_writer(&mut w, s)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_samples(path: impl AsRef<Path>) -> Result<Vec<Sample>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}
