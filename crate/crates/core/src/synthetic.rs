//! Small synthetic corpus in the ReDial/MovieLens file formats, with a
//! planted rule: a keyword in the seeker's request names a genre, and the
//! recommender always answers with that genre's single-genre movie.

use std::path::{Path, PathBuf};

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use crate::catalog::RedialId;
use crate::error::{Error, Result};

/// Keyword and the genre it stands for.
pub const RULES: [(&str, &str); 8] = [
    ("funny", "Comedy"),
    ("scary", "Horror"),
    ("cartoon", "Animation"),
    ("cowboy", "Western"),
    ("spaceship", "Sci-Fi"),
    ("detective", "Mystery"),
    ("battlefield", "War"),
    ("romantic", "Romance"),
];

const OPENERS: [&str; 4] = ["hi there", "hello", "hey", "good evening"];
const REQUESTS: [&str; 4] = [
    "i am looking for something {kw}",
    "can you suggest a {kw} movie",
    "i want to watch a {kw} film tonight",
    "anything {kw} would be great",
];
const ASIDES: [&str; 3] = ["i really liked @{id} last week", "my friend keeps talking about @{id}", "i already saw @{id}"];
const PITCHES: [&str; 3] = ["you might enjoy @{id}", "have you seen @{id} ?", "try @{id} then"];
const RECOMMENDER_OPENERS: [&str; 2] = ["hi! what kind of movies do you like?", "hello, what are you in the mood for?"];
const CLOSERS: [&str; 3] = ["thanks!", "sounds good", "great, i will check it out"];

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub conversations: usize,
    pub seed: u64,
    /// Movies that appear in the corpus but not in the genre table.
    pub unmatched_movies: usize,
    /// Two-genre movies per rule that are mentioned but never recommended.
    pub distractors_per_rule: usize,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            conversations: 200,
            seed: 7,
            unmatched_movies: 4,
            distractors_per_rule: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticCorpus {
    pub movies_csv: String,
    pub redial_jsonl: String,
    /// Redial id of the movie each rule recommends, in [`RULES`] order.
    pub targets: Vec<RedialId>,
}

struct Movie {
    id: RedialId,
    title: String,
    genres: Option<Vec<&'static str>>,
}

fn capitalize(s: &str) -> String {
    let mut c = s.chars();
    c.next().map(|f| f.to_uppercase().collect::<String>() + c.as_str()).unwrap_or_default()
}

fn movies(spec: &SyntheticSpec) -> Vec<Movie> {
    let extra = ["Drama", "Documentary", "IMAX", "Musical"];
    let mut out = Vec::new();
    for (k, (kw, genre)) in RULES.iter().enumerate() {
        out.push(Movie {
            id: 1000 + k as RedialId,
            title: format!("The {} Story ({})", capitalize(kw), 1990 + k),
            genres: Some(vec![genre]),
        });
        for d in 0..spec.distractors_per_rule {
            out.push(Movie {
                id: 2000 + (k * 10 + d) as RedialId,
                title: format!("{} Nights {} ({})", capitalize(kw), d + 1, 2000 + k),
                genres: Some(vec![genre, extra[d % extra.len()]]),
            });
        }
    }
    for u in 0..spec.unmatched_movies {
        out.push(Movie {
            id: 3000 + u as RedialId,
            title: format!("Unlisted Picture {} ({})", u + 1, 2010 + u),
            genres: None,
        });
    }
    out
}

pub fn generate(spec: &SyntheticSpec) -> SyntheticCorpus {
    let movies = movies(spec);
    let mut csv = csv::Writer::from_writer(Vec::new());
    csv.write_record(["movieId", "title", "genres"]).expect("in-memory write");
    for (n, m) in movies.iter().enumerate() {
        if let Some(g) = &m.genres {
            csv.write_record([(n + 1).to_string(), m.title.clone(), g.join("|")]).expect("in-memory write");
        }
    }
    let movies_csv = String::from_utf8(csv.into_inner().expect("in-memory flush")).expect("utf-8");

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let targets: Vec<RedialId> = (0..RULES.len()).map(|k| 1000 + k as RedialId).collect();
    let asides: Vec<&Movie> = movies.iter().filter(|m| !targets.contains(&m.id)).collect();
    let mut lines = Vec::with_capacity(spec.conversations);
    for c in 0..spec.conversations {
        let rule = c % RULES.len();
        let (kw, _) = RULES[rule];
        let seeker = 100 + (c % 17) as i64;
        let recommender = 200 + (c % 13) as i64;
        let mut msgs: Vec<(i64, String)> = Vec::new();
        let mut mentioned: Vec<&Movie> = Vec::new();
        if rng.random_bool(0.3) {
            msgs.push((recommender, RECOMMENDER_OPENERS.choose(&mut rng).unwrap().to_string()));
        }
        msgs.push((seeker, OPENERS.choose(&mut rng).unwrap().to_string()));
        msgs.push((seeker, REQUESTS.choose(&mut rng).unwrap().replace("{kw}", kw)));
        if !asides.is_empty() && rng.random_bool(0.4) {
            let m = *asides.choose(&mut rng).unwrap();
            mentioned.push(m);
            msgs.push((seeker, ASIDES.choose(&mut rng).unwrap().replace("{id}", &m.id.to_string())));
        }
        let target = movies.iter().find(|m| m.id == targets[rule]).expect("target exists");
        mentioned.push(target);
        msgs.push((recommender, PITCHES.choose(&mut rng).unwrap().replace("{id}", &target.id.to_string())));
        msgs.push((seeker, CLOSERS.choose(&mut rng).unwrap().to_string()));

        let mention_table: serde_json::Map<String, serde_json::Value> =
            mentioned.iter().map(|m| (m.id.to_string(), json!(m.title))).collect();
        let record = json!({
            "conversationId": (20000 + c).to_string(),
            "initiatorWorkerId": seeker,
            "respondentWorkerId": recommender,
            "messages": msgs.iter().enumerate().map(|(i, (who, text))| json!({
                "messageId": i,
                "senderWorkerId": who,
                "text": text,
                "timeOffset": i * 5,
            })).collect::<Vec<_>>(),
            "movieMentions": mention_table,
        });
        lines.push(record.to_string());
    }
    SyntheticCorpus {
        movies_csv,
        redial_jsonl: lines.join("\n") + "\n",
        targets,
    }
}

impl SyntheticCorpus {
    /// Writes `movies.csv` and `redial.jsonl` into `dir`.
    pub fn write_to(&self, dir: impl AsRef<Path>) -> Result<(PathBuf, PathBuf)> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let movies = dir.join("movies.csv");
        let redial = dir.join("redial.jsonl");
        std::fs::write(&movies, &self.movies_csv).map_err(|e| Error::io(&movies, e))?;
        std::fs::write(&redial, &self.redial_jsonl).map_err(|e| Error::io(&redial, e))?;
        Ok((movies, redial))
    }
}
