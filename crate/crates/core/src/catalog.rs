//! Category-annotated item catalog.
//!
//! ReDial movie titles are linked to MovieLens `movies.csv` rows by normalized
//! title and release year. Linked movies with listed genres get a binary genre
//! vector; every other movie gets the uninformative all-0.5 vector.

use std::collections::{HashMap, HashSet};
use std::fmt::Write as _;
use std::fs::File;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Source-corpus movie identifier (the number in an `@<id>` mention).
pub type RedialId = u64;

/// The 19 MovieLens genres, in the order used for every category vector.
pub const MOVIELENS_GENRES: [&str; 19] = [
    "Comedy",
    "IMAX",
    "Romance",
    "Western",
    "Crime",
    "Sci-Fi",
    "Animation",
    "Thriller",
    "Fantasy",
    "Film-Noir",
    "Mystery",
    "Action",
    "Horror",
    "Adventure",
    "Musical",
    "Children",
    "Drama",
    "War",
    "Documentary",
];

/// Value written into every component of an item without genre information.
pub const UNKNOWN_CATEGORY_VALUE: f64 = 0.5;

const NO_GENRES_SENTINEL: &str = "(no genres listed)";
const CATALOG_HEADER: &str = "# catrec catalog v1";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CategoryVocabulary {
    names: Vec<String>,
}

impl CategoryVocabulary {
    pub fn new<S: Into<String>>(names: impl IntoIterator<Item = S>) -> Result<Self> {
        let names: Vec<String> = names.into_iter().map(Into::into).collect();
        if names.is_empty() {
            return Err(Error::Empty("category vocabulary"));
        }
        let mut seen = HashSet::new();
        for n in &names {
            if !seen.insert(n.as_str()) {
                return Err(Error::format("category vocabulary", format!("duplicate category {n:?}")));
            }
        }
        Ok(Self { names })
    }

    /// The 19 MovieLens genres.
    pub fn movielens() -> Self {
        Self {
            names: MOVIELENS_GENRES.iter().map(|s| s.to_string()).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn name(&self, index: usize) -> &str {
        &self.names[index]
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }
}

/// A title reduced to its linking key.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct NormalizedTitle {
    pub title: String,
    pub year: Option<u16>,
}

fn year_suffix() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"^(.*?)\s*\((\d{4})\)\s*$").unwrap())
}

fn trailing_paren() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"^(.+?)\s*\([^()]*\)\s*$").unwrap())
}

/// Splits a raw display title into its text and an optional trailing `(YYYY)`.
pub fn split_year(raw: &str) -> (&str, Option<u16>) {
    let raw = raw.trim();
    match year_suffix().captures(raw) {
        Some(c) => {
            let year = c[2].parse().ok();
            (c.get(1).map_or("", |m| m.as_str()), year)
        }
        None => (raw, None),
    }
}

/// Linking key: lowercase, year extracted, alternate-title parentheticals
/// removed, punctuation folded to spaces, one leading and one trailing article
/// dropped ("Shawshank Redemption, The" and "The Shawshank Redemption" agree).
pub fn normalize_title(raw: &str) -> NormalizedTitle {
    let (text, year) = split_year(raw);
    let mut text = text.to_lowercase();
    while let Some(c) = trailing_paren().captures(&text) {
        text = c[1].to_string();
    }

    let mut folded = String::with_capacity(text.len());
    for ch in text.chars() {
        if ch.is_alphanumeric() {
            folded.push(ch);
        } else if ch == '\'' || ch == '\u{2019}' {
            // "schindler's" -> "schindlers"
        } else {
            folded.push(' ');
        }
    }
    let mut words: Vec<&str> = folded.split_whitespace().collect();
    let is_article = |w: &str| matches!(w, "the" | "a" | "an");
    if words.len() > 1 && is_article(words[0]) {
        words.remove(0);
    }
    if words.len() > 1 && is_article(words[words.len() - 1]) {
        words.pop();
    }
    NormalizedTitle {
        title: words.join(" "),
        year,
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MovieLensEntry {
    pub movie_id: u64,
    pub key: NormalizedTitle,
    /// Empty for "(no genres listed)".
    pub genres: Vec<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MovieLensReport {
    pub data_rows: usize,
    pub loaded: usize,
    pub skipped: usize,
    pub warnings: Vec<String>,
}

/// Parsed `movies.csv`, indexed for title linking.
#[derive(Debug, Clone, Default)]
pub struct MovieLensIndex {
    entries: Vec<MovieLensEntry>,
    exact: HashMap<(String, u16), usize>,
    by_title: HashMap<String, Vec<usize>>,
    pub report: MovieLensReport,
}

impl MovieLensIndex {
    pub fn from_reader<R: Read>(reader: R) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new()
            .has_headers(true)
            .flexible(true)
            .from_reader(reader);
        let headers = rdr
            .headers()
            .map_err(|e| Error::format("movies.csv header", e.to_string()))?
            .clone();
        let expected = ["movieId", "title", "genres"];
        if headers.len() < 3 || headers.iter().zip(expected).any(|(h, e)| h.trim() != e) {
            return Err(Error::format(
                "movies.csv header",
                format!("expected movieId,title,genres, got {:?}", headers),
            ));
        }

        let mut index = MovieLensIndex::default();
        for (row_no, record) in rdr.records().enumerate() {
            index.report.data_rows += 1;
            let line = row_no + 2;
            let record = match record {
                Ok(r) => r,
                Err(e) => {
                    index.skip(format!("line {line}: {e}"));
                    continue;
                }
            };
            if record.len() != 3 {
                index.skip(format!("line {line}: expected 3 fields, got {}", record.len()));
                continue;
            }
            let movie_id = match record[0].trim().parse::<u64>() {
                Ok(id) => id,
                Err(_) => {
                    index.skip(format!("line {line}: bad movieId {:?}", &record[0]));
                    continue;
                }
            };
            let title = record[1].trim();
            if title.is_empty() {
                index.skip(format!("line {line}: empty title"));
                continue;
            }
            let genres_field = record[2].trim();
            let genres = if genres_field == NO_GENRES_SENTINEL || genres_field.is_empty() {
                Vec::new()
            } else {
                genres_field.split('|').map(|g| g.trim().to_string()).collect()
            };
            index.push(MovieLensEntry {
                movie_id,
                key: normalize_title(title),
                genres,
            });
        }
        Ok(index)
    }

    fn skip(&mut self, warning: String) {
        log::warn!("movies.csv: {warning}");
        self.report.skipped += 1;
        self.report.warnings.push(warning);
    }

    fn push(&mut self, entry: MovieLensEntry) {
        let idx = self.entries.len();
        if let Some(year) = entry.key.year {
            self.exact.entry((entry.key.title.clone(), year)).or_insert(idx);
        }
        self.by_title.entry(entry.key.title.clone()).or_default().push(idx);
        self.entries.push(entry);
        self.report.loaded += 1;
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[MovieLensEntry] {
        &self.entries
    }

    /// Exact (title, year) match; otherwise a title-only match when the year
    /// is missing on either side and exactly one candidate qualifies.
    pub fn lookup(&self, key: &NormalizedTitle) -> Option<&MovieLensEntry> {
        if let Some(year) = key.year {
            if let Some(&i) = self.exact.get(&(key.title.clone(), year)) {
                return Some(&self.entries[i]);
            }
        }
        let candidates = self.by_title.get(&key.title)?;
        let eligible: Vec<usize> = match key.year {
            Some(_) => candidates
                .iter()
                .copied()
                .filter(|&i| self.entries[i].key.year.is_none())
                .collect(),
            None => candidates.clone(),
        };
        match eligible.as_slice() {
            [only] => Some(&self.entries[*only]),
            _ => None,
        }
    }
}

/// Reads a MovieLens `movies.csv`.
pub fn load_movielens(path: impl AsRef<Path>) -> Result<MovieLensIndex> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    MovieLensIndex::from_reader(BufReader::new(file))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Item {
    pub item_index: usize,
    pub redial_id: RedialId,
    pub title: String,
    pub year: Option<u16>,
    pub category_vector: Vec<f64>,
    pub matched: bool,
}

impl Item {
    /// "Title (Year)" or just the title.
    pub fn display_title(&self) -> String {
        match self.year {
            Some(y) => format!("{} ({y})", self.title),
            None => self.title.clone(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CatalogReport {
    pub total: usize,
    /// Linked and with at least one known genre.
    pub matched: usize,
    /// No MovieLens row found.
    pub unlinked: usize,
    /// Linked, but MovieLens lists no genres.
    pub linked_without_genres: usize,
    pub unknown_genres: Vec<String>,
}

impl CatalogReport {
    pub fn unmatched_fraction(&self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            self.unlinked as f64 / self.total as f64
        }
    }
}

#[derive(Debug, Clone)]
pub struct Catalog {
    items: Vec<Item>,
    by_redial_id: HashMap<RedialId, usize>,
    vocabulary: CategoryVocabulary,
}

/// Links every ReDial movie to MovieLens and assigns its category vector.
/// Items are indexed in ascending `redial_id` order.
pub fn build_catalog(
    redial_movies: &[(RedialId, String)],
    ml: &MovieLensIndex,
    vocab: &CategoryVocabulary,
) -> Result<(Catalog, CatalogReport)> {
    if redial_movies.is_empty() {
        return Err(Error::Empty("redial movie list"));
    }
    let mut sorted: Vec<&(RedialId, String)> = redial_movies.iter().collect();
    sorted.sort_by_key(|(id, _)| *id);
    for pair in sorted.windows(2) {
        if pair[0].0 == pair[1].0 {
            return Err(Error::DuplicateMovie(pair[0].0));
        }
    }

    let mut report = CatalogReport {
        total: sorted.len(),
        ..Default::default()
    };
    let mut unknown = std::collections::BTreeSet::new();
    let mut items = Vec::with_capacity(sorted.len());
    for (item_index, (redial_id, raw_title)) in sorted.into_iter().enumerate() {
        let (text, year) = split_year(raw_title);
        let linked = ml.lookup(&normalize_title(raw_title));
        let mut vector = vec![0.0; vocab.len()];
        let mut any = false;
        if let Some(entry) = linked {
            for g in &entry.genres {
                match vocab.index_of(g) {
                    Some(i) => {
                        vector[i] = 1.0;
                        any = true;
                    }
                    None => {
                        unknown.insert(g.clone());
                    }
                }
            }
        }
        match (linked.is_some(), any) {
            (true, true) => report.matched += 1,
            (true, false) => report.linked_without_genres += 1,
            (false, _) => report.unlinked += 1,
        }
        if !any {
            vector.fill(UNKNOWN_CATEGORY_VALUE);
        }
        items.push(Item {
            item_index,
            redial_id: *redial_id,
            title: sanitize_field(text),
            year,
            category_vector: vector,
            matched: any,
        });
    }
    report.unknown_genres = unknown.into_iter().collect();
    Ok((Catalog::from_items(items, vocab.clone())?, report))
}

fn sanitize_field(s: &str) -> String {
    s.trim()
        .chars()
        .map(|c| if c == '\t' || c == '\n' || c == '\r' { ' ' } else { c })
        .collect()
}

fn format_component(v: f64) -> String {
    let mut s = String::new();
    write!(s, "{v}").unwrap();
    s
}

impl Catalog {
    pub fn from_items(items: Vec<Item>, vocabulary: CategoryVocabulary) -> Result<Self> {
        let mut by_redial_id = HashMap::with_capacity(items.len());
        for (i, item) in items.iter().enumerate() {
            if item.item_index != i {
                return Err(Error::format(
                    "catalog",
                    format!("item at position {i} has index {}", item.item_index),
                ));
            }
            if item.category_vector.len() != vocabulary.len() {
                return Err(Error::Shape {
                    context: "catalog category vector",
                    expected: vocabulary.len(),
                    actual: item.category_vector.len(),
                });
            }
            if by_redial_id.insert(item.redial_id, i).is_some() {
                return Err(Error::DuplicateMovie(item.redial_id));
            }
        }
        Ok(Self {
            items,
            by_redial_id,
            vocabulary,
        })
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn items(&self) -> &[Item] {
        &self.items
    }

    pub fn item(&self, index: usize) -> Option<&Item> {
        self.items.get(index)
    }

    pub fn vocabulary(&self) -> &CategoryVocabulary {
        &self.vocabulary
    }

    pub fn index_of(&self, redial_id: RedialId) -> Option<usize> {
        self.by_redial_id.get(&redial_id).copied()
    }

    pub fn by_redial_id(&self, redial_id: RedialId) -> Option<&Item> {
        self.index_of(redial_id).map(|i| &self.items[i])
    }

    /// Serializes in the versioned tab-separated catalog format.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        out.push_str(CATALOG_HEADER);
        out.push('\n');
        out.push_str("# categories\t");
        out.push_str(&self.vocabulary.names().join("|"));
        out.push('\n');
        out.push_str("index\tredial_id\ttitle\tyear\tmatched\tvector\n");
        for item in &self.items {
            let vector: Vec<String> = item.category_vector.iter().map(|&v| format_component(v)).collect();
            let _ = writeln!(
                out,
                "{}\t{}\t{}\t{}\t{}\t{}",
                item.item_index,
                item.redial_id,
                item.title,
                item.year.map(|y| y.to_string()).unwrap_or_default(),
                u8::from(item.matched),
                vector.join(",")
            );
        }
        out
    }

    pub fn from_text_reader<R: BufRead>(reader: R) -> Result<Self> {
        let mut lines = reader.lines();
        let mut next = |what: &'static str| -> Result<String> {
            lines
                .next()
                .ok_or_else(|| Error::format("catalog file", format!("missing {what}")))?
                .map_err(|e| Error::format("catalog file", e.to_string()))
        };
        let header = next("header")?;
        if header.trim() != CATALOG_HEADER {
            return Err(Error::format("catalog file", format!("unsupported header {header:?}")));
        }
        let cats = next("category line")?;
        let names = cats
            .strip_prefix("# categories\t")
            .ok_or_else(|| Error::format("catalog file", "missing category line"))?;
        let vocabulary = CategoryVocabulary::new(names.split('|'))?;
        next("column header")?;

        let mut items = Vec::new();
        for line in lines {
            let line = line.map_err(|e| Error::format("catalog file", e.to_string()))?;
            if line.is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != 6 {
                return Err(Error::format("catalog row", line.clone()));
            }
            let bad = |f: &str| Error::format("catalog row", format!("bad field {f:?} in {line:?}"));
            let vector = fields[5]
                .split(',')
                .map(|v| v.parse::<f64>().map_err(|_| bad(v)))
                .collect::<Result<Vec<_>>>()?;
            items.push(Item {
                item_index: fields[0].parse().map_err(|_| bad(fields[0]))?,
                redial_id: fields[1].parse().map_err(|_| bad(fields[1]))?,
                title: fields[2].to_string(),
                year: if fields[3].is_empty() {
                    None
                } else {
                    Some(fields[3].parse().map_err(|_| bad(fields[3]))?)
                },
                matched: fields[4] == "1",
                category_vector: vector,
            });
        }
        Catalog::from_items(items, vocabulary)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut f = File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(self.to_text().as_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let f = File::open(path).map_err(|e| Error::io(path, e))?;
        Self::from_text_reader(BufReader::new(f))
    }

    /// SHA-256 of the serialized catalog. Checkpoints carry it so a scorer is
    /// never paired with a different item list.
    pub fn fingerprint(&self) -> String {
        hex::encode(Sha256::digest(self.to_text().as_bytes()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const CSV: &str = "movieId,title,genres\n\
        1,Toy Story (1995),Adventure|Animation|Children|Comedy|Fantasy\n\
        2,\"Shawshank Redemption, The (1994)\",Crime|Drama\n\
        3,Obscure Thing (2001),(no genres listed)\n\
        4,Moana (2016),Animation|Children|Adventure|Comedy|Fantasy\n\
        5,Coco (2017),Animation|Children|Adventure\n\
        6,Undated Film,Drama\n";

    fn index() -> MovieLensIndex {
        MovieLensIndex::from_reader(CSV.as_bytes()).unwrap()
    }

    #[test]
    fn vocabulary_is_the_nineteen_genres() {
        let v = CategoryVocabulary::movielens();
        assert_eq!(v.len(), 19);
        assert_eq!(v.name(0), "Comedy");
        assert_eq!(v.name(18), "Documentary");
        assert!(CategoryVocabulary::new(["a", "b", "a"]).is_err());
    }

    #[test]
    fn toy_story_row() {
        let ml = index();
        let e = ml.lookup(&normalize_title("Toy Story (1995)")).unwrap();
        assert_eq!(
            e.key,
            NormalizedTitle {
                title: "toy story".into(),
                year: Some(1995)
            }
        );
        assert_eq!(e.genres, ["Adventure", "Animation", "Children", "Comedy", "Fantasy"]);
    }

    #[test]
    fn no_genres_sentinel_is_empty_set() {
        let ml = index();
        let e = ml.lookup(&normalize_title("Obscure Thing (2001)")).unwrap();
        assert!(e.genres.is_empty());
    }

    #[test]
    fn normalization_handles_articles_and_punctuation() {
        assert_eq!(
            normalize_title("The Shawshank Redemption (1994)"),
            normalize_title("Shawshank Redemption, The (1994)")
        );
        assert_eq!(normalize_title("  Schindler's List (1993) ").title, "schindlers list");
        assert_eq!(
            normalize_title("City of Lost Children, The (Cité des enfants perdus, La) (1995)"),
            NormalizedTitle {
                title: "city of lost children".into(),
                year: Some(1995)
            }
        );
        assert_eq!(normalize_title("A").title, "a");
    }

    #[test]
    fn title_only_fallback_requires_missing_year() {
        let ml = index();
        // ReDial side lacks year, unique title match.
        assert!(ml.lookup(&normalize_title("Moana")).is_some());
        // MovieLens side lacks year.
        assert!(ml.lookup(&normalize_title("Undated Film (1990)")).is_some());
        // Both dated but different years: no match.
        assert!(ml.lookup(&normalize_title("Moana (2015)")).is_none());
    }

    #[test]
    fn malformed_rows_are_skipped_and_counted() {
        let csv = "movieId,title,genres\n1,Ok (2000),Drama\nnotanumber,Bad (2000),Drama\n3,Short\n";
        let ml = MovieLensIndex::from_reader(csv.as_bytes()).unwrap();
        assert_eq!(ml.report.data_rows, 3);
        assert_eq!(ml.report.skipped, 2);
        assert_eq!(ml.len(), ml.report.data_rows - ml.report.skipped);
    }

    #[test]
    fn bad_header_is_rejected() {
        assert!(MovieLensIndex::from_reader("a,b,c\n".as_bytes()).is_err());
    }

    #[test]
    fn unreadable_path_is_fatal() {
        assert!(matches!(load_movielens("/nonexistent/movies.csv"), Err(Error::Io { .. })));
    }

    fn movies() -> Vec<(RedialId, String)> {
        vec![
            (204334, "Seven (1995)".to_string()),
            (111776, "Moana (2016)".to_string()),
            (150000, "Obscure Thing (2001)".to_string()),
            (170000, "Coco (2017)".to_string()),
        ]
    }

    #[test]
    fn moana_and_seven_vectors() {
        let vocab = CategoryVocabulary::movielens();
        let (cat, report) = build_catalog(&movies(), &index(), &vocab).unwrap();

        let moana = cat.by_redial_id(111776).unwrap();
        assert!(moana.matched);
        let ones: Vec<&str> = moana
            .category_vector
            .iter()
            .enumerate()
            .filter(|(_, &v)| v == 1.0)
            .map(|(i, _)| vocab.name(i))
            .collect();
        assert_eq!(ones, ["Comedy", "Animation", "Fantasy", "Adventure", "Children"]);
        assert!(moana.category_vector.iter().all(|&v| v == 0.0 || v == 1.0));

        let seven = cat.by_redial_id(204334).unwrap();
        assert!(!seven.matched);
        assert_eq!(seven.category_vector, vec![0.5; 19]);

        let obscure = cat.by_redial_id(150000).unwrap();
        assert!(!obscure.matched);
        assert_eq!(obscure.category_vector, vec![0.5; 19]);

        assert_eq!(report.total, 4);
        assert_eq!(report.matched, 2);
        assert_eq!(report.unlinked, 1);
        assert_eq!(report.linked_without_genres, 1);
        assert!((report.unmatched_fraction() - 0.25).abs() < 1e-12);
    }

    #[test]
    fn items_indexed_by_ascending_id() {
        let (cat, _) = build_catalog(&movies(), &index(), &CategoryVocabulary::movielens()).unwrap();
        let ids: Vec<u64> = cat.items().iter().map(|i| i.redial_id).collect();
        assert_eq!(ids, [111776, 150000, 170000, 204334]);
        for (i, item) in cat.items().iter().enumerate() {
            assert_eq!(item.item_index, i);
            assert_eq!(cat.index_of(item.redial_id), Some(i));
        }
    }

    #[test]
    fn duplicate_id_is_fatal() {
        let mut m = movies();
        m.push((111776, "Moana again".into()));
        let err = build_catalog(&m, &index(), &CategoryVocabulary::movielens()).unwrap_err();
        assert!(matches!(err, Error::DuplicateMovie(111776)));
    }

    #[test]
    fn catalog_file_round_trip_and_determinism() {
        let vocab = CategoryVocabulary::movielens();
        let (a, _) = build_catalog(&movies(), &index(), &vocab).unwrap();
        let mut reversed = movies();
        reversed.reverse();
        let (b, _) = build_catalog(&reversed, &index(), &vocab).unwrap();
        assert_eq!(a.to_text(), b.to_text());
        assert_eq!(a.fingerprint(), b.fingerprint());

        let back = Catalog::from_text_reader(a.to_text().as_bytes()).unwrap();
        assert_eq!(back.items(), a.items());
        assert_eq!(back.vocabulary(), a.vocabulary());
    }
}
