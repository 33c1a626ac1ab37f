//! Human-readable explanation of a category preference vector.

use serde::{Deserialize, Serialize};

use crate::catalog::CategoryVocabulary;

pub const EXPLANATION_PREFIX: &str = "Because you are looking for something that combines: ";
pub const FALLBACK_EXPLANATION: &str = "No strong category preference detected yet.";
pub const DEFAULT_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExplanationEntry {
    pub category: String,
    pub percent: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Explanation {
    pub entries: Vec<ExplanationEntry>,
    pub text: String,
}

/// Integer percentage, halves rounded up.
pub fn percent(p: f64) -> u32 {
    (100.0 * p + 0.5).floor().clamp(0.0, 100.0) as u32
}

/// Categories strictly above `threshold`, strongest first (vocabulary order
/// on ties), rendered as `Name(P%)` joined with commas and a final `&`.
pub fn make_explanation(pref: &[f64], vocab: &CategoryVocabulary, threshold: f64) -> Explanation {
    let mut picked: Vec<(usize, f64)> = pref
        .iter()
        .copied()
        .enumerate()
        .filter(|&(_, p)| p > threshold)
        .collect();
    picked.sort_by(|a, b| b.1.total_cmp(&a.1));
    let entries: Vec<ExplanationEntry> = picked
        .iter()
        .map(|&(i, p)| ExplanationEntry {
            category: vocab.name(i).to_string(),
            percent: percent(p),
        })
        .collect();
    let text = match render(&entries) {
        Some(list) => format!("{EXPLANATION_PREFIX}{list}"),
        None => FALLBACK_EXPLANATION.to_string(),
    };
    Explanation { entries, text }
}

fn render(entries: &[ExplanationEntry]) -> Option<String> {
    let parts: Vec<String> = entries.iter().map(|e| format!("{}({}%)", e.category, e.percent)).collect();
    match parts.split_last()? {
        (last, []) => Some(last.clone()),
        (last, init) => Some(format!("{} & {last}", init.join(", "))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pref(pairs: &[(&str, f64)]) -> Vec<f64> {
        let vocab = CategoryVocabulary::movielens();
        let mut p = vec![0.3; vocab.len()];
        for (name, v) in pairs {
            p[vocab.index_of(name).unwrap()] = *v;
        }
        p
    }

    #[test]
    fn animated_family_example() {
        let p = pref(&[("Children", 0.80), ("Animation", 0.74), ("Adventure", 0.61), ("Comedy", 0.60), ("Drama", 0.5)]);
        let e = make_explanation(&p, &CategoryVocabulary::movielens(), DEFAULT_THRESHOLD);
        assert_eq!(
            e.text,
            "Because you are looking for something that combines: Children(80%), Animation(74%), Adventure(61%) & Comedy(60%)"
        );
    }

    #[test]
    fn crime_thriller_example() {
        let p = pref(&[("Thriller", 0.64), ("Crime", 0.62), ("Drama", 0.56)]);
        let e = make_explanation(&p, &CategoryVocabulary::movielens(), DEFAULT_THRESHOLD);
        assert_eq!(e.text, format!("{EXPLANATION_PREFIX}Thriller(64%), Crime(62%) & Drama(56%)"));
    }

    #[test]
    fn all_half_falls_back() {
        let e = make_explanation(&[0.5; 19], &CategoryVocabulary::movielens(), DEFAULT_THRESHOLD);
        assert!(e.entries.is_empty());
        assert_eq!(e.text, FALLBACK_EXPLANATION);
    }

    #[test]
    fn single_entry_and_ties() {
        let p = pref(&[("Horror", 0.9)]);
        let e = make_explanation(&p, &CategoryVocabulary::movielens(), 0.5);
        assert_eq!(e.text, format!("{EXPLANATION_PREFIX}Horror(90%)"));
        let p = pref(&[("War", 0.7), ("Comedy", 0.7)]);
        let e = make_explanation(&p, &CategoryVocabulary::movielens(), 0.5);
        assert_eq!(e.entries[0].category, "Comedy");
    }

    #[test]
    fn half_up_rounding() {
        assert_eq!(percent(0.625), 63);
        assert_eq!(percent(0.5049), 50);
        assert_eq!(percent(0.999), 100);
    }
}
