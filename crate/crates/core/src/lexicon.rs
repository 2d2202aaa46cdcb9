//! Word tuples that define a bias domain.
//!
//! A domain is a list of neutral words plus `d >= 2` attribute tuples that are
//! aligned by position: line `m` of every attribute file names the same
//! concept (`uncle` / `aunt`). Words are stored lowercase and matched
//! case-insensitively downstream.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum LexiconError {
    #[error("failed to read word list {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("attribute tuples have different lengths: {lengths:?}")]
    MismatchedTupleLength { lengths: Vec<usize> },
    #[error("word {word:?} is both neutral and an attribute word")]
    OverlapError { word: String },
    #[error("concept {concept} has duplicate word {word:?} across attributes")]
    DuplicateConcept { concept: usize, word: String },
    #[error("a bias domain needs at least 2 attributes, got {0}")]
    TooFewAttributes(usize),
    #[error("invalid domain: {0}")]
    Invalid(String),
}

/// Which side of the domain a word belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum WordRole {
    /// Index into [`BiasDomain::neutral`].
    Neutral(usize),
    /// Attribute index (0-based) and concept index.
    Attribute { attribute: usize, concept: usize },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttributeTuple {
    pub attribute_id: usize,
    pub words: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BiasDomain {
    pub name: String,
    pub attributes: Vec<AttributeTuple>,
    pub neutral: Vec<String>,
}

impl BiasDomain {
    /// Builds a domain from in-memory lists, normalizing and validating them.
    pub fn new<S: AsRef<str>>(name: &str, neutral: &[S], attributes: &[Vec<S>]) -> Result<Self, LexiconError> {
        if attributes.len() < 2 {
            return Err(LexiconError::TooFewAttributes(attributes.len()));
        }
        let lengths: Vec<usize> = attributes.iter().map(Vec::len).collect();
        if lengths.iter().any(|&g| g != lengths[0]) {
            return Err(LexiconError::MismatchedTupleLength { lengths });
        }
        let domain = BiasDomain {
            name: name.to_string(),
            neutral: neutral.iter().map(|w| normalize(w.as_ref())).collect(),
            attributes: attributes
                .iter()
                .enumerate()
                .map(|(i, words)| AttributeTuple {
                    attribute_id: i,
                    words: words.iter().map(|w| normalize(w.as_ref())).collect(),
                })
                .collect(),
        };
        domain.check()?;
        Ok(domain)
    }

    /// Number of attributes `d`.
    pub fn d(&self) -> usize {
        self.attributes.len()
    }

    /// Tuple length `g` (number of concepts).
    pub fn g(&self) -> usize {
        self.attributes.first().map_or(0, |a| a.words.len())
    }

    pub fn attribute_word(&self, attribute: usize, concept: usize) -> &str {
        &self.attributes[attribute].words[concept]
    }

    /// Every word mapped to the roles it plays. A word normally has one role.
    pub fn roles(&self) -> HashMap<String, Vec<WordRole>> {
        let mut map: HashMap<String, Vec<WordRole>> = HashMap::new();
        for (j, w) in self.neutral.iter().enumerate() {
            map.entry(w.clone()).or_default().push(WordRole::Neutral(j));
        }
        for tuple in &self.attributes {
            for (m, w) in tuple.words.iter().enumerate() {
                map.entry(w.clone()).or_default().push(WordRole::Attribute {
                    attribute: tuple.attribute_id,
                    concept: m,
                });
            }
        }
        map
    }

    fn check(&self) -> Result<(), LexiconError> {
        let neutral: HashSet<&str> = self.neutral.iter().map(String::as_str).collect();
        for tuple in &self.attributes {
            if let Some(w) = tuple.words.iter().find(|w| neutral.contains(w.as_str())) {
                return Err(LexiconError::OverlapError { word: w.clone() });
            }
        }
        for m in 0..self.g() {
            let mut seen = HashSet::new();
            for tuple in &self.attributes {
                if !seen.insert(tuple.words[m].as_str()) {
                    return Err(LexiconError::DuplicateConcept {
                        concept: m,
                        word: tuple.words[m].clone(),
                    });
                }
            }
        }
        let violations = validate_domain(self);
        if !violations.is_empty() {
            return Err(LexiconError::Invalid(violations.join("; ")));
        }
        Ok(())
    }

    /// Writes the domain back out in the word-list file layout.
    pub fn save(&self, neutral_file: &Path, attribute_files: &[PathBuf]) -> std::io::Result<()> {
        fs::write(neutral_file, lines(&self.neutral))?;
        for (tuple, path) in self.attributes.iter().zip(attribute_files) {
            fs::write(path, lines(&tuple.words))?;
        }
        Ok(())
    }
}

impl fmt::Display for BiasDomain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} (d={}, g={}, neutral={})",
            self.name,
            self.d(),
            self.g(),
            self.neutral.len()
        )
    }
}

fn lines(words: &[String]) -> String {
    let mut out = String::new();
    for w in words {
        out.push_str(w);
        out.push('\n');
    }
    out
}

fn normalize(word: &str) -> String {
    word.trim().to_lowercase()
}

fn read_word_list(path: &Path) -> Result<Vec<String>, LexiconError> {
    let text = fs::read_to_string(path).map_err(|source| LexiconError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    Ok(text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(str::to_string)
        .collect())
}

/// Loads a domain from one neutral word file and `d` aligned attribute files.
pub fn load_bias_domain(
    name: &str,
    neutral_file: &Path,
    attribute_files: &[PathBuf],
) -> Result<BiasDomain, LexiconError> {
    let neutral = read_word_list(neutral_file)?;
    let attributes = attribute_files
        .iter()
        .map(|p| read_word_list(p))
        .collect::<Result<Vec<_>, _>>()?;
    BiasDomain::new(name, &neutral, &attributes)
}

/// Lists every broken invariant of `domain`. Never fails.
pub fn validate_domain(domain: &BiasDomain) -> Vec<String> {
    let mut out = Vec::new();
    if domain.attributes.len() < 2 {
        out.push(format!("too few attributes: {}", domain.attributes.len()));
    }
    let g = domain.g();
    if g == 0 {
        out.push("empty attribute tuple".to_string());
    }
    for tuple in &domain.attributes {
        if tuple.words.len() != g {
            out.push(format!(
                "tuple length: attribute {} has {} words, expected {}",
                tuple.attribute_id,
                tuple.words.len(),
                g
            ));
        }
    }
    let all_words = domain
        .neutral
        .iter()
        .chain(domain.attributes.iter().flat_map(|t| t.words.iter()));
    for w in all_words {
        if w.is_empty() {
            out.push("empty word".to_string());
        } else if w.chars().any(char::is_whitespace) {
            out.push(format!("contains whitespace: {w}"));
        } else if *w != w.to_lowercase() {
            out.push(format!("not lowercase: {w}"));
        }
    }
    let neutral: HashSet<&str> = domain.neutral.iter().map(String::as_str).collect();
    let mut reported = HashSet::new();
    for tuple in &domain.attributes {
        for w in &tuple.words {
            if neutral.contains(w.as_str()) && reported.insert(w.as_str()) {
                out.push(format!("overlap: {w}"));
            }
        }
    }
    for m in 0..g {
        let mut seen = HashSet::new();
        for tuple in &domain.attributes {
            if let Some(w) = tuple.words.get(m) {
                if !seen.insert(w.as_str()) {
                    out.push(format!("duplicate concept {m}: {w}"));
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn gender() -> BiasDomain {
        BiasDomain::new(
            "gender",
            &["science"],
            &[vec!["uncle", "father"], vec!["aunt", "mother"]],
        )
        .unwrap()
    }

    #[test]
    fn minimal_domain() {
        let d = gender();
        assert_eq!(d.d(), 2);
        assert_eq!(d.g(), 2);
        assert!(validate_domain(&d).is_empty());
    }

    #[test]
    fn mismatched_lengths() {
        let err = BiasDomain::new("g", &["science"], &[vec!["uncle"], vec!["aunt", "mother"]]);
        assert!(matches!(err, Err(LexiconError::MismatchedTupleLength { .. })));
    }

    #[test]
    fn overlap_rejected() {
        let err = BiasDomain::new("g", &["uncle"], &[vec!["uncle"], vec!["aunt"]]);
        assert!(matches!(err, Err(LexiconError::OverlapError { word }) if word == "uncle"));
    }

    #[test]
    fn duplicate_concept_rejected() {
        let err = BiasDomain::new("g", &["science"], &[vec!["parent"], vec!["parent"]]);
        assert!(matches!(err, Err(LexiconError::DuplicateConcept { concept: 0, .. })));
    }

    #[test]
    fn one_attribute_rejected() {
        let err = BiasDomain::new("g", &["science"], &[vec!["uncle"]]);
        assert!(matches!(err, Err(LexiconError::TooFewAttributes(1))));
    }

    #[test]
    fn load_normalizes_and_skips_comments() {
        let dir = tempfile::tempdir().unwrap();
        let n = dir.path().join("neutral.txt");
        let a = dir.path().join("male.txt");
        let b = dir.path().join("female.txt");
        fs::write(&n, "# neutral words\nScience\n\n  art \n").unwrap();
        fs::write(&a, "Uncle\nfather\n").unwrap();
        fs::write(&b, "aunt\n# comment\nMother\n").unwrap();
        let d = load_bias_domain("gender", &n, &[a, b]).unwrap();
        assert_eq!(d.neutral, vec!["science", "art"]);
        assert_eq!(d.attributes[0].words, vec!["uncle", "father"]);
        assert_eq!(d.attributes[1].words, vec!["aunt", "mother"]);
    }

    #[test]
    fn validate_reports_overlap_and_case() {
        let mut d = gender();
        d.attributes[0].words[0] = "science".into();
        assert_eq!(validate_domain(&d), vec!["overlap: science"]);

        let mut d = gender();
        d.attributes[0].words[0] = "Uncle".into();
        assert_eq!(validate_domain(&d), vec!["not lowercase: Uncle"]);
    }

    #[test]
    fn ternary_domain() {
        let d = BiasDomain::new(
            "religion",
            &["terrorist", "peace"],
            &[
                vec!["torah", "jew"],
                vec!["bible", "christian"],
                vec!["quran", "muslim"],
            ],
        )
        .unwrap();
        assert_eq!(d.d(), 3);
        assert_eq!(
            d.roles()["bible"],
            vec![WordRole::Attribute {
                attribute: 1,
                concept: 0
            }]
        );
    }

    fn word() -> impl Strategy<Value = String> {
        "[a-z]{1,8}"
    }

    fn valid_domain() -> impl Strategy<Value = BiasDomain> {
        (2usize..4, 1usize..5).prop_flat_map(|(d, g)| {
            proptest::collection::hash_set(word(), d * g + 3).prop_map(move |set| {
                let words: Vec<String> = set.into_iter().collect();
                let attributes: Vec<Vec<String>> = (0..d).map(|i| words[i * g..(i + 1) * g].to_vec()).collect();
                let neutral = words[d * g..].to_vec();
                BiasDomain::new("p", &neutral, &attributes).unwrap()
            })
        })
    }

    proptest! {
        #[test]
        fn save_then_load_is_identity(domain in valid_domain()) {
            let dir = tempfile::tempdir().unwrap();
            let n = dir.path().join("n.txt");
            let files: Vec<PathBuf> =
                (0..domain.d()).map(|i| dir.path().join(format!("a{i}.txt"))).collect();
            domain.save(&n, &files).unwrap();
            let back = load_bias_domain("p", &n, &files).unwrap();
            prop_assert_eq!(back, domain);
        }

        #[test]
        fn corruption_is_reported(domain in valid_domain(), kind in 0usize..4, pick in any::<prop::sample::Index>()) {
            prop_assert!(validate_domain(&domain).is_empty());
            let mut bad = domain.clone();
            let a = pick.index(bad.d());
            let m = pick.index(bad.g());
            match kind {
                0 => bad.attributes[a].words[m] = bad.neutral[0].clone(),
                1 => bad.attributes[a].words[m] = bad.attributes[a].words[m].to_uppercase(),
                2 => bad.attributes[a].words[m] = format!("{} x", bad.attributes[a].words[m]),
                _ => {
                    let other = (a + 1) % bad.d();
                    bad.attributes[a].words[m] = bad.attributes[other].words[m].clone();
                }
            }
            prop_assert!(!validate_domain(&bad).is_empty());
        }
    }
}
