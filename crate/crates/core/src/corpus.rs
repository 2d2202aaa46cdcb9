//! Sentence mining for a bias domain and the bucket refinements applied
//! before tuning: a minimum per-word sentence count (reliability), equal
//! sentence counts across aligned attribute words (quality) and a cap on
//! the total per attribute (quantity).

use std::collections::HashMap;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use regex::Regex;
use thiserror::Error;

use crate::lexicon::{BiasDomain, WordRole};

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("no sentence matched any domain word")]
    EmptyCorpus,
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed slice file {path} line {line}: {reason}")]
    Malformed { path: PathBuf, line: usize, reason: String },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CorpusError + '_ {
    move |source| CorpusError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// One occurrence of a domain word inside a sentence. `span` is in
/// characters (Unicode scalar values), end exclusive.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WordMatch {
    pub word: String,
    pub role: WordRole,
    pub span: (usize, usize),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SentenceRecord {
    pub text: String,
    pub matches: Vec<WordMatch>,
}

impl SentenceRecord {
    pub fn mentions_attribute(&self, attribute: usize) -> bool {
        self.matches
            .iter()
            .any(|m| matches!(m.role, WordRole::Attribute { attribute: a, .. } if a == attribute))
    }

    pub fn mentions_neutral(&self) -> bool {
        self.matches.iter().any(|m| matches!(m.role, WordRole::Neutral(_)))
    }

    /// Reads `span` back out of the text.
    pub fn span_text(&self, span: (usize, usize)) -> String {
        self.text
            .chars()
            .skip(span.0)
            .take(span.1.saturating_sub(span.0))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PerWordBucket {
    pub concept_index: usize,
    pub word: String,
    pub sentences: Vec<SentenceRecord>,
}

impl PerWordBucket {
    pub fn len(&self) -> usize {
        self.sentences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sentences.is_empty()
    }
}

/// Neutral sentences plus, per attribute, one bucket per surviving concept.
/// Bucket `k` of every attribute refers to the same concept.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct CorpusSlices {
    pub neutral: Vec<SentenceRecord>,
    pub per_attribute: Vec<Vec<PerWordBucket>>,
}

impl CorpusSlices {
    pub fn attribute_total(&self, attribute: usize) -> usize {
        self.per_attribute[attribute].iter().map(PerWordBucket::len).sum()
    }

    pub fn num_concepts(&self) -> usize {
        self.per_attribute.first().map_or(0, Vec::len)
    }

    pub fn is_empty(&self) -> bool {
        self.neutral.is_empty() && self.per_attribute.iter().flatten().all(PerWordBucket::is_empty)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CollectOptions {
    pub max_tokens_per_sentence: usize,
    /// Drop sentences that mention more than one attribute from every
    /// attribute slice.
    pub exclusive_attribute_sentences: bool,
}

impl Default for CollectOptions {
    fn default() -> Self {
        Self {
            max_tokens_per_sentence: 128,
            exclusive_attribute_sentences: false,
        }
    }
}

/// Case-insensitive whole-word matcher over every word of a domain.
#[derive(Debug, Clone)]
pub struct WordMatcher {
    regex: Regex,
    roles: HashMap<String, Vec<WordRole>>,
}

impl WordMatcher {
    pub fn new(domain: &BiasDomain) -> Self {
        let roles = domain.roles();
        let mut words: Vec<&String> = roles.keys().collect();
        // longest first so alternation never prefers a shorter prefix
        words.sort_by(|a, b| b.len().cmp(&a.len()).then(a.cmp(b)));
        let alternation: Vec<String> = words.iter().map(|w| regex::escape(w)).collect();
        let pattern = format!(r"(?i)\b(?:{})\b", alternation.join("|"));
        let regex = Regex::new(&pattern).expect("escaped alternation is a valid regex");
        Self { regex, roles }
    }

    /// All matches in `text`, in order of appearance.
    pub fn find(&self, text: &str) -> Vec<WordMatch> {
        let mut out = Vec::new();
        let mut char_pos = 0;
        let mut byte_pos = 0;
        for m in self.regex.find_iter(text) {
            char_pos += text[byte_pos..m.start()].chars().count();
            let start = char_pos;
            char_pos += m.as_str().chars().count();
            byte_pos = m.end();
            let word = m.as_str().to_lowercase();
            if let Some(roles) = self.roles.get(&word) {
                for &role in roles {
                    out.push(WordMatch {
                        word: word.clone(),
                        role,
                        span: (start, char_pos),
                    });
                }
            }
        }
        out
    }

    pub fn record(&self, text: &str) -> Option<SentenceRecord> {
        let matches = self.find(text);
        (!matches.is_empty()).then(|| SentenceRecord {
            text: text.to_string(),
            matches,
        })
    }
}

fn empty_slices(domain: &BiasDomain) -> CorpusSlices {
    CorpusSlices {
        neutral: Vec::new(),
        per_attribute: domain
            .attributes
            .iter()
            .map(|t| {
                t.words
                    .iter()
                    .enumerate()
                    .map(|(m, w)| PerWordBucket {
                        concept_index: m,
                        word: w.clone(),
                        sentences: Vec::new(),
                    })
                    .collect()
            })
            .collect(),
    }
}

fn place(slices: &mut CorpusSlices, record: SentenceRecord, exclusive: bool) {
    let d = slices.per_attribute.len();
    let mut concepts: Vec<Vec<usize>> = vec![Vec::new(); d];
    for m in &record.matches {
        if let WordRole::Attribute { attribute, concept } = m.role {
            if !concepts[attribute].contains(&concept) {
                concepts[attribute].push(concept);
            }
        }
    }
    let attributes_hit = concepts.iter().filter(|c| !c.is_empty()).count();
    if !(exclusive && attributes_hit > 1) {
        for (attribute, hit) in concepts.iter().enumerate() {
            for &concept in hit {
                slices.per_attribute[attribute][concept].sentences.push(record.clone());
            }
        }
    }
    if record.mentions_neutral() {
        slices.neutral.push(record);
    }
}

/// Scrapes sentences (one per input line) that mention domain words.
pub fn collect<I, S>(raw_text: I, domain: &BiasDomain, options: CollectOptions) -> Result<CorpusSlices, CorpusError>
where
    I: IntoIterator<Item = S>,
    S: AsRef<str>,
{
    let matcher = WordMatcher::new(domain);
    let mut slices = empty_slices(domain);
    for line in raw_text {
        let line = line.as_ref().trim();
        if line.is_empty() || line.split_whitespace().count() > options.max_tokens_per_sentence {
            continue;
        }
        let text = line.replace('\t', " ");
        if let Some(record) = matcher.record(&text) {
            place(&mut slices, record, options.exclusive_attribute_sentences);
        }
    }
    if slices.is_empty() {
        return Err(CorpusError::EmptyCorpus);
    }
    Ok(slices)
}

/// Removes concepts whose bucket holds fewer than `threshold` sentences in
/// any attribute. The concept is dropped from every attribute at once.
pub fn reliability_filter(slices: &CorpusSlices, threshold: usize) -> Result<CorpusSlices, CorpusError> {
    let keep: Vec<bool> = (0..slices.num_concepts())
        .map(|k| slices.per_attribute.iter().all(|b| b[k].len() >= threshold))
        .collect();
    if slices.num_concepts() > 0 && !keep.iter().any(|&k| k) {
        return Err(CorpusError::EmptyCorpus);
    }
    Ok(CorpusSlices {
        neutral: slices.neutral.clone(),
        per_attribute: slices
            .per_attribute
            .iter()
            .map(|buckets| {
                buckets
                    .iter()
                    .zip(&keep)
                    .filter(|(_, &k)| k)
                    .map(|(b, _)| b.clone())
                    .collect()
            })
            .collect(),
    })
}

fn downsample(sentences: &[SentenceRecord], n: usize, rng: &mut ChaCha8Rng) -> Vec<SentenceRecord> {
    if n >= sentences.len() {
        return sentences.to_vec();
    }
    let mut picked = sample(rng, sentences.len(), n).into_vec();
    picked.sort_unstable();
    picked.into_iter().map(|i| sentences[i].clone()).collect()
}

/// Downsamples every concept's buckets to the smallest of them.
pub fn quality_equalize(slices: &CorpusSlices, seed: u64) -> CorpusSlices {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = slices.clone();
    for k in 0..slices.num_concepts() {
        let n = slices.per_attribute.iter().map(|b| b[k].len()).min().unwrap_or(0);
        for (attribute, buckets) in slices.per_attribute.iter().enumerate() {
            out.per_attribute[attribute][k].sentences = downsample(&buckets[k].sentences, n, &mut rng);
        }
    }
    out
}

/// Largest-remainder apportionment of `cap` seats over `sizes`.
/// Ties in the fractional part go to the lower index.
pub fn apportion(sizes: &[usize], cap: usize) -> Vec<usize> {
    let total: usize = sizes.iter().sum();
    if total <= cap {
        return sizes.to_vec();
    }
    let mut quotas: Vec<usize> = Vec::with_capacity(sizes.len());
    let mut remainders: Vec<(u128, usize)> = Vec::with_capacity(sizes.len());
    for (i, &s) in sizes.iter().enumerate() {
        // exact integer arithmetic: s * cap / total
        let num = s as u128 * cap as u128;
        quotas.push((num / total as u128) as usize);
        remainders.push((num % total as u128, i));
    }
    let mut left = cap - quotas.iter().sum::<usize>();
    remainders.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
    for &(_, i) in &remainders {
        if left == 0 {
            break;
        }
        quotas[i] += 1;
        left -= 1;
    }
    quotas
}

/// Caps each attribute slice at `per_attribute_cap` sentences, sampling
/// proportionally across its buckets.
pub fn quantity_cap(slices: &CorpusSlices, per_attribute_cap: usize, seed: u64) -> CorpusSlices {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = slices.clone();
    for (attribute, buckets) in slices.per_attribute.iter().enumerate() {
        let sizes: Vec<usize> = buckets.iter().map(PerWordBucket::len).collect();
        let quotas = apportion(&sizes, per_attribute_cap);
        for (k, bucket) in buckets.iter().enumerate() {
            out.per_attribute[attribute][k].sentences = downsample(&bucket.sentences, quotas[k], &mut rng);
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StatGroup {
    Neutral,
    Attribute(usize),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StatRow {
    pub group: StatGroup,
    pub concept: Option<usize>,
    pub word: String,
    pub count: usize,
}

/// One row per attribute bucket, plus a neutral total row when the neutral
/// slice is non-empty.
pub fn corpus_stats(slices: &CorpusSlices) -> Vec<StatRow> {
    let mut rows = Vec::new();
    if !slices.neutral.is_empty() {
        rows.push(StatRow {
            group: StatGroup::Neutral,
            concept: None,
            word: "*".into(),
            count: slices.neutral.len(),
        });
    }
    for (attribute, buckets) in slices.per_attribute.iter().enumerate() {
        for b in buckets {
            rows.push(StatRow {
                group: StatGroup::Attribute(attribute),
                concept: Some(b.concept_index),
                word: b.word.clone(),
                count: b.len(),
            });
        }
    }
    rows
}

/// Writes `stage,group,concept,word,count` rows for several pipeline stages.
pub fn write_stats_csv(path: &Path, stages: &[(String, Vec<StatRow>)]) -> Result<(), CorpusError> {
    let mut w = csv::Writer::from_path(path).map_err(|e| CorpusError::Io {
        path: path.to_path_buf(),
        source: e.into(),
    })?;
    let csv_err = |e: csv::Error| CorpusError::Io {
        path: path.to_path_buf(),
        source: e.into(),
    };
    w.write_record(["stage", "group", "concept", "word", "count"])
        .map_err(csv_err)?;
    for (stage, rows) in stages {
        for r in rows {
            let group = match r.group {
                StatGroup::Neutral => "neutral".to_string(),
                StatGroup::Attribute(i) => format!("attribute{i}"),
            };
            let concept = r.concept.map_or(String::new(), |c| c.to_string());
            w.write_record([stage.as_str(), &group, &concept, &r.word, &r.count.to_string()])
                .map_err(csv_err)?;
        }
    }
    w.flush().map_err(io_err(path))
}

fn sanitize(word: &str) -> String {
    word.chars()
        .map(|c| if c.is_alphanumeric() { c } else { '_' })
        .collect()
}

const NEUTRAL_FILE: &str = "neutral.tsv";

fn bucket_file_name(attribute: usize, concept: usize, word: &str) -> String {
    format!("attr{attribute}_c{concept:04}_{}.tsv", sanitize(word))
}

fn first_match(record: &SentenceRecord, pred: impl Fn(&WordMatch) -> bool) -> Option<&WordMatch> {
    record.matches.iter().find(|m| pred(m))
}

fn write_lines<'a>(
    path: &Path,
    rows: impl Iterator<Item = (&'a SentenceRecord, Option<&'a WordMatch>)>,
) -> Result<(), CorpusError> {
    let file = fs::File::create(path).map_err(io_err(path))?;
    let mut w = std::io::BufWriter::new(file);
    for (record, m) in rows {
        let m = m.expect("bucket records contain their word");
        writeln!(w, "{}\t{}\t{}\t{}", m.span.0, m.span.1, m.word, record.text).map_err(io_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

/// Writes one file per bucket and one neutral file, each line
/// `char_start \t char_end \t word \t sentence`.
pub fn write_slices(dir: &Path, slices: &CorpusSlices) -> Result<Vec<PathBuf>, CorpusError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let mut written = Vec::new();
    let path = dir.join(NEUTRAL_FILE);
    write_lines(
        &path,
        slices
            .neutral
            .iter()
            .map(|r| (r, first_match(r, |m| matches!(m.role, WordRole::Neutral(_))))),
    )?;
    written.push(path);
    for (attribute, buckets) in slices.per_attribute.iter().enumerate() {
        for b in buckets {
            let path = dir.join(bucket_file_name(attribute, b.concept_index, &b.word));
            write_lines(
                &path,
                b.sentences.iter().map(|r| (r, first_match(r, |m| m.word == b.word))),
            )?;
            written.push(path);
        }
    }
    Ok(written)
}

fn read_sentences(path: &Path, matcher: &WordMatcher) -> Result<Vec<SentenceRecord>, CorpusError> {
    let file = fs::File::open(path).map_err(io_err(path))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.is_empty() {
            continue;
        }
        let malformed = |reason: &str| CorpusError::Malformed {
            path: path.to_path_buf(),
            line: i + 1,
            reason: reason.to_string(),
        };
        let mut parts = line.splitn(4, '\t');
        let (Some(start), Some(end), Some(word), Some(text)) = (parts.next(), parts.next(), parts.next(), parts.next())
        else {
            return Err(malformed("expected 4 tab-separated fields"));
        };
        let span: (usize, usize) = (
            start.parse().map_err(|_| malformed("bad char_start"))?,
            end.parse().map_err(|_| malformed("bad char_end"))?,
        );
        let record = matcher
            .record(text)
            .ok_or_else(|| malformed("no domain word in sentence"))?;
        if !record.matches.iter().any(|m| m.span == span && m.word == word) {
            return Err(malformed("span does not match the stated word"));
        }
        out.push(record);
    }
    Ok(out)
}

/// Reads slices written by [`write_slices`]. Matches are recomputed from the
/// sentence text against `domain`.
pub fn read_slices(dir: &Path, domain: &BiasDomain) -> Result<CorpusSlices, CorpusError> {
    let matcher = WordMatcher::new(domain);
    let neutral = read_sentences(&dir.join(NEUTRAL_FILE), &matcher)?;
    let mut per_attribute = Vec::with_capacity(domain.d());
    for (attribute, tuple) in domain.attributes.iter().enumerate() {
        let mut buckets = Vec::new();
        for (m, word) in tuple.words.iter().enumerate() {
            let path = dir.join(bucket_file_name(attribute, m, word));
            if path.exists() {
                buckets.push(PerWordBucket {
                    concept_index: m,
                    word: word.clone(),
                    sentences: read_sentences(&path, &matcher)?,
                });
            }
        }
        per_attribute.push(buckets);
    }
    let concepts: Vec<Vec<usize>> = per_attribute
        .iter()
        .map(|b: &Vec<PerWordBucket>| b.iter().map(|x| x.concept_index).collect())
        .collect();
    if concepts.iter().any(|c| *c != concepts[0]) {
        return Err(CorpusError::Malformed {
            path: dir.to_path_buf(),
            line: 0,
            reason: "attribute bucket files are not concept-aligned".into(),
        });
    }
    let slices = CorpusSlices { neutral, per_attribute };
    if slices.is_empty() {
        return Err(CorpusError::EmptyCorpus);
    }
    Ok(slices)
}
