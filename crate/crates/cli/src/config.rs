//! Flat `key = value` run configuration.
//!
//! One setting per line, `#` starts a comment, and `include = other.conf`
//! splices another file in place (later lines override earlier ones).
//! Relative paths are resolved against the file that names them.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use protodebias::encoder::EncoderSpec;
use protodebias::evalharness::{Pooling, DEFAULT_TARGET_WORDS};
use protodebias::lexicon::{load_bias_domain, BiasDomain};
use protodebias::seed::derive_seed;
use protodebias::tuner::TuneConfig;
use thiserror::Error;

#[derive(Debug, Error)]
#[error("config: {0}")]
pub struct ConfigError(pub String);

type Result<T> = std::result::Result<T, ConfigError>;

fn err<T>(msg: impl Into<String>) -> Result<T> {
    Err(ConfigError(msg.into()))
}

/// A value and the directory of the file it came from.
#[derive(Debug, Clone)]
struct Entry {
    value: String,
    base: PathBuf,
    origin: String,
}

/// Parses `path` and its includes into a flat map.
fn read_entries(path: &Path, seen: &mut HashSet<PathBuf>, out: &mut BTreeMap<String, Entry>) -> Result<()> {
    let canonical = fs::canonicalize(path).map_err(|e| ConfigError(format!("{}: {e}", path.display())))?;
    if !seen.insert(canonical.clone()) {
        return err(format!("include cycle through {}", path.display()));
    }
    let text = fs::read_to_string(&canonical).map_err(|e| ConfigError(format!("{}: {e}", path.display())))?;
    let base = canonical.parent().unwrap_or(Path::new(".")).to_path_buf();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return err(format!("{}:{}: expected `key = value`", path.display(), n + 1));
        };
        let (key, value) = (key.trim(), value.trim());
        if key == "include" {
            read_entries(&base.join(value), seen, out)?;
        } else {
            out.insert(
                key.to_string(),
                Entry {
                    value: value.to_string(),
                    base: base.clone(),
                    origin: format!("{}:{}", path.display(), n + 1),
                },
            );
        }
    }
    seen.remove(&canonical);
    Ok(())
}

/// Corpus refinement settings for `prepare`.
#[derive(Debug, Clone, PartialEq)]
pub struct PrepareConfig {
    pub reliability_threshold: usize,
    pub equalize: bool,
    pub cap: Option<usize>,
    pub max_tokens_per_sentence: usize,
    pub exclusive_attribute_sentences: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalConfig {
    pub seat: Vec<PathBuf>,
    pub crows: Option<PathBuf>,
    pub stereoset: Option<PathBuf>,
    pub stereoset_targets: Vec<String>,
    pub pooling: Pooling,
    pub early_step: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProjectConfig {
    pub words: Vec<String>,
    pub sentences_per_word: usize,
    pub perplexity: f64,
    pub strict: bool,
}

#[derive(Debug, Clone)]
pub struct RunConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub domain_name: String,
    pub neutral_words: PathBuf,
    pub attribute_words: Vec<PathBuf>,
    /// Display name per attribute (defaults to the word-list file stem).
    pub attribute_names: Vec<String>,
    pub corpus: Vec<PathBuf>,
    pub slices_dir: PathBuf,
    pub encoder: EncoderSpec,
    pub encoder_seed: u64,
    pub tune: TuneConfig,
    pub prepare: PrepareConfig,
    pub eval: EvalConfig,
    pub project: ProjectConfig,
}

fn list(v: &str) -> Vec<String> {
    v.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(str::to_string)
        .collect()
}

struct Reader {
    entries: BTreeMap<String, Entry>,
    used: HashSet<String>,
}

impl Reader {
    fn raw(&mut self, key: &str) -> Option<&Entry> {
        self.used.insert(key.to_string());
        self.entries.get(key)
    }

    fn parse<T: std::str::FromStr>(&mut self, key: &str, default: T) -> Result<T> {
        match self.raw(key) {
            None => Ok(default),
            Some(e) => e
                .value
                .parse()
                .map_err(|_| ConfigError(format!("{}: {key}: cannot parse {:?}", e.origin, e.value))),
        }
    }

    fn flag(&mut self, key: &str, default: bool) -> Result<bool> {
        match self.raw(key) {
            None => Ok(default),
            Some(e) => match e.value.to_ascii_lowercase().as_str() {
                "true" | "yes" | "on" | "1" => Ok(true),
                "false" | "no" | "off" | "0" => Ok(false),
                _ => err(format!("{}: {key}: expected true/false, got {:?}", e.origin, e.value)),
            },
        }
    }

    fn path(&mut self, key: &str) -> Option<PathBuf> {
        self.raw(key).map(|e| normalize(&e.base.join(&e.value)))
    }

    fn paths(&mut self, key: &str) -> Vec<PathBuf> {
        self.raw(key)
            .map(|e| list(&e.value).iter().map(|p| normalize(&e.base.join(p))).collect())
            .unwrap_or_default()
    }

    fn words(&mut self, key: &str) -> Option<Vec<String>> {
        self.raw(key).map(|e| list(&e.value))
    }
}

/// Folds `.` and `..` components without touching the filesystem.
fn normalize(path: &Path) -> PathBuf {
    use std::path::Component;
    let mut out = PathBuf::new();
    for c in path.components() {
        match c {
            Component::CurDir => {}
            Component::ParentDir if matches!(out.components().next_back(), Some(Component::Normal(_))) => {
                out.pop();
            }
            c => out.push(c),
        }
    }
    out
}

/// Parses `none`, `inf` or a count.
pub fn parse_cap(v: &str) -> Option<Option<usize>> {
    match v.to_ascii_lowercase().as_str() {
        "none" | "inf" | "infinity" | "∞" => Some(None),
        n => n.parse().ok().map(Some),
    }
}

/// Command-line overrides applied on top of the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out_dir: Option<PathBuf>,
}

impl RunConfig {
    pub fn load(path: &Path, overrides: &Overrides) -> Result<Self> {
        let mut entries = BTreeMap::new();
        read_entries(path, &mut HashSet::new(), &mut entries)?;
        let mut r = Reader {
            entries,
            used: HashSet::new(),
        };
        let base = fs::canonicalize(path)
            .ok()
            .and_then(|p| p.parent().map(Path::to_path_buf))
            .unwrap_or_default();

        let seed = overrides.seed.unwrap_or(r.parse("seed", 0u64)?);
        let configured = r.path("out_dir");
        let out_dir = match &overrides.out_dir {
            Some(p) => p.clone(),
            None => configured.unwrap_or_else(|| base.join("out")),
        };
        let domain_name = r.parse("domain", "gender".to_string())?;
        let neutral_words = r
            .path("lexicon.neutral")
            .ok_or_else(|| ConfigError("lexicon.neutral is required".into()))?;
        let attribute_words = r.paths("lexicon.attributes");
        let attribute_names = r.words("lexicon.attribute_names").unwrap_or_else(|| {
            attribute_words
                .iter()
                .map(|p| {
                    p.file_stem()
                        .map_or("attribute".into(), |s| s.to_string_lossy().into_owned())
                })
                .collect()
        });
        if attribute_names.len() != attribute_words.len() {
            return err("lexicon.attribute_names must name every attribute list");
        }
        let corpus = r.paths("corpus.raw");
        let slices_dir = r.path("corpus.slices").unwrap_or_else(|| out_dir.join("corpus"));

        let tiny = EncoderSpec::tiny();
        let kind = r.parse("encoder", "tiny".to_string())?;
        if kind != "tiny" {
            return err(format!("encoder: only `tiny` is built in, got {kind:?}"));
        }
        let encoder = EncoderSpec {
            num_layers: r.parse("encoder.num_layers", tiny.num_layers)?,
            hidden_size: r.parse("encoder.hidden_size", tiny.hidden_size)?,
            num_heads: r.parse("encoder.num_heads", tiny.num_heads)?,
            vocab_size: r.parse("encoder.vocab_size", tiny.vocab_size)?,
            max_positions: r.parse("encoder.max_positions", tiny.max_positions)?,
        };
        encoder.validate().map_err(|e| ConfigError(e.to_string()))?;
        let encoder_seed = r.parse("encoder.seed", 1u64)?;

        let mut tune = TuneConfig {
            seed: derive_seed(seed, "tune"),
            ..TuneConfig::default()
        };
        let tune_keys: Vec<(String, Entry)> = r
            .entries
            .iter()
            .filter_map(|(k, e)| k.strip_prefix("tune.").map(|k| (k.to_string(), e.clone())))
            .collect();
        for (key, e) in tune_keys {
            r.used.insert(format!("tune.{key}"));
            match tune.set(&key, &e.value) {
                Ok(true) => {}
                Ok(false) => return err(format!("{}: unknown key tune.{key}", e.origin)),
                Err(x) => return err(format!("{}: {x}", e.origin)),
            }
        }

        let prepare = PrepareConfig {
            reliability_threshold: r.parse("prepare.reliability_threshold", 30)?,
            equalize: r.flag("prepare.equalize", true)?,
            cap: match r.raw("prepare.cap").cloned() {
                None => None,
                Some(e) => parse_cap(&e.value)
                    .ok_or_else(|| ConfigError(format!("{}: prepare.cap: expected a count or none", e.origin)))?,
            },
            max_tokens_per_sentence: r.parse("corpus.max_tokens_per_sentence", 128)?,
            exclusive_attribute_sentences: r.flag("corpus.exclusive_attribute_sentences", false)?,
        };

        let pooling = match r.parse("eval.seat_pooling", "mean".to_string())?.as_str() {
            "mean" => Pooling::Mean,
            "first_token" => Pooling::FirstToken,
            p => return err(format!("eval.seat_pooling: unknown pooling {p:?}")),
        };
        let eval = EvalConfig {
            seat: r.paths("eval.seat"),
            crows: r.path("eval.crows"),
            stereoset: r.path("eval.stereoset"),
            stereoset_targets: r
                .words("eval.stereoset_targets")
                .unwrap_or_else(|| DEFAULT_TARGET_WORDS.iter().map(|s| s.to_string()).collect()),
            pooling,
            early_step: r.parse("eval.early_step", protodebias::tuner::EARLY_STEP)?,
        };

        let project = ProjectConfig {
            words: r.words("project.words").unwrap_or_default(),
            sentences_per_word: r.parse("project.sentences_per_word", 30)?,
            perplexity: r.parse("project.perplexity", 5.0)?,
            strict: r.flag("project.strict", true)?,
        };

        let unknown: Vec<&String> = r.entries.keys().filter(|k| !r.used.contains(*k)).collect();
        if let Some(k) = unknown.first() {
            return err(format!("{}: unknown key {k}", r.entries[*k].origin));
        }

        Ok(Self {
            seed,
            out_dir,
            domain_name,
            neutral_words,
            attribute_words,
            attribute_names,
            corpus,
            slices_dir,
            encoder,
            encoder_seed,
            tune,
            prepare,
            eval,
            project,
        })
    }

    pub fn domain(&self) -> Result<BiasDomain> {
        require(&self.neutral_words, "lexicon.neutral")?;
        for p in &self.attribute_words {
            require(p, "lexicon.attributes")?;
        }
        load_bias_domain(&self.domain_name, &self.neutral_words, &self.attribute_words)
            .map_err(|e| ConfigError(e.to_string()))
    }

    pub fn seed_for(&self, label: &str) -> u64 {
        derive_seed(self.seed, label)
    }
}

/// A referenced path must exist.
pub fn require(path: &Path, key: &str) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        err(format!("{key}: {} does not exist", path.display()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
        let p = dir.join(name);
        fs::write(&p, text).unwrap();
        p
    }

    #[test]
    fn includes_override_and_resolve_paths() {
        let dir = tempfile::tempdir().unwrap();
        fs::create_dir(dir.path().join("sub")).unwrap();
        write(
            &dir.path().join("sub"),
            "base.conf",
            "lexicon.neutral = n.txt\ntune.rho = 3 # inline comment\nseed = 9\n",
        );
        let top = write(
            dir.path(),
            "run.conf",
            "include = sub/base.conf\ntune.lambda = 7/3\nseed = 4\nout_dir = sub/../out\n",
        );
        let c = RunConfig::load(&top, &Overrides::default()).unwrap();
        assert_eq!(c.seed, 4);
        assert_eq!(c.tune.rho, 3.0);
        assert!((c.tune.lambda - 7.0 / 3.0).abs() < 1e-15);
        assert!(c.neutral_words.ends_with("sub/n.txt"));
        assert_eq!(c.tune.seed, derive_seed(4, "tune"));
        assert!(!c.neutral_words.to_string_lossy().contains(".."));
        let c = RunConfig::load(
            &top,
            &Overrides {
                seed: Some(11),
                out_dir: Some("elsewhere".into()),
            },
        )
        .unwrap();
        assert_eq!((c.seed, c.out_dir), (11, PathBuf::from("elsewhere")));
    }

    #[test]
    fn rejects_bad_input() {
        let dir = tempfile::tempdir().unwrap();
        let bad = |text: &str| {
            let p = write(dir.path(), "bad.conf", &format!("lexicon.neutral = n.txt\n{text}\n"));
            RunConfig::load(&p, &Overrides::default()).unwrap_err().0
        };
        assert!(bad("tune.lamda = 2").contains("unknown key"));
        assert!(bad("colour = red").contains("unknown key colour"));
        assert!(bad("just words").contains("key = value"));
        assert!(bad("prepare.cap = lots").contains("prepare.cap"));
        assert!(bad("include = bad.conf").contains("cycle"));
    }
}
