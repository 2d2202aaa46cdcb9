use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use ndarray::{Array1, Array2};
use protodebias::corpus::{
    collect, corpus_stats, quality_equalize, quantity_cap, read_slices, reliability_filter, write_slices,
    write_stats_csv, CollectOptions, CorpusError, WordMatcher,
};
use protodebias::encoder::{
    read_checkpoint, word_embedding, Encoder, LayerSelector, PromptParameters, Prompted, TinyEncoder,
};
use protodebias::evalharness::{
    crows_score, load_crows_csv, load_filtered_stereoset, load_seat_test, project_2d, read_report_rows, seat_score,
    sentence_embedding, stereoset_score, EvalReport, TsneOptions,
};
use protodebias::lexicon::WordRole;
use protodebias::tuner::{read_trail, select_checkpoint_at, tune, CheckpointPolicy};
use rand::seq::index::sample;
use thiserror::Error;

use crate::config::{require, ConfigError, RunConfig};

/// Requested words with too few corpus sentences for a prototype.
#[derive(Debug, Error)]
#[error("insufficient occurrences (need {needed}): {}", .words.iter().map(|(w, n)| format!("{w}={n}")).collect::<Vec<_>>().join(", "))]
pub struct InsufficientOccurrences {
    pub needed: usize,
    pub words: Vec<(String, usize)>,
}

fn config_err(msg: impl Into<String>) -> anyhow::Error {
    ConfigError(msg.into()).into()
}

fn read_lines(paths: &[PathBuf]) -> Result<Vec<String>> {
    if paths.is_empty() {
        return Err(config_err("corpus.raw names no corpus file"));
    }
    let mut lines = Vec::new();
    for p in paths {
        require(p, "corpus.raw")?;
        let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
        lines.extend(text.lines().map(str::to_string));
    }
    Ok(lines)
}

fn encoder(cfg: &RunConfig) -> Result<TinyEncoder> {
    TinyEncoder::new(cfg.encoder, cfg.encoder_seed).map_err(|e| config_err(e.to_string()))
}

fn load_prompt(path: &Path, enc: &TinyEncoder) -> Result<PromptParameters> {
    require(path, "checkpoint")?;
    let (_, prompt) = read_checkpoint(path).map_err(|e| config_err(format!("{}: {e}", path.display())))?;
    prompt
        .check_fits(enc.spec())
        .map_err(|e| config_err(format!("{}: {e}", path.display())))?;
    Ok(prompt)
}

pub struct PrepareFlags {
    pub reliability_threshold: Option<usize>,
    pub equalize: Option<bool>,
    pub cap: Option<Option<usize>>,
}

/// Mines the raw corpus and applies the enabled refinements in order.
/// Returns the slice directory and the stats file.
pub fn prepare(cfg: &RunConfig, flags: &PrepareFlags) -> Result<Vec<PathBuf>> {
    let domain = cfg.domain()?;
    let lines = read_lines(&cfg.corpus)?;
    let threshold = flags.reliability_threshold.unwrap_or(cfg.prepare.reliability_threshold);
    let equalize = flags.equalize.unwrap_or(cfg.prepare.equalize);
    let cap = flags.cap.unwrap_or(cfg.prepare.cap);
    let options = CollectOptions {
        max_tokens_per_sentence: cfg.prepare.max_tokens_per_sentence,
        exclusive_attribute_sentences: cfg.prepare.exclusive_attribute_sentences,
    };

    let mut slices = collect(lines.iter(), &domain, options)?;
    let mut stages = vec![("raw".to_string(), corpus_stats(&slices))];
    if threshold > 0 {
        slices = reliability_filter(&slices, threshold)?;
        stages.push(("reliability".into(), corpus_stats(&slices)));
    }
    if equalize {
        slices = quality_equalize(&slices, cfg.seed_for("corpus/quality"));
        stages.push(("quality".into(), corpus_stats(&slices)));
    }
    if let Some(cap) = cap {
        slices = quantity_cap(&slices, cap, cfg.seed_for("corpus/quantity"));
        stages.push((format!("quantity-{cap}"), corpus_stats(&slices)));
    }
    if slices.is_empty() || slices.per_attribute.iter().any(|a| a.iter().all(|b| b.is_empty())) {
        return Err(CorpusError::EmptyCorpus).context("after refinement");
    }
    for (stage, rows) in &stages {
        let totals: Vec<String> = (0..slices.per_attribute.len())
            .map(|a| {
                rows.iter()
                    .filter(|r| r.group == protodebias::corpus::StatGroup::Attribute(a))
                    .map(|r| r.count)
                    .sum::<usize>()
                    .to_string()
            })
            .collect();
        log::info!("{stage}: per-attribute totals [{}]", totals.join(", "));
    }

    if cfg.slices_dir.exists() {
        fs::remove_dir_all(&cfg.slices_dir).with_context(|| format!("clearing {}", cfg.slices_dir.display()))?;
    }
    write_slices(&cfg.slices_dir, &slices)?;
    fs::create_dir_all(&cfg.out_dir)?;
    let stats = cfg.out_dir.join("corpus_stats.csv");
    write_stats_csv(&stats, &stages)?;
    Ok(vec![cfg.slices_dir.clone(), stats])
}

/// Tunes a prompt on the prepared slices; returns the trail manifest.
pub fn tune_cmd(cfg: &RunConfig, resume: Option<&Path>) -> Result<PathBuf> {
    cfg.tune.validate()?;
    let domain = cfg.domain()?;
    if !cfg.slices_dir.is_dir() {
        return Err(config_err(format!(
            "corpus.slices: {} does not exist (run `prepare` first)",
            cfg.slices_dir.display()
        )));
    }
    let slices = read_slices(&cfg.slices_dir, &domain)?;
    if slices.is_empty() {
        return Err(CorpusError::EmptyCorpus.into());
    }
    if let Some(r) = resume {
        require(r, "--resume")?;
    }
    let enc = encoder(cfg)?;
    let out = cfg.out_dir.join("tune");
    let trail = tune(&slices, &enc, &cfg.tune, &out, resume)?;
    log::info!("trail steps {:?}", trail.steps());
    Ok(out.join("trail.tsv"))
}

/// Which prompt each benchmark sees.
pub enum PromptSource {
    Base,
    Checkpoint(PathBuf),
    Trail(PathBuf),
}

fn seat_files(paths: &[PathBuf]) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for p in paths {
        require(p, "eval.seat")?;
        if p.is_dir() {
            let mut files: Vec<PathBuf> = fs::read_dir(p)?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|f| f.extension().is_some_and(|x| x == "json"))
                .collect();
            files.sort();
            out.extend(files);
        } else {
            out.push(p.clone());
        }
    }
    Ok(out)
}

/// Scores every configured benchmark and writes `report.txt` / `report.csv`.
pub fn eval(cfg: &RunConfig, source: PromptSource) -> Result<Vec<PathBuf>> {
    let enc = encoder(cfg)?;
    let ev = &cfg.eval;
    for p in ev.crows.iter().chain(&ev.stereoset) {
        require(p, "eval dataset")?;
    }
    let seat_paths = seat_files(&ev.seat)?;
    if seat_paths.is_empty() && ev.crows.is_none() && ev.stereoset.is_none() {
        return Err(config_err(
            "no benchmark configured (eval.seat / eval.crows / eval.stereoset)",
        ));
    }

    let mut report = EvalReport::default();
    report.meta.insert("encoder_checksum".into(), enc.base_checksum());
    report.meta.insert("seed".into(), cfg.seed.to_string());
    let (early, last) = match &source {
        PromptSource::Base => (None, None),
        PromptSource::Checkpoint(p) => (Some(p.clone()), Some(p.clone())),
        PromptSource::Trail(t) => {
            require(t, "--trail")?;
            let trail = read_trail(t)?;
            let e = select_checkpoint_at(&trail, CheckpointPolicy::Early, ev.early_step)?
                .path
                .clone();
            let f = select_checkpoint_at(&trail, CheckpointPolicy::Final, ev.early_step)?
                .path
                .clone();
            (Some(e), Some(f))
        }
    };
    let describe = |p: &Option<PathBuf>| p.as_ref().map_or("base".to_string(), |p| p.display().to_string());
    let early_prompt = early.as_deref().map(|p| load_prompt(p, &enc)).transpose()?;
    let final_prompt = last.as_deref().map(|p| load_prompt(p, &enc)).transpose()?;

    if !seat_paths.is_empty() {
        report.meta.insert("seat_prompt".into(), describe(&last));
        for path in &seat_paths {
            let test = load_seat_test(path)?;
            let mut embed = |s: &str| sentence_embedding(&enc, final_prompt.as_ref(), s, ev.pooling);
            let r = seat_score(&test, &mut embed, cfg.seed_for(&format!("eval/seat/{}", test.id)))?;
            report.seat.push((test.id.clone(), r));
        }
    }
    let lm = Prompted::new(&enc, early_prompt.as_ref());
    if let Some(path) = &ev.crows {
        report.meta.insert("crows_prompt".into(), describe(&early));
        let pairs = load_crows_csv(path)?;
        report.crows = Some(crows_score(&pairs, &lm)?);
    }
    if let Some(path) = &ev.stereoset {
        report.meta.insert("stereoset_prompt".into(), describe(&early));
        let examples = load_filtered_stereoset(path, &ev.stereoset_targets)?;
        log::info!("stereoset: {} examples after target filter", examples.len());
        let (domains, overall) = stereoset_score(&examples, &lm)?;
        report.stereoset_domains = domains;
        report.stereoset_overall = Some(overall);
    }
    let (kv, csv) = report.write(&cfg.out_dir.join("eval"))?;
    Ok(vec![kv, csv])
}

/// A corpus line and the character span of one word in it.
type Occurrence = (String, (usize, usize));

/// Word prototypes from `n` sampled corpus sentences each, projected to 2-D.
pub fn project(cfg: &RunConfig, words: &[String], checkpoint: Option<&Path>) -> Result<PathBuf> {
    let domain = cfg.domain()?;
    let words: Vec<String> = if words.is_empty() {
        cfg.project.words.clone()
    } else {
        words.to_vec()
    };
    if words.is_empty() {
        return Err(config_err("no words to project (project.words or --words)"));
    }
    let roles = domain.roles();
    let mut groups = Vec::new();
    for w in &words {
        let role = roles
            .get(&w.to_lowercase())
            .and_then(|r| r.first())
            .ok_or_else(|| config_err(format!("{w:?} is not a word of domain {}", domain.name)))?;
        groups.push(match role {
            WordRole::Neutral(_) => "neutral".to_string(),
            WordRole::Attribute { attribute, .. } => cfg.attribute_names[*attribute].clone(),
        });
    }

    let lines = read_lines(&cfg.corpus)?;
    let matcher = WordMatcher::new(&domain);
    // First occurrence of each word per corpus line.
    let mut occurrences: BTreeMap<String, Vec<Occurrence>> = BTreeMap::new();
    for line in &lines {
        let line = line.trim();
        let mut seen = std::collections::HashSet::new();
        for m in matcher.find(line) {
            if seen.insert(m.word.clone()) {
                occurrences.entry(m.word).or_default().push((line.to_string(), m.span));
            }
        }
    }
    let need = cfg.project.sentences_per_word;
    let counts: Vec<(String, usize)> = words
        .iter()
        .map(|w| (w.clone(), occurrences.get(&w.to_lowercase()).map_or(0, Vec::len)))
        .collect();
    let short: Vec<(String, usize)> = counts
        .iter()
        .filter(|(_, n)| *n < need && (cfg.project.strict || *n == 0))
        .cloned()
        .collect();
    if !short.is_empty() {
        return Err(InsufficientOccurrences {
            needed: need,
            words: short,
        }
        .into());
    }

    let enc = encoder(cfg)?;
    let prompt = checkpoint.map(|p| load_prompt(p, &enc)).transpose()?;
    let mut protos = Array2::zeros((words.len(), enc.spec().hidden_size));
    for (i, w) in words.iter().enumerate() {
        let occ = &occurrences[&w.to_lowercase()];
        let mut rng = protodebias::seed::derived_rng(cfg.seed, &format!("project/{w}"));
        let mut picked = sample(&mut rng, occ.len(), need.min(occ.len())).into_vec();
        picked.sort_unstable();
        let mut sum = Array1::zeros(enc.spec().hidden_size);
        for &j in &picked {
            let (text, span) = &occ[j];
            let tok = enc.tokenize_sentence(text, &[*span])?;
            let states = enc.encode(&tok.token_ids, prompt.as_ref())?;
            sum += &word_embedding(&states, tok.word_spans[0].clone(), LayerSelector::Final)?;
        }
        protos.row_mut(i).assign(&(sum / picked.len() as f64));
    }
    let points = project_2d(
        protos.view(),
        cfg.project.perplexity,
        cfg.seed_for("project"),
        TsneOptions::default(),
    )
    .map_err(|e| config_err(e.to_string()))?;

    let dir = cfg.out_dir.join("project");
    fs::create_dir_all(&dir)?;
    let path = dir.join("projection.tsv");
    let mut out = String::from("word\tgroup\tsentences\tx\ty\n");
    for (i, w) in words.iter().enumerate() {
        out.push_str(&format!(
            "{w}\t{}\t{}\t{}\t{}\n",
            groups[i],
            counts[i].1.min(need),
            points[[i, 0]],
            points[[i, 1]]
        ));
    }
    fs::write(&path, out)?;
    Ok(path)
}

/// Side-by-side table of several `report.csv` files, one value column per
/// report (named after the report's directory, or its parent when that is
/// `eval`).
pub fn report(cfg: &RunConfig, inputs: &[PathBuf]) -> Result<PathBuf> {
    if inputs.is_empty() {
        bail!(config_err("report needs at least one report.csv"));
    }
    let mut names = Vec::new();
    let mut table: BTreeMap<(String, String, String), Vec<Option<f64>>> = BTreeMap::new();
    for (i, path) in inputs.iter().enumerate() {
        require(path, "report input")?;
        let dir = path.parent().unwrap_or(Path::new(""));
        let dir = if dir.file_name().is_some_and(|n| n == "eval") {
            dir.parent().unwrap_or(dir)
        } else {
            dir
        };
        names.push(
            dir.file_name()
                .map_or(format!("run{i}"), |n| n.to_string_lossy().into_owned()),
        );
        for (b, s, m, v) in read_report_rows(path)? {
            table.entry((b, s, m)).or_insert_with(|| vec![None; inputs.len()])[i] = Some(v);
        }
    }
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["benchmark".to_string(), "subset".into(), "metric".into()];
    header.extend(names);
    w.write_record(&header)?;
    for ((b, s, m), values) in table {
        let mut row = vec![b, s, m];
        row.extend(values.iter().map(|v| v.map_or(String::new(), |v| v.to_string())));
        w.write_record(&row)?;
    }
    let dir = cfg.out_dir.join("report");
    fs::create_dir_all(&dir)?;
    let path = dir.join("comparison.csv");
    fs::write(&path, w.into_inner()?)?;
    Ok(path)
}
