//! The prompt-tuning loop.
//!
//! Each step draws a stratified batch, encodes it with the frozen and the
//! prompted encoder, builds in-batch prototypes, and takes one Adam step on
//! the prefix. Nothing else is ever written.

mod trail;

use std::collections::{BTreeMap, HashMap, HashSet};
use std::ops::Range;

use ndarray::{Array2, Array3, Array4, Axis};
use rand::seq::index::sample;
use rand::seq::SliceRandom;
use rand::Rng;
use thiserror::Error;

use crate::corpus::{CorpusSlices, SentenceRecord};
use crate::encoder::{
    word_embedding, DifferentiableEncoder, Encoder, EncoderError, LayerSelector, LayerStates, PromptBackprop,
    PromptParameters, TokenId,
};
use crate::geometry::{
    bias_loss_with_grad, representation_loss_with_grad, total_loss, GeometryError, LossBreakdown, RepresentationMode,
};
use crate::lexicon::WordRole;
use crate::seed::{derive_seed, derived_rng};

pub use trail::{
    read_state, read_trail, select_checkpoint, select_checkpoint_at, tune, tune_prepared, CheckpointPolicy,
    CheckpointTrail, TrailEntry, EARLY_STEP,
};

#[derive(Debug, Error)]
pub enum TuneError {
    #[error("invalid tuning config: {0}")]
    InvalidConfig(String),
    #[error("insufficient corpus: {0}")]
    InsufficientCorpus(String),
    #[error(
        "non-finite loss at step {step}: bias {bias}, representation {representation}, total {total}, grad norm {grad_norm}"
    )]
    NonFiniteLoss {
        step: u64,
        bias: f64,
        representation: f64,
        total: f64,
        grad_norm: f64,
    },
    #[error("base encoder weights changed during tuning")]
    BaseModified,
    #[error("checkpoint trail is empty")]
    EmptyTrail,
    #[error("cannot resume: {0}")]
    Resume(String),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, TuneError>;

#[derive(Debug, Clone, PartialEq)]
pub struct TuneConfig {
    pub lambda: f64,
    pub rho: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub prefix_length: usize,
    pub max_epochs: usize,
    pub checkpoint_every_steps: u64,
    pub seed: u64,
    pub layer: LayerSelector,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Rescale the gradient to at most this L2 norm. Off by default.
    pub clip_norm: Option<f64>,
    pub representation_mode: RepresentationMode,
    /// Share of every slice held out for evaluation.
    pub heldout_fraction: f64,
    /// Stop after this many steps even if epochs remain.
    pub max_steps: Option<u64>,
}

impl Default for TuneConfig {
    fn default() -> Self {
        Self {
            lambda: 7.0 / 3.0,
            rho: 15.0,
            learning_rate: 5e-5,
            batch_size: 32,
            prefix_length: 40,
            max_epochs: 10,
            checkpoint_every_steps: 500,
            seed: 0,
            layer: LayerSelector::Final,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            clip_norm: None,
            representation_mode: RepresentationMode::BatchNeighbors,
            heldout_fraction: 0.05,
            max_steps: None,
        }
    }
}

fn layer_name(l: LayerSelector) -> String {
    match l {
        LayerSelector::Final => "final".into(),
        LayerSelector::AllLayersMean => "all_layers_mean".into(),
        LayerSelector::Layer(n) => format!("layer:{n}"),
    }
}

impl TuneConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(TuneError::InvalidConfig(m.to_string()));
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad("lambda must be finite and non-negative");
        }
        if !(self.rho > 0.0 && self.rho.is_finite()) {
            return bad("rho must be positive");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if self.prefix_length == 0 {
            return bad("prefix_length is 0: nothing to train");
        }
        if self.checkpoint_every_steps == 0 {
            return bad("checkpoint_every_steps must be positive");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || self.epsilon <= 0.0 {
            return bad("adam moments need 0 <= beta < 1 and epsilon > 0");
        }
        if self.clip_norm.is_some_and(|c| c <= 0.0 || !c.is_finite()) {
            return bad("clip_norm must be positive");
        }
        if !(self.heldout_fraction > 0.0 && self.heldout_fraction < 1.0) {
            return bad("heldout_fraction must lie in (0, 1)");
        }
        Ok(())
    }

    /// `key = value` lines, in a stable order; parsed back by [`TuneConfig::set`].
    pub fn to_kv(&self) -> Vec<(&'static str, String)> {
        let opt = |v: Option<String>| v.unwrap_or_else(|| "none".into());
        vec![
            ("lambda", self.lambda.to_string()),
            ("rho", self.rho.to_string()),
            ("learning_rate", self.learning_rate.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("prefix_length", self.prefix_length.to_string()),
            ("max_epochs", self.max_epochs.to_string()),
            ("checkpoint_every_steps", self.checkpoint_every_steps.to_string()),
            ("seed", self.seed.to_string()),
            ("layer_selector", layer_name(self.layer)),
            ("adam_beta1", self.beta1.to_string()),
            ("adam_beta2", self.beta2.to_string()),
            ("adam_epsilon", self.epsilon.to_string()),
            ("clip_norm", opt(self.clip_norm.map(|c| c.to_string()))),
            (
                "representation_mode",
                match self.representation_mode {
                    RepresentationMode::BatchNeighbors => "batch_neighbors".into(),
                    RepresentationMode::HiddenSoftmax => "hidden_softmax".into(),
                },
            ),
            ("heldout_fraction", self.heldout_fraction.to_string()),
            ("max_steps", opt(self.max_steps.map(|s| s.to_string()))),
        ]
    }

    /// Sets one field from its text form. Returns `Ok(false)` for keys that
    /// are not tuning keys.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
            v.parse()
                .map_err(|_| TuneError::InvalidConfig(format!("{key}: cannot parse {v:?}")))
        }
        let none = |v: &str| v.eq_ignore_ascii_case("none");
        match key {
            "lambda" => self.lambda = parse_ratio(key, value)?,
            "rho" => self.rho = num(key, value)?,
            "learning_rate" => self.learning_rate = num(key, value)?,
            "batch_size" => self.batch_size = num(key, value)?,
            "prefix_length" => self.prefix_length = num(key, value)?,
            "max_epochs" => self.max_epochs = num(key, value)?,
            "checkpoint_every_steps" => self.checkpoint_every_steps = num(key, value)?,
            "seed" => self.seed = num(key, value)?,
            "layer_selector" => {
                self.layer = match value {
                    "final" => LayerSelector::Final,
                    "all_layers_mean" => LayerSelector::AllLayersMean,
                    v => match v.strip_prefix("layer:") {
                        Some(n) => LayerSelector::Layer(num(key, n)?),
                        None => return Err(TuneError::InvalidConfig(format!("{key}: unknown selector {v:?}"))),
                    },
                }
            }
            "adam_beta1" => self.beta1 = num(key, value)?,
            "adam_beta2" => self.beta2 = num(key, value)?,
            "adam_epsilon" => self.epsilon = num(key, value)?,
            "clip_norm" => self.clip_norm = if none(value) { None } else { Some(num(key, value)?) },
            "representation_mode" => {
                self.representation_mode = match value {
                    "batch_neighbors" => RepresentationMode::BatchNeighbors,
                    "hidden_softmax" => RepresentationMode::HiddenSoftmax,
                    v => return Err(TuneError::InvalidConfig(format!("{key}: unknown mode {v:?}"))),
                }
            }
            "heldout_fraction" => self.heldout_fraction = num(key, value)?,
            "max_steps" => self.max_steps = if none(value) { None } else { Some(num(key, value)?) },
            _ => return Ok(false),
        }
        Ok(true)
    }
}

/// Accepts plain numbers and `a/b` fractions such as `7/3`.
fn parse_ratio(key: &str, value: &str) -> Result<f64> {
    let err = || TuneError::InvalidConfig(format!("{key}: cannot parse {value:?}"));
    match value.split_once('/') {
        Some((a, b)) => {
            let a: f64 = a.trim().parse().map_err(|_| err())?;
            let b: f64 = b.trim().parse().map_err(|_| err())?;
            Ok(a / b)
        }
        None => value.parse().map_err(|_| err()),
    }
}

/// A sentence tokenized once, with the sub-token span and role of every
/// domain-word occurrence.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PreparedSentence {
    pub text: String,
    pub token_ids: Vec<TokenId>,
    pub spans: Vec<Range<usize>>,
    pub roles: Vec<WordRole>,
}

impl PreparedSentence {
    /// `None` when the sentence plus the prefix does not fit the encoder.
    pub fn new<E: Encoder + ?Sized>(
        encoder: &E,
        record: &SentenceRecord,
        prefix_length: usize,
    ) -> Result<Option<Self>> {
        let spans: Vec<(usize, usize)> = record.matches.iter().map(|m| m.span).collect();
        let tok = encoder.tokenize_sentence(&record.text, &spans)?;
        if tok.token_ids.is_empty() || tok.token_ids.len() + prefix_length > encoder.spec().max_positions {
            return Ok(None);
        }
        Ok(Some(Self {
            text: record.text.clone(),
            token_ids: tok.token_ids,
            spans: tok.word_spans,
            roles: record.matches.iter().map(|m| m.role).collect(),
        }))
    }
}

/// Sentence pools for training or evaluation: the neutral slice and each
/// attribute slice (buckets flattened, duplicates removed).
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainingData {
    pub neutral: Vec<PreparedSentence>,
    pub attributes: Vec<Vec<PreparedSentence>>,
}

impl TrainingData {
    pub fn d(&self) -> usize {
        self.attributes.len()
    }

    fn check(&self, what: &str) -> Result<()> {
        if self.d() < 2 {
            return Err(TuneError::InvalidConfig(format!(
                "a bias domain needs d >= 2 attributes, got {}",
                self.d()
            )));
        }
        if self.neutral.is_empty() {
            return Err(TuneError::InsufficientCorpus(format!("{what}: neutral slice is empty")));
        }
        if let Some(i) = self.attributes.iter().position(Vec::is_empty) {
            return Err(TuneError::InsufficientCorpus(format!(
                "{what}: attribute slice {i} is empty"
            )));
        }
        Ok(())
    }
}

fn attribute_pool(slices: &CorpusSlices, i: usize) -> Vec<SentenceRecord> {
    let mut seen = HashSet::new();
    slices.per_attribute[i]
        .iter()
        .flat_map(|b| b.sentences.iter())
        .filter(|s| seen.insert(s.text.clone()))
        .cloned()
        .collect()
}

/// Holds out `fraction` of a pool (at least one sentence, but never the
/// last one); a single-sentence pool is shared by both sides.
fn split_pool<T: Clone>(pool: Vec<T>, fraction: f64, seed: u64, label: &str) -> (Vec<T>, Vec<T>) {
    let n = pool.len();
    if n < 2 {
        return (pool.clone(), pool);
    }
    let k = ((n as f64 * fraction).round() as usize).clamp(1, n - 1);
    let mut rng = derived_rng(seed, label);
    let held: HashSet<usize> = sample(&mut rng, n, k).into_iter().collect();
    let mut train = Vec::with_capacity(n - k);
    let mut heldout = Vec::with_capacity(k);
    for (i, s) in pool.into_iter().enumerate() {
        if held.contains(&i) {
            heldout.push(s);
        } else {
            train.push(s);
        }
    }
    (train, heldout)
}

/// Tokenizes the corpus and splits every slice into training and held-out
/// parts. Sentences that cannot hold the prefix are dropped.
pub fn split_corpus<E: Encoder + ?Sized>(
    slices: &CorpusSlices,
    encoder: &E,
    config: &TuneConfig,
) -> Result<(TrainingData, TrainingData)> {
    config.validate()?;
    let prepare = |pool: Vec<SentenceRecord>| -> Result<Vec<PreparedSentence>> {
        let mut out = Vec::with_capacity(pool.len());
        for r in &pool {
            match PreparedSentence::new(encoder, r, config.prefix_length)? {
                Some(p) => out.push(p),
                None => log::warn!("dropping sentence that does not fit with the prefix: {:?}", r.text),
            }
        }
        Ok(out)
    };
    let mut train = TrainingData::default();
    let mut heldout = TrainingData::default();
    let (a, b) = split_pool(
        slices.neutral.clone(),
        config.heldout_fraction,
        config.seed,
        "heldout/neutral",
    );
    train.neutral = prepare(a)?;
    heldout.neutral = prepare(b)?;
    for i in 0..slices.per_attribute.len() {
        let label = format!("heldout/attribute/{i}");
        let (a, b) = split_pool(attribute_pool(slices, i), config.heldout_fraction, config.seed, &label);
        train.attributes.push(prepare(a)?);
        heldout.attributes.push(prepare(b)?);
    }
    train.check("training split")?;
    heldout.check("held-out split")?;
    Ok((train, heldout))
}

/// Sentences per attribute slice and from the neutral slice in one batch:
/// `ceil(batch / (d + 1))` from each attribute, the rest neutral.
pub fn batch_counts(d: usize, batch_size: usize) -> (usize, usize) {
    let per_attribute = batch_size.div_ceil(d + 1);
    (per_attribute, batch_size.saturating_sub(d * per_attribute))
}

fn draw<'a, T>(pool: &'a [T], count: usize, rng: &mut impl Rng) -> Vec<&'a T> {
    let mut out = Vec::with_capacity(count);
    while out.len() < count {
        let take = (count - out.len()).min(pool.len());
        out.extend(sample(rng, pool.len(), take).into_iter().map(|i| &pool[i]));
    }
    out
}

/// One stratified batch. Within a slice sentences are drawn without
/// replacement unless the slice is smaller than its share.
pub fn assemble_batch<'a>(
    data: &'a TrainingData,
    batch_size: usize,
    rng: &mut impl Rng,
) -> Result<Vec<&'a PreparedSentence>> {
    data.check("batch")?;
    let (per_attribute, neutral) = batch_counts(data.d(), batch_size);
    let mut batch = Vec::with_capacity(batch_size);
    for pool in &data.attributes {
        batch.extend(draw(pool, per_attribute, rng));
    }
    batch.extend(draw(&data.neutral, neutral, rng));
    Ok(batch)
}

/// The batch used at `step`: its randomness depends only on the seed and the
/// step number, so a resumed run sees the same batches.
pub fn batch_for_step<'a>(data: &'a TrainingData, config: &TuneConfig, step: u64) -> Result<Vec<&'a PreparedSentence>> {
    let mut rng = derived_rng(config.seed, &format!("batch/{step}"));
    let mut batch = assemble_batch(data, config.batch_size, &mut rng)?;
    batch.shuffle(&mut rng);
    Ok(batch)
}

/// Steps in one epoch: one pass over the smallest attribute slice.
pub fn steps_per_epoch(data: &TrainingData, batch_size: usize) -> u64 {
    let (per_attribute, _) = batch_counts(data.d(), batch_size);
    let smallest = data.attributes.iter().map(Vec::len).min().unwrap_or(0);
    smallest.div_ceil(per_attribute).max(1) as u64
}

/// Frozen-encoder occurrence embeddings, keyed by token ids. The frozen
/// model never changes, so each sentence is encoded once.
#[derive(Debug, Default)]
pub struct FrozenCache {
    map: HashMap<Vec<TokenId>, Array2<f64>>,
}

impl FrozenCache {
    pub fn new() -> Self {
        Self::default()
    }

    fn get<E: Encoder + ?Sized>(
        &mut self,
        encoder: &E,
        s: &PreparedSentence,
        layer: LayerSelector,
    ) -> Result<&Array2<f64>> {
        if !self.map.contains_key(&s.token_ids) {
            let states = encoder.encode(&s.token_ids, None)?;
            let occ = occurrences(&states, &s.spans, layer)?;
            self.map.insert(s.token_ids.clone(), occ);
        }
        Ok(&self.map[&s.token_ids])
    }
}

fn occurrences(states: &LayerStates, spans: &[Range<usize>], layer: LayerSelector) -> Result<Array2<f64>> {
    let h = states.states.len_of(Axis(2));
    let mut out = Array2::zeros((spans.len(), h));
    for (i, span) in spans.iter().enumerate() {
        out.row_mut(i).assign(&word_embedding(states, span.clone(), layer)?);
    }
    Ok(out)
}

/// Loss of one batch and, on request, its gradient with respect to the
/// prefix.
#[derive(Debug, Clone)]
pub struct Objective {
    pub loss: LossBreakdown,
    pub grad: Option<Array4<f64>>,
}

/// Evaluates the objective on `batch`: in-batch neutral prototypes (one per
/// neutral word present), in-batch attribute prototypes, the JS bias loss
/// over attribute pairs and the KL representation loss over all word
/// occurrences.
pub fn batch_objective<E: DifferentiableEncoder + ?Sized>(
    encoder: &E,
    prompt: &PromptParameters,
    batch: &[&PreparedSentence],
    d: usize,
    frozen: &mut FrozenCache,
    config: &TuneConfig,
    want_grad: bool,
) -> Result<Objective> {
    let h = encoder.spec().hidden_size;
    let total_occ: usize = batch.iter().map(|s| s.spans.len()).sum();
    let mut prompted = Array2::zeros((total_occ, h));
    let mut frozen_occ = Array2::zeros((total_occ, h));
    let mut traces: Vec<Box<dyn PromptBackprop + '_>> = Vec::new();
    let mut row = 0;
    for s in batch {
        let f = frozen.get(encoder, s, config.layer)?;
        frozen_occ
            .slice_mut(ndarray::s![row..row + s.spans.len(), ..])
            .assign(f);
        let p = if want_grad {
            let trace = encoder.encode_for_backprop(&s.token_ids, prompt)?;
            let p = occurrences(trace.states(), &s.spans, config.layer)?;
            traces.push(trace);
            p
        } else {
            occurrences(&encoder.encode(&s.token_ids, Some(prompt))?, &s.spans, config.layer)?
        };
        prompted.slice_mut(ndarray::s![row..row + s.spans.len(), ..]).assign(&p);
        row += s.spans.len();
    }

    // group occurrences by owner
    let roles: Vec<WordRole> = batch.iter().flat_map(|s| s.roles.iter().copied()).collect();
    let mut neutral_groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    let mut attribute_groups: Vec<Vec<usize>> = vec![Vec::new(); d];
    for (i, role) in roles.iter().enumerate() {
        match *role {
            WordRole::Neutral(j) => neutral_groups.entry(j).or_default().push(i),
            WordRole::Attribute { attribute, .. } if attribute < d => attribute_groups[attribute].push(i),
            WordRole::Attribute { .. } => {}
        }
    }
    if let Some(i) = attribute_groups.iter().position(Vec::is_empty) {
        return Err(TuneError::InsufficientCorpus(format!(
            "batch has no occurrence of attribute {i}"
        )));
    }
    let mean_of = |rows: &[usize]| {
        let mut m = ndarray::Array1::zeros(h);
        for &r in rows {
            m += &prompted.row(r);
        }
        m / rows.len() as f64
    };
    let attrs: Vec<_> = attribute_groups.iter().map(|g| mean_of(g)).collect();
    let mut neutral = Array2::zeros((neutral_groups.len(), h));
    for (k, rows) in neutral_groups.values().enumerate() {
        neutral.row_mut(k).assign(&mean_of(rows));
    }

    let mut g_occ = Array2::<f64>::zeros((total_occ, h));
    let bias = if neutral_groups.is_empty() {
        0.0
    } else {
        let bg = bias_loss_with_grad(&attrs, neutral.view(), config.rho)?;
        for (g, rows) in bg.attributes.iter().zip(&attribute_groups) {
            for &r in rows {
                g_occ.row_mut(r).scaled_add(1.0 / rows.len() as f64, g);
            }
        }
        for (k, rows) in neutral_groups.values().enumerate() {
            for &r in rows {
                g_occ.row_mut(r).scaled_add(1.0 / rows.len() as f64, &bg.neutral.row(k));
            }
        }
        bg.value
    };
    let (rep, g_rep) = representation_loss_with_grad(
        frozen_occ.view(),
        prompted.view(),
        config.rho,
        config.representation_mode,
    )?;
    let loss = total_loss(bias, rep, config.lambda)?;
    if !want_grad {
        return Ok(Objective { loss, grad: None });
    }
    g_occ.scaled_add(config.lambda, &g_rep);

    let mut grad = Array4::zeros(prompt.per_layer_kv.raw_dim());
    let weights = config.layer.weights(encoder.spec().num_layers);
    let mut row = 0;
    for (s, trace) in batch.iter().zip(&traces) {
        let dims = trace.states().states.dim();
        let mut upstream = Array3::zeros(dims);
        for span in &s.spans {
            let g = g_occ.row(row);
            let share = 1.0 / span.len() as f64;
            for &(l, w) in &weights {
                for t in span.clone() {
                    upstream.slice_mut(ndarray::s![l, t, ..]).scaled_add(w * share, &g);
                }
            }
            row += 1;
        }
        grad += &trace.backward(&upstream);
    }
    Ok(Objective { loss, grad: Some(grad) })
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Array4<f64>,
    pub v: Array4<f64>,
    pub t: u64,
}

impl AdamState {
    pub fn new(shape: &PromptParameters) -> Self {
        Self {
            m: Array4::zeros(shape.per_layer_kv.raw_dim()),
            v: Array4::zeros(shape.per_layer_kv.raw_dim()),
            t: 0,
        }
    }

    fn update(&mut self, prompt: &mut PromptParameters, grad: &Array4<f64>, config: &TuneConfig) {
        self.t += 1;
        let (b1, b2) = (config.beta1, config.beta2);
        let c1 = 1.0 - b1.powi(self.t as i32);
        let c2 = 1.0 - b2.powi(self.t as i32);
        ndarray::Zip::from(&mut prompt.per_layer_kv)
            .and(&mut self.m)
            .and(&mut self.v)
            .and(grad)
            .for_each(|p, m, v, &g| {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                *p -= config.learning_rate * (*m / c1) / ((*v / c2).sqrt() + config.epsilon);
            });
    }
}

/// Everything that evolves during a run.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub step: u64,
    pub prompt: PromptParameters,
    pub adam: AdamState,
    /// Mean of the logged losses so far.
    pub running: RunningLoss,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct RunningLoss {
    pub steps: u64,
    pub bias: f64,
    pub representation: f64,
    pub total: f64,
}

impl RunningLoss {
    fn push(&mut self, l: &LossBreakdown) {
        self.steps += 1;
        let n = self.steps as f64;
        self.bias += (l.bias - self.bias) / n;
        self.representation += (l.representation - self.representation) / n;
        self.total += (l.total - self.total) / n;
    }
}

impl TrainState {
    /// Fresh state with a seeded prefix initialization.
    pub fn init<E: Encoder + ?Sized>(encoder: &E, config: &TuneConfig) -> Self {
        let spec = encoder.spec();
        let prompt = PromptParameters::init(
            spec.num_layers,
            config.prefix_length,
            spec.hidden_size,
            derive_seed(config.seed, "prompt-init"),
        );
        Self {
            step: 0,
            adam: AdamState::new(&prompt),
            prompt,
            running: RunningLoss::default(),
        }
    }

    pub fn epoch(&self, steps_per_epoch: u64) -> u64 {
        self.step / steps_per_epoch.max(1)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepReport {
    pub step: u64,
    pub loss: LossBreakdown,
    pub grad_norm: f64,
}

impl StepReport {
    /// `step \t L_bias \t L_rep \t L_total \t grad_norm`
    pub fn metrics_line(&self) -> String {
        format!(
            "{}\t{}\t{}\t{}\t{}",
            self.step, self.loss.bias, self.loss.representation, self.loss.total, self.grad_norm
        )
    }
}

/// Binds an encoder and a config; owns the frozen-output cache.
pub struct Trainer<'e, E: ?Sized> {
    pub encoder: &'e E,
    pub config: TuneConfig,
    frozen: FrozenCache,
}

impl<'e, E: DifferentiableEncoder + ?Sized> Trainer<'e, E> {
    pub fn new(encoder: &'e E, config: TuneConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            encoder,
            config,
            frozen: FrozenCache::new(),
        })
    }

    pub fn objective(
        &mut self,
        prompt: &PromptParameters,
        batch: &[&PreparedSentence],
        d: usize,
        want_grad: bool,
    ) -> Result<Objective> {
        batch_objective(
            self.encoder,
            prompt,
            batch,
            d,
            &mut self.frozen,
            &self.config,
            want_grad,
        )
    }

    /// One Adam update of the prefix. The logged loss is the one evaluated
    /// before the update.
    pub fn train_step(&mut self, state: &mut TrainState, batch: &[&PreparedSentence], d: usize) -> Result<StepReport> {
        let obj = self.objective(&state.prompt, batch, d, true)?;
        let mut grad = obj.grad.expect("gradient requested");
        let grad_norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
        let loss = obj.loss;
        if !(loss.total.is_finite() && grad_norm.is_finite()) {
            return Err(TuneError::NonFiniteLoss {
                step: state.step + 1,
                bias: loss.bias,
                representation: loss.representation,
                total: loss.total,
                grad_norm,
            });
        }
        if let Some(c) = self.config.clip_norm {
            if grad_norm > c {
                grad *= c / grad_norm;
            }
        }
        state.adam.update(&mut state.prompt, &grad, &self.config);
        state.step += 1;
        state.running.push(&loss);
        Ok(StepReport {
            step: state.step,
            loss,
            grad_norm,
        })
    }

    /// Mean held-out loss over fixed evaluation batches.
    pub fn evaluate(
        &mut self,
        prompt: &PromptParameters,
        batches: &[Vec<&PreparedSentence>],
        d: usize,
    ) -> Result<LossBreakdown> {
        let (mut bias, mut rep) = (0.0, 0.0);
        for b in batches {
            let l = self.objective(prompt, b, d, false)?.loss;
            bias += l.bias;
            rep += l.representation;
        }
        let n = batches.len().max(1) as f64;
        Ok(total_loss(bias / n, rep / n, self.config.lambda)?)
    }
}

/// Up to eight fixed held-out batches, identical at every checkpoint.
pub fn heldout_batches<'a>(heldout: &'a TrainingData, config: &TuneConfig) -> Result<Vec<Vec<&'a PreparedSentence>>> {
    let n = steps_per_epoch(heldout, config.batch_size).min(8);
    (0..n)
        .map(|i| {
            let mut rng = derived_rng(config.seed, &format!("heldout-batch/{i}"));
            assemble_batch(heldout, config.batch_size, &mut rng)
        })
        .collect()
}

#[cfg(test)]
mod tests;
