//! The encoder contract, the deep-prefix prompt and the masked-token scoring
//! helpers built on top of it.
//!
//! An encoder tokenizes text, runs a forward pass that reports the hidden
//! states of every layer for the real token positions, and scores masked
//! positions. A [`PromptParameters`] prefix adds `k` extra key/value rows to
//! every attention layer; base weights are never touched. Encoders that
//! implement [`DifferentiableEncoder`] can also return the gradient of any
//! function of their hidden states with respect to the prefix.

mod checkpoint;
mod tape;
mod tiny;

use std::ops::Range;

use ndarray::{s, Array1, Array3, Array4, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

pub use checkpoint::{read_checkpoint, write_checkpoint, CheckpointHeader, CHECKPOINT_VERSION};
pub use tiny::{TinyEncoder, TinyTokenizer, MASK, PAD, UNK};

pub type TokenId = u32;

#[derive(Debug, Error)]
pub enum EncoderError {
    #[error("invalid encoder spec: {0}")]
    InvalidSpec(String),
    #[error("sequence of {tokens} tokens plus {prefix} prefix positions exceeds {max} positions")]
    ContextOverflow { tokens: usize, prefix: usize, max: usize },
    #[error("empty token sequence")]
    EmptySequence,
    #[error("token id {0} outside the vocabulary")]
    UnknownToken(TokenId),
    #[error("span {start}..{end} is invalid for {len} positions")]
    BadSpan { start: usize, end: usize, len: usize },
    #[error("prompt shape {found:?} does not fit encoder (layers {layers}, hidden {hidden})")]
    PromptShape {
        found: [usize; 4],
        layers: usize,
        hidden: usize,
    },
    #[error("query must contain exactly one mask token, found {0}")]
    BadQuery(usize),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, EncoderError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EncoderSpec {
    pub num_layers: usize,
    pub hidden_size: usize,
    pub num_heads: usize,
    pub vocab_size: usize,
    pub max_positions: usize,
}

impl EncoderSpec {
    /// The 24-layer, 1024-wide configuration the full-scale setup uses.
    pub const LARGE: EncoderSpec = EncoderSpec {
        num_layers: 24,
        hidden_size: 1024,
        num_heads: 16,
        vocab_size: 30522,
        max_positions: 512,
    };

    pub fn tiny() -> Self {
        Self {
            num_layers: 2,
            hidden_size: 8,
            num_heads: 2,
            vocab_size: 256,
            max_positions: 192,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("num_layers", self.num_layers),
            ("hidden_size", self.hidden_size),
            ("num_heads", self.num_heads),
            ("vocab_size", self.vocab_size),
            ("max_positions", self.max_positions),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(EncoderError::InvalidSpec(format!("{name} must be at least 1")));
        }
        if !self.hidden_size.is_multiple_of(self.num_heads) {
            return Err(EncoderError::InvalidSpec(format!(
                "hidden_size {} is not divisible by num_heads {}",
                self.hidden_size, self.num_heads
            )));
        }
        Ok(())
    }
}

/// Token ids plus the character range each token covers.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Tokenization {
    pub ids: Vec<TokenId>,
    pub offsets: Vec<(usize, usize)>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenizedSentence {
    pub token_ids: Vec<TokenId>,
    /// Sub-token range of each requested word span, in request order.
    pub word_spans: Vec<Range<usize>>,
}

impl Tokenization {
    /// Maps a character span onto the contiguous run of tokens overlapping it.
    pub fn token_range(&self, span: (usize, usize)) -> Result<Range<usize>> {
        let hits: Vec<usize> = self
            .offsets
            .iter()
            .enumerate()
            .filter(|(_, (s, e))| *s < span.1 && *e > span.0)
            .map(|(i, _)| i)
            .collect();
        match (hits.first(), hits.last()) {
            (Some(&a), Some(&b)) => Ok(a..b + 1),
            _ => Err(EncoderError::BadSpan {
                start: span.0,
                end: span.1,
                len: self.ids.len(),
            }),
        }
    }
}

/// Hidden states of shape `(L + 1) × T × H`: the embedding layer followed by
/// every transformer layer, real token positions only.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerStates {
    pub states: Array3<f64>,
}

impl LayerStates {
    pub fn num_layers(&self) -> usize {
        self.states.len_of(Axis(0)) - 1
    }

    pub fn num_tokens(&self) -> usize {
        self.states.len_of(Axis(1))
    }

    pub fn layer(&self, l: usize) -> ArrayView2<'_, f64> {
        self.states.index_axis(Axis(0), l)
    }

    pub fn last(&self) -> ArrayView2<'_, f64> {
        self.layer(self.num_layers())
    }
}

/// Which hidden layer(s) a word embedding is read from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum LayerSelector {
    #[default]
    Final,
    /// Mean over the embedding layer and every transformer layer.
    AllLayersMean,
    Layer(usize),
}

impl LayerSelector {
    /// Layers read and the weight each receives.
    pub fn weights(&self, num_layers: usize) -> Vec<(usize, f64)> {
        match *self {
            LayerSelector::Final => vec![(num_layers, 1.0)],
            LayerSelector::Layer(l) => vec![(l, 1.0)],
            LayerSelector::AllLayersMean => {
                let w = 1.0 / (num_layers + 1) as f64;
                (0..=num_layers).map(|l| (l, w)).collect()
            }
        }
    }
}

/// Mean hidden state over a word's sub-token positions at the selected layer.
pub fn word_embedding(states: &LayerStates, span: Range<usize>, layer: LayerSelector) -> Result<Array1<f64>> {
    let t = states.num_tokens();
    if span.start >= span.end || span.end > t {
        return Err(EncoderError::BadSpan {
            start: span.start,
            end: span.end,
            len: t,
        });
    }
    let mut out = Array1::zeros(states.states.len_of(Axis(2)));
    for (l, w) in layer.weights(states.num_layers()) {
        if l > states.num_layers() {
            return Err(EncoderError::BadSpan {
                start: l,
                end: l + 1,
                len: states.num_layers() + 1,
            });
        }
        let rows = states.states.slice(s![l, span.clone(), ..]);
        let mean = rows.mean_axis(Axis(0)).expect("non-empty span");
        out.scaled_add(w, &mean);
    }
    Ok(out)
}

/// Deep prefix: per layer, `k` key rows and `k` value rows of width `H`,
/// stored as `L × 2 × k × H` (index 0 keys, 1 values).
#[derive(Debug, Clone, PartialEq)]
pub struct PromptParameters {
    pub per_layer_kv: Array4<f64>,
}

impl PromptParameters {
    pub fn zeros(num_layers: usize, prefix_length: usize, hidden_size: usize) -> Self {
        Self {
            per_layer_kv: Array4::zeros((num_layers, 2, prefix_length, hidden_size)),
        }
    }

    /// Entries uniform in `[-0.5, 0.5] / sqrt(H)`.
    pub fn init(num_layers: usize, prefix_length: usize, hidden_size: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scale = 1.0 / (hidden_size as f64).sqrt();
        let per_layer_kv = Array4::from_shape_simple_fn((num_layers, 2, prefix_length, hidden_size), || {
            rng.random_range(-0.5..=0.5) * scale
        });
        Self { per_layer_kv }
    }

    pub fn num_layers(&self) -> usize {
        self.per_layer_kv.len_of(Axis(0))
    }

    pub fn prefix_length(&self) -> usize {
        self.per_layer_kv.len_of(Axis(2))
    }

    pub fn hidden_size(&self) -> usize {
        self.per_layer_kv.len_of(Axis(3))
    }

    pub fn num_parameters(&self) -> usize {
        self.per_layer_kv.len()
    }

    pub fn keys(&self, layer: usize) -> ArrayView2<'_, f64> {
        self.per_layer_kv.slice(s![layer, 0, .., ..])
    }

    pub fn values(&self, layer: usize) -> ArrayView2<'_, f64> {
        self.per_layer_kv.slice(s![layer, 1, .., ..])
    }

    pub fn is_finite(&self) -> bool {
        self.per_layer_kv.iter().all(|x| x.is_finite())
    }

    pub fn check_fits(&self, spec: &EncoderSpec) -> Result<()> {
        let d = self.per_layer_kv.dim();
        if d.0 != spec.num_layers || d.1 != 2 || d.3 != spec.hidden_size {
            return Err(EncoderError::PromptShape {
                found: [d.0, d.1, d.2, d.3],
                layers: spec.num_layers,
                hidden: spec.hidden_size,
            });
        }
        Ok(())
    }
}

/// The contract every encoder (the tiny reference one or an adapter around a
/// full-scale model) implements.
pub trait Encoder: Send + Sync {
    fn spec(&self) -> &EncoderSpec;

    fn tokenize(&self, text: &str) -> Tokenization;

    fn mask_token(&self) -> TokenId;

    /// Forward pass. With `prompt` absent or of length zero the output is
    /// exactly the base encoder's.
    fn encode(&self, token_ids: &[TokenId], prompt: Option<&PromptParameters>) -> Result<LayerStates>;

    /// Log-softmax over the vocabulary at `position`.
    fn masked_log_probs(
        &self,
        token_ids: &[TokenId],
        position: usize,
        prompt: Option<&PromptParameters>,
    ) -> Result<Array1<f64>>;

    /// Digest of every base weight, used to prove the base stays frozen.
    fn base_checksum(&self) -> String;

    /// Tokenizes `text` and maps each character span to its sub-token range.
    fn tokenize_sentence(&self, text: &str, spans: &[(usize, usize)]) -> Result<TokenizedSentence> {
        let tok = self.tokenize(text);
        let word_spans = spans.iter().map(|&s| tok.token_range(s)).collect::<Result<_>>()?;
        Ok(TokenizedSentence {
            token_ids: tok.ids,
            word_spans,
        })
    }
}

/// Forward pass whose prefix gradient can be read back afterwards.
pub trait PromptBackprop {
    fn states(&self) -> &LayerStates;

    /// Gradient with respect to the prefix (shape `L × 2 × k × H`) of a
    /// scalar whose gradient with respect to the hidden states is `upstream`.
    fn backward(&self, upstream: &Array3<f64>) -> Array4<f64>;
}

pub trait DifferentiableEncoder: Encoder {
    fn encode_for_backprop<'a>(
        &'a self,
        token_ids: &[TokenId],
        prompt: &PromptParameters,
    ) -> Result<Box<dyn PromptBackprop + 'a>>;
}

/// Token-level masked language model view, as consumed by the benchmarks.
pub trait MaskedLm {
    fn tokenize(&self, text: &str) -> Tokenization;
    fn mask_token(&self) -> TokenId;
    fn vocab_size(&self) -> usize;
    fn masked_log_probs(&self, token_ids: &[TokenId], position: usize) -> Result<Array1<f64>>;
}

/// An encoder with an optional prefix bound to it.
#[derive(Clone, Copy)]
pub struct Prompted<'a, E: ?Sized> {
    pub encoder: &'a E,
    pub prompt: Option<&'a PromptParameters>,
}

impl<'a, E: Encoder + ?Sized> Prompted<'a, E> {
    pub fn new(encoder: &'a E, prompt: Option<&'a PromptParameters>) -> Self {
        Self { encoder, prompt }
    }

    pub fn encode(&self, token_ids: &[TokenId]) -> Result<LayerStates> {
        self.encoder.encode(token_ids, self.prompt)
    }
}

impl<E: Encoder + ?Sized> MaskedLm for Prompted<'_, E> {
    fn tokenize(&self, text: &str) -> Tokenization {
        self.encoder.tokenize(text)
    }

    fn mask_token(&self) -> TokenId {
        self.encoder.mask_token()
    }

    fn vocab_size(&self) -> usize {
        self.encoder.spec().vocab_size
    }

    fn masked_log_probs(&self, token_ids: &[TokenId], position: usize) -> Result<Array1<f64>> {
        self.encoder.masked_log_probs(token_ids, position, self.prompt)
    }
}

/// A sequence with exactly one mask token and the candidate ids to score.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MlmQuery {
    pub token_ids: Vec<TokenId>,
    pub candidates: Vec<TokenId>,
}

/// Log-probability of each candidate at the query's masked position.
pub fn mlm_logprob(lm: &dyn MaskedLm, query: &MlmQuery) -> Result<Vec<f64>> {
    let mask = lm.mask_token();
    let positions: Vec<usize> = query
        .token_ids
        .iter()
        .enumerate()
        .filter(|(_, &t)| t == mask)
        .map(|(i, _)| i)
        .collect();
    if positions.len() != 1 {
        return Err(EncoderError::BadQuery(positions.len()));
    }
    let log_probs = lm.masked_log_probs(&query.token_ids, positions[0])?;
    query
        .candidates
        .iter()
        .map(|&c| log_probs.get(c as usize).copied().ok_or(EncoderError::UnknownToken(c)))
        .collect()
}

/// Chain-rule log-probability of the tokens in `span`: all of them start
/// masked, and each is scored left to right before being revealed.
pub fn chain_logprob(lm: &dyn MaskedLm, token_ids: &[TokenId], span: Range<usize>) -> Result<f64> {
    if span.start >= span.end || span.end > token_ids.len() {
        return Err(EncoderError::BadSpan {
            start: span.start,
            end: span.end,
            len: token_ids.len(),
        });
    }
    let mut work = token_ids.to_vec();
    for p in span.clone() {
        work[p] = lm.mask_token();
    }
    let mut total = 0.0;
    for p in span {
        let lp = lm.masked_log_probs(&work, p)?;
        total += lp[token_ids[p] as usize];
        work[p] = token_ids[p];
    }
    Ok(total)
}

/// Sum over `positions` of `log P(token | sentence with that one token masked)`.
pub fn pseudo_log_likelihood(lm: &dyn MaskedLm, token_ids: &[TokenId], positions: &[usize]) -> Result<f64> {
    let mut work = token_ids.to_vec();
    let mut total = 0.0;
    for &p in positions {
        if p >= token_ids.len() {
            return Err(EncoderError::BadSpan {
                start: p,
                end: p + 1,
                len: token_ids.len(),
            });
        }
        work[p] = lm.mask_token();
        total += lm.masked_log_probs(&work, p)?[token_ids[p] as usize];
        work[p] = token_ids[p];
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;

    #[test]
    fn large_prefix_budget() {
        let spec = EncoderSpec::LARGE;
        let p = PromptParameters::zeros(spec.num_layers, 40, spec.hidden_size);
        assert_eq!(p.num_parameters(), 1_966_080);
        assert_eq!(p.num_parameters(), 24 * 2 * 40 * 1024);
    }

    #[test]
    fn init_scale_and_determinism() {
        let a = PromptParameters::init(2, 4, 16, 9);
        assert_eq!(a, PromptParameters::init(2, 4, 16, 9));
        assert_ne!(a, PromptParameters::init(2, 4, 16, 10));
        let bound = 0.5 / 4.0;
        assert!(a.per_layer_kv.iter().all(|x| x.abs() <= bound));
    }

    #[test]
    fn spec_validation() {
        assert!(EncoderSpec::tiny().validate().is_ok());
        let mut bad = EncoderSpec::tiny();
        bad.num_heads = 3;
        assert!(matches!(bad.validate(), Err(EncoderError::InvalidSpec(_))));
        bad.num_heads = 0;
        assert!(bad.validate().is_err());
    }

    fn states_from(rows: &[[f64; 2]]) -> LayerStates {
        let mut s = Array3::zeros((2, rows.len(), 2));
        for (t, r) in rows.iter().enumerate() {
            s[[1, t, 0]] = r[0];
            s[[1, t, 1]] = r[1];
        }
        LayerStates { states: s }
    }

    #[test]
    fn word_embedding_means() {
        let st = states_from(&[[1.0, 2.0], [3.0, -2.0], [3.0, -2.0], [3.0, -2.0]]);
        assert_eq!(
            word_embedding(&st, 0..1, LayerSelector::Final).unwrap(),
            array![1.0, 2.0]
        );
        assert_eq!(
            word_embedding(&st, 0..2, LayerSelector::Final).unwrap(),
            array![2.0, 0.0]
        );
        assert_eq!(
            word_embedding(&st, 1..4, LayerSelector::Final).unwrap(),
            array![3.0, -2.0]
        );
        assert_eq!(
            word_embedding(&st, 0..2, LayerSelector::AllLayersMean).unwrap(),
            array![1.0, 0.0]
        );
        assert!(matches!(
            word_embedding(&st, 2..2, LayerSelector::Final),
            Err(EncoderError::BadSpan { .. })
        ));
        assert!(word_embedding(&st, 3..5, LayerSelector::Final).is_err());
    }

    #[test]
    fn token_range_mapping() {
        let tok = Tokenization {
            ids: vec![5, 6, 7, 8],
            offsets: vec![(0, 3), (4, 8), (8, 10), (11, 12)],
        };
        assert_eq!(tok.token_range((4, 10)).unwrap(), 1..3);
        assert_eq!(tok.token_range((0, 3)).unwrap(), 0..1);
        assert!(tok.token_range((3, 4)).is_err());
    }

    /// Toy LM over 3 real tokens {0, 1, 2} plus mask id 3, with hand-set
    /// conditionals that depend on which neighbor is revealed.
    struct ToyLm;

    impl ToyLm {
        fn dist(work: &[TokenId], position: usize) -> [f64; 4] {
            let other = work[1 - position];
            match (position, other) {
                (0, 3) => [0.5, 0.3, 0.2, 0.0],
                (1, 3) => [0.1, 0.6, 0.3, 0.0],
                (1, 0) => [0.2, 0.2, 0.6, 0.0],
                (1, _) => [0.7, 0.2, 0.1, 0.0],
                (0, _) => [0.25, 0.25, 0.5, 0.0],
                _ => unreachable!(),
            }
        }
    }

    impl MaskedLm for ToyLm {
        fn tokenize(&self, _: &str) -> Tokenization {
            unimplemented!()
        }
        fn mask_token(&self) -> TokenId {
            3
        }
        fn vocab_size(&self) -> usize {
            4
        }
        fn masked_log_probs(&self, work: &[TokenId], position: usize) -> Result<Array1<f64>> {
            Ok(Array1::from(
                Self::dist(work, position).iter().map(|p| p.ln()).collect::<Vec<_>>(),
            ))
        }
    }

    #[test]
    fn chain_rule_on_toy_vocab() {
        // P(t0=0 | mask, mask) * P(t1=2 | 0, mask) = 0.5 * 0.6
        let lp = chain_logprob(&ToyLm, &[0, 2], 0..2).unwrap();
        assert_abs_diff_eq!(lp, (0.5f64 * 0.6).ln(), epsilon = 1e-12);
        // P(t0=1 | mask, mask) * P(t1=1 | 1, mask) = 0.3 * 0.2
        let lp = chain_logprob(&ToyLm, &[1, 1], 0..2).unwrap();
        assert_abs_diff_eq!(lp, (0.3f64 * 0.2).ln(), epsilon = 1e-12);
        // single position: P(t1=2 | t0=0) = 0.6
        let lp = chain_logprob(&ToyLm, &[0, 2], 1..2).unwrap();
        assert_abs_diff_eq!(lp, 0.6f64.ln(), epsilon = 1e-12);
    }

    #[test]
    fn pll_masks_one_at_a_time() {
        // P(t0=2 | t1=1) * P(t1=1 | t0=2) = 0.5 * 0.2
        let lp = pseudo_log_likelihood(&ToyLm, &[2, 1], &[0, 1]).unwrap();
        assert_abs_diff_eq!(lp, (0.5f64 * 0.2).ln(), epsilon = 1e-12);
    }

    #[test]
    fn query_needs_one_mask() {
        let q = MlmQuery {
            token_ids: vec![0, 1],
            candidates: vec![0],
        };
        assert!(matches!(mlm_logprob(&ToyLm, &q), Err(EncoderError::BadQuery(0))));
        let q = MlmQuery {
            token_ids: vec![3, 1],
            candidates: vec![0, 2],
        };
        let lp = mlm_logprob(&ToyLm, &q).unwrap();
        assert_abs_diff_eq!(lp[0], 0.25f64.ln(), epsilon = 1e-12);
        assert_abs_diff_eq!(lp[1], 0.5f64.ln(), epsilon = 1e-12);
    }
}
