//! Bias benchmarks: SEAT, CrowS-Pairs and StereoSet (intrasentence), plus
//! the 2-D projection used to look at word prototypes.
//!
//! Every scorer works against the encoder contract, so the same code scores
//! the base encoder and a prompted one.

mod crows;
mod project;
mod report;
mod seat;
mod stereoset;

use std::path::PathBuf;

use ndarray::{Array1, Axis};
use thiserror::Error;

use crate::encoder::{Encoder, EncoderError, PromptParameters};

pub use crows::{crows_score, crows_score_with, load_crows_csv, shared_positions, CrowsPair};
pub use project::{project_2d, silhouette, TsneOptions};
pub use report::{read_report_rows, EvalReport, ReportRow, StereoScores};
pub use seat::{load_seat_test, seat_effect, seat_score, SeatResult, SeatTest, EXACT_LIMIT, SAMPLED_PERMUTATIONS};
pub use stereoset::{
    candidate_span, icat, load_filtered_stereoset, load_stereoset, stereoset_score, stereoset_score_with, Gold,
    StereoCandidate, StereoExample, DEFAULT_TARGET_WORDS,
};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error("association scores have zero variance")]
    DegenerateVariance,
    #[error("no examples left after filtering")]
    EmptyAfterFilter,
    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid input: {0}")]
    Invalid(String),
    #[error("perplexity {perplexity} needs more than {} points, got {n}", 3.0 * perplexity)]
    PerplexityTooLarge { n: usize, perplexity: f64 },
}

pub type Result<T> = std::result::Result<T, EvalError>;

/// How token states are pooled into a sentence vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Pooling {
    #[default]
    Mean,
    FirstToken,
}

/// Final-layer sentence vector.
pub fn sentence_embedding<E: Encoder + ?Sized>(
    encoder: &E,
    prompt: Option<&PromptParameters>,
    sentence: &str,
    pooling: Pooling,
) -> Result<Array1<f64>> {
    let ids = encoder.tokenize(sentence).ids;
    let states = encoder.encode(&ids, prompt)?;
    let last = states.last();
    Ok(match pooling {
        Pooling::Mean => last.mean_axis(Axis(0)).ok_or(EncoderError::EmptySequence)?,
        Pooling::FirstToken => last.row(0).to_owned(),
    })
}
