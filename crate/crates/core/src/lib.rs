//! Prompt-tuning debiaser for frozen text encoders.
//!
//! The crate trains a deep key/value prefix so that the prototypes of aligned
//! attribute words ("uncle"/"aunt") induce the same distribution over neutral
//! words, while a KL penalty keeps the prompted encoder's neighbor structure
//! close to the frozen one. Around that core it provides corpus preparation,
//! a small reference encoder with exact prefix gradients, and the SEAT,
//! CrowS-Pairs and StereoSet scorers used to evaluate a tuned prefix.

pub mod corpus;
pub mod demo;
pub mod encoder;
pub mod evalharness;
pub mod geometry;
pub mod lexicon;
pub mod seed;
pub mod tuner;
