//! A synthetic two-attribute domain and corpus for desk-scale runs.
//!
//! Sentences are drawn from a few frames. Each attribute word is placed next
//! to a skewed set of neutral words (the first attribute leans towards the
//! first half of the neutral list), so the attribute prototypes start out
//! apart in the tiny encoder's space.

use rand::seq::IndexedRandom;
use rand::Rng;

use crate::lexicon::BiasDomain;
use crate::seed::derived_rng;

pub const DEMO_NEUTRAL: [&str; 8] = [
    "engineer", "science", "math", "pilot", "nurse", "art", "dance", "poetry",
];
pub const DEMO_MALE: [&str; 4] = ["he", "father", "uncle", "boy"];
pub const DEMO_FEMALE: [&str; 4] = ["she", "mother", "aunt", "girl"];

const FRAMES: [&str; 6] = [
    "the {a} talked about {n} all day .",
    "yesterday the {a} chose {n} over everything .",
    "everyone knows the {a} loves {n} .",
    "in the morning the {a} studied {n} again .",
    "the {a} said that {n} matters most .",
    "after dinner the {a} read about {n} .",
];

pub fn demo_domain() -> BiasDomain {
    BiasDomain::new("gender", &DEMO_NEUTRAL, &[DEMO_MALE.to_vec(), DEMO_FEMALE.to_vec()])
        .expect("demo lists form a valid domain")
}

/// `per_word` sentences for every attribute word, plus `per_word` purely
/// neutral sentences per neutral word. `skew` in `[0.5, 1]` is the chance an
/// attribute sentence uses a neutral word from its own attribute's half.
pub fn demo_corpus(per_word: usize, skew: f64, seed: u64) -> Vec<String> {
    let mut rng = derived_rng(seed, "demo-corpus");
    let half = DEMO_NEUTRAL.len() / 2;
    let mut lines = Vec::new();
    for (i, tuple) in [DEMO_MALE, DEMO_FEMALE].iter().enumerate() {
        for word in tuple {
            for _ in 0..per_word {
                let own = rng.random_bool(skew);
                let side = if own { i } else { 1 - i };
                let n = DEMO_NEUTRAL[side * half + rng.random_range(0..half)];
                let frame = FRAMES.choose(&mut rng).expect("frames");
                lines.push(frame.replace("{a}", word).replace("{n}", n));
            }
        }
    }
    for n in DEMO_NEUTRAL {
        for _ in 0..per_word {
            let frame = FRAMES.choose(&mut rng).expect("frames");
            lines.push(frame.replace("{a}", "student").replace("{n}", n));
        }
    }
    lines
}
