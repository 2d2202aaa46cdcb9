//! Writes the demo word lists and synthetic corpus into a directory.
//!
//! cargo run -p protodebias --example demo_data -- crates/core/data/demo

use std::fs;
use std::path::PathBuf;

use protodebias::demo::{demo_corpus, DEMO_FEMALE, DEMO_MALE, DEMO_NEUTRAL};

fn main() -> std::io::Result<()> {
    let dir = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "data/demo".into()));
    fs::create_dir_all(&dir)?;
    let lines = |words: &[&str]| words.iter().map(|w| format!("{w}\n")).collect::<String>();
    fs::write(dir.join("neutral.txt"), lines(&DEMO_NEUTRAL))?;
    fs::write(dir.join("male.txt"), lines(&DEMO_MALE))?;
    fs::write(dir.join("female.txt"), lines(&DEMO_FEMALE))?;
    let corpus: String = demo_corpus(30, 0.9, 2).into_iter().map(|l| l + "\n").collect();
    fs::write(dir.join("corpus.txt"), corpus)?;
    println!("{}", dir.display());
    Ok(())
}
