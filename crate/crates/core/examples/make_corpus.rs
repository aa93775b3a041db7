//! Regenerates the bundled synthetic corpus: `make_corpus [DIR]`.

use std::path::PathBuf;

use sqlc::corpus::{write_corpus, CorpusSpec};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let dir = std::env::args().nth(1).map(PathBuf::from).unwrap_or_else(|| PathBuf::from("data/corpus"));
    let manifest = write_corpus(&CorpusSpec::default(), &dir)?;
    println!("wrote {} patches to {}", manifest.entries.len(), dir.display());
    Ok(())
}
