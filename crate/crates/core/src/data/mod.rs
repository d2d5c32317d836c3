//! Deterministic synthetic data: arithmetic text and dense-prediction images.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::Result;

pub mod decontam;
pub mod images;
pub mod language;
pub mod text;
pub mod vocab;

/// Kind of task bundle stored in a data directory.
pub fn bundle_kind(dir: &Path) -> Result<String> {
    #[derive(Deserialize)]
    struct Kind {
        kind: String,
    }
    let k: Kind = serde_json::from_str(&fs::read_to_string(dir.join("index.json"))?)?;
    Ok(k.kind)
}

pub(crate) fn write_jsonl<S: Serialize>(path: &Path, items: &[S]) -> Result<()> {
    let mut f = std::io::BufWriter::new(fs::File::create(path)?);
    for it in items {
        serde_json::to_writer(&mut f, it)?;
        f.write_all(b"\n")?;
    }
    f.flush()?;
    Ok(())
}

pub(crate) fn read_jsonl<S: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<S>> {
    let f = BufReader::new(fs::File::open(path)?);
    let mut out = Vec::new();
    for line in f.lines() {
        let line = line?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}

