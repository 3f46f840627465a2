use std::collections::HashSet;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::Example;
use crate::error::{Error, Result};

/// Reads one example per non-blank line.
pub fn read_jsonl(path: impl AsRef<Path>) -> Result<Vec<Example>> {
    let path = path.as_ref();
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let record = |message: String| Error::Record {
            file: path.display().to_string(),
            line: i + 1,
            message,
        };
        let ex: Example = serde_json::from_str(&line).map_err(|e| record(e.to_string()))?;
        ex.validate().map_err(|e| record(e.to_string()))?;
        out.push(ex);
    }
    Ok(out)
}

pub fn write_jsonl(path: impl AsRef<Path>, examples: &[Example]) -> Result<()> {
    let path = path.as_ref();
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for ex in examples {
        let line = serde_json::to_string(ex).expect("examples always serialize");
        writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone)]
pub struct MergedDataset {
    pub examples: Vec<Example>,
    /// Records read from each source, in argument order.
    pub per_source: Vec<(PathBuf, usize)>,
    pub duplicates_removed: usize,
}

/// Concatenates the sources, optionally drops exact duplicates (first
/// occurrence wins), then shuffles with a seeded permutation.
pub fn merge_datasets<P: AsRef<Path>>(sources: &[P], seed: u64, dedup: bool) -> Result<MergedDataset> {
    let mut examples = Vec::new();
    let mut per_source = Vec::with_capacity(sources.len());
    for src in sources {
        let recs = read_jsonl(src)?;
        per_source.push((src.as_ref().to_path_buf(), recs.len()));
        examples.extend(recs);
    }
    let mut duplicates_removed = 0;
    if dedup {
        let mut seen = HashSet::new();
        let before = examples.len();
        examples.retain(|ex| seen.insert(ex.clone()));
        duplicates_removed = before - examples.len();
    }
    examples.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    Ok(MergedDataset {
        examples,
        per_source,
        duplicates_removed,
    })
}
