//! Byte-level BPE. Ids `0..4` are specials, `4..260` are the 256 raw bytes,
//! and every merge adds one id after that. Any byte string encodes without
//! `unk`.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const EOS: u32 = 2;
pub const UNK: u32 = 3;
pub const NUM_SPECIAL: u32 = 4;
pub const BYTE_OFFSET: u32 = NUM_SPECIAL;
pub const FIRST_MERGE: u32 = BYTE_OFFSET + 256;

const HEADER: &str = "bpe-tokenizer v1";

#[derive(Debug, Clone, PartialEq)]
pub struct Tokenizer {
    merges: Vec<(u32, u32)>,
    vocab: Vec<Vec<u8>>,
    ranks: HashMap<(u32, u32), u32>,
}

impl Tokenizer {
    /// Byte-only tokenizer with no merges.
    pub fn bytes_only() -> Self {
        Self::from_merges(Vec::new()).expect("no merges to validate")
    }

    pub fn from_merges(merges: Vec<(u32, u32)>) -> Result<Self> {
        let mut vocab: Vec<Vec<u8>> = vec![Vec::new(); NUM_SPECIAL as usize];
        vocab.extend((0..=255u8).map(|b| vec![b]));
        let mut ranks = HashMap::with_capacity(merges.len());
        for (i, &(l, r)) in merges.iter().enumerate() {
            let next = FIRST_MERGE + i as u32;
            if l < BYTE_OFFSET || r < BYTE_OFFSET || l >= next || r >= next {
                return Err(Error::Format(format!(
                    "merge {i} ({l}, {r}) references a special or later id"
                )));
            }
            let mut bytes = vocab[l as usize].clone();
            bytes.extend_from_slice(&vocab[r as usize]);
            vocab.push(bytes);
            if ranks.insert((l, r), next).is_some() {
                return Err(Error::Format(format!("duplicate merge ({l}, {r})")));
            }
        }
        Ok(Self { merges, vocab, ranks })
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab.len()
    }

    pub fn merges(&self) -> &[(u32, u32)] {
        &self.merges
    }

    pub fn eos(&self) -> u32 {
        EOS
    }

    pub fn is_special(&self, id: u32) -> bool {
        id < NUM_SPECIAL
    }

    /// Bytes of one token; specials decode to nothing.
    pub fn token_bytes(&self, id: u32) -> &[u8] {
        self.vocab.get(id as usize).map_or(&[], Vec::as_slice)
    }

    pub fn encode(&self, text: &str) -> Vec<u32> {
        self.encode_bytes(text.as_bytes())
    }

    pub fn encode_bytes(&self, bytes: &[u8]) -> Vec<u32> {
        let mut ids: Vec<u32> = bytes.iter().map(|&b| BYTE_OFFSET + u32::from(b)).collect();
        loop {
            let best = ids
                .windows(2)
                .filter_map(|w| self.ranks.get(&(w[0], w[1])).map(|&m| (m, (w[0], w[1]))))
                .min();
            let Some((merged, pair)) = best else { break };
            ids = apply_merge(&ids, pair, merged);
        }
        ids
    }

    pub fn decode(&self, ids: &[u32]) -> Vec<u8> {
        ids.iter().flat_map(|&id| self.token_bytes(id)).copied().collect()
    }

    pub fn decode_lossy(&self, ids: &[u32]) -> String {
        String::from_utf8_lossy(&self.decode(ids)).into_owned()
    }

    pub fn to_text(&self) -> String {
        let mut out = format!(
            "{HEADER}\nspecials pad={PAD} bos={BOS} eos={EOS} unk={UNK}\nmerges {}\n",
            self.merges.len()
        );
        for (l, r) in &self.merges {
            let _ = writeln!(out, "{l} {r}");
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let bad = |m: &str| Error::Format(format!("tokenizer file: {m}"));
        if lines.next() != Some(HEADER) {
            return Err(bad("missing or unsupported header"));
        }
        let specials = format!("specials pad={PAD} bos={BOS} eos={EOS} unk={UNK}");
        if lines.next() != Some(specials.as_str()) {
            return Err(bad("unexpected special ids"));
        }
        let count: usize = lines
            .next()
            .and_then(|l| l.strip_prefix("merges "))
            .and_then(|n| n.parse().ok())
            .ok_or_else(|| bad("missing merge count"))?;
        let merges = lines
            .by_ref()
            .take(count)
            .map(|l| {
                let mut it = l.split_whitespace().map(str::parse::<u32>);
                match (it.next(), it.next(), it.next()) {
                    (Some(Ok(a)), Some(Ok(b)), None) => Ok((a, b)),
                    _ => Err(bad(&format!("bad merge line {l:?}"))),
                }
            })
            .collect::<Result<Vec<_>>>()?;
        if merges.len() != count {
            return Err(bad("fewer merges than declared"));
        }
        Self::from_merges(merges)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::from_text(&fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }
}

fn apply_merge(ids: &[u32], pair: (u32, u32), merged: u32) -> Vec<u32> {
    let mut out = Vec::with_capacity(ids.len());
    let mut i = 0;
    while i < ids.len() {
        if i + 1 < ids.len() && (ids[i], ids[i + 1]) == pair {
            out.push(merged);
            i += 2;
        } else {
            out.push(ids[i]);
            i += 1;
        }
    }
    out
}

/// Learns merges until the vocabulary reaches `vocab_size` or no adjacent
/// pair occurs twice. Each round merges the most frequent pair; ties go to the
/// lexicographically smallest `(left bytes, right bytes)`.
pub fn train_tokenizer(corpus: &[u8], vocab_size: usize) -> Result<Tokenizer> {
    if vocab_size < FIRST_MERGE as usize {
        return Err(Error::Config(format!(
            "vocab_size {vocab_size} below the {FIRST_MERGE} byte and special ids"
        )));
    }
    if corpus.is_empty() {
        return Err(Error::Data("cannot train a tokenizer on an empty corpus".into()));
    }
    let mut tok = Tokenizer::bytes_only();
    let mut ids: Vec<u32> = corpus.iter().map(|&b| BYTE_OFFSET + u32::from(b)).collect();
    let mut counts: HashMap<(u32, u32), usize> = HashMap::new();
    while tok.vocab_size() < vocab_size {
        counts.clear();
        for w in ids.windows(2) {
            *counts.entry((w[0], w[1])).or_default() += 1;
        }
        let best = counts
            .iter()
            .filter(|(_, &c)| c >= 2)
            .max_by(|(pa, ca), (pb, cb)| {
                ca.cmp(cb).then_with(|| {
                    let ka = (tok.token_bytes(pa.0), tok.token_bytes(pa.1));
                    let kb = (tok.token_bytes(pb.0), tok.token_bytes(pb.1));
                    kb.cmp(&ka)
                })
            })
            .map(|(&p, _)| p);
        let Some(pair) = best else { break };
        let merged = FIRST_MERGE + tok.merges.len() as u32;
        let mut merges = std::mem::take(&mut tok.merges);
        merges.push(pair);
        tok = Tokenizer::from_merges(merges)?;
        ids = apply_merge(&ids, pair, merged);
    }
    Ok(tok)
}
