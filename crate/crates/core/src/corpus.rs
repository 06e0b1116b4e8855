//! Byte-level tokenization and fixed-window batching of plain text.

use std::path::{Path, PathBuf};

use rayon::prelude::*;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const DEFAULT_SEQ_LEN: usize = 256;

/// Each UTF-8 byte is one token.
pub fn tokenize_bytes(text: &str) -> Vec<u32> {
    text.bytes().map(u32::from).collect()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CorpusSpec {
    pub paths: Vec<PathBuf>,
    pub max_docs: Option<usize>,
    pub seq_len: usize,
    pub stride: usize,
}

impl CorpusSpec {
    pub fn new(paths: Vec<PathBuf>) -> Self {
        CorpusSpec { paths, max_docs: None, seq_len: DEFAULT_SEQ_LEN, stride: DEFAULT_SEQ_LEN }
    }

    /// Every `.txt` file directly inside `dir`, sorted by path.
    pub fn from_dir(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
        let mut paths = Vec::new();
        for entry in entries {
            let path = entry.map_err(|e| Error::io(dir, e))?.path();
            if path.is_file() && path.extension().is_some_and(|x| x == "txt") {
                paths.push(path);
            }
        }
        paths.sort();
        Ok(CorpusSpec::new(paths))
    }

    fn validate(&self) -> Result<()> {
        if self.seq_len == 0 || self.stride == 0 || self.stride > self.seq_len {
            return Err(Error::invalid(format!(
                "need 0 < stride <= seq_len, got stride {} and seq_len {}",
                self.stride, self.seq_len
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct TokenBatch {
    pub sequences: Vec<Vec<u32>>,
    /// SHA-256 over the spec and the bytes of every document used.
    pub fingerprint: String,
}

impl TokenBatch {
    pub fn n_tokens(&self) -> usize {
        self.sequences.iter().map(Vec::len).sum()
    }

    /// Keeps whole sequences, in order, until `max_tokens` would be exceeded.
    /// Always keeps at least one sequence.
    pub fn truncate_tokens(&mut self, max_tokens: usize) {
        let mut total = 0;
        let keep = self
            .sequences
            .iter()
            .take_while(|s| {
                total += s.len();
                total <= max_tokens
            })
            .count()
            .max(1);
        self.sequences.truncate(keep);
    }
}

/// Windows of `seq_len` starting every `stride` bytes. Windowing stops at
/// the first window that reaches the end of the document; a short final
/// window is kept.
pub fn windows(tokens: &[u32], seq_len: usize, stride: usize) -> Vec<Vec<u32>> {
    let mut out = Vec::new();
    let mut start = 0;
    while start < tokens.len() {
        let end = (start + seq_len).min(tokens.len());
        out.push(tokens[start..end].to_vec());
        if end == tokens.len() {
            break;
        }
        start += stride;
    }
    out
}

pub fn build_batches(spec: &CorpusSpec) -> Result<TokenBatch> {
    spec.validate()?;
    let n_docs = spec.max_docs.map_or(spec.paths.len(), |m| m.min(spec.paths.len()));
    let paths = &spec.paths[..n_docs];
    if paths.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let docs: Vec<Vec<u8>> = paths
        .par_iter()
        .map(|p| std::fs::read(p).map_err(|e| Error::io(p, e)))
        .collect::<Result<_>>()?;

    let mut hasher = Sha256::new();
    hasher.update(format!("seq_len={};stride={};docs={}\n", spec.seq_len, spec.stride, docs.len()));
    let mut sequences = Vec::new();
    for (path, bytes) in paths.iter().zip(&docs) {
        let text = std::str::from_utf8(bytes)
            .map_err(|e| Error::invalid(format!("{} is not UTF-8: {e}", path.display())))?;
        hasher.update((bytes.len() as u64).to_le_bytes());
        hasher.update(bytes);
        sequences.extend(windows(&tokenize_bytes(text), spec.seq_len, spec.stride));
    }
    if sequences.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let fingerprint = hasher.finalize().iter().map(|b| format!("{b:02x}")).collect();
    Ok(TokenBatch { sequences, fingerprint })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tokenization() {
        assert_eq!(tokenize_bytes("A"), vec![65]);
        assert!(tokenize_bytes("").is_empty());
        assert_eq!(tokenize_bytes("é"), vec![195, 169]);
    }

    #[test]
    fn ten_byte_windows() {
        let doc: Vec<u32> = (0..10).collect();
        let w = windows(&doc, 4, 4);
        assert_eq!(w, vec![vec![0, 1, 2, 3], vec![4, 5, 6, 7], vec![8, 9]]);
        assert_eq!(w.concat(), doc);
        let overlap = windows(&doc, 4, 2);
        assert_eq!(overlap.len(), 4);
        assert_eq!(overlap[3], vec![6, 7, 8, 9]);
        assert_eq!(windows(&doc, 5, 5).len(), 2);
    }

    #[test]
    fn build_from_files() {
        let dir = tempfile::tempdir().unwrap();
        for (name, body) in [("b.txt", "second doc"), ("a.txt", "first"), ("c.txt", "third!"), ("skip.md", "no")] {
            std::fs::write(dir.path().join(name), body).unwrap();
        }
        let mut spec = CorpusSpec::from_dir(dir.path()).unwrap();
        assert_eq!(spec.paths.len(), 3);
        spec.seq_len = 4;
        spec.stride = 4;
        let all = build_batches(&spec).unwrap();
        assert_eq!(all.sequences.concat(), tokenize_bytes("firstsecond docthird!"));
        assert_eq!(all, build_batches(&spec).unwrap());

        spec.max_docs = Some(1);
        let one = build_batches(&spec).unwrap();
        assert_eq!(one.sequences.concat(), tokenize_bytes("first"));
        assert_ne!(one.fingerprint, all.fingerprint);

        spec.max_docs = Some(0);
        assert!(matches!(build_batches(&spec), Err(Error::EmptyCorpus)));
        spec.max_docs = None;
        spec.stride = 5;
        assert!(build_batches(&spec).is_err());
    }

    #[test]
    fn empty_dir() {
        let dir = tempfile::tempdir().unwrap();
        let spec = CorpusSpec::from_dir(dir.path()).unwrap();
        assert!(matches!(build_batches(&spec), Err(Error::EmptyCorpus)));
    }

    #[test]
    fn token_cap() {
        let mut b = TokenBatch { sequences: vec![vec![1; 4], vec![2; 4], vec![3; 2]], fingerprint: String::new() };
        b.truncate_tokens(9);
        assert_eq!(b.sequences.len(), 2);
        b.truncate_tokens(1);
        assert_eq!(b.sequences.len(), 1);
    }
}
