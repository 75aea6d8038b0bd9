//! Exact cosine-similarity index over prompt embeddings.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::domain::{dot, Embedding, SimilarityScore};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IndexEntry {
    pub prompt_id: String,
    pub embedding: Embedding,
    /// Storage key of each cached state, by step.
    pub payload: BTreeMap<u32, String>,
}

impl IndexEntry {
    pub fn new(prompt_id: impl Into<String>, embedding: Embedding, steps: impl IntoIterator<Item = u32>) -> Self {
        let prompt_id = prompt_id.into();
        let payload = steps.into_iter().map(|k| (k, storage_key(&prompt_id, k))).collect();
        IndexEntry {
            prompt_id,
            embedding,
            payload,
        }
    }
}

pub fn storage_key(prompt_id: &str, k: u32) -> String {
    format!("{prompt_id}/k{k}")
}

#[derive(Clone, Debug, PartialEq)]
pub struct SearchHit {
    pub entry: IndexEntry,
    pub score: SimilarityScore,
}

/// Brute-force scan index. Vectors live in one contiguous row-major matrix;
/// removal swaps the last row into the hole.
#[derive(Clone, Debug)]
pub struct VectorIndex {
    dim: usize,
    matrix: Vec<f64>,
    entries: Vec<IndexEntry>,
    positions: HashMap<String, usize>,
}

impl VectorIndex {
    pub fn new(dim: usize) -> Self {
        VectorIndex {
            dim,
            matrix: Vec::new(),
            entries: Vec::new(),
            positions: HashMap::new(),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn contains(&self, prompt_id: &str) -> bool {
        self.positions.contains_key(prompt_id)
    }

    pub fn get(&self, prompt_id: &str) -> Option<&IndexEntry> {
        self.positions.get(prompt_id).map(|&i| &self.entries[i])
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|e| e.prompt_id.as_str())
    }

    pub fn embeddings(&self) -> impl Iterator<Item = &Embedding> {
        self.entries.iter().map(|e| &e.embedding)
    }

    /// Inserts a batch atomically: either every entry goes in or none does.
    pub fn insert(&mut self, batch: Vec<IndexEntry>) -> Result<usize> {
        let mut seen = HashSet::new();
        for entry in &batch {
            if entry.embedding.dim() != self.dim {
                return Err(Error::DimensionMismatch {
                    expected: self.dim,
                    actual: entry.embedding.dim(),
                });
            }
            if self.positions.contains_key(&entry.prompt_id) || !seen.insert(entry.prompt_id.as_str()) {
                return Err(Error::DuplicatePrompt(entry.prompt_id.clone()));
            }
        }
        let count = batch.len();
        self.matrix.reserve(count * self.dim);
        for entry in batch {
            self.positions.insert(entry.prompt_id.clone(), self.entries.len());
            self.matrix.extend_from_slice(entry.embedding.as_slice());
            self.entries.push(entry);
        }
        Ok(count)
    }

    pub fn remove<S: AsRef<str>>(&mut self, prompt_ids: &[S]) -> usize {
        prompt_ids.iter().filter(|id| self.remove_one(id.as_ref())).count()
    }

    fn remove_one(&mut self, prompt_id: &str) -> bool {
        let Some(pos) = self.positions.remove(prompt_id) else {
            return false;
        };
        let last = self.entries.len() - 1;
        self.entries.swap_remove(pos);
        if pos != last {
            let (head, tail) = self.matrix.split_at_mut(last * self.dim);
            head[pos * self.dim..(pos + 1) * self.dim].copy_from_slice(&tail[..self.dim]);
            self.positions.insert(self.entries[pos].prompt_id.clone(), pos);
        }
        self.matrix.truncate(last * self.dim);
        true
    }

    /// Top-`m` entries by cosine similarity, descending; ties go to the
    /// lexicographically smaller prompt id.
    pub fn search(&self, query: &Embedding, m: usize) -> Result<Vec<SearchHit>> {
        if query.dim() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                actual: query.dim(),
            });
        }
        if m == 0 || self.entries.is_empty() {
            return Ok(Vec::new());
        }
        let q = query.as_slice();
        let scores: Vec<(f64, usize)> = self
            .matrix
            .chunks_exact(self.dim)
            .enumerate()
            .map(|(i, row)| (SimilarityScore::new(dot(row, q)).value(), i))
            .collect();
        let better = |a: &(f64, usize), b: &(f64, usize)| {
            b.0.total_cmp(&a.0)
                .then_with(|| self.entries[a.1].prompt_id.cmp(&self.entries[b.1].prompt_id))
        };
        let top: Vec<(f64, usize)> = if m == 1 {
            scores.into_iter().min_by(better).into_iter().collect()
        } else {
            let mut scores = scores;
            let m = m.min(scores.len());
            if m < scores.len() {
                scores.select_nth_unstable_by(m - 1, better);
                scores.truncate(m);
            }
            scores.sort_by(better);
            scores
        };
        Ok(top
            .into_iter()
            .map(|(s, i)| SearchHit {
                entry: self.entries[i].clone(),
                score: SimilarityScore::new(s),
            })
            .collect())
    }

    /// Writes one JSON object per line, in ascending prompt-id order.
    pub fn snapshot(&self, path: &Path) -> Result<()> {
        let mut out = BufWriter::new(File::create(path)?);
        let mut sorted: Vec<&IndexEntry> = self.entries.iter().collect();
        sorted.sort_by(|a, b| a.prompt_id.cmp(&b.prompt_id));
        for entry in sorted {
            serde_json::to_writer(&mut out, entry)?;
            out.write_all(b"\n")?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn restore(path: &Path, dim: usize) -> Result<Self> {
        let reader = BufReader::new(File::open(path)?);
        let mut batch = Vec::new();
        for line in reader.lines() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            batch.push(serde_json::from_str::<IndexEntry>(&line)?);
        }
        let mut index = VectorIndex::new(dim);
        index.insert(batch)?;
        Ok(index)
    }
}
