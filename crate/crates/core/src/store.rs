//! Keyed store of intermediate states with simulated retrieval latency and
//! hole tracking.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::domain::{LatentState, StepSet};
use crate::error::{Error, Result};

pub const DEFAULT_CAPACITY_ITEMS: usize = 5_000;
pub const DEFAULT_BYTES_PER_ITEM: u64 = 144_000;

/// Simulated latency accrued by one request, in seconds.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LatencyLedger {
    pub search: f64,
    pub retrieval: f64,
    pub compute: f64,
}

impl LatencyLedger {
    pub fn total(&self) -> f64 {
        self.search + self.retrieval + self.compute
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StoreStats {
    pub item_count: usize,
    pub capacity_items: usize,
    pub bytes_per_item: u64,
    pub simulated_bytes: u64,
    pub hole_count: usize,
    pub prompt_count: usize,
}

#[derive(Debug)]
pub struct StateStore {
    steps: StepSet,
    capacity: usize,
    bytes_per_item: u64,
    retrieval_latency: f64,
    items: HashMap<String, BTreeMap<u32, LatentState>>,
    holes: HashMap<String, BTreeSet<u32>>,
    item_count: usize,
    hole_count: usize,
    root: Option<PathBuf>,
}

impl StateStore {
    pub fn new(steps: StepSet, capacity: usize, retrieval_latency: f64) -> Self {
        StateStore {
            steps,
            capacity,
            bytes_per_item: DEFAULT_BYTES_PER_ITEM,
            retrieval_latency,
            items: HashMap::new(),
            holes: HashMap::new(),
            item_count: 0,
            hole_count: 0,
            root: None,
        }
    }

    /// Mirrors every put and delete to files under `root`.
    pub fn with_disk(mut self, root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        fs::create_dir_all(&root)?;
        self.root = Some(root);
        Ok(self)
    }

    pub fn with_bytes_per_item(mut self, bytes: u64) -> Self {
        self.bytes_per_item = bytes;
        self
    }

    pub fn steps(&self) -> &StepSet {
        &self.steps
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.item_count
    }

    pub fn is_empty(&self) -> bool {
        self.item_count == 0
    }

    pub fn free(&self) -> usize {
        self.capacity - self.item_count
    }

    pub fn contains(&self, prompt_id: &str, k: u32) -> bool {
        self.items.get(prompt_id).is_some_and(|m| m.contains_key(&k))
    }

    pub fn put_state(&mut self, prompt_id: &str, k: u32, state: LatentState) -> Result<()> {
        if !self.steps.contains(k) {
            return Err(Error::UnknownStep { k });
        }
        if state.k != k {
            return Err(Error::StepMismatch {
                expected: k,
                actual: state.k,
            });
        }
        let replacing = self.contains(prompt_id, k);
        if !replacing && self.item_count >= self.capacity {
            return Err(Error::StoreFull);
        }
        if let Some(root) = &self.root {
            write_state_file(&state_path(root, prompt_id, k), &state)?;
        }
        self.items.entry(prompt_id.to_string()).or_default().insert(k, state);
        if !replacing {
            self.item_count += 1;
        }
        if let Some(h) = self.holes.get_mut(prompt_id) {
            if h.remove(&k) {
                self.hole_count -= 1;
            }
        }
        Ok(())
    }

    /// Returns the state and charges the retrieval latency, or `None` for a
    /// hole or unknown prompt, in which case nothing is charged.
    pub fn get_state(&self, prompt_id: &str, k: u32, ledger: &mut LatencyLedger) -> Option<LatentState> {
        let state = self.items.get(prompt_id)?.get(&k)?.clone();
        ledger.retrieval += self.retrieval_latency;
        Some(state)
    }

    pub fn available_ks(&self, prompt_id: &str) -> Vec<u32> {
        self.items
            .get(prompt_id)
            .map(|m| m.keys().copied().collect())
            .unwrap_or_default()
    }

    /// Removes one item; returns false when it was not present.
    pub fn delete_state(&mut self, prompt_id: &str, k: u32) -> Result<bool> {
        let Some(states) = self.items.get_mut(prompt_id) else {
            return Ok(false);
        };
        if states.remove(&k).is_none() {
            return Ok(false);
        }
        self.item_count -= 1;
        if states.is_empty() {
            self.items.remove(prompt_id);
            if let Some(h) = self.holes.remove(prompt_id) {
                self.hole_count -= h.len();
            }
        } else if self.holes.entry(prompt_id.to_string()).or_default().insert(k) {
            self.hole_count += 1;
        }
        if let Some(root) = &self.root {
            let path = state_path(root, prompt_id, k);
            if path.exists() {
                fs::remove_file(&path)?;
            }
            let dir = prompt_dir(root, prompt_id);
            if !self.items.contains_key(prompt_id) && dir.exists() {
                fs::remove_dir_all(dir)?;
            }
        }
        Ok(true)
    }

    pub fn stats(&self) -> StoreStats {
        StoreStats {
            item_count: self.item_count,
            capacity_items: self.capacity,
            bytes_per_item: self.bytes_per_item,
            simulated_bytes: self.item_count as u64 * self.bytes_per_item,
            hole_count: self.hole_count,
            prompt_count: self.items.len(),
        }
    }
}

fn prompt_dir(root: &Path, prompt_id: &str) -> PathBuf {
    let hex: String = prompt_id.bytes().map(|b| format!("{b:02x}")).collect();
    root.join(hex)
}

fn state_path(root: &Path, prompt_id: &str, k: u32) -> PathBuf {
    prompt_dir(root, prompt_id).join(format!("k{k}.bin"))
}

/// Layout: `u32 d_l`, `u32 k`, then `d_l` conditioning values followed by
/// `d_l` noise values, all little-endian `f32`.
pub fn write_state_file(path: &Path, state: &LatentState) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let dim = state.values.len();
    let mut buf = Vec::with_capacity(8 + 8 * dim);
    buf.extend_from_slice(&(dim as u32).to_le_bytes());
    buf.extend_from_slice(&state.k.to_le_bytes());
    for x in state.values.iter().chain(&state.noise) {
        buf.extend_from_slice(&(*x as f32).to_le_bytes());
    }
    fs::write(path, buf)?;
    Ok(())
}

pub fn read_state_file(path: &Path, source_prompt: &str) -> Result<LatentState> {
    let bytes = fs::read(path)?;
    if bytes.len() < 8 {
        return Err(Error::MalformedStateFile(format!(
            "{}: truncated header",
            path.display()
        )));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().expect("4-byte slice"));
    let dim = word(0) as usize;
    let k = word(4);
    if bytes.len() != 8 + 8 * dim {
        return Err(Error::MalformedStateFile(format!(
            "{}: expected {} bytes for d_l={dim}, found {}",
            path.display(),
            8 + 8 * dim,
            bytes.len()
        )));
    }
    let floats: Vec<f64> = bytes[8..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4-byte chunk")) as f64)
        .collect();
    let (values, noise) = floats.split_at(dim);
    Ok(LatentState {
        values: values.to_vec(),
        noise: noise.to_vec(),
        k,
        source_prompt: source_prompt.to_string(),
    })
}
