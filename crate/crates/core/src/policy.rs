//! Admission and eviction over `(prompt, K)` items.
//!
//! Every policy shares one indexed min-heap; only the primary key differs:
//! `f * K` for LCBFU, last access for LRU, frequency for LFU and insertion
//! order for FIFO. Ties fall back to `(insert_seq, prompt_id, K)`.

use std::cmp::{Ordering, Reverse};
use std::collections::{BTreeMap, BinaryHeap, HashMap};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::domain::LatentState;
use crate::error::{Error, Result};
use crate::store::StateStore;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PolicyKind {
    Lcbfu,
    Lru,
    Lfu,
    Fifo,
}

impl PolicyKind {
    pub const ALL: [PolicyKind; 4] = [PolicyKind::Lcbfu, PolicyKind::Lru, PolicyKind::Lfu, PolicyKind::Fifo];

    pub fn name(self) -> &'static str {
        match self {
            PolicyKind::Lcbfu => "lcbfu",
            PolicyKind::Lru => "lru",
            PolicyKind::Lfu => "lfu",
            PolicyKind::Fifo => "fifo",
        }
    }
}

impl fmt::Display for PolicyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for PolicyKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "lcbfu" => Ok(PolicyKind::Lcbfu),
            "lru" => Ok(PolicyKind::Lru),
            "lfu" => Ok(PolicyKind::Lfu),
            "fifo" => Ok(PolicyKind::Fifo),
            other => Err(Error::InvalidConfig(format!(
                "unknown policy `{other}` (expected lcbfu, lru, lfu or fifo)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CacheEntryMeta {
    pub prompt_id: String,
    pub k: u32,
    pub freq: u64,
    pub last_access: u64,
    pub insert_seq: u64,
    pub present: bool,
}

pub fn lcbfu_score(meta: &CacheEntryMeta) -> u64 {
    meta.freq * meta.k as u64
}

/// Primary eviction score of `meta` under `kind`; smaller is evicted first.
pub fn policy_score(kind: PolicyKind, meta: &CacheEntryMeta) -> u64 {
    match kind {
        PolicyKind::Lcbfu => lcbfu_score(meta),
        PolicyKind::Lru => meta.last_access,
        PolicyKind::Lfu => meta.freq,
        PolicyKind::Fifo => meta.insert_seq,
    }
}

/// Total eviction order of two items under `kind`.
pub fn eviction_order(kind: PolicyKind, a: &CacheEntryMeta, b: &CacheEntryMeta) -> Ordering {
    policy_score(kind, a)
        .cmp(&policy_score(kind, b))
        .then(a.insert_seq.cmp(&b.insert_seq))
        .then_with(|| a.prompt_id.cmp(&b.prompt_id))
        .then(a.k.cmp(&b.k))
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvictedItem {
    pub prompt_id: String,
    pub k: u32,
    pub score: u64,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AdmitOutcome {
    pub evicted: Vec<EvictedItem>,
    /// Prompts left with no cached state; their embeddings must leave the index.
    pub dirty: Vec<String>,
}

pub struct CachePolicy {
    kind: PolicyKind,
    capacity: usize,
    slots: Vec<Option<CacheEntryMeta>>,
    free_slots: Vec<usize>,
    lookup: HashMap<(String, u32), usize>,
    heap: Vec<usize>,
    heap_pos: Vec<usize>,
    clock: u64,
    next_seq: u64,
    evictions: u64,
}

impl CachePolicy {
    pub fn new(kind: PolicyKind, capacity: usize, n_steps_per_prompt: usize) -> Result<Self> {
        if capacity < n_steps_per_prompt {
            return Err(Error::InvalidConfig(format!(
                "capacity of {capacity} items cannot hold one prompt's {n_steps_per_prompt} states"
            )));
        }
        Ok(CachePolicy {
            kind,
            capacity,
            slots: Vec::new(),
            free_slots: Vec::new(),
            lookup: HashMap::new(),
            heap: Vec::new(),
            heap_pos: Vec::new(),
            clock: 0,
            next_seq: 0,
            evictions: 0,
        })
    }

    pub fn kind(&self) -> PolicyKind {
        self.kind
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.heap.len()
    }

    pub fn is_empty(&self) -> bool {
        self.heap.is_empty()
    }

    pub fn total_evictions(&self) -> u64 {
        self.evictions
    }

    pub fn meta(&self, prompt_id: &str, k: u32) -> Option<&CacheEntryMeta> {
        self.lookup
            .get(&(prompt_id.to_string(), k))
            .and_then(|&s| self.slots[s].as_ref())
    }

    pub fn metas(&self) -> impl Iterator<Item = &CacheEntryMeta> {
        self.heap.iter().map(|&s| self.slot(s))
    }

    fn slot(&self, s: usize) -> &CacheEntryMeta {
        self.slots[s].as_ref().expect("heap references a live slot")
    }

    fn less(&self, a: usize, b: usize) -> bool {
        eviction_order(self.kind, self.slot(a), self.slot(b)) == Ordering::Less
    }

    fn swap(&mut self, i: usize, j: usize) {
        self.heap.swap(i, j);
        self.heap_pos[self.heap[i]] = i;
        self.heap_pos[self.heap[j]] = j;
    }

    fn sift_up(&mut self, mut i: usize) {
        while i > 0 {
            let parent = (i - 1) / 2;
            if !self.less(self.heap[i], self.heap[parent]) {
                break;
            }
            self.swap(i, parent);
            i = parent;
        }
    }

    fn sift_down(&mut self, mut i: usize) {
        loop {
            let (l, r) = (2 * i + 1, 2 * i + 2);
            let mut m = i;
            if l < self.heap.len() && self.less(self.heap[l], self.heap[m]) {
                m = l;
            }
            if r < self.heap.len() && self.less(self.heap[r], self.heap[m]) {
                m = r;
            }
            if m == i {
                break;
            }
            self.swap(i, m);
            i = m;
        }
    }

    fn push(&mut self, meta: CacheEntryMeta) {
        let key = (meta.prompt_id.clone(), meta.k);
        let s = match self.free_slots.pop() {
            Some(s) => {
                self.slots[s] = Some(meta);
                s
            }
            None => {
                self.slots.push(Some(meta));
                self.heap_pos.push(0);
                self.slots.len() - 1
            }
        };
        self.lookup.insert(key, s);
        self.heap.push(s);
        self.heap_pos[s] = self.heap.len() - 1;
        self.sift_up(self.heap.len() - 1);
    }

    fn remove_slot(&mut self, s: usize) -> CacheEntryMeta {
        let i = self.heap_pos[s];
        let last = self.heap.len() - 1;
        self.swap(i, last);
        self.heap.pop();
        if i < self.heap.len() {
            self.sift_down(i);
            self.sift_up(i);
        }
        let mut meta = self.slots[s].take().expect("removing a live slot");
        self.free_slots.push(s);
        self.lookup.remove(&(meta.prompt_id.clone(), meta.k));
        meta.present = false;
        meta
    }

    /// Registers an access to a cached item and returns its LCBFU score.
    pub fn record_access(&mut self, prompt_id: &str, k: u32) -> Result<u64> {
        let &s = self
            .lookup
            .get(&(prompt_id.to_string(), k))
            .ok_or_else(|| Error::MissingEntry {
                prompt_id: prompt_id.to_string(),
                k,
            })?;
        self.clock += 1;
        let clock = self.clock;
        let meta = self.slots[s].as_mut().expect("lookup references a live slot");
        meta.freq += 1;
        meta.last_access = clock;
        let score = lcbfu_score(meta);
        // Keys only grow on access.
        self.sift_down(self.heap_pos[s]);
        Ok(score)
    }

    /// The `n` items that would be evicted next, in eviction order.
    pub fn victims(&self, n: usize) -> Result<Vec<CacheEntryMeta>> {
        if n > self.heap.len() {
            return Err(Error::NotEnoughItems {
                requested: n,
                available: self.heap.len(),
            });
        }
        struct Candidate<'a> {
            kind: PolicyKind,
            meta: &'a CacheEntryMeta,
            pos: usize,
        }
        impl PartialEq for Candidate<'_> {
            fn eq(&self, other: &Self) -> bool {
                self.cmp(other) == Ordering::Equal
            }
        }
        impl Eq for Candidate<'_> {}
        impl PartialOrd for Candidate<'_> {
            fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
                Some(self.cmp(other))
            }
        }
        impl Ord for Candidate<'_> {
            fn cmp(&self, other: &Self) -> Ordering {
                eviction_order(self.kind, self.meta, other.meta)
            }
        }
        let mut out = Vec::with_capacity(n);
        let mut frontier = BinaryHeap::new();
        let candidate = |pos: usize| {
            Reverse(Candidate {
                kind: self.kind,
                meta: self.slot(self.heap[pos]),
                pos,
            })
        };
        if n > 0 {
            frontier.push(candidate(0));
        }
        while out.len() < n {
            let Reverse(c) = frontier.pop().expect("frontier covers remaining items");
            for child in [2 * c.pos + 1, 2 * c.pos + 2] {
                if child < self.heap.len() {
                    frontier.push(candidate(child));
                }
            }
            out.push(c.meta.clone());
        }
        Ok(out)
    }

    /// Inserts a prompt's full state set, evicting `|states|` items first
    /// when free space is short.
    pub fn admit(
        &mut self,
        prompt_id: &str,
        states: BTreeMap<u32, LatentState>,
        store: &mut StateStore,
    ) -> Result<AdmitOutcome> {
        let expected = store.steps().as_slice();
        if !states.keys().copied().eq(expected.iter().copied()) {
            return Err(Error::IncompleteStates {
                expected: expected.to_vec(),
                actual: states.keys().copied().collect(),
            });
        }
        if let Some(&k) = states
            .keys()
            .find(|&&k| self.lookup.contains_key(&(prompt_id.to_string(), k)))
        {
            return Err(Error::DuplicatePrompt(format!("{prompt_id} (step {k})")));
        }
        let mut outcome = AdmitOutcome::default();
        let free = self.capacity.saturating_sub(self.heap.len());
        if free < states.len() {
            let n = states.len().min(self.heap.len());
            for _ in 0..n {
                let s = self.heap[0];
                let meta = self.remove_slot(s);
                self.evictions += 1;
                store.delete_state(&meta.prompt_id, meta.k)?;
                if store.available_ks(&meta.prompt_id).is_empty() && !outcome.dirty.contains(&meta.prompt_id) {
                    outcome.dirty.push(meta.prompt_id.clone());
                }
                outcome.evicted.push(EvictedItem {
                    score: policy_score(self.kind, &meta),
                    prompt_id: meta.prompt_id,
                    k: meta.k,
                });
            }
        }
        self.clock += 1;
        for (k, state) in states {
            store.put_state(prompt_id, k, state)?;
            let meta = CacheEntryMeta {
                prompt_id: prompt_id.to_string(),
                k,
                freq: 0,
                last_access: self.clock,
                insert_seq: self.next_seq,
                present: true,
            };
            self.next_seq += 1;
            self.push(meta);
        }
        Ok(outcome)
    }

    /// Evicts one specific item; returns the prompt id if it became dirty.
    pub fn force_evict(&mut self, prompt_id: &str, k: u32, store: &mut StateStore) -> Result<Option<String>> {
        let &s = self
            .lookup
            .get(&(prompt_id.to_string(), k))
            .ok_or_else(|| Error::MissingEntry {
                prompt_id: prompt_id.to_string(),
                k,
            })?;
        self.remove_slot(s);
        self.evictions += 1;
        store.delete_state(prompt_id, k)?;
        Ok(store.available_ks(prompt_id).is_empty().then(|| prompt_id.to_string()))
    }
}
