//! Similarity-to-K threshold maps: offline profiling and runtime lookup.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backend::{DiffusionBackend, UNREACHABLE};
use crate::domain::{cosine_similarity, random_unit_vector, vector_at_similarity, Embedding, LatentState, StepSet};
use crate::error::{Error, Result};

/// Two reconditioned outputs closer than this are considered identical.
const FROZEN_TOLERANCE: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Threshold {
    pub k: u32,
    pub min_sim: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimKMap {
    pub alpha: f64,
    pub thresholds: Vec<Threshold>,
}

impl SimKMap {
    pub fn new(alpha: f64, thresholds: Vec<Threshold>) -> Result<Self> {
        let map = SimKMap { alpha, thresholds };
        map.validate()?;
        Ok(map)
    }

    /// The hand-tuned map shipped with the original heuristic.
    pub fn reference() -> Self {
        SimKMap {
            alpha: 0.9,
            thresholds: [(5, 0.65), (10, 0.75), (15, 0.85), (20, 0.9), (25, 0.95)]
                .into_iter()
                .map(|(k, min_sim)| Threshold { k, min_sim })
                .collect(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.thresholds.is_empty() {
            return Err(Error::InvalidConfig("threshold map is empty".into()));
        }
        for w in self.thresholds.windows(2) {
            if w[0].k >= w[1].k {
                return Err(Error::InvalidConfig(
                    "threshold map steps must be strictly increasing".into(),
                ));
            }
            if w[0].min_sim > w[1].min_sim {
                return Err(Error::InvalidConfig(format!(
                    "threshold at K={} ({}) exceeds the one at K={} ({})",
                    w[0].k, w[0].min_sim, w[1].k, w[1].min_sim
                )));
            }
        }
        Ok(())
    }

    pub fn steps(&self) -> Vec<u32> {
        self.thresholds.iter().map(|t| t.k).collect()
    }

    pub fn threshold(&self, k: u32) -> Option<f64> {
        self.thresholds.iter().find(|t| t.k == k).map(|t| t.min_sim)
    }

    pub fn is_reachable(&self, k: u32) -> bool {
        self.threshold(k).is_some_and(|s| s <= 1.0)
    }

    /// Largest K whose threshold `s` strictly exceeds; 0 when none does.
    pub fn select_k(&self, s: f64) -> u32 {
        self.select_k_with_offset(s, 0)
    }

    /// Like [`select_k`](Self::select_k), then moves `offset` buckets up,
    /// stopping below any unreachable step. A miss stays a miss.
    pub fn select_k_with_offset(&self, s: f64, offset: u32) -> u32 {
        let Some(idx) = self.thresholds.iter().rposition(|t| s > t.min_sim) else {
            return 0;
        };
        let mut idx = idx;
        for _ in 0..offset {
            match self.thresholds.get(idx + 1) {
                Some(t) if t.min_sim <= 1.0 => idx += 1,
                _ => break,
            }
        }
        self.thresholds[idx].k
    }
}

/// Largest available step not exceeding `k_star`.
pub fn resolve_k(k_star: u32, available: &[u32]) -> Option<u32> {
    available.iter().copied().filter(|&k| k <= k_star).max()
}

/// A query prompt paired with a cached prompt and its captured states.
#[derive(Clone, Debug)]
pub struct ProfilePair {
    pub query: Embedding,
    pub cached: Embedding,
    pub states: BTreeMap<u32, LatentState>,
    pub similarity: f64,
}

impl ProfilePair {
    pub fn new<B: DiffusionBackend + ?Sized>(
        backend: &B,
        query: Embedding,
        cached: Embedding,
        seed: u64,
    ) -> Result<Self> {
        let similarity = cosine_similarity(&query, &cached)?.value();
        let states = backend.generate(&cached, "cached", seed)?.intermediates;
        Ok(ProfilePair {
            query,
            cached,
            states,
            similarity,
        })
    }
}

/// Pairs whose similarities sweep `[-1, 1]` in increments of `step`, with
/// `per_level` random pairs at each level.
pub fn sweep_pairs<B: DiffusionBackend + ?Sized>(
    backend: &B,
    dim: usize,
    step: f64,
    per_level: usize,
    seed: u64,
) -> Result<Vec<ProfilePair>> {
    if !(step > 0.0) {
        return Err(Error::InvalidConfig("sweep step must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let levels = (2.0 / step).round() as usize;
    let mut pairs = Vec::with_capacity((levels + 1) * per_level);
    for i in 0..=levels {
        let s = (-1.0 + i as f64 * step).min(1.0);
        for j in 0..per_level {
            let cached = random_unit_vector(&mut rng, dim);
            let query = vector_at_similarity(&mut rng, &cached, s);
            let pair_seed = seed.wrapping_add((i * per_level + j) as u64);
            pairs.push(ProfilePair::new(backend, query, cached, pair_seed)?);
        }
    }
    Ok(pairs)
}

/// Finds, for every step, the smallest similarity such that every pair at
/// or above it keeps quality above `alpha` times scratch quality.
pub fn profile<B: DiffusionBackend + ?Sized>(
    backend: &B,
    pairs: &[ProfilePair],
    steps: &StepSet,
    alpha: f64,
) -> Result<SimKMap> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::InvalidConfig(format!("alpha must lie in (0, 1), got {alpha}")));
    }
    if pairs.is_empty() {
        return Err(Error::InvalidConfig("profiling needs at least one pair".into()));
    }
    let mut scratch_quality = Vec::with_capacity(pairs.len());
    let mut targets = Vec::with_capacity(pairs.len());
    for (i, pair) in pairs.iter().enumerate() {
        let target = backend.target(&pair.query)?;
        let scratch = backend.generate(&pair.query, "query", i as u64)?;
        scratch_quality.push(backend.quality(&scratch.final_state.values, &target)?);
        targets.push(target);
    }
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    order.sort_by(|&a, &b| pairs[b].similarity.total_cmp(&pairs[a].similarity));

    let mut thresholds = Vec::with_capacity(steps.len());
    let mut running = f64::NEG_INFINITY;
    for k in steps.iter() {
        let mut passes = vec![false; pairs.len()];
        let mut responsive = false;
        for (i, pair) in pairs.iter().enumerate() {
            let state = pair.states.get(&k).ok_or(Error::MissingEntry {
                prompt_id: "profile pair".into(),
                k,
            })?;
            let hit = backend.recondition(&pair.query, state, k)?;
            let q = backend.quality(&hit.final_state.values, &targets[i])?;
            passes[i] = q > alpha * scratch_quality[i];
            if !responsive && pair.similarity < 1.0 - 1e-9 {
                let own = backend.recondition(&pair.cached, state, k)?;
                let diff = own
                    .final_state
                    .values
                    .iter()
                    .zip(&hit.final_state.values)
                    .map(|(a, b)| (a - b).abs())
                    .fold(0.0, f64::max);
                responsive = diff > FROZEN_TOLERANCE;
            }
        }
        let min_sim = if responsive {
            lowest_passing_suffix(pairs, &order, &passes).unwrap_or(UNREACHABLE)
        } else {
            UNREACHABLE
        };
        running = running.max(min_sim);
        thresholds.push(Threshold { k, min_sim: running });
    }
    Ok(SimKMap { alpha, thresholds })
}

/// Walks pairs from most to least similar, treating equal similarities as
/// one group, and returns the similarity of the last group reached before
/// the first failure.
fn lowest_passing_suffix(pairs: &[ProfilePair], order: &[usize], passes: &[bool]) -> Option<f64> {
    let mut best = None;
    let mut i = 0;
    while i < order.len() {
        let s = pairs[order[i]].similarity;
        let mut j = i;
        while j < order.len() && pairs[order[j]].similarity == s {
            if !passes[order[j]] {
                return best;
            }
            j += 1;
        }
        best = Some(s);
        i = j;
    }
    best
}
