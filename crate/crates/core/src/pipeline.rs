//! Request orchestration: predictor gate, index search, K selection, state
//! retrieval, reconditioning, and cache maintenance.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::backend::DiffusionBackend;
use crate::domain::{Embedding, PromptRecord, StepSet};
use crate::error::{Error, Result};
use crate::index::{IndexEntry, VectorIndex};
use crate::policy::{CachePolicy, PolicyKind};
use crate::predictor::{self, Confusion, PredictorConfig, PredictorModel};
use crate::report::{
    amortized_cost, compute_savings, hit_rates, overall_hit_rate, savings_per_k, LatencyParams, LatencySummary,
    PredictorStats, Prices, QualityStats, RequestPath, RunReport,
};
use crate::selector::{resolve_k, SimKMap};
use crate::store::{LatencyLedger, StateStore, DEFAULT_BYTES_PER_ITEM, DEFAULT_CAPACITY_ITEMS};
use crate::workload::{embed_text, stable_hash};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub latency: LatencyParams,
    pub alpha: f64,
    /// Buckets to move up from the selected K.
    pub aggressiveness: u32,
    pub policy: PolicyKind,
    pub capacity_items: usize,
    pub bytes_per_item: u64,
    pub match_predictor: bool,
    pub predictor: PredictorConfig,
    /// Admissions between index maintenance flushes.
    pub maintenance_batch: usize,
    /// Cache the states of scratch generations.
    pub admit_misses: bool,
    /// Also generate each hit from scratch and compare qualities.
    pub audit_quality: bool,
    pub prices: Option<Prices>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            latency: LatencyParams::default(),
            alpha: 0.9,
            aggressiveness: 0,
            policy: PolicyKind::Lcbfu,
            capacity_items: DEFAULT_CAPACITY_ITEMS,
            bytes_per_item: DEFAULT_BYTES_PER_ITEM,
            match_predictor: true,
            predictor: PredictorConfig::default(),
            maintenance_batch: 1,
            admit_misses: true,
            audit_quality: false,
            prices: None,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        self.latency.validate()?;
        self.predictor.validate()?;
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::InvalidConfig(format!(
                "alpha must lie in (0, 1), got {}",
                self.alpha
            )));
        }
        if self.maintenance_batch == 0 {
            return Err(Error::InvalidConfig("maintenance batch must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RequestOutcome {
    pub prompt_id: String,
    pub path: RequestPath,
    pub k_used: u32,
    /// K suggested by the threshold map before hole fallback.
    pub k_star: u32,
    pub similarity: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub matched_prompt: Option<String>,
    pub sim_latency: f64,
    pub latency: LatencyLedger,
    pub steps_executed: u32,
    pub quality: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub reference_quality: Option<f64>,
}

#[derive(Default)]
struct Maintenance {
    inserts: Vec<IndexEntry>,
    removals: BTreeSet<String>,
    pending_ops: usize,
}

#[derive(Default)]
struct Metrics {
    total: u64,
    paths: BTreeMap<RequestPath, u64>,
    hits_per_k: BTreeMap<u32, u64>,
    steps_executed: u64,
    latencies: Vec<f64>,
    wasted_searches: u64,
    confusion: Confusion,
    retrains: u64,
    hit_quality_sum: f64,
    hit_quality_min: Option<f64>,
    audited: u64,
    violations: u64,
    dirty_removals: u64,
    flushes: u64,
}

pub struct Pipeline {
    backend: Box<dyn DiffusionBackend>,
    map: SimKMap,
    config: PipelineConfig,
    index: VectorIndex,
    store: StateStore,
    policy: CachePolicy,
    model: Option<PredictorModel>,
    changes_since_train: usize,
    maintenance: Maintenance,
    metrics: Metrics,
    noise_seed: u64,
    embedding_dim: usize,
}

struct Match {
    prompt_id: String,
    similarity: f64,
    k_star: u32,
    k: Option<u32>,
}

impl Pipeline {
    pub fn new(
        backend: Box<dyn DiffusionBackend>,
        map: SimKMap,
        config: PipelineConfig,
        embedding_dim: usize,
        noise_seed: u64,
    ) -> Result<Self> {
        config.validate()?;
        map.validate()?;
        let steps: StepSet = backend.steps().clone();
        if map.steps() != steps.as_slice() {
            return Err(Error::InvalidConfig(format!(
                "threshold map covers steps {:?} but the backend captures {:?}",
                map.steps(),
                steps.as_slice()
            )));
        }
        if steps.max() >= backend.n_steps() {
            return Err(Error::InvalidConfig(format!(
                "largest cached step {} must be below the step count {}",
                steps.max(),
                backend.n_steps()
            )));
        }
        let policy = CachePolicy::new(config.policy, config.capacity_items, steps.len())?;
        let store = StateStore::new(steps.clone(), config.capacity_items, config.latency.retrieval)
            .with_bytes_per_item(config.bytes_per_item);
        let metrics = Metrics {
            hits_per_k: steps.iter().map(|k| (k, 0)).collect(),
            ..Metrics::default()
        };
        Ok(Pipeline {
            backend,
            map,
            config,
            index: VectorIndex::new(embedding_dim),
            store,
            policy,
            model: None,
            changes_since_train: 0,
            maintenance: Maintenance::default(),
            metrics,
            noise_seed,
            embedding_dim,
        })
    }

    /// Mirrors cached states to files under `root`.
    pub fn with_state_dir(mut self, root: impl Into<std::path::PathBuf>) -> Result<Self> {
        let store = std::mem::replace(&mut self.store, StateStore::new(StepSet::default(), 0, 0.0));
        self.store = store.with_disk(root)?;
        Ok(self)
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.config
    }

    pub fn map(&self) -> &SimKMap {
        &self.map
    }

    pub fn index(&self) -> &VectorIndex {
        &self.index
    }

    pub fn store(&self) -> &StateStore {
        &self.store
    }

    pub fn policy(&self) -> &CachePolicy {
        &self.policy
    }

    pub fn backend(&self) -> &dyn DiffusionBackend {
        self.backend.as_ref()
    }

    pub fn predictor_model(&self) -> Option<&PredictorModel> {
        self.model.as_ref()
    }

    /// Number of maintenance flushes applied so far.
    pub fn flushes(&self) -> u64 {
        self.metrics.flushes
    }

    pub fn pending_removals(&self) -> impl Iterator<Item = &str> {
        self.maintenance.removals.iter().map(String::as_str)
    }

    pub fn embedding_of(&self, p: &PromptRecord) -> Result<Embedding> {
        match (&p.embedding, &p.text) {
            (Some(e), _) => Ok(e.clone()),
            (None, Some(t)) => embed_text(t, self.embedding_dim),
            (None, None) => Err(Error::EmptyPrompt(p.id.clone())),
        }
    }

    fn request_seed(&self, prompt_id: &str) -> u64 {
        self.noise_seed ^ stable_hash(prompt_id)
    }

    /// Nearest cached prompt and the K it supports, without charging latency.
    fn lookup(&self, e: &Embedding) -> Result<Option<Match>> {
        let Some(top) = self.index.search(e, 1)?.into_iter().next() else {
            return Ok(None);
        };
        let similarity = top.score.value();
        let k_star = self.map.select_k_with_offset(similarity, self.config.aggressiveness);
        let k = if k_star == 0 {
            None
        } else {
            resolve_k(k_star, &self.store.available_ks(&top.entry.prompt_id))
        };
        Ok(Some(Match {
            prompt_id: top.entry.prompt_id,
            similarity,
            k_star,
            k,
        }))
    }

    pub fn handle_prompt(&mut self, p: &PromptRecord) -> Result<RequestOutcome> {
        let e = self.embedding_of(p)?;
        let target = self.backend.target(&e)?;
        let n = self.backend.n_steps();
        let lat = self.config.latency;
        let mut ledger = LatencyLedger::default();

        let gated = self.config.match_predictor;
        let predicted = !gated || self.model.as_ref().is_some_and(|m| m.predict(&e));
        let found = self.lookup(&e)?;
        if gated {
            let actual = found.as_ref().is_some_and(|m| m.k.is_some());
            self.metrics.confusion.record(predicted, actual);
        }

        let mut outcome = RequestOutcome {
            prompt_id: p.id.clone(),
            path: RequestPath::ScratchPredictedMiss,
            k_used: 0,
            k_star: 0,
            similarity: None,
            matched_prompt: None,
            sim_latency: 0.0,
            latency: ledger,
            steps_executed: n,
            quality: 0.0,
            reference_quality: None,
        };

        if predicted {
            ledger.search = lat.search;
            outcome.path = RequestPath::ScratchNoMatch;
            if let Some(m) = &found {
                outcome.similarity = Some(m.similarity);
                outcome.matched_prompt = Some(m.prompt_id.clone());
                outcome.k_star = m.k_star;
            }
            if let Some(Match {
                prompt_id, k: Some(k), ..
            }) = &found
            {
                let state = self
                    .store
                    .get_state(prompt_id, *k, &mut ledger)
                    .ok_or_else(|| Error::MissingEntry {
                        prompt_id: prompt_id.clone(),
                        k: *k,
                    })?;
                let result = self.backend.recondition(&e, &state, *k)?;
                ledger.compute = lat.compute_full * (n - k) as f64 / n as f64;
                self.policy.record_access(prompt_id, *k)?;
                outcome.path = RequestPath::CacheHit;
                outcome.k_used = *k;
                outcome.steps_executed = result.steps_executed;
                outcome.quality = self.backend.quality(&result.final_state.values, &target)?;
                if self.config.audit_quality {
                    let reference = self.backend.generate(&e, &p.id, self.request_seed(&p.id))?;
                    let q0 = self.backend.quality(&reference.final_state.values, &target)?;
                    outcome.reference_quality = Some(q0);
                    self.metrics.audited += 1;
                    if outcome.quality <= self.config.alpha * q0 {
                        self.metrics.violations += 1;
                    }
                }
            } else {
                self.metrics.wasted_searches += 1;
            }
        }

        if outcome.path != RequestPath::CacheHit {
            let result = self.backend.generate(&e, &p.id, self.request_seed(&p.id))?;
            ledger.compute = lat.compute_full;
            outcome.steps_executed = result.steps_executed;
            outcome.quality = self.backend.quality(&result.final_state.values, &target)?;
            if self.config.admit_misses {
                self.admit(&p.id, &e, result.intermediates)?;
            }
        }

        outcome.latency = ledger;
        outcome.sim_latency = ledger.total();
        self.record(&outcome);
        Ok(outcome)
    }

    fn record(&mut self, o: &RequestOutcome) {
        let m = &mut self.metrics;
        m.total += 1;
        *m.paths.entry(o.path).or_default() += 1;
        m.steps_executed += o.steps_executed as u64;
        m.latencies.push(o.sim_latency);
        if o.path == RequestPath::CacheHit {
            *m.hits_per_k.entry(o.k_used).or_default() += 1;
            m.hit_quality_sum += o.quality;
            m.hit_quality_min = Some(m.hit_quality_min.map_or(o.quality, |q: f64| q.min(o.quality)));
        }
    }

    fn is_cached(&self, prompt_id: &str) -> bool {
        self.index.contains(prompt_id)
            || !self.store.available_ks(prompt_id).is_empty()
            || self.maintenance.inserts.iter().any(|e| e.prompt_id == prompt_id)
    }

    fn admit(
        &mut self,
        prompt_id: &str,
        e: &Embedding,
        states: BTreeMap<u32, crate::domain::LatentState>,
    ) -> Result<()> {
        if self.is_cached(prompt_id) {
            return Ok(());
        }
        let outcome = self.policy.admit(prompt_id, states, &mut self.store)?;
        for dirty in outcome.dirty {
            self.mark_dirty(dirty);
        }
        self.maintenance
            .inserts
            .push(IndexEntry::new(prompt_id, e.clone(), self.store.steps().iter()));
        self.maintenance.pending_ops += 1;
        if self.maintenance.pending_ops >= self.config.maintenance_batch {
            self.flush()?;
        }
        Ok(())
    }

    fn mark_dirty(&mut self, prompt_id: String) {
        let before = self.maintenance.inserts.len();
        self.maintenance.inserts.retain(|e| e.prompt_id != prompt_id);
        if self.maintenance.inserts.len() == before {
            self.maintenance.removals.insert(prompt_id);
        }
    }

    /// Evicts one cached state directly, as an operator or test would.
    pub fn force_evict(&mut self, prompt_id: &str, k: u32) -> Result<()> {
        if let Some(dirty) = self.policy.force_evict(prompt_id, k, &mut self.store)? {
            self.mark_dirty(dirty);
        }
        Ok(())
    }

    /// Applies pending index changes and retrains the predictor if the
    /// index drifted far enough.
    pub fn flush(&mut self) -> Result<()> {
        let removals: Vec<String> = std::mem::take(&mut self.maintenance.removals).into_iter().collect();
        let removed = self.index.remove(&removals);
        self.metrics.dirty_removals += removed as u64;
        let inserts = std::mem::take(&mut self.maintenance.inserts);
        let inserted = self.index.insert(inserts)?;
        self.maintenance.pending_ops = 0;
        self.metrics.flushes += 1;
        self.changes_since_train += removed + inserted;
        if self.config.match_predictor {
            let stale = match &self.model {
                None => true,
                Some(m) => predictor::needs_retrain(
                    self.changes_since_train as f64 / m.trained_on_count.max(1) as f64,
                    self.config.predictor.retrain_fraction,
                ),
            };
            if stale && !self.index.is_empty() {
                self.model = Some(predictor::train(self.index.embeddings(), &self.config.predictor)?);
                self.changes_since_train = 0;
                self.metrics.retrains += 1;
            } else if self.index.is_empty() {
                self.model = None;
            }
        }
        Ok(())
    }

    /// Generates `p` from scratch and caches it without touching run metrics.
    pub fn preload_one(&mut self, p: &PromptRecord) -> Result<()> {
        let e = self.embedding_of(p)?;
        let result = self.backend.generate(&e, &p.id, self.request_seed(&p.id))?;
        self.admit(&p.id, &e, result.intermediates)
    }

    pub fn report(&self) -> RunReport {
        let m = &self.metrics;
        let n = self.backend.n_steps();
        let (h_opt, h) = hit_rates(&m.hits_per_k, m.total);
        let latency = LatencySummary::from_samples(&m.latencies);
        let throughput = if latency.total > 0.0 {
            m.total as f64 / latency.total
        } else {
            0.0
        };
        let hits: u64 = m.hits_per_k.values().sum();
        RunReport {
            total_requests: m.total,
            paths: m.paths.clone(),
            hits_per_k: m.hits_per_k.clone(),
            overall_hit_rate: overall_hit_rate(&h_opt),
            h_opt,
            h,
            compute_savings: compute_savings(&m.hits_per_k, m.total, n),
            savings_per_k: savings_per_k(&m.hits_per_k, m.total, n),
            steps_executed: m.steps_executed,
            n_steps: n,
            latency,
            throughput,
            wasted_search_fraction: if m.total == 0 {
                0.0
            } else {
                m.wasted_searches as f64 / m.total as f64
            },
            predictor: PredictorStats {
                enabled: self.config.match_predictor,
                confusion: m.confusion,
                precision: m.confusion.precision(),
                recall: m.confusion.recall(),
                retrains: m.retrains,
            },
            quality: QualityStats {
                hit_mean: (hits > 0).then(|| m.hit_quality_sum / hits as f64),
                hit_min: m.hit_quality_min,
                audited: m.audited,
                violations: m.violations,
            },
            evictions: self.policy.total_evictions(),
            dirty_removals: m.dirty_removals,
            cache: self.store.stats(),
            index_size: self.index.len(),
            amortized_cost: self
                .config
                .prices
                .as_ref()
                .and_then(|p| amortized_cost(throughput, p).ok()),
            config: serde_json::json!({
                "pipeline": self.config,
                "thresholds": self.map,
            }),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::{BackendConfig, SyntheticBackend};
    use crate::domain::{random_unit_vector, vector_at_similarity};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn pipeline(config: PipelineConfig) -> Pipeline {
        let backend = SyntheticBackend::new(BackendConfig::default(), StepSet::default()).unwrap();
        Pipeline::new(Box::new(backend), SimKMap::reference(), config, 64, 0).unwrap()
    }

    fn record(id: &str, e: Embedding) -> PromptRecord {
        PromptRecord::with_embedding(id, "u", 0, e)
    }

    #[test]
    fn empty_cache_is_a_search_miss_without_predictor() {
        let mut p = pipeline(PipelineConfig {
            match_predictor: false,
            ..PipelineConfig::default()
        });
        let e = random_unit_vector(&mut ChaCha8Rng::seed_from_u64(1), 64);
        let o = p.handle_prompt(&record("a", e)).unwrap();
        assert_eq!(o.path, RequestPath::ScratchNoMatch);
        assert_eq!(o.sim_latency, 0.1 + 8.59);
        assert_eq!(o.steps_executed, 50);
        assert_eq!(p.index().len(), 1);
    }

    #[test]
    fn hit_latency_and_access() {
        let mut p = pipeline(PipelineConfig {
            match_predictor: false,
            ..PipelineConfig::default()
        });
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let e = random_unit_vector(&mut rng, 64);
        p.handle_prompt(&record("a", e.clone())).unwrap();
        let q = vector_at_similarity(&mut rng, &e, 0.92);
        let o = p.handle_prompt(&record("b", q)).unwrap();
        assert_eq!(o.path, RequestPath::CacheHit);
        assert_eq!((o.k_used, o.k_star), (20, 20));
        assert!((o.sim_latency - (0.1 + 8.59 * 30.0 / 50.0 + 0.05)).abs() < 1e-12);
        assert_eq!(o.steps_executed, 30);
        assert_eq!(p.policy().meta("a", 20).unwrap().freq, 1);
        assert_eq!(p.index().len(), 1, "hits are not admitted");
    }

    #[test]
    fn predicted_miss_skips_search() {
        let mut p = pipeline(PipelineConfig::default());
        let e = random_unit_vector(&mut ChaCha8Rng::seed_from_u64(3), 64);
        let o = p.handle_prompt(&record("a", e)).unwrap();
        assert_eq!(o.path, RequestPath::ScratchPredictedMiss);
        assert_eq!(o.sim_latency, 8.59);
        assert!(p.predictor_model().is_some());
    }

    #[test]
    fn hole_fallback_uses_largest_available() {
        let mut p = pipeline(PipelineConfig {
            match_predictor: false,
            ..PipelineConfig::default()
        });
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let e = random_unit_vector(&mut rng, 64);
        p.handle_prompt(&record("a", e.clone())).unwrap();
        p.force_evict("a", 20).unwrap();
        p.force_evict("a", 15).unwrap();
        let o = p
            .handle_prompt(&record("b", vector_at_similarity(&mut rng, &e, 0.92)))
            .unwrap();
        assert_eq!((o.k_star, o.k_used), (20, 10));
        for k in [5, 10, 25] {
            p.force_evict("a", k).unwrap();
        }
        assert_eq!(p.pending_removals().collect::<Vec<_>>(), ["a"]);
        p.flush().unwrap();
        assert!(!p.index().contains("a"));
    }

    #[test]
    fn report_consistency() {
        let mut p = pipeline(PipelineConfig {
            match_predictor: false,
            ..PipelineConfig::default()
        });
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let base = random_unit_vector(&mut rng, 64);
        for i in 0..50 {
            let e = vector_at_similarity(&mut rng, &base, 0.9);
            p.handle_prompt(&record(&format!("p{i}"), e)).unwrap();
        }
        let r = p.report();
        assert_eq!(r.total_requests, 50);
        let skipped: u64 = r.hits_per_k.iter().map(|(&k, &n)| k as u64 * n).sum();
        assert_eq!(r.steps_executed + skipped, 50 * 50);
        assert!((r.overall_hit_rate - r.hit_count() as f64 / 50.0).abs() < 1e-12);
        assert!(r.hit_count() > 0);
    }

    #[test]
    fn rejects_mismatched_map() {
        let backend = SyntheticBackend::new(BackendConfig::default(), StepSet::new(vec![5, 10]).unwrap()).unwrap();
        assert!(Pipeline::new(
            Box::new(backend),
            SimKMap::reference(),
            PipelineConfig::default(),
            64,
            0
        )
        .is_err());
    }
}
