//! Run metrics, the analytic model, and cost accounting.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::predictor::Confusion;
use crate::store::StoreStats;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RequestPath {
    ScratchPredictedMiss,
    ScratchNoMatch,
    CacheHit,
}

impl RequestPath {
    pub fn name(self) -> &'static str {
        match self {
            RequestPath::ScratchPredictedMiss => "scratch_predicted_miss",
            RequestPath::ScratchNoMatch => "scratch_no_match",
            RequestPath::CacheHit => "cache_hit",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LatencyParams {
    /// Seconds for a full N-step generation.
    pub compute_full: f64,
    pub search: f64,
    pub retrieval: f64,
}

impl Default for LatencyParams {
    fn default() -> Self {
        LatencyParams {
            compute_full: 8.59,
            search: 0.1,
            retrieval: 0.05,
        }
    }
}

impl LatencyParams {
    pub fn validate(&self) -> Result<()> {
        if [self.compute_full, self.search, self.retrieval]
            .iter()
            .any(|x| !(x.is_finite() && *x >= 0.0))
        {
            return Err(Error::InvalidConfig("latencies must be finite and non-negative".into()));
        }
        Ok(())
    }

    pub fn hit(&self, k: u32, n_steps: u32) -> f64 {
        self.search + self.compute_full * (n_steps - k) as f64 / n_steps as f64 + self.retrieval
    }

    pub fn search_miss(&self) -> f64 {
        self.search + self.compute_full
    }

    pub fn predicted_miss(&self) -> f64 {
        self.compute_full
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Prices {
    pub gpu_per_hour: f64,
    pub index_per_hour: f64,
    pub store_per_hour: f64,
}

/// Latency distribution summary in simulated seconds.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LatencySummary {
    pub mean: f64,
    pub p50: f64,
    pub p95: f64,
    pub p99: f64,
    pub total: f64,
}

impl LatencySummary {
    /// Nearest-rank percentiles.
    pub fn from_samples(samples: &[f64]) -> Self {
        if samples.is_empty() {
            return LatencySummary::default();
        }
        let mut sorted = samples.to_vec();
        sorted.sort_by(f64::total_cmp);
        let rank = |q: f64| {
            let r = (q * sorted.len() as f64).ceil() as usize;
            sorted[r.clamp(1, sorted.len()) - 1]
        };
        let total: f64 = samples.iter().sum();
        LatencySummary {
            mean: total / samples.len() as f64,
            p50: rank(0.5),
            p95: rank(0.95),
            p99: rank(0.99),
            total,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PredictorStats {
    pub enabled: bool,
    pub confusion: Confusion,
    pub precision: f64,
    pub recall: f64,
    pub retrains: u64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct QualityStats {
    pub hit_mean: Option<f64>,
    pub hit_min: Option<f64>,
    pub audited: u64,
    pub violations: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub total_requests: u64,
    pub paths: BTreeMap<RequestPath, u64>,
    pub hits_per_k: BTreeMap<u32, u64>,
    /// Probability that K was the deepest usable skip.
    pub h_opt: BTreeMap<u32, f64>,
    /// Probability of a hit at K or deeper.
    pub h: BTreeMap<u32, f64>,
    pub overall_hit_rate: f64,
    pub compute_savings: f64,
    pub savings_per_k: BTreeMap<u32, f64>,
    pub steps_executed: u64,
    pub n_steps: u32,
    pub latency: LatencySummary,
    /// Requests per simulated second.
    pub throughput: f64,
    /// Fraction of requests that paid for a search yet missed.
    pub wasted_search_fraction: f64,
    pub predictor: PredictorStats,
    pub quality: QualityStats,
    pub evictions: u64,
    pub dirty_removals: u64,
    pub cache: StoreStats,
    pub index_size: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub amortized_cost: Option<f64>,
    pub config: serde_json::Value,
}

impl RunReport {
    pub fn hit_count(&self) -> u64 {
        self.hits_per_k.values().sum()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Aligned human-readable summary.
    pub fn table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{:<28}{:>12}", "requests", self.total_requests);
        for (path, n) in &self.paths {
            let _ = writeln!(out, "{:<28}{:>12}", format!("  {}", path.name()), n);
        }
        let _ = writeln!(out, "{:<28}{:>12.4}", "overall hit-rate", self.overall_hit_rate);
        let _ = writeln!(out, "{:<28}{:>12.4}", "compute savings", self.compute_savings);
        let _ = writeln!(out, "{:<28}{:>12.4}", "mean latency (s)", self.latency.mean);
        let _ = writeln!(out, "{:<28}{:>12.4}", "p99 latency (s)", self.latency.p99);
        let _ = writeln!(out, "{:<28}{:>12.4}", "throughput (req/s)", self.throughput);
        let _ = writeln!(
            out,
            "{:<28}{:>12.4}",
            "wasted search fraction", self.wasted_search_fraction
        );
        if self.predictor.enabled {
            let _ = writeln!(out, "{:<28}{:>12.4}", "predictor precision", self.predictor.precision);
            let _ = writeln!(out, "{:<28}{:>12.4}", "predictor recall", self.predictor.recall);
        }
        if let Some(cost) = self.amortized_cost {
            let _ = writeln!(out, "{:<28}{:>12.6}", "cost per image", cost);
        }
        let _ = writeln!(
            out,
            "\n{:>4}{:>10}{:>10}{:>10}{:>10}",
            "K", "hits", "h_opt", "h", "saved"
        );
        for (k, hits) in &self.hits_per_k {
            let _ = writeln!(
                out,
                "{:>4}{:>10}{:>10.4}{:>10.4}{:>10.4}",
                k, hits, self.h_opt[k], self.h[k], self.savings_per_k[k]
            );
        }
        out
    }
}

/// `f_C = sum_K hits(K) * K / (total * N)`.
pub fn compute_savings(hits_per_k: &BTreeMap<u32, u64>, total: u64, n_steps: u32) -> f64 {
    if total == 0 {
        return 0.0;
    }
    let skipped: u64 = hits_per_k.iter().map(|(&k, &h)| h * k as u64).sum();
    skipped as f64 / (total * n_steps as u64) as f64
}

/// Contribution `h_opt(K) * K / N` of each step to the savings.
pub fn savings_per_k(hits_per_k: &BTreeMap<u32, u64>, total: u64, n_steps: u32) -> BTreeMap<u32, f64> {
    hits_per_k
        .iter()
        .map(|(&k, &h)| {
            let v = if total == 0 {
                0.0
            } else {
                (h * k as u64) as f64 / (total * n_steps as u64) as f64
            };
            (k, v)
        })
        .collect()
}

pub fn hit_rates(hits_per_k: &BTreeMap<u32, u64>, total: u64) -> (BTreeMap<u32, f64>, BTreeMap<u32, f64>) {
    let rate = |n: u64| if total == 0 { 0.0 } else { n as f64 / total as f64 };
    let h_opt = hits_per_k.iter().map(|(&k, &n)| (k, rate(n))).collect();
    let mut h = BTreeMap::new();
    let mut cumulative = 0;
    for (&k, &n) in hits_per_k.iter().rev() {
        cumulative += n;
        h.insert(k, rate(cumulative));
    }
    (h_opt, h)
}

pub fn overall_hit_rate(h_opt: &BTreeMap<u32, f64>) -> f64 {
    h_opt.values().sum()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DecayShape {
    Linear,
    Quadratic,
}

/// Optimal single skip depth and its savings when `h(K)` decays to zero at
/// `k_t`: linearly as `1 - K/K_T`, or quadratically as `1 - (K/K_T)^2`.
pub fn k_opt_analytic(shape: DecayShape, k_t: f64, n_steps: f64) -> (f64, f64) {
    match shape {
        DecayShape::Linear => (k_t / 2.0, k_t / (4.0 * n_steps)),
        DecayShape::Quadratic => (k_t / 3f64.sqrt(), 2.0 * k_t / (3.0 * 3f64.sqrt() * n_steps)),
    }
}

/// Cost per generated image given hourly prices and requests per second.
pub fn amortized_cost(throughput: f64, prices: &Prices) -> Result<f64> {
    if !(throughput > 0.0) {
        return Err(Error::ZeroThroughput);
    }
    let per_hour = throughput * 3600.0;
    Ok(prices.gpu_per_hour / per_hour + (prices.index_per_hour + prices.store_per_hour) / per_hour)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn savings_examples() {
        let hits = BTreeMap::from([(25, 8)]);
        assert!((compute_savings(&hits, 100, 50) - 0.04).abs() < 1e-15);
        assert_eq!(savings_per_k(&hits, 100, 50)[&25], 0.04);
        assert_eq!(compute_savings(&BTreeMap::new(), 100, 50), 0.0);
        assert_eq!(compute_savings(&BTreeMap::from([(25, 100)]), 100, 50), 0.5);
        assert_eq!(compute_savings(&BTreeMap::new(), 0, 50), 0.0);
    }

    #[test]
    fn hit_rate_relations() {
        let hits = BTreeMap::from([(5, 8), (10, 10), (15, 20), (20, 47), (25, 8)]);
        let (h_opt, h) = hit_rates(&hits, 100);
        assert!((overall_hit_rate(&h_opt) - 0.93).abs() < 1e-12);
        assert!((h[&5] - 0.93).abs() < 1e-12);
        assert!((h[&25] - 0.08).abs() < 1e-12);
        let ks: Vec<u32> = hits.keys().copied().collect();
        for w in ks.windows(2) {
            assert!(h[&w[0]] >= h[&w[1]]);
            assert!((h_opt[&w[0]] - (h[&w[0]] - h[&w[1]])).abs() < 1e-12);
        }
        assert_eq!(overall_hit_rate(&BTreeMap::new()), 0.0);
    }

    #[test]
    fn analytic_optimum() {
        assert_eq!(k_opt_analytic(DecayShape::Linear, 50.0, 50.0), (25.0, 0.25));
        let (k, f) = k_opt_analytic(DecayShape::Quadratic, 50.0, 50.0);
        assert!((f - 0.3849).abs() < 1e-4);
        assert!((k - 28.8675).abs() < 1e-4);
        assert!(f > 0.25);
        // Brute-force the continuous optimum of K * h(K) / N.
        for (shape, h) in [
            (DecayShape::Linear, (|x: f64| 1.0 - x) as fn(f64) -> f64),
            (DecayShape::Quadratic, |x: f64| 1.0 - x * x),
        ] {
            let (best_k, best_f) = (0..=50_000)
                .map(|i| {
                    let k = i as f64 / 1000.0;
                    (k, k * h(k / 50.0) / 50.0)
                })
                .fold((0.0, f64::MIN), |a, b| if b.1 > a.1 { b } else { a });
            let (k, f) = k_opt_analytic(shape, 50.0, 50.0);
            assert!((best_k - k).abs() < 2e-3 && (best_f - f).abs() < 1e-6);
        }
    }

    #[test]
    fn cost() {
        let p = Prices {
            gpu_per_hour: 3.6,
            ..Prices::default()
        };
        assert!((amortized_cost(2.0, &p).unwrap() - 3.6 / 7200.0).abs() < 1e-18);
        assert!(matches!(amortized_cost(0.0, &p), Err(Error::ZeroThroughput)));
        assert!(amortized_cost(3.0, &p).unwrap() < amortized_cost(2.0, &p).unwrap());
    }

    #[test]
    fn percentiles() {
        let s: Vec<f64> = (1..=100).map(|i| i as f64).collect();
        let l = LatencySummary::from_samples(&s);
        assert_eq!((l.p50, l.p95, l.p99), (50.0, 95.0, 99.0));
        assert_eq!(l.mean, 50.5);
        assert_eq!(LatencySummary::from_samples(&[]).total, 0.0);
    }

    #[test]
    fn latency_identities() {
        let l = LatencyParams::default();
        assert!((l.hit(25, 50) - (0.1 + 8.59 * 0.5 + 0.05)).abs() < 1e-15);
        assert_eq!(l.search_miss(), 0.1 + 8.59);
        assert_eq!(l.predicted_miss(), 8.59);
    }
}
