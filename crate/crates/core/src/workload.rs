//! Prompt streams: trace replay, a synthetic clustered generator, and a
//! deterministic text embedding.

use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use log::warn;
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::domain::{dot, normalize, random_unit_vector, Embedding, PromptRecord};
use crate::error::{Error, Result};
use crate::pipeline::Pipeline;

/// Stable 64-bit hash of a string.
pub fn stable_hash(text: &str) -> u64 {
    let digest = Sha256::digest(text.as_bytes());
    u64::from_le_bytes(digest[..8].try_into().expect("sha256 digest has 32 bytes"))
}

/// Hash-seeded unit vector: equal texts give equal embeddings.
pub fn embed_text(text: &str, dim: usize) -> Result<Embedding> {
    if text.is_empty() {
        return Err(Error::EmptyText);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(stable_hash(text));
    Ok(random_unit_vector(&mut rng, dim))
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Trace {
    pub records: Vec<PromptRecord>,
    /// Lines that failed to parse.
    pub malformed: usize,
    /// Records carrying neither text nor embedding.
    pub skipped: usize,
    /// Whether timestamps had to be re-sorted.
    pub reordered: bool,
}

#[derive(Deserialize)]
struct TraceLine {
    id: String,
    #[serde(default)]
    user: String,
    ts_ms: i64,
    #[serde(default)]
    text: Option<String>,
    #[serde(default)]
    embedding: Option<Embedding>,
}

/// Reads a JSON Lines trace, returning its records in timestamp order.
pub fn replay_trace(path: &Path) -> Result<Trace> {
    let reader = BufReader::new(File::open(path)?);
    let mut trace = Trace::default();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed: TraceLine = match serde_json::from_str(&line) {
            Ok(p) => p,
            Err(e) => {
                warn!("{}:{}: skipping malformed record: {e}", path.display(), lineno + 1);
                trace.malformed += 1;
                continue;
            }
        };
        let text = parsed.text.filter(|t| !t.is_empty());
        match PromptRecord::new(parsed.id, parsed.user, parsed.ts_ms, text, parsed.embedding) {
            Ok(record) => trace.records.push(record),
            Err(e) => {
                warn!("{}:{}: {e}", path.display(), lineno + 1);
                trace.skipped += 1;
            }
        }
    }
    if trace.records.windows(2).any(|w| w[0].timestamp_ms > w[1].timestamp_ms) {
        warn!("{}: timestamps out of order; sorting", path.display());
        trace.reordered = true;
        trace.records.sort_by_key(|r| r.timestamp_ms);
    }
    Ok(trace)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub n_clusters: usize,
    pub zipf_exponent: f64,
    /// Per-coordinate Gaussian noise added to a cluster center.
    pub intra_cluster_noise: f64,
    pub n_users: usize,
    pub session_length: usize,
    pub repeat_prob: f64,
    pub total_prompts: usize,
    pub seed: u64,
    pub dim: usize,
    pub interarrival_ms: i64,
    /// Mean intra-cluster cosine to aim for; overrides the noise scale,
    /// which is then calibrated by sampling when the stream is built.
    pub target_similarity: Option<f64>,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_clusters: 200,
            zipf_exponent: 1.1,
            intra_cluster_noise: 0.1,
            n_users: 100,
            session_length: 8,
            repeat_prob: 0.1,
            total_prompts: 10_000,
            seed: 0,
            dim: crate::domain::DEFAULT_EMBEDDING_DIM,
            interarrival_ms: 1_000,
            target_similarity: None,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if self.n_clusters == 0 || self.n_users == 0 || self.session_length == 0 || self.dim == 0 {
            return fail("clusters, users, session length and dimension must be positive");
        }
        if !(self.zipf_exponent > 0.0) {
            return fail("zipf exponent must be positive");
        }
        if !(self.intra_cluster_noise >= 0.0) || !self.intra_cluster_noise.is_finite() {
            return fail("intra-cluster noise must be non-negative");
        }
        if !(0.0..=1.0).contains(&self.repeat_prob) {
            return fail("repeat probability must lie in [0, 1]");
        }
        if self.target_similarity.is_some_and(|t| !(t > 0.0 && t <= 1.0)) {
            return fail("target similarity must lie in (0, 1]");
        }
        Ok(())
    }
}

/// Deterministic clustered prompt stream with per-user sessions.
pub struct SynthStream {
    cfg: SynthConfig,
    rng: ChaCha8Rng,
    centers: Vec<Embedding>,
    popularity: WeightedIndex<f64>,
    last_by_user: Vec<Option<Embedding>>,
    user: usize,
    cluster: usize,
    left_in_session: usize,
    emitted: usize,
}

impl SynthStream {
    pub fn new(mut cfg: SynthConfig) -> Result<Self> {
        cfg.validate()?;
        if let Some(target) = cfg.target_similarity {
            let table = calibrate_noise(cfg.dim, &calibration_sigmas(), CALIBRATION_SAMPLES, cfg.seed);
            cfg.intra_cluster_noise = sigma_for_pairwise(&table, target)
                .ok_or_else(|| Error::InvalidConfig(format!("no noise scale reaches mean similarity {target}")))?;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let centers = (0..cfg.n_clusters)
            .map(|_| random_unit_vector(&mut rng, cfg.dim))
            .collect();
        let weights: Vec<f64> = (1..=cfg.n_clusters)
            .map(|r| (r as f64).powf(-cfg.zipf_exponent))
            .collect();
        let popularity =
            WeightedIndex::new(&weights).map_err(|e| Error::InvalidConfig(format!("cluster popularity: {e}")))?;
        Ok(SynthStream {
            last_by_user: vec![None; cfg.n_users],
            cfg,
            rng,
            centers,
            popularity,
            user: 0,
            cluster: 0,
            left_in_session: 0,
            emitted: 0,
        })
    }

    pub fn centers(&self) -> &[Embedding] {
        &self.centers
    }

    /// Noise scale in use, after any calibration.
    pub fn noise(&self) -> f64 {
        self.cfg.intra_cluster_noise
    }
}

/// `center` perturbed by isotropic Gaussian noise of scale `sigma`.
pub fn perturb<R: Rng + ?Sized>(rng: &mut R, center: &Embedding, sigma: f64) -> Embedding {
    loop {
        let v: Vec<f64> = center
            .as_slice()
            .iter()
            .map(|c| c + sigma * rng.sample::<f64, _>(StandardNormal))
            .collect();
        if let Ok(e) = normalize(&v) {
            return e;
        }
    }
}

impl Iterator for SynthStream {
    type Item = PromptRecord;

    fn next(&mut self) -> Option<PromptRecord> {
        if self.emitted >= self.cfg.total_prompts {
            return None;
        }
        if self.left_in_session == 0 {
            self.user = self.rng.random_range(0..self.cfg.n_users);
            self.cluster = self.popularity.sample(&mut self.rng);
            self.left_in_session = self.cfg.session_length;
        }
        self.left_in_session -= 1;
        let repeat = self.rng.random::<f64>() < self.cfg.repeat_prob;
        let embedding = match (&self.last_by_user[self.user], repeat) {
            (Some(prev), true) => prev.clone(),
            _ => perturb(&mut self.rng, &self.centers[self.cluster], self.cfg.intra_cluster_noise),
        };
        self.last_by_user[self.user] = Some(embedding.clone());
        let i = self.emitted;
        self.emitted += 1;
        Some(PromptRecord::with_embedding(
            format!("p{i:08}"),
            format!("u{:04}", self.user),
            i as i64 * self.cfg.interarrival_ms,
            embedding,
        ))
    }
}

pub fn synth_stream(cfg: SynthConfig) -> Result<SynthStream> {
    SynthStream::new(cfg)
}

/// Sampled relation between noise scale and intra-cluster similarity.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibrationRow {
    pub sigma: f64,
    /// Mean cosine between a perturbed prompt and its center.
    pub to_center: f64,
    /// Mean cosine between two prompts of the same cluster.
    pub pairwise: f64,
}

const CALIBRATION_SAMPLES: usize = 2_000;

/// Noise scales sampled when calibrating, 0 to 1 in steps of 0.01.
pub fn calibration_sigmas() -> Vec<f64> {
    (0..=100).map(|i| f64::from(i) * 0.01).collect()
}

pub fn calibrate_noise(dim: usize, sigmas: &[f64], samples: usize, seed: u64) -> Vec<CalibrationRow> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    sigmas
        .iter()
        .map(|&sigma| {
            let (mut to_center, mut pairwise) = (0.0, 0.0);
            for _ in 0..samples {
                let c = random_unit_vector(&mut rng, dim);
                let a = perturb(&mut rng, &c, sigma);
                let b = perturb(&mut rng, &c, sigma);
                to_center += dot(a.as_slice(), c.as_slice());
                pairwise += dot(a.as_slice(), b.as_slice());
            }
            CalibrationRow {
                sigma,
                to_center: to_center / samples as f64,
                pairwise: pairwise / samples as f64,
            }
        })
        .collect()
}

/// Interpolates the noise scale whose mean pairwise similarity is `target`.
/// Rows must be sorted by increasing sigma.
pub fn sigma_for_pairwise(table: &[CalibrationRow], target: f64) -> Option<f64> {
    table.windows(2).find_map(|w| {
        let (hi, lo) = (&w[0], &w[1]);
        if target <= hi.pairwise && target >= lo.pairwise {
            let t = if hi.pairwise == lo.pairwise {
                0.0
            } else {
                (hi.pairwise - target) / (hi.pairwise - lo.pairwise)
            };
            Some(hi.sigma + t * (lo.sigma - hi.sigma))
        } else {
            None
        }
    })
}

/// Generates and caches the first `n` prompts of `stream` without counting
/// them as requests; returns how many were consumed.
pub fn preload<I: Iterator<Item = PromptRecord>>(stream: &mut I, n: usize, pipeline: &mut Pipeline) -> Result<usize> {
    let mut count = 0;
    for p in stream.by_ref().take(n) {
        pipeline.preload_one(&p)?;
        count += 1;
    }
    pipeline.flush()?;
    Ok(count)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::cosine_similarity;
    use std::io::Write;

    #[test]
    fn embed_text_is_deterministic() {
        let a = embed_text("a red fox", 64).unwrap();
        assert_eq!(a, embed_text("a red fox", 64).unwrap());
        assert!((a.norm() - 1.0).abs() < 1e-12);
        assert!(matches!(embed_text("", 64), Err(Error::EmptyText)));
    }

    #[test]
    fn distinct_texts_are_nearly_orthogonal() {
        let mean: f64 = (0..1000)
            .map(|i| {
                let a = embed_text(&format!("prompt {i}"), 64).unwrap();
                let b = embed_text(&format!("other {i}"), 64).unwrap();
                cosine_similarity(&a, &b).unwrap().value()
            })
            .sum::<f64>()
            / 1000.0;
        assert!(mean.abs() < 0.05, "mean={mean}");
    }

    fn write_lines(lines: &[&str]) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        for l in lines {
            writeln!(f, "{l}").unwrap();
        }
        f
    }

    #[test]
    fn replay_orders_and_counts() {
        let f = write_lines(&[
            r#"{"id":"a","user":"u","ts_ms":30,"text":"x"}"#,
            r#"{"id":"b","user":"u","ts_ms":10,"embedding":[3.0,4.0]}"#,
            r#"{"id":"c","user":"u","ts_ms":20,"text":"y"}"#,
        ]);
        let t = replay_trace(f.path()).unwrap();
        let ids: Vec<_> = t.records.iter().map(|r| r.id.as_str()).collect();
        assert_eq!(ids, ["b", "c", "a"]);
        assert!(t.reordered);
        assert_eq!(t.records[0].embedding.as_ref().unwrap().as_slice(), &[0.6, 0.8]);
    }

    #[test]
    fn replay_skips_bad_lines() {
        let f = write_lines(&[
            r#"{"id":"a","user":"u","ts_ms":1,"text":"x"}"#,
            r#"{"id":"b","user":"u","ts_ms":2}"#,
            r#"not json"#,
            r#"{"id":"c","user":"u","ts_ms":3,"text":"x"}"#,
        ]);
        let t = replay_trace(f.path()).unwrap();
        assert_eq!(t.records.len(), 2);
        assert_eq!(t.skipped, 1);
        assert_eq!(t.malformed, 1);
        assert!(!t.reordered);
        assert_eq!(t.records[0].text, t.records[1].text, "duplicates survive replay");
        assert!(replay_trace(Path::new("/nonexistent/trace.jsonl")).is_err());
    }

    fn small(cfg: SynthConfig) -> Vec<PromptRecord> {
        synth_stream(cfg).unwrap().collect()
    }

    #[test]
    fn zero_noise_collapses_clusters() {
        let recs = small(SynthConfig {
            n_clusters: 1,
            intra_cluster_noise: 0.0,
            total_prompts: 50,
            ..SynthConfig::default()
        });
        let first = recs[0].embedding.clone().unwrap();
        assert!(recs
            .iter()
            .all(|r| (cosine_similarity(r.embedding.as_ref().unwrap(), &first)
                .unwrap()
                .value()
                - 1.0)
                .abs()
                < 1e-12));
    }

    #[test]
    fn extreme_zipf_uses_top_cluster() {
        let cfg = SynthConfig {
            zipf_exponent: 1e6,
            intra_cluster_noise: 0.0,
            total_prompts: 100,
            ..SynthConfig::default()
        };
        let stream = synth_stream(cfg.clone()).unwrap();
        let top = stream.centers()[0].clone();
        for r in stream {
            let s = cosine_similarity(r.embedding.as_ref().unwrap(), &top).unwrap().value();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn noise_lowers_similarity() {
        let table = calibrate_noise(64, &[0.05, 0.1, 0.3], 10_000, 1);
        assert!(table[0].pairwise > table[1].pairwise && table[1].pairwise > table[2].pairwise);
        assert!(table[0].to_center > table[1].to_center && table[1].to_center > table[2].to_center);
        let sigma = sigma_for_pairwise(&table, (table[0].pairwise + table[1].pairwise) / 2.0).unwrap();
        assert!(sigma > 0.05 && sigma < 0.1);
        assert_eq!(sigma_for_pairwise(&table, 1.5), None);
    }

    #[test]
    fn synth_is_deterministic_and_ordered() {
        let cfg = SynthConfig {
            total_prompts: 500,
            ..SynthConfig::default()
        };
        let a = small(cfg.clone());
        assert_eq!(a, small(cfg));
        assert_eq!(a.len(), 500);
        assert!(a.windows(2).all(|w| w[0].timestamp_ms <= w[1].timestamp_ms));
        assert_eq!(a[3].id, "p00000003");
    }

    #[test]
    fn repeats_reuse_previous_embedding() {
        let recs = small(SynthConfig {
            repeat_prob: 1.0,
            n_users: 1,
            total_prompts: 20,
            ..SynthConfig::default()
        });
        assert!(recs.windows(2).all(|w| w[0].embedding == w[1].embedding));
    }

    #[test]
    fn invalid_synth_config() {
        for cfg in [
            SynthConfig {
                zipf_exponent: 0.0,
                ..SynthConfig::default()
            },
            SynthConfig {
                intra_cluster_noise: -1.0,
                ..SynthConfig::default()
            },
            SynthConfig {
                repeat_prob: 1.5,
                ..SynthConfig::default()
            },
            SynthConfig {
                n_clusters: 0,
                ..SynthConfig::default()
            },
            SynthConfig {
                target_similarity: Some(0.0),
                ..SynthConfig::default()
            },
        ] {
            assert!(synth_stream(cfg).is_err());
        }
    }

    #[test]
    fn target_similarity_sets_intra_cluster_mean() {
        for target in [0.6, 0.8, 0.95] {
            let cfg = SynthConfig {
                n_clusters: 1,
                repeat_prob: 0.0,
                total_prompts: 2_000,
                target_similarity: Some(target),
                ..SynthConfig::default()
            };
            let stream = synth_stream(cfg).unwrap();
            assert!(stream.noise() > 0.0);
            let recs: Vec<_> = stream.collect();
            let sims: Vec<f64> = recs
                .chunks(2)
                .map(|p| {
                    cosine_similarity(p[0].embedding.as_ref().unwrap(), p[1].embedding.as_ref().unwrap())
                        .unwrap()
                        .value()
                })
                .collect();
            let mean = sims.iter().sum::<f64>() / sims.len() as f64;
            assert!((mean - target).abs() < 0.02, "target {target}, mean {mean}");
        }
    }
}
