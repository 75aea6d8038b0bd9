//! Closed-form synthetic denoising backend.
//!
//! A latent has two channels of equal length. The conditioning channel
//! starts at the prompt's target and is pulled toward whichever target is
//! conditioning the remaining steps; the noise channel starts at a seeded
//! unit vector and decays toward zero. On the stacked vector `x = (c, n)`
//! with stacked target `G = (g, 0)` every step is `x <- G + beta * (x - G)`,
//! so the state after `K` steps is `G + beta^K * (x_N - G)`.
//!
//! Quality is scored on the conditioning channel only, which makes the
//! minimum safe similarity at each skip depth an exact closed form.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::domain::{l2_distance, normalize, random_unit_vector, Embedding, LatentState, StepSet};
use crate::error::{Error, Result};

/// Threshold reported for skip depths no similarity can satisfy.
pub const UNREACHABLE: f64 = 1.0 + f64::EPSILON;

/// Seed of the fixed projection used when embedding and latent dimensions differ.
const PROJECTION_SEED: u64 = 0x5eed_9a0b_c3d1_e7f2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackendConfig {
    pub n_steps: u32,
    pub decay: f64,
    /// Skip depths at or above this step cannot be reconditioned.
    pub freeze_step: u32,
    pub noise_seed: u64,
    pub embedding_dim: usize,
    pub latent_dim: usize,
}

impl Default for BackendConfig {
    fn default() -> Self {
        BackendConfig {
            n_steps: 50,
            decay: 0.96,
            freeze_step: 51,
            noise_seed: 0,
            embedding_dim: crate::domain::DEFAULT_EMBEDDING_DIM,
            latent_dim: crate::domain::DEFAULT_EMBEDDING_DIM,
        }
    }
}

impl BackendConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_steps == 0 {
            return Err(Error::InvalidConfig("n_steps must be at least 1".into()));
        }
        if !(self.decay > 0.0 && self.decay < 1.0) {
            return Err(Error::InvalidConfig(format!(
                "decay must lie in (0, 1), got {}",
                self.decay
            )));
        }
        if self.freeze_step == 0 {
            return Err(Error::InvalidConfig("freeze_step must be at least 1".into()));
        }
        if self.embedding_dim == 0 || self.latent_dim == 0 {
            return Err(Error::InvalidConfig("dimensions must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenerationResult {
    pub final_state: LatentState,
    pub intermediates: BTreeMap<u32, LatentState>,
    pub steps_executed: u32,
}

/// The contract a denoising model must satisfy to sit behind the pipeline.
pub trait DiffusionBackend: Send {
    fn n_steps(&self) -> u32;

    fn steps(&self) -> &StepSet;

    /// Latent-space fixed point the model converges to under `e`.
    fn target(&self, e: &Embedding) -> Result<Vec<f64>>;

    fn generate(&self, e: &Embedding, prompt_id: &str, seed: u64) -> Result<GenerationResult>;

    fn recondition(&self, e_new: &Embedding, state: &LatentState, k: u32) -> Result<GenerationResult>;

    fn quality(&self, final_values: &[f64], target: &[f64]) -> Result<f64>;
}

#[derive(Clone, Debug)]
pub struct SyntheticBackend {
    config: BackendConfig,
    steps: StepSet,
    projection: Option<Vec<Vec<f64>>>,
}

impl SyntheticBackend {
    pub fn new(config: BackendConfig, steps: StepSet) -> Result<Self> {
        config.validate()?;
        if steps.max() > config.n_steps {
            return Err(Error::StepOutOfRange {
                k: steps.max(),
                n_steps: config.n_steps,
            });
        }
        let projection = (config.embedding_dim != config.latent_dim).then(|| {
            let mut rng = ChaCha8Rng::seed_from_u64(PROJECTION_SEED);
            (0..config.latent_dim)
                .map(|_| {
                    (0..config.embedding_dim)
                        .map(|_| StandardNormal.sample(&mut rng))
                        .collect()
                })
                .collect()
        });
        Ok(SyntheticBackend {
            config,
            steps,
            projection,
        })
    }

    pub fn config(&self) -> &BackendConfig {
        &self.config
    }

    /// Seeded starting noise `x_N`.
    pub fn initial_noise(&self, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        random_unit_vector(&mut rng, self.config.latent_dim).into_vec()
    }

    /// Smallest cosine similarity above which reconditioning at `k` keeps
    /// quality above `alpha` times scratch quality.
    ///
    /// Scratch quality is exactly 1 and a hit reconditioned at `k` lands at
    /// distance `beta^(N-k) * sqrt(2(1-s))` from the new target, which
    /// solves to `s* = 1 - 2(1-alpha)^2 / beta^(2(N-k))`. Frozen depths
    /// return [`UNREACHABLE`].
    pub fn analytic_min_similarity(&self, k: u32, alpha: f64) -> f64 {
        if k >= self.config.freeze_step {
            return UNREACHABLE;
        }
        let residual = self
            .config
            .decay
            .powi((self.config.n_steps - k.min(self.config.n_steps)) as i32);
        let s = 1.0 - 2.0 * (1.0 - alpha).powi(2) / (residual * residual);
        s.max(-1.0)
    }

    fn check_embedding(&self, e: &Embedding) -> Result<()> {
        if e.dim() != self.config.embedding_dim {
            return Err(Error::DimensionMismatch {
                expected: self.config.embedding_dim,
                actual: e.dim(),
            });
        }
        Ok(())
    }

    /// Runs steps `from+1 ..= N`, capturing intermediates at configured steps.
    fn run(
        &self,
        mut cond: Vec<f64>,
        mut noise: Vec<f64>,
        pull: &[f64],
        from: u32,
        prompt_id: &str,
    ) -> GenerationResult {
        let beta = self.config.decay;
        let mut intermediates = BTreeMap::new();
        for step in from + 1..=self.config.n_steps {
            for (c, g) in cond.iter_mut().zip(pull) {
                *c = g + beta * (*c - g);
            }
            for n in noise.iter_mut() {
                *n *= beta;
            }
            if self.steps.contains(step) {
                intermediates.insert(
                    step,
                    LatentState {
                        values: cond.clone(),
                        noise: noise.clone(),
                        k: step,
                        source_prompt: prompt_id.to_string(),
                    },
                );
            }
        }
        GenerationResult {
            final_state: LatentState {
                values: cond,
                noise,
                k: 0,
                source_prompt: prompt_id.to_string(),
            },
            intermediates,
            steps_executed: self.config.n_steps - from,
        }
    }
}

impl DiffusionBackend for SyntheticBackend {
    fn n_steps(&self) -> u32 {
        self.config.n_steps
    }

    fn steps(&self) -> &StepSet {
        &self.steps
    }

    fn target(&self, e: &Embedding) -> Result<Vec<f64>> {
        self.check_embedding(e)?;
        match &self.projection {
            None => Ok(e.as_slice().to_vec()),
            Some(rows) => {
                let projected: Vec<f64> = rows.iter().map(|row| crate::domain::dot(row, e.as_slice())).collect();
                Ok(normalize(&projected)?.into_vec())
            }
        }
    }

    fn generate(&self, e: &Embedding, prompt_id: &str, seed: u64) -> Result<GenerationResult> {
        let g = self.target(e)?;
        let z = self.initial_noise(seed);
        Ok(self.run(g.clone(), z, &g, 0, prompt_id))
    }

    fn recondition(&self, e_new: &Embedding, state: &LatentState, k: u32) -> Result<GenerationResult> {
        if k > self.config.n_steps {
            return Err(Error::StepOutOfRange {
                k,
                n_steps: self.config.n_steps,
            });
        }
        if !self.steps.contains(k) {
            return Err(Error::UnknownStep { k });
        }
        if state.k != k {
            return Err(Error::StepMismatch {
                expected: k,
                actual: state.k,
            });
        }
        if state.values.len() != self.config.latent_dim || state.noise.len() != self.config.latent_dim {
            return Err(Error::DimensionMismatch {
                expected: self.config.latent_dim,
                actual: state.values.len(),
            });
        }
        let g_new = self.target(e_new)?;
        let pull = if k >= self.config.freeze_step {
            state.values.clone()
        } else {
            g_new
        };
        Ok(self.run(
            state.values.clone(),
            state.noise.clone(),
            &pull,
            k,
            &state.source_prompt,
        ))
    }

    fn quality(&self, final_values: &[f64], target: &[f64]) -> Result<f64> {
        if final_values.len() != target.len() {
            return Err(Error::DimensionMismatch {
                expected: target.len(),
                actual: final_values.len(),
            });
        }
        Ok(1.0 - l2_distance(final_values, target) / 2.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::{cosine_similarity, vector_at_similarity};
    use proptest::prelude::*;

    fn backend(freeze: u32) -> SyntheticBackend {
        SyntheticBackend::new(
            BackendConfig {
                freeze_step: freeze,
                ..BackendConfig::default()
            },
            StepSet::default(),
        )
        .unwrap()
    }

    fn embedding(seed: u64) -> Embedding {
        random_unit_vector(&mut ChaCha8Rng::seed_from_u64(seed), 64)
    }

    fn stacked(s: &LatentState) -> Vec<f64> {
        s.values.iter().chain(&s.noise).copied().collect()
    }

    #[test]
    fn target_is_identity_at_equal_dims() {
        let b = backend(51);
        let e = embedding(1);
        assert_eq!(b.target(&e).unwrap(), e.as_slice());
    }

    #[test]
    fn projected_target_is_deterministic_unit() {
        let cfg = BackendConfig {
            embedding_dim: 32,
            latent_dim: 48,
            ..BackendConfig::default()
        };
        let b = SyntheticBackend::new(cfg.clone(), StepSet::default()).unwrap();
        let b2 = SyntheticBackend::new(cfg, StepSet::default()).unwrap();
        let e = random_unit_vector(&mut ChaCha8Rng::seed_from_u64(9), 32);
        let g = b.target(&e).unwrap();
        assert_eq!(g.len(), 48);
        assert_eq!(g, b2.target(&e).unwrap());
        assert!((crate::domain::l2_norm(&g) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn trajectory_matches_closed_form() {
        let b = backend(51);
        let e = embedding(2);
        let g = b.target(&e).unwrap();
        let z = b.initial_noise(7);
        let x_n: Vec<f64> = g.iter().chain(&z).copied().collect();
        let target: Vec<f64> = g.iter().copied().chain(std::iter::repeat(0.0).take(64)).collect();
        let out = b.generate(&e, "p", 7).unwrap();
        assert_eq!(out.steps_executed, 50);
        assert_eq!(
            out.intermediates.keys().copied().collect::<Vec<_>>(),
            vec![5, 10, 15, 20, 25]
        );
        for (&k, state) in &out.intermediates {
            let bk = 0.96f64.powi(k as i32);
            let closed: Vec<f64> = target.iter().zip(&x_n).map(|(t, x)| t + bk * (x - t)).collect();
            let got = stacked(state);
            let diff = got.iter().zip(&closed).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            assert!(diff < 1e-9, "k={k} diff={diff}");
        }
        let dist = l2_distance(&stacked(&out.final_state), &target);
        let expected = 0.96f64.powi(50) * l2_distance(&x_n, &target);
        assert!((dist - expected).abs() < 1e-12);
    }

    #[test]
    fn zero_steps_is_initial_noise() {
        let b = SyntheticBackend::new(BackendConfig::default(), StepSet::new(vec![5]).unwrap()).unwrap();
        let z = b.initial_noise(3);
        assert!((crate::domain::l2_norm(&z) - 1.0).abs() < 1e-12);
        assert_eq!(z, b.initial_noise(3));
        assert_ne!(z, b.initial_noise(4));
    }

    #[test]
    fn self_recondition_reproduces_scratch() {
        let b = backend(51);
        let e = embedding(4);
        let scratch = b.generate(&e, "p", 11).unwrap();
        for (&k, state) in &scratch.intermediates {
            let r = b.recondition(&e, state, k).unwrap();
            assert_eq!(r.final_state.values, scratch.final_state.values);
            assert_eq!(r.final_state.noise, scratch.final_state.noise);
            assert_eq!(r.steps_executed, 50 - k);
        }
    }

    #[test]
    fn recondition_matches_closed_form() {
        let b = backend(51);
        let e_p = embedding(5);
        let e_c = vector_at_similarity(&mut ChaCha8Rng::seed_from_u64(6), &e_p, 0.8);
        let scratch = b.generate(&e_p, "p", 1).unwrap();
        let state = &scratch.intermediates[&15];
        let r = b.recondition(&e_c, state, 15).unwrap();
        let a = 0.96f64.powi(35);
        for i in 0..64 {
            let g = e_c.as_slice()[i];
            let c = g + a * (state.values[i] - g);
            let n = a * state.noise[i];
            assert!((r.final_state.values[i] - c).abs() < 1e-9);
            assert!((r.final_state.noise[i] - n).abs() < 1e-9);
        }
        // Quality follows 1 - beta^(N-K) * sqrt(2(1-s)) / 2.
        let q = b.quality(&r.final_state.values, e_c.as_slice()).unwrap();
        let expected = 1.0 - a * (2.0 * (1.0 - 0.8f64)).sqrt() / 2.0;
        assert!((q - expected).abs() < 1e-9);
    }

    #[test]
    fn recondition_rejects_bad_steps() {
        let b = backend(51);
        let e = embedding(8);
        let scratch = b.generate(&e, "p", 1).unwrap();
        let s5 = &scratch.intermediates[&5];
        assert!(matches!(b.recondition(&e, s5, 7), Err(Error::UnknownStep { k: 7 })));
        assert!(matches!(b.recondition(&e, s5, 60), Err(Error::StepOutOfRange { .. })));
        assert!(matches!(b.recondition(&e, s5, 10), Err(Error::StepMismatch { .. })));
    }

    #[test]
    fn frozen_recondition_ignores_new_prompt() {
        let b = backend(20);
        let e_p = embedding(10);
        let e_c = vector_at_similarity(&mut ChaCha8Rng::seed_from_u64(3), &e_p, 0.5);
        let scratch = b.generate(&e_p, "p", 1).unwrap();
        let r = b.recondition(&e_c, &scratch.intermediates[&20], 20).unwrap();
        assert_eq!(r.final_state.values, scratch.final_state.values);
        let q_hit = b.quality(&r.final_state.values, e_c.as_slice()).unwrap();
        let scratch_c = b.generate(&e_c, "c", 2).unwrap();
        let q0 = b.quality(&scratch_c.final_state.values, e_c.as_slice()).unwrap();
        assert!(q_hit < 0.9 * q0);
        // Below the freeze step the new prompt still takes effect.
        let r15 = b.recondition(&e_c, &scratch.intermediates[&15], 15).unwrap();
        assert_ne!(r15.final_state.values, scratch.final_state.values);
    }

    #[test]
    fn quality_extremes() {
        let b = backend(51);
        let e = embedding(12);
        let neg: Vec<f64> = e.as_slice().iter().map(|x| -x).collect();
        assert_eq!(b.quality(e.as_slice(), e.as_slice()).unwrap(), 1.0);
        assert!(b.quality(&neg, e.as_slice()).unwrap().abs() < 1e-12);
        assert!(b.quality(&[0.0; 3], e.as_slice()).is_err());
    }

    #[test]
    fn analytic_thresholds() {
        let b = backend(51);
        let expected = [(5, 0.212), (10, 0.476), (15, 0.652), (20, 0.768), (25, 0.846)];
        let mut prev = -1.0;
        for (k, s) in expected {
            let got = b.analytic_min_similarity(k, 0.9);
            assert!((got - s).abs() < 1e-3, "k={k} got={got}");
            assert!(got >= prev);
            prev = got;
        }
        assert_eq!(b.analytic_min_similarity(5, 1e-9), -1.0);
        assert_eq!(backend(20).analytic_min_similarity(20, 0.9), UNREACHABLE);
        assert_eq!(backend(20).analytic_min_similarity(25, 0.9), UNREACHABLE);
    }

    #[test]
    fn config_validation() {
        let bad = |f: fn(&mut BackendConfig)| {
            let mut c = BackendConfig::default();
            f(&mut c);
            c.validate().is_err()
        };
        assert!(bad(|c| c.decay = 1.0));
        assert!(bad(|c| c.decay = 0.0));
        assert!(bad(|c| c.n_steps = 0));
        assert!(bad(|c| c.freeze_step = 0));
        assert!(SyntheticBackend::new(
            BackendConfig {
                n_steps: 20,
                ..BackendConfig::default()
            },
            StepSet::default()
        )
        .is_err());
    }

    proptest! {
        #[test]
        fn determinism(seed in any::<u64>(), es in 0u64..1000) {
            let b = backend(51);
            let e = embedding(es);
            prop_assert_eq!(b.generate(&e, "p", seed).unwrap(), b.generate(&e, "p", seed).unwrap());
        }

        #[test]
        fn recondition_quality_non_increasing_in_k(s in -0.99f64..0.999, es in 0u64..1000) {
            let b = backend(51);
            let e_p = embedding(es);
            let e_c = vector_at_similarity(&mut ChaCha8Rng::seed_from_u64(!es), &e_p, s);
            let scratch = b.generate(&e_p, "p", es).unwrap();
            let mut prev = f64::INFINITY;
            for (&k, state) in &scratch.intermediates {
                let r = b.recondition(&e_c, state, k).unwrap();
                let q = b.quality(&r.final_state.values, e_c.as_slice()).unwrap();
                prop_assert!(q <= prev + 1e-12);
                prev = q;
            }
        }

        #[test]
        fn analytic_threshold_is_exact(k_idx in 0usize..5, es in 0u64..1000, eps in 1e-3f64..0.05) {
            let b = backend(51);
            let k = [5, 10, 15, 20, 25][k_idx];
            let s_star = b.analytic_min_similarity(k, 0.9);
            let e_p = embedding(es);
            let scratch = b.generate(&e_p, "p", es).unwrap();
            for (s, should_pass) in [((s_star + eps).min(1.0), true), (s_star - eps, false)] {
                let e_c = vector_at_similarity(&mut ChaCha8Rng::seed_from_u64(!es), &e_p, s);
                let s_real = cosine_similarity(&e_p, &e_c).unwrap().value();
                prop_assert!((s_real - s).abs() < 1e-9);
                let r = b.recondition(&e_c, &scratch.intermediates[&k], k).unwrap();
                let q = b.quality(&r.final_state.values, e_c.as_slice()).unwrap();
                let q0 = b.quality(&b.generate(&e_c, "c", 0).unwrap().final_state.values, e_c.as_slice()).unwrap();
                prop_assert_eq!(q > 0.9 * q0, should_pass);
            }
        }
    }
}
