//! Value types shared by every component, plus the vector primitives they
//! rely on.
//!
//! Everything here is an immutable value object: cloning is the only way to
//! "modify" one, so they can be shared freely across threads.

use std::fmt;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default embedding dimension.
pub const DEFAULT_EMBEDDING_DIM: usize = 64;

/// Default step set: the denoising steps at which intermediate states are
/// captured and cached.
pub const DEFAULT_STEPS: [u32; 5] = [5, 10, 15, 20, 25];

/// Tolerance under which a vector is already considered unit-norm.
const UNIT_NORM_TOLERANCE: f64 = 1e-12;

/// A unit-norm prompt embedding; the key for similarity search.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct Embedding(Vec<f64>);

impl Embedding {
    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    pub fn norm(&self) -> f64 {
        l2_norm(&self.0)
    }
}

impl TryFrom<Vec<f64>> for Embedding {
    type Error = Error;

    /// Accepts an already-normalized vector verbatim (so snapshots restore
    /// bit-exactly) and normalizes anything else.
    fn try_from(v: Vec<f64>) -> Result<Self> {
        check_finite(&v)?;
        let norm = l2_norm(&v);
        if (norm - 1.0).abs() <= UNIT_NORM_TOLERANCE {
            Ok(Embedding(v))
        } else {
            normalize(&v)
        }
    }
}

impl From<Embedding> for Vec<f64> {
    fn from(e: Embedding) -> Self {
        e.0
    }
}

/// Cosine similarity between two embeddings, clamped to `[-1, 1]`.
#[derive(Clone, Copy, Debug, PartialEq, PartialOrd, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SimilarityScore(f64);

impl SimilarityScore {
    pub fn new(value: f64) -> Self {
        SimilarityScore(value.clamp(-1.0, 1.0))
    }

    pub fn value(self) -> f64 {
        self.0
    }
}

impl fmt::Display for SimilarityScore {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:.4}", self.0)
    }
}

/// One request in a prompt stream.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PromptRecord {
    pub id: String,
    pub user: String,
    #[serde(rename = "ts_ms")]
    pub timestamp_ms: i64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub embedding: Option<Embedding>,
}

impl PromptRecord {
    pub fn new(
        id: impl Into<String>,
        user: impl Into<String>,
        timestamp_ms: i64,
        text: Option<String>,
        embedding: Option<Embedding>,
    ) -> Result<Self> {
        let id = id.into();
        if text.is_none() && embedding.is_none() {
            return Err(Error::EmptyPrompt(id));
        }
        Ok(PromptRecord {
            id,
            user: user.into(),
            timestamp_ms,
            text,
            embedding,
        })
    }

    pub fn with_embedding(
        id: impl Into<String>,
        user: impl Into<String>,
        timestamp_ms: i64,
        embedding: Embedding,
    ) -> Self {
        PromptRecord {
            id: id.into(),
            user: user.into(),
            timestamp_ms,
            text: None,
            embedding: Some(embedding),
        }
    }
}

/// An intermediate (or final) denoising state.
///
/// The latent has two channels of equal length: `values` carries the
/// conditioning content that quality is scored on, and `noise` carries the
/// residual of the seeded starting noise.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatentState {
    pub values: Vec<f64>,
    pub noise: Vec<f64>,
    /// Number of denoising steps applied so far (0 for a fresh start).
    pub k: u32,
    pub source_prompt: String,
}

impl LatentState {
    pub fn dim(&self) -> usize {
        self.values.len()
    }
}

/// The ordered set of capture steps 𝒦.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<u32>", into = "Vec<u32>")]
pub struct StepSet(Vec<u32>);

impl StepSet {
    /// Builds a step set; entries must be positive and strictly increasing.
    pub fn new(steps: Vec<u32>) -> Result<Self> {
        if steps.is_empty() {
            return Err(Error::InvalidConfig("step set is empty".into()));
        }
        if steps[0] == 0 {
            return Err(Error::InvalidConfig("step set entries must be positive".into()));
        }
        if steps.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidConfig(format!(
                "step set must be strictly increasing, got {steps:?}"
            )));
        }
        Ok(StepSet(steps))
    }

    pub fn single(k: u32) -> Result<Self> {
        StepSet::new(vec![k])
    }

    pub fn contains(&self, k: u32) -> bool {
        self.0.binary_search(&k).is_ok()
    }

    pub fn iter(&self) -> impl DoubleEndedIterator<Item = u32> + '_ {
        self.0.iter().copied()
    }

    pub fn as_slice(&self) -> &[u32] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn min(&self) -> u32 {
        self.0[0]
    }

    pub fn max(&self) -> u32 {
        self.0[self.0.len() - 1]
    }
}

impl Default for StepSet {
    fn default() -> Self {
        StepSet(DEFAULT_STEPS.to_vec())
    }
}

impl TryFrom<Vec<u32>> for StepSet {
    type Error = Error;

    fn try_from(v: Vec<u32>) -> Result<Self> {
        StepSet::new(v)
    }
}

impl From<StepSet> for Vec<u32> {
    fn from(s: StepSet) -> Self {
        s.0
    }
}

pub fn l2_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn l2_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

fn check_finite(v: &[f64]) -> Result<()> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite)
    }
}

/// Scales `v` to unit L2 norm.
pub fn normalize(v: &[f64]) -> Result<Embedding> {
    check_finite(v)?;
    let norm = l2_norm(v);
    if norm == 0.0 || !norm.is_finite() {
        return Err(Error::DegenerateEmbedding);
    }
    Ok(Embedding(v.iter().map(|x| x / norm).collect()))
}

pub fn cosine_similarity(a: &Embedding, b: &Embedding) -> Result<SimilarityScore> {
    if a.dim() != b.dim() {
        return Err(Error::DimensionMismatch {
            expected: a.dim(),
            actual: b.dim(),
        });
    }
    Ok(SimilarityScore::new(dot(a.as_slice(), b.as_slice())))
}

/// Draws an isotropic unit vector.
pub fn random_unit_vector<R: Rng + ?Sized>(rng: &mut R, dim: usize) -> Embedding {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        if let Ok(e) = normalize(&v) {
            return e;
        }
    }
}

/// Returns a unit vector with cosine `similarity` to `anchor`, mixing in a
/// random direction orthogonal to it.
pub fn vector_at_similarity<R: Rng + ?Sized>(rng: &mut R, anchor: &Embedding, similarity: f64) -> Embedding {
    let s = similarity.clamp(-1.0, 1.0);
    let a = anchor.as_slice();
    let ortho = loop {
        let r = random_unit_vector(rng, anchor.dim());
        let proj = dot(r.as_slice(), a);
        let v: Vec<f64> = r.as_slice().iter().zip(a).map(|(x, y)| x - proj * y).collect();
        if let Ok(u) = normalize(&v) {
            break u;
        }
    };
    let c = (1.0 - s * s).max(0.0).sqrt();
    let v: Vec<f64> = a.iter().zip(ortho.as_slice()).map(|(x, y)| s * x + c * y).collect();
    normalize(&v).expect("combination of orthonormal vectors is non-degenerate")
}
