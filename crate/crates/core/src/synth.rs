//! Seeded generators for training curves and clustered embeddings with known
//! ground truth. All draws come from [`FixtureRng`] in a fixed order, so a
//! spec and seed pin down the output exactly.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::density::EmbeddingSet;
use crate::laws::{LawError, LawParams};
use crate::rng::FixtureRng;
use crate::runs::{RunSeries, RunsError, TrainingRun};

/// Model sizes (parameters) of the reference 20M-7B experiment grid.
pub const REFERENCE_MODEL_SIZES: [u64; 11] = [
    20_000_000,
    47_000_000,
    113_000_000,
    241_000_000,
    487_000_000,
    736_000_000,
    936_000_000,
    1_330_000_000,
    2_510_000_000,
    4_700_000_000,
    7_030_000_000,
];

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid spec: {0}")]
    InvalidSpec(String),
    #[error(transparent)]
    Law(#[from] LawError),
    #[error(transparent)]
    Runs(#[from] RunsError),
}

pub type Result<T, E = SynthError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Noise {
    None,
    /// Loss multiplied by `exp(eps)`, `eps ~ Normal(0, sigma^2)`.
    Lognormal {
        sigma: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveSpec {
    pub law: LawParams,
    pub model_sizes: Vec<u64>,
    /// Token counts per model size, strictly increasing.
    pub token_checkpoints: Vec<Vec<u64>>,
    pub noise: Noise,
    pub seed: u64,
}

impl CurveSpec {
    /// Checkpoints spaced evenly in tokens up to `max_otr * N`, as a run
    /// logged at a fixed step interval would produce.
    pub fn even_checkpoints(
        law: LawParams,
        model_sizes: &[u64],
        max_otr: f64,
        checkpoints: usize,
        noise: Noise,
        seed: u64,
    ) -> Self {
        let token_checkpoints = model_sizes
            .iter()
            .map(|&n| {
                (1..=checkpoints)
                    .map(|j| (n as f64 * max_otr * j as f64 / checkpoints as f64).round() as u64)
                    .collect()
            })
            .collect();
        Self {
            law,
            model_sizes: model_sizes.to_vec(),
            token_checkpoints,
            noise,
            seed,
        }
    }

    fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(SynthError::InvalidSpec(m));
        if self.model_sizes.is_empty() {
            return bad("no model sizes".into());
        }
        if self.model_sizes.len() != self.token_checkpoints.len() {
            return bad(format!(
                "{} model sizes but {} checkpoint lists",
                self.model_sizes.len(),
                self.token_checkpoints.len()
            ));
        }
        if self.model_sizes.contains(&0) {
            return bad("model sizes must be positive".into());
        }
        for list in &self.token_checkpoints {
            if list.is_empty() || list[0] == 0 || list.windows(2).any(|w| w[1] <= w[0]) {
                return bad("checkpoints must be positive and strictly increasing".into());
            }
        }
        if let Noise::Lognormal { sigma } = self.noise {
            if !(sigma >= 0.0 && sigma.is_finite()) {
                return bad(format!("noise sigma must be non-negative, got {sigma}"));
            }
        }
        self.law.validate()?;
        Ok(())
    }
}

/// One run per model size (`run_id = "n<N>"`), one record per checkpoint.
pub fn gen_curves(spec: &CurveSpec) -> Result<RunSeries> {
    spec.validate()?;
    let mut rng = FixtureRng::new(spec.seed);
    let mut records = Vec::new();
    for (&n, checkpoints) in spec.model_sizes.iter().zip(&spec.token_checkpoints) {
        for (j, &d) in checkpoints.iter().enumerate() {
            let clean = spec.law.eval_nd(n as f64, d as f64)?;
            let loss = match spec.noise {
                Noise::None => clean,
                Noise::Lognormal { sigma } => clean * (sigma * rng.normal()).exp(),
            };
            records.push(TrainingRun::new(format!("n{n}"), n, d, loss).with_step(j as u64 + 1));
        }
    }
    let mut series = RunSeries::new(records)?;
    series.metadata.ground_truth = Some(spec.law);
    series.metadata.source = Some(format!("synth:seed={}", spec.seed));
    Ok(series)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlobCluster {
    pub n_samples: usize,
    pub centroid: Vec<f64>,
    /// Per-coordinate standard deviation.
    pub spread: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlobSpec {
    pub dim: usize,
    pub clusters: Vec<BlobCluster>,
    pub seed: u64,
}

impl BlobSpec {
    pub fn k(&self) -> usize {
        self.clusters.len()
    }

    fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(SynthError::InvalidSpec(m));
        if self.dim == 0 || self.clusters.is_empty() {
            return bad("need a positive dimension and at least one cluster".into());
        }
        for (i, c) in self.clusters.iter().enumerate() {
            if c.centroid.len() != self.dim {
                return bad(format!("centroid {i} has dimension {}", c.centroid.len()));
            }
            if !(c.spread > 0.0) || c.n_samples == 0 {
                return bad(format!("cluster {i} needs positive spread and samples"));
            }
            if self.clusters[..i].iter().any(|o| o.centroid == c.centroid) {
                return bad(format!("centroid {i} duplicates an earlier one"));
            }
        }
        Ok(())
    }
}

/// Isotropic Gaussian blobs, cluster by cluster; returns the generating labels.
pub fn gen_blobs(spec: &BlobSpec) -> Result<(EmbeddingSet, Vec<usize>)> {
    spec.validate()?;
    let mut rng = FixtureRng::new(spec.seed);
    let mut data = Vec::new();
    let mut labels = Vec::new();
    for (label, cluster) in spec.clusters.iter().enumerate() {
        for _ in 0..cluster.n_samples {
            for &mu in &cluster.centroid {
                data.push(rng.normal_with(mu, cluster.spread));
            }
            labels.push(label);
        }
    }
    let ids = (0..labels.len()).map(|i| i.to_string()).collect();
    let emb = EmbeddingSet::new(spec.dim, data, ids).map_err(|e| SynthError::InvalidSpec(e.to_string()))?;
    Ok((emb, labels))
}

/// Either kind of fixture spec, as loaded from JSON.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FixtureSpec {
    Curves(CurveSpec),
    Blobs(BlobSpec),
}
