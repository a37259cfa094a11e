//! Cluster- and dataset-level density of embedding sets, plus greedy
//! density-based selection.
//!
//! A cluster with `N_i` members and mean member-to-centroid distance `r_i`
//! in `n` dimensions has density `N_i / V_n(r_i)`, where `V_n(r)` is the
//! volume of the Euclidean `n`-ball. The dataset density uses the same ball
//! volume with the weighted radius
//! `R = (1/K) * sum_i |c - c_i| / ln(rho_i + 1)`, `c` being the mean of the
//! centroids. Everything is evaluated in log space: `Gamma(n/2 + 1)` and
//! `r^n` leave the `f64` range for embedding sizes in the hundreds.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::FixtureRng;

/// Default floor on cluster radii, applied to singleton or duplicate clusters.
pub const RADIUS_FLOOR: f64 = 1e-12;

/// Floor on `ln(rho_i + 1)` in the weighted radius.
const LOG1P_FLOOR: f64 = 1e-12;

const MAGIC: &[u8; 4] = b"EMB1";

#[derive(Debug, Error)]
pub enum DensityError {
    #[error("k = {k} exceeds the number of samples ({n})")]
    KTooLarge { k: usize, n: usize },
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("all cluster centroids coincide; the weighted radius is zero")]
    DegenerateGeometry,
    #[error("cluster {0} has no members")]
    EmptyCluster(usize),
    #[error("selection target unreachable: {0}")]
    TargetUnreachable(String),
    #[error("malformed embedding file: {0}")]
    Format(String),
    #[error("failed to access {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T, E = DensityError> = std::result::Result<T, E>;

/// Row-major matrix of sample embeddings with per-row identifiers.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingSet {
    dim: usize,
    data: Vec<f64>,
    ids: Vec<String>,
}

impl EmbeddingSet {
    pub fn new(dim: usize, data: Vec<f64>, ids: Vec<String>) -> Result<Self> {
        if dim == 0 {
            return Err(DensityError::InvalidInput("dimension must be at least 1".into()));
        }
        if ids.is_empty() {
            return Err(DensityError::InvalidInput("embedding set is empty".into()));
        }
        if data.len() != dim * ids.len() {
            return Err(DensityError::InvalidInput(format!(
                "{} values do not form {} rows of dimension {dim}",
                data.len(),
                ids.len()
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(DensityError::InvalidInput(format!(
                "non-finite component in row {}",
                pos / dim
            )));
        }
        Ok(Self { dim, data, ids })
    }

    /// Rows with ids `"0"`, `"1"`, ...
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let dim = rows.first().map(Vec::len).unwrap_or(0);
        if rows.iter().any(|r| r.len() != dim) {
            return Err(DensityError::InvalidInput("rows differ in length".into()));
        }
        let ids = (0..rows.len()).map(|i| i.to_string()).collect();
        Self::new(dim, rows.concat(), ids)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.dim)
    }

    /// Every row scaled to unit Euclidean norm; zero rows are left as is.
    pub fn normalized(&self) -> Self {
        let mut data = self.data.clone();
        for row in data.chunks_exact_mut(self.dim) {
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm > 0.0 {
                row.iter_mut().for_each(|v| *v /= norm);
            }
        }
        Self {
            dim: self.dim,
            data,
            ids: self.ids.clone(),
        }
    }

    pub fn scaled(&self, s: f64) -> Self {
        Self {
            dim: self.dim,
            data: self.data.iter().map(|v| v * s).collect(),
            ids: self.ids.clone(),
        }
    }

    /// The given rows, in the given order.
    pub fn subset(&self, rows: &[usize]) -> Result<Self> {
        let data = rows.iter().flat_map(|&r| self.row(r).iter().copied()).collect();
        let ids = rows.iter().map(|&r| self.ids[r].clone()).collect();
        Self::new(self.dim, data, ids)
    }
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    dist2(a, b).sqrt()
}

fn dist2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Partition of an embedding set into `k` clusters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Clustering {
    pub k: usize,
    pub assignment: Vec<usize>,
    pub centroids: Vec<Vec<f64>>,
    pub grand_centroid: Vec<f64>,
}

impl Clustering {
    /// Builds a clustering whose centroids are the member means.
    pub fn from_assignment(emb: &EmbeddingSet, k: usize, assignment: Vec<usize>) -> Result<Self> {
        if assignment.len() != emb.len() {
            return Err(DensityError::InvalidInput(
                "assignment length differs from the number of rows".into(),
            ));
        }
        if let Some(&bad) = assignment.iter().find(|&&a| a >= k) {
            return Err(DensityError::InvalidInput(format!(
                "cluster index {bad} out of range for k = {k}"
            )));
        }
        let centroids = member_means(emb, k, &assignment);
        for (c, centroid) in centroids.iter().enumerate() {
            if centroid.is_none() {
                return Err(DensityError::EmptyCluster(c));
            }
        }
        Ok(Self::with_centroids(
            k,
            assignment,
            centroids.into_iter().map(Option::unwrap).collect(),
        ))
    }

    /// Uses the provided centroids as is.
    pub fn with_centroids(k: usize, assignment: Vec<usize>, centroids: Vec<Vec<f64>>) -> Self {
        let dim = centroids.first().map(Vec::len).unwrap_or(0);
        let mut grand = vec![0.0; dim];
        for c in &centroids {
            for (g, v) in grand.iter_mut().zip(c) {
                *g += v;
            }
        }
        grand.iter_mut().for_each(|g| *g /= k as f64);
        Self {
            k,
            assignment,
            centroids,
            grand_centroid: grand,
        }
    }

    /// Assignment restricted to `rows`, keeping the original centroids.
    pub fn subset(&self, rows: &[usize]) -> Self {
        Self {
            k: self.k,
            assignment: rows.iter().map(|&r| self.assignment[r]).collect(),
            centroids: self.centroids.clone(),
            grand_centroid: self.grand_centroid.clone(),
        }
    }

    pub fn members(&self, cluster: usize) -> Vec<usize> {
        (0..self.assignment.len())
            .filter(|&i| self.assignment[i] == cluster)
            .collect()
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.k];
        for &a in &self.assignment {
            sizes[a] += 1;
        }
        sizes
    }
}

fn member_means(emb: &EmbeddingSet, k: usize, assignment: &[usize]) -> Vec<Option<Vec<f64>>> {
    let mut sums = vec![vec![0.0; emb.dim()]; k];
    let mut counts = vec![0usize; k];
    for (row, &c) in emb.rows().zip(assignment) {
        counts[c] += 1;
        for (s, v) in sums[c].iter_mut().zip(row) {
            *s += v;
        }
    }
    sums.into_iter()
        .zip(counts)
        .map(|(s, n)| (n > 0).then(|| s.into_iter().map(|v| v / n as f64).collect()))
        .collect()
}

fn assign(emb: &EmbeddingSet, centroids: &[Vec<f64>]) -> Vec<usize> {
    (0..emb.len())
        .into_par_iter()
        .map(|i| {
            let row = emb.row(i);
            let mut best = 0;
            let mut best_d = f64::INFINITY;
            for (c, centroid) in centroids.iter().enumerate() {
                let d = dist2(row, centroid);
                if d < best_d {
                    best = c;
                    best_d = d;
                }
            }
            best
        })
        .collect()
}

/// Means of the current assignment; an empty cluster takes over the point
/// farthest from its own centroid among clusters with more than one member.
fn update_centroids(emb: &EmbeddingSet, k: usize, assignment: &mut [usize]) -> Vec<Vec<f64>> {
    loop {
        let means = member_means(emb, k, assignment);
        let Some(empty) = means.iter().position(Option::is_none) else {
            return means.into_iter().map(Option::unwrap).collect();
        };
        let mut counts = vec![0usize; k];
        for &a in assignment.iter() {
            counts[a] += 1;
        }
        let mut far = None;
        let mut far_d = -1.0;
        for (i, &a) in assignment.iter().enumerate() {
            if counts[a] < 2 {
                continue;
            }
            let d = dist2(emb.row(i), means[a].as_ref().unwrap());
            if d > far_d {
                far_d = d;
                far = Some(i);
            }
        }
        // k <= N guarantees a donor exists while some cluster is empty.
        let donor = far.expect("a cluster with at least two members");
        assignment[donor] = empty;
    }
}

fn kmeans_pp(emb: &EmbeddingSet, k: usize, rng: &mut FixtureRng) -> Vec<Vec<f64>> {
    let n = emb.len();
    let mut chosen = vec![false; n];
    let first = rng.index(n);
    chosen[first] = true;
    let mut centroids = vec![emb.row(first).to_vec()];
    let mut d2: Vec<f64> = (0..n).map(|i| dist2(emb.row(i), emb.row(first))).collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let target = rng.uniform() * total;
            let mut acc = 0.0;
            let mut pick = None;
            for (i, &w) in d2.iter().enumerate() {
                acc += w;
                if w > 0.0 && acc > target {
                    pick = Some(i);
                    break;
                }
            }
            // Rounding can leave the scan short of the target.
            pick.unwrap_or_else(|| d2.iter().rposition(|&w| w > 0.0).unwrap())
        } else {
            chosen.iter().position(|c| !c).expect("k <= N")
        };
        chosen[pick] = true;
        let row = emb.row(pick);
        for (i, d) in d2.iter_mut().enumerate() {
            *d = d.min(dist2(emb.row(i), row));
        }
        centroids.push(row.to_vec());
    }
    centroids
}

/// Lloyd's algorithm with k-means++ seeding. Deterministic for a fixed seed;
/// stops when assignments stop changing or after `max_iters` updates.
pub fn kmeans(emb: &EmbeddingSet, k: usize, seed: u64, max_iters: usize) -> Result<Clustering> {
    if k == 0 {
        return Err(DensityError::InvalidInput("k must be at least 1".into()));
    }
    if k > emb.len() {
        return Err(DensityError::KTooLarge { k, n: emb.len() });
    }
    let mut rng = FixtureRng::new(seed);
    let seeds = kmeans_pp(emb, k, &mut rng);
    let mut assignment = assign(emb, &seeds);
    let mut centroids = update_centroids(emb, k, &mut assignment);
    for _ in 0..max_iters {
        let next = assign(emb, &centroids);
        if next == assignment {
            break;
        }
        assignment = next;
        centroids = update_centroids(emb, k, &mut assignment);
    }
    Ok(Clustering::with_centroids(k, assignment, centroids))
}

/// `ln` of the density of `count` points spread over an `n`-ball of `radius`.
pub fn log_ball_density(count: f64, dim: usize, radius: f64) -> f64 {
    let n = dim as f64;
    count.ln() + libm::lgamma(n / 2.0 + 1.0) - (n / 2.0) * std::f64::consts::PI.ln() - n * radius.ln()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterDensity {
    pub cluster_id: usize,
    pub n_samples: usize,
    pub radius: f64,
    pub log_density: f64,
    /// The mean distance fell below the floor and was replaced by it.
    pub radius_floored: bool,
}

pub fn cluster_density(emb: &EmbeddingSet, clustering: &Clustering, cluster_id: usize) -> Result<ClusterDensity> {
    cluster_density_floored(emb, clustering, cluster_id, RADIUS_FLOOR)
}

pub fn cluster_density_floored(
    emb: &EmbeddingSet,
    clustering: &Clustering,
    cluster_id: usize,
    floor: f64,
) -> Result<ClusterDensity> {
    if cluster_id >= clustering.k {
        return Err(DensityError::InvalidInput(format!(
            "cluster {cluster_id} out of range for k = {}",
            clustering.k
        )));
    }
    let centroid = &clustering.centroids[cluster_id];
    let mut count = 0usize;
    let mut total = 0.0;
    for (row, &a) in emb.rows().zip(&clustering.assignment) {
        if a == cluster_id {
            count += 1;
            total += dist(row, centroid);
        }
    }
    if count == 0 {
        return Err(DensityError::EmptyCluster(cluster_id));
    }
    let mean = total / count as f64;
    let radius_floored = mean < floor;
    let radius = mean.max(floor);
    Ok(ClusterDensity {
        cluster_id,
        n_samples: count,
        radius,
        log_density: log_ball_density(count as f64, emb.dim(), radius),
        radius_floored,
    })
}

/// `ln(exp(x) + 1)` without overflow.
fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn weighted_radius(distances: &[f64], log_densities: &[f64]) -> f64 {
    let k = distances.len() as f64;
    distances
        .iter()
        .zip(log_densities)
        .map(|(&d, &ld)| d / softplus(ld).max(LOG1P_FLOOR))
        .sum::<f64>()
        / k
}

fn centroid_offsets(clustering: &Clustering) -> Result<Vec<f64>> {
    let offsets: Vec<f64> = clustering
        .centroids
        .iter()
        .map(|c| dist(c, &clustering.grand_centroid))
        .collect();
    let scale = clustering
        .centroids
        .iter()
        .flatten()
        .fold(1.0f64, |m, v| m.max(v.abs()));
    if offsets.iter().all(|&d| d <= 1e-12 * scale) {
        return Err(DensityError::DegenerateGeometry);
    }
    Ok(offsets)
}

/// Weighted dataset radius from the centroid offsets and per-cluster densities.
pub fn dataset_radius(clustering: &Clustering, per_cluster: &[ClusterDensity]) -> Result<f64> {
    if per_cluster.len() != clustering.k {
        return Err(DensityError::InvalidInput(format!(
            "{} cluster densities for k = {}",
            per_cluster.len(),
            clustering.k
        )));
    }
    let offsets = centroid_offsets(clustering)?;
    let mut log_densities = vec![f64::NAN; clustering.k];
    for cd in per_cluster {
        if cd.cluster_id >= clustering.k {
            return Err(DensityError::InvalidInput(format!(
                "cluster id {} out of range",
                cd.cluster_id
            )));
        }
        log_densities[cd.cluster_id] = cd.log_density;
    }
    if log_densities.iter().any(|v| v.is_nan()) {
        return Err(DensityError::InvalidInput(
            "per-cluster densities do not cover every cluster".into(),
        ));
    }
    Ok(weighted_radius(&offsets, &log_densities))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetDensityReport {
    pub weighted_radius: f64,
    pub log_density: f64,
    /// Raw density; `None` when it overflows `f64`.
    pub density: Option<f64>,
    pub density_overflow: bool,
    /// `rho^(1/n)`.
    pub normalized_density: f64,
    pub per_cluster: Vec<ClusterDensity>,
    pub k: usize,
    pub n: usize,
    pub n_total: usize,
}

pub fn dataset_density(emb: &EmbeddingSet, clustering: &Clustering) -> Result<DatasetDensityReport> {
    dataset_density_floored(emb, clustering, RADIUS_FLOOR)
}

pub fn dataset_density_floored(
    emb: &EmbeddingSet,
    clustering: &Clustering,
    floor: f64,
) -> Result<DatasetDensityReport> {
    if clustering.assignment.len() != emb.len() {
        return Err(DensityError::InvalidInput(
            "clustering does not match the embedding set".into(),
        ));
    }
    let per_cluster = (0..clustering.k)
        .map(|c| cluster_density_floored(emb, clustering, c, floor))
        .collect::<Result<Vec<_>>>()?;
    let radius = dataset_radius(clustering, &per_cluster)?;
    let log_density = log_ball_density(emb.len() as f64, emb.dim(), radius);
    let raw = log_density.exp();
    Ok(DatasetDensityReport {
        weighted_radius: radius,
        log_density,
        density: raw.is_finite().then_some(raw),
        density_overflow: !raw.is_finite(),
        normalized_density: (log_density / emb.dim() as f64).exp(),
        per_cluster,
        k: clustering.k,
        n: emb.dim(),
        n_total: emb.len(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "value", rename_all = "snake_case")]
pub enum SelectionTarget {
    /// Keep this fraction of samples, in (0, 1].
    Fraction(f64),
    /// Prune until the dataset log-density is at most this value.
    LogDensity(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Selection {
    pub retained_ids: Vec<String>,
    pub retained_rows: Vec<usize>,
    /// Removed rows, in removal order.
    pub removed_rows: Vec<usize>,
    pub log_density_before: f64,
    pub log_density_after: f64,
    /// Dataset log-density after each removal.
    pub trace: Vec<f64>,
}

struct ClusterState {
    /// Members sorted by distance to the centroid, then by row.
    queue: Vec<(f64, usize)>,
    next: usize,
    dist_sum: f64,
    log_density: f64,
}

impl ClusterState {
    fn remaining(&self) -> usize {
        self.queue.len() - self.next
    }
}

/// Greedy density-based pruning. Each step removes, from the cluster with the
/// largest log-density, the member closest to its centroid. Centroids stay
/// fixed; the pruned cluster's radius is updated incrementally. Ties go to
/// the lowest cluster index and the lowest row. Clusters are never emptied.
pub fn select_low_density(emb: &EmbeddingSet, clustering: &Clustering, target: SelectionTarget) -> Result<Selection> {
    select_low_density_floored(emb, clustering, target, RADIUS_FLOOR)
}

pub fn select_low_density_floored(
    emb: &EmbeddingSet,
    clustering: &Clustering,
    target: SelectionTarget,
    floor: f64,
) -> Result<Selection> {
    let total = emb.len();
    let dim = emb.dim();
    let keep = match target {
        SelectionTarget::Fraction(f) => {
            if !(f > 0.0 && f <= 1.0) {
                return Err(DensityError::InvalidInput(format!(
                    "fraction must lie in (0, 1], got {f}"
                )));
            }
            let keep = ((f * total as f64) - 1e-9).ceil().max(1.0) as usize;
            if keep < clustering.k {
                return Err(DensityError::TargetUnreachable(format!(
                    "keeping {keep} samples would empty some of the {} clusters",
                    clustering.k
                )));
            }
            Some(keep)
        }
        SelectionTarget::LogDensity(t) if t.is_nan() => {
            return Err(DensityError::InvalidInput("target log-density is NaN".into()))
        }
        SelectionTarget::LogDensity(_) => None,
    };

    let offsets = centroid_offsets(clustering)?;
    let mut states: Vec<ClusterState> = (0..clustering.k)
        .map(|_| ClusterState {
            queue: Vec::new(),
            next: 0,
            dist_sum: 0.0,
            log_density: 0.0,
        })
        .collect();
    for (i, &c) in clustering.assignment.iter().enumerate() {
        let d = dist(emb.row(i), &clustering.centroids[c]);
        states[c].queue.push((d, i));
        states[c].dist_sum += d;
    }
    for (c, s) in states.iter_mut().enumerate() {
        if s.queue.is_empty() {
            return Err(DensityError::EmptyCluster(c));
        }
        s.queue.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let count = s.queue.len() as f64;
        s.log_density = log_ball_density(count, dim, (s.dist_sum / count).max(floor));
    }

    let dataset_log = |states: &[ClusterState], retained: usize| {
        let lds: Vec<f64> = states.iter().map(|s| s.log_density).collect();
        log_ball_density(retained as f64, dim, weighted_radius(&offsets, &lds))
    };

    let before = dataset_log(&states, total);
    let mut current = before;
    let mut retained = total;
    let mut removed_rows = Vec::new();
    let mut trace = Vec::new();
    loop {
        let done = match (keep, target) {
            (Some(keep), _) => retained <= keep,
            (None, SelectionTarget::LogDensity(t)) => current <= t,
            _ => unreachable!(),
        };
        if done {
            break;
        }
        let densest =
            states
                .iter()
                .enumerate()
                .filter(|(_, s)| s.remaining() >= 2)
                .fold(None::<(usize, f64)>, |best, (c, s)| match best {
                    Some((_, ld)) if ld >= s.log_density => best,
                    _ => Some((c, s.log_density)),
                });
        let Some((c, _)) = densest else {
            return Err(DensityError::TargetUnreachable(format!(
                "every cluster is down to one member at log-density {current}"
            )));
        };
        let s = &mut states[c];
        let (d, row) = s.queue[s.next];
        s.next += 1;
        s.dist_sum = (s.dist_sum - d).max(0.0);
        let count = s.remaining() as f64;
        s.log_density = log_ball_density(count, dim, (s.dist_sum / count).max(floor));
        retained -= 1;
        removed_rows.push(row);
        current = dataset_log(&states, retained);
        trace.push(current);
    }

    let mut removed = vec![false; total];
    for &r in &removed_rows {
        removed[r] = true;
    }
    let retained_rows: Vec<usize> = (0..total).filter(|&i| !removed[i]).collect();
    Ok(Selection {
        retained_ids: retained_rows.iter().map(|&i| emb.ids()[i].clone()).collect(),
        retained_rows,
        removed_rows,
        log_density_before: before,
        log_density_after: current,
        trace,
    })
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DensityError + '_ {
    move |source| DensityError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Binary layout: `EMB1`, then `n` (dimension) and `N` (rows) as
/// little-endian `u64`, then `N * n` little-endian `f32`, row-major.
pub fn write_emb1(emb: &EmbeddingSet, mut w: impl Write) -> std::io::Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&(emb.dim() as u64).to_le_bytes())?;
    w.write_all(&(emb.len() as u64).to_le_bytes())?;
    for v in &emb.data {
        w.write_all(&(*v as f32).to_le_bytes())?;
    }
    Ok(())
}

pub fn read_emb1(mut r: impl Read) -> Result<EmbeddingSet> {
    let mut header = [0u8; 20];
    r.read_exact(&mut header)
        .map_err(|_| DensityError::Format("truncated header".into()))?;
    if &header[..4] != MAGIC {
        return Err(DensityError::Format("missing EMB1 magic".into()));
    }
    let dim = u64::from_le_bytes(header[4..12].try_into().unwrap()) as usize;
    let rows = u64::from_le_bytes(header[12..20].try_into().unwrap()) as usize;
    let count = dim
        .checked_mul(rows)
        .ok_or_else(|| DensityError::Format("header sizes overflow".into()))?;
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)
        .map_err(|e| DensityError::Format(e.to_string()))?;
    if bytes.len() != count * 4 {
        return Err(DensityError::Format(format!(
            "expected {} payload bytes for {rows} x {dim}, found {}",
            count * 4,
            bytes.len()
        )));
    }
    let data = bytes
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
        .collect();
    let ids = (0..rows).map(|i| i.to_string()).collect();
    EmbeddingSet::new(dim, data, ids)
}

/// CSV layout: `id,v0,v1,...` with a header row.
pub fn write_embeddings_csv(emb: &EmbeddingSet, mut w: impl Write) -> std::io::Result<()> {
    let header: Vec<String> = std::iter::once("id".to_string())
        .chain((0..emb.dim()).map(|j| format!("v{j}")))
        .collect();
    writeln!(w, "{}", header.join(","))?;
    for (id, row) in emb.ids().iter().zip(emb.rows()) {
        let vals: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        writeln!(w, "{id},{}", vals.join(","))?;
    }
    Ok(())
}

pub fn read_embeddings_csv(r: impl BufRead) -> Result<EmbeddingSet> {
    let mut lines = r.lines().enumerate();
    let header = match lines.next() {
        Some((_, Ok(h))) => h,
        _ => return Err(DensityError::Format("missing header".into())),
    };
    let cols: Vec<&str> = header.split(',').map(str::trim).collect();
    if cols.first() != Some(&"id") || cols.len() < 2 {
        return Err(DensityError::Format("header must be `id,v0,v1,...`".into()));
    }
    let dim = cols.len() - 1;
    let mut data = Vec::new();
    let mut ids = Vec::new();
    for (i, line) in lines {
        let line = line.map_err(|e| DensityError::Format(e.to_string()))?;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != dim + 1 {
            return Err(DensityError::Format(format!(
                "line {}: expected {} fields, found {}",
                i + 1,
                dim + 1,
                fields.len()
            )));
        }
        ids.push(fields[0].to_string());
        for f in &fields[1..] {
            let v: f64 = f
                .parse()
                .map_err(|_| DensityError::Format(format!("line {}: bad number {f:?}", i + 1)))?;
            data.push(v);
        }
    }
    EmbeddingSet::new(dim, data, ids)
}

/// Loads either format, detected from the magic bytes.
pub fn load_embeddings(path: &Path) -> Result<EmbeddingSet> {
    let mut file = BufReader::new(File::open(path).map_err(io_err(path))?);
    let is_binary = file.fill_buf().map_err(io_err(path))?.starts_with(MAGIC);
    if is_binary {
        read_emb1(file)
    } else {
        read_embeddings_csv(file)
    }
}

/// Saves as `EMB1` binary unless the extension is `.csv`.
pub fn save_embeddings(emb: &EmbeddingSet, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path).map_err(io_err(path))?);
    let csv = path.extension().and_then(|e| e.to_str()) == Some("csv");
    if csv {
        write_embeddings_csv(emb, &mut w).map_err(io_err(path))?;
    } else {
        write_emb1(emb, &mut w).map_err(io_err(path))?;
    }
    w.flush().map_err(io_err(path))
}
