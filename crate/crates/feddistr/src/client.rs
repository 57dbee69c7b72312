//! Client-side pipeline: encode points into a latent space, cluster each
//! superclass label group into base-distribution candidates, fit a Gaussian
//! per cluster, and release the fitted parameters under norm clipping plus
//! Gaussian noise. One upload per client per run.

use crate::linalg::{dist, dist_sq, mean_of, norm};
use crate::mixture::ClientShard;
use crate::{Error, Result};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use std::collections::BTreeMap;

/// Floor applied to per-axis standard deviations before taking the log,
/// so singleton or degenerate clusters stay finite.
pub const STD_FLOOR: f64 = 1e-3;

const MAX_LLOYD_ITERS: usize = 300;
const KMEANS_RESTARTS: usize = 5;

/// One encoded data point.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentPoint {
    pub z: Vec<f64>,
    pub label: usize,
    pub source_index: usize,
}

/// Latent encoder. Identity by default; optionally a fixed linear map with
/// orthonormal rows for dimensionality reduction.
#[derive(Debug, Clone)]
pub enum EncoderCfg {
    Identity { dim: usize },
    /// Row-major projection matrix, rows orthonormal, shape latent_dim x dim.
    Projection { rows: Vec<Vec<f64>> },
}

impl EncoderCfg {
    pub fn input_dim(&self) -> usize {
        match self {
            EncoderCfg::Identity { dim } => *dim,
            EncoderCfg::Projection { rows } => rows.first().map(|r| r.len()).unwrap_or(0),
        }
    }

    pub fn latent_dim(&self) -> usize {
        match self {
            EncoderCfg::Identity { dim } => *dim,
            EncoderCfg::Projection { rows } => rows.len(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if let EncoderCfg::Projection { rows } = self {
            if rows.is_empty() {
                return Err(Error::Config("projection encoder with no rows".into()));
            }
            let d = rows[0].len();
            for r in rows {
                if r.len() != d {
                    return Err(Error::Config("projection rows of unequal length".into()));
                }
                if (norm(r) - 1.0).abs() > 1e-6 {
                    return Err(Error::Config("projection rows must be unit norm".into()));
                }
            }
            for i in 0..rows.len() {
                for j in (i + 1)..rows.len() {
                    if crate::linalg::dot(&rows[i], &rows[j]).abs() > 1e-6 {
                        return Err(Error::Config("projection rows must be orthogonal".into()));
                    }
                }
            }
        }
        Ok(())
    }
}

/// Maps a raw feature vector into the latent space.
pub fn encode(x: &[f64], label: usize, source_index: usize, cfg: &EncoderCfg) -> Result<LatentPoint> {
    if x.len() != cfg.input_dim() {
        return Err(Error::Input(format!(
            "encode: point dim {} != encoder dim {}",
            x.len(),
            cfg.input_dim()
        )));
    }
    let z = match cfg {
        EncoderCfg::Identity { .. } => x.to_vec(),
        EncoderCfg::Projection { rows } => rows.iter().map(|r| crate::linalg::dot(r, x)).collect(),
    };
    Ok(LatentPoint { z, label, source_index })
}

/// Result of per-label Lloyd clustering. Cluster indices are global across
/// labels; `cluster_labels[j]` is the superclass label of cluster `j`.
#[derive(Debug, Clone)]
pub struct Clustering {
    pub assignments: Vec<usize>,
    pub centroids: Vec<Vec<f64>>,
    pub cluster_labels: Vec<usize>,
    /// Sum over clusters of unsquared Euclidean distances to the centroid.
    pub inertia: f64,
}

/// How many clusters to form within each label group.
#[derive(Debug, Clone, PartialEq)]
pub enum MkMode {
    /// Same cluster count for every label.
    Fixed(usize),
    /// Pick the count in [1, 8] maximizing mean silhouette score.
    Auto,
    /// Explicit count per label.
    PerLabel(BTreeMap<usize, usize>),
}

/// Clusters `points` with `m_k` clusters per label group.
pub fn cluster<R: Rng>(points: &[LatentPoint], m_k: usize, rng: &mut R) -> Result<Clustering> {
    cluster_with_mode(points, &MkMode::Fixed(m_k), rng)
}

/// Clusters each label group independently and concatenates the results.
pub fn cluster_with_mode<R: Rng>(points: &[LatentPoint], mode: &MkMode, rng: &mut R) -> Result<Clustering> {
    if points.is_empty() {
        return Err(Error::Config("cluster: no points".into()));
    }
    let mut by_label: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, p) in points.iter().enumerate() {
        by_label.entry(p.label).or_default().push(i);
    }

    let mut assignments = vec![usize::MAX; points.len()];
    let mut centroids = Vec::new();
    let mut cluster_labels = Vec::new();
    let mut inertia = 0.0;

    for (&label, idxs) in &by_label {
        let group: Vec<&[f64]> = idxs.iter().map(|&i| points[i].z.as_slice()).collect();
        let k = match mode {
            MkMode::Fixed(k) => *k,
            MkMode::PerLabel(map) => *map.get(&label).ok_or_else(|| {
                Error::Config(format!("no cluster count configured for label {label}"))
            })?,
            MkMode::Auto => pick_k_by_silhouette(&group, rng)?,
        };
        if k == 0 {
            return Err(Error::Config("cluster count must be >= 1".into()));
        }
        if group.len() < k {
            return Err(Error::Config(format!(
                "label {label}: {} points for {k} clusters",
                group.len()
            )));
        }
        let best = best_of_restarts(&group, k, rng);
        let offset = centroids.len();
        for (local, &point_idx) in best.assignments.iter().zip(idxs) {
            assignments[point_idx] = offset + local;
        }
        centroids.extend(best.centroids);
        cluster_labels.extend(std::iter::repeat(label).take(k));
        inertia += best.inertia;
    }

    Ok(Clustering { assignments, centroids, cluster_labels, inertia })
}

struct KMeansRun {
    assignments: Vec<usize>,
    centroids: Vec<Vec<f64>>,
    inertia: f64,
    #[cfg_attr(not(test), allow(dead_code))]
    inertia_history: Vec<f64>,
}

fn best_of_restarts<R: Rng>(points: &[&[f64]], k: usize, rng: &mut R) -> KMeansRun {
    let mut best: Option<KMeansRun> = None;
    for _ in 0..KMEANS_RESTARTS {
        let run = lloyd(points, k, rng);
        if best.as_ref().map_or(true, |b| run.inertia < b.inertia) {
            best = Some(run);
        }
    }
    best.unwrap()
}

/// Lloyd iteration with k-means++ seeding. Converges when the assignment
/// reaches a fixed point or after `MAX_LLOYD_ITERS` passes. Every cluster is
/// kept nonempty by stealing the point farthest from its centroid.
fn lloyd<R: Rng>(points: &[&[f64]], k: usize, rng: &mut R) -> KMeansRun {
    let mut centroids = kmeanspp_seed(points, k, rng);
    let mut assignments = vec![usize::MAX; points.len()];
    let mut inertia_history = Vec::new();
    for _ in 0..MAX_LLOYD_ITERS {
        let new_assignments: Vec<usize> = points
            .iter()
            .map(|p| nearest(p, &centroids).0)
            .collect();
        let changed = new_assignments != assignments;
        assignments = new_assignments;
        fix_empty_clusters(points, &mut assignments, &centroids, k);
        for j in 0..k {
            let members: Vec<&[f64]> = points
                .iter()
                .zip(&assignments)
                .filter(|(_, &a)| a == j)
                .map(|(p, _)| *p)
                .collect();
            centroids[j] = mean_of(&members);
        }
        // Lloyd descends on the squared objective, so the history tracks
        // that; the reported inertia below stays unsquared.
        inertia_history.push(
            assignments
                .iter()
                .zip(points)
                .map(|(&a, p)| dist_sq(p, &centroids[a]))
                .sum(),
        );
        if !changed {
            break;
        }
    }
    let inertia = assignments
        .iter()
        .zip(points)
        .map(|(&a, p)| dist(p, &centroids[a]))
        .sum();
    KMeansRun { assignments, centroids, inertia, inertia_history }
}

fn nearest(p: &[f64], centroids: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, dist_sq(p, &centroids[0]));
    for (j, c) in centroids.iter().enumerate().skip(1) {
        let d = dist_sq(p, c);
        if d < best.1 {
            best = (j, d);
        }
    }
    best
}

fn fix_empty_clusters(points: &[&[f64]], assignments: &mut [usize], centroids: &[Vec<f64>], k: usize) {
    for j in 0..k {
        if assignments.iter().any(|&a| a == j) {
            continue;
        }
        // steal the point currently farthest from its own centroid
        let (victim, _) = assignments
            .iter()
            .enumerate()
            .map(|(i, &a)| (i, dist_sq(points[i], &centroids[a])))
            .max_by(|a, b| a.1.total_cmp(&b.1))
            .unwrap();
        assignments[victim] = j;
    }
}

fn kmeanspp_seed<R: Rng>(points: &[&[f64]], k: usize, rng: &mut R) -> Vec<Vec<f64>> {
    let first = rng.gen_range(0..points.len());
    let mut centroids: Vec<Vec<f64>> = vec![points[first].to_vec()];
    let mut d2: Vec<f64> = points.iter().map(|p| dist_sq(p, &centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total <= 0.0 {
            rng.gen_range(0..points.len())
        } else {
            let mut u = rng.gen::<f64>() * total;
            let mut chosen = points.len() - 1;
            for (i, &w) in d2.iter().enumerate() {
                u -= w;
                if u <= 0.0 {
                    chosen = i;
                    break;
                }
            }
            chosen
        };
        centroids.push(points[next].to_vec());
        for (i, p) in points.iter().enumerate() {
            d2[i] = d2[i].min(dist_sq(p, centroids.last().unwrap()));
        }
    }
    centroids
}

/// Mean silhouette over k in [2, 8]; k = 1 scores 0, so a group with no
/// cluster structure stays unsplit.
fn pick_k_by_silhouette<R: Rng>(points: &[&[f64]], rng: &mut R) -> Result<usize> {
    let mut best_k = 1;
    let mut best_score = 0.0;
    let max_k = 8.min(points.len());
    for k in 2..=max_k {
        let run = best_of_restarts(points, k, rng);
        let score = mean_silhouette(points, &run.assignments, k);
        if score > best_score {
            best_score = score;
            best_k = k;
        }
    }
    Ok(best_k)
}

fn mean_silhouette(points: &[&[f64]], assignments: &[usize], k: usize) -> f64 {
    let n = points.len();
    let mut sizes = vec![0usize; k];
    for &a in assignments {
        sizes[a] += 1;
    }
    let mut total = 0.0;
    for i in 0..n {
        let own = assignments[i];
        let mut sums = vec![0.0; k];
        for j in 0..n {
            if i != j {
                sums[assignments[j]] += dist(points[i], points[j]);
            }
        }
        let a = if sizes[own] > 1 { sums[own] / (sizes[own] - 1) as f64 } else { 0.0 };
        let b = (0..k)
            .filter(|&c| c != own && sizes[c] > 0)
            .map(|c| sums[c] / sizes[c] as f64)
            .fold(f64::INFINITY, f64::min);
        if b.is_finite() {
            let denom = a.max(b);
            if denom > 0.0 {
                total += (b - a) / denom;
            }
        }
    }
    total / n as f64
}

/// The fitted representation of one local base distribution:
/// `v = [mean per axis, log of per-axis std]`.
#[derive(Debug, Clone, PartialEq)]
pub struct DistributionParameter {
    pub v: Vec<f64>,
    pub label: usize,
    pub count: usize,
    pub owner: usize,
    pub local_index: usize,
}

impl DistributionParameter {
    pub fn latent_dim(&self) -> usize {
        self.v.len() / 2
    }

    pub fn mean(&self) -> &[f64] {
        &self.v[..self.latent_dim()]
    }

    pub fn stds(&self) -> Vec<f64> {
        self.v[self.latent_dim()..].iter().map(|&l| l.exp()).collect()
    }
}

/// Fits a diagonal Gaussian to one cluster by maximum likelihood.
pub fn estimate_params(members: &[&LatentPoint], owner: usize, local_index: usize) -> Result<DistributionParameter> {
    if members.is_empty() {
        return Err(Error::Input("estimate_params: empty cluster".into()));
    }
    let label = members[0].label;
    if members.iter().any(|p| p.label != label) {
        return Err(Error::Internal("estimate_params: cluster mixes labels".into()));
    }
    let d = members[0].z.len();
    let n = members.len() as f64;
    let mut mean = vec![0.0; d];
    for p in members {
        for j in 0..d {
            mean[j] += p.z[j];
        }
    }
    for m in &mut mean {
        *m /= n;
    }
    let mut v = mean.clone();
    for j in 0..d {
        let var = members.iter().map(|p| (p.z[j] - mean[j]).powi(2)).sum::<f64>() / n;
        v.push(var.sqrt().max(STD_FLOOR).ln());
    }
    Ok(DistributionParameter { v, label, count: members.len(), owner, local_index })
}

/// Norm-clips the parameter vector to `C` and adds isotropic Gaussian noise
/// of standard deviation `sigma * C`. Label and count pass through in the
/// clear, matching the upload contract.
pub fn dp_release<R: Rng>(
    param: &DistributionParameter,
    clip_bound: f64,
    sigma: f64,
    rng: &mut R,
) -> Result<DistributionParameter> {
    if !(clip_bound > 0.0) {
        return Err(Error::Config(format!("clip bound must be positive, got {clip_bound}")));
    }
    if sigma < 0.0 {
        return Err(Error::Config(format!("sigma must be nonnegative, got {sigma}")));
    }
    let scale = 1.0_f64.max(norm(&param.v) / clip_bound);
    let mut v: Vec<f64> = param.v.iter().map(|x| x / scale).collect();
    if sigma > 0.0 {
        let noise = Normal::new(0.0, sigma * clip_bound).unwrap();
        for x in &mut v {
            *x += noise.sample(rng);
        }
    }
    Ok(DistributionParameter { v, ..param.clone() })
}

/// Everything a client sends to the server in its single uplink.
#[derive(Debug, Clone, PartialEq)]
pub struct UploadMessage {
    pub owner: usize,
    pub params: Vec<DistributionParameter>,
    pub clip_bound: f64,
    pub noise_sigma: f64,
}

impl UploadMessage {
    /// Scalars on the wire: parameter vector plus one count per parameter.
    pub fn transmitted_scalars(&self) -> usize {
        self.params.iter().map(|p| p.v.len() + 1).sum()
    }
}

#[derive(Debug, Clone)]
pub struct ClientCfg {
    pub encoder: EncoderCfg,
    pub mk_mode: MkMode,
    pub clip_bound: f64,
    pub noise_sigma: f64,
}

/// The full client pipeline: encode, cluster per label, fit a Gaussian per
/// cluster, and release each parameter under the Gaussian mechanism.
pub fn client_upload<R: Rng>(shard: &ClientShard, cfg: &ClientCfg, rng: &mut R) -> Result<UploadMessage> {
    shard.validate()?;
    cfg.encoder.validate()?;
    let latents: Vec<LatentPoint> = shard
        .points
        .iter()
        .enumerate()
        .map(|(i, (x, y))| encode(x, *y, i, &cfg.encoder))
        .collect::<Result<_>>()?;
    let clustering = cluster_with_mode(&latents, &cfg.mk_mode, rng)?;

    let mut params = Vec::with_capacity(clustering.centroids.len());
    for j in 0..clustering.centroids.len() {
        let members: Vec<&LatentPoint> = latents
            .iter()
            .zip(&clustering.assignments)
            .filter(|(_, &a)| a == j)
            .map(|(p, _)| p)
            .collect();
        let fitted = estimate_params(&members, shard.client_id, j)?;
        params.push(dp_release(&fitted, cfg.clip_bound, cfg.noise_sigma, rng)?);
    }
    Ok(UploadMessage {
        owner: shard.client_id,
        params,
        clip_bound: cfg.clip_bound,
        noise_sigma: cfg.noise_sigma,
    })
}

/// Serializes an upload to a line-oriented record, one parameter per line:
/// `owner,label,count,local_index,clip,sigma,v...` with floats printed so
/// the round trip is bit exact.
pub fn upload_to_text(msg: &UploadMessage) -> String {
    let mut out = String::new();
    for p in &msg.params {
        out.push_str(&format!(
            "{},{},{},{},{:e},{:e}",
            msg.owner, p.label, p.count, p.local_index, msg.clip_bound, msg.noise_sigma
        ));
        for x in &p.v {
            out.push_str(&format!(",{:.17e}", x));
        }
        out.push('\n');
    }
    out
}

pub fn upload_from_text(text: &str) -> Result<UploadMessage> {
    let mut owner = None;
    let mut clip_bound = 0.0;
    let mut noise_sigma = 0.0;
    let mut params = Vec::new();
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() < 7 {
            return Err(Error::Input(format!("malformed upload record: {line}")));
        }
        let parse_u = |s: &str| s.parse::<usize>().map_err(|e| Error::Input(format!("{s}: {e}")));
        let parse_f = |s: &str| s.parse::<f64>().map_err(|e| Error::Input(format!("{s}: {e}")));
        let o = parse_u(fields[0])?;
        if *owner.get_or_insert(o) != o {
            return Err(Error::Input("upload record mixes owners".into()));
        }
        clip_bound = parse_f(fields[4])?;
        noise_sigma = parse_f(fields[5])?;
        params.push(DistributionParameter {
            label: parse_u(fields[1])?,
            count: parse_u(fields[2])?,
            local_index: parse_u(fields[3])?,
            v: fields[6..].iter().map(|s| parse_f(s)).collect::<Result<_>>()?,
            owner: o,
        });
    }
    let owner = owner.ok_or_else(|| Error::Input("empty upload record".into()))?;
    Ok(UploadMessage { owner, params, clip_bound, noise_sigma })
}
