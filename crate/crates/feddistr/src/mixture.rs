//! Base distributions, client mixtures, entanglement coefficients, and
//! synthetic data sampling.
//!
//! The global data distribution is modeled as a finite mixture of labeled
//! axis-aligned Gaussians. Each client holds a probability vector over the
//! bases; the cosine similarity between two clients' vectors is their
//! entanglement coefficient.

use crate::linalg::{dot, norm};
use crate::{Error, Result};
use rand::Rng;
use rand_distr::{Distribution, Normal};

/// One atomic component of the global mixture: a labeled axis-aligned
/// Gaussian with per-axis standard deviations.
#[derive(Debug, Clone, PartialEq)]
pub struct BaseDistribution {
    pub id: usize,
    pub label: usize,
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
}

impl BaseDistribution {
    pub fn validate(&self) -> Result<()> {
        if self.mean.len() != self.scale.len() {
            return Err(Error::Config(format!(
                "base {}: mean dim {} != scale dim {}",
                self.id,
                self.mean.len(),
                self.scale.len()
            )));
        }
        if self.scale.iter().any(|&s| !(s > 0.0)) {
            return Err(Error::Config(format!(
                "base {}: scale components must be strictly positive",
                self.id
            )));
        }
        Ok(())
    }
}

/// The global mixture: `m` bases plus a probability vector over them.
#[derive(Debug, Clone, PartialEq)]
pub struct MixtureSpec {
    pub bases: Vec<BaseDistribution>,
    pub global_weights: Vec<f64>,
}

impl MixtureSpec {
    pub fn num_bases(&self) -> usize {
        self.bases.len()
    }

    pub fn dim(&self) -> usize {
        self.bases.first().map(|b| b.mean.len()).unwrap_or(0)
    }

    pub fn validate(&self) -> Result<()> {
        if self.bases.is_empty() {
            return Err(Error::Config("mixture needs at least one base".into()));
        }
        if self.global_weights.len() != self.bases.len() {
            return Err(Error::Config(format!(
                "{} weights for {} bases",
                self.global_weights.len(),
                self.bases.len()
            )));
        }
        let d = self.dim();
        for b in &self.bases {
            b.validate()?;
            if b.mean.len() != d {
                return Err(Error::Config(format!("base {} has dim {}, expected {}", b.id, b.mean.len(), d)));
            }
        }
        let mut seen = std::collections::HashSet::new();
        if !self.bases.iter().all(|b| seen.insert(b.id)) {
            return Err(Error::Config("duplicate base id".into()));
        }
        if self.global_weights.iter().any(|&w| w < 0.0) {
            return Err(Error::Config("negative mixture weight".into()));
        }
        let total: f64 = self.global_weights.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("weights sum to {total}, expected 1")));
        }
        Ok(())
    }
}

/// A client's private dataset. `pi` is the ground-truth probability vector
/// over bases; `base_assignment` records which base generated each point and
/// exists for evaluation only — it is never uploaded.
#[derive(Debug, Clone)]
pub struct ClientShard {
    pub client_id: usize,
    /// (feature vector, superclass label) pairs.
    pub points: Vec<(Vec<f64>, usize)>,
    pub pi: Vec<f64>,
    pub base_assignment: Vec<usize>,
}

impl ClientShard {
    pub fn validate(&self) -> Result<()> {
        if self.points.is_empty() {
            return Err(Error::Config(format!("client {}: empty shard", self.client_id)));
        }
        if self.pi.iter().any(|&p| p < 0.0) {
            return Err(Error::Config(format!("client {}: negative pi entry", self.client_id)));
        }
        let total: f64 = self.pi.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!(
                "client {}: pi sums to {total}, expected 1",
                self.client_id
            )));
        }
        if self.base_assignment.len() != self.points.len() {
            return Err(Error::Config(format!(
                "client {}: base_assignment length mismatch",
                self.client_id
            )));
        }
        Ok(())
    }
}

/// Pairwise entanglement coefficients across all clients.
#[derive(Debug, Clone)]
pub struct EntanglementReport {
    /// K x K symmetric matrix; diagonal is 1 for nonzero pi vectors.
    pub pairwise: Vec<Vec<f64>>,
    /// Mean of the strict upper triangle.
    pub average: f64,
    /// Maximum off-diagonal entry.
    pub xi_max: f64,
}

/// Cosine similarity between two clients' base-probability vectors.
pub fn entangle_coeff(pi_a: &[f64], pi_b: &[f64]) -> Result<f64> {
    if pi_a.len() != pi_b.len() {
        return Err(Error::Input(format!(
            "probability vectors of lengths {} and {}",
            pi_a.len(),
            pi_b.len()
        )));
    }
    let (na, nb) = (norm(pi_a), norm(pi_b));
    if na == 0.0 || nb == 0.0 {
        return Err(Error::Domain("entanglement coefficient undefined for zero-norm vector".into()));
    }
    let c = dot(pi_a, pi_b) / (na * nb);
    // guard fp overshoot above 1 for near-identical vectors
    Ok(c.min(1.0))
}

/// Builds the full pairwise coefficient matrix plus its average and maximum.
pub fn entanglement_report(shards: &[ClientShard]) -> Result<EntanglementReport> {
    let k = shards.len();
    if k < 2 {
        return Err(Error::Input("entanglement report needs at least 2 clients".into()));
    }
    let mut pairwise = vec![vec![0.0; k]; k];
    let mut sum = 0.0;
    let mut xi_max: f64 = 0.0;
    for a in 0..k {
        pairwise[a][a] = 1.0;
        for b in (a + 1)..k {
            let c = entangle_coeff(&shards[a].pi, &shards[b].pi)?;
            pairwise[a][b] = c;
            pairwise[b][a] = c;
            sum += c;
            xi_max = xi_max.max(c);
        }
    }
    let average = sum / (k * (k - 1) / 2) as f64;
    Ok(EntanglementReport { pairwise, average, xi_max })
}

/// Draws `n` i.i.d. points from the global mixture.
pub fn sample_mixture<R: Rng>(spec: &MixtureSpec, n: usize, rng: &mut R) -> Result<Vec<(Vec<f64>, usize)>> {
    spec.validate()?;
    if n == 0 {
        return Err(Error::Config("sample count must be >= 1".into()));
    }
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let i = sample_categorical(&spec.global_weights, rng);
        out.push((sample_base(&spec.bases[i], rng), spec.bases[i].label));
    }
    Ok(out)
}

pub(crate) fn sample_base<R: Rng>(base: &BaseDistribution, rng: &mut R) -> Vec<f64> {
    base.mean
        .iter()
        .zip(&base.scale)
        .map(|(&m, &s)| Normal::new(m, s).unwrap().sample(rng))
        .collect()
}

pub(crate) fn sample_categorical<R: Rng>(weights: &[f64], rng: &mut R) -> usize {
    let total: f64 = weights.iter().sum();
    let mut u = rng.gen::<f64>() * total;
    for (i, &w) in weights.iter().enumerate() {
        u -= w;
        if u <= 0.0 {
            return i;
        }
    }
    weights.len() - 1
}

/// Splits the mixture across `num_clients` shards hitting a target maximum
/// pairwise entanglement.
///
/// Each client gets a disjoint dominant block of `m / K` bases carrying mass
/// `1 - delta`; the remaining mass `delta` leaks uniformly over all other
/// bases. `delta` is found by bisection so the (uniform) pairwise coefficient
/// equals `xi_target`; `xi_target = 0` gives exactly disjoint supports.
pub fn partition_for_xi<R: Rng>(
    spec: &MixtureSpec,
    num_clients: usize,
    xi_target: f64,
    n_per_client: usize,
    rng: &mut R,
) -> Result<Vec<ClientShard>> {
    spec.validate()?;
    let m = spec.num_bases();
    if num_clients == 0 || m < num_clients {
        return Err(Error::Config(format!(
            "cannot split {m} bases across {num_clients} clients (need m >= K >= 1)"
        )));
    }
    if !(0.0..1.0).contains(&xi_target) {
        return Err(Error::Config(format!("xi_target {xi_target} outside [0, 1)")));
    }
    if n_per_client == 0 {
        return Err(Error::Config("n_per_client must be >= 1".into()));
    }

    let block = m / num_clients;
    let delta = if xi_target == 0.0 {
        0.0
    } else {
        solve_leak_mass(m, num_clients, block, xi_target)?
    };

    let mut shards = Vec::with_capacity(num_clients);
    for k in 0..num_clients {
        let pi = client_pi(m, block, k, delta);
        let mut points = Vec::with_capacity(n_per_client);
        let mut base_assignment = Vec::with_capacity(n_per_client);
        for _ in 0..n_per_client {
            let i = sample_categorical(&pi, rng);
            points.push((sample_base(&spec.bases[i], rng), spec.bases[i].label));
            base_assignment.push(spec.bases[i].id);
        }
        shards.push(ClientShard { client_id: k, points, pi, base_assignment });
    }
    Ok(shards)
}

fn client_pi(m: usize, block: usize, k: usize, delta: f64) -> Vec<f64> {
    let others = (m - block) as f64;
    let mut pi = vec![delta / others; m];
    for i in (k * block)..((k + 1) * block) {
        pi[i] = (1.0 - delta) / block as f64;
    }
    pi
}

/// Bisection on the leak mass so that the pairwise coefficient of the
/// block construction hits `xi_target`. The coefficient is 0 at delta = 0
/// and increases monotonically toward 1 as the vectors approach uniform.
fn solve_leak_mass(m: usize, num_clients: usize, block: usize, xi_target: f64) -> Result<f64> {
    let coeff = |delta: f64| -> f64 {
        let a = client_pi(m, block, 0, delta);
        let b = client_pi(m, block, 1.min(num_clients - 1), delta);
        entangle_coeff(&a, &b).expect("block construction yields nonzero vectors")
    };
    // at delta = uniform mass the vectors coincide and the coefficient is 1
    let hi_limit = (m - block) as f64 / m as f64;
    let (mut lo, mut hi) = (0.0, hi_limit);
    if coeff(hi) < xi_target {
        return Err(Error::Config(format!("xi_target {xi_target} unreachable for m={m}, K={num_clients}")));
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if coeff(mid) < xi_target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}
