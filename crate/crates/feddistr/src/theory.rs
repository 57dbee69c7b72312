//! Closed-form evaluation and Monte Carlo validation of the protocol's
//! probabilistic utility-loss bounds.
//!
//! The Monte Carlo experiment estimates the mean of a truncated normal from
//! n samples and measures the excess expected absolute-deviation loss of the
//! plug-in optimum, then checks that the empirical success frequency
//! dominates the closed-form bound up to binomial slack.

use crate::{Error, Result};
use rand::Rng;
use rand_distr::{Distribution, Normal as RandNormal};
use statrs::distribution::{Continuous, ContinuousCDF, Normal};

/// Hoeffding tail for the mean of n samples supported on [a, b]:
/// exp(-2 n eps^2 / (b - a)^2).
pub fn hoeffding_tail(n: usize, eps: f64, a: f64, b: f64) -> Result<f64> {
    if n == 0 {
        return Err(Error::Input("hoeffding_tail: n must be >= 1".into()));
    }
    if !(eps > 0.0) {
        return Err(Error::Input(format!("hoeffding_tail: eps must be positive, got {eps}")));
    }
    if !(b > a) {
        return Err(Error::Input(format!("hoeffding_tail: invalid interval [{a}, {b}]")));
    }
    let t = (-2.0 * n as f64 * eps * eps / ((b - a) * (b - a))).exp();
    Ok(t.clamp(0.0, 1.0))
}

/// Success probability lower bound for the disentangled case:
/// 1 - exp(-n_min eps^2 / (2 L^2)).
pub fn thm1_bound(n_min: usize, eps: f64, lipschitz: f64) -> Result<f64> {
    if n_min == 0 {
        return Err(Error::Input("thm1_bound: n_min must be >= 1".into()));
    }
    if !(eps > 0.0) || !(lipschitz > 0.0) {
        return Err(Error::Input("thm1_bound: eps and L must be positive".into()));
    }
    let b = 1.0 - (-(n_min as f64) * eps * eps / (2.0 * lipschitz * lipschitz)).exp();
    Ok(b.clamp(0.0, 1.0))
}

/// Near-disentangled bound, feasible only when xi < 1 / (K-1)^2.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Thm2Bound {
    Feasible(f64),
    /// xi at or above the feasibility threshold 1 / (K-1)^2.
    Infeasible,
}

/// Feasibility threshold on xi for K clients.
pub fn xi_feasibility_threshold(k: usize) -> f64 {
    1.0 / ((k - 1) * (k - 1)) as f64
}

/// Success probability lower bound for the near-disentangled case:
/// 1 - exp(-(1 - (K-1) sqrt(xi)) n eps^2 / (2 m L^2)).
pub fn thm2_bound(n: usize, eps: f64, lipschitz: f64, k: usize, xi: f64, m: usize) -> Result<Thm2Bound> {
    if k < 2 {
        return Err(Error::Input("thm2_bound: K must be >= 2".into()));
    }
    if m == 0 {
        return Err(Error::Input("thm2_bound: m must be >= 1".into()));
    }
    if n == 0 || !(eps > 0.0) || !(lipschitz > 0.0) || xi < 0.0 {
        return Err(Error::Input("thm2_bound: invalid n, eps, L, or xi".into()));
    }
    if xi >= xi_feasibility_threshold(k) {
        return Ok(Thm2Bound::Infeasible);
    }
    let shrink = 1.0 - (k - 1) as f64 * xi.sqrt();
    let b = 1.0 - (-shrink * n as f64 * eps * eps / (2.0 * m as f64 * lipschitz * lipschitz)).exp();
    Ok(Thm2Bound::Feasible(b.clamp(0.0, 1.0)))
}

/// Randomized verifier for the unit-vector coordinate lemma: for K unit
/// vectors whose coordinates sum to 1 columnwise and whose pairwise inner
/// products are at most xi < 1/(K-1)^2, every coordinate's maximum entry is
/// at least 1 - (K-1) sqrt(xi).
///
/// Inputs violating the preconditions are an input error, never a `false`.
pub fn lemma3_check(vectors: &[Vec<f64>], xi: f64) -> Result<bool> {
    let k = vectors.len();
    if k < 2 {
        return Err(Error::Input("lemma3_check: need at least 2 vectors".into()));
    }
    let m = vectors[0].len();
    if vectors.iter().any(|v| v.len() != m) {
        return Err(Error::Input("lemma3_check: vectors of unequal length".into()));
    }
    if xi < 0.0 || xi >= xi_feasibility_threshold(k) {
        return Err(Error::Input(format!(
            "lemma3_check: xi {xi} outside [0, 1/(K-1)^2)"
        )));
    }
    for (i, v) in vectors.iter().enumerate() {
        let n = crate::linalg::norm(v);
        if (n - 1.0).abs() > 1e-6 {
            return Err(Error::Input(format!("lemma3_check: vector {i} has norm {n}")));
        }
    }
    for coord in 0..m {
        let sum: f64 = vectors.iter().map(|v| v[coord]).sum();
        if (sum - 1.0).abs() > 1e-6 {
            return Err(Error::Input(format!(
                "lemma3_check: coordinate {coord} sums to {sum}"
            )));
        }
    }
    for i in 0..k {
        for j in (i + 1)..k {
            let ip = crate::linalg::dot(&vectors[i], &vectors[j]);
            if ip > xi + 1e-9 {
                return Err(Error::Input(format!(
                    "lemma3_check: inner product {ip} exceeds xi {xi}"
                )));
            }
        }
    }

    let floor = 1.0 - (k - 1) as f64 * xi.sqrt();
    Ok((0..m).all(|coord| {
        let max = vectors.iter().map(|v| v[coord]).fold(f64::NEG_INFINITY, f64::max);
        max >= floor - 1e-9
    }))
}

/// Normal distribution restricted to [a, b].
#[derive(Debug, Clone, Copy)]
pub struct TruncatedNormal {
    mu: f64,
    sigma: f64,
    a: f64,
    b: f64,
    base: Normal,
    mass: f64,
}

impl TruncatedNormal {
    pub fn new(mu: f64, sigma: f64, a: f64, b: f64) -> Result<Self> {
        if !(sigma > 0.0) {
            return Err(Error::Input("truncated normal: sigma must be positive".into()));
        }
        if !(b > a) {
            return Err(Error::Input(format!("truncated normal: invalid interval [{a}, {b}]")));
        }
        let base = Normal::new(mu, sigma).expect("validated parameters");
        let mass = base.cdf(b) - base.cdf(a);
        if mass <= 0.0 {
            return Err(Error::Input("truncated normal: interval carries no mass".into()));
        }
        Ok(TruncatedNormal { mu, sigma, a, b, base, mass })
    }

    pub fn support(&self) -> (f64, f64) {
        (self.a, self.b)
    }

    pub fn cdf(&self, x: f64) -> f64 {
        if x <= self.a {
            0.0
        } else if x >= self.b {
            1.0
        } else {
            (self.base.cdf(x) - self.base.cdf(self.a)) / self.mass
        }
    }

    pub fn median(&self) -> f64 {
        self.base.inverse_cdf(self.base.cdf(self.a) + 0.5 * self.mass)
    }

    /// E[Z * 1{Z <= c}] in closed form.
    fn partial_mean(&self, c: f64) -> f64 {
        let c = c.clamp(self.a, self.b);
        let std = Normal::new(0.0, 1.0).unwrap();
        let alpha = (self.a - self.mu) / self.sigma;
        let gamma = (c - self.mu) / self.sigma;
        (self.mu * (std.cdf(gamma) - std.cdf(alpha))
            + self.sigma * (std.pdf(alpha) - std.pdf(gamma)))
            / self.mass
    }

    /// E|c - Z| in closed form.
    pub fn mean_abs_dev(&self, c: f64) -> f64 {
        let mean = self.partial_mean(self.b);
        if c <= self.a {
            return mean - c;
        }
        if c >= self.b {
            return c - mean;
        }
        c * (2.0 * self.cdf(c) - 1.0) - 2.0 * self.partial_mean(c) + mean
    }

    /// Rejection sampling from the untruncated normal.
    pub fn sample<R: Rng>(&self, rng: &mut R) -> f64 {
        let normal = RandNormal::new(self.mu, self.sigma).unwrap();
        loop {
            let x = normal.sample(rng);
            if x >= self.a && x <= self.b {
                return x;
            }
        }
    }
}

/// Inputs for one bound-validation cell.
#[derive(Debug, Clone, Copy)]
pub struct BoundSpec {
    pub n: usize,
    pub eps: f64,
    pub lipschitz: f64,
    pub k: usize,
    pub xi: f64,
    pub m: usize,
    pub a: f64,
    pub b: f64,
}

impl BoundSpec {
    /// Sampling distribution for the Monte Carlo experiment: a normal
    /// centered on the interval with sigma = (b - a) / 4, truncated to it.
    pub fn trial_distribution(&self) -> Result<TruncatedNormal> {
        TruncatedNormal::new(0.5 * (self.a + self.b), 0.25 * (self.b - self.a), self.a, self.b)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct MonteCarloOutcome {
    /// Fraction of trials with utility loss at most eps.
    pub empirical: f64,
    /// The closed-form lower bound being validated.
    pub bound: f64,
    /// Binomial slack 2 / sqrt(trials).
    pub slack: f64,
}

impl MonteCarloOutcome {
    pub fn dominates_bound(&self) -> bool {
        self.empirical >= self.bound - self.slack
    }
}

/// Runs `trials` mean-estimation experiments on the truncated normal. Each
/// trial draws n points, takes the sample mean as the plug-in parameter, and
/// scores the excess expected absolute-deviation loss over the population
/// optimum (the median).
pub fn monte_carlo_thm1<R: Rng>(trials: usize, spec: &BoundSpec, rng: &mut R) -> Result<MonteCarloOutcome> {
    if trials < 100 {
        return Err(Error::Input(format!("monte_carlo_thm1: need >= 100 trials, got {trials}")));
    }
    if spec.n == 0 {
        return Err(Error::Input("monte_carlo_thm1: n must be >= 1".into()));
    }
    let dist = spec.trial_distribution()?;
    let optimum = dist.median();
    let optimal_loss = dist.mean_abs_dev(optimum);
    let mut successes = 0usize;
    for _ in 0..trials {
        let mut sum = 0.0;
        for _ in 0..spec.n {
            sum += dist.sample(rng);
        }
        let estimate = sum / spec.n as f64;
        let loss = spec.lipschitz * (dist.mean_abs_dev(estimate) - optimal_loss);
        if loss <= spec.eps {
            successes += 1;
        }
    }
    Ok(MonteCarloOutcome {
        empirical: successes as f64 / trials as f64,
        bound: thm1_bound(spec.n, spec.eps, spec.lipschitz)?,
        slack: 2.0 / (trials as f64).sqrt(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    #[test]
    fn hoeffding_direct_evaluation() {
        let t = hoeffding_tail(200, 0.1, 0.0, 1.0).unwrap();
        assert!((t - (-4.0f64).exp()).abs() < 1e-12);
        assert!((t - 0.01831563888873418).abs() < 1e-12);
    }

    #[test]
    fn hoeffding_large_eps_vanishes() {
        assert!(hoeffding_tail(10, 1e6, 0.0, 1.0).unwrap() < 1e-300);
    }

    #[test]
    fn hoeffding_rejects_bad_input() {
        assert!(hoeffding_tail(0, 0.1, 0.0, 1.0).is_err());
        assert!(hoeffding_tail(10, 0.1, 1.0, 0.0).is_err());
    }

    #[test]
    fn thm1_direct_evaluation() {
        let b = thm1_bound(1000, 0.1, 1.0).unwrap();
        assert!((b - (1.0 - (-5.0f64).exp())).abs() < 1e-12);
        assert!((b - 0.9932620530009145).abs() < 1e-12);
    }

    #[test]
    fn thm1_monotone_in_n_and_eps() {
        let mut prev = 0.0;
        for n in [10, 100, 1000, 10_000] {
            let b = thm1_bound(n, 0.1, 1.0).unwrap();
            assert!(b >= prev);
            prev = b;
        }
        prev = 0.0;
        for eps in [0.01, 0.05, 0.1, 0.5] {
            let b = thm1_bound(100, eps, 1.0).unwrap();
            assert!(b >= prev);
            prev = b;
        }
    }

    #[test]
    fn thm1_huge_lipschitz_vanishes() {
        assert!(thm1_bound(100, 0.1, 1e12).unwrap() < 1e-12);
    }

    #[test]
    fn thm2_feasibility_threshold_k5() {
        assert_eq!(xi_feasibility_threshold(5), 0.0625);
        assert_eq!(thm2_bound(100, 0.1, 1.0, 5, 0.0625, 2).unwrap(), Thm2Bound::Infeasible);
        assert!(matches!(thm2_bound(100, 0.1, 1.0, 5, 0.06, 2).unwrap(), Thm2Bound::Feasible(_)));
    }

    #[test]
    fn thm2_at_xi_zero_m_one_matches_thm1() {
        for (n, eps, l) in [(100, 0.1, 1.0), (5000, 0.03, 2.0)] {
            let t2 = match thm2_bound(n, eps, l, 5, 0.0, 1).unwrap() {
                Thm2Bound::Feasible(b) => b,
                Thm2Bound::Infeasible => panic!("xi = 0 must be feasible"),
            };
            assert!((t2 - thm1_bound(n, eps, l).unwrap()).abs() < 1e-12);
        }
    }

    #[test]
    fn thm2_decreases_in_xi() {
        let mut prev = 1.0;
        for xi in [0.0, 0.01, 0.03, 0.0624] {
            let b = match thm2_bound(1000, 0.1, 1.0, 5, xi, 2).unwrap() {
                Thm2Bound::Feasible(b) => b,
                Thm2Bound::Infeasible => panic!(),
            };
            assert!(b <= prev && b > 0.0);
            prev = b;
        }
    }

    #[test]
    fn bounds_stay_in_unit_interval() {
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        for _ in 0..200 {
            let n = rng.gen_range(1..100_000);
            let eps = rng.gen_range(1e-6..10.0);
            let l = rng.gen_range(1e-3..100.0);
            let b = thm1_bound(n, eps, l).unwrap();
            assert!((0.0..=1.0).contains(&b));
            let t = hoeffding_tail(n, eps, -1.0, 1.0).unwrap();
            assert!((0.0..=1.0).contains(&t));
        }
    }

    #[test]
    fn lemma3_disjoint_pair() {
        let v = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
        assert!(lemma3_check(&v, 0.0).unwrap());
    }

    #[test]
    fn lemma3_invalid_input_is_error_not_false() {
        // norms fine but column sums broken
        let v = vec![vec![1.0, 0.0], vec![1.0, 0.0]];
        assert!(matches!(lemma3_check(&v, 0.1), Err(Error::Input(_))));
        // norm broken
        let v = vec![vec![2.0, 0.0], vec![-1.0, 1.0]];
        assert!(matches!(lemma3_check(&v, 0.1), Err(Error::Input(_))));
    }

    /// Alternating projections: unit-normalize each vector, then shift each
    /// coordinate's column to sum 1. Converges to a nearby valid instance.
    pub(super) fn random_valid_instance(k: usize, noise: f64, rng: &mut ChaCha20Rng) -> Vec<Vec<f64>> {
        let mut vs: Vec<Vec<f64>> = (0..k)
            .map(|i| {
                (0..k)
                    .map(|j| if i == j { 1.0 } else { 0.0 } + rng.gen_range(-noise..noise))
                    .collect()
            })
            .collect();
        for _ in 0..500 {
            for v in &mut vs {
                let n = crate::linalg::norm(v);
                for x in v.iter_mut() {
                    *x /= n;
                }
            }
            let mut max_err = 0.0f64;
            for coord in 0..k {
                let sum: f64 = vs.iter().map(|v| v[coord]).sum();
                let shift = (1.0 - sum) / k as f64;
                for v in &mut vs {
                    v[coord] += shift;
                }
                max_err = max_err.max((1.0 - sum).abs());
            }
            let norm_err = vs
                .iter()
                .map(|v| (crate::linalg::norm(v) - 1.0).abs())
                .fold(0.0f64, f64::max);
            if max_err < 1e-12 && norm_err < 1e-12 {
                break;
            }
        }
        vs
    }

    #[test]
    fn lemma3_random_valid_instances() {
        let mut rng = ChaCha20Rng::seed_from_u64(7);
        let mut checked = 0;
        while checked < 500 {
            let vs = random_valid_instance(3, 0.15, &mut rng);
            // only feed instances that actually satisfy the preconditions
            let max_ip = (0..3)
                .flat_map(|i| ((i + 1)..3).map(move |j| (i, j)))
                .map(|(i, j)| crate::linalg::dot(&vs[i], &vs[j]))
                .fold(f64::NEG_INFINITY, f64::max);
            if max_ip > 0.1 {
                continue;
            }
            assert!(lemma3_check(&vs, 0.1).unwrap(), "lemma violated on {vs:?}");
            checked += 1;
        }
    }

    #[test]
    fn truncated_normal_cdf_and_median() {
        let d = TruncatedNormal::new(0.5, 0.25, 0.0, 1.0).unwrap();
        assert_eq!(d.cdf(-1.0), 0.0);
        assert_eq!(d.cdf(2.0), 1.0);
        // symmetric truncation: median equals the center
        assert!((d.median() - 0.5).abs() < 1e-9);
        assert!((d.cdf(d.median()) - 0.5).abs() < 1e-9);
    }

    #[test]
    fn mean_abs_dev_matches_quadrature() {
        let d = TruncatedNormal::new(0.4, 0.3, 0.0, 1.0).unwrap();
        let std = Normal::new(0.4, 0.3).unwrap();
        let mass = std.cdf(1.0) - std.cdf(0.0);
        for c in [0.1, 0.4, 0.55, 0.9] {
            // Simpson quadrature oracle over [0, 1]
            let steps = 20_000;
            let h = 1.0 / steps as f64;
            let f = |z: f64| (c - z as f64).abs() * std.pdf(z) / mass;
            let mut integral = f(0.0) + f(1.0);
            for i in 1..steps {
                let w = if i % 2 == 1 { 4.0 } else { 2.0 };
                integral += w * f(i as f64 * h);
            }
            integral *= h / 3.0;
            assert!(
                (d.mean_abs_dev(c) - integral).abs() < 1e-6,
                "c = {c}: closed form {} vs quadrature {integral}",
                d.mean_abs_dev(c)
            );
        }
    }

    #[test]
    fn monte_carlo_dominates_bound() {
        let spec = BoundSpec { n: 10_000, eps: 0.2, lipschitz: 1.0, k: 2, xi: 0.0, m: 1, a: 0.0, b: 1.0 };
        let mut rng = ChaCha20Rng::seed_from_u64(11);
        let out = monte_carlo_thm1(1000, &spec, &mut rng).unwrap();
        assert!(out.dominates_bound(), "empirical {} < bound {} - {}", out.empirical, out.bound, out.slack);
        assert!((out.slack - 0.0632455532).abs() < 1e-6);
    }

    #[test]
    fn monte_carlo_rejects_tiny_trial_count() {
        let spec = BoundSpec { n: 10, eps: 0.1, lipschitz: 1.0, k: 2, xi: 0.0, m: 1, a: 0.0, b: 1.0 };
        let mut rng = ChaCha20Rng::seed_from_u64(0);
        assert!(monte_carlo_thm1(0, &spec, &mut rng).is_err());
        assert!(monte_carlo_thm1(99, &spec, &mut rng).is_err());
    }

    #[test]
    fn monte_carlo_certain_when_eps_exceeds_interval() {
        // the loss can never exceed L * (b - a)
        let spec = BoundSpec { n: 5, eps: 1.5, lipschitz: 1.0, k: 2, xi: 0.0, m: 1, a: 0.0, b: 1.0 };
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        let out = monte_carlo_thm1(200, &spec, &mut rng).unwrap();
        assert_eq!(out.empirical, 1.0);
    }
}
