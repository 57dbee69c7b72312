//! End-to-end orchestration: config parsing, seeded runs of the one-round
//! protocol and the FedAvg baseline, the xi sweep, the theory bound table,
//! and CSV emission.

pub mod config;
pub mod csv;

use crate::baseline::{run_fedavg, CommLedger, FedAvgCfg};
use crate::client::{client_upload, ClientCfg, EncoderCfg, MkMode};
use crate::downstream::{evaluate, generate, sgd_epochs, Classifier};
use crate::mixture::{entanglement_report, partition_for_xi, sample_mixture, BaseDistribution, ClientShard, MixtureSpec};
use crate::server::{align, broadcast};
use crate::theory::{monte_carlo_thm1, BoundSpec};
use crate::{Error, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rayon::prelude::*;
use std::collections::BTreeMap;
use std::time::Instant;

pub use config::{MkSetting, Mode, RunConfig};

/// Outcome of one seeded run.
#[derive(Debug, Clone)]
pub struct RunMetrics {
    pub mode: Mode,
    pub seed: u64,
    pub xi_target: f64,
    pub realized_xi: f64,
    pub per_client_accuracy: Vec<f64>,
    pub mean_accuracy: f64,
    /// 1 - mean accuracy.
    pub utility_loss: f64,
    /// Excess test loss over the centralized oracle, per client.
    pub per_client_eps_u: Vec<f64>,
    pub mean_eps_u: f64,
    pub ledger: CommLedger,
    pub rounds_to_target: Option<usize>,
    pub clip: f64,
    pub sigma: f64,
    /// Single-release Gaussian-mechanism epsilon for the configured delta.
    pub dp_epsilon: Option<f64>,
    pub wall_time: f64,
}

/// Deterministic benchmark mixture: base `i` sits on coordinate axis
/// `i % dim` at radius `2 (1 + i / dim)` with per-axis scale 0.1, so bases
/// are separated by at least 2.0 (20x the scale). Labels cycle through the
/// superclasses.
pub fn benchmark_mixture(bases: usize, dim: usize, labels: usize) -> Result<MixtureSpec> {
    if bases == 0 || dim == 0 || labels == 0 {
        return Err(Error::Config("bases, dim, and labels must all be >= 1".into()));
    }
    let spec = MixtureSpec {
        bases: (0..bases)
            .map(|i| {
                let mut mean = vec![0.0; dim];
                mean[i % dim] = 2.0 * (1 + i / dim) as f64;
                BaseDistribution { id: i, label: i % labels, mean, scale: vec![0.1; dim] }
            })
            .collect(),
        global_weights: vec![1.0 / bases as f64; bases],
    };
    spec.validate()?;
    Ok(spec)
}

/// Gaussian-mechanism privacy budget for one release at the given delta:
/// eps = sqrt(2 ln(1.25 / delta)) / sigma.
pub fn gaussian_mechanism_epsilon(sigma: f64, delta: f64) -> Option<f64> {
    if sigma > 0.0 && delta > 0.0 && delta < 1.0 {
        Some((2.0 * (1.25 / delta).ln()).sqrt() / sigma)
    } else {
        None
    }
}

/// Root-seeded generator on a dedicated stream, one stream per pipeline
/// stage, so stages can be re-run independently.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha20Rng {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

// rng stream tags, one disjoint block per pipeline stage
const STREAM_PARTITION: u64 = 1;
const STREAM_TEST: u64 = 2;
const STREAM_ORACLE: u64 = 3;
const STREAM_FEDAVG: u64 = 4;
const STREAM_UPLOAD: u64 = 100;
const STREAM_GENERATE: u64 = 200;
const STREAM_TRAIN: u64 = 300;

/// Distinct-base count per label actually present in a shard, from the
/// evaluation-only ground truth.
fn ground_truth_mk(shard: &ClientShard) -> MkMode {
    let mut per_label: BTreeMap<usize, std::collections::BTreeSet<usize>> = BTreeMap::new();
    for ((_, y), &base) in shard.points.iter().zip(&shard.base_assignment) {
        per_label.entry(*y).or_default().insert(base);
    }
    MkMode::PerLabel(per_label.into_iter().map(|(y, s)| (y, s.len())).collect())
}

fn build_shards(cfg: &RunConfig, spec: &MixtureSpec) -> Result<Vec<ClientShard>> {
    let mut rng = stream_rng(cfg.seed, STREAM_PARTITION);
    partition_for_xi(spec, cfg.clients, cfg.xi, cfg.n_per_client, &mut rng)
}

fn sample_test_set(cfg: &RunConfig, spec: &MixtureSpec) -> Result<Vec<(Vec<f64>, usize)>> {
    let mut rng = stream_rng(cfg.seed, STREAM_TEST);
    sample_mixture(spec, cfg.n_test, &mut rng)
}

/// Centralized oracle: one model trained on the union of all true shards.
pub fn centralized_oracle(cfg: &RunConfig, shards: &[ClientShard]) -> Result<Classifier> {
    let pooled: Vec<(Vec<f64>, usize)> = shards.iter().flat_map(|s| s.points.clone()).collect();
    let mut model = Classifier::zeros((0..cfg.labels).collect(), cfg.dim)?;
    let mut rng = stream_rng(cfg.seed, STREAM_ORACLE);
    sgd_epochs(&mut model, &pooled, cfg.epochs, cfg.lr, &mut rng)?;
    Ok(model)
}

/// Scales generation counts proportionally when the aggregated counts
/// exceed the per-client budget; every nonzero count stays >= 1.
fn generation_counts(aggregated: &[usize], budget: usize) -> Vec<usize> {
    let total: usize = aggregated.iter().sum();
    if total <= budget || total == 0 {
        return aggregated.to_vec();
    }
    let scale = budget as f64 / total as f64;
    aggregated
        .iter()
        .map(|&c| if c == 0 { 0 } else { ((c as f64 * scale).round() as usize).max(1) })
        .collect()
}

/// One full pass of the one-round protocol.
pub fn run_feddistr(cfg: &RunConfig) -> Result<RunMetrics> {
    let started = Instant::now();
    let spec = benchmark_mixture(cfg.bases, cfg.dim, cfg.labels)?;
    let shards = build_shards(cfg, &spec)?;
    let test = sample_test_set(cfg, &spec)?;
    let realized_xi = if cfg.clients >= 2 {
        entanglement_report(&shards)?.xi_max
    } else {
        0.0
    };

    let mut uploads = Vec::with_capacity(shards.len());
    for shard in &shards {
        let mk_mode = match &cfg.mk {
            MkSetting::GroundTruth => ground_truth_mk(shard),
            MkSetting::Auto => MkMode::Auto,
            MkSetting::Fixed(n) => MkMode::Fixed(*n),
        };
        let client_cfg = ClientCfg {
            encoder: EncoderCfg::Identity { dim: cfg.dim },
            mk_mode,
            clip_bound: cfg.clip,
            noise_sigma: cfg.sigma,
        };
        let mut rng = stream_rng(cfg.seed, STREAM_UPLOAD + shard.client_id as u64);
        uploads.push(client_upload(shard, &client_cfg, &mut rng)?);
    }
    let uplink: usize = uploads.iter().map(|u| u.transmitted_scalars()).sum();

    let alignment = align(&uploads, cfg.tau)?;
    let payload = broadcast(&alignment);
    let payload_scalars: usize = payload.iter().map(|p| p.v.len() + 1).sum();
    let counts = generation_counts(&alignment.aggregated_counts, cfg.gen_budget);

    let oracle = centralized_oracle(cfg, &shards)?;
    let oracle_loss = evaluate(&oracle, &test)?.mean_loss;

    let mut per_client_accuracy = Vec::with_capacity(shards.len());
    let mut per_client_eps_u = Vec::with_capacity(shards.len());
    for shard in &shards {
        let mut gen_rng = stream_rng(cfg.seed, STREAM_GENERATE + shard.client_id as u64);
        let regenerated = generate(&payload, &counts, &mut gen_rng)?;
        let mut model = Classifier::zeros((0..cfg.labels).collect(), cfg.dim)?;
        let mut train_rng = stream_rng(cfg.seed, STREAM_TRAIN + shard.client_id as u64);
        sgd_epochs(&mut model, &regenerated, cfg.epochs, cfg.lr, &mut train_rng)?;
        let eval = evaluate(&model, &test)?;
        per_client_accuracy.push(eval.accuracy);
        per_client_eps_u.push(eval.mean_loss - oracle_loss);
    }

    let mean_accuracy = per_client_accuracy.iter().sum::<f64>() / per_client_accuracy.len() as f64;
    let mean_eps_u = per_client_eps_u.iter().sum::<f64>() / per_client_eps_u.len() as f64;
    Ok(RunMetrics {
        mode: Mode::FedDistr,
        seed: cfg.seed,
        xi_target: cfg.xi,
        realized_xi,
        mean_accuracy,
        utility_loss: 1.0 - mean_accuracy,
        per_client_accuracy,
        per_client_eps_u,
        mean_eps_u,
        ledger: CommLedger {
            rounds: 1,
            uplink_scalars: uplink,
            downlink_scalars: cfg.clients * payload_scalars,
        },
        rounds_to_target: Some(1),
        clip: cfg.clip,
        sigma: cfg.sigma,
        dp_epsilon: gaussian_mechanism_epsilon(cfg.sigma, cfg.delta),
        wall_time: started.elapsed().as_secs_f64(),
    })
}

/// FedAvg baseline on the same shards. `target_accuracy` overrides the
/// configured target when given (the sweep passes the one-round accuracy).
pub fn run_fedavg_mode(cfg: &RunConfig, target_accuracy: Option<f64>) -> Result<RunMetrics> {
    let started = Instant::now();
    let spec = benchmark_mixture(cfg.bases, cfg.dim, cfg.labels)?;
    let shards = build_shards(cfg, &spec)?;
    let test = sample_test_set(cfg, &spec)?;
    let realized_xi = if cfg.clients >= 2 {
        entanglement_report(&shards)?.xi_max
    } else {
        0.0
    };

    let initial = Classifier::zeros((0..cfg.labels).collect(), cfg.dim)?;
    // an unset target never triggers, so rounds_to_target stays empty
    let target = target_accuracy.or(cfg.target_accuracy).unwrap_or(f64::INFINITY);
    let fed_cfg = FedAvgCfg {
        local_epochs: cfg.local_epochs,
        lr: cfg.lr,
        target_accuracy: target,
        max_rounds: cfg.max_rounds,
    };
    let mut rng = stream_rng(cfg.seed, STREAM_FEDAVG);
    let outcome = run_fedavg(&initial, &shards, &test, &fed_cfg, &mut rng)?;

    let oracle = centralized_oracle(cfg, &shards)?;
    let oracle_loss = evaluate(&oracle, &test)?.mean_loss;
    let eval = evaluate(&outcome.model, &test)?;
    let eps_u = eval.mean_loss - oracle_loss;

    Ok(RunMetrics {
        mode: Mode::FedAvg,
        seed: cfg.seed,
        xi_target: cfg.xi,
        realized_xi,
        per_client_accuracy: vec![eval.accuracy; cfg.clients],
        mean_accuracy: eval.accuracy,
        utility_loss: 1.0 - eval.accuracy,
        per_client_eps_u: vec![eps_u; cfg.clients],
        mean_eps_u: eps_u,
        ledger: outcome.ledger,
        rounds_to_target: outcome.rounds_to_target,
        clip: cfg.clip,
        sigma: cfg.sigma,
        dp_epsilon: None,
        wall_time: started.elapsed().as_secs_f64(),
    })
}

/// Dispatches a single run by mode.
pub fn run(cfg: &RunConfig) -> Result<RunMetrics> {
    cfg.validate()?;
    match cfg.mode {
        Mode::FedDistr => run_feddistr(cfg),
        Mode::FedAvg => run_fedavg_mode(cfg, None),
        _ => Err(Error::Config(format!(
            "mode {} is not a single-run mode; use the sweep or theory entry points",
            cfg.mode
        ))),
    }
}

/// One sweep cell: the configuration summary plus the run outcome or the
/// error string that stopped it.
#[derive(Debug)]
pub struct SweepRow {
    pub mode: Mode,
    pub xi: f64,
    pub seed: u64,
    pub outcome: std::result::Result<RunMetrics, String>,
}

/// Runs the full xi grid for every sweep mode. FedDistr cells run first so
/// FedAvg cells can target the one-round accuracy at the same xi.
pub fn sweep(cfg: &RunConfig) -> Result<Vec<SweepRow>> {
    cfg.validate()?;
    if cfg.sweep_xis.is_empty() || cfg.sweep_modes.is_empty() {
        return Err(Error::Config("sweep grid is empty".into()));
    }

    let cell_cfg = |xi: f64, idx: usize| {
        let mut c = cfg.clone();
        c.xi = xi;
        c.seed = cfg.seed.wrapping_add(1000 * idx as u64);
        c
    };

    let feddistr_rows: Vec<SweepRow> = cfg
        .sweep_xis
        .par_iter()
        .enumerate()
        .map(|(i, &xi)| {
            let c = cell_cfg(xi, i);
            SweepRow {
                mode: Mode::FedDistr,
                xi,
                seed: c.seed,
                outcome: run_feddistr(&c).map_err(|e| e.to_string()),
            }
        })
        .collect();

    let mut rows = Vec::new();
    for mode in &cfg.sweep_modes {
        match mode {
            Mode::FedDistr => rows.extend(
                cfg.sweep_xis
                    .iter()
                    .enumerate()
                    .map(|(i, &xi)| {
                        let r = &feddistr_rows[i];
                        SweepRow { mode: Mode::FedDistr, xi, seed: r.seed, outcome: r.outcome.clone() }
                    }),
            ),
            Mode::FedAvg => {
                let fedavg_rows: Vec<SweepRow> = cfg
                    .sweep_xis
                    .par_iter()
                    .enumerate()
                    .map(|(i, &xi)| {
                        let c = cell_cfg(xi, i);
                        let target = feddistr_rows[i]
                            .outcome
                            .as_ref()
                            .ok()
                            .map(|m| m.mean_accuracy);
                        SweepRow {
                            mode: Mode::FedAvg,
                            xi,
                            seed: c.seed,
                            outcome: run_fedavg_mode(&c, target).map_err(|e| e.to_string()),
                        }
                    })
                    .collect();
                rows.extend(fedavg_rows);
            }
            other => {
                return Err(Error::Config(format!("mode {other} cannot appear in a sweep grid")));
            }
        }
    }
    Ok(rows)
}

/// One row of the theory bound table.
#[derive(Debug, Clone)]
pub struct TheoryRow {
    pub n: usize,
    pub eps: f64,
    pub lipschitz: f64,
    pub k: usize,
    pub xi: f64,
    pub m: usize,
    pub bound: f64,
    pub empirical: f64,
}

/// Monte Carlo bound validation over an (n, eps) grid.
pub fn theory_table(cfg: &RunConfig, trials: usize) -> Result<Vec<TheoryRow>> {
    let grid_n = [200usize, 1000, 5000];
    let grid_eps = [0.05f64, 0.1, 0.2];
    let cells: Vec<(usize, f64)> = grid_n
        .iter()
        .flat_map(|&n| grid_eps.iter().map(move |&e| (n, e)))
        .collect();
    cells
        .par_iter()
        .enumerate()
        .map(|(i, &(n, eps))| {
            let spec = BoundSpec {
                n,
                eps,
                lipschitz: 1.0,
                k: cfg.clients.max(2),
                xi: cfg.xi,
                m: cfg.bases,
                a: 0.0,
                b: 1.0,
            };
            let mut rng = stream_rng(cfg.seed, 400 + i as u64);
            let out = monte_carlo_thm1(trials, &spec, &mut rng)?;
            Ok(TheoryRow {
                n,
                eps,
                lipschitz: spec.lipschitz,
                k: spec.k,
                xi: spec.xi,
                m: spec.m,
                bound: out.bound,
                empirical: out.empirical,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quick_cfg(seed: u64) -> RunConfig {
        let mut cfg = RunConfig::default_with_seed(seed);
        cfg.n_per_client = 200;
        cfg.n_test = 400;
        cfg.epochs = 10;
        cfg.gen_budget = 1000;
        cfg.max_rounds = 3;
        cfg
    }

    #[test]
    fn benchmark_mixture_separation() {
        let spec = benchmark_mixture(10, 8, 5).unwrap();
        for i in 0..10 {
            for j in (i + 1)..10 {
                let d = crate::linalg::dist(&spec.bases[i].mean, &spec.bases[j].mean);
                assert!(d >= 2.0 - 1e-9, "bases {i},{j} at distance {d}");
            }
        }
    }

    #[test]
    fn feddistr_run_reports_one_round() {
        let m = run_feddistr(&quick_cfg(42)).unwrap();
        assert_eq!(m.ledger.rounds, 1);
        assert_eq!(m.ledger.uplink_scalars % (2 * 8 + 1), 0);
        assert_eq!(m.per_client_accuracy.len(), 5);
    }

    #[test]
    fn feddistr_deterministic_per_seed() {
        let a = run_feddistr(&quick_cfg(7)).unwrap();
        let b = run_feddistr(&quick_cfg(7)).unwrap();
        assert_eq!(a.per_client_accuracy, b.per_client_accuracy);
        assert_eq!(a.ledger, b.ledger);
        assert_eq!(a.realized_xi, b.realized_xi);
    }

    #[test]
    fn fedavg_run_counts_rounds() {
        let m = run_fedavg_mode(&quick_cfg(42), Some(0.0)).unwrap();
        assert_eq!(m.ledger.rounds, 3);
        assert_eq!(m.rounds_to_target, Some(1));
        let weight_count = 5 * (8 + 1);
        assert_eq!(m.ledger.uplink_scalars, 3 * 5 * weight_count);
    }

    #[test]
    fn sweep_produces_grid_rows() {
        let mut cfg = quick_cfg(1);
        cfg.sweep_xis = vec![0.0, 0.057];
        cfg.sweep_modes = vec![Mode::FedDistr, Mode::FedAvg];
        let rows = sweep(&cfg).unwrap();
        assert_eq!(rows.len(), 4);
        for row in &rows {
            let m = row.outcome.as_ref().expect("cell failed");
            match row.mode {
                Mode::FedDistr => assert_eq!(m.ledger.rounds, 1),
                Mode::FedAvg => assert!(m.ledger.rounds >= 1),
                _ => unreachable!(),
            }
        }
    }

    #[test]
    fn epsilon_reporting() {
        assert!(gaussian_mechanism_epsilon(0.0, 1e-5).is_none());
        let eps = gaussian_mechanism_epsilon(1.0, 1e-5).unwrap();
        assert!((eps - (2.0 * (1.25e5f64).ln()).sqrt()).abs() < 1e-12);
    }

    #[test]
    fn generation_counts_respect_budget() {
        let counts = generation_counts(&[600, 300, 100], 500);
        assert!(counts.iter().sum::<usize>() <= 510);
        assert!(counts.iter().all(|&c| c >= 1));
        assert_eq!(generation_counts(&[10, 20], 1000), vec![10, 20]);
    }
}
