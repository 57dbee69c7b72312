//! FedAvg reference loop with communication accounting, for the efficiency
//! comparison against the one-round protocol.

use crate::downstream::{evaluate, sgd_epochs, Classifier};
use crate::mixture::ClientShard;
use crate::{Error, Result};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

/// Communication totals for one run. The one-round protocol always reports
/// `rounds == 1`.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct CommLedger {
    pub rounds: usize,
    pub uplink_scalars: usize,
    pub downlink_scalars: usize,
}

/// One FedAvg round: every client copies the global model, runs
/// `local_epochs` of SGD on its shard, and the server returns the
/// data-size-weighted average of the client models.
pub fn fedavg_round<R: Rng>(
    global: &Classifier,
    shards: &[ClientShard],
    local_epochs: usize,
    lr: f64,
    rng: &mut R,
    ledger: &mut CommLedger,
) -> Result<Classifier> {
    if shards.is_empty() {
        return Err(Error::Input("fedavg_round: no shards".into()));
    }
    let weight_count = global.num_parameters();
    let mut sum = vec![vec![0.0; global.dim() + 1]; global.num_classes()];
    let mut total_n = 0usize;
    let mut active = 0usize;
    for shard in shards {
        // per-client generator derived in shard order keeps rounds reproducible
        let mut client_rng = ChaCha20Rng::seed_from_u64(rng.gen());
        if shard.points.is_empty() {
            eprintln!("warning: skipping empty shard for client {}", shard.client_id);
            continue;
        }
        let mut local = global.clone();
        sgd_epochs(&mut local, &shard.points, local_epochs, lr, &mut client_rng)?;
        let n = shard.points.len();
        for (s, w) in sum.iter_mut().zip(&local.weights) {
            for (si, wi) in s.iter_mut().zip(w) {
                *si += wi * n as f64;
            }
        }
        total_n += n;
        active += 1;
    }
    if total_n == 0 {
        return Err(Error::Input("fedavg_round: all shards empty".into()));
    }
    for row in &mut sum {
        for s in row.iter_mut() {
            *s /= total_n as f64;
        }
    }
    ledger.rounds += 1;
    ledger.uplink_scalars += active * weight_count;
    ledger.downlink_scalars += active * weight_count;
    Ok(Classifier { weights: sum, classes: global.classes.clone() })
}

#[derive(Debug, Clone)]
pub struct FedAvgCfg {
    pub local_epochs: usize,
    pub lr: f64,
    pub target_accuracy: f64,
    pub max_rounds: usize,
}

#[derive(Debug, Clone)]
pub struct FedAvgOutcome {
    pub model: Classifier,
    pub ledger: CommLedger,
    /// First round at which held-out accuracy reached the target, if ever.
    pub rounds_to_target: Option<usize>,
    /// Held-out accuracy after each round.
    pub round_accuracy: Vec<f64>,
}

/// Iterates FedAvg rounds until `max_rounds`, recording the first crossing
/// of the target held-out accuracy.
pub fn run_fedavg<R: Rng>(
    initial: &Classifier,
    shards: &[ClientShard],
    test: &[(Vec<f64>, usize)],
    cfg: &FedAvgCfg,
    rng: &mut R,
) -> Result<FedAvgOutcome> {
    if cfg.max_rounds == 0 {
        return Err(Error::Config("max_rounds must be >= 1".into()));
    }
    let mut model = initial.clone();
    let mut ledger = CommLedger::default();
    let mut rounds_to_target = None;
    let mut round_accuracy = Vec::new();
    for round in 1..=cfg.max_rounds {
        model = fedavg_round(&model, shards, cfg.local_epochs, cfg.lr, rng, &mut ledger)?;
        let acc = evaluate(&model, test)?.accuracy;
        round_accuracy.push(acc);
        if rounds_to_target.is_none() && acc >= cfg.target_accuracy {
            rounds_to_target = Some(round);
        }
    }
    Ok(FedAvgOutcome { model, ledger, rounds_to_target, round_accuracy })
}
