//! Flat key=value run configuration and the mixture text format.
//!
//! Config files are plain text: one `key = value` per line, `#` comments,
//! and optional `[section]` headers that are cosmetic only. Keys are global.

use crate::mixture::{BaseDistribution, MixtureSpec};
use crate::{Error, Result};
use std::fmt;
use std::str::FromStr;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    FedDistr,
    FedAvg,
    Theory,
    Sweep,
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Mode::FedDistr => "feddistr",
            Mode::FedAvg => "fedavg",
            Mode::Theory => "theory",
            Mode::Sweep => "sweep",
        };
        f.write_str(s)
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "feddistr" => Ok(Mode::FedDistr),
            "fedavg" => Ok(Mode::FedAvg),
            "theory" => Ok(Mode::Theory),
            "sweep" => Ok(Mode::Sweep),
            other => Err(Error::Config(format!("mode: unknown value '{other}'"))),
        }
    }
}

/// How per-label cluster counts are chosen on each client.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum MkSetting {
    /// Count distinct bases per label from the evaluation-only ground truth.
    GroundTruth,
    /// Silhouette-based selection.
    Auto,
    /// Same fixed count for every label.
    Fixed(usize),
}

#[derive(Debug, Clone)]
pub struct RunConfig {
    pub mode: Mode,
    pub seed: u64,
    /// K
    pub clients: usize,
    /// m
    pub bases: usize,
    /// d
    pub dim: usize,
    /// number of superclass labels
    pub labels: usize,
    pub n_per_client: usize,
    pub n_test: usize,
    pub xi: f64,
    /// clip bound C
    pub clip: f64,
    pub sigma: f64,
    /// None = scale-adaptive default
    pub tau: Option<f64>,
    pub mk: MkSetting,
    pub epochs: usize,
    pub lr: f64,
    pub local_epochs: usize,
    pub max_rounds: usize,
    /// None = no target; rounds_to_target stays empty
    pub target_accuracy: Option<f64>,
    /// cap on total regenerated points per client
    pub gen_budget: usize,
    /// delta for the reported Gaussian-mechanism epsilon
    pub delta: f64,
    pub sweep_xis: Vec<f64>,
    pub sweep_modes: Vec<Mode>,
}

impl RunConfig {
    pub fn default_with_seed(seed: u64) -> Self {
        RunConfig {
            mode: Mode::FedDistr,
            seed,
            clients: 5,
            bases: 10,
            dim: 8,
            labels: 5,
            n_per_client: 2000,
            n_test: 2000,
            xi: 0.0,
            clip: 10.0,
            sigma: 0.0,
            tau: None,
            mk: MkSetting::GroundTruth,
            epochs: 30,
            lr: 0.1,
            local_epochs: 1,
            max_rounds: 30,
            target_accuracy: None,
            gen_budget: 10_000,
            delta: 1e-5,
            sweep_xis: vec![0.0, 0.003, 0.057],
            sweep_modes: vec![Mode::FedDistr, Mode::FedAvg],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("clients", self.clients),
            ("bases", self.bases),
            ("dim", self.dim),
            ("labels", self.labels),
            ("n_per_client", self.n_per_client),
            ("n_test", self.n_test),
            ("epochs", self.epochs),
            ("local_epochs", self.local_epochs),
            ("max_rounds", self.max_rounds),
            ("gen_budget", self.gen_budget),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name}: must be >= 1")));
            }
        }
        if self.sigma < 0.0 {
            return Err(Error::Config("sigma: must be nonnegative".into()));
        }
        if !(self.clip > 0.0) {
            return Err(Error::Config("clip: must be positive".into()));
        }
        if !(self.lr > 0.0) {
            return Err(Error::Config("lr: must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.xi) {
            return Err(Error::Config("xi: must lie in [0, 1)".into()));
        }
        if self.labels < 2 {
            return Err(Error::Config("labels: need at least 2 for classification".into()));
        }
        if self.bases < self.clients {
            return Err(Error::Config("bases: must be >= clients".into()));
        }
        Ok(())
    }

    /// Parses config text. The seed key is mandatory unless `seed_override`
    /// is supplied.
    pub fn parse(text: &str, seed_override: Option<u64>) -> Result<RunConfig> {
        let mut cfg = RunConfig::default_with_seed(0);
        let mut seed_seen = false;
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() || (line.starts_with('[') && line.ends_with(']')) {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected key = value, got '{line}'", lineno + 1))
            })?;
            let key = key.trim();
            let value = value.trim();
            let bad = |e: String| Error::Config(format!("{key}: {e}"));
            match key {
                "mode" => cfg.mode = value.parse()?,
                "seed" => {
                    cfg.seed = value.parse().map_err(|e: std::num::ParseIntError| bad(e.to_string()))?;
                    seed_seen = true;
                }
                "clients" => cfg.clients = parse_num(key, value)?,
                "bases" => cfg.bases = parse_num(key, value)?,
                "dim" => cfg.dim = parse_num(key, value)?,
                "labels" => cfg.labels = parse_num(key, value)?,
                "n_per_client" => cfg.n_per_client = parse_num(key, value)?,
                "n_test" => cfg.n_test = parse_num(key, value)?,
                "xi" => cfg.xi = parse_float(key, value)?,
                "clip" => cfg.clip = parse_float(key, value)?,
                "sigma" => cfg.sigma = parse_float(key, value)?,
                "tau" => {
                    cfg.tau = if value == "auto" { None } else { Some(parse_float(key, value)?) }
                }
                "mk" => {
                    cfg.mk = match value {
                        "truth" => MkSetting::GroundTruth,
                        "auto" => MkSetting::Auto,
                        n => MkSetting::Fixed(parse_num(key, n)?),
                    }
                }
                "epochs" => cfg.epochs = parse_num(key, value)?,
                "lr" => cfg.lr = parse_float(key, value)?,
                "local_epochs" => cfg.local_epochs = parse_num(key, value)?,
                "max_rounds" => cfg.max_rounds = parse_num(key, value)?,
                "target_accuracy" => {
                    cfg.target_accuracy =
                        if value == "none" { None } else { Some(parse_float(key, value)?) }
                }
                "gen_budget" => cfg.gen_budget = parse_num(key, value)?,
                "delta" => cfg.delta = parse_float(key, value)?,
                "sweep_xis" => {
                    cfg.sweep_xis = value
                        .split(',')
                        .map(|v| parse_float(key, v.trim()))
                        .collect::<Result<_>>()?
                }
                "sweep_modes" => {
                    cfg.sweep_modes = value
                        .split(',')
                        .map(|v| v.trim().parse())
                        .collect::<Result<_>>()?
                }
                other => return Err(Error::Config(format!("unknown key '{other}'"))),
            }
        }
        if let Some(seed) = seed_override {
            cfg.seed = seed;
        } else if !seed_seen {
            return Err(Error::Config("seed: mandatory key missing".into()));
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_text(&self) -> String {
        let tau = self.tau.map_or("auto".to_string(), |t| t.to_string());
        let mk = match &self.mk {
            MkSetting::GroundTruth => "truth".to_string(),
            MkSetting::Auto => "auto".to_string(),
            MkSetting::Fixed(n) => n.to_string(),
        };
        let target = self.target_accuracy.map_or("none".to_string(), |t| t.to_string());
        let xis: Vec<String> = self.sweep_xis.iter().map(|x| x.to_string()).collect();
        let modes: Vec<String> = self.sweep_modes.iter().map(|m| m.to_string()).collect();
        format!(
            "[run]\nmode = {}\nseed = {}\nclients = {}\nbases = {}\ndim = {}\nlabels = {}\n\
             n_per_client = {}\nn_test = {}\nxi = {}\n\n[privacy]\nclip = {}\nsigma = {}\ndelta = {}\n\n\
             [server]\ntau = {tau}\nmk = {mk}\n\n[training]\nepochs = {}\nlr = {}\n\
             local_epochs = {}\nmax_rounds = {}\ntarget_accuracy = {target}\ngen_budget = {}\n\n\
             [sweep]\nsweep_xis = {}\nsweep_modes = {}\n",
            self.mode,
            self.seed,
            self.clients,
            self.bases,
            self.dim,
            self.labels,
            self.n_per_client,
            self.n_test,
            self.xi,
            self.clip,
            self.sigma,
            self.delta,
            self.epochs,
            self.lr,
            self.local_epochs,
            self.max_rounds,
            self.gen_budget,
            xis.join(","),
            modes.join(","),
        )
    }
}

fn parse_num(key: &str, value: &str) -> Result<usize> {
    value
        .parse()
        .map_err(|e: std::num::ParseIntError| Error::Config(format!("{key}: {e}")))
}

fn parse_float(key: &str, value: &str) -> Result<f64> {
    value
        .parse()
        .map_err(|e: std::num::ParseFloatError| Error::Config(format!("{key}: {e}")))
}

/// Serializes a mixture to the same flat key=value format.
pub fn mixture_to_text(spec: &MixtureSpec) -> String {
    let mut out = String::from("[mixture]\n");
    out.push_str(&format!("bases = {}\n", spec.bases.len()));
    out.push_str(&format!("dim = {}\n", spec.dim()));
    let weights: Vec<String> = spec.global_weights.iter().map(|w| format!("{w:.17e}")).collect();
    out.push_str(&format!("weights = {}\n", weights.join(",")));
    for b in &spec.bases {
        out.push_str(&format!("base.{}.label = {}\n", b.id, b.label));
        let mean: Vec<String> = b.mean.iter().map(|x| format!("{x:.17e}")).collect();
        let scale: Vec<String> = b.scale.iter().map(|x| format!("{x:.17e}")).collect();
        out.push_str(&format!("base.{}.mean = {}\n", b.id, mean.join(",")));
        out.push_str(&format!("base.{}.scale = {}\n", b.id, scale.join(",")));
    }
    out
}

pub fn mixture_from_text(text: &str) -> Result<MixtureSpec> {
    let mut count = None;
    let mut weights: Vec<f64> = Vec::new();
    let mut labels: std::collections::BTreeMap<usize, usize> = Default::default();
    let mut means: std::collections::BTreeMap<usize, Vec<f64>> = Default::default();
    let mut scales: std::collections::BTreeMap<usize, Vec<f64>> = Default::default();
    for raw in text.lines() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() || (line.starts_with('[') && line.ends_with(']')) {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("mixture: expected key = value, got '{line}'")))?;
        let (key, value) = (key.trim(), value.trim());
        let floats = |v: &str| -> Result<Vec<f64>> {
            v.split(',').map(|x| parse_float(key, x.trim())).collect()
        };
        if key == "bases" {
            count = Some(parse_num(key, value)?);
        } else if key == "dim" {
            // informational; validated against the vectors below
        } else if key == "weights" {
            weights = floats(value)?;
        } else if let Some(rest) = key.strip_prefix("base.") {
            let (id, field) = rest
                .split_once('.')
                .ok_or_else(|| Error::Config(format!("mixture: malformed key '{key}'")))?;
            let id: usize = parse_num(key, id)?;
            match field {
                "label" => {
                    labels.insert(id, parse_num(key, value)?);
                }
                "mean" => {
                    means.insert(id, floats(value)?);
                }
                "scale" => {
                    scales.insert(id, floats(value)?);
                }
                other => return Err(Error::Config(format!("mixture: unknown base field '{other}'"))),
            }
        } else {
            return Err(Error::Config(format!("mixture: unknown key '{key}'")));
        }
    }
    let count = count.ok_or_else(|| Error::Config("mixture: missing 'bases' key".into()))?;
    let mut bases = Vec::with_capacity(count);
    for id in 0..count {
        bases.push(BaseDistribution {
            id,
            label: *labels
                .get(&id)
                .ok_or_else(|| Error::Config(format!("mixture: base {id} missing label")))?,
            mean: means
                .remove(&id)
                .ok_or_else(|| Error::Config(format!("mixture: base {id} missing mean")))?,
            scale: scales
                .remove(&id)
                .ok_or_else(|| Error::Config(format!("mixture: base {id} missing scale")))?,
        });
    }
    let spec = MixtureSpec { bases, global_weights: weights };
    spec.validate()?;
    Ok(spec)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_round_trip() {
        let cfg = RunConfig::default_with_seed(99);
        let text = cfg.to_text();
        let back = RunConfig::parse(&text, None).unwrap();
        assert_eq!(back.seed, 99);
        assert_eq!(back.clients, cfg.clients);
        assert_eq!(back.mk, cfg.mk);
        assert_eq!(back.sweep_xis, cfg.sweep_xis);
        assert_eq!(back.sweep_modes, cfg.sweep_modes);
    }

    #[test]
    fn parse_requires_seed() {
        let err = RunConfig::parse("mode = feddistr\n", None).unwrap_err();
        assert!(err.to_string().contains("seed"));
        assert!(RunConfig::parse("mode = feddistr\n", Some(3)).is_ok());
    }

    #[test]
    fn parse_rejects_unknown_key() {
        let err = RunConfig::parse("seed = 1\nbogus = 2\n", None).unwrap_err();
        assert!(err.to_string().contains("bogus"));
    }

    #[test]
    fn parse_surfaces_field_name() {
        let err = RunConfig::parse("seed = 1\nclients = many\n", None).unwrap_err();
        assert!(err.to_string().contains("clients"));
    }

    #[test]
    fn parse_tau_and_mk_variants() {
        let cfg = RunConfig::parse("seed = 1\ntau = 0.4\nmk = 3\n", None).unwrap();
        assert_eq!(cfg.tau, Some(0.4));
        assert_eq!(cfg.mk, MkSetting::Fixed(3));
        let cfg = RunConfig::parse("seed = 1\ntau = auto\nmk = auto\n", None).unwrap();
        assert_eq!(cfg.tau, None);
        assert_eq!(cfg.mk, MkSetting::Auto);
    }

    #[test]
    fn mixture_text_round_trip() {
        let spec = crate::harness::benchmark_mixture(6, 3, 3).unwrap();
        let text = mixture_to_text(&spec);
        let back = mixture_from_text(&text).unwrap();
        assert_eq!(spec, back);
    }
}
