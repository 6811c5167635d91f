use std::collections::BTreeMap;
use std::path::Path;

use anyhow::{bail, Context, Result};
use clap::Args;
use manyserver_core::{DistributionConfig, Family, Grid, Perturbation};
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    pub dt: f64,
    pub t_max: f64,
    pub r_max: f64,
}

impl Default for GridConfig {
    fn default() -> Self {
        GridConfig { dt: 0.01, t_max: 5.0, r_max: 10.0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct QueueSection {
    pub n: usize,
    /// Arrival rate; defaults to N − β√N.
    pub arrival_rate: Option<f64>,
    pub interarrival: DistributionConfig,
    /// Start time of the busy-fraction average.
    pub burn_in: f64,
}

impl Default for QueueSection {
    fn default() -> Self {
        QueueSection {
            n: 100,
            arrival_rate: None,
            interarrival: DistributionConfig::new(Family::Exponential, &[("rate", 1.0)]),
            burn_in: 0.0,
        }
    }
}

/// Parameters shared by all subcommands; each uses the fields it needs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// One step for both time and age.
    pub grid: GridConfig,
    pub distribution: DistributionConfig,
    pub sigma: f64,
    pub beta: f64,
    pub allow_nonpositive_beta: bool,
    /// Coupling rate λ.
    pub lambda: f64,
    pub reps: usize,
    pub seed: u64,
    pub x0: f64,
    pub perturbation: Perturbation,
    /// Second initial condition of the coupling.
    pub x0_tilde: f64,
    pub perturbation_tilde: Perturbation,
    /// Store Z every this many steps.
    pub snapshot_stride: usize,
    /// Ages at which equation residuals are evaluated.
    pub probes: Vec<f64>,
    /// Times of the coupling decay table.
    pub decay_times: Vec<f64>,
    /// Fraction of the horizon discarded before time-averaging.
    pub burn_in: f64,
    pub levels: usize,
    /// (s, t, r) of the shift identities.
    pub shift: (f64, f64, f64),
    pub queue: QueueSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            grid: GridConfig::default(),
            distribution: DistributionConfig::new(Family::Lomax, &[("shape", 3.0), ("scale", 2.0)]),
            sigma: 1.0,
            beta: 0.5,
            allow_nonpositive_beta: false,
            lambda: 1.0,
            reps: 1,
            seed: 1,
            x0: 0.0,
            perturbation: Perturbation::None,
            x0_tilde: 1.0,
            perturbation_tilde: Perturbation::None,
            snapshot_stride: 10,
            probes: vec![0.0, 0.5],
            decay_times: vec![1.0, 2.0, 5.0, 10.0, 20.0],
            burn_in: 0.5,
            levels: 3,
            shift: (0.5, 0.5, 0.5),
            queue: QueueSection::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn grid(&self) -> Result<Grid> {
        let g = &self.grid;
        Grid::new(g.dt, g.t_max, g.r_max).context("invalid grid")
    }

    pub fn validate(&self) -> Result<()> {
        self.grid()?;
        if !(self.beta > 0.0) && !self.allow_nonpositive_beta {
            bail!("β must be positive (got {}); pass --allow-nonpositive-beta to override", self.beta);
        }
        if !(self.sigma > 0.0) {
            bail!("σ must be positive, got {}", self.sigma);
        }
        if self.reps == 0 {
            bail!("reps must be at least 1");
        }
        Ok(())
    }
}

/// Flags shared by every subcommand; set flags override the config file.
#[derive(Args, Clone, Debug, Default)]
pub struct CommonArgs {
    /// JSON experiment config.
    #[arg(long)]
    pub config: Option<std::path::PathBuf>,
    /// Output directory.
    #[arg(long)]
    pub out: std::path::PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Worker threads; defaults to the available cores.
    #[arg(long)]
    pub threads: Option<usize>,
    #[arg(long)]
    pub dt: Option<f64>,
    #[arg(long)]
    pub t_max: Option<f64>,
    #[arg(long)]
    pub r_max: Option<f64>,
    #[arg(long)]
    pub reps: Option<usize>,
    /// exponential, lomax, log_normal, gamma or phase_type.
    #[arg(long)]
    pub family: Option<Family>,
    /// Distribution parameters as key=value pairs, comma separated.
    #[arg(long)]
    pub params: Option<String>,
    #[arg(long, allow_negative_numbers = true)]
    pub sigma: Option<f64>,
    #[arg(long, allow_negative_numbers = true)]
    pub beta: Option<f64>,
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub allow_nonpositive_beta: bool,
}

pub fn parse_params(s: &str) -> Result<BTreeMap<String, f64>> {
    s.split(',')
        .filter(|p| !p.trim().is_empty())
        .map(|p| {
            let (k, v) = p.split_once('=').with_context(|| format!("parameter `{p}` is not key=value"))?;
            let v: f64 = v.trim().parse().with_context(|| format!("parameter `{p}` has a non-numeric value"))?;
            Ok((k.trim().to_string(), v))
        })
        .collect()
}

pub fn load(args: &CommonArgs) -> Result<ExperimentConfig> {
    let mut cfg = match &args.config {
        Some(path) => read_config(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(v) = args.seed {
        cfg.seed = v;
    }
    if let Some(v) = args.dt {
        cfg.grid.dt = v;
    }
    if let Some(v) = args.t_max {
        cfg.grid.t_max = v;
    }
    if let Some(v) = args.r_max {
        cfg.grid.r_max = v;
    }
    if let Some(v) = args.reps {
        cfg.reps = v;
    }
    if let Some(f) = args.family {
        if f != cfg.distribution.family {
            cfg.distribution.family = f;
            cfg.distribution.params.clear();
        }
    }
    if let Some(p) = &args.params {
        cfg.distribution.params.extend(parse_params(p)?);
    }
    if let Some(v) = args.sigma {
        cfg.sigma = v;
    }
    if let Some(v) = args.beta {
        cfg.beta = v;
    }
    if let Some(v) = args.lambda {
        cfg.lambda = v;
    }
    cfg.allow_nonpositive_beta |= args.allow_nonpositive_beta;
    cfg.validate()?;
    Ok(cfg)
}

fn read_config(path: &Path) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("cannot parse {}", path.display()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flags_override_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        std::fs::write(&path, r#"{"beta": 2.0, "grid": {"dt": 0.1, "t_max": 1.0, "r_max": 2.0}, "distribution": {"family": "gamma", "params": {"shape": 2.0, "rate": 2.0}}}"#).unwrap();
        let args = CommonArgs {
            config: Some(path),
            beta: Some(0.25),
            params: Some("rate=3".into()),
            ..Default::default()
        };
        let cfg = load(&args).unwrap();
        assert_eq!(cfg.beta, 0.25);
        assert_eq!(cfg.grid.dt, 0.1);
        assert_eq!(cfg.distribution.params["shape"], 2.0);
        assert_eq!(cfg.distribution.params["rate"], 3.0);
    }

    #[test]
    fn rejects_nonpositive_beta_unless_allowed() {
        let args = CommonArgs { beta: Some(-1.0), ..Default::default() };
        assert!(load(&args).is_err());
        let args = CommonArgs { beta: Some(-1.0), allow_nonpositive_beta: true, ..Default::default() };
        assert!(load(&args).is_ok());
    }

    #[test]
    fn rejects_unknown_keys_and_bad_params() {
        assert!(serde_json::from_str::<ExperimentConfig>(r#"{"betta": 1}"#).is_err());
        assert!(parse_params("shape=x").is_err());
        assert!(parse_params("shape").is_err());
    }
}
