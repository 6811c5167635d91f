//! Empirical convergence orders of the equation residuals on nested grids
//! driven by the same noise.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::diffusion::{markov_shift_check, spde_residuals, BuildOptions, DiffusionModel};
use crate::distributions::ServiceDistribution;
use crate::error::{Error, Result};
use crate::grid::{Grid, Perturbation, StatePoint};
use crate::noise::{brownian_path, NoiseField};
use crate::stats::{fit_order, OrderFit};

#[derive(Clone, Debug)]
pub struct ConvergenceConfig {
    pub dist: ServiceDistribution,
    /// Coarsest step; level k uses dt / 2^k.
    pub dt: f64,
    pub levels: usize,
    pub t_max: f64,
    pub r_max: f64,
    pub sigma: f64,
    pub beta: f64,
    pub x0: f64,
    pub perturbation: Perturbation,
    pub seed: u64,
    /// Ages at which the Z equation is checked.
    pub probes: Vec<f64>,
    /// (s, t, r) for the shift identities.
    pub shift: (f64, f64, f64),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LevelErrors {
    pub dt: f64,
    pub refine: usize,
    pub res_z: f64,
    pub res_x: f64,
    pub res_zshift: f64,
    pub res_lambda: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceReport {
    pub levels: Vec<LevelErrors>,
    pub res_z: OrderFit,
    pub res_x: OrderFit,
    pub res_zshift: OrderFit,
    pub res_lambda: OrderFit,
}

impl ConvergenceReport {
    /// Smallest least-squares slope across the four residuals.
    pub fn min_order(&self) -> f64 {
        [&self.res_z, &self.res_x, &self.res_zshift, &self.res_lambda]
            .iter()
            .map(|f| f.slope)
            .fold(f64::INFINITY, f64::min)
    }
}

/// Sup-in-time residuals at each level; all levels aggregate the sub-cells of
/// the finest grid.
pub fn convergence_order(cfg: &ConvergenceConfig) -> Result<ConvergenceReport> {
    if cfg.levels < 2 {
        return Err(Error::InvalidParameter("need at least two levels".into()));
    }
    let mut levels = Vec::with_capacity(cfg.levels);
    for k in 0..cfg.levels {
        let dt = cfg.dt / (1usize << k) as f64;
        let refine = 1usize << (cfg.levels - 1 - k);
        let grid = Grid::new(dt, cfg.t_max, cfg.r_max)?;
        let model = DiffusionModel::with_beta_check(cfg.dist.clone(), grid, cfg.sigma, cfg.beta, true)?;
        let y0 = StatePoint::canonical(cfg.x0, &cfg.dist, cfg.perturbation, grid.r_max(), grid.n_r)?;
        let b = Arc::new(brownian_path(grid, cfg.seed, refine));
        let m = Arc::new(NoiseField::generate_refined(&cfg.dist, grid, cfg.seed, refine));
        let path = model.build(&y0, b, m, &BuildOptions::only(Vec::new()))?;
        let mut res_z: f64 = 0.0;
        let mut res_x: f64 = 0.0;
        for r in &cfg.probes {
            let s = spde_residuals(&path, grid.age_index(*r)?);
            res_z = res_z.max(s.sup_z());
            res_x = res_x.max(s.sup_x());
        }
        let (s, t, r) = cfg.shift;
        let mk = markov_shift_check(&path, grid.time_index(s)?, grid.time_index(t)?, grid.age_index(r)?)?;
        levels.push(LevelErrors {
            dt,
            refine,
            res_z,
            res_x,
            res_zshift: mk.res_zshift.abs(),
            res_lambda: mk.res_lambda,
        });
    }
    let steps: Vec<f64> = levels.iter().map(|l| l.dt).collect();
    let fit = |f: fn(&LevelErrors) -> f64| fit_order(&steps, &levels.iter().map(f).collect::<Vec<_>>());
    Ok(ConvergenceReport {
        res_z: fit(|l| l.res_z),
        res_x: fit(|l| l.res_x),
        res_zshift: fit(|l| l.res_zshift),
        res_lambda: fit(|l| l.res_lambda),
        levels,
    })
}
