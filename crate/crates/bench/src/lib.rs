//! Benchmark fixtures over the core crate.

pub use manyserver_core::*;

use std::sync::Arc;

use manyserver_core::noise::brownian_path;

/// Model, start point and noise for one diffusion path on a square grid.
pub fn diffusion_fixture(dt: f64, t_max: f64, r_max: f64, seed: u64) -> (DiffusionModel, StatePoint, Arc<TimePath>, Arc<NoiseField>) {
    let d = ServiceDistribution::lomax(3.0, 2.0).expect("valid lomax");
    let grid = Grid::new(dt, t_max, r_max).expect("valid grid");
    let model = DiffusionModel::new(d.clone(), grid, 1.0, 0.5).expect("valid model");
    let y0 = StatePoint::canonical(0.0, &d, Perturbation::None, grid.r_max(), grid.n_r).expect("valid start");
    let b = Arc::new(brownian_path(grid, seed, 1));
    let m = Arc::new(NoiseField::generate(&d, grid, seed));
    (model, y0, b, m)
}
