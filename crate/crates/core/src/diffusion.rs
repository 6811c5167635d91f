//! The explicit diffusion model (X, Z): the centered many-server map, the
//! construction of Z and its weak derivative, and residual checks of the
//! equations the construction is meant to solve.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::distributions::ServiceDistribution;
use crate::error::{Error, Result};
use crate::grid::{Grid, GridFunction, H1GridFunction, StatePoint, TimePath};
use crate::kernels::{conv_trap, gamma_values, volterra_plus, trap_weight};
use crate::noise::{NoiseAccumulator, NoiseField, Weight};
use crate::tables::GridTables;

/// Table length needed for a grid: ages up to t + 2·r_max plus one cell.
pub fn table_len(grid: &Grid) -> usize {
    grid.n_t + 2 * grid.n_r + 2
}

/// Output of the centered many-server map.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CmsOutput {
    pub kappa: Vec<f64>,
    pub x: Vec<f64>,
    /// sup |x∧0 − ζ − κ + g∗κ|.
    pub res_boundary: f64,
    /// sup |κ − η + x⁺ − x₀⁺|.
    pub res_kappa: f64,
}

/// (κ, x) = Λ(η, x₀, ζ) on the grid of `tables`.
///
/// The forcing uses x₀⁺(1 − g∗1) with the discrete convolution in place of
/// Ḡ(t)x₀⁺, which makes the first map equation hold to rounding.
pub fn cms_map_tables(eta: &[f64], x0: f64, zeta: &[f64], tables: &GridTables) -> Result<CmsOutput> {
    let n = eta.len();
    if zeta.len() != n || n == 0 {
        return Err(Error::Grid(format!("η has {n} points but ζ has {}", zeta.len())));
    }
    if tables.len() < n {
        return Err(Error::Grid("tables shorter than the input paths".into()));
    }
    let tol = 1e-9 * (1.0 + x0.abs());
    if eta[0].abs() > tol {
        return Err(Error::Precondition(format!("η(0) must be 0, got {}", eta[0])));
    }
    if (zeta[0] - x0.min(0.0)).abs() > tol {
        return Err(Error::Precondition(format!("ζ(0) = {} must equal x₀∧0 = {}", zeta[0], x0.min(0.0))));
    }
    let dt = tables.dt;
    let g = &tables.dens[..n];
    let x0p = x0.max(0.0);
    let g_eta = conv_trap(eta, g, dt, n);
    let g_one = conv_trap(&vec![1.0; n], g, dt, n);
    let r: Vec<f64> = (0..n).map(|i| zeta[i] + eta[i] - g_eta[i] + x0p * (1.0 - g_one[i])).collect();
    let mut x = volterra_plus(&r, g, dt)?;
    x[0] = x0;
    let kappa: Vec<f64> = (0..n).map(|i| eta[i] - x[i].max(0.0) + x0p).collect();
    let g_kappa = conv_trap(&kappa, g, dt, n);
    let res_boundary = (0..n)
        .map(|i| (x[i].min(0.0) - zeta[i] - kappa[i] + g_kappa[i]).abs())
        .fold(0.0, f64::max);
    let res_kappa = (0..n).map(|i| (kappa[i] - eta[i] + x[i].max(0.0) - x0p).abs()).fold(0.0, f64::max);
    Ok(CmsOutput { kappa, x, res_boundary, res_kappa })
}

/// (κ, x) = Λ(η, x₀, ζ) for paths on a shared grid.
pub fn cms_map(eta: &TimePath, x0: f64, zeta: &TimePath, d: &ServiceDistribution) -> Result<(TimePath, TimePath, CmsOutput)> {
    let dt = eta.dt();
    let tables = GridTables::new(d, dt, eta.len());
    let out = cms_map_tables(&eta.values, x0, &zeta.values, &tables)?;
    Ok((TimePath::new(dt, out.kappa.clone())?, TimePath::new(dt, out.x.clone())?, out))
}

/// A diffusion model with fixed law, grid and parameters.
#[derive(Clone, Debug)]
pub struct DiffusionModel {
    pub dist: ServiceDistribution,
    pub grid: Grid,
    pub tables: Arc<GridTables>,
    pub sigma: f64,
    pub beta: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BuildOptions {
    /// Keep Z every this many steps; 0 keeps only the final step.
    pub snapshot_stride: usize,
    /// Further steps at which Z is kept.
    pub extra_steps: Vec<usize>,
}

impl Default for BuildOptions {
    fn default() -> Self {
        BuildOptions { snapshot_stride: 10, extra_steps: Vec::new() }
    }
}

impl BuildOptions {
    pub fn only(steps: Vec<usize>) -> Self {
        BuildOptions { snapshot_stride: usize::MAX, extra_steps: steps }
    }

    fn wants(&self, n: usize, n_t: usize) -> bool {
        (self.snapshot_stride == 0 && n == n_t)
            || (self.snapshot_stride != 0 && self.snapshot_stride != usize::MAX && n % self.snapshot_stride == 0)
            || self.extra_steps.contains(&n)
    }
}

/// Z(t, ·) at one time step, with the noise profile used to build it.
#[derive(Clone, Debug)]
pub struct Snapshot {
    pub step: usize,
    pub z: H1GridFunction,
    /// M_t(Ψ_{t+r}𝟙) at r = lΔ.
    pub psi_one: Vec<f64>,
}

/// Shared inputs of a path.
#[derive(Clone, Debug)]
pub struct PathInputs {
    pub y0: StatePoint,
    pub brownian: Arc<TimePath>,
    pub noise: Arc<NoiseField>,
    pub dist: ServiceDistribution,
    pub tables: Arc<GridTables>,
    pub sigma: f64,
    pub beta: f64,
}

#[derive(Clone, Debug)]
pub struct DiffusionPath {
    pub grid: Grid,
    pub x: TimePath,
    pub k: TimePath,
    pub e: TimePath,
    /// H_t(𝟙) = M_t(Ψ_t𝟙).
    pub h_one: Vec<f64>,
    /// H_t(h) = M_t(Ψ_t h).
    pub h_h: Vec<f64>,
    /// M_t(𝟙).
    pub m_one: Vec<f64>,
    pub snapshots: Vec<Snapshot>,
    /// max over grid times of |Z(t,0) − X(t)∧0|.
    pub boundary_max: f64,
    pub cms: CmsResiduals,
    pub inputs: PathInputs,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CmsResiduals {
    pub boundary: f64,
    pub kappa: f64,
}

impl DiffusionModel {
    pub fn new(dist: ServiceDistribution, grid: Grid, sigma: f64, beta: f64) -> Result<Self> {
        Self::with_beta_check(dist, grid, sigma, beta, false)
    }

    pub fn with_beta_check(dist: ServiceDistribution, grid: Grid, sigma: f64, beta: f64, allow_nonpositive_beta: bool) -> Result<Self> {
        if !(sigma > 0.0 && sigma.is_finite()) {
            return Err(Error::InvalidParameter(format!("σ must be positive, got {sigma}")));
        }
        if !beta.is_finite() || (!allow_nonpositive_beta && beta <= 0.0) {
            return Err(Error::InvalidParameter(format!("β must be positive, got {beta}")));
        }
        let tables = GridTables::shared(&dist, grid.dt, table_len(&grid));
        if 0.5 * grid.dt * tables.dens[0] >= 1.0 {
            return Err(Error::Grid(format!("step {} too large for g(0) = {}", grid.dt, tables.dens[0])));
        }
        Ok(DiffusionModel { dist, grid, tables, sigma, beta })
    }

    pub fn state_compatible(&self, y0: &StatePoint) -> Result<()> {
        if y0.z.n_r() != self.grid.n_r || (y0.z.dr() - self.grid.dt).abs() > 1e-12 * self.grid.dt {
            return Err(Error::Grid(format!(
                "initial profile grid (n_r = {}, Δr = {}) differs from the model grid (n_r = {}, Δ = {})",
                y0.z.n_r(),
                y0.z.dr(),
                self.grid.n_r,
                self.grid.dt
            )));
        }
        Ok(())
    }

    pub fn build(&self, y0: &StatePoint, b: Arc<TimePath>, m: Arc<NoiseField>, opts: &BuildOptions) -> Result<DiffusionPath> {
        let g = self.grid;
        self.state_compatible(y0)?;
        if b.len() != g.n_t + 1 || m.grid != g {
            return Err(Error::Grid("Brownian path or noise field does not match the model grid".into()));
        }
        let (n_t, n_r, dt) = (g.n_t, g.n_r, g.dt);
        let tables = &*self.tables;
        let mut acc = NoiseAccumulator::new(&m, tables);
        let mut h_one = Vec::with_capacity(n_t + 1);
        let mut h_h = Vec::with_capacity(n_t + 1);
        let mut m_one = Vec::with_capacity(n_t + 1);
        let mut profiles = Vec::new();
        for n in 0..=n_t {
            h_one.push(acc.psi(0, Weight::One));
            h_h.push(acc.psi(0, Weight::H));
            m_one.push(acc.total());
            if opts.wants(n, n_t) {
                profiles.push((n, acc.psi_profile(n_r + 1, Weight::One), acc.psi_profile(n_r + 1, Weight::H)));
            }
            if n < n_t {
                acc.advance();
            }
        }
        let e: Vec<f64> = (0..=n_t).map(|i| self.sigma * b.values[i] - self.beta * i as f64 * dt).collect();
        let zeta: Vec<f64> = (0..=n_t).map(|i| y0.z.value_at(i) - h_one[i]).collect();
        let cms = cms_map_tables(&e, y0.x, &zeta, tables)?;

        let g_k = conv_trap(&cms.kappa, &tables.dens, dt, n_t + 1);
        let mut boundary_max = (0..=n_t)
            .map(|i| (zeta[i] + cms.kappa[i] - g_k[i] - cms.x[i].min(0.0)).abs())
            .fold(0.0, f64::max);
        let mut snapshots = Vec::with_capacity(profiles.len());
        for (n, psi_one, psi_h) in profiles {
            let z = assemble_z(&y0.z, n, &psi_one, &psi_h, &cms.kappa, tables, n_r);
            boundary_max = boundary_max.max((z.base.values[0] - cms.x[n].min(0.0)).abs());
            snapshots.push(Snapshot { step: n, z, psi_one });
        }
        Ok(DiffusionPath {
            grid: g,
            x: TimePath::raw(dt, cms.x.clone()),
            k: TimePath::raw(dt, cms.kappa.clone()),
            e: TimePath::raw(dt, e),
            h_one,
            h_h,
            m_one,
            snapshots,
            boundary_max,
            cms: CmsResiduals { boundary: cms.res_boundary, kappa: cms.res_kappa },
            inputs: PathInputs {
                y0: y0.clone(),
                brownian: b,
                noise: m,
                dist: self.dist.clone(),
                tables: self.tables.clone(),
                sigma: self.sigma,
                beta: self.beta,
            },
        })
    }
}

/// Z(t,·) = z₀(t+·) − M_t(Ψ_{t+·}𝟙) + Γ_tκ and
/// ∂_rZ(t,·) = z₀′(t+·) + M_t(Ψ_{t+·}h) − g(·)κ(t) − ∫κ(s)g′(t+·−s)ds.
pub fn assemble_z(
    z0: &H1GridFunction,
    n: usize,
    psi_one: &[f64],
    psi_h: &[f64],
    kappa: &[f64],
    tables: &GridTables,
    n_r: usize,
) -> H1GridFunction {
    let (gv, gd) = gamma_values(kappa, n, tables, n_r);
    let mut v = Vec::with_capacity(n_r + 1);
    let mut d = Vec::with_capacity(n_r + 1);
    for l in 0..=n_r {
        let (a, b) = z0.at_index(n + l);
        v.push(a - psi_one[l] + gv[l]);
        d.push(b + psi_h[l] + gd[l]);
    }
    let r_max = n_r as f64 * tables.dt;
    H1GridFunction::new(GridFunction { r_max, n_r, values: v }, GridFunction { r_max, n_r, values: d })
        .expect("matching grids")
}

impl DiffusionPath {
    pub fn snapshot(&self, step: usize) -> Option<&Snapshot> {
        self.snapshots.iter().find(|s| s.step == step)
    }

    /// Recomputes Z(t_n, ·) from the stored inputs.
    pub fn z_at(&self, n: usize) -> H1GridFunction {
        let n_r = self.grid.n_r;
        let acc = self.accumulator_at(n);
        let psi_one = acc.psi_profile(n_r + 1, Weight::One);
        let psi_h = acc.psi_profile(n_r + 1, Weight::H);
        assemble_z(&self.inputs.y0.z, n, &psi_one, &psi_h, &self.k.values, &self.inputs.tables, n_r)
    }

    fn accumulator_at(&self, n: usize) -> NoiseAccumulator<'_> {
        let mut acc = NoiseAccumulator::new(&self.inputs.noise, &self.inputs.tables);
        for _ in 0..n {
            acc.advance();
        }
        acc
    }

    /// Z(t_n, r_v) for ages possibly past r_max.
    fn z_value(&self, n: usize, v: usize, psi_one_v: f64) -> f64 {
        self.inputs.y0.z.value_at(n + v) - psi_one_v + gamma_at(&self.k.values, n, v, &self.inputs.tables)
    }
}

/// Residual paths of the integrated equations for Z(·, r) and X.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpdeResidual {
    pub l: usize,
    /// Z(t,r) − Z₀(r) − ∫₀^t ∂_rZ(s,r)ds + M_t(Φ_r𝟙) − Ḡ(r)K(t).
    pub res_z: Vec<f64>,
    /// X(t) − X₀ − σB(t) + βt + M_t(𝟙) − ∫₀^t ∂_rZ(s,0)ds.
    pub res_x: Vec<f64>,
}

impl SpdeResidual {
    pub fn sup_z(&self) -> f64 {
        self.res_z.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn sup_x(&self) -> f64 {
        self.res_x.iter().fold(0.0, |m, v| m.max(v.abs()))
    }
}

/// (Γ_sκ)′(r_l) for every s = kΔ ≤ t_n.
fn gamma_deriv_path(kappa: &[f64], n: usize, l: usize, tables: &GridTables) -> Vec<f64> {
    let dt = tables.dt;
    (0..=n)
        .map(|k| {
            let mut s = 0.0;
            for u in 0..=k {
                s += trap_weight(u, k) * kappa[u] * tables.dens_deriv[k - u + l];
            }
            let integral = if k == 0 { 0.0 } else { dt * s };
            -tables.dens[l] * kappa[k] - integral
        })
        .collect()
}

/// Residuals at every grid time for age r_l, with ∫∂_rZ by the trapezoid rule
/// over the stored derivative formula.
pub fn spde_residuals(path: &DiffusionPath, l: usize) -> SpdeResidual {
    let g = path.grid;
    let (n_t, dt) = (g.n_t, g.dt);
    let tables = &*path.inputs.tables;
    let z0 = &path.inputs.y0.z;
    let kappa = &path.k.values;
    let gd_l = gamma_deriv_path(kappa, n_t, l, tables);
    let gd_0 = if l == 0 { gd_l.clone() } else { gamma_deriv_path(kappa, n_t, 0, tables) };
    let mut acc = NoiseAccumulator::new(&path.inputs.noise, tables);
    let mut res_z = Vec::with_capacity(n_t + 1);
    let mut res_x = Vec::with_capacity(n_t + 1);
    let (mut int_l, mut int_0) = (0.0, 0.0);
    let (mut prev_l, mut prev_0) = (0.0, 0.0);
    let sig = path.inputs.sigma;
    let beta = path.inputs.beta;
    for n in 0..=n_t {
        let d_l = z0.deriv_at(n + l) + acc.psi(l, Weight::H) + gd_l[n];
        let d_0 = z0.deriv_at(n) + acc.psi(0, Weight::H) + gd_0[n];
        if n > 0 {
            int_l += 0.5 * dt * (prev_l + d_l);
            int_0 += 0.5 * dt * (prev_0 + d_0);
        }
        prev_l = d_l;
        prev_0 = d_0;
        let psi_one = acc.psi(l, Weight::One);
        let z = path.z_value(n, l, psi_one);
        res_z.push(z - z0.value_at(l) - int_l + acc.phi(l, Weight::One) - tables.bar[l] * kappa[n]);
        let t = n as f64 * dt;
        res_x.push(
            path.x.values[n] - path.inputs.y0.x - sig * path.inputs.brownian.values[n] + beta * t + acc.total()
                - int_0,
        );
        if n < n_t {
            acc.advance();
        }
    }
    SpdeResidual { l, res_z, res_x }
}

/// (res_z, res_x) at t = nΔ, r = lΔ.
pub fn spde_residual(path: &DiffusionPath, n: usize, l: usize) -> (f64, f64) {
    let r = spde_residuals(path, l);
    (r.res_z[n], r.res_x[n])
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MarkovResidual {
    /// Z(s+t,r) − Z(s,t+r) − (Γ_tΘ_sK)(r) + (Θ_sH)_t(Φ_r𝟙).
    pub res_zshift: f64,
    /// sup over [0,t] of |X(s+·) − x′| with x′ from the re-solved map.
    pub res_lambda: f64,
    /// sup over [0,t] of |Θ_sK − κ′|.
    pub res_kappa: f64,
    /// (Γ_tΘ_sK)(r) − (Γ_{s+t}K)(r) + (Γ_sK)(t+r); the noise terms cancel on
    /// the lattice, so this equals −res_zshift up to rounding.
    pub res_gamma: f64,
}

/// Shift identities at s = i_sΔ, t = i_tΔ, r = lΔ.
pub fn markov_shift_check(path: &DiffusionPath, i_s: usize, i_t: usize, l: usize) -> Result<MarkovResidual> {
    let g = path.grid;
    if i_s + i_t > g.n_t || l > g.n_r {
        return Err(Error::Grid("shift times beyond the path horizon".into()));
    }
    let tables = &*path.inputs.tables;
    let kappa = &path.k.values;
    let z0 = &path.inputs.y0.z;

    let acc_s = path.accumulator_at(i_s);
    let acc_st = path.accumulator_at(i_s + i_t);
    let n_prof = (i_t + l).max(i_t) + 1;
    let psi_s = acc_s.psi_profile(n_prof, Weight::One);

    // Z(s+t, r).
    let lhs = z0.value_at(i_s + i_t + l) - acc_st.psi(l, Weight::One) + gamma_at(kappa, i_s + i_t, l, tables);
    // Z(s, t+r).
    let z_s_tr = z0.value_at(i_s + i_t + l) - psi_s[i_t + l] + gamma_at(kappa, i_s, i_t + l, tables);
    let shifted_k: Vec<f64> = kappa[i_s..=i_s + i_t].iter().map(|v| v - kappa[i_s]).collect();
    let gamma_shift = gamma_at(&shifted_k, i_t, l, tables);
    // (Θ_sH)_t(Φ_r𝟙) = M_{s+t}(Ψ_{s+t+r}𝟙) − M_s(Ψ_{s+t+r}𝟙) on the lattice.
    let theta_h = acc_st.psi(l, Weight::One) - psi_s[i_t + l];
    let res_zshift = lhs - z_s_tr - gamma_shift + theta_h;
    let res_gamma = gamma_shift - gamma_at(kappa, i_s + i_t, l, tables) + gamma_at(kappa, i_s, i_t + l, tables);

    // Re-solve the map from time s.
    let eta: Vec<f64> = (0..=i_t).map(|v| path.e.values[i_s + v] - path.e.values[i_s]).collect();
    let (gv, _) = gamma_values(kappa, i_s, tables, i_t);
    let zeta: Vec<f64> = (0..=i_t)
        .map(|v| z0.value_at(i_s + v) + gv[v] - path.h_one[i_s + v])
        .collect();
    let x_s = path.x.values[i_s];
    let mut zeta = zeta;
    // Z(s,0) = X(s)∧0 holds to rounding; pin it so the precondition is exact.
    zeta[0] = x_s.min(0.0);
    let out = cms_map_tables(&eta, x_s, &zeta, tables)?;
    let res_lambda = (0..=i_t).map(|v| (path.x.values[i_s + v] - out.x[v]).abs()).fold(0.0, f64::max);
    let res_kappa = (0..=i_t).map(|v| (shifted_k[v] - out.kappa[v]).abs()).fold(0.0, f64::max);
    Ok(MarkovResidual { res_zshift, res_lambda, res_kappa, res_gamma })
}

/// (Γ_tκ)(r_l) for t = nΔ with ages up to the table length.
fn gamma_at(kappa: &[f64], n: usize, l: usize, tables: &GridTables) -> f64 {
    let mut s = 0.0;
    if n > 0 {
        for u in 0..=n {
            s += trap_weight(u, n) * kappa[u] * tables.dens[n - u + l];
        }
    }
    tables.bar[l] * kappa[n] - tables.dt * s
}

/// ξ(t,·) = Γ_tF solving ξ(t,r) = ∫₀^t ∂_rξ(s,r)ds + Ḡ(r)F(t).
#[derive(Clone, Debug)]
pub struct TransportSolution {
    pub xi: H1GridFunction,
    /// sup over r of the equation residual at time t.
    pub residual: f64,
}

pub fn transport_solution(f: &TimePath, d: &ServiceDistribution, t: f64, r_max: f64) -> Result<TransportSolution> {
    if f.values[0] != 0.0 {
        return Err(Error::Precondition(format!("F(0) must be 0, got {}", f.values[0])));
    }
    let dt = f.dt();
    let n = crate::grid::grid_index(t, dt)?;
    if n > f.n_t {
        return Err(Error::Grid(format!("time {t} beyond the path horizon")));
    }
    let n_r = crate::grid::grid_index(r_max, dt)?;
    let tables = GridTables::new(d, dt, n + n_r + 2);
    let (val, der) = gamma_values(&f.values, n, &tables, n_r);
    let mut integral = vec![0.0; n_r + 1];
    let mut prev = gamma_values(&f.values, 0, &tables, n_r).1;
    for k in 1..=n {
        let cur = gamma_values(&f.values, k, &tables, n_r).1;
        for l in 0..=n_r {
            integral[l] += 0.5 * dt * (prev[l] + cur[l]);
        }
        prev = cur;
    }
    let residual = (0..=n_r)
        .map(|l| (val[l] - integral[l] - tables.bar[l] * f.values[n]).abs())
        .fold(0.0, f64::max);
    let xi = H1GridFunction::new(GridFunction { r_max, n_r, values: val }, GridFunction { r_max, n_r, values: der })?;
    Ok(TransportSolution { xi, residual })
}
