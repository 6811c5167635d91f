//! Space-time white noise with intensity g(x)dx⊗dt, the Brownian input, and
//! the stochastic integrals built from them.
//!
//! Cell (j, i) covers ages [jΔ, (j+1)Δ) and times [iΔ, (i+1)Δ). Deterministic
//! integrands are evaluated at the age midpoint and the left time point,
//! ((j+½)Δ, iΔ), so the ages x + t − s of Ψ fall on the half-integer lattice.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::distributions::ServiceDistribution;
use crate::grid::{trapezoid, Grid, TimePath};
use crate::tables::{correlate, GridTables};

/// Stream reserved for the Brownian input; noise rows use the fine time index.
const BROWNIAN_STREAM: u64 = 1 << 63;

/// SplitMix64 step, used to derive independent seeds for replications.
pub fn derive_seed(base: u64, index: u64) -> u64 {
    let mut z = base.wrapping_add(index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Weight {
    /// f ≡ 1.
    One,
    /// f = h.
    H,
}

/// Increments ΔM over the age × time grid.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseField {
    pub grid: Grid,
    pub seed: u64,
    pub refine: usize,
    /// Row-major by time step: `increments[i * n_r + j]`.
    pub increments: Vec<f64>,
    /// Noise variance per unit time left out past r_max, Ḡ(r_max).
    pub neglected_mass: f64,
}

impl NoiseField {
    pub fn generate(d: &ServiceDistribution, grid: Grid, seed: u64) -> Self {
        Self::generate_refined(d, grid, seed, 1)
    }

    /// Each cell is the sum of refine × refine sub-cells, so a grid with step Δ
    /// and refinement 2k shares its sub-cells with step Δ/2 and refinement k.
    pub fn generate_refined(d: &ServiceDistribution, grid: Grid, seed: u64, refine: usize) -> Self {
        let refine = refine.max(1);
        let h = grid.dt / refine as f64;
        let (n_t, n_r) = (grid.n_t, grid.n_r);
        let fine_r = n_r * refine;
        let sd: Vec<f64> = (0..fine_r).map(|jj| d.pdf((jj as f64 + 0.5) * h).sqrt() * h).collect();
        let mut increments = vec![0.0; n_t * n_r];
        for i in 0..n_t {
            let row = &mut increments[i * n_r..(i + 1) * n_r];
            for ii in 0..refine {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream((i * refine + ii) as u64);
                for (jj, s) in sd.iter().enumerate() {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    row[jj / refine] += s * z;
                }
            }
        }
        NoiseField { grid, seed, refine, increments, neglected_mass: d.ccdf(grid.r_max()) }
    }

    pub fn zeros(grid: Grid) -> Self {
        NoiseField { grid, seed: 0, refine: 1, increments: vec![0.0; grid.n_t * grid.n_r], neglected_mass: 0.0 }
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.increments[i * self.grid.n_r..(i + 1) * self.grid.n_r]
    }

    pub fn cell(&self, j: usize, i: usize) -> f64 {
        self.increments[i * self.grid.n_r + j]
    }
}

/// B on the time grid, built from the same sub-steps as a refined noise field.
pub fn brownian_path(grid: Grid, seed: u64, refine: usize) -> TimePath {
    let refine = refine.max(1);
    let sd = (grid.dt / refine as f64).sqrt();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(BROWNIAN_STREAM);
    let mut v = Vec::with_capacity(grid.n_t + 1);
    let mut b = 0.0;
    v.push(0.0);
    for _ in 0..grid.n_t {
        for _ in 0..refine {
            let z: f64 = StandardNormal.sample(&mut rng);
            b += sd * z;
        }
        v.push(b);
    }
    TimePath::raw(grid.dt, v)
}

/// M_t(φ) = Σ_{cells before t} φ(x_j*, s_i*)·ΔM_{j,i} for t = n·Δ.
pub fn integrate(m: &NoiseField, phi: impl Fn(f64, f64) -> f64, n: usize) -> f64 {
    let dt = m.grid.dt;
    let mut acc = 0.0;
    for i in 0..n {
        let s = i as f64 * dt;
        for (j, dm) in m.row(i).iter().enumerate() {
            if *dm != 0.0 {
                acc += phi((j as f64 + 0.5) * dt, s) * dm;
            }
        }
    }
    acc
}

/// (Ψ_t f)(x, s) = f(x + (t−s)⁺)Ḡ(x + (t−s)⁺)/Ḡ(x).
pub fn psi_kernel<'a, F: Fn(f64) -> f64 + 'a>(d: &'a ServiceDistribution, t: f64, f: F) -> impl Fn(f64, f64) -> f64 + 'a {
    move |x, s| {
        let u = (t - s).max(0.0);
        f(x + u) * d.survival_ratio(x, u)
    }
}

/// (Φ_t f)(x) = f(x + t)Ḡ(x + t)/Ḡ(x).
pub fn phi_kernel<'a, F: Fn(f64) -> f64 + 'a>(d: &'a ServiceDistribution, t: f64, f: F) -> impl Fn(f64) -> f64 + 'a {
    move |x| f(x + t) * d.survival_ratio(x, t)
}

fn weight_fn(d: &ServiceDistribution, w: Weight) -> impl Fn(f64) -> f64 + '_ {
    move |y| match w {
        Weight::One => 1.0,
        Weight::H => d.hazard(y),
    }
}

/// M_t(Ψ_{t+r} f) for f ∈ {1, h}, cell by cell from the closed-form law.
pub fn stoch_conv(m: &NoiseField, d: &ServiceDistribution, n: usize, l: usize, w: Weight) -> f64 {
    let dt = m.grid.dt;
    let tr = (n + l) as f64 * dt;
    integrate(m, psi_kernel(d, tr, weight_fn(d, w)), n)
}

/// M_t(Φ_r f) for f ∈ {1, h}, cell by cell from the closed-form law.
pub fn phi_integral(m: &NoiseField, d: &ServiceDistribution, n: usize, l: usize, w: Weight) -> f64 {
    let r = l as f64 * m.grid.dt;
    let k = phi_kernel(d, r, weight_fn(d, w));
    integrate(m, |x, _| k(x), n)
}

/// Running sums of the noise that give M_t(Ψ_{t+r}·) and M_t(Φ_r·) on the
/// lattice in O(n_r + n_t) per value.
#[derive(Clone, Debug)]
pub struct NoiseAccumulator<'a> {
    noise: &'a NoiseField,
    tables: &'a GridTables,
    /// Σ ΔM/Ḡ(x_j*) over cells with j − i = q − (n_t − 1).
    mass: Vec<f64>,
    /// Σ_i ΔM_{j,i} per age cell.
    cell_sums: Vec<f64>,
    total: f64,
    step: usize,
}

impl<'a> NoiseAccumulator<'a> {
    /// Tables must hold at least n_t + 2·n_r + 1 entries.
    pub fn new(noise: &'a NoiseField, tables: &'a GridTables) -> Self {
        let g = noise.grid;
        assert!(tables.len() > g.n_t + 2 * g.n_r, "tables too short for the noise grid");
        NoiseAccumulator {
            noise,
            tables,
            mass: vec![0.0; g.n_t + g.n_r],
            cell_sums: vec![0.0; g.n_r],
            total: 0.0,
            step: 0,
        }
    }

    /// Current time index n; integrals cover the cells i < n.
    pub fn step(&self) -> usize {
        self.step
    }

    /// Adds the cells of time step n and moves to n + 1.
    pub fn advance(&mut self) {
        let i = self.step;
        let g = self.noise.grid;
        let off = g.n_t - 1 - i;
        for (j, dm) in self.noise.row(i).iter().enumerate() {
            self.mass[j + off] += dm / self.tables.bar_half[j];
            self.cell_sums[j] += dm;
            self.total += dm;
        }
        self.step += 1;
    }

    /// M_t(𝟙).
    pub fn total(&self) -> f64 {
        self.total
    }

    fn half_table(&self, w: Weight) -> &'a [f64] {
        match w {
            Weight::One => &self.tables.bar_half,
            Weight::H => &self.tables.dens_half,
        }
    }

    /// M_t(Ψ_{t+r} f) with r = lΔ.
    pub fn psi(&self, l: usize, w: Weight) -> f64 {
        let n = self.step;
        if n == 0 {
            return 0.0;
        }
        let n_t = self.noise.grid.n_t;
        let table = self.half_table(w);
        let lo = n_t - n;
        // Table index q − n_t + 1 + n + l, written from the lowest populated q.
        self.mass[lo..].iter().enumerate().map(|(k, m)| m * table[k + 1 + l]).sum()
    }

    /// M_t(Ψ_{t+r} f) for r = lΔ, l = 0..n_out.
    pub fn psi_profile(&self, n_out: usize, w: Weight) -> Vec<f64> {
        let n = self.step;
        if n == 0 {
            return vec![0.0; n_out];
        }
        let lo = self.noise.grid.n_t - n;
        correlate(&self.mass[lo..], &self.half_table(w)[1..], n_out)
    }

    /// M_t(Φ_r f) with r = lΔ.
    pub fn phi(&self, l: usize, w: Weight) -> f64 {
        let bh = &self.tables.bar_half;
        let t = self.half_table(w);
        self.cell_sums.iter().enumerate().map(|(j, c)| c / bh[j] * t[j + l]).sum()
    }

    pub fn phi_profile(&self, n_out: usize, w: Weight) -> Vec<f64> {
        let bh = &self.tables.bar_half;
        let s: Vec<f64> = self.cell_sums.iter().enumerate().map(|(j, c)| c / bh[j]).collect();
        correlate(&s, self.half_table(w), n_out)
    }
}

/// Residual of M_t(Ψ_{t+r}𝟙) = M_t(Φ_r𝟙) − ∫₀^t M_s(Ψ_{s+r}h)ds at every
/// t = nΔ ≤ t_max, for r = lΔ, with the ds-integral by trapezoid.
pub fn fubini_residual_path(m: &NoiseField, tables: &GridTables, l: usize) -> Vec<f64> {
    let dt = m.grid.dt;
    let mut acc = NoiseAccumulator::new(m, tables);
    let mut hs = vec![0.0];
    let mut out = vec![0.0];
    for _ in 0..m.grid.n_t {
        acc.advance();
        hs.push(acc.psi(l, Weight::H));
        let int = trapezoid(&hs, dt);
        out.push(acc.psi(l, Weight::One) - acc.phi(l, Weight::One) + int);
    }
    out
}

/// Residual of the pathwise Fubini identity at t = nΔ, r = lΔ.
pub fn fubini_residual(m: &NoiseField, d: &ServiceDistribution, n: usize, l: usize) -> f64 {
    let g = m.grid;
    let tables = GridTables::new(d, g.dt, g.n_t + 2 * g.n_r + 2);
    fubini_residual_path(m, &tables, l)[n]
}
