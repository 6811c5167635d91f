//! Convolutions, renewal equations, the Volterra equation behind the CMS map, and Γ.

use serde::{Deserialize, Serialize};

use crate::distributions::ServiceDistribution;
use crate::error::{Error, Result};
use crate::grid::{grid_index, GridFunction, H1GridFunction, TimePath};
use crate::tables::{convolve, correlate, GridTables};

/// Trapezoid (a∗k)(t_i) = ∫₀^{t_i} a(s)k(t_i − s)ds for i < n_out; zero at i = 0.
pub fn conv_trap(a: &[f64], k: &[f64], dt: f64, n_out: usize) -> Vec<f64> {
    let full = convolve(a, k, n_out);
    (0..n_out)
        .map(|i| {
            if i == 0 {
                0.0
            } else {
                let end = if i < a.len() { a[i] * k[0] } else { 0.0 };
                dt * (full[i] - 0.5 * a[0] * k[i] - 0.5 * end)
            }
        })
        .collect()
}

/// (f∗g)(t_i) with g evaluated at every lag.
pub fn convolve_path(f: &TimePath, g: impl Fn(f64) -> f64) -> TimePath {
    let dt = f.dt();
    let k: Vec<f64> = (0..f.len()).map(|i| g(i as f64 * dt)).collect();
    TimePath::raw(dt, conv_trap(&f.values, &k, dt, f.len()))
}

/// The renewal density u = g + g∗u on a grid, reusable across right-hand sides.
#[derive(Clone, Debug)]
pub struct RenewalKernel {
    pub dt: f64,
    pub g: Vec<f64>,
    pub u: Vec<f64>,
    pub u_minus_one_l1: f64,
    /// Part of `u_minus_one_l1` estimated past the horizon as |u(T) − 1|·T.
    pub tail_estimate: f64,
}

impl RenewalKernel {
    pub fn new(d: &ServiceDistribution, dt: f64, n_t: usize) -> Self {
        let g: Vec<f64> = (0..=n_t).map(|i| d.pdf(i as f64 * dt)).collect();
        Self::from_density(g, dt)
    }

    pub fn from_tables(tables: &GridTables, n_t: usize) -> Self {
        Self::from_density(tables.dens[..=n_t].to_vec(), tables.dt)
    }

    /// Implicit trapezoid stepping; the diagonal term is solved exactly.
    pub fn from_density(g: Vec<f64>, dt: f64) -> Self {
        let n = g.len();
        let mut u = vec![0.0; n];
        u[0] = g[0];
        let denom = 1.0 - 0.5 * dt * g[0];
        for i in 1..n {
            let mut s = 0.5 * g[i] * u[0];
            for j in 1..i {
                s += g[i - j] * u[j];
            }
            u[i] = (g[i] + dt * s) / denom;
        }
        let dev: Vec<f64> = u.iter().map(|v| (v - 1.0).abs()).collect();
        let t_max = (n - 1) as f64 * dt;
        let trunc = crate::grid::trapezoid(&dev, dt);
        let tail_estimate = dev[n - 1] * t_max;
        RenewalKernel { dt, g, u, u_minus_one_l1: trunc + tail_estimate, tail_estimate }
    }

    pub fn u_path(&self) -> TimePath {
        TimePath::raw(self.dt, self.u.clone())
    }

    pub fn c1(&self) -> f64 {
        1.0 + self.u_minus_one_l1
    }

    /// φ = f + u∗f, the solution of φ = f + g∗φ.
    pub fn solve(&self, f: &[f64]) -> RenewalSolution {
        let n = f.len().min(self.u.len());
        let f = &f[..n];
        let uf = conv_trap(f, &self.u, self.dt, n);
        let phi: Vec<f64> = f.iter().zip(&uf).map(|(a, b)| a + b).collect();
        let gphi = conv_trap(&phi, &self.g, self.dt, n);
        let residual = (0..n).map(|i| (phi[i] - f[i] - gphi[i]).abs()).fold(0.0, f64::max);
        let body = self.u_minus_one_l1 - self.tail_estimate;
        RenewalSolution {
            phi: TimePath::raw(self.dt, phi),
            u_minus_one_l1: self.u_minus_one_l1,
            c1: self.c1(),
            residual,
            truncation_dominates: self.tail_estimate > body,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RenewalSolution {
    pub phi: TimePath,
    pub u_minus_one_l1: f64,
    pub c1: f64,
    /// sup |φ − f − g∗φ| on the grid.
    pub residual: f64,
    /// The tail part of ‖u − 1‖_{L¹} exceeds the part computed on the grid.
    pub truncation_dominates: bool,
}

pub fn renewal_density(d: &ServiceDistribution, t_max: f64, dt: f64) -> Result<TimePath> {
    let n = grid_index(t_max, dt)?;
    Ok(RenewalKernel::new(d, dt, n).u_path())
}

pub fn solve_renewal(f: &TimePath, d: &ServiceDistribution) -> RenewalSolution {
    RenewalKernel::new(d, f.dt(), f.n_t).solve(&f.values)
}

/// Solves x(t) = r(t) + ∫₀^t g(t−s)x⁺(s)ds with the trapezoid rule.
///
/// The endpoint term ½Δg(0)x⁺(t_i) makes each step a scalar piecewise-linear
/// equation, solved exactly; this needs ½Δg(0) < 1.
pub fn volterra_plus(r: &[f64], g: &[f64], dt: f64) -> Result<Vec<f64>> {
    let n = r.len();
    if n == 0 {
        return Ok(Vec::new());
    }
    if g.len() < n {
        return Err(Error::Grid(format!("density table has {} entries, need {n}", g.len())));
    }
    let a = 0.5 * dt * g[0];
    if a >= 1.0 {
        return Err(Error::Precondition(format!("step too large: Δ·g(0)/2 = {a} must be below 1")));
    }
    let mut x = vec![0.0; n];
    let mut xp = vec![0.0; n];
    x[0] = r[0];
    xp[0] = r[0].max(0.0);
    for i in 1..n {
        let mut s = 0.5 * g[i] * xp[0];
        for j in 1..i {
            s += g[i - j] * xp[j];
        }
        let c = r[i] + dt * s;
        x[i] = if c >= 0.0 { c / (1.0 - a) } else { c };
        xp[i] = x[i].max(0.0);
    }
    Ok(x)
}

pub fn solve_volterra_plus(r: &TimePath, d: &ServiceDistribution) -> Result<TimePath> {
    let dt = r.dt();
    let g: Vec<f64> = (0..r.len()).map(|i| d.pdf(i as f64 * dt)).collect();
    Ok(TimePath::raw(dt, volterra_plus(&r.values, &g, dt)?))
}

/// Trapezoid weights on indices 0..=n.
pub(crate) fn trap_weight(j: usize, n: usize) -> f64 {
    if j == 0 || j == n {
        0.5
    } else {
        1.0
    }
}

/// Γ_tκ and its derivative at r_l, l ≤ n_r, for t = n·Δ.
///
/// (Γ_tκ)(r) = Ḡ(r)κ(t) − ∫₀^t κ(s)g(t+r−s)ds and
/// (Γ_tκ)′(r) = −g(r)κ(t) − ∫₀^t κ(s)g′(t+r−s)ds.
pub fn gamma_values(kappa: &[f64], n: usize, tables: &GridTables, n_r: usize) -> (Vec<f64>, Vec<f64>) {
    let dt = tables.dt;
    let kn = kappa[n];
    if n == 0 {
        return (
            (0..=n_r).map(|l| tables.bar[l] * kn).collect(),
            (0..=n_r).map(|l| -tables.dens[l] * kn).collect(),
        );
    }
    // signal[q] = w·κ at s = t − qΔ, so the kernel index q + l is the lag t + r − s.
    let signal: Vec<f64> = (0..=n).map(|q| trap_weight(n - q, n) * kappa[n - q]).collect();
    let iv = correlate(&signal, &tables.dens, n_r + 1);
    let id = correlate(&signal, &tables.dens_deriv, n_r + 1);
    let val = (0..=n_r).map(|l| tables.bar[l] * kn - dt * iv[l]).collect();
    let der = (0..=n_r).map(|l| -tables.dens[l] * kn - dt * id[l]).collect();
    (val, der)
}

pub fn gamma_op_tables(kappa: &[f64], n: usize, tables: &GridTables, n_r: usize) -> H1GridFunction {
    let (v, d) = gamma_values(kappa, n, tables, n_r);
    let r_max = n_r as f64 * tables.dt;
    H1GridFunction::new(GridFunction { r_max, n_r, values: v }, GridFunction { r_max, n_r, values: d })
        .expect("matching grids")
}

/// Γ_tκ on [0, r_max] with the age step equal to the path step.
pub fn gamma_op(kappa: &TimePath, t: f64, d: &ServiceDistribution, r_max: f64) -> Result<H1GridFunction> {
    let dt = kappa.dt();
    let n = grid_index(t, dt)?;
    if n > kappa.n_t {
        return Err(Error::Grid(format!("time {t} beyond the path horizon {}", kappa.t_max)));
    }
    let n_r = grid_index(r_max, dt)?;
    let tables = GridTables::new(d, dt, n + n_r + 1);
    Ok(gamma_op_tables(&kappa.values, n, &tables, n_r))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn exp1() -> ServiceDistribution {
        ServiceDistribution::exponential(1.0).unwrap()
    }

    #[test]
    fn convolution_examples() {
        let dt = 1e-2;
        let zero = TimePath::zeros(dt, 500);
        assert!(convolve_path(&zero, |t| (-t).exp()).values.iter().all(|v| *v == 0.0));
        let one = TimePath::from_fn(dt, 500, |_| 1.0).unwrap();
        let c = convolve_path(&one, |t| (-t).exp());
        let lin = TimePath::from_fn(dt, 500, |t| t).unwrap();
        let c2 = convolve_path(&lin, |t| (-t).exp());
        for i in 0..=500 {
            let t = i as f64 * dt;
            assert!((c.values[i] - (1.0 - (-t).exp())).abs() < dt * dt);
            assert!((c2.values[i] - (t - 1.0 + (-t).exp())).abs() < dt * dt);
        }
        assert_eq!(c.values[0], 0.0);
    }

    #[test]
    fn renewal_density_examples() {
        let u = renewal_density(&exp1(), 10.0, 1e-3).unwrap();
        assert!(u.values.iter().all(|v| (v - 1.0).abs() < 1e-3));
        let er = ServiceDistribution::gamma(2.0, 2.0).unwrap();
        let u = renewal_density(&er, 10.0, 1e-3).unwrap();
        for (i, v) in u.values.iter().enumerate() {
            let t = i as f64 * 1e-3;
            assert!((v - (1.0 - (-4.0 * t).exp())).abs() < 1e-2);
        }
        for d in [ServiceDistribution::lomax(3.0, 2.0).unwrap(), er] {
            let u = renewal_density(&d, 50.0, 1e-2).unwrap();
            assert!((u.values[5000] - 1.0).abs() < 1e-2, "{}", u.values[5000]);
        }
    }

    #[test]
    fn renewal_solution_examples() {
        let dt = 1e-3;
        let f = TimePath::from_fn(dt, 5000, |t| (-t).exp()).unwrap();
        let s = solve_renewal(&f, &exp1());
        assert!(s.phi.values.iter().all(|v| (v - 1.0).abs() < 1e-3));
        assert!(s.residual < 1e-10);
        assert_eq!(s.c1, 1.0 + s.u_minus_one_l1);
        let z = solve_renewal(&TimePath::zeros(dt, 100), &exp1());
        assert!(z.phi.values.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn volterra_examples() {
        let d = exp1();
        let dt = 0.01;
        let zero = solve_volterra_plus(&TimePath::zeros(dt, 300), &d).unwrap();
        assert!(zero.values.iter().all(|v| *v == 0.0));
        let neg = solve_volterra_plus(&TimePath::from_fn(dt, 300, |_| -1.0).unwrap(), &d).unwrap();
        assert!(neg.values.iter().all(|v| *v == -1.0));
        // With r ≡ 1 the solution stays positive and x = 1 + t.
        let one = solve_volterra_plus(&TimePath::from_fn(dt, 300, |_| 1.0).unwrap(), &d).unwrap();
        for (i, v) in one.values.iter().enumerate() {
            let t = i as f64 * dt;
            assert!((v - (1.0 + t)).abs() < dt * dt * (1.0 + t), "{i} {v}");
        }
    }

    /// Fixed point of x = r + g∗x⁺ by Picard iteration on a grid 16× finer.
    fn picard_oracle(r: impl Fn(f64) -> f64, d: &ServiceDistribution, dt: f64, n: usize) -> Vec<f64> {
        let h = dt / 16.0;
        let m = 16 * n;
        let rv: Vec<f64> = (0..=m).map(|i| r(i as f64 * h)).collect();
        let g: Vec<f64> = (0..=m).map(|i| d.pdf(i as f64 * h)).collect();
        let mut x = rv.clone();
        for _ in 0..200 {
            let xp: Vec<f64> = x.iter().map(|v| v.max(0.0)).collect();
            let c = conv_trap(&xp, &g, h, m + 1);
            let next: Vec<f64> = rv.iter().zip(&c).map(|(a, b)| a + b).collect();
            let diff = next.iter().zip(&x).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            x = next;
            if diff < 1e-14 {
                break;
            }
        }
        (0..=n).map(|i| x[16 * i]).collect()
    }

    #[test]
    fn volterra_against_picard_oracle() {
        let d = ServiceDistribution::lomax(3.0, 2.0).unwrap();
        let r = |t: f64| (3.0 * t).sin() - 0.5 * t;
        let t_max: f64 = 3.0;
        let mut errs = Vec::new();
        for dt in [0.02, 0.01] {
            let n = (t_max / dt).round() as usize;
            let oracle = picard_oracle(r, &d, dt, n);
            let x = solve_volterra_plus(&TimePath::from_fn(dt, n, r).unwrap(), &d).unwrap();
            let e = x.values.iter().zip(&oracle).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            assert!(e < 5e-3);
            errs.push(e);
        }
        assert!(errs[0] / errs[1] >= 1.7, "{errs:?}");
    }

    #[test]
    fn gamma_examples() {
        let d = exp1();
        let dt = 0.01;
        let one = TimePath::from_fn(dt, 200, |_| 1.0).unwrap();
        let lin = TimePath::from_fn(dt, 200, |t| t).unwrap();
        for t in [0.5, 2.0] {
            let g = gamma_op(&one, t, &d, 5.0).unwrap();
            let gl = gamma_op(&lin, t, &d, 5.0).unwrap();
            for l in 0..=500 {
                let r = l as f64 * dt;
                assert!((g.base.values[l] - d.ccdf(t + r)).abs() < 10.0 * dt * dt);
                let want = (-r).exp() * (1.0 - (-t).exp());
                assert!((gl.base.values[l] - want).abs() < 10.0 * dt * dt);
            }
            assert!(g.compatibility_defect() < dt * dt);
        }
        let g0 = gamma_op(&lin, 0.0, &d, 5.0).unwrap();
        assert!(g0.base.values.iter().all(|v| *v == 0.0));
        let shifted = TimePath::from_fn(dt, 200, |t| t + 2.0).unwrap();
        let g0 = gamma_op(&shifted, 0.0, &d, 5.0).unwrap();
        assert_eq!(g0.base.values[30], 2.0 * d.ccdf(0.3));
    }

    fn random_kappa(dt: f64, n: usize, a: f64, b: f64, c: f64) -> TimePath {
        TimePath::from_fn(dt, n, move |t| a * (b * t).sin() + c * t).unwrap()
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn gamma_bounds(a in -2.0f64..2.0, b in 0.0f64..5.0, c in -1.0f64..1.0, n in 1usize..150) {
            let d = ServiceDistribution::lomax(3.0, 2.0).unwrap();
            let dt = 0.02;
            let kappa = random_kappa(dt, 150, a, b, c);
            let ksup = kappa.values[..=n].iter().fold(0.0f64, |m, v| m.max(v.abs()));
            let tables = GridTables::new(&d, dt, n + 401);
            let g = gamma_op_tables(&kappa.values, n, &tables, 400);
            let (h, h2) = (1.5, 3.0);
            for l in 0..=400 {
                let r = l as f64 * dt;
                prop_assert!(g.base.values[l].abs() <= 2.0 * ksup * d.ccdf(r) + 1e-12);
                let bound = ksup * (h * d.ccdf(r) + h2 * d.integrated_tail(r));
                prop_assert!(g.deriv.values[l].abs() <= bound * (1.0 + 1e-9) + 1e-12);
            }
        }

        #[test]
        fn renewal_is_linear(a in -3.0f64..3.0, b in -3.0f64..3.0, w1 in 0.0f64..6.0, w2 in 0.0f64..6.0) {
            let d = ServiceDistribution::lomax(3.0, 2.0).unwrap();
            let k = RenewalKernel::new(&d, 0.01, 400);
            let f: Vec<f64> = (0..=400).map(|i| (w1 * i as f64 * 0.01).cos()).collect();
            let g: Vec<f64> = (0..=400).map(|i| (-(w2 * i as f64 * 0.01)).exp()).collect();
            let comb: Vec<f64> = f.iter().zip(&g).map(|(x, y)| a * x + b * y).collect();
            let (pf, pg, pc) = (k.solve(&f), k.solve(&g), k.solve(&comb));
            for i in 0..=400 {
                let lin = a * pf.phi.values[i] + b * pg.phi.values[i];
                prop_assert!((pc.phi.values[i] - lin).abs() < 1e-10);
            }
        }

        #[test]
        fn renewal_l2_inequality(a in -2.0f64..2.0, w in 0.0f64..8.0, decay in 0.1f64..3.0) {
            let d = ServiceDistribution::lomax(3.0, 2.0).unwrap();
            let dt = 0.02;
            let n = 1000;
            let k = RenewalKernel::new(&d, dt, n);
            let f = TimePath::from_fn(dt, n, |t| a * (-decay * t).exp() * (w * t).cos()).unwrap();
            let s = k.solve(&f.values);
            let int_f = TimePath::raw(dt, crate::grid::cumulative_trapezoid(&f.values, dt));
            prop_assert!(s.phi.l2_norm() <= s.c1 * f.l2_norm() + int_f.l2_norm());
        }
    }
}
