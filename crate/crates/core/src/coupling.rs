//! A coupled pair of diffusion-model paths from two starts with x ≥ 0, driven
//! by the same noise, with the drift and likelihood ratio that relate them.
//!
//! Differences are taken as Δ = original − coupled throughout.

use std::sync::Arc;

use serde::{Deserialize, Serialize};
use twofloat::TwoFloat;

use crate::diffusion::{cms_map_tables, BuildOptions, DiffusionModel, DiffusionPath};
use crate::distributions::{check_assumptions, AgeGrid, AssumptionThresholds};
use crate::error::{Error, Result};
use crate::grid::{cumulative_trapezoid, GridFunction, H1GridFunction, StatePoint, TimePath};
use crate::kernels::{conv_trap, trap_weight, RenewalKernel};
use crate::noise::NoiseField;
use crate::tables::{correlate, GridTables};

/// Closed-form coupled queue-length path X̃ and the difference X − X̃.
///
/// X is taken piecewise linear between grid points; the closed-form integrals
/// are then evaluated exactly in double-double arithmetic, so X − X̃ is
/// resolved far below the size of X itself, and X̃ is returned as X − ΔX.
pub fn coupled_x(x: &[f64], x0: f64, xt0: f64, lambda: f64, dt: f64) -> Result<(Vec<f64>, Vec<f64>)> {
    let a = TwoFloat::from(lambda) * dt;
    if f64::from(a) > 1.0 {
        return Err(Error::Grid(format!("λΔ = {} must not exceed 1", f64::from(a))));
    }
    if x0 == xt0 {
        // ΔX solves a homogeneous linear equation, so it vanishes identically.
        return Ok((x.to_vec(), vec![0.0; x.len()]));
    }
    // μ_k = ∫₀^Δ e^{−λ(Δ−u)}(u/Δ)^k du = Δ Σ_j (−a)^j k!/(j+k+1)!.
    let mu = |k: usize| {
        let mut term = TwoFloat::from(1.0);
        for i in 1..=k + 1 {
            term /= i as f64;
        }
        let mut k_fact = TwoFloat::from(1.0);
        for i in 1..=k {
            k_fact *= i as f64;
        }
        term *= k_fact;
        let mut sum = TwoFloat::from(0.0);
        for j in 0..80 {
            sum += term;
            term = term * (-a) / ((j + k + 2) as f64);
            if f64::from(term).abs() < 1e-34 * f64::from(sum).abs() {
                break;
            }
        }
        sum * dt
    };
    let (mu0, mu1, mu2) = (mu(0), mu(1), mu(2));
    let mut q = TwoFloat::from(1.0);
    let mut term = TwoFloat::from(1.0);
    for j in 1..80 {
        term = term * (-a) / (j as f64);
        q += term;
        if f64::from(term).abs() < 1e-34 {
            break;
        }
    }
    let lam = TwoFloat::from(lambda);
    let n = x.len();
    let mut xt = Vec::with_capacity(n);
    let mut dx = Vec::with_capacity(n);
    let mut i_n = TwoFloat::from(0.0);
    let mut j_n = TwoFloat::from(0.0);
    let mut e_n = TwoFloat::from(1.0);
    for k in 0..n {
        let xk = TwoFloat::from(x[k]);
        let f_n = xk - x0 + lam * i_n;
        let xt_k = e_n * xt0 + f_n - lam * j_n;
        let d = f64::from(xk - xt_k);
        dx.push(d);
        xt.push(x[k] - d);
        if k + 1 < n {
            let d = TwoFloat::from(x[k + 1]) - xk;
            let c0 = f_n;
            let c1 = d + lam * dt * xk;
            let c2 = lam * dt * d / 2.0;
            j_n = q * j_n + c0 * mu0 + c1 * mu1 + c2 * mu2;
            i_n += (xk + d / 2.0) * dt;
            e_n *= q;
        }
    }
    Ok((xt, dx))
}

/// Δ Σ_u w_u a_u table[n − u + l] for l = 0..=n_r: ∫₀^t a(s)k(t+r−s)ds.
fn lag_integral(a: &[f64], n: usize, table: &[f64], n_r: usize, dt: f64) -> Vec<f64> {
    if n == 0 {
        return vec![0.0; n_r + 1];
    }
    let signal: Vec<f64> = (0..=n).map(|q| trap_weight(n - q, n) * a[n - q]).collect();
    correlate(&signal, table, n_r + 1).into_iter().map(|v| dt * v).collect()
}

fn h1(r_max: f64, n_r: usize, v: Vec<f64>, d: Vec<f64>) -> H1GridFunction {
    H1GridFunction::new(GridFunction { r_max, n_r, values: v }, GridFunction { r_max, n_r, values: d })
        .expect("matching grids")
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CouplingDiagnostics {
    /// Trapezoid residual of X̃ = x̃₀ − x₀ − λ∫X̃ + X + λ∫X.
    pub tx_residual: f64,
    /// sup |ΔR − (R − R̃)| with R̃ from its own renewal equation.
    pub route_difference: f64,
    /// Renewal residuals of the ΔR and R̃ solves.
    pub renewal_residual: f64,
    /// sup |R̃ − z̃₀′ − H(h) + g(0)K̃ + K̃∗g′| for the directly solved R̃.
    pub quadrature_residual: f64,
    /// sup |ΔK + ΔX⁻ + ∫ΔR| with ΔK = K − (K̄ − ∫R̃).
    pub dk_residual: f64,
    /// sup |Z̃(t,0) − X̃(t)∧0|.
    pub tilde_boundary: f64,
    /// sup |X̃ − x′| and |K̃ − κ′| with (κ′, x′) = Λ(Ẽ, x̃₀, z̃₀ − H(𝟙)).
    pub tilde_cms_x: f64,
    pub tilde_cms_k: f64,
}

#[derive(Clone, Debug)]
pub struct CoupledPair {
    pub y: DiffusionPath,
    pub y_tilde0: StatePoint,
    pub lambda: f64,
    pub x_tilde: TimePath,
    pub k_tilde: TimePath,
    pub k_bar: TimePath,
    pub r: TimePath,
    pub r_tilde: TimePath,
    pub delta_x: TimePath,
    pub delta_x_minus: TimePath,
    pub delta_k: TimePath,
    /// ΔR from its renewal equation.
    pub delta_r: TimePath,
    /// R − R̃ with R̃ solved from its own renewal equation.
    pub delta_r_direct: TimePath,
    pub m: TimePath,
    pub log_n: TimePath,
    pub renewal: Arc<RenewalKernel>,
    pub diagnostics: CouplingDiagnostics,
}

/// Builds Y from y and the coupled Ỹ from ỹ on the same inputs.
pub fn build_coupled(
    model: &DiffusionModel,
    y: &StatePoint,
    y_tilde: &StatePoint,
    lambda: f64,
    b: Arc<TimePath>,
    m: Arc<NoiseField>,
    opts: &BuildOptions,
) -> Result<CoupledPair> {
    let renewal = Arc::new(RenewalKernel::from_tables(&model.tables, model.grid.n_t));
    build_coupled_with(model, y, y_tilde, lambda, b, m, opts, renewal)
}

#[allow(clippy::too_many_arguments)]
pub fn build_coupled_with(
    model: &DiffusionModel,
    y: &StatePoint,
    y_tilde: &StatePoint,
    lambda: f64,
    b: Arc<TimePath>,
    m: Arc<NoiseField>,
    opts: &BuildOptions,
    renewal: Arc<RenewalKernel>,
) -> Result<CoupledPair> {
    if !y.in_a() || !y_tilde.in_a() {
        return Err(Error::Precondition(format!(
            "both starts need x ≥ 0, got x₀ = {} and x̃₀ = {}",
            y.x, y_tilde.x
        )));
    }
    if !(lambda > 0.0 && lambda.is_finite()) {
        return Err(Error::InvalidParameter(format!("λ must be positive, got {lambda}")));
    }
    model.state_compatible(y_tilde)?;
    if renewal.u.len() != model.grid.n_t + 1 || renewal.dt != model.grid.dt {
        return Err(Error::Grid("renewal kernel does not match the model grid".into()));
    }
    let path = model.build(y, b, m, opts)?;
    let g = model.grid;
    let (n_t, dt) = (g.n_t, g.dt);
    let n = n_t + 1;
    let tables: &GridTables = &model.tables;
    let (x0, xt0) = (y.x, y_tilde.x);
    let x = &path.x.values;
    let k = &path.k.values;
    let sigma = model.sigma;

    let (x_tilde, delta_x) = coupled_x(x, x0, xt0, lambda, dt)?;
    let int_dx = cumulative_trapezoid(&delta_x, dt);
    let tx_residual = (0..n)
        .map(|i| (-delta_x[i] + (x0 - xt0) - lambda * int_dx[i]).abs())
        .fold(0.0, f64::max);
    let xm = |v: f64| (-v).max(0.0);
    let delta_x_minus: Vec<f64> = (0..n).map(|i| xm(x[i]) - xm(x_tilde[i])).collect();

    let g0 = tables.dens[0];
    let dz0p: Vec<f64> = (0..n).map(|i| y.z.deriv_at(i) - y_tilde.z.deriv_at(i)).collect();

    // R = z₀′ + H(h) − g(0)K − K∗g′.
    let k_gp = conv_trap(k, &tables.dens_deriv, dt, n);
    let r: Vec<f64> = (0..n).map(|i| y.z.deriv_at(i) + path.h_h[i] - g0 * k[i] - k_gp[i]).collect();

    // ΔR = F̄ + g∗ΔR with F̄ = Δz₀′ + g(0)ΔX⁻ + ΔX⁻∗g′.
    let dxm_gp = conv_trap(&delta_x_minus, &tables.dens_deriv, dt, n);
    let f_bar: Vec<f64> = (0..n).map(|i| dz0p[i] + g0 * delta_x_minus[i] + dxm_gp[i]).collect();
    let dr_sol = renewal.solve(&f_bar);
    let delta_r = dr_sol.phi.values.clone();

    // Direct route: K̄, then R̃ from its renewal equation.
    let int_r = cumulative_trapezoid(&r, dt);
    let decay: Vec<f64> = (0..n).map(|i| (-lambda * i as f64 * dt).exp()).collect();
    let k_bar: Vec<f64> = (0..n)
        .map(|i| {
            path.e.values[i] - (x_tilde[i].max(0.0) - xt0.max(0.0)) + int_r[i] + (x0 - xt0) * (1.0 - decay[i])
        })
        .collect();
    let kbar_gp = conv_trap(&k_bar, &tables.dens_deriv, dt, n);
    let f_tilde: Vec<f64> =
        (0..n).map(|i| y_tilde.z.deriv_at(i) - g0 * k_bar[i] - kbar_gp[i] + path.h_h[i]).collect();
    let rt_sol = renewal.solve(&f_tilde);
    let r_tilde_direct = &rt_sol.phi.values;
    let delta_r_direct: Vec<f64> = (0..n).map(|i| r[i] - r_tilde_direct[i]).collect();
    let route_difference = (0..n).map(|i| (delta_r[i] - delta_r_direct[i]).abs()).fold(0.0, f64::max);
    let int_rt = cumulative_trapezoid(r_tilde_direct, dt);
    let k_tilde_direct: Vec<f64> = (0..n).map(|i| k_bar[i] - int_rt[i]).collect();
    let ktd_gp = conv_trap(&k_tilde_direct, &tables.dens_deriv, dt, n);
    let quadrature_residual = (0..n)
        .map(|i| {
            (r_tilde_direct[i] - y_tilde.z.deriv_at(i) - path.h_h[i] + g0 * k_tilde_direct[i] + ktd_gp[i]).abs()
        })
        .fold(0.0, f64::max);

    // Primary route: ΔK = −ΔX⁻ − ∫ΔR.
    let int_dr = cumulative_trapezoid(&delta_r, dt);
    let delta_k: Vec<f64> = (0..n).map(|i| -delta_x_minus[i] - int_dr[i]).collect();
    let dk_residual = (0..n)
        .map(|i| (k[i] - k_tilde_direct[i] - delta_k[i]).abs())
        .fold(0.0, f64::max);
    let k_tilde: Vec<f64> = (0..n).map(|i| k[i] - delta_k[i]).collect();
    let r_tilde: Vec<f64> = (0..n).map(|i| r[i] - delta_r[i]).collect();

    let m_drift: Vec<f64> = (0..n).map(|i| -delta_r[i] - lambda * delta_x[i]).collect();
    // B̃ = B − σ⁻¹∫m, so the likelihood ratio uses the drift m/σ.
    let mut log_n = Vec::with_capacity(n);
    let mut acc = 0.0;
    log_n.push(0.0);
    for i in 0..n_t {
        let ms = m_drift[i] / sigma;
        acc += ms * (path.inputs.brownian.values[i + 1] - path.inputs.brownian.values[i]) - 0.5 * ms * ms * dt;
        log_n.push(acc);
    }

    let kt_g = conv_trap(&k_tilde, &tables.dens, dt, n);
    let tilde_boundary = (0..n)
        .map(|i| (y_tilde.z.value_at(i) - path.h_one[i] + k_tilde[i] - kt_g[i] - x_tilde[i].min(0.0)).abs())
        .fold(0.0, f64::max);
    let int_m = cumulative_trapezoid(&m_drift, dt);
    let e_tilde: Vec<f64> = (0..n).map(|i| path.e.values[i] - int_m[i]).collect();
    let mut zeta: Vec<f64> = (0..n).map(|i| y_tilde.z.value_at(i) - path.h_one[i]).collect();
    zeta[0] = xt0.min(0.0);
    let cms = cms_map_tables(&e_tilde, xt0, &zeta, tables)?;
    let tilde_cms_x = (0..n).map(|i| (cms.x[i] - x_tilde[i]).abs()).fold(0.0, f64::max);
    let tilde_cms_k = (0..n).map(|i| (cms.kappa[i] - k_tilde[i]).abs()).fold(0.0, f64::max);

    let tp = |v: Vec<f64>| TimePath::raw(dt, v);
    Ok(CoupledPair {
        lambda,
        y_tilde0: y_tilde.clone(),
        x_tilde: tp(x_tilde),
        k_tilde: tp(k_tilde),
        k_bar: tp(k_bar),
        r: tp(r),
        r_tilde: tp(r_tilde),
        delta_x: tp(delta_x),
        delta_x_minus: tp(delta_x_minus),
        delta_k: tp(delta_k),
        delta_r: tp(delta_r),
        delta_r_direct: tp(delta_r_direct),
        m: tp(m_drift),
        log_n: tp(log_n),
        renewal,
        diagnostics: CouplingDiagnostics {
            tx_residual,
            route_difference,
            renewal_residual: dr_sol.residual + rt_sol.residual,
            quadrature_residual,
            dk_residual,
            tilde_boundary,
            tilde_cms_x,
            tilde_cms_k,
        },
        y: path,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecayRow {
    pub t: f64,
    pub abs_delta_x: f64,
    /// |Δx₀|e^{−λt}.
    pub expected_delta_x: f64,
    pub delta_z_h1: f64,
    /// H¹ norms of Δz₀(t+·), −Ḡ(·)ΔX⁻(t), ∫ΔX⁻(s)g(t+·−s)ds and −∫ΔR(s)Ḡ(t+·−s)ds.
    pub term_h1: [f64; 4],
    /// sup of ΔZ minus the sum of the four terms, values and derivatives.
    pub decomposition_residual: f64,
}

/// Decay thresholds for ‖ΔZ‖ are empirical; the report carries no pass flag.
pub fn decay_report(pair: &CoupledPair, steps: &[usize]) -> Result<Vec<DecayRow>> {
    let g = pair.y.grid;
    let tables = &*pair.y.inputs.tables;
    let (n_r, dt) = (g.n_r, g.dt);
    let r_max = g.r_max();
    let y0 = &pair.y.inputs.y0;
    let yt = &pair.y_tilde0;
    let dx0 = (y0.x - yt.x).abs();
    let mut rows = Vec::with_capacity(steps.len());
    for &n in steps {
        if n > g.n_t {
            return Err(Error::Grid(format!("step {n} beyond the horizon")));
        }
        let t = n as f64 * dt;
        let dxm = pair.delta_x_minus.values[n];
        let (t1v, t1d): (Vec<f64>, Vec<f64>) = (0..=n_r)
            .map(|l| {
                let (a, b) = y0.z.at_index(n + l);
                let (c, d) = yt.z.at_index(n + l);
                (a - c, b - d)
            })
            .unzip();
        let t2v: Vec<f64> = (0..=n_r).map(|l| -tables.bar[l] * dxm).collect();
        let t2d: Vec<f64> = (0..=n_r).map(|l| tables.dens[l] * dxm).collect();
        let dxmv = &pair.delta_x_minus.values;
        let zv = lag_integral(dxmv, n, &tables.dens, n_r, dt);
        let zd = lag_integral(dxmv, n, &tables.dens_deriv, n_r, dt);
        let drv = &pair.delta_r.values;
        let xv: Vec<f64> = lag_integral(drv, n, &tables.bar, n_r, dt).into_iter().map(|v| -v).collect();
        let xd = lag_integral(drv, n, &tables.dens, n_r, dt);
        // ΔZ(t,·) = Δz₀(t+·) + Γ_tΔK.
        let (gv, gd) = crate::kernels::gamma_values(&pair.delta_k.values, n, tables, n_r);
        let dzv: Vec<f64> = (0..=n_r).map(|l| t1v[l] + gv[l]).collect();
        let dzd: Vec<f64> = (0..=n_r).map(|l| t1d[l] + gd[l]).collect();
        let mut res: f64 = 0.0;
        for l in 0..=n_r {
            res = res.max((dzv[l] - t1v[l] - t2v[l] - zv[l] - xv[l]).abs());
            res = res.max((dzd[l] - t1d[l] - t2d[l] - zd[l] - xd[l]).abs());
        }
        let norms = [
            h1(r_max, n_r, t1v, t1d).h1_norm(),
            h1(r_max, n_r, t2v, t2d).h1_norm(),
            h1(r_max, n_r, zv, zd).h1_norm(),
            h1(r_max, n_r, xv, xd).h1_norm(),
        ];
        rows.push(DecayRow {
            t,
            abs_delta_x: pair.delta_x.values[n].abs(),
            expected_delta_x: dx0 * (-pair.lambda * t).exp(),
            delta_z_h1: h1(r_max, n_r, dzv, dzd).h1_norm(),
            term_h1: norms,
            decomposition_residual: res,
        });
    }
    Ok(rows)
}

/// ΔZ(t_n, ·) = Δz₀(t+·) + Γ_tΔK.
pub fn delta_z(pair: &CoupledPair, n: usize) -> H1GridFunction {
    let g = pair.y.grid;
    let tables = &*pair.y.inputs.tables;
    let (gv, gd) = crate::kernels::gamma_values(&pair.delta_k.values, n, tables, g.n_r);
    let (v, d) = (0..=g.n_r)
        .map(|l| {
            let (a, b) = pair.y.inputs.y0.z.at_index(n + l);
            let (c, e) = pair.y_tilde0.z.at_index(n + l);
            (a - c + gv[l], b - e + gd[l])
        })
        .unzip();
    h1(g.r_max(), g.n_r, v, d)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeltaRBound {
    /// ‖ΔR‖_{L²} on [0, T].
    pub lhs: f64,
    /// (c₁ + c₂)(‖Δz₀‖_{H¹} + C|Δx₀|).
    pub rhs: f64,
    pub pass: bool,
    pub margin: f64,
    pub c1: f64,
    pub c2: f64,
    /// (g(0) + H₂)/√(2λ).
    pub c: f64,
    pub h2_sup: f64,
    pub dz0_h1: f64,
    pub route_difference: f64,
    /// 10·(renewal residual + quadrature residual).
    pub route_tolerance: f64,
    pub routes_agree: bool,
    pub truncation_dominates: bool,
}

pub fn delta_r_bound_check(pair: &CoupledPair) -> DeltaRBound {
    let d = &pair.y.inputs.dist;
    let dt = pair.y.grid.dt;
    let lhs = crate::grid::trapezoid(&pair.delta_r.values.iter().map(|v| v * v).collect::<Vec<_>>(), dt).sqrt();
    let report = AgeGrid::covering(d, dt.max(1e-3))
        .map(|grid| check_assumptions(d, grid, AssumptionThresholds::default()))
        .ok();
    let lim = d.h2_limits();
    let mut h2_sup = lim.at_zero.abs();
    if let Some(v) = lim.at_infinity {
        h2_sup = h2_sup.max(v.abs());
    }
    if let Some(r) = &report {
        h2_sup = h2_sup.max(r.h2_sup);
    }
    let g0 = pair.y.inputs.tables.dens[0];
    let c = (g0 + h2_sup) / (2.0 * pair.lambda).sqrt();
    let c1 = pair.renewal.c1();
    let c2 = 1.0;
    let dz0 = pair.y.inputs.y0.z.sub(&pair.y_tilde0.z).map(|f| f.h1_norm()).unwrap_or(f64::NAN);
    let dx0 = (pair.y.inputs.y0.x - pair.y_tilde0.x).abs();
    let rhs = (c1 + c2) * (dz0 + c * dx0);
    let diag = pair.diagnostics;
    let route_tolerance = 10.0 * (diag.renewal_residual + diag.quadrature_residual);
    DeltaRBound {
        lhs,
        rhs,
        pass: lhs <= rhs,
        margin: rhs - lhs,
        c1,
        c2,
        c,
        h2_sup,
        dz0_h1: dz0,
        route_difference: diag.route_difference,
        route_tolerance,
        routes_agree: diag.route_difference <= route_tolerance,
        truncation_dominates: pair.renewal.tail_estimate > pair.renewal.u_minus_one_l1 - pair.renewal.tail_estimate,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GirsanovSummary {
    pub log_n_final: f64,
    /// Left-point sums matching the likelihood-ratio quadrature.
    pub m_l2_sq: f64,
    pub delta_r_l2_sq: f64,
    pub delta_x_l2_sq: f64,
    /// 2‖ΔR‖² + 2λ²‖ΔX‖².
    pub bound: f64,
}

pub fn girsanov_weight(pair: &CoupledPair) -> (TimePath, GirsanovSummary) {
    let dt = pair.y.grid.dt;
    let n_t = pair.y.grid.n_t;
    let sq = |v: &[f64]| dt * v[..n_t].iter().map(|a| a * a).sum::<f64>();
    let m_l2_sq = sq(&pair.m.values);
    let delta_r_l2_sq = sq(&pair.delta_r.values);
    let delta_x_l2_sq = sq(&pair.delta_x.values);
    (
        pair.log_n.clone(),
        GirsanovSummary {
            log_n_final: pair.log_n.values[n_t],
            m_l2_sq,
            delta_r_l2_sq,
            delta_x_l2_sq,
            bound: 2.0 * delta_r_l2_sq + 2.0 * pair.lambda * pair.lambda * delta_x_l2_sq,
        },
    )
}
