use std::sync::Arc;

use anyhow::{Context, Result};
use manyserver_core::convergence::{convergence_order as run_convergence, ConvergenceConfig};
use manyserver_core::coupling::{build_coupled, decay_report, delta_r_bound_check, girsanov_weight};
use manyserver_core::diffusion::spde_residuals;
use manyserver_core::noise::{brownian_path, derive_seed};
use manyserver_core::queue::matched_sigma;
use manyserver_core::stationary::{estimate_stationary, StationaryConfig};
use manyserver_core::{
    check_assumptions, run_queue, scale_state, AgeGrid, AssumptionThresholds, BuildOptions, DiffusionModel, InitialState,
    NoiseField, QueueConfig, ServiceDistribution, StatePoint,
};
use rayon::prelude::*;
use serde::Serialize;
use serde_json::json;

use crate::config::ExperimentConfig;
use crate::output::OutputDir;
use crate::RunSummary;

fn seeds(cfg: &ExperimentConfig) -> Vec<u64> {
    (0..cfg.reps as u64).map(|i| derive_seed(cfg.seed, i)).collect()
}

fn model(cfg: &ExperimentConfig) -> Result<(ServiceDistribution, DiffusionModel)> {
    let dist = cfg.distribution.build().context("invalid distribution")?;
    let model = DiffusionModel::with_beta_check(dist.clone(), cfg.grid()?, cfg.sigma, cfg.beta, cfg.allow_nonpositive_beta)?;
    Ok((dist, model))
}

#[derive(Serialize)]
struct HazardRow {
    x: f64,
    ccdf: f64,
    pdf: f64,
    hazard: f64,
    h2: f64,
}

pub fn verify_distribution(cfg: &ExperimentConfig, out: &mut OutputDir) -> Result<RunSummary> {
    let dist = cfg.distribution.build().context("invalid distribution")?;
    let grid = AgeGrid::covering(&dist, cfg.grid.dt)?;
    let report = check_assumptions(&dist, grid, AssumptionThresholds::default());
    out.write_json("assumptions.json", &report)?;
    out.write_csv(
        "hazard.csv",
        (0..=grid.n()).map(|k| {
            let x = grid.point(k);
            HazardRow { x, ccdf: dist.ccdf(x), pdf: dist.pdf(x), hazard: dist.hazard(x), h2: dist.h2(x) }
        }),
    )?;
    Ok(RunSummary {
        seeds: Vec::new(),
        summary: json!({ "pass": report.passed(), "h_sup": report.h_sup, "h2_sup": report.h2_sup }),
    })
}

#[derive(Serialize)]
struct PathRow {
    rep: usize,
    t: f64,
    x: f64,
    k: f64,
}

#[derive(Serialize)]
struct ProfileRow {
    rep: usize,
    t: f64,
    r: f64,
    z: f64,
    dz: f64,
}

pub fn simulate_diffusion(cfg: &ExperimentConfig, out: &mut OutputDir) -> Result<RunSummary> {
    let (dist, model) = model(cfg)?;
    let grid = model.grid;
    let y0 = StatePoint::canonical(cfg.x0, &dist, cfg.perturbation, grid.r_max(), grid.n_r)?;
    let probes = cfg.probes.iter().map(|r| grid.age_index(*r)).collect::<manyserver_core::Result<Vec<_>>>()?;
    let opts = BuildOptions { snapshot_stride: cfg.snapshot_stride, extra_steps: Vec::new() };
    let seeds = seeds(cfg);
    let runs = seeds
        .par_iter()
        .map(|&seed| {
            let b = Arc::new(brownian_path(grid, seed, 1));
            let m = Arc::new(NoiseField::generate(&dist, grid, seed));
            let p = model.build(&y0, b, m, &opts)?;
            let (mut rz, mut rx) = (0.0f64, 0.0f64);
            for &l in &probes {
                let s = spde_residuals(&p, l);
                rz = rz.max(s.sup_z());
                rx = rx.max(s.sup_x());
            }
            Ok((p, rz, rx))
        })
        .collect::<manyserver_core::Result<Vec<_>>>()?;
    out.write_csv(
        "paths.csv",
        runs.iter().enumerate().flat_map(|(rep, (p, _, _))| {
            (0..=grid.n_t).map(move |n| PathRow { rep, t: n as f64 * grid.dt, x: p.x.values[n], k: p.k.values[n] })
        }),
    )?;
    out.write_csv(
        "snapshots.csv",
        runs.iter().enumerate().flat_map(|(rep, (p, _, _))| {
            p.snapshots.iter().flat_map(move |s| {
                (0..=grid.n_r).map(move |l| ProfileRow {
                    rep,
                    t: s.step as f64 * grid.dt,
                    r: l as f64 * grid.dt,
                    z: s.z.base.values[l],
                    dz: s.z.deriv.values[l],
                })
            })
        }),
    )?;
    let fold = |f: &dyn Fn(&(manyserver_core::DiffusionPath, f64, f64)) -> f64| runs.iter().map(f).fold(0.0, f64::max);
    let report = json!({
        "max_res_z": fold(&|r| r.1),
        "max_res_x": fold(&|r| r.2),
        "boundary_max": fold(&|r| r.0.boundary_max),
        "cms_boundary": fold(&|r| r.0.cms.boundary),
        "probes": cfg.probes,
        "seeds": seeds,
        "grid": { "dt": grid.dt, "n_t": grid.n_t, "n_r": grid.n_r, "t_max": grid.t_max(), "r_max": grid.r_max() },
    });
    out.write_json("residuals.json", &report)?;
    Ok(RunSummary { seeds, summary: report })
}

#[derive(Serialize)]
struct DecayCsvRow {
    t: f64,
    abs_delta_x: f64,
    expected_delta_x: f64,
    delta_z_h1: f64,
    term_initial: f64,
    term_boundary: f64,
    term_delta_x: f64,
    term_delta_r: f64,
    decomposition_residual: f64,
}

#[derive(Serialize)]
struct WeightRow {
    t: f64,
    log_n: f64,
    m: f64,
    delta_x: f64,
    delta_r: f64,
}

pub fn coupling(cfg: &ExperimentConfig, out: &mut OutputDir) -> Result<RunSummary> {
    let (dist, model) = model(cfg)?;
    let grid = model.grid;
    let y = StatePoint::canonical(cfg.x0, &dist, cfg.perturbation, grid.r_max(), grid.n_r)?;
    let yt = StatePoint::canonical(cfg.x0_tilde, &dist, cfg.perturbation_tilde, grid.r_max(), grid.n_r)?;
    let steps = cfg
        .decay_times
        .iter()
        .filter(|t| **t <= grid.t_max() + 1e-12)
        .map(|t| grid.time_index(*t))
        .collect::<manyserver_core::Result<Vec<_>>>()?;
    let seed = derive_seed(cfg.seed, 0);
    let b = Arc::new(brownian_path(grid, seed, 1));
    let m = Arc::new(NoiseField::generate(&dist, grid, seed));
    let pair = build_coupled(&model, &y, &yt, cfg.lambda, b, m, &BuildOptions::only(steps.clone()))?;
    let rows = decay_report(&pair, &steps)?;
    out.write_csv(
        "decay.csv",
        rows.iter().map(|r| DecayCsvRow {
            t: r.t,
            abs_delta_x: r.abs_delta_x,
            expected_delta_x: r.expected_delta_x,
            delta_z_h1: r.delta_z_h1,
            term_initial: r.term_h1[0],
            term_boundary: r.term_h1[1],
            term_delta_x: r.term_h1[2],
            term_delta_r: r.term_h1[3],
            decomposition_residual: r.decomposition_residual,
        }),
    )?;
    let bound = delta_r_bound_check(&pair);
    let (log_n, girsanov) = girsanov_weight(&pair);
    let report = json!({
        "delta_r_bound": bound,
        "girsanov": girsanov,
        "diagnostics": pair.diagnostics,
        "decay_thresholds": "empirical",
    });
    out.write_json("bound.json", &report)?;
    out.write_csv(
        "log_n.csv",
        (0..=grid.n_t).map(|n| WeightRow {
            t: n as f64 * grid.dt,
            log_n: log_n.values[n],
            m: pair.m.values[n],
            delta_x: pair.delta_x.values[n],
            delta_r: pair.delta_r.values[n],
        }),
    )?;
    Ok(RunSummary { seeds: vec![seed], summary: report })
}

#[derive(Serialize)]
struct QueueXRow {
    rep: usize,
    t: f64,
    x: u64,
    in_service: u64,
    x_hat: f64,
}

#[derive(Serialize)]
struct QueueZRow {
    rep: usize,
    t: f64,
    r: f64,
    z: f64,
    z_hat: f64,
}

pub fn simulate_queue(cfg: &ExperimentConfig, out: &mut OutputDir) -> Result<RunSummary> {
    let service = cfg.distribution.build().context("invalid service distribution")?;
    let interarrival = cfg.queue.interarrival.build().context("invalid interarrival distribution")?;
    let grid = cfg.grid()?;
    let stride = cfg.snapshot_stride.max(1);
    let sample_times: Vec<f64> = (0..=grid.n_t).step_by(stride).map(|n| n as f64 * grid.dt).collect();
    let seeds = seeds(cfg);
    let base = QueueConfig {
        n: cfg.queue.n,
        beta: cfg.beta,
        arrival_rate: cfg.queue.arrival_rate,
        interarrival: interarrival.clone(),
        service: service.clone(),
        t_max: grid.t_max(),
        seed: 0,
        initial: InitialState::Fluid,
        sample_times,
        dr: grid.dt,
        n_r: grid.n_r,
        burn_in: cfg.queue.burn_in,
    };
    let runs = seeds
        .par_iter()
        .map(|&seed| {
            let p = run_queue(&QueueConfig { seed, ..base.clone() })?;
            let s = scale_state(&p, &service);
            Ok((p, s))
        })
        .collect::<manyserver_core::Result<Vec<_>>>()?;
    out.write_csv(
        "x_hat.csv",
        runs.iter().enumerate().flat_map(|(rep, (p, s))| {
            p.samples.iter().zip(&s.x_hat).map(move |(q, xh)| QueueXRow {
                rep,
                t: q.t,
                x: q.x,
                in_service: q.in_service,
                x_hat: *xh,
            })
        }),
    )?;
    out.write_csv(
        "z_hat.csv",
        runs.iter().enumerate().flat_map(|(rep, (p, s))| {
            let dr = p.dr;
            p.samples.iter().zip(&s.z_hat).flat_map(move |(q, zh)| {
                q.z.iter().zip(zh).enumerate().map(move |(l, (z, z_hat))| QueueZRow { rep, t: q.t, r: l as f64 * dr, z: *z, z_hat: *z_hat })
            })
        }),
    )?;
    let per_rep: Vec<_> = runs.iter().map(|(p, _)| p.invariants).collect();
    let total_events: u64 = per_rep.iter().map(|r| r.events).sum();
    let clean = per_rep.iter().all(|r| r.clean());
    let report = json!({
        "clean": clean,
        "events": total_events,
        "replications": per_rep,
        "arrival_rate": base.arrival_rate(),
        "matched_sigma": matched_sigma(&interarrival),
        "centering": "fluid invariant N·∫_r^∞Ḡ; the prelimit scaling is a soft assumption",
    });
    out.write_json("invariants.json", &report)?;
    Ok(RunSummary { seeds, summary: json!({ "clean": clean, "events": total_events }) })
}

pub fn stationary(cfg: &ExperimentConfig, out: &mut OutputDir) -> Result<RunSummary> {
    let dist = cfg.distribution.build().context("invalid distribution")?;
    let g = cfg.grid;
    let sc = StationaryConfig {
        dist,
        dt: g.dt,
        t_max: g.t_max,
        r_max: g.r_max,
        sigma: cfg.sigma,
        beta: cfg.beta,
        allow_nonpositive_beta: cfg.allow_nonpositive_beta,
        x0: cfg.x0,
        perturbation: cfg.perturbation,
        burn_in: cfg.burn_in,
        reps: cfg.reps,
        seed: cfg.seed,
    };
    let s = estimate_stationary(&sc)?;
    out.write_csv("samples.csv", s.samples.iter())?;
    let summary = json!({
        "x_t": s.x_t,
        "z_h1": s.z_h1,
        "z_t0": s.z_t0,
        "x_avg": s.x_avg,
        "p_positive": s.p_positive,
        "boundary_max": s.boundary_max,
    });
    out.write_json("summary.json", &summary)?;
    Ok(RunSummary { seeds: seeds(cfg), summary })
}

pub fn convergence_order(cfg: &ExperimentConfig, out: &mut OutputDir) -> Result<RunSummary> {
    let dist = cfg.distribution.build().context("invalid distribution")?;
    let g = cfg.grid;
    let cc = ConvergenceConfig {
        dist,
        dt: g.dt,
        levels: cfg.levels,
        t_max: g.t_max,
        r_max: g.r_max,
        sigma: cfg.sigma,
        beta: cfg.beta,
        x0: cfg.x0,
        perturbation: cfg.perturbation,
        seed: cfg.seed,
        probes: cfg.probes.clone(),
        shift: cfg.shift,
    };
    let rep = run_convergence(&cc)?;
    out.write_csv("levels.csv", rep.levels.iter())?;
    let summary = json!({
        "min_order": rep.min_order(),
        "res_z": rep.res_z,
        "res_x": rep.res_x,
        "res_zshift": rep.res_zshift,
        "res_lambda": rep.res_lambda,
    });
    out.write_json("orders.json", &summary)?;
    Ok(RunSummary { seeds: vec![cfg.seed], summary })
}
