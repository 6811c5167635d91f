//! Event-driven simulation of a many-server FCFS queue with renewal arrivals
//! and i.i.d. service, and its centered, √N-scaled state.

use std::cmp::{Ordering, Reverse};
use std::collections::BinaryHeap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::distributions::ServiceDistribution;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum InitialState {
    /// N jobs in service with i.i.d. ages from the density Ḡ, none waiting.
    Fluid,
    /// Given ages in service (at most N) plus a number waiting.
    Ages { ages: Vec<f64>, waiting: u64 },
}

#[derive(Clone, Debug)]
pub struct QueueConfig {
    pub n: usize,
    pub beta: f64,
    /// Replaces λ_N = N − β√N when set.
    pub arrival_rate: Option<f64>,
    /// Interarrival law, rescaled to mean 1/λ_N.
    pub interarrival: ServiceDistribution,
    pub service: ServiceDistribution,
    pub t_max: f64,
    pub seed: u64,
    pub initial: InitialState,
    /// Times at which the state is recorded, ascending.
    pub sample_times: Vec<f64>,
    /// Ages r_l = l·dr, l = 0..=n_r, at which Z^N is recorded.
    pub dr: f64,
    pub n_r: usize,
    /// Time averages of the busy count start here.
    pub burn_in: f64,
}

impl QueueConfig {
    pub fn arrival_rate(&self) -> f64 {
        self.arrival_rate.unwrap_or(self.n as f64 - self.beta * (self.n as f64).sqrt())
    }

    fn validate(&self) -> Result<()> {
        if self.n == 0 {
            return Err(Error::InvalidParameter("need at least one server".into()));
        }
        if self.arrival_rate.is_none() && !(self.beta > 0.0) {
            return Err(Error::InvalidParameter(format!("β must be positive, got {}", self.beta)));
        }
        let rate = self.arrival_rate();
        if !(rate >= 0.0 && rate.is_finite()) || (self.arrival_rate.is_none() && rate <= 0.0) {
            return Err(Error::InvalidParameter(format!("arrival rate must be positive, got {rate}")));
        }
        if !(self.t_max >= 0.0 && self.t_max.is_finite()) {
            return Err(Error::InvalidParameter(format!("horizon must be nonnegative, got {}", self.t_max)));
        }
        if self.sample_times.windows(2).any(|w| w[1] < w[0]) || self.sample_times.iter().any(|t| *t < 0.0 || *t > self.t_max) {
            return Err(Error::InvalidParameter("sample times must be ascending within [0, T]".into()));
        }
        if let InitialState::Ages { ages, .. } = &self.initial {
            if ages.len() > self.n || ages.iter().any(|a| !(*a >= 0.0)) {
                return Err(Error::InvalidParameter("initial ages must be nonnegative and at most N".into()));
            }
            if ages.len() < self.n && matches!(self.initial, InitialState::Ages { waiting, .. } if waiting > 0) {
                return Err(Error::InvalidParameter("jobs cannot wait while a server is idle".into()));
            }
        }
        Ok(())
    }
}

/// Counts of invariant checks and violations.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct InvariantReport {
    pub events: u64,
    pub checks: u64,
    /// X(t) = X(0) + E(t) − D(t).
    pub mass_balance_violations: u64,
    /// (X(t) − N)∧0 = ν_t(𝟙) − N.
    pub non_idling_violations: u64,
    /// K(t) = ν_t(𝟙) − ν_0(𝟙) + D(t).
    pub entry_violations: u64,
}

impl InvariantReport {
    pub fn clean(&self) -> bool {
        self.mass_balance_violations == 0 && self.non_idling_violations == 0 && self.entry_violations == 0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QueueSample {
    pub t: f64,
    pub x: u64,
    pub in_service: u64,
    /// Z^N(t, r_l) = Σ_j Ḡ(a_j + r_l)/Ḡ(a_j).
    pub z: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QueuePath {
    pub n: usize,
    pub arrival_rate: f64,
    pub dr: f64,
    pub samples: Vec<QueueSample>,
    pub invariants: InvariantReport,
    pub arrivals: u64,
    pub departures: u64,
    pub entries: u64,
    /// Time average of the number in service over [burn_in, T].
    pub mean_busy: f64,
}

/// A job in service, ordered by departure time then start time.
#[derive(Clone, Copy, Debug)]
struct Job {
    depart: f64,
    start: f64,
}

impl PartialEq for Job {
    fn eq(&self, o: &Self) -> bool {
        self.cmp(o) == Ordering::Equal
    }
}
impl Eq for Job {}
impl PartialOrd for Job {
    fn partial_cmp(&self, o: &Self) -> Option<Ordering> {
        Some(self.cmp(o))
    }
}
impl Ord for Job {
    fn cmp(&self, o: &Self) -> Ordering {
        self.depart.total_cmp(&o.depart).then(self.start.total_cmp(&o.start))
    }
}

pub fn run_queue(cfg: &QueueConfig) -> Result<QueuePath> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let n = cfg.n as u64;
    let rate = cfg.arrival_rate();
    let ia_scale = if rate > 0.0 { 1.0 / (rate * cfg.interarrival.mean()) } else { f64::INFINITY };
    let svc = &cfg.service;

    let mut busy: BinaryHeap<Reverse<Job>> = BinaryHeap::with_capacity(cfg.n);
    let mut waiting: u64 = 0;
    match &cfg.initial {
        InitialState::Fluid => {
            for _ in 0..cfg.n {
                let age = svc.sample_equilibrium(&mut rng);
                let rem = svc.sample_residual(age, &mut rng);
                busy.push(Reverse(Job { depart: rem, start: -age }));
            }
        }
        InitialState::Ages { ages, waiting: w } => {
            for &age in ages {
                let rem = svc.sample_residual(age, &mut rng);
                busy.push(Reverse(Job { depart: rem, start: -age }));
            }
            waiting = *w;
        }
    }
    let nu0 = busy.len() as u64;
    let x0 = nu0 + waiting;
    let (mut e, mut d, mut k) = (0u64, 0u64, 0u64);
    let mut report = InvariantReport::default();
    let mut next_arrival = if rate > 0.0 {
        // Stationary renewal start: the first gap has the equilibrium law.
        cfg.interarrival.sample_equilibrium(&mut rng) * ia_scale
    } else {
        f64::INFINITY
    };
    let mut samples = Vec::with_capacity(cfg.sample_times.len());
    let mut next_sample = 0;
    let mut clock: f64 = 0.0;
    let mut busy_area = 0.0;

    let record = |t: f64, busy: &BinaryHeap<Reverse<Job>>, x: u64, out: &mut Vec<QueueSample>| {
        let mut z = vec![0.0; cfg.n_r + 1];
        for Reverse(job) in busy.iter() {
            let age = t - job.start;
            z[0] += 1.0;
            for (l, v) in z.iter_mut().enumerate().skip(1) {
                *v += svc.survival_ratio(age, l as f64 * cfg.dr);
            }
        }
        out.push(QueueSample { t, x, in_service: busy.len() as u64, z });
    };

    loop {
        let next_dep = busy.peek().map(|Reverse(j)| j.depart).unwrap_or(f64::INFINITY);
        // Arrivals go first at equal times.
        let t_event = next_arrival.min(next_dep);
        while next_sample < cfg.sample_times.len() && cfg.sample_times[next_sample] < t_event {
            record(cfg.sample_times[next_sample], &busy, busy.len() as u64 + waiting, &mut samples);
            next_sample += 1;
        }
        let t_end = t_event.min(cfg.t_max);
        if t_end > cfg.burn_in {
            busy_area += busy.len() as f64 * (t_end - clock.max(cfg.burn_in));
        }
        if t_event > cfg.t_max {
            break;
        }
        clock = t_event;
        if next_arrival <= next_dep {
            e += 1;
            if (busy.len() as u64) < n {
                let s = svc.sample(&mut rng);
                busy.push(Reverse(Job { depart: clock + s, start: clock }));
                k += 1;
            } else {
                waiting += 1;
            }
            next_arrival = clock + cfg.interarrival.sample(&mut rng) * ia_scale;
        } else {
            busy.pop();
            d += 1;
            if waiting > 0 {
                waiting -= 1;
                let s = svc.sample(&mut rng);
                busy.push(Reverse(Job { depart: clock + s, start: clock }));
                k += 1;
            }
        }
        report.events += 1;
        report.checks += 1;
        let nu = busy.len() as u64;
        let x = nu + waiting;
        if x + d != x0 + e {
            report.mass_balance_violations += 1;
        }
        if (x as i64 - n as i64).min(0) != nu as i64 - n as i64 {
            report.non_idling_violations += 1;
        }
        if k + nu0 != nu + d {
            report.entry_violations += 1;
        }
    }
    let span = cfg.t_max - cfg.burn_in;
    Ok(QueuePath {
        n: cfg.n,
        arrival_rate: rate,
        dr: cfg.dr,
        samples,
        invariants: report,
        arrivals: e,
        departures: d,
        entries: k,
        mean_busy: if span > 0.0 { busy_area / span } else { f64::NAN },
    })
}

/// X̂ = (X − N)/√N and Ẑ(t,r) = (Z(t,r) − N∫_r^∞Ḡ)/√N at each sample.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScaledPath {
    pub times: Vec<f64>,
    pub x_hat: Vec<f64>,
    pub z_hat: Vec<Vec<f64>>,
}

pub fn scale_state(path: &QueuePath, service: &ServiceDistribution) -> ScaledPath {
    let nf = path.n as f64;
    let sq = nf.sqrt();
    let n_r = path.samples.first().map(|s| s.z.len()).unwrap_or(0);
    let center: Vec<f64> = (0..n_r).map(|l| nf * service.integrated_tail(l as f64 * path.dr)).collect();
    ScaledPath {
        times: path.samples.iter().map(|s| s.t).collect(),
        x_hat: path.samples.iter().map(|s| (s.x as f64 - nf) / sq).collect(),
        z_hat: path
            .samples
            .iter()
            .map(|s| s.z.iter().zip(&center).map(|(z, c)| (z - c) / sq).collect())
            .collect(),
    }
}

/// σ² = c_a², the squared coefficient of variation of the interarrival law.
pub fn matched_sigma(interarrival: &ServiceDistribution) -> f64 {
    let m = interarrival.mean();
    let var = interarrival.second_moment() - m * m;
    (var / (m * m)).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stats::Moments;

    fn base(n: usize, t_max: f64, seed: u64) -> QueueConfig {
        QueueConfig {
            n,
            beta: 1.0,
            arrival_rate: None,
            interarrival: ServiceDistribution::exponential(1.0).unwrap(),
            service: ServiceDistribution::exponential(1.0).unwrap(),
            t_max,
            seed,
            initial: InitialState::Fluid,
            sample_times: vec![0.0, t_max],
            dr: 0.5,
            n_r: 4,
            burn_in: 0.0,
        }
    }

    #[test]
    fn single_job_profile() {
        let cfg = QueueConfig {
            arrival_rate: Some(0.0),
            initial: InitialState::Ages { ages: vec![0.0], waiting: 0 },
            ..base(1, 1.0, 1)
        };
        let p = run_queue(&cfg).unwrap();
        let s = &p.samples[0];
        for (l, v) in s.z.iter().enumerate() {
            assert!((v - (-(l as f64) * 0.5).exp()).abs() < 1e-14);
        }
    }

    #[test]
    fn invariants_and_reproducibility() {
        let cfg = QueueConfig {
            service: ServiceDistribution::lomax(3.0, 2.0).unwrap(),
            interarrival: ServiceDistribution::gamma(2.0, 2.0).unwrap(),
            sample_times: vec![0.0, 1.0, 2.5, 5.0],
            ..base(50, 5.0, 4)
        };
        let a = run_queue(&cfg).unwrap();
        assert!(a.invariants.clean() && a.invariants.events > 100, "{:?}", a.invariants);
        assert_eq!(a.samples.len(), 4);
        for s in &a.samples {
            assert_eq!(s.z[0], s.in_service as f64);
        }
        assert_eq!(a, run_queue(&cfg).unwrap());
    }

    #[test]
    fn mmn_occupancy() {
        // M/M/5 with λ = 4: the mean number busy is λ·E[S] = 4.
        let busy: Vec<f64> = (0..40)
            .map(|i| {
                let cfg = QueueConfig { arrival_rate: Some(4.0), burn_in: 20.0, ..base(5, 220.0, 100 + i) };
                run_queue(&cfg).unwrap().mean_busy / 5.0
            })
            .collect();
        let m = Moments::of(&busy);
        assert!((m.mean - 0.8).abs() < 3.0 * m.se_mean, "{m:?}");
    }

    #[test]
    fn fluid_start_is_centered() {
        let xs: Vec<f64> = (0..200)
            .map(|i| {
                let cfg = QueueConfig {
                    service: ServiceDistribution::lomax(3.0, 2.0).unwrap(),
                    sample_times: vec![0.0],
                    ..base(100, 0.0, i)
                };
                let p = run_queue(&cfg).unwrap();
                scale_state(&p, &cfg.service).z_hat[0][2]
            })
            .collect();
        let m = Moments::of(&xs);
        assert!(m.mean.abs() < 3.0 * m.se_mean, "{m:?}");
    }

    #[test]
    fn rejects_bad_configs() {
        assert!(run_queue(&QueueConfig { beta: 0.0, ..base(4, 1.0, 1) }).is_err());
        assert!(run_queue(&QueueConfig { n: 0, ..base(4, 1.0, 1) }).is_err());
        assert!(run_queue(&QueueConfig { sample_times: vec![2.0], ..base(4, 1.0, 1) }).is_err());
        assert!((matched_sigma(&ServiceDistribution::exponential(3.0).unwrap()) - 1.0).abs() < 1e-12);
    }

    proptest::proptest! {
        #![proptest_config(proptest::prelude::ProptestConfig::with_cases(24))]
        #[test]
        fn invariants_hold_for_any_seed(n in 1usize..40, beta in 0.05f64..0.95, seed in 0u64..10_000, waiting in 0u64..5) {
            let cfg = QueueConfig {
                beta,
                service: ServiceDistribution::lomax(3.0, 2.0).unwrap(),
                initial: InitialState::Ages { ages: (0..n).map(|i| 0.1 * i as f64).collect(), waiting },
                ..base(n, 4.0, seed)
            };
            let p = run_queue(&cfg).unwrap();
            proptest::prop_assert!(p.invariants.clean());
            proptest::prop_assert_eq!(p.entries + n as u64, p.samples[1].in_service + p.departures);
            for s in &p.samples {
                proptest::prop_assert_eq!(s.z[0], s.in_service as f64);
                proptest::prop_assert!(s.z.windows(2).all(|w| w[1] <= w[0]));
            }
        }
    }
}
