//! Service-time laws with closed-form survival, density and hazard functions.
//!
//! Every law can be rescaled to unit mean at construction; the parameters the
//! caller supplied are kept in [`Origin`].

use std::collections::BTreeMap;
use std::f64::consts::{PI, SQRT_2};

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, Exp1, StandardNormal};
use serde::{Deserialize, Serialize};
use statrs::function::{erf, gamma};

use crate::error::{invalid, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    Exponential,
    Lomax,
    #[serde(alias = "lognormal")]
    LogNormal,
    Gamma,
    #[serde(alias = "phasetype", alias = "ph")]
    PhaseType,
}

impl Family {
    pub fn name(self) -> &'static str {
        match self {
            Family::Exponential => "exponential",
            Family::Lomax => "lomax",
            Family::LogNormal => "log_normal",
            Family::Gamma => "gamma",
            Family::PhaseType => "phase_type",
        }
    }
}

impl std::str::FromStr for Family {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "exponential" | "exp" => Ok(Family::Exponential),
            "lomax" | "pareto2" => Ok(Family::Lomax),
            "log_normal" | "lognormal" => Ok(Family::LogNormal),
            "gamma" => Ok(Family::Gamma),
            "phase_type" | "phasetype" | "ph" => Ok(Family::PhaseType),
            other => invalid(format!("unknown family `{other}`")),
        }
    }
}

/// Distribution record as it appears in experiment configs.
///
/// Parameter keys: `rate` (exponential); `shape`, `scale` (lomax);
/// `mu`, `sigma` (log-normal); `shape`, `rate` (gamma). Phase-type laws take
/// either `erlang` and `rate`, or `m`, `alpha.i` and `s.i.j`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistributionConfig {
    pub family: Family,
    #[serde(default)]
    pub params: BTreeMap<String, f64>,
    #[serde(default = "default_true")]
    pub normalize_mean: bool,
}

fn default_true() -> bool {
    true
}

impl DistributionConfig {
    pub fn new(family: Family, params: &[(&str, f64)]) -> Self {
        DistributionConfig {
            family,
            params: params.iter().map(|(k, v)| (k.to_string(), *v)).collect(),
            normalize_mean: true,
        }
    }

    pub fn build(&self) -> Result<ServiceDistribution> {
        ServiceDistribution::from_config(self)
    }
}

/// Parameters as supplied, before any rescaling.
#[derive(Clone, Debug, PartialEq)]
pub struct Origin {
    pub family: Family,
    pub params: BTreeMap<String, f64>,
    /// Mean of the law as supplied; times were divided by this on normalization.
    pub time_scale: f64,
}

#[derive(Clone, Debug)]
enum Law {
    Exponential { rate: f64 },
    Lomax { shape: f64, scale: f64 },
    LogNormal { mu: f64, sigma: f64 },
    Gamma { shape: f64, rate: f64, ln_gamma_shape: f64 },
    PhaseType(Box<PhaseTypeLaw>),
}

#[derive(Clone, Debug)]
struct PhaseTypeLaw {
    m: usize,
    alpha: Vec<f64>,
    s: Vec<f64>,
    exit: Vec<f64>,
    nu: Vec<f64>,
    mean_vec: Vec<f64>,
    q: f64,
    p: Vec<f64>,
    /// e^{2^k S/q} scaled to unit max entry, with the log of the scale.
    powers: Vec<(Vec<f64>, f64)>,
}

#[derive(Clone, Debug)]
pub struct ServiceDistribution {
    law: Law,
    origin: Origin,
}

/// Limits of a function of age at the origin and at infinity.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Limits {
    pub at_zero: f64,
    pub at_infinity: Option<f64>,
}

const MILLS_SWITCH: f64 = 6.0;
const POWER_LEVELS: usize = 62;

impl ServiceDistribution {
    pub fn exponential(rate: f64) -> Result<Self> {
        if !(rate > 0.0 && rate.is_finite()) {
            return invalid(format!("exponential rate must be positive, got {rate}"));
        }
        Ok(Self::wrap(Law::Exponential { rate }, &[("rate", rate)]))
    }

    pub fn lomax(shape: f64, scale: f64) -> Result<Self> {
        if !(shape > 0.0 && shape.is_finite()) || !(scale > 0.0 && scale.is_finite()) {
            return invalid(format!("lomax needs shape > 0 and scale > 0, got ({shape}, {scale})"));
        }
        Ok(Self::wrap(Law::Lomax { shape, scale }, &[("shape", shape), ("scale", scale)]))
    }

    pub fn log_normal(mu: f64, sigma: f64) -> Result<Self> {
        if !mu.is_finite() || !(sigma > 0.0 && sigma.is_finite()) {
            return invalid(format!("log-normal needs finite mu and sigma > 0, got ({mu}, {sigma})"));
        }
        Ok(Self::wrap(Law::LogNormal { mu, sigma }, &[("mu", mu), ("sigma", sigma)]))
    }

    pub fn gamma(shape: f64, rate: f64) -> Result<Self> {
        if !(shape > 0.0 && shape.is_finite()) || !(rate > 0.0 && rate.is_finite()) {
            return invalid(format!("gamma needs shape > 0 and rate > 0, got ({shape}, {rate})"));
        }
        let law = Law::Gamma { shape, rate, ln_gamma_shape: gamma::ln_gamma(shape) };
        Ok(Self::wrap(law, &[("shape", shape), ("rate", rate)]))
    }

    /// Erlang law with `k` phases of the given rate, as a phase-type law.
    pub fn erlang(k: usize, rate: f64) -> Result<Self> {
        if k == 0 {
            return invalid("erlang needs at least one phase");
        }
        let mut s = vec![0.0; k * k];
        for i in 0..k {
            s[i * k + i] = -rate;
            if i + 1 < k {
                s[i * k + i + 1] = rate;
            }
        }
        let mut alpha = vec![0.0; k];
        alpha[0] = 1.0;
        Self::phase_type(alpha, s)
    }

    /// Phase-type law with initial row `alpha` and row-major subgenerator `s`.
    pub fn phase_type(alpha: Vec<f64>, s: Vec<f64>) -> Result<Self> {
        let law = PhaseTypeLaw::new(alpha, s)?;
        let mut params = vec![("m".to_string(), law.m as f64)];
        for (i, a) in law.alpha.iter().enumerate() {
            params.push((format!("alpha.{i}"), *a));
        }
        for i in 0..law.m {
            for j in 0..law.m {
                params.push((format!("s.{i}.{j}"), law.s[i * law.m + j]));
            }
        }
        let origin = Origin {
            family: Family::PhaseType,
            params: params.into_iter().collect(),
            time_scale: 1.0,
        };
        Ok(ServiceDistribution { law: Law::PhaseType(Box::new(law)), origin })
    }

    pub fn from_config(cfg: &DistributionConfig) -> Result<Self> {
        let get = |keys: &[&str], default: Option<f64>| -> Result<f64> {
            for k in keys {
                if let Some(v) = cfg.params.get(*k) {
                    return Ok(*v);
                }
            }
            default.ok_or_else(|| {
                Error::InvalidParameter(format!("{} needs parameter `{}`", cfg.family.name(), keys[0]))
            })
        };
        let d = match cfg.family {
            Family::Exponential => Self::exponential(get(&["rate", "mu"], Some(1.0))?)?,
            Family::Lomax => Self::lomax(get(&["shape", "alpha"], None)?, get(&["scale", "lambda"], None)?)?,
            Family::LogNormal => Self::log_normal(get(&["mu", "location"], Some(0.0))?, get(&["sigma", "scale"], None)?)?,
            Family::Gamma => Self::gamma(get(&["shape", "alpha"], None)?, get(&["rate", "beta"], None)?)?,
            Family::PhaseType => {
                if let Some(k) = cfg.params.get("erlang") {
                    if k.fract() != 0.0 || *k < 1.0 {
                        return invalid(format!("erlang phase count must be a positive integer, got {k}"));
                    }
                    Self::erlang(*k as usize, get(&["rate"], Some(1.0))?)?
                } else {
                    let m = get(&["m"], None)?;
                    if m.fract() != 0.0 || m < 1.0 {
                        return invalid(format!("phase count m must be a positive integer, got {m}"));
                    }
                    let m = m as usize;
                    let alpha = (0..m).map(|i| get(&[&format!("alpha.{i}")], Some(0.0))).collect::<Result<Vec<_>>>()?;
                    let mut s = Vec::with_capacity(m * m);
                    for i in 0..m {
                        for j in 0..m {
                            s.push(get(&[&format!("s.{i}.{j}")], Some(0.0))?);
                        }
                    }
                    Self::phase_type(alpha, s)?
                }
            }
        };
        let mut d = d;
        d.origin.params = cfg.params.clone();
        if cfg.normalize_mean {
            d.normalized()
        } else {
            Ok(d)
        }
    }

    fn wrap(law: Law, params: &[(&str, f64)]) -> Self {
        let family = match law {
            Law::Exponential { .. } => Family::Exponential,
            Law::Lomax { .. } => Family::Lomax,
            Law::LogNormal { .. } => Family::LogNormal,
            Law::Gamma { .. } => Family::Gamma,
            Law::PhaseType(_) => Family::PhaseType,
        };
        let origin = Origin {
            family,
            params: params.iter().map(|(k, v)| (k.to_string(), *v)).collect(),
            time_scale: 1.0,
        };
        ServiceDistribution { law, origin }
    }

    /// Rescales time so the mean becomes one. The supplied parameters stay in [`Origin`].
    pub fn normalized(&self) -> Result<Self> {
        let m = self.mean();
        if !(m.is_finite() && m > 0.0) {
            return invalid(format!("{} law has no finite mean to normalize", self.family().name()));
        }
        let law = match &self.law {
            Law::Exponential { rate } => Law::Exponential { rate: rate * m },
            Law::Lomax { shape, scale } => Law::Lomax { shape: *shape, scale: scale / m },
            Law::LogNormal { mu, sigma } => Law::LogNormal { mu: mu - m.ln(), sigma: *sigma },
            Law::Gamma { shape, rate, ln_gamma_shape } => {
                Law::Gamma { shape: *shape, rate: rate * m, ln_gamma_shape: *ln_gamma_shape }
            }
            Law::PhaseType(ph) => {
                let s = ph.s.iter().map(|v| v * m).collect();
                Law::PhaseType(Box::new(PhaseTypeLaw::new(ph.alpha.clone(), s)?))
            }
        };
        let mut origin = self.origin.clone();
        origin.time_scale *= m;
        Ok(ServiceDistribution { law, origin })
    }

    pub fn family(&self) -> Family {
        self.origin.family
    }

    pub fn origin(&self) -> &Origin {
        &self.origin
    }

    /// Current (possibly rescaled) parameters.
    pub fn params(&self) -> BTreeMap<String, f64> {
        let pairs: Vec<(String, f64)> = match &self.law {
            Law::Exponential { rate } => vec![("rate".into(), *rate)],
            Law::Lomax { shape, scale } => vec![("shape".into(), *shape), ("scale".into(), *scale)],
            Law::LogNormal { mu, sigma } => vec![("mu".into(), *mu), ("sigma".into(), *sigma)],
            Law::Gamma { shape, rate, .. } => vec![("shape".into(), *shape), ("rate".into(), *rate)],
            Law::PhaseType(ph) => {
                let mut v = vec![("m".to_string(), ph.m as f64)];
                v.extend(ph.alpha.iter().enumerate().map(|(i, a)| (format!("alpha.{i}"), *a)));
                for i in 0..ph.m {
                    for j in 0..ph.m {
                        v.push((format!("s.{i}.{j}"), ph.s[i * ph.m + j]));
                    }
                }
                v
            }
        };
        pairs.into_iter().collect()
    }

    /// Survival function Ḡ(x).
    pub fn ccdf(&self, x: f64) -> f64 {
        if x <= 0.0 {
            return 1.0;
        }
        match &self.law {
            Law::Exponential { rate } => (-rate * x).exp(),
            Law::Lomax { shape, scale } => (-shape * (x / scale).ln_1p()).exp(),
            Law::LogNormal { mu, sigma } => {
                let z = (x.ln() - mu) / sigma;
                if z < MILLS_SWITCH {
                    0.5 * erf::erfc(z / SQRT_2)
                } else {
                    std_normal_pdf(z) * mills_ratio(z)
                }
            }
            Law::Gamma { shape, rate, ln_gamma_shape } => {
                let y = rate * x;
                if y <= shape + 1.0 {
                    gamma::gamma_ur(*shape, y)
                } else {
                    ((shape - 1.0) * y.ln() - y - ln_gamma_shape).exp() * gamma_tail_q(*shape, y)
                }
            }
            Law::PhaseType(ph) => {
                let (v, ln_s) = ph.propagate(x);
                ln_s.exp() * v.iter().sum::<f64>()
            }
        }
    }

    /// ln Ḡ(x), accurate far into the tail.
    pub fn ln_ccdf(&self, x: f64) -> f64 {
        if x <= 0.0 {
            return 0.0;
        }
        match &self.law {
            Law::Exponential { rate } => -rate * x,
            Law::Lomax { shape, scale } => -shape * (x / scale).ln_1p(),
            Law::LogNormal { mu, sigma } => {
                let z = (x.ln() - mu) / sigma;
                if z < MILLS_SWITCH {
                    (0.5 * erf::erfc(z / SQRT_2)).ln()
                } else {
                    -0.5 * z * z - 0.5 * (2.0 * PI).ln() + mills_ratio(z).ln()
                }
            }
            Law::Gamma { shape, rate, ln_gamma_shape } => {
                let y = rate * x;
                if y <= shape + 1.0 {
                    gamma::gamma_ur(*shape, y).ln()
                } else {
                    (shape - 1.0) * y.ln() - y - ln_gamma_shape + gamma_tail_q(*shape, y).ln()
                }
            }
            Law::PhaseType(ph) => {
                let (v, ln_s) = ph.propagate(x);
                ln_s + v.iter().sum::<f64>().ln()
            }
        }
    }

    /// Density g(x); at x = 0 the right limit.
    pub fn pdf(&self, x: f64) -> f64 {
        let x = x.max(0.0);
        match &self.law {
            Law::Exponential { rate } => rate * (-rate * x).exp(),
            Law::Lomax { shape, scale } => shape / scale * (-(shape + 1.0) * (x / scale).ln_1p()).exp(),
            Law::LogNormal { mu, sigma } => {
                if x == 0.0 {
                    return 0.0;
                }
                let z = (x.ln() - mu) / sigma;
                std_normal_pdf(z) / (sigma * x)
            }
            Law::Gamma { shape, rate, ln_gamma_shape } => {
                let y = rate * x;
                if y == 0.0 {
                    return gamma_power_at_zero(*shape - 1.0, rate * (-ln_gamma_shape).exp());
                }
                rate * ((shape - 1.0) * y.ln() - y - ln_gamma_shape).exp()
            }
            Law::PhaseType(ph) => {
                let (v, ln_s) = ph.propagate(x);
                ln_s.exp() * dot(&v, &ph.exit)
            }
        }
    }

    /// Derivative g′(x); at x = 0 the right limit.
    pub fn pdf_deriv(&self, x: f64) -> f64 {
        let x = x.max(0.0);
        match &self.law {
            Law::Exponential { rate } => -rate * rate * (-rate * x).exp(),
            Law::Lomax { shape, scale } => {
                -shape * (shape + 1.0) / (scale * scale) * (-(shape + 2.0) * (x / scale).ln_1p()).exp()
            }
            Law::LogNormal { mu, sigma } => {
                if x == 0.0 {
                    return 0.0;
                }
                let z = (x.ln() - mu) / sigma;
                -std_normal_pdf(z) * (z + sigma) / (sigma * sigma * x * x)
            }
            Law::Gamma { shape, rate, ln_gamma_shape } => {
                let y = rate * x;
                let c = rate * rate * (-ln_gamma_shape).exp();
                if y == 0.0 {
                    if *shape == 1.0 {
                        return -c;
                    }
                    return (shape - 1.0).signum() * gamma_power_at_zero(*shape - 2.0, c);
                }
                c * (shape - 1.0 - y) * ((shape - 2.0) * y.ln() - y).exp()
            }
            Law::PhaseType(ph) => {
                let (v, ln_s) = ph.propagate(x);
                ln_s.exp() * dot(&v, &ph.nu)
            }
        }
    }

    /// Hazard rate h = g/Ḡ, evaluated without dividing two vanishing tails.
    pub fn hazard(&self, x: f64) -> f64 {
        let x = x.max(0.0);
        match &self.law {
            Law::Exponential { rate } => *rate,
            Law::Lomax { shape, scale } => shape / (scale + x),
            Law::LogNormal { mu, sigma } => {
                if x == 0.0 {
                    return 0.0;
                }
                let z = (x.ln() - mu) / sigma;
                if z < MILLS_SWITCH {
                    self.pdf(x) / self.ccdf(x)
                } else {
                    1.0 / (sigma * x * mills_ratio(z))
                }
            }
            Law::Gamma { shape, rate, .. } => {
                let y = rate * x;
                if y <= shape + 1.0 {
                    self.pdf(x) / self.ccdf(x)
                } else {
                    rate / gamma_tail_q(*shape, y)
                }
            }
            Law::PhaseType(ph) => {
                let (v, _) = ph.propagate(x);
                dot(&v, &ph.exit) / v.iter().sum::<f64>()
            }
        }
    }

    /// h₂ = g′/Ḡ.
    pub fn h2(&self, x: f64) -> f64 {
        let x = x.max(0.0);
        match &self.law {
            Law::Exponential { rate } => -rate * rate,
            Law::Lomax { shape, scale } => -shape * (shape + 1.0) / ((scale + x) * (scale + x)),
            Law::LogNormal { mu, sigma } => {
                if x == 0.0 {
                    return 0.0;
                }
                let z = (x.ln() - mu) / sigma;
                -(z + sigma) / (sigma * x) * self.hazard(x)
            }
            Law::Gamma { shape, rate, .. } => {
                let y = rate * x;
                if y <= shape + 1.0 {
                    self.pdf_deriv(x) / self.ccdf(x)
                } else {
                    rate * rate * (shape - 1.0 - y) / (y * gamma_tail_q(*shape, y))
                }
            }
            Law::PhaseType(ph) => {
                let (v, _) = ph.propagate(x);
                dot(&v, &ph.nu) / v.iter().sum::<f64>()
            }
        }
    }

    pub fn hazard_limits(&self) -> Limits {
        match &self.law {
            Law::Exponential { rate } => Limits { at_zero: *rate, at_infinity: Some(*rate) },
            Law::Lomax { shape, scale } => Limits { at_zero: shape / scale, at_infinity: Some(0.0) },
            Law::LogNormal { .. } => Limits { at_zero: 0.0, at_infinity: Some(0.0) },
            Law::Gamma { shape, rate, .. } => {
                let at_zero = if *shape == 1.0 {
                    *rate
                } else if *shape > 1.0 {
                    0.0
                } else {
                    f64::INFINITY
                };
                Limits { at_zero, at_infinity: Some(*rate) }
            }
            Law::PhaseType(ph) => Limits { at_zero: dot(&ph.alpha, &ph.exit), at_infinity: None },
        }
    }

    pub fn h2_limits(&self) -> Limits {
        match &self.law {
            Law::Exponential { rate } => Limits { at_zero: -rate * rate, at_infinity: Some(-rate * rate) },
            Law::Lomax { shape, scale } => Limits {
                at_zero: -shape * (shape + 1.0) / (scale * scale),
                at_infinity: Some(0.0),
            },
            Law::LogNormal { .. } => Limits { at_zero: 0.0, at_infinity: Some(0.0) },
            Law::Gamma { shape, rate, .. } => {
                let b2 = rate * rate;
                let at_zero = if *shape == 2.0 {
                    b2
                } else if *shape > 2.0 {
                    0.0
                } else if *shape > 1.0 {
                    f64::INFINITY
                } else if *shape == 1.0 {
                    -b2
                } else {
                    f64::NEG_INFINITY
                };
                Limits { at_zero, at_infinity: Some(-b2) }
            }
            Law::PhaseType(ph) => Limits { at_zero: dot(&ph.alpha, &ph.nu), at_infinity: None },
        }
    }

    pub fn mean(&self) -> f64 {
        match &self.law {
            Law::Exponential { rate } => 1.0 / rate,
            Law::Lomax { shape, scale } => {
                if *shape > 1.0 {
                    scale / (shape - 1.0)
                } else {
                    f64::INFINITY
                }
            }
            Law::LogNormal { mu, sigma } => (mu + 0.5 * sigma * sigma).exp(),
            Law::Gamma { shape, rate, .. } => shape / rate,
            Law::PhaseType(ph) => dot(&ph.alpha, &ph.mean_vec),
        }
    }

    pub fn second_moment(&self) -> f64 {
        match &self.law {
            Law::Exponential { rate } => 2.0 / (rate * rate),
            Law::Lomax { shape, scale } => {
                if *shape > 2.0 {
                    2.0 * scale * scale / ((shape - 1.0) * (shape - 2.0))
                } else {
                    f64::INFINITY
                }
            }
            Law::LogNormal { mu, sigma } => (2.0 * mu + 2.0 * sigma * sigma).exp(),
            Law::Gamma { shape, rate, .. } => shape * (shape + 1.0) / (rate * rate),
            Law::PhaseType(ph) => {
                let w = ph.solve_neg_s(&ph.mean_vec);
                2.0 * dot(&ph.alpha, &w)
            }
        }
    }

    /// ∫_x^∞ Ḡ(y) dy, in closed form.
    pub fn integrated_tail(&self, x: f64) -> f64 {
        let x = x.max(0.0);
        match &self.law {
            Law::Exponential { rate } => (-rate * x).exp() / rate,
            Law::Lomax { shape, scale } => {
                if *shape <= 1.0 {
                    return f64::INFINITY;
                }
                scale / (shape - 1.0) * (-(shape - 1.0) * (x / scale).ln_1p()).exp()
            }
            Law::LogNormal { mu, sigma } => {
                let m = (mu + 0.5 * sigma * sigma).exp();
                if x == 0.0 {
                    return m;
                }
                let z = (x.ln() - mu) / sigma;
                m * 0.5 * erf::erfc((z - sigma) / SQRT_2) - x * self.ccdf(x)
            }
            Law::Gamma { shape, rate, .. } => {
                let y = rate * x;
                if y == 0.0 {
                    return shape / rate;
                }
                shape / rate * gamma::gamma_ur(shape + 1.0, y) - x * self.ccdf(x)
            }
            Law::PhaseType(ph) => {
                let (v, ln_s) = ph.propagate(x);
                ln_s.exp() * dot(&v, &ph.mean_vec)
            }
        }
    }

    /// Conditional survival Ḡ(x+r)/Ḡ(x).
    pub fn survival_ratio(&self, x: f64, r: f64) -> f64 {
        (self.ln_ccdf(x + r) - self.ln_ccdf(x)).exp()
    }

    /// One draw from the law.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match &self.law {
            Law::Exponential { rate } => {
                let e: f64 = Exp1.sample(rng);
                e / rate
            }
            Law::Lomax { shape, scale } => {
                let u: f64 = 1.0 - rng.gen::<f64>();
                scale * ((-u.ln() / shape).exp_m1())
            }
            Law::LogNormal { mu, sigma } => {
                let z: f64 = StandardNormal.sample(rng);
                (mu + sigma * z).exp()
            }
            Law::Gamma { shape, rate, .. } => {
                if *shape == 2.0 {
                    let a: f64 = Exp1.sample(rng);
                    let b: f64 = Exp1.sample(rng);
                    (a + b) / rate
                } else {
                    let g = rand_distr::Gamma::new(*shape, 1.0 / rate).expect("validated gamma parameters");
                    g.sample(rng)
                }
            }
            Law::PhaseType(ph) => ph.sample(rng),
        }
    }

    /// Draw from the law of S − a given S > a.
    pub fn sample_residual<R: Rng + ?Sized>(&self, age: f64, rng: &mut R) -> f64 {
        if age <= 0.0 {
            return self.sample(rng);
        }
        match &self.law {
            Law::Exponential { .. } => self.sample(rng),
            Law::Lomax { shape, scale } => {
                let u: f64 = 1.0 - rng.gen::<f64>();
                (scale + age) * ((-u.ln() / shape).exp_m1())
            }
            _ => {
                let u: f64 = 1.0 - rng.gen::<f64>();
                let target = self.ln_ccdf(age) + u.ln();
                invert_decreasing(|y| self.ln_ccdf(age + y), target)
            }
        }
    }

    /// Draw from the stationary age law with density Ḡ/E[S].
    pub fn sample_equilibrium<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match &self.law {
            Law::Exponential { .. } => self.sample(rng),
            _ => {
                let m = self.mean();
                let u: f64 = 1.0 - rng.gen::<f64>();
                let target = (u * m).ln();
                invert_decreasing(|y| self.integrated_tail(y).ln(), target)
            }
        }
    }
}

/// Smallest y ≥ 0 with f(y) ≤ target for a decreasing f, by bracketing and bisection.
fn invert_decreasing(f: impl Fn(f64) -> f64, target: f64) -> f64 {
    if f(0.0) <= target {
        return 0.0;
    }
    let mut hi = 1.0;
    while f(hi) > target {
        hi *= 2.0;
        if hi > 1e12 {
            return hi;
        }
    }
    let mut lo = 0.0;
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if f(mid) > target {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo <= 1e-14 * hi.max(1e-300) {
            break;
        }
    }
    0.5 * (lo + hi)
}

fn std_normal_pdf(z: f64) -> f64 {
    (-0.5 * z * z).exp() / (2.0 * PI).sqrt()
}

/// Q(z)/φ(z) by its continued fraction; accurate for z ≥ 3.
fn mills_ratio(z: f64) -> f64 {
    let mut t = z;
    for k in (1..=200).rev() {
        t = z + k as f64 / t;
    }
    1.0 / t
}

/// Γ(a, y)·e^y·y^(1−a) by the Legendre continued fraction (modified Lentz), y > a + 1.
fn gamma_tail_q(a: f64, y: f64) -> f64 {
    const TINY: f64 = 1e-300;
    let mut b = y + 1.0 - a;
    let mut c = 1.0 / TINY;
    let mut d = 1.0 / b;
    let mut h = d;
    for i in 1..1000 {
        let an = -(i as f64) * (i as f64 - a);
        b += 2.0;
        d = an * d + b;
        if d.abs() < TINY {
            d = TINY;
        }
        c = b + an / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        let del = d * c;
        h *= del;
        if (del - 1.0).abs() < 1e-16 {
            break;
        }
    }
    y * h
}

/// c·y^p at y → 0⁺.
fn gamma_power_at_zero(p: f64, c: f64) -> f64 {
    if p == 0.0 {
        c
    } else if p > 0.0 {
        0.0
    } else {
        f64::INFINITY
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

impl PhaseTypeLaw {
    fn new(alpha: Vec<f64>, s: Vec<f64>) -> Result<Self> {
        let m = alpha.len();
        if m == 0 || s.len() != m * m {
            return invalid(format!("phase-type needs alpha of length m and an m×m matrix, got {} and {}", m, s.len()));
        }
        if alpha.iter().any(|a| !(a.is_finite() && *a >= 0.0)) {
            return invalid("phase-type initial probabilities must be nonnegative");
        }
        let total: f64 = alpha.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return invalid(format!("phase-type initial probabilities must sum to 1, got {total}"));
        }
        for i in 0..m {
            let mut row = 0.0;
            for j in 0..m {
                let v = s[i * m + j];
                if !v.is_finite() {
                    return invalid("subgenerator entries must be finite");
                }
                if i == j && v >= 0.0 {
                    return invalid(format!("subgenerator diagonal must be negative, entry ({i},{i}) is {v}"));
                }
                if i != j && v < 0.0 {
                    return invalid(format!("subgenerator off-diagonal entry ({i},{j}) is negative"));
                }
                row += v;
            }
            if row > 1e-12 * s[i * m + i].abs() {
                return invalid(format!("subgenerator row {i} sums to {row} > 0"));
            }
        }
        let exit: Vec<f64> = (0..m).map(|i| -(0..m).map(|j| s[i * m + j]).sum::<f64>()).collect();
        // ν = −S²1 = S·exit.
        let nu: Vec<f64> = (0..m).map(|i| (0..m).map(|k| s[i * m + k] * exit[k]).sum::<f64>()).collect();
        let neg_s = DMatrix::from_row_slice(m, m, &s).map(|v| -v);
        let lu = neg_s.lu();
        let mean_vec = lu
            .solve(&DVector::from_element(m, 1.0))
            .filter(|v| v.iter().all(|x| x.is_finite() && *x >= -1e-12))
            .ok_or_else(|| Error::InvalidParameter("subgenerator is singular: absorption is not certain".into()))?;
        let q = (0..m).map(|i| -s[i * m + i]).fold(0.0, f64::max);
        let mut p = s.iter().map(|v| v / q).collect::<Vec<_>>();
        for i in 0..m {
            p[i * m + i] += 1.0;
        }
        let mut law = PhaseTypeLaw {
            m,
            alpha,
            s,
            exit,
            nu,
            mean_vec: mean_vec.iter().copied().collect(),
            q,
            p,
            powers: Vec::new(),
        };
        let mut step = vec![0.0; m * m];
        for i in 0..m {
            let mut e = vec![0.0; m];
            e[i] = 1.0;
            let row = law.uniformize(&e, 1.0 / q);
            step[i * m..(i + 1) * m].copy_from_slice(&row);
        }
        let mut powers = vec![(step, 0.0)];
        for _ in 0..POWER_LEVELS {
            let (a, la) = powers.last().unwrap();
            let mut sq = vec![0.0; m * m];
            for i in 0..m {
                let row = law.row_times(&a[i * m..(i + 1) * m], a);
                sq[i * m..(i + 1) * m].copy_from_slice(&row);
            }
            let mx = sq.iter().fold(0.0f64, |acc, v| acc.max(v.abs()));
            if mx == 0.0 || !mx.is_finite() {
                break;
            }
            sq.iter_mut().for_each(|v| *v /= mx);
            let l = 2.0 * la + mx.ln();
            powers.push((sq, l));
        }
        law.powers = powers;
        Ok(law)
    }

    fn row_times(&self, v: &[f64], mat: &[f64]) -> Vec<f64> {
        let m = self.m;
        let mut out = vec![0.0; m];
        for (i, vi) in v.iter().enumerate() {
            if *vi == 0.0 {
                continue;
            }
            for j in 0..m {
                out[j] += vi * mat[i * m + j];
            }
        }
        out
    }

    /// v·e^{τS} for qτ ≤ 1 by uniformization; terms dropped once below 1e-18 relative.
    fn uniformize(&self, v: &[f64], tau: f64) -> Vec<f64> {
        let qt = self.q * tau;
        let mut w = (-qt).exp();
        let mut term = v.to_vec();
        let mut acc: Vec<f64> = term.iter().map(|a| w * a).collect();
        for k in 1..80 {
            term = self.row_times(&term, &self.p);
            w *= qt / k as f64;
            let norm: f64 = term.iter().map(|a| a.abs()).sum();
            for (a, t) in acc.iter_mut().zip(&term) {
                *a += w * t;
            }
            let acc_norm: f64 = acc.iter().map(|a| a.abs()).sum();
            if w * norm <= 1e-18 * acc_norm || norm == 0.0 {
                break;
            }
        }
        acc
    }

    /// α·e^{xS} returned as a normalized row and the log of its mass.
    fn propagate(&self, x: f64) -> (Vec<f64>, f64) {
        let c = 1.0 / self.q;
        let n = (x / c).floor();
        let rem = (x - n * c).max(0.0);
        let mut v = self.alpha.clone();
        let mut ln_s = 0.0;
        let mut n = n as u64;
        let mut k = 0;
        while n > 0 {
            if k >= self.powers.len() {
                // Every remaining block is at least as absorbing as the largest one stored.
                return (v, f64::NEG_INFINITY);
            }
            if n & 1 == 1 {
                let (mat, l) = &self.powers[k];
                v = self.row_times(&v, mat);
                let s: f64 = v.iter().sum();
                if s <= 0.0 {
                    return (self.alpha.clone(), f64::NEG_INFINITY);
                }
                v.iter_mut().for_each(|a| *a /= s);
                ln_s += s.ln() + l;
            }
            n >>= 1;
            k += 1;
        }
        if rem > 0.0 {
            v = self.uniformize(&v, rem);
        }
        let s: f64 = v.iter().sum();
        v.iter_mut().for_each(|a| *a /= s);
        (v, ln_s + s.ln())
    }

    fn solve_neg_s(&self, b: &[f64]) -> Vec<f64> {
        let neg_s = DMatrix::from_row_slice(self.m, self.m, &self.s).map(|v| -v);
        neg_s
            .lu()
            .solve(&DVector::from_column_slice(b))
            .map(|v| v.iter().copied().collect())
            .unwrap_or_else(|| vec![f64::INFINITY; self.m])
    }

    fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let m = self.m;
        let mut phase = pick(&self.alpha, rng);
        let mut t = 0.0;
        loop {
            let rate = -self.s[phase * m + phase];
            let e: f64 = Exp1.sample(rng);
            t += e / rate;
            let u: f64 = rng.gen::<f64>() * rate;
            let mut acc = self.exit[phase];
            if u < acc {
                return t;
            }
            let mut next = None;
            for j in 0..m {
                if j == phase {
                    continue;
                }
                acc += self.s[phase * m + j];
                if u < acc {
                    next = Some(j);
                    break;
                }
            }
            match next {
                Some(j) => phase = j,
                None => return t,
            }
        }
    }
}

fn pick<R: Rng + ?Sized>(weights: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (i, w) in weights.iter().enumerate() {
        acc += w;
        if u < acc {
            return i;
        }
    }
    weights.iter().rposition(|w| *w > 0.0).unwrap_or(0)
}

/// Uniform age grid on [0, r_max].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AgeGrid {
    pub r_max: f64,
    pub dr: f64,
}

impl AgeGrid {
    pub fn new(r_max: f64, dr: f64) -> Result<Self> {
        if !(dr > 0.0 && r_max > 0.0 && r_max.is_finite()) {
            return invalid(format!("age grid needs r_max > 0 and dr > 0, got ({r_max}, {dr})"));
        }
        Ok(AgeGrid { r_max, dr })
    }

    /// Grid long enough that Ḡ(r_max) < 1e-6, rounded up to a multiple of dr.
    pub fn covering(d: &ServiceDistribution, dr: f64) -> Result<Self> {
        let target = 1e-6f64.ln();
        let r = invert_decreasing(|x| d.ln_ccdf(x), target);
        let n = (r / dr).ceil().max(1.0);
        AgeGrid::new(n * dr, dr)
    }

    pub fn n(&self) -> usize {
        (self.r_max / self.dr).round() as usize
    }

    pub fn point(&self, k: usize) -> f64 {
        k as f64 * self.dr
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AssumptionThresholds {
    pub h_max: f64,
    pub h2_max: f64,
    /// Ḡ must decay faster than x^(−tail_min).
    pub tail_min: f64,
    pub mean_tolerance: f64,
}

impl Default for AssumptionThresholds {
    fn default() -> Self {
        AssumptionThresholds { h_max: 1e6, h2_max: 1e6, tail_min: 2.0, mean_tolerance: 1e-3 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AssumptionPass {
    /// Continuous, finite density.
    pub density: bool,
    /// Bounded hazard.
    pub hazard_bounded: bool,
    /// Bounded h₂.
    pub h2_bounded: bool,
    /// Tail lighter than x^(−2−ε).
    pub tail: bool,
    pub unit_mean: bool,
}

impl AssumptionPass {
    pub fn all(&self) -> bool {
        self.density && self.hazard_bounded && self.h2_bounded && self.tail && self.unit_mean
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AssumptionReport {
    pub family: Family,
    pub r_max: f64,
    pub dr: f64,
    pub h_sup: f64,
    pub h_sup_at: f64,
    pub h2_sup: f64,
    pub h2_sup_at: f64,
    pub h_limit_zero: f64,
    pub h_limit_infinity: Option<f64>,
    pub h2_limit_zero: f64,
    pub h2_limit_infinity: Option<f64>,
    pub tail_exponent_estimate: f64,
    pub mean: f64,
    pub second_moment: f64,
    pub ccdf_at_r_max: f64,
    pub grid_adequate: bool,
    pub thresholds: AssumptionThresholds,
    pub pass: AssumptionPass,
}

impl AssumptionReport {
    pub fn passed(&self) -> bool {
        self.pass.all()
    }
}

/// Numerical check of the standing assumptions on a service law.
pub fn check_assumptions(d: &ServiceDistribution, grid: AgeGrid, thresholds: AssumptionThresholds) -> AssumptionReport {
    let n = grid.n();
    let xs: Vec<f64> = (0..=n).map(|k| grid.point(k)).collect();
    let mut h_sup = f64::NEG_INFINITY;
    let mut h_sup_at = 0.0;
    let mut h2_sup = f64::NEG_INFINITY;
    let mut h2_sup_at = 0.0;
    let mut density_ok = true;
    let mut bar = Vec::with_capacity(n + 1);
    for &x in &xs {
        let h = d.hazard(x);
        let h2 = d.h2(x).abs();
        if h > h_sup || h.is_nan() {
            h_sup = h;
            h_sup_at = x;
        }
        if h2 > h2_sup || h2.is_nan() {
            h2_sup = h2;
            h2_sup_at = x;
        }
        density_ok &= d.pdf(x).is_finite();
        bar.push(d.ccdf(x));
    }
    let hl = d.hazard_limits();
    let h2l = d.h2_limits();
    if hl.at_zero > h_sup {
        h_sup = hl.at_zero;
        h_sup_at = 0.0;
    }
    if let Some(v) = hl.at_infinity {
        if v > h_sup {
            h_sup = v;
            h_sup_at = f64::INFINITY;
        }
    }
    if h2l.at_zero.abs() > h2_sup {
        h2_sup = h2l.at_zero.abs();
        h2_sup_at = 0.0;
    }
    if let Some(v) = h2l.at_infinity {
        if v.abs() > h2_sup {
            h2_sup = v.abs();
            h2_sup_at = f64::INFINITY;
        }
    }
    density_ok &= hl.at_zero.is_finite();

    let dr = grid.dr;
    let mut mean = 0.0;
    let mut second = 0.0;
    for k in 0..n {
        mean += 0.5 * dr * (bar[k] + bar[k + 1]);
        second += 0.5 * dr * (2.0 * xs[k] * bar[k] + 2.0 * xs[k + 1] * bar[k + 1]);
    }

    // Log-log regression of Ḡ over the last decade of the grid.
    let lo = grid.r_max / 10.0;
    let (mut sx, mut sy, mut sxx, mut sxy, mut cnt) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for (k, &x) in xs.iter().enumerate() {
        if x >= lo && x > 0.0 && bar[k] > 0.0 {
            let (lx, ly) = (x.ln(), d.ln_ccdf(x));
            sx += lx;
            sy += ly;
            sxx += lx * lx;
            sxy += lx * ly;
            cnt += 1.0;
        }
    }
    let slope = (cnt * sxy - sx * sy) / (cnt * sxx - sx * sx);
    let tail = -slope;

    let ccdf_at_r_max = d.ccdf(grid.r_max);
    let pass = AssumptionPass {
        density: density_ok,
        hazard_bounded: h_sup.is_finite() && h_sup <= thresholds.h_max,
        h2_bounded: h2_sup.is_finite() && h2_sup <= thresholds.h2_max,
        tail: tail.is_finite() && tail > thresholds.tail_min,
        unit_mean: (mean - 1.0).abs() <= thresholds.mean_tolerance + d.integrated_tail(grid.r_max),
    };
    AssumptionReport {
        family: d.family(),
        r_max: grid.r_max,
        dr,
        h_sup,
        h_sup_at,
        h2_sup,
        h2_sup_at,
        h_limit_zero: hl.at_zero,
        h_limit_infinity: hl.at_infinity,
        h2_limit_zero: h2l.at_zero,
        h2_limit_infinity: h2l.at_infinity,
        tail_exponent_estimate: tail,
        mean,
        second_moment: second,
        ccdf_at_r_max,
        grid_adequate: ccdf_at_r_max < 1e-6,
        thresholds,
        pass,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn families() -> Vec<ServiceDistribution> {
        vec![
            ServiceDistribution::exponential(1.0).unwrap(),
            ServiceDistribution::lomax(3.0, 2.0).unwrap(),
            ServiceDistribution::log_normal(0.0, 0.5).unwrap().normalized().unwrap(),
            ServiceDistribution::gamma(2.0, 2.0).unwrap(),
            ServiceDistribution::gamma(3.5, 1.0).unwrap().normalized().unwrap(),
            ServiceDistribution::erlang(2, 2.0).unwrap(),
            ServiceDistribution::phase_type(vec![0.4, 0.6], vec![-3.0, 1.0, 0.5, -1.5]).unwrap().normalized().unwrap(),
        ]
    }

    #[test]
    fn ccdf_examples() {
        assert_eq!(ServiceDistribution::exponential(1.0).unwrap().ccdf(0.0), 1.0);
        assert_relative_eq!(ServiceDistribution::lomax(3.0, 2.0).unwrap().ccdf(2.0), 0.125, max_relative = 1e-15);
        let g = ServiceDistribution::gamma(2.0, 2.0).unwrap();
        assert_relative_eq!(g.ccdf(1.0), 3.0 * (-2.0f64).exp(), max_relative = 1e-13);
        assert_relative_eq!(g.ccdf(1.0), 0.40601, epsilon = 1e-5);
    }

    #[test]
    fn hazard_examples() {
        let e = ServiceDistribution::exponential(1.0).unwrap();
        for x in [0.0, 0.3, 7.0, 400.0] {
            assert_eq!(e.hazard(x), 1.0);
            assert_eq!(e.h2(x), -1.0);
        }
        let l = ServiceDistribution::lomax(3.0, 2.0).unwrap();
        assert_eq!(l.hazard(0.0), 1.5);
        assert_eq!(l.h2(0.0), -3.0);
        let g = ServiceDistribution::gamma(2.0, 2.0).unwrap();
        assert_relative_eq!(g.hazard(1e4), 2.0, epsilon = 1e-3);
        assert_relative_eq!(g.h2(1e4), -4.0, epsilon = 1e-2);
        assert_eq!(g.h2(0.0), 4.0);
        assert_eq!(g.hazard_limits().at_infinity, Some(2.0));
        assert_eq!(g.h2_limits().at_infinity, Some(-4.0));
    }

    #[test]
    fn gamma_shape_two_closed_form() {
        // Ḡ = (1+βx)e^{−βx}, g = β²x e^{−βx}, g′ = β²(1−βx)e^{−βx}.
        let b = 2.0;
        let g = ServiceDistribution::gamma(2.0, b).unwrap();
        for x in [0.01, 0.5, 1.0, 1.49, 1.51, 3.0, 10.0, 50.0] {
            let e = (-b * x).exp();
            assert_relative_eq!(g.ccdf(x), (1.0 + b * x) * e, max_relative = 1e-12);
            assert_relative_eq!(g.pdf(x), b * b * x * e, max_relative = 1e-12);
            assert_relative_eq!(g.pdf_deriv(x), b * b * (1.0 - b * x) * e, max_relative = 1e-11);
            assert_relative_eq!(g.hazard(x), b * b * x / (1.0 + b * x), max_relative = 1e-12);
        }
    }

    #[test]
    fn log_normal_far_tail_is_finite() {
        let d = ServiceDistribution::log_normal(0.0, 1.0).unwrap();
        for x in [1e3, 1e6, 1e12] {
            let h = d.hazard(x);
            assert!(h.is_finite() && h > 0.0);
            // Mills-ratio asymptotics: h ≈ z/(σx) for large z.
            let z = x.ln();
            assert_relative_eq!(h, z / x, max_relative = 0.1);
        }
        assert_relative_eq!(d.ln_ccdf(1e6), d.ccdf(1e6).ln(), max_relative = 1e-10);
    }

    #[test]
    fn hazard_times_ccdf_is_density() {
        for d in families() {
            for k in 0..4000 {
                let x = k as f64 * 0.01;
                let bar = d.ccdf(x);
                if bar > 1e-8 {
                    let g = d.pdf(x);
                    let lhs = d.hazard(x) * bar;
                    assert!((lhs - g).abs() <= 1e-12 * g.abs().max(1e-300), "{:?} x={x}: {lhs} vs {g}", d.family());
                }
            }
        }
    }

    #[test]
    fn density_is_minus_ccdf_derivative() {
        for d in families() {
            let h = 1e-5;
            for k in 1..300 {
                let x = k as f64 * 0.05;
                let fd = (d.ccdf(x + h) - d.ccdf(x - h)) / (2.0 * h);
                assert!((fd + d.pdf(x)).abs() < 1e-7, "{:?} at {x}", d.family());
                let fd2 = (d.pdf(x + h) - d.pdf(x - h)) / (2.0 * h);
                assert!((fd2 - d.pdf_deriv(x)).abs() < 1e-6, "{:?} at {x}", d.family());
            }
        }
    }

    #[test]
    fn ccdf_is_monotone_on_grid() {
        for d in families() {
            let mut prev = 1.0;
            for k in 0..=20_000 {
                let v = d.ccdf(k as f64 * 0.005);
                assert!(v <= prev, "{:?} increases at {}", d.family(), k);
                prev = v;
            }
        }
    }

    #[test]
    fn normalized_mean_by_quadrature() {
        for d in families() {
            let grid = AgeGrid::covering(&d, 1e-3).unwrap();
            let n = grid.n();
            let mut s = 0.0;
            for k in 0..n {
                s += 0.5 * grid.dr * (d.ccdf(grid.point(k)) + d.ccdf(grid.point(k + 1)));
            }
            let tol = d.integrated_tail(grid.r_max) + 1e-6;
            assert!((s - 1.0).abs() < tol, "{:?}: {s}", d.family());
        }
    }

    #[test]
    fn one_phase_matches_exponential() {
        for mu in [0.5, 1.0, 3.0] {
            let ph = ServiceDistribution::phase_type(vec![1.0], vec![-mu]).unwrap();
            let ex = ServiceDistribution::exponential(mu).unwrap();
            for k in 0..400 {
                let x = k as f64 * 0.1;
                assert!((ph.ccdf(x) - ex.ccdf(x)).abs() <= 1e-12 * ex.ccdf(x).max(1e-300) + 1e-300);
                assert!((ph.pdf(x) - ex.pdf(x)).abs() <= 1e-12 * ex.pdf(x));
                assert!((ph.hazard(x) - mu).abs() <= 1e-12 * mu);
            }
        }
    }

    #[test]
    fn erlang_phase_type_matches_gamma() {
        let ph = ServiceDistribution::erlang(2, 2.0).unwrap();
        let g = ServiceDistribution::gamma(2.0, 2.0).unwrap();
        for k in 0..200 {
            let x = k as f64 * 0.25;
            assert_relative_eq!(ph.ccdf(x), g.ccdf(x), max_relative = 1e-11);
            assert_relative_eq!(ph.hazard(x), g.hazard(x), max_relative = 1e-11);
        }
        assert_relative_eq!(ph.mean(), 1.0, max_relative = 1e-14);
        assert_relative_eq!(ph.second_moment(), 1.5, max_relative = 1e-14);
    }

    #[test]
    fn integrated_tail_matches_quadrature() {
        for d in families() {
            for x0 in [0.0, 0.7, 2.5] {
                let (dx, n) = (2e-3, 100_000);
                let mut s = 0.0;
                for k in 0..n {
                    let x = x0 + k as f64 * dx;
                    s += 0.5 * dx * (d.ccdf(x) + d.ccdf(x + dx));
                }
                let xe = x0 + n as f64 * dx;
                // Euler-Maclaurin end correction for the trapezoid rule.
                s += dx * dx / 12.0 * (d.pdf(xe) - d.pdf(x0));
                let rest = d.integrated_tail(xe);
                assert_relative_eq!(s + rest, d.integrated_tail(x0), max_relative = 1e-6);
            }
        }
    }

    #[test]
    fn sampler_means() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let n = 100_000;
        for d in [
            ServiceDistribution::exponential(1.0).unwrap(),
            ServiceDistribution::lomax(3.0, 2.0).unwrap(),
            ServiceDistribution::erlang(2, 2.0).unwrap(),
            ServiceDistribution::gamma(2.0, 2.0).unwrap(),
            ServiceDistribution::log_normal(0.0, 0.5).unwrap().normalized().unwrap(),
        ] {
            let xs: Vec<f64> = (0..n).map(|_| d.sample(&mut rng)).collect();
            let mean = xs.iter().sum::<f64>() / n as f64;
            let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
            let se = (var / n as f64).sqrt();
            assert!((mean - 1.0).abs() < 3.0 * se, "{:?}: {mean} ± {se}", d.family());
        }
    }

    #[test]
    fn equilibrium_and_residual_samplers() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = 50_000;
        // Equilibrium age law of Erlang-2(2): mean E[S²]/2 = 0.75.
        let d = ServiceDistribution::erlang(2, 2.0).unwrap();
        let xs: Vec<f64> = (0..n).map(|_| d.sample_equilibrium(&mut rng)).collect();
        let mean = xs.iter().sum::<f64>() / n as f64;
        let sd = (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n as f64).sqrt();
        assert!((mean - 0.75).abs() < 3.0 * sd / (n as f64).sqrt());
        // Residual life at age 1: E[S−1 | S>1] = ∫_1^∞Ḡ / Ḡ(1).
        let want = d.integrated_tail(1.0) / d.ccdf(1.0);
        let ys: Vec<f64> = (0..n).map(|_| d.sample_residual(1.0, &mut rng)).collect();
        let m = ys.iter().sum::<f64>() / n as f64;
        let s = (ys.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n as f64).sqrt();
        assert!((m - want).abs() < 3.0 * s / (n as f64).sqrt(), "{m} vs {want}");
    }

    #[test]
    fn normalization_keeps_origin() {
        let d = ServiceDistribution::lomax(3.0, 5.0).unwrap().normalized().unwrap();
        assert_relative_eq!(d.mean(), 1.0, max_relative = 1e-14);
        assert_eq!(d.origin().params["scale"], 5.0);
        assert_relative_eq!(d.origin().time_scale, 2.5);
        assert_relative_eq!(d.params()["scale"], 2.0);
    }

    #[test]
    fn config_round_trip() {
        let cfg: DistributionConfig =
            serde_json::from_str(r#"{"family":"phase_type","params":{"erlang":2,"rate":5}}"#).unwrap();
        let d = cfg.build().unwrap();
        assert_relative_eq!(d.mean(), 1.0, max_relative = 1e-14);
        assert_relative_eq!(d.ccdf(1.0), 3.0 * (-2.0f64).exp(), max_relative = 1e-11);
        let bad = DistributionConfig::new(Family::Lomax, &[("shape", -1.0), ("scale", 1.0)]);
        assert!(bad.build().is_err());
        let sing = ServiceDistribution::phase_type(vec![1.0, 0.0], vec![-1.0, 1.0, 1.0, -1.0]);
        assert!(sing.is_err());
    }

    #[test]
    fn assumption_reports() {
        let l = ServiceDistribution::lomax(3.0, 2.0).unwrap();
        let r = check_assumptions(&l, AgeGrid::covering(&l, 0.01).unwrap(), Default::default());
        assert!((r.h_sup - 1.5).abs() < 1e-9 && r.h_sup_at == 0.0);
        assert!((r.tail_exponent_estimate - 3.0).abs() < 0.3, "{}", r.tail_exponent_estimate);
        assert!(r.passed(), "{r:?}");

        let e = ServiceDistribution::exponential(1.0).unwrap();
        let r = check_assumptions(&e, AgeGrid::covering(&e, 0.01).unwrap(), Default::default());
        assert_eq!((r.h_sup, r.h2_sup), (1.0, 1.0));
        assert!((r.mean - 1.0).abs() < 1e-4);
        assert!(r.passed());

        let g = ServiceDistribution::gamma(1.5, 1.5).unwrap();
        let r = check_assumptions(&g, AgeGrid::covering(&g, 0.01).unwrap(), Default::default());
        assert!(!r.pass.h2_bounded);
        assert!(!r.passed());
    }

    proptest! {
        #[test]
        fn lomax_ccdf_is_valid(shape in 2.1f64..8.0, x in 0.0f64..1e3, y in 0.0f64..10.0) {
            let d = ServiceDistribution::lomax(shape, 1.0).unwrap().normalized().unwrap();
            let (a, b) = (d.ccdf(x), d.ccdf(x + y));
            prop_assert!((0.0..=1.0).contains(&a));
            prop_assert!(b <= a);
            prop_assert!(d.hazard(x) >= 0.0 && d.hazard(x) <= d.hazard_limits().at_zero);
        }

        #[test]
        fn phase_type_hazard_below_max_exit(a in 0.0f64..1.0, r1 in 0.2f64..5.0, r2 in 0.2f64..5.0, p in 0.0f64..1.0, x in 0.0f64..30.0) {
            let s = vec![-r1, p * r1, 0.0, -r2];
            let d = ServiceDistribution::phase_type(vec![a, 1.0 - a], s).unwrap();
            let max_exit = r1.max(r2);
            prop_assert!(d.hazard(x) <= max_exit * (1.0 + 1e-12));
            prop_assert!(d.h2(x).abs() <= (r1 * r1 + r2 * r2) * (1.0 + 1e-9));
        }

        #[test]
        fn survival_ratio_in_unit_interval(x in 0.0f64..50.0, r in 0.0f64..50.0) {
            for d in families() {
                let v = d.survival_ratio(x, r);
                prop_assert!((0.0..=1.0 + 1e-12).contains(&v));
            }
        }
    }
}
