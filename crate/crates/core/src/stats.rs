//! Monte Carlo summaries, two-sample tests and convergence-order fits.

use serde::{Deserialize, Serialize};

/// Sample mean and its standard error.
pub fn mean_se(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let m = x.iter().sum::<f64>() / n;
    let v = x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1.0);
    (m, (v / n).sqrt())
}

/// Mean, unbiased variance, and standard errors of both.
///
/// The variance standard error uses the fourth central moment.
pub fn mean_var(x: &[f64]) -> (f64, f64, (f64, f64)) {
    let n = x.len() as f64;
    let m = x.iter().sum::<f64>() / n;
    let m2 = x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / n;
    let m4 = x.iter().map(|v| (v - m).powi(4)).sum::<f64>() / n;
    let var = m2 * n / (n - 1.0);
    (m, var, ((var / n).sqrt(), ((m4 - m2 * m2) / n).max(0.0).sqrt()))
}

/// Mean and variance with standard errors.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Moments {
    pub n: usize,
    pub mean: f64,
    pub se_mean: f64,
    pub var: f64,
    pub se_var: f64,
}

impl Moments {
    pub fn of(x: &[f64]) -> Self {
        let (mean, var, (se_mean, se_var)) = mean_var(x);
        Moments { n: x.len(), mean, se_mean, var, se_var }
    }

    /// |a − b| in units of the combined standard error of the means.
    pub fn mean_z(&self, other: &Moments) -> f64 {
        (self.mean - other.mean).abs() / self.se_mean.hypot(other.se_mean)
    }

    pub fn var_z(&self, other: &Moments) -> f64 {
        (self.var - other.var).abs() / self.se_var.hypot(other.se_var)
    }
}

/// Sample covariance and its standard error.
pub fn covariance(a: &[f64], b: &[f64]) -> (f64, f64) {
    let n = a.len().min(b.len());
    let (ma, _) = mean_se(&a[..n]);
    let (mb, _) = mean_se(&b[..n]);
    let prods: Vec<f64> = (0..n).map(|i| (a[i] - ma) * (b[i] - mb)).collect();
    let (c, se) = mean_se(&prods);
    (c * n as f64 / (n as f64 - 1.0), se)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct KsResult {
    pub statistic: f64,
    pub p_value: f64,
}

/// Two-sample Kolmogorov–Smirnov test with the asymptotic p-value.
pub fn ks_two_sample(a: &[f64], b: &[f64]) -> KsResult {
    let mut x = a.to_vec();
    let mut y = b.to_vec();
    x.sort_by(f64::total_cmp);
    y.sort_by(f64::total_cmp);
    let (n1, n2) = (x.len(), y.len());
    let (mut i, mut j) = (0, 0);
    let mut d: f64 = 0.0;
    while i < n1 && j < n2 {
        let v = x[i].min(y[j]);
        while i < n1 && x[i] <= v {
            i += 1;
        }
        while j < n2 && y[j] <= v {
            j += 1;
        }
        d = d.max((i as f64 / n1 as f64 - j as f64 / n2 as f64).abs());
    }
    let ne = (n1 * n2) as f64 / (n1 + n2) as f64;
    let lambda = (ne.sqrt() + 0.12 + 0.11 / ne.sqrt()) * d;
    KsResult { statistic: d, p_value: q_ks(lambda) }
}

fn q_ks(lambda: f64) -> f64 {
    if lambda < 1e-3 {
        return 1.0;
    }
    let a2 = -2.0 * lambda * lambda;
    let mut sum = 0.0;
    let mut sign = 2.0;
    let mut prev = 0.0f64;
    for j in 1..=100 {
        let term = sign * (a2 * (j * j) as f64).exp();
        sum += term;
        if term.abs() <= 1e-10 * prev || term.abs() <= 1e-12 * sum.abs() {
            return sum.clamp(0.0, 1.0);
        }
        sign = -sign;
        prev = term.abs();
    }
    1.0
}

/// Observed convergence orders from errors at decreasing steps.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OrderFit {
    pub steps: Vec<f64>,
    pub errors: Vec<f64>,
    /// ln(e_k/e_{k+1}) / ln(h_k/h_{k+1}).
    pub pairwise: Vec<f64>,
    /// Least-squares slope of ln e against ln h.
    pub slope: f64,
}

pub fn fit_order(steps: &[f64], errors: &[f64]) -> OrderFit {
    let pairwise = steps
        .windows(2)
        .zip(errors.windows(2))
        .map(|(h, e)| (e[0] / e[1]).ln() / (h[0] / h[1]).ln())
        .collect();
    let n = steps.len() as f64;
    let lx: Vec<f64> = steps.iter().map(|h| h.ln()).collect();
    let ly: Vec<f64> = errors.iter().map(|e| e.ln()).collect();
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxy: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = lx.iter().map(|x| (x - mx).powi(2)).sum();
    OrderFit { steps: steps.to_vec(), errors: errors.to_vec(), pairwise, slope: sxy / sxx }
}
