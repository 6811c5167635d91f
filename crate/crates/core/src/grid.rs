//! Functions on uniform age grids, paths on uniform time grids, and the state space.

use std::fmt;
use std::io::{self, Write};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::distributions::ServiceDistribution;
use crate::error::{Error, Result};

/// Relative tolerance used when checking that a time lies on the grid.
pub const ALIGN_TOL: f64 = 1e-9;

/// Index `k` with `x = k·step`, or an error when `x` is off the grid.
pub fn grid_index(x: f64, step: f64) -> Result<usize> {
    if !(x >= 0.0 && step > 0.0) {
        return Err(Error::Grid(format!("cannot place {x} on a grid of step {step}")));
    }
    let k = (x / step).round();
    if (k * step - x).abs() > ALIGN_TOL * x.max(step) {
        return Err(Error::Grid(format!("{x} is not a multiple of the step {step}")));
    }
    Ok(k as usize)
}

/// Time and age discretization with a shared step Δt = Δr.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    pub dt: f64,
    pub n_t: usize,
    pub n_r: usize,
}

impl Grid {
    pub fn new(dt: f64, t_max: f64, r_max: f64) -> Result<Self> {
        if !(dt > 0.0 && dt.is_finite()) {
            return Err(Error::Grid(format!("step must be positive, got {dt}")));
        }
        let n_t = grid_index(t_max, dt)?;
        let n_r = grid_index(r_max, dt)?;
        if n_r == 0 {
            return Err(Error::Grid("age grid needs at least one cell".into()));
        }
        Ok(Grid { dt, n_t, n_r })
    }

    pub fn t_max(&self) -> f64 {
        self.n_t as f64 * self.dt
    }

    pub fn r_max(&self) -> f64 {
        self.n_r as f64 * self.dt
    }

    pub fn time_index(&self, t: f64) -> Result<usize> {
        let i = grid_index(t, self.dt)?;
        if i > self.n_t {
            return Err(Error::Grid(format!("time {t} beyond horizon {}", self.t_max())));
        }
        Ok(i)
    }

    pub fn age_index(&self, r: f64) -> Result<usize> {
        let k = grid_index(r, self.dt)?;
        if k > self.n_r {
            return Err(Error::Grid(format!("age {r} beyond r_max {}", self.r_max())));
        }
        Ok(k)
    }
}

fn trapezoid_sq(values: &[f64], h: f64) -> f64 {
    let n = values.len();
    if n < 2 {
        return 0.0;
    }
    let inner: f64 = values[1..n - 1].iter().map(|v| v * v).sum();
    h * (inner + 0.5 * (values[0] * values[0] + values[n - 1] * values[n - 1]))
}

/// Trapezoid rule on a uniform grid.
pub fn trapezoid(values: &[f64], h: f64) -> f64 {
    let n = values.len();
    if n < 2 {
        return 0.0;
    }
    h * (values[1..n - 1].iter().sum::<f64>() + 0.5 * (values[0] + values[n - 1]))
}

/// Running trapezoid integral, starting at zero.
pub fn cumulative_trapezoid(values: &[f64], h: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(values.len());
    let mut acc = 0.0;
    out.push(0.0);
    for w in values.windows(2) {
        acc += 0.5 * h * (w[0] + w[1]);
        out.push(acc);
    }
    out
}

/// Values at r_k = k·Δr on [0, r_max].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridFunction {
    pub r_max: f64,
    pub n_r: usize,
    pub values: Vec<f64>,
}

impl GridFunction {
    pub fn new(r_max: f64, values: Vec<f64>) -> Result<Self> {
        if values.len() < 2 || !(r_max > 0.0) {
            return Err(Error::Grid("grid function needs r_max > 0 and at least two points".into()));
        }
        if let Some(k) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Grid(format!("non-finite value at index {k}")));
        }
        Ok(GridFunction { r_max, n_r: values.len() - 1, values })
    }

    pub fn from_fn(r_max: f64, n_r: usize, f: impl Fn(f64) -> f64) -> Result<Self> {
        let dr = r_max / n_r as f64;
        Self::new(r_max, (0..=n_r).map(|k| f(k as f64 * dr)).collect())
    }

    pub fn zeros(r_max: f64, n_r: usize) -> Self {
        GridFunction { r_max, n_r, values: vec![0.0; n_r + 1] }
    }

    pub fn dr(&self) -> f64 {
        self.r_max / self.n_r as f64
    }

    pub fn point(&self, k: usize) -> f64 {
        k as f64 * self.dr()
    }

    pub fn l2_norm(&self) -> f64 {
        trapezoid_sq(&self.values, self.dr()).sqrt()
    }

    pub fn sup_norm(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn sub(&self, other: &GridFunction) -> Result<GridFunction> {
        if self.n_r != other.n_r {
            return Err(Error::Grid(format!("grid sizes differ: {} vs {}", self.n_r, other.n_r)));
        }
        let values = self.values.iter().zip(&other.values).map(|(a, b)| a - b).collect();
        Ok(GridFunction { r_max: self.r_max, n_r: self.n_r, values })
    }

    pub fn write_csv<W: Write>(&self, w: W) -> io::Result<()> {
        write_columns(w, "r", self.dr(), &[("value", &self.values)])
    }
}

fn write_columns<W: Write>(mut w: W, axis: &str, step: f64, cols: &[(&str, &[f64])]) -> io::Result<()> {
    write!(w, "{axis}")?;
    for (name, _) in cols {
        write!(w, ",{name}")?;
    }
    writeln!(w)?;
    let n = cols.iter().map(|(_, c)| c.len()).min().unwrap_or(0);
    for k in 0..n {
        write!(w, "{}", k as f64 * step)?;
        for (_, c) in cols {
            write!(w, ",{}", c[k])?;
        }
        writeln!(w)?;
    }
    Ok(())
}

/// Values at t_i = i·Δt on [0, t_max].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimePath {
    pub t_max: f64,
    pub n_t: usize,
    pub values: Vec<f64>,
}

impl TimePath {
    pub fn new(dt: f64, values: Vec<f64>) -> Result<Self> {
        if values.is_empty() || !(dt > 0.0) {
            return Err(Error::Grid("time path needs dt > 0 and at least one point".into()));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Grid(format!("non-finite path value at index {i}")));
        }
        let n_t = values.len() - 1;
        Ok(TimePath { t_max: n_t as f64 * dt, n_t, values })
    }

    /// Path without the finiteness check, for internal results already validated.
    pub(crate) fn raw(dt: f64, values: Vec<f64>) -> Self {
        let n_t = values.len() - 1;
        TimePath { t_max: n_t as f64 * dt, n_t, values }
    }

    pub fn from_fn(dt: f64, n_t: usize, f: impl Fn(f64) -> f64) -> Result<Self> {
        Self::new(dt, (0..=n_t).map(|i| f(i as f64 * dt)).collect())
    }

    pub fn zeros(dt: f64, n_t: usize) -> Self {
        Self::raw(dt, vec![0.0; n_t + 1])
    }

    pub fn dt(&self) -> f64 {
        if self.n_t == 0 {
            return f64::NAN;
        }
        self.t_max / self.n_t as f64
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn sup_norm(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn l2_norm(&self) -> f64 {
        trapezoid_sq(&self.values, self.dt()).sqrt()
    }

    /// Θ_s F: t ↦ F(s+t) − F(s), for s = i·Δt.
    pub fn shift(&self, i: usize) -> TimePath {
        let base = self.values[i];
        let dt = self.dt();
        Self::raw(dt, self.values[i..].iter().map(|v| v - base).collect())
    }

    /// Prefix up to index `n` inclusive.
    pub fn truncate(&self, n: usize) -> TimePath {
        Self::raw(self.dt(), self.values[..=n].to_vec())
    }

    pub fn write_csv<W: Write>(&self, w: W, name: &str) -> io::Result<()> {
        write_columns(w, "t", self.dt(), &[(name, &self.values)])
    }
}

/// Write several paths on the same grid as CSV columns.
pub fn write_paths_csv<W: Write>(w: W, dt: f64, cols: &[(&str, &TimePath)]) -> io::Result<()> {
    let cols: Vec<(&str, &[f64])> = cols.iter().map(|(n, p)| (*n, p.values.as_slice())).collect();
    write_columns(w, "t", dt, &cols)
}

/// How a function is continued past r_max.
#[derive(Clone, Default)]
pub enum TailRule {
    #[default]
    Zero,
    /// Closed form r ↦ (f(r), f′(r)) in absolute coordinates.
    Analytic(Arc<dyn Fn(f64) -> (f64, f64) + Send + Sync>),
}

impl fmt::Debug for TailRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TailRule::Zero => write!(f, "Zero"),
            TailRule::Analytic(_) => write!(f, "Analytic"),
        }
    }
}

/// A function in H¹ sampled together with its weak derivative.
#[derive(Clone, Debug)]
pub struct H1GridFunction {
    pub base: GridFunction,
    pub deriv: GridFunction,
    pub tail: TailRule,
    /// Grid cells the function has been translated by; the tail rule is
    /// evaluated at (k + offset)·Δr so repeated shifts compose exactly.
    tail_offset: usize,
}

impl PartialEq for H1GridFunction {
    fn eq(&self, other: &Self) -> bool {
        self.base == other.base && self.deriv == other.deriv
    }
}

impl H1GridFunction {
    pub fn new(base: GridFunction, deriv: GridFunction) -> Result<Self> {
        if base.n_r != deriv.n_r || base.r_max != deriv.r_max {
            return Err(Error::Grid("value and derivative grids differ".into()));
        }
        Ok(H1GridFunction { base, deriv, tail: TailRule::Zero, tail_offset: 0 })
    }

    pub fn with_tail(mut self, tail: TailRule) -> Self {
        self.tail = tail;
        self
    }

    pub fn from_fns(r_max: f64, n_r: usize, f: impl Fn(f64) -> f64, df: impl Fn(f64) -> f64) -> Result<Self> {
        Self::new(GridFunction::from_fn(r_max, n_r, f)?, GridFunction::from_fn(r_max, n_r, df)?)
    }

    /// Sampled from a closed form, which is also used as the tail rule.
    pub fn analytic(r_max: f64, n_r: usize, f: impl Fn(f64) -> (f64, f64) + Send + Sync + 'static) -> Result<Self> {
        let dr = r_max / n_r as f64;
        let (v, d): (Vec<f64>, Vec<f64>) = (0..=n_r).map(|k| f(k as f64 * dr)).unzip();
        Ok(Self::new(GridFunction::new(r_max, v)?, GridFunction::new(r_max, d)?)?
            .with_tail(TailRule::Analytic(Arc::new(f))))
    }

    pub fn zeros(r_max: f64, n_r: usize) -> Self {
        Self::new(GridFunction::zeros(r_max, n_r), GridFunction::zeros(r_max, n_r)).expect("matching grids")
    }

    pub fn r_max(&self) -> f64 {
        self.base.r_max
    }

    pub fn n_r(&self) -> usize {
        self.base.n_r
    }

    pub fn dr(&self) -> f64 {
        self.base.dr()
    }

    /// (f, f′) at r_k for any k, using the tail rule past the grid.
    pub fn at_index(&self, k: usize) -> (f64, f64) {
        if k <= self.base.n_r {
            return (self.base.values[k], self.deriv.values[k]);
        }
        match &self.tail {
            TailRule::Zero => (0.0, 0.0),
            TailRule::Analytic(f) => f((k + self.tail_offset) as f64 * self.dr()),
        }
    }

    pub fn value_at(&self, k: usize) -> f64 {
        self.at_index(k).0
    }

    pub fn deriv_at(&self, k: usize) -> f64 {
        self.at_index(k).1
    }

    pub fn h1_norm(&self) -> f64 {
        (self.base.l2_norm().powi(2) + self.deriv.l2_norm().powi(2)).sqrt()
    }

    pub fn sup_norm(&self) -> f64 {
        self.base.sup_norm()
    }

    /// g(r) = f(t + r) for t on the grid.
    pub fn translate(&self, t: f64) -> Result<Self> {
        let j = grid_index(t, self.dr())?;
        Ok(self.translate_cells(j))
    }

    pub fn translate_cells(&self, j: usize) -> Self {
        let n = self.n_r();
        let (v, d): (Vec<f64>, Vec<f64>) = (0..=n).map(|k| self.at_index(k + j)).unzip();
        let r_max = self.r_max();
        H1GridFunction {
            base: GridFunction { r_max, n_r: n, values: v },
            deriv: GridFunction { r_max, n_r: n, values: d },
            tail: self.tail.clone(),
            tail_offset: self.tail_offset + j,
        }
    }

    /// Largest per-cell |f(r_{k+1}) − f(r_k) − ∫f′| with the trapezoid rule.
    pub fn compatibility_defect(&self) -> f64 {
        let h = self.dr();
        let (v, d) = (&self.base.values, &self.deriv.values);
        (0..self.n_r())
            .map(|k| (v[k + 1] - v[k] - 0.5 * h * (d[k] + d[k + 1])).abs())
            .fold(0.0, f64::max)
    }

    pub fn sub(&self, other: &H1GridFunction) -> Result<H1GridFunction> {
        H1GridFunction::new(self.base.sub(&other.base)?, self.deriv.sub(&other.deriv)?)
    }

    pub fn write_csv<W: Write>(&self, w: W) -> io::Result<()> {
        write_columns(w, "r", self.dr(), &[("value", &self.base.values), ("deriv", &self.deriv.values)])
    }
}

/// Perturbation p added to the canonical initial profile; p(0) = 0.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Perturbation {
    #[default]
    None,
    /// p(r) = a·r·e^{−b r}.
    RExp { a: f64, b: f64 },
}

impl Perturbation {
    pub fn eval(&self, r: f64) -> (f64, f64) {
        match *self {
            Perturbation::None => (0.0, 0.0),
            Perturbation::RExp { a, b } => {
                let e = (-b * r).exp();
                (a * r * e, a * (1.0 - b * r) * e)
            }
        }
    }
}

/// A point (x, z) of the state space: z ∈ H¹ with z(0) = x ∧ 0.
#[derive(Clone, Debug, PartialEq)]
pub struct StatePoint {
    pub x: f64,
    pub z: H1GridFunction,
}

impl StatePoint {
    pub fn new(x: f64, z: H1GridFunction) -> Result<Self> {
        if !x.is_finite() {
            return Err(Error::Precondition(format!("state x must be finite, got {x}")));
        }
        if z.base.values[0] != x.min(0.0) {
            return Err(Error::Precondition(format!(
                "boundary condition fails: z(0) = {} but x ∧ 0 = {}",
                z.base.values[0],
                x.min(0.0)
            )));
        }
        Ok(StatePoint { x, z })
    }

    /// z₀ = (x ∧ 0)·Ḡ + p, continued analytically past r_max.
    pub fn canonical(x: f64, d: &ServiceDistribution, p: Perturbation, r_max: f64, n_r: usize) -> Result<Self> {
        if let Perturbation::RExp { b, .. } = p {
            if !(b > 0.0) {
                return Err(Error::InvalidParameter(format!("perturbation decay rate must be positive, got {b}")));
            }
        }
        let xm = x.min(0.0);
        let d = d.clone();
        let f = move |r: f64| {
            let (pv, pd) = p.eval(r);
            if xm == 0.0 {
                (pv, pd)
            } else {
                (xm * d.ccdf(r) + pv, -xm * d.pdf(r) + pd)
            }
        };
        let mut z = H1GridFunction::analytic(r_max, n_r, f)?;
        z.base.values[0] = xm;
        StatePoint::new(x, z)
    }

    pub fn in_a(&self) -> bool {
        self.x >= 0.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn exp_fn(r_max: f64, n: usize) -> H1GridFunction {
        H1GridFunction::analytic(r_max, n, |r| ((-r).exp(), -(-r).exp())).unwrap()
    }

    #[test]
    fn norms() {
        assert_eq!(GridFunction::zeros(5.0, 50).l2_norm(), 0.0);
        let f = GridFunction::from_fn(40.0, 40_000, |r| (-r).exp()).unwrap();
        assert!((f.l2_norm() - 0.5f64.sqrt()).abs() < 1e-4);
        assert_eq!(f.sup_norm(), 1.0);
        let one = GridFunction::from_fn(1.0, 100, |_| 1.0).unwrap();
        assert!((one.l2_norm() - 1.0).abs() < 1e-14);
        let h = exp_fn(40.0, 40_000);
        assert!((h.h1_norm() - 1.0).abs() < 1e-4);
        let e = ServiceDistribution::exponential(1.0).unwrap();
        let g = H1GridFunction::from_fns(40.0, 40_000, |r| e.ccdf(r), |r| -e.pdf(r)).unwrap();
        assert!((g.h1_norm() - 1.0).abs() < 1e-4);
        assert_eq!(H1GridFunction::zeros(1.0, 10).h1_norm(), 0.0);
    }

    #[test]
    fn translation() {
        let f = exp_fn(10.0, 1000);
        assert_eq!(f.translate(0.0).unwrap(), f);
        let g = f.translate(1.0).unwrap();
        for k in 0..=1000 {
            let r = k as f64 * 0.01;
            assert!((g.base.values[k] - (-1.0 - r).exp()).abs() < 1e-15);
        }
        assert!(f.translate(0.005).is_err());
        let z = H1GridFunction::from_fns(10.0, 1000, |r| (-r).exp(), |r| -(-r).exp()).unwrap();
        let mut prev = f64::INFINITY;
        for t in [0.0, 2.0, 5.0, 9.0, 10.0] {
            let n = z.translate(t).unwrap().h1_norm();
            assert!(n <= prev);
            prev = n;
        }
        assert!(prev < 1e-4);
    }

    #[test]
    fn state_point_boundary() {
        let z = H1GridFunction::zeros(1.0, 10);
        assert!(StatePoint::new(0.5, z.clone()).is_ok());
        assert!(StatePoint::new(-0.5, z.clone()).is_err());
        let mut bad = z;
        bad.base.values[0] = 1e-300;
        assert!(StatePoint::new(1.0, bad).is_err());
        let d = ServiceDistribution::lomax(3.0, 2.0).unwrap();
        let p = StatePoint::canonical(-0.7, &d, Perturbation::RExp { a: 0.3, b: 1.0 }, 5.0, 500).unwrap();
        assert_eq!(p.z.base.values[0], -0.7);
        assert!(p.z.compatibility_defect() < 1e-5);
        let (v, _) = p.z.at_index(600);
        assert!((v - (-0.7 * d.ccdf(6.0) + 0.3 * 6.0 * (-6.0f64).exp())).abs() < 1e-14);
    }

    #[test]
    fn csv_columns() {
        let f = exp_fn(1.0, 2);
        let mut buf = Vec::new();
        f.write_csv(&mut buf).unwrap();
        let s = String::from_utf8(buf).unwrap();
        assert!(s.starts_with("r,value,deriv\n0,1,-1\n0.5,"));
        assert_eq!(s.lines().count(), 4);
    }

    #[test]
    fn grid_alignment() {
        let g = Grid::new(0.01, 10.0, 40.0).unwrap();
        assert_eq!((g.n_t, g.n_r), (1000, 4000));
        assert!(Grid::new(0.01, 10.005, 40.0).is_err());
        assert_eq!(g.time_index(0.37).unwrap(), 37);
    }

    proptest! {
        #[test]
        fn translation_composes(s in 0usize..300, t in 0usize..300) {
            let f = exp_fn(4.0, 400);
            let zero = H1GridFunction::from_fns(4.0, 400, |r| (-r).exp(), |r| -(-r).exp()).unwrap();
            for g in [f, zero] {
                let a = g.translate_cells(s).translate_cells(t);
                let b = g.translate_cells(s + t);
                prop_assert_eq!(&a.base.values, &b.base.values);
                prop_assert_eq!(&a.deriv.values, &b.deriv.values);
            }
        }

        #[test]
        fn h1_norm_nonincreasing_under_translation(a in -3.0f64..3.0, b in 0.2f64..4.0, c in 0.0f64..6.0, t1 in 0usize..200, t2 in 0usize..200) {
            let f = H1GridFunction::from_fns(
                8.0, 800,
                move |r| a * (-b * r).exp() * (c * r).cos(),
                move |r| a * (-b * r).exp() * (-b * (c * r).cos() - c * (c * r).sin()),
            ).unwrap();
            let (lo, hi) = (t1.min(t2), t1.max(t2));
            prop_assert!(f.translate_cells(hi).h1_norm() <= f.translate_cells(lo).h1_norm() + 1e-15);
        }

        #[test]
        fn sup_bounded_by_h1(a in -3.0f64..3.0, b in 0.2f64..4.0, c in 0.0f64..6.0, s in 0.0f64..2.0) {
            let f = H1GridFunction::from_fns(
                40.0, 8000,
                move |r| a * (-b * r).exp() * (c * r + s).cos(),
                move |r| a * (-b * r).exp() * (-b * (c * r + s).cos() - c * (c * r + s).sin()),
            ).unwrap();
            prop_assert!(f.sup_norm() <= 2f64.sqrt() * f.h1_norm());
        }
    }
}
