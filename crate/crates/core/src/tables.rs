//! Tabulated service-law functions on a step-Δ lattice and fast correlation.

use std::cell::RefCell;
use std::sync::Arc;

use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;

use crate::distributions::ServiceDistribution;

/// Ḡ, g, g′ at kΔ and Ḡ, g at (k+½)Δ for k < len.
#[derive(Clone, Debug)]
pub struct GridTables {
    pub dt: f64,
    pub bar: Vec<f64>,
    pub dens: Vec<f64>,
    pub dens_deriv: Vec<f64>,
    pub bar_half: Vec<f64>,
    pub dens_half: Vec<f64>,
}

impl GridTables {
    pub fn new(d: &ServiceDistribution, dt: f64, len: usize) -> Self {
        let at = |k: usize| k as f64 * dt;
        let mid = |k: usize| (k as f64 + 0.5) * dt;
        GridTables {
            dt,
            bar: (0..len).map(|k| d.ccdf(at(k))).collect(),
            dens: (0..len).map(|k| d.pdf(at(k))).collect(),
            dens_deriv: (0..len).map(|k| d.pdf_deriv(at(k))).collect(),
            bar_half: (0..len).map(|k| d.ccdf(mid(k))).collect(),
            dens_half: (0..len).map(|k| d.pdf(mid(k))).collect(),
        }
    }

    pub fn shared(d: &ServiceDistribution, dt: f64, len: usize) -> Arc<Self> {
        Arc::new(Self::new(d, dt, len))
    }

    pub fn len(&self) -> usize {
        self.bar.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bar.is_empty()
    }
}

const DIRECT_LIMIT: usize = 1 << 16;

thread_local! {
    static PLANNER: RefCell<FftPlanner<f64>> = RefCell::new(FftPlanner::new());
}

/// out[l] = Σ_k signal[k]·kernel[k + l] for l < n_out; kernel entries past its end count as zero.
pub fn correlate(signal: &[f64], kernel: &[f64], n_out: usize) -> Vec<f64> {
    let ns = signal.len();
    if ns == 0 || n_out == 0 {
        return vec![0.0; n_out];
    }
    let work = ns.saturating_mul(n_out);
    if work <= DIRECT_LIMIT || ns < 32 {
        return correlate_direct(signal, kernel, n_out);
    }
    // Linear convolution of the reversed signal with the kernel window.
    let nk = kernel.len().min(ns + n_out - 1);
    let size = (ns + nk).next_power_of_two();
    let mut a = vec![Complex64::new(0.0, 0.0); size];
    let mut b = vec![Complex64::new(0.0, 0.0); size];
    for (k, v) in signal.iter().enumerate() {
        a[ns - 1 - k].re = *v;
    }
    for (k, v) in kernel[..nk].iter().enumerate() {
        b[k].re = *v;
    }
    PLANNER.with(|p| {
        let mut p = p.borrow_mut();
        let fwd = p.plan_fft_forward(size);
        let inv = p.plan_fft_inverse(size);
        fwd.process(&mut a);
        fwd.process(&mut b);
        for (x, y) in a.iter_mut().zip(&b) {
            *x *= y;
        }
        inv.process(&mut a);
    });
    let scale = 1.0 / size as f64;
    (0..n_out)
        .map(|l| if ns - 1 + l < size { a[ns - 1 + l].re * scale } else { 0.0 })
        .collect()
}

/// out[i] = Σ_{j≤i} a[j]·k[i − j] for i < n_out.
pub fn convolve(a: &[f64], k: &[f64], n_out: usize) -> Vec<f64> {
    // A convolution is a correlation against the reversed first factor.
    let m = a.len().min(n_out);
    if m == 0 {
        return vec![0.0; n_out];
    }
    let rev: Vec<f64> = a[..m].iter().rev().copied().collect();
    let mut padded = vec![0.0; m - 1];
    padded.extend_from_slice(&k[..k.len().min(n_out)]);
    // out[i] = Σ_q rev[q]·padded[q + i] with padded[q + i] = k[q + i − (m − 1)] = k[i − j].
    correlate(&rev, &padded, n_out)
}

pub fn correlate_direct(signal: &[f64], kernel: &[f64], n_out: usize) -> Vec<f64> {
    (0..n_out)
        .map(|l| {
            signal
                .iter()
                .enumerate()
                .take_while(|(k, _)| k + l < kernel.len())
                .map(|(k, s)| s * kernel[k + l])
                .sum()
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn tables_match_law() {
        let d = ServiceDistribution::lomax(3.0, 2.0).unwrap();
        let t = GridTables::new(&d, 0.1, 50);
        assert_eq!(t.bar[0], 1.0);
        assert_eq!(t.bar[20], d.ccdf(2.0));
        assert_eq!(t.dens_half[3], d.pdf((3.0 + 0.5) * 0.1));
    }

    #[test]
    fn convolution_small() {
        let c = convolve(&[1.0, 2.0, 3.0], &[1.0, 1.0, 1.0, 1.0], 4);
        assert_eq!(c, vec![1.0, 3.0, 6.0, 6.0]);
    }

    proptest! {
        #[test]
        fn convolve_matches_definition(a in prop::collection::vec(-1.0f64..1.0, 1..300), n_out in 1usize..600) {
            let k: Vec<f64> = (0..700).map(|i| (i as f64 * 0.11).cos()).collect();
            let c = convolve(&a, &k, n_out);
            for i in 0..n_out {
                let want: f64 = (0..=i.min(a.len() - 1)).map(|j| a[j] * k[i - j]).sum();
                prop_assert!((c[i] - want).abs() < 1e-9 * (1.0 + want.abs()));
            }
        }

        #[test]
        fn fft_matches_direct(
            signal in prop::collection::vec(-1.0f64..1.0, 32..400),
            extra in 0usize..300,
            n_out in 1usize..400,
        ) {
            let kernel: Vec<f64> = (0..signal.len() + extra).map(|k| (k as f64 * 0.37).sin()).collect();
            let a = correlate_direct(&signal, &kernel, n_out);
            // Enough outputs to take the transform path.
            let b = correlate(&signal, &kernel, n_out.max(DIRECT_LIMIT / signal.len() + 1));
            for l in 0..n_out {
                prop_assert!((a[l] - b[l]).abs() < 1e-10 * (1.0 + a[l].abs()), "l={} {} {}", l, a[l], b[l]);
            }
        }
    }
}
