//! Oracles shared by the integration tests and the acceptance suite.
#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use rccm_core::metric::MetricPolynomial;

/// `min |k - u*|^2` subject to `phi0 + phi1 (k - u*) <= 0`, solved on the
/// dual: the multiplier `mu >= 0` is found by bisection on the complementary
/// slackness condition and the primal point recovered from stationarity.
pub fn dual_oracle(phi0: f64, phi1: &DVector<f64>, u_star: &DVector<f64>) -> DVector<f64> {
    let primal = |mu: f64| u_star - phi1 * mu;
    let slack = |mu: f64| phi0 + phi1.dot(&(primal(mu) - u_star));
    if slack(0.0) <= 0.0 {
        return primal(0.0);
    }
    let (mut lo, mut hi) = (0.0, 1.0);
    while slack(hi) > 0.0 {
        hi *= 2.0;
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if slack(mid) > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    primal(0.5 * (lo + hi))
}

/// Piecewise-linear curve with `k` segments, energy `sum k * d^T M(mid) d`,
/// minimized over the interior vertices by Gauss-Newton with a
/// block-tridiagonal solve.
pub fn polyline_energy(metric: &MetricPolynomial, a: &DVector<f64>, b: &DVector<f64>, k: usize) -> f64 {
    let n = a.len();
    let kf = k as f64;
    let mut pts: Vec<DVector<f64>> = (0..=k).map(|j| a + (b - a) * (j as f64 / kf)).collect();
    let energy = |pts: &[DVector<f64>]| -> f64 {
        (0..k)
            .map(|j| {
                let d = &pts[j + 1] - &pts[j];
                let m = metric.eval_m(&((&pts[j + 1] + &pts[j]) * 0.5)).unwrap();
                kf * d.dot(&(m * &d))
            })
            .sum()
    };
    let mut e = energy(&pts);
    for _ in 0..200 {
        let mut ms = Vec::with_capacity(k);
        let mut grad = vec![DVector::zeros(n); k + 1];
        for j in 0..k {
            let d = &pts[j + 1] - &pts[j];
            let ev = metric.eval_m_and_derivs(&((&pts[j + 1] + &pts[j]) * 0.5)).unwrap();
            let v = &ev.m * &d;
            let mut half = DVector::zeros(n);
            for (i, dw) in &ev.dw {
                half[*i] = -0.5 * kf * v.dot(&(dw * &v));
            }
            grad[j + 1] += &v * (2.0 * kf) + &half;
            grad[j] += &v * (-2.0 * kf) + &half;
            ms.push(ev.m);
        }
        let gmax = grad[1..k].iter().map(|g| g.amax()).fold(0.0, f64::max);
        if gmax < 1e-11 {
            break;
        }
        // block tridiagonal: diag 2k(M_{j-1} + M_j), off -2k M_j
        let mut c_prime: Vec<DMatrix<f64>> = Vec::with_capacity(k);
        let mut d_prime: Vec<DVector<f64>> = Vec::with_capacity(k);
        for j in 1..k {
            let diag = (&ms[j - 1] + &ms[j]) * (2.0 * kf);
            let lower = &ms[j - 1] * (-2.0 * kf);
            let upper = &ms[j] * (-2.0 * kf);
            let rhs = -&grad[j];
            let (denom, r) = if j == 1 {
                (diag, rhs)
            } else {
                (&diag - &lower * &c_prime[j - 2], rhs - &lower * &d_prime[j - 2])
            };
            let inv = denom.try_inverse().unwrap();
            c_prime.push(&inv * upper);
            d_prime.push(inv * r);
        }
        let mut step = vec![DVector::zeros(n); k + 1];
        for j in (1..k).rev() {
            step[j] = if j == k - 1 {
                d_prime[j - 1].clone()
            } else {
                &d_prime[j - 1] - &c_prime[j - 1] * &step[j + 1]
            };
        }
        let mut t = 1.0;
        let mut improved = false;
        for _ in 0..30 {
            let cand: Vec<DVector<f64>> = pts.iter().zip(&step).map(|(p, s)| p + s * t).collect();
            let ec = energy(&cand);
            if ec < e {
                pts = cand;
                improved = e - ec > 1e-15 * e;
                e = ec;
                break;
            }
            t *= 0.5;
        }
        if !improved {
            break;
        }
    }
    e
}
