#![allow(dead_code)]

//! Independent reference computations used by the engine tests.

use nalgebra::{DMatrix, DVector};
use statrs::function::gamma::ln_gamma;

/// One multinomial case: a feature row per category and the chosen category.
pub struct Case {
    pub features: Vec<Vec<f64>>,
    pub chosen: usize,
}

fn softmax(v: &[f64]) -> Vec<f64> {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = v.iter().map(|x| (x - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|x| x / s).collect()
}

pub fn multinomial_loglik(cases: &[Case], beta: &[f64]) -> f64 {
    cases
        .iter()
        .map(|c| {
            let eta: Vec<f64> = c.features.iter().map(|x| x.iter().zip(beta).map(|(a, b)| a * b).sum()).collect();
            let m = eta.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            eta[c.chosen] - m - eta.iter().map(|e| (e - m).exp()).sum::<f64>().ln()
        })
        .sum()
}

/// Maximizes the conditional-logit likelihood with BFGS and a backtracking line search.
pub fn multinomial_mle(cases: &[Case], p: usize) -> Vec<f64> {
    let f = |b: &DVector<f64>| -multinomial_loglik(cases, b.as_slice());
    let grad = |b: &DVector<f64>| {
        let mut g = DVector::zeros(p);
        for c in cases {
            let eta: Vec<f64> = c.features.iter().map(|x| x.iter().zip(b.iter()).map(|(a, b)| a * b).sum()).collect();
            let pr = softmax(&eta);
            for (k, x) in c.features.iter().enumerate() {
                let r = if k == c.chosen { 1.0 } else { 0.0 } - pr[k];
                for j in 0..p {
                    g[j] -= r * x[j];
                }
            }
        }
        g
    };
    let mut b = DVector::zeros(p);
    let mut h = DMatrix::identity(p, p);
    let mut g = grad(&b);
    for _ in 0..2000 {
        if g.amax() < 1e-13 {
            break;
        }
        let dir = -(&h * &g);
        let f0 = f(&b);
        let slope = g.dot(&dir);
        let mut t = 1.0;
        while f(&(&b + &dir * t)) > f0 + 1e-4 * t * slope && t > 1e-20 {
            t *= 0.5;
        }
        let s = &dir * t;
        let b_new = &b + &s;
        let g_new = grad(&b_new);
        let yv = &g_new - &g;
        let sy = s.dot(&yv);
        if sy > 1e-300 {
            let rho = 1.0 / sy;
            let i = DMatrix::<f64>::identity(p, p);
            h = (&i - &s * yv.transpose() * rho) * &h * (&i - &yv * s.transpose() * rho) + &s * s.transpose() * rho;
        }
        b = b_new;
        g = g_new;
    }
    b.iter().copied().collect()
}

pub fn multinomial_probs(case: &Case, beta: &[f64]) -> Vec<f64> {
    softmax(&case.features.iter().map(|x| x.iter().zip(beta).map(|(a, b)| a * b).sum()).collect::<Vec<_>>())
}

const GK_X: [f64; 8] = [
    0.991455371120812639206854697526329,
    0.949107912342758524526189684047851,
    0.864864423359769072789712788640926,
    0.741531185599394439863864773280788,
    0.586087235467691130294144845693013,
    0.405845151377397166906606412076961,
    0.207784955007898467600689403773245,
    0.000000000000000000000000000000000,
];
const GK_WK: [f64; 8] = [
    0.022935322010529224963732008058970,
    0.063092092629978553290700663189204,
    0.104790010322250183839876322541518,
    0.140653259715525918745189590510238,
    0.169004726639267902826583426598550,
    0.190350578064785409913256402421014,
    0.204432940075298892414161999234649,
    0.209482141084727828012999174891714,
];
const GK_WG: [f64; 4] = [
    0.129484966168869693270611432679082,
    0.279705391489276667901467771423780,
    0.381830050505118944950369775488975,
    0.417959183673469387755102040816327,
];

/// 15-point Kronrod estimate and its difference from the embedded 7-point Gauss rule.
fn gk15<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64) -> (f64, f64) {
    let c = 0.5 * (a + b);
    let h = 0.5 * (b - a);
    let fc = f(c);
    let mut k = fc * GK_WK[7];
    let mut g = fc * GK_WG[3];
    for i in 0..7 {
        let x = h * GK_X[i];
        let s = f(c - x) + f(c + x);
        k += GK_WK[i] * s;
        if i % 2 == 1 {
            g += GK_WG[i / 2] * s;
        }
    }
    (k * h, ((k - g) * h).abs())
}

fn refine<F: Fn(f64) -> f64>(f: &F, lo: f64, hi: f64, v: f64, e: f64, tol: f64, depth: u32) -> f64 {
    if e <= tol || e <= 1e-14 * v.abs() || depth == 0 {
        return v;
    }
    let mid = 0.5 * (lo + hi);
    let (v1, e1) = gk15(f, lo, mid);
    let (v2, e2) = gk15(f, mid, hi);
    refine(f, lo, mid, v1, e1, 0.5 * tol, depth - 1) + refine(f, mid, hi, v2, e2, 0.5 * tol, depth - 1)
}

/// Fixed composite 15-point Kronrod rule on `pieces` equal intervals.
pub fn composite<F: Fn(f64) -> f64>(f: F, a: f64, b: f64, pieces: usize) -> f64 {
    let h = (b - a) / pieces as f64;
    (0..pieces).map(|i| gk15(&f, a + h * i as f64, a + h * (i + 1) as f64).0).sum()
}

/// Adaptive Gauss–Kronrod on `[a, b]`, split first into `pieces` intervals. The
/// absolute tolerance is `rel_tol` times a first-pass estimate of the integral.
pub fn integrate<F: Fn(f64) -> f64>(f: F, a: f64, b: f64, pieces: usize, rel_tol: f64) -> f64 {
    let segs: Vec<(f64, f64, f64, f64)> = (0..pieces)
        .map(|i| {
            let lo = a + (b - a) * i as f64 / pieces as f64;
            let hi = a + (b - a) * (i + 1) as f64 / pieces as f64;
            let (v, e) = gk15(&f, lo, hi);
            (lo, hi, v, e)
        })
        .collect();
    let rough: f64 = segs.iter().map(|s| s.2.abs()).sum();
    let tol = rel_tol * rough / pieces as f64;
    segs.iter().map(|&(lo, hi, v, e)| refine(&f, lo, hi, v, e, tol, 24)).sum()
}

/// `ln p(y)` for `y_r ~ Poisson(e^α)`, `α ~ N(0, σ²)`, `σ² ~ IW(ν, φ)` (inverse-gamma
/// with shape `ν/2`, scale `φ/2`), integrating over `(α, ln σ²)`.
pub fn log_evidence_random_intercept(y: &[f64], nu: f64, phi: f64) -> f64 {
    let sum_y: f64 = y.iter().sum();
    let n = y.len() as f64;
    let lfact: f64 = y.iter().map(|v| ln_gamma(v + 1.0)).sum();
    let (a, b) = (0.5 * nu, 0.5 * phi);
    let log_joint = |alpha: f64, s: f64| {
        let var = s.exp();
        let lik = if n > 0.0 { sum_y * alpha - n * alpha.exp() - lfact } else { 0.0 };
        let prior_a = -0.5 * (2.0 * std::f64::consts::PI * var).ln() - 0.5 * alpha * alpha / var;
        // Inverse-gamma density in σ², times the Jacobian e^s.
        let prior_s = a * b.ln() - ln_gamma(a) - (a + 1.0) * s - b / var + s;
        lik + prior_a + prior_s
    };
    // Shift by the joint maximum found on a coarse grid.
    let mut shift = f64::NEG_INFINITY;
    for i in 0..=400 {
        for k in 0..=400 {
            let alpha = -10.0 + 20.0 * i as f64 / 400.0;
            let s = -20.0 + 40.0 * k as f64 / 400.0;
            shift = shift.max(log_joint(alpha, s));
        }
    }
    let inner = |s: f64| {
        let var = s.exp();
        // The α integrand is log-concave: Newton to its mode, then a fixed window in
        // units of the curvature width.
        let mut m = 0.0f64;
        for _ in 0..200 {
            let g = sum_y - n * m.exp() - m / var;
            let h = n * m.exp() + 1.0 / var;
            let step = (g / h).clamp(-5.0, 5.0);
            m += step;
            if step.abs() < 1e-14 * (1.0 + m.abs()) {
                break;
            }
        }
        let w = 1.0 / (n * m.exp() + 1.0 / var).sqrt();
        composite(|alpha| (log_joint(alpha, s) - shift).exp(), m - 40.0 * w, m + 40.0 * w, 80)
    };
    let total = composite(inner, -40.0, 60.0, 800);
    total.ln() + shift
}

/// `E[1/σ²]` under `IW(ν, φ)` with `d = 1`, by quadrature in `ln σ²`.
pub fn inverse_gamma_mean_precision(nu: f64, phi: f64) -> f64 {
    let (a, b) = (0.5 * nu, 0.5 * phi);
    let dens = |s: f64| (a * b.ln() - ln_gamma(a) - a * s - b * (-s).exp()).exp();
    let z = integrate(dens, -40.0, 40.0, 200, 1e-13);
    integrate(|s| dens(s) * (-s).exp(), -40.0, 40.0, 200, 1e-13) / z
}
