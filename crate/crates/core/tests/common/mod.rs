//! Shared oracles and fixtures for the integration tests.
#![allow(dead_code)]

pub const MINIMAL_CONFIG: &str = "\
[model]
N = 10
beta = 0.2
h = 0.3

[[weights]]
profile = \"uniform\"

[plan]
M = 50
seed = 1
";

pub const MCMC_CONFIG: &str = "\
[model]
N_list = [8, 10]
beta = 0.2
h = 0.3

[[weights]]
profile = \"uniform\"

[[weights]]
profile = \"power-law\"
alpha = 0.5

[engine]
kind = \"mcmc\"
sweeps = 1500
burn_in = 300
thin = 2

[plan]
M = 4
seed = 11

[clt]
spec = [2, 2]
";

/// Adaptive Simpson for `∫ f` on `[a, b]`.
pub fn adaptive_simpson(f: &dyn Fn(f64) -> f64, a: f64, b: f64, eps: f64) -> f64 {
    #[allow(clippy::too_many_arguments)]
    fn rec(f: &dyn Fn(f64) -> f64, a: f64, b: f64, fa: f64, fm: f64, fb: f64, whole: f64, eps: f64, depth: u32) -> f64 {
        let m = 0.5 * (a + b);
        let (lm, rm) = (0.5 * (a + m), 0.5 * (m + b));
        let (flm, frm) = (f(lm), f(rm));
        let left = (m - a) / 6.0 * (fa + 4.0 * flm + fm);
        let right = (b - m) / 6.0 * (fm + 4.0 * frm + fb);
        if depth == 0 || (left + right - whole).abs() <= 15.0 * eps {
            left + right + (left + right - whole) / 15.0
        } else {
            rec(f, a, m, fa, flm, fm, left, eps / 2.0, depth - 1) + rec(f, m, b, fm, frm, fb, right, eps / 2.0, depth - 1)
        }
    }
    let (fa, fb, fm) = (f(a), f(b), f(0.5 * (a + b)));
    let whole = (b - a) / 6.0 * (fa + 4.0 * fm + fb);
    rec(f, a, b, fa, fm, fb, whole, eps, 50)
}

/// Bisection on `q − E th²(βz√q + h)` with the expectation by adaptive
/// Simpson against the normal density on `[−12, 12]`; shares nothing with the
/// solver's Gauss–Hermite iteration.
pub fn q_oracle(beta: f64, h: f64) -> f64 {
    let phi = |q: f64| {
        let f = move |z: f64| (beta * z * q.sqrt() + h).tanh().powi(2) * (-0.5 * z * z).exp() / (2.0 * std::f64::consts::PI).sqrt();
        adaptive_simpson(&f, -12.0, 12.0, 1e-15)
    };
    let (mut lo, mut hi) = (0.0f64, 1.0f64);
    for _ in 0..60 {
        let mid = 0.5 * (lo + hi);
        if mid - phi(mid) < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}
