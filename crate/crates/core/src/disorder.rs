//! Quenched averages `ν(f) = E⟨f⟩` over independently seeded disorder draws.
//!
//! Disorder `m` is drawn from `derive_seed(base_seed, m)`. Inner averages are
//! computed per disorder (in parallel) and reduced in index order, so results
//! do not depend on the number of worker threads.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::clt::gaussian_moment;
use crate::error::{Error, Result};
use crate::exact::{centered_overlap_moment, centered_overlap_moment_any, overlap_moment, replica_product, x_moments, y_moments, ReplicaSpec, MAX_CORRELATOR_OVERLAP_ORDER};
use crate::mcmc::{run_replica_pair, ReplicaPairRun, Schedule, UpdateRule};
use crate::model::{exact_gibbs, sample_disorder, ModelParams};
use crate::seed::derive_seed;
use crate::stats::{fit_line, mean, Estimate, LineFit};
use crate::weights::WeightVector;

pub const DEFAULT_DISORDERS: usize = 200;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct McmcSettings {
    pub schedule: Schedule,
    pub rule: UpdateRule,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "engine", rename_all = "kebab-case")]
pub enum Engine {
    Exact,
    Mcmc(McmcSettings),
}

impl Engine {
    pub fn label(&self) -> &'static str {
        match self {
            Engine::Exact => "exact",
            Engine::Mcmc(_) => "mcmc",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DisorderPlan {
    pub n_disorders: usize,
    pub base_seed: u64,
    pub engine: Engine,
}

impl DisorderPlan {
    pub fn new(n_disorders: usize, base_seed: u64, engine: Engine) -> Result<Self> {
        if n_disorders < 2 {
            return Err(Error::InvalidParameter(format!(
                "need at least 2 disorders for an error bar, got {n_disorders}"
            )));
        }
        if let Engine::Mcmc(s) = &engine {
            s.schedule.validate()?;
        }
        Ok(Self {
            n_disorders,
            base_seed,
            engine,
        })
    }

    pub fn exact(n_disorders: usize, base_seed: u64) -> Result<Self> {
        Self::new(n_disorders, base_seed, Engine::Exact)
    }

    pub fn disorder_seed(&self, m: usize) -> u64 {
        derive_seed(self.base_seed, m as u64)
    }
}

/// Per-disorder Gibbs averages the engines know how to produce.
#[derive(Debug, Clone, PartialEq)]
pub enum Observable {
    Constant(f64),
    /// `⟨X^k⟩`.
    XPower(u32),
    /// `⟨Y^k⟩ = ⟨S_1^k⟩`.
    YPower(u32),
    /// `⟨Π_l S_l^{k_l}⟩`.
    ReplicaProduct(ReplicaSpec),
    /// `Π_l a(k_l) · ⟨S_1²⟩^{k/2}`, the Gaussian prediction for a spec.
    GaussianTarget(ReplicaSpec),
    /// `⟨R_{1,2}^m⟩`.
    OverlapPower(u32),
    /// `⟨(R_{1,2} − q)^m⟩`.
    CenteredOverlap { q: f64, order: u32 },
}

impl Observable {
    pub fn label(&self) -> String {
        match self {
            Observable::Constant(c) => format!("{c}"),
            Observable::XPower(k) => format!("X^{k}"),
            Observable::YPower(k) => format!("Y^{k}"),
            Observable::ReplicaProduct(s) => format!("prod S^({})", s.label()),
            Observable::GaussianTarget(s) => format!("gauss({})", s.label()),
            Observable::OverlapPower(m) => format!("R^{m}"),
            Observable::CenteredOverlap { q, order } => format!("(R-{q})^{order}"),
        }
    }

    /// Highest power of `X`/`Y` needed.
    fn y_order(&self) -> usize {
        match self {
            Observable::XPower(k) | Observable::YPower(k) => *k as usize,
            Observable::ReplicaProduct(s) => s.max_exponent() as usize,
            Observable::GaussianTarget(_) => 2,
            _ => 0,
        }
    }
}

/// `⟨f⟩` for each observable on disorder `m`, via exact enumeration.
fn exact_values(observables: &[Observable], params: &ModelParams, weights: &WeightVector, seed: u64) -> Result<Vec<f64>> {
    let disorder = sample_disorder(seed, params.n_spins);
    let table = exact_gibbs(params, &disorder)?;
    let k_max = observables.iter().map(Observable::y_order).max().unwrap_or(0);
    let moments = if k_max > 0 {
        let xm = x_moments(&table, weights, k_max)?;
        let ym = y_moments(&xm, k_max)?;
        Some((xm, ym))
    } else {
        None
    };
    observables
        .iter()
        .map(|o| {
            Ok(match o {
                Observable::Constant(c) => *c,
                Observable::XPower(k) => moments.as_ref().expect("moments computed").0.values[*k as usize],
                Observable::YPower(k) => moments.as_ref().expect("moments computed").1[*k as usize],
                Observable::ReplicaProduct(spec) => replica_product(&moments.as_ref().expect("moments computed").1, spec)?,
                Observable::GaussianTarget(spec) => gaussian_target(spec, moments.as_ref().expect("moments computed").1[2]),
                Observable::OverlapPower(m) => {
                    if *m <= MAX_CORRELATOR_OVERLAP_ORDER {
                        overlap_moment(&table, *m)?
                    } else {
                        centered_overlap_moment_any(&table, 0.0, *m)
                    }
                }
                Observable::CenteredOverlap { q, order } => {
                    if order % 2 == 0 && *order <= MAX_CORRELATOR_OVERLAP_ORDER {
                        centered_overlap_moment(&table, *q, *order)?
                    } else {
                        centered_overlap_moment_any(&table, *q, *order)
                    }
                }
            })
        })
        .collect()
}

fn gaussian_target(spec: &ReplicaSpec, y2: f64) -> f64 {
    let a: f64 = spec.exponents().iter().map(|&k| gaussian_moment(k)).product();
    if a == 0.0 {
        0.0
    } else {
        a * y2.powf(f64::from(spec.total()) / 2.0)
    }
}

/// `⟨f⟩` on disorder `m` from one replica-pair run. Products over replica
/// pairs use the same chain pair for every factor.
fn mcmc_values(
    observables: &[Observable],
    params: &ModelParams,
    weights: &WeightVector,
    seed: u64,
    settings: &McmcSettings,
) -> Result<Vec<f64>> {
    let disorder = sample_disorder(seed, params.n_spins);
    let run = run_replica_pair(params, &disorder, weights, &settings.schedule, derive_seed(seed, u64::MAX), settings.rule)?;
    let ReplicaPairRun { x, y, overlap } = &run;
    let y_pow = |k: u32| mean(&y.values.iter().map(|v| v.powi(k as i32)).collect::<Vec<_>>());
    observables
        .iter()
        .map(|o| {
            Ok(match o {
                Observable::Constant(c) => *c,
                Observable::XPower(k) => {
                    // X¹ = x + y/2, X² = x − y/2.
                    let vals: Vec<f64> = x
                        .values
                        .iter()
                        .zip(&y.values)
                        .map(|(m, d)| 0.5 * ((m + 0.5 * d).powi(*k as i32) + (m - 0.5 * d).powi(*k as i32)))
                        .collect();
                    mean(&vals)
                }
                Observable::YPower(k) => y_pow(*k),
                Observable::ReplicaProduct(spec) => spec.exponents().iter().map(|&k| y_pow(k)).product(),
                Observable::GaussianTarget(spec) => gaussian_target(spec, y_pow(2)),
                Observable::OverlapPower(m) => mean(&overlap.values.iter().map(|r| r.powi(*m as i32)).collect::<Vec<_>>()),
                Observable::CenteredOverlap { q, order } => {
                    mean(&overlap.values.iter().map(|r| (r - q).powi(*order as i32)).collect::<Vec<_>>())
                }
            })
        })
        .collect()
}

/// `⟨f⟩_m` for every disorder `m` (rows) and observable (columns). This is
/// the common-random-numbers primitive: all columns share the same draws.
pub fn per_disorder_values(
    observables: &[Observable],
    params: &ModelParams,
    weights: &WeightVector,
    plan: &DisorderPlan,
) -> Result<Vec<Vec<f64>>> {
    if weights.len() != params.n_spins {
        return Err(Error::DimensionMismatch {
            expected: params.n_spins,
            actual: weights.len(),
        });
    }
    (0..plan.n_disorders)
        .into_par_iter()
        .map(|m| {
            let seed = plan.disorder_seed(m);
            match &plan.engine {
                Engine::Exact => exact_values(observables, params, weights, seed),
                Engine::Mcmc(settings) => mcmc_values(observables, params, weights, seed, settings),
            }
            .map_err(|e| Error::at_disorder(m, e))
        })
        .collect()
}

fn column(rows: &[Vec<f64>], j: usize) -> Vec<f64> {
    rows.iter().map(|r| r[j]).collect()
}

/// `ν(f)` with its standard error over disorders.
pub fn nu(observable: &Observable, params: &ModelParams, weights: &WeightVector, plan: &DisorderPlan) -> Result<Estimate> {
    Ok(nu_many(std::slice::from_ref(observable), params, weights, plan)?[0])
}

/// [`nu`] for several observables on shared disorder draws.
pub fn nu_many(observables: &[Observable], params: &ModelParams, weights: &WeightVector, plan: &DisorderPlan) -> Result<Vec<Estimate>> {
    let rows = per_disorder_values(observables, params, weights, plan)?;
    Ok((0..observables.len())
        .map(|j| Estimate::from_samples(&column(&rows, j), Some(plan.base_seed)))
        .collect())
}

/// `E(⟨A⟩ − ⟨B⟩)²` over disorders.
pub fn nu_disorder_variance(
    a: &Observable,
    b: &Observable,
    params: &ModelParams,
    weights: &WeightVector,
    plan: &DisorderPlan,
) -> Result<Estimate> {
    let rows = per_disorder_values(&[a.clone(), b.clone()], params, weights, plan)?;
    let sq: Vec<f64> = rows.iter().map(|r| (r[0] - r[1]) * (r[0] - r[1])).collect();
    Ok(Estimate::from_samples(&sq, Some(plan.base_seed)))
}

/// One bound family evaluated over the size grid.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BoundCurve {
    pub k: u32,
    pub sizes: Vec<usize>,
    pub moments: Vec<Estimate>,
    /// Per-size constant that makes the bound tight at that size, with its
    /// delta-method stderr.
    pub implied: Vec<Estimate>,
    /// Inverse-variance weighted mean of `implied` (plain mean when every
    /// stderr is zero).
    pub fitted: Estimate,
    /// Regression of `implied` on `log N`; descriptive only.
    pub trend: LineFit,
}

/// Relative slack for exact (zero-stderr) comparisons.
const EXACT_SLACK: f64 = 1e-12;

impl BoundCurve {
    fn new(k: u32, sizes: &[usize], moments: Vec<Estimate>, implied: Vec<Estimate>) -> Self {
        let values: Vec<f64> = implied.iter().map(|e| e.value).collect();
        let x: Vec<f64> = sizes.iter().map(|&n| (n as f64).ln()).collect();
        let trend = if sizes.len() >= 2 {
            fit_line(&x, &values)
        } else {
            LineFit {
                slope: 0.0,
                intercept: values.first().copied().unwrap_or(0.0),
                slope_stderr: 0.0,
                max_residual: 0.0,
            }
        };
        let fitted = if implied.iter().all(|e| e.stderr > 0.0) {
            let w: Vec<f64> = implied.iter().map(|e| e.stderr.powi(-2)).collect();
            let total: f64 = w.iter().sum();
            Estimate {
                value: w.iter().zip(&values).map(|(w, v)| w * v).sum::<f64>() / total,
                stderr: total.sqrt().recip(),
                n_samples: implied.len(),
                seed: None,
            }
        } else {
            Estimate {
                value: mean(&values),
                stderr: 0.0,
                n_samples: implied.len(),
                seed: None,
            }
        };
        Self {
            k,
            sizes: sizes.to_vec(),
            moments,
            implied,
            fitted,
            trend,
        }
    }

    /// Largest `(implied_N − fitted) / stderr_N` over the grid.
    pub fn max_excess(&self) -> f64 {
        self.implied
            .iter()
            .map(|e| {
                let d = e.value - self.fitted.value;
                if e.stderr > 0.0 {
                    d / e.stderr
                } else if d <= EXACT_SLACK * (1.0 + self.fitted.value.abs()) {
                    0.0
                } else {
                    f64::INFINITY
                }
            })
            .fold(f64::NEG_INFINITY, f64::max)
    }

    /// The single fitted constant bounds every size to within `k_se` of that
    /// size's standard error. Growth in `N` (logarithmic or faster) pushes
    /// the largest sizes above the weighted mean and fails this.
    pub fn is_bounded(&self, k_se: f64) -> bool {
        self.max_excess() <= k_se
    }
}

/// Implied constant `c·ν^{1/k}` with stderr `c·ν^{1/k}·se/(kν)`.
fn implied_constant(scale: f64, e: &Estimate, k: u32) -> Estimate {
    let kf = f64::from(k);
    let value = scale * e.value.max(0.0).powf(1.0 / kf);
    let stderr = if e.value > 0.0 { value * e.stderr / (kf * e.value) } else { 0.0 };
    Estimate { value, stderr, ..*e }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MomentBoundFit {
    /// `ν((R_{1,2} − q)^{2k}) ≤ (Lk/N)^k`, implied `L = N ν^{1/k} / k`.
    pub overlap: Vec<BoundCurve>,
    /// `ν(Y^{2k}) ≤ (Lk)^k`, implied `L = ν^{1/k} / k`.
    pub y: Vec<BoundCurve>,
}

/// Evaluates both moment bounds for every `k` in `orders` across `sizes`.
#[allow(clippy::too_many_arguments)]
pub fn empirical_moment_bound_fit(
    orders: &[u32],
    beta: f64,
    h: f64,
    q: f64,
    sizes: &[usize],
    weights: impl Fn(usize) -> Result<WeightVector>,
    plan: &DisorderPlan,
) -> Result<MomentBoundFit> {
    for &k in orders {
        if k == 0 || 2 * k > 8 {
            return Err(Error::Unsupported(format!("bound order 2k = {} (need 2 <= 2k <= 8)", 2 * k)));
        }
    }
    let mut overlap_m = vec![Vec::new(); orders.len()];
    let mut y_m = vec![Vec::new(); orders.len()];
    for &n in sizes {
        let params = ModelParams::new(beta, h, n)?;
        let mut obs: Vec<Observable> = orders.iter().map(|&k| Observable::CenteredOverlap { q, order: 2 * k }).collect();
        obs.extend(orders.iter().map(|&k| Observable::YPower(2 * k)));
        let est = nu_many(&obs, &params, &weights(n)?, plan)?;
        for j in 0..orders.len() {
            overlap_m[j].push(est[j]);
            y_m[j].push(est[orders.len() + j]);
        }
    }
    let overlap = orders
        .iter()
        .zip(overlap_m)
        .map(|(&k, m)| {
            let implied = sizes
                .iter()
                .zip(&m)
                .map(|(&n, e)| implied_constant(n as f64 / f64::from(k), e, k))
                .collect();
            BoundCurve::new(k, sizes, m, implied)
        })
        .collect();
    let y = orders
        .iter()
        .zip(y_m)
        .map(|(&k, m)| {
            let implied = m.iter().map(|e| implied_constant(1.0 / f64::from(k), e, k)).collect();
            BoundCurve::new(k, sizes, m, implied)
        })
        .collect();
    Ok(MomentBoundFit { overlap, y })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn plan(m: usize) -> DisorderPlan {
        DisorderPlan::exact(m, 42).unwrap()
    }

    fn curve(values: &[f64], se: f64) -> BoundCurve {
        let sizes: Vec<usize> = (8..8 + values.len()).collect();
        let est: Vec<Estimate> = values
            .iter()
            .map(|&value| Estimate {
                value,
                stderr: se,
                n_samples: 200,
                seed: None,
            })
            .collect();
        BoundCurve::new(1, &sizes, est.clone(), est)
    }

    #[test]
    fn bound_curve_rejects_growth() {
        let flat = [1.027, 1.0272, 1.028, 1.0284, 1.0286, 1.0285, 1.0288, 1.0289, 1.0298];
        assert!(curve(&flat, 1e-3).is_bounded(3.0));
        let logarithmic: Vec<f64> = (8..=16).map(|n| (n as f64).ln()).collect();
        assert!(!curve(&logarithmic, 1e-3).is_bounded(3.0));
        let linear: Vec<f64> = (8..=16).map(|n| 0.1 * n as f64).collect();
        assert!(!curve(&linear, 1e-2).is_bounded(3.0));
        // Exact values: only equality with the mean counts as bounded.
        assert!(curve(&[1.0; 5], 0.0).is_bounded(3.0));
        assert!(!curve(&[1.0, 1.0, 1.1], 0.0).is_bounded(3.0));
    }

    #[test]
    fn constant_observable() {
        let p = ModelParams::new(0.2, 0.3, 6).unwrap();
        let e = nu(&Observable::Constant(1.0), &p, &WeightVector::uniform(6), &plan(10)).unwrap();
        assert_eq!(e.value, 1.0);
        assert_eq!(e.stderr, 0.0);
        assert_eq!(e.n_samples, 10);
    }

    #[test]
    fn odd_moments_vanish_exactly() {
        let p = ModelParams::new(0.2, 0.3, 7).unwrap();
        let w = WeightVector::power_law(7, 1.0);
        for obs in [
            Observable::YPower(1),
            Observable::YPower(3),
            Observable::ReplicaProduct(ReplicaSpec::new(vec![2, 3]).unwrap()),
        ] {
            let e = nu(&obs, &p, &w, &plan(5)).unwrap();
            assert_eq!((e.value, e.stderr), (0.0, 0.0));
        }
    }

    #[test]
    fn overlap_square_at_vanishing_coupling() {
        let n = 8;
        let p = ModelParams::new(1e-12, 0.0, n).unwrap();
        let e = nu(&Observable::OverlapPower(2), &p, &WeightVector::uniform(n), &plan(6)).unwrap();
        assert!((e.value - 1.0 / n as f64).abs() < 1e-10 + 3.0 * e.stderr);
    }

    #[test]
    fn disorder_variance_of_fourth_moment_at_zero_coupling() {
        let n = 8;
        let p = ModelParams::new(0.0, 0.0, n).unwrap();
        let w = WeightVector::uniform(n);
        let spec = ReplicaSpec::new(vec![4]).unwrap();
        let a = Observable::ReplicaProduct(spec.clone());
        let b = Observable::GaussianTarget(spec);
        let v = nu_disorder_variance(&a, &b, &p, &w, &plan(4)).unwrap();
        assert!((v.value - 16.0 / 64.0).abs() < 1e-12);
        let same = nu_disorder_variance(&a, &a, &p, &w, &plan(4)).unwrap();
        assert_eq!(same.value, 0.0);
    }

    #[test]
    fn results_do_not_depend_on_thread_count() {
        let p = ModelParams::new(0.2, 0.3, 9).unwrap();
        let w = WeightVector::uniform(9);
        let obs = [Observable::YPower(4), Observable::OverlapPower(2)];
        let base = nu_many(&obs, &p, &w, &plan(16)).unwrap();
        for threads in [1, 3] {
            let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
            let other = pool.install(|| nu_many(&obs, &p, &w, &plan(16)).unwrap());
            assert_eq!(base, other);
        }
    }

    #[test]
    fn failing_disorder_is_named() {
        let p = ModelParams::new(0.2, 0.3, 22).unwrap();
        let err = nu(&Observable::YPower(2), &p, &WeightVector::uniform(22), &plan(3)).unwrap_err();
        assert!(matches!(err, Error::AtDisorder { index: 0, .. }), "{err}");
    }

    #[test]
    fn bound_fit_at_zero_coupling() {
        let fit = empirical_moment_bound_fit(&[1, 2], 0.0, 0.0, 0.0, &[6, 8], |n| Ok(WeightVector::uniform(n)), &plan(2)).unwrap();
        for &l in &fit.overlap[0].implied {
            assert!((l.value - 1.0).abs() < 1e-12);
        }
        // ν(Y⁴) = 12 − 4/N ⇒ implied L = √(12 − 4/N)/2.
        let want = (12.0f64 - 4.0 / 8.0).sqrt() / 2.0;
        assert!((fit.y[1].implied[1].value - want).abs() < 1e-12);
        assert!(empirical_moment_bound_fit(&[5], 0.0, 0.0, 0.0, &[6], |n| Ok(WeightVector::uniform(n)), &plan(2)).is_err());
    }

    #[test]
    fn mcmc_engine_tracks_exact_engine() {
        let n = 8;
        let p = ModelParams::new(0.2, 0.3, n).unwrap();
        let w = WeightVector::uniform(n);
        let settings = McmcSettings {
            schedule: Schedule::new(4000, 200, 1).unwrap(),
            rule: UpdateRule::HeatBath,
        };
        let mc = DisorderPlan::new(4, 9, Engine::Mcmc(settings)).unwrap();
        let ex = DisorderPlan::exact(4, 9).unwrap();
        let obs = [Observable::YPower(2), Observable::OverlapPower(2)];
        let a = per_disorder_values(&obs, &p, &w, &mc).unwrap();
        let b = per_disorder_values(&obs, &p, &w, &ex).unwrap();
        for (ra, rb) in a.iter().zip(&b) {
            assert!((ra[0] - rb[0]).abs() < 0.15, "{ra:?} {rb:?}");
            assert!((ra[1] - rb[1]).abs() < 0.05);
        }
    }
}
