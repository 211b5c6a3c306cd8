//! Gaussian-moment comparison for `S_l`: the discrepancy
//! `|E⟨Π S_l^{k_l}⟩ − Π a(k_l) E⟨S_1²⟩^{k/2}|`, its per-disorder squared
//! version, size sweeps and distributional diagnostics of `Y`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::disorder::{nu_disorder_variance, per_disorder_values, DisorderPlan, Engine, McmcSettings, Observable};
use crate::error::{Error, Result};
use crate::exact::ReplicaSpec;
use crate::mcmc::run_replica_pair;
use crate::model::{exact_gibbs, Disorder, ModelParams};
use crate::seed::derive_seed;
use crate::stats::{fit_line, mean, mean_and_stderr, Estimate, LineFit};
use crate::weights::{WeightProfile, WeightVector};

/// `a(l) = E g^l` for standard normal `g`: `a(0) = 1`, `a(1) = 0`,
/// `a(l) = (l − 1) a(l − 2)`.
pub fn gaussian_moment(l: u32) -> f64 {
    match l {
        0 => 1.0,
        1 => 0.0,
        _ => f64::from(l - 1) * gaussian_moment(l - 2),
    }
}

/// `a(0..=l_max)`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GaussianMoments {
    pub table: Vec<f64>,
}

impl GaussianMoments {
    pub fn new(l_max: u32) -> Self {
        let mut table = vec![1.0, 0.0];
        for l in 2..=l_max as usize {
            table.push((l - 1) as f64 * table[l - 2]);
        }
        table.truncate(l_max as usize + 1);
        Self { table }
    }

    pub fn get(&self, l: u32) -> Option<f64> {
        self.table.get(l as usize).copied()
    }
}

/// Where the disorder average sits in the Gaussian prediction.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RhsReading {
    /// `Π a(k_l) · E[⟨S_1²⟩^{k/2}]`.
    #[default]
    PowerInside,
    /// `Π a(k_l) · (E⟨S_1²⟩)^{k/2}`.
    PowerOutside,
}

impl RhsReading {
    pub fn other(self) -> Self {
        match self {
            RhsReading::PowerInside => RhsReading::PowerOutside,
            RhsReading::PowerOutside => RhsReading::PowerInside,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CltReport {
    pub spec: Vec<u32>,
    pub n_spins: usize,
    pub profile: String,
    pub max_t: f64,
    pub reading: RhsReading,
    pub lhs: Estimate,
    pub rhs: Estimate,
    /// `|lhs − rhs|`, with the stderr of the paired difference.
    pub delta: Estimate,
    /// `delta / max_t`.
    pub ratio: f64,
    /// The same discrepancy under the other [`RhsReading`].
    pub delta_other_reading: Estimate,
}

/// Paired discrepancy from per-disorder `(⟨Π S_l^{k_l}⟩, ⟨S_1²⟩)` rows.
fn discrepancy(rows: &[(f64, f64)], spec: &ReplicaSpec, reading: RhsReading, seed: Option<u64>) -> (Estimate, Estimate, Estimate) {
    let a: f64 = spec.exponents().iter().map(|&k| gaussian_moment(k)).product();
    let half = f64::from(spec.total()) / 2.0;
    let lhs: Vec<f64> = rows.iter().map(|r| r.0).collect();
    let y2: Vec<f64> = rows.iter().map(|r| r.1).collect();
    let lhs_est = Estimate::from_samples(&lhs, seed);
    let (rhs, diffs): (Estimate, Vec<f64>) = match reading {
        RhsReading::PowerInside => {
            let rhs: Vec<f64> = y2.iter().map(|v| a * v.powf(half)).collect();
            let d = lhs.iter().zip(&rhs).map(|(l, r)| l - r).collect();
            (Estimate::from_samples(&rhs, seed), d)
        }
        RhsReading::PowerOutside => {
            // Delta method: linearise (mean y2)^{k/2} around the sample mean.
            let (m, se) = mean_and_stderr(&y2);
            let slope = a * half * m.powf(half - 1.0);
            let rhs = Estimate {
                value: a * m.powf(half),
                stderr: slope.abs() * se,
                n_samples: y2.len(),
                seed,
            };
            let d = lhs.iter().zip(&y2).map(|(l, v)| l - slope * (v - m) - rhs.value).collect();
            (rhs, d)
        }
    };
    let d = Estimate::from_samples(&diffs, seed);
    let delta = Estimate {
        value: (lhs_est.value - rhs.value).abs(),
        ..d
    };
    (lhs_est, rhs, delta)
}

/// Gaussian-moment discrepancy for `spec`. Both sides use the same disorder
/// draws. A spec with an odd exponent short-circuits: both sides are exactly
/// zero by the `Y → −Y` symmetry.
pub fn clt_discrepancy(
    spec: &ReplicaSpec,
    params: &ModelParams,
    weights: &WeightVector,
    plan: &DisorderPlan,
    reading: RhsReading,
) -> Result<CltReport> {
    let max_t = weights.max_abs();
    let base = |lhs, rhs, delta, other| CltReport {
        spec: spec.exponents().to_vec(),
        n_spins: params.n_spins,
        profile: weights.profile().label(),
        max_t,
        reading,
        lhs,
        rhs,
        delta,
        ratio: if max_t > 0.0 { delta.value / max_t } else { f64::NAN },
        delta_other_reading: other,
    };
    if spec.has_odd() {
        let zero = Estimate {
            value: 0.0,
            stderr: 0.0,
            n_samples: plan.n_disorders,
            seed: Some(plan.base_seed),
        };
        return Ok(base(zero, zero, zero, zero));
    }
    let obs = [Observable::ReplicaProduct(spec.clone()), Observable::YPower(2)];
    let rows: Vec<(f64, f64)> = per_disorder_values(&obs, params, weights, plan)?
        .into_iter()
        .map(|r| (r[0], r[1]))
        .collect();
    let seed = Some(plan.base_seed);
    let (lhs, rhs, delta) = discrepancy(&rows, spec, reading, seed);
    let (_, _, other) = discrepancy(&rows, spec, reading.other(), seed);
    Ok(base(lhs, rhs, delta, other))
}

/// `E(⟨Π S_l^{k_l}⟩ − Π a(k_l)⟨S_1²⟩^{k/2})²`.
pub fn clt2_discrepancy(spec: &ReplicaSpec, params: &ModelParams, weights: &WeightVector, plan: &DisorderPlan) -> Result<Estimate> {
    nu_disorder_variance(
        &Observable::ReplicaProduct(spec.clone()),
        &Observable::GaussianTarget(spec.clone()),
        params,
        weights,
        plan,
    )
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScalingSweep {
    pub rows: Vec<CltReport>,
    /// `log Δ` against `log max|t_i|`; absent when `max|t_i|` does not vary
    /// or some `Δ` is zero.
    pub slope: Option<LineFit>,
}

/// [`clt_discrepancy`] for every size in `sizes`, weights built from `profile`.
pub fn scaling_sweep(
    spec: &ReplicaSpec,
    beta: f64,
    h: f64,
    sizes: &[usize],
    profile: &WeightProfile,
    plan: &DisorderPlan,
    reading: RhsReading,
) -> Result<ScalingSweep> {
    let rows: Vec<CltReport> = sizes
        .par_iter()
        .map(|&n| {
            let params = ModelParams::new(beta, h, n)?;
            let weights = WeightVector::from_profile(profile, n)?;
            clt_discrepancy(spec, &params, &weights, plan, reading)
        })
        .collect::<Result<_>>()?;
    let x: Vec<f64> = rows.iter().map(|r| r.max_t.ln()).collect();
    let y: Vec<f64> = rows.iter().map(|r| r.delta.value.ln()).collect();
    let varies = x.iter().any(|v| (v - x[0]).abs() > 1e-12);
    let slope = (rows.len() >= 2 && varies && y.iter().all(|v| v.is_finite())).then(|| fit_line(&x, &y));
    Ok(ScalingSweep { rows, slope })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct YDiagnostics {
    /// `sup_y |F_Y(y) − Φ(y / √⟨Y²⟩)|`.
    pub ks_distance: f64,
    /// `⟨Y⁴⟩/⟨Y²⟩² − 3`.
    pub excess_kurtosis: f64,
    pub y2: f64,
    pub y4: f64,
    /// Atoms of the exact law, or sample count for MCMC.
    pub support: usize,
}

/// Largest exact law of `Y` that is built explicitly.
pub const MAX_Y_ATOMS: usize = 1 << 24;

/// Sorted atoms with equal locations merged.
fn merge_atoms(mut atoms: Vec<(f64, f64)>) -> Vec<(f64, f64)> {
    atoms.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut out: Vec<(f64, f64)> = Vec::with_capacity(atoms.len());
    for (x, p) in atoms {
        match out.last_mut() {
            Some(last) if (x - last.0).abs() <= 1e-12 * (1.0 + x.abs()) => last.1 += p,
            _ => out.push((x, p)),
        }
    }
    out
}

/// KS distance between a discrete law (sorted atoms) and `N(0, var)`.
fn ks_discrete(atoms: &[(f64, f64)], var: f64) -> f64 {
    let normal = Normal::new(0.0, var.sqrt()).expect("positive variance");
    let mut below = 0.0;
    let mut worst: f64 = 0.0;
    for &(x, p) in atoms {
        let phi = normal.cdf(x);
        worst = worst.max((below - phi).abs());
        below += p;
        worst = worst.max((below - phi).abs());
    }
    worst
}

/// Law of `Y = X − X′` for one disorder, with KS distance to the Gaussian of
/// the same-disorder variance and the excess kurtosis.
pub fn y_distribution_diagnostics(
    params: &ModelParams,
    weights: &WeightVector,
    disorder: &Disorder,
    engine: &Engine,
) -> Result<YDiagnostics> {
    if weights.len() != params.n_spins {
        return Err(Error::DimensionMismatch {
            expected: params.n_spins,
            actual: weights.len(),
        });
    }
    match engine {
        Engine::Exact => {
            if params.n_spins > crate::exact::PAIR_ENUMERATION_CEILING {
                return Err(Error::Capacity {
                    n_spins: params.n_spins,
                    ceiling: crate::exact::PAIR_ENUMERATION_CEILING,
                });
            }
            let table = exact_gibbs(params, disorder)?;
            let w = weights.weights();
            let x_atoms = merge_atoms(
                table
                    .probs()
                    .iter()
                    .enumerate()
                    .map(|(c, &p)| {
                        let x: f64 = w.iter().enumerate().map(|(i, t)| t * crate::model::spin_of(c, i)).sum();
                        (x, p)
                    })
                    .collect(),
            );
            if x_atoms.len() * x_atoms.len() > MAX_Y_ATOMS {
                return Err(Error::Unsupported(format!(
                    "exact law of Y would have {} atoms (max {MAX_Y_ATOMS})",
                    x_atoms.len() * x_atoms.len()
                )));
            }
            let mut pairs = Vec::with_capacity(x_atoms.len() * x_atoms.len());
            for &(a, pa) in &x_atoms {
                for &(b, pb) in &x_atoms {
                    pairs.push((a - b, pa * pb));
                }
            }
            let y_atoms = merge_atoms(pairs);
            let moment = |k: i32| -> f64 {
                let terms: Vec<f64> = y_atoms.iter().map(|(y, p)| p * y.powi(k)).collect();
                crate::stats::pairwise_sum(&terms)
            };
            let (y2, y4) = (moment(2), moment(4));
            Ok(YDiagnostics {
                ks_distance: ks_discrete(&y_atoms, y2),
                excess_kurtosis: y4 / (y2 * y2) - 3.0,
                y2,
                y4,
                support: y_atoms.len(),
            })
        }
        Engine::Mcmc(McmcSettings { schedule, rule }) => {
            let seed = disorder.seed().map_or(0, |s| derive_seed(s, u64::MAX));
            let run = run_replica_pair(params, disorder, weights, schedule, seed, *rule)?;
            let ys = &run.y.values;
            let y2 = mean(&ys.iter().map(|y| y * y).collect::<Vec<_>>());
            let y4 = mean(&ys.iter().map(|y| y.powi(4)).collect::<Vec<_>>());
            let p = 1.0 / ys.len() as f64;
            let atoms = merge_atoms(ys.iter().map(|&y| (y, p)).collect());
            Ok(YDiagnostics {
                ks_distance: ks_discrete(&atoms, y2),
                excess_kurtosis: y4 / (y2 * y2) - 3.0,
                y2,
                y4,
                support: ys.len(),
            })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::sample_disorder;

    #[test]
    fn gaussian_moments() {
        assert_eq!(gaussian_moment(0), 1.0);
        assert_eq!(gaussian_moment(1), 0.0);
        assert_eq!(gaussian_moment(2), 1.0);
        assert_eq!(gaussian_moment(4), 3.0);
        assert_eq!(gaussian_moment(8), 105.0);
        let t = GaussianMoments::new(10);
        let mut double_factorial = 1.0;
        for m in 1..=5u32 {
            double_factorial *= f64::from(2 * m - 1);
            assert_eq!(t.get(2 * m), Some(double_factorial));
            assert_eq!(t.get(2 * m - 1), Some(0.0));
        }
        assert_eq!(t.get(11), None);
    }

    #[test]
    fn free_spins_discrepancy_is_four_over_n() {
        for n in [4usize, 9] {
            let p = ModelParams::new(0.0, 0.0, n).unwrap();
            let plan = DisorderPlan::exact(3, 1).unwrap();
            let spec = ReplicaSpec::new(vec![4]).unwrap();
            let r = clt_discrepancy(&spec, &p, &WeightVector::uniform(n), &plan, RhsReading::PowerInside).unwrap();
            assert!((r.delta.value - 4.0 / n as f64).abs() < 1e-12);
            assert!((r.delta_other_reading.value - 4.0 / n as f64).abs() < 1e-12);
            let one_hot = clt_discrepancy(&spec, &p, &WeightVector::one_hot(n), &plan, RhsReading::PowerInside).unwrap();
            assert!((one_hot.delta.value - 4.0).abs() < 1e-12);
            assert_eq!(one_hot.ratio, one_hot.delta.value);
        }
    }

    #[test]
    fn odd_spec_short_circuits() {
        let p = ModelParams::new(0.2, 0.3, 6).unwrap();
        let plan = DisorderPlan::exact(3, 1).unwrap();
        let r = clt_discrepancy(&ReplicaSpec::new(vec![2, 1]).unwrap(), &p, &WeightVector::uniform(6), &plan, RhsReading::default()).unwrap();
        assert_eq!((r.lhs.value, r.rhs.value, r.delta.value), (0.0, 0.0, 0.0));
    }

    #[test]
    fn clt2_special_cases() {
        let n = 8;
        let plan = DisorderPlan::exact(4, 3).unwrap();
        let w = WeightVector::uniform(n);
        let p = ModelParams::new(0.2, 0.3, n).unwrap();
        let two = clt2_discrepancy(&ReplicaSpec::new(vec![2]).unwrap(), &p, &w, &plan).unwrap();
        assert!(two.value.abs() < 1e-24);
        let free = ModelParams::new(0.0, 0.0, n).unwrap();
        let four = clt2_discrepancy(&ReplicaSpec::new(vec![4]).unwrap(), &free, &w, &plan).unwrap();
        assert!((four.value - 16.0 / 64.0).abs() < 1e-12);
    }

    #[test]
    fn sweep_slope_for_free_spins() {
        // Δ = 4/N = 4 max|t|² for uniform weights.
        let plan = DisorderPlan::exact(2, 1).unwrap();
        let spec = ReplicaSpec::new(vec![4]).unwrap();
        let s = scaling_sweep(&spec, 0.0, 0.0, &[4, 6, 8], &WeightProfile::Uniform, &plan, RhsReading::default()).unwrap();
        let fit = s.slope.unwrap();
        assert!((fit.slope - 2.0).abs() < 1e-9);
        for r in &s.rows {
            assert!((r.max_t - 1.0 / (r.n_spins as f64).sqrt()).abs() < 1e-15);
        }
        let oh = scaling_sweep(&spec, 0.0, 0.0, &[4, 6], &WeightProfile::OneHot, &plan, RhsReading::default()).unwrap();
        assert!(oh.slope.is_none());
        assert!(oh.rows.iter().all(|r| r.max_t == 1.0 && r.delta.value > 1.0));
    }

    #[test]
    fn diagnostics_for_free_spins() {
        let n = 12;
        let p = ModelParams::new(0.0, 0.0, n).unwrap();
        let d = sample_disorder(1, n);
        let u = y_distribution_diagnostics(&p, &WeightVector::uniform(n), &d, &Engine::Exact).unwrap();
        assert!((u.excess_kurtosis + 1.0 / 12.0).abs() < 1e-12);
        assert_eq!(u.support, 2 * n + 1);
        let oh = y_distribution_diagnostics(&p, &WeightVector::one_hot(n), &d, &Engine::Exact).unwrap();
        assert_eq!(oh.support, 3);
        // Atoms −2, 0, 2 with masses 1/4, 1/2, 1/4 against N(0, 2).
        let phi = Normal::new(0.0, 2f64.sqrt()).unwrap().cdf(0.0);
        assert!((oh.ks_distance - (0.75 - phi)).abs() < 1e-12);
        assert!(oh.ks_distance > 2.0 * u.ks_distance);
    }
}
