//! Model objects: parameters, quenched couplings, spin configurations, the
//! Hamiltonian and the exact Gibbs measure for small systems.
//!
//! Configurations are encoded as integers `c` in `[0, 2^N)` with bit `i` set
//! iff `σ_i = +1`. Every table in the crate is indexed this way.

use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::seed::rng_from_seed;

/// Largest system size for which the Gibbs measure is enumerated exactly.
pub const ENUMERATION_CEILING: usize = 20;

/// Default upper limit on `β` for central-limit experiments.
pub const DEFAULT_BETA_CEILING: f64 = 0.25;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModelParams {
    pub beta: f64,
    pub h: f64,
    pub n_spins: usize,
}

impl ModelParams {
    /// `β = 0` is accepted: it is the independent-spin limit used as an
    /// analytic anchor throughout.
    pub fn new(beta: f64, h: f64, n_spins: usize) -> Result<Self> {
        if !beta.is_finite() || beta < 0.0 {
            return Err(Error::InvalidParameter(format!(
                "beta must be finite and non-negative, got {beta}"
            )));
        }
        if !h.is_finite() || h < 0.0 {
            return Err(Error::InvalidParameter(format!(
                "h must be finite and non-negative, got {h}"
            )));
        }
        if n_spins == 0 {
            return Err(Error::InvalidParameter("n_spins must be at least 1".into()));
        }
        Ok(Self { beta, h, n_spins })
    }

    pub fn with_n(self, n_spins: usize) -> Result<Self> {
        Self::new(self.beta, self.h, n_spins)
    }

    pub fn ensure_high_temperature(&self, ceiling: f64) -> Result<()> {
        if self.beta > ceiling {
            return Err(Error::InvalidParameter(format!(
                "beta = {} is above the high-temperature ceiling {ceiling}",
                self.beta
            )));
        }
        Ok(())
    }

    /// `β/√N`, the prefactor of the pair interaction.
    pub fn coupling_scale(&self) -> f64 {
        self.beta / (self.n_spins as f64).sqrt()
    }
}

/// Position of the pair `(i, j)`, `i < j`, in the row-major upper triangle.
#[inline]
pub fn pair_index(n: usize, i: usize, j: usize) -> usize {
    debug_assert!(i < j && j < n);
    i * (2 * n - i - 1) / 2 + (j - i - 1)
}

/// One realisation of the Gaussian couplings `g_ij`, `i < j`.
#[derive(Debug, Clone, PartialEq)]
pub struct Disorder {
    n_spins: usize,
    couplings: Vec<f64>,
    seed: Option<u64>,
}

impl Disorder {
    pub fn from_couplings(n_spins: usize, couplings: Vec<f64>) -> Result<Self> {
        let expected = n_spins * n_spins.saturating_sub(1) / 2;
        if couplings.len() != expected {
            return Err(Error::InvalidParameter(format!(
                "{n_spins} spins need {expected} couplings, got {}",
                couplings.len()
            )));
        }
        Ok(Self {
            n_spins,
            couplings,
            seed: None,
        })
    }

    pub fn n_spins(&self) -> usize {
        self.n_spins
    }

    pub fn couplings(&self) -> &[f64] {
        &self.couplings
    }

    pub fn seed(&self) -> Option<u64> {
        self.seed
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        match i.cmp(&j) {
            std::cmp::Ordering::Less => self.couplings[pair_index(self.n_spins, i, j)],
            std::cmp::Ordering::Greater => self.couplings[pair_index(self.n_spins, j, i)],
            std::cmp::Ordering::Equal => 0.0,
        }
    }
}

/// Draws `N(N−1)/2` i.i.d. standard normals in row-major pair order.
pub fn sample_disorder(seed: u64, n_spins: usize) -> Disorder {
    let mut rng = rng_from_seed(seed);
    let count = n_spins * n_spins.saturating_sub(1) / 2;
    let couplings = (0..count)
        .map(|_| StandardNormal.sample(&mut rng))
        .collect();
    Disorder {
        n_spins,
        couplings,
        seed: Some(seed),
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct SpinConfig {
    spins: Vec<i8>,
}

impl SpinConfig {
    pub fn new(spins: Vec<i8>) -> Result<Self> {
        if let Some(bad) = spins.iter().find(|&&s| s != 1 && s != -1) {
            return Err(Error::InvalidParameter(format!("spin value {bad} is not ±1")));
        }
        Ok(Self { spins })
    }

    pub fn from_code(code: u64, n_spins: usize) -> Self {
        let spins = (0..n_spins)
            .map(|i| if (code >> i) & 1 == 1 { 1 } else { -1 })
            .collect();
        Self { spins }
    }

    pub fn code(&self) -> u64 {
        self.spins
            .iter()
            .enumerate()
            .filter(|(_, &s)| s == 1)
            .fold(0u64, |c, (i, _)| c | (1 << i))
    }

    pub fn len(&self) -> usize {
        self.spins.len()
    }

    pub fn is_empty(&self) -> bool {
        self.spins.is_empty()
    }

    pub fn spins(&self) -> &[i8] {
        &self.spins
    }

    pub fn spin(&self, i: usize) -> f64 {
        f64::from(self.spins[i])
    }

    pub fn flipped(&self) -> Self {
        Self {
            spins: self.spins.iter().map(|s| -s).collect(),
        }
    }
}

/// Spin `i` of configuration code `c` as `±1.0`.
#[inline]
pub fn spin_of(code: usize, i: usize) -> f64 {
    if (code >> i) & 1 == 1 {
        1.0
    } else {
        -1.0
    }
}

/// A general Ising quadratic form `Σ_{i<j} J_ij σ_i σ_j + Σ_i h_i σ_i`.
///
/// This is `−H` for the SK Hamiltonian and for both interpolating paths; the
/// couplings are stored already scaled.
#[derive(Debug, Clone, PartialEq)]
pub struct IsingForm {
    n: usize,
    /// Dense symmetric `n × n`, zero diagonal.
    couplings: Vec<f64>,
    fields: Vec<f64>,
}

impl IsingForm {
    pub fn new(n: usize) -> Self {
        Self {
            n,
            couplings: vec![0.0; n * n],
            fields: vec![0.0; n],
        }
    }

    /// `−H_N` of the SK model.
    pub fn sk(params: &ModelParams, disorder: &Disorder) -> Result<Self> {
        check_dims(params.n_spins, disorder.n_spins())?;
        let n = params.n_spins;
        let scale = params.coupling_scale();
        let mut form = Self::new(n);
        for i in 0..n {
            for j in i + 1..n {
                form.set_coupling(i, j, scale * disorder.get(i, j));
            }
            form.fields[i] = params.h;
        }
        Ok(form)
    }

    pub fn n_spins(&self) -> usize {
        self.n
    }

    pub fn set_coupling(&mut self, i: usize, j: usize, value: f64) {
        self.couplings[i * self.n + j] = value;
        self.couplings[j * self.n + i] = value;
    }

    pub fn coupling(&self, i: usize, j: usize) -> f64 {
        self.couplings[i * self.n + j]
    }

    pub fn set_field(&mut self, i: usize, value: f64) {
        self.fields[i] = value;
    }

    pub fn field(&self, i: usize) -> f64 {
        self.fields[i]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.couplings[i * self.n..(i + 1) * self.n]
    }

    /// Evaluates the form in a fixed order: pairs row-major, then fields.
    pub fn evaluate(&self, spins: &[i8]) -> f64 {
        let n = self.n;
        let mut pairs = 0.0;
        for i in 0..n {
            let si = f64::from(spins[i]);
            let row = self.row(i);
            for j in i + 1..n {
                pairs += row[j] * si * f64::from(spins[j]);
            }
        }
        let mut field = 0.0;
        for i in 0..n {
            field += self.fields[i] * f64::from(spins[i]);
        }
        pairs + field
    }

    fn evaluate_code(&self, code: usize) -> f64 {
        let spins: Vec<i8> = (0..self.n).map(|i| spin_of(code, i) as i8).collect();
        self.evaluate(&spins)
    }

    /// `−H(c)` for every configuration code, by Gray-code enumeration with
    /// O(N) incremental updates and a periodic exact refresh.
    pub fn enumerate(&self, ceiling: usize) -> Result<Vec<f64>> {
        let n = self.n;
        if n > ceiling {
            return Err(Error::Capacity {
                n_spins: n,
                ceiling,
            });
        }
        let size = 1usize << n;
        let mut out = vec![0.0; size];
        if n <= 4 {
            for (c, slot) in out.iter_mut().enumerate() {
                *slot = self.evaluate_code(c);
            }
            return Ok(out);
        }
        const REFRESH: usize = 4096;
        let mut spins = vec![-1i8; n];
        let mut local = vec![0.0; n];
        let refresh_local = |spins: &[i8], local: &mut [f64]| {
            for (i, li) in local.iter_mut().enumerate() {
                *li = self
                    .row(i)
                    .iter()
                    .zip(spins)
                    .map(|(j, &s)| j * f64::from(s))
                    .sum();
            }
        };
        refresh_local(&spins, &mut local);
        let mut energy = self.evaluate(&spins);
        let mut code = 0usize;
        out[0] = energy;
        for step in 1..size {
            let k = step.trailing_zeros() as usize;
            let old = f64::from(spins[k]);
            energy -= 2.0 * old * (local[k] + self.fields[k]);
            spins[k] = -spins[k];
            let row = self.row(k);
            for (lj, jk) in local.iter_mut().zip(row) {
                *lj -= 2.0 * old * jk;
            }
            code ^= 1 << k;
            if step % REFRESH == 0 {
                energy = self.evaluate(&spins);
                refresh_local(&spins, &mut local);
            }
            out[code] = energy;
        }
        Ok(out)
    }
}

fn check_dims(expected: usize, actual: usize) -> Result<()> {
    if expected != actual {
        return Err(Error::DimensionMismatch { expected, actual });
    }
    Ok(())
}

/// `−H_N(σ)`, the exponent of the Gibbs weight.
pub fn energy(params: &ModelParams, disorder: &Disorder, config: &SpinConfig) -> Result<f64> {
    check_dims(params.n_spins, config.len())?;
    Ok(IsingForm::sk(params, disorder)?.evaluate(config.spins()))
}

/// Exact Gibbs probabilities of one Hamiltonian, indexed by configuration code.
#[derive(Debug, Clone, PartialEq)]
pub struct GibbsTable {
    params: ModelParams,
    disorder_seed: Option<u64>,
    log_z: f64,
    probs: Vec<f64>,
}

impl GibbsTable {
    /// Normalises `exp(e_c)` with a max shift.
    pub fn from_neg_energies(
        params: ModelParams,
        disorder_seed: Option<u64>,
        neg_energies: &[f64],
    ) -> Self {
        let max = neg_energies
            .iter()
            .copied()
            .fold(f64::NEG_INFINITY, f64::max);
        let mut probs: Vec<f64> = neg_energies.iter().map(|&e| (e - max).exp()).collect();
        let total: f64 = crate::stats::pairwise_sum(&probs);
        let log_z = max + total.ln();
        for p in &mut probs {
            *p /= total;
        }
        Self {
            params,
            disorder_seed,
            log_z,
            probs,
        }
    }

    pub fn params(&self) -> &ModelParams {
        &self.params
    }

    pub fn n_spins(&self) -> usize {
        self.params.n_spins
    }

    pub fn disorder_seed(&self) -> Option<u64> {
        self.disorder_seed
    }

    pub fn log_z(&self) -> f64 {
        self.log_z
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    /// `Σ_c p(c) f(c)` with `f` given on configuration codes.
    pub fn expect_by_code(&self, f: impl Fn(usize) -> f64) -> f64 {
        let terms: Vec<f64> = self
            .probs
            .iter()
            .enumerate()
            .map(|(c, &p)| p * f(c))
            .collect();
        crate::stats::pairwise_sum(&terms)
    }
}

pub fn exact_gibbs(params: &ModelParams, disorder: &Disorder) -> Result<GibbsTable> {
    exact_gibbs_with_ceiling(params, disorder, ENUMERATION_CEILING)
}

pub fn exact_gibbs_with_ceiling(
    params: &ModelParams,
    disorder: &Disorder,
    ceiling: usize,
) -> Result<GibbsTable> {
    let energies = IsingForm::sk(params, disorder)?.enumerate(ceiling)?;
    Ok(GibbsTable::from_neg_energies(
        *params,
        disorder.seed(),
        &energies,
    ))
}

/// `⟨f⟩` for a single replica.
pub fn single_replica_expectation(table: &GibbsTable, f: impl Fn(&SpinConfig) -> f64) -> f64 {
    let n = table.n_spins();
    table.expect_by_code(|c| f(&SpinConfig::from_code(c as u64, n)))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params(beta: f64, h: f64, n: usize) -> ModelParams {
        ModelParams::new(beta, h, n).unwrap()
    }

    #[test]
    fn single_spin_has_no_couplings() {
        let d = sample_disorder(7, 1);
        assert!(d.couplings().is_empty());
        let e = energy(&params(0.3, 0.4, 1), &d, &SpinConfig::new(vec![1]).unwrap()).unwrap();
        assert_eq!(e, 0.4);
    }

    #[test]
    fn disorder_is_deterministic() {
        assert_eq!(sample_disorder(7, 4), sample_disorder(7, 4));
        assert_ne!(sample_disorder(7, 4), sample_disorder(8, 4));
    }

    #[test]
    fn generator_law_of_large_numbers() {
        let d = sample_disorder(7, 400);
        let g = d.couplings();
        assert_eq!(g.len(), 79_800);
        let m = g.len() as f64;
        let mean = g.iter().sum::<f64>() / m;
        let var = g.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (m - 1.0);
        assert!(mean.abs() < 4.0 / m.sqrt(), "mean {mean}");
        assert!((var - 1.0).abs() < 0.05, "var {var}");
    }

    #[test]
    fn two_spin_hand_evaluation() {
        let d = Disorder::from_couplings(2, vec![0.5]).unwrap();
        let e = energy(&params(1.0, 0.1, 2), &d, &SpinConfig::new(vec![1, 1]).unwrap()).unwrap();
        assert!((e - (0.5 / 2f64.sqrt() + 0.2)).abs() < 1e-15);
    }

    #[test]
    fn global_flip_symmetry_at_zero_field() {
        let p = params(0.7, 0.0, 6);
        let d = sample_disorder(3, 6);
        for code in 0..64u64 {
            let s = SpinConfig::from_code(code, 6);
            assert_eq!(energy(&p, &d, &s).unwrap(), energy(&p, &d, &s.flipped()).unwrap());
        }
    }

    #[test]
    fn dimension_mismatch_is_reported() {
        let d = sample_disorder(1, 3);
        let err = energy(&params(0.2, 0.0, 3), &d, &SpinConfig::from_code(0, 4)).unwrap_err();
        assert!(matches!(err, Error::DimensionMismatch { .. }));
        assert!(IsingForm::sk(&params(0.2, 0.0, 4), &d).is_err());
    }

    #[test]
    fn code_round_trip() {
        for code in 0..32u64 {
            assert_eq!(SpinConfig::from_code(code, 5).code(), code);
        }
        assert!(SpinConfig::new(vec![1, 0]).is_err());
    }

    #[test]
    fn gray_code_matches_direct_evaluation() {
        let p = params(0.9, 0.3, 13);
        let d = sample_disorder(11, 13);
        let form = IsingForm::sk(&p, &d).unwrap();
        let fast = form.enumerate(ENUMERATION_CEILING).unwrap();
        for (c, &e) in fast.iter().enumerate().step_by(37) {
            let direct = energy(&p, &d, &SpinConfig::from_code(c as u64, 13)).unwrap();
            assert!((e - direct).abs() < 1e-11, "code {c}: {e} vs {direct}");
        }
    }

    #[test]
    fn uniform_measure_near_zero_beta() {
        let t = exact_gibbs(&params(1e-12, 0.0, 3), &sample_disorder(5, 3)).unwrap();
        for &p in t.probs() {
            assert!((p - 0.125).abs() < 1e-9);
        }
    }

    #[test]
    fn four_configuration_table() {
        let (beta, h, g) = (0.2, 0.3, 0.8);
        let d = Disorder::from_couplings(2, vec![g]).unwrap();
        let t = exact_gibbs(&params(beta, h, 2), &d).unwrap();
        let w = |s1: f64, s2: f64| (beta / 2f64.sqrt() * g * s1 * s2 + h * (s1 + s2)).exp();
        let raw = [w(-1., -1.), w(1., -1.), w(-1., 1.), w(1., 1.)];
        let z: f64 = raw.iter().sum();
        for (c, r) in raw.iter().enumerate() {
            assert!((t.probs()[c] - r / z).abs() < 1e-15);
        }
        assert!((t.log_z() - z.ln()).abs() < 1e-14);
    }

    #[test]
    fn normalisation_and_log_z() {
        let p = params(0.25, 0.3, 12);
        let d = sample_disorder(2, 12);
        let t = exact_gibbs(&p, &d).unwrap();
        let total: f64 = t.probs().iter().sum();
        assert!((total - 1.0).abs() < 1e-12);
        let form = IsingForm::sk(&p, &d).unwrap();
        for c in [0usize, 17, 4095] {
            let e = form.evaluate(SpinConfig::from_code(c as u64, 12).spins());
            assert!((t.probs()[c] - (e - t.log_z()).exp()).abs() < 1e-13);
        }
    }

    #[test]
    fn capacity_error_above_ceiling() {
        let p = params(0.2, 0.0, 5);
        let err = exact_gibbs_with_ceiling(&p, &sample_disorder(1, 5), 4).unwrap_err();
        assert!(matches!(err, Error::Capacity { n_spins: 5, ceiling: 4 }));
    }

    #[test]
    fn large_exponents_do_not_overflow() {
        let p = params(0.0, 60.0, 10);
        let t = exact_gibbs(&p, &sample_disorder(1, 10)).unwrap();
        assert!(t.log_z().is_finite());
        assert!((t.probs()[1023] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn single_replica_expectations() {
        let t = exact_gibbs(&params(0.3, 0.0, 5), &sample_disorder(4, 5)).unwrap();
        assert!((single_replica_expectation(&t, |_| 1.0) - 1.0).abs() < 1e-15);
        assert!(single_replica_expectation(&t, |s| s.spin(0)).abs() < 1e-15);
        let free = exact_gibbs(&params(1e-12, 0.4, 5), &sample_disorder(4, 5)).unwrap();
        let m = single_replica_expectation(&free, |s| s.spin(0));
        assert!((m - 0.4f64.tanh()).abs() < 1e-9);
    }

    #[test]
    fn product_of_spins_factorises_at_zero_beta() {
        let t = exact_gibbs(&params(0.0, 0.4, 5), &sample_disorder(4, 5)).unwrap();
        let v = single_replica_expectation(&t, |s| s.spin(0) * s.spin(2) * s.spin(3));
        assert!((v - 0.4f64.tanh().powi(3)).abs() < 1e-14);
    }
}
