//! Single-spin-flip sampling of the Gibbs measure beyond the enumeration
//! ceiling, with replica pairs on shared disorder and batch-means errors.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Disorder, IsingForm, ModelParams, SpinConfig};
use crate::seed::{derive_seed, rng_from_seed};
use crate::stats::{mean, mean_and_stderr, Estimate};
use crate::weights::WeightVector;

pub const DEFAULT_BURN_IN: usize = 1_000;

/// Cached local fields are rebuilt from scratch this often (in sweeps).
pub const CACHE_CHECK_INTERVAL: u64 = 64;

/// Drift tolerated silently at a cache check; the cache is then refreshed.
pub const CACHE_REFRESH_TOLERANCE: f64 = 1e-9;

/// Drift that signals a broken incremental update.
pub const CACHE_FAILURE_TOLERANCE: f64 = 1e-6;

pub const MIN_BATCHES: usize = 8;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum UpdateRule {
    /// Heat bath: resample `σ_i` from its conditional law.
    #[default]
    HeatBath,
    Metropolis,
}

/// One Markov chain: configuration, local-field cache and its own RNG.
#[derive(Debug, Clone)]
pub struct ChainState {
    spins: Vec<i8>,
    /// `Σ_j J_ij σ_j + h_i`.
    fields: Vec<f64>,
    sweeps: u64,
    rng: ChaCha8Rng,
}

impl ChainState {
    pub fn new(form: &IsingForm, initial: SpinConfig, seed: u64) -> Result<Self> {
        if initial.len() != form.n_spins() {
            return Err(Error::DimensionMismatch {
                expected: form.n_spins(),
                actual: initial.len(),
            });
        }
        let spins = initial.spins().to_vec();
        let fields = local_fields(form, &spins);
        Ok(Self {
            spins,
            fields,
            sweeps: 0,
            rng: rng_from_seed(seed),
        })
    }

    /// Starts from a uniformly random configuration drawn from the chain's RNG.
    pub fn random(form: &IsingForm, seed: u64) -> Self {
        let mut rng = rng_from_seed(seed);
        let spins: Vec<i8> = (0..form.n_spins())
            .map(|_| if rng.random::<bool>() { 1 } else { -1 })
            .collect();
        let fields = local_fields(form, &spins);
        Self {
            spins,
            fields,
            sweeps: 0,
            rng,
        }
    }

    pub fn config(&self) -> SpinConfig {
        SpinConfig::new(self.spins.clone()).expect("chain spins are ±1")
    }

    pub fn spins(&self) -> &[i8] {
        &self.spins
    }

    pub fn fields(&self) -> &[f64] {
        &self.fields
    }

    pub fn sweeps(&self) -> u64 {
        self.sweeps
    }

    /// Recomputes the fields; fails if the cache drifted by more than
    /// [`CACHE_FAILURE_TOLERANCE`], otherwise refreshes it and returns the drift.
    pub fn check_cache(&mut self, form: &IsingForm) -> Result<f64> {
        let fresh = local_fields(form, &self.spins);
        let deviation = fresh
            .iter()
            .zip(&self.fields)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        if deviation > CACHE_FAILURE_TOLERANCE {
            return Err(Error::CacheIntegrity { deviation });
        }
        self.fields = fresh;
        Ok(deviation)
    }

    /// `X = Σ t_i σ_i`.
    pub fn weighted_sum(&self, weights: &WeightVector) -> f64 {
        weights
            .weights()
            .iter()
            .zip(&self.spins)
            .map(|(t, &s)| t * f64::from(s))
            .sum()
    }
}

fn local_fields(form: &IsingForm, spins: &[i8]) -> Vec<f64> {
    (0..form.n_spins())
        .map(|i| {
            let pairs: f64 = form.row(i).iter().zip(spins).map(|(j, &s)| j * f64::from(s)).sum();
            pairs + form.field(i)
        })
        .collect()
}

/// `P(σ_i = +1 | rest)` for local field `f`.
fn heat_bath_up(f: f64) -> f64 {
    1.0 / (1.0 + (-2.0 * f).exp())
}

/// Probability that site `i` ends up as `new` given it was `old`.
fn site_move_probability(rule: UpdateRule, field: f64, old: i8, new: i8) -> f64 {
    match rule {
        UpdateRule::HeatBath => {
            let up = heat_bath_up(field);
            if new == 1 {
                up
            } else {
                1.0 - up
            }
        }
        UpdateRule::Metropolis => {
            let accept = (-2.0 * f64::from(old) * field).exp().min(1.0);
            if new == old {
                1.0 - accept
            } else {
                accept
            }
        }
    }
}

/// Sweeps chains through the sites `0..N` in a fixed order.
#[derive(Debug, Clone)]
pub struct Sampler {
    form: IsingForm,
    rule: UpdateRule,
}

impl Sampler {
    pub fn new(params: &ModelParams, disorder: &Disorder, rule: UpdateRule) -> Result<Self> {
        Ok(Self::from_form(IsingForm::sk(params, disorder)?, rule))
    }

    pub fn from_form(form: IsingForm, rule: UpdateRule) -> Self {
        Self { form, rule }
    }

    pub fn form(&self) -> &IsingForm {
        &self.form
    }

    pub fn rule(&self) -> UpdateRule {
        self.rule
    }

    pub fn new_chain(&self, seed: u64) -> ChainState {
        ChainState::random(&self.form, seed)
    }

    /// `N` single-site updates; every [`CACHE_CHECK_INTERVAL`] sweeps the
    /// field cache is verified.
    pub fn sweep(&self, state: &mut ChainState) -> Result<()> {
        if state.spins.len() != self.form.n_spins() {
            return Err(Error::DimensionMismatch {
                expected: self.form.n_spins(),
                actual: state.spins.len(),
            });
        }
        for i in 0..state.spins.len() {
            let old = state.spins[i];
            let u: f64 = state.rng.random();
            let new = match self.rule {
                UpdateRule::HeatBath => {
                    if u < heat_bath_up(state.fields[i]) {
                        1
                    } else {
                        -1
                    }
                }
                UpdateRule::Metropolis => {
                    if u < site_move_probability(UpdateRule::Metropolis, state.fields[i], old, -old) {
                        -old
                    } else {
                        old
                    }
                }
            };
            if new != old {
                state.spins[i] = new;
                let delta = f64::from(new - old);
                for (fj, jij) in state.fields.iter_mut().zip(self.form.row(i)) {
                    *fj += jij * delta;
                }
            }
        }
        state.sweeps += 1;
        if state.sweeps.is_multiple_of(CACHE_CHECK_INTERVAL) {
            state.check_cache(&self.form)?;
        }
        Ok(())
    }
}

/// One heat-bath sweep of the SK Gibbs measure.
pub fn glauber_sweep(state: &mut ChainState, params: &ModelParams, disorder: &Disorder) -> Result<()> {
    Sampler::new(params, disorder, UpdateRule::HeatBath)?.sweep(state)
}

/// Single-site kernel at `site` as a dense row-stochastic `2^N × 2^N` matrix.
pub fn site_transition_matrix(form: &IsingForm, site: usize, rule: UpdateRule) -> Result<Vec<f64>> {
    let n = form.n_spins();
    if n > 10 {
        return Err(Error::Capacity { n_spins: n, ceiling: 10 });
    }
    let size = 1usize << n;
    let mut p = vec![0.0; size * size];
    for c in 0..size {
        let spins: Vec<i8> = (0..n).map(|i| if c >> i & 1 == 1 { 1 } else { -1 }).collect();
        let field = local_fields(form, &spins)[site];
        let old = spins[site];
        let up = c | 1 << site;
        let down = c & !(1 << site);
        p[c * size + up] += site_move_probability(rule, field, old, 1);
        p[c * size + down] += site_move_probability(rule, field, old, -1);
    }
    Ok(p)
}

/// The kernel of one full sweep: `P_0 P_1 ⋯ P_{N−1}`.
pub fn scan_transition_matrix(form: &IsingForm, rule: UpdateRule) -> Result<Vec<f64>> {
    let n = form.n_spins();
    let size = 1usize << n;
    let mut total: Vec<f64> = (0..size * size).map(|k| if k / size == k % size { 1.0 } else { 0.0 }).collect();
    for site in 0..n {
        let p = site_transition_matrix(form, site, rule)?;
        let mut next = vec![0.0; size * size];
        for a in 0..size {
            for b in 0..size {
                let tab = total[a * size + b];
                if tab == 0.0 {
                    continue;
                }
                for c in 0..size {
                    next[a * size + c] += tab * p[b * size + c];
                }
            }
        }
        total = next;
    }
    Ok(total)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Schedule {
    pub sweeps: usize,
    pub burn_in: usize,
    /// Sweeps between measurements.
    pub thin: usize,
}

impl Schedule {
    pub fn new(sweeps: usize, burn_in: usize, thin: usize) -> Result<Self> {
        let s = Self { sweeps, burn_in, thin };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if self.sweeps <= self.burn_in || self.thin == 0 {
            return Err(Error::InvalidParameter(format!(
                "schedule needs sweeps > burn_in and thin >= 1, got sweeps={}, burn_in={}, thin={}",
                self.sweeps, self.burn_in, self.thin
            )));
        }
        Ok(())
    }

    pub fn n_measurements(&self) -> usize {
        (self.sweeps - self.burn_in) / self.thin
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SampleSeries {
    pub values: Vec<f64>,
    pub burn_in: usize,
    pub thin: usize,
    pub seed: Option<u64>,
}

impl SampleSeries {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Sweep index of each measurement.
    pub fn sweep_indices(&self) -> impl Iterator<Item = usize> + '_ {
        (1..=self.values.len()).map(|k| self.burn_in + k * self.thin)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            values: self.values.iter().map(|&v| f(v)).collect(),
            ..self.clone()
        }
    }
}

/// Series recorded by [`run_replica_pair`].
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReplicaPairRun {
    /// `(X¹ + X²)/2`.
    pub x: SampleSeries,
    /// `Y = X¹ − X²`.
    pub y: SampleSeries,
    /// `R_{1,2}`.
    pub overlap: SampleSeries,
}

/// Two independent chains on the same disorder, seeded from
/// `derive_seed(seed, 0)` and `derive_seed(seed, 1)`, advanced in lockstep.
pub fn run_replica_pair(
    params: &ModelParams,
    disorder: &Disorder,
    weights: &WeightVector,
    schedule: &Schedule,
    seed: u64,
    rule: UpdateRule,
) -> Result<ReplicaPairRun> {
    schedule.validate()?;
    if weights.len() != params.n_spins {
        return Err(Error::DimensionMismatch {
            expected: params.n_spins,
            actual: weights.len(),
        });
    }
    let sampler = Sampler::new(params, disorder, rule)?;
    let mut a = sampler.new_chain(derive_seed(seed, 0));
    let mut b = sampler.new_chain(derive_seed(seed, 1));
    for _ in 0..schedule.burn_in {
        sampler.sweep(&mut a)?;
        sampler.sweep(&mut b)?;
    }
    let m = schedule.n_measurements();
    let (mut xs, mut ys, mut rs) = (Vec::with_capacity(m), Vec::with_capacity(m), Vec::with_capacity(m));
    let n = params.n_spins as f64;
    for _ in 0..m {
        for _ in 0..schedule.thin {
            sampler.sweep(&mut a)?;
            sampler.sweep(&mut b)?;
        }
        let (xa, xb) = (a.weighted_sum(weights), b.weighted_sum(weights));
        xs.push(0.5 * (xa + xb));
        ys.push(xa - xb);
        let dot: i64 = a.spins.iter().zip(&b.spins).map(|(&p, &q)| i64::from(p * q)).sum();
        rs.push(dot as f64 / n);
    }
    let series = |values| SampleSeries {
        values,
        burn_in: schedule.burn_in,
        thin: schedule.thin,
        seed: Some(seed),
    };
    Ok(ReplicaPairRun {
        x: series(xs),
        y: series(ys),
        overlap: series(rs),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BatchMeans {
    pub estimate: Estimate,
    pub n_batches: usize,
    /// stderr with `2·n_batches` over stderr with `n_batches`; near 1 when
    /// batches are long compared with the autocorrelation time.
    pub stability_ratio: Option<f64>,
}

fn batch_stderr(values: &[f64], n_batches: usize) -> (f64, f64) {
    let len = values.len() / n_batches;
    let means: Vec<f64> = values[..len * n_batches].chunks(len).map(mean).collect();
    mean_and_stderr(&means)
}

/// Mean and stderr from `n_batches` contiguous batch means (the tail beyond a
/// multiple of `n_batches` is dropped).
pub fn batch_means(series: &SampleSeries, n_batches: usize) -> Result<BatchMeans> {
    if n_batches < MIN_BATCHES {
        return Err(Error::InvalidParameter(format!(
            "batch means needs at least {MIN_BATCHES} batches, got {n_batches}"
        )));
    }
    if series.len() < n_batches {
        return Err(Error::SeriesTooShort {
            len: series.len(),
            batches: n_batches,
        });
    }
    let (value, stderr) = batch_stderr(&series.values, n_batches);
    let stability_ratio = (series.len() >= 2 * n_batches).then(|| {
        let (_, doubled) = batch_stderr(&series.values, 2 * n_batches);
        if stderr == 0.0 {
            1.0
        } else {
            doubled / stderr
        }
    });
    Ok(BatchMeans {
        estimate: Estimate {
            value,
            stderr,
            n_samples: (series.len() / n_batches) * n_batches,
            seed: series.seed,
        },
        n_batches,
        stability_ratio,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{exact_gibbs, sample_disorder};
    use rand_distr::{Distribution, StandardNormal};

    #[test]
    fn detailed_balance_of_a_scan() {
        for rule in [UpdateRule::HeatBath, UpdateRule::Metropolis] {
            for n in 1..=4 {
                let p = ModelParams::new(0.9, 0.35, n).unwrap();
                let d = sample_disorder(11 + n as u64, n);
                let g = exact_gibbs(&p, &d).unwrap();
                let form = IsingForm::sk(&p, &d).unwrap();
                let m = scan_transition_matrix(&form, rule).unwrap();
                let size = 1 << n;
                for row in m.chunks(size) {
                    assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
                }
                for c in 0..size {
                    let gp: f64 = (0..size).map(|a| g.probs()[a] * m[a * size + c]).sum();
                    assert!((gp - g.probs()[c]).abs() < 1e-10, "{rule:?} N={n} c={c}");
                }
            }
        }
    }

    #[test]
    fn incremental_fields_match_recomputation() {
        let n = 30;
        let p = ModelParams::new(0.25, 0.2, n).unwrap();
        let s = Sampler::new(&p, &sample_disorder(1, n), UpdateRule::HeatBath).unwrap();
        let mut c = s.new_chain(4);
        for _ in 0..(CACHE_CHECK_INTERVAL - 1) {
            s.sweep(&mut c).unwrap();
        }
        let fresh = local_fields(s.form(), c.spins());
        for (a, b) in fresh.iter().zip(c.fields()) {
            assert!((a - b).abs() < CACHE_REFRESH_TOLERANCE);
        }
    }

    #[test]
    fn corrupted_cache_is_reported() {
        let n = 5;
        let p = ModelParams::new(0.25, 0.2, n).unwrap();
        let s = Sampler::new(&p, &sample_disorder(1, n), UpdateRule::HeatBath).unwrap();
        let mut c = s.new_chain(4);
        c.fields[2] += 1e-3;
        assert!(matches!(c.check_cache(s.form()), Err(Error::CacheIntegrity { .. })));
    }

    #[test]
    fn free_spins_follow_their_fields() {
        let n = 20;
        for h in [0.0f64, 0.4] {
            let p = ModelParams::new(0.0, h, n).unwrap();
            let s = Sampler::new(&p, &sample_disorder(2, n), UpdateRule::HeatBath).unwrap();
            let mut c = s.new_chain(9);
            let mut m = Vec::new();
            for _ in 0..4000 {
                s.sweep(&mut c).unwrap();
                m.push(c.spins().iter().map(|&x| f64::from(x)).sum::<f64>() / n as f64);
            }
            let series = SampleSeries {
                values: m,
                burn_in: 0,
                thin: 1,
                seed: None,
            };
            let e = batch_means(&series, 20).unwrap().estimate;
            assert!(e.z_score(h.tanh()).abs() < 3.0, "{e:?}");
        }
    }

    #[test]
    fn replica_pair_at_infinite_temperature() {
        let n = 16;
        let p = ModelParams::new(0.0, 0.0, n).unwrap();
        let w = WeightVector::uniform(n);
        let run = run_replica_pair(&p, &sample_disorder(3, n), &w, &Schedule::new(6000, 100, 1).unwrap(), 5, UpdateRule::HeatBath).unwrap();
        assert_eq!(run.y.len(), 5900);
        let y = batch_means(&run.y, 20).unwrap().estimate;
        assert!(y.z_score(0.0).abs() < 3.0);
        let r = batch_means(&run.overlap, 20).unwrap().estimate;
        assert!(r.z_score(0.0).abs() < 3.0);
        let r2 = batch_means(&run.overlap.map(|v| v * v), 20).unwrap().estimate;
        assert!(r2.z_score(1.0 / n as f64).abs() < 3.0, "{r2:?}");
    }

    #[test]
    fn replica_pair_matches_enumeration() {
        let n = 10;
        let p = ModelParams::new(0.2, 0.3, n).unwrap();
        let d = sample_disorder(21, n);
        let w = WeightVector::uniform(n);
        let table = exact_gibbs(&p, &d).unwrap();
        let xm = crate::exact::x_moments(&table, &w, 2).unwrap();
        let y2 = crate::exact::y_moments(&xm, 2).unwrap()[2];
        let run = run_replica_pair(&p, &d, &w, &Schedule::new(5000, 200, 1).unwrap(), 8, UpdateRule::HeatBath).unwrap();
        let x = batch_means(&run.x, 20).unwrap().estimate;
        assert!(x.z_score(xm.mean()).abs() < 4.0, "{x:?} vs {}", xm.mean());
        let yy = batch_means(&run.y.map(|v| v * v), 20).unwrap().estimate;
        assert!(yy.z_score(y2).abs() < 4.0, "{yy:?} vs {y2}");
    }

    #[test]
    fn schedule_validation() {
        assert!(Schedule::new(10, 10, 1).is_err());
        assert!(Schedule::new(10, 2, 0).is_err());
        assert_eq!(Schedule::new(107, 7, 3).unwrap().n_measurements(), 33);
    }

    #[test]
    fn batch_means_edge_cases() {
        let constant = SampleSeries {
            values: vec![2.5; 100],
            burn_in: 0,
            thin: 1,
            seed: None,
        };
        let b = batch_means(&constant, 10).unwrap();
        assert_eq!(b.estimate.value, 2.5);
        assert_eq!(b.estimate.stderr, 0.0);
        assert!(batch_means(&constant, 4).is_err());
        let short = SampleSeries {
            values: vec![1.0; 5],
            ..constant
        };
        assert!(matches!(batch_means(&short, 8), Err(Error::SeriesTooShort { .. })));
    }

    #[test]
    fn batch_means_on_white_noise() {
        let mut rng = rng_from_seed(77);
        let values: Vec<f64> = (0..10_000).map(|_| StandardNormal.sample(&mut rng)).collect();
        let s = SampleSeries {
            values,
            burn_in: 0,
            thin: 1,
            seed: Some(77),
        };
        let b = batch_means(&s, 25).unwrap();
        assert!((b.estimate.stderr / 0.01 - 1.0).abs() < 0.3, "{}", b.estimate.stderr);
        assert!((b.stability_ratio.unwrap() - 1.0).abs() < 0.5);
    }

    #[test]
    fn runs_are_reproducible() {
        let n = 12;
        let p = ModelParams::new(0.2, 0.3, n).unwrap();
        let d = sample_disorder(1, n);
        let w = WeightVector::uniform(n);
        let sch = Schedule::new(300, 50, 2).unwrap();
        let a = run_replica_pair(&p, &d, &w, &sch, 3, UpdateRule::Metropolis).unwrap();
        let b = run_replica_pair(&p, &d, &w, &sch, 3, UpdateRule::Metropolis).unwrap();
        assert_eq!(a, b);
    }
}
