//! Smart-path interpolation between the SK Gibbs measure (`t = 1`) and a
//! measure where the last one or two spins are decoupled (`t = 0`).
//!
//! With `σ_N` the last spin, the one-coordinate path scales every coupling
//! `g_{iN}` by `√t` and adds a cavity field `β√(1−t) z √q σ_N`. The
//! two-coordinate path does the same for `σ_{N−1}` and `σ_N` together
//! (including `g_{(N−1)N}`) with independent `z₁, z₂`.
//!
//! `ν_t(f) = E⟨f⟩_t` averages over the couplings and the cavity Gaussians.
//! The inner Gibbs average is exact: every observable is a
//! [`ReplicaPoly`] evaluated on the correlator table of the path Hamiltonian.
//! The outer average follows an [`ExpectationPlan`]: a full tensor
//! Gauss–Hermite rule over all Gaussians (`N ≤ 3`) or Monte Carlo with
//! per-sample seeds. Samples are shared across every `t` and every polynomial
//! evaluated in one pass, so finite differences and analytic derivatives see
//! common random numbers.

use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exact::walsh_hadamard;
use crate::model::{pair_index, Disorder, GibbsTable, IsingForm, ModelParams, SpinConfig, ENUMERATION_CEILING};
use crate::quadrature::GaussHermite;
use crate::replica::{CompiledPoly, ReplicaPoly};
use crate::seed::{derive_seed, rng_from_seed};
use crate::stats::{fit_line, mean_and_stderr, Estimate, LineFit};
use crate::weights::WeightVector;

/// Largest replica count an evaluated polynomial may carry.
pub const MAX_ARITY: usize = 6;

/// Full tensor quadrature over the couplings is only offered up to this size.
pub const QUADRATURE_MAX_SPINS: usize = 3;

pub const DEFAULT_QUADRATURE_NODES: usize = 16;

pub const DEFAULT_FD_STEP: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CavityPath {
    One,
    Two,
}

impl CavityPath {
    pub fn n_cavity_gaussians(self) -> usize {
        match self {
            CavityPath::One => 1,
            CavityPath::Two => 2,
        }
    }

    fn min_spins(self) -> usize {
        match self {
            CavityPath::One => 1,
            CavityPath::Two => 2,
        }
    }

    /// Whether the pair `(i, j)`, `i < j`, is scaled by `√t`.
    fn is_cavity_pair(self, n: usize, j: usize) -> bool {
        match self {
            CavityPath::One => j + 1 == n,
            CavityPath::Two => j + 2 >= n,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum CavityGaussians {
    One(f64),
    /// `(z₁, z₂)`, attached to `σ_N` and `σ_{N−1}` respectively.
    Two(f64, f64),
}

impl CavityGaussians {
    fn as_vec(self) -> Vec<f64> {
        match self {
            CavityGaussians::One(z) => vec![z],
            CavityGaussians::Two(z1, z2) => vec![z1, z2],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PathPoint {
    pub t: f64,
    pub cavity: CavityGaussians,
    pub q: f64,
}

impl PathPoint {
    pub fn new(t: f64, cavity: CavityGaussians, q: f64) -> Result<Self> {
        check_t(t)?;
        if !(0.0..=1.0).contains(&q) {
            return Err(Error::InvalidParameter(format!("q must lie in [0, 1], got {q}")));
        }
        Ok(Self { t, cavity, q })
    }
}

fn check_t(t: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::InvalidParameter(format!("t must lie in [0, 1], got {t}")));
    }
    Ok(())
}

/// `−H_{N,t}` as a quadratic form. `z` holds one or two cavity Gaussians.
pub fn path_form(
    path: CavityPath,
    params: &ModelParams,
    disorder: &Disorder,
    t: f64,
    z: &[f64],
    q: f64,
) -> Result<IsingForm> {
    check_t(t)?;
    let n = params.n_spins;
    if disorder.n_spins() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            actual: disorder.n_spins(),
        });
    }
    if n < path.min_spins() || z.len() != path.n_cavity_gaussians() {
        return Err(Error::InvalidParameter(format!(
            "{path:?} path needs at least {} spins and {} cavity Gaussians",
            path.min_spins(),
            path.n_cavity_gaussians()
        )));
    }
    let scale = params.coupling_scale();
    let sqrt_t = t.sqrt();
    let mut form = IsingForm::new(n);
    for i in 0..n {
        for j in i + 1..n {
            let base = scale * disorder.get(i, j);
            let value = if path.is_cavity_pair(n, j) { sqrt_t * base } else { base };
            form.set_coupling(i, j, value);
        }
        form.set_field(i, params.h);
    }
    let cavity_scale = params.beta * (1.0 - t).sqrt();
    for (k, &zk) in z.iter().enumerate() {
        let site = n - 1 - k;
        form.set_field(site, params.h + cavity_scale * zk * q.sqrt());
    }
    Ok(form)
}

fn path_energy(
    path: CavityPath,
    point: &PathPoint,
    params: &ModelParams,
    disorder: &Disorder,
    config: &SpinConfig,
) -> Result<f64> {
    if config.len() != params.n_spins {
        return Err(Error::DimensionMismatch {
            expected: params.n_spins,
            actual: config.len(),
        });
    }
    let z = point.cavity.as_vec();
    Ok(path_form(path, params, disorder, point.t, &z, point.q)?.evaluate(config.spins()))
}

/// `−H_{N,t}(σ)` on the one-coordinate path.
pub fn path_energy_1(point: &PathPoint, params: &ModelParams, disorder: &Disorder, config: &SpinConfig) -> Result<f64> {
    if !matches!(point.cavity, CavityGaussians::One(_)) {
        return Err(Error::InvalidParameter("one-coordinate path takes a single z".into()));
    }
    path_energy(CavityPath::One, point, params, disorder, config)
}

/// `−H_{N,t}(σ)` on the two-coordinate path.
pub fn path_energy_2(point: &PathPoint, params: &ModelParams, disorder: &Disorder, config: &SpinConfig) -> Result<f64> {
    if !matches!(point.cavity, CavityGaussians::Two(..)) {
        return Err(Error::InvalidParameter("two-coordinate path takes (z1, z2)".into()));
    }
    path_energy(CavityPath::Two, point, params, disorder, config)
}

/// Exact `G_t` for one draw of the Gaussians.
pub fn path_gibbs(
    path: CavityPath,
    params: &ModelParams,
    disorder: &Disorder,
    t: f64,
    z: &[f64],
    q: f64,
) -> Result<GibbsTable> {
    let e = path_form(path, params, disorder, t, z, q)?.enumerate(ENUMERATION_CEILING)?;
    Ok(GibbsTable::from_neg_energies(*params, disorder.seed(), &e))
}

/// A named function on `Σ_N^n`.
#[derive(Debug, Clone, PartialEq)]
pub struct ReplicaObservable {
    name: String,
    poly: ReplicaPoly,
}

impl ReplicaObservable {
    pub fn new(name: impl Into<String>, poly: ReplicaPoly) -> Self {
        Self {
            name: name.into(),
            poly,
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn arity(&self) -> usize {
        self.poly.arity()
    }

    pub fn n_spins(&self) -> usize {
        self.poly.n_spins()
    }

    pub fn poly(&self) -> &ReplicaPoly {
        &self.poly
    }

    pub fn evaluate(&self, configs: &[SpinConfig]) -> Result<f64> {
        self.poly.evaluate(configs)
    }

    pub fn squared(&self) -> Self {
        Self::new(format!("({})^2", self.name), &self.poly * &self.poly)
    }
}

/// Names accepted by [`catalog_observable`].
pub const OBSERVABLE_CATALOG: &[&str] = &[
    "one",
    "spin-last",
    "cavity-pair",
    "sbar-first-last",
    "sbar-mean-last",
    "sbar-mean-pairs",
    "sbar-last-sq",
    "overlap",
    "overlap-centered-sq",
    "s1-sq",
    "three-replica",
    "four-replica",
    "overlap-product",
    "s1sq-s2sq",
];

/// Builds a catalogue observable on `N` spins. Spins are 0-based: `σ_1` is
/// site 0, `σ_N` site `N−1`, `σ_{N−1}` site `N−2`.
///
/// * `one`: 1
/// * `spin-last`: `σ_N¹`
/// * `cavity-pair`: `σ_N¹ σ_{N−1}¹`
/// * `sbar-first-last`: `σ̄_1 σ̄_N` with `σ̄ = σ¹ − σ²`
/// * `sbar-mean-last`: `(N−1)^{−1} Σ_{i<N} σ̄_i σ̄_N`; sites `1..N−1` are
///   exchangeable along both paths' first block, so this has the same `ν_t`
///   as `sbar-first-last` with far less disorder noise
/// * `sbar-mean-pairs`: `(N(N−1)/2)^{−1} Σ_{i<j} σ̄_i σ̄_j`; equal to the two
///   above under `ν = ν_1`, where every site is exchangeable
/// * `sbar-last-sq`: `(σ̄_N)²`
/// * `overlap`: `R_{1,2}`
/// * `overlap-centered-sq`: `(R_{1,2} − q)²`
/// * `s1-sq`: `S_1²`
/// * `three-replica`: `σ_1¹ σ_N² σ_N³`
/// * `four-replica`: `σ_N¹ σ_N² σ_1³ σ_1⁴`
/// * `overlap-product`: `(R_{1,2} − q)(R_{3,4} − q)`
/// * `s1sq-s2sq`: `S_1² S_2²`
pub fn catalog_observable(name: &str, n: usize, weights: &WeightVector, q: f64) -> Result<ReplicaObservable> {
    if n < 2 {
        return Err(Error::InvalidParameter("catalogue observables need N >= 2".into()));
    }
    if weights.len() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            actual: weights.len(),
        });
    }
    let (last, prev) = (n - 1, n - 2);
    let spin = |arity, r, i| ReplicaPoly::spin(arity, n, r, i);
    let sbar = |i| &spin(2, 0, i) - &spin(2, 1, i);
    let centered = |arity, a, b| &ReplicaPoly::overlap(arity, n, a, b, 0..n) - &ReplicaPoly::constant(arity, n, q);
    let s = |arity, l: usize| ReplicaPoly::weighted_difference(arity, weights.weights(), 2 * l, 2 * l + 1);
    let poly = match name {
        "one" => ReplicaPoly::constant(1, n, 1.0),
        "spin-last" => spin(1, 0, last),
        "cavity-pair" => &spin(1, 0, last) * &spin(1, 0, prev),
        "sbar-first-last" => &sbar(0) * &sbar(last),
        "sbar-mean-last" => {
            let mut acc = ReplicaPoly::zero(2, n);
            for i in 0..last {
                acc = &acc + &sbar(i);
            }
            &(&acc * &sbar(last)) * (1.0 / last as f64)
        }
        "sbar-mean-pairs" => {
            let mut acc = ReplicaPoly::zero(2, n);
            for i in 0..n {
                for j in i + 1..n {
                    acc = &acc + &(&sbar(i) * &sbar(j));
                }
            }
            &acc * (2.0 / (n * (n - 1)) as f64)
        }
        "sbar-last-sq" => &sbar(last) * &sbar(last),
        "overlap" => ReplicaPoly::overlap(2, n, 0, 1, 0..n),
        "overlap-centered-sq" => &centered(2, 0, 1) * &centered(2, 0, 1),
        "s1-sq" => &s(2, 0) * &s(2, 0),
        "three-replica" => &(&spin(3, 0, 0) * &spin(3, 1, last)) * &spin(3, 2, last),
        "four-replica" => {
            let a = &spin(4, 0, last) * &spin(4, 1, last);
            let b = &spin(4, 2, 0) * &spin(4, 3, 0);
            &a * &b
        }
        "overlap-product" => &centered(4, 0, 1) * &centered(4, 2, 3),
        "s1sq-s2sq" => {
            let a = &s(4, 0) * &s(4, 0);
            let b = &s(4, 1) * &s(4, 1);
            &a * &b
        }
        other => {
            return Err(Error::InvalidParameter(format!(
                "unknown observable '{other}' (known: {})",
                OBSERVABLE_CATALOG.join(", ")
            )))
        }
    };
    Ok(ReplicaObservable::new(name, poly))
}

/// `β² [Σ_{l<l'≤n} F(l,l') − n Σ_{l≤n} F(l,n+1) + n(n+1)/2 F(n+1,n+2)] · f`,
/// the common shape of every interpolation derivative (0-based labels).
fn replica_combination(f: &ReplicaPoly, beta: f64, factor: impl Fn(usize, usize, usize) -> ReplicaPoly) -> ReplicaPoly {
    let n = f.arity();
    let arity = n + 2;
    let nf = n as f64;
    let mut sum = ReplicaPoly::zero(arity, f.n_spins());
    for l in 0..n {
        for l2 in l + 1..n {
            sum = &sum + &factor(arity, l, l2);
        }
    }
    for l in 0..n {
        sum = &sum + &(&factor(arity, l, n) * -nf);
    }
    sum = &sum + &(&factor(arity, n, n + 1) * (nf * (nf + 1.0) / 2.0));
    &(&f.with_arity(arity) * &sum) * (beta * beta)
}

/// `σ_s^a σ_s^b (R^{sites}_{a,b} − q)`.
fn cavity_overlap_factor(arity: usize, n: usize, site: usize, sites: std::ops::Range<usize>, q: f64, a: usize, b: usize) -> ReplicaPoly {
    let pair = &ReplicaPoly::spin(arity, n, a, site) * &ReplicaPoly::spin(arity, n, b, site);
    let centered = &ReplicaPoly::overlap(arity, n, a, b, sites) - &ReplicaPoly::constant(arity, n, q);
    &pair * &centered
}

/// The integrand of `ν_t′(f)` on the one-coordinate path, on `n + 2` replicas.
pub fn derivative_poly_1(f: &ReplicaPoly, beta: f64, q: f64) -> ReplicaPoly {
    let n = f.n_spins();
    replica_combination(f, beta, |arity, a, b| cavity_overlap_factor(arity, n, n - 1, 0..n - 1, q, a, b))
}

/// The three parts `I`, `II`, `III` of `ν_t′(f)` on the two-coordinate path.
#[derive(Debug, Clone, PartialEq)]
pub struct DerivativePolys2 {
    pub i: ReplicaPoly,
    pub ii: ReplicaPoly,
    pub iii: ReplicaPoly,
}

pub fn derivative_polys_2(f: &ReplicaPoly, beta: f64, q: f64) -> DerivativePolys2 {
    let n = f.n_spins();
    let (last, prev) = (n - 1, n - 2);
    let i = replica_combination(f, beta, |arity, a, b| cavity_overlap_factor(arity, n, last, 0..n - 2, q, a, b));
    let ii = replica_combination(f, beta, |arity, a, b| cavity_overlap_factor(arity, n, prev, 0..n - 2, q, a, b));
    let iii = replica_combination(f, beta, |arity, a, b| {
        let four = &(&ReplicaPoly::spin(arity, n, a, last) * &ReplicaPoly::spin(arity, n, b, last))
            * &(&ReplicaPoly::spin(arity, n, a, prev) * &ReplicaPoly::spin(arity, n, b, prev));
        &four * (1.0 / n as f64)
    });
    DerivativePolys2 { i, ii, iii }
}

/// How the outer expectation over Gaussians is taken.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum ExpectationPlan {
    /// Tensor Gauss–Hermite over every coupling and cavity Gaussian.
    Quadrature { nodes: usize },
    /// Sample `s` draws the couplings from the stream `derive_seed(seed, s)`;
    /// the cavity Gaussians are integrated with a `z_nodes`-point rule per
    /// coordinate. With `antithetic`, samples come in pairs `(g, −g)` and the
    /// standard error is computed over pair means.
    MonteCarlo {
        samples: usize,
        seed: u64,
        antithetic: bool,
        z_nodes: usize,
    },
}

impl Default for ExpectationPlan {
    fn default() -> Self {
        ExpectationPlan::Quadrature {
            nodes: DEFAULT_QUADRATURE_NODES,
        }
    }
}

/// One evaluation request: polynomial `poly` at time `t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Probe {
    pub t: f64,
    pub poly: usize,
}

/// Builds path Hamiltonians from a flat Gaussian vector
/// `[g_ij in pair order…, z…]` and evaluates probes on their correlator tables.
struct PathKernel<'a> {
    path: CavityPath,
    params: ModelParams,
    q: f64,
    polys: &'a [CompiledPoly],
    /// Distinct times with the probe indices evaluated at each.
    schedule: Vec<(f64, Vec<usize>)>,
    probes: &'a [Probe],
    /// For small N: `features[c * dim + k]` with `−H = Σ_k a_k(t) G_k φ_k(c) + h Σσ`.
    features: Option<Vec<f64>>,
    field_sums: Vec<f64>,
}

/// Feature tables are used up to this size; larger systems go through the
/// Gray-code enumerator.
const FEATURE_MAX_SPINS: usize = 8;

impl<'a> PathKernel<'a> {
    fn new(path: CavityPath, params: ModelParams, q: f64, polys: &'a [CompiledPoly], probes: &'a [Probe]) -> Result<Self> {
        let n = params.n_spins;
        if n < path.min_spins().max(2) {
            return Err(Error::InvalidParameter(format!("{path:?} path needs at least 2 spins")));
        }
        if n > ENUMERATION_CEILING {
            return Err(Error::Capacity {
                n_spins: n,
                ceiling: ENUMERATION_CEILING,
            });
        }
        for p in polys {
            if p.arity() > MAX_ARITY {
                return Err(Error::Unsupported(format!(
                    "observable on {} replicas (max {MAX_ARITY})",
                    p.arity()
                )));
            }
        }
        let mut schedule: Vec<(f64, Vec<usize>)> = Vec::new();
        for (k, probe) in probes.iter().enumerate() {
            check_t(probe.t)?;
            if probe.poly >= polys.len() {
                return Err(Error::InvalidParameter(format!("probe {k} names polynomial {}", probe.poly)));
            }
            match schedule.iter_mut().find(|(t, _)| *t == probe.t) {
                Some((_, list)) => list.push(k),
                None => schedule.push((probe.t, vec![k])),
            }
        }
        let size = 1usize << n;
        let field_sums = (0..size)
            .map(|c| params.h * (0..n).map(|i| crate::model::spin_of(c, i)).sum::<f64>())
            .collect();
        let features = (n <= FEATURE_MAX_SPINS).then(|| {
            let dim = gaussian_dim(path, n);
            let scale = params.coupling_scale();
            let cav = params.beta * q.sqrt();
            let mut f = vec![0.0; size * dim];
            for c in 0..size {
                let s = |i| crate::model::spin_of(c, i);
                let row = &mut f[c * dim..(c + 1) * dim];
                for i in 0..n {
                    for j in i + 1..n {
                        row[pair_index(n, i, j)] = scale * s(i) * s(j);
                    }
                }
                for k in 0..path.n_cavity_gaussians() {
                    row[n * (n - 1) / 2 + k] = cav * s(n - 1 - k);
                }
            }
            f
        });
        Ok(Self {
            path,
            params,
            q,
            polys,
            schedule,
            probes,
            features,
            field_sums,
        })
    }

    fn dim(&self) -> usize {
        gaussian_dim(self.path, self.params.n_spins)
    }

    /// Fills `out[k]` with the value of probe `k` for Gaussian vector `g`.
    /// With `skip_endpoint`, probes at `t = 1` are left untouched.
    fn evaluate(&self, g: &[f64], skip_endpoint: bool, scratch: &mut Vec<f64>, out: &mut [f64]) -> Result<()> {
        let n = self.params.n_spins;
        let size = 1usize << n;
        let n_pairs = n * (n - 1) / 2;
        scratch.resize(size, 0.0);
        for (t, list) in &self.schedule {
            if skip_endpoint && *t == 1.0 {
                continue;
            }
            match &self.features {
                Some(features) => {
                    let dim = self.dim();
                    let (st, sc) = (t.sqrt(), (1.0 - t).sqrt());
                    let mut coef = vec![0.0; dim];
                    for i in 0..n {
                        for j in i + 1..n {
                            let k = pair_index(n, i, j);
                            coef[k] = if self.path.is_cavity_pair(n, j) { st * g[k] } else { g[k] };
                        }
                    }
                    for k in n_pairs..dim {
                        coef[k] = sc * g[k];
                    }
                    for (c, e) in scratch.iter_mut().enumerate() {
                        let row = &features[c * dim..(c + 1) * dim];
                        let mut acc = self.field_sums[c];
                        for (a, b) in row.iter().zip(&coef) {
                            acc += a * b;
                        }
                        *e = acc;
                    }
                }
                None => {
                    let disorder = Disorder::from_couplings(n, g[..n_pairs].to_vec())?;
                    let form = path_form(self.path, &self.params, &disorder, *t, &g[n_pairs..], self.q)?;
                    *scratch = form.enumerate(ENUMERATION_CEILING)?;
                }
            }
            let max = scratch.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for e in scratch.iter_mut() {
                *e = (*e - max).exp();
                total += *e;
            }
            for e in scratch.iter_mut() {
                *e /= total;
            }
            walsh_hadamard(scratch);
            for (mask, x) in scratch.iter_mut().enumerate() {
                if mask.count_ones() % 2 == 1 {
                    *x = -*x;
                }
            }
            for &k in list {
                out[k] = self.polys[self.probes[k].poly].expectation(scratch);
            }
        }
        Ok(())
    }
}

impl PathKernel<'_> {
    /// Probe values for fixed couplings, averaged over the cavity Gaussians
    /// with a tensor rule. The endpoint `t = 1` does not see the cavity field
    /// and neither does `q = 0`, so those are evaluated once.
    fn evaluate_z_averaged(&self, couplings: &[f64], rule: &GaussHermite, scratch: &mut Vec<f64>, out: &mut [f64]) -> Result<()> {
        let nz = self.path.n_cavity_gaussians();
        let mut g = couplings.to_vec();
        g.resize(couplings.len() + nz, 0.0);
        self.evaluate(&g, false, scratch, out)?;
        if self.q == 0.0 {
            return Ok(());
        }
        let mut acc = vec![Compensated::default(); out.len()];
        let mut values = vec![0.0; out.len()];
        let mut idx = vec![0usize; nz];
        for _ in 0..rule.len().pow(nz as u32) {
            let mut w = 1.0;
            for (k, &i) in idx.iter().enumerate() {
                g[couplings.len() + k] = rule.nodes()[i];
                w *= rule.weights()[i];
            }
            self.evaluate(&g, true, scratch, &mut values)?;
            for (a, v) in acc.iter_mut().zip(&values) {
                a.add(w * v);
            }
            for i in idx.iter_mut() {
                *i += 1;
                if *i < rule.len() {
                    break;
                }
                *i = 0;
            }
        }
        for (k, a) in acc.iter().enumerate() {
            if self.probes[k].t != 1.0 {
                out[k] = a.value();
            }
        }
        Ok(())
    }
}

fn gaussian_dim(path: CavityPath, n: usize) -> usize {
    n * (n - 1) / 2 + path.n_cavity_gaussians()
}

/// Neumaier-compensated accumulator.
#[derive(Debug, Clone, Copy, Default)]
struct Compensated {
    sum: f64,
    comp: f64,
}

impl Compensated {
    fn add(&mut self, x: f64) {
        let t = self.sum + x;
        if self.sum.abs() >= x.abs() {
            self.comp += (self.sum - t) + x;
        } else {
            self.comp += (x - t) + self.sum;
        }
        self.sum = t;
    }

    fn value(&self) -> f64 {
        self.sum + self.comp
    }
}

/// Evaluates `probes` under `plan` and reduces each sample through `derive`
/// (probe values → `n_out` outputs). Returns one [`Estimate`] per output.
#[allow(clippy::too_many_arguments)]
pub fn evaluate_probes(
    path: CavityPath,
    params: &ModelParams,
    q: f64,
    plan: &ExpectationPlan,
    polys: &[CompiledPoly],
    probes: &[Probe],
    n_out: usize,
    derive: impl Fn(&[f64], &mut [f64]) + Sync,
) -> Result<Vec<Estimate>> {
    let kernel = PathKernel::new(path, *params, q, polys, probes)?;
    let dim = kernel.dim();
    match *plan {
        ExpectationPlan::Quadrature { nodes } => {
            if params.n_spins > QUADRATURE_MAX_SPINS {
                return Err(Error::Capacity {
                    n_spins: params.n_spins,
                    ceiling: QUADRATURE_MAX_SPINS,
                });
            }
            let rule = GaussHermite::new(nodes)?;
            let total_points = nodes.pow(dim as u32);
            // One task per node of the first coordinate; partial sums are
            // combined in node order.
            let partials: Vec<Result<Vec<Compensated>>> = (0..nodes)
                .into_par_iter()
                .map(|first| {
                    let mut acc = vec![Compensated::default(); n_out];
                    let mut g = vec![0.0; dim];
                    let mut idx = vec![0usize; dim];
                    idx[0] = first;
                    let mut scratch = Vec::new();
                    let mut values = vec![0.0; probes.len()];
                    let mut derived = vec![0.0; n_out];
                    let inner = total_points / nodes;
                    for _ in 0..inner {
                        let mut w = 1.0;
                        for d in 0..dim {
                            g[d] = rule.nodes()[idx[d]];
                            w *= rule.weights()[idx[d]];
                        }
                        kernel.evaluate(&g, false, &mut scratch, &mut values)?;
                        derive(&values, &mut derived);
                        for (a, v) in acc.iter_mut().zip(&derived) {
                            a.add(w * v);
                        }
                        for d in 1..dim {
                            idx[d] += 1;
                            if idx[d] < nodes {
                                break;
                            }
                            idx[d] = 0;
                        }
                    }
                    Ok(acc)
                })
                .collect();
            let mut totals = vec![Compensated::default(); n_out];
            for part in partials {
                for (tot, p) in totals.iter_mut().zip(part?) {
                    tot.add(p.value());
                }
            }
            Ok(totals
                .iter()
                .map(|c| Estimate {
                    value: c.value(),
                    stderr: 0.0,
                    n_samples: total_points,
                    seed: None,
                })
                .collect())
        }
        ExpectationPlan::MonteCarlo {
            samples,
            seed,
            antithetic,
            z_nodes,
        } => {
            let rule = GaussHermite::new(z_nodes)?;
            let n_pairs = dim - path.n_cavity_gaussians();
            if samples < 2 || (antithetic && samples % 2 == 1) {
                return Err(Error::InvalidParameter(format!(
                    "Monte Carlo plan needs at least 2 samples (an even count when antithetic), got {samples}"
                )));
            }
            let draws = if antithetic { samples / 2 } else { samples };
            let per_draw: Vec<Result<Vec<f64>>> = (0..draws)
                .into_par_iter()
                .map(|s| {
                    let mut rng = rng_from_seed(derive_seed(seed, s as u64));
                    let g: Vec<f64> = (0..n_pairs).map(|_| StandardNormal.sample(&mut rng)).collect();
                    let mut scratch = Vec::new();
                    let mut values = vec![0.0; probes.len()];
                    let mut derived = vec![0.0; n_out];
                    kernel.evaluate_z_averaged(&g, &rule, &mut scratch, &mut values)?;
                    derive(&values, &mut derived);
                    if antithetic {
                        let neg: Vec<f64> = g.iter().map(|x| -x).collect();
                        let mut other = vec![0.0; n_out];
                        kernel.evaluate_z_averaged(&neg, &rule, &mut scratch, &mut values)?;
                        derive(&values, &mut other);
                        for (d, o) in derived.iter_mut().zip(other) {
                            *d = 0.5 * (*d + o);
                        }
                    }
                    Ok(derived)
                })
                .collect();
            let rows: Vec<Vec<f64>> = per_draw.into_iter().collect::<Result<_>>()?;
            Ok((0..n_out)
                .map(|j| {
                    let col: Vec<f64> = rows.iter().map(|r| r[j]).collect();
                    let (value, stderr) = mean_and_stderr(&col);
                    Estimate {
                        value,
                        stderr,
                        n_samples: samples,
                        seed: Some(seed),
                    }
                })
                .collect())
        }
    }
}

fn identity(values: &[f64], out: &mut [f64]) {
    out.copy_from_slice(values);
}

fn check_observable(obs: &ReplicaObservable, params: &ModelParams) -> Result<()> {
    if obs.n_spins() != params.n_spins {
        return Err(Error::DimensionMismatch {
            expected: params.n_spins,
            actual: obs.n_spins(),
        });
    }
    if obs.arity() > MAX_ARITY {
        return Err(Error::Unsupported(format!("observable on {} replicas (max {MAX_ARITY})", obs.arity())));
    }
    Ok(())
}

/// `ν_t(f) = E⟨f⟩_t`.
pub fn nu_t(
    observable: &ReplicaObservable,
    t: f64,
    path: CavityPath,
    params: &ModelParams,
    q: f64,
    plan: &ExpectationPlan,
) -> Result<Estimate> {
    check_observable(observable, params)?;
    let polys = [observable.poly().compile()];
    let probes = [Probe { t, poly: 0 }];
    Ok(evaluate_probes(path, params, q, plan, &polys, &probes, 1, identity)?[0])
}

fn check_derivative_t(t: f64) -> Result<()> {
    if !(0.0..1.0).contains(&t) {
        return Err(Error::InvalidParameter(format!(
            "the derivative formula holds for 0 <= t < 1, got t = {t}"
        )));
    }
    Ok(())
}

fn check_derivative_arity(obs: &ReplicaObservable) -> Result<()> {
    if obs.arity() + 2 > MAX_ARITY {
        return Err(Error::Unsupported(format!(
            "derivative of an observable on {} replicas needs {} (max {MAX_ARITY})",
            obs.arity(),
            obs.arity() + 2
        )));
    }
    Ok(())
}

/// `ν_t′(f)` from the one-coordinate derivative formula.
pub fn analytic_derivative_1(
    observable: &ReplicaObservable,
    t: f64,
    params: &ModelParams,
    q: f64,
    plan: &ExpectationPlan,
) -> Result<Estimate> {
    check_derivative_t(t)?;
    check_observable(observable, params)?;
    check_derivative_arity(observable)?;
    let polys = [derivative_poly_1(observable.poly(), params.beta, q).compile()];
    let probes = [Probe { t, poly: 0 }];
    Ok(evaluate_probes(CavityPath::One, params, q, plan, &polys, &probes, 1, identity)?[0])
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DerivativeComponents {
    pub total: Estimate,
    pub i: Estimate,
    pub ii: Estimate,
    pub iii: Estimate,
}

/// `ν_t′(f) = I + II + III` from the two-coordinate derivative formula.
pub fn analytic_derivative_2(
    observable: &ReplicaObservable,
    t: f64,
    params: &ModelParams,
    q: f64,
    plan: &ExpectationPlan,
) -> Result<DerivativeComponents> {
    check_derivative_t(t)?;
    check_observable(observable, params)?;
    check_derivative_arity(observable)?;
    let d = derivative_polys_2(observable.poly(), params.beta, q);
    let polys = [d.i.compile(), d.ii.compile(), d.iii.compile()];
    let probes: Vec<Probe> = (0..3).map(|poly| Probe { t, poly }).collect();
    let est = evaluate_probes(CavityPath::Two, params, q, plan, &polys, &probes, 4, |v, out| {
        out[0] = v[0] + v[1] + v[2];
        out[1..4].copy_from_slice(&v[..3]);
    })?;
    Ok(DerivativeComponents {
        total: est[0],
        i: est[1],
        ii: est[2],
        iii: est[3],
    })
}

/// One row of a derivative check.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DerivativeCheck {
    pub observable: String,
    pub t: f64,
    pub nu: Estimate,
    /// Central difference with the configured step.
    pub finite_difference: Estimate,
    /// `(4 D(h/2) − D(h)) / 3`.
    pub richardson: Estimate,
    pub analytic: Estimate,
    /// Paired `finite_difference − analytic`.
    pub difference: Estimate,
    /// `(I, II, III)` on the two-coordinate path.
    pub components: Option<[Estimate; 3]>,
}

impl DerivativeCheck {
    /// Agreement test: absolute tolerance for deterministic plans, `k`
    /// pooled standard errors for Monte Carlo ones.
    pub fn passes(&self, abs_tol: f64, k_stderr: f64) -> bool {
        let d = self.difference.value.abs();
        if self.difference.stderr == 0.0 {
            d < abs_tol
        } else {
            d < k_stderr * self.difference.stderr
        }
    }
}

/// Compares central finite differences of `ν_t` against the analytic
/// derivative for every observable at every `t` in one pass over the samples.
pub fn check_derivative(
    observables: &[ReplicaObservable],
    path: CavityPath,
    ts: &[f64],
    params: &ModelParams,
    q: f64,
    plan: &ExpectationPlan,
    step: f64,
) -> Result<Vec<DerivativeCheck>> {
    if !(step > 0.0) {
        return Err(Error::InvalidParameter(format!("finite-difference step must be positive, got {step}")));
    }
    for &t in ts {
        check_derivative_t(t)?;
        if t - step < 0.0 || t + step > 1.0 {
            return Err(Error::InvalidParameter(format!(
                "t = {t} with step {step} leaves [0, 1]"
            )));
        }
    }
    let mut polys = Vec::new();
    // Per observable: ν poly index and the derivative poly indices.
    let mut layout = Vec::new();
    for obs in observables {
        check_observable(obs, params)?;
        check_derivative_arity(obs)?;
        let nu_idx = polys.len();
        polys.push(obs.poly().compile());
        let deriv: Vec<usize> = match path {
            CavityPath::One => {
                polys.push(derivative_poly_1(obs.poly(), params.beta, q).compile());
                vec![nu_idx + 1]
            }
            CavityPath::Two => {
                let d = derivative_polys_2(obs.poly(), params.beta, q);
                polys.extend([d.i.compile(), d.ii.compile(), d.iii.compile()]);
                vec![nu_idx + 1, nu_idx + 2, nu_idx + 3]
            }
        };
        layout.push((nu_idx, deriv));
    }
    // Probe order per (observable, t): ν(t), ν(t±h), ν(t±h/2), derivative parts.
    let offsets = [0.0, -step, step, -0.5 * step, 0.5 * step];
    let mut probes = Vec::new();
    for (nu_idx, deriv) in &layout {
        for &t in ts {
            for off in offsets {
                probes.push(Probe { t: t + off, poly: *nu_idx });
            }
            for &d in deriv {
                probes.push(Probe { t, poly: d });
            }
        }
    }
    let n_deriv = layout[0].1.len();
    let per_block = offsets.len() + n_deriv;
    // Outputs per block: ν, FD, Richardson, analytic, FD − analytic, parts.
    let out_per_block = 5 + if n_deriv > 1 { n_deriv } else { 0 };
    let n_blocks = observables.len() * ts.len();
    let est = evaluate_probes(path, params, q, plan, &polys, &probes, n_blocks * out_per_block, |v, out| {
        for b in 0..n_blocks {
            let p = &v[b * per_block..(b + 1) * per_block];
            let o = &mut out[b * out_per_block..(b + 1) * out_per_block];
            let fd = (p[2] - p[1]) / (2.0 * step);
            let fd_half = (p[4] - p[3]) / step;
            let analytic: f64 = p[5..].iter().sum();
            o[0] = p[0];
            o[1] = fd;
            o[2] = (4.0 * fd_half - fd) / 3.0;
            o[3] = analytic;
            o[4] = fd - analytic;
            if n_deriv > 1 {
                o[5..].copy_from_slice(&p[5..]);
            }
        }
    })?;
    let mut rows = Vec::with_capacity(n_blocks);
    for (oi, obs) in observables.iter().enumerate() {
        for (ti, &t) in ts.iter().enumerate() {
            let b = oi * ts.len() + ti;
            let e = &est[b * out_per_block..(b + 1) * out_per_block];
            rows.push(DerivativeCheck {
                observable: obs.name().to_string(),
                t,
                nu: e[0],
                finite_difference: e[1],
                richardson: e[2],
                analytic: e[3],
                difference: e[4],
                components: (n_deriv > 1).then(|| [e[5], e[6], e[7]]),
            });
        }
    }
    Ok(rows)
}

/// `ν(f) − Σ_{j≤m} ν_0^{(j)}(f)/j!` together with `ν(f²)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TaylorRemainder {
    pub n_spins: usize,
    pub nu: Estimate,
    pub remainder: Estimate,
    pub nu_f_sq: Estimate,
}

impl TaylorRemainder {
    /// `|remainder| · N^{(m+1)/2} / ν(f²)^{1/2}`: the constant the bound needs.
    pub fn implied_constant(&self, order: u32) -> f64 {
        let scale = (self.n_spins as f64).powf(-(order as f64 + 1.0) / 2.0) * self.nu_f_sq.value.sqrt();
        if scale == 0.0 {
            0.0
        } else {
            self.remainder.value.abs() / scale
        }
    }
}

/// `endpoint`, when given, replaces `f` in the `t = 1` term. It must have the
/// same `ν` as `f` there (e.g. a site average that exchangeability makes
/// equal); its only purpose is a smaller variance.
pub fn taylor_remainder(
    observable: &ReplicaObservable,
    endpoint: Option<&ReplicaObservable>,
    order: u32,
    path: CavityPath,
    params: &ModelParams,
    q: f64,
    plan: &ExpectationPlan,
) -> Result<TaylorRemainder> {
    if order > 1 {
        return Err(Error::Unsupported(format!("Taylor remainder of order {order} (supported: 0, 1)")));
    }
    check_observable(observable, params)?;
    check_derivative_arity(observable)?;
    let end = endpoint.unwrap_or(observable);
    check_observable(end, params)?;
    let mut polys = vec![
        observable.poly().compile(),
        observable.squared().poly().compile(),
        end.poly().compile(),
    ];
    match path {
        CavityPath::One => polys.push(derivative_poly_1(observable.poly(), params.beta, q).compile()),
        CavityPath::Two => {
            let d = derivative_polys_2(observable.poly(), params.beta, q);
            polys.extend([d.i.compile(), d.ii.compile(), d.iii.compile()]);
        }
    }
    let mut probes = vec![Probe { t: 1.0, poly: 2 }, Probe { t: 1.0, poly: 1 }, Probe { t: 0.0, poly: 0 }];
    probes.extend((3..polys.len()).map(|poly| Probe { t: 0.0, poly }));
    let est = evaluate_probes(path, params, q, plan, &polys, &probes, 3, |v, out| {
        let derivative: f64 = v[3..].iter().sum();
        out[0] = v[0];
        out[1] = v[0] - v[2] - if order == 1 { derivative } else { 0.0 };
        out[2] = v[1];
    })?;
    Ok(TaylorRemainder {
        n_spins: params.n_spins,
        nu: est[0],
        remainder: est[1],
        nu_f_sq: est[2],
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TaylorReport {
    pub order: u32,
    pub rows: Vec<TaylorRemainder>,
    /// Fit of `log|remainder|` against `log N`.
    pub decay: LineFit,
    /// Smallest `K` with `|remainder| ≤ K N^{−(m+1)/2} ν(f²)^{1/2}` on the grid.
    pub fitted_constant: f64,
}

/// Runs [`taylor_remainder`] over a grid of sizes; `build` produces the
/// observable (and optional endpoint form) for each `N`.
#[allow(clippy::too_many_arguments)]
pub fn taylor_remainder_check(
    build: impl Fn(usize) -> Result<(ReplicaObservable, Option<ReplicaObservable>)>,
    order: u32,
    path: CavityPath,
    beta: f64,
    h: f64,
    sizes: &[usize],
    q: f64,
    plan: &ExpectationPlan,
) -> Result<TaylorReport> {
    let mut rows = Vec::new();
    for &n in sizes {
        let params = ModelParams::new(beta, h, n)?;
        let (f, endpoint) = build(n)?;
        rows.push(taylor_remainder(&f, endpoint.as_ref(), order, path, &params, q, plan)?);
    }
    let x: Vec<f64> = rows.iter().map(|r| (r.n_spins as f64).ln()).collect();
    let y: Vec<f64> = rows.iter().map(|r| r.remainder.value.abs().ln()).collect();
    let decay = if rows.len() >= 2 && y.iter().all(|v| v.is_finite()) {
        fit_line(&x, &y)
    } else {
        LineFit {
            slope: f64::NEG_INFINITY,
            intercept: 0.0,
            slope_stderr: 0.0,
            max_residual: 0.0,
        }
    };
    let fitted_constant = rows.iter().map(|r| r.implied_constant(order)).fold(0.0, f64::max);
    Ok(TaylorReport {
        order,
        rows,
        decay,
        fitted_constant,
    })
}

/// `ν_00((R^=_{1,2} − q)²)`, `ν((R^=_{1,2} − q)²)` and `ν((R_{1,2} − q)²)`,
/// from one pass on the two-coordinate path.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CavityOverlapMoments {
    pub decoupled_reduced: Estimate,
    pub coupled_reduced: Estimate,
    pub coupled_full: Estimate,
}

pub fn cavity_overlap_moments(params: &ModelParams, q: f64, plan: &ExpectationPlan) -> Result<CavityOverlapMoments> {
    let n = params.n_spins;
    if n < 3 {
        return Err(Error::InvalidParameter("need at least 3 spins".into()));
    }
    let qc = ReplicaPoly::constant(2, n, q);
    let reduced = &ReplicaPoly::overlap(2, n, 0, 1, 0..n - 2) - &qc;
    let full = &ReplicaPoly::overlap(2, n, 0, 1, 0..n) - &qc;
    let polys = [(&reduced * &reduced).compile(), (&full * &full).compile()];
    let probes = [Probe { t: 0.0, poly: 0 }, Probe { t: 1.0, poly: 0 }, Probe { t: 1.0, poly: 1 }];
    let e = evaluate_probes(CavityPath::Two, params, q, plan, &polys, &probes, 3, identity)?;
    Ok(CavityOverlapMoments {
        decoupled_reduced: e[0],
        coupled_reduced: e[1],
        coupled_full: e[2],
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::exact::spin_correlations;
    use crate::model::{energy, sample_disorder};

    fn params(beta: f64, h: f64, n: usize) -> ModelParams {
        ModelParams::new(beta, h, n).unwrap()
    }

    #[test]
    fn endpoint_is_bit_identical_to_model_energy() {
        for n in [3usize, 7] {
            let p = params(0.4, 0.3, n);
            let d = sample_disorder(5, n);
            let p1 = PathPoint::new(1.0, CavityGaussians::One(1.7), 0.2).unwrap();
            let p2 = PathPoint::new(1.0, CavityGaussians::Two(-0.4, 2.1), 0.2).unwrap();
            for code in 0..(1u64 << n) {
                let s = SpinConfig::from_code(code, n);
                let e = energy(&p, &d, &s).unwrap();
                assert_eq!(path_energy_1(&p1, &p, &d, &s).unwrap().to_bits(), e.to_bits());
                assert_eq!(path_energy_2(&p2, &p, &d, &s).unwrap().to_bits(), e.to_bits());
            }
        }
    }

    #[test]
    fn zero_q_removes_cavity_field() {
        let p = params(0.4, 0.0, 4);
        let d = sample_disorder(5, 4);
        let s = SpinConfig::from_code(9, 4);
        let a = path_energy_1(&PathPoint::new(0.0, CavityGaussians::One(0.3), 0.0).unwrap(), &p, &d, &s).unwrap();
        let b = path_energy_1(&PathPoint::new(0.0, CavityGaussians::One(-2.0), 0.0).unwrap(), &p, &d, &s).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn two_coordinate_hand_evaluation() {
        // N = 3, t = 1/2: spins 1, 2 = σ_{N−1}, 3 = σ_N.
        let (beta, h, q, t, z1, z2): (f64, f64, f64, f64, f64, f64) = (0.7, 0.2, 0.3, 0.5, 0.9, -1.3);
        let g = [0.4, -1.1, 0.6]; // g12, g13, g23
        let d = Disorder::from_couplings(3, g.to_vec()).unwrap();
        let p = params(beta, h, 3);
        let s = [1.0, -1.0, 1.0];
        let sc = beta / 3f64.sqrt();
        let st = t.sqrt();
        let expected = st * (s[2] * sc * g[1] * s[0] + s[1] * sc * g[0] * s[0] + sc * g[2] * s[1] * s[2])
            + beta * (1.0 - t).sqrt() * (z1 * q.sqrt() * s[2] + z2 * q.sqrt() * s[1])
            + h * (s[0] + s[1] + s[2]);
        let point = PathPoint::new(t, CavityGaussians::Two(z1, z2), q).unwrap();
        let cfg = SpinConfig::new(vec![1, -1, 1]).unwrap();
        let got = path_energy_2(&point, &p, &d, &cfg).unwrap();
        assert!((got - expected).abs() < 1e-15);
    }

    #[test]
    fn path_energy_rejects_wrong_shapes() {
        let p = params(0.4, 0.0, 4);
        let d = sample_disorder(5, 4);
        let s = SpinConfig::from_code(9, 4);
        let one = PathPoint::new(0.5, CavityGaussians::One(0.3), 0.1).unwrap();
        assert!(path_energy_2(&one, &p, &d, &s).is_err());
        assert!(path_energy_1(&one, &p, &d, &SpinConfig::from_code(1, 3)).is_err());
        assert!(PathPoint::new(1.5, CavityGaussians::One(0.0), 0.1).is_err());
    }

    #[test]
    fn cavity_spin_factorises_at_t_zero() {
        let n = 6;
        let p = params(0.9, 0.3, n);
        let d = sample_disorder(8, n);
        let t1 = path_gibbs(CavityPath::One, &p, &d, 0.0, &[0.7], 0.2).unwrap();
        let c = spin_correlations(&t1);
        // ⟨σ_N σ_1 σ_3⟩_0 = ⟨σ_N⟩_0 ⟨σ_1 σ_3⟩_0
        let last = 1 << (n - 1);
        assert!((c[last | 0b101] - c[last] * c[0b101]).abs() < 1e-14);
        let t2 = path_gibbs(CavityPath::Two, &p, &d, 0.0, &[0.7, -0.2], 0.2).unwrap();
        let c = spin_correlations(&t2);
        let prev = 1 << (n - 2);
        assert!((c[last | prev | 0b11] - c[last] * c[prev] * c[0b11]).abs() < 1e-14);
        // Away from t = 0 the factorisation fails.
        let t3 = path_gibbs(CavityPath::One, &p, &d, 0.5, &[0.7], 0.2).unwrap();
        let c = spin_correlations(&t3);
        assert!((c[last | 0b101] - c[last] * c[0b101]).abs() > 1e-6);
    }

    #[test]
    fn derivative_of_constant_is_zero() {
        let n = 5;
        let one = ReplicaPoly::constant(1, n, 1.0);
        assert_eq!(derivative_poly_1(&one, 0.8, 0.1).compile().n_terms(), 0);
        let d = derivative_polys_2(&one, 0.8, 0.1);
        for part in [d.i, d.ii, d.iii] {
            assert_eq!(part.compile().n_terms(), 0);
        }
    }

    #[test]
    fn zero_beta_kills_every_derivative_term() {
        let w = WeightVector::uniform(3);
        let obs = catalog_observable("s1-sq", 3, &w, 0.0).unwrap();
        let p = params(0.0, 0.3, 3);
        let plan = ExpectationPlan::Quadrature { nodes: 4 };
        let d = analytic_derivative_1(&obs, 0.5, &p, 0.1, &plan).unwrap();
        assert_eq!(d.value, 0.0);
    }

    #[test]
    fn derivative_rejects_t_one() {
        let w = WeightVector::uniform(3);
        let obs = catalog_observable("overlap", 3, &w, 0.0).unwrap();
        let plan = ExpectationPlan::Quadrature { nodes: 4 };
        assert!(analytic_derivative_1(&obs, 1.0, &params(0.3, 0.1, 3), 0.1, &plan).is_err());
        assert!(analytic_derivative_2(&obs, 1.0, &params(0.3, 0.1, 3), 0.1, &plan).is_err());
    }

    #[test]
    fn catalogue_is_complete_and_validated() {
        let w = WeightVector::uniform(4);
        for name in OBSERVABLE_CATALOG {
            let o = catalog_observable(name, 4, &w, 0.1).unwrap();
            assert!(o.arity() <= 4);
        }
        assert!(catalog_observable("nope", 4, &w, 0.1).is_err());
    }

    #[test]
    fn cavity_mean_of_sbar_pair_vanishes_at_t_zero() {
        let w = WeightVector::uniform(3);
        let obs = catalog_observable("sbar-first-last", 3, &w, 0.0).unwrap();
        let p = params(0.5, 0.3, 3);
        let q = crate::qsolver::solve_q(0.5, 0.3, 1e-12).unwrap().q;
        let v = nu_t(&obs, 0.0, CavityPath::One, &p, q, &ExpectationPlan::Quadrature { nodes: 8 }).unwrap();
        assert!(v.value.abs() < 1e-14);
    }

    #[test]
    fn free_cavity_spin_variance() {
        let w = WeightVector::uniform(4);
        let obs = catalog_observable("sbar-last-sq", 4, &w, 0.0).unwrap();
        let p = params(0.3, 0.0, 4);
        let plan = ExpectationPlan::MonteCarlo {
            samples: 16,
            seed: 1,
            antithetic: false,
            z_nodes: 8,
        };
        let v = nu_t(&obs, 0.0, CavityPath::One, &p, 0.0, &plan).unwrap();
        assert!((v.value - 2.0).abs() < 1e-14);
    }

    #[test]
    fn quadrature_only_for_tiny_systems() {
        let w = WeightVector::uniform(4);
        let obs = catalog_observable("overlap", 4, &w, 0.0).unwrap();
        let err = nu_t(&obs, 0.5, CavityPath::One, &params(0.3, 0.1, 4), 0.1, &ExpectationPlan::default());
        assert!(matches!(err, Err(Error::Capacity { .. })));
    }

    #[test]
    fn kernel_matches_explicit_path_tables() {
        // The feature-table kernel and the Gray-code route agree.
        let n = 9;
        let p = params(0.6, 0.2, n);
        let w = WeightVector::uniform(n);
        let obs = catalog_observable("s1-sq", n, &w, 0.0).unwrap();
        let plan = ExpectationPlan::MonteCarlo {
            samples: 4,
            seed: 3,
            antithetic: false,
            z_nodes: 3,
        };
        let fast = nu_t(&obs, 0.3, CavityPath::Two, &p, 0.1, &plan).unwrap();
        let rule = GaussHermite::new(3).unwrap();
        let npairs = n * (n - 1) / 2;
        let mut direct = Vec::new();
        for s in 0..4u64 {
            let mut rng = rng_from_seed(derive_seed(3, s));
            let g: Vec<f64> = (0..npairs).map(|_| StandardNormal.sample(&mut rng)).collect();
            let d = Disorder::from_couplings(n, g).unwrap();
            let mut v = 0.0;
            for (a, wa) in rule.nodes().iter().zip(rule.weights()) {
                for (b, wb) in rule.nodes().iter().zip(rule.weights()) {
                    let t = path_gibbs(CavityPath::Two, &p, &d, 0.3, &[*a, *b], 0.1).unwrap();
                    v += wa * wb * obs.poly().expectation(&spin_correlations(&t));
                }
            }
            direct.push(v);
        }
        let mean = direct.iter().sum::<f64>() / 4.0;
        assert!((fast.value - mean).abs() < 1e-12);
    }

    #[test]
    fn constant_has_zero_taylor_remainder() {
        let w = WeightVector::uniform(3);
        let one = catalog_observable("one", 3, &w, 0.0).unwrap();
        let p = params(0.5, 0.3, 3);
        for order in [0, 1] {
            let r = taylor_remainder(&one, None, order, CavityPath::One, &p, 0.2, &ExpectationPlan::Quadrature { nodes: 4 }).unwrap();
            assert_eq!(r.remainder.value, 0.0);
        }
        assert!(taylor_remainder(&one, None, 2, CavityPath::One, &p, 0.2, &ExpectationPlan::default()).is_err());
    }
}
