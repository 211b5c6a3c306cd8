//! Observables on several replicas as multilinear polynomials in the spins.
//!
//! Any function on `Σ_N^n` can be written as
//! `f(σ^1, …, σ^n) = Σ c · Π_l σ^l_{A_l}` with `σ_A = Π_{i∈A} σ_i`. For a
//! fixed Hamiltonian the replicas are i.i.d., so
//! `⟨f⟩ = Σ c · Π_l ⟨σ_{A_l}⟩`, which only needs the single-replica
//! correlator table (see [`crate::exact::spin_correlations`]).

use std::collections::BTreeMap;
use std::ops::{Add, Mul, Sub};

use crate::error::{Error, Result};
use crate::model::SpinConfig;
use crate::stats::pairwise_sum;

pub type Mask = u32;

#[derive(Debug, Clone, PartialEq)]
pub struct ReplicaPoly {
    arity: usize,
    n_spins: usize,
    /// Key: one mask per replica.
    terms: BTreeMap<Vec<Mask>, f64>,
}

impl ReplicaPoly {
    pub fn zero(arity: usize, n_spins: usize) -> Self {
        assert!(n_spins <= Mask::BITS as usize);
        Self {
            arity,
            n_spins,
            terms: BTreeMap::new(),
        }
    }

    pub fn constant(arity: usize, n_spins: usize, c: f64) -> Self {
        let mut p = Self::zero(arity, n_spins);
        p.add_term(vec![0; arity], c);
        p
    }

    /// `σ_site^replica` (0-based labels).
    pub fn spin(arity: usize, n_spins: usize, replica: usize, site: usize) -> Self {
        assert!(replica < arity && site < n_spins);
        let mut key = vec![0; arity];
        key[replica] = 1 << site;
        let mut p = Self::zero(arity, n_spins);
        p.add_term(key, 1.0);
        p
    }

    /// `N^{−1} Σ_{i ∈ sites} σ_i^a σ_i^b`; with `sites = 0..N` this is `R_{a,b}`,
    /// with `0..N−1` it is `R^−_{a,b}` and with `0..N−2` it is `R^=_{a,b}`.
    pub fn overlap(arity: usize, n_spins: usize, a: usize, b: usize, sites: std::ops::Range<usize>) -> Self {
        let mut p = Self::zero(arity, n_spins);
        let w = 1.0 / n_spins as f64;
        for i in sites {
            let mut key = vec![0; arity];
            key[a] ^= 1 << i;
            key[b] ^= 1 << i;
            p.add_term(key, w);
        }
        p
    }

    /// `Σ_i t_i (σ_i^a − σ_i^b)`, i.e. `S_l` on the replica pair `(a, b)`.
    pub fn weighted_difference(arity: usize, weights: &[f64], a: usize, b: usize) -> Self {
        let n = weights.len();
        let mut p = Self::zero(arity, n);
        for (i, &t) in weights.iter().enumerate() {
            let mut ka = vec![0; arity];
            ka[a] = 1 << i;
            p.add_term(ka, t);
            let mut kb = vec![0; arity];
            kb[b] = 1 << i;
            p.add_term(kb, -t);
        }
        p
    }

    fn add_term(&mut self, key: Vec<Mask>, c: f64) {
        *self.terms.entry(key).or_insert(0.0) += c;
    }

    pub fn arity(&self) -> usize {
        self.arity
    }

    pub fn n_spins(&self) -> usize {
        self.n_spins
    }

    pub fn n_terms(&self) -> usize {
        self.terms.len()
    }

    /// The same polynomial viewed on `arity ≥ self.arity()` replicas.
    pub fn with_arity(&self, arity: usize) -> Self {
        assert!(arity >= self.arity);
        let terms = self
            .terms
            .iter()
            .map(|(k, &c)| {
                let mut key = k.clone();
                key.resize(arity, 0);
                (key, c)
            })
            .collect();
        Self {
            arity,
            n_spins: self.n_spins,
            terms,
        }
    }

    pub fn scaled(&self, s: f64) -> Self {
        let mut out = self.clone();
        for c in out.terms.values_mut() {
            *c *= s;
        }
        out
    }

    /// Brute-force evaluation on explicit configurations, one per replica.
    pub fn evaluate(&self, configs: &[SpinConfig]) -> Result<f64> {
        if configs.len() != self.arity {
            return Err(Error::DimensionMismatch {
                expected: self.arity,
                actual: configs.len(),
            });
        }
        let codes: Vec<u32> = configs.iter().map(|c| c.code() as u32).collect();
        let terms: Vec<f64> = self
            .terms
            .iter()
            .map(|(key, &c)| {
                let negatives: u32 = key
                    .iter()
                    .zip(&codes)
                    .map(|(&m, &code)| (m & !code).count_ones())
                    .sum();
                if negatives.is_multiple_of(2) {
                    c
                } else {
                    -c
                }
            })
            .collect();
        Ok(pairwise_sum(&terms))
    }

    /// Canonical form for Gibbs averages: masks of each term sorted, identity
    /// masks dropped, equal multisets merged.
    pub fn compile(&self) -> CompiledPoly {
        let mut merged: BTreeMap<Vec<Mask>, f64> = BTreeMap::new();
        for (key, &c) in &self.terms {
            let mut k: Vec<Mask> = key.iter().copied().filter(|&m| m != 0).collect();
            k.sort_unstable();
            *merged.entry(k).or_insert(0.0) += c;
        }
        let mut compiled = CompiledPoly {
            arity: self.arity,
            coeffs: Vec::with_capacity(merged.len()),
            offsets: vec![0],
            masks: Vec::new(),
        };
        for (k, c) in merged {
            if c == 0.0 {
                continue;
            }
            compiled.coeffs.push(c);
            compiled.masks.extend(k);
            compiled.offsets.push(compiled.masks.len() as u32);
        }
        compiled
    }

    /// `⟨f⟩` from the correlator table of one Hamiltonian.
    pub fn expectation(&self, correlations: &[f64]) -> f64 {
        self.compile().expectation(correlations)
    }

    fn binary(&self, other: &Self) -> (Self, Self) {
        assert_eq!(self.n_spins, other.n_spins, "polynomials on different systems");
        let arity = self.arity.max(other.arity);
        (self.with_arity(arity), other.with_arity(arity))
    }
}

impl Add for &ReplicaPoly {
    type Output = ReplicaPoly;
    fn add(self, other: &ReplicaPoly) -> ReplicaPoly {
        let (mut a, b) = self.binary(other);
        for (k, c) in b.terms {
            a.add_term(k, c);
        }
        a
    }
}

impl Sub for &ReplicaPoly {
    type Output = ReplicaPoly;
    fn sub(self, other: &ReplicaPoly) -> ReplicaPoly {
        self + &other.scaled(-1.0)
    }
}

impl Mul for &ReplicaPoly {
    type Output = ReplicaPoly;
    fn mul(self, other: &ReplicaPoly) -> ReplicaPoly {
        let (a, b) = self.binary(other);
        let mut out = ReplicaPoly::zero(a.arity, a.n_spins);
        for (ka, ca) in &a.terms {
            for (kb, cb) in &b.terms {
                let key: Vec<Mask> = ka.iter().zip(kb).map(|(x, y)| x ^ y).collect();
                out.add_term(key, ca * cb);
            }
        }
        out
    }
}

impl Mul<f64> for &ReplicaPoly {
    type Output = ReplicaPoly;
    fn mul(self, s: f64) -> ReplicaPoly {
        self.scaled(s)
    }
}

/// Flattened canonical polynomial; evaluation is a sum of products of
/// correlator lookups.
#[derive(Debug, Clone, PartialEq)]
pub struct CompiledPoly {
    arity: usize,
    coeffs: Vec<f64>,
    offsets: Vec<u32>,
    masks: Vec<Mask>,
}

impl CompiledPoly {
    pub fn arity(&self) -> usize {
        self.arity
    }

    pub fn n_terms(&self) -> usize {
        self.coeffs.len()
    }

    #[inline]
    pub fn expectation(&self, corr: &[f64]) -> f64 {
        let mut total = 0.0;
        for (t, &c) in self.coeffs.iter().enumerate() {
            let (lo, hi) = (self.offsets[t] as usize, self.offsets[t + 1] as usize);
            let mut prod = c;
            for &m in &self.masks[lo..hi] {
                prod *= corr[m as usize];
            }
            total += prod;
        }
        total
    }
}
