//! Exact multi-replica observables for one disorder realisation.
//!
//! Replicas are independent under `G^{⊗n}` once the disorder is fixed, so
//! every product observable factorises into single-replica quantities:
//! moments of `X`, or spin correlators `⟨σ_A⟩ = ⟨Π_{i∈A} σ_i⟩`. All `2^N`
//! correlators come out of one Walsh–Hadamard transform of the probability
//! table. The [`pair_enumeration`] submodule recomputes the same quantities by
//! brute force over replica pairs and is kept as a cross-check path.

use crate::error::{Error, Result};
use crate::model::{spin_of, GibbsTable, SpinConfig};
use crate::stats::pairwise_sum;
use crate::weights::WeightVector;

/// Default highest moment of `X` tracked per disorder.
pub const DEFAULT_K_MAX: usize = 8;

/// Highest overlap power on the correlator-sum path.
pub const MAX_CORRELATOR_OVERLAP_ORDER: u32 = 4;

/// Pair enumeration touches `4^N` pairs; refuse beyond this size.
pub const PAIR_ENUMERATION_CEILING: usize = 13;

/// `⟨σ_A⟩` for every mask `A` (bit `i` of the index selects spin `i`).
pub fn spin_correlations(table: &GibbsTable) -> Vec<f64> {
    let mut v = table.probs().to_vec();
    walsh_hadamard(&mut v);
    // σ_i = +1 on set bits, so Π_{i∈A} σ_i = (−1)^{|A|} (−1)^{|A ∧ c|}.
    for (mask, x) in v.iter_mut().enumerate() {
        if mask.count_ones() % 2 == 1 {
            *x = -*x;
        }
    }
    v
}

/// Unnormalised in-place transform `v̂(A) = Σ_c v(c) (−1)^{|A ∧ c|}`.
pub fn walsh_hadamard(v: &mut [f64]) {
    let n = v.len();
    debug_assert!(n.is_power_of_two());
    let mut h = 1;
    while h < n {
        for block in v.chunks_mut(2 * h) {
            let (lo, hi) = block.split_at_mut(h);
            for (a, b) in lo.iter_mut().zip(hi.iter_mut()) {
                let (x, y) = (*a, *b);
                *a = x + y;
                *b = x - y;
            }
        }
        h *= 2;
    }
}

/// `b_i = ⟨σ_i⟩` read off the correlator table.
pub fn magnetizations(correlations: &[f64], n_spins: usize) -> Vec<f64> {
    (0..n_spins).map(|i| correlations[1 << i]).collect()
}

/// `X(c) = Σ t_i σ_i(c)` for every code, built incrementally over the lowest set bit.
fn x_values(weights: &[f64]) -> Vec<f64> {
    let n = weights.len();
    let mut xs = vec![0.0; 1 << n];
    xs[0] = -weights.iter().sum::<f64>();
    for c in 1..xs.len() {
        let low = c.trailing_zeros() as usize;
        xs[c] = xs[c & (c - 1)] + 2.0 * weights[low];
    }
    xs
}

fn check_weights(table: &GibbsTable, weights: &WeightVector) -> Result<()> {
    if weights.len() != table.n_spins() {
        return Err(Error::DimensionMismatch {
            expected: table.n_spins(),
            actual: weights.len(),
        });
    }
    Ok(())
}

/// Gibbs moments of `X` for one disorder.
#[derive(Debug, Clone, PartialEq)]
pub struct MomentVector {
    /// `⟨X^m⟩`, `m = 0..=k_max`.
    pub values: Vec<f64>,
    /// `⟨(X − ⟨X⟩)^m⟩`, `m = 0..=k_max`.
    pub central: Vec<f64>,
    pub disorder_seed: Option<u64>,
}

impl MomentVector {
    pub fn k_max(&self) -> usize {
        self.values.len() - 1
    }

    pub fn mean(&self) -> f64 {
        self.values.get(1).copied().unwrap_or(0.0)
    }
}

/// Weighted power sums `Σ_c p(c) x(c)^m`, accumulated in fixed-size chunks
/// and reduced pairwise.
fn power_sums(probs: &[f64], xs: &[f64], shift: f64, k_max: usize) -> Vec<f64> {
    const CHUNK: usize = 1024;
    let mut partials = vec![Vec::new(); k_max + 1];
    for (pc, xc) in probs.chunks(CHUNK).zip(xs.chunks(CHUNK)) {
        let mut acc = vec![0.0; k_max + 1];
        for (&p, &x) in pc.iter().zip(xc) {
            let d = x - shift;
            let mut pow = p;
            for a in acc.iter_mut() {
                *a += pow;
                pow *= d;
            }
        }
        for (part, a) in partials.iter_mut().zip(acc) {
            part.push(a);
        }
    }
    partials.iter().map(|p| pairwise_sum(p)).collect()
}

pub fn x_moments(table: &GibbsTable, weights: &WeightVector, k_max: usize) -> Result<MomentVector> {
    check_weights(table, weights)?;
    let xs = x_values(weights.weights());
    let mut values = power_sums(table.probs(), &xs, 0.0, k_max);
    values[0] = 1.0;
    let mean = values.get(1).copied().unwrap_or(0.0);
    let mut central = power_sums(table.probs(), &xs, mean, k_max);
    central[0] = 1.0;
    if k_max >= 1 {
        central[1] = 0.0;
    }
    Ok(MomentVector {
        values,
        central,
        disorder_seed: table.disorder_seed(),
    })
}

pub(crate) fn binomial(k: usize, j: usize) -> f64 {
    let j = j.min(k - j);
    (0..j).fold(1.0, |acc, i| acc * (k - i) as f64 / (i + 1) as f64)
}

/// `⟨Y^k⟩` for `Y = X − X'`, `k = 0..=k_max`.
///
/// Uses the central moments `c_j` of `X`:
/// `⟨Y^k⟩ = Σ_j C(k,j) (−1)^j c_{k−j} c_j`. Terms `j` and `k−j` are paired, so
/// odd orders come out as exact zeros.
pub fn y_moments(x: &MomentVector, k_max: usize) -> Result<Vec<f64>> {
    if x.k_max() < k_max {
        return Err(Error::InvalidParameter(format!(
            "need moments of X through order {k_max}, have {}",
            x.k_max()
        )));
    }
    let c = &x.central;
    let sign = |j: usize| if j.is_multiple_of(2) { 1.0 } else { -1.0 };
    Ok((0..=k_max)
        .map(|k| {
            let mut terms = Vec::with_capacity(k / 2 + 1);
            for j in 0..k.div_ceil(2) {
                terms.push(binomial(k, j) * (c[k - j] * c[j]) * (sign(j) + sign(k - j)));
            }
            if k % 2 == 0 {
                terms.push(binomial(k, k / 2) * sign(k / 2) * c[k / 2] * c[k / 2]);
            }
            pairwise_sum(&terms)
        })
        .collect())
}

/// Exponents `(k_1, …, k_n)` of `Π_l S_l^{k_l}`; replica pair `l` is `(2l−1, 2l)`.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct ReplicaSpec {
    exponents: Vec<u32>,
}

impl ReplicaSpec {
    pub fn new(exponents: Vec<u32>) -> Result<Self> {
        if exponents.is_empty() {
            return Err(Error::InvalidParameter(
                "replica spec needs at least one exponent".into(),
            ));
        }
        Ok(Self { exponents })
    }

    pub fn exponents(&self) -> &[u32] {
        &self.exponents
    }

    pub fn total(&self) -> u32 {
        self.exponents.iter().sum()
    }

    pub fn max_exponent(&self) -> u32 {
        self.exponents.iter().copied().max().unwrap_or(0)
    }

    pub fn has_odd(&self) -> bool {
        self.exponents.iter().any(|k| k % 2 == 1)
    }

    /// The pair of replica labels `(1(l), 2(l))` carried by `S_l` (0-based `l`).
    pub fn replica_pair(l: usize) -> (usize, usize) {
        (2 * l, 2 * l + 1)
    }

    pub fn label(&self) -> String {
        self.exponents
            .iter()
            .map(|k| k.to_string())
            .collect::<Vec<_>>()
            .join(" ")
    }
}

/// `⟨Π_l S_l^{k_l}⟩ = Π_l ⟨Y^{k_l}⟩` for a fixed disorder.
pub fn replica_product(y: &[f64], spec: &ReplicaSpec) -> Result<f64> {
    let need = spec.max_exponent() as usize;
    if y.len() <= need {
        return Err(Error::InvalidParameter(format!(
            "need <Y^k> through k = {need}, have {}",
            y.len().saturating_sub(1)
        )));
    }
    Ok(spec
        .exponents()
        .iter()
        .map(|&k| y[k as usize])
        .product())
}

/// `⟨R_{1,2}^m⟩ = N^{−m} Σ_{i_1..i_m} ⟨σ_{i_1}⋯σ_{i_m}⟩²`, for `1 ≤ m ≤ 4`.
pub fn overlap_moment(table: &GibbsTable, m: u32) -> Result<f64> {
    let corr = spin_correlations(table);
    overlap_moment_from_correlations(&corr, table.n_spins(), m)
}

pub fn overlap_moment_from_correlations(corr: &[f64], n: usize, m: u32) -> Result<f64> {
    if m == 0 {
        return Ok(1.0);
    }
    if m > MAX_CORRELATOR_OVERLAP_ORDER {
        return Err(Error::Unsupported(format!(
            "overlap moment of order {m} on the correlator path (max {MAX_CORRELATOR_OVERLAP_ORDER})"
        )));
    }
    let sq = |mask: usize| corr[mask] * corr[mask];
    let mut partials = Vec::new();
    match m {
        1 => partials.extend((0..n).map(|i| sq(1 << i))),
        2 => {
            for i in 0..n {
                partials.push((0..n).map(|j| sq((1 << i) ^ (1 << j))).sum());
            }
        }
        3 => {
            for i in 0..n {
                for j in 0..n {
                    let a = (1 << i) ^ (1 << j);
                    partials.push((0..n).map(|k| sq(a ^ (1 << k))).sum());
                }
            }
        }
        _ => {
            for i in 0..n {
                for j in 0..n {
                    let a = (1 << i) ^ (1 << j);
                    for k in 0..n {
                        let b = a ^ (1 << k);
                        partials.push((0..n).map(|l| sq(b ^ (1 << l))).sum());
                    }
                }
            }
        }
    }
    Ok(pairwise_sum(&partials) / (n as f64).powi(m as i32))
}

/// Law of `R_{1,2}`: entry `d` is the probability that two replicas differ on
/// exactly `d` sites, so that `R_{1,2} = 1 − 2d/N`.
///
/// Uses `P(σ¹ ⊕ σ² = D) = 2^{−N} Σ_A ⟨σ_A⟩² (−1)^{|A ∧ D|}`.
pub fn overlap_distribution(table: &GibbsTable) -> Vec<f64> {
    let n = table.n_spins();
    let mut v: Vec<f64> = spin_correlations(table).iter().map(|c| c * c).collect();
    walsh_hadamard(&mut v);
    let scale = 1.0 / v.len() as f64;
    let mut by_distance = vec![Vec::new(); n + 1];
    for (d, x) in v.iter().enumerate() {
        by_distance[d.count_ones() as usize].push(x * scale);
    }
    by_distance.iter().map(|p| pairwise_sum(p)).collect()
}

/// `⟨(R_{1,2} − q)^order⟩` for any order, from [`overlap_distribution`].
pub fn centered_overlap_moment_any(table: &GibbsTable, q: f64, order: u32) -> f64 {
    let n = table.n_spins() as f64;
    let terms: Vec<f64> = overlap_distribution(table)
        .iter()
        .enumerate()
        .map(|(d, p)| p * (1.0 - 2.0 * d as f64 / n - q).powi(order as i32))
        .collect();
    pairwise_sum(&terms)
}

/// `⟨(R_{1,2} − q)^order⟩` by binomial expansion over [`overlap_moment`]; even
/// orders up to 4.
pub fn centered_overlap_moment(table: &GibbsTable, q: f64, order: u32) -> Result<f64> {
    if order % 2 == 1 || order > MAX_CORRELATOR_OVERLAP_ORDER {
        return Err(Error::Unsupported(format!(
            "centered overlap moment needs an even order <= {MAX_CORRELATOR_OVERLAP_ORDER}, got {order}"
        )));
    }
    let corr = spin_correlations(table);
    let n = table.n_spins();
    let mut terms = Vec::new();
    for j in 0..=order {
        let r = overlap_moment_from_correlations(&corr, n, j)?;
        terms.push(binomial(order as usize, j as usize) * (-q).powi((order - j) as i32) * r);
    }
    Ok(pairwise_sum(&terms))
}

/// The pieces of `R_{1,2} − q = T_{1,2} + T_1 + T_2 + T` on one replica pair.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TDecomposition {
    pub overlap: f64,
    pub t12: f64,
    pub t1: f64,
    pub t2: f64,
    pub t: f64,
    pub residual: f64,
}

pub fn t_decomposition(b: &[f64], q: f64, first: &SpinConfig, second: &SpinConfig) -> Result<TDecomposition> {
    let n = b.len();
    for s in [first, second] {
        if s.len() != n {
            return Err(Error::DimensionMismatch {
                expected: n,
                actual: s.len(),
            });
        }
    }
    let nf = n as f64;
    let (mut r, mut t12, mut t1, mut t2, mut bb) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for i in 0..n {
        let (s1, s2) = (first.spin(i), second.spin(i));
        r += s1 * s2;
        t12 += (s1 - b[i]) * (s2 - b[i]);
        t1 += (s1 - b[i]) * b[i];
        t2 += (s2 - b[i]) * b[i];
        bb += b[i] * b[i];
    }
    let (overlap, t12, t1, t2, t) = (r / nf, t12 / nf, t1 / nf, t2 / nf, bb / nf - q);
    let residual = ((overlap - q) - (t12 + t1 + t2 + t)).abs();
    Ok(TDecomposition {
        overlap,
        t12,
        t1,
        t2,
        t,
        residual,
    })
}

/// `|(R_{1,2} − q) − (T_{1,2} + T_1 + T_2 + T)|` with `b = ⟨σ⟩` from the table.
pub fn t_decomposition_check(
    table: &GibbsTable,
    q: f64,
    pair: (&SpinConfig, &SpinConfig),
) -> Result<f64> {
    let corr = spin_correlations(table);
    let b = magnetizations(&corr, table.n_spins());
    Ok(t_decomposition(&b, q, pair.0, pair.1)?.residual)
}

/// `Cov_ij = ⟨σ_i σ_j⟩ − b_i b_j` (with `⟨σ_i²⟩ = 1` on the diagonal).
pub fn covariance(corr: &[f64], n: usize) -> Vec<f64> {
    let b = magnetizations(corr, n);
    let mut cov = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            let cij = if i == j { 1.0 } else { corr[(1 << i) | (1 << j)] };
            cov[i * n + j] = cij - b[i] * b[j];
        }
    }
    cov
}

/// `(⟨T_{1,2}²⟩, ⟨T_1²⟩) = (N^{−2} Σ Cov_ij², N^{−2} Σ Cov_ij b_i b_j)`.
pub fn t_second_moments(table: &GibbsTable) -> (f64, f64) {
    let n = table.n_spins();
    let corr = spin_correlations(table);
    let b = magnetizations(&corr, n);
    let cov = covariance(&corr, n);
    let mut sq = Vec::with_capacity(n);
    let mut cross = Vec::with_capacity(n);
    for i in 0..n {
        let row = &cov[i * n..(i + 1) * n];
        sq.push(row.iter().map(|c| c * c).sum::<f64>());
        cross.push(row.iter().zip(&b).map(|(c, bj)| c * b[i] * bj).sum::<f64>());
    }
    let norm = (n * n) as f64;
    (pairwise_sum(&sq) / norm, (pairwise_sum(&cross) / norm).max(0.0))
}

/// Two second-order overlap products weighted by `φ = S_1²` on replicas
/// `(1, 2)`, with overlaps on replicas disjoint from them:
/// `disjoint = ⟨(R_{3,4} − q)(R_{5,6} − q) S_1²⟩` and
/// `shared = ⟨(R_{3,4} − q)(R_{3,5} − q) S_1²⟩`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OverlapPairProducts {
    pub disjoint: f64,
    pub shared: f64,
}

pub fn overlap_pair_products(corr: &[f64], n: usize, y2: f64, q: f64) -> OverlapPairProducts {
    let b = magnetizations(corr, n);
    let nf = n as f64;
    let r1 = b.iter().map(|x| x * x).sum::<f64>() / nf;
    let mut rows = Vec::with_capacity(n);
    for i in 0..n {
        rows.push(
            (0..n)
                .map(|j| {
                    let cij = if i == j { 1.0 } else { corr[(1 << i) | (1 << j)] };
                    cij * b[i] * b[j]
                })
                .sum::<f64>(),
        );
    }
    let r2 = pairwise_sum(&rows) / (nf * nf);
    OverlapPairProducts {
        disjoint: y2 * (r1 - q) * (r1 - q),
        shared: y2 * (r2 - 2.0 * q * r1 + q * q),
    }
}

/// Brute-force evaluation over all `4^N` replica pairs.
pub mod pair_enumeration {
    use super::*;

    fn check(table: &GibbsTable) -> Result<()> {
        if table.n_spins() > PAIR_ENUMERATION_CEILING {
            return Err(Error::Capacity {
                n_spins: table.n_spins(),
                ceiling: PAIR_ENUMERATION_CEILING,
            });
        }
        Ok(())
    }

    fn pair_sum(table: &GibbsTable, f: impl Fn(usize, usize) -> f64) -> f64 {
        let p = table.probs();
        let rows: Vec<f64> = (0..p.len())
            .map(|a| {
                let inner: Vec<f64> = (0..p.len()).map(|b| p[b] * f(a, b)).collect();
                p[a] * pairwise_sum(&inner)
            })
            .collect();
        pairwise_sum(&rows)
    }

    pub fn y_moments(table: &GibbsTable, weights: &WeightVector, k_max: usize) -> Result<Vec<f64>> {
        check(table)?;
        check_weights(table, weights)?;
        let xs = x_values(weights.weights());
        Ok((0..=k_max)
            .map(|k| pair_sum(table, |a, b| (xs[a] - xs[b]).powi(k as i32)))
            .collect())
    }

    fn overlap(a: usize, b: usize, n: usize) -> f64 {
        1.0 - 2.0 * ((a ^ b).count_ones() as f64) / n as f64
    }

    pub fn overlap_moment(table: &GibbsTable, m: u32) -> Result<f64> {
        check(table)?;
        let n = table.n_spins();
        Ok(pair_sum(table, |a, b| overlap(a, b, n).powi(m as i32)))
    }

    pub fn centered_overlap_moment(table: &GibbsTable, q: f64, order: u32) -> Result<f64> {
        check(table)?;
        let n = table.n_spins();
        Ok(pair_sum(table, |a, b| (overlap(a, b, n) - q).powi(order as i32)))
    }

    pub fn t_second_moments(table: &GibbsTable) -> Result<(f64, f64)> {
        check(table)?;
        let n = table.n_spins();
        let corr = spin_correlations(table);
        let b = magnetizations(&corr, n);
        let nf = n as f64;
        let t12 = |x: usize, y: usize| {
            (0..n)
                .map(|i| (spin_of(x, i) - b[i]) * (spin_of(y, i) - b[i]))
                .sum::<f64>()
                / nf
        };
        let t1 = |x: usize| (0..n).map(|i| (spin_of(x, i) - b[i]) * b[i]).sum::<f64>() / nf;
        let second = pair_sum(table, |x, y| t12(x, y).powi(2));
        let first = table.expect_by_code(|x| t1(x).powi(2));
        Ok((second, first))
    }
}

/// Largest relative disagreement between the factorised path and pair
/// enumeration over `⟨Y^k⟩` (k ≤ 4), `⟨R^m⟩` (m ≤ 4) and the T second moments.
pub fn cross_check(table: &GibbsTable, weights: &WeightVector) -> Result<f64> {
    let rel = |a: f64, b: f64| (a - b).abs() / a.abs().max(b.abs()).max(1e-300);
    let mut worst = 0.0f64;
    let x = x_moments(table, weights, 4)?;
    let fast_y = y_moments(&x, 4)?;
    let slow_y = pair_enumeration::y_moments(table, weights, 4)?;
    for k in (0..=4).step_by(2) {
        worst = worst.max(rel(fast_y[k], slow_y[k]));
    }
    for m in 1..=4 {
        let a = overlap_moment(table, m)?;
        let b = pair_enumeration::overlap_moment(table, m)?;
        if a.abs().max(b.abs()) > 1e-12 {
            worst = worst.max(rel(a, b));
        }
    }
    let (a12, a1) = t_second_moments(table);
    let (b12, b1) = pair_enumeration::t_second_moments(table)?;
    worst = worst.max(rel(a12, b12));
    if a1.max(b1) > 1e-12 {
        worst = worst.max(rel(a1, b1));
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{exact_gibbs, sample_disorder, ModelParams};

    fn table(beta: f64, h: f64, n: usize, seed: u64) -> GibbsTable {
        exact_gibbs(&ModelParams::new(beta, h, n).unwrap(), &sample_disorder(seed, n)).unwrap()
    }

    #[test]
    fn correlators_match_direct_sums() {
        let t = table(0.4, 0.2, 6, 3);
        let corr = spin_correlations(&t);
        for mask in [0usize, 1, 5, 12, 63] {
            let direct = t.expect_by_code(|c| {
                (0..6).filter(|i| mask >> i & 1 == 1).map(|i| spin_of(c, i)).product()
            });
            assert!((corr[mask] - direct).abs() < 1e-14);
        }
    }

    #[test]
    fn zeroth_moment_and_free_mean() {
        let n = 9;
        let t = table(1e-12, 0.4, n, 1);
        let x = x_moments(&t, &WeightVector::uniform(n), 3).unwrap();
        assert_eq!(x.values[0], 1.0);
        assert!((x.values[1] - (n as f64).sqrt() * 0.4f64.tanh()).abs() < 1e-8);
    }

    #[test]
    fn moments_do_not_depend_on_enumeration_order() {
        let n = 10;
        let t = table(0.2, 0.3, n, 5);
        let w = WeightVector::power_law(n, 0.5);
        let x = x_moments(&t, &w, 4).unwrap();
        // Visit codes in a scrambled order with naive accumulation.
        let size = 1usize << n;
        let mut acc = [0.0; 5];
        for s in 0..size {
            let c = (s * 617 + 41) % size;
            let xv: f64 = (0..n).map(|i| w.weights()[i] * spin_of(c, i)).sum();
            for (m, a) in acc.iter_mut().enumerate() {
                *a += t.probs()[c] * xv.powi(m as i32);
            }
        }
        for m in 0..=4 {
            assert!((x.values[m] - acc[m]).abs() < 1e-12, "m={m}");
        }
    }

    #[test]
    fn raw_moments_are_bounded() {
        let n = 8;
        let t = table(0.25, 0.3, n, 9);
        let w = WeightVector::power_law(n, 1.0);
        let x = x_moments(&t, &w, 8).unwrap();
        let l1: f64 = w.weights().iter().map(|v| v.abs()).sum();
        for (m, v) in x.values.iter().enumerate() {
            assert!(v.abs() <= l1.powi(m as i32) * (1.0 + 1e-12));
        }
    }

    #[test]
    fn odd_y_moments_vanish_exactly() {
        let n = 11;
        let t = table(0.25, 0.5, n, 2);
        let x = x_moments(&t, &WeightVector::power_law(n, 0.3), 8).unwrap();
        let y = y_moments(&x, 8).unwrap();
        for k in (1..=7).step_by(2) {
            assert_eq!(y[k], 0.0);
        }
        assert!(y_moments(&x, 9).is_err());
    }

    #[test]
    fn free_spin_y_variance() {
        let n = 7;
        let t = table(1e-12, 0.4, n, 2);
        let x = x_moments(&t, &WeightVector::power_law(n, 0.8), 2).unwrap();
        let y = y_moments(&x, 2).unwrap();
        let th = 0.4f64.tanh();
        assert!((y[2] - 2.0 * (1.0 - th * th)).abs() < 1e-8);
    }

    #[test]
    fn y_moments_match_pair_enumeration() {
        for (n, seed) in [(4usize, 1u64), (6, 2), (8, 3)] {
            let t = table(0.25, 0.3, n, seed);
            let w = WeightVector::power_law(n, 0.7);
            let fast = y_moments(&x_moments(&t, &w, 6).unwrap(), 6).unwrap();
            let slow = pair_enumeration::y_moments(&t, &w, 6).unwrap();
            for k in 0..=6 {
                assert!((fast[k] - slow[k]).abs() < 1e-12 * slow[k].abs().max(1.0), "n={n} k={k}");
            }
        }
    }

    #[test]
    fn replica_products() {
        let n = 6;
        let t = table(1e-12, 0.0, n, 4);
        let y = y_moments(&x_moments(&t, &WeightVector::uniform(n), 4).unwrap(), 4).unwrap();
        let v = replica_product(&y, &ReplicaSpec::new(vec![2, 2]).unwrap()).unwrap();
        assert!((v - 4.0).abs() < 1e-9);
        assert_eq!(replica_product(&y, &ReplicaSpec::new(vec![2, 3]).unwrap()).unwrap(), 0.0);
        assert!(replica_product(&y, &ReplicaSpec::new(vec![6]).unwrap()).is_err());
        assert!(ReplicaSpec::new(vec![]).is_err());
    }

    #[test]
    fn free_overlap_moments() {
        let n = 10;
        let t = table(1e-12, 0.0, n, 1);
        assert!((overlap_moment(&t, 2).unwrap() - 1.0 / n as f64).abs() < 1e-8);
        assert!(overlap_moment(&t, 1).unwrap().abs() < 1e-10);
        assert!(overlap_moment(&t, 5).is_err());
        assert!((centered_overlap_moment(&t, 0.0, 2).unwrap() - 0.1).abs() < 1e-8);
    }

    #[test]
    fn overlap_moments_match_pair_enumeration() {
        let t = table(0.2, 0.3, 8, 6);
        for m in 1..=4 {
            let a = overlap_moment(&t, m).unwrap();
            let b = pair_enumeration::overlap_moment(&t, m).unwrap();
            assert!((a - b).abs() < 1e-13, "m={m}: {a} vs {b}");
        }
        let dist = overlap_distribution(&t);
        assert!((dist.iter().sum::<f64>() - 1.0).abs() < 1e-13);
        for order in [2u32, 4, 6] {
            let a = centered_overlap_moment_any(&t, 0.1, order);
            let b = pair_enumeration::centered_overlap_moment(&t, 0.1, order).unwrap();
            assert!((a - b).abs() < 1e-13);
        }
    }

    #[test]
    fn centered_overlap_expansion() {
        let t = table(0.2, 0.3, 8, 6);
        let q = 0.083;
        let c = centered_overlap_moment(&t, q, 2).unwrap();
        let r1 = overlap_moment(&t, 1).unwrap();
        let r2 = overlap_moment(&t, 2).unwrap();
        assert!((c - (r2 - 2.0 * q * r1 + q * q)).abs() < 1e-12);
        assert!(centered_overlap_moment(&t, q, 3).is_err());
        assert!(centered_overlap_moment(&t, q, 6).is_err());
        let slow = pair_enumeration::centered_overlap_moment(&t, q, 4).unwrap();
        assert!((centered_overlap_moment(&t, q, 4).unwrap() - slow).abs() < 1e-13);
    }

    #[test]
    fn t_decomposition_identity() {
        let t = table(0.25, 0.3, 9, 8);
        let mut rng = crate::seed::rng_from_seed(4);
        use rand::Rng;
        for _ in 0..100 {
            let a = SpinConfig::from_code(rng.random_range(0..512), 9);
            let b = SpinConfig::from_code(rng.random_range(0..512), 9);
            assert!(t_decomposition_check(&t, 0.1, (&a, &b)).unwrap() < 1e-12);
        }
    }

    #[test]
    fn t_decomposition_collapses_when_b_vanishes() {
        let t = table(0.2, 0.0, 6, 8);
        let corr = spin_correlations(&t);
        let b = magnetizations(&corr, 6);
        assert!(b.iter().all(|x| x.abs() < 1e-14));
        let a = SpinConfig::from_code(13, 6);
        let c = SpinConfig::from_code(50, 6);
        let d = t_decomposition(&b, 0.0, &a, &c).unwrap();
        assert!((d.t12 - d.overlap).abs() < 1e-14);
    }

    #[test]
    fn t_second_moments_free_and_enumerated() {
        let n = 7;
        let (a, b) = t_second_moments(&table(1e-12, 0.0, n, 1));
        assert!((a - 1.0 / n as f64).abs() < 1e-9);
        assert!(b.abs() < 1e-12);
        let t = table(0.25, 0.4, n, 3);
        let (fast12, fast1) = t_second_moments(&t);
        let (slow12, slow1) = pair_enumeration::t_second_moments(&t).unwrap();
        assert!((fast12 - slow12).abs() < 1e-13);
        assert!((fast1 - slow1).abs() < 1e-13);
        assert!(fast12 >= 0.0 && fast1 >= 0.0);
    }

    #[test]
    fn cross_check_mode_agrees() {
        let t = table(0.25, 0.3, 7, 12);
        assert!(cross_check(&t, &WeightVector::uniform(7)).unwrap() < 1e-10);
        let big = table(0.1, 0.1, 14, 1);
        assert!(matches!(
            pair_enumeration::overlap_moment(&big, 2),
            Err(Error::Capacity { .. })
        ));
    }

    #[test]
    fn overlap_pair_products_relation() {
        // disjoint − shared = −⟨S_1²⟩⟨T_1²⟩.
        let t = table(0.25, 0.3, 8, 5);
        let corr = spin_correlations(&t);
        let (_, t1) = t_second_moments(&t);
        let p = overlap_pair_products(&corr, 8, 1.7, 0.09);
        assert!((p.disjoint - p.shared + 1.7 * t1).abs() < 1e-14);
    }
}
