//! Tree counts, size laws and the auxiliary size distributions.
//!
//! Finite-size quantities are exact (`BigUint` / `BigRational`). Survival
//! probabilities are irrational for `d = 3`, so everything involving `η_∞`,
//! `√(3p)` or `f(p)` is evaluated in `f64` through cancellation-free forms:
//! with `x = 3p − 1` and `s = √(4/p − 3)` we use `η_∞ = 2x / (p(3 + s))`,
//! which stays accurate as `p ↓ 1/3`.

use std::collections::HashMap;
use std::sync::{Arc, Mutex, OnceLock, RwLock};

use num_bigint::{BigInt, BigUint};
use num_rational::BigRational;
use num_traits::{One, ToPrimitive, Zero};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::params::{rational_to_f64, rational_to_string, OffspringParams};

/// Default cutoff `K` for explicit size-law weights.
pub const DEFAULT_CUTOFF: usize = 64;

/// Largest finite size resolved by the sampling tables; larger draws are
/// reported as [`SizeDraw::Overflow`] and quarantined by callers.
pub const SIZE_TABLE_CAP: usize = 1 << 20;

pub fn binomial(n: u64, k: u64) -> BigUint {
    if k > n {
        return BigUint::zero();
    }
    let k = k.min(n - k);
    let mut acc = BigUint::one();
    for i in 0..k {
        acc *= n - i;
        acc /= i + 1;
    }
    acc
}

fn count_cache() -> &'static RwLock<HashMap<u32, Vec<BigUint>>> {
    static CACHE: OnceLock<RwLock<HashMap<u32, Vec<BigUint>>>> = OnceLock::new();
    CACHE.get_or_init(|| RwLock::new(HashMap::new()))
}

/// Number `c_k(d)` of `k`-vertex subtrees of the `d`-ary tree containing the
/// root, `C(dk, k) / ((d − 1)k + 1)`, with `c_0 = 1`.
pub fn count_trees(d: u32, k: usize) -> BigUint {
    assert!(d >= 2, "arity must be at least 2");
    if let Some(v) = count_cache().read().unwrap().get(&d).and_then(|t| t.get(k)) {
        return v.clone();
    }
    let mut guard = count_cache().write().unwrap();
    let table = guard.entry(d).or_default();
    while table.len() <= k {
        let j = table.len() as u64;
        let d = d as u64;
        table.push(binomial(d * j, j) / ((d - 1) * j + 1));
    }
    table[k].clone()
}

/// Number of ordered `j`-tuples of (possibly empty) root subtrees with total
/// size `m`: `j / (dm + j) · C(dm + j, m)`. `forest_count(d, 1, m) = c_m`.
pub fn forest_count(d: u32, j: u32, m: usize) -> BigUint {
    if j == 0 {
        return if m == 0 {
            BigUint::one()
        } else {
            BigUint::zero()
        };
    }
    if j == 1 {
        return count_trees(d, m);
    }
    let (d, j, m) = (d as u64, j as u64, m as u64);
    binomial(d * m + j, m) * j / (d * m + j)
}

/// `c_k / c_{k−1}` in floating point, for `k ≥ 1`.
pub fn count_ratio(d: u32, k: usize) -> f64 {
    debug_assert!(k >= 1);
    let (d, k) = (d as f64, k as f64);
    let mut num = 1.0;
    let mut den = k;
    for t in 0..(d as usize) {
        num *= d * k - t as f64;
    }
    for t in 0..(d as usize - 1) {
        den *= (d - 1.0) * k - t as f64;
    }
    num / den * ((d - 1.0) * (k - 1.0) + 1.0) / ((d - 1.0) * k + 1.0)
}

/// `N_i(r − 1) / N_i(r)` where `N_i` is [`forest_count`], for `r ≥ 1`, `i ≥ 1`.
fn forest_down_ratio(d: u32, i: u32, r: usize) -> f64 {
    let (d, i, r) = (d as f64, i as f64, r as f64);
    let mut num = r * (d * r + i);
    let mut den = d * r - d + i;
    for t in 0..(d as usize - 1) {
        num *= (d - 1.0) * r + i - t as f64;
    }
    for t in 0..(d as usize) {
        den *= d * r + i - t as f64;
    }
    num / den
}

/// Quantile at `u` of the size of the first tree in a uniform ordered
/// `j`-forest (`j ≥ 2`) of total size `m`, whose law is
/// `c_x N_{j−1}(m − x) / N_j(m)`.
///
/// The law puts most of its mass near both ends, so the search walks inward
/// from `0` and from `m` simultaneously.
pub fn first_tree_quantile(d: u32, j: u32, m: usize, u: f64) -> usize {
    debug_assert!(j >= 2);
    if m == 0 {
        return 0;
    }
    let (df, jf, mf) = (d as f64, j as f64, m as f64);
    let mut lo = 0usize;
    let mut p_lo = (jf - 1.0) * ((df - 1.0) * mf + jf) / (jf * (df * mf + jf - 1.0));
    let mut c_lo = p_lo;
    if u <= c_lo {
        return 0;
    }
    let mut hi = m;
    let mut p_hi = (df * mf + jf) / (jf * (df * mf + 1.0));
    for t in 2..=j {
        let t = t as f64;
        p_hi *= ((df - 1.0) * mf + t) / (df * mf + t);
    }
    let mut c_hi = p_hi;
    if u > 1.0 - c_hi {
        return m;
    }
    loop {
        if lo + 1 >= hi {
            return hi;
        }
        if p_lo >= p_hi {
            p_lo *= count_ratio(d, lo + 1) * forest_down_ratio(d, j - 1, m - lo);
            lo += 1;
            c_lo += p_lo;
            if u <= c_lo {
                return lo;
            }
        } else {
            let y = m - hi;
            p_hi /= count_ratio(d, hi) * forest_down_ratio(d, j - 1, y + 1);
            hi -= 1;
            c_hi += p_hi;
            if u > 1.0 - c_hi {
                return hi;
            }
        }
    }
}

/// Quantile of `L_n = min(|T^1|, |T^2|)` for a uniform binary tree with `n`
/// vertices (`d = 2`, `n ≥ 1`).
pub fn min_split_quantile(n: usize, u: f64) -> usize {
    debug_assert!(n >= 1);
    let m = n - 1;
    if m == 0 {
        return 0;
    }
    let half = m / 2;
    // P(A = l) for the first subtree of a 2-forest of size m.
    let mut p = ((m as f64) + 2.0) / (2.0 * (2.0 * m as f64 + 1.0));
    let mut cum = 0.0;
    for l in 0..=half {
        if l > 0 {
            p *= count_ratio(2, l) * forest_down_ratio(2, 1, m - l + 1);
        }
        cum += if 2 * l == m { p } else { 2.0 * p };
        if u <= cum {
            return l;
        }
    }
    half
}

/// `η_k(p) = c_k p^k (1 − p)^{(d−1)k+1}`, exactly.
pub fn eta_exact(params: &OffspringParams, k: usize) -> BigRational {
    let d = params.d();
    let p = params.p();
    let q = BigRational::one() - p;
    let c = BigRational::from_integer(BigInt::from(count_trees(d, k)));
    c * num_traits::pow(p.clone(), k) * num_traits::pow(q, (d as usize - 1) * k + 1)
}

/// `η_k(p)` in floating point.
pub fn eta(params: &OffspringParams, k: usize) -> f64 {
    EtaSeries::new(params.d(), params.p_f64()).nth(k).unwrap()
}

/// Iterator over `η_0(p), η_1(p), …` by the ratio recurrence.
#[derive(Clone, Debug)]
pub struct EtaSeries {
    d: u32,
    step: f64,
    next: f64,
    k: usize,
}

impl EtaSeries {
    pub fn new(d: u32, p: f64) -> Self {
        Self {
            d,
            step: p * (1.0 - p).powi(d as i32 - 1),
            next: 1.0 - p,
            k: 0,
        }
    }
}

impl Iterator for EtaSeries {
    type Item = f64;

    fn next(&mut self) -> Option<f64> {
        let out = self.next;
        self.k += 1;
        self.next = out * count_ratio(self.d, self.k) * self.step;
        Some(out)
    }
}

/// Survival probability `η_∞(p)` as an exact rational, available for `d = 2`.
pub fn eta_inf_exact(params: &OffspringParams) -> Option<BigRational> {
    if params.d() != 2 {
        return None;
    }
    let p = params.p();
    let half = BigRational::new(1.into(), 2.into());
    if *p <= half {
        return Some(BigRational::zero());
    }
    Some((p * BigRational::from_integer(2.into()) - BigRational::one()) / p)
}

fn eta_inf_f64(d: u32, p: f64) -> f64 {
    match d {
        2 => {
            if p <= 0.5 {
                0.0
            } else {
                (2.0 * p - 1.0) / p
            }
        }
        3 => {
            let x = 3.0 * p - 1.0;
            if x <= 0.0 {
                return 0.0;
            }
            let s = (4.0 / p - 3.0).sqrt();
            2.0 * x / (p * (3.0 + s))
        }
        _ => unreachable!("arity validated by OffspringParams"),
    }
}

/// Survival probability `η_∞(p)`; `d = 3` uses the root of
/// `pη² − 3pη + 3p − 1 = 0` in `[0, 1]`.
pub fn eta_inf(params: &OffspringParams) -> Result<f64> {
    if !params.at_least_critical() {
        return Err(Error::Domain(format!("η_∞ needs p ≥ 1/d, got {params}")));
    }
    Ok(eta_inf_f64(params.d(), params.p_f64()))
}

/// Parameter of the Galton–Watson law obtained by conditioning `T(p)` on
/// extinction: `p (1 − η_∞)^{d−1}`.
pub fn dual_p(d: u32, p: f64) -> f64 {
    p * (1.0 - eta_inf_f64(d, p)).powi(d as i32 - 1)
}

/// Pieces of the `d = 3` construction at `p ∈ [1/3, 1]`, all cancellation-free.
#[derive(Clone, Copy, Debug)]
pub struct TernaryConstants {
    pub sqrt3p: f64,
    pub eta_inf: f64,
    /// `f(p)`.
    pub f: f64,
    /// `1 − √(3p)(1 − η_∞)`: probability that `T*` is infinite.
    pub first_infinite: f64,
    /// `pη_∞² / (1 − √(3p)(1 − η_∞))`: probability that `T**` is infinite given `T*` is.
    pub second_infinite_given_infinite: f64,
}

impl TernaryConstants {
    pub fn new(p: f64) -> Result<Self> {
        if !(1.0 / 3.0 - 1e-15..=1.0).contains(&p) {
            return Err(Error::Domain(format!("p = {p} must lie in [1/3, 1]")));
        }
        let x = (3.0 * p - 1.0).max(0.0);
        let sqrt3p = (3.0 * p).sqrt();
        let s = (4.0 / p - 3.0).max(0.0).sqrt();
        let eta_inf = 2.0 * x / (p * (3.0 + s));
        // 1 − √(3p)(1 − η_∞) = x · g and √(3p) − 1 = x / (1 + √(3p)).
        let g = -1.0 / (1.0 + sqrt3p) + 2.0 * sqrt3p / (p * (3.0 + s));
        let f = (1.0 / (1.0 + sqrt3p)) / g;
        let first_infinite = x * g;
        let second_infinite_given_infinite = 4.0 * x / (p * (3.0 + s) * (3.0 + s) * g);
        Ok(Self {
            sqrt3p,
            eta_inf,
            f,
            first_infinite,
            second_infinite_given_infinite,
        })
    }
}

/// `f(p) = (√(3p) − 1) / (1 − √(3p)(1 − η_∞(p)))` on `[1/3, 1]`, with the
/// limit value `1` at `p = 1/3`.
pub fn f_of_p(p: f64) -> Result<f64> {
    Ok(TernaryConstants::new(p)?.f)
}

/// Which size distribution a [`SizeLaw`] describes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum LawKind {
    Eta,
    Lstar,
    LstarstarGivenFinite,
    LstarstarGivenInfinite,
    Split,
}

/// A distribution over `{0, …, K} ∪ {finite > K} ∪ {∞}`.
#[derive(Clone, Debug, Serialize)]
pub struct SizeLaw {
    pub kind: LawKind,
    pub d: u32,
    pub p: String,
    #[serde(rename = "K")]
    pub cutoff: usize,
    pub weights: Vec<f64>,
    pub tail_finite: f64,
    pub infinity: f64,
}

impl SizeLaw {
    fn from_series(
        kind: LawKind,
        params: &OffspringParams,
        cutoff: usize,
        scale: f64,
        infinity: f64,
    ) -> Self {
        let weights: Vec<f64> = EtaSeries::new(params.d(), params.p_f64())
            .take(cutoff + 1)
            .map(|e| scale * e)
            .collect();
        let finite_total = 1.0 - infinity;
        let tail_finite = (finite_total - weights.iter().sum::<f64>()).max(0.0);
        Self {
            kind,
            d: params.d(),
            p: rational_to_string(params.p()),
            cutoff,
            weights,
            tail_finite,
            infinity,
        }
    }

    pub fn total_mass(&self) -> f64 {
        self.weights.iter().sum::<f64>() + self.tail_finite + self.infinity
    }

    /// `P(size ≤ k)` for `k ≤ K`.
    pub fn cdf(&self, k: usize) -> f64 {
        self.weights[..=k.min(self.cutoff)].iter().sum()
    }
}

/// Law of `|T(p)|`.
pub fn eta_law(params: &OffspringParams, cutoff: usize) -> Result<SizeLaw> {
    let inf = eta_inf(params)?;
    Ok(SizeLaw::from_series(LawKind::Eta, params, cutoff, 1.0, inf))
}

/// Law of `L* = |T*(p)|` (`d = 2`): `2pη_k` at finite `k`, `pη_∞` at `∞`.
pub fn lstar_law(params: &OffspringParams, cutoff: usize) -> Result<SizeLaw> {
    if params.d() != 2 {
        return Err(Error::Domain("lstar_law is defined for d = 2".into()));
    }
    let p = params.p_f64();
    let inf = p * eta_inf(params)?;
    Ok(SizeLaw::from_series(
        LawKind::Lstar,
        params,
        cutoff,
        2.0 * p,
        inf,
    ))
}

/// Exact finite weights `2pη_k(p)`, `k ≤ K`, and the exact `∞` atom (`d = 2`).
pub fn lstar_weights_exact(
    params: &OffspringParams,
    cutoff: usize,
) -> Result<(Vec<BigRational>, BigRational)> {
    let inf =
        eta_inf_exact(params).ok_or_else(|| Error::Domain("exact L* weights need d = 2".into()))?;
    let two_p = params.p() * BigRational::from_integer(2.into());
    let weights = (0..=cutoff)
        .map(|k| &two_p * eta_exact(params, k))
        .collect();
    Ok((weights, params.p() * inf))
}

/// Marginal law of `L*` and the conditional laws of `L**` (`d = 3`).
#[derive(Clone, Debug, Serialize)]
pub struct LPairLaw {
    pub lstar: SizeLaw,
    pub given_finite: SizeLaw,
    pub given_infinite: SizeLaw,
}

pub fn lpair_law(params: &OffspringParams, cutoff: usize) -> Result<LPairLaw> {
    if params.d() != 3 {
        return Err(Error::Domain("lpair_law is defined for d = 3".into()));
    }
    let c = TernaryConstants::new(params.p_f64())?;
    let lstar = SizeLaw::from_series(LawKind::Lstar, params, cutoff, c.sqrt3p, c.first_infinite);
    let mut given_finite = lstar.clone();
    given_finite.kind = LawKind::LstarstarGivenFinite;
    let given_infinite = SizeLaw::from_series(
        LawKind::LstarstarGivenInfinite,
        params,
        cutoff,
        c.sqrt3p * c.f,
        c.second_infinite_given_infinite,
    );
    Ok(LPairLaw {
        lstar,
        given_finite,
        given_infinite,
    })
}

/// Law of the ordered tuple of root-subtree sizes of a uniform
/// `(k+1)`-vertex tree: `P(k_1, …, k_d) = ∏ c_{k_i} / c_{k+1}`.
#[derive(Clone, Debug)]
pub struct SplitLaw {
    pub d: u32,
    pub k: usize,
    pub entries: Vec<(Vec<usize>, BigRational)>,
}

/// All ordered `parts`-tuples of non-negative integers summing to `total`,
/// in lexicographic order.
pub fn compositions(total: usize, parts: usize) -> Vec<Vec<usize>> {
    fn rec(total: usize, parts: usize, prefix: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if parts == 1 {
            prefix.push(total);
            out.push(prefix.clone());
            prefix.pop();
            return;
        }
        for first in 0..=total {
            prefix.push(first);
            rec(total - first, parts - 1, prefix, out);
            prefix.pop();
        }
    }
    let mut out = Vec::new();
    if parts == 0 {
        if total == 0 {
            out.push(Vec::new());
        }
        return out;
    }
    rec(total, parts, &mut Vec::with_capacity(parts), &mut out);
    out
}

pub fn split_law(d: u32, k: usize) -> SplitLaw {
    let denom = BigInt::from(count_trees(d, k + 1));
    let entries = compositions(k, d as usize)
        .into_iter()
        .map(|s| {
            let num: BigUint = s.iter().map(|&x| count_trees(d, x)).product();
            (s, BigRational::new(BigInt::from(num), denom.clone()))
        })
        .collect();
    SplitLaw { d, k, entries }
}

impl SplitLaw {
    /// `P(L_{k+1} = l)` for the smaller root subtree (`d = 2`), indexed by `l`.
    pub fn min_law(&self) -> Vec<BigRational> {
        assert_eq!(self.d, 2, "min-size law is defined for d = 2");
        let mut out = vec![BigRational::zero(); self.k / 2 + 1];
        for (s, w) in &self.entries {
            out[s[0].min(s[1])] += w;
        }
        out
    }

    pub fn total(&self) -> BigRational {
        self.entries.iter().map(|(_, w)| w.clone()).sum()
    }

    pub fn min_size_law(&self) -> SizeLaw {
        let weights: Vec<f64> = self.min_law().iter().map(rational_to_f64).collect();
        SizeLaw {
            kind: LawKind::Split,
            d: self.d,
            p: "-".into(),
            cutoff: weights.len() - 1,
            weights,
            tail_finite: 0.0,
            infinity: 0.0,
        }
    }
}

/// Result of inverting a size distribution at a uniform.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
pub enum SizeDraw {
    Finite(usize),
    /// Finite but beyond [`SIZE_TABLE_CAP`].
    Overflow,
    Infinite,
}

impl SizeDraw {
    pub fn is_infinite(self) -> bool {
        self == SizeDraw::Infinite
    }

    pub fn finite(self) -> Option<usize> {
        match self {
            SizeDraw::Finite(k) => Some(k),
            _ => None,
        }
    }
}

/// Cumulative table of a size law for inversion sampling.
#[derive(Debug)]
pub struct SizeTable {
    cdf: Vec<f64>,
    finite_total: f64,
    capped: bool,
}

impl SizeTable {
    /// `weights` must be non-increasing; the table stops once terms are
    /// negligible or at `cap` entries.
    pub fn from_weights(weights: impl Iterator<Item = f64>, finite_total: f64, cap: usize) -> Self {
        let mut cdf = Vec::new();
        let mut acc = 0.0;
        let mut capped = true;
        for w in weights.take(cap) {
            if w < 1e-22 && !cdf.is_empty() {
                capped = false;
                break;
            }
            acc += w;
            cdf.push(acc);
        }
        if cdf.len() < cap {
            capped = false;
        }
        Self {
            cdf,
            finite_total,
            capped,
        }
    }

    pub fn invert(&self, u: f64) -> SizeDraw {
        if u > self.finite_total {
            return SizeDraw::Infinite;
        }
        let idx = self.cdf.partition_point(|&c| c < u);
        if idx < self.cdf.len() {
            SizeDraw::Finite(idx)
        } else if self.capped {
            SizeDraw::Overflow
        } else {
            SizeDraw::Finite(self.cdf.len().saturating_sub(1))
        }
    }

    pub fn finite_total(&self) -> f64 {
        self.finite_total
    }

    /// `P(size ≤ k)` as tabulated.
    pub fn cdf(&self, k: usize) -> f64 {
        self.cdf
            .get(k)
            .copied()
            .unwrap_or(*self.cdf.last().unwrap_or(&0.0))
    }

    pub fn len(&self) -> usize {
        self.cdf.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cdf.is_empty()
    }
}

/// Sampling tables for the size laws used by the samplers and couplings.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum TableKind {
    /// `|T(p)|`.
    Eta,
    /// `L*(p)` for `d = 2`.
    Lstar,
    /// `L*(p)` for `d = 3`; also `L**(p)` given `L*(p) < ∞`.
    TernaryFirst,
    /// `L**(p)` given `L*(p) = ∞` (`d = 3`).
    TernarySecondGivenInfinite,
}

pub fn size_table(kind: TableKind, params: &OffspringParams) -> Arc<SizeTable> {
    type Key = (TableKind, u32, String);
    static CACHE: OnceLock<Mutex<HashMap<Key, Arc<SizeTable>>>> = OnceLock::new();
    let key = (kind, params.d(), rational_to_string(params.p()));
    let cache = CACHE.get_or_init(|| Mutex::new(HashMap::new()));
    if let Some(t) = cache.lock().unwrap().get(&key) {
        return t.clone();
    }
    let d = params.d();
    let p = params.p_f64();
    let series = EtaSeries::new(d, p);
    let (scale, finite_total) = match kind {
        TableKind::Eta => (1.0, 1.0 - eta_inf_f64(d, p)),
        TableKind::Lstar => (2.0 * p, 2.0 * p * (1.0 - eta_inf_f64(d, p))),
        TableKind::TernaryFirst => {
            let c = TernaryConstants::new(p).expect("validated p");
            (c.sqrt3p, 1.0 - c.first_infinite)
        }
        TableKind::TernarySecondGivenInfinite => {
            let c = TernaryConstants::new(p).expect("validated p");
            (c.sqrt3p * c.f, 1.0 - c.second_infinite_given_infinite)
        }
    };
    let table = Arc::new(SizeTable::from_weights(
        series.map(|e| scale * e),
        finite_total,
        SIZE_TABLE_CAP,
    ));
    cache.lock().unwrap().insert(key, table.clone());
    table
}

/// Exact weights as `f64`, for callers that only need a float view.
pub fn to_f64_vec(v: &[BigRational]) -> Vec<f64> {
    v.iter().map(|r| r.to_f64().unwrap_or(f64::NAN)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params(d: u32, p: &str) -> OffspringParams {
        OffspringParams::parse(d, p).unwrap()
    }

    fn rat(n: i64, d: i64) -> BigRational {
        BigRational::new(n.into(), d.into())
    }

    #[test]
    fn small_counts() {
        assert_eq!(count_trees(2, 3), 5u32.into());
        assert_eq!(count_trees(3, 2), 3u32.into());
        assert_eq!(count_trees(2, 4), 14u32.into());
        assert_eq!(count_trees(2, 8), 1430u32.into());
        assert_eq!(count_trees(3, 4), 55u32.into());
        assert_eq!(count_trees(2, 0), 1u32.into());
        for d in 2..=5 {
            assert_eq!(count_trees(d, 2), d.into());
        }
    }

    #[test]
    fn forest_counts_sum_over_first_tree() {
        for d in 2..=3 {
            for j in 2..=3 {
                for m in 0..15 {
                    let total: BigUint = (0..=m)
                        .map(|x| count_trees(d, x) * forest_count(d, j - 1, m - x))
                        .sum();
                    assert_eq!(total, forest_count(d, j, m));
                }
            }
            for k in 1..12 {
                assert_eq!(forest_count(d, d, k - 1), count_trees(d, k));
            }
        }
    }

    #[test]
    fn count_ratio_matches_exact() {
        for d in 2..=3 {
            for k in 1..60 {
                let exact =
                    BigRational::new(count_trees(d, k).into(), count_trees(d, k - 1).into());
                let r = count_ratio(d, k);
                assert!((r - rational_to_f64(&exact)).abs() < 1e-12 * r);
            }
        }
    }

    #[test]
    fn first_tree_quantile_matches_exact_cdf() {
        for d in 2..=3u32 {
            for j in 2..=d {
                for m in [0usize, 1, 2, 5, 13, 40] {
                    let total = BigInt::from(forest_count(d, j, m));
                    let mut cum = BigRational::zero();
                    for x in 0..=m {
                        let w = BigInt::from(count_trees(d, x) * forest_count(d, j - 1, m - x));
                        let prev = rational_to_f64(&cum);
                        cum += BigRational::new(w, total.clone());
                        let next = rational_to_f64(&cum);
                        if next - prev > 1e-9 {
                            let mid = 0.5 * (prev + next);
                            assert_eq!(first_tree_quantile(d, j, m, mid), x, "d={d} j={j} m={m}");
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn min_split_quantile_matches_exact_law() {
        for n in 1..20 {
            let law = split_law(2, n - 1).min_law();
            let mut cum = 0.0;
            for (l, w) in law.iter().enumerate() {
                let w = rational_to_f64(w);
                if w > 1e-9 {
                    assert_eq!(min_split_quantile(n, cum + 0.5 * w), l, "n={n}");
                }
                cum += w;
            }
        }
    }

    #[test]
    fn eta_values() {
        assert_eq!(eta_exact(&params(2, "1/2"), 0), rat(1, 2));
        assert_eq!(eta_exact(&params(2, "1/2"), 1), rat(1, 8));
        let expect = rat(3, 1) * rat(1, 9) * num_traits::pow(rat(2, 3), 5);
        assert_eq!(eta_exact(&params(3, "1/3"), 2), expect);
        assert!((eta(&params(2, "1/2"), 1) - 0.125).abs() < 1e-15);
    }

    #[test]
    fn eta_inf_values() {
        assert_eq!(eta_inf(&params(2, "1/2")).unwrap(), 0.0);
        assert!((eta_inf(&params(3, "1")).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(eta_inf_exact(&params(2, "3/4")).unwrap(), rat(2, 3));
        assert!(eta_inf(&OffspringParams::percolation(2, rat(1, 4)).unwrap()).is_err());
    }

    #[test]
    fn eta_inf_d3_matches_bisection() {
        for p in ["0.34", "0.4", "0.5", "0.75", "0.9"] {
            let pr = params(3, p);
            let pf = pr.p_f64();
            // Fixed point of η = p(1 − (1 − η)^3) on (0, 1].
            let g = |e: f64| pf * (1.0 - (1.0 - e).powi(3)) - e;
            let (mut lo, mut hi) = (1e-9, 1.0);
            for _ in 0..200 {
                let mid = 0.5 * (lo + hi);
                if g(mid) > 0.0 {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
            let e = eta_inf(&pr).unwrap();
            assert!((e - lo).abs() < 1e-12, "p={p}: {e} vs {lo}");
            assert!(g(e).abs() < 1e-12);
        }
    }

    #[test]
    fn f_values() {
        assert!((f_of_p(1.0).unwrap() - (3f64.sqrt() - 1.0)).abs() < 1e-14);
        assert!((f_of_p(1.0 / 3.0).unwrap() - 1.0).abs() < 1e-12);
        assert!((f_of_p(1.0 / 3.0 + 1e-6).unwrap() - 1.0).abs() < 1e-3);
        let half = f_of_p(0.5).unwrap();
        assert!(half > 3f64.sqrt() - 1.0 && half < 1.0);
        assert!(f_of_p(0.3).is_err());
        assert!(f_of_p(1.2).is_err());
    }

    #[test]
    fn f_matches_displayed_formula_away_from_critical() {
        for p in [0.4f64, 0.5, 0.7, 0.95] {
            let direct = ((3.0f64 * p).sqrt() - 1.0)
                / (1.0 - 3f64.sqrt() / 2.0 * ((4.0f64 - 3.0 * p).sqrt() - f64::sqrt(p)));
            assert!((f_of_p(p).unwrap() - direct).abs() < 1e-12);
        }
    }

    #[test]
    fn lstar_examples() {
        let law = lstar_law(&params(2, "1/2"), DEFAULT_CUTOFF).unwrap();
        assert!((law.weights[0] - 0.5).abs() < 1e-15);
        assert_eq!(law.infinity, 0.0);
        let law = lstar_law(&params(2, "1"), DEFAULT_CUTOFF).unwrap();
        assert_eq!(law.infinity, 1.0);
        assert!(law.weights.iter().all(|&w| w == 0.0));
        assert!(lstar_law(&params(3, "1/2"), 8).is_err());
    }

    #[test]
    fn lstar_exact_mass() {
        for p in ["1/2", "3/5", "3/4", "1"] {
            let pr = params(2, p);
            let (w, inf) = lstar_weights_exact(&pr, 10).unwrap();
            let ei = eta_inf_exact(&pr).unwrap();
            let finite_total =
                pr.p() * BigRational::from_integer(2.into()) * (BigRational::one() - ei);
            assert_eq!(finite_total + inf.clone(), BigRational::one());
            assert!(w.iter().sum::<BigRational>() + inf <= BigRational::one());
        }
    }

    #[test]
    fn lpair_examples() {
        let law = lpair_law(&params(3, "1/3"), DEFAULT_CUTOFF).unwrap();
        assert!(law.lstar.infinity.abs() < 1e-15);
        let law = lpair_law(&params(3, "1"), DEFAULT_CUTOFF).unwrap();
        assert!((law.given_infinite.infinity - 1.0).abs() < 1e-14);
        let p = 0.6;
        let c = TernaryConstants::new(p).unwrap();
        let ei = c.eta_inf;
        let displayed = 1.0 - p * ei * ei / (1.0 - c.sqrt3p * (1.0 - ei));
        let via_identity = c.sqrt3p * (1.0 - ei) * c.f;
        assert!((displayed - (1.0 - c.second_infinite_given_infinite)).abs() < 1e-12);
        assert!((displayed - via_identity).abs() < 1e-12);
        for p in ["1/3", "0.4", "0.6", "0.9", "1"] {
            let law = lpair_law(&params(3, p), DEFAULT_CUTOFF).unwrap();
            for l in [&law.lstar, &law.given_finite, &law.given_infinite] {
                assert!((l.total_mass() - 1.0).abs() < 1e-12, "p={p} {:?}", l.kind);
            }
        }
    }

    #[test]
    fn split_examples() {
        let s = split_law(2, 2).min_law();
        assert_eq!(s, vec![rat(4, 5), rat(1, 5)]);
        let s = split_law(2, 1);
        assert_eq!(
            s.entries,
            vec![(vec![0, 1], rat(1, 2)), (vec![1, 0], rat(1, 2))]
        );
        let s = split_law(3, 1);
        assert_eq!(s.entries.len(), 3);
        assert!(s.entries.iter().all(|(_, w)| *w == rat(1, 3)));
        for d in 2..=3 {
            for k in 0..12 {
                assert_eq!(split_law(d, k).total(), BigRational::one());
            }
        }
    }

    #[test]
    fn size_table_inversion() {
        let pr = params(2, "3/4");
        let t = size_table(TableKind::Lstar, &pr);
        assert!((t.finite_total() - 0.5).abs() < 1e-15);
        assert_eq!(t.invert(0.9), SizeDraw::Infinite);
        assert_eq!(t.invert(0.1), SizeDraw::Finite(0));
        let crit = size_table(TableKind::Eta, &params(2, "1/2"));
        assert_eq!(crit.invert(1.0 - 1e-12), SizeDraw::Overflow);
    }
}
