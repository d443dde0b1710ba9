//! Exact depth-window laws, goodness-of-fit testing, the conditioned
//! counterexample and the closed-form checks.
//!
//! Window laws are computed by recursion on the remaining depth. A window of
//! depth `h` rooted at a vertex is built from the root's presence and the
//! depth-`h − 1` windows of its children; boundary vertices carry an alive
//! flag when they have at least one child.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::ops::{Add, Mul, Sub};

use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{One, ToPrimitive, Zero};
use serde::Serialize;
use statrs::distribution::{ChiSquared, ContinuousCDF};

use crate::combinatorics::{
    compositions, count_trees, eta_inf, f_of_p, EtaSeries, TernaryConstants,
};
use crate::error::{Error, Result};
use crate::kernels::{check_domination, Domination, InfeasibilityCertificate};
use crate::params::{parse_rational, rational_to_f64, rational_to_string, OffspringParams};
use crate::tree::{DTree, VertexLabel, WindowedTree};

/// Largest window support the exact laws will enumerate.
pub const SUPPORT_CAP: usize = 1 << 20;

/// Probability weights: `f64` or exact rationals.
pub trait Weight:
    Clone
    + Zero
    + One
    + PartialOrd
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + fmt::Debug
{
    fn to_f64(&self) -> f64;
}

impl Weight for f64 {
    fn to_f64(&self) -> f64 {
        *self
    }
}

impl Weight for BigRational {
    fn to_f64(&self) -> f64 {
        ToPrimitive::to_f64(self).unwrap_or(f64::NAN)
    }
}

type Law<W> = BTreeMap<WindowedTree, W>;

/// An exact law on depth-`depth` windows.
#[derive(Clone, Debug)]
pub struct WindowLaw<W = f64> {
    pub d: u32,
    pub depth: usize,
    pub entries: BTreeMap<WindowedTree, W>,
}

impl<W: Weight> WindowLaw<W> {
    pub fn total(&self) -> W {
        self.entries.values().fold(W::zero(), |a, w| a + w.clone())
    }

    pub fn prob(&self, w: &WindowedTree) -> W {
        self.entries.get(w).cloned().unwrap_or_else(W::zero)
    }

    pub fn to_f64(&self) -> WindowLaw<f64> {
        WindowLaw {
            d: self.d,
            depth: self.depth,
            entries: self
                .entries
                .iter()
                .map(|(k, v)| (k.clone(), v.to_f64()))
                .collect(),
        }
    }

    /// `(hex encoding, probability)` rows in window order.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("encoding,probability\n");
        for (w, p) in &self.entries {
            out.push_str(&format!(
                "{},{:.17e}\n",
                hex::encode(w.encode()),
                p.to_f64()
            ));
        }
        out
    }
}

/// Total variation distance between two window laws.
pub fn tv_distance(a: &WindowLaw, b: &WindowLaw) -> f64 {
    let mut diff = 0.0;
    for (k, p) in &a.entries {
        diff += (p - b.entries.get(k).copied().unwrap_or(0.0)).abs();
    }
    for (k, q) in &b.entries {
        if !a.entries.contains_key(k) {
            diff += q.abs();
        }
    }
    diff / 2.0
}

/// Which tree law a window law describes.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum LawId {
    /// Percolation cluster `T(p)`, any `0 < p ≤ 1`.
    Gw(BigRational),
    /// Uniform tree on `k` vertices.
    UniformK(usize),
    /// Incipient infinite cluster.
    Iic,
    /// `T_∞(p)`.
    Tinf(BigRational),
    /// `T*(p)` (`d = 2`).
    Tstar(BigRational),
}

impl LawId {
    /// Parses a law name with its parameter, e.g. `("tinf", Some("3/4"), None)`.
    pub fn parse(name: &str, p: Option<&str>, k: Option<usize>) -> Result<Self> {
        let need_p = || -> Result<BigRational> {
            parse_rational(p.ok_or_else(|| Error::Domain(format!("law `{name}` needs p")))?)
        };
        Ok(match name {
            "gw" => LawId::Gw(need_p()?),
            "uniform" | "uniform_k" => {
                LawId::UniformK(k.ok_or_else(|| Error::Domain("law `uniform` needs k".into()))?)
            }
            "iic" => LawId::Iic,
            "tinf" => LawId::Tinf(need_p()?),
            "tstar" => LawId::Tstar(need_p()?),
            _ => return Err(Error::Domain(format!("unknown law `{name}`"))),
        })
    }
}

impl fmt::Display for LawId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LawId::Gw(p) => write!(f, "gw({})", rational_to_string(p)),
            LawId::UniformK(k) => write!(f, "uniform_k({k})"),
            LawId::Iic => write!(f, "iic"),
            LawId::Tinf(p) => write!(f, "tinf({})", rational_to_string(p)),
            LawId::Tstar(p) => write!(f, "tstar({})", rational_to_string(p)),
        }
    }
}

fn put<W: Weight>(law: &mut Law<W>, w: WindowedTree, x: W) {
    if x.is_zero() {
        return;
    }
    let slot = law.entry(w).or_insert_with(W::zero);
    *slot = slot.clone() + x;
}

fn pow<W: Weight>(x: &W, n: u32) -> W {
    (0..n).fold(W::one(), |a, _| a * x.clone())
}

/// Depth-0 law with the given masses on `∅`, `{o}` and `{o}` alive.
fn leaf_law<W: Weight>(d: u32, empty: W, dead: W, alive: W) -> Law<W> {
    let mut law = Law::new();
    put(&mut law, WindowedTree::empty(d, 0), empty);
    put(&mut law, WindowedTree::root_only(d, 0, false), dead);
    put(&mut law, WindowedTree::root_only(d, 0, true), alive);
    law
}

/// Adds `coef · ∏ children[i](w_i)` for every combination of child windows,
/// the root being present, into `out`.
fn attach<W: Weight>(
    out: &mut Law<W>,
    d: u32,
    h: usize,
    coef: W,
    children: &[&Law<W>],
) -> Result<()> {
    if coef.is_zero() {
        return Ok(());
    }
    let mut partial = vec![(WindowedTree::root_only(d, h, false), coef)];
    for (i, child) in children.iter().enumerate() {
        let at = VertexLabel::root().child(i as u8 + 1);
        let mut next = Vec::with_capacity(partial.len() * child.len());
        for (w, x) in &partial {
            for (cw, y) in child.iter() {
                let mut w2 = w.clone();
                if !cw.is_empty() {
                    w2.graft(&at, cw)?;
                }
                next.push((w2, x.clone() * y.clone()));
            }
        }
        if next.len() > SUPPORT_CAP {
            return Err(Error::CapExceeded {
                what: "window support",
                value: next.len(),
                cap: SUPPORT_CAP,
            });
        }
        partial = next;
    }
    for (w, x) in partial {
        put(out, w, x);
    }
    Ok(())
}

/// Unconditioned cluster at density `p`.
fn gw_law<W: Weight>(d: u32, p: &W, h: usize) -> Result<Law<W>> {
    let q = W::one() - p.clone();
    let none = pow(&q, d);
    if h == 0 {
        return Ok(leaf_law(
            d,
            q,
            p.clone() * none.clone(),
            p.clone() * (W::one() - none),
        ));
    }
    let child = gw_law(d, p, h - 1)?;
    let mut law = Law::new();
    put(&mut law, WindowedTree::empty(d, h), q);
    attach(&mut law, d, h, p.clone(), &vec![&child; d as usize])?;
    Ok(law)
}

/// The cluster restricted to the event that it is finite (total mass
/// `1 − η_∞`).
fn finite_law<W: Weight>(d: u32, p: &W, eta: &W, h: usize) -> Result<Law<W>> {
    let q = W::one() - p.clone();
    if h == 0 {
        let dead = p.clone() * pow(&q, d);
        let alive = p.clone() - eta.clone() - dead.clone();
        return Ok(leaf_law(d, q, dead, alive));
    }
    let child = finite_law(d, p, eta, h - 1)?;
    let mut law = Law::new();
    put(&mut law, WindowedTree::empty(d, h), q);
    attach(&mut law, d, h, p.clone(), &vec![&child; d as usize])?;
    Ok(law)
}

/// Cluster conditioned on survival: the root is present and a nonempty set
/// `S` of children carries surviving subtrees, so
/// `P(w) = Σ_S p η^{|S|−1} ∏_{i∈S} N(w_i) ∏_{i∉S} F(w_i)`. At `η = 0` only
/// `|S| = 1` contributes, which is the backbone picture.
fn survival_law<W: Weight>(d: u32, p: &W, eta: &W, h: usize) -> Result<Law<W>> {
    if h == 0 {
        return Ok(leaf_law(d, W::zero(), W::zero(), W::one()));
    }
    let inf = survival_law(d, p, eta, h - 1)?;
    let fin = finite_law(d, p, eta, h - 1)?;
    let mut law = Law::new();
    for s in 1u32..(1 << d) {
        let coef = p.clone() * pow(eta, s.count_ones() - 1);
        let children: Vec<&Law<W>> = (0..d)
            .map(|i| if s >> i & 1 == 1 { &inf } else { &fin })
            .collect();
        attach(&mut law, d, h, coef, &children)?;
    }
    Ok(law)
}

/// Incipient infinite cluster from its backbone: a uniform child continues
/// the backbone and the others carry critical clusters.
fn iic_law<W: Weight>(d: u32, h: usize, inv_d: &W) -> Result<Law<W>> {
    if h == 0 {
        return Ok(leaf_law(d, W::zero(), W::zero(), W::one()));
    }
    let spine = iic_law(d, h - 1, inv_d)?;
    let side = gw_law(d, inv_d, h - 1)?;
    let mut law = Law::new();
    for z in 0..d as usize {
        let mut children = vec![&side; d as usize];
        children[z] = &spine;
        attach(&mut law, d, h, inv_d.clone(), &children)?;
    }
    Ok(law)
}

/// Window of a uniform `k`-vertex tree. Child laws at depth 0 only see
/// `min(size, 2)`, so compositions are aggregated by that class first.
fn uniform_law(
    d: u32,
    k: usize,
    h: usize,
    memo: &mut HashMap<(usize, usize), Law<BigRational>>,
) -> Result<Law<BigRational>> {
    if let Some(l) = memo.get(&(k, h)) {
        return Ok(l.clone());
    }
    let mut law = Law::new();
    if k == 0 {
        put(&mut law, WindowedTree::empty(d, h), BigRational::one());
    } else if h == 0 {
        put(
            &mut law,
            WindowedTree::of_size_at_root(d, k),
            BigRational::one(),
        );
    } else {
        let total = BigRational::from_integer(BigInt::from(count_trees(d, k)));
        let mut grouped: BTreeMap<Vec<usize>, BigRational> = BTreeMap::new();
        for comp in compositions(k - 1, d as usize) {
            let w: BigInt = comp
                .iter()
                .map(|&s| BigInt::from(count_trees(d, s)))
                .product();
            let class: Vec<usize> = if h == 1 {
                comp.iter().map(|&s| s.min(2)).collect()
            } else {
                comp
            };
            let slot = grouped.entry(class).or_insert_with(BigRational::zero);
            *slot += BigRational::from_integer(w);
        }
        for (class, w) in grouped {
            let children: Vec<Law<BigRational>> = class
                .iter()
                .map(|&s| uniform_law(d, s, h - 1, memo))
                .collect::<Result<_>>()?;
            let refs: Vec<&Law<BigRational>> = children.iter().collect();
            attach(&mut law, d, h, w / &total, &refs)?;
        }
    }
    memo.insert((k, h), law.clone());
    Ok(law)
}

/// Exact window law of a uniform `k`-vertex tree.
pub fn uniform_window_law(d: u32, k: usize, depth: usize) -> Result<WindowLaw<BigRational>> {
    let mut memo = HashMap::new();
    Ok(WindowLaw {
        d,
        depth,
        entries: uniform_law(d, k, depth, &mut memo)?,
    })
}

/// Exact window law of the incipient infinite cluster.
pub fn iic_window_law(d: u32, depth: usize) -> Result<WindowLaw<BigRational>> {
    let inv_d = BigRational::new(BigInt::one(), BigInt::from(d));
    Ok(WindowLaw {
        d,
        depth,
        entries: iic_law(d, depth, &inv_d)?,
    })
}

fn mix<W: Weight>(parts: Vec<(W, Law<W>)>) -> Law<W> {
    let mut out = Law::new();
    for (c, law) in parts {
        for (w, x) in law {
            put(&mut out, w, c.clone() * x);
        }
    }
    out
}

/// Rational `η_∞(p)` where it is rational: always for `d = 2`, and at
/// `p ∈ {1/3, 1}` for `d = 3`.
fn eta_inf_rational(d: u32, p: &BigRational) -> Option<BigRational> {
    let one = BigRational::one();
    let crit = BigRational::new(BigInt::one(), BigInt::from(d));
    if *p <= crit {
        return Some(BigRational::zero());
    }
    match d {
        2 => Some((p * BigRational::from_integer(2.into()) - &one) / p),
        _ if *p == one => Some(one),
        _ => None,
    }
}

fn validated(d: u32, p: &BigRational, conditioned: bool) -> Result<OffspringParams> {
    if conditioned {
        OffspringParams::new(d, p.clone())
    } else {
        OffspringParams::percolation(d, p.clone())
    }
}

/// Exact window law with rational weights, where every input is rational.
pub fn exact_window_law_rational(
    law: &LawId,
    d: u32,
    depth: usize,
) -> Result<WindowLaw<BigRational>> {
    let entries = match law {
        LawId::Gw(p) => {
            validated(d, p, false)?;
            gw_law(d, p, depth)?
        }
        LawId::UniformK(k) => return uniform_window_law(d, *k, depth),
        LawId::Iic => return iic_window_law(d, depth),
        LawId::Tinf(p) | LawId::Tstar(p) => {
            validated(d, p, true)?;
            let eta = eta_inf_rational(d, p).ok_or_else(|| {
                Error::Domain(format!(
                    "η_∞ is irrational at d = {d}, p = {}",
                    rational_to_string(p)
                ))
            })?;
            let inf = survival_law(d, p, &eta, depth)?;
            if let LawId::Tstar(_) = law {
                if d != 2 {
                    return Err(Error::Domain("T* is defined for d = 2".into()));
                }
                let two_p = p * BigRational::from_integer(2.into());
                mix(vec![
                    (two_p, finite_law(d, p, &eta, depth)?),
                    (p * &eta, inf),
                ])
            } else {
                inf
            }
        }
    };
    Ok(WindowLaw { d, depth, entries })
}

/// Exact window law in floating point.
pub fn exact_window_law(law: &LawId, d: u32, depth: usize) -> Result<WindowLaw> {
    match law {
        LawId::Gw(_) | LawId::UniformK(_) | LawId::Iic => {
            return Ok(exact_window_law_rational(law, d, depth)?.to_f64())
        }
        _ => {}
    }
    let (LawId::Tinf(pr) | LawId::Tstar(pr)) = law else {
        unreachable!()
    };
    let params = validated(d, pr, true)?;
    let p = params.p_f64();
    let eta = eta_inf(&params)?;
    let inf = survival_law(d, &p, &eta, depth)?;
    let entries = match law {
        LawId::Tstar(_) => {
            if d != 2 {
                return Err(Error::Domain("T* is defined for d = 2".into()));
            }
            mix(vec![
                (2.0 * p, finite_law(d, &p, &eta, depth)?),
                (p * eta, inf),
            ])
        }
        _ => inf,
    };
    Ok(WindowLaw { d, depth, entries })
}

/// Joint window law of `(T*(p), T**(p))` for `d = 3`.
pub fn tstar_pair_window_law(
    p: &BigRational,
    depth: usize,
) -> Result<BTreeMap<(WindowedTree, WindowedTree), f64>> {
    let params = OffspringParams::new(3, p.clone())?;
    let pf = params.p_f64();
    let c = TernaryConstants::new(pf)?;
    let fin = finite_law(3, &pf, &c.eta_inf, depth)?;
    let inf = survival_law(3, &pf, &c.eta_inf, depth)?;
    // First finite: √(3p)F ⊗ (√(3p)F + q₁N); first infinite: q₁N ⊗ (√(3p)fF + q∞N).
    let after_finite = mix(vec![
        (c.sqrt3p, fin.clone()),
        (c.first_infinite, inf.clone()),
    ]);
    let after_infinite = mix(vec![
        (c.sqrt3p * c.f, fin.clone()),
        (c.second_infinite_given_infinite, inf.clone()),
    ]);
    let mut out = BTreeMap::new();
    for (first, w1, second) in [
        (&fin, c.sqrt3p, &after_finite),
        (&inf, c.first_infinite, &after_infinite),
    ] {
        for (a, x) in first {
            for (b, y) in second {
                let v = w1 * x * y;
                if v != 0.0 {
                    *out.entry((a.clone(), b.clone())).or_insert(0.0) += v;
                }
            }
        }
    }
    Ok(out)
}

/// Window law by direct enumeration of percolation configurations on the
/// depth-`depth + 1` ball. Survival beyond the ball is weighted by
/// `1 − (1 − η_∞/p)^m` for `m` cluster vertices at depth `depth + 1`; at
/// criticality the weight is `m / E[m]`, the size-biasing that defines the
/// incipient infinite cluster. Supports `gw`, `tinf` and `iic`.
pub fn brute_force_window_law(law: &LawId, d: u32, depth: usize) -> Result<WindowLaw> {
    let (p, mode) = match law {
        LawId::Gw(p) => {
            validated(d, p, false)?;
            (rational_to_f64(p), 0)
        }
        LawId::Tinf(p) => {
            let params = validated(d, p, true)?;
            if params.is_critical() {
                (1.0 / d as f64, 2)
            } else {
                (params.p_f64(), 1)
            }
        }
        LawId::Iic => (1.0 / d as f64, 2),
        _ => return Err(Error::Domain(format!("no brute-force oracle for {law}"))),
    };
    let eta = if mode == 1 {
        eta_inf(&validated(d, law_p(law), true)?)?
    } else {
        0.0
    };
    let mut ball = vec![VertexLabel::root()];
    let mut i = 0;
    while i < ball.len() {
        if ball[i].depth() <= depth {
            for c in 1..=d as u8 {
                ball.push(ball[i].child(c));
            }
        }
        i += 1;
    }
    if ball.len() > 22 {
        return Err(Error::CapExceeded {
            what: "brute-force ball size",
            value: ball.len(),
            cap: 22,
        });
    }
    let index: HashMap<VertexLabel, usize> = ball
        .iter()
        .cloned()
        .enumerate()
        .map(|(i, v)| (v, i))
        .collect();
    let mut entries = BTreeMap::new();
    for mask in 0u32..(1 << ball.len()) {
        let retained = |i: usize| mask >> i & 1 == 1;
        let mut weight = 1.0;
        for j in 0..ball.len() {
            weight *= if retained(j) { p } else { 1.0 - p };
        }
        let mut in_cluster = vec![false; ball.len()];
        for (j, v) in ball.iter().enumerate() {
            in_cluster[j] = retained(j) && v.parent().map_or(true, |u| in_cluster[index[&u]]);
        }
        let boundary = ball
            .iter()
            .enumerate()
            .filter(|(j, v)| in_cluster[*j] && v.depth() == depth + 1)
            .count();
        let factor = match mode {
            0 => 1.0,
            1 => (1.0 - (1.0 - eta / p).powi(boundary as i32)) / eta,
            _ => boundary as f64 / (p * (p * d as f64).powi(depth as i32 + 1)),
        };
        if factor == 0.0 || weight == 0.0 {
            continue;
        }
        let mut w = WindowedTree::empty(d, depth);
        for (j, v) in ball.iter().enumerate() {
            if in_cluster[j] && v.depth() <= depth {
                let alive =
                    v.depth() == depth && (1..=d as u8).any(|c| in_cluster[index[&v.child(c)]]);
                w.insert(v.clone(), alive)?;
            }
        }
        *entries.entry(w).or_insert(0.0) += weight * factor;
    }
    Ok(WindowLaw { d, depth, entries })
}

fn law_p(law: &LawId) -> &BigRational {
    match law {
        LawId::Gw(p) | LawId::Tinf(p) | LawId::Tstar(p) => p,
        _ => unreachable!("law without a density"),
    }
}

/// Thresholds for [`compare`].
#[derive(Clone, Copy, Debug, Serialize)]
pub struct CompareConfig {
    pub significance: f64,
    pub max_quarantine_rate: f64,
    /// Cells with smaller expected counts are pooled.
    pub min_expected: f64,
}

impl Default for CompareConfig {
    fn default() -> Self {
        Self {
            significance: 1e-3,
            max_quarantine_rate: 0.01,
            min_expected: 5.0,
        }
    }
}

/// Outcome of a goodness-of-fit comparison.
#[derive(Clone, Debug, Serialize)]
pub struct TestReport {
    pub n: usize,
    pub quarantined: usize,
    pub quarantine_rate: f64,
    pub cells: usize,
    pub chi_square: f64,
    pub dof: usize,
    pub p_value: f64,
    pub tv: f64,
    /// Samples that fell outside the support of the exact law.
    pub out_of_support: usize,
    pub significance: f64,
    pub pass: bool,
}

impl fmt::Display for TestReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} n={} chi2={:.2} dof={} p={:.4} tv={:.5} quarantine={:.4}",
            if self.pass { "PASS" } else { "FAIL" },
            self.n,
            self.chi_square,
            self.dof,
            self.p_value,
            self.tv,
            self.quarantine_rate
        )
    }
}

/// Chi-square and total-variation comparison of observed counts with an
/// exact law. Cells with expected count below `min_expected` are pooled
/// (smallest first); a pool still too small is merged into the next cell.
pub fn compare_counts<K: Ord>(
    law: &BTreeMap<K, f64>,
    counts: &BTreeMap<K, usize>,
    quarantined: usize,
    cfg: &CompareConfig,
) -> TestReport {
    let n: usize = counts.values().sum();
    let nf = n as f64;
    let out_of_support: usize = counts
        .iter()
        .filter(|(k, _)| law.get(*k).map_or(true, |&p| p <= 0.0))
        .map(|(_, &c)| c)
        .sum();
    let mut tv = 0.0;
    for (k, &p) in law {
        let emp = counts.get(k).copied().unwrap_or(0) as f64 / nf.max(1.0);
        tv += (emp - p).abs();
    }
    tv = (tv + out_of_support as f64 / nf.max(1.0)) / 2.0;

    let mut cells: Vec<(f64, f64)> = law
        .iter()
        .filter(|(_, &p)| p > 0.0)
        .map(|(k, &p)| (nf * p, counts.get(k).copied().unwrap_or(0) as f64))
        .collect();
    cells.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut pooled: Vec<(f64, f64)> = Vec::new();
    let mut pool = (0.0, 0.0);
    for (e, o) in cells {
        if e < cfg.min_expected {
            pool.0 += e;
            pool.1 += o;
        } else if pool.0 > 0.0 && pool.0 < cfg.min_expected {
            pooled.push((e + pool.0, o + pool.1));
            pool = (0.0, 0.0);
        } else {
            pooled.push((e, o));
        }
    }
    if pool.0 > 0.0 {
        if pool.0 < cfg.min_expected && !pooled.is_empty() {
            let last = pooled.len() - 1;
            pooled[last].0 += pool.0;
            pooled[last].1 += pool.1;
        } else {
            pooled.push(pool);
        }
    }
    let chi_square: f64 = pooled.iter().map(|(e, o)| (o - e) * (o - e) / e).sum();
    let dof = pooled.len().saturating_sub(1);
    let p_value = if out_of_support > 0 {
        0.0
    } else if dof == 0 {
        1.0
    } else {
        ChiSquared::new(dof as f64)
            .map(|c| c.sf(chi_square))
            .unwrap_or(0.0)
    };
    let total = n + quarantined;
    let quarantine_rate = if total == 0 {
        0.0
    } else {
        quarantined as f64 / total as f64
    };
    TestReport {
        n,
        quarantined,
        quarantine_rate,
        cells: pooled.len(),
        chi_square,
        dof,
        p_value,
        tv,
        out_of_support,
        significance: cfg.significance,
        pass: n > 0 && p_value > cfg.significance && quarantine_rate < cfg.max_quarantine_rate,
    }
}

/// [`compare_counts`] over a stream of samples.
pub fn compare<K: Ord>(
    law: &BTreeMap<K, f64>,
    samples: impl IntoIterator<Item = K>,
    quarantined: usize,
    cfg: &CompareConfig,
) -> TestReport {
    let mut counts = BTreeMap::new();
    for s in samples {
        *counts.entry(s).or_insert(0usize) += 1;
    }
    compare_counts(law, &counts, quarantined, cfg)
}

/// Result of [`counterexample_demo`].
#[derive(Clone, Debug, Serialize)]
pub struct CounterexampleReport {
    pub r1: String,
    pub r2: String,
    /// Depth-1 laws (number of children, probability) given survival.
    pub conditioned_left: Vec<(usize, String)>,
    pub conditioned_right: Vec<(usize, String)>,
    pub conditioned_feasible: bool,
    pub certificate: Option<InfeasibilityCertificate>,
    pub certificate_valid: bool,
    pub unconditioned_feasible: bool,
}

fn children_shape(n: usize) -> DTree {
    let verts = (1..=n as u8).map(|i| VertexLabel::root().child(i));
    DTree::from_vertices(2, std::iter::once(VertexLabel::root()).chain(verts))
        .expect("prefix-closed")
}

fn shape_key(t: &DTree) -> String {
    match t.len() - 1 {
        1 => "one child".into(),
        n => format!("{n} children"),
    }
}

/// Offspring law `(1/2 − 2r, r, 1/2 + r)` on `{0, 1, 2}`, unconditioned and
/// conditioned on survival, at depth 1.
fn depth_one_laws(r: &BigRational) -> Result<(Vec<BigRational>, Vec<BigRational>)> {
    let quarter = BigRational::new(1.into(), 4.into());
    if *r < BigRational::zero() || *r > quarter {
        return Err(Error::Domain(format!(
            "r = {} must lie in [0, 1/4]",
            rational_to_string(r)
        )));
    }
    let half = BigRational::new(1.into(), 2.into());
    let two = BigRational::from_integer(2.into());
    let plain = vec![&half - &two * r, r.clone(), &half + r];
    if r.is_zero() {
        return Ok((plain, Vec::new()));
    }
    // Extinction probability is the root of (1/2+r)s² + (r−1)s + (1/2−2r) other than 1.
    let s = (&half - &two * r) / (&half + r);
    let survive = BigRational::one() - &s;
    // One child: it must survive. Two children: at least one survives.
    let one = r * &survive / &survive;
    let both = (&half + r) * (BigRational::one() - &s * &s) / &survive;
    Ok((plain, vec![BigRational::zero(), one, both]))
}

/// Shows that the survival-conditioned trees of the three-point offspring law
/// cannot be coupled monotonically for `r1 < r2`, while the unconditioned ones
/// can.
pub fn counterexample_demo(r1: &BigRational, r2: &BigRational) -> Result<CounterexampleReport> {
    let (plain1, cond1) = depth_one_laws(r1)?;
    let (plain2, cond2) = depth_one_laws(r2)?;
    if cond1.is_empty() || cond2.is_empty() {
        return Err(Error::Domain("conditioning on survival needs r > 0".into()));
    }
    let law = |w: &[BigRational]| -> Vec<(DTree, BigRational)> {
        w.iter()
            .enumerate()
            .map(|(n, x)| (children_shape(n), x.clone()))
            .collect()
    };
    let rel = |a: &DTree, b: &DTree| a.is_subtree_of(b);
    let conditioned = check_domination(&law(&cond1), &law(&cond2), rel, shape_key)?;
    let unconditioned = check_domination(&law(&plain1), &law(&plain2), rel, shape_key)?;
    let rows = |w: &[BigRational]| {
        w.iter()
            .enumerate()
            .skip(1)
            .map(|(n, x)| (n, rational_to_string(x)))
            .collect()
    };
    let certificate = conditioned.certificate().cloned();
    Ok(CounterexampleReport {
        r1: rational_to_string(r1),
        r2: rational_to_string(r2),
        conditioned_left: rows(&cond1),
        conditioned_right: rows(&cond2),
        conditioned_feasible: matches!(conditioned, Domination::Coupled(_)),
        certificate_valid: certificate.as_ref().map_or(false, |c| c.is_valid()),
        certificate,
        unconditioned_feasible: matches!(unconditioned, Domination::Coupled(_)),
    })
}

/// One closed-form check with its worst margin (negative means violated).
#[derive(Clone, Debug, Serialize)]
pub struct LemmaCheck {
    pub name: String,
    pub passed: bool,
    pub margin: f64,
    pub detail: String,
}

#[derive(Clone, Debug, Serialize)]
pub struct LemmaReport {
    pub checks: Vec<LemmaCheck>,
    pub passed: bool,
}

fn check(name: &str, margin: f64, detail: String) -> LemmaCheck {
    LemmaCheck {
        name: name.into(),
        passed: margin >= 0.0,
        margin,
        detail,
    }
}

fn grid(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64)
        .collect()
}

/// `Σ_k η_k(p)` summed until the terms vanish, compensated.
fn eta_series_sum(d: u32, p: f64) -> f64 {
    let (mut sum, mut comp) = (0.0f64, 0.0f64);
    for (k, e) in EtaSeries::new(d, p).enumerate() {
        let t = sum + e;
        comp += if sum.abs() >= e.abs() {
            (sum - t) + e
        } else {
            (e - t) + sum
        };
        sum = t;
        if (k > 8 && e < 1e-19) || k > 2_000_000 {
            break;
        }
    }
    sum + comp
}

fn partial_sums(d: u32, p: f64, scale: f64, k: usize) -> Vec<f64> {
    EtaSeries::new(d, p)
        .take(k + 1)
        .scan(0.0, |acc, e| {
            *acc += scale * e;
            Some(*acc)
        })
        .collect()
}

fn ternary(p: f64) -> TernaryConstants {
    TernaryConstants::new(p).expect("grid inside [1/3, 1]")
}

/// Every closed-form identity and inequality the constructions rely on,
/// evaluated on grids.
pub fn lemma_suite() -> LemmaReport {
    let mut checks = Vec::new();

    let f1 = f_of_p(1.0).unwrap();
    checks.push(check(
        "f(1) = sqrt(3) - 1",
        1e-10 - (f1 - (3f64.sqrt() - 1.0)).abs(),
        format!("f(1) = {f1:.15}"),
    ));

    let g = grid(1.0 / 3.0 + 1e-6, 1.0, 1000);
    let fs: Vec<f64> = g.iter().map(|&p| f_of_p(p).unwrap()).collect();
    let (mut worst, mut at) = (f64::INFINITY, 0.0);
    for i in 0..fs.len() - 1 {
        if fs[i] - fs[i + 1] < worst {
            worst = fs[i] - fs[i + 1];
            at = g[i];
        }
    }
    checks.push(check(
        "f strictly decreasing",
        if worst > 0.0 { worst } else { -1.0 },
        format!("smallest step {worst:.3e} at p = {at:.6}"),
    ));

    let near = f_of_p(1.0 / 3.0 + 1e-6).unwrap();
    checks.push(check(
        "f tends to 1 at criticality",
        1e-3 - (near - 1.0).abs(),
        format!("f(1/3 + 1e-6) = {near:.9}"),
    ));

    for d in [2u32, 3] {
        // c_{k-1}/c_k > c_k/c_{k+1} and c_{k-1}/c_k > (1/d)((d-1)/d)^{d-1}, exactly.
        let limit_num = BigInt::from(d - 1).pow(d - 1);
        let limit_den = BigInt::from(d).pow(d);
        let mut ok = true;
        let mut first_bad = None;
        for k in 1..=300usize {
            let (a, b, c) = (
                BigInt::from(count_trees(d, k - 1)),
                BigInt::from(count_trees(d, k)),
                BigInt::from(count_trees(d, k + 1)),
            );
            if &a * &c <= &b * &b || &a * &limit_den <= &b * &limit_num {
                ok = false;
                first_bad.get_or_insert(k);
            }
        }
        let lim = rational_to_f64(&BigRational::new(limit_num.clone(), limit_den.clone()));
        let at300 = rational_to_f64(&BigRational::new(
            BigInt::from(count_trees(d, 299)),
            BigInt::from(count_trees(d, 300)),
        ));
        checks.push(check(
            &format!("tree count ratio decreases to its limit (d={d})"),
            if ok { at300 / lim - 1.0 } else { -1.0 },
            format!("limit {lim:.6}, ratio at k=300 {at300:.6}, first violation {first_bad:?}"),
        ));

        // c_{k-l}/c_k ≥ limit^l ≥ (p(1-p)^{d-1})^l.
        let mut ok = true;
        for k in 0..=40usize {
            let ck = BigInt::from(count_trees(d, k));
            for l in 0..=k {
                let lhs = BigRational::new(BigInt::from(count_trees(d, k - l)), ck.clone());
                let rhs = BigRational::new(limit_num.pow(l as u32), limit_den.pow(l as u32));
                ok &= lhs >= rhs;
            }
        }
        let worst_p = grid(0.0, 1.0, 1001)
            .into_iter()
            .map(|p| lim - p * (1.0 - p).powi(d as i32 - 1))
            .fold(f64::INFINITY, f64::min);
        checks.push(check(
            &format!("ratio lower bound c_(k-l)/c_k (d={d})"),
            if ok { worst_p + 1e-15 } else { -1.0 },
            format!("exact for k <= 40; min over p of limit - p(1-p)^(d-1) = {worst_p:.3e}"),
        ));

        let mut worst = f64::INFINITY;
        for p in grid(0.01, 0.99, 99) {
            let e: Vec<f64> = EtaSeries::new(d, p).take(500).collect();
            for w in e.windows(2) {
                worst = worst.min(1.0 - w[1] / w[0]);
            }
        }
        checks.push(check(
            &format!("P(|T(p)| = k) decreasing in k (d={d})"),
            worst + 1e-12,
            format!("min relative drop {worst:.3e}"),
        ));
    }

    let g2 = grid(0.5, 1.0, 51);
    let mut worst = f64::INFINITY;
    for w in g2.windows(2) {
        let a = partial_sums(2, w[0], 2.0 * w[0], 200);
        let b = partial_sums(2, w[1], 2.0 * w[1], 200);
        for (x, y) in a.iter().zip(&b) {
            worst = worst.min(x - y);
        }
    }
    checks.push(check(
        "L* cdf decreasing in p (d=2)",
        worst + 1e-15,
        format!("min cdf gap {worst:.3e} over k <= 200"),
    ));

    let mut worst = 0.0f64;
    for p in grid(0.55, 1.0, 46) {
        let eta = (2.0 * p - 1.0) / p;
        worst = worst.max((2.0 * p * eta_series_sum(2, p) + p * eta - 1.0).abs());
    }
    checks.push(check(
        "L* law sums to one (d=2)",
        1e-12 - worst,
        format!("max error {worst:.3e}"),
    ));

    let g3 = grid(1.0 / 3.0, 1.0, 61);
    let (mut first, mut given_inf, mut mixed) = (f64::INFINITY, f64::INFINITY, f64::INFINITY);
    for w in g3.windows(2) {
        let (c1, c2) = (ternary(w[0]), ternary(w[1]));
        let a = partial_sums(3, w[0], c1.sqrt3p, 200);
        let b = partial_sums(3, w[1], c2.sqrt3p, 200);
        let a_inf = partial_sums(3, w[0], c1.sqrt3p * c1.f, 200);
        let b_inf = partial_sums(3, w[1], c2.sqrt3p * c2.f, 200);
        for i in 0..a.len() {
            first = first.min(a[i] - b[i]);
            given_inf = given_inf.min(a_inf[i] - b_inf[i]);
            mixed = mixed.min(a[i] - b_inf[i]);
        }
    }
    checks.push(check(
        "L* cdf decreasing in p (d=3)",
        first + 1e-15,
        format!("min cdf gap {first:.3e}"),
    ));
    checks.push(check(
        "L** given L* infinite: cdf decreasing in p",
        given_inf + 1e-15,
        format!("min cdf gap {given_inf:.3e}"),
    ));
    checks.push(check(
        "L** given finite at p1 dominated by L** given infinite at p2",
        mixed + 1e-15,
        format!("min cdf gap {mixed:.3e}"),
    ));

    let mut worst = 0.0f64;
    let mut deficit = f64::INFINITY;
    for p in grid(0.4, 1.0, 31) {
        let c = ternary(p);
        let s = eta_series_sum(3, p);
        worst = worst.max((c.sqrt3p * s + c.first_infinite - 1.0).abs());
        worst = worst.max((c.sqrt3p * c.f * s + c.second_infinite_given_infinite - 1.0).abs());
        deficit = deficit.min(c.first_infinite);
    }
    checks.push(check(
        "(L*, L**) conditional masses sum to one",
        1e-12 - worst,
        format!("max error {worst:.3e}"),
    ));
    let at_crit = ternary(1.0 / 3.0).first_infinite;
    checks.push(check(
        "sqrt(3p) sum eta_l <= 1 with equality only at p = 1/3",
        if at_crit.abs() < 1e-15 { deficit } else { -1.0 },
        format!("deficit at 1/3: {at_crit:.3e}; min deficit on [0.4, 1]: {deficit:.3e}"),
    ));

    let mut worst = 0.0f64;
    for p in grid(0.4, 1.0, 25) {
        let c = ternary(p);
        worst = worst.max((p * c.eta_inf * c.eta_inf - 3.0 * p * c.eta_inf + 3.0 * p - 1.0).abs());
        let q = 0.5 + p / 2.0;
        let e2 = (2.0 * q - 1.0) / q;
        worst = worst.max((e2 - q * (1.0 - (1.0 - e2).powi(2))).abs());
    }
    checks.push(check(
        "survival probability fixed point",
        1e-12 - worst,
        format!("max residual {worst:.3e}"),
    ));

    let mut worst = 0.0f64;
    for p in grid(0.55, 1.0, 10) {
        let eta = (2.0 * p - 1.0) / p;
        for e in EtaSeries::new(2, p).take(10) {
            let lhs = p * eta * e / eta;
            worst = worst.max((lhs - p * e).abs() / (p * e).max(f64::MIN_POSITIVE));
        }
    }
    checks.push(check(
        "survival-conditioned split cancels",
        1e-14 - worst,
        format!("max relative error {worst:.3e}"),
    ));

    let passed = checks.iter().all(|c| c.passed);
    LemmaReport { checks, passed }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rat(s: &str) -> BigRational {
        parse_rational(s).unwrap()
    }

    fn window(d: u32, depth: usize, verts: &[&[u8]], alive: &[&[u8]]) -> WindowedTree {
        let mut w = WindowedTree::empty(d, depth);
        for v in verts {
            let v = VertexLabel::from_path(v);
            let a = alive.iter().any(|x| VertexLabel::from_path(x) == v);
            w.insert(v, a).unwrap();
        }
        w
    }

    #[test]
    fn gw_depth_zero() {
        let law = exact_window_law_rational(&LawId::Gw(rat("1/3")), 2, 0).unwrap();
        assert_eq!(law.prob(&WindowedTree::empty(2, 0)), rat("2/3"));
        assert_eq!(law.total(), BigRational::one());
    }

    #[test]
    fn tinf_both_children_alive() {
        let law = exact_window_law_rational(&LawId::Tinf(rat("3/4")), 2, 1).unwrap();
        let w = window(2, 1, &[&[], &[1], &[2]], &[&[1], &[2]]);
        // Both subtrees infinite has probability pη_∞ = 1/2; the window event
        // also counts each finite subtree that reaches depth 2, adding
        // 2 · p · (p − η_∞ − p(1 − p)²) = 7/128.
        assert_eq!(law.prob(&w), rat("71/128"));
        assert_eq!(law.total(), BigRational::one());
    }

    #[test]
    fn iic_depth_one() {
        let law = iic_window_law(2, 1).unwrap();
        let full: BigRational = law
            .entries
            .iter()
            .filter(|(w, _)| w.len() == 3)
            .map(|(_, p)| p.clone())
            .sum();
        assert_eq!(full, rat("1/2"));
        let w = window(2, 1, &[&[], &[1]], &[&[1]]);
        assert_eq!(law.prob(&w), rat("1/4"));
    }

    #[test]
    fn tinf_at_criticality_is_iic() {
        for d in [2, 3] {
            let depth = if d == 2 { 3 } else { 2 };
            let crit = format!("1/{d}");
            let a = exact_window_law_rational(&LawId::Tinf(rat(&crit)), d, depth).unwrap();
            let b = iic_window_law(d, depth).unwrap();
            assert_eq!(a.entries, b.entries);
        }
    }

    #[test]
    fn laws_sum_to_one() {
        for (law, d, depth) in [
            (LawId::Gw(rat("0.4")), 3, 2),
            (LawId::UniformK(7), 2, 3),
            (LawId::UniformK(9), 3, 2),
            (LawId::Tinf(rat("0.6")), 3, 2),
            (LawId::Tstar(rat("0.6")), 2, 3),
            (LawId::Tinf(rat("1")), 3, 1),
        ] {
            let l = exact_window_law(&law, d, depth).unwrap();
            assert!((l.total() - 1.0).abs() < 1e-10, "{law}");
        }
        let pair = tstar_pair_window_law(&rat("0.5"), 1).unwrap();
        assert!((pair.values().sum::<f64>() - 1.0).abs() < 1e-10);
    }

    #[test]
    fn brute_force_agrees() {
        for d in [2u32, 3] {
            for law in [
                LawId::Gw(rat("0.3")),
                LawId::Gw(rat("0.8")),
                LawId::Iic,
                LawId::Tinf(rat("0.6")),
                LawId::Tinf(rat("0.75")),
                LawId::Tinf(rat("1")),
            ] {
                let exact = exact_window_law(&law, d, 1).unwrap();
                let brute = brute_force_window_law(&law, d, 1).unwrap();
                assert!(tv_distance(&exact, &brute) < 1e-10, "d={d} {law}");
            }
        }
        let exact = exact_window_law(&LawId::Tinf(rat("0.7")), 2, 2).unwrap();
        let brute = brute_force_window_law(&LawId::Tinf(rat("0.7")), 2, 2).unwrap();
        assert!(tv_distance(&exact, &brute) < 1e-10);
    }

    #[test]
    fn uniform_law_by_enumeration() {
        for (d, k, depth) in [(2u32, 5usize, 1usize), (2, 6, 2), (3, 4, 1), (3, 5, 2)] {
            let law = uniform_window_law(d, k, depth).unwrap();
            let trees = crate::tree::enumerate_all(d, k);
            let w = BigRational::new(BigInt::one(), BigInt::from(trees.len()));
            let mut direct: BTreeMap<WindowedTree, BigRational> = BTreeMap::new();
            for t in trees {
                *direct
                    .entry(t.truncate(depth))
                    .or_insert_with(BigRational::zero) += &w;
            }
            assert_eq!(law.entries, direct);
        }
    }

    #[test]
    fn compare_detects_wrong_law() {
        let law = exact_window_law(&LawId::Tinf(rat("0.6")), 2, 1).unwrap();
        let other = exact_window_law(&LawId::Tinf(rat("0.8")), 2, 1).unwrap();
        let mut counts = BTreeMap::new();
        for (w, p) in &other.entries {
            counts.insert(w.clone(), (p * 100_000.0).round() as usize);
        }
        let report = compare_counts(&law.entries, &counts, 0, &CompareConfig::default());
        assert!(!report.pass);
        let mut counts = BTreeMap::new();
        for (w, p) in &law.entries {
            counts.insert(w.clone(), (p * 100_000.0).round() as usize);
        }
        let report = compare_counts(&law.entries, &counts, 0, &CompareConfig::default());
        assert!(report.pass, "{report}");
    }

    #[test]
    fn compare_pools_thin_cells() {
        let law: BTreeMap<u32, f64> = [(0, 0.5), (1, 0.492), (2, 0.004), (3, 0.004)]
            .into_iter()
            .collect();
        let report = compare(
            &law,
            (0..1000).map(|i| {
                if i < 500 {
                    0
                } else if i < 992 {
                    1
                } else {
                    2 + i % 2
                }
            }),
            0,
            &CompareConfig::default(),
        );
        assert_eq!(report.cells, 3);
        assert!(report.pass);
        let report = compare(&law, [7u32; 10], 0, &CompareConfig::default());
        assert_eq!(report.out_of_support, 10);
        assert!(!report.pass);
    }

    #[test]
    fn counterexample() {
        let rep = counterexample_demo(&rat("0.1"), &rat("0.2")).unwrap();
        assert!(!rep.conditioned_feasible);
        assert!(rep.certificate_valid);
        assert!(rep.unconditioned_feasible);
        assert_eq!(rep.conditioned_left[0], (1, "1/10".to_string()));
        let same = counterexample_demo(&rat("0.15"), &rat("0.15")).unwrap();
        assert!(same.conditioned_feasible);
    }

    #[test]
    fn lemmas_pass() {
        let report = lemma_suite();
        for c in &report.checks {
            assert!(c.passed, "{} {}", c.name, c.detail);
        }
    }
}
