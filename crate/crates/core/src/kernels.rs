//! Exact monotone coupling kernels between finite distributions.
//!
//! Feasibility is decided by integer max-flow on marginals scaled to a common
//! denominator; when the flow does not saturate, the source side of the
//! minimum cut gives a set of left objects whose mass exceeds the mass of
//! everything they may be coupled to.

use std::collections::HashMap;
use std::fmt;
use std::sync::{Arc, OnceLock, RwLock};

use num_bigint::{BigInt, BigUint, Sign};
use num_integer::Integer;
use num_rational::BigRational;
use num_traits::{One, ToPrimitive, Zero};
use serde::Serialize;

use crate::combinatorics::{count_trees, forest_count, split_law};
use crate::error::{Error, Result};
use crate::flow::{Capacity, FlowNetwork};
use crate::params::rational_to_string;
use crate::rng::RngStream;
use crate::tree::{enumerate_all, DTree, VertexLabel};

/// Largest `k` for which [`build_tree_kernel`] enumerates trees.
pub fn tree_kernel_cap(d: u32) -> usize {
    if d == 2 {
        10
    } else {
        7
    }
}

/// Largest `k` accepted by [`build_split_kernel`].
pub fn split_kernel_cap(d: u32) -> usize {
    if d == 2 {
        1000
    } else {
        200
    }
}

/// An exact joint law over `left × right` whose positive entries satisfy
/// `relation`.
#[derive(Clone, Debug)]
pub struct CouplingKernel<T> {
    pub relation: String,
    pub left: Vec<T>,
    pub right: Vec<T>,
    /// `(left index, right index, probability)`, positive entries only.
    pub entries: Vec<(usize, usize, BigRational)>,
}

impl<T> CouplingKernel<T> {
    pub fn left_marginal(&self) -> Vec<BigRational> {
        let mut m = vec![BigRational::zero(); self.left.len()];
        for (i, _, w) in &self.entries {
            m[*i] += w;
        }
        m
    }

    pub fn right_marginal(&self) -> Vec<BigRational> {
        let mut m = vec![BigRational::zero(); self.right.len()];
        for (_, j, w) in &self.entries {
            m[*j] += w;
        }
        m
    }

    pub fn total(&self) -> BigRational {
        self.entries.iter().map(|(_, _, w)| w.clone()).sum()
    }

    /// Every positive entry satisfies `rel`.
    pub fn respects(&self, rel: impl Fn(&T, &T) -> bool) -> bool {
        self.entries
            .iter()
            .all(|(i, j, w)| *w > BigRational::zero() && rel(&self.left[*i], &self.right[*j]))
    }

    /// Conditional law of the left object given right index `j`.
    pub fn given_right(&self, j: usize) -> Vec<(usize, BigRational)> {
        let rows: Vec<(usize, BigRational)> = self
            .entries
            .iter()
            .filter(|(_, jj, _)| *jj == j)
            .map(|(i, _, w)| (*i, w.clone()))
            .collect();
        normalize(rows)
    }

    /// Conditional law of the right object given left index `i`.
    pub fn given_left(&self, i: usize) -> Vec<(usize, BigRational)> {
        let rows: Vec<(usize, BigRational)> = self
            .entries
            .iter()
            .filter(|(ii, _, _)| *ii == i)
            .map(|(_, j, w)| (*j, w.clone()))
            .collect();
        normalize(rows)
    }

    pub fn to_json(&self, key: impl Fn(&T) -> String) -> KernelJson {
        KernelJson {
            relation: self.relation.clone(),
            left: self.left.iter().map(&key).collect(),
            right: self.right.iter().map(&key).collect(),
            weights: self
                .entries
                .iter()
                .map(|(i, j, w)| (*i, *j, rational_to_string(w)))
                .collect(),
        }
    }
}

fn normalize(rows: Vec<(usize, BigRational)>) -> Vec<(usize, BigRational)> {
    let total: BigRational = rows.iter().map(|(_, w)| w.clone()).sum();
    if total.is_zero() {
        return rows;
    }
    rows.into_iter().map(|(i, w)| (i, w / &total)).collect()
}

#[derive(Clone, Debug, Serialize)]
pub struct KernelJson {
    pub relation: String,
    pub left: Vec<String>,
    pub right: Vec<String>,
    pub weights: Vec<(usize, usize, String)>,
}

/// A set of left objects whose total mass exceeds the mass of all right
/// objects related to any of them, so no coupling can exist.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct InfeasibilityCertificate {
    pub witness: Vec<String>,
    pub up_set: Vec<String>,
    pub left_mass: String,
    pub right_mass: String,
}

impl InfeasibilityCertificate {
    /// Re-checks the strict inequality.
    pub fn is_valid(&self) -> bool {
        let parse = |s: &str| crate::params::parse_rational(s).ok();
        match (parse(&self.left_mass), parse(&self.right_mass)) {
            (Some(l), Some(r)) => l > r,
            _ => false,
        }
    }
}

impl fmt::Display for InfeasibilityCertificate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "left mass {} of {{{}}} exceeds right mass {} of {{{}}}",
            self.left_mass,
            self.witness.join(", "),
            self.right_mass,
            self.up_set.join(", ")
        )
    }
}

/// Marginals scaled to integers by the lcm of their denominators, with the
/// admissible pairs.
#[derive(Clone, Debug)]
pub struct FlowProblem {
    pub supplies: Vec<BigUint>,
    pub demands: Vec<BigUint>,
    pub edges: Vec<(usize, usize)>,
    pub scale: BigUint,
}

impl FlowProblem {
    pub fn new(
        left: &[BigRational],
        right: &[BigRational],
        edges: Vec<(usize, usize)>,
    ) -> Result<Self> {
        let lt: BigRational = left.iter().cloned().sum();
        let rt: BigRational = right.iter().cloned().sum();
        if lt != rt {
            return Err(Error::Domain(format!(
                "marginal totals differ: {} vs {}",
                rational_to_string(&lt),
                rational_to_string(&rt)
            )));
        }
        if left.iter().chain(right).any(|w| *w < BigRational::zero()) {
            return Err(Error::Domain("negative mass".into()));
        }
        let scale = left
            .iter()
            .chain(right)
            .fold(BigInt::one(), |acc, w| acc.lcm(w.denom()));
        let to_int = |w: &BigRational| -> BigUint {
            let v = w.numer() * (&scale / w.denom());
            v.to_biguint().expect("non-negative")
        };
        Ok(Self {
            supplies: left.iter().map(to_int).collect(),
            demands: right.iter().map(to_int).collect(),
            edges,
            scale: scale.to_biguint().unwrap(),
        })
    }

    pub fn total(&self) -> BigUint {
        self.supplies.iter().sum()
    }

    /// Solves the transport problem. On success returns per-edge flows (as
    /// fractions of the scale); otherwise the left indices on the source side
    /// of a minimum cut.
    pub fn solve(&self) -> std::result::Result<Vec<BigRational>, Vec<usize>> {
        if self.total().bits() <= 126 {
            let conv = |x: &BigUint| x.to_u128().unwrap();
            self.solve_with::<u128>(conv, |f| BigUint::from(*f))
        } else {
            self.solve_with::<BigUint>(|x| x.clone(), |f| f.clone())
        }
    }

    fn solve_with<C: Capacity>(
        &self,
        conv: impl Fn(&BigUint) -> C,
        back: impl Fn(&C) -> BigUint,
    ) -> std::result::Result<Vec<BigRational>, Vec<usize>> {
        let nl = self.supplies.len();
        let nr = self.demands.len();
        let (s, t) = (nl + nr, nl + nr + 1);
        let mut g = FlowNetwork::<C>::new(nl + nr + 2);
        for (i, sup) in self.supplies.iter().enumerate() {
            g.add_edge(s, i, conv(sup));
        }
        for (j, dem) in self.demands.iter().enumerate() {
            g.add_edge(nl + j, t, conv(dem));
        }
        let ids: Vec<usize> = self
            .edges
            .iter()
            .map(|&(i, j)| {
                let cap = (&self.supplies[i]).min(&self.demands[j]);
                g.add_edge(i, nl + j, conv(cap))
            })
            .collect();
        let flow = back(&g.max_flow(s, t));
        if flow == self.total() {
            let scale = BigInt::from(self.scale.clone());
            Ok(ids
                .iter()
                .map(|&e| BigRational::new(BigInt::from(back(&g.flow(e))), scale.clone()))
                .collect())
        } else {
            let reach = g.residual_reachable(s);
            Err((0..nl).filter(|&i| reach[i]).collect())
        }
    }
}

/// Result of [`check_domination`].
#[derive(Clone, Debug)]
pub enum Domination<T> {
    Coupled(CouplingKernel<T>),
    Infeasible(InfeasibilityCertificate),
}

impl<T> Domination<T> {
    pub fn kernel(&self) -> Option<&CouplingKernel<T>> {
        match self {
            Domination::Coupled(k) => Some(k),
            Domination::Infeasible(_) => None,
        }
    }

    pub fn certificate(&self) -> Option<&InfeasibilityCertificate> {
        match self {
            Domination::Infeasible(c) => Some(c),
            Domination::Coupled(_) => None,
        }
    }
}

/// Builds a kernel from explicit admissible pairs, or a certificate.
pub fn couple_with_edges<T: Clone>(
    relation: &str,
    left: &[(T, BigRational)],
    right: &[(T, BigRational)],
    edges: Vec<(usize, usize)>,
    key: impl Fn(&T) -> String,
) -> Result<Domination<T>> {
    let lm: Vec<BigRational> = left.iter().map(|(_, w)| w.clone()).collect();
    let rm: Vec<BigRational> = right.iter().map(|(_, w)| w.clone()).collect();
    let problem = FlowProblem::new(&lm, &rm, edges)?;
    match problem.solve() {
        Ok(flows) => {
            let entries = problem
                .edges
                .iter()
                .zip(flows)
                .filter(|(_, f)| !f.is_zero())
                .map(|(&(i, j), f)| (i, j, f))
                .collect();
            Ok(Domination::Coupled(CouplingKernel {
                relation: relation.to_string(),
                left: left.iter().map(|(t, _)| t.clone()).collect(),
                right: right.iter().map(|(t, _)| t.clone()).collect(),
                entries,
            }))
        }
        Err(mut witness) => {
            witness.retain(|&i| !lm[i].is_zero());
            let mut up: Vec<usize> = problem
                .edges
                .iter()
                .filter(|(i, _)| witness.contains(i))
                .map(|&(_, j)| j)
                .collect();
            up.sort_unstable();
            up.dedup();
            let left_mass: BigRational = witness.iter().map(|&i| lm[i].clone()).sum();
            let right_mass: BigRational = up.iter().map(|&j| rm[j].clone()).sum();
            Ok(Domination::Infeasible(InfeasibilityCertificate {
                witness: witness.iter().map(|&i| key(&left[i].0)).collect(),
                up_set: up.iter().map(|&j| key(&right[j].0)).collect(),
                left_mass: rational_to_string(&left_mass),
                right_mass: rational_to_string(&right_mass),
            }))
        }
    }
}

/// Decides whether `left` can be coupled below `right` under `relation`
/// (tested on all pairs). Zero-mass objects are dropped first.
pub fn check_domination<T: Clone>(
    left: &[(T, BigRational)],
    right: &[(T, BigRational)],
    relation: impl Fn(&T, &T) -> bool,
    key: impl Fn(&T) -> String,
) -> Result<Domination<T>> {
    let left: Vec<(T, BigRational)> = left.iter().filter(|(_, w)| !w.is_zero()).cloned().collect();
    let right: Vec<(T, BigRational)> = right
        .iter()
        .filter(|(_, w)| !w.is_zero())
        .cloned()
        .collect();
    let mut edges = Vec::new();
    for (i, (a, _)) in left.iter().enumerate() {
        for (j, (b, _)) in right.iter().enumerate() {
            if relation(a, b) {
                edges.push((i, j));
            }
        }
    }
    couple_with_edges("custom", &left, &right, edges, key)
}

fn uniform_trees(d: u32, k: usize) -> Vec<(DTree, BigRational)> {
    let mut trees = enumerate_all(d, k);
    trees.sort_by_key(DTree::encode);
    let w = BigRational::new(BigInt::one(), BigInt::from(count_trees(d, k)));
    trees.into_iter().map(|t| (t, w.clone())).collect()
}

/// Exact kernel between the uniform laws on `k`- and `(k+1)`-vertex trees
/// with every supported pair nested and differing by one leaf.
pub fn build_tree_kernel(d: u32, k: usize) -> Result<CouplingKernel<DTree>> {
    let cap = tree_kernel_cap(d);
    if k > cap {
        return Err(Error::CapExceeded {
            what: "tree kernel size",
            value: k,
            cap,
        });
    }
    let left = uniform_trees(d, k);
    let right = uniform_trees(d, k + 1);
    let index: HashMap<Vec<u8>, usize> = left
        .iter()
        .enumerate()
        .map(|(i, (t, _))| (t.encode(), i))
        .collect();
    let mut edges = Vec::new();
    for (j, (t, _)) in right.iter().enumerate() {
        let mut preds: Vec<usize> = t
            .leaves()
            .map(|leaf| {
                let mut s = t.clone();
                s.remove_leaf(leaf);
                index[&s.encode()]
            })
            .collect();
        preds.sort_unstable();
        edges.extend(preds.into_iter().map(|i| (i, j)));
    }
    edges.sort_unstable();
    match couple_with_edges(
        "subtree, one more vertex",
        &left,
        &right,
        edges,
        DTree::to_hex,
    )? {
        Domination::Coupled(kernel) => Ok(kernel),
        Domination::Infeasible(cert) => Err(Error::Invariant(format!(
            "tree kernel d={d} k={k} infeasible: {cert}"
        ))),
    }
}

/// Exact kernel between the root-split laws of uniform `(k+1)`- and
/// `(k+2)`-vertex trees, with each supported pair differing by a unit vector.
pub fn build_split_kernel(d: u32, k: usize) -> Result<CouplingKernel<Vec<usize>>> {
    let cap = split_kernel_cap(d);
    if k > cap {
        return Err(Error::CapExceeded {
            what: "split kernel size",
            value: k,
            cap,
        });
    }
    let left = split_law(d, k).entries;
    let right = split_law(d, k + 1).entries;
    let index: HashMap<&Vec<usize>, usize> =
        right.iter().enumerate().map(|(j, (s, _))| (s, j)).collect();
    let mut edges = Vec::new();
    for (i, (s, _)) in left.iter().enumerate() {
        let mut next = Vec::with_capacity(d as usize);
        for c in 0..d as usize {
            let mut t = s.clone();
            t[c] += 1;
            next.push(index[&t]);
        }
        next.sort_unstable();
        edges.extend(next.into_iter().map(|j| (i, j)));
    }
    let key = |s: &Vec<usize>| format!("{s:?}");
    match couple_with_edges("coordinatewise +1", &left, &right, edges, key)? {
        Domination::Coupled(kernel) => Ok(kernel),
        Domination::Infeasible(cert) => Err(Error::Infeasible(Box::new(cert))),
    }
}

/// Pairs the root splits of a tree kernel's supported pairs.
pub fn split_marginal(kernel: &CouplingKernel<DTree>) -> CouplingKernel<Vec<usize>> {
    let mut acc: HashMap<(Vec<usize>, Vec<usize>), BigRational> = HashMap::new();
    for (i, j, w) in &kernel.entries {
        let key = (kernel.left[*i].root_split(), kernel.right[*j].root_split());
        *acc.entry(key).or_insert_with(BigRational::zero) += w;
    }
    let mut pairs: Vec<_> = acc.into_iter().collect();
    pairs.sort();
    let mut left: Vec<Vec<usize>> = pairs.iter().map(|((a, _), _)| a.clone()).collect();
    let mut right: Vec<Vec<usize>> = pairs.iter().map(|((_, b), _)| b.clone()).collect();
    left.sort();
    left.dedup();
    right.sort();
    right.dedup();
    let entries = pairs
        .into_iter()
        .map(|((a, b), w)| {
            (
                left.binary_search(&a).unwrap(),
                right.binary_search(&b).unwrap(),
                w,
            )
        })
        .collect();
    CouplingKernel {
        relation: "coordinatewise +1".into(),
        left,
        right,
        entries,
    }
}

/// Unique monotone unit-step coupling of the first-tree sizes of uniform
/// ordered `j`-forests of total size `m` and `m + 1`.
///
/// With `F_m` the first-tree distribution function, the first tree grows
/// from `a` to `a + 1` with mass `F_m(a) − F_{m+1}(a)` and stays at `a` with
/// mass `F_{m+1}(a) − F_m(a − 1)`; both are non-negative whenever a
/// unit-step coupling exists.
#[derive(Clone, Debug)]
pub struct PathKernel {
    /// `P(first tree grows | first tree has size a)`, `a ∈ 0..=m`.
    pub grow: Vec<f64>,
    /// `P(first tree shrinks | first tree has size b)`, `b ∈ 0..=m+1`.
    pub shrink: Vec<f64>,
}

fn ratio_f64(num: &BigInt, den: &BigInt) -> f64 {
    BigRational::new_raw(num.clone(), den.clone())
        .to_f64()
        .unwrap_or(f64::NAN)
}

/// Integer masses `c_x N_{j−1}(m − x)` of the first-tree law (common
/// denominator `N_j(m)`).
fn first_tree_masses(d: u32, j: u32, m: usize) -> Vec<BigInt> {
    (0..=m)
        .map(|x| BigInt::from(count_trees(d, x) * forest_count(d, j - 1, m - x)))
        .collect()
}

/// Exact grow / shrink probabilities as `(numerator, denominator)` pairs.
#[allow(clippy::type_complexity)]
fn path_kernel_parts(
    d: u32,
    j: u32,
    m: usize,
) -> Result<(Vec<(BigInt, BigInt)>, Vec<(BigInt, BigInt)>)> {
    let pm = first_tree_masses(d, j, m);
    let pn = first_tree_masses(d, j, m + 1);
    let nm = BigInt::from(forest_count(d, j, m));
    let nn = BigInt::from(forest_count(d, j, m + 1));
    // F_m(a) N_j(m) N_j(m+1) and F_{m+1}(a) N_j(m) N_j(m+1) as integers.
    let mut fm = BigInt::zero();
    let mut fn_ = BigInt::zero();
    let mut up = Vec::with_capacity(m + 1);
    for a in 0..=m {
        fm += &pm[a] * &nn;
        fn_ += &pn[a] * &nm;
        let w = &fm - &fn_;
        if w.sign() == Sign::Minus {
            return Err(Error::Invariant(format!(
                "forest path kernel d={d} j={j} m={m} has negative mass at {a}"
            )));
        }
        up.push(w);
    }
    let mut grow = Vec::with_capacity(m + 1);
    let mut shrink = vec![(BigInt::zero(), BigInt::one())];
    for a in 0..=m {
        let stay = &pm[a] * &nn - &up[a];
        if stay.sign() == Sign::Minus {
            return Err(Error::Invariant(format!(
                "forest path kernel d={d} j={j} m={m} has negative stay mass at {a}"
            )));
        }
        grow.push((up[a].clone(), &pm[a] * &nn));
        shrink.push((up[a].clone(), &pn[a + 1] * &nm));
    }
    Ok((grow, shrink))
}

/// Exact conditional grow / shrink probabilities of [`PathKernel`].
pub fn path_kernel_exact(d: u32, j: u32, m: usize) -> Result<(Vec<BigRational>, Vec<BigRational>)> {
    let (g, s) = path_kernel_parts(d, j, m)?;
    let conv =
        |v: Vec<(BigInt, BigInt)>| v.into_iter().map(|(a, b)| BigRational::new(a, b)).collect();
    Ok((conv(g), conv(s)))
}

pub fn path_kernel(d: u32, j: u32, m: usize) -> Result<Arc<PathKernel>> {
    type Cache = RwLock<HashMap<(u32, u32, usize), Arc<PathKernel>>>;
    static CACHE: OnceLock<Cache> = OnceLock::new();
    let cache = CACHE.get_or_init(|| RwLock::new(HashMap::new()));
    if let Some(k) = cache.read().unwrap().get(&(d, j, m)) {
        return Ok(k.clone());
    }
    let (g, s) = path_kernel_parts(d, j, m)?;
    let conv = |v: Vec<(BigInt, BigInt)>| v.iter().map(|(a, b)| ratio_f64(a, b)).collect();
    let kernel = Arc::new(PathKernel {
        grow: conv(g),
        shrink: conv(s),
    });
    cache.write().unwrap().insert((d, j, m), kernel.clone());
    Ok(kernel)
}

/// Walks the children forest of a vertex with subtree sizes `sizes`,
/// choosing the child whose subtree changes. `first_changes(j, m, a)` decides
/// whether the first of `j` remaining trees (sizes summing to `m`, the first
/// of size `a`) is the one.
fn choose_child(
    sizes: &[usize],
    mut first_changes: impl FnMut(u32, usize, usize) -> Result<bool>,
) -> Result<u8> {
    let d = sizes.len() as u32;
    let mut m: usize = sizes.iter().sum();
    for (idx, &a) in sizes.iter().enumerate() {
        let j = d - idx as u32;
        if j == 1 {
            return Ok(idx as u8 + 1);
        }
        if first_changes(j, m, a)? {
            return Ok(idx as u8 + 1);
        }
        m -= a;
    }
    unreachable!("last child is always chosen")
}

fn child_sizes(
    sizes: &std::collections::BTreeMap<VertexLabel, usize>,
    v: &VertexLabel,
    d: u32,
) -> Vec<usize> {
    (1..=d as u8)
        .map(|i| sizes.get(&v.child(i)).copied().unwrap_or(0))
        .collect()
}

/// Adds one vertex to `t`. If `t` is uniform over `k`-vertex trees, the
/// result is uniform over `(k+1)`-vertex trees.
pub fn grow(t: &DTree, rng: &mut RngStream) -> Result<DTree> {
    let d = t.d();
    let sizes = t.subtree_sizes();
    let mut v = VertexLabel::root();
    let mut out = t.clone();
    loop {
        if !t.contains_vertex(&v) {
            out.insert(v)?;
            return Ok(out);
        }
        let cs = child_sizes(&sizes, &v, d);
        let c = choose_child(&cs, |j, m, a| {
            let k = path_kernel(d, j, m)?;
            Ok(rng.uniform() < k.grow[a])
        })?;
        v = v.child(c);
    }
}

/// Removes one vertex from a non-empty `t`, reversing [`grow`]: if `t` is
/// uniform over `(k+1)`-vertex trees, the result is uniform over `k`-vertex
/// trees, and the joint law matches that of `(t, grow(t))`.
pub fn shrink(t: &DTree, rng: &mut RngStream) -> Result<DTree> {
    if t.is_empty() {
        return Err(Error::Domain("cannot shrink the empty tree".into()));
    }
    let d = t.d();
    let sizes = t.subtree_sizes();
    let mut v = VertexLabel::root();
    loop {
        if sizes[&v] == 1 {
            let mut out = t.clone();
            out.remove_leaf(&v);
            return Ok(out);
        }
        let cs = child_sizes(&sizes, &v, d);
        let c = choose_child(&cs, |j, m, b| {
            // The forest has total m = (smaller size) + 1.
            let k = path_kernel(d, j, m - 1)?;
            Ok(rng.uniform() < k.shrink[b])
        })?;
        v = v.child(c);
    }
}

/// Exact law of `grow(t)`.
pub fn grow_distribution(t: &DTree) -> Result<Vec<(DTree, BigRational)>> {
    let d = t.d();
    let sizes = t.subtree_sizes();
    let mut out = Vec::new();
    let mut stack = vec![(VertexLabel::root(), BigRational::one())];
    while let Some((v, w)) = stack.pop() {
        if !t.contains_vertex(&v) {
            let mut nt = t.clone();
            nt.insert(v)?;
            out.push((nt, w));
            continue;
        }
        let cs = child_sizes(&sizes, &v, d);
        let mut m: usize = cs.iter().sum();
        let mut rest = w;
        for (idx, &a) in cs.iter().enumerate() {
            let j = d - idx as u32;
            let child = v.child(idx as u8 + 1);
            if rest.is_zero() {
                break;
            }
            if j == 1 {
                stack.push((child, rest.clone()));
                break;
            }
            let (g, _) = path_kernel_exact(d, j, m)?;
            stack.push((child, &rest * &g[a]));
            rest = rest * (BigRational::one() - &g[a]);
            m -= a;
        }
    }
    Ok(merge(out))
}

/// Exact law of `shrink(t)`.
pub fn shrink_distribution(t: &DTree) -> Result<Vec<(DTree, BigRational)>> {
    let d = t.d();
    let sizes = t.subtree_sizes();
    let mut out = Vec::new();
    let mut stack = vec![(VertexLabel::root(), BigRational::one())];
    while let Some((v, w)) = stack.pop() {
        if sizes[&v] == 1 {
            let mut nt = t.clone();
            nt.remove_leaf(&v);
            out.push((nt, w));
            continue;
        }
        let cs = child_sizes(&sizes, &v, d);
        let mut m: usize = cs.iter().sum();
        let mut rest = w;
        for (idx, &b) in cs.iter().enumerate() {
            let j = d - idx as u32;
            let child = v.child(idx as u8 + 1);
            if rest.is_zero() {
                break;
            }
            if j == 1 {
                stack.push((child, rest.clone()));
                break;
            }
            let (_, s) = path_kernel_exact(d, j, m - 1)?;
            if !s[b].is_zero() {
                stack.push((child, &rest * &s[b]));
            }
            rest = rest * (BigRational::one() - &s[b]);
            m -= b;
        }
    }
    Ok(merge(out))
}

fn merge(v: Vec<(DTree, BigRational)>) -> Vec<(DTree, BigRational)> {
    let mut acc: std::collections::BTreeMap<DTree, BigRational> = std::collections::BTreeMap::new();
    for (t, w) in v {
        if !w.is_zero() {
            *acc.entry(t).or_insert_with(BigRational::zero) += w;
        }
    }
    acc.into_iter().collect()
}

/// The tree-level kernel induced by [`grow`] from uniform `k`-vertex trees.
pub fn grow_kernel(d: u32, k: usize) -> Result<CouplingKernel<DTree>> {
    let left = uniform_trees(d, k);
    let right = uniform_trees(d, k + 1);
    let index: HashMap<Vec<u8>, usize> = right
        .iter()
        .enumerate()
        .map(|(j, (t, _))| (t.encode(), j))
        .collect();
    let mut entries = Vec::new();
    for (i, (t, w)) in left.iter().enumerate() {
        for (nt, g) in grow_distribution(t)? {
            entries.push((i, index[&nt.encode()], w * g));
        }
    }
    Ok(CouplingKernel {
        relation: "subtree, one more vertex".into(),
        left: left.into_iter().map(|(t, _)| t).collect(),
        right: right.into_iter().map(|(t, _)| t).collect(),
        entries,
    })
}

/// Symbolic check that [`grow`] maps the uniform `k`-law to the uniform
/// `(k+1)`-law.
pub fn grow_pushforward_is_uniform(d: u32, k: usize) -> Result<bool> {
    let kernel = grow_kernel(d, k)?;
    let target = BigRational::new(BigInt::one(), BigInt::from(count_trees(d, k + 1)));
    Ok(kernel.right_marginal().iter().all(|w| *w == target)
        && kernel.respects(|a, b| a.is_subtree_of(b) && b.len() == a.len() + 1))
}

/// Symbolic check that [`shrink`] is the Bayes reverse of [`grow`] under
/// uniform inputs: `P(t) G(t → t') = P(t') S(t' → t)`.
pub fn shrink_reverses_grow(d: u32, k: usize) -> Result<bool> {
    let kernel = grow_kernel(d, k)?;
    let pk = BigRational::new(BigInt::one(), BigInt::from(count_trees(d, k + 1)));
    let mut forward: HashMap<(Vec<u8>, Vec<u8>), BigRational> = HashMap::new();
    for (i, j, w) in &kernel.entries {
        forward.insert(
            (kernel.left[*i].encode(), kernel.right[*j].encode()),
            w.clone(),
        );
    }
    let mut count = 0usize;
    for t2 in &kernel.right {
        for (t1, s) in shrink_distribution(t2)? {
            count += 1;
            let key = (t1.encode(), t2.encode());
            if forward.get(&key) != Some(&(&pk * s)) {
                return Ok(false);
            }
        }
    }
    Ok(count == forward.len())
}
