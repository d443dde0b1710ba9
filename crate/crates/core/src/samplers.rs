//! Random generation of the tree laws: percolation clusters, uniform trees,
//! the incipient infinite cluster, survival-conditioned trees and the
//! auxiliary trees attached along their spines.
//!
//! Infinite trees are only ever produced as depth windows. Every vertex draws
//! from its own stream (`rng.split(v)`), so outputs do not depend on the order
//! in which vertices are visited.

use std::collections::VecDeque;

use serde::Serialize;

use crate::combinatorics::{
    dual_p, eta_inf, first_tree_quantile, size_table, SizeDraw, TableKind, TernaryConstants,
};
use crate::error::{Error, Result};
use crate::params::OffspringParams;
use crate::rng::RngStream;
use crate::tree::{DTree, VertexLabel, WindowedTree};

/// Resource limits for samplers that materialize whole trees.
#[derive(Clone, Copy, Debug, Serialize)]
pub struct SampleBudget {
    pub max_vertices: usize,
    pub max_depth: usize,
}

impl Default for SampleBudget {
    fn default() -> Self {
        Self {
            max_vertices: 1 << 20,
            max_depth: 1 << 16,
        }
    }
}

/// A materialized tree with a flag telling whether the budget cut it short.
#[derive(Clone, Debug)]
pub struct Budgeted {
    pub tree: DTree,
    pub exceeded: bool,
}

/// The cluster of the root under site percolation with density `p`,
/// explored breadth-first until the budget runs out.
pub fn sample_gw(
    params: &OffspringParams,
    rng: &RngStream,
    budget: SampleBudget,
) -> Result<Budgeted> {
    let d = params.d();
    let p = params.p_f64();
    let mut tree = DTree::empty(d);
    let mut queue = VecDeque::from([VertexLabel::root()]);
    let mut exceeded = false;
    while let Some(v) = queue.pop_front() {
        if rng.split(&v).bernoulli(p) {
            if tree.len() >= budget.max_vertices || v.depth() > budget.max_depth {
                exceeded = true;
                break;
            }
            for i in 1..=d as u8 {
                queue.push_back(v.child(i));
            }
            tree.insert(v)?;
        }
    }
    Ok(Budgeted { tree, exceeded })
}

/// Depth-`depth` window of the percolation cluster with density `p`,
/// placed at `at` inside `out` (whose depth must be `|at| + depth`).
fn gw_window_into(
    out: &mut WindowedTree,
    at: &VertexLabel,
    d: u32,
    p: f64,
    rng: &RngStream,
) -> Result<()> {
    let depth = out.depth();
    let mut queue = VecDeque::from([at.clone()]);
    while let Some(v) = queue.pop_front() {
        let mut r = rng.split(&v);
        if !r.bernoulli(p) {
            continue;
        }
        if v.depth() == depth {
            let alive = !r.bernoulli((1.0 - p).powi(d as i32));
            out.insert(v, alive)?;
        } else {
            for i in 1..=d as u8 {
                queue.push_back(v.child(i));
            }
            out.insert(v, false)?;
        }
    }
    Ok(())
}

/// Depth-`depth` window of the percolation cluster of the root.
pub fn sample_gw_window(d: u32, p: f64, depth: usize, rng: &RngStream) -> Result<WindowedTree> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::Domain(format!("p = {p} outside [0, 1]")));
    }
    let mut w = WindowedTree::empty(d, depth);
    gw_window_into(&mut w, &VertexLabel::root(), d, p, rng)?;
    Ok(w)
}

/// Sizes of the `d` root subtrees of a uniform tree with `n ≥ 1` vertices,
/// drawn forest by forest with one uniform per stage.
fn split_sizes(d: u32, n: usize, uniforms: &mut impl FnMut() -> f64) -> Vec<usize> {
    let mut rest = n - 1;
    let mut out = Vec::with_capacity(d as usize);
    for j in (2..=d).rev() {
        let x = first_tree_quantile(d, j, rest, uniforms());
        out.push(x);
        rest -= x;
    }
    out.push(rest);
    out
}

/// Uniform tree on `k` vertices.
pub fn sample_uniform_k(d: u32, k: usize, rng: &RngStream) -> Result<DTree> {
    let mut tree = DTree::empty(d);
    let mut stack = vec![(VertexLabel::root(), k)];
    while let Some((v, n)) = stack.pop() {
        if n == 0 {
            continue;
        }
        let mut r = rng.split(&v);
        let sizes = split_sizes(d, n, &mut || r.uniform());
        tree.insert(v.clone())?;
        for (i, s) in sizes.into_iter().enumerate().rev() {
            stack.push((v.child(i as u8 + 1), s));
        }
    }
    Ok(tree)
}

/// Depth-`depth` window of a uniform `k`-vertex tree.
pub fn sample_uniform_window(
    d: u32,
    k: usize,
    depth: usize,
    rng: &RngStream,
) -> Result<WindowedTree> {
    Ok(sample_nested_pair_window(d, k, k, depth, rng)?.inner)
}

/// Windows of a nested pair `T_a ⊆ T_b` of uniform trees with `a ≤ b`.
#[derive(Clone, Debug)]
pub struct NestedPair {
    pub inner: WindowedTree,
    pub outer: WindowedTree,
    /// Stages where floating-point rounding broke the band constraint and
    /// the outer size was clamped.
    pub clamps: usize,
}

/// Couples uniform `a`- and `b`-vertex trees (`a ≤ b`) so that the smaller
/// is contained in the larger, and returns their depth-`depth` windows.
///
/// At every vertex the children forests are split stage by stage; both sides
/// invert their first-tree laws at the same uniform. Since each one-vertex
/// step of these laws admits a monotone unit-step coupling, the quantile
/// coupling keeps the first trees nested with a size gap no larger than the
/// total gap, so the remaining forests stay nested too.
pub fn sample_nested_pair_window(
    d: u32,
    a: usize,
    b: usize,
    depth: usize,
    rng: &RngStream,
) -> Result<NestedPair> {
    if a > b {
        return Err(Error::Domain(format!(
            "nested pair needs a ≤ b, got {a} > {b}"
        )));
    }
    let mut inner = WindowedTree::empty(d, depth);
    let mut outer = WindowedTree::empty(d, depth);
    let mut clamps = 0;
    let mut stack = vec![(VertexLabel::root(), a, b)];
    while let Some((v, na, nb)) = stack.pop() {
        if nb == 0 {
            continue;
        }
        if v.depth() == depth {
            if na > 0 {
                inner.insert(v.clone(), na >= 2)?;
            }
            outer.insert(v, nb >= 2)?;
            continue;
        }
        if na > 0 {
            inner.insert(v.clone(), false)?;
        }
        outer.insert(v.clone(), false)?;
        let mut r = rng.split(&v);
        let mut ra = na.saturating_sub(1);
        let mut rb = nb - 1;
        for j in (1..=d).rev() {
            let child = v.child((d - j + 1) as u8);
            let (xa, xb) = if j == 1 {
                (ra, rb)
            } else {
                let u = r.uniform();
                let xa = if na > 0 {
                    first_tree_quantile(d, j, ra, u)
                } else {
                    0
                };
                let mut xb = first_tree_quantile(d, j, rb, u);
                let (lo, hi) = (xa, xa + (rb - ra));
                if xb < lo || xb > hi {
                    clamps += 1;
                    xb = xb.clamp(lo, hi);
                }
                (xa, xb)
            };
            ra -= xa;
            rb -= xb;
            stack.push((child, xa, xb));
        }
    }
    Ok(NestedPair {
        inner,
        outer,
        clamps,
    })
}

/// Depth-`depth` window of the incipient infinite cluster: a uniformly
/// random ray with independent critical clusters hanging off it.
pub fn sample_iic(d: u32, depth: usize, rng: &RngStream) -> Result<WindowedTree> {
    let p = 1.0 / d as f64;
    let mut w = WindowedTree::empty(d, depth);
    let mut v = VertexLabel::root();
    loop {
        if v.depth() == depth {
            w.insert(v, true)?;
            return Ok(w);
        }
        w.insert(v.clone(), false)?;
        let z = rng.split(&v).derive_named("backbone").below(d as usize) as u8 + 1;
        for i in 1..=d as u8 {
            if i != z {
                gw_window_into(&mut w, &v.child(i), d, p, rng)?;
            }
        }
        v = v.child(z);
    }
}

/// Attachment drawn at a spine vertex: either another infinite spine or a
/// finite tree.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Attachment {
    Spine,
    Finite,
}

/// Window of `T_∞(p)`, the tree conditioned on survival (for `p = 1/d`, the
/// incipient infinite cluster).
///
/// Each spine vertex draws its children's roles independently: for `d = 2` a
/// uniform side `X` gets `T*(p)` and the other side a new spine; for `d = 3`
/// a uniform permutation `(X₁, X₂, X₃)` places `T*(p)`, `T**(p)` and a spine.
/// A finite `T*` or `T**` has the law of the cluster conditioned on
/// extinction, i.e. percolation at the dual density `p(1 − η_∞)^{d−1}`.
pub fn sample_tinf(
    params: &OffspringParams,
    depth: usize,
    rng: &RngStream,
) -> Result<WindowedTree> {
    let d = params.d();
    if params.is_critical() {
        return sample_iic(d, depth, rng);
    }
    let p = params.p_f64();
    let eta = eta_inf(params)?;
    let dual = dual_p(d, p);
    let ternary = if d == 3 {
        Some(TernaryConstants::new(p)?)
    } else {
        None
    };
    let mut w = WindowedTree::empty(d, depth);
    let mut spine = VecDeque::from([VertexLabel::root()]);
    while let Some(u) = spine.pop_front() {
        if u.depth() == depth {
            w.insert(u, true)?;
            continue;
        }
        w.insert(u.clone(), false)?;
        let mut r = rng.split(&u).derive_named("bundle");
        let roles: Vec<(u8, Attachment)> = match &ternary {
            None => {
                let x = r.below(2) as u8 + 1;
                let star = if r.uniform() < p * eta {
                    Attachment::Spine
                } else {
                    Attachment::Finite
                };
                vec![(x, star), (3 - x, Attachment::Spine)]
            }
            Some(c) => {
                let perm = r.permutation(3);
                let first = if r.uniform() < c.first_infinite {
                    Attachment::Spine
                } else {
                    Attachment::Finite
                };
                let second_inf = match first {
                    Attachment::Spine => c.second_infinite_given_infinite,
                    Attachment::Finite => c.first_infinite,
                };
                let second = if r.uniform() < second_inf {
                    Attachment::Spine
                } else {
                    Attachment::Finite
                };
                vec![
                    (perm[0], first),
                    (perm[1], second),
                    (perm[2], Attachment::Spine),
                ]
            }
        };
        let mut roles = roles;
        roles.sort_by_key(|(i, _)| *i);
        for (i, role) in roles {
            let child = u.child(i);
            match role {
                Attachment::Spine => spine.push_back(child),
                Attachment::Finite => gw_window_into(&mut w, &child, d, dual, rng)?,
            }
        }
    }
    Ok(w)
}

/// `T*(p)` as a full tree, when finite and within budget.
#[derive(Clone, Debug)]
pub enum StarTree {
    Finite(DTree),
    Infinite,
    /// Finite but larger than the budget or the size table.
    Exceeded,
}

/// A `T*`-type draw reduced to a window, with its size.
#[derive(Clone, Debug)]
pub struct StarWindow {
    pub size: SizeDraw,
    pub window: WindowedTree,
}

impl StarWindow {
    pub fn quarantined(&self) -> bool {
        self.size == SizeDraw::Overflow
    }
}

fn star_window(
    params: &OffspringParams,
    size: SizeDraw,
    depth: usize,
    rng: &RngStream,
) -> Result<StarWindow> {
    let window = match size {
        SizeDraw::Finite(k) => {
            sample_uniform_window(params.d(), k, depth, &rng.derive_named("shape"))?
        }
        SizeDraw::Infinite => sample_tinf(params, depth, &rng.derive_named("tinf"))?,
        SizeDraw::Overflow => WindowedTree::empty(params.d(), depth),
    };
    Ok(StarWindow { size, window })
}

fn require_d(params: &OffspringParams, d: u32) -> Result<()> {
    if params.d() != d {
        return Err(Error::Domain(format!(
            "this sampler needs d = {d}, got {}",
            params.d()
        )));
    }
    Ok(())
}

/// Size of `T*(p)` (`d = 2`) by inversion of `P(L* = k) = 2pη_k(p)`.
pub fn sample_lstar(params: &OffspringParams, u: f64) -> SizeDraw {
    size_table(TableKind::Lstar, params).invert(u)
}

/// `T*(p)` for `d = 2`: its size has law `L*`, and given a finite size `k`
/// it is uniform over `k`-vertex trees.
pub fn sample_tstar(
    params: &OffspringParams,
    rng: &RngStream,
    budget: SampleBudget,
) -> Result<StarTree> {
    require_d(params, 2)?;
    let size = sample_lstar(params, rng.derive_named("size").uniform());
    Ok(match size {
        SizeDraw::Finite(k) if k <= budget.max_vertices => {
            StarTree::Finite(sample_uniform_k(2, k, &rng.derive_named("shape"))?)
        }
        SizeDraw::Infinite => StarTree::Infinite,
        _ => StarTree::Exceeded,
    })
}

/// Depth window of `T*(p)` for `d = 2`; the infinite case is a `T_∞(p)` window.
pub fn sample_tstar_window(
    params: &OffspringParams,
    depth: usize,
    rng: &RngStream,
) -> Result<StarWindow> {
    require_d(params, 2)?;
    let size = sample_lstar(params, rng.derive_named("size").uniform());
    star_window(params, size, depth, rng)
}

/// Sizes `(L*, L**)` for `d = 3` from two uniforms: `L*` inverts
/// `√(3p)η_k(p)`, and `L**` inverts the same law when `L*` is finite or
/// `√(3p)η_k(p)f(p)` when `L*` is infinite.
pub fn sample_lpair(params: &OffspringParams, u1: f64, u2: f64) -> (SizeDraw, SizeDraw) {
    let first = size_table(TableKind::TernaryFirst, params).invert(u1);
    let second = match first {
        SizeDraw::Infinite => size_table(TableKind::TernarySecondGivenInfinite, params).invert(u2),
        _ => size_table(TableKind::TernaryFirst, params).invert(u2),
    };
    (first, second)
}

/// `(T*(p), T**(p))` for `d = 3` as depth windows.
pub fn sample_tstar_pair(
    params: &OffspringParams,
    depth: usize,
    rng: &RngStream,
) -> Result<(StarWindow, StarWindow)> {
    require_d(params, 3)?;
    let mut r = rng.derive_named("size");
    let (a, b) = sample_lpair(params, r.uniform(), r.uniform());
    Ok((
        star_window(params, a, depth, &rng.derive_named("first"))?,
        star_window(params, b, depth, &rng.derive_named("second"))?,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashMap;

    fn params(d: u32, p: &str) -> OffspringParams {
        OffspringParams::parse(d, p).unwrap()
    }

    #[test]
    fn gw_edge_cases() {
        let full = sample_gw(
            &params(2, "1"),
            &RngStream::new(1),
            SampleBudget {
                max_vertices: 31,
                max_depth: 100,
            },
        )
        .unwrap();
        assert!(full.exceeded);
        assert_eq!(full.tree.len(), 31);
        let w = sample_gw_window(3, 1.0, 2, &RngStream::new(2)).unwrap();
        assert_eq!(w.len(), 13);
        assert_eq!(w.alive().len(), 9);
    }

    #[test]
    fn gw_empty_frequency() {
        let pr =
            OffspringParams::percolation(2, crate::params::parse_rational("0.3").unwrap()).unwrap();
        let root = RngStream::new(4);
        let n = 20_000;
        let empty = (0..n)
            .filter(|&i| {
                sample_gw(&pr, &root.derive(i), SampleBudget::default())
                    .unwrap()
                    .tree
                    .is_empty()
            })
            .count();
        assert!((empty as f64 / n as f64 - 0.7).abs() < 0.015);
    }

    #[test]
    fn uniform_small_cases() {
        let r = RngStream::new(3);
        assert!(sample_uniform_k(2, 0, &r).unwrap().is_empty());
        assert_eq!(sample_uniform_k(2, 1, &r).unwrap(), DTree::singleton(2));
        let mut counts: HashMap<DTree, usize> = HashMap::new();
        let n = 50_000;
        for i in 0..n {
            let t = sample_uniform_k(2, 3, &r.derive(i)).unwrap();
            assert_eq!(t.len(), 3);
            *counts.entry(t).or_default() += 1;
        }
        assert_eq!(counts.len(), 5);
        for c in counts.values() {
            assert!((*c as f64 / n as f64 - 0.2).abs() < 0.01);
        }
    }

    #[test]
    fn nested_pairs_are_nested() {
        let r = RngStream::new(8);
        for i in 0..2000u64 {
            let a = (i % 40) as usize;
            let b = a + (i % 7) as usize * 13;
            for d in 2..=3 {
                let pair = sample_nested_pair_window(d, a, b, 3, &r.derive(i)).unwrap();
                assert!(pair.inner.contained_in(&pair.outer), "a={a} b={b} {pair:?}");
                let full = sample_nested_pair_window(d, a, b, b, &r.derive(i)).unwrap();
                assert_eq!(full.inner.len(), a);
                assert_eq!(full.outer.len(), b);
            }
        }
        let same = sample_nested_pair_window(3, 9, 9, 9, &r).unwrap();
        assert_eq!(same.inner, same.outer);
    }

    #[test]
    fn huge_nested_pair_window() {
        let r = RngStream::new(12);
        let pair = sample_nested_pair_window(2, 100_000, 900_000, 2, &r).unwrap();
        assert!(pair.inner.contained_in(&pair.outer));
        assert_eq!(pair.clamps, 0);
    }

    #[test]
    fn iic_depth_zero_and_alive_backbone() {
        let w = sample_iic(2, 0, &RngStream::new(1)).unwrap();
        assert_eq!(w.len(), 1);
        assert_eq!(w.alive().len(), 1);
        let w = sample_iic(3, 3, &RngStream::new(2)).unwrap();
        assert!(!w.alive().is_empty());
    }

    #[test]
    fn tinf_full_at_p_one() {
        let w = sample_tinf(&params(2, "1"), 3, &RngStream::new(5)).unwrap();
        assert_eq!(w.len(), 15);
        let w = sample_tinf(&params(3, "1"), 2, &RngStream::new(5)).unwrap();
        assert_eq!(w.len(), 13);
    }

    #[test]
    fn tstar_edge_cases() {
        let r = RngStream::new(6);
        for i in 0..200 {
            let s = sample_tstar(&params(2, "1"), &r.derive(i), SampleBudget::default()).unwrap();
            assert!(matches!(s, StarTree::Infinite));
            let s = sample_tstar(&params(2, "1/2"), &r.derive(i), SampleBudget::default()).unwrap();
            assert!(!matches!(s, StarTree::Infinite));
            let (a, b) = sample_tstar_pair(&params(3, "1/3"), 1, &r.derive(i)).unwrap();
            assert!(!a.size.is_infinite() && !b.size.is_infinite());
            let (a, b) = sample_tstar_pair(&params(3, "1"), 1, &r.derive(i)).unwrap();
            assert!(a.size.is_infinite() && b.size.is_infinite());
        }
        assert!(sample_tstar(&params(3, "1/2"), &r, SampleBudget::default()).is_err());
    }

    #[test]
    fn reproducible_by_seed() {
        let a = sample_tinf(&params(3, "0.6"), 3, &RngStream::new(77)).unwrap();
        let b = sample_tinf(&params(3, "0.6"), 3, &RngStream::new(77)).unwrap();
        assert_eq!(a, b);
    }
}
