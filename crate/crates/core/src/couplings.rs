//! Monotone couplings: nested uniform chains, a uniform tree inside a
//! survival-conditioned tree, and pairs of survival-conditioned trees at two
//! densities, all produced as depth windows with containment checked.
//!
//! The pair couplings expand a frontier of vertices known to carry infinite
//! lines of descent. Each frontier vertex `u` owns a bundle drawn from
//! `rng.split(u)`: the child roles and the attachment sizes at both
//! densities, coupled by inverting both size laws at shared uniforms.

use std::collections::{HashMap, VecDeque};
use std::sync::{Arc, Mutex, OnceLock};

use num_rational::BigRational;
use serde::Serialize;

use crate::combinatorics::{min_split_quantile, SizeDraw};
use crate::error::{Error, Result};
use crate::kernels::{check_domination, grow, Domination};
use crate::params::{rational_to_string, OffspringParams};
use crate::rng::RngStream;
use crate::samplers::{
    sample_iic, sample_lpair, sample_lstar, sample_nested_pair_window, sample_tinf,
    sample_uniform_window,
};
use crate::tree::{DTree, VertexLabel, WindowedTree};
use crate::verify::{iic_window_law, uniform_window_law};

/// Largest replacement size for which pruning builds a window kernel
/// (`d = 3`, replacement windows of depth at least 1).
pub const PRUNING_CAP: usize = 128;

/// Outcome of one run of a pair coupling.
#[derive(Clone, Debug)]
pub struct CoupledWindows {
    /// Smaller side (lower density, or the finite tree).
    pub window1: WindowedTree,
    /// Larger side.
    pub window2: WindowedTree,
    pub contained: bool,
    /// A size exceeded a cap; the windows are not valid samples.
    pub quarantined: bool,
    /// Frontier vertices processed.
    pub steps: usize,
    /// Shared-uniform inversions where rounding broke monotonicity and the
    /// larger size was clamped.
    pub clamps: usize,
    /// Vertices whose critical subtree was replaced during pruning.
    pub pruned: usize,
}

/// JSON-lines record of a coupling run.
#[derive(Clone, Debug, Serialize)]
pub struct RunRecord {
    pub seed: u64,
    pub index: u64,
    pub d: u32,
    pub p1: String,
    pub p2: String,
    #[serde(rename = "D")]
    pub depth: usize,
    pub window1: crate::tree::WindowJson,
    pub window2: crate::tree::WindowJson,
    pub contained: bool,
    pub quarantined: bool,
    pub steps: usize,
}

impl CoupledWindows {
    pub fn record(
        &self,
        seed: u64,
        index: u64,
        p1: &OffspringParams,
        p2: &OffspringParams,
    ) -> RunRecord {
        RunRecord {
            seed,
            index,
            d: p1.d(),
            p1: rational_to_string(p1.p()),
            p2: rational_to_string(p2.p()),
            depth: self.window1.depth(),
            window1: self.window1.to_json(),
            window2: self.window2.to_json(),
            contained: self.contained,
            quarantined: self.quarantined,
            steps: self.steps,
        }
    }
}

/// `T_0 ⊂ T_1 ⊂ … ⊂ T_{k_max}` with each `T_k` uniform over `k`-vertex trees,
/// built by repeated one-vertex growth.
pub fn couple_chain(d: u32, k_max: usize, rng: &RngStream) -> Result<Vec<DTree>> {
    let mut r = rng.derive_named("chain");
    let mut chain = vec![DTree::empty(d)];
    for _ in 0..k_max {
        let next = grow(chain.last().unwrap(), &mut r)?;
        chain.push(next);
    }
    Ok(chain)
}

fn graft_nonempty(into: &mut WindowedTree, at: &VertexLabel, sub: &WindowedTree) -> Result<()> {
    if sub.is_empty() {
        return Ok(());
    }
    into.graft(at, sub)
}

/// Quantile coupling of a finite size with `L*` at a shared uniform; a
/// rounding inversion is clamped upward and counted.
fn clamp_up(a: usize, b: SizeDraw, clamps: &mut usize) -> SizeDraw {
    match b {
        SizeDraw::Finite(x) if x < a => {
            *clamps += 1;
            SizeDraw::Finite(a)
        }
        other => other,
    }
}

/// A uniform `m`-vertex tree (window of depth `ld`) inside `T_∞(p)` (window
/// of depth `rd ≤ ld`), `d = 2`. At the root the smaller subtree size `L` and
/// `L*` invert their laws at one uniform, so `L ≤ L*`; the side `X` gets the
/// smaller subtree. If `L* < ∞` the `X` child carries nested uniform trees of
/// sizes `L ≤ L*` and the other child recurses with `m − 1 − L`; otherwise
/// both children recurse.
fn finite_in_infinite_d2(
    params: &OffspringParams,
    m: usize,
    ld: usize,
    rd: usize,
    rng: &RngStream,
    clamps: &mut usize,
    quarantined: &mut bool,
) -> Result<(WindowedTree, WindowedTree)> {
    debug_assert!(ld >= rd);
    if m == 0 {
        return Ok((
            WindowedTree::empty(2, ld),
            sample_tinf(params, rd, &rng.derive_named("tinf"))?,
        ));
    }
    if rd == 0 {
        let left = sample_uniform_window(2, m, ld, &rng.derive_named("uniform"))?;
        return Ok((left, WindowedTree::root_only(2, 0, true)));
    }
    let mut r = rng.derive_named("root");
    let u = r.uniform();
    let x = r.below(2) as u8 + 1;
    let l = min_split_quantile(m, u);
    let lstar = clamp_up(l, sample_lstar(params, u), clamps);
    let mut left = WindowedTree::root_only(2, ld, false);
    let mut right = WindowedTree::root_only(2, rd, false);
    let (cx, cy) = (
        VertexLabel::root().child(x),
        VertexLabel::root().child(3 - x),
    );
    match lstar {
        SizeDraw::Finite(b) => {
            // Depth ld − 1 covers the whole inner tree when ld ≥ m.
            let pair = sample_nested_pair_window(2, l, b, ld - 1, &rng.derive_named("nested"))?;
            graft_nonempty(&mut left, &cx, &pair.inner)?;
            graft_nonempty(&mut right, &cx, &pair.outer.truncate(rd - 1))?;
            *clamps += pair.clamps;
            let (a, b) = finite_in_infinite_d2(
                params,
                m - 1 - l,
                ld - 1,
                rd - 1,
                &rng.derive(2),
                clamps,
                quarantined,
            )?;
            graft_nonempty(&mut left, &cy, &a)?;
            graft_nonempty(&mut right, &cy, &b)?;
        }
        SizeDraw::Infinite => {
            for (child, size, tag) in [(&cx, l, 1), (&cy, m - 1 - l, 2)] {
                let (a, b) = finite_in_infinite_d2(
                    params,
                    size,
                    ld - 1,
                    rd - 1,
                    &rng.derive(tag),
                    clamps,
                    quarantined,
                )?;
                graft_nonempty(&mut left, child, &a)?;
                graft_nonempty(&mut right, child, &b)?;
            }
        }
        SizeDraw::Overflow => *quarantined = true,
    }
    Ok((left, right))
}

/// A uniform tree inside a survival-conditioned tree.
#[derive(Clone, Debug)]
pub struct FiniteInInfinite {
    /// The whole finite tree when it was materialized (`d = 2`).
    pub tree: Option<DTree>,
    /// Its depth-`D` window.
    pub finite: WindowedTree,
    pub window: WindowedTree,
    pub contained: bool,
    pub quarantined: bool,
    pub clamps: usize,
}

/// Couples `T_k` (uniform over `k`-vertex trees) with `T_∞(p)` so that
/// `T_k` lies inside, returning `T_k` and the depth-`depth` window of
/// `T_∞(p)`. For `d = 2` the whole of `T_k` is built; for `d = 3` the window
/// of `T_k` is drawn from the window kernel of `T_k` inside the incipient
/// infinite cluster, conditionally on the critical side of
/// [`couple_critical_supercritical`].
pub fn couple_finite_in_infinite(
    params: &OffspringParams,
    k: usize,
    depth: usize,
    rng: &RngStream,
) -> Result<FiniteInInfinite> {
    match params.d() {
        2 => {
            let (mut clamps, mut quarantined) = (0, false);
            let ld = depth.max(k);
            let (full, window) =
                finite_in_infinite_d2(params, k, ld, depth, rng, &mut clamps, &mut quarantined)?;
            let finite = full.truncate(depth);
            let contained = finite.contained_in(&window);
            Ok(FiniteInInfinite {
                tree: Some(full.tree().clone()),
                finite,
                window,
                contained,
                quarantined,
                clamps,
            })
        }
        _ => {
            let (finite, run) = finite_in_infinite_d3(params, k, depth, rng)?;
            let contained = finite.contained_in(&run.window2);
            Ok(FiniteInInfinite {
                tree: None,
                finite,
                window: run.window2,
                contained,
                quarantined: run.quarantined,
                clamps: run.clamps,
            })
        }
    }
}

/// Exact window-level coupling of `T_k` inside the incipient infinite
/// cluster, tabulated by the conditional law of the `T_k` window given the
/// cluster window.
struct IicKernel {
    left: Vec<WindowedTree>,
    index: HashMap<WindowedTree, usize>,
    /// Cumulative conditional weights per cluster window.
    rows: Vec<Vec<(usize, f64)>>,
}

fn iic_kernel(d: u32, k: usize, depth: usize) -> Result<Arc<IicKernel>> {
    static CACHE: OnceLock<Mutex<HashMap<(u32, usize, usize), Arc<IicKernel>>>> = OnceLock::new();
    let cache = CACHE.get_or_init(|| Mutex::new(HashMap::new()));
    if let Some(k) = cache.lock().unwrap().get(&(d, k, depth)) {
        return Ok(k.clone());
    }
    let left: Vec<(WindowedTree, BigRational)> = uniform_window_law(d, k, depth)?
        .entries
        .into_iter()
        .collect();
    let right: Vec<(WindowedTree, BigRational)> =
        iic_window_law(d, depth)?.entries.into_iter().collect();
    let key = |w: &WindowedTree| hex::encode(w.encode());
    let kernel = match check_domination(&left, &right, |a, b| a.contained_in(b), key)? {
        Domination::Coupled(k) => k,
        Domination::Infeasible(c) => return Err(Error::Infeasible(Box::new(c))),
    };
    let rows = (0..kernel.right.len())
        .map(|j| {
            let mut acc = 0.0;
            kernel
                .given_right(j)
                .into_iter()
                .map(|(i, w)| {
                    acc += num_traits::ToPrimitive::to_f64(&w).unwrap_or(0.0);
                    (i, acc)
                })
                .collect()
        })
        .collect();
    let index = kernel
        .right
        .iter()
        .cloned()
        .enumerate()
        .map(|(j, w)| (w, j))
        .collect();
    let built = Arc::new(IicKernel {
        left: kernel.left,
        index,
        rows,
    });
    cache.lock().unwrap().insert((d, k, depth), built.clone());
    Ok(built)
}

/// Window of a uniform `k`-vertex tree drawn inside the given window of an
/// incipient infinite cluster.
fn uniform_inside_iic(
    d: u32,
    k: usize,
    iic: &WindowedTree,
    rng: &mut RngStream,
) -> Result<WindowedTree> {
    if k == 0 {
        return Ok(WindowedTree::empty(d, iic.depth()));
    }
    if iic.depth() == 0 {
        return Ok(WindowedTree::of_size_at_root(d, k));
    }
    let kernel = iic_kernel(d, k, iic.depth())?;
    let j = *kernel
        .index
        .get(iic)
        .ok_or_else(|| Error::Invariant("critical window outside the cluster's support".into()))?;
    let row = &kernel.rows[j];
    let u = rng.uniform() * row.last().map_or(1.0, |r| r.1);
    let pick = row
        .iter()
        .find(|(_, c)| u <= *c)
        .unwrap_or(row.last().unwrap());
    Ok(kernel.left[pick.0].clone())
}

/// `d = 3`: `T_k ⊂ T_∞(1/3) ⊂ T_∞(p)`, the first inclusion from the window
/// kernel and the second from [`couple_critical_supercritical`].
fn finite_in_infinite_d3(
    params: &OffspringParams,
    k: usize,
    depth: usize,
    rng: &RngStream,
) -> Result<(WindowedTree, CoupledWindows)> {
    let run = if params.is_critical() {
        let w = sample_iic(3, depth, &rng.derive_named("iic"))?;
        CoupledWindows {
            window1: w.clone(),
            window2: w,
            contained: true,
            quarantined: false,
            steps: 0,
            clamps: 0,
            pruned: 0,
        }
    } else {
        couple_critical_supercritical(params, depth, &rng.derive_named("critical"))?
    };
    if run.quarantined {
        return Ok((WindowedTree::empty(3, depth), run));
    }
    let finite = uniform_inside_iic(3, k, &run.window1, &mut rng.derive_named("inside"))?;
    Ok((finite, run))
}

/// Shared state of the frontier constructions.
struct Frontier {
    d: u32,
    depth: usize,
    left: WindowedTree,
    right: WindowedTree,
    queue: VecDeque<VertexLabel>,
    steps: usize,
    clamps: usize,
    quarantined: bool,
}

impl Frontier {
    fn new(d: u32, depth: usize) -> Result<Self> {
        let mut f = Self {
            d,
            depth,
            left: WindowedTree::empty(d, depth),
            right: WindowedTree::empty(d, depth),
            queue: VecDeque::new(),
            steps: 0,
            clamps: 0,
            quarantined: false,
        };
        f.spine(VertexLabel::root())?;
        Ok(f)
    }

    /// Makes `v` a frontier vertex on both sides.
    fn spine(&mut self, v: VertexLabel) -> Result<()> {
        let alive = v.depth() == self.depth;
        self.left.insert(v.clone(), alive)?;
        self.right.insert(v.clone(), alive)?;
        if !alive {
            self.queue.push_back(v);
        }
        Ok(())
    }

    /// Nested uniform trees of sizes `a ≤ b` at `v`.
    fn nested(&mut self, v: &VertexLabel, a: usize, b: usize, rng: &RngStream) -> Result<()> {
        let pair = sample_nested_pair_window(self.d, a, b, self.depth - v.depth(), rng)?;
        self.clamps += pair.clamps;
        graft_nonempty(&mut self.left, v, &pair.inner)?;
        graft_nonempty(&mut self.right, v, &pair.outer)
    }

    fn graft(&mut self, v: &VertexLabel, inner: &WindowedTree, outer: &WindowedTree) -> Result<()> {
        graft_nonempty(&mut self.left, v, inner)?;
        graft_nonempty(&mut self.right, v, outer)
    }

    fn finish(self, pruned: usize) -> CoupledWindows {
        let contained = self.left.contained_in(&self.right);
        CoupledWindows {
            window1: self.left,
            window2: self.right,
            contained,
            quarantined: self.quarantined,
            steps: self.steps,
            clamps: self.clamps,
            pruned,
        }
    }
}

fn check_pair(p1: &OffspringParams, p2: &OffspringParams, d: u32) -> Result<()> {
    if p1.d() != d || p2.d() != d {
        return Err(Error::Domain(format!("this coupling needs d = {d}")));
    }
    if p1.p() > p2.p() {
        return Err(Error::Domain(format!("need p1 ≤ p2, got {p1} and {p2}")));
    }
    Ok(())
}

/// `T_∞(p1) ⊆ T_∞(p2)` for `d = 2`, `1/2 ≤ p1 ≤ p2 ≤ 1`, as depth windows.
///
/// At each frontier vertex `u` (taken in vertex order) a uniform side `X`
/// receives the attachment and the other child joins the frontier. The sizes
/// `L*(p1) ≤ L*(p2)` come from one uniform: if both are finite, nested
/// uniform trees are attached; if only `L*(p2)` is infinite, a uniform
/// `L*(p1)`-tree inside `T_∞(p2)` is attached; if both are infinite, `X`
/// joins the frontier too.
pub fn couple_supercritical_pair(
    p1: &OffspringParams,
    p2: &OffspringParams,
    depth: usize,
    rng: &RngStream,
) -> Result<CoupledWindows> {
    check_pair(p1, p2, 2)?;
    let mut f = Frontier::new(2, depth)?;
    while let Some(u) = f.queue.pop_front() {
        f.steps += 1;
        let node = rng.split(&u);
        let mut r = node.derive_named("bundle");
        let x = r.below(2) as u8 + 1;
        let w = r.uniform();
        let a = sample_lstar(p1, w);
        let b = sample_lstar(p2, w);
        let (cx, cy) = (u.child(x), u.child(3 - x));
        let attach = node.derive_named("attach");
        match (a, b) {
            (SizeDraw::Overflow, _) | (_, SizeDraw::Overflow) => {
                f.quarantined = true;
                break;
            }
            (SizeDraw::Infinite, _) => f.spine(cx)?,
            (SizeDraw::Finite(a), b) => match clamp_up(a, b, &mut f.clamps) {
                SizeDraw::Finite(b) => f.nested(&cx, a, b, &attach)?,
                _ => {
                    let rd = depth - cx.depth();
                    let (inner, outer) = finite_in_infinite_d2(
                        p2,
                        a,
                        rd,
                        rd,
                        &attach,
                        &mut f.clamps,
                        &mut f.quarantined,
                    )?;
                    f.graft(&cx, &inner, &outer)?;
                }
            },
        }
        f.spine(cy)?;
    }
    Ok(f.finish(0))
}

/// The `(L*, L**)` bundle of a `d = 3` frontier vertex at two densities,
/// sharing `(U₁, U₂)` and a uniform permutation of the children.
struct TernaryBundle {
    perm: Vec<u8>,
    low: (SizeDraw, SizeDraw),
    high: (SizeDraw, SizeDraw),
}

fn ternary_bundle(p1: &OffspringParams, p2: &OffspringParams, node: &RngStream) -> TernaryBundle {
    let mut r = node.derive_named("bundle");
    let perm = r.permutation(3);
    let (u1, u2) = (r.uniform(), r.uniform());
    TernaryBundle {
        perm,
        low: sample_lpair(p1, u1, u2),
        high: sample_lpair(p2, u1, u2),
    }
}

/// `T_∞(p1) ⊆ T_∞(p2)` for `d = 3`, `1/3 < p1 ≤ p2 ≤ 1`, as depth windows.
///
/// At each frontier vertex a uniform permutation `(X₁, X₂, X₃)` places the
/// `T*`, `T**` and spine roles; `X₃` joins the frontier. For `X₁` and `X₂`
/// the sizes at `p1` decide: both finite gives nested uniform trees, finite
/// at `p1` only gives a uniform tree inside `T_∞(p2)`, and infinite at `p1`
/// puts the child on the frontier.
pub fn couple_supercritical_pair_d3(
    p1: &OffspringParams,
    p2: &OffspringParams,
    depth: usize,
    rng: &RngStream,
) -> Result<CoupledWindows> {
    check_pair(p1, p2, 3)?;
    if p1.is_critical() {
        return Err(Error::Domain(
            "p1 = 1/3 needs couple_critical_supercritical".into(),
        ));
    }
    let mut f = Frontier::new(3, depth)?;
    while let Some(u) = f.queue.pop_front() {
        f.steps += 1;
        let node = rng.split(&u);
        let b = ternary_bundle(p1, p2, &node);
        let roles = [
            (b.perm[0], b.low.0, b.high.0, 1u64),
            (b.perm[1], b.low.1, b.high.1, 2),
        ];
        let mut children: Vec<(VertexLabel, SizeDraw, SizeDraw, u64)> = roles
            .iter()
            .map(|&(x, lo, hi, tag)| (u.child(x), lo, hi, tag))
            .collect();
        children.sort_by(|a, b| a.0.cmp(&b.0));
        let mut spines = vec![u.child(b.perm[2])];
        for (v, lo, hi, tag) in children {
            let attach = node.derive(tag);
            match (lo, hi) {
                (SizeDraw::Overflow, _) | (_, SizeDraw::Overflow) => f.quarantined = true,
                (SizeDraw::Infinite, _) => spines.push(v),
                (SizeDraw::Finite(a), hi) => match clamp_up(a, hi, &mut f.clamps) {
                    SizeDraw::Finite(bb) => f.nested(&v, a, bb, &attach)?,
                    _ => {
                        let (inner, run) =
                            finite_in_infinite_d3(p2, a, depth - v.depth(), &attach)?;
                        f.quarantined |= run.quarantined;
                        f.clamps += run.clamps;
                        f.graft(&v, &inner, &run.window2)?;
                    }
                },
            }
        }
        if f.quarantined {
            break;
        }
        spines.sort();
        for v in spines {
            f.spine(v)?;
        }
    }
    Ok(f.finish(0))
}

/// `T_∞(1/3) ⊆ T_∞(p)` for `d = 3`, `1/3 < p ≤ 1`, as depth windows.
///
/// The frontier follows the `p` side: a child whose size is infinite at `p`
/// joins the frontier on both sides. When the critical size `L_v` at such a
/// child `v` is finite, the critical side is over-built there and `v` is
/// recorded for pruning. After the frontier is exhausted, recorded vertices
/// are processed in decreasing vertex order and the critical subtree at `v`
/// is replaced by a uniform `L_v`-tree drawn inside it (window kernel). The
/// `p` side is untouched, so containment is preserved.
pub fn couple_critical_supercritical(
    p: &OffspringParams,
    depth: usize,
    rng: &RngStream,
) -> Result<CoupledWindows> {
    if p.d() != 3 || p.is_critical() {
        return Err(Error::Domain(format!("need d = 3 and p > 1/3, got {p}")));
    }
    let crit = OffspringParams::parse(3, "1/3")?;
    let mut f = Frontier::new(3, depth)?;
    let mut prune: Vec<(VertexLabel, SizeDraw)> = Vec::new();
    while let Some(u) = f.queue.pop_front() {
        f.steps += 1;
        let node = rng.split(&u);
        let b = ternary_bundle(&crit, p, &node);
        let roles = [
            (b.perm[0], b.low.0, b.high.0, 1u64),
            (b.perm[1], b.low.1, b.high.1, 2),
        ];
        let mut spines = vec![u.child(b.perm[2])];
        for &(x, lo, hi, tag) in &roles {
            let v = u.child(x);
            match (lo, hi) {
                (_, SizeDraw::Infinite) => {
                    if lo != SizeDraw::Infinite {
                        prune.push((v.clone(), lo));
                    }
                    spines.push(v);
                }
                (SizeDraw::Finite(a), SizeDraw::Finite(bb)) if a <= bb => {
                    f.nested(&v, a, bb, &node.derive(tag))?
                }
                (SizeDraw::Finite(a), SizeDraw::Finite(bb)) => {
                    f.clamps += 1;
                    f.nested(&v, a, a.max(bb), &node.derive(tag))?;
                }
                _ => f.quarantined = true,
            }
        }
        if f.quarantined {
            break;
        }
        spines.sort();
        for v in spines {
            f.spine(v)?;
        }
    }
    if !f.quarantined {
        prune.sort_by(|a, b| b.0.cmp(&a.0));
        for (v, size) in &prune {
            let sub_depth = depth - v.depth();
            let replacement = match *size {
                SizeDraw::Finite(l) if sub_depth == 0 || l == 0 => {
                    WindowedTree::of_size_at_root(3, l).truncate(0)
                }
                SizeDraw::Finite(l) if l <= PRUNING_CAP => {
                    let current = f.left.subwindow_at(v);
                    uniform_inside_iic(3, l, &current, &mut rng.split(v).derive_named("prune"))?
                }
                SizeDraw::Overflow if sub_depth == 0 => WindowedTree::root_only(3, 0, true),
                _ => {
                    f.quarantined = true;
                    break;
                }
            };
            f.left.remove_subtree(v);
            let replacement = if replacement.depth() == sub_depth {
                replacement
            } else {
                WindowedTree::empty(3, sub_depth)
            };
            graft_nonempty(&mut f.left, v, &replacement)?;
        }
    }
    Ok(f.finish(prune.len()))
}
