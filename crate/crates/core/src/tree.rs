//! Vertex labels of the rooted `d`-ary tree, finite subtrees and depth windows.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::combinatorics::compositions;
use crate::error::{Error, Result};

/// A vertex of the infinite `d`-ary tree, written as the path of child
/// indices (each in `1..=d`) from the root. The empty path is the root `o`.
///
/// Labels are ordered breadth-first: shorter paths first, equal lengths
/// lexicographically.
#[derive(Clone, PartialEq, Eq, Hash, Default)]
pub struct VertexLabel(Vec<u8>);

impl VertexLabel {
    pub fn root() -> Self {
        Self(Vec::new())
    }

    pub fn from_path(path: &[u8]) -> Self {
        Self(path.to_vec())
    }

    pub fn path(&self) -> &[u8] {
        &self.0
    }

    pub fn depth(&self) -> usize {
        self.0.len()
    }

    pub fn is_root(&self) -> bool {
        self.0.is_empty()
    }

    pub fn child(&self, i: u8) -> Self {
        let mut p = self.0.clone();
        p.push(i);
        Self(p)
    }

    pub fn parent(&self) -> Option<Self> {
        if self.0.is_empty() {
            None
        } else {
            Some(Self(self.0[..self.0.len() - 1].to_vec()))
        }
    }

    /// Concatenation `(self, other)`.
    pub fn join(&self, other: &VertexLabel) -> Self {
        let mut p = self.0.clone();
        p.extend_from_slice(&other.0);
        Self(p)
    }

    /// `w` such that `self = (prefix, w)`, if `prefix` is a prefix of `self`.
    pub fn strip_prefix(&self, prefix: &VertexLabel) -> Option<Self> {
        self.0
            .strip_prefix(prefix.0.as_slice())
            .map(|s| Self(s.to_vec()))
    }

    /// Parses `o`, `()` or `(1,2,1)`.
    pub fn parse(s: &str) -> Result<Self> {
        let s = s.trim();
        if s == "o" || s == "()" || s.is_empty() {
            return Ok(Self::root());
        }
        let inner = s
            .strip_prefix('(')
            .and_then(|t| t.strip_suffix(')'))
            .ok_or_else(|| Error::Parse(s.to_string()))?;
        inner
            .split(',')
            .map(|x| {
                x.trim()
                    .parse::<u8>()
                    .map_err(|_| Error::Parse(s.to_string()))
            })
            .collect::<Result<Vec<_>>>()
            .map(Self)
    }
}

impl Ord for VertexLabel {
    fn cmp(&self, other: &Self) -> Ordering {
        self.0
            .len()
            .cmp(&other.0.len())
            .then_with(|| self.0.cmp(&other.0))
    }
}

impl PartialOrd for VertexLabel {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl fmt::Display for VertexLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.0.is_empty() {
            return write!(f, "o");
        }
        write!(f, "(")?;
        for (i, x) in self.0.iter().enumerate() {
            if i > 0 {
                write!(f, ",")?;
            }
            write!(f, "{x}")?;
        }
        write!(f, ")")
    }
}

impl fmt::Debug for VertexLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Display::fmt(self, f)
    }
}

/// Breadth-first comparison of two vertex labels.
pub fn vertex_order(u: &VertexLabel, v: &VertexLabel) -> Ordering {
    u.cmp(v)
}

/// A finite subtree of the `d`-ary tree containing the root, or the empty tree.
///
/// Each vertex maps to its child-presence mask; bit `i − 1` is set when child
/// `i` is present. Iteration order is the breadth-first vertex order.
#[derive(Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct DTree {
    d: u8,
    nodes: BTreeMap<VertexLabel, u8>,
}

impl DTree {
    pub fn empty(d: u32) -> Self {
        assert!((2..=8).contains(&d), "arity {d} unsupported");
        Self {
            d: d as u8,
            nodes: BTreeMap::new(),
        }
    }

    pub fn singleton(d: u32) -> Self {
        let mut t = Self::empty(d);
        t.nodes.insert(VertexLabel::root(), 0);
        t
    }

    /// Builds a tree from a vertex set, rejecting labels whose parent is absent.
    pub fn from_vertices<I: IntoIterator<Item = VertexLabel>>(d: u32, vertices: I) -> Result<Self> {
        let mut t = Self::empty(d);
        let set: BTreeSet<VertexLabel> = vertices.into_iter().collect();
        for v in &set {
            if v.path().iter().any(|&i| i == 0 || i as u32 > d) {
                return Err(Error::Domain(format!(
                    "label {v} has an entry outside 1..={d}"
                )));
            }
            if let Some(parent) = v.parent() {
                if !set.contains(&parent) {
                    return Err(Error::NotPrefixClosed(v.to_string()));
                }
            }
        }
        for v in set {
            t.add_unchecked(v);
        }
        Ok(t)
    }

    fn add_unchecked(&mut self, v: VertexLabel) {
        if let Some(&i) = v.path().last() {
            let parent = v.parent().unwrap();
            *self.nodes.get_mut(&parent).expect("parent present") |= 1 << (i - 1);
        }
        self.nodes.entry(v).or_insert(0);
    }

    /// Adds `v`; its parent must already be present.
    pub fn insert(&mut self, v: VertexLabel) -> Result<()> {
        match v.parent() {
            Some(p) if !self.nodes.contains_key(&p) => Err(Error::NotPrefixClosed(v.to_string())),
            _ => {
                self.add_unchecked(v);
                Ok(())
            }
        }
    }

    /// Removes a leaf.
    pub fn remove_leaf(&mut self, v: &VertexLabel) {
        debug_assert_eq!(self.nodes.get(v), Some(&0), "{v} is not a leaf");
        self.nodes.remove(v);
        if let (Some(p), Some(&i)) = (v.parent(), v.path().last()) {
            if let Some(m) = self.nodes.get_mut(&p) {
                *m &= !(1 << (i - 1));
            }
        }
    }

    pub fn d(&self) -> u32 {
        self.d as u32
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn contains_vertex(&self, v: &VertexLabel) -> bool {
        self.nodes.contains_key(v)
    }

    pub fn child_mask(&self, v: &VertexLabel) -> Option<u8> {
        self.nodes.get(v).copied()
    }

    pub fn has_child(&self, v: &VertexLabel, i: u8) -> bool {
        self.child_mask(v).is_some_and(|m| m & (1 << (i - 1)) != 0)
    }

    /// Vertices in breadth-first order.
    pub fn vertices(&self) -> impl Iterator<Item = &VertexLabel> + '_ {
        self.nodes.keys()
    }

    pub fn leaves(&self) -> impl Iterator<Item = &VertexLabel> + '_ {
        self.nodes.iter().filter(|(_, &m)| m == 0).map(|(v, _)| v)
    }

    pub fn height(&self) -> Option<usize> {
        self.nodes.keys().next_back().map(VertexLabel::depth)
    }

    /// `{w : (u, w) ∈ self}`; empty when `u ∉ self`.
    pub fn subtree_at(&self, u: &VertexLabel) -> DTree {
        let mut out = DTree::empty(self.d());
        if !self.contains_vertex(u) {
            return out;
        }
        let mut queue = VecDeque::from([VertexLabel::root()]);
        while let Some(w) = queue.pop_front() {
            let full = u.join(&w);
            let mask = self.nodes[&full];
            for i in 1..=self.d {
                if mask & (1 << (i - 1)) != 0 {
                    queue.push_back(w.child(i));
                }
            }
            out.nodes.insert(w, mask);
        }
        out
    }

    /// `s ⊆ t` as vertex sets.
    pub fn is_subtree_of(&self, other: &DTree) -> bool {
        self.nodes.keys().all(|v| other.contains_vertex(v))
    }

    /// Places `sub` at vertex `at`, whose parent must be present (or `at` is the
    /// root of an empty tree). An empty `sub` changes nothing.
    pub fn graft(&mut self, at: &VertexLabel, sub: &DTree) -> Result<()> {
        for w in sub.vertices() {
            self.insert(at.join(w))?;
        }
        Ok(())
    }

    /// Sizes of all subtrees, keyed by vertex.
    pub fn subtree_sizes(&self) -> BTreeMap<VertexLabel, usize> {
        let mut sizes = BTreeMap::new();
        for (v, &mask) in self.nodes.iter().rev() {
            let mut s = 1;
            for i in 1..=self.d {
                if mask & (1 << (i - 1)) != 0 {
                    s += sizes[&v.child(i)];
                }
            }
            sizes.insert(v.clone(), s);
        }
        sizes
    }

    /// Sizes of the root subtrees `(|T^1|, …, |T^d|)`.
    pub fn root_split(&self) -> Vec<usize> {
        let sizes = self.subtree_sizes();
        (1..=self.d)
            .map(|i| {
                sizes
                    .get(&VertexLabel::root().child(i))
                    .copied()
                    .unwrap_or(0)
            })
            .collect()
    }

    pub fn truncate(&self, depth: usize) -> WindowedTree {
        let mut w = WindowedTree::empty(self.d(), depth);
        for (v, &mask) in &self.nodes {
            if v.depth() > depth {
                break;
            }
            w.tree.add_unchecked(v.clone());
            if v.depth() == depth && mask != 0 {
                w.alive.insert(v.clone());
            }
        }
        w
    }

    /// Breadth-first child masks, `d` bits each with child 1 as the most
    /// significant bit of its group, packed MSB-first and zero-padded.
    pub fn encode(&self) -> Vec<u8> {
        let mut bits = BitWriter::default();
        for &mask in self.nodes.values() {
            for i in 1..=self.d {
                bits.push(mask & (1 << (i - 1)) != 0);
            }
        }
        bits.finish()
    }

    pub fn decode(d: u32, bytes: &[u8]) -> Result<Self> {
        let mut t = DTree::empty(d);
        let mut reader = BitReader::new(bytes);
        if bytes.is_empty() {
            return Ok(t);
        }
        let mut queue = VecDeque::from([VertexLabel::root()]);
        t.nodes.insert(VertexLabel::root(), 0);
        while let Some(v) = queue.pop_front() {
            for i in 1..=d as u8 {
                let bit = reader
                    .next()
                    .ok_or_else(|| Error::Decode("input ends before the last mask".into()))?;
                if bit {
                    let c = v.child(i);
                    t.add_unchecked(c.clone());
                    queue.push_back(c);
                }
            }
        }
        reader.finish()?;
        Ok(t)
    }

    pub fn to_hex(&self) -> String {
        hex::encode(self.encode())
    }

    pub fn from_hex(d: u32, s: &str) -> Result<Self> {
        let bytes = hex::decode(s).map_err(|e| Error::Decode(e.to_string()))?;
        Self::decode(d, &bytes)
    }

    pub fn to_dot(&self) -> String {
        self.truncate(usize::MAX).to_dot_styled(None)
    }
}

impl fmt::Debug for DTree {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_set().entries(self.nodes.keys()).finish()
    }
}

#[derive(Default)]
struct BitWriter {
    bytes: Vec<u8>,
    used: u8,
}

impl BitWriter {
    fn push(&mut self, bit: bool) {
        if self.used == 0 {
            self.bytes.push(0);
        }
        if bit {
            *self.bytes.last_mut().unwrap() |= 0x80 >> self.used;
        }
        self.used = (self.used + 1) % 8;
    }

    fn finish(self) -> Vec<u8> {
        self.bytes
    }
}

struct BitReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> BitReader<'a> {
    fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    fn next(&mut self) -> Option<bool> {
        let byte = *self.bytes.get(self.pos / 8)?;
        let bit = byte & (0x80 >> (self.pos % 8)) != 0;
        self.pos += 1;
        Some(bit)
    }

    fn finish(mut self) -> Result<()> {
        let consumed = self.pos.div_ceil(8);
        if consumed != self.bytes.len() {
            return Err(Error::Decode("trailing bytes after the last mask".into()));
        }
        while self.pos % 8 != 0 {
            if self.next() == Some(true) {
                return Err(Error::Decode("nonzero padding".into()));
            }
        }
        Ok(())
    }
}

/// All `k`-vertex trees, generated from root splits.
pub fn enumerate_all(d: u32, k: usize) -> Vec<DTree> {
    fn rec(d: u32, k: usize, memo: &mut BTreeMap<usize, Vec<DTree>>) -> Vec<DTree> {
        if let Some(v) = memo.get(&k) {
            return v.clone();
        }
        let out = if k == 0 {
            vec![DTree::empty(d)]
        } else {
            let mut out = Vec::new();
            for split in compositions(k - 1, d as usize) {
                let parts: Vec<Vec<DTree>> = split.iter().map(|&s| rec(d, s, memo)).collect();
                let mut idx = vec![0usize; d as usize];
                'outer: loop {
                    let mut t = DTree::singleton(d);
                    for (i, choice) in idx.iter().enumerate() {
                        let at = VertexLabel::root().child(i as u8 + 1);
                        t.graft(&at, &parts[i][*choice]).unwrap();
                    }
                    out.push(t);
                    for i in (0..d as usize).rev() {
                        idx[i] += 1;
                        if idx[i] < parts[i].len() {
                            continue 'outer;
                        }
                        idx[i] = 0;
                    }
                    break;
                }
            }
            out
        };
        memo.insert(k, out.clone());
        out
    }
    rec(d, k, &mut BTreeMap::new())
}

/// A tree restricted to depth `≤ depth`, with the depth-`depth` vertices that
/// have at least one child marked alive.
#[derive(Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct WindowedTree {
    depth: usize,
    tree: DTree,
    alive: BTreeSet<VertexLabel>,
}

impl WindowedTree {
    pub fn empty(d: u32, depth: usize) -> Self {
        Self {
            depth,
            tree: DTree::empty(d),
            alive: BTreeSet::new(),
        }
    }

    /// The window `{o}` with the root flagged alive when `alive` is set.
    pub fn root_only(d: u32, depth: usize, alive: bool) -> Self {
        let mut w = Self {
            depth,
            tree: DTree::singleton(d),
            alive: BTreeSet::new(),
        };
        if alive && depth == 0 {
            w.alive.insert(VertexLabel::root());
        }
        w
    }

    /// Depth-0 window of a tree with `size` vertices.
    pub fn of_size_at_root(d: u32, size: usize) -> Self {
        match size {
            0 => Self::empty(d, 0),
            1 => Self::root_only(d, 0, false),
            _ => Self::root_only(d, 0, true),
        }
    }

    pub fn new(tree: DTree, depth: usize, alive: BTreeSet<VertexLabel>) -> Result<Self> {
        if let Some(h) = tree.height() {
            if h > depth {
                return Err(Error::Domain(format!(
                    "tree height {h} exceeds window depth {depth}"
                )));
            }
        }
        for v in &alive {
            if v.depth() != depth || !tree.contains_vertex(v) {
                return Err(Error::Domain(format!(
                    "alive vertex {v} is not on the boundary"
                )));
            }
        }
        Ok(Self { depth, tree, alive })
    }

    pub fn d(&self) -> u32 {
        self.tree.d()
    }

    pub fn depth(&self) -> usize {
        self.depth
    }

    pub fn tree(&self) -> &DTree {
        &self.tree
    }

    pub fn alive(&self) -> &BTreeSet<VertexLabel> {
        &self.alive
    }

    pub fn len(&self) -> usize {
        self.tree.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tree.is_empty()
    }

    pub fn is_alive(&self, v: &VertexLabel) -> bool {
        self.alive.contains(v)
    }

    /// Vertices and alive flags of `self` are included in those of `other`.
    pub fn contained_in(&self, other: &WindowedTree) -> bool {
        self.tree.is_subtree_of(&other.tree) && self.alive.is_subset(&other.alive)
    }

    /// Adds vertex `v` (parent must be present), optionally flagged alive.
    pub fn insert(&mut self, v: VertexLabel, alive: bool) -> Result<()> {
        if v.depth() > self.depth {
            return Err(Error::Domain(format!("{v} lies below the window")));
        }
        if alive {
            if v.depth() != self.depth {
                return Err(Error::Domain(format!("{v} is not on the boundary")));
            }
            self.alive.insert(v.clone());
        }
        self.tree.insert(v)
    }

    pub fn set_alive(&mut self, v: &VertexLabel) {
        debug_assert!(v.depth() == self.depth && self.tree.contains_vertex(v));
        self.alive.insert(v.clone());
    }

    /// Places the window `sub` at vertex `at`; `sub.depth + |at|` must equal
    /// the window depth.
    pub fn graft(&mut self, at: &VertexLabel, sub: &WindowedTree) -> Result<()> {
        if sub.depth + at.depth() != self.depth {
            return Err(Error::Invariant(format!(
                "grafting a depth-{} window at {at} into a depth-{} window",
                sub.depth, self.depth
            )));
        }
        self.tree.graft(at, &sub.tree)?;
        for v in &sub.alive {
            self.alive.insert(at.join(v));
        }
        Ok(())
    }

    /// Removes every vertex below and including `at`.
    pub fn remove_subtree(&mut self, at: &VertexLabel) {
        let doomed: Vec<VertexLabel> = self
            .tree
            .vertices()
            .filter(|v| v.strip_prefix(at).is_some())
            .cloned()
            .collect();
        for v in doomed.iter().rev() {
            self.tree.remove_leaf(v);
            self.alive.remove(v);
        }
    }

    /// The sub-window rooted at `u`, of depth `depth − |u|`.
    pub fn subwindow_at(&self, u: &VertexLabel) -> WindowedTree {
        let depth = self.depth.saturating_sub(u.depth());
        let tree = self.tree.subtree_at(u);
        let alive = self
            .alive
            .iter()
            .filter_map(|v| v.strip_prefix(u))
            .collect();
        WindowedTree { depth, tree, alive }
    }

    /// Restriction to a smaller depth; new boundary vertices are alive when
    /// they have a child in `self`.
    pub fn truncate(&self, depth: usize) -> WindowedTree {
        if depth >= self.depth {
            return self.clone();
        }
        self.tree.truncate(depth)
    }

    /// Tree encoding followed by one bit per depth-`depth` vertex (vertex
    /// order) flagging alive vertices, zero-padded.
    pub fn encode(&self) -> Vec<u8> {
        let mut out = self.tree.encode();
        let mut bits = BitWriter::default();
        for v in self.tree.vertices().filter(|v| v.depth() == self.depth) {
            bits.push(self.alive.contains(v));
        }
        out.extend(bits.finish());
        out
    }

    pub fn to_json(&self) -> WindowJson {
        let mut bits = BitWriter::default();
        for v in self.tree.vertices().filter(|v| v.depth() == self.depth) {
            bits.push(self.alive.contains(v));
        }
        WindowJson {
            depth: self.depth,
            tree: self.tree.to_hex(),
            alive: hex::encode(bits.finish()),
        }
    }

    pub fn from_json(d: u32, j: &WindowJson) -> Result<Self> {
        let tree = DTree::from_hex(d, &j.tree)?;
        let boundary: Vec<VertexLabel> = tree
            .vertices()
            .filter(|v| v.depth() == j.depth)
            .cloned()
            .collect();
        let bytes = hex::decode(&j.alive).map_err(|e| Error::Decode(e.to_string()))?;
        let mut reader = BitReader::new(&bytes);
        let mut alive = BTreeSet::new();
        for v in boundary {
            if reader
                .next()
                .ok_or_else(|| Error::Decode("alive flags truncated".into()))?
            {
                alive.insert(v);
            }
        }
        reader.finish()?;
        Self::new(tree, j.depth, alive)
    }

    pub fn to_dot(&self) -> String {
        self.to_dot_styled(None)
    }

    /// Two windows overlaid; vertices of `inner` are filled.
    pub fn to_dot_pair(inner: &WindowedTree, outer: &WindowedTree) -> String {
        let mut merged = outer.clone();
        for v in inner.tree.vertices() {
            if !merged.tree.contains_vertex(v) {
                merged.tree.add_unchecked(v.clone());
            }
        }
        merged.to_dot_styled(Some(inner))
    }

    fn to_dot_styled(&self, inner: Option<&WindowedTree>) -> String {
        let name = |v: &VertexLabel| format!("\"{v}\"");
        let mut s = String::from("digraph T {\n  node [shape=circle, fontsize=10];\n");
        for v in self.tree.vertices() {
            let mut attrs = Vec::new();
            if self.alive.contains(v) || inner.is_some_and(|w| w.alive.contains(v)) {
                attrs.push("shape=doublecircle".to_string());
            }
            if let Some(w) = inner {
                if w.tree.contains_vertex(v) {
                    attrs.push("style=filled, fillcolor=lightblue".to_string());
                } else {
                    attrs.push("color=gray".to_string());
                }
            }
            s.push_str(&format!("  {} [{}];\n", name(v), attrs.join(", ")));
        }
        for v in self.tree.vertices() {
            if let Some(p) = v.parent() {
                s.push_str(&format!("  {} -> {};\n", name(&p), name(v)));
            }
        }
        s.push_str("}\n");
        s
    }
}

impl fmt::Debug for WindowedTree {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "D={} {:?} alive={:?}", self.depth, self.tree, self.alive)
    }
}

/// JSON form of a window: lowercase hex tree encoding and hex alive bits.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct WindowJson {
    pub depth: usize,
    pub tree: String,
    pub alive: String,
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn l(path: &[u8]) -> VertexLabel {
        VertexLabel::from_path(path)
    }

    fn t(d: u32, vs: &[&[u8]]) -> DTree {
        DTree::from_vertices(d, vs.iter().map(|p| l(p))).unwrap()
    }

    #[test]
    fn order_matches_breadth_first_chain() {
        let chain = [l(&[]), l(&[1]), l(&[2]), l(&[1, 1]), l(&[1, 2]), l(&[2, 1])];
        for w in chain.windows(2) {
            assert_eq!(vertex_order(&w[0], &w[1]), Ordering::Less);
        }
        assert!(l(&[3]) < l(&[1, 1]));
    }

    #[test]
    fn label_display_and_parse() {
        assert_eq!(l(&[]).to_string(), "o");
        assert_eq!(l(&[1, 2]).to_string(), "(1,2)");
        assert_eq!(VertexLabel::parse("(1,2)").unwrap(), l(&[1, 2]));
        assert_eq!(VertexLabel::parse("o").unwrap(), l(&[]));
        assert_eq!(l(&[]).join(&l(&[2])), l(&[2]));
        assert_eq!(l(&[2]).join(&l(&[])), l(&[2]));
    }

    #[test]
    fn rejects_missing_parent() {
        assert!(matches!(
            DTree::from_vertices(2, [l(&[]), l(&[1, 1])]),
            Err(Error::NotPrefixClosed(_))
        ));
        assert!(DTree::from_vertices(2, [l(&[3])]).is_err());
    }

    #[test]
    fn subtree_examples() {
        let tr = t(2, &[&[], &[1], &[1, 2]]);
        assert_eq!(tr.subtree_at(&l(&[1])), t(2, &[&[], &[2]]));
        assert!(t(2, &[&[]]).subtree_at(&l(&[2])).is_empty());
        assert_eq!(tr.subtree_at(&l(&[])), tr);
    }

    #[test]
    fn containment_examples() {
        assert!(t(2, &[&[]]).is_subtree_of(&t(2, &[&[], &[1]])));
        assert!(!t(2, &[&[], &[2]]).is_subtree_of(&t(2, &[&[], &[1]])));
        assert!(DTree::empty(2).is_subtree_of(&t(2, &[&[]])));
    }

    #[test]
    fn truncate_examples() {
        let w = t(2, &[&[], &[1], &[1, 1]]).truncate(1);
        assert_eq!(w.tree(), &t(2, &[&[], &[1]]));
        assert_eq!(w.alive().iter().cloned().collect::<Vec<_>>(), vec![l(&[1])]);
        let w = t(2, &[&[]]).truncate(3);
        assert!(w.alive().is_empty() && w.len() == 1);
        assert!(DTree::empty(2).truncate(2).is_empty());
    }

    #[test]
    fn encoding_examples() {
        assert_eq!(t(2, &[&[]]).encode(), vec![0b0000_0000]);
        assert_eq!(t(2, &[&[], &[1], &[2]]).encode(), vec![0b1100_0000]);
        assert_eq!(t(2, &[&[], &[1]]).encode(), vec![0b1000_0000]);
        assert!(DTree::empty(3).encode().is_empty());
        assert!(DTree::decode(2, &[0b1100_0000, 0]).is_err());
        assert!(DTree::decode(2, &[0b1100_0001]).is_err());
        assert!(DTree::decode(2, &[0xff]).is_err());
    }

    #[test]
    fn enumeration_counts() {
        for k in 0..=8 {
            let all = enumerate_all(2, k);
            let distinct: BTreeSet<Vec<u8>> = all.iter().map(DTree::encode).collect();
            assert_eq!(distinct.len(), all.len());
            assert_eq!(crate::combinatorics::count_trees(2, k), all.len().into());
            assert!(all.iter().all(|t| t.len() == k));
        }
    }

    #[test]
    fn window_json_round_trip() {
        let w = t(3, &[&[], &[1], &[3], &[3, 2]]).truncate(1);
        let back = WindowedTree::from_json(3, &w.to_json()).unwrap();
        assert_eq!(back, w);
    }

    #[test]
    fn window_graft_and_remove() {
        let mut w = WindowedTree::root_only(2, 2, false);
        w.insert(l(&[2]), false).unwrap();
        let sub = t(2, &[&[], &[1]]).truncate(1);
        w.graft(&l(&[1]), &sub).unwrap();
        assert!(w.tree().contains_vertex(&l(&[1, 1])));
        assert_eq!(w.subwindow_at(&l(&[1])), sub);
        w.remove_subtree(&l(&[1]));
        assert_eq!(w.len(), 2);
        assert!(!w.tree().has_child(&l(&[]), 1));
    }

    #[test]
    fn dot_has_one_node_per_vertex() {
        let dot = t(2, &[&[], &[1]]).to_dot();
        assert_eq!(dot.matches("[").count() - 1, 2);
        assert!(dot.contains("\"o\" -> \"(1)\""));
    }

    fn arb_tree(d: u32) -> impl Strategy<Value = DTree> {
        proptest::collection::vec((0usize..64, 1u8..=d as u8), 0..40).prop_map(move |steps| {
            let mut tr = DTree::empty(d);
            for (pick, child) in steps {
                if tr.is_empty() {
                    tr.insert(VertexLabel::root()).unwrap();
                    continue;
                }
                let vs: Vec<VertexLabel> = tr.vertices().cloned().collect();
                let v = vs[pick % vs.len()].child(child);
                if !tr.contains_vertex(&v) {
                    tr.insert(v).unwrap();
                }
            }
            tr
        })
    }

    proptest! {
        #[test]
        fn encode_round_trip(tr in prop_oneof![arb_tree(2), arb_tree(3)]) {
            let back = DTree::decode(tr.d(), &tr.encode()).unwrap();
            prop_assert_eq!(back, tr);
        }

        #[test]
        fn subtree_nonempty_iff_member(tr in arb_tree(2), path in proptest::collection::vec(1u8..=2, 0..4)) {
            let u = VertexLabel::from_path(&path);
            prop_assert_eq!(tr.subtree_at(&u).is_empty(), !tr.contains_vertex(&u));
        }

        #[test]
        fn window_key_is_injective_on_truncations(tr in arb_tree(2), depth in 0usize..4) {
            let w = tr.truncate(depth);
            let back = WindowedTree::from_json(2, &w.to_json()).unwrap();
            prop_assert_eq!(back, w);
        }
    }
}
