//! Dinic max-flow over exact integer capacities.

use std::collections::VecDeque;
use std::ops::{AddAssign, SubAssign};

use num_bigint::BigUint;
use num_traits::Zero;

pub trait Capacity:
    Clone + Ord + Zero + for<'a> AddAssign<&'a Self> + for<'a> SubAssign<&'a Self>
{
}

impl Capacity for u128 {}
impl Capacity for BigUint {}

#[derive(Clone, Debug)]
struct Edge<C> {
    to: usize,
    cap: C,
    original: C,
}

#[derive(Clone, Debug)]
pub struct FlowNetwork<C> {
    adj: Vec<Vec<usize>>,
    edges: Vec<Edge<C>>,
}

impl<C: Capacity> FlowNetwork<C> {
    pub fn new(nodes: usize) -> Self {
        Self {
            adj: vec![Vec::new(); nodes],
            edges: Vec::new(),
        }
    }

    pub fn node_count(&self) -> usize {
        self.adj.len()
    }

    /// Adds a directed edge and returns its id.
    pub fn add_edge(&mut self, from: usize, to: usize, cap: C) -> usize {
        let id = self.edges.len();
        self.edges.push(Edge {
            to,
            cap: cap.clone(),
            original: cap,
        });
        self.edges.push(Edge {
            to: from,
            cap: C::zero(),
            original: C::zero(),
        });
        self.adj[from].push(id);
        self.adj[to].push(id + 1);
        id
    }

    /// Flow currently routed through edge `id`.
    pub fn flow(&self, id: usize) -> C {
        let mut f = self.edges[id].original.clone();
        f -= &self.edges[id].cap;
        f
    }

    fn levels(&self, s: usize) -> Vec<usize> {
        let mut level = vec![usize::MAX; self.adj.len()];
        level[s] = 0;
        let mut queue = VecDeque::from([s]);
        while let Some(u) = queue.pop_front() {
            for &e in &self.adj[u] {
                let v = self.edges[e].to;
                if level[v] == usize::MAX && !self.edges[e].cap.is_zero() {
                    level[v] = level[u] + 1;
                    queue.push_back(v);
                }
            }
        }
        level
    }

    /// Maximum `s`–`t` flow; edge flows remain queryable afterwards.
    pub fn max_flow(&mut self, s: usize, t: usize) -> C {
        let mut total = C::zero();
        loop {
            let level = self.levels(s);
            if level[t] == usize::MAX {
                return total;
            }
            let mut next = vec![0usize; self.adj.len()];
            while let Some(f) = self.augment(s, t, &level, &mut next) {
                total += &f;
            }
        }
    }

    /// Finds one augmenting path in the level graph and pushes its bottleneck.
    fn augment(&mut self, s: usize, t: usize, level: &[usize], next: &mut [usize]) -> Option<C> {
        let mut path: Vec<usize> = Vec::new();
        let mut u = s;
        loop {
            if u == t {
                let mut bottleneck = self.edges[path[0]].cap.clone();
                for &e in &path[1..] {
                    if self.edges[e].cap < bottleneck {
                        bottleneck = self.edges[e].cap.clone();
                    }
                }
                for &e in &path {
                    self.edges[e].cap -= &bottleneck;
                    self.edges[e ^ 1].cap += &bottleneck;
                }
                return Some(bottleneck);
            }
            let mut advanced = false;
            while next[u] < self.adj[u].len() {
                let e = self.adj[u][next[u]];
                let v = self.edges[e].to;
                if !self.edges[e].cap.is_zero()
                    && level[v] == level[u] + 1
                    && level[v] != usize::MAX
                {
                    path.push(e);
                    u = v;
                    advanced = true;
                    break;
                }
                next[u] += 1;
            }
            if !advanced {
                if u == s {
                    return None;
                }
                // Dead end: retreat and skip the edge that led here.
                let e = path.pop().unwrap();
                u = self.edges[e ^ 1].to;
                next[u] += 1;
            }
        }
    }

    /// Nodes reachable from `s` through edges with residual capacity.
    pub fn residual_reachable(&self, s: usize) -> Vec<bool> {
        self.levels(s)
            .into_iter()
            .map(|l| l != usize::MAX)
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_network() {
        // Classic example with max flow 23.
        let mut g = FlowNetwork::<u128>::new(6);
        for (a, b, c) in [
            (0, 1, 16),
            (0, 2, 13),
            (1, 2, 10),
            (2, 1, 4),
            (1, 3, 12),
            (3, 2, 9),
            (2, 4, 14),
            (4, 3, 7),
            (3, 5, 20),
            (4, 5, 4),
        ] {
            g.add_edge(a, b, c);
        }
        assert_eq!(g.max_flow(0, 5), 23);
        let reach = g.residual_reachable(0);
        assert!(reach[0] && !reach[5]);
    }

    #[test]
    fn big_capacities() {
        let big = BigUint::from(10u32).pow(40);
        let mut g = FlowNetwork::<BigUint>::new(4);
        g.add_edge(0, 1, big.clone());
        g.add_edge(0, 2, big.clone());
        let e = g.add_edge(1, 3, big.clone());
        g.add_edge(2, 3, BigUint::from(5u32));
        assert_eq!(g.max_flow(0, 3), &big + 5u32);
        assert_eq!(g.flow(e), big);
    }

    #[test]
    fn bipartite_matches_brute_force() {
        // 3x3 transport with a forced routing.
        let mut g = FlowNetwork::<u128>::new(8);
        let (s, t) = (6, 7);
        for (i, sup) in [3u128, 2, 1].into_iter().enumerate() {
            g.add_edge(s, i, sup);
        }
        for (j, dem) in [1u128, 2, 3].into_iter().enumerate() {
            g.add_edge(3 + j, t, dem);
        }
        for (i, j) in [(0, 2), (1, 1), (1, 2), (2, 0)] {
            g.add_edge(i, 3 + j, 10);
        }
        assert_eq!(g.max_flow(s, t), 6);
    }
}
