//! Dinic max-flow / min-cut over non-negative real capacities.

use std::collections::VecDeque;

const EPS: f64 = 1e-12;

#[derive(Clone, Debug)]
struct Edge {
    to: usize,
    cap: f64,
}

#[derive(Clone, Debug)]
pub struct FlowGraph {
    adj: Vec<Vec<usize>>,
    edges: Vec<Edge>,
    level: Vec<i32>,
    iter: Vec<usize>,
}

impl FlowGraph {
    pub fn new(n: usize) -> Self {
        Self {
            adj: vec![Vec::new(); n],
            edges: Vec::new(),
            level: vec![0; n],
            iter: vec![0; n],
        }
    }

    pub fn node_count(&self) -> usize {
        self.adj.len()
    }

    /// Directed edge `u → v` with capacity `cap` and reverse capacity `rev_cap`.
    pub fn add_edge(&mut self, u: usize, v: usize, cap: f64, rev_cap: f64) {
        debug_assert!(cap >= 0.0 && rev_cap >= 0.0);
        self.adj[u].push(self.edges.len());
        self.edges.push(Edge { to: v, cap });
        self.adj[v].push(self.edges.len());
        self.edges.push(Edge { to: u, cap: rev_cap });
    }

    fn bfs(&mut self, s: usize) {
        self.level.iter_mut().for_each(|l| *l = -1);
        self.level[s] = 0;
        let mut q = VecDeque::from([s]);
        while let Some(u) = q.pop_front() {
            for &e in &self.adj[u] {
                let Edge { to, cap } = self.edges[e];
                if cap > EPS && self.level[to] < 0 {
                    self.level[to] = self.level[u] + 1;
                    q.push_back(to);
                }
            }
        }
    }

    fn dfs(&mut self, u: usize, t: usize, f: f64) -> f64 {
        if u == t {
            return f;
        }
        while self.iter[u] < self.adj[u].len() {
            let e = self.adj[u][self.iter[u]];
            let Edge { to, cap } = self.edges[e];
            if cap > EPS && self.level[u] < self.level[to] {
                let d = self.dfs(to, t, f.min(cap));
                if d > EPS {
                    self.edges[e].cap -= d;
                    self.edges[e ^ 1].cap += d;
                    return d;
                }
            }
            self.iter[u] += 1;
        }
        0.0
    }

    pub fn max_flow(&mut self, s: usize, t: usize) -> f64 {
        let mut flow = 0.0;
        loop {
            self.bfs(s);
            if self.level[t] < 0 {
                return flow;
            }
            self.iter.iter_mut().for_each(|i| *i = 0);
            loop {
                let f = self.dfs(s, t, f64::INFINITY);
                if f <= EPS {
                    break;
                }
                flow += f;
            }
        }
    }

    /// After [`max_flow`](Self::max_flow): nodes reachable from `s` in the residual graph.
    pub fn source_side(&self, s: usize) -> Vec<bool> {
        let mut seen = vec![false; self.adj.len()];
        seen[s] = true;
        let mut q = VecDeque::from([s]);
        while let Some(u) = q.pop_front() {
            for &e in &self.adj[u] {
                let Edge { to, cap } = self.edges[e];
                if cap > EPS && !seen[to] {
                    seen[to] = true;
                    q.push_back(to);
                }
            }
        }
        seen
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn textbook_network() {
        // CLRS 26.1
        let mut g = FlowGraph::new(6);
        for (u, v, c) in [
            (0, 1, 16.0),
            (0, 2, 13.0),
            (1, 3, 12.0),
            (2, 1, 4.0),
            (2, 4, 14.0),
            (3, 2, 9.0),
            (3, 5, 20.0),
            (4, 3, 7.0),
            (4, 5, 4.0),
        ] {
            g.add_edge(u, v, c, 0.0);
        }
        assert_eq!(g.max_flow(0, 5), 23.0);
        let side = g.source_side(0);
        assert!(side[0] && !side[5]);
    }

    #[test]
    fn min_cut_equals_max_flow_on_random_graphs() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        for _ in 0..30 {
            let n = 6;
            let mut caps = vec![vec![0.0; n]; n];
            let mut g = FlowGraph::new(n);
            for u in 0..n {
                for v in 0..n {
                    if u != v && rng.gen_bool(0.5) {
                        let c = rng.gen_range(0.0..5.0);
                        caps[u][v] += c;
                        g.add_edge(u, v, c, 0.0);
                    }
                }
            }
            let flow = g.max_flow(0, n - 1);
            // brute-force min cut over all s-t partitions
            let mut best = f64::INFINITY;
            for mask in 0..(1u32 << n) {
                if mask & 1 == 0 || mask & (1 << (n - 1)) != 0 {
                    continue;
                }
                let mut cut = 0.0;
                for u in 0..n {
                    for v in 0..n {
                        if mask & (1 << u) != 0 && mask & (1 << v) == 0 {
                            cut += caps[u][v];
                        }
                    }
                }
                best = f64::min(best, cut);
            }
            assert!((flow - best).abs() < 1e-9, "{flow} vs {best}");
        }
    }
}
