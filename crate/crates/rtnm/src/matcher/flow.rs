//! Successive-shortest-path min-cost flow with Dijkstra and node potentials.
//!
//! Costs must make every reduced cost nonnegative under the caller-supplied
//! initial potentials (zero potentials suffice when all costs are
//! nonnegative). Capacities and costs are integers so solutions are exact.

use std::cmp::Reverse;
use std::collections::BinaryHeap;

#[derive(Debug, Clone)]
struct Edge {
    to: usize,
    cap: i64,
    cost: i64,
}

#[derive(Debug, Clone)]
pub struct MinCostFlow {
    adj: Vec<Vec<usize>>,
    edges: Vec<Edge>,
}

impl MinCostFlow {
    pub fn new(n: usize) -> Self {
        MinCostFlow {
            adj: vec![Vec::new(); n],
            edges: Vec::new(),
        }
    }

    /// Adds a directed edge and returns its id; the reverse edge is `id ^ 1`.
    pub fn add_edge(&mut self, from: usize, to: usize, cap: i64, cost: i64) -> usize {
        let id = self.edges.len();
        self.adj[from].push(id);
        self.edges.push(Edge { to, cap, cost });
        self.adj[to].push(id + 1);
        self.edges.push(Edge {
            to: from,
            cap: 0,
            cost: -cost,
        });
        id
    }

    /// Flow currently on the forward edge `id`.
    pub fn flow_on(&self, id: usize) -> i64 {
        self.edges[id ^ 1].cap
    }

    /// Sends up to `limit` units from `source` to `sink`, minimizing cost.
    /// `potentials` must certify nonnegative reduced costs for the initial
    /// residual graph. Returns `(flow, cost)`.
    pub fn run(
        &mut self,
        source: usize,
        sink: usize,
        limit: i64,
        potentials: Vec<i64>,
    ) -> (i64, i64) {
        self.run_inner(source, sink, limit, potentials, false)
    }

    /// Like `run`, but stops as soon as the cheapest augmenting path has
    /// nonnegative true cost. Used for maximum-gain matchings where pushing
    /// further flow would not improve the objective.
    pub fn run_negative_paths(
        &mut self,
        source: usize,
        sink: usize,
        limit: i64,
        potentials: Vec<i64>,
    ) -> (i64, i64) {
        self.run_inner(source, sink, limit, potentials, true)
    }

    fn run_inner(
        &mut self,
        source: usize,
        sink: usize,
        limit: i64,
        mut potentials: Vec<i64>,
        only_negative: bool,
    ) -> (i64, i64) {
        let n = self.adj.len();
        assert_eq!(potentials.len(), n);
        let mut total_flow = 0i64;
        let mut total_cost = 0i64;
        let mut dist = vec![i64::MAX; n];
        let mut prev_edge = vec![usize::MAX; n];

        while total_flow < limit {
            dist.iter_mut().for_each(|d| *d = i64::MAX);
            dist[source] = 0;
            let mut heap: BinaryHeap<Reverse<(i64, usize)>> = BinaryHeap::new();
            heap.push(Reverse((0, source)));
            while let Some(Reverse((d, u))) = heap.pop() {
                if d > dist[u] {
                    continue;
                }
                for &eid in &self.adj[u] {
                    let e = &self.edges[eid];
                    if e.cap <= 0 {
                        continue;
                    }
                    let rcost = e.cost + potentials[u] - potentials[e.to];
                    debug_assert!(rcost >= 0, "negative reduced cost");
                    let nd = d + rcost;
                    if nd < dist[e.to] {
                        dist[e.to] = nd;
                        prev_edge[e.to] = eid;
                        heap.push(Reverse((nd, e.to)));
                    }
                }
            }
            if dist[sink] == i64::MAX {
                break;
            }
            if only_negative {
                // True cost of the cheapest path under the current potentials.
                let true_cost = dist[sink] + potentials[sink] - potentials[source];
                if true_cost >= 0 {
                    break;
                }
            }
            for (u, d) in dist.iter().enumerate() {
                if *d < i64::MAX {
                    potentials[u] += *d;
                }
            }
            // Bottleneck along the path.
            let mut bottleneck = limit - total_flow;
            let mut v = sink;
            while v != source {
                let eid = prev_edge[v];
                bottleneck = bottleneck.min(self.edges[eid].cap);
                v = self.edges[eid ^ 1].to;
            }
            let mut v = sink;
            while v != source {
                let eid = prev_edge[v];
                self.edges[eid].cap -= bottleneck;
                self.edges[eid ^ 1].cap += bottleneck;
                total_cost += bottleneck * self.edges[eid].cost;
                v = self.edges[eid ^ 1].to;
            }
            total_flow += bottleneck;
        }
        (total_flow, total_cost)
    }
}
