//! Sparse weighted graph with single-source shortest paths.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use crate::num::Scalar;

#[derive(Debug, Clone)]
pub struct Graph<T> {
    adj: Vec<Vec<(usize, T)>>,
}

impl<T: Scalar> Graph<T> {
    pub fn with_nodes(n: usize) -> Self {
        Graph {
            adj: vec![Vec::new(); n],
        }
    }

    pub fn node_count(&self) -> usize {
        self.adj.len()
    }

    pub fn add_edge(&mut self, from: usize, to: usize, weight: T) {
        debug_assert!(weight > T::zero(), "edge weights must be positive");
        self.adj[from].push((to, weight));
    }

    pub fn add_undirected(&mut self, a: usize, b: usize, weight: T) {
        self.add_edge(a, b, weight);
        self.add_edge(b, a, weight);
    }

    /// Dijkstra from `source`; returns (distance, predecessor) per node,
    /// with unreachable nodes at infinity.
    pub fn shortest_paths(&self, source: usize) -> (Vec<T>, Vec<Option<usize>>) {
        let n = self.adj.len();
        let inf = T::infinity();
        let mut dist = vec![inf; n];
        let mut pred: Vec<Option<usize>> = vec![None; n];
        let mut heap = BinaryHeap::new();

        dist[source] = T::zero();
        heap.push(HeapEntry {
            dist: T::zero(),
            node: source,
        });

        while let Some(HeapEntry { dist: d, node }) = heap.pop() {
            if d > dist[node] {
                continue;
            }
            for &(next, w) in &self.adj[node] {
                let cand = d + w;
                if cand < dist[next] {
                    dist[next] = cand;
                    pred[next] = Some(node);
                    heap.push(HeapEntry {
                        dist: cand,
                        node: next,
                    });
                }
            }
        }
        (dist, pred)
    }
}

struct HeapEntry<T> {
    dist: T,
    node: usize,
}

impl<T: Scalar> PartialEq for HeapEntry<T> {
    fn eq(&self, other: &Self) -> bool {
        self.dist == other.dist && self.node == other.node
    }
}
impl<T: Scalar> Eq for HeapEntry<T> {}

impl<T: Scalar> Ord for HeapEntry<T> {
    fn cmp(&self, other: &Self) -> Ordering {
        // Min-heap on distance; node index breaks ties deterministically.
        other
            .dist
            .partial_cmp(&self.dist)
            .expect("finite distances")
            .then_with(|| other.node.cmp(&self.node))
    }
}
impl<T: Scalar> PartialOrd for HeapEntry<T> {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
