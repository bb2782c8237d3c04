//! Edge cluster graph, node resources and transmission latency.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cellspace::ResourceCell;
use crate::domain::{NodeId, ServiceClass};

pub const DEFAULT_CLOUD_DELAY_MS: f64 = 10.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EdgeNode {
    pub node_id: NodeId,
    /// Compute capacity W, vCPU.
    pub cpu_w: f64,
    /// Memory R, MB.
    pub mem_r: f64,
    /// Bandwidth B, Mbps.
    pub bandwidth_b: f64,
}

/// The cloud is modelled as unlimited in both resources.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CloudCenter {
    pub unlimited_cpu: bool,
    pub unlimited_mem: bool,
}

impl Default for CloudCenter {
    fn default() -> Self {
        Self {
            unlimited_cpu: true,
            unlimited_mem: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TopologyError {
    #[error("unknown node {0}")]
    UnknownNode(NodeId),
    #[error("nodes {0} and {1} are not adjacent")]
    NotAdjacent(NodeId, NodeId),
    #[error("duplicate node id {0}")]
    DuplicateNode(NodeId),
    #[error("node {0} has a non-positive resource")]
    NonPositiveResource(NodeId),
    #[error("self-loop on node {0}")]
    SelfLoop(NodeId),
    #[error("graph is not connected")]
    Disconnected,
    #[error("node {0} has degree {1}, above the cap {2}")]
    DegreeCap(NodeId, usize, usize),
    #[error("cloud delay must be finite and >= 0")]
    BadCloudDelay,
    #[error("graph has no nodes")]
    Empty,
    #[error("invalid generator parameters: {0}")]
    BadParams(&'static str),
}

/// On-disk topology description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TopologySpec {
    pub nodes: Vec<EdgeNode>,
    pub edges: Vec<(NodeId, NodeId)>,
    #[serde(default = "default_cloud_delay")]
    pub cloud_delay: f64,
    pub degree_cap: usize,
}

fn default_cloud_delay() -> f64 {
    DEFAULT_CLOUD_DELAY_MS
}

/// Parameters of the random cluster generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RandomTopology {
    pub node_count: usize,
    pub degree_cap: usize,
    /// Inclusive range of W_i, vCPU.
    pub cpu_range: (f64, f64),
    /// Inclusive range of R_i, MB.
    pub mem_range: (f64, f64),
    /// B_i is drawn uniformly from this list, Mbps.
    pub bandwidth_choices: Vec<f64>,
    /// Probability of adding each extra non-tree edge that respects the cap.
    pub extra_edge_prob: f64,
    pub cloud_delay: f64,
    pub seed: u64,
}

impl Default for RandomTopology {
    fn default() -> Self {
        Self {
            node_count: 10,
            degree_cap: 4,
            cpu_range: (2.0, 4.0),
            // 100-200 GB expressed in MB.
            mem_range: (100.0 * 1024.0, 200.0 * 1024.0),
            bandwidth_choices: vec![125.0, 12.5],
            extra_edge_prob: 0.3,
            cloud_delay: DEFAULT_CLOUD_DELAY_MS,
            seed: 0,
        }
    }
}

impl RandomTopology {
    pub fn generate(&self) -> Result<ClusterGraph, TopologyError> {
        if self.node_count == 0 {
            return Err(TopologyError::Empty);
        }
        if self.node_count > 2 && self.degree_cap < 2 {
            return Err(TopologyError::BadParams(
                "degree cap below 2 cannot connect more than two nodes",
            ));
        }
        if self.bandwidth_choices.is_empty() {
            return Err(TopologyError::BadParams("no bandwidth choices"));
        }
        if self.cpu_range.0 > self.cpu_range.1 || self.mem_range.0 > self.mem_range.1 {
            return Err(TopologyError::BadParams("empty resource range"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let n = self.node_count;
        let nodes: Vec<EdgeNode> = (0..n)
            .map(|i| EdgeNode {
                node_id: i as NodeId,
                cpu_w: sample_range(&mut rng, self.cpu_range),
                mem_r: sample_range(&mut rng, self.mem_range),
                bandwidth_b: *self.bandwidth_choices.choose(&mut rng).unwrap(),
            })
            .collect();

        let mut degree = vec![0usize; n];
        let mut edges = BTreeSet::new();
        // Random spanning tree: attach each node to an earlier one with spare degree.
        for v in 1..n {
            let open: Vec<usize> = (0..v).filter(|&u| degree[u] < self.degree_cap).collect();
            let u = *open.choose(&mut rng).ok_or(TopologyError::BadParams(
                "degree cap too small to build a spanning tree",
            ))?;
            edges.insert((u, v));
            degree[u] += 1;
            degree[v] += 1;
        }
        for u in 0..n {
            for v in (u + 1)..n {
                if edges.contains(&(u, v)) {
                    continue;
                }
                let roll: f64 = rng.gen();
                if roll < self.extra_edge_prob
                    && degree[u] < self.degree_cap
                    && degree[v] < self.degree_cap
                {
                    edges.insert((u, v));
                    degree[u] += 1;
                    degree[v] += 1;
                }
            }
        }
        ClusterGraph::new(TopologySpec {
            nodes,
            edges: edges
                .into_iter()
                .map(|(u, v)| (u as NodeId, v as NodeId))
                .collect(),
            cloud_delay: self.cloud_delay,
            degree_cap: self.degree_cap,
        })
    }
}

fn sample_range(rng: &mut impl Rng, (lo, hi): (f64, f64)) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.gen_range(lo..=hi)
    }
}

/// Connected, degree-capped edge cluster with precomputed shortest paths.
#[derive(Debug, Clone)]
pub struct ClusterGraph {
    nodes: Vec<EdgeNode>,
    index: BTreeMap<NodeId, usize>,
    adjacency: Vec<BTreeSet<usize>>,
    cloud_delay: f64,
    degree_cap: usize,
    /// `paths[a][b]` is the chosen shortest node sequence from a to b (indices).
    paths: Vec<Vec<Vec<usize>>>,
    pub cloud: CloudCenter,
}

impl ClusterGraph {
    pub fn new(spec: TopologySpec) -> Result<Self, TopologyError> {
        let TopologySpec {
            mut nodes,
            edges,
            cloud_delay,
            degree_cap,
        } = spec;
        if nodes.is_empty() {
            return Err(TopologyError::Empty);
        }
        if !(cloud_delay.is_finite() && cloud_delay >= 0.0) {
            return Err(TopologyError::BadCloudDelay);
        }
        nodes.sort_by_key(|n| n.node_id);
        let mut index = BTreeMap::new();
        for (k, n) in nodes.iter().enumerate() {
            if index.insert(n.node_id, k).is_some() {
                return Err(TopologyError::DuplicateNode(n.node_id));
            }
            let ok = [n.cpu_w, n.mem_r, n.bandwidth_b]
                .iter()
                .all(|v| v.is_finite() && *v > 0.0);
            if !ok {
                return Err(TopologyError::NonPositiveResource(n.node_id));
            }
        }
        let mut adjacency = vec![BTreeSet::new(); nodes.len()];
        for (a, b) in edges {
            if a == b {
                return Err(TopologyError::SelfLoop(a));
            }
            let ia = *index.get(&a).ok_or(TopologyError::UnknownNode(a))?;
            let ib = *index.get(&b).ok_or(TopologyError::UnknownNode(b))?;
            adjacency[ia].insert(ib);
            adjacency[ib].insert(ia);
        }
        for (k, adj) in adjacency.iter().enumerate() {
            if adj.len() > degree_cap {
                return Err(TopologyError::DegreeCap(
                    nodes[k].node_id,
                    adj.len(),
                    degree_cap,
                ));
            }
        }
        // Connectivity by BFS from the first node.
        let mut seen = vec![false; nodes.len()];
        let mut queue = VecDeque::from([0usize]);
        seen[0] = true;
        while let Some(u) = queue.pop_front() {
            for &v in &adjacency[u] {
                if !seen[v] {
                    seen[v] = true;
                    queue.push_back(v);
                }
            }
        }
        if seen.iter().any(|s| !s) {
            return Err(TopologyError::Disconnected);
        }

        let mut graph = Self {
            nodes,
            index,
            adjacency,
            cloud_delay,
            degree_cap,
            paths: Vec::new(),
            cloud: CloudCenter::default(),
        };
        graph.paths = (0..graph.nodes.len())
            .map(|s| graph.shortest_paths_from(s))
            .collect();
        Ok(graph)
    }

    pub fn to_spec(&self) -> TopologySpec {
        let mut edges = Vec::new();
        for (a, adj) in self.adjacency.iter().enumerate() {
            for &b in adj.range(a + 1..) {
                edges.push((self.nodes[a].node_id, self.nodes[b].node_id));
            }
        }
        TopologySpec {
            nodes: self.nodes.clone(),
            edges,
            cloud_delay: self.cloud_delay,
            degree_cap: self.degree_cap,
        }
    }

    pub fn nodes(&self) -> &[EdgeNode] {
        &self.nodes
    }

    pub fn node_ids(&self) -> impl Iterator<Item = NodeId> + '_ {
        self.nodes.iter().map(|n| n.node_id)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn node(&self, id: NodeId) -> Result<&EdgeNode, TopologyError> {
        self.idx(id).map(|k| &self.nodes[k])
    }

    pub fn cloud_delay(&self) -> f64 {
        self.cloud_delay
    }

    pub fn degree_cap(&self) -> usize {
        self.degree_cap
    }

    pub fn contains(&self, id: NodeId) -> bool {
        self.index.contains_key(&id)
    }

    fn idx(&self, id: NodeId) -> Result<usize, TopologyError> {
        self.index
            .get(&id)
            .copied()
            .ok_or(TopologyError::UnknownNode(id))
    }

    pub fn adjacent(&self, i: NodeId, j: NodeId) -> Result<bool, TopologyError> {
        let (a, b) = (self.idx(i)?, self.idx(j)?);
        Ok(self.adjacency[a].contains(&b))
    }

    /// 𝓝_i: node `i` together with its direct neighbours, ascending by id.
    pub fn neighborhood(&self, i: NodeId) -> Result<BTreeSet<NodeId>, TopologyError> {
        let k = self.idx(i)?;
        let mut out: BTreeSet<NodeId> = self.adjacency[k]
            .iter()
            .map(|&v| self.nodes[v].node_id)
            .collect();
        out.insert(i);
        Ok(out)
    }

    /// Transmission time of a packet of `packet_h` megabits over the link
    /// `i`-`j`, at the slower endpoint's bandwidth.
    pub fn link_latency(&self, i: NodeId, j: NodeId, packet_h: f64) -> Result<f64, TopologyError> {
        let (a, b) = (self.idx(i)?, self.idx(j)?);
        if a == b {
            return Ok(0.0);
        }
        if !self.adjacency[a].contains(&b) {
            return Err(TopologyError::NotAdjacent(i, j));
        }
        Ok(self.link_latency_idx(a, b, packet_h))
    }

    fn link_latency_idx(&self, a: usize, b: usize, packet_h: f64) -> f64 {
        let bw = self.nodes[a].bandwidth_b.min(self.nodes[b].bandwidth_b);
        packet_h / bw * 1000.0
    }

    /// The deterministic shortest path from `i` to `j`, as node ids.
    pub fn shortest_path(&self, i: NodeId, j: NodeId) -> Result<Vec<NodeId>, TopologyError> {
        let (a, b) = (self.idx(i)?, self.idx(j)?);
        Ok(self.paths[a][b]
            .iter()
            .map(|&k| self.nodes[k].node_id)
            .collect())
    }

    /// Sum of link latencies along the shortest path from `i` to `j`.
    pub fn path_latency(&self, i: NodeId, j: NodeId, packet_h: f64) -> Result<f64, TopologyError> {
        let (a, b) = (self.idx(i)?, self.idx(j)?);
        let path = &self.paths[a][b];
        Ok(path
            .windows(2)
            .map(|w| self.link_latency_idx(w[0], w[1], packet_h))
            .sum())
    }

    /// t_{i,m}: latency from node `i` to the cell's anchor, plus the cloud
    /// delay when any share of the cell lives in the cloud.
    pub fn cell_access_latency(
        &self,
        i: NodeId,
        cell: &ResourceCell,
        service: &ServiceClass,
    ) -> Result<f64, TopologyError> {
        let edge = self.path_latency(i, cell.anchor_node, service.packet_size_h)?;
        Ok(if cell.is_vertical() {
            edge + self.cloud_delay
        } else {
            edge
        })
    }

    /// Dijkstra over per-megabit link costs. Equal-cost paths are resolved
    /// toward the lexicographically smaller node-id sequence.
    fn shortest_paths_from(&self, source: usize) -> Vec<Vec<usize>> {
        let n = self.nodes.len();
        let mut dist = vec![f64::INFINITY; n];
        let mut path: Vec<Vec<usize>> = vec![Vec::new(); n];
        let mut done = vec![false; n];
        dist[source] = 0.0;
        path[source] = vec![source];
        for _ in 0..n {
            // Smallest tentative (distance, path) among unsettled nodes.
            let mut best: Option<usize> = None;
            for v in 0..n {
                if done[v] || !dist[v].is_finite() {
                    continue;
                }
                best = match best {
                    None => Some(v),
                    Some(b) if (dist[v], &path[v]) < (dist[b], &path[b]) => Some(v),
                    keep => keep,
                };
            }
            let Some(u) = best else { break };
            done[u] = true;
            for &v in &self.adjacency[u] {
                if done[v] {
                    continue;
                }
                let cand = dist[u] + self.link_latency_idx(u, v, 1.0);
                let mut cand_path = path[u].clone();
                cand_path.push(v);
                if cand < dist[v] || (cand == dist[v] && cand_path < path[v]) {
                    dist[v] = cand;
                    path[v] = cand_path;
                }
            }
        }
        path
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cellspace::ResourceCell;
    use crate::domain::tests::service;

    fn node(id: NodeId, bw: f64) -> EdgeNode {
        EdgeNode {
            node_id: id,
            cpu_w: 2.0,
            mem_r: 1000.0,
            bandwidth_b: bw,
        }
    }

    fn path3(bw: f64) -> ClusterGraph {
        ClusterGraph::new(TopologySpec {
            nodes: vec![node(1, bw), node(2, bw), node(3, bw)],
            edges: vec![(1, 2), (2, 3)],
            cloud_delay: 10.0,
            degree_cap: 2,
        })
        .unwrap()
    }

    fn cell_at(anchor: NodeId, cloud_cpu: f64) -> ResourceCell {
        let mut edge = BTreeMap::new();
        edge.insert(anchor, (2.0 - cloud_cpu, 500.0));
        ResourceCell {
            cell_id: 0,
            anchor_node: anchor,
            cpu_wpm: 2.0,
            mem_rpm: 500.0,
            edge_backing: edge,
            cloud_backing: (cloud_cpu, 0.0),
            created_frame: 0,
        }
    }

    #[test]
    fn neighborhood_includes_self() {
        let g = path3(125.0);
        assert_eq!(g.neighborhood(2).unwrap(), BTreeSet::from([1, 2, 3]));
        assert_eq!(g.neighborhood(1).unwrap(), BTreeSet::from([1, 2]));
        assert_eq!(g.neighborhood(9), Err(TopologyError::UnknownNode(9)));
    }

    #[test]
    fn random_graph_respects_degree_cap() {
        for seed in 0..20 {
            let g = RandomTopology {
                seed,
                ..Default::default()
            }
            .generate()
            .unwrap();
            for id in g.node_ids() {
                let nb = g.neighborhood(id).unwrap();
                assert!(nb.len() <= 5, "seed {seed} node {id}: {nb:?}");
                // Cross-check against the exported edge list.
                let deg = g
                    .to_spec()
                    .edges
                    .iter()
                    .filter(|(a, b)| *a == id || *b == id)
                    .count();
                assert_eq!(deg + 1, nb.len());
            }
        }
    }

    #[test]
    fn link_latency_cases() {
        let g = path3(125.0);
        approx::assert_relative_eq!(g.link_latency(1, 2, 12.5).unwrap(), 100.0, epsilon = 1e-9);
        assert_eq!(g.link_latency(2, 2, 12.5).unwrap(), 0.0);
        assert_eq!(g.link_latency(1, 3, 1.0), Err(TopologyError::NotAdjacent(1, 3)));

        let g = ClusterGraph::new(TopologySpec {
            nodes: vec![node(1, 125.0), node(2, 12.5)],
            edges: vec![(1, 2)],
            cloud_delay: 10.0,
            degree_cap: 1,
        })
        .unwrap();
        approx::assert_relative_eq!(g.link_latency(1, 2, 12.5).unwrap(), 1000.0, epsilon = 1e-9);
    }

    #[test]
    fn access_latency_cases() {
        let g = path3(125.0);
        let mut svc = service(1, 1);
        assert_eq!(g.cell_access_latency(1, &cell_at(1, 0.0), &svc).unwrap(), 0.0);
        assert_eq!(g.cell_access_latency(1, &cell_at(1, 0.5), &svc).unwrap(), 10.0);
        // 0.25 Mb over 125 Mbps is 2 ms per link.
        svc.packet_size_h = 0.25;
        approx::assert_relative_eq!(
            g.cell_access_latency(1, &cell_at(3, 0.0), &svc).unwrap(),
            4.0,
            epsilon = 1e-12
        );
        assert!(
            g.cell_access_latency(1, &cell_at(3, 0.1), &svc).unwrap()
                >= g.cell_access_latency(1, &cell_at(3, 0.0), &svc).unwrap()
        );
    }

    #[test]
    fn construction_rejects_bad_graphs() {
        let nodes = vec![node(1, 125.0), node(2, 125.0), node(3, 125.0)];
        let spec = |edges: Vec<(NodeId, NodeId)>, cap| TopologySpec {
            nodes: nodes.clone(),
            edges,
            cloud_delay: 10.0,
            degree_cap: cap,
        };
        assert_eq!(
            ClusterGraph::new(spec(vec![(1, 2)], 2)).unwrap_err(),
            TopologyError::Disconnected
        );
        assert_eq!(
            ClusterGraph::new(spec(vec![(1, 1), (1, 2), (2, 3)], 2)).unwrap_err(),
            TopologyError::SelfLoop(1)
        );
        assert_eq!(
            ClusterGraph::new(spec(vec![(1, 2), (2, 3)], 1)).unwrap_err(),
            TopologyError::DegreeCap(2, 2, 1)
        );
    }

    #[test]
    fn equal_cost_paths_prefer_smaller_ids() {
        // Square 1-2-4, 1-3-4: both two hops at equal bandwidth.
        let g = ClusterGraph::new(TopologySpec {
            nodes: vec![node(1, 125.0), node(2, 125.0), node(3, 125.0), node(4, 125.0)],
            edges: vec![(1, 3), (3, 4), (1, 2), (2, 4)],
            cloud_delay: 10.0,
            degree_cap: 2,
        })
        .unwrap();
        assert_eq!(g.shortest_path(1, 4).unwrap(), vec![1, 2, 4]);
        assert_eq!(g.shortest_path(4, 1).unwrap(), vec![4, 2, 1]);
    }

    #[test]
    fn slow_links_are_routed_around() {
        // 1-2 is slow; 1-3-2 is two fast hops (16 ms/Mb vs 80 ms/Mb).
        let g = ClusterGraph::new(TopologySpec {
            nodes: vec![node(1, 125.0), node(2, 125.0), node(3, 125.0), node(4, 12.5)],
            edges: vec![(1, 3), (3, 2), (1, 4), (4, 2)],
            cloud_delay: 10.0,
            degree_cap: 2,
        })
        .unwrap();
        assert_eq!(g.shortest_path(1, 2).unwrap(), vec![1, 3, 2]);
        approx::assert_relative_eq!(g.path_latency(1, 2, 1.0).unwrap(), 16.0, epsilon = 1e-12);
    }
}
