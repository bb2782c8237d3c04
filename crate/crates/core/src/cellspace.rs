//! Resource cells: realization against the node capacity ledger, cell
//! characteristics, clustering into channels and SLA priorities.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{CellId, NodeId, SlaCatalog};
use crate::topology::{ClusterGraph, TopologyError};

/// Tolerance used when auditing resource accounting.
pub const ACCOUNTING_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum CellError {
    #[error("cell demand is zero in at least one resource")]
    ZeroDemand,
    #[error("action component {0} outside [0, 1]")]
    ActionOutOfRange(f64),
    #[error("need at least {needed} cells to form channels, have {have}")]
    TooFewCells { needed: usize, have: usize },
    #[error("{channels} channels but catalog has {levels} sla levels")]
    CountMismatch { channels: usize, levels: usize },
    #[error(transparent)]
    Topology(#[from] TopologyError),
}

/// Maximum cell size: action `(a_w, a_r)` maps to `(alpha * a_w, beta * a_r)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CellScalars {
    /// vCPU.
    pub alpha: f64,
    /// MB.
    pub beta: f64,
}

impl Default for CellScalars {
    fn default() -> Self {
        Self {
            alpha: 2.0,
            beta: 500.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResourceCell {
    pub cell_id: CellId,
    pub anchor_node: NodeId,
    /// Total compute W_{p,m}, vCPU.
    pub cpu_wpm: f64,
    /// Total memory R_{p,m}, MB.
    pub mem_rpm: f64,
    /// Per-node (cpu, mem) carved out of the anchor's neighbourhood.
    pub edge_backing: BTreeMap<NodeId, (f64, f64)>,
    /// (cpu, mem) topped up from the cloud.
    pub cloud_backing: (f64, f64),
    pub created_frame: u64,
}

impl ResourceCell {
    pub fn is_vertical(&self) -> bool {
        self.cloud_backing.0 > 0.0 || self.cloud_backing.1 > 0.0
    }

    pub fn is_horizontal(&self) -> bool {
        !self.is_vertical()
    }

    pub fn edge_totals(&self) -> (f64, f64) {
        self.edge_backing
            .values()
            .fold((0.0, 0.0), |(c, m), (dc, dm)| (c + dc, m + dm))
    }

    /// Largest mismatch between the declared size and the sum of its backings.
    pub fn accounting_residual(&self) -> f64 {
        let (ec, em) = self.edge_totals();
        let dc = (ec + self.cloud_backing.0 - self.cpu_wpm).abs();
        let dm = (em + self.cloud_backing.1 - self.mem_rpm).abs();
        dc.max(dm)
    }
}

/// Free (cpu, mem) per node, with the initial capacities kept for audits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CapacityLedger {
    initial: BTreeMap<NodeId, (f64, f64)>,
    free: BTreeMap<NodeId, (f64, f64)>,
}

impl CapacityLedger {
    pub fn new(graph: &ClusterGraph) -> Self {
        let initial: BTreeMap<_, _> = graph
            .nodes()
            .iter()
            .map(|n| (n.node_id, (n.cpu_w, n.mem_r)))
            .collect();
        Self {
            free: initial.clone(),
            initial,
        }
    }

    pub fn from_free(free: BTreeMap<NodeId, (f64, f64)>) -> Self {
        Self {
            initial: free.clone(),
            free,
        }
    }

    pub fn free(&self, node: NodeId) -> (f64, f64) {
        self.free.get(&node).copied().unwrap_or((0.0, 0.0))
    }

    pub fn initial(&self, node: NodeId) -> (f64, f64) {
        self.initial.get(&node).copied().unwrap_or((0.0, 0.0))
    }

    pub fn nodes(&self) -> impl Iterator<Item = NodeId> + '_ {
        self.initial.keys().copied()
    }

    /// Returns a released cell's edge backing to the nodes it came from.
    pub fn release(&mut self, cell: &ResourceCell) {
        for (node, (c, m)) in &cell.edge_backing {
            if let Some(f) = self.free.get_mut(node) {
                f.0 += c;
                f.1 += m;
            }
        }
    }

    /// Test hook for fault injection.
    #[doc(hidden)]
    pub fn corrupt(&mut self, node: NodeId, delta: (f64, f64)) {
        if let Some(f) = self.free.get_mut(&node) {
            f.0 += delta.0;
            f.1 += delta.1;
        }
    }

    /// Nodes where `initial - Σ live backing != free`, with the residual.
    pub fn conservation_violations<'a>(
        &self,
        live: impl IntoIterator<Item = &'a ResourceCell>,
    ) -> Vec<(NodeId, f64)> {
        let mut used: BTreeMap<NodeId, (f64, f64)> = BTreeMap::new();
        for cell in live {
            for (node, (c, m)) in &cell.edge_backing {
                let u = used.entry(*node).or_insert((0.0, 0.0));
                u.0 += c;
                u.1 += m;
            }
        }
        let mut out = Vec::new();
        for (node, (ic, im)) in &self.initial {
            let (uc, um) = used.get(node).copied().unwrap_or((0.0, 0.0));
            let (fc, fm) = self.free(*node);
            let residual = (ic - uc - fc).abs().max((im - um - fm).abs());
            let scale = ic.abs().max(im.abs()).max(1.0);
            if residual > ACCOUNTING_TOL * scale || fc < -ACCOUNTING_TOL || fm < -ACCOUNTING_TOL {
                out.push((*node, residual));
            }
        }
        out
    }
}

/// Carves a new cell for `anchor` sized by `action`. The anchor supplies
/// first, then its neighbours in descending free CPU (ties to the smaller
/// id); CPU and memory are drawn independently. Any shortfall is backed by
/// the cloud.
pub fn realize_cell(
    graph: &ClusterGraph,
    ledger: &mut CapacityLedger,
    anchor: NodeId,
    action: (f64, f64),
    scalars: CellScalars,
    cell_id: CellId,
    frame: u64,
) -> Result<ResourceCell, CellError> {
    for a in [action.0, action.1] {
        if !(0.0..=1.0).contains(&a) {
            return Err(CellError::ActionOutOfRange(a));
        }
    }
    let demand = (scalars.alpha * action.0, scalars.beta * action.1);
    if demand.0 == 0.0 || demand.1 == 0.0 {
        return Err(CellError::ZeroDemand);
    }
    let hood = graph.neighborhood(anchor)?;
    let mut donors: Vec<NodeId> = hood.into_iter().filter(|n| *n != anchor).collect();
    donors.sort_by(|a, b| {
        ledger
            .free(*b)
            .0
            .total_cmp(&ledger.free(*a).0)
            .then(a.cmp(b))
    });
    donors.insert(0, anchor);

    let mut remaining = demand;
    let mut edge_backing = BTreeMap::new();
    for node in donors {
        if remaining.0 <= 0.0 && remaining.1 <= 0.0 {
            break;
        }
        let free = ledger.free.get_mut(&node).expect("ledger covers graph");
        let take = (remaining.0.min(free.0).max(0.0), remaining.1.min(free.1).max(0.0));
        if take.0 > 0.0 || take.1 > 0.0 {
            free.0 -= take.0;
            free.1 -= take.1;
            remaining.0 -= take.0;
            remaining.1 -= take.1;
            edge_backing.insert(node, take);
        }
    }
    Ok(ResourceCell {
        cell_id,
        anchor_node: anchor,
        cpu_wpm: demand.0,
        mem_rpm: demand.1,
        edge_backing,
        cloud_backing: (remaining.0.max(0.0), remaining.1.max(0.0)),
        created_frame: frame,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CellCharacteristics {
    pub w_norm: f64,
    pub r_norm: f64,
    pub u_edge: f64,
    pub epsilon: f64,
}

impl CellCharacteristics {
    /// φ = (w, r, ε·u).
    pub fn vector(&self) -> [f64; 3] {
        [self.w_norm, self.r_norm, self.epsilon * self.u_edge]
    }
}

pub fn characteristics(
    cell: &ResourceCell,
    scalars: CellScalars,
    epsilon: f64,
) -> CellCharacteristics {
    let (ec, em) = cell.edge_totals();
    CellCharacteristics {
        w_norm: cell.cpu_wpm / scalars.alpha,
        r_norm: cell.mem_rpm / scalars.beta,
        u_edge: 0.5 * (ec / cell.cpu_wpm + em / cell.mem_rpm),
        epsilon,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResourceChannel {
    /// 1 is the highest priority.
    pub channel_id: u32,
    pub priority_delta: f64,
    pub centroid: [f64; 3],
    pub member_cells: Vec<CellId>,
    /// SLA level served on this channel, once assigned.
    pub service_level: Option<u32>,
}

pub const KMEANS_MAX_ITERS: usize = 100;
pub const KMEANS_SHIFT_TOL: f64 = 1e-9;

fn dist2(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    (0..3).map(|d| (a[d] - b[d]).powi(2)).sum()
}

fn nearest(point: &[f64; 3], centroids: &[[f64; 3]]) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (c, centroid) in centroids.iter().enumerate() {
        let d = dist2(point, centroid);
        if d < best_d {
            best = c;
            best_d = d;
        }
    }
    best
}

/// k-means with seeded k-means++ seeding. Every cluster ends non-empty.
/// Returns `(assignment per point, centroids)`.
pub fn kmeans(points: &[[f64; 3]], k: usize, seed: u64) -> (Vec<usize>, Vec<[f64; 3]>) {
    assert!(k >= 1 && points.len() >= k, "kmeans needs at least k points");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = points.len();

    let mut chosen = vec![rng.gen_range(0..n)];
    let mut d2: Vec<f64> = points.iter().map(|p| dist2(p, &points[chosen[0]])).collect();
    while chosen.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let mut target = rng.gen::<f64>() * total;
            let mut pick = None;
            for (i, w) in d2.iter().enumerate() {
                if *w <= 0.0 {
                    continue;
                }
                if target < *w {
                    pick = Some(i);
                    break;
                }
                target -= w;
            }
            // Rounding can run past the end; fall back to the last positive weight.
            pick.unwrap_or_else(|| d2.iter().rposition(|w| *w > 0.0).unwrap())
        } else {
            (0..n).find(|i| !chosen.contains(i)).unwrap()
        };
        chosen.push(next);
        for (i, p) in points.iter().enumerate() {
            d2[i] = d2[i].min(dist2(p, &points[next]));
        }
    }
    let mut centroids: Vec<[f64; 3]> = chosen.iter().map(|&i| points[i]).collect();
    let mut assign = vec![0usize; n];

    for _ in 0..KMEANS_MAX_ITERS {
        for (i, p) in points.iter().enumerate() {
            assign[i] = nearest(p, &centroids);
        }
        repair_empty(points, &mut assign, &mut centroids);
        let updated = means(points, &assign, k);
        let shift = centroids
            .iter()
            .zip(&updated)
            .map(|(a, b)| dist2(a, b).sqrt())
            .fold(0.0, f64::max);
        centroids = updated;
        if shift < KMEANS_SHIFT_TOL {
            break;
        }
    }
    for (i, p) in points.iter().enumerate() {
        assign[i] = nearest(p, &centroids);
    }
    repair_empty(points, &mut assign, &mut centroids);
    let centroids = means(points, &assign, k);
    (assign, centroids)
}

fn means(points: &[[f64; 3]], assign: &[usize], k: usize) -> Vec<[f64; 3]> {
    let mut sums = vec![[0.0; 3]; k];
    let mut counts = vec![0usize; k];
    for (p, &c) in points.iter().zip(assign) {
        counts[c] += 1;
        for d in 0..3 {
            sums[c][d] += p[d];
        }
    }
    sums.iter()
        .zip(&counts)
        .map(|(s, &n)| {
            let n = n.max(1) as f64;
            [s[0] / n, s[1] / n, s[2] / n]
        })
        .collect()
}

/// Moves, for each empty cluster, the point farthest from its own centroid
/// (taken only from clusters with more than one member).
fn repair_empty(points: &[[f64; 3]], assign: &mut [usize], centroids: &mut [[f64; 3]]) {
    let k = centroids.len();
    loop {
        let mut counts = vec![0usize; k];
        for &c in assign.iter() {
            counts[c] += 1;
        }
        let Some(empty) = counts.iter().position(|&n| n == 0) else {
            return;
        };
        let mut victim = None;
        let mut far = -1.0;
        for (i, p) in points.iter().enumerate() {
            if counts[assign[i]] < 2 {
                continue;
            }
            let d = dist2(p, &centroids[assign[i]]);
            if d > far {
                far = d;
                victim = Some(i);
            }
        }
        let v = victim.expect("points >= k guarantees a donor cluster");
        assign[v] = empty;
        centroids[empty] = points[v];
    }
}

/// Groups cells into `p` channels by k-means on φ. δ_p is the norm of the
/// channel centroid; channels are numbered 1..=p by descending δ.
pub fn cluster_channels(
    cells: &[(CellId, CellCharacteristics)],
    p: usize,
    seed: u64,
) -> Result<Vec<ResourceChannel>, CellError> {
    if p == 0 || cells.len() < p {
        return Err(CellError::TooFewCells {
            needed: p.max(1),
            have: cells.len(),
        });
    }
    let points: Vec<[f64; 3]> = cells.iter().map(|(_, c)| c.vector()).collect();
    let (assign, centroids) = kmeans(&points, p, seed);
    let mut channels: Vec<ResourceChannel> = centroids
        .iter()
        .enumerate()
        .map(|(c, centroid)| {
            let mut members: Vec<CellId> = cells
                .iter()
                .zip(&assign)
                .filter(|(_, a)| **a == c)
                .map(|((id, _), _)| *id)
                .collect();
            members.sort_unstable();
            ResourceChannel {
                channel_id: 0,
                priority_delta: centroid.iter().map(|x| x * x).sum::<f64>().sqrt(),
                centroid: *centroid,
                member_cells: members,
                service_level: None,
            }
        })
        .collect();
    channels.sort_by(|a, b| {
        b.priority_delta
            .total_cmp(&a.priority_delta)
            .then_with(|| a.member_cells.first().cmp(&b.member_cells.first()))
    });
    for (k, ch) in channels.iter_mut().enumerate() {
        ch.channel_id = k as u32 + 1;
    }
    Ok(channels)
}

/// Pairs SLA levels (strictest lifecycle first) with channels (highest δ
/// first).
pub fn assign_service_levels(
    mut channels: Vec<ResourceChannel>,
    catalog: &SlaCatalog,
) -> Result<Vec<ResourceChannel>, CellError> {
    let levels = catalog.channel_count_p as usize;
    if channels.len() != levels {
        return Err(CellError::CountMismatch {
            channels: channels.len(),
            levels,
        });
    }
    let mut order: Vec<u32> = (1..=catalog.channel_count_p).collect();
    order.sort_by(|a, b| {
        let da = catalog.level_deadline(*a).unwrap_or(f64::INFINITY);
        let db = catalog.level_deadline(*b).unwrap_or(f64::INFINITY);
        da.total_cmp(&db).then(a.cmp(b))
    });
    channels.sort_by(|a, b| {
        b.priority_delta
            .total_cmp(&a.priority_delta)
            .then(a.channel_id.cmp(&b.channel_id))
    });
    for (ch, level) in channels.iter_mut().zip(order) {
        ch.service_level = Some(level);
    }
    Ok(channels)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::tests::service;
    use crate::domain::{validate_catalog, ServiceClass};
    use crate::topology::{EdgeNode, TopologySpec};
    use proptest::prelude::*;
    use rand_distr::{Distribution, Normal};

    fn star(free: &[(f64, f64)]) -> (ClusterGraph, CapacityLedger) {
        let nodes = free
            .iter()
            .enumerate()
            .map(|(i, _)| EdgeNode {
                node_id: i as NodeId,
                cpu_w: 4.0,
                mem_r: 1000.0,
                bandwidth_b: 125.0,
            })
            .collect();
        let edges = (1..free.len() as NodeId).map(|j| (0, j)).collect();
        let g = ClusterGraph::new(TopologySpec {
            nodes,
            edges,
            cloud_delay: 10.0,
            degree_cap: free.len(),
        })
        .unwrap();
        let ledger = CapacityLedger::from_free(
            free.iter()
                .enumerate()
                .map(|(i, f)| (i as NodeId, *f))
                .collect(),
        );
        (g, ledger)
    }

    #[test]
    fn full_action_on_free_anchor_is_horizontal() {
        let (g, mut ledger) = star(&[(2.0, 500.0), (1.0, 100.0)]);
        let cell = realize_cell(&g, &mut ledger, 0, (1.0, 1.0), CellScalars::default(), 1, 0)
            .unwrap();
        assert_eq!(cell.edge_backing, BTreeMap::from([(0, (2.0, 500.0))]));
        assert!(cell.is_horizontal());
        assert_eq!(ledger.free(0), (0.0, 0.0));
    }

    #[test]
    fn exhausted_neighbourhood_goes_to_cloud() {
        let (g, mut ledger) = star(&[(0.0, 0.0), (0.0, 0.0)]);
        let cell = realize_cell(&g, &mut ledger, 0, (1.0, 1.0), CellScalars::default(), 1, 0)
            .unwrap();
        assert_eq!(cell.cloud_backing, (2.0, 500.0));
        assert!(cell.is_vertical());
        assert_eq!(characteristics(&cell, CellScalars::default(), 1.5).u_edge, 0.0);
    }

    #[test]
    fn allocation_walks_anchor_then_neighbours() {
        // Demand (1, 250): anchor gives (0.6, 100), neighbour 1 the rest.
        let (g, mut ledger) = star(&[(0.6, 100.0), (1.0, 200.0), (0.5, 500.0)]);
        let cell = realize_cell(&g, &mut ledger, 0, (0.5, 0.5), CellScalars::default(), 1, 0)
            .unwrap();
        assert_eq!(cell.edge_backing[&0], (0.6, 100.0));
        let (c, m) = cell.edge_backing[&1];
        approx::assert_relative_eq!(c, 0.4, epsilon = 1e-12);
        approx::assert_relative_eq!(m, 150.0, epsilon = 1e-12);
        assert!(!cell.edge_backing.contains_key(&2));
        assert!(cell.is_horizontal());
        assert!(cell.accounting_residual() < 1e-12);
        assert_eq!(ledger.free(1), (0.6, 50.0));
    }

    #[test]
    fn zero_and_out_of_range_actions_fail() {
        let (g, mut ledger) = star(&[(2.0, 500.0)]);
        let s = CellScalars::default();
        assert_eq!(
            realize_cell(&g, &mut ledger, 0, (0.0, 1.0), s, 1, 0),
            Err(CellError::ZeroDemand)
        );
        assert_eq!(
            realize_cell(&g, &mut ledger, 0, (1.2, 1.0), s, 1, 0),
            Err(CellError::ActionOutOfRange(1.2))
        );
        assert_eq!(ledger.free(0), (2.0, 500.0));
    }

    #[test]
    fn ledger_conservation_and_release() {
        let nodes = (0..3)
            .map(|i| EdgeNode {
                node_id: i,
                cpu_w: 2.0,
                mem_r: 600.0,
                bandwidth_b: 125.0,
            })
            .collect();
        let g = ClusterGraph::new(TopologySpec {
            nodes,
            edges: vec![(0, 1), (1, 2)],
            cloud_delay: 10.0,
            degree_cap: 2,
        })
        .unwrap();
        let mut ledger = CapacityLedger::new(&g);
        let s = CellScalars::default();
        let mut live = Vec::new();
        for (id, anchor) in [0u32, 1, 1, 2, 0].into_iter().enumerate() {
            live.push(realize_cell(&g, &mut ledger, anchor, (0.9, 0.8), s, id as u32, 0).unwrap());
            assert!(ledger.conservation_violations(&live).is_empty());
        }
        let gone = live.remove(1);
        ledger.release(&gone);
        assert!(ledger.conservation_violations(&live).is_empty());
        ledger.corrupt(2, (0.5, 0.0));
        assert_eq!(ledger.conservation_violations(&live).len(), 1);
    }

    fn cell_with(cpu: f64, mem: f64, edge: (f64, f64)) -> ResourceCell {
        ResourceCell {
            cell_id: 0,
            anchor_node: 0,
            cpu_wpm: cpu,
            mem_rpm: mem,
            edge_backing: BTreeMap::from([(0, edge)]),
            cloud_backing: (cpu - edge.0, mem - edge.1),
            created_frame: 0,
        }
    }

    #[test]
    fn characteristic_vectors() {
        let s = CellScalars::default();
        let full = characteristics(&cell_with(2.0, 500.0, (2.0, 500.0)), s, 1.5);
        assert_eq!(full.vector(), [1.0, 1.0, 1.5]);
        let half = characteristics(&cell_with(2.0, 500.0, (1.0, 500.0)), s, 1.0);
        assert_eq!(half.u_edge, 0.75);
    }

    #[test]
    fn u_edge_drops_as_cloud_share_grows() {
        let s = CellScalars::default();
        let mut last = f64::INFINITY;
        for k in 0..=10 {
            let edge_cpu = 2.0 - 0.2 * k as f64;
            let u = characteristics(&cell_with(2.0, 500.0, (edge_cpu, 300.0)), s, 1.5).u_edge;
            assert!(u < last);
            last = u;
        }
    }

    fn chars(v: [f64; 3]) -> CellCharacteristics {
        CellCharacteristics {
            w_norm: v[0],
            r_norm: v[1],
            u_edge: v[2],
            epsilon: 1.0,
        }
    }

    #[test]
    fn two_distinct_points_recover_exact_centroids() {
        let a = [0.5, 0.5, 1.0];
        let b = [1.0, 0.2, 0.0];
        let cells: Vec<_> = [a, a, a, b, b]
            .iter()
            .enumerate()
            .map(|(i, v)| (i as CellId, chars(*v)))
            .collect();
        for seed in 0..10 {
            let ch = cluster_channels(&cells, 2, seed).unwrap();
            assert_eq!(ch[0].centroid, a);
            assert_eq!(ch[0].member_cells, vec![0, 1, 2]);
            assert_eq!(ch[1].centroid, b);
        }
    }

    #[test]
    fn delta_is_centroid_norm() {
        let cells = vec![(0, chars([1.0, 1.0, 1.0])), (1, chars([1.0, 1.0, 1.0]))];
        let mut c = cells.clone();
        for x in &mut c {
            x.1.epsilon = 1.5;
        }
        let ch = cluster_channels(&c, 1, 0).unwrap();
        approx::assert_relative_eq!(ch[0].priority_delta, 2.0616, epsilon = 1e-4);
        approx::assert_relative_eq!(ch[0].priority_delta, 4.25f64.sqrt(), epsilon = 1e-15);
        assert!(matches!(
            cluster_channels(&cells, 3, 0),
            Err(CellError::TooFewCells { needed: 3, have: 2 })
        ));
    }

    #[test]
    fn separated_blobs_are_recovered() {
        let centers = [
            [0.1, 0.1, 0.1],
            [0.9, 0.1, 0.1],
            [0.1, 0.9, 0.1],
            [0.1, 0.1, 0.9],
            [0.9, 0.9, 0.1],
            [0.9, 0.9, 0.9],
        ];
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let noise = Normal::new(0.0, 0.03).unwrap();
        let mut cells = Vec::new();
        let mut labels = Vec::new();
        for (b, c) in centers.iter().enumerate() {
            for _ in 0..10 {
                let v = [
                    c[0] + noise.sample(&mut rng),
                    c[1] + noise.sample(&mut rng),
                    c[2] + noise.sample(&mut rng),
                ];
                cells.push((cells.len() as CellId, chars(v)));
                labels.push(b);
            }
        }
        for seed in 0..5 {
            let channels = cluster_channels(&cells, 6, seed).unwrap();
            let mut agree = 0;
            for ch in &channels {
                let mut votes = [0usize; 6];
                for id in &ch.member_cells {
                    votes[labels[*id as usize]] += 1;
                }
                agree += votes.iter().max().unwrap();
            }
            assert!(agree as f64 >= 0.95 * 60.0, "seed {seed}: {agree}/60");
        }
    }

    proptest! {
        #[test]
        fn ranking_survives_uniform_scaling(
            pts in prop::collection::vec((0.0f64..1.0, 0.0f64..1.0, 0.0f64..1.0), 8..20),
            scale in 0.25f64..4.0,
            seed in 0u64..100,
        ) {
            let cells: Vec<_> = pts.iter().enumerate()
                .map(|(i, p)| (i as CellId, chars([p.0, p.1, p.2])))
                .collect();
            let scaled: Vec<_> = cells.iter()
                .map(|(i, c)| (*i, chars(c.vector().map(|x| x * scale))))
                .collect();
            let a = cluster_channels(&cells, 3, seed).unwrap();
            let b = cluster_channels(&scaled, 3, seed).unwrap();
            let members = |v: &[ResourceChannel]| v.iter().map(|c| c.member_cells.clone()).collect::<Vec<_>>();
            prop_assert_eq!(members(&a), members(&b));
        }

        #[test]
        fn every_cell_in_exactly_one_channel(
            pts in prop::collection::vec((0.0f64..1.0, 0.0f64..1.0, 0.0f64..1.5), 6..30),
            seed in 0u64..100,
        ) {
            let cells: Vec<_> = pts.iter().enumerate()
                .map(|(i, p)| (i as CellId, chars([p.0, p.1, p.2])))
                .collect();
            let ch = cluster_channels(&cells, 6, seed).unwrap();
            let mut all: Vec<_> = ch.iter().flat_map(|c| c.member_cells.clone()).collect();
            all.sort_unstable();
            prop_assert_eq!(all, (0..cells.len() as CellId).collect::<Vec<_>>());
            prop_assert!(ch.iter().all(|c| !c.member_cells.is_empty()));
            prop_assert!(ch.windows(2).all(|w| w[0].priority_delta >= w[1].priority_delta));
        }

        #[test]
        fn strictest_levels_pair_with_highest_priority(
            deadlines in prop::collection::btree_set(10u32..400, 6),
            deltas in prop::collection::vec(0.1f64..3.0, 6),
        ) {
            let deadlines: Vec<u32> = deadlines.into_iter().collect();
            let services: Vec<ServiceClass> = (1..=6u32).map(|p| {
                let mut s = service(p, 1);
                // Shuffle which level is strict.
                s.max_response_t = deadlines[((p * 7) % 6) as usize] as f64;
                s.exec_time_o = 1.0;
                s
            }).collect();
            let catalog = validate_catalog(SlaCatalog { services, channel_count_p: 6 }).unwrap();
            let channels: Vec<ResourceChannel> = deltas.iter().enumerate().map(|(i, d)| ResourceChannel {
                channel_id: i as u32 + 1,
                priority_delta: *d,
                centroid: [0.0; 3],
                member_cells: vec![i as u32],
                service_level: None,
            }).collect();
            let out = assign_service_levels(channels, &catalog).unwrap();
            let mut levels: Vec<u32> = out.iter().map(|c| c.service_level.unwrap()).collect();
            // Walking channels by descending δ, lifecycles never decrease.
            let t: Vec<f64> = levels.iter().map(|l| catalog.level_deadline(*l).unwrap()).collect();
            prop_assert!(t.windows(2).all(|w| w[0] < w[1]));
            levels.sort_unstable();
            prop_assert_eq!(levels, (1..=6).collect::<Vec<_>>());
        }
    }

    #[test]
    fn level_assignment_examples() {
        let one = validate_catalog(SlaCatalog {
            services: vec![service(1, 1)],
            channel_count_p: 1,
        })
        .unwrap();
        let ch = |d: f64, id: u32| ResourceChannel {
            channel_id: id,
            priority_delta: d,
            centroid: [0.0; 3],
            member_cells: vec![id],
            service_level: None,
        };
        let out = assign_service_levels(vec![ch(1.0, 1)], &one).unwrap();
        assert_eq!(out[0].service_level, Some(1));

        let mut slow = service(1, 1);
        slow.max_response_t = 50.0;
        let mut fast = service(2, 1);
        fast.max_response_t = 10.0;
        let two = validate_catalog(SlaCatalog {
            services: vec![slow, fast],
            channel_count_p: 2,
        })
        .unwrap();
        let out = assign_service_levels(vec![ch(2.0, 1), ch(1.0, 2)], &two).unwrap();
        assert_eq!(out[0].priority_delta, 2.0);
        assert_eq!(out[0].service_level, Some(2));
        assert_eq!(out[1].service_level, Some(1));

        assert!(matches!(
            assign_service_levels(vec![ch(1.0, 1)], &two),
            Err(CellError::CountMismatch { .. })
        ));
    }
}
