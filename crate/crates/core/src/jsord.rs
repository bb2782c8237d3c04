//! Joint service orchestration and request dispatch on one channel.
//!
//! For a fixed orchestration set `S` (which services have a replica on
//! which cells) the dispatch problem is an LP over `y[l,i,m]`, the share of
//! service `l` requests arriving at node `i` sent to cell `m`:
//!
//! ```text
//! max  Σ λ[l,i] y[l,i,m]
//!      Σ_m y[l,i,m] <= 1                      per (l, i)
//!      Σ_l w[l] Σ_i λ[l,i] y[l,i,m] <= W[m]   per cell
//!      0 <= y[l,i,m] <= 1 if (l,m) ∈ S and t[l] - o[l] - lat[l,i,m] > 0, else 0
//! ```
//!
//! Its optimum is Ω(S). Orchestration greedily grows `S` by the pair with
//! the largest Ω(S ∪ {e}) among those that still fit each cell's memory.

use std::collections::{BTreeMap, BTreeSet};
use std::time::{Duration, Instant};

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cellspace::ResourceCell;
use crate::domain::{CellId, DemandTensor, NodeId, ServiceClass, ServiceKey};
use crate::lp::{self, LinearProgram, LpError, LpStatus, SparseRow};
use crate::topology::{ClusterGraph, TopologyError};

/// Ω values within this relative distance are treated as equal when
/// choosing the next pair; the lexicographically smaller pair wins.
pub const TIE_TOL: f64 = 1e-9;
/// Residual allowed by plan audits.
pub const AUDIT_TOL: f64 = 1e-9;
/// Largest |L|·|M| the brute-force oracle accepts.
pub const ORACLE_MAX_PAIRS: usize = 16;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum JsordError {
    #[error("channel {0} has no cells or no services")]
    EmptyChannel(u32),
    #[error("instance too large for the oracle: {0} pairs, limit {ORACLE_MAX_PAIRS}")]
    TooLarge(usize),
    #[error("dispatch LP reported infeasible")]
    Infeasible,
    #[error(transparent)]
    Lp(#[from] LpError),
    #[error(transparent)]
    Topology(#[from] TopologyError),
}

/// Everything needed to solve one channel: its services, its cells, the
/// demand nodes and every access latency `lat[l, i, m]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelInstance {
    pub channel_id: u32,
    pub services: Vec<ServiceClass>,
    pub cells: Vec<ResourceCell>,
    pub nodes: Vec<NodeId>,
    /// Row-major `[l][i][m]`, ms.
    latency: Vec<f64>,
}

impl ChannelInstance {
    /// Computes latencies from the cluster graph.
    pub fn new(
        channel_id: u32,
        mut services: Vec<ServiceClass>,
        mut cells: Vec<ResourceCell>,
        graph: &ClusterGraph,
    ) -> Result<Self, JsordError> {
        services.sort_by_key(ServiceClass::key);
        cells.sort_by_key(|c| c.cell_id);
        let nodes: Vec<NodeId> = graph.node_ids().collect();
        let mut latency = Vec::with_capacity(services.len() * nodes.len() * cells.len());
        for s in &services {
            for &i in &nodes {
                for c in &cells {
                    latency.push(graph.cell_access_latency(i, c, s)?);
                }
            }
        }
        Ok(Self {
            channel_id,
            services,
            cells,
            nodes,
            latency,
        })
    }

    /// Builds an instance from explicit latencies, row-major `[l][i][m]`.
    /// Services and cells must already be in canonical order.
    pub fn from_parts(
        channel_id: u32,
        services: Vec<ServiceClass>,
        cells: Vec<ResourceCell>,
        nodes: Vec<NodeId>,
        latency: Vec<f64>,
    ) -> Self {
        assert_eq!(latency.len(), services.len() * nodes.len() * cells.len());
        Self {
            channel_id,
            services,
            cells,
            nodes,
            latency,
        }
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.services.len(), self.nodes.len(), self.cells.len())
    }

    pub fn is_empty(&self) -> bool {
        self.services.is_empty() || self.cells.is_empty()
    }

    pub fn latency(&self, l: usize, i: usize, m: usize) -> f64 {
        let (_, ni, nm) = self.dims();
        self.latency[(l * ni + i) * nm + m]
    }

    fn var(&self, l: usize, i: usize, m: usize) -> usize {
        let (_, ni, nm) = self.dims();
        (l * ni + i) * nm + m
    }

    fn reachable(&self, l: usize, i: usize, m: usize) -> bool {
        self.services[l].meets_deadline(self.latency(l, i, m))
    }

    /// λ as a dense `[l][i]` matrix.
    pub fn demand_matrix(&self, demand: &DemandTensor) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.services.len() * self.nodes.len());
        for s in &self.services {
            for &i in &self.nodes {
                out.push(demand.rate(s.key(), i));
            }
        }
        out
    }

    fn pair_index(&self, set: &OrchestrationSet) -> Vec<bool> {
        let (nl, _, nm) = self.dims();
        let mut mask = vec![false; nl * nm];
        for (key, cell) in &set.pairs {
            let l = self.services.iter().position(|s| s.key() == *key);
            let m = self.cells.iter().position(|c| c.cell_id == *cell);
            if let (Some(l), Some(m)) = (l, m) {
                mask[l * nm + m] = true;
            }
        }
        mask
    }

    fn set_from_mask(&self, mask: &[bool]) -> OrchestrationSet {
        let nm = self.cells.len();
        let pairs = mask
            .iter()
            .enumerate()
            .filter(|(_, on)| **on)
            .map(|(k, _)| (self.services[k / nm].key(), self.cells[k % nm].cell_id))
            .collect();
        OrchestrationSet {
            channel: self.channel_id,
            pairs,
        }
    }

    /// Memory feasibility of a pair mask against every cell.
    fn fits(&self, mask: &[bool]) -> bool {
        let (nl, _, nm) = self.dims();
        (0..nm).all(|m| {
            let used: f64 = (0..nl)
                .filter(|l| mask[l * nm + m])
                .map(|l| self.services[l].memory_r)
                .sum();
            used <= self.cells[m].mem_rpm
        })
    }
}

/// Replica placements `(service, cell)` on one channel.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct OrchestrationSet {
    pub channel: u32,
    pub pairs: BTreeSet<(ServiceKey, CellId)>,
}

impl OrchestrationSet {
    pub fn empty(channel: u32) -> Self {
        Self {
            channel,
            pairs: BTreeSet::new(),
        }
    }

    pub fn contains(&self, service: ServiceKey, cell: CellId) -> bool {
        self.pairs.contains(&(service, cell))
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlanScope {
    FramePrediction,
    Slot,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct DispatchKey {
    pub service: ServiceKey,
    pub node: NodeId,
    pub cell: CellId,
}

/// Dispatch probabilities `y` (non-zero entries only) and the throughput Ψ.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DispatchPlan {
    pub channel: u32,
    #[serde(with = "plan_serde")]
    pub y: BTreeMap<DispatchKey, f64>,
    pub throughput_psi: f64,
    pub scope: PlanScope,
}

impl DispatchPlan {
    pub fn empty(channel: u32, scope: PlanScope) -> Self {
        Self {
            channel,
            y: BTreeMap::new(),
            throughput_psi: 0.0,
            scope,
        }
    }

    pub fn probability(&self, service: ServiceKey, node: NodeId, cell: CellId) -> f64 {
        self.y
            .get(&DispatchKey {
                service,
                node,
                cell,
            })
            .copied()
            .unwrap_or(0.0)
    }

    /// Total probability of dispatching `(service, node)` anywhere.
    pub fn dispatched_share(&self, service: ServiceKey, node: NodeId) -> f64 {
        self.y
            .iter()
            .filter(|(k, _)| k.service == service && k.node == node)
            .map(|(_, v)| v)
            .sum()
    }
}

/// The dispatch LP for a fixed set `S`, over every `(l, i, m)` triple in
/// row-major order. Pairs outside `S`, deadline misses and zero-demand
/// entries get an upper bound of 0.
pub fn build_dispatch_lp(
    inst: &ChannelInstance,
    set: &OrchestrationSet,
    demand: &DemandTensor,
) -> LinearProgram {
    let lam = inst.demand_matrix(demand);
    build_lp_masked(inst, &inst.pair_index(set), &lam)
}

fn build_lp_masked(inst: &ChannelInstance, mask: &[bool], lam: &[f64]) -> LinearProgram {
    let (nl, ni, nm) = inst.dims();
    let n = nl * ni * nm;
    let mut objective = vec![0.0; n];
    let mut upper = vec![0.0; n];
    let mut rows = Vec::with_capacity(nl * ni + nm);
    let mut rhs = Vec::with_capacity(nl * ni + nm);
    for l in 0..nl {
        for i in 0..ni {
            let demand = lam[l * ni + i];
            let mut entries = Vec::with_capacity(nm);
            for m in 0..nm {
                let v = inst.var(l, i, m);
                objective[v] = demand;
                if mask[l * nm + m] && demand > 0.0 && inst.reachable(l, i, m) {
                    upper[v] = 1.0;
                }
                entries.push((v, 1.0));
            }
            rows.push(SparseRow::new(entries));
            rhs.push(1.0);
        }
    }
    for m in 0..nm {
        let mut entries = Vec::with_capacity(nl * ni);
        for l in 0..nl {
            let w = inst.services[l].compute_w;
            for i in 0..ni {
                entries.push((inst.var(l, i, m), w * lam[l * ni + i]));
            }
        }
        rows.push(SparseRow::new(entries));
        rhs.push(inst.cells[m].cpu_wpm);
    }
    LinearProgram {
        objective,
        rows,
        rhs,
        upper,
    }
}

fn solve_masked(inst: &ChannelInstance, mask: &[bool], lam: &[f64]) -> Result<(f64, Vec<f64>), JsordError> {
    if !mask.iter().any(|b| *b) {
        let (nl, ni, nm) = inst.dims();
        return Ok((0.0, vec![0.0; nl * ni * nm]));
    }
    let lp = build_lp_masked(inst, mask, lam);
    let sol = lp::solve_lp(&lp)?;
    if sol.status != LpStatus::Optimal {
        return Err(JsordError::Infeasible);
    }
    Ok((sol.objective_value, sol.y))
}

/// Ω(S): the optimal dispatch throughput for orchestration set `S`.
pub fn omega(
    inst: &ChannelInstance,
    set: &OrchestrationSet,
    demand: &DemandTensor,
) -> Result<f64, JsordError> {
    let lam = inst.demand_matrix(demand);
    Ok(solve_masked(inst, &inst.pair_index(set), &lam)?.0)
}

fn plan_from(inst: &ChannelInstance, y: &[f64], psi: f64, scope: PlanScope) -> DispatchPlan {
    let (nl, ni, nm) = inst.dims();
    let mut map = BTreeMap::new();
    for l in 0..nl {
        for i in 0..ni {
            for m in 0..nm {
                let v = y[inst.var(l, i, m)];
                if v > 0.0 {
                    map.insert(
                        DispatchKey {
                            service: inst.services[l].key(),
                            node: inst.nodes[i],
                            cell: inst.cells[m].cell_id,
                        },
                        v,
                    );
                }
            }
        }
    }
    DispatchPlan {
        channel: inst.channel_id,
        y: map,
        throughput_psi: psi,
        scope,
    }
}

fn ties(a: f64, b: f64) -> bool {
    (a - b).abs() <= TIE_TOL * a.abs().max(b.abs()).max(1.0)
}

/// Greedy orchestration: start from `S = ∅` and repeatedly add the
/// memory-feasible pair maximizing Ω(S ∪ {e}), ties to the smaller
/// `(service, cell)`, until no pair fits. Returns `S` and the Ω-optimal
/// dispatch for it.
///
/// Candidates are pruned with an upper bound that is exact for the argmax:
/// `Ω(S ∪ {e}) <= Ω(S) + min(Σ_i λ[l,i], W[m] / w[l])` over the nodes the
/// new pair can reach, and `Ω` never exceeds the total demand reachable
/// under `S ∪ {e}`. A candidate whose bound is below the best value found
/// so far cannot win; one whose bound equals Ω(S) has Ω(S ∪ {e}) = Ω(S)
/// because Ω never decreases under set extension.
pub fn greedy_orchestrate(
    inst: &ChannelInstance,
    frame_demand: &DemandTensor,
) -> Result<(OrchestrationSet, DispatchPlan), JsordError> {
    if inst.is_empty() {
        return Err(JsordError::EmptyChannel(inst.channel_id));
    }
    let lam = inst.demand_matrix(frame_demand);
    let (nl, ni, nm) = inst.dims();

    let mut mask = vec![false; nl * nm];
    let mut mem_used = vec![0.0; nm];
    // Whether demand (l, i) can reach any pair already in S.
    let mut reached = vec![false; nl * ni];
    let mut current = 0.0;

    loop {
        let candidates: Vec<usize> = (0..nl * nm)
            .filter(|&k| {
                !mask[k] && mem_used[k % nm] + inst.services[k / nm].memory_r <= inst.cells[k % nm].mem_rpm
            })
            .collect();
        if candidates.is_empty() {
            break;
        }
        let reach_total: f64 = (0..nl * ni).filter(|&k| reached[k]).map(|k| lam[k]).sum();

        let mut bounded: Vec<(usize, f64)> = candidates
            .iter()
            .map(|&k| {
                let (l, m) = (k / nm, k % nm);
                let mut direct = 0.0;
                let mut newly = 0.0;
                for i in 0..ni {
                    let d = lam[l * ni + i];
                    if d > 0.0 && inst.reachable(l, i, m) {
                        direct += d;
                        if !reached[l * ni + i] {
                            newly += d;
                        }
                    }
                }
                let cap = inst.cells[m].cpu_wpm / inst.services[l].compute_w;
                let ub = (current + direct.min(cap)).min(reach_total + newly);
                (k, ub)
            })
            .collect();
        // Highest bound first; stable on index so equal bounds stay ordered.
        bounded.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));

        let mut values: Vec<(usize, f64)> = Vec::new();
        let mut best = current;
        let mut pending: Vec<usize> = Vec::new();
        for &(k, ub) in &bounded {
            if ub < best && !ties(ub, best) {
                break;
            }
            if ub <= current || ties(ub, current) {
                values.push((k, current));
                continue;
            }
            pending.push(k);
            // Solve in small batches so `best` can tighten the cut.
            if pending.len() >= 8 {
                best = evaluate(inst, &mask, &lam, &mut pending, &mut values, best)?;
            }
        }
        evaluate(inst, &mask, &lam, &mut pending, &mut values, best)?;

        let top = values.iter().map(|(_, v)| *v).fold(f64::NEG_INFINITY, f64::max);
        let (k, value) = values
            .into_iter()
            .filter(|(_, v)| ties(*v, top) || *v >= top)
            .min_by_key(|(k, _)| *k)
            .expect("at least one candidate evaluated");

        mask[k] = true;
        let (l, m) = (k / nm, k % nm);
        mem_used[m] += inst.services[l].memory_r;
        for i in 0..ni {
            if lam[l * ni + i] > 0.0 && inst.reachable(l, i, m) {
                reached[l * ni + i] = true;
            }
        }
        current = current.max(value);
    }

    // Final dispatch for the chosen set.
    let (psi, y) = solve_masked(inst, &mask, &lam)?;
    Ok((
        inst.set_from_mask(&mask),
        plan_from(inst, &y, psi, PlanScope::FramePrediction),
    ))
}

fn evaluate(
    inst: &ChannelInstance,
    mask: &[bool],
    lam: &[f64],
    pending: &mut Vec<usize>,
    values: &mut Vec<(usize, f64)>,
    mut best: f64,
) -> Result<f64, JsordError> {
    for k in pending.drain(..) {
        let mut trial = mask.to_vec();
        trial[k] = true;
        let v = solve_masked(inst, &trial, lam)?.0;
        if v > best {
            best = v;
        }
        values.push((k, v));
    }
    Ok(best)
}

/// Slot-level dispatch for a fixed orchestration set.
pub fn dispatch_slot(
    inst: &ChannelInstance,
    set: &OrchestrationSet,
    slot_demand: &DemandTensor,
) -> Result<DispatchPlan, JsordError> {
    if inst.is_empty() {
        return Ok(DispatchPlan::empty(inst.channel_id, PlanScope::Slot));
    }
    let lam = inst.demand_matrix(slot_demand);
    let (psi, y) = solve_masked(inst, &inst.pair_index(set), &lam)?;
    Ok(plan_from(inst, &y, psi, PlanScope::Slot))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolveMode {
    Parallel,
    Sequential,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelSolution {
    pub set: OrchestrationSet,
    pub plan: DispatchPlan,
}

/// Runs greedy orchestration on every channel. Results are returned in
/// input order regardless of mode; empty channels yield empty plans.
pub fn solve_all_channels(
    instances: &[ChannelInstance],
    frame_demand: &DemandTensor,
    mode: SolveMode,
) -> Result<(Vec<ChannelSolution>, Duration), JsordError> {
    let one = |inst: &ChannelInstance| -> Result<ChannelSolution, JsordError> {
        if inst.is_empty() {
            return Ok(ChannelSolution {
                set: OrchestrationSet::empty(inst.channel_id),
                plan: DispatchPlan::empty(inst.channel_id, PlanScope::FramePrediction),
            });
        }
        let (set, plan) = greedy_orchestrate(inst, frame_demand)?;
        Ok(ChannelSolution { set, plan })
    };
    let start = Instant::now();
    let out: Result<Vec<_>, _> = match mode {
        SolveMode::Sequential => instances.iter().map(one).collect(),
        SolveMode::Parallel => instances.par_iter().map(one).collect(),
    };
    Ok((out?, start.elapsed()))
}

/// Merges channels into a single instance with every service and cell and
/// no channel structure. Latencies are recomputed from the graph.
pub fn monolithic_instance(
    instances: &[ChannelInstance],
    graph: &ClusterGraph,
) -> Result<ChannelInstance, JsordError> {
    let services: Vec<ServiceClass> = instances.iter().flat_map(|c| c.services.clone()).collect();
    let cells: Vec<ResourceCell> = instances.iter().flat_map(|c| c.cells.clone()).collect();
    ChannelInstance::new(0, services, cells, graph)
}

/// Greedy orchestration over the merged instance, timed.
pub fn monolithic_jsord(
    merged: &ChannelInstance,
    frame_demand: &DemandTensor,
) -> Result<(ChannelSolution, Duration), JsordError> {
    let start = Instant::now();
    let (set, plan) = greedy_orchestrate(merged, frame_demand)?;
    Ok((ChannelSolution { set, plan }, start.elapsed()))
}

/// Exact optimum of `max Ω(S)` over every memory-feasible `S` by
/// enumeration. Ties go to the lexicographically smallest pair list.
pub fn bruteforce_oracle(
    inst: &ChannelInstance,
    frame_demand: &DemandTensor,
) -> Result<(OrchestrationSet, f64), JsordError> {
    let (nl, _, nm) = inst.dims();
    if nl * nm > ORACLE_MAX_PAIRS {
        return Err(JsordError::TooLarge(nl * nm));
    }
    let lam = inst.demand_matrix(frame_demand);
    let mut best: Option<(Vec<(usize, usize)>, f64)> = None;
    for bits in 0u32..(1u32 << (nl * nm)) {
        let mask: Vec<bool> = (0..nl * nm).map(|k| bits >> k & 1 == 1).collect();
        if !inst.fits(&mask) {
            continue;
        }
        let (v, _) = solve_masked(inst, &mask, &lam)?;
        let pairs: Vec<(usize, usize)> = (0..nl * nm)
            .filter(|&k| mask[k])
            .map(|k| (k / nm, k % nm))
            .collect();
        let replace = match &best {
            None => true,
            Some((bp, bv)) => {
                if ties(v, *bv) {
                    pairs < *bp
                } else {
                    v > *bv
                }
            }
        };
        if replace {
            best = Some((pairs, v));
        }
    }
    let (pairs, v) = best.expect("empty set is always feasible");
    let mut mask = vec![false; nl * nm];
    for (l, m) in pairs {
        mask[l * nm + m] = true;
    }
    Ok((inst.set_from_mask(&mask), v))
}

/// A single violated dispatch or orchestration constraint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanViolation {
    pub channel: u32,
    pub constraint: &'static str,
    pub detail: String,
    pub residual: f64,
}

/// Re-checks a plan against the dispatch constraints, the memory limit of
/// the orchestration set, and the deadline indicator, independently of the
/// solver.
pub fn audit_plan(
    inst: &ChannelInstance,
    set: &OrchestrationSet,
    demand: &DemandTensor,
    plan: &DispatchPlan,
) -> Vec<PlanViolation> {
    let mut out = Vec::new();
    let ch = inst.channel_id;
    let push = |out: &mut Vec<PlanViolation>, c: &'static str, d: String, r: f64| {
        out.push(PlanViolation {
            channel: ch,
            constraint: c,
            detail: d,
            residual: r,
        })
    };
    for cell in &inst.cells {
        let used: f64 = inst
            .services
            .iter()
            .filter(|s| set.contains(s.key(), cell.cell_id))
            .map(|s| s.memory_r)
            .sum();
        if used > cell.mem_rpm * (1.0 + AUDIT_TOL) {
            push(&mut out, "cell_memory", format!("cell {}", cell.cell_id), used - cell.mem_rpm);
        }
    }
    let mut share: BTreeMap<(ServiceKey, NodeId), f64> = BTreeMap::new();
    let mut load: BTreeMap<CellId, f64> = BTreeMap::new();
    for (k, &y) in &plan.y {
        if !(-AUDIT_TOL..=1.0 + AUDIT_TOL).contains(&y) || !y.is_finite() {
            push(&mut out, "probability_range", format!("{k:?}"), y);
        }
        let l = inst.services.iter().position(|s| s.key() == k.service);
        let i = inst.nodes.iter().position(|n| *n == k.node);
        let m = inst.cells.iter().position(|c| c.cell_id == k.cell);
        let (Some(l), Some(i), Some(m)) = (l, i, m) else {
            push(&mut out, "unknown_entry", format!("{k:?}"), y);
            continue;
        };
        if y > 0.0 && !set.contains(k.service, k.cell) {
            push(&mut out, "orchestration", format!("{k:?} not in S"), y);
        }
        if y > 0.0 && !inst.reachable(l, i, m) {
            push(&mut out, "deadline", format!("{k:?} latency {}", inst.latency(l, i, m)), y);
        }
        *share.entry((k.service, k.node)).or_insert(0.0) += y;
        *load.entry(k.cell).or_insert(0.0) +=
            inst.services[l].compute_w * demand.rate(k.service, k.node) * y;
    }
    for ((s, n), total) in share {
        if total > 1.0 + AUDIT_TOL {
            push(&mut out, "dispatch_sum", format!("{s} at node {n}"), total - 1.0);
        }
    }
    for cell in &inst.cells {
        let l = load.get(&cell.cell_id).copied().unwrap_or(0.0);
        if l > cell.cpu_wpm + AUDIT_TOL * cell.cpu_wpm.max(1.0) {
            push(&mut out, "cell_compute", format!("cell {}", cell.cell_id), l - cell.cpu_wpm);
        }
    }
    out
}

/// Generator for small random channel instances used by oracle checks.
pub mod random {
    use super::*;
    use crate::domain::{DemandKey, DemandScope};

    #[derive(Debug, Clone, Copy)]
    pub struct InstanceShape {
        pub services: usize,
        pub nodes: usize,
        pub cells: usize,
    }

    /// A random channel with abstract resource magnitudes: roughly one to
    /// three services fit per cell, compute is often binding and some
    /// node/cell pairs miss the deadline.
    pub fn channel(rng: &mut impl Rng, shape: InstanceShape) -> (ChannelInstance, DemandTensor) {
        let services: Vec<ServiceClass> = (0..shape.services)
            .map(|l| ServiceClass {
                sla_level: 1,
                service_id: l as u32 + 1,
                packet_size_h: 0.0,
                memory_r: rng.gen_range(1.0..3.0),
                compute_w: rng.gen_range(0.2..2.0),
                max_response_t: rng.gen_range(10.0..30.0),
                exec_time_o: rng.gen_range(0.0..5.0),
            })
            .collect();
        let cells: Vec<ResourceCell> = (0..shape.cells)
            .map(|m| {
                let cpu = rng.gen_range(1.0..12.0);
                let mem = rng.gen_range(1.0..6.0);
                ResourceCell {
                    cell_id: m as CellId,
                    anchor_node: 0,
                    cpu_wpm: cpu,
                    mem_rpm: mem,
                    edge_backing: BTreeMap::from([(0, (cpu, mem))]),
                    cloud_backing: (0.0, 0.0),
                    created_frame: 0,
                }
            })
            .collect();
        let nodes: Vec<NodeId> = (0..shape.nodes as NodeId).collect();
        let latency = (0..shape.services * shape.nodes * shape.cells)
            .map(|_| rng.gen_range(0.0..25.0))
            .collect();
        let mut demand = DemandTensor::new(DemandScope::FrameAverage);
        for s in &services {
            for &i in &nodes {
                let v = if rng.gen_bool(0.15) {
                    0.0
                } else {
                    rng.gen_range(0.5..10.0)
                };
                demand
                    .set(
                        DemandKey {
                            service: s.key(),
                            node: i,
                        },
                        v,
                    )
                    .unwrap();
            }
        }
        (
            ChannelInstance::from_parts(1, services, cells, nodes, latency),
            demand,
        )
    }
}

mod plan_serde {
    use super::*;
    use serde::{Deserializer, Serializer};

    #[derive(Serialize, Deserialize)]
    struct Entry {
        sla: u32,
        service: u32,
        node: NodeId,
        cell: CellId,
        y: f64,
    }

    pub fn serialize<S: Serializer>(m: &BTreeMap<DispatchKey, f64>, s: S) -> Result<S::Ok, S::Error> {
        m.iter()
            .map(|(k, y)| Entry {
                sla: k.service.sla_level,
                service: k.service.service_id,
                node: k.node,
                cell: k.cell,
                y: *y,
            })
            .collect::<Vec<_>>()
            .serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<BTreeMap<DispatchKey, f64>, D::Error> {
        Ok(Vec::<Entry>::deserialize(d)?
            .into_iter()
            .map(|e| {
                (
                    DispatchKey {
                        service: ServiceKey::new(e.sla, e.service),
                        node: e.node,
                        cell: e.cell,
                    },
                    e.y,
                )
            })
            .collect())
    }
}
