//! Two-time-scale simulation loop.
//!
//! Each frame: agents pick cell sizes, cells are retired and realized,
//! cells are clustered into channels, each channel is orchestrated against
//! the predicted demand, and then every slot dispatches its arrivals on the
//! fixed orchestration. Rewards, metrics and audits are produced per frame.

use std::collections::{BTreeMap, VecDeque};
use std::fmt::Write as _;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cellspace::{
    assign_service_levels, characteristics, cluster_channels, realize_cell, CapacityLedger, CellError,
    CellScalars, ResourceCell, ResourceChannel,
};
use crate::domain::{CellId, DemandKey, DemandScope, DemandTensor, NodeId, SlaCatalog};
use crate::jsord::{
    self, audit_plan, dispatch_slot, solve_all_channels, ChannelInstance, DispatchPlan, JsordError,
    OrchestrationSet, SolveMode,
};
use crate::nmac::{self, EnvStep, MultiAgentEnv, Nmac, NmacError, Policy, TrainConfig, ACTION_DIM};
use crate::topology::{ClusterGraph, RandomTopology, TopologyError};
use crate::workload::{
    base_rate_tensor, derive_seed, frame_average, slot_arrivals, synthetic_base_rates, RatePattern, RateShape,
    SyntheticCatalog, WorkloadError,
};

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error(transparent)]
    Topology(#[from] TopologyError),
    #[error(transparent)]
    Workload(#[from] WorkloadError),
    #[error(transparent)]
    Cell(#[from] CellError),
    #[error(transparent)]
    Jsord(#[from] JsordError),
    #[error(transparent)]
    Nmac(#[from] NmacError),
    #[error("audit failed at frame {frame}: {violations:?}\n{dump}")]
    Audit {
        frame: u64,
        violations: Vec<String>,
        dump: String,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WorkloadConfig {
    /// Base arrival rates per (service, node), requests per slot.
    pub rate_range: (f64, f64),
    pub shape: RateShape,
    /// Std of additive Gaussian noise per slot, requests.
    pub noise_std: f64,
}

impl Default for WorkloadConfig {
    fn default() -> Self {
        Self {
            rate_range: (1.0, 5.0),
            shape: RateShape::Sinusoid {
                period: 250,
                amplitude: 0.3,
            },
            noise_std: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimConfig {
    /// Seed for everything that varies between runs on the same world:
    /// arrival noise, exploration, replay sampling, clustering.
    pub seed: u64,
    /// Seed for the topology, catalog and base rates. The nested `seed`
    /// fields of `topology` and `catalog` are derived from it.
    pub world_seed: u64,
    pub topology: RandomTopology,
    pub catalog: SyntheticCatalog,
    pub workload: WorkloadConfig,
    pub slots_per_frame: u32,
    pub frames_per_episode: u32,
    pub cell_budget: u32,
    pub epsilon: f64,
    pub scalars: CellScalars,
    /// Lower bound applied to each action component before sizing a cell.
    pub min_cell_fraction: f64,
    pub solve_mode: SolveMode,
    pub training: TrainConfig,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            world_seed: 1,
            topology: RandomTopology::default(),
            catalog: SyntheticCatalog::default(),
            workload: WorkloadConfig::default(),
            slots_per_frame: 100,
            frames_per_episode: 10,
            cell_budget: 6,
            epsilon: 1.5,
            scalars: CellScalars::default(),
            min_cell_fraction: 0.05,
            solve_mode: SolveMode::Parallel,
            training: TrainConfig::default(),
        }
    }
}

impl SimConfig {
    /// Small scenario used for learning checks: 3 nodes, 2 channels, demand
    /// close to what full-size cells can serve.
    pub fn reference_tiny() -> Self {
        Self {
            topology: RandomTopology {
                node_count: 3,
                degree_cap: 2,
                cpu_range: (3.0, 4.0),
                ..RandomTopology::default()
            },
            catalog: SyntheticCatalog {
                levels: 2,
                services_per_level: (2, 2),
                ..SyntheticCatalog::default()
            },
            workload: WorkloadConfig {
                rate_range: (8.0, 16.0),
                shape: RateShape::Constant,
                noise_std: 1.0,
            },
            slots_per_frame: 10,
            frames_per_episode: 5,
            cell_budget: 2,
            ..Self::default()
        }
    }

    pub fn channels(&self) -> usize {
        self.catalog.levels as usize
    }

    pub fn validate(&self) -> Result<(), EngineError> {
        let bad = |m: &str| Err(EngineError::Config(m.to_string()));
        if !(self.epsilon.is_finite() && self.epsilon >= 0.0) {
            return bad("epsilon must be finite and >= 0");
        }
        if !(self.scalars.alpha > 0.0 && self.scalars.beta > 0.0) {
            return bad("alpha and beta must be positive");
        }
        if self.slots_per_frame == 0 || self.frames_per_episode == 0 || self.cell_budget == 0 {
            return bad("slots_per_frame, frames_per_episode and cell_budget must be positive");
        }
        if self.catalog.levels == 0 {
            return bad("need at least one sla level");
        }
        if self.topology.node_count < self.channels() {
            return bad("need at least as many nodes as channels");
        }
        if !(self.min_cell_fraction > 0.0 && self.min_cell_fraction <= 1.0) {
            return bad("min_cell_fraction must lie in (0, 1]");
        }
        let (lo, hi) = self.workload.rate_range;
        if !(lo >= 0.0 && hi >= lo && hi.is_finite()) {
            return bad("rate_range must be a finite non-negative interval");
        }
        let t = &self.training;
        if !(t.learning_rate > 0.0 && (0.0..=1.0).contains(&t.gamma) && (0.0..=1.0).contains(&t.tau_soft)) {
            return bad("training rates out of range");
        }
        if t.batch_size == 0 || t.buffer_capacity < t.batch_size || t.hidden == 0 {
            return bad("training sizes out of range");
        }
        Ok(())
    }
}

/// Static part of a simulation: cluster, catalog and arrival process.
#[derive(Debug, Clone)]
pub struct World {
    pub graph: ClusterGraph,
    pub catalog: SlaCatalog,
    pub pattern: RatePattern,
    /// Largest number of services on one level.
    pub services_per_level: usize,
    demand_scale: f64,
    profile_scale: [f64; 3],
}

impl World {
    pub fn build(cfg: &SimConfig) -> Result<Self, EngineError> {
        cfg.validate()?;
        let topology = RandomTopology {
            seed: derive_seed(cfg.world_seed, 1),
            ..cfg.topology.clone()
        };
        let catalog = SyntheticCatalog {
            seed: derive_seed(cfg.world_seed, 2),
            ..cfg.catalog.clone()
        };
        let graph = topology.generate()?;
        let catalog = catalog.generate()?;
        let rates = synthetic_base_rates(&catalog, &graph, cfg.workload.rate_range, derive_seed(cfg.world_seed, 3));
        let pattern = RatePattern {
            base_rates: rates,
            shape: cfg.workload.shape.clone(),
            noise_std: cfg.workload.noise_std,
            seed: derive_seed(cfg.seed, 4),
        };
        pattern.validate()?;
        Ok(Self::from_parts(graph, catalog, pattern))
    }

    pub fn from_parts(graph: ClusterGraph, catalog: SlaCatalog, pattern: RatePattern) -> Self {
        let services_per_level = (1..=catalog.channel_count_p)
            .map(|p| catalog.services_at(p).count())
            .max()
            .unwrap_or(0);
        let peak = match &pattern.shape {
            RateShape::Trace { slots } => slots.iter().flat_map(|s| s.values()).fold(0.0, |a: f64, b| a.max(*b)),
            RateShape::Sinusoid { amplitude, .. } => {
                pattern.base_rates.values().fold(0.0, |a: f64, b| a.max(*b)) * (1.0 + amplitude)
            }
            RateShape::Constant => pattern.base_rates.values().fold(0.0, |a: f64, b| a.max(*b)),
        };
        let fmax = |f: fn(&crate::domain::ServiceClass) -> f64| {
            catalog.services.iter().map(f).fold(0.0, f64::max).max(f64::MIN_POSITIVE)
        };
        let profile_scale = [fmax(|s| s.memory_r), fmax(|s| s.compute_w), fmax(|s| s.max_response_t)];
        let demand_scale = (peak + 3.0 * pattern.noise_std).max(f64::MIN_POSITIVE);
        Self {
            graph,
            catalog,
            pattern,
            services_per_level,
            demand_scale,
            profile_scale,
        }
    }
}

/// Length of one agent's local state.
pub fn state_dim(levels: usize, services_per_level: usize, cell_budget: usize, degree_cap: usize) -> usize {
    levels * services_per_level * 5 + cell_budget * 3 + (degree_cap + 1) * 2
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlotResult {
    pub slot: u64,
    /// Served requests per channel, in channel-id order.
    pub psi: Vec<f64>,
    pub offered: f64,
    /// (served, offered) per demand key.
    pub per_key: BTreeMap<DemandKey, (f64, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameResult {
    pub frame: u64,
    pub episode_frame: u32,
    pub cells_created: Vec<CellId>,
    pub cells_retired: Vec<CellId>,
    pub channels: Vec<ResourceChannel>,
    /// Whether every member cell of each channel is horizontal.
    pub horizontal: Vec<bool>,
    pub sets: Vec<OrchestrationSet>,
    pub slots: Vec<SlotResult>,
    pub rewards: Vec<f64>,
}

impl FrameResult {
    pub fn offered(&self) -> f64 {
        self.slots.iter().map(|s| s.offered).sum()
    }

    pub fn served(&self) -> f64 {
        self.slots.iter().flat_map(|s| &s.psi).sum()
    }

    /// Served requests per channel over the frame.
    pub fn channel_served(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.channels.len()];
        for s in &self.slots {
            for (o, v) in out.iter_mut().zip(&s.psi) {
                *o += v;
            }
        }
        out
    }

    /// Served/offered, or 1.0 with `true` when nothing was offered.
    pub fn throughput_rate(&self) -> (f64, bool) {
        rate(self.served(), self.offered())
    }
}

fn rate(served: f64, offered: f64) -> (f64, bool) {
    if offered > 0.0 {
        ((served / offered).clamp(0.0, 1.0), false)
    } else {
        (1.0, true)
    }
}

/// Per-agent reward `Σ_p δ_p Σ_l served/offered` for the agent's node,
/// with `served/offered = 0` when nothing was offered.
pub fn compute_reward(
    totals: &BTreeMap<DemandKey, (f64, f64)>,
    level_delta: &BTreeMap<u32, f64>,
    nodes: &[NodeId],
) -> Vec<f64> {
    nodes
        .iter()
        .map(|&n| {
            totals
                .iter()
                .filter(|(k, _)| k.node == n)
                .map(|(k, (served, offered))| {
                    let d = level_delta.get(&k.service.sla_level).copied().unwrap_or(0.0);
                    if *offered > 0.0 {
                        d * served / offered
                    } else {
                        0.0
                    }
                })
                .sum()
        })
        .collect()
}

/// Checks ledger conservation, cell accounting and every plan against its
/// channel. Returns human-readable violations.
pub fn audit_invariants<'a>(
    ledger: &CapacityLedger,
    live: impl IntoIterator<Item = &'a ResourceCell> + Clone,
    plans: &[(&ChannelInstance, &OrchestrationSet, &DemandTensor, &DispatchPlan)],
) -> Vec<String> {
    let mut out: Vec<String> = ledger
        .conservation_violations(live.clone())
        .into_iter()
        .map(|(n, r)| format!("capacity conservation at node {n}: residual {r:e}"))
        .collect();
    for cell in live {
        let r = cell.accounting_residual();
        if r > crate::cellspace::ACCOUNTING_TOL * cell.cpu_wpm.max(cell.mem_rpm).max(1.0) {
            out.push(format!("cell {} backing mismatch {r:e}", cell.cell_id));
        }
    }
    out.extend(plan_violations(plans));
    out
}

fn plan_violations(plans: &[(&ChannelInstance, &OrchestrationSet, &DemandTensor, &DispatchPlan)]) -> Vec<String> {
    plans
        .iter()
        .flat_map(|(inst, set, demand, plan)| audit_plan(inst, set, demand, plan))
        .map(|v| format!("channel {} {}: {} ({:e})", v.channel, v.constraint, v.detail, v.residual))
        .collect()
}

/// Mutable simulation state.
#[derive(Debug, Clone)]
pub struct Simulator {
    pub config: SimConfig,
    pub world: World,
    ledger: CapacityLedger,
    cells: BTreeMap<NodeId, VecDeque<ResourceCell>>,
    next_cell: CellId,
    episode: u64,
    episode_frame: u32,
    predicted: DemandTensor,
}

impl Simulator {
    pub fn new(config: SimConfig) -> Result<Self, EngineError> {
        let world = World::build(&config)?;
        Ok(Self::with_world(config, world))
    }

    pub fn with_world(config: SimConfig, world: World) -> Self {
        let ledger = CapacityLedger::new(&world.graph);
        let predicted = base_rate_tensor(&world.pattern);
        let cells = world.graph.node_ids().map(|n| (n, VecDeque::new())).collect();
        Self {
            config,
            world,
            ledger,
            cells,
            next_cell: 0,
            episode: 0,
            episode_frame: 0,
            predicted,
        }
    }

    pub fn num_agents(&self) -> usize {
        self.world.graph.len()
    }

    pub fn state_dim(&self) -> usize {
        state_dim(
            self.config.channels(),
            self.world.services_per_level,
            self.config.cell_budget as usize,
            self.world.graph.degree_cap(),
        )
    }

    pub fn ledger(&self) -> &CapacityLedger {
        &self.ledger
    }

    pub fn live_cells(&self) -> impl Iterator<Item = &ResourceCell> + Clone {
        self.cells.values().flatten()
    }

    /// Clears cells and restores every node's capacity.
    pub fn reset(&mut self, episode: u64) {
        self.ledger = CapacityLedger::new(&self.world.graph);
        for q in self.cells.values_mut() {
            q.clear();
        }
        self.next_cell = 0;
        self.episode = episode;
        self.episode_frame = 0;
        self.predicted = base_rate_tensor(&self.world.pattern);
    }

    pub fn episode_done(&self) -> bool {
        self.episode_frame >= self.config.frames_per_episode
    }

    fn global_frame(&self) -> u64 {
        self.episode * self.config.frames_per_episode as u64 + self.episode_frame as u64
    }

    /// Local states of every agent, in node order. Entries lie in [0, 1].
    pub fn observe(&self) -> Vec<Vec<f64>> {
        let g = &self.world.graph;
        let cat = &self.world.catalog;
        let lmax = self.world.services_per_level;
        let [rs, ws, ts] = self.world.profile_scale;
        g.node_ids()
            .map(|node| {
                let mut s = Vec::with_capacity(self.state_dim());
                for p in 1..=cat.channel_count_p {
                    let services: Vec<_> = cat.services_at(p).collect();
                    for l in 0..lmax {
                        match services.get(l) {
                            Some(sv) => {
                                let lam = self.predicted.rate(sv.key(), node) / self.world.demand_scale;
                                s.push(lam.clamp(0.0, 1.0));
                                s.push(sv.memory_r / rs);
                                s.push(sv.compute_w / ws);
                                s.push(sv.max_response_t / ts);
                                s.push((sv.exec_time_o / ts).min(1.0));
                            }
                            None => s.extend([0.0; 5]),
                        }
                    }
                }
                let own = &self.cells[&node];
                for k in 0..self.config.cell_budget as usize {
                    match own.get(k) {
                        Some(c) => {
                            let ch = characteristics(c, self.config.scalars, 1.0);
                            s.extend([ch.w_norm.min(1.0), ch.r_norm.min(1.0), ch.u_edge]);
                        }
                        None => s.extend([0.0; 3]),
                    }
                }
                let hood = g.neighborhood(node).expect("node from graph");
                let mut order = vec![node];
                order.extend(hood.into_iter().filter(|n| *n != node));
                for k in 0..=g.degree_cap() {
                    match order.get(k) {
                        Some(n) => {
                            let (fc, fm) = self.ledger.free(*n);
                            let (ic, im) = self.ledger.initial(*n);
                            s.push((fc / ic).clamp(0.0, 1.0));
                            s.push((fm / im).clamp(0.0, 1.0));
                        }
                        None => s.extend([0.0; 2]),
                    }
                }
                s
            })
            .collect()
    }

    /// Runs one frame with one action per node (node order).
    pub fn run_frame(&mut self, actions: &[[f64; ACTION_DIM]]) -> Result<FrameResult, EngineError> {
        let nodes: Vec<NodeId> = self.world.graph.node_ids().collect();
        if actions.len() != nodes.len() {
            return Err(EngineError::Config(format!(
                "{} actions for {} agents",
                actions.len(),
                nodes.len()
            )));
        }
        let frame = self.global_frame();
        let cfg = self.config.clone();

        // Retire the oldest cell where the budget is full, then realize.
        let mut retired = Vec::new();
        for node in &nodes {
            let q = self.cells.get_mut(node).expect("node queue");
            while q.len() >= cfg.cell_budget as usize {
                let old = q.pop_front().expect("non-empty");
                self.ledger.release(&old);
                retired.push(old.cell_id);
            }
        }
        let mut created = Vec::new();
        for (node, a) in nodes.iter().zip(actions) {
            if a.iter().any(|v| !v.is_finite()) {
                return Err(EngineError::Config(format!("non-finite action {a:?}")));
            }
            let sized = a.map(|v| v.clamp(0.0, 1.0).max(cfg.min_cell_fraction));
            let cell = realize_cell(
                &self.world.graph,
                &mut self.ledger,
                *node,
                (sized[0], sized[1]),
                cfg.scalars,
                self.next_cell,
                frame,
            )?;
            created.push(cell.cell_id);
            self.next_cell += 1;
            self.cells.get_mut(node).expect("node queue").push_back(cell);
        }

        // Channels and their service levels.
        let live: BTreeMap<CellId, &ResourceCell> = self.live_cells().map(|c| (c.cell_id, c)).collect();
        let chars: Vec<_> = live
            .values()
            .map(|c| (c.cell_id, characteristics(c, cfg.scalars, cfg.epsilon)))
            .collect();
        let channels = cluster_channels(&chars, cfg.channels(), derive_seed(cfg.seed, 1000 + frame))?;
        let mut channels = assign_service_levels(channels, &self.world.catalog)?;
        channels.sort_by_key(|c| c.channel_id);
        let horizontal: Vec<bool> = channels
            .iter()
            .map(|c| !c.member_cells.is_empty() && c.member_cells.iter().all(|id| live[id].is_horizontal()))
            .collect();
        let level_delta: BTreeMap<u32, f64> = channels
            .iter()
            .map(|c| (c.service_level.expect("assigned"), c.priority_delta))
            .collect();

        let instances = channels
            .iter()
            .map(|c| {
                let level = c.service_level.expect("assigned");
                let services = self.world.catalog.services_at(level).cloned().collect();
                let cells = c.member_cells.iter().map(|id| live[id].clone()).collect();
                ChannelInstance::new(c.channel_id, services, cells, &self.world.graph)
            })
            .collect::<Result<Vec<_>, _>>()?;

        let (solutions, _) = solve_all_channels(&instances, &self.predicted, cfg.solve_mode)?;
        let sets: Vec<OrchestrationSet> = solutions.into_iter().map(|s| s.set).collect();

        let mut slots = Vec::with_capacity(cfg.slots_per_frame as usize);
        let mut arrivals = Vec::with_capacity(cfg.slots_per_frame as usize);
        let mut totals: BTreeMap<DemandKey, (f64, f64)> = BTreeMap::new();
        let mut violations = Vec::new();
        for t in 0..cfg.slots_per_frame as u64 {
            let slot = frame * cfg.slots_per_frame as u64 + t;
            let demand = slot_arrivals(&self.world.pattern, slot);
            let solve = |k: usize| dispatch_slot(&instances[k], &sets[k], &demand);
            let plans: Vec<DispatchPlan> = match cfg.solve_mode {
                SolveMode::Parallel => (0..instances.len()).into_par_iter().map(solve).collect::<Result<_, _>>()?,
                SolveMode::Sequential => (0..instances.len()).map(solve).collect::<Result<_, _>>()?,
            };

            let checks: Vec<_> = instances
                .iter()
                .zip(&sets)
                .zip(&plans)
                .map(|((i, s), p)| (i, s, &demand, p))
                .collect();
            violations.extend(plan_violations(&checks));

            let mut per_key: BTreeMap<DemandKey, (f64, f64)> =
                demand.iter().map(|(k, v)| (*k, (0.0, *v))).collect();
            let mut psi = Vec::with_capacity(plans.len());
            for plan in &plans {
                let mut served_here = BTreeMap::<DemandKey, f64>::new();
                for (k, y) in &plan.y {
                    let key = DemandKey {
                        service: k.service,
                        node: k.node,
                    };
                    *served_here.entry(key).or_insert(0.0) += demand.get(&key) * y;
                }
                let mut total = 0.0;
                for (key, s) in served_here {
                    let entry = per_key.entry(key).or_insert((0.0, 0.0));
                    let s = s.min(entry.1 - entry.0).max(0.0);
                    entry.0 += s;
                    total += s;
                }
                psi.push(total);
            }
            for (k, (s, o)) in &per_key {
                let e = totals.entry(*k).or_insert((0.0, 0.0));
                e.0 += s;
                e.1 += o;
            }
            slots.push(SlotResult {
                slot,
                psi,
                offered: demand.total(),
                per_key,
            });
            arrivals.push(demand);
        }

        violations.extend(audit_invariants(&self.ledger, self.live_cells(), &[]));
        if !violations.is_empty() {
            let dump = serde_json::json!({ "channels": channels, "sets": sets }).to_string();
            return Err(EngineError::Audit {
                frame,
                violations,
                dump,
            });
        }

        let rewards = compute_reward(&totals, &level_delta, &nodes);
        self.predicted = frame_average(&arrivals)?;
        let result = FrameResult {
            frame,
            episode_frame: self.episode_frame,
            cells_created: created,
            cells_retired: retired,
            channels,
            horizontal,
            sets,
            slots,
            rewards,
        };
        self.episode_frame += 1;
        Ok(result)
    }

    /// Observes, asks `policy` for every agent's action, and runs a frame.
    pub fn run_frame_with(&mut self, policy: &mut dyn Policy) -> Result<FrameResult, EngineError> {
        let states = self.observe();
        let actions: Vec<[f64; ACTION_DIM]> = states
            .iter()
            .enumerate()
            .map(|(i, s)| policy.act(i, s))
            .collect();
        self.run_frame(&actions)
    }
}

/// One row of the per-episode metrics file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeMetrics {
    pub episode: u64,
    /// Global index of the episode's last frame.
    pub frame: u64,
    pub reward_mean: f64,
    pub throughput_rate: f64,
    /// True when nothing was offered and the rate defaulted to 1.
    pub vacuous: bool,
    /// Served requests per channel id over total offered.
    pub shares: Vec<f64>,
    /// Served on all-horizontal channels over total offered.
    pub horizontal_share: f64,
    /// Requests offered but dispatched nowhere.
    pub violations: f64,
    pub wall_ms: f64,
}

#[derive(Debug, Clone)]
struct EpisodeAccumulator {
    started: Instant,
    reward: f64,
    frames: u64,
    last_frame: u64,
    offered: f64,
    served: f64,
    channel: Vec<f64>,
    horizontal: f64,
}

impl EpisodeAccumulator {
    fn new(channels: usize) -> Self {
        Self {
            started: Instant::now(),
            reward: 0.0,
            frames: 0,
            last_frame: 0,
            offered: 0.0,
            served: 0.0,
            channel: vec![0.0; channels],
            horizontal: 0.0,
        }
    }

    fn add(&mut self, f: &FrameResult) {
        self.reward += f.rewards.iter().sum::<f64>() / f.rewards.len().max(1) as f64;
        self.frames += 1;
        self.last_frame = f.frame;
        self.offered += f.offered();
        let per = f.channel_served();
        self.served += per.iter().sum::<f64>();
        for (ch, v) in f.channels.iter().zip(&per) {
            if let Some(slot) = self.channel.get_mut(ch.channel_id as usize - 1) {
                *slot += v;
            }
        }
        self.horizontal += per.iter().zip(&f.horizontal).filter(|(_, h)| **h).map(|(v, _)| v).sum::<f64>();
    }

    fn finish(self, episode: u64) -> EpisodeMetrics {
        let (throughput_rate, vacuous) = rate(self.served, self.offered);
        let share = |v: f64| if self.offered > 0.0 { v / self.offered } else { 0.0 };
        EpisodeMetrics {
            episode,
            frame: self.last_frame,
            reward_mean: self.reward / self.frames.max(1) as f64,
            throughput_rate,
            vacuous,
            shares: self.channel.iter().map(|v| share(*v)).collect(),
            horizontal_share: share(self.horizontal),
            violations: (self.offered - self.served).max(0.0),
            wall_ms: self.started.elapsed().as_secs_f64() * 1e3,
        }
    }
}

/// Header line of the metrics CSV for `channels` channels.
pub fn metrics_header(channels: usize) -> String {
    let mut h = String::from("episode,frame,reward_mean,throughput_rate");
    for p in 1..=channels {
        let _ = write!(h, ",share_ch{p}");
    }
    h.push_str(",violations,wall_ms");
    h
}

/// Metrics rows as CSV text, optionally preceded by `# key: value` lines.
pub fn metrics_csv(rows: &[EpisodeMetrics], channels: usize, comments: &[(&str, String)]) -> String {
    let mut out = String::new();
    for (k, v) in comments {
        let _ = writeln!(out, "# {k}: {v}");
    }
    out.push_str(&metrics_header(channels));
    out.push('\n');
    for r in rows {
        let _ = write!(out, "{},{},{},{}", r.episode, r.frame, r.reward_mean, r.throughput_rate);
        for s in &r.shares {
            let _ = write!(out, ",{s}");
        }
        let _ = writeln!(out, ",{},{}", r.violations, r.wall_ms);
    }
    out
}

/// Simulator wrapped as a training environment that also records
/// per-episode metrics.
#[derive(Debug, Clone)]
pub struct EdgeEnv {
    pub sim: Simulator,
    pub metrics: Vec<EpisodeMetrics>,
    current: Option<(u64, EpisodeAccumulator)>,
}

impl EdgeEnv {
    pub fn new(sim: Simulator) -> Self {
        Self {
            sim,
            metrics: Vec::new(),
            current: None,
        }
    }

    fn close_episode(&mut self) {
        if let Some((ep, acc)) = self.current.take() {
            self.metrics.push(acc.finish(ep));
        }
    }
}

impl MultiAgentEnv for EdgeEnv {
    fn num_agents(&self) -> usize {
        self.sim.num_agents()
    }

    fn state_dim(&self) -> usize {
        self.sim.state_dim()
    }

    fn reset(&mut self, episode: u64) -> Result<Vec<Vec<f64>>, NmacError> {
        self.close_episode();
        self.sim.reset(episode);
        self.current = Some((episode, EpisodeAccumulator::new(self.sim.config.channels())));
        Ok(self.sim.observe())
    }

    fn step(&mut self, actions: &[[f64; ACTION_DIM]]) -> Result<EnvStep, NmacError> {
        let f = self.sim.run_frame(actions).map_err(|e| NmacError::Env(e.to_string()))?;
        if let Some((_, acc)) = self.current.as_mut() {
            acc.add(&f);
        }
        let done = self.sim.episode_done();
        let step = EnvStep {
            states: self.sim.observe(),
            rewards: f.rewards,
            done,
        };
        if done {
            self.close_episode();
        }
        Ok(step)
    }
}

/// Frozen-policy episodes.
pub fn evaluate(
    config: &SimConfig,
    policy: &mut dyn Policy,
    episodes: u64,
) -> Result<Vec<EpisodeMetrics>, EngineError> {
    let mut sim = Simulator::new(config.clone())?;
    let mut out = Vec::with_capacity(episodes as usize);
    for ep in 0..episodes {
        sim.reset(ep);
        let mut acc = EpisodeAccumulator::new(config.channels());
        while !sim.episode_done() {
            acc.add(&sim.run_frame_with(policy)?);
        }
        out.push(acc.finish(ep));
    }
    Ok(out)
}

/// Trains agents offline and returns them with per-episode metrics.
pub fn train(config: &SimConfig, episodes: u64) -> Result<(Nmac, Vec<EpisodeMetrics>), EngineError> {
    train_with(config, episodes, |_, _| Ok(()))
}

/// [`train`] with a hook called after every episode.
pub fn train_with(
    config: &SimConfig,
    episodes: u64,
    on_episode: impl FnMut(u64, &Nmac) -> Result<(), NmacError>,
) -> Result<(Nmac, Vec<EpisodeMetrics>), EngineError> {
    let mut env = EdgeEnv::new(Simulator::new(config.clone())?);
    let (nmac, _) = nmac::train_offline_with(
        &mut env,
        config.training.clone(),
        episodes,
        derive_seed(config.seed, 5),
        on_episode,
    )?;
    env.close_episode();
    Ok((nmac, env.metrics))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunMode {
    Train,
    Eval,
}

/// Result of [`run_experiment`].
pub struct Experiment {
    pub metrics: Vec<EpisodeMetrics>,
    pub trained: Option<Nmac>,
}

/// Runs training, or evaluation with `policy`.
pub fn run_experiment(
    config: &SimConfig,
    mode: RunMode,
    episodes: u64,
    policy: Option<&mut dyn Policy>,
) -> Result<Experiment, EngineError> {
    match (mode, policy) {
        (RunMode::Train, _) => {
            let (nmac, metrics) = train(config, episodes)?;
            Ok(Experiment {
                metrics,
                trained: Some(nmac),
            })
        }
        (RunMode::Eval, Some(p)) => Ok(Experiment {
            metrics: evaluate(config, p, episodes)?,
            trained: None,
        }),
        (RunMode::Eval, None) => Err(EngineError::Config("eval needs a policy".into())),
    }
}

/// Size of a benchmark instance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BenchSpec {
    pub nodes: usize,
    pub services: usize,
    pub channels: usize,
    pub cells: usize,
    pub seed: u64,
}

impl Default for BenchSpec {
    fn default() -> Self {
        Self {
            nodes: 10,
            services: 18,
            channels: 6,
            cells: 36,
            seed: 1,
        }
    }
}

/// Channelized instances, the merged instance and frame demand.
pub struct BenchInstance {
    pub channels: Vec<ChannelInstance>,
    pub merged: ChannelInstance,
    pub demand: DemandTensor,
}

/// Builds a seeded instance: a random cluster, `services` spread evenly
/// over `channels` levels, `cells` cells of random size anchored round
/// robin, clustered into channels with the default ε.
pub fn bench_instance(spec: BenchSpec, base: &SimConfig) -> Result<BenchInstance, EngineError> {
    if spec.channels == 0 || spec.services < spec.channels || spec.cells < spec.channels || spec.nodes == 0 {
        return Err(EngineError::Config(
            "bench needs nodes >= 1 and services, cells >= channels >= 1".into(),
        ));
    }
    let graph = RandomTopology {
        node_count: spec.nodes,
        seed: derive_seed(spec.seed, 11),
        ..base.topology.clone()
    }
    .generate()?;
    let per = spec.services.div_ceil(spec.channels) as u32;
    let mut catalog = SyntheticCatalog {
        levels: spec.channels as u32,
        services_per_level: (per, per),
        seed: derive_seed(spec.seed, 12),
        ..base.catalog.clone()
    }
    .generate()?;
    // Drop surplus services from the highest levels so exactly `services` remain.
    let mut surplus = per as usize * spec.channels - spec.services;
    let mut level = spec.channels as u32;
    while surplus > 0 {
        if let Some(pos) = catalog.services.iter().rposition(|s| s.sla_level == level) {
            catalog.services.remove(pos);
            surplus -= 1;
        }
        level = if level == 1 { spec.channels as u32 } else { level - 1 };
    }

    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, 13));
    let mut ledger = CapacityLedger::new(&graph);
    let nodes: Vec<NodeId> = graph.node_ids().collect();
    let mut cells = Vec::with_capacity(spec.cells);
    for m in 0..spec.cells {
        let a = (rng.gen_range(0.3..=1.0), rng.gen_range(0.3..=1.0));
        cells.push(realize_cell(
            &graph,
            &mut ledger,
            nodes[m % nodes.len()],
            a,
            base.scalars,
            m as CellId,
            0,
        )?);
    }
    let chars: Vec<_> = cells
        .iter()
        .map(|c| (c.cell_id, characteristics(c, base.scalars, base.epsilon)))
        .collect();
    let channels = assign_service_levels(
        cluster_channels(&chars, spec.channels, derive_seed(spec.seed, 14))?,
        &catalog,
    )?;
    let rates = synthetic_base_rates(&catalog, &graph, base.workload.rate_range, derive_seed(spec.seed, 15));
    let demand = DemandTensor::from_counts(rates, DemandScope::FrameAverage)
        .map_err(|e| EngineError::Config(e.to_string()))?;
    let mut instances = channels
        .iter()
        .map(|c| {
            let level = c.service_level.expect("assigned");
            let svcs = catalog.services_at(level).cloned().collect();
            let members = c.member_cells.iter().map(|id| cells[*id as usize].clone()).collect();
            ChannelInstance::new(c.channel_id, svcs, members, &graph)
        })
        .collect::<Result<Vec<_>, _>>()?;
    instances.sort_by_key(|c| c.channel_id);
    let merged = jsord::monolithic_instance(&instances, &graph)?;
    Ok(BenchInstance {
        channels: instances,
        merged,
        demand,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub mode: String,
    pub nodes: usize,
    pub services: usize,
    pub cells: usize,
    pub channels: usize,
    pub wall_ms: f64,
    pub psi: f64,
}

/// Times channelized (parallel) and monolithic orchestration on one
/// instance. Returns the channelized row first.
pub fn run_bench(spec: BenchSpec, base: &SimConfig) -> Result<[BenchRow; 2], EngineError> {
    let inst = bench_instance(spec, base)?;
    let (sol, wall) = solve_all_channels(&inst.channels, &inst.demand, SolveMode::Parallel)?;
    let psi_c: f64 = sol.iter().map(|s| s.plan.throughput_psi).sum();
    let (mono, wall_m) = jsord::monolithic_jsord(&inst.merged, &inst.demand)?;
    let row = |mode: &str, wall: std::time::Duration, psi: f64| BenchRow {
        mode: mode.to_string(),
        nodes: spec.nodes,
        services: spec.services,
        cells: spec.cells,
        channels: spec.channels,
        wall_ms: wall.as_secs_f64() * 1e3,
        psi,
    };
    Ok([
        row("channelized", wall, psi_c),
        row("monolithic", wall_m, mono.plan.throughput_psi),
    ])
}
