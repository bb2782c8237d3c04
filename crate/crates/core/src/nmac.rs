//! Networked multi-agent actor-critic.
//!
//! Each edge node runs a deterministic actor that maps its local state to a
//! cell-size action in `[0, 1]²`. Each agent also owns a critic. Critics
//! are centralized (they see the global state and joint action) unless
//! [`CriticMode::Independent`] is chosen. Training is offline and
//! single-threaded. Execution reads only local states.

pub mod mlp;

use std::path::Path;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use mlp::{Activation, Mlp};

pub const ACTION_DIM: usize = 2;
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum NmacError {
    #[error("critic loss is not finite ({loss}); batch: {batch}")]
    NonFiniteLoss { loss: f64, batch: String },
    #[error("actor gradient for agent {0} is not finite")]
    NonFiniteGradient(usize),
    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: String, got: String },
    #[error("unsupported checkpoint version {0}")]
    CheckpointVersion(u32),
    #[error("checkpoint io: {0}")]
    Io(String),
    #[error("environment: {0}")]
    Env(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CriticMode {
    Centralized,
    Independent,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub gamma: f64,
    pub learning_rate: f64,
    pub tau_soft: f64,
    pub buffer_capacity: usize,
    pub batch_size: usize,
    /// Leading episodes that only collect data with uniform actions.
    pub random_episodes: u64,
    pub noise_start: f64,
    pub noise_end: f64,
    pub update_rate: u64,
    pub hidden: usize,
    pub critic_mode: CriticMode,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            gamma: 0.95,
            learning_rate: 0.01,
            tau_soft: 0.01,
            buffer_capacity: 100_000,
            batch_size: 64,
            random_episodes: 100,
            noise_start: 0.3,
            noise_end: 0.01,
            update_rate: 1,
            hidden: 64,
            critic_mode: CriticMode::Centralized,
        }
    }
}

impl TrainConfig {
    /// Exploration noise for a learning episode, decaying linearly from
    /// `noise_start` to `noise_end` over the learning phase.
    pub fn noise_at(&self, episode: u64, episodes: u64) -> f64 {
        let learning = episodes.saturating_sub(self.random_episodes);
        if learning <= 1 {
            return self.noise_end;
        }
        let k = episode.saturating_sub(self.random_episodes) as f64 / (learning - 1) as f64;
        self.noise_start + (self.noise_end - self.noise_start) * k.min(1.0)
    }
}

/// One stored step: global state, joint action, per-agent rewards and the
/// following global state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub global_state: Vec<f64>,
    pub joint_action: Vec<[f64; ACTION_DIM]>,
    pub rewards: Vec<f64>,
    pub next_global_state: Vec<f64>,
    pub done: bool,
}

#[derive(Debug, Clone)]
pub struct ReplayBuffer {
    capacity: usize,
    items: Vec<Transition>,
    next: usize,
    rng: ChaCha8Rng,
}

impl ReplayBuffer {
    pub fn new(capacity: usize, seed: u64) -> Self {
        assert!(capacity > 0);
        Self {
            capacity,
            items: Vec::new(),
            next: 0,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Overwrites the oldest entry once full.
    pub fn push(&mut self, t: Transition) {
        if self.items.len() < self.capacity {
            self.items.push(t);
        } else {
            self.items[self.next] = t;
        }
        self.next = (self.next + 1) % self.capacity;
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// Uniform sample without replacement; `None` until `batch` entries exist.
    pub fn sample(&mut self, batch: usize) -> Option<Vec<&Transition>> {
        if batch == 0 || self.items.len() < batch {
            return None;
        }
        let picks = index::sample(&mut self.rng, self.items.len(), batch);
        Some(picks.iter().map(|k| &self.items[k]).collect())
    }
}

/// Actor output plus clamped Gaussian noise. No random draws when
/// `noise_std` is zero.
pub fn act(actor: &Mlp, state: &[f64], noise_std: f64, rng: &mut impl Rng) -> [f64; ACTION_DIM] {
    let out = actor.forward(state);
    let mut a = [out[0], out[1]];
    if noise_std > 0.0 {
        let n = Normal::new(0.0, noise_std).expect("finite std");
        for v in &mut a {
            *v += n.sample(rng);
        }
    }
    a.map(|v| v.clamp(0.0, 1.0))
}

/// Bellman target `r + γ Q′`, without bootstrap on terminal steps.
pub fn critic_target(reward: f64, gamma: f64, q_next: f64, terminal: bool) -> f64 {
    if terminal {
        reward
    } else {
        reward + gamma * q_next
    }
}

/// Mean squared error of `critic` against `targets` and its gradient.
pub fn critic_gradient(critic: &Mlp, inputs: &[Vec<f64>], targets: &[f64]) -> (f64, Mlp) {
    assert_eq!(inputs.len(), targets.len());
    let n = inputs.len() as f64;
    let mut grad = critic.zeros_like();
    let mut loss = 0.0;
    for (x, g) in inputs.iter().zip(targets) {
        let trace = critic.trace(x);
        let err = trace.output()[0] - g;
        loss += err * err / n;
        critic.backward(&trace, &[2.0 * err / n], &mut grad);
    }
    (loss, grad)
}

/// One gradient-descent step on the critic. Returns the loss before it.
pub fn update_critic(
    critic: &mut Mlp,
    inputs: &[Vec<f64>],
    targets: &[f64],
    learning_rate: f64,
) -> Result<f64, NmacError> {
    let (loss, grad) = critic_gradient(critic, inputs, targets);
    if !loss.is_finite() || !grad.is_finite() {
        return Err(NmacError::NonFiniteLoss {
            loss,
            batch: format!("{:?}", (inputs, targets)),
        });
    }
    critic.add_scaled(&grad, -learning_rate);
    Ok(loss)
}

/// `J = mean Q(x)` with the agent's action slots in `x` replaced by
/// `actor(state)`, and ∇_θ J.
pub fn actor_gradient(
    actor: &Mlp,
    critic: &Mlp,
    states: &[Vec<f64>],
    critic_inputs: &[Vec<f64>],
    action_offset: usize,
) -> (f64, Mlp) {
    assert_eq!(states.len(), critic_inputs.len());
    let n = states.len() as f64;
    let mut grad = actor.zeros_like();
    let mut scratch = critic.zeros_like();
    let mut objective = 0.0;
    for (s, x) in states.iter().zip(critic_inputs) {
        let a_trace = actor.trace(s);
        let mut x = x.clone();
        x[action_offset..action_offset + ACTION_DIM].copy_from_slice(a_trace.output());
        let q_trace = critic.trace(&x);
        objective += q_trace.output()[0] / n;
        let dx = critic.backward(&q_trace, &[1.0 / n], &mut scratch);
        actor.backward(&a_trace, &dx[action_offset..action_offset + ACTION_DIM], &mut grad);
    }
    (objective, grad)
}

/// One ascent step on the deterministic policy gradient.
pub fn update_actor(
    actor: &mut Mlp,
    critic: &Mlp,
    states: &[Vec<f64>],
    critic_inputs: &[Vec<f64>],
    action_offset: usize,
    learning_rate: f64,
) -> Result<f64, NmacError> {
    let (j, grad) = actor_gradient(actor, critic, states, critic_inputs, action_offset);
    if !grad.is_finite() {
        return Err(NmacError::NonFiniteGradient(action_offset));
    }
    actor.add_scaled(&grad, learning_rate);
    Ok(j)
}

pub fn soft_update(target: &mut Mlp, online: &Mlp, tau: f64) -> Result<(), NmacError> {
    if !target.same_shape(online) {
        return Err(NmacError::ShapeMismatch {
            expected: format!("{:?}", target.dims()),
            got: format!("{:?}", online.dims()),
        });
    }
    for (t, o) in target.layers.iter_mut().zip(&online.layers) {
        for (x, y) in t.w.iter_mut().zip(&o.w).chain(t.b.iter_mut().zip(&o.b)) {
            *x = (1.0 - tau) * *x + tau * y;
        }
    }
    Ok(())
}

/// Environment driven by one action per agent per step.
pub trait MultiAgentEnv {
    fn num_agents(&self) -> usize;
    fn state_dim(&self) -> usize;
    /// Starts an episode and returns every agent's local state.
    fn reset(&mut self, episode: u64) -> Result<Vec<Vec<f64>>, NmacError>;
    fn step(&mut self, actions: &[[f64; ACTION_DIM]]) -> Result<EnvStep, NmacError>;
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnvStep {
    pub states: Vec<Vec<f64>>,
    pub rewards: Vec<f64>,
    pub done: bool,
}

/// Maps an agent's local state to an action during execution.
pub trait Policy {
    fn act(&mut self, agent: usize, local_state: &[f64]) -> [f64; ACTION_DIM];
}

/// Learned actors, noise-free.
#[derive(Debug, Clone)]
pub struct ActorPolicy {
    pub actors: Vec<Mlp>,
}

impl Policy for ActorPolicy {
    fn act(&mut self, agent: usize, local_state: &[f64]) -> [f64; ACTION_DIM] {
        let out = self.actors[agent].forward(local_state);
        [out[0], out[1]]
    }
}

#[derive(Debug, Clone)]
pub struct RandomPolicy {
    rng: ChaCha8Rng,
}

impl RandomPolicy {
    pub fn new(seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }
}

impl Policy for RandomPolicy {
    fn act(&mut self, _agent: usize, _state: &[f64]) -> [f64; ACTION_DIM] {
        [self.rng.gen_range(0.0..=1.0), self.rng.gen_range(0.0..=1.0)]
    }
}

#[derive(Debug, Clone, Copy)]
pub struct StaticHalf;

impl Policy for StaticHalf {
    fn act(&mut self, _agent: usize, _state: &[f64]) -> [f64; ACTION_DIM] {
        [0.5, 0.5]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineKind {
    Random,
    StaticHalf,
    /// Trained like the main method but each critic sees only its own
    /// state and action.
    Independent,
}

impl std::str::FromStr for BaselineKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "random" => Ok(Self::Random),
            "static_half" => Ok(Self::StaticHalf),
            "independent" => Ok(Self::Independent),
            other => Err(format!("unknown baseline {other:?}")),
        }
    }
}

/// Fixed policies for the untrained baselines. The independent baseline
/// needs training with [`CriticMode::Independent`] and returns `None`.
pub fn baseline_policy(kind: BaselineKind, seed: u64) -> Option<Box<dyn Policy>> {
    match kind {
        BaselineKind::Random => Some(Box::new(RandomPolicy::new(seed))),
        BaselineKind::StaticHalf => Some(Box::new(StaticHalf)),
        BaselineKind::Independent => None,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Agent {
    pub actor: Mlp,
    pub actor_target: Mlp,
    pub critic: Mlp,
    pub critic_target: Mlp,
}

/// All agents plus their replay memory.
#[derive(Debug, Clone)]
pub struct Nmac {
    pub config: TrainConfig,
    pub agents: Vec<Agent>,
    pub state_dim: usize,
    buffer: ReplayBuffer,
}

pub fn critic_input_dim(mode: CriticMode, agents: usize, state_dim: usize) -> usize {
    match mode {
        CriticMode::Centralized => agents * (state_dim + ACTION_DIM),
        CriticMode::Independent => state_dim + ACTION_DIM,
    }
}

impl Nmac {
    pub fn new(agents: usize, state_dim: usize, config: TrainConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let h = config.hidden;
        let cin = critic_input_dim(config.critic_mode, agents, state_dim);
        let agents = (0..agents)
            .map(|_| {
                let actor = Mlp::new(&[state_dim, h, h, ACTION_DIM], Activation::Sigmoid, &mut rng);
                let critic = Mlp::new(&[cin, h, h, 1], Activation::Linear, &mut rng);
                Agent {
                    actor_target: actor.clone(),
                    critic_target: critic.clone(),
                    actor,
                    critic,
                }
            })
            .collect();
        let buffer = ReplayBuffer::new(config.buffer_capacity, rng.gen());
        Self {
            config,
            agents,
            state_dim,
            buffer,
        }
    }

    pub fn num_agents(&self) -> usize {
        self.agents.len()
    }

    pub fn buffer(&self) -> &ReplayBuffer {
        &self.buffer
    }

    pub fn remember(&mut self, t: Transition) {
        self.buffer.push(t);
    }

    /// Critic input for agent `i` and where its own action sits in it.
    pub fn critic_input(&self, i: usize, global: &[f64], actions: &[[f64; ACTION_DIM]]) -> (Vec<f64>, usize) {
        let d = self.state_dim;
        match self.config.critic_mode {
            CriticMode::Centralized => {
                let mut x = global.to_vec();
                x.extend(actions.iter().flatten());
                (x, self.agents.len() * d + ACTION_DIM * i)
            }
            CriticMode::Independent => {
                let mut x = global[i * d..(i + 1) * d].to_vec();
                x.extend_from_slice(&actions[i]);
                (x, d)
            }
        }
    }

    fn local<'a>(&self, global: &'a [f64], i: usize) -> &'a [f64] {
        &global[i * self.state_dim..(i + 1) * self.state_dim]
    }

    pub fn policy(&self) -> ActorPolicy {
        ActorPolicy {
            actors: self.agents.iter().map(|a| a.actor.clone()).collect(),
        }
    }

    /// One learning step for every agent from a sampled batch. Returns
    /// `false` when the buffer is still too small.
    pub fn learn(&mut self) -> Result<bool, NmacError> {
        let batch: Vec<Transition> = match self.buffer.sample(self.config.batch_size) {
            Some(b) => b.into_iter().cloned().collect(),
            None => return Ok(false),
        };
        let n = self.agents.len();
        // Target actions come from target actors on the next states.
        let next_actions: Vec<Vec<[f64; ACTION_DIM]>> = batch
            .iter()
            .map(|t| {
                (0..n)
                    .map(|j| {
                        let o = self.agents[j].actor_target.forward(self.local(&t.next_global_state, j));
                        [o[0], o[1]]
                    })
                    .collect()
            })
            .collect();
        for i in 0..n {
            let mut inputs = Vec::with_capacity(batch.len());
            let mut targets = Vec::with_capacity(batch.len());
            let mut states = Vec::with_capacity(batch.len());
            let mut offset = 0;
            for (t, na) in batch.iter().zip(&next_actions) {
                let (x, off) = self.critic_input(i, &t.global_state, &t.joint_action);
                let (xn, _) = self.critic_input(i, &t.next_global_state, na);
                let q_next = self.agents[i].critic_target.forward(&xn)[0];
                targets.push(critic_target(t.rewards[i], self.config.gamma, q_next, t.done));
                inputs.push(x);
                states.push(self.local(&t.global_state, i).to_vec());
                offset = off;
            }
            let lr = self.config.learning_rate;
            let agent = &mut self.agents[i];
            update_critic(&mut agent.critic, &inputs, &targets, lr)?;
            update_actor(&mut agent.actor, &agent.critic, &states, &inputs, offset, lr)
                .map_err(|_| NmacError::NonFiniteGradient(i))?;
            let tau = self.config.tau_soft;
            soft_update(&mut agent.critic_target, &agent.critic, tau)?;
            soft_update(&mut agent.actor_target, &agent.actor, tau)?;
        }
        Ok(true)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            version: CHECKPOINT_VERSION,
            num_agents: self.agents.len(),
            state_dim: self.state_dim,
            critic_mode: self.config.critic_mode,
            agents: self.agents.clone(),
        }
    }
}

/// Per-episode mean reward (over frames and agents).
pub type RewardLog = Vec<f64>;

/// Offline training loop. Episodes before `random_episodes` act uniformly
/// at random and only fill the buffer; later ones act with decaying
/// Gaussian noise and learn every `update_rate` steps.
pub fn train_offline<E: MultiAgentEnv>(
    env: &mut E,
    config: TrainConfig,
    episodes: u64,
    seed: u64,
) -> Result<(Nmac, RewardLog), NmacError> {
    train_offline_with(env, config, episodes, seed, |_, _| Ok(()))
}

/// [`train_offline`] with a hook called after every episode.
pub fn train_offline_with<E: MultiAgentEnv>(
    env: &mut E,
    config: TrainConfig,
    episodes: u64,
    seed: u64,
    mut on_episode: impl FnMut(u64, &Nmac) -> Result<(), NmacError>,
) -> Result<(Nmac, RewardLog), NmacError> {
    let n = env.num_agents();
    let d = env.state_dim();
    let mut nmac = Nmac::new(n, d, config, seed);
    let mut explore = ChaCha8Rng::seed_from_u64(seed ^ 0x0E7A_10DE);
    let mut log = Vec::with_capacity(episodes as usize);
    for ep in 0..episodes {
        let mut states = env.reset(ep)?;
        check_states(&states, n, d)?;
        let learning = ep >= nmac.config.random_episodes;
        let noise = nmac.config.noise_at(ep, episodes);
        let mut total = 0.0;
        let mut frames = 0u64;
        loop {
            let actions: Vec<[f64; ACTION_DIM]> = (0..n)
                .map(|i| {
                    if learning {
                        act(&nmac.agents[i].actor, &states[i], noise, &mut explore)
                    } else {
                        [explore.gen_range(0.0..=1.0), explore.gen_range(0.0..=1.0)]
                    }
                })
                .collect();
            let step = env.step(&actions)?;
            check_states(&step.states, n, d)?;
            total += step.rewards.iter().sum::<f64>() / n as f64;
            nmac.remember(Transition {
                global_state: states.concat(),
                joint_action: actions,
                rewards: step.rewards,
                next_global_state: step.states.concat(),
                done: step.done,
            });
            if learning && frames.is_multiple_of(nmac.config.update_rate.max(1)) {
                nmac.learn()?;
            }
            frames += 1;
            states = step.states;
            if step.done {
                break;
            }
        }
        log.push(total / frames as f64);
        on_episode(ep, &nmac)?;
    }
    Ok((nmac, log))
}

fn check_states(states: &[Vec<f64>], n: usize, d: usize) -> Result<(), NmacError> {
    if states.len() != n || states.iter().any(|s| s.len() != d) {
        return Err(NmacError::ShapeMismatch {
            expected: format!("{n} x {d}"),
            got: format!("{} x {:?}", states.len(), states.first().map(Vec::len)),
        });
    }
    Ok(())
}

/// Saved networks for every agent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub num_agents: usize,
    pub state_dim: usize,
    pub critic_mode: CriticMode,
    pub agents: Vec<Agent>,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<(), NmacError> {
        let text = serde_json::to_string(self).map_err(|e| NmacError::Io(e.to_string()))?;
        std::fs::write(path, text).map_err(|e| NmacError::Io(format!("{}: {e}", path.display())))
    }

    pub fn load(path: &Path) -> Result<Self, NmacError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| NmacError::Io(format!("{}: {e}", path.display())))?;
        let ck: Checkpoint = serde_json::from_str(&text).map_err(|e| NmacError::Io(e.to_string()))?;
        if ck.version != CHECKPOINT_VERSION {
            return Err(NmacError::CheckpointVersion(ck.version));
        }
        Ok(ck)
    }

    /// Actors for execution, after checking they fit the environment.
    pub fn policy_for(&self, agents: usize, state_dim: usize) -> Result<ActorPolicy, NmacError> {
        let fits = self.num_agents == agents
            && self.agents.len() == agents
            && self.state_dim == state_dim
            && self.agents.iter().all(|a| a.actor.input_dim() == state_dim);
        if !fits {
            return Err(NmacError::ShapeMismatch {
                expected: format!("{agents} agents x state {state_dim}"),
                got: format!("{} agents x state {}", self.num_agents, self.state_dim),
            });
        }
        Ok(ActorPolicy {
            actors: self.agents.iter().map(|a| a.actor.clone()).collect(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn act_is_deterministic_without_noise_and_clamped_with_it() {
        let mut r = rng(1);
        let actor = Mlp::new(&[5, 64, 64, 2], Activation::Sigmoid, &mut r);
        let s = vec![0.2, 0.4, 0.1, 0.9, 0.0];
        assert_eq!(act(&actor, &s, 0.0, &mut r), act(&actor, &s, 0.0, &mut r));
        let zero = Mlp::zeros(&[5, 64, 64, 2], Activation::Sigmoid);
        assert_eq!(act(&zero, &s, 0.0, &mut r), [0.5, 0.5]);
        for _ in 0..1000 {
            let a = act(&actor, &s, 10.0, &mut r);
            assert!(a.iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn bellman_target_arithmetic() {
        approx::assert_relative_eq!(critic_target(1.0, 0.95, 2.0, false), 2.9, epsilon = 1e-15);
        assert_eq!(critic_target(1.0, 0.0, 2.0, false), 1.0);
        assert_eq!(critic_target(1.0, 0.95, 2.0, true), 1.0);
    }

    #[test]
    fn critic_step_with_zero_error_changes_nothing() {
        let mut r = rng(2);
        let mut critic = Mlp::new(&[3, 8, 8, 1], Activation::Linear, &mut r);
        let x = vec![vec![0.1, 0.2, 0.3], vec![0.5, 0.1, 0.0]];
        let t: Vec<f64> = x.iter().map(|x| critic.forward(x)[0]).collect();
        let before = critic.clone();
        let loss = update_critic(&mut critic, &x, &t, 0.01).unwrap();
        assert_eq!(loss, 0.0);
        assert_eq!(critic, before);
    }

    #[test]
    fn single_layer_critic_matches_hand_gradient() {
        // Q = w·x + b, loss = (Q - g)², ∂/∂w = 2(Q - g) x.
        let mut critic = Mlp::zeros(&[2, 1], Activation::Linear);
        critic.layers[0].w = vec![0.5, -1.0];
        critic.layers[0].b = vec![0.25];
        let x = vec![vec![2.0, 1.0]];
        let q = 0.5 * 2.0 - 1.0 + 0.25;
        let g = 1.0;
        update_critic(&mut critic, &x, &[g], 0.1).unwrap();
        let e = 2.0 * (q - g);
        approx::assert_relative_eq!(critic.layers[0].w[0], 0.5 - 0.1 * e * 2.0, epsilon = 1e-15);
        approx::assert_relative_eq!(critic.layers[0].w[1], -1.0 - 0.1 * e, epsilon = 1e-15);
        approx::assert_relative_eq!(critic.layers[0].b[0], 0.25 - 0.1 * e, epsilon = 1e-15);
    }

    #[test]
    fn critic_loss_decreases_on_frozen_batch() {
        let mut r = rng(3);
        let mut critic = Mlp::new(&[4, 16, 16, 1], Activation::Linear, &mut r);
        let x: Vec<Vec<f64>> = (0..16).map(|_| (0..4).map(|_| r.gen_range(0.0..1.0)).collect()).collect();
        let t: Vec<f64> = x.iter().map(|v| v.iter().sum::<f64>()).collect();
        let mut last = f64::INFINITY;
        for _ in 0..50 {
            let loss = update_critic(&mut critic, &x, &t, 0.01).unwrap();
            assert!(loss < last, "{loss} >= {last}");
            last = loss;
        }
    }

    #[test]
    fn non_finite_loss_is_reported() {
        let mut critic = Mlp::zeros(&[1, 1], Activation::Linear);
        let err = update_critic(&mut critic, &[vec![1.0]], &[f64::NAN], 0.01).unwrap_err();
        assert!(matches!(err, NmacError::NonFiniteLoss { .. }));
    }

    #[test]
    fn constant_critic_leaves_actor_unchanged() {
        let mut r = rng(4);
        let mut actor = Mlp::new(&[3, 8, 8, 2], Activation::Sigmoid, &mut r);
        let mut critic = Mlp::zeros(&[5, 1], Activation::Linear);
        critic.layers[0].b = vec![3.0];
        let before = actor.clone();
        let s = vec![vec![0.3, 0.2, 0.1]];
        let x = vec![vec![0.3, 0.2, 0.1, 0.0, 0.0]];
        update_actor(&mut actor, &critic, &s, &x, 3, 0.01).unwrap();
        assert_eq!(actor, before);
    }

    /// Toy critic Q = -Σ (a - 0.7)², applied through its action gradient.
    #[test]
    fn quadratic_toy_critic_drives_action_to_optimum() {
        let mut r = rng(5);
        let mut actor = Mlp::new(&[2, 16, 16, 2], Activation::Sigmoid, &mut r);
        let s = vec![0.5, 0.5];
        for _ in 0..20_000 {
            let tr = actor.trace(&s);
            let a = tr.output().to_vec();
            let da: Vec<f64> = a.iter().map(|v| -2.0 * (v - 0.7)).collect();
            let mut g = actor.zeros_like();
            actor.backward(&tr, &da, &mut g);
            actor.add_scaled(&g, 0.05);
        }
        for v in actor.forward(&s) {
            assert!((v - 0.7).abs() <= 0.01, "{v}");
        }
    }

    #[test]
    fn soft_update_rules() {
        let mut r = rng(6);
        let online = Mlp::new(&[3, 4, 1], Activation::Linear, &mut r);
        let mut t = Mlp::new(&[3, 4, 1], Activation::Linear, &mut r);
        let orig = t.clone();
        soft_update(&mut t, &online, 0.0).unwrap();
        assert_eq!(t, orig);
        soft_update(&mut t, &online, 1.0).unwrap();
        assert_eq!(t, online);

        let mut t = orig.clone();
        let dist = |a: &Mlp| -> f64 {
            a.params()
                .iter()
                .zip(online.params())
                .map(|(x, y)| (x - y).powi(2))
                .sum::<f64>()
                .sqrt()
        };
        let d0 = dist(&t);
        for _ in 0..69 {
            soft_update(&mut t, &online, 0.01).unwrap();
        }
        let ratio = dist(&t) / d0;
        approx::assert_relative_eq!(ratio, 0.99f64.powi(69), max_relative = 1e-9);
        assert!((ratio - 0.5).abs() < 0.01);

        let other = Mlp::new(&[3, 5, 1], Activation::Linear, &mut r);
        assert!(matches!(soft_update(&mut t, &other, 0.5), Err(NmacError::ShapeMismatch { .. })));
    }

    #[test]
    fn replay_sampling_is_seeded() {
        let mk = || {
            let mut b = ReplayBuffer::new(10, 42);
            for k in 0..15 {
                b.push(Transition {
                    global_state: vec![k as f64],
                    joint_action: vec![[0.0, 0.0]],
                    rewards: vec![0.0],
                    next_global_state: vec![],
                    done: false,
                });
            }
            b
        };
        let (mut a, mut b) = (mk(), mk());
        assert_eq!(a.len(), 10);
        assert!(a.sample(11).is_none());
        let sa: Vec<f64> = a.sample(4).unwrap().iter().map(|t| t.global_state[0]).collect();
        let sb: Vec<f64> = b.sample(4).unwrap().iter().map(|t| t.global_state[0]).collect();
        assert_eq!(sa, sb);
        assert!(sa.iter().all(|v| *v >= 5.0), "oldest entries were overwritten");
    }

    #[test]
    fn critic_shapes_by_mode() {
        assert_eq!(critic_input_dim(CriticMode::Centralized, 3, 10), 3 * 10 + 6);
        assert_eq!(critic_input_dim(CriticMode::Independent, 3, 10), 10 + 2);
    }

    #[test]
    fn baselines() {
        let mut s = baseline_policy(BaselineKind::StaticHalf, 0).unwrap();
        assert_eq!(s.act(0, &[]), [0.5, 0.5]);
        let mut a = baseline_policy(BaselineKind::Random, 9).unwrap();
        let mut b = baseline_policy(BaselineKind::Random, 9).unwrap();
        for _ in 0..10 {
            assert_eq!(a.act(0, &[]), b.act(0, &[]));
        }
        assert!(baseline_policy(BaselineKind::Independent, 0).is_none());
    }

    /// Two agents; reward is high when both actions are near 0.8.
    struct Toy {
        frame: u32,
        state: Vec<Vec<f64>>,
    }

    impl MultiAgentEnv for Toy {
        fn num_agents(&self) -> usize {
            2
        }
        fn state_dim(&self) -> usize {
            2
        }
        fn reset(&mut self, _episode: u64) -> Result<Vec<Vec<f64>>, NmacError> {
            self.frame = 0;
            Ok(self.state.clone())
        }
        fn step(&mut self, actions: &[[f64; 2]]) -> Result<EnvStep, NmacError> {
            self.frame += 1;
            let r: f64 = actions
                .iter()
                .flatten()
                .map(|a| 1.0 - (a - 0.8).abs())
                .sum::<f64>()
                / 4.0;
            Ok(EnvStep {
                states: self.state.clone(),
                rewards: vec![r, r],
                done: self.frame == 5,
            })
        }
    }

    #[test]
    fn training_is_reproducible_and_learns_toy() {
        let cfg = TrainConfig {
            random_episodes: 20,
            batch_size: 32,
            ..TrainConfig::default()
        };
        let mk = || Toy {
            frame: 0,
            state: vec![vec![0.1, 0.9], vec![0.7, 0.3]],
        };
        let (net_a, log_a) = train_offline(&mut mk(), cfg.clone(), 150, 7).unwrap();
        let (net_b, log_b) = train_offline(&mut mk(), cfg.clone(), 150, 7).unwrap();
        assert_eq!(log_a, log_b);
        assert_eq!(net_a.agents, net_b.agents);
        let first: f64 = log_a[..20].iter().sum::<f64>() / 20.0;
        let last: f64 = log_a[130..].iter().sum::<f64>() / 20.0;
        assert!(last > first, "{first} -> {last}");

        let (empty, log) = train_offline(&mut mk(), cfg, 0, 7).unwrap();
        assert!(log.is_empty());
        assert_eq!(empty.agents, Nmac::new(2, 2, empty.config.clone(), 7).agents);
    }

    #[test]
    fn checkpoint_round_trip_and_shape_check() {
        let nmac = Nmac::new(2, 3, TrainConfig::default(), 1);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.json");
        nmac.checkpoint().save(&path).unwrap();
        let ck = Checkpoint::load(&path).unwrap();
        assert_eq!(ck, nmac.checkpoint());
        assert!(ck.policy_for(2, 3).is_ok());
        assert!(matches!(ck.policy_for(3, 3), Err(NmacError::ShapeMismatch { .. })));
    }
}
