//! Action-value policies: supervised training against analytic Q targets,
//! the Q-learning comparator, and greedy registration.

use std::collections::VecDeque;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::env::{
    self, action_set, argmax, q_targets, Action, Dimensionality, EnvState, MdpConfig, Trajectory,
    TrajectoryStep,
};
use crate::error::{Result, VregError};
use crate::geometry::{
    distance_weighted, residual_params, transform_from_params, ParamVector, RigidTransform,
};
use crate::nn::{ArchSpec, Network, NormMode, RmsProp};
use crate::volume::{difference_image, Observation, Volume};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    /// Multiplicative decay applied every `decay_every` mini-batches.
    pub decay: f64,
    pub decay_every: usize,
    pub batch_size: usize,
    pub total_steps: usize,
    pub seed: u64,
    pub rms_rho: f64,
    pub rms_eps: f64,
    pub bn_momentum: f64,
    /// Start the output bias at the mean target of the first mini-batch.
    pub init_output_bias: bool,
    /// Record every n-th step in the loss curve.
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 6e-5,
            decay: 0.7,
            decay_every: 10_000,
            batch_size: 32,
            total_steps: 1000,
            seed: 0,
            rms_rho: 0.9,
            rms_eps: 1e-8,
            bn_momentum: 0.1,
            init_output_bias: true,
            log_every: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) {
            return Err(VregError::Config("learning_rate must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(VregError::Config("batch_size must be at least 1".into()));
        }
        if self.decay_every == 0 || self.log_every == 0 {
            return Err(VregError::Config(
                "decay_every and log_every must be positive".into(),
            ));
        }
        Ok(())
    }

    pub fn lr_at(&self, step: usize) -> f64 {
        self.learning_rate * self.decay.powi((step / self.decay_every) as i32)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub phantom: usize,
    pub seed: u64,
    pub index: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingSample {
    pub observation: Observation,
    pub targets: Vec<f64>,
    /// Residual at which the sample was drawn.
    pub residual: ParamVector,
    pub provenance: Provenance,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossRow {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
}

pub fn loss_csv(rows: &[LossRow]) -> String {
    let mut out = String::from("step,loss,lr\n");
    for r in rows {
        out.push_str(&format!("{},{},{}\n", r.step, r.loss, r.lr));
    }
    out
}

fn stack_inputs(net: &Network, obs: &[&Observation]) -> Result<Vec<f64>> {
    let mut x = Vec::with_capacity(obs.len() * net.input_len());
    for o in obs {
        x.extend(net.observation_input(o)?);
    }
    Ok(x)
}

/// Sum over samples and actions of squared output/target differences.
pub fn loss(net: &Network, batch: &[TrainingSample]) -> Result<f64> {
    if batch.is_empty() {
        return Err(VregError::Config("empty batch".into()));
    }
    let obs: Vec<&Observation> = batch.iter().map(|s| &s.observation).collect();
    let (y, _) = net.forward(&stack_inputs(net, &obs)?, batch.len(), NormMode::Batch)?;
    let k = net.arity();
    let mut total = 0.0;
    for (s, sample) in batch.iter().enumerate() {
        if sample.targets.len() != k {
            return Err(VregError::ShapeMismatch(format!(
                "{} targets for arity {k}",
                sample.targets.len()
            )));
        }
        for i in 0..k {
            total += (y[s * k + i] - sample.targets[i]).powi(2);
        }
    }
    Ok(total)
}

/// Incremental supervised trainer; [`train_dsl`] drives it to completion.
#[derive(Debug, Clone)]
pub struct DslTrainer {
    pub net: Network,
    pub cfg: TrainConfig,
    opt: RmsProp,
    pub step: usize,
    pub curve: Vec<LossRow>,
}

impl DslTrainer {
    pub fn new(arch: ArchSpec, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let net = Network::init(arch, cfg.seed)?;
        let opt = RmsProp::new(&net, cfg.rms_rho, cfg.rms_eps);
        Ok(DslTrainer {
            net,
            cfg,
            opt,
            step: 0,
            curve: Vec::new(),
        })
    }

    /// One mini-batch update; returns the pre-update batch loss.
    pub fn train_step(&mut self, batch: &[TrainingSample]) -> Result<f64> {
        if batch.is_empty() {
            return Err(VregError::Config("empty batch".into()));
        }
        let k = self.net.arity();
        if self.step == 0 && self.cfg.init_output_bias {
            if let Some(b) = self.net.output_bias_index() {
                let mean =
                    batch.iter().flat_map(|s| &s.targets).sum::<f64>() / (batch.len() * k) as f64;
                self.net.tensors_mut()[b].iter_mut().for_each(|x| *x = mean);
                self.net.quantize();
            }
        }
        let obs: Vec<&Observation> = batch.iter().map(|s| &s.observation).collect();
        let x = stack_inputs(&self.net, &obs)?;
        let (y, cache) = self.net.forward(&x, batch.len(), NormMode::Batch)?;
        let mut total = 0.0;
        let mut g = vec![0.0; y.len()];
        for (s, sample) in batch.iter().enumerate() {
            if sample.targets.len() != k {
                return Err(VregError::ShapeMismatch(format!(
                    "{} targets for arity {k}",
                    sample.targets.len()
                )));
            }
            for i in 0..k {
                let d = y[s * k + i] - sample.targets[i];
                total += d * d;
                g[s * k + i] = 2.0 * d;
            }
        }
        if !total.is_finite() {
            return Err(VregError::NonFiniteLoss { step: self.step });
        }
        let (grads, _) = self.net.backward(&cache, &g);
        let lr = self.cfg.lr_at(self.step);
        self.opt.step(&mut self.net, &grads, lr);
        self.net.update_running_stats(&cache, self.cfg.bn_momentum);
        if !self.net.all_finite() {
            return Err(VregError::NonFiniteLoss { step: self.step });
        }
        if self.step % self.cfg.log_every == 0 {
            self.curve.push(LossRow {
                step: self.step,
                loss: total,
                lr,
            });
        }
        self.step += 1;
        Ok(total)
    }
}

/// Cycles through a finite sample set, reshuffling each epoch.
pub struct ShuffledEpochs<'a> {
    samples: &'a [TrainingSample],
    order: Vec<usize>,
    pos: usize,
    rng: ChaCha8Rng,
}

impl<'a> ShuffledEpochs<'a> {
    pub fn new(samples: &'a [TrainingSample], seed: u64) -> Self {
        let mut s = ShuffledEpochs {
            samples,
            order: (0..samples.len()).collect(),
            pos: 0,
            rng: ChaCha8Rng::seed_from_u64(seed),
        };
        s.order.shuffle(&mut s.rng);
        s
    }
}

impl<'a> Iterator for ShuffledEpochs<'a> {
    type Item = Result<TrainingSample>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.samples.is_empty() {
            return None;
        }
        if self.pos == self.order.len() {
            self.order.shuffle(&mut self.rng);
            self.pos = 0;
        }
        self.pos += 1;
        Some(Ok(self.samples[self.order[self.pos - 1]].clone()))
    }
}

/// Runs `cfg.total_steps` mini-batch updates on a sample stream.
pub fn train_dsl<I>(arch: ArchSpec, dataset: I, cfg: &TrainConfig) -> Result<DslTrainer>
where
    I: IntoIterator<Item = Result<TrainingSample>>,
{
    let mut trainer = DslTrainer::new(arch, cfg.clone())?;
    let mut stream = dataset.into_iter();
    while trainer.step < cfg.total_steps {
        let batch = stream
            .by_ref()
            .take(cfg.batch_size)
            .collect::<Result<Vec<_>>>()?;
        if batch.is_empty() {
            return Err(VregError::Config(format!(
                "dataset exhausted after {} steps",
                trainer.step
            )));
        }
        trainer.train_step(&batch)?;
    }
    Ok(trainer)
}

/// What a policy sees at each step.
pub struct PolicyInput<'a> {
    pub observation: &'a Observation,
    pub current: &'a RigidTransform,
}

/// Anything that scores the action set.
pub trait QFunction {
    fn q_values(&self, input: &PolicyInput) -> Result<Vec<f64>>;

    /// Lets ground-truth policies end a rollout once aligned.
    fn should_stop(&self, _input: &PolicyInput) -> bool {
        false
    }

    /// The underlying network, for saliency.
    fn network(&self) -> Option<&Network> {
        None
    }
}

impl QFunction for Network {
    fn q_values(&self, input: &PolicyInput) -> Result<Vec<f64>> {
        self.predict(input.observation)
    }

    fn network(&self) -> Option<&Network> {
        Some(self)
    }
}

/// Ground-truth policy that emits the analytic Q pattern.
#[derive(Debug, Clone)]
pub struct OraclePolicy {
    pub ground_truth: RigidTransform,
    pub actions: Vec<Action>,
    pub mdp: MdpConfig,
    /// Stop once `D` drops below this; `None` never stops.
    pub stop_below: Option<f64>,
}

impl OraclePolicy {
    pub fn new(ground_truth: RigidTransform, dim: Dimensionality, mdp: MdpConfig) -> Self {
        let stop_below = Some(mdp.epsilon);
        OraclePolicy {
            ground_truth,
            actions: action_set(dim),
            mdp,
            stop_below,
        }
    }
}

impl QFunction for OraclePolicy {
    /// Analytic Q of the residual. Off the integer lattice the greedy
    /// recursion may stall, in which case `−D(T_g, a ∘ T_t)` is returned;
    /// both share their argmax with the distance-minimising action.
    fn q_values(&self, input: &PolicyInput) -> Result<Vec<f64>> {
        let v = residual_params(&self.ground_truth, input.current)?;
        match q_targets(&v, &self.actions, &self.mdp) {
            Ok(q) => Ok(q),
            Err(VregError::DepthExceeded { .. }) => self
                .actions
                .iter()
                .map(|a| {
                    let t = a.apply_to_transform(input.current)?;
                    Ok(-distance_weighted(
                        &self.ground_truth,
                        &t,
                        &self.mdp.weights,
                    )?)
                })
                .collect(),
            Err(e) => Err(e),
        }
    }

    fn should_stop(&self, input: &PolicyInput) -> bool {
        match self.stop_below {
            Some(tol) => distance_weighted(&self.ground_truth, input.current, &self.mdp.weights)
                .map(|d| d < tol)
                .unwrap_or(false),
            None => false,
        }
    }
}

/// Sample among the best actions with fixed probabilities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TopKRandomization {
    pub probabilities: Vec<f64>,
    pub seed: u64,
}

impl TopKRandomization {
    pub fn top3(seed: u64) -> Self {
        TopKRandomization {
            probabilities: vec![0.8, 0.1, 0.1],
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GreedyOptions {
    pub steps: usize,
    pub dim: Dimensionality,
    pub mdp: MdpConfig,
    pub randomize: Option<TopKRandomization>,
    /// Known ground truth, recorded in the trajectory.
    pub ground_truth: Option<RigidTransform>,
}

impl GreedyOptions {
    pub fn new(steps: usize, dim: Dimensionality) -> Self {
        GreedyOptions {
            steps,
            dim,
            mdp: MdpConfig::default(),
            randomize: None,
            ground_truth: None,
        }
    }
}

/// Indices sorted by decreasing value; ties keep index order.
fn ranked(q: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..q.len()).collect();
    idx.sort_by(|&a, &b| q[b].total_cmp(&q[a]));
    idx
}

fn pick(q: &[f64], randomize: Option<(&TopKRandomization, &mut ChaCha8Rng)>) -> usize {
    match randomize {
        None => argmax(q),
        Some((r, rng)) => {
            let order = ranked(q);
            let k = r.probabilities.len().min(order.len());
            let total: f64 = r.probabilities[..k].iter().sum();
            let mut u = rng.random::<f64>() * total;
            for (i, p) in r.probabilities[..k].iter().enumerate() {
                if u < *p {
                    return order[i];
                }
                u -= p;
            }
            order[k - 1]
        }
    }
}

/// Greedy rollout with an arbitrary observation source.
pub fn greedy_rollout<F>(
    observe: F,
    t0: &RigidTransform,
    policy: &dyn QFunction,
    opts: &GreedyOptions,
) -> Result<(RigidTransform, Trajectory)>
where
    F: Fn(&RigidTransform) -> Result<Observation>,
{
    if opts.steps == 0 {
        return Err(VregError::Config(
            "greedy registration needs at least one step".into(),
        ));
    }
    let actions = action_set(opts.dim);
    let mut rng = opts
        .randomize
        .as_ref()
        .map(|r| ChaCha8Rng::seed_from_u64(r.seed));
    let mut state = EnvState::image(*t0, opts.ground_truth)?;
    let mut traj = Vec::new();
    for _ in 0..opts.steps {
        let obs = observe(state.current())?;
        let input = PolicyInput {
            observation: &obs,
            current: state.current(),
        };
        if policy.should_stop(&input) {
            break;
        }
        let q = policy.q_values(&input)?;
        if q.len() != actions.len() {
            return Err(VregError::ShapeMismatch(format!(
                "policy emits {} values for {} actions",
                q.len(),
                actions.len()
            )));
        }
        let choice = pick(&q, opts.randomize.as_ref().zip(rng.as_mut()));
        let action = actions[choice];
        let tr = env::step(&state, action, &opts.mdp)?;
        traj.push(TrajectoryStep {
            step: state.step_index,
            residual: state.residual().copied(),
            params: state.current().params()?,
            action,
            reward: opts.ground_truth.map(|_| tr.reward),
            q_target: Some(q[choice]),
        });
        state = tr.next;
    }
    Ok((*state.current(), traj))
}

/// Repeats `steps` times: observe `I_r − T ∘ I_f`, score, act.
pub fn greedy_register(
    reference: &Volume,
    floating: &Volume,
    t0: &RigidTransform,
    policy: &dyn QFunction,
    opts: &GreedyOptions,
) -> Result<(RigidTransform, Trajectory)> {
    greedy_rollout(
        |t| difference_image(reference, floating, t),
        t0,
        policy,
        opts,
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DrlConfig {
    pub replay_capacity: usize,
    pub epsilon_start: f64,
    pub epsilon_end: f64,
    pub epsilon_decay_steps: usize,
    /// Frozen target network refresh period, in updates.
    pub target_update: usize,
    pub episode_len: usize,
    /// Transitions collected before the first update.
    pub warmup: usize,
}

impl Default for DrlConfig {
    fn default() -> Self {
        DrlConfig {
            replay_capacity: 10_000,
            epsilon_start: 1.0,
            epsilon_end: 0.1,
            epsilon_decay_steps: 5_000,
            target_update: 1000,
            episode_len: 50,
            warmup: 64,
        }
    }
}

impl DrlConfig {
    pub fn epsilon_at(&self, step: usize) -> f64 {
        if self.epsilon_decay_steps == 0 {
            return self.epsilon_end;
        }
        let f = (step as f64 / self.epsilon_decay_steps as f64).min(1.0);
        self.epsilon_start + f * (self.epsilon_end - self.epsilon_start)
    }
}

/// Aligned pair the Q-learner explores on.
#[derive(Debug, Clone)]
pub struct DrlPair {
    pub reference: Volume,
    pub floating: Volume,
    pub ground_truth: RigidTransform,
}

/// Episode generator for the Q-learning comparator.
#[derive(Debug, Clone)]
pub struct DrlEnv {
    pub pairs: Vec<DrlPair>,
    /// Symmetric bounds of the initial residual.
    pub start_range: [f64; 6],
    pub dim: Dimensionality,
    pub mdp: MdpConfig,
}

impl DrlEnv {
    fn observe(&self, pair: usize, t: &RigidTransform) -> Result<Observation> {
        let p = &self.pairs[pair];
        difference_image(&p.reference, &p.floating, t)
    }

    fn reset(&self, rng: &mut ChaCha8Rng) -> Result<(usize, EnvState)> {
        let pair = rng.random_range(0..self.pairs.len());
        let mut v = ParamVector::ZERO;
        for axis in self.dim.axes() {
            let b = self.start_range[axis.index()].floor() as i64;
            v[axis.index()] = rng.random_range(-b..=b) as f64;
        }
        let tg = self.pairs[pair].ground_truth;
        let t0 =
            crate::geometry::compose(&crate::geometry::invert(&transform_from_params(&v)), &tg);
        Ok((pair, EnvState::image(t0, Some(tg))?))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub pair: usize,
    pub pose: RigidTransform,
    pub action: usize,
    pub reward: f64,
    pub next_pose: RigidTransform,
    pub terminal: bool,
}

/// Fixed-capacity ring buffer; stores poses, not images.
#[derive(Debug, Clone)]
pub struct ReplayBuffer {
    capacity: usize,
    items: VecDeque<Transition>,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Self {
        ReplayBuffer {
            capacity: capacity.max(1),
            items: VecDeque::with_capacity(capacity.max(1)),
        }
    }

    pub fn push(&mut self, t: Transition) {
        if self.items.len() == self.capacity {
            self.items.pop_front();
        }
        self.items.push_back(t);
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn sample<'a>(&'a self, n: usize, rng: &mut ChaCha8Rng) -> Vec<&'a Transition> {
        (0..n)
            .map(|_| &self.items[rng.random_range(0..self.items.len())])
            .collect()
    }
}

/// Uniform random action with probability `eps`, otherwise the argmax.
pub fn epsilon_greedy(q: &[f64], eps: f64, rng: &mut ChaCha8Rng) -> usize {
    if rng.random::<f64>() < eps {
        rng.random_range(0..q.len())
    } else {
        argmax(q)
    }
}

/// Q-learning with ε-greedy exploration, uniform replay and a periodically
/// frozen target network. One environment step per update.
#[derive(Debug, Clone)]
pub struct DrlTrainer {
    pub net: Network,
    target: Network,
    pub cfg: TrainConfig,
    pub drl: DrlConfig,
    opt: RmsProp,
    pub replay: ReplayBuffer,
    rng: ChaCha8Rng,
    episode: Option<(usize, EnvState)>,
    pub step: usize,
    pub curve: Vec<LossRow>,
}

impl DrlTrainer {
    pub fn new(arch: ArchSpec, cfg: TrainConfig, drl: DrlConfig) -> Result<Self> {
        cfg.validate()?;
        let net = Network::init(arch, cfg.seed)?;
        let opt = RmsProp::new(&net, cfg.rms_rho, cfg.rms_eps);
        Ok(DrlTrainer {
            target: net.clone(),
            net,
            opt,
            replay: ReplayBuffer::new(drl.replay_capacity),
            rng: ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed),
            episode: None,
            step: 0,
            curve: Vec::new(),
            cfg,
            drl,
        })
    }

    fn collect(&mut self, env: &DrlEnv, eps: f64) -> Result<()> {
        let actions = action_set(env.dim);
        let (pair, state) = match self.episode.take() {
            Some(e) => e,
            None => env.reset(&mut self.rng)?,
        };
        let obs = env.observe(pair, state.current())?;
        let q = self.net.predict(&obs)?;
        let a = epsilon_greedy(&q, eps, &mut self.rng);
        let tr = env::step(&state, actions[a], &env.mdp)?;
        let terminal = env::is_terminal(&tr.next, &env.mdp)?;
        self.replay.push(Transition {
            pair,
            pose: *state.current(),
            action: a,
            reward: tr.reward,
            next_pose: *tr.next.current(),
            terminal,
        });
        if !terminal && tr.next.step_index < self.drl.episode_len {
            self.episode = Some((pair, tr.next));
        }
        Ok(())
    }

    /// Collects one transition and, past warm-up, performs one update.
    pub fn train_step(&mut self, env: &DrlEnv) -> Result<Option<f64>> {
        if self.step == 0 && self.replay.is_empty() && self.cfg.init_output_bias {
            // Start at the value of an endless unit-reward stream, 1/(1 − γ).
            if let Some(b) = self.net.output_bias_index() {
                let v = 1.0 / (1.0 - env.mdp.gamma);
                self.net.tensors_mut()[b].iter_mut().for_each(|x| *x = v);
                self.net.quantize();
                self.target = self.net.clone();
            }
        }
        while self.replay.len() < self.drl.warmup.max(1) {
            self.collect(env, 1.0)?;
        }
        let eps = self.drl.epsilon_at(self.step);
        self.collect(env, eps)?;

        let batch: Vec<Transition> = self
            .replay
            .sample(self.cfg.batch_size, &mut self.rng)
            .into_iter()
            .cloned()
            .collect();
        let mut targets = Vec::with_capacity(batch.len());
        let mut obs = Vec::with_capacity(batch.len());
        for t in &batch {
            let y = if t.terminal {
                t.reward + env.mdp.bonus
            } else {
                let next = env.observe(t.pair, &t.next_pose)?;
                let qn = self.target.predict(&next)?;
                t.reward + env.mdp.gamma * qn.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
            };
            targets.push(y);
            obs.push(env.observe(t.pair, &t.pose)?);
        }
        let refs: Vec<&Observation> = obs.iter().collect();
        let x = stack_inputs(&self.net, &refs)?;
        let (y, cache) = self.net.forward(&x, batch.len(), NormMode::Batch)?;
        let k = self.net.arity();
        let mut g = vec![0.0; y.len()];
        let mut total = 0.0;
        for (s, t) in batch.iter().enumerate() {
            let d = y[s * k + t.action] - targets[s];
            total += d * d;
            g[s * k + t.action] = 2.0 * d;
        }
        if !total.is_finite() {
            return Err(VregError::NonFiniteLoss { step: self.step });
        }
        let (grads, _) = self.net.backward(&cache, &g);
        let lr = self.cfg.lr_at(self.step);
        self.opt.step(&mut self.net, &grads, lr);
        self.net.update_running_stats(&cache, self.cfg.bn_momentum);
        if !self.net.all_finite() {
            return Err(VregError::NonFiniteLoss { step: self.step });
        }
        if self.step % self.cfg.log_every == 0 {
            self.curve.push(LossRow {
                step: self.step,
                loss: total,
                lr,
            });
        }
        self.step += 1;
        if self.step % self.drl.target_update.max(1) == 0 {
            self.target = self.net.clone();
        }
        Ok(Some(total))
    }
}

/// Runs `cfg.total_steps` Q-learning updates. Two-dimensional setups only.
pub fn train_drl(
    arch: ArchSpec,
    env: &DrlEnv,
    cfg: &TrainConfig,
    drl: &DrlConfig,
) -> Result<DrlTrainer> {
    if env.dim != Dimensionality::Two {
        return Err(VregError::Config(
            "the Q-learning comparator supports two-dimensional setups only".into(),
        ));
    }
    if env.pairs.is_empty() {
        return Err(VregError::Config("no training pairs".into()));
    }
    let mut trainer = DrlTrainer::new(arch, cfg.clone(), drl.clone())?;
    while trainer.step < cfg.total_steps {
        trainer.train_step(env)?;
    }
    Ok(trainer)
}
