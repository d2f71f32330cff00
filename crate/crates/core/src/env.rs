//! The registration MDP.
//!
//! An [`Action`] `(axis, sign)` adds `sign` to one parameter of the current
//! transform `T_t` (image mode). With `T_g = I` this moves the residual
//! `v = params(T_g ∘ T_t⁻¹)` by `−sign` on the same component, which is
//! exactly what ideal mode does: it mutates `v` directly, the setting in
//! which the supervised Q-target and its closed form are defined.

use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, VregError};
use crate::geometry::{
    compose, distance_weighted, invert, residual_params, transform_from_params, DistanceWeights,
    ParamVector, RigidTransform,
};

/// Tolerance under which two candidate distances count as a tie.
pub const TIE_TOL: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Dimensionality {
    #[serde(rename = "2d")]
    Two,
    #[serde(rename = "3d")]
    Three,
}

impl Dimensionality {
    pub fn axes(&self) -> &'static [Axis] {
        match self {
            Dimensionality::Two => &[Axis::Tx, Axis::Ty, Axis::Rz],
            Dimensionality::Three => &[Axis::Tx, Axis::Ty, Axis::Tz, Axis::Rx, Axis::Ry, Axis::Rz],
        }
    }

    pub fn arity(&self) -> usize {
        2 * self.axes().len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Axis {
    Tx,
    Ty,
    Tz,
    Rx,
    Ry,
    Rz,
}

impl Axis {
    pub fn index(&self) -> usize {
        *self as usize
    }

    pub fn name(&self) -> &'static str {
        match self {
            Axis::Tx => "tx",
            Axis::Ty => "ty",
            Axis::Tz => "tz",
            Axis::Rx => "rx",
            Axis::Ry => "ry",
            Axis::Rz => "rz",
        }
    }
}

/// Unit step on one parameter: ±1 mm or ±1°.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Action {
    pub axis: Axis,
    pub sign: i8,
}

impl Action {
    pub fn new(axis: Axis, sign: i8) -> Self {
        debug_assert!(sign == 1 || sign == -1);
        Action { axis, sign }
    }

    pub fn opposite(&self) -> Action {
        Action::new(self.axis, -self.sign)
    }

    /// Image-mode effect: `params(T)[axis] += sign`.
    pub fn apply_to_transform(&self, t: &RigidTransform) -> Result<RigidTransform> {
        let mut p = t.params()?;
        p[self.axis.index()] += self.sign as f64;
        Ok(transform_from_params(&p))
    }

    /// Ideal-mode effect: `v[axis] -= sign`.
    pub fn apply_to_residual(&self, v: &ParamVector) -> ParamVector {
        let mut out = *v;
        out[self.axis.index()] -= self.sign as f64;
        out
    }
}

impl fmt::Display for Action {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}{}",
            if self.sign > 0 { '+' } else { '-' },
            self.axis.name()
        )
    }
}

/// `+` then `−` for each axis, in parameter order.
pub fn action_set(dim: Dimensionality) -> Vec<Action> {
    dim.axes()
        .iter()
        .flat_map(|&a| [Action::new(a, 1), Action::new(a, -1)])
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MdpConfig {
    pub gamma: f64,
    pub epsilon: f64,
    pub bonus: f64,
    /// Symmetric exploration bounds per parameter (mm / degrees).
    pub bounds: [f64; 6],
    pub weights: DistanceWeights,
}

impl Default for MdpConfig {
    fn default() -> Self {
        MdpConfig {
            gamma: 0.9,
            epsilon: 0.5,
            bonus: 10.0,
            bounds: [30.0, 30.0, 150.0, 30.0, 30.0, 30.0],
            weights: DistanceWeights::default(),
        }
    }
}

impl MdpConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return Err(VregError::Config(format!(
                "gamma {} not in (0,1)",
                self.gamma
            )));
        }
        if !(self.bonus > self.gamma / (1.0 - self.gamma)) {
            return Err(VregError::Config(format!(
                "bonus {} must exceed gamma/(1-gamma) = {}",
                self.bonus,
                self.gamma / (1.0 - self.gamma)
            )));
        }
        if !(self.epsilon > 0.0) {
            return Err(VregError::Config("epsilon must be positive".into()));
        }
        if self.bounds.iter().any(|b| !(*b >= 0.0)) {
            return Err(VregError::Config("bounds must be nonnegative".into()));
        }
        Ok(())
    }

    pub fn distance_of(&self, v: &ParamVector) -> f64 {
        v.weighted_norm(&self.weights)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Mode {
    /// `v` is authoritative and moves by exactly ±1 per action.
    Ideal,
    /// `T_t` is authoritative; `v` is recomputed from it.
    Image,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnvState {
    current: RigidTransform,
    ground_truth: Option<RigidTransform>,
    residual: Option<ParamVector>,
    pub step_index: usize,
    mode: Mode,
}

impl EnvState {
    /// Ideal-mode state at residual `v` relative to `ground_truth`.
    pub fn ideal(v: ParamVector, ground_truth: RigidTransform) -> Self {
        let current = compose(&invert(&transform_from_params(&v)), &ground_truth);
        EnvState {
            current,
            ground_truth: Some(ground_truth),
            residual: Some(v),
            step_index: 0,
            mode: Mode::Ideal,
        }
    }

    /// Image-mode state, with the ground truth when it is known.
    pub fn image(current: RigidTransform, ground_truth: Option<RigidTransform>) -> Result<Self> {
        let residual = match &ground_truth {
            Some(tg) => Some(residual_params(tg, &current)?),
            None => None,
        };
        Ok(EnvState {
            current,
            ground_truth,
            residual,
            step_index: 0,
            mode: Mode::Image,
        })
    }

    pub fn current(&self) -> &RigidTransform {
        &self.current
    }

    pub fn ground_truth(&self) -> Option<&RigidTransform> {
        self.ground_truth.as_ref()
    }

    pub fn residual(&self) -> Option<&ParamVector> {
        self.residual.as_ref()
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    fn require_residual(&self) -> Result<&ParamVector> {
        self.residual
            .as_ref()
            .ok_or_else(|| VregError::Config("ground truth required for this operation".into()))
    }

    /// `D(T_g, T_t)`.
    pub fn distance(&self, cfg: &MdpConfig) -> Result<f64> {
        Ok(cfg.distance_of(self.require_residual()?))
    }
}

/// Result of one environment step.
#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub next: EnvState,
    pub reward: f64,
    /// The action would have left the exploration bounds; the offending
    /// component was clamped.
    pub out_of_bounds: bool,
}

/// `‖v‖ − ‖v'‖` for residuals differing on one component, evaluated as
/// `(‖v‖² − ‖v'‖²) / (‖v‖ + ‖v'‖)` to avoid cancellation.
fn unit_step_reward(v: &ParamVector, next: &ParamVector, cfg: &MdpConfig) -> f64 {
    let d0 = cfg.distance_of(v);
    let d1 = cfg.distance_of(next);
    let denom = d0 + d1;
    if denom == 0.0 {
        return 0.0;
    }
    let mut num = 0.0;
    for i in 0..6 {
        let w2 = cfg.weights.0[i] * cfg.weights.0[i];
        num += w2 * (v[i] - next[i]) * (v[i] + next[i]);
    }
    num / denom
}

fn clamp_to_bounds(v: &mut ParamVector, bounds: &[f64; 6]) -> bool {
    let mut clamped = false;
    for i in 0..6 {
        let b = bounds[i];
        if v[i] > b {
            v[i] = b;
            clamped = true;
        } else if v[i] < -b {
            v[i] = -b;
            clamped = true;
        }
    }
    clamped
}

/// Applies `action`. Reward is `D(T_g, T_t) − D(T_g, T_{t+1})` when the
/// ground truth is known, 0 otherwise.
pub fn step(state: &EnvState, action: Action, cfg: &MdpConfig) -> Result<Transition> {
    match state.mode {
        Mode::Ideal => {
            let v = *state.require_residual()?;
            let mut next_v = action.apply_to_residual(&v);
            let out_of_bounds = clamp_to_bounds(&mut next_v, &cfg.bounds);
            let reward = unit_step_reward(&v, &next_v, cfg);
            let tg = state.ground_truth.expect("ideal state has ground truth");
            let mut next = EnvState::ideal(next_v, tg);
            next.step_index = state.step_index + 1;
            Ok(Transition {
                next,
                reward,
                out_of_bounds,
            })
        }
        Mode::Image => {
            let mut p = state.current.params()?;
            p[action.axis.index()] += action.sign as f64;
            let out_of_bounds = clamp_to_bounds(&mut p, &cfg.bounds);
            let mut next = EnvState::image(transform_from_params(&p), state.ground_truth)?;
            next.step_index = state.step_index + 1;
            let reward = match (&state.residual, &next.residual) {
                (Some(v0), Some(v1)) => cfg.distance_of(v0) - cfg.distance_of(v1),
                _ => 0.0,
            };
            Ok(Transition {
                next,
                reward,
                out_of_bounds,
            })
        }
    }
}

/// `D(T_g, T_t) < ε`.
pub fn is_terminal(state: &EnvState, cfg: &MdpConfig) -> Result<bool> {
    Ok(state.distance(cfg)? < cfg.epsilon)
}

fn candidate_distance(state: &EnvState, action: &Action, cfg: &MdpConfig) -> Result<f64> {
    match state.mode {
        Mode::Ideal => Ok(cfg.distance_of(&action.apply_to_residual(state.require_residual()?))),
        Mode::Image => {
            let tg = state
                .ground_truth
                .as_ref()
                .ok_or_else(|| VregError::Config("optimal action needs ground truth".into()))?;
            distance_weighted(
                tg,
                &action.apply_to_transform(&state.current)?,
                &cfg.weights,
            )
        }
    }
}

/// All minimisers of `D(T_g, a ∘ T_t)` over `actions`, within [`TIE_TOL`].
pub fn optimal_actions(
    state: &EnvState,
    actions: &[Action],
    cfg: &MdpConfig,
) -> Result<Vec<Action>> {
    let dists = actions
        .iter()
        .map(|a| candidate_distance(state, a, cfg))
        .collect::<Result<Vec<_>>>()?;
    let best = dists.iter().cloned().fold(f64::INFINITY, f64::min);
    Ok(actions
        .iter()
        .zip(&dists)
        .filter(|(_, &d)| d <= best + TIE_TOL)
        .map(|(a, _)| *a)
        .collect())
}

/// Greedy supervised action; ties are broken uniformly at random.
pub fn optimal_action<R: Rng + ?Sized>(
    state: &EnvState,
    actions: &[Action],
    cfg: &MdpConfig,
    rng: &mut R,
) -> Result<Action> {
    let ties = optimal_actions(state, actions, cfg)?;
    Ok(ties[rng.random_range(0..ties.len())])
}

fn first_optimal_residual(v: &ParamVector, actions: &[Action], cfg: &MdpConfig) -> Action {
    let mut best = actions[0];
    let mut best_d = f64::INFINITY;
    for a in actions {
        let d = cfg.distance_of(&a.apply_to_residual(v));
        if d < best_d - TIE_TOL {
            best_d = d;
            best = *a;
        }
    }
    best
}

/// Analytic Q for taking `action` at residual `v`, then following the
/// greedy supervised path until the post-action distance is within `ε`.
///
/// Evaluated on the residual directly (ideal mode). Tied greedy choices
/// yield the same value by symmetry, so the first minimiser is used.
pub fn q_value_residual(
    v: &ParamVector,
    action: Action,
    actions: &[Action],
    cfg: &MdpConfig,
) -> Result<f64> {
    let limit = (10.0 * (cfg.distance_of(v) + 10.0)).ceil() as usize;
    let mut rewards = Vec::new();
    let mut cur = *v;
    let mut a = action;
    loop {
        let next = a.apply_to_residual(&cur);
        let r = unit_step_reward(&cur, &next, cfg);
        rewards.push(r);
        if cfg.distance_of(&next) <= cfg.epsilon {
            break;
        }
        if rewards.len() >= limit {
            return Err(VregError::DepthExceeded { limit });
        }
        cur = next;
        a = first_optimal_residual(&cur, actions, cfg);
    }
    // Fold from the terminal step backwards.
    let last = rewards.len() - 1;
    let mut q = rewards[last] + cfg.bonus;
    for r in rewards[..last].iter().rev() {
        q = r + cfg.gamma * q;
    }
    Ok(q)
}

/// Q for a state; image-mode states are evaluated on their residual.
pub fn q_value(
    state: &EnvState,
    action: Action,
    actions: &[Action],
    cfg: &MdpConfig,
) -> Result<f64> {
    q_value_residual(state.require_residual()?, action, actions, cfg)
}

/// Q targets for every action, in `actions` order.
pub fn q_targets(v: &ParamVector, actions: &[Action], cfg: &MdpConfig) -> Result<Vec<f64>> {
    actions
        .iter()
        .map(|a| q_value_residual(v, *a, actions, cfg))
        .collect()
}

/// `F(p+1) = (1 − γ^{p+1}) / (1 − γ) + γ^p R`: Q of the optimal action
/// when `p + 1` unit steps remain.
pub fn q_closed_form(p: u32, cfg: &MdpConfig) -> f64 {
    let g = cfg.gamma;
    (1.0 - g.powi(p as i32 + 1)) / (1.0 - g) + g.powi(p as i32) * cfg.bonus
}

/// `F(p+1) − 1/(1 − γ) = γ^p (R − γ/(1 − γ))`, computed without the
/// cancellation that flattens `F` in floating point for large `p`.
pub fn q_closed_form_excess(p: u32, cfg: &MdpConfig) -> f64 {
    let g = cfg.gamma;
    g.powi(p as i32) * (cfg.bonus - g / (1.0 - g))
}

/// Outcome of a greedy rollout on residuals.
#[derive(Debug, Clone, PartialEq)]
pub struct IdealRollout {
    pub states: Vec<ParamVector>,
    pub actions: Vec<Action>,
    /// Number of steps after which the state was first terminal.
    pub terminal_at: Option<usize>,
}

/// Greedy rollout in ideal mode: at each step take the argmax of `q_fn`
/// (first maximiser) until `D < ε` or `max_steps`.
pub fn greedy_ideal_rollout<F>(
    v0: ParamVector,
    actions: &[Action],
    cfg: &MdpConfig,
    max_steps: usize,
    mut q_fn: F,
) -> Result<IdealRollout>
where
    F: FnMut(&ParamVector) -> Result<Vec<f64>>,
{
    let mut states = vec![v0];
    let mut taken = Vec::new();
    let mut v = v0;
    if cfg.distance_of(&v) < cfg.epsilon {
        return Ok(IdealRollout {
            states,
            actions: taken,
            terminal_at: Some(0),
        });
    }
    for n in 1..=max_steps {
        let q = q_fn(&v)?;
        let best = argmax(&q);
        let a = actions[best];
        v = a.apply_to_residual(&v);
        clamp_to_bounds(&mut v, &cfg.bounds);
        states.push(v);
        taken.push(a);
        if cfg.distance_of(&v) < cfg.epsilon {
            return Ok(IdealRollout {
                states,
                actions: taken,
                terminal_at: Some(n),
            });
        }
    }
    Ok(IdealRollout {
        states,
        actions: taken,
        terminal_at: None,
    })
}

/// Index of the first maximum.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

/// One row of a rollout or supervised path.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryStep {
    pub step: usize,
    /// Residual before the action, when the ground truth is known.
    pub residual: Option<ParamVector>,
    /// Parameters of `T_t` before the action.
    pub params: ParamVector,
    pub action: Action,
    pub reward: Option<f64>,
    pub q_target: Option<f64>,
}

pub type Trajectory = Vec<TrajectoryStep>;

/// Renders `step,v1..v6,action_axis,action_sign,reward,q_target`.
pub fn trajectory_csv(traj: &[TrajectoryStep]) -> String {
    let mut out = String::from("step,v1,v2,v3,v4,v5,v6,action_axis,action_sign,reward,q_target\n");
    let opt = |x: Option<f64>| x.map(|v| v.to_string()).unwrap_or_default();
    for s in traj {
        out.push_str(&s.step.to_string());
        for i in 0..6 {
            out.push(',');
            out.push_str(&opt(s.residual.map(|v| v[i])));
        }
        out.push_str(&format!(
            ",{},{},{},{}\n",
            s.action.axis.name(),
            s.action.sign,
            opt(s.reward),
            opt(s.q_target)
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cfg() -> MdpConfig {
        MdpConfig::default()
    }

    fn v(x: [f64; 6]) -> ParamVector {
        ParamVector(x)
    }

    fn ideal(x: [f64; 6]) -> EnvState {
        EnvState::ideal(v(x), RigidTransform::identity())
    }

    #[test]
    fn action_sets() {
        let a3 = action_set(Dimensionality::Three);
        assert_eq!(a3.len(), 12);
        for axis in Dimensionality::Three.axes() {
            assert!(a3.contains(&Action::new(*axis, 1)));
            assert!(a3.contains(&Action::new(*axis, -1)));
        }
        let a2 = action_set(Dimensionality::Two);
        assert_eq!(a2.len(), 6);
        assert!(a2
            .iter()
            .all(|a| matches!(a.axis, Axis::Tx | Axis::Ty | Axis::Rz)));
    }

    #[test]
    fn action_then_opposite_restores_residual() {
        let s = ideal([3.0, -2.0, 1.0, 0.5, 4.0, -7.0]);
        for a in action_set(Dimensionality::Three) {
            let t1 = step(&s, a, &cfg()).unwrap();
            let t2 = step(&t1.next, a.opposite(), &cfg()).unwrap();
            assert_eq!(t2.next.residual(), s.residual());
            assert_eq!(t2.next.step_index, 2);
        }
    }

    #[test]
    fn step_rewards() {
        let s = ideal([3.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
        // +tx on T moves v_tx by −1.
        let t = step(&s, Action::new(Axis::Tx, 1), &cfg()).unwrap();
        assert_eq!(t.reward, 1.0);
        assert_eq!(t.next.residual().unwrap()[0], 2.0);
        let t = step(&s, Action::new(Axis::Tx, -1), &cfg()).unwrap();
        assert_eq!(t.reward, -1.0);
        let t = step(&s, Action::new(Axis::Ty, 1), &cfg()).unwrap();
        assert!((t.reward - (3.0 - 10f64.sqrt())).abs() < 1e-12);
    }

    #[test]
    fn image_mode_translation_matches_ideal() {
        let tg = RigidTransform::identity();
        let s = EnvState::image(RigidTransform::translation(-3.0, 0.0, 0.0), Some(tg)).unwrap();
        assert!((s.residual().unwrap()[0] - 3.0).abs() < 1e-12);
        let t = step(&s, Action::new(Axis::Tx, 1), &cfg()).unwrap();
        assert!((t.reward - 1.0).abs() < 1e-12);
        assert!((t.next.distance(&cfg()).unwrap() - 2.0).abs() < 1e-12);
    }

    #[test]
    fn ideal_state_distance_is_consistent() {
        let tg = transform_from_params(&v([1.0, 2.0, -3.0, 4.0, -5.0, 6.0]));
        let s = EnvState::ideal(v([2.0, -1.0, 4.0, 7.0, -3.0, 5.0]), tg);
        let direct = crate::geometry::distance(&tg, s.current()).unwrap();
        assert!((direct - s.distance(&cfg()).unwrap()).abs() < 1e-9);
    }

    #[test]
    fn out_of_bounds_clamps() {
        let s = ideal([-30.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
        let t = step(&s, Action::new(Axis::Tx, 1), &cfg()).unwrap();
        assert!(t.out_of_bounds);
        assert_eq!(t.next.residual().unwrap()[0], -30.0);
        assert_eq!(t.reward, 0.0);
    }

    #[test]
    fn terminal_examples() {
        assert!(is_terminal(&ideal([0.0; 6]), &cfg()).unwrap());
        assert!(is_terminal(&ideal([0.4, 0.0, 0.0, 0.0, 0.0, 0.0]), &cfg()).unwrap());
        assert!(!is_terminal(&ideal([1.0, 0.0, 0.0, 0.0, 0.0, 0.0]), &cfg()).unwrap());
    }

    #[test]
    fn optimal_action_examples() {
        let acts = action_set(Dimensionality::Three);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let s = ideal([3.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
        let a = optimal_action(&s, &acts, &cfg(), &mut rng).unwrap();
        assert_eq!(a, Action::new(Axis::Tx, 1));
        assert_eq!(
            step(&s, a, &cfg()).unwrap().next.distance(&cfg()).unwrap(),
            2.0
        );

        let origin = ideal([0.0; 6]);
        assert_eq!(optimal_actions(&origin, &acts, &cfg()).unwrap().len(), 12);

        let s = ideal([2.0, 2.0, 0.0, 0.0, 0.0, 0.0]);
        let ties = optimal_actions(&s, &acts, &cfg()).unwrap();
        assert_eq!(
            ties,
            vec![Action::new(Axis::Tx, 1), Action::new(Axis::Ty, 1)]
        );
        let mut seen = [0usize; 2];
        for _ in 0..2000 {
            let a = optimal_action(&s, &acts, &cfg(), &mut rng).unwrap();
            seen[usize::from(a.axis == Axis::Ty)] += 1;
        }
        assert!(seen[0] > 850 && seen[1] > 850, "{seen:?}");
    }

    #[test]
    fn q_value_examples() {
        let acts = action_set(Dimensionality::Three);
        let c = cfg();
        let opt = Action::new(Axis::Tx, 1);
        let q1 = q_value(&ideal([1.0, 0.0, 0.0, 0.0, 0.0, 0.0]), opt, &acts, &c).unwrap();
        assert!((q1 - 11.0).abs() < 1e-12);
        let q2 = q_value(&ideal([2.0, 0.0, 0.0, 0.0, 0.0, 0.0]), opt, &acts, &c).unwrap();
        assert!((q2 - 10.9).abs() < 1e-12);
        let worst = q_value(
            &ideal([1.0, 0.0, 0.0, 0.0, 0.0, 0.0]),
            opt.opposite(),
            &acts,
            &c,
        )
        .unwrap();
        assert!((worst - 8.81).abs() < 1e-12);
    }

    #[test]
    fn closed_form_examples() {
        let c = cfg();
        assert!((q_closed_form(0, &c) - 11.0).abs() < 1e-12);
        assert!((q_closed_form(1, &c) - 10.9).abs() < 1e-12);
        assert!((q_closed_form(400, &c) - 10.0).abs() < 1e-6);
        assert!(q_closed_form_excess(400, &c) > 0.0);
    }

    #[test]
    fn depth_guard_trips_on_non_contracting_config() {
        // Non-unit weights make a ±1 step too coarse to ever land within ε.
        let mut c = cfg();
        c.weights = DistanceWeights([4.0, 1.0, 1.0, 1.0, 1.0, 1.0]);
        c.epsilon = 0.1;
        let acts = action_set(Dimensionality::Three);
        let r = q_value_residual(
            &v([0.5, 0.0, 0.0, 0.0, 0.0, 0.0]),
            Action::new(Axis::Tx, 1),
            &acts,
            &c,
        );
        assert!(matches!(r, Err(VregError::DepthExceeded { .. })));
    }

    #[test]
    fn config_validation() {
        assert!(cfg().validate().is_ok());
        let mut c = cfg();
        c.bonus = 9.0;
        assert!(c.validate().is_err());
        c = cfg();
        c.gamma = 1.0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn oracle_rollout_is_exact_on_axis() {
        let acts = action_set(Dimensionality::Three);
        let c = cfg();
        let r = greedy_ideal_rollout(v([5.0, 0.0, 0.0, 0.0, 0.0, 0.0]), &acts, &c, 50, |s| {
            q_targets(s, &acts, &c)
        })
        .unwrap();
        assert_eq!(r.terminal_at, Some(5));
    }

    #[test]
    fn trajectory_csv_header_and_rows() {
        let row = TrajectoryStep {
            step: 0,
            residual: Some(v([1.0, 0.0, 0.0, 0.0, 0.0, 0.0])),
            params: ParamVector::ZERO,
            action: Action::new(Axis::Rz, -1),
            reward: Some(1.0),
            q_target: None,
        };
        let csv = trajectory_csv(&[row]);
        let mut lines = csv.lines();
        assert_eq!(
            lines.next().unwrap(),
            "step,v1,v2,v3,v4,v5,v6,action_axis,action_sign,reward,q_target"
        );
        assert_eq!(lines.next().unwrap(), "0,1,0,0,0,0,0,rz,-1,1,");
    }
}
