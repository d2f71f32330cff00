//! Two-dimensional toy task: learned-policy success and the supervised
//! versus Q-learning training-efficiency comparison.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::augment::{
    random_dealign, sample_seed, AlignedPair, DealignConfig, PerturbRange, PhantomEntry,
};
use crate::env::{Dimensionality, MdpConfig};
use crate::error::{Result, VregError};
use crate::eval::perturbed_start;
use crate::geometry::{distance, RigidTransform};
use crate::nn::ArchSpec;
use crate::policy::{
    greedy_register, DrlConfig, DrlEnv, DrlPair, DrlTrainer, DslTrainer, GreedyOptions, QFunction,
    ShuffledEpochs, TrainConfig, TrainingSample,
};
use crate::volume::{PhantomKind, PhantomSpec};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ToyTask {
    pub phantom: PhantomEntry,
    pub range: PerturbRange,
    pub near_truth_fraction: f64,
    pub train_samples: usize,
    pub train_steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub batch_norm: bool,
    pub eval_steps: usize,
    /// Final distance strictly below this counts as success.
    pub success_below: f64,
    pub mdp: MdpConfig,
}

impl Default for ToyTask {
    fn default() -> Self {
        ToyTask {
            phantom: PhantomEntry {
                spec: PhantomSpec::new(PhantomKind::Simple, [32, 32, 1], [2.0, 2.0, 1.0]),
                seed: 1,
                shear: 0.0,
            },
            range: PerturbRange([10.0, 10.0, 0.0, 0.0, 0.0, 20.0]),
            near_truth_fraction: 0.5,
            train_samples: 4000,
            train_steps: 1000,
            batch_size: 32,
            learning_rate: 1e-3,
            batch_norm: true,
            eval_steps: 60,
            success_below: 3.0,
            mdp: MdpConfig::default(),
        }
    }
}

impl ToyTask {
    pub fn validate(&self) -> Result<()> {
        if self.phantom.spec.dims[2] != 1 {
            return Err(VregError::Config(
                "toy task images must be single-slice".into(),
            ));
        }
        if self.train_samples == 0 || self.batch_size == 0 || self.eval_steps == 0 {
            return Err(VregError::Config(
                "sample, batch and step counts must be positive".into(),
            ));
        }
        self.dealign().validate()?;
        self.train_config(0, 1).validate()
    }

    pub fn pair(&self) -> Result<AlignedPair> {
        self.phantom.build()
    }

    pub fn arch(&self) -> ArchSpec {
        ArchSpec::desk(
            self.phantom.spec.dims,
            Dimensionality::Two.arity(),
            self.batch_norm,
        )
    }

    pub fn train_config(&self, seed: u64, steps: usize) -> TrainConfig {
        TrainConfig {
            learning_rate: self.learning_rate,
            batch_size: self.batch_size,
            total_steps: steps,
            seed,
            log_every: 10,
            ..TrainConfig::default()
        }
    }

    pub fn dealign(&self) -> DealignConfig {
        DealignConfig {
            near_truth_fraction: self.near_truth_fraction,
            mdp: self.mdp.clone(),
            ..DealignConfig::new(self.range, Dimensionality::Two)
        }
    }

    pub fn training_set(&self, pair: &AlignedPair, seed: u64) -> Result<Vec<TrainingSample>> {
        random_dealign(pair, &self.dealign(), seed, 0)
            .take(self.train_samples)
            .collect()
    }

    /// Continuous starts drawn uniformly inside the training range.
    pub fn held_out_starts(&self, pair: &AlignedPair, n: usize, seed: u64) -> Vec<RigidTransform> {
        (0..n as u64)
            .map(|i| {
                perturbed_start(
                    &pair.ground_truth,
                    &self.range,
                    Dimensionality::Two,
                    sample_seed(seed, i),
                )
            })
            .collect()
    }

    /// Fraction of starts whose greedy rollout ends below `success_below`.
    pub fn success_rate(
        &self,
        pair: &AlignedPair,
        policy: &dyn QFunction,
        starts: &[RigidTransform],
    ) -> Result<f64> {
        if starts.is_empty() {
            return Err(VregError::Config("no evaluation starts".into()));
        }
        let mut opts = GreedyOptions::new(self.eval_steps, Dimensionality::Two);
        opts.mdp = self.mdp.clone();
        let mut ok = 0;
        for t0 in starts {
            let (t, _) = greedy_register(&pair.reference, &pair.floating, t0, policy, &opts)?;
            if distance(&pair.ground_truth, &t)? < self.success_below {
                ok += 1;
            }
        }
        Ok(ok as f64 / starts.len() as f64)
    }

    pub fn drl_env(&self, pair: &AlignedPair) -> DrlEnv {
        DrlEnv {
            pairs: vec![DrlPair {
                reference: pair.reference.clone(),
                floating: pair.floating.clone(),
                ground_truth: pair.ground_truth,
            }],
            start_range: self.range.0,
            dim: Dimensionality::Two,
            mdp: self.mdp.clone(),
        }
    }

    /// Supervised training for `train_steps` updates.
    pub fn train_dsl(&self, pair: &AlignedPair, seed: u64) -> Result<DslTrainer> {
        self.validate()?;
        let data = self.training_set(pair, seed)?;
        let mut trainer = DslTrainer::new(self.arch(), self.train_config(seed, self.train_steps))?;
        let mut stream = ShuffledEpochs::new(&data, seed);
        advance_dsl(&mut trainer, &mut stream, self.train_steps)?;
        Ok(trainer)
    }
}

fn advance_dsl(trainer: &mut DslTrainer, stream: &mut ShuffledEpochs, until: usize) -> Result<()> {
    while trainer.step < until {
        let batch = stream
            .by_ref()
            .take(trainer.cfg.batch_size)
            .collect::<Result<Vec<_>>>()?;
        trainer.train_step(&batch)?;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CompareConfig {
    pub task: ToyTask,
    pub drl: DrlConfig,
    /// Update counts at which both learners are evaluated.
    pub checkpoints: Vec<usize>,
    pub seeds: Vec<u64>,
    pub eval_cases: usize,
    pub eval_seed: u64,
    /// Success level used for the steps-to-reach comparison.
    pub target_success: f64,
}

impl Default for CompareConfig {
    fn default() -> Self {
        CompareConfig {
            task: ToyTask::default(),
            drl: DrlConfig {
                epsilon_decay_steps: 800,
                target_update: 100,
                ..DrlConfig::default()
            },
            checkpoints: vec![25, 50, 100, 200, 400, 800],
            seeds: vec![0, 1, 2],
            eval_cases: 50,
            eval_seed: 1000,
            target_success: 0.8,
        }
    }
}

impl CompareConfig {
    pub fn validate(&self) -> Result<()> {
        self.task.validate()?;
        if self.checkpoints.is_empty()
            || self.checkpoints.windows(2).any(|w| w[0] >= w[1])
            || self.checkpoints[0] == 0
        {
            return Err(VregError::Config(
                "checkpoints must be positive and strictly increasing".into(),
            ));
        }
        if self.seeds.is_empty() || self.eval_cases == 0 {
            return Err(VregError::Config(
                "need at least one seed and one evaluation case".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Learner {
    Dsl,
    Drl,
}

impl Learner {
    pub fn name(self) -> &'static str {
        match self {
            Learner::Dsl => "dsl",
            Learner::Drl => "drl",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub learner: Learner,
    pub seed: u64,
    pub step: usize,
    pub success: f64,
}

/// Trains both learners per seed and evaluates them at every checkpoint on
/// the same held-out starts.
pub fn run_compare(cfg: &CompareConfig) -> Result<Vec<CurvePoint>> {
    cfg.validate()?;
    let task = &cfg.task;
    let pair = task.pair()?;
    let starts = task.held_out_starts(&pair, cfg.eval_cases, cfg.eval_seed);
    let env = task.drl_env(&pair);
    let last = *cfg.checkpoints.last().unwrap_or(&0);
    let mut points = Vec::new();
    for &seed in &cfg.seeds {
        let data = task.training_set(&pair, seed)?;
        let mut dsl = DslTrainer::new(task.arch(), task.train_config(seed, last))?;
        let mut stream = ShuffledEpochs::new(&data, seed);
        for &c in &cfg.checkpoints {
            advance_dsl(&mut dsl, &mut stream, c)?;
            let success = task.success_rate(&pair, &dsl.net, &starts)?;
            log::info!("dsl seed {seed} step {c}: success {success}");
            points.push(CurvePoint {
                learner: Learner::Dsl,
                seed,
                step: c,
                success,
            });
        }
        let mut drl = DrlTrainer::new(task.arch(), task.train_config(seed, last), cfg.drl.clone())?;
        for &c in &cfg.checkpoints {
            while drl.step < c {
                drl.train_step(&env)?;
            }
            let success = task.success_rate(&pair, &drl.net, &starts)?;
            log::info!("drl seed {seed} step {c}: success {success}");
            points.push(CurvePoint {
                learner: Learner::Drl,
                seed,
                step: c,
                success,
            });
        }
    }
    Ok(points)
}

/// Seed-averaged success per checkpoint, in step order.
pub fn mean_curve(points: &[CurvePoint], learner: Learner) -> Vec<(usize, f64)> {
    let mut steps: Vec<usize> = points
        .iter()
        .filter(|p| p.learner == learner)
        .map(|p| p.step)
        .collect();
    steps.sort_unstable();
    steps.dedup();
    steps
        .into_iter()
        .map(|s| {
            let vals: Vec<f64> = points
                .iter()
                .filter(|p| p.learner == learner && p.step == s)
                .map(|p| p.success)
                .collect();
            (s, vals.iter().sum::<f64>() / vals.len() as f64)
        })
        .collect()
}

/// First checkpoint at which the curve reaches `target`.
pub fn steps_to_reach(curve: &[(usize, f64)], target: f64) -> Option<usize> {
    curve.iter().find(|(_, s)| *s >= target).map(|(s, _)| *s)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareVerdict {
    /// Supervised mean success ≥ Q-learning mean success at every checkpoint.
    pub dsl_never_behind: bool,
    pub dsl_steps_to_target: Option<usize>,
    pub drl_steps_to_target: Option<usize>,
    /// Supervised learner reaches the target in at most half the updates.
    /// A Q-learner that never reaches it needs more than the last checkpoint.
    pub dsl_twice_as_fast: bool,
}

pub fn verdict(points: &[CurvePoint], target: f64) -> CompareVerdict {
    let dsl = mean_curve(points, Learner::Dsl);
    let drl = mean_curve(points, Learner::Drl);
    let dsl_never_behind = dsl.len() == drl.len()
        && dsl
            .iter()
            .zip(&drl)
            .all(|((a, x), (b, y))| a == b && x >= y);
    let ds = steps_to_reach(&dsl, target);
    let dr = steps_to_reach(&drl, target);
    let last = drl.last().map_or(0, |(s, _)| *s);
    let dsl_twice_as_fast = match (ds, dr) {
        (Some(d), Some(r)) => 2 * d <= r,
        (Some(d), None) => 2 * d <= last,
        _ => false,
    };
    CompareVerdict {
        dsl_never_behind,
        dsl_steps_to_target: ds,
        drl_steps_to_target: dr,
        dsl_twice_as_fast,
    }
}

pub fn curves_csv(points: &[CurvePoint]) -> String {
    let mut out = String::from("learner,seed,step,success\n");
    for p in points {
        let _ = writeln!(
            out,
            "{},{},{},{}",
            p.learner.name(),
            p.seed,
            p.step,
            p.success
        );
    }
    out
}

/// Seed-averaged success against training steps on a log2 step axis.
pub fn curves_svg(points: &[CurvePoint]) -> String {
    let (w, h, m) = (480.0, 300.0, 45.0);
    let curves = [
        (Learner::Dsl, "#c0392b", mean_curve(points, Learner::Dsl)),
        (Learner::Drl, "#2e6db4", mean_curve(points, Learner::Drl)),
    ];
    let steps: Vec<f64> = curves
        .iter()
        .flat_map(|(_, _, c)| c.iter().map(|(s, _)| (*s as f64).log2()))
        .collect();
    let lo = steps.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = steps.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let span = if hi > lo { hi - lo } else { 1.0 };
    let x = |s: usize| m + ((s as f64).log2() - lo) / span * (w - 2.0 * m);
    let y = |v: f64| h - m - v * (h - 2.0 * m);
    let mut svg = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" font-family=\"sans-serif\" font-size=\"11\">\n"
    );
    let _ = writeln!(
        svg,
        "<polyline points=\"{m},{m} {m},{} {},{}\" fill=\"none\" stroke=\"black\"/>",
        h - m,
        w - m,
        h - m
    );
    let _ = writeln!(
        svg,
        "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">training steps</text>",
        w / 2.0,
        h - 8.0
    );
    let _ = writeln!(svg, "<text x=\"12\" y=\"{}\" transform=\"rotate(-90 12 {})\" text-anchor=\"middle\">success rate</text>", h / 2.0, h / 2.0);
    if let Some((_, _, c)) = curves.first() {
        for (s, _) in c {
            let _ = writeln!(
                svg,
                "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">{s}</text>",
                x(*s),
                h - m + 14.0
            );
        }
    }
    for (i, (learner, colour, c)) in curves.iter().enumerate() {
        let pts: Vec<String> = c
            .iter()
            .map(|(s, v)| format!("{:.1},{:.1}", x(*s), y(*v)))
            .collect();
        let _ = writeln!(
            svg,
            "<polyline points=\"{}\" fill=\"none\" stroke=\"{colour}\" stroke-width=\"2\"/>",
            pts.join(" ")
        );
        let _ = writeln!(
            svg,
            "<text x=\"{}\" y=\"{}\" fill=\"{colour}\">{}</text>",
            w - m - 40.0,
            m + 14.0 * i as f64,
            learner.name()
        );
    }
    svg.push_str("</svg>\n");
    svg
}

#[cfg(test)]
mod tests {
    use super::*;

    fn point(learner: Learner, seed: u64, step: usize, success: f64) -> CurvePoint {
        CurvePoint {
            learner,
            seed,
            step,
            success,
        }
    }

    #[test]
    fn mean_curve_and_steps_to_reach() {
        let pts = vec![
            point(Learner::Dsl, 0, 10, 0.5),
            point(Learner::Dsl, 1, 10, 1.0),
            point(Learner::Dsl, 0, 20, 1.0),
            point(Learner::Dsl, 1, 20, 1.0),
        ];
        let c = mean_curve(&pts, Learner::Dsl);
        assert_eq!(c, vec![(10, 0.75), (20, 1.0)]);
        assert_eq!(steps_to_reach(&c, 0.8), Some(20));
        assert_eq!(steps_to_reach(&c, 0.7), Some(10));
        assert_eq!(steps_to_reach(&c, 1.1), None);
    }

    #[test]
    fn verdict_rules() {
        let mk = |dsl: [f64; 3], drl: [f64; 3]| {
            let mut v = Vec::new();
            for (i, s) in [100, 200, 400].into_iter().enumerate() {
                v.push(point(Learner::Dsl, 0, s, dsl[i]));
                v.push(point(Learner::Drl, 0, s, drl[i]));
            }
            v
        };
        let v = verdict(&mk([0.9, 1.0, 1.0], [0.1, 0.5, 0.9]), 0.8);
        assert!(v.dsl_never_behind && v.dsl_twice_as_fast);
        assert_eq!(
            (v.dsl_steps_to_target, v.drl_steps_to_target),
            (Some(100), Some(400))
        );
        let v = verdict(&mk([0.5, 0.6, 0.9], [0.1, 0.5, 0.9]), 0.8);
        assert!(v.dsl_never_behind && !v.dsl_twice_as_fast);
        let v = verdict(&mk([0.5, 0.9, 1.0], [0.6, 0.5, 0.5]), 0.8);
        assert!(!v.dsl_never_behind && v.dsl_twice_as_fast);
        let v = verdict(&mk([0.1, 0.1, 0.1], [0.0, 0.0, 0.0]), 0.8);
        assert!(!v.dsl_twice_as_fast);
    }

    #[test]
    fn toy_task_defaults_validate() {
        let t = ToyTask::default();
        t.validate().unwrap();
        assert_eq!(t.arch().arity().unwrap(), 6);
        let pair = t.pair().unwrap();
        let starts = t.held_out_starts(&pair, 20, 3);
        assert_eq!(starts, t.held_out_starts(&pair, 20, 3));
        for s in &starts {
            let v = crate::geometry::residual_params(&pair.ground_truth, s).unwrap();
            assert!(t.range.contains(&v));
        }
        CompareConfig::default().validate().unwrap();
        let bad = CompareConfig {
            checkpoints: vec![50, 25],
            ..CompareConfig::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn oracle_solves_the_toy_task() {
        let t = ToyTask::default();
        let pair = t.pair().unwrap();
        let starts = t.held_out_starts(&pair, 10, 7);
        let oracle =
            crate::policy::OraclePolicy::new(pair.ground_truth, Dimensionality::Two, t.mdp.clone());
        assert_eq!(t.success_rate(&pair, &oracle, &starts).unwrap(), 1.0);
    }

    #[test]
    fn svg_and_csv_render() {
        let pts = vec![
            point(Learner::Dsl, 0, 10, 0.5),
            point(Learner::Drl, 0, 10, 0.25),
        ];
        assert_eq!(curves_csv(&pts).lines().count(), 3);
        let svg = curves_svg(&pts);
        assert!(svg.contains("dsl") && svg.contains("drl"));
    }
}
