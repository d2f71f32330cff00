//! Accuracy metrics and benchmark aggregation.

use std::fmt::Write as _;
use std::time::Instant;

use nalgebra::{Point3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::augment::{sample_seed, AlignedPair, PerturbRange};
use crate::baseline::{optimize_registration, OptimizerSchedule};
use crate::env::{Dimensionality, MdpConfig};
use crate::error::{Result, VregError};
use crate::geometry::{
    compose, distance, invert, transform_from_params, ParamVector, RigidTransform,
};
pub use crate::hierarchy::percentile_nearest_rank as percentile;
use crate::hierarchy::{hierarchical_register, HierarchyConfig};
use crate::nn::Network;
use crate::policy::{greedy_register, GreedyOptions, OraclePolicy, QFunction};
use crate::volume::Ellipsoid;

pub const TRE_SUCCESS_MM: f64 = 10.0;
pub const MME_SUCCESS_MM: f64 = 20.0;

/// Mean `‖T_est p − T_gt p‖` over the landmarks.
pub fn tre(
    landmarks: &[Point3<f64>],
    t_est: &RigidTransform,
    t_gt: &RigidTransform,
) -> Result<f64> {
    if landmarks.is_empty() {
        return Err(VregError::Config("TRE needs at least one landmark".into()));
    }
    let sum: f64 = landmarks
        .iter()
        .map(|p| (t_est.apply(p) - t_gt.apply(p)).norm())
        .sum();
    Ok(sum / landmarks.len() as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TriangleMesh {
    vertices: Vec<Point3<f64>>,
    triangles: Vec<[usize; 3]>,
}

impl TriangleMesh {
    pub fn new(vertices: Vec<Point3<f64>>, triangles: Vec<[usize; 3]>) -> Result<Self> {
        if vertices.is_empty() || triangles.is_empty() {
            return Err(VregError::Config("empty mesh".into()));
        }
        for t in &triangles {
            if t.iter().any(|&i| i >= vertices.len()) {
                return Err(VregError::Config(format!("triangle {t:?} out of range")));
            }
            let [a, b, c] = t.map(|i| vertices[i]);
            if (b - a).cross(&(c - a)).norm() / 2.0 <= 1e-9 {
                return Err(VregError::Config(format!("degenerate triangle {t:?}")));
            }
        }
        Ok(TriangleMesh {
            vertices,
            triangles,
        })
    }

    pub fn vertices(&self) -> &[Point3<f64>] {
        &self.vertices
    }

    pub fn triangles(&self) -> &[[usize; 3]] {
        &self.triangles
    }

    /// Exact distance from `p` to the nearest triangle.
    pub fn distance_to(&self, p: &Point3<f64>) -> f64 {
        self.triangles
            .iter()
            .map(|t| {
                let [a, b, c] = t.map(|i| self.vertices[i]);
                point_triangle_distance(p, &a, &b, &c)
            })
            .fold(f64::INFINITY, f64::min)
    }

    /// Latitude/longitude tessellation of an ellipsoid surface.
    pub fn ellipsoid(e: &Ellipsoid, rings: usize, segments: usize) -> Result<Self> {
        let rings = rings.max(2);
        let segments = segments.max(3);
        let mut vertices = vec![e.surface_point(Vector3::z())];
        for r in 1..rings {
            let theta = std::f64::consts::PI * r as f64 / rings as f64;
            for s in 0..segments {
                let phi = 2.0 * std::f64::consts::PI * s as f64 / segments as f64;
                let d = Vector3::new(
                    theta.sin() * phi.cos(),
                    theta.sin() * phi.sin(),
                    theta.cos(),
                );
                vertices.push(e.surface_point(d));
            }
        }
        vertices.push(e.surface_point(-Vector3::z()));
        let last = vertices.len() - 1;
        let ring = |r: usize, s: usize| 1 + (r - 1) * segments + s % segments;
        let mut triangles = Vec::new();
        for s in 0..segments {
            triangles.push([0, ring(1, s), ring(1, s + 1)]);
            triangles.push([last, ring(rings - 1, s + 1), ring(rings - 1, s)]);
        }
        for r in 1..rings - 1 {
            for s in 0..segments {
                triangles.push([ring(r, s), ring(r + 1, s), ring(r + 1, s + 1)]);
                triangles.push([ring(r, s), ring(r + 1, s + 1), ring(r, s + 1)]);
            }
        }
        TriangleMesh::new(vertices, triangles)
    }
}

/// Closest-point distance from `p` to triangle `abc`, resolving the face,
/// edge and vertex regions.
pub fn point_triangle_distance(
    p: &Point3<f64>,
    a: &Point3<f64>,
    b: &Point3<f64>,
    c: &Point3<f64>,
) -> f64 {
    (p - closest_point_on_triangle(p, a, b, c)).norm()
}

fn closest_point_on_triangle(
    p: &Point3<f64>,
    a: &Point3<f64>,
    b: &Point3<f64>,
    c: &Point3<f64>,
) -> Point3<f64> {
    let ab = b - a;
    let ac = c - a;
    let ap = p - a;
    let d1 = ab.dot(&ap);
    let d2 = ac.dot(&ap);
    if d1 <= 0.0 && d2 <= 0.0 {
        return *a;
    }
    let bp = p - b;
    let d3 = ab.dot(&bp);
    let d4 = ac.dot(&bp);
    if d3 >= 0.0 && d4 <= d3 {
        return *b;
    }
    let vc = d1 * d4 - d3 * d2;
    if vc <= 0.0 && d1 >= 0.0 && d3 <= 0.0 {
        return a + ab * (d1 / (d1 - d3));
    }
    let cp = p - c;
    let d5 = ab.dot(&cp);
    let d6 = ac.dot(&cp);
    if d6 >= 0.0 && d5 <= d6 {
        return *c;
    }
    let vb = d5 * d2 - d1 * d6;
    if vb <= 0.0 && d2 >= 0.0 && d6 <= 0.0 {
        return a + ac * (d2 / (d2 - d6));
    }
    let va = d3 * d6 - d5 * d4;
    if va <= 0.0 && (d4 - d3) >= 0.0 && (d5 - d6) >= 0.0 {
        return b + (c - b) * ((d4 - d3) / ((d4 - d3) + (d5 - d6)));
    }
    let denom = 1.0 / (va + vb + vc);
    a + ab * (vb * denom) + ac * (vc * denom)
}

/// Mean distance from the `t`-mapped floating vertices to the reference mesh.
pub fn mme(mesh_ref: &TriangleMesh, mesh_float: &TriangleMesh, t: &RigidTransform) -> f64 {
    let sum: f64 = mesh_float
        .vertices
        .iter()
        .map(|v| mesh_ref.distance_to(&t.apply(v)))
        .sum();
    sum / mesh_float.vertices.len() as f64
}

/// Fraction of errors at or below `threshold`.
pub fn success_rate(errors: &[f64], threshold: f64) -> Result<f64> {
    if errors.is_empty() {
        return Err(VregError::Config("no errors to rate".into()));
    }
    Ok(errors.iter().filter(|e| **e <= threshold).count() as f64 / errors.len() as f64)
}

/// One benchmark case: an aligned pair with optional landmarks.
#[derive(Debug, Clone)]
pub struct TestCase {
    pub name: String,
    pub pair: AlignedPair,
}

/// Output of one registration run.
#[derive(Debug, Clone, PartialEq)]
pub struct Registered {
    pub transform: RigidTransform,
    pub steps: usize,
}

pub trait RegistrationMethod {
    fn name(&self) -> &str;
    fn register(&self, case: &TestCase, t0: &RigidTransform) -> Result<Registered>;
}

/// Returns the ground truth.
pub struct GroundTruthMethod;

impl RegistrationMethod for GroundTruthMethod {
    fn name(&self) -> &str {
        "oracle"
    }

    fn register(&self, case: &TestCase, _t0: &RigidTransform) -> Result<Registered> {
        Ok(Registered {
            transform: case.pair.ground_truth,
            steps: 0,
        })
    }
}

/// Returns the start pose.
pub struct IdentityMethod;

impl RegistrationMethod for IdentityMethod {
    fn name(&self) -> &str {
        "identity"
    }

    fn register(&self, _case: &TestCase, t0: &RigidTransform) -> Result<Registered> {
        Ok(Registered {
            transform: *t0,
            steps: 0,
        })
    }
}

/// Greedy rollout of a fixed policy.
pub struct AgentMethod<Q: QFunction> {
    pub name: String,
    pub policy: Q,
    pub options: GreedyOptions,
}

impl<Q: QFunction> RegistrationMethod for AgentMethod<Q> {
    fn name(&self) -> &str {
        &self.name
    }

    fn register(&self, case: &TestCase, t0: &RigidTransform) -> Result<Registered> {
        let (t, traj) = greedy_register(
            &case.pair.reference,
            &case.pair.floating,
            t0,
            &self.policy,
            &self.options,
        )?;
        Ok(Registered {
            transform: t,
            steps: traj.len(),
        })
    }
}

/// Greedy rollout of the ground-truth oracle of each case.
pub struct OracleAgentMethod {
    pub steps: usize,
    pub dim: Dimensionality,
    pub mdp: MdpConfig,
}

impl RegistrationMethod for OracleAgentMethod {
    fn name(&self) -> &str {
        "oracle-agent"
    }

    fn register(&self, case: &TestCase, t0: &RigidTransform) -> Result<Registered> {
        let oracle = OraclePolicy::new(case.pair.ground_truth, self.dim, self.mdp.clone());
        let mut opts = GreedyOptions::new(self.steps, self.dim);
        opts.mdp = self.mdp.clone();
        let (t, traj) = greedy_register(
            &case.pair.reference,
            &case.pair.floating,
            t0,
            &oracle,
            &opts,
        )?;
        Ok(Registered {
            transform: t,
            steps: traj.len(),
        })
    }
}

/// Two-stage agent. Without networks each case uses its own oracle.
pub struct HierarchicalMethod {
    pub networks: Option<(Network, Network)>,
    pub config: HierarchyConfig,
}

impl RegistrationMethod for HierarchicalMethod {
    fn name(&self) -> &str {
        if self.networks.is_some() {
            "hierarchical"
        } else {
            "hierarchical-oracle"
        }
    }

    fn register(&self, case: &TestCase, t0: &RigidTransform) -> Result<Registered> {
        let gt = case.pair.ground_truth;
        let (t, report) = match &self.networks {
            Some((coarse, fine)) => hierarchical_register(
                &case.pair.reference,
                &case.pair.floating,
                t0,
                coarse,
                fine,
                &self.config,
                Some(&gt),
            )?,
            None => {
                let oracle = OraclePolicy::new(gt, self.config.dim, self.config.mdp.clone());
                hierarchical_register(
                    &case.pair.reference,
                    &case.pair.floating,
                    t0,
                    &oracle,
                    &oracle,
                    &self.config,
                    Some(&gt),
                )?
            }
        };
        Ok(Registered {
            transform: t,
            steps: report.coarse.steps + report.fine.as_ref().map_or(0, |f| f.steps),
        })
    }
}

/// Multi-resolution mutual-information optimiser.
pub struct MutualInformationMethod {
    pub schedule: OptimizerSchedule,
}

impl RegistrationMethod for MutualInformationMethod {
    fn name(&self) -> &str {
        "mutual-information"
    }

    fn register(&self, case: &TestCase, t0: &RigidTransform) -> Result<Registered> {
        let (t, trace) = optimize_registration(
            &case.pair.reference,
            &case.pair.floating,
            t0,
            &self.schedule,
        )?;
        Ok(Registered {
            transform: t,
            steps: trace.len(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchmarkConfig {
    pub perturbations: usize,
    pub range: PerturbRange,
    pub dim: Dimensionality,
    pub seed: u64,
    pub threshold: f64,
    /// Write measured run times; off keeps reports bit-reproducible.
    pub record_wallclock: bool,
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        BenchmarkConfig {
            perturbations: 10,
            range: PerturbRange::COARSE,
            dim: Dimensionality::Three,
            seed: 0,
            threshold: TRE_SUCCESS_MM,
            record_wallclock: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseRow {
    pub method: String,
    pub case: String,
    pub seed: u64,
    pub init_err: f64,
    pub final_err: f64,
    pub success: bool,
    pub steps: usize,
    pub wallclock_ms: u64,
}

/// TRE over the case landmarks, or `D` when there are none.
pub fn case_error(case: &TestCase, t: &RigidTransform) -> Result<f64> {
    if case.pair.landmarks.is_empty() {
        distance(&case.pair.ground_truth, t)
    } else {
        tre(&case.pair.landmarks, t, &case.pair.ground_truth)
    }
}

/// Uniform continuous start pose inside `range`, over the active axes.
pub fn perturbed_start(
    gt: &RigidTransform,
    range: &PerturbRange,
    dim: Dimensionality,
    seed: u64,
) -> RigidTransform {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut v = ParamVector::ZERO;
    for axis in dim.axes() {
        let b = range.0[axis.index()];
        if b > 0.0 {
            v[axis.index()] = rng.random_range(-b..=b);
        }
    }
    compose(&invert(&transform_from_params(&v)), gt)
}

/// Runs every method on every case under `perturbations` seeded starts.
/// Failures are recorded as unsuccessful rows at the starting error.
pub fn benchmark(
    methods: &[&dyn RegistrationMethod],
    cases: &[TestCase],
    cfg: &BenchmarkConfig,
) -> Result<Vec<CaseRow>> {
    if cases.is_empty() {
        return Err(VregError::Config("no test cases".into()));
    }
    let mut rows = Vec::new();
    for (ci, case) in cases.iter().enumerate() {
        for k in 0..cfg.perturbations {
            let seed = sample_seed(cfg.seed, (ci * 1_000_003 + k) as u64);
            let t0 = perturbed_start(&case.pair.ground_truth, &cfg.range, cfg.dim, seed);
            let init_err = case_error(case, &t0)?;
            for m in methods {
                let started = Instant::now();
                let (final_err, steps) = match m.register(case, &t0) {
                    Ok(r) => (case_error(case, &r.transform)?, r.steps),
                    Err(e) => {
                        log::warn!("{} failed on {} seed {seed}: {e}", m.name(), case.name);
                        (init_err, 0)
                    }
                };
                rows.push(CaseRow {
                    method: m.name().to_string(),
                    case: case.name.clone(),
                    seed,
                    init_err,
                    final_err,
                    success: final_err <= cfg.threshold,
                    steps,
                    wallclock_ms: if cfg.record_wallclock {
                        started.elapsed().as_millis() as u64
                    } else {
                        0
                    },
                });
            }
        }
    }
    Ok(rows)
}

pub fn cases_csv(rows: &[CaseRow]) -> String {
    let mut out = String::from("method,case,seed,init_err,final_err,success,steps,wallclock_ms\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            r.method, r.case, r.seed, r.init_err, r.final_err, r.success, r.steps, r.wallclock_ms
        );
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub method: String,
    pub cases: usize,
    pub success_rate: f64,
    pub p10: f64,
    pub p50: f64,
    pub p90: f64,
}

/// Per-method success rate and 10/50/90th percentiles of the final error,
/// in first-seen method order.
pub fn summarize(rows: &[CaseRow]) -> Vec<SummaryRow> {
    let mut names: Vec<&str> = Vec::new();
    for r in rows {
        if !names.contains(&r.method.as_str()) {
            names.push(&r.method);
        }
    }
    names
        .into_iter()
        .map(|name| {
            let mine: Vec<&CaseRow> = rows.iter().filter(|r| r.method == name).collect();
            let errs: Vec<f64> = mine.iter().map(|r| r.final_err).collect();
            SummaryRow {
                method: name.to_string(),
                cases: mine.len(),
                success_rate: mine.iter().filter(|r| r.success).count() as f64 / mine.len() as f64,
                p10: percentile(&errs, 10.0),
                p50: percentile(&errs, 50.0),
                p90: percentile(&errs, 90.0),
            }
        })
        .collect()
}

pub fn summary_csv(rows: &[SummaryRow]) -> String {
    let mut out = String::from("method,cases,success_rate,p10,p50,p90\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{}",
            r.method, r.cases, r.success_rate, r.p10, r.p50, r.p90
        );
    }
    out
}

/// Bar chart of success rates with the 10–90th percentile error range
/// printed under each bar.
pub fn summary_svg(rows: &[SummaryRow]) -> String {
    let bar_w = 80.0;
    let gap = 30.0;
    let height = 200.0;
    let width = gap + rows.len() as f64 * (bar_w + gap);
    let mut svg = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{width}\" height=\"{}\" font-family=\"sans-serif\" font-size=\"11\">\n",
        height + 70.0
    );
    let _ = writeln!(
        svg,
        "<line x1=\"{gap}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"black\"/>",
        height + 10.0,
        width - gap / 2.0,
        height + 10.0
    );
    for (i, r) in rows.iter().enumerate() {
        let x = gap + i as f64 * (bar_w + gap);
        let h = r.success_rate * height;
        let _ = writeln!(
            svg,
            "<rect x=\"{x}\" y=\"{}\" width=\"{bar_w}\" height=\"{h}\" fill=\"#4a7ab7\"/>",
            height + 10.0 - h
        );
        let _ = writeln!(
            svg,
            "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">{:.0}%</text>",
            x + bar_w / 2.0,
            height + 5.0 - h,
            r.success_rate * 100.0
        );
        let _ = writeln!(
            svg,
            "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">{}</text>",
            x + bar_w / 2.0,
            height + 28.0,
            r.method
        );
        let _ = writeln!(
            svg,
            "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">{:.1}/{:.1}/{:.1} mm</text>",
            x + bar_w / 2.0,
            height + 46.0,
            r.p10,
            r.p50,
            r.p90
        );
    }
    svg.push_str("</svg>\n");
    svg
}
