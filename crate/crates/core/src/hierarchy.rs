//! Coarse-to-fine registration with saliency-guided region of interest.

use std::time::Instant;

use nalgebra::Point3;
use serde::{Deserialize, Serialize};

use crate::env::{Dimensionality, MdpConfig, TrajectoryStep};
use crate::error::{Result, VregError};
use crate::geometry::{distance_weighted, RigidTransform};
use crate::nn::{Network, NormMode};
use crate::policy::{greedy_register, greedy_rollout, GreedyOptions, QFunction, TopKRandomization};
use crate::volume::{
    crop_roi, difference_image, difference_on_grid, downsample, Observation, Volume,
};

/// `|∂(Σ_i y_i) / ∂d|` per voxel, from one backward pass at inference mode.
pub fn saliency_map(net: &Network, obs: &Observation) -> Result<Volume> {
    let x = net.observation_input(obs)?;
    let (y, cache) = net.forward(&x, 1, NormMode::Running)?;
    let (_, dx) = net.backward(&cache, &vec![1.0; y.len()]);
    Volume::new(*obs.grid(), dx.into_iter().map(f64::abs).collect())
}

/// Nearest-rank percentile of `values` (`p` in percent).
pub fn percentile_nearest_rank(values: &[f64], p: f64) -> f64 {
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let rank = ((p / 100.0) * sorted.len() as f64).ceil().max(1.0) as usize;
    sorted[rank.min(sorted.len()) - 1]
}

/// Importance-weighted centroid of the voxels at or above the given
/// percentile of `omega`.
pub fn attention_center(omega: &Volume, percentile: f64) -> Result<Point3<f64>> {
    if !(percentile > 0.0 && percentile < 100.0) {
        return Err(VregError::Config(format!(
            "percentile {percentile} not in (0,100)"
        )));
    }
    let (lo, hi) = omega.min_max();
    if lo == hi {
        return Err(VregError::EmptySelection);
    }
    let threshold = percentile_nearest_rank(omega.data(), percentile);
    let grid = omega.grid();
    let mut acc = nalgebra::Vector3::zeros();
    let mut total = 0.0;
    for (idx, &w) in omega.data().iter().enumerate() {
        if w >= threshold && w > 0.0 {
            let [i, j, k] = grid.coords_of(idx);
            acc += grid.physical(i, j, k).coords * w;
            total += w;
        }
    }
    if total == 0.0 {
        return Err(VregError::EmptySelection);
    }
    Ok(Point3::from(acc / total))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HierarchyConfig {
    pub n1: usize,
    pub n2: usize,
    /// Downsampling factor of the coarse stage.
    pub coarse_factor: usize,
    /// ROI size in voxels of the full-resolution images.
    pub roi_size: [usize; 3],
    pub percentile: f64,
    pub dim: Dimensionality,
    pub mdp: MdpConfig,
    pub randomize: Option<TopKRandomization>,
    pub record_wallclock: bool,
}

impl Default for HierarchyConfig {
    fn default() -> Self {
        HierarchyConfig {
            n1: 200,
            n2: 100,
            coarse_factor: 2,
            roi_size: [32, 32, 32],
            percentile: 95.0,
            dim: Dimensionality::Three,
            mdp: MdpConfig::default(),
            randomize: None,
            record_wallclock: false,
        }
    }
}

/// Serializable trajectory row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub params: [f64; 6],
    pub action: String,
    pub residual: Option<[f64; 6]>,
    pub reward: Option<f64>,
    pub q: Option<f64>,
}

impl From<&TrajectoryStep> for StepRecord {
    fn from(s: &TrajectoryStep) -> Self {
        StepRecord {
            step: s.step,
            params: s.params.0,
            action: s.action.to_string(),
            residual: s.residual.map(|v| v.0),
            reward: s.reward,
            q: s.q_target,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageReport {
    pub steps: usize,
    pub d_before: Option<f64>,
    pub d_after: Option<f64>,
    pub wallclock_ms: u64,
    pub trajectory: Vec<StepRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoiBox {
    pub center_mm: [f64; 3],
    pub size: [usize; 3],
    /// The saliency selection was empty and the image centre was used.
    pub fallback: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HierarchyReport {
    pub coarse: StageReport,
    pub roi: Option<RoiBox>,
    pub fine: Option<StageReport>,
    pub final_params: [f64; 6],
}

fn stage_report(
    traj: &[TrajectoryStep],
    before: &RigidTransform,
    after: &RigidTransform,
    gt: Option<&RigidTransform>,
    mdp: &MdpConfig,
    started: Instant,
    record: bool,
) -> Result<StageReport> {
    let d = |t: &RigidTransform| {
        gt.map(|g| distance_weighted(g, t, &mdp.weights))
            .transpose()
    };
    Ok(StageReport {
        steps: traj.len(),
        d_before: d(before)?,
        d_after: d(after)?,
        wallclock_ms: if record {
            started.elapsed().as_millis() as u64
        } else {
            0
        },
        trajectory: traj.iter().map(StepRecord::from).collect(),
    })
}

/// Coarse rollout on downsampled images, saliency at the final coarse pose,
/// then a fine rollout on a full-resolution ROI around the attention centre.
pub fn hierarchical_register(
    reference: &Volume,
    floating: &Volume,
    t0: &RigidTransform,
    coarse: &dyn QFunction,
    fine: &dyn QFunction,
    cfg: &HierarchyConfig,
    ground_truth: Option<&RigidTransform>,
) -> Result<(RigidTransform, HierarchyReport)> {
    let opts = |steps| GreedyOptions {
        steps,
        dim: cfg.dim,
        mdp: cfg.mdp.clone(),
        randomize: cfg.randomize.clone(),
        ground_truth: ground_truth.copied(),
    };
    let started = Instant::now();
    let ref_c = downsample(reference, cfg.coarse_factor);
    let flo_c = downsample(floating, cfg.coarse_factor);
    let (t1, traj1) = greedy_register(&ref_c, &flo_c, t0, coarse, &opts(cfg.n1))?;
    let coarse_report = stage_report(
        &traj1,
        t0,
        &t1,
        ground_truth,
        &cfg.mdp,
        started,
        cfg.record_wallclock,
    )?;
    let mut report = HierarchyReport {
        coarse: coarse_report,
        roi: None,
        fine: None,
        final_params: t1.params()?.0,
    };
    if cfg.n2 == 0 {
        return Ok((t1, report));
    }

    let started = Instant::now();
    let attention = match coarse.network() {
        Some(net) => {
            let obs = difference_image(&ref_c, &flo_c, &t1)?;
            match attention_center(&saliency_map(net, &obs)?, cfg.percentile) {
                Ok(c) => Some(c),
                Err(VregError::EmptySelection) => None,
                Err(e) => return Err(e),
            }
        }
        None => None,
    };
    let fallback = attention.is_none();
    let center = attention.unwrap_or_else(|| reference.grid().center());
    let mut size = cfg.roi_size;
    if reference.grid().is_2d() {
        size[2] = 1;
    }
    let roi_ref = crop_roi(reference, &center, size);
    let (t2, traj2) = greedy_rollout(
        |t| Ok(difference_on_grid(&roi_ref, floating, t)),
        &t1,
        fine,
        &opts(cfg.n2),
    )?;
    report.roi = Some(RoiBox {
        center_mm: [center.x, center.y, center.z],
        size,
        fallback,
    });
    report.fine = Some(stage_report(
        &traj2,
        &t1,
        &t2,
        ground_truth,
        &cfg.mdp,
        started,
        cfg.record_wallclock,
    )?);
    report.final_params = t2.params()?.0;
    Ok((t2, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{distance, transform_from_params, ParamVector};
    use crate::nn::ArchSpec;
    use crate::policy::OraclePolicy;
    use crate::volume::{generate_phantom, Grid, PhantomKind, PhantomSpec};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn grid(n: usize) -> Grid {
        Grid::centered([n, n, 1], [1.0; 3]).unwrap()
    }

    #[test]
    fn linear_network_saliency_is_column_sums() {
        let mut net = Network::init(ArchSpec::linear([4, 4, 1], 3), 1).unwrap();
        let w = net.tensors()[0].clone();
        net.tensors_mut()[1] = vec![0.5, -2.0, 7.0];
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..3 {
            let obs = Volume::from_fn(grid(4), |_| rng.random_range(-1.0..1.0));
            let map = saliency_map(&net, &obs).unwrap();
            for i in 0..16 {
                let col: f64 = (0..3).map(|o| w[o * 16 + i]).sum();
                assert!((map.data()[i] - col.abs()).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn saliency_matches_finite_differences() {
        let net = Network::init(ArchSpec::desk([16, 16, 1], 6, true), 4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let obs = Volume::from_fn(grid(16), |_| rng.random_range(-1.0..1.0));
        let map = saliency_map(&net, &obs).unwrap();
        let sum =
            |d: &[f64]| -> f64 { net.forward(d, 1, NormMode::Running).unwrap().0.iter().sum() };
        let mut x = obs.data().to_vec();
        for _ in 0..100 {
            let i = rng.random_range(0..x.len());
            let v = x[i];
            x[i] = v + 1e-4;
            let up = sum(&x);
            x[i] = v - 1e-4;
            let down = sum(&x);
            x[i] = v;
            let fd = ((up - down) / 2e-4).abs();
            let a = map.data()[i];
            assert!((a - fd).abs() <= 1e-3 * a.max(fd).max(1e-6), "{a} vs {fd}");
        }
    }

    #[test]
    fn zero_network_gives_zero_map_and_bias_is_irrelevant() {
        let net = Network::zeros(ArchSpec::desk([8, 8, 1], 6, true)).unwrap();
        let obs = Volume::from_fn(grid(8), |p| p.x);
        assert!(saliency_map(&net, &obs)
            .unwrap()
            .data()
            .iter()
            .all(|v| *v == 0.0));

        let mut a = Network::init(ArchSpec::desk([8, 8, 1], 6, true), 3).unwrap();
        let before = saliency_map(&a, &obs).unwrap();
        let b = a.output_bias_index().unwrap();
        a.tensors_mut()[b].iter_mut().for_each(|x| *x += 4.0);
        assert_eq!(saliency_map(&a, &obs).unwrap(), before);
    }

    #[test]
    fn attention_center_examples() {
        let g = grid(9);
        let mut data = vec![0.0; 81];
        data[g.linear_index(2, 7, 0)] = 5.0;
        let one = Volume::new(g, data.clone()).unwrap();
        let p = attention_center(&one, 95.0).unwrap();
        assert_eq!(p, g.physical(2, 7, 0));

        data[g.linear_index(6, 1, 0)] = 5.0;
        let two = Volume::new(g, data).unwrap();
        let p = attention_center(&two, 95.0).unwrap();
        let (a, b) = (g.physical(2, 7, 0), g.physical(6, 1, 0));
        assert!((p - nalgebra::center(&a, &b)).norm() < 1e-12);

        let flat = Volume::from_fn(g, |_| 1.0);
        assert!(matches!(
            attention_center(&flat, 95.0),
            Err(VregError::EmptySelection)
        ));
    }

    #[test]
    fn gaussian_blob_center_is_found() {
        let g = Grid::centered([32, 32, 1], [1.5, 1.5, 1.0]).unwrap();
        let c = Point3::new(7.3, -4.1, 0.0);
        let omega = Volume::from_fn(g, |p| (-(p - c).norm_squared() / 18.0).exp());
        let p = attention_center(&omega, 95.0).unwrap();
        assert!((p - c).norm() < 1.5, "{p}");
    }

    #[test]
    fn attention_center_is_translation_equivariant() {
        let g = grid(20);
        let blob = |cx: f64| {
            Volume::from_fn(g, move |p| {
                (-((p.x - cx).powi(2) + (p.y - 1.0).powi(2)) / 4.0).exp()
            })
        };
        let a = attention_center(&blob(-2.0), 95.0).unwrap();
        let b = attention_center(&blob(1.0), 95.0).unwrap();
        assert!(((b - a) - nalgebra::Vector3::new(3.0, 0.0, 0.0)).norm() < 1e-9);
    }

    fn spine2d() -> crate::volume::Phantom {
        let spec = PhantomSpec::new(PhantomKind::SpineLike, [48, 64, 1], [1.5, 1.5, 1.0]);
        generate_phantom(&spec, 3).unwrap()
    }

    fn cfg2d(n1: usize, n2: usize) -> HierarchyConfig {
        HierarchyConfig {
            n1,
            n2,
            roi_size: [32, 32, 1],
            dim: Dimensionality::Two,
            ..HierarchyConfig::default()
        }
    }

    #[test]
    fn disabled_fine_stage_returns_coarse_result() {
        let p = spine2d();
        let net = Network::init(ArchSpec::desk([24, 32, 1], 6, true), 1).unwrap();
        let t0 = RigidTransform::translation(3.0, 2.0, 0.0);
        let (t, report) = hierarchical_register(
            &p.reference,
            &p.floating,
            &t0,
            &net,
            &net,
            &cfg2d(10, 0),
            None,
        )
        .unwrap();
        let (tc, _) = greedy_register(
            &downsample(&p.reference, 2),
            &downsample(&p.floating, 2),
            &t0,
            &net,
            &GreedyOptions::new(10, Dimensionality::Two),
        )
        .unwrap();
        assert_eq!(t, tc);
        assert!(report.fine.is_none());
    }

    #[test]
    fn oracle_levels_reach_and_keep_terminal() {
        let p = spine2d();
        let gt = p.ground_truth;
        let oracle = OraclePolicy::new(gt, Dimensionality::Two, MdpConfig::default());
        let t0 = crate::geometry::compose(
            &crate::geometry::invert(&transform_from_params(&ParamVector([
                20.0, 0.0, 0.0, 0.0, 0.0, 0.0,
            ]))),
            &gt,
        );
        let (t, report) = hierarchical_register(
            &p.reference,
            &p.floating,
            &t0,
            &oracle,
            &oracle,
            &cfg2d(200, 100),
            Some(&gt),
        )
        .unwrap();
        assert!(report.coarse.d_after.unwrap() < 0.5);
        assert_eq!(report.coarse.steps, 20);
        assert!(distance(&gt, &t).unwrap() < 0.5);
        assert!(report.roi.unwrap().fallback);
    }

    #[test]
    fn network_saliency_centers_the_roi() {
        let p = spine2d();
        let coarse = Network::init(ArchSpec::desk([24, 32, 1], 6, true), 5).unwrap();
        let fine = Network::init(ArchSpec::desk([32, 32, 1], 6, true), 6).unwrap();
        let t0 = RigidTransform::translation(2.0, 0.0, 0.0);
        let (_, report) = hierarchical_register(
            &p.reference,
            &p.floating,
            &t0,
            &coarse,
            &fine,
            &cfg2d(3, 3),
            None,
        )
        .unwrap();
        let roi = report.roi.unwrap();
        assert_eq!(roi.size, [32, 32, 1]);
        assert!(!roi.fallback);
        assert_eq!(report.fine.unwrap().steps, 3);
    }
}
