//! Classical comparator: 50-bin mutual information and a multi-resolution
//! finite-difference gradient ascent over the rigid parameters.

use serde::{Deserialize, Serialize};

use crate::error::{Result, VregError};
use crate::geometry::{transform_from_params, ParamVector, RigidTransform};
use crate::volume::{downsample, resample_onto_masked, Volume};

pub const MI_BINS: usize = 50;

/// Joint intensity histogram over the overlap of two images.
#[derive(Debug, Clone, PartialEq)]
pub struct JointHistogram {
    pub bins: usize,
    /// Row-major `bins × bins`: row = first image bin, column = second.
    pub counts: Vec<u64>,
    pub range_a: (f64, f64),
    pub range_b: (f64, f64),
}

#[inline]
fn bin_of(v: f64, (lo, hi): (f64, f64), bins: usize) -> usize {
    if hi <= lo {
        return 0;
    }
    let x = ((v - lo) / (hi - lo) * bins as f64).floor();
    (x.max(0.0) as usize).min(bins - 1)
}

impl JointHistogram {
    /// Histograms the voxel pairs selected by `mask` (all voxels if `None`).
    pub fn build(
        a: &[f64],
        b: &[f64],
        mask: Option<&[bool]>,
        range_a: (f64, f64),
        range_b: (f64, f64),
        bins: usize,
    ) -> Self {
        let mut counts = vec![0u64; bins * bins];
        for (idx, (&va, &vb)) in a.iter().zip(b).enumerate() {
            if mask.is_some_and(|m| !m[idx]) {
                continue;
            }
            counts[bin_of(va, range_a, bins) * bins + bin_of(vb, range_b, bins)] += 1;
        }
        JointHistogram {
            bins,
            counts,
            range_a,
            range_b,
        }
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// `Σ p(a,b) · ln(p(a,b) / (p(a) p(b)))` in nats.
    pub fn mutual_information(&self) -> Result<f64> {
        let total = self.total();
        if total == 0 {
            return Err(VregError::EmptyOverlap);
        }
        let n = total as f64;
        let bins = self.bins;
        let mut pa = vec![0.0; bins];
        let mut pb = vec![0.0; bins];
        for i in 0..bins {
            for j in 0..bins {
                let c = self.counts[i * bins + j] as f64;
                pa[i] += c;
                pb[j] += c;
            }
        }
        let mut mi = 0.0;
        for i in 0..bins {
            for j in 0..bins {
                let c = self.counts[i * bins + j];
                if c == 0 {
                    continue;
                }
                let c = c as f64;
                // ln(p_ab / (p_a p_b)) with p = count / n.
                mi += c / n * (c * n / (pa[i] * pb[j])).ln();
            }
        }
        Ok(mi)
    }
}

/// Shannon entropy (nats) of a 50-bin histogram of `v`.
pub fn entropy(v: &Volume) -> f64 {
    let range = v.min_max();
    let mut counts = vec![0u64; MI_BINS];
    for &x in v.data() {
        counts[bin_of(x, range, MI_BINS)] += 1;
    }
    let n = v.len() as f64;
    counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / n;
            -p * p.ln()
        })
        .sum()
}

/// Mutual information of two same-shaped images over all voxels.
pub fn mutual_information(a: &Volume, b: &Volume) -> Result<f64> {
    if a.dims() != b.dims() {
        return Err(VregError::DimMismatch(format!(
            "{:?} vs {:?}",
            a.dims(),
            b.dims()
        )));
    }
    JointHistogram::build(a.data(), b.data(), None, a.min_max(), b.min_max(), MI_BINS)
        .mutual_information()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LevelSchedule {
    pub factor: usize,
    /// Initial parameter step (mm / degrees).
    pub step: f64,
    pub max_iters: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerSchedule {
    pub levels: Vec<LevelSchedule>,
    /// Central-difference step for the metric gradient.
    #[serde(default = "default_fd_step")]
    pub fd_step: f64,
    #[serde(default = "default_min_step")]
    pub min_step: f64,
}

fn default_fd_step() -> f64 {
    0.5
}

fn default_min_step() -> f64 {
    1e-3
}

impl Default for OptimizerSchedule {
    fn default() -> Self {
        OptimizerSchedule {
            levels: vec![
                LevelSchedule {
                    factor: 4,
                    step: 4.0,
                    max_iters: 40,
                },
                LevelSchedule {
                    factor: 2,
                    step: 2.0,
                    max_iters: 40,
                },
                LevelSchedule {
                    factor: 1,
                    step: 1.0,
                    max_iters: 40,
                },
            ],
            fd_step: default_fd_step(),
            min_step: default_min_step(),
        }
    }
}

/// One accepted pose on the optimization path.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceRow {
    pub level: usize,
    pub iter: usize,
    pub mi: f64,
    pub params: ParamVector,
}

/// Renders `level,iter,MI,tx,ty,tz,rx,ry,rz`.
pub fn trace_csv(trace: &[TraceRow]) -> String {
    let mut out = String::from("level,iter,MI,tx,ty,tz,rx,ry,rz\n");
    for r in trace {
        let p = r.params.0;
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{}\n",
            r.level, r.iter, r.mi, p[0], p[1], p[2], p[3], p[4], p[5]
        ));
    }
    out
}

struct LevelMetric {
    reference: Volume,
    floating: Volume,
    range_r: (f64, f64),
    range_f: (f64, f64),
}

impl LevelMetric {
    fn eval(&self, p: &ParamVector) -> f64 {
        let t = transform_from_params(p);
        let (moved, mask) = resample_onto_masked(&self.floating, &t, self.reference.grid());
        JointHistogram::build(
            self.reference.data(),
            moved.data(),
            Some(&mask),
            self.range_r,
            self.range_f,
            MI_BINS,
        )
        .mutual_information()
        .unwrap_or(f64::NEG_INFINITY)
    }
}

/// Multi-resolution MI ascent starting at `t0`. Returns the best pose seen
/// and the accepted-step trace.
pub fn optimize_registration(
    reference: &Volume,
    floating: &Volume,
    t0: &RigidTransform,
    schedule: &OptimizerSchedule,
) -> Result<(RigidTransform, Vec<TraceRow>)> {
    let mut params = t0.params()?;
    let active: Vec<usize> = if reference.grid().is_2d() {
        vec![0, 1, 5]
    } else {
        (0..6).collect()
    };
    let mut trace = Vec::new();
    for (level_idx, level) in schedule.levels.iter().enumerate() {
        if level.max_iters == 0 {
            continue;
        }
        let r = downsample(reference, level.factor);
        let f = downsample(floating, level.factor);
        let metric = LevelMetric {
            range_r: r.min_max(),
            range_f: f.min_max(),
            reference: r,
            floating: f,
        };
        let mut current = metric.eval(&params);
        trace.push(TraceRow {
            level: level_idx,
            iter: 0,
            mi: current,
            params,
        });
        let mut step = level.step;
        for iter in 1..=level.max_iters {
            if step < schedule.min_step {
                break;
            }
            let mut grad = [0.0; 6];
            for &a in &active {
                let mut hi = params;
                let mut lo = params;
                hi[a] += schedule.fd_step;
                lo[a] -= schedule.fd_step;
                grad[a] = (metric.eval(&hi) - metric.eval(&lo)) / (2.0 * schedule.fd_step);
            }
            let gnorm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
            if !(gnorm > 0.0) || !gnorm.is_finite() {
                break;
            }
            let mut accepted = false;
            while step >= schedule.min_step {
                let mut cand = params;
                for &a in &active {
                    cand[a] += step * grad[a] / gnorm;
                }
                let value = metric.eval(&cand);
                if value > current {
                    params = cand;
                    current = value;
                    accepted = true;
                    break;
                }
                step *= 0.5;
            }
            if !accepted {
                break;
            }
            trace.push(TraceRow {
                level: level_idx,
                iter,
                mi: current,
                params,
            });
        }
    }
    Ok((transform_from_params(&params), trace))
}
