//! Synthetic reference/floating pairs aligned at identity.
//!
//! * `simple`: one soft-edged ellipsoid, floating equals reference.
//! * `spine-like`: a row of equally spaced bright blobs along the last
//!   non-singleton axis inside a soft body, plus a lateral distractor and a
//!   small dark marker. The floating image only covers a window of a few
//!   periods, has remapped intensities and mild noise.
//! * `cardiac-like`: a smooth ellipsoid with bright vessels; the floating
//!   image has reduced contrast, streak artifacts and noise.

use std::fmt;
use std::str::FromStr;

use nalgebra::{Matrix3, Point3, Rotation3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{Grid, Volume};
use crate::error::{Result, VregError};
use crate::geometry::RigidTransform;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum PhantomKind {
    #[serde(rename = "simple")]
    Simple,
    #[serde(rename = "spine-like")]
    SpineLike,
    #[serde(rename = "cardiac-like")]
    CardiacLike,
}

impl PhantomKind {
    pub fn name(&self) -> &'static str {
        match self {
            PhantomKind::Simple => "simple",
            PhantomKind::SpineLike => "spine-like",
            PhantomKind::CardiacLike => "cardiac-like",
        }
    }

    fn salt(&self) -> u64 {
        match self {
            PhantomKind::Simple => 0x51_4d50,
            PhantomKind::SpineLike => 0x5350_494e,
            PhantomKind::CardiacLike => 0xca_4d,
        }
    }
}

impl fmt::Display for PhantomKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for PhantomKind {
    type Err = VregError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "simple" => Ok(PhantomKind::Simple),
            "spine-like" => Ok(PhantomKind::SpineLike),
            "cardiac-like" => Ok(PhantomKind::CardiacLike),
            other => Err(VregError::UnknownSpec(other.to_string())),
        }
    }
}

/// Which phantom to build and on what grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhantomSpec {
    pub kind: PhantomKind,
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
}

impl PhantomSpec {
    pub fn new(kind: PhantomKind, dims: [usize; 3], spacing: [f64; 3]) -> Self {
        PhantomSpec {
            kind,
            dims,
            spacing,
        }
    }

    pub fn parse(name: &str, dims: [usize; 3], spacing: [f64; 3]) -> Result<Self> {
        Ok(PhantomSpec::new(name.parse()?, dims, spacing))
    }
}

/// Oriented ellipsoid, used for phantom structures and surface meshes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ellipsoid {
    pub center: Point3<f64>,
    pub radii: Vector3<f64>,
    pub rotation: Matrix3<f64>,
}

impl Ellipsoid {
    fn axis_aligned(center: Point3<f64>, radii: Vector3<f64>) -> Self {
        Ellipsoid {
            center,
            radii,
            rotation: Matrix3::identity(),
        }
    }

    /// Normalised radius: 1 on the surface.
    pub fn radius_at(&self, p: &Point3<f64>) -> f64 {
        let q = self.rotation.transpose() * (p - self.center);
        ((q.x / self.radii.x).powi(2) + (q.y / self.radii.y).powi(2) + (q.z / self.radii.z).powi(2))
            .sqrt()
    }

    /// Soft indicator with an edge of roughly `edge_mm` width.
    fn soft(&self, p: &Point3<f64>, edge_mm: f64) -> f64 {
        let r = self.radius_at(p);
        let scale = self.radii.min();
        logistic((1.0 - r) * scale / edge_mm)
    }

    /// Surface point along local direction `dir` (need not be unit).
    pub fn surface_point(&self, dir: Vector3<f64>) -> Point3<f64> {
        let d = dir.normalize();
        let scaled = Vector3::new(d.x / self.radii.x, d.y / self.radii.y, d.z / self.radii.z);
        let t = 1.0 / scaled.norm();
        self.center + self.rotation * (d * t)
    }
}

fn logistic(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// An aligned pair plus the geometry needed for evaluation.
#[derive(Debug, Clone)]
pub struct Phantom {
    pub kind: PhantomKind,
    pub reference: Volume,
    pub floating: Volume,
    pub landmarks: Vec<Point3<f64>>,
    pub ground_truth: RigidTransform,
    /// Main structure surface (the ellipsoid for simple/cardiac, the central
    /// blob for spine-like).
    pub surface: Ellipsoid,
    /// Repetition period and its axis for spine-like phantoms.
    pub period: Option<(usize, f64)>,
}

/// Builds the phantom pair; deterministic per `(spec, seed)`.
pub fn generate_phantom(spec: &PhantomSpec, seed: u64) -> Result<Phantom> {
    let grid = Grid::centered(spec.dims, spec.spacing)?;
    if spec.dims.iter().filter(|&&d| d > 1).count() < 2 {
        return Err(VregError::DimMismatch(format!(
            "phantom needs at least two non-singleton axes, got {:?}",
            spec.dims
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ spec.kind.salt().rotate_left(17));
    let mut phantom = match spec.kind {
        PhantomKind::Simple => simple(&grid, &mut rng),
        PhantomKind::SpineLike => spine(&grid, &mut rng),
        PhantomKind::CardiacLike => cardiac(&grid, &mut rng),
    };
    phantom.reference = phantom.reference.map(|v| v.clamp(0.0, 1.0));
    phantom.floating = phantom.floating.map(|v| v.clamp(0.0, 1.0));
    Ok(phantom)
}

/// Physical half-extent per axis.
fn half_extent(grid: &Grid) -> Vector3<f64> {
    Vector3::new(
        (grid.dims[0] as f64 - 1.0) * grid.spacing[0] / 2.0,
        (grid.dims[1] as f64 - 1.0) * grid.spacing[1] / 2.0,
        (grid.dims[2] as f64 - 1.0) * grid.spacing[2] / 2.0,
    )
}

fn edge_mm(grid: &Grid) -> f64 {
    grid.spacing[0].min(grid.spacing[1])
}

fn in_plane_rotation(rng: &mut ChaCha8Rng, is_2d: bool) -> Matrix3<f64> {
    let yaw = rng.random_range(0.0..std::f64::consts::PI);
    if is_2d {
        *Rotation3::from_axis_angle(&Vector3::z_axis(), yaw).matrix()
    } else {
        let tilt_x = rng.random_range(-0.3..0.3);
        let tilt_y = rng.random_range(-0.3..0.3);
        *(Rotation3::from_euler_angles(tilt_x, tilt_y, yaw)).matrix()
    }
}

fn ellipsoid_landmarks(e: &Ellipsoid, is_2d: bool) -> Vec<Point3<f64>> {
    let mut dirs = Vec::new();
    if is_2d {
        for n in 0..12 {
            let a = n as f64 * std::f64::consts::PI / 6.0;
            dirs.push(Vector3::new(a.cos(), a.sin(), 0.0));
        }
    } else {
        for d in [
            Vector3::x(),
            -Vector3::x(),
            Vector3::y(),
            -Vector3::y(),
            Vector3::z(),
            -Vector3::z(),
        ] {
            dirs.push(d);
        }
        for sx in [-1.0, 1.0] {
            for sy in [-1.0, 1.0] {
                for sz in [-1.0, 1.0] {
                    dirs.push(Vector3::new(sx, sy, sz));
                }
            }
        }
    }
    dirs.into_iter().map(|d| e.surface_point(d)).collect()
}

fn simple(grid: &Grid, rng: &mut ChaCha8Rng) -> Phantom {
    let is_2d = grid.is_2d();
    let h = half_extent(grid);
    let extent = if is_2d { h.x.min(h.y) } else { h.min() };
    let long = rng.random_range(0.45..0.6) * extent;
    let short = long / rng.random_range(1.6..2.2);
    let third = if is_2d {
        long
    } else {
        short * rng.random_range(1.0..1.4)
    };
    let center = Point3::new(
        rng.random_range(-0.1..0.1) * h.x,
        rng.random_range(-0.1..0.1) * h.y,
        if is_2d {
            0.0
        } else {
            rng.random_range(-0.1..0.1) * h.z
        },
    );
    let e = Ellipsoid {
        center,
        radii: Vector3::new(long, short, third),
        rotation: in_plane_rotation(rng, is_2d),
    };
    let edge = edge_mm(grid);
    let reference = Volume::from_fn(*grid, |p| 0.8 * e.soft(&p, edge));
    let floating = reference.clone();
    Phantom {
        kind: PhantomKind::Simple,
        landmarks: ellipsoid_landmarks(&e, is_2d),
        reference,
        floating,
        ground_truth: RigidTransform::identity(),
        surface: e,
        period: None,
    }
}

fn spine(grid: &Grid, rng: &mut ChaCha8Rng) -> Phantom {
    let is_2d = grid.is_2d();
    let h = half_extent(grid);
    // Periodic axis: z in 3-D, y in 2-D. Lateral axis: x.
    let axis = if is_2d { 1 } else { 2 };
    let axial_half = h[axis];
    let lateral = h.x;
    let depth = if is_2d { lateral } else { h.y };
    let period = axial_half * 2.0 / rng.random_range(6.5..7.5);
    let phase = rng.random_range(-0.15..0.15) * period;
    let edge = edge_mm(grid);

    let unit = |a: usize| -> Vector3<f64> {
        let mut v = Vector3::zeros();
        v[a] = 1.0;
        v
    };
    let ax = unit(axis);
    let depth_axis = if is_2d { 2 } else { 1 };

    let body = {
        let mut r = Vector3::new(0.85 * lateral, 0.85 * depth, 0.0);
        r[axis] = 10.0 * axial_half;
        if is_2d {
            r[2] = 1.0;
            r[0] = 0.85 * lateral;
        }
        Ellipsoid::axis_aligned(Point3::origin(), r)
    };

    // Vertebral bodies sit slightly off-centre along the depth axis.
    let spine_offset = {
        let mut v = Vector3::zeros();
        if is_2d {
            v.x = -0.2 * lateral;
        } else {
            v[depth_axis] = -0.2 * depth;
        }
        v
    };
    let blob_radii = {
        let mut r = Vector3::new(0.28 * lateral, 0.25 * depth, 0.0);
        r[axis] = 0.32 * period;
        if is_2d {
            r[2] = 1.0;
            r.x = 0.28 * lateral;
        }
        r
    };
    let n_blobs = (axial_half / period).ceil() as i64 + 1;
    let blobs: Vec<Ellipsoid> = (-n_blobs..=n_blobs)
        .map(|n| {
            let c = Point3::origin() + spine_offset + ax * (n as f64 * period + phase);
            Ellipsoid::axis_aligned(c, blob_radii)
        })
        .collect();
    let central = blobs[n_blobs as usize];

    // Lateral distractor ("kidney") at a random axial position.
    let kidney = {
        let mut c = Vector3::new(0.55 * lateral, 0.0, 0.0);
        if !is_2d {
            c.y = 0.1 * depth;
        }
        c[axis] = rng.random_range(-0.6..0.6) * axial_half;
        let mut r = Vector3::new(0.18 * lateral, 0.2 * depth, 0.0);
        r[axis] = 0.9 * period;
        if is_2d {
            r[2] = 1.0;
        }
        Ellipsoid::axis_aligned(Point3::from(c), r)
    };
    // Dark marker next to the central vertebra breaks the periodicity.
    let marker = {
        let mut c = spine_offset + Vector3::new(0.0, 0.0, 0.0);
        if is_2d {
            c.x += 0.45 * lateral;
        } else {
            c[depth_axis] += 0.45 * depth;
        }
        c[axis] += phase + rng.random_range(-0.25..0.25) * period;
        let mut r = Vector3::new(0.12 * lateral, 0.12 * depth, 0.0);
        r[axis] = 0.25 * period;
        if is_2d {
            r[2] = 1.0;
        }
        Ellipsoid::axis_aligned(Point3::from(c), r)
    };

    let density = |p: &Point3<f64>| -> f64 {
        let mut v = 0.25 * body.soft(p, edge);
        let mut bone: f64 = 0.0;
        for b in &blobs {
            bone = bone.max(b.soft(p, edge));
        }
        v += 0.65 * bone;
        v += 0.3 * kidney.soft(p, edge);
        v *= 1.0 - 0.9 * marker.soft(p, edge);
        v
    };
    let reference = Volume::from_fn(*grid, |p| density(&p));

    // Floating: window of ±2.6 periods around the centre, remapped
    // intensities, mild noise.
    let fov_half = 2.6 * period;
    let noise = Normal::new(0.0, 0.015).expect("valid sigma");
    let mut noise_rng = ChaCha8Rng::seed_from_u64(rng.random());
    let floating = Volume::from_fn(*grid, |p| {
        let inside = logistic((fov_half - p[axis].abs()) / edge);
        let v = 0.05 + 0.85 * density(&p) + noise.sample(&mut noise_rng);
        v * inside
    });

    let mut landmarks = Vec::new();
    for b in &blobs {
        if (b.center[axis]).abs() + b.radii[axis] > fov_half - period * 0.2 {
            continue;
        }
        landmarks.push(b.surface_point(ax));
        landmarks.push(b.surface_point(-ax));
        landmarks.push(b.surface_point(Vector3::x()));
        landmarks.push(b.surface_point(-Vector3::x()));
    }

    Phantom {
        kind: PhantomKind::SpineLike,
        reference,
        floating,
        landmarks,
        ground_truth: RigidTransform::identity(),
        surface: central,
        period: Some((axis, period)),
    }
}

fn cardiac(grid: &Grid, rng: &mut ChaCha8Rng) -> Phantom {
    let is_2d = grid.is_2d();
    let h = half_extent(grid);
    let extent = if is_2d { h.x.min(h.y) } else { h.min() };
    let edge = edge_mm(grid);
    let body = Ellipsoid::axis_aligned(
        Point3::origin(),
        Vector3::new(0.92 * h.x, 0.85 * h.y, if is_2d { 1.0 } else { 10.0 * h.z }),
    );
    let heart = Ellipsoid {
        center: Point3::new(
            rng.random_range(-0.1..0.1) * h.x,
            rng.random_range(-0.1..0.1) * h.y,
            0.0,
        ),
        radii: Vector3::new(
            0.5 * extent,
            rng.random_range(0.32..0.4) * extent,
            if is_2d { 0.5 * extent } else { 0.38 * extent },
        ),
        rotation: in_plane_rotation(rng, is_2d),
    };
    let vessels: Vec<Ellipsoid> = (0..3)
        .map(|n| {
            let a = n as f64 * 2.1 + rng.random_range(0.0..0.5);
            let dir = Vector3::new(a.cos(), a.sin(), 0.0);
            Ellipsoid {
                center: heart.surface_point(dir) - heart.rotation * dir * 0.12 * extent,
                radii: Vector3::new(0.07 * extent, 0.07 * extent, 0.25 * extent),
                rotation: heart.rotation,
            }
        })
        .collect();

    let anatomy = |p: &Point3<f64>| -> (f64, f64, f64) {
        let b = body.soft(p, edge);
        let m = heart.soft(p, 1.5 * edge);
        let v = vessels
            .iter()
            .map(|e| e.soft(p, edge))
            .fold(0.0f64, f64::max);
        (b, m, v)
    };
    let reference = Volume::from_fn(*grid, |p| {
        let (b, m, v) = anatomy(&p);
        0.2 * b + 0.35 * m + 0.4 * v
    });

    // Streaks radiate from a point outside the heart.
    let source = Point3::new(0.6 * h.x, -0.5 * h.y, 0.0);
    let angles: Vec<f64> = (0..6)
        .map(|_| rng.random_range(0.0..std::f64::consts::PI))
        .collect();
    let noise = Normal::new(0.0, 0.03).expect("valid sigma");
    let mut noise_rng = ChaCha8Rng::seed_from_u64(rng.random());
    let floating = Volume::from_fn(*grid, |p| {
        let (b, m, v) = anatomy(&p);
        let base = 0.25 * b + 0.12 * m + 0.1 * v;
        let d = p - source;
        let mut streak = 0.0;
        for (n, a) in angles.iter().enumerate() {
            let normal = Vector3::new(-a.sin(), a.cos(), 0.0);
            let dist = d.dot(&normal);
            let sign = if n % 2 == 0 { 1.0 } else { -1.0 };
            streak += sign * 0.12 * (-(dist / (1.5 * edge)).powi(2)).exp();
        }
        base + b * streak + noise.sample(&mut noise_rng)
    });

    Phantom {
        kind: PhantomKind::CardiacLike,
        landmarks: ellipsoid_landmarks(&heart, is_2d),
        reference,
        floating,
        ground_truth: RigidTransform::identity(),
        surface: heart,
        period: None,
    }
}
