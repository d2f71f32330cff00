//! Scalar image grids in physical (mm) coordinates.
//!
//! Voxel `(i, j, k)` sits at `origin + (i·sx, j·sy, k·sz)`. Data is stored
//! x-fastest. A 2-D image is a volume with `nz = 1`.

mod io;
mod ops;
mod phantom;

pub use io::{
    decode_volume, encode_volume, read_landmarks, read_volume, write_landmarks, write_volume,
    VOLUME_HEADER_LEN,
};
pub use ops::{
    crop_roi, difference_image, difference_on_grid, downsample, resample, resample_onto,
    resample_onto_masked,
};
pub use phantom::{generate_phantom, Ellipsoid, Phantom, PhantomKind, PhantomSpec};

use nalgebra::Point3;
use serde::{Deserialize, Serialize};

use crate::error::{Result, VregError};

/// Tolerance, in index units, for a sample to count as inside the grid.
const DOMAIN_TOL: f64 = 1e-9;

/// Geometry of a regular grid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    pub origin: [f64; 3],
}

impl Grid {
    pub fn new(dims: [usize; 3], spacing: [f64; 3], origin: [f64; 3]) -> Result<Self> {
        if dims.iter().any(|&d| d == 0) {
            return Err(VregError::DimMismatch(format!("empty grid {dims:?}")));
        }
        if spacing.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
            return Err(VregError::DimMismatch(format!("bad spacing {spacing:?}")));
        }
        if origin.iter().any(|o| !o.is_finite()) {
            return Err(VregError::DimMismatch(format!("bad origin {origin:?}")));
        }
        Ok(Grid {
            dims,
            spacing,
            origin,
        })
    }

    /// Grid whose geometric centre sits at the physical origin. Singleton
    /// axes keep coordinate 0.
    pub fn centered(dims: [usize; 3], spacing: [f64; 3]) -> Result<Self> {
        let mut origin = [0.0; 3];
        for a in 0..3 {
            origin[a] = -((dims[a] as f64 - 1.0) / 2.0) * spacing[a];
        }
        Grid::new(dims, spacing, origin)
    }

    pub fn len(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn is_2d(&self) -> bool {
        self.dims[2] == 1
    }

    #[inline]
    pub fn linear_index(&self, i: usize, j: usize, k: usize) -> usize {
        i + self.dims[0] * (j + self.dims[1] * k)
    }

    #[inline]
    pub fn coords_of(&self, idx: usize) -> [usize; 3] {
        let i = idx % self.dims[0];
        let j = (idx / self.dims[0]) % self.dims[1];
        let k = idx / (self.dims[0] * self.dims[1]);
        [i, j, k]
    }

    #[inline]
    pub fn physical(&self, i: usize, j: usize, k: usize) -> Point3<f64> {
        Point3::new(
            self.origin[0] + i as f64 * self.spacing[0],
            self.origin[1] + j as f64 * self.spacing[1],
            self.origin[2] + k as f64 * self.spacing[2],
        )
    }

    /// Continuous voxel index of a physical point.
    #[inline]
    pub fn continuous_index(&self, p: &Point3<f64>) -> [f64; 3] {
        [
            (p.x - self.origin[0]) / self.spacing[0],
            (p.y - self.origin[1]) / self.spacing[1],
            (p.z - self.origin[2]) / self.spacing[2],
        ]
    }

    /// Physical coordinate of the grid centre.
    pub fn center(&self) -> Point3<f64> {
        Point3::new(
            self.origin[0] + (self.dims[0] as f64 - 1.0) / 2.0 * self.spacing[0],
            self.origin[1] + (self.dims[1] as f64 - 1.0) / 2.0 * self.spacing[1],
            self.origin[2] + (self.dims[2] as f64 - 1.0) / 2.0 * self.spacing[2],
        )
    }

    pub fn same_shape(&self, other: &Grid) -> bool {
        self.dims == other.dims && self.spacing == other.spacing
    }
}

/// A scalar image on a regular grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    grid: Grid,
    data: Vec<f64>,
}

/// Difference image `I_r − T ∘ I_f` fed to the policy.
pub type Observation = Volume;

impl Volume {
    pub fn new(grid: Grid, data: Vec<f64>) -> Result<Self> {
        if data.len() != grid.len() {
            return Err(VregError::DimMismatch(format!(
                "data length {} != {} voxels",
                data.len(),
                grid.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(VregError::DimMismatch("non-finite voxel value".into()));
        }
        Ok(Volume { grid, data })
    }

    pub fn zeros(grid: Grid) -> Self {
        Volume {
            data: vec![0.0; grid.len()],
            grid,
        }
    }

    pub fn from_fn(grid: Grid, mut f: impl FnMut(Point3<f64>) -> f64) -> Self {
        let mut data = Vec::with_capacity(grid.len());
        for k in 0..grid.dims[2] {
            for j in 0..grid.dims[1] {
                for i in 0..grid.dims[0] {
                    data.push(f(grid.physical(i, j, k)));
                }
            }
        }
        Volume { grid, data }
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn dims(&self) -> [usize; 3] {
        self.grid.dims
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.grid.spacing
    }

    pub fn origin(&self) -> [f64; 3] {
        self.grid.origin
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize, k: usize) -> f64 {
        self.data[self.grid.linear_index(i, j, k)]
    }

    /// Voxelwise map into a new volume on the same grid.
    pub fn map(&self, f: impl Fn(f64) -> f64) -> Volume {
        Volume {
            grid: self.grid,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }

    pub fn l2_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn min_max(&self) -> (f64, f64) {
        self.data
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
                (lo.min(v), hi.max(v))
            })
    }

    /// Linear interpolation at a physical point; `None` outside the grid.
    pub fn sample(&self, p: &Point3<f64>) -> Option<f64> {
        self.sample_index(self.grid.continuous_index(p))
    }

    /// Linear interpolation at a continuous voxel index.
    pub fn sample_index(&self, x: [f64; 3]) -> Option<f64> {
        let mut base = [0usize; 3];
        let mut frac = [0.0f64; 3];
        for a in 0..3 {
            let n = self.grid.dims[a];
            let xa = x[a];
            if n == 1 {
                if xa.abs() > 1e-6 {
                    return None;
                }
                continue;
            }
            if !(xa >= -DOMAIN_TOL && xa <= (n - 1) as f64 + DOMAIN_TOL) {
                return None;
            }
            let i0 = (xa.floor().max(0.0) as usize).min(n - 2);
            base[a] = i0;
            frac[a] = (xa - i0 as f64).clamp(0.0, 1.0);
        }
        let d = &self.grid.dims;
        let (nx, nxy) = (d[0], d[0] * d[1]);
        let step = [
            usize::from(d[0] > 1),
            if d[1] > 1 { nx } else { 0 },
            if d[2] > 1 { nxy } else { 0 },
        ];
        let i000 = self.grid.linear_index(base[0], base[1], base[2]);
        let mut acc = 0.0;
        for corner in 0..8usize {
            let mut w = 1.0;
            let mut idx = i000;
            for a in 0..3 {
                let hi = (corner >> a) & 1 == 1;
                if hi {
                    if step[a] == 0 {
                        w = 0.0;
                        break;
                    }
                    w *= frac[a];
                    idx += step[a];
                } else {
                    w *= 1.0 - frac[a];
                }
            }
            if w != 0.0 {
                acc += w * self.data[idx];
            }
        }
        Some(acc)
    }

    /// Voxelwise `self − other`; grids must match in dims and spacing.
    pub fn sub(&self, other: &Volume) -> Result<Volume> {
        if !self.grid.same_shape(&other.grid) {
            return Err(VregError::DimMismatch(format!(
                "{:?}/{:?} vs {:?}/{:?}",
                self.grid.dims, self.grid.spacing, other.grid.dims, other.grid.spacing
            )));
        }
        Ok(Volume {
            grid: self.grid,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(a, b)| a - b)
                .collect(),
        })
    }

    /// `a·self + b·other` on a shared grid.
    pub fn linear_combination(&self, a: f64, other: &Volume, b: f64) -> Result<Volume> {
        if !self.grid.same_shape(&other.grid) {
            return Err(VregError::DimMismatch("linear combination".into()));
        }
        Ok(Volume {
            grid: self.grid,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(x, y)| a * x + b * y)
                .collect(),
        })
    }

    /// Same values on a grid with different origin (same dims and spacing).
    pub fn with_origin(mut self, origin: [f64; 3]) -> Self {
        self.grid.origin = origin;
        self
    }
}
