use nalgebra::{Matrix3, Point3, Vector3};

use super::{Grid, Observation, Volume};
use crate::error::{Result, VregError};
use crate::geometry::RigidTransform;

/// Affine map from output voxel index to source voxel index for the
/// pull-back `x_src = T⁻¹ · p_out`.
struct IndexMap {
    a: Matrix3<f64>,
    b: Vector3<f64>,
}

impl IndexMap {
    fn new(src: &Grid, out: &Grid, t: &RigidTransform) -> Self {
        let rt = t.rotation().transpose();
        let s_out = Matrix3::from_diagonal(&Vector3::from(out.spacing));
        let s_in_inv = Matrix3::from_diagonal(&Vector3::new(
            1.0 / src.spacing[0],
            1.0 / src.spacing[1],
            1.0 / src.spacing[2],
        ));
        let o_out = Vector3::from(out.origin);
        let o_in = Vector3::from(src.origin);
        let a = s_in_inv * rt * s_out;
        let b = s_in_inv * (rt * (o_out - t.translation_vector()) - o_in);
        IndexMap { a, b }
    }

    #[inline]
    fn apply(&self, i: usize, j: usize, k: usize) -> [f64; 3] {
        let q = [i as f64, j as f64, k as f64];
        let mut x = [0.0; 3];
        for (r, xr) in x.iter_mut().enumerate() {
            *xr = self.a[(r, 0)] * q[0] + self.a[(r, 1)] * q[1] + self.a[(r, 2)] * q[2] + self.b[r];
        }
        x
    }
}

/// Pulls `vol` back through `t` onto `grid`, also reporting which output
/// voxels sampled inside the source domain. Outside samples are 0.
pub fn resample_onto_masked(vol: &Volume, t: &RigidTransform, grid: &Grid) -> (Volume, Vec<bool>) {
    let map = IndexMap::new(vol.grid(), grid, t);
    let mut data = Vec::with_capacity(grid.len());
    let mut mask = Vec::with_capacity(grid.len());
    for k in 0..grid.dims[2] {
        for j in 0..grid.dims[1] {
            for i in 0..grid.dims[0] {
                match vol.sample_index(map.apply(i, j, k)) {
                    Some(v) => {
                        data.push(v);
                        mask.push(true);
                    }
                    None => {
                        data.push(0.0);
                        mask.push(false);
                    }
                }
            }
        }
    }
    (Volume { grid: *grid, data }, mask)
}

/// Pulls `vol` back through `t` onto an arbitrary output grid.
pub fn resample_onto(vol: &Volume, t: &RigidTransform, grid: &Grid) -> Volume {
    resample_onto_masked(vol, t, grid).0
}

/// Output voxel at `p` takes `vol(T⁻¹ p)`, linear interpolation, zero fill.
pub fn resample(vol: &Volume, t: &RigidTransform) -> Volume {
    resample_onto(vol, t, vol.grid())
}

/// `I_r − T ∘ I_f` sampled on the reference grid.
pub fn difference_on_grid(
    reference: &Volume,
    floating: &Volume,
    t: &RigidTransform,
) -> Observation {
    let moved = resample_onto(floating, t, reference.grid());
    let data = reference
        .data
        .iter()
        .zip(&moved.data)
        .map(|(a, b)| a - b)
        .collect();
    Volume {
        grid: reference.grid,
        data,
    }
}

/// Observation `d = I_r − T ∘ I_f`; both inputs share dims and spacing.
pub fn difference_image(
    reference: &Volume,
    floating: &Volume,
    t: &RigidTransform,
) -> Result<Observation> {
    if !reference.grid().same_shape(floating.grid()) {
        return Err(VregError::DimMismatch(format!(
            "reference {:?} vs floating {:?}",
            reference.dims(),
            floating.dims()
        )));
    }
    Ok(difference_on_grid(reference, floating, t))
}

/// Box-average pooling by `factor` along every non-singleton axis.
///
/// Trailing partial blocks average over their actual members. Spacing is
/// multiplied by `factor` and the origin moves to the first block centre, so
/// physical coordinates stay consistent.
pub fn downsample(vol: &Volume, factor: usize) -> Volume {
    let factor = factor.max(1);
    if factor == 1 {
        return vol.clone();
    }
    let g = vol.grid();
    let mut f = [factor; 3];
    for a in 0..3 {
        if g.dims[a] == 1 {
            f[a] = 1;
        }
    }
    let dims = [
        g.dims[0].div_ceil(f[0]),
        g.dims[1].div_ceil(f[1]),
        g.dims[2].div_ceil(f[2]),
    ];
    let mut spacing = g.spacing;
    let mut origin = g.origin;
    for a in 0..3 {
        spacing[a] *= f[a] as f64;
        origin[a] += (f[a] as f64 - 1.0) / 2.0 * g.spacing[a];
    }
    let out_grid = Grid {
        dims,
        spacing,
        origin,
    };
    let mut data = Vec::with_capacity(out_grid.len());
    for k in 0..dims[2] {
        for j in 0..dims[1] {
            for i in 0..dims[0] {
                let mut sum = 0.0;
                let mut n = 0usize;
                for kk in k * f[2]..((k + 1) * f[2]).min(g.dims[2]) {
                    for jj in j * f[1]..((j + 1) * f[1]).min(g.dims[1]) {
                        for ii in i * f[0]..((i + 1) * f[0]).min(g.dims[0]) {
                            sum += vol.get(ii, jj, kk);
                            n += 1;
                        }
                    }
                }
                data.push(sum / n as f64);
            }
        }
    }
    Volume {
        grid: out_grid,
        data,
    }
}

/// Axis-aligned crop of `size` voxels centred as close as possible to the
/// physical point `center`. Out-of-domain voxels are zero; the origin is
/// shifted so physical coordinates are preserved.
pub fn crop_roi(vol: &Volume, center: &Point3<f64>, size: [usize; 3]) -> Volume {
    let g = vol.grid();
    let c = g.continuous_index(center);
    let mut start = [0i64; 3];
    let mut origin = g.origin;
    for a in 0..3 {
        let size_a = size[a].max(1);
        start[a] = (c[a] - (size_a as f64 - 1.0) / 2.0).round() as i64;
        if g.dims[a] == 1 && size_a == 1 {
            start[a] = 0;
        }
        origin[a] += start[a] as f64 * g.spacing[a];
    }
    let dims = [size[0].max(1), size[1].max(1), size[2].max(1)];
    let out_grid = Grid {
        dims,
        spacing: g.spacing,
        origin,
    };
    let mut data = Vec::with_capacity(out_grid.len());
    for k in 0..dims[2] as i64 {
        for j in 0..dims[1] as i64 {
            for i in 0..dims[0] as i64 {
                let (si, sj, sk) = (start[0] + i, start[1] + j, start[2] + k);
                let inside = si >= 0
                    && sj >= 0
                    && sk >= 0
                    && (si as usize) < g.dims[0]
                    && (sj as usize) < g.dims[1]
                    && (sk as usize) < g.dims[2];
                data.push(if inside {
                    vol.get(si as usize, sj as usize, sk as usize)
                } else {
                    0.0
                });
            }
        }
    }
    Volume {
        grid: out_grid,
        data,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{transform_from_params, ParamVector};
    use proptest::prelude::*;

    fn blob(dims: [usize; 3]) -> Volume {
        let g = Grid::centered(dims, [1.0, 1.0, 1.0]).unwrap();
        Volume::from_fn(g, |p| {
            let r2 = (p.x - 1.0).powi(2) / 30.0 + p.y.powi(2) / 12.0 + p.z.powi(2) / 20.0;
            (-r2).exp()
        })
    }

    #[test]
    fn identity_resample_is_exact() {
        let v = blob([9, 8, 7]);
        assert_eq!(resample(&v, &RigidTransform::identity()), v);
    }

    #[test]
    fn integer_shift_moves_voxels() {
        let v = blob([9, 8, 7]);
        let out = resample(&v, &RigidTransform::translation(2.0, 0.0, 0.0));
        for k in 0..7 {
            for j in 0..8 {
                for i in 0..9 {
                    let expect = if i >= 2 { v.get(i - 2, j, k) } else { 0.0 };
                    assert_eq!(out.get(i, j, k), expect);
                }
            }
        }
    }

    #[test]
    fn double_resampling_error_is_bounded() {
        let v = blob([24, 24, 24]);
        let t = transform_from_params(&ParamVector([1.3, -0.7, 0.4, 4.0, -3.0, 6.0]));
        let back = resample(&resample(&v, &t), &t.inverse());
        // Max gradient of the smooth blob, measured by finite differences.
        let mut max_grad: f64 = 0.0;
        for k in 0..23 {
            for j in 0..23 {
                for i in 0..23 {
                    let c = v.get(i, j, k);
                    max_grad = max_grad
                        .max((v.get(i + 1, j, k) - c).abs())
                        .max((v.get(i, j + 1, k) - c).abs())
                        .max((v.get(i, j, k + 1) - c).abs());
                }
            }
        }
        let bound = 2.0 * max_grad * 3f64.sqrt();
        for k in 6..18 {
            for j in 6..18 {
                for i in 6..18 {
                    assert!((back.get(i, j, k) - v.get(i, j, k)).abs() <= bound);
                }
            }
        }
    }

    #[test]
    fn difference_image_examples() {
        let v = blob([10, 10, 1]);
        let d = difference_image(&v, &v, &RigidTransform::identity()).unwrap();
        assert!(d.data().iter().all(|&x| x == 0.0));
        let zero = Volume::zeros(*v.grid());
        let d = difference_image(&zero, &v, &RigidTransform::identity()).unwrap();
        assert_eq!(d, v.map(|x| -x));
        let other = blob([10, 11, 1]);
        assert!(matches!(
            difference_image(&v, &other, &RigidTransform::identity()),
            Err(VregError::DimMismatch(_))
        ));
    }

    #[test]
    fn difference_shrinks_at_ground_truth() {
        let r = blob([16, 16, 16]);
        let tg = transform_from_params(&ParamVector([2.0, -1.0, 1.0, 5.0, 0.0, -4.0]));
        // Floating image is the reference moved by tg⁻¹, so tg realigns it.
        let f = resample(&r, &tg.inverse());
        let at_truth = difference_image(&r, &f, &tg).unwrap().l2_norm();
        let at_identity = difference_image(&r, &f, &RigidTransform::identity())
            .unwrap()
            .l2_norm();
        assert!(at_truth < at_identity);
    }

    #[test]
    fn downsample_examples() {
        let v = blob([6, 5, 4]);
        assert_eq!(downsample(&v, 1), v);
        let g = Grid::centered([7, 5, 3], [1.0; 3]).unwrap();
        let c = Volume::from_fn(g, |_| 2.5);
        assert!(downsample(&c, 3)
            .data()
            .iter()
            .all(|&x| (x - 2.5).abs() < 1e-15));

        let g = Grid::new([4, 4, 4], [1.0; 3], [0.0; 3]).unwrap();
        let v = Volume::new(g, (0..64).map(|x| x as f64).collect()).unwrap();
        let d = downsample(&v, 2);
        assert_eq!(d.dims(), [2, 2, 2]);
        assert_eq!(d.spacing(), [2.0; 3]);
        assert_eq!(d.origin(), [0.5; 3]);
        // Block (0,0,0) holds i + 4j + 16k for i,j,k in {0,1}: mean 10.5.
        let expect = [10.5, 12.5, 18.5, 20.5, 42.5, 44.5, 50.5, 52.5];
        assert_eq!(d.data(), &expect);
        assert!((d.mean() - v.mean()).abs() < 1e-6);
    }

    #[test]
    fn downsample_keeps_2d_plane() {
        let v = blob([8, 8, 1]);
        let d = downsample(&v, 2);
        assert_eq!(d.dims(), [4, 4, 1]);
        assert_eq!(d.origin()[2], v.origin()[2]);
        assert_eq!(d.spacing()[2], v.spacing()[2]);
    }

    #[test]
    fn crop_examples() {
        let v = blob([8, 7, 6]);
        let same = crop_roi(&v, &v.grid().center(), v.dims());
        assert_eq!(same, v);

        let corner = v.grid().physical(0, 0, 0);
        let c = crop_roi(&v, &corner, [4, 4, 4]);
        // Starts 1.5 voxels before the corner (rounded to 2 for even sizes).
        assert_eq!(c.get(0, 0, 0), 0.0);
        let p = v.grid().physical(1, 1, 1);
        assert_eq!(c.sample(&p), Some(v.get(1, 1, 1)));
    }

    #[test]
    fn crop_preserves_physical_lookups() {
        let v = blob([12, 12, 12]);
        let center = v.grid().physical(7, 4, 6);
        let c = crop_roi(&v, &center, [5, 5, 5]);
        for (i, j, k) in [(7, 4, 6), (5, 3, 4), (9, 6, 8)] {
            let p = v.grid().physical(i, j, k);
            let got = c.sample(&p).unwrap();
            assert!((got - v.get(i, j, k)).abs() < 1e-12);
        }
    }

    proptest! {
        #[test]
        fn resampling_is_linear(a in -2.0..2.0f64, b in -2.0..2.0f64, tx in -3.0..3.0f64, rz in -20.0..20.0f64) {
            let v1 = blob([10, 9, 8]);
            let v2 = v1.map(|x| (3.0 * x).sin());
            let t = transform_from_params(&ParamVector([tx, 0.5, -0.25, 2.0, -1.0, rz]));
            let lhs = resample(&v1.linear_combination(a, &v2, b).unwrap(), &t);
            let rhs = resample(&v1, &t).linear_combination(a, &resample(&v2, &t), b).unwrap();
            for (x, y) in lhs.data().iter().zip(rhs.data()) {
                prop_assert!((x - y).abs() < 1e-6);
            }
        }
    }
}
