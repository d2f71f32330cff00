//! Rigid and affine transform algebra.
//!
//! A rigid transform is stored as a 4×4 homogeneous matrix acting on column
//! vectors `[x, y, z, 1]ᵀ`. Its six parameters are `(tx, ty, tz)` in mm and
//! `(θx, θy, θz)` in degrees, composed as `Trans(t) · Rx(θx) · Ry(θy) · Rz(θz)`.

use std::fmt;
use std::ops::{Index, IndexMut};

use nalgebra::{Matrix3, Matrix4, Point3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, VregError};

/// Cosine of θy below which the Euler extraction is treated as singular
/// (|θy| within 1e-6 degrees of 90).
const GIMBAL_COS: f64 = 1.745_329_251_994_33e-8;

/// Six rigid parameters `[tx, ty, tz, θx, θy, θz]` (mm, degrees).
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ParamVector(pub [f64; 6]);

impl ParamVector {
    pub const ZERO: ParamVector = ParamVector([0.0; 6]);

    pub fn new(v: [f64; 6]) -> Self {
        ParamVector(v)
    }

    pub fn translation(tx: f64, ty: f64, tz: f64) -> Self {
        ParamVector([tx, ty, tz, 0.0, 0.0, 0.0])
    }

    pub fn as_array(&self) -> &[f64; 6] {
        &self.0
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    pub fn weighted_norm(&self, weights: &DistanceWeights) -> f64 {
        self.0
            .iter()
            .zip(weights.0.iter())
            .map(|(x, w)| (w * x) * (w * x))
            .sum::<f64>()
            .sqrt()
    }

    pub fn l1_norm(&self) -> f64 {
        self.0.iter().map(|x| x.abs()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|x| x.is_finite())
    }

    pub fn with_component(mut self, axis: usize, value: f64) -> Self {
        self.0[axis] = value;
        self
    }
}

impl Index<usize> for ParamVector {
    type Output = f64;
    fn index(&self, i: usize) -> &f64 {
        &self.0[i]
    }
}

impl IndexMut<usize> for ParamVector {
    fn index_mut(&mut self, i: usize) -> &mut f64 {
        &mut self.0[i]
    }
}

impl fmt::Display for ParamVector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let v = &self.0;
        write!(
            f,
            "[{:.4}, {:.4}, {:.4}, {:.4}, {:.4}, {:.4}]",
            v[0], v[1], v[2], v[3], v[4], v[5]
        )
    }
}

/// Per-parameter weights used inside the transformation distance.
///
/// Unit weights mix millimetres and degrees one-to-one.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct DistanceWeights(pub [f64; 6]);

impl Default for DistanceWeights {
    fn default() -> Self {
        DistanceWeights([1.0; 6])
    }
}

fn rot_x(deg: f64) -> Matrix3<f64> {
    let (s, c) = deg.to_radians().sin_cos();
    Matrix3::new(1.0, 0.0, 0.0, 0.0, c, -s, 0.0, s, c)
}

fn rot_y(deg: f64) -> Matrix3<f64> {
    let (s, c) = deg.to_radians().sin_cos();
    Matrix3::new(c, 0.0, s, 0.0, 1.0, 0.0, -s, 0.0, c)
}

fn rot_z(deg: f64) -> Matrix3<f64> {
    let (s, c) = deg.to_radians().sin_cos();
    Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0)
}

/// A rigid-body transform as a homogeneous 4×4 matrix.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigidTransform {
    matrix: Matrix4<f64>,
}

impl Default for RigidTransform {
    fn default() -> Self {
        Self::identity()
    }
}

impl RigidTransform {
    pub fn identity() -> Self {
        RigidTransform {
            matrix: Matrix4::identity(),
        }
    }

    pub fn from_params(v: &ParamVector) -> Self {
        transform_from_params(v)
    }

    pub fn translation(tx: f64, ty: f64, tz: f64) -> Self {
        transform_from_params(&ParamVector::translation(tx, ty, tz))
    }

    pub fn rotation_z(deg: f64) -> Self {
        transform_from_params(&ParamVector([0.0, 0.0, 0.0, 0.0, 0.0, deg]))
    }

    /// Builds a transform from a rotation block and translation column.
    ///
    /// The caller guarantees the rotation block is orthonormal.
    pub fn from_parts(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Self {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&rotation);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&translation);
        RigidTransform { matrix: m }
    }

    pub fn matrix(&self) -> &Matrix4<f64> {
        &self.matrix
    }

    pub fn rotation(&self) -> Matrix3<f64> {
        self.matrix.fixed_view::<3, 3>(0, 0).into_owned()
    }

    pub fn translation_vector(&self) -> Vector3<f64> {
        self.matrix.fixed_view::<3, 1>(0, 3).into_owned()
    }

    pub fn params(&self) -> Result<ParamVector> {
        params_from_transform(self)
    }

    pub fn apply(&self, p: &Point3<f64>) -> Point3<f64> {
        Point3::from(self.rotation() * p.coords + self.translation_vector())
    }

    pub fn compose(&self, rhs: &RigidTransform) -> RigidTransform {
        compose(self, rhs)
    }

    pub fn inverse(&self) -> RigidTransform {
        invert(self)
    }

    /// Row-major matrix entries.
    pub fn row_major(&self) -> [f64; 16] {
        let mut out = [0.0; 16];
        for r in 0..4 {
            for c in 0..4 {
                out[r * 4 + c] = self.matrix[(r, c)];
            }
        }
        out
    }

    pub fn max_abs_diff(&self, other: &RigidTransform) -> f64 {
        (self.matrix - other.matrix).abs().max()
    }
}

/// Builds `Trans(t) · Rx · Ry · Rz` from six parameters (degrees).
pub fn transform_from_params(v: &ParamVector) -> RigidTransform {
    let [tx, ty, tz, ax, ay, az] = v.0;
    let r = rot_x(ax) * rot_y(ay) * rot_z(az);
    RigidTransform::from_parts(r, Vector3::new(tx, ty, tz))
}

/// Inverse of [`transform_from_params`] for θy strictly inside (−90°, 90°).
pub fn params_from_transform(t: &RigidTransform) -> Result<ParamVector> {
    let m = &t.matrix;
    // R = Rx·Ry·Rz gives R02 = sin θy, R00 = cy·cz, R01 = −cy·sz,
    // R12 = −sx·cy, R22 = cx·cy.
    let cy = m[(0, 0)].hypot(m[(0, 1)]);
    if cy < GIMBAL_COS {
        return Err(VregError::GimbalLock);
    }
    let ay = m[(0, 2)].atan2(cy);
    let ax = (-m[(1, 2)]).atan2(m[(2, 2)]);
    let az = (-m[(0, 1)]).atan2(m[(0, 0)]);
    Ok(ParamVector([
        m[(0, 3)],
        m[(1, 3)],
        m[(2, 3)],
        ax.to_degrees(),
        ay.to_degrees(),
        az.to_degrees(),
    ]))
}

/// Matrix product `a · b`, i.e. apply `b` first.
pub fn compose(a: &RigidTransform, b: &RigidTransform) -> RigidTransform {
    RigidTransform {
        matrix: a.matrix * b.matrix,
    }
}

/// Exact rigid inverse: transposed rotation, negated rotated translation.
pub fn invert(t: &RigidTransform) -> RigidTransform {
    let rt = t.rotation().transpose();
    let trans = -(rt * t.translation_vector());
    RigidTransform::from_parts(rt, trans)
}

/// Residual parameters `params(tg ∘ t⁻¹)`.
pub fn residual_params(tg: &RigidTransform, t: &RigidTransform) -> Result<ParamVector> {
    params_from_transform(&compose(tg, &invert(t)))
}

/// L2 norm of the parameters of `tg ∘ t⁻¹` with unit weights.
pub fn distance(tg: &RigidTransform, t: &RigidTransform) -> Result<f64> {
    if tg == t {
        return Ok(0.0);
    }
    Ok(residual_params(tg, t)?.norm())
}

pub fn distance_weighted(
    tg: &RigidTransform,
    t: &RigidTransform,
    weights: &DistanceWeights,
) -> Result<f64> {
    if tg == t {
        return Ok(0.0);
    }
    Ok(residual_params(tg, t)?.weighted_norm(weights))
}

/// Affine transform with a free linear block and zero translation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AffineTransform {
    matrix: Matrix4<f64>,
}

impl AffineTransform {
    pub fn identity() -> Self {
        AffineTransform {
            matrix: Matrix4::identity(),
        }
    }

    pub fn from_linear(linear: Matrix3<f64>) -> Result<Self> {
        if linear.determinant().abs() <= 1e-6 {
            return Err(VregError::Degenerate { attempts: 1 });
        }
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&linear);
        Ok(AffineTransform { matrix: m })
    }

    pub fn matrix(&self) -> &Matrix4<f64> {
        &self.matrix
    }

    pub fn linear(&self) -> Matrix3<f64> {
        self.matrix.fixed_view::<3, 3>(0, 0).into_owned()
    }

    pub fn determinant(&self) -> f64 {
        self.linear().determinant()
    }

    pub fn apply(&self, p: &Point3<f64>) -> Point3<f64> {
        Point3::from(self.linear() * p.coords)
    }

    pub fn inverse(&self) -> AffineTransform {
        // Nonsingular by construction.
        let inv = self
            .linear()
            .try_inverse()
            .unwrap_or_else(Matrix3::identity);
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&inv);
        AffineTransform { matrix: m }
    }
}

/// `I + C` with every `c_ij` uniform in `[-shear_range, shear_range]`.
///
/// Near-singular draws are rejected and redrawn, up to 100 attempts.
pub fn random_affine(shear_range: f64, seed: u64) -> Result<AffineTransform> {
    if shear_range <= 0.0 {
        return Ok(AffineTransform::identity());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    const ATTEMPTS: usize = 100;
    for _ in 0..ATTEMPTS {
        let mut lin = Matrix3::<f64>::identity();
        for r in 0..3 {
            for c in 0..3 {
                lin[(r, c)] += rng.random_range(-shear_range..=shear_range);
            }
        }
        if lin.determinant().abs() > 1e-6 {
            return AffineTransform::from_linear(lin);
        }
    }
    Err(VregError::Degenerate { attempts: ATTEMPTS })
}

/// JSON form of a transform: parameters plus an optional audit matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransformJson {
    pub params: [f64; 6],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub matrix: Option<Vec<f64>>,
}

impl TransformJson {
    pub fn from_transform(t: &RigidTransform, with_matrix: bool) -> Result<Self> {
        Ok(TransformJson {
            params: params_from_transform(t)?.0,
            matrix: with_matrix.then(|| t.row_major().to_vec()),
        })
    }

    pub fn to_transform(&self) -> RigidTransform {
        transform_from_params(&ParamVector(self.params))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn close(a: &RigidTransform, b: &RigidTransform, tol: f64) -> bool {
        a.max_abs_diff(b) <= tol
    }

    #[test]
    fn zero_params_give_identity() {
        let t = transform_from_params(&ParamVector::ZERO);
        assert_eq!(*t.matrix(), Matrix4::identity());
    }

    #[test]
    fn pure_translation_column() {
        let t = transform_from_params(&ParamVector::translation(5.0, 0.0, 0.0));
        assert_eq!(t.rotation(), Matrix3::identity());
        assert_eq!(
            t.matrix().column(3).into_owned(),
            nalgebra::Vector4::new(5.0, 0.0, 0.0, 1.0)
        );
    }

    #[test]
    fn z_rotation_maps_x_to_y() {
        let t = RigidTransform::rotation_z(90.0);
        let p = t.apply(&Point3::new(1.0, 0.0, 0.0));
        assert!((p - Point3::new(0.0, 1.0, 0.0)).norm() < 1e-15);
    }

    #[test]
    fn y_factor_is_a_proper_rotation() {
        let t = transform_from_params(&ParamVector([0.0, 0.0, 0.0, 0.0, 37.0, 0.0]));
        let r = t.rotation();
        assert!((r.determinant() - 1.0).abs() < 1e-12);
        assert!((r * r.transpose() - Matrix3::identity()).abs().max() < 1e-12);
        assert_eq!(r[(1, 1)], 1.0);
    }

    #[test]
    fn identity_params_round_trip() {
        let p = params_from_transform(&RigidTransform::identity()).unwrap();
        assert_eq!(p, ParamVector::ZERO);
    }

    #[test]
    fn known_params_round_trip() {
        let v = ParamVector([1.0, 2.0, 3.0, 10.0, -20.0, 30.0]);
        let back = params_from_transform(&transform_from_params(&v)).unwrap();
        for i in 0..6 {
            assert!((back[i] - v[i]).abs() < 1e-9, "{back} vs {v}");
        }
    }

    #[test]
    fn gimbal_lock_detected() {
        let t = transform_from_params(&ParamVector([0.0, 0.0, 0.0, 0.0, 90.0, 0.0]));
        assert!(matches!(
            params_from_transform(&t),
            Err(VregError::GimbalLock)
        ));
    }

    #[test]
    fn compose_examples() {
        let t = transform_from_params(&ParamVector([1.0, -2.0, 0.5, 5.0, 6.0, 7.0]));
        assert!(close(&compose(&RigidTransform::identity(), &t), &t, 0.0));
        let c = compose(
            &RigidTransform::translation(1.0, 0.0, 0.0),
            &RigidTransform::translation(0.0, 2.0, 0.0),
        );
        assert!(close(&c, &RigidTransform::translation(1.0, 2.0, 0.0), 0.0));
        // Rz(90°)·Trans(1,0,0): translation column is Rz·(1,0,0) = (0,1,0).
        let c = compose(
            &RigidTransform::rotation_z(90.0),
            &RigidTransform::translation(1.0, 0.0, 0.0),
        );
        let tcol = c.translation_vector();
        assert!((tcol - Vector3::new(0.0, 1.0, 0.0)).norm() < 1e-15);
    }

    #[test]
    fn invert_examples() {
        assert!(close(
            &invert(&RigidTransform::identity()),
            &RigidTransform::identity(),
            0.0
        ));
        assert!(close(
            &invert(&RigidTransform::translation(3.0, 0.0, 0.0)),
            &RigidTransform::translation(-3.0, 0.0, 0.0),
            0.0
        ));
    }

    #[test]
    fn distance_examples() {
        let t = transform_from_params(&ParamVector([4.0, -1.0, 2.0, 3.0, -8.0, 12.0]));
        assert_eq!(distance(&t, &t).unwrap(), 0.0);
        let d = distance(
            &RigidTransform::translation(3.0, 4.0, 0.0),
            &RigidTransform::identity(),
        )
        .unwrap();
        assert!((d - 5.0).abs() < 1e-12);
        let d = distance(
            &RigidTransform::rotation_z(10.0),
            &RigidTransform::identity(),
        )
        .unwrap();
        assert!((d - 10.0).abs() < 1e-12);
    }

    #[test]
    fn weighted_distance_scales_components() {
        let w = DistanceWeights([1.0, 1.0, 1.0, 0.5, 0.5, 0.5]);
        let d = distance_weighted(
            &RigidTransform::rotation_z(10.0),
            &RigidTransform::identity(),
            &w,
        )
        .unwrap();
        assert!((d - 5.0).abs() < 1e-12);
    }

    #[test]
    fn random_affine_examples() {
        assert_eq!(random_affine(0.0, 1).unwrap(), AffineTransform::identity());
        assert_eq!(
            random_affine(0.25, 9).unwrap(),
            random_affine(0.25, 9).unwrap()
        );
        for seed in 0..10_000 {
            let a = random_affine(0.25, seed).unwrap();
            let c = a.linear() - Matrix3::identity();
            assert!(c.iter().all(|x| x.abs() <= 0.25));
            assert!(a.determinant().abs() > 1e-6);
            assert_eq!(
                a.matrix().row(3).into_owned(),
                nalgebra::RowVector4::new(0.0, 0.0, 0.0, 1.0)
            );
        }
    }

    #[test]
    fn transform_json_round_trip() {
        let t = transform_from_params(&ParamVector([1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let j = TransformJson::from_transform(&t, true).unwrap();
        let s = serde_json::to_string(&j).unwrap();
        assert!(s.starts_with("{\"params\":["));
        let back: TransformJson = serde_json::from_str(&s).unwrap();
        assert!(close(&back.to_transform(), &t, 1e-12));
    }

    fn coarse_box() -> impl Strategy<Value = ParamVector> {
        (
            -30.0..30.0f64,
            -30.0..30.0f64,
            -150.0..150.0f64,
            -30.0..30.0f64,
            -59.9..59.9f64,
            -30.0..30.0f64,
        )
            .prop_map(|(a, b, c, d, e, f)| ParamVector([a, b, c, d, e, f]))
    }

    proptest! {
        #[test]
        fn params_round_trip(v in coarse_box()) {
            let t = transform_from_params(&v);
            let back = params_from_transform(&t).unwrap();
            for i in 0..6 {
                prop_assert!((back[i] - v[i]).abs() < 1e-9);
            }
            let r = t.rotation();
            prop_assert!((r.determinant() - 1.0).abs() < 1e-12);
        }

        #[test]
        fn compose_with_inverse_is_identity(v in coarse_box()) {
            let t = transform_from_params(&v);
            prop_assert!(close(&compose(&t, &invert(&t)), &RigidTransform::identity(), 1e-12));
        }

        #[test]
        fn composition_is_associative(a in coarse_box(), b in coarse_box(), c in coarse_box()) {
            let (a, b, c) = (transform_from_params(&a), transform_from_params(&b), transform_from_params(&c));
            let lhs = compose(&compose(&a, &b), &c);
            let rhs = compose(&a, &compose(&b, &c));
            prop_assert!(close(&lhs, &rhs, 1e-9));
        }

        #[test]
        fn translation_distance_is_euclidean(a in prop::array::uniform3(-50.0..50.0f64), b in prop::array::uniform3(-50.0..50.0f64)) {
            let ta = RigidTransform::translation(a[0], a[1], a[2]);
            let tb = RigidTransform::translation(b[0], b[1], b[2]);
            let euclid = ((a[0]-b[0]).powi(2) + (a[1]-b[1]).powi(2) + (a[2]-b[2]).powi(2)).sqrt();
            prop_assert!((distance(&ta, &tb).unwrap() - euclid).abs() < 1e-9);
        }

        #[test]
        fn distance_two_routes_agree(a in coarse_box(), b in coarse_box()) {
            let (ta, tb) = (transform_from_params(&a), transform_from_params(&b));
            // Route 1: invert then compose. Route 2: solve tb·X = ta for X via
            // the transposed rotation directly.
            let direct = distance(&ta, &tb);
            let rel = RigidTransform::from_parts(
                ta.rotation() * tb.rotation().transpose(),
                ta.translation_vector() - ta.rotation() * tb.rotation().transpose() * tb.translation_vector(),
            );
            if let (Ok(d1), Ok(p)) = (direct, params_from_transform(&rel)) {
                prop_assert!(d1 >= 0.0);
                prop_assert!((d1 - p.norm()).abs() < 1e-9);
            }
        }
    }
}
