//! Point clouds, rigid poses and pose-error metrics.

use nalgebra::{Matrix3, Rotation3, Unit, Vector3};

use crate::error::{Error, Result};
use crate::scalar::Real;

/// A LiDAR return. Intensity is unitless reflectance, zero when absent.
#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub struct Point<T> {
    pub x: T,
    pub y: T,
    pub z: T,
    pub intensity: T,
}

impl<T: Real> Point<T> {
    pub fn new(x: T, y: T, z: T) -> Self {
        Self {
            x,
            y,
            z,
            intensity: T::zero(),
        }
    }

    pub fn with_intensity(x: T, y: T, z: T, intensity: T) -> Self {
        Self { x, y, z, intensity }
    }

    pub fn from_coords(v: &Vector3<T>, intensity: T) -> Self {
        Self::with_intensity(v.x, v.y, v.z, intensity)
    }

    #[inline]
    pub fn coords(&self) -> Vector3<T> {
        Vector3::new(self.x, self.y, self.z)
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.z.is_finite() && self.intensity.is_finite()
    }

    /// Azimuth `atan2(y, x)` in degrees, in `(-180, 180]`.
    pub fn azimuth_deg(&self) -> T {
        self.y.atan2(self.x).to_degrees()
    }
}

/// An ordered set of points with a free-form frame label.
///
/// Every point is finite. An empty cloud is representable; operations that
/// need points reject it explicitly.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct PointCloud<T> {
    points: Vec<Point<T>>,
    pub frame_id: String,
}

impl<T: Real> PointCloud<T> {
    pub fn new(points: Vec<Point<T>>) -> Result<Self> {
        if let Some(index) = points.iter().position(|p| !p.is_finite()) {
            return Err(Error::NonFinitePoint { index });
        }
        Ok(Self {
            points,
            frame_id: String::new(),
        })
    }

    /// Builds a cloud from coordinates with zero intensity.
    pub fn from_coords<I: IntoIterator<Item = Vector3<T>>>(coords: I) -> Result<Self> {
        Self::new(coords.into_iter().map(|v| Point::from_coords(&v, T::zero())).collect())
    }

    /// Caller guarantees every point is finite.
    pub(crate) fn from_finite(points: Vec<Point<T>>, frame_id: String) -> Self {
        debug_assert!(points.iter().all(Point::is_finite));
        Self { points, frame_id }
    }

    pub fn with_frame_id(mut self, frame_id: impl Into<String>) -> Self {
        self.frame_id = frame_id.into();
        self
    }

    pub fn points(&self) -> &[Point<T>] {
        &self.points
    }

    pub fn into_points(self) -> Vec<Point<T>> {
        self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn coords(&self) -> Vec<Vector3<T>> {
        self.points.iter().map(Point::coords).collect()
    }

    pub fn ensure_non_empty(&self) -> Result<()> {
        if self.is_empty() {
            Err(Error::Empty("point cloud"))
        } else {
            Ok(())
        }
    }

    /// Keeps points for which `keep` returns true, preserving order.
    pub fn filter<F: FnMut(&Point<T>) -> bool>(&self, mut keep: F) -> Self {
        Self {
            points: self.points.iter().copied().filter(|p| keep(p)).collect(),
            frame_id: self.frame_id.clone(),
        }
    }

    pub fn cast<U: Real>(&self) -> PointCloud<U> {
        let points = self
            .points
            .iter()
            .map(|p| {
                Point::with_intensity(
                    U::lit(p.x.as_f64()),
                    U::lit(p.y.as_f64()),
                    U::lit(p.z.as_f64()),
                    U::lit(p.intensity.as_f64()),
                )
            })
            .collect();
        PointCloud {
            points,
            frame_id: self.frame_id.clone(),
        }
    }
}

/// Rigid transform `p ↦ R p + t`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Pose<T: Real> {
    rotation: Matrix3<T>,
    translation: Vector3<T>,
}

impl<T: Real> Pose<T> {
    /// Validates orthonormality and `det(R) = +1`.
    pub fn new(rotation: Matrix3<T>, translation: Vector3<T>) -> Result<Self> {
        if !rotation.iter().chain(translation.iter()).all(|v| v.is_finite()) {
            return Err(Error::NonOrthonormal {
                deviation: f64::INFINITY,
            });
        }
        let deviation = orthonormality_deviation(&rotation);
        if deviation > T::orthonormal_tolerance() {
            return Err(Error::NonOrthonormal {
                deviation: deviation.as_f64(),
            });
        }
        Ok(Self { rotation, translation })
    }

    /// Projects `rotation` onto SO(3) first.
    pub fn new_orthonormalized(rotation: &Matrix3<T>, translation: Vector3<T>) -> Self {
        Self {
            rotation: nearest_rotation(rotation),
            translation,
        }
    }

    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn from_translation(translation: Vector3<T>) -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation,
        }
    }

    /// Rotation by `angle` radians about `axis` (normalized internally).
    pub fn from_axis_angle(axis: &Vector3<T>, angle: T, translation: Vector3<T>) -> Self {
        let rotation = Rotation3::from_axis_angle(&Unit::new_normalize(*axis), angle);
        Self {
            rotation: rotation.into_inner(),
            translation,
        }
    }

    /// Z-Y-X Euler angles in radians: `R = Rz(yaw) Ry(pitch) Rx(roll)`.
    pub fn from_euler(roll: T, pitch: T, yaw: T, translation: Vector3<T>) -> Self {
        let rotation = Rotation3::from_euler_angles(roll, pitch, yaw);
        Self {
            rotation: rotation.into_inner(),
            translation,
        }
    }

    pub fn from_yaw(yaw: T, translation: Vector3<T>) -> Self {
        Self::from_axis_angle(&Vector3::z(), yaw, translation)
    }

    pub fn rotation(&self) -> &Matrix3<T> {
        &self.rotation
    }

    pub fn translation(&self) -> &Vector3<T> {
        &self.translation
    }

    /// Heading angle in radians, `atan2(R10, R00)`.
    pub fn yaw(&self) -> T {
        self.rotation[(1, 0)].atan2(self.rotation[(0, 0)])
    }

    #[inline]
    pub fn transform(&self, v: &Vector3<T>) -> Vector3<T> {
        self.rotation * v + self.translation
    }

    pub fn transform_point(&self, p: &Point<T>) -> Point<T> {
        Point::from_coords(&self.transform(&p.coords()), p.intensity)
    }

    /// Pose applying `other` first, then `self`.
    pub fn compose(&self, other: &Self) -> Self {
        let mut rotation = self.rotation * other.rotation;
        if orthonormality_deviation(&rotation) > T::orthonormal_tolerance() {
            rotation = nearest_rotation(&rotation);
        }
        Self {
            rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> Self {
        let rt = self.rotation.transpose();
        Self {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    /// Row-major `[R | t]`, the twelve numbers of a KITTI pose line.
    pub fn to_row_major_3x4(&self) -> [T; 12] {
        let r = &self.rotation;
        let t = &self.translation;
        [
            r[(0, 0)],
            r[(0, 1)],
            r[(0, 2)],
            t.x,
            r[(1, 0)],
            r[(1, 1)],
            r[(1, 2)],
            t.y,
            r[(2, 0)],
            r[(2, 1)],
            r[(2, 2)],
            t.z,
        ]
    }

    pub fn cast<U: Real>(&self) -> Pose<U> {
        Pose {
            rotation: self.rotation.map(|v| U::lit(v.as_f64())),
            translation: self.translation.map(|v| U::lit(v.as_f64())),
        }
    }
}

impl<T: Real> Default for Pose<T> {
    fn default() -> Self {
        Self::identity()
    }
}

/// `‖RᵀR − I‖∞` combined with `|det R − 1|`.
pub fn orthonormality_deviation<T: Real>(r: &Matrix3<T>) -> T {
    let gram = r.transpose() * r - Matrix3::identity();
    let max_entry = gram.iter().fold(T::zero(), |m, v| m.max(v.abs()));
    max_entry.max((r.determinant() - T::one()).abs())
}

/// Closest rotation in the Frobenius sense: `U diag(1, 1, det(U Vᵀ)) Vᵀ`.
pub fn nearest_rotation<T: Real>(m: &Matrix3<T>) -> Matrix3<T> {
    let svd = m.svd(true, true);
    let (u, v_t) = (svd.u.unwrap(), svd.v_t.unwrap());
    let d = (u * v_t).determinant();
    let mut fix = Matrix3::identity();
    if d < T::zero() {
        fix[(2, 2)] = -T::one();
    }
    u * fix * v_t
}

/// Geodesic angle of a rotation matrix, radians in `[0, π]`.
///
/// Uses `atan2(‖vee(R − Rᵀ)‖ / 2, (tr R − 1) / 2)`, which equals the
/// clamped `acos((tr R − 1) / 2)` but keeps full precision near zero.
pub fn rotation_angle<T: Real>(r: &Matrix3<T>) -> T {
    let half = T::lit(0.5);
    let cos = ((r.trace() - T::one()) * half).clamp(-T::one(), T::one());
    let skew = Vector3::new(r[(2, 1)] - r[(1, 2)], r[(0, 2)] - r[(2, 0)], r[(1, 0)] - r[(0, 1)]);
    let sin = (skew.norm() * half).min(T::one());
    sin.atan2(cos)
}

/// Translation error in meters and rotation error in degrees.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PoseError<T> {
    pub translation_error: T,
    pub rotation_error: T,
}

pub fn apply_pose<T: Real>(pose: &Pose<T>, cloud: &PointCloud<T>) -> PointCloud<T> {
    let points = cloud.points.iter().map(|p| pose.transform_point(p)).collect();
    PointCloud {
        points,
        frame_id: cloud.frame_id.clone(),
    }
}

pub fn compose<T: Real>(a: &Pose<T>, b: &Pose<T>) -> Pose<T> {
    a.compose(b)
}

pub fn inverse<T: Real>(p: &Pose<T>) -> Pose<T> {
    p.inverse()
}

pub fn pose_error<T: Real>(estimate: &Pose<T>, truth: &Pose<T>) -> PoseError<T> {
    let translation_error = (estimate.translation - truth.translation).norm();
    let relative = truth.rotation.transpose() * estimate.rotation;
    PoseError {
        translation_error,
        rotation_error: rotation_angle(&relative).to_degrees(),
    }
}

/// Removes points whose azimuth falls in `[center − width/2, center + width/2)`.
pub fn remove_sector<T: Real>(cloud: &PointCloud<T>, center_azimuth_deg: T, width_deg: T) -> Result<PointCloud<T>> {
    let full = T::lit(360.0);
    if !(width_deg >= T::zero() && width_deg < full) {
        return Err(Error::invalid(
            "width",
            format!("sector width {width_deg} outside [0, 360)"),
        ));
    }
    if width_deg == T::zero() {
        return Ok(cloud.clone());
    }
    let half = width_deg * T::lit(0.5);
    Ok(cloud.filter(|p| {
        let offset = wrap_degrees(p.azimuth_deg() - center_azimuth_deg);
        !(offset >= -half && offset < half)
    }))
}

/// Wraps an angle in degrees into `[-180, 180)`.
pub fn wrap_degrees<T: Real>(deg: T) -> T {
    let full = T::lit(360.0);
    let half = T::lit(180.0);
    let mut d = (deg + half) % full;
    if d < T::zero() {
        d += full;
    }
    d - half
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use std::f64::consts::PI;

    fn cloud(points: &[[f64; 3]]) -> PointCloud<f64> {
        PointCloud::from_coords(points.iter().map(|p| Vector3::new(p[0], p[1], p[2]))).unwrap()
    }

    #[test]
    fn identity_leaves_cloud_unchanged() {
        let c = cloud(&[[1.0, 2.0, 3.0], [-4.0, 0.5, 9.0]]);
        assert_eq!(apply_pose(&Pose::identity(), &c), c);
    }

    #[test]
    fn half_turn_yaw_flips_x() {
        let pose = Pose::from_yaw(PI, Vector3::zeros());
        let out = apply_pose(&pose, &cloud(&[[1.0, 0.0, 0.0]]));
        let p = out.points()[0].coords();
        assert_abs_diff_eq!(p, Vector3::new(-1.0, 0.0, 0.0), epsilon = 1e-12);
    }

    #[test]
    fn intensity_survives_transform() {
        let c = PointCloud::new(vec![Point::with_intensity(1.0, 2.0, 3.0, 0.25)]).unwrap();
        let out = apply_pose(&Pose::from_yaw(0.3, Vector3::new(1.0, 1.0, 1.0)), &c);
        assert_eq!(out.points()[0].intensity, 0.25);
    }

    #[test]
    fn non_finite_points_rejected() {
        let err = PointCloud::new(vec![Point::new(0.0, 0.0, 0.0), Point::new(f64::NAN, 0.0, 0.0)]);
        assert!(matches!(err, Err(Error::NonFinitePoint { index: 1 })));
    }

    #[test]
    fn two_quarter_yaws_make_half_turn() {
        let q = Pose::from_yaw(PI / 2.0, Vector3::zeros());
        let half = compose(&q, &q);
        // Matrix product oracle written out by hand.
        let expected = Matrix3::new(-1.0, 0.0, 0.0, 0.0, -1.0, 0.0, 0.0, 0.0, 1.0);
        assert_abs_diff_eq!(*half.rotation(), expected, epsilon = 1e-12);
    }

    #[test]
    fn compose_with_identity_and_inverse() {
        let p = Pose::from_euler(0.1, -0.2, 2.5, Vector3::new(3.0, -1.0, 0.5));
        assert_eq!(compose(&Pose::identity(), &p), p);
        let id = compose(&p, &inverse(&p));
        assert_abs_diff_eq!(*id.rotation(), Matrix3::identity(), epsilon = 1e-9);
        assert_abs_diff_eq!(*id.translation(), Vector3::zeros(), epsilon = 1e-9);
    }

    #[test]
    fn inverse_of_pure_translation() {
        let p = Pose::from_translation(Vector3::new(1.0, 2.0, 3.0));
        assert_eq!(*inverse(&p).translation(), Vector3::new(-1.0, -2.0, -3.0));
        assert_eq!(inverse(&Pose::<f64>::identity()), Pose::identity());
    }

    #[test]
    fn compose_reorthonormalizes_drift() {
        let mut r = *Pose::from_yaw(0.7, Vector3::zeros()).rotation();
        r[(0, 1)] += 1e-7;
        let drifted = Pose {
            rotation: r,
            translation: Vector3::zeros(),
        };
        let out = compose(&drifted, &Pose::identity());
        assert!(orthonormality_deviation(out.rotation()) < 1e-12);
    }

    #[test]
    fn new_rejects_scaled_rotation() {
        let r = Matrix3::identity() * 1.01;
        assert!(Pose::new(r, Vector3::zeros()).is_err());
        let reflection = Matrix3::new(1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, -1.0);
        assert!(Pose::new(reflection, Vector3::zeros()).is_err());
    }

    #[test]
    fn pose_error_cases() {
        let truth = Pose::from_euler(0.05, 0.02, 1.0, Vector3::new(1.0, 2.0, 3.0));
        let e = pose_error(&truth, &truth);
        assert_eq!(e.translation_error, 0.0);
        assert_eq!(e.rotation_error, 0.0);

        // Five degrees about z applied on top of the truth rotation.
        let extra = Pose::from_axis_angle(&Vector3::z(), 5f64.to_radians(), Vector3::zeros());
        let est = Pose {
            rotation: truth.rotation() * extra.rotation(),
            translation: *truth.translation(),
        };
        let e = pose_error(&est, &truth);
        assert_abs_diff_eq!(e.translation_error, 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(e.rotation_error, 5.0, epsilon = 1e-9);

        let e = pose_error(&Pose::from_translation(Vector3::new(2.0, 0.0, 0.0)), &Pose::identity());
        assert_eq!(e.translation_error, 2.0);
        assert_eq!(e.rotation_error, 0.0);
    }

    #[test]
    fn rotation_angle_matches_acos_away_from_zero() {
        for deg in [0.5f64, 10.0, 45.0, 90.0, 135.0, 179.0, 180.0] {
            let r = Pose::from_axis_angle(&Vector3::new(1.0, -2.0, 0.5), deg.to_radians(), Vector3::zeros());
            let acos = ((r.rotation().trace() - 1.0) / 2.0).clamp(-1.0, 1.0).acos();
            assert_abs_diff_eq!(rotation_angle(r.rotation()), acos, epsilon = 1e-7);
            assert_abs_diff_eq!(rotation_angle(r.rotation()).to_degrees(), deg, epsilon = 1e-9);
        }
    }

    #[test]
    fn sector_width_zero_is_noop() {
        let c = cloud(&[[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]]);
        assert_eq!(remove_sector(&c, 0.0, 0.0).unwrap(), c);
        assert!(remove_sector(&c, 0.0, 360.0).is_err());
        assert!(remove_sector(&c, 0.0, -1.0).is_err());
    }

    fn ring(offset_deg: f64) -> PointCloud<f64> {
        PointCloud::from_coords((0..360).map(|i| {
            let a = (i as f64 + offset_deg).to_radians();
            Vector3::new(a.cos(), a.sin(), 0.0)
        }))
        .unwrap()
    }

    #[test]
    fn sector_removal_counts_on_ring() {
        // Counting oracle: 90 of the 360 azimuths (offset by half a degree from
        // the sector edges) fall inside any 90° window.
        let c = ring(0.5);
        for center in [0.0, 37.0, 180.0, -135.0] {
            assert_eq!(remove_sector(&c, center, 90.0).unwrap().len(), 270, "center {center}");
        }
    }

    #[test]
    fn sector_straddling_the_seam() {
        let c = ring(0.25);
        let out = remove_sector(&c, 179.0, 30.0).unwrap();
        // Brute-force membership: angular distance to 179° under 15° (half-open).
        let expected = c
            .points()
            .iter()
            .filter(|p| {
                let mut d = p.azimuth_deg() - 179.0;
                while d < -180.0 {
                    d += 360.0;
                }
                while d >= 180.0 {
                    d -= 360.0;
                }
                !(-15.0..15.0).contains(&d)
            })
            .count();
        assert_eq!(out.len(), expected);
        assert_eq!(out.len(), 330);
        assert!(out.points().iter().all(|p| {
            let az = p.azimuth_deg();
            (-166.0..164.0).contains(&az)
        }));
    }

    #[test]
    fn wrap_degrees_range() {
        assert_eq!(wrap_degrees(190.0), -170.0);
        assert_eq!(wrap_degrees(-190.0), 170.0);
        assert_eq!(wrap_degrees(180.0), -180.0);
        assert_eq!(wrap_degrees(0.0), 0.0);
    }
}
