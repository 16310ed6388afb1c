//! Rigid-transform math and raw multi-sensor point-cloud merging.
//!
//! Every sensor is described by a global [`Pose`] plus a mounting height
//! above ground. The sensor's local frame has its origin at the sensor
//! head — the pose position lifted by the mounting height — and is
//! oriented by the pose's yaw/pitch/roll applied in z-y-x order.
//!
//! Merging re-expresses every secondary sensor's cloud in a chosen ego
//! sensor's local frame: each point is rotated by the angle-difference
//! matrix ([`rotation_matrix`]) in homogeneous form and then shifted by a
//! yaw-compensated translation ([`translation_vector`]). The translation
//! comes in two flavors (see [`TranslationFormula`]): the right-handed
//! form, which satisfies the landmark round-trip property in this crate's
//! right-handed world frame, and a left-handed compatibility form that
//! reproduces transforms exported from left-handed engines. The
//! angle-difference rotation is exact whenever the ego sensor is mounted
//! level (zero pitch and roll); secondary sensors may be oriented freely.

use crate::error::{Error, Result};

/// Normalize an angle to the half-open interval (-pi, pi].
pub fn wrap_angle(a: f64) -> f64 {
    let r = a.rem_euclid(std::f64::consts::TAU);
    if r > std::f64::consts::PI {
        r - std::f64::consts::TAU
    } else {
        r
    }
}

/// Position and orientation of a sensor in the global frame.
///
/// Angles are radians, normalized to (-pi, pi] by [`Pose::new`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub yaw: f64,
    pub pitch: f64,
    pub roll: f64,
}

impl Pose {
    pub fn new(x: f64, y: f64, z: f64, yaw: f64, pitch: f64, roll: f64) -> Result<Pose> {
        for (name, v) in [
            ("x", x),
            ("y", y),
            ("z", z),
            ("yaw", yaw),
            ("pitch", pitch),
            ("roll", roll),
        ] {
            if !v.is_finite() {
                return Err(Error::invalid(format!("pose field {name} is not finite")));
            }
        }
        Ok(Pose {
            x,
            y,
            z,
            yaw: wrap_angle(yaw),
            pitch: wrap_angle(pitch),
            roll: wrap_angle(roll),
        })
    }

    /// A level pose on the ground plane, facing `yaw`.
    pub fn level(x: f64, y: f64, yaw: f64) -> Result<Pose> {
        Pose::new(x, y, 0.0, yaw, 0.0, 0.0)
    }

    /// Orientation matrix of this pose (local axes expressed in world axes).
    pub fn rotation(&self) -> Mat4 {
        rotation_matrix(self.yaw, self.pitch, self.roll).expect("pose angles are finite")
    }

    /// World position of the sensor head for a given mounting height.
    pub fn sensor_origin(&self, mount_height: f64) -> [f64; 3] {
        [self.x, self.y, self.z + mount_height]
    }

    /// Express a sensor-local point in the world frame.
    pub fn local_to_world(&self, mount_height: f64, p: [f64; 3]) -> [f64; 3] {
        let r = self.rotation().apply_point(p);
        let o = self.sensor_origin(mount_height);
        [r[0] + o[0], r[1] + o[1], r[2] + o[2]]
    }

    /// Express a world point in the sensor-local frame.
    pub fn world_to_local(&self, mount_height: f64, p: [f64; 3]) -> [f64; 3] {
        let o = self.sensor_origin(mount_height);
        self.rotation()
            .apply_inverse_rotation([p[0] - o[0], p[1] - o[1], p[2] - o[2]])
    }
}

/// One LiDAR return: position in meters plus a unitless intensity in [0, 1].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Point {
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub intensity: f64,
}

impl Point {
    pub fn new(x: f64, y: f64, z: f64, intensity: f64) -> Point {
        Point { x, y, z, intensity }
    }

    pub fn xyz(&self) -> [f64; 3] {
        [self.x, self.y, self.z]
    }
}

/// A list of points expressed in a named coordinate frame.
#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    pub frame_id: String,
    pub points: Vec<Point>,
}

impl PointCloud {
    pub fn new(frame_id: impl Into<String>) -> Result<PointCloud> {
        let frame_id = frame_id.into();
        if frame_id.is_empty() {
            return Err(Error::invalid("point cloud frame_id must be nonempty"));
        }
        Ok(PointCloud {
            frame_id,
            points: Vec::new(),
        })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// A sensor's pose, mounting height above ground, and captured local cloud.
#[derive(Debug, Clone)]
pub struct SensorFrame {
    pub pose: Pose,
    pub mount_height: f64,
    pub cloud: PointCloud,
}

impl SensorFrame {
    pub fn new(pose: Pose, mount_height: f64, cloud: PointCloud) -> Result<SensorFrame> {
        if !(mount_height.is_finite() && mount_height > 0.0) {
            return Err(Error::invalid("mount_height must be finite and > 0"));
        }
        Ok(SensorFrame {
            pose,
            mount_height,
            cloud,
        })
    }
}

/// Row-major 4x4 matrix in homogeneous form.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Mat4(pub [[f64; 4]; 4]);

impl Mat4 {
    pub const IDENTITY: Mat4 = Mat4([
        [1.0, 0.0, 0.0, 0.0],
        [0.0, 1.0, 0.0, 0.0],
        [0.0, 0.0, 1.0, 0.0],
        [0.0, 0.0, 0.0, 1.0],
    ]);

    pub fn mul(&self, rhs: &Mat4) -> Mat4 {
        let mut out = [[0.0; 4]; 4];
        for (i, row) in self.0.iter().enumerate() {
            for j in 0..4 {
                out[i][j] = (0..4).map(|k| row[k] * rhs.0[k][j]).sum();
            }
        }
        Mat4(out)
    }

    /// Apply to a point in homogeneous form (x, y, z, 1).
    pub fn apply_point(&self, p: [f64; 3]) -> [f64; 3] {
        let h = [p[0], p[1], p[2], 1.0];
        let mut out = [0.0; 3];
        for (i, o) in out.iter_mut().enumerate() {
            *o = (0..4).map(|k| self.0[i][k] * h[k]).sum();
        }
        out
    }

    /// Apply the transpose of the rotation block; inverts a pure rotation.
    pub fn apply_inverse_rotation(&self, v: [f64; 3]) -> [f64; 3] {
        let mut out = [0.0; 3];
        for (i, o) in out.iter_mut().enumerate() {
            *o = (0..3).map(|k| self.0[k][i] * v[k]).sum();
        }
        out
    }

    /// Max absolute deviation of the 3x3 block from orthonormality.
    pub fn orthonormality_error(&self) -> f64 {
        let mut worst: f64 = 0.0;
        for i in 0..3 {
            for j in 0..3 {
                let dot: f64 = (0..3).map(|k| self.0[i][k] * self.0[j][k]).sum();
                let expect = if i == j { 1.0 } else { 0.0 };
                worst = worst.max((dot - expect).abs());
            }
        }
        worst
    }

    /// Determinant of the 3x3 rotation block.
    pub fn rotation_determinant(&self) -> f64 {
        let m = &self.0;
        m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
            - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
            + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
    }
}

/// Which translation variant to use when merging clouds.
///
/// `RightHanded` is the default: it is the frame rotation of the position
/// delta into the ego yaw frame and satisfies the landmark round-trip
/// property. `LeftHandedCompat` keeps the sign convention used by data
/// exported from left-handed engines (y axis mirrored); in a right-handed
/// world it flips the lateral component and is provided only for
/// compatibility with such sources.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum TranslationFormula {
    #[default]
    RightHanded,
    LeftHandedCompat,
}

/// Rotation from the differences in yaw, pitch and roll between two
/// sensors, as a homogeneous matrix R = Rz * Ry * Rx.
pub fn rotation_matrix(d_yaw: f64, d_pitch: f64, d_roll: f64) -> Result<Mat4> {
    if !(d_yaw.is_finite() && d_pitch.is_finite() && d_roll.is_finite()) {
        return Err(Error::invalid("rotation angles must be finite"));
    }
    let (sy, cy) = d_yaw.sin_cos();
    let (sp, cp) = d_pitch.sin_cos();
    let (sr, cr) = d_roll.sin_cos();
    let rz = Mat4([
        [cy, -sy, 0.0, 0.0],
        [sy, cy, 0.0, 0.0],
        [0.0, 0.0, 1.0, 0.0],
        [0.0, 0.0, 0.0, 1.0],
    ]);
    let ry = Mat4([
        [cp, 0.0, sp, 0.0],
        [0.0, 1.0, 0.0, 0.0],
        [-sp, 0.0, cp, 0.0],
        [0.0, 0.0, 0.0, 1.0],
    ]);
    let rx = Mat4([
        [1.0, 0.0, 0.0, 0.0],
        [0.0, cr, -sr, 0.0],
        [0.0, sr, cr, 0.0],
        [0.0, 0.0, 0.0, 1.0],
    ]);
    Ok(rz.mul(&ry).mul(&rx))
}

/// Translation (dx, dy, dz, 0) that shifts a rotated secondary-sensor
/// point into the ego sensor's local frame.
///
/// `height_diff` is the secondary mounting height minus the ego mounting
/// height; it enters the vertical component together with the pose delta.
pub fn translation_vector(ego: &Pose, other: &Pose, height_diff: f64) -> Result<[f64; 4]> {
    translation_vector_with(TranslationFormula::RightHanded, ego, other, height_diff)
}

/// [`translation_vector`] with an explicit formula choice.
pub fn translation_vector_with(
    formula: TranslationFormula,
    ego: &Pose,
    other: &Pose,
    height_diff: f64,
) -> Result<[f64; 4]> {
    if !height_diff.is_finite() {
        return Err(Error::invalid("height_diff must be finite"));
    }
    let dx_w = other.x - ego.x;
    let dy_w = other.y - ego.y;
    let dz_w = other.z - ego.z;
    let (s, c) = (-ego.yaw).sin_cos();
    let (dx, dy) = match formula {
        // Frame rotation of the world delta by -yaw_ego.
        TranslationFormula::RightHanded => (dx_w * c - dy_w * s, dx_w * s + dy_w * c),
        // Same expression with the lateral axis mirrored, matching
        // left-handed source conventions.
        TranslationFormula::LeftHandedCompat => (dx_w * c + dy_w * s, -(dx_w * -s + dy_w * c)),
    };
    Ok([dx, dy, dz_w + height_diff, 0.0])
}

/// A rotation plus translation pair in homogeneous form.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Transform4 {
    pub rotation: Mat4,
    pub translation: [f64; 4],
}

impl Transform4 {
    pub const IDENTITY: Transform4 = Transform4 {
        rotation: Mat4::IDENTITY,
        translation: [0.0; 4],
    };

    /// Transform that carries points from `other`'s local frame into
    /// `ego`'s local frame.
    pub fn between(
        formula: TranslationFormula,
        ego: &Pose,
        ego_mount: f64,
        other: &Pose,
        other_mount: f64,
    ) -> Transform4 {
        let rotation = rotation_matrix(
            wrap_angle(other.yaw - ego.yaw),
            wrap_angle(other.pitch - ego.pitch),
            wrap_angle(other.roll - ego.roll),
        )
        .expect("pose angles are finite");
        let translation =
            translation_vector_with(formula, ego, other, other_mount - ego_mount)
                .expect("pose fields are finite");
        Transform4 {
            rotation,
            translation,
        }
    }

    /// Rotate a point in homogeneous form and add the translation.
    pub fn apply(&self, p: [f64; 3]) -> [f64; 3] {
        let r = self.rotation.apply_point(p);
        [
            r[0] + self.translation[0],
            r[1] + self.translation[1],
            r[2] + self.translation[2],
        ]
    }

    /// Whether the rotation block is orthonormal with determinant +1 and
    /// the homogeneous layout is intact.
    pub fn is_rigid(&self, tol: f64) -> bool {
        let m = &self.rotation.0;
        let layout_ok = m[3] == [0.0, 0.0, 0.0, 1.0]
            && m[0][3] == 0.0
            && m[1][3] == 0.0
            && m[2][3] == 0.0
            && self.translation[3] == 0.0;
        layout_ok
            && self.rotation.orthonormality_error() <= tol
            && (self.rotation.rotation_determinant() - 1.0).abs() <= tol
    }
}

/// Merge secondary sensor clouds into the ego sensor's local frame.
///
/// The output starts with the ego points unchanged; every other cloud is
/// appended after rotating each point in homogeneous form and adding the
/// translation. The merged count is always the sum of the input counts.
pub fn merge_clouds(ego: &SensorFrame, others: &[SensorFrame]) -> PointCloud {
    merge_clouds_with(TranslationFormula::RightHanded, ego, others)
}

/// [`merge_clouds`] with an explicit translation formula.
pub fn merge_clouds_with(
    formula: TranslationFormula,
    ego: &SensorFrame,
    others: &[SensorFrame],
) -> PointCloud {
    let mut out = ego.cloud.clone();
    let extra: usize = others.iter().map(|f| f.cloud.len()).sum();
    out.points.reserve(extra);
    for frame in others {
        let t = Transform4::between(
            formula,
            &ego.pose,
            ego.mount_height,
            &frame.pose,
            frame.mount_height,
        );
        for p in &frame.cloud.points {
            let q = t.apply(p.xyz());
            out.points.push(Point::new(q[0], q[1], q[2], p.intensity));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cloud_from(frame: &str, pts: &[[f64; 3]]) -> PointCloud {
        let mut c = PointCloud::new(frame).unwrap();
        c.points
            .extend(pts.iter().map(|p| Point::new(p[0], p[1], p[2], 1.0)));
        c
    }

    fn assert_close(a: [f64; 3], b: [f64; 3], tol: f64) {
        for i in 0..3 {
            assert!(
                (a[i] - b[i]).abs() <= tol,
                "component {i}: {a:?} vs {b:?}"
            );
        }
    }

    #[test]
    fn wrap_angle_half_open_interval() {
        assert_eq!(wrap_angle(0.0), 0.0);
        assert_eq!(wrap_angle(std::f64::consts::PI), std::f64::consts::PI);
        // -pi maps to +pi: the interval is (-pi, pi].
        assert_eq!(wrap_angle(-std::f64::consts::PI), std::f64::consts::PI);
        assert!((wrap_angle(3.0 * std::f64::consts::PI) - std::f64::consts::PI).abs() < 1e-12);
        assert!((wrap_angle(-0.1) + 0.1).abs() < 1e-15);
    }

    #[test]
    fn zero_rotation_is_identity() {
        let r = rotation_matrix(0.0, 0.0, 0.0).unwrap();
        assert_eq!(r, Mat4::IDENTITY);
    }

    #[test]
    fn quarter_turn_about_z() {
        let r = rotation_matrix(std::f64::consts::FRAC_PI_2, 0.0, 0.0).unwrap();
        let p = r.apply_point([1.0, 0.0, 0.0]);
        assert_close(p, [0.0, 1.0, 0.0], 1e-15);
    }

    #[test]
    fn rotation_matches_elementwise_composition() {
        // Compose the three elementary matrices independently and compare.
        let (yaw, pitch, roll) = (0.3, -0.2, 0.1);
        let r = rotation_matrix(yaw, pitch, roll).unwrap();

        let rz = |a: f64, p: [f64; 3]| [a.cos() * p[0] - a.sin() * p[1], a.sin() * p[0] + a.cos() * p[1], p[2]];
        let ry = |a: f64, p: [f64; 3]| [a.cos() * p[0] + a.sin() * p[2], p[1], -a.sin() * p[0] + a.cos() * p[2]];
        let rx = |a: f64, p: [f64; 3]| [p[0], a.cos() * p[1] - a.sin() * p[2], a.sin() * p[1] + a.cos() * p[2]];

        for p in [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.2, -1.3, 0.7]] {
            let expect = rz(yaw, ry(pitch, rx(roll, p)));
            assert_close(r.apply_point(p), expect, 1e-12);
        }
        assert!(r.orthonormality_error() < 1e-12);
        assert!((r.rotation_determinant() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn rotation_rejects_non_finite() {
        assert!(rotation_matrix(f64::NAN, 0.0, 0.0).is_err());
        assert!(rotation_matrix(0.0, f64::INFINITY, 0.0).is_err());
    }

    #[test]
    fn translation_identical_poses() {
        let p = Pose::new(3.0, -2.0, 0.5, 1.2, 0.0, 0.0).unwrap();
        assert_eq!(translation_vector(&p, &p, 0.0).unwrap(), [0.0; 4]);
    }

    #[test]
    fn translation_zero_yaw() {
        let ego = Pose::level(0.0, 0.0, 0.0).unwrap();
        let other = Pose::level(10.0, 0.0, 0.0).unwrap();
        for f in [
            TranslationFormula::RightHanded,
            TranslationFormula::LeftHandedCompat,
        ] {
            let t = translation_vector_with(f, &ego, &other, 0.6).unwrap();
            assert_eq!(t, [10.0, 0.0, 0.6, 0.0]);
        }
    }

    #[test]
    fn translation_quarter_turn_hand_evaluated() {
        // yaw_ego = pi/2, delta = (10, 0): both variants reduce to
        // (0, -10) because the lateral delta is zero.
        let ego = Pose::level(0.0, 0.0, std::f64::consts::FRAC_PI_2).unwrap();
        let other = Pose::level(10.0, 0.0, std::f64::consts::FRAC_PI_2).unwrap();
        for f in [
            TranslationFormula::RightHanded,
            TranslationFormula::LeftHandedCompat,
        ] {
            let t = translation_vector_with(f, &ego, &other, 0.0).unwrap();
            assert!((t[0] - 0.0).abs() < 1e-12, "{t:?}");
            assert!((t[1] + 10.0).abs() < 1e-12, "{t:?}");
        }
    }

    #[test]
    fn translation_variants_differ_on_lateral_delta() {
        let ego = Pose::level(0.0, 0.0, 0.0).unwrap();
        let other = Pose::level(0.0, 5.0, 0.0).unwrap();
        let rh = translation_vector(&ego, &other, 0.0).unwrap();
        let lh = translation_vector_with(
            TranslationFormula::LeftHandedCompat,
            &ego,
            &other,
            0.0,
        )
        .unwrap();
        assert_eq!(rh, [0.0, 5.0, 0.0, 0.0]);
        assert_eq!(lh, [0.0, -5.0, 0.0, 0.0]);
    }

    #[test]
    fn merge_no_others_returns_ego_unchanged() {
        let pose = Pose::level(1.0, 2.0, 0.3).unwrap();
        let frame = SensorFrame::new(pose, 2.4, cloud_from("s0", &[[1.0, 2.0, 3.0]])).unwrap();
        let merged = merge_clouds(&frame, &[]);
        assert_eq!(merged, frame.cloud);
    }

    #[test]
    fn merge_identity_pose_appends_unchanged() {
        let pose = Pose::level(4.0, -1.0, 0.7).unwrap();
        let ego = SensorFrame::new(pose, 3.0, cloud_from("a", &[[0.0, 0.0, 0.0]])).unwrap();
        let other =
            SensorFrame::new(pose, 3.0, cloud_from("b", &[[5.0, 6.0, 7.0], [1.0, 1.0, 1.0]]))
                .unwrap();
        let merged = merge_clouds(&ego, &[other.clone()]);
        assert_eq!(merged.len(), 3);
        assert_eq!(merged.frame_id, "a");
        for (got, want) in merged.points[1..].iter().zip(&other.cloud.points) {
            assert_close(got.xyz(), want.xyz(), 1e-9);
            assert_eq!(got.intensity, want.intensity);
        }
    }

    /// Two sensors observing the same global landmark must agree after
    /// merging into the ego frame. This pins the sign conventions of the
    /// translation; the left-handed variant fails it whenever the ego yaw
    /// and the lateral delta are both nonzero.
    #[test]
    fn merge_landmark_round_trip() {
        let landmark = [12.0, -7.0, 1.3];
        let ego_pose = Pose::level(3.0, 4.0, 0.8).unwrap();
        let other_pose = Pose::new(-6.0, 9.0, 0.2, -2.1, 0.15, -0.4).unwrap();
        let (ego_h, other_h) = (3.0, 2.4);

        let ego_local = ego_pose.world_to_local(ego_h, landmark);
        let other_local = other_pose.world_to_local(other_h, landmark);

        let ego = SensorFrame::new(ego_pose, ego_h, cloud_from("ego", &[ego_local])).unwrap();
        let other =
            SensorFrame::new(other_pose, other_h, cloud_from("oth", &[other_local])).unwrap();

        let merged = merge_clouds(&ego, &[other.clone()]);
        assert_close(merged.points[1].xyz(), merged.points[0].xyz(), 1e-6);

        let compat = merge_clouds_with(TranslationFormula::LeftHandedCompat, &ego, &[other]);
        let d: f64 = compat.points[1]
            .xyz()
            .iter()
            .zip(merged.points[0].xyz())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        assert!(d > 1.0, "left-handed variant should miss here, off by {d}");
    }

    #[test]
    fn transform_is_rigid() {
        let ego = Pose::level(0.0, 0.0, 1.1).unwrap();
        let other = Pose::new(5.0, 5.0, 0.0, -0.6, 0.2, 0.05).unwrap();
        let t = Transform4::between(TranslationFormula::RightHanded, &ego, 3.0, &other, 2.4);
        assert!(t.is_rigid(1e-12));
        assert_eq!(t.translation[3], 0.0);
    }

    #[test]
    fn pose_angle_normalization() {
        let p = Pose::new(0.0, 0.0, 0.0, 7.0, -7.0, 0.0).unwrap();
        assert!(p.yaw > -std::f64::consts::PI && p.yaw <= std::f64::consts::PI);
        assert!(p.pitch > -std::f64::consts::PI && p.pitch <= std::f64::consts::PI);
        assert!(Pose::new(f64::NAN, 0.0, 0.0, 0.0, 0.0, 0.0).is_err());
    }

    #[test]
    fn local_world_round_trip() {
        let pose = Pose::new(2.0, -3.0, 0.4, 1.9, -0.3, 0.7).unwrap();
        let p = [4.0, 5.0, -6.0];
        let back = pose.world_to_local(2.4, pose.local_to_world(2.4, p));
        assert_close(back, p, 1e-12);
    }
}
