//! Synthetic LiDAR frames by ray casting against boxes and the ground.
//!
//! Rays are generated on a regular (channel x azimuth) grid in the
//! sensor's local frame; each ray reports the nearest intersection with
//! any scene box or the ground plane within range. Returns are expressed
//! in the sensor-local frame, so a return at parameter `t` along a ray is
//! simply `t` times the local ray direction.
//!
//! Box hits carry intensity 1.0 and ground hits 0.3, a synthetic
//! reflectance split so downstream consumers exercise the intensity
//! field. There is no noise by default; Gaussian range noise can be
//! applied on top for robustness experiments.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::geometry::{Point, PointCloud, Pose, SensorFrame};

/// Beam-pattern and mounting description of one LiDAR.
#[derive(Debug, Clone)]
pub struct LidarSpec {
    pub channels: usize,
    /// Vertical field of view, degrees, min < max.
    pub vertical_fov_deg: (f64, f64),
    pub azimuth_step_deg: f64,
    pub max_range: f64,
    pub mount: Pose,
    pub mount_height: f64,
    /// Std-dev of optional Gaussian range noise, meters. Only used by
    /// [`cast_frame_with_noise`].
    pub range_noise_sigma: f64,
}

impl LidarSpec {
    /// A 64-channel unit with a [-25, +5] degree fan, 0.4 degree azimuth
    /// resolution and 100 m range.
    pub fn default_64(mount: Pose, mount_height: f64) -> Result<LidarSpec> {
        LidarSpec::new(64, (-25.0, 5.0), 0.4, 100.0, mount, mount_height)
    }

    pub fn new(
        channels: usize,
        vertical_fov_deg: (f64, f64),
        azimuth_step_deg: f64,
        max_range: f64,
        mount: Pose,
        mount_height: f64,
    ) -> Result<LidarSpec> {
        if channels < 1 {
            return Err(Error::invalid("lidar channels must be >= 1"));
        }
        if !(vertical_fov_deg.0 < vertical_fov_deg.1) {
            return Err(Error::invalid("vertical_fov min must be < max"));
        }
        if !(azimuth_step_deg > 0.0 && azimuth_step_deg <= 360.0) {
            return Err(Error::invalid("azimuth_step must be in (0, 360]"));
        }
        if !(max_range > 0.0) {
            return Err(Error::invalid("max_range must be > 0"));
        }
        if !(mount_height > 0.0) {
            return Err(Error::invalid("mount_height must be > 0"));
        }
        Ok(LidarSpec {
            channels,
            vertical_fov_deg,
            azimuth_step_deg,
            max_range,
            mount,
            mount_height,
            range_noise_sigma: 0.0,
        })
    }

    /// Channel elevations in radians, evenly spaced across the fov.
    pub fn elevations(&self) -> Vec<f64> {
        let (lo, hi) = (
            self.vertical_fov_deg.0.to_radians(),
            self.vertical_fov_deg.1.to_radians(),
        );
        if self.channels == 1 {
            return vec![0.5 * (lo + hi)];
        }
        let step = (hi - lo) / (self.channels - 1) as f64;
        (0..self.channels).map(|i| lo + step * i as f64).collect()
    }

    /// Number of azimuth columns in one revolution.
    pub fn azimuth_count(&self) -> usize {
        ((360.0 / self.azimuth_step_deg).floor() as usize).max(1)
    }
}

/// Whether a scene box is a vehicle (ground truth) or static clutter.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BoxKind {
    Vehicle,
    Clutter,
}

/// An oriented box standing in the scene.
#[derive(Debug, Clone, Copy)]
pub struct ObstacleBox {
    pub id: u64,
    pub kind: BoxKind,
    /// Box center in the global frame.
    pub center: [f64; 3],
    pub length: f64,
    pub width: f64,
    pub height: f64,
    /// Heading of the length axis, radians.
    pub yaw: f64,
}

impl ObstacleBox {
    pub fn new(
        id: u64,
        kind: BoxKind,
        center: [f64; 3],
        length: f64,
        width: f64,
        height: f64,
        yaw: f64,
    ) -> ObstacleBox {
        debug_assert!(length > 0.0 && width > 0.0 && height > 0.0);
        ObstacleBox {
            id,
            kind,
            center,
            length,
            width,
            height,
            yaw,
        }
    }

    /// Corners of the box footprint, counter-clockwise.
    pub fn footprint(&self) -> [[f64; 2]; 4] {
        let (s, c) = self.yaw.sin_cos();
        let (hl, hw) = (self.length / 2.0, self.width / 2.0);
        let mut out = [[0.0; 2]; 4];
        for (i, (dx, dy)) in [(hl, hw), (-hl, hw), (-hl, -hw), (hl, -hw)]
            .into_iter()
            .enumerate()
        {
            out[i] = [
                self.center[0] + c * dx - s * dy,
                self.center[1] + s * dx + c * dy,
            ];
        }
        out
    }
}

/// World geometry visible to a sensor at one instant.
#[derive(Debug, Clone, Default)]
pub struct SceneSnapshot {
    pub boxes: Vec<ObstacleBox>,
    pub ground_z: f64,
}

impl SceneSnapshot {
    pub fn new(boxes: Vec<ObstacleBox>, ground_z: f64) -> SceneSnapshot {
        SceneSnapshot { boxes, ground_z }
    }
}

/// Surface a ray terminated on.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Surface {
    Ground,
    Box(u64),
}

/// One LiDAR return with provenance, in the sensor-local frame.
#[derive(Debug, Clone, Copy)]
pub struct RayHit {
    pub channel: usize,
    pub azimuth_index: usize,
    pub range: f64,
    pub point: [f64; 3],
    pub surface: Surface,
}

/// Cast all rays and return every hit with surface attribution.
///
/// Iteration is channel-major then azimuth, so output order and content
/// are bit-identical for identical inputs.
pub fn cast_rays(spec: &LidarSpec, scene: &SceneSnapshot) -> Vec<RayHit> {
    let origin = spec.mount.sensor_origin(spec.mount_height);
    let rot = spec.mount.rotation();
    let n_az = spec.azimuth_count();
    let az_step = (spec.azimuth_step_deg).to_radians();

    // Per-column candidate boxes: a box only needs testing on azimuth
    // columns its bounding circle covers.
    let mut candidates: Vec<Vec<u32>> = vec![Vec::new(); n_az];
    let mut locals: Vec<BoxLocal> = Vec::with_capacity(scene.boxes.len());
    for (bi, b) in scene.boxes.iter().enumerate() {
        let local = BoxLocal::new(bi, b, &spec.mount, spec.mount_height);
        let r = 0.5 * (b.length.hypot(b.width)).hypot(b.height);
        let d = (local.center_local[0].powi(2)
            + local.center_local[1].powi(2)
            + local.center_local[2].powi(2))
        .sqrt();
        if d - r > spec.max_range {
            continue;
        }
        let d_xy = local.center_local[0].hypot(local.center_local[1]);
        let az_c = local.center_local[1].atan2(local.center_local[0]);
        let idx = locals.len() as u32;
        locals.push(local);
        if d_xy <= r {
            // Sensor inside the box's horizontal bounding circle: every
            // column is a candidate.
            for cols in candidates.iter_mut() {
                cols.push(idx);
            }
            continue;
        }
        let half = (r / d_xy).asin();
        let lo = ((az_c - half).rem_euclid(std::f64::consts::TAU) / az_step).floor() as isize;
        let hi = ((az_c + half).rem_euclid(std::f64::consts::TAU) / az_step).ceil() as isize;
        let span = if hi >= lo {
            hi - lo
        } else {
            hi + n_az as isize - lo
        };
        for k in 0..=span {
            let col = (lo + k).rem_euclid(n_az as isize) as usize;
            candidates[col].push(idx);
        }
    }

    let elevations = spec.elevations();
    let mut hits = Vec::new();
    for (ch, &el) in elevations.iter().enumerate() {
        let (se, ce) = el.sin_cos();
        for col in 0..n_az {
            let az = az_step * col as f64;
            let (sa, ca) = az.sin_cos();
            let dir_local = [ce * ca, ce * sa, se];
            let dir_world = rot.apply_point(dir_local);
            // rotation() is homogeneous; the direction must not pick up
            // the translation-free origin column, and it does not: the
            // rotation block is the upper-left 3x3 with zero last column.
            let mut best_t = f64::INFINITY;
            let mut best_surface = Surface::Ground;
            if dir_world[2].abs() > 1e-12 {
                let t = (scene.ground_z - origin[2]) / dir_world[2];
                if t > 0.0 && t <= spec.max_range {
                    best_t = t;
                    best_surface = Surface::Ground;
                }
            }
            for &bi in &candidates[col] {
                let local = &locals[bi as usize];
                if let Some(t) = local.intersect(origin, dir_world) {
                    if t <= spec.max_range && t < best_t {
                        best_t = t;
                        best_surface = Surface::Box(scene.boxes[local.scene_index].id);
                    }
                }
            }
            if best_t.is_finite() {
                hits.push(RayHit {
                    channel: ch,
                    azimuth_index: col,
                    range: best_t,
                    point: [
                        dir_local[0] * best_t,
                        dir_local[1] * best_t,
                        dir_local[2] * best_t,
                    ],
                    surface: best_surface,
                });
            }
        }
    }
    hits
}

/// Cast a full frame and package it as a [`SensorFrame`].
///
/// `frame_id` names the sensor-local coordinate frame of the output.
pub fn cast_frame(spec: &LidarSpec, scene: &SceneSnapshot, frame_id: &str) -> SensorFrame {
    let hits = cast_rays(spec, scene);
    frame_from_hits(spec, frame_id, &hits, None)
}

/// Like [`cast_frame`], with Gaussian range noise drawn from `rng` when
/// `spec.range_noise_sigma > 0`.
pub fn cast_frame_with_noise(
    spec: &LidarSpec,
    scene: &SceneSnapshot,
    frame_id: &str,
    rng: &mut impl Rng,
) -> SensorFrame {
    let hits = cast_rays(spec, scene);
    if spec.range_noise_sigma > 0.0 {
        let normal = Normal::new(0.0, spec.range_noise_sigma).expect("sigma checked positive");
        frame_from_hits(spec, frame_id, &hits, Some((&normal, rng)))
    } else {
        frame_from_hits(spec, frame_id, &hits, None)
    }
}

fn frame_from_hits(
    spec: &LidarSpec,
    frame_id: &str,
    hits: &[RayHit],
    mut noise: Option<(&Normal<f64>, &mut dyn rand::RngCore)>,
) -> SensorFrame {
    let mut cloud = PointCloud::new(frame_id).expect("frame ids are nonempty");
    cloud.points.reserve(hits.len());
    for h in hits {
        let intensity = match h.surface {
            Surface::Box(_) => 1.0,
            Surface::Ground => 0.3,
        };
        let p = match noise.as_mut() {
            Some((normal, rng)) => {
                let scale = (h.range + normal.sample(rng)).max(0.01) / h.range;
                [h.point[0] * scale, h.point[1] * scale, h.point[2] * scale]
            }
            None => h.point,
        };
        cloud.points.push(Point::new(p[0], p[1], p[2], intensity));
    }
    SensorFrame::new(spec.mount, spec.mount_height, cloud).expect("spec mount height checked")
}

/// Scene box expressed in its own yaw-aligned frame for slab tests.
struct BoxLocal {
    scene_index: usize,
    center: [f64; 3],
    half: [f64; 3],
    sin_yaw: f64,
    cos_yaw: f64,
    center_local: [f64; 3],
}

impl BoxLocal {
    fn new(scene_index: usize, b: &ObstacleBox, mount: &Pose, mount_height: f64) -> BoxLocal {
        let (s, c) = b.yaw.sin_cos();
        BoxLocal {
            scene_index,
            center: b.center,
            half: [b.length / 2.0, b.width / 2.0, b.height / 2.0],
            sin_yaw: s,
            cos_yaw: c,
            center_local: mount.world_to_local(mount_height, b.center),
        }
    }

    /// Nearest positive entry parameter of the ray into the box, if any.
    fn intersect(&self, origin: [f64; 3], dir: [f64; 3]) -> Option<f64> {
        // Rotate into the box frame: p' = Rz(-yaw) (p - center).
        let ox = origin[0] - self.center[0];
        let oy = origin[1] - self.center[1];
        let oz = origin[2] - self.center[2];
        let (s, c) = (self.sin_yaw, self.cos_yaw);
        let o = [c * ox + s * oy, -s * ox + c * oy, oz];
        let d = [
            c * dir[0] + s * dir[1],
            -s * dir[0] + c * dir[1],
            dir[2],
        ];
        let mut t_enter = 0.0f64;
        let mut t_exit = f64::INFINITY;
        for axis in 0..3 {
            if d[axis].abs() < 1e-15 {
                if o[axis].abs() > self.half[axis] {
                    return None;
                }
                continue;
            }
            let inv = 1.0 / d[axis];
            let t0 = (-self.half[axis] - o[axis]) * inv;
            let t1 = (self.half[axis] - o[axis]) * inv;
            let (lo, hi) = if t0 < t1 { (t0, t1) } else { (t1, t0) };
            t_enter = t_enter.max(lo);
            t_exit = t_exit.min(hi);
            if t_enter > t_exit {
                return None;
            }
        }
        // Rays starting inside a box see no entry face.
        if t_enter > 0.0 {
            Some(t_enter)
        } else {
            None
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn level_spec(
        channels: usize,
        fov: (f64, f64),
        az_step: f64,
        range: f64,
        height: f64,
    ) -> LidarSpec {
        LidarSpec::new(
            channels,
            fov,
            az_step,
            range,
            Pose::level(0.0, 0.0, 0.0).unwrap(),
            height,
        )
        .unwrap()
    }

    #[test]
    fn plumb_line_return() {
        // One downward channel, one azimuth column, no boxes: a single
        // return straight below the sensor.
        let spec = level_spec(2, (-90.0, 0.0), 360.0, 50.0, 3.0);
        let scene = SceneSnapshot::new(vec![], 0.0);
        let frame = cast_frame(&spec, &scene, "s");
        assert_eq!(frame.cloud.len(), 1);
        let p = frame.cloud.points[0];
        assert!((p.x).abs() < 1e-9 && (p.y).abs() < 1e-9);
        assert!((p.z + 3.0).abs() < 1e-9, "z = {}", p.z);
        assert_eq!(p.intensity, 0.3);
    }

    #[test]
    fn boresight_box_range() {
        // Box centered 10 m ahead, 4 m long: the level boresight ray
        // returns at exactly 10 - 4/2 = 8 m.
        let spec = level_spec(3, (-1.0, 1.0), 360.0, 100.0, 1.0);
        let b = ObstacleBox::new(7, BoxKind::Vehicle, [10.0, 0.0, 1.0], 4.0, 2.0, 2.0, 0.0);
        let scene = SceneSnapshot::new(vec![b], 0.0);
        let hits = cast_rays(&spec, &scene);
        let level_hit = hits
            .iter()
            .find(|h| h.channel == 1 && h.azimuth_index == 0)
            .expect("boresight ray must hit");
        assert_eq!(level_hit.surface, Surface::Box(7));
        assert!((level_hit.range - 8.0).abs() < 1e-9, "{}", level_hit.range);
    }

    #[test]
    fn occluded_box_yields_no_returns() {
        let spec = level_spec(8, (-10.0, 10.0), 1.0, 100.0, 1.0);
        let near = ObstacleBox::new(1, BoxKind::Vehicle, [10.0, 0.0, 1.0], 4.0, 3.0, 2.0, 0.0);
        // Identical box directly behind the first, same lateral extent.
        let far = ObstacleBox::new(2, BoxKind::Vehicle, [20.0, 0.0, 1.0], 4.0, 3.0, 2.0, 0.0);
        let scene = SceneSnapshot::new(vec![near, far], 0.0);
        let hits = cast_rays(&spec, &scene);
        assert!(hits.iter().any(|h| h.surface == Surface::Box(1)));
        assert!(
            hits.iter().all(|h| h.surface != Surface::Box(2)),
            "far box must be fully occluded"
        );
    }

    #[test]
    fn range_bound_holds() {
        let spec = level_spec(16, (-25.0, 5.0), 2.0, 30.0, 2.4);
        let b = ObstacleBox::new(1, BoxKind::Vehicle, [50.0, 0.0, 0.75], 4.4, 1.7, 1.5, 0.0);
        let scene = SceneSnapshot::new(vec![b], 0.0);
        for h in cast_rays(&spec, &scene) {
            assert!(h.range <= 30.0 + 1e-12);
            assert_ne!(h.surface, Surface::Box(1), "box is out of range");
        }
    }

    #[test]
    fn frame_correctness_recovers_global_surface() {
        let mount = Pose::level(5.0, -3.0, 1.1).unwrap();
        let spec = LidarSpec::new(16, (-20.0, 5.0), 3.0, 80.0, mount, 2.4).unwrap();
        let b = ObstacleBox::new(3, BoxKind::Vehicle, [15.0, 2.0, 0.75], 4.4, 1.7, 1.5, 0.6);
        let scene = SceneSnapshot::new(vec![b], 0.0);
        for h in cast_rays(&spec, &scene) {
            let g = mount.local_to_world(2.4, h.point);
            match h.surface {
                Surface::Ground => assert!(g[2].abs() < 1e-6, "ground hit at z={}", g[2]),
                Surface::Box(_) => {
                    // Back in the box frame, the point must lie on the
                    // box surface.
                    let (s, c) = b.yaw.sin_cos();
                    let dx = g[0] - b.center[0];
                    let dy = g[1] - b.center[1];
                    let local = [c * dx + s * dy, -s * dx + c * dy, g[2] - b.center[2]];
                    let half = [2.2, 0.85, 0.75];
                    let mut on_face = false;
                    for axis in 0..3 {
                        assert!(local[axis].abs() <= half[axis] + 1e-6);
                        if (local[axis].abs() - half[axis]).abs() < 1e-6 {
                            on_face = true;
                        }
                    }
                    assert!(on_face, "box hit not on a face: {local:?}");
                }
            }
        }
    }

    #[test]
    fn nearest_hit_matches_brute_force() {
        // Independent oracle: test every box on every ray, no pruning.
        fn naive_box_t(b: &ObstacleBox, origin: [f64; 3], dir: [f64; 3]) -> Option<f64> {
            let (s, c) = b.yaw.sin_cos();
            let o = [
                c * (origin[0] - b.center[0]) + s * (origin[1] - b.center[1]),
                -s * (origin[0] - b.center[0]) + c * (origin[1] - b.center[1]),
                origin[2] - b.center[2],
            ];
            let d = [c * dir[0] + s * dir[1], -s * dir[0] + c * dir[1], dir[2]];
            let half = [b.length / 2.0, b.width / 2.0, b.height / 2.0];
            let (mut lo, mut hi) = (f64::NEG_INFINITY, f64::INFINITY);
            for a in 0..3 {
                if d[a].abs() < 1e-15 {
                    if o[a].abs() > half[a] {
                        return None;
                    }
                    continue;
                }
                let (t0, t1) = ((-half[a] - o[a]) / d[a], (half[a] - o[a]) / d[a]);
                lo = lo.max(t0.min(t1));
                hi = hi.min(t0.max(t1));
            }
            (lo <= hi && lo > 0.0).then_some(lo)
        }

        let mount = Pose::level(1.0, 1.0, 0.3).unwrap();
        let spec = LidarSpec::new(12, (-25.0, 5.0), 5.0, 60.0, mount, 2.4).unwrap();
        let boxes = vec![
            ObstacleBox::new(1, BoxKind::Vehicle, [12.0, 0.0, 0.75], 4.4, 1.7, 1.5, 0.2),
            ObstacleBox::new(2, BoxKind::Vehicle, [18.0, 1.0, 0.75], 4.4, 1.7, 1.5, -0.4),
            ObstacleBox::new(3, BoxKind::Clutter, [8.0, -6.0, 0.9], 2.0, 1.0, 1.8, 1.0),
            ObstacleBox::new(4, BoxKind::Clutter, [-15.0, 4.0, 1.2], 6.0, 0.5, 2.4, 0.0),
        ];
        let scene = SceneSnapshot::new(boxes.clone(), 0.0);
        let hits = cast_rays(&spec, &scene);

        let origin = mount.sensor_origin(2.4);
        let rot = mount.rotation();
        let mut by_ray = std::collections::HashMap::new();
        for h in &hits {
            by_ray.insert((h.channel, h.azimuth_index), h);
        }
        for (ch, &el) in spec.elevations().iter().enumerate() {
            for col in 0..spec.azimuth_count() {
                let az = spec.azimuth_step_deg.to_radians() * col as f64;
                let dl = [el.cos() * az.cos(), el.cos() * az.sin(), el.sin()];
                let dw = rot.apply_point(dl);
                let mut best: Option<(f64, Surface)> = None;
                if dw[2].abs() > 1e-12 {
                    let t = -origin[2] / dw[2];
                    if t > 0.0 && t <= 60.0 {
                        best = Some((t, Surface::Ground));
                    }
                }
                for b in &boxes {
                    if let Some(t) = naive_box_t(b, origin, dw) {
                        if t <= 60.0 && best.map_or(true, |(bt, _)| t < bt) {
                            best = Some((t, Surface::Box(b.id)));
                        }
                    }
                }
                match (best, by_ray.get(&(ch, col))) {
                    (None, None) => {}
                    (Some((t, surf)), Some(h)) => {
                        assert!((t - h.range).abs() < 1e-9);
                        assert_eq!(surf, h.surface);
                    }
                    (a, b) => panic!("ray ({ch},{col}): oracle {a:?} vs cast {b:?}"),
                }
            }
        }
    }

    #[test]
    fn identical_inputs_give_bit_identical_frames() {
        let spec = level_spec(32, (-25.0, 5.0), 1.0, 100.0, 3.0);
        let scene = SceneSnapshot::new(
            vec![ObstacleBox::new(
                9,
                BoxKind::Vehicle,
                [20.0, 5.0, 0.75],
                4.4,
                1.7,
                1.5,
                0.3,
            )],
            0.0,
        );
        let a = cast_frame(&spec, &scene, "s");
        let b = cast_frame(&spec, &scene, "s");
        assert_eq!(a.cloud, b.cloud);
    }

    #[test]
    fn empty_scene_yields_ground_only() {
        let spec = level_spec(8, (-25.0, 5.0), 10.0, 100.0, 3.0);
        let frame = cast_frame(&spec, &SceneSnapshot::new(vec![], 0.0), "s");
        assert!(!frame.cloud.is_empty());
        assert!(frame.cloud.points.iter().all(|p| p.intensity == 0.3));
    }

    #[test]
    fn range_noise_perturbs_along_ray() {
        use rand::SeedableRng;
        let mut spec = level_spec(2, (-90.0, 0.0), 360.0, 50.0, 3.0);
        spec.range_noise_sigma = 0.5;
        let scene = SceneSnapshot::new(vec![], 0.0);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let frame = cast_frame_with_noise(&spec, &scene, "s", &mut rng);
        let p = frame.cloud.points[0];
        // Still on the straight-down ray, range shifted.
        assert!(p.x.abs() < 1e-9 && p.y.abs() < 1e-9);
        assert!((p.z + 3.0).abs() > 1e-6, "noise should move the return");
    }
}
