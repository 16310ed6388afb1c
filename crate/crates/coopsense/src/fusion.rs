//! Decision-level merging of detections.
//!
//! Detections made in a sensor-local frame are moved to the global frame,
//! duplicates from overlapping sensors are removed, everything off the
//! road polygon is discarded, and the rest is matched to the nearest lane
//! centerline with a signed stop-bar distance. The resulting observation
//! records are the only input the signal controller sees.
//!
//! Duplicate removal follows a nearest-first greedy rule: detections are
//! visited by increasing distance from the intersection center and a
//! detection survives only if every already-kept detection is at least
//! the threshold away. For a conflicting pair this deletes the one
//! farther from the intersection; for larger conflict sets it yields a
//! single survivor per clique, deterministically.

use crate::detection::{Aabb, Detection};
use crate::error::{Error, Result};
use crate::geometry::Pose;
use crate::traffic::{LaneId, RoadNetwork};

/// A fused, lane-mapped vehicle observation in the global frame.
#[derive(Debug, Clone, PartialEq)]
pub struct FusedVehicleObservation {
    pub x: f64,
    pub y: f64,
    pub lane: LaneId,
    /// Positive upstream of the stop bar, negative downstream.
    pub distance_to_stop_bar: f64,
    pub sources: Vec<String>,
}

impl FusedVehicleObservation {
    /// Text record: `frame lane dist_to_bar x y`.
    pub fn to_record(&self, frame: u64, network: &RoadNetwork) -> String {
        format!(
            "{} {} {:.4} {:.4} {:.4}",
            frame,
            network.lane(self.lane).name,
            self.distance_to_stop_bar,
            self.x,
            self.y
        )
    }

    pub fn parse_record(
        line: &str,
        lineno: usize,
        network: &RoadNetwork,
    ) -> Result<(u64, FusedVehicleObservation)> {
        let fields: Vec<&str> = line.split_ascii_whitespace().collect();
        if fields.len() != 5 {
            return Err(Error::parse(lineno, "fused record needs 5 fields"));
        }
        let frame: u64 = fields[0]
            .parse()
            .map_err(|e| Error::parse(lineno, format!("bad frame: {e}")))?;
        let lane = network
            .lanes
            .iter()
            .find(|l| l.name == fields[1])
            .ok_or_else(|| Error::parse(lineno, format!("unknown lane {}", fields[1])))?
            .id;
        let mut nums = [0.0f64; 3];
        for (i, n) in nums.iter_mut().enumerate() {
            *n = fields[2 + i]
                .parse()
                .map_err(|e| Error::parse(lineno, format!("bad number: {e}")))?;
        }
        Ok((
            frame,
            FusedVehicleObservation {
                x: nums[1],
                y: nums[2],
                lane,
                distance_to_stop_bar: nums[0],
                sources: Vec::new(),
            },
        ))
    }
}

/// Re-express detections in the global frame.
///
/// Each box is rebuilt as the axis-aligned hull of its eight transformed
/// corners, so a detection made in a yawed sensor frame keeps the correct
/// global footprint. The center maps exactly to the transformed center.
pub fn to_global(detections: &[Detection], sensor_pose: &Pose, mount_height: f64) -> Vec<Detection> {
    detections
        .iter()
        .map(|d| {
            let lo = d.aabb.min();
            let hi = d.aabb.max();
            let mut min = [f64::INFINITY; 3];
            let mut max = [f64::NEG_INFINITY; 3];
            for corner in 0..8 {
                let p = [
                    if corner & 1 == 0 { lo[0] } else { hi[0] },
                    if corner & 2 == 0 { lo[1] } else { hi[1] },
                    if corner & 4 == 0 { lo[2] } else { hi[2] },
                ];
                let g = sensor_pose.local_to_world(mount_height, p);
                for a in 0..3 {
                    min[a] = min[a].min(g[a]);
                    max[a] = max[a].max(g[a]);
                }
            }
            Detection {
                aabb: Aabb::from_min_max(min, max),
                score: d.score,
                sources: d.sources.clone(),
                frame_id: "global".to_string(),
            }
        })
        .collect()
}

/// Remove duplicate detections of the same vehicle.
///
/// Survivors are pairwise at least `threshold` apart (2D center
/// distance); of any conflicting pair the one farther from
/// `intersection_center` is deleted. Sensor provenance of deleted
/// duplicates is folded into the survivor.
pub fn dedupe(
    detections: &[Detection],
    threshold: f64,
    intersection_center: [f64; 2],
) -> Vec<Detection> {
    let mut order: Vec<usize> = (0..detections.len()).collect();
    let dist = |i: usize| {
        let c = detections[i].aabb.center;
        (c[0] - intersection_center[0]).hypot(c[1] - intersection_center[1])
    };
    order.sort_by(|&a, &b| {
        dist(a)
            .partial_cmp(&dist(b))
            .expect("finite centers")
            .then(a.cmp(&b))
    });
    let mut kept: Vec<Detection> = Vec::new();
    for i in order {
        let c = detections[i].aabb.center;
        let conflict = kept.iter_mut().find(|k| {
            let kc = k.aabb.center;
            (kc[0] - c[0]).hypot(kc[1] - c[1]) < threshold
        });
        match conflict {
            Some(survivor) => {
                for s in &detections[i].sources {
                    if !survivor.sources.contains(s) {
                        survivor.sources.push(s.clone());
                    }
                }
            }
            None => kept.push(detections[i].clone()),
        }
    }
    kept
}

/// Keep detections whose 2D center lies inside the polygon (boundary
/// counts as inside).
pub fn geofence(detections: &[Detection], polygon: &[[f64; 2]]) -> Vec<Detection> {
    detections
        .iter()
        .filter(|d| point_in_polygon([d.aabb.center[0], d.aabb.center[1]], polygon))
        .cloned()
        .collect()
}

/// Point-in-polygon with boundary points counted inside.
pub fn point_in_polygon(p: [f64; 2], polygon: &[[f64; 2]]) -> bool {
    let n = polygon.len();
    if n < 3 {
        return false;
    }
    for i in 0..n {
        if on_segment(p, polygon[i], polygon[(i + 1) % n]) {
            return true;
        }
    }
    let mut inside = false;
    for i in 0..n {
        let a = polygon[i];
        let b = polygon[(i + 1) % n];
        if (a[1] > p[1]) != (b[1] > p[1]) {
            let x_cross = a[0] + (p[1] - a[1]) * (b[0] - a[0]) / (b[1] - a[1]);
            if p[0] < x_cross {
                inside = !inside;
            }
        }
    }
    inside
}

fn on_segment(p: [f64; 2], a: [f64; 2], b: [f64; 2]) -> bool {
    let cross = (b[0] - a[0]) * (p[1] - a[1]) - (b[1] - a[1]) * (p[0] - a[0]);
    if cross.abs() > 1e-9 {
        return false;
    }
    let within = |v: f64, lo: f64, hi: f64| v >= lo.min(hi) - 1e-12 && v <= lo.max(hi) + 1e-12;
    within(p[0], a[0], b[0]) && within(p[1], a[1], b[1])
}

/// Map detections to the nearest lane centerline with a signed stop-bar
/// distance. Detections farther than one lane width from every
/// centerline are dropped; equidistant cases go to the lower-indexed
/// lane.
pub fn lane_map(detections: &[Detection], network: &RoadNetwork) -> Vec<FusedVehicleObservation> {
    let mut out = Vec::with_capacity(detections.len());
    for d in detections {
        let p = [d.aabb.center[0], d.aabb.center[1]];
        let mut best: Option<(LaneId, f64, f64)> = None; // lane, lateral dist, bar dist
        for lane in &network.lanes {
            let (s, lateral) = lane.line.project(p);
            let better = match &best {
                None => true,
                Some((_, bd, _)) => lateral < *bd,
            };
            if better {
                best = Some((lane.id, lateral, lane.stop_bar_s - s));
            }
        }
        if let Some((lane, lateral, bar)) = best {
            if lateral <= network.lane_width {
                out.push(FusedVehicleObservation {
                    x: p[0],
                    y: p[1],
                    lane,
                    distance_to_stop_bar: bar,
                    sources: d.sources.clone(),
                });
            }
        }
    }
    out
}
