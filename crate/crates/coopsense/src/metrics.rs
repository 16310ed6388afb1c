//! Detection-quality and application-level evaluation.
//!
//! Detection quality follows the KITTI-style recipe: greedy score-ordered
//! matching at an IoU threshold (bird's-eye view or full 3D), a
//! precision-recall curve over the pooled ranking, and the 40-point
//! interpolated average precision. Application-level measures are the
//! equivalent CV penetration rate (fraction of control-region vehicles
//! truly observed) and the average vehicle delay against free flow.

use crate::detection::{Aabb, Detection};
use crate::fusion::FusedVehicleObservation;
use crate::lidar::ObstacleBox;
use crate::traffic::{ExitRecord, World};

/// Evaluation projection.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum View {
    Bev,
    ThreeD,
}

/// Ground-truth vehicles an observation may claim within this center
/// distance, meters (half a car length).
pub const ECVPR_MATCH_RADIUS: f64 = 2.5;

/// Axis-aligned hull of an oriented box; ground-truth boxes enter the
/// evaluation in this form.
pub fn axis_aligned_hull(b: &ObstacleBox) -> Aabb {
    let (s, c) = b.yaw.sin_cos();
    let half_x = (b.length / 2.0 * c).abs() + (b.width / 2.0 * s).abs();
    let half_y = (b.length / 2.0 * s).abs() + (b.width / 2.0 * c).abs();
    Aabb {
        center: b.center,
        extents: [2.0 * half_x, 2.0 * half_y, b.height],
    }
}

/// Intersection over union of two axis-aligned boxes.
pub fn iou(a: &Aabb, b: &Aabb, view: View) -> f64 {
    let amin = a.min();
    let amax = a.max();
    let bmin = b.min();
    let bmax = b.max();
    let axes: &[usize] = match view {
        View::Bev => &[0, 1],
        View::ThreeD => &[0, 1, 2],
    };
    let mut inter = 1.0;
    let mut vol_a = 1.0;
    let mut vol_b = 1.0;
    for &ax in axes {
        inter *= (amax[ax].min(bmax[ax]) - amin[ax].max(bmin[ax])).max(0.0);
        vol_a *= amax[ax] - amin[ax];
        vol_b *= bmax[ax] - bmin[ax];
    }
    let union = vol_a + vol_b - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Outcome of matching one frame's predictions against ground truth.
#[derive(Debug, Clone)]
pub struct MatchResult {
    pub tp: usize,
    pub fp: usize,
    pub fn_count: usize,
    /// True-positive flag per prediction, in input order.
    pub pred_is_tp: Vec<bool>,
}

/// Greedy matching: predictions in descending score order each take the
/// unmatched ground truth of highest IoU, provided it reaches the
/// threshold.
pub fn match_detections(
    preds: &[Detection],
    gts: &[Aabb],
    iou_threshold: f64,
    view: View,
) -> MatchResult {
    let order = rank_by_score(preds);
    let mut gt_taken = vec![false; gts.len()];
    let mut pred_is_tp = vec![false; preds.len()];
    for &pi in &order {
        let mut best: Option<(usize, f64)> = None;
        for (gi, gt) in gts.iter().enumerate() {
            if gt_taken[gi] {
                continue;
            }
            let v = iou(&preds[pi].aabb, gt, view);
            if v >= iou_threshold && best.map_or(true, |(_, bv)| v > bv) {
                best = Some((gi, v));
            }
        }
        if let Some((gi, _)) = best {
            gt_taken[gi] = true;
            pred_is_tp[pi] = true;
        }
    }
    let tp = pred_is_tp.iter().filter(|&&b| b).count();
    MatchResult {
        tp,
        fp: preds.len() - tp,
        fn_count: gts.len() - tp,
        pred_is_tp,
    }
}

/// Indices of `preds` in descending score order (stable on ties).
fn rank_by_score(preds: &[Detection]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..preds.len()).collect();
    order.sort_by(|&a, &b| preds[b].score.cmp(&preds[a].score).then(a.cmp(&b)));
    order
}

/// One point of a precision-recall curve.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PrPoint {
    pub recall: f64,
    pub precision: f64,
}

/// Precision-recall points along a ranked true-positive flag sequence.
pub fn pr_curve(ranked_tp: &[bool], num_gt: usize) -> Vec<PrPoint> {
    if num_gt == 0 {
        return Vec::new();
    }
    let mut out = Vec::with_capacity(ranked_tp.len());
    let mut tp = 0usize;
    for (k, &is_tp) in ranked_tp.iter().enumerate() {
        if is_tp {
            tp += 1;
        }
        out.push(PrPoint {
            recall: tp as f64 / num_gt as f64,
            precision: tp as f64 / (k + 1) as f64,
        });
    }
    out
}

/// 40-point interpolated average precision, reported as a percentage.
///
/// For each recall level r in {1/40, ..., 40/40} the interpolated
/// precision is the maximum precision at any recall >= r (zero when the
/// curve never reaches r).
pub fn ap40(prs: &[PrPoint]) -> f64 {
    let mut sum = 0.0;
    for level in 1..=40 {
        let r = level as f64 / 40.0;
        let mut best = 0.0f64;
        for p in prs {
            if p.recall >= r && p.precision > best {
                best = p.precision;
            }
        }
        sum += best;
    }
    sum / 40.0 * 100.0
}

/// Predictions and ground-truth boxes of one evaluation frame.
#[derive(Debug, Clone, Default)]
pub struct EvalFrame {
    pub preds: Vec<Detection>,
    pub gts: Vec<Aabb>,
}

/// AP40 over a sequence of frames: matching is per frame, the ranking
/// and the precision-recall sweep pool all predictions.
pub fn ap40_over_frames(frames: &[EvalFrame], iou_threshold: f64, view: View) -> f64 {
    let mut pool: Vec<(usize, usize, usize, bool)> = Vec::new(); // score, frame, idx, tp
    let mut num_gt = 0usize;
    for (fi, frame) in frames.iter().enumerate() {
        num_gt += frame.gts.len();
        let result = match_detections(&frame.preds, &frame.gts, iou_threshold, view);
        for (pi, pred) in frame.preds.iter().enumerate() {
            pool.push((pred.score, fi, pi, result.pred_is_tp[pi]));
        }
    }
    if num_gt == 0 {
        return 0.0;
    }
    pool.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let ranked: Vec<bool> = pool.iter().map(|e| e.3).collect();
    ap40(&pr_curve(&ranked, num_gt))
}

/// A ground-truth vehicle inside the control region at one frame.
#[derive(Debug, Clone, Copy)]
pub struct RegionVehicle {
    pub id: u64,
    pub center: [f64; 2],
}

/// Vehicles currently within the pressure-calculation region
/// (`upstream` meters before their stop bar to `downstream` meters
/// past it).
pub fn region_vehicles(world: &World, upstream: f64, downstream: f64) -> Vec<RegionVehicle> {
    world
        .vehicles
        .iter()
        .filter(|v| {
            let d = world.vehicle_distance_to_bar(v);
            d <= upstream && d >= -downstream
        })
        .map(|v| RegionVehicle {
            id: v.id,
            center: world.vehicle_center(v),
        })
        .collect()
}

/// Equivalent CV penetration rate for one frame: the fraction of
/// region vehicles with a fused observation within
/// [`ECVPR_MATCH_RADIUS`]. False positives never contribute. `None`
/// when the region is empty.
pub fn e_cvpr_frame(
    observations: &[FusedVehicleObservation],
    region: &[RegionVehicle],
) -> Option<f64> {
    if region.is_empty() {
        return None;
    }
    let detected = region
        .iter()
        .filter(|gt| {
            observations.iter().any(|o| {
                (o.x - gt.center[0]).hypot(o.y - gt.center[1]) <= ECVPR_MATCH_RADIUS
            })
        })
        .count();
    Some(detected as f64 / region.len() as f64)
}

/// Equivalent CV penetration rate against the live world state.
pub fn e_cvpr(
    observations: &[FusedVehicleObservation],
    world: &World,
    upstream: f64,
    downstream: f64,
) -> Option<f64> {
    e_cvpr_frame(observations, &region_vehicles(world, upstream, downstream))
}

/// Mean delay over exited vehicles; `None` when nothing exited.
pub fn avg_delay(exits: &[ExitRecord]) -> Option<f64> {
    if exits.is_empty() {
        return None;
    }
    Some(exits.iter().map(|e| e.delay()).sum::<f64>() / exits.len() as f64)
}

/// Mean and (population) standard deviation.
pub fn mean_std(values: &[f64]) -> Option<(f64, f64)> {
    if values.is_empty() {
        return None;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    Some((mean, var.sqrt()))
}
