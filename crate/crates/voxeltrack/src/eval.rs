//! Tracking evaluation: rotated-box 3D IoU, one-pass success/precision
//! metrics, and a latency-aware streaming simulator that replays a
//! sequence through a single worker which always grabs the newest
//! arrived frame and drops the ones it skipped.

use std::sync::Arc;
use std::time::Instant;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geom::{rotated_rect_corners, Box3D, GridSpec};
use crate::nn::graph::Model;
use crate::pillars::{PillarConfig, PointCloud};
use crate::tracker::{Tracker, TrackerConfig};

/// Relative slack (in periods) when comparing simulated timestamps, so
/// exact ties like "finishes just as a frame arrives" are not decided by
/// floating-point rounding.
const TIE_EPS_REL: f64 = 1e-9;

fn shoelace_area(pts: &[[f64; 2]]) -> f64 {
    if pts.len() < 3 {
        return 0.0;
    }
    let mut s = 0.0;
    for i in 0..pts.len() {
        let a = pts[i];
        let b = pts[(i + 1) % pts.len()];
        s += a[0] * b[1] - b[0] * a[1];
    }
    0.5 * s.abs()
}

/// Signed side of `p` relative to the directed edge `e1 -> e2`
/// (positive = left, i.e. inside a counter-clockwise polygon).
fn edge_side(e1: [f64; 2], e2: [f64; 2], p: [f64; 2]) -> f64 {
    (e2[0] - e1[0]) * (p[1] - e1[1]) - (e2[1] - e1[1]) * (p[0] - e1[0])
}

fn line_intersect(a: [f64; 2], b: [f64; 2], e1: [f64; 2], e2: [f64; 2]) -> [f64; 2] {
    let d1 = [b[0] - a[0], b[1] - a[1]];
    let d2 = [e2[0] - e1[0], e2[1] - e1[1]];
    let denom = d1[0] * d2[1] - d1[1] * d2[0];
    if denom == 0.0 {
        // Parallel within rounding; the segment grazes the edge.
        return a;
    }
    let t = ((e1[0] - a[0]) * d2[1] - (e1[1] - a[1]) * d2[0]) / denom;
    [a[0] + t * d1[0], a[1] + t * d1[1]]
}

/// Clips a polygon by each edge of a convex counter-clockwise polygon.
/// Points exactly on an edge count as inside, so clipping a polygon by
/// itself returns the identical vertex list.
fn clip_polygon(subject: &[[f64; 2]], clip: &[[f64; 2]]) -> Vec<[f64; 2]> {
    let mut out: Vec<[f64; 2]> = subject.to_vec();
    for k in 0..clip.len() {
        let e1 = clip[k];
        let e2 = clip[(k + 1) % clip.len()];
        let input = std::mem::take(&mut out);
        if input.is_empty() {
            return input;
        }
        for i in 0..input.len() {
            let cur = input[i];
            let prev = input[(i + input.len() - 1) % input.len()];
            let side_cur = edge_side(e1, e2, cur);
            let side_prev = edge_side(e1, e2, prev);
            if side_cur >= 0.0 {
                if side_prev < 0.0 {
                    out.push(line_intersect(prev, cur, e1, e2));
                }
                out.push(cur);
            } else if side_prev >= 0.0 {
                out.push(line_intersect(prev, cur, e1, e2));
            }
        }
    }
    out
}

fn check_box(b: &Box3D, which: &str) -> Result<()> {
    if !(b.w > 0.0 && b.h > 0.0 && b.d > 0.0) {
        return Err(Error::config(format!(
            "{which} box has non-positive dimensions {} x {} x {}",
            b.w, b.h, b.d
        )));
    }
    let vals = [b.x, b.y, b.z, b.w, b.h, b.d, b.alpha];
    if vals.iter().any(|v| !v.is_finite()) {
        return Err(Error::config(format!("{which} box has non-finite fields")));
    }
    Ok(())
}

/// Intersection-over-union of two yaw-rotated boxes: exact bird-eye
/// polygon overlap times vertical overlap. Every area and height goes
/// through the same computation (shoelace, min/max of extents), so two
/// identical boxes score exactly 1.0.
pub fn iou3d(a: &Box3D, b: &Box3D) -> Result<f64> {
    check_box(a, "first")?;
    check_box(b, "second")?;
    let ca = rotated_rect_corners(a.x, a.y, a.w, a.h, a.alpha);
    let cb = rotated_rect_corners(b.x, b.y, b.w, b.h, b.alpha);
    let area_a = shoelace_area(&ca);
    let area_b = shoelace_area(&cb);
    let inter_area = shoelace_area(&clip_polygon(&ca, &cb));
    let (a_lo, a_hi) = (a.z - a.d / 2.0, a.z + a.d / 2.0);
    let (b_lo, b_hi) = (b.z - b.d / 2.0, b.z + b.d / 2.0);
    let overlap = (a_hi.min(b_hi) - a_lo.max(b_lo)).max(0.0);
    let inter = inter_area * overlap;
    let union = area_a * (a_hi - a_lo) + area_b * (b_hi - b_lo) - inter;
    Ok(if union > 0.0 { inter / union } else { 0.0 })
}

pub fn center_distance(a: &Box3D, b: &Box3D) -> f64 {
    let dx = a.x - b.x;
    let dy = a.y - b.y;
    let dz = a.z - b.z;
    (dx * dx + dy * dy + dz * dz).sqrt()
}

pub const SUCCESS_STEPS: usize = 100;
pub const PRECISION_STEPS: usize = 100;
pub const PRECISION_MAX_DIST: f64 = 2.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OpeMetrics {
    /// Area under the overlap curve (fraction of frames with IoU at
    /// least t, t in [0, 1]), times 100.
    pub success: f64,
    /// Area under the distance curve (fraction of frames with center
    /// error at most t meters, t in [0, 2]), normalized to [0, 100].
    pub precision: f64,
    pub frames: usize,
}

/// Fraction of frames whose IoU clears each threshold 0.00, 0.01, .. 1.00.
pub fn success_curve(ious: &[f64]) -> Vec<(f64, f64)> {
    (0..=SUCCESS_STEPS)
        .map(|i| {
            let t = i as f64 / SUCCESS_STEPS as f64;
            let frac = ious.iter().filter(|&&v| v >= t).count() as f64 / ious.len() as f64;
            (t, frac)
        })
        .collect()
}

/// Fraction of frames whose center error stays under each threshold
/// 0.00, 0.02, .. 2.00 meters.
pub fn precision_curve(dists: &[f64]) -> Vec<(f64, f64)> {
    (0..=PRECISION_STEPS)
        .map(|i| {
            let t = PRECISION_MAX_DIST * i as f64 / PRECISION_STEPS as f64;
            let frac = dists.iter().filter(|&&v| v <= t).count() as f64 / dists.len() as f64;
            (t, frac)
        })
        .collect()
}

fn trapezoid_auc(curve: &[(f64, f64)]) -> f64 {
    curve
        .windows(2)
        .map(|w| (w[1].0 - w[0].0) * (w[0].1 + w[1].1) / 2.0)
        .sum()
}

/// One-pass metrics over (prediction, ground truth) pairs.
pub fn ope_metrics(pairs: &[(Box3D, Box3D)]) -> Result<OpeMetrics> {
    if pairs.is_empty() {
        return Err(Error::config("cannot evaluate zero frames"));
    }
    let mut ious = Vec::with_capacity(pairs.len());
    let mut dists = Vec::with_capacity(pairs.len());
    for (pred, gt) in pairs {
        ious.push(iou3d(pred, gt)?);
        dists.push(center_distance(pred, gt));
    }
    Ok(OpeMetrics {
        success: trapezoid_auc(&success_curve(&ious)) * 100.0,
        precision: trapezoid_auc(&precision_curve(&dists)) / PRECISION_MAX_DIST * 100.0,
        frames: pairs.len(),
    })
}

/// Deterministic stand-in for per-frame processing cost, seconds.
#[derive(Debug, Clone)]
pub enum LatencyModel {
    Constant(f64),
    /// Cycles when the sequence is longer than the list.
    PerFrame(Vec<f64>),
}

impl LatencyModel {
    pub fn validate(&self) -> Result<()> {
        let all = match self {
            LatencyModel::Constant(l) => std::slice::from_ref(l),
            LatencyModel::PerFrame(v) => {
                if v.is_empty() {
                    return Err(Error::config("per-frame latency list is empty"));
                }
                v.as_slice()
            }
        };
        if all.iter().any(|l| !l.is_finite() || *l < 0.0) {
            return Err(Error::config("latencies must be finite and non-negative"));
        }
        Ok(())
    }

    pub fn latency(&self, frame: usize) -> f64 {
        match self {
            LatencyModel::Constant(l) => *l,
            LatencyModel::PerFrame(v) => v[frame % v.len()],
        }
    }
}

#[derive(Debug, Clone)]
pub enum FrameOutcome {
    Processed {
        start: f64,
        finish: f64,
        prediction: Box3D,
    },
    /// A newer frame was picked while this one waited.
    Dropped,
}

#[derive(Debug, Clone)]
pub struct StreamResult {
    pub rate: f64,
    /// Outcome per frame; index 0 is the init frame, always processed at
    /// time zero for free.
    pub outcomes: Vec<FrameOutcome>,
    /// Dropped frames as a percentage of all frames after the init one.
    pub drop_percent: f64,
    /// Frames actually processed, init excluded.
    pub processed_frames: usize,
    /// Total seconds the worker spent processing, init excluded.
    pub processing_time: f64,
}

impl StreamResult {
    pub fn fps(&self) -> f64 {
        if self.processed_frames == 0 {
            0.0
        } else if self.processing_time > 0.0 {
            self.processed_frames as f64 / self.processing_time
        } else {
            f64::INFINITY
        }
    }

    /// For each frame, the newest processed frame whose result was ready
    /// by that frame's deadline: arrival time in predictive mode, the
    /// next arrival in non-predictive mode. Falls back to the init frame,
    /// which is always ready at time zero.
    pub fn associations(&self, predictive: bool) -> Vec<usize> {
        let period = 1.0 / self.rate;
        let eps = period * TIE_EPS_REL;
        let ready: Vec<(f64, usize)> = self
            .outcomes
            .iter()
            .enumerate()
            .filter_map(|(j, o)| match o {
                FrameOutcome::Processed { finish, .. } => Some((*finish, j)),
                FrameOutcome::Dropped => None,
            })
            .collect();
        (0..self.outcomes.len())
            .map(|i| {
                let deadline = if predictive {
                    i as f64 * period
                } else {
                    (i + 1) as f64 * period
                };
                ready
                    .iter()
                    .filter(|&&(finish, j)| j <= i && finish <= deadline + eps)
                    .map(|&(_, j)| j)
                    .max()
                    .unwrap_or(0)
            })
            .collect()
    }

    /// Prediction each frame is scored against under the given mode.
    pub fn associated_predictions(&self, predictive: bool) -> Vec<Box3D> {
        self.associations(predictive)
            .into_iter()
            .map(|j| match &self.outcomes[j] {
                FrameOutcome::Processed { prediction, .. } => *prediction,
                FrameOutcome::Dropped => unreachable!("associations only return processed frames"),
            })
            .collect()
    }
}

/// Replays `n_frames` arriving at `rate` Hz through a single worker.
/// `process(i)` runs the tracker on frame `i` and reports (prediction,
/// seconds it took). Frame 0 is the init frame: processed instantly with
/// `init` as its prediction. Whenever the worker frees up it takes the
/// newest arrived frame and marks the skipped ones dropped; the guard of
/// a few nano-periods makes "arrives exactly when the worker frees"
/// count as arrived.
pub fn simulate_stream(
    n_frames: usize,
    rate: f64,
    init: Box3D,
    mut process: impl FnMut(usize) -> Result<(Box3D, f64)>,
) -> Result<StreamResult> {
    if n_frames == 0 {
        return Err(Error::config("cannot stream zero frames"));
    }
    if !(rate > 0.0) || !rate.is_finite() {
        return Err(Error::config(format!("frame rate must be positive, got {rate}")));
    }
    let period = 1.0 / rate;
    let eps = period * TIE_EPS_REL;
    let arrival = |i: usize| i as f64 * period;
    let mut outcomes = vec![FrameOutcome::Dropped; n_frames];
    outcomes[0] = FrameOutcome::Processed {
        start: 0.0,
        finish: 0.0,
        prediction: init,
    };
    let mut free_at = 0.0f64;
    let mut processed = 0usize;
    let mut busy = 0.0f64;
    let mut candidate = 1usize;
    while candidate < n_frames {
        let now = free_at.max(arrival(candidate));
        let mut newest = candidate;
        while newest + 1 < n_frames && arrival(newest + 1) <= now + eps {
            newest += 1;
        }
        let start = now.max(arrival(newest));
        let (prediction, took) = process(newest)?;
        if !(took >= 0.0) || !took.is_finite() {
            return Err(Error::Runtime(format!(
                "frame {newest} reported invalid processing time {took}"
            )));
        }
        let finish = start + took;
        outcomes[newest] = FrameOutcome::Processed {
            start,
            finish,
            prediction,
        };
        processed += 1;
        busy += took;
        free_at = finish;
        candidate = newest + 1;
    }
    let droppable = n_frames.saturating_sub(1);
    let dropped = droppable - processed;
    Ok(StreamResult {
        rate,
        outcomes,
        drop_percent: if droppable > 0 {
            dropped as f64 / droppable as f64 * 100.0
        } else {
            0.0
        },
        processed_frames: processed,
        processing_time: busy,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EvalMode {
    /// Every frame processed, latency ignored.
    Offline,
    /// Results must exist when the frame arrives.
    RealtimePredictive,
    /// Results may land any time before the next frame arrives.
    RealtimeNonpredictive,
}

impl EvalMode {
    pub fn name(&self) -> &'static str {
        match self {
            EvalMode::Offline => "offline",
            EvalMode::RealtimePredictive => "realtime-predictive",
            EvalMode::RealtimeNonpredictive => "realtime-nonpredictive",
        }
    }
}

#[derive(Debug, Clone)]
pub struct SequenceEval {
    /// The box each frame was scored with.
    pub predictions: Vec<Box3D>,
    pub metrics: OpeMetrics,
    pub drop_percent: f64,
    pub processed_frames: usize,
    pub processing_time: f64,
}

impl SequenceEval {
    pub fn fps(&self) -> f64 {
        if self.processed_frames == 0 {
            0.0
        } else if self.processing_time > 0.0 {
            self.processed_frames as f64 / self.processing_time
        } else {
            f64::INFINITY
        }
    }
}

/// Scores one sequence under a mode. `gt[0]` doubles as the init box;
/// `process(i)` must return frame `i`'s prediction plus its cost.
pub fn evaluate_sequence(
    gt: &[Box3D],
    rate: f64,
    mode: EvalMode,
    mut process: impl FnMut(usize) -> Result<(Box3D, f64)>,
) -> Result<SequenceEval> {
    if gt.is_empty() {
        return Err(Error::config("sequence has no ground-truth boxes"));
    }
    let (predictions, drop_percent, processed, busy) = match mode {
        EvalMode::Offline => {
            let mut preds = vec![gt[0]];
            let mut busy = 0.0;
            for i in 1..gt.len() {
                let (p, took) = process(i)?;
                preds.push(p);
                busy += took;
            }
            (preds, 0.0, gt.len() - 1, busy)
        }
        EvalMode::RealtimePredictive | EvalMode::RealtimeNonpredictive => {
            let res = simulate_stream(gt.len(), rate, gt[0], process)?;
            let predictive = mode == EvalMode::RealtimePredictive;
            (
                res.associated_predictions(predictive),
                res.drop_percent,
                res.processed_frames,
                res.processing_time,
            )
        }
    };
    let pairs: Vec<(Box3D, Box3D)> = predictions.iter().copied().zip(gt.iter().copied()).collect();
    Ok(SequenceEval {
        predictions,
        metrics: ope_metrics(&pairs)?,
        drop_percent,
        processed_frames: processed,
        processing_time: busy,
    })
}

/// Processor that answers with the ground truth of whatever frame it is
/// given, charging the model latency: isolates the scheduling and
/// association cost from tracking quality.
pub fn gt_echo<'a>(
    gt: &'a [Box3D],
    latency: &'a LatencyModel,
) -> impl FnMut(usize) -> Result<(Box3D, f64)> + 'a {
    move |i| {
        let b = gt
            .get(i)
            .ok_or_else(|| Error::Runtime(format!("no ground truth for frame {i}")))?;
        Ok((*b, latency.latency(i)))
    }
}

/// One evaluation sequence: per-frame clouds and ground-truth boxes.
#[derive(Debug, Clone)]
pub struct EvalSequence {
    pub name: String,
    pub clouds: Vec<Arc<PointCloud>>,
    pub gt: Vec<Box3D>,
}

#[derive(Debug, Clone)]
pub struct DatasetEval {
    /// Metrics pooled over every frame of every scored sequence.
    pub overall: OpeMetrics,
    pub sequences: Vec<(String, SequenceEval)>,
    /// Sequences that failed, with the error text; the rest still count.
    pub failures: Vec<(String, String)>,
    pub drop_percent: f64,
    pub processed_frames: usize,
    pub processing_time: f64,
}

impl DatasetEval {
    pub fn fps(&self) -> f64 {
        if self.processed_frames == 0 {
            0.0
        } else if self.processing_time > 0.0 {
            self.processed_frames as f64 / self.processing_time
        } else {
            f64::INFINITY
        }
    }
}

/// Runs a live tracker over one sequence under the given mode. In
/// realtime modes the tracker only sees the frames the scheduler picks,
/// so its internal state evolves exactly as it would on a device.
/// `latency` substitutes deterministic per-frame costs; `None` charges
/// measured wall time.
pub fn evaluate_tracked_sequence(
    tracker: &Tracker,
    seq: &EvalSequence,
    rate: f64,
    mode: EvalMode,
    latency: Option<&LatencyModel>,
) -> Result<SequenceEval> {
    if seq.clouds.len() != seq.gt.len() {
        return Err(Error::config(format!(
            "sequence `{}` has {} clouds but {} boxes",
            seq.name,
            seq.clouds.len(),
            seq.gt.len()
        )));
    }
    if seq.gt.is_empty() {
        return Err(Error::config(format!("sequence `{}` is empty", seq.name)));
    }
    let mut state = tracker.init(&seq.clouds[0], &seq.gt[0])?;
    evaluate_sequence(&seq.gt, rate, mode, |i| {
        let t0 = Instant::now();
        let out = tracker.step(&mut state, &seq.clouds[i])?;
        let took = match latency {
            Some(m) => m.latency(i),
            None => t0.elapsed().as_secs_f64(),
        };
        Ok((out.predicted, took))
    })
}

/// Evaluates every sequence in parallel and pools the per-frame results.
/// A sequence that errors is reported in `failures` without sinking the
/// rest; only a fully failed dataset is an error.
#[allow(clippy::too_many_arguments)]
pub fn evaluate_dataset(
    model: &Model,
    grid: &GridSpec,
    pillar_cfg: &PillarConfig,
    tracker_cfg: &TrackerConfig,
    data: &[EvalSequence],
    rate: f64,
    mode: EvalMode,
    latency: Option<&LatencyModel>,
) -> Result<DatasetEval> {
    if data.is_empty() {
        return Err(Error::config("no sequences to evaluate"));
    }
    let runs: Vec<(String, Result<SequenceEval>)> = data
        .par_iter()
        .map(|seq| {
            let run = Tracker::new(model, grid.clone(), pillar_cfg.clone(), tracker_cfg.clone())
                .and_then(|t| evaluate_tracked_sequence(&t, seq, rate, mode, latency));
            (seq.name.clone(), run)
        })
        .collect();
    pool_runs(data, runs)
}

/// Scores every sequence with the ground-truth echo processor instead of
/// a model: the prediction for any processed frame is that frame's own
/// ground truth, charged the injected latency. Isolates scheduling,
/// association and drop behavior from tracking quality.
pub fn evaluate_gt_echo_dataset(
    data: &[EvalSequence],
    rate: f64,
    mode: EvalMode,
    latency: &LatencyModel,
) -> Result<DatasetEval> {
    if data.is_empty() {
        return Err(Error::config("no sequences to evaluate"));
    }
    latency.validate()?;
    let runs: Vec<(String, Result<SequenceEval>)> = data
        .iter()
        .map(|seq| {
            let run = evaluate_sequence(&seq.gt, rate, mode, gt_echo(&seq.gt, latency));
            (seq.name.clone(), run)
        })
        .collect();
    pool_runs(data, runs)
}

/// Pools per-sequence runs into dataset totals: metrics over every frame
/// of every scored sequence, drop averaged per sequence, times summed.
fn pool_runs(
    data: &[EvalSequence],
    runs: Vec<(String, Result<SequenceEval>)>,
) -> Result<DatasetEval> {
    let mut sequences = Vec::new();
    let mut failures = Vec::new();
    let mut pairs = Vec::new();
    let mut drop_sum = 0.0;
    let mut processed = 0usize;
    let mut busy = 0.0;
    for (i, (name, run)) in runs.into_iter().enumerate() {
        match run {
            Ok(ev) => {
                pairs.extend(ev.predictions.iter().copied().zip(data[i].gt.iter().copied()));
                drop_sum += ev.drop_percent;
                processed += ev.processed_frames;
                busy += ev.processing_time;
                sequences.push((name, ev));
            }
            Err(e) => failures.push((name, e.to_string())),
        }
    }
    if sequences.is_empty() {
        let (name, err) = &failures[0];
        return Err(Error::Runtime(format!(
            "all {} sequences failed; first: `{name}`: {err}",
            failures.len()
        )));
    }
    Ok(DatasetEval {
        overall: ope_metrics(&pairs)?,
        drop_percent: drop_sum / sequences.len() as f64,
        processed_frames: processed,
        processing_time: busy,
        sequences,
        failures,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_box(rng: &mut ChaCha8Rng) -> Box3D {
        Box3D::new(
            rng.gen_range(-5.0..5.0),
            rng.gen_range(-5.0..5.0),
            rng.gen_range(-1.0..1.0),
            rng.gen_range(0.5..4.0),
            rng.gen_range(0.5..4.0),
            rng.gen_range(0.5..3.0),
            rng.gen_range(-3.0..3.0),
        )
    }

    #[test]
    fn identical_boxes_score_exactly_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..50 {
            let b = random_box(&mut rng);
            assert_eq!(iou3d(&b, &b).unwrap(), 1.0);
        }
    }

    #[test]
    fn known_axis_aligned_overlaps() {
        let a = Box3D::new(0.0, 0.0, 0.0, 2.0, 2.0, 2.0, 0.0);
        // Shifted by half a side: overlap 1x2x2 = 4, union 12.
        let b = Box3D::new(1.0, 0.0, 0.0, 2.0, 2.0, 2.0, 0.0);
        assert!((iou3d(&a, &b).unwrap() - 1.0 / 3.0).abs() < 1e-12);
        // Vertical shift by half the height: same 1/3 by symmetry.
        let c = Box3D::new(0.0, 0.0, 1.0, 2.0, 2.0, 2.0, 0.0);
        assert!((iou3d(&a, &c).unwrap() - 1.0 / 3.0).abs() < 1e-12);
        // Disjoint and edge-touching.
        let far = Box3D::new(10.0, 0.0, 0.0, 2.0, 2.0, 2.0, 0.0);
        assert_eq!(iou3d(&a, &far).unwrap(), 0.0);
        let touch = Box3D::new(2.0, 0.0, 0.0, 2.0, 2.0, 2.0, 0.0);
        assert_eq!(iou3d(&a, &touch).unwrap(), 0.0);
    }

    #[test]
    fn known_rotated_overlap() {
        // 4x2 footprint crossed with itself rotated 90 degrees: the
        // intersection is the central 2x2 square.
        let a = Box3D::new(0.0, 0.0, 0.0, 4.0, 2.0, 2.0, 0.0);
        let b = Box3D::new(0.0, 0.0, 0.0, 4.0, 2.0, 2.0, std::f64::consts::FRAC_PI_2);
        // vols 16 each, inter 8, union 24.
        assert!((iou3d(&a, &b).unwrap() - 8.0 / 24.0).abs() < 1e-9);
        // A square is rotation-invariant at 90 degrees.
        let s = Box3D::new(1.0, -2.0, 0.5, 3.0, 3.0, 1.0, 0.2);
        let s90 = Box3D::new(1.0, -2.0, 0.5, 3.0, 3.0, 1.0, 0.2 + std::f64::consts::FRAC_PI_2);
        assert!((iou3d(&s, &s90).unwrap() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn contained_box_scores_volume_ratio() {
        let outer = Box3D::new(0.0, 0.0, 0.0, 4.0, 4.0, 4.0, 0.3);
        let inner = Box3D::new(0.2, -0.1, 0.0, 1.0, 2.0, 2.0, 1.1);
        let want = inner.volume() / outer.volume();
        assert!((iou3d(&outer, &inner).unwrap() - want).abs() < 1e-12);
    }

    #[test]
    fn iou_rejects_degenerate_boxes() {
        let good = Box3D::new(0.0, 0.0, 0.0, 1.0, 1.0, 1.0, 0.0);
        let flat = Box3D::new(0.0, 0.0, 0.0, 1.0, 0.0, 1.0, 0.0);
        assert!(iou3d(&good, &flat).is_err());
        assert!(iou3d(&flat, &good).is_err());
        let nan = Box3D::new(f64::NAN, 0.0, 0.0, 1.0, 1.0, 1.0, 0.0);
        assert!(iou3d(&good, &nan).is_err());
    }

    #[test]
    fn monte_carlo_agrees_on_random_pairs() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for case in 0..6 {
            let a = random_box(&mut rng);
            // Nudge b near a so intersections actually happen.
            let b = Box3D::new(
                a.x + rng.gen_range(-1.0..1.0),
                a.y + rng.gen_range(-1.0..1.0),
                a.z + rng.gen_range(-0.5..0.5),
                rng.gen_range(0.5..4.0),
                rng.gen_range(0.5..4.0),
                rng.gen_range(0.5..3.0),
                rng.gen_range(-3.0..3.0),
            );
            let analytic = iou3d(&a, &b).unwrap();
            let inside = |bx: &Box3D, p: [f64; 3]| {
                let q = crate::geom::rotate_about([p[0], p[1]], [bx.x, bx.y], -bx.alpha);
                (q[0] - bx.x).abs() <= bx.w / 2.0
                    && (q[1] - bx.y).abs() <= bx.h / 2.0
                    && (p[2] - bx.z).abs() <= bx.d / 2.0
            };
            let r = 4.0f64;
            let (cx, cy, cz) = ((a.x + b.x) / 2.0, (a.y + b.y) / 2.0, (a.z + b.z) / 2.0);
            let (mut both, mut either) = (0u64, 0u64);
            for _ in 0..300_000 {
                let p = [
                    cx + rng.gen_range(-r..r),
                    cy + rng.gen_range(-r..r),
                    cz + rng.gen_range(-r..r),
                ];
                let (ia, ib) = (inside(&a, p), inside(&b, p));
                both += (ia && ib) as u64;
                either += (ia || ib) as u64;
            }
            let mc = both as f64 / either.max(1) as f64;
            assert!(
                (analytic - mc).abs() < 0.02,
                "case {case}: analytic {analytic} vs monte-carlo {mc}"
            );
        }
    }

    proptest! {
        #[test]
        fn iou_is_bounded_and_symmetric(
            ax in -5.0..5.0f64, ay in -5.0..5.0f64, az in -1.0..1.0f64,
            aw in 0.5..4.0f64, ah in 0.5..4.0f64, ad in 0.5..3.0f64, aa in -3.2..3.2f64,
            bx in -5.0..5.0f64, by in -5.0..5.0f64, bz in -1.0..1.0f64,
            bw in 0.5..4.0f64, bh in 0.5..4.0f64, bd in 0.5..3.0f64, ba in -3.2..3.2f64,
        ) {
            let a = Box3D::new(ax, ay, az, aw, ah, ad, aa);
            let b = Box3D::new(bx, by, bz, bw, bh, bd, ba);
            let ab = iou3d(&a, &b).unwrap();
            let ba = iou3d(&b, &a).unwrap();
            prop_assert!((0.0..=1.0).contains(&ab));
            prop_assert!((ab - ba).abs() < 1e-9);
        }
    }

    #[test]
    fn perfect_tracking_scores_hundred() {
        let gt: Vec<Box3D> = (0..20)
            .map(|i| Box3D::new(i as f64 * 0.1, 0.0, 0.0, 2.0, 1.0, 1.0, 0.0))
            .collect();
        let pairs: Vec<_> = gt.iter().copied().zip(gt.iter().copied()).collect();
        let m = ope_metrics(&pairs).unwrap();
        assert_eq!(m.success, 100.0);
        assert_eq!(m.precision, 100.0);
        assert_eq!(m.frames, 20);
    }

    #[test]
    fn half_lost_tracking_scores_known_values() {
        let hit = Box3D::new(0.0, 0.0, 0.0, 2.0, 2.0, 2.0, 0.0);
        let miss = Box3D::new(10.0, 0.0, 0.0, 2.0, 2.0, 2.0, 0.0);
        let pairs: Vec<_> = (0..10)
            .map(|i| (if i % 2 == 0 { hit } else { miss }, hit))
            .collect();
        let m = ope_metrics(&pairs).unwrap();
        // Overlap curve: 1.0 at t=0 (every IoU >= 0), 0.5 beyond; the
        // first trapezoid contributes the extra 0.25 of a step.
        assert!((m.success - 50.25).abs() < 1e-9);
        // Distance curve is flat 0.5 (hits at 0 m, misses at 10 m).
        assert!((m.precision - 50.0).abs() < 1e-9);
    }

    #[test]
    fn curves_have_fixed_thresholds() {
        assert_eq!(success_curve(&[0.5]).len(), 101);
        assert_eq!(precision_curve(&[0.5]).len(), 101);
        let p = precision_curve(&[0.5]);
        assert_eq!(p[0].0, 0.0);
        assert_eq!(p[100].0, 2.0);
    }

    #[test]
    fn empty_input_is_rejected() {
        assert!(ope_metrics(&[]).is_err());
        assert!(simulate_stream(0, 10.0, Box3D::new(0.0, 0.0, 0.0, 1.0, 1.0, 1.0, 0.0), |_| {
            unreachable!()
        })
        .is_err());
    }

    #[test]
    fn latency_model_cycles_and_validates() {
        let m = LatencyModel::PerFrame(vec![0.1, 0.2, 0.3]);
        m.validate().unwrap();
        assert_eq!(m.latency(0), 0.1);
        assert_eq!(m.latency(4), 0.2);
        assert_eq!(m.latency(300), 0.1);
        assert!(LatencyModel::Constant(-0.1).validate().is_err());
        assert!(LatencyModel::PerFrame(vec![]).validate().is_err());
        assert!(LatencyModel::Constant(f64::NAN).validate().is_err());
        LatencyModel::Constant(0.0).validate().unwrap();
    }

    fn moving_gt(n: usize) -> Vec<Box3D> {
        (0..n)
            .map(|i| Box3D::new(0.2 * i as f64, 0.1 * i as f64, 0.0, 3.0, 2.0, 1.5, 0.0))
            .collect()
    }

    #[test]
    fn zero_latency_stream_processes_everything() {
        let gt = moving_gt(30);
        let lat = LatencyModel::Constant(0.0);
        let res = simulate_stream(30, 10.0, gt[0], gt_echo(&gt, &lat)).unwrap();
        assert_eq!(res.drop_percent, 0.0);
        assert_eq!(res.processed_frames, 29);
        for (i, o) in res.outcomes.iter().enumerate() {
            match o {
                FrameOutcome::Processed { prediction, .. } => assert_eq!(*prediction, gt[i]),
                FrameOutcome::Dropped => panic!("frame {i} dropped with zero latency"),
            }
        }
        // Both association modes degenerate to the identity.
        assert!(res.associations(true).iter().enumerate().all(|(i, &j)| i == j));
        assert!(res.associations(false).iter().enumerate().all(|(i, &j)| i == j));
    }

    #[test]
    fn slow_worker_drops_skipped_frames() {
        // Processing takes 2.5 frame periods: the worker finishes frame
        // 1 at 3.5 periods, grabs 3 (dropping 2), finishes at 6, grabs 6
        // (dropping 4 and 5), and so on.
        let n = 101;
        let rate = 10.0;
        let gt = moving_gt(n);
        let lat = LatencyModel::Constant(2.5 / rate);
        let res = simulate_stream(n, rate, gt[0], gt_echo(&gt, &lat)).unwrap();
        let processed: Vec<usize> = res
            .outcomes
            .iter()
            .enumerate()
            .filter(|(_, o)| matches!(o, FrameOutcome::Processed { .. }))
            .map(|(i, _)| i)
            .collect();
        assert_eq!(&processed[..6], &[0, 1, 3, 6, 8, 11]);
        // The +2/+3 cadence processes 40 frames through frame 98; the
        // final frame is drained late once nothing newer can preempt it.
        assert_eq!(processed.last(), Some(&100));
        assert_eq!(res.drop_percent, 59.0);
        assert_eq!(res.processed_frames, 41);
        // 2.5 periods each at 10 Hz -> 4 processed frames per second.
        assert!((res.fps() - 4.0).abs() < 1e-9);
    }

    #[test]
    fn association_lag_matches_hand_walk() {
        let n = 20;
        let rate = 10.0;
        let gt = moving_gt(n);
        let lat = LatencyModel::Constant(2.5 / rate);
        let res = simulate_stream(n, rate, gt[0], gt_echo(&gt, &lat)).unwrap();
        let np = res.associations(false);
        let pr = res.associations(true);
        // Frame 1 finishes at 3.5 periods: usable for frame 3 when the
        // deadline is the next arrival (4), not when it is the arrival
        // itself (3).
        assert_eq!(np[2], 0);
        assert_eq!(np[3], 1);
        assert_eq!(pr[3], 0);
        assert_eq!(pr[4], 1);
        // Frame 3 finishes exactly at period 6; the tie counts.
        assert_eq!(pr[6], 3);
        assert_eq!(np[5], 3);
        // Predictive associations never use newer sources.
        assert!(pr.iter().zip(&np).all(|(p, n)| p <= n));
    }

    #[test]
    fn zero_latency_realtime_equals_offline_exactly() {
        let gt = moving_gt(40);
        let lat = LatencyModel::Constant(0.0);
        let off =
            evaluate_sequence(&gt, 10.0, EvalMode::Offline, gt_echo(&gt, &lat)).unwrap();
        let rt = evaluate_sequence(
            &gt,
            10.0,
            EvalMode::RealtimeNonpredictive,
            gt_echo(&gt, &lat),
        )
        .unwrap();
        assert_eq!(off.metrics.success, rt.metrics.success);
        assert_eq!(off.metrics.precision, rt.metrics.precision);
        assert_eq!(rt.drop_percent, 0.0);
        assert_eq!(off.predictions, rt.predictions);
        assert_eq!(off.metrics.success, 100.0);
    }

    #[test]
    fn lag_orders_the_three_modes() {
        let gt = moving_gt(101);
        let lat = LatencyModel::Constant(2.5 / 10.0);
        let run = |mode| {
            evaluate_sequence(&gt, 10.0, mode, gt_echo(&gt, &lat))
                .unwrap()
                .metrics
        };
        let off = run(EvalMode::Offline);
        let np = run(EvalMode::RealtimeNonpredictive);
        let pr = run(EvalMode::RealtimePredictive);
        assert!(pr.success < np.success, "{} vs {}", pr.success, np.success);
        assert!(np.success < off.success, "{} vs {}", np.success, off.success);
        assert!(pr.precision < np.precision);
        assert!(np.precision < off.precision);
    }

    #[test]
    fn processor_errors_propagate() {
        let gt = moving_gt(10);
        let res = evaluate_sequence(&gt, 10.0, EvalMode::Offline, |i| {
            if i == 4 {
                Err(Error::Runtime("sensor glitch".into()))
            } else {
                Ok((gt[i], 0.0))
            }
        });
        assert!(res.is_err());
        assert!(res.unwrap_err().to_string().contains("sensor glitch"));
    }
}
