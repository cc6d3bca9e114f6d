//! Training-pair construction from labeled frames and tracked sequences,
//! soft label maps, class-balanced loss weights, and the seeded training
//! loop with checkpoint/resume support.

use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::geom::{
    add_context, box_to_region, make_search, rotate_about, Box3D, GridSpec, Region2D, Track,
};
use crate::nn::adam::{adam_step, AdamConfig, AdamState};
use crate::nn::checkpoint::Blob;
use crate::nn::conv::FgnConfig;
use crate::nn::graph::{Model, SiamGraph};
use crate::nn::Tensor;
use crate::pillars::{region_dims, region_pillars, PillarConfig, PointCloud};
use crate::tracker::TrackerConfig;

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub steps: usize,
    pub lr: f64,
    /// Radius of fully positive labels around the projected center.
    pub label_radius: f64,
    /// Label value at distance `label_radius` from the center.
    pub v_min: f64,
    /// Label value at the center.
    pub v_max: f64,
    /// Tracking pairs drawn per object per epoch.
    pub samples_per_object: usize,
    /// Shift the search center away from the target center.
    pub shift_augment: bool,
    /// Max |angle| of whole-cloud rotation augmentation (radians, 0 = off).
    pub global_rotation: f64,
    /// Max |offset| of whole-cloud translation augmentation (meters, 0 = off).
    pub global_translation: f64,
    /// Also build one detection-style pair per labeled object per frame.
    pub detection_pairs: bool,
    pub seed: u64,
    /// Checkpoint every N steps (0 = only at the end).
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 64_000,
            lr: 1e-5,
            label_radius: 2.0,
            v_min: 0.5,
            v_max: 1.0,
            samples_per_object: 8,
            shift_augment: true,
            global_rotation: 5f64.to_radians(),
            global_translation: 0.5,
            detection_pairs: false,
            seed: 0,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::config("steps must be at least 1"));
        }
        if !(self.label_radius >= 1.0) {
            return Err(Error::config(format!(
                "label_radius must be at least 1, got {}",
                self.label_radius
            )));
        }
        if !(0.0 <= self.v_min && self.v_min <= self.v_max && self.v_max <= 1.0) {
            return Err(Error::config(format!(
                "need 0 <= v_min <= v_max <= 1, got {} and {}",
                self.v_min, self.v_max
            )));
        }
        if self.samples_per_object == 0 {
            return Err(Error::config("samples_per_object must be at least 1"));
        }
        if !(self.lr >= 0.0) || !self.lr.is_finite() {
            return Err(Error::config(format!("lr must be non-negative, got {}", self.lr)));
        }
        Ok(())
    }
}

/// One frame with object labels, detection style.
#[derive(Debug, Clone)]
pub struct LabeledFrame {
    pub cloud: Arc<PointCloud>,
    pub boxes: Vec<Box3D>,
}

/// A sequence of clouds plus per-object tracks over them.
#[derive(Debug, Clone)]
pub struct TrackedSequence {
    pub clouds: Vec<Arc<PointCloud>>,
    pub tracks: Vec<Track>,
}

#[derive(Debug, Clone, Default)]
pub struct TrainData {
    pub frames: Vec<LabeledFrame>,
    pub sequences: Vec<TrackedSequence>,
}

/// A target/search pair ready for one optimization step. Regions are
/// built from (possibly augmented) boxes; the same rigid cloud transform
/// is replayed on the raw points at step time.
#[derive(Debug, Clone)]
pub struct TrainSample {
    pub target_cloud: Arc<PointCloud>,
    pub search_cloud: Arc<PointCloud>,
    pub target: Region2D,
    pub search: Region2D,
    /// Object center minus search center, global pixel frame.
    pub center_offset: [f64; 2],
    /// Whole-cloud rotation (radians about the grid origin) and
    /// translation (meters) applied to this sample.
    pub cloud_rot: f64,
    pub cloud_trans: [f64; 2],
    /// Built from a single frame because the track had length 1.
    pub detection_fallback: bool,
}

/// Shift the search center uniformly within the slack between search and
/// target sides, leaving size and rotation alone.
pub fn shift_augment(search: &Region2D, target: &Region2D, rng: &mut ChaCha8Rng) -> Region2D {
    let bx = (search.w - target.w) / 2.0;
    let by = (search.h - target.h) / 2.0;
    let ex = if bx > 0.0 { rng.gen_range(-bx..=bx) } else { 0.0 };
    let ey = if by > 0.0 { rng.gen_range(-by..=by) } else { 0.0 };
    Region2D {
        x: target.x + ex,
        y: target.y + ey,
        ..*search
    }
}

fn rigid_box(b: &Box3D, rot: f64, trans: [f64; 2]) -> Box3D {
    let p = rotate_about([b.x, b.y], [0.0, 0.0], rot);
    Box3D::new(
        p[0] + trans[0],
        p[1] + trans[1],
        b.z,
        b.w,
        b.h,
        b.d,
        b.alpha + rot,
    )
}

/// Replays a sample's rigid cloud transform on raw points.
pub fn rigid_cloud(cloud: &PointCloud, rot: f64, trans: [f64; 2]) -> PointCloud {
    if rot == 0.0 && trans == [0.0, 0.0] {
        return cloud.clone();
    }
    PointCloud::new(
        cloud
            .points
            .iter()
            .map(|p| {
                let r = rotate_about([p[0], p[1]], [0.0, 0.0], rot);
                [r[0] + trans[0], r[1] + trans[1], p[2], p[3]]
            })
            .collect(),
    )
}

fn draw_rigid(cfg: &TrainConfig, rng: &mut ChaCha8Rng) -> (f64, [f64; 2]) {
    let rot = if cfg.global_rotation > 0.0 {
        rng.gen_range(-cfg.global_rotation..=cfg.global_rotation)
    } else {
        0.0
    };
    let trans = if cfg.global_translation > 0.0 {
        [
            rng.gen_range(-cfg.global_translation..=cfg.global_translation),
            rng.gen_range(-cfg.global_translation..=cfg.global_translation),
        ]
    } else {
        [0.0, 0.0]
    };
    (rot, trans)
}

/// Assembles one sample from a target-frame box and a search-frame box.
/// The rigid augmentation falls back to identity if it would push either
/// box off the grid, so sample counts stay deterministic.
#[allow(clippy::too_many_arguments)]
fn build_sample(
    target_cloud: &Arc<PointCloud>,
    target_box: &Box3D,
    search_cloud: &Arc<PointCloud>,
    search_box: &Box3D,
    detection_fallback: bool,
    grid: &GridSpec,
    tracker_cfg: &TrackerConfig,
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Option<TrainSample> {
    let (mut rot, mut trans) = draw_rigid(cfg, rng);
    let mut bt = rigid_box(target_box, rot, trans);
    let mut bs = rigid_box(search_box, rot, trans);
    if box_to_region(&bt, grid).is_err() || box_to_region(&bs, grid).is_err() {
        (rot, trans) = (0.0, [0.0, 0.0]);
        (bt, bs) = (*target_box, *search_box);
    }
    let rt = box_to_region(&bt, grid).ok()?;
    let rs = box_to_region(&bs, grid).ok()?;
    let target = add_context(&rt, tracker_cfg.context_amount);
    let anchor = add_context(&rs, tracker_cfg.context_amount);
    let base = make_search(&anchor, tracker_cfg.search_scale);
    let search = if cfg.shift_augment {
        shift_augment(&base, &anchor, rng)
    } else {
        base
    };
    Some(TrainSample {
        target_cloud: target_cloud.clone(),
        search_cloud: search_cloud.clone(),
        target,
        search,
        center_offset: [anchor.x - search.x, anchor.y - search.y],
        cloud_rot: rot,
        cloud_trans: trans,
        detection_fallback,
    })
}

/// One sample per labeled box, target and search cut from the same frame.
pub fn sample_detection_pairs(
    frame: &LabeledFrame,
    grid: &GridSpec,
    tracker_cfg: &TrackerConfig,
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Vec<TrainSample> {
    frame
        .boxes
        .iter()
        .filter_map(|b| {
            build_sample(
                &frame.cloud,
                b,
                &frame.cloud,
                b,
                false,
                grid,
                tracker_cfg,
                cfg,
                rng,
            )
        })
        .collect()
}

/// `samples_per_object` pairs for one track, target and search frames
/// drawn uniformly and distinct whenever the track allows it.
pub fn sample_tracking_pairs(
    track: &Track,
    clouds: &[Arc<PointCloud>],
    grid: &GridSpec,
    tracker_cfg: &TrackerConfig,
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<TrainSample>> {
    track.validate()?;
    let mut out = Vec::with_capacity(cfg.samples_per_object);
    for _ in 0..cfg.samples_per_object {
        let ti = rng.gen_range(0..track.frames.len());
        let (si, fallback) = if track.frames.len() == 1 {
            (ti, true)
        } else {
            // Uniform over the other frames.
            let mut si = rng.gen_range(0..track.frames.len() - 1);
            if si >= ti {
                si += 1;
            }
            (si, false)
        };
        let (ft, bt) = &track.frames[ti];
        let (fs, bs) = &track.frames[si];
        let (ct, cs) = match (clouds.get(*ft), clouds.get(*fs)) {
            (Some(a), Some(b)) => (a, b),
            _ => {
                return Err(Error::config(format!(
                    "track {} references frame beyond the {} clouds",
                    track.track_id,
                    clouds.len()
                )))
            }
        };
        if let Some(s) =
            build_sample(ct, bt, cs, bs, fallback, grid, tracker_cfg, cfg, rng)
        {
            out.push(s);
        }
    }
    Ok(out)
}

/// Soft labels: `v_max` at the center falling linearly to `v_min` at
/// distance `r`, continuing to fade until `r + 1`, zero beyond. Center
/// may be fractional; values clamped to [0, 1].
pub fn make_label_map(
    rows: usize,
    cols: usize,
    center: [f64; 2],
    r: f64,
    v_min: f64,
    v_max: f64,
) -> Tensor {
    let mut t = Tensor::zeros(&[rows, cols]);
    for row in 0..rows {
        for col in 0..cols {
            let d = (col as f64 - center[0]).hypot(row as f64 - center[1]);
            if d <= r + 1.0 {
                let v = v_min * d / r + v_max * (1.0 - d / r);
                t.set2(row, col, v.clamp(0.0, 1.0));
            }
        }
    }
    t
}

/// Per-pixel weights making the positive (label > 0) and negative classes
/// contribute equal total weight N/2 each; a single-class map weighs
/// every pixel 1.
pub fn balance_weights(labels: &Tensor) -> Tensor {
    let n = labels.len();
    let n_pos = labels.data().iter().filter(|&&v| v > 0.0).count();
    let n_neg = n - n_pos;
    let mut w = Tensor::zeros(labels.shape());
    if n_pos == 0 || n_neg == 0 {
        w.data_mut().fill(1.0);
        return w;
    }
    let w_pos = n as f64 / (2.0 * n_pos as f64);
    let w_neg = n as f64 / (2.0 * n_neg as f64);
    for (o, &v) in w.data_mut().iter_mut().zip(labels.data()) {
        *o = if v > 0.0 { w_pos } else { w_neg };
    }
    w
}

/// Label map sized for this sample's realized score map, centered where
/// the object lands on it.
fn sample_labels(
    model: &Model,
    sample: &TrainSample,
    cfg: &TrainConfig,
) -> Result<(Tensor, Tensor)> {
    let (t_rows, t_cols) = region_dims(&sample.target);
    let (s_rows, s_cols) = region_dims(&sample.search);
    let (tf_h, tf_w) = model.fgn.out_dims(t_rows, t_cols)?;
    let (sf_h, sf_w) = model.fgn.out_dims(s_rows, s_cols)?;
    if sf_h < tf_h || sf_w < tf_w {
        return Err(Error::shape(format!(
            "search features {sf_h}x{sf_w} smaller than target features {tf_h}x{tf_w}"
        )));
    }
    let (map_h, map_w) = (sf_h - tf_h + 1, sf_w - tf_w + 1);
    let stride = model.fgn.stride_product() as f64;
    // The offset lives in the global pixel frame; the search image is the
    // world rotated by -alpha about the search center.
    let local = rotate_about(sample.center_offset, [0.0, 0.0], -sample.search.alpha);
    let center = [
        (map_w as f64 - 1.0) / 2.0 + local[0] / stride,
        (map_h as f64 - 1.0) / 2.0 + local[1] / stride,
    ];
    let labels = make_label_map(map_h, map_w, center, cfg.label_radius, cfg.v_min, cfg.v_max);
    let weights = balance_weights(&labels);
    Ok((labels, weights))
}

/// One optimization step on one sample. `t` is the 1-based Adam step.
#[allow(clippy::too_many_arguments)]
pub fn train_step(
    model: &mut Model,
    adam: &mut [AdamState],
    adam_cfg: &AdamConfig,
    t: u64,
    sample: &TrainSample,
    grid: &GridSpec,
    pillar_cfg: &PillarConfig,
    cfg: &TrainConfig,
) -> Result<f64> {
    let t_cloud = rigid_cloud(&sample.target_cloud, sample.cloud_rot, sample.cloud_trans);
    let s_cloud = if Arc::ptr_eq(&sample.target_cloud, &sample.search_cloud) {
        None
    } else {
        Some(rigid_cloud(
            &sample.search_cloud,
            sample.cloud_rot,
            sample.cloud_trans,
        ))
    };
    let s_cloud = s_cloud.as_ref().unwrap_or(&t_cloud);
    let target = region_pillars(&t_cloud, &sample.target, grid, pillar_cfg)?;
    let search = region_pillars(s_cloud, &sample.search, grid, pillar_cfg)?;
    let (labels, weights) = sample_labels(model, sample, cfg)?;
    let mut graph = SiamGraph::new();
    let loss = graph.forward(model, &target, &search, &labels, &weights)?;
    let grads = graph.backward(model)?;
    for ((p, g), st) in model
        .param_slices_mut()
        .into_iter()
        .zip(&grads.tensors)
        .zip(adam.iter_mut())
    {
        adam_step(p, g, st, adam_cfg, t);
    }
    Ok(loss)
}

const EPOCH_TAG: u64 = 0x45504f43; // "EPOC"

/// Deterministic sub-seed derivation (splitmix64 finalizer over the mix).
fn derive_seed(seed: u64, tag: u64, index: u64) -> u64 {
    let mut z = seed
        ^ tag.wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ index.wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// All samples for one epoch, shuffled. Counts are deterministic, so
/// every epoch has the same length and resuming can re-derive any epoch
/// from (seed, epoch index) alone.
pub fn build_epoch(
    data: &TrainData,
    epoch: u64,
    grid: &GridSpec,
    tracker_cfg: &TrackerConfig,
    cfg: &TrainConfig,
) -> Result<Vec<TrainSample>> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, EPOCH_TAG, epoch));
    let mut pool = Vec::new();
    for frame in &data.frames {
        pool.extend(sample_detection_pairs(frame, grid, tracker_cfg, cfg, &mut rng));
    }
    for seq in &data.sequences {
        for track in &seq.tracks {
            pool.extend(sample_tracking_pairs(
                track,
                &seq.clouds,
                grid,
                tracker_cfg,
                cfg,
                &mut rng,
            )?);
        }
        if cfg.detection_pairs {
            for (fi, cloud) in seq.clouds.iter().enumerate() {
                let frame = LabeledFrame {
                    cloud: cloud.clone(),
                    boxes: seq
                        .tracks
                        .iter()
                        .filter_map(|t| t.box_at(fi).copied())
                        .collect(),
                };
                pool.extend(sample_detection_pairs(&frame, grid, tracker_cfg, cfg, &mut rng));
            }
        }
    }
    pool.shuffle(&mut rng);
    Ok(pool)
}

/// Runs steps `start_step..cfg.steps`, reporting each loss through
/// `on_step` and parameter snapshots through `on_checkpoint` (every
/// `checkpoint_every` steps and once at the end).
#[allow(clippy::too_many_arguments)]
pub fn train_loop(
    data: &TrainData,
    model: &mut Model,
    adam: &mut Vec<AdamState>,
    start_step: usize,
    cfg: &TrainConfig,
    tracker_cfg: &TrackerConfig,
    grid: &GridSpec,
    pillar_cfg: &PillarConfig,
    mut on_step: impl FnMut(usize, f64) -> Result<()>,
    mut on_checkpoint: impl FnMut(usize, &Model, &[AdamState]) -> Result<()>,
) -> Result<()> {
    cfg.validate()?;
    tracker_cfg.validate()?;
    if adam.is_empty() {
        *adam = model
            .param_slices()
            .iter()
            .map(|s| AdamState::new(s.len()))
            .collect();
    }
    let adam_cfg = AdamConfig {
        lr: cfg.lr,
        ..AdamConfig::default()
    };
    let mut pool = build_epoch(data, (start_step) as u64, grid, tracker_cfg, cfg)?;
    let pool_len = pool.len();
    if pool_len == 0 {
        return Err(Error::config("training dataset produced no samples"));
    }
    let mut pool_epoch = start_step / pool_len;
    pool = build_epoch(data, pool_epoch as u64, grid, tracker_cfg, cfg)?;
    let mut last_ckpt = None;
    for step in start_step..cfg.steps {
        let epoch = step / pool_len;
        if epoch != pool_epoch {
            pool = build_epoch(data, epoch as u64, grid, tracker_cfg, cfg)?;
            debug_assert_eq!(pool.len(), pool_len);
            pool_epoch = epoch;
        }
        let sample = &pool[step % pool_len];
        let loss = train_step(
            model,
            adam,
            &adam_cfg,
            (step + 1) as u64,
            sample,
            grid,
            pillar_cfg,
            cfg,
        )
        .map_err(|e| Error::Runtime(format!("train step {step}: {e}")))?;
        on_step(step, loss).map_err(|e| Error::Runtime(format!("recording step {step}: {e}")))?;
        if cfg.checkpoint_every > 0 && (step + 1) % cfg.checkpoint_every == 0 {
            on_checkpoint(step + 1, model, adam)
                .map_err(|e| Error::Runtime(format!("checkpoint at step {}: {e}", step + 1)))?;
            last_ckpt = Some(step + 1);
        }
    }
    if last_ckpt != Some(cfg.steps) {
        on_checkpoint(cfg.steps, model, adam)
            .map_err(|e| Error::Runtime(format!("final checkpoint: {e}")))?;
    }
    Ok(())
}

/// Model parameters plus Adam moments as checkpoint blobs.
pub fn training_blobs(model: &Model, adam: &[AdamState]) -> Vec<Blob> {
    let mut blobs = model.to_blobs();
    for ((name, dims), st) in model
        .param_names()
        .into_iter()
        .zip(model.param_dims())
        .zip(adam)
    {
        blobs.push(Blob {
            name: format!("adam.m.{name}"),
            dims: dims.clone(),
            values: st.m.clone(),
        });
        blobs.push(Blob {
            name: format!("adam.v.{name}"),
            dims,
            values: st.v.clone(),
        });
    }
    blobs
}

/// Rebuilds the model and optimizer state from checkpoint blobs. Moments
/// must be present for all parameters or for none (fresh zeros).
pub fn restore_training(
    blobs: &[Blob],
    in_channels: usize,
    fgn_cfg: &FgnConfig,
) -> Result<(Model, Vec<AdamState>)> {
    let model = Model::from_blobs(blobs, in_channels, fgn_cfg)?;
    let names = model.param_names();
    let present = names
        .iter()
        .filter(|n| blobs.iter().any(|b| b.name == format!("adam.m.{n}")))
        .count();
    if present == 0 {
        let adam = model
            .param_slices()
            .iter()
            .map(|s| AdamState::new(s.len()))
            .collect();
        return Ok((model, adam));
    }
    if present != names.len() {
        return Err(Error::config(format!(
            "checkpoint has optimizer moments for {present} of {} parameters",
            names.len()
        )));
    }
    let mut adam = Vec::with_capacity(names.len());
    for (name, slice) in names.iter().zip(model.param_slices()) {
        let find = |prefix: &str| -> Result<Vec<f64>> {
            let full = format!("{prefix}.{name}");
            let b = blobs
                .iter()
                .find(|b| b.name == full)
                .ok_or_else(|| Error::config(format!("checkpoint missing blob `{full}`")))?;
            if b.values.len() != slice.len() {
                return Err(Error::config(format!(
                    "blob `{full}` has {} values, parameter has {}",
                    b.values.len(),
                    slice.len()
                )));
            }
            Ok(b.values.clone())
        };
        adam.push(AdamState {
            m: find("adam.m")?,
            v: find("adam.v")?,
        });
    }
    Ok((model, adam))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};

    fn toy_grid() -> GridSpec {
        GridSpec {
            x_min: -8.0,
            x_max: 8.0,
            y_min: -8.0,
            y_max: 8.0,
            z_min: -2.0,
            z_max: 2.0,
            pillar_size: 0.5,
        }
    }

    fn toy_tracker_cfg() -> TrackerConfig {
        TrackerConfig::default()
    }

    fn toy_train_cfg() -> TrainConfig {
        TrainConfig {
            steps: 20,
            lr: 3e-3,
            samples_per_object: 4,
            global_rotation: 0.05,
            global_translation: 0.2,
            seed: 7,
            ..TrainConfig::default()
        }
    }

    fn toy_pillar_cfg() -> PillarConfig {
        PillarConfig {
            max_points_per_pillar: 12,
            max_pillars: 2000,
            feature_channels: 3,
        }
    }

    fn toy_model() -> Model {
        Model::init(
            3,
            &FgnConfig {
                blocks: 1,
                layers_per_block: 2,
                channels: 6,
                first_stride: 1,
            },
            11,
        )
        .unwrap()
    }

    fn box_surface_cloud(boxes: &[Box3D], seed: u64) -> Arc<PointCloud> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut pts = Vec::new();
        for b in boxes {
            for _ in 0..120 {
                let t: f64 = rng.gen_range(0.0..4.0);
                let (lx, ly) = match t as usize {
                    0 => (t.fract() - 0.5, -0.5),
                    1 => (0.5, t.fract() - 0.5),
                    2 => (0.5 - t.fract(), 0.5),
                    _ => (-0.5, t.fract() - 0.5),
                };
                let p = rotate_about([lx * b.w, ly * b.h], [0.0, 0.0], b.alpha);
                pts.push([b.x + p[0], b.y + p[1], b.z, rng.gen_range(0.1..0.9)]);
            }
        }
        for _ in 0..60 {
            pts.push([
                rng.gen_range(-7.5..7.5),
                rng.gen_range(-7.5..7.5),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(0.1..0.9),
            ]);
        }
        Arc::new(PointCloud::new(pts))
    }

    fn toy_frame() -> LabeledFrame {
        let boxes = vec![
            Box3D::new(1.0, 0.5, 0.0, 3.0, 2.0, 1.4, 0.3),
            Box3D::new(-3.0, -2.0, 0.0, 2.5, 1.8, 1.2, -0.7),
        ];
        LabeledFrame {
            cloud: box_surface_cloud(&boxes, 1),
            boxes,
        }
    }

    fn toy_sequence() -> TrackedSequence {
        let mut tracks = vec![Track {
            track_id: 0,
            object_id: 0,
            class: "Car".into(),
            frames: Vec::new(),
        }];
        let mut clouds = Vec::new();
        for f in 0..4usize {
            let b = Box3D::new(-2.0 + 0.4 * f as f64, 1.0, 0.0, 3.0, 2.0, 1.4, 0.2);
            tracks[0].frames.push((f, b));
            clouds.push(box_surface_cloud(&[b], 50 + f as u64));
        }
        TrackedSequence { clouds, tracks }
    }

    #[test]
    fn label_map_values_match_formula_at_key_radii() {
        // Integer center so distances are exact.
        let m = make_label_map(11, 11, [5.0, 5.0], 2.0, 0.5, 1.0);
        assert_eq!(m.at2(5, 5), 1.0); // d = 0
        assert_eq!(m.at2(5, 7), 0.5); // d = r
        assert_eq!(m.at2(5, 8), 0.25); // d = r + 1
        assert_eq!(m.at2(5, 9), 0.0); // beyond r + 1
        assert_eq!(m.at2(1, 5), 0.0); // d = 4
        // Radial symmetry and monotone decay on axis-aligned rays.
        for d in 0..5usize {
            let v = m.at2(5, 5 + d);
            assert_eq!(v, m.at2(5, 5 - d));
            assert_eq!(v, m.at2(5 + d, 5));
            assert_eq!(v, m.at2(5 - d, 5));
            if d > 0 {
                assert!(v <= m.at2(5, 5 + d - 1));
            }
        }
    }

    #[test]
    fn label_map_supports_fractional_centers() {
        let m = make_label_map(9, 9, [4.25, 3.75], 2.0, 0.5, 1.0);
        let d = (4.0f64 - 4.25).hypot(4.0 - 3.75);
        let want = (0.5 * d / 2.0 + 1.0 * (1.0 - d / 2.0)).clamp(0.0, 1.0);
        assert!((m.at2(4, 4) - want).abs() < 1e-12);
        assert!(m.max_value() <= 1.0);
    }

    #[test]
    fn balance_weights_equalizes_classes() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..200 {
            let rows = rng.gen_range(3..12);
            let cols = rng.gen_range(3..12);
            let center = [
                rng.gen_range(0.0..cols as f64 - 1.0),
                rng.gen_range(0.0..rows as f64 - 1.0),
            ];
            let m = make_label_map(rows, cols, center, 2.0, 0.5, 1.0);
            let w = balance_weights(&m);
            let pos: f64 = m
                .data()
                .iter()
                .zip(w.data())
                .filter(|(&v, _)| v > 0.0)
                .map(|(_, &w)| w)
                .sum();
            let neg: f64 = m
                .data()
                .iter()
                .zip(w.data())
                .filter(|(&v, _)| v == 0.0)
                .map(|(_, &w)| w)
                .sum();
            let n = m.len() as f64;
            if pos > 0.0 && neg > 0.0 {
                assert!((pos - neg).abs() < 1e-9);
                assert!((pos + neg - n).abs() < 1e-9);
            } else {
                assert!(w.data().iter().all(|&x| x == 1.0));
            }
        }
    }

    #[test]
    fn balance_weights_closed_form_single_positive() {
        let mut labels = Tensor::zeros(&[10, 10]);
        labels.set2(3, 4, 0.7);
        let w = balance_weights(&labels);
        assert!((w.at2(3, 4) - 50.0).abs() < 1e-12);
        assert!((w.at2(0, 0) - 50.0 / 99.0).abs() < 1e-12);
    }

    #[test]
    fn shift_stays_in_bounds_and_centers_on_average() {
        let target = Region2D::new(10.0, 12.0, 6.0, 4.0, 0.3);
        let search = make_search(&target, 2.0);
        let (bx, by) = ((search.w - target.w) / 2.0, (search.h - target.h) / 2.0);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 10_000;
        let (mut sx, mut sy) = (0.0, 0.0);
        for _ in 0..n {
            let s = shift_augment(&search, &target, &mut rng);
            let ex = s.x - target.x;
            let ey = s.y - target.y;
            assert!(ex.abs() <= bx && ey.abs() <= by);
            sx += ex;
            sy += ey;
        }
        // Mean of U(-b, b) has std err b/sqrt(3n).
        let se_x = bx / (3.0 * n as f64).sqrt();
        let se_y = by / (3.0 * n as f64).sqrt();
        assert!((sx / n as f64).abs() < 3.0 * se_x);
        assert!((sy / n as f64).abs() < 3.0 * se_y);
    }

    #[test]
    fn degenerate_slack_means_zero_shift() {
        let target = Region2D::new(5.0, 5.0, 4.0, 4.0, 0.0);
        let same = Region2D::new(5.0, 5.0, 4.0, 4.0, 0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let s = shift_augment(&same, &target, &mut rng);
        assert_eq!((s.x, s.y), (target.x, target.y));
    }

    #[test]
    fn detection_pairs_one_per_box() {
        let frame = toy_frame();
        let grid = toy_grid();
        let mut cfg = toy_train_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let samples = sample_detection_pairs(&frame, &grid, &toy_tracker_cfg(), &cfg, &mut rng);
        assert_eq!(samples.len(), frame.boxes.len());
        for s in &samples {
            assert!(Arc::ptr_eq(&s.target_cloud, &s.search_cloud));
            // Search sides are the scaled context sides.
            assert!((s.search.w - s.target.w * 2.0).abs() < 1e-9);
            assert!((s.search.h - s.target.h * 2.0).abs() < 1e-9);
            assert!(!s.detection_fallback);
        }
        // Without shift the search centers on the target.
        cfg.shift_augment = false;
        cfg.global_rotation = 0.0;
        cfg.global_translation = 0.0;
        let samples = sample_detection_pairs(&frame, &grid, &toy_tracker_cfg(), &cfg, &mut rng);
        for s in &samples {
            assert_eq!((s.search.x, s.search.y), (s.target.x, s.target.y));
            assert_eq!(s.center_offset, [0.0, 0.0]);
        }
    }

    #[test]
    fn tracking_pairs_counts_and_distinct_frames() {
        let seq = toy_sequence();
        let grid = toy_grid();
        let cfg = toy_train_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let samples = sample_tracking_pairs(
            &seq.tracks[0],
            &seq.clouds,
            &grid,
            &toy_tracker_cfg(),
            &cfg,
            &mut rng,
        )
        .unwrap();
        assert_eq!(samples.len(), cfg.samples_per_object);
        for s in &samples {
            assert!(!Arc::ptr_eq(&s.target_cloud, &s.search_cloud) || s.detection_fallback);
            assert!(!s.detection_fallback);
        }
        // Identical seeds reproduce identical samples.
        let mut rng2 = ChaCha8Rng::seed_from_u64(6);
        let again = sample_tracking_pairs(
            &seq.tracks[0],
            &seq.clouds,
            &grid,
            &toy_tracker_cfg(),
            &cfg,
            &mut rng2,
        )
        .unwrap();
        for (a, b) in samples.iter().zip(&again) {
            assert_eq!(a.target, b.target);
            assert_eq!(a.search, b.search);
            assert_eq!(a.center_offset, b.center_offset);
        }
    }

    #[test]
    fn single_frame_track_falls_back_flagged() {
        let seq = toy_sequence();
        let short = Track {
            frames: vec![seq.tracks[0].frames[0]],
            ..seq.tracks[0].clone()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let samples = sample_tracking_pairs(
            &short,
            &seq.clouds,
            &toy_grid(),
            &toy_tracker_cfg(),
            &toy_train_cfg(),
            &mut rng,
        )
        .unwrap();
        assert!(!samples.is_empty());
        assert!(samples.iter().all(|s| s.detection_fallback));
    }

    fn run_steps(
        model: &mut Model,
        adam: &mut Vec<AdamState>,
        data: &TrainData,
        cfg: &TrainConfig,
        start: usize,
    ) -> Vec<f64> {
        let mut losses = Vec::new();
        train_loop(
            data,
            model,
            adam,
            start,
            cfg,
            &toy_tracker_cfg(),
            &toy_grid(),
            &toy_pillar_cfg(),
            |_, l| {
                losses.push(l);
                Ok(())
            },
            |_, _, _| Ok(()),
        )
        .unwrap();
        losses
    }

    #[test]
    fn zero_lr_leaves_parameters_bitwise_unchanged() {
        let mut model = toy_model();
        let before: Vec<Vec<f64>> = model.param_slices().iter().map(|s| s.to_vec()).collect();
        let mut adam = Vec::new();
        let data = TrainData {
            frames: vec![toy_frame()],
            sequences: vec![],
        };
        let cfg = TrainConfig {
            lr: 0.0,
            steps: 3,
            ..toy_train_cfg()
        };
        let losses = run_steps(&mut model, &mut adam, &data, &cfg, 0);
        assert_eq!(losses.len(), 3);
        assert!(losses.iter().all(|l| l.is_finite()));
        for (a, b) in model.param_slices().iter().zip(&before) {
            assert_eq!(*a, &b[..]);
        }
    }

    #[test]
    fn loss_trends_down_on_a_fixed_sample() {
        let mut model = toy_model();
        let mut adam: Vec<AdamState> = model
            .param_slices()
            .iter()
            .map(|s| AdamState::new(s.len()))
            .collect();
        let frame = toy_frame();
        let grid = toy_grid();
        let cfg = TrainConfig {
            shift_augment: false,
            global_rotation: 0.0,
            global_translation: 0.0,
            ..toy_train_cfg()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let sample =
            sample_detection_pairs(&frame, &grid, &toy_tracker_cfg(), &cfg, &mut rng)
                .remove(0);
        let adam_cfg = AdamConfig {
            lr: 3e-3,
            ..AdamConfig::default()
        };
        let mut losses = Vec::new();
        for t in 1..=50u64 {
            losses.push(
                train_step(
                    &mut model,
                    &mut adam,
                    &adam_cfg,
                    t,
                    &sample,
                    &grid,
                    &toy_pillar_cfg(),
                    &cfg,
                )
                .unwrap(),
            );
        }
        let head: f64 = losses[..10].iter().sum::<f64>() / 10.0;
        let tail: f64 = losses[40..].iter().sum::<f64>() / 10.0;
        assert!(tail < head, "loss did not decrease: head {head}, tail {tail}");
    }

    #[test]
    fn same_seed_runs_are_bit_identical() {
        let data = TrainData {
            frames: vec![],
            sequences: vec![toy_sequence()],
        };
        let cfg = TrainConfig {
            steps: 10,
            ..toy_train_cfg()
        };
        let mut m1 = toy_model();
        let mut a1 = Vec::new();
        let l1 = run_steps(&mut m1, &mut a1, &data, &cfg, 0);
        let mut m2 = toy_model();
        let mut a2 = Vec::new();
        let l2 = run_steps(&mut m2, &mut a2, &data, &cfg, 0);
        assert_eq!(l1, l2);
        for (a, b) in m1.param_slices().iter().zip(m2.param_slices()) {
            assert_eq!(*a, b);
        }
    }

    #[test]
    fn in_memory_resume_continues_the_exact_run() {
        let data = TrainData {
            frames: vec![],
            sequences: vec![toy_sequence()],
        };
        let cfg = TrainConfig {
            steps: 14,
            ..toy_train_cfg()
        };
        let mut full_model = toy_model();
        let mut full_adam = Vec::new();
        let full = run_steps(&mut full_model, &mut full_adam, &data, &cfg, 0);

        let short_cfg = TrainConfig { steps: 7, ..cfg.clone() };
        let mut m = toy_model();
        let mut a = Vec::new();
        let head = run_steps(&mut m, &mut a, &data, &short_cfg, 0);
        let blobs = training_blobs(&m, &a);
        let fgn_cfg = FgnConfig {
            blocks: 1,
            layers_per_block: 2,
            channels: 6,
            first_stride: 1,
        };
        let (mut resumed, mut resumed_adam) = restore_training(&blobs, 3, &fgn_cfg).unwrap();
        let tail = run_steps(&mut resumed, &mut resumed_adam, &data, &cfg, 7);
        let joined: Vec<f64> = head.into_iter().chain(tail).collect();
        assert_eq!(joined, full);
        for (a, b) in resumed.param_slices().iter().zip(full_model.param_slices()) {
            assert_eq!(*a, b);
        }
    }

    #[test]
    fn disk_checkpoint_double_resume_is_identical() {
        let data = TrainData {
            frames: vec![],
            sequences: vec![toy_sequence()],
        };
        let cfg = TrainConfig {
            steps: 6,
            ..toy_train_cfg()
        };
        let mut m = toy_model();
        let mut a = Vec::new();
        run_steps(&mut m, &mut a, &data, &cfg, 0);
        let ckpt = Checkpoint {
            header: vec![("step".into(), "6".into())],
            blobs: training_blobs(&m, &a),
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save_checkpoint(&path, &ckpt).unwrap();

        let fgn_cfg = FgnConfig {
            blocks: 1,
            layers_per_block: 2,
            channels: 6,
            first_stride: 1,
        };
        let resume_cfg = TrainConfig { steps: 12, ..cfg };
        let mut curves = Vec::new();
        for _ in 0..2 {
            let loaded = load_checkpoint(&path).unwrap();
            assert_eq!(loaded.header_get("step"), Some("6"));
            let (mut model, mut adam) = restore_training(&loaded.blobs, 3, &fgn_cfg).unwrap();
            curves.push(run_steps(&mut model, &mut adam, &data, &resume_cfg, 6));
        }
        assert_eq!(curves[0], curves[1]);
        assert_eq!(curves[0].len(), 6);
    }

    #[test]
    fn restore_rejects_partial_moments() {
        let m = toy_model();
        let adam: Vec<AdamState> = m
            .param_slices()
            .iter()
            .map(|s| AdamState::new(s.len()))
            .collect();
        let mut blobs = training_blobs(&m, &adam);
        // Drop one moment blob: now moments are partial.
        let idx = blobs.iter().position(|b| b.name == "adam.m.fgn.0.weight").unwrap();
        blobs.remove(idx);
        let fgn_cfg = FgnConfig {
            blocks: 1,
            layers_per_block: 2,
            channels: 6,
            first_stride: 1,
        };
        let err = restore_training(&blobs, 3, &fgn_cfg);
        assert!(err.is_err());
        // Model-only blobs restore with fresh moments.
        let (_, fresh) = restore_training(&m.to_blobs(), 3, &fgn_cfg).unwrap();
        assert!(fresh.iter().all(|s| s.m.iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn epoch_pools_have_constant_length() {
        let data = TrainData {
            frames: vec![toy_frame()],
            sequences: vec![toy_sequence()],
        };
        let cfg = toy_train_cfg();
        let len0 = build_epoch(&data, 0, &toy_grid(), &toy_tracker_cfg(), &cfg)
            .unwrap()
            .len();
        for e in 1..5 {
            let len = build_epoch(&data, e, &toy_grid(), &toy_tracker_cfg(), &cfg)
                .unwrap()
                .len();
            assert_eq!(len, len0);
        }
        assert_eq!(len0, 2 + cfg.samples_per_object);
    }
}
