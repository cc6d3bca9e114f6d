//! Pillar voxelization and the per-pillar feature encoder that turns a
//! point cloud into a dense pseudo-image.
//!
//! A pillar is one (col, row) cell of the grid with every point whose
//! footprint lands in it. Each kept point is lifted to 9 features
//! (absolute x/y/z, intensity, offsets to the pillar point mean, planar
//! offsets to the cell center), passed through a shared linear+ReLU, and
//! max-pooled per channel; the pooled vector is scattered to the cell's
//! pixel. Empty cells stay zero.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::geom::{rotate_about, GridSpec, Region2D};
use crate::nn::conv::gauss;
use crate::nn::Tensor;

/// Number of per-point input features fed to the encoder.
pub const POINT_FEATURES: usize = 9;

/// One Lidar return: x, y, z, intensity.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PointCloud {
    pub points: Vec<[f64; 4]>,
}

impl PointCloud {
    pub fn new(points: Vec<[f64; 4]>) -> Self {
        PointCloud { points }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Capacity limits and encoder width.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PillarConfig {
    pub max_points_per_pillar: usize,
    pub max_pillars: usize,
    pub feature_channels: usize,
}

impl Default for PillarConfig {
    fn default() -> Self {
        PillarConfig {
            max_points_per_pillar: 32,
            max_pillars: 12000,
            feature_channels: 32,
        }
    }
}

impl PillarConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_points_per_pillar == 0 || self.max_pillars == 0 || self.feature_channels == 0
        {
            return Err(Error::config(
                "pillar capacities and feature_channels must be >= 1",
            ));
        }
        Ok(())
    }
}

/// The planar grid a set of pillars was binned on. For global voxelization
/// this mirrors the [`GridSpec`]; for region images it is a small grid
/// centered on (and rotated with) the region.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PillarFrame {
    pub x_min: f64,
    pub y_min: f64,
    pub z_min: f64,
    pub z_max: f64,
    pub pillar_size: f64,
    pub cols: usize,
    pub rows: usize,
}

impl PillarFrame {
    pub fn from_grid(grid: &GridSpec) -> Self {
        PillarFrame {
            x_min: grid.x_min,
            y_min: grid.y_min,
            z_min: grid.z_min,
            z_max: grid.z_max,
            pillar_size: grid.pillar_size,
            cols: grid.width(),
            rows: grid.height(),
        }
    }

    /// Center of cell (col, row) in frame coordinates.
    pub fn cell_center(&self, col: usize, row: usize) -> [f64; 2] {
        [
            self.x_min + (col as f64 + 0.5) * self.pillar_size,
            self.y_min + (row as f64 + 0.5) * self.pillar_size,
        ]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Pillar {
    pub col: usize,
    pub row: usize,
    pub points: Vec<[f64; 4]>,
}

/// Binned (and capacity-limited) points, ready for encoding.
#[derive(Debug, Clone, PartialEq)]
pub struct Pillars {
    pub frame: PillarFrame,
    /// Sorted by (row, col); each pillar holds at most
    /// `max_points_per_pillar` points in input order.
    pub pillars: Vec<Pillar>,
    /// Points discarded because they fell outside the frame.
    pub out_of_bounds: usize,
    /// Points discarded by the per-pillar capacity.
    pub truncated_points: usize,
    /// Whole pillars discarded by the pillar-count capacity.
    pub dropped_pillars: usize,
}

impl Pillars {
    pub fn total_points(&self) -> usize {
        self.pillars.iter().map(|p| p.points.len()).sum()
    }
}

/// Bin `points` onto `frame`. Points outside the planar extent or the z
/// range are dropped. Per-pillar overflow keeps the earliest points in
/// input order; the pillar-count cap keeps the fullest pillars (ties by
/// grid index, row-major ascending).
pub fn voxelize_frame(points: &[[f64; 4]], frame: PillarFrame, cfg: &PillarConfig) -> Result<Pillars> {
    cfg.validate()?;
    if frame.cols == 0 || frame.rows == 0 {
        return Err(Error::shape("voxelize frame has zero extent"));
    }
    let s = frame.pillar_size;
    let mut bins: std::collections::HashMap<(usize, usize), Vec<[f64; 4]>> =
        std::collections::HashMap::new();
    let mut out_of_bounds = 0usize;
    let mut truncated = 0usize;
    for p in points {
        if p[2] < frame.z_min || p[2] > frame.z_max {
            out_of_bounds += 1;
            continue;
        }
        let fx = (p[0] - frame.x_min) / s;
        let fy = (p[1] - frame.y_min) / s;
        if fx < 0.0 || fy < 0.0 {
            out_of_bounds += 1;
            continue;
        }
        let (col, row) = (fx.floor() as usize, fy.floor() as usize);
        if col >= frame.cols || row >= frame.rows {
            out_of_bounds += 1;
            continue;
        }
        let v = bins.entry((row, col)).or_default();
        if v.len() < cfg.max_points_per_pillar {
            v.push(*p);
        } else {
            truncated += 1;
        }
    }

    let mut pillars: Vec<Pillar> = bins
        .into_iter()
        .map(|((row, col), points)| Pillar { col, row, points })
        .collect();
    let mut dropped_pillars = 0usize;
    if pillars.len() > cfg.max_pillars {
        // Fullest first; ties resolved by row-major grid index.
        pillars.sort_by(|a, b| {
            b.points
                .len()
                .cmp(&a.points.len())
                .then((a.row * frame.cols + a.col).cmp(&(b.row * frame.cols + b.col)))
        });
        dropped_pillars = pillars.len() - cfg.max_pillars;
        pillars.truncate(cfg.max_pillars);
    }
    pillars.sort_by_key(|p| p.row * frame.cols + p.col);

    Ok(Pillars {
        frame,
        pillars,
        out_of_bounds,
        truncated_points: truncated,
        dropped_pillars,
    })
}

/// Global voxelization over the whole working grid.
pub fn voxelize(cloud: &PointCloud, grid: &GridSpec, cfg: &PillarConfig) -> Result<Pillars> {
    grid.validate()?;
    voxelize_frame(&cloud.points, PillarFrame::from_grid(grid), cfg)
}

/// The shared per-point linear map: `weight` is `[channels, 9]`.
#[derive(Debug, Clone)]
pub struct PillarEncoder {
    pub weight: Tensor,
    pub bias: Vec<f64>,
}

impl PillarEncoder {
    pub fn channels(&self) -> usize {
        self.weight.shape()[0]
    }

    /// He-style init over the 9 input features.
    pub fn init(channels: usize, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self::init_with(channels, &mut rng)
    }

    pub fn init_with(channels: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        if channels == 0 {
            return Err(Error::config("encoder needs at least one channel"));
        }
        let std = crate::nn::conv::INIT_GAIN * (2.0 / POINT_FEATURES as f64).sqrt();
        let data: Vec<f64> = (0..channels * POINT_FEATURES)
            .map(|_| gauss(rng) * std)
            .collect();
        Ok(PillarEncoder {
            weight: Tensor::from_shape_vec(&[channels, POINT_FEATURES], data)?,
            bias: vec![0.0; channels],
        })
    }
}

/// Per-pillar forward state kept for the backward pass.
#[derive(Debug, Clone)]
pub struct PillarCache {
    pub col: usize,
    pub row: usize,
    /// Augmented 9-feature vector per kept point.
    pub feats: Vec<[f64; POINT_FEATURES]>,
    /// Winning point per channel (first maximum).
    pub argmax: Vec<usize>,
    /// Pre-ReLU value of the winner per channel.
    pub pre: Vec<f64>,
}

#[derive(Debug, Clone, Default)]
pub struct EncodeCache {
    pub per_pillar: Vec<PillarCache>,
}

/// Augmented features for every point of one pillar.
fn augment(pillar: &Pillar, frame: &PillarFrame) -> Vec<[f64; POINT_FEATURES]> {
    let n = pillar.points.len() as f64;
    let (mut mx, mut my, mut mz) = (0.0, 0.0, 0.0);
    for p in &pillar.points {
        mx += p[0];
        my += p[1];
        mz += p[2];
    }
    mx /= n;
    my /= n;
    mz /= n;
    let cc = frame.cell_center(pillar.col, pillar.row);
    pillar
        .points
        .iter()
        .map(|p| {
            [
                p[0],
                p[1],
                p[2],
                p[3],
                p[0] - mx,
                p[1] - my,
                p[2] - mz,
                p[0] - cc[0],
                p[1] - cc[1],
            ]
        })
        .collect()
}

/// Encode pillars into a dense `[channels, rows, cols]` pseudo-image.
pub fn encode_pillars(
    pillars: &Pillars,
    enc: &PillarEncoder,
) -> Result<(Tensor, EncodeCache)> {
    let c = enc.channels();
    if enc.weight.shape() != [c, POINT_FEATURES] {
        return Err(Error::config(format!(
            "encoder weight shape {:?}, expected [{c}, {POINT_FEATURES}]",
            enc.weight.shape()
        )));
    }
    if enc.bias.len() != c {
        return Err(Error::config(format!(
            "encoder bias length {} != {c} channels",
            enc.bias.len()
        )));
    }
    let (rows, cols) = (pillars.frame.rows, pillars.frame.cols);
    let mut img = Tensor::zeros(&[c, rows, cols]);
    let mut cache = EncodeCache::default();
    let w = enc.weight.data();
    for pillar in &pillars.pillars {
        if pillar.points.is_empty() {
            continue;
        }
        let feats = augment(pillar, &pillars.frame);
        let mut argmax = vec![0usize; c];
        let mut best_pre = vec![f64::NEG_INFINITY; c];
        let mut best_act = vec![f64::NEG_INFINITY; c];
        for (pi, f) in feats.iter().enumerate() {
            for ch in 0..c {
                let mut z = enc.bias[ch];
                let wrow = &w[ch * POINT_FEATURES..(ch + 1) * POINT_FEATURES];
                for k in 0..POINT_FEATURES {
                    z += wrow[k] * f[k];
                }
                let a = z.max(0.0);
                if a > best_act[ch] {
                    best_act[ch] = a;
                    best_pre[ch] = z;
                    argmax[ch] = pi;
                }
            }
        }
        for ch in 0..c {
            img.set3(ch, pillar.row, pillar.col, best_act[ch]);
        }
        cache.per_pillar.push(PillarCache {
            col: pillar.col,
            row: pillar.row,
            feats,
            argmax,
            pre: best_pre,
        });
    }
    Ok((img, cache))
}

/// Gradients of [`encode_pillars`] w.r.t. the encoder parameters. The max
/// pool routes each channel's gradient to the winning point; the ReLU
/// gates it on the winner's pre-activation sign.
pub fn encode_backward(
    cache: &EncodeCache,
    enc: &PillarEncoder,
    grad_img: &Tensor,
) -> Result<(Tensor, Vec<f64>)> {
    let c = enc.channels();
    let mut gw = Tensor::zeros(&[c, POINT_FEATURES]);
    let mut gb = vec![0.0; c];
    let gwd = gw.data_mut();
    for pc in &cache.per_pillar {
        for ch in 0..c {
            let g = grad_img.at3(ch, pc.row, pc.col);
            if g == 0.0 || pc.pre[ch] <= 0.0 {
                continue;
            }
            let f = &pc.feats[pc.argmax[ch]];
            for k in 0..POINT_FEATURES {
                gwd[ch * POINT_FEATURES + k] += g * f[k];
            }
            gb[ch] += g;
        }
    }
    Ok((gw, gb))
}

/// `ceil` with a small guard against floating-point fuzz so that sizes
/// that are integral up to ~1e-9 do not gain a spurious extra pillar.
fn ceil_eps(x: f64) -> usize {
    (x - 1e-9).ceil().max(0.0) as usize
}

/// Pseudo-image dims (rows, cols) a region voxelizes to; depends only on
/// the region's size.
pub fn region_dims(region: &Region2D) -> (usize, usize) {
    (ceil_eps(region.h).max(1), ceil_eps(region.w).max(1))
}

/// Rotate the cloud into the region's frame and bin the points that fall
/// inside it onto a region-aligned grid of exactly
/// `ceil(region.w) x ceil(region.h)` pillars centered on the region.
///
/// Coordinates are kept in meters of the rotated world frame (so for an
/// axis-aligned region on integer pixel boundaries this reproduces the
/// matching subwindow of the global voxelization exactly).
pub fn region_pillars(
    cloud: &PointCloud,
    region: &Region2D,
    grid: &GridSpec,
    cfg: &PillarConfig,
) -> Result<Pillars> {
    if !(region.w > 0.0) || !(region.h > 0.0) {
        return Err(Error::config(format!(
            "region sides must be positive, got {}x{}",
            region.w, region.h
        )));
    }
    let s = grid.pillar_size;
    let cx = grid.x_min + region.x * s;
    let cy = grid.y_min + region.y * s;
    let (rows, cols) = region_dims(region);
    let half_w = region.w * s * 0.5;
    let half_h = region.h * s * 0.5;
    let frame = PillarFrame {
        x_min: cx - cols as f64 * s * 0.5,
        y_min: cy - rows as f64 * s * 0.5,
        z_min: grid.z_min,
        z_max: grid.z_max,
        pillar_size: s,
        cols,
        rows,
    };
    let mut selected = Vec::new();
    for p in &cloud.points {
        if p[2] < grid.z_min || p[2] > grid.z_max {
            continue;
        }
        let r = rotate_about([p[0], p[1]], [cx, cy], -region.alpha);
        if (r[0] - cx).abs() <= half_w && (r[1] - cy).abs() <= half_h {
            selected.push([r[0], r[1], p[2], p[3]]);
        }
    }
    voxelize_frame(&selected, frame, cfg)
}

/// Region pillars, encoded: the per-region pseudo-image fed to the FGN.
pub fn region_pseudo_image(
    cloud: &PointCloud,
    region: &Region2D,
    grid: &GridSpec,
    cfg: &PillarConfig,
    enc: &PillarEncoder,
) -> Result<Tensor> {
    let pillars = region_pillars(cloud, region, grid, cfg)?;
    Ok(encode_pillars(&pillars, enc)?.0)
}
