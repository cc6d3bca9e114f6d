//! Boxes, pixel regions, grids and angle handling.
//!
//! Conventions used everywhere in this crate:
//! - Yaw `alpha` is counter-clockwise positive, normalized to `(-pi, pi]`.
//! - `Box3D.w` is the footprint side along the heading, `h` the side
//!   across it, `d` the vertical extent; `(x, y, z)` is the box center.
//! - Pixel regions live on the pillar grid: `x` is the column axis, `y`
//!   the row axis, both continuous, in units of pillars.

use crate::error::{Error, Result};

pub const TAU: f64 = std::f64::consts::TAU;

/// An oriented 3D box, center + extents + yaw.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Box3D {
    pub x: f64,
    pub y: f64,
    pub z: f64,
    /// Footprint extent along the heading.
    pub w: f64,
    /// Footprint extent across the heading.
    pub h: f64,
    /// Vertical extent.
    pub d: f64,
    pub alpha: f64,
}

impl Box3D {
    pub fn new(x: f64, y: f64, z: f64, w: f64, h: f64, d: f64, alpha: f64) -> Self {
        Box3D {
            x,
            y,
            z,
            w,
            h,
            d,
            alpha: normalize_angle(alpha),
        }
    }

    pub fn center2(&self) -> [f64; 2] {
        [self.x, self.y]
    }

    pub fn volume(&self) -> f64 {
        self.w * self.h * self.d
    }
}

/// An oriented rectangle on the pillar grid, in pixel (pillar) units.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Region2D {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
    pub alpha: f64,
}

impl Region2D {
    pub fn new(x: f64, y: f64, w: f64, h: f64, alpha: f64) -> Self {
        Region2D { x, y, w, h, alpha }
    }
}

/// The working volume and its discretization into square pillars.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridSpec {
    pub x_min: f64,
    pub x_max: f64,
    pub y_min: f64,
    pub y_max: f64,
    pub z_min: f64,
    pub z_max: f64,
    /// Pillar side length in meters.
    pub pillar_size: f64,
}

impl Default for GridSpec {
    fn default() -> Self {
        GridSpec {
            x_min: -40.0,
            x_max: 40.0,
            y_min: -40.0,
            y_max: 40.0,
            z_min: -3.0,
            z_max: 1.0,
            pillar_size: 0.16,
        }
    }
}

impl GridSpec {
    /// Pseudo-image width in pillars (x axis).
    pub fn width(&self) -> usize {
        ((self.x_max - self.x_min) / self.pillar_size).ceil() as usize
    }

    /// Pseudo-image height in pillars (y axis).
    pub fn height(&self) -> usize {
        ((self.y_max - self.y_min) / self.pillar_size).ceil() as usize
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.pillar_size > 0.0) {
            return Err(Error::config(format!(
                "pillar_size must be > 0, got {}",
                self.pillar_size
            )));
        }
        if self.x_max <= self.x_min || self.y_max <= self.y_min || self.z_max <= self.z_min {
            return Err(Error::config("grid extent must be non-empty on every axis"));
        }
        Ok(())
    }
}

/// Wrap an angle into `(-pi, pi]`. Idempotent.
pub fn normalize_angle(alpha: f64) -> f64 {
    let t = alpha.rem_euclid(TAU); // [0, 2pi)
    if t > std::f64::consts::PI {
        t - TAU
    } else {
        t
    }
}

/// Rotate `p` about `center` by `angle` (counter-clockwise).
pub fn rotate_about(p: [f64; 2], center: [f64; 2], angle: f64) -> [f64; 2] {
    let (s, c) = angle.sin_cos();
    let dx = p[0] - center[0];
    let dy = p[1] - center[1];
    [
        center[0] + c * dx - s * dy,
        center[1] + s * dx + c * dy,
    ]
}

/// Corners of the rotated rectangle centered at `(x, y)`, counter-clockwise
/// starting from the corner that sits at `(+w/2, +h/2)` before rotation.
pub fn rotated_rect_corners(x: f64, y: f64, w: f64, h: f64, alpha: f64) -> [[f64; 2]; 4] {
    let hw = w * 0.5;
    let hh = h * 0.5;
    let local = [[hw, hh], [-hw, hh], [-hw, -hh], [hw, -hh]];
    let mut out = [[0.0; 2]; 4];
    for (o, l) in out.iter_mut().zip(local.iter()) {
        *o = rotate_about([x + l[0], y + l[1]], [x, y], alpha);
    }
    out
}

/// Project a box footprint onto the pillar grid: center in pixels, extents
/// in pillars, yaw unchanged. Fails if the footprint misses the grid
/// entirely.
pub fn box_to_region(b: &Box3D, grid: &GridSpec) -> Result<Region2D> {
    let corners = rotated_rect_corners(b.x, b.y, b.w, b.h, b.alpha);
    let (mut lo_x, mut hi_x) = (f64::INFINITY, f64::NEG_INFINITY);
    let (mut lo_y, mut hi_y) = (f64::INFINITY, f64::NEG_INFINITY);
    for c in corners {
        lo_x = lo_x.min(c[0]);
        hi_x = hi_x.max(c[0]);
        lo_y = lo_y.min(c[1]);
        hi_y = hi_y.max(c[1]);
    }
    if hi_x < grid.x_min || lo_x > grid.x_max || hi_y < grid.y_min || lo_y > grid.y_max {
        return Err(Error::OutOfRange(format!(
            "box footprint [{lo_x:.2}, {hi_x:.2}]x[{lo_y:.2}, {hi_y:.2}] misses grid \
             [{}, {}]x[{}, {}]",
            grid.x_min, grid.x_max, grid.y_min, grid.y_max
        )));
    }
    let s = grid.pillar_size;
    Ok(Region2D {
        x: (b.x - grid.x_min) / s,
        y: (b.y - grid.y_min) / s,
        w: b.w / s,
        h: b.h / s,
        alpha: b.alpha,
    })
}

/// Inverse of [`box_to_region`]; the grid carries no vertical placement, so
/// `z` and `d` are supplied by the caller.
pub fn region_to_box(r: &Region2D, grid: &GridSpec, z: f64, d: f64) -> Box3D {
    let s = grid.pillar_size;
    Box3D {
        x: grid.x_min + r.x * s,
        y: grid.y_min + r.y * s,
        z,
        w: r.w * s,
        h: r.h * s,
        d,
        alpha: r.alpha,
    }
}

/// Grow a region by context margin `c`.
///
/// For `c > 0` the region becomes a square with side
/// `sqrt((w + m)(h + m))`, `m = c (w + h)`; for `c <= 0` both sides are
/// scaled by `(1 - c)` (so negative `c` still grows the region, linearly).
pub fn add_context(r: &Region2D, c: f64) -> Region2D {
    if c > 0.0 {
        let m = c * (r.w + r.h);
        let side = ((r.w + m) * (r.h + m)).sqrt();
        Region2D { w: side, h: side, ..*r }
    } else {
        Region2D {
            w: r.w * (1.0 - c),
            h: r.h * (1.0 - c),
            ..*r
        }
    }
}

/// Search region: the target region with both sides scaled by
/// `sigma_search`, same center and yaw.
pub fn make_search(target: &Region2D, sigma_search: f64) -> Region2D {
    Region2D {
        w: target.w * sigma_search,
        h: target.h * sigma_search,
        ..*target
    }
}

/// One object's labeled boxes across a sequence, frame ids strictly
/// increasing.
#[derive(Debug, Clone, PartialEq)]
pub struct Track {
    pub track_id: u64,
    pub object_id: u64,
    pub class: String,
    pub frames: Vec<(usize, Box3D)>,
}

impl Track {
    pub fn validate(&self) -> Result<()> {
        if self.frames.is_empty() {
            return Err(Error::config(format!(
                "track {} has no frames",
                self.track_id
            )));
        }
        for pair in self.frames.windows(2) {
            if pair[1].0 <= pair[0].0 {
                return Err(Error::config(format!(
                    "track {}: frame ids not strictly increasing ({} then {})",
                    self.track_id, pair[0].0, pair[1].0
                )));
            }
        }
        Ok(())
    }

    /// Box at an exact frame id, if labeled there.
    pub fn box_at(&self, frame_id: usize) -> Option<&Box3D> {
        self.frames
            .iter()
            .find(|(f, _)| *f == frame_id)
            .map(|(_, b)| b)
    }
}
