//! Synthetic lidar scenes and the on-disk formats: point-cloud binaries,
//! tracking label files, sequence manifests and result tables.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::parse_sections;
use crate::error::{Error, Result};
use crate::eval::EvalSequence;
use crate::geom::{rotate_about, Box3D, Track};
use crate::nn::conv::gauss;
use crate::pillars::PointCloud;
use crate::train::TrackedSequence;

/// Settings for one synthetic scene: a single moving box scanned from a
/// sensor at the origin, plus static distractor boxes and loose clutter.
#[derive(Debug, Clone)]
pub struct SceneConfig {
    pub frames: usize,
    /// Lidar returns per box per frame.
    pub surface_points: usize,
    /// Background points per frame.
    pub clutter_points: usize,
    /// Static boxes that look like the target.
    pub distractors: usize,
    /// Per-coordinate Gaussian noise on returns, meters.
    pub noise_std: f64,
    /// Target speed, meters per frame.
    pub speed: f64,
    /// Target heading change, radians per frame.
    pub turn_rate: f64,
    pub object_w: f64,
    pub object_h: f64,
    pub object_d: f64,
    pub z_center: f64,
    /// Half-extent of the square arena everything stays inside.
    pub bounds: f64,
    /// Minimum distance between distractor centers and the trajectory.
    pub clearance: f64,
    pub seed: u64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            frames: 40,
            surface_points: 220,
            clutter_points: 160,
            distractors: 2,
            noise_std: 0.02,
            speed: 0.12,
            turn_rate: 0.0,
            object_w: 3.0,
            object_h: 2.0,
            object_d: 1.5,
            z_center: 0.0,
            bounds: 9.0,
            clearance: 2.5,
            seed: 1,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.frames == 0 {
            return Err(Error::config("scene needs at least one frame"));
        }
        if self.surface_points == 0 {
            return Err(Error::config("scene needs at least one surface point"));
        }
        if !(self.object_w > 0.0 && self.object_h > 0.0 && self.object_d > 0.0) {
            return Err(Error::config("object dimensions must be positive"));
        }
        if !(self.bounds > 0.0) {
            return Err(Error::config("bounds must be positive"));
        }
        for (name, v) in [
            ("noise_std", self.noise_std),
            ("speed", self.speed),
            ("clearance", self.clearance),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::config(format!(
                    "{name} must be non-negative, got {v}"
                )));
            }
        }
        Ok(())
    }
}

/// A generated scene. Each cloud stores the target surface first, then
/// distractor surfaces, then clutter.
#[derive(Debug, Clone)]
pub struct GeneratedScene {
    pub clouds: Vec<Arc<PointCloud>>,
    pub track: Track,
    pub distractors: Vec<Box3D>,
}

impl GeneratedScene {
    pub fn eval_sequence(&self, name: &str) -> EvalSequence {
        EvalSequence {
            name: name.to_string(),
            clouds: self.clouds.clone(),
            gt: self.track.frames.iter().map(|(_, b)| *b).collect(),
        }
    }

    pub fn tracked_sequence(&self) -> TrackedSequence {
        TrackedSequence {
            clouds: self.clouds.clone(),
            tracks: vec![self.track.clone()],
        }
    }
}

/// One lidar-style return on a vertical side face of the box, rejected
/// unless the face's outward normal points back at the sensor (origin).
/// Matches what a scanner sees: one or two faces, never the far side.
fn sample_box_surface(b: &Box3D, noise: f64, rng: &mut ChaCha8Rng) -> [f64; 4] {
    // (local outward normal, fixed local axis value, free-axis half length)
    let faces = [
        ([1.0, 0.0], b.w / 2.0, b.h / 2.0),
        ([-1.0, 0.0], -b.w / 2.0, b.h / 2.0),
        ([0.0, 1.0], b.h / 2.0, b.w / 2.0),
        ([0.0, -1.0], -b.h / 2.0, b.w / 2.0),
    ];
    let total = 2.0 * (b.w + b.h);
    let mut chosen = faces[0];
    for attempt in 0..64 {
        // Pick a face proportional to its length.
        let mut u = rng.gen_range(0.0..total);
        for f in faces {
            let len = 2.0 * f.2;
            if u < len {
                chosen = f;
                break;
            }
            u -= len;
        }
        let (n, fixed, half) = chosen;
        let free = rng.gen_range(-half..half);
        let local = if n[0] != 0.0 { [fixed, free] } else { [free, fixed] };
        let p = rotate_about(
            [b.x + local[0], b.y + local[1]],
            [b.x, b.y],
            b.alpha,
        );
        let ng = rotate_about(n, [0.0, 0.0], b.alpha);
        if ng[0] * p[0] + ng[1] * p[1] < 0.0 || attempt == 63 {
            let z = b.z + rng.gen_range(-b.d / 2.0..b.d / 2.0);
            return [
                p[0] + noise * gauss(rng),
                p[1] + noise * gauss(rng),
                z + noise * gauss(rng),
                rng.gen_range(0.1..1.0),
            ];
        }
    }
    unreachable!("attempt 63 always returns");
}

fn inside_footprint(p: [f64; 2], b: &Box3D, inflate: f64) -> bool {
    let q = rotate_about(p, [b.x, b.y], -b.alpha);
    (q[0] - b.x).abs() <= b.w / 2.0 + inflate && (q[1] - b.y).abs() <= b.h / 2.0 + inflate
}

fn trajectory(cfg: &SceneConfig, rng: &mut ChaCha8Rng) -> Result<Vec<Box3D>> {
    let margin = 1.0 + cfg.object_w.max(cfg.object_h) / 2.0;
    let lim = cfg.bounds - margin;
    if lim <= 0.0 {
        return Err(Error::config(
            "bounds too small for the object size".to_string(),
        ));
    }
    'outer: for _ in 0..200 {
        let mut x = rng.gen_range(-lim..lim);
        let mut y = rng.gen_range(-lim..lim);
        let mut heading = rng.gen_range(-std::f64::consts::PI..std::f64::consts::PI);
        let mut out = Vec::with_capacity(cfg.frames);
        for _ in 0..cfg.frames {
            if x.abs() > lim || y.abs() > lim {
                continue 'outer;
            }
            out.push(Box3D::new(
                x,
                y,
                cfg.z_center,
                cfg.object_w,
                cfg.object_h,
                cfg.object_d,
                heading,
            ));
            x += cfg.speed * heading.cos();
            y += cfg.speed * heading.sin();
            heading += cfg.turn_rate;
        }
        return Ok(out);
    }
    Err(Error::config(
        "could not fit a trajectory inside the bounds; lower speed or frames".to_string(),
    ))
}

fn place_distractors(
    cfg: &SceneConfig,
    traj: &[Box3D],
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Box3D>> {
    let mut out: Vec<Box3D> = Vec::with_capacity(cfg.distractors);
    for _ in 0..cfg.distractors {
        let mut placed = false;
        for _ in 0..200 {
            let b = Box3D::new(
                rng.gen_range(-cfg.bounds..cfg.bounds),
                rng.gen_range(-cfg.bounds..cfg.bounds),
                cfg.z_center,
                cfg.object_w * rng.gen_range(0.8..1.2),
                cfg.object_h * rng.gen_range(0.8..1.2),
                cfg.object_d,
                rng.gen_range(-std::f64::consts::PI..std::f64::consts::PI),
            );
            let near_traj = traj
                .iter()
                .any(|t| (t.x - b.x).hypot(t.y - b.y) < cfg.clearance);
            let near_other = out
                .iter()
                .any(|o| (o.x - b.x).hypot(o.y - b.y) < cfg.clearance);
            if !near_traj && !near_other {
                out.push(b);
                placed = true;
                break;
            }
        }
        if !placed {
            return Err(Error::config(
                "could not place distractors; lower their count or clearance".to_string(),
            ));
        }
    }
    Ok(out)
}

/// Builds the whole scene deterministically from the seed.
pub fn generate_scene(cfg: &SceneConfig) -> Result<GeneratedScene> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let traj = trajectory(cfg, &mut rng)?;
    let distractors = place_distractors(cfg, &traj, &mut rng)?;
    let mut clouds = Vec::with_capacity(cfg.frames);
    for target in &traj {
        let mut pts = Vec::new();
        for _ in 0..cfg.surface_points {
            pts.push(sample_box_surface(target, cfg.noise_std, &mut rng));
        }
        for d in &distractors {
            for _ in 0..cfg.surface_points {
                pts.push(sample_box_surface(d, cfg.noise_std, &mut rng));
            }
        }
        let mut boxes: Vec<&Box3D> = vec![target];
        boxes.extend(distractors.iter());
        for _ in 0..cfg.clutter_points {
            for _ in 0..32 {
                let p = [
                    rng.gen_range(-cfg.bounds..cfg.bounds),
                    rng.gen_range(-cfg.bounds..cfg.bounds),
                ];
                if boxes.iter().all(|b| !inside_footprint(p, b, 0.1)) {
                    pts.push([
                        p[0],
                        p[1],
                        cfg.z_center + rng.gen_range(-cfg.object_d..cfg.object_d),
                        rng.gen_range(0.1..1.0),
                    ]);
                    break;
                }
            }
        }
        clouds.push(Arc::new(PointCloud::new(pts)));
    }
    let track = Track {
        track_id: 0,
        object_id: 0,
        class: "Car".to_string(),
        frames: traj.into_iter().enumerate().collect(),
    };
    Ok(GeneratedScene {
        clouds,
        track,
        distractors,
    })
}

/// Reads an x/y/z/intensity float32 binary (16 bytes per point).
pub fn read_velodyne(path: &Path) -> Result<PointCloud> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() % 16 != 0 {
        return Err(Error::data(
            path,
            None,
            format!("{} bytes is not a multiple of 16", bytes.len()),
        ));
    }
    let points = bytes
        .chunks_exact(16)
        .map(|c| {
            let f = |i: usize| f32::from_le_bytes(c[i * 4..i * 4 + 4].try_into().unwrap()) as f64;
            [f(0), f(1), f(2), f(3)]
        })
        .collect();
    Ok(PointCloud::new(points))
}

pub fn write_velodyne(path: &Path, cloud: &PointCloud) -> Result<()> {
    let mut bytes = Vec::with_capacity(cloud.points.len() * 16);
    for p in &cloud.points {
        for v in p {
            bytes.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

const LABEL_COLUMNS: usize = 17;

/// Parses a tracking label file: one line per object per frame with
/// columns `frame track class truncated occluded obs_angle bbox(4)
/// dims(3: height width length) location(3: x y bottom-z) yaw`.
/// Locations share the point-cloud frame; height becomes the box's
/// vertical extent and the stored center is lifted by half of it.
/// `DontCare` lines are skipped, as is any class not matching `filter`.
pub fn read_tracking_labels(path: &Path, filter: Option<&str>) -> Result<Vec<Track>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut by_id: BTreeMap<u64, Track> = BTreeMap::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let s = raw.trim();
        if s.is_empty() {
            continue;
        }
        let cols: Vec<&str> = s.split_whitespace().collect();
        if cols.len() != LABEL_COLUMNS {
            return Err(Error::data(
                path,
                Some(line),
                format!("expected {LABEL_COLUMNS} columns, found {}", cols.len()),
            ));
        }
        let class = cols[2];
        if class == "DontCare" {
            continue;
        }
        if let Some(f) = filter {
            if class != f {
                continue;
            }
        }
        let num = |i: usize| -> Result<f64> {
            cols[i].parse().map_err(|_| {
                Error::data(
                    path,
                    Some(line),
                    format!("column {}: `{}` is not a number", i + 1, cols[i]),
                )
            })
        };
        let frame: usize = cols[0].parse().map_err(|_| {
            Error::data(path, Some(line), format!("bad frame id `{}`", cols[0]))
        })?;
        let track_id: i64 = cols[1].parse().map_err(|_| {
            Error::data(path, Some(line), format!("bad track id `{}`", cols[1]))
        })?;
        if track_id < 0 {
            return Err(Error::data(
                path,
                Some(line),
                format!("negative track id {track_id} on a kept class"),
            ));
        }
        // Validate the unused numeric columns too, so corrupt files fail.
        for i in 3..10 {
            num(i)?;
        }
        let (height, width, length) = (num(10)?, num(11)?, num(12)?);
        if !(height > 0.0 && width > 0.0 && length > 0.0) {
            return Err(Error::data(path, Some(line), "non-positive box dimensions"));
        }
        let (x, y, bottom_z) = (num(13)?, num(14)?, num(15)?);
        let yaw = num(16)?;
        let b = Box3D::new(x, y, bottom_z + height / 2.0, length, width, height, yaw);
        let track = by_id.entry(track_id as u64).or_insert_with(|| Track {
            track_id: track_id as u64,
            object_id: 0,
            class: class.to_string(),
            frames: Vec::new(),
        });
        if track.frames.iter().any(|(f, _)| *f == frame) {
            return Err(Error::data(
                path,
                Some(line),
                format!("track {track_id} appears twice in frame {frame}"),
            ));
        }
        track.frames.push((frame, b));
    }
    let mut out: Vec<Track> = by_id.into_values().collect();
    for (i, t) in out.iter_mut().enumerate() {
        t.object_id = i as u64;
        t.frames.sort_by_key(|(f, _)| *f);
        t.validate()?;
    }
    Ok(out)
}

pub fn write_tracking_labels(path: &Path, tracks: &[Track]) -> Result<()> {
    let mut rows: Vec<(usize, u64, &str, &Box3D)> = Vec::new();
    for t in tracks {
        for (f, b) in &t.frames {
            rows.push((*f, t.track_id, &t.class, b));
        }
    }
    rows.sort_by_key(|(f, id, _, _)| (*f, *id));
    let mut out = String::new();
    for (frame, id, class, b) in rows {
        out.push_str(&format!(
            "{frame} {id} {class} 0 0 0 -1 -1 -1 -1 {} {} {} {} {} {} {}\n",
            b.d,
            b.h,
            b.w,
            b.x,
            b.y,
            b.z - b.d / 2.0,
            b.alpha,
        ));
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// One sequence in a dataset manifest; paths are relative to the
/// manifest's directory.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SequenceEntry {
    pub name: String,
    pub labels: PathBuf,
    pub clouds: PathBuf,
    pub frames: usize,
}

/// Reads a manifest made of repeated `[sequence]` blocks with keys
/// `name`, `labels`, `clouds` and `frames`.
pub fn read_manifest(path: &Path) -> Result<Vec<SequenceEntry>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out: Vec<SequenceEntry> = Vec::new();
    for section in parse_sections(&text, path)? {
        if section.name != "sequence" {
            return Err(Error::data(
                path,
                Some(section.line),
                format!("unknown section `{}` (only [sequence])", section.name),
            ));
        }
        let (mut name, mut labels, mut clouds, mut frames) = (None, None, None, None);
        for e in &section.entries {
            match e.key.as_str() {
                "name" => name = Some(e.value.clone()),
                "labels" => labels = Some(PathBuf::from(&e.value)),
                "clouds" => clouds = Some(PathBuf::from(&e.value)),
                "frames" => {
                    frames = Some(e.value.parse::<usize>().map_err(|_| {
                        Error::data(path, Some(e.line), format!("bad frame count `{}`", e.value))
                    })?)
                }
                other => {
                    return Err(Error::data(
                        path,
                        Some(e.line),
                        format!("unknown manifest key `{other}`"),
                    ))
                }
            }
        }
        let missing = |what: &str| Error::data(path, Some(section.line), format!("sequence is missing `{what}`"));
        let entry = SequenceEntry {
            name: name.ok_or_else(|| missing("name"))?,
            labels: labels.ok_or_else(|| missing("labels"))?,
            clouds: clouds.ok_or_else(|| missing("clouds"))?,
            frames: frames.ok_or_else(|| missing("frames"))?,
        };
        if out.iter().any(|e| e.name == entry.name) {
            return Err(Error::data(
                path,
                Some(section.line),
                format!("duplicate sequence name `{}`", entry.name),
            ));
        }
        out.push(entry);
    }
    Ok(out)
}

pub fn write_manifest(path: &Path, entries: &[SequenceEntry]) -> Result<()> {
    let mut out = String::new();
    for e in entries {
        out.push_str(&format!(
            "[sequence]\nname = {}\nlabels = {}\nclouds = {}\nframes = {}\n\n",
            e.name,
            e.labels.display(),
            e.clouds.display(),
            e.frames
        ));
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

fn cloud_file(dir: &Path, frame: usize) -> PathBuf {
    dir.join(format!("{frame:06}.bin"))
}

/// Loads one manifest entry: all frames plus its tracks.
pub fn load_sequence(
    manifest_path: &Path,
    entry: &SequenceEntry,
) -> Result<(Vec<Arc<PointCloud>>, Vec<Track>)> {
    let base = manifest_path.parent().unwrap_or_else(|| Path::new("."));
    let cloud_dir = base.join(&entry.clouds);
    let mut clouds = Vec::with_capacity(entry.frames);
    for f in 0..entry.frames {
        clouds.push(Arc::new(read_velodyne(&cloud_file(&cloud_dir, f))?));
    }
    let tracks = read_tracking_labels(&base.join(&entry.labels), None)?;
    Ok((clouds, tracks))
}

/// Writes one sequence under `base/<name>/` and returns its manifest
/// entry (paths relative to `base`).
pub fn save_sequence(
    base: &Path,
    name: &str,
    clouds: &[Arc<PointCloud>],
    tracks: &[Track],
) -> Result<SequenceEntry> {
    let dir = base.join(name);
    let cloud_dir = dir.join("velodyne");
    fs::create_dir_all(&cloud_dir).map_err(|e| Error::io(&cloud_dir, e))?;
    for (f, c) in clouds.iter().enumerate() {
        write_velodyne(&cloud_file(&cloud_dir, f), c)?;
    }
    let labels = dir.join("labels.txt");
    write_tracking_labels(&labels, tracks)?;
    Ok(SequenceEntry {
        name: name.to_string(),
        labels: PathBuf::from(name).join("labels.txt"),
        clouds: PathBuf::from(name).join("velodyne"),
        frames: clouds.len(),
    })
}

/// Builds the single-object evaluation view of a loaded sequence.
pub fn eval_sequence_from_parts(
    name: &str,
    clouds: Vec<Arc<PointCloud>>,
    tracks: &[Track],
) -> Result<EvalSequence> {
    if tracks.len() != 1 {
        return Err(Error::config(format!(
            "sequence `{name}` needs exactly one track for single-object evaluation, found {}",
            tracks.len()
        )));
    }
    let track = &tracks[0];
    if track.frames.len() != clouds.len()
        || track.frames.iter().enumerate().any(|(i, (f, _))| *f != i)
    {
        return Err(Error::config(format!(
            "sequence `{name}`: track must cover frames 0..{} contiguously",
            clouds.len()
        )));
    }
    Ok(EvalSequence {
        name: name.to_string(),
        clouds,
        gt: track.frames.iter().map(|(_, b)| *b).collect(),
    })
}

/// Writes `key = value` lines (result summaries, loss curves).
pub fn write_kv(path: &Path, pairs: &[(String, String)]) -> Result<()> {
    let mut out = String::new();
    for (k, v) in pairs {
        out.push_str(&format!("{k} = {v}\n"));
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn read_kv(path: &Path) -> Result<Vec<(String, String)>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let s = raw.trim();
        if s.is_empty() || s.starts_with('#') {
            continue;
        }
        let (k, v) = s.split_once('=').ok_or_else(|| {
            Error::data(path, Some(idx + 1), format!("expected `key = value`, got `{s}`"))
        })?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

/// Per-frame evaluation output: the scored prediction and its errors.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameRecord {
    pub seq: String,
    pub frame: usize,
    pub pred: Box3D,
    pub iou: f64,
    pub dist: f64,
}

pub fn write_frame_records(path: &Path, records: &[FrameRecord]) -> Result<()> {
    let mut out = String::from("# seq frame x y z w h d alpha iou dist\n");
    for r in records {
        let b = &r.pred;
        out.push_str(&format!(
            "{} {} {} {} {} {} {} {} {} {} {}\n",
            r.seq, r.frame, b.x, b.y, b.z, b.w, b.h, b.d, b.alpha, r.iou, r.dist
        ));
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn read_frame_records(path: &Path) -> Result<Vec<FrameRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let s = raw.trim();
        if s.is_empty() || s.starts_with('#') {
            continue;
        }
        let cols: Vec<&str> = s.split_whitespace().collect();
        if cols.len() != 11 {
            return Err(Error::data(
                path,
                Some(line),
                format!("expected 11 columns, found {}", cols.len()),
            ));
        }
        let num = |i: usize| -> Result<f64> {
            cols[i].parse().map_err(|_| {
                Error::data(path, Some(line), format!("column {}: bad number `{}`", i + 1, cols[i]))
            })
        };
        out.push(FrameRecord {
            seq: cols[0].to_string(),
            frame: cols[1].parse().map_err(|_| {
                Error::data(path, Some(line), format!("bad frame id `{}`", cols[1]))
            })?,
            pred: Box3D::new(
                num(2)?,
                num(3)?,
                num(4)?,
                num(5)?,
                num(6)?,
                num(7)?,
                num(8)?,
            ),
            iou: num(9)?,
            dist: num(10)?,
        });
    }
    Ok(out)
}
