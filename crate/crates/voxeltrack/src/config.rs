//! One flat `[section] key = value` configuration covering every stage
//! (grid, pillars, network, tracker, training, scene synthesis, eval),
//! with dotted-path overrides and a deterministic text round trip.

use std::path::Path;

use crate::data::SceneConfig;
use crate::error::{Error, Result};
use crate::eval::EvalMode;
use crate::geom::GridSpec;
use crate::nn::conv::FgnConfig;
use crate::pillars::PillarConfig;
use crate::tracker::{PenaltyKind, TrackerConfig};
use crate::train::TrainConfig;

#[derive(Debug, Clone)]
pub struct RawEntry {
    pub line: usize,
    pub key: String,
    pub value: String,
}

#[derive(Debug, Clone)]
pub struct RawSection {
    pub name: String,
    pub line: usize,
    pub entries: Vec<RawEntry>,
}

/// Splits `[section]` blocks of `key = value` lines. `#` starts a
/// comment; blank lines are skipped; keys before any section header are
/// an error. Sections may repeat (the manifest format relies on it).
pub fn parse_sections(text: &str, path: &Path) -> Result<Vec<RawSection>> {
    let mut out: Vec<RawSection> = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let s = raw.split('#').next().unwrap_or("").trim();
        if s.is_empty() {
            continue;
        }
        if let Some(name) = s.strip_prefix('[') {
            let name = name
                .strip_suffix(']')
                .ok_or_else(|| Error::data(path, Some(line), "unterminated section header"))?
                .trim();
            if name.is_empty() {
                return Err(Error::data(path, Some(line), "empty section name"));
            }
            out.push(RawSection {
                name: name.to_string(),
                line,
                entries: Vec::new(),
            });
            continue;
        }
        let (key, value) = s
            .split_once('=')
            .ok_or_else(|| Error::data(path, Some(line), format!("expected `key = value`, got `{s}`")))?;
        let section = out
            .last_mut()
            .ok_or_else(|| Error::data(path, Some(line), "key appears before any [section]"))?;
        section.entries.push(RawEntry {
            line,
            key: key.trim().to_string(),
            value: value.trim().to_string(),
        });
    }
    Ok(out)
}

/// Realtime evaluation settings.
#[derive(Debug, Clone)]
pub struct EvalConfig {
    /// Frame arrival rate, Hz.
    pub rate: f64,
    pub mode: EvalMode,
    /// Injected constant per-frame latency in seconds; `None` charges
    /// measured wall time.
    pub latency: Option<f64>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            rate: 10.0,
            mode: EvalMode::Offline,
            latency: None,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.rate > 0.0) || !self.rate.is_finite() {
            return Err(Error::config(format!(
                "eval rate must be positive, got {}",
                self.rate
            )));
        }
        if let Some(l) = self.latency {
            if !(l >= 0.0) || !l.is_finite() {
                return Err(Error::config(format!(
                    "eval latency must be non-negative, got {l}"
                )));
            }
        }
        Ok(())
    }
}

pub fn parse_mode(s: &str) -> Result<EvalMode> {
    match s {
        "offline" => Ok(EvalMode::Offline),
        "rt-pred" | "realtime-pred" | "realtime-predictive" => {
            Ok(EvalMode::RealtimePredictive)
        }
        "rt-npr" | "realtime-nonpred" | "realtime-nonpredictive" => {
            Ok(EvalMode::RealtimeNonpredictive)
        }
        other => Err(Error::config(format!(
            "unknown eval mode `{other}` (offline, realtime-pred, realtime-nonpred)"
        ))),
    }
}

pub fn mode_str(mode: EvalMode) -> &'static str {
    match mode {
        EvalMode::Offline => "offline",
        EvalMode::RealtimePredictive => "rt-pred",
        EvalMode::RealtimeNonpredictive => "rt-npr",
    }
}

/// Every tunable in one place. Text form lists all keys, so a saved
/// snapshot fully pins a run.
#[derive(Debug, Clone, Default)]
pub struct AppConfig {
    pub grid: GridSpec,
    pub pillars: PillarConfig,
    pub fgn: FgnConfig,
    pub tracker: TrackerConfig,
    pub train: TrainConfig,
    pub scene: SceneConfig,
    pub eval: EvalConfig,
}

pub const KNOWN_KEYS: &[(&str, &[&str])] = &[
    (
        "grid",
        &["x_min", "x_max", "y_min", "y_max", "z_min", "z_max", "pillar_size"],
    ),
    (
        "pillars",
        &["max_points_per_pillar", "max_pillars", "feature_channels"],
    ),
    ("fgn", &["blocks", "layers_per_block", "channels", "first_stride"]),
    (
        "tracker",
        &[
            "context_amount",
            "search_scale",
            "rotations_count",
            "rotation_step",
            "rotation_penalty",
            "rotation_interpolation",
            "window_influence",
            "score_upscale",
            "target_interp_size",
            "search_interp_size",
            "offset_interpolation",
            "feature_merge_scale",
            "extrapolation",
            "penalty_kind",
            "gaussian_sigma_along",
            "gaussian_sigma_cross",
            "hash_sectors",
            "collect_maps",
        ],
    ),
    (
        "train",
        &[
            "steps",
            "lr",
            "label_radius",
            "v_min",
            "v_max",
            "samples_per_object",
            "shift_augment",
            "global_rotation",
            "global_translation",
            "detection_pairs",
            "seed",
            "checkpoint_every",
        ],
    ),
    (
        "scene",
        &[
            "frames",
            "surface_points",
            "clutter_points",
            "distractors",
            "noise_std",
            "speed",
            "turn_rate",
            "object_w",
            "object_h",
            "object_d",
            "z_center",
            "bounds",
            "clearance",
            "seed",
        ],
    ),
    ("eval", &["rate", "mode", "latency"]),
];

fn parse_num<T: std::str::FromStr>(section: &str, key: &str, value: &str) -> Result<T> {
    value.parse().map_err(|_| {
        Error::config(format!(
            "{section}.{key}: cannot parse `{value}` as {}",
            std::any::type_name::<T>()
        ))
    })
}

fn parse_bool(section: &str, key: &str, value: &str) -> Result<bool> {
    match value {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(Error::config(format!(
            "{section}.{key}: expected true or false, got `{value}`"
        ))),
    }
}

impl AppConfig {
    /// Compact preset sized for fast desk-scale experiments: a small
    /// grid, coarse pillars and a narrow network.
    pub fn desk() -> Self {
        let mut cfg = AppConfig::default();
        cfg.grid = GridSpec {
            x_min: -12.8,
            x_max: 12.8,
            y_min: -12.8,
            y_max: 12.8,
            z_min: -2.0,
            z_max: 2.0,
            pillar_size: 0.3,
        };
        cfg.pillars.feature_channels = 8;
        cfg.pillars.max_points_per_pillar = 16;
        cfg.pillars.max_pillars = 4000;
        cfg.fgn.channels = 16;
        cfg.fgn.layers_per_block = 3;
        cfg.train.steps = 2000;
        cfg.train.lr = 3e-4;
        cfg
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "default" => Ok(AppConfig::default()),
            "desk" => Ok(AppConfig::desk()),
            other => Err(Error::config(format!(
                "unknown preset `{other}` (default, desk)"
            ))),
        }
    }

    /// Sets one key. Unknown names come back as `Error::UnknownKey`.
    pub fn apply(&mut self, section: &str, key: &str, value: &str) -> Result<()> {
        let unknown = || Err(Error::UnknownKey(format!("{section}.{key}")));
        match section {
            "grid" => match key {
                "x_min" => self.grid.x_min = parse_num(section, key, value)?,
                "x_max" => self.grid.x_max = parse_num(section, key, value)?,
                "y_min" => self.grid.y_min = parse_num(section, key, value)?,
                "y_max" => self.grid.y_max = parse_num(section, key, value)?,
                "z_min" => self.grid.z_min = parse_num(section, key, value)?,
                "z_max" => self.grid.z_max = parse_num(section, key, value)?,
                "pillar_size" => self.grid.pillar_size = parse_num(section, key, value)?,
                _ => return unknown(),
            },
            "pillars" => match key {
                "max_points_per_pillar" => {
                    self.pillars.max_points_per_pillar = parse_num(section, key, value)?
                }
                "max_pillars" => self.pillars.max_pillars = parse_num(section, key, value)?,
                "feature_channels" => {
                    self.pillars.feature_channels = parse_num(section, key, value)?
                }
                _ => return unknown(),
            },
            "fgn" => match key {
                "blocks" => self.fgn.blocks = parse_num(section, key, value)?,
                "layers_per_block" => self.fgn.layers_per_block = parse_num(section, key, value)?,
                "channels" => self.fgn.channels = parse_num(section, key, value)?,
                "first_stride" => self.fgn.first_stride = parse_num(section, key, value)?,
                _ => return unknown(),
            },
            "tracker" => match key {
                "context_amount" => self.tracker.context_amount = parse_num(section, key, value)?,
                "search_scale" => self.tracker.search_scale = parse_num(section, key, value)?,
                "rotations_count" => self.tracker.rotations_count = parse_num(section, key, value)?,
                "rotation_step" => self.tracker.rotation_step = parse_num(section, key, value)?,
                "rotation_penalty" => {
                    self.tracker.rotation_penalty = parse_num(section, key, value)?
                }
                "rotation_interpolation" => {
                    self.tracker.rotation_interpolation = parse_num(section, key, value)?
                }
                "window_influence" => {
                    self.tracker.window_influence = parse_num(section, key, value)?
                }
                "score_upscale" => self.tracker.score_upscale = parse_num(section, key, value)?,
                "target_interp_size" => {
                    self.tracker.target_interp_size = parse_num(section, key, value)?
                }
                "search_interp_size" => {
                    self.tracker.search_interp_size = parse_num(section, key, value)?
                }
                "offset_interpolation" => {
                    self.tracker.offset_interpolation = parse_num(section, key, value)?
                }
                "feature_merge_scale" => {
                    self.tracker.feature_merge_scale = parse_num(section, key, value)?
                }
                "extrapolation" => self.tracker.extrapolation = parse_bool(section, key, value)?,
                "penalty_kind" => {
                    self.tracker.penalty_kind = match value {
                        "hann" => PenaltyKind::Hann,
                        "gaussian" => PenaltyKind::DirectionalGaussian,
                        _ => {
                            return Err(Error::config(format!(
                                "tracker.penalty_kind: expected hann or gaussian, got `{value}`"
                            )))
                        }
                    }
                }
                "gaussian_sigma_along" => {
                    self.tracker.gaussian_sigma_along = parse_num(section, key, value)?
                }
                "gaussian_sigma_cross" => {
                    self.tracker.gaussian_sigma_cross = parse_num(section, key, value)?
                }
                "hash_sectors" => self.tracker.hash_sectors = parse_num(section, key, value)?,
                "collect_maps" => self.tracker.collect_maps = parse_bool(section, key, value)?,
                _ => return unknown(),
            },
            "train" => match key {
                "steps" => self.train.steps = parse_num(section, key, value)?,
                "lr" => self.train.lr = parse_num(section, key, value)?,
                "label_radius" => self.train.label_radius = parse_num(section, key, value)?,
                "v_min" => self.train.v_min = parse_num(section, key, value)?,
                "v_max" => self.train.v_max = parse_num(section, key, value)?,
                "samples_per_object" => {
                    self.train.samples_per_object = parse_num(section, key, value)?
                }
                "shift_augment" => self.train.shift_augment = parse_bool(section, key, value)?,
                "global_rotation" => self.train.global_rotation = parse_num(section, key, value)?,
                "global_translation" => {
                    self.train.global_translation = parse_num(section, key, value)?
                }
                "detection_pairs" => self.train.detection_pairs = parse_bool(section, key, value)?,
                "seed" => self.train.seed = parse_num(section, key, value)?,
                "checkpoint_every" => self.train.checkpoint_every = parse_num(section, key, value)?,
                _ => return unknown(),
            },
            "scene" => match key {
                "frames" => self.scene.frames = parse_num(section, key, value)?,
                "surface_points" => self.scene.surface_points = parse_num(section, key, value)?,
                "clutter_points" => self.scene.clutter_points = parse_num(section, key, value)?,
                "distractors" => self.scene.distractors = parse_num(section, key, value)?,
                "noise_std" => self.scene.noise_std = parse_num(section, key, value)?,
                "speed" => self.scene.speed = parse_num(section, key, value)?,
                "turn_rate" => self.scene.turn_rate = parse_num(section, key, value)?,
                "object_w" => self.scene.object_w = parse_num(section, key, value)?,
                "object_h" => self.scene.object_h = parse_num(section, key, value)?,
                "object_d" => self.scene.object_d = parse_num(section, key, value)?,
                "z_center" => self.scene.z_center = parse_num(section, key, value)?,
                "bounds" => self.scene.bounds = parse_num(section, key, value)?,
                "clearance" => self.scene.clearance = parse_num(section, key, value)?,
                "seed" => self.scene.seed = parse_num(section, key, value)?,
                _ => return unknown(),
            },
            "eval" => match key {
                "rate" => self.eval.rate = parse_num(section, key, value)?,
                "mode" => self.eval.mode = parse_mode(value)?,
                "latency" => {
                    self.eval.latency = if value == "measured" {
                        None
                    } else {
                        Some(parse_num(section, key, value)?)
                    }
                }
                _ => return unknown(),
            },
            _ => return Err(Error::UnknownKey(format!("{section} (section)"))),
        }
        Ok(())
    }

    /// Applies a `section.key=value` override as given on a command line.
    pub fn apply_override(&mut self, spec: &str) -> Result<()> {
        let (path, value) = spec.split_once('=').ok_or_else(|| {
            Error::config(format!("override `{spec}` is not of the form section.key=value"))
        })?;
        let (section, key) = path.trim().split_once('.').ok_or_else(|| {
            Error::config(format!("override key `{path}` is not of the form section.key"))
        })?;
        self.apply(section.trim(), key.trim(), value.trim())
    }

    /// Applies a whole config file on top of the current values.
    pub fn apply_text(&mut self, text: &str, path: &Path) -> Result<()> {
        for section in parse_sections(text, path)? {
            for e in &section.entries {
                self.apply(&section.name, &e.key, &e.value).map_err(|err| match err {
                    Error::UnknownKey(k) => Error::UnknownKey(format!("{k} at {}:{}", path.display(), e.line)),
                    Error::Config(m) => Error::config(format!("{}:{}: {m}", path.display(), e.line)),
                    other => other,
                })?;
            }
        }
        Ok(())
    }

    pub fn load_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        self.apply_text(&text, path)
    }

    pub fn validate(&self) -> Result<()> {
        self.grid.validate()?;
        self.pillars.validate()?;
        self.tracker.validate()?;
        self.train.validate()?;
        self.scene.validate()?;
        self.eval.validate()?;
        if self.fgn.blocks == 0 || self.fgn.layers_per_block == 0 || self.fgn.channels == 0 {
            return Err(Error::config("fgn needs at least one block, layer and channel"));
        }
        if self.fgn.first_stride == 0 {
            return Err(Error::config("fgn.first_stride must be at least 1"));
        }
        Ok(())
    }

    /// Full dump; parses back to an identical config.
    pub fn to_text(&self) -> String {
        let g = &self.grid;
        let p = &self.pillars;
        let f = &self.fgn;
        let t = &self.tracker;
        let tr = &self.train;
        let s = &self.scene;
        let e = &self.eval;
        let mut out = String::new();
        let mut push = |line: String| {
            out.push_str(&line);
            out.push('\n');
        };
        push("[grid]".into());
        push(format!("x_min = {}", g.x_min));
        push(format!("x_max = {}", g.x_max));
        push(format!("y_min = {}", g.y_min));
        push(format!("y_max = {}", g.y_max));
        push(format!("z_min = {}", g.z_min));
        push(format!("z_max = {}", g.z_max));
        push(format!("pillar_size = {}", g.pillar_size));
        push("\n[pillars]".into());
        push(format!("max_points_per_pillar = {}", p.max_points_per_pillar));
        push(format!("max_pillars = {}", p.max_pillars));
        push(format!("feature_channels = {}", p.feature_channels));
        push("\n[fgn]".into());
        push(format!("blocks = {}", f.blocks));
        push(format!("layers_per_block = {}", f.layers_per_block));
        push(format!("channels = {}", f.channels));
        push(format!("first_stride = {}", f.first_stride));
        push("\n[tracker]".into());
        push(format!("context_amount = {}", t.context_amount));
        push(format!("search_scale = {}", t.search_scale));
        push(format!("rotations_count = {}", t.rotations_count));
        push(format!("rotation_step = {}", t.rotation_step));
        push(format!("rotation_penalty = {}", t.rotation_penalty));
        push(format!("rotation_interpolation = {}", t.rotation_interpolation));
        push(format!("window_influence = {}", t.window_influence));
        push(format!("score_upscale = {}", t.score_upscale));
        push(format!("target_interp_size = {}", t.target_interp_size));
        push(format!("search_interp_size = {}", t.search_interp_size));
        push(format!("offset_interpolation = {}", t.offset_interpolation));
        push(format!("feature_merge_scale = {}", t.feature_merge_scale));
        push(format!("extrapolation = {}", t.extrapolation));
        push(format!(
            "penalty_kind = {}",
            match t.penalty_kind {
                PenaltyKind::Hann => "hann",
                PenaltyKind::DirectionalGaussian => "gaussian",
            }
        ));
        push(format!("gaussian_sigma_along = {}", t.gaussian_sigma_along));
        push(format!("gaussian_sigma_cross = {}", t.gaussian_sigma_cross));
        push(format!("hash_sectors = {}", t.hash_sectors));
        push(format!("collect_maps = {}", t.collect_maps));
        push("\n[train]".into());
        push(format!("steps = {}", tr.steps));
        push(format!("lr = {}", tr.lr));
        push(format!("label_radius = {}", tr.label_radius));
        push(format!("v_min = {}", tr.v_min));
        push(format!("v_max = {}", tr.v_max));
        push(format!("samples_per_object = {}", tr.samples_per_object));
        push(format!("shift_augment = {}", tr.shift_augment));
        push(format!("global_rotation = {}", tr.global_rotation));
        push(format!("global_translation = {}", tr.global_translation));
        push(format!("detection_pairs = {}", tr.detection_pairs));
        push(format!("seed = {}", tr.seed));
        push(format!("checkpoint_every = {}", tr.checkpoint_every));
        push("\n[scene]".into());
        push(format!("frames = {}", s.frames));
        push(format!("surface_points = {}", s.surface_points));
        push(format!("clutter_points = {}", s.clutter_points));
        push(format!("distractors = {}", s.distractors));
        push(format!("noise_std = {}", s.noise_std));
        push(format!("speed = {}", s.speed));
        push(format!("turn_rate = {}", s.turn_rate));
        push(format!("object_w = {}", s.object_w));
        push(format!("object_h = {}", s.object_h));
        push(format!("object_d = {}", s.object_d));
        push(format!("z_center = {}", s.z_center));
        push(format!("bounds = {}", s.bounds));
        push(format!("clearance = {}", s.clearance));
        push(format!("seed = {}", s.seed));
        push("\n[eval]".into());
        push(format!("rate = {}", e.rate));
        push(format!("mode = {}", mode_str(e.mode)));
        push(format!(
            "latency = {}",
            e.latency.map(|l| l.to_string()).unwrap_or_else(|| "measured".into())
        ));
        out
    }
}

/// Reproducibility snapshot written next to every command's outputs.
/// Contains no timestamps so identical runs produce identical bytes.
pub fn run_meta(command: &str, cfg: &AppConfig, notes: &[(String, String)]) -> String {
    let mut out = String::new();
    out.push_str(&format!("tool = voxeltrack {}\n", env!("CARGO_PKG_VERSION")));
    out.push_str(&format!("command = {command}\n"));
    for (k, v) in notes {
        out.push_str(&format!("{k} = {v}\n"));
    }
    out.push('\n');
    out.push_str(&cfg.to_text());
    out
}
