//! Pipeline configuration file.
//!
//! One JSON document whose keys mirror [`PipelineConfig`]. Every key is
//! optional; unknown keys are rejected. Errors name the offending field with
//! its full path, e.g. `scenario.noise.dropout_prob`.
//!
//! ```json
//! {
//!   "fps": 25,
//!   "listen": "127.0.0.1:7878",
//!   "record": "session.ndjson",
//!   "scenario": {
//!     "seed": 42,
//!     "track": {"a": 60, "b": 30},
//!     "car_count": 10,
//!     "noise": {"dropout_prob": 0.05, "max_dropout_run": 5}
//!   },
//!   "tracker": {"confirm_hits": 3, "max_misses": 5, "smoothing_alpha": 0.6, "gate_distance": 150}
//! }
//! ```

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use nalgebra::Point3;
use serde_json::{Map, Value};
use thiserror::Error;

use crate::geometry::{CameraModel, EulerAngles, Pose3};
use crate::overlay::{default_templates, OverlayTemplate};
use crate::protocol::{
    as_object, get_bool, get_f64, get_str, get_u32, get_u64, join, malformed, num, parse_template, ProtocolError,
    DEFAULT_PORT,
};
use crate::scenesim::{CarSpec, NoiseConfig, ScenarioConfig, ScenarioError, TrackEllipse};
use crate::tracker::{TrackerError, TrackerParams};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Read { path: PathBuf, source: std::io::Error },
    #[error("config error: {0}")]
    Parse(#[from] ProtocolError),
    #[error("config error at {path}: {reason}")]
    Invalid { path: String, reason: String },
    #[error("--record and --replay are mutually exclusive")]
    RecordReplayConflict,
}

fn invalid(path: impl Into<String>, reason: impl Into<String>) -> ConfigError {
    ConfigError::Invalid { path: path.into(), reason: reason.into() }
}

impl From<ScenarioError> for ConfigError {
    fn from(e: ScenarioError) -> Self {
        match e {
            ScenarioError::Invalid { path, reason } => ConfigError::Invalid { path, reason },
            other => invalid("scenario", other.to_string()),
        }
    }
}

impl From<TrackerError> for ConfigError {
    fn from(e: TrackerError) -> Self {
        match e {
            TrackerError::InvalidParams { field, reason } => invalid(format!("tracker.{field}"), reason),
            other => invalid("tracker", other.to_string()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    /// `scenario.fps` is kept equal to `fps` when the pipeline starts.
    pub scenario: ScenarioConfig,
    pub tracker: TrackerParams,
    pub listen: String,
    pub fps: f64,
    pub record: Option<PathBuf>,
    pub replay: Option<PathBuf>,
    /// Initial overlay templates; `None` means one default set per driver.
    pub templates: Option<Vec<OverlayTemplate>>,
    /// Timestamps become `round(frame_id * 1e6 / fps)` instead of wall clock.
    pub fixed_clock: bool,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            scenario: ScenarioConfig::with_cars(10, 42),
            tracker: TrackerParams::default(),
            listen: format!("127.0.0.1:{DEFAULT_PORT}"),
            fps: 25.0,
            record: None,
            replay: None,
            templates: None,
            fixed_clock: false,
        }
    }
}

impl PipelineConfig {
    pub fn from_file(path: &Path) -> Result<Self, ConfigError> {
        let text =
            std::fs::read_to_string(path).map_err(|source| ConfigError::Read { path: path.to_owned(), source })?;
        Self::from_json(&text)
    }

    pub fn from_json(text: &str) -> Result<Self, ConfigError> {
        let value: Value = serde_json::from_str(text).map_err(|e| malformed("", e.to_string()))?;
        let config = parse_pipeline(&value)?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.record.is_some() && self.replay.is_some() {
            return Err(ConfigError::RecordReplayConflict);
        }
        if !(self.fps > 0.0 && self.fps.is_finite()) {
            return Err(invalid("fps", "must be > 0"));
        }
        validate_listen(&self.listen)?;
        let mut scenario = self.scenario.clone();
        scenario.fps = self.fps;
        scenario.validate()?;
        self.tracker.validate()?;
        if let Some(templates) = &self.templates {
            let mut ids = BTreeSet::new();
            for (i, t) in templates.iter().enumerate() {
                if !ids.insert(t.template_id) {
                    return Err(invalid(format!("templates[{i}].template_id"), "duplicate template id"));
                }
                if !(t.offset.0.is_finite() && t.offset.1.is_finite()) {
                    return Err(invalid(format!("templates[{i}].offset"), "must be finite"));
                }
            }
        }
        Ok(())
    }

    /// Templates the server starts with.
    pub fn initial_templates(&self) -> Vec<OverlayTemplate> {
        self.templates.clone().unwrap_or_else(|| default_templates(self.scenario.driver_ids()))
    }
}

fn validate_listen(listen: &str) -> Result<(), ConfigError> {
    let ok = listen
        .rsplit_once(':')
        .is_some_and(|(host, port)| !host.is_empty() && port.parse::<u16>().is_ok());
    if ok {
        Ok(())
    } else {
        Err(invalid("listen", format!("expected host:port, got {listen:?}")))
    }
}

/// Value of `key`, treating an explicit `null` like an absent key.
fn opt<'a>(o: &'a Map<String, Value>, key: &str) -> Option<&'a Value> {
    o.get(key).filter(|v| !v.is_null())
}

fn reject_unknown(o: &Map<String, Value>, path: &str, known: &[&str]) -> Result<(), ProtocolError> {
    match o.keys().find(|k| !known.contains(&k.as_str())) {
        Some(k) => Err(malformed(&join(path, k), "unknown field")),
        None => Ok(()),
    }
}

fn opt_f64(o: &Map<String, Value>, path: &str, key: &str, default: f64) -> Result<f64, ProtocolError> {
    match opt(o, key) {
        Some(_) => get_f64(o, path, key),
        None => Ok(default),
    }
}

fn opt_u32(o: &Map<String, Value>, path: &str, key: &str, default: u32) -> Result<u32, ProtocolError> {
    match opt(o, key) {
        Some(_) => get_u32(o, path, key),
        None => Ok(default),
    }
}

fn fixed_array<const N: usize>(o: &Map<String, Value>, path: &str, key: &str) -> Result<[f64; N], ProtocolError> {
    let p = join(path, key);
    let items = opt(o, key)
        .ok_or_else(|| ProtocolError::MissingField(p.clone()))?
        .as_array()
        .ok_or_else(|| malformed(&p, "expected an array"))?;
    if items.len() != N {
        return Err(malformed(&p, format!("expected {N} numbers")));
    }
    let mut out = [0.0; N];
    for (i, v) in items.iter().enumerate() {
        out[i] = num(v, &format!("{p}[{i}]"))?;
    }
    Ok(out)
}

fn parse_pipeline(value: &Value) -> Result<PipelineConfig, ConfigError> {
    let o = as_object(value, "")?;
    reject_unknown(o, "", &["fixed_clock", "fps", "listen", "record", "replay", "scenario", "templates", "tracker"])?;
    let mut config = PipelineConfig::default();
    if let Some(v) = opt(o, "scenario") {
        config.scenario = parse_scenario(v, "scenario")?;
    }
    if let Some(v) = opt(o, "tracker") {
        config.tracker = parse_tracker(v, "tracker")?;
    }
    if opt(o, "listen").is_some() {
        config.listen = get_str(o, "", "listen")?.to_owned();
    }
    config.fps = opt_f64(o, "", "fps", config.fps)?;
    if opt(o, "record").is_some() {
        config.record = Some(PathBuf::from(get_str(o, "", "record")?));
    }
    if opt(o, "replay").is_some() {
        config.replay = Some(PathBuf::from(get_str(o, "", "replay")?));
    }
    if opt(o, "fixed_clock").is_some() {
        config.fixed_clock = get_bool(o, "", "fixed_clock")?;
    }
    if let Some(v) = opt(o, "templates") {
        let items = v.as_array().ok_or_else(|| malformed("templates", "expected an array"))?;
        let templates = items
            .iter()
            .enumerate()
            .map(|(i, t)| parse_template(t, &format!("templates[{i}]")))
            .collect::<Result<Vec<_>, _>>()?;
        config.templates = Some(templates);
    }
    config.scenario.fps = config.fps;
    Ok(config)
}

fn parse_scenario(value: &Value, path: &str) -> Result<ScenarioConfig, ConfigError> {
    let o = as_object(value, path)?;
    reject_unknown(o, path, &["camera", "car_count", "cars", "noise", "seed", "track"])?;
    let seed = match opt(o, "seed") {
        Some(_) => get_u64(o, path, "seed")?,
        None => 42,
    };
    let mut scenario = match (opt(o, "car_count"), opt(o, "cars")) {
        (Some(_), Some(_)) => {
            return Err(invalid(join(path, "cars"), "give either cars or car_count, not both"));
        }
        (Some(_), None) => ScenarioConfig::with_cars(get_u32(o, path, "car_count")? as usize, seed),
        (None, Some(cars)) => {
            let cars_path = join(path, "cars");
            let items = cars.as_array().ok_or_else(|| malformed(&cars_path, "expected an array"))?;
            let mut scenario = ScenarioConfig::with_cars(0, seed);
            for (i, car) in items.iter().enumerate() {
                scenario.cars.push(parse_car(car, &format!("{cars_path}[{i}]"))?);
            }
            scenario
        }
        (None, None) => ScenarioConfig::with_cars(10, seed),
    };
    if let Some(v) = opt(o, "track") {
        let p = join(path, "track");
        let t = as_object(v, &p)?;
        reject_unknown(t, &p, &["a", "b"])?;
        scenario.track = TrackEllipse { a: get_f64(t, &p, "a")?, b: get_f64(t, &p, "b")? };
    }
    if let Some(v) = opt(o, "noise") {
        scenario.noise = parse_noise(v, &join(path, "noise"))?;
    }
    if let Some(v) = opt(o, "camera") {
        scenario.camera = parse_camera(v, &join(path, "camera"))?;
    }
    Ok(scenario)
}

fn parse_car(value: &Value, path: &str) -> Result<CarSpec, ProtocolError> {
    let o = as_object(value, path)?;
    reject_unknown(o, path, &["angular_speed", "driver_id", "height", "length", "phase", "width"])?;
    let mut car = CarSpec::new(get_u32(o, path, "driver_id")?, get_f64(o, path, "angular_speed")?, 0.0);
    car.phase = opt_f64(o, path, "phase", car.phase)?;
    car.length = opt_f64(o, path, "length", car.length)?;
    car.width = opt_f64(o, path, "width", car.width)?;
    car.height = opt_f64(o, path, "height", car.height)?;
    Ok(car)
}

fn parse_noise(value: &Value, path: &str) -> Result<NoiseConfig, ProtocolError> {
    let o = as_object(value, path)?;
    reject_unknown(
        o,
        path,
        &["center_jitter_sigma", "confidence_floor", "dropout_prob", "max_dropout_run", "size_jitter_sigma"],
    )?;
    let d = NoiseConfig::default();
    Ok(NoiseConfig {
        center_jitter_sigma: opt_f64(o, path, "center_jitter_sigma", d.center_jitter_sigma)?,
        size_jitter_sigma: opt_f64(o, path, "size_jitter_sigma", d.size_jitter_sigma)?,
        dropout_prob: opt_f64(o, path, "dropout_prob", d.dropout_prob)?,
        confidence_floor: opt_f64(o, path, "confidence_floor", d.confidence_floor)?,
        max_dropout_run: match opt(o, "max_dropout_run") {
            Some(_) => Some(get_u32(o, path, "max_dropout_run")?),
            None => d.max_dropout_run,
        },
    })
}

fn parse_tracker(value: &Value, path: &str) -> Result<TrackerParams, ProtocolError> {
    let o = as_object(value, path)?;
    reject_unknown(o, path, &["confirm_hits", "gate_distance", "max_misses", "smoothing_alpha"])?;
    let d = TrackerParams::default();
    Ok(TrackerParams {
        confirm_hits: opt_u32(o, path, "confirm_hits", d.confirm_hits)?,
        max_misses: opt_u32(o, path, "max_misses", d.max_misses)?,
        smoothing_alpha: opt_f64(o, path, "smoothing_alpha", d.smoothing_alpha)?,
        gate_distance: opt_f64(o, path, "gate_distance", d.gate_distance)?,
    })
}

/// Angles in radians; every field is required when `camera` is given.
fn parse_camera(value: &Value, path: &str) -> Result<CameraModel, ConfigError> {
    let o = as_object(value, path)?;
    reject_unknown(o, path, &["focal_length", "image_size", "pitch", "position", "principal_point", "roll", "yaw"])?;
    let [x, y, z] = fixed_array::<3>(o, path, "position")?;
    let angles = EulerAngles::new(get_f64(o, path, "yaw")?, get_f64(o, path, "pitch")?, get_f64(o, path, "roll")?)
        .map_err(|e| invalid(path, e.to_string()))?;
    let [cu, cv] = fixed_array::<2>(o, path, "principal_point")?;
    let [w, h] = fixed_array::<2>(o, path, "image_size")?;
    let size_path = join(path, "image_size");
    let dim = |v: f64| -> Result<u32, ConfigError> {
        if v >= 1.0 && v.fract() == 0.0 && v <= u32::MAX as f64 {
            Ok(v as u32)
        } else {
            Err(invalid(&size_path, "expected positive integers"))
        }
    };
    let size = (dim(w)?, dim(h)?);
    CameraModel::new(Pose3::new(Point3::new(x, y, z), angles), get_f64(o, path, "focal_length")?, (cu, cv), size)
        .map_err(|e| invalid(path, e.to_string()))
}
