//! Deterministic synthetic race scenes.
//!
//! Cars circle a planar ellipse in front of a fixed pinhole camera. Ground
//! truth is the projected hull box of every visible car; a seeded noise model
//! turns ground truth into detector-like output with jitter and dropouts.
//!
//! # Draw order
//!
//! [`corrupt_detections`] visits cars in ascending `driver_id` and, per car:
//!
//! 1. one uniform `u_drop`; the car is dropped when `u_drop < dropout_prob`
//!    (unless the car has already been dropped `max_dropout_run` frames in a
//!    row, in which case it is kept; the draw is consumed either way).
//!    A dropped car consumes nothing further.
//! 2. one polar Gaussian pair `(gx, gy)`: the box center moves by
//!    `center_jitter_sigma * (gx, gy)`.
//! 3. one polar Gaussian pair `(gw, gh)`: width and height are scaled by
//!    `1 + size_jitter_sigma * gw` and `1 + size_jitter_sigma * gh`, then
//!    clamped to at least 1 px.
//! 4. one uniform `u_conf`: `confidence = floor + (1 - floor) * u_conf`.
//!
//! Uniforms are `(next_u64 >> 11) * 2^-53`; see [`SplitMix64`].

mod rng;

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use nalgebra::Point3;
use thiserror::Error;

use crate::geometry::{
    observation_yaw, project_cuboid, BBox, CameraModel, CuboidHull, EulerAngles, GeometryError, Pose3,
};
use crate::priors::{assign_priors, PriorSet};
use crate::protocol::{encode, DatasetRecord, Message, ProtocolError};

pub use rng::SplitMix64;

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("{path}: {reason}")]
    Invalid { path: String, reason: String },
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error("dataset write failed: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Protocol(#[from] ProtocolError),
}

fn invalid(path: impl Into<String>, reason: impl Into<String>) -> ScenarioError {
    ScenarioError::Invalid { path: path.into(), reason: reason.into() }
}

/// Elliptical track centered on the world origin.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrackEllipse {
    pub a: f64,
    pub b: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CarSpec {
    pub driver_id: u32,
    pub length: f64,
    pub width: f64,
    pub height: f64,
    /// radians per second along the ellipse parameter
    pub angular_speed: f64,
    pub phase: f64,
}

impl CarSpec {
    pub fn new(driver_id: u32, angular_speed: f64, phase: f64) -> Self {
        Self { driver_id, length: 4.5, width: 1.8, height: 1.2, angular_speed, phase }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseConfig {
    pub center_jitter_sigma: f64,
    pub size_jitter_sigma: f64,
    pub dropout_prob: f64,
    pub confidence_floor: f64,
    /// Longest run of consecutive dropped frames per car; `None` leaves runs unbounded.
    pub max_dropout_run: Option<u32>,
}

impl NoiseConfig {
    pub fn none() -> Self {
        Self {
            center_jitter_sigma: 0.0,
            size_jitter_sigma: 0.0,
            dropout_prob: 0.0,
            confidence_floor: 0.0,
            max_dropout_run: None,
        }
    }

    pub fn validate(&self, path: &str) -> Result<(), ScenarioError> {
        if !(self.center_jitter_sigma >= 0.0 && self.center_jitter_sigma.is_finite()) {
            return Err(invalid(format!("{path}.center_jitter_sigma"), "must be finite and >= 0"));
        }
        if !(self.size_jitter_sigma >= 0.0 && self.size_jitter_sigma.is_finite()) {
            return Err(invalid(format!("{path}.size_jitter_sigma"), "must be finite and >= 0"));
        }
        if !(0.0..=1.0).contains(&self.dropout_prob) {
            return Err(invalid(format!("{path}.dropout_prob"), "must lie in [0, 1]"));
        }
        if !(0.0..1.0).contains(&self.confidence_floor) {
            return Err(invalid(format!("{path}.confidence_floor"), "must lie in [0, 1)"));
        }
        Ok(())
    }
}

impl Default for NoiseConfig {
    fn default() -> Self {
        Self {
            center_jitter_sigma: 2.0,
            size_jitter_sigma: 0.05,
            dropout_prob: 0.05,
            confidence_floor: 0.5,
            max_dropout_run: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioConfig {
    pub track: TrackEllipse,
    pub cars: Vec<CarSpec>,
    pub camera: CameraModel,
    pub fps: f64,
    pub noise: NoiseConfig,
    pub seed: u64,
}

impl ScenarioConfig {
    /// Camera 150 m behind the track center, 45 m up, seeing the whole
    /// default 60 m x 30 m ellipse inside a 1280x720 image.
    pub fn default_camera() -> CameraModel {
        let pose = Pose3::new(
            Point3::new(-150.0, 0.0, 45.0),
            EulerAngles::new(0.0, 0.29, 0.0).expect("valid angles"),
        );
        CameraModel::new(pose, 1000.0, (640.0, 360.0), (1280, 720)).expect("valid camera")
    }

    /// `car_count` cars with driver ids 1..=n spread evenly around the track.
    pub fn with_cars(car_count: usize, seed: u64) -> Self {
        let cars = (0..car_count)
            .map(|i| {
                let speed = 0.25 + 0.02 * (i % 5) as f64;
                let phase = i as f64 * std::f64::consts::TAU / car_count.max(1) as f64;
                CarSpec::new(i as u32 + 1, speed, phase)
            })
            .collect();
        Self {
            track: TrackEllipse { a: 60.0, b: 30.0 },
            cars,
            camera: Self::default_camera(),
            fps: 25.0,
            noise: NoiseConfig::default(),
            seed,
        }
    }

    pub fn validate(&self) -> Result<(), ScenarioError> {
        if !(self.track.a > 0.0 && self.track.a.is_finite()) {
            return Err(invalid("scenario.track.a", "must be > 0"));
        }
        if !(self.track.b > 0.0 && self.track.b.is_finite()) {
            return Err(invalid("scenario.track.b", "must be > 0"));
        }
        if !(self.fps > 0.0 && self.fps.is_finite()) {
            return Err(invalid("scenario.fps", "must be > 0"));
        }
        let mut seen = std::collections::BTreeSet::new();
        for (i, car) in self.cars.iter().enumerate() {
            if !seen.insert(car.driver_id) {
                return Err(invalid(format!("scenario.cars[{i}].driver_id"), "duplicate driver id"));
            }
            if !car.angular_speed.is_finite() {
                return Err(invalid(format!("scenario.cars[{i}].angular_speed"), "must be finite"));
            }
            if !car.phase.is_finite() {
                return Err(invalid(format!("scenario.cars[{i}].phase"), "must be finite"));
            }
            CuboidHull::new(car.length, car.width, car.height, Pose3::default())
                .map_err(|e| invalid(format!("scenario.cars[{i}].hull"), e.to_string()))?;
        }
        self.noise.validate("scenario.noise")
    }

    pub fn driver_ids(&self) -> impl Iterator<Item = u32> + '_ {
        self.cars.iter().map(|c| c.driver_id)
    }
}

/// Position on the ellipse with yaw along the direction of travel.
pub fn car_pose_at(config: &ScenarioConfig, car_index: usize, time: f64) -> Pose3 {
    let car = &config.cars[car_index];
    let (a, b) = (config.track.a, config.track.b);
    let angle = car.angular_speed * time + car.phase;
    let (s, c) = angle.sin_cos();
    // a stationary car faces the forward (ω > 0) tangent
    let dir = if car.angular_speed < 0.0 { -1.0 } else { 1.0 };
    let yaw = (dir * b * c).atan2(-dir * a * s);
    Pose3::new(Point3::new(a * c, b * s, 0.0), EulerAngles::from_yaw(yaw))
}

/// Hull for a car at `pose`, lifted so its bottom face rests on the ground.
pub fn car_hull(car: &CarSpec, pose: &Pose3) -> CuboidHull {
    let mut lifted = *pose;
    lifted.position.z += car.height / 2.0;
    CuboidHull::new(car.length, car.width, car.height, lifted).expect("validated hull dimensions")
}

#[derive(Debug, Clone, PartialEq)]
pub struct CarTruth {
    pub driver_id: u32,
    pub pose: Pose3,
    pub hull: CuboidHull,
    pub bbox: BBox,
    pub observation_yaw: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruthFrame {
    pub frame_id: u64,
    /// Visible cars, ascending by `driver_id`.
    pub cars: Vec<CarTruth>,
}

impl GroundTruthFrame {
    pub fn car(&self, driver_id: u32) -> Option<&CarTruth> {
        self.cars.iter().find(|c| c.driver_id == driver_id)
    }
}

/// Ground truth for one frame. Cars behind the camera or entirely outside the
/// image are left out.
pub fn ground_truth_frame(config: &ScenarioConfig, frame_id: u64) -> GroundTruthFrame {
    let time = frame_id as f64 / config.fps;
    let image = config.camera.image_bounds();
    let mut cars: Vec<CarTruth> = config
        .cars
        .iter()
        .enumerate()
        .filter_map(|(i, car)| {
            let pose = car_pose_at(config, i, time);
            let hull = car_hull(car, &pose);
            let bbox = project_cuboid(&config.camera, &hull).ok()?.bbox;
            if !bbox.intersects(&image) {
                return None;
            }
            let observation_yaw = observation_yaw(&config.camera, &pose).ok()?;
            Some(CarTruth { driver_id: car.driver_id, pose, hull, bbox, observation_yaw })
        })
        .collect();
    cars.sort_by_key(|c| c.driver_id);
    GroundTruthFrame { frame_id, cars }
}

pub fn ground_truth_sequence(config: &ScenarioConfig, frame_count: u64) -> Vec<GroundTruthFrame> {
    (0..frame_count).map(|i| ground_truth_frame(config, i)).collect()
}

/// One detector output.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Detection {
    pub driver_id: u32,
    pub bbox: BBox,
    pub confidence: f64,
    pub frame_id: u64,
}

/// Sequential state of the noise model: the PRNG plus per-driver dropout runs.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseState {
    pub rng: SplitMix64,
    dropout_runs: BTreeMap<u32, u32>,
}

impl NoiseState {
    pub fn new(seed: u64) -> Self {
        Self { rng: SplitMix64::new(seed), dropout_runs: BTreeMap::new() }
    }
}

pub fn corrupt_detections(frame: &GroundTruthFrame, noise: &NoiseConfig, state: &mut NoiseState) -> Vec<Detection> {
    let mut cars: Vec<&CarTruth> = frame.cars.iter().collect();
    cars.sort_by_key(|c| c.driver_id);

    let mut out = Vec::with_capacity(cars.len());
    for car in cars {
        let run = state.dropout_runs.entry(car.driver_id).or_insert(0);
        let u_drop = state.rng.next_f64();
        let forced = noise.max_dropout_run.is_some_and(|cap| *run >= cap);
        if u_drop < noise.dropout_prob && !forced {
            *run += 1;
            continue;
        }
        *run = 0;

        let (gx, gy) = state.rng.next_gaussian_pair();
        let (gw, gh) = state.rng.next_gaussian_pair();
        let u_conf = state.rng.next_f64();

        let b = car.bbox;
        let (dx, dy) = (noise.center_jitter_sigma * gx, noise.center_jitter_sigma * gy);
        let w = b.width();
        let h = b.height();
        let new_w = (w * (1.0 + noise.size_jitter_sigma * gw)).max(1.0);
        let new_h = (h * (1.0 + noise.size_jitter_sigma * gh)).max(1.0);
        // grow symmetrically about the jittered center; exact when there is no noise
        let (gw2, gh2) = ((new_w - w) / 2.0, (new_h - h) / 2.0);
        let bbox = BBox {
            x_min: b.x_min + dx - gw2,
            y_min: b.y_min + dy - gh2,
            x_max: b.x_max + dx + gw2,
            y_max: b.y_max + dy + gh2,
        };
        let confidence = noise.confidence_floor + (1.0 - noise.confidence_floor) * u_conf;
        out.push(Detection { driver_id: car.driver_id, bbox, confidence, frame_id: frame.frame_id });
    }
    out
}

/// Ground truth and noisy detections, frame by frame.
#[derive(Debug, Clone)]
pub struct Simulation {
    config: ScenarioConfig,
    noise: NoiseState,
    next_frame: u64,
}

impl Simulation {
    pub fn new(config: ScenarioConfig) -> Result<Self, ScenarioError> {
        config.validate()?;
        let noise = NoiseState::new(config.seed);
        Ok(Self { config, noise, next_frame: 0 })
    }

    pub fn config(&self) -> &ScenarioConfig {
        &self.config
    }

    pub fn step(&mut self) -> (GroundTruthFrame, Vec<Detection>) {
        let truth = ground_truth_frame(&self.config, self.next_frame);
        let detections = corrupt_detections(&truth, &self.config.noise, &mut self.noise);
        self.next_frame += 1;
        (truth, detections)
    }
}

impl Iterator for Simulation {
    type Item = (GroundTruthFrame, Vec<Detection>);

    fn next(&mut self) -> Option<Self::Item> {
        Some(self.step())
    }
}

/// One auto-tagged record per (frame, visible car).
pub fn dataset_records(sequence: &[GroundTruthFrame], detections_per_frame: &[Vec<Detection>]) -> Vec<DatasetRecord> {
    let priors = PriorSet::default();
    let empty = Vec::new();
    let mut records = Vec::new();
    for (i, frame) in sequence.iter().enumerate() {
        let dets = detections_per_frame.get(i).unwrap_or(&empty);
        for car in &frame.cars {
            let noisy = dets.iter().find(|d| d.driver_id == car.driver_id).map(|d| d.bbox);
            records.push(
                DatasetRecord {
                    frame_id: frame.frame_id,
                    driver_id: car.driver_id,
                    gt_bbox: car.bbox,
                    noisy_bbox: noisy,
                    observation_yaw: car.observation_yaw,
                    prior_index: assign_priors(&priors, car.observation_yaw).nearest_index as u32,
                }
                .quantized(),
            );
        }
    }
    records
}

pub fn export_dataset(
    sequence: &[GroundTruthFrame],
    detections_per_frame: &[Vec<Detection>],
    path: &Path,
) -> Result<usize, ScenarioError> {
    let records = dataset_records(sequence, detections_per_frame);
    let mut out = BufWriter::new(File::create(path)?);
    for record in &records {
        out.write_all(encode(&Message::Record(record.clone()))?.as_bytes())?;
    }
    out.flush()?;
    Ok(records.len())
}
