//! The per-frame loop and the command entry points built on it.
//!
//! One frame is: detect (simulate + corrupt) -> track -> priors -> anchors ->
//! encode. [`run`] paces that loop at the frame clock and publishes to the
//! console server; [`replay`] republishes a recording; [`bench`] runs the loop
//! flat out without network or sleeping.

pub mod config;

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::time::{Duration, Instant, SystemTime, UNIX_EPOCH};

use log::{info, warn};
use thiserror::Error;

use crate::geometry::{CameraModel, CuboidHull};
use crate::overlay::{resolve_visible, stack_collisions, OverlayTemplate, PartCatalog};
use crate::priors::{assign_priors, PriorSet};
use crate::protocol::canonical::ObjectBuilder;
use crate::protocol::{
    decode, encode, serve, AnchorReport, ConfigUpdate, FrameMessage, Message, ProtocolError, ServerError,
    TrackReport,
};
use crate::scenesim::{export_dataset, Detection, GroundTruthFrame, ScenarioConfig, ScenarioError, Simulation};
use crate::tracker::{TrackerError, TrackerParams, TrackerState};

pub use config::{ConfigError, PipelineConfig};

/// Vertical gap kept between stacked labels, in pixels.
pub const LABEL_GAP_PX: f64 = 20.0;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Server(#[from] ServerError),
    #[error("{context}: {source}")]
    Io { context: String, source: std::io::Error },
    #[error("{path}: line {line}: {reason}")]
    Replay { path: PathBuf, line: usize, reason: String },
    #[error(transparent)]
    Protocol(#[from] ProtocolError),
    #[error(transparent)]
    Tracker(#[from] TrackerError),
    #[error(transparent)]
    Scenario(ScenarioError),
}

impl From<ScenarioError> for PipelineError {
    fn from(e: ScenarioError) -> Self {
        match e {
            ScenarioError::Invalid { .. } => PipelineError::Config(e.into()),
            other => PipelineError::Scenario(other),
        }
    }
}

impl PipelineError {
    /// 2 for configuration problems, 3 for everything that fails at run time.
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Config(_) => 2,
            _ => 3,
        }
    }
}

fn io_err(context: impl Into<String>) -> impl FnOnce(std::io::Error) -> PipelineError {
    let context = context.into();
    move |source| PipelineError::Io { context, source }
}

/// Paces a loop at `fps`: frame `i` is due `i / fps` seconds after start.
#[derive(Debug, Clone)]
pub struct FrameClock {
    fps: f64,
    period: Duration,
    start: Instant,
}

impl FrameClock {
    pub fn new(fps: f64) -> Result<Self, ConfigError> {
        if !(fps > 0.0 && fps.is_finite()) {
            return Err(ConfigError::Invalid { path: "fps".into(), reason: "must be > 0".into() });
        }
        Ok(Self { fps, period: Duration::from_secs_f64(1.0 / fps), start: Instant::now() })
    }

    pub fn fps(&self) -> f64 {
        self.fps
    }

    /// Per-frame deadline.
    pub fn period(&self) -> Duration {
        self.period
    }

    /// Sleeps until frame `index` is due, or until `stop` is raised.
    /// Returns false when stopped. A late frame is not waited for.
    pub fn wait_for(&self, index: u64, stop: &AtomicBool) -> bool {
        let due = self.start + self.period.mul_f64(index as f64);
        loop {
            if stop.load(Ordering::SeqCst) {
                return false;
            }
            let now = Instant::now();
            if now >= due {
                return true;
            }
            std::thread::sleep((due - now).min(Duration::from_millis(50)));
        }
    }
}

/// Timestamp used in fixed-clock mode.
pub fn fixed_timestamp_us(frame_id: u64, fps: f64) -> i64 {
    (frame_id as f64 * 1e6 / fps).round() as i64
}

fn wall_clock_us() -> i64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_micros() as i64)
}

/// What a detector hands the pipeline for one frame.
#[derive(Debug, Clone)]
pub struct SourceFrame {
    pub frame_id: u64,
    pub detections: Vec<Detection>,
    /// Known poses, when the source has them. Used for observation yaw,
    /// priors and part anchors.
    pub truth: Option<GroundTruthFrame>,
}

/// Anything that yields per-frame detections with the same contract as
/// [`crate::scenesim::corrupt_detections`].
pub trait DetectionSource {
    fn next_frame(&mut self) -> Option<SourceFrame>;

    fn camera(&self) -> Option<&CameraModel> {
        None
    }
}

impl DetectionSource for Simulation {
    fn next_frame(&mut self) -> Option<SourceFrame> {
        let (truth, detections) = self.step();
        Some(SourceFrame { frame_id: truth.frame_id, detections, truth: Some(truth) })
    }

    fn camera(&self) -> Option<&CameraModel> {
        Some(&self.config().camera)
    }
}

/// Tracker, priors and overlay state for one stream of frames.
pub struct Pipeline<S> {
    source: S,
    tracker: TrackerState,
    priors: PriorSet,
    catalog: PartCatalog,
}

impl Pipeline<Simulation> {
    pub fn simulated(scenario: ScenarioConfig, tracker: TrackerParams) -> Result<Self, PipelineError> {
        Self::new(Simulation::new(scenario)?, tracker)
    }
}

impl<S: DetectionSource> Pipeline<S> {
    pub fn new(source: S, tracker: TrackerParams) -> Result<Self, PipelineError> {
        let tracker = TrackerState::new(tracker).map_err(ConfigError::from)?;
        Ok(Self { source, tracker, priors: PriorSet::default(), catalog: PartCatalog::default() })
    }

    pub fn tracker(&self) -> &TrackerState {
        &self.tracker
    }

    /// Processes the next source frame. `None` once the source is exhausted.
    pub fn step_frame(
        &mut self,
        templates: &[OverlayTemplate],
        timestamp_us: impl FnOnce(u64) -> i64,
    ) -> Result<Option<FrameMessage>, PipelineError> {
        let Some(frame) = self.source.next_frame() else {
            return Ok(None);
        };
        let mut snapshot = self.tracker.step(&frame.detections, frame.frame_id)?;
        snapshot.sort_by_key(|t| t.driver_id);

        let truth = frame.truth.as_ref();
        let hull_for = |driver_id: u32| -> Option<CuboidHull> { truth?.car(driver_id).map(|c| c.hull) };
        let items = resolve_visible(templates, &snapshot, &self.catalog, hull_for, self.source.camera());
        let items = stack_collisions(items, LABEL_GAP_PX);

        let tracks = snapshot
            .iter()
            .map(|track| {
                let yaw = truth.and_then(|t| t.car(track.driver_id)).map(|c| c.observation_yaw);
                TrackReport {
                    driver_id: track.driver_id,
                    track_id: track.track_id,
                    state: track.state,
                    bbox: track.bbox,
                    confidence: track.last_confidence,
                    prior_index: yaw.map(|y| assign_priors(&self.priors, y).nearest_index as u32),
                    observation_yaw: yaw,
                    anchors: items
                        .iter()
                        .filter(|i| i.track_id == track.track_id)
                        .map(|i| AnchorReport { template_id: i.template_id, u: i.anchor.0, v: i.anchor.1 })
                        .collect(),
                }
                .quantized()
            })
            .collect();
        Ok(Some(FrameMessage { frame_id: frame.frame_id, timestamp_us: timestamp_us(frame.frame_id), tracks }))
    }
}

/// Appends lines to the recording file.
struct Recorder {
    out: BufWriter<File>,
    path: PathBuf,
}

impl Recorder {
    fn create(path: &Path) -> Result<Self, PipelineError> {
        let file = File::create(path).map_err(io_err(format!("cannot create record file {}", path.display())))?;
        Ok(Self { out: BufWriter::new(file), path: path.to_owned() })
    }

    fn write(&mut self, line: &str) -> Result<(), PipelineError> {
        self.out.write_all(line.as_bytes()).map_err(io_err(format!("cannot write {}", self.path.display())))
    }

    fn finish(mut self) -> Result<(), PipelineError> {
        self.out.flush().map_err(io_err(format!("cannot write {}", self.path.display())))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RunSummary {
    pub frames: u64,
    pub last_revision: u64,
}

/// Runs the live loop until `stop` is raised or `frame_limit` frames are out.
///
/// A recording holds the initial config line, then one line per published
/// frame, with a config line inserted whenever the template revision changes.
pub fn run(config: &PipelineConfig, stop: &AtomicBool, frame_limit: Option<u64>) -> Result<RunSummary, PipelineError> {
    config.validate()?;
    let mut scenario = config.scenario.clone();
    scenario.fps = config.fps;
    let mut pipeline = Pipeline::simulated(scenario, config.tracker)?;
    let clock = FrameClock::new(config.fps)?;

    let initial = ConfigUpdate { revision: 0, templates: config.initial_templates() }.quantized();
    let mut recorder = config.record.as_deref().map(Recorder::create).transpose()?;
    if let Some(rec) = recorder.as_mut() {
        rec.write(&encode(&Message::Config(initial.clone()))?)?;
    }
    let server = serve(&config.listen, initial)?;
    let publisher = server.publisher();
    let mut revision = server.config().current().revision;
    info!("pipeline running at {} fps with {} cars", config.fps, config.scenario.cars.len());

    let mut frames = 0u64;
    let result = loop {
        if frame_limit.is_some_and(|limit| frames >= limit) || !clock.wait_for(frames, stop) {
            break Ok(());
        }
        let templates = server.config().current();
        if templates.revision != revision {
            revision = templates.revision;
            info!("templates now at revision {revision}");
            if let Some(rec) = recorder.as_mut() {
                if let Err(e) = rec.write(&encode(&Message::Config((*templates).clone()))?) {
                    break Err(e);
                }
            }
        }
        let fixed = config.fixed_clock;
        let fps = config.fps;
        let step =
            pipeline.step_frame(&templates.templates, |id| if fixed { fixed_timestamp_us(id, fps) } else { wall_clock_us() });
        let frame = match step {
            Ok(Some(frame)) => frame,
            Ok(None) => break Ok(()),
            Err(e) => break Err(e),
        };
        let line = encode(&Message::Frame(frame.clone()))?;
        if let Some(rec) = recorder.as_mut() {
            if let Err(e) = rec.write(&line) {
                break Err(e);
            }
        }
        publisher.publish(frame.frame_id, line);
        frames += 1;
    };
    if let Some(rec) = recorder {
        rec.finish()?;
    }
    server.shutdown();
    result.map(|()| RunSummary { frames, last_revision: revision })
}

/// A recording, decoded up front.
#[derive(Debug, Clone, PartialEq)]
pub struct Recording {
    pub initial_config: Option<ConfigUpdate>,
    /// Frames in file order, each with the config revision that was current.
    pub entries: Vec<RecordingEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum RecordingEntry {
    Frame(FrameMessage),
    Config(ConfigUpdate),
}

impl Recording {
    pub fn frames(&self) -> impl Iterator<Item = &FrameMessage> {
        self.entries.iter().filter_map(|e| match e {
            RecordingEntry::Frame(f) => Some(f),
            RecordingEntry::Config(_) => None,
        })
    }
}

/// Reads a recording; errors name the 1-based line number. Blank lines are skipped.
pub fn read_recording(path: &Path) -> Result<Recording, PipelineError> {
    let text = std::fs::read_to_string(path).map_err(io_err(format!("cannot read {}", path.display())))?;
    let mut recording = Recording { initial_config: None, entries: Vec::new() };
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let err = |reason: String| PipelineError::Replay { path: path.to_owned(), line: i + 1, reason };
        match decode(line).map_err(|e| err(e.to_string()))? {
            Message::Frame(f) => recording.entries.push(RecordingEntry::Frame(f)),
            Message::Config(c) if recording.initial_config.is_none() && recording.entries.is_empty() => {
                recording.initial_config = Some(c)
            }
            Message::Config(c) => recording.entries.push(RecordingEntry::Config(c)),
            other => return Err(err(format!("unexpected {} message in a recording", other.type_name()))),
        }
    }
    Ok(recording)
}

/// Republishes a recording at `fps` with timestamps from the replay clock.
pub fn replay(input: &Path, listen: &str, fps: f64, stop: &AtomicBool) -> Result<u64, PipelineError> {
    let clock = FrameClock::new(fps)?;
    let recording = read_recording(input)?;
    if recording.entries.is_empty() {
        info!("{} holds no frames", input.display());
        return Ok(0);
    }
    let initial =
        recording.initial_config.clone().unwrap_or(ConfigUpdate { revision: 0, templates: Vec::new() });
    let server = serve(listen, initial)?;
    let publisher = server.publisher();
    let mut published = 0u64;
    for entry in &recording.entries {
        match entry {
            RecordingEntry::Config(c) => {
                server.config().apply(c.clone());
            }
            RecordingEntry::Frame(f) => {
                if !clock.wait_for(published, stop) {
                    break;
                }
                let frame = FrameMessage { timestamp_us: wall_clock_us(), ..f.clone() };
                publisher.publish(frame.frame_id, encode(&Message::Frame(frame))?);
                published += 1;
            }
        }
    }
    server.shutdown();
    Ok(published)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BenchReport {
    pub cars: usize,
    pub frames: u64,
    pub fps: f64,
    pub p50_us: f64,
    pub p99_us: f64,
}

impl BenchReport {
    /// Canonical JSON line, newline included.
    pub fn to_line(&self) -> String {
        let mut line = ObjectBuilder::new()
            .field("cars", self.cars)
            .field("fps", self.fps)
            .field("frames", self.frames)
            .field("p50_us", self.p50_us)
            .field("p99_us", self.p99_us)
            .build()
            .to_canonical_string();
        line.push('\n');
        line
    }
}

/// Nearest-rank percentile of an ascending slice.
fn percentile(sorted: &[f64], p: f64) -> f64 {
    let rank = ((p / 100.0) * sorted.len() as f64).ceil().max(1.0) as usize;
    sorted[rank.min(sorted.len()) - 1]
}

/// Full per-frame computation, including encoding, for `frame_count` frames.
pub fn bench(config: &PipelineConfig, frame_count: u64) -> Result<BenchReport, PipelineError> {
    if frame_count == 0 {
        return Err(ConfigError::Invalid { path: "frames".into(), reason: "must be >= 1".into() }.into());
    }
    config.validate()?;
    let mut scenario = config.scenario.clone();
    scenario.fps = config.fps;
    let cars = scenario.cars.len();
    let templates = ConfigUpdate { revision: 0, templates: config.initial_templates() }.quantized().templates;
    let mut pipeline = Pipeline::simulated(scenario, config.tracker)?;
    let fps = config.fps;

    let mut latencies = Vec::with_capacity(frame_count as usize);
    let total = Instant::now();
    for _ in 0..frame_count {
        let t0 = Instant::now();
        let frame = pipeline.step_frame(&templates, |id| fixed_timestamp_us(id, fps))?.expect("simulation is endless");
        let line = encode(&Message::Frame(frame))?;
        std::hint::black_box(line);
        latencies.push(t0.elapsed().as_nanos() as f64 / 1000.0);
    }
    let elapsed = total.elapsed().as_secs_f64();
    latencies.sort_by(f64::total_cmp);
    Ok(BenchReport {
        cars,
        frames: frame_count,
        fps: frame_count as f64 / elapsed.max(1e-9),
        p50_us: percentile(&latencies, 50.0),
        p99_us: percentile(&latencies, 99.0),
    })
}

/// Simulates `frame_count` frames and writes the auto-tagged dataset.
pub fn export(config: &PipelineConfig, frame_count: u64, out: &Path) -> Result<usize, PipelineError> {
    config.validate()?;
    let mut scenario = config.scenario.clone();
    scenario.fps = config.fps;
    let sim = Simulation::new(scenario)?;
    let (truth, detections): (Vec<_>, Vec<_>) = sim.take(frame_count as usize).unzip();
    let written = export_dataset(&truth, &detections, out)?;
    if written == 0 {
        warn!("no car was visible; {} is empty", out.display());
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_config(cars: usize) -> PipelineConfig {
        let mut c = PipelineConfig { fixed_clock: true, ..Default::default() };
        c.scenario = ScenarioConfig::with_cars(cars, 3);
        c
    }

    #[test]
    fn fixed_timestamps() {
        assert_eq!(fixed_timestamp_us(0, 25.0), 0);
        assert_eq!(fixed_timestamp_us(1, 25.0), 40_000);
        assert_eq!(fixed_timestamp_us(3, 30.0), 100_000);
        assert_eq!(fixed_timestamp_us(1, 3.0), 333_333);
    }

    #[test]
    fn clock_rejects_nonpositive_fps() {
        assert!(FrameClock::new(0.0).is_err());
        assert!(FrameClock::new(f64::NAN).is_err());
        assert_eq!(FrameClock::new(25.0).unwrap().period(), Duration::from_millis(40));
    }

    #[test]
    fn percentile_nearest_rank() {
        let v: Vec<f64> = (1..=100).map(f64::from).collect();
        assert_eq!(percentile(&v, 50.0), 50.0);
        assert_eq!(percentile(&v, 99.0), 99.0);
        assert_eq!(percentile(&[7.0], 50.0), 7.0);
        assert_eq!(percentile(&[7.0], 99.0), 7.0);
        assert_eq!(percentile(&[1.0, 2.0, 3.0], 50.0), 2.0);
    }

    #[test]
    fn frames_carry_priors_and_anchors_once_confirmed() {
        let c = small_config(3);
        let templates = c.initial_templates();
        let mut p = Pipeline::simulated(c.scenario.clone(), c.tracker).unwrap();
        let mut last = None;
        for _ in 0..10 {
            last = p.step_frame(&templates, |id| fixed_timestamp_us(id, 25.0)).unwrap();
        }
        let frame = last.unwrap();
        assert_eq!(frame.frame_id, 9);
        assert_eq!(frame.timestamp_us, 360_000);
        assert!(!frame.tracks.is_empty());
        for t in &frame.tracks {
            assert!(t.prior_index.is_some_and(|i| i < 18));
            assert!(t.observation_yaw.is_some());
            // one enabled above-box template per driver
            assert_eq!(t.anchors.len(), 1);
            assert_eq!(t.anchors[0].template_id, 2 * (t.driver_id - 1) + 1);
        }
        let ids: Vec<u32> = frame.tracks.iter().map(|t| t.driver_id).collect();
        let mut sorted = ids.clone();
        sorted.sort();
        assert_eq!(ids, sorted);
    }

    #[test]
    fn disabled_driver_keeps_track_but_loses_anchors() {
        let c = small_config(2);
        let mut templates = c.initial_templates();
        for t in templates.iter_mut().filter(|t| t.driver_id == 2) {
            t.enabled = false;
        }
        let mut p = Pipeline::simulated(c.scenario.clone(), c.tracker).unwrap();
        let mut frame = None;
        for _ in 0..6 {
            frame = p.step_frame(&templates, |_| 0).unwrap();
        }
        let frame = frame.unwrap();
        let d2 = frame.tracks.iter().find(|t| t.driver_id == 2).expect("driver 2 still tracked");
        assert!(d2.anchors.is_empty());
    }

    struct Scripted(Vec<SourceFrame>);

    impl DetectionSource for Scripted {
        fn next_frame(&mut self) -> Option<SourceFrame> {
            if self.0.is_empty() {
                None
            } else {
                Some(self.0.remove(0))
            }
        }
    }

    #[test]
    fn external_source_without_poses() {
        use crate::geometry::BBox;
        let frames = (0..4)
            .map(|i| SourceFrame {
                frame_id: i,
                detections: vec![Detection {
                    driver_id: 5,
                    bbox: BBox::from_center(100.0 + i as f64, 100.0, 40.0, 20.0),
                    confidence: 0.9,
                    frame_id: i,
                }],
                truth: None,
            })
            .collect();
        let mut p = Pipeline::new(Scripted(frames), TrackerParams::default()).unwrap();
        let templates = crate::overlay::default_templates([5]);
        let mut out = Vec::new();
        while let Some(f) = p.step_frame(&templates, |_| 0).unwrap() {
            out.push(f);
        }
        assert_eq!(out.len(), 4);
        let t = &out[3].tracks[0];
        assert_eq!(t.prior_index, None);
        assert_eq!(t.observation_yaw, None);
        assert_eq!(t.anchors.len(), 1);
    }

    #[test]
    fn bench_report_line_is_canonical() {
        let r = BenchReport { cars: 10, frames: 1, fps: 1234.5, p50_us: 12.0, p99_us: 12.0 };
        assert_eq!(r.to_line(), "{\"cars\":10,\"fps\":1234.5000,\"frames\":1,\"p50_us\":12.0000,\"p99_us\":12.0000}\n");
    }
}
