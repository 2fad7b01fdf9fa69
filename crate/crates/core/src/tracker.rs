//! Per-driver track lifecycle with constant-velocity coasting.
//!
//! Association is keyed on `driver_id`: the detector classifies each livery,
//! so identity comes from the class and geometry only gates and breaks ties.
//! A track is born `Tentative`, becomes `Confirmed` after `confirm_hits`
//! consecutive hits, and coasts on its last velocity while its detections are
//! missing. It is deleted once it has missed more than `max_misses` frames.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::geometry::BBox;
use crate::scenesim::Detection;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TrackerError {
    #[error("frame {got} does not follow frame {last}")]
    OutOfOrderFrame { last: u64, got: u64 },
    #[error("invalid tracker parameter {field}: {reason}")]
    InvalidParams { field: &'static str, reason: &'static str },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrackerParams {
    pub confirm_hits: u32,
    pub max_misses: u32,
    pub smoothing_alpha: f64,
    /// pixels
    pub gate_distance: f64,
}

impl Default for TrackerParams {
    fn default() -> Self {
        Self { confirm_hits: 3, max_misses: 5, smoothing_alpha: 0.6, gate_distance: 150.0 }
    }
}

impl TrackerParams {
    pub fn validate(&self) -> Result<(), TrackerError> {
        if self.confirm_hits < 1 {
            return Err(TrackerError::InvalidParams { field: "confirm_hits", reason: "must be >= 1" });
        }
        if !(self.smoothing_alpha > 0.0 && self.smoothing_alpha <= 1.0) {
            return Err(TrackerError::InvalidParams { field: "smoothing_alpha", reason: "must lie in (0, 1]" });
        }
        if !(self.gate_distance > 0.0) {
            return Err(TrackerError::InvalidParams { field: "gate_distance", reason: "must be > 0" });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TrackState {
    Tentative,
    Confirmed,
    Coasting,
}

impl TrackState {
    pub fn as_str(self) -> &'static str {
        match self {
            TrackState::Tentative => "tentative",
            TrackState::Confirmed => "confirmed",
            TrackState::Coasting => "coasting",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "tentative" => Some(TrackState::Tentative),
            "confirmed" => Some(TrackState::Confirmed),
            "coasting" => Some(TrackState::Coasting),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Track {
    pub track_id: u64,
    pub driver_id: u32,
    pub bbox: BBox,
    /// center velocity, pixels per frame
    pub velocity: (f64, f64),
    pub age: u32,
    pub consecutive_hits: u32,
    pub consecutive_misses: u32,
    pub state: TrackState,
    pub last_confidence: f64,
}

impl Track {
    pub fn predicted_bbox(&self) -> BBox {
        self.bbox.translate(self.velocity.0, self.velocity.1)
    }

    pub fn is_published(&self) -> bool {
        matches!(self.state, TrackState::Confirmed | TrackState::Coasting)
    }
}

/// Output of [`associate`], as indices into the inputs.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Association {
    /// (prediction index, detection index)
    pub matches: Vec<(usize, usize)>,
    pub unmatched_tracks: Vec<usize>,
    pub unmatched_detections: Vec<usize>,
    /// Lower-ranked duplicates of a driver id; never matched or spawned.
    pub suppressed_detections: Vec<usize>,
}

/// Predicted box of a live track, keyed by driver.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Prediction {
    pub driver_id: u32,
    pub bbox: BBox,
}

fn center_distance(a: &BBox, b: &BBox) -> f64 {
    let (ax, ay) = a.center();
    let (bx, by) = b.center();
    (ax - bx).hypot(ay - by)
}

/// Matches detections to predictions by driver id.
///
/// Among detections sharing a driver id the highest confidence wins, then the
/// larger IoU with that driver's prediction, then input order. A winner whose
/// center lies farther than `gate_distance` from its prediction leaves both
/// sides unmatched.
pub fn associate(predictions: &[Prediction], detections: &[Detection], gate_distance: f64) -> Association {
    let by_driver: BTreeMap<u32, usize> = predictions.iter().enumerate().map(|(i, p)| (p.driver_id, i)).collect();

    let mut winners: BTreeMap<u32, usize> = BTreeMap::new();
    let mut out = Association::default();
    for (j, det) in detections.iter().enumerate() {
        let iou = |d: &Detection| by_driver.get(&d.driver_id).map_or(0.0, |&i| predictions[i].bbox.iou(&d.bbox));
        match winners.get(&det.driver_id) {
            None => {
                winners.insert(det.driver_id, j);
            }
            Some(&current) => {
                let cur = &detections[current];
                let better = det.confidence > cur.confidence
                    || (det.confidence == cur.confidence && iou(det) > iou(cur));
                if better {
                    out.suppressed_detections.push(current);
                    winners.insert(det.driver_id, j);
                } else {
                    out.suppressed_detections.push(j);
                }
            }
        }
    }
    out.suppressed_detections.sort_unstable();

    let mut matched_tracks = vec![false; predictions.len()];
    for (&driver, &j) in &winners {
        match by_driver.get(&driver) {
            Some(&i) if center_distance(&predictions[i].bbox, &detections[j].bbox) <= gate_distance => {
                out.matches.push((i, j));
                matched_tracks[i] = true;
            }
            _ => out.unmatched_detections.push(j),
        }
    }
    out.matches.sort_unstable();
    out.unmatched_detections.sort_unstable();
    out.unmatched_tracks = (0..predictions.len()).filter(|&i| !matched_tracks[i]).collect();
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrackerState {
    tracks: Vec<Track>,
    next_track_id: u64,
    params: TrackerParams,
    last_frame: Option<u64>,
}

impl TrackerState {
    pub fn new(params: TrackerParams) -> Result<Self, TrackerError> {
        params.validate()?;
        Ok(Self { tracks: Vec::new(), next_track_id: 1, params, last_frame: None })
    }

    pub fn params(&self) -> &TrackerParams {
        &self.params
    }

    /// Live tracks, ordered by track id.
    pub fn tracks(&self) -> &[Track] {
        &self.tracks
    }

    pub fn next_track_id(&self) -> u64 {
        self.next_track_id
    }

    pub fn predict(&self) -> Vec<Prediction> {
        self.tracks.iter().map(|t| Prediction { driver_id: t.driver_id, bbox: t.predicted_bbox() }).collect()
    }

    /// Advances one frame; returns the confirmed and coasting tracks.
    pub fn step(&mut self, detections: &[Detection], frame_id: u64) -> Result<Vec<Track>, TrackerError> {
        if let Some(last) = self.last_frame {
            if frame_id <= last {
                return Err(TrackerError::OutOfOrderFrame { last, got: frame_id });
            }
        }
        self.last_frame = Some(frame_id);

        let params = self.params;
        let predictions = self.predict();
        let assoc = associate(&predictions, detections, params.gate_distance);
        let alpha = params.smoothing_alpha;

        for &(i, j) in &assoc.matches {
            let det = &detections[j];
            let track = &mut self.tracks[i];
            let pred = predictions[i].bbox;
            let (px, py) = track.bbox.center();
            let blend = |d: f64, p: f64| alpha * d + (1.0 - alpha) * p;
            track.bbox = BBox {
                x_min: blend(det.bbox.x_min, pred.x_min),
                y_min: blend(det.bbox.y_min, pred.y_min),
                x_max: blend(det.bbox.x_max, pred.x_max),
                y_max: blend(det.bbox.y_max, pred.y_max),
            };
            let (nx, ny) = track.bbox.center();
            track.velocity = (nx - px, ny - py);
            track.consecutive_misses = 0;
            track.consecutive_hits += 1;
            track.last_confidence = det.confidence;
            track.state = match track.state {
                TrackState::Tentative if track.consecutive_hits >= params.confirm_hits => TrackState::Confirmed,
                TrackState::Tentative => TrackState::Tentative,
                TrackState::Confirmed | TrackState::Coasting => TrackState::Confirmed,
            };
        }

        for &i in &assoc.unmatched_tracks {
            let track = &mut self.tracks[i];
            track.bbox = predictions[i].bbox;
            track.consecutive_misses += 1;
            track.consecutive_hits = 0;
            if track.state == TrackState::Confirmed {
                track.state = TrackState::Coasting;
            }
        }

        for track in &mut self.tracks {
            track.age += 1;
        }
        self.tracks.retain(|t| t.consecutive_misses <= params.max_misses);

        // a driver keeps at most one live track: gated-out detections of a
        // driver that is still tracked do not spawn
        for &j in &assoc.unmatched_detections {
            let det = &detections[j];
            if self.tracks.iter().any(|t| t.driver_id == det.driver_id) {
                continue;
            }
            let state =
                if params.confirm_hits <= 1 { TrackState::Confirmed } else { TrackState::Tentative };
            self.tracks.push(Track {
                track_id: self.next_track_id,
                driver_id: det.driver_id,
                bbox: det.bbox,
                velocity: (0.0, 0.0),
                age: 0,
                consecutive_hits: 1,
                consecutive_misses: 0,
                state,
                last_confidence: det.confidence,
            });
            self.next_track_id += 1;
        }

        Ok(self.snapshot())
    }

    pub fn snapshot(&self) -> Vec<Track> {
        self.tracks.iter().filter(|t| t.is_published()).cloned().collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn det(driver_id: u32, cx: f64, cy: f64, confidence: f64) -> Detection {
        Detection { driver_id, bbox: BBox::from_center(cx, cy, 40.0, 20.0), confidence, frame_id: 0 }
    }

    fn tracker() -> TrackerState {
        TrackerState::new(TrackerParams::default()).unwrap()
    }

    fn confirmed_tracker() -> TrackerState {
        let mut t = tracker();
        for f in 0..3 {
            t.step(&[det(1, 100.0 + 5.0 * f as f64, 100.0, 0.9)], f).unwrap();
        }
        t
    }

    #[test]
    fn prediction_is_constant_velocity() {
        let mut t = tracker();
        t.step(&[det(1, 100.0, 100.0, 0.9), det(2, 300.0, 100.0, 0.9), det(3, 500.0, 100.0, 0.9)], 0).unwrap();
        let preds = t.predict();
        assert_eq!(preds.len(), 3);
        assert_eq!(preds.iter().map(|p| p.driver_id).collect::<Vec<_>>(), vec![1, 2, 3]);
        assert_eq!(preds[0].bbox, t.tracks()[0].bbox);

        t.tracks[0].velocity = (5.0, -2.0);
        assert_eq!(t.predict()[0].bbox.center(), (105.0, 98.0));
    }

    #[test]
    fn associate_empty_detections() {
        let preds = [Prediction { driver_id: 1, bbox: BBox::from_center(0.0, 0.0, 10.0, 10.0) }];
        let a = associate(&preds, &[], 150.0);
        assert!(a.matches.is_empty());
        assert_eq!(a.unmatched_tracks, vec![0]);
    }

    #[test]
    fn associate_prefers_confidence() {
        let preds = [Prediction { driver_id: 4, bbox: BBox::from_center(100.0, 100.0, 40.0, 20.0) }];
        let dets = [det(4, 130.0, 100.0, 0.7), det(4, 100.0, 100.0, 0.9)];
        let a = associate(&preds, &dets, 150.0);
        assert_eq!(a.matches, vec![(0, 1)]);
        assert_eq!(a.suppressed_detections, vec![0]);
    }

    #[test]
    fn associate_breaks_confidence_ties_by_iou_then_order() {
        let preds = [Prediction { driver_id: 4, bbox: BBox::from_center(100.0, 100.0, 40.0, 20.0) }];
        let dets = [det(4, 120.0, 100.0, 0.8), det(4, 101.0, 100.0, 0.8)];
        assert_eq!(associate(&preds, &dets, 150.0).matches, vec![(0, 1)]);
        let same = [det(4, 101.0, 100.0, 0.8), det(4, 101.0, 100.0, 0.8)];
        assert_eq!(associate(&preds, &same, 150.0).matches, vec![(0, 0)]);
    }

    #[test]
    fn associate_gates_far_detections() {
        // centers (100, 100) and (220, 260): distance sqrt(120² + 160²) = 200 > 150
        let preds = [Prediction { driver_id: 1, bbox: BBox::from_center(100.0, 100.0, 40.0, 20.0) }];
        let dets = [det(1, 220.0, 260.0, 0.9)];
        let a = associate(&preds, &dets, 150.0);
        assert!(a.matches.is_empty());
        assert_eq!(a.unmatched_tracks, vec![0]);
        assert_eq!(a.unmatched_detections, vec![0]);
    }

    #[test]
    fn confirmation_on_third_hit() {
        let mut t = tracker();
        // frame: 0 spawn (hits 1), 1 (hits 2), 2 (hits 3 -> confirmed)
        assert!(t.step(&[det(1, 100.0, 100.0, 0.9)], 0).unwrap().is_empty());
        assert!(t.step(&[det(1, 102.0, 100.0, 0.9)], 1).unwrap().is_empty());
        let snap = t.step(&[det(1, 104.0, 100.0, 0.9)], 2).unwrap();
        assert_eq!(snap.len(), 1);
        assert_eq!(snap[0].state, TrackState::Confirmed);
        let id = snap[0].track_id;
        for f in 3..10 {
            let snap = t.step(&[det(1, 100.0 + 2.0 * f as f64, 100.0, 0.9)], f).unwrap();
            assert_eq!(snap[0].track_id, id);
        }
    }

    #[test]
    fn five_frame_dropout_keeps_identity() {
        let mut t = confirmed_tracker();
        let id = t.snapshot()[0].track_id;
        for f in 3..8 {
            let snap = t.step(&[], f).unwrap();
            assert_eq!(snap[0].state, TrackState::Coasting);
            assert_eq!(snap[0].consecutive_misses, (f - 2) as u32);
        }
        let snap = t.step(&[det(1, 140.0, 100.0, 0.9)], 8).unwrap();
        assert_eq!(snap.len(), 1);
        assert_eq!(snap[0].track_id, id);
        assert_eq!(snap[0].state, TrackState::Confirmed);
    }

    #[test]
    fn six_frame_dropout_starts_a_new_track() {
        let mut t = confirmed_tracker();
        let id = t.snapshot()[0].track_id;
        for f in 3..9 {
            t.step(&[], f).unwrap();
        }
        assert!(t.tracks().is_empty());
        for f in 9..12 {
            t.step(&[det(1, 145.0, 100.0, 0.9)], f).unwrap();
        }
        let snap = t.snapshot();
        assert_eq!(snap.len(), 1);
        assert!(snap[0].track_id > id);
    }

    #[test]
    fn out_of_order_frames_are_rejected() {
        let mut t = tracker();
        t.step(&[], 5).unwrap();
        assert_eq!(t.step(&[], 5), Err(TrackerError::OutOfOrderFrame { last: 5, got: 5 }));
        assert!(t.step(&[], 4).is_err());
        assert!(t.step(&[], 6).is_ok());
    }

    #[test]
    fn gated_detection_does_not_duplicate_driver() {
        let mut t = confirmed_tracker();
        t.step(&[det(1, 900.0, 600.0, 0.9)], 3).unwrap();
        assert_eq!(t.tracks().len(), 1);
        assert_eq!(t.tracks()[0].state, TrackState::Coasting);
    }

    #[test]
    fn tentative_miss_stays_tentative() {
        let mut t = tracker();
        t.step(&[det(1, 100.0, 100.0, 0.9)], 0).unwrap();
        t.step(&[], 1).unwrap();
        assert_eq!(t.tracks()[0].state, TrackState::Tentative);
        assert!(t.snapshot().is_empty());
    }

    #[test]
    fn alpha_one_follows_detections_exactly() {
        let params = TrackerParams { smoothing_alpha: 1.0, ..TrackerParams::default() };
        let mut t = TrackerState::new(params).unwrap();
        for f in 0..10 {
            let d = det(1, 100.0 + 7.3 * f as f64, 50.0 + 1.1 * f as f64, 0.9);
            let snap = t.step(&[d], f).unwrap();
            if f >= 2 {
                assert_eq!(snap[0].bbox, d.bbox);
            }
        }
    }

    #[test]
    fn invalid_params() {
        assert!(TrackerState::new(TrackerParams { confirm_hits: 0, ..Default::default() }).is_err());
        assert!(TrackerState::new(TrackerParams { smoothing_alpha: 0.0, ..Default::default() }).is_err());
        assert!(TrackerState::new(TrackerParams { gate_distance: -1.0, ..Default::default() }).is_err());
    }

    proptest! {
        #[test]
        fn lifecycle_invariants(stream in proptest::collection::vec(
            proptest::collection::vec((1u32..5, 0.0f64..800.0, 0.0f64..600.0, 0.0f64..1.0), 0..6), 1..60)
        ) {
            let mut t = tracker();
            let mut t2 = tracker();
            let mut seen_ids = std::collections::BTreeSet::new();
            let mut max_id = 0;
            for (f, frame) in stream.iter().enumerate() {
                let dets: Vec<Detection> = frame.iter().map(|&(d, x, y, c)| det(d, x, y, c)).collect();
                let snap = t.step(&dets, f as u64).unwrap();
                prop_assert_eq!(&snap, &t2.step(&dets, f as u64).unwrap());
                let mut drivers = std::collections::BTreeSet::new();
                for tr in t.tracks() {
                    prop_assert!(drivers.insert(tr.driver_id));
                    prop_assert!(tr.consecutive_misses <= t.params().max_misses);
                    prop_assert_eq!(tr.state == TrackState::Coasting, tr.consecutive_misses >= 1 && tr.state != TrackState::Tentative);
                    if seen_ids.insert(tr.track_id) {
                        prop_assert!(tr.track_id > max_id);
                        max_id = tr.track_id;
                    }
                }
                prop_assert!(snap.iter().all(|s| s.is_published()));
            }
        }
    }
}
