//! Wire protocol between the back-end pipeline and operator consoles.
//!
//! Every message is one line of canonical JSON (see [`canonical`]). Decoding
//! is lenient about key order and whitespace; encoding is strict.

pub mod canonical;
pub mod server;

use serde_json::{Map, Value};
use thiserror::Error;

use crate::geometry::BBox;
use crate::overlay::{AnchorKind, OverlayTemplate, PartId};
use crate::tracker::TrackState;
use canonical::{quantize, Canon, ObjectBuilder};

pub use server::{serve, FramePublisher, ServerError, ServerHandle};

pub const PROTOCOL_VERSION: &str = "overlay/1";
pub const DEFAULT_PORT: u16 = 7878;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ProtocolError {
    #[error("non-finite number at {0}")]
    NonFinite(String),
    #[error("malformed message at {path}: {reason}")]
    Malformed { path: String, reason: String },
    #[error("unknown message type {0:?}")]
    UnknownType(String),
    #[error("missing field {0}")]
    MissingField(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    Producer,
    Console,
}

impl Role {
    pub fn as_str(self) -> &'static str {
        match self {
            Role::Producer => "producer",
            Role::Console => "console",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Hello {
    pub protocol_version: String,
    pub role: Role,
}

impl Hello {
    pub fn new(role: Role) -> Self {
        Self { protocol_version: PROTOCOL_VERSION.to_owned(), role }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Ack {
    pub revision: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnchorReport {
    pub template_id: u32,
    pub u: f64,
    pub v: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrackReport {
    pub driver_id: u32,
    pub track_id: u64,
    pub state: TrackState,
    pub bbox: BBox,
    pub confidence: f64,
    pub prior_index: Option<u32>,
    pub observation_yaw: Option<f64>,
    pub anchors: Vec<AnchorReport>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrameMessage {
    pub frame_id: u64,
    pub timestamp_us: i64,
    pub tracks: Vec<TrackReport>,
}

/// Full-state replacement of the overlay templates.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfigUpdate {
    pub revision: u64,
    pub templates: Vec<OverlayTemplate>,
}

/// One auto-tagged dataset row.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetRecord {
    pub frame_id: u64,
    pub driver_id: u32,
    pub gt_bbox: BBox,
    pub noisy_bbox: Option<BBox>,
    pub observation_yaw: f64,
    pub prior_index: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Message {
    Hello(Hello),
    Ack(Ack),
    Frame(FrameMessage),
    Config(ConfigUpdate),
    Record(DatasetRecord),
}

impl Message {
    pub fn type_name(&self) -> &'static str {
        match self {
            Message::Hello(_) => "hello",
            Message::Ack(_) => "ack",
            Message::Frame(_) => "frame",
            Message::Config(_) => "config",
            Message::Record(_) => "record",
        }
    }
}

fn quantize_bbox(b: BBox) -> BBox {
    BBox { x_min: quantize(b.x_min), y_min: quantize(b.y_min), x_max: quantize(b.x_max), y_max: quantize(b.y_max) }
}

impl TrackReport {
    /// Snaps every float to the four-decimal wire grid.
    pub fn quantized(mut self) -> Self {
        self.bbox = quantize_bbox(self.bbox);
        self.confidence = quantize(self.confidence);
        self.observation_yaw = self.observation_yaw.map(quantize);
        for a in &mut self.anchors {
            a.u = quantize(a.u);
            a.v = quantize(a.v);
        }
        self
    }
}

impl DatasetRecord {
    pub fn quantized(mut self) -> Self {
        self.gt_bbox = quantize_bbox(self.gt_bbox);
        self.noisy_bbox = self.noisy_bbox.map(quantize_bbox);
        self.observation_yaw = quantize(self.observation_yaw);
        self
    }
}

impl ConfigUpdate {
    pub fn quantized(mut self) -> Self {
        for t in &mut self.templates {
            t.offset = (quantize(t.offset.0), quantize(t.offset.1));
        }
        self
    }

    pub fn template(&self, template_id: u32) -> Option<&OverlayTemplate> {
        self.templates.iter().find(|t| t.template_id == template_id)
    }
}

// ---------------------------------------------------------------------------
// encode

fn bbox_canon(b: &BBox) -> Canon {
    ObjectBuilder::new()
        .field("x_max", b.x_max)
        .field("x_min", b.x_min)
        .field("y_max", b.y_max)
        .field("y_min", b.y_min)
        .build()
}

fn template_canon(t: &OverlayTemplate) -> Canon {
    let anchor = match t.anchor {
        AnchorKind::Center => ObjectBuilder::new().field("kind", "center"),
        AnchorKind::AboveBox => ObjectBuilder::new().field("kind", "above_box"),
        AnchorKind::Part(part) => ObjectBuilder::new().field("kind", "part").field("part", part.as_str()),
    };
    ObjectBuilder::new()
        .field("anchor", anchor.build())
        .field("color", t.color.to_vec())
        .field("driver_id", t.driver_id)
        .field("enabled", t.enabled)
        .field("label", t.label.as_str())
        .field("offset", ObjectBuilder::new().field("dx", t.offset.0).field("dy", t.offset.1).build())
        .field("template_id", t.template_id)
        .build()
}

fn track_canon(t: &TrackReport) -> Canon {
    let anchors: Vec<Canon> = t
        .anchors
        .iter()
        .map(|a| ObjectBuilder::new().field("template_id", a.template_id).field("u", a.u).field("v", a.v).build())
        .collect();
    ObjectBuilder::new()
        .field("anchors", Canon::Array(anchors))
        .field("bbox", bbox_canon(&t.bbox))
        .field("confidence", t.confidence)
        .field("driver_id", t.driver_id)
        .field("observation_yaw", t.observation_yaw)
        .field("prior_index", t.prior_index)
        .field("state", t.state.as_str())
        .field("track_id", t.track_id)
        .build()
}

pub fn to_canon(message: &Message) -> Canon {
    let body = match message {
        Message::Hello(h) => ObjectBuilder::new()
            .field("protocol_version", h.protocol_version.as_str())
            .field("role", h.role.as_str()),
        Message::Ack(a) => ObjectBuilder::new().field("revision", a.revision),
        Message::Frame(f) => ObjectBuilder::new()
            .field("frame_id", f.frame_id)
            .field("timestamp_us", f.timestamp_us)
            .field("tracks", Canon::Array(f.tracks.iter().map(track_canon).collect())),
        Message::Config(c) => ObjectBuilder::new()
            .field("revision", c.revision)
            .field("templates", Canon::Array(c.templates.iter().map(template_canon).collect())),
        Message::Record(r) => ObjectBuilder::new()
            .field("driver_id", r.driver_id)
            .field("frame_id", r.frame_id)
            .field("gt_bbox", bbox_canon(&r.gt_bbox))
            .field("noisy_bbox", r.noisy_bbox.as_ref().map_or(Canon::Null, bbox_canon))
            .field("observation_yaw", r.observation_yaw)
            .field("prior_index", r.prior_index),
    };
    body.field("type", message.type_name()).build()
}

/// Canonical line for `message`, newline included.
pub fn encode(message: &Message) -> Result<String, ProtocolError> {
    let canon = to_canon(message);
    if let Some(path) = canon.find_non_finite() {
        return Err(ProtocolError::NonFinite(path));
    }
    let mut line = canon.to_canonical_string();
    line.push('\n');
    Ok(line)
}

// ---------------------------------------------------------------------------
// decode

pub(crate) fn malformed(path: &str, reason: impl Into<String>) -> ProtocolError {
    ProtocolError::Malformed { path: path.to_owned(), reason: reason.into() }
}

pub(crate) fn join(path: &str, key: &str) -> String {
    if path.is_empty() {
        key.to_owned()
    } else {
        format!("{path}.{key}")
    }
}

pub(crate) fn as_object<'a>(v: &'a Value, path: &str) -> Result<&'a Map<String, Value>, ProtocolError> {
    v.as_object().ok_or_else(|| malformed(path, "expected an object"))
}

pub(crate) fn field<'a>(obj: &'a Map<String, Value>, path: &str, key: &str) -> Result<(&'a Value, String), ProtocolError> {
    let p = join(path, key);
    match obj.get(key) {
        Some(v) => Ok((v, p)),
        None => Err(ProtocolError::MissingField(p)),
    }
}

pub(crate) fn get_u64(obj: &Map<String, Value>, path: &str, key: &str) -> Result<u64, ProtocolError> {
    let (v, p) = field(obj, path, key)?;
    v.as_u64().ok_or_else(|| malformed(&p, "expected a nonnegative integer"))
}

pub(crate) fn get_u32(obj: &Map<String, Value>, path: &str, key: &str) -> Result<u32, ProtocolError> {
    let (v, p) = field(obj, path, key)?;
    v.as_u64()
        .and_then(|x| u32::try_from(x).ok())
        .ok_or_else(|| malformed(&p, "expected a 32-bit nonnegative integer"))
}

pub(crate) fn get_i64(obj: &Map<String, Value>, path: &str, key: &str) -> Result<i64, ProtocolError> {
    let (v, p) = field(obj, path, key)?;
    v.as_i64().ok_or_else(|| malformed(&p, "expected an integer"))
}

pub(crate) fn num(v: &Value, path: &str) -> Result<f64, ProtocolError> {
    v.as_f64().ok_or_else(|| malformed(path, "expected a number"))
}

pub(crate) fn get_f64(obj: &Map<String, Value>, path: &str, key: &str) -> Result<f64, ProtocolError> {
    let (v, p) = field(obj, path, key)?;
    num(v, &p)
}

pub(crate) fn get_str<'a>(obj: &'a Map<String, Value>, path: &str, key: &str) -> Result<&'a str, ProtocolError> {
    let (v, p) = field(obj, path, key)?;
    v.as_str().ok_or_else(|| malformed(&p, "expected a string"))
}

pub(crate) fn get_bool(obj: &Map<String, Value>, path: &str, key: &str) -> Result<bool, ProtocolError> {
    let (v, p) = field(obj, path, key)?;
    v.as_bool().ok_or_else(|| malformed(&p, "expected a boolean"))
}

pub(crate) fn get_array<'a>(obj: &'a Map<String, Value>, path: &str, key: &str) -> Result<(&'a [Value], String), ProtocolError> {
    let (v, p) = field(obj, path, key)?;
    let items = v.as_array().ok_or_else(|| malformed(&p, "expected an array"))?;
    Ok((items, p))
}

fn parse_bbox(v: &Value, path: &str) -> Result<BBox, ProtocolError> {
    let o = as_object(v, path)?;
    let b = BBox {
        x_min: get_f64(o, path, "x_min")?,
        y_min: get_f64(o, path, "y_min")?,
        x_max: get_f64(o, path, "x_max")?,
        y_max: get_f64(o, path, "y_max")?,
    };
    if !b.is_valid() {
        return Err(malformed(path, "min exceeds max"));
    }
    Ok(b)
}

pub(crate) fn parse_template(v: &Value, path: &str) -> Result<OverlayTemplate, ProtocolError> {
    let o = as_object(v, path)?;
    let (anchor_v, anchor_p) = field(o, path, "anchor")?;
    let ao = as_object(anchor_v, &anchor_p)?;
    let anchor = match get_str(ao, &anchor_p, "kind")? {
        "center" => AnchorKind::Center,
        "above_box" => AnchorKind::AboveBox,
        "part" => {
            let name = get_str(ao, &anchor_p, "part")?;
            let part = PartId::parse(name)
                .ok_or_else(|| malformed(&join(&anchor_p, "part"), format!("unknown part {name:?}")))?;
            AnchorKind::Part(part)
        }
        other => return Err(malformed(&join(&anchor_p, "kind"), format!("unknown anchor kind {other:?}"))),
    };
    let (color_v, color_p) = get_array(o, path, "color")?;
    if color_v.len() != 3 {
        return Err(malformed(&color_p, "expected 3 components"));
    }
    let mut color = [0u8; 3];
    for (i, c) in color_v.iter().enumerate() {
        color[i] = c
            .as_u64()
            .and_then(|x| u8::try_from(x).ok())
            .ok_or_else(|| malformed(&format!("{color_p}[{i}]"), "expected an integer in 0..=255"))?;
    }
    let (offset_v, offset_p) = field(o, path, "offset")?;
    let oo = as_object(offset_v, &offset_p)?;
    Ok(OverlayTemplate {
        template_id: get_u32(o, path, "template_id")?,
        driver_id: get_u32(o, path, "driver_id")?,
        anchor,
        offset: (get_f64(oo, &offset_p, "dx")?, get_f64(oo, &offset_p, "dy")?),
        label: get_str(o, path, "label")?.to_owned(),
        color,
        enabled: get_bool(o, path, "enabled")?,
    })
}

fn parse_track(v: &Value, path: &str) -> Result<TrackReport, ProtocolError> {
    let o = as_object(v, path)?;
    let state_name = get_str(o, path, "state")?;
    let state = TrackState::parse(state_name)
        .ok_or_else(|| malformed(&join(path, "state"), format!("unknown state {state_name:?}")))?;
    let (bbox_v, bbox_p) = field(o, path, "bbox")?;
    let (prior_v, prior_p) = field(o, path, "prior_index")?;
    let prior_index = match prior_v {
        Value::Null => None,
        v => Some(
            v.as_u64()
                .and_then(|x| u32::try_from(x).ok())
                .ok_or_else(|| malformed(&prior_p, "expected an integer or null"))?,
        ),
    };
    let (yaw_v, yaw_p) = field(o, path, "observation_yaw")?;
    let observation_yaw = match yaw_v {
        Value::Null => None,
        v => Some(num(v, &yaw_p)?),
    };
    let (anchors_v, anchors_p) = get_array(o, path, "anchors")?;
    let anchors = anchors_v
        .iter()
        .enumerate()
        .map(|(i, a)| {
            let ap = format!("{anchors_p}[{i}]");
            let ao = as_object(a, &ap)?;
            Ok(AnchorReport {
                template_id: get_u32(ao, &ap, "template_id")?,
                u: get_f64(ao, &ap, "u")?,
                v: get_f64(ao, &ap, "v")?,
            })
        })
        .collect::<Result<_, ProtocolError>>()?;
    Ok(TrackReport {
        driver_id: get_u32(o, path, "driver_id")?,
        track_id: get_u64(o, path, "track_id")?,
        state,
        bbox: parse_bbox(bbox_v, &bbox_p)?,
        confidence: get_f64(o, path, "confidence")?,
        prior_index,
        observation_yaw,
        anchors,
    })
}

/// Parses one line (trailing newline optional).
pub fn decode(line: &str) -> Result<Message, ProtocolError> {
    let value: Value = serde_json::from_str(line).map_err(|e| malformed("", e.to_string()))?;
    decode_value(&value)
}

pub fn decode_value(value: &Value) -> Result<Message, ProtocolError> {
    let o = as_object(value, "")?;
    let kind = get_str(o, "", "type")?;
    match kind {
        "hello" => {
            let role = match get_str(o, "", "role")? {
                "producer" => Role::Producer,
                "console" => Role::Console,
                other => return Err(malformed("role", format!("unknown role {other:?}"))),
            };
            Ok(Message::Hello(Hello { protocol_version: get_str(o, "", "protocol_version")?.to_owned(), role }))
        }
        "ack" => Ok(Message::Ack(Ack { revision: get_u64(o, "", "revision")? })),
        "frame" => {
            let frame_id = get_u64(o, "", "frame_id")?;
            let timestamp_us = get_i64(o, "", "timestamp_us")?;
            let (tracks_v, tracks_p) = get_array(o, "", "tracks")?;
            let tracks = tracks_v
                .iter()
                .enumerate()
                .map(|(i, t)| parse_track(t, &format!("{tracks_p}[{i}]")))
                .collect::<Result<_, _>>()?;
            Ok(Message::Frame(FrameMessage { frame_id, timestamp_us, tracks }))
        }
        "config" => {
            let revision = get_u64(o, "", "revision")?;
            let (templates_v, templates_p) = get_array(o, "", "templates")?;
            let templates = templates_v
                .iter()
                .enumerate()
                .map(|(i, t)| parse_template(t, &format!("{templates_p}[{i}]")))
                .collect::<Result<_, _>>()?;
            Ok(Message::Config(ConfigUpdate { revision, templates }))
        }
        "record" => {
            let (gt_v, gt_p) = field(o, "", "gt_bbox")?;
            let (noisy_v, noisy_p) = field(o, "", "noisy_bbox")?;
            let noisy_bbox = match noisy_v {
                Value::Null => None,
                v => Some(parse_bbox(v, &noisy_p)?),
            };
            Ok(Message::Record(DatasetRecord {
                frame_id: get_u64(o, "", "frame_id")?,
                driver_id: get_u32(o, "", "driver_id")?,
                gt_bbox: parse_bbox(gt_v, &gt_p)?,
                noisy_bbox,
                observation_yaw: get_f64(o, "", "observation_yaw")?,
                prior_index: get_u32(o, "", "prior_index")?,
            }))
        }
        other => Err(ProtocolError::UnknownType(other.to_owned())),
    }
}
