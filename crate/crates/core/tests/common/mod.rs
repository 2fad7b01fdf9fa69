#![allow(dead_code)]

use std::net::SocketAddr;
use std::time::Duration;

use futures_util::{SinkExt, StreamExt};
use tokio::net::TcpStream;
use tokio_tungstenite::tungstenite::Message as WsMessage;
use tokio_tungstenite::{MaybeTlsStream, WebSocketStream};

use overlay_core::geometry::BBox;
use overlay_core::overlay::{AnchorKind, OverlayTemplate, PartId};
use overlay_core::protocol::{
    decode, encode, Ack, AnchorReport, ConfigUpdate, DatasetRecord, FrameMessage, Hello, Message, Role, TrackReport,
};
use overlay_core::tracker::TrackState;

pub type Ws = WebSocketStream<MaybeTlsStream<TcpStream>>;

pub fn runtime() -> tokio::runtime::Runtime {
    tokio::runtime::Builder::new_current_thread().enable_all().build().unwrap()
}

pub async fn connect(addr: SocketAddr) -> Ws {
    let (ws, _) = tokio_tungstenite::connect_async(format!("ws://{addr}")).await.unwrap();
    ws
}

pub async fn send(ws: &mut Ws, message: &Message) {
    ws.send(WsMessage::text(encode(message).unwrap())).await.unwrap();
}

/// Like [`connect`] but with a small kernel receive buffer, modelling a
/// console that stops reading instead of one backed by megabytes of buffering.
pub async fn connect_small_buffer(addr: SocketAddr) -> Ws {
    let socket = tokio::net::TcpSocket::new_v4().unwrap();
    socket.set_recv_buffer_size(8 * 1024).unwrap();
    let stream = socket.connect(addr).await.unwrap();
    let (ws, _) = tokio_tungstenite::client_async(format!("ws://{addr}"), MaybeTlsStream::Plain(stream)).await.unwrap();
    ws
}

/// Next protocol message, or `None` on close or timeout.
pub async fn recv(ws: &mut Ws, timeout: Duration) -> Option<Message> {
    loop {
        match tokio::time::timeout(timeout, ws.next()).await {
            Ok(Some(Ok(WsMessage::Text(t)))) => return Some(decode(t.as_str()).unwrap()),
            Ok(Some(Ok(WsMessage::Close(_)))) | Ok(None) | Ok(Some(Err(_))) | Err(_) => return None,
            Ok(Some(Ok(_))) => continue,
        }
    }
}

/// Connects and completes the Hello exchange; returns the initial config.
pub async fn handshake(addr: SocketAddr) -> (Ws, ConfigUpdate) {
    finish_handshake(connect(addr).await).await
}

pub async fn finish_handshake(mut ws: Ws) -> (Ws, ConfigUpdate) {
    send(&mut ws, &Message::Hello(Hello::new(Role::Console))).await;
    let hello = recv(&mut ws, Duration::from_secs(5)).await;
    assert!(matches!(hello, Some(Message::Hello(h)) if h.role == Role::Producer));
    match recv(&mut ws, Duration::from_secs(5)).await {
        Some(Message::Config(c)) => (ws, c),
        other => panic!("expected config, got {other:?}"),
    }
}

pub fn template(template_id: u32, driver_id: u32, anchor: AnchorKind, enabled: bool) -> OverlayTemplate {
    OverlayTemplate {
        template_id,
        driver_id,
        anchor,
        offset: (0.0, -8.5),
        label: format!("Driver {driver_id}"),
        color: [10, 200, 255],
        enabled,
    }
}

pub fn config(revision: u64) -> ConfigUpdate {
    ConfigUpdate {
        revision,
        templates: vec![
            template(1, 1, AnchorKind::AboveBox, true),
            template(2, 1, AnchorKind::Part(PartId::Driver), false),
        ],
    }
}

/// A frame the size of a busy race: 20 tracks with anchors.
pub fn big_frame(frame_id: u64) -> FrameMessage {
    let one = frame(frame_id).tracks.remove(0);
    let tracks = (1..=20u32).map(|d| TrackReport { driver_id: d, track_id: d as u64, ..one.clone() }).collect();
    FrameMessage { tracks, ..frame(frame_id) }
}

pub fn frame(frame_id: u64) -> FrameMessage {
    FrameMessage {
        frame_id,
        timestamp_us: frame_id as i64 * 40_000,
        tracks: vec![TrackReport {
            driver_id: 1,
            track_id: 1,
            state: TrackState::Confirmed,
            bbox: BBox::from_corners(100.0, 50.0, 140.5, 70.25),
            confidence: 0.875,
            prior_index: Some(3),
            observation_yaw: Some(1.0472),
            anchors: vec![AnchorReport { template_id: 1, u: 120.25, v: 41.5 }],
        }],
    }
}

/// Frozen protocol corpus: every message type, every enum variant, optional
/// fields both present and absent, and awkward numbers (negative zero,
/// half-way rounding cases, large magnitudes, non-ASCII text).
pub fn corpus() -> Vec<Message> {
    let bbox = BBox::from_corners(-12.5, 0.0, 1279.9999, 719.0);
    let mut out = vec![
        Message::Hello(Hello::new(Role::Producer)),
        Message::Hello(Hello::new(Role::Console)),
        Message::Hello(Hello { protocol_version: "overlay/0".into(), role: Role::Console }),
        Message::Ack(Ack { revision: 0 }),
        Message::Ack(Ack { revision: 18_446_744_073_709_551_615 }),
        Message::Frame(FrameMessage { frame_id: 0, timestamp_us: 0, tracks: vec![] }),
        Message::Frame(frame(1)),
        Message::Frame(FrameMessage { frame_id: 7, timestamp_us: -40_000, tracks: vec![] }),
    ];
    let states = [TrackState::Tentative, TrackState::Confirmed, TrackState::Coasting];
    let tracks: Vec<TrackReport> = states
        .iter()
        .enumerate()
        .map(|(i, &state)| TrackReport {
            driver_id: 10 + i as u32,
            track_id: 100 + i as u64,
            state,
            bbox,
            confidence: [0.5, 0.03125, 0.99995][i],
            prior_index: if i == 0 { None } else { Some(17 * (i as u32 - 1)) },
            observation_yaw: if i == 0 { None } else { Some([-0.0, -3.14159265][i - 1]) },
            anchors: (0..i as u32)
                .map(|k| AnchorReport { template_id: k + 1, u: -0.00004 + k as f64, v: 1e6 + 0.12345 })
                .collect(),
        })
        .collect();
    out.push(Message::Frame(FrameMessage { frame_id: 250, timestamp_us: 10_000_000, tracks: tracks.clone() }));
    for t in &tracks {
        out.push(Message::Frame(FrameMessage { frame_id: 300 + t.track_id, timestamp_us: 1, tracks: vec![t.clone()] }));
    }
    out.push(Message::Config(ConfigUpdate { revision: 0, templates: vec![] }));
    out.push(Message::Config(config(1)));
    let anchors = [
        AnchorKind::Center,
        AnchorKind::AboveBox,
        AnchorKind::Part(PartId::FrontLeftTire),
        AnchorKind::Part(PartId::FrontRightTire),
        AnchorKind::Part(PartId::RearLeftTire),
        AnchorKind::Part(PartId::RearRightTire),
        AnchorKind::Part(PartId::Driver),
        AnchorKind::Part(PartId::Rear),
    ];
    let all: Vec<OverlayTemplate> = anchors
        .iter()
        .enumerate()
        .map(|(i, &a)| OverlayTemplate {
            template_id: i as u32 + 1,
            driver_id: 44,
            anchor: a,
            offset: (i as f64 * 0.09375, -(i as f64) * 2.5),
            label: ["Pôle", "\"quoted\"", "tab\there", "line\nbreak", "back\\slash", "日本", "", "x"][i].into(),
            color: [i as u8 * 30, 255, 0],
            enabled: i % 2 == 0,
        })
        .collect();
    out.push(Message::Config(ConfigUpdate { revision: 42, templates: all }));
    out.push(Message::Config(ConfigUpdate { revision: 6, templates: vec![template(9, 7, AnchorKind::Center, true)] }));
    out.push(Message::Ack(Ack { revision: 7 }));
    out.push(Message::Frame(FrameMessage {
        frame_id: 9_007_199_254_740_993,
        timestamp_us: 1_760_000_000_123_456,
        tracks: vec![TrackReport {
            driver_id: u32::MAX,
            track_id: u64::MAX,
            state: TrackState::Tentative,
            bbox: BBox::from_corners(0.00005, 0.00015, 0.00025, 0.00035),
            confidence: 0.0,
            prior_index: Some(9),
            observation_yaw: Some(3.141592653589793),
            anchors: vec![],
        }],
    }));
    out.push(Message::Record(DatasetRecord {
        frame_id: 123_456,
        driver_id: 99,
        gt_bbox: BBox::from_corners(99999.99995, 5.55555, 100000.5, 6.0),
        noisy_bbox: Some(BBox::from_corners(-0.00005, -0.00004, 0.00004, 0.00005)),
        observation_yaw: -3.14159265,
        prior_index: 0,
    }));
    out.push(Message::Record(DatasetRecord {
        frame_id: 0,
        driver_id: 1,
        gt_bbox: bbox,
        noisy_bbox: None,
        observation_yaw: 0.0,
        prior_index: 0,
    }));
    out.push(Message::Record(DatasetRecord {
        frame_id: 9,
        driver_id: 3,
        gt_bbox: bbox,
        noisy_bbox: Some(BBox::from_corners(1.00005, 2.00015, 3.5, 4.75)),
        observation_yaw: 3.14159,
        prior_index: 17,
    }));
    out.push(Message::Record(DatasetRecord {
        frame_id: 10,
        driver_id: 3,
        gt_bbox: BBox::from_corners(0.0, 0.0, 0.0, 0.0),
        noisy_bbox: Some(BBox::from_corners(-5.0, -5.0, -4.0, -4.0)),
        observation_yaw: -1.5708,
        prior_index: 13,
    }));
    out
}
