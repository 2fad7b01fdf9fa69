//! WebSocket fan-out of frame lines to operator consoles.
//!
//! Each console connection follows Hello exchange -> current config -> frames.
//! Frames go through a single depth-1 slot: a connection that is still busy
//! sending when newer frames arrive simply sees the newest one next, so a slow
//! console skips frames and the publisher never waits. Config updates from any
//! console pass through one compare-and-swap on the revision number; accepted
//! revisions are re-broadcast to every connection.

use std::net::SocketAddr;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::time::Duration;

use futures_util::{SinkExt, StreamExt};
use log::{debug, info, warn};
use thiserror::Error;
use tokio::net::{TcpListener, TcpSocket, TcpStream};
use tokio::runtime::Runtime;
use tokio::sync::watch;
use tokio_tungstenite::tungstenite::Message as WsMessage;

use super::{decode, encode, Ack, ConfigUpdate, Hello, Message, Role, PROTOCOL_VERSION};

const HELLO_TIMEOUT: Duration = Duration::from_secs(5);

#[derive(Debug, Error)]
pub enum ServerError {
    #[error("cannot bind {addr}: {source}")]
    BindFailure { addr: String, source: std::io::Error },
    #[error("cannot start server runtime: {0}")]
    Runtime(std::io::Error),
}

/// A frame already encoded for the wire.
#[derive(Debug, Clone, PartialEq)]
pub struct PublishedFrame {
    pub frame_id: u64,
    pub line: Arc<str>,
}

/// Producer side of the latest-wins frame slot. Never blocks.
#[derive(Debug, Clone)]
pub struct FramePublisher {
    slot: Arc<watch::Sender<Option<Arc<PublishedFrame>>>>,
}

impl FramePublisher {
    pub fn publish(&self, frame_id: u64, line: impl Into<Arc<str>>) {
        self.slot.send_replace(Some(Arc::new(PublishedFrame { frame_id, line: line.into() })));
    }
}

/// Serialized access to the current template configuration.
#[derive(Debug, Clone)]
pub struct ConfigSlot {
    tx: Arc<watch::Sender<Arc<ConfigUpdate>>>,
}

impl ConfigSlot {
    pub fn new(initial: ConfigUpdate) -> Self {
        Self { tx: Arc::new(watch::Sender::new(Arc::new(initial))) }
    }

    pub fn current(&self) -> Arc<ConfigUpdate> {
        self.tx.borrow().clone()
    }

    /// Installs `update` if its revision is newer. Returns whether it was applied.
    pub fn apply(&self, update: ConfigUpdate) -> bool {
        let mut update = Some(update);
        self.tx.send_if_modified(|current| {
            if update.as_ref().is_some_and(|u| u.revision > current.revision) {
                *current = Arc::new(update.take().expect("checked above"));
                true
            } else {
                false
            }
        })
    }

    fn subscribe(&self) -> watch::Receiver<Arc<ConfigUpdate>> {
        self.tx.subscribe()
    }
}

pub struct ServerHandle {
    local_addr: SocketAddr,
    publisher: FramePublisher,
    config: ConfigSlot,
    shutdown: watch::Sender<bool>,
    connections: Arc<AtomicUsize>,
    runtime: Option<Runtime>,
}

impl ServerHandle {
    pub fn local_addr(&self) -> SocketAddr {
        self.local_addr
    }

    pub fn publisher(&self) -> FramePublisher {
        self.publisher.clone()
    }

    pub fn config(&self) -> &ConfigSlot {
        &self.config
    }

    pub fn connection_count(&self) -> usize {
        self.connections.load(Ordering::SeqCst)
    }

    /// Closes every connection and releases the listening socket.
    pub fn shutdown(mut self) {
        self.stop();
    }

    fn stop(&mut self) {
        let _ = self.shutdown.send(true);
        if let Some(rt) = self.runtime.take() {
            rt.shutdown_timeout(Duration::from_secs(2));
        }
    }
}

impl Drop for ServerHandle {
    fn drop(&mut self) {
        self.stop();
    }
}

/// Binds `addr` and serves consoles on a background runtime.
pub fn serve(addr: &str, initial: ConfigUpdate) -> Result<ServerHandle, ServerError> {
    let runtime = tokio::runtime::Builder::new_multi_thread()
        .worker_threads(2)
        .thread_name("overlay-server")
        .enable_all()
        .build()
        .map_err(ServerError::Runtime)?;
    let listener = runtime
        .block_on(bind(addr))
        .map_err(|source| ServerError::BindFailure { addr: addr.to_owned(), source })?;
    let local_addr = listener.local_addr().map_err(|source| ServerError::BindFailure { addr: addr.to_owned(), source })?;

    let (frame_tx, frame_rx) = watch::channel(None);
    let publisher = FramePublisher { slot: Arc::new(frame_tx) };
    let config = ConfigSlot::new(initial);
    let (shutdown, shutdown_rx) = watch::channel(false);
    let connections = Arc::new(AtomicUsize::new(0));

    let ctx = Shared { frames: frame_rx, config: config.clone(), shutdown: shutdown_rx, connections: connections.clone() };
    runtime.spawn(accept_loop(listener, ctx));
    info!("serving consoles on ws://{local_addr}");

    Ok(ServerHandle { local_addr, publisher, config, shutdown, connections, runtime: Some(runtime) })
}

/// Kernel send buffer per connection. Accepted sockets inherit it from the
/// listener. Kept small so a stalled console backs up into the latest-wins
/// slot within a few frames instead of queueing seconds of stale data.
const SEND_BUFFER_BYTES: u32 = 16 * 1024;

async fn bind(addr: &str) -> std::io::Result<TcpListener> {
    let mut last_err = None;
    for resolved in tokio::net::lookup_host(addr).await? {
        let socket = if resolved.is_ipv4() { TcpSocket::new_v4()? } else { TcpSocket::new_v6()? };
        socket.set_reuseaddr(true)?;
        socket.set_send_buffer_size(SEND_BUFFER_BYTES)?;
        match socket.bind(resolved).and_then(|()| socket.listen(128)) {
            Ok(listener) => return Ok(listener),
            Err(e) => last_err = Some(e),
        }
    }
    Err(last_err.unwrap_or_else(|| std::io::Error::new(std::io::ErrorKind::NotFound, "address did not resolve")))
}

#[derive(Clone)]
struct Shared {
    frames: watch::Receiver<Option<Arc<PublishedFrame>>>,
    config: ConfigSlot,
    shutdown: watch::Receiver<bool>,
    connections: Arc<AtomicUsize>,
}

async fn accept_loop(listener: TcpListener, ctx: Shared) {
    let mut shutdown = ctx.shutdown.clone();
    loop {
        tokio::select! {
            _ = shutdown.changed() => break,
            accepted = listener.accept() => match accepted {
                Ok((stream, peer)) => {
                    let ctx = ctx.clone();
                    tokio::spawn(async move {
                        ctx.connections.fetch_add(1, Ordering::SeqCst);
                        if let Err(e) = handle_connection(stream, ctx.clone()).await {
                            debug!("connection {peer} closed: {e}");
                        }
                        ctx.connections.fetch_sub(1, Ordering::SeqCst);
                    });
                }
                Err(e) => warn!("accept failed: {e}"),
            },
        }
    }
}

#[derive(Debug, Error)]
enum ConnectionError {
    #[error(transparent)]
    Ws(#[from] tokio_tungstenite::tungstenite::Error),
    #[error(transparent)]
    Protocol(#[from] super::ProtocolError),
    #[error("{0}")]
    Handshake(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

fn text(message: &Message) -> Result<WsMessage, ConnectionError> {
    Ok(WsMessage::text(encode(message)?))
}

async fn handle_connection(stream: TcpStream, mut ctx: Shared) -> Result<(), ConnectionError> {
    stream.set_nodelay(true)?;
    let mut ws = tokio_tungstenite::accept_async(stream).await?;

    let first = tokio::time::timeout(HELLO_TIMEOUT, ws.next())
        .await
        .map_err(|_| ConnectionError::Handshake("no hello received".into()))?;
    let hello = match first {
        Some(Ok(WsMessage::Text(t))) => match decode(t.as_str())? {
            Message::Hello(h) => h,
            other => return Err(ConnectionError::Handshake(format!("expected hello, got {}", other.type_name()))),
        },
        _ => return Err(ConnectionError::Handshake("expected a text hello".into())),
    };
    ws.send(text(&Message::Hello(Hello::new(Role::Producer)))?).await?;
    if hello.protocol_version != PROTOCOL_VERSION {
        let _ = ws.close(None).await;
        return Err(ConnectionError::Handshake(format!("unsupported protocol {:?}", hello.protocol_version)));
    }

    let mut config_rx = ctx.config.subscribe();
    let current = config_rx.borrow_and_update().clone();
    ws.send(text(&Message::Config((*current).clone()))?).await?;
    let mut sent_revision = current.revision;

    let mut last_frame: Option<u64> = None;
    // frames published before this console connected are not replayed
    ctx.frames.mark_unchanged();

    loop {
        tokio::select! {
            _ = ctx.shutdown.changed() => {
                let _ = ws.close(None).await;
                return Ok(());
            }
            changed = ctx.frames.changed() => {
                if changed.is_err() {
                    return Ok(());
                }
                let latest = ctx.frames.borrow_and_update().clone();
                if let Some(frame) = latest {
                    if last_frame.is_none_or(|last| frame.frame_id > last) {
                        ws.send(WsMessage::text(frame.line.to_string())).await?;
                        last_frame = Some(frame.frame_id);
                    }
                }
            }
            changed = config_rx.changed() => {
                if changed.is_err() {
                    return Ok(());
                }
                let cfg = config_rx.borrow_and_update().clone();
                if cfg.revision > sent_revision {
                    ws.send(text(&Message::Config((*cfg).clone()))?).await?;
                    sent_revision = cfg.revision;
                }
            }
            incoming = ws.next() => match incoming {
                Some(Ok(WsMessage::Text(t))) => match decode(t.as_str())? {
                    Message::Config(update) => {
                        let revision = update.revision;
                        let accepted = ctx.config.apply(update.quantized());
                        let acked = if accepted { revision } else { ctx.config.current().revision };
                        debug!("config revision {revision} accepted={accepted}");
                        ws.send(text(&Message::Ack(Ack { revision: acked }))?).await?;
                    }
                    other => debug!("ignoring {} from console", other.type_name()),
                },
                Some(Ok(WsMessage::Close(_))) | None => return Ok(()),
                Some(Ok(_)) => {}
                Some(Err(e)) => return Err(e.into()),
            },
        }
    }
}
