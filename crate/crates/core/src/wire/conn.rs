use std::collections::HashMap;
use std::io::Write;
use std::net::{Shutdown, SocketAddr, TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::Arc;
use std::thread;
use std::time::Duration;

use crossbeam_channel::{bounded, Sender};
use parking_lot::Mutex;

use super::frame::{encode_frame, read_frame, read_preamble, write_preamble};
use super::message::Message;
use super::WireError;

#[derive(Debug, Clone, Default)]
pub struct ConnectOptions {
    pub connect_timeout: Option<Duration>,
    /// Compress request bodies; the server mirrors the choice on responses.
    pub compress: bool,
    /// Artificial delay added before each request is sent.
    pub injected_latency: Duration,
}

type Pending = Mutex<HashMap<u64, Sender<Result<Message, WireError>>>>;

struct Shared {
    writer: Mutex<TcpStream>,
    pending: Arc<Pending>,
    alive: Arc<AtomicBool>,
    lost_reason: Arc<Mutex<Option<String>>>,
    next_id: AtomicU64,
    options: ConnectOptions,
    peer: SocketAddr,
}

impl Drop for Shared {
    fn drop(&mut self) {
        let _ = self.writer.lock().shutdown(Shutdown::Both);
    }
}

/// A multiplexed client connection. Clones share the socket; concurrent
/// calls are matched to responses by correlation id.
#[derive(Clone)]
pub struct Connection {
    shared: Arc<Shared>,
}

impl std::fmt::Debug for Connection {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Connection")
            .field("peer", &self.shared.peer)
            .finish()
    }
}

impl Connection {
    pub fn connect(addr: &str, options: ConnectOptions) -> Result<Self, WireError> {
        let lost = |e: std::io::Error| WireError::ConnectionLost(format!("{addr}: {e}"));
        let peer = addr
            .to_socket_addrs()
            .map_err(lost)?
            .next()
            .ok_or_else(|| WireError::ConnectionLost(format!("{addr}: no address")))?;
        let mut stream = match options.connect_timeout {
            Some(t) => TcpStream::connect_timeout(&peer, t),
            None => TcpStream::connect(peer),
        }
        .map_err(lost)?;
        stream.set_nodelay(true).map_err(lost)?;
        write_preamble(&mut stream).map_err(lost)?;
        stream
            .set_read_timeout(Some(
                options.connect_timeout.unwrap_or(Duration::from_secs(10)),
            ))
            .map_err(lost)?;
        read_preamble(&mut stream)?;
        stream.set_read_timeout(None).map_err(lost)?;

        let pending: Arc<Pending> = Arc::default();
        let alive = Arc::new(AtomicBool::new(true));
        let lost_reason = Arc::new(Mutex::new(None));
        let reader = stream.try_clone().map_err(lost)?;
        {
            let pending = pending.clone();
            let alive = alive.clone();
            let lost_reason = lost_reason.clone();
            thread::Builder::new()
                .name(format!("wire-reader-{peer}"))
                .spawn(move || reader_loop(reader, pending, alive, lost_reason))
                .map_err(lost)?;
        }
        Ok(Self {
            shared: Arc::new(Shared {
                writer: Mutex::new(stream),
                pending,
                alive,
                lost_reason,
                next_id: AtomicU64::new(1),
                options,
                peer,
            }),
        })
    }

    pub fn peer(&self) -> SocketAddr {
        self.shared.peer
    }

    pub fn is_alive(&self) -> bool {
        self.shared.alive.load(Ordering::Acquire)
    }

    fn lost_error(&self) -> WireError {
        WireError::ConnectionLost(
            self.shared
                .lost_reason
                .lock()
                .clone()
                .unwrap_or_else(|| "connection closed".into()),
        )
    }

    /// Sends `request` and waits for its response. An `Error` response comes
    /// back as [`WireError::RemoteError`].
    pub fn call(&self, request: &Message, timeout: Duration) -> Result<Message, WireError> {
        if !self.is_alive() {
            return Err(self.lost_error());
        }
        let s = &self.shared;
        if !s.options.injected_latency.is_zero() {
            thread::sleep(s.options.injected_latency);
        }
        let id = s.next_id.fetch_add(1, Ordering::Relaxed);
        let frame = encode_frame(request, id, s.options.compress)?;
        let (tx, rx) = bounded(1);
        s.pending.lock().insert(id, tx);
        let written = s.writer.lock().write_all(&frame);
        if let Err(e) = written {
            s.pending.lock().remove(&id);
            s.alive.store(false, Ordering::Release);
            return Err(WireError::ConnectionLost(e.to_string()));
        }
        // The reader may have died between the liveness check and insert.
        if !self.is_alive() {
            if let Some(_tx) = s.pending.lock().remove(&id) {
                return Err(self.lost_error());
            }
        }
        let reply = match rx.recv_timeout(timeout) {
            Ok(r) => r,
            Err(_) => {
                s.pending.lock().remove(&id);
                return Err(if self.is_alive() {
                    WireError::Timeout
                } else {
                    self.lost_error()
                });
            }
        }?;
        match reply {
            Message::Error { code, detail } => Err(WireError::RemoteError { code, detail }),
            other => {
                if let Some(expected) = Message::response_type(request.msg_type()) {
                    if other.msg_type() != expected {
                        return Err(WireError::Malformed(format!(
                            "response type {:#06x} for request {:#06x}",
                            other.msg_type(),
                            request.msg_type()
                        )));
                    }
                }
                Ok(other)
            }
        }
    }

    pub fn close(&self) {
        let _ = self.shared.writer.lock().shutdown(Shutdown::Both);
    }
}

fn reader_loop(
    mut stream: TcpStream,
    pending: Arc<Pending>,
    alive: Arc<AtomicBool>,
    lost_reason: Arc<Mutex<Option<String>>>,
) {
    let reason = loop {
        match read_frame(&mut stream) {
            Ok(Some(frame)) => {
                let id = frame.header.correlation_id;
                if let Err(WireError::UnknownType(t)) = &frame.message {
                    log::warn!("skipping frame of unknown type {t:#06x}");
                    continue;
                }
                if let Some(tx) = pending.lock().remove(&id) {
                    let _ = tx.send(frame.message);
                } else {
                    log::debug!("response for unknown correlation id {id}");
                }
            }
            Ok(None) => break "peer closed the connection".to_string(),
            Err(e) => break e.to_string(),
        }
    };
    *lost_reason.lock() = Some(reason.clone());
    alive.store(false, Ordering::Release);
    for (_, tx) in pending.lock().drain() {
        let _ = tx.send(Err(WireError::ConnectionLost(reason.clone())));
    }
}

/// A lazily (re)connecting handle to one address. A lost connection is
/// dropped and the next call dials again.
#[derive(Debug)]
pub struct Endpoint {
    addr: String,
    options: ConnectOptions,
    conn: Mutex<Option<Connection>>,
}

impl Endpoint {
    pub fn new(addr: impl Into<String>, options: ConnectOptions) -> Self {
        Self {
            addr: addr.into(),
            options,
            conn: Mutex::new(None),
        }
    }

    pub fn addr(&self) -> &str {
        &self.addr
    }

    fn connection(&self) -> Result<Connection, WireError> {
        let mut slot = self.conn.lock();
        if let Some(c) = slot.as_ref() {
            if c.is_alive() {
                return Ok(c.clone());
            }
        }
        let mut opts = self.options.clone();
        opts.connect_timeout.get_or_insert(Duration::from_secs(2));
        let c = Connection::connect(&self.addr, opts)?;
        *slot = Some(c.clone());
        Ok(c)
    }

    pub fn call(&self, request: &Message, timeout: Duration) -> Result<Message, WireError> {
        let conn = self.connection()?;
        let r = conn.call(request, timeout);
        if let Err(WireError::ConnectionLost(_)) = &r {
            let mut slot = self.conn.lock();
            if slot
                .as_ref()
                .map(|c| Arc::ptr_eq(&c.shared, &conn.shared))
                .unwrap_or(false)
            {
                *slot = None;
            }
        }
        r
    }

    pub fn close(&self) {
        if let Some(c) = self.conn.lock().take() {
            c.close();
        }
    }
}
