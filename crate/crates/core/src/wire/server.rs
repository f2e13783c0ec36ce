use std::io::Write;
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::Arc;
use std::thread::{self, JoinHandle};

use parking_lot::Mutex;

use super::frame::{encode_frame, read_frame, read_preamble, write_preamble, FLAG_COMPRESSED};
use super::message::{codes, Message};
use super::WireError;

/// Request handler. Called from many threads at once.
pub trait Handler: Send + Sync + 'static {
    fn handle(&self, request: Message) -> Message;
}

impl<F> Handler for F
where
    F: Fn(Message) -> Message + Send + Sync + 'static,
{
    fn handle(&self, request: Message) -> Message {
        self(request)
    }
}

struct ServerState {
    stopping: AtomicBool,
    conns: Mutex<Vec<(u64, TcpStream)>>,
    next_conn: AtomicU64,
}

/// A running threaded RPC server.
pub struct Server {
    addr: SocketAddr,
    state: Arc<ServerState>,
    accept: Mutex<Option<JoinHandle<()>>>,
}

impl Server {
    /// Binds `addr` (use port 0 for an ephemeral port) and starts serving.
    pub fn bind(addr: &str, handler: Arc<dyn Handler>) -> Result<Self, WireError> {
        let listener = TcpListener::bind(addr)
            .map_err(|e| WireError::ConnectionLost(format!("bind {addr}: {e}")))?;
        let local = listener
            .local_addr()
            .map_err(|e| WireError::ConnectionLost(e.to_string()))?;
        let state = Arc::new(ServerState {
            stopping: AtomicBool::new(false),
            conns: Mutex::new(Vec::new()),
            next_conn: AtomicU64::new(0),
        });
        let st = state.clone();
        let accept = thread::Builder::new()
            .name(format!("wire-accept-{local}"))
            .spawn(move || accept_loop(listener, st, handler))
            .map_err(|e| WireError::ConnectionLost(e.to_string()))?;
        Ok(Self {
            addr: local,
            state,
            accept: Mutex::new(Some(accept)),
        })
    }

    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    /// Stops accepting and closes every open connection.
    pub fn shutdown(&self) {
        if self.state.stopping.swap(true, Ordering::AcqRel) {
            return;
        }
        // Wake the blocking accept.
        let _ = TcpStream::connect(self.addr);
        if let Some(h) = self.accept.lock().take() {
            let _ = h.join();
        }
        for (_, s) in self.state.conns.lock().drain(..) {
            let _ = s.shutdown(Shutdown::Both);
        }
    }
}

impl Drop for Server {
    fn drop(&mut self) {
        self.shutdown();
    }
}

fn accept_loop(listener: TcpListener, state: Arc<ServerState>, handler: Arc<dyn Handler>) {
    for incoming in listener.incoming() {
        if state.stopping.load(Ordering::Acquire) {
            break;
        }
        let stream = match incoming {
            Ok(s) => s,
            Err(e) => {
                log::warn!("accept failed: {e}");
                continue;
            }
        };
        let _ = stream.set_nodelay(true);
        let id = state.next_conn.fetch_add(1, Ordering::Relaxed);
        if let Ok(c) = stream.try_clone() {
            state.conns.lock().push((id, c));
        }
        let handler = handler.clone();
        let st = state.clone();
        let spawned = thread::Builder::new()
            .name(format!("wire-conn-{id}"))
            .spawn(move || {
                serve_connection(stream, handler);
                st.conns.lock().retain(|(cid, _)| *cid != id);
            });
        if let Err(e) = spawned {
            log::error!("cannot spawn connection thread: {e}");
        }
    }
}

fn serve_connection(mut stream: TcpStream, handler: Arc<dyn Handler>) {
    if read_preamble(&mut stream).is_err() {
        let _ = stream.shutdown(Shutdown::Both);
        return;
    }
    let writer = match stream.try_clone() {
        Ok(w) => Arc::new(Mutex::new(w)),
        Err(_) => return,
    };
    if write_preamble(&mut *writer.lock()).is_err() {
        return;
    }
    loop {
        let frame = match read_frame(&mut stream) {
            Ok(Some(f)) => f,
            Ok(None) => break,
            Err(e) => {
                log::debug!("connection dropped: {e}");
                break;
            }
        };
        let id = frame.header.correlation_id;
        let compressed = frame.header.flags & FLAG_COMPRESSED != 0;
        match frame.message {
            Ok(req) if req.is_request() => {
                let handler = handler.clone();
                let w = writer.clone();
                let spawned = thread::Builder::new()
                    .name("wire-req".into())
                    .spawn(move || {
                        let resp = handler.handle(req);
                        send(&w, &resp, id, compressed);
                    });
                if spawned.is_err() {
                    send(
                        &writer,
                        &Message::error(codes::INTERNAL, "overloaded"),
                        id,
                        false,
                    );
                }
            }
            Ok(other) => send(
                &writer,
                &Message::error(
                    codes::BAD_REQUEST,
                    format!("type {:#06x} is not a request", other.msg_type()),
                ),
                id,
                false,
            ),
            Err(WireError::UnknownType(t)) => send(
                &writer,
                &Message::error(
                    codes::UNKNOWN_TYPE,
                    format!("unknown message type {t:#06x}"),
                ),
                id,
                false,
            ),
            Err(e) => send(
                &writer,
                &Message::error(codes::BAD_REQUEST, e.to_string()),
                id,
                false,
            ),
        }
    }
    let _ = stream.shutdown(Shutdown::Both);
}

fn send(writer: &Mutex<TcpStream>, msg: &Message, id: u64, compressed: bool) {
    let frame = match encode_frame(msg, id, compressed) {
        Ok(f) => f,
        Err(e) => match encode_frame(&Message::error(codes::INTERNAL, e.to_string()), id, false) {
            Ok(f) => f,
            Err(_) => return,
        },
    };
    if let Err(e) = writer.lock().write_all(&frame) {
        log::debug!("write failed: {e}");
    }
}
