//! Async framed connections: message I/O and a request/response client that
//! also surfaces notifications and channel payloads.

use std::collections::HashMap;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use expd_core::wire::{self, ChannelData, ErrorCode, ErrorReply, Hello, HelloReply, Message, Notify, WireError};
use serde::de::DeserializeOwned;
use tokio::io::{AsyncRead, AsyncReadExt, AsyncWrite, AsyncWriteExt};
use tokio::net::TcpStream;
use tokio::sync::{mpsc, oneshot};

/// Reads one message; `Ok(None)` on a clean EOF between frames.
pub async fn read_message<R: AsyncRead + Unpin>(r: &mut R) -> Result<Option<Message>, WireError> {
    let mut len = [0u8; 4];
    let mut got = 0;
    while got < 4 {
        let n = r.read(&mut len[got..]).await?;
        if n == 0 {
            return if got == 0 { Ok(None) } else { Err(WireError::TruncatedStream) };
        }
        got += n;
    }
    let len = u32::from_be_bytes(len);
    wire::check_len(len)?;
    let mut rest = vec![0u8; len as usize];
    r.read_exact(&mut rest).await.map_err(|e| {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            WireError::TruncatedStream
        } else {
            WireError::Io(e)
        }
    })?;
    let body = rest.split_off(1);
    Message::decode(rest[0], &body).map(Some)
}

pub async fn write_message<W: AsyncWrite + Unpin>(w: &mut W, msg: &Message) -> Result<(), WireError> {
    w.write_all(&msg.encode()?).await?;
    Ok(())
}

/// Spawns a task draining `rx` into `w`.
pub fn spawn_writer<W: AsyncWrite + Unpin + Send + 'static>(mut w: W, mut rx: mpsc::UnboundedReceiver<Message>) {
    tokio::spawn(async move {
        while let Some(msg) = rx.recv().await {
            if let Err(e) = write_message(&mut w, &msg).await {
                log::debug!("write failed: {e}");
                break;
            }
        }
        let _ = w.shutdown().await;
    });
}

#[derive(Debug, Clone)]
pub enum ClientError {
    Remote(ErrorReply),
    Transport(String),
}

impl std::fmt::Display for ClientError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ClientError::Remote(e) => write!(f, "{:?}: {}", e.code, e.message),
            ClientError::Transport(m) => write!(f, "coordinator unreachable: {m}"),
        }
    }
}

impl std::error::Error for ClientError {}

impl ClientError {
    pub fn code(&self) -> Option<ErrorCode> {
        match self {
            ClientError::Remote(e) => Some(e.code),
            ClientError::Transport(_) => None,
        }
    }

    /// Process exit code for this error.
    pub fn exit_code(&self) -> i32 {
        match self {
            ClientError::Remote(e) => e.code.exit_code(),
            ClientError::Transport(_) => 4,
        }
    }
}

/// Unsolicited traffic from the coordinator.
#[derive(Debug)]
pub enum Incoming {
    Notify(Notify),
    ClientToTask(ChannelData),
    TaskToClient(ChannelData),
    /// An error not tied to a request, e.g. a rejected channel payload.
    Error(ErrorReply),
}

type Pending = Arc<Mutex<HashMap<u64, oneshot::Sender<Result<serde_json::Value, ErrorReply>>>>>;

pub struct Client {
    out: mpsc::UnboundedSender<Message>,
    pending: Pending,
    next_id: AtomicU64,
    closed: Arc<AtomicBool>,
    pub hello: HelloReply,
}

impl Client {
    pub async fn connect(addr: &str, role: &str) -> Result<(Arc<Client>, mpsc::UnboundedReceiver<Incoming>), ClientError> {
        let stream = TcpStream::connect(addr)
            .await
            .map_err(|e| ClientError::Transport(format!("{addr}: {e}")))?;
        let _ = stream.set_nodelay(true);
        let (mut rd, wr) = stream.into_split();
        let (out, out_rx) = mpsc::unbounded_channel();
        spawn_writer(wr, out_rx);
        let pending: Pending = Arc::default();
        let (ev_tx, ev_rx) = mpsc::unbounded_channel();
        let pend = pending.clone();
        let closed = Arc::new(AtomicBool::new(false));
        let closed_flag = closed.clone();
        tokio::spawn(async move {
            loop {
                let msg = match read_message(&mut rd).await {
                    Ok(Some(m)) => m,
                    Ok(None) => break,
                    Err(e) => {
                        log::debug!("read failed: {e}");
                        break;
                    }
                };
                let routed = match msg {
                    Message::Ok(r) => {
                        if let Some(tx) = pend.lock().unwrap().remove(&r.id) {
                            let _ = tx.send(Ok(r.result));
                        }
                        continue;
                    }
                    Message::Error(e) => match pend.lock().unwrap().remove(&e.id) {
                        Some(tx) => {
                            let _ = tx.send(Err(e));
                            continue;
                        }
                        None => Incoming::Error(e),
                    },
                    Message::Notify(n) => Incoming::Notify(n),
                    Message::ClientToTask(d) => Incoming::ClientToTask(d),
                    Message::TaskToClient(d) => Incoming::TaskToClient(d),
                    other => {
                        log::warn!("unexpected message type {:#04x} from coordinator", other.msg_type());
                        continue;
                    }
                };
                let _ = ev_tx.send(routed);
            }
            // Dropping the senders fails every outstanding request.
            closed_flag.store(true, Ordering::SeqCst);
            pend.lock().unwrap().clear();
        });
        let mut client = Client {
            out,
            pending,
            next_id: AtomicU64::new(1),
            closed,
            hello: HelloReply {
                version: 0,
                server: String::new(),
                store_root: String::new(),
            },
        };
        client.hello = client
            .call_as(|id| {
                Message::Hello(Hello {
                    id,
                    version: wire::PROTOCOL_VERSION,
                    role: role.to_string(),
                })
            })
            .await?;
        Ok((Arc::new(client), ev_rx))
    }

    pub async fn call(&self, build: impl FnOnce(u64) -> Message) -> Result<serde_json::Value, ClientError> {
        let id = self.next_id.fetch_add(1, Ordering::Relaxed);
        let (tx, rx) = oneshot::channel();
        self.pending.lock().unwrap().insert(id, tx);
        if self.closed.load(Ordering::SeqCst) || self.out.send(build(id)).is_err() {
            self.pending.lock().unwrap().remove(&id);
            return Err(ClientError::Transport("connection closed".into()));
        }
        match rx.await {
            Ok(Ok(v)) => Ok(v),
            Ok(Err(e)) => Err(ClientError::Remote(e)),
            Err(_) => Err(ClientError::Transport("connection closed".into())),
        }
    }

    pub async fn call_as<T: DeserializeOwned>(&self, build: impl FnOnce(u64) -> Message) -> Result<T, ClientError> {
        let v = self.call(build).await?;
        serde_json::from_value(v).map_err(|e| ClientError::Transport(format!("malformed reply: {e}")))
    }

    /// Sends a request without waiting; a success reply is discarded and an
    /// error surfaces as [`Incoming::Error`].
    pub fn fire(&self, build: impl FnOnce(u64) -> Message) {
        let id = self.next_id.fetch_add(1, Ordering::Relaxed);
        let _ = self.out.send(build(id));
    }

    /// Sends a message that has no reply (channel payloads).
    pub fn send(&self, msg: Message) -> Result<(), ClientError> {
        self.out
            .send(msg)
            .map_err(|_| ClientError::Transport("connection closed".into()))
    }
}
