//! Framing and message schema for daemon traffic.
//!
//! ```text
//! +----------------+----------+---------------------------+
//! | length: u32 BE | type: u8 | body: length - 1 bytes    |
//! +----------------+----------+---------------------------+
//! ```
//!
//! `length` counts the type byte plus the body, so it is at least 1 and at most
//! 1 MiB + 1. Control bodies are canonical JSON. Channel payload frames
//! (`0x20` client→task, `0x21` task→client) carry raw bytes prefixed by
//! `[channel_id: u64 BE][seq: u64 BE]`; a sender puts 0 in `seq` and the relay
//! assigns the real number.
//!
//! | type | message          | type | message          |
//! |------|------------------|------|------------------|
//! | 0x01 | hello            | 0x0D | cancel           |
//! | 0x02 | submit           | 0x0E | reproduce        |
//! | 0x03 | status           | 0x0F | gc               |
//! | 0x04 | register         | 0x10 | log-append       |
//! | 0x05 | heartbeat        | 0x11 | replicate        |
//! | 0x06 | claim            | 0x12 | executors        |
//! | 0x07 | report           | 0x13 | channel-detach   |
//! | 0x08 | log-subscribe    | 0x1D | notify (push)    |
//! | 0x09 | channel-open     | 0x1E | ok response      |
//! | 0x0A | channel-attach   | 0x1F | error response   |
//! | 0x0B | channel-ack      | 0x20 | data client→task |
//! | 0x0C | channel-close    | 0x21 | data task→client |

use std::io::{self, Read, Write};

use base64::Engine as _;
use serde::{Deserialize, Serialize};

use crate::canonical;
use crate::digest::SnapshotId;
use crate::model::{ExecutorId, FailurePhase, HardwareOffer, TaskId, TaskRecord, Timestamp, ValidatedRunConfig};
use crate::relay::{ChannelKind, Side};

pub const PROTOCOL_VERSION: u32 = 1;
pub const MAX_BODY_LEN: usize = 1 << 20;
pub const MAX_FRAME_LEN: u32 = MAX_BODY_LEN as u32 + 1;
/// `[channel_id][seq]` prefix of channel payload frames.
pub const CHANNEL_HEADER_LEN: usize = 16;
pub const MAX_CHANNEL_PAYLOAD: usize = MAX_BODY_LEN - CHANNEL_HEADER_LEN;

#[derive(Debug, thiserror::Error)]
pub enum WireError {
    #[error("payload of {0} bytes exceeds the frame limit")]
    PayloadTooLarge(usize),
    #[error("declared frame length {0} exceeds the limit")]
    FrameTooLarge(u32),
    #[error("zero-length frame")]
    EmptyFrame,
    #[error("stream ended inside a frame")]
    TruncatedStream,
    #[error("unknown message type 0x{0:02x}")]
    UnknownMessageType(u8),
    #[error("malformed body for message type 0x{msg_type:02x}: {reason}")]
    MalformedBody { msg_type: u8, reason: String },
    #[error(transparent)]
    Io(#[from] io::Error),
}

pub fn encode_frame(msg_type: u8, body: &[u8]) -> Result<Vec<u8>, WireError> {
    if body.len() > MAX_BODY_LEN {
        return Err(WireError::PayloadTooLarge(body.len()));
    }
    let len = body.len() as u32 + 1;
    let mut out = Vec::with_capacity(5 + body.len());
    out.extend_from_slice(&len.to_be_bytes());
    out.push(msg_type);
    out.extend_from_slice(body);
    Ok(out)
}

#[derive(Debug, PartialEq, Eq)]
pub enum Decoded<'a> {
    Frame { msg_type: u8, body: &'a [u8], consumed: usize },
    NeedMoreBytes,
}

/// Decodes one frame from the front of `buf` without consuming on partial input.
pub fn decode_frame(buf: &[u8]) -> Result<Decoded<'_>, WireError> {
    if buf.len() < 4 {
        return Ok(Decoded::NeedMoreBytes);
    }
    let len = u32::from_be_bytes([buf[0], buf[1], buf[2], buf[3]]);
    check_len(len)?;
    let total = 4 + len as usize;
    if buf.len() < total {
        return Ok(Decoded::NeedMoreBytes);
    }
    Ok(Decoded::Frame {
        msg_type: buf[4],
        body: &buf[5..total],
        consumed: total,
    })
}

pub fn check_len(len: u32) -> Result<(), WireError> {
    if len == 0 {
        return Err(WireError::EmptyFrame);
    }
    if len > MAX_FRAME_LEN {
        return Err(WireError::FrameTooLarge(len));
    }
    Ok(())
}

/// Blocking frame reader. Returns `Ok(None)` on a clean EOF between frames.
pub fn read_frame<R: Read>(r: &mut R) -> Result<Option<(u8, Vec<u8>)>, WireError> {
    let mut len_buf = [0u8; 4];
    let mut got = 0;
    while got < 4 {
        match r.read(&mut len_buf[got..]) {
            Ok(0) if got == 0 => return Ok(None),
            Ok(0) => return Err(WireError::TruncatedStream),
            Ok(n) => got += n,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e.into()),
        }
    }
    let len = u32::from_be_bytes(len_buf);
    check_len(len)?;
    let mut rest = vec![0u8; len as usize];
    r.read_exact(&mut rest).map_err(|e| {
        if e.kind() == io::ErrorKind::UnexpectedEof {
            WireError::TruncatedStream
        } else {
            WireError::Io(e)
        }
    })?;
    let body = rest.split_off(1);
    Ok(Some((rest[0], body)))
}

pub fn write_frame<W: Write>(w: &mut W, msg_type: u8, body: &[u8]) -> Result<(), WireError> {
    w.write_all(&encode_frame(msg_type, body)?)?;
    w.flush()?;
    Ok(())
}

pub mod msg_type {
    pub const HELLO: u8 = 0x01;
    pub const SUBMIT: u8 = 0x02;
    pub const STATUS: u8 = 0x03;
    pub const REGISTER: u8 = 0x04;
    pub const HEARTBEAT: u8 = 0x05;
    pub const CLAIM: u8 = 0x06;
    pub const REPORT: u8 = 0x07;
    pub const LOG_SUBSCRIBE: u8 = 0x08;
    pub const CHANNEL_OPEN: u8 = 0x09;
    pub const CHANNEL_ATTACH: u8 = 0x0A;
    pub const CHANNEL_ACK: u8 = 0x0B;
    pub const CHANNEL_CLOSE: u8 = 0x0C;
    pub const CANCEL: u8 = 0x0D;
    pub const REPRODUCE: u8 = 0x0E;
    pub const GC: u8 = 0x0F;
    pub const LOG_APPEND: u8 = 0x10;
    pub const REPLICATE: u8 = 0x11;
    pub const EXECUTORS: u8 = 0x12;
    pub const CHANNEL_DETACH: u8 = 0x13;
    pub const NOTIFY: u8 = 0x1D;
    pub const OK: u8 = 0x1E;
    pub const ERROR: u8 = 0x1F;
    pub const CLIENT_TO_TASK: u8 = 0x20;
    pub const TASK_TO_CLIENT: u8 = 0x21;
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum LogStream {
    Stdout,
    Stderr,
}

/// Per-stream read positions.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LogCursor {
    pub stdout: u64,
    pub stderr: u64,
}

impl LogCursor {
    pub fn get(&self, s: LogStream) -> u64 {
        match s {
            LogStream::Stdout => self.stdout,
            LogStream::Stderr => self.stderr,
        }
    }

    pub fn get_mut(&mut self, s: LogStream) -> &mut u64 {
        match s {
            LogStream::Stdout => &mut self.stdout,
            LogStream::Stderr => &mut self.stderr,
        }
    }
}

mod b64 {
    use base64::Engine as _;
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(bytes: &[u8], s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&base64::engine::general_purpose::STANDARD.encode(bytes))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<u8>, D::Error> {
        let s = String::deserialize(d)?;
        base64::engine::general_purpose::STANDARD
            .decode(s)
            .map_err(serde::de::Error::custom)
    }
}

/// A slice of one task output stream. Data is base64 in JSON.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LogChunk {
    pub task_id: TaskId,
    pub stream: LogStream,
    pub seq: u64,
    #[serde(with = "b64")]
    pub data: Vec<u8>,
}

pub const MAX_LOG_CHUNK: usize = 64 * 1024;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChannelInfo {
    pub channel_id: u64,
    pub task_id: TaskId,
    pub kind: ChannelKind,
}

/// What an executor receives when it claims a task.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Assignment {
    pub task_id: TaskId,
    pub run_config: ValidatedRunConfig,
    pub zone: String,
    /// First log sequence numbers to use, so a retried task continues the log.
    pub log_seq: LogCursor,
    pub channels: Vec<ChannelInfo>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExecutorView {
    pub executor_id: ExecutorId,
    pub offer: HardwareOffer,
    pub last_heartbeat: Timestamp,
    pub busy_with: Option<TaskId>,
    pub connected: bool,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type")]
pub enum ReportEvent {
    BeginRun,
    Finish { exit_code: i32 },
    Fail { phase: FailurePhase, message: String },
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Hello {
    pub id: u64,
    pub version: u32,
    pub role: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct HelloReply {
    pub version: u32,
    pub server: String,
    pub store_root: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Submit {
    pub id: u64,
    pub run_config: ValidatedRunConfig,
    pub workspace: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Status {
    pub id: u64,
    pub task_id: Option<TaskId>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Register {
    pub id: u64,
    pub offer: HardwareOffer,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RegisterReply {
    pub executor_id: ExecutorId,
    pub store_root: String,
    pub heartbeat_seconds: u64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExecutorRef {
    pub id: u64,
    pub executor_id: ExecutorId,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Report {
    pub id: u64,
    pub task_id: TaskId,
    pub executor_id: ExecutorId,
    pub event: ReportEvent,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LogSubscribe {
    pub id: u64,
    pub task_id: TaskId,
    pub from: LogCursor,
    pub follow: bool,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LogAppend {
    pub id: u64,
    pub executor_id: ExecutorId,
    pub chunk: LogChunk,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChannelOpen {
    pub id: u64,
    pub task_id: TaskId,
    pub kind: ChannelKind,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChannelAttach {
    pub id: u64,
    pub channel_id: u64,
    pub side: Side,
    pub resume_from: u64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChannelAck {
    pub id: u64,
    pub channel_id: u64,
    pub side: Side,
    pub seq: u64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChannelClose {
    pub id: u64,
    pub channel_id: u64,
    pub reason: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChannelDetach {
    pub id: u64,
    pub channel_id: u64,
    pub side: Side,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskRef {
    pub id: u64,
    pub task_id: TaskId,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Gc {
    pub id: u64,
    pub keep_last: u32,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Replicate {
    pub id: u64,
    pub snapshot_id: SnapshotId,
    pub to_zone: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Executors {
    pub id: u64,
}

/// Server-initiated messages.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Notify {
    /// An assignment is waiting for this executor; claim it.
    AssignmentReady { task_id: TaskId },
    Kill { task_id: TaskId },
    ChannelOpened { channel: ChannelInfo },
    /// The opposite side of a channel attached or detached.
    ChannelStatus { channel_id: u64, peer: Side, attached: bool },
    ChannelClosed { channel_id: u64, reason: String },
    /// This connection's attachment was replaced by a newer one.
    Detached { channel_id: u64, side: Side, reason: String },
    Log { chunk: LogChunk },
    LogEnd { task_id: TaskId },
    /// Delete scratch workspaces of these tasks.
    DropWorkspaces { task_ids: Vec<TaskId> },
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct OkReply {
    pub id: u64,
    pub result: serde_json::Value,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorReply {
    pub id: u64,
    pub code: ErrorCode,
    pub message: String,
}

/// Error codes carried in `0x1F` responses.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ErrorCode {
    BadRequest,
    Validation,
    UnknownTask,
    UnknownExecutor,
    UnknownChannel,
    SnapshotNotFound,
    AlreadyTerminal,
    TaskTerminal,
    IllegalTransition,
    WrongExecutor,
    ChannelExists,
    NotAttached,
    InvalidAck,
    BufferOverflow,
    PayloadTooLarge,
    Storage,
    Internal,
}

impl ErrorCode {
    /// CLI exit code: 2 usage/validation, 3 not found, 1 otherwise.
    pub fn exit_code(self) -> i32 {
        match self {
            ErrorCode::BadRequest | ErrorCode::Validation => 2,
            ErrorCode::UnknownTask
            | ErrorCode::UnknownExecutor
            | ErrorCode::UnknownChannel
            | ErrorCode::SnapshotNotFound => 3,
            _ => 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ChannelData {
    pub channel_id: u64,
    pub seq: u64,
    pub payload: Vec<u8>,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Message {
    Hello(Hello),
    Submit(Submit),
    Status(Status),
    Register(Register),
    Heartbeat(ExecutorRef),
    Claim(ExecutorRef),
    Report(Report),
    LogSubscribe(LogSubscribe),
    ChannelOpen(ChannelOpen),
    ChannelAttach(ChannelAttach),
    ChannelAck(ChannelAck),
    ChannelClose(ChannelClose),
    Cancel(TaskRef),
    Reproduce(TaskRef),
    Gc(Gc),
    LogAppend(LogAppend),
    Replicate(Replicate),
    Executors(Executors),
    ChannelDetach(ChannelDetach),
    Notify(Notify),
    Ok(OkReply),
    Error(ErrorReply),
    ClientToTask(ChannelData),
    TaskToClient(ChannelData),
}

fn json<T: Serialize>(v: &T) -> Vec<u8> {
    canonical::to_vec(v).expect("message serialization cannot fail")
}

fn parse<T: serde::de::DeserializeOwned>(msg_type: u8, body: &[u8]) -> Result<T, WireError> {
    canonical::from_slice(body).map_err(|e| WireError::MalformedBody {
        msg_type,
        reason: e.to_string(),
    })
}

impl Message {
    pub fn msg_type(&self) -> u8 {
        use msg_type::*;
        match self {
            Message::Hello(_) => HELLO,
            Message::Submit(_) => SUBMIT,
            Message::Status(_) => STATUS,
            Message::Register(_) => REGISTER,
            Message::Heartbeat(_) => HEARTBEAT,
            Message::Claim(_) => CLAIM,
            Message::Report(_) => REPORT,
            Message::LogSubscribe(_) => LOG_SUBSCRIBE,
            Message::ChannelOpen(_) => CHANNEL_OPEN,
            Message::ChannelAttach(_) => CHANNEL_ATTACH,
            Message::ChannelAck(_) => CHANNEL_ACK,
            Message::ChannelClose(_) => CHANNEL_CLOSE,
            Message::Cancel(_) => CANCEL,
            Message::Reproduce(_) => REPRODUCE,
            Message::Gc(_) => GC,
            Message::LogAppend(_) => LOG_APPEND,
            Message::Replicate(_) => REPLICATE,
            Message::Executors(_) => EXECUTORS,
            Message::ChannelDetach(_) => CHANNEL_DETACH,
            Message::Notify(_) => NOTIFY,
            Message::Ok(_) => OK,
            Message::Error(_) => ERROR,
            Message::ClientToTask(_) => CLIENT_TO_TASK,
            Message::TaskToClient(_) => TASK_TO_CLIENT,
        }
    }

    pub fn body(&self) -> Vec<u8> {
        match self {
            Message::Hello(m) => json(m),
            Message::Submit(m) => json(m),
            Message::Status(m) => json(m),
            Message::Register(m) => json(m),
            Message::Heartbeat(m) | Message::Claim(m) => json(m),
            Message::Report(m) => json(m),
            Message::LogSubscribe(m) => json(m),
            Message::ChannelOpen(m) => json(m),
            Message::ChannelAttach(m) => json(m),
            Message::ChannelAck(m) => json(m),
            Message::ChannelClose(m) => json(m),
            Message::Cancel(m) | Message::Reproduce(m) => json(m),
            Message::Gc(m) => json(m),
            Message::LogAppend(m) => json(m),
            Message::Replicate(m) => json(m),
            Message::Executors(m) => json(m),
            Message::ChannelDetach(m) => json(m),
            Message::Notify(m) => json(m),
            Message::Ok(m) => json(m),
            Message::Error(m) => json(m),
            Message::ClientToTask(d) | Message::TaskToClient(d) => {
                let mut out = Vec::with_capacity(CHANNEL_HEADER_LEN + d.payload.len());
                out.extend_from_slice(&d.channel_id.to_be_bytes());
                out.extend_from_slice(&d.seq.to_be_bytes());
                out.extend_from_slice(&d.payload);
                out
            }
        }
    }

    pub fn encode(&self) -> Result<Vec<u8>, WireError> {
        encode_frame(self.msg_type(), &self.body())
    }

    pub fn decode(msg_type: u8, body: &[u8]) -> Result<Message, WireError> {
        use msg_type::*;
        let t = msg_type;
        Ok(match t {
            HELLO => Message::Hello(parse(t, body)?),
            SUBMIT => Message::Submit(parse(t, body)?),
            STATUS => Message::Status(parse(t, body)?),
            REGISTER => Message::Register(parse(t, body)?),
            HEARTBEAT => Message::Heartbeat(parse(t, body)?),
            CLAIM => Message::Claim(parse(t, body)?),
            REPORT => Message::Report(parse(t, body)?),
            LOG_SUBSCRIBE => Message::LogSubscribe(parse(t, body)?),
            CHANNEL_OPEN => Message::ChannelOpen(parse(t, body)?),
            CHANNEL_ATTACH => Message::ChannelAttach(parse(t, body)?),
            CHANNEL_ACK => Message::ChannelAck(parse(t, body)?),
            CHANNEL_CLOSE => Message::ChannelClose(parse(t, body)?),
            CANCEL => Message::Cancel(parse(t, body)?),
            REPRODUCE => Message::Reproduce(parse(t, body)?),
            GC => Message::Gc(parse(t, body)?),
            LOG_APPEND => Message::LogAppend(parse(t, body)?),
            REPLICATE => Message::Replicate(parse(t, body)?),
            EXECUTORS => Message::Executors(parse(t, body)?),
            CHANNEL_DETACH => Message::ChannelDetach(parse(t, body)?),
            NOTIFY => Message::Notify(parse(t, body)?),
            OK => Message::Ok(parse(t, body)?),
            ERROR => Message::Error(parse(t, body)?),
            CLIENT_TO_TASK | TASK_TO_CLIENT => {
                if body.len() < CHANNEL_HEADER_LEN {
                    return Err(WireError::MalformedBody {
                        msg_type: t,
                        reason: "channel frame shorter than its header".into(),
                    });
                }
                let data = ChannelData {
                    channel_id: u64::from_be_bytes(body[0..8].try_into().expect("8 bytes")),
                    seq: u64::from_be_bytes(body[8..16].try_into().expect("8 bytes")),
                    payload: body[16..].to_vec(),
                };
                if t == CLIENT_TO_TASK {
                    Message::ClientToTask(data)
                } else {
                    Message::TaskToClient(data)
                }
            }
            other => return Err(WireError::UnknownMessageType(other)),
        })
    }

    /// Request id for messages that expect a response.
    pub fn request_id(&self) -> Option<u64> {
        Some(match self {
            Message::Hello(m) => m.id,
            Message::Submit(m) => m.id,
            Message::Status(m) => m.id,
            Message::Register(m) => m.id,
            Message::Heartbeat(m) | Message::Claim(m) => m.id,
            Message::Report(m) => m.id,
            Message::LogSubscribe(m) => m.id,
            Message::ChannelOpen(m) => m.id,
            Message::ChannelAttach(m) => m.id,
            Message::ChannelAck(m) => m.id,
            Message::ChannelClose(m) => m.id,
            Message::Cancel(m) | Message::Reproduce(m) => m.id,
            Message::Gc(m) => m.id,
            Message::LogAppend(m) => m.id,
            Message::Replicate(m) => m.id,
            Message::Executors(m) => m.id,
            Message::ChannelDetach(m) => m.id,
            _ => return None,
        })
    }
}

pub fn b64_encode(bytes: &[u8]) -> String {
    base64::engine::general_purpose::STANDARD.encode(bytes)
}

/// Task listing returned by the status request.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StatusReply {
    pub tasks: Vec<TaskRecord>,
}
