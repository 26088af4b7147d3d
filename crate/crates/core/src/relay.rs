//! Buffered, resumable byte-frame channels between a local client and a task.
//!
//! Each channel has two independent directions. Frames are numbered per
//! direction starting at 1. A DEBUG channel keeps every frame until the
//! receiving side acks it, so a receiver may detach at any point and resume
//! with the last sequence number it saw; the relay replays everything after
//! it. A TERMINAL channel forwards live and drops frames while the receiver
//! is away.
//!
//! The relay is transport-agnostic: attachments are identified by a
//! connection token and every externally visible effect comes back as an
//! [`Output`] for the caller to route.

use std::collections::{BTreeMap, HashMap, VecDeque};

use serde::{Deserialize, Serialize};

use crate::model::TaskId;

pub type ConnId = u64;

pub const MAX_PAYLOAD: usize = 1 << 20;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ChannelKind {
    Debug,
    Terminal,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Side {
    Client,
    Task,
}

impl Side {
    pub fn opposite(self) -> Side {
        match self {
            Side::Client => Side::Task,
            Side::Task => Side::Client,
        }
    }

    /// Direction of frames this side sends.
    pub fn outbound(self) -> Direction {
        match self {
            Side::Client => Direction::ClientToTask,
            Side::Task => Direction::TaskToClient,
        }
    }

    /// Direction of frames this side receives.
    pub fn inbound(self) -> Direction {
        self.opposite().outbound()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Direction {
    ClientToTask,
    TaskToClient,
}

impl Direction {
    fn index(self) -> usize {
        match self {
            Direction::ClientToTask => 0,
            Direction::TaskToClient => 1,
        }
    }

    pub fn receiver(self) -> Side {
        match self {
            Direction::ClientToTask => Side::Task,
            Direction::TaskToClient => Side::Client,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Frame {
    pub channel_id: u64,
    pub direction: Direction,
    pub seq: u64,
    pub payload: Vec<u8>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RelayConfig {
    pub max_frames: usize,
    pub max_bytes: usize,
}

impl Default for RelayConfig {
    fn default() -> Self {
        RelayConfig {
            max_frames: 1024,
            max_bytes: 16 << 20,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum ChannelEvent {
    PeerStatus { channel_id: u64, peer: Side, attached: bool },
    Closed { channel_id: u64, reason: String },
    Detached { channel_id: u64, side: Side, reason: String },
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Output {
    Deliver { conn: ConnId, frame: Frame },
    Notify { conn: ConnId, event: ChannelEvent },
}

#[derive(Clone, Debug, PartialEq, Eq, thiserror::Error)]
pub enum RelayError {
    #[error("unknown channel {0}")]
    UnknownChannel(u64),
    #[error("a {kind:?} channel already exists for task {task_id} (channel {channel_id})")]
    ChannelExists {
        task_id: TaskId,
        kind: ChannelKind,
        channel_id: u64,
    },
    #[error("{side:?} side of channel {channel_id} is not attached on this connection")]
    NotAttached { channel_id: u64, side: Side },
    #[error("payload of {0} bytes exceeds 1 MiB")]
    PayloadTooLarge(usize),
    #[error("channel {0} buffer overflow; channel failed")]
    BufferOverflow(u64),
    #[error("invalid ack {seq} on channel {channel_id}: acked {acked}, delivered {delivered}")]
    InvalidAck {
        channel_id: u64,
        seq: u64,
        acked: u64,
        delivered: u64,
    },
    #[error("cannot resume channel {channel_id} from {resume_from}: frames up to {acked} were acked, last sent is {last}")]
    InvalidResume {
        channel_id: u64,
        resume_from: u64,
        acked: u64,
        last: u64,
    },
}

#[derive(Clone, Debug, Default)]
struct DirectionState {
    next_seq: u64,
    buffer: VecDeque<Frame>,
    buffered_bytes: usize,
    acked: u64,
    delivered: u64,
    dropped: u64,
}

impl DirectionState {
    fn new() -> Self {
        DirectionState {
            next_seq: 1,
            ..Default::default()
        }
    }

    fn last_sent(&self) -> u64 {
        self.next_seq - 1
    }

    fn reclaim_through(&mut self, seq: u64) {
        while self.buffer.front().is_some_and(|f| f.seq <= seq) {
            let f = self.buffer.pop_front().expect("front checked");
            self.buffered_bytes -= f.payload.len();
        }
    }
}

#[derive(Clone, Debug)]
pub struct ChannelSession {
    pub channel_id: u64,
    pub task_id: TaskId,
    pub kind: ChannelKind,
    client: Option<ConnId>,
    task: Option<ConnId>,
    dirs: [DirectionState; 2],
}

/// Read-only counters for one direction.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DirectionStats {
    pub last_sent: u64,
    pub acked: u64,
    pub delivered: u64,
    pub buffered_frames: usize,
    pub buffered_bytes: usize,
    pub dropped: u64,
}

impl ChannelSession {
    fn attachment(&self, side: Side) -> Option<ConnId> {
        match side {
            Side::Client => self.client,
            Side::Task => self.task,
        }
    }

    fn attachment_mut(&mut self, side: Side) -> &mut Option<ConnId> {
        match side {
            Side::Client => &mut self.client,
            Side::Task => &mut self.task,
        }
    }

    fn dir(&self, d: Direction) -> &DirectionState {
        &self.dirs[d.index()]
    }

    fn dir_mut(&mut self, d: Direction) -> &mut DirectionState {
        &mut self.dirs[d.index()]
    }

    pub fn is_attached(&self, side: Side) -> bool {
        self.attachment(side).is_some()
    }

    pub fn stats(&self, d: Direction) -> DirectionStats {
        let s = self.dir(d);
        DirectionStats {
            last_sent: s.last_sent(),
            acked: s.acked,
            delivered: s.delivered,
            buffered_frames: s.buffer.len(),
            buffered_bytes: s.buffered_bytes,
            dropped: s.dropped,
        }
    }

    fn require(&self, side: Side, conn: ConnId) -> Result<(), RelayError> {
        if self.attachment(side) == Some(conn) {
            Ok(())
        } else {
            Err(RelayError::NotAttached {
                channel_id: self.channel_id,
                side,
            })
        }
    }

    /// Checks the buffering invariants; used by tests and debug assertions.
    pub fn check_invariants(&self, cfg: &RelayConfig) -> Result<(), String> {
        for d in [Direction::ClientToTask, Direction::TaskToClient] {
            let s = self.dir(d);
            if s.buffer.len() > cfg.max_frames || s.buffered_bytes > cfg.max_bytes {
                return Err(format!("channel {} {d:?} over capacity", self.channel_id));
            }
            let bytes: usize = s.buffer.iter().map(|f| f.payload.len()).sum();
            if bytes != s.buffered_bytes {
                return Err(format!("channel {} {d:?} byte count drift", self.channel_id));
            }
            if self.kind == ChannelKind::Debug {
                let seqs: Vec<u64> = s.buffer.iter().map(|f| f.seq).collect();
                let expected: Vec<u64> = (s.acked + 1..s.next_seq).collect();
                if seqs != expected {
                    return Err(format!(
                        "channel {} {d:?} buffers {seqs:?}, expected {expected:?}",
                        self.channel_id
                    ));
                }
            } else if !s.buffer.is_empty() {
                return Err(format!("terminal channel {} buffers frames", self.channel_id));
            }
            if s.acked > s.delivered.max(s.acked) || s.delivered > s.last_sent() {
                return Err(format!("channel {} {d:?} cursor out of range", self.channel_id));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttachOutcome {
    pub replayed: usize,
    pub peer_attached: bool,
}

#[derive(Clone, Debug)]
pub struct Relay {
    cfg: RelayConfig,
    channels: BTreeMap<u64, ChannelSession>,
    by_task: HashMap<(TaskId, ChannelKind), u64>,
    next_id: u64,
}

impl Default for Relay {
    fn default() -> Self {
        Relay::new(RelayConfig::default())
    }
}

impl Relay {
    pub fn new(cfg: RelayConfig) -> Self {
        Relay {
            cfg,
            channels: BTreeMap::new(),
            by_task: HashMap::new(),
            next_id: 1,
        }
    }

    pub fn config(&self) -> &RelayConfig {
        &self.cfg
    }

    pub fn channel(&self, channel_id: u64) -> Option<&ChannelSession> {
        self.channels.get(&channel_id)
    }

    pub fn channels(&self) -> impl Iterator<Item = &ChannelSession> {
        self.channels.values()
    }

    pub fn channels_for_task<'a>(&'a self, task_id: &'a TaskId) -> impl Iterator<Item = &'a ChannelSession> + 'a {
        self.channels.values().filter(move |c| &c.task_id == task_id)
    }

    fn get_mut(&mut self, channel_id: u64) -> Result<&mut ChannelSession, RelayError> {
        self.channels
            .get_mut(&channel_id)
            .ok_or(RelayError::UnknownChannel(channel_id))
    }

    /// Creates a channel. Task-state preconditions are the caller's concern.
    pub fn open(&mut self, task_id: TaskId, kind: ChannelKind) -> Result<u64, RelayError> {
        if let Some(&channel_id) = self.by_task.get(&(task_id.clone(), kind)) {
            return Err(RelayError::ChannelExists {
                task_id,
                kind,
                channel_id,
            });
        }
        let channel_id = self.next_id;
        self.next_id += 1;
        self.by_task.insert((task_id.clone(), kind), channel_id);
        self.channels.insert(
            channel_id,
            ChannelSession {
                channel_id,
                task_id,
                kind,
                client: None,
                task: None,
                dirs: [DirectionState::new(), DirectionState::new()],
            },
        );
        Ok(channel_id)
    }

    /// Enqueues a frame from `side`; returns its sequence number.
    pub fn send(
        &mut self,
        channel_id: u64,
        side: Side,
        conn: ConnId,
        payload: Vec<u8>,
        out: &mut Vec<Output>,
    ) -> Result<u64, RelayError> {
        if payload.len() > MAX_PAYLOAD {
            return Err(RelayError::PayloadTooLarge(payload.len()));
        }
        let cfg = self.cfg;
        let ch = self.get_mut(channel_id)?;
        ch.require(side, conn)?;
        let direction = side.outbound();
        let receiver = ch.attachment(direction.receiver());
        let kind = ch.kind;
        let dir = ch.dir_mut(direction);
        let seq = dir.next_seq;
        let frame = Frame {
            channel_id,
            direction,
            seq,
            payload,
        };
        match kind {
            ChannelKind::Debug => {
                if dir.buffer.len() >= cfg.max_frames || dir.buffered_bytes + frame.payload.len() > cfg.max_bytes {
                    self.close(channel_id, "BUFFER_OVERFLOW", out)?;
                    return Err(RelayError::BufferOverflow(channel_id));
                }
                dir.next_seq += 1;
                dir.buffered_bytes += frame.payload.len();
                dir.buffer.push_back(frame.clone());
                if let Some(conn) = receiver {
                    dir.delivered = seq;
                    out.push(Output::Deliver { conn, frame });
                }
            }
            ChannelKind::Terminal => {
                dir.next_seq += 1;
                match receiver {
                    Some(conn) => {
                        dir.delivered = seq;
                        out.push(Output::Deliver { conn, frame });
                    }
                    None => dir.dropped += 1,
                }
            }
        }
        Ok(seq)
    }

    /// Attaches `side` on `conn`. For DEBUG channels `resume_from` is the last
    /// sequence number this side received; everything after it is replayed.
    /// A previous attachment of the same side is detached (newest wins).
    pub fn attach(
        &mut self,
        channel_id: u64,
        side: Side,
        conn: ConnId,
        resume_from: u64,
        out: &mut Vec<Output>,
    ) -> Result<AttachOutcome, RelayError> {
        let ch = self.get_mut(channel_id)?;
        let inbound = side.inbound();
        if ch.kind == ChannelKind::Debug {
            let d = ch.dir(inbound);
            if resume_from < d.acked || resume_from > d.last_sent() {
                return Err(RelayError::InvalidResume {
                    channel_id,
                    resume_from,
                    acked: d.acked,
                    last: d.last_sent(),
                });
            }
        }
        if let Some(old) = ch.attachment(side) {
            if old != conn {
                out.push(Output::Notify {
                    conn: old,
                    event: ChannelEvent::Detached {
                        channel_id,
                        side,
                        reason: "superseded".into(),
                    },
                });
            }
        }
        *ch.attachment_mut(side) = Some(conn);
        let mut replayed = 0;
        match ch.kind {
            ChannelKind::Debug => {
                let d = ch.dir_mut(inbound);
                d.acked = resume_from;
                d.reclaim_through(resume_from);
                d.delivered = resume_from;
                for frame in d.buffer.iter() {
                    out.push(Output::Deliver {
                        conn,
                        frame: frame.clone(),
                    });
                    replayed += 1;
                }
                d.delivered = d.last_sent();
            }
            ChannelKind::Terminal => {
                let d = ch.dir_mut(inbound);
                d.delivered = d.last_sent();
            }
        }
        let peer = ch.attachment(side.opposite());
        if let Some(peer_conn) = peer {
            out.push(Output::Notify {
                conn: peer_conn,
                event: ChannelEvent::PeerStatus {
                    channel_id,
                    peer: side,
                    attached: true,
                },
            });
        }
        Ok(AttachOutcome {
            replayed,
            peer_attached: peer.is_some(),
        })
    }

    pub fn detach(&mut self, channel_id: u64, side: Side, conn: ConnId, out: &mut Vec<Output>) -> Result<(), RelayError> {
        let ch = self.get_mut(channel_id)?;
        ch.require(side, conn)?;
        Self::detach_side(ch, side, out);
        Ok(())
    }

    fn detach_side(ch: &mut ChannelSession, side: Side, out: &mut Vec<Output>) {
        *ch.attachment_mut(side) = None;
        // Unacked frames stay buffered; delivery restarts from the resume cursor.
        let acked = ch.dir(side.inbound()).acked;
        ch.dir_mut(side.inbound()).delivered = acked;
        if let Some(peer) = ch.attachment(side.opposite()) {
            out.push(Output::Notify {
                conn: peer,
                event: ChannelEvent::PeerStatus {
                    channel_id: ch.channel_id,
                    peer: side,
                    attached: false,
                },
            });
        }
    }

    /// Detaches every side attached through `conn` (connection lost).
    pub fn detach_conn(&mut self, conn: ConnId, out: &mut Vec<Output>) {
        for ch in self.channels.values_mut() {
            for side in [Side::Client, Side::Task] {
                if ch.attachment(side) == Some(conn) {
                    Self::detach_side(ch, side, out);
                }
            }
        }
    }

    /// Confirms receipt of every frame up to `seq` by `side`.
    pub fn ack(&mut self, channel_id: u64, side: Side, conn: ConnId, seq: u64) -> Result<(), RelayError> {
        let ch = self.get_mut(channel_id)?;
        ch.require(side, conn)?;
        let d = ch.dir_mut(side.inbound());
        if seq < d.acked || seq > d.delivered {
            return Err(RelayError::InvalidAck {
                channel_id,
                seq,
                acked: d.acked,
                delivered: d.delivered,
            });
        }
        d.acked = seq;
        d.reclaim_through(seq);
        Ok(())
    }

    pub fn close(&mut self, channel_id: u64, reason: &str, out: &mut Vec<Output>) -> Result<(), RelayError> {
        let ch = self
            .channels
            .remove(&channel_id)
            .ok_or(RelayError::UnknownChannel(channel_id))?;
        self.by_task.remove(&(ch.task_id.clone(), ch.kind));
        let mut notified = Vec::new();
        for conn in [ch.client, ch.task].into_iter().flatten() {
            if notified.contains(&conn) {
                continue;
            }
            notified.push(conn);
            out.push(Output::Notify {
                conn,
                event: ChannelEvent::Closed {
                    channel_id,
                    reason: reason.to_string(),
                },
            });
        }
        Ok(())
    }

    /// Closes every channel of a task; returns the ids closed.
    pub fn close_task(&mut self, task_id: &TaskId, kinds: &[ChannelKind], reason: &str, out: &mut Vec<Output>) -> Vec<u64> {
        let ids: Vec<u64> = self
            .channels_for_task(task_id)
            .filter(|c| kinds.contains(&c.kind))
            .map(|c| c.channel_id)
            .collect();
        for id in &ids {
            let _ = self.close(*id, reason, out);
        }
        ids
    }
}
