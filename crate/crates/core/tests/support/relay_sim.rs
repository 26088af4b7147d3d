//! Drives one DEBUG channel through connect/disconnect schedules and checks
//! every delivery against a reference that keeps the whole frame log
//! forever and replays it naively.

use std::collections::VecDeque;

use expd_core::relay::{ChannelKind, ConnId, Output, Relay, RelayConfig, Side};
use rand::Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Op {
    Send,
    /// The task endpoint consumes the oldest in-flight frame.
    Process,
    /// Ack everything processed so far.
    AckAll,
    /// Ack a random prefix of what was processed (random schedules only).
    AckSome,
    /// The task connection dies; in-flight frames are lost.
    TaskDrop,
    TaskAttach,
    /// A new task connection attaches while the old one is still attached.
    Supersede,
    ClientDrop,
    ClientAttach,
}

pub const ALL_OPS: [Op; 8] = [
    Op::Send,
    Op::Process,
    Op::AckAll,
    Op::TaskDrop,
    Op::TaskAttach,
    Op::Supersede,
    Op::ClientDrop,
    Op::ClientAttach,
];

#[derive(Clone, Debug, Default)]
struct Reference {
    log: Vec<Vec<u8>>,
    attached: Option<ConnId>,
}

impl Reference {
    fn send(&mut self, payload: Vec<u8>) -> Vec<(ConnId, u64, Vec<u8>)> {
        self.log.push(payload.clone());
        let seq = self.log.len() as u64;
        self.attached.map(|c| (c, seq, payload)).into_iter().collect()
    }

    fn attach(&mut self, conn: ConnId, resume_from: u64) -> Vec<(ConnId, u64, Vec<u8>)> {
        self.attached = Some(conn);
        self.log
            .iter()
            .enumerate()
            .skip(resume_from as usize)
            .map(|(i, p)| (conn, i as u64 + 1, p.clone()))
            .collect()
    }
}

#[derive(Clone, Debug)]
pub struct Sim {
    relay: Relay,
    channel: u64,
    next_conn: ConnId,
    client: Option<ConnId>,
    task: Option<ConnId>,
    inbox: VecDeque<(u64, Vec<u8>)>,
    processed: Vec<(u64, Vec<u8>)>,
    acked: u64,
    sent: u64,
    reference: Reference,
    pub duplicates: u64,
    pub gaps: u64,
    pub mismatches: Vec<String>,
}

#[derive(Debug, Default, Clone, Copy, PartialEq, Eq)]
pub struct Verdict {
    pub sent: u64,
    pub lost: u64,
    pub duplicates: u64,
    pub oracle_mismatches: u64,
}

impl Verdict {
    pub fn clean(&self) -> bool {
        self.lost == 0 && self.duplicates == 0 && self.oracle_mismatches == 0
    }
}

impl Sim {
    /// A channel opened by an attached client, with no task side yet.
    pub fn new() -> Self {
        let mut relay = Relay::new(RelayConfig::default());
        let channel = relay.open("t-sim".into(), ChannelKind::Debug).unwrap();
        let mut out = Vec::new();
        relay.attach(channel, Side::Client, 1, 0, &mut out).unwrap();
        Sim {
            relay,
            channel,
            next_conn: 2,
            client: Some(1),
            task: None,
            inbox: VecDeque::new(),
            processed: Vec::new(),
            acked: 0,
            sent: 0,
            reference: Reference::default(),
            duplicates: 0,
            gaps: 0,
            mismatches: Vec::new(),
        }
    }

    pub fn sent(&self) -> u64 {
        self.sent
    }

    fn last_processed(&self) -> u64 {
        self.processed.last().map_or(0, |p| p.0)
    }

    pub fn enabled(&self, op: Op) -> bool {
        match op {
            Op::Send => self.client.is_some(),
            Op::Process => !self.inbox.is_empty(),
            Op::AckAll | Op::AckSome => self.task.is_some() && self.last_processed() > self.acked,
            Op::TaskDrop | Op::Supersede => self.task.is_some(),
            Op::TaskAttach => self.task.is_none(),
            Op::ClientDrop => self.client.is_some(),
            Op::ClientAttach => self.client.is_none(),
        }
    }

    fn fresh_conn(&mut self) -> ConnId {
        self.next_conn += 1;
        self.next_conn
    }

    fn take_deliveries(&mut self, out: Vec<Output>, expected: Vec<(ConnId, u64, Vec<u8>)>) {
        let actual: Vec<(ConnId, u64, Vec<u8>)> = out
            .into_iter()
            .filter_map(|o| match o {
                Output::Deliver { conn, frame } => Some((conn, frame.seq, frame.payload)),
                Output::Notify { .. } => None,
            })
            .collect();
        if actual != expected {
            self.mismatches.push(format!(
                "relay delivered {:?}, reference {:?}",
                actual.iter().map(|d| (d.0, d.1)).collect::<Vec<_>>(),
                expected.iter().map(|d| (d.0, d.1)).collect::<Vec<_>>()
            ));
        }
        for (conn, seq, payload) in actual {
            if Some(conn) == self.task {
                self.inbox.push_back((seq, payload));
            }
        }
    }

    pub fn step(&mut self, op: Op, rng: Option<&mut dyn rand::RngCore>) {
        debug_assert!(self.enabled(op));
        let mut out = Vec::new();
        let ch = self.channel;
        match op {
            Op::Send => {
                let client = self.client.unwrap();
                let payload = format!("frame-{}", self.sent + 1).into_bytes();
                let seq = self.relay.send(ch, Side::Client, client, payload.clone(), &mut out).unwrap();
                self.sent += 1;
                if seq != self.sent {
                    self.mismatches.push(format!("send got seq {seq}, expected {}", self.sent));
                }
                let expected = self.reference.send(payload);
                self.take_deliveries(out, expected);
            }
            Op::Process => {
                let (seq, payload) = self.inbox.pop_front().unwrap();
                let last = self.last_processed();
                if seq <= last {
                    self.duplicates += 1;
                } else if seq > last + 1 {
                    self.gaps += 1;
                } else {
                    self.processed.push((seq, payload));
                }
            }
            Op::AckAll | Op::AckSome => {
                let last = self.last_processed();
                let seq = match (op, rng) {
                    (Op::AckSome, Some(r)) => r.gen_range(self.acked + 1..=last),
                    _ => last,
                };
                self.relay.ack(ch, Side::Task, self.task.unwrap(), seq).unwrap();
                self.acked = seq;
            }
            Op::TaskDrop => {
                let conn = self.task.take().unwrap();
                self.relay.detach_conn(conn, &mut out);
                self.inbox.clear();
                self.reference.attached = None;
                self.take_deliveries(out, Vec::new());
            }
            Op::TaskAttach | Op::Supersede => {
                let conn = self.fresh_conn();
                self.inbox.clear();
                self.task = Some(conn);
                let resume = self.last_processed();
                self.relay.attach(ch, Side::Task, conn, resume, &mut out).unwrap();
                // resuming confirms everything up to the cursor
                self.acked = resume;
                let expected = self.reference.attach(conn, resume);
                self.take_deliveries(out, expected);
            }
            Op::ClientDrop => {
                let conn = self.client.take().unwrap();
                self.relay.detach_conn(conn, &mut out);
                self.take_deliveries(out, Vec::new());
            }
            Op::ClientAttach => {
                let conn = self.fresh_conn();
                self.client = Some(conn);
                self.relay.attach(ch, Side::Client, conn, 0, &mut out).unwrap();
                self.take_deliveries(out, Vec::new());
            }
        }
        if let Err(e) = self.relay.channel(ch).unwrap().check_invariants(self.relay.config()) {
            self.mismatches.push(format!("invariant: {e}"));
        }
    }

    /// Reconnects the task side if needed, drains everything in flight and
    /// compares what the endpoint consumed with what was sent.
    pub fn finish(mut self) -> Verdict {
        if self.task.is_none() {
            self.step(Op::TaskAttach, None);
        }
        while self.enabled(Op::Process) {
            self.step(Op::Process, None);
        }
        let consumed: Vec<u64> = self.processed.iter().map(|p| p.0).collect();
        let expected: Vec<u64> = (1..=self.sent).collect();
        let payload_ok = self
            .processed
            .iter()
            .all(|(s, p)| *p == format!("frame-{s}").into_bytes());
        if !payload_ok {
            self.mismatches.push("payload corrupted".into());
        }
        Verdict {
            sent: self.sent,
            lost: expected.iter().filter(|s| !consumed.contains(s)).count() as u64 + self.gaps,
            duplicates: self.duplicates,
            oracle_mismatches: self.mismatches.len() as u64,
        }
    }
}

impl Default for Sim {
    fn default() -> Self {
        Self::new()
    }
}

/// One random schedule of `steps` operations.
pub fn random_schedule(rng: &mut impl Rng, steps: usize) -> Verdict {
    let mut sim = Sim::new();
    let ops = [
        (Op::Send, 6),
        (Op::Process, 6),
        (Op::AckAll, 1),
        (Op::AckSome, 2),
        (Op::TaskDrop, 1),
        (Op::TaskAttach, 2),
        (Op::Supersede, 1),
        (Op::ClientDrop, 1),
        (Op::ClientAttach, 2),
    ];
    let total: u32 = ops.iter().map(|o| o.1).sum();
    for _ in 0..steps {
        let mut pick = rng.gen_range(0..total);
        let op = ops
            .iter()
            .find(|(_, w)| {
                if pick < *w {
                    true
                } else {
                    pick -= w;
                    false
                }
            })
            .unwrap()
            .0;
        if sim.enabled(op) {
            sim.step(op, Some(rng));
        }
    }
    sim.finish()
}

/// Explores every operation sequence up to `depth` steps that sends at most
/// `max_frames` frames. Returns (traces checked, traces with a violation).
pub fn exhaustive(depth: usize, max_frames: u64) -> (u64, u64) {
    fn go(sim: &Sim, depth: usize, max_frames: u64, checked: &mut u64, bad: &mut u64) {
        *checked += 1;
        if !sim.clone().finish().clean() {
            *bad += 1;
        }
        if depth == 0 {
            return;
        }
        for op in ALL_OPS {
            if !sim.enabled(op) || (op == Op::Send && sim.sent() >= max_frames) {
                continue;
            }
            let mut next = sim.clone();
            next.step(op, None);
            go(&next, depth - 1, max_frames, checked, bad);
        }
    }
    let (mut checked, mut bad) = (0, 0);
    go(&Sim::new(), depth, max_frames, &mut checked, &mut bad);
    (checked, bad)
}
