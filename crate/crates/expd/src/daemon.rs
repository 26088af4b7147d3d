//! The coordinator. Connection tasks decode frames and forward them to one
//! actor thread that owns all state, so every mutation is serialized and the
//! event log has a single writer.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{mpsc as std_mpsc, Arc};
use std::time::{Duration, Instant};

use anyhow::{bail, Context};
use expd_core::journal::{self, Journal};
use expd_core::model::{ExecutorId, LifecycleEvent, TaskId, TaskRecord, TaskState, Timestamp};
use expd_core::object_store::{ObjectStore, TransferReport};
use expd_core::relay::{ChannelEvent, ChannelKind, ConnId, Direction, Output, Relay, RelayConfig, RelayError, Side};
use expd_core::scheduler::{EventSink, JournalRecord, Scheduler, SchedulerConfig, SchedulerError, StorageFailure};
use expd_core::snapshot::{GcReport, SnapshotStore};
use expd_core::wire::{
    self, Assignment, ChannelData, ChannelInfo, ErrorCode, ErrorReply, ExecutorView, HelloReply, LogChunk, LogCursor,
    Message, Notify, OkReply, RegisterReply, ReportEvent, StatusReply,
};
use expd_core::{canonical, SnapshotId};
use serde_json::json;
use tokio::net::TcpListener;
use tokio::sync::mpsc;

use crate::conn::{read_message, spawn_writer};

#[derive(Clone, Debug)]
pub struct DaemonConfig {
    pub state_dir: PathBuf,
    pub listen: String,
    pub scheduler: SchedulerConfig,
    pub relay: RelayConfig,
    pub tick: Duration,
}

enum Cmd {
    Connected(ConnId, mpsc::UnboundedSender<Message>),
    Msg(ConnId, Message),
    Closed(ConnId),
    Shutdown,
}

/// Binds, recovers state and serves until `shutdown` resolves.
pub async fn run(cfg: DaemonConfig, shutdown: impl std::future::Future<Output = ()>) -> anyhow::Result<()> {
    cfg.scheduler.validate().map_err(anyhow::Error::msg)?;
    fs::create_dir_all(&cfg.state_dir).with_context(|| format!("creating {}", cfg.state_dir.display()))?;
    let state_dir = fs::canonicalize(&cfg.state_dir)?;
    let mut coord = Coordinator::open(&state_dir, &cfg)?;

    let listener = match TcpListener::bind(&cfg.listen).await {
        Ok(l) => l,
        Err(e) if e.kind() == std::io::ErrorKind::AddrInUse => bail!("PortInUse: {} is already in use", cfg.listen),
        Err(e) => return Err(e).with_context(|| format!("binding {}", cfg.listen)),
    };
    let addr = listener.local_addr()?;
    println!("expd daemon listening on {addr} state {}", state_dir.display());
    let _ = std::io::stdout().flush();

    let (tx, rx) = std_mpsc::channel::<Cmd>();
    let tick = cfg.tick;
    let actor = std::thread::spawn(move || coord.run(rx, tick));

    let next_conn = Arc::new(AtomicU64::new(1));
    let accept_tx = tx.clone();
    let acceptor = tokio::spawn(async move {
        loop {
            let Ok((stream, peer)) = listener.accept().await else { continue };
            let _ = stream.set_nodelay(true);
            let conn = next_conn.fetch_add(1, Ordering::Relaxed);
            log::debug!("connection {conn} from {peer}");
            let (mut rd, wr) = stream.into_split();
            let (wtx, wrx) = mpsc::unbounded_channel();
            spawn_writer(wr, wrx);
            if accept_tx.send(Cmd::Connected(conn, wtx)).is_err() {
                break;
            }
            let tx = accept_tx.clone();
            tokio::spawn(async move {
                loop {
                    match read_message(&mut rd).await {
                        Ok(Some(msg)) => {
                            if tx.send(Cmd::Msg(conn, msg)).is_err() {
                                break;
                            }
                        }
                        Ok(None) => break,
                        Err(e) => {
                            log::info!("connection {conn} closed: {e}");
                            break;
                        }
                    }
                }
                let _ = tx.send(Cmd::Closed(conn));
            });
        }
    });

    shutdown.await;
    acceptor.abort();
    let _ = tx.send(Cmd::Shutdown);
    tokio::task::spawn_blocking(move || actor.join())
        .await?
        .map_err(|_| anyhow::anyhow!("coordinator thread panicked"))?;
    log::info!("coordinator stopped");
    Ok(())
}

/// Journal wrapper that remembers which tasks changed.
struct TouchSink<'a> {
    journal: &'a mut Journal,
    touched: &'a mut BTreeSet<TaskId>,
}

impl EventSink for TouchSink<'_> {
    fn append(&mut self, record: &JournalRecord) -> Result<(), StorageFailure> {
        self.journal.append(record)?;
        self.touched.insert(record.event.task_id().clone());
        Ok(())
    }
}

#[derive(Default)]
struct TaskLog {
    chunks: Vec<LogChunk>,
    next: LogCursor,
}

/// Per-task log chunks, persisted as one canonical JSON line per chunk.
struct LogStore {
    dir: PathBuf,
    tasks: HashMap<TaskId, TaskLog>,
}

enum Appended {
    New,
    Duplicate,
}

impl LogStore {
    fn open(dir: PathBuf) -> anyhow::Result<Self> {
        fs::create_dir_all(&dir)?;
        let mut tasks: HashMap<TaskId, TaskLog> = HashMap::new();
        for entry in fs::read_dir(&dir)? {
            let path = entry?.path();
            if path.extension().and_then(|e| e.to_str()) != Some("jsonl") {
                continue;
            }
            let bytes = fs::read(&path)?;
            for line in bytes.split_inclusive(|&b| b == b'\n') {
                // a torn final line is skipped; its seq will be resent or missing
                let Some(line) = line.strip_suffix(b"\n") else { break };
                let chunk: LogChunk = match canonical::from_slice(line) {
                    Ok(c) => c,
                    Err(e) => {
                        log::warn!("skipping bad log line in {}: {e}", path.display());
                        continue;
                    }
                };
                let log = tasks.entry(chunk.task_id.clone()).or_default();
                if chunk.seq == log.next.get(chunk.stream) {
                    *log.next.get_mut(chunk.stream) += 1;
                    log.chunks.push(chunk);
                }
            }
        }
        Ok(LogStore { dir, tasks })
    }

    fn next(&self, task: &TaskId) -> LogCursor {
        self.tasks.get(task).map(|l| l.next).unwrap_or_default()
    }

    fn append(&mut self, chunk: LogChunk) -> Result<Appended, String> {
        let log = self.tasks.entry(chunk.task_id.clone()).or_default();
        let expected = log.next.get(chunk.stream);
        if chunk.seq < expected {
            return Ok(Appended::Duplicate);
        }
        if chunk.seq > expected {
            return Err(format!(
                "log gap on {} {:?}: expected seq {expected}, got {}",
                chunk.task_id, chunk.stream, chunk.seq
            ));
        }
        if chunk.data.len() > wire::MAX_LOG_CHUNK {
            return Err(format!("log chunk of {} bytes exceeds 64 KiB", chunk.data.len()));
        }
        let mut line = canonical::to_vec(&chunk).map_err(|e| e.to_string())?;
        line.push(b'\n');
        let path = self.dir.join(format!("{}.jsonl", chunk.task_id));
        OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .and_then(|mut f| f.write_all(&line))
            .map_err(|e| format!("{}: {e}", path.display()))?;
        *log.next.get_mut(chunk.stream) += 1;
        log.chunks.push(chunk);
        Ok(Appended::New)
    }

    fn since<'a>(&'a self, task: &TaskId, from: LogCursor) -> impl Iterator<Item = &'a LogChunk> + 'a {
        self.tasks
            .get(task)
            .into_iter()
            .flat_map(|l| l.chunks.iter())
            .filter(move |c| c.seq >= from.get(c.stream))
    }
}

struct Peer {
    tx: mpsc::UnboundedSender<Message>,
    role: String,
}

fn fail<T>(code: ErrorCode, message: impl Into<String>) -> Result<T, (ErrorCode, String)> {
    Err((code, message.into()))
}

fn sched_err(e: SchedulerError) -> (ErrorCode, String) {
    let code = match &e {
        SchedulerError::SnapshotNotFound(_) => ErrorCode::SnapshotNotFound,
        SchedulerError::UnknownTask(_) => ErrorCode::UnknownTask,
        SchedulerError::UnknownExecutor(_) => ErrorCode::UnknownExecutor,
        SchedulerError::AlreadyTerminal(_) => ErrorCode::AlreadyTerminal,
        SchedulerError::WrongExecutor { .. } => ErrorCode::WrongExecutor,
        SchedulerError::IllegalTransition(_) => ErrorCode::IllegalTransition,
        SchedulerError::InvalidOffer(_) => ErrorCode::Validation,
        SchedulerError::Storage(_) => ErrorCode::Storage,
        SchedulerError::OutOfOrder { .. } => ErrorCode::Internal,
    };
    (code, e.to_string())
}

fn relay_err(e: RelayError) -> (ErrorCode, String) {
    let code = match &e {
        RelayError::UnknownChannel(_) => ErrorCode::UnknownChannel,
        RelayError::ChannelExists { .. } => ErrorCode::ChannelExists,
        RelayError::NotAttached { .. } => ErrorCode::NotAttached,
        RelayError::PayloadTooLarge(_) => ErrorCode::PayloadTooLarge,
        RelayError::BufferOverflow(_) => ErrorCode::BufferOverflow,
        RelayError::InvalidAck { .. } | RelayError::InvalidResume { .. } => ErrorCode::InvalidAck,
    };
    (code, e.to_string())
}

fn storage_err(e: impl std::fmt::Display) -> (ErrorCode, String) {
    (ErrorCode::Storage, e.to_string())
}

fn to_value<T: serde::Serialize>(v: &T) -> serde_json::Value {
    serde_json::to_value(v).expect("reply serialization cannot fail")
}

struct Coordinator {
    state_dir: PathBuf,
    store_root: PathBuf,
    sched: Scheduler,
    journal: Journal,
    touched: BTreeSet<TaskId>,
    relay: Relay,
    snapshots: SnapshotStore,
    logs: LogStore,
    peers: HashMap<ConnId, Peer>,
    exec_conn: HashMap<ExecutorId, ConnId>,
    subs: HashMap<TaskId, Vec<(ConnId, LogCursor)>>,
    /// Conns that opened or attached a channel; all hear about its close,
    /// attached or not.
    watchers: HashMap<u64, BTreeSet<ConnId>>,
    collected: BTreeSet<TaskId>,
}

const COLLECTED_FILE: &str = "collected.json";

impl Coordinator {
    fn open(state_dir: &Path, cfg: &DaemonConfig) -> anyhow::Result<Self> {
        let rec = journal::recover(state_dir, cfg.scheduler, Timestamp::now())?;
        log::info!(
            "recovered {} records, {} tasks, {} failed over",
            rec.records_replayed,
            rec.scheduler.tasks().count(),
            rec.orphans_failed_over
        );
        let store_root = state_dir.join("store");
        let objects = Arc::new(ObjectStore::open(&store_root)?);
        let collected = match fs::read(state_dir.join(COLLECTED_FILE)) {
            Ok(b) => canonical::from_slice(&b).context("reading collected.json")?,
            Err(_) => BTreeSet::new(),
        };
        Ok(Coordinator {
            state_dir: state_dir.to_path_buf(),
            store_root,
            sched: rec.scheduler,
            journal: rec.journal,
            touched: BTreeSet::new(),
            relay: Relay::new(cfg.relay),
            snapshots: SnapshotStore::new(objects),
            logs: LogStore::open(state_dir.join("logs"))?,
            peers: HashMap::new(),
            watchers: HashMap::new(),
            exec_conn: HashMap::new(),
            subs: HashMap::new(),
            collected,
        })
    }

    fn run(&mut self, rx: std_mpsc::Receiver<Cmd>, tick: Duration) {
        let mut next_tick = Instant::now() + tick;
        loop {
            let wait = next_tick.saturating_duration_since(Instant::now());
            match rx.recv_timeout(wait) {
                Ok(Cmd::Connected(conn, tx)) => {
                    self.peers.insert(
                        conn,
                        Peer {
                            tx,
                            role: String::new(),
                        },
                    );
                }
                Ok(Cmd::Msg(conn, msg)) => self.handle(conn, msg),
                Ok(Cmd::Closed(conn)) => self.closed(conn),
                Ok(Cmd::Shutdown) | Err(std_mpsc::RecvTimeoutError::Disconnected) => break,
                Err(std_mpsc::RecvTimeoutError::Timeout) => {
                    next_tick = Instant::now() + tick;
                    self.tick();
                }
            }
            self.flush_effects();
        }
    }

    fn sink(&mut self) -> (&mut Scheduler, TouchSink<'_>) {
        (
            &mut self.sched,
            TouchSink {
                journal: &mut self.journal,
                touched: &mut self.touched,
            },
        )
    }

    fn tick(&mut self) {
        let now = Timestamp::now();
        let (sched, mut sink) = self.sink();
        match sched.check_leases(now, &mut sink) {
            Ok(lost) => {
                for e in lost {
                    log::warn!("executor {e} missed its lease");
                }
            }
            Err(e) => log::error!("lease check failed: {e}"),
        }
        let (sched, mut sink) = self.sink();
        if let Err(e) = sched.match_tasks(now, &mut sink) {
            log::error!("matching failed: {e}");
        }
    }

    fn send(&self, conn: ConnId, msg: Message) {
        if let Some(p) = self.peers.get(&conn) {
            let _ = p.tx.send(msg);
        }
    }

    fn notify_executor(&self, exec: &ExecutorId, n: Notify) {
        if let Some(conn) = self.exec_conn.get(exec) {
            self.send(*conn, Message::Notify(n));
        }
    }

    fn route(&mut self, outputs: Vec<Output>) {
        let mut closed_sent = BTreeSet::new();
        for o in outputs {
            match o {
                Output::Deliver { conn, frame } => {
                    let data = ChannelData {
                        channel_id: frame.channel_id,
                        seq: frame.seq,
                        payload: frame.payload,
                    };
                    let msg = match frame.direction {
                        Direction::ClientToTask => Message::ClientToTask(data),
                        Direction::TaskToClient => Message::TaskToClient(data),
                    };
                    self.send(conn, msg);
                }
                Output::Notify { conn, event } => {
                    let n = match event {
                        ChannelEvent::PeerStatus {
                            channel_id,
                            peer,
                            attached,
                        } => Notify::ChannelStatus {
                            channel_id,
                            peer,
                            attached,
                        },
                        ChannelEvent::Closed { channel_id, reason } => {
                            let mut to = self.watchers.remove(&channel_id).unwrap_or_default();
                            to.insert(conn);
                            for c in to {
                                if closed_sent.insert((channel_id, c)) {
                                    let n = Notify::ChannelClosed {
                                        channel_id,
                                        reason: reason.clone(),
                                    };
                                    self.send(c, Message::Notify(n));
                                }
                            }
                            continue;
                        }
                        ChannelEvent::Detached {
                            channel_id,
                            side,
                            reason,
                        } => Notify::Detached {
                            channel_id,
                            side,
                            reason,
                        },
                    };
                    self.send(conn, Message::Notify(n));
                }
            }
        }
    }

    fn flush_effects(&mut self) {
        let outbox = self.sched.take_outbox();
        for (exec, task_id) in outbox.assignments {
            self.notify_executor(&exec, Notify::AssignmentReady { task_id });
        }
        for (exec, task_id) in outbox.kills {
            self.notify_executor(&exec, Notify::Kill { task_id });
        }
        for task_id in outbox.finished {
            let mut out = Vec::new();
            self.relay
                .close_task(&task_id, &[ChannelKind::Debug, ChannelKind::Terminal], "TASK_TERMINAL", &mut out);
            self.route(out);
            if let Some(subs) = self.subs.remove(&task_id) {
                for (conn, _) in subs {
                    self.send(conn, Message::Notify(Notify::LogEnd { task_id: task_id.clone() }));
                }
            }
        }
        for task_id in std::mem::take(&mut self.touched) {
            if let Some(t) = self.sched.task(&task_id) {
                if let Err(e) = journal::write_task_view(&self.state_dir, t) {
                    log::error!("writing task view: {e}");
                }
            }
        }
    }

    fn closed(&mut self, conn: ConnId) {
        let mut out = Vec::new();
        self.relay.detach_conn(conn, &mut out);
        self.route(out);
        for w in self.watchers.values_mut() {
            w.remove(&conn);
        }
        for subs in self.subs.values_mut() {
            subs.retain(|(c, _)| *c != conn);
        }
        self.exec_conn.retain(|_, c| *c != conn);
        self.peers.remove(&conn);
    }

    fn handle(&mut self, conn: ConnId, msg: Message) {
        let Some(id) = msg.request_id() else {
            match msg {
                Message::ClientToTask(d) => self.channel_data(conn, Side::Client, d),
                Message::TaskToClient(d) => self.channel_data(conn, Side::Task, d),
                other => {
                    log::warn!("connection {conn}: unexpected message type {:#04x}", other.msg_type());
                    self.send(
                        conn,
                        Message::Error(ErrorReply {
                            id: 0,
                            code: ErrorCode::BadRequest,
                            message: format!("message type {:#04x} is not a request", other.msg_type()),
                        }),
                    );
                }
            }
            return;
        };
        let mut after = Vec::new();
        let reply = match self.dispatch(conn, msg, &mut after) {
            Ok(result) => Message::Ok(OkReply { id, result }),
            Err((code, message)) => Message::Error(ErrorReply { id, code, message }),
        };
        self.send(conn, reply);
        for m in after {
            match m {
                Deferred::To(c, m) => self.send(c, m),
                Deferred::Outputs(o) => self.route(o),
            }
        }
    }

    fn channel_data(&mut self, conn: ConnId, side: Side, d: ChannelData) {
        let mut out = Vec::new();
        if let Err(e) = self.relay.send(d.channel_id, side, conn, d.payload, &mut out) {
            let (code, message) = relay_err(e);
            self.send(conn, Message::Error(ErrorReply { id: 0, code, message }));
        }
        self.route(out);
    }

    fn dispatch(
        &mut self,
        conn: ConnId,
        msg: Message,
        after: &mut Vec<Deferred>,
    ) -> Result<serde_json::Value, (ErrorCode, String)> {
        let now = Timestamp::now();
        match msg {
            Message::Hello(h) => {
                if h.version != wire::PROTOCOL_VERSION {
                    return fail(
                        ErrorCode::BadRequest,
                        format!("protocol version {} not supported (server speaks {})", h.version, wire::PROTOCOL_VERSION),
                    );
                }
                if let Some(p) = self.peers.get_mut(&conn) {
                    p.role = h.role;
                }
                Ok(to_value(&HelloReply {
                    version: wire::PROTOCOL_VERSION,
                    server: format!("expd {}", env!("CARGO_PKG_VERSION")),
                    store_root: self.store_root.display().to_string(),
                }))
            }
            Message::Submit(s) => {
                let snapshots = &self.snapshots;
                let exists = |id: &SnapshotId| matches!(snapshots.find_zone(id), Ok(Some(_)));
                let mut sink = TouchSink {
                    journal: &mut self.journal,
                    touched: &mut self.touched,
                };
                let task_id = self
                    .sched
                    .submit(s.run_config, s.workspace, exists, now, &mut sink)
                    .map_err(sched_err)?;
                Ok(json!({ "task_id": task_id }))
            }
            Message::Status(s) => {
                let tasks: Vec<TaskRecord> = match s.task_id {
                    Some(id) => vec![self
                        .sched
                        .task(&id)
                        .cloned()
                        .ok_or((ErrorCode::UnknownTask, format!("unknown task {id}")))?],
                    None => self.sched.tasks().cloned().collect(),
                };
                Ok(to_value(&StatusReply { tasks }))
            }
            Message::Register(r) => {
                let (sched, mut sink) = self.sink();
                let exec = sched.register(r.offer, now, &mut sink).map_err(sched_err)?;
                self.exec_conn.insert(exec.clone(), conn);
                let heartbeat_seconds = (self.sched.config().heartbeat_ms / 1000).max(1);
                Ok(to_value(&RegisterReply {
                    executor_id: exec,
                    store_root: self.store_root.display().to_string(),
                    heartbeat_seconds,
                }))
            }
            Message::Heartbeat(h) => {
                self.sched.heartbeat(&h.executor_id, now).map_err(sched_err)?;
                self.exec_conn.insert(h.executor_id, conn);
                Ok(json!({}))
            }
            Message::Claim(c) => {
                let (sched, mut sink) = self.sink();
                let Some(task) = sched.claim(&c.executor_id, now, &mut sink).map_err(sched_err)? else {
                    return Ok(json!({ "assignment": null }));
                };
                let zone = self
                    .sched
                    .executor(&c.executor_id)
                    .map(|e| e.offer.zone.clone())
                    .unwrap_or_default();
                self.stage_inputs(&task, &zone);
                let assignment = Assignment {
                    task_id: task.task_id.clone(),
                    run_config: task.run_config.clone(),
                    zone,
                    log_seq: self.logs.next(&task.task_id),
                    channels: self
                        .relay
                        .channels_for_task(&task.task_id)
                        .map(|c| ChannelInfo {
                            channel_id: c.channel_id,
                            task_id: c.task_id.clone(),
                            kind: c.kind,
                        })
                        .collect(),
                };
                Ok(json!({ "assignment": to_value(&assignment) }))
            }
            Message::Report(r) => {
                let event = match r.event {
                    ReportEvent::BeginRun => LifecycleEvent::BeginRun,
                    ReportEvent::Finish { exit_code } => LifecycleEvent::Finish { exit_code },
                    ReportEvent::Fail { phase, message } => {
                        log::info!("task {} failed in {:?}: {message}", r.task_id, phase);
                        LifecycleEvent::Fail { phase }
                    }
                };
                let (sched, mut sink) = self.sink();
                sched
                    .report(&r.task_id, &r.executor_id, event, now, &mut sink)
                    .map_err(sched_err)?;
                Ok(json!({}))
            }
            Message::LogAppend(a) => {
                let task = self
                    .sched
                    .task(&a.chunk.task_id)
                    .ok_or((ErrorCode::UnknownTask, format!("unknown task {}", a.chunk.task_id)))?;
                if task.executor_id.as_ref() != Some(&a.executor_id) {
                    return fail(
                        ErrorCode::WrongExecutor,
                        format!("task {} is not assigned to {}", a.chunk.task_id, a.executor_id),
                    );
                }
                let chunk = a.chunk;
                match self.logs.append(chunk.clone()).map_err(|m| (ErrorCode::BadRequest, m))? {
                    Appended::Duplicate => return Ok(json!({ "duplicate": true })),
                    Appended::New => {}
                }
                if let Some(subs) = self.subs.get(&chunk.task_id) {
                    for (c, from) in subs {
                        if chunk.seq >= from.get(chunk.stream) {
                            after.push(Deferred::To(*c, Message::Notify(Notify::Log { chunk: chunk.clone() })));
                        }
                    }
                }
                Ok(json!({}))
            }
            Message::LogSubscribe(s) => {
                let task = self
                    .sched
                    .task(&s.task_id)
                    .ok_or((ErrorCode::UnknownTask, format!("unknown task {}", s.task_id)))?;
                let terminal = task.state.is_terminal();
                for chunk in self.logs.since(&s.task_id, s.from) {
                    after.push(Deferred::To(conn, Message::Notify(Notify::Log { chunk: chunk.clone() })));
                }
                if s.follow && !terminal {
                    // only chunks not already sent go to the live subscription
                    let next = self.logs.next(&s.task_id);
                    let cursor = LogCursor {
                        stdout: next.stdout.max(s.from.stdout),
                        stderr: next.stderr.max(s.from.stderr),
                    };
                    self.subs.entry(s.task_id).or_default().push((conn, cursor));
                } else {
                    after.push(Deferred::To(conn, Message::Notify(Notify::LogEnd { task_id: s.task_id })));
                }
                Ok(json!({}))
            }
            Message::ChannelOpen(o) => {
                let task = self
                    .sched
                    .task(&o.task_id)
                    .ok_or((ErrorCode::UnknownTask, format!("unknown task {}", o.task_id)))?;
                let retained = self.workspace_retained(task);
                if task.state.is_terminal() && !(o.kind == ChannelKind::Terminal && retained) {
                    return fail(
                        ErrorCode::TaskTerminal,
                        format!("task {} is {} and its workspace is not available", o.task_id, task.state),
                    );
                }
                let claimed = matches!(task.state, TaskState::Preparing | TaskState::Running) || task.state.is_terminal();
                let exec = task.executor_id.clone();
                let channel_id = self.relay.open(o.task_id.clone(), o.kind).map_err(relay_err)?;
                self.watchers.entry(channel_id).or_default().insert(conn);
                if claimed {
                    if let Some(c) = exec.and_then(|e| self.exec_conn.get(&e).copied()) {
                        after.push(Deferred::To(
                            c,
                            Message::Notify(Notify::ChannelOpened {
                                channel: ChannelInfo {
                                    channel_id,
                                    task_id: o.task_id,
                                    kind: o.kind,
                                },
                            }),
                        ));
                    }
                }
                Ok(json!({ "channel_id": channel_id }))
            }
            Message::ChannelAttach(a) => {
                if a.side == Side::Task {
                    self.check_task_side(conn, a.channel_id)?;
                }
                let mut out = Vec::new();
                let outcome = self
                    .relay
                    .attach(a.channel_id, a.side, conn, a.resume_from, &mut out)
                    .map_err(relay_err)?;
                self.watchers.entry(a.channel_id).or_default().insert(conn);
                after.push(Deferred::Outputs(out));
                Ok(to_value(&outcome))
            }
            Message::ChannelAck(a) => {
                self.relay.ack(a.channel_id, a.side, conn, a.seq).map_err(relay_err)?;
                Ok(json!({}))
            }
            Message::ChannelDetach(d) => {
                let mut out = Vec::new();
                self.relay.detach(d.channel_id, d.side, conn, &mut out).map_err(relay_err)?;
                after.push(Deferred::Outputs(out));
                Ok(json!({}))
            }
            Message::ChannelClose(c) => {
                let mut out = Vec::new();
                self.relay.close(c.channel_id, &c.reason, &mut out).map_err(relay_err)?;
                after.push(Deferred::Outputs(out));
                Ok(json!({}))
            }
            Message::Cancel(t) => {
                let (sched, mut sink) = self.sink();
                sched.cancel(&t.task_id, now, &mut sink).map_err(sched_err)?;
                Ok(json!({}))
            }
            Message::Reproduce(t) => {
                let task = self
                    .sched
                    .task(&t.task_id)
                    .ok_or((ErrorCode::UnknownTask, format!("unknown task {}", t.task_id)))?;
                let snap = task.run_config.workdir_snapshot;
                match self.snapshots.find_zone(&snap).map_err(storage_err)? {
                    Some(zone) => Ok(json!({ "task": to_value(task), "zone": zone })),
                    None => fail(ErrorCode::SnapshotNotFound, format!("snapshot {snap} was collected")),
                }
            }
            Message::Gc(g) => self.gc(g.keep_last as usize, after),
            Message::Replicate(r) => {
                let from = self
                    .snapshots
                    .find_zone(&r.snapshot_id)
                    .map_err(storage_err)?
                    .ok_or((ErrorCode::SnapshotNotFound, format!("snapshot {} not found", r.snapshot_id)))?;
                let report = self
                    .snapshots
                    .replicate_snapshot(&r.snapshot_id, &from, &r.to_zone)
                    .map_err(storage_err)?;
                Ok(to_value(&report))
            }
            Message::Executors(_) => {
                let list: Vec<ExecutorView> = self
                    .sched
                    .executors()
                    .map(|e| ExecutorView {
                        executor_id: e.executor_id.clone(),
                        offer: e.offer.clone(),
                        last_heartbeat: e.last_heartbeat,
                        busy_with: e.busy_with.clone(),
                        connected: e.connected,
                    })
                    .collect();
                Ok(json!({ "executors": to_value(&list) }))
            }
            other => fail(
                ErrorCode::BadRequest,
                format!("message type {:#04x} is not a request", other.msg_type()),
            ),
        }
    }

    fn workspace_retained(&self, task: &TaskRecord) -> bool {
        !self.collected.contains(&task.task_id)
            && task
                .executor_id
                .as_ref()
                .is_some_and(|e| self.exec_conn.contains_key(e) && self.sched.executor(e).is_some_and(|r| r.connected))
    }

    fn check_task_side(&self, conn: ConnId, channel_id: u64) -> Result<(), (ErrorCode, String)> {
        let ch = self
            .relay
            .channel(channel_id)
            .ok_or((ErrorCode::UnknownChannel, format!("unknown channel {channel_id}")))?;
        let owner = self.sched.task(&ch.task_id).and_then(|t| t.executor_id.clone());
        match owner.and_then(|e| self.exec_conn.get(&e)) {
            Some(c) if *c == conn => Ok(()),
            _ => fail(
                ErrorCode::WrongExecutor,
                format!("task side of channel {channel_id} belongs to the executor running {}", ch.task_id),
            ),
        }
    }

    /// Copies the task's snapshot and mounted objects into the executor's zone.
    fn stage_inputs(&self, task: &TaskRecord, zone: &str) {
        let snap = task.run_config.workdir_snapshot;
        let src = match self.snapshots.find_zone(&snap) {
            Ok(Some(z)) => z,
            Ok(None) => {
                log::warn!("snapshot {snap} of {} is missing", task.task_id);
                return;
            }
            Err(e) => {
                log::error!("locating snapshot {snap}: {e}");
                return;
            }
        };
        if src != zone {
            match self.snapshots.replicate_snapshot(&snap, &src, zone) {
                Ok(r) => log_transfer("snapshot", &r),
                Err(e) => log::error!("replicating snapshot {snap} to {zone}: {e}"),
            }
        }
        let objects = self.snapshots.objects();
        for m in task.run_config.mounts.iter() {
            let zones = objects.zones().unwrap_or_default();
            // prefer the snapshot's zone as the source, then any other zone holding the prefix
            let mut candidates: Vec<&String> = zones.iter().filter(|z| *z != zone).collect();
            candidates.sort_by_key(|z| **z != src);
            for from in candidates {
                let keys = objects.list_prefix(from, &m.bucket, &m.prefix).unwrap_or_default();
                if keys.is_empty() {
                    continue;
                }
                match objects.replicate(from, zone, &m.bucket, &keys) {
                    Ok(r) => log_transfer("mount", &r),
                    Err(e) => log::error!("replicating {}:{} to {zone}: {e}", m.bucket, m.prefix),
                }
                break;
            }
        }
    }

    fn gc(&mut self, keep_last: usize, after: &mut Vec<Deferred>) -> Result<serde_json::Value, (ErrorCode, String)> {
        let mut by_workspace: BTreeMap<Option<String>, Vec<&TaskRecord>> = BTreeMap::new();
        for t in self.sched.tasks() {
            by_workspace.entry(t.workspace.clone()).or_default().push(t);
        }
        let mut kept: BTreeSet<TaskId> = BTreeSet::new();
        for tasks in by_workspace.values_mut() {
            tasks.sort_by(|a, b| (b.submit_time, &b.task_id).cmp(&(a.submit_time, &a.task_id)));
            kept.extend(tasks.iter().take(keep_last).map(|t| t.task_id.clone()));
        }
        kept.extend(self.sched.tasks().filter(|t| !t.state.is_terminal()).map(|t| t.task_id.clone()));
        let roots: Vec<SnapshotId> = kept
            .iter()
            .map(|t| self.sched.task(t).expect("kept task exists").run_config.workdir_snapshot)
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();
        let mut total = GcReport::default();
        for zone in self.snapshots.objects().zones().map_err(storage_err)? {
            let r = self.snapshots.collect_garbage(&zone, &roots).map_err(storage_err)?;
            total.manifests_deleted += r.manifests_deleted;
            total.blobs_deleted += r.blobs_deleted;
            total.bytes_freed += r.bytes_freed;
        }
        let dropped: Vec<TaskId> = self
            .sched
            .tasks()
            .filter(|t| t.state.is_terminal() && !kept.contains(&t.task_id) && !self.collected.contains(&t.task_id))
            .map(|t| t.task_id.clone())
            .collect();
        self.collected.extend(dropped.iter().cloned());
        let body = canonical::to_vec(&self.collected).map_err(storage_err)?;
        let path = self.state_dir.join(COLLECTED_FILE);
        fs::write(&path, body).map_err(storage_err)?;
        if !dropped.is_empty() {
            for conn in self.exec_conn.values() {
                after.push(Deferred::To(
                    *conn,
                    Message::Notify(Notify::DropWorkspaces {
                        task_ids: dropped.clone(),
                    }),
                ));
            }
        }
        Ok(json!({
            "manifests_deleted": total.manifests_deleted,
            "blobs_deleted": total.blobs_deleted,
            "bytes_freed": total.bytes_freed,
            "kept_snapshots": roots,
            "workspaces_dropped": dropped,
        }))
    }
}

enum Deferred {
    To(ConnId, Message),
    Outputs(Vec<Output>),
}

fn log_transfer(what: &str, r: &TransferReport) {
    log::info!(
        "{what} {} -> {}: {} transferred ({} bytes), {} skipped",
        r.from_zone,
        r.to_zone,
        r.transferred.len(),
        r.bytes_transferred,
        r.skipped.len()
    );
}
