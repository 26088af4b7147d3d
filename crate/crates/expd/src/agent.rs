//! The executor agent: registers an offer, claims one task at a time,
//! prepares its workspace, runs it while streaming logs, and hosts the task
//! ends of debug and terminal channels.

use std::collections::HashMap;
use std::ffi::CStr;
use std::fs;
use std::os::unix::fs::PermissionsExt;
use std::path::{Component, Path, PathBuf};
use std::process::Stdio;
use std::sync::{Arc, Mutex};
use std::time::Duration;

use anyhow::{bail, Context};
use expd_core::model::{ExecutorId, FailurePhase, HardwareOffer, MountSpec, TaskId};
use expd_core::object_store::ObjectStore;
use expd_core::relay::{ChannelKind, Side};
use expd_core::snapshot::SnapshotStore;
use expd_core::wire::{
    Assignment, ChannelAttach, ChannelClose, ChannelData, ChannelInfo, ErrorCode, ExecutorRef, LogAppend, LogChunk,
    LogCursor, LogStream, Message, Notify, Register, RegisterReply, Report, ReportEvent, MAX_LOG_CHUNK,
};
use expd_core::SnapshotId;
use serde::Deserialize;
use tokio::io::{AsyncRead, AsyncReadExt, AsyncWriteExt};
use tokio::net::{TcpListener, TcpStream};
use tokio::process::{Child, Command};
use tokio::sync::mpsc;
use tokio::task::JoinHandle;

use crate::bridge::{Bridge, BridgeEvent};
use crate::conn::{Client, ClientError, Incoming};

#[derive(Clone, Debug)]
pub struct AgentConfig {
    pub coordinator: String,
    pub id: Option<String>,
    pub zone: String,
    pub accel_type: Option<String>,
    pub accel_count: u32,
    pub cpu: u32,
    pub memory_mb: u64,
    pub provision_delay: Duration,
    pub scratch: PathBuf,
    pub store_root: Option<PathBuf>,
}

pub fn default_executor_id() -> String {
    let mut buf = [0 as libc::c_char; 256];
    // SAFETY: the buffer is valid for its length and NUL-terminated below.
    let host = unsafe {
        if libc::gethostname(buf.as_mut_ptr(), buf.len() - 1) == 0 {
            buf[buf.len() - 1] = 0;
            CStr::from_ptr(buf.as_ptr()).to_string_lossy().into_owned()
        } else {
            "executor".to_string()
        }
    };
    format!("{host}-{}", std::process::id())
}

/// Materialized inputs of one task.
#[derive(Debug)]
pub struct PreparedWorkspace {
    pub root: PathBuf,
    pub snapshot_id: SnapshotId,
    pub mounted: Vec<(MountSpec, usize)>,
}

#[derive(Debug)]
pub enum PrepareError {
    Snapshot(String),
    MountTargetConflict(String),
    Mount(String),
    Io(String),
}

impl std::fmt::Display for PrepareError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            PrepareError::Snapshot(m) => write!(f, "materializing snapshot: {m}"),
            PrepareError::MountTargetConflict(t) => write!(f, "MountTargetConflict: mount target {t} collides with a workspace path"),
            PrepareError::Mount(m) => write!(f, "mounting: {m}"),
            PrepareError::Io(m) => write!(f, "preparing workspace: {m}"),
        }
    }
}

impl std::error::Error for PrepareError {}

/// Restores write permission below `path` and deletes it.
pub fn remove_workspace(path: &Path) -> std::io::Result<()> {
    fn unlock(p: &Path) -> std::io::Result<()> {
        let meta = fs::symlink_metadata(p)?;
        if meta.is_dir() {
            fs::set_permissions(p, fs::Permissions::from_mode(0o755))?;
            for e in fs::read_dir(p)? {
                unlock(&e?.path())?;
            }
        }
        Ok(())
    }
    match fs::symlink_metadata(path) {
        Ok(_) => {
            unlock(path)?;
            fs::remove_dir_all(path)
        }
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(()),
        Err(e) => Err(e),
    }
}

fn safe_relative(rel: &str) -> bool {
    Path::new(rel).components().all(|c| matches!(c, Component::Normal(_)))
}

fn lock_read_only(path: &Path) -> std::io::Result<()> {
    let meta = fs::symlink_metadata(path)?;
    if meta.is_dir() {
        for e in fs::read_dir(path)? {
            lock_read_only(&e?.path())?;
        }
        fs::set_permissions(path, fs::Permissions::from_mode(0o555))
    } else if meta.is_file() {
        fs::set_permissions(path, fs::Permissions::from_mode(0o444))
    } else {
        Ok(())
    }
}

/// Creates `<scratch>/<task_id>/` holding the snapshot tree plus read-only
/// copies of the mounted objects.
pub fn prepare_workspace(
    snapshots: &SnapshotStore,
    assignment: &Assignment,
    scratch: &Path,
) -> Result<PreparedWorkspace, PrepareError> {
    let io = |e: std::io::Error| PrepareError::Io(e.to_string());
    let root = scratch.join(assignment.task_id.as_str());
    remove_workspace(&root).map_err(io)?;
    fs::create_dir_all(scratch).map_err(io)?;
    let cfg = &assignment.run_config;
    let zone = &assignment.zone;
    snapshots
        .materialize(&cfg.workdir_snapshot, &root, zone)
        .map_err(|e| PrepareError::Snapshot(e.to_string()))?;
    let objects = snapshots.objects();
    let mut mounted = Vec::new();
    for m in &cfg.mounts {
        let target = root.join(&m.target);
        if fs::symlink_metadata(&target).is_ok() {
            return Err(PrepareError::MountTargetConflict(m.target.clone()));
        }
        let mut parent = target.parent();
        while let Some(p) = parent {
            if p == root {
                break;
            }
            if fs::symlink_metadata(p).is_ok_and(|md| !md.is_dir()) {
                return Err(PrepareError::MountTargetConflict(m.target.clone()));
            }
            parent = p.parent();
        }
        let keys = objects
            .list_prefix(zone, &m.bucket, &m.prefix)
            .map_err(|e| PrepareError::Mount(e.to_string()))?;
        fs::create_dir_all(&target).map_err(io)?;
        for key in &keys {
            let rel = key[m.prefix.len()..].trim_start_matches('/');
            if rel.is_empty() || !safe_relative(rel) {
                return Err(PrepareError::Mount(format!(
                    "object key {key:?} does not map to a path below {}",
                    m.target
                )));
            }
            let dest = target.join(rel);
            if let Some(p) = dest.parent() {
                fs::create_dir_all(p).map_err(io)?;
            }
            let bytes = objects
                .get_object(zone, &m.bucket, key)
                .map_err(|e| PrepareError::Mount(e.to_string()))?;
            fs::write(&dest, bytes).map_err(io)?;
        }
        lock_read_only(&target).map_err(io)?;
        mounted.push((m.clone(), keys.len()));
    }
    Ok(PreparedWorkspace {
        root,
        snapshot_id: cfg.workdir_snapshot,
        mounted,
    })
}

/// Sends log chunks with contiguous per-stream sequence numbers.
struct LogSink {
    client: Arc<Client>,
    executor_id: ExecutorId,
    task_id: TaskId,
    next: Mutex<LogCursor>,
}

impl LogSink {
    async fn write(&self, stream: LogStream, data: &[u8]) {
        for piece in data.chunks(MAX_LOG_CHUNK) {
            let seq = {
                let mut n = self.next.lock().unwrap();
                let s = n.get(stream);
                *n.get_mut(stream) += 1;
                s
            };
            let chunk = LogChunk {
                task_id: self.task_id.clone(),
                stream,
                seq,
                data: piece.to_vec(),
            };
            let executor_id = self.executor_id.clone();
            if let Err(e) = self
                .client
                .call(|id| Message::LogAppend(LogAppend { id, executor_id, chunk }))
                .await
            {
                log::warn!("log append for {} failed: {e}", self.task_id);
            }
        }
    }

    async fn pump<R: AsyncRead + Unpin>(self: Arc<Self>, stream: LogStream, mut r: R) {
        let mut buf = vec![0u8; MAX_LOG_CHUNK];
        loop {
            match r.read(&mut buf).await {
                Ok(0) | Err(_) => break,
                Ok(n) => self.write(stream, &buf[..n]).await,
            }
        }
    }
}

type Pgid = Arc<Mutex<Option<i32>>>;

fn signal_group(pgid: &Pgid, sig: libc::c_int) {
    if let Some(p) = *pgid.lock().unwrap() {
        // SAFETY: plain syscall; a negative pid addresses the process group.
        unsafe {
            libc::kill(-p, sig);
        }
    }
}

fn exit_code_of(status: std::process::ExitStatus) -> i32 {
    use std::os::unix::process::ExitStatusExt;
    status.code().unwrap_or_else(|| 128 + status.signal().unwrap_or(0))
}

struct TaskContext {
    client: Arc<Client>,
    snapshots: Arc<SnapshotStore>,
    executor_id: ExecutorId,
    assignment: Assignment,
    scratch: PathBuf,
    debug_port: u16,
    pgid: Pgid,
    done: mpsc::UnboundedSender<Internal>,
}

impl TaskContext {
    fn env(&self, root: &Path) -> Vec<(String, String)> {
        let mut env: Vec<(String, String)> = self
            .assignment
            .run_config
            .env
            .iter()
            .map(|e| (e.name.clone(), e.value.clone()))
            .collect();
        env.push(("EXPD_TASK_ID".into(), self.assignment.task_id.to_string()));
        env.push(("EXPD_WORKSPACE".into(), root.display().to_string()));
        env.push(("EXPD_DEBUG_HOST".into(), "127.0.0.1".into()));
        env.push(("EXPD_DEBUG_PORT".into(), self.debug_port.to_string()));
        env.push(("EXPD_DEBUG_ADDR".into(), format!("127.0.0.1:{}", self.debug_port)));
        env
    }

    async fn report(&self, event: ReportEvent) {
        let (task_id, executor_id) = (self.assignment.task_id.clone(), self.executor_id.clone());
        if let Err(e) = self
            .client
            .call(|id| {
                Message::Report(Report {
                    id,
                    task_id,
                    executor_id,
                    event,
                })
            })
            .await
        {
            // e.g. the task was canceled meanwhile
            log::info!("report for {} not applied: {e}", self.assignment.task_id);
        }
    }

    /// Spawns `argv` in its own process group and pumps its output into the
    /// task log until it exits. Returns the exit code.
    async fn run_logged(&self, argv: &[String], root: &Path, logs: &Arc<LogSink>) -> i32 {
        let mut cmd = Command::new(&argv[0]);
        cmd.args(&argv[1..])
            .current_dir(root)
            .envs(self.env(root))
            .stdin(Stdio::null())
            .stdout(Stdio::piped())
            .stderr(Stdio::piped())
            .process_group(0)
            .kill_on_drop(false);
        let mut child: Child = match cmd.spawn() {
            Ok(c) => c,
            Err(e) => {
                let code = if e.kind() == std::io::ErrorKind::PermissionDenied { 126 } else { 127 };
                logs.write(LogStream::Stderr, format!("expd: cannot run {:?}: {e}\n", argv[0]).as_bytes())
                    .await;
                return code;
            }
        };
        *self.pgid.lock().unwrap() = child.id().map(|p| p as i32);
        let out = tokio::spawn(logs.clone().pump(LogStream::Stdout, child.stdout.take().expect("piped")));
        let err = tokio::spawn(logs.clone().pump(LogStream::Stderr, child.stderr.take().expect("piped")));
        let code = match child.wait().await {
            Ok(s) => exit_code_of(s),
            Err(e) => {
                log::error!("waiting for {}: {e}", self.assignment.task_id);
                127
            }
        };
        // leftovers in the group would keep the pipes open
        signal_group(&self.pgid, libc::SIGKILL);
        *self.pgid.lock().unwrap() = None;
        let _ = out.await;
        let _ = err.await;
        code
    }

    async fn run(self) {
        let task_id = self.assignment.task_id.clone();
        let logs = Arc::new(LogSink {
            client: self.client.clone(),
            executor_id: self.executor_id.clone(),
            task_id: task_id.clone(),
            next: Mutex::new(self.assignment.log_seq),
        });
        let prepared = {
            let snapshots = self.snapshots.clone();
            let assignment = self.assignment.clone();
            let scratch = self.scratch.clone();
            tokio::task::spawn_blocking(move || prepare_workspace(&snapshots, &assignment, &scratch))
                .await
                .unwrap_or_else(|e| Err(PrepareError::Io(e.to_string())))
        };
        let ws = match prepared {
            Ok(ws) => ws,
            Err(e) => {
                let message = e.to_string();
                logs.write(LogStream::Stderr, format!("expd: {message}\n").as_bytes()).await;
                self.report(ReportEvent::Fail {
                    phase: FailurePhase::Prepare,
                    message,
                })
                .await;
                let _ = self.done.send(Internal::TaskDone { task_id, root: None });
                return;
            }
        };
        log::info!("task {task_id}: workspace {} ready ({} mounts)", ws.root.display(), ws.mounted.len());
        if let Some(setup) = self.assignment.run_config.setup_command.clone() {
            let code = self.run_logged(&setup, &ws.root, &logs).await;
            if code != 0 {
                let message = format!("SetupFailed({code})");
                logs.write(LogStream::Stderr, format!("expd: setup command exited with {code}\n").as_bytes())
                    .await;
                self.report(ReportEvent::Fail {
                    phase: FailurePhase::Prepare,
                    message,
                })
                .await;
                let _ = self.done.send(Internal::TaskDone {
                    task_id,
                    root: Some(ws.root),
                });
                return;
            }
        }
        self.report(ReportEvent::BeginRun).await;
        let command = self.assignment.run_config.command.clone();
        let exit_code = self.run_logged(&command, &ws.root, &logs).await;
        log::info!("task {task_id} exited with {exit_code}");
        self.report(ReportEvent::Finish { exit_code }).await;
        let _ = self.done.send(Internal::TaskDone {
            task_id,
            root: Some(ws.root),
        });
    }
}

enum Internal {
    TaskDone { task_id: TaskId, root: Option<PathBuf> },
    AdapterConnected { task_id: TaskId, stream: TcpStream },
    Bridge(BridgeEvent),
    ShellExited { channel_id: u64 },
    Fatal(String),
}

struct Current {
    task_id: TaskId,
    root: PathBuf,
    pgid: Pgid,
    listener: JoinHandle<()>,
    waiting_adapter: Option<TcpStream>,
}

struct Shell {
    stdin: mpsc::UnboundedSender<Vec<u8>>,
    pgid: Pgid,
}

enum Endpoint {
    Debug { task_id: TaskId, bridge: Bridge },
    Terminal(Shell),
}

struct Agent {
    cfg: AgentConfig,
    client: Arc<Client>,
    executor_id: ExecutorId,
    snapshots: Arc<SnapshotStore>,
    internal: mpsc::UnboundedSender<Internal>,
    bridge_events: mpsc::UnboundedSender<BridgeEvent>,
    current: Option<Current>,
    retained: HashMap<TaskId, PathBuf>,
    endpoints: HashMap<u64, Endpoint>,
}

#[derive(Deserialize)]
struct ClaimReply {
    assignment: Option<Assignment>,
}

pub async fn run(cfg: AgentConfig) -> anyhow::Result<()> {
    if !cfg.provision_delay.is_zero() {
        log::info!("provisioning for {:?}", cfg.provision_delay);
        tokio::time::sleep(cfg.provision_delay).await;
    }
    let (client, mut incoming) = Client::connect(&cfg.coordinator, "executor").await?;
    let executor_id = ExecutorId::new(cfg.id.clone().unwrap_or_else(default_executor_id));
    let offer = HardwareOffer {
        executor_id: executor_id.clone(),
        accel_type: cfg.accel_type.clone(),
        accel_count: cfg.accel_count,
        cpu_cores: cfg.cpu,
        memory_mb: cfg.memory_mb,
        zone: cfg.zone.clone(),
    };
    let reg: RegisterReply = client.call_as(|id| Message::Register(Register { id, offer })).await?;
    let store_root = cfg.store_root.clone().unwrap_or_else(|| PathBuf::from(&reg.store_root));
    let snapshots = Arc::new(SnapshotStore::new(Arc::new(
        ObjectStore::open(&store_root).with_context(|| format!("opening store {}", store_root.display()))?,
    )));
    println!("executor {} registered in zone {}", reg.executor_id, cfg.zone);
    use std::io::Write as _;
    let _ = std::io::stdout().flush();

    let (internal, mut internal_rx) = mpsc::unbounded_channel();
    let (bridge_events, mut bridge_rx) = mpsc::unbounded_channel();
    {
        let client = client.clone();
        let id = executor_id.clone();
        let tx = internal.clone();
        let period = Duration::from_secs(reg.heartbeat_seconds.max(1));
        tokio::spawn(async move {
            let mut tick = tokio::time::interval(period);
            tick.tick().await;
            loop {
                tick.tick().await;
                let executor_id = id.clone();
                match client.call(|id| Message::Heartbeat(ExecutorRef { id, executor_id })).await {
                    Ok(_) => {}
                    Err(ClientError::Remote(e)) if e.code == ErrorCode::UnknownExecutor => {
                        let _ = tx.send(Internal::Fatal("lease lapsed; coordinator no longer knows this executor".into()));
                        return;
                    }
                    Err(e) => log::warn!("heartbeat failed: {e}"),
                }
            }
        });
    }

    let mut agent = Agent {
        cfg,
        client,
        executor_id,
        snapshots,
        internal,
        bridge_events,
        current: None,
        retained: HashMap::new(),
        endpoints: HashMap::new(),
    };
    agent.try_claim().await;
    loop {
        tokio::select! {
            msg = incoming.recv() => match msg {
                Some(m) => agent.on_incoming(m).await,
                None => {
                    agent.kill_current();
                    bail!("coordinator connection lost");
                }
            },
            Some(ev) = internal_rx.recv() => {
                if let Internal::Fatal(m) = ev {
                    agent.kill_current();
                    bail!(m);
                }
                agent.on_internal(ev).await;
            }
            Some(ev) = bridge_rx.recv() => agent.on_internal(Internal::Bridge(ev)).await,
        }
    }
}

impl Agent {
    async fn try_claim(&mut self) {
        if self.current.is_some() {
            return;
        }
        let executor_id = self.executor_id.clone();
        let reply: ClaimReply = match self
            .client
            .call_as(|id| Message::Claim(ExecutorRef { id, executor_id }))
            .await
        {
            Ok(r) => r,
            Err(e) => {
                log::warn!("claim failed: {e}");
                return;
            }
        };
        if let Some(a) = reply.assignment {
            self.start(a).await;
        }
    }

    async fn start(&mut self, assignment: Assignment) {
        let task_id = assignment.task_id.clone();
        log::info!("claimed {task_id}");
        let listener = match TcpListener::bind("127.0.0.1:0").await {
            Ok(l) => l,
            Err(e) => {
                log::error!("debug listener: {e}");
                return;
            }
        };
        let debug_port = listener.local_addr().map(|a| a.port()).unwrap_or(0);
        let tx = self.internal.clone();
        let tid = task_id.clone();
        let accept = tokio::spawn(async move {
            while let Ok((stream, _)) = listener.accept().await {
                let _ = stream.set_nodelay(true);
                if tx
                    .send(Internal::AdapterConnected {
                        task_id: tid.clone(),
                        stream,
                    })
                    .is_err()
                {
                    break;
                }
            }
        });
        let pgid = Pgid::default();
        let root = self.cfg.scratch.join(task_id.as_str());
        self.retained.remove(&task_id);
        self.current = Some(Current {
            task_id: task_id.clone(),
            root,
            pgid: pgid.clone(),
            listener: accept,
            waiting_adapter: None,
        });
        for ch in &assignment.channels {
            self.open_endpoint(ch.clone()).await;
        }
        let ctx = TaskContext {
            client: self.client.clone(),
            snapshots: self.snapshots.clone(),
            executor_id: self.executor_id.clone(),
            assignment,
            scratch: self.cfg.scratch.clone(),
            debug_port,
            pgid,
            done: self.internal.clone(),
        };
        tokio::spawn(ctx.run());
    }

    fn kill_current(&mut self) {
        if let Some(c) = &self.current {
            signal_group(&c.pgid, libc::SIGKILL);
        }
        for ep in self.endpoints.values() {
            if let Endpoint::Terminal(sh) = ep {
                signal_group(&sh.pgid, libc::SIGKILL);
            }
        }
    }

    async fn on_incoming(&mut self, msg: Incoming) {
        match msg {
            Incoming::Notify(n) => match n {
                Notify::AssignmentReady { .. } => self.try_claim().await,
                Notify::Kill { task_id } => {
                    if let Some(c) = self.current.as_ref().filter(|c| c.task_id == task_id) {
                        log::info!("killing {task_id}");
                        signal_group(&c.pgid, libc::SIGTERM);
                        let pgid = c.pgid.clone();
                        tokio::spawn(async move {
                            tokio::time::sleep(Duration::from_secs(2)).await;
                            signal_group(&pgid, libc::SIGKILL);
                        });
                    }
                }
                Notify::ChannelOpened { channel } => self.open_endpoint(channel).await,
                Notify::ChannelClosed { channel_id, reason } => {
                    log::info!("channel {channel_id} closed: {reason}");
                    self.drop_endpoint(channel_id);
                }
                Notify::Detached { channel_id, .. } => {
                    if let Some(Endpoint::Debug { bridge, .. }) = self.endpoints.get_mut(&channel_id) {
                        bridge.shutdown();
                    }
                }
                Notify::DropWorkspaces { task_ids } => {
                    for t in task_ids {
                        if let Some(root) = self.retained.remove(&t) {
                            if let Err(e) = remove_workspace(&root) {
                                log::warn!("removing {}: {e}", root.display());
                            }
                        }
                    }
                }
                Notify::ChannelStatus { .. } | Notify::Log { .. } | Notify::LogEnd { .. } => {}
            },
            Incoming::ClientToTask(d) => self.deliver(d),
            Incoming::TaskToClient(_) => {}
            Incoming::Error(e) => log::warn!("coordinator: {:?} {}", e.code, e.message),
        }
    }

    fn deliver(&mut self, d: ChannelData) {
        match self.endpoints.get_mut(&d.channel_id) {
            Some(Endpoint::Debug { bridge, .. }) => bridge.on_frame(d),
            Some(Endpoint::Terminal(sh)) => {
                let _ = sh.stdin.send(d.payload);
            }
            None => {}
        }
    }

    fn workspace_of(&self, task_id: &TaskId) -> Option<PathBuf> {
        match &self.current {
            Some(c) if &c.task_id == task_id => Some(c.root.clone()),
            _ => self.retained.get(task_id).cloned(),
        }
    }

    async fn open_endpoint(&mut self, ch: ChannelInfo) {
        if self.endpoints.contains_key(&ch.channel_id) {
            return;
        }
        match ch.kind {
            ChannelKind::Debug => {
                let is_current = self.current.as_ref().is_some_and(|c| c.task_id == ch.task_id);
                if !is_current {
                    return;
                }
                let bridge = Bridge::new(self.client.clone(), ch.channel_id, Side::Task);
                self.endpoints.insert(
                    ch.channel_id,
                    Endpoint::Debug {
                        task_id: ch.task_id.clone(),
                        bridge,
                    },
                );
                let waiting = self.current.as_mut().and_then(|c| c.waiting_adapter.take());
                if let Some(stream) = waiting {
                    self.link_adapter(ch.channel_id, stream).await;
                }
            }
            ChannelKind::Terminal => {
                let Some(root) = self.workspace_of(&ch.task_id).filter(|r| r.is_dir()) else {
                    self.client.fire(|id| {
                        Message::ChannelClose(ChannelClose {
                            id,
                            channel_id: ch.channel_id,
                            reason: "workspace unavailable".into(),
                        })
                    });
                    return;
                };
                match self.spawn_shell(ch.channel_id, &root).await {
                    Ok(sh) => {
                        self.endpoints.insert(ch.channel_id, Endpoint::Terminal(sh));
                    }
                    Err(e) => {
                        log::error!("terminal for {}: {e}", ch.task_id);
                        let reason = format!("shell failed: {e}");
                        self.client.fire(|id| {
                            Message::ChannelClose(ChannelClose {
                                id,
                                channel_id: ch.channel_id,
                                reason,
                            })
                        });
                    }
                }
            }
        }
    }

    async fn link_adapter(&mut self, channel_id: u64, stream: TcpStream) {
        let events = self.bridge_events.clone();
        if let Some(Endpoint::Debug { bridge, .. }) = self.endpoints.get_mut(&channel_id) {
            match bridge.link(stream, events).await {
                Ok(o) => log::info!("debug adapter attached to channel {channel_id}, {} frames replayed", o.replayed),
                Err(e) => log::warn!("attaching debug channel {channel_id}: {e}"),
            }
        }
    }

    async fn spawn_shell(&self, channel_id: u64, root: &Path) -> anyhow::Result<Shell> {
        let mut cmd = Command::new("sh");
        cmd.arg("-i")
            .current_dir(root)
            .env("EXPD_WORKSPACE", root)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::piped())
            .process_group(0);
        let mut child = cmd.spawn()?;
        let pgid: Pgid = Arc::new(Mutex::new(child.id().map(|p| p as i32)));
        let _: serde_json::Value = self
            .client
            .call(|id| {
                Message::ChannelAttach(ChannelAttach {
                    id,
                    channel_id,
                    side: Side::Task,
                    resume_from: 0,
                })
            })
            .await?;
        let (stdin_tx, mut stdin_rx) = mpsc::unbounded_channel::<Vec<u8>>();
        let mut stdin = child.stdin.take().expect("piped");
        tokio::spawn(async move {
            while let Some(bytes) = stdin_rx.recv().await {
                if stdin.write_all(&bytes).await.is_err() {
                    break;
                }
            }
        });
        for out in [
            Box::new(child.stdout.take().expect("piped")) as Box<dyn AsyncRead + Unpin + Send>,
            Box::new(child.stderr.take().expect("piped")),
        ] {
            let client = self.client.clone();
            tokio::spawn(async move {
                let mut out = out;
                let mut buf = vec![0u8; 16 * 1024];
                loop {
                    match out.read(&mut buf).await {
                        Ok(0) | Err(_) => break,
                        Ok(n) => {
                            let _ = client.send(Message::TaskToClient(ChannelData {
                                channel_id,
                                seq: 0,
                                payload: buf[..n].to_vec(),
                            }));
                        }
                    }
                }
            });
        }
        let tx = self.internal.clone();
        tokio::spawn(async move {
            let _ = child.wait().await;
            let _ = tx.send(Internal::ShellExited { channel_id });
        });
        Ok(Shell { stdin: stdin_tx, pgid })
    }

    fn drop_endpoint(&mut self, channel_id: u64) {
        match self.endpoints.remove(&channel_id) {
            Some(Endpoint::Debug { mut bridge, .. }) => bridge.shutdown(),
            Some(Endpoint::Terminal(sh)) => signal_group(&sh.pgid, libc::SIGKILL),
            None => {}
        }
    }

    async fn on_internal(&mut self, ev: Internal) {
        match ev {
            Internal::TaskDone { task_id, root } => {
                if let Some(c) = self.current.take() {
                    c.listener.abort();
                }
                let debug: Vec<u64> = self
                    .endpoints
                    .iter()
                    .filter(|(_, e)| matches!(e, Endpoint::Debug { task_id: t, .. } if *t == task_id))
                    .map(|(id, _)| *id)
                    .collect();
                for id in debug {
                    self.drop_endpoint(id);
                }
                if let Some(root) = root {
                    self.retained.insert(task_id, root);
                }
                self.try_claim().await;
            }
            Internal::AdapterConnected { task_id, stream } => {
                let channel = self.endpoints.iter().find_map(|(id, e)| match e {
                    Endpoint::Debug { task_id: t, .. } if *t == task_id => Some(*id),
                    _ => None,
                });
                match channel {
                    Some(id) => self.link_adapter(id, stream).await,
                    None => {
                        // no DEBUG channel yet; hold the adapter until one opens
                        if let Some(c) = self.current.as_mut().filter(|c| c.task_id == task_id) {
                            c.waiting_adapter = Some(stream);
                        }
                    }
                }
            }
            Internal::Bridge(ev) => {
                let channel_id = match &ev {
                    BridgeEvent::Written { channel_id, .. } | BridgeEvent::LocalClosed { channel_id, .. } => *channel_id,
                };
                if let Some(Endpoint::Debug { bridge, .. }) = self.endpoints.get_mut(&channel_id) {
                    bridge.on_event(ev);
                }
            }
            Internal::ShellExited { channel_id } => {
                if self.endpoints.remove(&channel_id).is_some() {
                    self.client.fire(|id| {
                        Message::ChannelClose(ChannelClose {
                            id,
                            channel_id,
                            reason: "shell exited".into(),
                        })
                    });
                }
            }
            Internal::Fatal(_) => {}
        }
    }
}
