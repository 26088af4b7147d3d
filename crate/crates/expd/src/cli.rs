//! Command-line front end.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use clap::{Args, Parser, Subcommand};
use expd_core::model::{
    validate_run_config, EnvVar, HardwareSpec, MountSpec, RunConfig, TaskId, TaskRecord, TaskState, Timestamp,
    ValidatedRunConfig,
};
use expd_core::object_store::ObjectStore;
use expd_core::relay::{AttachOutcome, ChannelKind, RelayConfig, Side};
use expd_core::scheduler::SchedulerConfig;
use expd_core::snapshot::{SnapshotError, SnapshotStore, UploadReport};
use expd_core::wire::{
    ChannelAttach, ChannelClose, ChannelData, ChannelOpen, ExecutorView, Executors, Gc, LogCursor, LogStream,
    LogSubscribe, Message, Notify, Replicate, Status, StatusReply, Submit, TaskRef,
};
use expd_core::{canonical, Digest, SnapshotId};
use serde::Deserialize;
use tokio::net::TcpListener;
use tokio::sync::mpsc;

use crate::agent::{self, AgentConfig};
use crate::bridge::{Bridge, BridgeEvent};
use crate::conn::{Client, ClientError, Incoming};
use crate::daemon::{self, DaemonConfig};

pub const DEFAULT_COORDINATOR: &str = "127.0.0.1:7077";
const LAST_SNAPSHOT: &str = ".jt/last_snapshot";

#[derive(Parser, Debug)]
#[command(name = "expd", version, about = "Launch experiments on remote executors")]
pub struct Cli {
    /// Coordinator address.
    #[arg(long, global = true, env = "EXPD_COORDINATOR", default_value = DEFAULT_COORDINATOR)]
    pub coordinator: String,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Coordinator daemon.
    Daemon {
        #[command(subcommand)]
        cmd: DaemonCmd,
    },
    /// Executor agent.
    Executor {
        #[command(subcommand)]
        cmd: ExecutorCmd,
    },
    /// Snapshot a workspace and submit a task.
    Launch(LaunchArgs),
    /// Show tasks.
    Status {
        task: Option<String>,
        #[arg(long)]
        json: bool,
        /// Leave out timestamps (stable output).
        #[arg(long)]
        no_times: bool,
    },
    /// List unfinished tasks, or executors.
    Ps {
        #[arg(long)]
        executors: bool,
    },
    /// Print a task's output.
    Logs {
        task: String,
        #[arg(short, long)]
        follow: bool,
        /// First chunk to print: K for both streams, or OUT:ERR.
        #[arg(long, value_name = "SEQ")]
        from: Option<String>,
    },
    /// Interactive shell inside a task's workspace.
    Terminal {
        task: String,
        /// Attach to an already open channel.
        #[arg(long)]
        channel: Option<u64>,
    },
    /// Forward a local port to the task's debug adapter.
    Debug {
        task: String,
        #[arg(long, default_value = "127.0.0.1:0")]
        listen: String,
        #[arg(long)]
        channel: Option<u64>,
    },
    /// Restore a task's workspace and optionally run it again.
    Reproduce {
        task: String,
        #[arg(long)]
        dest: Option<PathBuf>,
        /// Submit the same run configuration again.
        #[arg(long)]
        launch: bool,
        #[arg(long)]
        follow: bool,
    },
    Cancel {
        task: String,
    },
    /// Delete snapshots no longer referenced by the newest tasks.
    Gc {
        #[arg(long, default_value_t = 5)]
        keep_last: u32,
    },
    /// Objects in the shared store.
    Data {
        #[command(subcommand)]
        cmd: DataCmd,
    },
}

#[derive(Subcommand, Debug)]
pub enum DaemonCmd {
    Run {
        #[arg(long, env = "EXPD_STATE_DIR", default_value = ".jt/state")]
        state_dir: PathBuf,
        /// Listen on 127.0.0.1:PORT.
        #[arg(long, conflicts_with = "listen")]
        port: Option<u16>,
        /// Full listen address; defaults to the coordinator address.
        #[arg(long)]
        listen: Option<String>,
        #[arg(long, default_value_t = 15_000)]
        lease_ms: u64,
        #[arg(long, default_value_t = 5_000)]
        heartbeat_ms: u64,
        #[arg(long, default_value_t = 2)]
        max_retries: u32,
        #[arg(long, default_value_t = 1_000)]
        tick_ms: u64,
    },
}

#[derive(Subcommand, Debug)]
pub enum ExecutorCmd {
    Run {
        #[arg(long)]
        id: Option<String>,
        #[arg(long, default_value = "local")]
        zone: String,
        #[arg(long)]
        accel_type: Option<String>,
        #[arg(long, default_value_t = 0)]
        accel_count: u32,
        #[arg(long, default_value_t = 4)]
        cpu: u32,
        #[arg(long, default_value_t = 8192)]
        memory_mb: u64,
        /// Simulated provisioning time in seconds before registering.
        #[arg(long, default_value_t = 0.0)]
        provision_delay: f64,
        #[arg(long, default_value = "expd-scratch")]
        scratch: PathBuf,
        /// Overrides the store path announced by the coordinator.
        #[arg(long)]
        store_root: Option<PathBuf>,
    },
}

#[derive(Subcommand, Debug)]
pub enum DataCmd {
    Put {
        file: PathBuf,
        #[arg(long)]
        bucket: String,
        #[arg(long)]
        key: String,
        #[arg(long, env = "EXPD_CLIENT_ZONE", default_value = "local")]
        zone: String,
    },
    Ls {
        #[arg(long)]
        bucket: String,
        #[arg(long, default_value = "")]
        prefix: String,
        #[arg(long, env = "EXPD_CLIENT_ZONE", default_value = "local")]
        zone: String,
    },
}

#[derive(Args, Debug)]
pub struct LaunchArgs {
    #[arg(long, alias = "workspace", default_value = ".")]
    pub workdir: PathBuf,
    /// Zone the snapshot is uploaded to.
    #[arg(long, env = "EXPD_CLIENT_ZONE", default_value = "local")]
    pub zone: String,
    /// Copy the snapshot to this zone before submitting.
    #[arg(long)]
    pub target_zone: Option<String>,
    /// Workspace label for garbage collection; defaults to the workspace path.
    #[arg(long)]
    pub label: Option<String>,
    /// Shell command run in the workspace before the main command.
    #[arg(long)]
    pub setup: Option<String>,
    /// NAME=VALUE, repeatable.
    #[arg(long = "env", value_name = "NAME=VALUE")]
    pub env: Vec<String>,
    /// BUCKET:PREFIX:TARGET, repeatable.
    #[arg(long = "mount", value_name = "BUCKET:PREFIX:TARGET")]
    pub mounts: Vec<String>,
    /// Accelerators as TYPE:COUNT, e.g. A100:1.
    #[arg(long, value_name = "TYPE:COUNT")]
    pub accel: Option<String>,
    #[arg(long, default_value_t = 1)]
    pub cpu: u32,
    #[arg(long, default_value_t = 512)]
    pub memory_mb: u64,
    /// Upload without a parent snapshot.
    #[arg(long)]
    pub fresh: bool,
    /// Stream output and exit with the task's outcome.
    #[arg(short, long)]
    pub follow: bool,
    #[arg(trailing_var_arg = true, allow_hyphen_values = true)]
    pub command: Vec<String>,
}

/// Error carrying the process exit code.
#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    fn new(code: i32, message: impl Into<String>) -> Self {
        CliError {
            code,
            message: message.into(),
        }
    }

    fn usage(message: impl Into<String>) -> Self {
        Self::new(2, message)
    }
}

impl From<ClientError> for CliError {
    fn from(e: ClientError) -> Self {
        CliError::new(e.exit_code(), e.to_string())
    }
}

impl From<anyhow::Error> for CliError {
    fn from(e: anyhow::Error) -> Self {
        CliError::new(1, format!("{e:#}"))
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::new(1, e.to_string())
    }
}

type CliResult = Result<i32, CliError>;

/// Runs the parsed command; returns the process exit code.
pub async fn run(cli: Cli) -> i32 {
    match dispatch(cli).await {
        Ok(code) => code,
        Err(e) => {
            eprintln!("expd: {}", e.message);
            e.code
        }
    }
}

async fn dispatch(cli: Cli) -> CliResult {
    let addr = cli.coordinator;
    match cli.command {
        Command::Daemon {
            cmd:
                DaemonCmd::Run {
                    state_dir,
                    port,
                    listen,
                    lease_ms,
                    heartbeat_ms,
                    max_retries,
                    tick_ms,
                },
        } => {
            let cfg = DaemonConfig {
                state_dir,
                listen: match port {
                    Some(p) => format!("127.0.0.1:{p}"),
                    None => listen.unwrap_or(addr),
                },
                scheduler: SchedulerConfig {
                    lease_ms,
                    heartbeat_ms,
                    max_retries,
                },
                relay: RelayConfig::default(),
                tick: Duration::from_millis(tick_ms.max(10)),
            };
            cfg.scheduler.validate().map_err(CliError::usage)?;
            daemon::run(cfg, shutdown_signal()).await?;
            Ok(0)
        }
        Command::Executor {
            cmd:
                ExecutorCmd::Run {
                    id,
                    zone,
                    accel_type,
                    accel_count,
                    cpu,
                    memory_mb,
                    provision_delay,
                    scratch,
                    store_root,
                },
        } => {
            if !(provision_delay.is_finite() && provision_delay >= 0.0) {
                return Err(CliError::usage("--provision-delay must be a non-negative number of seconds"));
            }
            std::fs::create_dir_all(&scratch)?;
            let cfg = AgentConfig {
                coordinator: addr,
                id,
                zone,
                accel_type,
                accel_count,
                cpu,
                memory_mb,
                provision_delay: Duration::from_secs_f64(provision_delay),
                scratch: std::fs::canonicalize(&scratch)?,
                store_root,
            };
            tokio::select! {
                r = agent::run(cfg) => r.map_err(|e| CliError::new(4, format!("{e:#}")))?,
                _ = shutdown_signal() => {}
            }
            Ok(0)
        }
        Command::Launch(args) => launch(&addr, args).await,
        Command::Status { task, json, no_times } => status(&addr, task, json, no_times).await,
        Command::Ps { executors } => ps(&addr, executors).await,
        Command::Logs { task, follow, from } => {
            let from = match from {
                Some(f) => parse_cursor(&f)?,
                None => LogCursor::default(),
            };
            let (client, mut rx) = Client::connect(&addr, "client").await?;
            stream_logs(&client, &mut rx, TaskId::new(task), from, follow).await?;
            Ok(0)
        }
        Command::Terminal { task, channel } => terminal(&addr, TaskId::new(task), channel).await,
        Command::Debug { task, listen, channel } => debug(&addr, TaskId::new(task), &listen, channel).await,
        Command::Reproduce {
            task,
            dest,
            launch,
            follow,
        } => reproduce(&addr, TaskId::new(task), dest, launch, follow).await,
        Command::Cancel { task } => {
            let (client, _rx) = Client::connect(&addr, "client").await?;
            let task_id = TaskId::new(task);
            let t = task_id.clone();
            client.call(|id| Message::Cancel(TaskRef { id, task_id: t })).await?;
            println!("canceled {task_id}");
            Ok(0)
        }
        Command::Gc { keep_last } => {
            let (client, _rx) = Client::connect(&addr, "client").await?;
            let r = client.call(|id| Message::Gc(Gc { id, keep_last })).await?;
            let count = |k: &str| r[k].as_array().map_or(0, Vec::len);
            println!(
                "gc: {} manifests, {} blobs, {} bytes freed; {} snapshots kept; {} workspaces dropped",
                r["manifests_deleted"],
                r["blobs_deleted"],
                r["bytes_freed"],
                count("kept_snapshots"),
                count("workspaces_dropped")
            );
            Ok(0)
        }
        Command::Data { cmd } => data(&addr, cmd).await,
    }
}

async fn shutdown_signal() {
    use tokio::signal::unix::{signal, SignalKind};
    let mut term = signal(SignalKind::terminate()).expect("installing SIGTERM handler");
    tokio::select! {
        _ = tokio::signal::ctrl_c() => {}
        _ = term.recv() => {}
    }
}

fn store_for(client: &Client) -> Result<SnapshotStore, CliError> {
    let root = &client.hello.store_root;
    let objects = ObjectStore::open(root).map_err(|e| CliError::new(1, format!("opening store {root}: {e}")))?;
    Ok(SnapshotStore::new(Arc::new(objects)))
}

fn parse_env(items: &[String]) -> Result<Vec<EnvVar>, CliError> {
    items
        .iter()
        .map(|s| match s.split_once('=') {
            Some((name, value)) => Ok(EnvVar {
                name: name.to_string(),
                value: value.to_string(),
            }),
            None => Err(CliError::usage(format!("--env {s:?}: expected NAME=VALUE"))),
        })
        .collect()
}

fn parse_cursor(s: &str) -> Result<LogCursor, CliError> {
    let bad = || CliError::usage(format!("--from {s:?}: expected SEQ or OUT:ERR"));
    let num = |p: &str| p.parse::<u64>().map_err(|_| bad());
    match s.split_once(':') {
        Some((o, e)) => Ok(LogCursor {
            stdout: num(o)?,
            stderr: num(e)?,
        }),
        None => {
            let k = num(s)?;
            Ok(LogCursor { stdout: k, stderr: k })
        }
    }
}

fn parse_accel(s: &str) -> Result<(Option<String>, u32), CliError> {
    let bad = || CliError::usage(format!("--accel {s:?}: expected TYPE:COUNT"));
    let (t, n) = s.rsplit_once(':').ok_or_else(bad)?;
    let n: u32 = n.parse().map_err(|_| bad())?;
    if t.is_empty() {
        return Err(bad());
    }
    Ok((Some(t.to_string()), n))
}

fn parse_mount(s: &str) -> Result<MountSpec, CliError> {
    let (bucket, rest) = s
        .split_once(':')
        .ok_or_else(|| CliError::usage(format!("--mount {s:?}: expected BUCKET:PREFIX:TARGET")))?;
    let (prefix, target) = rest
        .rsplit_once(':')
        .ok_or_else(|| CliError::usage(format!("--mount {s:?}: expected BUCKET:PREFIX:TARGET")))?;
    Ok(MountSpec::new(bucket, prefix, target))
}

/// Builds and validates the run configuration before anything is uploaded.
fn build_run_config(args: &LaunchArgs, snapshot: SnapshotId) -> Result<ValidatedRunConfig, CliError> {
    let (accel_type, accel_count) = match &args.accel {
        Some(a) => parse_accel(a)?,
        None => (None, 0),
    };
    let cfg = RunConfig {
        command: args.command.clone(),
        workdir_snapshot: snapshot,
        env: parse_env(&args.env)?,
        setup_command: args
            .setup
            .as_ref()
            .map(|s| vec!["sh".to_string(), "-c".to_string(), s.clone()]),
        mounts: args.mounts.iter().map(|m| parse_mount(m)).collect::<Result<_, _>>()?,
        hardware: HardwareSpec {
            accel_type,
            accel_count,
            cpu_cores: args.cpu,
            memory_mb: args.memory_mb,
        },
    };
    validate_run_config(cfg).map_err(|e| CliError::usage(e.to_string()))
}

fn read_last_snapshot(workspace: &Path) -> Option<SnapshotId> {
    std::fs::read_to_string(workspace.join(LAST_SNAPSHOT))
        .ok()
        .and_then(|s| s.trim().parse().ok())
}

fn write_last_snapshot(workspace: &Path, id: &SnapshotId) -> std::io::Result<()> {
    let path = workspace.join(LAST_SNAPSHOT);
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, format!("{id}\n"))
}

fn upload(
    store: SnapshotStore,
    workspace: PathBuf,
    parent: Option<SnapshotId>,
    zone: String,
) -> Result<(SnapshotId, UploadReport), SnapshotError> {
    match store.upload_snapshot(&workspace, parent, &zone, Timestamp::now()) {
        // the parent was collected; a full upload still dedups against the zone
        Err(SnapshotError::ParentNotFound(_)) => store.upload_snapshot(&workspace, None, &zone, Timestamp::now()),
        r => r,
    }
}

async fn launch(addr: &str, args: LaunchArgs) -> CliResult {
    build_run_config(&args, SnapshotId(Digest::of(b"")))?;
    let workspace = std::fs::canonicalize(&args.workdir)
        .map_err(|e| CliError::usage(format!("workspace {}: {e}", args.workdir.display())))?;
    let (client, mut rx) = Client::connect(addr, "client").await?;
    let store = store_for(&client)?;
    let parent = if args.fresh { None } else { read_last_snapshot(&workspace) };
    let (ws, zone) = (workspace.clone(), args.zone.clone());
    let (snapshot_id, report) = tokio::task::spawn_blocking(move || upload(store, ws, parent, zone))
        .await
        .map_err(|e| CliError::new(1, e.to_string()))?
        .map_err(|e| CliError::new(1, format!("snapshot upload failed: {e}")))?;
    write_last_snapshot(&workspace, &snapshot_id)?;
    println!("snapshot {snapshot_id}");
    println!(
        "uploaded {} files: {} new blobs, {} reused, {} bytes",
        report.files, report.blobs_transferred, report.blobs_skipped, report.bytes_transferred
    );
    if let Some(to_zone) = args.target_zone.clone().filter(|z| *z != args.zone) {
        let tz = to_zone.clone();
        let r = client
            .call(|id| Message::Replicate(Replicate { id, snapshot_id, to_zone: tz }))
            .await?;
        println!("replicated {} bytes to {to_zone}", r["bytes_transferred"]);
    }
    let run_config = build_run_config(&args, snapshot_id)?;
    let label = args.label.clone().unwrap_or_else(|| workspace.display().to_string());
    let task_id = submit(&client, run_config, Some(label)).await?;
    println!("task {task_id}");
    let _ = std::io::stdout().flush();
    if args.follow {
        return follow_to_outcome(&client, &mut rx, task_id).await;
    }
    Ok(0)
}

#[derive(Deserialize)]
struct SubmitReply {
    task_id: TaskId,
}

async fn submit(client: &Client, run_config: ValidatedRunConfig, workspace: Option<String>) -> Result<TaskId, CliError> {
    let r: SubmitReply = client
        .call_as(|id| {
            Message::Submit(Submit {
                id,
                run_config,
                workspace,
            })
        })
        .await?;
    Ok(r.task_id)
}

async fn fetch_tasks(client: &Client, task_id: Option<TaskId>) -> Result<Vec<TaskRecord>, CliError> {
    let r: StatusReply = client.call_as(|id| Message::Status(Status { id, task_id })).await?;
    Ok(r.tasks)
}

async fn follow_to_outcome(client: &Client, rx: &mut mpsc::UnboundedReceiver<Incoming>, task_id: TaskId) -> CliResult {
    stream_logs(client, rx, task_id.clone(), LogCursor::default(), true).await?;
    let task = fetch_tasks(client, Some(task_id.clone()))
        .await?
        .pop()
        .ok_or_else(|| CliError::new(3, format!("unknown task {task_id}")))?;
    let exit = task.exit_code.map(|c| c.to_string()).unwrap_or_else(|| "-".into());
    eprintln!("task {task_id} {} exit {exit}", task.state);
    Ok(if task.state == TaskState::Succeeded { 0 } else { 1 })
}

/// Prints logs until the coordinator signals the end of the stream.
async fn stream_logs(
    client: &Client,
    rx: &mut mpsc::UnboundedReceiver<Incoming>,
    task_id: TaskId,
    from: LogCursor,
    follow: bool,
) -> Result<(), CliError> {
    let t = task_id.clone();
    client
        .call(|id| {
            Message::LogSubscribe(LogSubscribe {
                id,
                task_id: t,
                from,
                follow,
            })
        })
        .await?;
    let mut out = std::io::stdout();
    let mut err = std::io::stderr();
    while let Some(msg) = rx.recv().await {
        match msg {
            Incoming::Notify(Notify::Log { chunk }) if chunk.task_id == task_id => {
                match chunk.stream {
                    LogStream::Stdout => {
                        out.write_all(&chunk.data)?;
                        out.flush()?;
                    }
                    LogStream::Stderr => {
                        err.write_all(&chunk.data)?;
                        err.flush()?;
                    }
                }
            }
            Incoming::Notify(Notify::LogEnd { task_id: t }) if t == task_id => return Ok(()),
            _ => {}
        }
    }
    Err(CliError::new(4, "coordinator connection lost"))
}

fn format_time(t: Option<Timestamp>) -> String {
    t.and_then(|t| chrono::DateTime::from_timestamp_millis(t.0 as i64))
        .map(|d| d.format("%Y-%m-%d %H:%M:%S").to_string())
        .unwrap_or_else(|| "-".into())
}

/// Canonical JSON for a task list; `no_times` drops the wall-clock fields.
pub fn tasks_json(tasks: &[TaskRecord], no_times: bool) -> String {
    let mut v = serde_json::to_value(tasks).expect("task records serialize");
    if no_times {
        for t in v.as_array_mut().into_iter().flatten() {
            if let Some(o) = t.as_object_mut() {
                for k in ["submit_time", "start_time", "end_time"] {
                    o.remove(k);
                }
            }
        }
    }
    canonical::to_string(&v).expect("json values serialize")
}

fn print_task_table(tasks: &[TaskRecord], no_times: bool) {
    if no_times {
        println!("{:<12} {:<10} {:<20} {:>5}  COMMAND", "TASK", "STATE", "EXECUTOR", "EXIT");
    } else {
        println!(
            "{:<12} {:<10} {:<20} {:<19}  {:<19}  {:<19}  {:>5}  COMMAND",
            "TASK", "STATE", "EXECUTOR", "SUBMITTED", "STARTED", "ENDED", "EXIT"
        );
    }
    for t in tasks {
        let exec = t.executor_id.as_ref().map(|e| e.as_str()).unwrap_or("-");
        let (id, state) = (t.task_id.as_str(), t.state.as_str());
        let exit = t.exit_code.map(|c| c.to_string()).unwrap_or_else(|| "-".into());
        let cmd = t.run_config.command.join(" ");
        if no_times {
            println!("{id:<12} {state:<10} {exec:<20} {exit:>5}  {cmd}");
        } else {
            println!(
                "{id:<12} {state:<10} {exec:<20} {:<19}  {:<19}  {:<19}  {exit:>5}  {cmd}",
                format_time(Some(t.submit_time)),
                format_time(t.start_time),
                format_time(t.end_time)
            );
        }
    }
}

fn print_task_detail(t: &TaskRecord, no_times: bool) {
    println!("task      {}", t.task_id);
    println!("state     {}", t.state);
    println!("command   {}", t.run_config.command.join(" "));
    println!("snapshot  {}", t.run_config.workdir_snapshot);
    if let Some(e) = &t.executor_id {
        println!("executor  {e}");
    }
    if let Some(c) = t.exit_code {
        println!("exit      {c}");
    }
    if let Some(p) = t.failure_phase {
        println!("failed in {p:?}");
    }
    println!("retries   {}", t.retries_used);
    if !no_times {
        println!("submitted {}", format_time(Some(t.submit_time)));
        println!("started   {}", format_time(t.start_time));
        println!("ended     {}", format_time(t.end_time));
    }
}

async fn status(addr: &str, task: Option<String>, json: bool, no_times: bool) -> CliResult {
    let (client, _rx) = Client::connect(addr, "client").await?;
    let single = task.is_some();
    let tasks = fetch_tasks(&client, task.map(TaskId::new)).await?;
    if json {
        println!("{}", tasks_json(&tasks, no_times));
    } else if single {
        print_task_detail(&tasks[0], no_times);
    } else {
        print_task_table(&tasks, no_times);
    }
    Ok(0)
}

#[derive(Deserialize)]
struct ExecutorsReply {
    executors: Vec<ExecutorView>,
}

async fn ps(addr: &str, executors: bool) -> CliResult {
    let (client, _rx) = Client::connect(addr, "client").await?;
    if executors {
        let r: ExecutorsReply = client.call_as(|id| Message::Executors(Executors { id })).await?;
        println!("{:<20} {:<10} {:>4} {:>8} {:<12} {:<10} TASK", "EXECUTOR", "ZONE", "CPU", "MEM_MB", "ACCEL", "CONN");
        for e in r.executors {
            let accel = match &e.offer.accel_type {
                Some(t) if e.offer.accel_count > 0 => format!("{}x{t}", e.offer.accel_count),
                _ => "-".into(),
            };
            println!(
                "{:<20} {:<10} {:>4} {:>8} {:<12} {:<10} {}",
                e.executor_id.as_str(),
                e.offer.zone,
                e.offer.cpu_cores,
                e.offer.memory_mb,
                accel,
                if e.connected { "up" } else { "away" },
                e.busy_with.map(|t| t.to_string()).unwrap_or_else(|| "-".into())
            );
        }
    } else {
        let tasks: Vec<TaskRecord> = fetch_tasks(&client, None)
            .await?
            .into_iter()
            .filter(|t| !t.state.is_terminal())
            .collect();
        print_task_table(&tasks, false);
    }
    Ok(0)
}

#[derive(Deserialize)]
struct ChannelOpenReply {
    channel_id: u64,
}

async fn open_channel(client: &Client, task_id: TaskId, kind: ChannelKind) -> Result<u64, CliError> {
    let r: ChannelOpenReply = client
        .call_as(|id| Message::ChannelOpen(ChannelOpen { id, task_id, kind }))
        .await?;
    Ok(r.channel_id)
}

async fn terminal(addr: &str, task_id: TaskId, channel: Option<u64>) -> CliResult {
    let (client, mut rx) = Client::connect(addr, "client").await?;
    let channel_id = match channel {
        Some(c) => c,
        None => open_channel(&client, task_id.clone(), ChannelKind::Terminal).await?,
    };
    let outcome: AttachOutcome = client
        .call_as(|id| {
            Message::ChannelAttach(ChannelAttach {
                id,
                channel_id,
                side: Side::Client,
                resume_from: 0,
            })
        })
        .await?;
    eprintln!("terminal channel {channel_id} on {task_id}; type ~. on its own line to close");
    let mut peer_up = outcome.peer_attached;
    let (line_tx, mut line_rx) = mpsc::unbounded_channel::<String>();
    std::thread::spawn(move || {
        let stdin = std::io::stdin();
        let mut line = String::new();
        loop {
            line.clear();
            match stdin.read_line(&mut line) {
                Ok(0) | Err(_) => break,
                Ok(_) => {
                    if line_tx.send(line.clone()).is_err() {
                        break;
                    }
                }
            }
        }
    });
    let mut queued: Vec<String> = Vec::new();
    let mut stdin_open = true;
    let send = |line: String| {
        let _ = client.send(Message::ClientToTask(ChannelData {
            channel_id,
            seq: 0,
            payload: line.into_bytes(),
        }));
    };
    let mut out = std::io::stdout();
    loop {
        tokio::select! {
            line = line_rx.recv(), if stdin_open => match line {
                Some(l) if l.trim_end_matches(['\r', '\n']) == "~." => {
                    client
                        .call(|id| Message::ChannelClose(ChannelClose { id, channel_id, reason: "closed by client".into() }))
                        .await?;
                    return Ok(0);
                }
                Some(l) => {
                    if peer_up { send(l) } else { queued.push(l) }
                }
                None => stdin_open = false,
            },
            msg = rx.recv() => match msg {
                Some(Incoming::TaskToClient(d)) if d.channel_id == channel_id => {
                    out.write_all(&d.payload)?;
                    out.flush()?;
                }
                Some(Incoming::Notify(Notify::ChannelStatus { channel_id: c, peer: Side::Task, attached })) if c == channel_id => {
                    peer_up = attached;
                    if attached {
                        for l in queued.drain(..) {
                            send(l);
                        }
                    }
                }
                Some(Incoming::Notify(Notify::ChannelClosed { channel_id: c, reason })) if c == channel_id => {
                    eprintln!("channel closed: {reason}");
                    return Ok(0);
                }
                Some(Incoming::Notify(Notify::Detached { channel_id: c, reason, .. })) if c == channel_id => {
                    eprintln!("detached: {reason}");
                    return Ok(0);
                }
                Some(Incoming::Error(e)) => eprintln!("expd: {:?}: {}", e.code, e.message),
                Some(_) => {}
                None => return Err(CliError::new(4, "coordinator connection lost")),
            },
        }
    }
}

async fn debug(addr: &str, task_id: TaskId, listen: &str, channel: Option<u64>) -> CliResult {
    let (client, mut rx) = Client::connect(addr, "client").await?;
    let listener = TcpListener::bind(listen)
        .await
        .map_err(|e| CliError::new(1, format!("binding {listen}: {e}")))?;
    let channel_id = match channel {
        Some(c) => c,
        None => open_channel(&client, task_id.clone(), ChannelKind::Debug).await?,
    };
    println!("listening on {} channel {channel_id}", listener.local_addr()?);
    let _ = std::io::stdout().flush();
    let mut bridge = Bridge::new(client.clone(), channel_id, Side::Client);
    let (ev_tx, mut ev_rx) = mpsc::unbounded_channel::<BridgeEvent>();
    loop {
        tokio::select! {
            acc = listener.accept() => {
                let (stream, peer) = acc?;
                let _ = stream.set_nodelay(true);
                match bridge.link(stream, ev_tx.clone()).await {
                    Ok(o) => log::info!("{peer} attached, {} frames replayed", o.replayed),
                    Err(e) => {
                        eprintln!("expd: attaching channel {channel_id}: {e}");
                        if matches!(e.code(), Some(c) if c.exit_code() == 3) {
                            return Err(e.into());
                        }
                    }
                }
            }
            Some(ev) = ev_rx.recv() => {
                bridge.on_event(ev);
            }
            msg = rx.recv() => match msg {
                Some(Incoming::TaskToClient(d)) if d.channel_id == channel_id => bridge.on_frame(d),
                Some(Incoming::Notify(Notify::ChannelClosed { channel_id: c, reason })) if c == channel_id => {
                    bridge.shutdown();
                    eprintln!("channel closed: {reason}");
                    return Ok(0);
                }
                Some(Incoming::Notify(Notify::Detached { channel_id: c, reason, .. })) if c == channel_id => {
                    log::info!("detached: {reason}");
                    bridge.shutdown();
                }
                Some(Incoming::Error(e)) => eprintln!("expd: {:?}: {}", e.code, e.message),
                Some(_) => {}
                None => return Err(CliError::new(4, "coordinator connection lost")),
            },
        }
    }
}

#[derive(Deserialize)]
struct ReproduceReply {
    task: TaskRecord,
    zone: String,
}

async fn reproduce(addr: &str, task_id: TaskId, dest: Option<PathBuf>, launch: bool, follow: bool) -> CliResult {
    if dest.is_none() && !launch {
        return Err(CliError::usage("reproduce needs --dest DIR and/or --launch"));
    }
    let (client, mut rx) = Client::connect(addr, "client").await?;
    let t = task_id.clone();
    let r: ReproduceReply = client
        .call_as(|id| Message::Reproduce(TaskRef { id, task_id: t }))
        .await?;
    let snapshot = r.task.run_config.workdir_snapshot;
    if let Some(dest) = dest {
        let store = store_for(&client)?;
        let (d, zone) = (dest.clone(), r.zone.clone());
        tokio::task::spawn_blocking(move || store.materialize(&snapshot, &d, &zone))
            .await
            .map_err(|e| CliError::new(1, e.to_string()))?
            .map_err(|e| match e {
                SnapshotError::SnapshotNotFound(_) => CliError::new(3, e.to_string()),
                _ => CliError::new(1, e.to_string()),
            })?;
        println!("restored snapshot {snapshot} of {task_id} into {}", dest.display());
    }
    if launch {
        let new_id = submit(&client, r.task.run_config.clone(), r.task.workspace.clone()).await?;
        println!("task {new_id}");
        let _ = std::io::stdout().flush();
        if follow {
            return follow_to_outcome(&client, &mut rx, new_id).await;
        }
    }
    Ok(0)
}

async fn data(addr: &str, cmd: DataCmd) -> CliResult {
    let (client, _rx) = Client::connect(addr, "client").await?;
    let root = client.hello.store_root.clone();
    let objects = ObjectStore::open(&root).map_err(|e| CliError::new(1, format!("opening store {root}: {e}")))?;
    match cmd {
        DataCmd::Put { file, bucket, key, zone } => {
            let bytes = std::fs::read(&file).map_err(|e| CliError::usage(format!("{}: {e}", file.display())))?;
            let r = objects
                .put_object(&zone, &bucket, &key, &bytes)
                .map_err(|e| CliError::new(1, e.to_string()))?;
            println!("{}/{}/{} {} bytes sha256 {}", r.zone, r.bucket, r.key, r.size, r.digest);
        }
        DataCmd::Ls { bucket, prefix, zone } => {
            for key in objects
                .list_prefix(&zone, &bucket, &prefix)
                .map_err(|e| CliError::new(1, e.to_string()))?
            {
                println!("{key}");
            }
        }
    }
    Ok(0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use expd_core::model::{validate_run_config, HardwareSpec, RunConfig};
    use expd_core::scheduler::{Scheduler, VecSink};

    fn launch_args(argv: &[&str]) -> LaunchArgs {
        let cli = Cli::try_parse_from(["expd", "launch"].iter().chain(argv)).unwrap();
        match cli.command {
            Command::Launch(a) => a,
            other => panic!("parsed {other:?}"),
        }
    }

    #[test]
    fn mount_splits_bucket_first_and_target_last() {
        let m = parse_mount("datasets:imagenet/train:/data/in").unwrap();
        assert_eq!((m.bucket.as_str(), m.prefix.as_str(), m.target.as_str()), ("datasets", "imagenet/train", "/data/in"));
        let m = parse_mount("b:a:b/c:t").unwrap();
        assert_eq!(m.prefix, "a:b/c");
        assert_eq!(parse_mount("nocolon").unwrap_err().code, 2);
        assert_eq!(parse_mount("b:onlyone").unwrap_err().code, 2);
        assert_eq!(parse_mount("b::t").unwrap().prefix, "");
    }

    #[test]
    fn accel_env_and_cursor_parsing() {
        assert_eq!(parse_accel("A100:4").unwrap(), (Some("A100".into()), 4));
        assert_eq!(parse_accel(":4").unwrap_err().code, 2);
        assert_eq!(parse_accel("A100").unwrap_err().code, 2);
        let env = parse_env(&["A=1".into(), "B=x=y".into()]).unwrap();
        assert_eq!((env[1].name.as_str(), env[1].value.as_str()), ("B", "x=y"));
        assert!(parse_env(&["NOVALUE".into()]).is_err());
        let c = parse_cursor("7").unwrap();
        assert_eq!((c.stdout, c.stderr), (7, 7));
        let c = parse_cursor("3:9").unwrap();
        assert_eq!((c.stdout, c.stderr), (3, 9));
        assert!(parse_cursor("x").is_err());
    }

    #[test]
    fn launch_keeps_everything_after_the_separator() {
        let a = launch_args(&["--cpu", "2", "--", "python", "train.py", "--lr", "3e-4"]);
        assert_eq!(a.cpu, 2);
        assert_eq!(a.command, ["python", "train.py", "--lr", "3e-4"]);
        let a = launch_args(&["--workspace", "proj", "--", "true"]);
        assert_eq!(a.workdir, PathBuf::from("proj"));
    }

    #[test]
    fn empty_command_is_a_usage_error() {
        let a = launch_args(&["--accel", "A100:1"]);
        let err = build_run_config(&a, SnapshotId(Digest::of(b"x"))).unwrap_err();
        assert_eq!(err.code, 2);
        let a = launch_args(&["--accel", "A100:1", "--", "nvidia-smi"]);
        let cfg = build_run_config(&a, SnapshotId(Digest::of(b"x"))).unwrap();
        assert_eq!(cfg.hardware.accel_count, 1);
    }

    #[test]
    fn last_snapshot_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        assert!(read_last_snapshot(dir.path()).is_none());
        let id = SnapshotId(Digest::of(b"tree"));
        write_last_snapshot(dir.path(), &id).unwrap();
        assert_eq!(read_last_snapshot(dir.path()), Some(id));
    }

    #[test]
    fn json_without_times_is_stable() {
        let mut s = Scheduler::new(SchedulerConfig::default());
        let cfg = validate_run_config(RunConfig {
            command: vec!["true".into()],
            workdir_snapshot: SnapshotId(Digest::of(b"ws")),
            env: vec![],
            setup_command: None,
            mounts: vec![],
            hardware: HardwareSpec::cpu_only(1, 64),
        })
        .unwrap();
        let mut sink = VecSink::default();
        s.submit(cfg.clone(), None, |_| true, Timestamp(5), &mut sink).unwrap();
        let a = tasks_json(&s.tasks().cloned().collect::<Vec<_>>(), true);
        let mut later = Scheduler::new(SchedulerConfig::default());
        later.submit(cfg, None, |_| true, Timestamp(99), &mut sink).unwrap();
        let b = tasks_json(&later.tasks().cloned().collect::<Vec<_>>(), true);
        assert_eq!(a, b);
        assert!(!a.contains("submit_time"));
        assert!(tasks_json(&s.tasks().cloned().collect::<Vec<_>>(), false).contains("\"submit_time\":5"));
    }
}
