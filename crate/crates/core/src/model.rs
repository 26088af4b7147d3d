//! Run configuration, hardware vocabulary and the task lifecycle state machine.
//!
//! Lifecycle edges:
//!
//! ```text
//! QUEUED -> ASSIGNED -> PREPARING -> RUNNING -> SUCCEEDED | FAILED
//! any non-terminal -> CANCELED
//! ASSIGNED | PREPARING | RUNNING -> QUEUED        (executor lost, retry budget left)
//! ASSIGNED | PREPARING | RUNNING -> FAILED        (executor lost, budget exhausted)
//! PREPARING -> FAILED                             (setup / materialization failure)
//! ```

use std::collections::HashSet;
use std::fmt;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use crate::digest::SnapshotId;

/// Wall-clock milliseconds since the Unix epoch.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Timestamp(pub u64);

impl Timestamp {
    pub fn now() -> Self {
        let ms = SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_millis() as u64)
            .unwrap_or(0);
        Timestamp(ms)
    }

    pub fn millis_since(self, earlier: Timestamp) -> u64 {
        self.0.saturating_sub(earlier.0)
    }
}

macro_rules! string_id {
    ($name:ident) => {
        #[derive(Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
        #[serde(transparent)]
        pub struct $name(pub String);

        impl $name {
            pub fn new(s: impl Into<String>) -> Self {
                $name(s.into())
            }

            pub fn as_str(&self) -> &str {
                &self.0
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(&self.0)
            }
        }

        impl fmt::Debug for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                write!(f, "{}({:?})", stringify!($name), self.0)
            }
        }

        impl From<&str> for $name {
            fn from(s: &str) -> Self {
                $name(s.to_string())
            }
        }
    };
}

string_id!(TaskId);
string_id!(ExecutorId);

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct HardwareSpec {
    pub accel_type: Option<String>,
    pub accel_count: u32,
    pub cpu_cores: u32,
    pub memory_mb: u64,
}

impl HardwareSpec {
    pub fn cpu_only(cpu_cores: u32, memory_mb: u64) -> Self {
        HardwareSpec {
            accel_type: None,
            accel_count: 0,
            cpu_cores,
            memory_mb,
        }
    }

    pub fn validate(&self) -> Result<(), ValidationError> {
        validate_capacity(&self.accel_type, self.accel_count, self.cpu_cores, self.memory_mb)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct HardwareOffer {
    pub executor_id: ExecutorId,
    pub accel_type: Option<String>,
    pub accel_count: u32,
    pub cpu_cores: u32,
    pub memory_mb: u64,
    pub zone: String,
}

impl HardwareOffer {
    pub fn validate(&self) -> Result<(), ValidationError> {
        if self.executor_id.0.is_empty() {
            return Err(ValidationError::InvalidOffer("empty executor id".into()));
        }
        if self.zone.is_empty() {
            return Err(ValidationError::InvalidOffer("empty zone".into()));
        }
        validate_capacity(&self.accel_type, self.accel_count, self.cpu_cores, self.memory_mb)
    }
}

fn validate_capacity(
    accel_type: &Option<String>,
    accel_count: u32,
    cpu_cores: u32,
    memory_mb: u64,
) -> Result<(), ValidationError> {
    let has_type = accel_type.as_deref().is_some_and(|t| !t.is_empty());
    if accel_count > 0 && !has_type {
        return Err(ValidationError::MissingAccelType);
    }
    if cpu_cores == 0 {
        return Err(ValidationError::InvalidHardware("cpu_cores must be positive".into()));
    }
    if memory_mb == 0 {
        return Err(ValidationError::InvalidHardware("memory_mb must be positive".into()));
    }
    Ok(())
}

/// True iff the offer covers the spec componentwise and, when accelerators are
/// requested, the accelerator type matches exactly.
pub fn satisfies(offer: &HardwareOffer, spec: &HardwareSpec) -> bool {
    offer.accel_count >= spec.accel_count
        && offer.cpu_cores >= spec.cpu_cores
        && offer.memory_mb >= spec.memory_mb
        && (spec.accel_count == 0 || offer.accel_type == spec.accel_type)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MountSpec {
    pub bucket: String,
    pub prefix: String,
    pub target: String,
    pub read_only: bool,
}

impl MountSpec {
    pub fn new(bucket: impl Into<String>, prefix: impl Into<String>, target: impl Into<String>) -> Self {
        MountSpec {
            bucket: bucket.into(),
            prefix: prefix.into(),
            target: target.into(),
            read_only: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EnvVar {
    pub name: String,
    pub value: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunConfig {
    pub command: Vec<String>,
    pub workdir_snapshot: SnapshotId,
    pub env: Vec<EnvVar>,
    pub setup_command: Option<Vec<String>>,
    pub mounts: Vec<MountSpec>,
    pub hardware: HardwareSpec,
}

#[derive(Clone, Debug, PartialEq, Eq, thiserror::Error)]
pub enum ValidationError {
    #[error("command must not be empty")]
    EmptyCommand,
    #[error("duplicate environment variable {0:?}")]
    DuplicateEnvName(String),
    #[error("invalid environment variable name {0:?}")]
    InvalidEnvName(String),
    #[error("mount target conflict: {0}")]
    MountTargetConflict(String),
    #[error("invalid mount: {0}")]
    InvalidMount(String),
    #[error("accelerator count > 0 requires an accelerator type")]
    MissingAccelType,
    #[error("invalid hardware: {0}")]
    InvalidHardware(String),
    #[error("invalid offer: {0}")]
    InvalidOffer(String),
}

pub fn is_valid_env_name(name: &str) -> bool {
    let mut bytes = name.bytes();
    match bytes.next() {
        Some(b) if b.is_ascii_alphabetic() || b == b'_' => {}
        _ => return false,
    }
    bytes.all(|b| b.is_ascii_alphanumeric() || b == b'_')
}

fn mount_target_segments(target: &str) -> Result<Vec<&str>, ValidationError> {
    if target.is_empty() || target.starts_with('/') {
        return Err(ValidationError::MountTargetConflict(format!(
            "target {target:?} must be a non-empty relative path"
        )));
    }
    let segments: Vec<&str> = target.split('/').collect();
    for seg in &segments {
        match *seg {
            ".." => {
                return Err(ValidationError::MountTargetConflict(format!(
                    "target {target:?} contains '..'"
                )))
            }
            "" | "." => {
                return Err(ValidationError::MountTargetConflict(format!(
                    "target {target:?} is not normalized"
                )))
            }
            _ => {}
        }
    }
    Ok(segments)
}

/// Checks every [`RunConfig`] invariant.
pub fn validate_run_config(cfg: RunConfig) -> Result<ValidatedRunConfig, ValidationError> {
    if cfg.command.is_empty() {
        return Err(ValidationError::EmptyCommand);
    }
    let mut names = HashSet::new();
    for var in &cfg.env {
        if !is_valid_env_name(&var.name) {
            return Err(ValidationError::InvalidEnvName(var.name.clone()));
        }
        if !names.insert(var.name.as_str()) {
            return Err(ValidationError::DuplicateEnvName(var.name.clone()));
        }
    }
    if let Some(setup) = &cfg.setup_command {
        if setup.is_empty() {
            return Err(ValidationError::InvalidMount("setup command must not be empty when given".into()));
        }
    }
    let mut targets: Vec<Vec<&str>> = Vec::with_capacity(cfg.mounts.len());
    for m in &cfg.mounts {
        if m.bucket.is_empty() {
            return Err(ValidationError::InvalidMount("empty bucket name".into()));
        }
        if !m.read_only {
            return Err(ValidationError::InvalidMount(format!(
                "mount at {:?} must be read-only",
                m.target
            )));
        }
        let segs = mount_target_segments(&m.target)?;
        for other in &targets {
            let n = segs.len().min(other.len());
            if segs[..n] == other[..n] {
                return Err(ValidationError::MountTargetConflict(format!(
                    "target {:?} overlaps {:?}",
                    m.target,
                    other.join("/")
                )));
            }
        }
        targets.push(segs);
    }
    cfg.hardware.validate()?;
    Ok(ValidatedRunConfig(cfg))
}

/// A [`RunConfig`] that passed [`validate_run_config`]. Deserialization re-validates.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RunConfig", into = "RunConfig")]
pub struct ValidatedRunConfig(RunConfig);

impl ValidatedRunConfig {
    pub fn into_inner(self) -> RunConfig {
        self.0
    }
}

impl std::ops::Deref for ValidatedRunConfig {
    type Target = RunConfig;
    fn deref(&self) -> &RunConfig {
        &self.0
    }
}

impl TryFrom<RunConfig> for ValidatedRunConfig {
    type Error = ValidationError;
    fn try_from(cfg: RunConfig) -> Result<Self, Self::Error> {
        validate_run_config(cfg)
    }
}

impl From<ValidatedRunConfig> for RunConfig {
    fn from(v: ValidatedRunConfig) -> Self {
        v.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum TaskState {
    Queued,
    Assigned,
    Preparing,
    Running,
    Succeeded,
    Failed,
    Canceled,
}

impl TaskState {
    pub const ALL: [TaskState; 7] = [
        TaskState::Queued,
        TaskState::Assigned,
        TaskState::Preparing,
        TaskState::Running,
        TaskState::Succeeded,
        TaskState::Failed,
        TaskState::Canceled,
    ];

    pub fn is_terminal(self) -> bool {
        matches!(self, TaskState::Succeeded | TaskState::Failed | TaskState::Canceled)
    }

    /// Bound to an executor (the executor's slot is occupied).
    pub fn is_active(self) -> bool {
        matches!(self, TaskState::Assigned | TaskState::Preparing | TaskState::Running)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            TaskState::Queued => "QUEUED",
            TaskState::Assigned => "ASSIGNED",
            TaskState::Preparing => "PREPARING",
            TaskState::Running => "RUNNING",
            TaskState::Succeeded => "SUCCEEDED",
            TaskState::Failed => "FAILED",
            TaskState::Canceled => "CANCELED",
        }
    }
}

impl fmt::Display for TaskState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum FailurePhase {
    Prepare,
    Run,
    ExecutorLost,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type")]
pub enum LifecycleEvent {
    Assign { executor: ExecutorId },
    BeginPrepare,
    BeginRun,
    Finish { exit_code: i32 },
    Fail { phase: FailurePhase },
    Cancel,
    ExecutorLost,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskRecord {
    pub task_id: TaskId,
    pub run_config: ValidatedRunConfig,
    pub state: TaskState,
    pub executor_id: Option<ExecutorId>,
    pub submit_time: Timestamp,
    pub start_time: Option<Timestamp>,
    pub end_time: Option<Timestamp>,
    pub exit_code: Option<i32>,
    pub retries_used: u32,
    pub failure_phase: Option<FailurePhase>,
    /// Client-side label of the workspace the snapshot was taken from; used by
    /// the keep-last-N-per-workspace GC policy.
    pub workspace: Option<String>,
}

impl TaskRecord {
    pub fn new(task_id: TaskId, run_config: ValidatedRunConfig, submit_time: Timestamp) -> Self {
        TaskRecord {
            task_id,
            run_config,
            state: TaskState::Queued,
            executor_id: None,
            submit_time,
            start_time: None,
            end_time: None,
            exit_code: None,
            retries_used: 0,
            failure_phase: None,
            workspace: None,
        }
    }

    /// Checks the record-level invariants that hold in every reachable state.
    pub fn check_invariants(&self) -> Result<(), String> {
        let run_failure = self.state == TaskState::Failed && self.failure_phase == Some(FailurePhase::Run);
        let wants_exit = self.state == TaskState::Succeeded || run_failure;
        if wants_exit != self.exit_code.is_some() {
            return Err(format!("{}: exit_code presence wrong in {}", self.task_id, self.state));
        }
        if self.state == TaskState::Succeeded && self.exit_code != Some(0) {
            return Err(format!("{}: SUCCEEDED with nonzero exit", self.task_id));
        }
        if self.state.is_active() && self.executor_id.is_none() {
            return Err(format!("{}: {} without executor", self.task_id, self.state));
        }
        if self.state == TaskState::Queued && self.executor_id.is_some() {
            return Err(format!("{}: QUEUED with executor", self.task_id));
        }
        if (self.state == TaskState::Failed) != self.failure_phase.is_some() {
            return Err(format!("{}: failure_phase mismatch in {}", self.task_id, self.state));
        }
        if self.state.is_terminal() != self.end_time.is_some() {
            return Err(format!("{}: end_time mismatch in {}", self.task_id, self.state));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, thiserror::Error)]
#[error("illegal transition: {event:?} in state {from}")]
pub struct IllegalTransition {
    pub from: TaskState,
    pub event: LifecycleEvent,
}

pub const DEFAULT_MAX_RETRIES: u32 = 2;

/// Applies one lifecycle event, producing a new record.
pub fn transition(
    task: &TaskRecord,
    event: &LifecycleEvent,
    now: Timestamp,
    max_retries: u32,
) -> Result<TaskRecord, IllegalTransition> {
    use LifecycleEvent as E;
    use TaskState as S;

    let illegal = || IllegalTransition {
        from: task.state,
        event: event.clone(),
    };
    let mut next = task.clone();
    match (task.state, event) {
        (S::Queued, E::Assign { executor }) => {
            next.state = S::Assigned;
            next.executor_id = Some(executor.clone());
        }
        (S::Assigned, E::BeginPrepare) => next.state = S::Preparing,
        (S::Preparing, E::BeginRun) => {
            next.state = S::Running;
            if next.start_time.is_none() {
                next.start_time = Some(now);
            }
        }
        (S::Running, E::Finish { exit_code }) => {
            next.exit_code = Some(*exit_code);
            if *exit_code == 0 {
                next.state = S::Succeeded;
            } else {
                next.state = S::Failed;
                next.failure_phase = Some(FailurePhase::Run);
            }
            next.end_time = Some(now);
        }
        (S::Preparing, E::Fail { phase: FailurePhase::Prepare }) => {
            next.state = S::Failed;
            next.failure_phase = Some(FailurePhase::Prepare);
            next.end_time = Some(now);
        }
        (s, E::Cancel) if !s.is_terminal() => {
            next.state = S::Canceled;
            next.end_time = Some(now);
        }
        (s, E::ExecutorLost) if s.is_active() => {
            next.retries_used += 1;
            if next.retries_used <= max_retries {
                next.state = S::Queued;
                next.executor_id = None;
            } else {
                next.state = S::Failed;
                next.failure_phase = Some(FailurePhase::ExecutorLost);
                next.end_time = Some(now);
            }
        }
        _ => return Err(illegal()),
    }
    Ok(next)
}

/// Whether `transition` accepts `event` from `state`, as a plain table lookup.
/// Kept separate from [`transition`] so tests can compare the two.
pub fn edge_exists(state: TaskState, event: &LifecycleEvent) -> bool {
    use LifecycleEvent as E;
    use TaskState as S;
    match event {
        E::Assign { .. } => state == S::Queued,
        E::BeginPrepare => state == S::Assigned,
        E::BeginRun => state == S::Preparing,
        E::Finish { .. } => state == S::Running,
        E::Fail { phase } => state == S::Preparing && *phase == FailurePhase::Prepare,
        E::Cancel => !state.is_terminal(),
        E::ExecutorLost => state.is_active(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::digest::Digest;
    use proptest::prelude::*;

    fn snap() -> SnapshotId {
        SnapshotId(Digest::of(b"tree"))
    }

    fn minimal() -> RunConfig {
        RunConfig {
            command: vec!["true".into()],
            workdir_snapshot: snap(),
            env: vec![],
            setup_command: None,
            mounts: vec![],
            hardware: HardwareSpec::cpu_only(1, 256),
        }
    }

    fn record() -> TaskRecord {
        TaskRecord::new(TaskId::new("t1"), validate_run_config(minimal()).unwrap(), Timestamp(1))
    }

    fn offer(accel: Option<&str>, n: u32, cpu: u32, mem: u64) -> HardwareOffer {
        HardwareOffer {
            executor_id: "e".into(),
            accel_type: accel.map(String::from),
            accel_count: n,
            cpu_cores: cpu,
            memory_mb: mem,
            zone: "z".into(),
        }
    }

    fn spec(accel: Option<&str>, n: u32, cpu: u32, mem: u64) -> HardwareSpec {
        HardwareSpec {
            accel_type: accel.map(String::from),
            accel_count: n,
            cpu_cores: cpu,
            memory_mb: mem,
        }
    }

    #[test]
    fn minimal_config_is_valid() {
        assert!(validate_run_config(minimal()).is_ok());
    }

    #[test]
    fn empty_command_rejected() {
        let mut c = minimal();
        c.command.clear();
        assert_eq!(validate_run_config(c), Err(ValidationError::EmptyCommand));
    }

    #[test]
    fn duplicate_mount_target_rejected() {
        let mut c = minimal();
        c.mounts = vec![MountSpec::new("b", "", "data"), MountSpec::new("b2", "", "data")];
        assert!(matches!(validate_run_config(c), Err(ValidationError::MountTargetConflict(_))));
    }

    #[test]
    fn mount_target_dotdot_and_nesting_rejected() {
        for bad in ["../x", "a/../b", "/abs", "", "a//b", "./a"] {
            let mut c = minimal();
            c.mounts = vec![MountSpec::new("b", "", bad)];
            assert!(
                matches!(validate_run_config(c), Err(ValidationError::MountTargetConflict(_))),
                "{bad}"
            );
        }
        let mut c = minimal();
        c.mounts = vec![MountSpec::new("b", "", "data"), MountSpec::new("b", "", "data/sub")];
        assert!(matches!(validate_run_config(c), Err(ValidationError::MountTargetConflict(_))));
        let mut c = minimal();
        c.mounts = vec![MountSpec::new("b", "", "data"), MountSpec::new("b", "", "data2")];
        assert!(validate_run_config(c).is_ok());
    }

    #[test]
    fn env_names_checked() {
        let mut c = minimal();
        c.env = vec![
            EnvVar { name: "A".into(), value: "1".into() },
            EnvVar { name: "A".into(), value: "2".into() },
        ];
        assert_eq!(validate_run_config(c), Err(ValidationError::DuplicateEnvName("A".into())));
        let mut c = minimal();
        c.env = vec![EnvVar { name: "1A".into(), value: "1".into() }];
        assert!(matches!(validate_run_config(c), Err(ValidationError::InvalidEnvName(_))));
        assert!(is_valid_env_name("_x9"));
        assert!(!is_valid_env_name("a-b"));
    }

    #[test]
    fn accel_without_type_rejected() {
        let mut c = minimal();
        c.hardware = spec(None, 1, 1, 1);
        assert_eq!(validate_run_config(c), Err(ValidationError::MissingAccelType));
    }

    #[test]
    fn validated_config_deserialization_revalidates() {
        let mut c = minimal();
        c.command.clear();
        let json = crate::canonical::to_string(&c).unwrap();
        assert!(serde_json::from_str::<ValidatedRunConfig>(&json).is_err());
        let ok = crate::canonical::to_string(&minimal()).unwrap();
        assert!(serde_json::from_str::<ValidatedRunConfig>(&ok).is_ok());
    }

    #[test]
    fn satisfies_examples() {
        assert!(satisfies(&offer(Some("A100"), 2, 8, 64000), &spec(Some("A100"), 1, 4, 32000)));
        assert!(!satisfies(&offer(Some("V100"), 2, 8, 64000), &spec(Some("A100"), 1, 4, 32000)));
        assert!(satisfies(&offer(None, 0, 8, 64000), &spec(None, 0, 8, 64000)));
        // accelerator type is irrelevant when none are requested
        assert!(satisfies(&offer(Some("V100"), 2, 8, 64000), &spec(None, 0, 1, 1)));
    }

    #[test]
    fn cancel_from_queued() {
        let t = transition(&record(), &LifecycleEvent::Cancel, Timestamp(5), 2).unwrap();
        assert_eq!(t.state, TaskState::Canceled);
        assert_eq!(t.end_time, Some(Timestamp(5)));
    }

    fn run_to_running() -> TaskRecord {
        let mut t = record();
        for e in [
            LifecycleEvent::Assign { executor: "e1".into() },
            LifecycleEvent::BeginPrepare,
            LifecycleEvent::BeginRun,
        ] {
            t = transition(&t, &e, Timestamp(10), 2).unwrap();
        }
        t
    }

    #[test]
    fn terminal_is_absorbing() {
        let t = transition(&run_to_running(), &LifecycleEvent::Finish { exit_code: 0 }, Timestamp(20), 2).unwrap();
        assert_eq!(t.state, TaskState::Succeeded);
        assert_eq!(t.exit_code, Some(0));
        let err = transition(&t, &LifecycleEvent::Cancel, Timestamp(21), 2).unwrap_err();
        assert_eq!(err.from, TaskState::Succeeded);
    }

    #[test]
    fn executor_lost_requeues_then_fails() {
        let t = run_to_running();
        let t = transition(&t, &LifecycleEvent::ExecutorLost, Timestamp(11), 2).unwrap();
        assert_eq!(t.state, TaskState::Queued);
        assert_eq!(t.retries_used, 1);
        assert_eq!(t.executor_id, None);
        assert_eq!(t.submit_time, Timestamp(1));
        assert_eq!(t.start_time, Some(Timestamp(10)));

        let mut t = t;
        for _ in 0..2 {
            t = transition(&t, &LifecycleEvent::Assign { executor: "e2".into() }, Timestamp(12), 2).unwrap();
            t = transition(&t, &LifecycleEvent::ExecutorLost, Timestamp(13), 2).unwrap();
        }
        assert_eq!(t.state, TaskState::Failed);
        assert_eq!(t.failure_phase, Some(FailurePhase::ExecutorLost));
        assert_eq!(t.retries_used, 3);
        assert_eq!(t.exit_code, None);
        t.check_invariants().unwrap();
    }

    #[test]
    fn nonzero_finish_is_run_failure() {
        let t = transition(&run_to_running(), &LifecycleEvent::Finish { exit_code: 3 }, Timestamp(20), 2).unwrap();
        assert_eq!(t.state, TaskState::Failed);
        assert_eq!(t.failure_phase, Some(FailurePhase::Run));
        assert_eq!(t.exit_code, Some(3));
        t.check_invariants().unwrap();
    }

    fn arb_event() -> impl Strategy<Value = LifecycleEvent> {
        prop_oneof![
            (0u8..3).prop_map(|i| LifecycleEvent::Assign { executor: ExecutorId(format!("e{i}")) }),
            Just(LifecycleEvent::BeginPrepare),
            Just(LifecycleEvent::BeginRun),
            (-2i32..4).prop_map(|c| LifecycleEvent::Finish { exit_code: c }),
            prop_oneof![
                Just(FailurePhase::Prepare),
                Just(FailurePhase::Run),
                Just(FailurePhase::ExecutorLost)
            ]
            .prop_map(|phase| LifecycleEvent::Fail { phase }),
            Just(LifecycleEvent::Cancel),
            Just(LifecycleEvent::ExecutorLost),
        ]
    }

    fn allowed_successor(from: TaskState, to: TaskState, event: &LifecycleEvent) -> bool {
        use TaskState as S;
        match (from, to) {
            (S::Queued, S::Assigned) | (S::Assigned, S::Preparing) | (S::Preparing, S::Running) => true,
            (S::Running, S::Succeeded) | (S::Running, S::Failed) | (S::Preparing, S::Failed) => true,
            (s, S::Canceled) => !s.is_terminal(),
            (s, S::Queued) | (s, S::Failed) => s.is_active() && *event == LifecycleEvent::ExecutorLost,
            _ => false,
        }
    }

    proptest! {
        #[test]
        fn random_event_sequences_walk_the_graph(events in proptest::collection::vec(arb_event(), 0..40), max_retries in 0u32..4) {
            let mut t = record();
            for (i, e) in events.iter().enumerate() {
                let res = transition(&t, e, Timestamp(100 + i as u64), max_retries);
                prop_assert_eq!(res.is_ok(), edge_exists(t.state, e), "{:?} from {}", e, t.state);
                if let Ok(next) = res {
                    prop_assert!(allowed_successor(t.state, next.state, e), "{} -> {} via {:?}", t.state, next.state, e);
                    next.check_invariants().map_err(TestCaseError::fail)?;
                    prop_assert!(next.retries_used <= max_retries + 1);
                    t = next;
                }
            }
        }

        #[test]
        fn terminal_states_absorb(e in arb_event(), which in 0usize..3) {
            let running = run_to_running();
            let terminal = match which {
                0 => transition(&running, &LifecycleEvent::Finish { exit_code: 0 }, Timestamp(9), 2).unwrap(),
                1 => transition(&running, &LifecycleEvent::Finish { exit_code: 1 }, Timestamp(9), 2).unwrap(),
                _ => transition(&running, &LifecycleEvent::Cancel, Timestamp(9), 2).unwrap(),
            };
            prop_assert!(transition(&terminal, &e, Timestamp(10), 2).is_err());
        }

        #[test]
        fn satisfies_is_monotone(
            n in 0u32..4, cpu in 1u32..16, mem in 1u64..100_000,
            sn in 0u32..4, scpu in 1u32..16, smem in 1u64..100_000,
            dn in 0u32..3, dcpu in 0u32..8, dmem in 0u64..50_000,
            same_type in any::<bool>(),
        ) {
            let o = offer(Some("A100"), n, cpu, mem);
            let s = spec(if sn > 0 { Some(if same_type { "A100" } else { "V100" }) } else { None }, sn, scpu, smem);
            let bigger = offer(Some("A100"), n + dn, cpu + dcpu, mem + dmem);
            if satisfies(&o, &s) {
                prop_assert!(satisfies(&bigger, &s));
            }
        }
    }
}
