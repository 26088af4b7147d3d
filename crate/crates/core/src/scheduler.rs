//! Coordinator-side task queue, executor registry with heartbeat leases, and
//! best-fit matching.
//!
//! Every change to a task is expressed as an [`Event`], handed to an
//! [`EventSink`] first and applied only after the sink accepted it. Replaying
//! the same records through [`Scheduler::apply`] rebuilds the task table;
//! records at or below the last applied sequence number are skipped, so replay
//! is idempotent. Executors are not journaled: their connections do not
//! survive a coordinator restart.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::model::{
    satisfies, transition, ExecutorId, HardwareOffer, IllegalTransition, LifecycleEvent, TaskId, TaskRecord,
    TaskState, Timestamp, ValidatedRunConfig, ValidationError, DEFAULT_MAX_RETRIES,
};
use crate::SnapshotId;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SchedulerConfig {
    pub lease_ms: u64,
    pub heartbeat_ms: u64,
    pub max_retries: u32,
}

impl Default for SchedulerConfig {
    fn default() -> Self {
        SchedulerConfig {
            lease_ms: 15_000,
            heartbeat_ms: 5_000,
            max_retries: DEFAULT_MAX_RETRIES,
        }
    }
}

impl SchedulerConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.heartbeat_ms == 0 || self.heartbeat_ms >= self.lease_ms {
            return Err(format!(
                "heartbeat interval ({} ms) must be positive and shorter than the lease ({} ms)",
                self.heartbeat_ms, self.lease_ms
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExecutorRecord {
    pub executor_id: ExecutorId,
    pub offer: HardwareOffer,
    pub last_heartbeat: Timestamp,
    pub busy_with: Option<TaskId>,
    pub connected: bool,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Event {
    TaskSubmitted {
        task_id: TaskId,
        run_config: ValidatedRunConfig,
        workspace: Option<String>,
    },
    TaskTransition {
        task_id: TaskId,
        event: LifecycleEvent,
        /// Retry budget in force when the event was recorded, so replay does
        /// not depend on the restarted coordinator's configuration.
        max_retries: u32,
    },
}

impl Event {
    pub fn task_id(&self) -> &TaskId {
        match self {
            Event::TaskSubmitted { task_id, .. } | Event::TaskTransition { task_id, .. } => task_id,
        }
    }
}

/// One line of the event log.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct JournalRecord {
    pub seq: u64,
    pub at: Timestamp,
    pub event: Event,
}

#[derive(Debug, thiserror::Error)]
#[error("storage failure: {0}")]
pub struct StorageFailure(pub String);

pub trait EventSink {
    /// Makes the record durable. Must not return before it is.
    fn append(&mut self, record: &JournalRecord) -> Result<(), StorageFailure>;
}

/// Discards records; for simulations that do not need durability.
pub struct NullSink;

impl EventSink for NullSink {
    fn append(&mut self, _: &JournalRecord) -> Result<(), StorageFailure> {
        Ok(())
    }
}

/// Keeps records in memory.
#[derive(Default)]
pub struct VecSink(pub Vec<JournalRecord>);

impl EventSink for VecSink {
    fn append(&mut self, record: &JournalRecord) -> Result<(), StorageFailure> {
        self.0.push(record.clone());
        Ok(())
    }
}

#[derive(Debug, thiserror::Error)]
pub enum SchedulerError {
    #[error("snapshot {0} not found")]
    SnapshotNotFound(SnapshotId),
    #[error("unknown task {0}")]
    UnknownTask(TaskId),
    #[error("unknown executor {0}")]
    UnknownExecutor(ExecutorId),
    #[error("task {0} is already terminal")]
    AlreadyTerminal(TaskId),
    #[error("task {task_id} is not assigned to executor {executor_id}")]
    WrongExecutor { task_id: TaskId, executor_id: ExecutorId },
    #[error(transparent)]
    IllegalTransition(#[from] IllegalTransition),
    #[error(transparent)]
    InvalidOffer(#[from] ValidationError),
    #[error("journal record {got} out of order (expected {expected})")]
    OutOfOrder { expected: u64, got: u64 },
    #[error(transparent)]
    Storage(#[from] StorageFailure),
}

/// Work produced by a mutation that the caller must deliver to executors.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Outbox {
    /// Newly bound (executor, task) pairs; the agent should claim.
    pub assignments: Vec<(ExecutorId, TaskId)>,
    /// Tasks whose processes must be killed.
    pub kills: Vec<(ExecutorId, TaskId)>,
    /// Tasks that just reached a terminal state.
    pub finished: Vec<TaskId>,
}

pub struct Scheduler {
    cfg: SchedulerConfig,
    tasks: BTreeMap<TaskId, TaskRecord>,
    executors: BTreeMap<ExecutorId, ExecutorRecord>,
    /// Assignments bound but not yet claimed.
    pending: HashMap<ExecutorId, TaskId>,
    submitted: u64,
    last_seq: u64,
    outbox: Outbox,
}

impl Scheduler {
    pub fn new(cfg: SchedulerConfig) -> Self {
        Scheduler {
            cfg,
            tasks: BTreeMap::new(),
            executors: BTreeMap::new(),
            pending: HashMap::new(),
            submitted: 0,
            last_seq: 0,
            outbox: Outbox::default(),
        }
    }

    pub fn config(&self) -> &SchedulerConfig {
        &self.cfg
    }

    pub fn last_seq(&self) -> u64 {
        self.last_seq
    }

    pub fn task(&self, id: &TaskId) -> Option<&TaskRecord> {
        self.tasks.get(id)
    }

    pub fn tasks(&self) -> impl Iterator<Item = &TaskRecord> {
        self.tasks.values()
    }

    pub fn task_table(&self) -> &BTreeMap<TaskId, TaskRecord> {
        &self.tasks
    }

    pub fn executor(&self, id: &ExecutorId) -> Option<&ExecutorRecord> {
        self.executors.get(id)
    }

    pub fn executors(&self) -> impl Iterator<Item = &ExecutorRecord> {
        self.executors.values()
    }

    pub fn take_outbox(&mut self) -> Outbox {
        std::mem::take(&mut self.outbox)
    }

    /// Applies a journal record. Records already applied are ignored.
    pub fn apply(&mut self, record: &JournalRecord) -> Result<(), SchedulerError> {
        if record.seq <= self.last_seq {
            return Ok(());
        }
        if record.seq != self.last_seq + 1 {
            return Err(SchedulerError::OutOfOrder {
                expected: self.last_seq + 1,
                got: record.seq,
            });
        }
        match &record.event {
            Event::TaskSubmitted {
                task_id,
                run_config,
                workspace,
            } => {
                let mut t = TaskRecord::new(task_id.clone(), run_config.clone(), record.at);
                t.workspace = workspace.clone();
                self.tasks.insert(task_id.clone(), t);
                self.submitted += 1;
            }
            Event::TaskTransition {
                task_id,
                event,
                max_retries,
            } => {
                let cur = self
                    .tasks
                    .get(task_id)
                    .ok_or_else(|| SchedulerError::UnknownTask(task_id.clone()))?;
                let next = transition(cur, event, record.at, *max_retries)?;
                self.sync_executor(cur.executor_id.clone(), &next);
                if next.state.is_terminal() {
                    self.outbox.finished.push(task_id.clone());
                }
                self.tasks.insert(task_id.clone(), next);
            }
        }
        self.last_seq = record.seq;
        Ok(())
    }

    fn sync_executor(&mut self, before: Option<ExecutorId>, next: &TaskRecord) {
        if let Some(prev) = before {
            if next.executor_id.as_ref() != Some(&prev) || !next.state.is_active() {
                if let Some(e) = self.executors.get_mut(&prev) {
                    if e.busy_with.as_ref() == Some(&next.task_id) {
                        e.busy_with = None;
                    }
                }
                if self.pending.get(&prev) == Some(&next.task_id) {
                    self.pending.remove(&prev);
                }
            }
        }
        if next.state.is_active() {
            if let Some(e) = next.executor_id.as_ref().and_then(|id| self.executors.get_mut(id)) {
                e.busy_with = Some(next.task_id.clone());
            }
        }
    }

    fn commit(&mut self, sink: &mut dyn EventSink, now: Timestamp, event: Event) -> Result<(), SchedulerError> {
        let record = JournalRecord {
            seq: self.last_seq + 1,
            at: now,
            event,
        };
        sink.append(&record)?;
        self.apply(&record)
    }

    fn commit_transition(
        &mut self,
        sink: &mut dyn EventSink,
        now: Timestamp,
        task_id: &TaskId,
        event: LifecycleEvent,
    ) -> Result<(), SchedulerError> {
        let cur = self
            .tasks
            .get(task_id)
            .ok_or_else(|| SchedulerError::UnknownTask(task_id.clone()))?;
        // Validate before journaling so illegal events never reach the log.
        transition(cur, &event, now, self.cfg.max_retries)?;
        let max_retries = self.cfg.max_retries;
        self.commit(
            sink,
            now,
            Event::TaskTransition {
                task_id: task_id.clone(),
                event,
                max_retries,
            },
        )
    }

    pub fn submit(
        &mut self,
        run_config: ValidatedRunConfig,
        workspace: Option<String>,
        snapshot_exists: impl Fn(&SnapshotId) -> bool,
        now: Timestamp,
        sink: &mut dyn EventSink,
    ) -> Result<TaskId, SchedulerError> {
        if !snapshot_exists(&run_config.workdir_snapshot) {
            return Err(SchedulerError::SnapshotNotFound(run_config.workdir_snapshot));
        }
        let task_id = TaskId::new(format!("t-{:08}", self.submitted + 1));
        self.commit(
            sink,
            now,
            Event::TaskSubmitted {
                task_id: task_id.clone(),
                run_config,
                workspace,
            },
        )?;
        self.match_tasks(now, sink)?;
        Ok(task_id)
    }

    /// Registers or re-registers an executor. A re-registering executor that
    /// still held a task lost it (the agent restarted).
    pub fn register(
        &mut self,
        offer: HardwareOffer,
        now: Timestamp,
        sink: &mut dyn EventSink,
    ) -> Result<ExecutorId, SchedulerError> {
        offer.validate()?;
        let id = offer.executor_id.clone();
        self.pending.remove(&id);
        let held = self.executors.get(&id).and_then(|e| e.busy_with.clone());
        self.executors.insert(
            id.clone(),
            ExecutorRecord {
                executor_id: id.clone(),
                offer,
                last_heartbeat: now,
                busy_with: None,
                connected: true,
            },
        );
        if let Some(task_id) = held {
            let active_here = self
                .tasks
                .get(&task_id)
                .is_some_and(|t| t.state.is_active() && t.executor_id.as_ref() == Some(&id));
            if active_here {
                self.commit_transition(sink, now, &task_id, LifecycleEvent::ExecutorLost)?;
            }
        }
        self.match_tasks(now, sink)?;
        Ok(id)
    }

    /// Refreshes the lease. A lapsed executor is treated as unknown and must
    /// register again.
    pub fn heartbeat(&mut self, id: &ExecutorId, now: Timestamp) -> Result<(), SchedulerError> {
        match self.executors.get_mut(id) {
            Some(e) if e.connected => {
                e.last_heartbeat = now;
                Ok(())
            }
            _ => Err(SchedulerError::UnknownExecutor(id.clone())),
        }
    }

    /// Marks executors whose lease lapsed as disconnected and fails over their
    /// tasks. Returns the executors lost.
    pub fn check_leases(&mut self, now: Timestamp, sink: &mut dyn EventSink) -> Result<Vec<ExecutorId>, SchedulerError> {
        let lapsed: Vec<ExecutorId> = self
            .executors
            .values()
            .filter(|e| e.connected && now.millis_since(e.last_heartbeat) > self.cfg.lease_ms)
            .map(|e| e.executor_id.clone())
            .collect();
        for id in &lapsed {
            self.disconnect(id, now, sink)?;
        }
        if !lapsed.is_empty() {
            self.match_tasks(now, sink)?;
        }
        Ok(lapsed)
    }

    /// Declares an executor gone immediately.
    pub fn disconnect(&mut self, id: &ExecutorId, now: Timestamp, sink: &mut dyn EventSink) -> Result<(), SchedulerError> {
        let held = match self.executors.get_mut(id) {
            Some(e) => {
                e.connected = false;
                e.busy_with.clone()
            }
            None => return Err(SchedulerError::UnknownExecutor(id.clone())),
        };
        self.pending.remove(id);
        if let Some(task_id) = held {
            self.commit_transition(sink, now, &task_id, LifecycleEvent::ExecutorLost)?;
        }
        Ok(())
    }

    /// One best-fit pass over the queue in FIFO order.
    pub fn match_tasks(&mut self, now: Timestamp, sink: &mut dyn EventSink) -> Result<Vec<(TaskId, ExecutorId)>, SchedulerError> {
        let mut queued: Vec<&TaskRecord> = self.tasks.values().filter(|t| t.state == TaskState::Queued).collect();
        queued.sort_by(|a, b| (a.submit_time, &a.task_id).cmp(&(b.submit_time, &b.task_id)));
        let queued: Vec<TaskId> = queued.into_iter().map(|t| t.task_id.clone()).collect();

        let mut made = Vec::new();
        for task_id in queued {
            let spec = &self.tasks[&task_id].run_config.hardware;
            let best = self
                .executors
                .values()
                .filter(|e| e.connected && e.busy_with.is_none() && satisfies(&e.offer, spec))
                .min_by(|a, b| {
                    let key = |e: &ExecutorRecord| {
                        (
                            e.offer.accel_count - spec.accel_count,
                            e.offer.memory_mb - spec.memory_mb,
                            e.executor_id.clone(),
                        )
                    };
                    key(a).cmp(&key(b))
                })
                .map(|e| e.executor_id.clone());
            let Some(exec) = best else { continue };
            self.commit_transition(sink, now, &task_id, LifecycleEvent::Assign { executor: exec.clone() })?;
            self.pending.insert(exec.clone(), task_id.clone());
            self.outbox.assignments.push((exec.clone(), task_id.clone()));
            made.push((task_id, exec));
        }
        Ok(made)
    }

    /// Hands the executor its bound assignment, at most once, moving the task
    /// to PREPARING.
    pub fn claim(&mut self, id: &ExecutorId, now: Timestamp, sink: &mut dyn EventSink) -> Result<Option<TaskRecord>, SchedulerError> {
        if !self.executors.get(id).is_some_and(|e| e.connected) {
            return Err(SchedulerError::UnknownExecutor(id.clone()));
        }
        let Some(task_id) = self.pending.remove(id) else {
            return Ok(None);
        };
        self.commit_transition(sink, now, &task_id, LifecycleEvent::BeginPrepare)?;
        Ok(self.tasks.get(&task_id).cloned())
    }

    pub fn cancel(&mut self, task_id: &TaskId, now: Timestamp, sink: &mut dyn EventSink) -> Result<(), SchedulerError> {
        let t = self
            .tasks
            .get(task_id)
            .ok_or_else(|| SchedulerError::UnknownTask(task_id.clone()))?;
        if t.state.is_terminal() {
            return Err(SchedulerError::AlreadyTerminal(task_id.clone()));
        }
        let kill = if t.state.is_active() { t.executor_id.clone() } else { None };
        self.commit_transition(sink, now, task_id, LifecycleEvent::Cancel)?;
        if let Some(exec) = kill {
            self.outbox.kills.push((exec, task_id.clone()));
        }
        self.match_tasks(now, sink)?;
        Ok(())
    }

    /// Applies a progress or result report from the executor that owns the task.
    pub fn report(
        &mut self,
        task_id: &TaskId,
        executor_id: &ExecutorId,
        event: LifecycleEvent,
        now: Timestamp,
        sink: &mut dyn EventSink,
    ) -> Result<(), SchedulerError> {
        let t = self
            .tasks
            .get(task_id)
            .ok_or_else(|| SchedulerError::UnknownTask(task_id.clone()))?;
        if t.executor_id.as_ref() != Some(executor_id) {
            return Err(SchedulerError::WrongExecutor {
                task_id: task_id.clone(),
                executor_id: executor_id.clone(),
            });
        }
        self.commit_transition(sink, now, task_id, event)?;
        if self.tasks[task_id].state.is_terminal() {
            self.match_tasks(now, sink)?;
        }
        Ok(())
    }

    pub fn record_result(
        &mut self,
        task_id: &TaskId,
        executor_id: &ExecutorId,
        exit_code: i32,
        now: Timestamp,
        sink: &mut dyn EventSink,
    ) -> Result<(), SchedulerError> {
        self.report(task_id, executor_id, LifecycleEvent::Finish { exit_code }, now, sink)
    }

    /// After replay: tasks that were bound to an executor lost it, since no
    /// executor connection survives a restart.
    pub fn fail_over_orphans(&mut self, now: Timestamp, sink: &mut dyn EventSink) -> Result<Vec<TaskId>, SchedulerError> {
        let orphans: Vec<TaskId> = self
            .tasks
            .values()
            .filter(|t| t.state.is_active())
            .map(|t| t.task_id.clone())
            .collect();
        for id in &orphans {
            self.commit_transition(sink, now, id, LifecycleEvent::ExecutorLost)?;
        }
        Ok(orphans)
    }

    /// Cross-checks registry and task table; used by tests and simulations.
    pub fn check_invariants(&self) -> Result<(), String> {
        for t in self.tasks.values() {
            t.check_invariants()?;
            if t.state.is_active() {
                let exec_id = t.executor_id.as_ref().expect("active implies executor");
                if let Some(e) = self.executors.get(exec_id) {
                    if !satisfies(&e.offer, &t.run_config.hardware) {
                        return Err(format!("{} placed on {} which does not satisfy it", t.task_id, exec_id));
                    }
                    if e.busy_with.as_ref() != Some(&t.task_id) {
                        return Err(format!("{} active on {} but executor is not busy with it", t.task_id, exec_id));
                    }
                } else {
                    return Err(format!("{} active on unregistered {}", t.task_id, exec_id));
                }
            }
        }
        for e in self.executors.values() {
            if let Some(t) = &e.busy_with {
                if !e.connected {
                    return Err(format!("{} busy while disconnected", e.executor_id));
                }
                let task = self.tasks.get(t).ok_or_else(|| format!("{} busy with unknown {}", e.executor_id, t))?;
                if !task.state.is_active() || task.executor_id.as_ref() != Some(&e.executor_id) {
                    return Err(format!("{} busy with {} which is not active on it", e.executor_id, t));
                }
            }
        }
        for (exec, task) in &self.pending {
            let t = &self.tasks[task];
            if t.state != TaskState::Assigned || t.executor_id.as_ref() != Some(exec) {
                return Err(format!("pending {task} on {exec} is stale"));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{validate_run_config, FailurePhase, HardwareSpec, RunConfig};
    use crate::Digest;
    use proptest::prelude::*;

    fn cfg_for(spec: HardwareSpec) -> ValidatedRunConfig {
        validate_run_config(RunConfig {
            command: vec!["true".into()],
            workdir_snapshot: SnapshotId(Digest::of(b"ws")),
            env: vec![],
            setup_command: None,
            mounts: vec![],
            hardware: spec,
        })
        .unwrap()
    }

    fn gpu(n: u32) -> HardwareSpec {
        HardwareSpec {
            accel_type: Some("A100".into()),
            accel_count: n,
            cpu_cores: 1,
            memory_mb: 1024,
        }
    }

    fn offer(id: &str, accel: u32, mem: u64) -> HardwareOffer {
        HardwareOffer {
            executor_id: id.into(),
            accel_type: Some("A100".into()),
            accel_count: accel,
            cpu_cores: 8,
            memory_mb: mem,
            zone: "z1".into(),
        }
    }

    fn ts(ms: u64) -> Timestamp {
        Timestamp(ms)
    }

    fn yes(_: &SnapshotId) -> bool {
        true
    }

    #[test]
    fn best_fit_prefers_smallest_surplus() {
        let mut s = Scheduler::new(SchedulerConfig::default());
        let mut sink = NullSink;
        s.register(offer("big", 2, 4096), ts(0), &mut sink).unwrap();
        s.register(offer("small", 1, 4096), ts(0), &mut sink).unwrap();
        let t = s.submit(cfg_for(gpu(1)), None, yes, ts(1), &mut sink).unwrap();
        assert_eq!(s.task(&t).unwrap().executor_id, Some("small".into()));
        assert_eq!(s.task(&t).unwrap().state, TaskState::Assigned);
    }

    #[test]
    fn infeasible_task_stays_queued_and_fifo_wins() {
        let mut s = Scheduler::new(SchedulerConfig::default());
        let mut sink = NullSink;
        let big = s.submit(cfg_for(gpu(4)), None, yes, ts(0), &mut sink).unwrap();
        let t1 = s.submit(cfg_for(gpu(1)), None, yes, ts(1), &mut sink).unwrap();
        let t2 = s.submit(cfg_for(gpu(1)), None, yes, ts(2), &mut sink).unwrap();
        s.register(offer("e", 2, 4096), ts(3), &mut sink).unwrap();
        assert_eq!(s.task(&big).unwrap().state, TaskState::Queued);
        assert_eq!(s.task(&t1).unwrap().state, TaskState::Assigned);
        assert_eq!(s.task(&t2).unwrap().state, TaskState::Queued);
        assert_ne!(t1, t2);
    }

    #[test]
    fn submit_requires_snapshot() {
        let mut s = Scheduler::new(SchedulerConfig::default());
        let err = s.submit(cfg_for(gpu(1)), None, |_| false, ts(0), &mut NullSink).unwrap_err();
        assert!(matches!(err, SchedulerError::SnapshotNotFound(_)));
    }

    #[test]
    fn claim_is_at_most_once_and_results_apply() {
        let mut s = Scheduler::new(SchedulerConfig::default());
        let mut sink = NullSink;
        let e: ExecutorId = "e".into();
        assert!(matches!(s.claim(&e, ts(0), &mut sink), Err(SchedulerError::UnknownExecutor(_))));
        s.register(offer("e", 1, 4096), ts(0), &mut sink).unwrap();
        assert!(s.claim(&e, ts(0), &mut sink).unwrap().is_none());
        let t = s.submit(cfg_for(gpu(1)), None, yes, ts(1), &mut sink).unwrap();
        assert_eq!(s.claim(&e, ts(2), &mut sink).unwrap().unwrap().task_id, t);
        assert!(s.claim(&e, ts(2), &mut sink).unwrap().is_none());
        assert_eq!(s.task(&t).unwrap().state, TaskState::Preparing);
        s.report(&t, &e, LifecycleEvent::BeginRun, ts(3), &mut sink).unwrap();
        let other: ExecutorId = "x".into();
        assert!(matches!(
            s.record_result(&t, &other, 0, ts(4), &mut sink),
            Err(SchedulerError::WrongExecutor { .. })
        ));
        s.record_result(&t, &e, 3, ts(4), &mut sink).unwrap();
        let rec = s.task(&t).unwrap();
        assert_eq!((rec.state, rec.exit_code, rec.failure_phase), (TaskState::Failed, Some(3), Some(FailurePhase::Run)));
        assert!(matches!(
            s.record_result(&t, &e, 0, ts(5), &mut sink),
            Err(SchedulerError::IllegalTransition(_))
        ));
        assert!(s.executor(&e).unwrap().busy_with.is_none());
        s.check_invariants().unwrap();
    }

    #[test]
    fn cancel_rules() {
        let mut s = Scheduler::new(SchedulerConfig::default());
        let mut sink = NullSink;
        let q = s.submit(cfg_for(gpu(1)), None, yes, ts(0), &mut sink).unwrap();
        s.cancel(&q, ts(1), &mut sink).unwrap();
        s.register(offer("e", 1, 4096), ts(2), &mut sink).unwrap();
        assert_eq!(s.task(&q).unwrap().state, TaskState::Canceled);
        assert!(matches!(s.cancel(&q, ts(3), &mut sink), Err(SchedulerError::AlreadyTerminal(_))));
        assert!(matches!(s.cancel(&"nope".into(), ts(3), &mut sink), Err(SchedulerError::UnknownTask(_))));

        let r = s.submit(cfg_for(gpu(1)), None, yes, ts(4), &mut sink).unwrap();
        let e: ExecutorId = "e".into();
        s.claim(&e, ts(5), &mut sink).unwrap();
        s.report(&r, &e, LifecycleEvent::BeginRun, ts(6), &mut sink).unwrap();
        s.take_outbox();
        s.cancel(&r, ts(7), &mut sink).unwrap();
        assert_eq!(s.take_outbox().kills, vec![(e, r)]);
    }

    #[test]
    fn lease_expiry_requeues_with_original_submit_time() {
        let mut s = Scheduler::new(SchedulerConfig::default());
        let mut sink = NullSink;
        let e: ExecutorId = "e".into();
        s.register(offer("e", 1, 4096), ts(0), &mut sink).unwrap();
        let t = s.submit(cfg_for(gpu(1)), None, yes, ts(100), &mut sink).unwrap();
        s.claim(&e, ts(200), &mut sink).unwrap();
        s.report(&t, &e, LifecycleEvent::BeginRun, ts(300), &mut sink).unwrap();
        s.heartbeat(&e, ts(10_000)).unwrap();
        assert!(s.check_leases(ts(25_000), &mut sink).unwrap().is_empty());
        assert_eq!(s.check_leases(ts(25_001), &mut sink).unwrap(), vec![e.clone()]);
        let rec = s.task(&t).unwrap();
        assert_eq!((rec.state, rec.retries_used, rec.submit_time), (TaskState::Queued, 1, ts(100)));
        assert!(matches!(s.heartbeat(&e, ts(25_002)), Err(SchedulerError::UnknownExecutor(_))));
        assert!(matches!(s.heartbeat(&"ghost".into(), ts(0)), Err(SchedulerError::UnknownExecutor(_))));
        s.check_invariants().unwrap();
    }

    #[test]
    fn replay_is_idempotent() {
        let mut s = Scheduler::new(SchedulerConfig::default());
        let mut sink = VecSink::default();
        let e: ExecutorId = "e".into();
        s.register(offer("e", 1, 4096), ts(0), &mut sink).unwrap();
        let t = s.submit(cfg_for(gpu(1)), Some("ws".into()), yes, ts(1), &mut sink).unwrap();
        s.claim(&e, ts(2), &mut sink).unwrap();
        s.report(&t, &e, LifecycleEvent::BeginRun, ts(3), &mut sink).unwrap();
        s.record_result(&t, &e, 0, ts(4), &mut sink).unwrap();

        let mut once = Scheduler::new(SchedulerConfig::default());
        for r in &sink.0 {
            once.apply(r).unwrap();
        }
        let mut twice = Scheduler::new(SchedulerConfig::default());
        for r in sink.0.iter().chain(sink.0.iter()) {
            twice.apply(r).unwrap();
        }
        assert_eq!(once.task_table(), s.task_table());
        assert_eq!(twice.task_table(), once.task_table());
        assert_eq!(once.task(&t).unwrap().state, TaskState::Succeeded);
    }

    #[test]
    fn reregistering_busy_executor_loses_its_task() {
        let mut s = Scheduler::new(SchedulerConfig::default());
        let mut sink = NullSink;
        let e: ExecutorId = "e".into();
        s.register(offer("e", 1, 4096), ts(0), &mut sink).unwrap();
        let t = s.submit(cfg_for(gpu(1)), None, yes, ts(1), &mut sink).unwrap();
        s.claim(&e, ts(2), &mut sink).unwrap();
        s.register(offer("e", 2, 4096), ts(3), &mut sink).unwrap();
        let rec = s.task(&t).unwrap();
        // requeued and immediately re-bound to the restarted executor
        assert_eq!((rec.state, rec.retries_used), (TaskState::Assigned, 1));
        assert_eq!(s.executor(&e).unwrap().offer.accel_count, 2);
        s.check_invariants().unwrap();
    }

    /// Brute-force oracle for one task: over all feasible executors, the one
    /// minimizing (accel surplus, memory surplus, id).
    fn oracle_pick(offers: &[HardwareOffer], spec: &HardwareSpec) -> Option<ExecutorId> {
        let mut best: Option<(u32, u64, ExecutorId)> = None;
        for o in offers {
            if o.accel_type.as_deref() != spec.accel_type.as_deref() && spec.accel_count > 0 {
                continue;
            }
            if o.accel_count < spec.accel_count || o.cpu_cores < spec.cpu_cores || o.memory_mb < spec.memory_mb {
                continue;
            }
            let cand = (o.accel_count - spec.accel_count, o.memory_mb - spec.memory_mb, o.executor_id.clone());
            if best.as_ref().is_none_or(|b| cand < *b) {
                best = Some(cand);
            }
        }
        best.map(|b| b.2)
    }

    proptest! {
        #[test]
        fn single_task_placement_matches_oracle(
            offers in proptest::collection::vec((0u32..5, 1u64..5, prop::bool::ANY), 1..6),
            need in (0u32..4, 1u64..4),
        ) {
            let offers: Vec<HardwareOffer> = offers
                .iter()
                .enumerate()
                .map(|(i, (a, m, t))| HardwareOffer {
                    executor_id: format!("e{i}").as_str().into(),
                    accel_type: if *a > 0 { Some(if *t { "A100" } else { "H100" }.into()) } else { None },
                    accel_count: *a,
                    cpu_cores: 4,
                    memory_mb: m * 1024,
                    zone: "z".into(),
                })
                .collect();
            let spec = HardwareSpec {
                accel_type: if need.0 > 0 { Some("A100".into()) } else { None },
                accel_count: need.0,
                cpu_cores: 1,
                memory_mb: need.1 * 1024,
            };
            let mut s = Scheduler::new(SchedulerConfig::default());
            for o in &offers {
                s.register(o.clone(), ts(0), &mut NullSink).unwrap();
            }
            let t = s.submit(cfg_for(spec.clone()), None, yes, ts(1), &mut NullSink).unwrap();
            prop_assert_eq!(s.task(&t).unwrap().executor_id.clone(), oracle_pick(&offers, &spec));
            s.check_invariants().unwrap();
        }

        #[test]
        fn random_operations_preserve_invariants(ops in proptest::collection::vec((0u8..7, 0usize..4, 0i32..3), 1..80)) {
            let mut s = Scheduler::new(SchedulerConfig::default());
            let mut sink = VecSink::default();
            let execs: Vec<HardwareOffer> = (0..3).map(|i| offer(&format!("e{i}"), i + 1, 4096)).collect();
            let mut now = 0u64;
            for (op, pick, code) in ops {
                now += 1000;
                let e = &execs[pick % 3];
                let task_ids: Vec<TaskId> = s.tasks().map(|t| t.task_id.clone()).collect();
                let _ = match op {
                    0 => s.submit(cfg_for(gpu(pick as u32 % 3 + 1)), None, yes, ts(now), &mut sink).map(|_| ()),
                    1 => s.register(e.clone(), ts(now), &mut sink).map(|_| ()),
                    2 => s.claim(&e.executor_id, ts(now), &mut sink).map(|_| ()),
                    3 => match task_ids.get(pick) {
                        Some(t) => s.report(t, &e.executor_id, LifecycleEvent::BeginRun, ts(now), &mut sink),
                        None => Ok(()),
                    },
                    4 => match task_ids.get(pick) {
                        Some(t) => s.record_result(t, &e.executor_id, code, ts(now), &mut sink),
                        None => Ok(()),
                    },
                    5 => match task_ids.get(pick) {
                        Some(t) => s.cancel(t, ts(now), &mut sink),
                        None => Ok(()),
                    },
                    _ => {
                        let _ = s.heartbeat(&e.executor_id, ts(now));
                        s.check_leases(ts(now + 20_000), &mut sink).map(|_| ())
                    }
                };
                if let Err(msg) = s.check_invariants() {
                    prop_assert!(false, "{}", msg);
                }
            }
            let mut replayed = Scheduler::new(SchedulerConfig::default());
            for r in &sink.0 {
                replayed.apply(r).unwrap();
            }
            prop_assert_eq!(replayed.task_table(), s.task_table());
        }
    }
}
