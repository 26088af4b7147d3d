//! Durable coordinator state: `events.log` holds one canonical JSON record per
//! line and is the source of truth; `tasks/<id>.json` is a materialized view
//! rewritten after each change.

use std::fs::{self, File, OpenOptions};
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use crate::canonical;
use crate::model::{TaskRecord, Timestamp};
use crate::scheduler::{EventSink, JournalRecord, Scheduler, SchedulerConfig, SchedulerError, StorageFailure};

pub const EVENTS_FILE: &str = "events.log";
pub const TASKS_DIR: &str = "tasks";

#[derive(Debug, thiserror::Error)]
pub enum JournalError {
    #[error("corrupt state: unparseable record at byte offset {offset} of {path}: {reason}")]
    CorruptState { path: PathBuf, offset: u64, reason: String },
    #[error("corrupt state: record at byte offset {offset} does not replay: {source}")]
    InvalidRecord {
        offset: u64,
        #[source]
        source: SchedulerError,
    },
    #[error("storage failure at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error(transparent)]
    Scheduler(#[from] SchedulerError),
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> JournalError + '_ {
    move |source| JournalError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Parses an event log. A final line without a newline is a torn write and is
/// dropped; its byte offset is returned so the caller can truncate it.
pub fn parse_log(bytes: &[u8], path: &Path) -> Result<(Vec<(u64, JournalRecord)>, u64), JournalError> {
    let mut records = Vec::new();
    let mut offset = 0usize;
    while offset < bytes.len() {
        let Some(nl) = bytes[offset..].iter().position(|&b| b == b'\n') else {
            break;
        };
        let line = &bytes[offset..offset + nl];
        let rec: JournalRecord = canonical::from_slice(line).map_err(|e| JournalError::CorruptState {
            path: path.to_path_buf(),
            offset: offset as u64,
            reason: e.to_string(),
        })?;
        records.push((offset as u64, rec));
        offset += nl + 1;
    }
    Ok((records, offset as u64))
}

pub struct Journal {
    path: PathBuf,
    file: File,
}

impl Journal {
    /// Opens (creating if needed) the log under `state_dir`, truncating a torn
    /// trailing line, and returns the complete records with their offsets.
    pub fn open(state_dir: &Path) -> Result<(Journal, Vec<(u64, JournalRecord)>), JournalError> {
        fs::create_dir_all(state_dir.join(TASKS_DIR)).map_err(io_err(state_dir))?;
        let path = state_dir.join(EVENTS_FILE);
        let bytes = match fs::read(&path) {
            Ok(b) => b,
            Err(e) if e.kind() == io::ErrorKind::NotFound => Vec::new(),
            Err(e) => return Err(io_err(&path)(e)),
        };
        let (records, valid_len) = parse_log(&bytes, &path)?;
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(io_err(&path))?;
        if valid_len < bytes.len() as u64 {
            file.set_len(valid_len).map_err(io_err(&path))?;
            file.sync_data().map_err(io_err(&path))?;
        }
        Ok((Journal { path, file }, records))
    }

    pub fn path(&self) -> &Path {
        &self.path
    }
}

impl EventSink for Journal {
    fn append(&mut self, record: &JournalRecord) -> Result<(), StorageFailure> {
        let mut line = canonical::to_vec(record).map_err(|e| StorageFailure(e.to_string()))?;
        line.push(b'\n');
        self.file
            .write_all(&line)
            .and_then(|_| self.file.sync_data())
            .map_err(|e| StorageFailure(format!("{}: {e}", self.path.display())))
    }
}

/// Rebuilds a scheduler from the records, skipping duplicates.
pub fn replay<'a>(
    cfg: SchedulerConfig,
    records: impl IntoIterator<Item = &'a (u64, JournalRecord)>,
) -> Result<Scheduler, JournalError> {
    let mut s = Scheduler::new(cfg);
    for (offset, rec) in records {
        s.apply(rec).map_err(|source| JournalError::InvalidRecord { offset: *offset, source })?;
    }
    s.take_outbox();
    Ok(s)
}

pub fn task_view_path(state_dir: &Path, task: &TaskRecord) -> PathBuf {
    state_dir.join(TASKS_DIR).join(format!("{}.json", task.task_id))
}

/// Atomically rewrites `tasks/<id>.json`.
pub fn write_task_view(state_dir: &Path, task: &TaskRecord) -> Result<(), JournalError> {
    let path = task_view_path(state_dir, task);
    let tmp = path.with_extension("json.tmp");
    let body = canonical::to_vec(task).map_err(|e| JournalError::Io {
        path: path.clone(),
        source: io::Error::other(e),
    })?;
    fs::write(&tmp, body).map_err(io_err(&tmp))?;
    fs::rename(&tmp, &path).map_err(io_err(&path))
}

pub struct Recovered {
    pub scheduler: Scheduler,
    pub journal: Journal,
    pub records_replayed: usize,
    pub orphans_failed_over: usize,
}

/// Opens `state_dir`, replays the log, fails over tasks whose executors did
/// not survive the restart, and refreshes every task view.
pub fn recover(state_dir: &Path, cfg: SchedulerConfig, now: Timestamp) -> Result<Recovered, JournalError> {
    let (mut journal, records) = Journal::open(state_dir)?;
    let mut scheduler = replay(cfg, &records)?;
    let orphans = scheduler.fail_over_orphans(now, &mut journal)?;
    scheduler.take_outbox();
    for t in scheduler.tasks() {
        write_task_view(state_dir, t)?;
    }
    Ok(Recovered {
        scheduler,
        journal,
        records_replayed: records.len(),
        orphans_failed_over: orphans.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{validate_run_config, ExecutorId, HardwareOffer, HardwareSpec, LifecycleEvent, RunConfig, TaskState};
    use crate::{Digest, SnapshotId};

    fn run_config() -> crate::ValidatedRunConfig {
        validate_run_config(RunConfig {
            command: vec!["true".into()],
            workdir_snapshot: SnapshotId(Digest::of(b"ws")),
            env: vec![],
            setup_command: None,
            mounts: vec![],
            hardware: HardwareSpec::cpu_only(1, 128),
        })
        .unwrap()
    }

    fn offer() -> HardwareOffer {
        HardwareOffer {
            executor_id: "e".into(),
            accel_type: None,
            accel_count: 0,
            cpu_cores: 2,
            memory_mb: 512,
            zone: "z".into(),
        }
    }

    #[test]
    fn empty_state_dir_recovers_empty() {
        let dir = tempfile::tempdir().unwrap();
        let r = recover(dir.path(), SchedulerConfig::default(), Timestamp(0)).unwrap();
        assert_eq!(r.scheduler.tasks().count(), 0);
        assert!(dir.path().join(EVENTS_FILE).exists());
    }

    #[test]
    fn finished_task_survives_and_running_task_is_failed_over() {
        let dir = tempfile::tempdir().unwrap();
        let e: ExecutorId = "e".into();
        let (done, running) = {
            let mut r = recover(dir.path(), SchedulerConfig::default(), Timestamp(0)).unwrap();
            let (s, j) = (&mut r.scheduler, &mut r.journal);
            s.register(offer(), Timestamp(1), j).unwrap();
            let a = s.submit(run_config(), None, |_| true, Timestamp(2), j).unwrap();
            s.claim(&e, Timestamp(3), j).unwrap();
            s.report(&a, &e, LifecycleEvent::BeginRun, Timestamp(4), j).unwrap();
            s.record_result(&a, &e, 0, Timestamp(5), j).unwrap();
            let b = s.submit(run_config(), None, |_| true, Timestamp(6), j).unwrap();
            s.claim(&e, Timestamp(7), j).unwrap();
            s.report(&b, &e, LifecycleEvent::BeginRun, Timestamp(8), j).unwrap();
            (a, b)
        };
        let r = recover(dir.path(), SchedulerConfig::default(), Timestamp(100)).unwrap();
        assert_eq!(r.orphans_failed_over, 1);
        assert_eq!(r.scheduler.task(&done).unwrap().state, TaskState::Succeeded);
        let b = r.scheduler.task(&running).unwrap();
        assert_eq!((b.state, b.retries_used), (TaskState::Queued, 1));
        let view: TaskRecord =
            canonical::from_slice(&fs::read(task_view_path(dir.path(), b)).unwrap()).unwrap();
        assert_eq!(&view, b);

        // a later coordinator with a smaller budget still replays the same way
        drop(r);
        let cfg = SchedulerConfig {
            max_retries: 0,
            ..SchedulerConfig::default()
        };
        let r = recover(dir.path(), cfg, Timestamp(200)).unwrap();
        assert_eq!(r.scheduler.task(&running).unwrap().state, TaskState::Queued);
    }

    #[test]
    fn torn_tail_is_dropped_and_truncated() {
        let dir = tempfile::tempdir().unwrap();
        let id = {
            let mut r = recover(dir.path(), SchedulerConfig::default(), Timestamp(0)).unwrap();
            r.scheduler.submit(run_config(), None, |_| true, Timestamp(1), &mut r.journal).unwrap()
        };
        let path = dir.path().join(EVENTS_FILE);
        let good = fs::read(&path).unwrap();
        let mut f = OpenOptions::new().append(true).open(&path).unwrap();
        f.write_all(b"{\"at\":5,\"event\":{\"ty").unwrap();
        drop(f);
        let r = recover(dir.path(), SchedulerConfig::default(), Timestamp(9)).unwrap();
        assert!(r.scheduler.task(&id).is_some());
        assert_eq!(fs::read(&path).unwrap(), good);
    }

    #[test]
    fn corrupt_complete_line_names_offset() {
        let dir = tempfile::tempdir().unwrap();
        {
            let mut r = recover(dir.path(), SchedulerConfig::default(), Timestamp(0)).unwrap();
            r.scheduler.submit(run_config(), None, |_| true, Timestamp(1), &mut r.journal).unwrap();
        }
        let path = dir.path().join(EVENTS_FILE);
        let len = fs::metadata(&path).unwrap().len();
        let mut f = OpenOptions::new().append(true).open(&path).unwrap();
        f.write_all(b"garbage\n").unwrap();
        drop(f);
        match recover(dir.path(), SchedulerConfig::default(), Timestamp(2)) {
            Err(JournalError::CorruptState { offset, .. }) => assert_eq!(offset, len),
            Err(e) => panic!("unexpected error {e}"),
            Ok(_) => panic!("corrupt log accepted"),
        }
    }

    #[test]
    fn every_crash_point_recovers_acknowledged_tasks() {
        // Run a workload, then recover from every byte prefix of the log.
        let dir = tempfile::tempdir().unwrap();
        let e: ExecutorId = "e".into();
        let mut acked_at = Vec::new();
        {
            let mut r = recover(dir.path(), SchedulerConfig::default(), Timestamp(0)).unwrap();
            let (s, j) = (&mut r.scheduler, &mut r.journal);
            s.register(offer(), Timestamp(1), j).unwrap();
            for i in 0..4u64 {
                let t = s.submit(run_config(), None, |_| true, Timestamp(10 + i), j).unwrap();
                acked_at.push((fs::metadata(j.path()).unwrap().len(), t));
                if s.claim(&e, Timestamp(20 + i), j).unwrap().is_some() {
                    let cur = s.tasks().find(|t| t.state == TaskState::Preparing).unwrap().task_id.clone();
                    s.report(&cur, &e, LifecycleEvent::BeginRun, Timestamp(30 + i), j).unwrap();
                    s.record_result(&cur, &e, i as i32, Timestamp(40 + i), j).unwrap();
                }
            }
        }
        let full = fs::read(dir.path().join(EVENTS_FILE)).unwrap();
        for cut in 0..=full.len() {
            let crash = tempfile::tempdir().unwrap();
            fs::write(crash.path().join(EVENTS_FILE), &full[..cut]).unwrap();
            let r = recover(crash.path(), SchedulerConfig::default(), Timestamp(1000)).unwrap();
            r.scheduler.check_invariants().unwrap();
            for (durable_len, t) in &acked_at {
                if (cut as u64) >= *durable_len {
                    assert!(r.scheduler.task(t).is_some(), "cut {cut}: lost {t}");
                }
            }
            for t in r.scheduler.tasks() {
                assert!(!t.state.is_active(), "cut {cut}: {} left {}", t.task_id, t.state);
            }
        }
    }
}
