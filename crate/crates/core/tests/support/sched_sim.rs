//! Discrete-time simulation of one coordinator with three executors, ten
//! tasks and one executor crash. Matching is checked by an independent
//! feasibility predicate and a FIFO audit after every scheduler call.

use std::collections::BTreeMap;

use expd_core::model::{
    validate_run_config, ExecutorId, HardwareOffer, HardwareSpec, LifecycleEvent, RunConfig, TaskId, TaskRecord,
    TaskState, Timestamp,
};
use expd_core::scheduler::{Scheduler, SchedulerConfig, VecSink};
use expd_core::{Digest, SnapshotId};
use rand::seq::SliceRandom;
use rand::Rng;

const TICK: u64 = 100;
const HEARTBEAT: u64 = 1_000;
const LEASE: u64 = 3_000;
const HORIZON: u64 = 600_000;

#[derive(Debug, Default)]
pub struct SimReport {
    pub unfinished: Vec<TaskId>,
    pub infeasible_assignments: Vec<String>,
    pub fifo_violations: Vec<String>,
    pub crash_violations: Vec<String>,
    pub invariant_violations: Vec<String>,
    pub replay_mismatch: bool,
    pub crashed_task: Option<TaskId>,
}

impl SimReport {
    pub fn violations(&self) -> usize {
        self.unfinished.len()
            + self.infeasible_assignments.len()
            + self.fifo_violations.len()
            + self.crash_violations.len()
            + self.invariant_violations.len()
            + usize::from(self.replay_mismatch)
            + usize::from(self.crashed_task.is_none())
    }
}

/// Written separately from the library's matcher on purpose.
fn fits(offer: &HardwareOffer, spec: &HardwareSpec) -> bool {
    let accel_ok = spec.accel_count == 0 || offer.accel_type.as_deref() == spec.accel_type.as_deref();
    accel_ok
        && offer.accel_count >= spec.accel_count
        && offer.cpu_cores >= spec.cpu_cores
        && offer.memory_mb >= spec.memory_mb
}

fn offers(rng: &mut impl Rng) -> Vec<HardwareOffer> {
    let offer = |id: &str, t: Option<&str>, n: u32, cpu: u32, mem: u64| HardwareOffer {
        executor_id: ExecutorId::new(id),
        accel_type: t.map(String::from),
        accel_count: n,
        cpu_cores: cpu,
        memory_mb: mem,
        zone: "local".into(),
    };
    vec![
        offer("gpu-big", Some("A100"), rng.gen_range(2..=8), 32, rng.gen_range(64..=256) * 1024),
        offer("gpu-small", Some(["A100", "V100"][rng.gen_range(0..2)]), 1, 8, 32 * 1024),
        offer("cpu-box", None, 0, rng.gen_range(4..=16), 16 * 1024),
    ]
}

/// A spec that at least one executor can satisfy.
fn spec(rng: &mut impl Rng, offers: &[HardwareOffer]) -> HardwareSpec {
    loop {
        let s = match rng.gen_range(0..4) {
            0 => HardwareSpec::cpu_only(rng.gen_range(1..=4), rng.gen_range(1..=8) * 1024),
            1 => HardwareSpec {
                accel_type: Some("A100".into()),
                accel_count: rng.gen_range(1..=2),
                cpu_cores: 4,
                memory_mb: 16 * 1024,
            },
            2 => HardwareSpec {
                accel_type: Some("V100".into()),
                accel_count: 1,
                cpu_cores: 2,
                memory_mb: 8 * 1024,
            },
            _ => HardwareSpec::cpu_only(rng.gen_range(1..=16), rng.gen_range(1..=32) * 1024),
        };
        if offers.iter().any(|o| fits(o, &s)) {
            return s;
        }
    }
}

struct Exec {
    offer: HardwareOffer,
    alive: bool,
    next_heartbeat: u64,
    running: Option<(TaskId, u64, i32)>,
}

fn fifo_key(t: &TaskRecord) -> (Timestamp, TaskId) {
    (t.submit_time, t.task_id.clone())
}

pub fn run(rng: &mut impl Rng) -> SimReport {
    let mut report = SimReport::default();
    let mut sched = Scheduler::new(SchedulerConfig {
        lease_ms: LEASE,
        heartbeat_ms: HEARTBEAT,
        max_retries: 2,
    });
    let mut sink = VecSink::default();
    let offers = offers(rng);
    let mut execs: BTreeMap<ExecutorId, Exec> = offers
        .iter()
        .map(|o| {
            (
                o.executor_id.clone(),
                Exec {
                    offer: o.clone(),
                    alive: false,
                    next_heartbeat: 0,
                    running: None,
                },
            )
        })
        .collect();
    // several tasks share a submit instant so the id tiebreak matters
    let mut submits: Vec<(u64, HardwareSpec)> = (0..10)
        .map(|_| (rng.gen_range(0..8u64) * 500, spec(rng, &offers)))
        .collect();
    submits.sort_by_key(|s| s.0);
    let register_at: Vec<u64> = (0..3).map(|_| rng.gen_range(0..4_000)).collect();
    let crash_after = rng.gen_range(500..6_000u64);
    let mut crash: Option<(ExecutorId, TaskId, Timestamp, u64)> = None;
    let restart_delay = rng.gen_range(LEASE + 1_000..LEASE + 8_000);
    let snapshot = SnapshotId(Digest::of(b"sim"));

    let audit = |sched: &mut Scheduler, report: &mut SimReport| {
        let outbox = sched.take_outbox();
        for (exec, task_id) in &outbox.assignments {
            let offer = &sched.executor(exec).expect("assigned executor exists").offer;
            let task = sched.task(task_id).expect("assigned task exists");
            if !fits(offer, &task.run_config.hardware) {
                report
                    .infeasible_assignments
                    .push(format!("{task_id} on {exec}"));
            }
            for q in sched.tasks().filter(|q| q.state == TaskState::Queued) {
                if fifo_key(q) < fifo_key(task) && fits(offer, &q.run_config.hardware) {
                    report
                        .fifo_violations
                        .push(format!("{task_id} took {exec} ahead of {}", q.task_id));
                }
            }
        }
        if let Err(e) = sched.check_invariants() {
            report.invariant_violations.push(e);
        }
    };

    let mut now = 0u64;
    let mut next_submit = 0;
    while now <= HORIZON {
        let ts = Timestamp(now);
        while next_submit < submits.len() && submits[next_submit].0 <= now {
            let cfg = RunConfig {
                command: vec!["train".into()],
                workdir_snapshot: snapshot,
                env: vec![],
                setup_command: None,
                mounts: vec![],
                hardware: submits[next_submit].1.clone(),
            };
            sched
                .submit(validate_run_config(cfg).unwrap(), None, |_| true, ts, &mut sink)
                .unwrap();
            next_submit += 1;
            audit(&mut sched, &mut report);
        }
        let ids: Vec<ExecutorId> = execs.keys().cloned().collect();
        for (i, id) in ids.iter().enumerate() {
            let restart_due = crash
                .as_ref()
                .is_some_and(|(c, _, _, at)| c == id && now >= at + restart_delay);
            let e = execs.get_mut(id).unwrap();
            let first_start = !e.alive && now >= register_at[i] && crash.as_ref().is_none_or(|(c, ..)| c != id);
            if first_start || (!e.alive && restart_due) {
                e.alive = true;
                e.next_heartbeat = now + HEARTBEAT;
                e.running = None;
                sched.register(e.offer.clone(), ts, &mut sink).unwrap();
                audit(&mut sched, &mut report);
                if restart_due {
                    crash.as_mut().unwrap().3 = u64::MAX / 2;
                }
            }
        }
        // inject the crash on the first busy executor after crash_after, or
        // on the last task if everything else finished sooner
        let nearly_done = next_submit == submits.len() && sched.tasks().filter(|t| !t.state.is_terminal()).count() <= 1;
        if crash.is_none() && (now >= crash_after || nearly_done) {
            let mut busy: Vec<(ExecutorId, TaskId)> = execs
                .iter()
                .filter(|(_, e)| e.alive)
                .filter_map(|(id, e)| e.running.as_ref().map(|r| (id.clone(), r.0.clone())))
                .collect();
            busy.shuffle(rng);
            if let Some((id, task_id)) = busy.pop() {
                let submit_time = sched.task(&task_id).unwrap().submit_time;
                let e = execs.get_mut(&id).unwrap();
                e.alive = false;
                e.running = None;
                crash = Some((id, task_id, submit_time, now));
                report.crashed_task = crash.as_ref().map(|c| c.1.clone());
            }
        }
        for id in &ids {
            let e = execs.get_mut(id).unwrap();
            if !e.alive {
                continue;
            }
            if now >= e.next_heartbeat {
                e.next_heartbeat = now + HEARTBEAT;
                if sched.heartbeat(id, ts).is_err() {
                    report.invariant_violations.push(format!("live executor {id} lost its lease"));
                }
            }
            if let Some((task_id, end, code)) = e.running.clone() {
                let state = sched.task(&task_id).map(|t| t.state);
                if state != Some(TaskState::Running) {
                    e.running = None;
                } else if now >= end {
                    e.running = None;
                    sched.record_result(&task_id, id, code, ts, &mut sink).unwrap();
                    audit(&mut sched, &mut report);
                }
            }
            if e.running.is_none() {
                if let Some(task) = sched.claim(id, ts, &mut sink).unwrap() {
                    sched
                        .report(&task.task_id, id, LifecycleEvent::BeginRun, ts, &mut sink)
                        .unwrap();
                    let duration = rng.gen_range(200..5_000);
                    let code = if rng.gen_ratio(1, 5) { 1 } else { 0 };
                    e.running = Some((task.task_id, now + duration, code));
                }
            }
        }
        sched.check_leases(ts, &mut sink).unwrap();
        audit(&mut sched, &mut report);
        if next_submit == submits.len() && sched.tasks().all(|t| t.state.is_terminal()) && crash.is_some() {
            break;
        }
        now += TICK;
    }

    report.unfinished = sched
        .tasks()
        .filter(|t| !t.state.is_terminal())
        .map(|t| t.task_id.clone())
        .collect();
    if let Some((_, task_id, submit_time, _)) = &crash {
        let lost_transition = sink.0.iter().any(|r| {
            matches!(&r.event, expd_core::scheduler::Event::TaskTransition { task_id: t, event: LifecycleEvent::ExecutorLost, .. } if t == task_id)
        });
        let t = sched.task(task_id).unwrap();
        if !lost_transition {
            report.crash_violations.push(format!("{task_id} never marked ExecutorLost"));
        }
        if t.submit_time != *submit_time {
            report.crash_violations.push(format!("{task_id} submit_time changed"));
        }
        if t.retries_used == 0 {
            report.crash_violations.push(format!("{task_id} was not requeued"));
        }
    }
    let mut replayed = Scheduler::new(*sched.config());
    for r in &sink.0 {
        replayed.apply(r).unwrap();
    }
    report.replay_mismatch = replayed.task_table() != sched.task_table();
    report
}
