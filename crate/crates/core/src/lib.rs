//! Core of `expd`, a remote experiment launcher: run model and lifecycle,
//! zone-aware object store, content-addressed workspace snapshots, the
//! coordinator's scheduler, the buffered debug/terminal channel relay, the
//! framed wire codec and the write-ahead event journal.

pub mod canonical;
pub mod digest;
pub mod journal;
pub mod model;
pub mod object_store;
pub mod relay;
pub mod scheduler;
pub mod snapshot;
pub mod wire;

pub use digest::{Digest, SnapshotId};
pub use model::{
    satisfies, transition, validate_run_config, ExecutorId, HardwareOffer, HardwareSpec, LifecycleEvent,
    MountSpec, RunConfig, TaskId, TaskRecord, TaskState, Timestamp, ValidatedRunConfig,
};
