use std::path::Path;
use std::sync::Arc;
use std::time::Duration;

use prepserve::dispatcher::*;
use prepserve::pipeline::{FunctionRegistry, Pipeline};
use prepserve::records::{generate_synthetic, SeqLenDist, SyntheticSpec};
use prepserve::wire::*;

fn dataset(dir: &Path, files: usize) {
    generate_synthetic(
        &SyntheticSpec {
            num_files: files,
            records_per_file: 10,
            payload_bytes: (8, 16),
            seq_len: SeqLenDist::Uniform { min: 1, max: 8 },
            seed: 1,
        },
        dir,
    )
    .unwrap();
}

fn graph(dir: &Path, batch: u64) -> Vec<u8> {
    Pipeline::records(dir.to_str().unwrap(), "file", 0)
        .batch(batch)
        .build(&FunctionRegistry::default())
        .unwrap()
        .to_bytes()
}

fn job(name: &str, graph: Vec<u8>, policy: ShardingPolicy) -> RegisterJob {
    RegisterJob {
        job_name: name.into(),
        graph,
        policy,
        mode: JobMode::Independent,
        num_consumers: None,
    }
}

fn open(clock: Arc<FakeClock>, journal: Option<&Path>) -> Dispatcher {
    Dispatcher::open(
        DispatcherConfig {
            journal_path: journal.map(Path::to_path_buf),
            fsync: false,
            heartbeat_interval: Duration::from_millis(100),
            worker_timeout: None,
        },
        clock,
    )
    .unwrap()
}

#[test]
fn worker_registration_and_task_lists() {
    let data = tempfile::tempdir().unwrap();
    dataset(data.path(), 2);
    let d = open(Arc::default(), None);
    let (w1, tasks) = d.register_worker("w1:1").unwrap();
    assert!(tasks.is_empty());
    d.register_job(&job("a", graph(data.path(), 2), ShardingPolicy::Off))
        .unwrap();
    d.register_job(&job("b", graph(data.path(), 3), ShardingPolicy::Dynamic))
        .unwrap();
    let (w2, tasks) = d.register_worker("w2:1").unwrap();
    assert_ne!(w1, w2);
    assert_eq!(tasks.len(), 2);
    assert_eq!(d.list_tasks(w1).unwrap().len(), 2);
}

#[test]
fn job_names_dedupe_and_mismatch() {
    let data = tempfile::tempdir().unwrap();
    dataset(data.path(), 2);
    let d = open(Arc::default(), None);
    d.register_worker("w1:1").unwrap();
    let a = d
        .register_job(&job("shared", graph(data.path(), 2), ShardingPolicy::Off))
        .unwrap();
    let b = d
        .register_job(&job("shared", graph(data.path(), 2), ShardingPolicy::Off))
        .unwrap();
    assert_eq!(a.job_id, b.job_id);
    assert_ne!(a.client_id, b.client_id);
    assert!(b.joined_existing);
    assert_eq!(d.state().jobs.len(), 1);
    let err = d
        .register_job(&job("shared", graph(data.path(), 4), ShardingPolicy::Off))
        .unwrap_err();
    assert!(matches!(err, DispatcherError::PolicyMismatch(_)));
}

#[test]
fn dynamic_splits_are_fcfs_and_unique() {
    let data = tempfile::tempdir().unwrap();
    dataset(data.path(), 8);
    let d = open(Arc::default(), None);
    let (w1, _) = d.register_worker("w1:1").unwrap();
    let (w2, _) = d.register_worker("w2:1").unwrap();
    let h = d
        .register_job(&job("dyn", graph(data.path(), 2), ShardingPolicy::Dynamic))
        .unwrap();
    let a = d.state().jobs[&h.job_id].assignment.clone().unwrap();
    assert_eq!(a.pending.len(), 8);

    let mut seen = Vec::new();
    for i in 0..8 {
        let w = if i % 2 == 0 { w1 } else { w2 };
        seen.push(d.get_split(h.job_id, w).unwrap().unwrap().shard_id);
    }
    assert_eq!(seen, (0..8).collect::<Vec<_>>());
    assert_eq!(d.get_split(h.job_id, w1).unwrap(), None);
    assert_eq!(d.get_split(h.job_id, w2).unwrap(), None);
    let a = d.state().jobs[&h.job_id].assignment.clone().unwrap();
    assert_eq!(a.completed.len(), 8);
    assert!(a.in_flight.is_empty() && a.pending.is_empty());
}

#[test]
fn get_split_errors() {
    let data = tempfile::tempdir().unwrap();
    dataset(data.path(), 2);
    let d = open(Arc::default(), None);
    let (w, _) = d.register_worker("w1:1").unwrap();
    let off = d
        .register_job(&job("off", graph(data.path(), 2), ShardingPolicy::Off))
        .unwrap();
    assert_eq!(d.get_split(99, w), Err(DispatcherError::UnknownJob(99)));
    assert_eq!(
        d.get_split(off.job_id, w),
        Err(DispatcherError::WrongPolicy(off.job_id))
    );
}

#[test]
fn crashed_worker_keeps_id_and_loses_split() {
    let data = tempfile::tempdir().unwrap();
    dataset(data.path(), 4);
    let d = open(Arc::default(), None);
    let (w, _) = d.register_worker("w1:1").unwrap();
    let h = d
        .register_job(&job("dyn", graph(data.path(), 2), ShardingPolicy::Dynamic))
        .unwrap();
    let s0 = d.get_split(h.job_id, w).unwrap().unwrap();
    let (again, tasks) = d.register_worker("w1:1").unwrap();
    assert_eq!(again, w);
    assert_eq!(tasks.len(), 1);
    let next = d.get_split(h.job_id, w).unwrap().unwrap();
    assert_ne!(next.shard_id, s0.shard_id);
    let a = d.state().jobs[&h.job_id].assignment.clone().unwrap();
    assert!(a.lost.contains(&s0.shard_id));
    assert!(!a.pending.contains(&s0.shard_id));
}

#[test]
fn heartbeats_liveness_and_directives() {
    let data = tempfile::tempdir().unwrap();
    dataset(data.path(), 2);
    let clock = Arc::new(FakeClock::default());
    let d = open(clock.clone(), None);
    let (w1, _) = d.register_worker("w1:1").unwrap();
    let (w2, _) = d.register_worker("w2:1").unwrap();

    let unknown = d.heartbeat(42, &[]).unwrap();
    assert!(unknown.reregister);

    let h = d
        .register_job(&job("a", graph(data.path(), 2), ShardingPolicy::Off))
        .unwrap();
    let dir = d.heartbeat(w1, &[]).unwrap();
    assert_eq!(dir.new_tasks.len(), 1);
    assert_eq!(dir.new_tasks[0].job_id, h.job_id);

    // w2 goes silent; w1 keeps beating.
    for _ in 0..3 {
        clock.advance(100);
        d.heartbeat(
            w1,
            &[TaskReport {
                job_id: h.job_id,
                state: TaskState::Running,
            }],
        )
        .unwrap();
        assert!(d.check_liveness().unwrap().is_empty());
    }
    clock.advance(1);
    d.heartbeat(
        w1,
        &[TaskReport {
            job_id: h.job_id,
            state: TaskState::Running,
        }],
    )
    .unwrap();
    assert_eq!(d.check_liveness().unwrap(), vec![w2]);
    let update = d.client_heartbeat(h.job_id, h.client_id).unwrap();
    assert_eq!(
        update
            .workers
            .iter()
            .map(|w| w.worker_id)
            .collect::<Vec<_>>(),
        vec![w1]
    );
    assert!(!update.finished);

    let dir = d
        .heartbeat(
            w1,
            &[TaskReport {
                job_id: h.job_id,
                state: TaskState::Done,
            }],
        )
        .unwrap();
    assert_eq!(dir.completed_jobs, vec![h.job_id]);
    assert!(d.client_heartbeat(h.job_id, h.client_id).unwrap().finished);
    assert!(d.heartbeat(w2, &[]).unwrap().reregister);
}

#[test]
fn static_policy_round_robin() {
    let data = tempfile::tempdir().unwrap();
    dataset(data.path(), 5);
    let d = open(Arc::default(), None);
    assert_eq!(
        d.register_job(&job("s", graph(data.path(), 2), ShardingPolicy::Static))
            .unwrap_err(),
        DispatcherError::NoWorkers
    );
    let (w1, _) = d.register_worker("w1:1").unwrap();
    let (w2, _) = d.register_worker("w2:1").unwrap();
    d.register_job(&job("s", graph(data.path(), 2), ShardingPolicy::Static))
        .unwrap();
    let ids = |w| {
        d.list_tasks(w).unwrap()[0]
            .static_shards
            .iter()
            .map(|s| s.shard_id)
            .collect::<Vec<_>>()
    };
    assert_eq!(ids(w1), vec![0, 2, 4]);
    assert_eq!(ids(w2), vec![1, 3]);
}

#[test]
fn recovery_replays_journal() {
    let data = tempfile::tempdir().unwrap();
    dataset(data.path(), 4);
    let dir = tempfile::tempdir().unwrap();
    let jpath = dir.path().join("journal");
    let dump = {
        let d = open(Arc::default(), Some(&jpath));
        let (w, _) = d.register_worker("w1:1").unwrap();
        let h = d
            .register_job(&job("dyn", graph(data.path(), 2), ShardingPolicy::Dynamic))
            .unwrap();
        d.get_split(h.job_id, w).unwrap();
        d.state_dump()
    };
    let d = open(Arc::default(), Some(&jpath));
    assert_eq!(d.state_dump(), dump);
    let s = d.state();
    assert_eq!(s.workers.len(), 1);
    assert_eq!(s.jobs.len(), 1);
    assert_eq!(s.jobs[&1].assignment.as_ref().unwrap().in_flight.len(), 1);
    assert_eq!(Dispatcher::recover(&jpath).unwrap(), s);
}

#[test]
fn torn_tail_recovers_prefix_state() {
    let data = tempfile::tempdir().unwrap();
    dataset(data.path(), 3);
    let dir = tempfile::tempdir().unwrap();
    let jpath = dir.path().join("journal");
    {
        let d = open(Arc::default(), Some(&jpath));
        let (w, _) = d.register_worker("w1:1").unwrap();
        let h = d
            .register_job(&job("dyn", graph(data.path(), 2), ShardingPolicy::Dynamic))
            .unwrap();
        d.get_split(h.job_id, w).unwrap();
        d.get_split(h.job_id, w).unwrap();
    }
    let full = std::fs::read(&jpath).unwrap();
    let records = read_journal(&jpath).unwrap();
    let expected = DispatcherState::replay(&records[..records.len() - 1]).unwrap();
    let last_len = journal::encode_record(
        records.last().unwrap().sequence,
        &records.last().unwrap().event,
    )
    .unwrap()
    .len();
    for cut in full.len() - last_len..full.len() {
        std::fs::write(&jpath, &full[..cut]).unwrap();
        let d = open(Arc::default(), Some(&jpath));
        assert_eq!(d.state_dump(), expected.canonical_dump(), "cut {cut}");
    }
}

#[test]
fn range_source_cannot_be_split() {
    let d = open(Arc::default(), None);
    d.register_worker("w1:1").unwrap();
    let g = Pipeline::range(0, 10)
        .build(&FunctionRegistry::default())
        .unwrap()
        .to_bytes();
    assert!(matches!(
        d.register_job(&job("r", g, ShardingPolicy::Dynamic)),
        Err(DispatcherError::BadRequest(_))
    ));
}
