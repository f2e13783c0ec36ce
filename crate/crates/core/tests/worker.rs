use std::collections::BTreeSet;
use std::path::Path;
use std::time::{Duration, Instant};

use prepserve::dispatcher::{DispatcherConfig, DispatcherServer, JobStatus};
use prepserve::pipeline::{Batch, FunctionRegistry, Pipeline};
use prepserve::records::{generate_synthetic, SeqLenDist, SyntheticSpec};
use prepserve::wire::*;
use prepserve::worker::{Worker, WorkerConfig};

fn dataset(dir: &Path, files: usize, per_file: u64, seq_len: SeqLenDist) -> u64 {
    generate_synthetic(
        &SyntheticSpec {
            num_files: files,
            records_per_file: per_file,
            payload_bytes: (8, 16),
            seq_len,
            seed: 3,
        },
        dir,
    )
    .unwrap()
    .total_records()
}

fn uniform() -> SeqLenDist {
    SeqLenDist::Uniform { min: 1, max: 8 }
}

fn dispatcher() -> DispatcherServer {
    DispatcherServer::start(
        "127.0.0.1:0",
        DispatcherConfig {
            heartbeat_interval: Duration::from_millis(50),
            worker_timeout: Some(Duration::from_millis(400)),
            ..Default::default()
        },
    )
    .unwrap()
}

fn worker(d: &DispatcherServer, listen: &str) -> Worker {
    Worker::start(WorkerConfig {
        dispatcher_addr: d.addr(),
        listen_addr: Some(listen.into()),
        heartbeat_interval: Duration::from_millis(50),
        buffer_batches: 2,
        ..Default::default()
    })
    .unwrap()
}

fn register(
    d: &DispatcherServer,
    graph: Vec<u8>,
    policy: ShardingPolicy,
    mode: JobMode,
    consumers: Option<u32>,
) -> JobHandleInfo {
    d.dispatcher()
        .register_job(&RegisterJob {
            job_name: "job".into(),
            graph,
            policy,
            mode,
            num_consumers: consumers,
        })
        .unwrap()
}

fn records_graph(dir: &Path, batch: u64) -> Vec<u8> {
    Pipeline::records(dir.to_str().unwrap(), "file", 0)
        .batch(batch)
        .build(&FunctionRegistry::default())
        .unwrap()
        .to_bytes()
}

fn read(job_id: u64, client_id: u64) -> GetElement {
    GetElement {
        job_id,
        client_id,
        consumer_index: None,
        round: None,
    }
}

/// Reads until EndOfJob, failing after 20 s.
fn drain(w: &Worker, req: &GetElement) -> Vec<Batch> {
    let deadline = Instant::now() + Duration::from_secs(20);
    let mut out = Vec::new();
    loop {
        assert!(Instant::now() < deadline, "worker did not finish");
        match w.get_element(req).unwrap() {
            ElementResult::Batch(b) => out.push(b),
            ElementResult::Pending => {}
            ElementResult::EndOfJob => return out,
        }
    }
}

fn keys(batches: &[Batch]) -> Vec<u64> {
    batches.iter().flat_map(|b| b.keys()).collect()
}

fn wait_for(what: &str, mut cond: impl FnMut() -> bool) {
    let deadline = Instant::now() + Duration::from_secs(10);
    while !cond() {
        assert!(Instant::now() < deadline, "timed out waiting for {what}");
        std::thread::sleep(Duration::from_millis(10));
    }
}

#[test]
fn off_policy_each_worker_produces_a_permutation() {
    let data = tempfile::tempdir().unwrap();
    dataset(data.path(), 3, 1, uniform());
    let d = dispatcher();
    let w1 = worker(&d, "127.0.0.1:0");
    let w2 = worker(&d, "127.0.0.1:0");
    let h = register(
        &d,
        records_graph(data.path(), 1),
        ShardingPolicy::Off,
        JobMode::Independent,
        None,
    );
    assert_eq!(h.workers.len(), 2);
    let all: Vec<u64> = vec![0, 1 << 32, 2 << 32];
    for w in [&w1, &w2] {
        let mut k = keys(&drain(w, &read(h.job_id, h.client_id)));
        k.sort();
        assert_eq!(k, all);
    }
}

#[test]
fn dynamic_shards_go_to_exactly_one_worker_and_job_completes() {
    let data = tempfile::tempdir().unwrap();
    let total = dataset(data.path(), 4, 25, uniform());
    let d = dispatcher();
    let w1 = worker(&d, "127.0.0.1:0");
    let w2 = worker(&d, "127.0.0.1:0");
    let h = register(
        &d,
        records_graph(data.path(), 4),
        ShardingPolicy::Dynamic,
        JobMode::Independent,
        None,
    );
    let r = read(h.job_id, h.client_id);
    let (a, b) = std::thread::scope(|s| {
        let a = s.spawn(|| drain(&w1, &r));
        let b = s.spawn(|| drain(&w2, &r));
        (a.join().unwrap(), b.join().unwrap())
    });
    let mut k = keys(&a);
    k.extend(keys(&b));
    let unique: BTreeSet<u64> = k.iter().copied().collect();
    assert_eq!(k.len() as u64, total);
    assert_eq!(unique.len() as u64, total);
    let started = w1.task_progress(h.job_id).map_or(0, |p| p.shards_started)
        + w2.task_progress(h.job_id).map_or(0, |p| p.shards_started);
    assert!(started <= 4);
    wait_for("job completion", || {
        d.dispatcher().state().jobs[&h.job_id].status == JobStatus::Completed
    });
    let a = d.dispatcher().state().jobs[&h.job_id]
        .assignment
        .clone()
        .unwrap();
    assert_eq!(a.completed.len(), 4);
    assert!(a.lost.is_empty());
}

#[test]
fn restarted_worker_resumes_with_next_split() {
    let data = tempfile::tempdir().unwrap();
    let total = dataset(data.path(), 4, 40, uniform());
    let d = dispatcher();
    let w = worker(&d, "127.0.0.1:0");
    let addr = w.address().to_string();
    let id = w.worker_id();
    let h = register(
        &d,
        records_graph(data.path(), 1),
        ShardingPolicy::Dynamic,
        JobMode::Independent,
        None,
    );
    let r = read(h.job_id, h.client_id);
    let mut got = Vec::new();
    while got.len() < 5 {
        if let ElementResult::Batch(b) = w.get_element(&r).unwrap() {
            got.push(b);
        }
    }
    w.kill();
    let in_flight = d.dispatcher().state().jobs[&h.job_id]
        .assignment
        .clone()
        .unwrap()
        .in_flight[&id];

    let w = worker(&d, &addr);
    assert_eq!(w.worker_id(), id);
    got.extend(drain(&w, &r));
    let state = d.dispatcher().state();
    let a = state.jobs[&h.job_id].assignment.clone().unwrap();
    assert_eq!(a.lost, BTreeSet::from([in_flight]));
    let lost_keys: BTreeSet<u64> = state.jobs[&h.job_id].shards[&in_flight]
        .keys()
        .into_iter()
        .collect();
    let k = keys(&got);
    let unique: BTreeSet<u64> = k.iter().copied().collect();
    assert_eq!(unique.len(), k.len(), "duplicate keys");
    // Only the first five batches may come from the lost shard.
    assert!(k[5..].iter().all(|k| !lost_keys.contains(k)));
    assert!((k.len() as u64) < total);
    assert!(k.len() as u64 >= total - lost_keys.len() as u64);
}

#[test]
fn shared_job_serves_both_clients_from_one_production() {
    let data = tempfile::tempdir().unwrap();
    let total = dataset(data.path(), 2, 20, uniform());
    let d = dispatcher();
    let w = Worker::start(WorkerConfig {
        dispatcher_addr: d.addr(),
        listen_addr: None,
        window_batches: 4,
        ..Default::default()
    })
    .unwrap();
    assert!(w.is_local_only());
    let h = register(
        &d,
        records_graph(data.path(), 2),
        ShardingPolicy::Off,
        JobMode::Shared,
        None,
    );
    let (r1, r2) = (read(h.job_id, 1), read(h.job_id, 2));
    let mut seq1 = Vec::new();
    let mut seq2 = Vec::new();
    let mut done = (false, false);
    while !(done.0 && done.1) {
        for (req, seq, flag) in [(&r1, &mut seq1, &mut done.0), (&r2, &mut seq2, &mut done.1)] {
            if *flag {
                continue;
            }
            match w.get_element(req).unwrap() {
                ElementResult::Batch(b) => seq.push(b),
                ElementResult::Pending => {}
                ElementResult::EndOfJob => *flag = true,
            }
        }
    }
    assert_eq!(seq1, seq2);
    assert_eq!(keys(&seq1).len() as u64, total);
    let stats = w.cache_stats(h.job_id).unwrap();
    assert_eq!(stats.produced, total / 2);
    assert_eq!(stats.evictions, total / 2 - 4);
}

#[test]
fn coordinated_rounds_alternate_between_workers() {
    let data = tempfile::tempdir().unwrap();
    dataset(
        data.path(),
        2,
        40,
        SeqLenDist::Bimodal {
            short: 16,
            long: 480,
            long_fraction: 0.3,
        },
    );
    let d = dispatcher();
    let w1 = worker(&d, "127.0.0.1:0");
    let w2 = worker(&d, "127.0.0.1:0");
    let graph = Pipeline::records(data.path().to_str().unwrap(), "file", 0)
        .bucket_by_sequence_length(&[128], 2)
        .build(&FunctionRegistry::default())
        .unwrap()
        .to_bytes();
    let h = register(
        &d,
        graph,
        ShardingPolicy::Off,
        JobMode::Coordinated,
        Some(2),
    );
    let by_id = |id: u64| if w1.worker_id() == id { &w1 } else { &w2 };
    let owners: Vec<&Worker> = h.workers.iter().map(|i| by_id(i.worker_id)).collect();
    for round in 0..4u64 {
        let owner = owners[(round % 2) as usize];
        let other = owners[((round + 1) % 2) as usize];
        let mut buckets = Vec::new();
        for consumer in 0..2 {
            let req = GetElement {
                job_id: h.job_id,
                client_id: consumer as u64,
                consumer_index: Some(consumer),
                round: Some(round),
            };
            let b = loop {
                match owner.get_element(&req).unwrap() {
                    ElementResult::Batch(b) => break b,
                    ElementResult::Pending => {}
                    ElementResult::EndOfJob => panic!("ended at round {round}"),
                }
            };
            assert_eq!(b.producer_round, Some(round));
            // Idempotent re-read.
            assert_eq!(
                owner.get_element(&req).unwrap(),
                ElementResult::Batch(b.clone())
            );
            buckets.push(b.bucket_id);
            let wrong = other.get_element(&req).unwrap_err();
            assert!(matches!(
                wrong,
                WireError::RemoteError { code, .. } if code == codes::WRONG_WORKER_FOR_ROUND
            ));
        }
        assert_eq!(buckets[0], buckets[1]);
    }
}

#[test]
fn wire_reads_and_unknown_jobs() {
    let data = tempfile::tempdir().unwrap();
    let total = dataset(data.path(), 1, 6, uniform());
    let d = dispatcher();
    let w = worker(&d, "127.0.0.1:0");
    let h = register(
        &d,
        records_graph(data.path(), 3),
        ShardingPolicy::Off,
        JobMode::Independent,
        None,
    );
    let ep = Endpoint::new(w.address(), ConnectOptions::default());
    let t = Duration::from_secs(5);
    let err = ep.call(&Message::GetElement(read(999, 1)), t).unwrap_err();
    assert!(matches!(err, WireError::RemoteError { code, .. } if code == codes::UNKNOWN_JOB));
    let mut n = 0;
    loop {
        match ep.call(&Message::GetElement(read(h.job_id, 1)), t).unwrap() {
            Message::ElementResult(ElementResult::Batch(b)) => n += b.len() as u64,
            Message::ElementResult(ElementResult::EndOfJob) => break,
            Message::ElementResult(ElementResult::Pending) => {}
            other => panic!("unexpected {other:?}"),
        }
    }
    assert_eq!(n, total);
    let err = ep
        .call(&Message::CacheStatsRequest { job_id: h.job_id }, t)
        .unwrap_err();
    assert!(matches!(err, WireError::RemoteError { code, .. } if code == codes::UNKNOWN_JOB));
}
