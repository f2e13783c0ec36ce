use std::collections::BTreeSet;
use std::path::Path;
use std::sync::Arc;
use std::time::Duration;

use prepserve::client::{distribute, ClientError, DistributeConfig, ReadSources, RemoteStream};
use prepserve::dispatcher::{DispatcherConfig, DispatcherServer};
use prepserve::pipeline::{Batch, DatasetGraph, FunctionRegistry, Pipeline};
use prepserve::records::{generate_synthetic, SeqLenDist, SyntheticSpec};
use prepserve::wire::{JobMode, JobUpdate, ShardingPolicy};
use prepserve::worker::{Worker, WorkerConfig};

fn dataset(dir: &Path, files: usize, per_file: u64, seq_len: SeqLenDist) -> u64 {
    generate_synthetic(
        &SyntheticSpec {
            num_files: files,
            records_per_file: per_file,
            payload_bytes: (8, 16),
            seq_len,
            seed: 11,
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

fn worker(d: &DispatcherServer) -> Worker {
    Worker::start(WorkerConfig {
        dispatcher_addr: d.addr(),
        heartbeat_interval: Duration::from_millis(50),
        buffer_batches: 2,
        ..Default::default()
    })
    .unwrap()
}

fn graph(dir: &Path, batch: u64) -> DatasetGraph {
    Pipeline::records(dir.to_str().unwrap(), "file", 0)
        .batch(batch)
        .build(&FunctionRegistry::default())
        .unwrap()
}

fn config(d: &DispatcherServer, policy: ShardingPolicy) -> DistributeConfig {
    DistributeConfig {
        dispatcher_addr: d.addr(),
        job_name: "train".into(),
        policy,
        poll_interval: Duration::from_millis(20),
        ..Default::default()
    }
}

fn collect(s: &mut RemoteStream) -> Vec<Batch> {
    let mut out = Vec::new();
    while let Some(b) = s.next_batch().unwrap() {
        out.push(b);
    }
    out
}

fn keys(batches: &[Batch]) -> Vec<u64> {
    batches.iter().flat_map(|b| b.keys()).collect()
}

#[test]
fn off_policy_two_workers_then_end_of_job() {
    let data = tempfile::tempdir().unwrap();
    dataset(data.path(), 1, 3, uniform());
    let d = dispatcher();
    let _w1 = worker(&d);
    let _w2 = worker(&d);
    let mut s = distribute(&graph(data.path(), 1), config(&d, ShardingPolicy::Off)).unwrap();
    let state = d.dispatcher().state();
    let workers = state.job_workers(&state.jobs[&s.job_id()]);
    let update = JobUpdate {
        job_id: s.job_id(),
        workers,
        finished: false,
    };
    s.handle_job_update(&update);
    s.handle_job_update(&update);
    let batches = collect(&mut s);
    assert_eq!(batches.len(), 6);
    let mut k = keys(&batches);
    k.sort();
    k.dedup();
    assert_eq!(k.len(), 3);
    assert!(s.next_batch().unwrap().is_none());
}

#[test]
fn joining_by_name_reuses_the_job() {
    let data = tempfile::tempdir().unwrap();
    let total = dataset(data.path(), 2, 10, uniform());
    let d = dispatcher();
    let _w = worker(&d);
    let g = graph(data.path(), 2);
    let cfg = DistributeConfig {
        mode: JobMode::Shared,
        ..config(&d, ShardingPolicy::Off)
    };
    let mut a = distribute(&g, cfg.clone()).unwrap();
    let mut b = distribute(&g, cfg.clone()).unwrap();
    assert!(!a.joined_existing());
    assert!(b.joined_existing());
    assert_eq!(a.job_id(), b.job_id());
    assert_eq!(d.dispatcher().state().jobs.len(), 1);
    let other = Pipeline::records(data.path().to_str().unwrap(), "file", 0)
        .batch(3)
        .build(&FunctionRegistry::default())
        .unwrap();
    let err = distribute(&other, cfg.clone()).unwrap_err();
    assert!(matches!(err, ClientError::PolicyMismatch(_)));
    let (ka, kb) = std::thread::scope(|s| {
        let ha = s.spawn(|| keys(&collect(&mut a)));
        let hb = s.spawn(|| keys(&collect(&mut b)));
        (ha.join().unwrap(), hb.join().unwrap())
    });
    assert!(ka.len() as u64 <= total && kb.len() as u64 <= total);
    assert_eq!(
        ka.len() as u64,
        total,
        "the leading client sees every batch"
    );
}

#[test]
fn coordinated_clients_consume_aligned_rounds() {
    let data = tempfile::tempdir().unwrap();
    dataset(
        data.path(),
        2,
        60,
        SeqLenDist::Bimodal {
            short: 16,
            long: 480,
            long_fraction: 0.2,
        },
    );
    let d = dispatcher();
    let _w1 = worker(&d);
    let _w2 = worker(&d);
    let g = Pipeline::records(data.path().to_str().unwrap(), "file", 0)
        .bucket_by_sequence_length(&[128], 2)
        .build(&FunctionRegistry::default())
        .unwrap();
    let cfg = |i| DistributeConfig {
        mode: JobMode::Coordinated,
        num_consumers: Some(2),
        consumer_index: Some(i),
        ..config(&d, ShardingPolicy::Dynamic)
    };
    let mut c0 = distribute(&g, cfg(0)).unwrap();
    let mut c1 = distribute(&g, cfg(1)).unwrap();
    let (a, b) = std::thread::scope(|s| {
        let ha = s.spawn(|| collect(&mut c0));
        let hb = s.spawn(|| collect(&mut c1));
        (ha.join().unwrap(), hb.join().unwrap())
    });
    assert_eq!(a.len(), b.len());
    assert!(a.len() >= 4);
    for (r, (x, y)) in a.iter().zip(&b).enumerate() {
        assert_eq!(x.producer_round, Some(r as u64));
        assert_eq!(y.producer_round, Some(r as u64));
        assert_eq!(x.bucket_id, y.bucket_id);
    }
    let mut all = keys(&a);
    all.extend(keys(&b));
    let unique: BTreeSet<u64> = all.iter().copied().collect();
    assert_eq!(unique.len(), all.len());
}

#[test]
fn worker_death_under_dynamic_sharding_loses_but_never_duplicates() {
    let data = tempfile::tempdir().unwrap();
    let total = dataset(data.path(), 8, 40, uniform());
    let d = dispatcher();
    let workers: Vec<Worker> = (0..3).map(|_| worker(&d)).collect();
    let mut s = distribute(&graph(data.path(), 4), config(&d, ShardingPolicy::Dynamic)).unwrap();
    let mut got = Vec::new();
    while got.len() < 10 {
        got.push(s.next_batch().unwrap().unwrap());
    }
    let victim = &workers[1];
    let id = victim.worker_id();
    let before = victim.task_progress(s.job_id()).unwrap();
    victim.kill();
    let after = victim.task_progress(s.job_id()).unwrap();
    got.extend(collect(&mut s));
    let k = keys(&got);
    let unique: BTreeSet<u64> = k.iter().copied().collect();
    assert_eq!(unique.len(), k.len(), "duplicate keys");
    let received = s.received_elements().get(&id).copied().unwrap_or(0);
    let losses = total - k.len() as u64;
    // Shards in flight at the kill, including any the victim never saw.
    let state = d.dispatcher().state();
    let job = &state.jobs[&s.job_id()];
    let lost: u64 = job
        .assignment
        .as_ref()
        .map_or(0, |a| a.lost.iter().map(|id| job.shards[id].len()).sum());
    let bound = lost.max(after.shard_remaining) + after.elements_read.saturating_sub(received);
    assert!(
        losses <= bound,
        "lost {losses}, bound {bound} ({before:?} / {after:?})"
    );
}

#[test]
fn added_worker_joins_a_running_job() {
    let data = tempfile::tempdir().unwrap();
    let total = dataset(data.path(), 2, 20, uniform());
    let d = dispatcher();
    let _w1 = worker(&d);
    let mut s = distribute(&graph(data.path(), 1), config(&d, ShardingPolicy::Off)).unwrap();
    let first = s.next_batch().unwrap().unwrap();
    let _w2 = worker(&d);
    let mut got = vec![first];
    got.extend(collect(&mut s));
    assert_eq!(s.received_elements().len(), 2);
    assert_eq!(got.len() as u64, 2 * total);
}

#[test]
fn local_reads_bypass_the_network() {
    let data = tempfile::tempdir().unwrap();
    let total = dataset(data.path(), 2, 10, uniform());
    let d = dispatcher();
    let _remote = worker(&d);
    let local = Arc::new(
        Worker::start(WorkerConfig {
            dispatcher_addr: d.addr(),
            listen_addr: None,
            heartbeat_interval: Duration::from_millis(50),
            ..Default::default()
        })
        .unwrap(),
    );
    let mut s = distribute(
        &graph(data.path(), 2),
        DistributeConfig {
            read_sources: ReadSources::Local,
            local_worker: Some(local.clone()),
            ..config(&d, ShardingPolicy::Off)
        },
    )
    .unwrap();
    let got = collect(&mut s);
    assert_eq!(keys(&got).len() as u64, total);
    assert_eq!(
        s.received_elements().keys().copied().collect::<Vec<_>>(),
        vec![local.worker_id()]
    );
}

#[test]
fn losing_every_worker_is_an_error() {
    let data = tempfile::tempdir().unwrap();
    dataset(data.path(), 4, 50, uniform());
    let d = dispatcher();
    let w = worker(&d);
    let mut s = distribute(
        &graph(data.path(), 1),
        DistributeConfig {
            lost_grace: Duration::from_millis(300),
            ..config(&d, ShardingPolicy::Dynamic)
        },
    )
    .unwrap();
    s.next_batch().unwrap().unwrap();
    w.kill();
    let err = loop {
        match s.next_batch() {
            Ok(Some(_)) => {}
            Ok(None) => panic!("job cannot finish without workers"),
            Err(e) => break e,
        }
    };
    assert_eq!(err, ClientError::AllWorkersLost);
}

#[test]
fn config_errors() {
    let g = Pipeline::range(0, 4)
        .build(&FunctionRegistry::default())
        .unwrap();
    let base = DistributeConfig {
        dispatcher_addr: "127.0.0.1:1".into(),
        ..Default::default()
    };
    let bad_index = DistributeConfig {
        mode: JobMode::Coordinated,
        num_consumers: Some(2),
        consumer_index: Some(2),
        ..base.clone()
    };
    assert!(matches!(
        distribute(&g, bad_index).unwrap_err(),
        ClientError::Config(_)
    ));
    let no_local = DistributeConfig {
        read_sources: ReadSources::Local,
        ..base.clone()
    };
    assert!(matches!(
        distribute(&g, no_local).unwrap_err(),
        ClientError::Config(_)
    ));
    let unreachable = DistributeConfig {
        rpc_timeout: Duration::from_millis(200),
        ..base
    };
    assert!(matches!(
        distribute(&g, unreachable).unwrap_err(),
        ClientError::DispatcherUnreachable(_)
    ));
}
