//! In-process experiment runner: one dispatcher, remote workers on loopback
//! ports, and client threads that simulate training steps.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{mpsc, Arc, OnceLock};
use std::thread;
use std::time::{Duration, Instant};

use parking_lot::Mutex;
use prepserve::client::{distribute, DistributeConfig, ReadSources};
use prepserve::dispatcher::{
    read_journal, Dispatcher, DispatcherConfig, DispatcherServer, Event, JobStatus, SystemClock,
};
use prepserve::pipeline::{burn, DatasetGraph, FunctionRegistry, Pipeline};
use prepserve::records::{element_key, generate_synthetic, Manifest};
use prepserve::wire::{JobMode, ShardingPolicy};
use prepserve::worker::{TaskProgress, Worker, WorkerConfig};

use crate::config::{ClientStart, ExperimentConfig, FailureSpec, Target, Trigger};
use crate::cost::{cost, CostParams};
use crate::HarnessError;

/// Burn iterations per millisecond on this host, measured once.
pub fn calibrate() -> f64 {
    static RATE: OnceLock<f64> = OnceLock::new();
    *RATE.get_or_init(|| {
        let iters = 200_000;
        let best = (0..5)
            .map(|_| {
                let t = Instant::now();
                burn(&[7], iters);
                t.elapsed()
            })
            .min()
            .unwrap_or(Duration::from_millis(1));
        iters as f64 / (best.as_secs_f64() * 1e3).max(1e-6)
    })
}

/// Burn iterations standing in for `ms` of preprocessing per element.
pub fn busy_iterations(ms: f64) -> u64 {
    (ms * calibrate()).round() as u64
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClientMetrics {
    pub batches: u64,
    pub elements: u64,
    pub elapsed: Duration,
    pub throughput_bps: f64,
    /// Elements received per worker id.
    pub received: BTreeMap<u64, u64>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FailureRecord {
    pub spec: FailureSpec,
    pub fired_at: Duration,
    pub consumed_elements: u64,
    pub worker_id: Option<u64>,
    /// The victim's task after the kill.
    pub progress: Option<TaskProgress>,
    pub restarted_as: Option<u64>,
    /// Dispatcher restarts: whether the restarted state equals the fold of
    /// its journal.
    pub recovery_matches: Option<bool>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub experiment_id: String,
    pub n_workers: usize,
    pub n_clients: usize,
    pub seed: u64,
    pub busy_iterations: u64,
    pub clients: Vec<ClientMetrics>,
    /// Sum of the per-client throughputs, in batches per second.
    pub throughput_bps: f64,
    /// Longest client run.
    pub job_time: Duration,
    pub dataset_elements: u64,
    pub elements_produced: u64,
    pub batches_produced: u64,
    /// Consumptions beyond one per key and epoch. Shared clients are
    /// counted separately, other clients together.
    pub duplicates: u64,
    /// Keys consumed fewer times than there are epochs.
    pub losses: u64,
    /// Upper bound on losses implied by the worker kills.
    pub loss_bound: Option<u64>,
    pub evictions: u64,
    pub padding_waste: u64,
    /// Padding across clients for each step index.
    pub padding_waste_per_round: Vec<u64>,
    /// Steps every client completed.
    pub rounds: u64,
    /// Steps whose batches came from more than one bucket.
    pub round_bucket_violations: u64,
    /// Mean over steps of the largest minus the smallest simulated step.
    pub mean_step_spread_ms: f64,
    pub worker_cpu_utilization: f64,
    pub cost: f64,
    pub failures: Vec<FailureRecord>,
    /// Every dispatcher restart and the final state matched their journal.
    pub recovery_consistent: bool,
    pub job_completed: bool,
    pub events: Vec<String>,
    /// `(seconds since start, batches consumed)`.
    pub timeline: Vec<(f64, u64)>,
}

impl MetricsReport {
    /// Clients that stopped on an error.
    pub fn client_errors(&self) -> Vec<&str> {
        self.clients
            .iter()
            .filter_map(|c| c.error.as_deref())
            .collect()
    }
}

/// Processes of one run.
pub struct Topology {
    dispatcher: Mutex<Option<DispatcherServer>>,
    dispatcher_addr: String,
    dispatcher_config: DispatcherConfig,
    worker_config: WorkerConfig,
    workers: Mutex<Vec<Arc<Worker>>>,
    killed: Mutex<Vec<Arc<Worker>>>,
    locals: Vec<Arc<Worker>>,
}

impl Topology {
    pub fn launch(config: &ExperimentConfig, dir: &Path) -> Result<Self, HarnessError> {
        let dispatcher_config = DispatcherConfig {
            journal_path: Some(dir.join("dispatcher.journal")),
            fsync: true,
            heartbeat_interval: config.heartbeat,
            worker_timeout: Some(config.worker_timeout),
        };
        let d = DispatcherServer::start("127.0.0.1:0", dispatcher_config.clone())
            .map_err(|e| HarnessError::LaunchFailure(format!("dispatcher: {e}")))?;
        let dispatcher_addr = d.addr();
        let worker_config = WorkerConfig {
            dispatcher_addr: dispatcher_addr.clone(),
            heartbeat_interval: config.heartbeat,
            buffer_batches: config.worker_buffer,
            window_batches: config.window_batches,
            compression: config.compression,
            ..Default::default()
        };
        let start = |listen: Option<String>| {
            Worker::start(WorkerConfig {
                listen_addr: listen,
                ..worker_config.clone()
            })
            .map(Arc::new)
            .map_err(|e| HarnessError::LaunchFailure(format!("worker: {e}")))
        };
        let workers = (0..config.workers)
            .map(|_| start(Some("127.0.0.1:0".into())))
            .collect::<Result<Vec<_>, _>>()?;
        let locals = if config.colocated {
            (0..config.clients)
                .map(|_| start(None))
                .collect::<Result<Vec<_>, _>>()?
        } else {
            Vec::new()
        };
        Ok(Self {
            dispatcher: Mutex::new(Some(d)),
            dispatcher_addr,
            dispatcher_config,
            worker_config,
            workers: Mutex::new(workers),
            killed: Mutex::new(Vec::new()),
            locals,
        })
    }

    pub fn dispatcher_addr(&self) -> &str {
        &self.dispatcher_addr
    }

    pub fn journal_path(&self) -> PathBuf {
        self.dispatcher_config
            .journal_path
            .clone()
            .expect("harness dispatchers journal")
    }

    /// Current incarnation of every remote worker slot.
    pub fn workers(&self) -> Vec<Arc<Worker>> {
        self.workers.lock().clone()
    }

    /// Every remote worker ever started, killed ones included.
    fn all_remote(&self) -> Vec<Arc<Worker>> {
        let mut all = self.killed.lock().clone();
        all.extend(self.workers());
        all
    }

    /// Kills the target now. For workers the record carries the task
    /// progress of `job_id` taken after the kill.
    pub fn inject_failure(
        &self,
        target: Target,
        job_id: Option<u64>,
    ) -> Result<FailureRecord, HarnessError> {
        let mut rec = FailureRecord {
            spec: FailureSpec {
                target,
                trigger: Trigger::Elements(0),
                restart_after: None,
            },
            fired_at: Duration::ZERO,
            consumed_elements: 0,
            worker_id: None,
            progress: None,
            restarted_as: None,
            recovery_matches: None,
        };
        match target {
            Target::Worker(i) => {
                let w = self
                    .workers
                    .lock()
                    .get(i)
                    .cloned()
                    .ok_or_else(|| HarnessError::UnknownTarget(format!("worker {i}")))?;
                if w.is_stopped() {
                    return Err(HarnessError::UnknownTarget(format!("worker {i} is down")));
                }
                w.kill();
                rec.worker_id = Some(w.worker_id());
                rec.progress = job_id.and_then(|j| w.task_progress(j));
                self.killed.lock().push(w);
            }
            Target::Dispatcher => {
                let d = self
                    .dispatcher
                    .lock()
                    .take()
                    .ok_or_else(|| HarnessError::UnknownTarget("dispatcher is down".into()))?;
                d.shutdown();
            }
        }
        Ok(rec)
    }

    /// Brings a killed target back. Workers return on a fresh port, hence
    /// with a new id, which is returned. Dispatchers return on the same
    /// address after checking that recovery reproduces the journal fold.
    pub fn restart(&self, target: Target) -> Result<(Option<u64>, Option<bool>), HarnessError> {
        match target {
            Target::Worker(i) => {
                let w = Arc::new(
                    Worker::start(self.worker_config.clone())
                        .map_err(|e| HarnessError::LaunchFailure(format!("worker: {e}")))?,
                );
                let id = w.worker_id();
                let mut ws = self.workers.lock();
                let slot = ws
                    .get_mut(i)
                    .ok_or_else(|| HarnessError::UnknownTarget(format!("worker {i}")))?;
                *slot = w;
                Ok((Some(id), None))
            }
            Target::Dispatcher => {
                let path = self.journal_path();
                let folded = Dispatcher::recover(&path)
                    .map_err(|e| HarnessError::LaunchFailure(format!("recover: {e}")))?
                    .canonical_dump();
                let opened = Dispatcher::open(
                    self.dispatcher_config.clone(),
                    Arc::new(SystemClock::default()),
                )
                .map_err(|e| HarnessError::LaunchFailure(format!("reopen: {e}")))?
                .state_dump();
                let deadline = Instant::now() + Duration::from_secs(5);
                let d = loop {
                    match DispatcherServer::start(
                        &self.dispatcher_addr,
                        self.dispatcher_config.clone(),
                    ) {
                        Ok(d) => break d,
                        Err(e) if Instant::now() > deadline => {
                            return Err(HarnessError::LaunchFailure(format!("dispatcher: {e}")))
                        }
                        Err(_) => thread::sleep(Duration::from_millis(20)),
                    }
                };
                *self.dispatcher.lock() = Some(d);
                Ok((None, Some(folded == opened)))
            }
        }
    }

    /// Stops everything. Returns the final dispatcher state dump and whether
    /// it equals the fold of the journal.
    pub fn teardown(&self) -> Option<(prepserve::dispatcher::DispatcherState, bool)> {
        for w in self.all_remote().iter().chain(&self.locals) {
            w.kill();
        }
        let d = self.dispatcher.lock().take()?;
        d.shutdown();
        let state = d.dispatcher().state();
        let matches = Dispatcher::recover(&self.journal_path())
            .map(|s| s.canonical_dump() == state.canonical_dump())
            .unwrap_or(false);
        Some((state, matches))
    }
}

impl Drop for Topology {
    fn drop(&mut self) {
        self.teardown();
    }
}

#[derive(Default)]
struct Progress {
    elements: AtomicU64,
    batches: AtomicU64,
    job_id: OnceLock<u64>,
    stop: AtomicBool,
}

struct StepLog {
    padded_len: u32,
    bucket: Option<u32>,
    waste: u64,
}

struct ClientOutcome {
    keys: Vec<u64>,
    steps: Vec<StepLog>,
    job_id: Option<u64>,
    metrics: ClientMetrics,
}

/// The pipeline every worker runs for `config`.
pub fn build_graph(config: &ExperimentConfig, data: &Path) -> Result<DatasetGraph, HarnessError> {
    let dir = data
        .to_str()
        .ok_or_else(|| HarnessError::Config("dataset path is not UTF-8".into()))?;
    let mut p = Pipeline::records(dir, "file", 0);
    if config.shuffle_buffer > 0 {
        p = p.shuffle(config.shuffle_buffer, config.dataset.seed);
    }
    let iters = busy_iterations(config.busy_work_ms);
    if iters > 0 {
        p = p.map_with("burn", iters, 1);
    }
    p = if config.boundaries.is_empty() {
        p.batch(config.batch_size)
    } else {
        p.bucket_by_sequence_length(&config.boundaries, config.batch_size)
    };
    if config.epochs > 1 {
        p = p.repeat(config.epochs);
    }
    if config.ideal {
        p = p.take(1).cache().repeat(0);
    }
    p.build(&FunctionRegistry::default())
        .map_err(|e| HarnessError::Config(e.to_string()))
}

fn run_client(
    index: usize,
    config: &ExperimentConfig,
    graph: &DatasetGraph,
    topo: &Topology,
    progress: &Progress,
) -> ClientOutcome {
    let start = Instant::now();
    let coordinated = config.mode == JobMode::Coordinated;
    let local = topo.locals.get(index).cloned();
    let read_sources = match (&local, config.workers) {
        (None, _) => ReadSources::Remote,
        (Some(_), 0) => ReadSources::Local,
        (Some(_), _) => ReadSources::Both,
    };
    let dc = DistributeConfig {
        dispatcher_addr: topo.dispatcher_addr.clone(),
        job_name: config.job_name.clone(),
        policy: config.policy,
        mode: config.mode,
        read_sources,
        compression: config.compression,
        num_consumers: coordinated.then_some(config.clients as u32),
        consumer_index: coordinated.then_some(index as u32),
        buffer_capacity: config.client_buffer,
        local_worker: local,
        poll_interval: Duration::from_millis(20),
        injected_latency: config.latency,
        ..Default::default()
    };
    let mut out = ClientOutcome {
        keys: Vec::new(),
        steps: Vec::new(),
        job_id: None,
        metrics: ClientMetrics {
            batches: 0,
            elements: 0,
            elapsed: Duration::ZERO,
            throughput_bps: 0.0,
            received: BTreeMap::new(),
            error: None,
        },
    };
    let mut stream = match distribute(graph, dc) {
        Ok(s) => s,
        Err(e) => {
            out.metrics.error = Some(e.to_string());
            return out;
        }
    };
    out.job_id = Some(stream.job_id());
    let _ = progress.job_id.set(stream.job_id());
    let max_len = f64::from(config.max_seq_len().max(1));
    loop {
        if progress.stop.load(Ordering::Acquire)
            || config.max_batches.is_some_and(|n| out.metrics.batches >= n)
            || config.duration.is_some_and(|d| start.elapsed() >= d)
        {
            break;
        }
        match stream.next_batch() {
            Ok(Some(b)) => {
                let n = b.len() as u64;
                out.keys.extend(b.keys());
                out.steps.push(StepLog {
                    padded_len: b.padded_len,
                    bucket: b.bucket_id,
                    waste: b.padding_waste(),
                });
                out.metrics.batches += 1;
                out.metrics.elements += n;
                progress.elements.fetch_add(n, Ordering::AcqRel);
                progress.batches.fetch_add(1, Ordering::AcqRel);
                if config.step_ms > 0.0 {
                    let step = config.step_ms * f64::from(b.padded_len) / max_len;
                    thread::sleep(Duration::from_secs_f64(step / 1e3));
                }
            }
            Ok(None) => break,
            Err(e) => {
                out.metrics.error = Some(e.to_string());
                break;
            }
        }
    }
    out.metrics.elapsed = start.elapsed();
    let secs = out.metrics.elapsed.as_secs_f64();
    out.metrics.throughput_bps = if secs > 0.0 {
        out.metrics.batches as f64 / secs
    } else {
        0.0
    };
    out.metrics.received = stream.received_elements();
    stream.close();
    out
}

struct Monitor {
    records: Vec<FailureRecord>,
    events: Vec<String>,
    timeline: Vec<(f64, u64)>,
}

fn monitor(
    config: &ExperimentConfig,
    topo: &Topology,
    progress: &Progress,
    done: &AtomicBool,
    total_elements: u64,
    start: Instant,
) -> Monitor {
    let mut m = Monitor {
        records: Vec::new(),
        events: Vec::new(),
        timeline: vec![(0.0, 0)],
    };
    let mut pending: Vec<FailureSpec> = config.failures.clone();
    let mut restarts: Vec<(Instant, usize)> = Vec::new();
    let mut next_sample = start + Duration::from_millis(100);
    loop {
        let finished = done.load(Ordering::Acquire);
        let now = Instant::now();
        let consumed = progress.elements.load(Ordering::Acquire);
        if now >= next_sample {
            m.timeline.push((
                (now - start).as_secs_f64(),
                progress.batches.load(Ordering::Acquire),
            ));
            next_sample += Duration::from_millis(100);
        }
        let mut i = 0;
        while !finished && i < pending.len() {
            let f = pending[i];
            let fire = match f.trigger {
                Trigger::Fraction(p) => consumed as f64 >= p * total_elements as f64,
                Trigger::Elements(n) => consumed >= n,
                Trigger::Elapsed(d) => now - start >= d,
            };
            if !fire {
                i += 1;
                continue;
            }
            pending.remove(i);
            match topo.inject_failure(f.target, progress.job_id.get().copied()) {
                Ok(mut rec) => {
                    rec.spec = f;
                    rec.fired_at = now - start;
                    rec.consumed_elements = consumed;
                    m.events.push(format!(
                        "{:.3}s killed {f} after {consumed} elements",
                        rec.fired_at.as_secs_f64()
                    ));
                    if let Some(d) = f.restart_after {
                        restarts.push((Instant::now() + d, m.records.len()));
                    }
                    m.records.push(rec);
                }
                Err(e) => m.events.push(format!("failure {f} not injected: {e}")),
            }
        }
        let mut j = 0;
        while j < restarts.len() {
            let (at, idx) = restarts[j];
            if Instant::now() < at {
                j += 1;
                continue;
            }
            restarts.remove(j);
            let target = m.records[idx].spec.target;
            match topo.restart(target) {
                Ok((id, matches)) => {
                    m.records[idx].restarted_as = id;
                    m.records[idx].recovery_matches = matches;
                    m.events.push(format!(
                        "{:.3}s restarted {}",
                        start.elapsed().as_secs_f64(),
                        m.records[idx].spec
                    ));
                }
                Err(e) => m.events.push(format!("restart failed: {e}")),
            }
        }
        if finished && restarts.is_empty() {
            break;
        }
        thread::sleep(Duration::from_millis(5));
    }
    m
}

/// Visitation counts against the dataset for one group of consumed keys.
fn visitation(expected: &BTreeSet<u64>, epochs: u64, keys: &[u64]) -> (u64, u64) {
    let mut counts: BTreeMap<u64, u64> = BTreeMap::new();
    for k in keys {
        *counts.entry(*k).or_default() += 1;
    }
    let duplicates = counts.values().map(|c| c.saturating_sub(epochs)).sum();
    let losses = expected
        .iter()
        .map(|k| epochs.saturating_sub(counts.get(k).copied().unwrap_or(0)))
        .sum();
    (duplicates, losses)
}

/// Runs one experiment end to end in this process.
pub fn run_experiment(config: &ExperimentConfig) -> Result<MetricsReport, HarnessError> {
    config.validate()?;
    let dir = tempfile::tempdir().map_err(|e| HarnessError::Io(e.to_string()))?;
    let data = dir.path().join("data");
    let manifest: Manifest = generate_synthetic(&config.dataset, &data)
        .map_err(|e| HarnessError::LaunchFailure(format!("dataset: {e}")))?;
    let graph = build_graph(config, &data)?;
    let topo = Topology::launch(config, dir.path())?;
    let progress = Progress::default();
    let done = AtomicBool::new(false);
    let total = manifest.total_records() * config.epochs;
    let start = Instant::now();

    let (outcomes, mon, timed_out) = thread::scope(|s| {
        let mon = s.spawn(|| monitor(config, &topo, &progress, &done, total, start));
        let (tx, rx) = mpsc::channel();
        let driver = {
            let (topo, progress, graph) = (&topo, &progress, &graph);
            s.spawn(move || {
                let mut outs: Vec<(usize, ClientOutcome)> = match config.client_start {
                    ClientStart::Concurrent => thread::scope(|cs| {
                        let hs: Vec<_> = (0..config.clients)
                            .map(|i| cs.spawn(move || run_client(i, config, graph, topo, progress)))
                            .collect();
                        hs.into_iter()
                            .enumerate()
                            .map(|(i, h)| (i, h.join().expect("client thread panicked")))
                            .collect()
                    }),
                    ClientStart::Sequential => (0..config.clients)
                        .map(|i| (i, run_client(i, config, graph, topo, progress)))
                        .collect(),
                };
                outs.sort_by_key(|(i, _)| *i);
                let _ = tx.send(());
                outs.into_iter().map(|(_, o)| o).collect::<Vec<_>>()
            })
        };
        let timed_out = rx.recv_timeout(config.timeout).is_err();
        if timed_out {
            progress.stop.store(true, Ordering::Release);
            for w in topo.all_remote().iter().chain(&topo.locals) {
                w.kill();
            }
            if let Some(d) = topo.dispatcher.lock().as_ref() {
                d.shutdown();
            }
        }
        let outcomes = driver.join().expect("client driver panicked");
        done.store(true, Ordering::Release);
        (outcomes, mon.join().expect("monitor panicked"), timed_out)
    });
    if timed_out {
        return Err(HarnessError::Timeout(config.timeout));
    }

    let job_ids: BTreeSet<u64> = outcomes.iter().filter_map(|o| o.job_id).collect();
    let remote = topo.all_remote();
    let (mut elements_produced, mut batches_produced, mut evictions) = (0, 0, 0);
    let mut cpu = Duration::ZERO;
    for w in remote.iter().chain(&topo.locals) {
        for j in &job_ids {
            if let Some(p) = w.task_progress(*j) {
                elements_produced += p.elements_read;
                batches_produced += p.batches_produced;
            }
            if let Ok(s) = w.cache_stats(*j) {
                evictions += s.evictions;
            }
        }
    }
    for w in &remote {
        cpu += w.cpu_time();
    }
    let final_state = topo.teardown();

    let job_time = outcomes
        .iter()
        .map(|o| o.metrics.elapsed)
        .max()
        .unwrap_or_default();
    let expected: BTreeSet<u64> = manifest
        .files
        .iter()
        .enumerate()
        .flat_map(|(fi, f)| (0..f.count).map(move |o| element_key(fi as u32, o)))
        .collect();
    let (mut duplicates, mut losses) = (0, 0);
    if !config.ideal {
        let views: Vec<Vec<u64>> = if config.mode == JobMode::Shared {
            outcomes.iter().map(|o| o.keys.clone()).collect()
        } else {
            vec![outcomes
                .iter()
                .flat_map(|o| o.keys.iter().copied())
                .collect()]
        };
        for v in &views {
            let (d, l) = visitation(&expected, config.epochs, v);
            duplicates += d;
            losses += l;
        }
    }
    let kills: Vec<&FailureRecord> = mon
        .records
        .iter()
        .filter(|r| matches!(r.spec.target, Target::Worker(_)))
        .collect();
    // Everything the dispatcher handed a killed worker, minus what reached a
    // client. This covers splits that were in flight when the worker died.
    let journal = read_journal(&topo.journal_path()).unwrap_or_default();
    let loss_bound = (!kills.is_empty()).then(|| {
        kills
            .iter()
            .map(|r| {
                let id = r.worker_id.unwrap_or(u64::MAX);
                let received: u64 = outcomes
                    .iter()
                    .filter_map(|o| o.metrics.received.get(&id))
                    .sum();
                let shard_len = |job: &u64, shard: &u64| {
                    final_state
                        .as_ref()
                        .and_then(|(st, _)| st.jobs.get(job)?.shards.get(shard))
                        .map_or(0, |sh| sh.len())
                };
                let assigned: u64 = journal
                    .iter()
                    .map(|rec| match &rec.event {
                        Event::SplitAssigned {
                            job_id,
                            worker_id,
                            shard_id,
                        } if *worker_id == id => shard_len(job_id, shard_id),
                        Event::TaskCreated {
                            job_id,
                            worker_id,
                            static_shards,
                            ..
                        } if *worker_id == id => {
                            if config.policy == ShardingPolicy::Off {
                                manifest.total_records() * config.epochs
                            } else {
                                static_shards.iter().map(|sh| shard_len(job_id, sh)).sum()
                            }
                        }
                        _ => 0,
                    })
                    .sum();
                assigned.saturating_sub(received)
            })
            .sum()
    });

    let rounds = outcomes.iter().map(|o| o.steps.len()).min().unwrap_or(0);
    let max_len = f64::from(config.max_seq_len().max(1));
    let step_unit = if config.step_ms > 0.0 {
        config.step_ms
    } else {
        1.0
    };
    let (mut violations, mut spread_sum) = (0, 0.0);
    let mut padding_waste_per_round = Vec::with_capacity(rounds);
    for r in 0..rounds {
        let steps: Vec<&StepLog> = outcomes.iter().map(|o| &o.steps[r]).collect();
        let buckets: BTreeSet<Option<u32>> = steps.iter().map(|s| s.bucket).collect();
        if buckets.len() > 1 {
            violations += 1;
        }
        let lens = steps.iter().map(|s| f64::from(s.padded_len));
        let (lo, hi) = lens.fold((f64::MAX, 0.0f64), |(lo, hi), l| (lo.min(l), hi.max(l)));
        spread_sum += step_unit * (hi - lo) / max_len;
        padding_waste_per_round.push(steps.iter().map(|s| s.waste).sum());
    }
    let padding_waste = outcomes
        .iter()
        .flat_map(|o| o.steps.iter().map(|s| s.waste))
        .sum();

    let hours = job_time.as_secs_f64() / 3600.0;
    let utilization = if config.workers > 0 && job_time > Duration::ZERO {
        cpu.as_secs_f64() / (config.workers as f64 * job_time.as_secs_f64())
    } else {
        0.0
    };
    let cost = cost(&CostParams::open_source(
        hours,
        config.workers,
        config.clients,
        utilization,
    ))
    .map_err(|e| HarnessError::Config(e.to_string()))?;

    let (job_completed, final_matches) = match &final_state {
        Some((state, matches)) => (
            !job_ids.is_empty()
                && job_ids.iter().all(|j| {
                    state
                        .jobs
                        .get(j)
                        .is_some_and(|s| s.status == JobStatus::Completed)
                }),
            *matches,
        ),
        None => (false, false),
    };
    let recovery_consistent = final_matches
        && mon
            .records
            .iter()
            .all(|r| r.recovery_matches != Some(false));
    let clients: Vec<ClientMetrics> = outcomes.into_iter().map(|o| o.metrics).collect();
    let mut events = mon.events;
    for (i, c) in clients.iter().enumerate() {
        if let Some(e) = &c.error {
            events.push(format!("client {i} stopped: {e}"));
        }
    }
    Ok(MetricsReport {
        experiment_id: config.experiment_id.clone(),
        n_workers: config.workers,
        n_clients: config.clients,
        seed: config.dataset.seed,
        busy_iterations: busy_iterations(config.busy_work_ms),
        throughput_bps: clients.iter().map(|c| c.throughput_bps).sum(),
        clients,
        job_time,
        dataset_elements: manifest.total_records(),
        elements_produced,
        batches_produced,
        duplicates,
        losses,
        loss_bound,
        evictions,
        padding_waste,
        padding_waste_per_round,
        rounds: rounds as u64,
        round_bucket_violations: violations,
        mean_step_spread_ms: if rounds > 0 {
            spread_sum / rounds as f64
        } else {
            0.0
        },
        worker_cpu_utilization: utilization,
        cost,
        failures: mon.records,
        recovery_consistent,
        job_completed,
        events,
        timeline: mon.timeline,
    })
}

/// Runs `base` once per worker count, labelling each run `<id>-w<n>`.
pub fn sweep(
    base: &ExperimentConfig,
    worker_counts: &[usize],
) -> Result<Vec<MetricsReport>, HarnessError> {
    worker_counts
        .iter()
        .map(|&n| {
            run_experiment(&ExperimentConfig {
                experiment_id: format!("{}-w{n}", base.experiment_id),
                workers: n,
                ..base.clone()
            })
        })
        .collect()
}
