use std::path::Path;
use std::sync::atomic::{AtomicBool, AtomicU64, AtomicU8, Ordering};
use std::sync::Arc;
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use crossbeam_channel::{bounded, Receiver, RecvTimeoutError, SendTimeoutError, Sender};
use parking_lot::{Condvar, Mutex};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::cache::{CacheRead, SlidingWindowCache};
use super::coordinated::{RoundRead, RoundRobinState};
use crate::pipeline::{
    instantiate, optimize, Batch, DatasetGraph, ElementSource, ElementStream, ExecOptions,
    FunctionRegistry, PipelineError, SourceKind, StreamStats,
};
use crate::records::{enumerate_shards, Granularity, ShardReader, ShardSpec};
use crate::wire::{
    codes, CacheStats, ElementResult, Endpoint, GetElement, JobMode, Message, ShardingPolicy,
    TaskSpec, TaskState, WireError,
};

/// Settings a task inherits from its worker.
#[derive(Clone)]
pub(crate) struct TaskEnv {
    pub dispatcher: Arc<Endpoint>,
    pub worker_id: Arc<AtomicU64>,
    pub registry: Arc<FunctionRegistry>,
    pub rpc_timeout: Duration,
    pub buffer_batches: usize,
    pub window_batches: usize,
    pub pending_wait: Duration,
    pub shared_lookahead: u64,
    pub rounds_ahead: usize,
}

#[derive(Debug, Default)]
struct Counters {
    batches_produced: AtomicU64,
    batches_served: AtomicU64,
    elements_served: AtomicU64,
    shard_len: AtomicU64,
    shard_read: AtomicU64,
    shards_started: AtomicU64,
    cpu_ns: AtomicU64,
}

/// Point-in-time view of a task.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TaskProgress {
    pub job_id: u64,
    pub state: TaskState,
    pub elements_read: u64,
    pub batches_produced: u64,
    pub batches_served: u64,
    pub elements_served: u64,
    pub shards_started: u64,
    /// Unread elements of the shard currently being processed.
    pub shard_remaining: u64,
    pub buffered_batches: u64,
    pub cpu_time: Duration,
}

struct SharedSlot {
    cache: SlidingWindowCache,
    exhausted: bool,
}

enum Output {
    Independent {
        tx: Mutex<Option<Sender<Batch>>>,
        rx: Receiver<Batch>,
    },
    Shared {
        slot: Mutex<SharedSlot>,
        cv: Condvar,
    },
    Coordinated {
        slot: Mutex<RoundRobinState>,
        cv: Condvar,
    },
}

const RUNNING: u8 = 0;
const PRODUCED: u8 = 1;
const FAILED: u8 = 2;

/// One job's execution on one worker: a producer thread pulling the
/// instantiated stream and an output stage serving reads.
pub struct TaskRuntime {
    spec: TaskSpec,
    env: TaskEnv,
    output: Output,
    phase: AtomicU8,
    stop: AtomicBool,
    counters: Counters,
    stats: Mutex<Option<Arc<StreamStats>>>,
    error: Mutex<Option<String>>,
    producer: Mutex<Option<JoinHandle<()>>>,
}

impl std::fmt::Debug for TaskRuntime {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("TaskRuntime")
            .field("job_id", &self.spec.job_id)
            .field("mode", &self.spec.mode)
            .finish()
    }
}

fn task_seed(spec: &TaskSpec, worker_id: u64) -> u64 {
    let mut b = spec.job_id.to_le_bytes().to_vec();
    b.extend_from_slice(&worker_id.to_le_bytes());
    crate::fnv1a64(&b)
}

fn thread_cpu_ns() -> u64 {
    let mut ts = libc::timespec {
        tv_sec: 0,
        tv_nsec: 0,
    };
    // SAFETY: clock_gettime only writes into the provided timespec.
    let rc = unsafe { libc::clock_gettime(libc::CLOCK_THREAD_CPUTIME_ID, &mut ts) };
    if rc != 0 {
        return 0;
    }
    ts.tv_sec as u64 * 1_000_000_000 + ts.tv_nsec as u64
}

enum ShardFeed {
    Fixed { shards: Vec<ShardSpec>, pos: usize },
    Dynamic(Arc<TaskRuntime>),
}

/// Reads shards back to back, tracking progress through the current one.
struct ShardChain {
    feed: ShardFeed,
    current: Option<ShardReader>,
    task: Arc<TaskRuntime>,
}

impl ShardChain {
    fn next_shard(&mut self) -> Result<Option<ShardSpec>, PipelineError> {
        match &mut self.feed {
            ShardFeed::Fixed { shards, pos } => {
                let s = shards.get(*pos).cloned();
                *pos += 1;
                Ok(s)
            }
            ShardFeed::Dynamic(task) => task.fetch_split(),
        }
    }
}

impl ElementSource for ShardChain {
    fn next_element(&mut self) -> Result<Option<crate::pipeline::Element>, PipelineError> {
        let task = self.task.clone();
        let c = &task.counters;
        loop {
            if let Some(r) = self.current.as_mut() {
                if let Some(e) = r.next_element()? {
                    c.shard_read.fetch_add(1, Ordering::Relaxed);
                    return Ok(Some(e));
                }
                self.current = None;
            }
            match self.next_shard()? {
                Some(s) => {
                    c.shard_read.store(0, Ordering::Relaxed);
                    c.shard_len.store(s.len(), Ordering::Relaxed);
                    c.shards_started.fetch_add(1, Ordering::Relaxed);
                    self.current = Some(ShardReader::new(s));
                }
                None => return Ok(None),
            }
        }
    }

    fn reset(&mut self) -> Result<bool, PipelineError> {
        match &mut self.feed {
            ShardFeed::Fixed { pos, .. } => {
                *pos = 0;
                self.current = None;
                Ok(true)
            }
            ShardFeed::Dynamic(_) => Ok(false),
        }
    }
}

impl TaskRuntime {
    /// Instantiates the task and starts its producer. Instantiation failures
    /// yield a task in the failed state, reported through heartbeats.
    pub(crate) fn start(spec: TaskSpec, env: TaskEnv) -> Arc<Self> {
        let output = match spec.mode {
            JobMode::Independent => {
                let (tx, rx) = bounded(env.buffer_batches.max(1));
                Output::Independent {
                    tx: Mutex::new(Some(tx)),
                    rx,
                }
            }
            JobMode::Shared => Output::Shared {
                slot: Mutex::new(SharedSlot {
                    cache: SlidingWindowCache::new(env.window_batches.max(1)),
                    exhausted: false,
                }),
                cv: Condvar::new(),
            },
            JobMode::Coordinated => Output::Coordinated {
                slot: Mutex::new(RoundRobinState::new(
                    u64::from(spec.num_workers.max(1)),
                    spec.num_consumers.max(1) as usize,
                    u64::from(spec.worker_index.min(spec.num_workers.saturating_sub(1))),
                )),
                cv: Condvar::new(),
            },
        };
        let task = Arc::new(Self {
            spec,
            env,
            output,
            phase: AtomicU8::new(RUNNING),
            stop: AtomicBool::new(false),
            counters: Counters::default(),
            stats: Mutex::new(None),
            error: Mutex::new(None),
            producer: Mutex::new(None),
        });
        match task.build_stream() {
            Ok(stream) => {
                *task.stats.lock() = Some(stream.stats());
                let t = task.clone();
                let handle = thread::Builder::new()
                    .name(format!("task-{}", task.spec.job_id))
                    .spawn(move || t.run_producer(stream))
                    .expect("spawn producer thread");
                *task.producer.lock() = Some(handle);
            }
            Err(e) => {
                log::error!("task for job {} failed to start: {e}", task.spec.job_id);
                task.fail(e.to_string());
                task.close_output();
            }
        }
        task
    }

    pub fn spec(&self) -> &TaskSpec {
        &self.spec
    }

    pub fn job_id(&self) -> u64 {
        self.spec.job_id
    }

    fn build_stream(self: &Arc<Self>) -> Result<ElementStream, PipelineError> {
        let graph = optimize(&DatasetGraph::from_bytes(&self.spec.graph)?);
        let worker_id = self.env.worker_id.load(Ordering::Relaxed);
        let seed = task_seed(&self.spec, worker_id);
        let source: Box<dyn ElementSource> = match graph.source().source_kind()? {
            SourceKind::Range { .. } => {
                if self.spec.policy != ShardingPolicy::Off {
                    return Err(PipelineError::MalformedSpec(
                        "range sources cannot be sharded".into(),
                    ));
                }
                Box::new(crate::pipeline::VecSource::new(Vec::new()))
            }
            SourceKind::Records {
                dir,
                granularity,
                shards,
            } => {
                let feed = match self.spec.policy {
                    ShardingPolicy::Off => {
                        let g = Granularity::parse(&granularity).ok_or_else(|| {
                            PipelineError::MalformedSpec(format!("granularity {granularity:?}"))
                        })?;
                        let mut all = enumerate_shards(Path::new(&dir), g, shards as usize)
                            .map_err(|e| PipelineError::Source(e.to_string()))?;
                        all.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
                        ShardFeed::Fixed {
                            shards: all,
                            pos: 0,
                        }
                    }
                    ShardingPolicy::Static => ShardFeed::Fixed {
                        shards: self.spec.static_shards.clone(),
                        pos: 0,
                    },
                    ShardingPolicy::Dynamic => ShardFeed::Dynamic(self.clone()),
                };
                Box::new(ShardChain {
                    feed,
                    current: None,
                    task: self.clone(),
                })
            }
        };
        instantiate(
            &graph,
            source,
            seed,
            &self.env.registry,
            ExecOptions::default(),
        )
    }

    /// Asks the dispatcher for the next split, retrying through dispatcher
    /// outages and re-registration.
    fn fetch_split(&self) -> Result<Option<ShardSpec>, PipelineError> {
        let mut backoff = Duration::from_millis(20);
        loop {
            if self.stop.load(Ordering::Acquire) {
                return Err(PipelineError::Source("task stopped".into()));
            }
            let req = Message::GetSplit {
                job_id: self.spec.job_id,
                worker_id: self.env.worker_id.load(Ordering::Acquire),
            };
            match self.env.dispatcher.call(&req, self.env.rpc_timeout) {
                Ok(Message::SplitResponse(s)) => return Ok(s),
                Ok(other) => {
                    return Err(PipelineError::Source(format!(
                        "unexpected split response {:#06x}",
                        other.msg_type()
                    )))
                }
                Err(WireError::RemoteError { code, .. }) if code == codes::UNKNOWN_JOB => {
                    return Ok(None)
                }
                Err(WireError::RemoteError { code, detail }) if code != codes::UNKNOWN_WORKER => {
                    return Err(PipelineError::Source(detail))
                }
                Err(e) => {
                    log::debug!("get_split for job {} failed: {e}", self.spec.job_id);
                    thread::sleep(backoff);
                    backoff = (backoff * 2).min(Duration::from_secs(1));
                }
            }
        }
    }

    fn fail(&self, reason: String) {
        *self.error.lock() = Some(reason);
        self.phase.store(FAILED, Ordering::Release);
    }

    pub fn error(&self) -> Option<String> {
        self.error.lock().clone()
    }

    fn run_producer(self: Arc<Self>, mut stream: ElementStream) {
        let start_cpu = thread_cpu_ns();
        let result = self.produce(&mut stream, start_cpu);
        self.counters
            .cpu_ns
            .store(thread_cpu_ns().saturating_sub(start_cpu), Ordering::Relaxed);
        match result {
            Ok(()) if !self.stop.load(Ordering::Acquire) => {
                self.phase.store(PRODUCED, Ordering::Release);
                log::debug!("task for job {} produced all data", self.spec.job_id);
            }
            Ok(()) => {}
            Err(e) if self.stop.load(Ordering::Acquire) => {
                log::debug!("task for job {} stopped: {e}", self.spec.job_id)
            }
            Err(e) => {
                log::error!("task for job {} failed: {e}", self.spec.job_id);
                self.fail(e.to_string());
            }
        }
        self.close_output();
    }

    fn produce(&self, stream: &mut ElementStream, start_cpu: u64) -> Result<(), PipelineError> {
        let mut tx = match &self.output {
            Output::Independent { tx, .. } => tx.lock().take(),
            _ => None,
        };
        loop {
            if !self.wait_for_room() {
                return Ok(());
            }
            let Some(item) = stream.next()? else {
                return Ok(());
            };
            self.counters
                .cpu_ns
                .store(thread_cpu_ns().saturating_sub(start_cpu), Ordering::Relaxed);
            for b in item.into_batches() {
                self.counters
                    .batches_produced
                    .fetch_add(1, Ordering::Relaxed);
                if !self.push(b, &mut tx) {
                    return Ok(());
                }
            }
        }
    }

    /// Blocks until the output stage wants more data. `false` on stop.
    fn wait_for_room(&self) -> bool {
        let tick = Duration::from_millis(50);
        match &self.output {
            Output::Independent { .. } => {}
            Output::Shared { slot, cv } => {
                let mut g = slot.lock();
                while !self.stopped() && !g.cache.has_demand(self.env.shared_lookahead) {
                    cv.wait_for(&mut g, tick);
                }
            }
            Output::Coordinated { slot, cv } => {
                let mut g = slot.lock();
                loop {
                    while g.open_rounds() < self.env.rounds_ahead && g.try_prepare() {
                        cv.notify_all();
                    }
                    let full = g.open_rounds() >= self.env.rounds_ahead
                        && g.queued() >= self.env.buffer_batches;
                    if self.stopped() || !full {
                        break;
                    }
                    cv.wait_for(&mut g, tick);
                }
            }
        }
        !self.stopped()
    }

    fn push(&self, mut batch: Batch, tx: &mut Option<Sender<Batch>>) -> bool {
        match &self.output {
            Output::Independent { .. } => {
                let Some(tx) = tx.as_ref() else {
                    return false;
                };
                loop {
                    match tx.send_timeout(batch, Duration::from_millis(50)) {
                        Ok(()) => return true,
                        Err(SendTimeoutError::Timeout(b)) => {
                            if self.stopped() {
                                return false;
                            }
                            batch = b;
                        }
                        Err(SendTimeoutError::Disconnected(_)) => return false,
                    }
                }
            }
            Output::Shared { slot, cv } => {
                slot.lock().cache.push(batch);
                cv.notify_all();
                true
            }
            Output::Coordinated { slot, cv } => {
                let mut g = slot.lock();
                g.push(batch);
                while g.open_rounds() < self.env.rounds_ahead && g.try_prepare() {}
                cv.notify_all();
                true
            }
        }
    }

    /// Marks the end of production on the output stage.
    fn close_output(&self) {
        match &self.output {
            Output::Independent { tx, .. } => {
                tx.lock().take();
            }
            Output::Shared { slot, cv } => {
                slot.lock().exhausted = true;
                cv.notify_all();
            }
            Output::Coordinated { slot, cv } => {
                let mut g = slot.lock();
                if !g.is_finished() {
                    g.finish();
                }
                if g.dropped_batches() > 0 {
                    log::info!(
                        "job {}: dropped {} batches that could not fill a final round",
                        self.spec.job_id,
                        g.dropped_batches()
                    );
                }
                cv.notify_all();
            }
        }
    }

    fn stopped(&self) -> bool {
        self.stop.load(Ordering::Acquire)
    }

    /// Stops production and wakes every waiter. Buffered data is discarded.
    pub fn stop(&self) {
        self.stop.store(true, Ordering::Release);
        match &self.output {
            Output::Independent { rx, .. } => while rx.try_recv().is_ok() {},
            Output::Shared { cv, .. } | Output::Coordinated { cv, .. } => {
                cv.notify_all();
            }
        }
        let handle = self.producer.lock().take();
        if let Some(h) = handle {
            if h.thread().id() != thread::current().id() {
                // Drain once more so a producer blocked on a full queue exits.
                if let Output::Independent { rx, .. } = &self.output {
                    while !h.is_finished() {
                        while rx.try_recv().is_ok() {}
                        thread::sleep(Duration::from_millis(1));
                    }
                }
                let _ = h.join();
            }
        }
    }

    /// Production has ended and every buffered batch has been handed out.
    fn drained(&self) -> bool {
        match &self.output {
            Output::Independent { rx, .. } => rx.is_empty(),
            Output::Shared { slot, .. } => {
                let g = slot.lock();
                let front = g.cache.next_seq();
                g.exhausted && g.cache.stats().pointers.iter().all(|(_, p)| *p >= front)
            }
            Output::Coordinated { slot, .. } => {
                let g = slot.lock();
                g.is_finished() && g.open_rounds() == 0
            }
        }
    }

    pub fn state(&self) -> TaskState {
        match self.phase.load(Ordering::Acquire) {
            FAILED => TaskState::Failed,
            PRODUCED if self.drained() => TaskState::Done,
            _ => TaskState::Running,
        }
    }

    fn served(&self, b: &Batch) {
        self.counters.batches_served.fetch_add(1, Ordering::Relaxed);
        self.counters
            .elements_served
            .fetch_add(b.len() as u64, Ordering::Relaxed);
    }

    pub fn get_element(&self, req: &GetElement) -> Result<ElementResult, WireError> {
        let wait = self.env.pending_wait;
        match &self.output {
            Output::Independent { rx, .. } => match rx.recv_timeout(wait) {
                Ok(b) => {
                    self.served(&b);
                    Ok(ElementResult::Batch(b))
                }
                Err(RecvTimeoutError::Timeout) => Ok(ElementResult::Pending),
                Err(RecvTimeoutError::Disconnected) => Ok(ElementResult::EndOfJob),
            },
            Output::Shared { slot, cv } => {
                let deadline = Instant::now() + wait;
                let mut g = slot.lock();
                loop {
                    if let CacheRead::Hit(b) = g.cache.read(req.client_id) {
                        cv.notify_all();
                        self.served(&b);
                        return Ok(ElementResult::Batch(b));
                    }
                    if g.exhausted {
                        return Ok(ElementResult::EndOfJob);
                    }
                    cv.notify_all();
                    if cv.wait_until(&mut g, deadline).timed_out() {
                        if let CacheRead::Hit(b) = g.cache.read(req.client_id) {
                            self.served(&b);
                            return Ok(ElementResult::Batch(b));
                        }
                        return Ok(if g.exhausted {
                            ElementResult::EndOfJob
                        } else {
                            ElementResult::Pending
                        });
                    }
                }
            }
            Output::Coordinated { slot, cv } => {
                let (Some(consumer), Some(round)) = (req.consumer_index, req.round) else {
                    return Err(WireError::RemoteError {
                        code: codes::BAD_REQUEST,
                        detail: "coordinated reads need consumer_index and round".into(),
                    });
                };
                let deadline = Instant::now() + wait;
                let mut g = slot.lock();
                loop {
                    match g.get(consumer as usize, round) {
                        RoundRead::Batch(b) => {
                            cv.notify_all();
                            self.served(&b);
                            return Ok(ElementResult::Batch(b));
                        }
                        RoundRead::EndOfJob => return Ok(ElementResult::EndOfJob),
                        RoundRead::WrongWorker => {
                            return Err(WireError::RemoteError {
                                code: codes::WRONG_WORKER_FOR_ROUND,
                                detail: format!(
                                    "round {round} is not owned by worker index {}",
                                    self.spec.worker_index
                                ),
                            })
                        }
                        RoundRead::BadConsumer => {
                            return Err(WireError::RemoteError {
                                code: codes::BAD_REQUEST,
                                detail: format!(
                                    "consumer_index {consumer} out of range for {} consumers",
                                    self.spec.num_consumers
                                ),
                            })
                        }
                        RoundRead::Expired => {
                            return Err(WireError::RemoteError {
                                code: codes::BAD_REQUEST,
                                detail: format!("round {round} has expired"),
                            })
                        }
                        RoundRead::Pending => {
                            if cv.wait_until(&mut g, deadline).timed_out() {
                                return Ok(ElementResult::Pending);
                            }
                        }
                    }
                }
            }
        }
    }

    pub fn cache_stats(&self) -> Option<CacheStats> {
        match &self.output {
            Output::Shared { slot, .. } => Some(slot.lock().cache.stats()),
            _ => None,
        }
    }

    pub fn progress(&self) -> TaskProgress {
        let c = &self.counters;
        let buffered = match &self.output {
            Output::Independent { rx, .. } => rx.len() as u64,
            Output::Shared { slot, .. } => {
                let s = slot.lock().cache.stats();
                s.next_seq - s.window_floor
            }
            Output::Coordinated { slot, .. } => slot.lock().queued() as u64,
        };
        TaskProgress {
            job_id: self.spec.job_id,
            state: self.state(),
            elements_read: self.stats.lock().as_ref().map_or(0, |s| s.elements_read()),
            batches_produced: c.batches_produced.load(Ordering::Relaxed),
            batches_served: c.batches_served.load(Ordering::Relaxed),
            elements_served: c.elements_served.load(Ordering::Relaxed),
            shards_started: c.shards_started.load(Ordering::Relaxed),
            shard_remaining: c
                .shard_len
                .load(Ordering::Relaxed)
                .saturating_sub(c.shard_read.load(Ordering::Relaxed)),
            buffered_batches: buffered,
            cpu_time: Duration::from_nanos(c.cpu_ns.load(Ordering::Relaxed)),
        }
    }
}
