//! Consumer-side library: registers a pipeline with the dispatcher, fetches
//! batches from workers in the background and hands them out in order.

use std::collections::{BTreeMap, VecDeque};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use parking_lot::{Condvar, Mutex};
use thiserror::Error;

use crate::pipeline::{Batch, DatasetGraph};
use crate::wire::{
    codes, ConnectOptions, ElementResult, Endpoint, GetElement, JobHandleInfo, JobMode, JobUpdate,
    Message, RegisterJob, ShardingPolicy, WireError, WorkerInfo,
};
use crate::worker::{Worker, LOCAL_ADDR_PREFIX};

/// Environment variable naming the default dispatcher address.
pub const DISPATCHER_ENV: &str = "DFS_DISPATCHER";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReadSources {
    /// Only the in-process worker, by direct call.
    Local,
    /// Only workers reachable over the network.
    Remote,
    Both,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ClientError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("dispatcher unreachable: {0}")]
    DispatcherUnreachable(String),
    #[error("job name {0:?} is registered with a different graph or policy")]
    PolicyMismatch(String),
    #[error("dispatcher error {code}: {detail}")]
    Remote { code: u16, detail: String },
    #[error("all workers lost")]
    AllWorkersLost,
    #[error("worker {0} owning the next round is unreachable")]
    RoundOwnerLost(u64),
    #[error("worker {worker} rejected a read: {detail}")]
    Fetch { worker: u64, detail: String },
}

#[derive(Debug, Clone)]
pub struct DistributeConfig {
    pub dispatcher_addr: String,
    pub job_name: String,
    pub policy: ShardingPolicy,
    pub mode: JobMode,
    pub read_sources: ReadSources,
    pub compression: bool,
    /// Coordinated mode only.
    pub num_consumers: Option<u32>,
    pub consumer_index: Option<u32>,
    /// Batches (or round slots) buffered ahead of the consumer.
    pub buffer_capacity: usize,
    /// Concurrent fetchers per worker.
    pub fetch_parallelism: usize,
    pub local_worker: Option<Arc<Worker>>,
    pub backoff_base: Duration,
    pub backoff_cap: Duration,
    pub rpc_timeout: Duration,
    /// How often the dispatcher is polled for pool updates.
    pub poll_interval: Duration,
    /// How long the stream tolerates having no reachable worker.
    pub lost_grace: Duration,
    /// Artificial delay before every request to a worker.
    pub injected_latency: Duration,
}

impl Default for DistributeConfig {
    fn default() -> Self {
        Self {
            dispatcher_addr: std::env::var(DISPATCHER_ENV)
                .unwrap_or_else(|_| "127.0.0.1:5050".into()),
            job_name: "default".into(),
            policy: ShardingPolicy::Off,
            mode: JobMode::Independent,
            read_sources: ReadSources::Remote,
            compression: false,
            num_consumers: None,
            consumer_index: None,
            buffer_capacity: 8,
            fetch_parallelism: 1,
            local_worker: None,
            backoff_base: Duration::from_millis(10),
            backoff_cap: Duration::from_millis(500),
            rpc_timeout: Duration::from_secs(10),
            poll_interval: Duration::from_millis(100),
            lost_grace: Duration::from_secs(5),
            injected_latency: Duration::ZERO,
        }
    }
}

impl DistributeConfig {
    pub fn validate(&self) -> Result<(), ClientError> {
        let bad = |m: &str| Err(ClientError::Config(m.into()));
        if self.buffer_capacity == 0 || self.fetch_parallelism == 0 {
            return bad("buffer capacity and fetch parallelism must be positive");
        }
        if self.mode == JobMode::Coordinated {
            match (self.num_consumers, self.consumer_index) {
                (Some(m), Some(i)) if m > 0 && i < m => {}
                (Some(_), Some(_)) => return bad("consumer_index must be below num_consumers"),
                _ => return bad("coordinated reads need num_consumers and consumer_index"),
            }
        } else if self.num_consumers.is_some() || self.consumer_index.is_some() {
            return bad("num_consumers and consumer_index apply to coordinated reads only");
        }
        if self.read_sources != ReadSources::Remote && self.local_worker.is_none() {
            return bad("local reads need an in-process worker");
        }
        Ok(())
    }
}

#[derive(Clone)]
enum Target {
    Local(Arc<Worker>),
    Remote(Arc<Endpoint>),
}

impl Target {
    fn get(&self, req: &GetElement, timeout: Duration) -> Result<ElementResult, WireError> {
        match self {
            Target::Local(w) => w.get_element(req),
            Target::Remote(ep) => match ep.call(&Message::GetElement(req.clone()), timeout)? {
                Message::ElementResult(r) => Ok(r),
                other => Err(WireError::Malformed(format!(
                    "unexpected response {:#06x}",
                    other.msg_type()
                ))),
            },
        }
    }
}

#[derive(Debug, Default)]
struct WorkerSlot {
    address: String,
    retired: bool,
    ended: bool,
    /// Last successful contact, or creation.
    last_ok: Option<Instant>,
    received_elements: u64,
    received_batches: u64,
}

#[derive(Default)]
struct Pool {
    workers: BTreeMap<u64, WorkerSlot>,
    finished: bool,
    buffer: VecDeque<Batch>,
    /// Coordinated mode: round → batch.
    slots: BTreeMap<u64, Batch>,
    next_round: u64,
    end_round: Option<u64>,
    error: Option<ClientError>,
    no_workers_since: Option<Instant>,
    /// Some listed worker is outside this client's read sources.
    partial: bool,
    fetchers: Vec<JoinHandle<()>>,
}

struct Shared {
    config: DistributeConfig,
    job_id: u64,
    client_id: u64,
    dispatcher: Endpoint,
    stop: AtomicBool,
    pool: Mutex<Pool>,
    cv: Condvar,
    /// Coordinated mode: round owners by task order, fixed for the job.
    owners: Vec<WorkerInfo>,
}

/// Handle returned by [`distribute`]; a blocking iterator over batches.
pub struct RemoteStream {
    shared: Arc<Shared>,
    handle: JobHandleInfo,
    monitor: Option<JoinHandle<()>>,
}

impl std::fmt::Debug for RemoteStream {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("RemoteStream")
            .field("job_id", &self.handle.job_id)
            .field("client_id", &self.handle.client_id)
            .finish()
    }
}

fn map_dispatcher_error(e: WireError) -> ClientError {
    match e {
        WireError::RemoteError { code, detail } if code == codes::POLICY_MISMATCH => {
            ClientError::PolicyMismatch(detail)
        }
        WireError::RemoteError { code, detail } => ClientError::Remote { code, detail },
        other => ClientError::DispatcherUnreachable(other.to_string()),
    }
}

/// Registers (or joins, by job name) the job and starts fetching.
pub fn distribute(
    graph: &DatasetGraph,
    config: DistributeConfig,
) -> Result<RemoteStream, ClientError> {
    config.validate()?;
    let dispatcher = Endpoint::new(
        config.dispatcher_addr.clone(),
        ConnectOptions {
            connect_timeout: Some(config.rpc_timeout),
            ..Default::default()
        },
    );
    let req = Message::RegisterJob(RegisterJob {
        job_name: config.job_name.clone(),
        graph: graph.to_bytes(),
        policy: config.policy,
        mode: config.mode,
        num_consumers: config.num_consumers,
    });
    let handle = match dispatcher
        .call(&req, config.rpc_timeout)
        .map_err(map_dispatcher_error)?
    {
        Message::RegisterJobResponse(h) => h,
        other => {
            return Err(ClientError::DispatcherUnreachable(format!(
                "unexpected response {:#06x}",
                other.msg_type()
            )))
        }
    };
    log::info!(
        "client {} {} job {} with {} workers",
        handle.client_id,
        if handle.joined_existing {
            "joined"
        } else {
            "created"
        },
        handle.job_id,
        handle.workers.len()
    );
    let owners = if config.mode == JobMode::Coordinated {
        handle.workers.clone()
    } else {
        Vec::new()
    };
    let shared = Arc::new(Shared {
        job_id: handle.job_id,
        client_id: handle.client_id,
        dispatcher,
        stop: AtomicBool::new(false),
        pool: Mutex::new(Pool::default()),
        cv: Condvar::new(),
        owners,
        config,
    });
    shared.apply_update(&JobUpdate {
        job_id: handle.job_id,
        workers: handle.workers.clone(),
        finished: false,
    });
    let s = shared.clone();
    let monitor = thread::Builder::new()
        .name(format!("client-{}-monitor", handle.client_id))
        .spawn(move || s.monitor())
        .map_err(|e| ClientError::Config(e.to_string()))?;
    Ok(RemoteStream {
        shared,
        handle,
        monitor: Some(monitor),
    })
}

impl Shared {
    fn stopped(&self) -> bool {
        self.stop.load(Ordering::Acquire)
    }

    fn is_local(&self, info: &WorkerInfo) -> bool {
        self.config
            .local_worker
            .as_ref()
            .is_some_and(|w| w.address() == info.address)
    }

    fn target_for(&self, info: &WorkerInfo) -> Option<Target> {
        let local = self.is_local(info);
        match (self.config.read_sources, local) {
            (ReadSources::Local, true) | (ReadSources::Both, true) => Some(Target::Local(
                self.config
                    .local_worker
                    .clone()
                    .expect("checked by is_local"),
            )),
            (ReadSources::Local, false) => None,
            (_, false) if info.address.starts_with(LOCAL_ADDR_PREFIX) => None,
            (ReadSources::Remote, true) => None,
            (_, false) => Some(Target::Remote(Arc::new(Endpoint::new(
                info.address.clone(),
                ConnectOptions {
                    connect_timeout: Some(self.config.rpc_timeout.min(Duration::from_secs(2))),
                    compress: self.config.compression,
                    injected_latency: self.config.injected_latency,
                },
            )))),
        }
    }

    fn monitor(self: Arc<Self>) {
        let req = Message::ClientHeartbeat {
            job_id: self.job_id,
            client_id: self.client_id,
        };
        while !self.stopped() {
            match self.dispatcher.call(&req, self.config.rpc_timeout) {
                Ok(Message::JobUpdate(u)) => self.apply_update(&u),
                Ok(_) => {}
                Err(e) => log::debug!("client heartbeat failed: {e}"),
            }
            let mut pool = self.pool.lock();
            if !self.stopped() {
                self.cv.wait_for(&mut pool, self.config.poll_interval);
            }
        }
        self.dispatcher.close();
    }

    /// Starts fetchers for new workers and retires those no longer listed.
    /// Applying the same update twice changes nothing.
    fn apply_update(self: &Arc<Self>, update: &JobUpdate) {
        let mut pool = self.pool.lock();
        if update.finished && !pool.finished {
            log::debug!("job {} reported finished", self.job_id);
        }
        pool.finished |= update.finished;
        let coordinated = self.config.mode == JobMode::Coordinated;
        if !coordinated {
            for (id, slot) in pool.workers.iter_mut() {
                if !slot.retired && !update.workers.iter().any(|w| w.worker_id == *id) {
                    log::info!("worker {id} left job {}", self.job_id);
                    slot.retired = true;
                }
            }
        }
        let workers: Vec<WorkerInfo> = if coordinated {
            self.owners.clone()
        } else {
            update.workers.clone()
        };
        for (index, info) in workers.iter().enumerate() {
            if let Some(slot) = pool.workers.get_mut(&info.worker_id) {
                if slot.address == info.address && !slot.retired {
                    continue;
                }
                if coordinated {
                    continue;
                }
            }
            let Some(target) = self.target_for(info) else {
                pool.partial = true;
                continue;
            };
            pool.workers.insert(
                info.worker_id,
                WorkerSlot {
                    address: info.address.clone(),
                    last_ok: Some(Instant::now()),
                    ..Default::default()
                },
            );
            let fetchers = if coordinated {
                1
            } else {
                self.config.fetch_parallelism
            };
            for k in 0..fetchers {
                let s = self.clone();
                let target = target.clone();
                let id = info.worker_id;
                let spawned = thread::Builder::new()
                    .name(format!("fetch-{}-{id}-{k}", self.client_id))
                    .spawn(move || {
                        if coordinated {
                            s.fetch_rounds(id, index as u64, target)
                        } else {
                            s.fetch_batches(id, target)
                        }
                    });
                match spawned {
                    Ok(h) => pool.fetchers.push(h),
                    Err(e) => log::error!("cannot start fetcher: {e}"),
                }
            }
        }
        self.cv.notify_all();
    }

    fn sleep(&self, backoff: &mut Duration) {
        let mut pool = self.pool.lock();
        if !self.stopped() {
            self.cv.wait_for(&mut pool, *backoff);
        }
        *backoff = (*backoff * 2).min(self.config.backoff_cap);
    }

    fn fetch_batches(&self, worker_id: u64, target: Target) {
        let req = GetElement {
            job_id: self.job_id,
            client_id: self.client_id,
            consumer_index: None,
            round: None,
        };
        let mut backoff = self.config.backoff_base;
        loop {
            {
                let pool = self.pool.lock();
                let slot = &pool.workers[&worker_id];
                if self.stopped() || slot.retired || slot.ended {
                    return;
                }
            }
            match target.get(&req, self.config.rpc_timeout) {
                Ok(ElementResult::Batch(b)) => {
                    backoff = self.config.backoff_base;
                    let mut pool = self.pool.lock();
                    while pool.buffer.len() >= self.config.buffer_capacity && !self.stopped() {
                        self.cv.wait_for(&mut pool, Duration::from_millis(50));
                    }
                    let slot = pool
                        .workers
                        .get_mut(&worker_id)
                        .expect("slots are never removed");
                    slot.last_ok = Some(Instant::now());
                    slot.received_batches += 1;
                    slot.received_elements += b.len() as u64;
                    pool.buffer.push_back(b);
                    self.cv.notify_all();
                }
                Ok(ElementResult::Pending) => {
                    self.touch(worker_id);
                    self.sleep(&mut backoff);
                }
                Ok(ElementResult::EndOfJob) => {
                    let mut pool = self.pool.lock();
                    pool.workers
                        .get_mut(&worker_id)
                        .expect("slots are never removed")
                        .ended = true;
                    self.cv.notify_all();
                    return;
                }
                Err(e) => {
                    log::debug!("fetch from worker {worker_id} failed: {e}");
                    self.sleep(&mut backoff);
                }
            }
        }
    }

    fn touch(&self, worker_id: u64) {
        if let Some(s) = self.pool.lock().workers.get_mut(&worker_id) {
            s.last_ok = Some(Instant::now());
        }
    }

    /// Fetches rounds `index, index + n, ...` for this client's consumer slot.
    fn fetch_rounds(&self, worker_id: u64, index: u64, target: Target) {
        let n = self.owners.len().max(1) as u64;
        let consumer = self.config.consumer_index.expect("validated");
        let mut round = index;
        let mut backoff = self.config.backoff_base;
        loop {
            {
                let mut pool = self.pool.lock();
                loop {
                    if self.stopped() || pool.end_round.is_some_and(|e| round >= e) {
                        return;
                    }
                    if round < pool.next_round + self.config.buffer_capacity as u64 {
                        break;
                    }
                    self.cv.wait_for(&mut pool, Duration::from_millis(50));
                }
            }
            let req = GetElement {
                job_id: self.job_id,
                client_id: self.client_id,
                consumer_index: Some(consumer),
                round: Some(round),
            };
            match target.get(&req, self.config.rpc_timeout) {
                Ok(ElementResult::Batch(b)) => {
                    backoff = self.config.backoff_base;
                    let mut pool = self.pool.lock();
                    let slot = pool
                        .workers
                        .get_mut(&worker_id)
                        .expect("slots are never removed");
                    slot.last_ok = Some(Instant::now());
                    slot.received_batches += 1;
                    slot.received_elements += b.len() as u64;
                    pool.slots.insert(round, b);
                    self.cv.notify_all();
                    round += n;
                }
                Ok(ElementResult::Pending) => {
                    self.touch(worker_id);
                    self.sleep(&mut backoff);
                }
                Ok(ElementResult::EndOfJob) => {
                    let mut pool = self.pool.lock();
                    pool.end_round = Some(pool.end_round.map_or(round, |e| e.min(round)));
                    pool.workers
                        .get_mut(&worker_id)
                        .expect("slots are never removed")
                        .ended = true;
                    self.cv.notify_all();
                    return;
                }
                Err(WireError::RemoteError { code, detail }) if code == codes::BAD_REQUEST => {
                    let mut pool = self.pool.lock();
                    pool.error.get_or_insert(ClientError::Fetch {
                        worker: worker_id,
                        detail,
                    });
                    self.cv.notify_all();
                    return;
                }
                Err(e) => {
                    log::debug!("round {round} fetch from worker {worker_id} failed: {e}");
                    self.sleep(&mut backoff);
                }
            }
        }
    }

    fn next_batch(&self) -> Result<Option<Batch>, ClientError> {
        let mut pool = self.pool.lock();
        loop {
            if self.config.mode == JobMode::Coordinated {
                let r = pool.next_round;
                if let Some(b) = pool.slots.remove(&r) {
                    pool.next_round += 1;
                    self.cv.notify_all();
                    return Ok(Some(b));
                }
                if let Some(e) = pool.error.clone() {
                    return Err(e);
                }
                if pool.end_round.is_some_and(|e| r >= e) {
                    return Ok(None);
                }
                let owner = &self.owners[(r % self.owners.len() as u64) as usize];
                let stale = pool
                    .workers
                    .get(&owner.worker_id)
                    .and_then(|s| s.last_ok)
                    .is_none_or(|t| t.elapsed() > self.config.lost_grace);
                if stale {
                    return Err(ClientError::RoundOwnerLost(owner.worker_id));
                }
            } else {
                if let Some(b) = pool.buffer.pop_front() {
                    self.cv.notify_all();
                    return Ok(Some(b));
                }
                if let Some(e) = pool.error.clone() {
                    return Err(e);
                }
                let active = pool.workers.values().filter(|s| !s.retired).count();
                let all_ended = pool.workers.values().all(|s| s.retired || s.ended);
                // A client reading part of the pool cannot wait for the
                // unread workers to drain.
                if all_ended && (pool.finished || (pool.partial && active > 0)) {
                    return Ok(None);
                }
                if all_ended {
                    // Every fetcher is done: either waiting on the dispatcher
                    // or every worker is gone.
                    let since = *pool.no_workers_since.get_or_insert_with(Instant::now);
                    if active == 0 && since.elapsed() > self.config.lost_grace {
                        return Err(ClientError::AllWorkersLost);
                    }
                } else {
                    pool.no_workers_since = None;
                }
            }
            self.cv.wait_for(&mut pool, Duration::from_millis(20));
        }
    }
}

impl RemoteStream {
    pub fn job_id(&self) -> u64 {
        self.handle.job_id
    }

    pub fn client_id(&self) -> u64 {
        self.handle.client_id
    }

    /// Whether this client joined a job another client had registered.
    pub fn joined_existing(&self) -> bool {
        self.handle.joined_existing
    }

    /// Next batch, or `None` at end of job. Blocks while data is in flight.
    pub fn next_batch(&mut self) -> Result<Option<Batch>, ClientError> {
        self.shared.next_batch()
    }

    /// Applies a pool update as if the dispatcher had just sent it.
    pub fn handle_job_update(&self, update: &JobUpdate) {
        self.shared.apply_update(update);
    }

    /// Elements received so far per worker id.
    pub fn received_elements(&self) -> BTreeMap<u64, u64> {
        self.shared
            .pool
            .lock()
            .workers
            .iter()
            .map(|(id, s)| (*id, s.received_elements))
            .collect()
    }

    /// Batches currently buffered client-side.
    pub fn buffered(&self) -> usize {
        let pool = self.shared.pool.lock();
        pool.buffer.len() + pool.slots.len()
    }

    /// Stops the fetchers and waits for them to exit.
    pub fn close(&mut self) {
        self.shared.stop.store(true, Ordering::Release);
        self.shared.cv.notify_all();
        if let Some(m) = self.monitor.take() {
            let _ = m.join();
        }
        let fetchers = std::mem::take(&mut self.shared.pool.lock().fetchers);
        for f in fetchers {
            let _ = f.join();
        }
    }
}

impl Iterator for RemoteStream {
    type Item = Result<Batch, ClientError>;

    fn next(&mut self) -> Option<Self::Item> {
        self.next_batch().transpose()
    }
}

impl Drop for RemoteStream {
    fn drop(&mut self) {
        self.close();
    }
}
