//! Control plane: worker, job and client registry, split assignment and the
//! write-ahead journal. The dispatcher never reads source data beyond the
//! record file headers needed to enumerate shards.

pub mod journal;
pub mod state;

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::Arc;
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use parking_lot::Mutex;
use thiserror::Error;

use crate::pipeline::{DatasetGraph, SourceKind};
use crate::records::{enumerate_shards, Granularity, ShardSpec};
use crate::wire::{
    codes, Directives, JobHandleInfo, JobMode, JobUpdate, Message, RegisterJob, Server,
    ShardingPolicy, TaskReport, TaskSpec, TaskState, WireError,
};

pub use journal::{read_journal, Event, Journal, JournalRecord};
pub use state::{DispatcherState, JobState, JobStatus, ShardAssignment};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum DispatcherError {
    #[error("journal i/o: {0}")]
    Io(String),
    #[error("corrupt journal at offset {offset}: {reason}")]
    CorruptJournal { offset: u64, reason: String },
    #[error("unknown job {0}")]
    UnknownJob(u64),
    #[error("unknown worker {0}")]
    UnknownWorker(u64),
    #[error("job {0} does not use dynamic sharding")]
    WrongPolicy(u64),
    #[error("job name {0:?} is registered with a different graph or policy")]
    PolicyMismatch(String),
    #[error("no live workers")]
    NoWorkers,
    #[error("bad request: {0}")]
    BadRequest(String),
}

impl DispatcherError {
    pub fn code(&self) -> u16 {
        match self {
            DispatcherError::Io(_) | DispatcherError::CorruptJournal { .. } => codes::INTERNAL,
            DispatcherError::UnknownJob(_) => codes::UNKNOWN_JOB,
            DispatcherError::UnknownWorker(_) => codes::UNKNOWN_WORKER,
            DispatcherError::WrongPolicy(_) => codes::WRONG_POLICY,
            DispatcherError::PolicyMismatch(_) => codes::POLICY_MISMATCH,
            DispatcherError::NoWorkers => codes::NO_WORKERS,
            DispatcherError::BadRequest(_) => codes::BAD_REQUEST,
        }
    }
}

/// Millisecond time source; tests substitute [`FakeClock`].
pub trait Clock: Send + Sync {
    fn now_ms(&self) -> u64;
}

#[derive(Debug)]
pub struct SystemClock(Instant);

impl Default for SystemClock {
    fn default() -> Self {
        Self(Instant::now())
    }
}

impl Clock for SystemClock {
    fn now_ms(&self) -> u64 {
        self.0.elapsed().as_millis() as u64
    }
}

#[derive(Debug, Default)]
pub struct FakeClock(AtomicU64);

impl FakeClock {
    pub fn advance(&self, ms: u64) {
        self.0.fetch_add(ms, Ordering::SeqCst);
    }
}

impl Clock for FakeClock {
    fn now_ms(&self) -> u64 {
        self.0.load(Ordering::SeqCst)
    }
}

#[derive(Debug, Clone)]
pub struct DispatcherConfig {
    /// `None` keeps state in memory only.
    pub journal_path: Option<PathBuf>,
    pub fsync: bool,
    pub heartbeat_interval: Duration,
    /// Silence after which a worker is dead. Defaults to three intervals.
    pub worker_timeout: Option<Duration>,
}

impl Default for DispatcherConfig {
    fn default() -> Self {
        Self {
            journal_path: None,
            fsync: true,
            heartbeat_interval: Duration::from_secs(1),
            worker_timeout: None,
        }
    }
}

impl DispatcherConfig {
    pub fn worker_timeout(&self) -> Duration {
        self.worker_timeout.unwrap_or(self.heartbeat_interval * 3)
    }
}

struct Inner {
    state: DispatcherState,
    journal: Option<Journal>,
    last_seen: HashMap<u64, u64>,
    task_states: HashMap<(u64, u64), TaskState>,
}

impl Inner {
    /// Journals then applies each event; nothing is applied past a failed
    /// append.
    fn commit(&mut self, events: Vec<Event>) -> Result<(), DispatcherError> {
        for e in events {
            let seq = match self.journal.as_mut() {
                Some(j) => j.append(&e)?,
                None => self.state.last_sequence + 1,
            };
            self.state
                .apply(seq, &e)
                .map_err(|r| DispatcherError::Io(format!("invalid transition: {r}")))?;
        }
        Ok(())
    }

    fn job(&self, job_id: u64) -> Result<&JobState, DispatcherError> {
        self.state
            .jobs
            .get(&job_id)
            .ok_or(DispatcherError::UnknownJob(job_id))
    }

    /// Jobs whose live tasks have all stopped producing.
    fn finished_jobs(&self) -> Vec<u64> {
        self.state
            .jobs
            .values()
            .filter(|j| j.status == JobStatus::Active)
            .filter(|j| {
                let live: Vec<u64> = j
                    .tasks
                    .keys()
                    .copied()
                    .filter(|w| self.state.is_alive(*w))
                    .collect();
                !live.is_empty()
                    && live.iter().all(|w| {
                        matches!(
                            self.task_states.get(&(j.job_id, *w)),
                            Some(TaskState::Done) | Some(TaskState::Failed)
                        )
                    })
            })
            .map(|j| j.job_id)
            .collect()
    }

    fn complete_finished(&mut self) -> Result<(), DispatcherError> {
        let done: Vec<Event> = self
            .finished_jobs()
            .into_iter()
            .map(|job_id| Event::JobCompleted { job_id })
            .collect();
        self.commit(done)
    }
}

pub struct Dispatcher {
    inner: Mutex<Inner>,
    clock: Arc<dyn Clock>,
    config: DispatcherConfig,
}

impl std::fmt::Debug for Dispatcher {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Dispatcher")
            .field("config", &self.config)
            .finish()
    }
}

impl Dispatcher {
    /// Starts from the journal (if configured), replaying it.
    pub fn open(config: DispatcherConfig, clock: Arc<dyn Clock>) -> Result<Self, DispatcherError> {
        let (journal, state) = match &config.journal_path {
            Some(p) => {
                let (j, records) = Journal::open(p, config.fsync)?;
                let state = DispatcherState::replay(&records)
                    .map_err(|reason| DispatcherError::CorruptJournal { offset: 0, reason })?;
                (Some(j), state)
            }
            None => (None, DispatcherState::default()),
        };
        let now = clock.now_ms();
        // Recovered workers get a full timeout to check in again.
        let last_seen = state.workers.keys().map(|w| (*w, now)).collect();
        Ok(Self {
            inner: Mutex::new(Inner {
                state,
                journal,
                last_seen,
                task_states: HashMap::new(),
            }),
            clock,
            config,
        })
    }

    pub fn recover(path: &Path) -> Result<DispatcherState, DispatcherError> {
        let records = read_journal(path)?;
        DispatcherState::replay(&records)
            .map_err(|reason| DispatcherError::CorruptJournal { offset: 0, reason })
    }

    pub fn config(&self) -> &DispatcherConfig {
        &self.config
    }

    pub fn state(&self) -> DispatcherState {
        self.inner.lock().state.clone()
    }

    pub fn state_dump(&self) -> String {
        self.inner.lock().state.canonical_dump()
    }

    pub fn register_worker(&self, address: &str) -> Result<(u64, Vec<TaskSpec>), DispatcherError> {
        if address.is_empty() {
            return Err(DispatcherError::BadRequest("empty worker address".into()));
        }
        let mut inner = self.inner.lock();
        let mut events = Vec::new();
        let worker_id = match inner.state.worker_by_address(address) {
            Some(id) => {
                if inner.state.is_alive(id) {
                    events.push(Event::WorkerLost { worker_id: id });
                }
                id
            }
            None => inner.state.next_worker_id,
        };
        events.push(Event::WorkerRegistered {
            worker_id,
            address: address.to_string(),
        });
        for job in inner.state.jobs.values() {
            if job.status == JobStatus::Active
                && job.mode != JobMode::Coordinated
                && !job.tasks.contains_key(&worker_id)
            {
                events.push(Event::TaskCreated {
                    job_id: job.job_id,
                    worker_id,
                    worker_index: job.tasks.len() as u32,
                    static_shards: Vec::new(),
                });
            }
        }
        inner.commit(events)?;
        let now = self.clock.now_ms();
        inner.last_seen.insert(worker_id, now);
        inner.task_states.retain(|(_, w), _| *w != worker_id);
        let tasks = inner.state.tasks_for(worker_id);
        log::info!(
            "worker {worker_id} registered at {address} with {} tasks",
            tasks.len()
        );
        Ok((worker_id, tasks))
    }

    pub fn register_job(&self, req: &RegisterJob) -> Result<JobHandleInfo, DispatcherError> {
        let graph = DatasetGraph::from_bytes(&req.graph)
            .map_err(|e| DispatcherError::BadRequest(format!("graph: {e}")))?;
        if req.mode == JobMode::Coordinated && req.num_consumers.unwrap_or(0) == 0 {
            return Err(DispatcherError::BadRequest(
                "coordinated reads need num_consumers >= 1".into(),
            ));
        }
        let mut inner = self.inner.lock();
        if let Some(job) = inner.state.active_job_by_name(&req.job_name) {
            if job.fingerprint != graph.fingerprint()
                || job.policy != req.policy
                || job.mode != req.mode
                || job.num_consumers != req.num_consumers
            {
                return Err(DispatcherError::PolicyMismatch(req.job_name.clone()));
            }
            let job_id = job.job_id;
            let client_id = inner.state.next_client_id;
            inner.commit(vec![Event::ClientJoined { job_id, client_id }])?;
            let job = inner.job(job_id)?;
            return Ok(JobHandleInfo {
                job_id,
                client_id,
                workers: inner.state.job_workers(job),
                joined_existing: true,
            });
        }

        let shards = match req.policy {
            ShardingPolicy::Off => Vec::new(),
            ShardingPolicy::Dynamic | ShardingPolicy::Static => shardable(&graph)?,
        };
        let live: Vec<u64> = inner
            .state
            .workers
            .iter()
            .filter(|(_, w)| w.alive)
            .map(|(id, _)| *id)
            .collect();
        if live.is_empty()
            && (req.policy == ShardingPolicy::Static || req.mode == JobMode::Coordinated)
        {
            return Err(DispatcherError::NoWorkers);
        }
        let job_id = inner.state.next_job_id;
        let client_id = inner.state.next_client_id;
        let mut events = vec![Event::JobRegistered {
            job_id,
            job_name: req.job_name.clone(),
            fingerprint: graph.fingerprint(),
            graph: req.graph.clone(),
            policy: req.policy,
            mode: req.mode,
            num_consumers: req.num_consumers,
            shards: shards.clone(),
        }];
        for (idx, w) in live.iter().enumerate() {
            let static_shards = if req.policy == ShardingPolicy::Static {
                shards
                    .iter()
                    .enumerate()
                    .filter(|(i, _)| i % live.len() == idx)
                    .map(|(_, s)| s.shard_id)
                    .collect()
            } else {
                Vec::new()
            };
            events.push(Event::TaskCreated {
                job_id,
                worker_id: *w,
                worker_index: idx as u32,
                static_shards,
            });
        }
        events.push(Event::ClientJoined { job_id, client_id });
        inner.commit(events)?;
        let job = inner.job(job_id)?;
        log::info!(
            "job {job_id} ({}) registered: {:?}/{:?}, {} shards, {} tasks",
            req.job_name,
            req.policy,
            req.mode,
            shards.len(),
            job.tasks.len()
        );
        Ok(JobHandleInfo {
            job_id,
            client_id,
            workers: inner.state.job_workers(job),
            joined_existing: false,
        })
    }

    /// Completes the worker's current split and hands out the next one.
    /// `None` means no splits remain.
    pub fn get_split(
        &self,
        job_id: u64,
        worker_id: u64,
    ) -> Result<Option<ShardSpec>, DispatcherError> {
        let mut inner = self.inner.lock();
        let job = inner.job(job_id)?;
        if job.policy != ShardingPolicy::Dynamic {
            return Err(DispatcherError::WrongPolicy(job_id));
        }
        if !inner.state.is_alive(worker_id) || !job.tasks.contains_key(&worker_id) {
            return Err(DispatcherError::UnknownWorker(worker_id));
        }
        let a = job.assignment.as_ref().expect("dynamic jobs track splits");
        let mut events = Vec::new();
        if let Some(&shard_id) = a.in_flight.get(&worker_id) {
            events.push(Event::SplitCompleted {
                job_id,
                worker_id,
                shard_id,
            });
        }
        let next = if job.status == JobStatus::Active {
            a.pending.front().copied()
        } else {
            None
        };
        if let Some(shard_id) = next {
            events.push(Event::SplitAssigned {
                job_id,
                worker_id,
                shard_id,
            });
        }
        let shard = next.and_then(|id| job.shards.get(&id).cloned());
        inner.commit(events)?;
        Ok(shard)
    }

    pub fn heartbeat(
        &self,
        worker_id: u64,
        reports: &[TaskReport],
    ) -> Result<Directives, DispatcherError> {
        let mut inner = self.inner.lock();
        if !inner.state.is_alive(worker_id) {
            return Ok(Directives {
                reregister: true,
                ..Default::default()
            });
        }
        let now = self.clock.now_ms();
        inner.last_seen.insert(worker_id, now);
        for r in reports {
            inner.task_states.insert((r.job_id, worker_id), r.state);
        }
        inner.complete_finished()?;
        let reported: std::collections::HashSet<u64> = reports.iter().map(|r| r.job_id).collect();
        let new_tasks = inner
            .state
            .tasks_for(worker_id)
            .into_iter()
            .filter(|t| !reported.contains(&t.job_id))
            .collect();
        let completed_jobs = reports
            .iter()
            .map(|r| r.job_id)
            .filter(|j| {
                inner
                    .state
                    .jobs
                    .get(j)
                    .map(|job| job.status == JobStatus::Completed)
                    .unwrap_or(true)
            })
            .collect();
        Ok(Directives {
            reregister: false,
            new_tasks,
            completed_jobs,
        })
    }

    pub fn client_heartbeat(
        &self,
        job_id: u64,
        client_id: u64,
    ) -> Result<JobUpdate, DispatcherError> {
        let inner = self.inner.lock();
        let job = inner.job(job_id)?;
        if !job.clients.contains(&client_id) {
            log::debug!("heartbeat from unregistered client {client_id} of job {job_id}");
        }
        Ok(JobUpdate {
            job_id,
            workers: inner.state.job_workers(job),
            finished: job.status == JobStatus::Completed,
        })
    }

    pub fn list_tasks(&self, worker_id: u64) -> Result<Vec<TaskSpec>, DispatcherError> {
        let inner = self.inner.lock();
        if !inner.state.workers.contains_key(&worker_id) {
            return Err(DispatcherError::UnknownWorker(worker_id));
        }
        Ok(inner.state.tasks_for(worker_id))
    }

    /// Marks workers silent for longer than the timeout as dead. Returns the
    /// newly dead ids.
    pub fn check_liveness(&self) -> Result<Vec<u64>, DispatcherError> {
        let timeout = self.config.worker_timeout().as_millis() as u64;
        let now = self.clock.now_ms();
        let mut inner = self.inner.lock();
        let alive: Vec<u64> = inner
            .state
            .workers
            .iter()
            .filter(|(_, w)| w.alive)
            .map(|(id, _)| *id)
            .collect();
        let mut dead = Vec::new();
        for w in alive {
            let seen = *inner.last_seen.entry(w).or_insert(now);
            if now.saturating_sub(seen) > timeout {
                dead.push(w);
            }
        }
        if dead.is_empty() {
            return Ok(dead);
        }
        inner.commit(
            dead.iter()
                .map(|&worker_id| Event::WorkerLost { worker_id })
                .collect(),
        )?;
        for w in &dead {
            log::warn!("worker {w} missed its heartbeats; marked dead");
            inner.task_states.retain(|(_, tw), _| tw != w);
        }
        inner.complete_finished()?;
        Ok(dead)
    }

    /// Serves one wire request.
    pub fn handle(&self, req: Message) -> Message {
        let r = match req {
            Message::RegisterWorker { address } => self
                .register_worker(&address)
                .map(|(worker_id, tasks)| Message::RegisterWorkerResponse { worker_id, tasks }),
            Message::RegisterJob(r) => self.register_job(&r).map(Message::RegisterJobResponse),
            Message::GetSplit { job_id, worker_id } => self
                .get_split(job_id, worker_id)
                .map(Message::SplitResponse),
            Message::Heartbeat { worker_id, tasks } => self
                .heartbeat(worker_id, &tasks)
                .map(Message::HeartbeatResponse),
            Message::ClientHeartbeat { job_id, client_id } => self
                .client_heartbeat(job_id, client_id)
                .map(Message::JobUpdate),
            Message::ListTasks { worker_id } => self
                .list_tasks(worker_id)
                .map(|tasks| Message::ListTasksResponse { tasks }),
            other => Err(DispatcherError::BadRequest(format!(
                "dispatcher does not serve type {:#06x}",
                other.msg_type()
            ))),
        };
        r.unwrap_or_else(|e| Message::error(e.code(), e.to_string()))
    }
}

fn shardable(graph: &DatasetGraph) -> Result<Vec<ShardSpec>, DispatcherError> {
    let kind = graph
        .source()
        .source_kind()
        .map_err(|e| DispatcherError::BadRequest(e.to_string()))?;
    match kind {
        SourceKind::Records {
            dir,
            granularity,
            shards,
        } => {
            let g = Granularity::parse(&granularity).ok_or_else(|| {
                DispatcherError::BadRequest(format!("unknown granularity {granularity:?}"))
            })?;
            enumerate_shards(Path::new(&dir), g, shards as usize)
                .map_err(|e| DispatcherError::BadRequest(format!("cannot enumerate shards: {e}")))
        }
        SourceKind::Range { .. } => Err(DispatcherError::BadRequest(
            "range sources cannot be split; use a record source".into(),
        )),
    }
}

/// A dispatcher bound to a TCP port, with its liveness checker.
pub struct DispatcherServer {
    dispatcher: Arc<Dispatcher>,
    server: Server,
    stop: Arc<AtomicBool>,
    liveness: Mutex<Option<JoinHandle<()>>>,
}

impl DispatcherServer {
    pub fn start(addr: &str, config: DispatcherConfig) -> Result<Self, DispatcherError> {
        Self::start_with_clock(addr, config, Arc::new(SystemClock::default()))
    }

    pub fn start_with_clock(
        addr: &str,
        config: DispatcherConfig,
        clock: Arc<dyn Clock>,
    ) -> Result<Self, DispatcherError> {
        let interval = config.heartbeat_interval;
        let dispatcher = Arc::new(Dispatcher::open(config, clock)?);
        let d = dispatcher.clone();
        let server = Server::bind(addr, Arc::new(move |m: Message| d.handle(m)))
            .map_err(|e: WireError| DispatcherError::Io(e.to_string()))?;
        let stop = Arc::new(AtomicBool::new(false));
        let (d, s) = (dispatcher.clone(), stop.clone());
        let tick = (interval / 4).max(Duration::from_millis(5));
        let liveness = thread::Builder::new()
            .name("dispatcher-liveness".into())
            .spawn(move || {
                while !s.load(Ordering::Acquire) {
                    thread::sleep(tick);
                    if let Err(e) = d.check_liveness() {
                        log::error!("liveness check failed: {e}");
                    }
                }
            })
            .map_err(|e| DispatcherError::Io(e.to_string()))?;
        log::info!("dispatcher listening on {}", server.local_addr());
        Ok(Self {
            dispatcher,
            server,
            stop,
            liveness: Mutex::new(Some(liveness)),
        })
    }

    pub fn addr(&self) -> String {
        self.server.local_addr().to_string()
    }

    pub fn dispatcher(&self) -> &Arc<Dispatcher> {
        &self.dispatcher
    }

    /// Abrupt stop: closes the port and every connection.
    pub fn shutdown(&self) {
        self.stop.store(true, Ordering::Release);
        self.server.shutdown();
        if let Some(h) = self.liveness.lock().take() {
            let _ = h.join();
        }
    }
}

impl Drop for DispatcherServer {
    fn drop(&mut self) {
        self.shutdown();
    }
}
