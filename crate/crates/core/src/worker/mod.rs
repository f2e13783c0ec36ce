//! Data-plane worker: runs job tasks, buffers their batches and serves
//! `GetElement` requests. A worker keeps no durable state; everything it
//! needs after a restart comes from the dispatcher.

pub mod cache;
pub mod coordinated;
mod task;

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::Arc;
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use parking_lot::{Mutex, RwLock};

use crate::pipeline::FunctionRegistry;
use crate::wire::{
    codes, CacheStats, ConnectOptions, ElementResult, Endpoint, GetElement, Message, Server,
    TaskReport, TaskSpec, TaskState, WireError,
};

pub use cache::{CacheRead, SlidingWindowCache};
pub use coordinated::{RoundRead, RoundRobinState};
pub use task::{TaskProgress, TaskRuntime};

use task::TaskEnv;

#[derive(Debug, Clone)]
pub struct WorkerConfig {
    pub dispatcher_addr: String,
    /// Address to serve on. `None` runs an in-process worker reachable only
    /// through direct calls.
    pub listen_addr: Option<String>,
    /// Address announced to the dispatcher; defaults to the bound address.
    pub advertise_addr: Option<String>,
    /// Output queue bound per independent task.
    pub buffer_batches: usize,
    /// Sliding window size per shared task.
    pub window_batches: usize,
    pub heartbeat_interval: Duration,
    pub rpc_timeout: Duration,
    /// How long a read waits for data before answering `Pending`.
    pub pending_wait: Duration,
    /// Shared tasks produce when a client is within this many batches of
    /// the front.
    pub shared_lookahead: u64,
    /// Coordinated tasks keep at most this many unconsumed rounds prepared.
    pub rounds_ahead: usize,
    pub compression: bool,
    pub registry: Arc<FunctionRegistry>,
}

impl Default for WorkerConfig {
    fn default() -> Self {
        Self {
            dispatcher_addr: "127.0.0.1:5050".into(),
            listen_addr: Some("127.0.0.1:0".into()),
            advertise_addr: None,
            buffer_batches: 8,
            window_batches: 16,
            heartbeat_interval: Duration::from_secs(1),
            rpc_timeout: Duration::from_secs(5),
            pending_wait: Duration::from_millis(20),
            shared_lookahead: 1,
            rounds_ahead: 2,
            compression: false,
            registry: Arc::new(FunctionRegistry::default()),
        }
    }
}

static LOCAL_WORKERS: AtomicU64 = AtomicU64::new(0);

/// Prefix of addresses that only in-process clients can reach.
pub const LOCAL_ADDR_PREFIX: &str = "local:";

struct Inner {
    config: WorkerConfig,
    address: String,
    env: TaskEnv,
    tasks: RwLock<BTreeMap<u64, Arc<TaskRuntime>>>,
    /// Final snapshots of retired tasks.
    retired: Mutex<BTreeMap<u64, Retired>>,
    retired_cpu: AtomicU64,
    stopped: AtomicBool,
    last_sync: Mutex<Option<Instant>>,
}

struct Retired {
    progress: TaskProgress,
    cache: Option<CacheStats>,
}

impl Inner {
    fn register(&self) -> Result<(), WireError> {
        let resp = self.env.dispatcher.call(
            &Message::RegisterWorker {
                address: self.address.clone(),
            },
            self.config.rpc_timeout,
        )?;
        match resp {
            Message::RegisterWorkerResponse { worker_id, tasks } => {
                self.env.worker_id.store(worker_id, Ordering::Release);
                log::info!("worker {worker_id} registered as {}", self.address);
                for t in tasks {
                    self.ensure_task(t);
                }
                Ok(())
            }
            other => Err(WireError::Malformed(format!(
                "unexpected registration response {:#06x}",
                other.msg_type()
            ))),
        }
    }

    fn ensure_task(&self, spec: TaskSpec) {
        if self.stopped.load(Ordering::Acquire) || self.retired.lock().contains_key(&spec.job_id) {
            return;
        }
        let mut tasks = self.tasks.write();
        if tasks.contains_key(&spec.job_id) {
            return;
        }
        log::info!(
            "worker {} starts task for job {} ({:?}/{:?})",
            self.env.worker_id.load(Ordering::Relaxed),
            spec.job_id,
            spec.policy,
            spec.mode
        );
        let job_id = spec.job_id;
        tasks.insert(job_id, TaskRuntime::start(spec, self.env.clone()));
    }

    /// Pulls the task list now, at most once per 10 ms.
    fn sync_tasks(&self) {
        let mut last = self.last_sync.lock();
        if last.is_some_and(|t| t.elapsed() < Duration::from_millis(10)) {
            return;
        }
        *last = Some(Instant::now());
        let req = Message::ListTasks {
            worker_id: self.env.worker_id.load(Ordering::Acquire),
        };
        match self.env.dispatcher.call(&req, self.config.rpc_timeout) {
            Ok(Message::ListTasksResponse { tasks }) => {
                for t in tasks {
                    self.ensure_task(t);
                }
            }
            Ok(_) => {}
            Err(e) => log::debug!("task sync failed: {e}"),
        }
    }

    fn heartbeat(&self) -> Result<(), WireError> {
        let reports: Vec<TaskReport> = self
            .tasks
            .read()
            .values()
            .map(|t| TaskReport {
                job_id: t.job_id(),
                state: t.state(),
            })
            .collect();
        let req = Message::Heartbeat {
            worker_id: self.env.worker_id.load(Ordering::Acquire),
            tasks: reports,
        };
        let Message::HeartbeatResponse(d) =
            self.env.dispatcher.call(&req, self.config.rpc_timeout)?
        else {
            return Err(WireError::Malformed("unexpected heartbeat response".into()));
        };
        if d.reregister {
            log::warn!("dispatcher asked worker to re-register");
            return self.register();
        }
        for t in d.new_tasks {
            self.ensure_task(t);
        }
        for job in d.completed_jobs {
            self.retire(job);
        }
        Ok(())
    }

    /// Drops a completed job's task once nothing is left to serve.
    fn retire(&self, job_id: u64) {
        let mut tasks = self.tasks.write();
        let Some(t) = tasks.get(&job_id) else {
            return;
        };
        if t.state() == TaskState::Running {
            return;
        }
        let t = tasks.remove(&job_id).expect("present above");
        drop(tasks);
        // Production has finished, so the snapshot is final.
        let progress = t.progress();
        self.retired_cpu
            .fetch_add(progress.cpu_time.as_nanos() as u64, Ordering::Relaxed);
        self.retired.lock().insert(
            job_id,
            Retired {
                progress,
                cache: t.cache_stats(),
            },
        );
        t.stop();
        log::debug!("retired task for job {job_id}");
    }

    fn task(&self, job_id: u64) -> Option<Arc<TaskRuntime>> {
        self.tasks.read().get(&job_id).cloned()
    }

    fn get_element(&self, req: &GetElement) -> Result<ElementResult, WireError> {
        if self.stopped.load(Ordering::Acquire) {
            return Err(WireError::ConnectionLost("worker stopped".into()));
        }
        let task = match self.task(req.job_id) {
            Some(t) => t,
            None => {
                if self.retired.lock().contains_key(&req.job_id) {
                    return Ok(ElementResult::EndOfJob);
                }
                self.sync_tasks();
                self.task(req.job_id)
                    .ok_or_else(|| WireError::RemoteError {
                        code: codes::UNKNOWN_JOB,
                        detail: format!("no task for job {}", req.job_id),
                    })?
            }
        };
        task.get_element(req)
    }

    fn cache_stats(&self, job_id: u64) -> Result<CacheStats, WireError> {
        let unknown = || WireError::RemoteError {
            code: codes::UNKNOWN_JOB,
            detail: format!("no shared task for job {job_id}"),
        };
        match self.task(job_id) {
            Some(t) => t.cache_stats(),
            None => self
                .retired
                .lock()
                .get(&job_id)
                .and_then(|r| r.cache.clone()),
        }
        .ok_or_else(unknown)
    }

    fn handle(&self, msg: Message) -> Message {
        let r = match msg {
            Message::GetElement(g) => self.get_element(&g).map(Message::ElementResult),
            Message::CacheStatsRequest { job_id } => {
                self.cache_stats(job_id).map(Message::CacheStatsResponse)
            }
            other => Err(WireError::RemoteError {
                code: codes::BAD_REQUEST,
                detail: format!("worker does not serve type {:#06x}", other.msg_type()),
            }),
        };
        r.unwrap_or_else(|e| match e {
            WireError::RemoteError { code, detail } => Message::error(code, detail),
            other => Message::error(codes::UNAVAILABLE, other.to_string()),
        })
    }
}

/// A running worker. Dropping it behaves like [`Worker::kill`].
pub struct Worker {
    inner: Arc<Inner>,
    server: Mutex<Option<Server>>,
    heartbeat: Mutex<Option<JoinHandle<()>>>,
}

impl std::fmt::Debug for Worker {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Worker")
            .field("address", &self.inner.address)
            .field("worker_id", &self.worker_id())
            .finish()
    }
}

impl Worker {
    /// Binds the server (if any), registers with the dispatcher and starts
    /// heartbeating. Registration is retried for up to `rpc_timeout`.
    pub fn start(config: WorkerConfig) -> Result<Self, WireError> {
        let slot: Arc<Mutex<Option<Arc<Inner>>>> = Arc::new(Mutex::new(None));
        let (server, address) = match &config.listen_addr {
            Some(addr) => {
                let s = slot.clone();
                let handler = move |m: Message| match s.lock().clone() {
                    Some(inner) => inner.handle(m),
                    None => Message::error(codes::UNAVAILABLE, "worker is starting"),
                };
                let server = Server::bind(addr, Arc::new(handler))?;
                let bound = server.local_addr().to_string();
                let address = config.advertise_addr.clone().unwrap_or(bound);
                (Some(server), address)
            }
            None => {
                let n = LOCAL_WORKERS.fetch_add(1, Ordering::Relaxed);
                (
                    None,
                    format!("{LOCAL_ADDR_PREFIX}{}-{n}", std::process::id()),
                )
            }
        };
        let dispatcher = Arc::new(Endpoint::new(
            config.dispatcher_addr.clone(),
            ConnectOptions {
                connect_timeout: Some(config.rpc_timeout),
                ..Default::default()
            },
        ));
        let env = TaskEnv {
            dispatcher,
            worker_id: Arc::new(AtomicU64::new(0)),
            registry: config.registry.clone(),
            rpc_timeout: config.rpc_timeout,
            buffer_batches: config.buffer_batches,
            window_batches: config.window_batches,
            pending_wait: config.pending_wait,
            shared_lookahead: config.shared_lookahead,
            rounds_ahead: config.rounds_ahead.max(1),
        };
        let inner = Arc::new(Inner {
            config,
            address,
            env,
            tasks: RwLock::new(BTreeMap::new()),
            retired: Mutex::new(BTreeMap::new()),
            retired_cpu: AtomicU64::new(0),
            stopped: AtomicBool::new(false),
            last_sync: Mutex::new(None),
        });

        let deadline = Instant::now() + inner.config.rpc_timeout;
        let mut backoff = Duration::from_millis(10);
        loop {
            match inner.register() {
                Ok(()) => break,
                Err(e) if Instant::now() < deadline => {
                    log::debug!("registration failed, retrying: {e}");
                    thread::sleep(backoff);
                    backoff = (backoff * 2).min(Duration::from_millis(500));
                }
                Err(e) => {
                    if let Some(s) = &server {
                        s.shutdown();
                    }
                    return Err(e);
                }
            }
        }
        *slot.lock() = Some(inner.clone());

        let hb = inner.clone();
        let heartbeat = thread::Builder::new()
            .name("worker-heartbeat".into())
            .spawn(move || heartbeat_loop(hb))
            .map_err(|e| WireError::ConnectionLost(e.to_string()))?;
        Ok(Self {
            inner,
            server: Mutex::new(server),
            heartbeat: Mutex::new(Some(heartbeat)),
        })
    }

    /// The address registered with the dispatcher.
    pub fn address(&self) -> &str {
        &self.inner.address
    }

    pub fn worker_id(&self) -> u64 {
        self.inner.env.worker_id.load(Ordering::Acquire)
    }

    pub fn is_local_only(&self) -> bool {
        self.inner.address.starts_with(LOCAL_ADDR_PREFIX)
    }

    /// Direct-call read, used by in-process clients.
    pub fn get_element(&self, req: &GetElement) -> Result<ElementResult, WireError> {
        self.inner.get_element(req)
    }

    pub fn cache_stats(&self, job_id: u64) -> Result<CacheStats, WireError> {
        self.inner.cache_stats(job_id)
    }

    /// Progress of the job's task, or its final snapshot once retired.
    pub fn task_progress(&self, job_id: u64) -> Option<TaskProgress> {
        match self.inner.task(job_id) {
            Some(t) => Some(t.progress()),
            None => self
                .inner
                .retired
                .lock()
                .get(&job_id)
                .map(|r| r.progress.clone()),
        }
    }

    pub fn task_ids(&self) -> Vec<u64> {
        self.inner.tasks.read().keys().copied().collect()
    }

    /// Producer CPU time across all tasks, retired ones included.
    pub fn cpu_time(&self) -> Duration {
        let live: u64 = self
            .inner
            .tasks
            .read()
            .values()
            .map(|t| t.progress().cpu_time.as_nanos() as u64)
            .sum();
        Duration::from_nanos(live + self.inner.retired_cpu.load(Ordering::Relaxed))
    }

    /// Sends one heartbeat now and applies the directives.
    pub fn heartbeat_now(&self) -> Result<(), WireError> {
        self.inner.heartbeat()
    }

    pub fn is_stopped(&self) -> bool {
        self.inner.stopped.load(Ordering::Acquire)
    }

    /// Abrupt stop, as in a crash: the port closes, production stops and
    /// buffered batches are discarded. Nothing is reported to the dispatcher.
    pub fn kill(&self) {
        if self.inner.stopped.swap(true, Ordering::AcqRel) {
            return;
        }
        if let Some(s) = self.server.lock().take() {
            s.shutdown();
        }
        if let Some(h) = self.heartbeat.lock().take() {
            let _ = h.join();
        }
        let tasks: Vec<_> = self.inner.tasks.read().values().cloned().collect();
        for t in tasks {
            t.stop();
        }
        self.inner.env.dispatcher.close();
        log::info!("worker {} stopped", self.worker_id());
    }
}

impl Drop for Worker {
    fn drop(&mut self) {
        self.kill();
    }
}

fn heartbeat_loop(inner: Arc<Inner>) {
    let interval = inner.config.heartbeat_interval;
    let tick = interval.min(Duration::from_millis(20));
    let mut next = Instant::now() + interval;
    while !inner.stopped.load(Ordering::Acquire) {
        if Instant::now() < next {
            thread::sleep(tick.min(next.saturating_duration_since(Instant::now())));
            continue;
        }
        next = Instant::now() + interval;
        if let Err(e) = inner.heartbeat() {
            log::debug!("heartbeat failed: {e}");
        }
    }
}
