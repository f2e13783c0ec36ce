use serde::{Deserialize, Serialize};

use crate::kv::{KvError, KvMap};
use crate::pipeline::{Batch, Element};
use crate::records::ShardSpec;

pub const REGISTER_WORKER: u16 = 0x0001;
pub const REGISTER_JOB: u16 = 0x0002;
pub const GET_SPLIT: u16 = 0x0003;
pub const HEARTBEAT: u16 = 0x0004;
pub const LIST_TASKS: u16 = 0x0005;
pub const GET_ELEMENT: u16 = 0x0006;
pub const CLIENT_HEARTBEAT: u16 = 0x0007;
pub const CACHE_STATS: u16 = 0x0008;
pub const RESPONSE_BIT: u16 = 0x8000;
pub const ERROR: u16 = 0x7fff;

/// Error codes carried by [`Message::Error`].
pub mod codes {
    pub const UNKNOWN_TYPE: u16 = 1;
    pub const BAD_REQUEST: u16 = 2;
    pub const UNKNOWN_JOB: u16 = 3;
    pub const UNKNOWN_WORKER: u16 = 4;
    pub const POLICY_MISMATCH: u16 = 5;
    pub const WRONG_POLICY: u16 = 6;
    pub const WRONG_WORKER_FOR_ROUND: u16 = 7;
    pub const INTERNAL: u16 = 8;
    pub const NO_WORKERS: u16 = 9;
    pub const UNAVAILABLE: u16 = 10;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ShardingPolicy {
    Off,
    Dynamic,
    Static,
}

impl ShardingPolicy {
    pub fn code(self) -> u64 {
        match self {
            ShardingPolicy::Off => 0,
            ShardingPolicy::Dynamic => 1,
            ShardingPolicy::Static => 2,
        }
    }

    pub fn from_code(c: u64) -> Option<Self> {
        [
            ShardingPolicy::Off,
            ShardingPolicy::Dynamic,
            ShardingPolicy::Static,
        ]
        .get(c as usize)
        .copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            ShardingPolicy::Off => "off",
            ShardingPolicy::Dynamic => "dynamic",
            ShardingPolicy::Static => "static",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s.to_ascii_lowercase().as_str() {
            "off" => Some(ShardingPolicy::Off),
            "dynamic" => Some(ShardingPolicy::Dynamic),
            "static" => Some(ShardingPolicy::Static),
            _ => None,
        }
    }
}

/// How the batches of a job are served to its clients.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum JobMode {
    /// Every batch goes to exactly one client.
    Independent,
    /// Clients read through a per-worker sliding-window cache.
    Shared,
    /// Round-robin rounds of same-bucket batches, one per consumer.
    Coordinated,
}

impl JobMode {
    pub fn code(self) -> u64 {
        match self {
            JobMode::Independent => 0,
            JobMode::Shared => 1,
            JobMode::Coordinated => 2,
        }
    }

    pub fn from_code(c: u64) -> Option<Self> {
        [JobMode::Independent, JobMode::Shared, JobMode::Coordinated]
            .get(c as usize)
            .copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            JobMode::Independent => "independent",
            JobMode::Shared => "shared",
            JobMode::Coordinated => "coordinated",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s.to_ascii_lowercase().as_str() {
            "independent" => Some(JobMode::Independent),
            "shared" => Some(JobMode::Shared),
            "coordinated" => Some(JobMode::Coordinated),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TaskState {
    Running,
    /// Production finished; buffered batches may remain.
    Done,
    Failed,
}

/// Everything a worker needs to run its part of a job.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TaskSpec {
    pub job_id: u64,
    pub job_name: String,
    pub graph: Vec<u8>,
    pub policy: ShardingPolicy,
    pub mode: JobMode,
    pub num_consumers: u32,
    pub worker_index: u32,
    pub num_workers: u32,
    pub static_shards: Vec<ShardSpec>,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct WorkerInfo {
    pub worker_id: u64,
    pub address: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RegisterJob {
    pub job_name: String,
    pub graph: Vec<u8>,
    pub policy: ShardingPolicy,
    pub mode: JobMode,
    pub num_consumers: Option<u32>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct JobHandleInfo {
    pub job_id: u64,
    pub client_id: u64,
    /// Ordered by task index (round ownership in coordinated mode).
    pub workers: Vec<WorkerInfo>,
    pub joined_existing: bool,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TaskReport {
    pub job_id: u64,
    pub state: TaskState,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Directives {
    pub reregister: bool,
    pub new_tasks: Vec<TaskSpec>,
    pub completed_jobs: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct JobUpdate {
    pub job_id: u64,
    pub workers: Vec<WorkerInfo>,
    /// All live tasks finished producing.
    pub finished: bool,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GetElement {
    pub job_id: u64,
    pub client_id: u64,
    pub consumer_index: Option<u32>,
    pub round: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ElementResult {
    Batch(Batch),
    Pending,
    EndOfJob,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct CacheStats {
    pub window_floor: u64,
    pub next_seq: u64,
    /// `(client_id, sequence)` sorted by client id.
    pub pointers: Vec<(u64, u64)>,
    pub evictions: u64,
    pub produced: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Message {
    RegisterWorker {
        address: String,
    },
    RegisterWorkerResponse {
        worker_id: u64,
        tasks: Vec<TaskSpec>,
    },
    RegisterJob(RegisterJob),
    RegisterJobResponse(JobHandleInfo),
    GetSplit {
        job_id: u64,
        worker_id: u64,
    },
    /// `None` means end of splits.
    SplitResponse(Option<ShardSpec>),
    Heartbeat {
        worker_id: u64,
        tasks: Vec<TaskReport>,
    },
    HeartbeatResponse(Directives),
    ListTasks {
        worker_id: u64,
    },
    ListTasksResponse {
        tasks: Vec<TaskSpec>,
    },
    GetElement(GetElement),
    ElementResult(ElementResult),
    ClientHeartbeat {
        job_id: u64,
        client_id: u64,
    },
    JobUpdate(JobUpdate),
    CacheStatsRequest {
        job_id: u64,
    },
    CacheStatsResponse(CacheStats),
    Error {
        code: u16,
        detail: String,
    },
}

impl Message {
    pub fn msg_type(&self) -> u16 {
        use Message::*;
        match self {
            RegisterWorker { .. } => REGISTER_WORKER,
            RegisterWorkerResponse { .. } => REGISTER_WORKER | RESPONSE_BIT,
            RegisterJob(_) => REGISTER_JOB,
            RegisterJobResponse(_) => REGISTER_JOB | RESPONSE_BIT,
            GetSplit { .. } => GET_SPLIT,
            SplitResponse(_) => GET_SPLIT | RESPONSE_BIT,
            Heartbeat { .. } => HEARTBEAT,
            HeartbeatResponse(_) => HEARTBEAT | RESPONSE_BIT,
            ListTasks { .. } => LIST_TASKS,
            ListTasksResponse { .. } => LIST_TASKS | RESPONSE_BIT,
            GetElement(_) => GET_ELEMENT,
            ElementResult(_) => GET_ELEMENT | RESPONSE_BIT,
            ClientHeartbeat { .. } => CLIENT_HEARTBEAT,
            JobUpdate(_) => CLIENT_HEARTBEAT | RESPONSE_BIT,
            CacheStatsRequest { .. } => CACHE_STATS,
            CacheStatsResponse(_) => CACHE_STATS | RESPONSE_BIT,
            Error { .. } => ERROR,
        }
    }

    pub fn is_request(&self) -> bool {
        self.msg_type() & RESPONSE_BIT == 0 && self.msg_type() != ERROR
    }

    /// The only non-error response type allowed for a request type.
    pub fn response_type(request_type: u16) -> Option<u16> {
        match request_type {
            REGISTER_WORKER | REGISTER_JOB | GET_SPLIT | HEARTBEAT | LIST_TASKS | GET_ELEMENT
            | CLIENT_HEARTBEAT | CACHE_STATS => Some(request_type | RESPONSE_BIT),
            _ => None,
        }
    }

    pub fn is_known_type(t: u16) -> bool {
        t == ERROR
            || Self::response_type(t).is_some()
            || Self::response_type(t & !RESPONSE_BIT)
                .map(|r| r == t)
                .unwrap_or(false)
    }

    pub fn error(code: u16, detail: impl Into<String>) -> Self {
        Message::Error {
            code,
            detail: detail.into(),
        }
    }

    pub fn to_body(&self) -> Result<Vec<u8>, KvError> {
        self.to_kv()?.encode()
    }

    fn to_kv(&self) -> Result<KvMap, KvError> {
        let mut m = KvMap::new();
        match self {
            Message::RegisterWorker { address } => {
                m.put_str("address", address);
            }
            Message::RegisterWorkerResponse { worker_id, tasks } => {
                m.put_u64("worker_id", *worker_id);
                put_tasks(&mut m, tasks)?;
            }
            Message::RegisterJob(r) => {
                m.put_str("job_name", &r.job_name)
                    .put_bytes("graph", r.graph.clone())
                    .put_u64("policy", r.policy.code())
                    .put_u64("mode", r.mode.code());
                if let Some(n) = r.num_consumers {
                    m.put_u64("num_consumers", u64::from(n));
                }
            }
            Message::RegisterJobResponse(h) => {
                m.put_u64("job_id", h.job_id)
                    .put_u64("client_id", h.client_id)
                    .put_bool("joined", h.joined_existing);
                put_workers(&mut m, &h.workers)?;
            }
            Message::GetSplit { job_id, worker_id } => {
                m.put_u64("job_id", *job_id)
                    .put_u64("worker_id", *worker_id);
            }
            Message::SplitResponse(shard) => {
                if let Some(s) = shard {
                    m.put_bytes("shard", s.to_kv().encode()?);
                }
            }
            Message::Heartbeat { worker_id, tasks } => {
                m.put_u64("worker_id", *worker_id);
                let mut flat = Vec::with_capacity(tasks.len() * 2);
                for t in tasks {
                    flat.push(t.job_id);
                    flat.push(match t.state {
                        TaskState::Running => 0,
                        TaskState::Done => 1,
                        TaskState::Failed => 2,
                    });
                }
                m.put_u64_list("tasks", &flat);
            }
            Message::HeartbeatResponse(d) => {
                m.put_bool("reregister", d.reregister)
                    .put_u64_list("completed_jobs", &d.completed_jobs);
                put_tasks(&mut m, &d.new_tasks)?;
            }
            Message::ListTasks { worker_id } => {
                m.put_u64("worker_id", *worker_id);
            }
            Message::ListTasksResponse { tasks } => {
                put_tasks(&mut m, tasks)?;
            }
            Message::GetElement(g) => {
                m.put_u64("job_id", g.job_id)
                    .put_u64("client_id", g.client_id);
                if let Some(c) = g.consumer_index {
                    m.put_u64("consumer_index", u64::from(c));
                }
                if let Some(r) = g.round {
                    m.put_u64("round", r);
                }
            }
            Message::ElementResult(r) => match r {
                ElementResult::Batch(b) => {
                    m.put_u64("status", 0).put_bytes("batch", encode_batch(b)?);
                }
                ElementResult::Pending => {
                    m.put_u64("status", 1);
                }
                ElementResult::EndOfJob => {
                    m.put_u64("status", 2);
                }
            },
            Message::ClientHeartbeat { job_id, client_id } => {
                m.put_u64("job_id", *job_id)
                    .put_u64("client_id", *client_id);
            }
            Message::JobUpdate(u) => {
                m.put_u64("job_id", u.job_id)
                    .put_bool("finished", u.finished);
                put_workers(&mut m, &u.workers)?;
            }
            Message::CacheStatsRequest { job_id } => {
                m.put_u64("job_id", *job_id);
            }
            Message::CacheStatsResponse(s) => {
                let flat: Vec<u64> = s.pointers.iter().flat_map(|&(c, p)| [c, p]).collect();
                m.put_u64("floor", s.window_floor)
                    .put_u64("next_seq", s.next_seq)
                    .put_u64("evictions", s.evictions)
                    .put_u64("produced", s.produced)
                    .put_u64_list("pointers", &flat);
            }
            Message::Error { code, detail } => {
                m.put_u64("code", u64::from(*code))
                    .put_str("detail", detail);
            }
        }
        Ok(m)
    }

    /// Decodes a body for a known message type.
    pub fn from_body(msg_type: u16, body: &[u8]) -> Result<Self, KvError> {
        let m = KvMap::decode(body)?;
        let bad = |key: &str, reason: &str| KvError::BadValue {
            key: key.to_string(),
            reason: reason.to_string(),
        };
        let msg = match msg_type {
            REGISTER_WORKER => Message::RegisterWorker {
                address: m.str("address")?.to_string(),
            },
            t if t == REGISTER_WORKER | RESPONSE_BIT => Message::RegisterWorkerResponse {
                worker_id: m.u64("worker_id")?,
                tasks: get_tasks(&m)?,
            },
            REGISTER_JOB => Message::RegisterJob(RegisterJob {
                job_name: m.str("job_name")?.to_string(),
                graph: m.bytes("graph")?.to_vec(),
                policy: ShardingPolicy::from_code(m.u64("policy")?)
                    .ok_or_else(|| bad("policy", "unknown"))?,
                mode: JobMode::from_code(m.u64("mode")?).ok_or_else(|| bad("mode", "unknown"))?,
                num_consumers: m.opt_u64("num_consumers")?.map(|n| n as u32),
            }),
            t if t == REGISTER_JOB | RESPONSE_BIT => Message::RegisterJobResponse(JobHandleInfo {
                job_id: m.u64("job_id")?,
                client_id: m.u64("client_id")?,
                joined_existing: m.bool("joined")?,
                workers: get_workers(&m)?,
            }),
            GET_SPLIT => Message::GetSplit {
                job_id: m.u64("job_id")?,
                worker_id: m.u64("worker_id")?,
            },
            t if t == GET_SPLIT | RESPONSE_BIT => {
                Message::SplitResponse(match m.opt_bytes("shard") {
                    Some(raw) => Some(ShardSpec::from_kv(&KvMap::decode(raw)?)?),
                    None => None,
                })
            }
            HEARTBEAT => {
                let flat = m.u64_list("tasks")?;
                if flat.len() % 2 != 0 {
                    return Err(bad("tasks", "odd length"));
                }
                let tasks = flat
                    .chunks_exact(2)
                    .map(|c| {
                        let state = match c[1] {
                            0 => TaskState::Running,
                            1 => TaskState::Done,
                            2 => TaskState::Failed,
                            _ => return Err(bad("tasks", "unknown state")),
                        };
                        Ok(TaskReport {
                            job_id: c[0],
                            state,
                        })
                    })
                    .collect::<Result<_, _>>()?;
                Message::Heartbeat {
                    worker_id: m.u64("worker_id")?,
                    tasks,
                }
            }
            t if t == HEARTBEAT | RESPONSE_BIT => Message::HeartbeatResponse(Directives {
                reregister: m.bool("reregister")?,
                completed_jobs: m.u64_list("completed_jobs")?,
                new_tasks: get_tasks(&m)?,
            }),
            LIST_TASKS => Message::ListTasks {
                worker_id: m.u64("worker_id")?,
            },
            t if t == LIST_TASKS | RESPONSE_BIT => Message::ListTasksResponse {
                tasks: get_tasks(&m)?,
            },
            GET_ELEMENT => Message::GetElement(GetElement {
                job_id: m.u64("job_id")?,
                client_id: m.u64("client_id")?,
                consumer_index: m.opt_u64("consumer_index")?.map(|c| c as u32),
                round: m.opt_u64("round")?,
            }),
            t if t == GET_ELEMENT | RESPONSE_BIT => {
                Message::ElementResult(match m.u64("status")? {
                    0 => ElementResult::Batch(decode_batch(m.bytes("batch")?)?),
                    1 => ElementResult::Pending,
                    2 => ElementResult::EndOfJob,
                    _ => return Err(bad("status", "unknown")),
                })
            }
            CLIENT_HEARTBEAT => Message::ClientHeartbeat {
                job_id: m.u64("job_id")?,
                client_id: m.u64("client_id")?,
            },
            t if t == CLIENT_HEARTBEAT | RESPONSE_BIT => Message::JobUpdate(JobUpdate {
                job_id: m.u64("job_id")?,
                finished: m.bool("finished")?,
                workers: get_workers(&m)?,
            }),
            CACHE_STATS => Message::CacheStatsRequest {
                job_id: m.u64("job_id")?,
            },
            t if t == CACHE_STATS | RESPONSE_BIT => {
                let flat = m.u64_list("pointers")?;
                if flat.len() % 2 != 0 {
                    return Err(bad("pointers", "odd length"));
                }
                Message::CacheStatsResponse(CacheStats {
                    window_floor: m.u64("floor")?,
                    next_seq: m.u64("next_seq")?,
                    evictions: m.u64("evictions")?,
                    produced: m.u64("produced")?,
                    pointers: flat.chunks_exact(2).map(|c| (c[0], c[1])).collect(),
                })
            }
            ERROR => Message::Error {
                code: u16::try_from(m.u64("code")?).map_err(|_| bad("code", "out of range"))?,
                detail: m.str("detail")?.to_string(),
            },
            other => return Err(bad("msg_type", &format!("unknown type {other:#06x}"))),
        };
        Ok(msg)
    }
}

fn put_tasks(m: &mut KvMap, tasks: &[TaskSpec]) -> Result<(), KvError> {
    let blobs = tasks
        .iter()
        .map(encode_task)
        .collect::<Result<Vec<_>, _>>()?;
    m.put_list("tasks", &blobs);
    Ok(())
}

fn get_tasks(m: &KvMap) -> Result<Vec<TaskSpec>, KvError> {
    m.list("tasks")?.into_iter().map(decode_task).collect()
}

fn put_workers(m: &mut KvMap, workers: &[WorkerInfo]) -> Result<(), KvError> {
    let blobs = workers
        .iter()
        .map(|w| {
            let mut wm = KvMap::new();
            wm.put_u64("id", w.worker_id).put_str("address", &w.address);
            wm.encode()
        })
        .collect::<Result<Vec<_>, _>>()?;
    m.put_list("workers", &blobs);
    Ok(())
}

fn get_workers(m: &KvMap) -> Result<Vec<WorkerInfo>, KvError> {
    m.list("workers")?
        .into_iter()
        .map(|raw| {
            let wm = KvMap::decode(raw)?;
            Ok(WorkerInfo {
                worker_id: wm.u64("id")?,
                address: wm.str("address")?.to_string(),
            })
        })
        .collect()
}

pub fn encode_task(t: &TaskSpec) -> Result<Vec<u8>, KvError> {
    let mut m = KvMap::new();
    m.put_u64("job_id", t.job_id)
        .put_str("job_name", &t.job_name)
        .put_bytes("graph", t.graph.clone())
        .put_u64("policy", t.policy.code())
        .put_u64("mode", t.mode.code())
        .put_u64("num_consumers", u64::from(t.num_consumers))
        .put_u64("worker_index", u64::from(t.worker_index))
        .put_u64("num_workers", u64::from(t.num_workers));
    let shards = t
        .static_shards
        .iter()
        .map(|s| s.to_kv().encode())
        .collect::<Result<Vec<_>, _>>()?;
    m.put_list("static_shards", &shards);
    m.encode()
}

pub fn decode_task(raw: &[u8]) -> Result<TaskSpec, KvError> {
    let m = KvMap::decode(raw)?;
    let bad = |key: &str| KvError::BadValue {
        key: key.to_string(),
        reason: "unknown".into(),
    };
    Ok(TaskSpec {
        job_id: m.u64("job_id")?,
        job_name: m.str("job_name")?.to_string(),
        graph: m.bytes("graph")?.to_vec(),
        policy: ShardingPolicy::from_code(m.u64("policy")?).ok_or_else(|| bad("policy"))?,
        mode: JobMode::from_code(m.u64("mode")?).ok_or_else(|| bad("mode"))?,
        num_consumers: m.u64("num_consumers")? as u32,
        worker_index: m.u64("worker_index")? as u32,
        num_workers: m.u64("num_workers")? as u32,
        static_shards: m
            .list("static_shards")?
            .into_iter()
            .map(|raw| ShardSpec::from_kv(&KvMap::decode(raw)?))
            .collect::<Result<_, _>>()?,
    })
}

/// Element blob: key u64 | seq_len u32 | payload.
fn encode_element(e: &Element) -> Vec<u8> {
    let mut out = Vec::with_capacity(12 + e.payload.len());
    out.extend_from_slice(&e.key.to_le_bytes());
    out.extend_from_slice(&e.seq_len.to_le_bytes());
    out.extend_from_slice(&e.payload);
    out
}

fn decode_element(raw: &[u8]) -> Result<Element, KvError> {
    if raw.len() < 12 {
        return Err(KvError::BadValue {
            key: "elements".into(),
            reason: "short element".into(),
        });
    }
    Ok(Element {
        key: u64::from_le_bytes(raw[0..8].try_into().unwrap()),
        seq_len: u32::from_le_bytes(raw[8..12].try_into().unwrap()),
        payload: raw[12..].to_vec(),
    })
}

pub fn encode_batch(b: &Batch) -> Result<Vec<u8>, KvError> {
    let mut m = KvMap::new();
    m.put_u64("padded_len", u64::from(b.padded_len));
    if let Some(bucket) = b.bucket_id {
        m.put_u64("bucket", u64::from(bucket));
    }
    if let Some(round) = b.producer_round {
        m.put_u64("round", round);
    }
    let elems: Vec<Vec<u8>> = b.elements.iter().map(encode_element).collect();
    m.put_list("elements", &elems);
    m.encode()
}

pub fn decode_batch(raw: &[u8]) -> Result<Batch, KvError> {
    let m = KvMap::decode(raw)?;
    let elements = m
        .list("elements")?
        .into_iter()
        .map(decode_element)
        .collect::<Result<Vec<_>, _>>()?;
    if elements.is_empty() {
        return Err(KvError::BadValue {
            key: "elements".into(),
            reason: "empty batch".into(),
        });
    }
    Ok(Batch {
        elements,
        padded_len: m.u64("padded_len")? as u32,
        bucket_id: m.opt_u64("bucket")?.map(|b| b as u32),
        producer_round: m.opt_u64("round")?,
    })
}
