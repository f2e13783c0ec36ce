use std::collections::{BTreeMap, BTreeSet, VecDeque};

use serde::{Deserialize, Serialize};

use crate::records::ShardSpec;
use crate::wire::{JobMode, ShardingPolicy, TaskSpec, WorkerInfo};

use super::journal::{Event, JournalRecord};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WorkerEntry {
    pub address: String,
    pub alive: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum JobStatus {
    Active,
    Completed,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskEntry {
    pub worker_index: u32,
    pub static_shards: Vec<u64>,
}

/// DYNAMIC split bookkeeping. `pending`, `in_flight` and `completed`
/// partition the shard ids; `lost` is the subset of `completed` whose worker
/// died while holding it.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShardAssignment {
    pub pending: VecDeque<u64>,
    pub in_flight: BTreeMap<u64, u64>,
    pub completed: BTreeSet<u64>,
    pub lost: BTreeSet<u64>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct JobState {
    pub job_id: u64,
    pub job_name: String,
    pub fingerprint: u64,
    pub graph: Vec<u8>,
    pub policy: ShardingPolicy,
    pub mode: JobMode,
    pub num_consumers: Option<u32>,
    pub clients: BTreeSet<u64>,
    /// Keyed by worker id.
    pub tasks: BTreeMap<u64, TaskEntry>,
    pub status: JobStatus,
    pub shards: BTreeMap<u64, ShardSpec>,
    pub assignment: Option<ShardAssignment>,
}

impl JobState {
    /// Task worker ids ordered by task index.
    pub fn ordered_tasks(&self) -> Vec<(u64, &TaskEntry)> {
        let mut v: Vec<_> = self.tasks.iter().map(|(w, t)| (*w, t)).collect();
        v.sort_by_key(|(_, t)| t.worker_index);
        v
    }
}

/// Everything the journal records. Liveness timestamps and task progress
/// are volatile and live outside this struct.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DispatcherState {
    pub last_sequence: u64,
    pub next_worker_id: u64,
    pub next_job_id: u64,
    pub next_client_id: u64,
    pub workers: BTreeMap<u64, WorkerEntry>,
    pub jobs: BTreeMap<u64, JobState>,
}

impl Default for DispatcherState {
    fn default() -> Self {
        Self {
            last_sequence: 0,
            next_worker_id: 1,
            next_job_id: 1,
            next_client_id: 1,
            workers: BTreeMap::new(),
            jobs: BTreeMap::new(),
        }
    }
}

impl DispatcherState {
    /// Folds a journal into a state.
    pub fn replay(records: &[JournalRecord]) -> Result<Self, String> {
        let mut s = Self::default();
        for r in records {
            s.apply(r.sequence, &r.event)?;
        }
        Ok(s)
    }

    /// Canonical JSON rendering; equal states give identical bytes.
    pub fn canonical_dump(&self) -> String {
        serde_json::to_string_pretty(self).expect("state serializes")
    }

    pub fn worker_by_address(&self, address: &str) -> Option<u64> {
        self.workers
            .iter()
            .find(|(_, w)| w.address == address)
            .map(|(id, _)| *id)
    }

    pub fn active_job_by_name(&self, name: &str) -> Option<&JobState> {
        self.jobs
            .values()
            .find(|j| j.job_name == name && j.status == JobStatus::Active)
    }

    pub fn is_alive(&self, worker_id: u64) -> bool {
        self.workers.get(&worker_id).is_some_and(|w| w.alive)
    }

    pub fn task_spec(&self, job: &JobState, worker_id: u64) -> Option<TaskSpec> {
        let t = job.tasks.get(&worker_id)?;
        Some(TaskSpec {
            job_id: job.job_id,
            job_name: job.job_name.clone(),
            graph: job.graph.clone(),
            policy: job.policy,
            mode: job.mode,
            num_consumers: job.num_consumers.unwrap_or(0),
            worker_index: t.worker_index,
            num_workers: job.tasks.len() as u32,
            static_shards: t
                .static_shards
                .iter()
                .filter_map(|id| job.shards.get(id).cloned())
                .collect(),
        })
    }

    /// Active tasks assigned to `worker_id`.
    pub fn tasks_for(&self, worker_id: u64) -> Vec<TaskSpec> {
        self.jobs
            .values()
            .filter(|j| j.status == JobStatus::Active)
            .filter_map(|j| self.task_spec(j, worker_id))
            .collect()
    }

    /// Workers serving a job, in task order. Coordinated jobs keep dead
    /// workers so that round ownership stays fixed.
    pub fn job_workers(&self, job: &JobState) -> Vec<WorkerInfo> {
        job.ordered_tasks()
            .into_iter()
            .filter(|(w, _)| job.mode == JobMode::Coordinated || self.is_alive(*w))
            .filter_map(|(w, _)| {
                self.workers.get(&w).map(|e| WorkerInfo {
                    worker_id: w,
                    address: e.address.clone(),
                })
            })
            .collect()
    }

    pub fn apply(&mut self, sequence: u64, event: &Event) -> Result<(), String> {
        if sequence <= self.last_sequence {
            return Err(format!("sequence {sequence} after {}", self.last_sequence));
        }
        match event {
            Event::WorkerRegistered { worker_id, address } => {
                self.workers.insert(
                    *worker_id,
                    WorkerEntry {
                        address: address.clone(),
                        alive: true,
                    },
                );
                self.next_worker_id = self.next_worker_id.max(worker_id + 1);
            }
            Event::WorkerLost { worker_id } => {
                let w = self
                    .workers
                    .get_mut(worker_id)
                    .ok_or_else(|| format!("unknown worker {worker_id}"))?;
                w.alive = false;
                for job in self.jobs.values_mut() {
                    if let Some(a) = job.assignment.as_mut() {
                        if let Some(s) = a.in_flight.remove(worker_id) {
                            a.completed.insert(s);
                            a.lost.insert(s);
                        }
                    }
                }
            }
            Event::JobRegistered {
                job_id,
                job_name,
                fingerprint,
                graph,
                policy,
                mode,
                num_consumers,
                shards,
            } => {
                if self.jobs.contains_key(job_id) {
                    return Err(format!("job {job_id} registered twice"));
                }
                let assignment = (*policy == ShardingPolicy::Dynamic).then(|| ShardAssignment {
                    pending: shards.iter().map(|s| s.shard_id).collect(),
                    ..Default::default()
                });
                self.jobs.insert(
                    *job_id,
                    JobState {
                        job_id: *job_id,
                        job_name: job_name.clone(),
                        fingerprint: *fingerprint,
                        graph: graph.clone(),
                        policy: *policy,
                        mode: *mode,
                        num_consumers: *num_consumers,
                        clients: BTreeSet::new(),
                        tasks: BTreeMap::new(),
                        status: JobStatus::Active,
                        shards: shards.iter().map(|s| (s.shard_id, s.clone())).collect(),
                        assignment,
                    },
                );
                self.next_job_id = self.next_job_id.max(job_id + 1);
            }
            Event::TaskCreated {
                job_id,
                worker_id,
                worker_index,
                static_shards,
            } => {
                if !self.workers.contains_key(worker_id) {
                    return Err(format!("task for unknown worker {worker_id}"));
                }
                self.job_mut(*job_id)?.tasks.insert(
                    *worker_id,
                    TaskEntry {
                        worker_index: *worker_index,
                        static_shards: static_shards.clone(),
                    },
                );
            }
            Event::SplitAssigned {
                job_id,
                worker_id,
                shard_id,
            } => {
                let a = self.assignment_mut(*job_id)?;
                if a.pending.front() != Some(shard_id) {
                    return Err(format!("shard {shard_id} is not at the head of the queue"));
                }
                if a.in_flight.contains_key(worker_id) {
                    return Err(format!("worker {worker_id} already holds a split"));
                }
                a.pending.pop_front();
                a.in_flight.insert(*worker_id, *shard_id);
            }
            Event::SplitCompleted {
                job_id,
                worker_id,
                shard_id,
            } => {
                let a = self.assignment_mut(*job_id)?;
                if a.in_flight.get(worker_id) != Some(shard_id) {
                    return Err(format!(
                        "shard {shard_id} not in flight on worker {worker_id}"
                    ));
                }
                a.in_flight.remove(worker_id);
                a.completed.insert(*shard_id);
            }
            Event::JobCompleted { job_id } => {
                self.job_mut(*job_id)?.status = JobStatus::Completed;
            }
            Event::ClientJoined { job_id, client_id } => {
                self.job_mut(*job_id)?.clients.insert(*client_id);
                self.next_client_id = self.next_client_id.max(client_id + 1);
            }
        }
        self.last_sequence = sequence;
        Ok(())
    }

    fn job_mut(&mut self, job_id: u64) -> Result<&mut JobState, String> {
        self.jobs
            .get_mut(&job_id)
            .ok_or_else(|| format!("unknown job {job_id}"))
    }

    fn assignment_mut(&mut self, job_id: u64) -> Result<&mut ShardAssignment, String> {
        self.job_mut(job_id)?
            .assignment
            .as_mut()
            .ok_or_else(|| format!("job {job_id} has no split queue"))
    }
}
