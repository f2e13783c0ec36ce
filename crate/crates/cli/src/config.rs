//! Experiment configuration and its flat `key = value` text form.
//!
//! One setting per line, `#` starts a comment, unknown keys are errors.
//!
//! | key | meaning | default |
//! |---|---|---|
//! | `experiment_id` | label carried into reports | `exp` |
//! | `workers` | remote workers | 1 |
//! | `clients` | consuming clients | 1 |
//! | `colocated` | give each client an in-process worker it reads locally | false |
//! | `ideal` | append `take(1).cache().repeat()` to the pipeline | false |
//! | `files`, `records_per_file` | synthetic dataset shape | 4, 256 |
//! | `payload_min`, `payload_max` | payload bytes per record | 16, 64 |
//! | `seq_len` | `fixed:N`, `uniform:MIN:MAX` or `bimodal:SHORT:LONG:P` | `fixed:64` |
//! | `seed` | dataset and shuffle seed | 1 |
//! | `batch_size` | elements per batch | 32 |
//! | `boundaries` | comma list; bucket by sequence length instead of plain batching | none |
//! | `shuffle_buffer` | element shuffle buffer, 0 disables | 0 |
//! | `epochs` | passes over the data | 1 |
//! | `busy_work_ms` | CPU burned per element by workers | 0 |
//! | `step_ms` | simulated step at the longest sequence length | 0 |
//! | `policy` | `off`, `dynamic` or `static` | `off` |
//! | `mode` | `independent`, `shared` or `coordinated` | `independent` |
//! | `job_name` | name clients join by | `bench` |
//! | `max_batches` | per-client batch budget | unlimited |
//! | `duration_ms` | per-client time budget | unlimited |
//! | `timeout_ms` | hard limit for the whole run | 120000 |
//! | `latency_ms` | delay injected before every worker read | 0 |
//! | `failures` | `;`-separated `TARGET@TRIGGER[+RESTART_MS]` | none |
//! | `worker_buffer`, `window_batches` | worker output queue and shared window | 8, 16 |
//! | `client_buffer` | batches a client buffers ahead | 8 |
//! | `compression` | compress wire bodies | false |
//! | `heartbeat_ms`, `worker_timeout_ms` | liveness settings | 50, 400 |
//! | `client_start` | `concurrent` or `sequential` | `concurrent` |
//!
//! Failure targets are `worker:I` or `dispatcher`. Triggers are `N%` of the
//! dataset consumed, `N` elements consumed, or `Nms` after start. A trailing
//! `+MS` restarts the target after that delay; a restarted worker comes back
//! on a fresh address.

use std::fmt;
use std::str::FromStr;
use std::time::Duration;

use prepserve::records::{SeqLenDist, SyntheticSpec};
use prepserve::wire::{JobMode, ShardingPolicy};

use crate::HarnessError;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Target {
    Worker(usize),
    Dispatcher,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Trigger {
    /// Fraction of the dataset consumed, across clients.
    Fraction(f64),
    Elements(u64),
    Elapsed(Duration),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FailureSpec {
    pub target: Target,
    pub trigger: Trigger,
    pub restart_after: Option<Duration>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ClientStart {
    Concurrent,
    /// Each client starts once the previous one has finished.
    Sequential,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub experiment_id: String,
    pub workers: usize,
    pub clients: usize,
    pub colocated: bool,
    pub ideal: bool,
    pub dataset: SyntheticSpec,
    pub batch_size: u64,
    pub boundaries: Vec<u64>,
    pub shuffle_buffer: u64,
    pub epochs: u64,
    pub busy_work_ms: f64,
    pub step_ms: f64,
    pub policy: ShardingPolicy,
    pub mode: JobMode,
    pub job_name: String,
    pub max_batches: Option<u64>,
    pub duration: Option<Duration>,
    pub timeout: Duration,
    pub latency: Duration,
    pub failures: Vec<FailureSpec>,
    pub worker_buffer: usize,
    pub window_batches: usize,
    pub client_buffer: usize,
    pub compression: bool,
    pub heartbeat: Duration,
    pub worker_timeout: Duration,
    pub client_start: ClientStart,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            experiment_id: "exp".into(),
            workers: 1,
            clients: 1,
            colocated: false,
            ideal: false,
            dataset: SyntheticSpec {
                num_files: 4,
                records_per_file: 256,
                payload_bytes: (16, 64),
                seq_len: SeqLenDist::Uniform { min: 64, max: 64 },
                seed: 1,
            },
            batch_size: 32,
            boundaries: Vec::new(),
            shuffle_buffer: 0,
            epochs: 1,
            busy_work_ms: 0.0,
            step_ms: 0.0,
            policy: ShardingPolicy::Off,
            mode: JobMode::Independent,
            job_name: "bench".into(),
            max_batches: None,
            duration: None,
            timeout: Duration::from_secs(120),
            latency: Duration::ZERO,
            failures: Vec::new(),
            worker_buffer: 8,
            window_batches: 16,
            client_buffer: 8,
            compression: false,
            heartbeat: Duration::from_millis(50),
            worker_timeout: Duration::from_millis(400),
            client_start: ClientStart::Concurrent,
        }
    }
}

fn bad(key: &str, value: &str) -> HarnessError {
    HarnessError::Config(format!("bad value for {key}: {value:?}"))
}

fn num<T: FromStr>(key: &str, v: &str) -> Result<T, HarnessError> {
    v.parse().map_err(|_| bad(key, v))
}

fn non_negative(key: &str, v: &str) -> Result<f64, HarnessError> {
    let x: f64 = num(key, v)?;
    if x.is_finite() && x >= 0.0 {
        Ok(x)
    } else {
        Err(bad(key, v))
    }
}

fn flag(key: &str, v: &str) -> Result<bool, HarnessError> {
    match v {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(bad(key, v)),
    }
}

fn ms(key: &str, v: &str) -> Result<Duration, HarnessError> {
    Ok(Duration::from_millis(num(key, v)?))
}

fn parse_seq_len(v: &str) -> Result<SeqLenDist, HarnessError> {
    let parts: Vec<&str> = v.split(':').collect();
    let n = |s: &str| num::<u32>("seq_len", s);
    match parts.as_slice() {
        ["fixed", x] => {
            let x = n(x)?;
            Ok(SeqLenDist::Uniform { min: x, max: x })
        }
        ["uniform", a, b] => Ok(SeqLenDist::Uniform {
            min: n(a)?,
            max: n(b)?,
        }),
        ["bimodal", s, l, p] => {
            let p = non_negative("seq_len", p)?;
            if p > 1.0 {
                return Err(bad("seq_len", v));
            }
            Ok(SeqLenDist::Bimodal {
                short: n(s)?,
                long: n(l)?,
                long_fraction: p,
            })
        }
        _ => Err(bad("seq_len", v)),
    }
}

fn seq_len_text(d: &SeqLenDist) -> String {
    match *d {
        SeqLenDist::Uniform { min, max } if min == max => format!("fixed:{min}"),
        SeqLenDist::Uniform { min, max } => format!("uniform:{min}:{max}"),
        SeqLenDist::Bimodal {
            short,
            long,
            long_fraction,
        } => format!("bimodal:{short}:{long}:{long_fraction}"),
    }
}

impl FromStr for FailureSpec {
    type Err = HarnessError;

    fn from_str(s: &str) -> Result<Self, HarnessError> {
        let err = || bad("failures", s);
        let (target, rest) = s.trim().split_once('@').ok_or_else(err)?;
        let target = match target.trim() {
            "dispatcher" => Target::Dispatcher,
            t => Target::Worker(
                t.strip_prefix("worker:")
                    .and_then(|i| i.parse().ok())
                    .ok_or_else(err)?,
            ),
        };
        let (trigger, restart) = match rest.split_once('+') {
            Some((t, r)) => (t, Some(r)),
            None => (rest, None),
        };
        let trigger = trigger.trim();
        let trigger = if let Some(p) = trigger.strip_suffix('%') {
            let p: f64 = p.parse().map_err(|_| err())?;
            if !(0.0..=100.0).contains(&p) {
                return Err(err());
            }
            Trigger::Fraction(p / 100.0)
        } else if let Some(m) = trigger.strip_suffix("ms") {
            Trigger::Elapsed(Duration::from_millis(m.parse().map_err(|_| err())?))
        } else {
            Trigger::Elements(trigger.parse().map_err(|_| err())?)
        };
        let restart_after = match restart {
            Some(r) => Some(Duration::from_millis(
                r.trim().trim_end_matches("ms").parse().map_err(|_| err())?,
            )),
            None => None,
        };
        Ok(Self {
            target,
            trigger,
            restart_after,
        })
    }
}

impl fmt::Display for FailureSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.target {
            Target::Worker(i) => write!(f, "worker:{i}@")?,
            Target::Dispatcher => write!(f, "dispatcher@")?,
        }
        match self.trigger {
            Trigger::Fraction(p) => write!(f, "{}%", p * 100.0)?,
            Trigger::Elements(n) => write!(f, "{n}")?,
            Trigger::Elapsed(d) => write!(f, "{}ms", d.as_millis())?,
        }
        if let Some(r) = self.restart_after {
            write!(f, "+{}", r.as_millis())?;
        }
        Ok(())
    }
}

impl ExperimentConfig {
    /// Parses the flat text form on top of the defaults.
    pub fn parse(text: &str) -> Result<Self, HarnessError> {
        let mut c = Self::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                HarnessError::Config(format!("line {}: expected key = value", lineno + 1))
            })?;
            c.set(k.trim(), v.trim())?;
        }
        c.validate()?;
        Ok(c)
    }

    /// Applies one setting.
    pub fn set(&mut self, k: &str, v: &str) -> Result<(), HarnessError> {
        match k {
            "experiment_id" => self.experiment_id = v.to_string(),
            "workers" => self.workers = num(k, v)?,
            "clients" => self.clients = num(k, v)?,
            "colocated" => self.colocated = flag(k, v)?,
            "ideal" => self.ideal = flag(k, v)?,
            "files" => self.dataset.num_files = num(k, v)?,
            "records_per_file" => self.dataset.records_per_file = num(k, v)?,
            "payload_min" => self.dataset.payload_bytes.0 = num(k, v)?,
            "payload_max" => self.dataset.payload_bytes.1 = num(k, v)?,
            "seq_len" => self.dataset.seq_len = parse_seq_len(v)?,
            "seed" => self.dataset.seed = num(k, v)?,
            "batch_size" => self.batch_size = num(k, v)?,
            "boundaries" => {
                self.boundaries = if v.is_empty() {
                    Vec::new()
                } else {
                    v.split(',')
                        .map(|b| num(k, b.trim()))
                        .collect::<Result<_, _>>()?
                }
            }
            "shuffle_buffer" => self.shuffle_buffer = num(k, v)?,
            "epochs" => self.epochs = num(k, v)?,
            "busy_work_ms" => self.busy_work_ms = non_negative(k, v)?,
            "step_ms" => self.step_ms = non_negative(k, v)?,
            "policy" => self.policy = ShardingPolicy::parse(v).ok_or_else(|| bad(k, v))?,
            "mode" => self.mode = JobMode::parse(v).ok_or_else(|| bad(k, v))?,
            "job_name" => self.job_name = v.to_string(),
            "max_batches" => self.max_batches = Some(num(k, v)?),
            "duration_ms" => self.duration = Some(ms(k, v)?),
            "timeout_ms" => self.timeout = ms(k, v)?,
            "latency_ms" => self.latency = ms(k, v)?,
            "failures" => {
                self.failures = v
                    .split(';')
                    .filter(|s| !s.trim().is_empty())
                    .map(str::parse)
                    .collect::<Result<_, _>>()?
            }
            "worker_buffer" => self.worker_buffer = num(k, v)?,
            "window_batches" => self.window_batches = num(k, v)?,
            "client_buffer" => self.client_buffer = num(k, v)?,
            "compression" => self.compression = flag(k, v)?,
            "heartbeat_ms" => self.heartbeat = ms(k, v)?,
            "worker_timeout_ms" => self.worker_timeout = ms(k, v)?,
            "client_start" => {
                self.client_start = match v {
                    "concurrent" => ClientStart::Concurrent,
                    "sequential" => ClientStart::Sequential,
                    _ => return Err(bad(k, v)),
                }
            }
            _ => return Err(HarnessError::Config(format!("unknown key {k:?}"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let fail = |m: &str| Err(HarnessError::Config(m.into()));
        if self.clients == 0 {
            return fail("at least one client is required");
        }
        if self.workers == 0 && !self.colocated {
            return fail("no workers: set workers > 0 or colocated = true");
        }
        if self.dataset.num_files == 0 || self.batch_size == 0 || self.epochs == 0 {
            return fail("files, batch_size and epochs must be positive");
        }
        if self.worker_buffer == 0 || self.window_batches == 0 || self.client_buffer == 0 {
            return fail("buffers must be positive");
        }
        if self.ideal && self.max_batches.is_none() && self.duration.is_none() {
            return fail("ideal mode repeats forever; set max_batches or duration_ms");
        }
        if self.mode == prepserve::wire::JobMode::Coordinated && self.boundaries.is_empty() {
            return fail("coordinated mode needs bucket boundaries");
        }
        if let Err(e) = prepserve::pipeline::validate_boundaries(&self.boundaries) {
            if !self.boundaries.is_empty() {
                return Err(HarnessError::Config(e.to_string()));
            }
        }
        Ok(())
    }

    /// Longest sequence length the dataset can contain.
    pub fn max_seq_len(&self) -> u32 {
        match self.dataset.seq_len {
            SeqLenDist::Uniform { min, max } => min.max(max),
            SeqLenDist::Bimodal { short, long, .. } => short.max(long),
        }
    }
}

impl fmt::Display for ExperimentConfig {
    /// Writes every setting in the form [`ExperimentConfig::parse`] reads.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let d = &self.dataset;
        writeln!(f, "experiment_id = {}", self.experiment_id)?;
        writeln!(f, "workers = {}", self.workers)?;
        writeln!(f, "clients = {}", self.clients)?;
        writeln!(f, "colocated = {}", self.colocated)?;
        writeln!(f, "ideal = {}", self.ideal)?;
        writeln!(f, "files = {}", d.num_files)?;
        writeln!(f, "records_per_file = {}", d.records_per_file)?;
        writeln!(f, "payload_min = {}", d.payload_bytes.0)?;
        writeln!(f, "payload_max = {}", d.payload_bytes.1)?;
        writeln!(f, "seq_len = {}", seq_len_text(&d.seq_len))?;
        writeln!(f, "seed = {}", d.seed)?;
        writeln!(f, "batch_size = {}", self.batch_size)?;
        let b: Vec<String> = self.boundaries.iter().map(u64::to_string).collect();
        writeln!(f, "boundaries = {}", b.join(","))?;
        writeln!(f, "shuffle_buffer = {}", self.shuffle_buffer)?;
        writeln!(f, "epochs = {}", self.epochs)?;
        writeln!(f, "busy_work_ms = {}", self.busy_work_ms)?;
        writeln!(f, "step_ms = {}", self.step_ms)?;
        writeln!(f, "policy = {}", self.policy.name())?;
        writeln!(f, "mode = {}", self.mode.name())?;
        writeln!(f, "job_name = {}", self.job_name)?;
        if let Some(n) = self.max_batches {
            writeln!(f, "max_batches = {n}")?;
        }
        if let Some(t) = self.duration {
            writeln!(f, "duration_ms = {}", t.as_millis())?;
        }
        writeln!(f, "timeout_ms = {}", self.timeout.as_millis())?;
        writeln!(f, "latency_ms = {}", self.latency.as_millis())?;
        let fs: Vec<String> = self.failures.iter().map(ToString::to_string).collect();
        writeln!(f, "failures = {}", fs.join(";"))?;
        writeln!(f, "worker_buffer = {}", self.worker_buffer)?;
        writeln!(f, "window_batches = {}", self.window_batches)?;
        writeln!(f, "client_buffer = {}", self.client_buffer)?;
        writeln!(f, "compression = {}", self.compression)?;
        writeln!(f, "heartbeat_ms = {}", self.heartbeat.as_millis())?;
        writeln!(f, "worker_timeout_ms = {}", self.worker_timeout.as_millis())?;
        let start = match self.client_start {
            ClientStart::Concurrent => "concurrent",
            ClientStart::Sequential => "sequential",
        };
        writeln!(f, "client_start = {start}")
    }
}
