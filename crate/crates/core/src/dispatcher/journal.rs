//! Append-only write-ahead journal.
//!
//! ```text
//! length u32 | crc32 u32 | sequence u64 | event_type u16 | payload
//! ```
//!
//! `length` is the payload length; the CRC covers sequence, event type and
//! payload. A damaged or incomplete final record is a torn write and is cut
//! off on open; damage anywhere else is fatal.

use std::fs::{File, OpenOptions};
use std::io::{Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

use crate::kv::{KvError, KvMap};
use crate::records::ShardSpec;
use crate::wire::{JobMode, ShardingPolicy};

use super::DispatcherError;

pub const RECORD_HEADER_LEN: usize = 18;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Event {
    WorkerRegistered {
        worker_id: u64,
        address: String,
    },
    JobRegistered {
        job_id: u64,
        job_name: String,
        fingerprint: u64,
        graph: Vec<u8>,
        policy: ShardingPolicy,
        mode: JobMode,
        num_consumers: Option<u32>,
        shards: Vec<ShardSpec>,
    },
    TaskCreated {
        job_id: u64,
        worker_id: u64,
        worker_index: u32,
        static_shards: Vec<u64>,
    },
    SplitAssigned {
        job_id: u64,
        worker_id: u64,
        shard_id: u64,
    },
    SplitCompleted {
        job_id: u64,
        worker_id: u64,
        shard_id: u64,
    },
    JobCompleted {
        job_id: u64,
    },
    ClientJoined {
        job_id: u64,
        client_id: u64,
    },
    WorkerLost {
        worker_id: u64,
    },
}

impl Event {
    pub fn event_type(&self) -> u16 {
        match self {
            Event::WorkerRegistered { .. } => 1,
            Event::JobRegistered { .. } => 2,
            Event::TaskCreated { .. } => 3,
            Event::SplitAssigned { .. } => 4,
            Event::SplitCompleted { .. } => 5,
            Event::JobCompleted { .. } => 6,
            Event::ClientJoined { .. } => 7,
            Event::WorkerLost { .. } => 8,
        }
    }

    pub fn payload(&self) -> Result<Vec<u8>, KvError> {
        let mut m = KvMap::new();
        match self {
            Event::WorkerRegistered { worker_id, address } => {
                m.put_u64("worker_id", *worker_id)
                    .put_str("address", address);
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
                m.put_u64("job_id", *job_id)
                    .put_str("job_name", job_name)
                    .put_u64("fingerprint", *fingerprint)
                    .put_bytes("graph", graph.clone())
                    .put_u64("policy", policy.code())
                    .put_u64("mode", mode.code());
                if let Some(n) = num_consumers {
                    m.put_u64("num_consumers", u64::from(*n));
                }
                let blobs = shards
                    .iter()
                    .map(|s| s.to_kv().encode())
                    .collect::<Result<Vec<_>, _>>()?;
                m.put_list("shards", &blobs);
            }
            Event::TaskCreated {
                job_id,
                worker_id,
                worker_index,
                static_shards,
            } => {
                m.put_u64("job_id", *job_id)
                    .put_u64("worker_id", *worker_id)
                    .put_u64("worker_index", u64::from(*worker_index))
                    .put_u64_list("static_shards", static_shards);
            }
            Event::SplitAssigned {
                job_id,
                worker_id,
                shard_id,
            }
            | Event::SplitCompleted {
                job_id,
                worker_id,
                shard_id,
            } => {
                m.put_u64("job_id", *job_id)
                    .put_u64("worker_id", *worker_id)
                    .put_u64("shard_id", *shard_id);
            }
            Event::JobCompleted { job_id } => {
                m.put_u64("job_id", *job_id);
            }
            Event::ClientJoined { job_id, client_id } => {
                m.put_u64("job_id", *job_id)
                    .put_u64("client_id", *client_id);
            }
            Event::WorkerLost { worker_id } => {
                m.put_u64("worker_id", *worker_id);
            }
        }
        m.encode()
    }

    pub fn decode(event_type: u16, payload: &[u8]) -> Result<Self, KvError> {
        let m = KvMap::decode(payload)?;
        let bad = |key: &str| KvError::BadValue {
            key: key.into(),
            reason: "unknown code".into(),
        };
        Ok(match event_type {
            1 => Event::WorkerRegistered {
                worker_id: m.u64("worker_id")?,
                address: m.str("address")?.to_string(),
            },
            2 => Event::JobRegistered {
                job_id: m.u64("job_id")?,
                job_name: m.str("job_name")?.to_string(),
                fingerprint: m.u64("fingerprint")?,
                graph: m.bytes("graph")?.to_vec(),
                policy: ShardingPolicy::from_code(m.u64("policy")?).ok_or_else(|| bad("policy"))?,
                mode: JobMode::from_code(m.u64("mode")?).ok_or_else(|| bad("mode"))?,
                num_consumers: m.opt_u64("num_consumers")?.map(|n| n as u32),
                shards: m
                    .list("shards")?
                    .into_iter()
                    .map(|raw| ShardSpec::from_kv(&KvMap::decode(raw)?))
                    .collect::<Result<_, _>>()?,
            },
            3 => Event::TaskCreated {
                job_id: m.u64("job_id")?,
                worker_id: m.u64("worker_id")?,
                worker_index: m.u64("worker_index")? as u32,
                static_shards: m.u64_list("static_shards")?,
            },
            4 => Event::SplitAssigned {
                job_id: m.u64("job_id")?,
                worker_id: m.u64("worker_id")?,
                shard_id: m.u64("shard_id")?,
            },
            5 => Event::SplitCompleted {
                job_id: m.u64("job_id")?,
                worker_id: m.u64("worker_id")?,
                shard_id: m.u64("shard_id")?,
            },
            6 => Event::JobCompleted {
                job_id: m.u64("job_id")?,
            },
            7 => Event::ClientJoined {
                job_id: m.u64("job_id")?,
                client_id: m.u64("client_id")?,
            },
            8 => Event::WorkerLost {
                worker_id: m.u64("worker_id")?,
            },
            _ => return Err(bad("event_type")),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct JournalRecord {
    pub sequence: u64,
    pub event: Event,
}

pub fn encode_record(sequence: u64, event: &Event) -> Result<Vec<u8>, KvError> {
    let payload = event.payload()?;
    let mut out = Vec::with_capacity(RECORD_HEADER_LEN + payload.len());
    out.extend_from_slice(&(payload.len() as u32).to_le_bytes());
    out.extend_from_slice(&[0; 4]);
    out.extend_from_slice(&sequence.to_le_bytes());
    out.extend_from_slice(&event.event_type().to_le_bytes());
    out.extend_from_slice(&payload);
    let crc = crc32fast::hash(&out[8..]);
    out[4..8].copy_from_slice(&crc.to_le_bytes());
    Ok(out)
}

/// Parses a journal image. Returns the complete records and the length of
/// the valid prefix; bytes past it belong to a torn final record.
pub fn parse_journal(buf: &[u8]) -> Result<(Vec<JournalRecord>, usize), DispatcherError> {
    let mut records: Vec<JournalRecord> = Vec::new();
    let mut pos = 0;
    while pos < buf.len() {
        let rest = &buf[pos..];
        if rest.len() < RECORD_HEADER_LEN {
            break;
        }
        let len = u32::from_le_bytes(rest[0..4].try_into().unwrap()) as usize;
        let end = RECORD_HEADER_LEN
            .checked_add(len)
            .filter(|&e| e <= rest.len());
        let Some(end) = end else { break };
        let is_last = pos + end == buf.len();
        let crc = u32::from_le_bytes(rest[4..8].try_into().unwrap());
        if crc32fast::hash(&rest[8..end]) != crc {
            if is_last {
                break;
            }
            return Err(corrupt(pos, "checksum mismatch"));
        }
        let sequence = u64::from_le_bytes(rest[8..16].try_into().unwrap());
        if records.last().is_some_and(|r| r.sequence >= sequence) {
            return Err(corrupt(pos, "sequence does not increase"));
        }
        let event_type = u16::from_le_bytes(rest[16..18].try_into().unwrap());
        let event = Event::decode(event_type, &rest[RECORD_HEADER_LEN..end])
            .map_err(|e| corrupt(pos, &e.to_string()))?;
        records.push(JournalRecord { sequence, event });
        pos += end;
    }
    Ok((records, pos))
}

fn corrupt(offset: usize, reason: &str) -> DispatcherError {
    DispatcherError::CorruptJournal {
        offset: offset as u64,
        reason: reason.to_string(),
    }
}

/// Reads every complete record of the journal at `path` without modifying it.
pub fn read_journal(path: &Path) -> Result<Vec<JournalRecord>, DispatcherError> {
    match std::fs::read(path) {
        Ok(buf) => Ok(parse_journal(&buf)?.0),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(Vec::new()),
        Err(e) => Err(DispatcherError::Io(format!("{}: {e}", path.display()))),
    }
}

pub struct Journal {
    file: File,
    path: PathBuf,
    next_sequence: u64,
    sync: bool,
}

impl std::fmt::Debug for Journal {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Journal")
            .field("path", &self.path)
            .field("next_sequence", &self.next_sequence)
            .finish()
    }
}

impl Journal {
    /// Opens (creating if needed) the journal, cuts off a torn tail and
    /// returns the surviving records.
    pub fn open(path: &Path, sync: bool) -> Result<(Self, Vec<JournalRecord>), DispatcherError> {
        let io = |e: std::io::Error| DispatcherError::Io(format!("{}: {e}", path.display()));
        let mut file = OpenOptions::new()
            .read(true)
            .write(true)
            .create(true)
            .truncate(false)
            .open(path)
            .map_err(io)?;
        let mut buf = Vec::new();
        file.read_to_end(&mut buf).map_err(io)?;
        let (records, valid) = parse_journal(&buf)?;
        if valid < buf.len() {
            log::warn!(
                "journal {}: dropping {} bytes of torn tail",
                path.display(),
                buf.len() - valid
            );
            file.set_len(valid as u64).map_err(io)?;
            file.sync_all().map_err(io)?;
        }
        file.seek(SeekFrom::Start(valid as u64)).map_err(io)?;
        let next_sequence = records.last().map(|r| r.sequence + 1).unwrap_or(1);
        Ok((
            Self {
                file,
                path: path.to_path_buf(),
                next_sequence,
                sync,
            },
            records,
        ))
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    /// Durably appends one record and returns its sequence number.
    pub fn append(&mut self, event: &Event) -> Result<u64, DispatcherError> {
        let seq = self.next_sequence;
        let rec = encode_record(seq, event).map_err(|e| DispatcherError::Io(e.to_string()))?;
        let io = |e: std::io::Error| DispatcherError::Io(format!("{}: {e}", self.path.display()));
        self.file.write_all(&rec).map_err(io)?;
        if self.sync {
            self.file.sync_data().map_err(io)?;
        }
        self.next_sequence += 1;
        Ok(seq)
    }
}
