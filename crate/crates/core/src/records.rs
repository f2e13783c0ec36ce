//! Record files, shard enumeration and synthetic datasets.
//!
//! # File format
//!
//! ```text
//! magic "DFRG" | version u16 | record count u64
//! per record: total_len u32 | seq_len u32 | crc32 u32 | payload
//! ```
//!
//! Little-endian. `total_len` counts the bytes after itself
//! (`8 + payload.len()`); the CRC covers the `seq_len` bytes and the payload.
//!
//! Element keys are positional: `(file_index << 32) | ordinal`, where
//! `file_index` is the file's position in the sorted dataset listing.

use std::fs::{self, File};
use std::io::{self, BufReader, BufWriter, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::kv::{KvError, KvMap};
use crate::pipeline::{Element, ElementSource, PipelineError};

pub const MAGIC: &[u8; 4] = b"DFRG";
pub const VERSION: u16 = 1;
pub const HEADER_LEN: u64 = 14;
pub const RECORD_EXTENSION: &str = "dfrg";
pub const MANIFEST_NAME: &str = "manifest.json";

#[derive(Debug, Error)]
pub enum RecordsError {
    #[error("i/o failure on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("{path} is not a record file: {reason}")]
    BadHeader { path: PathBuf, reason: String },
    #[error("corrupt record in {path} at offset {offset}")]
    CorruptRecord { path: PathBuf, offset: u64 },
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("invalid shard: {0}")]
    InvalidShard(String),
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> RecordsError + '_ {
    move |source| RecordsError::Io {
        path: path.to_path_buf(),
        source,
    }
}

pub fn element_key(file_index: u32, ordinal: u64) -> u64 {
    (u64::from(file_index) << 32) | (ordinal & 0xffff_ffff)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RecordFile {
    pub path: PathBuf,
    pub count: u64,
}

/// Writes `elements` (keys are not stored) and returns the file summary.
pub fn write_records(path: &Path, elements: &[Element]) -> Result<RecordFile, RecordsError> {
    let file = File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(file);
    let mut header = Vec::with_capacity(HEADER_LEN as usize);
    header.extend_from_slice(MAGIC);
    header.extend_from_slice(&VERSION.to_le_bytes());
    header.extend_from_slice(&(elements.len() as u64).to_le_bytes());
    w.write_all(&header).map_err(io_err(path))?;
    for e in elements {
        let seq = e.seq_len.to_le_bytes();
        let mut crc = crc32fast::Hasher::new();
        crc.update(&seq);
        crc.update(&e.payload);
        let total = 8 + e.payload.len() as u32;
        w.write_all(&total.to_le_bytes()).map_err(io_err(path))?;
        w.write_all(&seq).map_err(io_err(path))?;
        w.write_all(&crc.finalize().to_le_bytes())
            .map_err(io_err(path))?;
        w.write_all(&e.payload).map_err(io_err(path))?;
    }
    w.flush().map_err(io_err(path))?;
    Ok(RecordFile {
        path: path.to_path_buf(),
        count: elements.len() as u64,
    })
}

/// Reads and checks a file header, returning the record count.
pub fn read_header(path: &Path) -> Result<u64, RecordsError> {
    let mut f = File::open(path).map_err(io_err(path))?;
    read_header_from(&mut f, path)
}

fn read_header_from(r: &mut impl Read, path: &Path) -> Result<u64, RecordsError> {
    let mut buf = [0u8; HEADER_LEN as usize];
    r.read_exact(&mut buf).map_err(|e| match e.kind() {
        io::ErrorKind::UnexpectedEof => RecordsError::BadHeader {
            path: path.to_path_buf(),
            reason: "short header".into(),
        },
        _ => RecordsError::Io {
            path: path.to_path_buf(),
            source: e,
        },
    })?;
    if &buf[0..4] != MAGIC {
        return Err(RecordsError::BadHeader {
            path: path.to_path_buf(),
            reason: "bad magic".into(),
        });
    }
    let version = u16::from_le_bytes([buf[4], buf[5]]);
    if version != VERSION {
        return Err(RecordsError::BadHeader {
            path: path.to_path_buf(),
            reason: format!("unsupported version {version}"),
        });
    }
    Ok(u64::from_le_bytes(buf[6..14].try_into().unwrap()))
}

/// Sequential reader over one record file.
pub struct RecordReader {
    path: PathBuf,
    reader: BufReader<File>,
    file_index: u32,
    count: u64,
    ordinal: u64,
    offset: u64,
    end: u64,
}

impl RecordReader {
    pub fn open(path: &Path, file_index: u32) -> Result<Self, RecordsError> {
        let file = File::open(path).map_err(io_err(path))?;
        let mut reader = BufReader::new(file);
        let count = read_header_from(&mut reader, path)?;
        Ok(Self {
            path: path.to_path_buf(),
            reader,
            file_index,
            count,
            ordinal: 0,
            offset: HEADER_LEN,
            end: count,
        })
    }

    pub fn count(&self) -> u64 {
        self.count
    }

    /// Restricts reading to ordinals `[start, end)`.
    pub fn seek_range(&mut self, start: u64, end: u64) -> Result<(), RecordsError> {
        if start > end || end > self.count {
            return Err(RecordsError::InvalidShard(format!(
                "range [{start},{end}) outside 0..{}",
                self.count
            )));
        }
        while self.ordinal < start {
            let total = self.read_u32()?;
            self.reader
                .seek_relative(i64::from(total))
                .map_err(io_err(&self.path))?;
            self.offset += 4 + u64::from(total);
            self.ordinal += 1;
        }
        self.end = end;
        Ok(())
    }

    fn corrupt(&self) -> RecordsError {
        RecordsError::CorruptRecord {
            path: self.path.clone(),
            offset: self.offset,
        }
    }

    fn read_u32(&mut self) -> Result<u32, RecordsError> {
        let mut b = [0u8; 4];
        match self.reader.read_exact(&mut b) {
            Ok(()) => Ok(u32::from_le_bytes(b)),
            Err(e) if e.kind() == io::ErrorKind::UnexpectedEof => Err(self.corrupt()),
            Err(e) => Err(io_err(&self.path)(e)),
        }
    }

    pub fn next_record(&mut self) -> Result<Option<Element>, RecordsError> {
        if self.ordinal >= self.end {
            return Ok(None);
        }
        let total = self.read_u32()?;
        if total < 8 {
            return Err(self.corrupt());
        }
        let mut body = vec![0u8; total as usize];
        if let Err(e) = self.reader.read_exact(&mut body) {
            return Err(match e.kind() {
                io::ErrorKind::UnexpectedEof => self.corrupt(),
                _ => io_err(&self.path)(e),
            });
        }
        let seq = &body[0..4];
        let stored_crc = u32::from_le_bytes(body[4..8].try_into().unwrap());
        let payload = &body[8..];
        let mut crc = crc32fast::Hasher::new();
        crc.update(seq);
        crc.update(payload);
        if crc.finalize() != stored_crc {
            return Err(self.corrupt());
        }
        let e = Element::new(
            element_key(self.file_index, self.ordinal),
            u32::from_le_bytes(seq.try_into().unwrap()),
            payload.to_vec(),
        );
        self.offset += 4 + u64::from(total);
        self.ordinal += 1;
        Ok(Some(e))
    }
}

/// Reads a whole file with file index 0.
pub fn read_file(path: &Path) -> Result<Vec<Element>, RecordsError> {
    let mut r = RecordReader::open(path, 0)?;
    let mut out = Vec::new();
    while let Some(e) = r.next_record()? {
        out.push(e);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Granularity {
    File,
    ElementRange,
    FileSet,
}

impl Granularity {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "file" => Some(Granularity::File),
            "range" | "element-range" => Some(Granularity::ElementRange),
            "fileset" | "file-set" => Some(Granularity::FileSet),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Granularity::File => "file",
            Granularity::ElementRange => "range",
            Granularity::FileSet => "fileset",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ShardFile {
    pub index: u32,
    pub path: String,
    pub count: u64,
}

/// A disjoint unit of source data.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ShardSpec {
    pub shard_id: u64,
    pub granularity: Granularity,
    pub files: Vec<ShardFile>,
    /// Ordinal range within the single file of an element-range shard.
    pub range: Option<(u64, u64)>,
}

impl ShardSpec {
    /// Number of records the shard covers.
    pub fn len(&self) -> u64 {
        match self.range {
            Some((s, e)) => e - s,
            None => self.files.iter().map(|f| f.count).sum(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Every element key covered by this shard.
    pub fn keys(&self) -> Vec<u64> {
        match self.range {
            Some((s, e)) => (s..e)
                .map(|o| element_key(self.files[0].index, o))
                .collect(),
            None => self
                .files
                .iter()
                .flat_map(|f| (0..f.count).map(move |o| element_key(f.index, o)))
                .collect(),
        }
    }

    pub fn to_kv(&self) -> KvMap {
        let mut m = KvMap::new();
        m.put_u64("id", self.shard_id)
            .put_str("granularity", self.granularity.as_str());
        let files: Vec<Vec<u8>> = self
            .files
            .iter()
            .map(|f| {
                let mut fm = KvMap::new();
                fm.put_u64("index", u64::from(f.index))
                    .put_str("path", &f.path)
                    .put_u64("count", f.count);
                fm.encode().expect("small map")
            })
            .collect();
        m.put_list("files", &files);
        if let Some((s, e)) = self.range {
            m.put_u64_list("range", &[s, e]);
        }
        m
    }

    pub fn from_kv(m: &KvMap) -> Result<Self, KvError> {
        let granularity =
            Granularity::parse(m.str("granularity")?).ok_or_else(|| KvError::BadValue {
                key: "granularity".into(),
                reason: "unknown".into(),
            })?;
        let mut files = Vec::new();
        for raw in m.list("files")? {
            let fm = KvMap::decode(raw)?;
            files.push(ShardFile {
                index: fm.u64("index")? as u32,
                path: fm.str("path")?.to_string(),
                count: fm.u64("count")?,
            });
        }
        let range = if m.contains("range") {
            match m.u64_list("range")?.as_slice() {
                [s, e] => Some((*s, *e)),
                _ => {
                    return Err(KvError::BadValue {
                        key: "range".into(),
                        reason: "expected two values".into(),
                    })
                }
            }
        } else {
            None
        };
        Ok(Self {
            shard_id: m.u64("id")?,
            granularity,
            files,
            range,
        })
    }
}

/// Record files of a dataset directory, sorted by file name.
pub fn list_dataset(dir: &Path) -> Result<Vec<ShardFile>, RecordsError> {
    let mut paths = Vec::new();
    for entry in fs::read_dir(dir).map_err(io_err(dir))? {
        let path = entry.map_err(io_err(dir))?.path();
        if path.extension().and_then(|e| e.to_str()) == Some(RECORD_EXTENSION) {
            paths.push(path);
        }
    }
    paths.sort();
    paths
        .into_iter()
        .enumerate()
        .map(|(i, p)| {
            Ok(ShardFile {
                index: i as u32,
                count: read_header(&p)?,
                path: p.to_string_lossy().into_owned(),
            })
        })
        .collect()
}

/// Partitions a dataset into disjoint shards.
///
/// `target_shards` is the desired shard count for element-range and file-set
/// granularity (usually shards-per-worker times the worker count); file
/// granularity always yields one shard per file.
pub fn enumerate_shards(
    dir: &Path,
    granularity: Granularity,
    target_shards: usize,
) -> Result<Vec<ShardSpec>, RecordsError> {
    let files = list_dataset(dir)?;
    if files.is_empty() {
        return Err(RecordsError::EmptyDataset);
    }
    let target = target_shards.max(1);
    let mut shards = Vec::new();
    let mut push = |files: Vec<ShardFile>, range: Option<(u64, u64)>| {
        shards.push(ShardSpec {
            shard_id: shards.len() as u64,
            granularity,
            files,
            range,
        });
    };
    match granularity {
        Granularity::File => {
            for f in files {
                push(vec![f], None);
            }
        }
        Granularity::FileSet => {
            let per_set = files.len().div_ceil(target);
            for chunk in files.chunks(per_set) {
                push(chunk.to_vec(), None);
            }
        }
        Granularity::ElementRange => {
            let total: u64 = files.iter().map(|f| f.count).sum();
            if total == 0 {
                return Err(RecordsError::EmptyDataset);
            }
            let chunk = total.div_ceil(target as u64).max(1);
            for f in files {
                let mut start = 0;
                while start < f.count {
                    let end = (start + chunk).min(f.count);
                    push(vec![f.clone()], Some((start, end)));
                    start = end;
                }
            }
        }
    }
    Ok(shards)
}

/// Streams the records of one shard in file order.
pub struct ShardReader {
    shard: ShardSpec,
    file_pos: usize,
    current: Option<RecordReader>,
}

impl ShardReader {
    pub fn new(shard: ShardSpec) -> Self {
        Self {
            shard,
            file_pos: 0,
            current: None,
        }
    }

    pub fn shard(&self) -> &ShardSpec {
        &self.shard
    }

    pub fn next_record(&mut self) -> Result<Option<Element>, RecordsError> {
        loop {
            if self.current.is_none() {
                let Some(f) = self.shard.files.get(self.file_pos) else {
                    return Ok(None);
                };
                let mut r = RecordReader::open(Path::new(&f.path), f.index)?;
                if let Some((s, e)) = self.shard.range {
                    r.seek_range(s, e)?;
                }
                self.current = Some(r);
            }
            match self.current.as_mut().expect("opened above").next_record()? {
                Some(e) => return Ok(Some(e)),
                None => {
                    self.current = None;
                    self.file_pos += 1;
                }
            }
        }
    }
}

impl ElementSource for ShardReader {
    fn next_element(&mut self) -> Result<Option<Element>, PipelineError> {
        self.next_record()
            .map_err(|e| PipelineError::Source(e.to_string()))
    }

    fn reset(&mut self) -> Result<bool, PipelineError> {
        self.file_pos = 0;
        self.current = None;
        Ok(true)
    }
}

/// Reads a shard fully.
pub fn read_records(shard: &ShardSpec) -> Result<Vec<Element>, RecordsError> {
    let mut r = ShardReader::new(shard.clone());
    let mut out = Vec::new();
    while let Some(e) = r.next_record()? {
        out.push(e);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum SeqLenDist {
    Uniform {
        min: u32,
        max: u32,
    },
    /// `long` with probability `long_fraction`, otherwise `short`.
    Bimodal {
        short: u32,
        long: u32,
        long_fraction: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub num_files: usize,
    pub records_per_file: u64,
    /// Uniform payload size range; payloads are never shorter than `seq_len`.
    pub payload_bytes: (u32, u32),
    pub seq_len: SeqLenDist,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestFile {
    pub name: String,
    pub count: u64,
    /// Records drawn from the long mode of a bimodal distribution.
    pub long_count: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub seed: u64,
    pub spec: SyntheticSpec,
    pub files: Vec<ManifestFile>,
}

impl Manifest {
    pub fn total_records(&self) -> u64 {
        self.files.iter().map(|f| f.count).sum()
    }

    pub fn load(dir: &Path) -> Result<Self, RecordsError> {
        let path = dir.join(MANIFEST_NAME);
        let raw = fs::read(&path).map_err(io_err(&path))?;
        serde_json::from_slice(&raw).map_err(|e| RecordsError::Io {
            path,
            source: io::Error::new(io::ErrorKind::InvalidData, e),
        })
    }
}

/// Deterministically writes a synthetic dataset into `out_dir`.
pub fn generate_synthetic(spec: &SyntheticSpec, out_dir: &Path) -> Result<Manifest, RecordsError> {
    if spec.num_files == 0 {
        return Err(RecordsError::EmptyDataset);
    }
    fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (pmin, pmax) = (
        spec.payload_bytes.0.min(spec.payload_bytes.1),
        spec.payload_bytes.0.max(spec.payload_bytes.1),
    );
    let mut files = Vec::with_capacity(spec.num_files);
    for fi in 0..spec.num_files {
        let mut elems = Vec::with_capacity(spec.records_per_file as usize);
        let mut long_count = 0;
        for ord in 0..spec.records_per_file {
            let seq_len = match spec.seq_len {
                SeqLenDist::Uniform { min, max } => rng.gen_range(min.min(max)..=max.max(min)),
                SeqLenDist::Bimodal {
                    short,
                    long,
                    long_fraction,
                } => {
                    if rng.gen_bool(long_fraction.clamp(0.0, 1.0)) {
                        long_count += 1;
                        long
                    } else {
                        short
                    }
                }
            };
            let len = rng.gen_range(pmin..=pmax).max(seq_len) as usize;
            let mut payload = vec![0u8; len];
            rng.fill(payload.as_mut_slice());
            elems.push(Element::new(element_key(fi as u32, ord), seq_len, payload));
        }
        let name = format!("part-{fi:05}.{RECORD_EXTENSION}");
        write_records(&out_dir.join(&name), &elems)?;
        files.push(ManifestFile {
            name,
            count: spec.records_per_file,
            long_count,
        });
    }
    let manifest = Manifest {
        seed: spec.seed,
        spec: spec.clone(),
        files,
    };
    let path = out_dir.join(MANIFEST_NAME);
    let json = serde_json::to_vec_pretty(&manifest).expect("manifest serializes");
    fs::write(&path, json).map_err(io_err(&path))?;
    Ok(manifest)
}

/// Overwrites one byte at `offset`; test and fault-injection helper.
pub fn flip_byte(path: &Path, offset: u64) -> Result<(), RecordsError> {
    let mut f = fs::OpenOptions::new()
        .read(true)
        .write(true)
        .open(path)
        .map_err(io_err(path))?;
    let mut b = [0u8; 1];
    f.seek(SeekFrom::Start(offset)).map_err(io_err(path))?;
    f.read_exact(&mut b).map_err(io_err(path))?;
    b[0] ^= 0xff;
    f.seek(SeekFrom::Start(offset)).map_err(io_err(path))?;
    f.write_all(&b).map_err(io_err(path))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeSet;

    fn elems(n: u64) -> Vec<Element> {
        (0..n)
            .map(|i| Element::new(i, (i % 5) as u32, vec![i as u8; (i % 5) as usize + 1]))
            .collect()
    }

    #[test]
    fn empty_file_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.dfrg");
        let info = write_records(&p, &[]).unwrap();
        assert_eq!(info.count, 0);
        assert!(read_file(&p).unwrap().is_empty());
    }

    #[test]
    fn three_elements_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.dfrg");
        let info = write_records(&p, &elems(3)).unwrap();
        assert_eq!(info.count, 3);
        assert_eq!(read_file(&p).unwrap(), elems(3));
    }

    #[test]
    fn zero_length_payload() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.dfrg");
        let e = vec![Element::new(0, 0, vec![])];
        write_records(&p, &e).unwrap();
        assert_eq!(read_file(&p).unwrap(), e);
    }

    #[test]
    fn header_layout() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.dfrg");
        write_records(&p, &[Element::new(0, 2, vec![7, 8])]).unwrap();
        let raw = fs::read(&p).unwrap();
        assert_eq!(&raw[0..4], b"DFRG");
        assert_eq!(&raw[4..6], &1u16.to_le_bytes());
        assert_eq!(&raw[6..14], &1u64.to_le_bytes());
        assert_eq!(&raw[14..18], &10u32.to_le_bytes());
        assert_eq!(&raw[18..22], &2u32.to_le_bytes());
        assert_eq!(&raw[26..], &[7, 8]);
    }

    #[test]
    fn range_shard_slices() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.dfrg");
        write_records(&p, &elems(10)).unwrap();
        let file = ShardFile {
            index: 0,
            path: p.to_string_lossy().into(),
            count: 10,
        };
        let whole = ShardSpec {
            shard_id: 0,
            granularity: Granularity::File,
            files: vec![file.clone()],
            range: None,
        };
        assert_eq!(read_records(&whole).unwrap().len(), 10);
        let part = ShardSpec {
            shard_id: 1,
            granularity: Granularity::ElementRange,
            files: vec![file],
            range: Some((2, 5)),
        };
        let keys: Vec<u64> = read_records(&part).unwrap().iter().map(|e| e.key).collect();
        assert_eq!(keys, vec![2, 3, 4]);
    }

    #[test]
    fn missing_file_is_io_failure() {
        let shard = ShardSpec {
            shard_id: 0,
            granularity: Granularity::File,
            files: vec![ShardFile {
                index: 0,
                path: "/nonexistent/x.dfrg".into(),
                count: 1,
            }],
            range: None,
        };
        assert!(matches!(read_records(&shard), Err(RecordsError::Io { .. })));
    }

    #[test]
    fn every_body_byte_flip_is_detected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.dfrg");
        write_records(&p, &elems(3)).unwrap();
        let len = fs::metadata(&p).unwrap().len();
        // First record starts right after the header; its total_len field
        // is excluded because it frames rather than carries data.
        let mut offset = HEADER_LEN;
        let raw = fs::read(&p).unwrap();
        let mut body_offsets = Vec::new();
        while offset < len {
            let total = u32::from_le_bytes(
                raw[offset as usize..offset as usize + 4]
                    .try_into()
                    .unwrap(),
            );
            body_offsets.extend(offset + 4..offset + 4 + u64::from(total));
            offset += 4 + u64::from(total);
        }
        for off in body_offsets {
            flip_byte(&p, off).unwrap();
            assert!(
                matches!(read_file(&p), Err(RecordsError::CorruptRecord { .. })),
                "flip at {off} not caught"
            );
            flip_byte(&p, off).unwrap();
        }
        assert_eq!(read_file(&p).unwrap(), elems(3));
    }

    fn two_file_dataset(dir: &Path, per_file: u64) {
        for i in 0..2 {
            write_records(&dir.join(format!("f{i}.dfrg")), &elems(per_file)).unwrap();
        }
    }

    #[test]
    fn file_granularity_one_shard_per_file() {
        let dir = tempfile::tempdir().unwrap();
        for i in 0..8 {
            write_records(&dir.path().join(format!("f{i}.dfrg")), &elems(3)).unwrap();
        }
        assert_eq!(
            enumerate_shards(dir.path(), Granularity::File, 1)
                .unwrap()
                .len(),
            8
        );
    }

    #[test]
    fn range_shards_partition_the_dataset() {
        let dir = tempfile::tempdir().unwrap();
        two_file_dataset(dir.path(), 100);
        let shards = enumerate_shards(dir.path(), Granularity::ElementRange, 8).unwrap();
        assert_eq!(shards.len(), 8);
        // Oracle: the keys actually read from each shard.
        let mut seen = BTreeSet::new();
        for s in &shards {
            for e in read_records(s).unwrap() {
                assert!(seen.insert(e.key), "key {} in two shards", e.key);
            }
        }
        let expected: BTreeSet<u64> = (0..2)
            .flat_map(|f| (0..100).map(move |o| element_key(f, o)))
            .collect();
        assert_eq!(seen, expected);
    }

    #[test]
    fn empty_dir_is_empty_dataset() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(
            enumerate_shards(dir.path(), Granularity::File, 4),
            Err(RecordsError::EmptyDataset)
        ));
    }

    #[test]
    fn shard_spec_kv_round_trip() {
        let s = ShardSpec {
            shard_id: 3,
            granularity: Granularity::ElementRange,
            files: vec![ShardFile {
                index: 1,
                path: "/d/f1.dfrg".into(),
                count: 50,
            }],
            range: Some((10, 20)),
        };
        let kv = KvMap::decode(&s.to_kv().encode().unwrap()).unwrap();
        assert_eq!(ShardSpec::from_kv(&kv).unwrap(), s);
    }

    fn bimodal(seed: u64) -> SyntheticSpec {
        SyntheticSpec {
            num_files: 4,
            records_per_file: 2500,
            payload_bytes: (0, 8),
            seq_len: SeqLenDist::Bimodal {
                short: 16,
                long: 480,
                long_fraction: 0.3,
            },
            seed,
        }
    }

    #[test]
    fn synthetic_is_deterministic() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let spec = SyntheticSpec {
            records_per_file: 50,
            ..bimodal(1)
        };
        generate_synthetic(&spec, a.path()).unwrap();
        generate_synthetic(&spec, b.path()).unwrap();
        for f in list_dataset(a.path()).unwrap() {
            let name = Path::new(&f.path).file_name().unwrap();
            assert_eq!(
                fs::read(&f.path).unwrap(),
                fs::read(b.path().join(name)).unwrap()
            );
        }
    }

    #[test]
    fn bimodal_mix_matches_request() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = generate_synthetic(&bimodal(9), dir.path()).unwrap();
        // Count by scanning the data, not the manifest's bookkeeping.
        let mut long = 0u64;
        let mut total = 0u64;
        for s in enumerate_shards(dir.path(), Granularity::File, 1).unwrap() {
            for e in read_records(&s).unwrap() {
                assert!(e.seq_len == 16 || e.seq_len == 480);
                assert!(e.payload.len() >= e.seq_len as usize);
                long += u64::from(e.seq_len == 480);
                total += 1;
            }
        }
        assert_eq!(total, 10_000);
        assert_eq!(
            long,
            manifest.files.iter().map(|f| f.long_count).sum::<u64>()
        );
        let frac = long as f64 / total as f64;
        assert!((frac - 0.3).abs() <= 0.05 * 0.3, "fraction {frac}");
    }

    #[test]
    fn zero_files_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let spec = SyntheticSpec {
            num_files: 0,
            ..bimodal(1)
        };
        assert!(matches!(
            generate_synthetic(&spec, dir.path()),
            Err(RecordsError::EmptyDataset)
        ));
    }
}
