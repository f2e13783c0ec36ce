use std::fmt;

use super::{FunctionRegistry, PipelineError};
use crate::fnv1a64;
use crate::kv::{read_u16, KvMap};

pub const GRAPH_VERSION: u16 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
#[repr(u8)]
pub enum OpKind {
    Source = 0,
    Map = 1,
    Filter = 2,
    Shuffle = 3,
    Repeat = 4,
    Batch = 5,
    Pad = 6,
    Prefetch = 7,
    BucketBySequenceLength = 8,
    GroupByWindow = 9,
    FlatMap = 10,
    FusedMapFilter = 11,
    Take = 12,
    Cache = 13,
}

impl OpKind {
    pub const ALL: [OpKind; 14] = [
        OpKind::Source,
        OpKind::Map,
        OpKind::Filter,
        OpKind::Shuffle,
        OpKind::Repeat,
        OpKind::Batch,
        OpKind::Pad,
        OpKind::Prefetch,
        OpKind::BucketBySequenceLength,
        OpKind::GroupByWindow,
        OpKind::FlatMap,
        OpKind::FusedMapFilter,
        OpKind::Take,
        OpKind::Cache,
    ];

    pub fn from_u8(v: u8) -> Option<Self> {
        Self::ALL.get(v as usize).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            OpKind::Source => "source",
            OpKind::Map => "map",
            OpKind::Filter => "filter",
            OpKind::Shuffle => "shuffle",
            OpKind::Repeat => "repeat",
            OpKind::Batch => "batch",
            OpKind::Pad => "pad",
            OpKind::Prefetch => "prefetch",
            OpKind::BucketBySequenceLength => "bucket_by_sequence_length",
            OpKind::GroupByWindow => "group_by_window",
            OpKind::FlatMap => "flat_map",
            OpKind::FusedMapFilter => "fused_map_filter",
            OpKind::Take => "take",
            OpKind::Cache => "cache",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.iter().copied().find(|k| k.name() == name)
    }

    fn schema(self) -> &'static [(&'static str, ParamType, bool)] {
        use ParamType::*;
        match self {
            // Source params are checked separately, they depend on "type".
            OpKind::Source => &[],
            OpKind::Map => &[
                ("fn", Str, true),
                ("arg", U64, false),
                ("parallelism", U64, false),
            ],
            OpKind::Filter => &[("fn", Str, true), ("arg", U64, false)],
            OpKind::Shuffle => &[("buffer_size", U64, true), ("seed", U64, false)],
            OpKind::Repeat => &[("count", U64, true)],
            OpKind::Batch => &[("size", U64, true), ("drop_remainder", Bool, false)],
            OpKind::Pad => &[],
            OpKind::Prefetch => &[("buffer_size", U64, true)],
            OpKind::BucketBySequenceLength => {
                &[("boundaries", U64List, true), ("batch_size", U64, true)]
            }
            OpKind::GroupByWindow => &[("window_size", U64, true)],
            OpKind::FlatMap => &[("fn", Str, true), ("arg", U64, false)],
            OpKind::FusedMapFilter => &[
                ("map_fn", Str, true),
                ("map_arg", U64, false),
                ("filter_fn", Str, true),
                ("filter_arg", U64, false),
                ("parallelism", U64, false),
            ],
            OpKind::Take => &[("count", U64, true)],
            OpKind::Cache => &[],
        }
    }
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum ParamType {
    U64,
    U64List,
    Str,
    Bool,
}

fn check_type(kind: OpKind, key: &str, ty: ParamType, params: &KvMap) -> Result<(), PipelineError> {
    let bad = |what: &str| {
        PipelineError::MalformedSpec(format!("{kind}: parameter {key:?} must be {what}"))
    };
    match ty {
        ParamType::U64 => params.u64(key).map(|_| ()).map_err(|_| bad("an integer")),
        ParamType::U64List => params
            .u64_list(key)
            .map(|_| ())
            .map_err(|_| bad("an integer list")),
        ParamType::Str => params.str(key).map(|_| ()).map_err(|_| bad("a string")),
        ParamType::Bool => params.bool(key).map(|_| ()).map_err(|_| bad("a boolean")),
    }
}

/// Where a source node gets its elements from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SourceKind {
    /// Integers `start..end`; element key = value, payload = value as LE u64.
    Range { start: u64, end: u64, seq_len: u32 },
    /// Record files under `dir`, bound to shards at instantiation time.
    Records {
        dir: String,
        granularity: String,
        shards: u64,
    },
}

/// One node of the graph.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct OperatorSpec {
    pub kind: OpKind,
    pub params: KvMap,
}

impl OperatorSpec {
    pub fn new(kind: OpKind) -> Self {
        Self {
            kind,
            params: KvMap::new(),
        }
    }

    pub fn with_u64(mut self, key: &str, v: u64) -> Self {
        self.params.put_u64(key, v);
        self
    }

    pub fn with_str(mut self, key: &str, v: &str) -> Self {
        self.params.put_str(key, v);
        self
    }

    pub fn with_list(mut self, key: &str, v: &[u64]) -> Self {
        self.params.put_u64_list(key, v);
        self
    }

    pub fn with_bool(mut self, key: &str, v: bool) -> Self {
        self.params.put_bool(key, v);
        self
    }

    pub fn u64_or(&self, key: &str, default: u64) -> u64 {
        self.params.opt_u64(key).ok().flatten().unwrap_or(default)
    }

    pub fn fn_id(&self, key: &str) -> &str {
        self.params.str(key).unwrap_or("")
    }

    /// Structural parameter validation (no function lookups).
    pub fn validate(&self) -> Result<(), PipelineError> {
        if self.kind == OpKind::Source {
            self.source_kind().map(|_| ())?;
            return Ok(());
        }
        let schema = self.kind.schema();
        for (key, _) in self.params.iter() {
            if !schema.iter().any(|(k, _, _)| *k == key) {
                return Err(PipelineError::MalformedSpec(format!(
                    "{}: unknown parameter {key:?}",
                    self.kind
                )));
            }
        }
        for &(key, ty, required) in schema {
            if self.params.contains(key) {
                check_type(self.kind, key, ty, &self.params)?;
            } else if required {
                return Err(PipelineError::MalformedSpec(format!(
                    "{}: missing parameter {key:?}",
                    self.kind
                )));
            }
        }
        let positive = |key: &str| -> Result<(), PipelineError> {
            if self.params.u64(key)? == 0 {
                return Err(PipelineError::MalformedSpec(format!(
                    "{}: {key} must be at least 1",
                    self.kind
                )));
            }
            Ok(())
        };
        match self.kind {
            OpKind::Batch => positive("size")?,
            OpKind::Prefetch | OpKind::Shuffle => positive("buffer_size")?,
            OpKind::GroupByWindow => positive("window_size")?,
            OpKind::BucketBySequenceLength => {
                positive("batch_size")?;
                super::validate_boundaries(&self.params.u64_list("boundaries")?)?;
            }
            OpKind::Map | OpKind::FusedMapFilter if self.params.contains("parallelism") => {
                positive("parallelism")?
            }
            _ => {}
        }
        Ok(())
    }

    pub fn source_kind(&self) -> Result<SourceKind, PipelineError> {
        let p = &self.params;
        let ty = p.str("type").map_err(|_| {
            PipelineError::MalformedSpec("source: missing string parameter \"type\"".into())
        })?;
        let allowed: &[&str] = match ty {
            "range" => &["type", "start", "end", "seq_len"],
            "records" => &["type", "dir", "granularity", "shards"],
            other => {
                return Err(PipelineError::MalformedSpec(format!(
                    "source: unknown type {other:?}"
                )))
            }
        };
        for (key, _) in p.iter() {
            if !allowed.contains(&key) {
                return Err(PipelineError::MalformedSpec(format!(
                    "source: unknown parameter {key:?}"
                )));
            }
        }
        let malformed =
            |e: crate::kv::KvError| PipelineError::MalformedSpec(format!("source: {e}"));
        match ty {
            "range" => {
                let start = p.opt_u64("start").map_err(malformed)?.unwrap_or(0);
                let end = p.u64("end").map_err(malformed)?;
                if end < start {
                    return Err(PipelineError::MalformedSpec("source: end < start".into()));
                }
                let seq_len = p.opt_u64("seq_len").map_err(malformed)?.unwrap_or(1);
                let seq_len = u32::try_from(seq_len).map_err(|_| {
                    PipelineError::MalformedSpec("source: seq_len too large".into())
                })?;
                Ok(SourceKind::Range {
                    start,
                    end,
                    seq_len,
                })
            }
            _ => {
                let dir = p.str("dir").map_err(malformed)?.to_string();
                let granularity = match p.opt_bytes("granularity") {
                    Some(_) => p.str("granularity").map_err(malformed)?.to_string(),
                    None => "file".to_string(),
                };
                if !["file", "range", "fileset"].contains(&granularity.as_str()) {
                    return Err(PipelineError::MalformedSpec(format!(
                        "source: unknown granularity {granularity:?}"
                    )));
                }
                let shards = p.opt_u64("shards").map_err(malformed)?.unwrap_or(0);
                Ok(SourceKind::Records {
                    dir,
                    granularity,
                    shards,
                })
            }
        }
    }

    /// Function ids referenced by this node, with their namespace.
    pub(crate) fn function_refs(&self) -> Vec<(FnNamespace, &str)> {
        match self.kind {
            OpKind::Map => vec![(FnNamespace::Map, self.fn_id("fn"))],
            OpKind::Filter => vec![(FnNamespace::Predicate, self.fn_id("fn"))],
            OpKind::FlatMap => vec![(FnNamespace::FlatMap, self.fn_id("fn"))],
            OpKind::FusedMapFilter => vec![
                (FnNamespace::Map, self.fn_id("map_fn")),
                (FnNamespace::Predicate, self.fn_id("filter_fn")),
            ],
            _ => vec![],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum FnNamespace {
    Map,
    Predicate,
    FlatMap,
}

/// Serializable linear dataflow graph: one source followed by transformations.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetGraph {
    version: u16,
    nodes: Vec<OperatorSpec>,
    fingerprint: u64,
}

impl DatasetGraph {
    /// Validates structure and parameters and computes the fingerprint.
    pub fn from_nodes(nodes: Vec<OperatorSpec>) -> Result<Self, PipelineError> {
        Self::with_version(GRAPH_VERSION, nodes)
    }

    fn with_version(version: u16, nodes: Vec<OperatorSpec>) -> Result<Self, PipelineError> {
        match nodes.first() {
            None => return Err(PipelineError::MalformedSpec("empty pipeline".into())),
            Some(n) if n.kind != OpKind::Source => {
                return Err(PipelineError::MalformedSpec(
                    "pipeline must start with a source".into(),
                ))
            }
            _ => {}
        }
        if nodes.iter().skip(1).any(|n| n.kind == OpKind::Source) {
            return Err(PipelineError::MalformedSpec(
                "pipeline has more than one source".into(),
            ));
        }
        if nodes.len() > u16::MAX as usize {
            return Err(PipelineError::MalformedSpec("too many nodes".into()));
        }
        for n in &nodes {
            n.validate()?;
        }
        let mut g = Self {
            version,
            nodes,
            fingerprint: 0,
        };
        let bytes = g.to_bytes();
        g.fingerprint = fnv1a64(&bytes);
        Ok(g)
    }

    pub fn version(&self) -> u16 {
        self.version
    }

    pub fn nodes(&self) -> &[OperatorSpec] {
        &self.nodes
    }

    pub fn fingerprint(&self) -> u64 {
        self.fingerprint
    }

    pub fn source(&self) -> &OperatorSpec {
        &self.nodes[0]
    }

    pub fn kinds(&self) -> Vec<OpKind> {
        self.nodes.iter().map(|n| n.kind).collect()
    }

    pub fn contains(&self, kind: OpKind) -> bool {
        self.nodes.iter().any(|n| n.kind == kind)
    }

    /// Checks every function reference against `registry`.
    pub fn check_functions(&self, registry: &FunctionRegistry) -> Result<(), PipelineError> {
        for node in &self.nodes {
            for (ns, id) in node.function_refs() {
                match ns {
                    FnNamespace::Map => registry.map(id).map(|_| ())?,
                    FnNamespace::Predicate => registry.predicate(id).map(|_| ())?,
                    FnNamespace::FlatMap => registry.flat_map(id).map(|_| ())?,
                }
            }
        }
        Ok(())
    }

    /// Canonical binary form. Params are already canonically ordered.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&self.version.to_le_bytes());
        out.extend_from_slice(&(self.nodes.len() as u16).to_le_bytes());
        for node in &self.nodes {
            out.push(node.kind as u8);
            // Validated nodes never exceed 255 params.
            node.params
                .encode_into(&mut out)
                .expect("validated node params encode");
        }
        out
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self, PipelineError> {
        let truncated = || PipelineError::MalformedSpec("truncated graph".into());
        let version = read_u16(buf, 0).ok_or_else(truncated)?;
        if version != GRAPH_VERSION {
            return Err(PipelineError::MalformedSpec(format!(
                "unsupported graph version {version}"
            )));
        }
        let count = read_u16(buf, 2).ok_or_else(truncated)? as usize;
        let mut pos = 4;
        let mut nodes = Vec::with_capacity(count);
        for _ in 0..count {
            let kind_byte = *buf.get(pos).ok_or_else(truncated)?;
            let kind = OpKind::from_u8(kind_byte).ok_or_else(|| {
                PipelineError::MalformedSpec(format!("unknown operator kind {kind_byte}"))
            })?;
            pos += 1;
            let (params, used) = KvMap::decode_prefix(&buf[pos..])?;
            pos += used;
            nodes.push(OperatorSpec { kind, params });
        }
        if pos != buf.len() {
            return Err(PipelineError::MalformedSpec(
                "trailing bytes after graph".into(),
            ));
        }
        Self::with_version(version, nodes)
    }
}
