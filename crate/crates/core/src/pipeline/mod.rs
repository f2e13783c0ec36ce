//! Dataset dataflow IR and its pull-based execution engine.
//!
//! A pipeline is a linear chain of operators starting at a single source.
//! User code never travels with the graph: transformations reference entries
//! of a [`FunctionRegistry`] by string id, so a serialized graph can be
//! shipped to any worker that carries the same registry.

mod bucket;
mod builder;
mod exec;
mod functions;
mod graph;
mod optimize;

use thiserror::Error;

pub use bucket::{bucket_and_pad, bucket_for, validate_boundaries, BucketBatches};
pub use builder::{build_graph, Pipeline, PipelineSpec};
pub use exec::{
    instantiate, ElementSource, ElementStream, ExecOptions, RangeSource, StreamStats, VecSource,
};
pub use functions::{burn, FlatMapFn, FunctionRegistry, MapFn, PredicateFn};
pub use graph::{DatasetGraph, OpKind, OperatorSpec, SourceKind, GRAPH_VERSION};
pub use optimize::{optimize, DEFAULT_PREFETCH_BUFFER};

use crate::kv::KvError;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum PipelineError {
    #[error("unknown function id {0:?}")]
    UnknownFunction(String),
    #[error("malformed pipeline: {0}")]
    MalformedSpec(String),
    #[error("invalid bucket boundaries: {0}")]
    InvalidBoundaries(String),
    #[error("function failure in {op} on element {key}: {reason}")]
    FunctionFailure {
        op: String,
        key: u64,
        reason: String,
    },
    #[error("source failure: {0}")]
    Source(String),
}

impl From<KvError> for PipelineError {
    fn from(e: KvError) -> Self {
        PipelineError::MalformedSpec(e.to_string())
    }
}

/// One source sample. `seq_len` is the logical (unpadded) length; one
/// logical unit is one payload byte.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Element {
    pub key: u64,
    pub seq_len: u32,
    pub payload: Vec<u8>,
}

impl Element {
    pub fn new(key: u64, seq_len: u32, payload: Vec<u8>) -> Self {
        Self {
            key,
            seq_len,
            payload,
        }
    }
}

/// A non-empty group of elements padded to the longest member.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Batch {
    pub elements: Vec<Element>,
    pub padded_len: u32,
    pub bucket_id: Option<u32>,
    pub producer_round: Option<u64>,
}

impl Batch {
    /// Panics if `elements` is empty.
    pub fn new(elements: Vec<Element>) -> Self {
        assert!(!elements.is_empty(), "a batch holds at least one element");
        let padded_len = elements.iter().map(|e| e.seq_len).max().unwrap_or(0);
        Self {
            elements,
            padded_len,
            bucket_id: None,
            producer_round: None,
        }
    }

    pub fn with_bucket(mut self, bucket: u32) -> Self {
        self.bucket_id = Some(bucket);
        self
    }

    pub fn len(&self) -> usize {
        self.elements.len()
    }

    pub fn is_empty(&self) -> bool {
        self.elements.is_empty()
    }

    pub fn keys(&self) -> impl Iterator<Item = u64> + '_ {
        self.elements.iter().map(|e| e.key)
    }

    /// Padding units across the batch: sum of `padded_len - seq_len`.
    pub fn padding_waste(&self) -> u64 {
        self.elements
            .iter()
            .map(|e| u64::from(self.padded_len.saturating_sub(e.seq_len)))
            .sum()
    }

    /// Zero-fills every payload up to `padded_len` bytes. The element's
    /// `seq_len` stays the validity length.
    pub fn materialize_padding(&mut self) {
        let target = self.padded_len as usize;
        for e in &mut self.elements {
            if e.payload.len() < target {
                e.payload.resize(target, 0);
            }
        }
    }
}

/// What flows between operators.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum Item {
    Element(Element),
    Batch(Batch),
    /// Consecutive same-bucket batches grouped by `group_by_window`.
    Window(Vec<Batch>),
}

impl Item {
    pub fn kind_name(&self) -> &'static str {
        match self {
            Item::Element(_) => "element",
            Item::Batch(_) => "batch",
            Item::Window(_) => "window",
        }
    }

    /// Every element key carried by this item, in order.
    pub fn keys(&self) -> Vec<u64> {
        match self {
            Item::Element(e) => vec![e.key],
            Item::Batch(b) => b.keys().collect(),
            Item::Window(w) => w.iter().flat_map(|b| b.keys()).collect(),
        }
    }

    /// Flattens the item into batches; bare elements become singleton batches.
    pub fn into_batches(self) -> Vec<Batch> {
        match self {
            Item::Element(e) => vec![Batch::new(vec![e])],
            Item::Batch(b) => vec![b],
            Item::Window(w) => w,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn padded_len_is_batch_max() {
        let b = Batch::new(vec![
            Element::new(1, 2, vec![1, 1]),
            Element::new(2, 3, vec![1, 1, 1]),
        ]);
        assert_eq!(b.padded_len, 3);
        assert_eq!(b.padding_waste(), 1);
    }

    #[test]
    fn padding_fills_zero_bytes_and_keeps_validity() {
        let mut b = Batch::new(vec![
            Element::new(1, 1, vec![9]),
            Element::new(2, 4, vec![1, 2, 3, 4]),
        ]);
        b.materialize_padding();
        assert_eq!(b.elements[0].payload, vec![9, 0, 0, 0]);
        assert_eq!(b.elements[0].seq_len, 1);
    }

    #[test]
    #[should_panic]
    fn empty_batch_panics() {
        Batch::new(vec![]);
    }
}
