use std::collections::{BTreeMap, VecDeque};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;

use crossbeam_channel::{bounded, Receiver};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::bucket::Bucketer;
use super::{
    Batch, DatasetGraph, Element, FlatMapFn, FunctionRegistry, Item, MapFn, OpKind, OperatorSpec,
    PipelineError, PredicateFn, SourceKind,
};

/// Supplies source elements to a stream.
pub trait ElementSource: Send {
    fn next_element(&mut self) -> Result<Option<Element>, PipelineError>;

    /// Rewinds to the beginning. Returns `false` when replay is unsupported.
    fn reset(&mut self) -> Result<bool, PipelineError> {
        Ok(false)
    }
}

/// `start..end` as elements with key = value and an 8-byte LE payload.
#[derive(Debug, Clone)]
pub struct RangeSource {
    start: u64,
    end: u64,
    next: u64,
    seq_len: u32,
}

impl RangeSource {
    pub fn new(start: u64, end: u64, seq_len: u32) -> Self {
        Self {
            start,
            end,
            next: start,
            seq_len,
        }
    }
}

impl ElementSource for RangeSource {
    fn next_element(&mut self) -> Result<Option<Element>, PipelineError> {
        if self.next >= self.end {
            return Ok(None);
        }
        let v = self.next;
        self.next += 1;
        Ok(Some(Element::new(
            v,
            self.seq_len,
            v.to_le_bytes().to_vec(),
        )))
    }

    fn reset(&mut self) -> Result<bool, PipelineError> {
        self.next = self.start;
        Ok(true)
    }
}

/// Replays a fixed list of elements.
#[derive(Debug, Clone)]
pub struct VecSource {
    items: Vec<Element>,
    pos: usize,
}

impl VecSource {
    pub fn new(items: Vec<Element>) -> Self {
        Self { items, pos: 0 }
    }
}

impl ElementSource for VecSource {
    fn next_element(&mut self) -> Result<Option<Element>, PipelineError> {
        let e = self.items.get(self.pos).cloned();
        if e.is_some() {
            self.pos += 1;
        }
        Ok(e)
    }

    fn reset(&mut self) -> Result<bool, PipelineError> {
        self.pos = 0;
        Ok(true)
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct ExecOptions {
    /// Surface per-element function failures instead of skipping them.
    pub fail_fast: bool,
}

/// Counters shared by all operators of one stream.
#[derive(Debug, Default)]
pub struct StreamStats {
    pub elements_read: AtomicU64,
    pub skipped_failures: AtomicU64,
}

impl StreamStats {
    pub fn elements_read(&self) -> u64 {
        self.elements_read.load(Ordering::Relaxed)
    }

    pub fn skipped_failures(&self) -> u64 {
        self.skipped_failures.load(Ordering::Relaxed)
    }
}

type OpResult = Result<Option<Item>, PipelineError>;

trait Operator: Send {
    fn next(&mut self) -> OpResult;
    fn reset(&mut self) -> Result<bool, PipelineError>;
}

type BoxOp = Box<dyn Operator>;

#[derive(Clone)]
struct Ctx {
    stats: Arc<StreamStats>,
    fail_fast: bool,
}

impl Ctx {
    /// Applies the failure policy to a function error.
    fn failed(&self, op: &str, key: u64, reason: String) -> Result<(), PipelineError> {
        if self.fail_fast {
            Err(PipelineError::FunctionFailure {
                op: op.to_string(),
                key,
                reason,
            })
        } else {
            log::debug!("skipping element {key}: {op} failed: {reason}");
            self.stats.skipped_failures.fetch_add(1, Ordering::Relaxed);
            Ok(())
        }
    }
}

fn expect_element(op: &str, item: Item) -> Result<Element, PipelineError> {
    match item {
        Item::Element(e) => Ok(e),
        other => Err(PipelineError::MalformedSpec(format!(
            "{op} expects elements, got a {}",
            other.kind_name()
        ))),
    }
}

struct SourceOp {
    source: Box<dyn ElementSource>,
    ctx: Ctx,
}

impl Operator for SourceOp {
    fn next(&mut self) -> OpResult {
        let e = self.source.next_element()?;
        if e.is_some() {
            self.ctx.stats.elements_read.fetch_add(1, Ordering::Relaxed);
        }
        Ok(e.map(Item::Element))
    }

    fn reset(&mut self) -> Result<bool, PipelineError> {
        self.source.reset()
    }
}

/// Element-wise map and/or filter with static parallelism. Elements are
/// processed in chunks of `parallelism` and emitted in input order.
struct MapFilterOp {
    name: &'static str,
    upstream: BoxOp,
    map: Option<(MapFn, u64)>,
    filter: Option<(PredicateFn, u64)>,
    parallelism: usize,
    ready: VecDeque<Element>,
    ctx: Ctx,
}

enum Outcome {
    Keep(Element),
    Drop,
    Failed(u64, String),
}

fn apply_fns(
    map: Option<&(MapFn, u64)>,
    filter: Option<&(PredicateFn, u64)>,
    e: Element,
) -> Outcome {
    let key = e.key;
    let e = match map {
        Some((f, arg)) => match f(e, *arg) {
            Ok(e) => e,
            Err(reason) => return Outcome::Failed(key, reason),
        },
        None => e,
    };
    match filter {
        Some((p, arg)) => match p(&e, *arg) {
            Ok(true) => Outcome::Keep(e),
            Ok(false) => Outcome::Drop,
            Err(reason) => Outcome::Failed(key, reason),
        },
        None => Outcome::Keep(e),
    }
}

impl MapFilterOp {
    fn fill(&mut self) -> Result<bool, PipelineError> {
        let mut chunk = Vec::with_capacity(self.parallelism);
        while chunk.len() < self.parallelism {
            match self.upstream.next()? {
                Some(item) => chunk.push(expect_element(self.name, item)?),
                None => break,
            }
        }
        if chunk.is_empty() {
            return Ok(false);
        }
        let (map, filter) = (self.map.as_ref(), self.filter.as_ref());
        let outcomes: Vec<Outcome> = if self.parallelism <= 1 || chunk.len() == 1 {
            chunk
                .into_iter()
                .map(|e| apply_fns(map, filter, e))
                .collect()
        } else {
            std::thread::scope(|s| {
                let handles: Vec<_> = chunk
                    .into_iter()
                    .map(|e| s.spawn(move || apply_fns(map, filter, e)))
                    .collect();
                handles
                    .into_iter()
                    .map(|h| h.join().expect("map worker panicked"))
                    .collect()
            })
        };
        for o in outcomes {
            match o {
                Outcome::Keep(e) => self.ready.push_back(e),
                Outcome::Drop => {}
                Outcome::Failed(key, reason) => self.ctx.failed(self.name, key, reason)?,
            }
        }
        Ok(true)
    }
}

impl Operator for MapFilterOp {
    fn next(&mut self) -> OpResult {
        loop {
            if let Some(e) = self.ready.pop_front() {
                return Ok(Some(Item::Element(e)));
            }
            if !self.fill()? {
                return Ok(None);
            }
        }
    }

    fn reset(&mut self) -> Result<bool, PipelineError> {
        self.ready.clear();
        self.upstream.reset()
    }
}

/// Seeded fixed-capacity reservoir shuffle.
struct ShuffleOp {
    upstream: BoxOp,
    capacity: usize,
    buffer: Vec<Item>,
    rng: ChaCha8Rng,
    exhausted: bool,
}

impl Operator for ShuffleOp {
    fn next(&mut self) -> OpResult {
        while !self.exhausted && self.buffer.len() < self.capacity {
            match self.upstream.next()? {
                Some(item) => self.buffer.push(item),
                None => self.exhausted = true,
            }
        }
        if self.buffer.is_empty() {
            return Ok(None);
        }
        let idx = self.rng.gen_range(0..self.buffer.len());
        Ok(Some(self.buffer.swap_remove(idx)))
    }

    fn reset(&mut self) -> Result<bool, PipelineError> {
        self.buffer.clear();
        self.exhausted = false;
        self.upstream.reset()
    }
}

struct RepeatOp {
    upstream: BoxOp,
    /// 0 repeats forever.
    count: u64,
    epoch: u64,
    produced_this_epoch: bool,
}

impl Operator for RepeatOp {
    fn next(&mut self) -> OpResult {
        loop {
            if let Some(item) = self.upstream.next()? {
                self.produced_this_epoch = true;
                return Ok(Some(item));
            }
            self.epoch += 1;
            let more = self.count == 0 || self.epoch < self.count;
            if !more || !self.produced_this_epoch || !self.upstream.reset()? {
                return Ok(None);
            }
            self.produced_this_epoch = false;
        }
    }

    fn reset(&mut self) -> Result<bool, PipelineError> {
        self.epoch = 0;
        self.produced_this_epoch = false;
        self.upstream.reset()
    }
}

struct BatchOp {
    upstream: BoxOp,
    size: usize,
    drop_remainder: bool,
}

impl Operator for BatchOp {
    fn next(&mut self) -> OpResult {
        let mut elems = Vec::with_capacity(self.size);
        while elems.len() < self.size {
            match self.upstream.next()? {
                Some(item) => elems.push(expect_element("batch", item)?),
                None => break,
            }
        }
        if elems.is_empty() || (self.drop_remainder && elems.len() < self.size) {
            return Ok(None);
        }
        Ok(Some(Item::Batch(Batch::new(elems))))
    }

    fn reset(&mut self) -> Result<bool, PipelineError> {
        self.upstream.reset()
    }
}

struct PadOp {
    upstream: BoxOp,
}

fn pad_item(item: Item) -> Item {
    match item {
        Item::Batch(mut b) => {
            b.materialize_padding();
            Item::Batch(b)
        }
        Item::Window(ws) => Item::Window(
            ws.into_iter()
                .map(|mut b| {
                    b.materialize_padding();
                    b
                })
                .collect(),
        ),
        e => e,
    }
}

impl Operator for PadOp {
    fn next(&mut self) -> OpResult {
        Ok(self.upstream.next()?.map(pad_item))
    }

    fn reset(&mut self) -> Result<bool, PipelineError> {
        self.upstream.reset()
    }
}

/// Runs the upstream on a background thread behind a bounded channel.
struct PrefetchOp {
    upstream: Option<BoxOp>,
    buffer: usize,
    running: Option<Running>,
    finished: bool,
}

struct Running {
    rx: Receiver<OpResult>,
    stop: Arc<AtomicBool>,
    handle: JoinHandle<BoxOp>,
}

impl PrefetchOp {
    fn start(&mut self) {
        let mut upstream = self.upstream.take().expect("prefetch upstream present");
        let (tx, rx) = bounded(self.buffer);
        let stop = Arc::new(AtomicBool::new(false));
        let stop_flag = stop.clone();
        let handle = std::thread::Builder::new()
            .name("prefetch".into())
            .spawn(move || {
                while !stop_flag.load(Ordering::Relaxed) {
                    let r = upstream.next();
                    let end = matches!(r, Ok(None));
                    if tx.send(r).is_err() || end {
                        break;
                    }
                }
                upstream
            })
            .expect("spawn prefetch thread");
        self.running = Some(Running { rx, stop, handle });
    }
}

impl Operator for PrefetchOp {
    fn next(&mut self) -> OpResult {
        if self.finished {
            return Ok(None);
        }
        if self.running.is_none() {
            self.start();
        }
        let running = self.running.as_ref().expect("started above");
        match running.rx.recv() {
            Ok(Ok(None)) | Err(_) => {
                self.finished = true;
                Ok(None)
            }
            Ok(r) => r,
        }
    }

    fn reset(&mut self) -> Result<bool, PipelineError> {
        if let Some(running) = self.running.take() {
            running.stop.store(true, Ordering::Relaxed);
            // Unblock a pending send, then wait for the thread to hand back
            // the upstream.
            while running.rx.recv().is_ok() {}
            let upstream = running
                .handle
                .join()
                .map_err(|_| PipelineError::Source("prefetch thread panicked".into()))?;
            self.upstream = Some(upstream);
        }
        self.finished = false;
        self.upstream.as_mut().expect("upstream returned").reset()
    }
}

impl Drop for PrefetchOp {
    fn drop(&mut self) {
        if let Some(running) = self.running.take() {
            running.stop.store(true, Ordering::Relaxed);
            // Dropping the receiver fails the producer's next send; the
            // thread is detached because it may be blocked upstream.
            drop(running.rx);
        }
    }
}

struct BucketOp {
    upstream: BoxOp,
    bucketer: Bucketer,
    exhausted: bool,
}

impl Operator for BucketOp {
    fn next(&mut self) -> OpResult {
        while !self.exhausted {
            match self.upstream.next()? {
                Some(item) => {
                    let e = expect_element("bucket_by_sequence_length", item)?;
                    if let Some(b) = self.bucketer.push(e) {
                        return Ok(Some(Item::Batch(b)));
                    }
                }
                None => self.exhausted = true,
            }
        }
        Ok(self.bucketer.flush_one().map(Item::Batch))
    }

    fn reset(&mut self) -> Result<bool, PipelineError> {
        self.bucketer.clear();
        self.exhausted = false;
        self.upstream.reset()
    }
}

/// Emits windows of `window_size` consecutive batches sharing a bucket id.
struct GroupByWindowOp {
    upstream: BoxOp,
    window_size: usize,
    groups: BTreeMap<Option<u32>, Vec<Batch>>,
    exhausted: bool,
}

impl Operator for GroupByWindowOp {
    fn next(&mut self) -> OpResult {
        while !self.exhausted {
            match self.upstream.next()? {
                Some(Item::Batch(b)) => {
                    let group = self.groups.entry(b.bucket_id).or_default();
                    group.push(b);
                    if group.len() == self.window_size {
                        return Ok(Some(Item::Window(std::mem::take(group))));
                    }
                }
                Some(other) => {
                    return Err(PipelineError::MalformedSpec(format!(
                        "group_by_window expects batches, got a {}",
                        other.kind_name()
                    )))
                }
                None => self.exhausted = true,
            }
        }
        let key = self
            .groups
            .iter()
            .find(|(_, v)| !v.is_empty())
            .map(|(k, _)| *k);
        Ok(key.and_then(|k| self.groups.remove(&k)).map(Item::Window))
    }

    fn reset(&mut self) -> Result<bool, PipelineError> {
        self.groups.clear();
        self.exhausted = false;
        self.upstream.reset()
    }
}

struct FlatMapOp {
    upstream: BoxOp,
    f: FlatMapFn,
    arg: u64,
    ready: VecDeque<Item>,
    ctx: Ctx,
}

impl Operator for FlatMapOp {
    fn next(&mut self) -> OpResult {
        loop {
            if let Some(item) = self.ready.pop_front() {
                return Ok(Some(item));
            }
            let Some(item) = self.upstream.next()? else {
                return Ok(None);
            };
            let key = item.keys().first().copied().unwrap_or(0);
            match (self.f)(item, self.arg) {
                Ok(items) => self.ready.extend(items),
                Err(reason) => self.ctx.failed("flat_map", key, reason)?,
            }
        }
    }

    fn reset(&mut self) -> Result<bool, PipelineError> {
        self.ready.clear();
        self.upstream.reset()
    }
}

struct TakeOp {
    upstream: BoxOp,
    count: u64,
    taken: u64,
}

impl Operator for TakeOp {
    fn next(&mut self) -> OpResult {
        if self.taken >= self.count {
            return Ok(None);
        }
        let item = self.upstream.next()?;
        if item.is_some() {
            self.taken += 1;
        }
        Ok(item)
    }

    fn reset(&mut self) -> Result<bool, PipelineError> {
        self.taken = 0;
        self.upstream.reset()
    }
}

/// Memoizes the first complete pass; later passes replay from memory.
struct CacheOp {
    upstream: BoxOp,
    items: Vec<Item>,
    complete: bool,
    replay_pos: usize,
}

impl Operator for CacheOp {
    fn next(&mut self) -> OpResult {
        if self.complete {
            let item = self.items.get(self.replay_pos).cloned();
            self.replay_pos += 1;
            return Ok(item);
        }
        match self.upstream.next()? {
            Some(item) => {
                self.items.push(item.clone());
                Ok(Some(item))
            }
            None => {
                self.complete = true;
                self.replay_pos = self.items.len();
                Ok(None)
            }
        }
    }

    fn reset(&mut self) -> Result<bool, PipelineError> {
        if self.complete {
            self.replay_pos = 0;
            Ok(true)
        } else {
            self.items.clear();
            self.upstream.reset()
        }
    }
}

/// Pull-based iterator over a materialized graph. Single consumer.
pub struct ElementStream {
    root: BoxOp,
    stats: Arc<StreamStats>,
    finished: bool,
}

impl std::fmt::Debug for ElementStream {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ElementStream")
            .field("finished", &self.finished)
            .field("elements_read", &self.stats.elements_read())
            .finish()
    }
}

/// Binds `graph` to `source` and builds the operator chain.
///
/// A graph whose source node is a `range` ignores `source` and generates its
/// own elements; pass [`ElementStream::for_range_graph`] in that case.
pub fn instantiate(
    graph: &DatasetGraph,
    source: Box<dyn ElementSource>,
    seed: u64,
    registry: &FunctionRegistry,
    options: ExecOptions,
) -> Result<ElementStream, PipelineError> {
    graph.check_functions(registry)?;
    let ctx = Ctx {
        stats: Arc::new(StreamStats::default()),
        fail_fast: options.fail_fast,
    };
    let source: Box<dyn ElementSource> = match graph.source().source_kind()? {
        SourceKind::Range {
            start,
            end,
            seq_len,
        } => Box::new(RangeSource::new(start, end, seq_len)),
        SourceKind::Records { .. } => source,
    };
    let mut op: BoxOp = Box::new(SourceOp {
        source,
        ctx: ctx.clone(),
    });
    // Shuffles are salted by their ordinal among shuffles, not by node
    // position, so removing no-op nodes keeps every permutation intact.
    let mut shuffles = 0;
    for node in graph.nodes().iter().skip(1) {
        op = build_op(node, shuffles, op, seed, registry, &ctx)?;
        if node.kind == OpKind::Shuffle {
            shuffles += 1;
        }
    }
    Ok(ElementStream {
        root: op,
        stats: ctx.stats,
        finished: false,
    })
}

fn build_op(
    node: &OperatorSpec,
    ordinal: usize,
    upstream: BoxOp,
    seed: u64,
    registry: &FunctionRegistry,
    ctx: &Ctx,
) -> Result<BoxOp, PipelineError> {
    let p = &node.params;
    let usize_param = |key: &str| -> Result<usize, PipelineError> { Ok(p.u64(key)? as usize) };
    Ok(match node.kind {
        OpKind::Source => unreachable!("validated graphs have a single leading source"),
        OpKind::Map => Box::new(MapFilterOp {
            name: "map",
            upstream,
            map: Some((registry.map(p.str("fn")?)?, node.u64_or("arg", 0))),
            filter: None,
            parallelism: node.u64_or("parallelism", 1) as usize,
            ready: VecDeque::new(),
            ctx: ctx.clone(),
        }),
        OpKind::Filter => Box::new(MapFilterOp {
            name: "filter",
            upstream,
            map: None,
            filter: Some((registry.predicate(p.str("fn")?)?, node.u64_or("arg", 0))),
            parallelism: 1,
            ready: VecDeque::new(),
            ctx: ctx.clone(),
        }),
        OpKind::FusedMapFilter => Box::new(MapFilterOp {
            name: "fused_map_filter",
            upstream,
            map: Some((registry.map(p.str("map_fn")?)?, node.u64_or("map_arg", 0))),
            filter: Some((
                registry.predicate(p.str("filter_fn")?)?,
                node.u64_or("filter_arg", 0),
            )),
            parallelism: node.u64_or("parallelism", 1) as usize,
            ready: VecDeque::new(),
            ctx: ctx.clone(),
        }),
        OpKind::Shuffle => {
            let node_seed = node.u64_or("seed", 0);
            let mixed = seed
                ^ node_seed.rotate_left(17)
                ^ (ordinal as u64 + 1).wrapping_mul(0x9e37_79b9_7f4a_7c15);
            Box::new(ShuffleOp {
                upstream,
                capacity: usize_param("buffer_size")?,
                buffer: Vec::new(),
                rng: ChaCha8Rng::seed_from_u64(mixed),
                exhausted: false,
            })
        }
        OpKind::Repeat => Box::new(RepeatOp {
            upstream,
            count: p.u64("count")?,
            epoch: 0,
            produced_this_epoch: false,
        }),
        OpKind::Batch => Box::new(BatchOp {
            upstream,
            size: usize_param("size")?,
            drop_remainder: p.opt_bytes("drop_remainder").is_some() && p.bool("drop_remainder")?,
        }),
        OpKind::Pad => Box::new(PadOp { upstream }),
        OpKind::Prefetch => Box::new(PrefetchOp {
            upstream: Some(upstream),
            buffer: usize_param("buffer_size")?,
            running: None,
            finished: false,
        }),
        OpKind::BucketBySequenceLength => Box::new(BucketOp {
            upstream,
            bucketer: Bucketer::new(p.u64_list("boundaries")?, usize_param("batch_size")?)?,
            exhausted: false,
        }),
        OpKind::GroupByWindow => Box::new(GroupByWindowOp {
            upstream,
            window_size: usize_param("window_size")?,
            groups: BTreeMap::new(),
            exhausted: false,
        }),
        OpKind::FlatMap => Box::new(FlatMapOp {
            upstream,
            f: registry.flat_map(p.str("fn")?)?,
            arg: node.u64_or("arg", 0),
            ready: VecDeque::new(),
            ctx: ctx.clone(),
        }),
        OpKind::Take => Box::new(TakeOp {
            upstream,
            count: p.u64("count")?,
            taken: 0,
        }),
        OpKind::Cache => Box::new(CacheOp {
            upstream,
            items: Vec::new(),
            complete: false,
            replay_pos: 0,
        }),
    })
}

impl ElementStream {
    /// Instantiates a graph whose source is a `range` node.
    pub fn for_range_graph(
        graph: &DatasetGraph,
        seed: u64,
        registry: &FunctionRegistry,
    ) -> Result<Self, PipelineError> {
        match graph.source().source_kind()? {
            SourceKind::Range { .. } => instantiate(
                graph,
                Box::new(VecSource::new(Vec::new())),
                seed,
                registry,
                ExecOptions::default(),
            ),
            SourceKind::Records { .. } => Err(PipelineError::MalformedSpec(
                "record sources must be bound to shards".into(),
            )),
        }
    }

    /// Next item, or `None` at end of data. Once `None` has been returned
    /// every later call returns `None`.
    #[allow(clippy::should_implement_trait)]
    pub fn next(&mut self) -> Result<Option<Item>, PipelineError> {
        if self.finished {
            return Ok(None);
        }
        let item = self.root.next()?;
        if item.is_none() {
            self.finished = true;
        }
        Ok(item)
    }

    pub fn stats(&self) -> Arc<StreamStats> {
        self.stats.clone()
    }

    /// Drains the stream into a vector.
    pub fn collect_all(&mut self) -> Result<Vec<Item>, PipelineError> {
        let mut out = Vec::new();
        while let Some(item) = self.next()? {
            out.push(item);
        }
        Ok(out)
    }
}
