use std::collections::BTreeMap;
use std::hint::black_box;
use std::sync::Arc;

use super::{Element, Item, PipelineError};

/// Element transformation; the `u64` is the node's `arg` parameter.
pub type MapFn = Arc<dyn Fn(Element, u64) -> Result<Element, String> + Send + Sync>;
pub type PredicateFn = Arc<dyn Fn(&Element, u64) -> Result<bool, String> + Send + Sync>;
pub type FlatMapFn = Arc<dyn Fn(Item, u64) -> Result<Vec<Item>, String> + Send + Sync>;

/// Table of deterministic, pure functions addressable by id.
///
/// `FunctionRegistry::default()` carries the builtin catalog. Processes that
/// need extra functions register them at startup, before any graph is built
/// or instantiated.
#[derive(Clone)]
pub struct FunctionRegistry {
    maps: BTreeMap<String, MapFn>,
    predicates: BTreeMap<String, PredicateFn>,
    flat_maps: BTreeMap<String, FlatMapFn>,
}

impl std::fmt::Debug for FunctionRegistry {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("FunctionRegistry")
            .field("maps", &self.maps.keys().collect::<Vec<_>>())
            .field("predicates", &self.predicates.keys().collect::<Vec<_>>())
            .field("flat_maps", &self.flat_maps.keys().collect::<Vec<_>>())
            .finish()
    }
}

/// Map id treated as dead by the optimizer.
pub const IDENTITY: &str = "identity";
/// Predicate id treated as dead by the optimizer.
pub const ALWAYS_TRUE: &str = "always_true";

impl Default for FunctionRegistry {
    fn default() -> Self {
        let mut r = Self::empty();
        r.register_map(IDENTITY, |e, _| Ok(e));
        r.register_map("burn", |e, iters| {
            burn(&e.payload, iters);
            Ok(e)
        });
        r.register_map("xor_payload", |mut e, arg| {
            for b in &mut e.payload {
                *b ^= arg as u8;
            }
            Ok(e)
        });
        r.register_map("fail_on_key_mod", |e, m| {
            if m != 0 && e.key % m == 0 {
                Err(format!("key {} divisible by {m}", e.key))
            } else {
                Ok(e)
            }
        });
        r.register_predicate(ALWAYS_TRUE, |_, _| Ok(true));
        r.register_predicate("even_key", |e, _| Ok(e.key % 2 == 0));
        r.register_predicate("odd_key", |e, _| Ok(e.key % 2 == 1));
        r.register_predicate("key_lt", |e, n| Ok(e.key < n));
        r.register_predicate("seq_len_le", |e, n| Ok(u64::from(e.seq_len) <= n));
        r.register_predicate("fail_on_key_mod", |e, m| {
            if m != 0 && e.key % m == 0 {
                Err(format!("key {} divisible by {m}", e.key))
            } else {
                Ok(true)
            }
        });
        // One level of unnesting, i.e. `flat_map(lambda x: x)`.
        r.register_flat_map(IDENTITY, |item, _| {
            Ok(match item {
                Item::Window(batches) => batches.into_iter().map(Item::Batch).collect(),
                Item::Batch(b) => b.elements.into_iter().map(Item::Element).collect(),
                e @ Item::Element(_) => vec![e],
            })
        });
        r.register_flat_map("drop", |_, _| Ok(Vec::new()));
        r
    }
}

impl FunctionRegistry {
    pub fn empty() -> Self {
        Self {
            maps: BTreeMap::new(),
            predicates: BTreeMap::new(),
            flat_maps: BTreeMap::new(),
        }
    }

    pub fn register_map<F>(&mut self, id: &str, f: F) -> &mut Self
    where
        F: Fn(Element, u64) -> Result<Element, String> + Send + Sync + 'static,
    {
        self.maps.insert(id.to_string(), Arc::new(f));
        self
    }

    pub fn register_predicate<F>(&mut self, id: &str, f: F) -> &mut Self
    where
        F: Fn(&Element, u64) -> Result<bool, String> + Send + Sync + 'static,
    {
        self.predicates.insert(id.to_string(), Arc::new(f));
        self
    }

    pub fn register_flat_map<F>(&mut self, id: &str, f: F) -> &mut Self
    where
        F: Fn(Item, u64) -> Result<Vec<Item>, String> + Send + Sync + 'static,
    {
        self.flat_maps.insert(id.to_string(), Arc::new(f));
        self
    }

    pub fn map(&self, id: &str) -> Result<MapFn, PipelineError> {
        self.maps
            .get(id)
            .cloned()
            .ok_or_else(|| PipelineError::UnknownFunction(id.to_string()))
    }

    pub fn predicate(&self, id: &str) -> Result<PredicateFn, PipelineError> {
        self.predicates
            .get(id)
            .cloned()
            .ok_or_else(|| PipelineError::UnknownFunction(id.to_string()))
    }

    pub fn flat_map(&self, id: &str) -> Result<FlatMapFn, PipelineError> {
        self.flat_maps
            .get(id)
            .cloned()
            .ok_or_else(|| PipelineError::UnknownFunction(id.to_string()))
    }
}

/// Fixed-iteration hash loop used as deterministic CPU busy-work.
pub fn burn(payload: &[u8], iters: u64) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    let seed = payload.first().copied().unwrap_or(0);
    for i in 0..iters {
        h ^= u64::from(seed) ^ i;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
        h = black_box(h.rotate_left(5));
    }
    black_box(h)
}
