//! Shared fixtures for the micro-benchmarks.

use prepserve::pipeline::{Batch, Element};

/// A batch of `n` elements with `payload` bytes each and varied lengths.
pub fn sample_batch(n: usize, payload: usize) -> Batch {
    Batch::new(
        (0..n as u64)
            .map(|k| Element::new(k, 16 + (k as u32 * 37) % 480, vec![k as u8; payload]))
            .collect(),
    )
}
