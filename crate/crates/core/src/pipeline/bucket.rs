use super::{Batch, Element, PipelineError};

/// Boundaries must be non-empty, strictly ascending and positive.
pub fn validate_boundaries(boundaries: &[u64]) -> Result<(), PipelineError> {
    if boundaries.is_empty() {
        return Err(PipelineError::InvalidBoundaries("no boundaries".into()));
    }
    if boundaries[0] == 0 {
        return Err(PipelineError::InvalidBoundaries(
            "boundaries must be > 0".into(),
        ));
    }
    if boundaries.windows(2).any(|w| w[0] >= w[1]) {
        return Err(PipelineError::InvalidBoundaries(format!(
            "not strictly ascending: {boundaries:?}"
        )));
    }
    Ok(())
}

/// Bucket index for a sequence length: bucket 0 is `(0, b0]`, bucket `i` is
/// `(b[i-1], b[i]]` and the last bucket is `(b[last], inf)`. Length 0 falls
/// into bucket 0.
pub fn bucket_for(len: u64, boundaries: &[u64]) -> usize {
    boundaries.partition_point(|&b| b < len)
}

/// Per-bucket accumulation shared by the graph operator and [`bucket_and_pad`].
#[derive(Debug)]
pub(crate) struct Bucketer {
    boundaries: Vec<u64>,
    batch_size: usize,
    queues: Vec<Vec<Element>>,
}

impl Bucketer {
    pub(crate) fn new(boundaries: Vec<u64>, batch_size: usize) -> Result<Self, PipelineError> {
        validate_boundaries(&boundaries)?;
        if batch_size == 0 {
            return Err(PipelineError::MalformedSpec(
                "batch_size must be >= 1".into(),
            ));
        }
        let queues = vec![Vec::new(); boundaries.len() + 1];
        Ok(Self {
            boundaries,
            batch_size,
            queues,
        })
    }

    /// Adds an element; returns a full batch when its bucket fills up.
    pub(crate) fn push(&mut self, e: Element) -> Option<Batch> {
        let b = bucket_for(u64::from(e.seq_len), &self.boundaries);
        self.queues[b].push(e);
        if self.queues[b].len() == self.batch_size {
            let elems = std::mem::take(&mut self.queues[b]);
            Some(Batch::new(elems).with_bucket(b as u32))
        } else {
            None
        }
    }

    /// Next partial batch in ascending bucket order, after the input ends.
    pub(crate) fn flush_one(&mut self) -> Option<Batch> {
        let (b, q) = self
            .queues
            .iter_mut()
            .enumerate()
            .find(|(_, q)| !q.is_empty())?;
        Some(Batch::new(std::mem::take(q)).with_bucket(b as u32))
    }

    pub(crate) fn clear(&mut self) {
        for q in &mut self.queues {
            q.clear();
        }
    }
}

/// Streaming bucketed batching with zero-filled padding.
pub struct BucketBatches<I> {
    input: Option<I>,
    bucketer: Bucketer,
}

/// Groups elements by sequence-length bucket into padded batches of
/// `batch_size`. Leftover partial batches are emitted at the end, lowest
/// bucket first.
pub fn bucket_and_pad<I>(
    input: I,
    boundaries: &[u64],
    batch_size: usize,
) -> Result<BucketBatches<I::IntoIter>, PipelineError>
where
    I: IntoIterator<Item = Element>,
{
    Ok(BucketBatches {
        input: Some(input.into_iter()),
        bucketer: Bucketer::new(boundaries.to_vec(), batch_size)?,
    })
}

impl<I: Iterator<Item = Element>> Iterator for BucketBatches<I> {
    type Item = Batch;

    fn next(&mut self) -> Option<Batch> {
        let mut batch = loop {
            match self.input.as_mut().and_then(Iterator::next) {
                Some(e) => {
                    if let Some(b) = self.bucketer.push(e) {
                        break b;
                    }
                }
                None => {
                    self.input = None;
                    break self.bucketer.flush_one()?;
                }
            }
        };
        batch.materialize_padding();
        Some(batch)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn el(key: u64, len: u32) -> Element {
        Element::new(key, len, vec![1; len as usize])
    }

    #[test]
    fn interval_assignment() {
        let b = [128, 256];
        assert_eq!(bucket_for(100, &b), 0);
        assert_eq!(bucket_for(128, &b), 0);
        assert_eq!(bucket_for(129, &b), 1);
        assert_eq!(bucket_for(256, &b), 1);
        assert_eq!(bucket_for(300, &b), 2);
        assert_eq!(bucket_for(0, &b), 0);
    }

    #[test]
    fn pads_to_batch_max() {
        let out: Vec<_> = bucket_and_pad(vec![el(0, 2), el(1, 3)], &[3], 2)
            .unwrap()
            .collect();
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].padded_len, 3);
        assert!(out[0].elements.iter().all(|e| e.payload.len() == 3));
    }

    #[test]
    fn no_cross_bucket_mixing() {
        let input = vec![el(0, 1), el(1, 1), el(2, 5), el(3, 5)];
        let out: Vec<_> = bucket_and_pad(input, &[3], 2).unwrap().collect();
        assert_eq!(out.len(), 2);
        assert_eq!(out[0].padded_len, 1);
        assert_eq!(out[0].bucket_id, Some(0));
        assert_eq!(out[1].padded_len, 5);
        assert_eq!(out[1].bucket_id, Some(1));
    }

    #[test]
    fn invalid_boundaries() {
        for bad in [vec![], vec![0, 4], vec![5, 5], vec![9, 3]] {
            assert!(matches!(
                bucket_and_pad(Vec::<Element>::new(), &bad, 2),
                Err(PipelineError::InvalidBoundaries(_))
            ));
        }
    }

    #[test]
    fn leftovers_flush_in_bucket_order() {
        let input = vec![el(0, 9), el(1, 1), el(2, 9)];
        let out: Vec<_> = bucket_and_pad(input, &[3], 4).unwrap().collect();
        assert_eq!(
            out.iter().map(|b| b.bucket_id).collect::<Vec<_>>(),
            vec![Some(0), Some(1)]
        );
        assert_eq!(out[1].keys().collect::<Vec<_>>(), vec![0, 2]);
    }
}
