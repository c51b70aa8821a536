//! Left-padded mini-batches.

use rand::seq::SliceRandom;
use rand::Rng;

use super::filter::PAD_ID;
use super::split::Example;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SequenceBatch {
    /// `size() * max_len` ids, row-major, left-padded with [`PAD_ID`].
    pub ids: Vec<u32>,
    pub max_len: usize,
    /// Number of real (non-pad) positions per row, at most `max_len`.
    pub lengths: Vec<usize>,
    pub targets: Vec<u32>,
    pub users: Vec<u32>,
}

impl SequenceBatch {
    pub fn from_examples<'a>(examples: impl IntoIterator<Item = &'a Example>, max_len: usize) -> Self {
        let mut b = SequenceBatch {
            ids: Vec::new(),
            max_len,
            lengths: Vec::new(),
            targets: Vec::new(),
            users: Vec::new(),
        };
        for ex in examples {
            let keep = ex.context.len().min(max_len);
            let tail = &ex.context[ex.context.len() - keep..];
            b.ids.extend(std::iter::repeat_n(PAD_ID, max_len - keep));
            b.ids.extend_from_slice(tail);
            b.lengths.push(keep);
            b.targets.push(ex.target);
            b.users.push(ex.user);
        }
        b
    }

    pub fn size(&self) -> usize {
        self.lengths.len()
    }

    pub fn row(&self, b: usize) -> &[u32] {
        &self.ids[b * self.max_len..(b + 1) * self.max_len]
    }

    /// The real items of row `b`, oldest first.
    pub fn unpadded(&self, b: usize) -> &[u32] {
        &self.row(b)[self.max_len - self.lengths[b]..]
    }
}

/// Iterator over consecutive batches of a fixed example order.
pub struct Batches<'a> {
    examples: &'a [Example],
    order: Vec<usize>,
    batch_size: usize,
    max_len: usize,
    pos: usize,
}

impl Iterator for Batches<'_> {
    type Item = SequenceBatch;

    fn next(&mut self) -> Option<SequenceBatch> {
        if self.pos >= self.order.len() {
            return None;
        }
        let end = (self.pos + self.batch_size).min(self.order.len());
        let batch = SequenceBatch::from_examples(self.order[self.pos..end].iter().map(|&i| &self.examples[i]), self.max_len);
        self.pos = end;
        Some(batch)
    }

    fn size_hint(&self) -> (usize, Option<usize>) {
        let left = (self.order.len() - self.pos).div_ceil(self.batch_size);
        (left, Some(left))
    }
}

impl ExactSizeIterator for Batches<'_> {}

/// Batches `examples` in order, or in a shuffled order when `shuffle` is
/// given (training).
pub fn make_batches<'a, R: Rng + ?Sized>(
    examples: &'a [Example],
    batch_size: usize,
    max_len: usize,
    shuffle: Option<&mut R>,
) -> Batches<'a> {
    assert!(batch_size > 0, "batch size must be positive");
    assert!(max_len > 0, "max_len must be positive");
    let mut order: Vec<usize> = (0..examples.len()).collect();
    if let Some(rng) = shuffle {
        order.shuffle(rng);
    }
    Batches {
        examples,
        order,
        batch_size,
        max_len,
        pos: 0,
    }
}
