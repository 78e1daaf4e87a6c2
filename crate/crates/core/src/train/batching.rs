use rand::seq::SliceRandom;
use rand::Rng;

/// Class-balanced labeled batches.
///
/// Slot `i` of a batch is given class `order[i mod k]` for a fresh random
/// class order, and each class hands out its rows from a shuffled queue that
/// is refilled once exhausted. Every batch with `batch_size >= k` therefore
/// contains all classes, and tiny labeled sets are reused with replacement
/// across batches.
#[derive(Clone, Debug)]
pub struct StratifiedSampler {
    pools: Vec<Vec<usize>>,
    queues: Vec<Vec<usize>>,
}

impl StratifiedSampler {
    /// `rows[i]` has class `labels[i]`; classes without rows are skipped.
    pub fn new(rows: &[usize], labels: &[usize], num_classes: usize) -> Self {
        let mut pools = vec![Vec::new(); num_classes];
        for (&r, &l) in rows.iter().zip(labels) {
            pools[l].push(r);
        }
        pools.retain(|p| !p.is_empty());
        let queues = vec![Vec::new(); pools.len()];
        StratifiedSampler { pools, queues }
    }

    pub fn is_empty(&self) -> bool {
        self.pools.is_empty()
    }

    pub fn next_batch<R: Rng + ?Sized>(&mut self, batch_size: usize, rng: &mut R) -> Vec<usize> {
        let k = self.pools.len();
        if k == 0 {
            return Vec::new();
        }
        let mut order: Vec<usize> = (0..k).collect();
        order.shuffle(rng);
        (0..batch_size)
            .map(|i| {
                let c = order[i % k];
                if self.queues[c].is_empty() {
                    let mut q = self.pools[c].clone();
                    q.shuffle(rng);
                    self.queues[c] = q;
                }
                self.queues[c].pop().expect("refilled")
            })
            .collect()
    }
}

/// Row indices of unlabeled batch `step` within an epoch permutation. The
/// last batch wraps around to the start so every batch has `batch_size` rows.
pub fn unlabeled_batch(perm: &[usize], step: usize, batch_size: usize) -> Vec<usize> {
    (0..batch_size)
        .map(|i| perm[(step * batch_size + i) % perm.len()])
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, Stream};

    #[test]
    fn every_batch_covers_all_classes() {
        let rows = vec![10, 11, 12];
        let labels = vec![0, 1, 2];
        let mut s = StratifiedSampler::new(&rows, &labels, 3);
        let mut rng = stream(0, Stream::Batch);
        for _ in 0..20 {
            let b = s.next_batch(8, &mut rng);
            assert_eq!(b.len(), 8);
            for r in &rows {
                assert!(b.contains(r));
            }
        }
    }

    #[test]
    fn queue_exhausts_before_repeating() {
        let rows: Vec<usize> = (0..10).collect();
        let mut s = StratifiedSampler::new(&rows, &[0; 10], 1);
        let mut rng = stream(1, Stream::Batch);
        let mut b = s.next_batch(10, &mut rng);
        b.sort_unstable();
        assert_eq!(b, rows);
    }

    #[test]
    fn unlabeled_wraps() {
        let perm = vec![4, 2, 0, 1, 3];
        assert_eq!(unlabeled_batch(&perm, 0, 2), vec![4, 2]);
        assert_eq!(unlabeled_batch(&perm, 2, 2), vec![3, 4]);
    }
}
