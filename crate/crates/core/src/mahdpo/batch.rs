use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::pair::Routed;
use super::TrainError;

/// Per-objective partition `B_0 .. B_{H-1}` of one mini-batch.
#[derive(Clone, Debug, PartialEq)]
pub struct MiniBatch<T> {
    pub groups: Vec<Vec<T>>,
}

impl<T> MiniBatch<T> {
    pub fn len(&self) -> usize {
        self.groups.iter().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn sizes(&self) -> Vec<usize> {
        self.groups.iter().map(Vec::len).collect()
    }
}

/// Places each pair in the group of its objective.
pub fn route_batch<T: Routed + Clone>(pairs: &[T], heads: usize) -> Result<MiniBatch<T>, TrainError> {
    if pairs.is_empty() {
        return Err(TrainError::EmptyBatch);
    }
    let mut groups = vec![Vec::new(); heads];
    for p in pairs {
        let i = p.objective();
        if i >= heads {
            return Err(TrainError::Objective { id: i, heads });
        }
        groups[i].push(p.clone());
    }
    Ok(MiniBatch { groups })
}

/// Mini-batches for one epoch.
///
/// The pooled pairs are shuffled with a seed derived from `(seed, epoch)` and
/// then split by objective, keeping shuffled order. Unbalanced mode chunks the
/// shuffled pool. Balanced mode fills each batch by round-robin over the
/// non-empty objectives, cycling through smaller datasets, until the largest
/// dataset has been seen once.
pub fn epoch_batches<T: Routed + Clone>(
    pairs: &[T],
    heads: usize,
    batch_size: usize,
    balanced: bool,
    seed: u64,
    epoch: u64,
) -> Result<Vec<MiniBatch<T>>, TrainError> {
    if pairs.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    if batch_size == 0 {
        return Err(TrainError::Config("batch size must be positive".into()));
    }
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch);
    order.shuffle(&mut rng);

    if !balanced {
        return order
            .chunks(batch_size)
            .map(|chunk| route_batch(&chunk.iter().map(|&i| pairs[i].clone()).collect::<Vec<_>>(), heads))
            .collect();
    }

    let mut queues: Vec<Vec<usize>> = vec![Vec::new(); heads];
    for &i in &order {
        let obj = pairs[i].objective();
        if obj >= heads {
            return Err(TrainError::Objective { id: obj, heads });
        }
        queues[obj].push(i);
    }
    let active: Vec<usize> = (0..heads).filter(|&i| !queues[i].is_empty()).collect();
    let longest = queues.iter().map(Vec::len).max().unwrap_or(0);
    let mut cursor = vec![0usize; heads];
    let mut batches = Vec::new();
    loop {
        let mut groups: Vec<Vec<T>> = vec![Vec::new(); heads];
        for slot in 0..batch_size {
            let obj = active[slot % active.len()];
            let q = &queues[obj];
            groups[obj].push(pairs[q[cursor[obj] % q.len()]].clone());
            cursor[obj] += 1;
        }
        batches.push(MiniBatch { groups });
        if active.iter().filter(|&&i| queues[i].len() == longest).all(|&i| cursor[i] >= longest) {
            break;
        }
    }
    Ok(batches)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord)]
    struct P(usize, usize);
    impl Routed for P {
        fn objective(&self) -> usize {
            self.1
        }
    }

    #[test]
    fn routing_partitions() {
        let pairs: Vec<P> = (0..9).map(|i| P(i, i % 3)).collect();
        let b = route_batch(&pairs, 3).unwrap();
        assert_eq!(b.sizes(), vec![3, 3, 3]);
        assert!(b.groups.iter().enumerate().all(|(i, g)| g.iter().all(|p| p.1 == i)));
        let mut all: Vec<P> = b.groups.concat();
        all.sort();
        assert_eq!(all, pairs);
        assert!(route_batch::<P>(&[], 2).is_err());
        assert!(route_batch(&[P(0, 5)], 2).is_err());
    }

    #[test]
    fn single_objective_leaves_others_empty() {
        let pairs: Vec<P> = (0..4).map(|i| P(i, 0)).collect();
        assert_eq!(route_batch(&pairs, 2).unwrap().sizes(), vec![4, 0]);
    }

    #[test]
    fn balanced_batches_split_evenly() {
        let pairs: Vec<P> = (0..20).map(|i| P(i, i % 2)).collect();
        let batches = epoch_batches(&pairs, 2, 8, true, 1, 0).unwrap();
        assert_eq!(batches[0].sizes(), vec![4, 4]);
        for b in &batches {
            let s = b.sizes();
            assert!(s[0].abs_diff(s[1]) <= 1);
        }
        let seen: std::collections::BTreeSet<usize> = batches.iter().flat_map(|b| b.groups.concat()).map(|p| p.0).collect();
        assert_eq!(seen.len(), 20);
    }

    #[test]
    fn balanced_cycles_the_smaller_dataset() {
        let mut pairs: Vec<P> = (0..12).map(|i| P(i, 0)).collect();
        pairs.extend((12..15).map(|i| P(i, 1)));
        let batches = epoch_batches(&pairs, 2, 4, true, 3, 0).unwrap();
        assert_eq!(batches.len(), 6);
        for b in &batches {
            assert_eq!(b.sizes(), vec![2, 2]);
        }
        let odd_batch = epoch_batches(&pairs, 2, 5, true, 3, 0).unwrap();
        assert!(odd_batch.iter().all(|b| b.sizes()[0].abs_diff(b.sizes()[1]) <= 1));
    }

    #[test]
    fn unbalanced_covers_each_pair_once() {
        let pairs: Vec<P> = (0..10).map(|i| P(i, i % 2)).collect();
        let batches = epoch_batches(&pairs, 2, 3, false, 5, 2).unwrap();
        assert_eq!(batches.len(), 4);
        let mut all: Vec<P> = batches.iter().flat_map(|b| b.groups.concat()).collect();
        all.sort();
        assert_eq!(all, pairs);
        assert_eq!(batches, epoch_batches(&pairs, 2, 3, false, 5, 2).unwrap());
        assert_ne!(batches, epoch_batches(&pairs, 2, 3, false, 5, 3).unwrap());
    }
}
