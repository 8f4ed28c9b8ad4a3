use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{DataError, DomainDataset};

/// Indices of one batch. Balanced batches have per-class counts differing
/// by at most one; the classes receiving the extra sample are chosen at
/// random. Unbalanced batches are uniform without replacement.
pub fn sample_batch<R: Rng>(
    ds: &DomainDataset,
    size: usize,
    class_balanced: bool,
    rng: &mut R,
) -> Result<Vec<usize>, DataError> {
    if size > ds.len() {
        return Err(DataError::BatchTooLarge { size, available: ds.len() });
    }
    if !class_balanced {
        let mut idx: Vec<usize> = (0..ds.len()).collect();
        idx.shuffle(rng);
        idx.truncate(size);
        return Ok(idx);
    }
    let mut pools = class_pools(ds.labels(), ds.classes);
    let quota = quotas(size, ds.classes, rng);
    let mut out = Vec::with_capacity(size);
    for (pool, q) in pools.iter_mut().zip(quota) {
        if q > pool.len() {
            return Err(DataError::BatchTooLarge { size: q, available: pool.len() });
        }
        pool.shuffle(rng);
        out.extend_from_slice(&pool[..q]);
    }
    out.shuffle(rng);
    Ok(out)
}

fn class_pools(labels: &[usize], classes: usize) -> Vec<Vec<usize>> {
    let mut pools = vec![Vec::new(); classes];
    for (i, &l) in labels.iter().enumerate() {
        pools[l].push(i);
    }
    pools
}

fn quotas<R: Rng>(size: usize, classes: usize, rng: &mut R) -> Vec<usize> {
    let mut order: Vec<usize> = (0..classes).collect();
    order.shuffle(rng);
    let mut q = vec![size / classes; classes];
    for &c in &order[..size % classes] {
        q[c] += 1;
    }
    q
}

/// A cursor over a shuffled index list that reshuffles when exhausted.
#[derive(Clone, Debug)]
struct Epoch {
    order: Vec<usize>,
    pos: usize,
}

impl Epoch {
    fn new(items: Vec<usize>, rng: &mut ChaCha8Rng) -> Self {
        let mut e = Epoch { order: items, pos: 0 };
        e.order.shuffle(rng);
        e
    }

    /// `k` items, all distinct when `k ≤ len`. A short tail is dropped in
    /// favour of a fresh shuffle.
    fn take(&mut self, k: usize, rng: &mut ChaCha8Rng, out: &mut Vec<usize>) {
        let n = self.order.len();
        if k <= n {
            if self.pos + k > n {
                self.order.shuffle(rng);
                self.pos = 0;
            }
            out.extend_from_slice(&self.order[self.pos..self.pos + k]);
            self.pos += k;
        } else {
            for _ in 0..k {
                if self.pos == n {
                    self.order.shuffle(rng);
                    self.pos = 0;
                }
                out.push(self.order[self.pos]);
                self.pos += 1;
            }
        }
    }
}

/// Stateful sampler producing a deterministic batch sequence from a seed.
#[derive(Clone, Debug)]
pub struct BatchSampler {
    rng: ChaCha8Rng,
    n: usize,
    pools: Vec<Epoch>,
    balanced: bool,
}

impl BatchSampler {
    pub fn uniform(n: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pools = vec![Epoch::new((0..n).collect(), &mut rng)];
        BatchSampler { rng, n, pools, balanced: false }
    }

    /// Per-class epochs. Classes with fewer samples than their quota wrap
    /// around within a batch.
    pub fn class_balanced(labels: &[usize], classes: usize, seed: u64) -> Result<Self, DataError> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let raw = class_pools(labels, classes);
        if let Some(c) = raw.iter().position(Vec::is_empty) {
            return Err(DataError::Scenario(format!("class {c} has no samples")));
        }
        let pools = raw.into_iter().map(|p| Epoch::new(p, &mut rng)).collect();
        Ok(BatchSampler { rng, n: labels.len(), pools, balanced: true })
    }

    pub fn next_batch(&mut self, size: usize) -> Result<Vec<usize>, DataError> {
        if size > self.n {
            return Err(DataError::BatchTooLarge { size, available: self.n });
        }
        let mut out = Vec::with_capacity(size);
        if self.balanced {
            let q = quotas(size, self.pools.len(), &mut self.rng);
            for (pool, k) in self.pools.iter_mut().zip(q) {
                pool.take(k, &mut self.rng, &mut out);
            }
            out.shuffle(&mut self.rng);
        } else {
            self.pools[0].take(size, &mut self.rng, &mut out);
        }
        Ok(out)
    }
}
