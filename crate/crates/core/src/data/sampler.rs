use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::dataset::{largest_remainder, Sample};
use crate::error::{Error, Result};

/// Samples of one domain inside a batch.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchGroup {
    pub domain: usize,
    pub samples: Vec<Sample>,
}

/// A batch grouped by domain, groups in ascending domain order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Batch {
    pub groups: Vec<BatchGroup>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.groups.iter().map(|g| g.samples.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Builds a batch from a flat list, grouping by domain.
    pub fn from_samples(domains: usize, samples: impl IntoIterator<Item = Sample>) -> Self {
        let mut groups: Vec<BatchGroup> = (0..domains)
            .map(|domain| BatchGroup {
                domain,
                samples: Vec::new(),
            })
            .collect();
        for s in samples {
            groups[s.domain].samples.push(s);
        }
        groups.retain(|g| !g.samples.is_empty());
        Self { groups }
    }
}

/// Equal per-domain quotas by largest-remainder division of the batch size.
pub fn equal_quotas(batch_size: usize, domains: usize) -> Vec<usize> {
    largest_remainder(batch_size, &vec![1.0; domains])
}

#[derive(Clone, Debug)]
struct Cursor {
    order: Vec<usize>,
    pos: usize,
}

/// Draws a fixed number of samples from every domain per batch.
///
/// Each domain is walked through a shuffled order; on exhaustion the order is
/// reshuffled and the walk wraps. Samples already drawn in the current batch
/// are pushed to the back of the fresh order, so a batch holds no duplicates
/// as long as its quota does not exceed the domain size.
#[derive(Clone, Debug)]
pub struct QuotaSampler {
    quotas: Vec<usize>,
    cursors: Vec<Cursor>,
    rng: ChaCha8Rng,
}

impl QuotaSampler {
    pub fn new(domain_sizes: &[usize], quotas: Vec<usize>, seed: u64) -> Result<Self> {
        if quotas.len() != domain_sizes.len() {
            return Err(Error::Config(format!(
                "{} quotas for {} domains",
                quotas.len(),
                domain_sizes.len()
            )));
        }
        if let Some(d) = quotas.iter().position(|&q| q == 0) {
            return Err(Error::Config(format!(
                "domain {d} has a zero quota but takes part in prototype learning"
            )));
        }
        if let Some(d) = domain_sizes.iter().position(|&n| n == 0) {
            return Err(Error::Config(format!("domain {d} has no training samples")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cursors = domain_sizes
            .iter()
            .map(|&n| {
                let mut order: Vec<usize> = (0..n).collect();
                order.shuffle(&mut rng);
                Cursor { order, pos: 0 }
            })
            .collect();
        Ok(Self {
            quotas,
            cursors,
            rng,
        })
    }

    pub fn quotas(&self) -> &[usize] {
        &self.quotas
    }

    /// Indices (into each domain's sample list) of the next batch.
    pub fn next_indices(&mut self) -> Vec<Vec<usize>> {
        let mut out = Vec::with_capacity(self.quotas.len());
        for (cursor, &quota) in self.cursors.iter_mut().zip(&self.quotas) {
            let mut taken: Vec<usize> = Vec::with_capacity(quota);
            while taken.len() < quota {
                if cursor.pos == cursor.order.len() {
                    cursor.order.shuffle(&mut self.rng);
                    if !taken.is_empty() && taken.len() < cursor.order.len() {
                        let (fresh, used): (Vec<usize>, Vec<usize>) =
                            cursor.order.iter().partition(|i| !taken.contains(i));
                        cursor.order = fresh.into_iter().chain(used).collect();
                    }
                    cursor.pos = 0;
                }
                taken.push(cursor.order[cursor.pos]);
                cursor.pos += 1;
            }
            out.push(taken);
        }
        out
    }

    /// Next batch, copying samples out of `data` (one list per domain).
    pub fn next_batch(&mut self, data: &[Vec<Sample>]) -> Batch {
        let indices = self.next_indices();
        let groups = indices
            .into_iter()
            .enumerate()
            .map(|(domain, idx)| BatchGroup {
                domain,
                samples: idx.into_iter().map(|i| data[domain][i].clone()).collect(),
            })
            .collect();
        Batch { groups }
    }
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    #[test]
    fn exact_quota_per_domain() {
        let mut s = QuotaSampler::new(&[10, 7, 3], vec![2, 2, 2], 1).unwrap();
        for _ in 0..20 {
            let idx = s.next_indices();
            assert_eq!(idx.iter().map(Vec::len).collect::<Vec<_>>(), vec![2, 2, 2]);
        }
    }

    #[test]
    fn batch_4096_over_three_domains() {
        assert_eq!(equal_quotas(4096, 3), vec![1366, 1365, 1365]);
        assert_eq!(equal_quotas(4096, 3).iter().sum::<usize>(), 4096);
    }

    #[test]
    fn wrap_has_no_duplicates_within_batch() {
        for seed in 0..200 {
            let mut s = QuotaSampler::new(&[3], vec![2], seed).unwrap();
            for _ in 0..5 {
                let b = s.next_indices();
                assert_ne!(b[0][0], b[0][1], "seed {seed}");
            }
        }
    }

    #[test]
    fn zero_quota_and_empty_domain_rejected() {
        assert!(matches!(
            QuotaSampler::new(&[3, 3], vec![1, 0], 0),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            QuotaSampler::new(&[3, 0], vec![1, 1], 0),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            QuotaSampler::new(&[3], vec![1, 1], 0),
            Err(Error::Config(_))
        ));
    }

    proptest! {
        #[test]
        fn visits_cover_every_sample(
            sizes in prop::collection::vec(1usize..40, 1..4),
            quota_seed in prop::collection::vec(1usize..12, 4),
            batches in 1usize..60,
            seed in any::<u64>(),
        ) {
            let quotas: Vec<usize> = quota_seed[..sizes.len()].to_vec();
            let mut s = QuotaSampler::new(&sizes, quotas.clone(), seed).unwrap();
            let mut counts: Vec<Vec<usize>> = sizes.iter().map(|&n| vec![0; n]).collect();
            for _ in 0..batches {
                let idx = s.next_indices();
                for (d, ids) in idx.iter().enumerate() {
                    prop_assert_eq!(ids.len(), quotas[d]);
                    if quotas[d] <= sizes[d] {
                        let mut u = ids.clone();
                        u.sort();
                        u.dedup();
                        prop_assert_eq!(u.len(), ids.len());
                    }
                    for &i in ids {
                        counts[d][i] += 1;
                    }
                }
            }
            for (d, c) in counts.iter().enumerate() {
                let floor = batches * quotas[d] / sizes[d];
                prop_assert!(c.iter().all(|&v| v >= floor));
            }
        }
    }
}
