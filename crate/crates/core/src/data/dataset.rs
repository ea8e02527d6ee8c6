use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::schema::Schema;
use super::synth::AffinitySpec;
use crate::error::{Error, Result};

/// One labelled interaction: a domain id, a click label and one vocabulary
/// index per feature field.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Sample {
    pub domain: usize,
    pub label: u8,
    pub features: Vec<u32>,
}

impl Sample {
    pub fn label_f64(&self) -> f64 {
        f64::from(self.label)
    }
}

/// Per-domain sample lists under a shared schema.
#[derive(Clone, Debug, PartialEq)]
pub struct DomainDataset {
    pub schema: Schema,
    pub domains: Vec<Vec<Sample>>,
    /// Generator spec when the data is synthetic.
    pub provenance: Option<AffinitySpec>,
}

impl DomainDataset {
    pub fn empty(schema: Schema) -> Self {
        let domains = vec![Vec::new(); schema.domains];
        Self {
            schema,
            domains,
            provenance: None,
        }
    }

    /// Adds a sample after checking it against the schema.
    pub fn push(&mut self, sample: Sample) -> Result<()> {
        check_sample(&self.schema, &sample, 0)?;
        self.domains[sample.domain].push(sample);
        Ok(())
    }

    pub fn domain_count(&self) -> usize {
        self.domains.len()
    }

    pub fn len(&self) -> usize {
        self.domains.iter().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn populated_domains(&self) -> usize {
        self.domains.iter().filter(|d| !d.is_empty()).count()
    }
}

pub(crate) fn check_sample(schema: &Schema, sample: &Sample, line: usize) -> Result<()> {
    if sample.domain >= schema.domains {
        return Err(Error::Data {
            line,
            message: format!("domain {} outside [0, {})", sample.domain, schema.domains),
        });
    }
    if sample.label > 1 {
        return Err(Error::Data {
            line,
            message: format!("label {} is not 0/1", sample.label),
        });
    }
    if sample.features.len() != schema.fields.len() {
        return Err(Error::Data {
            line,
            message: format!(
                "{} features, schema has {} fields",
                sample.features.len(),
                schema.fields.len()
            ),
        });
    }
    for (value, field) in sample.features.iter().zip(&schema.fields) {
        if *value >= field.vocab {
            return Err(Error::Data {
                line,
                message: format!(
                    "field `{}` index {} >= vocab size {}",
                    field.name, value, field.vocab
                ),
            });
        }
    }
    Ok(())
}

/// Train / validation / test partitions, each indexed by domain.
#[derive(Clone, Debug, PartialEq)]
pub struct Partitions {
    pub schema: Schema,
    pub train: Vec<Vec<Sample>>,
    pub validation: Vec<Vec<Sample>>,
    pub test: Vec<Vec<Sample>>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitFractions {
    pub train: f64,
    pub validation: f64,
    pub test: f64,
}

impl Default for SplitFractions {
    fn default() -> Self {
        Self {
            train: 0.8,
            validation: 0.1,
            test: 0.1,
        }
    }
}

impl SplitFractions {
    pub fn validate(&self) -> Result<()> {
        let parts = [self.train, self.validation, self.test];
        if parts.iter().any(|f| !f.is_finite() || *f < 0.0) || self.train <= 0.0 {
            return Err(Error::Split(format!("invalid fractions {parts:?}")));
        }
        if (parts.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::Split(format!("fractions {parts:?} do not sum to 1")));
        }
        Ok(())
    }
}

/// Splits `total` into integer parts proportional to `weights`, handing the
/// leftover units to the largest fractional remainders (lower index wins ties).
pub fn largest_remainder(total: usize, weights: &[f64]) -> Vec<usize> {
    let sum: f64 = weights.iter().sum();
    if weights.is_empty() || sum <= 0.0 {
        return vec![0; weights.len()];
    }
    let exact: Vec<f64> = weights.iter().map(|w| w / sum * total as f64).collect();
    let mut parts: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let mut left = total - parts.iter().sum::<usize>();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = exact[a] - exact[a].floor();
        let rb = exact[b] - exact[b].floor();
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    for &i in order.iter().cycle() {
        if left == 0 {
            break;
        }
        parts[i] += 1;
        left -= 1;
    }
    parts
}

/// Seeded per-domain random split.
///
/// Every domain needs at least `min_domain_size` samples; the usual value is 3
/// so that each partition can receive one.
pub fn split_with_min(
    dataset: &DomainDataset,
    fractions: SplitFractions,
    seed: u64,
    min_domain_size: usize,
) -> Result<Partitions> {
    fractions.validate()?;
    let weights = [fractions.train, fractions.validation, fractions.test];
    let mut out = Partitions {
        schema: dataset.schema.clone(),
        train: Vec::new(),
        validation: Vec::new(),
        test: Vec::new(),
    };
    for (d, samples) in dataset.domains.iter().enumerate() {
        if samples.len() < min_domain_size {
            return Err(Error::Split(format!(
                "domain {d} has {} samples, need at least {min_domain_size}",
                samples.len()
            )));
        }
        let mut rng =
            ChaCha8Rng::seed_from_u64(seed ^ (d as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        let mut idx: Vec<usize> = (0..samples.len()).collect();
        idx.shuffle(&mut rng);
        let sizes = largest_remainder(samples.len(), &weights);
        let take = |range: std::ops::Range<usize>| -> Vec<Sample> {
            idx[range].iter().map(|&i| samples[i].clone()).collect()
        };
        out.train.push(take(0..sizes[0]));
        out.validation.push(take(sizes[0]..sizes[0] + sizes[1]));
        out.test.push(take(sizes[0] + sizes[1]..samples.len()));
    }
    Ok(out)
}

pub fn split(dataset: &DomainDataset, fractions: SplitFractions, seed: u64) -> Result<Partitions> {
    split_with_min(dataset, fractions, seed, 3)
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;
    use crate::data::schema::FieldSpec;

    fn dataset(sizes: &[usize]) -> DomainDataset {
        let schema = Schema::new(
            sizes.len(),
            vec![FieldSpec {
                name: "id".into(),
                vocab: 1_000_000,
            }],
        )
        .unwrap();
        let mut ds = DomainDataset::empty(schema);
        let mut next = 0u32;
        for (d, &n) in sizes.iter().enumerate() {
            for _ in 0..n {
                ds.push(Sample {
                    domain: d,
                    label: (next % 2) as u8,
                    features: vec![next],
                })
                .unwrap();
                next += 1;
            }
        }
        ds
    }

    #[test]
    fn eight_one_one() {
        let p = split(&dataset(&[100]), SplitFractions::default(), 7).unwrap();
        assert_eq!(
            (p.train[0].len(), p.validation[0].len(), p.test[0].len()),
            (80, 10, 10)
        );
    }

    #[test]
    fn all_train_when_relaxed() {
        let f = SplitFractions {
            train: 1.0,
            validation: 0.0,
            test: 0.0,
        };
        let p = split_with_min(&dataset(&[2]), f, 1, 0).unwrap();
        assert_eq!(p.train[0].len(), 2);
        assert!(p.validation[0].is_empty() && p.test[0].is_empty());
    }

    #[test]
    fn same_seed_same_split() {
        let ds = dataset(&[50, 30]);
        assert_eq!(
            split(&ds, SplitFractions::default(), 11).unwrap(),
            split(&ds, SplitFractions::default(), 11).unwrap()
        );
        assert_ne!(
            split(&ds, SplitFractions::default(), 11).unwrap(),
            split(&ds, SplitFractions::default(), 12).unwrap()
        );
    }

    #[test]
    fn tiny_domain_is_split_error() {
        assert!(matches!(
            split(&dataset(&[10, 2]), SplitFractions::default(), 0),
            Err(Error::Split(_))
        ));
    }

    #[test]
    fn largest_remainder_batch() {
        assert_eq!(
            largest_remainder(4096, &[1.0, 1.0, 1.0]),
            vec![1366, 1365, 1365]
        );
        assert_eq!(largest_remainder(6, &[1.0, 1.0, 1.0]), vec![2, 2, 2]);
        assert_eq!(largest_remainder(10, &[0.8, 0.1, 0.1]), vec![8, 1, 1]);
    }

    proptest! {
        #[test]
        fn split_is_partition(sizes in prop::collection::vec(3usize..60, 1..4), seed in any::<u64>()) {
            let ds = dataset(&sizes);
            let p = split(&ds, SplitFractions::default(), seed).unwrap();
            for d in 0..sizes.len() {
                let mut all: Vec<&Sample> = p.train[d].iter().chain(&p.validation[d]).chain(&p.test[d]).collect();
                prop_assert_eq!(all.len(), ds.domains[d].len());
                all.sort();
                all.dedup();
                prop_assert_eq!(all.len(), ds.domains[d].len());
                let mut orig: Vec<&Sample> = ds.domains[d].iter().collect();
                orig.sort();
                prop_assert_eq!(all, orig);
            }
        }

        #[test]
        fn largest_remainder_sums(total in 0usize..10_000, weights in prop::collection::vec(0.01f64..5.0, 1..8)) {
            let parts = largest_remainder(total, &weights);
            prop_assert_eq!(parts.iter().sum::<usize>(), total);
        }
    }
}
