//! Synthetic multi-domain CTR data with a planted inter-domain affinity.
//!
//! Every domain owns a latent concept: a unit direction in a `fields`
//! dimensional latent space, mutually orthogonal across domains. Domain `d`
//! mixes the concepts by its affinity row into a direction `m_d`. A sample
//! draws `z ~ N(shift * m_d, I)`, each feature field is a quantised
//! coordinate of `z` (occasionally replaced by a random bucket), and the
//! label is `z . m_d > shift`, flipped with the domain's noise probability.
//!
//! With an identity affinity the domains' labels are independent of each
//! other; a row such as `[1, 0.8, 0]` makes the second domain informative for
//! the first and the third irrelevant to it.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::dataset::{DomainDataset, Sample};
use super::schema::{FieldSpec, Schema};
use crate::error::{Error, Result};

fn default_fields() -> usize {
    8
}
fn default_vocab() -> u32 {
    10
}
fn default_shift() -> f64 {
    1.0
}
fn default_feature_noise() -> f64 {
    0.05
}

/// Latent span mapped onto the vocabulary buckets of every field.
const FEATURE_RANGE: f64 = 3.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AffinitySpec {
    /// `D x D`; row `d` weights each domain's concept in domain `d`'s labels.
    pub affinity: Vec<Vec<f64>>,
    /// Per-domain label flip probability.
    pub noise: Vec<f64>,
    #[serde(default = "default_fields")]
    pub fields: usize,
    #[serde(default = "default_vocab")]
    pub vocab: u32,
    /// Offset of each domain's latent mean along its mixture direction.
    #[serde(default = "default_shift")]
    pub shift: f64,
    /// Probability a feature is replaced by a uniformly random bucket.
    #[serde(default = "default_feature_noise")]
    pub feature_noise: f64,
}

impl AffinitySpec {
    pub fn new(affinity: Vec<Vec<f64>>, noise: Vec<f64>) -> Result<Self> {
        let spec = Self {
            affinity,
            noise,
            fields: default_fields(),
            vocab: default_vocab(),
            shift: default_shift(),
            feature_noise: default_feature_noise(),
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Three domains where the first borrows from the second (0.8) and not
    /// at all from the third.
    pub fn planted() -> Self {
        Self::new(
            vec![
                vec![1.0, 0.8, 0.0],
                vec![0.8, 1.0, 0.0],
                vec![0.0, 0.0, 1.0],
            ],
            vec![0.05; 3],
        )
        .expect("planted spec is valid")
    }

    pub fn identity(domains: usize) -> Self {
        let affinity = (0..domains)
            .map(|i| {
                (0..domains)
                    .map(|j| if i == j { 1.0 } else { 0.0 })
                    .collect()
            })
            .collect();
        Self::new(affinity, vec![0.05; domains]).expect("identity spec is valid")
    }

    pub fn domains(&self) -> usize {
        self.affinity.len()
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.affinity.len();
        if d == 0 {
            return Err(Error::Config("affinity matrix is empty".into()));
        }
        for (i, row) in self.affinity.iter().enumerate() {
            if row.len() != d {
                return Err(Error::Config(format!(
                    "affinity row {i} has {} entries, want {d}",
                    row.len()
                )));
            }
            if row.iter().any(|v| !v.is_finite() || *v < 0.0 || *v > 1.0) {
                return Err(Error::Config(format!(
                    "affinity row {i} must lie in [0, 1]"
                )));
            }
            if row[i] <= 0.0 {
                return Err(Error::Config(format!(
                    "affinity diagonal entry {i} must be positive"
                )));
            }
        }
        if self.noise.len() != d || self.noise.iter().any(|p| !(0.0..=0.5).contains(p)) {
            return Err(Error::Config(
                "noise needs one probability in [0, 0.5] per domain".into(),
            ));
        }
        if self.fields < d {
            return Err(Error::Config(format!(
                "need at least as many latent fields ({}) as domains ({d})",
                self.fields
            )));
        }
        if self.vocab < 2 {
            return Err(Error::Config("vocab must be at least 2".into()));
        }
        if !self.shift.is_finite() || !(0.0..=1.0).contains(&self.feature_noise) {
            return Err(Error::Config(
                "shift must be finite and feature_noise in [0, 1]".into(),
            ));
        }
        Ok(())
    }

    pub fn schema(&self) -> Schema {
        Schema {
            domains: self.domains(),
            fields: (0..self.fields)
                .map(|i| FieldSpec {
                    name: format!("f{i}"),
                    vocab: self.vocab,
                })
                .collect(),
        }
    }
}

/// Orthonormal concept directions, one per domain.
fn concepts<R: Rng>(domains: usize, dim: usize, rng: &mut R) -> Vec<Vec<f64>> {
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(domains);
    while basis.len() < domains {
        let mut v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        for b in &basis {
            let proj: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
            v.iter_mut().zip(b).for_each(|(x, y)| *x -= proj * y);
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-6 {
            basis.push(v.into_iter().map(|x| x / norm).collect());
        }
    }
    basis
}

/// Mixture direction of each domain (unit length).
pub fn mixture_directions(spec: &AffinitySpec, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    mixture_from(spec, &concepts(spec.domains(), spec.fields, &mut rng))
}

fn mixture_from(spec: &AffinitySpec, basis: &[Vec<f64>]) -> Vec<Vec<f64>> {
    spec.affinity
        .iter()
        .map(|row| {
            let mut m = vec![0.0; spec.fields];
            for (w, c) in row.iter().zip(basis) {
                m.iter_mut().zip(c).for_each(|(a, b)| *a += w * b);
            }
            let norm = m.iter().map(|x| x * x).sum::<f64>().sqrt();
            m.into_iter().map(|x| x / norm).collect()
        })
        .collect()
}

fn bucket(z: f64, vocab: u32) -> u32 {
    let t = (z + FEATURE_RANGE) / (2.0 * FEATURE_RANGE);
    ((t * f64::from(vocab)).floor()).clamp(0.0, f64::from(vocab - 1)) as u32
}

/// Generates `sizes[d]` samples for every domain.
pub fn synth_generate(spec: &AffinitySpec, sizes: &[usize], seed: u64) -> Result<DomainDataset> {
    spec.validate()?;
    if sizes.len() != spec.domains() {
        return Err(Error::Config(format!(
            "{} sizes for {} domains",
            sizes.len(),
            spec.domains()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let basis = concepts(spec.domains(), spec.fields, &mut rng);
    let mix = mixture_from(spec, &basis);

    let mut dataset = DomainDataset::empty(spec.schema());
    dataset.provenance = Some(spec.clone());
    let mut z = vec![0.0; spec.fields];
    for (d, &n) in sizes.iter().enumerate() {
        let m = &mix[d];
        let out = &mut dataset.domains[d];
        out.reserve(n);
        for _ in 0..n {
            for (zi, mi) in z.iter_mut().zip(m) {
                let e: f64 = rng.sample(StandardNormal);
                *zi = spec.shift * mi + e;
            }
            let score: f64 = z.iter().zip(m).map(|(a, b)| a * b).sum();
            let mut label = u8::from(score > spec.shift);
            if rng.random::<f64>() < spec.noise[d] {
                label ^= 1;
            }
            let features = z
                .iter()
                .map(|&zi| {
                    if rng.random::<f64>() < spec.feature_noise {
                        rng.random_range(0..spec.vocab)
                    } else {
                        bucket(zi, spec.vocab)
                    }
                })
                .collect();
            out.push(Sample {
                domain: d,
                label,
                features,
            });
        }
    }
    Ok(dataset)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::dataset::check_sample;

    #[test]
    fn deterministic() {
        let spec = AffinitySpec::planted();
        let a = synth_generate(&spec, &[200, 100, 50], 9).unwrap();
        let b = synth_generate(&spec, &[200, 100, 50], 9).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, synth_generate(&spec, &[200, 100, 50], 10).unwrap());
        assert_eq!(a.provenance.as_ref(), Some(&spec));
    }

    #[test]
    fn samples_respect_schema() {
        let spec = AffinitySpec::planted();
        let ds = synth_generate(&spec, &[500, 500, 500], 1).unwrap();
        for s in ds.domains.iter().flatten() {
            check_sample(&ds.schema, s, 0).unwrap();
        }
        // Labels are roughly balanced.
        for d in &ds.domains {
            let pos = d.iter().filter(|s| s.label == 1).count() as f64 / d.len() as f64;
            assert!((0.4..0.6).contains(&pos), "{pos}");
        }
    }

    #[test]
    fn mixture_geometry() {
        let m = mixture_directions(&AffinitySpec::planted(), 3);
        let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
        // m_A and m_B are both built from the first two concepts; m_C is orthogonal to both.
        assert!(dot(&m[0], &m[1]) > 0.9);
        assert!(dot(&m[0], &m[2]).abs() < 1e-12);
        let id = mixture_directions(&AffinitySpec::identity(3), 3);
        assert!(dot(&id[0], &id[1]).abs() < 1e-12);
    }

    #[test]
    fn validation() {
        assert!(AffinitySpec::new(vec![vec![0.0]], vec![0.0]).is_err());
        assert!(AffinitySpec::new(vec![vec![1.0, -0.1], vec![0.0, 1.0]], vec![0.0, 0.0]).is_err());
        assert!(AffinitySpec::new(vec![vec![1.0]], vec![0.7]).is_err());
        assert!(synth_generate(&AffinitySpec::planted(), &[1, 2], 0).is_err());
    }
}
