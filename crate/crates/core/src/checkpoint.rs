//! Binary checkpoint: magic, version, config hash, the run config and schema,
//! the active subsets and every parameter tensor by key.
//!
//! Layout (little endian):
//!
//! ```text
//! "SDCK" u32:version [u8;32]:sha256(config json)
//! u32:len config-json   u32:len schema-toml
//! u32:domains { u32:n u32*n }*
//! u32:tensors { u32:len key u32:rows u32:cols f64*(rows*cols) }*
//! ```

use std::collections::BTreeMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::data::Schema;
use crate::error::{Error, Result};
use crate::experiment::{Model, RunConfig};
use crate::nn::{Matrix, Parameterized};
use crate::selection::{validate_subsets, Subset};

pub const MAGIC: &[u8; 4] = b"SDCK";
pub const VERSION: u32 = 1;

const MAX_KEY_LEN: usize = 1 << 12;
const MAX_TEXT_LEN: usize = 1 << 24;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub schema: Schema,
    pub subsets: Vec<Subset>,
    pub tensors: Vec<(String, Matrix)>,
}

impl Checkpoint {
    pub fn capture(config: &RunConfig, schema: &Schema, model: &Model, subsets: &[Subset]) -> Self {
        let mut tensors = Vec::new();
        model.visit_params(&mut |p| tensors.push((p.key.clone(), p.value.clone())));
        Self {
            config: config.clone(),
            schema: schema.clone(),
            subsets: subsets.to_vec(),
            tensors,
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let config = serde_json::to_vec(&self.config).expect("config serializes");
        let schema = self.schema.to_toml();
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        put_u32(&mut out, VERSION);
        out.extend_from_slice(&Sha256::digest(&config));
        put_bytes(&mut out, &config);
        put_bytes(&mut out, schema.as_bytes());
        put_u32(&mut out, self.subsets.len() as u32);
        for s in &self.subsets {
            put_u32(&mut out, s.len() as u32);
            for &m in s {
                put_u32(&mut out, m as u32);
            }
        }
        put_u32(&mut out, self.tensors.len() as u32);
        for (key, m) in &self.tensors {
            put_bytes(&mut out, key.as_bytes());
            put_u32(&mut out, m.rows() as u32);
            put_u32(&mut out, m.cols() as u32);
            for v in m.as_slice() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let hash: [u8; 32] = r.take(32)?.try_into().expect("32 bytes");
        let config_bytes = r.bytes(MAX_TEXT_LEN)?;
        if Sha256::digest(config_bytes).as_slice() != hash {
            return Err(Error::Checkpoint("config hash mismatch".into()));
        }
        let config: RunConfig = serde_json::from_slice(config_bytes)
            .map_err(|e| Error::Checkpoint(format!("config: {e}")))?;
        config.validate()?;
        let schema_text = std::str::from_utf8(r.bytes(MAX_TEXT_LEN)?)
            .map_err(|_| Error::Checkpoint("schema is not UTF-8".into()))?;
        let schema = Schema::parse(schema_text)?;

        let domains = r.count(4)?;
        let mut subsets = Vec::with_capacity(domains);
        for _ in 0..domains {
            let n = r.count(4)?;
            subsets.push(
                (0..n)
                    .map(|_| r.u32().map(|v| v as usize))
                    .collect::<Result<Vec<_>>>()?,
            );
        }
        validate_subsets(&subsets, config.domains)?;

        let count = r.count(12)?;
        let mut tensors = Vec::with_capacity(count);
        for _ in 0..count {
            let key = std::str::from_utf8(r.bytes(MAX_KEY_LEN)?)
                .map_err(|_| Error::Checkpoint("tensor key is not UTF-8".into()))?
                .to_owned();
            let rows = r.u32()? as usize;
            let cols = r.u32()? as usize;
            let len = rows
                .checked_mul(cols)
                .filter(|n| n.checked_mul(8).is_some_and(|b| b <= r.remaining()))
                .ok_or_else(|| Error::Checkpoint(format!("tensor `{key}` overruns the file")))?;
            let data = r
                .take(len * 8)?
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            tensors.push((key, Matrix::from_vec(rows, cols, data)?));
        }
        if r.remaining() != 0 {
            return Err(Error::Checkpoint(format!(
                "{} trailing bytes",
                r.remaining()
            )));
        }
        Ok(Self {
            config,
            schema,
            subsets,
            tensors,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.encode()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes)
    }

    /// Rebuilds the model; every tensor must be present with its shape.
    pub fn restore(&self) -> Result<Model> {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut model = Model::new(
            self.config.backbone(),
            &self.schema,
            &self.config.batch_quotas(),
            self.config.prototypes,
            &mut rng,
        )?;
        let mut by_key: BTreeMap<&str, &Matrix> = BTreeMap::new();
        for (k, m) in &self.tensors {
            if by_key.insert(k, m).is_some() {
                return Err(Error::Checkpoint(format!("duplicate tensor `{k}`")));
            }
        }
        let mut problem = None;
        let mut used = 0;
        model.visit_params_mut(&mut |p| match by_key.get(p.key.as_str()) {
            Some(m) if m.shape() == p.value.shape() => {
                p.value = (*m).clone();
                used += 1;
            }
            Some(m) => {
                problem.get_or_insert(format!(
                    "tensor `{}` has shape {:?}, want {:?}",
                    p.key,
                    m.shape(),
                    p.value.shape()
                ));
            }
            None => {
                problem.get_or_insert(format!("tensor `{}` missing", p.key));
            }
        });
        if let Some(p) = problem {
            return Err(Error::Checkpoint(p));
        }
        if used != by_key.len() {
            return Err(Error::Checkpoint(format!(
                "{} unknown tensors",
                by_key.len() - used
            )));
        }
        Ok(model)
    }
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_bytes(out: &mut Vec<u8>, b: &[u8]) {
    put_u32(out, b.len() as u32);
    out.extend_from_slice(b);
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if n > self.remaining() {
            return Err(Error::Checkpoint(format!("truncated at byte {}", self.pos)));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    fn bytes(&mut self, max: usize) -> Result<&'a [u8]> {
        let n = self.u32()? as usize;
        if n > max {
            return Err(Error::Checkpoint(format!("length {n} exceeds {max}")));
        }
        self.take(n)
    }

    /// An element count whose elements need at least `min_size` bytes each.
    fn count(&mut self, min_size: usize) -> Result<usize> {
        let n = self.u32()? as usize;
        if n.saturating_mul(min_size) > self.remaining() {
            return Err(Error::Checkpoint(format!("count {n} overruns the file")));
        }
        Ok(n)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::AffinitySpec;
    use crate::experiment::DatasetSource;

    fn sample() -> (Checkpoint, Model) {
        let spec = AffinitySpec::planted();
        let mut cfg = RunConfig::new(
            DatasetSource::Synth {
                spec: spec.clone(),
                sizes: vec![50; 3],
                seed: None,
            },
            3,
        );
        cfg.batch_size = 12;
        cfg.expert_hidden = vec![4];
        cfg.repr_dim = 3;
        cfg.tower_hidden = vec![2];
        cfg.prototypes = 2;
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let model = Model::new(
            cfg.backbone(),
            &spec.schema(),
            &cfg.batch_quotas(),
            2,
            &mut rng,
        )
        .unwrap();
        let subsets = vec![vec![0, 1], vec![1], vec![0, 1, 2]];
        (
            Checkpoint::capture(&cfg, &spec.schema(), &model, &subsets),
            model,
        )
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let (ck, model) = sample();
        let bytes = ck.encode();
        let back = Checkpoint::decode(&bytes).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.encode(), bytes);
        let restored = back.restore().unwrap();
        let mut a = Vec::new();
        let mut b = Vec::new();
        model.visit_params(&mut |p| a.extend(p.value.as_slice().iter().map(|v| v.to_bits())));
        restored.visit_params(&mut |p| b.extend(p.value.as_slice().iter().map(|v| v.to_bits())));
        assert_eq!(a, b);
    }

    #[test]
    fn rejects_corruption() {
        let (ck, _) = sample();
        let bytes = ck.encode();
        for cut in [0, 3, 8, 40, bytes.len() / 2, bytes.len() - 1] {
            assert!(
                matches!(Checkpoint::decode(&bytes[..cut]), Err(Error::Checkpoint(_))),
                "cut {cut}"
            );
        }
        let mut magic = bytes.clone();
        magic[0] = b'X';
        assert!(Checkpoint::decode(&magic).is_err());
        let mut hash = bytes.clone();
        hash[10] ^= 1;
        assert!(
            matches!(Checkpoint::decode(&hash), Err(Error::Checkpoint(m)) if m.contains("hash"))
        );
        let mut trailing = bytes.clone();
        trailing.push(0);
        assert!(Checkpoint::decode(&trailing).is_err());
    }

    #[test]
    fn restore_requires_every_tensor() {
        let (mut ck, _) = sample();
        ck.tensors.pop();
        assert!(matches!(ck.restore(), Err(Error::Checkpoint(_))));
        let (mut ck, _) = sample();
        ck.tensors[0].1 = Matrix::zeros(1, 1);
        assert!(matches!(ck.restore(), Err(Error::Checkpoint(_))));
    }
}
