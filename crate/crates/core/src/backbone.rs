//! Mixture-of-experts backbone with per-domain expert banks, gates, towers
//! and additive domain masks on the gate logits.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Batch, Sample, Schema};
use crate::error::{Error, Result};
use crate::nn::{
    masked_softmax_into, softmax_backward, Activation, Matrix, Mlp, MlpTrace, ParamTensor,
    Parameterized,
};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub domains: usize,
    /// `E_d`, experts owned by each domain.
    pub experts_per_domain: Vec<usize>,
    pub embedding_dim: usize,
    pub expert_hidden: Vec<usize>,
    /// Width of the mixed representation `h^d`.
    pub repr_dim: usize,
    pub tower_hidden: Vec<usize>,
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.domains == 0 {
            return Err(Error::Config("at least one domain is required".into()));
        }
        if self.experts_per_domain.len() != self.domains {
            return Err(Error::Config(format!(
                "experts_per_domain has {} entries for {} domains",
                self.experts_per_domain.len(),
                self.domains
            )));
        }
        if self.experts_per_domain.contains(&0) {
            return Err(Error::Config(
                "every domain needs at least one expert".into(),
            ));
        }
        if self.embedding_dim == 0 || self.repr_dim == 0 {
            return Err(Error::Config(
                "embedding_dim and repr_dim must be positive".into(),
            ));
        }
        if self.expert_hidden.contains(&0) || self.tower_hidden.contains(&0) {
            return Err(Error::Config("hidden sizes must be positive".into()));
        }
        Ok(())
    }

    pub fn total_experts(&self) -> usize {
        self.experts_per_domain.iter().sum()
    }

    /// Owning domain of every expert, in bank order.
    pub fn expert_owners(&self) -> Vec<usize> {
        expert_owners(&self.experts_per_domain)
    }
}

/// Owner of each expert when all of domain 0's experts come first, then
/// domain 1's, and so on.
pub fn expert_owners(experts_per_domain: &[usize]) -> Vec<usize> {
    experts_per_domain
        .iter()
        .enumerate()
        .flat_map(|(d, &n)| std::iter::repeat_n(d, n))
        .collect()
}

/// One `vocab x dim` table per feature field.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingTable {
    pub tables: Vec<ParamTensor>,
    dim: usize,
}

impl EmbeddingTable {
    pub fn new<R: Rng + ?Sized>(schema: &Schema, dim: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (dim as f64).sqrt();
        let tables = schema
            .fields
            .iter()
            .enumerate()
            .map(|(f, spec)| {
                ParamTensor::new(
                    format!("embedding/-/field{f}"),
                    Matrix::uniform(spec.vocab as usize, dim, bound, rng),
                )
            })
            .collect();
        Self { tables, dim }
    }

    pub fn from_tables(tables: Vec<Matrix>) -> Result<Self> {
        let dim = tables.first().map_or(0, Matrix::cols);
        if dim == 0 || tables.iter().any(|t| t.cols() != dim) {
            return Err(Error::Config(
                "embedding tables need one shared positive width".into(),
            ));
        }
        Ok(Self {
            tables: tables
                .into_iter()
                .enumerate()
                .map(|(f, t)| ParamTensor::new(format!("embedding/-/field{f}"), t))
                .collect(),
            dim,
        })
    }

    pub fn output_dim(&self) -> usize {
        self.tables.len() * self.dim
    }

    fn check(&self, features: &[u32]) -> Result<()> {
        if features.len() != self.tables.len() {
            return Err(Error::Usage(format!(
                "{} features for {} embedding fields",
                features.len(),
                self.tables.len()
            )));
        }
        for (f, (&v, t)) in features.iter().zip(&self.tables).enumerate() {
            if v as usize >= t.value.rows() {
                return Err(Error::Usage(format!(
                    "field {f} index {v} out of vocabulary"
                )));
            }
        }
        Ok(())
    }

    /// Concatenated field embeddings of one sample.
    pub fn embed(&self, features: &[u32]) -> Result<Vec<f64>> {
        self.check(features)?;
        let mut out = Vec::with_capacity(self.output_dim());
        for (&v, t) in features.iter().zip(&self.tables) {
            out.extend_from_slice(t.value.row(v as usize));
        }
        Ok(out)
    }

    pub fn embed_rows<'a>(&self, rows: impl ExactSizeIterator<Item = &'a [u32]>) -> Result<Matrix> {
        let n = rows.len();
        let mut data = Vec::with_capacity(n * self.output_dim());
        for features in rows {
            self.check(features)?;
            for (&v, t) in features.iter().zip(&self.tables) {
                data.extend_from_slice(t.value.row(v as usize));
            }
        }
        Matrix::from_vec(n, self.output_dim(), data)
    }

    /// Scatters `grad` (one row per sample) into the table gradients.
    pub fn backward<'a>(&mut self, rows: impl Iterator<Item = &'a [u32]>, grad: &Matrix) {
        for (r, features) in rows.enumerate() {
            let g = grad.row(r);
            for (f, (&v, t)) in features.iter().zip(self.tables.iter_mut()).enumerate() {
                let dst = t.grad.row_mut(v as usize);
                for (a, b) in dst.iter_mut().zip(&g[f * self.dim..(f + 1) * self.dim]) {
                    *a += b;
                }
            }
        }
    }
}

impl Parameterized for EmbeddingTable {
    fn visit_params(&self, f: &mut dyn FnMut(&ParamTensor)) {
        self.tables.iter().for_each(f);
    }
    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut ParamTensor)) {
        self.tables.iter_mut().for_each(f);
    }
}

/// All experts, grouped by owning domain in ascending domain order.
#[derive(Clone, Debug, PartialEq)]
pub struct ExpertBank {
    pub experts: Vec<Mlp>,
    owners: Vec<usize>,
}

impl ExpertBank {
    pub fn new(experts: Vec<Mlp>, experts_per_domain: &[usize]) -> Result<Self> {
        let owners = expert_owners(experts_per_domain);
        if owners.len() != experts.len() {
            return Err(Error::Config(format!(
                "{} experts for layout totalling {}",
                experts.len(),
                owners.len()
            )));
        }
        Ok(Self { experts, owners })
    }

    pub fn len(&self) -> usize {
        self.experts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.experts.is_empty()
    }

    pub fn owner(&self, i: usize) -> usize {
        self.owners[i]
    }

    pub fn owners(&self) -> &[usize] {
        &self.owners
    }

    /// Output of every expert on `x`, in bank order.
    pub fn outputs(&self, x: &Matrix) -> Result<Vec<Matrix>> {
        self.experts.iter().map(|e| e.infer(x)).collect()
    }
}

/// Additive gate mask: `0` for experts whose owner is in the domain's
/// similar set, `-inf` otherwise.
#[derive(Clone, Debug, PartialEq)]
pub struct DomainMask(pub Vec<f64>);

impl DomainMask {
    pub fn allows(&self, expert: usize) -> bool {
        self.0[expert] == 0.0
    }
}

/// Builds one mask per domain from the selected similar-domain sets.
pub fn build_mask(selected: &[Vec<usize>], owners: &[usize]) -> Result<Vec<DomainMask>> {
    let domains = selected.len();
    selected
        .iter()
        .enumerate()
        .map(|(d, set)| {
            if !set.contains(&d) {
                return Err(Error::Invariant(format!(
                    "domain {d} missing from its own similar set {set:?}"
                )));
            }
            if let Some(bad) = set.iter().find(|&&m| m >= domains) {
                return Err(Error::Invariant(format!(
                    "similar set of {d} names unknown domain {bad}"
                )));
            }
            Ok(DomainMask(
                owners
                    .iter()
                    .map(|o| {
                        if set.contains(o) {
                            0.0
                        } else {
                            f64::NEG_INFINITY
                        }
                    })
                    .collect(),
            ))
        })
        .collect()
}

/// Weighted sum of expert outputs for one row block: `h[r] = sum_i g[r,i] * out_i[r]`.
pub fn mix(weights: &Matrix, expert_outs: &[&Matrix]) -> Matrix {
    let rows = weights.rows();
    let width = expert_outs.first().map_or(0, |m| m.cols());
    let mut h = Matrix::zeros(rows, width);
    for r in 0..rows {
        let dst = h.row_mut(r);
        for (i, out) in expert_outs.iter().enumerate() {
            let g = weights[(r, i)];
            if g == 0.0 {
                continue;
            }
            for (a, b) in dst.iter_mut().zip(out.row(r)) {
                *a += g * b;
            }
        }
    }
    h
}

#[derive(Clone, Debug)]
struct GroupTrace {
    domain: usize,
    start: usize,
    end: usize,
    gate: MlpTrace,
    weights: Matrix,
    tower: MlpTrace,
}

/// Everything [`Backbone::backward`] needs from a forward pass.
#[derive(Clone, Debug)]
pub struct BackboneTrace {
    features: Vec<Vec<u32>>,
    experts: Vec<Option<MlpTrace>>,
    groups: Vec<GroupTrace>,
}

/// Per-group results of a forward pass, aligned with the batch groups.
#[derive(Clone, Debug, PartialEq)]
pub struct BackboneOutput {
    pub domains: Vec<usize>,
    pub preds: Vec<Vec<f64>>,
    pub reprs: Vec<Matrix>,
    /// Gate weights after masking, one row per sample.
    pub gate_weights: Vec<Matrix>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Backbone {
    pub config: BackboneConfig,
    pub embedding: EmbeddingTable,
    pub experts: ExpertBank,
    pub gates: Vec<Mlp>,
    pub towers: Vec<Mlp>,
}

impl Backbone {
    pub fn new<R: Rng + ?Sized>(
        config: BackboneConfig,
        schema: &Schema,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        if schema.domains != config.domains {
            return Err(Error::Config(format!(
                "schema has {} domains, backbone config {}",
                schema.domains, config.domains
            )));
        }
        let embedding = EmbeddingTable::new(schema, config.embedding_dim, rng);
        let input = embedding.output_dim();
        let owners = config.expert_owners();

        let mut expert_dims = vec![input];
        expert_dims.extend(&config.expert_hidden);
        expert_dims.push(config.repr_dim);
        let experts = owners
            .iter()
            .enumerate()
            .map(|(i, o)| {
                Mlp::build(
                    &format!("expert/{o}/e{i}"),
                    &expert_dims,
                    Activation::Relu,
                    Activation::Relu,
                    rng,
                )
            })
            .collect::<Result<Vec<_>>>()?;

        let total = owners.len();
        let gates = (0..config.domains)
            .map(|d| {
                Mlp::build(
                    &format!("gate/{d}"),
                    &[input, total],
                    Activation::Linear,
                    Activation::Linear,
                    rng,
                )
            })
            .collect::<Result<Vec<_>>>()?;

        let mut tower_dims = vec![config.repr_dim];
        tower_dims.extend(&config.tower_hidden);
        tower_dims.push(1);
        let towers = (0..config.domains)
            .map(|d| {
                Mlp::build(
                    &format!("tower/{d}"),
                    &tower_dims,
                    Activation::Relu,
                    Activation::Sigmoid,
                    rng,
                )
            })
            .collect::<Result<Vec<_>>>()?;

        Ok(Self {
            experts: ExpertBank::new(experts, &config.experts_per_domain)?,
            config,
            embedding,
            gates,
            towers,
        })
    }

    pub fn domains(&self) -> usize {
        self.config.domains
    }

    pub fn expert_count(&self) -> usize {
        self.experts.len()
    }

    pub fn input_dim(&self) -> usize {
        self.embedding.output_dim()
    }

    pub fn embed(&self, sample: &Sample) -> Result<Vec<f64>> {
        self.embedding.embed(&sample.features)
    }

    /// Softmax of the unmasked gate logits `W_g^d x` for one input.
    pub fn gate_weights(&self, x: &[f64], domain: usize) -> Result<Vec<f64>> {
        self.masked_gate_weights(x, domain, None)
    }

    pub fn masked_gate_weights(
        &self,
        x: &[f64],
        domain: usize,
        mask: Option<&DomainMask>,
    ) -> Result<Vec<f64>> {
        self.check_domain(domain)?;
        let logits = self.gates[domain].infer(&Matrix::row_vector(x))?;
        let mut out = vec![0.0; self.expert_count()];
        masked_softmax_into(logits.as_slice(), mask.map(|m| m.0.as_slice()), &mut out)?;
        Ok(out)
    }

    /// `h^d` for one input under an optional mask.
    pub fn masked_mix(
        &self,
        x: &[f64],
        domain: usize,
        mask: Option<&DomainMask>,
    ) -> Result<Vec<f64>> {
        let g = self.masked_gate_weights(x, domain, mask)?;
        let xm = Matrix::row_vector(x);
        let outs = self
            .experts
            .experts
            .iter()
            .zip(&g)
            .map(|(e, &w)| {
                if w == 0.0 {
                    Ok(None)
                } else {
                    e.infer(&xm).map(Some)
                }
            })
            .collect::<Result<Vec<_>>>()?;
        let mut h = vec![0.0; self.config.repr_dim];
        for (w, out) in g.iter().zip(outs) {
            if let Some(out) = out {
                for (a, b) in h.iter_mut().zip(out.as_slice()) {
                    *a += w * b;
                }
            }
        }
        Ok(h)
    }

    fn check_domain(&self, domain: usize) -> Result<()> {
        if domain >= self.domains() {
            return Err(Error::Usage(format!(
                "domain {domain} outside [0, {})",
                self.domains()
            )));
        }
        Ok(())
    }

    fn check_masks(&self, masks: Option<&[DomainMask]>) -> Result<()> {
        if let Some(masks) = masks {
            if masks.len() != self.domains()
                || masks.iter().any(|m| m.0.len() != self.expert_count())
            {
                return Err(Error::Usage(
                    "mask set does not match the expert layout".into(),
                ));
            }
        }
        Ok(())
    }

    /// Forward pass over a domain-grouped batch.
    pub fn forward(
        &self,
        batch: &Batch,
        masks: Option<&[DomainMask]>,
    ) -> Result<(BackboneOutput, BackboneTrace)> {
        self.check_masks(masks)?;
        let features: Vec<Vec<u32>> = batch
            .groups
            .iter()
            .flat_map(|g| g.samples.iter().map(|s| s.features.clone()))
            .collect();
        let x = self
            .embedding
            .embed_rows(features.iter().map(Vec::as_slice))?;

        // Gate logits and masked weights per group.
        let mut spans = Vec::with_capacity(batch.groups.len());
        let mut start = 0;
        for g in &batch.groups {
            self.check_domain(g.domain)?;
            let end = start + g.samples.len();
            let gate = self.gates[g.domain].forward_trace(&x.slice_rows(start, end))?;
            let logits = gate.output();
            let mask = masks.map(|m| m[g.domain].0.as_slice());
            let mut weights = Matrix::zeros(end - start, self.expert_count());
            for r in 0..end - start {
                masked_softmax_into(logits.row(r), mask, weights.row_mut(r))?;
            }
            spans.push((g.domain, start, end, gate, weights));
            start = end;
        }

        // Experts nobody may use are skipped.
        let needed: Vec<bool> = (0..self.expert_count())
            .map(|i| match masks {
                None => !spans.is_empty(),
                Some(m) => spans.iter().any(|(d, ..)| m[*d].allows(i)),
            })
            .collect();
        let experts = self
            .experts
            .experts
            .iter()
            .zip(&needed)
            .map(|(e, &need)| {
                if need {
                    e.forward_trace(&x).map(Some)
                } else {
                    Ok(None)
                }
            })
            .collect::<Result<Vec<Option<MlpTrace>>>>()?;

        let mut out = BackboneOutput {
            domains: Vec::new(),
            preds: Vec::new(),
            reprs: Vec::new(),
            gate_weights: Vec::new(),
        };
        let mut groups = Vec::with_capacity(spans.len());
        let zero_block = Matrix::zeros(0, 0);
        for (domain, start, end, gate, weights) in spans {
            let blocks: Vec<Matrix> = experts
                .iter()
                .map(|t| {
                    t.as_ref()
                        .map_or_else(|| zero_block.clone(), |t| t.output().slice_rows(start, end))
                })
                .collect();
            let h = mix_blocks(&weights, &blocks, self.config.repr_dim);
            let tower = self.towers[domain].forward_trace(&h)?;
            out.domains.push(domain);
            out.preds.push(tower.output().as_slice().to_vec());
            out.reprs.push(h);
            out.gate_weights.push(weights.clone());
            groups.push(GroupTrace {
                domain,
                start,
                end,
                gate,
                weights,
                tower,
            });
        }
        Ok((
            out,
            BackboneTrace {
                features,
                experts,
                groups,
            },
        ))
    }

    /// Backpropagates `d loss / d pred` (and optionally `d loss / d h`) for
    /// every group, accumulating parameter gradients.
    pub fn backward(
        &mut self,
        trace: &BackboneTrace,
        dpreds: &[Vec<f64>],
        dreprs: Option<&[Matrix]>,
    ) -> Result<()> {
        if dpreds.len() != trace.groups.len() {
            return Err(Error::Usage(
                "one prediction gradient per batch group is required".into(),
            ));
        }
        let rows = trace.features.len();
        let width = self.config.repr_dim;
        let mut dx = Matrix::zeros(rows, self.input_dim());
        let mut dexpert: Vec<Option<Matrix>> = trace
            .experts
            .iter()
            .map(|t| t.as_ref().map(|_| Matrix::zeros(rows, width)))
            .collect();

        for (gi, g) in trace.groups.iter().enumerate() {
            let n = g.end - g.start;
            let dpred = Matrix::from_vec(n, 1, dpreds[gi].clone())?;
            let mut dh = self.towers[g.domain].backward_trace(&g.tower, &dpred)?;
            if let Some(extra) = dreprs {
                dh.add_assign(&extra[gi]);
            }
            let mut dlogits = Matrix::zeros(n, self.expert_count());
            for r in 0..n {
                let dh_row = dh.row(r);
                let probs = g.weights.row(r);
                let mut dprobs = vec![0.0; probs.len()];
                for (i, t) in trace.experts.iter().enumerate() {
                    let Some(t) = t else { continue };
                    let out_row = t.output().row(g.start + r);
                    dprobs[i] = out_row.iter().zip(dh_row).map(|(a, b)| a * b).sum();
                    let w = probs[i];
                    if w != 0.0 {
                        let dst = dexpert[i].as_mut().unwrap().row_mut(g.start + r);
                        for (a, b) in dst.iter_mut().zip(dh_row) {
                            *a += w * b;
                        }
                    }
                }
                dlogits
                    .row_mut(r)
                    .copy_from_slice(&softmax_backward(probs, &dprobs));
            }
            let dxg = self.gates[g.domain].backward_trace(&g.gate, &dlogits)?;
            for r in 0..n {
                for (a, b) in dx.row_mut(g.start + r).iter_mut().zip(dxg.row(r)) {
                    *a += b;
                }
            }
        }

        for (i, (t, d)) in trace.experts.iter().zip(dexpert).enumerate() {
            if let (Some(t), Some(d)) = (t, d) {
                let dxe = self.experts.experts[i].backward_trace(t, &d)?;
                dx.add_assign(&dxe);
            }
        }
        self.embedding
            .backward(trace.features.iter().map(Vec::as_slice), &dx);
        Ok(())
    }

    /// Click probabilities for samples of one domain.
    pub fn predict(
        &self,
        samples: &[Sample],
        domain: usize,
        mask: Option<&DomainMask>,
    ) -> Result<Vec<f64>> {
        self.check_domain(domain)?;
        if samples.is_empty() {
            return Ok(Vec::new());
        }
        let x = self
            .embedding
            .embed_rows(samples.iter().map(|s| s.features.as_slice()))?;
        let logits = self.gates[domain].infer(&x)?;
        let mut weights = Matrix::zeros(samples.len(), self.expert_count());
        for r in 0..samples.len() {
            masked_softmax_into(
                logits.row(r),
                mask.map(|m| m.0.as_slice()),
                weights.row_mut(r),
            )?;
        }
        let blocks = self
            .experts
            .experts
            .iter()
            .enumerate()
            .map(|(i, e)| {
                if mask.is_some_and(|m| !m.allows(i)) {
                    Ok(Matrix::zeros(0, 0))
                } else {
                    e.infer(&x)
                }
            })
            .collect::<Result<Vec<_>>>()?;
        let h = mix_blocks(&weights, &blocks, self.config.repr_dim);
        Ok(self.towers[domain].infer(&h)?.into_vec())
    }
}

/// [`mix`] where skipped experts are represented by empty blocks.
fn mix_blocks(weights: &Matrix, blocks: &[Matrix], width: usize) -> Matrix {
    let rows = weights.rows();
    let mut h = Matrix::zeros(rows, width);
    for r in 0..rows {
        let dst = h.row_mut(r);
        for (i, block) in blocks.iter().enumerate() {
            let g = weights[(r, i)];
            if g == 0.0 || block.rows() == 0 {
                continue;
            }
            for (a, b) in dst.iter_mut().zip(block.row(r)) {
                *a += g * b;
            }
        }
    }
    h
}

impl Parameterized for Backbone {
    fn visit_params(&self, f: &mut dyn FnMut(&ParamTensor)) {
        self.embedding.visit_params(f);
        for e in &self.experts.experts {
            e.visit_params(f);
        }
        for g in &self.gates {
            g.visit_params(f);
        }
        for t in &self.towers {
            t.visit_params(f);
        }
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut ParamTensor)) {
        self.embedding.visit_params_mut(f);
        for e in &mut self.experts.experts {
            e.visit_params_mut(f);
        }
        for g in &mut self.gates {
            g.visit_params_mut(f);
        }
        for t in &mut self.towers {
            t.visit_params_mut(f);
        }
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::data::FieldSpec;
    use crate::nn::{bce_loss, Dense};

    fn schema(domains: usize) -> Schema {
        Schema::new(
            domains,
            vec![
                FieldSpec {
                    name: "a".into(),
                    vocab: 5,
                },
                FieldSpec {
                    name: "b".into(),
                    vocab: 4,
                },
            ],
        )
        .unwrap()
    }

    fn config(experts: Vec<usize>) -> BackboneConfig {
        BackboneConfig {
            domains: experts.len(),
            experts_per_domain: experts,
            embedding_dim: 3,
            expert_hidden: vec![5],
            repr_dim: 4,
            tower_hidden: vec![3],
        }
    }

    fn backbone(experts: Vec<usize>, seed: u64) -> Backbone {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Backbone::new(config(experts.clone()), &schema(experts.len()), &mut rng).unwrap()
    }

    #[test]
    fn embedding_concatenates_rows() {
        let e = EmbeddingTable::from_tables(vec![
            Matrix::from_rows(&[vec![0.0, 0.0], vec![1.0, 2.0]]).unwrap(),
            Matrix::from_rows(&[vec![3.0, 4.0]]).unwrap(),
        ])
        .unwrap();
        assert_eq!(e.embed(&[1, 0]).unwrap(), vec![1.0, 2.0, 3.0, 4.0]);
        let z =
            EmbeddingTable::from_tables(vec![Matrix::zeros(3, 2), Matrix::zeros(3, 2)]).unwrap();
        assert_eq!(z.embed(&[2, 1]).unwrap(), vec![0.0; 4]);
        assert!(e.embed(&[2, 0]).is_err());
    }

    #[test]
    fn expert_layout_follows_domain_order() {
        assert_eq!(expert_owners(&[1, 1, 1]), vec![0, 1, 2]);
        assert_eq!(expert_owners(&[2, 1]), vec![0, 0, 1]);
        let b = backbone(vec![2, 1], 0);
        assert_eq!(b.experts.owners(), &[0, 0, 1]);
    }

    #[test]
    fn identical_experts_identical_rows() {
        let mut b = backbone(vec![1, 1, 1], 4);
        let first = b.experts.experts[0].clone();
        for e in b.experts.experts.iter_mut() {
            e.layers = first.layers.clone();
        }
        let x = Matrix::uniform(3, b.input_dim(), 1.0, &mut ChaCha8Rng::seed_from_u64(1));
        let outs = b.experts.outputs(&x).unwrap();
        assert_eq!(outs[0], outs[1]);
        assert_eq!(outs[1], outs[2]);
    }

    #[test]
    fn gate_examples() {
        let mut b = backbone(vec![1, 1, 1], 2);
        let x = vec![0.3; b.input_dim()];
        for layer in &mut b.gates[1].layers {
            layer.weight.value.fill(0.0);
            layer.bias.value.fill(0.0);
        }
        let g = b.gate_weights(&x, 1).unwrap();
        assert!(g.iter().all(|v| (v - 1.0 / 3.0).abs() < 1e-15));

        b.gates[1].layers[0].bias.value = Matrix::row_vector(&[0.0, 50.0, 0.0]);
        let g = b.gate_weights(&x, 1).unwrap();
        assert!(g[1] > 1.0 - 1e-15);

        b.gates[1].layers[0].bias.value = Matrix::row_vector(&[1.0, 2.0, 3.0]);
        let g = b.gate_weights(&x, 1).unwrap();
        for (a, want) in g.iter().zip([0.09003, 0.24473, 0.66524]) {
            assert!((a - want).abs() < 5e-6);
        }

        b.gates[1].layers[0].bias.value = Matrix::row_vector(&[1.0, 1.0, 1.0]);
        let mask = DomainMask(vec![0.0, f64::NEG_INFINITY, 0.0]);
        assert_eq!(
            b.masked_gate_weights(&x, 1, Some(&mask)).unwrap(),
            vec![0.5, 0.0, 0.5]
        );
    }

    #[test]
    fn mix_examples() {
        let a = Matrix::row_vector(&[1.0, 0.0]);
        let b = Matrix::row_vector(&[0.0, 1.0]);
        assert_eq!(
            mix(&Matrix::row_vector(&[0.5, 0.5]), &[&a, &b]).as_slice(),
            &[0.5, 0.5]
        );
        assert_eq!(
            mix(&Matrix::row_vector(&[0.0, 1.0]), &[&a, &b]).as_slice(),
            b.as_slice()
        );
        let c = Matrix::row_vector(&[0.25, -2.0]);
        assert_eq!(
            mix(&Matrix::row_vector(&[0.5, 0.5]), &[&c, &c]).as_slice(),
            c.as_slice()
        );
    }

    #[test]
    fn mask_examples() {
        let ninf = f64::NEG_INFINITY;
        let m = build_mask(&[vec![0], vec![1], vec![2]], &[0, 1, 2]).unwrap();
        for (d, mask) in m.iter().enumerate() {
            assert_eq!(mask.0.iter().filter(|v| **v == 0.0).count(), 1);
            assert!(mask.allows(d));
        }
        let all = build_mask(&[vec![0, 1, 2], vec![0, 1, 2], vec![0, 1, 2]], &[0, 1, 2]).unwrap();
        assert!(all.iter().all(|m| m.0.iter().all(|v| *v == 0.0)));
        let owners = expert_owners(&[2, 1, 1]);
        let m = build_mask(&[vec![0, 2], vec![1], vec![2]], &owners).unwrap();
        assert_eq!(m[0].0, vec![0.0, 0.0, ninf, 0.0]);
        assert!(matches!(
            build_mask(&[vec![1], vec![1]], &[0, 1]),
            Err(Error::Invariant(_))
        ));
    }

    #[test]
    fn own_domain_only_mask_uses_own_expert() {
        let b = backbone(vec![1, 1, 1], 3);
        let x = vec![0.2; b.input_dim()];
        let masks = build_mask(&[vec![0], vec![1], vec![2]], &[0, 1, 2]).unwrap();
        let h = b.masked_mix(&x, 0, Some(&masks[0])).unwrap();
        let own = b.experts.experts[0].infer(&Matrix::row_vector(&x)).unwrap();
        assert_eq!(h, own.into_vec());
    }

    #[test]
    fn zero_tower_predicts_half() {
        let mut b = backbone(vec![1, 1], 5);
        let dims = [b.config.repr_dim, 1];
        b.towers[0] = Mlp::new(vec![Dense::from_parts(
            "t",
            Matrix::zeros(1, dims[0]),
            &[0.0],
            Activation::Sigmoid,
        )
        .unwrap()])
        .unwrap();
        let s = Sample {
            domain: 0,
            label: 1,
            features: vec![1, 2],
        };
        assert_eq!(b.predict(&[s], 0, None).unwrap(), vec![0.5]);
    }

    fn batch(domains: usize, per: usize, seed: u64) -> Batch {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let samples = (0..domains).flat_map(|d| {
            (0..per)
                .map(|_| Sample {
                    domain: d,
                    label: rng.random_range(0..2),
                    features: vec![rng.random_range(0..5), rng.random_range(0..4)],
                })
                .collect::<Vec<_>>()
        });
        Batch::from_samples(domains, samples)
    }

    #[test]
    fn forward_matches_predict_and_full_mask_is_bitwise_identical() {
        let b = backbone(vec![1, 2, 1], 7);
        let bt = batch(3, 6, 1);
        let (plain, _) = b.forward(&bt, None).unwrap();
        let full = build_mask(&vec![vec![0, 1, 2]; 3], b.experts.owners()).unwrap();
        let (masked, _) = b.forward(&bt, Some(&full)).unwrap();
        for (p, m) in plain
            .preds
            .iter()
            .flatten()
            .zip(masked.preds.iter().flatten())
        {
            assert_eq!(p.to_bits(), m.to_bits());
        }
        for (gi, g) in bt.groups.iter().enumerate() {
            let p = b.predict(&g.samples, g.domain, None).unwrap();
            assert_eq!(p, plain.preds[gi]);
        }
    }

    #[test]
    fn masked_experts_get_no_weight_and_no_gradient() {
        let mut b = backbone(vec![1, 1, 1], 9);
        let bt = Batch::from_samples(3, batch(3, 8, 2).groups.remove(0).samples);
        let masks = build_mask(&[vec![0, 2], vec![1], vec![2]], b.experts.owners()).unwrap();
        let (out, trace) = b.forward(&bt, Some(&masks)).unwrap();
        for r in 0..out.gate_weights[0].rows() {
            assert_eq!(out.gate_weights[0][(r, 1)], 0.0);
        }
        let labels: Vec<f64> = bt.groups[0].samples.iter().map(Sample::label_f64).collect();
        let (_, grad) = bce_loss(&out.preds[0], &labels).unwrap();
        b.backward(&trace, &[grad], None).unwrap();
        b.experts.experts[1]
            .visit_params(&mut |p| assert!(p.grad.as_slice().iter().all(|v| *v == 0.0)));
        let mut touched = false;
        b.experts.experts[2]
            .visit_params(&mut |p| touched |= p.grad.as_slice().iter().any(|v| *v != 0.0));
        assert!(touched);
    }
}
