//! Prototype encoder/decoder over per-domain batch representations and the
//! asymmetric prototype distance between domains.
//!
//! The encoder of domain `d` is an affine map along the batch axis: with the
//! batch representation `h` (`B_d x H`, rows in a stable sample order) it
//! produces `p = A h + b 1^T` (`M x H`). The decoder maps back with
//! `h_hat = A' p + b' 1^T` and the reconstruction loss is `|h - h_hat|^2`.

use std::io::Write;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::Sample;
use crate::error::{Error, Result};
use crate::nn::{l2_rec_loss, Matrix, ParamTensor, Parameterized};

/// `M` prototypes of width `H` for one domain.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrototypeSet(pub Matrix);

impl PrototypeSet {
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        Ok(Self(Matrix::from_rows(rows)?))
    }

    pub fn len(&self) -> usize {
        self.0.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.0.rows() == 0
    }

    pub fn dim(&self) -> usize {
        self.0.cols()
    }
}

/// Order in which a batch's rows are fed to the encoder: ascending by sample
/// content, ties by position. Independent of the order the sampler drew them.
pub fn stable_order(samples: &[Sample]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..samples.len()).collect();
    idx.sort_by(|&a, &b| {
        let (sa, sb) = (&samples[a], &samples[b]);
        sa.features
            .cmp(&sb.features)
            .then(sa.label.cmp(&sb.label))
            .then(a.cmp(&b))
    });
    idx
}

#[derive(Clone, Debug, PartialEq)]
pub struct DomainCodec {
    pub enc_weight: ParamTensor,
    pub enc_bias: ParamTensor,
    pub dec_weight: ParamTensor,
    pub dec_bias: ParamTensor,
}

impl DomainCodec {
    pub fn new<R: Rng + ?Sized>(
        domain: usize,
        batch: usize,
        prototypes: usize,
        rng: &mut R,
    ) -> Self {
        let enc_bound = 1.0 / (batch as f64).sqrt();
        let dec_bound = 1.0 / (prototypes as f64).sqrt();
        Self {
            enc_weight: ParamTensor::new(
                format!("proto_enc/{domain}/weight"),
                Matrix::uniform(prototypes, batch, enc_bound, rng),
            ),
            enc_bias: ParamTensor::new(
                format!("proto_enc/{domain}/bias"),
                Matrix::uniform(prototypes, 1, enc_bound, rng),
            ),
            dec_weight: ParamTensor::new(
                format!("proto_dec/{domain}/weight"),
                Matrix::uniform(batch, prototypes, dec_bound, rng),
            ),
            dec_bias: ParamTensor::new(
                format!("proto_dec/{domain}/bias"),
                Matrix::uniform(batch, 1, dec_bound, rng),
            ),
        }
    }

    pub fn batch(&self) -> usize {
        self.enc_weight.value.cols()
    }

    pub fn prototypes(&self) -> usize {
        self.enc_weight.value.rows()
    }

    fn check_batch(&self, h: &Matrix) -> Result<()> {
        if h.rows() != self.batch() {
            return Err(Error::Config(format!(
                "encoder expects {} rows per domain batch, got {}",
                self.batch(),
                h.rows()
            )));
        }
        Ok(())
    }

    /// `A h + b 1^T` on rows already in encoder order.
    pub fn encode_sorted(&self, h: &Matrix) -> Result<PrototypeSet> {
        self.check_batch(h)?;
        Ok(PrototypeSet(affine_rows(
            &self.enc_weight.value,
            &self.enc_bias.value,
            h,
        )))
    }

    pub fn encode(&self, h: &Matrix, order: &[usize]) -> Result<PrototypeSet> {
        self.check_batch(h)?;
        self.encode_sorted(&h.gather_rows(order))
    }

    pub fn decode(&self, p: &PrototypeSet) -> Result<Matrix> {
        if p.len() != self.prototypes() {
            return Err(Error::Usage(format!(
                "decoder expects {} prototypes, got {}",
                self.prototypes(),
                p.len()
            )));
        }
        Ok(affine_rows(
            &self.dec_weight.value,
            &self.dec_bias.value,
            &p.0,
        ))
    }
}

/// `W x + b 1^T` where `b` is a column vector.
fn affine_rows(weight: &Matrix, bias: &Matrix, x: &Matrix) -> Matrix {
    let mut out = weight.matmul(x);
    for r in 0..out.rows() {
        let b = bias.as_slice()[r];
        out.row_mut(r).iter_mut().for_each(|v| *v += b);
    }
    out
}

#[derive(Clone, Debug)]
struct DomainTrace {
    domain: usize,
    order: Vec<usize>,
    sorted: Matrix,
    prototypes: Matrix,
    dh_hat: Matrix,
    dh_direct: Matrix,
}

#[derive(Clone, Debug)]
pub struct CodecTrace {
    domains: Vec<DomainTrace>,
}

/// Result of encoding and reconstructing every domain of a batch.
#[derive(Clone, Debug)]
pub struct CodecOutput {
    /// Sum over domains of the squared reconstruction error.
    pub rec_loss: f64,
    pub prototypes: Vec<PrototypeSet>,
}

/// Encoder/decoder pair for every domain.
#[derive(Clone, Debug, PartialEq)]
pub struct PrototypeCodec {
    pub domains: Vec<DomainCodec>,
}

impl PrototypeCodec {
    pub fn new<R: Rng + ?Sized>(quotas: &[usize], prototypes: usize, rng: &mut R) -> Result<Self> {
        if prototypes == 0 {
            return Err(Error::Config(
                "at least one prototype per domain is required".into(),
            ));
        }
        if quotas.contains(&0) {
            return Err(Error::Config(
                "every domain needs a positive batch quota".into(),
            ));
        }
        Ok(Self {
            domains: quotas
                .iter()
                .enumerate()
                .map(|(d, &b)| DomainCodec::new(d, b, prototypes, rng))
                .collect(),
        })
    }

    pub fn prototypes(&self) -> usize {
        self.domains.first().map_or(0, DomainCodec::prototypes)
    }

    /// Encodes and reconstructs `reprs[i]` (domain `domains[i]`, rows fed in
    /// `orders[i]`).
    pub fn forward(
        &self,
        domains: &[usize],
        reprs: &[Matrix],
        orders: &[Vec<usize>],
    ) -> Result<(CodecOutput, CodecTrace)> {
        let mut out = CodecOutput {
            rec_loss: 0.0,
            prototypes: Vec::with_capacity(domains.len()),
        };
        let mut traces = Vec::with_capacity(domains.len());
        for ((&d, h), order) in domains.iter().zip(reprs).zip(orders) {
            let codec = self
                .domains
                .get(d)
                .ok_or_else(|| Error::Usage(format!("no prototype codec for domain {d}")))?;
            codec.check_batch(h)?;
            let sorted = h.gather_rows(order);
            let p = codec.encode_sorted(&sorted)?;
            let h_hat = codec.decode(&p)?;
            let (loss, dh_direct, dh_hat) = l2_rec_loss(&sorted, &h_hat)?;
            out.rec_loss += loss;
            traces.push(DomainTrace {
                domain: d,
                order: order.clone(),
                sorted,
                prototypes: p.0.clone(),
                dh_hat,
                dh_direct,
            });
            out.prototypes.push(p);
        }
        Ok((out, CodecTrace { domains: traces }))
    }

    /// Accumulates `weight * d rec_loss` into the codec parameters and
    /// returns `weight * d rec_loss / d h` per domain, in the caller's row
    /// order.
    pub fn backward(&mut self, trace: &CodecTrace, weight: f64) -> Vec<Matrix> {
        let mut grads = Vec::with_capacity(trace.domains.len());
        for t in &trace.domains {
            let codec = &mut self.domains[t.domain];
            let mut dh_hat = t.dh_hat.clone();
            dh_hat.as_mut_slice().iter_mut().for_each(|v| *v *= weight);

            // h_hat = A' p + b' 1^T
            codec
                .dec_weight
                .grad
                .add_assign(&dh_hat.matmul_nt(&t.prototypes));
            add_row_sums(&mut codec.dec_bias.grad, &dh_hat);
            let dp = codec.dec_weight.value.matmul_tn(&dh_hat);

            // p = A hs + b 1^T
            codec.enc_weight.grad.add_assign(&dp.matmul_nt(&t.sorted));
            add_row_sums(&mut codec.enc_bias.grad, &dp);
            let mut dsorted = codec.enc_weight.value.matmul_tn(&dp);
            for (a, b) in dsorted
                .as_mut_slice()
                .iter_mut()
                .zip(t.dh_direct.as_slice())
            {
                *a += weight * b;
            }

            let mut dh = Matrix::zeros(dsorted.rows(), dsorted.cols());
            for (k, &r) in t.order.iter().enumerate() {
                dh.row_mut(r).copy_from_slice(dsorted.row(k));
            }
            grads.push(dh);
        }
        grads
    }
}

fn add_row_sums(dst: &mut Matrix, src: &Matrix) {
    for r in 0..src.rows() {
        dst.as_mut_slice()[r] += src.row(r).iter().sum::<f64>();
    }
}

impl Parameterized for PrototypeCodec {
    fn visit_params(&self, f: &mut dyn FnMut(&ParamTensor)) {
        for c in &self.domains {
            f(&c.enc_weight);
            f(&c.enc_bias);
            f(&c.dec_weight);
            f(&c.dec_bias);
        }
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut ParamTensor)) {
        for c in &mut self.domains {
            f(&mut c.enc_weight);
            f(&mut c.enc_bias);
            f(&mut c.dec_weight);
            f(&mut c.dec_bias);
        }
    }
}

fn l2(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// Distance from one prototype to a domain: L2 distance to the nearest of
/// the domain's prototypes.
pub fn proto_to_domain(p: &[f64], target: &PrototypeSet) -> Result<f64> {
    if target.is_empty() {
        return Err(Error::Usage("target prototype set is empty".into()));
    }
    if p.len() != target.dim() {
        return Err(Error::Usage(format!(
            "prototype width {} vs target width {}",
            p.len(),
            target.dim()
        )));
    }
    Ok((0..target.len())
        .map(|i| l2(p, target.0.row(i)))
        .fold(f64::INFINITY, f64::min))
}

/// Mean over `from`'s prototypes of their distance to `to`. Not symmetric.
pub fn domain_distance(from: &PrototypeSet, to: &PrototypeSet) -> Result<f64> {
    if from.is_empty() {
        return Err(Error::Usage("source prototype set is empty".into()));
    }
    let mut total = 0.0;
    for i in 0..from.len() {
        total += proto_to_domain(from.0.row(i), to)?;
    }
    Ok(total / from.len() as f64)
}

/// `D x D` matrix, entry `(i, j)` the distance from domain `i` to domain `j`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainDistanceMatrix(pub Vec<Vec<f64>>);

impl DomainDistanceMatrix {
    pub fn domains(&self) -> usize {
        self.0.len()
    }

    pub fn get(&self, from: usize, to: usize) -> f64 {
        self.0[from][to]
    }

    /// CSV with a header row and a leading column of domain ids.
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        let ids: Vec<String> = (0..self.domains()).map(|d| d.to_string()).collect();
        writeln!(w, "from\\to,{}", ids.join(","))?;
        for (d, row) in self.0.iter().enumerate() {
            let cells: Vec<String> = row.iter().map(|v| format!("{v}")).collect();
            writeln!(w, "{d},{}", cells.join(","))?;
        }
        Ok(())
    }
}

pub fn distance_matrix(sets: &[PrototypeSet]) -> Result<DomainDistanceMatrix> {
    if sets.is_empty() {
        return Err(Error::Usage("no prototype sets".into()));
    }
    let width = sets[0].dim();
    if sets.iter().any(|s| s.dim() != width || s.is_empty()) {
        return Err(Error::Usage(
            "prototype sets must be non-empty and share a width".into(),
        ));
    }
    let mut rows = Vec::with_capacity(sets.len());
    for (i, from) in sets.iter().enumerate() {
        let mut row = Vec::with_capacity(sets.len());
        for (j, to) in sets.iter().enumerate() {
            row.push(if i == j {
                0.0
            } else {
                domain_distance(from, to)?
            });
        }
        rows.push(row);
    }
    Ok(DomainDistanceMatrix(rows))
}

/// Domains ordered by ascending distance from `domain`, which always comes
/// first; ties go to the smaller id.
pub fn rank_domains(matrix: &DomainDistanceMatrix, domain: usize) -> Result<Vec<usize>> {
    if domain >= matrix.domains() {
        return Err(Error::Usage(format!("domain {domain} outside the matrix")));
    }
    let row = &matrix.0[domain];
    if row.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            name: format!("distance row {domain}"),
        });
    }
    let mut others: Vec<usize> = (0..matrix.domains()).filter(|&j| j != domain).collect();
    others.sort_by(|&a, &b| row[a].total_cmp(&row[b]).then(a.cmp(&b)));
    let mut out = Vec::with_capacity(matrix.domains());
    out.push(domain);
    out.extend(others);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::nn::gradcheck::check_gradients;
    use crate::nn::optimizer_step;

    fn set(rows: &[&[f64]]) -> PrototypeSet {
        PrototypeSet::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn averaging_encoder_gives_batch_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut c = DomainCodec::new(0, 4, 1, &mut rng);
        c.enc_weight.value = Matrix::from_vec(1, 4, vec![0.25; 4]).unwrap();
        c.enc_bias.value.fill(0.0);
        let h = Matrix::from_rows(&[
            vec![1.0, 0.0],
            vec![3.0, 2.0],
            vec![0.0, 4.0],
            vec![4.0, 2.0],
        ])
        .unwrap();
        let p = c.encode(&h, &[0, 1, 2, 3]).unwrap();
        assert_eq!(p.0.as_slice(), &[2.0, 2.0]);
        // Order does not matter for a uniform map.
        assert_eq!(c.encode(&h, &[3, 1, 0, 2]).unwrap(), p);
    }

    #[test]
    fn selector_encoder_picks_first_rows() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut c = DomainCodec::new(0, 3, 2, &mut rng);
        c.enc_weight.value =
            Matrix::from_rows(&[vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0]]).unwrap();
        c.enc_bias.value.fill(0.0);
        let h = Matrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0], vec![5.0, 6.0]]).unwrap();
        assert_eq!(
            c.encode_sorted(&h).unwrap().0.as_slice(),
            &[1.0, 2.0, 3.0, 4.0]
        );
        assert!(matches!(
            c.encode_sorted(&h.slice_rows(0, 2)),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn inverse_decoder_reconstructs_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut c = DomainCodec::new(0, 2, 2, &mut rng);
        // A = [[2, 1], [1, 1]], inverse [[1, -1], [-1, 2]]
        c.enc_weight.value = Matrix::from_rows(&[vec![2.0, 1.0], vec![1.0, 1.0]]).unwrap();
        c.enc_bias.value.fill(0.0);
        c.dec_weight.value = Matrix::from_rows(&[vec![1.0, -1.0], vec![-1.0, 2.0]]).unwrap();
        c.dec_bias.value.fill(0.0);
        let h = Matrix::from_rows(&[vec![0.5, -1.0, 2.0], vec![3.0, 0.25, 1.0]]).unwrap();
        let back = c.decode(&c.encode_sorted(&h).unwrap()).unwrap();
        assert_eq!(l2_rec_loss(&h, &back).unwrap().0, 0.0);

        c.dec_weight.value.fill(0.0);
        let zero = c.decode(&c.encode_sorted(&h).unwrap()).unwrap();
        assert_eq!(l2_rec_loss(&h, &zero).unwrap().0, h.sum_sq());
    }

    #[test]
    fn stable_order_ignores_draw_order() {
        let s = |f: u32, l: u8| Sample {
            domain: 0,
            label: l,
            features: vec![f, 1],
        };
        let a = vec![s(3, 0), s(1, 1), s(2, 0)];
        let b = vec![s(2, 0), s(3, 0), s(1, 1)];
        let sorted = |v: &[Sample]| {
            stable_order(v)
                .iter()
                .map(|&i| v[i].clone())
                .collect::<Vec<_>>()
        };
        assert_eq!(sorted(&a), sorted(&b));
    }

    #[test]
    fn codec_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let mut codec = PrototypeCodec::new(&[6, 5], 3, &mut rng).unwrap();
        let reprs = vec![
            Matrix::uniform(6, 4, 1.0, &mut rng),
            Matrix::uniform(5, 4, 1.0, &mut rng),
        ];
        let orders = vec![vec![3, 1, 0, 5, 2, 4], vec![0, 1, 2, 3, 4]];
        let domains = [0, 1];
        let report = check_gradients(
            &mut codec,
            |c| c.forward(&domains, &reprs, &orders).unwrap().0.rec_loss,
            |c| {
                let (_, trace) = c.forward(&domains, &reprs, &orders).unwrap();
                c.backward(&trace, 1.0);
            },
            1e-5,
        );
        assert!(report.max_rel_error < 1e-4, "{report:?}");

        // Gradient w.r.t. the representations themselves.
        let (_, trace) = codec.forward(&domains, &reprs, &orders).unwrap();
        let dh = codec.clone().backward(&trace, 1.0);
        for (gi, h) in reprs.iter().enumerate() {
            for e in 0..h.as_slice().len() {
                let mut plus = reprs.clone();
                plus[gi].as_mut_slice()[e] += 1e-5;
                let mut minus = reprs.clone();
                minus[gi].as_mut_slice()[e] -= 1e-5;
                let num = (codec.forward(&domains, &plus, &orders).unwrap().0.rec_loss
                    - codec.forward(&domains, &minus, &orders).unwrap().0.rec_loss)
                    / 2e-5;
                let ana = dh[gi].as_slice()[e];
                assert!(
                    crate::nn::gradcheck::relative_error(ana, num) < 1e-4,
                    "{ana} vs {num}"
                );
            }
        }
    }

    #[test]
    fn training_reduces_reconstruction() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut codec = PrototypeCodec::new(&[32], 10, &mut rng).unwrap();
        let h = vec![Matrix::uniform(32, 8, 1.0, &mut rng)];
        let order = vec![(0..32).collect::<Vec<_>>()];
        let initial = codec.forward(&[0], &h, &order).unwrap().0.rec_loss;
        let mut last = initial;
        for _ in 0..500 {
            let (out, trace) = codec.forward(&[0], &h, &order).unwrap();
            last = out.rec_loss;
            codec.backward(&trace, 1.0);
            optimizer_step(&mut codec, 0.01).unwrap();
        }
        assert!(last <= 0.1 * initial, "{initial} -> {last}");
    }

    #[test]
    fn distance_examples() {
        let target = set(&[&[1.0, 0.0], &[3.0, 0.0]]);
        assert_eq!(proto_to_domain(&[0.0, 0.0], &target).unwrap(), 1.0);
        assert_eq!(proto_to_domain(&[3.0, 0.0], &target).unwrap(), 0.0);
        assert_eq!(
            proto_to_domain(&[0.0, 4.0], &set(&[&[3.0, 0.0]])).unwrap(),
            5.0
        );
        let empty = PrototypeSet(Matrix::zeros(0, 2));
        assert!(proto_to_domain(&[0.0, 0.0], &empty).is_err());

        let a = set(&[&[0.0, 0.0], &[4.0, 0.0]]);
        let b = set(&[&[0.0, 0.0]]);
        assert_eq!(domain_distance(&a, &b).unwrap(), 2.0);
        assert_eq!(domain_distance(&b, &a).unwrap(), 0.0);
        assert_eq!(domain_distance(&a, &a).unwrap(), 0.0);
        let m = distance_matrix(&[a, b]).unwrap();
        assert_eq!(m.0, vec![vec![0.0, 2.0], vec![0.0, 0.0]]);
    }

    #[test]
    fn identical_sets_zero_matrix() {
        let s = set(&[&[1.0, 2.0], &[-1.0, 0.5]]);
        let m = distance_matrix(&[s.clone(), s.clone(), s]).unwrap();
        assert!(m.0.iter().flatten().all(|v| *v == 0.0));
    }

    #[test]
    fn collinear_sets_rank_by_position() {
        let m = distance_matrix(&[set(&[&[0.0]]), set(&[&[1.0]]), set(&[&[5.0]])]).unwrap();
        assert_eq!(rank_domains(&m, 0).unwrap(), vec![0, 1, 2]);
        assert_eq!(rank_domains(&m, 2).unwrap(), vec![2, 1, 0]);
        assert_eq!(rank_domains(&m, 1).unwrap(), vec![1, 0, 2]);
    }

    #[test]
    fn ranking_examples() {
        // Y=0, M=1, S=2
        let m = DomainDistanceMatrix(vec![
            vec![0.0, 1.2, 3.4],
            vec![1.0, 0.0, 1.0],
            vec![2.0, 2.0, 0.0],
        ]);
        assert_eq!(rank_domains(&m, 0).unwrap(), vec![0, 1, 2]);
        let flat = DomainDistanceMatrix(vec![vec![0.0, 1.0, 1.0, 1.0]; 4]);
        assert_eq!(rank_domains(&flat, 2).unwrap(), vec![2, 0, 1, 3]);
    }

    #[test]
    fn csv_export() {
        let m = DomainDistanceMatrix(vec![vec![0.0, 2.0], vec![0.0, 0.0]]);
        let mut buf = Vec::new();
        m.write_csv(&mut buf).unwrap();
        assert_eq!(
            String::from_utf8(buf).unwrap(),
            "from\\to,0,1\n0,0,2\n1,0,0\n"
        );
    }
}
