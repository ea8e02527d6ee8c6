//! Per-batch inference latency with and without the selection machinery.

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::RunConfig;
use super::model::Model;
use super::train::{all_domains, derive_seed, prepare, Stream};
use crate::backbone::build_mask;
use crate::data::{equal_quotas, Partitions, QuotaSampler};
use crate::error::{Error, Result};
use crate::prototype::{distance_matrix, rank_domains, stable_order, PrototypeCodec};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimingOptions {
    pub warmup: usize,
    pub batches: usize,
    /// Batch sizes for the prototype-path scaling fit.
    pub scaling_batches: Vec<usize>,
}

impl Default for TimingOptions {
    fn default() -> Self {
        Self {
            warmup: 20,
            batches: 200,
            scaling_batches: vec![512, 1024, 2048, 4096],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatencyStats {
    pub mean_ms: f64,
    pub std_ms: f64,
    pub batches: usize,
}

impl LatencyStats {
    fn from_samples(ms: &[f64]) -> Self {
        let n = ms.len() as f64;
        let mean = ms.iter().sum::<f64>() / n;
        let var = ms.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0).max(1.0);
        Self {
            mean_ms: mean,
            std_ms: var.sqrt(),
            batches: ms.len(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScalingPoint {
    pub batch: usize,
    pub mean_ms: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimingReport {
    pub batch_size: usize,
    pub backbone: LatencyStats,
    /// Masked forward plus prototype encoding, distances and ranking.
    pub with_selection: LatencyStats,
    /// `(with_selection - backbone) / backbone`.
    pub overhead_ratio: f64,
    /// Prototype encoding plus distances, by batch size.
    pub scaling: Vec<ScalingPoint>,
    /// Least-squares line `intercept + slope * B` through `scaling`.
    pub slope_ms_per_sample: f64,
    pub intercept_ms: f64,
    /// Largest `|measured - fitted| / fitted` over the scaling points.
    pub max_relative_residual: f64,
}

fn elapsed_ms(start: Instant) -> f64 {
    start.elapsed().as_secs_f64() * 1e3
}

pub fn timing(config: &RunConfig, options: &TimingOptions) -> Result<TimingReport> {
    let (parts, _) = prepare(config, None)?;
    timing_on(config, &parts, options)
}

pub fn timing_on(
    config: &RunConfig,
    parts: &Partitions,
    options: &TimingOptions,
) -> Result<TimingReport> {
    if options.batches < 2 {
        return Err(Error::Config(
            "timing needs at least two measured batches".into(),
        ));
    }
    let quotas = config.batch_quotas();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, Stream::Init));
    let model = Model::new(
        config.backbone(),
        &parts.schema,
        &quotas,
        config.prototypes,
        &mut rng,
    )?;
    let masks = build_mask(
        &all_domains(config.domains),
        &model.backbone.config.expert_owners(),
    )?;
    let sizes: Vec<usize> = parts.train.iter().map(Vec::len).collect();
    let mut sampler = QuotaSampler::new(
        &sizes,
        quotas.clone(),
        derive_seed(config.seed, Stream::Probe),
    )?;
    let batches: Vec<_> = (0..options.warmup + options.batches)
        .map(|_| sampler.next_batch(&parts.train))
        .collect();

    let mut off = Vec::with_capacity(options.batches);
    let mut on = Vec::with_capacity(options.batches);
    for (i, batch) in batches.iter().enumerate() {
        let t = Instant::now();
        let (out, _) = model.backbone.forward(batch, None)?;
        std::hint::black_box(&out);
        let t_off = elapsed_ms(t);

        let t = Instant::now();
        let (out, _) = model.backbone.forward(batch, Some(&masks))?;
        let protos = out
            .domains
            .iter()
            .zip(&out.reprs)
            .zip(&batch.groups)
            .map(|((&d, h), g)| model.codec.domains[d].encode(h, &stable_order(&g.samples)))
            .collect::<Result<Vec<_>>>()?;
        let dist = distance_matrix(&protos)?;
        let ranks = (0..config.domains)
            .map(|d| rank_domains(&dist, d))
            .collect::<Result<Vec<_>>>()?;
        std::hint::black_box((&out, &ranks));
        let t_on = elapsed_ms(t);

        if i >= options.warmup {
            off.push(t_off);
            on.push(t_on);
        }
    }
    let backbone = LatencyStats::from_samples(&off);
    let with_selection = LatencyStats::from_samples(&on);
    let overhead_ratio = (with_selection.mean_ms - backbone.mean_ms) / backbone.mean_ms;

    let scaling = options
        .scaling_batches
        .iter()
        .map(|&b| scaling_point(config, parts, b, options))
        .collect::<Result<Vec<_>>>()?;
    let (intercept_ms, slope_ms_per_sample, max_relative_residual) = linear_fit(&scaling);

    Ok(TimingReport {
        batch_size: config.batch_size,
        backbone,
        with_selection,
        overhead_ratio,
        scaling,
        slope_ms_per_sample,
        intercept_ms,
        max_relative_residual,
    })
}

/// Mean latency of prototype encoding plus the distance matrix at batch `b`.
fn scaling_point(
    config: &RunConfig,
    parts: &Partitions,
    b: usize,
    options: &TimingOptions,
) -> Result<ScalingPoint> {
    let quotas = equal_quotas(b, config.domains);
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, Stream::Init));
    let model = Model::new(
        config.backbone(),
        &parts.schema,
        &quotas,
        config.prototypes,
        &mut rng,
    )?;
    let codec = PrototypeCodec::new(&quotas, config.prototypes, &mut rng)?;
    let sizes: Vec<usize> = parts.train.iter().map(Vec::len).collect();
    let mut sampler = QuotaSampler::new(&sizes, quotas, derive_seed(config.seed, Stream::Probe))?;
    let batch = sampler.next_batch(&parts.train);
    let (out, _) = model.backbone.forward(&batch, None)?;
    let orders: Vec<Vec<usize>> = batch
        .groups
        .iter()
        .map(|g| stable_order(&g.samples))
        .collect();

    let mut ms = Vec::with_capacity(options.batches);
    for i in 0..options.warmup + options.batches {
        let t = Instant::now();
        let protos = out
            .reprs
            .iter()
            .zip(&orders)
            .enumerate()
            .map(|(d, (h, o))| codec.domains[d].encode(h, o))
            .collect::<Result<Vec<_>>>()?;
        std::hint::black_box(distance_matrix(&protos)?);
        if i >= options.warmup {
            ms.push(elapsed_ms(t));
        }
    }
    Ok(ScalingPoint {
        batch: b,
        mean_ms: LatencyStats::from_samples(&ms).mean_ms,
    })
}

fn linear_fit(points: &[ScalingPoint]) -> (f64, f64, f64) {
    if points.len() < 2 {
        return (0.0, 0.0, 0.0);
    }
    let n = points.len() as f64;
    let mx = points.iter().map(|p| p.batch as f64).sum::<f64>() / n;
    let my = points.iter().map(|p| p.mean_ms).sum::<f64>() / n;
    let sxx: f64 = points.iter().map(|p| (p.batch as f64 - mx).powi(2)).sum();
    let sxy: f64 = points
        .iter()
        .map(|p| (p.batch as f64 - mx) * (p.mean_ms - my))
        .sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let resid = points
        .iter()
        .map(|p| {
            let fit = intercept + slope * p.batch as f64;
            (p.mean_ms - fit).abs() / fit.abs().max(f64::MIN_POSITIVE)
        })
        .fold(0.0, f64::max);
    (intercept, slope, resid)
}
