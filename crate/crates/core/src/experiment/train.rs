use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::{Mode, Reward, RunConfig};
use super::model::Model;
use crate::backbone::{build_mask, DomainMask};
use crate::data::{split, Partitions, QuotaSampler, Sample};
use crate::error::{Error, Result};
use crate::metrics::{report_from_predictions, MetricReport, OverallMode};
use crate::prototype::{distance_matrix, rank_domains, DomainDistanceMatrix, PrototypeSet};
use crate::selection::{candidate_states, greedy, Policy, RoundRecord, Selector, Subset};

/// Independent random streams derived from the run seed.
#[derive(Clone, Copy, Debug)]
pub(crate) enum Stream {
    Init = 1,
    Sampler = 2,
    Selector = 3,
    Probe = 4,
}

pub(crate) fn derive_seed(seed: u64, stream: Stream) -> u64 {
    // splitmix64 finaliser over the stream-tagged seed
    let mut z = seed ^ (stream as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub steps: usize,
    /// Means over the epoch's steps.
    pub l_ctr: f64,
    pub l_rec: f64,
    pub l_final: f64,
    pub validation_auc: f64,
    pub exploration: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValueRow {
    pub subset: Subset,
    pub value: f64,
    pub count: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PartitionSizes {
    pub train: Vec<usize>,
    pub validation: Vec<usize>,
    pub test: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub seed: u64,
    pub mode: Mode,
    pub config_hash: String,
    pub config: RunConfig,
    pub malformed_rows: usize,
    pub partitions: PartitionSizes,
    pub epochs: Vec<EpochLog>,
    pub best_epoch: usize,
    pub stopped_early: bool,
    pub validation: MetricReport,
    pub test: MetricReport,
    /// Subsets in force at the best epoch.
    pub active_subsets: Vec<Subset>,
    /// Greedy subsets under the final value table; the configured subsets
    /// outside sdsp mode.
    pub final_subsets: Vec<Subset>,
    /// Distances between the best model's prototypes on a training batch.
    pub distances: DomainDistanceMatrix,
    pub value_table: Vec<Vec<ValueRow>>,
    pub selection_trace: Vec<RoundRecord>,
}

impl RunReport {
    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self)
            .map_err(|e| Error::Invariant(format!("report serialization: {e}")))
    }
}

/// A finished run: the report plus the best-epoch model and its subsets.
#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub report: RunReport,
    pub model: Model,
    pub subsets: Vec<Subset>,
}

impl RunOutcome {
    pub fn masks(&self) -> Result<Vec<DomainMask>> {
        build_mask(&self.subsets, &self.model.backbone.config.expert_owners())
    }
}

pub fn all_domains(domains: usize) -> Vec<Subset> {
    vec![(0..domains).collect(); domains]
}

/// Per-domain and overall metrics of `model` on one partition.
pub fn evaluate(
    model: &Model,
    part: &[Vec<Sample>],
    masks: Option<&[DomainMask]>,
    mode: OverallMode,
) -> Result<MetricReport> {
    let per_domain = part
        .iter()
        .enumerate()
        .map(|(d, samples)| {
            let scores = model.predict(samples, d, masks)?;
            Ok((scores, samples.iter().map(Sample::label_f64).collect()))
        })
        .collect::<Result<Vec<_>>>()?;
    report_from_predictions(&per_domain, mode)
}

fn rewards(
    model: &Model,
    parts: &Partitions,
    masks: Option<&[DomainMask]>,
    reward: Reward,
) -> Result<Vec<f64>> {
    let report = evaluate(model, &parts.validation, masks, OverallMode::Pooled)?;
    Ok(report
        .domains
        .iter()
        .map(|m| match reward {
            Reward::Auc => m.auc,
            Reward::NegLogloss => -m.logloss,
        })
        .collect())
}

/// Prototypes of `model` on a seeded training batch.
pub fn probe_prototypes(
    model: &Model,
    config: &RunConfig,
    parts: &Partitions,
    masks: Option<&[DomainMask]>,
) -> Result<Vec<PrototypeSet>> {
    let sizes: Vec<usize> = parts.train.iter().map(Vec::len).collect();
    let mut sampler = QuotaSampler::new(
        &sizes,
        config.batch_quotas(),
        derive_seed(config.seed, Stream::Probe),
    )?;
    model.prototypes(&sampler.next_batch(&parts.train), masks)
}

pub fn prepare(config: &RunConfig, base: Option<&Path>) -> Result<(Partitions, usize)> {
    config.validate()?;
    let loaded = config.dataset.load(config.seed, base)?;
    if loaded.dataset.domain_count() != config.domains {
        return Err(Error::Config(format!(
            "dataset has {} domains, config {}",
            loaded.dataset.domain_count(),
            config.domains
        )));
    }
    let parts = split(&loaded.dataset, config.split, config.seed)?;
    for (d, v) in parts.validation.iter().enumerate() {
        if v.is_empty() {
            return Err(Error::Config(format!(
                "domain {d} has an empty validation set"
            )));
        }
    }
    Ok((parts, loaded.malformed_rows))
}

/// Trains according to `config.mode`; exhaustive-oracle configs train as
/// full-share here (see [`super::exhaustive_oracle`]).
pub fn train(config: &RunConfig, base: Option<&Path>) -> Result<RunOutcome> {
    let (parts, malformed) = prepare(config, base)?;
    train_on(config, &parts, malformed, None)
}

/// sdsp training whose selector still runs but always applies `pinned`.
pub fn train_pinned(
    config: &RunConfig,
    base: Option<&Path>,
    pinned: Vec<Subset>,
) -> Result<RunOutcome> {
    let (parts, malformed) = prepare(config, base)?;
    let mut cfg = config.clone();
    cfg.mode = Mode::Sdsp;
    train_on(&cfg, &parts, malformed, Some(pinned))
}

pub fn train_on(
    config: &RunConfig,
    parts: &Partitions,
    malformed_rows: usize,
    pinned: Option<Vec<Subset>>,
) -> Result<RunOutcome> {
    let d_count = config.domains;
    let quotas = config.batch_quotas();
    let mut init_rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, Stream::Init));
    let mut model = Model::new(
        config.backbone(),
        &parts.schema,
        &quotas,
        config.prototypes,
        &mut init_rng,
    )?;
    let owners = model.backbone.config.expert_owners();
    let train_sizes: Vec<usize> = parts.train.iter().map(Vec::len).collect();
    let mut sampler = QuotaSampler::new(
        &train_sizes,
        quotas,
        derive_seed(config.seed, Stream::Sampler),
    )?;

    let mut selector = match config.mode {
        Mode::Sdsp => {
            let policy = Policy::new(
                config.initial_exploration,
                config.decay_rate,
                config.selection_period,
            )?;
            let mut s = Selector::new(
                d_count,
                policy,
                config.value_aggregation,
                derive_seed(config.seed, Stream::Selector),
            );
            if let Some(p) = pinned {
                s.pin(p)?;
            }
            Some(s)
        }
        _ => None,
    };
    let mut subsets = match (config.mode, &config.subsets) {
        (Mode::FixedSubset, Some(s)) => s.clone(),
        _ => all_domains(d_count),
    };
    let mut masks: Option<Vec<DomainMask>> = match config.mode {
        Mode::FullShare | Mode::ExhaustiveOracle => None,
        _ => Some(build_mask(&subsets, &owners)?),
    };

    let total_train: usize = train_sizes.iter().sum();
    let steps_per_epoch = config
        .steps_per_epoch
        .unwrap_or_else(|| total_train.div_ceil(config.batch_size).max(1));

    let mut trace = Vec::new();
    let mut epochs = Vec::with_capacity(config.epochs);
    let mut best: Option<(f64, usize, Model, Vec<Subset>)> = None;
    let mut since_best = 0;
    let mut stopped_early = false;
    let mut iter: u64 = 0;

    for epoch in 0..config.epochs {
        let (mut ctr, mut rec, mut fin) = (0.0, 0.0, 0.0);
        for _ in 0..steps_per_epoch {
            let batch = sampler.next_batch(&parts.train);
            if let Some(sel) = selector.as_mut() {
                if sel.policy.fires(iter) {
                    let protos = model.prototypes(&batch, masks.as_deref())?;
                    let r = rewards(&model, parts, masks.as_deref(), config.reward)?;
                    trace.push(sel.round(iter, &protos, &r)?);
                    subsets = sel.current().to_vec();
                    masks = Some(build_mask(&subsets, &owners)?);
                }
            }
            let (l, _) =
                model.train_step(&batch, masks.as_deref(), config.gamma, config.learning_rate)?;
            ctr += l.ctr;
            rec += l.rec;
            fin += l.final_loss;
            iter += 1;
        }
        let n = steps_per_epoch as f64;
        let val = evaluate(
            &model,
            &parts.validation,
            masks.as_deref(),
            config.overall_mode,
        )?;
        epochs.push(EpochLog {
            epoch,
            steps: steps_per_epoch,
            l_ctr: ctr / n,
            l_rec: rec / n,
            l_final: fin / n,
            validation_auc: val.overall_auc,
            exploration: selector.as_ref().map_or(0.0, |s| s.policy.p),
        });
        if best.as_ref().is_none_or(|b| val.overall_auc > b.0) {
            best = Some((val.overall_auc, epoch, model.clone(), subsets.clone()));
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= config.patience {
                stopped_early = epoch + 1 < config.epochs;
                break;
            }
        }
    }

    let (_, best_epoch, best_model, best_subsets) = best.expect("at least one epoch ran");
    let best_masks = match config.mode {
        Mode::FullShare | Mode::ExhaustiveOracle => None,
        _ => Some(build_mask(&best_subsets, &owners)?),
    };
    let validation = evaluate(
        &best_model,
        &parts.validation,
        best_masks.as_deref(),
        config.overall_mode,
    )?;
    let test = evaluate(
        &best_model,
        &parts.test,
        best_masks.as_deref(),
        config.overall_mode,
    )?;
    let distances = distance_matrix(&probe_prototypes(
        &best_model,
        config,
        parts,
        best_masks.as_deref(),
    )?)?;

    let (final_subsets, value_table) = match &selector {
        Some(sel) => {
            let rankings: Vec<Vec<usize>> = match trace.last() {
                Some(r) => r.rankings.clone(),
                None => (0..d_count)
                    .map(|d| rank_domains(&distances, d))
                    .collect::<Result<_>>()?,
            };
            let finals = rankings
                .iter()
                .enumerate()
                .map(|(d, r)| Ok(greedy(d, &candidate_states(r)?, &sel.table).clone()))
                .collect::<Result<Vec<_>>>()?;
            let table = (0..d_count)
                .map(|d| {
                    sel.table
                        .entries(d)
                        .map(|(s, e)| ValueRow {
                            subset: s.clone(),
                            value: e.value,
                            count: e.count,
                        })
                        .collect()
                })
                .collect();
            (finals, table)
        }
        None => (best_subsets.clone(), vec![Vec::new(); d_count]),
    };

    let report = RunReport {
        seed: config.seed,
        mode: config.mode,
        config_hash: hex::encode(config.hash()),
        config: config.clone(),
        malformed_rows,
        partitions: PartitionSizes {
            train: train_sizes,
            validation: parts.validation.iter().map(Vec::len).collect(),
            test: parts.test.iter().map(Vec::len).collect(),
        },
        epochs,
        best_epoch,
        stopped_early,
        validation,
        test,
        active_subsets: best_subsets.clone(),
        final_subsets,
        distances,
        value_table,
        selection_trace: trace,
    };
    Ok(RunOutcome {
        report,
        model: best_model,
        subsets: best_subsets,
    })
}
