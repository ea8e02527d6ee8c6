//! Multi-run harnesses: leave-one-domain-out transfer and the exhaustive
//! subset oracle. Runs fan out over rayon and are merged in run order.

use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::{Mode, RunConfig};
use super::train::{all_domains, prepare, train_on};
use crate::data::Partitions;
use crate::error::{Error, Result};
use crate::selection::{subsets_containing, Subset};

/// Largest domain count the exhaustive oracle accepts.
pub const ORACLE_MAX_DOMAINS: usize = 4;
/// Largest dataset the exhaustive oracle accepts.
pub const ORACLE_MAX_SAMPLES: usize = 10_000;

fn fixed(config: &RunConfig, subsets: Vec<Subset>) -> RunConfig {
    let mut cfg = config.clone();
    cfg.mode = Mode::FixedSubset;
    cfg.subsets = Some(subsets);
    cfg
}

fn validation_aucs(
    configs: &[RunConfig],
    parts: &Partitions,
    malformed: usize,
) -> Result<Vec<Vec<f64>>> {
    configs
        .par_iter()
        .map(|cfg| {
            let out = train_on(cfg, parts, malformed, None)?;
            Ok(out
                .report
                .validation
                .domains
                .iter()
                .map(|m| m.auc)
                .collect())
        })
        .collect()
}

/// `entry[i][j] = AUC_i(without j) - AUC_i(full)`; the diagonal is `None`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransferMatrix {
    pub full: Vec<f64>,
    pub entries: Vec<Vec<Option<f64>>>,
}

impl TransferMatrix {
    pub fn get(&self, i: usize, j: usize) -> Option<f64> {
        self.entries[i][j]
    }

    /// Same layout as the distance-matrix CSV, blank on the diagonal.
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        let d = self.entries.len();
        let header: Vec<String> = (0..d).map(|j| j.to_string()).collect();
        writeln!(w, "from\\to,{}", header.join(","))?;
        for (i, row) in self.entries.iter().enumerate() {
            let cells: Vec<String> = row
                .iter()
                .map(|v| v.map_or_else(String::new, |x| format!("{x:.6}")))
                .collect();
            writeln!(w, "{i},{}", cells.join(","))?;
        }
        Ok(())
    }
}

/// Subsets with `removed` dropped from every other domain's set.
pub fn without_domain(domains: usize, removed: usize) -> Vec<Subset> {
    (0..domains)
        .map(|i| (0..domains).filter(|&k| k == i || k != removed).collect())
        .collect()
}

pub fn transfer_matrix(config: &RunConfig, base: Option<&Path>) -> Result<TransferMatrix> {
    if config.domains < 2 {
        return Err(Error::Usage(
            "a transfer matrix needs at least two domains".into(),
        ));
    }
    let (parts, malformed) = prepare(config, base)?;
    transfer_matrix_on(config, &parts, malformed)
}

pub fn transfer_matrix_on(
    config: &RunConfig,
    parts: &Partitions,
    malformed: usize,
) -> Result<TransferMatrix> {
    let d = config.domains;
    if d < 2 {
        return Err(Error::Usage(
            "a transfer matrix needs at least two domains".into(),
        ));
    }
    let mut configs = vec![fixed(config, all_domains(d))];
    configs.extend((0..d).map(|j| fixed(config, without_domain(d, j))));
    let aucs = validation_aucs(&configs, parts, malformed)?;
    let full = aucs[0].clone();
    let entries = (0..d)
        .map(|i| {
            (0..d)
                .map(|j| (i != j).then(|| aucs[j + 1][i] - full[i]))
                .collect()
        })
        .collect();
    Ok(TransferMatrix { full, entries })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OracleEntry {
    pub subset: Subset,
    pub validation_auc: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OracleReport {
    /// Every subset containing the domain, with the AUC it reached.
    pub table: Vec<Vec<OracleEntry>>,
    pub best: Vec<OracleEntry>,
    pub runs: usize,
}

impl OracleReport {
    pub fn auc_of(&self, domain: usize, subset: &[usize]) -> Option<f64> {
        self.table[domain]
            .iter()
            .find(|e| e.subset == subset)
            .map(|e| e.validation_auc)
    }
}

pub fn check_oracle_guard(config: &RunConfig, samples: usize) -> Result<()> {
    if config.domains > ORACLE_MAX_DOMAINS {
        return Err(Error::GuardRail(format!(
            "exhaustive search over {} domains is refused (limit {ORACLE_MAX_DOMAINS})",
            config.domains
        )));
    }
    if samples > ORACLE_MAX_SAMPLES {
        return Err(Error::GuardRail(format!(
            "exhaustive search over {samples} samples is refused (limit {ORACLE_MAX_SAMPLES})"
        )));
    }
    Ok(())
}

pub fn exhaustive_oracle(config: &RunConfig, base: Option<&Path>) -> Result<OracleReport> {
    if config.domains > ORACLE_MAX_DOMAINS {
        check_oracle_guard(config, 0)?;
    }
    if let Some(n) = config.dataset.total_samples() {
        check_oracle_guard(config, n)?;
    }
    let (parts, malformed) = prepare(config, base)?;
    exhaustive_oracle_on(config, &parts, malformed)
}

/// Run `k` gives every domain its `k`-th subset, so `2^(D-1)` runs cover
/// every subset of every domain.
pub fn exhaustive_oracle_on(
    config: &RunConfig,
    parts: &Partitions,
    malformed: usize,
) -> Result<OracleReport> {
    let d = config.domains;
    let samples: usize = [&parts.train, &parts.validation, &parts.test]
        .iter()
        .flat_map(|p| p.iter().map(Vec::len))
        .sum();
    check_oracle_guard(config, samples)?;
    let per_domain: Vec<Vec<Subset>> = (0..d).map(|i| subsets_containing(i, d)).collect();
    let runs = 1usize << (d - 1);
    let configs: Vec<RunConfig> = (0..runs)
        .map(|k| fixed(config, per_domain.iter().map(|s| s[k].clone()).collect()))
        .collect();
    let aucs = validation_aucs(&configs, parts, malformed)?;
    let table: Vec<Vec<OracleEntry>> = (0..d)
        .map(|i| {
            (0..runs)
                .map(|k| OracleEntry {
                    subset: per_domain[i][k].clone(),
                    validation_auc: aucs[k][i],
                })
                .collect()
        })
        .collect();
    let best = table
        .iter()
        .map(|rows| {
            rows.iter()
                .fold(None::<&OracleEntry>, |acc, e| match acc {
                    Some(b) if b.validation_auc >= e.validation_auc => Some(b),
                    _ => Some(e),
                })
                .expect("at least one subset")
                .clone()
        })
        .collect();
    Ok(OracleReport { table, best, runs })
}
