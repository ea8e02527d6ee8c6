//! AUC and LogLoss, per domain and overall.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::PROB_EPS;

/// Area under the ROC curve via the Mann-Whitney rank sum. Tied scores share
/// their average rank, which credits tied positive/negative pairs with 0.5.
pub fn auc(scores: &[f64], labels: &[f64]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::Usage(format!(
            "{} scores vs {} labels",
            scores.len(),
            labels.len()
        )));
    }
    let positives = labels.iter().filter(|&&y| y == 1.0).count();
    if labels.iter().any(|&y| y != 0.0 && y != 1.0) {
        return Err(Error::Usage("labels must be 0 or 1".into()));
    }
    let negatives = labels.len() - positives;
    if positives == 0 || negatives == 0 {
        return Err(Error::UndefinedMetric(format!(
            "auc needs both classes ({positives} positives, {negatives} negatives)"
        )));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::NonFinite {
            name: "scores".into(),
        });
    }

    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));

    let mut positive_rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i + 1;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            j += 1;
        }
        // Ranks i+1 ..= j share their mean.
        let avg_rank = (i + 1 + j) as f64 / 2.0;
        let tied_pos = order[i..j].iter().filter(|&&k| labels[k] == 1.0).count();
        positive_rank_sum += avg_rank * tied_pos as f64;
        i = j;
    }
    let (p, n) = (positives as f64, negatives as f64);
    Ok((positive_rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

/// Mean binary cross-entropy with scores clamped to `[1e-7, 1 - 1e-7]`.
pub fn logloss(scores: &[f64], labels: &[f64]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::Usage(format!(
            "{} scores vs {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if scores.is_empty() {
        return Err(Error::Usage("logloss of an empty set".into()));
    }
    let total: f64 = scores
        .iter()
        .zip(labels)
        .map(|(&s, &y)| {
            let c = s.clamp(PROB_EPS, 1.0 - PROB_EPS);
            -(y * c.ln() + (1.0 - y) * (1.0 - c).ln())
        })
        .sum();
    Ok(total / scores.len() as f64)
}

/// How per-domain predictions combine into the overall figure.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OverallMode {
    /// Metrics over the concatenation of all domains' predictions.
    #[default]
    Pooled,
    /// Per-domain metrics averaged with weights proportional to sample counts.
    WeightedMean,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainMetrics {
    pub domain: usize,
    pub samples: usize,
    pub auc: f64,
    pub logloss: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub domains: Vec<DomainMetrics>,
    pub overall_auc: f64,
    pub overall_logloss: f64,
    pub overall_mode: OverallMode,
}

impl MetricReport {
    pub fn domain_auc(&self, domain: usize) -> Option<f64> {
        self.domains
            .iter()
            .find(|m| m.domain == domain)
            .map(|m| m.auc)
    }
}

/// Builds the report from per-domain `(scores, labels)` pairs.
pub fn report_from_predictions(
    per_domain: &[(Vec<f64>, Vec<f64>)],
    mode: OverallMode,
) -> Result<MetricReport> {
    if per_domain.is_empty() {
        return Err(Error::Usage("no domains to report".into()));
    }
    let mut domains = Vec::with_capacity(per_domain.len());
    for (d, (scores, labels)) in per_domain.iter().enumerate() {
        let wrap = |e: Error| Error::DomainMetric {
            domain: d,
            source: Box::new(e),
        };
        if scores.is_empty() {
            return Err(wrap(Error::Usage("empty partition".into())));
        }
        domains.push(DomainMetrics {
            domain: d,
            samples: scores.len(),
            auc: auc(scores, labels).map_err(wrap)?,
            logloss: logloss(scores, labels).map_err(wrap)?,
        });
    }
    let (overall_auc, overall_logloss) = match mode {
        OverallMode::Pooled => {
            let scores: Vec<f64> = per_domain
                .iter()
                .flat_map(|p| p.0.iter().copied())
                .collect();
            let labels: Vec<f64> = per_domain
                .iter()
                .flat_map(|p| p.1.iter().copied())
                .collect();
            (auc(&scores, &labels)?, logloss(&scores, &labels)?)
        }
        OverallMode::WeightedMean => {
            let total: f64 = domains.iter().map(|m| m.samples as f64).sum();
            let w = |f: fn(&DomainMetrics) -> f64| {
                domains.iter().map(|m| f(m) * m.samples as f64).sum::<f64>() / total
            };
            (w(|m| m.auc), w(|m| m.logloss))
        }
    };
    Ok(MetricReport {
        domains,
        overall_auc,
        overall_logloss,
        overall_mode: mode,
    })
}
