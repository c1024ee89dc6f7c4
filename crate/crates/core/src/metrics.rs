//! Ranking metrics over per-user candidate sets (one positive, N negatives)
//! and their aggregation across folds and seeds.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UserEvalRecord {
    pub user_id: String,
    pub positive_item: String,
    pub positive_score: f64,
    pub negative_items: Vec<String>,
    pub negative_scores: Vec<f64>,
    /// 1-based rank of the positive; ties go to the smaller item id.
    pub rank: usize,
}

impl UserEvalRecord {
    pub fn from_scores(user_id: &str, positive: (&str, f64), negatives: &[(String, f64)]) -> Result<Self> {
        let (positive_item, positive_score) = positive;
        if negatives.is_empty() {
            return Err(Error::Data(format!("user {user_id} has no negative candidates")));
        }
        if !positive_score.is_finite() || negatives.iter().any(|(_, s)| !s.is_finite()) {
            return Err(Error::Data(format!("user {user_id} has a non-finite score")));
        }
        if negatives.iter().any(|(id, _)| id == positive_item) {
            return Err(Error::Data(format!("user {user_id}: positive {positive_item} is also a negative")));
        }
        let ahead = negatives
            .iter()
            .filter(|(id, s)| *s > positive_score || (*s == positive_score && id.as_str() < positive_item))
            .count();
        Ok(UserEvalRecord {
            user_id: user_id.to_string(),
            positive_item: positive_item.to_string(),
            positive_score,
            negative_items: negatives.iter().map(|(id, _)| id.clone()).collect(),
            negative_scores: negatives.iter().map(|(_, s)| *s).collect(),
            rank: ahead + 1,
        })
    }

    pub fn candidates(&self) -> usize {
        self.negative_scores.len() + 1
    }
}

/// Share of negatives scored strictly below the positive, ties counting half.
pub fn auc_per_user(record: &UserEvalRecord) -> f64 {
    let mut scores = record.negative_scores.clone();
    scores.sort_by(f64::total_cmp);
    let pos = record.positive_score;
    let below = scores.partition_point(|s| *s < pos);
    let not_above = scores.partition_point(|s| *s <= pos);
    let ties = not_above - below;
    (below as f64 + 0.5 * ties as f64) / scores.len() as f64
}

pub fn hit_rate_at_k(record: &UserEvalRecord, k: usize) -> f64 {
    if record.rank <= k {
        1.0
    } else {
        0.0
    }
}

pub fn mrr_at_k(record: &UserEvalRecord, k: usize) -> f64 {
    if record.rank <= k {
        1.0 / record.rank as f64
    } else {
        0.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldMetrics {
    pub seed: u64,
    pub fold: usize,
    pub users: usize,
    pub auc: f64,
    pub hr_at_k: f64,
    pub mrr_at_k: f64,
}

/// Per-fold means over users.
pub fn evaluate(seed: u64, fold: usize, records: &[UserEvalRecord], k: usize) -> Result<FoldMetrics> {
    if records.is_empty() {
        return Err(Error::Data(format!("fold {fold} (seed {seed}) has no complete users")));
    }
    if let Some(r) = records.iter().find(|r| k < 1 || k > r.candidates()) {
        return Err(Error::Config(format!(
            "k={k} must be between 1 and the candidate count {} (user {})",
            r.candidates(),
            r.user_id
        )));
    }
    let n = records.len() as f64;
    let mean = |f: &dyn Fn(&UserEvalRecord) -> f64| records.iter().map(f).sum::<f64>() / n;
    Ok(FoldMetrics {
        seed,
        fold,
        users: records.len(),
        auc: mean(&auc_per_user),
        hr_at_k: mean(&|r| hit_rate_at_k(r, k)),
        mrr_at_k: mean(&|r| mrr_at_k(r, k)),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub mean: f64,
    /// 95% two-sided t interval half-width; absent with fewer than two folds.
    pub half_width: Option<f64>,
}

impl MetricSummary {
    pub fn from_values(values: &[f64]) -> Self {
        let n = values.len();
        let mean = values.iter().sum::<f64>() / n as f64;
        let half_width = (n >= 2).then(|| {
            let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
            if var == 0.0 {
                return 0.0;
            }
            let t = StudentsT::new(0.0, 1.0, (n - 1) as f64)
                .expect("degrees of freedom are positive")
                .inverse_cdf(0.975);
            t * (var / n as f64).sqrt()
        });
        MetricSummary { mean, half_width }
    }
}

/// Settings that identify what an evaluation measured.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportConfig {
    pub summarize_mode: String,
    pub preference_mode: String,
    pub block_size: usize,
    pub summary_length: usize,
    pub seeds: Vec<u64>,
    pub fingerprint: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub k: usize,
    pub config: ReportConfig,
    pub per_fold: Vec<FoldMetrics>,
    pub auc: MetricSummary,
    pub hr_at_k: MetricSummary,
    pub mrr_at_k: MetricSummary,
}

/// Unweighted mean of fold means, with t-based half-widths.
pub fn aggregate(mut per_fold: Vec<FoldMetrics>, k: usize, config: ReportConfig) -> Result<EvalReport> {
    if per_fold.is_empty() {
        return Err(Error::Data("no folds to aggregate".into()));
    }
    per_fold.sort_by_key(|f| (f.seed, f.fold));
    let column = |f: fn(&FoldMetrics) -> f64| per_fold.iter().map(f).collect::<Vec<_>>();
    Ok(EvalReport {
        k,
        config,
        auc: MetricSummary::from_values(&column(|f| f.auc)),
        hr_at_k: MetricSummary::from_values(&column(|f| f.hr_at_k)),
        mrr_at_k: MetricSummary::from_values(&column(|f| f.mrr_at_k)),
        per_fold,
    })
}

impl EvalReport {
    /// Aligned plain-text table; values in [0,1] with the x100 form beside them.
    pub fn to_table(&self) -> String {
        let k = self.k;
        let cell = |v: f64| format!("{v:.4} ({:6.2})", v * 100.0);
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:>6} {:>5} {:>6}  {:<16} {:<16} {:<16}",
            "seed", "fold", "users", "AUC", format!("HR@{k}"), format!("MRR@{k}")
        );
        for f in &self.per_fold {
            let _ = writeln!(
                out,
                "{:>6} {:>5} {:>6}  {:<16} {:<16} {:<16}",
                f.seed,
                f.fold,
                f.users,
                cell(f.auc),
                cell(f.hr_at_k),
                cell(f.mrr_at_k)
            );
        }
        let summary = |m: &MetricSummary| match m.half_width {
            Some(h) => format!("{:.4} ± {h:.4}", m.mean),
            None => format!("{:.4}", m.mean),
        };
        let _ = writeln!(
            out,
            "{:>20}  {:<16} {:<16} {:<16}",
            "mean (95% CI)",
            summary(&self.auc),
            summary(&self.hr_at_k),
            summary(&self.mrr_at_k)
        );
        let _ = writeln!(
            out,
            "{:>20}  {:<16.2} {:<16.2} {:<16.2}",
            "mean x100",
            self.auc.mean * 100.0,
            self.hr_at_k.mean * 100.0,
            self.mrr_at_k.mean * 100.0
        );
        out
    }
}
