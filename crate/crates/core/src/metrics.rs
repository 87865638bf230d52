//! Spearman correlation with permutation significance, RMSE, and the
//! trial-level report aggregation.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::folds::FoldSpec;
use crate::ingest::{TrialMeta, OSATS_DIMS, OSATS_NAMES};

pub const DEFAULT_PERMUTATIONS: usize = 10_000;
pub const SIGNIFICANCE: f64 = 0.05;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("correlation undefined: constant input or fewer than 3 points")]
    DegenerateInput,
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("fold {0} has no test trials")]
    EmptyTestSet(String),
    #[error("test trial {0} has no window predictions")]
    MissingPredictions(String),
    #[error("trial {0} is not in the registry")]
    UnknownTrial(String),
}

/// Average ranks (1-based); tied values share the mean of their positions.
pub fn average_ranks(x: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..x.len()).collect();
    idx.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut ranks = vec![0.0; x.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && x[idx[j + 1]] == x[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Centered ranks and their sum of squares.
fn centered_ranks(x: &[f64]) -> Result<(Vec<f64>, f64), MetricsError> {
    let mut r = average_ranks(x);
    let mean = (x.len() as f64 + 1.0) / 2.0;
    for v in &mut r {
        *v -= mean;
    }
    let ss: f64 = r.iter().map(|v| v * v).sum();
    if ss == 0.0 {
        return Err(MetricsError::DegenerateInput);
    }
    Ok((r, ss))
}

fn check_pair(x: &[f64], y: &[f64]) -> Result<(), MetricsError> {
    if x.len() != y.len() {
        return Err(MetricsError::LengthMismatch(x.len(), y.len()));
    }
    if x.len() < 3 {
        return Err(MetricsError::DegenerateInput);
    }
    Ok(())
}

/// Pearson correlation of average ranks.
pub fn spearman_rho(x: &[f64], y: &[f64]) -> Result<f64, MetricsError> {
    check_pair(x, y)?;
    let (rx, sx) = centered_ranks(x)?;
    let (ry, sy) = centered_ranks(y)?;
    let dot: f64 = rx.iter().zip(&ry).map(|(a, b)| a * b).sum();
    Ok((dot / (sx * sy).sqrt()).clamp(-1.0, 1.0))
}

/// Two-sided Monte Carlo p-value, `(1 + #{|ρ*| ≥ |ρ|}) / (n_perm + 1)`.
///
/// Permutation `j` draws from its own ChaCha stream, so the result does not
/// depend on evaluation order.
pub fn permutation_pvalue(
    x: &[f64],
    y: &[f64],
    n_perm: usize,
    seed: u64,
) -> Result<f64, MetricsError> {
    check_pair(x, y)?;
    let (rx, sx) = centered_ranks(x)?;
    let (ry, sy) = centered_ranks(y)?;
    let norm = (sx * sy).sqrt();
    let stat = |perm: &[f64]| rx.iter().zip(perm).map(|(a, b)| a * b).sum::<f64>().abs() / norm;
    let observed = stat(&ry);
    // Guard against summation-order noise between equal statistics.
    let threshold = observed - 1e-12;
    let mut perm = ry.clone();
    let mut hits = 0usize;
    for j in 0..n_perm {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(j as u64);
        perm.copy_from_slice(&ry);
        perm.shuffle(&mut rng);
        if stat(&perm) >= threshold {
            hits += 1;
        }
    }
    Ok((1 + hits) as f64 / (n_perm + 1) as f64)
}

pub fn rmse(pred: &[f64], truth: &[f64]) -> Result<f64, MetricsError> {
    if pred.len() != truth.len() || pred.is_empty() {
        return Err(MetricsError::LengthMismatch(pred.len(), truth.len()));
    }
    let ss: f64 = pred.iter().zip(truth).map(|(p, t)| (p - t) * (p - t)).sum();
    Ok((ss / pred.len() as f64).sqrt())
}

/// Window-level predictions of one fold's model, keyed by trial id.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FoldPredictions {
    pub fold: String,
    pub windows: BTreeMap<String, Vec<[f64; OSATS_DIMS]>>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DimResult {
    /// `None` when the dimension is constant in truth or prediction.
    pub rho: Option<f64>,
    pub p_value: Option<f64>,
    pub significant: bool,
    pub rmse: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldEval {
    pub fold: String,
    pub trials: Vec<String>,
    pub truth: Vec<[f64; OSATS_DIMS]>,
    pub predicted: Vec<[f64; OSATS_DIMS]>,
    pub dims: Vec<DimResult>,
    pub rho_bar: Option<f64>,
    pub rmse_bar: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    /// Per dimension: mean ρ and RMSE over folds, p from a permutation test
    /// pooled over every test trial.
    pub dims: Vec<DimResult>,
    pub folds: Vec<FoldEval>,
    pub rho_bar: Option<f64>,
    pub rmse_bar: f64,
}

fn mean_some(values: impl IntoIterator<Item = Option<f64>>) -> Option<f64> {
    let v: Vec<f64> = values.into_iter().flatten().collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

fn mean(values: impl IntoIterator<Item = f64>) -> f64 {
    let v: Vec<f64> = values.into_iter().collect();
    v.iter().sum::<f64>() / v.len() as f64
}

fn column(rows: &[[f64; OSATS_DIMS]], d: usize) -> Vec<f64> {
    rows.iter().map(|r| r[d]).collect()
}

/// Reduces windows to per-trial means and scores each fold against the
/// registry labels.
pub fn aggregate_report(
    predictions: &[FoldPredictions],
    registry: &[TrialMeta],
    folds: &[FoldSpec],
    n_perm: usize,
    seed: u64,
) -> Result<EvalResult, MetricsError> {
    let labels: BTreeMap<&str, [f64; OSATS_DIMS]> = registry
        .iter()
        .map(|m| (m.trial_id.as_str(), m.target()))
        .collect();
    let mut fold_evals = Vec::new();
    for fold in folds {
        if fold.test.is_empty() {
            return Err(MetricsError::EmptyTestSet(fold.name.clone()));
        }
        let preds = predictions.iter().find(|p| p.fold == fold.name);
        let mut truth = Vec::new();
        let mut predicted = Vec::new();
        for id in &fold.test {
            let windows = preds
                .and_then(|p| p.windows.get(id))
                .filter(|w| !w.is_empty())
                .ok_or_else(|| MetricsError::MissingPredictions(id.clone()))?;
            truth.push(
                *labels
                    .get(id.as_str())
                    .ok_or_else(|| MetricsError::UnknownTrial(id.clone()))?,
            );
            let mut m = [0.0; OSATS_DIMS];
            for w in windows {
                for d in 0..OSATS_DIMS {
                    m[d] += w[d];
                }
            }
            predicted.push(m.map(|v| v / windows.len() as f64));
        }
        let dims: Vec<DimResult> = (0..OSATS_DIMS)
            .map(|d| {
                let (p, t) = (column(&predicted, d), column(&truth, d));
                DimResult {
                    rho: spearman_rho(&p, &t).ok(),
                    p_value: None,
                    significant: false,
                    rmse: rmse(&p, &t).expect("non-empty fold"),
                }
            })
            .collect();
        for (d, r) in dims.iter().enumerate() {
            if r.rho.is_none() {
                log::warn!(
                    "fold {}: {} is degenerate, excluded from mean rho",
                    fold.name,
                    OSATS_NAMES[d]
                );
            }
        }
        fold_evals.push(FoldEval {
            fold: fold.name.clone(),
            trials: fold.test.clone(),
            rho_bar: mean_some(dims.iter().map(|r| r.rho)),
            rmse_bar: mean(dims.iter().map(|r| r.rmse)),
            truth,
            predicted,
            dims,
        });
    }
    if fold_evals.is_empty() {
        return Err(MetricsError::EmptyTestSet(String::new()));
    }
    let dims = (0..OSATS_DIMS)
        .map(|d| {
            let pooled_p: Vec<f64> = fold_evals
                .iter()
                .flat_map(|f| column(&f.predicted, d))
                .collect();
            let pooled_t: Vec<f64> = fold_evals
                .iter()
                .flat_map(|f| column(&f.truth, d))
                .collect();
            let p_value =
                permutation_pvalue(&pooled_p, &pooled_t, n_perm, seed.wrapping_add(d as u64)).ok();
            DimResult {
                rho: mean_some(fold_evals.iter().map(|f| f.dims[d].rho)),
                p_value,
                significant: p_value.is_some_and(|p| p < SIGNIFICANCE),
                rmse: mean(fold_evals.iter().map(|f| f.dims[d].rmse)),
            }
        })
        .collect();
    Ok(EvalResult {
        dims,
        rho_bar: mean_some(fold_evals.iter().map(|f| f.rho_bar)),
        rmse_bar: mean(fold_evals.iter().map(|f| f.rmse_bar)),
        folds: fold_evals,
    })
}

fn fmt_rho(rho: Option<f64>) -> String {
    rho.map_or_else(|| "n/a".to_string(), |r| format!("{r:.3}"))
}

/// `ρ̄ | RMSĒ` cell, e.g. `0.898 | 0.431`.
pub fn pair_cell(result: &EvalResult) -> String {
    format!("{} | {:.3}", fmt_rho(result.rho_bar), result.rmse_bar)
}

/// `ρ | RMSE` cell with a `*` on significant correlations.
pub fn dim_cell(r: &DimResult) -> String {
    let star = if r.significant { "*" } else { "" };
    format!("{}{star} | {:.3}", fmt_rho(r.rho), r.rmse)
}

fn aligned(rows: &[Vec<String>]) -> String {
    let cols = rows.iter().map(Vec::len).max().unwrap_or(0);
    let widths: Vec<usize> = (0..cols)
        .map(|c| {
            rows.iter()
                .filter_map(|r| r.get(c))
                .map(|s| s.chars().count())
                .max()
                .unwrap_or(0)
        })
        .collect();
    let mut out = String::new();
    for row in rows {
        let cells: Vec<String> = row
            .iter()
            .enumerate()
            .map(|(c, s)| format!("{s:<w$}", w = widths[c]))
            .collect();
        out.push_str(cells.join("  ").trim_end());
        out.push('\n');
    }
    out
}

/// Per-criterion table: one row per model, one `ρ | RMSE` column per OSATS
/// criterion.
pub fn per_dimension_table(rows: &[(String, &EvalResult)]) -> String {
    let mut table = vec![std::iter::once(String::new())
        .chain(OSATS_NAMES.iter().map(|s| s.to_string()))
        .collect::<Vec<_>>()];
    for (label, r) in rows {
        table.push(
            std::iter::once(label.clone())
                .chain(r.dims.iter().map(dim_cell))
                .collect(),
        );
    }
    aligned(&table)
}

/// Aggregate table: one row per model, one `ρ̄ | RMSĒ` column per scheme.
pub fn aggregate_table(schemes: &[String], rows: &[(String, Vec<Option<&EvalResult>>)]) -> String {
    let mut table = vec![std::iter::once(String::new())
        .chain(schemes.iter().cloned())
        .collect::<Vec<_>>()];
    for (label, cells) in rows {
        table.push(
            std::iter::once(label.clone())
                .chain(
                    cells
                        .iter()
                        .map(|c| c.map_or_else(|| "-".to_string(), pair_cell)),
                )
                .collect(),
        );
    }
    aligned(&table)
}

/// Per-dimension rows followed by the aggregate row.
pub fn report_csv(label: &str, result: &EvalResult) -> String {
    let opt = |v: Option<f64>| v.map_or_else(String::new, |v| format!("{v}"));
    let mut out = String::from("model,criterion,rho,p_value,significant,rmse\n");
    for (d, r) in result.dims.iter().enumerate() {
        writeln!(
            out,
            "{label},{},{},{},{},{}",
            OSATS_NAMES[d],
            opt(r.rho),
            opt(r.p_value),
            r.significant,
            r.rmse
        )
        .unwrap();
    }
    writeln!(
        out,
        "{label},mean,{},,,{}",
        opt(result.rho_bar),
        result.rmse_bar
    )
    .unwrap();
    out
}
