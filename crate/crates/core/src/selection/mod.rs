//! Indicator subset selection.
//!
//! Each selector orders the 62 indicator columns by how informative they are
//! about backdoors on a configuration set; [`sweep_subset`] then picks the
//! shortest ranking prefix that reaches the best calibrated F1.

mod iforest;
mod logistic;
mod mutual_info;

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::calibration::{build_profile_scored, ConfigSet, ScoredConfig, FEATURIZATION};
use crate::detector::ClueProfile;
use crate::error::{Error, Result};
use crate::indicators::{IndicatorMatrix, INDICATOR_COUNT};
use crate::stats;

pub use iforest::{rank_by_iforest, IsolationForest1d, DEFAULT_SEED};
pub use logistic::{
    fit_logistic, l1_logistic_path, l1_survival_ranking, path_nesting_fraction, rfe_ranking,
    select_l1_logistic, select_rfe, L1PathPoint, LogisticFit, RfeOutcome, Standardized,
    L1_PATH_MAX, L1_PATH_MIN, L1_PATH_POINTS, MAX_ITERATIONS, RFE_L2_PENALTY, STEP_TOLERANCE,
};
pub use mutual_info::{
    equal_frequency_bins, mutual_information_bits, rank_by_mutual_info, MI_BINS,
};

/// Per-model scalar features (one per indicator) with binary labels.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureTable {
    pub rows: Vec<Vec<f64>>,
    /// `true` = backdoored.
    pub labels: Vec<bool>,
    pub featurization: String,
}

impl FeatureTable {
    pub fn new(rows: Vec<Vec<f64>>, labels: Vec<bool>) -> Result<Self> {
        if rows.len() != labels.len() {
            return Err(Error::LengthMismatch {
                left: rows.len(),
                right: labels.len(),
            });
        }
        if let Some(r) = rows.iter().find(|r| r.len() != INDICATOR_COUNT) {
            return Err(Error::Dimension(format!(
                "feature row has {} columns, expected {INDICATOR_COUNT}",
                r.len()
            )));
        }
        if rows.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::Dimension(
                "feature table has non-finite values".into(),
            ));
        }
        Ok(Self {
            rows,
            labels,
            featurization: FEATURIZATION.into(),
        })
    }

    pub fn n_features(&self) -> usize {
        INDICATOR_COUNT
    }

    pub fn column(&self, n: usize) -> Vec<f64> {
        self.rows.iter().map(|r| r[n]).collect()
    }

    pub(crate) fn require_both_labels(&self) -> Result<()> {
        let pos = self.labels.iter().filter(|&&l| l).count();
        if pos == 0 || pos == self.labels.len() {
            return Err(Error::DegenerateLabels);
        }
        Ok(())
    }
}

/// Max-minus-mean of a normalized column: how far the most suspicious class
/// stands above the class average.
pub fn prominence(column: &[f64]) -> f64 {
    let (_, hi) = stats::min_max(column);
    hi - stats::mean(column)
}

fn features_of(matrix: &IndicatorMatrix) -> Vec<f64> {
    (0..INDICATOR_COUNT)
        .map(|n| prominence(matrix.normalized_column(n)))
        .collect()
}

pub fn featurize(config: &ConfigSet) -> FeatureTable {
    featurize_scored(&ScoredConfig::new(config))
}

pub fn featurize_scored(scored: &ScoredConfig) -> FeatureTable {
    let mut rows: Vec<Vec<f64>> = scored.cleans.iter().map(features_of).collect();
    rows.extend(scored.backdoors.iter().map(|(m, _)| features_of(m)));
    let labels = std::iter::repeat_n(false, scored.cleans.len())
        .chain(std::iter::repeat_n(true, scored.backdoors.len()))
        .collect();
    FeatureTable::new(rows, labels).expect("featurization yields a well-formed table")
}

/// Indicator order (most informative first) with per-indicator scores
/// indexed by canonical id.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ranking {
    pub order: Vec<usize>,
    pub scores: Vec<f64>,
}

impl Ranking {
    /// Descending by score; ties keep the lower canonical index first.
    pub fn from_scores(scores: Vec<f64>) -> Self {
        let mut order: Vec<usize> = (0..scores.len()).collect();
        order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
        Self { order, scores }
    }

    pub fn position(&self, id: usize) -> Option<usize> {
        self.order.iter().position(|&n| n == id)
    }
}

/// Fraction of backdoored models whose most anomalous class in each column
/// is the true target.
pub fn rank_by_accuracy(config: &ConfigSet) -> Result<Ranking> {
    rank_by_accuracy_scored(&ScoredConfig::new(config))
}

pub fn rank_by_accuracy_scored(scored: &ScoredConfig) -> Result<Ranking> {
    if scored.backdoors.is_empty() {
        return Err(Error::NoBackdoorModels);
    }
    let total = scored.backdoors.len() as f64;
    let scores = (0..INDICATOR_COUNT)
        .map(|n| {
            let hits = scored
                .backdoors
                .iter()
                .filter(|(m, t)| stats::argmax(m.normalized_column(n)) == *t)
                .count();
            hits as f64 / total
        })
        .collect();
    Ok(Ranking::from_scores(scores))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SelectionMethod {
    Acc,
    Mi,
    L1lr,
    Rfe,
    Iforest,
    All,
    Topk,
}

impl SelectionMethod {
    pub fn name(self) -> &'static str {
        match self {
            SelectionMethod::Acc => "acc",
            SelectionMethod::Mi => "mi",
            SelectionMethod::L1lr => "l1lr",
            SelectionMethod::Rfe => "rfe",
            SelectionMethod::Iforest => "iforest",
            SelectionMethod::All => "all",
            SelectionMethod::Topk => "topk",
        }
    }
}

impl fmt::Display for SelectionMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SelectionMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        use SelectionMethod::*;
        [Acc, Mi, L1lr, Rfe, Iforest, All, Topk]
            .into_iter()
            .find(|m| m.name().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| Error::InvalidSpec(format!("unknown selection method {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionResult {
    pub method: SelectionMethod,
    pub ranking: Vec<usize>,
    pub chosen: Vec<usize>,
    pub n: usize,
    pub f1: f64,
    pub lambda: f64,
    /// Calibrated F1 of each ranking prefix, index `N - 1`; empty when no sweep ran.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub curve: Vec<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub notes: Vec<String>,
}

/// Fits every ranking prefix and returns the smallest `N` at the best F1.
pub fn sweep_subset(config: &ConfigSet, ranking: &[usize]) -> Result<SelectionResult> {
    sweep_subset_scored(&ScoredConfig::new(config), ranking, SelectionMethod::Acc)
}

pub fn sweep_subset_scored(
    scored: &ScoredConfig,
    ranking: &[usize],
    method: SelectionMethod,
) -> Result<SelectionResult> {
    validate_ranking(ranking)?;
    let fits = (1..=ranking.len())
        .into_par_iter()
        .map(|n| scored.fit(&ranking[..n]).map(|(_, fit)| fit))
        .collect::<Result<Vec<_>>>()?;
    let mut best = 0;
    for (i, fit) in fits.iter().enumerate() {
        if fit.f1 > fits[best].f1 {
            best = i;
        }
    }
    Ok(SelectionResult {
        method,
        ranking: ranking.to_vec(),
        chosen: ranking[..=best].to_vec(),
        n: best + 1,
        f1: fits[best].f1,
        lambda: fits[best].lambda,
        curve: fits.iter().map(|f| f.f1).collect(),
        notes: Vec::new(),
    })
}

fn validate_ranking(ranking: &[usize]) -> Result<()> {
    if ranking.is_empty() {
        return Err(Error::EmptySelection);
    }
    let mut seen = [false; INDICATOR_COUNT];
    for &n in ranking {
        if n >= INDICATOR_COUNT {
            return Err(Error::UnknownIndicatorId(n));
        }
        if std::mem::replace(&mut seen[n], true) {
            return Err(Error::DuplicateIndicatorId(n));
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SelectOptions {
    pub method: SelectionMethod,
    /// Fixed subset size; `None` sweeps for the best prefix.
    pub n: Option<usize>,
    pub seed: u64,
}

impl Default for SelectOptions {
    fn default() -> Self {
        Self {
            method: SelectionMethod::All,
            n: None,
            seed: DEFAULT_SEED,
        }
    }
}

/// Runs one selector end to end and builds the resulting profile.
pub fn select(config: &ConfigSet, opts: SelectOptions) -> Result<(SelectionResult, ClueProfile)> {
    let scored = ScoredConfig::new(config);
    if let Some(n) = opts.n {
        if n == 0 || n > INDICATOR_COUNT {
            return Err(Error::InvalidSpec(format!("n = {n} not in [1, 62]")));
        }
    }
    let identity: Vec<usize> = (0..INDICATOR_COUNT).collect();
    let mut notes = Vec::new();
    let ranking = match opts.method {
        SelectionMethod::All => identity.clone(),
        SelectionMethod::Acc | SelectionMethod::Topk => rank_by_accuracy_scored(&scored)?.order,
        SelectionMethod::Mi => rank_by_mutual_info(&featurize_scored(&scored))?.order,
        SelectionMethod::Iforest => rank_by_iforest(&featurize_scored(&scored), opts.seed)?.order,
        SelectionMethod::Rfe => {
            let outcome = rfe_ranking(&featurize_scored(&scored))?;
            if !outcome.converged {
                notes.push("logistic fit hit the iteration cap during RFE".into());
            }
            outcome.ranking
        }
        SelectionMethod::L1lr => {
            let path = select_l1_logistic(&featurize_scored(&scored), &scored)?;
            if path.iter().any(|p| !p.converged) {
                notes.push("logistic fit hit the iteration cap on the L1 path".into());
            }
            notes.push(format!(
                "L1 path support nesting fraction {:.3}",
                path_nesting_fraction(&path)
            ));
            l1_survival_ranking(&path)
        }
    };

    let mut result = match (opts.method, opts.n) {
        (SelectionMethod::All, _) => fixed_subset(&scored, opts.method, &ranking, identity)?,
        (SelectionMethod::Topk, None) => {
            return Err(Error::InvalidSpec("topk selection requires n".into()))
        }
        (SelectionMethod::Rfe, Some(n)) => {
            let outcome = select_rfe(&featurize_scored(&scored), n)?;
            fixed_subset(&scored, opts.method, &ranking, outcome.chosen)?
        }
        (_, Some(n)) => fixed_subset(&scored, opts.method, &ranking, ranking[..n].to_vec())?,
        (_, None) => sweep_subset_scored(&scored, &ranking, opts.method)?,
    };
    result.notes.extend(notes);
    let profile = build_profile_scored(config, &scored, &result.chosen, opts.method.name())?
        .with_meta_entry("selection_n", result.n.to_string());
    Ok((result, profile))
}

fn fixed_subset(
    scored: &ScoredConfig,
    method: SelectionMethod,
    ranking: &[usize],
    chosen: Vec<usize>,
) -> Result<SelectionResult> {
    let (_, fit) = scored.fit(&chosen)?;
    Ok(SelectionResult {
        method,
        ranking: ranking.to_vec(),
        n: chosen.len(),
        chosen,
        f1: fit.f1,
        lambda: fit.lambda,
        curve: Vec::new(),
        notes: Vec::new(),
    })
}
