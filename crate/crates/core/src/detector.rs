//! Model-level verdicts and target-class identification.
//!
//! A model's per-class anomaly score is the mean of its selected normalized
//! indicator columns. The model is flagged when the cosine similarity between
//! that score and a clean reference score falls below the profile threshold;
//! the flagged target is the class with the largest score.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::{Duration, Instant};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fsio::write_atomic;
use crate::indicators::{compute_indicator_matrix, IndicatorMatrix, INDICATOR_COUNT};
use crate::params::FinalLayerParams;
use crate::stats;

pub const PROFILE_VERSION: u32 = 1;

/// Default cutoff for the reference-free batch mode.
pub const DEFAULT_Z_THRESHOLD: f64 = 2.0;

/// Meta key set on a report whose score vector has zero norm.
pub const DEGENERATE_META_KEY: &str = "degenerate";

/// Sorts a selection and rejects unknown, duplicate, or empty id lists.
pub fn canonical_selection(ids: &[usize]) -> Result<Vec<usize>> {
    if ids.is_empty() {
        return Err(Error::EmptySelection);
    }
    let mut sorted = ids.to_vec();
    sorted.sort_unstable();
    for w in sorted.windows(2) {
        if w[0] == w[1] {
            return Err(Error::DuplicateIndicatorId(w[0]));
        }
    }
    if let Some(&bad) = sorted.iter().find(|&&n| n >= INDICATOR_COUNT) {
        return Err(Error::UnknownIndicatorId(bad));
    }
    Ok(sorted)
}

/// Calibrated detector configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClueProfile {
    version: u32,
    k: usize,
    indicator_ids: Vec<usize>,
    lambda: f64,
    clean_reference: Vec<f64>,
    #[serde(default)]
    meta: BTreeMap<String, String>,
}

impl ClueProfile {
    pub fn new(
        indicator_ids: &[usize],
        lambda: f64,
        clean_reference: Vec<f64>,
        meta: BTreeMap<String, String>,
    ) -> Result<Self> {
        let profile = Self {
            version: PROFILE_VERSION,
            k: clean_reference.len(),
            indicator_ids: canonical_selection(indicator_ids)?,
            lambda,
            clean_reference,
            meta,
        };
        profile.validate()?;
        Ok(profile)
    }

    fn validate(&self) -> Result<()> {
        if self.version != PROFILE_VERSION {
            return Err(Error::InvalidProfile(format!(
                "unsupported profile version {}",
                self.version
            )));
        }
        if self.k < 2 {
            return Err(Error::InvalidProfile(format!(
                "k = {}, need k >= 2",
                self.k
            )));
        }
        let canonical = canonical_selection(&self.indicator_ids)?;
        if canonical != self.indicator_ids {
            return Err(Error::InvalidProfile(
                "indicator_ids must be strictly ascending".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::InvalidProfile(format!(
                "lambda {} outside [0, 1]",
                self.lambda
            )));
        }
        if self.clean_reference.len() != self.k {
            return Err(Error::InvalidProfile(format!(
                "clean_reference has {} entries, k = {}",
                self.clean_reference.len(),
                self.k
            )));
        }
        if let Some(v) = self
            .clean_reference
            .iter()
            .find(|v| !(0.0..=1.0).contains(*v))
        {
            return Err(Error::InvalidProfile(format!(
                "clean_reference entry {v} outside [0, 1]"
            )));
        }
        Ok(())
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn indicator_ids(&self) -> &[usize] {
        &self.indicator_ids
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn clean_reference(&self) -> &[f64] {
        &self.clean_reference
    }

    pub fn meta(&self) -> &BTreeMap<String, String> {
        &self.meta
    }

    pub fn with_lambda(mut self, lambda: f64) -> Result<Self> {
        self.lambda = lambda;
        self.validate()?;
        Ok(self)
    }

    pub fn with_meta_entry(mut self, key: impl Into<String>, value: impl Into<String>) -> Self {
        self.meta.insert(key.into(), value.into());
        self
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("profile serializes")
    }

    pub fn from_json(bytes: &[u8]) -> Result<Self> {
        let profile: Self = serde_json::from_slice(bytes)
            .map_err(|e| Error::InvalidProfile(format!("invalid profile JSON: {e}")))?;
        profile.validate()?;
        Ok(profile)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read(path)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_atomic(path.as_ref(), self.to_json().as_bytes())?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DetectionReport {
    pub score: Vec<f64>,
    pub similarity: f64,
    pub is_backdoored: bool,
    pub target_class: Option<usize>,
    pub elapsed: Duration,
    pub profile_meta: BTreeMap<String, String>,
}

/// Per-class mean of the selected normalized indicator columns.
pub fn anomaly_score(matrix: &IndicatorMatrix, indicator_ids: &[usize]) -> Result<Vec<f64>> {
    let ids = canonical_selection(indicator_ids)?;
    Ok(score_unchecked(matrix, &ids))
}

/// `ids` must already be canonical.
pub(crate) fn score_unchecked(matrix: &IndicatorMatrix, ids: &[usize]) -> Vec<f64> {
    let mut score = vec![0.0; matrix.k()];
    for &n in ids {
        for (s, v) in score.iter_mut().zip(matrix.normalized_column(n)) {
            *s += v;
        }
    }
    let n = ids.len() as f64;
    score.iter_mut().for_each(|s| *s /= n);
    score
}

/// Cosine similarity; zero when either vector has zero norm.
pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::LengthMismatch {
            left: a.len(),
            right: b.len(),
        });
    }
    Ok(cosine_unchecked(a, b))
}

pub(crate) fn cosine_unchecked(a: &[f64], b: &[f64]) -> f64 {
    let (mut ab, mut aa, mut bb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        ab += x * y;
        aa += x * x;
        bb += y * y;
    }
    if aa == 0.0 || bb == 0.0 {
        return 0.0;
    }
    (ab / (aa.sqrt() * bb.sqrt())).clamp(-1.0, 1.0)
}

/// The threshold test shared by detection and calibration.
pub(crate) fn is_flagged(similarity: f64, lambda: f64) -> bool {
    similarity < lambda
}

pub fn detect(params: &FinalLayerParams, profile: &ClueProfile) -> Result<DetectionReport> {
    if params.k() != profile.k {
        return Err(Error::ClassCountMismatch {
            expected: profile.k,
            found: params.k(),
        });
    }
    let start = Instant::now();
    let matrix = compute_indicator_matrix(params);
    let mut report = detect_matrix(&matrix, profile)?;
    report.elapsed = start.elapsed();
    Ok(report)
}

/// Verdict for an already computed indicator matrix. `elapsed` covers only
/// this call.
pub fn detect_matrix(matrix: &IndicatorMatrix, profile: &ClueProfile) -> Result<DetectionReport> {
    if matrix.k() != profile.k {
        return Err(Error::ClassCountMismatch {
            expected: profile.k,
            found: matrix.k(),
        });
    }
    let start = Instant::now();
    let score = score_unchecked(matrix, &profile.indicator_ids);
    let similarity = cosine_unchecked(&score, &profile.clean_reference);
    let is_backdoored = is_flagged(similarity, profile.lambda);
    let target_class = is_backdoored.then(|| stats::argmax(&score));
    let elapsed = start.elapsed();

    let mut profile_meta = profile.meta.clone();
    if score.iter().all(|&s| s == 0.0) {
        profile_meta.insert(DEGENERATE_META_KEY.into(), "zero-norm anomaly score".into());
    }
    Ok(DetectionReport {
        score,
        similarity,
        is_backdoored,
        target_class,
        elapsed,
        profile_meta,
    })
}

/// Serialized per-model scan result.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRecord {
    pub path: String,
    pub is_backdoored: bool,
    pub similarity: f64,
    pub lambda: f64,
    pub target_class: Option<usize>,
    pub score: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub elapsed_us: Option<u64>,
    pub profile_meta: BTreeMap<String, String>,
}

impl ReportRecord {
    pub fn new(path: &str, report: &DetectionReport, lambda: f64, with_timing: bool) -> Self {
        Self {
            path: path.to_string(),
            is_backdoored: report.is_backdoored,
            similarity: report.similarity,
            lambda,
            target_class: report.target_class,
            score: report.score.clone(),
            elapsed_us: with_timing.then_some(report.elapsed.as_micros() as u64),
            profile_meta: report.profile_meta.clone(),
        }
    }
}

/// One row of a reference-free batch scan.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceFreeRow {
    pub index: usize,
    pub mean_similarity: f64,
    pub z_score: f64,
    pub flagged: bool,
}

/// Flags models whose mean score similarity to the rest of the batch is a
/// low outlier (`z < -z_threshold`).
pub fn detect_reference_free(
    batch: &[FinalLayerParams],
    indicator_ids: &[usize],
    z_threshold: f64,
) -> Result<Vec<ReferenceFreeRow>> {
    const MIN_BATCH: usize = 3;
    if batch.len() < MIN_BATCH {
        return Err(Error::BatchTooSmall {
            found: batch.len(),
            required: MIN_BATCH,
        });
    }
    let k = batch[0].k();
    if let Some(p) = batch.iter().find(|p| p.k() != k) {
        return Err(Error::ClassCountMismatch {
            expected: k,
            found: p.k(),
        });
    }
    let ids = canonical_selection(indicator_ids)?;
    let scores: Vec<Vec<f64>> = batch
        .par_iter()
        .map(|p| score_unchecked(&compute_indicator_matrix(p), &ids))
        .collect();
    Ok(reference_free_from_scores(&scores, z_threshold))
}

pub fn reference_free_from_scores(scores: &[Vec<f64>], z_threshold: f64) -> Vec<ReferenceFreeRow> {
    let m = scores.len();
    let mut sums = vec![0.0; m];
    for i in 0..m {
        for j in (i + 1)..m {
            let s = cosine_unchecked(&scores[i], &scores[j]);
            sums[i] += s;
            sums[j] += s;
        }
    }
    let means: Vec<f64> = sums.iter().map(|s| s / (m - 1) as f64).collect();
    let z = stats::z_scores(&means);
    means
        .into_iter()
        .zip(z)
        .enumerate()
        .map(|(index, (mean_similarity, z_score))| ReferenceFreeRow {
            index,
            mean_similarity,
            z_score,
            flagged: z_score < -z_threshold,
        })
        .collect()
}
