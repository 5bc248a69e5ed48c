//! Profile calibration from labeled clean and backdoored heads.
//!
//! The clean reference is the element-wise mean of the clean models' anomaly
//! scores. The threshold is chosen by an exact sweep: the verdict only changes
//! at observed similarity values, so testing one candidate per gap between
//! consecutive distinct similarities (plus 0 and 1) covers every achievable
//! confusion matrix.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::Deserialize;
use sha2::{Digest, Sha256};

use crate::detector::{
    canonical_selection, cosine_unchecked, is_flagged, score_unchecked, ClueProfile,
};
use crate::error::{Error, Result};
use crate::indicators::{compute_indicator_matrix, IndicatorMatrix};
use crate::params::{load_final_layer, FinalLayerParams, LayerFormat};

/// Name of the labels file inside a model directory.
pub const LABELS_FILE: &str = "labels.csv";

/// Meta key naming the per-model feature used by selectors.
pub const FEATURIZATION: &str = "max-minus-mean prominence of normalized columns";

/// Labeled heads used to configure a detector.
#[derive(Debug, Clone)]
pub struct ConfigSet {
    cleans: Vec<FinalLayerParams>,
    backdoors: Vec<(FinalLayerParams, usize)>,
    k: usize,
    pub meta: BTreeMap<String, String>,
}

impl ConfigSet {
    /// Requires at least one clean model, a shared class count, and targets in range.
    pub fn new(
        cleans: Vec<FinalLayerParams>,
        backdoors: Vec<(FinalLayerParams, usize)>,
    ) -> Result<Self> {
        let k = cleans.first().ok_or(Error::EmptyCleanSet)?.k();
        let all = cleans.iter().chain(backdoors.iter().map(|(p, _)| p));
        if let Some(p) = all.clone().find(|p| p.k() != k) {
            return Err(Error::ClassCountMismatch {
                expected: k,
                found: p.k(),
            });
        }
        if let Some((_, t)) = backdoors.iter().find(|(_, t)| *t >= k) {
            return Err(Error::DegenerateConfig(format!(
                "backdoor target {t} not in [0, {k})"
            )));
        }
        Ok(Self {
            cleans,
            backdoors,
            k,
            meta: BTreeMap::new(),
        })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn cleans(&self) -> &[FinalLayerParams] {
        &self.cleans
    }

    pub fn backdoors(&self) -> &[(FinalLayerParams, usize)] {
        &self.backdoors
    }

    pub fn len(&self) -> usize {
        self.cleans.len() + self.backdoors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// SHA-256 over the binary encodings and labels, in set order.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for p in &self.cleans {
            h.update(b"C");
            h.update(p.to_binary());
        }
        for (p, t) in &self.backdoors {
            h.update(b"B");
            h.update((*t as u64).to_le_bytes());
            h.update(p.to_binary());
        }
        hex::encode(h.finalize())
    }

    /// Loads `clean_dir/*` and `backdoor_dir/*` using each directory's
    /// `labels.csv` (`path,target`). A clean directory without a labels file
    /// contributes every DFBS/JSON file it contains.
    pub fn from_dirs(clean_dir: &Path, backdoor_dir: &Path) -> Result<Self> {
        let clean_paths = match read_labels_file(clean_dir) {
            Ok(rows) => rows.into_iter().map(|r| clean_dir.join(r.path)).collect(),
            Err(Error::Io(_)) => list_model_files(clean_dir)?,
            Err(e) => return Err(e),
        };
        let cleans = clean_paths
            .iter()
            .map(|p| load_final_layer(p, LayerFormat::Auto))
            .collect::<Result<Vec<_>>>()?;
        let mut backdoors = Vec::new();
        for row in read_labels_file(backdoor_dir)? {
            let target = row.target.ok_or_else(|| {
                Error::Labels(format!("backdoor model {} has no target", row.path))
            })?;
            let params = load_final_layer(backdoor_dir.join(&row.path), LayerFormat::Auto)?;
            backdoors.push((params, target));
        }
        Self::new(cleans, backdoors)
    }
}

/// Model files (`.dfbs` / `.json`) in a directory, sorted by path.
pub fn list_model_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.is_file()
                && matches!(
                    p.extension().and_then(|e| e.to_str()),
                    Some("dfbs" | "bin" | "json")
                )
        })
        .collect();
    out.sort();
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelRow {
    pub path: String,
    pub target: Option<usize>,
}

#[derive(Deserialize)]
struct RawLabel {
    path: String,
    #[serde(default)]
    target: Option<String>,
}

/// Parses a `path,target` CSV; an empty target marks a clean model.
pub fn parse_labels(bytes: &[u8]) -> Result<Vec<LabelRow>> {
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .flexible(false)
        .from_reader(bytes);
    let headers = reader
        .headers()
        .map_err(|e| Error::Labels(e.to_string()))?
        .clone();
    if headers.iter().collect::<Vec<_>>() != ["path", "target"] {
        return Err(Error::Labels(format!(
            "expected header \"path,target\", found {:?}",
            headers.iter().collect::<Vec<_>>().join(",")
        )));
    }
    let mut rows = Vec::new();
    for (line, rec) in reader.deserialize::<RawLabel>().enumerate() {
        let rec = rec.map_err(|e| Error::Labels(format!("row {}: {e}", line + 1)))?;
        if rec.path.is_empty() {
            return Err(Error::Labels(format!("row {}: empty path", line + 1)));
        }
        let target =
            match rec.target.as_deref().map(str::trim) {
                None | Some("") => None,
                Some(t) => Some(t.parse::<usize>().map_err(|_| {
                    Error::Labels(format!("row {}: invalid target {t:?}", line + 1))
                })?),
            };
        rows.push(LabelRow {
            path: rec.path,
            target,
        });
    }
    Ok(rows)
}

pub fn read_labels_file(dir: &Path) -> Result<Vec<LabelRow>> {
    parse_labels(&fs::read(dir.join(LABELS_FILE))?)
}

/// Indicator matrices of every model in a [`ConfigSet`], computed once.
#[derive(Debug, Clone)]
pub struct ScoredConfig {
    pub cleans: Vec<IndicatorMatrix>,
    pub backdoors: Vec<(IndicatorMatrix, usize)>,
    pub k: usize,
}

impl ScoredConfig {
    pub fn new(config: &ConfigSet) -> Self {
        let cleans = config
            .cleans
            .par_iter()
            .map(compute_indicator_matrix)
            .collect();
        let backdoors = config
            .backdoors
            .par_iter()
            .map(|(p, t)| (compute_indicator_matrix(p), *t))
            .collect();
        Self {
            cleans,
            backdoors,
            k: config.k,
        }
    }

    /// `ids` must be canonical.
    fn reference(&self, ids: &[usize]) -> Vec<f64> {
        let mut acc = vec![0.0; self.k];
        for m in &self.cleans {
            for (a, s) in acc.iter_mut().zip(score_unchecked(m, ids)) {
                *a += s;
            }
        }
        let n = self.cleans.len() as f64;
        acc.into_iter().map(|a| a / n).collect()
    }

    pub fn clean_reference(&self, indicator_ids: &[usize]) -> Result<Vec<f64>> {
        if self.cleans.is_empty() {
            return Err(Error::EmptyCleanSet);
        }
        Ok(self.reference(&canonical_selection(indicator_ids)?))
    }

    /// Similarities to `reference` with labels (`true` = backdoored), cleans first.
    pub fn similarities(
        &self,
        indicator_ids: &[usize],
        reference: &[f64],
    ) -> Result<(Vec<f64>, Vec<bool>)> {
        let ids = canonical_selection(indicator_ids)?;
        if reference.len() != self.k {
            return Err(Error::LengthMismatch {
                left: reference.len(),
                right: self.k,
            });
        }
        let sims = self
            .cleans
            .iter()
            .chain(self.backdoors.iter().map(|(m, _)| m))
            .map(|m| cosine_unchecked(&score_unchecked(m, &ids), reference))
            .collect();
        let labels = std::iter::repeat_n(false, self.cleans.len())
            .chain(std::iter::repeat_n(true, self.backdoors.len()))
            .collect();
        Ok((sims, labels))
    }

    pub fn optimize_lambda(&self, indicator_ids: &[usize], reference: &[f64]) -> Result<LambdaFit> {
        if self.cleans.is_empty() || self.backdoors.is_empty() {
            return Err(Error::DegenerateConfig(
                "need at least one clean and one backdoored model".into(),
            ));
        }
        let (sims, labels) = self.similarities(indicator_ids, reference)?;
        Ok(optimize_lambda_from_similarities(&sims, &labels))
    }

    /// Clean reference plus the F1-optimal threshold for a selection.
    pub fn fit(&self, indicator_ids: &[usize]) -> Result<(Vec<f64>, LambdaFit)> {
        let reference = self.clean_reference(indicator_ids)?;
        let fit = self.optimize_lambda(indicator_ids, &reference)?;
        Ok((reference, fit))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LambdaFit {
    pub lambda: f64,
    pub f1: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    pub fn_: usize,
}

impl Confusion {
    pub fn from_predictions(predicted: &[bool], labels: &[bool]) -> Self {
        let mut c = Self::default();
        for (&p, &l) in predicted.iter().zip(labels) {
            match (p, l) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, false) => c.tn += 1,
                (false, true) => c.fn_ += 1,
            }
        }
        c
    }

    /// `2TP / (2TP + FP + FN)`, zero when there are no true positives.
    pub fn f1(&self) -> f64 {
        if self.tp == 0 {
            return 0.0;
        }
        let tp2 = 2.0 * self.tp as f64;
        tp2 / (tp2 + self.fp as f64 + self.fn_ as f64)
    }
}

/// F1 of the verdict `similarity < lambda` against `labels`.
pub fn f1_at(similarities: &[f64], labels: &[bool], lambda: f64) -> f64 {
    let predicted: Vec<bool> = similarities
        .iter()
        .map(|&s| is_flagged(s, lambda))
        .collect();
    Confusion::from_predictions(&predicted, labels).f1()
}

/// Exact F1-maximizing threshold in `[0, 1]`; ties go to the largest threshold.
pub fn optimize_lambda_from_similarities(similarities: &[f64], labels: &[bool]) -> LambdaFit {
    let mut distinct: Vec<f64> = similarities.to_vec();
    distinct.sort_by(f64::total_cmp);
    distinct.dedup();
    let mut candidates = vec![0.0];
    candidates.extend(distinct.windows(2).map(|w| w[0] + (w[1] - w[0]) / 2.0));
    candidates.push(1.0);
    candidates.retain(|c| (0.0..=1.0).contains(c));

    let mut best = LambdaFit {
        lambda: 0.0,
        f1: f1_at(similarities, labels, 0.0),
    };
    for &lambda in &candidates[1..] {
        let f1 = f1_at(similarities, labels, lambda);
        if f1 >= best.f1 {
            best = LambdaFit { lambda, f1 };
        }
    }
    best
}

/// Element-wise mean anomaly score of the clean models.
pub fn clean_reference(cleans: &[FinalLayerParams], indicator_ids: &[usize]) -> Result<Vec<f64>> {
    let first = cleans.first().ok_or(Error::EmptyCleanSet)?;
    if let Some(p) = cleans.iter().find(|p| p.k() != first.k()) {
        return Err(Error::ClassCountMismatch {
            expected: first.k(),
            found: p.k(),
        });
    }
    let ids = canonical_selection(indicator_ids)?;
    let scored = ScoredConfig {
        cleans: cleans.par_iter().map(compute_indicator_matrix).collect(),
        backdoors: Vec::new(),
        k: first.k(),
    };
    Ok(scored.reference(&ids))
}

pub fn optimize_lambda(
    config: &ConfigSet,
    indicator_ids: &[usize],
    reference: &[f64],
) -> Result<LambdaFit> {
    ScoredConfig::new(config).optimize_lambda(indicator_ids, reference)
}

pub fn build_profile(config: &ConfigSet, indicator_ids: &[usize]) -> Result<ClueProfile> {
    build_profile_scored(config, &ScoredConfig::new(config), indicator_ids, "all")
}

/// Builds a profile reusing precomputed matrices; `method` is recorded in meta.
pub fn build_profile_scored(
    config: &ConfigSet,
    scored: &ScoredConfig,
    indicator_ids: &[usize],
    method: &str,
) -> Result<ClueProfile> {
    let (reference, fit) = scored.fit(indicator_ids)?;
    let mut meta = config.meta.clone();
    meta.insert("selection_method".into(), method.to_string());
    meta.insert("featurization".into(), FEATURIZATION.into());
    meta.insert("config_fingerprint".into(), config.fingerprint());
    meta.insert("config_cleans".into(), config.cleans.len().to_string());
    meta.insert(
        "config_backdoors".into(),
        config.backdoors.len().to_string(),
    );
    meta.insert("config_f1".into(), format!("{:.6}", fit.f1));
    ClueProfile::new(indicator_ids, fit.lambda, reference, meta)
}
