//! Per-class anomaly indicators computed from final-layer parameters.
//!
//! Thirteen major indicators summarize each class's weight row and bias. The
//! first twelve are expanded with four cross-class forms (z-score, normalized
//! absolute difference, and the upper/lower Tukey fence distances), giving 60
//! columns; the weight/bias z-score combination (`WBZ`) contributes its raw and
//! NAD forms for a total of 62 indicator columns.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::params::FinalLayerParams;
use crate::stats;

/// Total number of indicator columns.
pub const INDICATOR_COUNT: usize = 62;

/// Neutral value for a normalized column with no spread.
pub const NEUTRAL: f64 = 0.5;

/// Lower bound on `|K + sum_j W_ij|` in the weight-certainty denominator.
const CERTAINTY_DENOM_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Major {
    /// Mean of the class weight row.
    Wm,
    /// Absolute value of the row mean.
    Awm,
    /// Population variance of the row.
    Vw,
    /// Population standard deviation of the row.
    Svw,
    /// Mean absolute weight.
    L1,
    /// Euclidean norm of the row.
    L2,
    /// Softmax over classes of the mean squared weight.
    We,
    /// Bias.
    B,
    /// Bias plus the sum of the row.
    Swb,
    /// Min-max normalized row mean plus min-max normalized bias.
    Awb,
    /// Mean cosine distance to every class row.
    Ws,
    /// Complement of the normalized epistemic uncertainty.
    Wc,
    /// Normalized z-scores of row mean and bias, summed.
    Wbz,
}

impl Major {
    pub const ALL: [Major; 13] = [
        Major::Wm,
        Major::Awm,
        Major::Vw,
        Major::Svw,
        Major::L1,
        Major::L2,
        Major::We,
        Major::B,
        Major::Swb,
        Major::Awb,
        Major::Ws,
        Major::Wc,
        Major::Wbz,
    ];

    pub fn code(self) -> &'static str {
        match self {
            Major::Wm => "WM",
            Major::Awm => "AWM",
            Major::Vw => "VW",
            Major::Svw => "SVW",
            Major::L1 => "L1",
            Major::L2 => "L2",
            Major::We => "WE",
            Major::B => "B",
            Major::Swb => "SWB",
            Major::Awb => "AWB",
            Major::Ws => "WS",
            Major::Wc => "WC",
            Major::Wbz => "WBZ",
        }
    }

    fn position(self) -> usize {
        Major::ALL.iter().position(|&m| m == self).unwrap()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Form {
    Raw,
    /// Standard score across classes.
    Zs,
    /// Absolute deviation from the class mean over the value range.
    Nad,
    /// Distance above the upper Tukey fence `Q3 + 1.5 IQR`.
    Iqu,
    /// Distance below the lower Tukey fence `Q1 - 1.5 IQR`.
    Iql,
}

impl Form {
    pub const ALL: [Form; 5] = [Form::Raw, Form::Zs, Form::Nad, Form::Iqu, Form::Iql];

    pub fn code(self) -> &'static str {
        match self {
            Form::Raw => "RAW",
            Form::Zs => "ZS",
            Form::Nad => "NAD",
            Form::Iqu => "IQU",
            Form::Iql => "IQL",
        }
    }

    fn position(self) -> usize {
        Form::ALL.iter().position(|&f| f == self).unwrap()
    }
}

/// One of the 62 indicator columns.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct IndicatorId {
    pub major: Major,
    pub form: Form,
}

impl IndicatorId {
    pub fn new(major: Major, form: Form) -> Option<Self> {
        let valid = major != Major::Wbz || matches!(form, Form::Raw | Form::Nad);
        valid.then_some(Self { major, form })
    }

    /// Canonical column index in `0..62`.
    pub fn index(self) -> usize {
        match self.major {
            Major::Wbz => {
                if self.form == Form::Raw {
                    60
                } else {
                    61
                }
            }
            m => m.position() * Form::ALL.len() + self.form.position(),
        }
    }

    pub fn from_index(index: usize) -> Option<Self> {
        match index {
            0..=59 => Some(Self {
                major: Major::ALL[index / 5],
                form: Form::ALL[index % 5],
            }),
            60 => Some(Self {
                major: Major::Wbz,
                form: Form::Raw,
            }),
            61 => Some(Self {
                major: Major::Wbz,
                form: Form::Nad,
            }),
            _ => None,
        }
    }

    /// Parses names of the form `WM-RAW` (case-insensitive).
    pub fn parse(name: &str) -> Option<Self> {
        let (major, form) = name.trim().split_once(['-', '_'])?;
        let major = Major::ALL
            .into_iter()
            .find(|m| m.code().eq_ignore_ascii_case(major))?;
        let form = Form::ALL
            .into_iter()
            .find(|f| f.code().eq_ignore_ascii_case(form))?;
        Self::new(major, form)
    }
}

impl fmt::Display for IndicatorId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}-{}", self.major.code(), self.form.code())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct CatalogEntry {
    pub index: usize,
    pub id: IndicatorId,
    pub name: String,
}

/// All indicator columns in canonical order.
pub fn indicator_catalog() -> Vec<CatalogEntry> {
    (0..INDICATOR_COUNT)
        .map(|index| {
            let id = IndicatorId::from_index(index).unwrap();
            CatalogEntry {
                index,
                id,
                name: id.to_string(),
            }
        })
        .collect()
}

/// Row-level sufficient statistics shared by several majors.
struct RowStats {
    mean: Vec<f64>,
    var: Vec<f64>,
    abs_mean: Vec<f64>,
    sq_sum: Vec<f64>,
    sum: Vec<f64>,
}

impl RowStats {
    fn new(params: &FinalLayerParams) -> Self {
        let k = params.k();
        let d = params.d() as f64;
        let mut out = Self {
            mean: Vec::with_capacity(k),
            var: Vec::with_capacity(k),
            abs_mean: Vec::with_capacity(k),
            sq_sum: Vec::with_capacity(k),
            sum: Vec::with_capacity(k),
        };
        for row in params.rows() {
            let sum: f64 = row.iter().map(|&w| f64::from(w)).sum();
            let mean = sum / d;
            let mut ss = 0.0;
            let mut dev = 0.0;
            let mut abs = 0.0;
            for &w in row {
                let w = f64::from(w);
                ss += w * w;
                dev += (w - mean) * (w - mean);
                abs += w.abs();
            }
            out.sum.push(sum);
            out.mean.push(mean);
            out.var.push(dev / d);
            out.abs_mean.push(abs / d);
            out.sq_sum.push(ss);
        }
        out
    }
}

/// Mean cosine distance of each row to all rows (self included, contributing 0).
fn weight_similarity(params: &FinalLayerParams, sq_sum: &[f64]) -> Vec<f64> {
    let k = params.k();
    let rows: Vec<Vec<f64>> = params
        .rows()
        .map(|r| r.iter().map(|&w| f64::from(w)).collect())
        .collect();
    let norms: Vec<f64> = sq_sum.iter().map(|s| s.sqrt()).collect();
    let mut dist_sum = vec![0.0; k];
    for i in 0..k {
        for j in (i + 1)..k {
            let cos = if norms[i] == 0.0 || norms[j] == 0.0 {
                0.0
            } else {
                (dot(&rows[i], &rows[j]) / (norms[i] * norms[j])).clamp(-1.0, 1.0)
            };
            dist_sum[i] += 1.0 - cos;
            dist_sum[j] += 1.0 - cos;
        }
    }
    dist_sum.into_iter().map(|s| s / k as f64).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0f64; 4];
    let ca = a.chunks_exact(4);
    let cb = b.chunks_exact(4);
    let tail: f64 = ca
        .remainder()
        .iter()
        .zip(cb.remainder())
        .map(|(x, y)| x * y)
        .sum();
    for (x, y) in ca.zip(cb) {
        acc[0] += x[0] * y[0];
        acc[1] += x[1] * y[1];
        acc[2] += x[2] * y[2];
        acc[3] += x[3] * y[3];
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

fn major_from_stats(params: &FinalLayerParams, stats_: &RowStats, major: Major) -> Vec<f64> {
    let k = params.k();
    let d = params.d() as f64;
    let bias = || {
        params
            .bias()
            .iter()
            .map(|&b| f64::from(b))
            .collect::<Vec<_>>()
    };
    match major {
        Major::Wm => stats_.mean.clone(),
        Major::Awm => stats_.mean.iter().map(|m| m.abs()).collect(),
        Major::Vw => stats_.var.clone(),
        Major::Svw => stats_.var.iter().map(|v| v.sqrt()).collect(),
        Major::L1 => stats_.abs_mean.clone(),
        Major::L2 => stats_.sq_sum.iter().map(|s| s.sqrt()).collect(),
        Major::We => {
            let energy: Vec<f64> = stats_.sq_sum.iter().map(|s| s / d).collect();
            stats::softmax(&energy)
        }
        Major::B => bias(),
        Major::Swb => bias()
            .into_iter()
            .zip(&stats_.sum)
            .map(|(b, s)| b + s)
            .collect(),
        Major::Awb => {
            let wm = stats::min_max_scale(&stats_.mean);
            let b = stats::min_max_scale(&bias());
            wm.into_iter().zip(b).map(|(x, y)| x + y).collect()
        }
        Major::Ws => weight_similarity(params, &stats_.sq_sum),
        Major::Wc => {
            let kf = k as f64;
            let eu: Vec<f64> = stats_
                .sum
                .iter()
                .map(|s| {
                    let denom = kf + s;
                    let denom = if denom.abs() < CERTAINTY_DENOM_FLOOR {
                        CERTAINTY_DENOM_FLOOR.copysign(denom)
                    } else {
                        denom
                    };
                    kf / denom
                })
                .collect();
            stats::min_max_scale(&eu)
                .into_iter()
                .map(|e| 1.0 - e)
                .collect()
        }
        Major::Wbz => {
            let wm = stats::min_max_scale(&stats::z_scores(&stats_.mean));
            let b = stats::min_max_scale(&stats::z_scores(&bias()));
            wm.into_iter().zip(b).map(|(x, y)| x + y).collect()
        }
    }
}

/// Per-class values of one major indicator.
pub fn major_indicator(params: &FinalLayerParams, major: Major) -> Vec<f64> {
    major_from_stats(params, &RowStats::new(params), major)
}

/// Applies a cross-class form to a vector of per-class values.
///
/// Constant inputs map to all zeros for every form except `Raw`.
pub fn extend_indicator(values: &[f64], form: Form) -> Vec<f64> {
    match form {
        Form::Raw => values.to_vec(),
        Form::Zs => stats::z_scores(values),
        Form::Nad => {
            let (lo, hi) = stats::min_max(values);
            let range = hi - lo;
            if range == 0.0 {
                return vec![0.0; values.len()];
            }
            let mean = stats::mean(values);
            values.iter().map(|v| (v - mean).abs() / range).collect()
        }
        Form::Iqu => {
            let (q1, q3) = stats::quartiles(values);
            let fence = q3 + 1.5 * (q3 - q1);
            values.iter().map(|v| v - fence).collect()
        }
        Form::Iql => {
            let (q1, q3) = stats::quartiles(values);
            let fence = q1 - 1.5 * (q3 - q1);
            values.iter().map(|v| fence - v).collect()
        }
    }
}

/// K x 62 indicator values, stored column by column.
#[derive(Debug, Clone, PartialEq)]
pub struct IndicatorMatrix {
    k: usize,
    raw: Vec<f64>,
    normalized: Vec<f64>,
}

impl IndicatorMatrix {
    /// Builds a matrix from 62 raw columns; normalization is derived.
    pub fn from_raw_columns(columns: Vec<Vec<f64>>) -> Self {
        assert_eq!(columns.len(), INDICATOR_COUNT, "need 62 indicator columns");
        let k = columns[0].len();
        let mut raw = Vec::with_capacity(k * INDICATOR_COUNT);
        let mut normalized = Vec::with_capacity(k * INDICATOR_COUNT);
        for col in &columns {
            assert_eq!(col.len(), k, "ragged indicator columns");
            raw.extend_from_slice(col);
            normalized.extend(normalize_column(col));
        }
        Self { k, raw, normalized }
    }

    /// Builds a matrix directly from normalized columns (raw is set equal to
    /// them). Useful for tests and for replaying stored clue matrices.
    pub fn from_normalized_columns(columns: Vec<Vec<f64>>) -> Self {
        assert_eq!(columns.len(), INDICATOR_COUNT, "need 62 indicator columns");
        let k = columns[0].len();
        let flat: Vec<f64> = columns.into_iter().flatten().collect();
        assert_eq!(flat.len(), k * INDICATOR_COUNT, "ragged indicator columns");
        Self {
            k,
            raw: flat.clone(),
            normalized: flat,
        }
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn raw_column(&self, n: usize) -> &[f64] {
        &self.raw[n * self.k..(n + 1) * self.k]
    }

    pub fn normalized_column(&self, n: usize) -> &[f64] {
        &self.normalized[n * self.k..(n + 1) * self.k]
    }

    pub fn raw_at(&self, class: usize, n: usize) -> f64 {
        self.raw[n * self.k + class]
    }

    pub fn normalized_at(&self, class: usize, n: usize) -> f64 {
        self.normalized[n * self.k + class]
    }

    /// Raw values as K rows of 62.
    pub fn raw_rows(&self) -> Vec<Vec<f64>> {
        self.rows_of(&self.raw)
    }

    /// Normalized values as K rows of 62.
    pub fn normalized_rows(&self) -> Vec<Vec<f64>> {
        self.rows_of(&self.normalized)
    }

    fn rows_of(&self, data: &[f64]) -> Vec<Vec<f64>> {
        (0..self.k)
            .map(|i| (0..INDICATOR_COUNT).map(|n| data[n * self.k + i]).collect())
            .collect()
    }
}

/// Min-max rescale into `[0, 1]`; a constant column becomes all [`NEUTRAL`].
pub fn normalize_column(values: &[f64]) -> Vec<f64> {
    let (lo, hi) = stats::min_max(values);
    let range = hi - lo;
    if range == 0.0 || !range.is_finite() {
        return vec![NEUTRAL; values.len()];
    }
    values
        .iter()
        .map(|v| ((v - lo) / range).clamp(0.0, 1.0))
        .collect()
}

pub fn compute_indicator_matrix(params: &FinalLayerParams) -> IndicatorMatrix {
    let row_stats = RowStats::new(params);
    let mut columns = Vec::with_capacity(INDICATOR_COUNT);
    for major in Major::ALL {
        let values = major_from_stats(params, &row_stats, major);
        let forms: &[Form] = if major == Major::Wbz {
            &[Form::Raw, Form::Nad]
        } else {
            &Form::ALL
        };
        for &form in forms {
            columns.push(extend_indicator(&values, form));
        }
    }
    IndicatorMatrix::from_raw_columns(columns)
}
