//! Portable representation of a classifier head (the final affine layer).
//!
//! Two on-disk encodings are supported:
//!
//! * **DFBS binary** (v1): `"DFBS"` magic, version byte `0x01`, `u32` LE class
//!   count `K`, `u32` LE latent dimension `D`, then `K*D` little-endian `f32`
//!   weights in row-major order (one row per class) followed by `K` `f32`
//!   biases. No padding, no checksum.
//! * **JSON**: `{"k": K, "d": D, "weights": [[..D..]; K], "bias": [..K..], "meta": {..}}`.
//!
//! Every loader validates shape and finiteness, so downstream code may assume
//! a well-formed layer.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Entry, Error, Result};
use crate::fsio::write_atomic;

pub const MAGIC: &[u8; 4] = b"DFBS";
pub const FORMAT_VERSION: u8 = 0x01;
/// Magic + version + K + D.
pub const HEADER_LEN: usize = 4 + 1 + 4 + 4;

/// Weights (K rows x D columns) and biases of a classification layer.
#[derive(Debug, Clone, PartialEq)]
pub struct FinalLayerParams {
    k: usize,
    d: usize,
    weights: Vec<f32>,
    bias: Vec<f32>,
    meta: BTreeMap<String, String>,
}

impl FinalLayerParams {
    /// Builds a validated layer from row-major weights.
    pub fn new(k: usize, d: usize, weights: Vec<f32>, bias: Vec<f32>) -> Result<Self> {
        if k < 2 {
            return Err(Error::Dimension(format!("class count K={k}, need K >= 2")));
        }
        if d < 1 {
            return Err(Error::Dimension("latent dimension D=0, need D >= 1".into()));
        }
        let expected = k
            .checked_mul(d)
            .ok_or_else(|| Error::Dimension(format!("K*D overflows for K={k}, D={d}")))?;
        if weights.len() != expected {
            return Err(Error::Dimension(format!(
                "weight count {} does not match K*D = {k}*{d}",
                weights.len()
            )));
        }
        if bias.len() != k {
            return Err(Error::Dimension(format!(
                "bias length {} does not match K = {k}",
                bias.len()
            )));
        }
        if let Some(pos) = weights.iter().position(|w| !w.is_finite()) {
            return Err(Error::NonFinite(Entry::Weight {
                row: pos / d,
                col: pos % d,
            }));
        }
        if let Some(row) = bias.iter().position(|b| !b.is_finite()) {
            return Err(Error::NonFinite(Entry::Bias { row }));
        }
        Ok(Self {
            k,
            d,
            weights,
            bias,
            meta: BTreeMap::new(),
        })
    }

    /// Builds a layer from one weight vector per class.
    pub fn from_rows(rows: Vec<Vec<f32>>, bias: Vec<f32>) -> Result<Self> {
        let k = rows.len();
        let d = rows.first().map_or(0, Vec::len);
        if let Some((i, r)) = rows.iter().enumerate().find(|(_, r)| r.len() != d) {
            return Err(Error::Dimension(format!(
                "row {i} has {} columns, row 0 has {d}",
                r.len()
            )));
        }
        Self::new(k, d, rows.into_iter().flatten().collect(), bias)
    }

    pub fn with_meta(mut self, meta: BTreeMap<String, String>) -> Self {
        self.meta = meta;
        self
    }

    /// Number of classes.
    pub fn k(&self) -> usize {
        self.k
    }

    /// Latent dimension.
    pub fn d(&self) -> usize {
        self.d
    }

    pub fn weights(&self) -> &[f32] {
        &self.weights
    }

    pub fn bias(&self) -> &[f32] {
        &self.bias
    }

    pub fn meta(&self) -> &BTreeMap<String, String> {
        &self.meta
    }

    pub fn meta_mut(&mut self) -> &mut BTreeMap<String, String> {
        &mut self.meta
    }

    /// Weight vector of class `i`.
    pub fn row(&self, i: usize) -> &[f32] {
        &self.weights[i * self.d..(i + 1) * self.d]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f32]> {
        self.weights.chunks_exact(self.d)
    }

    /// Mutable access for in-crate generators; callers must keep values finite.
    pub(crate) fn row_mut(&mut self, i: usize) -> &mut [f32] {
        &mut self.weights[i * self.d..(i + 1) * self.d]
    }

    pub(crate) fn bias_mut(&mut self) -> &mut [f32] {
        &mut self.bias
    }

    /// Same classes reordered so that new row `j` is old row `perm[j]`.
    pub fn permute_classes(&self, perm: &[usize]) -> Result<Self> {
        if perm.len() != self.k {
            return Err(Error::LengthMismatch {
                left: perm.len(),
                right: self.k,
            });
        }
        let mut weights = Vec::with_capacity(self.weights.len());
        let mut bias = Vec::with_capacity(self.k);
        for &src in perm {
            if src >= self.k {
                return Err(Error::Dimension(format!(
                    "permutation index {src} out of range"
                )));
            }
            weights.extend_from_slice(self.row(src));
            bias.push(self.bias[src]);
        }
        Ok(Self::new(self.k, self.d, weights, bias)?.with_meta(self.meta.clone()))
    }

    /// Exact byte length of the DFBS encoding for a K x D layer.
    pub fn binary_len(k: usize, d: usize) -> usize {
        HEADER_LEN + 4 * (k * d + k)
    }

    /// DFBS v1 encoding. Metadata is not carried by the binary format.
    pub fn to_binary(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(Self::binary_len(self.k, self.d));
        out.extend_from_slice(MAGIC);
        out.push(FORMAT_VERSION);
        out.extend_from_slice(&(self.k as u32).to_le_bytes());
        out.extend_from_slice(&(self.d as u32).to_le_bytes());
        for w in &self.weights {
            out.extend_from_slice(&w.to_le_bytes());
        }
        for b in &self.bias {
            out.extend_from_slice(&b.to_le_bytes());
        }
        out
    }

    pub fn from_binary(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < HEADER_LEN {
            return Err(Error::MalformedFile(format!(
                "truncated header: {} bytes, need {HEADER_LEN}",
                bytes.len()
            )));
        }
        if &bytes[..4] != MAGIC {
            return Err(Error::MalformedFile("bad magic, expected \"DFBS\"".into()));
        }
        if bytes[4] != FORMAT_VERSION {
            return Err(Error::MalformedFile(format!(
                "unsupported format version {:#04x}",
                bytes[4]
            )));
        }
        let k = u32::from_le_bytes(bytes[5..9].try_into().unwrap()) as u64;
        let d = u32::from_le_bytes(bytes[9..13].try_into().unwrap()) as u64;
        let payload = (bytes.len() - HEADER_LEN) as u64;
        // K and D are untrusted; (K*D + K)*4 can exceed u64 for u32 inputs.
        let declared = k
            .checked_mul(d)
            .and_then(|kd| kd.checked_add(k))
            .and_then(|n| n.checked_mul(4));
        if declared != Some(payload) {
            return Err(Error::MalformedFile(format!(
                "payload is {payload} bytes but header declares K={k}, D={d}"
            )));
        }
        let (k, d) = (k as usize, d as usize);
        let floats: Vec<f32> = bytes[HEADER_LEN..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let mut weights = floats;
        let bias = weights.split_off(k * d);
        Self::new(k, d, weights, bias)
    }

    pub fn to_json(&self) -> String {
        let doc = JsonLayer {
            k: self.k,
            d: self.d,
            weights: self.rows().map(<[f32]>::to_vec).collect(),
            bias: self.bias.clone(),
            meta: self.meta.clone(),
        };
        serde_json::to_string(&doc).expect("layer serializes")
    }

    pub fn from_json(bytes: &[u8]) -> Result<Self> {
        let doc: JsonLayer = serde_json::from_slice(bytes)
            .map_err(|e| Error::MalformedFile(format!("invalid layer JSON: {e}")))?;
        if doc.weights.len() != doc.k {
            return Err(Error::Dimension(format!(
                "\"k\" is {} but \"weights\" has {} rows",
                doc.k,
                doc.weights.len()
            )));
        }
        if let Some((i, r)) = doc
            .weights
            .iter()
            .enumerate()
            .find(|(_, r)| r.len() != doc.d)
        {
            return Err(Error::Dimension(format!(
                "\"d\" is {} but weight row {i} has {} entries",
                doc.d,
                r.len()
            )));
        }
        let (k, d) = (doc.k, doc.d);
        Ok(
            Self::new(k, d, doc.weights.into_iter().flatten().collect(), doc.bias)?
                .with_meta(doc.meta),
        )
    }

    /// Decodes `bytes` in the given format; `Auto` sniffs the magic bytes.
    pub fn decode(bytes: &[u8], format: LayerFormat) -> Result<Self> {
        match format {
            LayerFormat::Binary => Self::from_binary(bytes),
            LayerFormat::Json => Self::from_json(bytes),
            LayerFormat::Auto => match sniff_format(bytes) {
                Some(f) => Self::decode(bytes, f),
                None => Err(Error::MalformedFile(
                    "neither DFBS magic nor a JSON object".into(),
                )),
            },
        }
    }

    pub fn encode(&self, format: LayerFormat) -> Result<Vec<u8>> {
        match format {
            LayerFormat::Binary => Ok(self.to_binary()),
            LayerFormat::Json => Ok(self.to_json().into_bytes()),
            LayerFormat::Auto => Err(Error::MalformedFile(
                "an explicit output format is required".into(),
            )),
        }
    }
}

#[derive(Serialize, Deserialize)]
struct JsonLayer {
    k: usize,
    d: usize,
    weights: Vec<Vec<f32>>,
    bias: Vec<f32>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    meta: BTreeMap<String, String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum LayerFormat {
    Binary,
    Json,
    #[default]
    Auto,
}

impl FromStr for LayerFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "binary" | "dfbs" | "bin" => Ok(Self::Binary),
            "json" => Ok(Self::Json),
            "auto" => Ok(Self::Auto),
            other => Err(Error::MalformedFile(format!(
                "unknown layer format {other:?}"
            ))),
        }
    }
}

fn sniff_format(bytes: &[u8]) -> Option<LayerFormat> {
    if bytes.starts_with(MAGIC) {
        return Some(LayerFormat::Binary);
    }
    let first = bytes.iter().find(|b| !b.is_ascii_whitespace())?;
    (*first == b'{').then_some(LayerFormat::Json)
}

pub fn load_final_layer(path: impl AsRef<Path>, format: LayerFormat) -> Result<FinalLayerParams> {
    let path = path.as_ref();
    let bytes = fs::read(path)?;
    let mut params = FinalLayerParams::decode(&bytes, format)?;
    params
        .meta
        .entry("source_path".into())
        .or_insert_with(|| path.display().to_string());
    Ok(params)
}

pub fn save_final_layer(
    params: &FinalLayerParams,
    path: impl AsRef<Path>,
    format: LayerFormat,
) -> Result<()> {
    let bytes = params.encode(format)?;
    write_atomic(path.as_ref(), &bytes)?;
    Ok(())
}
