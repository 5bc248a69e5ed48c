//! Synthetic classifier heads with injectable backdoor signatures.
//!
//! Clean heads draw i.i.d. Gaussian weights and biases. Attacks perturb only
//! the target class (its weight row or bias), in units of `weight_scale` so
//! that their visibility does not depend on the latent dimension.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::calibration::{ConfigSet, LABELS_FILE};
use crate::error::{Error, Result};
use crate::fsio::write_atomic;
use crate::params::FinalLayerParams;
use crate::stats;

/// Magnitude of an emulated flipped high-order bit, in units of `weight_scale`.
pub const BITFLIP_MAGNITUDE: f64 = 8.0;

/// Per-unit-strength growth of the target row's spread under `Suppressed`.
pub const SUPPRESSION_SPREAD: f64 = 0.05;

const INJECT_STREAM: u64 = 0x00A7_7AC4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Attack {
    None,
    MeanBoost,
    BiasBoost,
    Directional,
    Tail,
    Mixed,
    Bitflip,
    Suppressed,
}

impl Attack {
    pub const ALL: [Attack; 8] = [
        Attack::None,
        Attack::MeanBoost,
        Attack::BiasBoost,
        Attack::Directional,
        Attack::Tail,
        Attack::Mixed,
        Attack::Bitflip,
        Attack::Suppressed,
    ];

    /// Components a `Mixed` attack draws from.
    const MIXABLE: [Attack; 4] = [
        Attack::MeanBoost,
        Attack::BiasBoost,
        Attack::Directional,
        Attack::Tail,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Attack::None => "none",
            Attack::MeanBoost => "mean-boost",
            Attack::BiasBoost => "bias-boost",
            Attack::Directional => "directional",
            Attack::Tail => "tail",
            Attack::Mixed => "mixed",
            Attack::Bitflip => "bitflip",
            Attack::Suppressed => "suppressed",
        }
    }
}

impl fmt::Display for Attack {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Attack {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.trim().to_ascii_lowercase().replace('_', "-");
        Attack::ALL
            .into_iter()
            .find(|a| a.name() == norm)
            .ok_or_else(|| Error::InvalidAttack(format!("unknown attack {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub k: usize,
    pub d: usize,
    pub weight_scale: f64,
    pub bias_scale: f64,
    pub attack: Attack,
    pub strength: f64,
    pub target: usize,
    pub seed: u64,
}

impl SynthSpec {
    /// Clean spec with default scales (`1/sqrt(d)` weights, `0.01` biases).
    pub fn new(k: usize, d: usize) -> Self {
        Self {
            k,
            d,
            weight_scale: 1.0 / (d.max(1) as f64).sqrt(),
            bias_scale: 0.01,
            attack: Attack::None,
            strength: 3.0,
            target: 0,
            seed: 0,
        }
    }

    pub fn with_attack(mut self, attack: Attack, strength: f64, target: usize) -> Self {
        self.attack = attack;
        self.strength = strength;
        self.target = target;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn with_scales(mut self, weight_scale: f64, bias_scale: f64) -> Self {
        self.weight_scale = weight_scale;
        self.bias_scale = bias_scale;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.k < 2 || self.d < 1 {
            return Err(Error::InvalidSpec(format!(
                "need k >= 2 and d >= 1, got k={}, d={}",
                self.k, self.d
            )));
        }
        if !(self.strength >= 0.0 && self.strength.is_finite()) {
            return Err(Error::InvalidSpec(format!(
                "strength {} < 0",
                self.strength
            )));
        }
        if self.target >= self.k {
            return Err(Error::InvalidSpec(format!(
                "target {} not in [0, {})",
                self.target, self.k
            )));
        }
        if !(self.weight_scale > 0.0 && self.weight_scale.is_finite())
            || !(self.bias_scale >= 0.0 && self.bias_scale.is_finite())
        {
            return Err(Error::InvalidSpec(
                "scales must be finite and positive".into(),
            ));
        }
        Ok(())
    }
}

/// Mixes a master seed with a stream tag and an index (splitmix64 finalizer).
pub fn derive_seed(master: u64, stream: u64, index: u64) -> u64 {
    let mut z = master
        ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ index.wrapping_mul(0xD1B5_4A32_D192_ED03);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Clean head with Gaussian weights and biases; deterministic in `spec.seed`.
pub fn generate_clean(spec: &SynthSpec) -> Result<FinalLayerParams> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let w_dist =
        Normal::new(0.0, spec.weight_scale).map_err(|e| Error::InvalidSpec(e.to_string()))?;
    let weights: Vec<f32> = (0..spec.k * spec.d)
        .map(|_| w_dist.sample(&mut rng) as f32)
        .collect();
    let bias: Vec<f32> = (0..spec.k)
        .map(|_| {
            let z: f64 = StandardNormal.sample(&mut rng);
            (z * spec.bias_scale) as f32
        })
        .collect();
    FinalLayerParams::new(spec.k, spec.d, weights, bias)
}

/// Applies `spec.attack` to the target class of `clean`.
pub fn inject(clean: &FinalLayerParams, spec: &SynthSpec) -> Result<FinalLayerParams> {
    spec.validate()?;
    if spec.target >= clean.k() {
        return Err(Error::InvalidSpec(format!(
            "target {} not in [0, {})",
            spec.target,
            clean.k()
        )));
    }
    let mut out = clean.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(1);
    apply(&mut out, spec.attack, spec.strength, spec, &mut rng)?;
    FinalLayerParams::new(
        out.k(),
        out.d(),
        out.weights().to_vec(),
        out.bias().to_vec(),
    )
    .map(|p| p.with_meta(clean.meta().clone()))
}

fn apply(
    params: &mut FinalLayerParams,
    attack: Attack,
    strength: f64,
    spec: &SynthSpec,
    rng: &mut ChaCha8Rng,
) -> Result<()> {
    let t = spec.target;
    let ws = spec.weight_scale;
    let d = params.d();
    match attack {
        Attack::None => {
            return Err(Error::InvalidAttack(
                "inject requires an attack other than none".into(),
            ))
        }
        Attack::MeanBoost => {
            if strength == 0.0 {
                return Ok(());
            }
            let shift = strength * ws;
            for w in params.row_mut(t) {
                *w = (f64::from(*w) + shift) as f32;
            }
        }
        Attack::BiasBoost => {
            if strength == 0.0 {
                return Ok(());
            }
            let bias: Vec<f64> = params.bias().iter().map(|&b| f64::from(b)).collect();
            let (lo, hi) = stats::min_max(&bias);
            let b = &mut params.bias_mut()[t];
            *b = (f64::from(*b) + strength * (hi - lo + 1e-3)) as f32;
        }
        Attack::Directional => {
            if strength == 0.0 {
                return Ok(());
            }
            if d < 2 {
                return Err(Error::InvalidAttack(
                    "directional attack needs d >= 2 for a zero-mean direction".into(),
                ));
            }
            let u = zero_mean_direction(params.row(t), rng);
            let scale = strength * ws * (d as f64).sqrt();
            for (w, ui) in params.row_mut(t).iter_mut().zip(u) {
                *w = (f64::from(*w) + scale * ui) as f32;
            }
        }
        Attack::Tail => {
            let row = params.row_mut(t);
            let m = d.div_ceil(4).max(1);
            let mut order: Vec<usize> = (0..d).collect();
            order.sort_by(|&a, &b| row[a].total_cmp(&row[b]).then(a.cmp(&b)));
            let factor = 1.0 + strength;
            for &j in &order[..m] {
                row[j] = (f64::from(row[j]) * factor) as f32;
            }
        }
        Attack::Mixed => {
            let mask: u8 = rng.random_range(1..16);
            for (bit, sub) in Attack::MIXABLE.into_iter().enumerate() {
                if mask & (1 << bit) != 0 {
                    apply(params, sub, strength / 2.0, spec, rng)?;
                }
            }
        }
        Attack::Bitflip => {
            let n = (strength.ceil() as usize).min(d);
            let magnitude = (BITFLIP_MAGNITUDE * ws) as f32;
            let picks = index::sample(rng, d, n).into_vec();
            let signs: Vec<bool> = (0..n).map(|_| rng.random_bool(0.5)).collect();
            let row = params.row_mut(t);
            for (j, positive) in picks.into_iter().zip(signs) {
                row[j] = if positive { magnitude } else { -magnitude };
            }
        }
        Attack::Suppressed => {
            let original: Vec<f64> = params.row(t).iter().map(|&w| f64::from(w)).collect();
            let orig_mean = stats::mean(&original);
            let boosted: Vec<f64> = original.iter().map(|w| w + strength * ws).collect();
            let boosted_mean = stats::mean(&boosted);
            let spread = 1.0 + SUPPRESSION_SPREAD * strength;
            for (w, b) in params.row_mut(t).iter_mut().zip(&boosted) {
                *w = (orig_mean + (b - boosted_mean) * spread) as f32;
            }
        }
    }
    Ok(())
}

/// Random unit vector with zero mean, orthogonal to the centered `row` when
/// that leaves a nonzero component.
fn zero_mean_direction(row: &[f32], rng: &mut ChaCha8Rng) -> Vec<f64> {
    let d = row.len();
    let center = |v: &mut Vec<f64>| {
        let m = stats::mean(v);
        v.iter_mut().for_each(|x| *x -= m);
    };
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    loop {
        let mut u: Vec<f64> = (0..d).map(|_| StandardNormal.sample(rng)).collect();
        center(&mut u);
        let mut w: Vec<f64> = row.iter().map(|&x| f64::from(x)).collect();
        center(&mut w);
        let ww: f64 = w.iter().map(|x| x * x).sum();
        let mut projected = u.clone();
        if ww > 0.0 {
            let coef = u.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>() / ww;
            projected
                .iter_mut()
                .zip(&w)
                .for_each(|(a, b)| *a -= coef * b);
        }
        let candidate = if norm(&projected) > 1e-9 {
            projected
        } else {
            u
        };
        let n = norm(&candidate);
        if n > 1e-9 {
            return candidate.into_iter().map(|x| x / n).collect();
        }
    }
}

/// A generated head with its ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledModel {
    pub params: FinalLayerParams,
    pub attack: Attack,
    /// Target class for attacked models, `None` for clean ones.
    pub target: Option<usize>,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BenchmarkCounts {
    pub config_clean: usize,
    pub config_per_attack: usize,
    pub eval_clean: usize,
    pub eval_per_attack: usize,
}

#[derive(Debug, Clone)]
pub struct Benchmark {
    pub config: Vec<LabeledModel>,
    pub eval: Vec<LabeledModel>,
}

impl Benchmark {
    pub fn config_set(&self) -> Result<ConfigSet> {
        labeled_to_config(&self.config)
    }
}

pub fn labeled_to_config(models: &[LabeledModel]) -> Result<ConfigSet> {
    let cleans = models
        .iter()
        .filter(|m| m.target.is_none())
        .map(|m| m.params.clone())
        .collect();
    let backdoors = models
        .iter()
        .filter_map(|m| m.target.map(|t| (m.params.clone(), t)))
        .collect();
    ConfigSet::new(cleans, backdoors)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TargetPolicy {
    /// Always `template.target`.
    Fixed,
    /// Model `i` targets class `(offset + i) % k`.
    Cycle { offset: usize },
}

/// Generates `count` models: clean when `template.attack` is `None`,
/// otherwise attacked per `targets`.
pub fn generate_models(
    template: &SynthSpec,
    count: usize,
    targets: TargetPolicy,
    master_seed: u64,
    stream: u64,
) -> Result<Vec<LabeledModel>> {
    template.validate()?;
    (0..count)
        .map(|i| {
            let seed = derive_seed(master_seed, stream, i as u64);
            let clean = generate_clean(&SynthSpec {
                attack: Attack::None,
                seed,
                ..template.clone()
            })?;
            if template.attack == Attack::None {
                return Ok(LabeledModel {
                    params: clean,
                    attack: Attack::None,
                    target: None,
                    seed,
                });
            }
            let target = match targets {
                TargetPolicy::Fixed => template.target,
                TargetPolicy::Cycle { offset } => (offset + i) % template.k,
            };
            let spec = SynthSpec {
                target,
                seed: derive_seed(seed, INJECT_STREAM, 0),
                ..template.clone()
            };
            Ok(LabeledModel {
                params: inject(&clean, &spec)?,
                attack: template.attack,
                target: Some(target),
                seed,
            })
        })
        .collect()
}

/// Seed-indexed configuration and held-out evaluation sets.
///
/// Attacked members take their strength from `template.strength`; targets
/// cycle through all classes across the attacked members of each split.
pub fn generate_benchmark(
    template: &SynthSpec,
    attacks: &[Attack],
    counts: BenchmarkCounts,
    master_seed: u64,
) -> Result<Benchmark> {
    if attacks.is_empty() || attacks.contains(&Attack::None) {
        return Err(Error::InvalidAttack(
            "benchmark needs at least one attack, and none of them may be none".into(),
        ));
    }
    if counts.config_clean == 0 || counts.config_per_attack == 0 {
        return Err(Error::InvalidSpec(
            "configuration counts must be >= 1".into(),
        ));
    }
    let split = |n_clean: usize, n_attack: usize, split_id: u64| -> Result<Vec<LabeledModel>> {
        let clean_spec = SynthSpec {
            attack: Attack::None,
            ..template.clone()
        };
        let mut out = generate_models(
            &clean_spec,
            n_clean,
            TargetPolicy::Fixed,
            master_seed,
            split_id << 8,
        )?;
        for (a, &attack) in attacks.iter().enumerate() {
            let spec = SynthSpec {
                attack,
                ..template.clone()
            };
            out.extend(generate_models(
                &spec,
                n_attack,
                TargetPolicy::Cycle {
                    offset: a * n_attack,
                },
                master_seed,
                (split_id << 8) | (a as u64 + 1),
            )?);
        }
        Ok(out)
    };
    Ok(Benchmark {
        config: split(counts.config_clean, counts.config_per_attack, 1)?,
        eval: split(counts.eval_clean, counts.eval_per_attack, 2)?,
    })
}

/// Writes each model as `model_NNNNN.dfbs` plus a `labels.csv` of
/// `path,target` rows (empty target for clean models).
pub fn write_models(dir: &Path, models: &[LabeledModel]) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    let mut paths = Vec::with_capacity(models.len());
    let mut labels = csv::Writer::from_writer(Vec::new());
    labels
        .write_record(["path", "target"])
        .map_err(|e| Error::Labels(e.to_string()))?;
    for (i, m) in models.iter().enumerate() {
        let name = format!("model_{i:05}.dfbs");
        let path = dir.join(&name);
        write_atomic(&path, &m.params.to_binary())?;
        let target = m.target.map(|t| t.to_string()).unwrap_or_default();
        labels
            .write_record([name.as_str(), target.as_str()])
            .map_err(|e| Error::Labels(e.to_string()))?;
        paths.push(path);
    }
    let bytes = labels
        .into_inner()
        .map_err(|e| Error::Labels(e.to_string()))?;
    write_atomic(&dir.join(LABELS_FILE), &bytes)?;
    Ok(paths)
}
