//! Penalized logistic regression by accelerated proximal gradient, used for
//! the L1 regularization path and recursive feature elimination.

use rayon::prelude::*;

use super::FeatureTable;
use crate::calibration::ScoredConfig;
use crate::error::{Error, Result};
use crate::indicators::INDICATOR_COUNT;

pub const MAX_ITERATIONS: usize = 5000;
pub const STEP_TOLERANCE: f64 = 1e-6;
pub const L1_PATH_POINTS: usize = 20;
pub const L1_PATH_MIN: f64 = 1e-3;
pub const L1_PATH_MAX: f64 = 1e1;
pub const RFE_L2_PENALTY: f64 = 1e-2;

/// Column-standardized features (zero mean, unit population std); constant
/// columns are left at zero.
#[derive(Debug, Clone)]
pub struct Standardized {
    data: Vec<f64>,
    n: usize,
    p: usize,
}

impl Standardized {
    pub fn new(table: &FeatureTable) -> Self {
        let n = table.rows.len();
        let p = INDICATOR_COUNT;
        let mut data = vec![0.0; n * p];
        for j in 0..p {
            let col = table.column(j);
            let mean = crate::stats::mean(&col);
            let std = crate::stats::population_std(&col);
            if crate::stats::is_constant(&col) || std == 0.0 {
                continue;
            }
            for (i, v) in col.iter().enumerate() {
                data[i * p + j] = (v - mean) / std;
            }
        }
        Self { data, n, p }
    }

    fn at(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.p + j]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LogisticFit {
    /// Coefficients aligned with the `active` features passed to the fit.
    pub coef: Vec<f64>,
    pub intercept: f64,
    pub iterations: usize,
    pub converged: bool,
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Largest eigenvalue of `A^T A / n` for `A = [X_active, 1]` by power iteration.
fn lipschitz_bound(x: &Standardized, active: &[usize]) -> f64 {
    let m = active.len() + 1;
    let col = |i: usize, c: usize| {
        if c < active.len() {
            x.at(i, active[c])
        } else {
            1.0
        }
    };
    let mut gram = vec![0.0; m * m];
    for i in 0..x.n {
        for a in 0..m {
            let va = col(i, a);
            if va == 0.0 {
                continue;
            }
            for b in a..m {
                gram[a * m + b] += va * col(i, b);
            }
        }
    }
    let n = x.n.max(1) as f64;
    for a in 0..m {
        for b in a..m {
            gram[a * m + b] /= n;
            gram[b * m + a] = gram[a * m + b];
        }
    }
    let mut v = vec![1.0 / (m as f64).sqrt(); m];
    let mut eig = 0.0;
    for _ in 0..100 {
        let w: Vec<f64> = (0..m)
            .map(|a| (0..m).map(|b| gram[a * m + b] * v[b]).sum())
            .collect();
        let norm = w.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 {
            break;
        }
        eig = norm;
        v = w.into_iter().map(|x| x / norm).collect();
    }
    // Small safety margin: power iteration approaches the top eigenvalue from below.
    eig * 1.01 + 1e-12
}

/// Minimizes mean logistic loss + `l1 * |w|_1` + `l2 / 2 * |w|^2` over the
/// `active` features (intercept unpenalized) with FISTA and adaptive restart.
pub fn fit_logistic(
    x: &Standardized,
    labels: &[bool],
    active: &[usize],
    l1: f64,
    l2: f64,
    warm: Option<&LogisticFit>,
) -> LogisticFit {
    let m = active.len();
    let n = x.n as f64;
    let step = 1.0 / (0.25 * lipschitz_bound(x, active) + l2);
    let y: Vec<f64> = labels.iter().map(|&l| f64::from(u8::from(l))).collect();

    let mut cur: Vec<f64> = match warm {
        Some(w) if w.coef.len() == m => w.coef.iter().copied().chain([w.intercept]).collect(),
        _ => vec![0.0; m + 1],
    };
    let mut prev = cur.clone();
    let mut look = cur.clone();
    let mut t = 1.0f64;
    let mut grad = vec![0.0; m + 1];

    for iter in 1..=MAX_ITERATIONS {
        grad.iter_mut().for_each(|g| *g = 0.0);
        for (i, yi) in y.iter().enumerate() {
            let mut z = look[m];
            for (c, &j) in active.iter().enumerate() {
                z += x.at(i, j) * look[c];
            }
            let r = sigmoid(z) - yi;
            for (c, &j) in active.iter().enumerate() {
                grad[c] += r * x.at(i, j);
            }
            grad[m] += r;
        }
        for (c, g) in grad.iter_mut().enumerate() {
            *g /= n;
            if c < m {
                *g += l2 * look[c];
            }
        }

        let mut next: Vec<f64> = look.iter().zip(&grad).map(|(v, g)| v - step * g).collect();
        let shrink = step * l1;
        for v in &mut next[..m] {
            *v = v.signum() * (v.abs() - shrink).max(0.0);
        }

        let delta = next
            .iter()
            .zip(&cur)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        prev.clone_from(&cur);
        cur = next;
        if delta < STEP_TOLERANCE {
            return LogisticFit {
                coef: cur[..m].to_vec(),
                intercept: cur[m],
                iterations: iter,
                converged: true,
            };
        }

        // Restart momentum when it points against the descent direction.
        let against: f64 = look
            .iter()
            .zip(&cur)
            .zip(&prev)
            .map(|((l, c), p)| (l - c) * (c - p))
            .sum();
        if against > 0.0 {
            t = 1.0;
        }
        let t_next = (1.0 + (1.0 + 4.0 * t * t).sqrt()) / 2.0;
        let beta = (t - 1.0) / t_next;
        look = cur
            .iter()
            .zip(&prev)
            .map(|(c, p)| c + beta * (c - p))
            .collect();
        t = t_next;
    }
    LogisticFit {
        coef: cur[..m].to_vec(),
        intercept: cur[m],
        iterations: MAX_ITERATIONS,
        converged: false,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct L1PathPoint {
    pub penalty: f64,
    /// Canonical ids with nonzero coefficients, ascending.
    pub support: Vec<usize>,
    pub coef: Vec<f64>,
    /// Calibrated detection F1 of the support; `None` for an empty support
    /// or when no configuration set was supplied.
    pub f1: Option<f64>,
    pub converged: bool,
    pub iterations: usize,
}

fn penalty_grid() -> Vec<f64> {
    let (lo, hi) = (L1_PATH_MIN.log10(), L1_PATH_MAX.log10());
    (0..L1_PATH_POINTS)
        .map(|i| 10f64.powf(lo + (hi - lo) * i as f64 / (L1_PATH_POINTS - 1) as f64))
        .collect()
}

/// L1 path over 20 log-spaced penalties in `[1e-3, 1e1]`, ascending.
pub fn l1_logistic_path(table: &FeatureTable) -> Result<Vec<L1PathPoint>> {
    table.require_both_labels()?;
    let x = Standardized::new(table);
    let active: Vec<usize> = (0..INDICATOR_COUNT).collect();
    let mut path = Vec::with_capacity(L1_PATH_POINTS);
    let mut warm: Option<LogisticFit> = None;
    // Solve from strong to weak penalty so each fit warm-starts from a sparser one.
    for penalty in penalty_grid().into_iter().rev() {
        let fit = fit_logistic(&x, &table.labels, &active, penalty, 0.0, warm.as_ref());
        path.push(L1PathPoint {
            penalty,
            support: (0..INDICATOR_COUNT)
                .filter(|&j| fit.coef[j] != 0.0)
                .collect(),
            coef: fit.coef.clone(),
            f1: None,
            converged: fit.converged,
            iterations: fit.iterations,
        });
        warm = Some(fit);
    }
    path.reverse();
    Ok(path)
}

/// L1 path with each nonempty support scored by calibrated F1 on `scored`.
pub fn select_l1_logistic(table: &FeatureTable, scored: &ScoredConfig) -> Result<Vec<L1PathPoint>> {
    let mut path = l1_logistic_path(table)?;
    path.par_iter_mut()
        .filter(|p| !p.support.is_empty())
        .try_for_each(|p| -> Result<()> {
            p.f1 = Some(scored.fit(&p.support)?.1.f1);
            Ok(())
        })?;
    Ok(path)
}

/// Fraction of adjacent path pairs whose supports are nested (the support at
/// the larger penalty is a subset of the one at the smaller penalty).
pub fn path_nesting_fraction(path: &[L1PathPoint]) -> f64 {
    if path.len() < 2 {
        return 1.0;
    }
    let nested = path
        .windows(2)
        .filter(|w| w[1].support.iter().all(|j| w[0].support.contains(j)))
        .count();
    nested as f64 / (path.len() - 1) as f64
}

/// Orders features by the largest penalty at which they stay nonzero, then by
/// coefficient magnitude at the weakest penalty, then by index.
pub fn l1_survival_ranking(path: &[L1PathPoint]) -> Vec<usize> {
    let survival = |j: usize| {
        path.iter()
            .filter(|p| p.coef[j] != 0.0)
            .map(|p| p.penalty)
            .fold(0.0, f64::max)
    };
    let weakest = |j: usize| path.first().map_or(0.0, |p| p.coef[j].abs());
    let mut order: Vec<usize> = (0..INDICATOR_COUNT).collect();
    order.sort_by(|&a, &b| {
        survival(b)
            .total_cmp(&survival(a))
            .then(weakest(b).total_cmp(&weakest(a)))
            .then(a.cmp(&b))
    });
    order
}

#[derive(Debug, Clone, PartialEq)]
pub struct RfeOutcome {
    /// Surviving ids, ascending.
    pub chosen: Vec<usize>,
    /// Survivors by final |coef|, then eliminated features latest first.
    pub ranking: Vec<usize>,
    pub converged: bool,
}

/// Recursive feature elimination with an L2-penalized logistic model,
/// dropping the weakest 10% (at least one) per round until `n_target` remain.
pub fn select_rfe(table: &FeatureTable, n_target: usize) -> Result<RfeOutcome> {
    if n_target == 0 || n_target > INDICATOR_COUNT {
        return Err(Error::InvalidSpec(format!(
            "RFE target {n_target} not in [1, {INDICATOR_COUNT}]"
        )));
    }
    table.require_both_labels()?;
    let x = Standardized::new(table);
    let mut active: Vec<usize> = (0..INDICATOR_COUNT).collect();
    let mut eliminated: Vec<usize> = Vec::new();
    let mut converged = true;
    let mut last: Option<LogisticFit> = None;

    while active.len() > n_target {
        let fit = fit_logistic(&x, &table.labels, &active, 0.0, RFE_L2_PENALTY, None);
        converged &= fit.converged;
        let drop = (active.len() / 10).max(1).min(active.len() - n_target);
        let mut order: Vec<usize> = (0..active.len()).collect();
        order.sort_by(|&a, &b| {
            fit.coef[a]
                .abs()
                .total_cmp(&fit.coef[b].abs())
                .then(active[a].cmp(&active[b]))
        });
        let removed: Vec<usize> = order[..drop].iter().map(|&c| active[c]).collect();
        eliminated.extend(&removed);
        active.retain(|j| !removed.contains(j));
        last = None;
    }

    let final_fit = match last {
        Some(f) => f,
        None => fit_logistic(&x, &table.labels, &active, 0.0, RFE_L2_PENALTY, None),
    };
    converged &= final_fit.converged;
    let mut survivors: Vec<(usize, f64)> = active
        .iter()
        .zip(&final_fit.coef)
        .map(|(&j, c)| (j, c.abs()))
        .collect();
    survivors.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    let mut ranking: Vec<usize> = survivors.iter().map(|(j, _)| *j).collect();
    ranking.extend(eliminated.iter().rev());

    let mut chosen = active;
    chosen.sort_unstable();
    Ok(RfeOutcome {
        chosen,
        ranking,
        converged,
    })
}

/// Full elimination order down to one feature.
pub fn rfe_ranking(table: &FeatureTable) -> Result<RfeOutcome> {
    select_rfe(table, 1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    /// Feature 7 separates the labels; everything else is noise.
    fn planted_table(n: usize, seed: u64) -> FeatureTable {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let labels: Vec<bool> = (0..n).map(|i| i % 2 == 1).collect();
        let rows = labels
            .iter()
            .map(|&l| {
                (0..INDICATOR_COUNT)
                    .map(|j| {
                        let noise: f64 = rng.sample(StandardNormal);
                        if j == 7 {
                            if l {
                                2.0
                            } else {
                                -2.0
                            }
                        } else {
                            noise
                        }
                    })
                    .collect()
            })
            .collect();
        FeatureTable::new(rows, labels).unwrap()
    }

    #[test]
    fn strongest_penalty_empties_support() {
        let path = l1_logistic_path(&planted_table(120, 1)).unwrap();
        assert_eq!(path.len(), L1_PATH_POINTS);
        assert!(path.last().unwrap().support.is_empty());
        assert!((path[0].penalty - L1_PATH_MIN).abs() < 1e-15);
        assert!((path.last().unwrap().penalty - L1_PATH_MAX).abs() < 1e-12);
    }

    #[test]
    fn support_size_shrinks_along_path() {
        let path = l1_logistic_path(&planted_table(120, 2)).unwrap();
        for w in path.windows(2) {
            assert!(
                w[1].support.len() <= w[0].support.len(),
                "{} -> {}",
                w[0].penalty,
                w[1].penalty
            );
        }
    }

    #[test]
    fn planted_feature_survives_longest() {
        let path = l1_logistic_path(&planted_table(200, 3)).unwrap();
        let last_nonempty = path.iter().rev().find(|p| !p.support.is_empty()).unwrap();
        assert_eq!(last_nonempty.support, vec![7]);
        assert_eq!(l1_survival_ranking(&path)[0], 7);
    }

    #[test]
    fn rfe_sizes_and_planted_survivor() {
        let table = planted_table(120, 4);
        for n in [1, 5, 20, 62] {
            let out = select_rfe(&table, n).unwrap();
            assert_eq!(out.chosen.len(), n);
            assert_eq!(out.ranking.len(), INDICATOR_COUNT);
            assert!(out.chosen.contains(&7));
        }
        assert_eq!(select_rfe(&table, 1).unwrap().chosen, vec![7]);
        assert_eq!(
            select_rfe(&table, 62).unwrap().chosen,
            (0..62).collect::<Vec<_>>()
        );
        assert!(select_rfe(&table, 0).is_err());
        assert!(select_rfe(&table, 63).is_err());
    }

    #[test]
    fn degenerate_labels_are_rejected() {
        let mut table = planted_table(20, 5);
        table.labels = vec![false; 20];
        assert!(matches!(
            l1_logistic_path(&table),
            Err(Error::DegenerateLabels)
        ));
    }
}
